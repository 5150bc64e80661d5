use mtkws_demo::{eer_curve, mix_explorer, temperature_explorer};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).expect("valid json")
}

#[test]
fn mix_reports_union_label() {
    let v = parse(mix_explorer(1, "2,7", "0.6,0.3"));
    assert!(v.get("error").is_none(), "{v}");
    assert_eq!(v["present"], serde_json::json!(["kw02", "kw07"]));
    assert_eq!(v["sources"].as_array().unwrap().len(), 2);
    assert_eq!(v["mixture"]["spectrum"].as_array().unwrap().len(), 40);
}

#[test]
fn mix_rejects_bad_input() {
    assert!(parse(mix_explorer(1, "2,7", "0.6")).get("error").is_some());
    assert!(parse(mix_explorer(1, "2,70", "0.6,0.3")).get("error").is_some());
    assert!(parse(mix_explorer(1, "x", "0.5")).get("error").is_some());
}

#[test]
fn lower_temperature_sharpens_softmax() {
    let hot = parse(temperature_explorer(3, 32, 1.0));
    let cold = parse(temperature_explorer(3, 32, 0.05));
    let h = hot["softmax_entropy"].as_f64().unwrap();
    let c = cold["softmax_entropy"].as_f64().unwrap();
    assert!(c < h, "{c} vs {h}");
    let total: f64 = cold["softmax"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(parse(temperature_explorer(3, 32, 0.0)).get("error").is_some());
}

#[test]
fn eer_curve_matches_hand_count() {
    // At 0.6: FAR 1/2, FRR 0. At 0.8: FAR 0, FRR 1/2. Equal gaps keep 0.6.
    let v = parse(eer_curve("0.6,0.8", "0.2,0.6"));
    assert_eq!(v["thresholds"].as_array().unwrap().len(), 3);
    assert_eq!(v["far"], serde_json::json!([1.0, 0.5, 0.0]));
    assert_eq!(v["frr"], serde_json::json!([0.0, 0.0, 0.5]));
    assert_eq!(v["eer"].as_f64().unwrap(), 0.25);
    let separable = parse(eer_curve("0.9,0.8", "0.1,0.2"));
    assert_eq!(separable["eer"].as_f64().unwrap(), 0.0);
    assert!(parse(eer_curve("0.9", "")).get("error").is_some());
}
