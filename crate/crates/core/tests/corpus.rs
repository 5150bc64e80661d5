use mtkws_core::corpus::{
    chirp_template, generate_synthetic_corpus, load_manifest, sample_few_shot, Split, SynthSpec, TemplateLayout,
};
use mtkws_core::mixing::Waveform;
use mtkws_core::Error;

fn spec(n_keywords: usize, per_class: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        n_keywords,
        per_class,
        duration_s: 1.0,
        sample_rate: 16000,
        seed,
        split: Split::Train,
        layout: TemplateLayout::default(),
    }
}

/// Power on a 10 Hz grid from 100 Hz to 7 kHz, by direct DFT summation.
fn power_spectrum(x: &[f64], sr: f64) -> Vec<(f64, f64)> {
    (10..700)
        .map(|i| {
            let f = i as f64 * 10.0;
            let w = 2.0 * std::f64::consts::PI * f / sr;
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                re += v * (w * n as f64).cos();
                im -= v * (w * n as f64).sin();
            }
            (f, re * re + im * im)
        })
        .collect()
}

fn peak(p: &[(f64, f64)]) -> f64 {
    p.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0
}

fn centroid(p: &[(f64, f64)]) -> f64 {
    p.iter().map(|(f, m)| f * m).sum::<f64>() / p.iter().map(|(_, m)| m).sum::<f64>()
}

fn two_class_spectra(layout: TemplateLayout) -> Vec<Vec<(f64, f64)>> {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_corpus(&SynthSpec { layout, ..spec(2, 1, 7) }, dir.path()).unwrap();
    assert_eq!(m.records.len(), 2);
    m.records
        .iter()
        .map(|r| power_spectrum(Waveform::read_wav(&dir.path().join(&r.path)).unwrap().samples(), 16000.0))
        .collect()
}

#[test]
fn ten_by_twenty_is_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_corpus(&spec(10, 20, 7), dir.path()).unwrap();
    assert_eq!(m.records.len(), 200);
    for (k, ids) in m.records_by_class().iter().enumerate() {
        assert_eq!(ids.len(), 20, "class {k}");
    }
    assert_eq!(load_manifest(&dir.path().join("train.tsv")).unwrap(), m);
    for r in &m.records {
        let w = Waveform::read_wav(&dir.path().join(&r.path)).unwrap();
        assert!((w.len() as f64 - r.duration_s * r.sample_rate as f64).abs() <= 1.0);
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_synthetic_corpus(&spec(3, 4, 7), a.path()).unwrap();
    generate_synthetic_corpus(&spec(3, 4, 7), b.path()).unwrap();
    for r in &ma.records {
        assert_eq!(
            std::fs::read(a.path().join(&r.path)).unwrap(),
            std::fs::read(b.path().join(&r.path)).unwrap()
        );
    }
    let c = tempfile::tempdir().unwrap();
    let mc = generate_synthetic_corpus(&spec(3, 4, 8), c.path()).unwrap();
    assert_ne!(
        std::fs::read(a.path().join(&ma.records[0].path)).unwrap(),
        std::fs::read(c.path().join(&mc.records[0].path)).unwrap()
    );
}

#[test]
fn two_classes_have_distinct_spectral_peaks() {
    let spread = TemplateLayout::SPREAD;
    let spectra = two_class_spectra(spread);
    let peaks: Vec<f64> = spectra.iter().map(|p| peak(p)).collect();
    for (k, p) in peaks.iter().enumerate() {
        let (base, sweep) = chirp_template(k, 2, &spread).unwrap();
        assert!(*p >= base - 20.0 && *p <= base + sweep + 20.0, "class {k} peak {p}");
    }
    assert!((peaks[0] - peaks[1]).abs() >= 300.0, "{peaks:?}");

    // Overlapping default layout: peaks stay inside each sweep and the
    // spectral centroids sit one spacing apart.
    let layout = TemplateLayout::default();
    let spectra = two_class_spectra(layout);
    for (k, p) in spectra.iter().enumerate() {
        let (base, sweep) = chirp_template(k, 2, &layout).unwrap();
        let f = peak(p);
        assert!(f >= base - 20.0 && f <= base + sweep + 20.0, "class {k} peak {f}");
    }
    let shift = centroid(&spectra[1]) - centroid(&spectra[0]);
    assert!(shift > 150.0 && shift < 450.0, "centroid shift {shift}");
}

#[test]
fn few_shot_exhaustion_and_shortage() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_corpus(&spec(3, 2, 1), dir.path()).unwrap();
    let all: std::collections::BTreeSet<_> = m.records.iter().map(|r| r.id.clone()).collect();
    for s in sample_few_shot(&m, 2, 3, 5).unwrap() {
        assert_eq!(s.record_ids.iter().cloned().collect::<std::collections::BTreeSet<_>>(), all);
    }
    match sample_few_shot(&m, 3, 1, 5) {
        Err(Error::InsufficientData(msg)) => assert!(msg.contains("kw00"), "{msg}"),
        other => panic!("expected insufficient data, got {other:?}"),
    }
}
