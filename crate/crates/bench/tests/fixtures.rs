use tseforge::clue::ClueSpec;
use tseforge_bench::{batch, model, sample};

#[test]
fn fixtures_are_consistent() {
    let s = sample(0.5, 3).unwrap();
    assert_eq!(s.mixture.len(), 8000);
    assert_eq!(s.targets.len(), 2);
    let b = batch(2, 0.5).unwrap();
    assert_eq!(b.mixtures.len(), 4);
    assert!(b.references.iter().all(|r| r.len() == 8000));
}

#[test]
fn bench_models_run() {
    let s = sample(0.5, 3).unwrap();
    for preset in ["soundbeam-m2d-full", "waveformer-m2d-full"] {
        let m = model(preset).unwrap();
        let y = m.extract(&s.mixture, &ClueSpec::label(s.targets[0].class)).unwrap();
        assert_eq!(y.len(), s.mixture.len());
        assert!(y.samples().iter().all(|v| v.is_finite()));
    }
}
