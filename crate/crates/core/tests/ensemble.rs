mod common;
mod fixture;

use fixture::{setup, train_config};
use platescope::ensemble::*;
use platescope::model::Head;
use platescope::plate_data::Split;
use platescope::trainer::{accuracy_on, fit, predict_proba, TrainState};
use platescope::Error;
use proptest::prelude::*;

fn trained_pair(s: &fixture::Setup, seed: u64, epochs: usize) -> Vec<TrainState> {
    let cfg = train_config(epochs);
    [1.0, 2.0]
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let mut m = TrainState::new(&s.backbone.wide(w), fixture::arcface(8), seed + i as u64).unwrap();
            fit(&mut m, &cfg, &s.data, &s.images, None).unwrap();
            m
        })
        .collect()
}

#[test]
fn single_and_identical_members() {
    let s = setup(0);
    let members = trained_pair(&s, 1, 2);
    let idx: Vec<usize> = s.data.unlabeled.clone();
    let solo = predict_proba(&members[0].teacher, &members[0].head, &s.images, &idx).unwrap();
    assert_eq!(ensemble_predict(&members[..1], &s.images, &idx).unwrap(), solo);
    let twins = vec![members[0].clone(), members[0].clone()];
    let avg = ensemble_predict(&twins, &s.images, &idx).unwrap();
    for (a, b) in avg.iter().flatten().zip(solo.iter().flatten()) {
        assert!((a - b).abs() < 1e-15);
    }
    let pair = ensemble_predict(&members, &s.images, &idx).unwrap();
    assert!(pair.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-10));
}

#[test]
fn members_must_share_class_count() {
    let s = setup(1);
    let a = s.state(0);
    let mut other = s.backbone.clone();
    other.num_classes = 5;
    let b = TrainState::new(&other, Head::Softmax, 0).unwrap();
    assert!(matches!(ensemble_predict(&[a, b], &s.images, &[0, 1]), Err(Error::Shape { .. })));
    assert!(EnsembleState::new(Vec::new()).is_err());
}

#[test]
fn refresh_is_gated_on_strict_improvement() {
    let s = setup(2);
    let mut state = EnsembleState::new(trained_pair(&s, 3, 3)).unwrap();
    assert!(maybe_refresh_pseudo_labels(&mut state, &s.dataset.manifest, &s.images, &s.data).unwrap());
    assert!(state.best_val_accuracy.is_finite());
    let labels = state.pseudo_labels.clone();
    let best = state.best_val_accuracy;
    assert!(!maybe_refresh_pseudo_labels(&mut state, &s.dataset.manifest, &s.images, &s.data).unwrap());
    assert_eq!(state.pseudo_labels, labels);
    assert_eq!(state.best_val_accuracy, best);

    let m = &s.dataset.manifest;
    for (w, (_, confident)) in &labels {
        assert!(*confident);
        assert_eq!(m.record_for_image(*w).unwrap().split, Split::Test);
    }
    for (plate, records) in m.by_plate() {
        let mut got: Vec<usize> = records.iter().filter_map(|r| labels.get(&r.image_index).map(|l| l.0)).collect();
        got.sort_unstable();
        assert_eq!(got, m.eligible_test_classes(plate), "plate {plate}");
    }
}

#[test]
fn best_accuracy_never_decreases() {
    let s = setup(3);
    let cfg = train_config(6);
    let members: Vec<TrainState> = [1.0, 2.0]
        .iter()
        .map(|&w| TrainState::new(&s.backbone.wide(w), fixture::arcface(8), 4).unwrap())
        .collect();
    let mut state = EnsembleState::new(members).unwrap();
    let mut best = f64::NEG_INFINITY;
    let mut refreshes = 0;
    for _ in 0..cfg.total_epochs {
        state.train_epoch(&cfg, &s.data, &s.images).unwrap();
        let before = state.pseudo_labels.clone();
        let refreshed = maybe_refresh_pseudo_labels(&mut state, &s.dataset.manifest, &s.images, &s.data).unwrap();
        assert!(state.best_val_accuracy >= best);
        assert_eq!(refreshed, state.best_val_accuracy > best);
        if !refreshed {
            assert_eq!(state.pseudo_labels, before);
        }
        refreshes += usize::from(refreshed);
        best = state.best_val_accuracy;
    }
    assert!(refreshes >= 1);
}

#[test]
fn fit_ensemble_dumps_each_refresh() {
    let s = setup(4);
    let cfg = train_config(4);
    let members: Vec<TrainState> = (0..2).map(|i| s.state(i)).collect();
    let mut state = EnsembleState::new(members).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let logs = fit_ensemble(&mut state, &cfg, &s.dataset.manifest, &s.data, &s.images, 2, Some(dir.path())).unwrap();
    assert_eq!(logs.len(), 4);
    let mut dumps: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    dumps.sort();
    assert!(!dumps.is_empty() && dumps.len() <= 3);
    assert_eq!(read_pseudo_labels(dumps.last().unwrap()).unwrap(), state.pseudo_labels);
}

#[test]
fn ensemble_is_not_worse_than_its_weakest_member() {
    for seed in 0..3 {
        let s = setup(10 + seed);
        let members = trained_pair(&s, seed, 8);
        let worst = members
            .iter()
            .map(|m| accuracy_on(m, &s.images, &s.data.validation).unwrap())
            .fold(f64::INFINITY, f64::min);
        let ens = ensemble_accuracy(&members, &s.images, &s.data.validation).unwrap();
        assert!(ens >= worst, "seed {seed}: ensemble {ens} < weakest member {worst}");
    }
}

proptest! {
    #[test]
    fn unanimous_correct_members_give_a_correct_ensemble(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 2..5),
        target in 0usize..4,
    ) {
        // each member puts its largest mass on `target`
        let members: Vec<Vec<Vec<f64>>> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                let top = r.iter().cloned().fold(0.0, f64::max);
                r[target] = top + 0.5;
                let z: f64 = r.iter().sum();
                vec![r.iter().map(|v| v / z).collect()]
            })
            .collect();
        let avg = average_probabilities(&members).unwrap();
        prop_assert_eq!(platescope::trainer::argmax(&avg[0]), target);
        prop_assert!((avg[0].iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}
