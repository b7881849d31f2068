use super::*;
use crate::data::{generate_synthetic, SynthConfig};
use crate::model::{ModelConfig, OdCed};

fn series(t: usize) -> OdTensor {
    OdTensor::new(Array3::from_shape_fn((2, 2, t), |(i, j, tt)| (i + 2 * j + tt) as f64)).unwrap()
}

#[test]
fn window_counts_and_split() {
    let d = make_windows(&series(10), 3, 1, [0.5, 0.25, 0.25]).unwrap();
    assert_eq!(d.n_windows(), 7);
    let d = make_windows(&series(11), 3, 1, [0.5, 0.25, 0.25]).unwrap();
    assert_eq!((d.train.len(), d.val.len(), d.test.len()), (4, 2, 2));
    let d = make_windows(&series(5), 3, 2, [1.0, 0.0, 0.0]).unwrap();
    assert_eq!(d.n_windows(), 1);
    assert!(make_windows(&series(4), 3, 2, [0.5, 0.25, 0.25]).is_err());
}

#[test]
fn multi_step_targets_do_not_cross_splits() {
    let d = make_windows(&series(40), 3, 4, [0.5, 0.25, 0.25]).unwrap();
    let slots = |r: Range<usize>| r.flat_map(|w| w + 3..w + 7).collect::<std::collections::BTreeSet<_>>();
    let (tr, va, te) = (slots(d.train.clone()), slots(d.val.clone()), slots(d.test.clone()));
    assert!(tr.is_disjoint(&va) && va.is_disjoint(&te) && tr.is_disjoint(&te));
    assert!(tr.last() < va.first() && va.last() < te.first());
}

#[test]
fn window_contents() {
    let d = make_windows(&series(10), 3, 2, [0.5, 0.25, 0.25]).unwrap();
    assert_eq!(d.history(2)[[1, 0, 0]], 3.0);
    assert_eq!(d.target(2)[[0, 0, 1]], 6.0);
    let stacked = d.stacked_targets(0..2);
    assert_eq!(stacked.dim(), (2, 2, 4));
    assert_eq!(stacked[[0, 0, 2]], 4.0);
}

#[test]
fn step_decay() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_at(1), 0.004);
    assert_eq!(c.lr_at(50), 0.004);
    assert_eq!(c.lr_at(51), 0.002);
    assert_eq!(c.lr_at(101), 0.001);
}

#[test]
fn config_validation() {
    let bad = TrainConfig {
        split: [0.5, 0.5, 0.5],
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}

struct Setup {
    data: WindowDataset,
    init: Forecaster,
    synth: crate::data::SyntheticData,
}

fn setup(seed: u64, days: usize) -> Setup {
    let synth = SynthConfig {
        n_cells: 30,
        n_communities: 6,
        days,
        poi_categories: 4,
        // flows between members of different communities are then always zero
        background_rate: 0.0,
        ..SynthConfig::default()
    };
    let s = generate_synthetic(&synth, seed).unwrap();
    let cfg = ModelConfig {
        n_cells: 30,
        n_super: 6,
        k: 4,
        tau: 1,
        d: 16,
        heads: 2,
        n_queries: 4,
        poi_dim: 4,
        ffn_hidden: 32,
        pair_hidden: 8,
        ..ModelConfig::default()
    };
    let model = OdCed::new(cfg.clone(), seed).unwrap();
    let init = Forecaster::with_cell_poi(model, s.truth.clone(), &s.poi).unwrap();
    let data = make_windows(&s.od, cfg.k, cfg.tau, [0.6, 0.2, 0.2]).unwrap();
    Setup { data, init, synth: s }
}

#[test]
fn deterministic_given_seed() {
    let s = setup(3, 3);
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 8,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = train(s.init.clone(), &s.data, &cfg).unwrap();
    let b = train(s.init.clone(), &s.data, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.model.params().values(), b.best.model.params().values());
}

#[test]
fn training_improves_fit_and_separates_planted_flows() {
    let s = setup(5, 10);
    let cfg = TrainConfig {
        max_epochs: 30,
        batch_size: 8,
        lr0: 0.01,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let out = train_with(s.init, &s.data, &cfg, |r| seen.push(*r)).unwrap();
    assert_eq!(seen.len(), 31);
    assert_eq!(seen[0].epoch, 0);
    let last = out.history.last().unwrap();
    assert!(last.train_nll < out.initial.train_nll);
    let best_wmape = out.history.iter().map(|r| r.val_wmape).fold(f64::INFINITY, f64::min);
    assert!(
        best_wmape <= 0.8 * out.initial.val_wmape,
        "epoch 0 wMAPE {} vs best {best_wmape}",
        out.initial.val_wmape
    );
    let best = out.history.iter().find(|r| r.epoch == out.best_epoch).unwrap();
    assert!(out.history.iter().all(|r| r.val_nll >= best.val_nll));

    let pred = predict_range(&out.best, &s.data, s.data.test.clone()).unwrap();
    let c = &s.synth.centers;
    let labels = s.synth.truth.labels();
    let member = |l: usize| (0..labels.len()).find(|&i| labels[i] == l && !c.contains(&i)).unwrap();
    let (a, b) = (member(labels[c[0]]), member(labels[c[1]]));
    assert_eq!(s.synth.base[[a, b]], 0.0);
    let mean_flow = |i: usize, j: usize| pred.slice(s![i, j, ..]).mean().unwrap();
    let planted = mean_flow(c[0], c[1]);
    assert!(planted > mean_flow(a, b), "center flow {planted} vs empty flow {}", mean_flow(a, b));
}

#[test]
fn reported_train_loss_matches_parameters_at_epoch_start() {
    // with a zero learning rate the epoch's training NLL is the mean over windows
    let s = setup(7, 3);
    let coarse = CoarseSeries::new(&s.data, &s.init).unwrap();
    let (full, _) = evaluate_range(&s.init, &s.data, &coarse, s.data.train.clone()).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        batch_size: 5,
        lr0: 1e-300,
        ..TrainConfig::default()
    };
    let out = train(s.init, &s.data, &cfg).unwrap();
    assert!((out.history[0].train_nll - full).abs() < 1e-10 * full.abs().max(1.0));
    assert!((out.initial.train_nll - full).abs() < 1e-12 * full.abs().max(1.0));
}

#[test]
fn non_finite_parameters_are_reported() {
    let mut s = setup(9, 3);
    let params = s.init.model.params_mut();
    let id = params.find("head.b").unwrap();
    params.get_mut(id).fill(f64::NAN);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    match train(s.init, &s.data, &cfg) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn mismatched_dataset_rejected() {
    let s = setup(1, 3);
    let other = make_windows(&s.data.series, 5, 1, [0.5, 0.25, 0.25]).unwrap();
    assert!(train(s.init, &other, &TrainConfig::default()).is_err());
}
