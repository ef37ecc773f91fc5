use gtr_core::model::{Ablations, GtrModel, ModelConfig};
use gtr_core::synthetic::{category_tree, Corpus};
use gtr_core::tape::Tape;
use gtr_core::train::{evaluate, fit, train_epoch, TrainConfig, TrainState};

fn small_config() -> ModelConfig {
    ModelConfig { dim: 8, d_geo: 4, d_time: 4, time_freqs: 2, ..ModelConfig::default() }
}

fn build(corpus: &Corpus, ablations: Ablations, seed: u64) -> GtrModel {
    GtrModel::new(
        small_config(),
        ablations,
        corpus.counts,
        corpus.poi_coords.clone(),
        &corpus.anchor_points(),
        None,
        seed,
    )
    .unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, ..TrainConfig::default() }
}

#[test]
fn same_seed_same_run() {
    let corpus = category_tree(3, 4, 6, 2, 1);
    let mut a = build(&corpus, Ablations::default(), 9);
    let mut b = build(&corpus, Ablations::default(), 9);
    assert_eq!(a.store, b.store);
    let (mut sa, mut sb) = (TrainState::new(&a), TrainState::new(&b));
    fit(&mut a, &mut sa, &corpus.trajectories, &[], &cfg(2), 4, |_| {}).unwrap();
    fit(&mut b, &mut sb, &corpus.trajectories, &[], &cfg(2), 4, |_| {}).unwrap();
    assert_eq!(a.store, b.store);
    assert_eq!(sa.history, sb.history);
    let c = build(&corpus, Ablations::default(), 10);
    assert_ne!(a.store, c.store);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let corpus = category_tree(3, 4, 6, 2, 2);
    let mut straight = build(&corpus, Ablations::default(), 1);
    let mut s1 = TrainState::new(&straight);
    fit(&mut straight, &mut s1, &corpus.trajectories, &corpus.trajectories, &cfg(3), 5, |_| {}).unwrap();

    let mut part = build(&corpus, Ablations::default(), 1);
    let mut s2 = TrainState::new(&part);
    fit(&mut part, &mut s2, &corpus.trajectories, &corpus.trajectories, &cfg(2), 5, |_| {}).unwrap();
    let (mut resumed, mut s3) = (part.clone(), s2.clone());
    fit(&mut resumed, &mut s3, &corpus.trajectories, &corpus.trajectories, &cfg(3), 5, |_| {}).unwrap();

    assert_eq!(resumed.store, straight.store);
    assert_eq!(s3.history, s1.history);
    assert_eq!(s3.best_epoch, s1.best_epoch);
}

#[test]
fn zero_epochs_leave_the_initialisation() {
    let corpus = category_tree(2, 3, 5, 2, 3);
    let init = build(&corpus, Ablations::default(), 2);
    let mut m = init.clone();
    let mut s = TrainState::new(&m);
    fit(&mut m, &mut s, &corpus.trajectories, &[], &cfg(0), 1, |_| {}).unwrap();
    assert_eq!(m, init);
    assert!(s.history.is_empty() && s.best_params.is_none());
}

#[test]
fn every_ablation_trains() {
    let corpus = category_tree(3, 4, 6, 2, 4);
    let mut variants = vec![Ablations::default()];
    for name in Ablations::NAMES {
        let mut a = Ablations::default();
        a.enable(name).unwrap();
        variants.push(a);
    }
    for ab in variants {
        let label = ab.label();
        let mut m = build(&corpus, ab, 3);
        let mut s = TrainState::new(&m);
        let loss = train_epoch(&mut m, &mut s, &corpus.trajectories, &cfg(1), 3).unwrap();
        assert!(loss.is_finite() && loss > 0.0, "{label}: {loss}");
        let ev = evaluate(&m, &corpus.trajectories).unwrap();
        assert!(ev.poi.mrr > 0.0 && ev.poi.mrr <= 1.0, "{label}");
        let steps = m.mean_step_sizes(&corpus.trajectories[0]).unwrap();
        if m.ablations.no_ssm {
            assert!(steps.is_empty(), "{label}");
        } else {
            assert_eq!(steps.len(), corpus.trajectories[0].len(), "{label}");
            assert!(steps.iter().all(|s| *s > 0.0), "{label}");
        }
    }
}

/// Central differences on a strided sample of scalars, for both geometries.
#[test]
fn gradients_match_finite_differences() {
    let corpus = category_tree(2, 2, 4, 2, 5);
    for name in [None, Some("no_hyperbolic"), Some("no_stc"), Some("no_attention")] {
        let mut ab = Ablations::default();
        if let Some(n) = name {
            ab.enable(n).unwrap();
        }
        let mut m = build(&corpus, ab, 6);
        let batch: Vec<_> = corpus.trajectories.iter().take(2).collect();
        let eval = |m: &GtrModel| {
            let mut tape = Tape::new();
            let (l, _) = m.record_loss(&mut tape, &batch).unwrap();
            (tape, l)
        };
        let (tape, root) = eval(&m);
        let grads = tape.param_grads(root, m.store.len()).unwrap();
        let ids: Vec<_> = m.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        let h = 1e-5;
        let mut checked = 0;
        for id in ids {
            let n = m.store.get(id).data.len();
            for k in (0..n).step_by(7) {
                let g = grads.get(id).map_or(0.0, |g| g[k]);
                let v = m.store.get(id).data[k];
                m.store.get_mut(id).data[k] = v + h;
                let (tp, lp) = eval(&m);
                m.store.get_mut(id).data[k] = v - h;
                let (tm, lm) = eval(&m);
                m.store.get_mut(id).data[k] = v;
                let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name:?} {} [{k}]: analytic {g} vs numeric {fd}", m.store.param(id).name);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}

fn random_corpus(n_pois: usize, n_trajs: usize, len: usize, seed: u64) -> Corpus {
    use rand::Rng as _;
    let mut r = gtr_core::rng::stream(seed, gtr_core::rng::tags::SYNTHETIC, 70);
    let poi_category: Vec<usize> = (0..n_pois).map(|i| i % 3).collect();
    let poi_region: Vec<usize> = (0..n_pois).map(|i| i % 2).collect();
    let trajectories = (0..n_trajs)
        .map(|k| {
            let steps = (0..len)
                .map(|i| {
                    let poi = r.random_range(0..n_pois);
                    gtr_core::data::Step {
                        poi,
                        category: poi_category[poi],
                        region: poi_region[poi],
                        timestamp: gtr_core::synthetic::EPOCH_START + (k * 100 + i) as i64 * 3600,
                        tz_offset_min: 0,
                    }
                })
                .collect();
            gtr_core::data::Trajectory { user: k % 4, steps }
        })
        .collect();
    Corpus {
        trajectories,
        counts: [4, n_pois, 3, 2],
        poi_coords: (0..n_pois).map(|i| (40.7 + 0.01 * i as f64, -74.0 + 0.005 * i as f64)).collect(),
        poi_category,
        poi_region,
        labels: vec![None; n_trajs],
    }
}

/// With targets drawn independently of the prefix, the rank of the target
/// is uniform on `1..=K` whatever the scores are.
#[test]
fn untrained_model_scores_at_chance() {
    let k = 20;
    let corpus = random_corpus(k, 1000, 4, 8);
    let m = build(&corpus, Ablations::default(), 8);
    let mrr = evaluate(&m, &corpus.trajectories).unwrap().poi.mrr;
    let mean = (1..=k).map(|r| 1.0 / r as f64).sum::<f64>() / k as f64;
    let second = (1..=k).map(|r| 1.0 / (r * r) as f64).sum::<f64>() / k as f64;
    let sigma = ((second - mean * mean) / 1000.0).sqrt();
    assert!((mrr - mean).abs() < 3.0 * sigma, "MRR {mrr} vs chance {mean} ± {sigma}");
}

/// The tape records a fixed set of tensor nodes per trajectory; stored
/// values grow linearly in the length once attention is taken out.
#[test]
fn tape_growth_is_linear_in_length() {
    let stored = |ab: Ablations, len: usize, d: usize| {
        let corpus = random_corpus(6, 1, len, 9);
        let cfg = ModelConfig { dim: d, ..small_config() };
        let m =
            GtrModel::new(cfg, ab, corpus.counts, corpus.poi_coords.clone(), &corpus.anchor_points(), None, 1).unwrap();
        let mut tape = Tape::new();
        m.record_loss(&mut tape, &[&corpus.trajectories[0]]).unwrap();
        (tape.len(), tape.stored_scalars())
    };
    let full = Ablations::default();
    assert_eq!(stored(full, 8, 8).0, stored(full, 64, 8).0);
    assert_eq!(stored(full, 8, 8).0, stored(full, 8, 16).0);
    let mut linear = Ablations::default();
    linear.enable("no_attention").unwrap();
    let s: Vec<usize> = [8, 16, 24].iter().map(|&l| stored(linear, l, 8).1).collect();
    assert_eq!(s[1] - s[0], s[2] - s[1]);
}
