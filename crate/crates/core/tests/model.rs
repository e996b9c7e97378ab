mod common;

use common::*;
use graphcage::modality::{ModalBundle, Modality};
use graphcage::tensor::checkpoint::Checkpoint;
use graphcage::tensor::{grad_check_params, Tensor};
use graphcage::trace::Stage;
use graphcage::{GraphCage, ModelConfig, Strategy};

fn small(strategy: Strategy) -> ModelConfig {
    ModelConfig {
        d_text: 3,
        d_audio: 2,
        d_vision: 4,
        max_len_text: 4,
        max_len_audio: 6,
        max_len_vision: 5,
        d_h: 4,
        depth: 2,
        heads: 2,
        ffn_hidden: 8,
        d_c: 3,
        nodes: 3,
        routing_iters: 2,
        strategy,
        ..ModelConfig::default()
    }
}

fn bundle(cfg: &ModelConfig, lens: [usize; 3], seed: u64) -> ModalBundle {
    let mut r = rng(seed);
    let dims = cfg.dims();
    ModalBundle::new(
        random(&[dims[0], lens[0]], &mut r),
        random(&[dims[1], lens[1]], &mut r),
        random(&[dims[2], lens[2]], &mut r),
    )
    .unwrap()
}

#[test]
fn every_strategy_produces_one_score_and_six_representations() {
    for s in Strategy::ALL {
        let cfg = small(s);
        let model = GraphCage::new(cfg.clone(), 1).unwrap();
        let b = bundle(&cfg, [3, 6, 2], 2);
        let tape = graphcage::Tape::new(model.params());
        let out = model.forward(&tape, &b).unwrap();
        assert_eq!(tape.shape(out.prediction), vec![1, 1]);
        assert_eq!(out.reps.len(), 6);
        let construction = out.traces.iter().filter(|t| t.stage == Stage::Construction).count();
        let aggregation = out.traces.iter().filter(|t| t.stage == Stage::Aggregation).count();
        assert_eq!(construction, if s == Strategy::NoCaps { 0 } else { 3 }, "{s:?}");
        assert_eq!(aggregation, if s.readout() == graphcage::aggregation::Readout::Capsule { 6 } else { 0 });
        for (m, len) in Modality::ALL.iter().zip([3, 6, 2]) {
            assert_eq!(tape.shape(out.fused[m.index()]), vec![8, len]);
            let nodes = if s == Strategy::NoCaps { len } else { 3 };
            assert_eq!(tape.shape(out.graphs[m.index()].nodes), vec![3, nodes]);
            for k in 0..2 {
                assert!(tape.value(out.convolved[m.index()][k]).data().iter().all(|v| v.abs() < 1.0));
            }
        }
    }
}

#[test]
fn initialization_is_seeded() {
    let cfg = small(Strategy::Capsule);
    let a = GraphCage::new(cfg.clone(), 7).unwrap().checkpoint().encode();
    let b = GraphCage::new(cfg.clone(), 7).unwrap().checkpoint().encode();
    let c = GraphCage::new(cfg, 8).unwrap().checkpoint().encode();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_restores_config_and_predictions() {
    let cfg = ModelConfig {
        shared_capsule_weights: true,
        ..small(Strategy::Capsule)
    };
    let model = GraphCage::new(cfg.clone(), 3).unwrap();
    let b = bundle(&cfg, [4, 5, 5], 4);
    let bytes = model.checkpoint().encode();
    let restored = GraphCage::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(restored.config(), &cfg);
    assert_eq!(model.predict(&b).unwrap(), restored.predict(&b).unwrap());

    // A checkpoint of another architecture does not load into this config.
    let mut ck = model.checkpoint();
    ck.meta["model"]["nodes"] = serde_json::json!(4);
    assert!(GraphCage::from_checkpoint(&ck).is_err());
}

#[test]
fn bundles_must_fit_the_model() {
    let cfg = small(Strategy::Capsule);
    let model = GraphCage::new(cfg.clone(), 5).unwrap();
    let wrong_dim = ModalBundle::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3]), Tensor::zeros(&[4, 3])).unwrap();
    assert!(model.predict(&wrong_dim).is_err());
    let too_long = bundle(&cfg, [5, 2, 2], 6);
    assert!(model.predict(&too_long).is_err());
    assert!(ModalBundle::new(Tensor::zeros(&[3, 0]), Tensor::zeros(&[2, 1]), Tensor::zeros(&[4, 1])).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ModelConfig { nodes: 0, ..small(Strategy::Capsule) },
        ModelConfig { d_h: 6, heads: 4, ..small(Strategy::Capsule) },
        ModelConfig { routing_iters: 0, ..small(Strategy::Capsule) },
        ModelConfig { d_text: 0, ..small(Strategy::Capsule) },
    ] {
        assert!(GraphCage::new(cfg, 0).is_err());
    }
}

#[test]
fn loss_gradients_match_finite_differences_for_every_group() {
    for s in [Strategy::Capsule, Strategy::Recurrent, Strategy::NoCaps] {
        let cfg = small(s);
        let model = GraphCage::new(cfg.clone(), 9).unwrap();
        let b = bundle(&cfg, [4, 6, 5], 10);
        let store = model.params();
        // One entry of every parameter tensor.
        let entries: Vec<_> = store
            .iter()
            .map(|(id, p)| (id, (id.index() * 7) % p.tensor.numel()))
            .collect();
        let report = grad_check_params(store, &entries, 1e-4, |tape| {
            let out = model.forward_vars(tape, Modality::ALL.map(|m| tape.constant(b.get(m).clone())))?;
            let y = tape.constant(Tensor::new(&[1, 1], vec![0.3])?);
            Ok(tape.abs(tape.sub(out.prediction, y)?))
        })
        .unwrap();
        assert!(report.passed(), "{s:?}: {report:?}");
    }
}

#[test]
fn example_gradients_are_scaled_absolute_error() {
    let cfg = small(Strategy::Mean);
    let model = GraphCage::new(cfg.clone(), 11).unwrap();
    let b = bundle(&cfg, [2, 3, 4], 12);
    let pred = model.predict(&b).unwrap();
    let (p, err, g1) = model.example_gradients(&b, 1.0, 1.0).unwrap();
    let (_, _, g2) = model.example_gradients(&b, 1.0, 0.25).unwrap();
    assert_eq!(p, pred);
    assert_eq!(err, (pred - 1.0).abs());
    for (a, b) in g1.iter().zip(&g2) {
        if let (Some(a), Some(b)) = (a, b) {
            for (x, y) in a.iter().zip(b) {
                assert!((0.25 * x - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }
    let (pen, _) = model.penalty_gradients(0.0).unwrap();
    assert_eq!(pen, 0.0);
}
