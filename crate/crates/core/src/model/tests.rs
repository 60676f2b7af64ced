use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Instance;

fn spec(d: usize, mode: TrainMode, enc: &[u8], dec: &[u8]) -> ModelSpec {
    ModelSpec {
        model: ModelConfig {
            src_vocab: 9,
            tgt_vocab: 9,
            d_model: d,
            d_ff: 2 * d,
            heads: 1,
            layers: 1,
            dropout: 0.0,
            max_len: 8,
            ..ModelConfig::default()
        },
        routing: RoutingConfig {
            mode,
            encoder_orders: enc.to_vec(),
            decoder_orders: Some(dec.to_vec()),
            ..RoutingConfig::default()
        },
    }
}

fn toy_batch() -> Batch {
    let a = Instance {
        src: vec![4, 5, 6],
        tgt: vec![6, 5, 4],
        component: 0,
    };
    let b = Instance {
        src: vec![7, 8],
        tgt: vec![7, 8],
        component: 1,
    };
    let c = Instance {
        src: vec![5, 5, 8, 4],
        tgt: vec![4, 8, 5, 5],
        component: 0,
    };
    Batch::new(&[&a, &b, &c]).unwrap()
}

fn randomize_predictors(model: &mut IotModel<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in [model.enc_predictor, model.dec_predictor].into_iter().flatten() {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

fn loss_of(model: &IotModel<f64>, settings: &ObjectiveSettings, seed: u64) -> (Var, Graph<f64>, TrainForward) {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = model.training_loss(&mut g, &toy_batch(), settings, &mut rng).unwrap();
    (out.total, g, out)
}

#[test]
fn predictor_overhead_is_width_times_orders() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = IotModel::<f32>::new(spec(32, TrainMode::Iot, &[1], &[1]), &mut rng).unwrap();
    assert_eq!(base.predictor_params(), 0);
    for (enc, dec, extra) in [(&[1u8][..], &[4u8, 6][..], 64), (&[1], &[1, 2, 3, 4, 5, 6], 192), (&[1, 2], &[4, 6], 128)] {
        let m = IotModel::<f32>::new(spec(32, TrainMode::Iot, enc, dec), &mut rng).unwrap();
        assert_eq!(m.predictor_params(), extra);
        assert_eq!(m.num_params(), base.num_params() + extra);
    }
    let shared = IotModel::<f32>::new(spec(32, TrainMode::UniformShared, &[1], &[4, 6]), &mut rng).unwrap();
    assert_eq!(shared.num_params(), base.num_params());
}

#[test]
fn routing_config_resolution() {
    let r = RoutingConfig {
        decoder_subset: Some(3),
        ..RoutingConfig::default()
    };
    assert_eq!(r.order_sets().unwrap().1.codes(), &[1, 4, 6]);
    let r = RoutingConfig {
        mode: TrainMode::FixedOrder(5),
        decoder_subset: Some(3),
        ..RoutingConfig::default()
    };
    assert_eq!(r.order_sets().unwrap().1.codes(), &[5]);
    let r = RoutingConfig {
        decoder_subset: Some(3),
        decoder_orders: Some(vec![1]),
        ..RoutingConfig::default()
    };
    assert!(matches!(r.order_sets(), Err(Error::Config(_))));
    let r = RoutingConfig {
        decoder_orders: Some(vec![7]),
        ..RoutingConfig::default()
    };
    assert!(matches!(r.order_sets(), Err(Error::Routing(_))));
}

#[test]
fn single_order_iot_matches_fixed_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let iot = IotModel::<f64>::new(spec(8, TrainMode::Iot, &[1], &[3]), &mut rng).unwrap();
    let mut fixed = iot.clone();
    fixed.spec.routing.mode = TrainMode::FixedOrder(3);
    let settings = ObjectiveSettings::default();
    let (_, _, a) = loss_of(&iot, &settings, 5);
    let (_, _, b) = loss_of(&fixed, &settings, 5);
    assert_eq!(a.bundle, b.bundle);
}

#[test]
fn uniform_shared_reports_sum_of_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = IotModel::<f64>::new(spec(8, TrainMode::UniformShared, &[1], &[4, 6]), &mut rng).unwrap();
    let (_, _, out) = loss_of(&model, &ObjectiveSettings::default(), 0);
    let paths = &out.bundle.path_losses[0];
    assert_eq!(paths.len(), 2);
    assert!((out.bundle.total - (paths[0] + paths[1])).abs() < 1e-12);
    assert!(out.dec_probs.is_none());
}

#[test]
fn zero_predictor_starts_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = IotModel::<f64>::new(spec(8, TrainMode::Iot, &[1, 2], &[1, 4, 6]), &mut rng).unwrap();
    let (_, _, out) = loss_of(&model, &ObjectiveSettings::default(), 0);
    for row in out.enc_probs.unwrap() {
        assert!(row.iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }
    for row in out.dec_probs.unwrap() {
        assert!(row.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
    }
    // Both auxiliaries vanish, so the total is the task loss.
    assert!(out.bundle.l_d_enc.abs() < 1e-12 && out.bundle.l_s_dec.abs() < 1e-12);
    assert!((out.bundle.total - out.bundle.l_c).abs() < 1e-12);
}

#[test]
fn bundle_total_is_affine_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = IotModel::<f64>::new(spec(8, TrainMode::Iot, &[1, 2], &[4, 6]), &mut rng).unwrap();
    randomize_predictors(&mut model, 9);
    let (_, _, out) = loss_of(&model, &ObjectiveSettings::default(), 1);
    let b = &out.bundle;
    assert!(b.l_d_enc >= 0.0 && b.l_d_dec >= 0.0 && b.l_s_enc <= 0.0 && b.l_s_dec <= 0.0);
    assert!((b.total - b.combine()).abs() <= 1e-7);
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = IotModel::<f64>::new(spec(4, TrainMode::Iot, &[1], &[4, 6]), &mut rng).unwrap();
    randomize_predictors(&mut model, 10);
    let report =
        objective_gradient_check(&model, &toy_batch(), &ObjectiveSettings::default(), 3, &[], 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn encoder_routing_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = IotModel::<f64>::new(spec(4, TrainMode::Iot, &[1, 2], &[4, 6]), &mut rng).unwrap();
    randomize_predictors(&mut model, 11);
    let names = ["pred.enc.w", "pred.dec.w", "src_emb"];
    let report =
        objective_gradient_check(&model, &toy_batch(), &ObjectiveSettings::default(), 4, &names, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn routing_picks_argmax_and_respects_overrides() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = IotModel::<f64>::new(spec(8, TrainMode::Iot, &[1], &[1, 4, 6]), &mut rng).unwrap();
    randomize_predictors(&mut model, 12);
    let batch = toy_batch();
    let r = model.route(&batch.src, OrderOverride::default()).unwrap();
    let probs = r.dec_probs.clone().unwrap();
    for (i, row) in probs.iter().enumerate() {
        assert_eq!(r.dec[i], argmax(row));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let forced = model.route(&batch.src, OrderOverride { enc: None, dec: Some(2) }).unwrap();
    assert_eq!(forced.dec, vec![2; 3]);
    assert!(model.route(&batch.src, OrderOverride { enc: None, dec: Some(3) }).is_err());
    assert_eq!(model.override_from_codes(None, Some(6)).unwrap().dec, Some(2));
    assert!(model.override_from_codes(None, Some(2)).is_err());
}

#[test]
fn model_without_predictor_uses_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = IotModel::<f64>::new(spec(8, TrainMode::UniformShared, &[1], &[4, 6]), &mut rng).unwrap();
    let r = model.route(&toy_batch().src, OrderOverride::default()).unwrap();
    assert_eq!(r.dec, vec![0; 3]);
    assert!(r.dec_probs.is_none());
}
