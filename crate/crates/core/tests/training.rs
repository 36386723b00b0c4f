use hgnet::data::Checkpoint;
use hgnet::hourglass::NetworkConfig;
use hgnet::optim::{rmsprop_step, rmsprop_update, RmspropConfig, RmspropState};
use hgnet::params::{ParamKind, ParamStore};
use hgnet::tensor::{Shape4, Tensor4};
use hgnet::train::{TrainConfig, Trainer};
use hgnet::HgError;
use proptest::prelude::*;

fn tiny(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::for_network(NetworkConfig::toy(), 4);
    c.batch_size = 2;
    c.epochs = 2;
    c.seed = seed;
    c
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut c = tiny(1);
    c.learning_rate = 0.0;
    let mut t = Trainer::new(c).unwrap();
    let before: Vec<Vec<u32>> = t
        .store
        .trainable_ids()
        .map(|id| t.store.tensor(id).data().iter().map(|v| v.to_bits()).collect())
        .collect();
    t.run().unwrap();
    assert_eq!(t.progress.step, 4);
    for (id, b) in t.store.trainable_ids().zip(&before) {
        let now: Vec<u32> = t.store.tensor(id).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(&now, b, "{}", t.store.name(id));
    }
}

#[test]
fn one_step_after_reload_matches_uninterrupted() {
    let mut straight = Trainer::new(tiny(5)).unwrap();
    straight.step().unwrap();
    let saved = straight.checkpoint();
    straight.step().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.hgfg");
    hgnet::data::save_checkpoint(&path, &saved).unwrap();
    let reloaded: Checkpoint = hgnet::data::load_checkpoint(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(tiny(5), reloaded).unwrap();
    let rec = resumed.step().unwrap();
    assert_eq!(rec.step, 2);
    for (a, b) in straight.store.entries().iter().zip(resumed.store.entries()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
    assert_eq!(straight.optimizer, resumed.optimizer);
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut store = ParamStore::<f32>::new();
    let id = store
        .insert("stem.conv.weight".into(), ParamKind::Trainable, Tensor4::zeros(Shape4::new(1, 1, 1, 2)))
        .unwrap();
    store.tensor_mut(id).set_grad(vec![0.5, f32::NAN]).unwrap();
    let mut state = RmspropState::new(&store);
    let err = rmsprop_step(&mut store, &mut state, &RmspropConfig::default()).unwrap_err();
    assert!(matches!(err, HgError::Training(_)));
    assert!(err.to_string().contains("stem.conv.weight"));
    assert_eq!(store.tensor(id).data(), &[0.0, 0.0]);
    assert_eq!(state.step, 0);
}

#[test]
fn two_steps_on_a_quadratic() {
    // f(θ) = ½·a·θ², g = a·θ.
    let cfg = RmspropConfig { lr: 0.05, decay: 0.9, eps: 1e-8 };
    let a = 3.0f64;
    let (mut theta, mut v) = ([2.0f64], [0.0f64]);
    let (mut t_ref, mut v_ref) = (2.0f64, 0.0f64);
    for _ in 0..2 {
        let g = [a * theta[0]];
        rmsprop_update(&mut theta, &mut v, &g, &cfg);
        let g_ref = a * t_ref;
        v_ref = 0.9 * v_ref + 0.1 * g_ref * g_ref;
        t_ref -= 0.05 * g_ref / (v_ref.sqrt() + 1e-8);
    }
    assert!((theta[0] - t_ref).abs() <= 1e-12);
    assert!((v[0] - v_ref).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn accumulator_stays_nonnegative(
        grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..20),
        decay in 0.01f64..0.999,
    ) {
        let cfg = RmspropConfig { lr: 1e-2, decay, eps: 1e-8 };
        let mut theta = [0.0f64; 4];
        let mut v = [0.0f64; 4];
        for g in &grads {
            rmsprop_update(&mut theta, &mut v, g, &cfg);
            prop_assert!(v.iter().all(|x| *x >= 0.0));
            prop_assert!(theta.iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn untrained_network_evaluates() {
    let t = Trainer::new(tiny(2)).unwrap();
    let data = hgnet::data::generate_synthetic_dataset(8, 64, 77).unwrap();
    let (r, scored) = hgnet::train::evaluate(&t.network, &t.store, &data, hgnet::metrics::MeanMode::PerJoint).unwrap();
    assert!((0.0..=1.0).contains(&r.mean));
    assert_eq!(scored.len(), 8);
    let wrong = hgnet::data::generate_synthetic_dataset(2, 128, 0).unwrap();
    assert!(matches!(
        hgnet::train::evaluate(&t.network, &t.store, &wrong, hgnet::metrics::MeanMode::PerJoint),
        Err(HgError::Config(_))
    ));
}
