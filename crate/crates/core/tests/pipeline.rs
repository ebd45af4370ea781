//! Small end-to-end runs: train, attack, universal perturbation.

use std::sync::OnceLock;

use depthattack_core::attacks::{attack, AttackConfig, Method, Mode, TargetSpec};
use depthattack_core::data::dataset::generate_samples;
use depthattack_core::data::{Sample, SceneConfig};
use depthattack_core::metrics::rmse;
use depthattack_core::models::{
    decode_checkpoint, encode_checkpoint, mean_rmse, train_depth, Arch, DepthModel, DepthNet, SegNet, TrainConfig,
};
use depthattack_core::universal::{
    apply_universal, decode_delta, encode_delta, train_universal, MultiTaskWeights, UniversalTrainConfig,
};

fn scene() -> SceneConfig {
    SceneConfig {
        height: 32,
        width: 32,
        ..SceneConfig::default()
    }
}

fn data() -> &'static (Vec<Sample>, Vec<Sample>) {
    static D: OnceLock<(Vec<Sample>, Vec<Sample>)> = OnceLock::new();
    D.get_or_init(|| {
        (
            generate_samples(48, &scene(), 1).unwrap(),
            generate_samples(8, &scene(), 2).unwrap(),
        )
    })
}

fn trained() -> &'static DepthNet {
    static NET: OnceLock<DepthNet> = OnceLock::new();
    NET.get_or_init(|| {
        let (train, _) = data();
        let mut net = DepthNet::new(Arch::A, 0);
        let cfg = TrainConfig {
            epochs: 8,
            ..TrainConfig::depth_default()
        };
        train_depth(&mut net, train, &[], &cfg).unwrap();
        net
    })
}

#[test]
fn training_beats_the_untrained_net() {
    let (_, test) = data();
    let fresh = mean_rmse(&DepthNet::new(Arch::A, 0), test).unwrap();
    let fitted = mean_rmse(trained(), test).unwrap();
    assert!(fitted < 0.5 * fresh, "{fitted} vs {fresh}");
}

#[test]
fn training_is_deterministic() {
    let (train, _) = data();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::depth_default()
    };
    let run = || {
        let mut net = DepthNet::new(Arch::B, 3);
        let r = train_depth(&mut net, &train[..16], &[], &cfg).unwrap();
        (encode_checkpoint("DAVNET", "arch-B", &net.params), r.epoch_losses)
    };
    assert_eq!(run(), run());
}

#[test]
fn ifgsm_increases_error_within_budget() {
    let (_, test) = data();
    let net = trained();
    let cfg = AttackConfig::default();
    for s in test {
        let r = attack(net, &s.rgb, &s.ground_truth(), Method::Ifgsm, &cfg, None).unwrap();
        assert!(r.metrics.adv_rmse > r.metrics.clean_rmse);
        assert!(r.x_adv.linf_distance(&s.rgb).unwrap() <= cfg.epsilon + 1e-9);
        assert_eq!(r.losses.len(), cfg.steps() + 1);
    }
}

#[test]
fn targeted_attack_pulls_the_object_toward_the_target() {
    let (_, test) = data();
    let net = trained();
    let cfg = AttackConfig {
        mode: Mode::Targeted,
        target_depth: 90.0,
        ..AttackConfig::default()
    };
    let s = test.iter().find(|s| !s.instances.is_empty()).unwrap();
    let spec = TargetSpec::new(s.instances[0].mask.clone(), 90.0).unwrap();
    let r = attack(net, &s.rgb, &s.ground_truth(), Method::Ifgsm, &cfg, Some(&spec)).unwrap();
    let (clean, adv) = (r.metrics.clean_mmd.unwrap(), r.metrics.adv_mmd.unwrap());
    assert!((adv - 90.0).abs() < (clean - 90.0).abs(), "{clean} -> {adv}");
    assert!(r.losses.last() < r.losses.first());
}

#[test]
fn universal_perturbation_is_bounded_and_round_trips() {
    let (train, test) = data();
    let net = trained();
    let cfg = UniversalTrainConfig {
        epochs: 1,
        inner_iterations: Some(3),
        batch_size: 8,
        ..UniversalTrainConfig::default()
    };
    let p = train_universal::<_, SegNet>(net, None, train, &cfg, &MultiTaskWeights::SINGLE_TASK).unwrap();
    assert!(p.delta.data().iter().all(|d| d.abs() <= cfg.epsilon));
    assert_eq!(p.batch_losses.len(), train.len().div_ceil(cfg.batch_size));
    let back = decode_delta(&encode_delta(&p)).unwrap();
    assert_eq!(back.delta, p.delta);
    for s in test {
        let x = apply_universal(&s.rgb, &p).unwrap();
        assert!(x.data().iter().all(|v| (0.0..=255.0).contains(v)));
        rmse(&net.predict(&x).unwrap(), &s.ground_truth()).unwrap();
    }
}

#[test]
fn universal_seed_changes_the_perturbation() {
    let (train, _) = data();
    let run = |seed| {
        let cfg = UniversalTrainConfig {
            epochs: 1,
            inner_iterations: Some(1),
            batch_size: 16,
            seed,
            ..UniversalTrainConfig::default()
        };
        train_universal::<_, SegNet>(trained(), None, &train[..16], &cfg, &MultiTaskWeights::SINGLE_TASK)
            .unwrap()
            .delta
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let net = trained();
    let bytes = encode_checkpoint("DAVNET", "arch-A", &net.params);
    let back = DepthNet {
        arch: Arch::A,
        params: decode_checkpoint(&bytes, "DAVNET").unwrap().tensors,
    };
    let x = &data().1[0].rgb;
    assert_eq!(back.predict(x).unwrap(), net.predict(x).unwrap());
}
