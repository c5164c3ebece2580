use ha2g_core::config::{ConfigError, RunConfig, KEYS};
use ha2g_core::model::ModelConfig;
use proptest::prelude::*;

#[test]
fn defaults_are_the_full_size_setup() {
    let c = RunConfig::default();
    assert_eq!((c.model.frames, c.model.seed_frames), (34, 4));
    assert_eq!(c.model.fps, 15.0);
    assert_eq!(c.model.feat_dim, 32);
    assert_eq!(c.model.hidden, 300);
    assert_eq!(c.levels, 6);
    assert_eq!((c.weights.tau, c.weights.epsilon_clip), (0.07, 1000.0));
    assert_eq!(c.train.lr, 1e-4);
    assert_eq!((c.beats.threshold, c.beats.sigma), (0.05, 0.1));
    assert_eq!(
        [c.weights.lambda_h, c.weights.lambda_p, c.weights.lambda_s, c.weights.lambda_k, c.weights.lambda_c],
        [200.0, 0.1, 0.05, 0.1, 0.1]
    );
    c.validate().unwrap();
}

#[test]
fn parses_comments_blank_lines_and_spacing() {
    let c = RunConfig::parse("# run\n\n lambda_h=150 # heavier\nseed = 9\n  hidden =  64\n").unwrap();
    assert_eq!(c.weights.lambda_h, 150.0);
    assert_eq!(c.seed, 9);
    assert_eq!(c.model.hidden, 64);
}

#[test]
fn preset_applies_first_wherever_it_appears() {
    let a = RunConfig::parse("hidden = 40\npreset = desk\nseed = 3\n").unwrap();
    let b = RunConfig::parse("preset = desk\nseed = 3\nhidden = 40\n").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.model.hidden, 40);
    assert_eq!(a.model.audio_channels, ModelConfig::desk().audio_channels);
    assert_eq!(a.train.lr, 1e-3);
}

#[test]
fn errors_name_the_problem() {
    assert_eq!(RunConfig::parse("seed = 1\nnot a pair\n").unwrap_err(), ConfigError::Syntax { line: 2, text: "not a pair".into() });
    assert_eq!(RunConfig::parse("= 3\n").unwrap_err(), ConfigError::Syntax { line: 1, text: "= 3".into() });
    assert_eq!(RunConfig::parse("lambda_z = 1\n").unwrap_err(), ConfigError::UnknownKey("lambda_z".into()));
    assert_eq!(RunConfig::parse("hidden = wide\n").unwrap_err(), ConfigError::BadValue { key: "hidden".into(), value: "wide".into() });
    assert_eq!(RunConfig::parse("preset = huge\n").unwrap_err(), ConfigError::BadValue { key: "preset".into(), value: "huge".into() });
    for bad in ["seed_frames = 34", "levels = 0", "batch_size = 1", "tau = 0", "lambda_p = -1", "sigma = 0", "lr = 0"] {
        assert!(matches!(RunConfig::parse(bad), Err(ConfigError::Invalid(_))), "{bad}");
    }
}

#[test]
fn set_pair_overrides_one_key() {
    let mut c = RunConfig::default();
    c.set_pair("lambda_c = 0.3").unwrap();
    assert_eq!(c.weights.lambda_c, 0.3);
    assert!(matches!(c.set_pair("lambda_c"), Err(ConfigError::Syntax { .. })));
}

#[test]
fn every_key_has_a_value() {
    let c = RunConfig::default();
    let entries = c.entries();
    assert_eq!(entries.len(), KEYS.len() - 1);
    assert!(KEYS.iter().filter(|k| **k != "preset").all(|k| c.get(k).is_some()));
}

#[test]
fn text_round_trips_presets() {
    for c in [RunConfig::default(), RunConfig::desk()] {
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}

proptest! {
    #[test]
    fn text_round_trips_overrides(
        lambdas in prop::array::uniform6(0.0f64..500.0),
        lr in 1e-6f64..1e-1,
        seed in any::<u64>(),
        hidden in 1usize..512,
        desk in any::<bool>(),
        holistic in any::<bool>(),
    ) {
        let mut c = if desk { RunConfig::desk() } else { RunConfig::default() };
        let w = &mut c.weights;
        [w.lambda_gan, w.lambda_h, w.lambda_p, w.lambda_s, w.lambda_k, w.lambda_c] = lambdas;
        c.train.lr = lr;
        c.seed = seed;
        c.model.hidden = hidden;
        c.levels = if holistic { 1 } else { 6 };
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
