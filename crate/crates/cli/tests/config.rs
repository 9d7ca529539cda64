mod support;

use bambino::training::ScheduleConfig;
use bambino_cli::ExperimentConfig;
use proptest::prelude::*;
use support::config_strategy;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn config_round_trips(cfg in config_strategy()) {
        cfg.validate().unwrap();
        let text = cfg.to_file_string();
        let parsed = ExperimentConfig::parse_file_string(&text).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.to_file_string(), text);
    }
}

#[test]
fn shipped_default_config_matches_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.conf");
    let cfg = ExperimentConfig::load(path.as_ref()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn missing_keys_take_defaults() {
    let cfg = ExperimentConfig::parse_file_string("seed = 7\nppo.clip_epsilon = 0.1\n").unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.ppo.clip_epsilon, 0.1);
    assert_eq!(cfg.schedule, ScheduleConfig::default());
}

#[test]
fn invalid_configs_are_rejected() {
    for text in [
        "ppo.clip_epsilon = 1.5\n",
        "schedule.mode = sometimes\n",
        "schedule.r_clm = 0\n",
        "baby.d_model = 30\n",
        "reward.beta = 0\n",
        "ppo.max_new_tokens = 200\n",
        "train.batch_size = 0\n",
        "ppo.clip_epsilom = 0.2\n",
        "seed = -1\n",
        "seed = 1\nseed = 2\n",
    ] {
        assert!(ExperimentConfig::parse_file_string(text).is_err(), "accepted {text:?}");
    }
}
