//! Proptest strategies shared by the config tests and the acceptance suite.

use std::path::PathBuf;

use bambino::training::{PpoConfig, RewardConfig, ScheduleConfig};
use bambino_cli::{DataConfig, ExperimentConfig, GrammarSource, ModelShape, Paths, TrainConfig};
use proptest::prelude::*;

fn path_strategy() -> impl Strategy<Value = PathBuf> {
    "[a-z0-9_./-]{1,12}(/[a-zA-Z0-9_. -]{0,8}[a-z0-9])?".prop_map(PathBuf::from)
}

fn grammar_strategy() -> impl Strategy<Value = GrammarSource> {
    prop_oneof![
        Just(GrammarSource::Builtin),
        "[a-z]{1,6}/[a-z0-9]{1,6}\\.grammar".prop_map(|s| GrammarSource::File(PathBuf::from(s))),
    ]
}

fn positive() -> impl Strategy<Value = f64> {
    prop_oneof![1e-9..1e3f64, (1u32..1000).prop_map(f64::from)]
}

fn unit_open() -> impl Strategy<Value = f64> {
    (1e-6..1.0f64).prop_filter("strictly inside (0, 1)", |x| *x < 1.0)
}

fn shape_strategy() -> impl Strategy<Value = ModelShape> {
    (40usize..256, 1usize..5, 1usize..17, 1usize..4, 1usize..512, positive()).prop_map(
        |(context_length, n_heads, per_head, n_layers, d_ff, init_std)| ModelShape {
            context_length,
            d_model: n_heads * per_head,
            n_heads,
            n_layers,
            d_ff,
            init_std,
        },
    )
}

fn paths_strategy() -> impl Strategy<Value = Paths> {
    proptest::collection::vec(path_strategy(), 10).prop_map(|p| Paths {
        l1_train: p[0].clone(),
        l1_eval: p[1].clone(),
        l2_train: p[2].clone(),
        l2_eval: p[3].clone(),
        tokenizer: p[4].clone(),
        grammars: p[5].clone(),
        tasks: p[6].clone(),
        checkpoints: p[7].clone(),
        metrics: p[8].clone(),
        reports: p[9].clone(),
    })
}

fn reward_strategy() -> impl Strategy<Value = RewardConfig> {
    (positive(), positive(), 0.0..100.0f64, positive(), positive()).prop_map(
        |(alpha, beta, tau, ppl_floor, reward_cap)| RewardConfig {
            alpha,
            beta,
            tau,
            ppl_floor,
            reward_cap,
        },
    )
}

fn ppo_strategy() -> impl Strategy<Value = PpoConfig> {
    (
        unit_open(),
        prop_oneof![Just(1.0), unit_open()],
        0.0..4.0f64,
        1usize..8,
        1usize..64,
        1usize..4,
        positive(),
        1usize..32,
        positive(),
    )
        .prop_map(
            |(clip_epsilon, gamma, value_coef, prompt_len, rollout_batch_size, rollouts_per_prompt, learning_rate, max_new_tokens, temperature)| {
                PpoConfig {
                    clip_epsilon,
                    gamma,
                    value_coef,
                    prompt_len,
                    rollout_batch_size,
                    rollouts_per_prompt,
                    learning_rate,
                    max_new_tokens,
                    temperature,
                }
            },
        )
}

fn schedule_strategy() -> impl Strategy<Value = ScheduleConfig> {
    const MODES: [&str; 6] = ["interleaved", "clm_only", "block_split", "bambino", "no-ppo", "no-alternating"];
    (1usize..20, 0usize..6, proptest::sample::select(&MODES[..]), unit_open(), 1usize..30).prop_map(
        |(r_clm, r_ppo, mode, block_split_fraction, epochs)| ScheduleConfig {
            r_clm,
            r_ppo,
            mode: mode.to_string(),
            block_split_fraction,
            epochs,
        },
    )
}

fn data_strategy() -> impl Strategy<Value = DataConfig> {
    (grammar_strategy(), grammar_strategy(), 1usize..5000, 1usize..5000, 1usize..500, 2usize..300).prop_map(
        |(l1_grammar, l2_grammar, l1_train_docs, l2_train_docs, eval_docs, task_items)| DataConfig {
            l1_grammar,
            l2_grammar,
            l1_train_docs,
            l2_train_docs,
            eval_docs,
            task_items,
        },
    )
}

fn train_strategy() -> impl Strategy<Value = TrainConfig> {
    (1usize..64, positive(), positive(), 0u64..10_000, 0u64..10_000, any::<bool>()).prop_map(
        |(batch_size, learning_rate, grad_clip, baby_steps, parent_steps, record_wall_clock)| TrainConfig {
            batch_size,
            learning_rate,
            grad_clip,
            baby_steps,
            parent_steps,
            record_wall_clock,
        },
    )
}

pub fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    (
        any::<u64>(),
        paths_strategy(),
        data_strategy(),
        shape_strategy(),
        shape_strategy(),
        reward_strategy(),
        ppo_strategy(),
        schedule_strategy(),
        train_strategy(),
    )
        .prop_map(|(seed, paths, data, baby, parent, reward, ppo, schedule, train)| ExperimentConfig {
            seed,
            paths,
            data,
            baby,
            parent,
            reward,
            ppo,
            schedule,
            train,
        })
}
