use std::collections::BTreeMap;

use rpo_core::embed::EmbeddingProvider;
use rpo_core::evalkit::{
    chosen_baselines, decode_all, judge_responses, reward_margin, run_cell, sweep, win_rate, EvalError, SweepAxis,
    SweepSetup, Verdict,
};
use rpo_core::losses::{AlignConfig, Method, Strategy};
use rpo_core::policy::{logprob_response, DecodeConfig, ModelParams, ModelShape};
use rpo_core::prefdata::PreferencePair;
use rpo_core::synth::{self, generate_prompts, JudgeOracle, SynthConfig};
use rpo_core::trainer::{self, AlignData, TrainConfig};

struct Fixture {
    pairs: Vec<PreferencePair>,
    oracle: JudgeOracle,
    sft: ModelParams,
    prompts: Vec<String>,
    baselines: BTreeMap<String, String>,
}

fn fixture() -> Fixture {
    let data = synth::generate(&SynthConfig {
        num_clusters: 4,
        prompts_per_cluster: 16,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 3e-3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let (sft, _) = trainer::train_sft(&cfg, ModelShape::default(), &data.pairs).unwrap();
    let prompts = generate_prompts(&data.oracle, 24, 1);
    let baselines = decode_all(&sft, &prompts, &decode());
    Fixture {
        pairs: data.pairs,
        oracle: data.oracle,
        sft,
        prompts,
        baselines,
    }
}

fn decode() -> DecodeConfig {
    DecodeConfig {
        max_new: 16,
        ..DecodeConfig::default()
    }
}

fn base_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        lr: 3e-4,
        align: AlignConfig::paired(Method::Rpo, Strategy::Embedding),
        ..TrainConfig::default()
    }
}

#[test]
fn identical_responses_tie_everywhere() {
    let f = fixture();
    let report = win_rate(&f.sft, &f.baselines, &f.prompts, &f.oracle, &decode()).unwrap();
    assert_eq!((report.win_rate, report.tie_rate, report.loss_rate), (0.0, 1.0, 0.0));
    assert_eq!(report.records.len(), f.prompts.len());
}

#[test]
fn rates_partition_and_constant_judge_ties() {
    let f = fixture();
    let policy = ModelParams::init(ModelShape::default(), 5, 0.5).unwrap();
    let report = win_rate(&policy, &f.baselines, &f.prompts, &f.oracle, &decode()).unwrap();
    assert!((report.win_rate + report.tie_rate + report.loss_rate - 1.0).abs() <= 1e-12);
    let constant = |_: &str, _: &str| 1.0;
    let flat = win_rate(&policy, &f.baselines, &f.prompts, &constant, &decode()).unwrap();
    assert_eq!(flat.tie_rate, 1.0);
}

#[test]
fn swapping_sides_swaps_win_and_loss() {
    let prompts: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let left: BTreeMap<String, String> = prompts.iter().map(|p| (p.clone(), format!("{p}{p}"))).collect();
    let right: BTreeMap<String, String> = prompts.iter().map(|p| (p.clone(), "bb".to_string())).collect();
    let judge = |_: &str, r: &str| r.chars().next().map(|c| c as u32 as f64).unwrap_or(0.0);
    let forward = judge_responses(&prompts, &left, &right, &judge).unwrap();
    let backward = judge_responses(&prompts, &right, &left, &judge).unwrap();
    assert_eq!(forward.win_rate, backward.loss_rate);
    assert_eq!(forward.loss_rate, backward.win_rate);
    assert_eq!(forward.tie_rate, backward.tie_rate);
    let verdicts: Vec<Verdict> = forward.records.iter().map(|r| r.verdict).collect();
    assert_eq!(verdicts, [Verdict::Loss, Verdict::Tie, Verdict::Win, Verdict::Win]);
}

#[test]
fn prompt_order_does_not_matter() {
    let f = fixture();
    let policy = ModelParams::init(ModelShape::default(), 8, 0.5).unwrap();
    let temp = DecodeConfig {
        temperature: 0.8,
        seed: 3,
        ..decode()
    };
    let forward = win_rate(&policy, &f.baselines, &f.prompts, &f.oracle, &temp).unwrap();
    let mut reversed = f.prompts.clone();
    reversed.reverse();
    let backward = win_rate(&policy, &f.baselines, &reversed, &f.oracle, &temp).unwrap();
    assert_eq!(forward.win_rate, backward.win_rate);
    assert_eq!(forward.tie_rate, backward.tie_rate);
    let mut a = forward.records.clone();
    let mut b = backward.records.clone();
    a.sort_by(|x, y| x.prompt.cmp(&y.prompt));
    b.sort_by(|x, y| x.prompt.cmp(&y.prompt));
    assert_eq!(a, b);
}

#[test]
fn greedy_evaluation_is_deterministic() {
    let f = fixture();
    let policy = ModelParams::init(ModelShape::default(), 2, 0.5).unwrap();
    let a = win_rate(&policy, &f.baselines, &f.prompts, &f.oracle, &decode()).unwrap();
    let b = win_rate(&policy, &f.baselines, &f.prompts, &f.oracle, &decode()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_baseline_is_an_error() {
    let f = fixture();
    let mut prompts = f.prompts.clone();
    prompts.push("never seen".into());
    let err = win_rate(&f.sft, &f.baselines, &prompts, &f.oracle, &decode()).unwrap_err();
    assert!(matches!(err, EvalError::MissingBaseline(ref p) if p == "never seen"));
}

#[test]
fn chosen_baselines_keep_first_response() {
    let pairs = vec![
        PreferencePair::new("p", "first", "x").unwrap(),
        PreferencePair::new("q", "other", "x").unwrap(),
        PreferencePair::new("p", "second", "x").unwrap(),
    ];
    let map = chosen_baselines(&pairs);
    assert_eq!(map.len(), 2);
    assert_eq!(map["p"], "first");
}

#[test]
fn reward_margin_matches_hand_average() {
    let f = fixture();
    let policy = ModelParams::init(ModelShape::default(), 21, 0.1).unwrap();
    let pairs = &f.pairs[..3];
    let beta = 0.1;
    let (chosen, rejected) = reward_margin(&policy, &f.sft, pairs, beta).unwrap();
    let ratio = |p: &str, r: &str| logprob_response(&policy, p, r) - logprob_response(&f.sft, p, r);
    let c = beta
        * (ratio(&pairs[0].prompt, &pairs[0].chosen)
            + ratio(&pairs[1].prompt, &pairs[1].chosen)
            + ratio(&pairs[2].prompt, &pairs[2].chosen))
        / 3.0;
    let r = beta
        * (ratio(&pairs[0].prompt, &pairs[0].rejected)
            + ratio(&pairs[1].prompt, &pairs[1].rejected)
            + ratio(&pairs[2].prompt, &pairs[2].rejected))
        / 3.0;
    assert!((chosen - c).abs() <= 1e-12);
    assert!((rejected - r).abs() <= 1e-12);
    let (c2, r2) = reward_margin(&policy, &f.sft, pairs, 2.0 * beta).unwrap();
    assert!((c2 - 2.0 * chosen).abs() <= 1e-12 && (r2 - 2.0 * rejected).abs() <= 1e-12);
    assert_eq!(reward_margin(&f.sft, &f.sft, pairs, beta).unwrap(), (0.0, 0.0));
    assert!(reward_margin(&policy, &f.sft, &[], beta).is_err());
}

#[test]
fn single_value_sweep_equals_standalone_run() {
    let f = fixture();
    let data = AlignData::Paired(f.pairs.clone());
    let setup = SweepSetup {
        base: base_config(),
        data: &data,
        sft: &f.sft,
        prompts: &f.prompts,
        baselines: &f.baselines,
        judge: &f.oracle,
        decode: decode(),
    };
    let mut provider = EmbeddingProvider::hashed_bow(256).unwrap();
    let rows = sweep(SweepAxis::Tau, &[0.3], &setup, &mut provider).unwrap();
    assert_eq!(rows.len(), 1);
    let mut cfg = base_config();
    cfg.align.tau = 0.3;
    let (eval, loss) = run_cell(
        &setup,
        &cfg,
        &decode(),
        &mut EmbeddingProvider::hashed_bow(256).unwrap(),
    )
    .unwrap();
    assert_eq!(rows[0].win_rate, Some(eval.win_rate));
    assert_eq!(rows[0].final_loss, Some(loss));
    let (policy, report) =
        trainer::train_align(&cfg, &data, &f.sft, &mut EmbeddingProvider::hashed_bow(256).unwrap()).unwrap();
    let standalone = win_rate(&policy, &f.baselines, &f.prompts, &f.oracle, &decode()).unwrap();
    assert_eq!(standalone.win_rate, eval.win_rate);
    assert_eq!(report.epoch_mean_loss.last().copied(), Some(loss));
}

#[test]
fn sweep_rows_follow_values_and_keep_going_after_errors() {
    let f = fixture();
    let data = AlignData::Paired(f.pairs.clone());
    let setup = SweepSetup {
        base: base_config(),
        data: &data,
        sft: &f.sft,
        prompts: &f.prompts,
        baselines: &f.baselines,
        judge: &f.oracle,
        decode: decode(),
    };
    let mut provider = EmbeddingProvider::hashed_bow(256).unwrap();
    let rows = sweep(SweepAxis::BatchSize, &[2.0, 0.0, 8.0], &setup, &mut provider).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].win_rate.is_some() && rows[2].win_rate.is_some());
    assert!(rows[1].error.is_some() && rows[1].win_rate.is_none());
    let taus = sweep(SweepAxis::Tau, &[0.25, 0.5, 0.75], &setup, &mut provider).unwrap();
    assert_eq!(taus.iter().map(|r| r.value).collect::<Vec<_>>(), [0.25, 0.5, 0.75]);
    assert!(matches!(
        sweep(SweepAxis::Beta, &[], &setup, &mut provider),
        Err(EvalError::NoValues)
    ));
}
