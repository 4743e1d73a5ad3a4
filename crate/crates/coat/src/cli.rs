//! Configuration file handling and the command implementations behind
//! the `coat` binary. Everything here is reproducible from the persisted
//! config snapshot plus the global seed: each component derives its own
//! seed stream, so e.g. changing evaluation settings never perturbs data
//! generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CoatError, Result};
use crate::evalharness::{
    compare_strategies, evaluate, report_render, write_outcomes, DemoSource, EvalConfig,
};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, TinyLm};
use crate::prompts::{build_vocab_over, Vocabulary};
use crate::sampler::{write_curriculum, SelectionStrategy};
use crate::seeds::derive_seed;
use crate::syndata::{
    gen_dataset_with, gen_wh_dataset, read_jsonl, split_unseen_concepts, split_validation,
    write_jsonl, Dataset, GenOptions, Split,
};
use crate::trainer::{
    build_curriculum, train_stage, train_two_stage, write_train_log, StageData, TrainConfig,
    TrainLog,
};

/// Which training stage a command applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    One,
    Two,
    Both,
}

impl FromStr for StageSel {
    type Err = CoatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(StageSel::One),
            "2" => Ok(StageSel::Two),
            "both" => Ok(StageSel::Both),
            other => Err(CoatError::InvalidArgument(format!(
                "stage must be 1, 2, or both, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyndataSection {
    pub stage1_samples: usize,
    pub stage1_concepts: usize,
    pub stage2_samples: usize,
    pub test_fraction: f64,
    pub valid_fraction: f64,
    pub max_depth: usize,
    pub min_rows: usize,
    pub max_rows: usize,
}

impl Default for SyndataSection {
    fn default() -> Self {
        SyndataSection {
            stage1_samples: 2000,
            stage1_concepts: 50,
            stage2_samples: 600,
            test_fraction: 0.2,
            valid_fraction: 0.1,
            max_depth: 3,
            min_rows: 3,
            max_rows: 5,
        }
    }
}

impl SyndataSection {
    fn gen_options(&self) -> GenOptions {
        GenOptions {
            max_depth: self.max_depth,
            min_rows: self.min_rows,
            max_rows: self.max_rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        ModelSection {
            n_layers: desk.n_layers,
            d_model: desk.d_model,
            n_heads: desk.n_heads,
            d_ff: desk.d_ff,
            max_seq_len: desk.max_seq_len,
            dropout: desk.dropout,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub strategy: SelectionStrategy,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub patience: usize,
    pub eval_interval: usize,
    pub pool_size: usize,
    pub scorer_refresh_steps: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let desk = TrainConfig::desk(SelectionStrategy::Coat);
        TrainerSection {
            strategy: desk.strategy,
            lr: desk.lr,
            batch_size: desk.batch_size,
            max_steps: desk.max_steps,
            patience: desk.patience,
            eval_interval: desk.eval_interval,
            pool_size: desk.pool_size,
            scorer_refresh_steps: desk.scorer_refresh_steps,
        }
    }
}

impl TrainerSection {
    pub fn to_config(&self, strategy: SelectionStrategy, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            lr: self.lr,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            patience: self.patience,
            eval_interval: self.eval_interval,
            pool_size: self.pool_size,
            scorer_refresh_steps: self.scorer_refresh_steps,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k_shots: usize,
    pub demo_source: DemoSource,
    pub n_seeds: u64,
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        EvalSection {
            k_shots: d.k_shots,
            demo_source: d.demo_source,
            n_seeds: d.n_seeds,
            max_new: d.max_new,
        }
    }
}

impl EvalSection {
    pub fn to_config(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            k_shots: self.k_shots,
            demo_source: self.demo_source,
            n_seeds: self.n_seeds,
            seed_base: seed,
            max_new: self.max_new,
        }
    }
}

/// Full resolved run configuration. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub syndata: SyndataSection,
    pub model: ModelSection,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "runs/coat".to_string(),
            syndata: SyndataSection::default(),
            model: ModelSection::default(),
            trainer: TrainerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                toml::from_str(&text)
                    .map_err(|e| CoatError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| {
        CoatError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Snapshot the resolved config so the run can be replayed exactly.
fn write_config_snapshot(cfg: &RunConfig, command: &str) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CoatError::Config(format!("unserializable config: {e}")))?;
    ensure_dir(&cfg.out())?;
    fs::write(cfg.out().join(format!("config.{command}.toml")), text)?;
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CoatError::Config(format!("unserializable manifest: {e}")))?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn split_manifest(name: &str, d: &Dataset) -> serde_json::Value {
    json!({
        "name": name,
        "samples": d.len(),
        "concepts": d.concept_universe.len(),
        "concept_histogram": d.concept_counts(),
    })
}

fn stage_dir(cfg: &RunConfig, stage: usize) -> PathBuf {
    cfg.out().join("data").join(format!("stage{stage}"))
}

fn gen_one_stage(cfg: &RunConfig, stage: usize) -> Result<()> {
    let dir = stage_dir(cfg, stage);
    ensure_dir(&dir)?;
    let full = match stage {
        1 => gen_dataset_with(
            cfg.syndata.stage1_samples,
            cfg.syndata.stage1_concepts,
            derive_seed(cfg.seed, "data", 1),
            &cfg.syndata.gen_options(),
        )?,
        _ => gen_wh_dataset(cfg.syndata.stage2_samples, derive_seed(cfg.seed, "data", 2))?,
    };
    let (pool, test) = split_unseen_concepts(
        &full,
        cfg.syndata.test_fraction,
        derive_seed(cfg.seed, "split", stage as u64),
    )?;
    let (train, valid) = split_validation(
        &pool,
        cfg.syndata.valid_fraction,
        derive_seed(cfg.seed, "valid", stage as u64),
    )?;
    write_jsonl(&train, &dir.join("train.jsonl"))?;
    write_jsonl(&valid, &dir.join("valid.jsonl"))?;
    write_jsonl(&test, &dir.join("test.jsonl"))?;
    write_manifest(
        &dir,
        &json!({
            "stage": stage,
            "seed": cfg.seed,
            "options": cfg.syndata,
            "splits": [
                split_manifest("train", &train),
                split_manifest("valid", &valid),
                split_manifest("test", &test),
            ],
        }),
    )?;
    log::info!(
        "stage {stage}: {} train / {} valid / {} test samples, {} unseen test concepts",
        train.len(),
        valid.len(),
        test.len(),
        test.concept_universe.len()
    );
    Ok(())
}

/// `gen-data`: write train/valid/test JSONL plus manifests.
pub fn cmd_gen_data(cfg: &RunConfig, stage: StageSel) -> Result<()> {
    write_config_snapshot(cfg, "gen-data")?;
    match stage {
        StageSel::One => gen_one_stage(cfg, 1),
        StageSel::Two => gen_one_stage(cfg, 2),
        StageSel::Both => {
            gen_one_stage(cfg, 1)?;
            gen_one_stage(cfg, 2)
        }
    }
}

fn load_split(cfg: &RunConfig, stage: usize, name: &str, split: Split) -> Result<Dataset> {
    let path = stage_dir(cfg, stage).join(format!("{name}.jsonl"));
    if !path.exists() {
        return Err(CoatError::Config(format!(
            "{} not found; run gen-data first",
            path.display()
        )));
    }
    read_jsonl(&path, split)
}

fn stages_present(cfg: &RunConfig) -> Vec<usize> {
    [1usize, 2]
        .into_iter()
        .filter(|s| stage_dir(cfg, *s).join("train.jsonl").exists())
        .collect()
}

/// Vocabulary over the train and validation splits of every generated
/// stage, so one model serves the whole pipeline.
fn build_pipeline_vocab(cfg: &RunConfig) -> Result<Vocabulary> {
    let mut datasets = Vec::new();
    for stage in stages_present(cfg) {
        datasets.push(load_split(cfg, stage, "train", Split::Train)?);
        datasets.push(load_split(cfg, stage, "valid", Split::Validation)?);
    }
    if datasets.is_empty() {
        return Err(CoatError::Config(
            "no generated data found; run gen-data first".to_string(),
        ));
    }
    build_vocab_over(datasets.iter())
}

fn checkpoint_path(cfg: &RunConfig, strategy: SelectionStrategy, stage: usize) -> PathBuf {
    cfg.out()
        .join("checkpoints")
        .join(format!("{strategy}-stage{stage}.ckpt"))
}

/// `export-curriculum`: one replayable prompt per training sample.
pub fn cmd_export_curriculum(
    cfg: &RunConfig,
    strategy: SelectionStrategy,
    checkpoint: Option<&Path>,
    stage: StageSel,
) -> Result<()> {
    let stage = match stage {
        StageSel::One => 1,
        StageSel::Two => 2,
        StageSel::Both => {
            return Err(CoatError::InvalidArgument(
                "export-curriculum applies to one stage at a time".to_string(),
            ))
        }
    };
    write_config_snapshot(cfg, "export-curriculum")?;
    let train = load_split(cfg, stage, "train", Split::Train)?;
    let train_cfg = cfg
        .trainer
        .to_config(strategy, derive_seed(cfg.seed, "curriculum", stage as u64));

    let loaded = match (strategy, checkpoint) {
        (SelectionStrategy::Coat, None) => {
            return Err(CoatError::Config(
                "--strategy coat needs --checkpoint to score candidates with".to_string(),
            ))
        }
        (SelectionStrategy::Coat, Some(path)) => Some(load_checkpoint::<f32>(path)?),
        _ => None,
    };
    let (records, skipped) = match &loaded {
        Some((model, vocab, _)) => build_curriculum(&train, &train_cfg, Some(model), vocab)?,
        None => {
            let vocab = build_pipeline_vocab(cfg)?;
            build_curriculum(&train, &train_cfg, None::<&TinyLm<f32>>, &vocab)?
        }
    };

    let dir = cfg.out().join("curricula");
    ensure_dir(&dir)?;
    let path = dir.join(format!("{strategy}-stage{stage}.jsonl"));
    write_curriculum(&records, &path)?;
    let mut k_histogram: std::collections::BTreeMap<usize, usize> = Default::default();
    for r in &records {
        *k_histogram.entry(r.k).or_default() += 1;
    }
    write_manifest(
        &dir,
        &json!({
            "strategy": strategy.as_str(),
            "stage": stage,
            "seed": cfg.seed,
            "instances": records.len(),
            "skipped_no_demonstrations": skipped,
            "k_histogram": k_histogram,
        }),
    )?;
    log::info!(
        "exported {} instances to {} ({} skipped)",
        records.len(),
        path.display(),
        skipped
    );
    Ok(())
}

fn save_stage_artifacts<S: crate::model::Scalar>(
    cfg: &RunConfig,
    strategy: SelectionStrategy,
    stage: usize,
    model: &TinyLm<S>,
    vocab: &Vocabulary,
    log: &TrainLog,
) -> Result<()> {
    let dir = cfg.out().join("checkpoints");
    ensure_dir(&dir)?;
    save_checkpoint(&checkpoint_path(cfg, strategy, stage), model, vocab, None)?;
    write_train_log(log, &dir.join(format!("{strategy}-stage{stage}.log.csv")))?;
    Ok(())
}

/// `train`: stage 1, stage 2 (continuing from stage 1), or both.
pub fn cmd_train(cfg: &RunConfig, strategy: SelectionStrategy, stage: StageSel) -> Result<()> {
    write_config_snapshot(cfg, "train")?;
    let vocab = build_pipeline_vocab(cfg)?;
    let dir = cfg.out().join("checkpoints");
    ensure_dir(&dir)?;
    vocab.save(&dir.join("vocab.txt"))?;

    let model_cfg = cfg.model.to_config(vocab.len());
    let cfg1 = cfg
        .trainer
        .to_config(strategy, derive_seed(cfg.seed, "train", 1));
    let cfg2 = cfg
        .trainer
        .to_config(strategy, derive_seed(cfg.seed, "train", 2));

    let mut manifest_stages = Vec::new();
    match stage {
        StageSel::One | StageSel::Both => {
            let train1 = load_split(cfg, 1, "train", Split::Train)?;
            let valid1 = load_split(cfg, 1, "valid", Split::Validation)?;
            let model = TinyLm::<f32>::new(model_cfg.clone(), derive_seed(cfg.seed, "init", 0))?;
            if stage == StageSel::One {
                let (best, log) = train_stage(model, &train1, &valid1, &cfg1, &vocab)?;
                save_stage_artifacts(cfg, strategy, 1, &best, &vocab, &log)?;
                manifest_stages.push(stage_manifest(1, &log));
            } else {
                let train2 = load_split(cfg, 2, "train", Split::Train)?;
                let valid2 = load_split(cfg, 2, "valid", Split::Validation)?;
                let (first, second) = train_two_stage(
                    model,
                    StageData {
                        train: &train1,
                        valid: &valid1,
                    },
                    Some(StageData {
                        train: &train2,
                        valid: &valid2,
                    }),
                    &cfg1,
                    &cfg2,
                    &vocab,
                )?;
                save_stage_artifacts(cfg, strategy, 1, &first.checkpoint, &vocab, &first.log)?;
                manifest_stages.push(stage_manifest(1, &first.log));
                let second = second.expect("stage 2 requested");
                save_stage_artifacts(cfg, strategy, 2, &second.checkpoint, &vocab, &second.log)?;
                manifest_stages.push(stage_manifest(2, &second.log));
            }
        }
        StageSel::Two => {
            let ckpt1 = checkpoint_path(cfg, strategy, 1);
            if !ckpt1.exists() {
                return Err(CoatError::Config(format!(
                    "{} not found; train stage 1 first",
                    ckpt1.display()
                )));
            }
            let (model, ckpt_vocab, _) = load_checkpoint::<f32>(&ckpt1)?;
            let train2 = load_split(cfg, 2, "train", Split::Train)?;
            let valid2 = load_split(cfg, 2, "valid", Split::Validation)?;
            let (best, log) = train_stage(model, &train2, &valid2, &cfg2, &ckpt_vocab)?;
            save_stage_artifacts(cfg, strategy, 2, &best, &ckpt_vocab, &log)?;
            manifest_stages.push(stage_manifest(2, &log));
        }
    }
    write_manifest(
        &dir,
        &json!({
            "strategy": strategy.as_str(),
            "seed": cfg.seed,
            "model": cfg.model,
            "stages": manifest_stages,
        }),
    )?;
    Ok(())
}

fn stage_manifest(stage: usize, log: &TrainLog) -> serde_json::Value {
    json!({
        "stage": stage,
        "chosen_step": log.chosen_step,
        "best_valid_loss": log.best_valid_loss(),
        "built_instances": log.built_instances,
        "skipped_no_demonstrations": log.skipped_no_demos,
        "skipped_other": log.skipped_other,
        "info_violations": log.info_violations,
        "self_inclusions": log.self_inclusions,
    })
}

fn eval_stage_num(stage: StageSel) -> Result<usize> {
    match stage {
        StageSel::One => Ok(1),
        StageSel::Two => Ok(2),
        StageSel::Both => Err(CoatError::InvalidArgument(
            "evaluation applies to one stage's test split at a time".to_string(),
        )),
    }
}

/// `eval`: unseen-concept evaluation of one checkpoint.
pub fn cmd_eval(
    cfg: &RunConfig,
    strategy: SelectionStrategy,
    checkpoint: Option<&Path>,
    stage: StageSel,
) -> Result<()> {
    let stage = eval_stage_num(stage)?;
    write_config_snapshot(cfg, "eval")?;
    let default_path = checkpoint_path(cfg, strategy, stage);
    let path = checkpoint.unwrap_or(&default_path);
    let (model, vocab, _) = load_checkpoint::<f32>(path)?;
    let test = load_split(cfg, stage, "test", Split::Test)?;
    let eval_cfg = cfg.eval.to_config(derive_seed(cfg.seed, "eval", stage as u64));
    let (report, outcomes) = evaluate(
        &model,
        &vocab,
        &test,
        &test,
        &eval_cfg,
        strategy.as_str(),
    )?;

    let dir = cfg.out().join("reports");
    ensure_dir(&dir)?;
    write_outcomes(
        &outcomes,
        &dir.join(format!("eval-{strategy}-stage{stage}.outcomes.jsonl")),
    )?;
    let (table, jsonl) = report_render(std::slice::from_ref(&report));
    fs::write(
        dir.join(format!("eval-{strategy}-stage{stage}.report.jsonl")),
        jsonl,
    )?;
    write_manifest(
        &dir,
        &json!({
            "stage": stage,
            "seed": cfg.seed,
            "eval": cfg.eval,
        }),
    )?;
    print!("{table}");
    Ok(())
}

/// `compare`: evaluate all three strategy checkpoints head to head.
pub fn cmd_compare(cfg: &RunConfig, stage: StageSel) -> Result<()> {
    let stage = eval_stage_num(stage)?;
    write_config_snapshot(cfg, "compare")?;
    let mut loaded = Vec::new();
    for strategy in SelectionStrategy::ALL {
        let path = checkpoint_path(cfg, strategy, stage);
        if !path.exists() {
            return Err(CoatError::Config(format!(
                "{} not found; train all strategies before comparing",
                path.display()
            )));
        }
        loaded.push((strategy, load_checkpoint::<f32>(&path)?));
    }
    let entries: Vec<(String, &TinyLm<f32>, &Vocabulary)> = loaded
        .iter()
        .map(|(s, (m, v, _))| (s.as_str().to_string(), m, v))
        .collect();
    let test = load_split(cfg, stage, "test", Split::Test)?;
    let eval_cfg = cfg.eval.to_config(derive_seed(cfg.seed, "eval", stage as u64));
    let (comparison, outcomes) = compare_strategies(&entries, &test, &test, &eval_cfg)?;

    let dir = cfg.out().join("reports");
    ensure_dir(&dir)?;
    let (table, jsonl) = report_render(&comparison.reports);
    let mut text = table.clone();
    for (a, b, delta) in &comparison.deltas {
        text.push_str(&format!("{a} - {b}: {:+.1} points\n", delta * 100.0));
    }
    if let Some((wins, n)) = comparison.coat_over_random {
        text.push_str(&format!("coat beats random_uniform on {wins}/{n} seeds\n"));
    }
    fs::write(dir.join(format!("compare-stage{stage}.txt")), &text)?;
    fs::write(dir.join(format!("compare-stage{stage}.jsonl")), jsonl)?;
    for ((strategy, _), outcome) in loaded.iter().zip(&outcomes) {
        write_outcomes(
            outcome,
            &dir.join(format!("compare-{strategy}-stage{stage}.outcomes.jsonl")),
        )?;
    }
    print!("{text}");
    Ok(())
}
