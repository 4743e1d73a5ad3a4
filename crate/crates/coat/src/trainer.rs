//! Training orchestration: batch construction under a selection
//! strategy, teacher-forced updates, early stopping on a standardized
//! validation set, and the two-stage pipeline.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoatError, Result};
use crate::model::{OptimizerState, Scalar, TinyLm};
use crate::prompts::{target_mask, training_sequence, PromptInstance, Vocabulary};
use crate::sampler::{
    build_index, draw_k, informative_pool, select_info_only, select_nontrivial, select_random,
    ConceptIndex, CurriculumRecord, SelectionStrategy, DEFAULT_POOL_SIZE,
};
use crate::scoring::CachedPrefixScorer;
use crate::seeds::derive_seed;
use crate::syndata::{Dataset, Sample};

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: SelectionStrategy,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between validation evaluations.
    pub eval_interval: usize,
    pub pool_size: usize,
    /// How often (in optimizer steps) the scoring snapshot follows the
    /// trained model; 1 means the selector always sees current weights.
    pub scorer_refresh_steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale preset: from-scratch training on one CPU core.
    pub fn desk(strategy: SelectionStrategy) -> Self {
        TrainConfig {
            strategy,
            lr: 3e-4,
            batch_size: 16,
            max_steps: 5000,
            patience: 5,
            eval_interval: 100,
            pool_size: DEFAULT_POOL_SIZE,
            scorer_refresh_steps: 1,
            seed: 0,
        }
    }

    /// Hyperparameters used for fine-tuning a pretrained billion-scale
    /// model; kept as a documented preset, not suitable for from-scratch
    /// desk runs.
    pub fn paper(strategy: SelectionStrategy) -> Self {
        TrainConfig {
            lr: 2e-5,
            batch_size: 30,
            ..TrainConfig::desk(strategy)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.patience == 0
            || self.pool_size == 0
            || self.max_steps == 0
            || self.eval_interval == 0
            || self.scorer_refresh_steps == 0
        {
            return Err(CoatError::InvalidArgument(
                "batch_size, patience, pool_size, max_steps, eval_interval, and \
                 scorer_refresh_steps must all be at least 1"
                    .to_string(),
            ));
        }
        Ok(())
    }
}

/// One validation measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub strategy: SelectionStrategy,
    /// Cumulative count of predicted samples skipped for lack of
    /// same-concept demonstrations.
    pub skipped: u64,
    pub wall_ms: u64,
}

/// Everything a stage reports besides the checkpoint itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EvalPoint>,
    /// Step whose checkpoint was returned (minimal validation loss).
    pub chosen_step: u64,
    /// Predicted samples skipped because their concept is a singleton.
    pub skipped_no_demos: u64,
    /// Instances dropped for other reasons (overlength, malformed).
    pub skipped_other: u64,
    pub built_instances: u64,
    /// Demonstrations that failed to share the predicted concept, over
    /// all concept-filtered instances. Zero by construction.
    pub info_violations: u64,
    /// Instances containing the predicted sample among demonstrations.
    pub self_inclusions: u64,
}

impl TrainLog {
    pub fn best_valid_loss(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.valid_loss)
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            })
    }
}

/// Persists the log as comma-separated values with a fixed header.
pub fn write_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,train_loss,valid_loss,strategy,skipped,wall_ms")?;
    for r in &log.records {
        writeln!(
            out,
            "{},{:.6},{:.6},{},{},{}",
            r.step, r.train_loss, r.valid_loss, r.strategy, r.skipped, r.wall_ms
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Early stopping on validation loss: stop after `patience` evaluations
/// without a new minimum.
#[derive(Debug)]
pub(crate) struct EarlyStopper {
    patience: usize,
    best: f64,
    pub(crate) best_step: u64,
    since_best: usize,
}

impl EarlyStopper {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_step: 0,
            since_best: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub(crate) fn observe(&mut self, step: u64, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_step = step;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

/// A constructed training instance with its provenance.
#[derive(Debug, Clone)]
pub struct BuiltInstance {
    pub prompt: PromptInstance,
    pub demo_ids: Vec<u64>,
    pub predicted_id: u64,
    pub k: usize,
}

/// Draws `k` and applies the configured strategy to assemble one training
/// prompt around `predicted`. Concept singletons surface as
/// [`CoatError::NoDemonstrations`]; the training loop skips and logs them.
pub fn build_training_instance<S: Scalar>(
    d: &Dataset,
    idx: &ConceptIndex<'_>,
    predicted: &Sample,
    cfg: &TrainConfig,
    m: &TinyLm<S>,
    vocab: &Vocabulary,
    rng_seed: u64,
) -> Result<BuiltInstance> {
    let k = draw_k(derive_seed(rng_seed, "k", 0));
    let demos = match cfg.strategy {
        SelectionStrategy::Coat => {
            let pool = informative_pool(idx, predicted, cfg.pool_size, derive_seed(rng_seed, "pool", 0))?;
            let scorer = CachedPrefixScorer::new(m, vocab);
            select_nontrivial(&pool, &scorer, k)?
        }
        SelectionStrategy::InfoOnly => {
            let pool = informative_pool(idx, predicted, cfg.pool_size, derive_seed(rng_seed, "pool", 0))?;
            select_info_only(&pool, k, derive_seed(rng_seed, "sel", 0))?
        }
        SelectionStrategy::RandomUniform => {
            select_random(d, predicted, k, derive_seed(rng_seed, "sel", 0))?
        }
    };
    let prompt = PromptInstance::new(
        demos.iter().map(|s| (s.input.clone(), s.target.clone())).collect(),
        predicted.input.clone(),
        predicted.target.clone(),
    )?;
    Ok(BuiltInstance {
        demo_ids: demos.iter().map(|s| s.id).collect(),
        predicted_id: predicted.id,
        k: demos.len(),
        prompt,
    })
}

/// Builds one curriculum record per training sample (in id order) under
/// the given strategy, for offline replay. Concept singletons are skipped
/// and counted. The model is only consulted for the concept-aware
/// strategy; passing `None` there is a configuration error.
pub fn build_curriculum<S: Scalar>(
    d: &Dataset,
    cfg: &TrainConfig,
    model: Option<&TinyLm<S>>,
    vocab: &Vocabulary,
) -> Result<(Vec<CurriculumRecord>, u64)> {
    cfg.validate()?;
    if cfg.strategy == SelectionStrategy::Coat && model.is_none() {
        return Err(CoatError::Config(
            "concept-aware curriculum export needs a model checkpoint to score with".to_string(),
        ));
    }
    let idx = build_index(d);
    let mut records = Vec::new();
    let mut skipped = 0u64;
    for s in &d.samples {
        let seed = derive_seed(cfg.seed, "curriculum", s.id);
        let built = match cfg.strategy {
            SelectionStrategy::Coat => {
                let m = model.expect("checked above");
                build_training_instance(d, &idx, s, cfg, m, vocab, seed)
            }
            _ => build_training_instance_unscored(d, &idx, s, cfg, seed),
        };
        match built {
            Ok(b) => {
                let demos: Vec<Sample> =
                    b.demo_ids.iter().map(|&id| idx.sample(id).clone()).collect();
                records.push(CurriculumRecord::new(&demos, s, cfg.strategy, &b.prompt));
            }
            Err(CoatError::NoDemonstrations(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((records, skipped))
}

fn build_training_instance_unscored(
    d: &Dataset,
    idx: &ConceptIndex<'_>,
    predicted: &Sample,
    cfg: &TrainConfig,
    rng_seed: u64,
) -> Result<BuiltInstance> {
    let k = draw_k(derive_seed(rng_seed, "k", 0));
    let demos = match cfg.strategy {
        SelectionStrategy::InfoOnly => {
            let pool = informative_pool(idx, predicted, cfg.pool_size, derive_seed(rng_seed, "pool", 0))?;
            select_info_only(&pool, k, derive_seed(rng_seed, "sel", 0))?
        }
        SelectionStrategy::RandomUniform => {
            select_random(d, predicted, k, derive_seed(rng_seed, "sel", 0))?
        }
        SelectionStrategy::Coat => unreachable!("checked by caller"),
    };
    let prompt = PromptInstance::new(
        demos.iter().map(|s| (s.input.clone(), s.target.clone())).collect(),
        predicted.input.clone(),
        predicted.target.clone(),
    )?;
    Ok(BuiltInstance {
        demo_ids: demos.iter().map(|s| s.id).collect(),
        predicted_id: predicted.id,
        k: demos.len(),
        prompt,
    })
}

/// Fixed validation prompts: for every validation sample, uniform
/// same-concept demonstrations drawn from the training set. Depends only
/// on the datasets and seed, so every strategy sees the same set.
fn validation_instances(
    train: &Dataset,
    valid: &Dataset,
    pool_size: usize,
    seed: u64,
    max_seq_len: usize,
    vocab: &Vocabulary,
) -> Result<Vec<(Vec<u32>, Vec<bool>)>> {
    let idx = build_index(train);
    let mut out = Vec::new();
    for s in &valid.samples {
        let pool = match informative_pool(&idx, s, pool_size, derive_seed(seed, "valid-pool", s.id))
        {
            Ok(p) => p,
            Err(CoatError::NoDemonstrations(_)) => continue,
            Err(e) => return Err(e),
        };
        let k = draw_k(derive_seed(seed, "valid-k", s.id));
        let demos = select_info_only(&pool, k, derive_seed(seed, "valid-sel", s.id))?;
        let prompt = PromptInstance::new(
            demos.iter().map(|d| (d.input.clone(), d.target.clone())).collect(),
            s.input.clone(),
            s.target.clone(),
        )?;
        let (ids, target_start) = training_sequence(vocab, &prompt)?;
        if ids.len() > max_seq_len {
            continue;
        }
        let mask = target_mask(ids.len(), target_start);
        out.push((ids, mask));
    }
    Ok(out)
}

/// Trains until the step budget or patience runs out and returns the
/// checkpoint with minimal validation loss plus the stage log.
pub fn train_stage<S: Scalar>(
    model: TinyLm<S>,
    train: &Dataset,
    valid: &Dataset,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<(TinyLm<S>, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(CoatError::InvalidArgument(
            "training and validation sets must be non-empty".to_string(),
        ));
    }
    let max_seq_len = model.config().max_seq_len;
    let valid_batch =
        validation_instances(train, valid, cfg.pool_size, cfg.seed, max_seq_len, vocab)?;
    if valid_batch.is_empty() {
        return Err(CoatError::Config(
            "no validation instance could be constructed; validation loss would never be \
             computed"
                .to_string(),
        ));
    }

    let started = Instant::now();
    let idx = build_index(train);
    let mut model = model;
    let mut opt = OptimizerState::new(model.params().len(), cfg.lr);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_model = model.clone();
    let mut log = TrainLog {
        records: Vec::new(),
        chosen_step: 0,
        skipped_no_demos: 0,
        skipped_other: 0,
        built_instances: 0,
        info_violations: 0,
        self_inclusions: 0,
    };
    let mut snapshot: Option<TinyLm<S>> = None;
    let mut train_loss_sum = 0.0;
    let mut train_loss_n = 0u64;

    for step in 1..=cfg.max_steps as u64 {
        if cfg.strategy == SelectionStrategy::Coat && cfg.scorer_refresh_steps > 1 {
            if (step - 1) % cfg.scorer_refresh_steps as u64 == 0 {
                snapshot = Some(model.clone());
            }
        }
        let scoring_model = snapshot.as_ref().unwrap_or(&model);

        let mut picker = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batch", step));
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let predicted = &train.samples[picker.random_range(0..train.len())];
            let inst_seed = derive_seed(cfg.seed, "inst", (step << 24) | i as u64);
            match build_training_instance(train, &idx, predicted, cfg, scoring_model, vocab, inst_seed)
            {
                Ok(built) => {
                    audit(&built, predicted, &idx, cfg.strategy, &mut log);
                    let (ids, target_start) = training_sequence(vocab, &built.prompt)?;
                    if ids.len() > max_seq_len {
                        log.skipped_other += 1;
                        continue;
                    }
                    let mask = target_mask(ids.len(), target_start);
                    batch.push((ids, mask));
                }
                Err(CoatError::NoDemonstrations(_)) => log.skipped_no_demos += 1,
                Err(CoatError::InvalidArgument(_)) => log.skipped_other += 1,
                Err(e) => return Err(e),
            }
        }
        if !batch.is_empty() {
            let loss = model.backward_and_step(&mut opt, &batch)?;
            train_loss_sum += loss;
            train_loss_n += 1;
        }

        if step % cfg.eval_interval as u64 == 0 || step == cfg.max_steps as u64 {
            let valid_loss = model.batch_nll(&valid_batch)?;
            let train_loss = if train_loss_n > 0 {
                train_loss_sum / train_loss_n as f64
            } else {
                f64::NAN
            };
            log.records.push(EvalPoint {
                step,
                train_loss,
                valid_loss,
                strategy: cfg.strategy,
                skipped: log.skipped_no_demos,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            train_loss_sum = 0.0;
            train_loss_n = 0;
            let (improved, stop) = stopper.observe(step, valid_loss);
            if improved {
                best_model = model.clone();
            }
            if stop {
                break;
            }
        }
    }
    log.chosen_step = stopper.best_step;
    Ok((best_model, log))
}

fn audit(
    built: &BuiltInstance,
    predicted: &Sample,
    idx: &ConceptIndex<'_>,
    strategy: SelectionStrategy,
    log: &mut TrainLog,
) {
    log.built_instances += 1;
    if built.demo_ids.iter().any(|&id| id == predicted.id) {
        log.self_inclusions += 1;
    }
    if matches!(
        strategy,
        SelectionStrategy::Coat | SelectionStrategy::InfoOnly
    ) {
        for &id in &built.demo_ids {
            if idx.sample(id).concept != predicted.concept {
                log.info_violations += 1;
            }
        }
    }
}

/// Datasets for one stage.
pub struct StageData<'a> {
    pub train: &'a Dataset,
    pub valid: &'a Dataset,
}

pub struct StageResult<S: Scalar> {
    pub checkpoint: TinyLm<S>,
    pub log: TrainLog,
}

/// Stage 1 on concept-annotated data, then (optionally) stage 2 on the
/// natural proxy, continuing from the stage-1 best checkpoint. The
/// vocabulary must cover both stages.
pub fn train_two_stage<S: Scalar>(
    model: TinyLm<S>,
    stage1: StageData<'_>,
    stage2: Option<StageData<'_>>,
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<(StageResult<S>, Option<StageResult<S>>)> {
    let (ckpt1, log1) = train_stage(model, stage1.train, stage1.valid, cfg1, vocab)
        .map_err(|e| stage_error(1, e))?;
    let first = StageResult {
        checkpoint: ckpt1,
        log: log1,
    };
    let second = match stage2 {
        None => None,
        Some(data) => {
            let (ckpt2, log2) =
                train_stage(first.checkpoint.clone(), data.train, data.valid, cfg2, vocab)
                    .map_err(|e| stage_error(2, e))?;
            Some(StageResult {
                checkpoint: ckpt2,
                log: log2,
            })
        }
    };
    Ok((first, second))
}

fn stage_error(stage: usize, e: CoatError) -> CoatError {
    match e {
        CoatError::InvalidArgument(m) => CoatError::InvalidArgument(format!("stage {stage}: {m}")),
        CoatError::Config(m) => CoatError::Config(format!("stage {stage}: {m}")),
        CoatError::NonFinite(m) => CoatError::NonFinite(format!("stage {stage}: {m}")),
        other => other,
    }
}
