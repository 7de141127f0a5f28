//! Experiment orchestration: dataset splits, the gradient-accumulation
//! training loop, validation-based model selection, run persistence, and
//! multi-seed repetition.
//!
//! Every random decision inside a run is keyed by `(run_seed, purpose,
//! counters)`, so a run replays bit-for-bit from its seed alone and repeats
//! can execute in parallel without sharing state.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encounter::{Encounter, NodeKind, NodeRef};
use crate::error::{Error, Result};
use crate::graph::{self, CondProbTables, NodeIndexing};
use crate::models::{
    checkpoint, ForwardCtx, Model, ModelKind, ModelSpec, ParamStore, VocabSizes,
};
use crate::numerics::{AdamHyper, AdamState};
use crate::rng::{StreamRng, StreamTag};
use crate::tasks::{self, TaskKind};
use crate::{Tape, Tensor};

pub const RUN_FORMAT_VERSION: u32 = 1;

/// Files written into a run directory.
pub const RUN_RECORD_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

/// Optimization and protocol settings for one experiment.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Validation cadence in iterations.
    pub eval_interval: usize,
    /// Master seed; per-repeat run seeds derive from it.
    pub seed: u64,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    /// Independent split-and-train repetitions aggregated per experiment.
    pub repeats: usize,
    /// Mass placed on the prior's fixed diagonal and visit cells before row
    /// normalization.
    pub green_value: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            iterations: 20_000,
            lr: 1e-3,
            eval_interval: 500,
            seed: 0,
            train_ratio: 0.8,
            valid_ratio: 0.1,
            repeats: 5,
            green_value: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval interval must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, r) in [("train", self.train_ratio), ("valid", self.valid_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{} ratio {} outside (0,1)", name, r)));
            }
        }
        if self.train_ratio + self.valid_ratio >= 1.0 {
            return Err(Error::Config(
                "train and valid ratios leave no room for a test split".into(),
            ));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if !(self.green_value > 0.0 && self.green_value.is_finite()) {
            return Err(Error::Config(format!(
                "green value {} must be positive",
                self.green_value
            )));
        }
        Ok(())
    }
}

/// On-disk shape of an experiment config file: both halves optional,
/// unspecified fields fall back to defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

/// Data family a preset was tuned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFamily {
    Synthetic,
    Eicu,
}

impl DatasetFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFamily::Synthetic => "synthetic",
            DatasetFamily::Eicu => "eicu",
        }
    }
}

impl std::str::FromStr for DatasetFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetFamily::Synthetic),
            "eicu" => Ok(DatasetFamily::Eicu),
            _ => Err(Error::Config(format!("unknown dataset family {:?}", s))),
        }
    }
}

/// One tuned hyperparameter row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub lr: f64,
    pub mlp_dropout: f64,
    pub post_dropout: f64,
    pub lambda: f64,
}

impl Preset {
    pub fn apply(&self, spec: &mut ModelSpec, config: &mut TrainConfig) {
        spec.mlp_dropout = self.mlp_dropout;
        spec.post_dropout = self.post_dropout;
        spec.lambda = self.lambda;
        config.lr = self.lr;
    }
}

/// Tuned settings for a supported (family, task, model) combination.
/// Combinations that were never tuned, or that are structurally invalid
/// (Deep cannot reconstruct graphs, GCN needs ground-truth structure the
/// eICU format lacks), have no preset.
pub fn preset(family: DatasetFamily, task: TaskKind, model: ModelKind) -> Result<Preset> {
    use DatasetFamily::{Eicu, Synthetic};
    use ModelKind::{Deep, Gcn, GcnP, GcnRandom, Gct, Shallow, Transformer};
    use TaskKind::{DxTreatment, GraphRecon, MaskedDx, Mortality, Readmission};
    // (learning rate, mlp dropout, post-mlp dropout, lambda)
    let row = match (family, task, model) {
        (Synthetic, GraphRecon, Gcn) => Some((0.00045, 0.3, 0.2, 0.0)),
        (Synthetic, GraphRecon, GcnP) => Some((0.0006, 0.01, 0.02, 0.0)),
        (Synthetic, GraphRecon, GcnRandom) => Some((0.0003, 0.5, 0.005, 0.0)),
        (Synthetic, GraphRecon, Shallow) => Some((0.00025, 0.2, 0.0, 0.0)),
        (Synthetic, GraphRecon, Transformer) => Some((0.0007, 0.8, 0.001, 0.0)),
        (Synthetic, GraphRecon, Gct) => Some((0.0005, 0.3, 0.1, 0.02)),

        (Synthetic, DxTreatment, Gcn) => Some((0.0001, 0.2, 0.65, 0.0)),
        (Synthetic, DxTreatment, GcnP) => Some((0.0001, 0.3, 0.02, 0.0)),
        (Synthetic, DxTreatment, GcnRandom) => Some((0.0001, 0.5, 0.4, 0.0)),
        (Synthetic, DxTreatment, Shallow) => Some((0.0002, 0.02, 0.0, 0.0)),
        (Synthetic, DxTreatment, Deep) => Some((0.0008, 0.01, 0.3, 0.0)),
        (Synthetic, DxTreatment, Transformer) => Some((0.00015, 0.5, 0.01, 0.0)),
        (Synthetic, DxTreatment, Gct) => Some((0.0001, 0.85, 0.03, 0.05)),

        (Synthetic, MaskedDx, Gcn) => Some((0.0003, 0.01, 0.88, 0.0)),
        (Synthetic, MaskedDx, GcnP) => Some((0.0007, 0.8, 0.005, 0.0)),
        (Synthetic, MaskedDx, GcnRandom) => Some((0.0002, 0.5, 0.5, 0.0)),
        (Synthetic, MaskedDx, Shallow) => Some((0.0007, 0.08, 0.0, 0.0)),
        (Synthetic, MaskedDx, Deep) => Some((0.0004, 0.12, 0.75, 0.0)),
        (Synthetic, MaskedDx, Transformer) => Some((0.0003, 0.4, 0.5, 0.0)),
        (Synthetic, MaskedDx, Gct) => Some((0.0001, 0.85, 0.6, 0.05)),

        (Eicu, MaskedDx, GcnP) => Some((0.0005, 0.5, 0.5, 0.0)),
        (Eicu, MaskedDx, GcnRandom) => Some((0.0001, 0.3, 0.4, 0.0)),
        (Eicu, MaskedDx, Shallow) => Some((0.0001, 0.3, 0.0, 0.0)),
        (Eicu, MaskedDx, Deep) => Some((0.00012, 0.4, 0.45, 0.0)),
        (Eicu, MaskedDx, Transformer) => Some((0.0001, 0.87, 0.2, 0.0)),
        (Eicu, MaskedDx, Gct) => Some((0.0009, 0.5, 0.03, 50.0)),

        (Eicu, Readmission, GcnP) => Some((0.00024, 0.3, 0.1, 0.0)),
        (Eicu, Readmission, GcnRandom) => Some((0.0001, 0.7, 0.01, 0.0)),
        (Eicu, Readmission, Shallow) => Some((0.0001, 0.63, 0.0, 0.0)),
        (Eicu, Readmission, Deep) => Some((0.00011, 0.05, 0.33, 0.0)),
        (Eicu, Readmission, Transformer) => Some((0.0002, 0.45, 0.28, 0.0)),
        (Eicu, Readmission, Gct) => Some((0.00022, 0.08, 0.024, 0.1)),

        (Eicu, Mortality, GcnP) => Some((0.0003, 0.85, 0.04, 0.0)),
        (Eicu, Mortality, GcnRandom) => Some((0.00013, 0.9, 0.01, 0.0)),
        (Eicu, Mortality, Shallow) => Some((0.0001, 0.25, 0.0, 0.0)),
        (Eicu, Mortality, Deep) => Some((0.00015, 0.01, 0.01, 0.0)),
        (Eicu, Mortality, Transformer) => Some((0.0006, 0.88, 0.2, 0.0)),
        (Eicu, Mortality, Gct) => Some((0.00011, 0.72, 0.005, 1.5)),

        _ => None,
    };
    row.map(|(lr, mlp_dropout, post_dropout, lambda)| Preset {
        lr,
        mlp_dropout,
        post_dropout,
        lambda,
    })
    .ok_or_else(|| {
        Error::Config(format!(
            "no tuned preset for {}/{}/{}",
            family.as_str(),
            task.as_str(),
            model.as_str()
        ))
    })
}

/// Resolve a `family/task/model` preset name, e.g. `synthetic/graph-recon/gct`.
pub fn lookup_preset(name: &str) -> Result<(DatasetFamily, TaskKind, ModelKind, Preset)> {
    let parts: Vec<&str> = name.split('/').collect();
    let [family, task, model] = parts.as_slice() else {
        return Err(Error::Config(format!(
            "preset name {:?} is not of the form dataset/task/model",
            name
        )));
    };
    let family: DatasetFamily = family.parse()?;
    let task: TaskKind = task.parse()?;
    let model: ModelKind = model.parse()?;
    let p = preset(family, task, model)?;
    Ok((family, task, model, p))
}

/// Validation metric that drives model selection for a task.
pub fn selection_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::MaskedDx => "accuracy",
        _ => "aucpr",
    }
}

/// Seeded shuffle and contiguous cut into train/valid/test.
pub fn split(
    encounters: &[Encounter],
    seed: u64,
    config: &TrainConfig,
) -> Result<(Vec<Encounter>, Vec<Encounter>, Vec<Encounter>)> {
    let n = encounters.len();
    if n < 10 {
        return Err(Error::Config(format!(
            "dataset of {} encounters is too small to split",
            n
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    StreamRng::new(seed, StreamTag::Split, &[]).shuffle(&mut idx);
    let n_train = (n as f64 * config.train_ratio).round() as usize;
    let cum = (n as f64 * (config.train_ratio + config.valid_ratio)).round() as usize;
    if n_train == 0 || cum <= n_train || cum >= n {
        return Err(Error::Config(format!(
            "split ratios give empty parts for {} encounters",
            n
        )));
    }
    let take = |range: &[usize]| range.iter().map(|&i| encounters[i].clone()).collect();
    Ok((take(&idx[..n_train]), take(&idx[n_train..cum]), take(&idx[cum..])))
}

/// Forward-pass variations used by equivalence tests; never persisted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOverrides {
    /// GCT propagates its first block's computed attention instead of the
    /// prior, reducing it to a masked Transformer.
    pub propagate_first_attention: bool,
    /// Hand the Transformer the structural attention mask it normally runs
    /// without.
    pub mask_transformer: bool,
}

/// A fully specified experiment: what to train, on which task, and how.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub model_spec: ModelSpec,
    pub task: TaskKind,
    pub config: TrainConfig,
    pub vocabs: VocabSizes,
    pub overrides: ForwardOverrides,
}

/// Per-encounter matrices a model kind consumes.
pub struct CtxInputs {
    pub mask: Option<Tensor>,
    pub prior: Option<Tensor>,
    pub adjacency: Option<Tensor>,
}

impl CtxInputs {
    pub fn ctx<'a>(
        &'a self,
        encounter: &'a Encounter,
        masked_dx: Option<usize>,
        propagate_first_attention: bool,
        train: bool,
    ) -> ForwardCtx<'a> {
        ForwardCtx {
            encounter,
            mask: self.mask.as_ref(),
            prior: self.prior.as_ref(),
            adjacency: self.adjacency.as_ref(),
            masked_dx,
            pinned_attention: None,
            propagate_first_attention,
            train,
        }
    }
}

/// Hide one diagnosis block position from an already-built prior.
fn masked_prior(enc: &Encounter, prior: &Tensor, pos: usize) -> Result<Tensor> {
    let idx = NodeIndexing::of(enc);
    let node = idx.index(NodeRef::new(NodeKind::Diagnosis, pos as u32));
    graph::mask_diagnosis_in_prior(prior, node, &idx)
}

fn choose_masked_dx(enc: &Encounter, seed: u64, tag: StreamTag, parts: &[u64]) -> Result<usize> {
    if enc.dx.is_empty() {
        return Err(Error::Domain(format!(
            "encounter {} has no diagnosis to mask",
            enc.id
        )));
    }
    Ok(StreamRng::new(seed, tag, parts).below(enc.dx.len() as u64) as usize)
}

impl Experiment {
    pub fn new(
        model_spec: ModelSpec,
        task: TaskKind,
        config: TrainConfig,
        vocabs: VocabSizes,
    ) -> Result<Self> {
        model_spec.validate()?;
        config.validate()?;
        task.check_model(model_spec.kind)?;
        if vocabs.dx == 0 || vocabs.treat == 0 || vocabs.lab == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        Ok(Experiment {
            model_spec,
            task,
            config,
            vocabs,
            overrides: ForwardOverrides::default(),
        })
    }

    /// Assemble the matrices this experiment's model reads for one encounter,
    /// before any per-pass diagnosis hiding. Deterministic in (tables,
    /// encounter, run_seed), so callers may build these once per encounter
    /// and reuse them across iterations.
    pub fn base_inputs(
        &self,
        tables: &CondProbTables,
        enc: &Encounter,
        run_seed: u64,
    ) -> Result<CtxInputs> {
        let kind = self.model_spec.kind;
        let mask = if kind == ModelKind::Gct
            || (kind == ModelKind::Transformer && self.overrides.mask_transformer)
        {
            Some(graph::build_mask(enc))
        } else {
            None
        };
        let prior = if kind == ModelKind::Gct || kind == ModelKind::GcnP {
            Some(graph::build_prior(enc, tables, self.config.green_value)?)
        } else {
            None
        };
        let adjacency = match kind {
            ModelKind::Gcn => Some(graph::build_true_adjacency(enc)?),
            ModelKind::GcnRandom => Some(graph::build_random_adjacency(
                NodeIndexing::of(enc).n(),
                run_seed,
                enc.id,
            )),
            _ => None,
        };
        Ok(CtxInputs {
            mask,
            prior,
            adjacency,
        })
    }

    /// Assemble the matrices this experiment's model reads for one encounter.
    /// `masked_dx` is the diagnosis block position hidden from the prior.
    pub fn ctx_inputs(
        &self,
        tables: &CondProbTables,
        enc: &Encounter,
        masked_dx: Option<usize>,
        run_seed: u64,
    ) -> Result<CtxInputs> {
        let mut inputs = self.base_inputs(tables, enc, run_seed)?;
        if let (Some(pos), Some(p)) = (masked_dx, &inputs.prior) {
            inputs.prior = Some(masked_prior(enc, p, pos)?);
        }
        Ok(inputs)
    }

    /// Deterministic evaluation over a split; dropout is off and the masked
    /// diagnosis for each encounter is keyed by its id.
    pub fn evaluate(
        &self,
        model: &Model,
        tables: &CondProbTables,
        encounters: &[Encounter],
        run_seed: u64,
    ) -> Result<BTreeMap<String, f64>> {
        if encounters.is_empty() {
            return Err(Error::Domain("no encounters to evaluate".into()));
        }
        let mut accum = tasks::TaskAccum::new(self.task);
        for enc in encounters {
            let masked = match self.task {
                TaskKind::MaskedDx => Some(choose_masked_dx(
                    enc,
                    run_seed,
                    StreamTag::EvalMask,
                    &[enc.id],
                )?),
                _ => None,
            };
            let inputs = self.ctx_inputs(tables, enc, masked, run_seed)?;
            let mut tape = Tape::new();
            let ctx = inputs.ctx(enc, masked, self.overrides.propagate_first_attention, false);
            let mut rng = eval_rng(run_seed);
            let out = model.forward(&mut tape, &ctx, &mut rng)?;
            let tl = tasks::apply_task(
                &mut tape,
                &model.params,
                &out,
                enc,
                self.task,
                model.spec.kind,
                masked,
            )?;
            accum.push(&tl.scores)?;
        }
        accum.metrics()
    }
}

/// Evaluation passes never draw from the stream; any key works.
pub fn eval_rng(run_seed: u64) -> StreamRng {
    StreamRng::new(run_seed, StreamTag::Dropout, &[u64::MAX])
}

/// Mutable optimization state for one run.
pub struct TrainState<'a> {
    exp: &'a Experiment,
    train: &'a [Encounter],
    /// Base context inputs per training encounter, built once; per-pass
    /// diagnosis hiding is applied on top of these.
    ctx: Vec<CtxInputs>,
    run_seed: u64,
    pub model: Model,
    adam: AdamState<f64>,
    hyper: AdamHyper<f64>,
    queue: VecDeque<usize>,
    epoch: u64,
    iteration: u64,
}

impl<'a> TrainState<'a> {
    pub fn new(
        exp: &'a Experiment,
        train: &'a [Encounter],
        tables: &'a CondProbTables,
        run_seed: u64,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Domain("empty training split".into()));
        }
        let heads = tasks::head_param_specs(exp.task, exp.model_spec.dim, exp.vocabs.dx);
        let model = Model::with_extra_params(exp.model_spec.clone(), exp.vocabs, run_seed, &heads)?;
        let ctx = train
            .iter()
            .map(|enc| exp.base_inputs(tables, enc, run_seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainState {
            exp,
            train,
            ctx,
            run_seed,
            model,
            adam: AdamState::new(),
            hyper: AdamHyper::new(exp.config.lr),
            queue: VecDeque::new(),
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Epoch-shuffled sampling without replacement; a batch may straddle the
    /// epoch boundary.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.exp.config.batch_size);
        for _ in 0..self.exp.config.batch_size {
            if self.queue.is_empty() {
                let mut idx: Vec<usize> = (0..self.train.len()).collect();
                StreamRng::new(self.run_seed, StreamTag::BatchShuffle, &[self.epoch])
                    .shuffle(&mut idx);
                self.epoch += 1;
                self.queue.extend(idx);
            }
            out.push(self.queue.pop_front().expect("refilled above"));
        }
        out
    }

    /// Forward, loss, and named gradients for one batch slot. The root is
    /// pre-scaled by 1/batch so accumulated gradients form the batch mean;
    /// with lambda zero the regularizer never enters the graph.
    fn encounter_pass(&self, i: usize, it: u64, slot: u64) -> Result<(f64, Vec<(String, Tensor)>)> {
        let exp = self.exp;
        let enc = &self.train[i];
        let masked = match exp.task {
            TaskKind::MaskedDx => Some(choose_masked_dx(
                enc,
                self.run_seed,
                StreamTag::MaskChoice,
                &[it, slot],
            )?),
            _ => None,
        };
        let inputs = &self.ctx[i];
        let hidden = match (masked, &inputs.prior) {
            (Some(pos), Some(p)) => Some(masked_prior(enc, p, pos)?),
            _ => None,
        };
        let mut tape = Tape::new();
        let mut ctx = inputs.ctx(enc, masked, exp.overrides.propagate_first_attention, true);
        if let Some(p) = &hidden {
            ctx.prior = Some(p);
        }
        let mut rng = StreamRng::new(self.run_seed, StreamTag::Dropout, &[it, slot]);
        let out = self.model.forward(&mut tape, &ctx, &mut rng)?;
        let tl = tasks::apply_task(
            &mut tape,
            &self.model.params,
            &out,
            enc,
            exp.task,
            exp.model_spec.kind,
            masked,
        )?;
        let mut root = tl.loss;
        if exp.model_spec.kind == ModelKind::Gct && exp.model_spec.lambda != 0.0 {
            let reg = out.reg_loss.expect("GCT forward always emits a regularization node");
            let weighted = tape.scale(reg, exp.model_spec.lambda);
            root = tape.add(root, weighted)?;
        }
        let root = tape.scale(root, 1.0 / exp.config.batch_size as f64);
        let loss = tape.value(root).get(0, 0);
        let mut grads = tape.backward(root)?;
        let mut named = Vec::new();
        for (name, id) in out.params.into_iter().chain(tl.head_params) {
            if let Some(g) = grads.take(id) {
                named.push((name, g));
            }
        }
        Ok((loss, named))
    }

    /// True while every parameter entry is finite; optimization blowups break
    /// this before anything else.
    fn params_finite(&self) -> bool {
        self.model
            .params
            .map()
            .values()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// One optimization step over a fresh batch; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let it = self.iteration;
        let batch = self.next_batch();
        let mut total = 0.0;
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        for (slot, &i) in batch.iter().enumerate() {
            // The mask builders keep at least the diagonal open in every row,
            // so a degenerate softmax row mid-training means the logits went
            // non-finite, as does any error raised with non-finite weights.
            let (loss, grads) = match self.encounter_pass(i, it, slot as u64) {
                Ok(x) => x,
                Err(Error::DegenerateRow { .. }) => {
                    return Err(Error::Diverged { iteration: it })
                }
                Err(_) if !self.params_finite() => {
                    return Err(Error::Diverged { iteration: it });
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: it });
            }
            total += loss;
            for (name, g) in grads {
                match acc.get_mut(&name) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        acc.insert(name, g);
                    }
                }
            }
        }
        self.adam.step(self.model.params.map_mut(), &acc, &self.hyper)?;
        self.iteration += 1;
        Ok(total)
    }
}

/// One evaluation during training.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalPoint {
    pub iteration: u64,
    /// Mean batch loss since the previous evaluation; absent before any step.
    pub train_loss: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
}

/// Everything a finished run reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub format_version: u32,
    pub model: ModelSpec,
    pub task: String,
    pub config: TrainConfig,
    /// Derived seed all of this run's streams are keyed by.
    pub run_seed: u64,
    /// Repeat index reported in the metrics CSV seed column.
    pub seed_label: u64,
    pub eval_points: Vec<EvalPoint>,
    pub best_iteration: u64,
    /// Validation metrics at the best iteration.
    pub valid_metrics: BTreeMap<String, f64>,
    /// Test metrics of the selected model, computed exactly once.
    pub test_metrics: BTreeMap<String, f64>,
    /// Dataset path as given to the training command; absent for library runs.
    #[serde(default)]
    pub data: Option<String>,
    /// Checkpoint file name inside the run directory.
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
}

fn default_checkpoint() -> String {
    CHECKPOINT_FILE.into()
}

/// A trained run plus the state needed to keep evaluating it.
pub struct TrainedRun {
    pub record: RunRecord,
    /// Parameters as of the best validation point.
    pub model: Model,
    /// Conditional tables estimated from the training split only.
    pub tables: CondProbTables,
}

/// Checkpoint sidecar describing the stored parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelSpec,
    pub vocabs: VocabSizes,
    pub task: String,
    pub best_iteration: u64,
}

#[allow(clippy::too_many_arguments)]
fn push_eval(
    exp: &Experiment,
    model: &Model,
    tables: &CondProbTables,
    valid: &[Encounter],
    run_seed: u64,
    iteration: u64,
    train_loss: Option<f64>,
    eval_points: &mut Vec<EvalPoint>,
    best: &mut Option<(u64, f64, ParamStore)>,
) -> Result<()> {
    let metrics = exp.evaluate(model, tables, valid, run_seed)?;
    let name = selection_metric(exp.task);
    let score = *metrics
        .get(name)
        .ok_or_else(|| Error::Contract(format!("selection metric {} missing", name)))?;
    // strict improvement, so ties keep the earliest checkpoint
    if best.as_ref().is_none_or(|(_, b, _)| score > *b) {
        *best = Some((iteration, score, model.params.clone()));
    }
    eval_points.push(EvalPoint {
        iteration,
        train_loss,
        metrics,
    });
    Ok(())
}

/// Train one model on fixed splits: estimate conditional tables from train,
/// optimize, select on validation, then test the selected model once.
pub fn train_run(
    exp: &Experiment,
    train: &[Encounter],
    valid: &[Encounter],
    test: &[Encounter],
    run_seed: u64,
    seed_label: u64,
) -> Result<TrainedRun> {
    let tables = graph::estimate_cond_probs(train)?;
    let mut state = TrainState::new(exp, train, &tables, run_seed)?;
    let mut eval_points: Vec<EvalPoint> = Vec::new();
    let mut best: Option<(u64, f64, ParamStore)> = None;
    let total = exp.config.iterations as u64;
    let interval = exp.config.eval_interval as u64;
    let (mut loss_sum, mut loss_count) = (0.0, 0u64);
    for it in 0..total {
        let loss = state.step()?;
        loss_sum += loss;
        loss_count += 1;
        if (it + 1) % interval == 0 {
            let mean = loss_sum / loss_count as f64;
            push_eval(
                exp,
                &state.model,
                &tables,
                valid,
                run_seed,
                it + 1,
                Some(mean),
                &mut eval_points,
                &mut best,
            )?;
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    if eval_points.last().map(|p| p.iteration) != Some(total) {
        let mean = (loss_count > 0).then(|| loss_sum / loss_count as f64);
        push_eval(
            exp,
            &state.model,
            &tables,
            valid,
            run_seed,
            total,
            mean,
            &mut eval_points,
            &mut best,
        )?;
    }
    let (best_iteration, _, best_params) = best.expect("at least one evaluation always runs");
    let model = Model {
        spec: exp.model_spec.clone(),
        vocabs: exp.vocabs,
        params: best_params,
    };
    let test_metrics = exp.evaluate(&model, &tables, test, run_seed)?;
    let valid_metrics = eval_points
        .iter()
        .find(|p| p.iteration == best_iteration)
        .expect("best comes from a recorded point")
        .metrics
        .clone();
    let record = RunRecord {
        format_version: RUN_FORMAT_VERSION,
        model: exp.model_spec.clone(),
        task: exp.task.as_str().into(),
        config: exp.config.clone(),
        run_seed,
        seed_label,
        eval_points,
        best_iteration,
        valid_metrics,
        test_metrics,
        data: None,
        checkpoint: CHECKPOINT_FILE.into(),
    };
    Ok(TrainedRun {
        record,
        model,
        tables,
    })
}

/// Mean closeness of the model's propagation maps to the true graphs:
/// block-averaged KL to the normalized adjacency and attention entropy,
/// averaged over encounters.
pub fn structure_metrics(
    exp: &Experiment,
    model: &Model,
    tables: &CondProbTables,
    encounters: &[Encounter],
    run_seed: u64,
) -> Result<(f64, f64)> {
    if encounters.is_empty() {
        return Err(Error::Domain("no encounters to evaluate".into()));
    }
    let (mut kl, mut ent) = (0.0, 0.0);
    for enc in encounters {
        let truth = graph::build_true_adjacency(enc)?;
        let inputs = exp.ctx_inputs(tables, enc, None, run_seed)?;
        let mut tape = Tape::new();
        let ctx = inputs.ctx(enc, None, exp.overrides.propagate_first_attention, false);
        let out = model.forward(&mut tape, &ctx, &mut eval_rng(run_seed))?;
        let atts: Vec<&Tensor> = out.attentions.iter().map(|&id| tape.value(id)).collect();
        let (k, e) = tasks::structure_eval(&atts, &truth)?;
        kl += k;
        ent += e;
    }
    let n = encounters.len() as f64;
    Ok((kl / n, ent / n))
}

/// Six-significant-digit rendering used for all printed numbers.
pub fn sig6(v: f64) -> String {
    format!("{:.5e}", v)
}

/// One metrics CSV line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub task: String,
    pub split: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("model,task,split,seed,metric,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.model,
            r.task,
            r.split,
            r.seed,
            r.metric,
            sig6(r.value)
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// Flatten run records into CSV rows: one row per metric for the selected
/// validation point and for the test evaluation.
pub fn report_rows(records: &[RunRecord]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in records {
        for (split, metrics) in [("valid", &r.valid_metrics), ("test", &r.test_metrics)] {
            for (metric, &value) in metrics {
                rows.push(MetricRow {
                    model: r.model.kind.as_str().into(),
                    task: r.task.clone(),
                    split: split.into(),
                    seed: r.seed_label,
                    metric: metric.clone(),
                    value,
                });
            }
        }
    }
    rows
}

/// Persist a run directory: record JSON, checkpoint, and metrics CSV.
pub fn save_run(dir: &Path, run: &TrainedRun) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(&run.record)?;
    json.push('\n');
    std::fs::write(dir.join(RUN_RECORD_FILE), json)?;
    let meta = CheckpointMeta {
        format_version: RUN_FORMAT_VERSION,
        model: run.record.model.clone(),
        vocabs: run.model.vocabs,
        task: run.record.task.clone(),
        best_iteration: run.record.best_iteration,
    };
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &meta, &run.model.params)?;
    write_metrics_csv(
        &dir.join(METRICS_FILE),
        &report_rows(std::slice::from_ref(&run.record)),
    )
}

/// A run directory read back for evaluation or attention dumps.
pub struct LoadedRun {
    pub record: RunRecord,
    pub meta: CheckpointMeta,
    pub model: Model,
}

impl LoadedRun {
    /// Rebuild the experiment this run was trained under.
    pub fn experiment(&self) -> Result<Experiment> {
        Experiment::new(
            self.record.model.clone(),
            self.record.task.parse()?,
            self.record.config.clone(),
            self.meta.vocabs,
        )
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let text = std::fs::read_to_string(dir.join(RUN_RECORD_FILE))?;
    let record: RunRecord = serde_json::from_str(&text)?;
    let (meta, params): (CheckpointMeta, ParamStore) =
        checkpoint::load(&dir.join(&record.checkpoint))?;
    let model = Model {
        spec: meta.model.clone(),
        vocabs: meta.vocabs,
        params,
    };
    Ok(LoadedRun {
        record,
        meta,
        model,
    })
}

/// Per-metric mean and sample standard deviation over repeats.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

/// Aggregated result of `repeat_experiment`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub runs: Vec<RunRecord>,
    pub valid: BTreeMap<String, MetricSummary>,
    pub test: BTreeMap<String, MetricSummary>,
}

/// Seed for repeat `i`, derived so repeats are independent streams.
pub fn derive_run_seed(master: u64, repeat: u64) -> u64 {
    StreamRng::new(master, StreamTag::Repeat, &[repeat]).next_u64()
}

fn summarize(
    runs: &[RunRecord],
    pick: impl Fn(&RunRecord) -> &BTreeMap<String, f64>,
) -> BTreeMap<String, MetricSummary> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for (k, &v) in pick(r) {
            acc.entry(k.clone()).or_default().push(v);
        }
    }
    acc.into_iter()
        .map(|(k, vs)| {
            let n = vs.len() as f64;
            let mean = vs.iter().sum::<f64>() / n;
            let std = if vs.len() > 1 {
                (vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (k, MetricSummary { mean, std })
        })
        .collect()
}

/// Run `config.repeats` independent split-and-train repetitions. `jobs > 1`
/// runs repeats on a local thread pool; results are identical to the serial
/// order because each repeat is fully keyed by its derived seed.
pub fn repeat_runs(exp: &Experiment, dataset: &[Encounter], jobs: usize) -> Result<Vec<TrainedRun>> {
    let n = exp.config.repeats;
    let run_one = |i: usize| -> Result<TrainedRun> {
        let run_seed = derive_run_seed(exp.config.seed, i as u64);
        let (train, valid, test) = split(dataset, run_seed, &exp.config)?;
        train_run(exp, &train, &valid, &test, run_seed, i as u64)
    };
    let results: Vec<Result<TrainedRun>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
        pool.install(|| (0..n).into_par_iter().map(run_one).collect())
    } else {
        (0..n).map(run_one).collect()
    };
    let mut runs = Vec::with_capacity(n);
    for r in results {
        runs.push(r?);
    }
    Ok(runs)
}

/// Aggregate finished repeats into per-metric mean and std summaries.
pub fn build_report(runs: Vec<RunRecord>) -> ExperimentReport {
    let valid = summarize(&runs, |r| &r.valid_metrics);
    let test = summarize(&runs, |r| &r.test_metrics);
    ExperimentReport {
        format_version: RUN_FORMAT_VERSION,
        runs,
        valid,
        test,
    }
}

/// `repeat_runs` followed by `build_report`, discarding the trained models.
pub fn repeat_experiment(
    exp: &Experiment,
    dataset: &[Encounter],
    jobs: usize,
) -> Result<ExperimentReport> {
    let runs = repeat_runs(exp, dataset, jobs)?;
    Ok(build_report(runs.into_iter().map(|r| r.record).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, DxTreatmentLabelSpec, SyntheticConfig};
    use std::collections::BTreeSet;

    fn tiny_dataset(n: usize, seed: u64) -> Vec<Encounter> {
        let mut cfg = SyntheticConfig::desk(n, seed);
        cfg.labels = Some(DxTreatmentLabelSpec::default());
        generate_dataset(&cfg).unwrap()
    }

    fn tiny_exp(kind: ModelKind, task: TaskKind, iterations: usize) -> Experiment {
        let spec = ModelSpec {
            kind,
            dim: 4,
            attention_blocks: 2,
            conv_steps: 2,
            shallow_layers: 2,
            deep_pre_layers: 2,
            deep_post_layers: 2,
            lambda: 0.1,
            ..ModelSpec::default()
        };
        let config = TrainConfig {
            batch_size: 4,
            iterations,
            eval_interval: 5,
            ..TrainConfig::default()
        };
        let vocabs = VocabSizes {
            dx: 100,
            treat: 100,
            lab: 100,
        };
        Experiment::new(spec, task, config, vocabs).unwrap()
    }

    #[test]
    fn preset_table_pinned_row_and_gaps() {
        let (family, task, model, p) = lookup_preset("synthetic/graph-recon/gct").unwrap();
        assert_eq!(family, DatasetFamily::Synthetic);
        assert_eq!(task, TaskKind::GraphRecon);
        assert_eq!(model, ModelKind::Gct);
        assert_eq!(p.lr, 0.0005);
        assert_eq!(p.mlp_dropout, 0.3);
        assert_eq!(p.post_dropout, 0.1);
        assert_eq!(p.lambda, 0.02);

        assert!(lookup_preset("synthetic/graph-recon/deep").is_err());
        assert!(lookup_preset("eicu/readmission/gcn").is_err());
        assert!(lookup_preset("eicu/graph-recon/gct").is_err());
        assert!(lookup_preset("synthetic/graph-recon").is_err());
        assert!(lookup_preset("mars/graph-recon/gct").is_err());

        let (.., p) = lookup_preset("eicu/readmission/gcn-p").unwrap();
        assert_eq!(p.lr, 0.00024);
        let (.., p) = lookup_preset("eicu/masked-dx/gct").unwrap();
        assert_eq!(p.lambda, 50.0);
    }

    #[test]
    fn preset_apply_sets_spec_and_lr() {
        let (.., p) = lookup_preset("synthetic/masked-dx/transformer").unwrap();
        let mut spec = ModelSpec::of_kind(ModelKind::Transformer);
        let mut config = TrainConfig::default();
        p.apply(&mut spec, &mut config);
        assert_eq!(config.lr, 0.0003);
        assert_eq!(spec.mlp_dropout, 0.4);
        assert_eq!(spec.post_dropout, 0.5);
        assert_eq!(spec.lambda, 0.0);
    }

    #[test]
    fn split_is_exact_deterministic_and_disjoint() {
        let data = tiny_dataset(10, 3);
        assert_eq!(data.len(), 10);
        let config = TrainConfig::default();
        let (tr, va, te) = split(&data, 7, &config).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));

        let (tr2, va2, te2) = split(&data, 7, &config).unwrap();
        let ids = |xs: &[Encounter]| xs.iter().map(|e| e.id).collect::<Vec<_>>();
        assert_eq!(ids(&tr), ids(&tr2));
        assert_eq!(ids(&va), ids(&va2));
        assert_eq!(ids(&te), ids(&te2));

        let mut all: BTreeSet<u64> = BTreeSet::new();
        for e in tr.iter().chain(va.iter()).chain(te.iter()) {
            assert!(all.insert(e.id), "id {} duplicated across splits", e.id);
        }
        assert_eq!(all, data.iter().map(|e| e.id).collect::<BTreeSet<_>>());
    }

    #[test]
    fn split_rejects_undersized_datasets() {
        let data = tiny_dataset(9, 3);
        assert!(matches!(
            split(&data, 0, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { eval_interval: 0, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { train_ratio: 0.95, valid_ratio: 0.1, ..ok.clone() },
            TrainConfig { valid_ratio: 0.0, ..ok.clone() },
            TrainConfig { repeats: 0, ..ok.clone() },
            TrainConfig { green_value: 0.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn zero_iterations_reports_init_model() {
        let data = tiny_dataset(12, 5);
        let exp = tiny_exp(ModelKind::Transformer, TaskKind::GraphRecon, 0);
        let (tr, va, te) = split(&data, 1, &exp.config).unwrap();
        let run = train_run(&exp, &tr, &va, &te, 1, 0).unwrap();
        assert_eq!(run.record.best_iteration, 0);
        assert_eq!(run.record.eval_points.len(), 1);
        assert_eq!(run.record.eval_points[0].train_loss, None);
        assert!(run.record.test_metrics.contains_key("aucpr"));
        // replay is byte-identical
        let run2 = train_run(&exp, &tr, &va, &te, 1, 0).unwrap();
        assert_eq!(
            serde_json::to_string(&run.record).unwrap(),
            serde_json::to_string(&run2.record).unwrap()
        );
    }

    #[test]
    fn fixed_seed_training_replays_bit_identically() {
        let data = tiny_dataset(12, 6);
        let exp = tiny_exp(ModelKind::Gct, TaskKind::GraphRecon, 6);
        let (tr, va, te) = split(&data, 2, &exp.config).unwrap();
        let a = train_run(&exp, &tr, &va, &te, 2, 0).unwrap();
        let b = train_run(&exp, &tr, &va, &te, 2, 0).unwrap();
        assert_eq!(
            serde_json::to_string(&a.record).unwrap(),
            serde_json::to_string(&b.record).unwrap()
        );
        for (name, t) in a.model.params.map() {
            assert_eq!(t.data(), b.model.params.get(name).unwrap().data(), "{}", name);
        }
        // evals landed at 5 and 6, and the best is one of them
        let iters: Vec<u64> = a.record.eval_points.iter().map(|p| p.iteration).collect();
        assert_eq!(iters, vec![5, 6]);
        assert!(iters.contains(&a.record.best_iteration));
        let best = a
            .record
            .eval_points
            .iter()
            .find(|p| p.iteration == a.record.best_iteration)
            .unwrap();
        assert_eq!(best.metrics, a.record.valid_metrics);
    }

    #[test]
    fn gct_without_regularization_tracks_masked_transformer() {
        let data = tiny_dataset(12, 7);
        let config = TrainConfig {
            batch_size: 3,
            iterations: 8,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        let vocabs = VocabSizes { dx: 100, treat: 100, lab: 100 };
        let mk = |kind: ModelKind, lambda: f64| ModelSpec {
            kind,
            dim: 4,
            attention_blocks: 2,
            lambda,
            ..ModelSpec::default()
        };
        let mut gct_exp =
            Experiment::new(mk(ModelKind::Gct, 0.0), TaskKind::GraphRecon, config.clone(), vocabs)
                .unwrap();
        gct_exp.overrides.propagate_first_attention = true;
        let mut tr_exp = Experiment::new(
            mk(ModelKind::Transformer, 0.0),
            TaskKind::GraphRecon,
            config.clone(),
            vocabs,
        )
        .unwrap();
        tr_exp.overrides.mask_transformer = true;

        let (train, _, _) = split(&data, 9, &config).unwrap();
        let tables = graph::estimate_cond_probs(&train).unwrap();
        let mut s1 = TrainState::new(&gct_exp, &train, &tables, 9).unwrap();
        let mut s2 = TrainState::new(&tr_exp, &train, &tables, 9).unwrap();
        for step in 0..8 {
            let l1 = s1.step().unwrap();
            let l2 = s2.step().unwrap();
            assert_eq!(l1, l2, "losses diverged at step {}", step);
        }
        for (name, t) in s1.model.params.map() {
            assert_eq!(t.data(), s2.model.params.get(name).unwrap().data(), "{}", name);
        }
    }

    #[test]
    fn lambda_zero_excludes_regularization_from_loss() {
        let data = tiny_dataset(12, 8);
        let config = TrainConfig {
            batch_size: 2,
            iterations: 1,
            eval_interval: 100,
            ..TrainConfig::default()
        };
        let vocabs = VocabSizes { dx: 100, treat: 100, lab: 100 };
        let mk = |lambda: f64, first_block_kl: bool| {
            Experiment::new(
                ModelSpec {
                    kind: ModelKind::Gct,
                    dim: 4,
                    attention_blocks: 2,
                    lambda,
                    first_block_kl,
                    ..ModelSpec::default()
                },
                TaskKind::GraphRecon,
                config.clone(),
                vocabs,
            )
            .unwrap()
        };
        let (train, _, _) = split(&data, 4, &config).unwrap();
        let tables = graph::estimate_cond_probs(&train).unwrap();
        // chain length differs (3 vs 2 KL terms) yet the loss is identical
        // because lambda zero keeps every term out of the objective
        let (e1, e2) = (mk(0.0, true), mk(0.0, false));
        let mut on = TrainState::new(&e1, &train, &tables, 4).unwrap();
        let mut off = TrainState::new(&e2, &train, &tables, 4).unwrap();
        assert_eq!(on.step().unwrap(), off.step().unwrap());
        // with positive lambda the extra first-block term changes the loss
        let (e3, e4) = (mk(0.5, true), mk(0.5, false));
        let mut on_l = TrainState::new(&e3, &train, &tables, 4).unwrap();
        let mut off_l = TrainState::new(&e4, &train, &tables, 4).unwrap();
        assert_ne!(on_l.step().unwrap(), off_l.step().unwrap());
    }

    #[test]
    fn conditional_tables_come_from_train_only() {
        let data = tiny_dataset(12, 9);
        let exp = tiny_exp(ModelKind::GcnP, TaskKind::GraphRecon, 0);
        let (tr, va, mut te) = split(&data, 5, &exp.config).unwrap();
        let a = train_run(&exp, &tr, &va, &te, 5, 0).unwrap();
        for e in te.iter_mut() {
            e.dx = vec![0, 1, 2, 3, 4];
            e.treat = vec![0, 1, 2, 3, 4];
        }
        let b = train_run(&exp, &tr, &va, &te, 5, 0).unwrap();
        assert_eq!(a.tables, b.tables);
        assert_eq!(a.record.valid_metrics, b.record.valid_metrics);
    }

    #[test]
    fn saved_metrics_csv_replays_byte_identically() {
        let data = tiny_dataset(12, 10);
        let exp = tiny_exp(ModelKind::Gcn, TaskKind::GraphRecon, 3);
        let (tr, va, te) = split(&data, 6, &exp.config).unwrap();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_run(dir1.path(), &train_run(&exp, &tr, &va, &te, 6, 0).unwrap()).unwrap();
        save_run(dir2.path(), &train_run(&exp, &tr, &va, &te, 6, 0).unwrap()).unwrap();
        for file in [RUN_RECORD_FILE, METRICS_FILE, CHECKPOINT_FILE] {
            let a = std::fs::read(dir1.path().join(file)).unwrap();
            let b = std::fs::read(dir2.path().join(file)).unwrap();
            assert_eq!(a, b, "{} differs between replays", file);
        }
    }

    #[test]
    fn run_directory_round_trips() {
        let data = tiny_dataset(12, 11);
        let exp = tiny_exp(ModelKind::Gct, TaskKind::MaskedDx, 2);
        let (tr, va, te) = split(&data, 8, &exp.config).unwrap();
        let run = train_run(&exp, &tr, &va, &te, 8, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_run(dir.path(), &run).unwrap();
        let loaded = load_run(dir.path()).unwrap();
        assert_eq!(loaded.record, run.record);
        assert_eq!(loaded.meta.task, "masked-dx");
        assert_eq!(loaded.meta.best_iteration, run.record.best_iteration);
        for (name, t) in run.model.params.map() {
            assert_eq!(t.data(), loaded.model.params.get(name).unwrap().data());
        }
        // the rebuilt experiment evaluates to the recorded test metrics
        let expr = loaded.experiment().unwrap();
        let tables = graph::estimate_cond_probs(&tr).unwrap();
        let metrics = expr.evaluate(&loaded.model, &tables, &te, 8).unwrap();
        assert_eq!(metrics, run.record.test_metrics);
    }

    #[test]
    fn metrics_csv_format_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricRow {
            model: "GCT".into(),
            task: "graph-recon".into(),
            split: "test".into(),
            seed: 2,
            metric: "aucpr".into(),
            value: 0.95,
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "model,task,split,seed,metric,value\nGCT,graph-recon,test,2,aucpr,9.50000e-1\n"
        );
    }

    #[test]
    fn gcn_structure_metrics_are_exactly_on_truth() {
        let data = tiny_dataset(12, 12);
        let exp = tiny_exp(ModelKind::Gcn, TaskKind::GraphRecon, 0);
        let (tr, va, te) = split(&data, 10, &exp.config).unwrap();
        let run = train_run(&exp, &tr, &va, &te, 10, 0).unwrap();
        let (kl, ent) = structure_metrics(&exp, &run.model, &run.tables, &te, 10).unwrap();
        assert!(kl.abs() < 1e-12, "kl {}", kl);
        assert!(ent >= 0.0);
        // feed-forward stacks expose no attention to evaluate
        let deep = tiny_exp(ModelKind::Deep, TaskKind::MaskedDx, 0);
        let drun = train_run(&deep, &tr, &va, &te, 10, 0).unwrap();
        assert!(structure_metrics(&deep, &drun.model, &drun.tables, &te, 10).is_err());
    }

    #[test]
    fn repeat_experiment_aggregates_and_parallelizes() {
        let data = tiny_dataset(12, 13);
        let mut exp = tiny_exp(ModelKind::Shallow, TaskKind::MaskedDx, 2);
        exp.config.repeats = 2;
        let serial = repeat_experiment(&exp, &data, 1).unwrap();
        assert_eq!(serial.runs.len(), 2);
        let parallel = repeat_experiment(&exp, &data, 2).unwrap();
        assert_eq!(
            serde_json::to_string(&serial).unwrap(),
            serde_json::to_string(&parallel).unwrap()
        );
        let acc = &serial.test["accuracy"];
        let vals: Vec<f64> = serial
            .runs
            .iter()
            .map(|r| r.test_metrics["accuracy"])
            .collect();
        let mean = (vals[0] + vals[1]) / 2.0;
        assert!((acc.mean - mean).abs() < 1e-15);

        exp.config.repeats = 1;
        let single = repeat_experiment(&exp, &data, 1).unwrap();
        assert_eq!(single.test["accuracy"].std, 0.0);
    }

    #[test]
    fn binary_outcome_task_trains_on_attached_labels() {
        let mut data = tiny_dataset(30, 14);
        for e in data.iter_mut() {
            e.labels.readmission = Some(e.id % 3 == 0);
        }
        let mut exp = tiny_exp(ModelKind::Shallow, TaskKind::Readmission, 2);
        exp.config.train_ratio = 0.6;
        exp.config.valid_ratio = 0.2;
        let (tr, va, te) = split(&data, 11, &exp.config).unwrap();
        let run = train_run(&exp, &tr, &va, &te, 11, 0).unwrap();
        assert!(run.record.test_metrics.contains_key("auroc"));
        assert_eq!(run.record.eval_points.len(), 1);
    }

    #[test]
    fn dx_treatment_task_reports_macro_metrics() {
        let data = tiny_dataset(60, 15);
        let mut exp = tiny_exp(ModelKind::Shallow, TaskKind::DxTreatment, 2);
        exp.config.train_ratio = 0.6;
        exp.config.valid_ratio = 0.2;
        let (tr, va, te) = split(&data, 12, &exp.config).unwrap();
        let run = train_run(&exp, &tr, &va, &te, 12, 0).unwrap();
        assert!(run.record.test_metrics.contains_key("aucpr"));
        assert!(run.record.test_metrics.contains_key("auroc"));
    }

    #[test]
    fn sig6_renders_six_significant_digits() {
        assert_eq!(sig6(0.95), "9.50000e-1");
        assert_eq!(sig6(0.0), "0.00000e0");
        assert_eq!(sig6(123456.789), "1.23457e5");
    }
}
