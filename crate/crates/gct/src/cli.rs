//! Command-line surface: dataset generation, prior inspection, training,
//! evaluation, and attention dumps. Every command is deterministic for
//! identical inputs, and all printed numbers use six significant digits
//! while JSON artifacts keep full precision.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::encounter::{compute_stats, read_jsonl, write_jsonl, Encounter};
use crate::error::{Error, Result};
use crate::graph::{build_mask, build_prior, estimate_cond_probs, NodeIndexing};
use crate::harness::{
    build_report, eval_rng, load_run, lookup_preset, metrics_csv, repeat_runs, report_rows,
    save_run, split, structure_metrics, write_metrics_csv, Experiment, ExperimentConfig,
    MetricRow, TrainedRun, METRICS_FILE,
};
use crate::models::{ModelKind, ModelSpec, VocabSizes};
use crate::numerics::Tape;
use crate::synthgen::{generate_dataset, DxTreatmentLabelSpec, SyntheticConfig};
use crate::tasks::TaskKind;

pub const DUMP_FORMAT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(name = "gct", version, about = "Graph-convolutional-transformer experiments on encounter records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic encounter dataset plus a stats sidecar
    Gen(GenArgs),
    /// Print one encounter's conditional prior and attention mask
    Prior(PriorArgs),
    /// Train a model and write a run directory
    Train(TrainArgs),
    /// Re-evaluate a saved run on a chosen split
    Eval(EvalArgs),
    /// Dump one node's per-block attention rows from a saved run
    AttnDump(AttnArgs),
    /// Print dataset statistics as JSON
    Stats(StatsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LabelChoice {
    /// Attach the planted diagnosis-treatment class labels
    DxTreatment,
    /// Strip labels entirely
    None,
}

#[derive(Args)]
struct GenArgs {
    /// Generator config JSON; unspecified fields keep their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the small-vocabulary desk config instead of the full one
    #[arg(long)]
    desk: bool,
    /// Override the number of encounters to keep
    #[arg(long)]
    encounters: Option<usize>,
    /// Override the generator seed
    #[arg(long)]
    seed: Option<u64>,
    /// Label handling; defaults to the config file's choice
    #[arg(long, value_enum)]
    labels: Option<LabelChoice>,
    /// Output dataset path (JSONL); stats go to the .stats.json sidecar
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PriorArgs {
    /// Dataset the conditional tables are estimated from
    #[arg(long)]
    data: PathBuf,
    /// Encounter id to build the prior for
    #[arg(long)]
    encounter: u64,
    /// Mass on the prior's fixed diagonal and visit cells
    #[arg(long, default_value_t = 1.0)]
    green: f64,
    /// Write JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSONL)
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    /// Model kind: gct, gcn, gcn-p, gcn-random, shallow, deep, transformer
    #[arg(long)]
    model: Option<String>,
    /// Task: graph-recon, dx-treatment, masked-dx, readmission, mortality
    #[arg(long)]
    task: Option<String>,
    /// Named preset dataset/task/model, e.g. synthetic/graph-recon/gct
    #[arg(long)]
    preset: Option<String>,
    /// Experiment config JSON with optional "model" and "train" sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate override
    #[arg(long)]
    lr: Option<f64>,
    /// Dropout inside each feed-forward expansion
    #[arg(long)]
    mlp_dropout: Option<f64>,
    /// Dropout after each feed-forward projection
    #[arg(long)]
    post_dropout: Option<f64>,
    /// Attention-regularization weight
    #[arg(long)]
    lambda: Option<f64>,
    /// Embedding width override
    #[arg(long)]
    dim: Option<usize>,
    /// Optimization steps per repeat
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Validation cadence in iterations
    #[arg(long)]
    eval_interval: Option<usize>,
    /// Master seed; per-repeat seeds derive from it
    #[arg(long)]
    seed: Option<u64>,
    /// Independent split-and-train repetitions
    #[arg(long)]
    repeats: Option<usize>,
    /// Prior mass on known-to-exist cells
    #[arg(long)]
    green: Option<f64>,
    /// Repeats trained concurrently
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    Valid,
    Test,
}

impl SplitChoice {
    fn as_str(self) -> &'static str {
        match self {
            SplitChoice::Valid => "valid",
            SplitChoice::Test => "test",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by train (a seed directory for multi-repeat runs)
    #[arg(long)]
    run: PathBuf,
    /// Dataset override; defaults to the path recorded in the run
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    split: SplitChoice,
    /// Also report closeness of attention to the true graphs (needs edges)
    #[arg(long)]
    structure: bool,
}

#[derive(Args)]
struct AttnArgs {
    /// Run directory written by train
    #[arg(long)]
    run: PathBuf,
    /// Dataset override; defaults to the path recorded in the run
    #[arg(long)]
    data: Option<PathBuf>,
    /// Encounter id to dump
    #[arg(long)]
    encounter: u64,
    /// Node index within the encounter's visit/dx/treatment/lab ordering
    #[arg(long)]
    node: usize,
    /// Output JSON path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Dataset (JSONL)
    #[arg(long)]
    data: PathBuf,
}

/// Parse arguments and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Prior(args) => cmd_prior(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AttnDump(args) => cmd_attn_dump(args),
        Command::Stats(args) => cmd_stats(args),
    }
}

fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

/// Print to stdout, exiting quietly when the reader hung up mid-pipe.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        Err(e) => Err(e.into()),
    }
}

fn emitln(text: &str) -> Result<()> {
    emit(&format!("{}\n", text))
}

/// Sidecar path for a dataset's statistics: data.jsonl -> data.stats.json.
fn stats_path(data: &Path) -> PathBuf {
    data.with_extension("stats.json")
}

fn find_encounter(data: &[Encounter], id: u64) -> Result<&Encounter> {
    data.iter()
        .find(|e| e.id == id)
        .ok_or_else(|| Error::Domain(format!("encounter {} not in dataset", id)))
}

/// Smallest per-kind sizes covering every code in the dataset. Kinds that
/// never occur get size 1 so embedding tables stay constructible.
fn infer_vocabs(data: &[Encounter]) -> VocabSizes {
    let mut v = VocabSizes {
        dx: 1,
        treat: 1,
        lab: 1,
    };
    for e in data {
        for &c in &e.dx {
            v.dx = v.dx.max(c as usize + 1);
        }
        for &c in &e.treat {
            v.treat = v.treat.max(c as usize + 1);
        }
        for &c in &e.lab {
            v.lab = v.lab.max(c as usize + 1);
        }
    }
    v
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    if args.desk && args.config.is_some() {
        return Err(Error::Config(
            "--desk and --config are mutually exclusive".into(),
        ));
    }
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None if args.desk => SyntheticConfig::desk(5000, 0),
        None => SyntheticConfig::default(),
    };
    if let Some(n) = args.encounters {
        cfg.encounters = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    match args.labels {
        Some(LabelChoice::DxTreatment) if cfg.labels.is_none() => {
            cfg.labels = Some(DxTreatmentLabelSpec::default());
        }
        Some(LabelChoice::None) => cfg.labels = None,
        _ => {}
    }
    let data = generate_dataset(&cfg)?;
    write_jsonl(&args.out, &data)?;
    write_pretty_json(&stats_path(&args.out), &compute_stats(&data))?;
    emitln(&format!("wrote {} encounters to {}", data.len(), args.out.display()))?;
    Ok(())
}

/// One encounter's graph inputs, serialized for inspection.
#[derive(Serialize)]
struct PriorDump {
    format_version: u32,
    encounter: u64,
    green: f64,
    /// Node names in visit/dx/treatment/lab order.
    labels: Vec<String>,
    /// Row-stochastic conditional prior, one row per node.
    prior: Vec<Vec<f64>>,
    /// True where attention between the node pair is allowed.
    mask: Vec<Vec<bool>>,
}

fn cmd_prior(args: PriorArgs) -> Result<()> {
    let data = read_jsonl(&args.data)?;
    let tables = estimate_cond_probs(&data)?;
    let enc = find_encounter(&data, args.encounter)?;
    let prior = build_prior(enc, &tables, args.green)?;
    let mask = build_mask(enc);
    let idx = NodeIndexing::of(enc);
    let n = idx.n();
    let dump = PriorDump {
        format_version: DUMP_FORMAT_VERSION,
        encounter: enc.id,
        green: args.green,
        labels: (0..n).map(|i| idx.label(i)).collect(),
        prior: (0..n).map(|i| prior.row(i).to_vec()).collect(),
        mask: (0..n)
            .map(|i| mask.row(i).iter().map(|&v| v == 0.0).collect())
            .collect(),
    };
    match &args.out {
        Some(path) => write_pretty_json(path, &dump)?,
        None => emitln(&serde_json::to_string_pretty(&dump)?)?,
    }
    Ok(())
}

/// Fold config file, preset, and explicit flags into one experiment, in that
/// priority order.
fn resolve_train(args: &TrainArgs) -> Result<(ModelSpec, TaskKind, crate::harness::TrainConfig)> {
    let (mut spec, mut tc) = match &args.config {
        Some(path) => {
            let ec: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            (ec.model, ec.train)
        }
        None => (ModelSpec::default(), crate::harness::TrainConfig::default()),
    };
    let flag_model: Option<ModelKind> = args.model.as_deref().map(str::parse).transpose()?;
    let flag_task: Option<TaskKind> = args.task.as_deref().map(str::parse).transpose()?;
    let mut task = flag_task;
    if let Some(name) = &args.preset {
        let (_, preset_task, preset_model, preset) = lookup_preset(name)?;
        if flag_model.is_some_and(|m| m != preset_model) {
            return Err(Error::Config(format!(
                "--model {} conflicts with preset {}",
                flag_model.unwrap().as_str(),
                name
            )));
        }
        if flag_task.is_some_and(|t| t != preset_task) {
            return Err(Error::Config(format!(
                "--task {} conflicts with preset {}",
                flag_task.unwrap().as_str(),
                name
            )));
        }
        spec.kind = preset_model;
        task = Some(preset_task);
        preset.apply(&mut spec, &mut tc);
    } else if let Some(kind) = flag_model {
        spec.kind = kind;
    } else if args.config.is_none() {
        return Err(Error::Config(
            "specify a model via --model, --preset, or --config".into(),
        ));
    }
    let task = task.ok_or_else(|| Error::Config("specify a task via --task or --preset".into()))?;
    if let Some(v) = args.lr {
        tc.lr = v;
    }
    if let Some(v) = args.mlp_dropout {
        spec.mlp_dropout = v;
    }
    if let Some(v) = args.post_dropout {
        spec.post_dropout = v;
    }
    if let Some(v) = args.lambda {
        spec.lambda = v;
    }
    if let Some(v) = args.dim {
        spec.dim = v;
    }
    if let Some(v) = args.iterations {
        tc.iterations = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.eval_interval {
        tc.eval_interval = v;
    }
    if let Some(v) = args.seed {
        tc.seed = v;
    }
    if let Some(v) = args.repeats {
        tc.repeats = v;
    }
    if let Some(v) = args.green {
        tc.green_value = v;
    }
    Ok((spec, task, tc))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (spec, task, tc) = resolve_train(&args)?;
    let data = read_jsonl(&args.data)?;
    let exp = Experiment::new(spec, task, tc, infer_vocabs(&data))?;
    let mut runs: Vec<TrainedRun> = repeat_runs(&exp, &data, args.jobs)?;
    let data_path = args.data.to_string_lossy().into_owned();
    for run in &mut runs {
        run.record.data = Some(data_path.clone());
    }
    if runs.len() == 1 {
        save_run(&args.out, &runs[0])?;
    } else {
        for run in &runs {
            save_run(&args.out.join(format!("seed{}", run.record.seed_label)), run)?;
        }
        let records: Vec<_> = runs.iter().map(|r| r.record.clone()).collect();
        write_metrics_csv(&args.out.join(METRICS_FILE), &report_rows(&records))?;
        write_pretty_json(&args.out.join(REPORT_FILE), &build_report(records))?;
    }
    let records: Vec<_> = runs.into_iter().map(|r| r.record).collect();
    let report = build_report(records);
    emitln(&format!(
        "model={} task={} repeats={}",
        exp.model_spec.kind.as_str(),
        exp.task.as_str(),
        report.runs.len()
    ))?;
    for (metric, s) in &report.test {
        emitln(&format!(
            "test {} mean={} std={}",
            metric,
            crate::harness::sig6(s.mean),
            crate::harness::sig6(s.std)
        ))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let run = load_run(&args.run)?;
    let data_path = match (&args.data, &run.record.data) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(Error::Config(
                "run record carries no dataset path; pass --data".into(),
            ))
        }
    };
    let data = read_jsonl(&data_path)?;
    let exp = run.experiment()?;
    let (train, valid, test) = split(&data, run.record.run_seed, &exp.config)?;
    let tables = estimate_cond_probs(&train)?;
    let part = match args.split {
        SplitChoice::Valid => &valid,
        SplitChoice::Test => &test,
    };
    let metrics = exp.evaluate(&run.model, &tables, part, run.record.run_seed)?;
    let mut rows: Vec<MetricRow> = metrics
        .into_iter()
        .map(|(metric, value)| MetricRow {
            model: exp.model_spec.kind.as_str().into(),
            task: exp.task.as_str().into(),
            split: args.split.as_str().into(),
            seed: run.record.seed_label,
            metric,
            value,
        })
        .collect();
    if args.structure {
        let (kl, entropy) =
            structure_metrics(&exp, &run.model, &tables, part, run.record.run_seed)?;
        for (metric, value) in [("structure_kl", kl), ("structure_entropy", entropy)] {
            rows.push(MetricRow {
                model: exp.model_spec.kind.as_str().into(),
                task: exp.task.as_str().into(),
                split: args.split.as_str().into(),
                seed: run.record.seed_label,
                metric: metric.into(),
                value,
            });
        }
    }
    emit(&metrics_csv(&rows))?;
    Ok(())
}

/// One node's attention row in one block.
#[derive(Serialize)]
struct BlockAttention {
    /// 1-based block (or convolution step) index.
    block: usize,
    /// Attention over all nodes, in node order; sums to 1.
    attention: Vec<f64>,
}

/// The data behind a per-node attention bar chart.
#[derive(Serialize)]
struct AttentionDump {
    format_version: u32,
    encounter: u64,
    node: usize,
    node_label: String,
    /// Node names in visit/dx/treatment/lab order.
    labels: Vec<String>,
    /// True where the dataset's graph connects the node to each other node;
    /// absent when the dataset carries no edges.
    #[serde(skip_serializing_if = "Option::is_none")]
    true_connection: Option<Vec<bool>>,
    blocks: Vec<BlockAttention>,
}

fn cmd_attn_dump(args: AttnArgs) -> Result<()> {
    let run = load_run(&args.run)?;
    let data_path = match (&args.data, &run.record.data) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(Error::Config(
                "run record carries no dataset path; pass --data".into(),
            ))
        }
    };
    let data = read_jsonl(&data_path)?;
    let exp = run.experiment()?;
    let enc = find_encounter(&data, args.encounter)?;
    let idx = NodeIndexing::of(enc);
    let n = idx.n();
    if args.node >= n {
        return Err(Error::Domain(format!(
            "node {} out of range; encounter {} has {} nodes",
            args.node, enc.id, n
        )));
    }
    let (train, _, _) = split(&data, run.record.run_seed, &exp.config)?;
    let tables = estimate_cond_probs(&train)?;
    let inputs = exp.ctx_inputs(&tables, enc, None, run.record.run_seed)?;
    let mut tape = Tape::new();
    let ctx = inputs.ctx(enc, None, exp.overrides.propagate_first_attention, false);
    let mut rng = eval_rng(run.record.run_seed);
    let out = run.model.forward(&mut tape, &ctx, &mut rng)?;
    if out.attentions.is_empty() {
        return Err(Error::Domain(format!(
            "model {} propagates no attention to dump",
            exp.model_spec.kind.as_str()
        )));
    }
    let blocks = out
        .attentions
        .iter()
        .enumerate()
        .map(|(i, &id)| BlockAttention {
            block: i + 1,
            attention: tape.value(id).row(args.node).to_vec(),
        })
        .collect();
    let true_connection = enc.edges.as_ref().map(|edges| {
        (0..n)
            .map(|j| {
                j != args.node
                    && edges.iter().any(|&(a, b)| {
                        let (ai, bi) = (idx.index(a), idx.index(b));
                        (ai == args.node && bi == j) || (bi == args.node && ai == j)
                    })
            })
            .collect()
    });
    let dump = AttentionDump {
        format_version: DUMP_FORMAT_VERSION,
        encounter: enc.id,
        node: args.node,
        node_label: idx.label(args.node),
        labels: (0..n).map(|i| idx.label(i)).collect(),
        true_connection,
        blocks,
    };
    write_pretty_json(&args.out, &dump)?;
    emitln(&format!("wrote attention dump to {}", args.out.display()))?;
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let data = read_jsonl(&args.data)?;
    emitln(&serde_json::to_string_pretty(&compute_stats(&data))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_declaration_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn stats_sidecar_sits_next_to_dataset() {
        assert_eq!(
            stats_path(Path::new("/tmp/x/data.jsonl")),
            Path::new("/tmp/x/data.stats.json")
        );
    }

    fn train_args(extra: &[&str]) -> TrainArgs {
        let mut argv = vec!["gct", "train", "--data", "d.jsonl", "--out", "r"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Train(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn preset_supplies_model_task_and_tuning() {
        let args = train_args(&["--preset", "synthetic/graph-recon/gct"]);
        let (spec, task, tc) = resolve_train(&args).unwrap();
        assert_eq!(spec.kind, ModelKind::Gct);
        assert_eq!(task, TaskKind::GraphRecon);
        assert_eq!(tc.lr, 5e-4);
        assert_eq!(spec.mlp_dropout, 0.3);
        assert_eq!(spec.post_dropout, 0.1);
        assert_eq!(spec.lambda, 0.02);
    }

    #[test]
    fn explicit_flags_override_preset_values() {
        let args = train_args(&[
            "--preset",
            "synthetic/graph-recon/gct",
            "--lambda",
            "0",
            "--lr",
            "0.01",
        ]);
        let (spec, _, tc) = resolve_train(&args).unwrap();
        assert_eq!(spec.lambda, 0.0);
        assert_eq!(tc.lr, 0.01);
    }

    #[test]
    fn conflicting_model_and_preset_is_rejected() {
        let args = train_args(&["--preset", "synthetic/graph-recon/gct", "--model", "gcn"]);
        assert!(matches!(resolve_train(&args), Err(Error::Config(_))));
        let args = train_args(&[
            "--preset",
            "synthetic/graph-recon/gct",
            "--task",
            "masked-dx",
        ]);
        assert!(matches!(resolve_train(&args), Err(Error::Config(_))));
    }

    #[test]
    fn model_without_task_is_rejected() {
        let args = train_args(&["--model", "gct"]);
        assert!(matches!(resolve_train(&args), Err(Error::Config(_))));
        let args = train_args(&[]);
        assert!(matches!(resolve_train(&args), Err(Error::Config(_))));
    }

    #[test]
    fn hyphenated_model_names_parse() {
        let args = train_args(&["--model", "gcn-random", "--task", "graph-recon"]);
        let (spec, task, _) = resolve_train(&args).unwrap();
        assert_eq!(spec.kind, ModelKind::GcnRandom);
        assert_eq!(task, TaskKind::GraphRecon);
    }

    #[test]
    fn vocab_inference_covers_max_codes_and_floors_at_one() {
        let enc = Encounter {
            id: 0,
            dx: vec![3, 7],
            treat: vec![9],
            lab: vec![],
            edges: None,
            labels: Default::default(),
        };
        let v = infer_vocabs(&[enc]);
        assert_eq!((v.dx, v.treat, v.lab), (8, 10, 1));
    }
}
