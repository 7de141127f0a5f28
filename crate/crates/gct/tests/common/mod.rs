//! Shared fixtures and the finite-difference gradient oracle used by the
//! integration suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use gct::encounter::{Encounter, Labels, NodeKind, NodeRef};
use gct::harness::{Experiment, TrainConfig};
use gct::models::{Model, ModelKind, ModelSpec, VocabSizes};
use gct::numerics::{Tape, Tensor};
use gct::tasks::{apply_task, TaskKind};
use gct::Result;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gct")
}

pub fn gradcheck_vocabs() -> VocabSizes {
    VocabSizes {
        dx: 10,
        treat: 10,
        lab: 10,
    }
}

fn node(kind: NodeKind, position: u32) -> NodeRef {
    NodeRef::new(kind, position)
}

/// Hand-built encounter shaped like generator output: a visit connected to
/// every diagnosis, each treatment hanging off a diagnosis, each lab off a
/// treatment. All label kinds attached so any task can train on it.
pub fn fixture_encounter(id: u64, dx: Vec<u32>, treat: Vec<u32>, lab: Vec<u32>) -> Encounter {
    let mut edges = Vec::new();
    for i in 0..dx.len() {
        edges.push((NodeRef::visit(), node(NodeKind::Diagnosis, i as u32)));
    }
    for i in 0..treat.len() {
        let parent = (i % dx.len()) as u32;
        edges.push((node(NodeKind::Diagnosis, parent), node(NodeKind::Treatment, i as u32)));
    }
    for i in 0..lab.len() {
        let parent = (i % treat.len()) as u32;
        edges.push((node(NodeKind::Treatment, parent), node(NodeKind::Lab, i as u32)));
    }
    Encounter {
        id,
        dx,
        treat,
        lab,
        edges: Some(edges),
        labels: Labels {
            dx_treatment: Some(if id % 2 == 0 { vec![1] } else { vec![2] }),
            readmission: Some(id % 2 == 0),
            mortality: Some(id % 3 == 0),
        },
    }
}

/// Five tiny instances, six nodes or fewer each, with every code kind present.
pub fn gradcheck_encounters() -> Vec<Encounter> {
    vec![
        fixture_encounter(0, vec![1, 2], vec![3], vec![4]),
        fixture_encounter(1, vec![5], vec![6], vec![7, 8]),
        fixture_encounter(2, vec![0, 9], vec![1, 2], vec![3]),
        fixture_encounter(3, vec![4], vec![5, 6], vec![7]),
        fixture_encounter(4, vec![8, 2, 6], vec![0], vec![9]),
    ]
}

pub fn gradcheck_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        kind,
        dim: 8,
        attention_blocks: 2,
        conv_steps: 2,
        shallow_layers: 3,
        deep_pre_layers: 2,
        deep_post_layers: 2,
        mlp_dropout: 0.0,
        post_dropout: 0.0,
        lambda: 0.7,
        first_block_kl: true,
    }
}

/// Training-shaped scalar loss and dense named gradients for one instance:
/// task loss plus the weighted regularizer for GCT, dropout off so the
/// function is smooth in the parameters. Parameters absent from the graph
/// (unused embedding rows, unpropagated projections under lambda 0) come back
/// as zero tensors of the right shape.
pub fn loss_and_grads(
    exp: &Experiment,
    model: &Model,
    enc: &Encounter,
    masked: Option<usize>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let tables = gct::graph::estimate_cond_probs(std::slice::from_ref(enc))?;
    let inputs = exp.ctx_inputs(&tables, enc, masked, 0)?;
    let mut tape = Tape::new();
    let ctx = inputs.ctx(enc, masked, exp.overrides.propagate_first_attention, false);
    let mut rng = gct::harness::eval_rng(0);
    let out = model.forward(&mut tape, &ctx, &mut rng)?;
    let tl = apply_task(
        &mut tape,
        &model.params,
        &out,
        enc,
        exp.task,
        model.spec.kind,
        masked,
    )?;
    let mut root = tl.loss;
    if model.spec.kind == ModelKind::Gct && model.spec.lambda != 0.0 {
        let reg = out.reg_loss.expect("GCT emits a regularization node");
        let weighted = tape.scale(reg, model.spec.lambda);
        root = tape.add(root, weighted)?;
    }
    let loss = tape.value(root).get(0, 0);
    let grads = tape.backward(root)?;
    let mut named = BTreeMap::new();
    for (name, id) in out.params.into_iter().chain(tl.head_params) {
        let g = match grads.get(id) {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(id);
                Tensor::zeros(v.rows(), v.cols())
            }
        };
        named.insert(name, g);
    }
    Ok((loss, named))
}

/// Loss value only, for finite-difference probes.
pub fn loss_value(
    exp: &Experiment,
    model: &Model,
    enc: &Encounter,
    masked: Option<usize>,
) -> Result<f64> {
    loss_and_grads(exp, model, enc, masked).map(|(l, _)| l)
}

/// Deterministic spread of up to `want` entry indices over a tensor.
pub fn probe_entries(len: usize, want: usize) -> Vec<usize> {
    if len <= want {
        return (0..len).collect();
    }
    let mut picked: Vec<usize> = (0..want).map(|i| (i * 37 + 3) % len).collect();
    picked.sort_unstable();
    picked.dedup();
    picked
}

pub struct GradReport {
    pub worst: f64,
    pub probes: usize,
}

/// Central finite differences against the analytic gradient on sampled
/// entries of every parameter. Relu kinks within one step of a probe make the
/// difference quotient lie, so a failing entry retries at smaller steps; a
/// real gradient bug stays wrong at every step.
pub fn gradcheck(
    exp: &Experiment,
    model: &mut Model,
    enc: &Encounter,
    masked: Option<usize>,
    per_tensor: usize,
) -> Result<GradReport> {
    let (_, grads) = loss_and_grads(exp, model, enc, masked)?;
    let names: Vec<String> = grads.keys().cloned().collect();
    let mut worst = 0.0f64;
    let mut probes = 0;
    for name in names {
        let len = grads[&name].data().len();
        for entry in probe_entries(len, per_tensor) {
            let g = grads[&name].data()[entry];
            let mut best = f64::INFINITY;
            for h in [1e-5, 1e-6, 3e-7] {
                let base = model.params.map()[&name].data()[entry];
                model.params.map_mut().get_mut(&name).unwrap().data_mut()[entry] = base + h;
                let up = loss_value(exp, model, enc, masked)?;
                model.params.map_mut().get_mut(&name).unwrap().data_mut()[entry] = base - h;
                let down = loss_value(exp, model, enc, masked)?;
                model.params.map_mut().get_mut(&name).unwrap().data_mut()[entry] = base;
                let fd = (up - down) / (2.0 * h);
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                best = best.min(rel);
                if best < 1e-4 {
                    break;
                }
            }
            if !best.is_finite() {
                return Err(gct::Error::Domain(format!(
                    "non-finite finite-difference at {}[{}]",
                    name, entry
                )));
            }
            worst = worst.max(best);
            probes += 1;
        }
    }
    Ok(GradReport { worst, probes })
}

/// Every trainable combination: all seven models on all five tasks, minus the
/// stack model that has no per-node outputs to reconstruct a graph from.
pub fn model_task_grid() -> Vec<(ModelKind, TaskKind)> {
    let models = [
        ModelKind::Gcn,
        ModelKind::GcnP,
        ModelKind::GcnRandom,
        ModelKind::Shallow,
        ModelKind::Deep,
        ModelKind::Transformer,
        ModelKind::Gct,
    ];
    let mut grid = Vec::new();
    for &m in &models {
        for &t in &TaskKind::ALL {
            if t.check_model(m).is_ok() {
                grid.push((m, t));
            }
        }
    }
    grid
}

pub fn gradcheck_experiment(kind: ModelKind, task: TaskKind) -> Experiment {
    let config = TrainConfig {
        batch_size: 1,
        iterations: 1,
        eval_interval: 1,
        repeats: 1,
        ..TrainConfig::default()
    };
    Experiment::new(gradcheck_spec(kind), task, config, gradcheck_vocabs()).unwrap()
}
