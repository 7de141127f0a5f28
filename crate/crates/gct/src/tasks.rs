//! Task heads, losses, and metrics: structure reconstruction, the two
//! planted-relation labels, masked diagnosis recovery, and the binary
//! outcome heads, plus ranking metrics and attention-structure evaluation.

use std::collections::BTreeMap;

use crate::encounter::Encounter;
use crate::error::{Error, Result};
use crate::graph::{self, NodeIndexing};
use crate::models::{Init, ModelKind, ModelOutput, ParamSpec, ParamStore};
use crate::numerics::tape::TensorId;
use crate::numerics::{kl_divergence_rows, row_entropy};
use crate::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskKind {
    GraphRecon,
    DxTreatment,
    MaskedDx,
    Readmission,
    Mortality,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::GraphRecon,
        TaskKind::DxTreatment,
        TaskKind::MaskedDx,
        TaskKind::Readmission,
        TaskKind::Mortality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::GraphRecon => "graph-recon",
            TaskKind::DxTreatment => "dx-treatment",
            TaskKind::MaskedDx => "masked-dx",
            TaskKind::Readmission => "readmission",
            TaskKind::Mortality => "mortality",
        }
    }

    /// Ground-truth edges are consumed by the reconstruction target.
    pub fn needs_edges(self) -> bool {
        self == TaskKind::GraphRecon
    }

    pub fn check_model(self, model: ModelKind) -> Result<()> {
        if self == TaskKind::GraphRecon && model == ModelKind::Deep {
            return Err(Error::Config(
                "the Deep baseline has no per-node outputs to reconstruct the graph from".into(),
            ));
        }
        Ok(())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {:?}", s)))
    }
}

/// Trainable parameters the task adds on top of the encoder.
pub fn head_param_specs(task: TaskKind, dim: usize, vocab_dx: usize) -> Vec<ParamSpec> {
    let linear = |name: &str, out: usize| {
        vec![
            ParamSpec::new(format!("head/{}/w", name), dim, out, Init::Glorot),
            ParamSpec::new(format!("head/{}/b", name), 1, out, Init::Zeros),
        ]
    };
    match task {
        TaskKind::GraphRecon => Vec::new(),
        TaskKind::DxTreatment => linear("dx_treatment", 2),
        TaskKind::MaskedDx => linear("masked_dx", vocab_dx),
        TaskKind::Readmission => linear("readmission", 1),
        TaskKind::Mortality => linear("mortality", 1),
    }
}

/// Per-encounter predictions recorded for metric computation.
#[derive(Clone, Debug)]
pub enum TaskScores {
    Recon {
        labels: Vec<bool>,
        scores: Vec<f64>,
    },
    Multilabel {
        labels: [bool; 2],
        scores: [f64; 2],
    },
    MaskedDx {
        correct: bool,
    },
    Binary {
        label: bool,
        score: f64,
    },
}

pub struct TaskLoss {
    pub loss: TensorId,
    pub head_params: Vec<(String, TensorId)>,
    pub scores: TaskScores,
}

/// A task head's weight and bias on the tape, plus their name bindings.
struct BoundHead {
    w: TensorId,
    b: TensorId,
    params: Vec<(String, TensorId)>,
}

fn bind_head(tape: &mut Tape, params: &ParamStore, name: &str) -> Result<BoundHead> {
    let wn = format!("head/{}/w", name);
    let bn = format!("head/{}/b", name);
    let w = tape.param(params.get(&wn)?.clone());
    let b = tape.param(params.get(&bn)?.clone());
    Ok(BoundHead {
        w,
        b,
        params: vec![(wn, w), (bn, b)],
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn recon_loss(
    tape: &mut Tape,
    c: TensorId,
    pattern: &Tensor,
) -> Result<(TensorId, TaskScores)> {
    let logits = tape.matmul_nt(c, c)?;
    let values = tape.value(logits).clone();
    if values.shape() != pattern.shape() {
        return Err(Error::Shape {
            op: "graph_reconstruction",
            detail: format!("{:?} vs {:?}", values.shape(), pattern.shape()),
        });
    }
    let loss = tape.bce_with_logits_mean(logits, pattern.clone())?;
    let labels = pattern.data().iter().map(|&x| x == 1.0).collect();
    let scores = values.data().iter().map(|&x| sigmoid(x)).collect();
    Ok((loss, TaskScores::Recon { labels, scores }))
}

/// Attach the task head and loss to a finished forward pass.
pub fn apply_task(
    tape: &mut Tape,
    params: &ParamStore,
    out: &ModelOutput,
    enc: &Encounter,
    task: TaskKind,
    model_kind: ModelKind,
    masked_dx: Option<usize>,
) -> Result<TaskLoss> {
    task.check_model(model_kind)?;
    match task {
        TaskKind::GraphRecon => {
            let pattern = graph::build_adjacency_pattern(enc)?;
            let (loss, scores) = recon_loss(tape, out.c, &pattern)?;
            Ok(TaskLoss {
                loss,
                head_params: Vec::new(),
                scores,
            })
        }
        TaskKind::DxTreatment => {
            let classes = enc.labels.dx_treatment.as_ref().ok_or_else(|| {
                Error::Domain(format!("encounter {} has no relation labels", enc.id))
            })?;
            let labels = [classes.contains(&1), classes.contains(&2)];
            let BoundHead { w, b, params: head_params } = bind_head(tape, params, "dx_treatment")?;
            let logits = tape.matmul(out.v, w)?;
            let logits = tape.add_bias_row(logits, b)?;
            let lv = tape.value(logits).clone();
            let targets =
                Tensor::from_vec(1, 2, labels.iter().map(|&l| f64::from(l)).collect())?;
            let loss = tape.bce_with_logits_mean(logits, targets)?;
            Ok(TaskLoss {
                loss,
                head_params,
                scores: TaskScores::Multilabel {
                    labels,
                    scores: [sigmoid(lv.get(0, 0)), sigmoid(lv.get(0, 1))],
                },
            })
        }
        TaskKind::MaskedDx => {
            let pos = masked_dx.ok_or_else(|| {
                Error::Contract("masked diagnosis task needs a masked position".into())
            })?;
            if pos >= enc.dx.len() {
                return Err(Error::Domain(format!(
                    "masked dx position {} out of {}",
                    pos,
                    enc.dx.len()
                )));
            }
            let target = enc.dx[pos] as usize;
            let feature = if model_kind.is_stack() {
                out.v
            } else {
                let node = NodeIndexing::of(enc)
                    .index(crate::encounter::NodeRef::new(
                        crate::encounter::NodeKind::Diagnosis,
                        pos as u32,
                    ));
                tape.gather_rows(out.c, vec![node])?
            };
            let BoundHead { w, b, params: head_params } = bind_head(tape, params, "masked_dx")?;
            let logits = tape.matmul(feature, w)?;
            let logits = tape.add_bias_row(logits, b)?;
            let lv = tape.value(logits).clone();
            let loss = tape.softmax_cross_entropy(logits, target)?;
            let pred = lv
                .row(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            Ok(TaskLoss {
                loss,
                head_params,
                scores: TaskScores::MaskedDx {
                    correct: pred == target,
                },
            })
        }
        TaskKind::Readmission | TaskKind::Mortality => {
            let (name, label) = match task {
                TaskKind::Readmission => ("readmission", enc.labels.readmission),
                _ => ("mortality", enc.labels.mortality),
            };
            let label = label.ok_or_else(|| {
                Error::Domain(format!("encounter {} has no {} label", enc.id, name))
            })?;
            let BoundHead { w, b, params: head_params } = bind_head(tape, params, name)?;
            let logits = tape.matmul(out.v, w)?;
            let logits = tape.add_bias_row(logits, b)?;
            let score = sigmoid(tape.value(logits).get(0, 0));
            let targets = Tensor::from_vec(1, 1, vec![f64::from(label)])?;
            let loss = tape.bce_with_logits_mean(logits, targets)?;
            Ok(TaskLoss {
                loss,
                head_params,
                scores: TaskScores::Binary { label, score },
            })
        }
    }
}

/// Collects per-encounter predictions for one (task, split) and reduces them
/// to named metrics at the end.
#[derive(Clone, Debug)]
pub enum TaskAccum {
    Pooled {
        labels: Vec<bool>,
        scores: Vec<f64>,
    },
    PerLabel {
        labels: [Vec<bool>; 2],
        scores: [Vec<f64>; 2],
    },
    Accuracy {
        correct: usize,
        total: usize,
    },
}

impl TaskAccum {
    pub fn new(task: TaskKind) -> Self {
        match task {
            TaskKind::GraphRecon | TaskKind::Readmission | TaskKind::Mortality => {
                TaskAccum::Pooled {
                    labels: Vec::new(),
                    scores: Vec::new(),
                }
            }
            TaskKind::DxTreatment => TaskAccum::PerLabel {
                labels: [Vec::new(), Vec::new()],
                scores: [Vec::new(), Vec::new()],
            },
            TaskKind::MaskedDx => TaskAccum::Accuracy {
                correct: 0,
                total: 0,
            },
        }
    }

    pub fn push(&mut self, s: &TaskScores) -> Result<()> {
        match (self, s) {
            (TaskAccum::Pooled { labels, scores }, TaskScores::Recon { labels: l, scores: s }) => {
                labels.extend_from_slice(l);
                scores.extend_from_slice(s);
            }
            (TaskAccum::Pooled { labels, scores }, TaskScores::Binary { label, score }) => {
                labels.push(*label);
                scores.push(*score);
            }
            (
                TaskAccum::PerLabel { labels, scores },
                TaskScores::Multilabel { labels: l, scores: s },
            ) => {
                for k in 0..2 {
                    labels[k].push(l[k]);
                    scores[k].push(s[k]);
                }
            }
            (TaskAccum::Accuracy { correct, total }, TaskScores::MaskedDx { correct: c }) => {
                *correct += usize::from(*c);
                *total += 1;
            }
            _ => return Err(Error::Contract("score kind does not match accumulator".into())),
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        match self {
            TaskAccum::Pooled { labels, scores } => {
                out.insert("aucpr".into(), aucpr(labels, scores)?);
                out.insert("auroc".into(), auroc(labels, scores)?);
            }
            TaskAccum::PerLabel { labels, scores } => {
                let mut pr = 0.0;
                let mut roc = 0.0;
                for k in 0..2 {
                    pr += aucpr(&labels[k], &scores[k])?;
                    roc += auroc(&labels[k], &scores[k])?;
                }
                out.insert("aucpr".into(), pr / 2.0);
                out.insert("auroc".into(), roc / 2.0);
            }
            TaskAccum::Accuracy { correct, total } => {
                if *total == 0 {
                    return Err(Error::Domain("no predictions accumulated".into()));
                }
                out.insert("accuracy".into(), *correct as f64 / *total as f64);
            }
        }
        Ok(out)
    }
}

fn check_two_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain(format!(
            "ranking metric undefined: {} positives, {} negatives",
            pos, neg
        )));
    }
    Ok((pos, neg))
}

fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Average precision: walk distinct score thresholds from high to low and sum
/// precision times the recall gained at each step. Tied scores enter as one
/// group.
pub fn aucpr(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Domain("labels and scores differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let (pos, _) = check_two_classes(labels)?;
    let order = ranked_indices(scores);
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let precision = tp as f64 / seen as f64;
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Normalized Mann-Whitney U statistic with half credit for tied scores.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Domain("labels and scores differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Domain("scores must be finite".into()));
    }
    let (pos, neg) = check_two_classes(labels)?;
    // ascending order; tied scores share their average rank
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; the group spanning i..j shares the mean rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Per-block closeness of the attention maps to the normalized true
/// adjacency: summed row KL to the truth and mean row entropy, averaged over
/// blocks.
pub fn structure_eval(attentions: &[&Tensor], true_adj: &Tensor) -> Result<(f64, f64)> {
    if attentions.is_empty() {
        return Err(Error::Domain("model records no attention maps".into()));
    }
    let mut kl_total = 0.0;
    let mut ent_total = 0.0;
    for att in attentions {
        kl_total += kl_divergence_rows(true_adj, att)?;
        let ents = row_entropy(att)?;
        ent_total += ents.iter().sum::<f64>() / ents.len() as f64;
    }
    let blocks = attentions.len() as f64;
    Ok((kl_total / blocks, ent_total / blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encounter::{Labels, NodeKind, NodeRef};
    use crate::models::{Model, ModelSpec, VocabSizes};
    use crate::rng::{StreamRng, StreamTag};
    use proptest::prelude::*;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::new(seed, StreamTag::Dropout, &[])
    }

    // thresholds swept one by one, precision/recall recomputed from scratch
    fn aucpr_bruteforce(labels: &[bool], scores: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l).count();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let mut tp = 0;
            let mut predicted = 0;
            for (&l, &s) in labels.iter().zip(scores) {
                if s >= t {
                    predicted += 1;
                    tp += usize::from(l);
                }
            }
            let precision = tp as f64 / predicted as f64;
            let recall = tp as f64 / pos as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    fn auroc_bruteforce(labels: &[bool], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn metric_hand_examples() {
        assert_eq!(aucpr(&[true, false], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[true, false], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(aucpr(&[false, true], &[0.9, 0.1]).unwrap(), 0.5);
        assert_eq!(auroc(&[false, true], &[0.9, 0.1]).unwrap(), 0.0);
        assert_eq!(auroc(&[true, false], &[0.1, 0.9]).unwrap(), 0.0);
        // constant scores tie every pair
        assert_eq!(auroc(&[true, false, true], &[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert!(aucpr(&[true, true], &[0.4, 0.2]).is_err());
        assert!(auroc(&[false, false], &[0.4, 0.2]).is_err());
    }

    #[test]
    fn metrics_match_bruteforce_oracles() {
        let mut r = rng(100);
        for case in 0..100 {
            let n = 5 + (r.next_u64() % 60) as usize;
            // draw from a coarse grid so ties are common
            let scores: Vec<f64> =
                (0..n).map(|_| (r.next_u64() % 11) as f64 / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| r.uniform() < 0.3).collect();
            labels[0] = true;
            labels[1] = false;
            let pr = aucpr(&labels, &scores).unwrap();
            let roc = auroc(&labels, &scores).unwrap();
            assert!(
                (pr - aucpr_bruteforce(&labels, &scores)).abs() < 1e-12,
                "case {}",
                case
            );
            assert!(
                (roc - auroc_bruteforce(&labels, &scores)).abs() < 1e-12,
                "case {}",
                case
            );
        }
    }

    #[test]
    fn random_scores_track_prevalence_baseline() {
        let mut r = rng(7);
        let n = 1000;
        let labels: Vec<bool> = (0..n).map(|_| r.uniform() < 0.1).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.uniform()).collect();
        let pr = aucpr(&labels, &scores).unwrap();
        assert!((0.07..0.14).contains(&pr), "aucpr {}", pr);
        let roc = auroc(&labels, &scores).unwrap();
        assert!((0.45..0.55).contains(&roc), "auroc {}", roc);
    }

    proptest! {
        #[test]
        fn ranking_metrics_bounded_and_antisymmetric(
            raw in proptest::collection::vec((any::<bool>(), 0u8..=20), 4..40)
        ) {
            let mut labels: Vec<bool> = raw.iter().map(|&(l, _)| l).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = raw.iter().map(|&(_, s)| s as f64 / 20.0).collect();
            let pr = aucpr(&labels, &scores).unwrap();
            let roc = auroc(&labels, &scores).unwrap();
            prop_assert!((0.0..=1.0).contains(&pr));
            prop_assert!((0.0..=1.0).contains(&roc));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flipped = auroc(&labels, &neg).unwrap();
            prop_assert!((roc + flipped - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recon_orthogonal_embeddings_give_half_scores() {
        let n = 4;
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::eye(n));
        let pattern = Tensor::eye(n);
        let (loss, scores) = recon_loss(&mut tape, c, &pattern).unwrap();
        match scores {
            TaskScores::Recon { labels, scores } => {
                for i in 0..n {
                    for j in 0..n {
                        let s = scores[i * n + j];
                        if i == j {
                            assert!(labels[i * n + j]);
                            assert!((s - sigmoid(1.0)).abs() < 1e-15);
                        } else {
                            assert!(!labels[i * n + j]);
                            assert!((s - 0.5).abs() < 1e-15);
                        }
                    }
                }
            }
            _ => panic!("wrong score kind"),
        }
        // off-diagonal pairs each contribute ln 2
        let off = (n * n - n) as f64;
        let diag = n as f64;
        let expect = (off * f64::ln(2.0) + diag * -f64::ln(sigmoid(1.0))) / (n * n) as f64;
        assert!((tape.value(loss).get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn recon_saturated_true_edge_loss_vanishes() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(1, 2, vec![40.0, 0.0]).unwrap());
        let pattern = Tensor::eye(1);
        let (loss, _) = recon_loss(&mut tape, c, &pattern).unwrap();
        assert!(tape.value(loss).get(0, 0) < 1e-12);
    }

    fn toy_encounter() -> Encounter {
        Encounter {
            id: 0,
            dx: vec![1, 2],
            treat: vec![3],
            lab: vec![],
            edges: Some(vec![
                (NodeRef::visit(), NodeRef::new(NodeKind::Diagnosis, 0)),
                (NodeRef::visit(), NodeRef::new(NodeKind::Diagnosis, 1)),
                (NodeRef::new(NodeKind::Diagnosis, 0), NodeRef::new(NodeKind::Treatment, 0)),
            ]),
            labels: Labels {
                dx_treatment: Some(vec![1]),
                readmission: Some(true),
                mortality: Some(false),
            },
        }
    }

    fn toy_model(task: TaskKind) -> Model {
        let spec = ModelSpec {
            dim: 8,
            attention_blocks: 1,
            ..ModelSpec::of_kind(ModelKind::Transformer)
        };
        let vocabs = VocabSizes {
            dx: 10,
            treat: 10,
            lab: 10,
        };
        let extra = head_param_specs(task, spec.dim, vocabs.dx);
        Model::with_extra_params(spec, vocabs, 5, &extra).unwrap()
    }

    #[test]
    fn zero_head_weights_score_half() {
        let mut m = toy_model(TaskKind::DxTreatment);
        m.params.set("head/dx_treatment/w", Tensor::zeros(8, 2)).unwrap();
        let e = toy_encounter();
        let mut tape = Tape::new();
        let out = m
            .forward(&mut tape, &crate::models::ForwardCtx::eval(&e), &mut rng(0))
            .unwrap();
        let tl = apply_task(
            &mut tape,
            &m.params,
            &out,
            &e,
            TaskKind::DxTreatment,
            ModelKind::Transformer,
            None,
        )
        .unwrap();
        match tl.scores {
            TaskScores::Multilabel { labels, scores } => {
                assert_eq!(labels, [true, false]);
                assert_eq!(scores, [0.5, 0.5]);
            }
            _ => panic!("wrong score kind"),
        }
    }

    #[test]
    fn binary_heads_read_their_labels() {
        for (task, want) in [(TaskKind::Readmission, true), (TaskKind::Mortality, false)] {
            let m = toy_model(task);
            let e = toy_encounter();
            let mut tape = Tape::new();
            let out = m
                .forward(&mut tape, &crate::models::ForwardCtx::eval(&e), &mut rng(0))
                .unwrap();
            let tl = apply_task(&mut tape, &m.params, &out, &e, task, ModelKind::Transformer, None)
                .unwrap();
            match tl.scores {
                TaskScores::Binary { label, score } => {
                    assert_eq!(label, want);
                    assert!((0.0..1.0).contains(&score));
                }
                _ => panic!("wrong score kind"),
            }
        }
    }

    #[test]
    fn masked_dx_single_class_vocab_is_trivially_correct() {
        let spec = ModelSpec {
            dim: 4,
            attention_blocks: 1,
            ..ModelSpec::of_kind(ModelKind::Transformer)
        };
        let vocabs = VocabSizes {
            dx: 1,
            treat: 1,
            lab: 1,
        };
        let extra = head_param_specs(TaskKind::MaskedDx, 4, 1);
        let m = Model::with_extra_params(spec, vocabs, 3, &extra).unwrap();
        let mut e = toy_encounter();
        e.dx = vec![0, 0];
        e.treat = vec![0];
        let mut tape = Tape::new();
        let mut ctx = crate::models::ForwardCtx::eval(&e);
        ctx.masked_dx = Some(1);
        let out = m.forward(&mut tape, &ctx, &mut rng(0)).unwrap();
        let tl = apply_task(
            &mut tape,
            &m.params,
            &out,
            &e,
            TaskKind::MaskedDx,
            ModelKind::Transformer,
            Some(1),
        )
        .unwrap();
        match tl.scores {
            TaskScores::MaskedDx { correct } => assert!(correct),
            _ => panic!("wrong score kind"),
        }
        assert!(tape.value(tl.loss).get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn deep_cannot_reconstruct_graph() {
        assert!(TaskKind::GraphRecon.check_model(ModelKind::Deep).is_err());
        assert!(TaskKind::GraphRecon.check_model(ModelKind::Shallow).is_ok());
        assert!(TaskKind::MaskedDx.check_model(ModelKind::Deep).is_ok());
    }

    #[test]
    fn accumulator_reduces_each_task() {
        let mut acc = TaskAccum::new(TaskKind::Readmission);
        acc.push(&TaskScores::Binary {
            label: true,
            score: 0.9,
        })
        .unwrap();
        acc.push(&TaskScores::Binary {
            label: false,
            score: 0.1,
        })
        .unwrap();
        let m = acc.metrics().unwrap();
        assert_eq!(m["aucpr"], 1.0);
        assert_eq!(m["auroc"], 1.0);

        let mut acc = TaskAccum::new(TaskKind::DxTreatment);
        for (l, s) in [([true, false], [0.8, 0.3]), ([false, true], [0.2, 0.7])] {
            acc.push(&TaskScores::Multilabel {
                labels: l,
                scores: s,
            })
            .unwrap();
        }
        let m = acc.metrics().unwrap();
        assert_eq!(m["aucpr"], 1.0);
        assert_eq!(m["auroc"], 1.0);

        let mut acc = TaskAccum::new(TaskKind::MaskedDx);
        acc.push(&TaskScores::MaskedDx { correct: true }).unwrap();
        acc.push(&TaskScores::MaskedDx { correct: false }).unwrap();
        assert_eq!(acc.metrics().unwrap()["accuracy"], 0.5);

        let mut acc = TaskAccum::new(TaskKind::GraphRecon);
        assert!(acc
            .push(&TaskScores::MaskedDx { correct: true })
            .is_err());
    }

    #[test]
    fn structure_eval_exact_attention_has_zero_kl() {
        let truth = Tensor::from_rows(&[
            vec![0.5, 0.5, 0.0],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.0, 0.5, 0.5],
        ])
        .unwrap();
        let (kl, ent) = structure_eval(&[&truth], &truth).unwrap();
        assert!(kl.abs() < 1e-12);
        let expect_ent = (2.0 * f64::ln(2.0) + f64::ln(3.0)) / 3.0;
        assert!((ent - expect_ent).abs() < 1e-12);
    }

    #[test]
    fn structure_eval_uniform_attention_hand_value() {
        // chain truth visit-dx-treat, uniform attention
        let truth = Tensor::from_rows(&[
            vec![0.5, 0.5, 0.0],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.0, 0.5, 0.5],
        ])
        .unwrap();
        let uniform = Tensor::filled(3, 3, 1.0 / 3.0);
        let (kl, ent) = structure_eval(&[&uniform], &truth).unwrap();
        assert!((kl - 2.0 * f64::ln(1.5)).abs() < 1e-12, "kl {}", kl);
        assert!((ent - f64::ln(3.0)).abs() < 1e-12);
        // block averaging: a perfect block halves the uniform block's numbers
        let (kl2, _) = structure_eval(&[&uniform, &truth], &truth).unwrap();
        assert!((kl2 - kl / 2.0).abs() < 1e-12);
    }
}
