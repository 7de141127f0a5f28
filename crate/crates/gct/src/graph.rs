//! Per-encounter graph structure: node indexing, attention masks, conditional
//! priors, true adjacency, and the random-adjacency baseline.

use std::collections::{BTreeMap, BTreeSet};

use crate::encounter::{Encounter, NodeKind, NodeRef};
use crate::error::{Error, Result};
use crate::numerics::MASK_BLOCKED;
use crate::rng::{StreamRng, StreamTag};
use crate::Tensor;

/// Flat node order for one encounter: visit at 0, then diagnosis, treatment,
/// and lab blocks in their recorded order.
#[derive(Clone, Debug)]
pub struct NodeIndexing {
    pub n_dx: usize,
    pub n_treat: usize,
    pub n_lab: usize,
}

impl NodeIndexing {
    pub fn of(encounter: &Encounter) -> Self {
        NodeIndexing {
            n_dx: encounter.dx.len(),
            n_treat: encounter.treat.len(),
            n_lab: encounter.lab.len(),
        }
    }

    pub fn n(&self) -> usize {
        1 + self.n_dx + self.n_treat + self.n_lab
    }

    pub fn index(&self, node: NodeRef) -> usize {
        let p = node.position as usize;
        match node.kind {
            NodeKind::Visit => 0,
            NodeKind::Diagnosis => 1 + p,
            NodeKind::Treatment => 1 + self.n_dx + p,
            NodeKind::Lab => 1 + self.n_dx + self.n_treat + p,
        }
    }

    pub fn kind_of(&self, i: usize) -> NodeKind {
        if i == 0 {
            NodeKind::Visit
        } else if i < 1 + self.n_dx {
            NodeKind::Diagnosis
        } else if i < 1 + self.n_dx + self.n_treat {
            NodeKind::Treatment
        } else {
            NodeKind::Lab
        }
    }

    /// Position within the node's own kind block.
    pub fn position_of(&self, i: usize) -> usize {
        match self.kind_of(i) {
            NodeKind::Visit => 0,
            NodeKind::Diagnosis => i - 1,
            NodeKind::Treatment => i - 1 - self.n_dx,
            NodeKind::Lab => i - 1 - self.n_dx - self.n_treat,
        }
    }

    pub fn label(&self, i: usize) -> String {
        match self.kind_of(i) {
            NodeKind::Visit => "Visit".into(),
            NodeKind::Diagnosis => format!("D_{}", self.position_of(i)),
            NodeKind::Treatment => format!("T_{}", self.position_of(i)),
            NodeKind::Lab => format!("L_{}", self.position_of(i)),
        }
    }
}

/// Encounter-level co-occurrence statistics between code kinds, kept as raw
/// (both, conditioning) counts so probabilities are exact ratios.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CondProbTables {
    co_dx_treat: BTreeMap<(u32, u32), u32>,
    co_treat_lab: BTreeMap<(u32, u32), u32>,
    n_dx: BTreeMap<u32, u32>,
    n_treat: BTreeMap<u32, u32>,
    n_lab: BTreeMap<u32, u32>,
}

impl CondProbTables {
    fn ratio(both: Option<&u32>, total: Option<&u32>) -> f64 {
        match (both, total) {
            (Some(&b), Some(&t)) if t > 0 => b as f64 / t as f64,
            _ => 0.0,
        }
    }

    pub fn p_treat_given_dx(&self, d: u32, m: u32) -> f64 {
        Self::ratio(self.co_dx_treat.get(&(d, m)), self.n_dx.get(&d))
    }

    pub fn p_dx_given_treat(&self, m: u32, d: u32) -> f64 {
        Self::ratio(self.co_dx_treat.get(&(d, m)), self.n_treat.get(&m))
    }

    pub fn p_lab_given_treat(&self, m: u32, r: u32) -> f64 {
        Self::ratio(self.co_treat_lab.get(&(m, r)), self.n_treat.get(&m))
    }

    pub fn p_treat_given_lab(&self, r: u32, m: u32) -> f64 {
        Self::ratio(self.co_treat_lab.get(&(m, r)), self.n_lab.get(&r))
    }
}

/// Count encounter-level co-occurrences over a training corpus. Code
/// multiplicity within an encounter does not matter, only presence.
pub fn estimate_cond_probs(training: &[Encounter]) -> Result<CondProbTables> {
    if training.is_empty() {
        return Err(Error::Config("conditional estimation needs a non-empty training set".into()));
    }
    let mut t = CondProbTables::default();
    for enc in training {
        let dx: BTreeSet<u32> = enc.dx.iter().copied().collect();
        let treat: BTreeSet<u32> = enc.treat.iter().copied().collect();
        let lab: BTreeSet<u32> = enc.lab.iter().copied().collect();
        for &d in &dx {
            *t.n_dx.entry(d).or_insert(0) += 1;
        }
        for &m in &treat {
            *t.n_treat.entry(m).or_insert(0) += 1;
        }
        for &r in &lab {
            *t.n_lab.entry(r).or_insert(0) += 1;
        }
        for &d in &dx {
            for &m in &treat {
                *t.co_dx_treat.entry((d, m)).or_insert(0) += 1;
            }
        }
        for &m in &treat {
            for &r in &lab {
                *t.co_treat_lab.entry((m, r)).or_insert(0) += 1;
            }
        }
    }
    Ok(t)
}

fn cell_allowed(indexing: &NodeIndexing, i: usize, j: usize) -> bool {
    if i == j || i == 0 || j == 0 {
        return true;
    }
    matches!(
        (indexing.kind_of(i), indexing.kind_of(j)),
        (NodeKind::Diagnosis, NodeKind::Treatment)
            | (NodeKind::Treatment, NodeKind::Diagnosis)
            | (NodeKind::Treatment, NodeKind::Lab)
            | (NodeKind::Lab, NodeKind::Treatment)
    )
}

/// Attention mask: 0 where attention is allowed, a large negative sentinel
/// where it is not. Diagonal and visit row/column are always open; code kinds
/// attend only across adjacent hierarchy levels.
pub fn build_mask(encounter: &Encounter) -> Tensor {
    let idx = NodeIndexing::of(encounter);
    let n = idx.n();
    let mut m = Tensor::filled(n, n, MASK_BLOCKED);
    for i in 0..n {
        for j in 0..n {
            if cell_allowed(&idx, i, j) {
                m.set(i, j, 0.0);
            }
        }
    }
    m
}

/// Conditional prior over the same cell pattern as the mask: known-to-exist
/// cells (diagonal, visit row/column) carry `green_value`, cross-kind cells
/// carry the estimated conditional of the column code given the row code, and
/// everything else is zero. Rows are then normalized to sum to 1.
pub fn build_prior(
    encounter: &Encounter,
    tables: &CondProbTables,
    green_value: f64,
) -> Result<Tensor> {
    if green_value <= 0.0 || !green_value.is_finite() {
        return Err(Error::Config(format!("green value must be positive, got {}", green_value)));
    }
    let idx = NodeIndexing::of(encounter);
    let n = idx.n();
    let code = |i: usize| -> u32 {
        let p = idx.position_of(i);
        match idx.kind_of(i) {
            NodeKind::Visit => 0,
            NodeKind::Diagnosis => encounter.dx[p],
            NodeKind::Treatment => encounter.treat[p],
            NodeKind::Lab => encounter.lab[p],
        }
    };
    let mut p = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j || i == 0 || j == 0 {
                p.set(i, j, green_value);
                continue;
            }
            let v = match (idx.kind_of(i), idx.kind_of(j)) {
                (NodeKind::Diagnosis, NodeKind::Treatment) => {
                    tables.p_treat_given_dx(code(i), code(j))
                }
                (NodeKind::Treatment, NodeKind::Diagnosis) => {
                    tables.p_dx_given_treat(code(i), code(j))
                }
                (NodeKind::Treatment, NodeKind::Lab) => {
                    tables.p_lab_given_treat(code(i), code(j))
                }
                (NodeKind::Lab, NodeKind::Treatment) => {
                    tables.p_treat_given_lab(code(i), code(j))
                }
                _ => continue,
            };
            p.set(i, j, v);
        }
    }
    normalize_rows(&mut p)?;
    Ok(p)
}

fn normalize_rows(m: &mut Tensor) -> Result<()> {
    let cols = m.cols();
    for i in 0..m.rows() {
        let sum: f64 = m.row(i).iter().sum();
        if sum <= 0.0 {
            return Err(Error::Contract(format!("row {} sums to {}, cannot normalize", i, sum)));
        }
        for j in 0..cols {
            let v = m.get(i, j) / sum;
            m.set(i, j, v);
        }
    }
    Ok(())
}

/// Degree-normalized true adjacency: symmetric edges plus self-loops, each
/// row divided by its degree count.
pub fn build_true_adjacency(encounter: &Encounter) -> Result<Tensor> {
    let edges = encounter.edges()?;
    let idx = NodeIndexing::of(encounter);
    let n = idx.n();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        a.set(i, i, 1.0);
    }
    for &(p, c) in edges {
        let (i, j) = (idx.index(p), idx.index(c));
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    normalize_rows(&mut a)?;
    Ok(a)
}

/// Unnormalized symmetric adjacency with self-loops, the binary target for
/// structure reconstruction.
pub fn build_adjacency_pattern(encounter: &Encounter) -> Result<Tensor> {
    let edges = encounter.edges()?;
    let idx = NodeIndexing::of(encounter);
    let n = idx.n();
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        a.set(i, i, 1.0);
    }
    for &(p, c) in edges {
        let (i, j) = (idx.index(p), idx.index(c));
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    Ok(a)
}

/// Zero one diagnosis out of a prior: its row collapses to self-attention and
/// its column disappears from everyone else, with rows renormalized.
pub fn mask_diagnosis_in_prior(prior: &Tensor, dx_index: usize, idx: &NodeIndexing) -> Result<Tensor> {
    if idx.kind_of(dx_index) != NodeKind::Diagnosis {
        return Err(Error::Domain(format!(
            "index {} is not a diagnosis node",
            dx_index
        )));
    }
    let n = prior.rows();
    let mut out = prior.clone();
    for j in 0..n {
        out.set(dx_index, j, 0.0);
    }
    for i in 0..n {
        out.set(i, dx_index, 0.0);
    }
    out.set(dx_index, dx_index, 1.0);
    normalize_rows(&mut out)?;
    Ok(out)
}

/// Row-stochastic matrix of i.i.d. Uniform(0,1) draws, keyed by run seed and
/// encounter id so every run sees the same noise.
pub fn build_random_adjacency(n: usize, seed: u64, encounter_id: u64) -> Tensor {
    let mut rng = StreamRng::new(seed, StreamTag::RandomAdj, &[encounter_id]);
    let mut a = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, rng.uniform());
        }
    }
    normalize_rows(&mut a).expect("uniform rows have positive sums");
    a
}
