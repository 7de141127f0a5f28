//! Synthetic hierarchical encounter generator.
//!
//! Ground-truth conditional tables are permuted, normalized Pareto draws; an
//! encounter is a visit that fans out to diagnosis chains, per-diagnosis
//! treatments, and per-treatment labs, each governed by Bernoulli continue
//! probabilities. Every random decision is keyed to (seed, purpose, index),
//! so datasets are bit-identical across runs and machines.

use serde::{Deserialize, Serialize};

use crate::encounter::{Encounter, Labels, NodeKind, NodeRef};
use crate::error::{Error, Result};
use crate::rng::{StreamRng, StreamTag};

const TABLE_PD: u64 = 1;
const TABLE_PDD: u64 = 2;
const TABLE_PMD: u64 = 3;
const TABLE_PRMD: u64 = 4;
const TABLE_A: u64 = 5;
const TABLE_B: u64 = 6;
const TABLE_C: u64 = 7;

/// Targeted probability overrides that plant two diagnosis-treatment
/// relations for the classification task: label 1 marks a d1-m1 edge, label 2
/// a d2-m1 edge (reachable via the d1 to d2 chain).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DxTreatmentLabelSpec {
    pub d1: u32,
    pub d2: u32,
    pub m1: u32,
    pub p_d1: f64,
    pub a_d1: f64,
    pub p_d2_given_d1: f64,
    pub b_d1: f64,
    pub b_d2: f64,
    pub p_m1_given_d1: f64,
    pub p_m1_given_d2: f64,
}

impl Default for DxTreatmentLabelSpec {
    fn default() -> Self {
        DxTreatmentLabelSpec {
            d1: 0,
            d2: 1,
            m1: 0,
            p_d1: 0.33,
            a_d1: 0.8,
            p_d2_given_d1: 0.33,
            b_d1: 0.5,
            b_d2: 0.5,
            p_m1_given_d1: 0.2,
            p_m1_given_d2: 0.8,
        }
    }
}

impl DxTreatmentLabelSpec {
    pub fn validate(&self, config: &SyntheticConfig) -> Result<()> {
        let probs = [
            self.p_d1,
            self.a_d1,
            self.p_d2_given_d1,
            self.b_d1,
            self.b_d2,
            self.p_m1_given_d1,
            self.p_m1_given_d2,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("label override probabilities must be in [0,1]".into()));
        }
        if self.d1 as usize >= config.vocab_dx
            || self.d2 as usize >= config.vocab_dx
            || self.m1 as usize >= config.vocab_treat
        {
            return Err(Error::Config("label target codes outside vocabulary".into()));
        }
        if self.d1 == self.d2 {
            return Err(Error::Config("label targets d1 and d2 must differ".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SyntheticConfig {
    pub vocab_dx: usize,
    pub vocab_treat: usize,
    pub vocab_lab: usize,
    pub encounters: usize,
    pub seed: u64,
    /// Pareto shape for the root diagnosis distribution.
    pub pareto_alpha_root: f64,
    /// Pareto shape for every conditional distribution.
    pub pareto_alpha_cond: f64,
    pub chain_mu: f64,
    pub chain_sd: f64,
    pub treat_mu: f64,
    pub treat_sd: f64,
    pub lab_mu: f64,
    pub lab_sd: f64,
    /// Probability that the outer diagnosis loop runs another pass.
    pub outer_continue: f64,
    pub min_codes: usize,
    pub max_codes: usize,
    pub labels: Option<DxTreatmentLabelSpec>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_dx: 1000,
            vocab_treat: 1000,
            vocab_lab: 1000,
            encounters: 5000,
            seed: 0,
            pareto_alpha_root: 2.0,
            pareto_alpha_cond: 1.5,
            chain_mu: 0.5,
            chain_sd: 0.1,
            treat_mu: 0.5,
            treat_sd: 0.25,
            lab_mu: 0.5,
            lab_sd: 0.25,
            outer_continue: 0.5,
            min_codes: 5,
            max_codes: 50,
            labels: None,
        }
    }
}

impl SyntheticConfig {
    /// Desk-scale variant: tiny vocabularies, full pipeline semantics.
    pub fn desk(encounters: usize, seed: u64) -> Self {
        SyntheticConfig {
            vocab_dx: 100,
            vocab_treat: 100,
            vocab_lab: 100,
            encounters,
            seed,
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_dx == 0 || self.vocab_treat == 0 || self.vocab_lab == 0 {
            return Err(Error::Config("vocabulary sizes must be >= 1".into()));
        }
        if self.min_codes > self.max_codes {
            return Err(Error::Config(format!(
                "min_codes {} > max_codes {}",
                self.min_codes, self.max_codes
            )));
        }
        if !(0.0..1.0).contains(&self.outer_continue) {
            return Err(Error::Config("outer_continue must be in [0,1)".into()));
        }
        if self.pareto_alpha_root <= 0.0 || self.pareto_alpha_cond <= 0.0 {
            return Err(Error::Config("pareto shapes must be positive".into()));
        }
        if let Some(spec) = &self.labels {
            spec.validate(self)?;
        }
        Ok(())
    }
}

/// Ground-truth sampling tables. The per-(treatment, diagnosis) lab tables
/// would be |M|x|D| full distributions, so they are regenerated on demand
/// from their key-derived stream instead of stored; values are identical
/// either way.
#[derive(Clone, Debug)]
pub struct GroundTruthTables {
    seed: u64,
    alpha_cond: f64,
    vocab_lab: usize,
    /// Root diagnosis distribution, length |D|.
    pub p_d: Vec<f64>,
    /// Chain conditionals, |D| rows over |D|.
    pub p_dd: Vec<Vec<f64>>,
    /// Treatment conditionals, |D| rows over |M|.
    pub p_md: Vec<Vec<f64>>,
    /// Diagnosis chain continue probabilities, length |D|.
    pub a: Vec<f64>,
    /// Treatment repeat probabilities, length |D|.
    pub b: Vec<f64>,
    /// Lab continue probabilities indexed [treatment][diagnosis].
    pub c: Vec<Vec<f64>>,
}

fn pareto_distribution(seed: u64, table: u64, parts: &[u64], len: usize, alpha: f64) -> Vec<f64> {
    let mut key = vec![table];
    key.extend_from_slice(parts);
    let mut draw = StreamRng::new(seed, StreamTag::TableRow, &key);
    let mut row: Vec<f64> = (0..len).map(|_| draw.pareto(alpha)).collect();
    let sum: f64 = row.iter().sum();
    if sum > 0.0 {
        row.iter_mut().for_each(|x| *x /= sum);
    } else {
        row.iter_mut().for_each(|x| *x = 1.0 / len as f64);
    }
    let mut perm = StreamRng::new(seed, StreamTag::TablePermute, &key);
    perm.shuffle(&mut row);
    row
}

fn clipped_normals(seed: u64, table: u64, parts: &[u64], len: usize, mu: f64, sd: f64) -> Vec<f64> {
    let mut key = vec![table];
    key.extend_from_slice(parts);
    let mut rng = StreamRng::new(seed, StreamTag::TableScalar, &key);
    (0..len).map(|_| rng.normal(mu, sd).clamp(0.0, 1.0 - 1e-12)).collect()
}

pub fn build_tables(config: &SyntheticConfig) -> Result<GroundTruthTables> {
    config.validate()?;
    let s = config.seed;
    let p_d = pareto_distribution(s, TABLE_PD, &[], config.vocab_dx, config.pareto_alpha_root);
    let p_dd = (0..config.vocab_dx)
        .map(|i| pareto_distribution(s, TABLE_PDD, &[i as u64], config.vocab_dx, config.pareto_alpha_cond))
        .collect();
    let p_md = (0..config.vocab_dx)
        .map(|i| pareto_distribution(s, TABLE_PMD, &[i as u64], config.vocab_treat, config.pareto_alpha_cond))
        .collect();
    let a = clipped_normals(s, TABLE_A, &[], config.vocab_dx, config.chain_mu, config.chain_sd);
    let b = clipped_normals(s, TABLE_B, &[], config.vocab_dx, config.treat_mu, config.treat_sd);
    let c = (0..config.vocab_treat)
        .map(|m| clipped_normals(s, TABLE_C, &[m as u64], config.vocab_dx, config.lab_mu, config.lab_sd))
        .collect();
    Ok(GroundTruthTables {
        seed: s,
        alpha_cond: config.pareto_alpha_cond,
        vocab_lab: config.vocab_lab,
        p_d,
        p_dd,
        p_md,
        a,
        b,
        c,
    })
}

impl GroundTruthTables {
    /// Lab distribution for one (treatment, diagnosis) pair, materialized on
    /// demand from its own stream.
    pub fn p_r_row(&self, m: u32, d: u32) -> Vec<f64> {
        pareto_distribution(
            self.seed,
            TABLE_PRMD,
            &[m as u64, d as u64],
            self.vocab_lab,
            self.alpha_cond,
        )
    }
}

/// Pin `row[i] = v` for each override, rescaling the remaining entries so the
/// row still sums to 1.
fn override_row(row: &mut [f64], overrides: &[(usize, f64)]) -> Result<()> {
    let pinned: f64 = overrides.iter().map(|&(_, v)| v).sum();
    if pinned > 1.0 + 1e-12 {
        return Err(Error::Config(format!("override mass {} exceeds 1", pinned)));
    }
    let rest_old: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| !overrides.iter().any(|&(j, _)| j == *i))
        .map(|(_, &v)| v)
        .sum();
    let rest_new = 1.0 - pinned;
    let n_rest = row.len() - overrides.len();
    for (i, v) in row.iter_mut().enumerate() {
        if let Some(&(_, pin)) = overrides.iter().find(|&&(j, _)| j == i) {
            *v = pin;
        } else if rest_old > 0.0 {
            *v *= rest_new / rest_old;
        } else if n_rest > 0 {
            *v = rest_new / n_rest as f64;
        }
    }
    Ok(())
}

/// Apply the label-planting overrides to fresh tables.
pub fn inject_dx_treatment_labels(
    mut tables: GroundTruthTables,
    spec: &DxTreatmentLabelSpec,
) -> Result<GroundTruthTables> {
    let (d1, d2, m1) = (spec.d1 as usize, spec.d2 as usize, spec.m1 as usize);
    if d1 >= tables.p_d.len() || d2 >= tables.p_d.len() || m1 >= tables.p_md[0].len() {
        return Err(Error::Config("label target codes outside vocabulary".into()));
    }
    override_row(&mut tables.p_d, &[(d1, spec.p_d1)])?;
    override_row(&mut tables.p_dd[d1], &[(d2, spec.p_d2_given_d1)])?;
    override_row(&mut tables.p_md[d1], &[(m1, spec.p_m1_given_d1)])?;
    override_row(&mut tables.p_md[d2], &[(m1, spec.p_m1_given_d2)])?;
    tables.a[d1] = spec.a_d1;
    tables.b[d1] = spec.b_d1;
    tables.b[d2] = spec.b_d2;
    Ok(tables)
}

/// Draw one encounter tree.
///
/// Loop shape: the outer pass repeats with probability `outer_continue`
/// (at least one pass); each pass roots a diagnosis from p(D) and extends a
/// chain while a draw stays under a(current); every diagnosis emits at least
/// one treatment and repeats while a draw stays under b(d); each treatment
/// emits labs only while draws stay under c(m,d). Code counts are capped at
/// max_codes+1 so runaway continue probabilities terminate; the filter then
/// drops anything over max_codes.
pub fn sample_encounter(
    tables: &GroundTruthTables,
    config: &SyntheticConfig,
    rng: &mut StreamRng,
    id: u64,
) -> Encounter {
    let cap = config.max_codes + 1;
    loop {
        let mut dx: Vec<u32> = Vec::new();
        let mut treat: Vec<u32> = Vec::new();
        let mut lab: Vec<u32> = Vec::new();
        let mut edges: Vec<(NodeRef, NodeRef)> = Vec::new();

        'outer: loop {
            let mut cur = tables.p_d[..].pick(rng);
            loop {
                if dx.len() >= cap {
                    break 'outer;
                }
                let dpos = dx.len() as u32;
                dx.push(cur);
                edges.push((NodeRef::visit(), NodeRef::new(NodeKind::Diagnosis, dpos)));
                // at least one treatment per diagnosis
                loop {
                    if treat.len() >= cap {
                        break;
                    }
                    let m = tables.p_md[cur as usize][..].pick(rng);
                    let mpos = treat.len() as u32;
                    treat.push(m);
                    edges.push((
                        NodeRef::new(NodeKind::Diagnosis, dpos),
                        NodeRef::new(NodeKind::Treatment, mpos),
                    ));
                    let mut lab_row: Option<Vec<f64>> = None;
                    while lab.len() < cap && rng.uniform() < tables.c[m as usize][cur as usize] {
                        let row = lab_row.get_or_insert_with(|| tables.p_r_row(m, cur));
                        let r = row[..].pick(rng);
                        let rpos = lab.len() as u32;
                        lab.push(r);
                        edges.push((
                            NodeRef::new(NodeKind::Treatment, mpos),
                            NodeRef::new(NodeKind::Lab, rpos),
                        ));
                    }
                    if rng.uniform() >= tables.b[cur as usize] {
                        break;
                    }
                }
                if rng.uniform() >= tables.a[cur as usize] {
                    break;
                }
                cur = tables.p_dd[cur as usize][..].pick(rng);
            }
            if rng.uniform() >= config.outer_continue {
                break;
            }
        }

        if !dx.is_empty() {
            let mut enc = Encounter {
                id,
                dx,
                treat,
                lab,
                edges: Some(edges),
                labels: Labels::default(),
            };
            if let Some(spec) = &config.labels {
                enc.labels.dx_treatment = Some(assign_labels(&enc, spec));
            }
            return enc;
        }
        // degenerate draw; continue on the same stream
    }
}

trait Pick {
    fn pick(&self, rng: &mut StreamRng) -> u32;
}

impl Pick for [f64] {
    fn pick(&self, rng: &mut StreamRng) -> u32 {
        rng.categorical(self) as u32
    }
}

/// Keep encounters with at least `min_codes` diagnoses and treatments and at
/// most `max_codes` of every type.
pub fn filter_encounters(encounters: Vec<Encounter>, config: &SyntheticConfig) -> Vec<Encounter> {
    encounters
        .into_iter()
        .filter(|e| {
            e.dx.len() >= config.min_codes
                && e.treat.len() >= config.min_codes
                && e.dx.len() <= config.max_codes
                && e.treat.len() <= config.max_codes
                && e.lab.len() <= config.max_codes
        })
        .collect()
}

/// Label 1 marks an existing d1-m1 edge, label 2 an existing d2-m1 edge.
/// Co-presence without the edge earns nothing.
pub fn assign_labels(encounter: &Encounter, spec: &DxTreatmentLabelSpec) -> Vec<u8> {
    let mut has1 = false;
    let mut has2 = false;
    if let Some(edges) = &encounter.edges {
        for &(p, ch) in edges {
            if p.kind == NodeKind::Diagnosis && ch.kind == NodeKind::Treatment {
                let d = encounter.dx[p.position as usize];
                let m = encounter.treat[ch.position as usize];
                if m == spec.m1 {
                    has1 |= d == spec.d1;
                    has2 |= d == spec.d2;
                }
            }
        }
    }
    let mut out = Vec::new();
    if has1 {
        out.push(1);
    }
    if has2 {
        out.push(2);
    }
    out
}

/// Generate, filter, and sequentially re-id the requested number of
/// encounters. Raw draws are indexed so the output is order-stable no matter
/// how sampling is scheduled.
pub fn generate_dataset(config: &SyntheticConfig) -> Result<Vec<Encounter>> {
    config.validate()?;
    let mut tables = build_tables(config)?;
    if let Some(spec) = &config.labels {
        tables = inject_dx_treatment_labels(tables, spec)?;
    }
    let mut kept: Vec<Encounter> = Vec::with_capacity(config.encounters);
    let attempt_bound = 10_000 + config.encounters.saturating_mul(200);
    let mut raw_index = 0u64;
    while kept.len() < config.encounters {
        if raw_index as usize >= attempt_bound {
            return Err(Error::Config(format!(
                "filter accepted only {}/{} encounters after {} draws",
                kept.len(),
                config.encounters,
                raw_index
            )));
        }
        let mut rng = StreamRng::new(config.seed, StreamTag::Encounter, &[raw_index]);
        let enc = sample_encounter(&tables, config, &mut rng, raw_index);
        raw_index += 1;
        let mut filtered = filter_encounters(vec![enc], config);
        if let Some(mut e) = filtered.pop() {
            e.id = kept.len() as u64;
            kept.push(e);
        }
    }
    Ok(kept)
}
