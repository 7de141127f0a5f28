//! Encounter records and their on-disk JSONL format.
//!
//! One encounter per line. Synthetic encounters carry the generating edge
//! list; externally ingested encounters omit `edges`, which downstream
//! structure-dependent operations treat as a hard error rather than guessing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Visit,
    Diagnosis,
    Treatment,
    Lab,
}

impl NodeKind {
    pub fn letter(self) -> char {
        match self {
            NodeKind::Visit => 'v',
            NodeKind::Diagnosis => 'd',
            NodeKind::Treatment => 'm',
            NodeKind::Lab => 'r',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            'v' => Some(NodeKind::Visit),
            'd' => Some(NodeKind::Diagnosis),
            'm' => Some(NodeKind::Treatment),
            'r' => Some(NodeKind::Lab),
            _ => None,
        }
    }
}

/// Position-based node reference within one encounter, serialized as
/// `kind:position` (`v:0`, `d:2`, `m:0`, `r:7`).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub position: u32,
}

impl NodeRef {
    pub fn new(kind: NodeKind, position: u32) -> Self {
        NodeRef { kind, position }
    }

    pub fn visit() -> Self {
        NodeRef::new(NodeKind::Visit, 0)
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.letter(), self.position)
    }
}

impl std::str::FromStr for NodeRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, p) = s
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("bad node ref {:?}", s)))?;
        let kind = k
            .chars()
            .next()
            .filter(|_| k.len() == 1)
            .and_then(NodeKind::from_letter)
            .ok_or_else(|| Error::Format(format!("bad node kind in {:?}", s)))?;
        let position = p
            .parse::<u32>()
            .map_err(|_| Error::Format(format!("bad node position in {:?}", s)))?;
        Ok(NodeRef { kind, position })
    }
}

/// Supervision attached to an encounter. Synthetic generation fills
/// `dx_treatment`; external records carry the binary outcomes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx_treatment: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readmission: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mortality: Option<bool>,
}

impl Labels {
    pub fn is_empty(&self) -> bool {
        self.dx_treatment.is_none() && self.readmission.is_none() && self.mortality.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encounter {
    pub id: u64,
    pub dx: Vec<u32>,
    pub treat: Vec<u32>,
    pub lab: Vec<u32>,
    /// Parent-child pairs of the generating tree; `None` when the source
    /// format does not expose structure.
    pub edges: Option<Vec<(NodeRef, NodeRef)>>,
    pub labels: Labels,
}

impl Encounter {
    /// Graph size including the visit node.
    pub fn node_count(&self) -> usize {
        1 + self.dx.len() + self.treat.len() + self.lab.len()
    }

    pub fn has_edges(&self) -> bool {
        self.edges.is_some()
    }

    pub fn edges(&self) -> Result<&[(NodeRef, NodeRef)]> {
        self.edges
            .as_deref()
            .ok_or(Error::MissingEdges { id: self.id })
    }

    fn ref_in_range(&self, r: NodeRef) -> bool {
        let n = match r.kind {
            NodeKind::Visit => 1,
            NodeKind::Diagnosis => self.dx.len(),
            NodeKind::Treatment => self.treat.len(),
            NodeKind::Lab => self.lab.len(),
        };
        (r.position as usize) < n
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(edges) = &self.edges {
            for &(a, b) in edges {
                if !self.ref_in_range(a) || !self.ref_in_range(b) {
                    return Err(Error::Format(format!(
                        "encounter {}: edge {}-{} references a missing node",
                        self.id, a, b
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct EncounterLine {
    format_version: u32,
    id: u64,
    dx: Vec<u32>,
    treat: Vec<u32>,
    lab: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<(String, String)>>,
    #[serde(default, skip_serializing_if = "Labels::is_empty")]
    labels: Labels,
}

impl TryFrom<EncounterLine> for Encounter {
    type Error = Error;

    fn try_from(line: EncounterLine) -> Result<Self> {
        if line.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset format_version {} unsupported (expected {})",
                line.format_version, DATASET_FORMAT_VERSION
            )));
        }
        let edges = match line.edges {
            None => None,
            Some(pairs) => {
                let mut out = Vec::with_capacity(pairs.len());
                for (a, b) in pairs {
                    out.push((a.parse()?, b.parse()?));
                }
                Some(out)
            }
        };
        let enc = Encounter {
            id: line.id,
            dx: line.dx,
            treat: line.treat,
            lab: line.lab,
            edges,
            labels: line.labels,
        };
        enc.validate()?;
        Ok(enc)
    }
}

impl From<&Encounter> for EncounterLine {
    fn from(e: &Encounter) -> Self {
        EncounterLine {
            format_version: DATASET_FORMAT_VERSION,
            id: e.id,
            dx: e.dx.clone(),
            treat: e.treat.clone(),
            lab: e.lab.clone(),
            edges: e
                .edges
                .as_ref()
                .map(|es| es.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()),
            labels: e.labels.clone(),
        }
    }
}

pub fn write_jsonl(path: &Path, encounters: &[Encounter]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in encounters {
        serde_json::to_writer(&mut w, &EncounterLine::from(e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Encounter>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EncounterLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {}", i + 1, e)))?;
        out.push(Encounter::try_from(parsed)?);
    }
    Ok(out)
}

/// Summary statistics as emitted alongside generated datasets.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetStats {
    pub format_version: u32,
    pub encounters: usize,
    pub mean_dx: f64,
    pub mean_treat: f64,
    pub mean_lab: f64,
    /// Fraction of encounters carrying each label, keyed e.g.
    /// `dx_treatment:1` or `mortality`.
    pub label_prevalence: BTreeMap<String, f64>,
}

pub fn compute_stats(encounters: &[Encounter]) -> DatasetStats {
    let n = encounters.len().max(1) as f64;
    let mut prev: BTreeMap<String, f64> = BTreeMap::new();
    let (mut sd, mut st, mut sl) = (0usize, 0usize, 0usize);
    for e in encounters {
        sd += e.dx.len();
        st += e.treat.len();
        sl += e.lab.len();
        if let Some(classes) = &e.labels.dx_treatment {
            for c in classes {
                *prev.entry(format!("dx_treatment:{}", c)).or_default() += 1.0;
            }
        }
        if e.labels.readmission == Some(true) {
            *prev.entry("readmission".into()).or_default() += 1.0;
        }
        if e.labels.mortality == Some(true) {
            *prev.entry("mortality".into()).or_default() += 1.0;
        }
    }
    for v in prev.values_mut() {
        *v /= n;
    }
    DatasetStats {
        format_version: DATASET_FORMAT_VERSION,
        encounters: encounters.len(),
        mean_dx: sd as f64 / n,
        mean_treat: st as f64 / n,
        mean_lab: sl as f64 / n,
        label_prevalence: prev,
    }
}
