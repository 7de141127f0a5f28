//! The model zoo: graph-convolutional and attention encoders plus the
//! feed-forward baselines, all built on the shared tape so one training loop
//! serves every variant.

pub mod checkpoint;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encounter::Encounter;
use crate::error::{Error, Result};
use crate::graph::NodeIndexing;
use crate::numerics::tape::TensorId;
use crate::numerics::{mlp_block, MlpLayer, MASK_BLOCKED};
use crate::rng::{StreamRng, StreamTag};
use crate::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "GCN")]
    Gcn,
    #[serde(rename = "GCN_P")]
    GcnP,
    #[serde(rename = "GCN_random")]
    GcnRandom,
    #[serde(rename = "Shallow")]
    Shallow,
    #[serde(rename = "Deep")]
    Deep,
    #[serde(rename = "Transformer")]
    Transformer,
    #[serde(rename = "GCT")]
    Gct,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Gcn,
        ModelKind::GcnP,
        ModelKind::GcnRandom,
        ModelKind::Shallow,
        ModelKind::Deep,
        ModelKind::Transformer,
        ModelKind::Gct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gcn => "GCN",
            ModelKind::GcnP => "GCN_P",
            ModelKind::GcnRandom => "GCN_random",
            ModelKind::Shallow => "Shallow",
            ModelKind::Deep => "Deep",
            ModelKind::Transformer => "Transformer",
            ModelKind::Gct => "GCT",
        }
    }

    /// Convolution-style models propagate a fixed row-stochastic matrix.
    pub fn is_conv(self) -> bool {
        matches!(self, ModelKind::Gcn | ModelKind::GcnP | ModelKind::GcnRandom)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ModelKind::Transformer | ModelKind::Gct)
    }

    pub fn is_stack(self) -> bool {
        matches!(self, ModelKind::Shallow | ModelKind::Deep)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    /// Accepts the canonical names case-insensitively, with `-` and `_`
    /// interchangeable, so `gcn-p` and `GCN_P` both parse.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        ModelKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| Error::Config(format!("unknown model kind {:?}", s)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dim: usize,
    pub attention_blocks: usize,
    pub conv_steps: usize,
    pub shallow_layers: usize,
    pub deep_pre_layers: usize,
    pub deep_post_layers: usize,
    pub mlp_dropout: f64,
    pub post_dropout: f64,
    /// Weight on the attention-regularization loss.
    pub lambda: f64,
    /// Compute first-block attention for the regularization chain even though
    /// the prior is what propagates.
    pub first_block_kl: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            kind: ModelKind::Gct,
            dim: 128,
            attention_blocks: 3,
            conv_steps: 5,
            shallow_layers: 15,
            deep_pre_layers: 8,
            deep_post_layers: 7,
            mlp_dropout: 0.0,
            post_dropout: 0.0,
            lambda: 1.0,
            first_block_kl: true,
        }
    }
}

impl ModelSpec {
    pub fn of_kind(kind: ModelKind) -> Self {
        ModelSpec {
            kind,
            ..ModelSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        let depth_ok = match self.kind {
            k if k.is_attention() => self.attention_blocks > 0,
            k if k.is_conv() => self.conv_steps > 0,
            ModelKind::Shallow => self.shallow_layers > 0,
            _ => self.deep_pre_layers > 0 && self.deep_post_layers > 0,
        };
        if !depth_ok {
            return Err(Error::Config("model depth must be positive".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for rate in [self.mlp_dropout, self.post_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {} outside [0,1)", rate)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct VocabSizes {
    pub dx: usize,
    pub treat: usize,
    pub lab: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Glorot,
    Zeros,
    Ones,
}

/// Declared shape and initialization of one named parameter.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

/// Named parameter tensors. Initialization draws are keyed by the parameter's
/// ordinal in sorted-name order, so a given (seed, shape set) always produces
/// the same weights no matter how the specs were assembled.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        for pair in sorted.windows(2) {
            if pair[0].name == pair[1].name {
                return Err(Error::Contract(format!("duplicate parameter {}", pair[0].name)));
            }
        }
        let mut map = BTreeMap::new();
        for (ordinal, spec) in sorted.iter().enumerate() {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.rows, spec.cols),
                Init::Ones => Tensor::filled(spec.rows, spec.cols, 1.0),
                Init::Glorot => {
                    let limit = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                    let mut rng = StreamRng::new(seed, StreamTag::Init, &[ordinal as u64]);
                    let mut t = Tensor::zeros(spec.rows, spec.cols);
                    for x in t.data_mut().iter_mut() {
                        *x = limit * (2.0 * rng.uniform() - 1.0);
                    }
                    t
                }
            };
            map.insert(spec.name.clone(), t);
        }
        Ok(ParamStore { map })
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ParamStore { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {}", name)))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(t) if t.same_shape(&value) => {
                *t = value;
                Ok(())
            }
            Some(t) => Err(Error::Shape {
                op: "param_set",
                detail: format!("{}: {:?} vs {:?}", name, t.shape(), value.shape()),
            }),
            None => Err(Error::Contract(format!("missing parameter {}", name))),
        }
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.map
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Copy every identically named, identically shaped tensor from `other`.
    pub fn copy_matching(&mut self, other: &ParamStore) {
        for (name, t) in &other.map {
            if let Some(mine) = self.map.get_mut(name) {
                if mine.same_shape(t) {
                    *mine = t.clone();
                }
            }
        }
    }
}

/// Registers parameters on a tape once each and remembers the name of every
/// tape id so gradients can be pulled back out by name.
pub struct Binder<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, TensorId>,
}

impl<'a> Binder<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Binder {
            tape,
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = self.tape.param(self.store.get(name)?.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn bindings(&self) -> Vec<(String, TensorId)> {
        self.bound.iter().map(|(n, &i)| (n.clone(), i)).collect()
    }
}

/// Per-encounter inputs for one forward pass. Which fields must be present
/// depends on the model kind.
pub struct ForwardCtx<'a> {
    pub encounter: &'a Encounter,
    /// Additive attention mask; GCT requires it, Transformer uses it when
    /// given and runs unmasked otherwise.
    pub mask: Option<&'a Tensor>,
    /// Conditional prior; propagated by GCT's first block and by GCN_P.
    pub prior: Option<&'a Tensor>,
    /// Fixed propagation matrix for GCN and GCN_random.
    pub adjacency: Option<&'a Tensor>,
    /// Diagnosis block position whose embedding is replaced by the mask token.
    pub masked_dx: Option<usize>,
    /// Test hook: propagate this matrix instead of computed attention.
    pub pinned_attention: Option<&'a Tensor>,
    /// Propagate the first block's own attention instead of the prior,
    /// reducing GCT to a masked Transformer.
    pub propagate_first_attention: bool,
    pub train: bool,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(encounter: &'a Encounter) -> Self {
        ForwardCtx {
            encounter,
            mask: None,
            prior: None,
            adjacency: None,
            masked_dx: None,
            pinned_attention: None,
            propagate_first_attention: false,
            train: false,
        }
    }
}

pub struct ModelOutput {
    /// Final node embeddings, N×dim.
    pub c: TensorId,
    /// Visit embedding, 1×dim.
    pub v: TensorId,
    /// Effective per-block propagation matrices, row-stochastic. Empty for
    /// the feed-forward stacks.
    pub attentions: Vec<TensorId>,
    /// Attention-regularization loss (scalar node), present only for GCT.
    pub reg_loss: Option<TensorId>,
    /// Name of every parameter registered on the tape during this pass.
    pub params: Vec<(String, TensorId)>,
}

pub struct Model {
    pub spec: ModelSpec,
    pub vocabs: VocabSizes,
    pub params: ParamStore,
}

fn mlp_pair_specs(prefix: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    for (i, (a, b)) in [(d_in, d_hidden), (d_hidden, d_out)].iter().enumerate() {
        let p = format!("{}/mlp{}", prefix, i);
        v.push(ParamSpec::new(format!("{}/w", p), *a, *b, Init::Glorot));
        v.push(ParamSpec::new(format!("{}/b", p), 1, *b, Init::Zeros));
        v.push(ParamSpec::new(format!("{}/ln_gain", p), 1, *b, Init::Ones));
        v.push(ParamSpec::new(format!("{}/ln_bias", p), 1, *b, Init::Zeros));
    }
    v
}

fn stack_layer_specs(name: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{}/w", name), d, d, Init::Glorot),
        ParamSpec::new(format!("{}/b", name), 1, d, Init::Zeros),
        ParamSpec::new(format!("{}/ln_gain", name), 1, d, Init::Ones),
        ParamSpec::new(format!("{}/ln_bias", name), 1, d, Init::Zeros),
    ]
}

impl Model {
    /// Parameter shapes for the encoder alone; task heads add their own.
    pub fn param_specs(spec: &ModelSpec, vocabs: &VocabSizes) -> Vec<ParamSpec> {
        let d = spec.dim;
        let mut v = vec![
            ParamSpec::new("embed/visit", 1, d, Init::Glorot),
            ParamSpec::new("embed/mask", 1, d, Init::Glorot),
            ParamSpec::new("embed/dx", vocabs.dx, d, Init::Glorot),
            ParamSpec::new("embed/treat", vocabs.treat, d, Init::Glorot),
            ParamSpec::new("embed/lab", vocabs.lab, d, Init::Glorot),
        ];
        match spec.kind {
            k if k.is_attention() => {
                for j in 1..=spec.attention_blocks {
                    let p = format!("block{}", j);
                    v.push(ParamSpec::new(format!("{}/wq", p), d, d, Init::Glorot));
                    v.push(ParamSpec::new(format!("{}/wk", p), d, d, Init::Glorot));
                    v.push(ParamSpec::new(format!("{}/wv", p), d, d, Init::Glorot));
                    v.extend(mlp_pair_specs(&p, d, 2 * d, d));
                }
            }
            k if k.is_conv() => {
                for j in 1..=spec.conv_steps {
                    let p = format!("block{}", j);
                    v.push(ParamSpec::new(format!("{}/wv", p), d, d, Init::Glorot));
                    v.extend(mlp_pair_specs(&p, d, 2 * d, d));
                }
            }
            ModelKind::Shallow => {
                for j in 0..spec.shallow_layers {
                    v.extend(stack_layer_specs(&format!("layer{:02}", j), d));
                }
            }
            _ => {
                for j in 0..spec.deep_pre_layers {
                    v.extend(stack_layer_specs(&format!("pre{:02}", j), d));
                }
                for j in 0..spec.deep_post_layers {
                    v.extend(stack_layer_specs(&format!("post{:02}", j), d));
                }
            }
        }
        v
    }

    pub fn new(spec: ModelSpec, vocabs: VocabSizes, seed: u64) -> Result<Self> {
        Model::with_extra_params(spec, vocabs, seed, &[])
    }

    /// Build the model with additional (task head) parameters initialized in
    /// the same sorted-name pass.
    pub fn with_extra_params(
        spec: ModelSpec,
        vocabs: VocabSizes,
        seed: u64,
        extra: &[ParamSpec],
    ) -> Result<Self> {
        spec.validate()?;
        let mut specs = Model::param_specs(&spec, &vocabs);
        specs.extend_from_slice(extra);
        let params = ParamStore::init(&specs, seed)?;
        Ok(Model {
            spec,
            vocabs,
            params,
        })
    }

    fn check_codes(&self, enc: &Encounter) -> Result<()> {
        let check = |codes: &[u32], size: usize, kind: &'static str| -> Result<()> {
            if let Some(&bad) = codes.iter().find(|&&c| c as usize >= size) {
                return Err(Error::Vocab {
                    kind,
                    code: bad,
                    size,
                });
            }
            Ok(())
        };
        check(&enc.dx, self.vocabs.dx, "dx")?;
        check(&enc.treat, self.vocabs.treat, "treat")?;
        check(&enc.lab, self.vocabs.lab, "lab")
    }

    /// Initial node embedding matrix: visit placeholder row, then per-code
    /// rows gathered from the three kind tables, with one diagnosis row
    /// optionally replaced by the trainable mask token.
    pub fn embed_nodes(
        &self,
        b: &mut Binder,
        enc: &Encounter,
        masked_dx: Option<usize>,
    ) -> Result<TensorId> {
        self.check_codes(enc)?;
        if let Some(i) = masked_dx {
            if i >= enc.dx.len() {
                return Err(Error::Domain(format!(
                    "masked dx position {} out of {}",
                    i,
                    enc.dx.len()
                )));
            }
        }
        let mut parts: Vec<TensorId> = vec![b.param("embed/visit")?];
        let as_idx = |codes: &[u32]| codes.iter().map(|&c| c as usize).collect::<Vec<_>>();
        if !enc.dx.is_empty() {
            let table = b.param("embed/dx")?;
            match masked_dx {
                Some(i) => {
                    if i > 0 {
                        let pre = b.tape.gather_rows(table, as_idx(&enc.dx[..i]))?;
                        parts.push(pre);
                    }
                    parts.push(b.param("embed/mask")?);
                    if i + 1 < enc.dx.len() {
                        let post = b.tape.gather_rows(table, as_idx(&enc.dx[i + 1..]))?;
                        parts.push(post);
                    }
                }
                None => parts.push(b.tape.gather_rows(table, as_idx(&enc.dx))?),
            }
        }
        if !enc.treat.is_empty() {
            let table = b.param("embed/treat")?;
            parts.push(b.tape.gather_rows(table, as_idx(&enc.treat))?);
        }
        if !enc.lab.is_empty() {
            let table = b.param("embed/lab")?;
            parts.push(b.tape.gather_rows(table, as_idx(&enc.lab))?);
        }
        b.tape.vstack(&parts)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &ForwardCtx,
        rng: &mut StreamRng,
    ) -> Result<ModelOutput> {
        let mut b = Binder::new(tape, &self.params);
        let c0 = self.embed_nodes(&mut b, ctx.encounter, ctx.masked_dx)?;
        let n = NodeIndexing::of(ctx.encounter).n();
        match self.spec.kind {
            k if k.is_conv() => self.conv_forward(b, c0, n, ctx, rng),
            k if k.is_attention() => self.attention_forward(b, c0, n, ctx, rng),
            _ => self.stack_forward(b, c0, ctx, rng),
        }
    }

    fn block_layers(&self, b: &mut Binder, prefix: &str) -> Result<[MlpLayer; 2]> {
        let layer = |b: &mut Binder, i: usize, rate: f64| -> Result<MlpLayer> {
            Ok(MlpLayer {
                w: b.param(&format!("{}/mlp{}/w", prefix, i))?,
                b: b.param(&format!("{}/mlp{}/b", prefix, i))?,
                ln_gain: b.param(&format!("{}/mlp{}/ln_gain", prefix, i))?,
                ln_bias: b.param(&format!("{}/mlp{}/ln_bias", prefix, i))?,
                dropout: rate,
            })
        };
        Ok([
            layer(b, 0, self.spec.mlp_dropout)?,
            layer(b, 1, self.spec.post_dropout)?,
        ])
    }

    /// One propagation block shared by every graph-shaped model: multiply a
    /// row-stochastic matrix into the node states, project, and feed the MLP.
    fn propagate_block(
        &self,
        b: &mut Binder,
        c: TensorId,
        prop: TensorId,
        prefix: &str,
        train: bool,
        rng: &mut StreamRng,
    ) -> Result<TensorId> {
        let wv = b.param(&format!("{}/wv", prefix))?;
        let mixed = b.tape.matmul(prop, c)?;
        let projected = b.tape.matmul(mixed, wv)?;
        let layers = self.block_layers(b, prefix)?;
        mlp_block(b.tape, projected, &layers, train, rng)
    }

    fn conv_forward(
        &self,
        mut b: Binder,
        c0: TensorId,
        n: usize,
        ctx: &ForwardCtx,
        rng: &mut StreamRng,
    ) -> Result<ModelOutput> {
        let adj = match self.spec.kind {
            ModelKind::GcnP => ctx.prior.ok_or_else(|| {
                Error::Contract("GCN_P forward needs a prior matrix".into())
            })?,
            _ => ctx.adjacency.ok_or_else(|| {
                Error::Contract("GCN forward needs an adjacency matrix".into())
            })?,
        };
        check_row_stochastic(adj, n)?;
        let adj_id = b.tape.constant(adj.clone());
        let mut c = c0;
        let mut attentions = Vec::with_capacity(self.spec.conv_steps);
        for j in 1..=self.spec.conv_steps {
            c = self.propagate_block(&mut b, c, adj_id, &format!("block{}", j), ctx.train, rng)?;
            attentions.push(adj_id);
        }
        let v = b.tape.gather_rows(c, vec![0])?;
        Ok(ModelOutput {
            c,
            v,
            attentions,
            reg_loss: None,
            params: b.bindings(),
        })
    }

    fn attention_forward(
        &self,
        mut b: Binder,
        c0: TensorId,
        n: usize,
        ctx: &ForwardCtx,
        rng: &mut StreamRng,
    ) -> Result<ModelOutput> {
        let is_gct = self.spec.kind == ModelKind::Gct;
        let mask: Tensor = match ctx.mask {
            Some(m) => {
                if m.shape() != (n, n) {
                    return Err(Error::Shape {
                        op: "attention_mask",
                        detail: format!("{:?} vs {} nodes", m.shape(), n),
                    });
                }
                m.clone()
            }
            None if is_gct => {
                return Err(Error::Contract("GCT forward needs an attention mask".into()))
            }
            None => Tensor::zeros(n, n),
        };
        let prior_id = if is_gct {
            let p = ctx
                .prior
                .ok_or_else(|| Error::Contract("GCT forward needs a prior matrix".into()))?;
            check_row_stochastic(p, n)?;
            check_prior_mask_consistent(p, &mask)?;
            Some(b.tape.constant(p.clone()))
        } else {
            None
        };

        let scale = 1.0 / (self.spec.dim as f64).sqrt();
        let pinned = ctx.pinned_attention.map(|t| b.tape.constant(t.clone()));
        let mut c = c0;
        let mut attentions = Vec::with_capacity(self.spec.attention_blocks);
        // the regularization chain starts at the prior and steps through each
        // computed attention map
        let mut reg_prev = prior_id;
        let mut reg_terms: Vec<TensorId> = Vec::new();
        for j in 1..=self.spec.attention_blocks {
            let prefix = format!("block{}", j);
            let first_gct_block = is_gct && j == 1;
            let needs_attention = !first_gct_block
                || self.spec.first_block_kl
                || ctx.propagate_first_attention;
            let att = if needs_attention {
                let wq = b.param(&format!("{}/wq", prefix))?;
                let wk = b.param(&format!("{}/wk", prefix))?;
                let q = b.tape.matmul(c, wq)?;
                let k = b.tape.matmul(c, wk)?;
                let logits = b.tape.matmul_nt(q, k)?;
                let logits = b.tape.scale(logits, scale);
                Some(b.tape.masked_row_softmax(logits, &mask)?)
            } else {
                None
            };
            if is_gct {
                if let (Some(prev), Some(att)) = (reg_prev, att) {
                    reg_terms.push(b.tape.kl_div_rows(prev, att)?);
                }
                if let Some(att) = att {
                    reg_prev = Some(att);
                }
            }
            let prop = if let Some(p) = pinned {
                p
            } else if first_gct_block && !ctx.propagate_first_attention {
                prior_id.expect("checked above")
            } else {
                att.expect("attention computed for every propagating block")
            };
            attentions.push(prop);
            c = self.propagate_block(&mut b, c, prop, &prefix, ctx.train, rng)?;
        }
        let reg_loss = if is_gct {
            let mut total = reg_terms.first().copied();
            for &t in reg_terms.iter().skip(1) {
                total = Some(b.tape.add(total.unwrap(), t)?);
            }
            // a one-block, flag-off GCT has an empty chain; report zero
            Some(match total {
                Some(t) => t,
                None => b.tape.constant(Tensor::scalar(0.0)),
            })
        } else {
            None
        };
        let v = b.tape.gather_rows(c, vec![0])?;
        Ok(ModelOutput {
            c,
            v,
            attentions,
            reg_loss,
            params: b.bindings(),
        })
    }

    fn stack_forward(
        &self,
        mut b: Binder,
        c0: TensorId,
        ctx: &ForwardCtx,
        rng: &mut StreamRng,
    ) -> Result<ModelOutput> {
        let gather = |b: &mut Binder, names: Vec<String>, rate: f64| -> Result<Vec<MlpLayer>> {
            names
                .into_iter()
                .map(|name| {
                    Ok(MlpLayer {
                        w: b.param(&format!("{}/w", name))?,
                        b: b.param(&format!("{}/b", name))?,
                        ln_gain: b.param(&format!("{}/ln_gain", name))?,
                        ln_bias: b.param(&format!("{}/ln_bias", name))?,
                        dropout: rate,
                    })
                })
                .collect()
        };
        let (c, v) = match self.spec.kind {
            ModelKind::Shallow => {
                let names = (0..self.spec.shallow_layers)
                    .map(|j| format!("layer{:02}", j))
                    .collect();
                let layers = gather(&mut b, names, self.spec.mlp_dropout)?;
                let c = mlp_block(b.tape, c0, &layers, ctx.train, rng)?;
                let v = b.tape.sum_rows(c);
                (c, v)
            }
            _ => {
                let pre_names = (0..self.spec.deep_pre_layers)
                    .map(|j| format!("pre{:02}", j))
                    .collect();
                let pre = gather(&mut b, pre_names, self.spec.mlp_dropout)?;
                let c = mlp_block(b.tape, c0, &pre, ctx.train, rng)?;
                let summed = b.tape.sum_rows(c);
                let post_names = (0..self.spec.deep_post_layers)
                    .map(|j| format!("post{:02}", j))
                    .collect();
                let post = gather(&mut b, post_names, self.spec.post_dropout)?;
                let v = mlp_block(b.tape, summed, &post, ctx.train, rng)?;
                (c, v)
            }
        };
        Ok(ModelOutput {
            c,
            v,
            attentions: Vec::new(),
            reg_loss: None,
            params: b.bindings(),
        })
    }
}

fn check_row_stochastic(t: &Tensor, n: usize) -> Result<()> {
    if t.shape() != (n, n) {
        return Err(Error::Shape {
            op: "propagation_matrix",
            detail: format!("{:?} vs {} nodes", t.shape(), n),
        });
    }
    for i in 0..n {
        let sum: f64 = t.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "propagation matrix row {} sums to {}, expected 1",
                i, sum
            )));
        }
    }
    Ok(())
}

fn check_prior_mask_consistent(prior: &Tensor, mask: &Tensor) -> Result<()> {
    for i in 0..prior.rows() {
        for j in 0..prior.cols() {
            if mask.get(i, j) == MASK_BLOCKED && prior.get(i, j) != 0.0 {
                return Err(Error::Contract(format!(
                    "prior has mass {} at masked cell ({}, {})",
                    prior.get(i, j),
                    i,
                    j
                )));
            }
        }
    }
    Ok(())
}
