//! CNN encoder with label-wise attention and multi-graph label classifiers.
//!
//! For a document with positional features `F` (n×u) and label embeddings
//! `V` (L×d) the network computes
//!
//! ```text
//! A    = softmax_rows(V · tanh(F W0 + b0)ᵀ)     L×n   attention per label
//! Z    = A · F                                  L×u
//! H²_k = ReLU(Â_k · ReLU(Â_k V W1_k) · W2_k)    per active graph k
//! Ṽ    = [H²_g | H²_s | H²_c] · W3              L×q̃
//! V̄    = [V | Ṽ]                                L×(d+q̃)
//! ŷ_l  = σ( ReLU(W4 z_l + b4) · v̄_l )
//! ```
//!
//! `V` and the word embeddings are frozen; only the matrices in
//! [`KamgModel::params`] are trained.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::labelgraphs::{merge_all, normalize, GraphKind, LabelGraph, NormalizedGraph};
use crate::numerics::{glorot_uniform_init, Matrix, NodeId, ParamId, ParamStore, Rng, Tape};
use crate::textpipe::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// One GCN per graph, outputs concatenated and projected.
    PostGcn,
    /// Graphs merged into one adjacency feeding a single GCN.
    PreGcnMerge,
    /// No graph branch; classifiers are the label embeddings alone.
    None,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::PostGcn => "post",
            FusionMode::PreGcnMerge => "pre",
            FusionMode::None => "none",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "post" | "post-gcn" => Ok(FusionMode::PostGcn),
            "pre" | "pre-gcn-merge" => Ok(FusionMode::PreGcnMerge),
            "none" => Ok(FusionMode::None),
            other => Err(Error::Input(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Parses a graph list such as `g,s,c` or `gs` into canonical order.
pub fn parse_graph_set(s: &str) -> Result<Vec<GraphKind>> {
    let mut kinds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if part.len() > 1 && part.chars().all(|c| "gsc".contains(c)) {
            for c in part.chars() {
                kinds.push(c.to_string().parse()?);
            }
        } else {
            kinds.push(part.parse()?);
        }
    }
    canonical_graphs(&kinds)
}

fn canonical_graphs(kinds: &[GraphKind]) -> Result<Vec<GraphKind>> {
    let mut out = kinds.to_vec();
    if out.contains(&GraphKind::Merged) {
        return Err(Error::Input(
            "merged graphs are built internally; pick from g, s, c".into(),
        ));
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn graph_set_label(kinds: &[GraphKind]) -> String {
    kinds.iter().map(|k| k.letter()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Label and word embedding dimension `d`.
    pub embed_dim: usize,
    /// Number of CNN filters `u`.
    pub filters: usize,
    /// CNN kernel width `s`.
    pub kernel: usize,
    /// GCN hidden size `q`.
    pub gcn_hidden: usize,
    /// GCN output size `p`.
    pub gcn_out: usize,
    /// Fused label-embedding size `q̃`.
    pub fusion_dim: usize,
    pub graphs: Vec<GraphKind>,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 200,
            filters: 200,
            kernel: 10,
            gcn_hidden: 200,
            gcn_out: 200,
            fusion_dim: 200,
            graphs: vec![GraphKind::Hierarchy, GraphKind::Similarity, GraphKind::Cooccurrence],
            fusion: FusionMode::PostGcn,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("filters", self.filters),
            ("kernel", self.kernel),
            ("gcn_hidden", self.gcn_hidden),
            ("gcn_out", self.gcn_out),
            ("fusion_dim", self.fusion_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if canonical_graphs(&self.graphs)? != self.graphs {
            return Err(Error::Config(format!(
                "graph list {:?} must be distinct and ordered g, s, c",
                self.graphs
            )));
        }
        if self.fusion != FusionMode::None && self.graphs.is_empty() {
            return Err(Error::Config("graph fusion needs at least one graph".into()));
        }
        Ok(())
    }

    /// Number of GCN branches the parameter set carries.
    pub fn branch_count(&self) -> usize {
        match self.fusion {
            FusionMode::PostGcn => self.graphs.len(),
            FusionMode::PreGcnMerge => 1,
            FusionMode::None => 0,
        }
    }

    /// Width of the final label classifiers `v̄`.
    pub fn classifier_dim(&self) -> usize {
        match self.fusion {
            FusionMode::None => self.embed_dim,
            _ => self.embed_dim + self.fusion_dim,
        }
    }

    pub fn tag(&self) -> String {
        match self.fusion {
            FusionMode::None => "none".to_string(),
            f => format!("{}:{}", graph_set_label(&self.graphs), f),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct GcnIds {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    conv_w: ParamId,
    conv_b: ParamId,
    w0: ParamId,
    b0: ParamId,
    gcn: Vec<GcnIds>,
    w3: Option<ParamId>,
    w4: ParamId,
    b4: ParamId,
}

/// Frozen label-side inputs: label embeddings and the normalized graphs the
/// GCN branches run on, in branch order.
#[derive(Clone, Debug)]
pub struct LabelContext {
    embeddings: Matrix,
    branches: Vec<NormalizedGraph>,
    /// `Â_k V`, reused by every forward pass.
    propagated: Vec<Matrix>,
}

impl LabelContext {
    /// Picks the graphs `config` asks for out of `graphs` (any order) and
    /// prepares them for the configured fusion mode.
    pub fn new(config: &ModelConfig, label_embeddings: Matrix, graphs: &[LabelGraph]) -> Result<Self> {
        config.validate()?;
        let l = label_embeddings.rows();
        if label_embeddings.cols() != config.embed_dim {
            return Err(dim_err!(
                "label embeddings have dim {}, model expects {}",
                label_embeddings.cols(),
                config.embed_dim
            ));
        }
        let pick = |kind: GraphKind| -> Result<&LabelGraph> {
            graphs
                .iter()
                .find(|g| g.kind() == kind)
                .ok_or_else(|| Error::Input(format!("{kind} graph required but not supplied")))
        };
        let selected: Vec<&LabelGraph> = config
            .graphs
            .iter()
            .map(|&k| pick(k))
            .collect::<Result<_>>()?;
        if let Some(g) = selected.iter().find(|g| g.len() != l) {
            return Err(dim_err!("{} graph covers {} labels, catalog has {l}", g.kind(), g.len()));
        }
        let branches = match config.fusion {
            FusionMode::None => Vec::new(),
            FusionMode::PostGcn => selected.iter().map(|g| normalize(g)).collect::<Result<_>>()?,
            FusionMode::PreGcnMerge => {
                let merged = if selected.len() == 1 {
                    selected[0].clone()
                } else {
                    merge_all(&selected)?
                };
                vec![normalize(&merged)?]
            }
        };
        Self::from_normalized(label_embeddings, branches)
    }

    pub fn from_normalized(label_embeddings: Matrix, branches: Vec<NormalizedGraph>) -> Result<Self> {
        let propagated = branches
            .iter()
            .map(|b| b.matrix().matmul(&label_embeddings))
            .collect::<Result<_>>()?;
        Ok(LabelContext {
            embeddings: label_embeddings,
            branches,
            propagated,
        })
    }

    pub fn label_count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn branches(&self) -> &[NormalizedGraph] {
        &self.branches
    }
}

/// Embeds tokens, optionally drops embedding entries, and returns the
/// same-padded convolution input: row `t` stacks the embeddings at positions
/// `t - (s-1)/2 ..= t + s/2` (zeros beyond the document).
pub fn conv_windows(
    tokens: &[usize],
    embeddings: &EmbeddingTable,
    kernel: usize,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Matrix> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot encode an empty document".into()));
    }
    let d = embeddings.dim();
    let n = tokens.len();
    let mut embedded = Matrix::zeros(n, d);
    for (t, &id) in tokens.iter().enumerate() {
        if id >= embeddings.len() {
            return Err(Error::Input(format!("token id {id} outside embedding table")));
        }
        embedded.row_mut(t).copy_from_slice(embeddings.row(id));
    }
    if let Some((keep, rng)) = dropout {
        if keep < 1.0 {
            for v in embedded.data_mut() {
                *v = if rng.bernoulli(keep) { *v / keep } else { 0.0 };
            }
        }
    }
    let left = (kernel - 1) / 2;
    let mut windows = Matrix::zeros(n, kernel * d);
    for t in 0..n {
        let row = windows.row_mut(t);
        for k in 0..kernel {
            let pos = t as isize + k as isize - left as isize;
            if pos >= 0 && (pos as usize) < n {
                row[k * d..(k + 1) * d].copy_from_slice(embedded.row(pos as usize));
            }
        }
    }
    Ok(windows)
}

/// `F = tanh(X · W_conv + b_conv)`, one row per token position.
pub fn encode_windows(tape: &mut Tape, windows: Matrix, conv_w: NodeId, conv_b: NodeId) -> Result<NodeId> {
    let x = tape.constant(windows);
    let h = tape.matmul(x, conv_w)?;
    let h = tape.add_row(h, conv_b)?;
    tape.tanh(h)
}

/// Label-wise attention for every label at once. Returns the attention
/// matrix (L×n, rows sum to one) and the attended features `Z` (L×u).
pub fn label_attention(
    tape: &mut Tape,
    features: NodeId,
    labels: NodeId,
    w0: NodeId,
    b0: NodeId,
) -> Result<(NodeId, NodeId)> {
    let proj = tape.matmul(features, w0)?;
    let proj = tape.add_row(proj, b0)?;
    let proj = tape.tanh(proj)?;
    let scores = tape.matmul_nt(labels, proj)?;
    let attn = tape.softmax_rows(scores)?;
    let z = tape.matmul(attn, features)?;
    Ok((attn, z))
}

/// Two-layer GCN without biases: `ReLU(Â · ReLU(Â V W1) · W2)`.
/// `propagated` is the precomputed `Â V`.
pub fn gcn_forward(tape: &mut Tape, adj: NodeId, propagated: NodeId, w1: NodeId, w2: NodeId) -> Result<NodeId> {
    let h1 = tape.matmul(propagated, w1)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.matmul(adj, h1)?;
    let h2 = tape.matmul(h2, w2)?;
    tape.relu(h2)
}

/// Row-wise concatenation of the per-graph outputs followed by `W3`.
pub fn fuse(tape: &mut Tape, outputs: &[NodeId], w3: NodeId) -> Result<NodeId> {
    if outputs.is_empty() {
        return Err(dim_err!("fusion needs at least one graph output"));
    }
    let cat = tape.concat_cols(outputs)?;
    tape.matmul(cat, w3)
}

/// `σ(ReLU(Z W4ᵀ + b4) · v̄_l)` for every label row; returns L×1 probabilities.
pub fn classify(tape: &mut Tape, z: NodeId, classifiers: NodeId, w4: NodeId, b4: NodeId) -> Result<NodeId> {
    let proj = tape.matmul_nt(z, w4)?;
    let proj = tape.add_row(proj, b4)?;
    let proj = tape.relu(proj)?;
    let logits = tape.row_dot(proj, classifiers)?;
    tape.sigmoid(logits)
}

/// Mean multi-label binary cross-entropy of `probs` (L×1) against `gold`.
pub fn bce_loss(tape: &mut Tape, probs: NodeId, gold: &[usize], labels: usize) -> Result<NodeId> {
    let rows = tape.value(probs).rows();
    if rows != labels {
        return Err(dim_err!("{rows} predictions for {labels} labels"));
    }
    let mut y = Matrix::zeros(labels, 1);
    for &g in gold {
        if g >= labels {
            return Err(Error::Input(format!("gold label {g} outside {labels} labels")));
        }
        y.set(g, 0, 1.0);
    }
    tape.bce(probs, y)
}

/// Dropout applied to embedded tokens during training.
pub struct DropoutCtx<'a> {
    pub keep: f64,
    pub rng: &'a mut Rng,
}

#[derive(Clone, Debug)]
pub struct KamgModel {
    config: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
}

impl KamgModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            embed_dim: d,
            filters: u,
            kernel: s,
            gcn_hidden: q,
            gcn_out: p,
            fusion_dim: qt,
            ..
        } = config;
        let mut params = ParamStore::new();
        let conv_w = params.add("conv.w", glorot_uniform_init(s * d, u, rng)?)?;
        let conv_b = params.add("conv.b", Matrix::zeros(1, u))?;
        let w0 = params.add("attn.w0", glorot_uniform_init(u, d, rng)?)?;
        let b0 = params.add("attn.b0", Matrix::zeros(1, d))?;
        let branch_names: Vec<String> = match config.fusion {
            FusionMode::PostGcn => config.graphs.iter().map(|k| k.letter().to_string()).collect(),
            FusionMode::PreGcnMerge => vec!["merged".to_string()],
            FusionMode::None => Vec::new(),
        };
        let mut gcn = Vec::new();
        for name in &branch_names {
            let w1 = params.add(format!("gcn.{name}.w1"), glorot_uniform_init(d, q, rng)?)?;
            let w2 = params.add(format!("gcn.{name}.w2"), glorot_uniform_init(q, p, rng)?)?;
            gcn.push(GcnIds { w1, w2 });
        }
        let w3 = if gcn.is_empty() {
            None
        } else {
            Some(params.add("fuse.w3", glorot_uniform_init(gcn.len() * p, qt, rng)?)?)
        };
        let cd = config.classifier_dim();
        let w4 = params.add("proj.w4", glorot_uniform_init(cd, u, rng)?)?;
        let b4 = params.add("proj.b4", Matrix::zeros(1, cd))?;
        Ok(KamgModel {
            config,
            params,
            ids: ParamIds {
                conv_w,
                conv_b,
                w0,
                b0,
                gcn,
                w3,
                w4,
                b4,
            },
        })
    }

    /// Rebuilds a model around an existing parameter set, checking that its
    /// names and shapes match what `config` would create.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut probe = KamgModel::new(config, &mut Rng::new(0))?;
        if !probe.params.same_layout(&params) {
            return Err(Error::Integrity(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        probe.params = params;
        Ok(probe)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::Integrity("parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Ids of the GCN and fusion parameters (the `ṽ` path).
    pub fn graph_path_params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.ids.gcn.iter().flat_map(|g| [g.w1, g.w2]).collect();
        ids.extend(self.ids.w3);
        ids
    }

    fn check_context(&self, ctx: &LabelContext) -> Result<()> {
        if ctx.branches.len() != self.ids.gcn.len() {
            return Err(Error::Config(format!(
                "model has {} graph branches, label context {}",
                self.ids.gcn.len(),
                ctx.branches.len()
            )));
        }
        if ctx.embeddings.cols() != self.config.embed_dim {
            return Err(dim_err!(
                "label embeddings dim {} vs model {}",
                ctx.embeddings.cols(),
                self.config.embed_dim
            ));
        }
        Ok(())
    }

    /// Final label classifiers `V̄ = [V | Ṽ]` on the tape (L×(d+q̃)).
    pub fn label_classifiers(&self, tape: &mut Tape, ctx: &LabelContext) -> Result<NodeId> {
        self.check_context(ctx)?;
        let v = tape.constant(ctx.embeddings.clone());
        let Some(w3) = self.ids.w3 else {
            return Ok(v);
        };
        let mut outputs = Vec::with_capacity(self.ids.gcn.len());
        for ((ids, graph), prop) in self.ids.gcn.iter().zip(&ctx.branches).zip(&ctx.propagated) {
            let adj = tape.constant(graph.matrix().clone());
            let prop = tape.constant(prop.clone());
            let w1 = tape.param(&self.params, ids.w1);
            let w2 = tape.param(&self.params, ids.w2);
            outputs.push(gcn_forward(tape, adj, prop, w1, w2)?);
        }
        let w3 = tape.param(&self.params, w3);
        let fused = fuse(tape, &outputs, w3)?;
        tape.concat_cols(&[v, fused])
    }

    pub fn encode_document(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        embeddings: &EmbeddingTable,
        dropout: Option<DropoutCtx<'_>>,
    ) -> Result<NodeId> {
        if embeddings.dim() != self.config.embed_dim {
            return Err(dim_err!(
                "word embeddings dim {} vs model {}",
                embeddings.dim(),
                self.config.embed_dim
            ));
        }
        let windows = conv_windows(
            tokens,
            embeddings,
            self.config.kernel,
            dropout.map(|d| (d.keep, d.rng)),
        )?;
        let w = tape.param(&self.params, self.ids.conv_w);
        let b = tape.param(&self.params, self.ids.conv_b);
        encode_windows(tape, windows, w, b)
    }

    /// Per-label probabilities for one document, given classifiers already on
    /// the tape.
    pub fn document_probs(
        &self,
        tape: &mut Tape,
        ctx: &LabelContext,
        classifiers: NodeId,
        tokens: &[usize],
        embeddings: &EmbeddingTable,
        dropout: Option<DropoutCtx<'_>>,
    ) -> Result<NodeId> {
        let f = self.encode_document(tape, tokens, embeddings, dropout)?;
        let labels = tape.constant(ctx.embeddings.clone());
        let w0 = tape.param(&self.params, self.ids.w0);
        let b0 = tape.param(&self.params, self.ids.b0);
        let (_, z) = label_attention(tape, f, labels, w0, b0)?;
        let w4 = tape.param(&self.params, self.ids.w4);
        let b4 = tape.param(&self.params, self.ids.b4);
        classify(tape, z, classifiers, w4, b4)
    }

    /// Mean over documents of the per-document label-averaged BCE.
    pub fn batch_loss<'a, I>(
        &self,
        tape: &mut Tape,
        ctx: &LabelContext,
        embeddings: &EmbeddingTable,
        docs: I,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> Result<NodeId>
    where
        I: IntoIterator<Item = (&'a [usize], &'a [usize])>,
    {
        let classifiers = self.label_classifiers(tape, ctx)?;
        let mut total: Option<NodeId> = None;
        let mut count = 0usize;
        for (tokens, gold) in docs {
            let dctx = dropout.as_mut().map(|(keep, rng)| DropoutCtx {
                keep: *keep,
                rng: &mut **rng,
            });
            let probs = self.document_probs(tape, ctx, classifiers, tokens, embeddings, dctx)?;
            let loss = bce_loss(tape, probs, gold, ctx.label_count())?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
            count += 1;
        }
        let total = total.ok_or_else(|| Error::Input("empty batch".into()))?;
        tape.scale(total, 1.0 / count as f64)
    }

    /// Classifier matrix `V̄` as plain values, for inference.
    pub fn classifier_values(&self, ctx: &LabelContext) -> Result<Matrix> {
        let mut tape = Tape::new();
        let c = self.label_classifiers(&mut tape, ctx)?;
        Ok(tape.value(c).clone())
    }

    /// Inference-mode scores (no dropout) for every label.
    pub fn predict_with(&self, ctx: &LabelContext, classifiers: &Matrix, tokens: &[usize], embeddings: &EmbeddingTable) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let c = tape.constant(classifiers.clone());
        let probs = self.document_probs(&mut tape, ctx, c, tokens, embeddings, None)?;
        Ok(tape.value(probs).data().to_vec())
    }

    pub fn predict(&self, ctx: &LabelContext, tokens: &[usize], embeddings: &EmbeddingTable) -> Result<Vec<f64>> {
        let classifiers = self.classifier_values(ctx)?;
        self.predict_with(ctx, &classifiers, tokens, embeddings)
    }

    /// Scores for many documents, sharing one classifier computation.
    pub fn predict_many<'a, I>(&self, ctx: &LabelContext, embeddings: &EmbeddingTable, docs: I) -> Result<Vec<Vec<f64>>>
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let classifiers = self.classifier_values(ctx)?;
        docs.into_iter()
            .map(|tokens| self.predict_with(ctx, &classifiers, tokens, embeddings))
            .collect()
    }
}
