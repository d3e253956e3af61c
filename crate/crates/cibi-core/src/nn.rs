//! Tape-based reverse-mode differentiation over a small answering network.
//!
//! The network is deliberately compact: bag-of-tokens question embedding,
//! one projection per modality, multiplicative fusion, a linear answer head,
//! and an optional question-only branch of three linear layers capped by a
//! sigmoid. All arithmetic is f64 and every random draw comes from a named
//! stream, so runs are reproducible to the bit.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rngutil::stream;

const PARAM_MAGIC: &[u8; 8] = b"CIBIPAR1";

/// Dense affine map `y = W x + b` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Affine {
    fn init(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let bound = 1.0 / (cols as f64).sqrt();
        let w = (0..rows * cols)
            .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
            .collect();
        Affine {
            rows,
            cols,
            w,
            b: vec![0.0; rows],
        }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        Affine {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.clone();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            y[r] += row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_tokens: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub image_dim: usize,
    pub n_answers: usize,
}

/// Addresses of the trainable tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Embed,
    QProjW,
    QProjB,
    VProjW,
    VProjB,
    FuseW,
    FuseB,
    HeadW,
    HeadB,
    QaW(usize),
    QaB(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub dims: ModelDims,
    /// Token embedding table, `n_tokens x d_embed` row-major.
    pub embed: Vec<f64>,
    pub q_proj: Affine,
    pub v_proj: Affine,
    pub fuse: Affine,
    pub head: Affine,
    /// Question-only branch; empty once the branch has been dropped.
    pub qa: Vec<Affine>,
}

impl ParameterStore {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let embed_bound = 1.0 / (dims.d_embed as f64).sqrt();
        let mut er = stream(seed, "init/embed", 0);
        let embed = (0..dims.n_tokens * dims.d_embed)
            .map(|_| er.gen::<f64>() * 2.0 * embed_bound - embed_bound)
            .collect();
        ParameterStore {
            dims,
            embed,
            q_proj: Affine::init(
                dims.d_hidden,
                dims.d_embed,
                &mut stream(seed, "init/q_proj", 0),
            ),
            v_proj: Affine::init(
                dims.d_hidden,
                dims.image_dim,
                &mut stream(seed, "init/v_proj", 0),
            ),
            fuse: Affine::init(
                dims.d_hidden,
                dims.d_hidden,
                &mut stream(seed, "init/fuse", 0),
            ),
            head: Affine::init(
                dims.n_answers,
                dims.d_hidden,
                &mut stream(seed, "init/head", 0),
            ),
            qa: vec![
                Affine::init(
                    dims.d_hidden,
                    dims.d_embed,
                    &mut stream(seed, "init/qa0", 0),
                ),
                Affine::init(
                    dims.d_hidden,
                    dims.d_hidden,
                    &mut stream(seed, "init/qa1", 0),
                ),
                Affine::init(
                    dims.n_answers,
                    dims.d_hidden,
                    &mut stream(seed, "init/qa2", 0),
                ),
            ],
        }
    }

    pub fn has_question_only_branch(&self) -> bool {
        !self.qa.is_empty()
    }

    /// Remove the question-only branch. Deployed models never carry it.
    pub fn drop_question_only_branch(&mut self) {
        self.qa.clear();
    }

    pub fn get(&self, r: ParamRef) -> &[f64] {
        match r {
            ParamRef::Embed => &self.embed,
            ParamRef::QProjW => &self.q_proj.w,
            ParamRef::QProjB => &self.q_proj.b,
            ParamRef::VProjW => &self.v_proj.w,
            ParamRef::VProjB => &self.v_proj.b,
            ParamRef::FuseW => &self.fuse.w,
            ParamRef::FuseB => &self.fuse.b,
            ParamRef::HeadW => &self.head.w,
            ParamRef::HeadB => &self.head.b,
            ParamRef::QaW(i) => &self.qa[i].w,
            ParamRef::QaB(i) => &self.qa[i].b,
        }
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut [f64] {
        match r {
            ParamRef::Embed => &mut self.embed,
            ParamRef::QProjW => &mut self.q_proj.w,
            ParamRef::QProjB => &mut self.q_proj.b,
            ParamRef::VProjW => &mut self.v_proj.w,
            ParamRef::VProjB => &mut self.v_proj.b,
            ParamRef::FuseW => &mut self.fuse.w,
            ParamRef::FuseB => &mut self.fuse.b,
            ParamRef::HeadW => &mut self.head.w,
            ParamRef::HeadB => &mut self.head.b,
            ParamRef::QaW(i) => &mut self.qa[i].w,
            ParamRef::QaB(i) => &mut self.qa[i].b,
        }
    }

    /// Live parameter addresses in flattening order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = vec![
            ParamRef::Embed,
            ParamRef::QProjW,
            ParamRef::QProjB,
            ParamRef::VProjW,
            ParamRef::VProjB,
            ParamRef::FuseW,
            ParamRef::FuseB,
            ParamRef::HeadW,
            ParamRef::HeadB,
        ];
        for i in 0..self.qa.len() {
            refs.push(ParamRef::QaW(i));
            refs.push(ParamRef::QaB(i));
        }
        refs
    }

    pub fn param_count(&self) -> usize {
        self.param_refs().iter().map(|&r| self.get(r).len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for r in self.param_refs() {
            out.extend_from_slice(self.get(r));
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                what: "flat parameter vector".into(),
                expected: self.param_count(),
                found: flat.len(),
            });
        }
        let mut off = 0;
        for r in self.param_refs() {
            let dst = self.get_mut(r);
            let n = dst.len();
            dst.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Mean of the embedding rows for `tokens`.
    pub fn question_embedding(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput {
                what: "token sequence".into(),
            });
        }
        let d = self.dims.d_embed;
        let mut e = vec![0.0; d];
        for &t in tokens {
            if t >= self.dims.n_tokens {
                return Err(Error::Shape {
                    what: "token id".into(),
                    expected: self.dims.n_tokens,
                    found: t,
                });
            }
            for (ei, &x) in e.iter_mut().zip(&self.embed[t * d..(t + 1) * d]) {
                *ei += x;
            }
        }
        let inv = 1.0 / tokens.len() as f64;
        for ei in &mut e {
            *ei *= inv;
        }
        Ok(e)
    }

    /// Fused multimodal embedding `h = tanh(W_f (q ⊙ v) + b_f)`.
    pub fn fused_embedding(&self, tokens: &[usize], image: &[f64]) -> Result<Vec<f64>> {
        if image.len() != self.dims.image_dim {
            return Err(Error::Shape {
                what: "image vector".into(),
                expected: self.dims.image_dim,
                found: image.len(),
            });
        }
        let e = self.question_embedding(tokens)?;
        let q: Vec<f64> = self.q_proj.apply(&e).iter().map(|x| x.tanh()).collect();
        let v: Vec<f64> = self.v_proj.apply(image).iter().map(|x| x.tanh()).collect();
        let prod: Vec<f64> = q.iter().zip(&v).map(|(a, b)| a * b).collect();
        Ok(self.fuse.apply(&prod).iter().map(|x| x.tanh()).collect())
    }

    /// Raw answer logits of the fused model.
    pub fn vqa_logits(&self, tokens: &[usize], image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.head.apply(&self.fused_embedding(tokens, image)?))
    }

    /// Question-only scores: three affine layers with tanh between them,
    /// squashed to (0,1) by a terminal sigmoid.
    pub fn qa_scores(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if self.qa.len() != 3 {
            return Err(Error::state("question-only branch is not present"));
        }
        let e = self.question_embedding(tokens)?;
        let h0: Vec<f64> = self.qa[0].apply(&e).iter().map(|x| x.tanh()).collect();
        let h1: Vec<f64> = self.qa[1].apply(&h0).iter().map(|x| x.tanh()).collect();
        Ok(self.qa[2].apply(&h1).iter().map(|x| sigmoid(*x)).collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        for v in [
            self.dims.n_tokens,
            self.dims.d_embed,
            self.dims.d_hidden,
            self.dims.image_dim,
            self.dims.n_answers,
            self.qa.len(),
        ] {
            write_u64(w, v as u64)?;
        }
        for r in self.param_refs() {
            write_f64s(w, self.get(r))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PARAM_MAGIC {
            return Err(Error::Compatibility {
                message: "not a parameter blob".into(),
            });
        }
        let n_tokens = read_u64(r)? as usize;
        let d_embed = read_u64(r)? as usize;
        let d_hidden = read_u64(r)? as usize;
        let image_dim = read_u64(r)? as usize;
        let n_answers = read_u64(r)? as usize;
        let n_qa = read_u64(r)? as usize;
        if n_qa != 0 && n_qa != 3 {
            return Err(Error::Compatibility {
                message: format!("question-only branch must have 0 or 3 layers, found {n_qa}"),
            });
        }
        let dims = ModelDims {
            n_tokens,
            d_embed,
            d_hidden,
            image_dim,
            n_answers,
        };
        let mut p = ParameterStore {
            dims,
            embed: vec![0.0; n_tokens * d_embed],
            q_proj: Affine::zeros(d_hidden, d_embed),
            v_proj: Affine::zeros(d_hidden, image_dim),
            fuse: Affine::zeros(d_hidden, d_hidden),
            head: Affine::zeros(n_answers, d_hidden),
            qa: if n_qa == 3 {
                vec![
                    Affine::zeros(d_hidden, d_embed),
                    Affine::zeros(d_hidden, d_hidden),
                    Affine::zeros(n_answers, d_hidden),
                ]
            } else {
                Vec::new()
            },
        };
        for r_ref in p.param_refs() {
            let n = p.get(r_ref).len();
            let data = read_f64s(r, n)?;
            p.get_mut(r_ref).copy_from_slice(&data);
        }
        Ok(p)
    }
}

/// Gradient accumulator shaped like a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    pub dims: ModelDims,
    pub embed: Vec<f64>,
    pub q_proj: Affine,
    pub v_proj: Affine,
    pub fuse: Affine,
    pub head: Affine,
    pub qa: Vec<Affine>,
}

impl GradStore {
    pub fn zeros_like(p: &ParameterStore) -> Self {
        GradStore {
            dims: p.dims,
            embed: vec![0.0; p.embed.len()],
            q_proj: Affine::zeros(p.q_proj.rows, p.q_proj.cols),
            v_proj: Affine::zeros(p.v_proj.rows, p.v_proj.cols),
            fuse: Affine::zeros(p.fuse.rows, p.fuse.cols),
            head: Affine::zeros(p.head.rows, p.head.cols),
            qa: p.qa.iter().map(|a| Affine::zeros(a.rows, a.cols)).collect(),
        }
    }

    pub fn get(&self, r: ParamRef) -> &[f64] {
        match r {
            ParamRef::Embed => &self.embed,
            ParamRef::QProjW => &self.q_proj.w,
            ParamRef::QProjB => &self.q_proj.b,
            ParamRef::VProjW => &self.v_proj.w,
            ParamRef::VProjB => &self.v_proj.b,
            ParamRef::FuseW => &self.fuse.w,
            ParamRef::FuseB => &self.fuse.b,
            ParamRef::HeadW => &self.head.w,
            ParamRef::HeadB => &self.head.b,
            ParamRef::QaW(i) => &self.qa[i].w,
            ParamRef::QaB(i) => &self.qa[i].b,
        }
    }

    fn get_mut(&mut self, r: ParamRef) -> &mut [f64] {
        match r {
            ParamRef::Embed => &mut self.embed,
            ParamRef::QProjW => &mut self.q_proj.w,
            ParamRef::QProjB => &mut self.q_proj.b,
            ParamRef::VProjW => &mut self.v_proj.w,
            ParamRef::VProjB => &mut self.v_proj.b,
            ParamRef::FuseW => &mut self.fuse.w,
            ParamRef::FuseB => &mut self.fuse.b,
            ParamRef::HeadW => &mut self.head.w,
            ParamRef::HeadB => &mut self.head.b,
            ParamRef::QaW(i) => &mut self.qa[i].w,
            ParamRef::QaB(i) => &mut self.qa[i].b,
        }
    }

    pub fn flatten(&self, order: &[ParamRef]) -> Vec<f64> {
        let mut out = Vec::new();
        for &r in order {
            out.extend_from_slice(self.get(r));
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for r in [
            ParamRef::Embed,
            ParamRef::QProjW,
            ParamRef::QProjB,
            ParamRef::VProjW,
            ParamRef::VProjB,
            ParamRef::FuseW,
            ParamRef::FuseB,
            ParamRef::HeadW,
            ParamRef::HeadB,
        ] {
            for g in self.get_mut(r) {
                *g *= s;
            }
        }
        for i in 0..self.qa.len() {
            for g in self.get_mut(ParamRef::QaW(i)) {
                *g *= s;
            }
            for g in self.get_mut(ParamRef::QaB(i)) {
                *g *= s;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` computed as `-softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_vec(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    EmbedMean { tokens: Vec<usize> },
    AffineOp { w: ParamRef, b: ParamRef, x: NodeId },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Hadamard(NodeId, NodeId),
    Sub(NodeId, NodeId),
    LogSigmoid(NodeId),
    CeLogits { x: NodeId, target: usize },
    CosSim(NodeId, NodeId),
    Stack(Vec<NodeId>),
    LogSumExp(NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
    Detach,
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Eager computation graph. Values are computed on push; `backward`
/// accumulates parameter gradients into a [`GradStore`].
pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, values: &[f64]) -> NodeId {
        self.push(Op::Leaf, values.to_vec())
    }

    pub fn embed_mean(&mut self, tokens: &[usize]) -> Result<NodeId> {
        let value = self.params.question_embedding(tokens)?;
        Ok(self.push(
            Op::EmbedMean {
                tokens: tokens.to_vec(),
            },
            value,
        ))
    }

    pub fn affine(&mut self, w: ParamRef, b: ParamRef, x: NodeId) -> NodeId {
        let wv = self.params.get(w);
        let bv = self.params.get(b);
        let xv = &self.nodes[x.0].value;
        let rows = bv.len();
        let cols = xv.len();
        debug_assert_eq!(wv.len(), rows * cols);
        let mut y = bv.to_vec();
        for r in 0..rows {
            y[r] += wv[r * cols..(r + 1) * cols]
                .iter()
                .zip(xv)
                .map(|(w, x)| w * x)
                .sum::<f64>();
        }
        self.push(Op::AffineOp { w, b, x }, y)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), y)
    }

    pub fn sigmoid_node(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| sigmoid(*v)).collect();
        self.push(Op::Sigmoid(x), y)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(a, b)| a * b)
            .collect();
        self.push(Op::Hadamard(a, b), y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(a, b)| a - b)
            .collect();
        self.push(Op::Sub(a, b), y)
    }

    pub fn log_sigmoid_node(&mut self, x: NodeId) -> NodeId {
        let y: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|v| log_sigmoid(*v))
            .collect();
        self.push(Op::LogSigmoid(x), y)
    }

    pub fn ce_logits(&mut self, x: NodeId, target: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if target >= xv.len() {
            return Err(Error::AnswerOutOfRange {
                index: target,
                count: xv.len(),
            });
        }
        let y = log_sum_exp(xv) - xv[target];
        Ok(self.push(Op::CeLogits { x, target }, vec![y]))
    }

    pub fn cos_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return Err(Error::DegenerateSimilarity);
        }
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::CosSim(a, b), vec![dot / (na * nb)]))
    }

    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        let mut y = Vec::new();
        for p in parts {
            y.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(Op::Stack(parts.to_vec()), y)
    }

    pub fn log_sum_exp_node(&mut self, x: NodeId) -> NodeId {
        let y = log_sum_exp(&self.nodes[x.0].value);
        self.push(Op::LogSumExp(x), vec![y])
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let len = self.nodes[terms[0].0 .0].value.len();
        let mut y = vec![0.0; len];
        for &(id, c) in terms {
            for (yi, v) in y.iter_mut().zip(&self.nodes[id.0].value) {
                *yi += c * v;
            }
        }
        self.push(Op::WeightedSum(terms.to_vec()), y)
    }

    /// Value passes through; gradients do not.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.clone();
        self.push(Op::Detach, y)
    }

    /// Contrastive loss for one anchor. `batch` holds the fused embeddings
    /// of every original sample in the batch, anchor included: they form the
    /// denominator. Positives enter only the numerator.
    pub fn info_nce(
        &mut self,
        anchor: NodeId,
        positives: &[NodeId],
        batch: &[NodeId],
        tau: f64,
    ) -> Result<NodeId> {
        if batch.len() < 2 {
            return Err(Error::InsufficientNegatives { batch: batch.len() });
        }
        if positives.is_empty() {
            return Err(Error::EmptyInput {
                what: "positive set".into(),
            });
        }
        let inv_tau = 1.0 / tau;
        let mut denom_sims = Vec::with_capacity(batch.len());
        for &b in batch {
            let s = self.cos_sim(anchor, b)?;
            denom_sims.push(s);
        }
        let stacked = self.stack(&denom_sims);
        let scaled = self.weighted_sum(&[(stacked, inv_tau)]);
        let lse = self.log_sum_exp_node(scaled);
        let mut terms = vec![(lse, 1.0)];
        let w = -inv_tau / positives.len() as f64;
        for &p in positives {
            let s = self.cos_sim(anchor, p)?;
            terms.push((s, w));
        }
        Ok(self.weighted_sum(&terms))
    }

    /// Reverse sweep from a scalar root, accumulating into `grads`.
    pub fn backward(&self, root: NodeId, grads: &mut GradStore) {
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        debug_assert_eq!(self.nodes[root.0].value.len(), 1);
        adj[root.0][0] = 1.0;
        for id in (0..=root.0).rev() {
            let g = std::mem::take(&mut adj[id]);
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf | Op::Detach => {}
                Op::EmbedMean { tokens } => {
                    let d = self.params.dims.d_embed;
                    let inv = 1.0 / tokens.len() as f64;
                    for &t in tokens {
                        let row = &mut grads.embed[t * d..(t + 1) * d];
                        for (r, gi) in row.iter_mut().zip(&g) {
                            *r += gi * inv;
                        }
                    }
                }
                Op::AffineOp { w, b, x } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = self.params.get(*w);
                    let cols = xv.len();
                    {
                        let gw = grads.get_mut(*w);
                        for (r, gr) in g.iter().enumerate() {
                            for (c, xc) in xv.iter().enumerate() {
                                gw[r * cols + c] += gr * xc;
                            }
                        }
                    }
                    {
                        let gb = grads.get_mut(*b);
                        for (gbr, gr) in gb.iter_mut().zip(&g) {
                            *gbr += gr;
                        }
                    }
                    let dx = &mut adj[x.0];
                    for (r, gr) in g.iter().enumerate() {
                        for (c, dxc) in dx.iter_mut().enumerate() {
                            *dxc += wv[r * cols + c] * gr;
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[id].value;
                    for ((dx, gi), yi) in adj[x.0].iter_mut().zip(&g).zip(y) {
                        *dx += gi * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[id].value;
                    for ((dx, gi), yi) in adj[x.0].iter_mut().zip(&g).zip(y) {
                        *dx += gi * yi * (1.0 - yi);
                    }
                }
                Op::Hadamard(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for ((dx, gi), bi) in adj[a.0].iter_mut().zip(&g).zip(&bv) {
                        *dx += gi * bi;
                    }
                    for ((dx, gi), ai) in adj[b.0].iter_mut().zip(&g).zip(&av) {
                        *dx += gi * ai;
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    for (dx, gi) in adj[a.0].iter_mut().zip(&g) {
                        *dx += gi;
                    }
                    for (dx, gi) in adj[b.0].iter_mut().zip(&g) {
                        *dx -= gi;
                    }
                }
                Op::LogSigmoid(x) => {
                    let xv = &self.nodes[x.0].value;
                    for ((dx, gi), xi) in adj[x.0].iter_mut().zip(&g).zip(xv) {
                        *dx += gi * sigmoid(-xi);
                    }
                }
                Op::CeLogits { x, target } => {
                    let p = softmax_vec(&self.nodes[x.0].value);
                    let g0 = g[0];
                    for (i, (dx, pi)) in adj[x.0].iter_mut().zip(&p).enumerate() {
                        let delta = if i == *target { 1.0 } else { 0.0 };
                        *dx += g0 * (pi - delta);
                    }
                }
                Op::CosSim(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let c = self.nodes[id].value[0];
                    let g0 = g[0];
                    for ((dx, ai), bi) in adj[a.0].iter_mut().zip(&av).zip(&bv) {
                        *dx += g0 * (bi / (na * nb) - c * ai / (na * na));
                    }
                    for ((dx, bi), ai) in adj[b.0].iter_mut().zip(&bv).zip(&av) {
                        *dx += g0 * (ai / (na * nb) - c * bi / (nb * nb));
                    }
                }
                Op::Stack(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for (dx, gi) in adj[p.0].iter_mut().zip(&g[off..off + len]) {
                            *dx += gi;
                        }
                        off += len;
                    }
                }
                Op::LogSumExp(x) => {
                    let p = softmax_vec(&self.nodes[x.0].value);
                    let g0 = g[0];
                    for (dx, pi) in adj[x.0].iter_mut().zip(&p) {
                        *dx += g0 * pi;
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(t, c) in terms {
                        for (dx, gi) in adj[t.0].iter_mut().zip(&g) {
                            *dx += c * gi;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn write_u64<W: Write>(w: &mut W, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    write_u64(w, xs.len() as u64)?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, expect: usize) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    if n != expect {
        return Err(Error::Shape {
            what: "tensor payload".into(),
            expected: expect,
            found: n,
        });
    }
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

/// Relative error with a floored denominator, for gradient comparisons.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Central finite difference of `loss` along one parameter coordinate.
pub fn finite_difference<F: Fn(&ParameterStore) -> f64>(
    params: &mut ParameterStore,
    r: ParamRef,
    idx: usize,
    loss: &F,
) -> f64 {
    let orig = params.get(r)[idx];
    let h = 1e-5 * orig.abs().max(1.0);
    params.get_mut(r)[idx] = orig + h;
    let up = loss(params);
    params.get_mut(r)[idx] = orig - h;
    let down = loss(params);
    params.get_mut(r)[idx] = orig;
    (up - down) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ParameterStore {
        ParameterStore::init(
            ModelDims {
                n_tokens: 5,
                d_embed: 3,
                d_hidden: 4,
                image_dim: 4,
                n_answers: 3,
            },
            42,
        )
    }

    // A composite loss touching every differentiable op: fused CE, masked
    // branch CE, debiased CE, and a contrastive term.
    fn composite_loss(p: &ParameterStore) -> (f64, GradStore) {
        let mut tape = Tape::new(p);
        let image_a = vec![0.3, -0.2, 0.5, 0.1];
        let image_b = vec![-0.4, 0.8, 0.0, 0.2];

        let fused = |tape: &mut Tape, tokens: &[usize], image: &[f64]| {
            let e = tape.embed_mean(tokens).unwrap();
            let q_lin = tape.affine(ParamRef::QProjW, ParamRef::QProjB, e);
            let q = tape.tanh(q_lin);
            let img = tape.leaf(image);
            let v_lin = tape.affine(ParamRef::VProjW, ParamRef::VProjB, img);
            let v = tape.tanh(v_lin);
            let prod = tape.hadamard(q, v);
            let f_lin = tape.affine(ParamRef::FuseW, ParamRef::FuseB, prod);
            tape.tanh(f_lin)
        };

        let h_a = fused(&mut tape, &[0, 1, 2], &image_a);
        let h_b = fused(&mut tape, &[3, 4], &image_b);
        let h_pos = fused(&mut tape, &[0, 1, 4], &image_a);
        let logits = tape.affine(ParamRef::HeadW, ParamRef::HeadB, h_a);
        let ce = tape.ce_logits(logits, 1).unwrap();

        // No detach here: this composite checks raw gradient fidelity, and a
        // detach would deliberately diverge from the finite difference along
        // the embedding table. Blocking itself is covered separately.
        let e_mask = tape.embed_mean(&[2, 2, 1]).unwrap();
        let l0 = tape.affine(ParamRef::QaW(0), ParamRef::QaB(0), e_mask);
        let h0 = tape.tanh(l0);
        let l1 = tape.affine(ParamRef::QaW(1), ParamRef::QaB(1), h0);
        let h1 = tape.tanh(l1);
        let l2 = tape.affine(ParamRef::QaW(2), ParamRef::QaB(2), h1);
        let scores = tape.sigmoid_node(l2);
        let qa_ce = tape.ce_logits(scores, 0).unwrap();

        let diff = tape.sub(logits, scores);
        let fused_scores = tape.log_sigmoid_node(diff);
        let deb_ce = tape.ce_logits(fused_scores, 2).unwrap();

        let nce = tape.info_nce(h_a, &[h_pos], &[h_a, h_b], 0.5).unwrap();

        let total = tape.weighted_sum(&[(ce, 1.0), (qa_ce, 1.0), (deb_ce, 1.0), (nce, 0.4)]);
        let mut grads = GradStore::zeros_like(p);
        tape.backward(total, &mut grads);
        (tape.scalar(total), grads)
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut p = tiny();
        let (_, grads) = composite_loss(&p);
        let loss = |p: &ParameterStore| composite_loss(p).0;
        let mut worst = 0.0f64;
        for r in p.param_refs() {
            let n = p.get(r).len();
            for i in 0..n {
                let fd = finite_difference(&mut p, r, i, &loss);
                let err = relative_error(grads.get(r)[i], fd);
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn detach_blocks_gradients_into_the_embedding_path() {
        let p = tiny();
        let mut tape = Tape::new(&p);
        let e = tape.embed_mean(&[0, 1]).unwrap();
        let e = tape.detach(e);
        let l0 = tape.affine(ParamRef::QaW(0), ParamRef::QaB(0), e);
        let h0 = tape.tanh(l0);
        let l1 = tape.affine(ParamRef::QaW(1), ParamRef::QaB(1), h0);
        let h1 = tape.tanh(l1);
        let l2 = tape.affine(ParamRef::QaW(2), ParamRef::QaB(2), h1);
        let scores = tape.sigmoid_node(l2);
        let ce = tape.ce_logits(scores, 1).unwrap();
        let mut grads = GradStore::zeros_like(&p);
        tape.backward(ce, &mut grads);
        assert!(
            grads.embed.iter().all(|&g| g == 0.0),
            "embedding must see no gradient"
        );
        assert!(
            grads.qa[0].w.iter().any(|&g| g != 0.0),
            "branch weights still learn"
        );
    }

    #[test]
    fn tape_forward_matches_the_fast_path() {
        let p = tiny();
        let tokens = [0usize, 3, 2];
        let image = [0.2, -0.1, 0.4, 0.9];
        let mut tape = Tape::new(&p);
        let e = tape.embed_mean(&tokens).unwrap();
        let q_lin = tape.affine(ParamRef::QProjW, ParamRef::QProjB, e);
        let q = tape.tanh(q_lin);
        let img = tape.leaf(&image);
        let v_lin = tape.affine(ParamRef::VProjW, ParamRef::VProjB, img);
        let v = tape.tanh(v_lin);
        let prod = tape.hadamard(q, v);
        let f_lin = tape.affine(ParamRef::FuseW, ParamRef::FuseB, prod);
        let h = tape.tanh(f_lin);
        let logits = tape.affine(ParamRef::HeadW, ParamRef::HeadB, h);
        let fast = p.vqa_logits(&tokens, &image).unwrap();
        for (a, b) in tape.value(logits).iter().zip(&fast) {
            assert!((a - b).abs() < 1e-15);
        }
        let fast_scores = p.qa_scores(&tokens).unwrap();
        let mut tape2 = Tape::new(&p);
        let e = tape2.embed_mean(&tokens).unwrap();
        let l0 = tape2.affine(ParamRef::QaW(0), ParamRef::QaB(0), e);
        let h0 = tape2.tanh(l0);
        let l1 = tape2.affine(ParamRef::QaW(1), ParamRef::QaB(1), h0);
        let h1 = tape2.tanh(l1);
        let l2 = tape2.affine(ParamRef::QaW(2), ParamRef::QaB(2), h1);
        let s = tape2.sigmoid_node(l2);
        for (a, b) in tape2.value(s).iter().zip(&fast_scores) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_calls_accumulate() {
        let p = tiny();
        let mut tape = Tape::new(&p);
        let e = tape.embed_mean(&[0, 3, 1]).unwrap();
        let q_lin = tape.affine(ParamRef::QProjW, ParamRef::QProjB, e);
        let q = tape.tanh(q_lin);
        let img = tape.leaf(&[0.3, -0.2, 0.7, 0.1]);
        let v_lin = tape.affine(ParamRef::VProjW, ParamRef::VProjB, img);
        let v = tape.tanh(v_lin);
        let prod = tape.hadamard(q, v);
        let f_lin = tape.affine(ParamRef::FuseW, ParamRef::FuseB, prod);
        let h = tape.tanh(f_lin);
        let logits = tape.affine(ParamRef::HeadW, ParamRef::HeadB, h);
        let ce = tape.ce_logits(logits, 1).unwrap();

        let mut once = GradStore::zeros_like(&p);
        tape.backward(ce, &mut once);
        let mut twice = GradStore::zeros_like(&p);
        tape.backward(ce, &mut twice);
        tape.backward(ce, &mut twice);
        for r in p.param_refs() {
            for (a, b) in once.get(r).iter().zip(twice.get(r)) {
                assert_eq!(2.0 * a, *b);
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a, b);
        let c = ParameterStore::init(a.dims, 43);
        assert_ne!(a, c);
        let bound = 1.0 / (a.dims.d_embed as f64).sqrt();
        assert!(a.embed.iter().all(|x| x.abs() <= bound));
        assert!(a.q_proj.b.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn parameters_round_trip_bit_exactly() {
        let p = tiny();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ParameterStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut buf2 = Vec::new();
        q.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);

        let mut dropped = p.clone();
        dropped.drop_question_only_branch();
        let mut buf3 = Vec::new();
        dropped.write_to(&mut buf3).unwrap();
        let r = ParameterStore::read_from(&mut buf3.as_slice()).unwrap();
        assert_eq!(dropped, r);
        assert!(!r.has_question_only_branch());
    }

    #[test]
    fn truncated_parameter_blob_fails_to_read() {
        let p = tiny();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 9);
        assert!(ParameterStore::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn dropping_the_branch_leaves_answering_untouched() {
        let mut p = tiny();
        let tokens = [1usize, 2, 4];
        let image = [0.5, 0.5, -0.5, 0.25];
        let before = p.vqa_logits(&tokens, &image).unwrap();
        p.drop_question_only_branch();
        let after = p.vqa_logits(&tokens, &image).unwrap();
        assert_eq!(before, after);
        assert!(matches!(p.qa_scores(&tokens), Err(Error::State { .. })));
    }

    #[test]
    fn flatten_round_trips() {
        let mut p = tiny();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        let mut bumped = flat.clone();
        for x in &mut bumped {
            *x += 0.125;
        }
        p.assign_from_flat(&bumped).unwrap();
        assert_eq!(p.flatten(), bumped);
        assert!(p.assign_from_flat(&flat[1..]).is_err());
    }

    #[test]
    fn degenerate_vectors_are_rejected_by_cosine() {
        let p = tiny();
        let mut tape = Tape::new(&p);
        let zero = tape.leaf(&[0.0, 0.0, 0.0]);
        let other = tape.leaf(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            tape.cos_sim(zero, other),
            Err(Error::DegenerateSimilarity)
        ));
    }

    #[test]
    fn info_nce_needs_a_real_batch() {
        let p = tiny();
        let mut tape = Tape::new(&p);
        let a = tape.leaf(&[1.0, 0.0]);
        let pos = tape.leaf(&[1.0, 0.0]);
        assert!(matches!(
            tape.info_nce(a, &[pos], &[a], 0.1),
            Err(Error::InsufficientNegatives { batch: 1 })
        ));
    }

    #[test]
    fn info_nce_identical_positive_orthogonal_negative() {
        let p = tiny();
        let mut tape = Tape::new(&p);
        let a = tape.leaf(&[1.0, 0.0]);
        let pos = tape.leaf(&[1.0, 0.0]);
        let other = tape.leaf(&[0.0, 1.0]);
        let loss = tape.info_nce(a, &[pos], &[a, other], 0.1).unwrap();
        let expect = (1.0 + (-10.0f64).exp()).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
    }
}
