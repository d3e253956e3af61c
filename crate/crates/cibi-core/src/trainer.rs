//! Training loop for the debiased answering model.
//!
//! Every random decision is drawn from a stream named by purpose and epoch,
//! so a run is a pure function of its config and data: checkpoints carry no
//! generator state, interrupted runs resume bit-exactly, and disabling a
//! branch cannot perturb the draws of another.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{count_cooccurrence, select_keyword};
use crate::counterfactual::{mask_counterfactual, positive_pair, MaskPolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    read_f64s, read_u64, write_f64s, write_u64, GradStore, ModelDims, ParamRef, ParameterStore,
    Tape,
};
use crate::objectives::{softmax, LossBreakdown};
use crate::rngutil::stream;
use crate::vocab::{TokenIndex, VocabSpec};

const CKPT_MAGIC: &[u8; 8] = b"CIBICKP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::config(
                "optimizer",
                format!("unknown optimizer `{other}`, expected adam or sgd"),
            )),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the contrastive term in the total loss.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub mask: MaskPolicy,
    pub seed: u64,
    /// Counterfactual contrastive learning on the fused embeddings.
    pub use_context_branch: bool,
    /// Masked question-only branch with score fusion.
    pub use_question_only_branch: bool,
    pub d_embed: usize,
    pub d_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 44,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda: 0.4,
            tau: 0.1,
            mask: MaskPolicy::default(),
            seed: 0,
            use_context_branch: true,
            use_question_only_branch: true,
            d_embed: 32,
            d_hidden: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("tau", "must be positive"));
        }
        if self.d_embed == 0 || self.d_hidden == 0 {
            return Err(Error::config("dims", "embedding sizes must be positive"));
        }
        self.mask.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState {
                t: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            }),
        }
    }

    pub fn step(&mut self, flat: &mut [f64], grads: &[f64], lr: f64) {
        match self {
            OptimizerState::Sgd => {
                for (x, g) in flat.iter_mut().zip(grads) {
                    *x -= lr * g;
                }
            }
            OptimizerState::Adam(s) => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                s.t += 1;
                let c1 = 1.0 - B1.powi(s.t as i32);
                let c2 = 1.0 - B2.powi(s.t as i32);
                for i in 0..flat.len() {
                    let g = grads[i];
                    s.m[i] = B1 * s.m[i] + (1.0 - B1) * g;
                    s.v[i] = B2 * s.v[i] + (1.0 - B2) * g * g;
                    let mhat = s.m[i] / c1;
                    let vhat = s.v[i] / c2;
                    flat[i] -= lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

/// One addend of the training objective, for term-wise gradient inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Contrastive,
    DebiasedVqa,
    QuestionOnly,
    Total,
}

struct BatchGraph<'p> {
    tape: Tape<'p>,
    cl_mean: crate::nn::NodeId,
    vqa_mean: crate::nn::NodeId,
    qa_mean: crate::nn::NodeId,
    total: crate::nn::NodeId,
}

impl BatchGraph<'_> {
    fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            contrastive: self.tape.scalar(self.cl_mean),
            debiased_vqa: self.tape.scalar(self.vqa_mean),
            question_only: self.tape.scalar(self.qa_mean),
            total: self.tape.scalar(self.total),
        }
    }
}

/// Forward-and-backward pass over one batch of `data` rows (`indices` hold
/// sample positions in the dataset). Returns the mean loss terms and the
/// accumulated parameter gradients; applies no update.
pub fn batch_objective(
    cfg: &TrainConfig,
    params: &ParameterStore,
    data: &Dataset,
    indices: &[usize],
    epoch: usize,
) -> Result<(LossBreakdown, GradStore)> {
    let graph = build_batch_graph(cfg, params, data, indices, epoch)?;
    let mut grads = GradStore::zeros_like(params);
    graph.tape.backward(graph.total, &mut grads);
    Ok((graph.breakdown(), grads))
}

/// Like [`batch_objective`] but differentiates a single objective term,
/// leaving the others out of the backward pass.
pub fn batch_term_gradients(
    cfg: &TrainConfig,
    params: &ParameterStore,
    data: &Dataset,
    indices: &[usize],
    epoch: usize,
    term: LossTerm,
) -> Result<(LossBreakdown, GradStore)> {
    let graph = build_batch_graph(cfg, params, data, indices, epoch)?;
    let root = match term {
        LossTerm::Contrastive => graph.cl_mean,
        LossTerm::DebiasedVqa => graph.vqa_mean,
        LossTerm::QuestionOnly => graph.qa_mean,
        LossTerm::Total => graph.total,
    };
    let mut grads = GradStore::zeros_like(params);
    graph.tape.backward(root, &mut grads);
    Ok((graph.breakdown(), grads))
}

fn build_batch_graph<'p>(
    cfg: &TrainConfig,
    params: &'p ParameterStore,
    data: &Dataset,
    indices: &[usize],
    epoch: usize,
) -> Result<BatchGraph<'p>> {
    if indices.is_empty() {
        return Err(Error::EmptyInput {
            what: "batch".into(),
        });
    }
    if cfg.use_question_only_branch && params.qa.len() != 3 {
        return Err(Error::state(
            "question-only branch requested but its layers are absent",
        ));
    }
    let vocab = &data.vocab;
    let index = TokenIndex::new(vocab);
    let counts = count_cooccurrence(data)?;
    let inv_b = 1.0 / indices.len() as f64;

    let mut tape = Tape::new(params);
    let mut anchors = Vec::with_capacity(indices.len());
    let mut positive_nodes = Vec::with_capacity(indices.len());
    let mut vqa_terms = Vec::with_capacity(indices.len());
    let mut qa_terms = Vec::with_capacity(indices.len());

    let fused = |tape: &mut Tape,
                 index: &TokenIndex,
                 question: &[String],
                 image: &[f64]|
     -> Result<crate::nn::NodeId> {
        let tokens = index.encode(question)?;
        let e = tape.embed_mean(&tokens)?;
        let q_lin = tape.affine(ParamRef::QProjW, ParamRef::QProjB, e);
        let q = tape.tanh(q_lin);
        let img = tape.leaf(image);
        let v_lin = tape.affine(ParamRef::VProjW, ParamRef::VProjB, img);
        let v = tape.tanh(v_lin);
        let prod = tape.hadamard(q, v);
        let f_lin = tape.affine(ParamRef::FuseW, ParamRef::FuseB, prod);
        Ok(tape.tanh(f_lin))
    };

    for &gi in indices {
        let s = data.samples.get(gi).ok_or_else(|| Error::Shape {
            what: "sample index".into(),
            expected: data.samples.len(),
            found: gi,
        })?;
        if s.image.len() != params.dims.image_dim {
            return Err(Error::Shape {
                what: "image vector".into(),
                expected: params.dims.image_dim,
                found: s.image.len(),
            });
        }
        let h = fused(&mut tape, &index, &s.question, &s.image)?;
        anchors.push(h);
        let logits = tape.affine(ParamRef::HeadW, ParamRef::HeadB, h);

        if cfg.use_question_only_branch {
            let keyword = select_keyword(&counts, vocab, &s.question, s.answer)?;
            let mut mrng = stream(cfg.seed, &format!("mask/{epoch}"), gi as u64);
            let masked = mask_counterfactual(vocab, &s.question, &keyword, &cfg.mask, &mut mrng)?;
            let mtokens = index.encode(&masked)?;
            let me = tape.embed_mean(&mtokens)?;
            let me = tape.detach(me);
            let l0 = tape.affine(ParamRef::QaW(0), ParamRef::QaB(0), me);
            let h0 = tape.tanh(l0);
            let l1 = tape.affine(ParamRef::QaW(1), ParamRef::QaB(1), h0);
            let h1 = tape.tanh(l1);
            let l2 = tape.affine(ParamRef::QaW(2), ParamRef::QaB(2), h1);
            let scores = tape.sigmoid_node(l2);
            qa_terms.push(tape.ce_logits(scores, s.answer)?);
            let diff = tape.sub(logits, scores);
            let fstar = tape.log_sigmoid_node(diff);
            vqa_terms.push(tape.ce_logits(fstar, s.answer)?);
        } else {
            vqa_terms.push(tape.ce_logits(logits, s.answer)?);
        }

        if cfg.use_context_branch {
            let mut srng = stream(cfg.seed, &format!("swap/{epoch}"), gi as u64);
            let pair = positive_pair(vocab, &counts, &s.question, s.answer, &mut srng)?;
            let p0 = fused(&mut tape, &index, &pair[0], &s.image)?;
            let p1 = fused(&mut tape, &index, &pair[1], &s.image)?;
            positive_nodes.push([p0, p1]);
        }
    }

    let mut cl_terms = Vec::new();
    if cfg.use_context_branch {
        for (i, pos) in positive_nodes.iter().enumerate() {
            cl_terms.push(tape.info_nce(anchors[i], pos, &anchors, cfg.tau)?);
        }
    }

    let mean_node = |tape: &mut Tape, terms: &[crate::nn::NodeId]| {
        if terms.is_empty() {
            let zero = tape.leaf(&[0.0]);
            zero
        } else {
            let weighted: Vec<_> = terms.iter().map(|&t| (t, inv_b)).collect();
            tape.weighted_sum(&weighted)
        }
    };
    let cl_mean = mean_node(&mut tape, &cl_terms);
    let vqa_mean = mean_node(&mut tape, &vqa_terms);
    let qa_mean = mean_node(&mut tape, &qa_terms);
    let total = tape.weighted_sum(&[(cl_mean, cfg.lambda), (vqa_mean, 1.0), (qa_mean, 1.0)]);

    Ok(BatchGraph {
        tape,
        cl_mean,
        vqa_mean,
        qa_mean,
        total,
    })
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Chunk a shuffled order into batches; a trailing single sample joins the
/// previous batch so the contrastive denominator never degenerates.
fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() >= 2 && batches.last().map(|b| b.len()) == Some(1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: VocabSpec,
    pub params: ParameterStore,
    pub opt: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean loss terms per completed epoch.
    pub loss_trace: Vec<LossBreakdown>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        data.vocab.validate()?;
        let first = data.samples.first().ok_or_else(|| Error::EmptyInput {
            what: "training dataset".into(),
        })?;
        let dims = ModelDims {
            n_tokens: data.vocab.token_universe().len(),
            d_embed: cfg.d_embed,
            d_hidden: cfg.d_hidden,
            image_dim: first.image.len(),
            n_answers: data.vocab.answers.len(),
        };
        let params = ParameterStore::init(dims, cfg.seed);
        let opt = OptimizerState::new(cfg.optimizer, params.param_count());
        Ok(Trainer {
            cfg,
            vocab: data.vocab.clone(),
            params,
            opt,
            epoch: 0,
            loss_trace: Vec::new(),
        })
    }

    fn check_compat(&self, data: &Dataset) -> Result<()> {
        if data.vocab.hash_hex() != self.vocab.hash_hex() {
            return Err(Error::Compatibility {
                message: "dataset vocabulary differs from the trainer's".into(),
            });
        }
        Ok(())
    }

    /// Train until `cfg.epochs` epochs are complete.
    pub fn train(&mut self, data: &Dataset) -> Result<()> {
        self.train_until(data, self.cfg.epochs)
    }

    /// Train until `target_epochs` epochs are complete. Epoch indices are
    /// absolute, so a resumed run replays the exact schedule of an
    /// uninterrupted one.
    pub fn train_until(&mut self, data: &Dataset, target_epochs: usize) -> Result<()> {
        self.check_compat(data)?;
        let n = data.samples.len();
        if n == 0 {
            return Err(Error::EmptyInput {
                what: "training dataset".into(),
            });
        }
        while self.epoch < target_epochs {
            let mut srng = stream(self.cfg.seed, "shuffle", self.epoch as u64);
            let order = shuffled(n, &mut srng);
            let batches = make_batches(&order, self.cfg.batch_size);
            let mut sums = [0.0f64; 4];
            for (bi, batch) in batches.iter().enumerate() {
                let (bd, grads) =
                    batch_objective(&self.cfg, &self.params, data, batch, self.epoch)?;
                if !bd.is_finite() {
                    return Err(Error::NonFinite {
                        what: "batch loss".into(),
                        epoch: self.epoch,
                        batch: bi,
                    });
                }
                let order_refs = self.params.param_refs();
                let gflat = grads.flatten(&order_refs);
                let mut flat = self.params.flatten();
                self.opt.step(&mut flat, &gflat, self.cfg.learning_rate);
                self.params.assign_from_flat(&flat)?;
                let w = batch.len() as f64;
                sums[0] += bd.contrastive * w;
                sums[1] += bd.debiased_vqa * w;
                sums[2] += bd.question_only * w;
                sums[3] += bd.total * w;
            }
            let inv = 1.0 / n as f64;
            self.loss_trace.push(LossBreakdown {
                contrastive: sums[0] * inv,
                debiased_vqa: sums[1] * inv,
                question_only: sums[2] * inv,
                total: sums[3] * inv,
            });
            self.epoch += 1;
        }
        Ok(())
    }

    /// Softmax answer distribution of the fused model.
    pub fn predict_distribution(&self, question: &[String], image: &[f64]) -> Result<Vec<f64>> {
        let index = TokenIndex::new(&self.vocab);
        let tokens = index.encode(question)?;
        Ok(softmax(&self.params.vqa_logits(&tokens, image)?))
    }

    /// Highest-probability answer; ties go to the lowest index.
    pub fn predict_argmax(&self, question: &[String], image: &[f64]) -> Result<usize> {
        let dist = self.predict_distribution(question, image)?;
        let mut best = 0;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Copy of the parameters with the auxiliary branch removed, as shipped.
    pub fn deployed_parameters(&self) -> ParameterStore {
        let mut p = self.params.clone();
        p.drop_question_only_branch();
        p
    }

    pub fn save_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        let cfg = serde_json::to_vec(&self.cfg).map_err(|e| Error::state(e.to_string()))?;
        write_u64(w, cfg.len() as u64)?;
        w.write_all(&cfg)?;
        let vocab = serde_json::to_vec(&self.vocab).map_err(|e| Error::state(e.to_string()))?;
        write_u64(w, vocab.len() as u64)?;
        w.write_all(&vocab)?;
        self.params.write_to(w)?;
        match &self.opt {
            OptimizerState::Sgd => w.write_all(&[0u8])?,
            OptimizerState::Adam(s) => {
                w.write_all(&[1u8])?;
                write_u64(w, s.t)?;
                write_f64s(w, &s.m)?;
                write_f64s(w, &s.v)?;
            }
        }
        write_u64(w, self.epoch as u64)?;
        write_u64(w, self.loss_trace.len() as u64)?;
        for b in &self.loss_trace {
            for x in [b.contrastive, b.debiased_vqa, b.question_only, b.total] {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Compatibility {
                message: "not a training checkpoint".into(),
            });
        }
        let clen = read_u64(r)? as usize;
        let mut cbuf = vec![0u8; clen];
        r.read_exact(&mut cbuf)?;
        let cfg: TrainConfig = serde_json::from_slice(&cbuf).map_err(|e| Error::Parse {
            line: 0,
            message: format!("checkpoint config: {e}"),
        })?;
        cfg.validate()?;
        let vlen = read_u64(r)? as usize;
        let mut vbuf = vec![0u8; vlen];
        r.read_exact(&mut vbuf)?;
        let vocab: VocabSpec = serde_json::from_slice(&vbuf).map_err(|e| Error::Parse {
            line: 0,
            message: format!("checkpoint vocabulary: {e}"),
        })?;
        vocab.validate()?;
        let params = ParameterStore::read_from(r)?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let opt = match tag[0] {
            0 => OptimizerState::Sgd,
            1 => {
                let t = read_u64(r)?;
                let m = read_f64s(r, params.param_count())?;
                let v = read_f64s(r, params.param_count())?;
                OptimizerState::Adam(AdamState { t, m, v })
            }
            other => {
                return Err(Error::Compatibility {
                    message: format!("unknown optimizer tag {other}"),
                })
            }
        };
        let expected_kind = match (&opt, cfg.optimizer) {
            (OptimizerState::Sgd, OptimizerKind::Sgd) => true,
            (OptimizerState::Adam(_), OptimizerKind::Adam) => true,
            _ => false,
        };
        if !expected_kind {
            return Err(Error::Compatibility {
                message: "optimizer state does not match the configured optimizer".into(),
            });
        }
        let epoch = read_u64(r)? as usize;
        let tlen = read_u64(r)? as usize;
        let mut loss_trace = Vec::with_capacity(tlen);
        let mut buf = [0u8; 8];
        for _ in 0..tlen {
            let mut vals = [0.0f64; 4];
            for v in &mut vals {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            loss_trace.push(LossBreakdown {
                contrastive: vals[0],
                debiased_vqa: vals[1],
                question_only: vals[2],
                total: vals[3],
            });
        }
        Ok(Trainer {
            cfg,
            vocab,
            params,
            opt,
            epoch,
            loss_trace,
        })
    }
}
