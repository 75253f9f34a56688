//! A small pre-norm transformer classifier whose attention projections are
//! adapted layers. Everything else (embeddings, feed-forward, norms) is a
//! frozen random base.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_layer::{ActivationRecord, AdaMoleLinear, AdapterConfig, MixMode};
use crate::numeric::{
    derive_seed, gaussian_init, join_name, softmax, softmax_backward, Matrix, ParamGroup, Parameter, Parameterized,
};
use crate::telemetry::{ActivationStats, Projection};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    /// Width of each position for dense (non-token) inputs.
    pub input_features: usize,
    pub n_experts: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub mode: MixMode,
    pub train_head: bool,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            d_ff: 64,
            vocab_size: 64,
            seq_len: 16,
            n_classes: 4,
            input_features: 4,
            n_experts: 8,
            lora_rank: 4,
            lora_alpha: 16.0,
            lora_dropout: 0.0,
            mode: MixMode::Adaptive { tau_max: 1.0 / 8.0 },
            train_head: true,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model < 4 {
            return bad(format!("d_model must be at least 4, got {}", self.d_model));
        }
        if self.n_layers == 0 || self.seq_len == 0 || self.vocab_size == 0 || self.d_ff == 0 {
            return bad("n_layers, seq_len, vocab_size and d_ff must be positive".into());
        }
        if self.input_features == 0 {
            return bad("input_features must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least two classes, got {}", self.n_classes));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return bad(format!("lora_rank {} outside [1, {}]", self.lora_rank, self.d_model));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad(format!("lora_dropout {} outside [0, 1)", self.lora_dropout));
        }
        self.mode.validate(self.n_experts)
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            n_experts: self.n_experts,
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
            mode: self.mode,
        }
    }

    /// Total LoRA rank per adapted matrix, `N·r`.
    pub fn total_rank(&self) -> usize {
        self.n_experts * self.lora_rank
    }
}

/// One example's input: token ids or a dense `positions × input_features` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelInput {
    Tokens(Vec<usize>),
    Features(Matrix),
}

impl ModelInput {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Features(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Routing records of every token at one adapted matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRecords {
    pub layer: usize,
    pub projection: Projection,
    pub records: Vec<ActivationRecord>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub records: Vec<ProjectionRecords>,
}

impl ForwardOutput {
    pub fn record_into(&self, stats: &mut ActivationStats) -> Result<()> {
        for pr in &self.records {
            for rec in &pr.records {
                stats.record(pr.layer, pr.projection, rec.weights.active_count)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    y: Matrix,
    inv_std: Vec<f64>,
}

/// Parameter-free layer norm over each row.
fn layer_norm(x: &Matrix) -> LnCache {
    let (t, d) = x.shape();
    let mut y = Matrix::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in y.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    LnCache { y, inv_std }
}

fn layer_norm_backward(cache: &LnCache, upstream: &Matrix) -> Matrix {
    let (t, d) = upstream.shape();
    let mut out = Matrix::zeros(t, d);
    for r in 0..t {
        let g = upstream.row(r);
        let y = cache.y.row(r);
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for ((o, gi), yi) in out.row_mut(r).iter_mut().zip(g).zip(y) {
            *o = cache.inv_std[r] * (gi - mean_g - yi * mean_gy);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax over attention scores.
fn softmax_rows(scores: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        out.row_mut(r).copy_from_slice(&softmax(scores.row(r))?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct FrozenFeedForward {
    /// d_ff×d.
    w1: Parameter,
    /// d×d_ff.
    w2: Parameter,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Matrix,
    ln2: LnCache,
    ff_pre: Matrix,
}

/// One pre-norm attention block with adapted `q, k, v, o` projections.
#[derive(Debug, Clone)]
pub struct Block {
    /// Indexed by [`Projection::index`].
    pub projections: [AdaMoleLinear; 4],
    ff: FrozenFeedForward,
    cache: Option<BlockCache>,
}

type ProjectFn<'a> = dyn FnMut(Projection, &Matrix) -> Result<(Matrix, Vec<ActivationRecord>)> + 'a;

fn block_forward(
    ff: &FrozenFeedForward,
    x: &Matrix,
    project: &mut ProjectFn<'_>,
) -> Result<(Matrix, [Vec<ActivationRecord>; 4], BlockCache)> {
    let d = x.cols();
    let ln1 = layer_norm(x);
    let (q, rq) = project(Projection::Q, &ln1.y)?;
    let (k, rk) = project(Projection::K, &ln1.y)?;
    let (v, rv) = project(Projection::V, &ln1.y)?;
    let scores = q.matmul_nt(&k)?.scale(1.0 / (d as f64).sqrt());
    let attn = softmax_rows(&scores)?;
    let mixed = attn.matmul(&v)?;
    let (o, ro) = project(Projection::O, &mixed)?;
    let x_mid = x.add(&o)?;
    let ln2 = layer_norm(&x_mid);
    let ff_pre = ln2.y.matmul_nt(&ff.w1.value)?;
    let mut act = ff_pre.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let out = x_mid.add(&act.matmul_nt(&ff.w2.value)?)?;
    let cache = BlockCache {
        ln1,
        q,
        k,
        v,
        attn,
        ln2,
        ff_pre,
    };
    Ok((out, [rq, rk, rv, ro], cache))
}

impl Block {
    /// Frozen weights and adapters for one block, drawn from `seed`.
    pub fn new(cfg: &ToyModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let adapter = cfg.adapter_config();
        let projections = Projection::ALL.map(|p| {
            let w0 = gaussian_init(d, d, std, seed, &format!("base.{p}"))?;
            AdaMoleLinear::new(w0, &adapter, derive_seed(seed, &format!("adapter.{p}")))
        });
        let [q, k, v, o] = projections;
        let ff = FrozenFeedForward {
            w1: Parameter::frozen(gaussian_init(cfg.d_ff, d, std, seed, "base.ff1")?),
            w2: Parameter::frozen(gaussian_init(d, cfg.d_ff, 1.0 / (cfg.d_ff as f64).sqrt(), seed, "base.ff2")?),
        };
        Ok(Self {
            projections: [q?, k?, v?, o?],
            ff,
            cache: None,
        })
    }

    pub fn eval(&self, x: &Matrix) -> Result<(Matrix, [Vec<ActivationRecord>; 4])> {
        let projections = &self.projections;
        let mut project = |p: Projection, a: &Matrix| projections[p.index()].eval(a);
        let (out, recs, _) = block_forward(&self.ff, x, &mut project)?;
        Ok((out, recs))
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<(Matrix, [Vec<ActivationRecord>; 4])> {
        let Block { projections, ff, cache } = self;
        let mut project = |p: Projection, a: &Matrix| projections[p.index()].forward(a);
        let (out, recs, c) = block_forward(ff, x, &mut project)?;
        *cache = Some(c);
        Ok((out, recs))
    }

    /// Returns the gradient w.r.t. the block input; adapters accumulate
    /// their own gradients, including `balance_coeff` times the balance loss.
    pub fn backward(&mut self, upstream: &Matrix, balance_coeff: f64) -> Result<Matrix> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("block backward called before forward".into()))?;
        let d = upstream.cols();

        // feed-forward branch
        let d_act = upstream.matmul(&self.ff.w2.value)?;
        let mut d_pre = d_act;
        for (g, x) in d_pre.data_mut().iter_mut().zip(cache.ff_pre.data()) {
            *g *= gelu_grad(*x);
        }
        let d_ln2 = d_pre.matmul(&self.ff.w1.value)?;
        let mut d_mid = upstream.add(&layer_norm_backward(&cache.ln2, &d_ln2))?;

        // attention branch
        let d_mixed = self.projections[Projection::O.index()].backward(&d_mid, balance_coeff)?;
        let d_attn = d_mixed.matmul_nt(&cache.v)?;
        let d_v = cache.attn.matmul_tn(&d_mixed)?;
        let mut d_scores = Matrix::zeros(d_attn.rows(), d_attn.cols());
        for r in 0..d_attn.rows() {
            d_scores
                .row_mut(r)
                .copy_from_slice(&softmax_backward(cache.attn.row(r), d_attn.row(r)));
        }
        let c = 1.0 / (d as f64).sqrt();
        let d_q = d_scores.matmul(&cache.k)?.scale(c);
        let d_k = d_scores.matmul_tn(&cache.q)?.scale(c);

        let ln1 = cache.ln1.clone();
        let mut d_ln1 = self.projections[Projection::Q.index()].backward(&d_q, balance_coeff)?;
        d_ln1.add_scaled(&self.projections[Projection::K.index()].backward(&d_k, balance_coeff)?, 1.0)?;
        d_ln1.add_scaled(&self.projections[Projection::V.index()].backward(&d_v, balance_coeff)?, 1.0)?;
        d_mid.add_scaled(&layer_norm_backward(&ln1, &d_ln1), 1.0)?;
        Ok(d_mid)
    }

    pub fn projection(&self, p: Projection) -> &AdaMoleLinear {
        &self.projections[p.index()]
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut AdaMoleLinear {
        &mut self.projections[p.index()]
    }
}

impl Parameterized for Block {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        for p in Projection::ALL {
            self.projections[p.index()].visit_params(&join_name(prefix, p.as_str()), f);
        }
        f(&join_name(prefix, "ff.w1"), &self.ff.w1);
        f(&join_name(prefix, "ff.w2"), &self.ff.w2);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for p in Projection::ALL {
            self.projections[p.index()].visit_params_mut(&join_name(prefix, p.as_str()), f);
        }
        f(&join_name(prefix, "ff.w1"), &mut self.ff.w1);
        f(&join_name(prefix, "ff.w2"), &mut self.ff.w2);
    }
}

#[derive(Debug, Clone)]
struct HeadCache {
    ln: LnCache,
    pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    token_embedding: Parameter,
    input_projection: Parameter,
    positions: Parameter,
    pub blocks: Vec<Block>,
    /// n_classes×d_model.
    pub head_w: Parameter,
    /// 1×n_classes.
    pub head_b: Parameter,
    cache: Option<HeadCache>,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(&config, derive_seed(seed, &format!("block.{l}"))))
            .collect::<Result<Vec<_>>>()?;
        let head_w = gaussian_init(config.n_classes, d, 1.0 / (d as f64).sqrt(), seed, "head.w")?;
        let mut head_w = Parameter::new(head_w, ParamGroup::Head);
        let mut head_b = Parameter::new(Matrix::zeros(1, config.n_classes), ParamGroup::Head);
        head_w.trainable = config.train_head;
        head_b.trainable = config.train_head;
        Ok(Self {
            token_embedding: Parameter::frozen(gaussian_init(config.vocab_size, d, 1.0, seed, "base.embed")?),
            input_projection: Parameter::frozen(gaussian_init(
                d,
                config.input_features,
                1.0 / (config.input_features as f64).sqrt(),
                seed,
                "base.input",
            )?),
            positions: Parameter::frozen(gaussian_init(config.seq_len, d, 1.0, seed, "base.pos")?),
            blocks,
            head_w,
            head_b,
            config,
            cache: None,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_experts(&self) -> usize {
        self.config.n_experts
    }

    pub fn adapted_layers(&self) -> impl Iterator<Item = (usize, Projection, &AdaMoleLinear)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| Projection::ALL.into_iter().map(move |p| (l, p, b.projection(p))))
    }

    pub fn adapted_layers_mut(&mut self) -> impl Iterator<Item = &mut AdaMoleLinear> {
        self.blocks.iter_mut().flat_map(|b| b.projections.iter_mut())
    }

    pub fn set_training(&mut self, training: bool) {
        for l in self.adapted_layers_mut() {
            l.set_training(training);
        }
    }

    /// Sets `τ_max` on every adapted layer.
    pub fn set_tau_max(&mut self, tau_max: f64) -> Result<()> {
        for l in self.adapted_layers_mut() {
            l.set_tau_max(tau_max)?;
        }
        if let MixMode::Adaptive { tau_max: t } = &mut self.config.mode {
            *t = tau_max;
        }
        Ok(())
    }

    fn embed(&self, input: &ModelInput) -> Result<Matrix> {
        let len = input.len();
        if len == 0 || len > self.config.seq_len {
            return Err(Error::Validation(format!(
                "input length {len} outside [1, {}]",
                self.config.seq_len
            )));
        }
        let mut x = match input {
            ModelInput::Tokens(ids) => {
                let d = self.config.d_model;
                let mut x = Matrix::zeros(len, d);
                for (t, &id) in ids.iter().enumerate() {
                    if id >= self.config.vocab_size {
                        return Err(Error::Validation(format!(
                            "token id {id} out of range for vocabulary of {}",
                            self.config.vocab_size
                        )));
                    }
                    x.row_mut(t).copy_from_slice(self.token_embedding.value.row(id));
                }
                x
            }
            ModelInput::Features(f) => {
                if f.cols() != self.config.input_features {
                    return Err(Error::shape(
                        "model_forward",
                        format!("{} input features", self.config.input_features),
                        format!("{}", f.cols()),
                    ));
                }
                f.matmul_nt(&self.input_projection.value)?
            }
        };
        for t in 0..len {
            for (v, p) in x.row_mut(t).iter_mut().zip(self.positions.value.row(t)) {
                *v += p;
            }
        }
        Ok(x)
    }

    fn head(&self, x: &Matrix) -> Result<(Vec<f64>, HeadCache)> {
        let ln = layer_norm(x);
        let t = x.rows() as f64;
        let mut pooled = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (p, v) in pooled.iter_mut().zip(ln.y.row(r)) {
                *p += v / t;
            }
        }
        let mut logits = self.head_w.value.matvec(&pooled)?;
        for (l, b) in logits.iter_mut().zip(self.head_b.value.data()) {
            *l += b;
        }
        Ok((logits, HeadCache { ln, pooled }))
    }

    fn collect(&self, layer: usize, recs: [Vec<ActivationRecord>; 4], out: &mut Vec<ProjectionRecords>) {
        for (p, records) in Projection::ALL.into_iter().zip(recs) {
            out.push(ProjectionRecords {
                layer,
                projection: p,
                records,
            });
        }
    }

    /// Inference forward; the model is left untouched.
    pub fn predict(&self, input: &ModelInput) -> Result<ForwardOutput> {
        let mut x = self.embed(input)?;
        let mut records = Vec::with_capacity(4 * self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (next, recs) = block.eval(&x)?;
            self.collect(l, recs, &mut records);
            x = next;
        }
        let (logits, _) = self.head(&x)?;
        Ok(ForwardOutput { logits, records })
    }

    /// Logits of the frozen base alone: every adapted projection is replaced
    /// by its `W0` and no routing happens.
    pub fn predict_base(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let mut x = self.embed(input)?;
        for block in &self.blocks {
            let mut project = |p: Projection, a: &Matrix| -> Result<(Matrix, Vec<ActivationRecord>)> {
                Ok((a.matmul_nt(&block.projections[p.index()].w0.value)?, Vec::new()))
            };
            x = block_forward(&block.ff, &x, &mut project)?.0;
        }
        Ok(self.head(&x)?.0)
    }

    /// Training forward; caches activations for [`ToyModel::backward`].
    pub fn forward(&mut self, input: &ModelInput) -> Result<ForwardOutput> {
        let mut x = self.embed(input)?;
        let mut per_layer = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (next, recs) = block.forward(&x)?;
            per_layer.push(recs);
            x = next;
        }
        let mut records = Vec::with_capacity(4 * self.blocks.len());
        for (l, recs) in per_layer.into_iter().enumerate() {
            self.collect(l, recs, &mut records);
        }
        let (logits, cache) = self.head(&x)?;
        self.cache = Some(cache);
        Ok(ForwardOutput { logits, records })
    }

    /// Balance penalty of every adapted matrix for the cached forward pass,
    /// layer-major in `q, k, v, o` order.
    pub fn balance_losses(&self) -> Result<Vec<f64>> {
        self.adapted_layers().map(|(_, _, l)| l.balance_loss()).collect()
    }

    /// Backpropagates `∂L/∂logits` plus `balance_coeff ·` every layer's
    /// balance penalty. Gradients accumulate; nothing is zeroed here.
    pub fn backward(&mut self, grad_logits: &[f64], balance_coeff: f64) -> Result<()> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("model backward called before forward".into()))?;
        if grad_logits.len() != self.config.n_classes {
            return Err(Error::shape(
                "model_backward",
                format!("{} logits", self.config.n_classes),
                format!("{}", grad_logits.len()),
            ));
        }
        let d = self.config.d_model;
        let mut grad_w = Matrix::zeros(self.config.n_classes, d);
        for (c, &g) in grad_logits.iter().enumerate() {
            for (w, p) in grad_w.row_mut(c).iter_mut().zip(&cache.pooled) {
                *w = g * p;
            }
        }
        let grad_pooled = self.head_w.value.transpose().matvec(grad_logits)?;
        let t = cache.ln.y.rows();
        let mut grad_y = Matrix::zeros(t, d);
        for r in 0..t {
            for (g, p) in grad_y.row_mut(r).iter_mut().zip(&grad_pooled) {
                *g = p / t as f64;
            }
        }
        let mut grad_x = layer_norm_backward(&cache.ln, &grad_y);
        self.head_w.accumulate(&grad_w)?;
        self.head_b.accumulate(&Matrix::row_vector(grad_logits)?)?;
        for block in self.blocks.iter_mut().rev() {
            grad_x = block.backward(&grad_x, balance_coeff)?;
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        for b in &mut self.blocks {
            b.cache = None;
            for p in &mut b.projections {
                p.clear_cache();
            }
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.param_count(&|p| p.trainable)
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.param_count(&|p| p.group == group)
    }

    /// Hash of every frozen base weight, bit for bit.
    pub fn base_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.visit_params("", &mut |name, p| {
            if p.group == ParamGroup::Base {
                name.hash(&mut h);
                for v in p.value.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        });
        h.finish()
    }
}

impl Parameterized for ToyModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join_name(prefix, "embed.tokens"), &self.token_embedding);
        f(&join_name(prefix, "embed.input"), &self.input_projection);
        f(&join_name(prefix, "embed.positions"), &self.positions);
        for (l, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join_name(prefix, &format!("blocks.{l}")), f);
        }
        f(&join_name(prefix, "head.w"), &self.head_w);
        f(&join_name(prefix, "head.b"), &self.head_b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join_name(prefix, "embed.tokens"), &mut self.token_embedding);
        f(&join_name(prefix, "embed.input"), &mut self.input_projection);
        f(&join_name(prefix, "embed.positions"), &mut self.positions);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join_name(prefix, &format!("blocks.{l}")), f);
        }
        f(&join_name(prefix, "head.w"), &mut self.head_w);
        f(&join_name(prefix, "head.b"), &mut self.head_b);
    }
}

/// Attention weights of the first block for `input`; each row is a
/// probability vector.
pub fn first_block_attention(model: &ToyModel, input: &ModelInput) -> Result<Matrix> {
    let x = model.embed(input)?;
    let block = model
        .blocks
        .first()
        .ok_or_else(|| Error::State("model has no blocks".into()))?;
    let projections = &block.projections;
    let mut project = |p: Projection, a: &Matrix| projections[p.index()].eval(a);
    let (_, _, cache) = block_forward(&block.ff, &x, &mut project)?;
    Ok(cache.attn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: MixMode, n_experts: usize) -> ToyModelConfig {
        ToyModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 12,
            vocab_size: 10,
            seq_len: 5,
            n_classes: 3,
            input_features: 2,
            n_experts,
            lora_rank: 2,
            mode,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = gaussian_init(3, 8, 2.0, 1, "x").unwrap();
        let ln = layer_norm(&x);
        for r in 0..3 {
            let row = ln.y.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for x in [-2.5, -0.7, 0.0, 0.3, 1.9] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = small(MixMode::Adaptive { tau_max: 0.25 }, 4);
        let a = ToyModel::new(cfg.clone()).unwrap();
        let b = ToyModel::new(cfg).unwrap();
        let input = ModelInput::Tokens(vec![1, 2, 3]);
        assert_eq!(a.predict(&input).unwrap().logits, b.predict(&input).unwrap().logits);
        assert_eq!(a.base_fingerprint(), b.base_fingerprint());
    }

    #[test]
    fn input_validation() {
        let m = ToyModel::new(small(MixMode::TopK { k: 2 }, 4)).unwrap();
        assert!(matches!(m.predict(&ModelInput::Tokens(vec![10])), Err(Error::Validation(_))));
        assert!(m.predict(&ModelInput::Tokens(vec![])).is_err());
        assert!(m.predict(&ModelInput::Tokens(vec![1; 6])).is_err());
        assert!(m.predict(&ModelInput::Features(Matrix::zeros(2, 3))).is_err());
        assert!(m.predict(&ModelInput::Features(Matrix::zeros(2, 2))).is_ok());
        let mut m = m;
        assert!(matches!(m.backward(&[0.0; 3], 0.0), Err(Error::State(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = small(MixMode::SingleLora, 1);
        cfg.d_model = 3;
        assert!(ToyModel::new(cfg).is_err());
        assert!(ToyModel::new(small(MixMode::SingleLora, 2)).is_err());
        let mut cfg = small(MixMode::SingleLora, 1);
        cfg.n_classes = 1;
        assert!(ToyModel::new(cfg).is_err());
    }

    #[test]
    fn records_cover_every_projection_and_token() {
        let m = ToyModel::new(small(MixMode::Adaptive { tau_max: 0.25 }, 4)).unwrap();
        let out = m.predict(&ModelInput::Tokens(vec![1, 2, 3, 4])).unwrap();
        assert_eq!(out.records.len(), 2 * 4);
        for (i, pr) in out.records.iter().enumerate() {
            assert_eq!(pr.layer, i / 4);
            assert_eq!(pr.projection, Projection::ALL[i % 4]);
            assert_eq!(pr.records.len(), 4);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = ToyModel::new(small(MixMode::TopK { k: 2 }, 4)).unwrap();
        let attn = first_block_attention(&m, &ModelInput::Tokens(vec![3, 1, 4, 1, 5])).unwrap();
        for r in 0..attn.rows() {
            assert!((attn.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_upstream_leaves_grads_zero() {
        let mut m = ToyModel::new(small(MixMode::Adaptive { tau_max: 0.25 }, 4)).unwrap();
        m.forward(&ModelInput::Tokens(vec![1, 2])).unwrap();
        m.backward(&[0.0; 3], 0.0).unwrap();
        let mut max = 0.0f64;
        m.visit_params("", &mut |_, p| max = max.max(p.grad.max_abs()));
        assert_eq!(max, 0.0);
    }

    #[test]
    fn census() {
        let cfg = small(MixMode::Adaptive { tau_max: 0.25 }, 4);
        let m = ToyModel::new(cfg.clone()).unwrap();
        let d = cfg.d_model;
        let per_matrix_adapter = cfg.n_experts * cfg.lora_rank * (d + d);
        let per_matrix_router = cfg.n_experts * d + d + 1;
        let head = cfg.n_classes * d + cfg.n_classes;
        let adapted = 4 * cfg.n_layers;
        assert_eq!(m.group_param_count(ParamGroup::Adapter), adapted * per_matrix_adapter);
        assert_eq!(m.group_param_count(ParamGroup::Router), adapted * per_matrix_router);
        assert_eq!(m.trainable_param_count(), adapted * (per_matrix_adapter + per_matrix_router) + head);
    }
}
