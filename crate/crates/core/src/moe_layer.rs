//! The adapted linear layer: frozen `W₀` plus a gated sum of LoRA experts,
//!
//! `h = W₀x + Σ_i w_i(x) · (α/r) B_i A_i x`,
//!
//! where the mixing weights `w_i` come from one of four rules ([`MixMode`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{
    adaptive_weights, load_balance_grad, load_balance_loss, mix_backward, threshold_weights, topk_weights,
    GateNetwork, MixScore, MixWeights, ThresholdNetwork,
};
use crate::lora::LoraExpert;
use crate::numeric::{derive_seed, join_name, Matrix, Parameter, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixMode {
    /// One plain LoRA adapter, no router.
    SingleLora,
    /// Static top-k routing.
    TopK { k: usize },
    /// Every expert with `p_i ≥ τ`, weights ∝ `p_i`.
    FixedThreshold { tau: f64 },
    /// Learned threshold `τ(x) ∈ (0, τ_max)`, weights ∝ `p_i − τ`.
    Adaptive { tau_max: f64 },
}

impl MixMode {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        match *self {
            MixMode::SingleLora if n_experts != 1 => Err(Error::Config(format!(
                "single LoRA mode needs exactly one expert, got {n_experts}"
            ))),
            MixMode::TopK { k } if k == 0 || k > n_experts => {
                Err(Error::Config(format!("top-k with k={k} and {n_experts} experts")))
            }
            MixMode::FixedThreshold { tau } if !(0.0..=1.0).contains(&tau) => {
                Err(Error::Config(format!("fixed threshold {tau} outside [0, 1]")))
            }
            MixMode::Adaptive { tau_max } if !(tau_max > 0.0 && tau_max <= 1.0) => {
                Err(Error::Config(format!("tau_max {tau_max} outside (0, 1]")))
            }
            _ if n_experts == 0 => Err(Error::Config("need at least one expert".into())),
            _ => Ok(()),
        }
    }
}

/// Shape of the adapters attached to one base matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub n_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub mode: MixMode,
}

/// Routing outcome for a single input at a single adapted matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub p: Vec<f64>,
    pub tau: Option<f64>,
    pub weights: MixWeights,
}

/// Number of experts switched on for this input.
pub fn count_active(rec: &ActivationRecord) -> usize {
    rec.weights.active_count
}

/// Distance from the nearest point where the active set would change. Finite
/// difference probes must stay well inside this.
pub fn routing_margin(rec: &ActivationRecord, mode: &MixMode) -> f64 {
    match *mode {
        MixMode::SingleLora => f64::INFINITY,
        MixMode::TopK { k } => {
            let mut sorted = rec.p.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if k < sorted.len() {
                sorted[k - 1] - sorted[k]
            } else {
                f64::INFINITY
            }
        }
        MixMode::FixedThreshold { .. } | MixMode::Adaptive { .. } => {
            let tau = rec.tau.unwrap_or(0.0);
            rec.p.iter().map(|p| (p - tau).abs()).fold(f64::INFINITY, f64::min)
        }
    }
}

#[derive(Debug, Clone)]
struct Routing {
    probs: Matrix,
    taus: Vec<f64>,
    mixes: Vec<MixWeights>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Matrix,
    routing: Routing,
    expert_out: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct AdaMoleLinear {
    /// d×k, frozen.
    pub w0: Parameter,
    pub experts: Vec<LoraExpert>,
    /// Absent in [`MixMode::SingleLora`].
    pub gate: Option<GateNetwork>,
    /// Present only in [`MixMode::Adaptive`].
    pub threshold: Option<ThresholdNetwork>,
    mode: MixMode,
    cache: Option<LayerCache>,
}

impl AdaMoleLinear {
    pub fn new(w0: Matrix, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        cfg.mode.validate(cfg.n_experts)?;
        let (d, k) = w0.shape();
        let experts = (0..cfg.n_experts)
            .map(|i| {
                LoraExpert::new(d, k, cfg.rank, cfg.alpha, derive_seed(seed, &format!("expert.{i}")))?
                    .with_dropout(cfg.dropout)
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = match cfg.mode {
            MixMode::SingleLora => None,
            _ => Some(GateNetwork::new(cfg.n_experts, k, derive_seed(seed, "gate"))?),
        };
        let threshold = match cfg.mode {
            MixMode::Adaptive { tau_max } => Some(ThresholdNetwork::new(k, tau_max)?),
            _ => None,
        };
        Ok(Self {
            w0: Parameter::frozen(w0),
            experts,
            gate,
            threshold,
            mode: cfg.mode,
            cache: None,
        })
    }

    pub fn mode(&self) -> MixMode {
        self.mode
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn in_features(&self) -> usize {
        self.w0.value.cols()
    }

    pub fn out_features(&self) -> usize {
        self.w0.value.rows()
    }

    /// Replaces `τ_max` keeping `W_τ`, `b_τ`. Only meaningful in adaptive mode.
    pub fn set_tau_max(&mut self, tau_max: f64) -> Result<()> {
        match (&mut self.threshold, &mut self.mode) {
            (Some(t), MixMode::Adaptive { tau_max: m }) => {
                t.set_tau_max(tau_max)?;
                *m = tau_max;
                Ok(())
            }
            _ => Err(Error::Config("tau_max only applies to adaptive mode".into())),
        }
    }

    pub fn set_training(&mut self, training: bool) {
        for e in &mut self.experts {
            e.set_training(training);
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_features() {
            return Err(Error::shape(
                "layer_forward",
                format!("{} input features", self.in_features()),
                format!("{}", x.cols()),
            ));
        }
        Ok(())
    }

    fn route(&self, x: &Matrix) -> Result<Routing> {
        let t = x.rows();
        let n = self.n_experts();
        let mut probs = Matrix::zeros(t, n);
        let mut taus = Vec::with_capacity(t);
        let mut mixes = Vec::with_capacity(t);
        for r in 0..t {
            let xr = x.row(r);
            let p = match &self.gate {
                Some(g) => g.gate_probs(xr)?,
                None => vec![1.0],
            };
            let (tau, mix) = match self.mode {
                MixMode::SingleLora => (0.0, threshold_weights(&p, 0.0)),
                MixMode::TopK { k } => (0.0, topk_weights(&p, k)?),
                MixMode::FixedThreshold { tau } => (tau, threshold_weights(&p, tau)),
                MixMode::Adaptive { .. } => {
                    let tau = self
                        .threshold
                        .as_ref()
                        .ok_or_else(|| Error::State("adaptive layer without threshold network".into()))?
                        .compute_threshold(xr)?;
                    (tau, adaptive_weights(&p, tau))
                }
            };
            probs.row_mut(r).copy_from_slice(&p);
            taus.push(tau);
            mixes.push(mix);
        }
        Ok(Routing { probs, taus, mixes })
    }

    fn records(&self, routing: &Routing) -> Vec<ActivationRecord> {
        let has_tau = matches!(self.mode, MixMode::FixedThreshold { .. } | MixMode::Adaptive { .. });
        routing
            .mixes
            .iter()
            .enumerate()
            .map(|(r, mix)| ActivationRecord {
                p: routing.probs.row(r).to_vec(),
                tau: has_tau.then_some(routing.taus[r]),
                weights: mix.clone(),
            })
            .collect()
    }

    fn combine(&self, x: &Matrix, routing: &Routing, expert_out: &[Matrix]) -> Result<Matrix> {
        let mut h = x.matmul_nt(&self.w0.value)?;
        for (i, out) in expert_out.iter().enumerate() {
            for (r, mix) in routing.mixes.iter().enumerate() {
                let w = mix.weights[i];
                if w != 0.0 {
                    for (hv, ov) in h.row_mut(r).iter_mut().zip(out.row(r)) {
                        *hv += w * ov;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Inference over T rows (T×k → T×d); leaves no cache behind.
    pub fn eval(&self, x: &Matrix) -> Result<(Matrix, Vec<ActivationRecord>)> {
        self.check_input(x)?;
        let routing = self.route(x)?;
        let expert_out = self.experts.iter().map(|e| e.eval(x)).collect::<Result<Vec<_>>>()?;
        let h = self.combine(x, &routing, &expert_out)?;
        Ok((h, self.records(&routing)))
    }

    /// Forward over T rows, caching everything the backward pass needs.
    pub fn forward(&mut self, x: &Matrix) -> Result<(Matrix, Vec<ActivationRecord>)> {
        self.check_input(x)?;
        let routing = self.route(x)?;
        let expert_out = self.experts.iter_mut().map(|e| e.forward(x)).collect::<Result<Vec<_>>>()?;
        let h = self.combine(x, &routing, &expert_out)?;
        let records = self.records(&routing);
        self.cache = Some(LayerCache {
            x: x.clone(),
            routing,
            expert_out,
        });
        Ok((h, records))
    }

    fn cached(&self) -> Result<&LayerCache> {
        self.cache
            .as_ref()
            .ok_or_else(|| Error::State("layer backward called before forward".into()))
    }

    /// Balance penalty over the tokens of the last forward pass.
    pub fn balance_loss(&self) -> Result<f64> {
        let cache = self.cached()?;
        let active: Vec<Vec<bool>> = cache.routing.mixes.iter().map(|m| m.active_mask.clone()).collect();
        load_balance_loss(&cache.routing.probs, &active)
    }

    /// Backpropagates `upstream = ∂L/∂h` (T×d) plus `balance_coeff ·
    /// balance_loss`. Accumulates into every trainable parameter and returns
    /// `∂L/∂x`.
    pub fn backward(&mut self, upstream: &Matrix, balance_coeff: f64) -> Result<Matrix> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("layer backward called before forward".into()))?;
        let result = self.backward_with(&cache, upstream, balance_coeff);
        self.cache = Some(cache);
        result
    }

    fn backward_with(&mut self, cache: &LayerCache, upstream: &Matrix, balance_coeff: f64) -> Result<Matrix> {
        let t = cache.x.rows();
        let n = self.n_experts();
        if upstream.shape() != (t, self.out_features()) {
            return Err(Error::shape(
                "layer_backward",
                format!("{t}x{}", self.out_features()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let routing = &cache.routing;

        // base path; W₀ is frozen so only the input gradient matters
        let mut grad_x = upstream.matmul(&self.w0.value)?;

        let mut grad_w = Matrix::zeros(t, n);
        for (i, expert) in self.experts.iter_mut().enumerate() {
            let out = &cache.expert_out[i];
            let mut grad_out = Matrix::zeros(t, out.cols());
            for r in 0..t {
                let w = routing.mixes[r].weights[i];
                let up = upstream.row(r);
                grad_w.set(r, i, up.iter().zip(out.row(r)).map(|(a, b)| a * b).sum());
                if w != 0.0 {
                    for (g, u) in grad_out.row_mut(r).iter_mut().zip(up) {
                        *g = w * u;
                    }
                }
            }
            grad_x.add_scaled(&expert.backward(&grad_out)?, 1.0)?;
        }

        let Some(gate) = self.gate.as_mut() else {
            return Ok(grad_x);
        };
        let balance = if balance_coeff != 0.0 {
            let active: Vec<Vec<bool>> = routing.mixes.iter().map(|m| m.active_mask.clone()).collect();
            Some(load_balance_grad(&routing.probs, &active)?)
        } else {
            None
        };
        let score = match self.mode {
            MixMode::Adaptive { .. } => MixScore::Margin,
            _ => MixScore::Probability,
        };
        for r in 0..t {
            let p = routing.probs.row(r);
            let (mut grad_p, grad_tau) = mix_backward(p, routing.taus[r], &routing.mixes[r], score, grad_w.row(r));
            if let Some(b) = &balance {
                for (g, bv) in grad_p.iter_mut().zip(b.row(r)) {
                    *g += balance_coeff * bv;
                }
            }
            let xr = cache.x.row(r);
            let gx = gate.backward(xr, p, &grad_p)?;
            for (a, b) in grad_x.row_mut(r).iter_mut().zip(&gx) {
                *a += b;
            }
            if let Some(th) = self.threshold.as_mut() {
                let gx = th.backward(xr, grad_tau)?;
                for (a, b) in grad_x.row_mut(r).iter_mut().zip(&gx) {
                    *a += b;
                }
            }
        }
        Ok(grad_x)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        for e in &mut self.experts {
            e.clear_cache();
        }
    }

    /// A/B entries only, gate and threshold excluded.
    pub fn adapter_param_count(&self) -> usize {
        self.experts.iter().map(|e| e.a.len() + e.b.len()).sum()
    }

    pub fn router_param_count(&self) -> usize {
        self.gate.as_ref().map_or(0, |g| g.w_g.len())
            + self.threshold.as_ref().map_or(0, |t| t.w_tau.len() + t.b_tau.len())
    }
}

impl Parameterized for AdaMoleLinear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join_name(prefix, "w0"), &self.w0);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit_params(&join_name(prefix, &format!("experts.{i}")), f);
        }
        if let Some(g) = &self.gate {
            g.visit_params(&join_name(prefix, "gate"), f);
        }
        if let Some(t) = &self.threshold {
            t.visit_params(&join_name(prefix, "threshold"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join_name(prefix, "w0"), &mut self.w0);
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_params_mut(&join_name(prefix, &format!("experts.{i}")), f);
        }
        if let Some(g) = &mut self.gate {
            g.visit_params_mut(&join_name(prefix, "gate"), f);
        }
        if let Some(t) = &mut self.threshold {
            t.visit_params_mut(&join_name(prefix, "threshold"), f);
        }
    }
}
