//! Gate probabilities, the learned activation threshold, the three mixing
//! rules, and the load-balancing penalty.
//!
//! Every mixing rule has the same shape: pick an active set, give each active
//! expert a non-negative score, and normalize the scores. The 0/1 indicators
//! are constants under differentiation; gradients flow only through the
//! scores. For the adaptive rule the score is `p_i − τ`, which is what lets
//! the threshold network learn at all.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    dot, gaussian_init, join_name, sigmoid, sigmoid_grad, softmax, softmax_backward, Matrix, ParamGroup,
    Parameter, Parameterized,
};

/// Denominators at or below this are treated as "nothing to mix".
pub const MIX_EPSILON: f64 = 1e-12;

/// Std of the gate weight initialization.
pub const GATE_INIT_STD: f64 = 0.01;

fn check_len(op: &'static str, x: &[f64], k: usize) -> Result<()> {
    if x.len() != k {
        return Err(Error::shape(op, format!("input of length {k}"), format!("{}", x.len())));
    }
    Ok(())
}

/// Router producing `p = softmax(W_g x)`.
#[derive(Debug, Clone)]
pub struct GateNetwork {
    /// N×k, no bias.
    pub w_g: Parameter,
}

impl GateNetwork {
    pub fn new(n_experts: usize, in_features: usize, seed: u64) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config("gate needs at least one expert".into()));
        }
        let w = gaussian_init(n_experts, in_features, GATE_INIT_STD, seed, "gate.w_g")?;
        Ok(Self {
            w_g: Parameter::new(w, ParamGroup::Router),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.w_g.value.rows()
    }

    pub fn gate_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("gate_probs", x, self.w_g.value.cols())?;
        softmax(&self.w_g.value.matvec(x)?)
    }

    /// Pulls `upstream = ∂L/∂p` back through the softmax. Accumulates into
    /// `W_g` and returns `∂L/∂x`.
    pub fn backward(&mut self, x: &[f64], p: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        check_len("gate_backward", x, self.w_g.value.cols())?;
        check_len("gate_backward", upstream, self.n_experts())?;
        let dz = softmax_backward(p, upstream);
        let k = x.len();
        let mut grad_x = vec![0.0; k];
        for (i, &dzi) in dz.iter().enumerate() {
            if dzi == 0.0 {
                continue;
            }
            let w_row = self.w_g.value.row(i);
            for (gx, w) in grad_x.iter_mut().zip(w_row) {
                *gx += dzi * w;
            }
            if self.w_g.trainable {
                for (g, xj) in self.w_g.grad.row_mut(i).iter_mut().zip(x) {
                    *g += dzi * xj;
                }
            }
        }
        Ok(grad_x)
    }
}

impl Parameterized for GateNetwork {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join_name(prefix, "w_g"), &self.w_g);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join_name(prefix, "w_g"), &mut self.w_g);
    }
}

/// `τ = τ_max · σ(W_τ x + b_τ)`.
#[derive(Debug, Clone)]
pub struct ThresholdNetwork {
    /// 1×k.
    pub w_tau: Parameter,
    /// 1×1.
    pub b_tau: Parameter,
    tau_max: f64,
}

impl ThresholdNetwork {
    /// Zero-initialized, so every input starts at `τ = τ_max / 2`.
    pub fn new(in_features: usize, tau_max: f64) -> Result<Self> {
        validate_tau_max(tau_max)?;
        Ok(Self {
            w_tau: Parameter::new(Matrix::zeros(1, in_features), ParamGroup::Router),
            b_tau: Parameter::new(Matrix::zeros(1, 1), ParamGroup::Router),
            tau_max,
        })
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_max
    }

    pub fn set_tau_max(&mut self, tau_max: f64) -> Result<()> {
        validate_tau_max(tau_max)?;
        self.tau_max = tau_max;
        Ok(())
    }

    fn pre_activation(&self, x: &[f64]) -> Result<f64> {
        check_len("compute_threshold", x, self.w_tau.value.cols())?;
        Ok(dot(self.w_tau.value.data(), x) + self.b_tau.value.data()[0])
    }

    pub fn compute_threshold(&self, x: &[f64]) -> Result<f64> {
        Ok(self.tau_max * sigmoid(self.pre_activation(x)?))
    }

    /// Accumulates into `W_τ`, `b_τ` given `∂L/∂τ`; returns `∂L/∂x`.
    pub fn backward(&mut self, x: &[f64], grad_tau: f64) -> Result<Vec<f64>> {
        let ds = grad_tau * self.tau_max * sigmoid_grad(self.pre_activation(x)?);
        if self.w_tau.trainable {
            for (g, xj) in self.w_tau.grad.data_mut().iter_mut().zip(x) {
                *g += ds * xj;
            }
        }
        if self.b_tau.trainable {
            self.b_tau.grad.data_mut()[0] += ds;
        }
        Ok(self.w_tau.value.data().iter().map(|w| ds * w).collect())
    }
}

impl Parameterized for ThresholdNetwork {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join_name(prefix, "w_tau"), &self.w_tau);
        f(&join_name(prefix, "b_tau"), &self.b_tau);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join_name(prefix, "w_tau"), &mut self.w_tau);
        f(&join_name(prefix, "b_tau"), &mut self.b_tau);
    }
}

fn validate_tau_max(tau_max: f64) -> Result<()> {
    if !(tau_max > 0.0 && tau_max <= 1.0) {
        return Err(Error::Config(format!("tau_max {tau_max} outside (0, 1]")));
    }
    Ok(())
}

/// Normalized mixing coefficients for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub weights: Vec<f64>,
    pub active_mask: Vec<bool>,
    pub active_count: usize,
}

impl MixWeights {
    /// Index of the largest weight among active experts, if any weight is positive.
    pub fn top_expert(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (&w, &on)) in self.weights.iter().zip(&self.active_mask).enumerate() {
            if on && w > 0.0 && best.is_none_or(|(_, bw)| w > bw) {
                best = Some((i, w));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Normalizes per-expert scores over the active set.
fn normalize(scores: Vec<f64>, active_mask: Vec<bool>) -> MixWeights {
    let active_count = active_mask.iter().filter(|&&a| a).count();
    let total: f64 = scores.iter().zip(&active_mask).filter(|(_, &a)| a).map(|(s, _)| s).sum();
    let weights = if total > MIX_EPSILON {
        scores
            .iter()
            .zip(&active_mask)
            .map(|(&s, &a)| if a { s / total } else { 0.0 })
            .collect()
    } else {
        vec![0.0; scores.len()]
    };
    MixWeights {
        weights,
        active_mask,
        active_count,
    }
}

/// Keeps the `k` largest probabilities (ties to the lower index) and
/// renormalizes them.
pub fn topk_weights(p: &[f64], k: usize) -> Result<MixWeights> {
    if k == 0 || k > p.len() {
        return Err(Error::Config(format!("top-k with k={k} and {} experts", p.len())));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    // stable sort, so equal probabilities keep index order
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    let mut mask = vec![false; p.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(normalize(p.to_vec(), mask))
}

/// Activates every expert with `p_i ≥ τ` and mixes with weights ∝ `p_i`.
pub fn threshold_weights(p: &[f64], tau: f64) -> MixWeights {
    let mask = p.iter().map(|&pi| pi >= tau).collect();
    normalize(p.to_vec(), mask)
}

/// Activates every expert with `p_i ≥ τ` and mixes with weights ∝ `p_i − τ`.
///
/// An expert sitting exactly on the threshold counts as active but carries
/// zero weight.
pub fn adaptive_weights(p: &[f64], tau: f64) -> MixWeights {
    let mask: Vec<bool> = p.iter().map(|&pi| pi >= tau).collect();
    let scores = p.iter().map(|&pi| (pi - tau).max(0.0)).collect();
    normalize(scores, mask)
}

/// Which score a mixing rule normalizes, for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixScore {
    /// Score is `p_i` (top-k and fixed threshold).
    Probability,
    /// Score is `p_i − τ` (adaptive threshold).
    Margin,
}

/// Backward through a mixing rule. Returns `(∂L/∂p, ∂L/∂τ)`; the latter is
/// always zero for [`MixScore::Probability`].
pub fn mix_backward(p: &[f64], tau: f64, mix: &MixWeights, score: MixScore, grad_weights: &[f64]) -> (Vec<f64>, f64) {
    let n = p.len();
    let mut grad_p = vec![0.0; n];
    let offset = match score {
        MixScore::Probability => 0.0,
        MixScore::Margin => tau,
    };
    let total: f64 = (0..n).filter(|&i| mix.active_mask[i]).map(|i| p[i] - offset).sum();
    if mix.active_count == 0 || total <= MIX_EPSILON {
        return (grad_p, 0.0);
    }
    // w_i = u_i / S  ⇒  ∂L/∂u_j = (∂L/∂w_j − Σ_i w_i ∂L/∂w_i) / S
    let weighted = dot(&mix.weights, grad_weights);
    let mut grad_tau = 0.0;
    for j in 0..n {
        if mix.active_mask[j] {
            let du = (grad_weights[j] - weighted) / total;
            grad_p[j] = du;
            grad_tau -= du;
        }
    }
    match score {
        MixScore::Probability => (grad_p, 0.0),
        MixScore::Margin => (grad_p, grad_tau),
    }
}

fn balance_fractions(probs: &Matrix, active: &[Vec<bool>]) -> Result<Option<Vec<f64>>> {
    let (t, n) = probs.shape();
    if t == 0 {
        return Err(Error::shape("load_balance_loss", "at least one routed input", "none"));
    }
    if active.len() != t || active.iter().any(|row| row.len() != n) {
        return Err(Error::shape(
            "load_balance_loss",
            format!("{t}x{n} activation mask"),
            format!("{} rows", active.len()),
        ));
    }
    let mut counts = vec![0usize; n];
    for row in active {
        for (c, &on) in counts.iter_mut().zip(row) {
            *c += usize::from(on);
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(counts.into_iter().map(|c| c as f64 / total as f64).collect()))
}

/// Switch-style balance penalty `N · Σ_i f_i · P_i`, with `f_i` the share of
/// activations landing on expert `i` and `P_i` its mean gate probability.
/// Uniform routing scores 1, all traffic on one expert scores `N`.
pub fn load_balance_loss(probs: &Matrix, active: &[Vec<bool>]) -> Result<f64> {
    let Some(f) = balance_fractions(probs, active)? else {
        return Ok(0.0);
    };
    let (t, n) = probs.shape();
    let mut mean_p = vec![0.0; n];
    for r in 0..t {
        for (m, &v) in mean_p.iter_mut().zip(probs.row(r)) {
            *m += v;
        }
    }
    Ok(n as f64 * f.iter().zip(&mean_p).map(|(fi, pi)| fi * pi / t as f64).sum::<f64>())
}

/// `∂ load_balance_loss / ∂ probs` with the activation shares held fixed.
pub fn load_balance_grad(probs: &Matrix, active: &[Vec<bool>]) -> Result<Matrix> {
    let (t, n) = probs.shape();
    let mut grad = Matrix::zeros(t, n);
    if let Some(f) = balance_fractions(probs, active)? {
        let c = n as f64 / t as f64;
        for r in 0..t {
            for (g, fi) in grad.row_mut(r).iter_mut().zip(&f) {
                *g = c * fi;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: [f64; 3] = [0.5, 0.3, 0.2];

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn gate_probs_examples() {
        let mut g = GateNetwork::new(4, 3, 1).unwrap();
        g.w_g.value = Matrix::zeros(4, 3);
        assert_eq!(g.gate_probs(&[1.0, -2.0, 3.0]).unwrap(), vec![0.25; 4]);

        let mut g2 = GateNetwork::new(2, 1, 1).unwrap();
        g2.w_g.value = Matrix::new(2, 1, vec![2f64.ln(), 0.0]).unwrap();
        assert!(close(&g2.gate_probs(&[1.0]).unwrap(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));

        let g3 = GateNetwork::new(5, 3, 9).unwrap();
        let p = g3.gate_probs(&[0.3, -1.0, 2.0]).unwrap();
        assert!(p.iter().copied().fold(0.0, f64::max) >= 0.2);
        assert!(g3.gate_probs(&[1.0]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let t = ThresholdNetwork::new(3, 0.25).unwrap();
        assert_eq!(t.compute_threshold(&[5.0, -1.0, 2.0]).unwrap(), 0.125);

        let mut t = ThresholdNetwork::new(3, 0.125).unwrap();
        t.w_tau.value = Matrix::new(1, 3, vec![10.0, 10.0, 10.0]).unwrap();
        assert!(t.compute_threshold(&[1.0, 1.0, 1.0]).unwrap() < 0.125);

        let mut t = ThresholdNetwork::new(2, 0.125).unwrap();
        t.b_tau.value = Matrix::new(1, 1, vec![4.0]).unwrap();
        let tau = t.compute_threshold(&[0.3, 0.4]).unwrap();
        // 0.125 / (1 + e^-4)
        assert!((tau - 0.122_751_723_754_738_56).abs() < 1e-12, "{tau}");
        assert!(ThresholdNetwork::new(2, 0.0).is_err());
        assert!(ThresholdNetwork::new(2, 1.5).is_err());
    }

    #[test]
    fn topk_examples() {
        let w = topk_weights(&P, 2).unwrap();
        assert!(close(&w.weights, &[0.625, 0.375, 0.0], 1e-15));
        assert_eq!(w.active_count, 2);
        assert_eq!(topk_weights(&P, 3).unwrap().weights, P.to_vec());
        assert_eq!(topk_weights(&[0.2, 0.5, 0.3], 1).unwrap().weights, vec![0.0, 1.0, 0.0]);
        // ties go to the lower index
        assert_eq!(topk_weights(&[0.4, 0.2, 0.4], 1).unwrap().active_mask, vec![true, false, false]);
        assert!(topk_weights(&P, 0).is_err());
        assert!(topk_weights(&P, 4).is_err());
    }

    #[test]
    fn threshold_rule_examples() {
        let w = threshold_weights(&P, 0.25);
        assert!(close(&w.weights, &[0.625, 0.375, 0.0], 1e-15));
        assert_eq!(threshold_weights(&P, 0.0).weights, P.to_vec());
        assert!(threshold_weights(&P, 1.0 / 3.0).active_count >= 1);
        let none = threshold_weights(&P, 0.6);
        assert_eq!(none.active_count, 0);
        assert_eq!(none.weights, vec![0.0; 3]);
    }

    #[test]
    fn adaptive_rule_examples() {
        let w = adaptive_weights(&P, 0.25);
        assert!(close(&w.weights, &[5.0 / 6.0, 1.0 / 6.0, 0.0], 1e-15));
        assert_eq!(w.active_count, 2);
        assert_eq!(adaptive_weights(&P, 0.0).weights, P.to_vec());
        let single = adaptive_weights(&P, 0.4);
        assert_eq!(single.weights, vec![1.0, 0.0, 0.0]);
        assert_eq!(adaptive_weights(&P, 0.7).active_count, 0);
    }

    #[test]
    fn adaptive_boundary_expert_counts_but_carries_nothing() {
        let w = adaptive_weights(&P, 0.3);
        assert_eq!(w.active_count, 2);
        assert_eq!(w.weights, vec![1.0, 0.0, 0.0]);
        // only the boundary expert active: margin sum is zero
        let w = adaptive_weights(&P, 0.5);
        assert_eq!(w.active_count, 1);
        assert_eq!(w.weights, vec![0.0; 3]);
    }

    #[test]
    fn balance_loss_examples() {
        let n = 4;
        let uniform = Matrix::new(3, n, vec![0.25; 3 * n]).unwrap();
        let all = vec![vec![true; n]; 3];
        assert!((load_balance_loss(&uniform, &all).unwrap() - 1.0).abs() < 1e-12);

        let mut one_hot = Matrix::zeros(3, n);
        let mut first = vec![vec![false; n]; 3];
        for t in 0..3 {
            one_hot.set(t, 0, 1.0);
            first[t][0] = true;
        }
        assert!((load_balance_loss(&one_hot, &first).unwrap() - n as f64).abs() < 1e-12);

        let single = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(load_balance_loss(&single, &[vec![true], vec![true]]).unwrap(), 1.0);

        assert_eq!(load_balance_loss(&uniform, &vec![vec![false; n]; 3]).unwrap(), 0.0);
        assert!(load_balance_loss(&uniform, &all[..2]).is_err());
    }

    #[test]
    fn balance_grad_matches_difference_quotient() {
        let probs = Matrix::from_rows(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]]).unwrap();
        let active = vec![vec![true, true, false], vec![false, true, true]];
        let grad = load_balance_grad(&probs, &active).unwrap();
        let eps = 1e-6;
        for t in 0..2 {
            for i in 0..3 {
                let mut up = probs.clone();
                up.set(t, i, probs.get(t, i) + eps);
                let mut down = probs.clone();
                down.set(t, i, probs.get(t, i) - eps);
                let fd = (load_balance_loss(&up, &active).unwrap() - load_balance_loss(&down, &active).unwrap())
                    / (2.0 * eps);
                assert!((fd - grad.get(t, i)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mix_backward_single_active_is_flat() {
        let mix = adaptive_weights(&P, 0.4);
        let (gp, gt) = mix_backward(&P, 0.4, &mix, MixScore::Margin, &[1.0, 2.0, 3.0]);
        assert_eq!(gp, vec![0.0; 3]);
        assert_eq!(gt, 0.0);
    }
}
