//! Finite-difference sweep over every layer type, shared by the `gradcheck`
//! command and the test suite.
//!
//! Each section instantiates its component with random (non-initial) weights
//! so that every path carries signal, draws a random scalar objective, and
//! compares the analytic gradients against [`check_params`] and
//! [`finite_diff`]. Probes whose routing margin is within
//! [`MIN_ROUTING_MARGIN`] of an indicator boundary are redrawn.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gating::{adaptive_weights, mix_backward, GateNetwork, MixScore, ThresholdNetwork};
use crate::lora::LoraExpert;
use crate::model::{Block, ModelInput, ToyModel, ToyModelConfig};
use crate::moe_layer::{routing_margin, AdaMoleLinear, AdapterConfig, MixMode};
use crate::numeric::{dot, rng_for, softmax, Matrix, Parameterized};
use crate::oracle::{check_params, finite_diff, relative_error, GradReport, ParamError, FD_EPSILON, MIN_ROUTING_MARGIN};
use crate::training::cross_entropy;

const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Serialize)]
pub struct Section {
    pub name: String,
    pub seeds: usize,
    pub report: GradReport,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SuiteReport {
    pub sections: Vec<Section>,
    /// Probes discarded for sitting too close to a routing boundary.
    pub redrawn: usize,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.sections.iter().map(|s| s.report.max_rel_error()).fold(0.0, f64::max)
    }

    /// Section name and entry with the largest relative error.
    pub fn worst(&self) -> Option<(&str, &ParamError)> {
        self.sections
            .iter()
            .filter_map(|s| s.report.worst().map(|w| (s.name.as_str(), w)))
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Runs every section `n_seeds` times, seeding each instance from `seed`.
pub fn gradient_suite(seed: u64, n_seeds: usize) -> Result<SuiteReport> {
    if n_seeds == 0 {
        return Err(Error::Config("gradient suite needs at least one seed".into()));
    }
    let mut suite = SuiteReport::default();
    let mut rng = rng_for(seed, "gradcheck");
    let push = |suite: &mut SuiteReport, name: &str, report: GradReport| {
        suite.sections.push(Section {
            name: name.to_string(),
            seeds: n_seeds,
            report: merge_by_name(report),
        });
    };

    let mut report = GradReport::default();
    for s in 0..n_seeds as u64 {
        report.extend(lora_case(seed ^ s, &mut rng)?);
    }
    push(&mut suite, "lora_expert", report);

    let mut report = GradReport::default();
    for s in 0..n_seeds as u64 {
        report.extend(gate_case(seed ^ s, &mut rng)?);
    }
    push(&mut suite, "gate", report);

    let mut report = GradReport::default();
    for s in 0..n_seeds as u64 {
        report.extend(threshold_case(seed ^ s, &mut rng)?);
    }
    push(&mut suite, "threshold", report);

    let mut report = GradReport::default();
    for _ in 0..n_seeds {
        report.extend(mix_case(&mut rng, &mut suite.redrawn)?);
    }
    push(&mut suite, "adaptive_mix", report);

    for (name, mode, n) in modes() {
        let mut report = GradReport::default();
        for s in 0..n_seeds as u64 {
            report.extend(layer_case(mode, n, seed ^ s, &mut rng, &mut suite.redrawn)?);
        }
        push(&mut suite, &format!("layer.{name}"), report);
    }

    let mut report = GradReport::default();
    for s in 0..n_seeds as u64 {
        report.extend(block_case(seed ^ s, &mut rng, &mut suite.redrawn)?);
    }
    push(&mut suite, "attention_block", report);

    for (name, mode, n) in modes() {
        let mut report = GradReport::default();
        for s in 0..n_seeds as u64 {
            report.extend(model_case(mode, n, seed.wrapping_add(1000 + s), &mut suite.redrawn)?);
        }
        push(&mut suite, &format!("model_loss.{name}"), report);
    }
    Ok(suite)
}

fn modes() -> [(&'static str, MixMode, usize); 4] {
    [
        ("single_lora", MixMode::SingleLora, 1),
        ("top_k", MixMode::TopK { k: 2 }, 3),
        ("fixed_threshold", MixMode::FixedThreshold { tau: 0.2 }, 3),
        ("adaptive", MixMode::Adaptive { tau_max: 1.0 / 3.0 }, 3),
    ]
}

/// Keeps the worst entry per parameter name across seeds.
fn merge_by_name(report: GradReport) -> GradReport {
    let mut out: Vec<ParamError> = Vec::new();
    for p in report.params {
        match out.iter_mut().find(|o| o.name == p.name) {
            Some(o) => {
                o.checked += p.checked;
                if p.max_rel_error > o.max_rel_error {
                    let checked = o.checked;
                    *o = p;
                    o.checked = checked;
                }
            }
            None => out.push(p),
        }
    }
    GradReport { params: out }
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Matrix::new(rows, cols, data).expect("finite uniform draws")
}

fn uniform_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> ParamError {
    let mut worst = ParamError {
        name: name.to_string(),
        checked: analytic.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        if err >= worst.max_rel_error {
            worst.max_rel_error = err;
            worst.worst_index = i;
            worst.analytic = a;
            worst.numeric = n;
        }
    }
    worst
}

/// Central differences of `f` around `x`, compared with `analytic`.
fn input_check(name: &str, x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> Result<f64>) -> Result<ParamError> {
    let (rows, cols) = (x.rows(), x.cols());
    let mut failure = None;
    let numeric = finite_diff(
        |t| match Matrix::new(rows, cols, t.to_vec()).and_then(|m| f(&m)) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        x.data(),
        FD_EPSILON,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(compare(name, analytic.data(), &numeric?))
}

fn lora_case(seed: u64, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut e = LoraExpert::new(4, 6, 2, 8.0, seed)?;
    e.b.value = uniform(4, 2, rng);
    e.a.value = uniform(2, 6, rng);
    let x = uniform(3, 6, rng);
    let g = uniform(3, 4, rng);
    e.forward(&x)?;
    let grad_x = e.backward(&g)?;
    let mut report = check_params(&mut e, |e| Ok(dot(e.eval(&x)?.data(), g.data())), 100, seed)?;
    let x_err = input_check("x", &x, &grad_x, |m| Ok(dot(e.eval(m)?.data(), g.data())))?;
    report.params.push(x_err);
    Ok(report)
}

fn gate_case(seed: u64, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut gate = GateNetwork::new(4, 5, seed)?;
    gate.w_g.value = uniform(4, 5, rng);
    let x = uniform_vec(5, rng);
    let up = uniform_vec(4, rng);
    let p = gate.gate_probs(&x)?;
    let gx = gate.backward(&x, &p, &up)?;
    let mut report = check_params(&mut gate, |g| Ok(dot(&g.gate_probs(&x)?, &up)), 100, seed)?;
    let fd = finite_diff(|t| gate.gate_probs(t).map_or(f64::NAN, |p| dot(&p, &up)), &x, FD_EPSILON)?;
    report.params.push(compare("x", &gx, &fd));
    Ok(report)
}

fn threshold_case(seed: u64, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let mut th = ThresholdNetwork::new(5, 0.25)?;
    th.w_tau.value = uniform(1, 5, rng);
    th.b_tau.value = uniform(1, 1, rng);
    let x = uniform_vec(5, rng);
    let up = rng.gen_range(-2.0..2.0);
    let gx = th.backward(&x, up)?;
    let mut report = check_params(&mut th, |t| Ok(up * t.compute_threshold(&x)?), 100, seed)?;
    let fd = finite_diff(|t| th.compute_threshold(t).map_or(f64::NAN, |v| up * v), &x, FD_EPSILON)?;
    report.params.push(compare("x", &gx, &fd));
    Ok(report)
}

fn mix_case(rng: &mut ChaCha8Rng, redrawn: &mut usize) -> Result<GradReport> {
    let n = 6;
    for _ in 0..MAX_REDRAWS {
        let p = softmax(&uniform_vec(n, rng))?;
        let tau = rng.gen_range(0.0..0.3);
        let mix = adaptive_weights(&p, tau);
        if mix.active_count == 0 || p.iter().any(|pi| (pi - tau).abs() <= MIN_ROUTING_MARGIN) {
            *redrawn += 1;
            continue;
        }
        let g = uniform_vec(n, rng);
        let (gp, gt) = mix_backward(&p, tau, &mix, MixScore::Margin, &g);
        let mut theta = p.clone();
        theta.push(tau);
        let fd = finite_diff(|t| dot(&adaptive_weights(&t[..n], t[n]).weights, &g), &theta, FD_EPSILON)?;
        return Ok(GradReport {
            params: vec![compare("p", &gp, &fd[..n]), compare("tau", &[gt], &fd[n..])],
        });
    }
    Err(Error::Numeric("no mixing probe cleared the routing margin".into()))
}

fn randomize_layer(layer: &mut AdaMoleLinear, b_scale: f64, rng: &mut ChaCha8Rng) {
    for e in &mut layer.experts {
        e.a.value = uniform(e.a.value.rows(), e.a.value.cols(), rng);
        e.b.value = uniform(e.b.value.rows(), e.b.value.cols(), rng).scale(b_scale);
    }
    if let Some(g) = layer.gate.as_mut() {
        g.w_g.value = uniform(g.w_g.value.rows(), g.w_g.value.cols(), rng);
    }
    if let Some(t) = layer.threshold.as_mut() {
        t.w_tau.value = uniform(1, t.w_tau.value.cols(), rng).scale(0.3);
    }
}

fn layer_loss(layer: &AdaMoleLinear, x: &Matrix, g: &Matrix, coeff: f64) -> Result<f64> {
    let mut copy = layer.clone();
    let (h, _) = copy.forward(x)?;
    Ok(dot(h.data(), g.data()) + coeff * copy.balance_loss()?)
}

fn layer_case(mode: MixMode, n: usize, seed: u64, rng: &mut ChaCha8Rng, redrawn: &mut usize) -> Result<GradReport> {
    let cfg = AdapterConfig {
        n_experts: n,
        rank: 1,
        alpha: 2.0,
        dropout: 0.0,
        mode,
    };
    let coeff = 0.3;
    for _ in 0..MAX_REDRAWS {
        let mut layer = AdaMoleLinear::new(uniform(6, 4, rng), &cfg, seed)?;
        randomize_layer(&mut layer, 0.5, rng);
        let x = uniform(3, 4, rng);
        let g = uniform(3, 6, rng);
        let (_, recs) = layer.forward(&x)?;
        if recs.iter().any(|r| routing_margin(r, &mode) <= MIN_ROUTING_MARGIN) {
            *redrawn += 1;
            continue;
        }
        let grad_x = layer.backward(&g, coeff)?;
        let mut report = check_params(&mut layer, |l| layer_loss(l, &x, &g, coeff), 1000, seed)?;
        let x_err = input_check("x", &x, &grad_x, |m| layer_loss(&layer, m, &g, coeff))?;
        report.params.push(x_err);
        return Ok(report);
    }
    Err(Error::Numeric(format!("no {mode:?} layer probe cleared the routing margin")))
}

fn tiny_config(mode: MixMode, n: usize, seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        n_layers: 2,
        d_model: 6,
        d_ff: 8,
        vocab_size: 12,
        seq_len: 4,
        n_classes: 3,
        input_features: 3,
        n_experts: n,
        lora_rank: 1,
        lora_alpha: 2.0,
        mode,
        seed,
        ..Default::default()
    }
}

fn block_loss(block: &Block, x: &Matrix, g: &Matrix, coeff: f64) -> Result<f64> {
    let mut copy = block.clone();
    let (out, _) = copy.forward(x)?;
    let mut balance = 0.0;
    for layer in &copy.projections {
        balance += layer.balance_loss()?;
    }
    Ok(dot(out.data(), g.data()) + coeff * balance)
}

fn block_case(seed: u64, rng: &mut ChaCha8Rng, redrawn: &mut usize) -> Result<GradReport> {
    let mode = MixMode::Adaptive { tau_max: 1.0 / 3.0 };
    let cfg = tiny_config(mode, 3, seed);
    let coeff = 0.3;
    for _ in 0..MAX_REDRAWS {
        let mut block = Block::new(&cfg, seed)?;
        // small adapter deltas keep the attention scores moderate; large
        // ones push the loss scale up until rounding swamps tiny gradients
        for layer in &mut block.projections {
            randomize_layer(layer, 0.1, rng);
        }
        let x = uniform(cfg.seq_len, cfg.d_model, rng);
        let g = uniform(cfg.seq_len, cfg.d_model, rng);
        let (_, recs) = block.forward(&x)?;
        if recs.iter().flatten().any(|r| routing_margin(r, &mode) <= MIN_ROUTING_MARGIN) {
            *redrawn += 1;
            continue;
        }
        let grad_x = block.backward(&g, coeff)?;
        let mut report = check_params(&mut block, |b| block_loss(b, &x, &g, coeff), 6, seed)?;
        let x_err = input_check("x", &x, &grad_x, |m| block_loss(&block, m, &g, coeff))?;
        report.params.push(x_err);
        return Ok(report);
    }
    Err(Error::Numeric("no block probe cleared the routing margin".into()))
}

fn model_case(mode: MixMode, n: usize, seed: u64, redrawn: &mut usize) -> Result<GradReport> {
    let aux = 0.05;
    for attempt in 0..MAX_REDRAWS as u64 {
        let s = seed.wrapping_add(attempt * 7919);
        let mut model = ToyModel::new(tiny_config(mode, n, s))?;
        let mut rng = rng_for(s, "gradcheck.model");
        model.visit_params_mut("", &mut |name, p| {
            let (r, c) = (p.value.rows(), p.value.cols());
            if name.contains("experts") && name.ends_with(".b") {
                p.value = uniform(r, c, &mut rng).scale(0.5);
            } else if name.ends_with("w_g") {
                p.value = uniform(r, c, &mut rng);
            } else if name.ends_with("w_tau") {
                p.value = uniform(r, c, &mut rng).scale(0.3);
            }
        });
        let input = if s % 2 == 0 {
            ModelInput::Tokens((0..4).map(|_| rng.gen_range(0..12)).collect())
        } else {
            ModelInput::Features(uniform(4, 3, &mut rng))
        };
        let label = rng.gen_range(0..3);
        let out = model.forward(&input)?;
        let clear = out
            .records
            .iter()
            .flat_map(|pr| &pr.records)
            .all(|r| routing_margin(r, &mode) > MIN_ROUTING_MARGIN);
        if !clear {
            *redrawn += 1;
            continue;
        }
        let (_, grad) = cross_entropy(&out.logits, label)?;
        model.backward(&grad, aux)?;
        let loss = |m: &mut ToyModel| -> Result<f64> {
            let out = m.forward(&input)?;
            let balance: f64 = m.balance_losses()?.iter().sum();
            Ok(cross_entropy(&out.logits, label)?.0 + aux * balance)
        };
        return check_params(&mut model, loss, 6, s);
    }
    Err(Error::Numeric(format!("no {mode:?} model probe cleared the routing margin")))
}
