//! Optimizer, schedule, loss, synthetic tasks and the training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelInput, ToyModel};
use crate::numeric::{derive_seed, rng_for, softmax, Matrix, ParamGroup, Parameter, Parameterized};
use crate::telemetry::ActivationStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub aux_coeff: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set; data is cycled as needed.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Also decay LoRA `A`/`B` (off by default: only router and head decay).
    pub decay_adapters: bool,
    /// Evaluate on the validation split every this many steps (0: only at the end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            warmup_steps: 200,
            aux_coeff: 1e-3,
            epochs: 1,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_adapters: false,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be positive");
        }
        if self.aux_coeff < 0.0 || self.weight_decay < 0.0 {
            return bad("aux_coeff and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("AdamW betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Linear warm-up to `cfg.lr`, constant afterwards. Steps are 1-based.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 {
        return cfg.lr;
    }
    cfg.lr * (step as f64 / cfg.warmup_steps as f64).min(1.0)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub step: u64,
    moments: Vec<(Matrix, Matrix)>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every trainable parameter from its accumulated gradient,
    /// then zeroes all gradients.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let fresh = self.moments.is_empty();
        let mut slot = 0usize;
        let mut failure: Option<Error> = None;
        let moments = &mut self.moments;
        model.visit_params_mut("", &mut |name, p: &mut Parameter| {
            if !p.trainable {
                p.zero_grad();
                return;
            }
            if fresh {
                let (r, c) = p.value.shape();
                moments.push((Matrix::zeros(r, c), Matrix::zeros(r, c)));
            }
            let Some((m, v)) = moments.get_mut(slot) else {
                failure.get_or_insert(Error::State(format!("optimizer has no state for {name}")));
                return;
            };
            slot += 1;
            if m.shape() != p.value.shape() {
                failure.get_or_insert(Error::shape(
                    "adamw_step",
                    format!("{:?}", m.shape()),
                    format!("{name} {:?}", p.value.shape()),
                ));
                return;
            }
            let decay = match p.group {
                ParamGroup::Adapter if !cfg.decay_adapters => 0.0,
                _ => cfg.weight_decay,
            };
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                let mi = &mut m.data_mut()[i];
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                let m_hat = *mi / bias1;
                let vi = &mut v.data_mut()[i];
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let v_hat = *vi / bias2;
                values[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * values[i]);
            }
            p.zero_grad();
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if slot != self.moments.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, model has {slot}",
                self.moments.len()
            )));
        }
        Ok(())
    }
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Validation(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let p = softmax(logits)?;
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `CE(logits, label) + aux_coeff · Σ balance_losses`.
pub fn total_loss(logits: &[f64], label: usize, balance_losses: &[f64], aux_coeff: f64) -> Result<f64> {
    let (ce, _) = cross_entropy(logits, label)?;
    Ok(ce + aux_coeff * balance_losses.iter().sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterRoutingSpec {
    pub clusters: usize,
    pub dim: usize,
    pub features_per_token: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub cluster_std: f64,
    /// Minimum pairwise center distance, in units of `cluster_std`.
    pub separation: f64,
    pub val_fraction: f64,
}

impl Default for ClusterRoutingSpec {
    fn default() -> Self {
        Self {
            clusters: 4,
            dim: 16,
            features_per_token: 4,
            n_classes: 4,
            n_samples: 2048,
            cluster_std: 1.0,
            separation: 8.0,
            val_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenRuleSpec {
    pub n_rules: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_samples: usize,
    pub val_fraction: f64,
}

impl Default for TokenRuleSpec {
    fn default() -> Self {
        Self {
            n_rules: 4,
            vocab_size: 64,
            seq_len: 8,
            n_classes: 4,
            n_samples: 2048,
            val_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    ClusterRouting(ClusterRoutingSpec),
    TokenRule(TokenRuleSpec),
}

impl TaskSpec {
    pub fn generate(&self, seed: u64) -> Result<SyntheticTask> {
        match self {
            TaskSpec::ClusterRouting(s) => make_cluster_routing(s, seed),
            TaskSpec::TokenRule(s) => make_token_rule(s, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub label: usize,
    /// Cluster or rule the example was drawn from.
    pub group: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub n_classes: usize,
    pub n_groups: usize,
    /// Cluster centers (cluster routing only).
    pub centers: Vec<Vec<f64>>,
    /// Raw flat inputs, parallel to `train`/`val` (cluster routing only).
    pub raw_train: Vec<Vec<f64>>,
    pub raw_val: Vec<Vec<f64>>,
}

impl SyntheticTask {
    /// Accuracy of always predicting the most frequent validation label.
    pub fn majority_baseline(&self) -> f64 {
        let mut counts = vec![0usize; self.n_classes];
        for e in &self.val {
            counts[e.label] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.val.len().max(1) as f64
    }

    pub fn chance_accuracy(&self) -> f64 {
        1.0 / self.n_classes as f64
    }
}

fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Config(format!("cannot split {n} samples with val_fraction {val_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "task.split"));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

/// Gaussian clusters with a cluster-specific linear labeling rule: the label
/// of `x` from cluster `c` is `argmax(T_c (x − μ_c))`.
pub fn make_cluster_routing(spec: &ClusterRoutingSpec, seed: u64) -> Result<SyntheticTask> {
    let s = spec;
    if s.clusters < 2 {
        return Err(Error::Config(format!("need at least two clusters, got {}", s.clusters)));
    }
    if s.dim == 0 || s.features_per_token == 0 || s.dim % s.features_per_token != 0 {
        return Err(Error::Config(format!(
            "dim {} must be a positive multiple of features_per_token {}",
            s.dim, s.features_per_token
        )));
    }
    if s.n_classes < 2 || s.n_samples < 2 * s.clusters {
        return Err(Error::Config("need at least two classes and two samples per cluster".into()));
    }
    if !(s.cluster_std > 0.0) || s.separation < 6.0 {
        return Err(Error::Config("cluster_std must be positive and separation at least 6".into()));
    }
    let mut rng = rng_for(seed, "task.clusters");
    let min_dist = s.separation * s.cluster_std;
    let spread = min_dist;
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut attempts = 0;
    while centers.len() < s.clusters {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config("could not place well-separated cluster centers".into()));
        }
        let c: Vec<f64> = (0..s.dim)
            .map(|_| spread * sample_normal(&mut rng))
            .collect();
        if centers.iter().all(|o| euclid(o, &c) >= min_dist) {
            centers.push(c);
        }
    }
    let maps: Vec<Vec<Vec<f64>>> = (0..s.clusters)
        .map(|_| {
            (0..s.n_classes)
                .map(|_| (0..s.dim).map(|_| sample_normal(&mut rng)).collect())
                .collect()
        })
        .collect();

    let positions = s.dim / s.features_per_token;
    let mut examples = Vec::with_capacity(s.n_samples);
    let mut raw = Vec::with_capacity(s.n_samples);
    for i in 0..s.n_samples {
        let c = i % s.clusters;
        let offset: Vec<f64> = (0..s.dim)
            .map(|_| s.cluster_std * sample_normal(&mut rng))
            .collect();
        let x: Vec<f64> = centers[c].iter().zip(&offset).map(|(m, o)| m + o).collect();
        let scores: Vec<f64> = maps[c].iter().map(|row| row.iter().zip(&offset).map(|(a, b)| a * b).sum()).collect();
        let label = argmax(&scores);
        let features = Matrix::new(positions, s.features_per_token, x.clone())?;
        examples.push(Example {
            input: ModelInput::Features(features),
            label,
            group: c,
        });
        raw.push(x);
    }
    let (train_indices, val_indices) = split_indices(s.n_samples, s.val_fraction, seed)?;
    Ok(SyntheticTask {
        spec: TaskSpec::ClusterRouting(s.clone()),
        train: train_indices.iter().map(|&i| examples[i].clone()).collect(),
        val: val_indices.iter().map(|&i| examples[i].clone()).collect(),
        raw_train: train_indices.iter().map(|&i| raw[i].clone()).collect(),
        raw_val: val_indices.iter().map(|&i| raw[i].clone()).collect(),
        train_indices,
        val_indices,
        n_classes: s.n_classes,
        n_groups: s.clusters,
        centers,
    })
}

/// Sequences `[rule, t₁, …]`; rule `r` labels a sequence by the token at
/// position `1 + r mod (len − 1)`, modulo the class count.
pub fn make_token_rule(spec: &TokenRuleSpec, seed: u64) -> Result<SyntheticTask> {
    let s = spec;
    if s.n_rules < 1 || s.seq_len < 2 || s.n_classes < 2 {
        return Err(Error::Config("token rule task needs rules ≥ 1, seq_len ≥ 2, classes ≥ 2".into()));
    }
    if s.vocab_size <= s.n_rules + s.n_classes {
        return Err(Error::Config(format!(
            "vocab_size {} too small for {} rule tokens",
            s.vocab_size, s.n_rules
        )));
    }
    let mut rng = rng_for(seed, "task.tokens");
    let mut examples = Vec::with_capacity(s.n_samples);
    for i in 0..s.n_samples {
        let rule = i % s.n_rules;
        let mut tokens = vec![rule];
        tokens.extend((1..s.seq_len).map(|_| rng.gen_range(s.n_rules..s.vocab_size)));
        let pos = 1 + rule % (s.seq_len - 1);
        let label = (tokens[pos] - s.n_rules) % s.n_classes;
        examples.push(Example {
            input: ModelInput::Tokens(tokens),
            label,
            group: rule,
        });
    }
    let (train_indices, val_indices) = split_indices(s.n_samples, s.val_fraction, seed)?;
    Ok(SyntheticTask {
        spec: TaskSpec::TokenRule(s.clone()),
        train: train_indices.iter().map(|&i| examples[i].clone()).collect(),
        val: val_indices.iter().map(|&i| examples[i].clone()).collect(),
        train_indices,
        val_indices,
        n_classes: s.n_classes,
        n_groups: s.n_rules,
        centers: Vec::new(),
        raw_train: Vec::new(),
        raw_val: Vec::new(),
    })
}

fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub aux_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub stats: ActivationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub chance_accuracy: f64,
    pub avg_active_experts: Option<f64>,
    pub trainable_params: usize,
    pub loss_curve: Vec<StepRecord>,
    pub activations: ActivationStats,
}

impl TrainReport {
    pub fn write_loss_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "loss", "lr", "aux_loss", "val_acc"])?;
        for r in &self.loss_curve {
            w.write_record([
                r.step.to_string(),
                format!("{:.10}", r.loss),
                format!("{:e}", r.lr),
                format!("{:.10}", r.aux_loss),
                r.val_acc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accuracy, mean cross-entropy and activation counts over `examples`.
pub fn evaluate(model: &ToyModel, examples: &[Example]) -> Result<Evaluation> {
    let mut stats = ActivationStats::new(model.n_layers(), model.n_experts());
    let mut correct = 0usize;
    let mut loss = 0.0;
    for e in examples {
        let out = model.predict(&e.input)?;
        out.record_into(&mut stats)?;
        if argmax(&out.logits) == e.label {
            correct += 1;
        }
        loss += cross_entropy(&out.logits, e.label)?.0;
    }
    let n = examples.len().max(1) as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
        stats,
    })
}

/// One optimizer step over `batch`. Returns mean (total loss, aux loss).
pub fn train_step(
    model: &mut ToyModel,
    optimizer: &mut AdamWState,
    batch: &[&Example],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut aux = 0.0;
    for e in batch {
        let out = model.forward(&e.input)?;
        let (ce, mut grad) = cross_entropy(&out.logits, e.label)?;
        let balance: f64 = model.balance_losses()?.iter().sum();
        loss += scale * (ce + cfg.aux_coeff * balance);
        aux += scale * balance;
        grad.iter_mut().for_each(|g| *g *= scale);
        model.backward(&grad, cfg.aux_coeff * scale)?;
    }
    optimizer.step(model, lr, cfg)?;
    Ok((loss, aux))
}

/// Trains `model` on `task.train`, evaluating on `task.val`.
pub fn train(model: &mut ToyModel, task: &SyntheticTask, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if task.train.is_empty() || task.val.is_empty() {
        return Err(Error::Config("task has an empty split".into()));
    }
    if task.n_classes != model.config().n_classes {
        return Err(Error::Config(format!(
            "task has {} classes, model has {}",
            task.n_classes,
            model.config().n_classes
        )));
    }
    let per_epoch = task.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(per_epoch * cfg.epochs);
    let mut optimizer = AdamWState::new();
    let mut curve = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    model.set_training(true);
    for step in 1..=total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor >= order.len() {
                order = (0..task.train.len()).collect();
                order.shuffle(&mut rng_for(derive_seed(cfg.seed, "shuffle"), &epoch.to_string()));
                epoch += 1;
                cursor = 0;
                // an epoch boundary ends the batch unless it is still empty
                if !batch.is_empty() {
                    break;
                }
            }
            batch.push(&task.train[order[cursor]]);
            cursor += 1;
        }
        let lr = lr_at(step, cfg);
        let (loss, aux) = train_step(model, &mut optimizer, &batch, lr, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        let val_acc = if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != total_steps {
            model.set_training(false);
            let acc = evaluate(model, &task.val)?.accuracy;
            model.set_training(true);
            Some(acc)
        } else {
            None
        };
        curve.push(StepRecord {
            step,
            loss,
            lr,
            aux_loss: aux,
            val_acc,
        });
    }
    model.set_training(false);
    model.clear_cache();
    let eval = evaluate(model, &task.val)?;
    if let Some(last) = curve.last_mut() {
        last.val_acc = Some(eval.accuracy);
    }
    let window = curve.len().min(50);
    let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len().max(1) as f64;
    Ok(TrainReport {
        steps: total_steps,
        initial_loss: mean(&curve[..window]),
        final_loss: mean(&curve[curve.len() - window..]),
        val_accuracy: eval.accuracy,
        val_loss: eval.loss,
        chance_accuracy: task.chance_accuracy(),
        avg_active_experts: eval.stats.global_average(),
        trainable_params: model.trainable_param_count(),
        loss_curve: curve,
        activations: eval.stats,
    })
}

/// How concentrated routing is per group: for every (group, adapted matrix)
/// pair, the entropy of the distribution of each token's most-weighted
/// expert, divided by `ln N`. Returns the mean ratio over pairs that saw at
/// least one weighted token.
pub fn routing_entropy_ratio(model: &ToyModel, examples: &[Example], n_groups: usize) -> Result<f64> {
    let n = model.n_experts();
    if n < 2 {
        return Ok(0.0);
    }
    let adapted = 4 * model.n_layers();
    let mut counts = vec![vec![vec![0usize; n]; adapted]; n_groups];
    for e in examples {
        let out = model.predict(&e.input)?;
        for (slot, pr) in out.records.iter().enumerate() {
            for rec in &pr.records {
                if let Some(top) = rec.weights.top_expert() {
                    counts[e.group][slot][top] += 1;
                }
            }
        }
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    for group in &counts {
        for hist in group {
            let sum: usize = hist.iter().sum();
            if sum == 0 {
                continue;
            }
            let h: f64 = hist
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let q = c as f64 / sum as f64;
                    -q * q.ln()
                })
                .sum();
            total += h / (n as f64).ln();
            cells += 1;
        }
    }
    Ok(if cells == 0 { 1.0 } else { total / cells as f64 })
}
