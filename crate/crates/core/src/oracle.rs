//! Independent checks: central differences, a sort-based top-k, and a replay
//! of raw activation counts. Nothing here calls into the code it verifies.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gating::MixWeights;
use crate::numeric::{rng_for, Parameterized};
use crate::telemetry::Projection;

pub const FD_EPSILON: f64 = 1e-5;

/// Smallest routing margin a finite-difference probe may sit at.
pub const MIN_ROUTING_MARGIN: f64 = 1e-3;

/// Denominator floor for [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Central difference `(f(θ+ε) − f(θ−ε)) / 2ε` for every coordinate.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        probe[i] = theta[i] + epsilon;
        let up = f(&probe);
        probe[i] = theta[i] - epsilon;
        let down = f(&probe);
        probe[i] = theta[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!("non-finite objective while probing coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * epsilon));
    }
    Ok(grad)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamError>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |w| w.max_rel_error)
    }

    pub fn extend(&mut self, other: GradReport) {
        self.params.extend(other.params);
    }

    pub fn prefixed(mut self, prefix: &str) -> Self {
        for p in &mut self.params {
            p.name = format!("{prefix}/{}", p.name);
        }
        self
    }
}

/// Compares the gradients currently accumulated in `model` against central
/// differences of `loss`. At most `max_entries` coordinates per parameter are
/// probed, chosen by `seed`. Frozen parameters are skipped.
pub fn check_params<M: Parameterized>(
    model: &mut M,
    mut loss: impl FnMut(&mut M) -> Result<f64>,
    max_entries: usize,
    seed: u64,
) -> Result<GradReport> {
    let mut targets: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params("", &mut |name, p| {
        if p.trainable {
            targets.push((name.to_string(), p.grad.data().to_vec()));
        }
    });
    let mut report = GradReport::default();
    for (name, analytic) in targets {
        let n = analytic.len();
        let indices: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut rng = rng_for(seed, &name);
            let mut v = sample(&mut rng, n, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = ParamError {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &idx in &indices {
            let original = read_entry(model, &name, idx);
            write_entry(model, &name, idx, original + FD_EPSILON);
            let up = loss(model)?;
            write_entry(model, &name, idx, original - FD_EPSILON);
            let down = loss(model)?;
            write_entry(model, &name, idx, original);
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss probing {name}[{idx}]")));
            }
            let numeric = (up - down) / (2.0 * FD_EPSILON);
            let err = relative_error(analytic[idx], numeric);
            if err >= worst.max_rel_error {
                worst.max_rel_error = err;
                worst.worst_index = idx;
                worst.analytic = analytic[idx];
                worst.numeric = numeric;
            }
        }
        report.params.push(worst);
    }
    Ok(report)
}

fn read_entry<M: Parameterized>(model: &M, name: &str, idx: usize) -> f64 {
    let mut out = f64::NAN;
    model.visit_params("", &mut |n, p| {
        if n == name {
            out = p.value.data()[idx];
        }
    });
    out
}

fn write_entry<M: Parameterized>(model: &mut M, name: &str, idx: usize, v: f64) {
    model.visit_params_mut("", &mut |n, p| {
        if n == name {
            p.value.data_mut()[idx] = v;
        }
    });
}

/// Top-k by a full sort of `(probability, index)` pairs, descending in
/// probability and ascending in index.
pub fn brute_force_topk(p: &[f64], k: usize) -> Result<MixWeights> {
    if k < 1 || k > p.len() {
        return Err(Error::Config(format!("top-k with k={k} and {} experts", p.len())));
    }
    let mut pairs: Vec<(f64, usize)> = p.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let kept = &pairs[..k];
    let mut mass = 0.0;
    // accumulate in index order so the rounding matches a left-to-right sum
    let mut kept_idx: Vec<usize> = kept.iter().map(|&(_, i)| i).collect();
    kept_idx.sort_unstable();
    for &i in &kept_idx {
        mass += p[i];
    }
    let mut weights = vec![0.0; p.len()];
    let mut mask = vec![false; p.len()];
    for &i in &kept_idx {
        weights[i] = p[i] / mass;
        mask[i] = true;
    }
    Ok(MixWeights {
        weights,
        active_mask: mask,
        active_count: k,
    })
}

/// Per-cell and global averages recomputed straight from the raw
/// `(layer, projection, active_count)` stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayAverages {
    pub cells: BTreeMap<(usize, Projection), f64>,
    pub global: Option<f64>,
}

pub fn replay_average(records: &[(usize, Projection, usize)]) -> ReplayAverages {
    let mut sums: BTreeMap<(usize, Projection), (u64, u64)> = BTreeMap::new();
    for &(layer, proj, count) in records {
        let e = sums.entry((layer, proj)).or_default();
        e.0 += count as u64;
        e.1 += 1;
    }
    let total: u64 = records.iter().map(|r| r.2 as u64).sum();
    ReplayAverages {
        cells: sums.into_iter().map(|(k, (s, n))| (k, s as f64 / n as f64)).collect(),
        global: (!records.is_empty()).then(|| total as f64 / records.len() as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff(|t| t[0] * t[0], &[3.0], FD_EPSILON).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff(|t| 2.0 * t[0] - 0.5 * t[1] + 1.0, &[0.3, -1.2], FD_EPSILON).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-10 && (g[1] + 0.5).abs() < 1e-10);
        assert!(finite_diff(|_| f64::NAN, &[1.0], FD_EPSILON).is_err());
    }

    #[test]
    fn brute_force_topk_examples() {
        let w = brute_force_topk(&[0.5, 0.3, 0.2], 2).unwrap();
        assert_eq!(w.weights, vec![0.5 / 0.8, 0.3 / 0.8, 0.0]);
        assert_eq!(brute_force_topk(&[0.2, 0.5, 0.3], 1).unwrap().weights, vec![0.0, 1.0, 0.0]);
        assert!(brute_force_topk(&[0.5], 2).is_err());
    }

    #[test]
    fn replay_examples() {
        assert_eq!(replay_average(&[]), ReplayAverages::default());
        let one = replay_average(&[(0, Projection::V, 3)]);
        assert_eq!(one.cells[&(0, Projection::V)], 3.0);
        let a = [(0, Projection::Q, 1), (1, Projection::K, 4), (0, Projection::Q, 2)];
        let b = [(0, Projection::Q, 2), (0, Projection::Q, 1), (1, Projection::K, 4)];
        assert_eq!(replay_average(&a), replay_average(&b));
    }
}
