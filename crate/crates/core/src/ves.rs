//! Variationally enhanced sampling with Chebyshev basis expansions.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{BCGeometry, PathBias, PathGradient, PathState, SystemSpec};

/// `T_k(t)` and `T_k'(t)` by the three-term recurrences, `t` clamped to
/// `[-1, 1]`.
pub fn chebyshev_eval(k: usize, t: f64) -> (f64, f64) {
    let t = t.clamp(-1.0, 1.0);
    if k == 0 {
        return (1.0, 0.0);
    }
    // T_k via the T recurrence, T_k' = k U_{k-1} via the U recurrence
    let (mut t0, mut t1) = (1.0, t);
    let (mut u0, mut u1) = (1.0, 2.0 * t);
    for _ in 1..k {
        let t2 = 2.0 * t * t1 - t0;
        t0 = t1;
        t1 = t2;
        let u2 = 2.0 * t * u1 - u0;
        u0 = u1;
        u1 = u2;
    }
    (t1, k as f64 * u0)
}

/// Fill `values[j] = T_j(t)`, `derivs[j] = T_j'(t)` for `j = 0..values.len()`.
fn chebyshev_table(t: f64, values: &mut [f64], derivs: &mut [f64]) {
    let t = t.clamp(-1.0, 1.0);
    let n = values.len();
    if n == 0 {
        return;
    }
    values[0] = 1.0;
    derivs[0] = 0.0;
    if n == 1 {
        return;
    }
    values[1] = t;
    derivs[1] = 1.0;
    let (mut u0, mut u1) = (1.0, 2.0 * t);
    for j in 2..n {
        values[j] = 2.0 * t * values[j - 1] - values[j - 2];
        derivs[j] = j as f64 * u1;
        let u2 = 2.0 * t * u1 - u0;
        u0 = u1;
        u1 = u2;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisKind {
    /// Listed Chebyshev orders in one variable.
    Chebyshev1D { orders: Vec<usize> },
    /// `T_i(t_1) T_j(t_2)` for `0 ≤ i, j ≤ max_order`, index `i (max+1) + j`.
    Product2D { max_order: usize },
}

/// Basis functions on a box mapped affinely onto `[-1, 1]` per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub kind: BasisKind,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BasisSet {
    /// `T_2, T_4, ..., T_{2n}` on `[lo, hi]`.
    pub fn even_chebyshev(count: usize, lo: f64, hi: f64) -> Self {
        Self {
            kind: BasisKind::Chebyshev1D {
                orders: (1..=count).map(|k| 2 * k).collect(),
            },
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    pub fn product_chebyshev(max_order: usize, lo: f64, hi: f64) -> Self {
        Self {
            kind: BasisKind::Product2D { max_order },
            lo: vec![lo; 2],
            hi: vec![hi; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.lo.len() != d || self.hi.len() != d {
            return Err(Error::Config("basis domain bounds do not match its dimension".into()));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("basis domain must have lo < hi".into()));
        }
        if self.len() == 0 {
            return Err(Error::Config("basis set is empty".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            BasisKind::Chebyshev1D { .. } => 1,
            BasisKind::Product2D { .. } => 2,
        }
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            BasisKind::Chebyshev1D { orders } => orders.len(),
            BasisKind::Product2D { max_order } => (max_order + 1) * (max_order + 1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn max_order(&self) -> usize {
        match &self.kind {
            BasisKind::Chebyshev1D { orders } => orders.iter().copied().max().unwrap_or(0),
            BasisKind::Product2D { max_order } => *max_order,
        }
    }

    /// Map to `[-1, 1]` (unclamped) and the scale `dt/ds`.
    pub fn to_unit(&self, axis: usize, s: f64) -> (f64, f64) {
        let (lo, hi) = (self.lo[axis], self.hi[axis]);
        let scale = 2.0 / (hi - lo);
        ((2.0 * s - (lo + hi)) / (hi - lo), scale)
    }

    /// Basis values at `s` (length `dim`).
    pub fn values(&self, s: &[f64], out: &mut [f64]) {
        self.evaluate(s, out, None);
    }

    /// Values and gradients; `grads` is `len × dim` row-major.
    pub fn evaluate(&self, s: &[f64], out: &mut [f64], grads: Option<&mut [f64]>) {
        let m = self.max_order() + 1;
        let mut tv = [vec![0.0; m], vec![0.0; m]];
        let mut td = [vec![0.0; m], vec![0.0; m]];
        let mut scale = [0.0; 2];
        for axis in 0..self.dim() {
            let (t, sc) = self.to_unit(axis, s[axis]);
            scale[axis] = if t.abs() > 1.0 { 0.0 } else { sc };
            chebyshev_table(t, &mut tv[axis], &mut td[axis]);
        }
        match &self.kind {
            BasisKind::Chebyshev1D { orders } => {
                for (j, &k) in orders.iter().enumerate() {
                    out[j] = tv[0][k];
                }
                if let Some(g) = grads {
                    for (j, &k) in orders.iter().enumerate() {
                        g[j] = td[0][k] * scale[0];
                    }
                }
            }
            BasisKind::Product2D { max_order } => {
                let m = max_order + 1;
                for i in 0..m {
                    for j in 0..m {
                        out[i * m + j] = tv[0][i] * tv[1][j];
                    }
                }
                if let Some(g) = grads {
                    for i in 0..m {
                        for j in 0..m {
                            let idx = i * m + j;
                            g[2 * idx] = td[0][i] * scale[0] * tv[1][j];
                            g[2 * idx + 1] = tv[0][i] * td[1][j] * scale[1];
                        }
                    }
                }
            }
        }
    }

    /// `E_{p_t}[G_k]` for the uniform target on the box, by Gauss-Legendre
    /// quadrature per coordinate.
    pub fn uniform_expectations(&self) -> Vec<f64> {
        let (nodes, weights) = gauss_legendre(64);
        let n = self.len();
        let mut out = vec![0.0; n];
        let mut vals = vec![0.0; n];
        let map = |axis: usize, t: f64| self.lo[axis] + 0.5 * (t + 1.0) * (self.hi[axis] - self.lo[axis]);
        match self.dim() {
            1 => {
                for (t, w) in nodes.iter().zip(&weights) {
                    self.values(&[map(0, *t)], &mut vals);
                    for k in 0..n {
                        out[k] += 0.5 * w * vals[k];
                    }
                }
            }
            _ => {
                for (t1, w1) in nodes.iter().zip(&weights) {
                    for (t2, w2) in nodes.iter().zip(&weights) {
                        self.values(&[map(0, *t1), map(1, *t2)], &mut vals);
                        for k in 0..n {
                            out[k] += 0.25 * w1 * w2 * vals[k];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        s.iter()
            .enumerate()
            .all(|(a, v)| *v >= self.lo[a] && *v <= self.hi[a])
    }
}

/// Nodes and weights of `n`-point Gauss-Legendre quadrature on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `Σ_k c_k G_k(s)` and its gradient with respect to `s`.
pub fn eval_expansion(basis: &BasisSet, coeffs: &[f64], s: &[f64]) -> (f64, Vec<f64>) {
    let n = basis.len();
    let d = basis.dim();
    let mut vals = vec![0.0; n];
    let mut grads = vec![0.0; n * d];
    basis.evaluate(s, &mut vals, Some(&mut grads));
    let v = vals.iter().zip(coeffs).map(|(g, c)| g * c).sum();
    let mut gs = vec![0.0; d];
    for k in 0..n {
        for a in 0..d {
            gs[a] += coeffs[k] * grads[k * d + a];
        }
    }
    (v, gs)
}

/// Expansion coefficients, their running average, and the uniform target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasState {
    pub basis: BasisSet,
    pub alpha: Vec<f64>,
    pub alpha_avg: Vec<f64>,
    pub iteration: u64,
    pub mu: f64,
    pub beta: f64,
    /// `E_{p_t}[G_k]` for the uniform target on the basis domain.
    pub target_expectations: Vec<f64>,
}

impl BiasState {
    pub fn new(basis: BasisSet, mu: f64, beta: f64) -> Result<Self> {
        basis.validate()?;
        let n = basis.len();
        let target_expectations = basis.uniform_expectations();
        Ok(Self {
            basis,
            alpha: vec![0.0; n],
            alpha_avg: vec![0.0; n],
            iteration: 0,
            mu,
            beta,
            target_expectations,
        })
    }

    /// Restart the optimizer from given coefficients (warm start).
    pub fn with_coefficients(mut self, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != self.basis.len() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.len(),
                got: alpha.len(),
            });
        }
        self.alpha_avg = alpha.clone();
        self.alpha = alpha;
        self.iteration = 0;
        Ok(self)
    }

    /// Uniform target density on the domain.
    pub fn target_density(&self) -> f64 {
        1.0 / self.basis.lo.iter().zip(&self.basis.hi).map(|(l, h)| h - l).product::<f64>()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Bias value and gradient at the averaged coefficients.
pub fn eval_bias(bias: &BiasState, s: &[f64]) -> (f64, Vec<f64>) {
    eval_expansion(&bias.basis, &bias.alpha_avg, s)
}

impl PathBias for BiasState {
    fn energy_gradient(&self, _spec: &SystemSpec, state: &PathState, _geom: &BCGeometry, grad: &mut PathGradient) -> Result<f64> {
        if self.basis.dim() != 1 {
            return Err(Error::Config("a displacement bias needs a one-dimensional basis".into()));
        }
        let (v, g) = eval_bias(self, &[state.x]);
        grad.x += g[0];
        Ok(v)
    }
}

/// Running first and second moments of the basis functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    pub count: u64,
    pub sum: Vec<f64>,
    /// Upper triangle row-major, `k ≤ k'`.
    pub sum_outer: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; n],
            sum_outer: vec![0.0; n * (n + 1) / 2],
        }
    }

    pub fn add_values(&mut self, g: &[f64]) {
        let n = self.sum.len();
        self.count += 1;
        let mut idx = 0;
        for a in 0..n {
            self.sum[a] += g[a];
            let ga = g[a];
            for b in a..n {
                self.sum_outer[idx] += ga * g[b];
                idx += 1;
            }
        }
    }

    pub fn add_sample(&mut self, basis: &BasisSet, s: &[f64], scratch: &mut Vec<f64>) {
        scratch.resize(basis.len(), 0.0);
        basis.values(s, scratch);
        self.add_values(scratch);
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_outer.iter_mut().zip(&other.sum_outer) {
            *a += b;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count as f64).collect()
    }
}

/// `g_k = -⟨G_k⟩_samples + E_{p_t}[G_k]`.
pub fn omega_gradient(acc: &MomentAccumulator, target_expectations: &[f64]) -> Result<Vec<f64>> {
    if acc.count == 0 {
        return Err(Error::InsufficientData {
            what: "VES gradient samples",
            need: 1,
            got: 0,
        });
    }
    Ok(acc
        .mean()
        .iter()
        .zip(target_expectations)
        .map(|(m, t)| t - m)
        .collect())
}

/// `H = β Cov(G)` over the samples; the flag is true when every variance
/// vanished (all samples identical).
pub fn omega_hessian(acc: &MomentAccumulator, beta: f64) -> Result<(DMatrix<f64>, bool)> {
    if acc.count < 2 {
        return Err(Error::InsufficientData {
            what: "VES Hessian samples",
            need: 2,
            got: acc.count as usize,
        });
    }
    let n = acc.sum.len();
    let c = acc.count as f64;
    let mean = acc.mean();
    let mut h = DMatrix::zeros(n, n);
    let mut idx = 0;
    for a in 0..n {
        for b in a..n {
            let cov = acc.sum_outer[idx] / c - mean[a] * mean[b];
            h[(a, b)] = beta * cov;
            h[(b, a)] = beta * cov;
            idx += 1;
        }
    }
    let scale = (0..n).map(|a| acc.sum_outer[a * n - a * (a + 1) / 2 + a].abs() / c).fold(0.0, f64::max);
    let degenerate = (0..n).all(|a| h[(a, a)].abs() <= 1e-14 * beta * scale.max(f64::MIN_POSITIVE));
    if degenerate {
        h.fill(0.0);
    }
    Ok((h, degenerate))
}

/// Averaged stochastic descent: `α ← α - μ (g + H (α - ᾱ))`, then `ᾱ` is
/// the mean of all iterates.
pub fn update_coefficients(bias: &mut BiasState, gradient: &[f64], hessian: &DMatrix<f64>) -> Result<()> {
    let n = bias.alpha.len();
    if gradient.len() != n || hessian.nrows() != n || hessian.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: gradient.len(),
        });
    }
    let dev = DVector::from_iterator(n, bias.alpha.iter().zip(&bias.alpha_avg).map(|(a, b)| a - b));
    let hd = hessian * dev;
    let next: Vec<f64> = (0..n)
        .map(|k| bias.alpha[k] - bias.mu * (gradient[k] + hd[k]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "coefficient update at iteration {}: alpha = {:?}, gradient = {:?}",
            bias.iteration, bias.alpha, gradient
        )));
    }
    bias.alpha = next;
    bias.iteration += 1;
    let w = 1.0 / (bias.iteration as f64 + 1.0);
    for k in 0..n {
        bias.alpha_avg[k] += w * (bias.alpha[k] - bias.alpha_avg[k]);
    }
    Ok(())
}

/// `F(s) = -V_b(s) - (1/β) ln p_t(s)`, shifted so `min F = 0`; points
/// outside the basis domain are dropped.
pub fn recover_free_energy(bias: &BiasState, grid: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ln_pt = bias.target_density().ln();
    recover_free_energy_with(bias, &bias.alpha_avg, grid, |_| ln_pt)
}

pub fn recover_free_energy_with(
    bias: &BiasState,
    coeffs: &[f64],
    grid: &[f64],
    ln_target: impl Fn(f64) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let kept: Vec<f64> = grid.iter().copied().filter(|s| bias.basis.contains(&[*s])).collect();
    let mut f: Vec<f64> = kept
        .iter()
        .map(|s| -eval_expansion(&bias.basis, coeffs, &[*s]).0 - ln_target(*s) / bias.beta)
        .collect();
    let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    f.iter_mut().for_each(|v| *v -= min);
    (kept, f)
}

/// One entry of the append-only optimizer log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesIterationRecord {
    pub iteration: u64,
    pub alpha: Vec<f64>,
    pub alpha_avg: Vec<f64>,
    pub gradient_norm: f64,
    pub samples: u64,
}

pub fn format_ves_log(records: &[VesIterationRecord]) -> String {
    let mut s = String::new();
    if let Some(first) = records.first() {
        let n = first.alpha.len();
        s.push_str("iteration");
        for k in 0..n {
            let _ = write!(s, ",alpha_{k}");
        }
        for k in 0..n {
            let _ = write!(s, ",alpha_avg_{k}");
        }
        s.push_str(",gradient_norm,samples\n");
    }
    for r in records {
        let _ = write!(s, "{}", r.iteration);
        for v in r.alpha.iter().chain(&r.alpha_avg) {
            let _ = write!(s, ",{v:.17e}");
        }
        let _ = writeln!(s, ",{:.17e},{}", r.gradient_norm, r.samples);
    }
    s
}

pub fn parse_ves_log(text: &str) -> Result<Vec<VesIterationRecord>> {
    let mut out = Vec::new();
    let mut lines = text.lines();
    let header = match lines.next() {
        Some(h) => h,
        None => return Ok(out),
    };
    let n = header.split(',').filter(|c| c.starts_with("alpha_") && !c.starts_with("alpha_avg")).count();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 * n + 3 {
            return Err(Error::Parse(format!("VES log line {}: expected {} columns", i + 2, 2 * n + 3)));
        }
        let num = |c: &str| c.parse::<f64>().map_err(|e| Error::Parse(format!("VES log line {}: {e}", i + 2)));
        out.push(VesIterationRecord {
            iteration: cols[0].parse().map_err(|e| Error::Parse(format!("VES log line {}: {e}", i + 2)))?,
            alpha: cols[1..=n].iter().map(|c| num(c)).collect::<Result<_>>()?,
            alpha_avg: cols[n + 1..=2 * n].iter().map(|c| num(c)).collect::<Result<_>>()?,
            gradient_norm: num(cols[2 * n + 1])?,
            samples: cols[2 * n + 2].parse().map_err(|e| Error::Parse(format!("VES log line {}: {e}", i + 2)))?,
        });
    }
    Ok(out)
}

pub fn write_ves_log(path: &Path, records: &[VesIterationRecord]) -> Result<()> {
    std::fs::write(path, format_ves_log(records))?;
    Ok(())
}

/// Gradient-norm plateau detector for the quasi-stationary tail.
///
/// The log is cut into `windows` equal windows; the tail starts at the
/// first window from which every window's mean |g| stays within
/// `(1 + tolerance)` of the smallest mean in that tail. The tail must hold
/// at least `min_tail_fraction` of the records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityDetector {
    pub windows: usize,
    pub tolerance: f64,
    pub min_tail_fraction: f64,
}

impl Default for StationarityDetector {
    fn default() -> Self {
        Self {
            windows: 20,
            tolerance: 0.3,
            min_tail_fraction: 0.3,
        }
    }
}

impl StationarityDetector {
    /// Index of the first record of the stationary tail.
    pub fn tail_start(&self, records: &[VesIterationRecord]) -> Result<usize> {
        let n = records.len();
        let w = n / self.windows.max(1);
        if w < 2 {
            return Err(Error::NotStationary(format!(
                "{n} iterations are too few for {} windows",
                self.windows
            )));
        }
        let nw = n / w;
        // window means with a band of two standard errors, so that a single
        // noisy window does not read as drift
        let bands: Vec<(f64, f64)> = (0..nw)
            .map(|i| {
                let g: Vec<f64> = records[n - (nw - i) * w..n - (nw - i - 1) * w].iter().map(|r| r.gradient_norm).collect();
                let m = g.iter().sum::<f64>() / w as f64;
                let var = g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (w - 1) as f64;
                let se = (var / w as f64).sqrt();
                (m - 2.0 * se, m + 2.0 * se)
            })
            .collect();
        let means: Vec<f64> = bands.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let mut start = nw - 1;
        let mut floor = bands[nw - 1].1;
        let mut peak = bands[nw - 1].0;
        for j in (0..nw - 1).rev() {
            let f = floor.min(bands[j].1);
            let p = peak.max(bands[j].0);
            if p > (1.0 + self.tolerance) * f {
                break;
            }
            floor = f;
            peak = p;
            start = j;
        }
        let first = n - (nw - start) * w;
        let tail = n - first;
        if (tail as f64) < self.min_tail_fraction * n as f64 {
            return Err(Error::NotStationary(format!(
                "gradient norm still drifting: stationary tail holds {tail} of {n} iterations (window means {:.3e} .. {:.3e})",
                means[0],
                means[nw - 1]
            )));
        }
        Ok(first)
    }
}
