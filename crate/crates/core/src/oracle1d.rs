//! Exact one-dimensional quantum mechanics on a finite-difference grid.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{momentum_transform, DistributionResult, Normalization, Source};
use crate::linalg::tridiagonal_lowest;

/// Uniform grid on `[-extent, extent]` with hard walls one spacing beyond
/// either end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub extent: f64,
    pub points: usize,
}

impl Default for Grid1D {
    fn default() -> Self {
        Self {
            extent: 6.0,
            points: 2001,
        }
    }
}

impl Grid1D {
    pub fn new(extent: f64, points: usize) -> Result<Self> {
        if points < 201 {
            return Err(Error::Config(format!("oracle grid needs at least 201 points, got {points}")));
        }
        if !(extent > 0.0) {
            return Err(Error::Config("oracle grid extent must be positive".into()));
        }
        Ok(Self { extent, points })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / (self.points - 1) as f64
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -self.extent + self.spacing() * i as f64
    }

    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.coordinate(i)).collect()
    }
}

/// Lowest eigenpairs, `h Σ ψ_m ψ_n = δ_mn`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSolution {
    pub grid: Grid1D,
    pub mass: f64,
    pub energies: Vec<f64>,
    pub wavefunctions: Vec<Vec<f64>>,
}

impl EigenSolution {
    pub fn splitting(&self) -> Option<f64> {
        (self.energies.len() >= 2).then(|| self.energies[1] - self.energies[0])
    }

    /// `h Σ ψ_n(q) ψ_n(-q)`.
    pub fn parity(&self, n: usize) -> f64 {
        let psi = &self.wavefunctions[n];
        let m = psi.len();
        self.grid.spacing() * (0..m).map(|i| psi[i] * psi[m - 1 - i]).sum::<f64>()
    }

    /// Wavefunction value at arbitrary q by linear interpolation, zero
    /// outside the grid.
    pub fn evaluate(&self, n: usize, q: f64) -> f64 {
        let h = self.grid.spacing();
        let t = (q + self.grid.extent) / h;
        if t < 0.0 || t > (self.grid.points - 1) as f64 {
            return 0.0;
        }
        let i = (t.floor() as usize).min(self.grid.points - 2);
        let f = t - i as f64;
        let psi = &self.wavefunctions[n];
        psi[i] * (1.0 - f) + psi[i + 1] * f
    }

    /// Expectation of the finite-difference kinetic energy in state `n`.
    pub fn kinetic_expectation(&self, n: usize) -> f64 {
        let h = self.grid.spacing();
        let psi = &self.wavefunctions[n];
        let m = psi.len();
        let mut s = 0.0;
        for i in 0..m {
            let left = if i > 0 { psi[i - 1] } else { 0.0 };
            let right = if i + 1 < m { psi[i + 1] } else { 0.0 };
            s += psi[i] * (2.0 * psi[i] - left - right);
        }
        s * h / (2.0 * self.mass * h * h)
    }

    pub fn potential_expectation(&self, n: usize, potential: impl Fn(f64) -> f64) -> f64 {
        let h = self.grid.spacing();
        self.wavefunctions[n]
            .iter()
            .enumerate()
            .map(|(i, p)| p * p * potential(self.grid.coordinate(i)))
            .sum::<f64>()
            * h
    }
}

/// Lowest `states` eigenpairs of `-(1/2m) d²/dq² + V(q)` with second-order
/// central differences and hard walls.
pub fn solve_schrodinger(grid: Grid1D, potential: impl Fn(f64) -> f64, mass: f64, states: usize) -> Result<EigenSolution> {
    let n = grid.points;
    if states == 0 || states * 4 > n {
        return Err(Error::Config(format!("{states} states requested on a {n}-point grid")));
    }
    let h = grid.spacing();
    let t = 1.0 / (2.0 * mass * h * h);
    let diag: Vec<f64> = (0..n).map(|i| 2.0 * t + potential(grid.coordinate(i))).collect();
    if let Some(bad) = diag.iter().find(|d| !d.is_finite()) {
        return Err(Error::NonFinite(format!("potential value {bad}")));
    }
    let off = vec![-t; n - 1];
    let (energies, vectors) = tridiagonal_lowest(&diag, &off, states)?;
    let scale = h.sqrt().recip();
    let mut wavefunctions = Vec::with_capacity(states);
    for (k, v) in vectors.into_iter().enumerate() {
        let mut psi: Vec<f64> = v.into_iter().map(|x| x * scale).collect();
        // sign: largest-magnitude component on the q >= 0 half is positive
        let half = n / 2;
        let (imax, _) = psi[half..]
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        if psi[half + imax] < 0.0 {
            psi.iter_mut().for_each(|x| *x = -*x);
        }
        let peak = psi.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let edge = psi[0].abs().max(psi[n - 1].abs());
        if edge > 1e-10 * peak {
            log::warn!("state {k} has relative amplitude {:.2e} at the grid edge", edge / peak);
        }
        wavefunctions.push(psi);
    }
    Ok(EigenSolution {
        grid,
        mass,
        energies,
        wavefunctions,
    })
}

/// Thermal density matrix `Σ w_n ψ_n(r) ψ_n(r')` in factored form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalKernel {
    pub solution: EigenSolution,
    pub beta: f64,
    /// Normalized Boltzmann weights `exp(-βE_n)/Z` of the retained states.
    pub weights: Vec<f64>,
}

impl ThermalKernel {
    pub fn value(&self, r: f64, rp: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(n, w)| w * self.solution.evaluate(n, r) * self.solution.evaluate(n, rp))
            .sum()
    }

    /// Dense kernel on the oracle grid.
    pub fn matrix(&self) -> DMatrix<f64> {
        let m = self.solution.grid.points;
        let mut k = DMatrix::zeros(m, m);
        for (w, psi) in self.weights.iter().zip(&self.solution.wavefunctions) {
            for j in 0..m {
                let a = w * psi[j];
                for i in 0..m {
                    k[(i, j)] += a * psi[i];
                }
            }
        }
        k
    }

    pub fn trace(&self) -> f64 {
        let h = self.solution.grid.spacing();
        let m = self.solution.grid.points;
        (0..m)
            .map(|i| {
                self.weights
                    .iter()
                    .zip(&self.solution.wavefunctions)
                    .map(|(w, p)| w * p[i] * p[i])
                    .sum::<f64>()
            })
            .sum::<f64>()
            * h
    }
}

/// Required retained thermal weight.
pub const THERMAL_COVERAGE: f64 = 1.0 - 1e-8;

/// Thermal kernel of the retained states. The highest retained state's
/// weight bounds the first excluded one and must not exceed `1 - coverage`.
pub fn thermal_density_matrix(solution: &EigenSolution, beta: f64) -> Result<ThermalKernel> {
    let e0 = solution.energies[0];
    let raw: Vec<f64> = solution.energies.iter().map(|e| (-beta * (e - e0)).exp()).collect();
    let z: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / z).collect();
    let last = *weights.last().unwrap_or(&1.0);
    if solution.energies.len() < 2 || last > 1.0 - THERMAL_COVERAGE {
        return Err(Error::InsufficientStates {
            retained: 1.0 - last,
            required: THERMAL_COVERAGE,
        });
    }
    Ok(ThermalKernel {
        solution: solution.clone(),
        beta,
        weights,
    })
}

/// Solve with a growing state count until the thermal coverage is met.
pub fn solve_thermal(grid: Grid1D, potential: impl Fn(f64) -> f64 + Copy, mass: f64, beta: f64) -> Result<ThermalKernel> {
    let mut states = 4;
    loop {
        let sol = solve_schrodinger(grid, potential, mass, states)?;
        match thermal_density_matrix(&sol, beta) {
            Ok(k) => return Ok(k),
            Err(Error::InsufficientStates { .. }) if states * 8 <= grid.points => states *= 2,
            Err(e) => return Err(e),
        }
    }
}

/// `ñ(k h) = h Σ_i ρ(q_i, q_i - k h)` for |k| up to `max_shift / h`,
/// normalized to one at the origin.
pub fn exact_ntilde(kernel: &ThermalKernel, max_shift: f64) -> DistributionResult {
    let grid = kernel.solution.grid;
    let h = grid.spacing();
    let m = grid.points;
    let kmax = ((max_shift / h).round() as usize).min(m - 1);
    let mut half = vec![0.0; kmax + 1];
    for (w, psi) in kernel.weights.iter().zip(&kernel.solution.wavefunctions) {
        for (k, acc) in half.iter_mut().enumerate() {
            let s: f64 = (k..m).map(|i| psi[i] * psi[i - k]).sum();
            *acc += w * s;
        }
    }
    let norm = half[0];
    let mut xs = Vec::with_capacity(2 * kmax + 1);
    let mut vals = Vec::with_capacity(2 * kmax + 1);
    for k in (1..=kmax).rev() {
        xs.push(-(k as f64) * h);
        vals.push(half[k] / norm);
    }
    for (k, v) in half.iter().enumerate() {
        xs.push(k as f64 * h);
        vals.push(v / norm);
    }
    DistributionResult::new(xs, vals, Normalization::UnitAtOrigin, Source::Exact)
}

/// `n(p) = (1/2π) Σ_n w_n |h Σ_j ψ_n(q_j) e^{-i p q_j}|²`, normalized by the
/// kernel trace.
pub fn exact_momentum_from_states(kernel: &ThermalKernel, p_grid: &[f64]) -> DistributionResult {
    let grid = kernel.solution.grid;
    let h = grid.spacing();
    let q = grid.coordinates();
    let trace = kernel.trace();
    let values = p_grid
        .iter()
        .map(|p| {
            let mut acc = 0.0;
            for (w, psi) in kernel.weights.iter().zip(&kernel.solution.wavefunctions) {
                let (mut re, mut im) = (0.0, 0.0);
                for (x, v) in q.iter().zip(psi) {
                    let (s, c) = (p * x).sin_cos();
                    re += v * c;
                    im -= v * s;
                }
                acc += w * h * h * (re * re + im * im);
            }
            acc / (2.0 * PI * trace)
        })
        .collect();
    DistributionResult::new(p_grid.to_vec(), values, Normalization::UnitIntegral, Source::Exact)
}

/// Exact ñ(x) on the full lattice of shifts and n(p) by both routes.
#[derive(Clone, Debug)]
pub struct ExactDistributions {
    pub ntilde: DistributionResult,
    pub momentum: DistributionResult,
    pub momentum_from_states: DistributionResult,
}

pub fn exact_ntilde_np(kernel: &ThermalKernel, p_grid: &[f64]) -> ExactDistributions {
    let full = 2.0 * kernel.solution.grid.extent;
    let ntilde = exact_ntilde(kernel, full);
    let momentum = momentum_transform(&ntilde, p_grid);
    let momentum_from_states = exact_momentum_from_states(kernel, p_grid);
    ExactDistributions {
        ntilde,
        momentum,
        momentum_from_states,
    }
}

/// Two-level ground-state population `1/(1 + exp(-βΔE))`.
pub fn ground_state_weight(delta_e: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-beta * delta_e).exp())
}
