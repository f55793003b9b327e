//! Reduced density matrix over the projected endpoint coordinates of the
//! open path: sampling coordinates, grid discretization, spectrum and the
//! translation-operator reconstruction of ñ(x).

use std::fmt::Write as _;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{DistributionResult, Normalization, Source};
use crate::linalg::jacobi_eigen;
use crate::path::{bc_geometry, BCGeometry, PathBias, PathGradient, PathState, SystemSpec};
use crate::ves::{eval_bias, BiasState};

pub const DEFAULT_HALF_WIDTH: f64 = 1.8;
pub const DEFAULT_BINS: usize = 73;
pub const DEFAULT_WALL_STIFFNESS: f64 = 1.0;
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Square `[-b, b]²` split into `bins × bins` cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdmGrid {
    pub half_width: f64,
    pub bins: usize,
}

impl Default for RdmGrid {
    fn default() -> Self {
        Self {
            half_width: DEFAULT_HALF_WIDTH,
            bins: DEFAULT_BINS,
        }
    }
}

impl RdmGrid {
    pub fn new(half_width: f64, bins: usize) -> Result<Self> {
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(Error::Config("RDM half width must be positive".into()));
        }
        if bins % 2 == 0 || bins < 3 {
            return Err(Error::Config(format!("RDM bin count must be odd and ≥ 3, got {bins}")));
        }
        Ok(Self { half_width, bins })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.bins as f64
    }

    pub fn center(&self, j: usize) -> f64 {
        -self.half_width + (j as f64 + 0.5) * self.spacing()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.bins).map(|j| self.center(j)).collect()
    }

    /// Cell containing `s`, if inside the domain.
    pub fn bin(&self, s: f64) -> Option<usize> {
        let u = (s + self.half_width) / self.spacing();
        if u >= 0.0 && u < self.bins as f64 {
            Some(u as usize)
        } else {
            None
        }
    }
}

/// `(r, r')`: the two path ends of the tagged atom projected on `e`,
/// measured from the midpoint of the anchors' bead 0.
pub fn order_params_with(spec: &SystemSpec, state: &PathState, geom: &BCGeometry) -> (f64, f64) {
    let [a, b, c] = spec.tagged;
    let mid = 0.5 * (state.bead(b, 0) + state.bead(c, 0));
    let s = (state.bead(a, 0) - mid).dot(&geom.e);
    (s + 0.5 * state.x, s - 0.5 * state.x)
}

pub fn order_params(spec: &SystemSpec, state: &PathState) -> Result<(f64, f64)> {
    let geom = bc_geometry(spec, state)?;
    Ok(order_params_with(spec, state, &geom))
}

/// Half-harmonic confinement of both order parameters to `[-b, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftWalls {
    pub bound: f64,
    pub stiffness: f64,
}

impl Default for SoftWalls {
    fn default() -> Self {
        Self {
            bound: DEFAULT_HALF_WIDTH,
            stiffness: DEFAULT_WALL_STIFFNESS,
        }
    }
}

impl SoftWalls {
    /// Energy and derivative for one coordinate.
    pub fn energy_derivative(&self, s: f64) -> (f64, f64) {
        let excess = s.abs() - self.bound;
        if excess <= 0.0 {
            (0.0, 0.0)
        } else {
            (0.5 * self.stiffness * excess * excess, self.stiffness * excess * s.signum())
        }
    }
}

/// Route `(∂V/∂r, ∂V/∂r')` onto the path coordinates.
pub fn add_order_param_gradient(
    spec: &SystemSpec,
    state: &PathState,
    geom: &BCGeometry,
    g_r: f64,
    g_rp: f64,
    grad: &mut PathGradient,
) {
    let [a, b, c] = spec.tagged;
    let mid = 0.5 * (state.bead(b, 0) + state.bead(c, 0));
    let sum = g_r + g_rp;
    let along: Vector3<f64> = geom.e * sum;
    grad.add_vec(spec, a, 0, &along);
    grad.add_vec(spec, b, 0, &(-0.5 * along));
    grad.add_vec(spec, c, 0, &(-0.5 * along));
    grad.add_unit_vector_gradient(spec, geom, &((state.bead(a, 0) - mid) * sum));
    grad.x += 0.5 * (g_r - g_rp);
}

/// Energy of a two-dimensional bias on `(r, r')` plus walls; the gradient is
/// accumulated into `grad`.
pub fn ves2d_bias_forces(
    spec: &SystemSpec,
    state: &PathState,
    geom: &BCGeometry,
    bias: &BiasState,
    walls: Option<&SoftWalls>,
    grad: &mut PathGradient,
) -> Result<f64> {
    if bias.basis.dim() != 2 {
        return Err(Error::Config("an endpoint bias needs a two-dimensional basis".into()));
    }
    let (r, rp) = order_params_with(spec, state, geom);
    let (mut v, g) = eval_bias(bias, &[r, rp]);
    let (mut g_r, mut g_rp) = (g[0], g[1]);
    if let Some(w) = walls {
        let (e1, d1) = w.energy_derivative(r);
        let (e2, d2) = w.energy_derivative(rp);
        v += e1 + e2;
        g_r += d1;
        g_rp += d2;
    }
    add_order_param_gradient(spec, state, geom, g_r, g_rp, grad);
    Ok(v)
}

/// Two-dimensional VES bias on the endpoint coordinates with soft walls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointBias {
    pub bias: BiasState,
    pub walls: SoftWalls,
}

impl PathBias for EndpointBias {
    fn energy_gradient(&self, spec: &SystemSpec, state: &PathState, geom: &BCGeometry, grad: &mut PathGradient) -> Result<f64> {
        ves2d_bias_forces(spec, state, geom, &self.bias, Some(&self.walls), grad)
    }
}

/// Trace-normalized symmetric kernel matrix and its pre-symmetrization
/// asymmetry relative to the largest entry.
#[derive(Clone, Debug)]
pub struct RdmMatrix {
    pub grid: RdmGrid,
    pub matrix: DMatrix<f64>,
    pub asymmetry: f64,
}

/// `M_ij = values[i·n + j]·Δ`, symmetrized and scaled to unit trace.
pub fn discretize_kernel(grid: &RdmGrid, values: &[f64]) -> Result<RdmMatrix> {
    let n = grid.bins;
    if values.len() != n * n {
        return Err(Error::DimensionMismatch {
            expected: n * n,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel value".into()));
    }
    let delta = grid.spacing();
    let raw = DMatrix::from_row_slice(n, n, values) * delta;
    let scale = raw.amax();
    let asymmetry = if scale > 0.0 {
        crate::linalg::asymmetry(&raw) / scale
    } else {
        0.0
    };
    let mut m = (&raw + raw.transpose()) * 0.5;
    let tr = m.trace();
    if !(tr > 0.0) {
        return Err(Error::NonFinite(format!("kernel trace {tr}")));
    }
    m /= tr;
    Ok(RdmMatrix {
        grid: *grid,
        matrix: m,
        asymmetry,
    })
}

/// Discretize `exp(-β F2)`; `f2[i·n + j]` is the free energy at `(r_i, r'_j)`.
/// Infinite entries mark cells with no weight.
pub fn discretize_rho(grid: &RdmGrid, f2: &[f64], beta: f64) -> Result<RdmMatrix> {
    if f2.iter().any(|f| f.is_nan() || *f == f64::NEG_INFINITY) {
        return Err(Error::NonFinite("free energy on the RDM grid".into()));
    }
    let fmin = f2.iter().copied().fold(f64::INFINITY, f64::min);
    if !fmin.is_finite() {
        return Err(Error::NonFinite("free energy has no finite cell".into()));
    }
    let values: Vec<f64> = f2.iter().map(|f| (-beta * (f - fmin)).exp()).collect();
    discretize_kernel(grid, &values)
}

/// Eigenpairs of the kernel; `vectors[n]` is ψ_n at the cell centers with
/// `Σ ψ_n² Δ = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDecomposition {
    pub grid: RdmGrid,
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl SpectralDecomposition {
    pub fn weight_beyond(&self, rank: usize) -> f64 {
        self.values.iter().skip(rank).sum()
    }
}

pub fn symmetric_eigensolve(m: &RdmMatrix) -> Result<SpectralDecomposition> {
    let eig = jacobi_eigen(&m.matrix, SYMMETRY_TOL)?;
    let inv = 1.0 / m.grid.spacing().sqrt();
    let vectors = (0..eig.values.len())
        .map(|k| eig.vectors.column(k).iter().map(|v| v * inv).collect())
        .collect();
    Ok(SpectralDecomposition {
        grid: m.grid,
        values: eig.values,
        vectors,
    })
}

/// Linear interpolation on the cell centers, zero beyond the outer centers.
fn interpolate_cells(grid: &RdmGrid, psi: &[f64], s: f64) -> f64 {
    let u = (s + grid.half_width) / grid.spacing() - 0.5;
    if u < 0.0 || u > (grid.bins - 1) as f64 {
        return 0.0;
    }
    let j = (u.floor() as usize).min(grid.bins - 2);
    let t = u - j as f64;
    psi[j] * (1.0 - t) + psi[j + 1] * t
}

/// `∫ ψ(r) ψ(r + x) dr` on the grid.
pub fn translation_expectation(grid: &RdmGrid, psi: &[f64], x: f64) -> f64 {
    let delta = grid.spacing();
    (0..grid.bins)
        .map(|i| psi[i] * interpolate_cells(grid, psi, grid.center(i) + x))
        .sum::<f64>()
        * delta
}

/// `Σ ρ_n ⟨T_x⟩_n`, normalized to one at the origin.
pub fn reconstruct_ntilde(spectrum: &SpectralDecomposition, x_grid: &[f64]) -> DistributionResult {
    let curve = |x: f64| -> f64 {
        spectrum
            .values
            .iter()
            .zip(&spectrum.vectors)
            .map(|(w, psi)| w * translation_expectation(&spectrum.grid, psi, x))
            .sum()
    };
    let norm = curve(0.0);
    let values = x_grid.iter().map(|x| curve(*x) / norm).collect();
    DistributionResult::new(x_grid.to_vec(), values, Normalization::UnitAtOrigin, Source::Sampled)
}

/// Ordinary least-squares line `λ = intercept + slope·T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationFit {
    pub temperatures: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

impl ExtrapolationFit {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "intercept = {:.10}", self.intercept);
        let _ = writeln!(s, "slope = {:.10}", self.slope);
        for ((t, l), r) in self.temperatures.iter().zip(&self.lambdas).zip(&self.residuals) {
            let _ = writeln!(s, "T = {t:.6e} lambda = {l:.10} residual = {r:.3e}");
        }
        s
    }
}

/// Fit λ against `T = 1/β`; `pairs` are `(β, λ)`.
pub fn extrapolate_to_zero_t(pairs: &[(f64, f64)]) -> Result<ExtrapolationFit> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientData {
            what: "temperature points",
            need: 3,
            got: pairs.len(),
        });
    }
    if pairs.iter().any(|(b, l)| !(*b > 0.0) || !l.is_finite()) {
        return Err(Error::Config("extrapolation needs positive β and finite λ".into()));
    }
    let temperatures: Vec<f64> = pairs.iter().map(|(b, _)| 1.0 / b).collect();
    let lambdas: Vec<f64> = pairs.iter().map(|(_, l)| *l).collect();
    let n = pairs.len() as f64;
    let tm = temperatures.iter().sum::<f64>() / n;
    let lm = lambdas.iter().sum::<f64>() / n;
    let sxx: f64 = temperatures.iter().map(|t| (t - tm) * (t - tm)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Config("extrapolation needs at least two distinct temperatures".into()));
    }
    let sxy: f64 = temperatures.iter().zip(&lambdas).map(|(t, l)| (t - tm) * (l - lm)).sum();
    let slope = sxy / sxx;
    let intercept = lm - slope * tm;
    let residuals = temperatures
        .iter()
        .zip(&lambdas)
        .map(|(t, l)| l - (intercept + slope * t))
        .collect();
    Ok(ExtrapolationFit {
        temperatures,
        lambdas,
        slope,
        intercept,
        residuals,
    })
}

pub fn format_spectrum_csv(values: &[f64], sigma: &[f64]) -> String {
    let mut s = String::from("index,eigenvalue,uncertainty\n");
    for (n, v) in values.iter().enumerate() {
        let _ = writeln!(s, "{},{:.12e},{:.6e}", n + 1, v, sigma.get(n).copied().unwrap_or(0.0));
    }
    s
}

/// One column per eigenstate: `x, T_1, T_2, ...`.
pub fn format_translation_csv(spectrum: &SpectralDecomposition, x_grid: &[f64], states: usize) -> String {
    let states = states.min(spectrum.vectors.len());
    let mut s = String::from("x");
    for n in 0..states {
        let _ = write!(s, ",T_{}", n + 1);
    }
    s.push('\n');
    for x in x_grid {
        let _ = write!(s, "{x:.8}");
        for psi in spectrum.vectors.iter().take(states) {
            let _ = write!(s, ",{:.10e}", translation_expectation(&spectrum.grid, psi, *x));
        }
        s.push('\n');
    }
    s
}
