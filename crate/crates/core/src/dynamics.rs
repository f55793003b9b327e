//! Time integration of the open-path polymer.
//!
//! One step is: thermostat (dt/2), external kick (dt/2), exact free-ring and
//! x-oscillator propagation (dt), external kick (dt/2), thermostat (dt/2),
//! then centre-of-mass momentum removal and wall reflection of x.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{expm, jacobi_eigen, psd_factor};
use crate::path::{external_gradient, PathBias, PathGradient, PathState, SystemSpec};
use crate::potentials::PotentialModel;

/// Orthogonal real normal-mode transform of a closed ring of `l` beads.
///
/// Columns of the transform: `1/√l`; `√(2/l) cos(2πik/l)` for
/// `1 ≤ k < l/2`; `(-1)^i/√l` for `k = l/2`; `√(2/l) sin(2πik/l)` for
/// `k > l/2`.
pub struct NormalModes {
    l: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Clone for NormalModes {
    fn clone(&self) -> Self {
        NormalModes::new(self.l)
    }
}

impl std::fmt::Debug for NormalModes {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NormalModes").field("l", &self.l).finish()
    }
}

impl NormalModes {
    pub fn new(l: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(l);
        let inverse = planner.plan_fft_inverse(l);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        Self {
            l,
            forward,
            inverse,
            buf: vec![Complex64::new(0.0, 0.0); l],
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        }
    }

    pub fn beads(&self) -> usize {
        self.l
    }

    /// `ω_k = 2 ω_l sin(πk/l)`.
    pub fn frequencies(l: usize, omega_l: f64) -> Vec<f64> {
        (0..l).map(|k| 2.0 * omega_l * (PI * k as f64 / l as f64).sin()).collect()
    }

    /// Explicit transform matrix `C[(i, k)]`.
    pub fn matrix(l: usize) -> DMatrix<f64> {
        let lf = l as f64;
        DMatrix::from_fn(l, l, |i, k| {
            let theta = 2.0 * PI * (i * k) as f64 / lf;
            if k == 0 {
                1.0 / lf.sqrt()
            } else if 2 * k < l {
                (2.0 / lf).sqrt() * theta.cos()
            } else if 2 * k == l {
                if i % 2 == 0 {
                    1.0 / lf.sqrt()
                } else {
                    -1.0 / lf.sqrt()
                }
            } else {
                (2.0 / lf).sqrt() * theta.sin()
            }
        })
    }

    /// `q = Cᵀ r`.
    pub fn to_normal(&mut self, r: &[f64], q: &mut [f64]) {
        let l = self.l;
        for (b, v) in self.buf.iter_mut().zip(r) {
            *b = Complex64::new(*v, 0.0);
        }
        self.forward.process_with_scratch(&mut self.buf, &mut self.scratch);
        let lf = l as f64;
        let a = 1.0 / lf.sqrt();
        let c = (2.0 / lf).sqrt();
        q[0] = self.buf[0].re * a;
        for k in 1..l {
            q[k] = if 2 * k < l {
                c * self.buf[k].re
            } else if 2 * k == l {
                a * self.buf[k].re
            } else {
                -c * self.buf[k].im
            };
        }
    }

    /// `r = C q`.
    pub fn from_normal(&mut self, q: &[f64], r: &mut [f64]) {
        let l = self.l;
        let lf = l as f64;
        let a = 1.0 / lf.sqrt();
        let c = 1.0 / (2.0 * lf).sqrt();
        self.buf[0] = Complex64::new(q[0] * a, 0.0);
        for k in 1..l {
            self.buf[k] = if 2 * k < l {
                Complex64::new(c * q[k], c * q[l - k])
            } else if 2 * k == l {
                Complex64::new(a * q[k], 0.0)
            } else {
                Complex64::new(c * q[l - k], -c * q[k])
            };
        }
        self.inverse.process_with_scratch(&mut self.buf, &mut self.scratch);
        for (v, b) in r.iter_mut().zip(&self.buf) {
            *v = b.re;
        }
    }
}

/// Colored-noise (GLE) thermostat matrices acting on mass-scaled momenta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GleSpec {
    /// Number of auxiliary momenta per physical degree of freedom.
    pub s: usize,
    /// Drift matrix, `(s+1)²` row-major.
    pub a: Vec<f64>,
    /// Stationary covariance, `(s+1)²` row-major; `None` means `(1/β) I`.
    pub c: Option<Vec<f64>>,
}

impl GleSpec {
    /// White-noise Langevin friction `γ` expressed as a GLE with `s = 0`.
    pub fn white(gamma: f64) -> Self {
        Self {
            s: 0,
            a: vec![gamma],
            c: None,
        }
    }

    pub fn drift(&self) -> DMatrix<f64> {
        let n = self.s + 1;
        DMatrix::from_row_slice(n, n, &self.a)
    }

    pub fn covariance(&self, beta: f64) -> DMatrix<f64> {
        let n = self.s + 1;
        match &self.c {
            Some(c) => DMatrix::from_row_slice(n, n, c),
            None => DMatrix::identity(n, n) / beta,
        }
    }

    pub fn validate(&self, beta: f64) -> Result<()> {
        let n = self.s + 1;
        if self.a.len() != n * n {
            return Err(Error::Config(format!("GLE drift needs {} entries, got {}", n * n, self.a.len())));
        }
        if let Some(c) = &self.c {
            if c.len() != n * n {
                return Err(Error::Config(format!("GLE covariance needs {} entries, got {}", n * n, c.len())));
            }
        }
        let a = self.drift();
        let sym = (&a + a.transpose()) * 0.5;
        let eig = jacobi_eigen(&sym, 1e-12)?;
        let min = eig.values.last().copied().unwrap_or(0.0);
        if min < -1e-12 * eig.values[0].abs().max(1.0) {
            return Err(Error::Config(format!("GLE drift matrix is not stable (symmetric part eigenvalue {min:e})")));
        }
        let c = self.covariance(beta);
        let ce = jacobi_eigen(&c, 1e-12 * c.amax().max(1.0)).map_err(|_| Error::Config("GLE covariance is not symmetric".into()))?;
        if ce.values.iter().any(|v| *v <= 0.0) {
            return Err(Error::Config("GLE covariance is not positive definite".into()));
        }
        Ok(())
    }

    /// Propagator pair `(T, S)` for a time step `h`.
    pub fn propagator(&self, beta: f64, h: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.validate(beta)?;
        let t = expm(&(self.drift() * (-h)));
        let c = self.covariance(beta);
        let cov = &c - &t * &c * t.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        let s = psd_factor(&cov, 1e-12).map_err(|e| Error::Config(format!("GLE fluctuation matrix: {e}")))?;
        Ok((t, s))
    }
}

/// Parse a GLE matrix file: `s`, then `(s+1)²` drift entries row-major,
/// then optionally `(s+1)²` covariance entries. `#` starts a comment.
pub fn parse_gle(text: &str) -> Result<GleSpec> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace())
        .map(|t| t.to_string());
    let s: usize = tokens
        .next()
        .ok_or_else(|| Error::Parse("empty GLE file".into()))?
        .parse()
        .map_err(|e| Error::Parse(format!("GLE size: {e}")))?;
    let n = (s + 1) * (s + 1);
    let values: Vec<f64> = tokens
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("GLE entry {t}: {e}"))))
        .collect::<Result<_>>()?;
    match values.len() {
        v if v == n => Ok(GleSpec { s, a: values, c: None }),
        v if v == 2 * n => Ok(GleSpec {
            s,
            a: values[..n].to_vec(),
            c: Some(values[n..].to_vec()),
        }),
        v => Err(Error::Parse(format!("GLE file with s = {s} needs {n} or {} entries, got {v}", 2 * n))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Thermostat {
    None,
    /// White-noise Langevin per normal mode with `γ_k = 2ω_k`; `gamma0` for
    /// the centroid and `gamma_x` for the opening coordinate.
    Pile { gamma0: f64, gamma_x: Option<f64> },
    Gle(GleSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    /// Reflective walls for x at `±wall`.
    pub wall: f64,
    pub com_removal: bool,
    pub thermostat: Thermostat,
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.wall > 0.0) {
            return Err(Error::Config("dt and wall must be positive".into()));
        }
        Ok(())
    }
}

/// Exact OU update of stacked mass-scaled momenta.
pub fn gle_step<R: Rng + ?Sized>(p: &mut [f64], t: &DMatrix<f64>, s: &DMatrix<f64>, rng: &mut R) {
    let n = p.len();
    let v = DVector::from_column_slice(p);
    let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let out = t * v + s * xi;
    p.copy_from_slice(out.as_slice());
}

/// Mirror x back into `[-w, w]`, flipping `p_x` at each reflection.
pub fn reflect_wall(x: f64, px: f64, w: f64) -> (f64, f64) {
    if (-w..=w).contains(&x) || !x.is_finite() || !w.is_finite() {
        return (x, px);
    }
    // unfold onto the period 4w: k counts the reflections
    let u = x + w;
    let k = (u / (2.0 * w)).floor();
    let r = u - 2.0 * w * k;
    if k.rem_euclid(2.0) == 0.0 {
        (r - w, px)
    } else {
        (w - r, -px)
    }
}

/// Zero the total momentum of the Cartesian atoms, component by component,
/// subtracting `m_n P / (l M)` from every bead.
pub fn remove_com_velocity(spec: &SystemSpec, state: &mut PathState) {
    let l = spec.beads;
    for k in 0..3 {
        let atoms: Vec<usize> = (0..spec.atoms())
            .filter(|&n| spec.cartesian[n] && spec.mobile[n][k])
            .collect();
        if atoms.is_empty() {
            continue;
        }
        let total_mass: f64 = atoms.iter().map(|&n| spec.masses[n]).sum::<f64>() * l as f64;
        let total: f64 = atoms
            .iter()
            .flat_map(|&n| (0..l).map(move |i| (n, i)))
            .map(|(n, i)| state.momenta[spec.index(n, i, k)])
            .sum();
        for &n in &atoms {
            let dp = spec.masses[n] * total / total_mass;
            for i in 0..l {
                state.momenta[spec.index(n, i, k)] -= dp;
            }
        }
    }
}

#[derive(Clone, Debug)]
enum PreparedThermostat {
    None,
    Pile { c1: Vec<f64>, c1x: f64 },
    Gle { t: DMatrix<f64>, s: DMatrix<f64> },
}

/// Per-walker integrator with cached normal-mode coefficients and forces.
#[derive(Clone, Debug)]
pub struct Integrator {
    pub config: IntegratorConfig,
    nm: NormalModes,
    rings: Vec<(usize, usize)>,
    cos_k: Vec<f64>,
    sin_k: Vec<f64>,
    omega_k: Vec<f64>,
    cos_x: f64,
    sin_x: f64,
    thermostat: PreparedThermostat,
    grad: PathGradient,
    cached: bool,
    external_energy: f64,
    step: u64,
    rbuf: Vec<f64>,
    qbuf: Vec<f64>,
    pbuf: Vec<f64>,
    pqbuf: Vec<f64>,
}

impl Integrator {
    pub fn new(spec: &SystemSpec, config: IntegratorConfig, state: &PathState) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        let l = spec.beads;
        let omega_k = NormalModes::frequencies(l, spec.omega_l());
        let dt = config.dt;
        let cos_k = omega_k.iter().map(|w| (w * dt).cos()).collect();
        let sin_k = omega_k.iter().map(|w| (w * dt).sin()).collect();
        let wx = spec.omega_x();
        let rings = (0..spec.atoms())
            .flat_map(|n| (0..3).map(move |k| (n, k)))
            .filter(|&(n, k)| spec.mobile[n][k])
            .collect::<Vec<_>>();
        let half = 0.5 * dt;
        let thermostat = match &config.thermostat {
            Thermostat::None => PreparedThermostat::None,
            Thermostat::Pile { gamma0, gamma_x } => {
                let c1 = omega_k
                    .iter()
                    .enumerate()
                    .map(|(k, w)| (-(if k == 0 { *gamma0 } else { 2.0 * w }) * half).exp())
                    .collect();
                let gx = gamma_x.unwrap_or(2.0 * wx);
                PreparedThermostat::Pile {
                    c1,
                    c1x: (-gx * half).exp(),
                }
            }
            Thermostat::Gle(g) => {
                let (t, s) = g.propagator(spec.beta, half)?;
                PreparedThermostat::Gle { t, s }
            }
        };
        let grad = PathGradient::zeros(state);
        Ok(Self {
            nm: NormalModes::new(l),
            rings,
            cos_k,
            sin_k,
            omega_k,
            cos_x: (wx * dt).cos(),
            sin_x: (wx * dt).sin(),
            thermostat,
            grad,
            cached: false,
            external_energy: 0.0,
            step: 0,
            rbuf: vec![0.0; l],
            qbuf: vec![0.0; l],
            pbuf: vec![0.0; l],
            pqbuf: vec![0.0; l],
            config,
        })
    }

    /// Auxiliary-momentum length the thermostat needs for this system.
    pub fn aux_len(&self, spec: &SystemSpec) -> usize {
        match &self.config.thermostat {
            Thermostat::Gle(g) => g.s * (self.rings.len() * spec.beads + 1),
            _ => 0,
        }
    }

    /// Drop the cached forces (after the bias or state changed externally).
    pub fn invalidate(&mut self) {
        self.cached = false;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn set_steps_taken(&mut self, step: u64) {
        self.step = step;
    }

    /// Potential plus bias energy at the current state (after a step).
    pub fn external_energy(&self) -> f64 {
        self.external_energy
    }

    fn refresh(
        &mut self,
        spec: &SystemSpec,
        state: &PathState,
        model: &dyn PotentialModel,
        bias: Option<&dyn PathBias>,
    ) -> Result<()> {
        let step = self.step;
        let diverged = |detail: String| Error::TrajectoryDiverged { step, detail };
        self.external_energy = match external_gradient(spec, state, model, bias, &mut self.grad) {
            Ok(e) => e,
            Err(Error::CoincidentAnchors { separation, cutoff }) => {
                return Err(diverged(format!("B-C separation {separation:e} below {cutoff:e}")))
            }
            Err(e) => return Err(e),
        };
        if !self.external_energy.is_finite() || !self.grad.x.is_finite() || self.grad.beads.iter().any(|g| !g.is_finite()) {
            let worst = self
                .grad
                .beads
                .iter()
                .enumerate()
                .find(|(_, g)| !g.is_finite())
                .map(|(i, g)| format!("gradient[{i}] = {g}"))
                .unwrap_or_else(|| format!("energy {} dV/dx {}", self.external_energy, self.grad.x));
            return Err(diverged(format!("{worst}; x = {}, p_x = {}", state.x, state.px)));
        }
        self.cached = true;
        Ok(())
    }

    fn kick(&self, spec: &SystemSpec, state: &mut PathState) {
        let h = 0.5 * self.config.dt;
        for &(n, k) in &self.rings {
            for i in 0..spec.beads {
                let idx = spec.index(n, i, k);
                state.momenta[idx] -= h * self.grad.beads[idx];
            }
        }
        state.px -= h * self.grad.x;
    }

    /// Exact evolution under springs and the x harmonic block.
    pub fn nm_exact_step(&mut self, spec: &SystemSpec, state: &mut PathState) {
        let l = spec.beads;
        let dt = self.config.dt;
        for r in 0..self.rings.len() {
            let (n, k) = self.rings[r];
            let m = spec.masses[n];
            for i in 0..l {
                let idx = spec.index(n, i, k);
                self.rbuf[i] = state.positions[idx];
                self.pbuf[i] = state.momenta[idx];
            }
            self.nm.to_normal(&self.rbuf, &mut self.qbuf);
            self.nm.to_normal(&self.pbuf, &mut self.pqbuf);
            self.qbuf[0] += self.pqbuf[0] * dt / m;
            for mode in 1..l {
                let (c, s, w) = (self.cos_k[mode], self.sin_k[mode], self.omega_k[mode]);
                let (q, p) = (self.qbuf[mode], self.pqbuf[mode]);
                self.qbuf[mode] = q * c + p * s / (m * w);
                self.pqbuf[mode] = p * c - m * w * q * s;
            }
            self.nm.from_normal(&self.qbuf, &mut self.rbuf);
            self.nm.from_normal(&self.pqbuf, &mut self.pbuf);
            for i in 0..l {
                let idx = spec.index(n, i, k);
                state.positions[idx] = self.rbuf[i];
                state.momenta[idx] = self.pbuf[i];
            }
        }
        let m = spec.mass_x();
        let w = spec.omega_x();
        let (x, p) = (state.x, state.px);
        state.x = x * self.cos_x + p * self.sin_x / (m * w);
        state.px = p * self.cos_x - m * w * x * self.sin_x;
    }

    fn thermostat_half<R: Rng + ?Sized>(&mut self, spec: &SystemSpec, state: &mut PathState, rng: &mut R) {
        let l = spec.beads;
        let beta = spec.beta;
        match &self.thermostat {
            PreparedThermostat::None => {}
            PreparedThermostat::Pile { c1, c1x } => {
                for r in 0..self.rings.len() {
                    let (n, k) = self.rings[r];
                    let m = spec.masses[n];
                    for i in 0..l {
                        self.pbuf[i] = state.momenta[spec.index(n, i, k)];
                    }
                    self.nm.to_normal(&self.pbuf, &mut self.pqbuf);
                    for mode in 0..l {
                        let a = c1[mode];
                        let b = (m / beta * (1.0 - a * a)).sqrt();
                        let xi: f64 = rng.sample(StandardNormal);
                        self.pqbuf[mode] = a * self.pqbuf[mode] + b * xi;
                    }
                    self.nm.from_normal(&self.pqbuf, &mut self.pbuf);
                    for i in 0..l {
                        state.momenta[spec.index(n, i, k)] = self.pbuf[i];
                    }
                }
                let m = spec.mass_x();
                let b = (m / beta * (1.0 - c1x * c1x)).sqrt();
                let xi: f64 = rng.sample(StandardNormal);
                state.px = c1x * state.px + b * xi;
            }
            PreparedThermostat::Gle { t, s } => {
                let ns = t.nrows() - 1;
                let mut stack = vec![0.0; ns + 1];
                for r in 0..self.rings.len() {
                    let (n, k) = self.rings[r];
                    let sm = spec.masses[n].sqrt();
                    for i in 0..l {
                        self.pbuf[i] = state.momenta[spec.index(n, i, k)];
                    }
                    self.nm.to_normal(&self.pbuf, &mut self.pqbuf);
                    for mode in 0..l {
                        let base = (r * l + mode) * ns;
                        stack[0] = self.pqbuf[mode] / sm;
                        stack[1..].copy_from_slice(&state.aux[base..base + ns]);
                        gle_step(&mut stack, t, s, rng);
                        self.pqbuf[mode] = stack[0] * sm;
                        state.aux[base..base + ns].copy_from_slice(&stack[1..]);
                    }
                    self.nm.from_normal(&self.pqbuf, &mut self.pbuf);
                    for i in 0..l {
                        state.momenta[spec.index(n, i, k)] = self.pbuf[i];
                    }
                }
                let sm = spec.mass_x().sqrt();
                let base = self.rings.len() * l * ns;
                stack[0] = state.px / sm;
                stack[1..].copy_from_slice(&state.aux[base..base + ns]);
                gle_step(&mut stack, t, s, rng);
                state.px = stack[0] * sm;
                state.aux[base..base + ns].copy_from_slice(&stack[1..]);
            }
        }
    }

    /// One full step of the splitting.
    pub fn md_step<R: Rng + ?Sized>(
        &mut self,
        spec: &SystemSpec,
        state: &mut PathState,
        model: &dyn PotentialModel,
        bias: Option<&dyn PathBias>,
        rng: &mut R,
    ) -> Result<()> {
        let need = self.aux_len(spec);
        if state.aux.len() != need {
            if state.aux.is_empty() {
                state.aux = vec![0.0; need];
            } else {
                return Err(Error::DimensionMismatch {
                    expected: need,
                    got: state.aux.len(),
                });
            }
        }
        if !self.cached {
            self.refresh(spec, state, model, bias)?;
        }
        self.thermostat_half(spec, state, rng);
        self.kick(spec, state);
        self.nm_exact_step(spec, state);
        self.step += 1;
        self.refresh(spec, state, model, bias)?;
        self.kick(spec, state);
        self.thermostat_half(spec, state, rng);
        if self.config.com_removal {
            remove_com_velocity(spec, state);
        }
        let (x, px) = reflect_wall(state.x, state.px, self.config.wall);
        if x != state.x {
            state.x = x;
            state.px = px;
            self.cached = false;
        } else {
            state.px = px;
        }
        Ok(())
    }
}

/// Exact free-ring step for every mobile ring and the x block.
pub fn nm_exact_step(spec: &SystemSpec, state: &mut PathState, dt: f64) -> Result<()> {
    let config = IntegratorConfig {
        dt,
        wall: f64::INFINITY,
        com_removal: false,
        thermostat: Thermostat::None,
    };
    let mut integ = Integrator::new(spec, config, state)?;
    integ.nm_exact_step(spec, state);
    Ok(())
}

/// Maxwell-Boltzmann momenta for every mobile degree of freedom.
pub fn thermalize_momenta<R: Rng + ?Sized>(spec: &SystemSpec, state: &mut PathState, rng: &mut R) {
    for n in 0..spec.atoms() {
        let sd = (spec.masses[n] / spec.beta).sqrt();
        for i in 0..spec.beads {
            for k in 0..3 {
                let idx = spec.index(n, i, k);
                state.momenta[idx] = if spec.mobile[n][k] {
                    sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
            }
        }
    }
    state.px = (spec.mass_x() / spec.beta).sqrt() * rng.sample::<f64, _>(StandardNormal);
}
