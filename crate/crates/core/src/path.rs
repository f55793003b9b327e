//! Transformed open-path ring polymer: state, Hamiltonian and forces.
//!
//! Every atom carries a closed ring of `l` beads. The tagged atom A is
//! opened by the scalar displacement `x` along the unit vector from C to B
//! (both taken at bead 0): bead `i` of A enters the potential at
//! `r̃_A^i - x y_i e` with `y_i = i/l - 1/2`, bead 0 entering twice with
//! half weight at `y = -1/2` and `y = +1/2`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::{PotentialModel, MIN_ANCHOR_SEPARATION};

/// Static description of the simulated system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub masses: Vec<f64>,
    /// Which Cartesian components of each atom are dynamical.
    pub mobile: Vec<[bool; 3]>,
    /// Whether the atom is a real particle (false for bath pseudo-atoms,
    /// excluded from centre-of-mass removal).
    pub cartesian: Vec<bool>,
    /// Tagged atom indices (A, B, C).
    pub tagged: [usize; 3],
    pub beads: usize,
    pub beta: f64,
}

impl SystemSpec {
    pub fn new(masses: Vec<f64>, tagged: [usize; 3], beads: usize, beta: f64) -> Result<Self> {
        let n = masses.len();
        let spec = Self {
            mobile: vec![[true; 3]; n],
            cartesian: vec![true; n],
            masses,
            tagged,
            beads,
            beta,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.masses.len();
        if self.mobile.len() != n || self.cartesian.len() != n {
            return Err(Error::Config("mobility and cartesian masks must cover every atom".into()));
        }
        if self.beads < 2 {
            return Err(Error::Config(format!("need at least 2 beads, got {}", self.beads)));
        }
        let [a, b, c] = self.tagged;
        if a == b || b == c || a == c || a >= n || b >= n || c >= n {
            return Err(Error::Config("tagged atoms A, B, C must be distinct and in range".into()));
        }
        if self.masses.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::Config("all masses must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        Ok(())
    }

    pub fn atoms(&self) -> usize {
        self.masses.len()
    }

    /// `ω_l = √l / β` (ħ = 1).
    pub fn omega_l(&self) -> f64 {
        (self.beads as f64).sqrt() / self.beta
    }

    /// Frequency of the harmonic block of the x coordinate, `1/β`.
    pub fn omega_x(&self) -> f64 {
        1.0 / self.beta
    }

    pub fn mass_x(&self) -> f64 {
        self.masses[self.tagged[0]]
    }

    /// `y_i = i/l - 1/2` for `0 ≤ i ≤ l`.
    pub fn y(&self, i: usize) -> f64 {
        i as f64 / self.beads as f64 - 0.5
    }

    /// Flat index of component `k` of bead `i` of atom `n`.
    #[inline]
    pub fn index(&self, atom: usize, bead: usize, k: usize) -> usize {
        (atom * self.beads + bead) * 3 + k
    }

    pub fn mobile_dofs(&self) -> usize {
        self.mobile.iter().map(|m| m.iter().filter(|b| **b).count()).sum::<usize>() * self.beads + 1
    }
}

/// Positions and momenta of a transformed open-path polymer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathState {
    pub atoms: usize,
    pub beads: usize,
    /// `[atom][bead][xyz]`, bohr.
    pub positions: Vec<f64>,
    pub momenta: Vec<f64>,
    pub x: f64,
    pub px: f64,
    /// Auxiliary thermostat momenta (empty without a colored-noise thermostat).
    pub aux: Vec<f64>,
}

impl PathState {
    /// All beads of every atom placed at `reference` (3N), momenta zero.
    pub fn from_reference(spec: &SystemSpec, reference: &[f64], x: f64) -> Result<Self> {
        let n = spec.atoms();
        if reference.len() != 3 * n {
            return Err(Error::DimensionMismatch {
                expected: 3 * n,
                got: reference.len(),
            });
        }
        let l = spec.beads;
        let mut positions = vec![0.0; 3 * n * l];
        for atom in 0..n {
            for bead in 0..l {
                for k in 0..3 {
                    positions[spec.index(atom, bead, k)] = reference[3 * atom + k];
                }
            }
        }
        Ok(Self {
            atoms: n,
            beads: l,
            momenta: vec![0.0; positions.len()],
            positions,
            x,
            px: 0.0,
            aux: Vec::new(),
        })
    }

    pub fn bead(&self, atom: usize, bead: usize) -> Vector3<f64> {
        let o = (atom * self.beads + bead) * 3;
        Vector3::new(self.positions[o], self.positions[o + 1], self.positions[o + 2])
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad = self
            .positions
            .iter()
            .chain(&self.momenta)
            .chain([&self.x, &self.px])
            .chain(&self.aux)
            .any(|v| !v.is_finite());
        if bad {
            Err(Error::NonFinite("path state".into()))
        } else {
            Ok(())
        }
    }

    pub fn position_dofs(&self) -> usize {
        self.positions.len() + 1
    }
}

/// Unit vector from C to B at bead 0 and its Jacobians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BCGeometry {
    pub e: Vector3<f64>,
    pub d: f64,
    /// `∂e/∂r̃_B^0 = (I - e eᵀ)/d`; the C Jacobian is its negative.
    pub jac_b: Matrix3<f64>,
}

impl BCGeometry {
    pub fn jac_c(&self) -> Matrix3<f64> {
        -self.jac_b
    }
}

pub fn bc_geometry(spec: &SystemSpec, state: &PathState) -> Result<BCGeometry> {
    bc_geometry_with_cutoff(spec, state, MIN_ANCHOR_SEPARATION)
}

pub fn bc_geometry_with_cutoff(spec: &SystemSpec, state: &PathState, d_min: f64) -> Result<BCGeometry> {
    let [_, b, c] = spec.tagged;
    geometry_from_points(&state.bead(b, 0), &state.bead(c, 0), d_min)
}

pub fn geometry_from_points(rb: &Vector3<f64>, rc: &Vector3<f64>, d_min: f64) -> Result<BCGeometry> {
    let u = rb - rc;
    let d = u.norm();
    if !(d > d_min) {
        return Err(Error::CoincidentAnchors {
            separation: d,
            cutoff: d_min,
        });
    }
    let e = u / d;
    let jac_b = (Matrix3::identity() - e * e.transpose()) / d;
    Ok(BCGeometry { e, d, jac_b })
}

/// `r̃_A^i - x y_i e`; `i = l` means bead 0 with `y = +1/2`.
pub fn shifted_bead(spec: &SystemSpec, state: &PathState, geom: &BCGeometry, i: usize) -> Result<Vector3<f64>> {
    if i > spec.beads {
        return Err(Error::Config(format!("bead index {i} exceeds l = {}", spec.beads)));
    }
    let a = spec.tagged[0];
    Ok(state.bead(a, i % spec.beads) - state.x * spec.y(i) * geom.e)
}

/// `r_A^0 - r_A^l`.
pub fn standard_end_to_end(r0: [f64; 3], rl: [f64; 3]) -> [f64; 3] {
    [r0[0] - rl[0], r0[1] - rl[1], r0[2] - rl[2]]
}

/// Gradient with respect to every bead coordinate and x.
#[derive(Clone, Debug, PartialEq)]
pub struct PathGradient {
    pub beads: Vec<f64>,
    pub x: f64,
}

impl PathGradient {
    pub fn zeros(state: &PathState) -> Self {
        Self {
            beads: vec![0.0; state.positions.len()],
            x: 0.0,
        }
    }

    pub fn add_vec(&mut self, spec: &SystemSpec, atom: usize, bead: usize, v: &Vector3<f64>) {
        let o = spec.index(atom, bead, 0);
        self.beads[o] += v[0];
        self.beads[o + 1] += v[1];
        self.beads[o + 2] += v[2];
    }

    /// Route a gradient with respect to `e` onto bead 0 of B and C.
    pub fn add_unit_vector_gradient(&mut self, spec: &SystemSpec, geom: &BCGeometry, g_e: &Vector3<f64>) {
        // the Jacobian is symmetric, so Jᵀ g = J g
        let gb = geom.jac_b * g_e;
        let [_, b, c] = spec.tagged;
        self.add_vec(spec, b, 0, &gb);
        self.add_vec(spec, c, 0, &(-gb));
    }
}

/// A bias acting on collective coordinates of the path.
pub trait PathBias: Send + Sync {
    /// Bias energy; its gradient is added into `grad`.
    fn energy_gradient(
        &self,
        spec: &SystemSpec,
        state: &PathState,
        geom: &BCGeometry,
        grad: &mut PathGradient,
    ) -> Result<f64>;
}

/// Weighted potential term with its gradient accumulated into `grad`.
pub fn potential_energy_gradient(
    spec: &SystemSpec,
    state: &PathState,
    model: &dyn PotentialModel,
    geom: &BCGeometry,
    grad: Option<&mut PathGradient>,
) -> Result<f64> {
    let n = spec.atoms();
    let l = spec.beads;
    if model.dimension() != 3 * n {
        return Err(Error::DimensionMismatch {
            expected: 3 * n,
            got: model.dimension(),
        });
    }
    let a = spec.tagged[0];
    let mut config = vec![0.0; 3 * n];
    let mut g = vec![0.0; 3 * n];
    let mut energy = 0.0;
    let mut grad = grad;
    let mut g_e = Vector3::zeros();
    let lf = l as f64;
    for j in 0..=l {
        let bead = j % l;
        let w = if j == 0 || j == l { 0.5 / lf } else { 1.0 / lf };
        for atom in 0..n {
            let o = spec.index(atom, bead, 0);
            config[3 * atom..3 * atom + 3].copy_from_slice(&state.positions[o..o + 3]);
        }
        let y = spec.y(j);
        let shift = state.x * y * geom.e;
        for k in 0..3 {
            config[3 * a + k] -= shift[k];
        }
        let v = model.energy_gradient(&config, &mut g)?;
        energy += w * v;
        if let Some(grad) = grad.as_deref_mut() {
            for atom in 0..n {
                let o = spec.index(atom, bead, 0);
                for k in 0..3 {
                    grad.beads[o + k] += w * g[3 * atom + k];
                }
            }
            let ga = Vector3::new(g[3 * a], g[3 * a + 1], g[3 * a + 2]);
            grad.x -= w * y * ga.dot(&geom.e);
            g_e -= (w * state.x * y) * ga;
        }
    }
    if let Some(grad) = grad {
        grad.add_unit_vector_gradient(spec, geom, &g_e);
    }
    Ok(energy)
}

/// `Σ_n Σ_i ½ m_n ω_l² (r̃_n^i - r̃_n^{i+1})²` (cyclic).
pub fn spring_energy(spec: &SystemSpec, state: &PathState) -> f64 {
    let l = spec.beads;
    let w2 = spec.omega_l().powi(2);
    let mut e = 0.0;
    for atom in 0..spec.atoms() {
        let mut s = 0.0;
        for i in 0..l {
            let ip = (i + 1) % l;
            for k in 0..3 {
                let d = state.positions[spec.index(atom, i, k)] - state.positions[spec.index(atom, ip, k)];
                s += d * d;
            }
        }
        e += 0.5 * spec.masses[atom] * w2 * s;
    }
    e
}

fn add_spring_gradient(spec: &SystemSpec, state: &PathState, grad: &mut PathGradient) {
    let l = spec.beads;
    let w2 = spec.omega_l().powi(2);
    for atom in 0..spec.atoms() {
        let kspring = spec.masses[atom] * w2;
        for i in 0..l {
            let ip = (i + 1) % l;
            let im = (i + l - 1) % l;
            for k in 0..3 {
                let r = state.positions[spec.index(atom, i, k)];
                let d = 2.0 * r - state.positions[spec.index(atom, ip, k)] - state.positions[spec.index(atom, im, k)];
                grad.beads[spec.index(atom, i, k)] += kspring * d;
            }
        }
    }
}

/// `½ m_A x² / β²`.
pub fn x_harmonic_energy(spec: &SystemSpec, state: &PathState) -> f64 {
    0.5 * spec.mass_x() * state.x * state.x / (spec.beta * spec.beta)
}

pub fn kinetic_energy(spec: &SystemSpec, state: &PathState) -> f64 {
    let l = spec.beads;
    let mut e = 0.0;
    for atom in 0..spec.atoms() {
        let inv = 0.5 / spec.masses[atom];
        for i in 0..l {
            for k in 0..3 {
                let p = state.momenta[spec.index(atom, i, k)];
                e += inv * p * p;
            }
        }
    }
    e + 0.5 * state.px * state.px / spec.mass_x()
}

/// Total conserved quantity of the open-path dynamics.
pub fn hamiltonian_energy(
    spec: &SystemSpec,
    state: &PathState,
    model: &dyn PotentialModel,
    bias: Option<&dyn PathBias>,
) -> Result<f64> {
    let geom = bc_geometry(spec, state)?;
    let mut e = spring_energy(spec, state)
        + potential_energy_gradient(spec, state, model, &geom, None)?
        + x_harmonic_energy(spec, state)
        + kinetic_energy(spec, state);
    if let Some(b) = bias {
        let mut scratch = PathGradient::zeros(state);
        e += b.energy_gradient(spec, state, &geom, &mut scratch)?;
    }
    Ok(e)
}

/// Gradient of the potential and bias terms only (what the integrator
/// kicks with); returns the combined energy.
pub fn external_gradient(
    spec: &SystemSpec,
    state: &PathState,
    model: &dyn PotentialModel,
    bias: Option<&dyn PathBias>,
    grad: &mut PathGradient,
) -> Result<f64> {
    grad.beads.iter_mut().for_each(|g| *g = 0.0);
    grad.x = 0.0;
    let geom = bc_geometry(spec, state)?;
    let mut e = potential_energy_gradient(spec, state, model, &geom, Some(grad))?;
    if let Some(b) = bias {
        e += b.energy_gradient(spec, state, &geom, grad)?;
    }
    Ok(e)
}

/// Exact negative gradient of every position-dependent term.
pub fn forces(
    spec: &SystemSpec,
    state: &PathState,
    model: &dyn PotentialModel,
    bias: Option<&dyn PathBias>,
) -> Result<PathGradient> {
    let mut grad = PathGradient::zeros(state);
    external_gradient(spec, state, model, bias, &mut grad)?;
    add_spring_gradient(spec, state, &mut grad);
    grad.x += spec.mass_x() * state.x / (spec.beta * spec.beta);
    grad.beads.iter_mut().for_each(|g| *g = -*g);
    grad.x = -grad.x;
    Ok(grad)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OPATHST\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Versioned binary encoding with exact round trip.
pub fn encode_state(state: &PathState) -> Result<Vec<u8>> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let body = bincode::serialize(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_state(bytes: &[u8]) -> Result<PathState> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a path-state checkpoint".into()));
    }
    let version = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported path-state version {version}")));
    }
    bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{FreeParticles, TriatomicBathModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(beads: usize, seed: u64) -> (SystemSpec, PathState, TriatomicBathModel) {
        let model = TriatomicBathModel::with_bath(0.5);
        let spec = SystemSpec::new(model.masses(), [0, 1, 2], beads, 800.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = PathState::from_reference(&spec, &model.reference_positions(0.4), 0.0).unwrap();
        for v in state.positions.iter_mut() {
            *v += rng.gen_range(-0.15..0.15);
        }
        for v in state.momenta.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        state.x = rng.gen_range(-1.5..1.5);
        state.px = rng.gen_range(-1.0..1.0);
        (spec, state, model)
    }

    #[test]
    fn geometry_axis_aligned() {
        let g = geometry_from_points(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros(), 1e-6).unwrap();
        assert_eq!(g.e, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(g.d, 1.0);
        assert_eq!(g.jac_b, Matrix3::from_diagonal(&Vector3::new(0.0, 1.0, 1.0)));
        assert!(matches!(
            geometry_from_points(&Vector3::zeros(), &Vector3::zeros(), 1e-6),
            Err(Error::CoincidentAnchors { .. })
        ));
    }

    #[test]
    fn geometry_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let rb = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let rc = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let g = geometry_from_points(&rb, &rc, 1e-6).unwrap();
            assert!((g.e.transpose() * g.jac_b).norm() < 1e-15);
            let h = 1e-6;
            for k in 0..3 {
                let mut p = rb;
                let mut m = rb;
                p[k] += h;
                m[k] -= h;
                let de = (geometry_from_points(&p, &rc, 1e-6).unwrap().e - geometry_from_points(&m, &rc, 1e-6).unwrap().e) / (2.0 * h);
                assert!((de - g.jac_b.column(k)).norm() < 1e-6);
                let mut p = rc;
                let mut m = rc;
                p[k] += h;
                m[k] -= h;
                let de = (geometry_from_points(&rb, &p, 1e-6).unwrap().e - geometry_from_points(&rb, &m, 1e-6).unwrap().e) / (2.0 * h);
                assert!((de - g.jac_c().column(k)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn shifted_bead_cases() {
        let model = TriatomicBathModel::axial_only(crate::potentials::AxialProfile::Free);
        let spec = SystemSpec::new(model.masses(), [0, 1, 2], 4, 100.0).unwrap();
        let mut state = PathState::from_reference(&spec, &model.reference_positions(0.2), 0.0).unwrap();
        let geom = bc_geometry(&spec, &state).unwrap();
        for i in 0..=4 {
            assert_eq!(shifted_bead(&spec, &state, &geom, i).unwrap(), state.bead(0, i % 4));
        }
        state.x = 1.0;
        assert_eq!(shifted_bead(&spec, &state, &geom, 2).unwrap(), state.bead(0, 2));
        let s1 = shifted_bead(&spec, &state, &geom, 1).unwrap();
        assert_eq!(s1, state.bead(0, 1) - Vector3::new(-0.25, 0.0, 0.0));
        let s4 = shifted_bead(&spec, &state, &geom, 4).unwrap();
        assert_eq!(s4, state.bead(0, 0) - Vector3::new(0.5, 0.0, 0.0));
        assert!(shifted_bead(&spec, &state, &geom, 5).is_err());
    }

    #[test]
    fn end_to_end() {
        assert_eq!(standard_end_to_end([1.0, 2.0, 3.0], [0.0, 2.0, 3.0]), [1.0, 0.0, 0.0]);
        assert_eq!(standard_end_to_end([0.5; 3], [0.5; 3]), [0.0; 3]);
    }

    /// Independent closed-path Hamiltonian: springs + mean potential over
    /// beads + kinetic.
    fn closed_path_reference(spec: &SystemSpec, state: &PathState, model: &dyn PotentialModel) -> f64 {
        let l = spec.beads;
        let n = spec.atoms();
        let w2 = (l as f64) / (spec.beta * spec.beta);
        let mut e = 0.0;
        for i in 0..l {
            let mut cfg = Vec::with_capacity(3 * n);
            for atom in 0..n {
                let r = state.bead(atom, i);
                cfg.extend_from_slice(r.as_slice());
                let rn = state.bead(atom, (i + 1) % l);
                e += 0.5 * spec.masses[atom] * w2 * (r - rn).norm_squared();
                for k in 0..3 {
                    e += state.momenta[spec.index(atom, i, k)].powi(2) / (2.0 * spec.masses[atom]);
                }
            }
            e += model.energy(&cfg).unwrap() / l as f64;
        }
        e + state.px * state.px / (2.0 * spec.mass_x())
    }

    #[test]
    fn closed_path_limit() {
        let (spec, mut state, model) = setup(8, 1);
        state.x = 0.0;
        let h = hamiltonian_energy(&spec, &state, &model, None).unwrap();
        let r = closed_path_reference(&spec, &state, &model);
        assert!(((h - r) / r).abs() < 1e-12);
    }

    #[test]
    fn free_coincident_beads_only_x_term() {
        let model = FreeParticles { atoms: 3 };
        let spec = SystemSpec::new(vec![1836.0, 29000.0, 29000.0], [0, 1, 2], 6, 500.0).unwrap();
        let reference = [0.1, 0.0, 0.0, 2.0, 0.0, 0.0, -2.0, 0.0, 0.0];
        let state = PathState::from_reference(&spec, &reference, 0.7).unwrap();
        let h = hamiltonian_energy(&spec, &state, &model, None).unwrap();
        assert!((h - 0.5 * 1836.0 * 0.49 / 250000.0).abs() < 1e-18);
        let f = forces(&spec, &state, &model, None).unwrap();
        assert!(f.beads.iter().all(|v| *v == 0.0));
        assert!((f.x + 1836.0 * 0.7 / 250000.0).abs() < 1e-18);
    }

    /// Term-by-term reimplementation in untransformed form.
    fn term_oracle(spec: &SystemSpec, state: &PathState, model: &TriatomicBathModel) -> f64 {
        let l = spec.beads;
        let n = spec.atoms();
        let rb = state.bead(1, 0);
        let rc = state.bead(2, 0);
        let e = (rb - rc) / (rb - rc).norm();
        let mut spring = 0.0;
        for atom in 0..n {
            for i in 0..l {
                spring += 0.5 * spec.masses[atom] * spec.omega_l().powi(2) * (state.bead(atom, i) - state.bead(atom, (i + 1) % l)).norm_squared();
            }
        }
        let eval = |bead: usize, y: f64| {
            let mut cfg = Vec::new();
            for atom in 0..n {
                let mut r = state.bead(atom, bead);
                if atom == 0 {
                    r -= state.x * y * e;
                }
                cfg.extend_from_slice(r.as_slice());
            }
            model.energy(&cfg).unwrap()
        };
        let mut pot = (eval(0, -0.5) + eval(0, 0.5)) / (2.0 * l as f64);
        for i in 1..l {
            pot += eval(i, i as f64 / l as f64 - 0.5) / l as f64;
        }
        let xq = 0.5 * spec.masses[0] * state.x * state.x / spec.beta.powi(2);
        let mut kin = state.px * state.px / (2.0 * spec.masses[0]);
        for atom in 0..n {
            for i in 0..l {
                for k in 0..3 {
                    kin += state.momenta[spec.index(atom, i, k)].powi(2) / (2.0 * spec.masses[atom]);
                }
            }
        }
        spring + pot + xq + kin
    }

    #[test]
    fn hamiltonian_matches_term_oracle() {
        for seed in 0..5 {
            let (spec, state, model) = setup(6, seed);
            let h = hamiltonian_energy(&spec, &state, &model, None).unwrap();
            let r = term_oracle(&spec, &state, &model);
            assert!(((h - r) / r).abs() < 1e-12);
        }
    }

    #[test]
    fn forces_match_finite_differences() {
        for seed in 0..20 {
            let (spec, state, model) = setup(5, 100 + seed);
            let f = forces(&spec, &state, &model, None).unwrap();
            let h = 1e-6;
            let scale = f.beads.iter().map(|v| v * v).sum::<f64>().sqrt().max(f.x.abs());
            for idx in 0..state.positions.len() {
                let mut p = state.clone();
                let mut m = state.clone();
                p.positions[idx] += h;
                m.positions[idx] -= h;
                let fd = -(hamiltonian_energy(&spec, &p, &model, None).unwrap()
                    - hamiltonian_energy(&spec, &m, &model, None).unwrap())
                    / (2.0 * h);
                assert!((fd - f.beads[idx]).abs() < 1e-6 * scale, "seed {seed} idx {idx}: {fd} vs {}", f.beads[idx]);
            }
            let mut p = state.clone();
            let mut m = state.clone();
            p.x += h;
            m.x -= h;
            let fd = -(hamiltonian_energy(&spec, &p, &model, None).unwrap() - hamiltonian_energy(&spec, &m, &model, None).unwrap()) / (2.0 * h);
            assert!((fd - f.x).abs() < 1e-6 * scale);
        }
    }

    #[test]
    fn x_force_at_zero_opening() {
        let (spec, mut state, model) = setup(6, 9);
        state.x = 0.0;
        let f = forces(&spec, &state, &model, None).unwrap();
        let geom = bc_geometry(&spec, &state).unwrap();
        let l = spec.beads;
        let mut expect = 0.0;
        for j in 0..=l {
            let w = if j == 0 || j == l { 0.5 } else { 1.0 } / l as f64;
            let mut cfg = Vec::new();
            for atom in 0..spec.atoms() {
                cfg.extend_from_slice(state.bead(atom, j % l).as_slice());
            }
            let g = model.gradient(&cfg).unwrap();
            expect -= w * spec.y(j) * -(Vector3::new(g[0], g[1], g[2]).dot(&geom.e));
        }
        assert!((f.x - expect).abs() < 1e-14);
    }

    #[test]
    fn translation_invariance() {
        let (spec, state, model) = setup(4, 3);
        let e0 = hamiltonian_energy(&spec, &state, &model, None).unwrap();
        let mut moved = state.clone();
        for atom in 0..3 {
            for i in 0..spec.beads {
                moved.positions[spec.index(atom, i, 0)] += 0.7;
                moved.positions[spec.index(atom, i, 2)] -= 1.1;
            }
        }
        let e1 = hamiltonian_energy(&spec, &moved, &model, None).unwrap();
        assert!(((e1 - e0) / e0).abs() < 1e-12);
        assert_eq!(spring_energy(&spec, &state) > 0.0, true);
    }

    #[test]
    fn state_round_trip() {
        let (_, state, _) = setup(4, 8);
        let bytes = encode_state(&state).unwrap();
        assert_eq!(decode_state(&bytes).unwrap(), state);
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_state(&bad).is_err());
        assert!(decode_state(&bytes[..5]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SystemSpec::new(vec![1.0; 3], [0, 0, 2], 4, 1.0).is_err());
        assert!(SystemSpec::new(vec![1.0; 3], [0, 1, 2], 1, 1.0).is_err());
        assert!(SystemSpec::new(vec![1.0, -1.0, 1.0], [0, 1, 2], 4, 1.0).is_err());
        let s = SystemSpec::new(vec![1.0; 3], [0, 1, 2], 4, 2.0).unwrap();
        assert_eq!(s.omega_l(), 1.0);
        assert_eq!(s.mobile_dofs(), 3 * 3 * 4 + 1);
    }
}
