//! Model potential-energy surfaces behind a common energy/gradient interface.
//!
//! All quantities are in atomic units: positions in bohr, energies in
//! hartree, masses in electron masses.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proton mass used for the tagged hydrogen, electron masses.
pub const HYDROGEN_MASS: f64 = 1836.0;
/// Mass of an oxygen-16 atom, electron masses.
pub const OXYGEN_MASS: f64 = 29156.9;
/// Smallest B-C separation the geometry code accepts, bohr.
pub const MIN_ANCHOR_SEPARATION: f64 = 1e-6;

/// A many-body potential-energy surface.
///
/// `positions` is a flat Cartesian vector of length [`dimension`](Self::dimension).
pub trait PotentialModel: Send + Sync {
    fn dimension(&self) -> usize;

    /// Energy and its gradient; `gradient` is overwritten.
    fn energy_gradient(&self, positions: &[f64], gradient: &mut [f64]) -> Result<f64>;

    fn energy(&self, positions: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; positions.len()];
        self.energy_gradient(positions, &mut g)
    }

    fn gradient(&self, positions: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; positions.len()];
        self.energy_gradient(positions, &mut g)?;
        Ok(g)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// One-dimensional profile with value and derivative.
pub trait Profile1D {
    fn value(&self, q: f64) -> f64;
    fn derivative(&self, q: f64) -> f64;
}

/// Symmetric quartic double well `v0 ((q/a)^2 - 1)^2`, continued linearly
/// (matched value and slope) outside `extension`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleWell1D {
    #[serde(default = "DoubleWell1D::default_v0")]
    pub v0: f64,
    #[serde(default = "DoubleWell1D::default_a")]
    pub a: f64,
    #[serde(default = "DoubleWell1D::default_extension")]
    pub extension: [f64; 2],
    #[serde(default = "DoubleWell1D::default_mass")]
    pub mass: f64,
}

impl Default for DoubleWell1D {
    fn default() -> Self {
        Self {
            v0: Self::default_v0(),
            a: Self::default_a(),
            extension: Self::default_extension(),
            mass: Self::default_mass(),
        }
    }
}

impl DoubleWell1D {
    fn default_v0() -> f64 {
        0.006
    }
    fn default_a() -> f64 {
        0.6
    }
    fn default_extension() -> [f64; 2] {
        [-2.0, 2.0]
    }
    fn default_mass() -> f64 {
        HYDROGEN_MASS
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v0.is_finite() && self.a > 0.0 && self.mass > 0.0) {
            return Err(Error::Config("double well needs finite v0, a > 0, mass > 0".into()));
        }
        if !(self.extension[0] < self.extension[1]) {
            return Err(Error::Config("double well extension range must be increasing".into()));
        }
        Ok(())
    }

    fn quartic(&self, q: f64) -> f64 {
        let s = (q / self.a) * (q / self.a) - 1.0;
        self.v0 * s * s
    }

    fn quartic_slope(&self, q: f64) -> f64 {
        let s = (q / self.a) * (q / self.a) - 1.0;
        4.0 * self.v0 * s * q / (self.a * self.a)
    }
}

impl Profile1D for DoubleWell1D {
    fn value(&self, q: f64) -> f64 {
        let [lo, hi] = self.extension;
        if q > hi {
            self.quartic(hi) + self.quartic_slope(hi) * (q - hi)
        } else if q < lo {
            self.quartic(lo) + self.quartic_slope(lo) * (q - lo)
        } else {
            self.quartic(q)
        }
    }

    fn derivative(&self, q: f64) -> f64 {
        let [lo, hi] = self.extension;
        if q > hi {
            self.quartic_slope(hi)
        } else if q < lo {
            self.quartic_slope(lo)
        } else {
            self.quartic_slope(q)
        }
    }
}

impl PotentialModel for DoubleWell1D {
    fn dimension(&self) -> usize {
        1
    }

    fn energy_gradient(&self, positions: &[f64], gradient: &mut [f64]) -> Result<f64> {
        check_dim(1, positions.len())?;
        check_dim(1, gradient.len())?;
        gradient[0] = self.derivative(positions[0]);
        Ok(self.value(positions[0]))
    }
}

/// `½ m ω² q²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Harmonic1D {
    pub mass: f64,
    pub omega: f64,
}

impl Profile1D for Harmonic1D {
    fn value(&self, q: f64) -> f64 {
        0.5 * self.mass * self.omega * self.omega * q * q
    }
    fn derivative(&self, q: f64) -> f64 {
        self.mass * self.omega * self.omega * q
    }
}

impl PotentialModel for Harmonic1D {
    fn dimension(&self) -> usize {
        1
    }
    fn energy_gradient(&self, positions: &[f64], gradient: &mut [f64]) -> Result<f64> {
        check_dim(1, positions.len())?;
        check_dim(1, gradient.len())?;
        gradient[0] = self.derivative(positions[0]);
        Ok(self.value(positions[0]))
    }
}

/// Longitudinal profile felt by the tagged atom along the B-C axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AxialProfile {
    DoubleWell(DoubleWell1D),
    Harmonic { omega: f64 },
    Free,
}

impl AxialProfile {
    pub fn value(&self, q: f64, mass: f64) -> f64 {
        match self {
            AxialProfile::DoubleWell(dw) => dw.value(q),
            AxialProfile::Harmonic { omega } => Harmonic1D { mass, omega: *omega }.value(q),
            AxialProfile::Free => 0.0,
        }
    }
    pub fn derivative(&self, q: f64, mass: f64) -> f64 {
        match self {
            AxialProfile::DoubleWell(dw) => dw.derivative(q),
            AxialProfile::Harmonic { omega } => Harmonic1D { mass, omega: *omega }.derivative(q),
            AxialProfile::Free => 0.0,
        }
    }
}

/// Bath oscillator bilinearly coupled to the tagged coordinate
/// (Caldeira-Leggett form with counter-term).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathMode {
    pub mass: f64,
    pub omega: f64,
    pub coupling: f64,
}

impl BathMode {
    /// Coupling expressed through the equilibrium shift per unit q,
    /// `c = kappa m ω²`.
    pub fn from_shift(mass: f64, omega: f64, kappa: f64) -> Self {
        Self {
            mass,
            omega,
            coupling: kappa * mass * omega * omega,
        }
    }
}

/// Tagged atom A between two anchors B and C, plus a harmonic bath.
///
/// Atom order in the position vector is A, B, C, then one pseudo-atom per
/// bath mode whose first Cartesian component is the bath coordinate.
///
/// ```text
/// q = (r_A - (r_B + r_C)/2) · e_BC
/// V = V_axial(q) + ½ k_perp |r_A - mid - q e|² + ½ k_anchor (|r_B - r_C| - d_BC)²
///     + Σ_j ½ m_j ω_j² (s_j - c_j q / (m_j ω_j²))²
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriatomicBathModel {
    pub mass_a: f64,
    pub mass_b: f64,
    pub mass_c: f64,
    pub d_bc: f64,
    pub k_anchor: f64,
    pub k_perp: f64,
    pub axial: AxialProfile,
    #[serde(default)]
    pub bath: Vec<BathMode>,
}

impl Default for TriatomicBathModel {
    fn default() -> Self {
        Self::with_bath(0.45)
    }
}

impl TriatomicBathModel {
    /// Default geometry with four log-spaced bath modes (0.002 to 0.016
    /// hartree) each coupled with equilibrium shift `kappa`.
    pub fn with_bath(kappa: f64) -> Self {
        let bath = (0..4)
            .map(|j| BathMode::from_shift(HYDROGEN_MASS, 0.002 * 2f64.powi(j), kappa))
            .collect();
        Self {
            mass_a: HYDROGEN_MASS,
            mass_b: OXYGEN_MASS,
            mass_c: OXYGEN_MASS,
            d_bc: 4.87,
            k_anchor: 0.05,
            k_perp: HYDROGEN_MASS * 0.006 * 0.006,
            axial: AxialProfile::DoubleWell(DoubleWell1D::default()),
            bath,
        }
    }

    /// A with the default double well and no bath; B and C are meant to be
    /// frozen at their reference sites for strictly one-dimensional runs.
    pub fn axial_only(axial: AxialProfile) -> Self {
        Self {
            axial,
            bath: Vec::new(),
            ..Self::with_bath(0.0)
        }
    }

    pub fn atom_count(&self) -> usize {
        3 + self.bath.len()
    }

    pub fn masses(&self) -> Vec<f64> {
        let mut m = vec![self.mass_a, self.mass_b, self.mass_c];
        m.extend(self.bath.iter().map(|b| b.mass));
        m
    }

    pub fn validate(&self) -> Result<()> {
        if let AxialProfile::DoubleWell(dw) = &self.axial {
            dw.validate()?;
        }
        let positive = [self.mass_a, self.mass_b, self.mass_c, self.d_bc];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("masses and d_bc must be positive".into()));
        }
        if self.k_anchor < 0.0 || self.k_perp < 0.0 {
            return Err(Error::Config("force constants must be non-negative".into()));
        }
        for b in &self.bath {
            if !(b.mass > 0.0 && b.omega > 0.0 && b.coupling.is_finite()) {
                return Err(Error::Config("bath modes need mass > 0, omega > 0".into()));
            }
        }
        Ok(())
    }

    /// Reference geometry: B at +d/2, C at -d/2 on the x axis, A at the
    /// midpoint offset by `q` along x, bath coordinates at their coupled
    /// equilibrium.
    pub fn reference_positions(&self, q: f64) -> Vec<f64> {
        let mut p = vec![0.0; 3 * self.atom_count()];
        p[0] = q;
        p[3] = 0.5 * self.d_bc;
        p[6] = -0.5 * self.d_bc;
        for (j, b) in self.bath.iter().enumerate() {
            p[3 * (3 + j)] = b.coupling * q / (b.mass * b.omega * b.omega);
        }
        p
    }

    /// Longitudinal coordinate of A.
    pub fn axial_coordinate(&self, positions: &[f64]) -> Result<f64> {
        check_dim(3 * self.atom_count(), positions.len())?;
        let ra = Vector3::new(positions[0], positions[1], positions[2]);
        let rb = Vector3::new(positions[3], positions[4], positions[5]);
        let rc = Vector3::new(positions[6], positions[7], positions[8]);
        let u = rb - rc;
        let d = u.norm();
        if d <= MIN_ANCHOR_SEPARATION {
            return Err(Error::CoincidentAnchors {
                separation: d,
                cutoff: MIN_ANCHOR_SEPARATION,
            });
        }
        Ok((ra - 0.5 * (rb + rc)).dot(&(u / d)))
    }
}

impl PotentialModel for TriatomicBathModel {
    fn dimension(&self) -> usize {
        3 * self.atom_count()
    }

    fn energy_gradient(&self, positions: &[f64], gradient: &mut [f64]) -> Result<f64> {
        check_dim(self.dimension(), positions.len())?;
        check_dim(self.dimension(), gradient.len())?;
        let ra = Vector3::new(positions[0], positions[1], positions[2]);
        let rb = Vector3::new(positions[3], positions[4], positions[5]);
        let rc = Vector3::new(positions[6], positions[7], positions[8]);
        let u = rb - rc;
        let d = u.norm();
        if d <= MIN_ANCHOR_SEPARATION {
            return Err(Error::CoincidentAnchors {
                separation: d,
                cutoff: MIN_ANCHOR_SEPARATION,
            });
        }
        let e = u / d;
        let w = ra - 0.5 * (rb + rc);
        let q = w.dot(&e);

        let mut energy = self.axial.value(q, self.mass_a);
        let mut dvdq = self.axial.derivative(q, self.mass_a);

        energy += 0.5 * self.k_perp * (w.dot(&w) - q * q);
        let stretch = d - self.d_bc;
        energy += 0.5 * self.k_anchor * stretch * stretch;

        gradient.iter_mut().for_each(|g| *g = 0.0);
        for (j, b) in self.bath.iter().enumerate() {
            let k = b.mass * b.omega * b.omega;
            let s = positions[3 * (3 + j)];
            let disp = s - b.coupling * q / k;
            energy += 0.5 * k * disp * disp;
            gradient[3 * (3 + j)] = k * disp;
            dvdq -= b.coupling * disp;
        }

        let grad_w = dvdq * e + self.k_perp * (w - q * e);
        let grad_e = (dvdq - self.k_perp * q) * w;
        let proj = (Matrix3::identity() - e * e.transpose()) / d;
        let grad_e_b = proj * grad_e;
        let anchor = self.k_anchor * stretch * e;

        let ga = grad_w;
        let gb = -0.5 * grad_w + grad_e_b + anchor;
        let gc = -0.5 * grad_w - grad_e_b - anchor;
        gradient[0..3].copy_from_slice(ga.as_slice());
        gradient[3..6].copy_from_slice(gb.as_slice());
        gradient[6..9].copy_from_slice(gc.as_slice());
        Ok(energy)
    }
}

/// Potential-free system of `atoms` atoms.
#[derive(Clone, Copy, Debug)]
pub struct FreeParticles {
    pub atoms: usize,
}

impl PotentialModel for FreeParticles {
    fn dimension(&self) -> usize {
        3 * self.atoms
    }
    fn energy_gradient(&self, positions: &[f64], gradient: &mut [f64]) -> Result<f64> {
        check_dim(self.dimension(), positions.len())?;
        check_dim(self.dimension(), gradient.len())?;
        gradient.iter_mut().for_each(|g| *g = 0.0);
        Ok(0.0)
    }
}

/// Evaluate `V(q)` for the double well (total function).
pub fn eval_double_well(model: &DoubleWell1D, q: f64) -> f64 {
    model.value(q)
}

/// Analytic gradient of any model, with a dimension check.
pub fn grad_potential(model: &dyn PotentialModel, positions: &[f64]) -> Result<Vec<f64>> {
    check_dim(model.dimension(), positions.len())?;
    model.gradient(positions)
}

/// Even part `(V(q) + V(-q))/2` of a tabulated profile on a grid symmetric
/// about zero.
pub fn symmetrize_profile(table: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let n = table.len();
    if n == 0 {
        return Err(Error::InsufficientData {
            what: "profile table",
            need: 1,
            got: 0,
        });
    }
    let scale = table.iter().fold(0.0_f64, |m, (q, _)| m.max(q.abs())).max(1.0);
    for i in 0..n {
        let (q, _) = table[i];
        let (mirror, _) = table[n - 1 - i];
        if (q + mirror).abs() > 1e-9 * scale {
            return Err(Error::AsymmetricGrid);
        }
    }
    Ok((0..n)
        .map(|i| (table[i].0, 0.5 * (table[i].1 + table[n - 1 - i].1)))
        .collect())
}

/// Parse a two-column `(q, V)` table; `#` starts a comment.
pub fn parse_profile(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
        if cols.len() != 2 {
            return Err(Error::Parse(format!("line {}: expected two columns", lineno + 1)));
        }
        let q: f64 = cols[0]
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        let v: f64 = cols[1]
            .parse()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        out.push((q, v));
    }
    Ok(out)
}

pub fn format_profile(table: &[(f64, f64)]) -> String {
    let mut s = String::from("# q(bohr) V(hartree)\n");
    for (q, v) in table {
        let _ = writeln!(s, "{q:.17e} {v:.17e}");
    }
    s
}

pub fn read_profile(path: &Path) -> Result<Vec<(f64, f64)>> {
    parse_profile(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_check(model: &dyn PotentialModel, x: &[f64]) -> f64 {
        let g = model.gradient(x).unwrap();
        let h = 1e-5;
        let mut worst = 0.0_f64;
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (model.energy(&xp).unwrap() - model.energy(&xm).unwrap()) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / gnorm);
        }
        worst
    }

    #[test]
    fn double_well_landmarks() {
        let dw = DoubleWell1D::default();
        assert_eq!(eval_double_well(&dw, 0.6), 0.0);
        assert_eq!(eval_double_well(&dw, -0.6), 0.0);
        assert_eq!(eval_double_well(&dw, 0.0), 0.006);
        assert_eq!(dw.derivative(0.0), 0.0);
        assert_eq!(dw.derivative(0.6), 0.0);
    }

    #[test]
    fn double_well_linear_extension() {
        let dw = DoubleWell1D::default();
        // quartic closed form at q = 2: s = (2/0.6)^2 - 1
        let s: f64 = (2.0f64 / 0.6).powi(2) - 1.0;
        let v2 = 0.006 * s * s;
        let dv2 = 4.0 * 0.006 * s * 2.0 / 0.36;
        let expect = v2 + dv2 * 0.5;
        assert!((eval_double_well(&dw, 2.5) - expect).abs() < 1e-14 * expect);
        // C1 at the boundary
        let eps = 1e-9;
        assert!((dw.value(2.0 + eps) - dw.value(2.0 - eps)).abs() < 1e-6);
        assert!((dw.derivative(2.0 + eps) - dw.derivative(2.0 - eps)).abs() < 1e-6);
    }

    #[test]
    fn double_well_is_exactly_even() {
        let dw = DoubleWell1D::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q: f64 = rng.gen_range(-4.0..4.0);
            assert_eq!(dw.value(q), dw.value(-q));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dw = DoubleWell1D::default();
        let tri = TriatomicBathModel::default();
        let harm = Harmonic1D { mass: 1836.0, omega: 0.01 };
        for _ in 0..100 {
            let q = [rng.gen_range(-2.5..2.5)];
            assert!(fd_check(&dw, &q) < 1e-6);
            assert!(fd_check(&harm, &q) < 1e-6);
            let mut x = tri.reference_positions(rng.gen_range(-1.0..1.0));
            for v in x.iter_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
            let err = fd_check(&tri, &x);
            assert!(err < 1e-6, "triatomic fd error {err}");
        }
    }

    #[test]
    fn grad_potential_checks_dimension() {
        let tri = TriatomicBathModel::default();
        assert!(matches!(
            grad_potential(&tri, &[0.0; 4]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn triatomic_translation_invariant() {
        let tri = TriatomicBathModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = tri.reference_positions(0.3);
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
        let e0 = tri.energy(&x).unwrap();
        let shift = [1.3, -0.4, 2.2];
        let mut y = x.clone();
        for atom in 0..3 {
            for k in 0..3 {
                y[3 * atom + k] += shift[k];
            }
        }
        assert!((tri.energy(&y).unwrap() - e0).abs() < 1e-14 * e0.abs().max(1.0));
    }

    #[test]
    fn zero_coupling_reduces_to_double_well() {
        let tri = TriatomicBathModel::with_bath(0.0);
        let dw = DoubleWell1D::default();
        let base = tri.reference_positions(0.0);
        let offset = tri.energy(&base).unwrap() - dw.value(0.0);
        for i in 0..41 {
            let q = -2.0 + 0.1 * i as f64;
            let mut x = base.clone();
            x[0] = q;
            let diff = tri.energy(&x).unwrap() - dw.value(q);
            assert!((diff - offset).abs() < 1e-15);
        }
    }

    #[test]
    fn coincident_anchors_rejected() {
        let tri = TriatomicBathModel::default();
        let mut x = tri.reference_positions(0.0);
        x[3] = 0.0;
        x[6] = 0.0;
        assert!(matches!(tri.energy(&x), Err(Error::CoincidentAnchors { .. })));
    }

    #[test]
    fn symmetrize_cases() {
        let even: Vec<(f64, f64)> = (-5..=5).map(|i| (i as f64 * 0.1, (i as f64).powi(2))).collect();
        assert_eq!(symmetrize_profile(&even).unwrap(), even);
        let odd: Vec<(f64, f64)> = (-5..=5).map(|i| (i as f64 * 0.1, i as f64 * 0.1)).collect();
        assert!(symmetrize_profile(&odd).unwrap().iter().all(|(_, v)| *v == 0.0));
        let mixed: Vec<(f64, f64)> = (-5..=5)
            .map(|i| {
                let q = i as f64 * 0.1;
                (q, q + q * q)
            })
            .collect();
        for (q, v) in symmetrize_profile(&mixed).unwrap() {
            assert!((v - q * q).abs() < 1e-15);
        }
        let skew = vec![(-1.0, 0.0), (0.0, 0.0), (2.0, 0.0)];
        assert!(matches!(symmetrize_profile(&skew), Err(Error::AsymmetricGrid)));
    }

    #[test]
    fn profile_text_round_trip() {
        let table = vec![(-1.0, 0.25), (0.0, 0.5), (1.0, 0.125)];
        let parsed = parse_profile(&format_profile(&table)).unwrap();
        assert_eq!(parsed, table);
        assert!(parse_profile("1.0 2.0 3.0").is_err());
    }
}
