//! Displacement and momentum distributions, the classical reference, and
//! their statistical uncertainties.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Value one at the origin (end-to-end distribution).
    UnitAtOrigin,
    /// Unit integral (momentum distribution).
    UnitIntegral,
    /// Minimum shifted to zero (free-energy profile).
    MinimumZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Exact,
    Sampled,
    Classical,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Exact => "exact",
            Source::Sampled => "sampled",
            Source::Classical => "classical",
        }
    }
}

/// A function tabulated on a grid with pointwise standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionResult {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
    pub normalization: Normalization,
    pub source: Source,
}

impl DistributionResult {
    pub fn new(grid: Vec<f64>, values: Vec<f64>, normalization: Normalization, source: Source) -> Self {
        let sigma = vec![0.0; values.len()];
        Self {
            grid,
            values,
            sigma,
            normalization,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Linear interpolation, zero outside the grid.
    pub fn interpolate(&self, x: f64) -> f64 {
        interpolate_linear(&self.grid, &self.values, x)
    }

    /// Largest |self - other| over this grid, other interpolated.
    pub fn sup_deviation(&self, other: &DistributionResult) -> f64 {
        self.grid
            .iter()
            .zip(&self.values)
            .map(|(x, v)| (v - other.interpolate(*x)).abs())
            .fold(0.0, f64::max)
    }
}

/// Piecewise-linear interpolation on an increasing grid, zero outside.
pub fn interpolate_linear(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if n == 0 || x < grid[0] || x > grid[n - 1] {
        return 0.0;
    }
    if n == 1 {
        return values[0];
    }
    let k = grid.partition_point(|g| *g <= x).clamp(1, n - 1);
    let (x0, x1) = (grid[k - 1], grid[k]);
    let t = (x - x0) / (x1 - x0);
    values[k - 1] + t * (values[k] - values[k - 1])
}

/// Trapezoidal weights for an arbitrary increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut w = vec![0.0; n];
    for i in 1..n {
        let h = 0.5 * (grid[i] - grid[i - 1]);
        w[i - 1] += h;
        w[i] += h;
    }
    w
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    trapezoid_weights(grid).iter().zip(values).map(|(w, v)| w * v).sum()
}

pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + h * i as f64).collect()
}

/// Symmetric grid `-max..=max` with `n` points (n odd keeps 0 exactly).
pub fn symmetric_grid(max: f64, n: usize) -> Vec<f64> {
    let half = (n / 2) as f64;
    let h = if n > 1 { max / half } else { 0.0 };
    (0..n).map(|i| (i as f64 - half) * h).collect()
}

pub(crate) fn origin_index(grid: &[f64]) -> Result<usize> {
    let scale = grid.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
    grid.iter()
        .position(|x| x.abs() <= 1e-12 * scale)
        .ok_or(Error::GridMissingZero)
}

/// `ñ(x) = exp(-β (F(x) - F(0)))`.
pub fn ntilde_from_free_energy(grid: &[f64], free_energy: &[f64], beta: f64) -> Result<DistributionResult> {
    if grid.len() != free_energy.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: free_energy.len(),
        });
    }
    if let Some(bad) = free_energy.iter().find(|f| !f.is_finite()) {
        return Err(Error::NonFinite(format!("free energy value {bad}")));
    }
    let i0 = origin_index(grid)?;
    let f0 = free_energy[i0];
    let values = free_energy.iter().map(|f| (-beta * (f - f0)).exp()).collect();
    Ok(DistributionResult::new(
        grid.to_vec(),
        values,
        Normalization::UnitAtOrigin,
        Source::Sampled,
    ))
}

/// `n(p) = (1/2π) ∫ cos(p x) ñ(x) dx` by the trapezoidal rule.
pub fn momentum_transform(ntilde: &DistributionResult, p_grid: &[f64]) -> DistributionResult {
    let n = ntilde.len();
    if n > 0 {
        let edge = ntilde.values[0].abs().max(ntilde.values[n - 1].abs());
        if edge > 1e-8 {
            log::warn!("end-to-end distribution is {edge:.3e} at the grid edge; transform is truncated");
        }
    }
    let w = trapezoid_weights(&ntilde.grid);
    let values = p_grid
        .iter()
        .map(|p| {
            let s: f64 = ntilde
                .grid
                .iter()
                .zip(&ntilde.values)
                .zip(&w)
                .map(|((x, v), w)| w * v * (p * x).cos())
                .sum();
            s / (2.0 * PI)
        })
        .collect();
    DistributionResult::new(p_grid.to_vec(), values, Normalization::UnitIntegral, ntilde.source)
}

/// Maxwell-Boltzmann momentum density `√(β/2πm) exp(-βp²/2m)`.
pub fn classical_momentum(mass: f64, beta: f64, p_grid: &[f64]) -> DistributionResult {
    let pref = (beta / (2.0 * PI * mass)).sqrt();
    let values = p_grid
        .iter()
        .map(|p| pref * (-beta * p * p / (2.0 * mass)).exp())
        .collect();
    DistributionResult::new(p_grid.to_vec(), values, Normalization::UnitIntegral, Source::Classical)
}

/// Result of a block-averaging analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub len: usize,
    pub block_size: usize,
    pub effective_samples: f64,
    pub mean: f64,
    pub standard_error: f64,
    /// (block size, standard error of the mean) for every block size tried.
    pub curve: Vec<(usize, f64)>,
}

fn block_curve(series: &[f64]) -> Vec<(usize, f64, usize)> {
    let n = series.len();
    let mut out = Vec::new();
    let mut b = 1;
    while n / b >= 4 {
        let nb = n / b;
        let means: Vec<f64> = (0..nb)
            .map(|k| series[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64)
            .collect();
        let m = means.iter().sum::<f64>() / nb as f64;
        let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (nb - 1) as f64;
        out.push((b, (var / nb as f64).sqrt(), nb));
        b *= 2;
    }
    out
}

/// Standard error of the mean by block averaging over power-of-two blocks.
///
/// The plateau block is the smallest one whose standard error is within 5%
/// of every larger block's value, after discounting each larger block by
/// twice its own statistical uncertainty `SE/√(2(n_b - 1))`.
pub fn block_average(series: &[f64]) -> Result<SeriesStats> {
    let n = series.len();
    if n < 16 {
        return Err(Error::InsufficientData {
            what: "block averaging series",
            need: 16,
            got: n,
        });
    }
    if let Some(bad) = series.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("series value {bad}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let curve = block_curve(series);
    let floor: Vec<f64> = curve
        .iter()
        .map(|(_, se, nb)| se * (1.0 - 2.0 / (2.0 * (*nb as f64 - 1.0)).sqrt()).max(0.0))
        .collect();
    let mut pick = curve.len() - 1;
    for i in 0..curve.len() {
        let target = floor[i + 1..].iter().cloned().fold(0.0, f64::max);
        if curve[i].1 >= 0.95 * target {
            pick = i;
            break;
        }
    }
    let (block_size, standard_error, _) = curve[pick];
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let effective_samples = if standard_error > 0.0 {
        (var / (standard_error * standard_error)).min(n as f64)
    } else {
        n as f64
    };
    Ok(SeriesStats {
        len: n,
        block_size,
        effective_samples,
        mean,
        standard_error,
        curve: curve.into_iter().map(|(b, se, _)| (b, se)).collect(),
    })
}

/// Average consecutive runs of `block_size` rows (tail remainder dropped).
pub fn block_means(rows: &[Vec<f64>], block_size: usize) -> Vec<Vec<f64>> {
    let b = block_size.max(1);
    rows.chunks_exact(b)
        .map(|chunk| {
            let mut acc = vec![0.0; chunk[0].len()];
            for row in chunk {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= b as f64);
            acc
        })
        .collect()
}

/// Central estimate and pointwise bootstrap spread of a block pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapResult {
    pub estimate: Vec<f64>,
    pub sigma: Vec<f64>,
    pub resamples: usize,
}

/// Resample `blocks` with replacement `resamples` times, run `pipeline` on
/// each resample and report the pointwise standard deviation.
///
/// Resample indices are drawn sequentially from `rng` so the result does
/// not depend on the thread count.
pub fn bootstrap<T, R, F>(blocks: &[T], resamples: usize, rng: &mut R, pipeline: F) -> Result<BootstrapResult>
where
    T: Sync,
    R: Rng + ?Sized,
    F: Fn(&[&T]) -> Result<Vec<f64>> + Sync,
{
    if blocks.len() < 8 {
        return Err(Error::InsufficientData {
            what: "bootstrap blocks",
            need: 8,
            got: blocks.len(),
        });
    }
    if resamples < 2 {
        return Err(Error::InsufficientData {
            what: "bootstrap resamples",
            need: 2,
            got: resamples,
        });
    }
    let all: Vec<&T> = blocks.iter().collect();
    let estimate = pipeline(&all)?;
    let draws: Vec<Vec<usize>> = (0..resamples)
        .map(|_| (0..blocks.len()).map(|_| rng.gen_range(0..blocks.len())).collect())
        .collect();
    let outputs: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|idx| {
            let pick: Vec<&T> = idx.iter().map(|&i| &blocks[i]).collect();
            pipeline(&pick)
        })
        .collect::<Result<_>>()?;
    let m = estimate.len();
    let mut sigma = vec![0.0; m];
    for j in 0..m {
        let mean = outputs.iter().map(|o| o[j]).sum::<f64>() / resamples as f64;
        let var = outputs.iter().map(|o| (o[j] - mean).powi(2)).sum::<f64>() / (resamples - 1) as f64;
        sigma[j] = var.sqrt();
    }
    Ok(BootstrapResult {
        estimate,
        sigma,
        resamples,
    })
}

/// Header metadata written above every CSV table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvHeader {
    pub beta: f64,
    pub beads: usize,
    pub model_hash: String,
    pub run_id: String,
}

pub fn format_distribution_csv(header: &CsvHeader, columns: [&str; 3], d: &DistributionResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# beta={} l={} model_hash={} run_id={} source={}",
        header.beta,
        header.beads,
        header.model_hash,
        header.run_id,
        d.source.as_str()
    );
    let _ = writeln!(s, "{},{},{}", columns[0], columns[1], columns[2]);
    for i in 0..d.len() {
        let _ = writeln!(s, "{:.12e},{:.12e},{:.12e}", d.grid[i], d.values[i], d.sigma[i]);
    }
    s
}

pub fn write_distribution_csv(
    path: &Path,
    header: &CsvHeader,
    columns: [&str; 3],
    d: &DistributionResult,
) -> Result<()> {
    std::fs::write(path, format_distribution_csv(header, columns, d))?;
    Ok(())
}

/// Read a three-column CSV written by [`write_distribution_csv`].
pub fn read_distribution_csv(path: &Path, normalization: Normalization) -> Result<DistributionResult> {
    let text = std::fs::read_to_string(path)?;
    let mut grid = Vec::new();
    let mut values = Vec::new();
    let mut sigma = Vec::new();
    let mut source = Source::Sampled;
    for line in text.lines() {
        if let Some(meta) = line.strip_prefix('#') {
            if meta.contains("source=exact") {
                source = Source::Exact;
            } else if meta.contains("source=classical") {
                source = Source::Classical;
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = cols.iter().map(|c| c.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => {
                grid.push(v[0]);
                values.push(v[1]);
                sigma.push(v[2]);
            }
            Err(_) if grid.is_empty() => continue,
            Err(e) => return Err(Error::Parse(format!("{}: {e}", path.display()))),
        }
    }
    Ok(DistributionResult {
        grid,
        values,
        sigma,
        normalization,
        source,
    })
}
