//! Multi-walker orchestration: bias optimization, production under the
//! frozen bias, checkpoints and analysis of finished runs.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::config::{Mode, RunConfig};
use crate::dynamics::{thermalize_momenta, Integrator};
use crate::error::{Error, Result};
use crate::estimators::{
    bootstrap, momentum_transform, read_distribution_csv, symmetric_grid, write_distribution_csv, CsvHeader,
    DistributionResult, Normalization, Source,
};
use crate::oracle1d::{exact_ntilde_np, solve_thermal, Grid1D};
use crate::path::{bc_geometry, PathBias, PathState, SystemSpec};
use crate::potentials::TriatomicBathModel;
use crate::rdm::{
    discretize_kernel, extrapolate_to_zero_t, format_spectrum_csv, format_translation_csv, order_params_with,
    reconstruct_ntilde, symmetric_eigensolve, EndpointBias, ExtrapolationFit, RdmGrid, SpectralDecomposition,
};
use crate::ves::{
    eval_bias, omega_gradient, omega_hessian, recover_free_energy_with, update_coefficients, write_ves_log, BasisSet,
    BiasState, MomentAccumulator, VesIterationRecord,
};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OPATHCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "ves_log.csv";
pub const BIAS_FILE: &str = "bias.json";
pub const PRODUCTION_FILE: &str = "production.bin";

/// Sampled system: masks, model and starting geometry.
#[derive(Clone, Debug)]
pub struct System {
    pub spec: SystemSpec,
    pub model: TriatomicBathModel,
    pub reference: Vec<f64>,
}

/// One-dimensional runs freeze B and C at their reference sites and move A
/// along the axis only; many-body runs move A, B, C in 3D and the bath
/// coordinates along their single component.
pub fn build_system(config: &RunConfig) -> Result<System> {
    let many = config.is_many_body();
    let model = if many {
        config.model.clone()
    } else {
        TriatomicBathModel {
            bath: Vec::new(),
            ..config.model.clone()
        }
    };
    model.validate()?;
    let mut spec = SystemSpec::new(model.masses(), [0, 1, 2], config.beads, config.beta)?;
    if many {
        for j in 3..spec.atoms() {
            spec.mobile[j] = [true, false, false];
            spec.cartesian[j] = false;
        }
    } else {
        spec.mobile[0] = [true, false, false];
        spec.mobile[1] = [false; 3];
        spec.mobile[2] = [false; 3];
    }
    let reference = model.reference_positions(0.0);
    Ok(System { spec, model, reference })
}

pub fn model_hash(system: &System) -> String {
    let text = serde_json::to_string(&(&system.model, &system.spec.mobile, &system.spec.cartesian)).unwrap_or_default();
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Walker {
    pub state: PathState,
    pub rng: ChaCha8Rng,
}

/// Bias on x, or on the endpoint pair `(r, r')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActiveBias {
    Displacement(BiasState),
    Endpoint(EndpointBias),
}

impl ActiveBias {
    pub fn state(&self) -> &BiasState {
        match self {
            ActiveBias::Displacement(b) => b,
            ActiveBias::Endpoint(e) => &e.bias,
        }
    }

    fn state_mut(&mut self) -> &mut BiasState {
        match self {
            ActiveBias::Displacement(b) => b,
            ActiveBias::Endpoint(e) => &mut e.bias,
        }
    }

    fn path_bias(&self) -> &dyn PathBias {
        match self {
            ActiveBias::Displacement(b) => b,
            ActiveBias::Endpoint(e) => e,
        }
    }

    fn cv(&self, spec: &SystemSpec, state: &PathState) -> Result<[f64; 2]> {
        match self {
            ActiveBias::Displacement(_) => Ok([state.x, 0.0]),
            ActiveBias::Endpoint(_) => {
                let geom = bc_geometry(spec, state)?;
                let (r, rp) = order_params_with(spec, state, &geom);
                Ok([r, rp])
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            ActiveBias::Displacement(_) => 1,
            ActiveBias::Endpoint(_) => 2,
        }
    }
}

/// Reweighted and raw histograms of one production block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBlock {
    pub weighted: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Production histograms: `bins` cells per axis on `[lo, hi]`, one or two
/// axes. Weights are `exp(β (V_b(s) - shift))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductionData {
    pub dims: usize,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub shift: f64,
    pub blocks: Vec<HistogramBlock>,
}

impl ProductionData {
    pub fn centers(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / self.bins as f64;
        (0..self.bins).map(|j| self.lo + (j as f64 + 0.5) * h).collect()
    }

    fn bin(&self, s: f64) -> Option<usize> {
        let u = (s - self.lo) / (self.hi - self.lo) * self.bins as f64;
        if u >= 0.0 && u < self.bins as f64 {
            Some(u as usize)
        } else {
            None
        }
    }

    fn cell(&self, s: &[f64; 2]) -> Option<usize> {
        let i = self.bin(s[0])?;
        if self.dims == 1 {
            return Some(i);
        }
        Some(i * self.bins + self.bin(s[1])?)
    }

    fn cells(&self) -> usize {
        self.bins.pow(self.dims as u32)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        bincode::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Clone, Copy)]
enum Collect {
    Nothing,
    Moments,
    Histogram,
}

struct Tally {
    moments: MomentAccumulator,
    hist: HistogramBlock,
}

#[derive(Serialize, Deserialize)]
struct CheckpointPayload {
    config_toml: String,
    bias_json: String,
    walkers: Vec<Walker>,
    records: Vec<VesIterationRecord>,
    equilibrated: bool,
    production: ProductionData,
    production_chunks: usize,
}

/// Run metadata written before sampling starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub code_version: String,
    pub model_hash: String,
    pub beta: f64,
    pub beads: usize,
    pub dt: f64,
    pub mu: f64,
    pub md_steps: usize,
    pub walkers: usize,
    pub seed: u64,
    pub config_toml: String,
}

impl Manifest {
    pub fn new(config: &RunConfig, hash: String) -> Result<Self> {
        Ok(Self {
            mode: config.mode,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            model_hash: hash,
            beta: config.beta,
            beads: config.beads,
            dt: config.dt,
            mu: config.mu,
            md_steps: config.md_steps,
            walkers: config.walkers,
            seed: config.seed,
            config_toml: config.to_toml()?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_toml)
    }

    pub fn csv_header(&self) -> CsvHeader {
        CsvHeader {
            beta: self.beta,
            beads: self.beads,
            model_hash: self.model_hash.clone(),
            run_id: format!("{}-seed{}", self.mode.as_str(), self.seed),
        }
    }
}

pub struct Simulation {
    pub config: RunConfig,
    pub system: System,
    pub walkers: Vec<Walker>,
    pub bias: ActiveBias,
    pub records: Vec<VesIterationRecord>,
    pub equilibrated: bool,
    pub production: ProductionData,
    pub production_chunks: usize,
}

impl Simulation {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        if !config.mode.samples() {
            return Err(Error::Config(format!("mode {} does not sample", config.mode.as_str())));
        }
        let system = build_system(config)?;
        let walkers = (0..config.walkers)
            .map(|w| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(w as u64);
                let mut state = PathState::from_reference(&system.spec, &system.reference, 0.0)?;
                thermalize_momenta(&system.spec, &mut state, &mut rng);
                Ok(Walker { state, rng })
            })
            .collect::<Result<Vec<_>>>()?;
        let (bias, production) = if config.mode == Mode::RunRdm {
            let grid = config.ves.rdm_grid()?;
            let b = grid.half_width;
            let basis = BasisSet::product_chebyshev(config.ves.max_order, -b, b);
            let bias = ActiveBias::Endpoint(EndpointBias {
                bias: BiasState::new(basis, config.mu, config.beta)?,
                walls: config.ves.walls(),
            });
            (bias, empty_production(2, grid.bins, -b, b))
        } else {
            let w = config.ves.x_wall;
            let basis = BasisSet::even_chebyshev(config.ves.basis_size, -w, w);
            let bias = ActiveBias::Displacement(BiasState::new(basis, config.mu, config.beta)?);
            (bias, empty_production(1, config.analysis.x_bins, -w, w))
        };
        Ok(Self {
            config: config.clone(),
            system,
            walkers,
            bias,
            records: Vec::new(),
            equilibrated: false,
            production,
            production_chunks: 0,
        })
    }

    fn advance(&mut self, steps: usize, collect: Collect) -> Result<Vec<Tally>> {
        let spec = &self.system.spec;
        let model = &self.system.model;
        let bias = &self.bias;
        let integ_cfg = self.config.integrator();
        let stride = self.config.sample_stride;
        let beta = self.config.beta;
        let prod = &self.production;
        let nbasis = bias.state().basis.len();
        let cells = prod.cells();
        self.walkers
            .par_iter_mut()
            .map(|w| -> Result<Tally> {
                let mut integ = Integrator::new(spec, integ_cfg.clone(), &w.state)?;
                let pb = bias.path_bias();
                let mut tally = Tally {
                    moments: MomentAccumulator::new(if matches!(collect, Collect::Moments) { nbasis } else { 0 }),
                    hist: HistogramBlock {
                        weighted: vec![0.0; if matches!(collect, Collect::Histogram) { cells } else { 0 }],
                        counts: vec![0; if matches!(collect, Collect::Histogram) { cells } else { 0 }],
                    },
                };
                let mut scratch = Vec::new();
                for step in 1..=steps {
                    integ.md_step(spec, &mut w.state, model, Some(pb), &mut w.rng).map_err(|e| {
                        Error::TrajectoryDiverged {
                            step: integ.steps_taken(),
                            detail: e.to_string(),
                        }
                    })?;
                    if step % stride != 0 {
                        continue;
                    }
                    match collect {
                        Collect::Nothing => {}
                        Collect::Moments => {
                            let s = bias.cv(spec, &w.state)?;
                            tally.moments.add_sample(&bias.state().basis, &s[..bias.dim()], &mut scratch);
                        }
                        Collect::Histogram => {
                            let s = bias.cv(spec, &w.state)?;
                            if let Some(c) = prod.cell(&s) {
                                let v = eval_bias(bias.state(), &s[..bias.dim()]).0;
                                tally.hist.weighted[c] += (beta * (v - prod.shift)).exp();
                                tally.hist.counts[c] += 1;
                            }
                        }
                    }
                }
                w.state.check_finite().map_err(|e| Error::TrajectoryDiverged {
                    step: integ.steps_taken(),
                    detail: e.to_string(),
                })?;
                Ok(tally)
            })
            .collect()
    }

    pub fn equilibrate(&mut self) -> Result<()> {
        if !self.equilibrated && self.config.equilibration_steps > 0 {
            self.advance(self.config.equilibration_steps, Collect::Nothing)?;
        }
        self.equilibrated = true;
        Ok(())
    }

    /// Sample every walker for one interval, merge in walker order and take
    /// one optimizer step.
    pub fn variational_step(&mut self) -> Result<()> {
        let tallies = self.advance(self.config.md_steps, Collect::Moments)?;
        let mut acc = MomentAccumulator::new(self.bias.state().basis.len());
        for t in &tallies {
            acc.merge(&t.moments);
        }
        let bias = self.bias.state_mut();
        let g = omega_gradient(&acc, &bias.target_expectations)?;
        let (h, _) = omega_hessian(&acc, bias.beta)?;
        update_coefficients(bias, &g, &h)?;
        self.records.push(VesIterationRecord {
            iteration: bias.iteration,
            alpha: bias.alpha.clone(),
            alpha_avg: bias.alpha_avg.clone(),
            gradient_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            samples: acc.count,
        });
        Ok(())
    }

    fn start_production(&mut self) {
        let bias = self.bias.state();
        let c = self.production.centers();
        let mut shift = f64::NEG_INFINITY;
        if self.production.dims == 1 {
            for s in &c {
                shift = shift.max(eval_bias(bias, &[*s]).0);
            }
        } else {
            for r in &c {
                for rp in &c {
                    shift = shift.max(eval_bias(bias, &[*r, *rp]).0);
                }
            }
        }
        self.production.shift = shift;
    }

    /// One production chunk per walker under the frozen averaged bias.
    pub fn production_chunk(&mut self) -> Result<()> {
        if self.production_chunks == 0 {
            self.start_production();
        }
        let steps = self.config.production_steps / self.config.analysis.blocks_per_walker;
        let tallies = self.advance(steps.max(1), Collect::Histogram)?;
        self.production.blocks.extend(tallies.into_iter().map(|t| t.hist));
        self.production_chunks += 1;
        Ok(())
    }

    fn production_target(&self) -> usize {
        if self.config.production_steps > 0 {
            self.config.analysis.blocks_per_walker
        } else {
            0
        }
    }

    pub fn is_complete(&self) -> bool {
        self.equilibrated
            && self.records.len() >= self.config.variational_steps
            && self.production_chunks >= self.production_target()
    }

    /// Advance by one unit of work (equilibration, one variational step or
    /// one production chunk). Returns false when already complete.
    pub fn step(&mut self) -> Result<bool> {
        if !self.equilibrated {
            self.equilibrate()?;
        } else if self.records.len() < self.config.variational_steps {
            self.variational_step()?;
            if self.records.len() % 10 == 0 {
                let r = self.records.last().map(|r| r.gradient_norm).unwrap_or(0.0);
                log::info!("variational step {} |g| = {r:.3e}", self.records.len());
            }
        } else if self.production_chunks < self.production_target() {
            self.production_chunk()?;
            log::info!("production chunk {}", self.production_chunks);
        } else {
            return Ok(false);
        }
        Ok(true)
    }

    /// Run to completion, checkpointing into `dir` if given. A failing
    /// interval restores the last good walkers and checkpoints them.
    pub fn run(&mut self, dir: Option<&Path>) -> Result<()> {
        loop {
            let backup = self.walkers.clone();
            let before = self.records.len();
            match self.step() {
                Ok(false) => break,
                Ok(true) => {}
                Err(e) => {
                    self.walkers = backup;
                    if let Some(d) = dir {
                        self.save_checkpoint(&d.join(CHECKPOINT_FILE))?;
                    }
                    return Err(e);
                }
            }
            let every = self.config.checkpoint_every;
            let at_boundary = self.records.len() != before && every > 0 && self.records.len() % every == 0;
            if let Some(d) = dir {
                if at_boundary || self.records.len() == before {
                    self.save_checkpoint(&d.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(d) = dir {
            self.write_outputs(d)?;
        }
        Ok(())
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_ves_log(&dir.join(LOG_FILE), &self.records)?;
        std::fs::write(dir.join(BIAS_FILE), self.bias.state().to_json()?)?;
        std::fs::write(dir.join(PRODUCTION_FILE), self.production.encode()?)?;
        self.save_checkpoint(&dir.join(CHECKPOINT_FILE))
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let payload = CheckpointPayload {
            config_toml: self.config.to_toml()?,
            bias_json: serde_json::to_string(&self.bias).map_err(|e| Error::Checkpoint(e.to_string()))?,
            walkers: self.walkers.clone(),
            records: self.records.clone(),
            equilibrated: self.equilibrated,
            production: self.production.clone(),
            production_chunks: self.production_chunks,
        };
        let body = bincode::serialize(&payload).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.checkpoint_bytes()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Resume from a checkpoint. Step counts in `config` may extend the run;
    /// everything else is taken from the checkpoint.
    pub fn from_checkpoint_bytes(bytes: &[u8], config: Option<&RunConfig>) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap_or([0; 4]));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let payload: CheckpointPayload =
            bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut stored = RunConfig::from_toml(&payload.config_toml)?;
        if let Some(c) = config {
            stored.variational_steps = c.variational_steps;
            stored.production_steps = c.production_steps;
            stored.checkpoint_every = c.checkpoint_every;
            stored.out = c.out.clone();
        }
        let system = build_system(&stored)?;
        let bias: ActiveBias = serde_json::from_str(&payload.bias_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            config: stored,
            system,
            walkers: payload.walkers,
            bias,
            records: payload.records,
            equilibrated: payload.equilibrated,
            production: payload.production,
            production_chunks: payload.production_chunks,
        })
    }

    pub fn load_checkpoint(path: &Path, config: Option<&RunConfig>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?, config)
    }
}

fn empty_production(dims: usize, bins: usize, lo: f64, hi: f64) -> ProductionData {
    ProductionData {
        dims,
        bins,
        lo,
        hi,
        shift: 0.0,
        blocks: Vec::new(),
    }
}

/// Create or resume a sampling run in `config.out`, write the manifest
/// first, run to completion and write the logs.
pub fn run_variational(config: &RunConfig, restart: Option<&Path>) -> Result<Simulation> {
    let mut sim = match restart {
        Some(ckpt) => Simulation::load_checkpoint(ckpt, Some(config))?,
        None => Simulation::new(config)?,
    };
    let dir = sim.config.out.clone();
    if restart.is_none() || !dir.join(MANIFEST_FILE).exists() {
        Manifest::new(&sim.config, model_hash(&sim.system))?.write(&dir)?;
    }
    sim.run(Some(&dir))?;
    Ok(sim)
}

/// Chi-square test of equal-width histogram counts against a flat target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformityResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

pub fn uniformity_check(counts: &[u64]) -> Result<UniformityResult> {
    let total: u64 = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return Err(Error::InsufficientData {
            what: "histogram samples",
            need: 1,
            got: total as usize,
        });
    }
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    let dof = counts.len() - 1;
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::Config(e.to_string()))?;
    Ok(UniformityResult {
        statistic,
        dof,
        p_value: chi.sf(statistic),
    })
}

/// Merge adjacent equal-width bins into at most `groups` groups; a partial
/// trailing group is dropped.
pub fn rebin(counts: &[u64], groups: usize) -> Vec<u64> {
    let g = counts.len().div_ceil(groups.max(1)).max(1);
    counts.chunks_exact(g).map(|c| c.iter().sum()).collect()
}

/// Spectrum of the sampled endpoint kernel with bootstrap errors.
///
/// `values` are held-out estimates: eigenvectors from one half of the
/// walkers, Rayleigh quotients on the other half, averaged both ways.
/// Plain eigenvalues of a noisy histogram carry a positive noise floor;
/// the held-out quotients do not.
#[derive(Clone, Debug)]
pub struct SpectrumEstimate {
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `1 - λ₁ - λ₂` from the held-out values, with its error.
    pub beyond_two: (f64, f64),
    pub decomposition: SpectralDecomposition,
    pub asymmetry: f64,
    pub reconstruction: DistributionResult,
    /// Eigenvalue indices (0-based) below `-3σ`.
    pub negative: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct AnalysisOutput {
    pub tail_start: Option<usize>,
    pub ntilde: Option<DistributionResult>,
    pub momentum: Option<DistributionResult>,
    pub free_energy: Option<DistributionResult>,
    pub free_energy_bias: Option<DistributionResult>,
    pub spectrum: Option<SpectrumEstimate>,
    pub uniformity: Option<UniformityResult>,
}

fn sum_blocks(blocks: &[&HistogramBlock]) -> Vec<f64> {
    let mut total = vec![0.0; blocks.first().map(|b| b.weighted.len()).unwrap_or(0)];
    for b in blocks {
        for (t, v) in total.iter_mut().zip(&b.weighted) {
            *t += v;
        }
    }
    total
}

/// Origin value of an even histogram from a least-squares fit of
/// `c0 + c2 x² + c4 x⁴` over the central `2k + 1` bins.
fn origin_value(values: &[f64], k: usize) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let k = k.min(mid);
    if k < 2 {
        return values[mid];
    }
    let mut a = nalgebra::Matrix3::<f64>::zeros();
    let mut b = nalgebra::Vector3::<f64>::zeros();
    for j in (mid - k)..=(mid + k) {
        let t = (j as f64 - mid as f64) / k as f64;
        let row = nalgebra::Vector3::new(1.0, t * t, t.powi(4));
        a += row * row.transpose();
        b += row * values[j];
    }
    a.lu().solve(&b).map(|c| c[0]).unwrap_or(values[mid])
}

/// ñ at the x-bin centers, one at the origin.
pub fn ntilde_from_blocks(blocks: &[&HistogramBlock], symmetrize: bool) -> Result<Vec<f64>> {
    let mut v = sum_blocks(blocks);
    let n = v.len();
    if symmetrize {
        let orig = v.clone();
        for i in 0..n {
            v[i] = 0.5 * (orig[i] + orig[n - 1 - i]);
        }
    }
    let c = origin_value(&v, n / 20);
    if !(c > 0.0) {
        return Err(Error::InsufficientData {
            what: "samples near x = 0",
            need: 1,
            got: 0,
        });
    }
    Ok(v.iter().map(|t| t / c).collect())
}

/// Trace-normalized spectrum of the summed endpoint histogram.
pub fn spectrum_from_blocks(grid: &RdmGrid, blocks: &[&HistogramBlock]) -> Result<(SpectralDecomposition, f64)> {
    let total = sum_blocks(blocks);
    let m = discretize_kernel(grid, &total)?;
    Ok((symmetric_eigensolve(&m)?, m.asymmetry))
}

/// Held-out eigenvalues of the kernel: ψ_n of each half scored against the
/// other half's matrix, averaged.
pub fn held_out_spectrum(
    grid: &RdmGrid,
    a: &[&HistogramBlock],
    b: &[&HistogramBlock],
    count: usize,
) -> Result<Vec<f64>> {
    let ma = discretize_kernel(grid, &sum_blocks(a))?;
    let mb = discretize_kernel(grid, &sum_blocks(b))?;
    let sa = symmetric_eigensolve(&ma)?;
    let sb = symmetric_eigensolve(&mb)?;
    let delta = grid.spacing();
    let score = |m: &DMatrix<f64>, psi: &[f64]| {
        let v = DVector::from_column_slice(psi);
        delta * v.dot(&(m * &v))
    };
    Ok((0..count.min(grid.bins))
        .map(|n| 0.5 * (score(&mb.matrix, &sa.vectors[n]) + score(&ma.matrix, &sb.vectors[n])))
        .collect())
}

/// Analysis of in-memory run data.
pub fn analyze_data(
    config: &RunConfig,
    records: &[VesIterationRecord],
    bias: &BiasState,
    production: &ProductionData,
) -> Result<AnalysisOutput> {
    let mut out = AnalysisOutput::default();
    if config.variational_steps > 0 {
        let start = config.analysis.stationarity.tail_start(records)?;
        out.tail_start = Some(start);
        if bias.basis.dim() == 1 {
            let tail = &records[start..];
            let n = bias.alpha.len();
            let mean: Vec<f64> = (0..n)
                .map(|k| tail.iter().map(|r| r.alpha[k]).sum::<f64>() / tail.len() as f64)
                .collect();
            let grid = production.centers();
            let ln_pt = bias.target_density().ln();
            let (g, f) = recover_free_energy_with(bias, &mean, &grid, |_| ln_pt);
            out.free_energy_bias = Some(DistributionResult::new(g, f, Normalization::MinimumZero, Source::Sampled));
        }
    }
    if production.blocks.len() < 8 {
        return Err(Error::InsufficientData {
            what: "production blocks",
            need: 8,
            got: production.blocks.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let resamples = config.analysis.bootstrap;
    let counts: Vec<u64> = (0..production.cells())
        .map(|c| production.blocks.iter().map(|b| b.counts[c]).sum())
        .collect();
    if production.dims == 1 {
        out.uniformity = uniformity_check(&rebin(&counts, 25)).ok();
        let xs = production.centers();
        let p_grid = symmetric_grid(config.analysis.p_max, config.analysis.p_points);
        let nx = xs.len();
        let symmetrize = config.analysis.symmetrize;
        let boot = bootstrap(&production.blocks, resamples, &mut rng, |b| {
            let nt = ntilde_from_blocks(b, symmetrize)?;
            let d = DistributionResult::new(xs.clone(), nt.clone(), Normalization::UnitAtOrigin, Source::Sampled);
            let np = momentum_transform(&d, &p_grid);
            Ok(nt.into_iter().chain(np.values).collect())
        })?;
        let mut nt = DistributionResult::new(xs.clone(), boot.estimate[..nx].to_vec(), Normalization::UnitAtOrigin, Source::Sampled);
        nt.sigma = boot.sigma[..nx].to_vec();
        let mut np = DistributionResult::new(p_grid.clone(), boot.estimate[nx..].to_vec(), Normalization::UnitIntegral, Source::Sampled);
        np.sigma = boot.sigma[nx..].to_vec();
        let beta = config.beta;
        let (fg, (fv, fs)): (Vec<f64>, (Vec<f64>, Vec<f64>)) = xs
            .iter()
            .zip(nt.values.iter().zip(&nt.sigma))
            .filter(|(_, (v, _))| **v > 0.0)
            .map(|(x, (v, s))| (*x, (-v.ln() / beta, s / (beta * v))))
            .unzip();
        let fmin = fv.iter().copied().fold(f64::INFINITY, f64::min);
        let mut fe = DistributionResult::new(fg, fv.iter().map(|f| f - fmin).collect(), Normalization::MinimumZero, Source::Sampled);
        fe.sigma = fs;
        out.ntilde = Some(nt);
        out.momentum = Some(np);
        out.free_energy = Some(fe);
    } else {
        out.uniformity = uniformity_check(&rebin(&counts, 25 * 25)).ok();
        let grid = RdmGrid::new(0.5 * (production.hi - production.lo), production.bins)?;
        let k = config.analysis.eigenvalues.max(2);
        // pairs of distinct walkers from the same chunk; resampling pairs
        // keeps the two halves disjoint
        let pairs: Vec<[&HistogramBlock; 2]> = production.blocks.chunks_exact(2).map(|p| [&p[0], &p[1]]).collect();
        let boot = bootstrap(&pairs, resamples, &mut rng, |units| {
            let a: Vec<&HistogramBlock> = units.iter().map(|u| u[0]).collect();
            let b: Vec<&HistogramBlock> = units.iter().map(|u| u[1]).collect();
            let mut v = held_out_spectrum(&grid, &a, &b, k)?;
            v.push(1.0 - v[0] - v[1]);
            Ok(v)
        })?;
        let mut values = boot.estimate;
        let mut sigma = boot.sigma;
        let beyond_two = (values.pop().unwrap_or(0.0), sigma.pop().unwrap_or(0.0));
        let all: Vec<&HistogramBlock> = production.blocks.iter().collect();
        let (decomposition, asymmetry) = spectrum_from_blocks(&grid, &all)?;
        let lattice: Vec<f64> = (-(grid.bins as i64 - 1)..=(grid.bins as i64 - 1)).map(|j| j as f64 * grid.spacing()).collect();
        let reconstruction = reconstruct_ntilde(&decomposition, &lattice);
        let negative = values
            .iter()
            .zip(&sigma)
            .enumerate()
            .filter(|(_, (v, s))| **v < -3.0 * **s)
            .map(|(i, _)| i)
            .collect();
        out.spectrum = Some(SpectrumEstimate {
            values,
            sigma,
            beyond_two,
            decomposition,
            asymmetry,
            reconstruction,
            negative,
        });
    }
    Ok(out)
}

/// Analyze a finished run directory and write the result CSVs to `out`.
pub fn analyze(dir: &Path, out: &Path) -> Result<AnalysisOutput> {
    let manifest = Manifest::read(dir)?;
    std::fs::create_dir_all(out)?;
    if manifest.mode == Mode::Oracle {
        for name in ["ntilde.csv", "momentum.csv", "spectrum.csv"] {
            let src = dir.join(name);
            let dst = out.join(name);
            if src != dst {
                std::fs::copy(&src, &dst)?;
            }
        }
        return Ok(AnalysisOutput {
            ntilde: Some(read_distribution_csv(&dir.join("ntilde.csv"), Normalization::UnitAtOrigin)?),
            momentum: Some(read_distribution_csv(&dir.join("momentum.csv"), Normalization::UnitIntegral)?),
            ..Default::default()
        });
    }
    let config = manifest.config()?;
    let log_path = dir.join(LOG_FILE);
    let prod_path = dir.join(PRODUCTION_FILE);
    for p in [&log_path, &prod_path, &dir.join(BIAS_FILE)] {
        if !p.exists() {
            return Err(Error::Config(format!("run directory is missing {}", p.display())));
        }
    }
    let records = crate::ves::parse_ves_log(&std::fs::read_to_string(&log_path)?)?;
    let bias = BiasState::from_json(&std::fs::read_to_string(dir.join(BIAS_FILE))?)?;
    let production = ProductionData::decode(&std::fs::read(&prod_path)?)?;
    let result = analyze_data(&config, &records, &bias, &production)?;
    let header = manifest.csv_header();
    if let Some(d) = &result.ntilde {
        write_distribution_csv(&out.join("ntilde.csv"), &header, ["x", "ntilde", "sigma"], d)?;
    }
    if let Some(d) = &result.momentum {
        write_distribution_csv(&out.join("momentum.csv"), &header, ["p", "n", "sigma"], d)?;
    }
    if let Some(d) = &result.free_energy {
        write_distribution_csv(&out.join("free_energy.csv"), &header, ["x", "F", "sigma"], d)?;
    }
    if let Some(d) = &result.free_energy_bias {
        write_distribution_csv(&out.join("free_energy_bias.csv"), &header, ["x", "F", "sigma"], d)?;
    }
    if let Some(s) = &result.spectrum {
        std::fs::write(out.join("spectrum.csv"), format_spectrum_csv(&s.values, &s.sigma))?;
        std::fs::write(
            out.join("translation.csv"),
            format_translation_csv(&s.decomposition, &s.reconstruction.grid, config.analysis.eigenvalues),
        )?;
        write_distribution_csv(&out.join("ntilde.csv"), &header, ["x", "ntilde", "sigma"], &s.reconstruction)?;
        if !s.negative.is_empty() {
            log::warn!("eigenvalues {:?} are negative beyond 3 sigma", s.negative);
        }
        log::info!("kernel asymmetry before symmetrization: {:.3e}", s.asymmetry);
    }
    if let Some(u) = &result.uniformity {
        if u.p_value < 1e-3 {
            log::warn!("sampled coordinate is not uniform: chi2 = {:.1} on {} dof, p = {:.2e}", u.statistic, u.dof, u.p_value);
        }
    }
    Ok(result)
}

/// Exact distributions of the one-dimensional model at the configured β.
pub fn run_oracle(config: &RunConfig) -> Result<()> {
    let dir = &config.out;
    let system = build_system(config)?;
    let manifest = Manifest {
        mode: Mode::Oracle,
        ..Manifest::new(config, model_hash(&system))?
    };
    manifest.write(dir)?;
    let axial = config.model.axial.clone();
    let mass = config.model.mass_a;
    let kernel = solve_thermal(Grid1D::default(), |q| axial.value(q, mass), mass, config.beta)?;
    let p_grid = symmetric_grid(config.analysis.p_max, config.analysis.p_points);
    let exact = exact_ntilde_np(&kernel, &p_grid);
    let header = manifest.csv_header();
    write_distribution_csv(&dir.join("ntilde.csv"), &header, ["x", "ntilde", "sigma"], &exact.ntilde)?;
    write_distribution_csv(&dir.join("momentum.csv"), &header, ["p", "n", "sigma"], &exact.momentum)?;
    let zeros = vec![0.0; kernel.weights.len()];
    std::fs::write(dir.join("spectrum.csv"), format_spectrum_csv(&kernel.weights, &zeros))?;
    Ok(())
}

fn read_spectrum_value(path: &Path, index: usize) -> Result<f64> {
    let text = std::fs::read_to_string(path)?;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() >= 2 && cols[0].trim() == index.to_string() {
            return cols[1].trim().parse().map_err(|e| Error::Parse(format!("{}: {e}", path.display())));
        }
    }
    Err(Error::Parse(format!("{} has no eigenvalue {index}", path.display())))
}

/// Fit the configured `(β, λ)` pairs, or the eigenvalues of analyzed runs,
/// and write `extrapolation.txt`.
pub fn run_extrapolate(config: &RunConfig) -> Result<ExtrapolationFit> {
    let s = &config.extrapolate;
    let mut pairs: Vec<(f64, f64)> = s.pairs.iter().map(|p| (p[0], p[1])).collect();
    for dir in &s.runs {
        let manifest = Manifest::read(dir)?;
        pairs.push((manifest.beta, read_spectrum_value(&dir.join("spectrum.csv"), s.index.max(1))?));
    }
    let fit = extrapolate_to_zero_t(&pairs)?;
    std::fs::create_dir_all(&config.out)?;
    std::fs::write(config.out.join("extrapolation.txt"), fit.report())?;
    Ok(fit)
}

/// Directory holding a run's outputs.
pub fn run_directory(config: &RunConfig) -> PathBuf {
    config.out.clone()
}
