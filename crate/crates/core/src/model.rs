//! The sampling contract shared by every stochastic model, plus small
//! closed-form models used as benchmarks and test oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{derive_stream, SeedStream, Variate};

/// Design vector `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Design(Vec<f64>);

impl Design {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(Error::param("design must have at least one component"));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::param(format!("design has non-finite entries: {z:?}")));
        }
        Ok(Design(z))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Design {
    type Error = Error;
    fn try_from(z: Vec<f64>) -> Result<Self> {
        Design::new(z)
    }
}

impl From<Design> for Vec<f64> {
    fn from(d: Design) -> Self {
        d.0
    }
}

impl std::ops::Index<usize> for Design {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One coupled draw at a level: fine and (for `level > 0`) coarse QoI and
/// design sensitivities, all driven by the same randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatedSample {
    pub q_fine: f64,
    pub q_coarse: Option<f64>,
    pub grad_fine: Vec<f64>,
    pub grad_coarse: Option<Vec<f64>>,
    pub cost: f64,
}

impl CorrelatedSample {
    /// Checks the structural invariants against the level and design dimension.
    pub fn validate(&self, level: usize, dim: usize) -> std::result::Result<(), String> {
        if self.q_coarse.is_some() != (level > 0) || self.grad_coarse.is_some() != (level > 0) {
            return Err(format!("coarse terms must be present iff level > 0 (level {level})"));
        }
        if self.grad_fine.len() != dim || self.grad_coarse.as_ref().is_some_and(|g| g.len() != dim) {
            return Err(format!("sensitivity length differs from design dimension {dim}"));
        }
        let finite = self.q_fine.is_finite()
            && self.q_coarse.is_none_or(f64::is_finite)
            && self.grad_fine.iter().all(|x| x.is_finite())
            && self.grad_coarse.as_ref().is_none_or(|g| g.iter().all(|x| x.is_finite()));
        if !finite {
            return Err("non-finite sample entry".into());
        }
        if !(self.cost > 0.0) {
            return Err("sample cost must be positive".into());
        }
        Ok(())
    }

    /// `(Q, Q_z)` of the fine or coarse member of the pair.
    pub fn member(&self, coarse: bool) -> Option<(f64, &[f64])> {
        if coarse {
            Some((self.q_coarse?, self.grad_coarse.as_deref()?))
        } else {
            Some((self.q_fine, &self.grad_fine))
        }
    }
}

/// The `N_l` coupled samples drawn at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBatch {
    pub level: usize,
    pub samples: Vec<CorrelatedSample>,
    pub total_cost: f64,
}

impl LevelBatch {
    pub fn new(level: usize, samples: Vec<CorrelatedSample>) -> Self {
        let total_cost = samples.iter().map(|s| s.cost).sum();
        LevelBatch { level, samples, total_cost }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn extend(&mut self, more: Vec<CorrelatedSample>) {
        self.total_cost += more.iter().map(|s| s.cost).sum::<f64>();
        self.samples.extend(more);
    }

    /// Average cost of one coupled sample.
    pub fn mean_cost(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.total_cost / self.samples.len() as f64
        }
    }
}

/// A stochastic model sampled on a hierarchy of discretisation levels.
///
/// `sample_pair` must be a pure function of `(z, level, stream)`.
pub trait Model: Send + Sync {
    fn name(&self) -> &'static str;

    /// Design dimension `d`.
    fn dim(&self) -> usize;

    fn max_level(&self) -> usize;

    /// Mesh refinement factor between consecutive levels.
    fn refinement_factor(&self) -> f64 {
        2.0
    }

    /// Work units of a single solve at `level`.
    fn solve_cost(&self, level: usize) -> f64;

    /// Draw the coupled pair at `level` from `stream`.
    fn sample_pair(&self, z: &Design, level: usize, stream: &mut SeedStream) -> Result<CorrelatedSample>;

    /// Cost of one coupled sample at `level` (fine plus coarse solve).
    fn pair_cost(&self, level: usize) -> f64 {
        self.solve_cost(level) + if level > 0 { self.solve_cost(level - 1) } else { 0.0 }
    }
}

pub(crate) fn check_request(model: &dyn Model, z: &Design, level: usize) -> Result<()> {
    if level > model.max_level() {
        return Err(Error::param(format!(
            "level {level} exceeds max level {} of model `{}`",
            model.max_level(),
            model.name()
        )));
    }
    if z.dim() != model.dim() {
        return Err(Error::param(format!(
            "design dimension {} does not match model `{}` (d = {})",
            z.dim(),
            model.name(),
            model.dim()
        )));
    }
    Ok(())
}

pub(crate) fn sample_error(stream: &SeedStream, reason: impl Into<String>) -> Error {
    Error::Sample {
        level: stream.level(),
        sample_index: stream.sample_index(),
        master_seed: stream.master_seed(),
        replica_tag: stream.replica_tag(),
        reason: reason.into(),
    }
}

/// Draw samples `start..start + count` at `level`.
#[allow(clippy::too_many_arguments)]
pub fn sample_level(
    model: &dyn Model,
    z: &Design,
    level: usize,
    start: u64,
    count: usize,
    master_seed: u64,
    replica_tag: u64,
    exec: Execution,
) -> Result<Vec<CorrelatedSample>> {
    check_request(model, z, level)?;
    exec.try_map(count, |i| {
        let mut stream = derive_stream(master_seed, level, start + i as u64, replica_tag);
        let s = model.sample_pair(z, level, &mut stream)?;
        s.validate(level, model.dim()).map_err(|r| sample_error(&stream, r))?;
        Ok(s)
    })
}

/// One row of [`coupling_report`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingRow {
    pub level: usize,
    pub mean_diff: f64,
    pub var_diff: f64,
    pub mean_abs_diff: f64,
    pub cost: f64,
}

/// Per-level statistics of `Q_l - Q_{l-1}` for levels `1..=levels`.
pub fn coupling_report(
    model: &dyn Model,
    z: &Design,
    levels: usize,
    samples_per_level: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<CouplingRow>> {
    if levels < 2 || samples_per_level < 2 {
        return Err(Error::param("coupling report needs levels >= 2 and samples_per_level >= 2"));
    }
    (1..=levels)
        .map(|level| {
            let batch = sample_level(model, z, level, 0, samples_per_level, seed, 0, exec)?;
            let diffs: Vec<f64> = batch.iter().map(|s| s.q_fine - s.q_coarse.unwrap_or(0.0)).collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let mean_abs = diffs.iter().map(|d| d.abs()).sum::<f64>() / n;
            Ok(CouplingRow {
                level,
                mean_diff: mean,
                var_diff: var,
                mean_abs_diff: mean_abs,
                cost: model.pair_cost(level),
            })
        })
        .collect()
}

/// `Q(z, ω) = z + σ_b ξ` with `ξ ~ N(0, 1)`, identical at every level.
///
/// Closed forms: `q_τ = z + σ_b Φ⁻¹(τ)`, `c_τ = z + σ_b φ(Φ⁻¹(τ)) / (1 - τ)`,
/// and the penalised optimum is `z* = z_ref - 1 / (2κ)`. The nominal cost of
/// a level is `2^l`, as if it were a discretisation that happens to be exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub sigma: f64,
    pub max_level: usize,
}

impl Default for LinearGaussian {
    fn default() -> Self {
        LinearGaussian { sigma: 0.1, max_level: 10 }
    }
}

impl LinearGaussian {
    pub fn var(&self, z: f64, tau: f64) -> f64 {
        z + self.sigma * crate::stats::normal_quantile(tau)
    }

    pub fn cvar(&self, z: f64, tau: f64) -> f64 {
        z + self.sigma * crate::stats::normal_pdf(crate::stats::normal_quantile(tau)) / (1.0 - tau)
    }

    pub fn optimum(z_ref: f64, kappa: f64) -> f64 {
        z_ref - 1.0 / (2.0 * kappa)
    }
}

impl Model for LinearGaussian {
    fn name(&self) -> &'static str {
        "linear_gaussian"
    }
    fn dim(&self) -> usize {
        1
    }
    fn max_level(&self) -> usize {
        self.max_level
    }
    fn solve_cost(&self, level: usize) -> f64 {
        (1u64 << level) as f64
    }
    fn sample_pair(&self, z: &Design, level: usize, stream: &mut SeedStream) -> Result<CorrelatedSample> {
        check_request(self, z, level)?;
        let xi = stream.draw(Variate::StandardNormal, 1)?[0];
        let q = z[0] + self.sigma * xi;
        Ok(CorrelatedSample {
            q_fine: q,
            q_coarse: (level > 0).then_some(q),
            grad_fine: vec![1.0],
            grad_coarse: (level > 0).then(|| vec![1.0]),
            cost: self.pair_cost(level),
        })
    }
}

/// Degenerate model `Q ≡ c + Σ g_k z_k` with constant sensitivities `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel {
    pub value: f64,
    pub slope: Vec<f64>,
    pub max_level: usize,
}

impl ConstantModel {
    pub fn new(value: f64, dim: usize) -> Self {
        ConstantModel { value, slope: vec![0.0; dim], max_level: 10 }
    }
}

impl Model for ConstantModel {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn dim(&self) -> usize {
        self.slope.len()
    }
    fn max_level(&self) -> usize {
        self.max_level
    }
    fn solve_cost(&self, level: usize) -> f64 {
        (1u64 << level) as f64
    }
    fn sample_pair(&self, z: &Design, level: usize, _stream: &mut SeedStream) -> Result<CorrelatedSample> {
        check_request(self, z, level)?;
        let q = self.value + self.slope.iter().zip(z.as_slice()).map(|(g, x)| g * x).sum::<f64>();
        Ok(CorrelatedSample {
            q_fine: q,
            q_coarse: (level > 0).then_some(q),
            grad_fine: self.slope.clone(),
            grad_coarse: (level > 0).then(|| self.slope.clone()),
            cost: self.pair_cost(level),
        })
    }
}

/// `Q = z + U` with `U ~ U[lo, hi]`, identical at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedUniform {
    pub lo: f64,
    pub hi: f64,
}

impl Model for ShiftedUniform {
    fn name(&self) -> &'static str {
        "shifted_uniform"
    }
    fn dim(&self) -> usize {
        1
    }
    fn max_level(&self) -> usize {
        10
    }
    fn solve_cost(&self, level: usize) -> f64 {
        (1u64 << level) as f64
    }
    fn sample_pair(&self, z: &Design, level: usize, stream: &mut SeedStream) -> Result<CorrelatedSample> {
        check_request(self, z, level)?;
        let u = stream.draw(Variate::Uniform { lo: self.lo, hi: self.hi }, 1)?[0];
        let q = z[0] + u;
        Ok(CorrelatedSample {
            q_fine: q,
            q_coarse: (level > 0).then_some(q),
            grad_fine: vec![1.0],
            grad_coarse: (level > 0).then(|| vec![1.0]),
            cost: self.pair_cost(level),
        })
    }
}
