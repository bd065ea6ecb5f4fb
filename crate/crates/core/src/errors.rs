//! Interpolation, bias and statistical error estimates for the gradient
//! functionals `Φ̂'` and `Ψ̂'_k`, and their sum, the gradient MSE.
//!
//! * Interpolation: `C_s ‖f⁽⁴⁾‖_∞ h_θ³`, with `f` the kernel-smoothed target at
//!   an intermediate level and the fourth derivative taken by finite
//!   differences on the probe grid.
//! * Bias: sup norm of the spline derivative of the smoothed level difference
//!   at the finest level, extrapolated geometrically with a fitted weak rate.
//! * Statistics: mean squared sup deviation of the spline derivative under
//!   with-replacement resampling of every level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{check_tau, ParametricEstimates};
use crate::exec::Execution;
use crate::kde::{fourth_derivative_sup_norm, scott_bandwidth, smoothed_moments, Columns};
use crate::model::LevelBatch;
use crate::rng::derive_stream;
use crate::spline::{fit, ThetaGrid};
use crate::stats::linear_fit;

/// Replica tags at or above this value are reserved for bootstrap resampling.
pub const BOOTSTRAP_TAG: u64 = 1 << 62;

/// Squared error components of one gradient target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetError {
    pub target: String,
    pub interp_sq: f64,
    pub bias_sq: f64,
    pub stat_sq: f64,
}

impl TargetError {
    pub fn total(&self) -> f64 {
        self.interp_sq + self.bias_sq + self.stat_sq
    }
}

/// Per-target error components and their combined gradient MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub targets: Vec<TargetError>,
    pub total_mse_sq: f64,
}

impl ErrorBreakdown {
    pub fn new(targets: Vec<TargetError>) -> Self {
        let total_mse_sq = total_gradient_mse(&targets);
        ErrorBreakdown { targets, total_mse_sq }
    }

    pub fn rmse(&self) -> f64 {
        self.total_mse_sq.sqrt()
    }

    pub fn interp_sq(&self) -> f64 {
        self.targets.iter().map(|t| t.interp_sq).sum()
    }

    pub fn bias_sq(&self) -> f64 {
        self.targets.iter().map(|t| t.bias_sq).sum()
    }

    pub fn stat_sq(&self) -> f64 {
        self.targets.iter().map(|t| t.stat_sq).sum()
    }
}

/// `Σ_t (interp² + bias² + stat²)`.
pub fn total_gradient_mse(targets: &[TargetError]) -> f64 {
    targets.iter().map(TargetError::total).sum()
}

pub fn target_name(t: usize) -> String {
    if t == 0 {
        "phi".into()
    } else {
        format!("psi_{t}")
    }
}

/// Which level supplies the samples for the interpolation-error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KdeLevel {
    /// `⌈L/2⌉`
    #[default]
    Ceil,
    /// `⌊L/2⌋`
    Floor,
}

impl KdeLevel {
    pub fn level(self, finest: usize) -> usize {
        match self {
            KdeLevel::Ceil => finest.div_ceil(2),
            KdeLevel::Floor => finest / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorSettings {
    /// Bootstrap replicas `B`.
    pub bootstrap: usize,
    /// Interpolation-error constant `C_s`.
    pub c_s: f64,
    /// Samples per level used for kernel smoothing (first indices).
    pub kde_max_samples: usize,
    pub kde_level: KdeLevel,
    /// Number of finest levels in the weak-rate regression.
    pub bias_fit_levels: usize,
    /// Lower clamp on a positive fitted weak rate in the bias extrapolation.
    pub min_alpha: f64,
}

impl Default for ErrorSettings {
    fn default() -> Self {
        ErrorSettings { bootstrap: 50, c_s: 0.2, kde_max_samples: 20_000, kde_level: KdeLevel::Ceil, bias_fit_levels: 4, min_alpha: 0.5 }
    }
}

impl ErrorSettings {
    pub fn validate(&self) -> Result<()> {
        if self.bootstrap < 2 {
            return Err(Error::param("bootstrap needs B >= 2 replicas"));
        }
        if !(self.c_s > 0.0) || self.kde_max_samples < 2 || self.bias_fit_levels < 2 || !(self.min_alpha > 0.0) {
            return Err(Error::param("error settings need c_s > 0, kde_max_samples >= 2, bias_fit_levels >= 2, min_alpha > 0"));
        }
        Ok(())
    }
}

/// Fine or coarse member of a batch as columns, truncated to `cap` samples.
fn columns(batch: &LevelBatch, coarse: bool, cap: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let take = batch.len().min(cap);
    let d = batch.samples.first().map_or(0, |s| s.grad_fine.len());
    let mut q = Vec::with_capacity(take);
    let mut g = vec![Vec::with_capacity(take); d];
    for s in &batch.samples[..take] {
        let (qi, gi) = s
            .member(coarse)
            .ok_or_else(|| Error::param(format!("level {} has no coarse member", batch.level)))?;
        q.push(qi);
        for k in 0..d {
            g[k].push(gi[k]);
        }
    }
    Ok((q, g))
}

/// Convert a moments row `[mean M, mean g_k M]` into per-target values, with
/// the `θ` term of `Φ` left out.
fn moments_to_targets(row: &[f64], tau: f64) -> impl Iterator<Item = f64> + '_ {
    row.iter().enumerate().map(move |(t, m)| if t == 0 { m / (1.0 - tau) } else { -m / (1.0 - tau) })
}

/// Interpolation error `ê_i` per target.
pub fn interp_error(
    batches: &[LevelBatch],
    grid: &ThetaGrid,
    tau: f64,
    settings: &ErrorSettings,
    exec: Execution,
) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let finest = batches.len().checked_sub(1).ok_or_else(|| Error::param("no batches"))?;
    let level = settings.kde_level.level(finest);
    let (q, g) = columns(&batches[level], false, settings.kde_max_samples)?;
    let probe = grid.probe();
    let rows = smoothed_moments(&probe.points(), Columns { q: &q, grads: &g }, scott_bandwidth(&q), exec)?;
    let targets = g.len() + 1;
    let h3 = grid.h().powi(3);
    (0..targets)
        .map(|t| {
            let values: Vec<f64> = rows.iter().map(|row| moments_to_targets(row, tau).nth(t).unwrap_or(0.0)).collect();
            Ok(settings.c_s * fourth_derivative_sup_norm(&values, probe.h())? * h3)
        })
        .collect()
}

/// Bias estimates and the level-wise quantities behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasEstimate {
    /// `ê_b` per target.
    pub per_target: Vec<f64>,
    /// Levels entering the regression.
    pub levels: Vec<usize>,
    /// `level_sup[j][t]` is `D_l` of target `t` at `levels[j]`.
    pub level_sup: Vec<Vec<f64>>,
    /// Fitted weak rate per target.
    pub alpha: Vec<Option<f64>>,
    /// Weak rate of the combined `(Σ_t D_{l,t}²)^{1/2}`.
    pub alpha_total: Option<f64>,
    /// Set when a target could not be extrapolated and fell back to `ê_b = D_L`.
    pub fallback: bool,
}

/// Weak rate from `D_l ≈ c s^{-α l}`; `None` with fewer than two usable levels.
pub fn weak_rate(levels: &[usize], sups: &[f64], s: f64) -> Option<f64> {
    if levels.len() < 2 || sups.iter().any(|&d| !(d > 0.0)) {
        return None;
    }
    let xs: Vec<f64> = levels.iter().map(|&l| l as f64).collect();
    let ys: Vec<f64> = sups.iter().map(|d| d.ln() / s.ln()).collect();
    linear_fit(&xs, &ys).map(|(_, slope)| -slope)
}

/// `ê_b = D_L/(s^α̂ - 1)`, or `D_L` itself when no positive rate is available.
/// Returns the estimate and whether the fallback was taken.
pub fn extrapolate_bias(d_last: f64, alpha: Option<f64>, s: f64, min_alpha: f64) -> (f64, bool) {
    match alpha {
        Some(a) if a > 0.0 => (d_last / (s.powf(a.max(min_alpha)) - 1.0), false),
        _ => (d_last, d_last > 0.0),
    }
}

/// Bias error `ê_b` per target.
pub fn bias_error(
    batches: &[LevelBatch],
    grid: &ThetaGrid,
    tau: f64,
    s: f64,
    settings: &ErrorSettings,
    exec: Execution,
) -> Result<BiasEstimate> {
    check_tau(tau)?;
    let finest = batches.len().checked_sub(1).ok_or_else(|| Error::param("no batches"))?;
    if finest == 0 {
        return Err(Error::BiasUndefined);
    }
    let first = finest.saturating_sub(settings.bias_fit_levels - 1).max(1);
    let levels: Vec<usize> = (first..=finest).collect();
    let thetas = grid.points();
    let probe = grid.probe();
    let cap = settings.kde_max_samples;
    let mut level_sup = Vec::with_capacity(levels.len());
    for &l in &levels {
        let (qf, gf) = columns(&batches[l], false, cap)?;
        let (qc, gc) = columns(&batches[l], true, cap)?;
        let f = smoothed_moments(&thetas, Columns { q: &qf, grads: &gf }, scott_bandwidth(&qf), exec)?;
        let c = smoothed_moments(&thetas, Columns { q: &qc, grads: &gc }, scott_bandwidth(&qc), exec)?;
        let targets = gf.len() + 1;
        let mut sups = Vec::with_capacity(targets);
        for t in 0..targets {
            let diff: Vec<f64> = f
                .iter()
                .zip(&c)
                .map(|(f, c)| {
                    let fv = moments_to_targets(f, tau).nth(t).unwrap_or(0.0);
                    let cv = moments_to_targets(c, tau).nth(t).unwrap_or(0.0);
                    fv - cv
                })
                .collect();
            sups.push(fit(grid, &diff)?.sup_norm(&probe, 1)?);
        }
        level_sup.push(sups);
    }
    let targets = level_sup[0].len();
    let mut per_target = Vec::with_capacity(targets);
    let mut alpha = Vec::with_capacity(targets);
    let mut fallback = false;
    for t in 0..targets {
        let sups: Vec<f64> = level_sup.iter().map(|row| row[t]).collect();
        let a = weak_rate(&levels, &sups, s);
        let (e, fb) = extrapolate_bias(*sups.last().unwrap_or(&0.0), a, s, settings.min_alpha);
        per_target.push(e);
        alpha.push(a);
        fallback |= fb;
    }
    let combined: Vec<f64> = level_sup.iter().map(|row| row.iter().map(|d| d * d).sum::<f64>().sqrt()).collect();
    let alpha_total = weak_rate(&levels, &combined, s);
    if fallback {
        log::warn!("bias extrapolation fell back to the finest level difference (levels {levels:?})");
    }
    Ok(BiasEstimate { per_target, levels, level_sup, alpha, alpha_total, fallback })
}

/// One member (fine or coarse) of a level, sorted by `Q` and centred on its
/// median so that suffix sums stay well conditioned.
struct SortedMember {
    order: Vec<usize>,
    q: Vec<f64>,
    grads: Vec<Vec<f64>>,
    centre: f64,
}

impl SortedMember {
    fn new(batch: &LevelBatch, coarse: bool) -> Result<Self> {
        let (q, g) = columns(batch, coarse, usize::MAX)?;
        let mut order: Vec<usize> = (0..q.len()).collect();
        order.sort_by(|&a, &b| q[a].total_cmp(&q[b]).then(a.cmp(&b)));
        let centre = q[order[order.len() / 2]];
        Ok(SortedMember {
            q: order.iter().map(|&i| q[i] - centre).collect(),
            grads: g.iter().map(|gk| order.iter().map(|&i| gk[i]).collect()).collect(),
            order,
            centre,
        })
    }

    /// Weighted `(1/N) Σ w_i (Q_i - θ_r)⁺ g_{t,i}` for every target and node,
    /// with `g_0 ≡ 1`; `out[t][r]`.
    fn partial_sums(&self, thetas: &[f64], weights: Option<&[u32]>) -> Vec<Vec<f64>> {
        let d = self.grads.len();
        let n_total = self.q.len() as f64;
        let mut out = vec![vec![0.0; thetas.len()]; d + 1];
        let (mut s_w, mut s_wq) = (0.0, 0.0);
        let mut s_wg = vec![0.0; d];
        let mut s_wqg = vec![0.0; d];
        let mut pos = self.q.len();
        for r in (0..thetas.len()).rev() {
            let theta = thetas[r] - self.centre;
            while pos > 0 && self.q[pos - 1] > theta {
                pos -= 1;
                let w = weights.map_or(1.0, |w| w[self.order[pos]] as f64);
                if w == 0.0 {
                    continue;
                }
                let q = self.q[pos];
                s_w += w;
                s_wq += w * q;
                for k in 0..d {
                    let g = self.grads[k][pos];
                    s_wg[k] += w * g;
                    s_wqg[k] += w * q * g;
                }
            }
            out[0][r] = (s_wq - theta * s_w) / n_total;
            for k in 0..d {
                out[k + 1][r] = (s_wqg[k] - theta * s_wg[k]) / n_total;
            }
        }
        out
    }
}

/// Level mean of `g(θ, Q_l) - g(θ, Q_{l-1})` per target without the `θ` term.
fn level_values(fine: &SortedMember, coarse: Option<&SortedMember>, thetas: &[f64], weights: Option<&[u32]>, tau: f64) -> Vec<Vec<f64>> {
    let mut v = fine.partial_sums(thetas, weights);
    if let Some(c) = coarse {
        let vc = c.partial_sums(thetas, weights);
        for (row, crow) in v.iter_mut().zip(vc) {
            for (a, b) in row.iter_mut().zip(crow) {
                *a -= b;
            }
        }
    }
    for (t, row) in v.iter_mut().enumerate() {
        let scale = if t == 0 { 1.0 } else { -1.0 } / (1.0 - tau);
        row.iter_mut().for_each(|x| *x *= scale);
    }
    v
}

/// Bootstrap statistical error and the per-level variance proxies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatEstimate {
    /// `ê_s²` per target.
    pub stat_sq: Vec<f64>,
    /// `V_l = N_l · mean_b Σ_t ‖S'_n(level-l deviation)‖²_∞`.
    pub level_variance: Vec<f64>,
}

/// Statistical error `ê_s²` per target from `replicas` bootstrap resamples.
pub fn stat_error_bootstrap(
    batches: &[LevelBatch],
    grid: &ThetaGrid,
    tau: f64,
    replicas: usize,
    master_seed: u64,
    replica_tag: u64,
    exec: Execution,
) -> Result<StatEstimate> {
    check_tau(tau)?;
    if replicas < 2 {
        return Err(Error::param("bootstrap needs B >= 2 replicas"));
    }
    if batches.is_empty() {
        return Err(Error::param("no batches"));
    }
    if let Some(b) = batches.iter().find(|b| b.len() < 2) {
        return Err(Error::InsufficientSamples(format!("bootstrap needs >= 2 samples at level {}", b.level)));
    }
    let thetas = grid.points();
    let probe = grid.probe();
    let members: Vec<(SortedMember, Option<SortedMember>)> = batches
        .iter()
        .map(|b| Ok((SortedMember::new(b, false)?, if b.level > 0 { Some(SortedMember::new(b, true)?) } else { None })))
        .collect::<Result<_>>()?;
    let base: Vec<Vec<Vec<f64>>> =
        members.iter().map(|(f, c)| level_values(f, c.as_ref(), &thetas, None, tau)).collect();
    let targets = base[0].len();
    let tag = BOOTSTRAP_TAG | replica_tag;

    let per_replica = exec.try_map(replicas, |b| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut total = vec![vec![0.0; grid.n]; targets];
        let mut level_sq = Vec::with_capacity(batches.len());
        for (l, (fine, coarse)) in members.iter().enumerate() {
            let n = batches[l].len();
            let mut stream = derive_stream(master_seed, l, b as u64, tag);
            let mut weights = vec![0u32; n];
            for _ in 0..n {
                weights[stream.index_below(n)] += 1;
            }
            let vals = level_values(fine, coarse.as_ref(), &thetas, Some(&weights), tau);
            let mut sq = 0.0;
            for t in 0..targets {
                let dev: Vec<f64> = vals[t].iter().zip(&base[l][t]).map(|(a, b)| a - b).collect();
                sq += fit(grid, &dev)?.sup_norm(&probe, 1)?.powi(2);
                for (acc, x) in total[t].iter_mut().zip(&dev) {
                    *acc += x;
                }
            }
            level_sq.push(sq);
        }
        let sup_sq = total.iter().map(|dev| Ok(fit(grid, dev)?.sup_norm(&probe, 1)?.powi(2))).collect::<Result<_>>()?;
        Ok((sup_sq, level_sq))
    })?;

    let bf = replicas as f64;
    let stat_sq = (0..targets).map(|t| per_replica.iter().map(|r| r.0[t]).sum::<f64>() / bf).collect();
    let level_variance = (0..batches.len())
        .map(|l| batches[l].len() as f64 * per_replica.iter().map(|r| r.1[l]).sum::<f64>() / bf)
        .collect();
    Ok(StatEstimate { stat_sq, level_variance })
}

/// All three components for a set of estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub breakdown: ErrorBreakdown,
    /// `ê_i` per target.
    pub interp: Vec<f64>,
    pub bias: BiasEstimate,
    pub stat: StatEstimate,
}

pub fn estimate_errors(
    est: &ParametricEstimates,
    refinement: f64,
    settings: &ErrorSettings,
    master_seed: u64,
    replica_tag: u64,
    exec: Execution,
) -> Result<ErrorEstimate> {
    settings.validate()?;
    if est.levels() == 0 {
        return Err(Error::BiasUndefined);
    }
    let interp = interp_error(&est.batches, &est.grid, est.tau, settings, exec)?;
    let bias = bias_error(&est.batches, &est.grid, est.tau, refinement, settings, exec)?;
    let stat = stat_error_bootstrap(&est.batches, &est.grid, est.tau, settings.bootstrap, master_seed, replica_tag, exec)?;
    let targets = (0..est.n_targets())
        .map(|t| TargetError {
            target: target_name(t),
            interp_sq: interp[t] * interp[t],
            bias_sq: bias.per_target[t] * bias.per_target[t],
            stat_sq: stat.stat_sq[t],
        })
        .collect();
    Ok(ErrorEstimate { breakdown: ErrorBreakdown::new(targets), interp, bias, stat })
}
