//! Continuation MLMC: adapt the θ-grid size, the number of levels and the
//! per-level sample counts over a decreasing tolerance sequence until the
//! estimated gradient MSE meets the target.
//!
//! Each round splits `ε_k²` into interpolation, bias and statistical budgets.
//! The grid follows the `h_θ³` law of the interpolation estimate, levels are
//! added while the extrapolated bias exceeds its budget, and sample counts
//! come from the usual MLMC allocation driven by the bootstrap level
//! variances. Samples are only ever appended, so a round reuses every sample
//! drawn before it.

use serde::{Deserialize, Serialize};

use crate::amgd::select_theta_interval;
use crate::error::{Error, Result};
use crate::errors::{estimate_errors, ErrorBreakdown, ErrorEstimate, ErrorSettings};
use crate::estimator::{check_tau, extend_hierarchy, functionals_from_batches, sample_hierarchy, Hierarchy, ParametricEstimates};
use crate::exec::Execution;
use crate::model::{Design, LevelBatch, Model};
use crate::spline::{argmin_on_interval, ThetaGrid};
use crate::stats::linear_fit;

/// Fitted `α̂` (weak), `β̂` (variance) and `γ̂` (cost) rates, in units of
/// `log_s` per level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimates {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub gamma_hat: f64,
}

/// Shares of `ε²` given to the three error components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceSplit {
    pub interp: f64,
    pub bias: f64,
    pub stat: f64,
}

impl Default for ToleranceSplit {
    fn default() -> Self {
        ToleranceSplit { interp: 0.1, bias: 0.3, stat: 0.6 }
    }
}

impl ToleranceSplit {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.interp, self.bias, self.stat];
        if parts.iter().any(|&p| !(p > 0.0)) || parts.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::param(format!("tolerance split must be positive and sum to at most 1, got {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmlmcSettings {
    /// Screening sample counts per level.
    pub screen: Vec<usize>,
    /// Initial θ-grid size; `n - 1` should be a power-of-two multiple of 8.
    pub n_init: usize,
    pub n_max: usize,
    pub split: ToleranceSplit,
    pub safety: f64,
    pub max_rounds: usize,
    /// Ratio between consecutive tolerances of the schedule.
    pub schedule_ratio: f64,
    /// Lower bound on the sample count of any level.
    pub min_level_samples: usize,
    /// Upper bound on the sample count of any level.
    pub max_level_samples: usize,
    /// Samples pooled (finest levels first) to place Θ.
    pub theta_pool: usize,
    /// Times Θ may be widened when `argmin Φ̂` lands on an endpoint.
    pub max_regrow: usize,
    pub errors: ErrorSettings,
}

impl Default for CmlmcSettings {
    fn default() -> Self {
        CmlmcSettings {
            screen: vec![64, 32, 16],
            n_init: 17,
            n_max: 1025,
            split: ToleranceSplit::default(),
            safety: 1.1,
            max_rounds: 12,
            schedule_ratio: 2.0,
            min_level_samples: 8,
            max_level_samples: 5_000_000,
            theta_pool: 64,
            max_regrow: 3,
            errors: ErrorSettings::default(),
        }
    }
}

impl CmlmcSettings {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.errors.validate()?;
        if self.screen.len() < 2 || self.screen.iter().any(|&n| n < 8) {
            return Err(Error::param("screening hierarchy needs L >= 1 and N_l >= 8"));
        }
        if self.n_init < 9 || self.n_max < self.n_init {
            return Err(Error::param(format!("need 9 <= n_init <= n_max, got {} and {}", self.n_init, self.n_max)));
        }
        if !(self.safety >= 1.0) || !(self.schedule_ratio > 1.0) || self.max_rounds == 0 {
            return Err(Error::param("need safety >= 1, schedule_ratio > 1 and max_rounds >= 1"));
        }
        if self.min_level_samples < 2 || self.max_level_samples < self.min_level_samples || self.theta_pool < 8 {
            return Err(Error::param("need 2 <= min_level_samples <= max_level_samples and theta_pool >= 8"));
        }
        Ok(())
    }
}

/// `N_l = ⌈safety ε_s⁻² √(V_l/C_l) Σ_k √(V_k C_k)⌉`, floored at 2.
pub fn allocate_samples(variances: &[f64], costs: &[f64], eps_s: f64, safety: f64) -> Result<Vec<usize>> {
    if variances.len() != costs.len() || variances.is_empty() {
        return Err(Error::param("allocation needs matching, non-empty V_l and C_l"));
    }
    if variances.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || costs.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::param("allocation needs V_l >= 0 and C_l > 0"));
    }
    if !(eps_s > 0.0) || !(safety > 0.0) {
        return Err(Error::param("allocation needs ε_s > 0 and safety > 0"));
    }
    let total: f64 = variances.iter().zip(costs).map(|(v, c)| (v * c).sqrt()).sum();
    Ok(variances
        .iter()
        .zip(costs)
        .map(|(v, c)| {
            let n = (safety / (eps_s * eps_s) * (v / c).sqrt() * total).ceil();
            if n >= usize::MAX as f64 {
                usize::MAX
            } else {
                (n as usize).max(2)
            }
        })
        .collect())
}

/// Smallest grid with `n_new - 1 = (n - 1) 2^k` whose predicted interpolation
/// error `ê_i ((n-1)/(n_new-1))³` is within `ε_i`. The flag reports that
/// `n_max` stopped the search short.
pub fn select_grid_size(n: usize, e_interp: f64, eps_interp: f64, n_max: usize) -> (usize, bool) {
    let mut intervals = n - 1;
    let mut predicted = e_interp;
    while predicted > eps_interp {
        if 2 * intervals + 1 > n_max {
            return (intervals + 1, true);
        }
        intervals *= 2;
        predicted /= 8.0;
    }
    (intervals + 1, false)
}

/// `ε_k = ε r^{K-k}` for `k = 0..=K`, with `K` the smallest integer putting
/// `ε_0` at or above `start`.
pub fn tolerance_schedule(target: f64, start: f64, ratio: f64, max_len: usize) -> Vec<f64> {
    let steps = if start > target { ((start / target).ln() / ratio.ln()).ceil() as usize } else { 0 };
    let steps = steps.min(max_len.saturating_sub(1));
    (0..=steps).map(|k| target * ratio.powi((steps - k) as i32)).collect()
}

/// Widen `grid` by its own width on the side where the minimiser sits.
pub fn regrow_interval(grid: &ThetaGrid, theta: f64) -> ThetaGrid {
    let w = grid.width();
    let mid = 0.5 * (grid.lo + grid.hi);
    let (lo, hi) = if theta < mid { (grid.lo - w, grid.hi) } else { (grid.lo, grid.hi + w) };
    ThetaGrid { lo, hi, n: grid.n }
}

/// Pool fine samples of `Q` from the finest level downward until `want` are collected.
pub fn pooled_finest_samples(batches: &[LevelBatch], want: usize) -> Vec<f64> {
    let mut pool = Vec::new();
    for b in batches.iter().rev() {
        pool.extend(b.samples.iter().map(|s| s.q_fine));
        if pool.len() >= want {
            break;
        }
    }
    pool
}

/// One adaptation round as written to the hierarchy log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Tolerance the round planned for; `None` for the initial hierarchy.
    pub tolerance: Option<f64>,
    pub hierarchy: Hierarchy,
    pub theta_interval: [f64; 2],
    pub rmse: f64,
    pub interp_sq: f64,
    pub bias_sq: f64,
    pub stat_sq: f64,
    pub cost: f64,
    pub breakdown: ErrorBreakdown,
}

#[derive(Debug, Clone)]
pub struct ScreeningOutcome {
    pub estimates: ParametricEstimates,
    pub errors: ErrorEstimate,
    pub rates: RateEstimates,
    pub hierarchy: Hierarchy,
}

impl ScreeningOutcome {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart { hierarchy: self.hierarchy.clone(), rates: self.rates }
    }
}

/// Hierarchy and rates carried over from a previous design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub hierarchy: Hierarchy,
    pub rates: RateEstimates,
}

#[derive(Debug, Clone)]
pub struct CmlmcOutcome {
    pub estimates: ParametricEstimates,
    pub errors: ErrorEstimate,
    pub hierarchy: Hierarchy,
    pub rates: RateEstimates,
    pub rounds: Vec<RoundRecord>,
    pub converged: bool,
    pub regrows: usize,
}

impl CmlmcOutcome {
    pub fn total_cost(&self) -> f64 {
        self.estimates.total_cost
    }

    pub fn rmse(&self) -> f64 {
        self.errors.breakdown.rmse()
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart { hierarchy: self.hierarchy.clone(), rates: self.rates }
    }
}

/// Where the controller should place Θ and which seeds it draws from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmlmcCall {
    pub master_seed: u64,
    pub replica_tag: u64,
    /// Previous minimiser that Θ must keep in its interior.
    pub previous_theta: Option<f64>,
}

/// The hierarchy adaptation for one model and risk level.
pub struct Controller<'a> {
    pub model: &'a dyn Model,
    pub tau: f64,
    pub settings: CmlmcSettings,
    pub exec: Execution,
}

struct Evaluation {
    estimates: ParametricEstimates,
    errors: ErrorEstimate,
    regrows: usize,
}

impl<'a> Controller<'a> {
    pub fn new(model: &'a dyn Model, tau: f64, settings: CmlmcSettings, exec: Execution) -> Result<Self> {
        check_tau(tau)?;
        settings.validate()?;
        if model.max_level() == 0 {
            return Err(Error::param("adaptive MLMC needs a model with max_level >= 1"));
        }
        Ok(Controller { model, tau, settings, exec })
    }

    fn refinement(&self) -> f64 {
        self.model.refinement_factor()
    }

    /// Fixed-hierarchy estimate with errors and rates from `settings.screen`.
    pub fn screening(&self, z: &Design, call: CmlmcCall) -> Result<ScreeningOutcome> {
        let counts = self.settings.screen.clone();
        if counts.len() - 1 > self.model.max_level() {
            return Err(Error::param("screening hierarchy is deeper than the model allows"));
        }
        let batches = sample_hierarchy(self.model, z, &counts, call.master_seed, call.replica_tag, self.exec)?;
        let grid = self.initial_grid(&batches, self.settings.n_init, call.previous_theta)?;
        let eval = self.evaluate(z, batches, grid, call)?;
        let rates = self.fit_rates(&eval.errors, None);
        let hierarchy = Hierarchy { samples: counts, n: eval.estimates.grid.n, refinement: self.refinement() };
        Ok(ScreeningOutcome { estimates: eval.estimates, errors: eval.errors, rates, hierarchy })
    }

    /// Adapt until the estimated gradient MSE is at most `target_tol²`;
    /// running out of rounds is an error carrying the last breakdown.
    pub fn run_cmlmc(&self, z: &Design, target_tol: f64, warm: Option<&WarmStart>, call: CmlmcCall) -> Result<CmlmcOutcome> {
        let out = self.run_cmlmc_lenient(z, target_tol, warm, call)?;
        if out.converged {
            Ok(out)
        } else {
            Err(Error::NotConverged {
                rounds: out.rounds.len() - 1,
                mse: out.errors.breakdown.total_mse_sq,
                last: Box::new(out.errors.breakdown),
            })
        }
    }

    /// Like [`Controller::run_cmlmc`] but returns the last state with
    /// `converged = false` instead of failing.
    pub fn run_cmlmc_lenient(
        &self,
        z: &Design,
        target_tol: f64,
        warm: Option<&WarmStart>,
        call: CmlmcCall,
    ) -> Result<CmlmcOutcome> {
        if !(target_tol > 0.0) || !target_tol.is_finite() {
            return Err(Error::param(format!("target tolerance must be positive, got {target_tol}")));
        }
        let (mut counts, n0) = match warm {
            Some(w) => {
                w.hierarchy.validate()?;
                (w.hierarchy.samples.clone(), w.hierarchy.n.max(self.settings.n_init))
            }
            None => (self.settings.screen.clone(), self.settings.n_init),
        };
        counts.truncate(self.model.max_level() + 1);
        if counts.len() < 2 {
            counts.push(self.settings.min_level_samples);
        }
        for c in counts.iter_mut() {
            *c = (*c).max(self.settings.min_level_samples);
        }
        let batches = sample_hierarchy(self.model, z, &counts, call.master_seed, call.replica_tag, self.exec)?;
        let grid = self.initial_grid(&batches, n0, call.previous_theta)?;
        let mut eval = self.evaluate(z, batches, grid, call)?;
        let mut regrows = eval.regrows;
        let mut rates = self.fit_rates(&eval.errors, warm.map(|w| &w.rates));
        let mut rounds = vec![self.record(0, None, &eval)];
        let target_sq = target_tol * target_tol;
        let schedule = tolerance_schedule(target_tol, eval.errors.breakdown.rmse(), self.settings.schedule_ratio, self.settings.max_rounds);
        let mut converged = eval.errors.breakdown.total_mse_sq <= target_sq;
        let mut round = 0;
        while !converged && round < self.settings.max_rounds {
            let eps = schedule[round.min(schedule.len() - 1)];
            let at_final = round + 1 >= schedule.len();
            round += 1;
            let current = eval.estimates.counts();
            let (mut next, n_next) = self.plan(&current, eval.estimates.grid.n, &eval.errors, &rates, eps);
            if at_final && next == current && n_next == eval.estimates.grid.n {
                next = current.iter().map(|c| c.saturating_mul(2).min(self.settings.max_level_samples).max(*c)).collect();
            }
            log::debug!("round {round}: ε = {eps:.3e}, N = {next:?}, n = {n_next}");
            let mut batches = std::mem::take(&mut eval.estimates.batches);
            extend_hierarchy(self.model, z, &mut batches, &next, call.master_seed, call.replica_tag, self.exec)?;
            let grid = ThetaGrid { n: n_next, ..eval.estimates.grid };
            eval = self.evaluate(z, batches, grid, call)?;
            regrows += eval.regrows;
            rates = self.fit_rates(&eval.errors, Some(&rates));
            rounds.push(self.record(round, Some(eps), &eval));
            converged = eval.errors.breakdown.total_mse_sq <= target_sq;
        }
        let hierarchy = Hierarchy { samples: eval.estimates.counts(), n: eval.estimates.grid.n, refinement: self.refinement() };
        Ok(CmlmcOutcome { estimates: eval.estimates, errors: eval.errors, hierarchy, rates, rounds, converged, regrows })
    }

    /// Next sample counts and grid size for tolerance `eps`.
    pub fn plan(&self, counts: &[usize], n: usize, errors: &ErrorEstimate, rates: &RateEstimates, eps: f64) -> (Vec<usize>, usize) {
        let split = &self.settings.split;
        let b = &errors.breakdown;
        let s = self.refinement();
        let (n_next, capped) = select_grid_size(n, b.interp_sq().sqrt(), eps * split.interp.sqrt(), self.settings.n_max);
        if capped {
            log::warn!("θ-grid size capped at {n_next}");
        }

        let eps_b = eps * split.bias.sqrt();
        let mut finest = counts.len() - 1;
        let mut bias = b.bias_sq().sqrt();
        let decay = s.powf(-rates.alpha_hat.max(self.settings.errors.min_alpha));
        while bias > eps_b && finest < self.model.max_level() {
            finest += 1;
            bias *= decay;
        }

        let measured = &errors.stat.level_variance;
        let last = measured.len() - 1;
        let beta = rates.beta_hat.clamp(0.5, 4.0);
        let variances: Vec<f64> =
            (0..=finest).map(|l| if l <= last { measured[l] } else { measured[last] * s.powf(-beta * (l - last) as f64) }).collect();
        let costs: Vec<f64> = (0..=finest).map(|l| self.model.pair_cost(l)).collect();
        let alloc = allocate_samples(&variances, &costs, eps * split.stat.sqrt(), self.settings.safety)
            .unwrap_or_else(|_| vec![2; finest + 1]);
        let next = alloc
            .iter()
            .enumerate()
            .map(|(l, &a)| {
                let want = a.min(self.settings.max_level_samples).max(self.settings.min_level_samples);
                want.max(counts.get(l).copied().unwrap_or(0))
            })
            .collect();
        (next, n_next)
    }

    fn initial_grid(&self, batches: &[LevelBatch], n: usize, previous: Option<f64>) -> Result<ThetaGrid> {
        let pool = pooled_finest_samples(batches, self.settings.theta_pool);
        let (lo, hi) = select_theta_interval(&pool, self.tau, previous)?;
        ThetaGrid::new(lo, hi, n)
    }

    /// Functionals on `grid` (widened while the minimiser hits an endpoint) and their errors.
    fn evaluate(&self, z: &Design, batches: Vec<LevelBatch>, mut grid: ThetaGrid, call: CmlmcCall) -> Result<Evaluation> {
        let mut est = functionals_from_batches(batches, &grid, z, self.tau, self.exec)?;
        let mut regrows = 0;
        loop {
            let (theta, _) = argmin_on_interval(&est.phi, grid.lo, grid.hi)?;
            let interior = theta > grid.lo && theta < grid.hi;
            if interior || regrows >= self.settings.max_regrow {
                break;
            }
            grid = regrow_interval(&grid, theta);
            regrows += 1;
            log::debug!("θ̂ = {theta} on the boundary, Θ widened to [{}, {}]", grid.lo, grid.hi);
            est = functionals_from_batches(std::mem::take(&mut est.batches), &grid, z, self.tau, self.exec)?;
        }
        let errors = estimate_errors(&est, self.refinement(), &self.settings.errors, call.master_seed, call.replica_tag, self.exec)?;
        Ok(Evaluation { estimates: est, errors, regrows })
    }

    /// Rates from the current errors; unavailable fits keep `previous` or a
    /// first-order default.
    fn fit_rates(&self, errors: &ErrorEstimate, previous: Option<&RateEstimates>) -> RateEstimates {
        let s = self.refinement();
        let fallback = previous.copied().unwrap_or(RateEstimates { alpha_hat: 1.0, beta_hat: 2.0, gamma_hat: 1.0 });
        let alpha_hat = errors.bias.alpha_total.filter(|a| a.is_finite() && *a > 0.0).unwrap_or(fallback.alpha_hat);

        let v = &errors.stat.level_variance;
        let (xs, ys): (Vec<f64>, Vec<f64>) =
            (1..v.len()).filter(|&l| v[l] > 0.0).map(|l| (l as f64, v[l].ln() / s.ln())).unzip();
        let beta_hat = if xs.len() >= 2 { linear_fit(&xs, &ys).map(|(_, b)| -b) } else { None }
            .filter(|b| b.is_finite())
            .unwrap_or(fallback.beta_hat);

        let top = (v.len() - 1).max(1);
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..=top).map(|l| (l as f64, self.model.solve_cost(l).ln() / s.ln())).unzip();
        let gamma_hat = linear_fit(&xs, &ys).map(|(_, g)| g).filter(|g| g.is_finite() && *g > 0.0).unwrap_or(fallback.gamma_hat);
        RateEstimates { alpha_hat, beta_hat, gamma_hat }
    }

    fn record(&self, round: usize, tolerance: Option<f64>, eval: &Evaluation) -> RoundRecord {
        let b = &eval.errors.breakdown;
        let g = eval.estimates.grid;
        RoundRecord {
            round,
            tolerance,
            hierarchy: Hierarchy { samples: eval.estimates.counts(), n: g.n, refinement: self.refinement() },
            theta_interval: [g.lo, g.hi],
            rmse: b.rmse(),
            interp_sq: b.interp_sq(),
            bias_sq: b.bias_sq(),
            stat_sq: b.stat_sq(),
            cost: eval.estimates.total_cost,
            breakdown: b.clone(),
        }
    }
}
