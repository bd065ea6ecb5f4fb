//! Alternating minimisation–gradient descent for penalised CVaR.
//!
//! Each iteration minimises the spline surrogate `Φ̂(·; z_j)` exactly over Θ,
//! which makes `Ĵ_θ = 0`, then steps the design along
//! `J̃_z = Ψ̂'(θ_j; z_j) + 2κ(z_j - z_ref)`. The surrogates come from a
//! [`GradientOracle`]: the MLMC oracle re-runs the hierarchy adaptation with
//! tolerance `η ‖Ĵ_w(w_{j-1})‖`, and tests plug in closed forms.

use serde::{Deserialize, Serialize};

use crate::cmlmc::{pooled_finest_samples, CmlmcCall, Controller, WarmStart};
use crate::error::{Error, Result};
use crate::estimator::{check_tau, functionals_from_batches, Hierarchy, ParametricEstimates};
use crate::exec::Execution;
use crate::model::Design;
use crate::spline::{argmin_on_interval, ThetaGrid};
use crate::stats::quantile_sorted;

/// Θ from the empirical `τ ± 0.1` quantiles of `pool`, widened by half its
/// width and stretched so `previous` sits at least 10% of the width inside.
pub fn select_theta_interval(pool: &[f64], tau: f64, previous: Option<f64>) -> Result<(f64, f64)> {
    check_tau(tau)?;
    if pool.len() < 8 {
        return Err(Error::InsufficientSamples(format!("Θ selection needs at least 8 samples, got {}", pool.len())));
    }
    if pool.iter().any(|q| !q.is_finite()) {
        return Err(Error::param("Θ selection got non-finite samples"));
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q_lo = quantile_sorted(&sorted, tau - 0.1);
    let q_hi = quantile_sorted(&sorted, tau + 0.1);
    let (mut lo, mut hi) = if q_hi > q_lo {
        let pad = 0.25 * (q_hi - q_lo);
        (q_lo - pad, q_hi + pad)
    } else {
        let c = quantile_sorted(&sorted, tau);
        let half = 0.1 * c.abs().max(1.0);
        (c - half, c + half)
    };
    if let Some(theta) = previous.filter(|t| t.is_finite()) {
        // Solve lo = θ - m (hi - lo) for a margin m = 0.15 of the new width.
        let m = 0.15;
        if theta < lo + 0.1 * (hi - lo) {
            lo = (theta - m * hi) / (1.0 - m);
        }
        if theta > hi - 0.1 * (hi - lo) {
            hi = (theta - m * lo) / (1.0 - m);
        }
    }
    Ok((lo, hi))
}

/// Functionals the optimiser needs at one design.
pub trait Surrogate {
    /// Current Θ.
    fn interval(&self) -> (f64, f64);
    /// `(argmin Φ̂, min Φ̂)` over Θ.
    fn minimise(&self) -> Result<(f64, f64)>;
    fn phi_prime(&self, theta: f64) -> Result<f64>;
    fn psi_prime(&self, theta: f64) -> Result<Vec<f64>>;
    /// Replace Θ by `[lo, hi]` and refit from the same data.
    fn regrow(&mut self, lo: f64, hi: f64) -> Result<()>;
}

/// Surrogates for one design plus bookkeeping for the history.
pub struct OracleResponse<S> {
    pub surrogate: S,
    pub cost: f64,
    pub hierarchy: Option<Hierarchy>,
    pub rmse: Option<f64>,
    /// Whether the accuracy contract was met.
    pub converged: bool,
}

/// Source of surrogates. `tolerance` is `None` for the initial (fixed)
/// evaluation and `η ‖Ĵ_w(w_{j-1})‖` afterwards.
pub trait GradientOracle {
    type Surrogate: Surrogate;

    fn evaluate(&mut self, j: usize, z: &Design, tolerance: Option<f64>, previous_theta: Option<f64>)
        -> Result<OracleResponse<Self::Surrogate>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub tau: f64,
    pub kappa: f64,
    pub z_ref: Vec<f64>,
    pub z0: Vec<f64>,
    pub alpha: f64,
    pub eta: f64,
    pub eps: f64,
    pub max_iters: usize,
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.z0.is_empty() || self.z0.len() != self.z_ref.len() {
            return Err(Error::param("z0 and z_ref must be non-empty with equal dimensions"));
        }
        if self.z0.iter().chain(&self.z_ref).any(|x| !x.is_finite()) {
            return Err(Error::param("z0 and z_ref must be finite"));
        }
        if !(self.kappa >= 0.0) || !(self.alpha > 0.0) || !(self.eta > 0.0) {
            return Err(Error::param("need κ >= 0, α > 0 and η > 0"));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::param(format!("residual tolerance must lie in (0, 1), got {}", self.eps)));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters must be positive"));
        }
        Ok(())
    }
}

/// One AMGD iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub j: usize,
    pub z: Vec<f64>,
    pub theta: f64,
    pub interval: [f64; 2],
    /// `Ĵ(θ_j, z_j) = Φ̂(θ_j) + κ ‖z_j - z_ref‖²`.
    pub objective: f64,
    /// `ĉ_τ = Φ̂(θ_j)`.
    pub cvar: f64,
    /// `q̂_τ = θ_j`.
    pub var: f64,
    /// `Ĵ_θ(θ_j) = Φ̂'(θ_j)`.
    pub grad_theta: f64,
    pub grad_z: Vec<f64>,
    pub grad_norm: f64,
    pub residual: f64,
    pub iteration_cost: f64,
    pub cumulative_cost: f64,
    pub hierarchy: Option<Hierarchy>,
    pub rmse: Option<f64>,
    pub regrown: bool,
    pub oracle_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptOutcome {
    pub history: Vec<OptState>,
    pub converged: bool,
}

impl OptOutcome {
    pub fn last(&self) -> &OptState {
        self.history.last().expect("history holds at least the initial iterate")
    }
}

/// `J̃_z = Ψ̂' + 2κ(z - z_ref)`.
pub fn design_gradient(psi_prime: &[f64], kappa: f64, z: &[f64], z_ref: &[f64]) -> Vec<f64> {
    psi_prime.iter().zip(z).zip(z_ref).map(|((g, z), r)| g + 2.0 * kappa * (z - r)).collect()
}

/// `z - α J̃_z`.
pub fn gradient_step(z: &[f64], grad: &[f64], alpha: f64) -> Vec<f64> {
    z.iter().zip(grad).map(|(z, g)| z - alpha * g).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The θ-minimiser, widening Θ once when it lands on an endpoint.
fn minimise_interior<S: Surrogate>(s: &mut S) -> Result<(f64, f64, bool)> {
    let (lo, hi) = s.interval();
    let (theta, value) = s.minimise()?;
    if theta > lo && theta < hi {
        return Ok((theta, value, false));
    }
    let w = hi - lo;
    let (nlo, nhi) = if theta <= lo { (lo - w, hi) } else { (lo, hi + w) };
    s.regrow(nlo, nhi)?;
    let (theta, value) = s.minimise()?;
    if theta > nlo && theta < nhi {
        Ok((theta, value, true))
    } else {
        Err(Error::BoundaryMinimiser { theta, lo: nlo, hi: nhi })
    }
}

/// θ-minimisation and design gradient at `z` from a fresh response.
pub fn iterate<S: Surrogate>(
    j: usize,
    z: &Design,
    response: &mut OracleResponse<S>,
    settings: &OptimizerSettings,
) -> Result<(OptState, Vec<f64>)> {
    let (theta, cvar, regrown) = minimise_interior(&mut response.surrogate)?;
    let (lo, hi) = response.surrogate.interval();
    let grad_z = design_gradient(&response.surrogate.psi_prime(theta)?, settings.kappa, z.as_slice(), &settings.z_ref);
    let penalty: f64 = z.as_slice().iter().zip(&settings.z_ref).map(|(a, b)| (a - b).powi(2)).sum();
    let state = OptState {
        j,
        z: z.as_slice().to_vec(),
        theta,
        interval: [lo, hi],
        objective: cvar + settings.kappa * penalty,
        cvar,
        var: theta,
        grad_theta: response.surrogate.phi_prime(theta)?,
        grad_norm: norm(&grad_z),
        grad_z: grad_z.clone(),
        residual: 1.0,
        iteration_cost: response.cost,
        cumulative_cost: response.cost,
        hierarchy: response.hierarchy.clone(),
        rmse: response.rmse,
        regrown,
        oracle_converged: response.converged,
    };
    let next = gradient_step(z.as_slice(), &grad_z, settings.alpha);
    Ok((state, next))
}

/// Run AMGD until the residual drops to `eps` or `max_iters` iterates exist.
pub fn run<O: GradientOracle>(oracle: &mut O, settings: &OptimizerSettings) -> Result<OptOutcome> {
    settings.validate()?;
    let mut z = Design::new(settings.z0.clone())?;
    let mut history: Vec<OptState> = Vec::new();
    let mut tolerance = None;
    let mut previous_theta = None;
    let mut norm0 = None;
    loop {
        let j = history.len();
        let mut response = oracle.evaluate(j, &z, tolerance, previous_theta)?;
        let (mut state, next) = iterate(j, &z, &mut response, settings)?;
        let n0 = *norm0.get_or_insert(state.grad_norm);
        state.residual = if n0 > 0.0 { (state.grad_norm / n0).powi(2) } else { 0.0 };
        state.cumulative_cost = history.last().map_or(0.0, |s| s.cumulative_cost) + state.iteration_cost;
        log::info!(
            "iter {j}: θ = {:.6}, ĉ = {:.6}, residual = {:.3e}, cost = {:.3e}",
            state.theta,
            state.cvar,
            state.residual,
            state.cumulative_cost
        );
        let done = state.residual <= settings.eps;
        tolerance = Some(settings.eta * state.grad_norm);
        previous_theta = Some(state.theta);
        history.push(state);
        if done {
            return Ok(OptOutcome { history, converged: true });
        }
        if history.len() >= settings.max_iters {
            log::warn!("AMGD stopped after {} iterations without reaching the residual tolerance", history.len());
            return Ok(OptOutcome { history, converged: false });
        }
        if tolerance == Some(0.0) {
            return Ok(OptOutcome { history, converged: true });
        }
        z = Design::new(next)?;
    }
}

/// MLMC surrogate: spline functionals plus the execution mode used to refit them.
pub struct MlmcSurrogate {
    pub estimates: ParametricEstimates,
    pub exec: Execution,
}

impl Surrogate for MlmcSurrogate {
    fn interval(&self) -> (f64, f64) {
        (self.estimates.grid.lo, self.estimates.grid.hi)
    }

    fn minimise(&self) -> Result<(f64, f64)> {
        argmin_on_interval(&self.estimates.phi, self.estimates.grid.lo, self.estimates.grid.hi)
    }

    fn phi_prime(&self, theta: f64) -> Result<f64> {
        self.estimates.phi_prime(theta)
    }

    fn psi_prime(&self, theta: f64) -> Result<Vec<f64>> {
        self.estimates.psi_prime(theta)
    }

    fn regrow(&mut self, lo: f64, hi: f64) -> Result<()> {
        let grid = ThetaGrid::new(lo, hi, self.estimates.grid.n)?;
        let e = &mut self.estimates;
        *e = functionals_from_batches(std::mem::take(&mut e.batches), &grid, &e.design, e.tau, self.exec)?;
        Ok(())
    }
}

/// Oracle backed by the CMLMC controller: screening at `j = 0`, then
/// warm-started adaptation with replica tag `j`.
pub struct MlmcOracle<'a> {
    pub controller: Controller<'a>,
    pub master_seed: u64,
    warm: Option<WarmStart>,
    /// Finest-level `Q` samples per iteration, for distribution plots.
    pub samples: Vec<Vec<f64>>,
}

impl<'a> MlmcOracle<'a> {
    pub fn new(controller: Controller<'a>, master_seed: u64) -> Self {
        MlmcOracle { controller, master_seed, warm: None, samples: Vec::new() }
    }
}

impl GradientOracle for MlmcOracle<'_> {
    type Surrogate = MlmcSurrogate;

    fn evaluate(
        &mut self,
        j: usize,
        z: &Design,
        tolerance: Option<f64>,
        previous_theta: Option<f64>,
    ) -> Result<OracleResponse<MlmcSurrogate>> {
        let call = CmlmcCall { master_seed: self.master_seed, replica_tag: j as u64, previous_theta };
        let exec = self.controller.exec;
        let (estimates, hierarchy, rmse, converged) = match tolerance {
            None => {
                let s = self.controller.screening(z, call)?;
                self.warm = Some(s.warm_start());
                let rmse = s.errors.breakdown.rmse();
                (s.estimates, s.hierarchy, rmse, true)
            }
            Some(tol) => {
                let out = self.controller.run_cmlmc_lenient(z, tol, self.warm.as_ref(), call)?;
                if !out.converged {
                    log::warn!("iteration {j}: hierarchy adaptation stopped at RMSE {:.3e} > {tol:.3e}", out.rmse());
                }
                self.warm = Some(out.warm_start());
                let rmse = out.rmse();
                (out.estimates, out.hierarchy, rmse, out.converged)
            }
        };
        let finest = estimates.batches.last().map_or(0, |b| b.len());
        self.samples.push(pooled_finest_samples(&estimates.batches, finest));
        Ok(OracleResponse {
            cost: estimates.total_cost,
            surrogate: MlmcSurrogate { estimates, exec },
            hierarchy: Some(hierarchy),
            rmse: Some(rmse),
            converged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmlmc::CmlmcSettings;
    use crate::model::{LinearGaussian, ShiftedUniform};
    use crate::rng::{derive_stream, Variate};
    use crate::stats::{normal_pdf, normal_quantile};

    #[test]
    fn theta_interval_for_uniform_samples() {
        let mut s = derive_stream(1, 0, 0, 0);
        let pool = s.draw(Variate::Uniform { lo: 0.0, hi: 1.0 }, 10_000).unwrap();
        let (lo, hi) = select_theta_interval(&pool, 0.7, None).unwrap();
        assert!(lo < 0.6 && hi > 0.8, "[{lo}, {hi}]");
        assert!((lo - 0.55).abs() < 0.02 && (hi - 0.85).abs() < 0.02);
    }

    #[test]
    fn theta_interval_keeps_previous_inside() {
        let pool: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        for prev in [-3.0, 0.56, 0.84, 5.0] {
            let (lo, hi) = select_theta_interval(&pool, 0.7, Some(prev)).unwrap();
            let w = hi - lo;
            assert!(prev >= lo + 0.1 * w - 1e-12 && prev <= hi - 0.1 * w + 1e-12, "{prev} in [{lo}, {hi}]");
        }
    }

    #[test]
    fn theta_interval_degenerate_and_small() {
        let (lo, hi) = select_theta_interval(&[2.5; 20], 0.7, None).unwrap();
        assert!((lo - 2.25).abs() < 1e-12 && (hi - 2.75).abs() < 1e-12);
        let (lo, hi) = select_theta_interval(&[0.3; 20], 0.7, None).unwrap();
        assert!((lo - 0.2).abs() < 1e-12 && (hi - 0.4).abs() < 1e-12);
        assert!(matches!(select_theta_interval(&[1.0; 7], 0.7, None), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn step_arithmetic() {
        assert_eq!(design_gradient(&[0.5], 1.0, &[1.25], &[1.0]), vec![1.0]);
        assert_eq!(gradient_step(&[1.0], &[2.0], 0.1), vec![0.8]);
    }

    /// `J(θ, z) = θ² + z²` written as `Φ(θ; z) = θ² + z²`, `Ψ'(θ; z) = 2z`.
    struct Quadratic {
        z: f64,
        lo: f64,
        hi: f64,
    }

    impl Surrogate for Quadratic {
        fn interval(&self) -> (f64, f64) {
            (self.lo, self.hi)
        }
        fn minimise(&self) -> Result<(f64, f64)> {
            let t = 0.0f64.clamp(self.lo, self.hi);
            Ok((t, t * t + self.z * self.z))
        }
        fn phi_prime(&self, theta: f64) -> Result<f64> {
            Ok(2.0 * theta)
        }
        fn psi_prime(&self, _theta: f64) -> Result<Vec<f64>> {
            Ok(vec![2.0 * self.z])
        }
        fn regrow(&mut self, lo: f64, hi: f64) -> Result<()> {
            self.lo = lo;
            self.hi = hi;
            Ok(())
        }
    }

    struct QuadraticOracle {
        interval: (f64, f64),
    }

    impl GradientOracle for QuadraticOracle {
        type Surrogate = Quadratic;
        fn evaluate(&mut self, _j: usize, z: &Design, _t: Option<f64>, _p: Option<f64>) -> Result<OracleResponse<Quadratic>> {
            Ok(OracleResponse {
                surrogate: Quadratic { z: z[0], lo: self.interval.0, hi: self.interval.1 },
                cost: 1.0,
                hierarchy: None,
                rmse: None,
                converged: true,
            })
        }
    }

    fn settings(alpha: f64, kappa: f64) -> OptimizerSettings {
        OptimizerSettings { tau: 0.7, kappa, z_ref: vec![0.0], z0: vec![1.0], alpha, eta: 0.2, eps: 1e-6, max_iters: 200 }
    }

    #[test]
    fn exact_quadratic_contracts_geometrically() {
        let mut oracle = QuadraticOracle { interval: (-1.0, 1.0) };
        let out = run(&mut oracle, &settings(0.1, 0.0)).unwrap();
        assert!(out.converged);
        for w in out.history.windows(2) {
            assert_eq!(w[0].theta, 0.0);
            assert_eq!(w[0].grad_theta, 0.0);
            assert!((w[1].z[0] - 0.8 * w[0].z[0]).abs() < 1e-15);
        }
        assert_eq!(out.last().cumulative_cost, out.history.len() as f64);
    }

    #[test]
    fn boundary_minimiser_regrows_once_then_fails() {
        // Θ = [0.5, 1]: argmin 0 is outside, regrowing to [0, 1] still leaves it on the edge.
        let mut oracle = QuadraticOracle { interval: (0.5, 1.0) };
        assert!(matches!(run(&mut oracle, &settings(0.1, 0.0)), Err(Error::BoundaryMinimiser { .. })));
        // Θ = [0.1, 2]: widening to [-1.8, 2] brings 0 inside.
        let mut oracle = QuadraticOracle { interval: (0.1, 2.0) };
        let out = run(&mut oracle, &settings(0.1, 0.0)).unwrap();
        assert!(out.history[0].regrown);
        assert!((out.history[0].interval[0] + 1.8).abs() < 1e-12 && out.history[0].interval[1] == 2.0);
    }

    #[test]
    fn max_iters_gives_partial_history() {
        let mut oracle = QuadraticOracle { interval: (-1.0, 1.0) };
        let out = run(&mut oracle, &OptimizerSettings { max_iters: 3, ..settings(0.01, 0.0) }).unwrap();
        assert!(!out.converged);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn settings_validation() {
        assert!(OptimizerSettings { tau: 1.0, ..settings(0.1, 1.0) }.validate().is_err());
        assert!(OptimizerSettings { z_ref: vec![0.0, 1.0], ..settings(0.1, 1.0) }.validate().is_err());
        assert!(OptimizerSettings { eps: 1.0, ..settings(0.1, 1.0) }.validate().is_err());
        assert!(settings(0.1, 1.0).validate().is_ok());
    }

    #[test]
    fn mlmc_oracle_on_uniform_model_finds_quantile() {
        let m = ShiftedUniform { lo: 0.0, hi: 1.0 };
        let c = Controller::new(&m, 0.7, CmlmcSettings { screen: vec![4000, 8], ..Default::default() }, Execution::Parallel).unwrap();
        let mut oracle = MlmcOracle::new(c, 3);
        let z = Design::new(vec![0.0]).unwrap();
        let mut resp = oracle.evaluate(0, &z, None, None).unwrap();
        let (state, _) = iterate(0, &z, &mut resp, &settings(0.1, 1.0)).unwrap();
        assert!((state.var - 0.7).abs() < 0.03 && (state.cvar - 0.85).abs() < 0.02, "{state:?}");
        assert!(state.grad_theta.abs() < 1e-8);
        assert_eq!(oracle.samples[0].len(), 8);
    }

    #[test]
    fn linear_gaussian_optimum() {
        let m = LinearGaussian::default();
        let tau = 0.7;
        let c = Controller::new(&m, tau, CmlmcSettings { screen: vec![256, 8], ..Default::default() }, Execution::Parallel).unwrap();
        let mut oracle = MlmcOracle::new(c, 11);
        let s = OptimizerSettings { tau, kappa: 1.0, z_ref: vec![0.0], z0: vec![0.5], alpha: 0.2, eta: 0.2, eps: 1e-3, max_iters: 100 };
        let out = run(&mut oracle, &s).unwrap();
        assert!(out.converged);
        let last = out.last();
        let z_star = LinearGaussian::optimum(0.0, 1.0);
        let tol = s.eta * out.history[out.history.len() - 2].grad_norm;
        assert!((last.z[0] - z_star).abs() <= 3.0 * tol.max(last.grad_norm), "{} vs {z_star}", last.z[0]);
        let theta_exact = last.z[0] + 0.1 * normal_quantile(tau);
        assert!((last.theta - theta_exact).abs() < 0.02, "{} vs {theta_exact}", last.theta);
        let cvar_exact = last.z[0] + 0.1 * normal_pdf(normal_quantile(tau)) / (1.0 - tau);
        assert!((last.cvar - cvar_exact).abs() < 0.01);
        let slope = crate::stats::linear_fit(
            &out.history.iter().map(|s| s.j as f64).collect::<Vec<_>>(),
            &out.history.iter().map(|s| s.residual.ln()).collect::<Vec<_>>(),
        )
        .unwrap()
        .1;
        assert!(slope < 0.0);
    }
}
