//! Experiment drivers behind the `cvar-mlmc` binary.
//!
//! Each driver writes plain CSV and JSON artifacts into an output directory.
//! Every number in those files is a deterministic function of the config and
//! seed, so reruns produce byte-identical files at any thread count.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amgd::{run, MlmcOracle, OptOutcome};
use crate::cmlmc::{CmlmcCall, CmlmcOutcome, Controller, RateEstimates, RoundRecord};
use crate::config::{ExperimentConfig, ExperimentKind, ReferenceConfig};
use crate::error::{Error, Result};
use crate::errors::{target_name, ErrorBreakdown};
use crate::estimator::{Hierarchy, ParametricEstimates};
use crate::exec::Execution;
use crate::model::{sample_level, Design, Model};
use crate::spline::ThetaGrid;

/// Replica tag of reference samples, disjoint from experiment and bootstrap tags.
pub const REFERENCE_TAG: u64 = 1 << 61;

/// Points of the probe grid on which sup-norm errors are measured.
const PROBE_POINTS: usize = 401;

/// Single-level Monte Carlo reference for `Φ'` and `Ψ'_k` at one design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub model: String,
    pub design: Vec<f64>,
    pub tau: f64,
    pub level: usize,
    pub samples: usize,
    pub master_seed: u64,
    /// Model cost units spent on the reference.
    pub cost: f64,
    pub var: f64,
    pub cvar: f64,
    /// `(Φ', Ψ'_1, ...)` at the VaR.
    pub derivatives_at_var: Vec<f64>,
    pub theta: Vec<f64>,
    /// `derivatives[t][r]` is target `t` at `theta[r]`.
    pub derivatives: Vec<Vec<f64>>,
}

impl Reference {
    pub fn range(&self) -> (f64, f64) {
        (self.theta[0], self.theta[self.theta.len() - 1])
    }

    /// Piecewise-linear interpolation of target `t`; `None` outside the table.
    pub fn derivative_at(&self, t: usize, theta: f64) -> Option<f64> {
        let (lo, hi) = self.range();
        if !(lo..=hi).contains(&theta) {
            return None;
        }
        let r = self.theta.partition_point(|&x| x <= theta).clamp(1, self.theta.len() - 1);
        let (x0, x1) = (self.theta[r - 1], self.theta[r]);
        let (y0, y1) = (self.derivatives[t][r - 1], self.derivatives[t][r]);
        Some(y0 + (theta - x0) / (x1 - x0) * (y1 - y0))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
    }
}

/// Indicator averages of `1{Q > θ}` and `1{Q > θ} Q_{z_k}` from one level.
pub fn make_reference(
    model: &dyn Model,
    z: &Design,
    tau: f64,
    cfg: &ReferenceConfig,
    master_seed: u64,
    exec: Execution,
) -> Result<Reference> {
    let n = cfg.samples;
    let batch = sample_level(model, z, cfg.level, 0, n, master_seed, REFERENCE_TAG, exec)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| batch[a].q_fine.total_cmp(&batch[b].q_fine));
    let sorted: Vec<f64> = order.iter().map(|&i| batch[i].q_fine).collect();
    let tail = 1.0 - tau;
    let nf = n as f64;

    let k = ((tau * nf).ceil() as usize).clamp(1, n) - 1;
    let var = sorted[k];
    let cvar = var + sorted.iter().map(|q| (q - var).max(0.0)).sum::<f64>() / (nf * tail);

    let lo = crate::stats::quantile_sorted(&sorted, cfg.quantiles[0]);
    let hi = crate::stats::quantile_sorted(&sorted, cfg.quantiles[1]);
    if !(hi > lo) {
        return Err(Error::InsufficientSamples(format!("reference quantile range [{lo}, {hi}] is degenerate")));
    }
    let theta = ThetaGrid::new(lo, hi, cfg.grid_points)?.points();

    // Suffix sums over samples sorted by Q: entry i covers sorted[i..].
    let dim = model.dim();
    let mut suffix = vec![vec![0.0; dim]; n + 1];
    for i in (0..n).rev() {
        let g = &batch[order[i]].grad_fine;
        for d in 0..dim {
            suffix[i][d] = suffix[i + 1][d] + g[d];
        }
    }
    let at = |t: f64| -> Vec<f64> {
        let first = sorted.partition_point(|&q| q <= t);
        let count = (n - first) as f64;
        let mut out = Vec::with_capacity(dim + 1);
        out.push(1.0 - count / (nf * tail));
        out.extend(suffix[first].iter().map(|s| s / (nf * tail)));
        out
    };
    let mut derivatives = vec![Vec::with_capacity(theta.len()); dim + 1];
    for &t in &theta {
        for (col, v) in derivatives.iter_mut().zip(at(t)) {
            col.push(v);
        }
    }
    Ok(Reference {
        model: model.name().to_owned(),
        design: z.as_slice().to_vec(),
        tau,
        level: cfg.level,
        samples: n,
        master_seed,
        cost: nf * model.solve_cost(cfg.level),
        var,
        cvar,
        derivatives_at_var: at(var),
        theta,
        derivatives,
    })
}

/// Distance between an MLMC gradient estimate and a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrueErrors {
    /// Euclidean norm over targets at the reference VaR.
    pub pointwise: f64,
    /// `sqrt(Σ_t sup_θ |error_t|²)` over the overlap of Θ and the reference range.
    pub sup: f64,
}

pub fn true_errors(est: &ParametricEstimates, reference: &Reference) -> Result<TrueErrors> {
    let (rlo, rhi) = reference.range();
    let lo = est.grid.lo.max(rlo);
    let hi = est.grid.hi.min(rhi);
    if !(hi > lo) {
        return Err(Error::param(format!(
            "Θ = [{}, {}] does not overlap the reference range [{rlo}, {rhi}]",
            est.grid.lo, est.grid.hi
        )));
    }
    let targets = est.n_targets();
    if targets != reference.derivatives.len() {
        return Err(Error::param("reference and estimate have different numbers of targets"));
    }
    let err_at = |t: usize, theta: f64| -> Result<f64> {
        let r = reference.derivative_at(t, theta).ok_or(Error::Domain { theta, lo: rlo, hi: rhi })?;
        Ok(est.target_spline(t).eval(theta, 1)? - r)
    };
    let theta0 = reference.var.clamp(lo, hi);
    let mut pointwise = 0.0;
    let mut sup = 0.0;
    let probe = ThetaGrid::new(lo, hi, PROBE_POINTS)?.points();
    for t in 0..targets {
        pointwise += err_at(t, theta0)?.powi(2);
        let mut m: f64 = 0.0;
        for &theta in &probe {
            m = m.max(err_at(t, theta)?.abs());
        }
        sup += m * m;
    }
    Ok(TrueErrors { pointwise: pointwise.sqrt(), sup: sup.sqrt() })
}

/// Driver state shared by all experiment kinds.
pub struct Experiment<'a> {
    pub config: &'a ExperimentConfig,
    pub out_dir: PathBuf,
    pub exec: Execution,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tolerance: Option<f64>,
    converged: bool,
    rmse: f64,
    cost: f64,
    hierarchy: &'a Hierarchy,
    theta_interval: [f64; 2],
    rates: &'a RateEstimates,
    breakdown: &'a ErrorBreakdown,
    rounds: &'a [RoundRecord],
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

fn joined(counts: &[usize]) -> String {
    counts.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

impl<'a> Experiment<'a> {
    pub fn new(config: &'a ExperimentConfig, out_dir: PathBuf, exec: Execution) -> Self {
        Experiment { config, out_dir, exec }
    }

    /// Run one experiment and return the paths of the files written.
    pub fn run(&self, kind: ExperimentKind) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.out_dir)?;
        let model = self.config.build_model()?;
        match kind {
            ExperimentKind::Estimate => self.estimate(model.as_ref()),
            ExperimentKind::Reliability => self.reliability(model.as_ref()),
            ExperimentKind::Complexity => self.complexity(model.as_ref()),
            ExperimentKind::Optimize => self.optimize(model.as_ref()),
            ExperimentKind::Reference => {
                let r = self.reference(model.as_ref())?;
                let path = self.out_dir.join("reference.json");
                write_json(&path, &r)?;
                Ok(vec![path])
            }
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn design(&self) -> Result<Design> {
        Design::new(self.config.z0())
    }

    fn controller<'m>(&self, model: &'m dyn Model) -> Result<Controller<'m>> {
        Controller::new(model, self.config.tau(), self.config.mlmc_settings(), self.exec)
    }

    fn call(&self, tag: u64) -> CmlmcCall {
        CmlmcCall { master_seed: self.config.seed, replica_tag: tag, previous_theta: None }
    }

    fn reference(&self, model: &dyn Model) -> Result<Reference> {
        let cfg = &self.config.experiment.reference;
        match &cfg.path {
            Some(p) => Reference::load(p),
            None => make_reference(model, &self.design()?, self.config.tau(), cfg, self.config.seed, self.exec),
        }
    }

    /// `(tolerance index, repeat)` pairs with their replica tags.
    fn runs(&self) -> impl Iterator<Item = (f64, usize, u64)> + '_ {
        let ex = &self.config.experiment;
        ex.tolerances.iter().enumerate().flat_map(move |(i, &tol)| {
            (0..ex.repeats).map(move |r| (tol, r, (i * ex.repeats + r) as u64))
        })
    }

    fn estimate(&self, model: &dyn Model) -> Result<Vec<PathBuf>> {
        let controller = self.controller(model)?;
        let z = self.design()?;
        let mut outcomes: Vec<(Option<f64>, CmlmcOutcome)> = Vec::new();
        if self.config.experiment.tolerances.is_empty() {
            let s = controller.screening(&z, self.call(0))?;
            let rmse = s.errors.breakdown.rmse();
            let record = RoundRecord {
                round: 0,
                tolerance: None,
                hierarchy: s.hierarchy.clone(),
                theta_interval: [s.estimates.grid.lo, s.estimates.grid.hi],
                rmse,
                interp_sq: s.errors.breakdown.interp_sq(),
                bias_sq: s.errors.breakdown.bias_sq(),
                stat_sq: s.errors.breakdown.stat_sq(),
                cost: s.estimates.total_cost,
                breakdown: s.errors.breakdown.clone(),
            };
            let out = CmlmcOutcome {
                estimates: s.estimates,
                errors: s.errors,
                hierarchy: s.hierarchy,
                rates: s.rates,
                rounds: vec![record],
                converged: true,
                regrows: 0,
            };
            outcomes.push((None, out));
        } else {
            for (i, &tol) in self.config.experiment.tolerances.iter().enumerate() {
                outcomes.push((Some(tol), controller.run_cmlmc_lenient(&z, tol, None, self.call(i as u64))?));
            }
        }

        let dim = model.dim();
        let names: Vec<String> = (0..=dim).map(target_name).collect();
        let mut summary = csv_writer(&self.path("estimates.csv"))?;
        let mut header: Vec<String> =
            ["run", "tolerance", "converged", "rmse", "var", "cvar", "cost", "levels", "n", "samples"].map(String::from).to_vec();
        header.extend(names.iter().map(|n| format!("grad_{n}")));
        summary.write_record(&header).map_err(csv_error)?;

        let mut table = csv_writer(&self.path("functionals.csv"))?;
        let mut header: Vec<String> = ["run", "theta", "phi"].map(String::from).to_vec();
        header.extend(names.iter().map(|n| format!("d_{n}")));
        table.write_record(&header).map_err(csv_error)?;

        let mut records = Vec::new();
        for (run_id, (tol, out)) in outcomes.iter().enumerate() {
            let e = &out.estimates;
            let vc = e.extract_var_cvar()?;
            let mut row = vec![
                run_id.to_string(),
                tol.map(fmt).unwrap_or_default(),
                out.converged.to_string(),
                fmt(out.rmse()),
                fmt(vc.var),
                fmt(vc.cvar),
                fmt(e.total_cost),
                e.levels().to_string(),
                e.grid.n.to_string(),
                joined(&e.counts()),
            ];
            for t in 0..=dim {
                row.push(fmt(e.target_spline(t).eval(vc.var, 1)?));
            }
            summary.write_record(&row).map_err(csv_error)?;

            for theta in e.grid.points() {
                let mut row = vec![run_id.to_string(), fmt(theta), fmt(e.phi.eval(theta, 0)?)];
                for t in 0..=dim {
                    row.push(fmt(e.target_spline(t).eval(theta, 1)?));
                }
                table.write_record(&row).map_err(csv_error)?;
            }
            records.push(RunRecord {
                tolerance: *tol,
                converged: out.converged,
                rmse: out.rmse(),
                cost: e.total_cost,
                hierarchy: &out.hierarchy,
                theta_interval: [e.grid.lo, e.grid.hi],
                rates: &out.rates,
                breakdown: &out.errors.breakdown,
                rounds: &out.rounds,
            });
        }
        summary.flush()?;
        table.flush()?;
        write_json(&self.path("errors.json"), &records)?;
        Ok(vec![self.path("estimates.csv"), self.path("functionals.csv"), self.path("errors.json")])
    }

    fn reliability(&self, model: &dyn Model) -> Result<Vec<PathBuf>> {
        let controller = self.controller(model)?;
        let z = self.design()?;
        let reference = self.reference(model)?;
        let mut written = Vec::new();
        if self.config.experiment.reference.path.is_none() {
            let p = self.path("reference.json");
            write_json(&p, &reference)?;
            written.push(p);
        }
        let mut w = csv_writer(&self.path("reliability.csv"))?;
        w.write_record([
            "run",
            "tolerance",
            "estimated_rmse",
            "true_pointwise_error",
            "true_sup_error",
            "cost",
            "converged",
            "var",
            "cvar",
        ])
        .map_err(csv_error)?;
        for (tol, r, tag) in self.runs() {
            let out = controller.run_cmlmc_lenient(&z, tol, None, self.call(tag))?;
            let truth = true_errors(&out.estimates, &reference)?;
            let vc = out.estimates.extract_var_cvar()?;
            log::info!("reliability run {r} at {tol}: rmse {:.3e}, pointwise {:.3e}, sup {:.3e}", out.rmse(), truth.pointwise, truth.sup);
            w.write_record([
                r.to_string(),
                fmt(tol),
                fmt(out.rmse()),
                fmt(truth.pointwise),
                fmt(truth.sup),
                fmt(out.total_cost()),
                out.converged.to_string(),
                fmt(vc.var),
                fmt(vc.cvar),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        written.push(self.path("reliability.csv"));
        Ok(written)
    }

    fn complexity(&self, model: &dyn Model) -> Result<Vec<PathBuf>> {
        let controller = self.controller(model)?;
        let z = self.design()?;
        let mut w = csv_writer(&self.path("complexity.csv"))?;
        w.write_record(["tolerance", "run", "cost", "rmse", "converged", "levels", "n", "samples"]).map_err(csv_error)?;
        for (tol, r, tag) in self.runs() {
            let out = controller.run_cmlmc_lenient(&z, tol, None, self.call(tag))?;
            log::info!("complexity run {r} at {tol}: cost {:.3e}", out.total_cost());
            w.write_record([
                fmt(tol),
                r.to_string(),
                fmt(out.total_cost()),
                fmt(out.rmse()),
                out.converged.to_string(),
                out.hierarchy.levels().to_string(),
                out.hierarchy.n.to_string(),
                joined(&out.hierarchy.samples),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(vec![self.path("complexity.csv")])
    }

    fn optimize(&self, model: &dyn Model) -> Result<Vec<PathBuf>> {
        let settings = self.config.optimizer_settings();
        let mut oracle = MlmcOracle::new(self.controller(model)?, self.config.seed);
        let outcome = run(&mut oracle, &settings)?;
        let mut written = vec![self.path("history.csv"), self.path("summary.json")];
        self.write_history(&outcome, model.dim())?;
        write_json(
            &self.path("summary.json"),
            &serde_json::json!({
                "converged": outcome.converged,
                "iterations": outcome.history.len(),
                "final_residual": outcome.last().residual,
                "final_design": outcome.last().z,
                "cumulative_cost": outcome.last().cumulative_cost,
            }),
        )?;
        for (state, samples) in outcome.history.iter().zip(&oracle.samples) {
            let j = state.j;
            let p = self.path(&format!("hierarchy_{j}.json"));
            write_json(
                &p,
                &serde_json::json!({
                    "j": j,
                    "hierarchy": state.hierarchy,
                    "rmse": state.rmse,
                    "iteration_cost": state.iteration_cost,
                    "theta_interval": state.interval,
                    "oracle_converged": state.oracle_converged,
                }),
            )?;
            written.push(p);

            let p = self.path(&format!("cdf_{j}.csv"));
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            let mut w = csv_writer(&p)?;
            w.write_record(["q", "cdf", "var", "cvar"]).map_err(csv_error)?;
            let n = sorted.len() as f64;
            for (i, q) in sorted.iter().enumerate() {
                w.write_record([fmt(*q), fmt((i + 1) as f64 / n), fmt(state.var), fmt(state.cvar)]).map_err(csv_error)?;
            }
            w.flush()?;
            written.push(p);
        }
        if !outcome.converged {
            log::warn!("optimisation stopped at max_iters with residual {:.3e}", outcome.last().residual);
        }
        Ok(written)
    }

    fn write_history(&self, outcome: &OptOutcome, dim: usize) -> Result<()> {
        let mut w = csv_writer(&self.path("history.csv"))?;
        let mut header = vec!["j".to_owned()];
        header.extend((0..dim).map(|k| format!("z{k}")));
        header.extend(
            [
                "theta",
                "objective",
                "cvar",
                "var",
                "grad_norm",
                "residual",
                "iteration_cost",
                "cumulative_cost",
                "rmse",
                "levels",
                "n",
                "theta_lo",
                "theta_hi",
            ]
            .map(String::from),
        );
        w.write_record(&header).map_err(csv_error)?;
        for s in &outcome.history {
            let mut row = vec![s.j.to_string()];
            row.extend(s.z.iter().map(|&x| fmt(x)));
            row.extend([
                fmt(s.theta),
                fmt(s.objective),
                fmt(s.cvar),
                fmt(s.var),
                fmt(s.grad_norm),
                fmt(s.residual),
                fmt(s.iteration_cost),
                fmt(s.cumulative_cost),
                s.rmse.map(fmt).unwrap_or_default(),
                s.hierarchy.as_ref().map(|h| h.levels().to_string()).unwrap_or_default(),
                s.hierarchy.as_ref().map(|h| h.n.to_string()).unwrap_or_default(),
                fmt(s.interval[0]),
                fmt(s.interval[1]),
            ]);
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}
