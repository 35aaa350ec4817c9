//! Reproducible studies: shape-error scaling, Monte Carlo probability of
//! the shape bound, invariance residuals, tail-constant diagnostics, the
//! approximation ladder and a contraction audit.
//!
//! Cells are independent; they run on a rayon pool and are collected in
//! index order, so results do not depend on the number of threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::manifold::{
    closed_form_shape, contraction_constant, deterministic_graph, flow_forward, hbar1, hbar2,
    hbar3, random_graph_point, solve_graph, LpSolverConfig,
};
use crate::nonlinear::{NonlinearitySpec, DEFAULT_SAFETY_FACTOR};
use crate::spectral::{Block, SpectralModel, SpectralVector};
use crate::stochastic::{
    derive_seed, kpm_estimate, OuTrajectory, TailConstants, TailParams, WienerPath,
};

pub const SCHEMA_VERSION: u32 = 1;
const PILOT_TAG: u64 = 0x5049_4c4f_5400;

/// Model, nonlinearity and solver shared by all cells of a study.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: SpectralModel,
    pub spec: NonlinearitySpec,
    pub solver: LpSolverConfig,
    pub t_ou: f64,
}

impl Setup {
    pub fn fingerprint(&self) -> Result<Fingerprint> {
        Ok(Fingerprint {
            mode_count: self.model.mode_count(),
            shift_c: self.model.shift_c(),
            alpha: self.model.alpha(),
            grid_size: self.model.grid_size(),
            p: self.spec.p,
            signed_power: self.spec.signed_power,
            radius: self.spec.radius,
            lipschitz: self.spec.lipschitz.unwrap_or(f64::NAN),
            sc: contraction_constant(&self.spec, &self.model, &self.solver)?,
            safety_factor: DEFAULT_SAFETY_FACTOR,
            solver: self.solver,
            t_ou: self.t_ou,
        })
    }

    fn horizon(&self) -> f64 {
        self.solver.steps() as f64 * self.solver.dt
    }

    /// OU trajectory covering `[-T, t_max]` after the `T_ou` burn-in.
    fn path(&self, seed: u64, sigma: f64, t_max: f64) -> Result<OuTrajectory> {
        if sigma == 0.0 {
            return OuTrajectory::deterministic(-self.horizon(), t_max, self.solver.dt);
        }
        let steps_back = self.solver.steps() + (self.t_ou / self.solver.dt).ceil() as usize;
        let t_min = -(steps_back as f64) * self.solver.dt;
        let path = WienerPath::sample(seed, t_min, t_max, self.solver.dt)?;
        OuTrajectory::from_path(&path, sigma, self.t_ou)
    }

    fn unit_xi(&self) -> SpectralVector {
        SpectralVector::mode(self.model.mode_count(), 1)
    }

    /// Admissible ceiling `min((λ_s - (p-1)λ_u)/p, -λ_u)` on the noise intensity.
    pub fn sigma_ceiling(&self) -> f64 {
        sigma_ceiling(&self.model, self.spec.p)
    }
}

pub fn sigma_ceiling(model: &SpectralModel, p: f64) -> f64 {
    let (lu, ls) = (model.lambda_u(), model.lambda_s());
    ((ls - (p - 1.0) * lu) / p).min(-lu)
}

/// Everything in force for a study, echoed in its result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub mode_count: usize,
    pub shift_c: f64,
    pub alpha: f64,
    pub grid_size: usize,
    pub p: f64,
    pub signed_power: bool,
    pub radius: f64,
    pub lipschitz: f64,
    pub sc: f64,
    pub safety_factor: f64,
    pub solver: LpSolverConfig,
    pub t_ou: f64,
}

/// Study parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyParams {
    pub sigma_list: Vec<f64>,
    pub radius_list: Vec<f64>,
    pub n_samples: usize,
    pub base_seed: u64,
    /// Forward integrator step.
    pub dt_flow: f64,
    /// Flow time of the invariance test.
    pub delta_t: f64,
    /// Samples used to calibrate fitted constants.
    pub pilot_samples: usize,
    /// Worker threads; 0 uses all cores.
    pub concurrency: usize,
    /// Replace `sigma_list` by the single path `ω ≡ 0`.
    pub deterministic: bool,
}

impl Default for StudyParams {
    fn default() -> Self {
        StudyParams {
            sigma_list: vec![0.5, 0.25, 0.125],
            radius_list: vec![0.02, 0.01, 0.005],
            n_samples: 100,
            base_seed: 0,
            dt_flow: 0.02,
            delta_t: 0.1,
            pilot_samples: 50,
            concurrency: 0,
            deterministic: false,
        }
    }
}

impl StudyParams {
    pub fn validate(&self) -> Result<()> {
        if !self.deterministic && self.sigma_list.is_empty() {
            return Err(invalid("sigma_list", "must not be empty"));
        }
        if self.sigma_list.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("sigma_list", "entries must be positive"));
        }
        if self.radius_list.is_empty() {
            return Err(invalid("radius_list", "must not be empty"));
        }
        if self.radius_list.iter().any(|r| !(*r >= 0.0)) {
            return Err(invalid("radius_list", "entries must be nonnegative"));
        }
        if self.n_samples == 0 {
            return Err(invalid("n_samples", "must be at least 1"));
        }
        if !(self.dt_flow > 0.0) || !(self.delta_t > 0.0) {
            return Err(invalid("dt_flow", "dt_flow and delta_t must be positive"));
        }
        Ok(())
    }

    fn noise_levels(&self) -> Vec<f64> {
        if self.deterministic {
            vec![0.0]
        } else {
            self.sigma_list.clone()
        }
    }

    fn samples_for(&self, sigma: f64) -> usize {
        if sigma == 0.0 {
            1
        } else {
            self.n_samples
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    ShapeStudy,
    McProbability,
    Invariance,
    KDiagnostics,
    Ladder,
    Contraction,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::ShapeStudy => "shape-study",
            StudyKind::McProbability => "mc-probability",
            StudyKind::Invariance => "invariance",
            StudyKind::KDiagnostics => "k-diagnostics",
            StudyKind::Ladder => "ladder",
            StudyKind::Contraction => "contraction",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// One row of the per-cell table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub study: String,
    pub cell_id: usize,
    pub seed: u64,
    pub sigma: f64,
    pub r: f64,
    pub err: f64,
    pub bound: f64,
    pub success: bool,
    pub iterations: usize,
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
}

impl CellRecord {
    fn new(kind: StudyKind, cell_id: usize, seed: u64, sigma: f64, r: f64) -> Self {
        CellRecord {
            study: kind.name().into(),
            cell_id,
            seed,
            sigma,
            r,
            err: f64::NAN,
            bound: f64::NAN,
            success: false,
            iterations: 0,
            residual: f64::NAN,
            failure: None,
        }
    }

    fn failed(mut self, e: &Error) -> Self {
        self.failure = Some(e.to_string());
        self.success = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub schema_version: u32,
    pub study: String,
    pub fingerprint: Fingerprint,
    pub params: StudyParams,
    pub failures: usize,
    pub summary: Summary,
    pub records: Vec<CellRecord>,
}

impl StudyResult {
    fn new(
        kind: StudyKind,
        setup: &Setup,
        params: &StudyParams,
        records: Vec<CellRecord>,
        summary: Summary,
    ) -> Result<Self> {
        Ok(StudyResult {
            schema_version: SCHEMA_VERSION,
            study: kind.name().into(),
            fingerprint: setup.fingerprint()?,
            params: params.clone(),
            failures: records.iter().filter(|r| r.failure.is_some()).count(),
            summary,
            records,
        })
    }

    /// Per-cell table with columns
    /// `study, cell_id, seed, sigma, r, err, bound, success, iterations, residual`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record([
            "study",
            "cell_id",
            "seed",
            "sigma",
            "r",
            "err",
            "bound",
            "success",
            "iterations",
            "residual",
        ])?;
        for r in &self.records {
            wtr.write_record([
                r.study.clone(),
                r.cell_id.to_string(),
                r.seed.to_string(),
                format!("{:e}", r.sigma),
                format!("{:e}", r.r),
                format!("{:e}", r.err),
                format!("{:e}", r.bound),
                r.success.to_string(),
                r.iterations.to_string(),
                format!("{:e}", r.residual),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Summary {
    Shape(ShapeSummary),
    Mc(McSummary),
    Invariance(InvarianceSummary),
    KDiag(KDiagSummary),
    Ladder(LadderSummary),
    Contraction(ContractionSummary),
}

fn run_cells<T: Send>(
    concurrency: usize,
    n: usize,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if successes == 0 {
        0.0
    } else {
        (centre - half).max(0.0)
    };
    let hi = if successes == n {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    (lo, hi)
}

// ---------------------------------------------------------------- shape

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRow {
    pub sigma: f64,
    pub r: f64,
    /// Largest error over the samples of the cell.
    pub err: f64,
    pub err_over_rp: f64,
    pub cutoff_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSlope {
    pub sigma: f64,
    /// Log-log least-squares slope of err against r.
    pub slope: f64,
    /// err/r^p strictly decreases as r decreases.
    pub ratio_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub rows: Vec<ShapeRow>,
    pub slopes: Vec<ShapeSlope>,
}

/// `err(r) = ‖h - (L_s - pL_u)^{-1} P_s(ξ^p)‖` for `ξ = r e_1`, in original
/// coordinates when noise is present.
pub fn shape_error_sweep(setup: &Setup, params: &StudyParams) -> Result<StudyResult> {
    params.validate()?;
    let kind = StudyKind::ShapeStudy;
    let mut cells = Vec::new();
    for &sigma in &params.noise_levels() {
        for j in 0..params.samples_for(sigma) {
            for &r in &params.radius_list {
                cells.push((sigma, j, r));
            }
        }
    }
    let p = setup.spec.p;
    let out = run_cells(params.concurrency, cells.len(), |id| {
        let (sigma, j, r) = cells[id];
        let seed = derive_seed(params.base_seed, &[kind.tag(), j as u64]);
        let rec = CellRecord::new(kind, id, seed, sigma, r);
        let xi = setup.unit_xi().scaled(r);
        let solved = (|| {
            let cf = closed_form_shape(&xi, &setup.spec, &setup.model)?;
            if sigma == 0.0 {
                let (_, point, rep) =
                    deterministic_graph(&xi, &setup.spec, &setup.model, &setup.solver)?;
                Ok((point.h_value.sub(&cf).norm(), rep))
            } else {
                let ou = setup.path(seed, sigma, 0.0)?;
                let (point, rep) =
                    random_graph_point(&xi, &ou, &setup.spec, &setup.model, &setup.solver)?;
                Ok((point.h_value.sub(&cf).norm(), rep))
            }
        })();
        match solved {
            Ok((err, rep)) => (
                CellRecord {
                    err,
                    bound: r.powf(p),
                    success: true,
                    iterations: rep.iterations,
                    residual: rep.residual,
                    ..rec
                },
                rep.cutoff_active,
            ),
            Err(e) => (rec.failed(&e), false),
        }
    })?;
    let (records, cutoffs): (Vec<_>, Vec<_>) = out.into_iter().unzip();

    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &sigma in &params.noise_levels() {
        let mut sigma_rows = Vec::new();
        for &r in &params.radius_list {
            let sel: Vec<usize> = (0..records.len())
                .filter(|&i| {
                    records[i].sigma == sigma && records[i].r == r && records[i].failure.is_none()
                })
                .collect();
            if sel.is_empty() {
                continue;
            }
            let err = sel.iter().map(|&i| records[i].err).fold(0.0, f64::max);
            sigma_rows.push(ShapeRow {
                sigma,
                r,
                err,
                err_over_rp: if r > 0.0 { err / r.powf(p) } else { 0.0 },
                cutoff_active: sel.iter().any(|&i| cutoffs[i]),
            });
        }
        let mut pos: Vec<&ShapeRow> = sigma_rows
            .iter()
            .filter(|row| row.r > 0.0 && row.err > 0.0)
            .collect();
        pos.sort_by(|a, b| a.r.total_cmp(&b.r));
        let x: Vec<f64> = pos.iter().map(|row| row.r.ln()).collect();
        let y: Vec<f64> = pos.iter().map(|row| row.err.ln()).collect();
        let slope = fit_line(&x, &y).map(|(s, _)| s).unwrap_or(f64::NAN);
        let ratio_decreasing =
            pos.len() >= 2 && pos.windows(2).all(|w| w[0].err_over_rp < w[1].err_over_rp);
        slopes.push(ShapeSlope {
            sigma,
            slope,
            ratio_decreasing,
        });
        rows.extend(sigma_rows);
    }
    StudyResult::new(
        kind,
        setup,
        params,
        records,
        Summary::Shape(ShapeSummary { rows, slopes }),
    )
}

// ---------------------------------------------------------------- Monte Carlo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub sigma: f64,
    pub samples: usize,
    /// Paths with `K^± > 1/σ`.
    pub exceed: usize,
    pub p_exceed: f64,
    pub p_ci: (f64, f64),
    pub successes: usize,
    pub success_fraction: f64,
    pub success_ci: (f64, f64),
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub rows: Vec<McRow>,
    /// Frozen constant of the bound `err ≤ C (|ξ|_α + |ξ|_α²)`.
    pub calibrated_c: f64,
    pub exceed_strictly_decreasing: bool,
    /// Slope and intercept of `ln P` against `-1/σ` over the nonzero cells.
    pub log_linear_fit: Option<(f64, f64)>,
    /// Every cell's interval contains the fitted value.
    pub log_linear_consistent: bool,
    pub success_nondecreasing: bool,
}

/// Probability that `K^± > 1/σ` and success fraction of the shape bound with
/// `C` calibrated once at the largest `σ`.
pub fn mc_probability(setup: &Setup, params: &StudyParams) -> Result<StudyResult> {
    params.validate()?;
    if params.deterministic {
        return Err(invalid(
            "deterministic",
            "the Monte Carlo study needs noise",
        ));
    }
    let ceiling = setup.sigma_ceiling();
    if let Some(&s) = params.sigma_list.iter().find(|&&s| s >= ceiling) {
        return Err(invalid(
            "sigma_list",
            format!("σ = {s} is not below the ceiling {ceiling}"),
        ));
    }
    let kind = StudyKind::McProbability;
    let r = params.radius_list[0];
    let xi = setup.unit_xi().scaled(r);
    let xi_norm = setup.model.alpha_norm(&xi);
    let scale = xi_norm + xi_norm * xi_norm;
    let cf = closed_form_shape(&xi, &setup.spec, &setup.model)?;

    let cell = |seed: u64, sigma: f64| -> Result<(f64, f64, usize, f64)> {
        let ou = setup.path(seed, sigma, 0.0)?;
        let kpm = kpm_estimate(&ou)?;
        let (point, rep) = random_graph_point(&xi, &ou, &setup.spec, &setup.model, &setup.solver)?;
        Ok((
            point.h_value.sub(&cf).norm(),
            kpm,
            rep.iterations,
            rep.residual,
        ))
    };

    let sigma_max = params
        .sigma_list
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let pilot = run_cells(params.concurrency, params.pilot_samples, |j| {
        cell(
            derive_seed(params.base_seed, &[kind.tag(), PILOT_TAG, j as u64]),
            sigma_max,
        )
        .map(|c| c.0)
    })?;
    let pilot_max = pilot
        .iter()
        .filter_map(|e| e.as_ref().ok())
        .cloned()
        .fold(0.0, f64::max);
    let calibrated_c = 1.5 * pilot_max / scale;
    let bound = calibrated_c * scale;

    let n = params.n_samples;
    let cells: Vec<(f64, usize)> = params
        .sigma_list
        .iter()
        .flat_map(|&s| (0..n).map(move |j| (s, j)))
        .collect();
    let out = run_cells(params.concurrency, cells.len(), |id| {
        let (sigma, j) = cells[id];
        let seed = derive_seed(params.base_seed, &[kind.tag(), j as u64]);
        let rec = CellRecord::new(kind, id, seed, sigma, r);
        match cell(seed, sigma) {
            Ok((err, kpm, iterations, residual)) => (
                CellRecord {
                    err,
                    bound,
                    success: err <= bound,
                    iterations,
                    residual,
                    ..rec
                },
                Some(kpm),
            ),
            Err(e) => {
                // K^± does not depend on the solver; keep it when only the solve failed.
                let kpm = setup
                    .path(seed, sigma, 0.0)
                    .and_then(|ou| kpm_estimate(&ou))
                    .ok();
                (rec.failed(&e), kpm)
            }
        }
    })?;
    let (records, kpms): (Vec<_>, Vec<_>) = out.into_iter().unzip();

    let mut rows = Vec::new();
    for (si, &sigma) in params.sigma_list.iter().enumerate() {
        let range = si * n..(si + 1) * n;
        let exceed = kpms[range.clone()]
            .iter()
            .filter(|k| k.is_some_and(|k| k > 1.0 / sigma))
            .count();
        let valid = kpms[range.clone()].iter().filter(|k| k.is_some()).count();
        let successes = records[range.clone()].iter().filter(|r| r.success).count();
        let failures = records[range]
            .iter()
            .filter(|r| r.failure.is_some())
            .count();
        rows.push(McRow {
            sigma,
            samples: n,
            exceed,
            p_exceed: exceed as f64 / valid.max(1) as f64,
            p_ci: wilson_interval(exceed, valid),
            successes,
            success_fraction: successes as f64 / n as f64,
            success_ci: wilson_interval(successes, n),
            failures,
        });
    }
    let mut by_sigma: Vec<&McRow> = rows.iter().collect();
    by_sigma.sort_by(|a, b| b.sigma.total_cmp(&a.sigma));
    let exceed_strictly_decreasing = by_sigma.windows(2).all(|w| w[1].p_exceed < w[0].p_exceed);
    let success_nondecreasing = by_sigma
        .windows(2)
        .all(|w| w[1].success_fraction >= w[0].success_fraction);
    let nonzero: Vec<&&McRow> = by_sigma.iter().filter(|r| r.exceed > 0).collect();
    let x: Vec<f64> = nonzero.iter().map(|r| -1.0 / r.sigma).collect();
    let y: Vec<f64> = nonzero.iter().map(|r| r.p_exceed.ln()).collect();
    let log_linear_fit = fit_line(&x, &y);
    let log_linear_consistent = match log_linear_fit {
        Some((a, b)) => rows.iter().all(|row| {
            let fitted = (a * (-1.0 / row.sigma) + b).exp();
            row.p_ci.0 <= fitted && fitted <= row.p_ci.1
        }),
        None => false,
    };
    let summary = McSummary {
        rows,
        calibrated_c,
        exceed_strictly_decreasing,
        log_linear_fit,
        log_linear_consistent,
        success_nondecreasing,
    };
    StudyResult::new(kind, setup, params, records, Summary::Mc(summary))
}

// ---------------------------------------------------------------- invariance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceSummary {
    pub dt_flow: f64,
    pub delta_t: f64,
    pub rho_max: f64,
    pub rho_mean: f64,
    /// Largest `ρ / (Δt² + dt_flow)`.
    pub rho_scaled_max: f64,
    /// `Σ‖res(h) - res(h/2)‖ / Σ‖res(h/2) - res(h/4)‖` over the samples; NaN
    /// unless `dt_flow/4` is a multiple of the path step.
    pub halving_factor: f64,
}

/// Residual `ρ = |P_s v(Δt) - h(θ_{Δt} ω, P_u v(Δt))|_α` after flowing
/// `ξ + h(ω, ξ)` forward by `Δt`.
pub fn invariance_residual(setup: &Setup, params: &StudyParams) -> Result<StudyResult> {
    params.validate()?;
    let kind = StudyKind::Invariance;
    let (dt, delta_t, dt_flow) = (setup.solver.dt, params.delta_t, params.dt_flow);
    let on_grid = |step: f64| {
        let sub = step / dt;
        (sub - sub.round()).abs() <= 1e-9 && sub.round() >= 1.0
    };
    if !on_grid(dt_flow) {
        return Err(invalid(
            "dt_flow",
            format!("must be a multiple of the path step {dt}"),
        ));
    }
    // The halving factor needs dt_flow/4 on the path grid too.
    let levels = if on_grid(dt_flow / 4.0) { 3 } else { 1 };
    let k = delta_t / dt_flow;
    if (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
        return Err(invalid(
            "delta_t",
            format!("must be a multiple of dt_flow = {dt_flow}"),
        ));
    }
    let mut cells = Vec::new();
    for &sigma in &params.noise_levels() {
        for j in 0..params.samples_for(sigma) {
            for &r in &params.radius_list {
                cells.push((sigma, j, r));
            }
        }
    }
    let model = &setup.model;
    let out = run_cells(params.concurrency, cells.len(), |id| {
        let (sigma, j, r) = cells[id];
        let seed = derive_seed(params.base_seed, &[kind.tag(), j as u64]);
        let rec = CellRecord::new(kind, id, seed, sigma, r);
        let run = || -> Result<(Vec<SpectralVector>, usize, f64)> {
            let ou = setup.path(seed, sigma, delta_t)?;
            let xi = setup.unit_xi().scaled(r);
            let (_, point, rep) = solve_graph(&xi, &ou, &setup.spec, model, &setup.solver)?;
            let start = xi.add(&point.h_value);
            let later = ou.shifted(delta_t)?;
            let mut res = Vec::new();
            for level in 0..levels {
                let step = dt_flow / f64::powi(2.0, level);
                let v = flow_forward(&start, &ou, &setup.spec, model, delta_t, step)?;
                let xi1 = model.project(&v, Block::Unstable)?;
                let (_, p1, _) = solve_graph(&xi1, &later, &setup.spec, model, &setup.solver)?;
                res.push(model.project(&v, Block::Stable)?.sub(&p1.h_value));
            }
            Ok((res, rep.iterations, rep.residual))
        };
        match run() {
            Ok((res, iterations, residual)) => {
                let rho = model.alpha_norm(&res[0]);
                (
                    CellRecord {
                        err: rho,
                        bound: delta_t * delta_t + dt_flow,
                        success: true,
                        iterations,
                        residual,
                        ..rec
                    },
                    (levels == 3).then(|| (res[0].sub(&res[1]).norm(), res[1].sub(&res[2]).norm())),
                )
            }
            Err(e) => (rec.failed(&e), None),
        }
    })?;
    let (records, diffs): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let ok: Vec<&CellRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let rho_max = ok.iter().map(|r| r.err).fold(0.0, f64::max);
    let rho_mean = ok.iter().map(|r| r.err).sum::<f64>() / ok.len().max(1) as f64;
    let rho_scaled_max = ok.iter().map(|r| r.err / r.bound).fold(0.0, f64::max);
    let (d1, d2) = diffs
        .iter()
        .flatten()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let summary = InvarianceSummary {
        dt_flow,
        delta_t,
        rho_max,
        rho_mean,
        rho_scaled_max,
        halving_factor: if d2 > 0.0 { d1 / d2 } else { f64::NAN },
    };
    StudyResult::new(kind, setup, params, records, Summary::Invariance(summary))
}

// ---------------------------------------------------------------- K diagnostics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDiagRow {
    pub sigma: f64,
    pub samples: usize,
    pub mean_k1_minus_1: f64,
    /// Kolmogorov–Smirnov distance of `K₁ - 1` from `Exp(1)`; diagnostic only.
    pub ks_statistic: f64,
    pub ks_warning: bool,
    pub params: TailParams,
    /// `C` in `K₂ ≤ C e^{σK^±}(1 + K^±)`, fitted on the pilot samples.
    pub c2: f64,
    pub c2_violations: usize,
    /// `C` in `K₃ ≤ C e^{(p-1)σK^±}(1 + K^±)`.
    pub c3: f64,
    pub c3_violations: usize,
    /// Ratio of the constant fitted on all samples to the pilot one.
    pub c2_drift: f64,
    pub c3_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDiagSummary {
    pub rows: Vec<KDiagRow>,
}

/// KS distance of a sample from `Exp(1)`.
pub fn ks_exponential(sample: &[f64]) -> f64 {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = 1.0 - (-v.max(0.0)).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Empirical law of `K₁ - 1` and fitted bound shapes for `K₂`, `K₃`.
pub fn k_diagnostics(setup: &Setup, params: &StudyParams) -> Result<StudyResult> {
    params.validate()?;
    if params.deterministic {
        return Err(invalid("deterministic", "tail constants need σ > 0"));
    }
    let kind = StudyKind::KDiagnostics;
    let n = params.n_samples;
    let p = setup.spec.p;
    let lu = setup.model.lambda_u();
    let cells: Vec<(f64, usize)> = params
        .sigma_list
        .iter()
        .flat_map(|&s| (0..n).map(move |j| (s, j)))
        .collect();
    let out = run_cells(params.concurrency, cells.len(), |id| {
        let (sigma, j) = cells[id];
        let seed = derive_seed(params.base_seed, &[kind.tag(), j as u64]);
        let rec = CellRecord::new(kind, id, seed, sigma, 0.0);
        let tp = TailParams::defaults(sigma, lu);
        match setup
            .path(seed, sigma, 0.0)
            .and_then(|ou| TailConstants::estimate(&ou, tp, lu, p))
        {
            Ok(k) => (
                CellRecord {
                    err: k.k1 - 1.0,
                    bound: k.kpm,
                    success: true,
                    ..rec
                },
                Some(k),
            ),
            Err(e) => (rec.failed(&e), None),
        }
    })?;
    let (records, ks): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let mut rows = Vec::new();
    for (si, &sigma) in params.sigma_list.iter().enumerate() {
        let consts: Vec<TailConstants> =
            ks[si * n..(si + 1) * n].iter().flatten().cloned().collect();
        if consts.is_empty() {
            continue;
        }
        let shape2 = |k: &TailConstants| (sigma * k.kpm).exp() * (1.0 + k.kpm);
        let shape3 = |k: &TailConstants| ((p - 1.0) * sigma * k.kpm).exp() * (1.0 + k.kpm);
        let pilot = params.pilot_samples.clamp(1, consts.len());
        let fit = |sel: &[TailConstants],
                   num: &dyn Fn(&TailConstants) -> f64,
                   den: &dyn Fn(&TailConstants) -> f64| {
            sel.iter().map(|k| num(k) / den(k)).fold(0.0, f64::max)
        };
        let c2_pilot = fit(&consts[..pilot], &|k| k.k2, &shape2);
        let c3_pilot = fit(&consts[..pilot], &|k| k.k3, &shape3);
        let c2 = 1.5 * c2_pilot;
        let c3 = 1.5 * c3_pilot;
        let c2_all = fit(&consts, &|k| k.k2, &shape2);
        let c3_all = fit(&consts, &|k| k.k3, &shape3);
        let k1m: Vec<f64> = consts.iter().map(|k| k.k1 - 1.0).collect();
        let ks_statistic = ks_exponential(&k1m);
        rows.push(KDiagRow {
            sigma,
            samples: consts.len(),
            mean_k1_minus_1: k1m.iter().sum::<f64>() / k1m.len() as f64,
            ks_statistic,
            ks_warning: ks_statistic > 0.1,
            params: consts[0].params,
            c2,
            c2_violations: consts.iter().filter(|k| k.k2 > c2 * shape2(k)).count(),
            c3,
            c3_violations: consts.iter().filter(|k| k.k3 > c3 * shape3(k)).count(),
            c2_drift: if c2_pilot > 0.0 {
                c2_all / c2_pilot
            } else {
                1.0
            },
            c3_drift: if c3_pilot > 0.0 {
                c3_all / c3_pilot
            } else {
                1.0
            },
        });
    }
    StudyResult::new(
        kind,
        setup,
        params,
        records,
        Summary::KDiag(KDiagSummary { rows }),
    )
}

// ---------------------------------------------------------------- ladder

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub sigma: f64,
    pub r: f64,
    pub h_minus_hbar1: f64,
    pub hbar1_minus_hbar2: f64,
    pub h_minus_hbar2: f64,
    pub hbar2_minus_hbar3_over_r2: f64,
    pub hbar3_minus_shape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderSummary {
    pub rows: Vec<LadderRow>,
    /// `(max - min)/max` of `‖ħ₂ - ħ₃‖/r²` per noise level (0 when all vanish).
    pub hbar23_variation: Vec<(f64, f64)>,
    /// `‖h - ħ₂‖` decreases strictly with `r`, per noise level.
    pub h_hbar2_monotone: Vec<(f64, bool)>,
}

/// Distances along `h → ħ₁(0) → ħ₂ → ħ₃ → (L_s - pL_u)^{-1}P_s(ξ^p)`, in the
/// conjugated frame (the last step carries the factor `e^{(p-1)z(0)}`).
pub fn ladder(setup: &Setup, params: &StudyParams) -> Result<StudyResult> {
    params.validate()?;
    let kind = StudyKind::Ladder;
    let mut cells = Vec::new();
    for &sigma in &params.noise_levels() {
        for j in 0..params.samples_for(sigma) {
            for &r in &params.radius_list {
                cells.push((sigma, j, r));
            }
        }
    }
    let (model, spec, cfg) = (&setup.model, &setup.spec, &setup.solver);
    let out = run_cells(params.concurrency, cells.len(), |id| {
        let (sigma, j, r) = cells[id];
        let seed = derive_seed(params.base_seed, &[kind.tag(), j as u64]);
        let rec = CellRecord::new(kind, id, seed, sigma, r);
        let run = || -> Result<(LadderRow, usize, f64)> {
            let ou = setup.path(seed, sigma, 0.0)?;
            let xi = setup.unit_xi().scaled(r);
            let (v, point, rep) = solve_graph(&xi, &ou, spec, model, cfg)?;
            let h1 = hbar1(&v, &ou, spec, model, cfg)?;
            let h2 = hbar2(&xi, &ou, spec, model, cfg)?;
            let h3 = hbar3(&xi, &ou, spec, model, cfg)?;
            let cf = closed_form_shape(&xi, spec, model)?.scaled(((spec.p - 1.0) * ou.z0()).exp());
            let h = &point.h_value;
            Ok((
                LadderRow {
                    sigma,
                    r,
                    h_minus_hbar1: h.sub(&h1).norm(),
                    hbar1_minus_hbar2: h1.sub(&h2).norm(),
                    h_minus_hbar2: h.sub(&h2).norm(),
                    hbar2_minus_hbar3_over_r2: if r > 0.0 {
                        h2.sub(&h3).norm() / (r * r)
                    } else {
                        0.0
                    },
                    hbar3_minus_shape: h3.sub(&cf).norm(),
                },
                rep.iterations,
                rep.residual,
            ))
        };
        match run() {
            Ok((row, iterations, residual)) => (
                CellRecord {
                    err: row.h_minus_hbar2,
                    bound: row.hbar2_minus_hbar3_over_r2,
                    success: true,
                    iterations,
                    residual,
                    ..rec
                },
                Some(row),
            ),
            Err(e) => (rec.failed(&e), None),
        }
    })?;
    let (records, rows): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let rows: Vec<LadderRow> = rows.into_iter().flatten().collect();
    let mut variation = Vec::new();
    let mut monotone = Vec::new();
    for &sigma in &params.noise_levels() {
        let mut sel: Vec<&LadderRow> = rows
            .iter()
            .filter(|row| row.sigma == sigma && row.r > 0.0)
            .collect();
        let ratios: Vec<f64> = sel
            .iter()
            .map(|row| row.hbar2_minus_hbar3_over_r2)
            .collect();
        let max = ratios.iter().cloned().fold(0.0, f64::max);
        let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        variation.push((sigma, if max > 0.0 { (max - min) / max } else { 0.0 }));
        sel.sort_by(|a, b| a.r.total_cmp(&b.r));
        // With several samples per radius take the worst one.
        let mut by_r: Vec<(f64, f64)> = Vec::new();
        for row in sel {
            match by_r.last_mut() {
                Some(last) if last.0 == row.r => last.1 = last.1.max(row.h_minus_hbar2),
                _ => by_r.push((row.r, row.h_minus_hbar2)),
            }
        }
        monotone.push((sigma, by_r.windows(2).all(|w| w[0].1 < w[1].1)));
    }
    let summary = LadderSummary {
        rows,
        hbar23_variation: variation,
        h_hbar2_monotone: monotone,
    };
    StudyResult::new(kind, setup, params, records, Summary::Ladder(summary))
}

// ---------------------------------------------------------------- contraction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionSummary {
    pub solves: usize,
    pub converged: usize,
    /// Converged solves meeting both the contraction and the iteration bound.
    pub certified: usize,
    pub max_contraction: f64,
    pub sc: f64,
}

/// Random solves at `|ξ|_α` uniform in `(0.1, 1)·chart_factor·R`, with
/// `ω ≡ 0` and with noise at every `σ` of the list. A cell succeeds when the
/// observed contraction is at most `SC + 0.05` and the iteration count is at
/// most `⌈log(tol/‖v¹‖)/log SC⌉ + 2`; the bound is stored per cell.
pub fn contraction_audit(setup: &Setup, params: &StudyParams) -> Result<StudyResult> {
    params.validate()?;
    let kind = StudyKind::Contraction;
    let mut levels = vec![0.0];
    if !params.deterministic {
        levels.extend(params.sigma_list.iter().cloned());
    }
    let n = params.n_samples;
    let cells: Vec<(f64, usize)> = levels
        .iter()
        .flat_map(|&s| (0..n).map(move |j| (s, j)))
        .collect();
    let sc = contraction_constant(&setup.spec, &setup.model, &setup.solver)?;
    let (model, spec, cfg) = (&setup.model, &setup.spec, &setup.solver);
    let records = run_cells(params.concurrency, cells.len(), |id| {
        let (sigma, j) = cells[id];
        let seed = derive_seed(params.base_seed, &[kind.tag(), j as u64, sigma.to_bits()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = (0.1 + 0.9 * rng.random::<f64>()) * cfg.chart_factor * spec.radius;
        let mut dir: Vec<f64> = (0..model.mode_count())
            .map(|k| {
                if k < model.split_index() {
                    rng.random::<f64>() - 0.5
                } else {
                    0.0
                }
            })
            .collect();
        let norm = model.alpha_norm(&SpectralVector::new(dir.clone()));
        dir.iter_mut().for_each(|c| *c *= r / norm);
        let xi = SpectralVector::new(dir);
        let rec = CellRecord::new(kind, id, seed, sigma, r);
        let run = || {
            let ou = setup.path(seed, sigma, 0.0)?;
            solve_graph(&xi, &ou, spec, model, cfg)
        };
        match run() {
            Ok((_, _, rep)) => {
                let bound = ((cfg.tolerance / rep.initial_increment).ln() / rep.sc.ln())
                    .ceil()
                    .max(0.0)
                    + 2.0;
                CellRecord {
                    err: rep.contraction,
                    bound,
                    success: rep.contraction <= rep.sc + 0.05 && rep.iterations as f64 <= bound,
                    iterations: rep.iterations,
                    residual: rep.residual,
                    ..rec
                }
            }
            Err(e) => rec.failed(&e),
        }
    })?;
    let converged = records.iter().filter(|r| r.failure.is_none()).count();
    let summary = ContractionSummary {
        solves: records.len(),
        converged,
        certified: records.iter().filter(|r| r.success).count(),
        max_contraction: records
            .iter()
            .filter(|r| r.failure.is_none())
            .map(|r| r.err)
            .fold(0.0, f64::max),
        sc,
    };
    StudyResult::new(kind, setup, params, records, Summary::Contraction(summary))
}

/// Dispatch by kind.
pub fn run_study(kind: StudyKind, setup: &Setup, params: &StudyParams) -> Result<StudyResult> {
    match kind {
        StudyKind::ShapeStudy => shape_error_sweep(setup, params),
        StudyKind::McProbability => mc_probability(setup, params),
        StudyKind::Invariance => invariance_residual(setup, params),
        StudyKind::KDiagnostics => k_diagnostics(setup, params),
        StudyKind::Ladder => ladder(setup, params),
        StudyKind::Contraction => contraction_audit(setup, params),
    }
}

/// Fractions of paths with `|z(±T)|/T < 0.1` and `|Z(±T)/T| < 0.1`.
pub fn ou_long_time_check(
    sigma: f64,
    horizon: f64,
    dt: f64,
    n: usize,
    base_seed: u64,
    concurrency: usize,
) -> Result<(f64, f64)> {
    let t_ou = 40.0;
    let hits = run_cells(concurrency, n, |j| -> Result<(bool, bool)> {
        let seed = derive_seed(base_seed, &[0x4f55, j as u64]);
        let path = WienerPath::sample(seed, -(horizon + t_ou), horizon, dt)?;
        let ou = OuTrajectory::from_path(&path, sigma, t_ou)?;
        let (a, b) = ou.span(-horizon, horizon)?;
        let z_ok = ou.z()[a].abs() / horizon < 0.1 && ou.z()[b].abs() / horizon < 0.1;
        let zint_ok = (ou.zint()[a] / horizon).abs() < 0.1 && (ou.zint()[b] / horizon).abs() < 0.1;
        Ok((z_ok, zint_ok))
    })?;
    let mut z = 0;
    let mut zi = 0;
    for h in hits {
        let (a, b) = h?;
        z += a as usize;
        zi += b as usize;
    }
    Ok((z as f64 / n as f64, zi as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinear::choose_truncation_radius;

    fn setup(target: f64, chart: f64) -> Setup {
        let model = SpectralModel::build_sine(8, 3.0, 0.0, 32).unwrap();
        let mut solver = LpSolverConfig::defaults(&model);
        solver.chart_factor = chart;
        let base = NonlinearitySpec::new(2.0, false, 1.0).unwrap();
        let ch = choose_truncation_radius(target, &base, &model, solver.beta, 1000, 1).unwrap();
        Setup {
            spec: base
                .with_radius(ch.radius)
                .unwrap()
                .with_lipschitz(ch.lipschitz),
            model,
            solver,
            t_ou: 40.0,
        }
    }

    #[test]
    fn wilson_and_fit_helpers() {
        let (lo, hi) = wilson_interval(0, 1000);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.003 && hi < 0.004);
        let (lo, hi) = wilson_interval(500, 1000);
        assert!(lo < 0.5 && hi > 0.5 && hi - lo < 0.07);
        let (a, b) = fit_line(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((a - 2.0).abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
        assert!(fit_line(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn ks_against_exact_quantiles() {
        let n = 1000;
        let sample: Vec<f64> = (0..n)
            .map(|i| -(1.0 - (i as f64 + 0.5) / n as f64).ln())
            .collect();
        assert!(ks_exponential(&sample) <= 0.5 / n as f64 + 1e-12);
        assert!(ks_exponential(&[0.0; 10]) > 0.99);
    }

    #[test]
    fn zero_radius_cell_has_zero_error() {
        let s = setup(0.5, 2.0);
        let params = StudyParams {
            radius_list: vec![0.0, 0.05],
            deterministic: true,
            ..StudyParams::default()
        };
        let res = shape_error_sweep(&s, &params).unwrap();
        assert_eq!(res.records[0].err, 0.0);
        assert_eq!(res.failures, 0);
    }

    #[test]
    fn zero_xi_has_zero_invariance_residual() {
        let mut s = setup(0.5, 1.0);
        s.solver.dt = 0.005;
        let params = StudyParams {
            radius_list: vec![0.0],
            sigma_list: vec![0.1],
            n_samples: 2,
            ..StudyParams::default()
        };
        let res = invariance_residual(&s, &params).unwrap();
        assert!(res.records.iter().all(|r| r.err == 0.0));
    }

    #[test]
    fn mc_rejects_sigma_above_ceiling() {
        let s = setup(0.5, 0.5);
        assert_eq!(s.sigma_ceiling(), 1.5);
        let params = StudyParams {
            sigma_list: vec![1.6],
            ..StudyParams::default()
        };
        assert!(mc_probability(&s, &params).is_err());
    }

    #[test]
    fn csv_has_the_declared_columns() {
        let s = setup(0.5, 2.0);
        let params = StudyParams {
            deterministic: true,
            ..StudyParams::default()
        };
        let res = shape_error_sweep(&s, &params).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "study,cell_id,seed,sigma,r,err,bound,success,iterations,residual"
        );
        assert_eq!(text.lines().count(), 4);
    }
}
