//! Lyapunov–Perron construction of the random unstable manifold of
//! `dv/dt = -Lv + z(θ_t ω) v + e^{-z} F^(R)(e^{z} v)`, the approximation
//! ladder `ħ₁, ħ₂, ħ₃`, the closed-form leading term
//! `(L_s - pL_u)^{-1} P_s(ξ^p)`, the conjugation `T(ω, x) = x e^{-z(ω)}` and
//! the deterministic (`z ≡ 0`) counterpart.
//!
//! Time integrals are evaluated by a product trapezoid rule: on each panel
//! `Z` is linear, the exponential kernel is integrated exactly and the
//! nonlinear term is interpolated linearly. Convolutions are accumulated by
//! one-step recursions, which keeps every solve `O(n·M·G)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nonlinear::{
    alpha_norm_raw, power_coeffs, power_f, sc_constant, truncated_coeffs, NonlinearitySpec,
};
use crate::quadrature::{composite_gauss, w_left, w_right};
use crate::spectral::{Block, SpectralModel, SpectralVector};
use crate::stochastic::OuTrajectory;

/// Fixed-point solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpSolverConfig {
    pub beta: f64,
    pub horizon: f64,
    pub dt: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub target_sc: f64,
    /// Accept `|ξ|_α ≤ chart_factor · R`.
    pub chart_factor: f64,
}

impl LpSolverConfig {
    /// `β` at the centre of the gap, `T = 30/(λ_s - β)`, `dt = 0.01`.
    pub fn defaults(model: &SpectralModel) -> Self {
        let beta = 0.5 * (model.lambda_u() + model.lambda_s());
        LpSolverConfig {
            beta,
            horizon: 30.0 / (model.lambda_s() - beta),
            dt: 0.01,
            max_iterations: 200,
            tolerance: 1e-12,
            target_sc: 0.5,
            chart_factor: 0.5,
        }
    }

    pub fn validate(&self, model: &SpectralModel) -> Result<()> {
        let (lu, ls) = (model.lambda_u(), model.lambda_s());
        if !(self.beta > lu && self.beta < ls) {
            return Err(invalid(
                "beta",
                format!("need λ_u < β < λ_s, got {} with ({lu}, {ls})", self.beta),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        if !(self.horizon >= self.dt) {
            return Err(invalid("horizon", "must be at least one step"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be positive"));
        }
        if !(self.target_sc > 0.0 && self.target_sc < 1.0) {
            return Err(invalid("target_sc", "must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations", "must be positive"));
        }
        if !(self.chart_factor > 0.0) {
            return Err(invalid("chart_factor", "must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

/// Backward trajectory on `t_i = -T + i·dt`, `i = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    dt: f64,
    modes: usize,
    data: Vec<f64>,
}

impl TrajectorySegment {
    pub fn zeros(steps: usize, modes: usize, dt: f64) -> Self {
        TrajectorySegment {
            dt,
            modes,
            data: vec![0.0; (steps + 1) * modes],
        }
    }

    pub fn from_nodes(nodes: &[SpectralVector], dt: f64) -> Result<Self> {
        let modes = nodes.first().map(|v| v.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(nodes.len() * modes);
        for v in nodes {
            if v.len() != modes {
                return Err(Error::DimensionMismatch {
                    expected: modes,
                    got: v.len(),
                });
            }
            data.extend_from_slice(v.coeffs());
        }
        Ok(TrajectorySegment { dt, modes, data })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.data.len() / self.modes - 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        (i as f64 - self.steps() as f64) * self.dt
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.data[i * self.modes..(i + 1) * self.modes]
    }

    pub fn node_vector(&self, i: usize) -> SpectralVector {
        SpectralVector::new(self.node(i).to_vec())
    }

    /// `v(0)`.
    pub fn last(&self) -> SpectralVector {
        self.node_vector(self.steps())
    }

    pub fn sub(&self, other: &Self) -> Self {
        TrajectorySegment {
            dt: self.dt,
            modes: self.modes,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn project(&self, model: &SpectralModel, block: Block) -> Self {
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(self.modes) {
            for (k, c) in chunk.iter_mut().enumerate() {
                if !model.in_block(k, block) {
                    *c = 0.0;
                }
            }
        }
        out
    }
}

/// Coordinates in which a graph point is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Conjugated `v` coordinates.
    Random,
    /// Original `u` coordinates: `ξ + e^{z(ω)} h(ω, e^{-z(ω)} ξ)`.
    RandomOriginal,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub xi: SpectralVector,
    #[serde(rename = "h")]
    pub h_value: SpectralVector,
    pub frame: Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// Largest ratio of successive increment norms above the rounding floor.
    pub contraction: f64,
    /// `‖v^{n+1} - v^n‖_{C_β}` at exit.
    pub residual: f64,
    pub sc: f64,
    /// Bound on the neglected `(-∞, -T]` part of the stable integral.
    pub tail_bound: f64,
    /// `‖v¹ - v⁰‖_{C_β}`.
    pub initial_increment: f64,
    /// `‖v*‖_{C_β}`.
    pub solution_norm: f64,
    /// Whether `|e^{z} v|_α > R` at some node.
    pub cutoff_active: bool,
}

/// Slices of an OU trajectory aligned with `[-T, 0]`.
struct Window<'a> {
    z: &'a [f64],
    zint: &'a [f64],
    h: f64,
    n: usize,
}

impl<'a> Window<'a> {
    fn new(ou: &'a OuTrajectory, cfg: &LpSolverConfig) -> Result<Self> {
        if (ou.dt() - cfg.dt).abs() > 1e-12 * cfg.dt {
            return Err(invalid(
                "dt",
                format!(
                    "solver step {} differs from the path step {}",
                    cfg.dt,
                    ou.dt()
                ),
            ));
        }
        let n = cfg.steps();
        let h = ou.dt();
        let (a, b) = ou.span(-(n as f64) * h, 0.0)?;
        Ok(Window {
            z: &ou.z()[a..=b],
            zint: &ou.zint()[a..=b],
            h,
            n,
        })
    }

    fn time(&self, i: usize) -> f64 {
        (i as f64 - self.n as f64) * self.h
    }
}

fn check_xi(xi: &SpectralVector, model: &SpectralModel) -> Result<()> {
    if xi.len() != model.mode_count() {
        return Err(Error::DimensionMismatch {
            expected: model.mode_count(),
            got: xi.len(),
        });
    }
    let stray = xi.coeffs()[model.split_index()..]
        .iter()
        .fold(0.0f64, |a, b| a.max(b.abs()));
    if stray > 0.0 {
        return Err(Error::NotUnstable(stray));
    }
    Ok(())
}

fn check_traj(traj: &TrajectorySegment, w: &Window, modes: usize) -> Result<()> {
    if traj.modes != modes {
        return Err(Error::DimensionMismatch {
            expected: modes,
            got: traj.modes,
        });
    }
    if traj.steps() != w.n {
        return Err(Error::DimensionMismatch {
            expected: w.n + 1,
            got: traj.steps() + 1,
        });
    }
    Ok(())
}

/// `g_i = e^{-z_i} F(e^{z_i} v_i)`, truncated or not.
fn nonlinear_nodes(
    traj: &TrajectorySegment,
    w: &Window,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    truncated: bool,
) -> Vec<f64> {
    let m = model.mode_count();
    let mut g = vec![0.0; traj.data.len()];
    let mut buf = vec![0.0; m];
    for i in 0..=w.n {
        let ez = w.z[i].exp();
        for (b, c) in buf.iter_mut().zip(traj.node(i)) {
            *b = ez * c;
        }
        let f = if truncated {
            truncated_coeffs(&buf, spec, model)
        } else {
            power_coeffs(&buf, spec, model)
        };
        let emz = 1.0 / ez;
        for (dst, src) in g[i * m..(i + 1) * m].iter_mut().zip(&f) {
            *dst = emz * src;
        }
    }
    g
}

/// Stable modes of `∫_{-T}^{t_i} e^{-λ_k(t_i - r) + Z(t_i) - Z(r)} g(r) dr`
/// written into `out` for every node.
fn stable_convolution(g: &[f64], w: &Window, model: &SpectralModel, out: &mut [f64]) {
    let m = model.mode_count();
    let h = w.h;
    for k in model.split_index()..m {
        let lam = model.eigenvalues()[k];
        let mut acc = 0.0;
        out[k] = 0.0;
        for i in 0..w.n {
            let dz = w.zint[i + 1] - w.zint[i];
            let x = lam * h - dz;
            acc =
                (-x).exp() * acc + h * (w_right(x) * g[i * m + k] + w_left(x) * g[(i + 1) * m + k]);
            out[(i + 1) * m + k] = acc;
        }
    }
}

/// Stable modes of the same integral at `t = 0` only.
fn stable_convolution_at_zero(g: &[f64], w: &Window, model: &SpectralModel) -> SpectralVector {
    let m = model.mode_count();
    let mut out = vec![0.0; (w.n + 1) * m];
    stable_convolution(g, w, model, &mut out);
    SpectralVector::new(out[w.n * m..].to_vec())
}

/// Unstable modes of `e^{-λ_k t_i + Z(t_i)} ξ_k - ∫_{t_i}^0 e^{-λ_k(t_i - r) + Z(t_i) - Z(r)} g(r) dr`.
fn unstable_part(g: &[f64], xi: &[f64], w: &Window, model: &SpectralModel, out: &mut [f64]) {
    let m = model.mode_count();
    let h = w.h;
    for k in 0..model.split_index() {
        let lam = model.eigenvalues()[k];
        let mut acc = 0.0;
        out[w.n * m + k] = xi[k];
        for i in (0..w.n).rev() {
            let dz = w.zint[i + 1] - w.zint[i];
            let x = dz - lam * h;
            acc =
                (-x).exp() * acc + h * (w_left(x) * g[i * m + k] + w_right(x) * g[(i + 1) * m + k]);
            out[i * m + k] = (-lam * w.time(i) + w.zint[i]).exp() * xi[k] - acc;
        }
    }
}

/// `e^{-L_u t + Z(t)} ξ` on the solver grid.
fn semigroup_nodes(xi: &[f64], w: &Window, model: &SpectralModel) -> TrajectorySegment {
    let m = model.mode_count();
    let mut seg = TrajectorySegment::zeros(w.n, m, w.h);
    for i in 0..=w.n {
        let t = w.time(i);
        for k in 0..model.split_index() {
            seg.data[i * m + k] = if i == w.n {
                xi[k]
            } else {
                (-model.eigenvalues()[k] * t + w.zint[i]).exp() * xi[k]
            };
        }
    }
    seg
}

fn cbeta(traj: &TrajectorySegment, beta: f64, w: &Window, model: &SpectralModel) -> f64 {
    (0..=w.n)
        .map(|i| (beta * w.time(i) - w.zint[i]).exp() * alpha_norm_raw(model, traj.node(i)))
        .fold(0.0, f64::max)
}

/// `max_i e^{β t_i - Z(t_i)} |v(t_i)|_α`.
pub fn cbeta_norm(
    traj: &TrajectorySegment,
    beta: f64,
    ou: &OuTrajectory,
    model: &SpectralModel,
) -> Result<f64> {
    let steps = traj.steps();
    let cfg = LpSolverConfig {
        horizon: steps as f64 * traj.dt,
        dt: traj.dt,
        ..LpSolverConfig::defaults(model)
    };
    let w = Window::new(ou, &cfg)?;
    check_traj(traj, &w, model.mode_count())?;
    Ok(cbeta(traj, beta, &w, model))
}

fn apply_window(
    traj: &TrajectorySegment,
    xi: &[f64],
    w: &Window,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
) -> TrajectorySegment {
    let g = nonlinear_nodes(traj, w, spec, model, true);
    let mut out = TrajectorySegment::zeros(w.n, model.mode_count(), w.h);
    stable_convolution(&g, w, model, &mut out.data);
    unstable_part(&g, xi, w, model, &mut out.data);
    out
}

/// One application of the Lyapunov–Perron operator `J(v, ξ)`.
pub fn lp_apply(
    traj: &TrajectorySegment,
    xi: &SpectralVector,
    ou: &OuTrajectory,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<TrajectorySegment> {
    cfg.validate(model)?;
    check_xi(xi, model)?;
    let w = Window::new(ou, cfg)?;
    check_traj(traj, &w, model.mode_count())?;
    Ok(apply_window(traj, xi.coeffs(), &w, spec, model))
}

/// `SC` of a spec with recorded `l_F`.
pub fn contraction_constant(
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<f64> {
    let l_f = spec
        .lipschitz
        .ok_or_else(|| invalid("lipschitz", "l_F must be estimated before solving"))?;
    sc_constant(
        1.0,
        l_f,
        model.alpha(),
        cfg.beta,
        model.lambda_u(),
        model.lambda_s(),
    )
}

/// Picard iteration `v^{n+1} = J(v^n, ξ)` from `v⁰ = 0`; returns `v*`, the
/// graph point `h(ω, ξ) = P_s v*(0)` and the iteration report.
pub fn solve_graph(
    xi: &SpectralVector,
    ou: &OuTrajectory,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<(TrajectorySegment, ManifoldPoint, FixedPointReport)> {
    cfg.validate(model)?;
    check_xi(xi, model)?;
    let sc = contraction_constant(spec, model, cfg)?;
    if sc >= 1.0 {
        return Err(Error::NotContracting(sc));
    }
    let norm = model.alpha_norm(xi);
    let chart = cfg.chart_factor * spec.radius;
    if norm > chart {
        return Err(Error::OutsideChart {
            norm,
            radius: chart,
        });
    }
    let w = Window::new(ou, cfg)?;
    let m = model.mode_count();

    let mut v = TrajectorySegment::zeros(w.n, m, w.h);
    let mut prev_inc = f64::NAN;
    let mut first_inc = 0.0;
    let mut contraction = 0.0f64;
    let mut iterations = 0;
    let mut inc = f64::INFINITY;
    while iterations < cfg.max_iterations {
        let next = apply_window(&v, xi.coeffs(), &w, spec, model);
        inc = cbeta(&next.sub(&v), cfg.beta, &w, model);
        iterations += 1;
        if iterations == 1 {
            first_inc = inc;
        } else if prev_inc > 0.0 && inc > 1e-12 * first_inc {
            contraction = contraction.max(inc / prev_inc);
        }
        prev_inc = inc;
        v = next;
        if inc < cfg.tolerance {
            break;
        }
    }
    if !(inc < cfg.tolerance) {
        return Err(Error::NoConvergence {
            iterations,
            increment: inc,
        });
    }

    let solution_norm = cbeta(&v, cfg.beta, &w, model);
    let l_f = spec.lipschitz.unwrap_or(0.0);
    let gap = model.lambda_s() - cfg.beta;
    let tail_bound = l_f * solution_norm * (-gap * cfg.horizon).exp() / gap;
    let cutoff_active =
        (0..=w.n).any(|i| w.z[i].exp() * alpha_norm_raw(model, v.node(i)) > spec.radius);
    let h_value = model.project(&v.last(), Block::Stable)?;
    let point = ManifoldPoint {
        xi: xi.clone(),
        h_value,
        frame: Frame::Random,
    };
    let report = FixedPointReport {
        iterations,
        contraction,
        residual: inc,
        sc,
        tail_bound,
        initial_increment: first_inc,
        solution_norm,
        cutoff_active,
    };
    Ok((v, point, report))
}

/// `ħ₁(0)`: the stable integral with `v` replaced by `P_u v`.
pub fn hbar1(
    v: &TrajectorySegment,
    ou: &OuTrajectory,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<SpectralVector> {
    let w = Window::new(ou, cfg)?;
    check_traj(v, &w, model.mode_count())?;
    let vu = v.project(model, Block::Unstable);
    let g = nonlinear_nodes(&vu, &w, spec, model, true);
    Ok(stable_convolution_at_zero(&g, &w, model))
}

fn hbar_semigroup(
    xi: &SpectralVector,
    ou: &OuTrajectory,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
    truncated: bool,
) -> Result<SpectralVector> {
    check_xi(xi, model)?;
    let w = Window::new(ou, cfg)?;
    let nodes = semigroup_nodes(xi.coeffs(), &w, model);
    let g = nonlinear_nodes(&nodes, &w, spec, model, truncated);
    Ok(stable_convolution_at_zero(&g, &w, model))
}

/// `ħ₂`: stable integral along the linear orbit `e^{-L_u r + Z(r)} ξ`.
pub fn hbar2(
    xi: &SpectralVector,
    ou: &OuTrajectory,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<SpectralVector> {
    hbar_semigroup(xi, ou, spec, model, cfg, true)
}

/// `ħ₃`: as `ħ₂` with the untruncated `F`.
pub fn hbar3(
    xi: &SpectralVector,
    ou: &OuTrajectory,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<SpectralVector> {
    hbar_semigroup(xi, ou, spec, model, cfg, false)
}

/// `e^{-L_u t + Z(t)} ξ` on the solver grid.
pub fn semigroup_trajectory(
    xi: &SpectralVector,
    ou: &OuTrajectory,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<TrajectorySegment> {
    check_xi(xi, model)?;
    let w = Window::new(ou, cfg)?;
    Ok(semigroup_nodes(xi.coeffs(), &w, model))
}

/// `(L_s - pL_u)^{-1} P_s(ξ^p)`. With one unstable mode this is the
/// resolvent `(L_s + μ)^{-1}`, `μ = -pλ_u`; otherwise the integral
/// `∫_{-∞}^0 e^{L_s r} P_s[(e^{-L_u r} ξ)^p] dr` is evaluated by quadrature.
pub fn closed_form_shape(
    xi: &SpectralVector,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
) -> Result<SpectralVector> {
    check_xi(xi, model)?;
    if model.split_index() == 1 {
        let f = power_f(xi, spec, model)?;
        let fs = model.project(&f, Block::Stable)?;
        model.shifted_stable_resolvent(&fs, -spec.p * model.lambda_u())
    } else {
        closed_form_quadrature(xi, spec, model)
    }
}

/// Truncation length and panel count of [`closed_form_quadrature`].
pub fn closed_form_rule(spec: &NonlinearitySpec, model: &SpectralModel) -> (f64, usize) {
    let slow = model.lambda_s() - spec.p * model.lambda_u();
    let fast = model.eigenvalues()[model.mode_count() - 1] + spec.p * model.eigenvalues()[0].abs();
    let length = 42.0 / slow;
    let panels = (length * fast / 4.0).ceil().max(1.0) as usize;
    (length, panels)
}

/// Gauss–Legendre evaluation of `∫_{-L}^0 e^{L_s r} P_s[(e^{-L_u r} ξ)^p] dr`
/// with `L = 42/(λ_s - pλ_u)`; the neglected tail is below
/// `e^{-42} sup‖P_s(ξ^p)‖/(λ_s - pλ_u)`.
pub fn closed_form_quadrature(
    xi: &SpectralVector,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
) -> Result<SpectralVector> {
    check_xi(xi, model)?;
    let (length, panels) = closed_form_rule(spec, model);
    let m = model.mode_count();
    let lam = model.eigenvalues();
    let mut acc = vec![0.0; m];
    let mut u = vec![0.0; m];
    for (r, wt) in composite_gauss(-length, 0.0, panels, 16) {
        for k in 0..model.split_index() {
            u[k] = (-lam[k] * r).exp() * xi.coeffs()[k];
        }
        let f = power_f(&SpectralVector::new(u.clone()), spec, model)?;
        for k in model.split_index()..m {
            acc[k] += wt * (lam[k] * r).exp() * f.coeffs()[k];
        }
    }
    Ok(SpectralVector::new(acc))
}

/// `T(ω, x) = x e^{-z(ω)}`.
pub fn transform_t(x: &SpectralVector, z0: f64) -> SpectralVector {
    x.scaled((-z0).exp())
}

/// `T^{-1}(ω, x) = x e^{z(ω)}`.
pub fn transform_t_inv(x: &SpectralVector, z0: f64) -> SpectralVector {
    x.scaled(z0.exp())
}

/// Graph point in original coordinates: `e^{z(0)} h(ω, e^{-z(0)} ξ)`.
pub fn random_graph_point(
    xi: &SpectralVector,
    ou: &OuTrajectory,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<(ManifoldPoint, FixedPointReport)> {
    let z0 = ou.z0();
    let (_, point, report) = solve_graph(&transform_t(xi, z0), ou, spec, model, cfg)?;
    Ok((
        ManifoldPoint {
            xi: xi.clone(),
            h_value: transform_t_inv(&point.h_value, z0),
            frame: Frame::RandomOriginal,
        },
        report,
    ))
}

/// Graph of the deterministic equation: [`solve_graph`] on `ω ≡ 0`.
pub fn deterministic_graph(
    xi: &SpectralVector,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    cfg: &LpSolverConfig,
) -> Result<(TrajectorySegment, ManifoldPoint, FixedPointReport)> {
    let ou = OuTrajectory::deterministic(-(cfg.steps() as f64) * cfg.dt, 0.0, cfg.dt)?;
    let (traj, mut point, report) = solve_graph(xi, &ou, spec, model, cfg)?;
    point.frame = Frame::Deterministic;
    Ok((traj, point, report))
}

/// Exponential Euler for `dv/dt = -Lv + z v + e^{-z} F^(R)(e^{z} v)` from
/// `t = 0` to `t_end`. Each step of length `dt_flow` freezes `v` and
/// integrates the linear part and the `z`-dependence exactly on the OU grid.
pub fn flow_forward(
    v0: &SpectralVector,
    ou: &OuTrajectory,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    t_end: f64,
    dt_flow: f64,
) -> Result<SpectralVector> {
    let h = ou.dt();
    let sub = (dt_flow / h).round() as usize;
    if sub == 0 || ((sub as f64) * h - dt_flow).abs() > 1e-9 * dt_flow {
        return Err(invalid(
            "dt_flow",
            format!("must be a multiple of the path step {h}"),
        ));
    }
    let steps = (t_end / dt_flow).round() as usize;
    if ((steps as f64) * dt_flow - t_end).abs() > 1e-9 * dt_flow.max(t_end) {
        return Err(invalid(
            "t_end",
            format!("must be a multiple of dt_flow = {dt_flow}"),
        ));
    }
    let (a, _) = ou.span(0.0, t_end)?;
    let z = ou.z();
    let zint = ou.zint();
    let m = model.mode_count();
    let lam = model.eigenvalues();
    let mut v = v0.coeffs().to_vec();
    let mut g = vec![0.0; (sub + 1) * m];
    let mut buf = vec![0.0; m];
    for s in 0..steps {
        let base = a + s * sub;
        for j in 0..=sub {
            let ez = z[base + j].exp();
            for (b, c) in buf.iter_mut().zip(&v) {
                *b = ez * c;
            }
            let f = truncated_coeffs(&buf, spec, model);
            for (dst, src) in g[j * m..(j + 1) * m].iter_mut().zip(&f) {
                *dst = src / ez;
            }
        }
        for k in 0..m {
            let mut acc = v[k];
            for j in 0..sub {
                let dz = zint[base + j + 1] - zint[base + j];
                let x = lam[k] * h - dz;
                acc = (-x).exp() * acc
                    + h * (w_right(x) * g[j * m + k] + w_left(x) * g[(j + 1) * m + k]);
            }
            v[k] = acc;
        }
    }
    Ok(SpectralVector::new(v))
}
