//! TOML run configuration. Every section and key is optional; unknown keys
//! are rejected. [`RunConfig::violations`] lists every broken invariant at
//! once so a user can fix a file in one pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{Setup, StudyParams};
use crate::manifold::{contraction_constant, LpSolverConfig};
use crate::nonlinear::{
    choose_truncation_radius, lipschitz_estimate, sc_constant, NonlinearitySpec,
};
use crate::spectral::SpectralModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub mode_count: usize,
    pub shift_c: f64,
    pub alpha: f64,
    pub grid_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            mode_count: 8,
            shift_c: 3.0,
            alpha: 0.0,
            grid_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearitySection {
    pub p: f64,
    pub signed_power: bool,
    /// Fixed truncation radius; chosen from `solver.target_sc` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// Fixed Lipschitz constant of the truncated nonlinearity; sampled when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    pub lipschitz_pairs: usize,
    pub lipschitz_seed: u64,
}

impl Default for NonlinearitySection {
    fn default() -> Self {
        NonlinearitySection {
            p: 2.0,
            signed_power: false,
            radius: None,
            lipschitz: None,
            lipschitz_pairs: 2000,
            lipschitz_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub dt: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub target_sc: f64,
    pub chart_factor: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            beta: None,
            horizon: None,
            dt: 0.01,
            max_iterations: 200,
            tolerance: 1e-12,
            target_sc: 0.5,
            chart_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub sigma: f64,
    pub t_ou: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            sigma: 0.1,
            t_ou: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub sigma_list: Vec<f64>,
    pub radius_list: Vec<f64>,
    pub n_samples: usize,
    pub base_seed: u64,
    pub dt_flow: f64,
    pub delta_t: f64,
    pub pilot_samples: usize,
    pub concurrency: usize,
    pub deterministic: bool,
    /// Largest tolerated fraction of failed cells.
    pub failure_budget: f64,
}

impl Default for StudySection {
    fn default() -> Self {
        let p = StudyParams::default();
        StudySection {
            sigma_list: p.sigma_list,
            radius_list: p.radius_list,
            n_samples: p.n_samples,
            base_seed: p.base_seed,
            dt_flow: p.dt_flow,
            delta_t: p.delta_t,
            pilot_samples: p.pilot_samples,
            concurrency: p.concurrency,
            deterministic: p.deterministic,
            failure_budget: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSection {
    /// Unstable coordinates of `ξ`.
    pub xi: Vec<f64>,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for SolveSection {
    fn default() -> Self {
        SolveSection {
            xi: vec![0.01],
            seed: 0,
            deterministic: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub nonlinearity: NonlinearitySection,
    pub solver: SolverSection,
    pub noise: NoiseSection,
    pub study: StudySection,
    pub solve: SolveSection,
}

/// A broken invariant: which rule and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub rule: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.rule, self.message)
    }
}

fn violation(rule: &str, message: impl Into<String>) -> Violation {
    Violation {
        rule: rule.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn study_params(&self) -> StudyParams {
        let s = &self.study;
        StudyParams {
            sigma_list: s.sigma_list.clone(),
            radius_list: s.radius_list.clone(),
            n_samples: s.n_samples,
            base_seed: s.base_seed,
            dt_flow: s.dt_flow,
            delta_t: s.delta_t,
            pilot_samples: s.pilot_samples,
            concurrency: s.concurrency,
            deterministic: s.deterministic,
        }
    }

    fn model(&self) -> Result<SpectralModel> {
        let m = &self.model;
        SpectralModel::build_sine(m.mode_count, m.shift_c, m.alpha, m.grid_size)
    }

    fn solver(&self, model: &SpectralModel) -> LpSolverConfig {
        let mut cfg = LpSolverConfig::defaults(model);
        let s = &self.solver;
        if let Some(b) = s.beta {
            cfg.beta = b;
        }
        cfg.horizon = s.horizon.unwrap_or(30.0 / (model.lambda_s() - cfg.beta));
        cfg.dt = s.dt;
        cfg.max_iterations = s.max_iterations;
        cfg.tolerance = s.tolerance;
        cfg.target_sc = s.target_sc;
        cfg.chart_factor = s.chart_factor;
        cfg
    }

    /// Every violated invariant; empty when the configuration is usable.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let model = match self.model() {
            Ok(m) => m,
            Err(e) => {
                out.push(violation("model", e.to_string()));
                return out;
            }
        };
        let nl = &self.nonlinearity;
        let spec = match NonlinearitySpec::new(nl.p, nl.signed_power, nl.radius.unwrap_or(1.0)) {
            Ok(s) => Some(s),
            Err(e) => {
                out.push(violation("nonlinearity", e.to_string()));
                None
            }
        };
        if let Some(s) = &spec {
            let need = s.required_grid(model.mode_count());
            if model.grid_size() < need {
                out.push(violation(
                    "grid",
                    format!(
                        "grid_size {} is below {need} needed for p = {}",
                        model.grid_size(),
                        s.p
                    ),
                ));
            }
        }
        let cfg = self.solver(&model);
        let (lu, ls) = (model.lambda_u(), model.lambda_s());
        if !(cfg.beta > lu && cfg.beta < ls) {
            out.push(violation(
                "λ_u < β < λ_s",
                format!("β = {} is outside ({lu}, {ls})", cfg.beta),
            ));
        }
        if let Err(e) = cfg.validate(&model) {
            if !matches!(&e, Error::InvalidParameter { name, .. } if *name == "beta") {
                out.push(violation("solver", e.to_string()));
            }
        }
        if !(self.noise.t_ou > 0.0) {
            out.push(violation("noise", "t_ou must be positive"));
        }

        let p = nl.p;
        let mut sigmas = vec![("noise.sigma", self.noise.sigma)];
        if !self.study.deterministic {
            sigmas.extend(
                self.study
                    .sigma_list
                    .iter()
                    .map(|&s| ("study.sigma_list", s)),
            );
        }
        for (field, s) in sigmas {
            if !(s > 0.0) {
                out.push(violation("σ > 0", format!("{field} has σ = {s}")));
                continue;
            }
            let gap = (ls - (p - 1.0) * lu) / p;
            if s >= gap {
                out.push(violation(
                    "σ < (λ_s - (p-1)λ_u)/p",
                    format!("{field} has σ = {s}, ceiling is {gap}"),
                ));
            }
            if s >= -lu {
                out.push(violation(
                    "σ < -λ_u",
                    format!("{field} has σ = {s}, ceiling is {}", -lu),
                ));
            }
        }

        if let Err(e) = self.study_params().validate() {
            out.push(violation("study", e.to_string()));
        }
        if !(self.study.failure_budget >= 0.0 && self.study.failure_budget <= 1.0) {
            out.push(violation("study", "failure_budget must lie in [0, 1]"));
        }
        if self.solve.xi.len() != model.split_index() {
            out.push(violation(
                "solve",
                format!(
                    "xi needs {} unstable coordinates, got {}",
                    model.split_index(),
                    self.solve.xi.len()
                ),
            ));
        }

        if let (Some(spec), true) = (spec, out.is_empty()) {
            if let Err(e) = self.sc_check(&spec, &model, &cfg) {
                out.push(violation("SC < 1", e.to_string()));
            }
        }
        out
    }

    fn sc_check(
        &self,
        spec: &NonlinearitySpec,
        model: &SpectralModel,
        cfg: &LpSolverConfig,
    ) -> Result<NonlinearitySpec> {
        let nl = &self.nonlinearity;
        let resolved = match nl.radius {
            Some(r) => {
                let s = spec.with_radius(r)?;
                let l = match nl.lipschitz {
                    Some(l) => l,
                    None => lipschitz_estimate(&s, model, nl.lipschitz_pairs, nl.lipschitz_seed)?,
                };
                s.with_lipschitz(l)
            }
            None => {
                let ch = choose_truncation_radius(
                    cfg.target_sc,
                    spec,
                    model,
                    cfg.beta,
                    nl.lipschitz_pairs,
                    nl.lipschitz_seed,
                )?;
                spec.with_radius(ch.radius)?.with_lipschitz(ch.lipschitz)
            }
        };
        let sc = sc_constant(
            1.0,
            resolved.lipschitz.unwrap_or(f64::NAN),
            model.alpha(),
            cfg.beta,
            model.lambda_u(),
            model.lambda_s(),
        )?;
        if !(sc < 1.0) {
            return Err(Error::NotContracting(sc));
        }
        Ok(resolved)
    }

    /// Validates and builds the model, the truncated nonlinearity and the
    /// solver settings. Also returns the configuration with every derived
    /// value filled in.
    pub fn resolve(&self) -> Result<(Setup, RunConfig)> {
        let v = self.violations();
        if !v.is_empty() {
            let list: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            return Err(Error::Config(list.join("; ")));
        }
        let model = self.model()?;
        let nl = &self.nonlinearity;
        let cfg = self.solver(&model);
        let spec = self.sc_check(
            &NonlinearitySpec::new(nl.p, nl.signed_power, 1.0)?,
            &model,
            &cfg,
        )?;
        contraction_constant(&spec, &model, &cfg)?;
        let mut echo = self.clone();
        echo.nonlinearity.radius = Some(spec.radius);
        echo.nonlinearity.lipschitz = spec.lipschitz;
        echo.solver.beta = Some(cfg.beta);
        echo.solver.horizon = Some(cfg.horizon);
        let setup = Setup {
            model,
            spec,
            solver: cfg,
            t_ou: self.noise.t_ou,
        };
        Ok((setup, echo))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(c.violations().is_empty(), "{:?}", c.violations());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[model]\nmodes = 8\n").is_err());
        assert!(RunConfig::from_toml_str("[extra]\n").is_err());
    }

    #[test]
    fn large_sigma_reports_both_ceilings() {
        let c = RunConfig::from_toml_str("[noise]\nsigma = 2.0\n").unwrap();
        let rules: Vec<String> = c.violations().into_iter().map(|v| v.rule).collect();
        assert!(rules.contains(&"σ < -λ_u".to_string()), "{rules:?}");
        assert!(
            rules.contains(&"σ < (λ_s - (p-1)λ_u)/p".to_string()),
            "{rules:?}"
        );
    }

    #[test]
    fn several_violations_are_listed_together() {
        let text = "[solver]\nbeta = 5.0\n[noise]\nsigma = 1.8\n[study]\nn_samples = 0\n";
        let v = RunConfig::from_toml_str(text).unwrap().violations();
        assert!(v.len() >= 3, "{v:?}");
    }

    #[test]
    fn resolve_fills_derived_values() {
        let (setup, echo) = RunConfig::default().resolve().unwrap();
        assert_eq!(echo.nonlinearity.radius, Some(setup.spec.radius));
        assert_eq!(echo.solver.beta, Some(-0.5));
        assert_eq!(setup.sigma_ceiling(), 1.5);
        let again = RunConfig::from_toml_str(&echo.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, echo);
    }

    #[test]
    fn radius_with_too_large_lipschitz_fails_sc() {
        let text = "[nonlinearity]\nradius = 1.0\nlipschitz = 10.0\n";
        let v = RunConfig::from_toml_str(text).unwrap().violations();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "SC < 1");
    }
}
