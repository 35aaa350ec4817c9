//! `F(v) = v^p`, the cut-off `χ`, the truncated map `F^(R)(v) = χ(|v|_α/R) F(v)`,
//! its sampled Lipschitz constant from `E^α` into `E`, and the contraction
//! constant `SC`.

use libm::tgamma as gamma;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{SpectralModel, SpectralVector};

pub const DEFAULT_SAFETY_FACTOR: f64 = 1.25;
pub const DEFAULT_LIPSCHITZ_PAIRS: usize = 2000;
const RADIUS_LO: f64 = 1e-8;
const RADIUS_HI: f64 = 1e2;

/// Power nonlinearity with its truncation radius and Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    pub p: f64,
    /// Use `|u|^{p-1} u` instead of `u^p`.
    pub signed_power: bool,
    /// Truncation radius `R`.
    pub radius: f64,
    /// Lipschitz constant `l_F` of `F^(R)`; `None` until estimated.
    pub lipschitz: Option<f64>,
}

impl NonlinearitySpec {
    pub fn new(p: f64, signed_power: bool, radius: f64) -> Result<Self> {
        if !(p > 1.0) || !p.is_finite() {
            return Err(invalid("p", format!("must be > 1, got {p}")));
        }
        if !signed_power && (p.fract() != 0.0 || p < 2.0) {
            return Err(invalid(
                "p",
                format!("u^p needs an integer p ≥ 2 (got {p}); enable signed_power for real p"),
            ));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(invalid("radius", format!("must be positive, got {radius}")));
        }
        Ok(NonlinearitySpec {
            p,
            signed_power,
            radius,
            lipschitz: None,
        })
    }

    pub fn with_radius(self, radius: f64) -> Result<Self> {
        let mut s = Self::new(self.p, self.signed_power, radius)?;
        s.lipschitz = None;
        Ok(s)
    }

    pub fn with_lipschitz(mut self, l_f: f64) -> Self {
        self.lipschitz = Some(l_f);
        self
    }

    /// Grid points needed to evaluate the power without aliasing.
    pub fn required_grid(&self, mode_count: usize) -> usize {
        if self.signed_power {
            ((self.p + 1.0) / 2.0 * mode_count as f64).ceil() as usize
        } else {
            self.p as usize * mode_count
        }
    }

    fn check_grid(&self, model: &SpectralModel) -> Result<()> {
        let required = self.required_grid(model.mode_count());
        if model.grid_size() < required {
            return Err(Error::InsufficientGrid {
                grid: model.grid_size(),
                modes: model.mode_count(),
                p: self.p,
                required,
            });
        }
        Ok(())
    }

    fn even_power(&self) -> bool {
        !self.signed_power && (self.p as u64).is_multiple_of(2)
    }
}

/// `F(v)` on raw coefficients; assumes the grid was checked.
pub(crate) fn power_coeffs(c: &[f64], spec: &NonlinearitySpec, model: &SpectralModel) -> Vec<f64> {
    if c.iter().all(|&x| x == 0.0) {
        return vec![0.0; c.len()];
    }
    let mut f = model.synthesize(c);
    if spec.signed_power {
        let q = spec.p - 1.0;
        for u in f.iter_mut() {
            *u *= u.abs().powf(q);
        }
    } else {
        let n = spec.p as i32;
        for u in f.iter_mut() {
            *u = u.powi(n);
        }
    }
    model.analyze(&f, spec.even_power())
}

/// `F^(R)(v)` on raw coefficients.
pub(crate) fn truncated_coeffs(
    c: &[f64],
    spec: &NonlinearitySpec,
    model: &SpectralModel,
) -> Vec<f64> {
    let w = chi(alpha_norm_raw(model, c) / spec.radius);
    if w == 0.0 {
        return vec![0.0; c.len()];
    }
    let mut f = power_coeffs(c, spec, model);
    if w != 1.0 {
        f.iter_mut().for_each(|x| *x *= w);
    }
    f
}

pub(crate) fn alpha_norm_raw(model: &SpectralModel, c: &[f64]) -> f64 {
    model.alpha_norm(&SpectralVector::new(c.to_vec()))
}

fn check_dim(v: &SpectralVector, model: &SpectralModel) -> Result<()> {
    if v.len() != model.mode_count() {
        return Err(Error::DimensionMismatch {
            expected: model.mode_count(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Pseudo-spectral `F(v) = v^p`.
pub fn power_f(
    v: &SpectralVector,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
) -> Result<SpectralVector> {
    check_dim(v, model)?;
    spec.check_grid(model)?;
    Ok(SpectralVector::new(power_coeffs(v.coeffs(), spec, model)))
}

/// `F^(R)(v) = χ(|v|_α / R) F(v)`.
pub fn truncated_f(
    v: &SpectralVector,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
) -> Result<SpectralVector> {
    check_dim(v, model)?;
    spec.check_grid(model)?;
    Ok(SpectralVector::new(truncated_coeffs(
        v.coeffs(),
        spec,
        model,
    )))
}

fn psi(x: f64) -> f64 {
    if x > 0.0 {
        (-1.0 / x).exp()
    } else {
        0.0
    }
}

/// Smooth cut-off: 1 on `[0, 1]`, 0 on `[2, ∞)`.
pub fn chi(s: f64) -> f64 {
    if s <= 1.0 {
        1.0
    } else if s >= 2.0 {
        0.0
    } else {
        let a = psi(2.0 - s);
        a / (a + psi(s - 1.0))
    }
}

/// Sampled Lipschitz constant of `F^(R)` from `E^α` into `E`.
///
/// Points are drawn at unit scale in the `α`-ball of radius 2 and scaled by
/// `R`, so the same seed probes the same configurations for every `R`. Half
/// the pairs are independent, half are perturbations of relative size
/// `10^U(-4,0)`.
pub fn lipschitz_estimate(
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    Ok(DEFAULT_SAFETY_FACTOR * max_lipschitz_ratio(spec, model, n_pairs, seed)?)
}

fn random_unit_ball_point(rng: &mut ChaCha8Rng, model: &SpectralModel, radius: f64) -> Vec<f64> {
    let m = model.mode_count();
    let mut c: Vec<f64> = (0..m)
        .map(|k| {
            let g: f64 = rng.sample(StandardNormal);
            // Decaying spectra are the relevant ones; weight high modes down.
            g / (k + 1) as f64
        })
        .collect();
    let n = alpha_norm_raw(model, &c);
    if n > 0.0 {
        let target = radius * rng.random::<f64>();
        c.iter_mut().for_each(|x| *x *= target / n);
    }
    c
}

fn max_lipschitz_ratio(
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if n_pairs < 1000 {
        return Err(invalid(
            "n_pairs",
            format!("need at least 1000 pairs, got {n_pairs}"),
        ));
    }
    spec.check_grid(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.radius;
    let mut best = 0.0f64;
    let mut used = 0usize;
    for i in 0..n_pairs {
        let a = random_unit_ball_point(&mut rng, model, 2.0);
        let b = if i % 2 == 0 {
            random_unit_ball_point(&mut rng, model, 2.0)
        } else {
            let mut d = random_unit_ball_point(&mut rng, model, 1.0);
            let dn = alpha_norm_raw(model, &d);
            let eps = 10f64.powf(-4.0 * rng.random::<f64>());
            if dn > 0.0 {
                d.iter_mut().for_each(|x| *x *= eps / dn);
            }
            a.iter().zip(&d).map(|(x, y)| x + y).collect()
        };
        let va: Vec<f64> = a.iter().map(|x| x * r).collect();
        let vb: Vec<f64> = b.iter().map(|x| x * r).collect();
        let diff: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
        let den = alpha_norm_raw(model, &diff);
        if den == 0.0 {
            continue;
        }
        let fa = truncated_coeffs(&va, spec, model);
        let fb = truncated_coeffs(&vb, spec, model);
        let num = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        best = best.max(num / den);
        used += 1;
    }
    if used == 0 {
        return Err(Error::DegenerateSampling(
            "every sampled pair coincided".into(),
        ));
    }
    Ok(best)
}

/// Outcome of checking a recorded `l_F` on fresh pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzAudit {
    pub pairs: usize,
    pub violations: usize,
    pub max_ratio: f64,
    pub lipschitz: f64,
}

/// Count pairs with `‖F^(R)(v) - F^(R)(ṽ)‖ > l_F |v - ṽ|_α`.
pub fn lipschitz_audit(
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzAudit> {
    let l_f = spec
        .lipschitz
        .ok_or_else(|| invalid("lipschitz", "no recorded l_F to audit"))?;
    spec.check_grid(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.radius;
    let mut violations = 0;
    let mut max_ratio = 0.0f64;
    for i in 0..n_pairs {
        let a = random_unit_ball_point(&mut rng, model, 2.0);
        let b = if i % 2 == 0 {
            random_unit_ball_point(&mut rng, model, 2.0)
        } else {
            let d = random_unit_ball_point(&mut rng, model, 1e-2);
            a.iter().zip(&d).map(|(x, y)| x + y).collect()
        };
        let va: Vec<f64> = a.iter().map(|x| x * r).collect();
        let vb: Vec<f64> = b.iter().map(|x| x * r).collect();
        let diff: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| x - y).collect();
        let den = alpha_norm_raw(model, &diff);
        if den == 0.0 {
            continue;
        }
        let fa = truncated_coeffs(&va, spec, model);
        let fb = truncated_coeffs(&vb, spec, model);
        let num = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        max_ratio = max_ratio.max(num / den);
        if num > l_f * den {
            violations += 1;
        }
    }
    Ok(LipschitzAudit {
        pairs: n_pairs,
        violations,
        max_ratio,
        lipschitz: l_f,
    })
}

/// `SC = M l_F [1/(β - λ_u) + Γ(1-α)/(λ_s - β)^{1-α}]`.
pub fn sc_constant(
    m_c: f64,
    l_f: f64,
    alpha: f64,
    beta: f64,
    lambda_u: f64,
    lambda_s: f64,
) -> Result<f64> {
    if !(beta > lambda_u && beta < lambda_s) {
        return Err(invalid(
            "beta",
            format!("need λ_u < β < λ_s, got β = {beta} with ({lambda_u}, {lambda_s})"),
        ));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(invalid("alpha", format!("must lie in [0, 1), got {alpha}")));
    }
    Ok(m_c
        * l_f
        * (1.0 / (beta - lambda_u) + gamma(1.0 - alpha) / (lambda_s - beta).powf(1.0 - alpha)))
}

/// Truncation radius with its Lipschitz constant and contraction constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusChoice {
    pub radius: f64,
    pub lipschitz: f64,
    pub sc: f64,
}

/// Largest `R` (to bisection accuracy) with `SC(R) ≤ target_sc`, where
/// `SC` uses the sampled `l_F(R)`.
pub fn choose_truncation_radius(
    target_sc: f64,
    spec: &NonlinearitySpec,
    model: &SpectralModel,
    beta: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<RadiusChoice> {
    if !(target_sc > 0.0 && target_sc < 1.0) {
        return Err(invalid(
            "target_sc",
            format!("must lie in (0, 1), got {target_sc}"),
        ));
    }
    let eval = |r: f64| -> Result<(f64, f64)> {
        let s = spec.with_radius(r)?;
        let l = lipschitz_estimate(&s, model, n_pairs, seed)?;
        Ok((
            l,
            sc_constant(
                1.0,
                l,
                model.alpha(),
                beta,
                model.lambda_u(),
                model.lambda_s(),
            )?,
        ))
    };
    let (mut lo, mut hi) = (RADIUS_LO, RADIUS_HI);
    let (mut l_lo, mut sc_lo) = eval(lo)?;
    let (_, sc_hi) = eval(hi)?;
    if sc_lo > target_sc || sc_hi <= target_sc {
        return Err(Error::NoBracket {
            target: target_sc,
            lo,
            hi,
        });
    }
    for _ in 0..200 {
        if sc_lo >= 0.5 * target_sc && hi / lo < 1.0 + 1e-6 {
            break;
        }
        let mid = (lo * hi).sqrt();
        let (l_mid, sc_mid) = eval(mid)?;
        if sc_mid <= target_sc {
            lo = mid;
            l_lo = l_mid;
            sc_lo = sc_mid;
        } else {
            hi = mid;
        }
    }
    if sc_lo < 0.5 * target_sc {
        return Err(Error::NoBracket {
            target: target_sc,
            lo,
            hi,
        });
    }
    Ok(RadiusChoice {
        radius: lo,
        lipschitz: l_lo,
        sc: sc_lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn model() -> SpectralModel {
        SpectralModel::build_sine(8, 3.0, 0.0, 32).unwrap()
    }

    fn square() -> NonlinearitySpec {
        NonlinearitySpec::new(2.0, false, 0.1).unwrap()
    }

    /// `(2/π) ∫₀^π sin²x sin kx dx` by composite Simpson.
    fn sin2_oracle(k: usize) -> f64 {
        let n = 20_000;
        let h = PI / n as f64;
        let f = |x: f64| x.sin().powi(2) * (k as f64 * x).sin();
        let mut s = f(0.0) + f(PI);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        2.0 / PI * s * h / 3.0
    }

    #[test]
    fn square_of_first_mode_matches_oracle() {
        let m = model();
        let e1 = SpectralVector::from_unit_sine(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let out = power_f(&e1, &square(), &m).unwrap().to_unit_sine();
        for k in 1..=8 {
            assert!(
                (out[k - 1] - sin2_oracle(k)).abs() < 1e-10,
                "k={k}: {} vs {}",
                out[k - 1],
                sin2_oracle(k)
            );
        }
        assert!((out[0] - 8.0 / (3.0 * PI)).abs() < 1e-12);
        assert!((out[2] + 8.0 / (15.0 * PI)).abs() < 1e-12);
        assert!((out[4] + 8.0 / (105.0 * PI)).abs() < 1e-12);
        assert!(out[1].abs() < 1e-14 && out[3].abs() < 1e-14);
    }

    #[test]
    fn zero_and_homogeneity() {
        let m = model();
        let s = square();
        assert!(power_f(&m.zeros(), &s, &m).unwrap().is_zero());
        let v = SpectralVector::new(vec![0.3, -0.2, 0.1, 0.05, 0.0, 0.01, 0.0, -0.02]);
        let a = power_f(&v.scaled(2.5), &s, &m).unwrap();
        let b = power_f(&v, &s, &m).unwrap().scaled(6.25);
        assert!(a.sub(&b).norm() <= 1e-10 * b.norm());
    }

    #[test]
    fn cubic_uses_the_odd_transform_exactly() {
        let m = SpectralModel::build_sine(4, 3.0, 0.0, 12).unwrap();
        let s = NonlinearitySpec::new(3.0, false, 1.0).unwrap();
        // sin³x = (3 sin x - sin 3x)/4
        let e1 = SpectralVector::from_unit_sine(&[1.0, 0.0, 0.0, 0.0]);
        let out = power_f(&e1, &s, &m).unwrap().to_unit_sine();
        assert!((out[0] - 0.75).abs() < 1e-13);
        assert!((out[2] + 0.25).abs() < 1e-13);
    }

    #[test]
    fn grid_and_exponent_checks() {
        assert!(NonlinearitySpec::new(2.5, false, 1.0).is_err());
        assert!(NonlinearitySpec::new(1.0, true, 1.0).is_err());
        assert!(NonlinearitySpec::new(2.0, false, 0.0).is_err());
        let m = SpectralModel::build_sine(8, 3.0, 0.0, 20).unwrap();
        let cube = NonlinearitySpec::new(3.0, false, 1.0).unwrap();
        assert!(matches!(
            power_f(&m.zeros(), &cube, &m),
            Err(Error::InsufficientGrid { required: 24, .. })
        ));
        let signed = NonlinearitySpec::new(2.5, true, 1.0).unwrap();
        let v = SpectralVector::mode(8, 1);
        let out = power_f(&v, &signed, &m).unwrap();
        assert!(out.coeffs()[0] > 0.0);
    }

    #[test]
    fn chi_profile() {
        assert_eq!(chi(0.5), 1.0);
        assert_eq!(chi(1.0), 1.0);
        assert_eq!(chi(3.0), 0.0);
        assert!((chi(1.5) - 0.5).abs() < 1e-15);
        let mut prev = 1.0;
        let mut max_slope = 0.0f64;
        let h = 1e-4;
        for i in 0..=30_000 {
            let s = i as f64 * h;
            let c = chi(s);
            assert!(c <= prev);
            max_slope = max_slope.max((prev - c) / h);
            prev = c;
        }
        assert!(max_slope < 3.0);
        // Derivative vanishes at the seams.
        assert!((1.0 - chi(1.0 + 1e-3)) / 1e-3 < 1e-6);
        assert!(chi(2.0 - 1e-3) / 1e-3 < 1e-6);
    }

    #[test]
    fn truncation_plateau_and_support() {
        let m = model();
        let s = square();
        let dir = SpectralVector::new(vec![1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let unit = dir.scaled(1.0 / m.alpha_norm(&dir));
        let inner = unit.scaled(0.05);
        assert_eq!(
            truncated_f(&inner, &s, &m).unwrap(),
            power_f(&inner, &s, &m).unwrap()
        );
        assert!(truncated_f(&unit.scaled(0.3), &s, &m).unwrap().is_zero());
        let seam = unit.scaled(0.1);
        assert_eq!(
            truncated_f(&seam, &s, &m).unwrap(),
            power_f(&seam, &s, &m).unwrap()
        );
    }

    #[test]
    fn sc_examples() {
        assert!((sc_constant(1.0, 0.1, 0.0, 0.0, -2.0, 1.0).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(sc_constant(1.0, 0.0, 0.0, 0.0, -2.0, 1.0).unwrap(), 0.0);
        let v = sc_constant(1.0, 0.1, 0.5, 0.0, -2.0, 1.0).unwrap();
        assert!((v - 0.1 * (0.5 + PI.sqrt())).abs() < 1e-12);
        assert!(sc_constant(1.0, 0.1, 0.0, -2.0, -2.0, 1.0).is_err());
        assert!(sc_constant(1.0, 0.1, 0.0, 1.0, -2.0, 1.0).is_err());
    }

    #[test]
    fn lipschitz_scales_with_radius() {
        let m = model();
        let a = lipschitz_estimate(&square(), &m, 1000, 7).unwrap();
        let b = lipschitz_estimate(&square().with_radius(0.05).unwrap(), &m, 1000, 7).unwrap();
        let ratio = b / a;
        assert!((0.4..=0.6).contains(&ratio), "{ratio}");
        assert!(a <= 1.0, "l_F(0.1) = {a}");
        assert!(lipschitz_estimate(&square(), &m, 10, 7).is_err());
    }

    #[test]
    fn audit_finds_no_violations() {
        let m = model();
        let l = lipschitz_estimate(&square(), &m, 2000, 1).unwrap();
        let spec = square().with_lipschitz(l);
        let audit = lipschitz_audit(&spec, &m, 10_000, 99).unwrap();
        assert_eq!(
            audit.violations, 0,
            "max ratio {} vs l_F {l}",
            audit.max_ratio
        );
    }

    #[test]
    fn truncated_map_is_bounded() {
        let m = model();
        let s = square();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inside = 0.0f64;
        let mut all = 0.0f64;
        for _ in 0..2000 {
            let p = random_unit_ball_point(&mut rng, &m, 2.0);
            let v = SpectralVector::new(p.iter().map(|x| x * s.radius).collect());
            inside = inside.max(power_f(&v, &s, &m).unwrap().norm());
            let w = SpectralVector::new(p.iter().map(|x| x * s.radius * 3.0).collect());
            all = all.max(truncated_f(&w, &s, &m).unwrap().norm());
            all = all.max(truncated_f(&v, &s, &m).unwrap().norm());
        }
        assert!(all <= inside);
    }

    #[test]
    fn radius_choice_is_monotone() {
        let m = model();
        let beta = 0.5 * (m.lambda_u() + m.lambda_s());
        let a = choose_truncation_radius(0.5, &square(), &m, beta, 1000, 11).unwrap();
        assert!(a.sc <= 0.5 && a.sc >= 0.25);
        let b = choose_truncation_radius(0.25, &square(), &m, beta, 1000, 11).unwrap();
        assert!(b.radius < a.radius);
        assert!(choose_truncation_radius(1.0, &square(), &m, beta, 1000, 11).is_err());
    }
}
