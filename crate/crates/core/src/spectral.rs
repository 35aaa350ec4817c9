//! Finite-mode model of `L = -d²/dx² - c` on `(0, π)` with Dirichlet
//! conditions: eigenvalues `λ_k = k² - c`, orthonormal eigenfunctions
//! `e_k(x) = sqrt(2/π) sin(kx)`, the splitting `E = E_u ⊕ E_s`, fractional
//! norms and the transforms between coefficients and collocation values.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Blocks of the spectral splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Unstable,
    Stable,
    Full,
}

/// Coefficients against the orthonormal eigenfunctions `e_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpectralVector(Vec<f64>);

/// Samples at the interior nodes `x_j = jπ/(G+1)`, `j = 1..=G`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField(Vec<f64>);

/// Scale factor between the orthonormal convention and unit-amplitude
/// `sin(kx)`: `d·sin(kx) = d·sqrt(π/2)·e_k`.
pub fn unit_sine_scale() -> f64 {
    (PI / 2.0).sqrt()
}

impl SpectralVector {
    pub fn new(coeffs: Vec<f64>) -> Self {
        SpectralVector(coeffs)
    }

    pub fn zeros(n: usize) -> Self {
        SpectralVector(vec![0.0; n])
    }

    /// `e_k` with 1-based mode index.
    pub fn mode(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k - 1] = 1.0;
        SpectralVector(v)
    }

    /// Build from coefficients against unit-amplitude `sin(kx)`.
    pub fn from_unit_sine(coeffs: &[f64]) -> Self {
        SpectralVector(coeffs.iter().map(|d| d * unit_sine_scale()).collect())
    }

    /// Coefficients against unit-amplitude `sin(kx)`.
    pub fn to_unit_sine(&self) -> Vec<f64> {
        self.0.iter().map(|c| c / unit_sine_scale()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.0
    }

    /// `E`-norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        SpectralVector(self.0.iter().map(|c| c * s).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        SpectralVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        SpectralVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }
}

impl GridField {
    pub fn new(values: Vec<f64>) -> Self {
        GridField(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Operator model with its splitting and precomputed transforms.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    mode_count: usize,
    shift_c: f64,
    eigenvalues: Vec<f64>,
    shift_a: f64,
    alpha: f64,
    split: usize,
    grid_size: usize,
    /// `(λ_k + a)^α`.
    alpha_weights: Vec<f64>,
    /// `G × M`, row-major: `e_k(x_j)`.
    synthesis: Vec<f64>,
    /// `M × G`: discrete sine quadrature, exact on odd band-limited fields.
    odd_analysis: Vec<f64>,
    /// `M × G`: exact sine projection of even cosine polynomials of degree
    /// at most `G + 1` sampled on the grid (vanishing at the end points).
    even_analysis: Vec<f64>,
}

impl SpectralModel {
    /// Model of `-∂xx - shift_c` on `(0, π)` with `mode_count` modes.
    pub fn build_sine(
        mode_count: usize,
        shift_c: f64,
        alpha: f64,
        grid_size: usize,
    ) -> Result<Self> {
        if mode_count < 2 {
            return Err(invalid(
                "mode_count",
                format!("need at least 2 modes, got {mode_count}"),
            ));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(invalid("alpha", format!("must lie in [0, 1), got {alpha}")));
        }
        if !shift_c.is_finite() {
            return Err(invalid("shift_c", "must be finite"));
        }
        if grid_size < 2 * mode_count {
            return Err(invalid(
                "grid_size",
                format!(
                    "need at least 2·mode_count = {}, got {grid_size}",
                    2 * mode_count
                ),
            ));
        }
        let eigenvalues: Vec<f64> = (1..=mode_count).map(|k| (k * k) as f64 - shift_c).collect();
        let split = eigenvalues.iter().take_while(|&&l| l < 0.0).count();
        if split == 0 {
            return Err(Error::NoSplitting(format!(
                "λ_1 = {} ≥ 0, no unstable mode",
                eigenvalues[0]
            )));
        }
        if split == mode_count {
            return Err(Error::NoSplitting(format!(
                "all {mode_count} retained eigenvalues are negative, no stable mode"
            )));
        }
        let shift_a = (1.0 - eigenvalues[0]).max(0.0);
        let alpha_weights = eigenvalues
            .iter()
            .map(|l| (l + shift_a).powf(alpha))
            .collect();

        let m = mode_count;
        let g = grid_size;
        let k_int = g + 1;
        let h = PI / k_int as f64;
        let norm = (2.0 / PI).sqrt();

        let mut synthesis = vec![0.0; g * m];
        for j in 0..g {
            let x = (j + 1) as f64 * h;
            for k in 0..m {
                synthesis[j * m + k] = norm * ((k + 1) as f64 * x).sin();
            }
        }
        let mut odd_analysis = vec![0.0; m * g];
        for k in 0..m {
            for j in 0..g {
                odd_analysis[k * g + j] = h * synthesis[j * m + k];
            }
        }

        // DCT-I to cosine coefficients a_0..a_K, then exact ∫ cos(nx) sin(mx).
        let mut even_analysis = vec![0.0; m * g];
        for j in 0..g {
            let x = (j + 1) as f64 * h;
            for n in 0..=k_int {
                let weight = if n == 0 || n == k_int { 1.0 } else { 2.0 } / k_int as f64;
                let a_coef = weight * (n as f64 * x).cos();
                for k in 0..m {
                    let mm = (k + 1) as i64;
                    let nn = n as i64;
                    if (mm + nn) % 2 == 1 {
                        let integral = 2.0 * mm as f64 / ((mm * mm - nn * nn) as f64);
                        even_analysis[k * g + j] += norm * integral * a_coef;
                    }
                }
            }
        }

        Ok(SpectralModel {
            mode_count,
            shift_c,
            eigenvalues,
            shift_a,
            alpha,
            split,
            grid_size,
            alpha_weights,
            synthesis,
            odd_analysis,
            even_analysis,
        })
    }

    pub fn mode_count(&self) -> usize {
        self.mode_count
    }

    pub fn shift_c(&self) -> f64 {
        self.shift_c
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn shift_a(&self) -> f64 {
        self.shift_a
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of unstable modes `N`.
    pub fn split_index(&self) -> usize {
        self.split
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    /// `λ_u = λ_N < 0`.
    pub fn lambda_u(&self) -> f64 {
        self.eigenvalues[self.split - 1]
    }

    /// `λ_s = λ_{N+1} ≥ 0`.
    pub fn lambda_s(&self) -> f64 {
        self.eigenvalues[self.split]
    }

    pub fn grid_points(&self) -> Vec<f64> {
        let h = PI / (self.grid_size + 1) as f64;
        (1..=self.grid_size).map(|j| j as f64 * h).collect()
    }

    pub fn zeros(&self) -> SpectralVector {
        SpectralVector::zeros(self.mode_count)
    }

    fn check_dim(&self, v: &SpectralVector) -> Result<()> {
        if v.len() != self.mode_count {
            return Err(Error::DimensionMismatch {
                expected: self.mode_count,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `|v|_α = |(L + a)^α v|`.
    pub fn alpha_norm(&self, v: &SpectralVector) -> f64 {
        v.coeffs()
            .iter()
            .zip(&self.alpha_weights)
            .map(|(c, w)| (c * w) * (c * w))
            .sum::<f64>()
            .sqrt()
    }

    pub fn in_block(&self, k: usize, block: Block) -> bool {
        match block {
            Block::Unstable => k < self.split,
            Block::Stable => k >= self.split,
            Block::Full => true,
        }
    }

    /// Orthogonal projection `P_u` or `P_s` (`Full` is the identity).
    pub fn project(&self, v: &SpectralVector, block: Block) -> Result<SpectralVector> {
        self.check_dim(v)?;
        let coeffs = v
            .coeffs()
            .iter()
            .enumerate()
            .map(|(k, &c)| if self.in_block(k, block) { c } else { 0.0 })
            .collect();
        Ok(SpectralVector(coeffs))
    }

    /// `e^{-L t}` restricted to a block. The stable and full semigroups run
    /// forward (`t ≥ 0`), the unstable one backward (`t ≤ 0`).
    pub fn semigroup(&self, v: &SpectralVector, t: f64, block: Block) -> Result<SpectralVector> {
        self.check_dim(v)?;
        match block {
            Block::Unstable if t > 0.0 => {
                return Err(Error::WrongTimeDirection {
                    block: "unstable",
                    requirement: "t ≤ 0",
                    t,
                })
            }
            Block::Stable | Block::Full if t < 0.0 => {
                return Err(Error::WrongTimeDirection {
                    block: if block == Block::Stable {
                        "stable"
                    } else {
                        "full"
                    },
                    requirement: "t ≥ 0",
                    t,
                })
            }
            _ => {}
        }
        let coeffs = v
            .coeffs()
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                if self.in_block(k, block) {
                    (-self.eigenvalues[k] * t).exp() * c
                } else {
                    0.0
                }
            })
            .collect();
        Ok(SpectralVector(coeffs))
    }

    /// `(L_s + μ)^{-1}` on `E_s`, zero on `E_u`.
    pub fn shifted_stable_resolvent(&self, w: &SpectralVector, mu: f64) -> Result<SpectralVector> {
        self.check_dim(w)?;
        let mut out = vec![0.0; self.mode_count];
        for k in self.split..self.mode_count {
            let d = self.eigenvalues[k] + mu;
            if d.abs() <= 1e-12 * (1.0 + mu.abs()) {
                return Err(Error::Resonance {
                    mode: k + 1,
                    value: d,
                });
            }
            out[k] = w.coeffs()[k] / d;
        }
        Ok(SpectralVector(out))
    }

    /// Synthesis `v(x_j) = Σ_k c_k e_k(x_j)`.
    pub fn to_grid(&self, v: &SpectralVector) -> Result<GridField> {
        self.check_dim(v)?;
        Ok(GridField(self.synthesize(v.coeffs())))
    }

    pub(crate) fn synthesize(&self, c: &[f64]) -> Vec<f64> {
        let m = self.mode_count;
        (0..self.grid_size)
            .map(|j| {
                let row = &self.synthesis[j * m..(j + 1) * m];
                row.iter().zip(c).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn apply_analysis(&self, matrix: &[f64], f: &[f64]) -> Vec<f64> {
        let g = self.grid_size;
        (0..self.mode_count)
            .map(|k| {
                let row = &matrix[k * g..(k + 1) * g];
                row.iter().zip(f).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn check_grid(&self, f: &GridField) -> Result<()> {
        if f.len() != self.grid_size {
            return Err(Error::DimensionMismatch {
                expected: self.grid_size,
                got: f.len(),
            });
        }
        Ok(())
    }

    /// Discrete sine quadrature; exact inverse of [`Self::to_grid`] on
    /// band-limited inputs and exact for odd sine polynomials of degree `≤ G`.
    pub fn from_grid(&self, f: &GridField) -> Result<SpectralVector> {
        self.check_grid(f)?;
        Ok(SpectralVector(
            self.apply_analysis(&self.odd_analysis, f.values()),
        ))
    }

    /// Sine projection of an even field (a cosine polynomial of degree
    /// `≤ G + 1` vanishing at `0` and `π`, e.g. an even power of a
    /// band-limited vector). Exact up to rounding.
    pub fn from_grid_even(&self, f: &GridField) -> Result<SpectralVector> {
        self.check_grid(f)?;
        Ok(SpectralVector(
            self.apply_analysis(&self.even_analysis, f.values()),
        ))
    }

    pub(crate) fn analyze(&self, f: &[f64], even: bool) -> Vec<f64> {
        if even {
            self.apply_analysis(&self.even_analysis, f)
        } else {
            self.apply_analysis(&self.odd_analysis, f)
        }
    }

    /// `L²(0, π)` norm of a grid field by the interior trapezoid rule.
    pub fn quadrature_norm(&self, f: &GridField) -> f64 {
        let h = PI / (self.grid_size + 1) as f64;
        (h * f.values().iter().map(|x| x * x).sum::<f64>()).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn remark_model() -> SpectralModel {
        SpectralModel::build_sine(8, 3.0, 0.0, 32).unwrap()
    }

    #[test]
    fn remark_spectrum() {
        let m = remark_model();
        assert_eq!(
            m.eigenvalues(),
            &[-2.0, 1.0, 6.0, 13.0, 22.0, 33.0, 46.0, 61.0]
        );
        assert_eq!(m.split_index(), 1);
        assert_eq!(m.lambda_u(), -2.0);
        assert_eq!(m.lambda_s(), 1.0);
        assert_eq!(m.shift_a(), 3.0);
    }

    #[test]
    fn two_unstable_modes() {
        let m = SpectralModel::build_sine(8, 5.0, 0.0, 32).unwrap();
        assert_eq!(m.split_index(), 2);
        assert_eq!(m.lambda_u(), -1.0);
        assert_eq!(m.lambda_s(), 4.0);
    }

    #[test]
    fn rejects_positive_spectrum() {
        let err = SpectralModel::build_sine(4, 0.0, 0.0, 16).unwrap_err();
        assert!(matches!(err, Error::NoSplitting(_)));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(SpectralModel::build_sine(1, 3.0, 0.0, 32).is_err());
        assert!(SpectralModel::build_sine(8, 3.0, 1.0, 32).is_err());
        assert!(SpectralModel::build_sine(8, 3.0, 0.0, 15).is_err());
        assert!(matches!(
            SpectralModel::build_sine(3, 20.0, 0.0, 8).unwrap_err(),
            Error::NoSplitting(_)
        ));
    }

    #[test]
    fn projections() {
        let m = remark_model();
        let v = SpectralVector::new((1..=8).map(|k| k as f64).collect());
        let u = m.project(&v, Block::Unstable).unwrap();
        let s = m.project(&v, Block::Stable).unwrap();
        assert_eq!(u.coeffs(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.coeffs(), &[0.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert!(m.project(&s, Block::Unstable).unwrap().is_zero());
        assert_eq!(u.add(&s), v);
        assert!(matches!(
            m.project(&SpectralVector::zeros(3), Block::Stable),
            Err(Error::DimensionMismatch {
                expected: 8,
                got: 3
            })
        ));
    }

    #[test]
    fn semigroup_examples() {
        let m = remark_model();
        let e1 = SpectralVector::mode(8, 1);
        let out = m.semigroup(&e1, -1.0, Block::Unstable).unwrap();
        assert!((out.coeffs()[0] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((out.coeffs()[0] - 0.13534).abs() < 1e-5);

        let v = SpectralVector::new(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.0, 0.0, 1.0]);
        assert_eq!(m.semigroup(&v, 0.0, Block::Full).unwrap(), v);

        let e2 = SpectralVector::mode(8, 2);
        let out = m.semigroup(&e2, 2.0, Block::Stable).unwrap();
        assert!((out.coeffs()[1] - (-2.0f64).exp()).abs() < 1e-15);
        assert!(m.alpha_norm(&out) <= (-2.0f64).exp() * m.alpha_norm(&e2) * (1.0 + 1e-15));

        assert!(matches!(
            m.semigroup(&v, 1.0, Block::Unstable),
            Err(Error::WrongTimeDirection { .. })
        ));
        assert!(m.semigroup(&v, -1.0, Block::Stable).is_err());
    }

    #[test]
    fn alpha_norm_reduces_to_norm() {
        let m = remark_model();
        let v = SpectralVector::new(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.0, 0.0, 1.0]);
        assert_eq!(m.alpha_norm(&v), v.norm());
        let m2 = SpectralModel::build_sine(8, 3.0, 0.5, 32).unwrap();
        let expected: f64 = v
            .coeffs()
            .iter()
            .enumerate()
            .map(|(k, c)| ((k + 1) * (k + 1)) as f64 * c * c)
            .sum::<f64>()
            .sqrt();
        assert!((m2.alpha_norm(&v) - expected).abs() < 1e-14);
    }

    #[test]
    fn grid_round_trip_single_mode() {
        let m = remark_model();
        let e1 = SpectralVector::mode(8, 1);
        let f = m.to_grid(&e1).unwrap();
        for (x, val) in m.grid_points().iter().zip(f.values()) {
            assert!((val - (2.0 / PI).sqrt() * x.sin()).abs() < 1e-15);
        }
        let back = m.from_grid(&f).unwrap();
        assert!(back.sub(&e1).norm() < 1e-12);
        assert!(m
            .from_grid(&GridField::new(vec![0.0; 32]))
            .unwrap()
            .is_zero());
        assert!((m.quadrature_norm(&f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resolvent() {
        let m = remark_model();
        let w = SpectralVector::new(vec![5.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let out = m.shifted_stable_resolvent(&w, 4.0).unwrap();
        assert_eq!(out.coeffs()[0], 0.0);
        assert_eq!(out.coeffs()[2], 0.1);
        assert_eq!(out.coeffs()[4], 1.0 / 26.0);
        assert!(m
            .shifted_stable_resolvent(&m.zeros(), 4.0)
            .unwrap()
            .is_zero());
        assert!(matches!(
            m.shifted_stable_resolvent(&w, -6.0),
            Err(Error::Resonance { mode: 3, .. })
        ));
    }
}
