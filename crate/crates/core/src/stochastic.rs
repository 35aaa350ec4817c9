//! Two-sided Wiener paths, the shift `θ_s ω = ω(· + s) - ω(s)`, the
//! stationary Ornstein–Uhlenbeck process `z(θ_t ω)` solving
//! `dz + z dt = σ dW`, and the pathwise tail constants `K₁, K^±, K₂, K₃`.
//!
//! All paths live on a uniform grid that contains `t = 0`; times are stored
//! as integer offsets from the zero node so shifting is exact.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// SplitMix64 finalizer; used to derive independent per-cell seeds.
pub fn mix_seed(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for `(base, tag_0, tag_1, ...)`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(mix_seed(base), |acc, &t| mix_seed(acc ^ mix_seed(t)))
}

fn grid_offset(t: f64, dt: f64) -> Result<i64> {
    let k = (t / dt).round();
    if (k * dt - t).abs() > 1e-9 * dt.max(t.abs() * 1e-3) && (k * dt - t).abs() > 1e-12 {
        return Err(Error::OffGrid { t, dt });
    }
    Ok(k as i64)
}

/// Sampled two-sided Wiener path on `t_i = (i - zero)·dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    dt: f64,
    zero: usize,
    values: Vec<f64>,
    seed: Option<u64>,
}

impl WienerPath {
    /// Two independent increment streams glued at `t = 0`: stream 0 runs
    /// forward, stream 1 backward. The `i`-th increment on either side does
    /// not depend on the window length.
    pub fn sample(seed: u64, t_min: f64, t_max: f64, dt: f64) -> Result<Self> {
        let (n_back, n_fwd) = Self::window(t_min, t_max, dt)?;
        let scale = dt.sqrt();
        let mut fwd = ChaCha8Rng::seed_from_u64(seed);
        fwd.set_stream(0);
        let mut bwd = ChaCha8Rng::seed_from_u64(seed);
        bwd.set_stream(1);

        let mut values = vec![0.0; n_back + n_fwd + 1];
        let mut acc = 0.0;
        for i in 1..=n_fwd {
            let g: f64 = fwd.sample(StandardNormal);
            acc += scale * g;
            values[n_back + i] = acc;
        }
        acc = 0.0;
        for i in 1..=n_back {
            let g: f64 = bwd.sample(StandardNormal);
            acc += scale * g;
            values[n_back - i] = acc;
        }
        Ok(WienerPath {
            dt,
            zero: n_back,
            values,
            seed: Some(seed),
        })
    }

    /// Injected path; `values[i]` sits at `t_min + i·dt` and must vanish at 0.
    pub fn from_values(t_min: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        let n_back = (-grid_offset(t_min, dt)?) as usize;
        if t_min > 0.0 || n_back >= values.len() {
            return Err(invalid("t_min", "grid must contain t = 0"));
        }
        if values[n_back] != 0.0 {
            return Err(invalid("values", format!("ω(0) = {} ≠ 0", values[n_back])));
        }
        Ok(WienerPath {
            dt,
            zero: n_back,
            values,
            seed: None,
        })
    }

    /// `ω ≡ 0`.
    pub fn zero(t_min: f64, t_max: f64, dt: f64) -> Result<Self> {
        let (n_back, n_fwd) = Self::window(t_min, t_max, dt)?;
        Ok(WienerPath {
            dt,
            zero: n_back,
            values: vec![0.0; n_back + n_fwd + 1],
            seed: None,
        })
    }

    fn window(t_min: f64, t_max: f64, dt: f64) -> Result<(usize, usize)> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid("dt", format!("must be positive, got {dt}")));
        }
        if t_min > 0.0 || t_max < 0.0 {
            return Err(invalid("t_min/t_max", "window must contain t = 0"));
        }
        let n_back = (-grid_offset(t_min, dt)?) as usize;
        let n_fwd = grid_offset(t_max, dt)? as usize;
        Ok((n_back, n_fwd))
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn zero_index(&self) -> usize {
        self.zero
    }

    pub fn time(&self, i: usize) -> f64 {
        (i as i64 - self.zero as i64) as f64 * self.dt
    }

    pub fn t_min(&self) -> f64 {
        self.time(0)
    }

    pub fn t_max(&self) -> f64 {
        self.time(self.values.len() - 1)
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = grid_offset(t, self.dt)? + self.zero as i64;
        if k < 0 || k as usize >= self.values.len() {
            return Err(Error::WindowExhausted {
                have_min: self.t_min(),
                have_max: self.t_max(),
                need_min: t,
                need_max: t,
            });
        }
        Ok(k as usize)
    }

    pub fn value_at(&self, t: f64) -> Result<f64> {
        Ok(self.values[self.index_of(t)?])
    }

    /// `θ_s ω`, defined on the window `[t_min - s, t_max - s]`.
    pub fn shift(&self, s: f64) -> Result<Self> {
        let k = self.index_of(s).map_err(|_| Error::WindowExhausted {
            have_min: self.t_min(),
            have_max: self.t_max(),
            need_min: s,
            need_max: s,
        })?;
        let base = self.values[k];
        Ok(WienerPath {
            dt: self.dt,
            zero: k,
            values: self.values.iter().map(|w| w - base).collect(),
            seed: self.seed,
        })
    }

    /// `-ω`.
    pub fn negated(&self) -> Self {
        WienerPath {
            dt: self.dt,
            zero: self.zero,
            values: self.values.iter().map(|w| -w).collect(),
            seed: self.seed,
        }
    }
}

/// Stationary OU samples `z(θ_t ω)` and `Z(t) = ∫₀ᵗ z(θ_τ ω) dτ` on the part
/// of a path's grid that has at least `T_ou` of history behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct OuTrajectory {
    dt: f64,
    zero: usize,
    omega: Vec<f64>,
    z: Vec<f64>,
    zint: Vec<f64>,
    sigma: f64,
    t_ou: f64,
    tail_bound: f64,
}

impl OuTrajectory {
    /// `z(θ_t ω) = -σ ∫_{-∞}^0 e^τ (ω(t+τ) - ω(t)) dτ`, truncated at
    /// `τ = -T_ou` from the earliest returned node.
    ///
    /// The kernel `e^τ` is integrated exactly over each panel against the
    /// left node value of `ω`. The weights sum to one, so the result is
    /// invariant under constant offsets of `ω` and satisfies
    /// `z_{i+1} = e^{-dt} z_i + σ Δω_i`, whose residual against
    /// `dz + z dt = σ dW` is `(dt - 1 + e^{-dt}) z_i = O(dt²)·|z_i|`.
    pub fn from_path(path: &WienerPath, sigma: f64, t_ou: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid("sigma", format!("must be ≥ 0, got {sigma}")));
        }
        if !(t_ou > 0.0) {
            return Err(invalid("t_ou", format!("must be positive, got {t_ou}")));
        }
        let dt = path.dt;
        let burn = (t_ou / dt).ceil() as usize;
        if burn > path.zero {
            return Err(Error::WindowExhausted {
                have_min: path.t_min(),
                have_max: path.t_max(),
                need_min: -(burn as f64) * dt,
                need_max: 0.0,
            });
        }
        let q = (-dt).exp();
        let w = &path.values;
        let n = w.len();
        // Y_i = Σ_m (1-q) q^m ω_{i-1-m},  W_i = Σ_m (1-q) q^m.
        let mut y = 0.0;
        let mut wsum = 0.0;
        let mut z_all = Vec::with_capacity(n - burn);
        for i in 0..n {
            if i >= burn {
                z_all.push(sigma * (w[i] * wsum - y));
            }
            y = q * y + (1.0 - q) * w[i];
            wsum = q * wsum + (1.0 - q);
        }
        let zero = path.zero - burn;
        let omega = w[burn..].to_vec();
        let zint = cumulative_from_zero(&z_all, zero, dt);
        let wmax = omega.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let tail_bound = sigma * (-t_ou).exp() * (2.0 * wmax + t_ou + 1.0);
        Ok(OuTrajectory {
            dt,
            zero,
            omega,
            z: z_all,
            zint,
            sigma,
            t_ou,
            tail_bound,
        })
    }

    /// Deterministic mode: `ω ≡ 0`, `z ≡ 0`, `Z ≡ 0`, `σ = 0`.
    pub fn deterministic(t_min: f64, t_max: f64, dt: f64) -> Result<Self> {
        let p = WienerPath::zero(t_min, t_max, dt)?;
        let n = p.values.len();
        Ok(OuTrajectory {
            dt,
            zero: p.zero,
            omega: vec![0.0; n],
            z: vec![0.0; n],
            zint: vec![0.0; n],
            sigma: 0.0,
            t_ou: 0.0,
            tail_bound: 0.0,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn t_ou(&self) -> f64 {
        self.t_ou
    }

    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn zero_index(&self) -> usize {
        self.zero
    }

    pub fn time(&self, i: usize) -> f64 {
        (i as i64 - self.zero as i64) as f64 * self.dt
    }

    pub fn t_min(&self) -> f64 {
        self.time(0)
    }

    pub fn t_max(&self) -> f64 {
        self.time(self.z.len() - 1)
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// `Z(t_i) = ∫₀^{t_i} z dτ`.
    pub fn zint(&self) -> &[f64] {
        &self.zint
    }

    pub fn z0(&self) -> f64 {
        self.z[self.zero]
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = grid_offset(t, self.dt)? + self.zero as i64;
        if k < 0 || k as usize >= self.z.len() {
            return Err(Error::WindowExhausted {
                have_min: self.t_min(),
                have_max: self.t_max(),
                need_min: t,
                need_max: t,
            });
        }
        Ok(k as usize)
    }

    /// Check that `[t_start, t_end]` is covered and return its index range.
    pub fn span(&self, t_start: f64, t_end: f64) -> Result<(usize, usize)> {
        let exhausted = || Error::WindowExhausted {
            have_min: self.t_min(),
            have_max: self.t_max(),
            need_min: t_start,
            need_max: t_end,
        };
        let a = self.index_of(t_start).map_err(|e| match e {
            Error::OffGrid { .. } => e,
            _ => exhausted(),
        })?;
        let b = self.index_of(t_end).map_err(|e| match e {
            Error::OffGrid { .. } => e,
            _ => exhausted(),
        })?;
        Ok((a, b))
    }

    /// The trajectory seen from `θ_s ω`: `z'(t) = z(t + s)`,
    /// `Z'(t) = Z(t + s) - Z(s)`, `ω'(t) = ω(t + s) - ω(s)`.
    pub fn shifted(&self, s: f64) -> Result<Self> {
        let k = self.index_of(s)?;
        let zk = self.zint[k];
        let wk = self.omega[k];
        Ok(OuTrajectory {
            dt: self.dt,
            zero: k,
            omega: self.omega.iter().map(|w| w - wk).collect(),
            z: self.z.clone(),
            zint: self.zint.iter().map(|x| x - zk).collect(),
            sigma: self.sigma,
            t_ou: self.t_ou,
            tail_bound: self.tail_bound,
        })
    }

    /// Trajectory generated by `-ω`.
    pub fn negated(&self) -> Self {
        OuTrajectory {
            dt: self.dt,
            zero: self.zero,
            omega: self.omega.iter().map(|w| -w).collect(),
            z: self.z.iter().map(|w| -w).collect(),
            zint: self.zint.iter().map(|w| -w).collect(),
            sigma: self.sigma,
            t_ou: self.t_ou,
            tail_bound: self.tail_bound,
        }
    }

    /// Largest per-step residual `|Δz + z dt - σ Δω|`.
    pub fn max_sde_residual(&self) -> f64 {
        (0..self.z.len().saturating_sub(1))
            .map(|i| {
                (self.z[i + 1] - self.z[i] + self.z[i] * self.dt
                    - self.sigma * (self.omega[i + 1] - self.omega[i]))
                    .abs()
            })
            .fold(0.0, f64::max)
    }

    /// CSV with columns `t, omega, z, Z`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["t", "omega", "z", "Z"])?;
        for i in 0..self.z.len() {
            wtr.write_record([
                format!("{:.16e}", self.time(i)),
                format!("{:.16e}", self.omega[i]),
                format!("{:.16e}", self.z[i]),
                format!("{:.16e}", self.zint[i]),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Inverse of [`Self::write_csv`]. `σ` and `T_ou` are not part of the
    /// table and must be supplied.
    pub fn read_csv<R: Read>(input: R, sigma: f64, t_ou: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "omega", "z", "Z"] {
            return Err(Error::Io(format!("unexpected header {headers:?}")));
        }
        let mut cols: [Vec<f64>; 4] = Default::default();
        for rec in rdr.records() {
            let rec = rec?;
            for (c, field) in cols.iter_mut().zip(rec.iter()) {
                c.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Io(format!("bad number `{field}`: {e}")))?,
                );
            }
        }
        let [t, omega, z, zint] = cols;
        let zero = t
            .iter()
            .position(|&x| x == 0.0)
            .ok_or_else(|| Error::Io("table has no t = 0 row".into()))?;
        let dt = if zero + 1 < t.len() {
            t[zero + 1]
        } else if zero > 0 {
            -t[zero - 1]
        } else {
            return Err(Error::Io("need at least two rows".into()));
        };
        let ou = OuTrajectory {
            dt,
            zero,
            omega,
            z,
            zint,
            sigma,
            t_ou,
            tail_bound: 0.0,
        };
        for (i, &ti) in t.iter().enumerate() {
            if ou.time(i) != ti {
                return Err(Error::Io(format!(
                    "row {i}: t = {ti} is off the uniform grid"
                )));
            }
        }
        Ok(ou)
    }
}

/// Cumulative trapezoid with the value at `zero` pinned to 0.
fn cumulative_from_zero(f: &[f64], zero: usize, dt: f64) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for i in zero + 1..f.len() {
        out[i] = out[i - 1] + 0.5 * dt * (f[i - 1] + f[i]);
    }
    for i in (0..zero).rev() {
        out[i] = out[i + 1] - 0.5 * dt * (f[i] + f[i + 1]);
    }
    out
}

fn require_noise(ou: &OuTrajectory) -> Result<()> {
    if !(ou.sigma > 0.0) {
        return Err(invalid(
            "sigma",
            "tail constants need σ > 0; the deterministic mode does not use them",
        ));
    }
    Ok(())
}

fn k1_raw(z0: f64, omega: &[f64], ou: &OuTrajectory) -> f64 {
    let mut sup = f64::NEG_INFINITY;
    for (i, w) in omega.iter().enumerate().take(ou.zero + 1) {
        let t = ou.time(i);
        sup = sup.max(z0 / ou.sigma + w - t.abs());
    }
    sup.max(1.0)
}

/// `K₁ = max(1, sup_{t ≤ 0} [z(0)/σ + ω(t) - |t|])`, so that
/// `z(0) + σ ω(t) ≤ σ (K₁ + |t|)` on every backward grid node.
pub fn k1_estimate(ou: &OuTrajectory) -> Result<f64> {
    require_noise(ou)?;
    Ok(k1_raw(ou.z0(), &ou.omega, ou))
}

/// `K^± = K₁(ω) + K₁(-ω)`.
pub fn kpm_estimate(ou: &OuTrajectory) -> Result<f64> {
    require_noise(ou)?;
    let neg: Vec<f64> = ou.omega.iter().map(|w| -w).collect();
    Ok(k1_raw(ou.z0(), &ou.omega, ou) + k1_raw(-ou.z0(), &neg, ou))
}

/// Whether `z(0) + σ ω(t_i) ≤ σ (K₁ + |t_i|)` holds for all `t_i ≤ 0`.
pub fn k1_certified(ou: &OuTrajectory, k1: f64) -> bool {
    let z0 = ou.z0();
    (0..=ou.zero).all(|i| {
        let t = ou.time(i);
        let lhs = z0 + ou.sigma * ou.omega[i];
        let rhs = ou.sigma * (k1 + t.abs());
        lhs <= rhs + 1e-12 * (1.0 + rhs.abs())
    })
}

/// `K₂ = sup_{τ ≤ 0} |1 - e^{-λ_u τ + σ ω(τ)}| / (γ e^{δ|τ|})`.
pub fn k2_estimate(ou: &OuTrajectory, gamma: f64, delta: f64, lambda_u: f64) -> Result<f64> {
    require_noise(ou)?;
    let sigma = ou.sigma;
    if !(gamma >= (-lambda_u).max(sigma)) {
        return Err(invalid(
            "gamma",
            format!("need γ ≥ max(-λ_u, σ) = {}", (-lambda_u).max(sigma)),
        ));
    }
    if !(delta > -lambda_u + sigma) {
        return Err(invalid(
            "delta",
            format!("need δ > -λ_u + σ = {}", -lambda_u + sigma),
        ));
    }
    Ok((0..=ou.zero)
        .map(|i| {
            let tau = ou.time(i);
            (1.0 - (-lambda_u * tau + sigma * ou.omega[i]).exp()).abs()
                / (gamma * (delta * tau.abs()).exp())
        })
        .fold(0.0, f64::max))
}

/// `K₃ = sup_{r ≤ 0} |1 - e^{(p-1) σ ω(r)}| / (γ₁ e^{(p-1) δ₁ |r|})`.
pub fn k3_estimate(ou: &OuTrajectory, gamma1: f64, delta1: f64, p: f64) -> Result<f64> {
    require_noise(ou)?;
    let sigma = ou.sigma;
    if !(gamma1 > sigma) {
        return Err(invalid("gamma1", format!("need γ₁ > σ = {sigma}")));
    }
    if !(delta1 > sigma) {
        return Err(invalid("delta1", format!("need δ₁ > σ = {sigma}")));
    }
    if !(p > 1.0) {
        return Err(invalid("p", "need p > 1"));
    }
    Ok((0..=ou.zero)
        .map(|i| {
            let r = ou.time(i);
            (1.0 - ((p - 1.0) * sigma * ou.omega[i]).exp()).abs()
                / (gamma1 * ((p - 1.0) * delta1 * r.abs()).exp())
        })
        .fold(0.0, f64::max))
}

/// Parameters of the `K₂`/`K₃` weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailParams {
    pub gamma: f64,
    pub delta: f64,
    pub gamma1: f64,
    pub delta1: f64,
}

impl TailParams {
    /// `γ = max(-λ_u, σ)`, `δ = -λ_u + σ + 1/2`, `γ₁ = 2σ`,
    /// `δ₁ = (σ - λ_u)/2` (strictly between `σ` and `-λ_u` when `σ < -λ_u`).
    pub fn defaults(sigma: f64, lambda_u: f64) -> Self {
        TailParams {
            gamma: (-lambda_u).max(sigma),
            delta: -lambda_u + sigma + 0.5,
            gamma1: 2.0 * sigma,
            delta1: 0.5 * (sigma - lambda_u),
        }
    }
}

/// All tail constants of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConstants {
    pub k1: f64,
    pub kpm: f64,
    pub k2: f64,
    pub k3: f64,
    pub params: TailParams,
}

impl TailConstants {
    pub fn estimate(ou: &OuTrajectory, params: TailParams, lambda_u: f64, p: f64) -> Result<Self> {
        Ok(TailConstants {
            k1: k1_estimate(ou)?,
            kpm: kpm_estimate(ou)?,
            k2: k2_estimate(ou, params.gamma, params.delta, lambda_u)?,
            k3: k3_estimate(ou, params.gamma1, params.delta1, p)?,
            params,
        })
    }
}
