//! Gaussian-channel capacity.
//!
//! For a channel `O = G·A + η` with unit-covariance noise the capacity under an
//! actuator power budget `P` is
//!
//! ```text
//! E = max_{p_i >= 0, Σ p_i <= P}  ½ Σ_i ln(1 + σ_i · p_i)
//! ```
//!
//! where `σ_i` are the singular values of `G`. The optimum is the water-filling
//! allocation `p_i = max(L − 1/σ_i, 0)` with the water level `L` chosen so the
//! powers sum to `P`. Gains enter to the first power; [`GainMode::SigmaSquared`]
//! switches to the textbook `σ_i²` for sensitivity studies.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Tolerance of the KKT certificate on a water-filling allocation.
pub const KKT_TOLERANCE: f64 = 1e-9;

/// Singular values of a channel matrix, sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularSpectrum {
    values: Vec<f64>,
    rank: usize,
}

impl SingularSpectrum {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        ensure_finite(&values, "singular values")?;
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("singular values must be non-negative"));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let cutoff = RANK_TOLERANCE * values.first().copied().unwrap_or(0.0);
        let rank = values.iter().filter(|&&v| v > cutoff && v > 0.0).count();
        Ok(Self { values, rank })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of singular values above the rank tolerance.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn active(&self) -> &[f64] {
        &self.values[..self.rank]
    }
}

/// Which power of `σ_i` multiplies `p_i` inside the logarithm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    #[default]
    Sigma,
    SigmaSquared,
}

impl GainMode {
    pub fn gain(self, sigma: f64) -> f64 {
        match self {
            GainMode::Sigma => sigma,
            GainMode::SigmaSquared => sigma * sigma,
        }
    }
}

/// Capacity settings shared by every empowerment computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacitySettings {
    /// Total actuator power budget `P`.
    pub power: f64,
    pub use_sigma_squared: bool,
}

impl Default for CapacitySettings {
    fn default() -> Self {
        Self {
            power: 1.0,
            use_sigma_squared: false,
        }
    }
}

impl CapacitySettings {
    pub fn gain_mode(&self) -> GainMode {
        if self.use_sigma_squared {
            GainMode::SigmaSquared
        } else {
            GainMode::Sigma
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power.is_finite() && self.power > 0.0) {
            return Err(Error::Config(format!(
                "capacity.power must be positive, got {}",
                self.power
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    /// Power per sub-channel, aligned with the spectrum's values.
    pub powers: Vec<f64>,
    /// Common level `1/ν`; zero when no sub-channel is active.
    pub water_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    /// Capacity in nats.
    pub capacity: f64,
    pub allocation: PowerAllocation,
    pub spectrum: SingularSpectrum,
    pub gain_mode: GainMode,
}

impl CapacityResult {
    /// `½ Σ ln(1 + gain_i · p_i)` evaluated from the stored fields.
    pub fn recompute_capacity(&self) -> f64 {
        capacity_of(
            self.spectrum.values(),
            &self.allocation.powers,
            self.gain_mode,
        )
    }

    /// Largest violation of the water-filling optimality conditions:
    /// active channels sit exactly at the level, inactive ones have their
    /// floor `1/gain` at or above it, and the powers exhaust the budget.
    pub fn kkt_violation(&self, budget: f64) -> f64 {
        let level = self.allocation.water_level;
        let mut worst = 0.0_f64;
        let mut sum = 0.0;
        for (&sigma, &p) in self.spectrum.values().iter().zip(&self.allocation.powers) {
            sum += p;
            if p < 0.0 {
                worst = worst.max(-p);
            }
            let gain = self.gain_mode.gain(sigma);
            let floor = if gain > 0.0 { 1.0 / gain } else { f64::INFINITY };
            if p > 0.0 {
                worst = worst.max((p - (level - floor)).abs());
            } else if floor.is_finite() {
                worst = worst.max(level - floor);
            }
        }
        if self.spectrum.rank() > 0 {
            worst = worst.max((sum - budget).abs());
        }
        worst
    }
}

pub fn capacity_of(sigmas: &[f64], powers: &[f64], mode: GainMode) -> f64 {
    0.5 * sigmas
        .iter()
        .zip(powers)
        .map(|(&s, &p)| (mode.gain(s) * p).ln_1p())
        .sum::<f64>()
}

/// All `min(rows, cols)` singular values of `m`, sorted descending.
pub fn singular_values(m: &DMatrix<f64>) -> Result<SingularSpectrum> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::invalid("matrix must have at least one row and column"));
    }
    ensure_finite(m.as_slice(), "channel matrix")?;
    let values = m.singular_values().iter().map(|v| v.max(0.0)).collect();
    SingularSpectrum::new(values)
}

/// Water-filling with gains `σ_i`.
pub fn water_fill(spectrum: &SingularSpectrum, power: f64) -> Result<CapacityResult> {
    water_fill_with(spectrum, power, GainMode::Sigma)
}

/// Exact water-filling: the active set is always a prefix of the sorted
/// gains, so the level follows from scanning the breakpoints `1/gain_i`.
pub fn water_fill_with(
    spectrum: &SingularSpectrum,
    power: f64,
    mode: GainMode,
) -> Result<CapacityResult> {
    if !(power.is_finite() && power > 0.0) {
        return Err(Error::invalid(format!("power budget must be positive, got {power}")));
    }
    let n = spectrum.values().len();
    let k = spectrum.rank();
    let mut powers = vec![0.0; n];
    if k == 0 {
        return Ok(CapacityResult {
            capacity: 0.0,
            allocation: PowerAllocation {
                powers,
                water_level: 0.0,
            },
            spectrum: spectrum.clone(),
            gain_mode: mode,
        });
    }

    let floors: Vec<f64> = spectrum.active().iter().map(|&s| 1.0 / mode.gain(s)).collect();
    let mut active = 1;
    let mut floor_sum = floors[0];
    let mut level = power + floors[0];
    for m in 2..=k {
        let candidate = (power + floor_sum + floors[m - 1]) / m as f64;
        if candidate > floors[m - 1] {
            active = m;
            floor_sum += floors[m - 1];
            level = candidate;
        } else {
            break;
        }
    }
    for i in 0..active {
        powers[i] = (level - floors[i]).max(0.0);
    }
    let capacity = capacity_of(spectrum.values(), &powers, mode);
    Ok(CapacityResult {
        capacity,
        allocation: PowerAllocation {
            powers,
            water_level: level,
        },
        spectrum: spectrum.clone(),
        gain_mode: mode,
    })
}

/// Empowerment of a channel matrix with gains `σ_i`.
pub fn empowerment_of_matrix(g: &DMatrix<f64>, power: f64) -> Result<f64> {
    Ok(water_fill(&singular_values(g)?, power)?.capacity)
}

pub fn empowerment_with(g: &DMatrix<f64>, settings: &CapacitySettings) -> Result<f64> {
    Ok(water_fill_with(&singular_values(g)?, settings.power, settings.gain_mode())?.capacity)
}

/// Outcome of [`singular_values_direct`].
#[derive(Debug, Clone)]
pub struct DirectSpectrum {
    pub spectrum: SingularSpectrum,
    pub converged: bool,
    pub iterations: usize,
    /// Final value of the penalised objective (on the unit-norm matrix).
    pub objective: f64,
}

/// Singular values without a decomposition routine: fits
/// `M ≈ U · diag(Σ) · V` by gradient descent on the reconstruction error
/// plus `w·‖UᵀU − I‖² + w·‖VVᵀ − I‖²`, with `U` of shape `m×r` and `V` of
/// shape `r×n`, `r = min(m, n)`.
///
/// The matrix is normalised to unit Frobenius norm before fitting and `Σ`
/// rescaled afterwards. If `max_iters` runs out the best iterate is returned
/// with `converged = false`.
pub fn singular_values_direct(
    m: &DMatrix<f64>,
    penalty_weight: f64,
    max_iters: usize,
) -> Result<DirectSpectrum> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("matrix must have at least one row and column"));
    }
    ensure_finite(m.as_slice(), "matrix")?;
    if !(penalty_weight.is_finite() && penalty_weight > 0.0) {
        return Err(Error::invalid("penalty weight must be positive"));
    }
    let r = rows.min(cols);
    let norm = m.norm();
    if norm == 0.0 {
        return Ok(DirectSpectrum {
            spectrum: SingularSpectrum::new(vec![0.0; r])?,
            converged: true,
            iterations: 0,
            objective: 0.0,
        });
    }
    let target = m / norm;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed ^ ((rows as u64) << 32) ^ cols as u64);
    let mut gaussian = |nr: usize, nc: usize| {
        DMatrix::from_fn(nr, nc, |_, _| StandardNormal.sample(&mut rng))
    };
    let mut u = gaussian(rows, r).qr().q();
    let mut v = gaussian(cols, r).qr().q().transpose();
    let mut s: Vec<f64> = (0..r)
        .map(|k| (u.column(k).transpose() * &target * v.row(k).transpose())[(0, 0)])
        .collect();

    let objective = |u: &DMatrix<f64>, s: &[f64], v: &DMatrix<f64>| -> f64 {
        let recon = u * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(s)) * v;
        let eye = DMatrix::<f64>::identity(r, r);
        (recon - &target).norm_squared()
            + penalty_weight * ((u.transpose() * u - &eye).norm_squared()
                + (v * v.transpose() - &eye).norm_squared())
    };

    let mut f = objective(&u, &s, &v);
    let mut step = 0.1;
    let mut converged = false;
    let mut iterations = 0;
    let eye = DMatrix::<f64>::identity(r, r);
    while iterations < max_iters {
        iterations += 1;
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&s));
        let resid = &u * &sigma * &v - &target;
        let gu = 2.0 * &resid * v.transpose() * &sigma
            + 4.0 * penalty_weight * &u * (u.transpose() * &u - &eye);
        let gv = 2.0 * &sigma * u.transpose() * &resid
            + 4.0 * penalty_weight * (&v * v.transpose() - &eye) * &v;
        let core = u.transpose() * &resid * v.transpose();
        let gs: Vec<f64> = (0..r).map(|k| 2.0 * core[(k, k)]).collect();
        let grad_sq = gu.norm_squared() + gv.norm_squared() + gs.iter().map(|g| g * g).sum::<f64>();
        if grad_sq.sqrt() < 1e-11 {
            converged = true;
            break;
        }
        // Armijo backtracking from a step that grows after each success.
        step *= 2.0;
        loop {
            let u_new = &u - step * &gu;
            let v_new = &v - step * &gv;
            let s_new: Vec<f64> = s.iter().zip(&gs).map(|(a, g)| a - step * g).collect();
            let f_new = objective(&u_new, &s_new, &v_new);
            if f_new <= f - 0.5 * step * grad_sq {
                u = u_new;
                v = v_new;
                s = s_new;
                f = f_new;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                break;
            }
        }
        if step < 1e-20 {
            break;
        }
    }
    let values = s.iter().map(|x| x.abs() * norm).collect();
    Ok(DirectSpectrum {
        spectrum: SingularSpectrum::new(values)?,
        converged,
        iterations,
        objective: f,
    })
}
