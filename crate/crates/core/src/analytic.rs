//! Reference channel matrices and empowerment landscapes.
//!
//! The pendulum has a closed-form 3-step channel matrix. Two readings are
//! provided: the formula exactly as printed in the source derivation, and the
//! Jacobian of this crate's explicit-Euler simulator, which equals `dt` times
//! the printed matrix. [`numeric_g`] differentiates any simulator by central
//! differences and serves as the oracle for both.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::capacity::{empowerment_with, CapacitySettings};
use crate::channel::ChannelModel;
use crate::envs::{Dynamics, Environment, Pendulum};
use crate::error::{ensure_finite, Error, Result};
use crate::par;

/// Horizon of the closed-form pendulum channel.
pub const PENDULUM_HORIZON: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticPendulumConfig {
    pub dt: f64,
    pub g: f64,
    pub l: f64,
}

impl Default for AnalyticPendulumConfig {
    fn default() -> Self {
        Self::from(&Pendulum::default())
    }
}

impl From<&Pendulum> for AnalyticPendulumConfig {
    fn from(p: &Pendulum) -> Self {
        Self {
            dt: p.dt,
            g: p.g,
            l: p.l,
        }
    }
}

impl AnalyticPendulumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dt > 0.0 && self.g > 0.0 && self.l > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("dt, g and l must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GVariant {
    AsPrinted,
    DerivationConsistent,
}

/// Closed-form 2×3 channel matrix of the pendulum at `s = (θ, θ̇)`.
///
/// With `θ₂ = θ + dt·(dt·(g/l)·sin θ + 2θ̇)` (the angle after two zero-action
/// steps) and `k = dt²g/l`:
///
/// ```text
/// as printed:             [[2dt,  dt,  0 ], [k·cos θ₂ + 1, 1, 1]]
/// derivation consistent:  [[2dt², dt², 0 ], [dt·(k·cos θ₂ + 1), dt, dt]]
/// ```
pub fn analytic_g_pendulum(s: &[f64], cfg: &AnalyticPendulumConfig, variant: GVariant) -> DMatrix<f64> {
    let (theta, omega) = (s[0], s[1]);
    let AnalyticPendulumConfig { dt, g, l } = *cfg;
    let theta2 = dt * ((g * dt / l) * theta.sin() + 2.0 * omega) + theta;
    let c = (dt * dt * g / l) * theta2.cos() + 1.0;
    let printed = DMatrix::from_row_slice(2, 3, &[2.0 * dt, dt, 0.0, c, 1.0, 1.0]);
    match variant {
        GVariant::AsPrinted => printed,
        GVariant::DerivationConsistent => printed * dt,
    }
}

/// Finite-difference channel matrix with a flag for non-smooth dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericG {
    pub matrix: DMatrix<f64>,
    /// The zero-action rollout touched a dynamics discontinuity, so the
    /// differences may not represent a derivative.
    pub discontinuity: bool,
}

/// Central differences of the `horizon`-step endpoint with respect to each
/// action component, around the zero action sequence.
pub fn numeric_g(env: &Environment, s: &[f64], horizon: usize, eps: f64) -> Result<NumericG> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be ≥ 1"));
    }
    if s.len() != env.state_dim() {
        return Err(Error::shape(env.state_dim(), s.len()));
    }
    ensure_finite(s, "state")?;
    let min_bound = env.action_bounds().into_iter().fold(f64::INFINITY, f64::min);
    if !(eps > 0.0 && eps <= min_bound) {
        return Err(Error::invalid(format!("ε must lie in (0, {min_bound}]")));
    }
    let da = env.action_dim();
    let n = horizon * da;
    let zeros = vec![0.0; n];

    let mut discontinuity = env.on_discontinuity(s);
    let mut cur = s.to_vec();
    for _ in 0..horizon {
        cur = env.step(&cur, &zeros[..da])?.next_state;
        discontinuity |= env.on_discontinuity(&cur);
    }
    let reference = cur;

    let ds = env.state_dim();
    let mut g = DMatrix::zeros(ds, n);
    let mut a = zeros;
    for j in 0..n {
        a[j] = eps;
        let mut up = env.propagate(s, &a)?;
        a[j] = -eps;
        let mut down = env.propagate(s, &a)?;
        a[j] = 0.0;
        env.unwrap_relative(&reference, &mut up);
        env.unwrap_relative(&reference, &mut down);
        for i in 0..ds {
            g[(i, j)] = (up[i] - down[i]) / (2.0 * eps);
        }
    }
    Ok(NumericG {
        matrix: g,
        discontinuity,
    })
}

/// Anything that yields a channel matrix for a state.
pub trait EmpowermentSource: Sync {
    fn channel_matrix(&self, s: &[f64]) -> Result<DMatrix<f64>>;
    /// `analytic`, `numeric`, `learned` or `constant`.
    fn kind(&self) -> &'static str;
    fn horizon(&self) -> usize;

    fn empowerment(&self, s: &[f64], settings: &CapacitySettings) -> Result<f64> {
        empowerment_with(&self.channel_matrix(s)?, settings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticSource {
    pub config: AnalyticPendulumConfig,
    pub variant: GVariant,
}

impl EmpowermentSource for AnalyticSource {
    fn channel_matrix(&self, s: &[f64]) -> Result<DMatrix<f64>> {
        if s.len() != 2 {
            return Err(Error::shape(2, s.len()));
        }
        ensure_finite(s, "state")?;
        Ok(analytic_g_pendulum(s, &self.config, self.variant))
    }
    fn kind(&self) -> &'static str {
        "analytic"
    }
    fn horizon(&self) -> usize {
        PENDULUM_HORIZON
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NumericSource {
    pub env: Environment,
    pub horizon: usize,
    pub eps: f64,
}

impl EmpowermentSource for NumericSource {
    fn channel_matrix(&self, s: &[f64]) -> Result<DMatrix<f64>> {
        Ok(numeric_g(&self.env, s, self.horizon, self.eps)?.matrix)
    }
    fn kind(&self) -> &'static str {
        "numeric"
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
}

impl EmpowermentSource for ChannelModel {
    fn channel_matrix(&self, s: &[f64]) -> Result<DMatrix<f64>> {
        ChannelModel::channel_matrix(self, s)
    }
    fn kind(&self) -> &'static str {
        "learned"
    }
    fn horizon(&self) -> usize {
        ChannelModel::horizon(self)
    }
}

/// The same matrix everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantSource(pub DMatrix<f64>);

impl EmpowermentSource for ConstantSource {
    fn channel_matrix(&self, _s: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.0.clone())
    }
    fn kind(&self) -> &'static str {
        "constant"
    }
    fn horizon(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    /// Index of the state component this axis sweeps.
    pub component: usize,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Axis {
    pub fn breakpoints(&self) -> Vec<f64> {
        let n = self.points;
        (0..n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.points < 2 || !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "axis {}: need ≥ 2 points and lo < hi",
                self.name
            )));
        }
        Ok(())
    }
}

/// Two swept state components; the rest are held at `base_state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axis1: Axis,
    pub axis2: Axis,
    pub base_state: Vec<f64>,
}

impl GridSpec {
    /// 61×61 over θ ∈ [−π, π], θ̇ ∈ [−8, 8].
    pub fn pendulum_default() -> Self {
        use std::f64::consts::PI;
        Self {
            axis1: Axis {
                name: "theta".into(),
                component: 0,
                lo: -PI,
                hi: PI,
                points: 61,
            },
            axis2: Axis {
                name: "theta_dot".into(),
                component: 1,
                lo: -8.0,
                hi: 8.0,
                points: 61,
            },
            base_state: vec![0.0, 0.0],
        }
    }

    /// The grid used when a run config does not give one.
    pub fn default_for(env: &Environment) -> Self {
        use std::f64::consts::PI;
        let axis = |name: &str, component, lo, hi, points| Axis {
            name: String::from(name),
            component,
            lo,
            hi,
            points,
        };
        match env {
            Environment::Pendulum(_) => Self::pendulum_default(),
            Environment::BallInBox(b) => Self::planar(b.size, 20),
            Environment::Tunnel(t) => Self::planar(t.size, 40),
            Environment::CartPole(_) => Self {
                axis1: axis("theta", 2, -PI, PI, 41),
                axis2: axis("theta_dot", 3, -5.0, 5.0, 41),
                base_state: vec![0.0; 4],
            },
            Environment::DoubleIntegrator(_) => Self {
                axis1: axis("x", 0, -5.0, 5.0, 21),
                axis2: axis("v", 1, -3.0, 3.0, 21),
                base_state: vec![0.0; 2],
            },
        }
    }

    /// Cell centers of an `n × n` partition of a square `[0, size]²`.
    pub fn planar(size: f64, n: usize) -> Self {
        let h = size / n as f64 / 2.0;
        let axis = |name: &str, component| Axis {
            name: name.into(),
            component,
            lo: h,
            hi: size - h,
            points: n,
        };
        Self {
            axis1: axis("x", 0),
            axis2: axis("y", 1),
            base_state: vec![0.0, 0.0],
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        self.axis1.validate()?;
        self.axis2.validate()?;
        if self.base_state.len() != state_dim {
            return Err(Error::Config(format!(
                "grid base_state has {} components, environment has {state_dim}",
                self.base_state.len()
            )));
        }
        if self.axis1.component >= state_dim
            || self.axis2.component >= state_dim
            || self.axis1.component == self.axis2.component
        {
            return Err(Error::Config("grid axes must be distinct state components".into()));
        }
        Ok(())
    }

    pub fn state(&self, x1: f64, x2: f64) -> Vec<f64> {
        let mut s = self.base_state.clone();
        s[self.axis1.component] = x1;
        s[self.axis2.component] = x2;
        s
    }
}

/// Empowerment tabulated over a 2-D state grid; `values[i][j]` belongs to
/// `(axis1[i], axis2[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub spec: GridSpec,
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub power: f64,
    pub horizon: usize,
    pub source: String,
    pub use_sigma_squared: bool,
}

pub fn landscape(
    source: &dyn EmpowermentSource,
    spec: &GridSpec,
    settings: &CapacitySettings,
) -> Result<LandscapeGrid> {
    spec.axis1.validate()?;
    spec.axis2.validate()?;
    settings.validate()?;
    let a1 = spec.axis1.breakpoints();
    let a2 = spec.axis2.breakpoints();
    let n2 = a2.len();
    let cells = par::map_range(a1.len() * n2, |k| {
        source.empowerment(&spec.state(a1[k / n2], a2[k % n2]), settings)
    });
    let mut flat = Vec::with_capacity(cells.len());
    for c in cells {
        flat.push(c?);
    }
    let values = flat.chunks(n2).map(|r| r.to_vec()).collect();
    Ok(LandscapeGrid {
        spec: spec.clone(),
        axis1: a1,
        axis2: a2,
        values,
        power: settings.power,
        horizon: source.horizon(),
        source: source.kind().into(),
        use_sigma_squared: settings.use_sigma_squared,
    })
}

impl LandscapeGrid {
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Grid indices of the largest value (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > self.values[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        best
    }

    /// `axis1,axis2,empowerment`, one row per cell, axis1 outermost.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis1,axis2,empowerment\n");
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                out.push_str(&crate::io::csv_row(&[self.axis1[i], self.axis2[j], *v]));
                out.push('\n');
            }
        }
        out
    }

    /// Sidecar metadata. `timestamp` is the only field allowed to differ
    /// between otherwise identical runs.
    pub fn metadata(&self, seed: u64, timestamp: Option<u64>) -> serde_json::Value {
        serde_json::json!({
            "schema_version": crate::SCHEMA_VERSION,
            "code_version": env!("CARGO_PKG_VERSION"),
            "source": self.source,
            "power": self.power,
            "horizon": self.horizon,
            "use_sigma_squared": self.use_sigma_squared,
            "seed": seed,
            "grid": self.spec,
            "axis1_name": self.spec.axis1.name,
            "axis2_name": self.spec.axis2.name,
            "timestamp": timestamp,
        })
    }
}
