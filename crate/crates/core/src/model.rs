//! Problem data: drift, diffusion, running and terminal costs, action set and the
//! declared regularity constants, drawn from a registry of bounded Lipschitz families.
//!
//! Measures enter every family only through the coordinate-wise statistic
//! `∫ tanh(y_i) μ(dy)`, so evaluating on an empirical measure is linear in its support.

use crate::error::{Error, Result};
use crate::measure::{wasserstein1, EmpiricalMeasure};
use crate::rng::NoiseSource;
use serde::{Deserialize, Serialize};

/// Maximum of `d/dx [x² / (1 + x²)]`, also of `d/dx [1 / (1 + x²)]` in absolute value.
pub const SATURATION_SLOPE: f64 = 0.649_519_052_838_329; // 3√3/8

/// Registry key plus real parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionRef {
    pub id: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl FunctionRef {
    pub fn new(id: &str, params: &[f64]) -> Self {
        Self {
            id: id.to_string(),
            params: params.to_vec(),
        }
    }
}

/// Declared Lipschitz and bound constants (C1..C4).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Lipschitz constant of (b, σ) in (x, μ).
    pub c1: f64,
    /// Bound on |b| + |σ|.
    pub c2: f64,
    /// Lipschitz constant of (c, c_T) in (x, μ).
    pub c3: f64,
    /// Bound on |c| + |c_T|.
    pub c4: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSetKind {
    IntervalBox,
    Finite,
}

/// Compact action set: a box of closed intervals or an explicit point list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub kind: ActionSetKind,
    /// `[lo, hi]` per coordinate for a box.
    #[serde(default)]
    pub bounds: Vec<[f64; 2]>,
    /// Explicit points for a finite set.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    /// Points per coordinate when a box is discretized.
    #[serde(default)]
    pub quantization_count: Vec<usize>,
}

impl ActionSet {
    pub fn interval(lo: f64, hi: f64, count: usize) -> Self {
        Self {
            kind: ActionSetKind::IntervalBox,
            bounds: vec![[lo, hi]],
            points: Vec::new(),
            quantization_count: vec![count],
        }
    }

    pub fn boxed(bounds: Vec<[f64; 2]>, count: usize) -> Self {
        let n = bounds.len();
        Self {
            kind: ActionSetKind::IntervalBox,
            bounds,
            points: Vec::new(),
            quantization_count: vec![count; n],
        }
    }

    pub fn finite(points: Vec<Vec<f64>>) -> Self {
        Self {
            kind: ActionSetKind::Finite,
            bounds: Vec::new(),
            points,
            quantization_count: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ActionSetKind::IntervalBox => {
                if self.bounds.is_empty() {
                    return Err(Error::config("model", "action box needs at least one interval"));
                }
                if self.bounds.iter().any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
                    return Err(Error::config("model", "action intervals must be finite with lo <= hi"));
                }
                if self.quantization_count.len() != self.bounds.len() {
                    return Err(Error::config(
                        "model",
                        "action quantization_count needs one entry per coordinate",
                    ));
                }
                for (&[lo, hi], &q) in self.bounds.iter().zip(&self.quantization_count) {
                    if q == 0 || (q == 1 && lo < hi) {
                        return Err(Error::config(
                            "model",
                            "a non-degenerate action interval needs at least 2 grid points",
                        ));
                    }
                }
            }
            ActionSetKind::Finite => {
                let Some(first) = self.points.first() else {
                    return Err(Error::config("model", "finite action set is empty"));
                };
                if first.is_empty()
                    || self.points.iter().any(|p| p.len() != first.len() || p.iter().any(|v| !v.is_finite()))
                {
                    return Err(Error::config("model", "finite action points must share a dimension"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ActionSetKind::IntervalBox => self.bounds.len(),
            ActionSetKind::Finite => self.points.first().map_or(0, |p| p.len()),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        match self.kind {
            ActionSetKind::IntervalBox => self
                .bounds
                .iter()
                .zip(u)
                .all(|(&[lo, hi], &v)| lo <= v && v <= hi),
            ActionSetKind::Finite => self.points.iter().any(|p| p.as_slice() == u),
        }
    }

    /// Finite grid of actions: the product of per-coordinate grids with both endpoints
    /// included (box), or the explicit points (finite). Coordinate 0 varies slowest.
    pub fn grid_points(&self) -> Vec<Vec<f64>> {
        match self.kind {
            ActionSetKind::Finite => self.points.clone(),
            ActionSetKind::IntervalBox => {
                let axes: Vec<Vec<f64>> = self
                    .bounds
                    .iter()
                    .zip(&self.quantization_count)
                    .map(|(&[lo, hi], &q)| {
                        if q <= 1 {
                            vec![lo]
                        } else {
                            (0..q)
                                .map(|i| {
                                    if i + 1 == q {
                                        hi
                                    } else {
                                        lo + (hi - lo) * i as f64 / (q - 1) as f64
                                    }
                                })
                                .collect()
                        }
                    })
                    .collect();
                let mut out: Vec<Vec<f64>> = vec![Vec::new()];
                for axis in axes {
                    out = out
                        .into_iter()
                        .flat_map(|prefix| {
                            axis.iter().map(move |&v| {
                                let mut p = prefix.clone();
                                p.push(v);
                                p
                            })
                        })
                        .collect();
                }
                out
            }
        }
    }

    /// Largest Euclidean norm of an action.
    pub fn max_norm(&self) -> f64 {
        match self.kind {
            ActionSetKind::IntervalBox => self
                .bounds
                .iter()
                .map(|[lo, hi]| lo.abs().max(hi.abs()).powi(2))
                .sum::<f64>()
                .sqrt(),
            ActionSetKind::Finite => self.points.iter().map(|p| norm(p)).fold(0.0, f64::max),
        }
    }

    /// Maps uniforms in (0,1) to an action.
    pub fn sample(&self, uniforms: &[f64]) -> Vec<f64> {
        match self.kind {
            ActionSetKind::IntervalBox => self
                .bounds
                .iter()
                .zip(uniforms)
                .map(|(&[lo, hi], &v)| lo + (hi - lo) * v)
                .collect(),
            ActionSetKind::Finite => {
                let k = ((uniforms[0] * self.points.len() as f64) as usize).min(self.points.len() - 1);
                self.points[k].clone()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Drift {
    /// θ1·tanh(x_i) + θ2·∫tanh(y_i)dμ + u_i
    Satmr { theta1: f64, theta2: f64 },
    /// fixed vector, control ignored
    Constant(Vec<f64>),
    /// gain·u
    Control { gain: f64 },
}

#[derive(Debug, Clone, PartialEq)]
enum Diffusion {
    /// diagonal σ0 + σ1 / (1 + x_i²)
    Satmr { sigma0: f64, sigma1: f64 },
    /// σ0·I
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum RunningCost {
    /// Σ x_i²/(1+x_i²) + λ|u|² + γ|∫tanh dμ|²
    Satmr { lambda: f64, gamma: f64 },
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
enum TerminalCost {
    /// w·Σ x_i²/(1+x_i²)
    Satmr { weight: f64 },
    Constant(f64),
}

fn params_exact<const K: usize>(f: &FunctionRef, role: &str, defaults: [f64; K]) -> Result<[f64; K]> {
    if f.params.is_empty() {
        return Ok(defaults);
    }
    if f.params.len() != K {
        return Err(Error::config(
            "model",
            format!("{role} '{}' takes {K} parameters, got {}", f.id, f.params.len()),
        ));
    }
    if f.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::config("model", format!("{role} '{}' has a non-finite parameter", f.id)));
    }
    let mut out = [0.0; K];
    out.copy_from_slice(&f.params);
    Ok(out)
}

fn unknown(role: &str, id: &str) -> Error {
    Error::config("model", format!("unknown {role} registry key '{id}'"))
}

/// Registry keys per role.
pub const DRIFT_KEYS: &[&str] = &["satmr", "constant", "control"];
pub const DIFFUSION_KEYS: &[&str] = &["satmr", "constant"];
pub const RUNNING_COST_KEYS: &[&str] = &["satmr", "constant"];
pub const TERMINAL_COST_KEYS: &[&str] = &["satmr", "constant"];

/// Serializable description of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub action_set: ActionSet,
    pub drift: FunctionRef,
    pub diffusion: FunctionRef,
    pub running_cost: FunctionRef,
    pub terminal_cost: FunctionRef,
    pub constants: Constants,
    pub initial_state: Vec<f64>,
}

/// A validated, immutable mean-field control problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    config: ModelConfig,
    drift: Drift,
    diffusion: Diffusion,
    running: RunningCost,
    terminal: TerminalCost,
}

/// Measure statistics consumed by the registered families: `∫ tanh(y_i) μ(dy)` per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanField {
    pub tanh_mean: Vec<f64>,
}

impl MeanField {
    pub fn of(mu: &EmpiricalMeasure) -> Self {
        let mut m = vec![0.0; mu.dim()];
        for (x, w) in mu.iter() {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += w * xi.tanh();
            }
        }
        Self { tanh_mean: m }
    }

    /// Statistic of the uniform measure on `particles` (row-major, `dim` columns),
    /// summed in particle order.
    pub fn of_particles(dim: usize, particles: &[f64]) -> Self {
        let n = particles.len() / dim;
        let mut m = vec![0.0; dim];
        for p in particles.chunks_exact(dim) {
            for (mi, xi) in m.iter_mut().zip(p) {
                *mi += xi.tanh();
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        Self { tanh_mean: m }
    }
}

impl ModelSpec {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let d = config.dim;
        if d == 0 {
            return Err(Error::config("model", "dim must be positive"));
        }
        config.action_set.validate()?;
        if config.initial_state.len() != d || config.initial_state.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("model", "initial_state must be a finite vector of length dim"));
        }
        let c = config.constants;
        if [c.c1, c.c2, c.c3, c.c4].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("model", "constants C1..C4 must be finite and nonnegative"));
        }

        let drift = match config.drift.id.as_str() {
            "satmr" => {
                let [theta1, theta2] = params_exact(&config.drift, "drift", [-0.5, 0.5])?;
                Drift::Satmr { theta1, theta2 }
            }
            "constant" => {
                let p = &config.drift.params;
                let v = match p.len() {
                    0 => vec![0.0; d],
                    1 => vec![p[0]; d],
                    k if k == d => p.clone(),
                    _ => return Err(Error::config("model", "constant drift takes 1 or dim parameters")),
                };
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::config("model", "constant drift must be finite"));
                }
                Drift::Constant(v)
            }
            "control" => {
                let [gain] = params_exact(&config.drift, "drift", [1.0])?;
                Drift::Control { gain }
            }
            other => return Err(unknown("drift", other)),
        };
        if matches!(drift, Drift::Satmr { .. } | Drift::Control { .. }) && config.action_set.dim() != d {
            return Err(Error::config(
                "model",
                format!("drift '{}' needs actions of dimension {d}", config.drift.id),
            ));
        }
        let diffusion = match config.diffusion.id.as_str() {
            "satmr" => {
                let [sigma0, sigma1] = params_exact(&config.diffusion, "diffusion", [0.5, 0.25])?;
                Diffusion::Satmr { sigma0, sigma1 }
            }
            "constant" => {
                let [s] = params_exact(&config.diffusion, "diffusion", [1.0])?;
                Diffusion::Constant(s)
            }
            other => return Err(unknown("diffusion", other)),
        };
        let running = match config.running_cost.id.as_str() {
            "satmr" => {
                let [lambda, gamma] = params_exact(&config.running_cost, "running_cost", [0.1, 0.5])?;
                RunningCost::Satmr { lambda, gamma }
            }
            "constant" => {
                let [v] = params_exact(&config.running_cost, "running_cost", [0.0])?;
                RunningCost::Constant(v)
            }
            other => return Err(unknown("running_cost", other)),
        };
        let terminal = match config.terminal_cost.id.as_str() {
            "satmr" => {
                let [weight] = params_exact(&config.terminal_cost, "terminal_cost", [1.0])?;
                TerminalCost::Satmr { weight }
            }
            "constant" => {
                let [v] = params_exact(&config.terminal_cost, "terminal_cost", [0.0])?;
                TerminalCost::Constant(v)
            }
            other => return Err(unknown("terminal_cost", other)),
        };
        Ok(Self {
            config,
            drift,
            diffusion,
            running,
            terminal,
        })
    }

    /// The default saturated mean-reverting model in one dimension.
    pub fn satmr_default() -> Self {
        Self::new(satmr_config(-0.5, 0.5, 1.0, 0.5, 0.25, 0.1, 0.5)).expect("built-in model is valid")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn action_set(&self) -> &ActionSet {
        &self.config.action_set
    }

    pub fn constants(&self) -> Constants {
        self.config.constants
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.config.initial_state
    }

    /// Whether σ is diagonal for every input (true for every registered family).
    pub fn has_diagonal_diffusion(&self) -> bool {
        true
    }

    /// Infimum over inputs of the smallest diagonal entry of σ, when the family
    /// guarantees one.
    pub fn min_diffusion(&self) -> f64 {
        match self.diffusion {
            Diffusion::Satmr { sigma0, sigma1 } => {
                if sigma1 >= 0.0 {
                    sigma0
                } else {
                    sigma0 + sigma1
                }
            }
            Diffusion::Constant(s) => s.abs(),
        }
    }

    pub fn is_zero_diffusion(&self) -> bool {
        match self.diffusion {
            Diffusion::Satmr { sigma0, sigma1 } => sigma0 == 0.0 && sigma1 == 0.0,
            Diffusion::Constant(s) => s == 0.0,
        }
    }

    /// Drift `b(x, μ, u)` written into `out`.
    #[inline]
    pub fn drift_into(&self, x: &[f64], mf: &MeanField, u: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Satmr { theta1, theta2 } => {
                for i in 0..out.len() {
                    out[i] = theta1 * x[i].tanh() + theta2 * mf.tanh_mean[i] + u[i];
                }
            }
            Drift::Constant(v) => out.copy_from_slice(v),
            Drift::Control { gain } => {
                for i in 0..out.len() {
                    out[i] = gain * u[i];
                }
            }
        }
    }

    /// Diagonal of `σ(x, μ)` written into `out`.
    #[inline]
    pub fn diffusion_diag_into(&self, x: &[f64], _mf: &MeanField, out: &mut [f64]) {
        match self.diffusion {
            Diffusion::Satmr { sigma0, sigma1 } => {
                for i in 0..out.len() {
                    out[i] = sigma0 + sigma1 / (1.0 + x[i] * x[i]);
                }
            }
            Diffusion::Constant(s) => out.iter_mut().for_each(|o| *o = s),
        }
    }

    #[inline]
    pub fn running_cost(&self, x: &[f64], mf: &MeanField, u: &[f64]) -> f64 {
        match self.running {
            RunningCost::Satmr { lambda, gamma } => {
                let state: f64 = x.iter().map(|v| v * v / (1.0 + v * v)).sum();
                let effort: f64 = u.iter().map(|v| v * v).sum();
                let herd: f64 = mf.tanh_mean.iter().map(|v| v * v).sum();
                state + lambda * effort + gamma * herd
            }
            RunningCost::Constant(v) => v,
        }
    }

    #[inline]
    pub fn terminal_cost(&self, x: &[f64], _mf: &MeanField) -> f64 {
        match self.terminal {
            TerminalCost::Satmr { weight } => weight * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>(),
            TerminalCost::Constant(v) => v,
        }
    }

    /// Whether the running cost is the same constant for every input.
    pub fn constant_running_cost(&self) -> Option<f64> {
        match self.running {
            RunningCost::Constant(v) => Some(v),
            _ => None,
        }
    }

    /// Constants derived by hand for the registered families (Euclidean norm on
    /// vectors, Frobenius norm on σ).
    pub fn analytic_constants(&self) -> Constants {
        let d = self.dim() as f64;
        let sd = d.sqrt();
        let k = SATURATION_SLOPE;
        let umax = self.action_set().max_norm();
        let (lip_b_x, lip_b_mu, bound_b) = match &self.drift {
            Drift::Satmr { theta1, theta2 } => {
                (theta1.abs(), sd * theta2.abs(), sd * (theta1.abs() + theta2.abs()) + umax)
            }
            Drift::Constant(v) => (0.0, 0.0, norm(v)),
            Drift::Control { gain } => (0.0, 0.0, gain.abs() * umax),
        };
        let (lip_s, bound_s) = match self.diffusion {
            Diffusion::Satmr { sigma0, sigma1 } => {
                let sup = sigma0.abs().max((sigma0 + sigma1).abs());
                (k * sigma1.abs(), sd * sup)
            }
            Diffusion::Constant(s) => (0.0, sd * s.abs()),
        };
        let (lip_c_x, lip_c_mu, bound_c) = match self.running {
            RunningCost::Satmr { lambda, gamma } => {
                (k * sd, 2.0 * gamma.abs() * d, d + lambda.abs() * umax * umax + gamma.abs() * d)
            }
            RunningCost::Constant(v) => (0.0, 0.0, v.abs()),
        };
        let (lip_t_x, bound_t) = match self.terminal {
            TerminalCost::Satmr { weight } => (k * sd * weight.abs(), weight.abs() * d),
            TerminalCost::Constant(v) => (0.0, v.abs()),
        };
        Constants {
            c1: (lip_b_x + lip_s).max(lip_b_mu),
            c2: bound_b + bound_s,
            c3: (lip_c_x + lip_t_x).max(lip_c_mu),
            c4: bound_c + bound_t,
        }
    }

    /// Copy of this model with different declared constants.
    pub fn with_constants(&self, constants: Constants) -> Self {
        let mut out = self.clone();
        out.config.constants = constants;
        out
    }
}

/// Config for the "satmr" family in one dimension with actions in `[-u_max, u_max]`
/// (3 grid points) and initial state 0. Declared constants are the analytic ones.
pub fn satmr_config(
    theta1: f64,
    theta2: f64,
    u_max: f64,
    sigma0: f64,
    sigma1: f64,
    lambda: f64,
    gamma: f64,
) -> ModelConfig {
    let mut cfg = ModelConfig {
        dim: 1,
        action_set: ActionSet::interval(-u_max, u_max, 3),
        drift: FunctionRef::new("satmr", &[theta1, theta2]),
        diffusion: FunctionRef::new("satmr", &[sigma0, sigma1]),
        running_cost: FunctionRef::new("satmr", &[lambda, gamma]),
        terminal_cost: FunctionRef::new("satmr", &[1.0]),
        constants: Constants {
            c1: 0.0,
            c2: 0.0,
            c3: 0.0,
            c4: 0.0,
        },
        initial_state: vec![0.0],
    };
    if let Ok(m) = ModelSpec::new(cfg.clone()) {
        cfg.constants = m.analytic_constants();
    }
    cfg
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Drift vector and full diffusion matrix (row-major `d x d`) at one point.
pub fn evaluate_dynamics(
    model: &ModelSpec,
    x: &[f64],
    mu: &EmpiricalMeasure,
    u: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    if x.len() != d || mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if x.len() != d { x.len() } else { mu.dim() },
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("state must be finite".into()));
    }
    if !model.action_set().contains(u) {
        return Err(Error::Domain(format!("action {u:?} is outside the action set")));
    }
    let mf = MeanField::of(mu);
    let mut b = vec![0.0; d];
    model.drift_into(x, &mf, u, &mut b);
    let mut diag = vec![0.0; d];
    model.diffusion_diag_into(x, &mf, &mut diag);
    let mut sigma = vec![0.0; d * d];
    for i in 0..d {
        sigma[i * d + i] = diag[i];
    }
    if b.iter().chain(&sigma).any(|v| !v.is_finite()) {
        return Err(Error::ModelDefinition("non-finite drift or diffusion".into()));
    }
    Ok((b, sigma))
}

/// Largest ratios and magnitudes observed by [`validate_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    pub declared: Constants,
    pub drift_lipschitz: f64,
    pub diffusion_lipschitz: f64,
    /// `(|Δb| + |Δσ|) / (|Δx| + W1)`, checked against C1.
    pub dynamics_lipschitz: f64,
    pub running_cost_lipschitz: f64,
    pub terminal_cost_lipschitz: f64,
    /// `(|Δc| + |Δc_T|) / (|Δx| + W1)`, checked against C3.
    pub cost_lipschitz: f64,
    pub max_drift: f64,
    pub max_diffusion: f64,
    /// `|b| + |σ|`, checked against C2.
    pub max_dynamics: f64,
    pub max_running_cost: f64,
    pub max_terminal_cost: f64,
    /// `|c| + |c_T|`, checked against C4.
    pub max_cost: f64,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Sequential uniforms from a counter-based stream.
pub(crate) struct UniformStream {
    src: NoiseSource,
    stream: u32,
    counter: u32,
    buf: [f64; 2],
    used: usize,
}

impl UniformStream {
    pub(crate) fn new(seed: u64, stream: u32) -> Self {
        Self {
            src: NoiseSource::new(seed),
            stream,
            counter: 0,
            buf: [0.0; 2],
            used: 2,
        }
    }

    pub(crate) fn next(&mut self) -> f64 {
        if self.used == 2 {
            self.buf = self.src.uniform_pair(u32::MAX, self.stream, self.counter, 0);
            self.counter = self.counter.wrapping_add(1);
            self.used = 0;
        }
        self.used += 1;
        self.buf[self.used - 1]
    }
}

const AUDIT_RADIUS: f64 = 4.0;

fn random_measure(d: usize, rng: &mut UniformStream) -> EmpiricalMeasure {
    let k = 1 + (rng.next() * 6.0) as usize;
    let atoms: Vec<f64> = (0..k * d).map(|_| AUDIT_RADIUS * (2.0 * rng.next() - 1.0)).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.next() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
    let rest: f64 = weights[1..].iter().sum();
    weights[0] = 1.0 - rest;
    EmpiricalMeasure::new(d, atoms, weights).expect("audit measure is valid")
}

/// Randomized audit of the declared constants.
///
/// Pairs alternate between independent draws and small perturbations of one another,
/// so both global and local slopes are probed.
pub fn validate_model(model: &ModelSpec, samples: usize, seed: u64) -> Result<AuditReport> {
    if samples == 0 {
        return Err(Error::config("model", "audit needs at least one sample"));
    }
    let d = model.dim();
    let mut rng = UniformStream::new(seed, 0);
    let declared = model.constants();
    let mut r = AuditReport {
        samples,
        declared,
        drift_lipschitz: 0.0,
        diffusion_lipschitz: 0.0,
        dynamics_lipschitz: 0.0,
        running_cost_lipschitz: 0.0,
        terminal_cost_lipschitz: 0.0,
        cost_lipschitz: 0.0,
        max_drift: 0.0,
        max_diffusion: 0.0,
        max_dynamics: 0.0,
        max_running_cost: 0.0,
        max_terminal_cost: 0.0,
        max_cost: 0.0,
        violations: Vec::new(),
    };
    let ud = model.action_set().dim();
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    let mut sx = vec![0.0; d];
    let mut sy = vec![0.0; d];
    for s in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| AUDIT_RADIUS * (2.0 * rng.next() - 1.0)).collect();
        let mu = random_measure(d, &mut rng);
        let (y, nu) = if s % 2 == 0 {
            let y: Vec<f64> = (0..d).map(|_| AUDIT_RADIUS * (2.0 * rng.next() - 1.0)).collect();
            (y, random_measure(d, &mut rng))
        } else {
            let scale = 10f64.powf(-3.0 * rng.next());
            let y: Vec<f64> = x.iter().map(|v| v + scale * (2.0 * rng.next() - 1.0)).collect();
            let shift: Vec<f64> = (0..d).map(|_| scale * (2.0 * rng.next() - 1.0)).collect();
            (y, mu.shifted(&shift))
        };
        let uu: Vec<f64> = (0..ud).map(|_| rng.next()).collect();
        let u = model.action_set().sample(&uu);

        let mx = MeanField::of(&mu);
        let my = MeanField::of(&nu);
        model.drift_into(&x, &mx, &u, &mut bx);
        model.drift_into(&y, &my, &u, &mut by);
        model.diffusion_diag_into(&x, &mx, &mut sx);
        model.diffusion_diag_into(&y, &my, &mut sy);
        let cx = model.running_cost(&x, &mx, &u);
        let cy = model.running_cost(&y, &my, &u);
        let tx = model.terminal_cost(&x, &mx);
        let ty = model.terminal_cost(&y, &my);
        if bx.iter().chain(&sx).chain([&cx, &tx]).any(|v| !v.is_finite()) {
            return Err(Error::ModelDefinition("non-finite model output during audit".into()));
        }

        let nb = norm(&bx);
        let ns = norm(&sx);
        r.max_drift = r.max_drift.max(nb);
        r.max_diffusion = r.max_diffusion.max(ns);
        r.max_dynamics = r.max_dynamics.max(nb + ns);
        r.max_running_cost = r.max_running_cost.max(cx.abs());
        r.max_terminal_cost = r.max_terminal_cost.max(tx.abs());
        r.max_cost = r.max_cost.max(cx.abs() + tx.abs());

        let dist = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>()) + wasserstein1(&mu, &nu)?;
        if dist > 0.0 {
            let db = norm(&bx.iter().zip(&by).map(|(a, b)| a - b).collect::<Vec<_>>());
            let ds = norm(&sx.iter().zip(&sy).map(|(a, b)| a - b).collect::<Vec<_>>());
            let dc = (cx - cy).abs();
            let dt = (tx - ty).abs();
            r.drift_lipschitz = r.drift_lipschitz.max(db / dist);
            r.diffusion_lipschitz = r.diffusion_lipschitz.max(ds / dist);
            r.dynamics_lipschitz = r.dynamics_lipschitz.max((db + ds) / dist);
            r.running_cost_lipschitz = r.running_cost_lipschitz.max(dc / dist);
            r.terminal_cost_lipschitz = r.terminal_cost_lipschitz.max(dt / dist);
            r.cost_lipschitz = r.cost_lipschitz.max((dc + dt) / dist);
        }
    }
    let exceeds = |obs: f64, decl: f64| obs > decl * (1.0 + 1e-9) + 1e-12;
    let checks = [
        ("C1 (Lipschitz of b, sigma)", r.dynamics_lipschitz, declared.c1),
        ("C2 (bound of |b| + |sigma|)", r.max_dynamics, declared.c2),
        ("C3 (Lipschitz of c, c_T)", r.cost_lipschitz, declared.c3),
        ("C4 (bound of |c| + |c_T|)", r.max_cost, declared.c4),
    ];
    for (name, obs, decl) in checks {
        if exceeds(obs, decl) {
            r.violations.push(format!("{name}: observed {obs} > declared {decl}"));
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_model(b: f64, sigma: f64) -> ModelSpec {
        ModelSpec::new(ModelConfig {
            dim: 1,
            action_set: ActionSet::interval(-1.0, 1.0, 3),
            drift: FunctionRef::new("constant", &[b]),
            diffusion: FunctionRef::new("constant", &[sigma]),
            running_cost: FunctionRef::new("constant", &[0.0]),
            terminal_cost: FunctionRef::new("constant", &[0.0]),
            constants: Constants { c1: 0.0, c2: b.abs() + sigma.abs(), c3: 0.0, c4: 0.0 },
            initial_state: vec![0.0],
        })
        .unwrap()
    }

    #[test]
    fn satmr_at_origin() {
        let m = ModelSpec::satmr_default();
        let mu = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let (b, s) = evaluate_dynamics(&m, &[0.0], &mu, &[0.0]).unwrap();
        assert_eq!(b, vec![0.0]);
        // σ0 + σ1 / (1 + 0)
        assert_eq!(s, vec![0.5 + 0.25]);
    }

    #[test]
    fn satmr_mean_field_term() {
        let m = ModelSpec::new(satmr_config(0.0, 1.0, 1.0, 0.5, 0.0, 0.1, 0.5)).unwrap();
        let mu = EmpiricalMeasure::dirac(&[10.0]).unwrap();
        let (b, _) = evaluate_dynamics(&m, &[0.0], &mu, &[0.0]).unwrap();
        // tanh(10) = 1 - 2/(e^20 + 1)
        let expected = 1.0 - 2.0 / (20f64.exp() + 1.0);
        assert!((b[0] - expected).abs() < 1e-15);
        assert!((b[0] - 0.999_999_995_877_692_8).abs() < 1e-15);
    }

    #[test]
    fn evaluation_errors() {
        let m = ModelSpec::satmr_default();
        let mu = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        assert!(evaluate_dynamics(&m, &[0.0], &mu, &[2.0]).is_err());
        assert!(evaluate_dynamics(&m, &[0.0, 1.0], &mu, &[0.0]).is_err());
        let mut cfg = m.config().clone();
        cfg.drift.id = "nope".into();
        let err = ModelSpec::new(cfg).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let m = ModelSpec::satmr_default();
        let c2 = m.constants().c2;
        let mut rng = UniformStream::new(3, 9);
        for _ in 0..10_000 {
            let x = [20.0 * (rng.next() - 0.5)];
            let mu = random_measure(1, &mut rng);
            let u = [2.0 * rng.next() - 1.0];
            let a = evaluate_dynamics(&m, &x, &mu, &u).unwrap();
            let b = evaluate_dynamics(&m, &x, &mu, &u).unwrap();
            assert_eq!(a, b);
            assert!(a.0[0].abs() + a.1[0].abs() <= c2);
        }
    }

    #[test]
    fn audit_zero_drift() {
        let m = constant_model(0.0, 0.0);
        let r = validate_model(&m, 500, 1).unwrap();
        assert_eq!(r.drift_lipschitz, 0.0);
        assert_eq!(r.max_drift, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn audit_flags_misdeclared_bound() {
        let mut m = constant_model(0.0, 1.0);
        m = m.with_constants(Constants { c1: 0.0, c2: 0.0, c3: 0.0, c4: 0.0 });
        let r = validate_model(&m, 10, 1).unwrap();
        assert!(!r.passed());
        assert!(r.violations[0].starts_with("C2"));
    }

    #[test]
    fn analytic_constants_hold_for_satmr() {
        let m = ModelSpec::satmr_default();
        let r = validate_model(&m, 100_000, 11).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        // the audit gets reasonably close to the analytic slope
        assert!(r.dynamics_lipschitz > 0.5 * m.constants().c1);
    }

    #[test]
    fn analytic_constants_hold_in_two_dimensions() {
        let cfg = ModelConfig {
            dim: 2,
            action_set: ActionSet::boxed(vec![[-1.0, 1.0], [-0.5, 0.5]], 3),
            drift: FunctionRef::new("satmr", &[-0.7, 0.9]),
            diffusion: FunctionRef::new("satmr", &[0.4, 0.3]),
            running_cost: FunctionRef::new("satmr", &[0.2, 0.8]),
            terminal_cost: FunctionRef::new("satmr", &[1.5]),
            constants: Constants { c1: 0.0, c2: 0.0, c3: 0.0, c4: 0.0 },
            initial_state: vec![0.0, 0.0],
        };
        let m = ModelSpec::new(cfg).unwrap();
        let m = m.with_constants(m.analytic_constants());
        let r = validate_model(&m, 20_000, 5).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
    }

    #[test]
    fn action_grid_contains_endpoints() {
        let a = ActionSet::boxed(vec![[-1.0, 2.0], [0.0, 0.3]], 4);
        let g = a.grid_points();
        assert_eq!(g.len(), 16);
        assert!(g.contains(&vec![-1.0, 0.0]));
        assert!(g.contains(&vec![2.0, 0.3]));
        assert!(g.iter().all(|p| a.contains(p)));
        assert!(ActionSet::interval(0.0, 1.0, 1).validate().is_err());
        assert!(ActionSet::finite(vec![]).validate().is_err());
    }
}
