//! Convergence and near-optimality experiments with tolerance-band reports.

use crate::em::{advance, refinement_ratio, simulate_with, EnsembleState, SimOptions, StepScratch, TimeGrid};
use crate::error::{Error, Result};
use crate::finite_mdp::{build_transition, solve_discounted, solve_finite_horizon, FiniteModelSpec, ValueIteration};
use crate::measure::{wasserstein1, StateGrid};
use crate::model::{ModelConfig, ModelSpec};
use crate::policy::{evaluate_discounted, evaluate_finite_horizon, EvalOptions, Policy, Truncation};
use crate::rng::NoiseSource;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    StrongError,
    ValueRate,
    Chaos,
    NParticleGap,
    DiscountedRate,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::StrongError,
        ExperimentId::ValueRate,
        ExperimentId::Chaos,
        ExperimentId::NParticleGap,
        ExperimentId::DiscountedRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::StrongError => "strong_error",
            ExperimentId::ValueRate => "value_rate",
            ExperimentId::Chaos => "chaos",
            ExperimentId::NParticleGap => "n_particle_gap",
            ExperimentId::DiscountedRate => "discounted_rate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::config("harness", format!("unknown experiment id '{s}'")))
    }

    fn stochastic(self) -> bool {
        !matches!(self, ExperimentId::ValueRate | ExperimentId::DiscountedRate)
    }
}

/// Quantization used when an experiment solves a finite model. The action grid is
/// the model action set's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSettings {
    pub half_width: f64,
    pub cells_per_axis: usize,
    pub n: u32,
}

impl Default for FiniteSettings {
    fn default() -> Self {
        Self {
            half_width: 1.5,
            cells_per_axis: 5,
            n: 6,
        }
    }
}

impl FiniteSettings {
    pub fn spec(&self, model: &ModelSpec, h: f64) -> Result<FiniteModelSpec> {
        Ok(FiniteModelSpec {
            grid: StateGrid::uniform(model.dim(), self.half_width, self.cells_per_axis)?,
            n: self.n,
            actions: model.action_set().grid_points(),
            h,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub id: ExperimentId,
    pub model: ModelConfig,
    pub horizon: f64,
    /// Step sizes, strictly decreasing.
    pub h_ladder: Vec<f64>,
    pub h_ref: f64,
    /// Particle counts, strictly increasing; the chaos experiment uses the last as reference.
    pub n_ladder: Vec<usize>,
    pub particles: usize,
    /// Replications (or seed draws) per ladder point.
    pub replications: usize,
    pub seed: u64,
    pub finite: FiniteSettings,
    pub discount_rate: f64,
    /// Accepted range of the fitted log-log slope.
    pub slope_band: Option<[f64; 2]>,
    /// Minimum fraction of seed draws where the large population beats the small one.
    pub min_fraction: f64,
}

fn dyadic(from: i32, to: i32, scale: f64) -> Vec<f64> {
    (from..=to).map(|e| scale * 2f64.powi(-e)).collect()
}

impl ExperimentPlan {
    /// Desk-scale defaults on the saturated mean-reversion model with `T = 1`.
    pub fn default_for(id: ExperimentId) -> Self {
        let model = ModelSpec::satmr_default().config().clone();
        let t = 1.0;
        let base = Self {
            id,
            model,
            horizon: t,
            h_ladder: dyadic(3, 7, t),
            h_ref: t * 2f64.powi(-12),
            n_ladder: vec![64, 128, 256, 512],
            particles: 256,
            replications: 256,
            seed: 20240601,
            finite: FiniteSettings::default(),
            discount_rate: 1.0,
            slope_band: None,
            min_fraction: 0.75,
        };
        match id {
            ExperimentId::StrongError => Self {
                slope_band: Some([0.7, 1.3]),
                ..base
            },
            ExperimentId::ValueRate | ExperimentId::DiscountedRate => Self {
                h_ladder: dyadic(2, 6, t),
                replications: 16,
                slope_band: Some([0.25, 1.0]),
                ..base
            },
            ExperimentId::Chaos => Self {
                h_ladder: vec![t * 0.125],
                replications: 32,
                ..base
            },
            ExperimentId::NParticleGap => Self {
                h_ladder: vec![t * 0.125],
                replications: 32,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config("harness", m));
        if self.h_ladder.is_empty() || self.h_ladder.iter().any(|h| !(*h > 0.0)) {
            return bad("h ladder must hold positive step sizes".into());
        }
        if self.h_ladder.windows(2).any(|w| !(w[0] > w[1])) {
            return bad("h ladder must be strictly decreasing".into());
        }
        if self.n_ladder.windows(2).any(|w| w[0] >= w[1]) || self.n_ladder.contains(&0) {
            return bad("particle ladder must be strictly increasing and positive".into());
        }
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive".into());
        }
        if self.id.stochastic() && self.replications < 16 {
            return bad(format!(
                "{} needs at least 16 replications, got {}",
                self.id.name(),
                self.replications
            ));
        }
        if self.replications == 0 || self.particles == 0 {
            return bad("replications and particles must be positive".into());
        }
        if matches!(self.id, ExperimentId::Chaos | ExperimentId::NParticleGap) && self.n_ladder.len() < 2 {
            return bad("particle ladder needs at least two entries".into());
        }
        Ok(())
    }
}

/// Statistics at or below this are rounding noise around zero.
pub const DEGENERATE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub param: f64,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// Further per-point statistics, also written as CSV columns.
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Sum of squared residuals of the log-log fit.
    pub residual: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub requirement: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub experiment: ExperimentId,
    pub parameter: String,
    pub statistic: String,
    pub points: Vec<LadderPoint>,
    pub slope: Option<SlopeFit>,
    pub band: Option<[f64; 2]>,
    /// Set when the statistic vanishes somewhere and no slope can be fitted.
    pub degenerate: bool,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

impl RateReport {
    fn new(experiment: ExperimentId, parameter: &str, statistic: &str, points: Vec<LadderPoint>) -> Self {
        Self {
            experiment,
            parameter: parameter.into(),
            statistic: statistic.into(),
            points,
            slope: None,
            band: None,
            degenerate: false,
            checks: Vec::new(),
            warnings: Vec::new(),
            passed: true,
        }
    }

    /// Fits the slope of the estimates against the parameter and checks it against `band`.
    fn fit(&mut self, band: Option<[f64; 2]>) {
        let xs: Vec<f64> = self.points.iter().map(|p| p.param).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.estimate).collect();
        self.band = band;
        if ys.iter().any(|&y| !(y > DEGENERATE_FLOOR)) {
            self.degenerate = true;
            self.warnings.push(format!(
                "degenerate ladder: {} is zero at some point, no slope fitted",
                self.statistic
            ));
            return;
        }
        self.slope = fit_loglog(&xs, &ys);
        match (&self.slope, band) {
            (Some(fit), Some([lo, hi])) => self.check(
                "slope_in_band",
                fit.slope,
                format!("[{lo}, {hi}]"),
                fit.slope >= lo && fit.slope <= hi,
            ),
            (None, Some(_)) => self
                .warnings
                .push("fewer than 4 ladder points, no slope fitted".into()),
            _ => {}
        }
    }

    fn check(&mut self, name: &str, value: f64, requirement: String, passed: bool) {
        self.passed &= passed;
        self.checks.push(Check {
            name: name.into(),
            value,
            requirement,
            passed,
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per ladder point, then a blank line and the slope summary block.
    pub fn to_csv(&self) -> String {
        let keys: Vec<&String> = self.points.first().map(|p| p.extra.keys().collect()).unwrap_or_default();
        let mut s = format!("{},{},std_error", self.parameter, self.statistic);
        for k in &keys {
            let _ = write!(s, ",{k}");
        }
        s.push('\n');
        let f = crate::fmt_f64;
        for p in &self.points {
            let _ = write!(s, "{},{},", f(p.param), f(p.estimate));
            if let Some(se) = p.std_error {
                s.push_str(&f(se));
            }
            for k in &keys {
                let _ = write!(s, ",{}", p.extra.get(*k).map(|v| f(*v)).unwrap_or_default());
            }
            s.push('\n');
        }
        s.push_str("\nslope,intercept,residual,points,band_low,band_high,degenerate,passed\n");
        let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            opt(self.slope.as_ref().map(|x| x.slope)),
            opt(self.slope.as_ref().map(|x| x.intercept)),
            opt(self.slope.as_ref().map(|x| x.residual)),
            self.slope.as_ref().map(|x| x.points).unwrap_or(0),
            opt(self.band.map(|b| b[0])),
            opt(self.band.map(|b| b[1])),
            self.degenerate,
            self.passed
        );
        s
    }
}

/// Ordinary least squares of `ln y` on `ln x`; needs at least four points.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Option<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 4 {
        return None;
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Some(SlopeFit {
        slope,
        intercept,
        residual,
        points: xs.len(),
    })
}

fn mean_se(samples: &[f64]) -> (f64, Option<f64>) {
    let r = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / r;
    if samples.len() < 2 {
        return (mean, None);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, Some((var / r).sqrt()))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Number of increases along a sequence expected to decrease.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

pub fn run_experiment(plan: &ExperimentPlan) -> Result<RateReport> {
    plan.validate()?;
    match plan.id {
        ExperimentId::StrongError => run_strong_error(plan),
        ExperimentId::ValueRate => run_value_rate(plan),
        ExperimentId::Chaos => run_chaos(plan),
        ExperimentId::NParticleGap => run_n_particle_gap(plan),
        ExperimentId::DiscountedRate => run_discounted_rate(plan),
    }
}

/// Open-loop control cycling through the action grid, constant on the coarsest step.
pub fn strong_error_policy(model: &ModelSpec, coarse: &TimeGrid) -> Vec<Vec<f64>> {
    let points = model.action_set().grid_points();
    (0..coarse.steps().max(1)).map(|k| points[k % points.len()].clone()).collect()
}

/// The coarse policy restated on a grid `ratio` times finer.
fn refine(actions: &[Vec<f64>], ratio: usize, steps: usize) -> Vec<Vec<f64>> {
    (0..steps.max(1)).map(|k| actions[(k / ratio).min(actions.len() - 1)].clone()).collect()
}

struct StrongErrorSample {
    /// sup over reference times of the squared gap to the step-wise constant path
    path_sup: Vec<f64>,
    /// sup over the coarse grid times only
    grid_sup: Vec<f64>,
}

/// One replication: base increments at `h_ref` are drawn once and shared by the
/// reference run and every coarse run.
fn strong_error_replication(
    model: &ModelSpec,
    plan: &ExperimentPlan,
    coarse_actions: &[Vec<f64>],
    coarse_ratio: usize,
    ratios: &[usize],
    fine_steps: usize,
    replication: u32,
) -> Result<StrongErrorSample> {
    let n = plan.particles;
    let d = model.dim();
    let sd = plan.h_ref.sqrt();
    let source = NoiseSource::new(plan.seed);
    let mut inc = vec![0.0; n * fine_steps * d];
    for i in 0..n {
        for j in 0..fine_steps {
            let out = &mut inc[(i * fine_steps + j) * d..(i * fine_steps + j + 1) * d];
            source.standard_normals(replication, i as u32, j as u32, out);
            out.iter_mut().for_each(|v| *v *= sd);
        }
    }
    let base = |i: usize, j: usize| &inc[(i * fine_steps + j) * d..(i * fine_steps + j + 1) * d];

    let run = |ratio: usize, record: &mut dyn FnMut(usize, &EnsembleState)| -> Result<()> {
        let h = plan.h_ref * ratio as f64;
        let steps = fine_steps / ratio;
        let actions = refine(coarse_actions, coarse_ratio / ratio, steps);
        let mut state = EnsembleState::at_point(model.initial_state(), n)?;
        let mut scratch = StepScratch::new(d);
        record(0, &state);
        for k in 0..steps {
            let mf = state.mean_field();
            let u = &actions[k.min(actions.len() - 1)];
            advance(
                model,
                &mut state,
                h,
                |i, _, k, out| {
                    out.iter_mut().for_each(|v| *v = 0.0);
                    for j in k * ratio..(k + 1) * ratio {
                        for (o, b) in out.iter_mut().zip(base(i, j)) {
                            *o += *b;
                        }
                    }
                },
                &mf,
                |_, _| u.as_slice(),
                None,
                &mut scratch,
            )?;
            record(k + 1, &state);
        }
        Ok(())
    };

    let mut reference = Vec::with_capacity((fine_steps + 1) * n * d);
    run(1, &mut |_, s| reference.extend_from_slice(s.particles()))?;
    let stride = n * d;
    let mut path_sup = Vec::with_capacity(ratios.len());
    let mut grid_sup = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut worst_path = vec![0.0f64; n];
        let mut worst_grid = vec![0.0f64; n];
        run(ratio, &mut |k, s| {
            let coarse = s.particles();
            let last = if k * ratio == fine_steps { k * ratio } else { (k + 1) * ratio - 1 };
            for j in k * ratio..=last {
                let fine = &reference[j * stride..(j + 1) * stride];
                for i in 0..n {
                    let e: f64 = (0..d).map(|c| (fine[i * d + c] - coarse[i * d + c]).powi(2)).sum();
                    worst_path[i] = worst_path[i].max(e);
                    if j == k * ratio {
                        worst_grid[i] = worst_grid[i].max(e);
                    }
                }
            }
        })?;
        path_sup.push(worst_path.iter().sum::<f64>() / n as f64);
        grid_sup.push(worst_grid.iter().sum::<f64>() / n as f64);
    }
    Ok(StrongErrorSample { path_sup, grid_sup })
}

/// `E[sup_k |X_ref(t_k) - X_h(t_k)|^2]` per step size, the reference run at `h_ref`
/// sharing the Brownian path. The sup over every reference time, with `X_h` held
/// constant on each step, is reported alongside as `path_sup`.
pub fn run_strong_error(plan: &ExperimentPlan) -> Result<RateReport> {
    plan.validate()?;
    let model = ModelSpec::new(plan.model.clone())?;
    let ref_grid = TimeGrid::new(plan.h_ref, plan.horizon)?;
    let fine_steps = ref_grid.steps();
    let ratios: Vec<usize> = plan
        .h_ladder
        .iter()
        .map(|&h| refinement_ratio(h, plan.h_ref))
        .collect::<Result<_>>()?;
    let coarse_ratio = ratios[0];
    for &r in &ratios {
        if coarse_ratio % r != 0 || fine_steps % r != 0 {
            return Err(Error::config(
                "harness",
                "every step size must divide the coarsest step and the horizon",
            ));
        }
    }
    let coarse_grid = TimeGrid::new(plan.h_ladder[0], plan.horizon)?;
    let coarse_actions = strong_error_policy(&model, &coarse_grid);
    Policy::open_loop(coarse_actions.clone()).check_against(&model)?;

    let samples: Vec<StrongErrorSample> = (0..plan.replications as u32)
        .into_par_iter()
        .map(|r| strong_error_replication(&model, plan, &coarse_actions, coarse_ratio, &ratios, fine_steps, r))
        .collect::<Result<_>>()?;

    let points = plan
        .h_ladder
        .iter()
        .enumerate()
        .map(|(l, &h)| {
            let path: Vec<f64> = samples.iter().map(|s| s.path_sup[l]).collect();
            let grid: Vec<f64> = samples.iter().map(|s| s.grid_sup[l]).collect();
            let (mean, se) = mean_se(&grid);
            let (pmean, pse) = mean_se(&path);
            let mut extra = BTreeMap::new();
            extra.insert("path_sup".into(), pmean);
            extra.insert("path_sup_std_error".into(), pse.unwrap_or(0.0));
            LadderPoint {
                param: h,
                estimate: mean,
                std_error: se,
                extra,
            }
        })
        .collect();
    let mut report = RateReport::new(ExperimentId::StrongError, "h", "grid_sup_sq_error", points);
    report.fit(plan.slope_band);
    let path_fit = fit_loglog(
        &plan.h_ladder,
        &report.points.iter().map(|p| p.extra["path_sup"]).collect::<Vec<_>>(),
    );
    if let Some(fit) = path_fit {
        report
            .warnings
            .push(format!("slope of the all-times statistic: {:.4}", fit.slope));
    }
    Ok(report)
}

struct ValuePoint {
    h: f64,
    value: f64,
    policy: Option<Policy>,
}

fn finite_values(
    model: &ModelSpec,
    plan: &ExperimentPlan,
    hs: &[f64],
    discounted: bool,
) -> Result<Vec<ValuePoint>> {
    hs.iter()
        .map(|&h| {
            let fm = build_transition(model, &plan.finite.spec(model, h)?)?;
            let i0 = fm.initial_index(model.initial_state())?;
            if discounted {
                let sol = solve_discounted(&fm, plan.discount_rate, ValueIteration::default())?;
                Ok(ValuePoint {
                    h,
                    value: sol.values.tables[0][i0],
                    policy: Some(sol.policy),
                })
            } else {
                let steps = TimeGrid::new(h, plan.horizon)?.steps();
                let sol = solve_finite_horizon(&fm, steps)?;
                Ok(ValuePoint {
                    h,
                    value: sol.values.tables[0][i0],
                    policy: sol.policy,
                })
            }
        })
        .collect()
}

fn value_rate(plan: &ExperimentPlan, discounted: bool) -> Result<RateReport> {
    plan.validate()?;
    let model = ModelSpec::new(plan.model.clone())?;
    let mut hs = plan.h_ladder.clone();
    hs.push(hs[hs.len() - 1] / 2.0);
    let values = finite_values(&model, plan, &hs, discounted)?;
    let opts = EvalOptions::new(plan.particles, plan.replications, plan.seed);
    let mut points = Vec::with_capacity(plan.h_ladder.len());
    for w in values.windows(2) {
        let (coarse, fine) = (&w[0], &w[1]);
        let mut extra = BTreeMap::new();
        extra.insert("value_h".into(), coarse.value);
        extra.insert("value_half_h".into(), fine.value);
        if let Some(policy) = &coarse.policy {
            let est = if discounted {
                evaluate_discounted(&model, coarse.h, plan.discount_rate, policy, opts, Truncation::default())?
            } else {
                evaluate_finite_horizon(&model, &TimeGrid::new(coarse.h, plan.horizon)?, policy, opts)?
            };
            extra.insert("monte_carlo_cost".into(), est.mean);
            extra.insert("monte_carlo_std_error".into(), est.std_error.unwrap_or(0.0));
            extra.insert("model_gap".into(), (coarse.value - est.mean).abs());
        }
        points.push(LadderPoint {
            param: coarse.h,
            estimate: (coarse.value - fine.value).abs(),
            std_error: None,
            extra,
        });
    }
    let id = if discounted { ExperimentId::DiscountedRate } else { ExperimentId::ValueRate };
    let mut report = RateReport::new(id, "h", "value_difference", points);
    let diffs: Vec<f64> = report.points.iter().map(|p| p.estimate).collect();
    let inv = inversions(&diffs);
    report.check("differences_decrease", inv as f64, "0 increases".into(), inv == 0);
    report.fit(plan.slope_band);
    Ok(report)
}

/// Successive differences `|V^h - V^{h/2}|` of the finite-horizon finite-model value at
/// the initial measure, plus a Monte Carlo evaluation of each solved policy.
pub fn run_value_rate(plan: &ExperimentPlan) -> Result<RateReport> {
    value_rate(plan, false)
}

/// As [`run_value_rate`] for the discounted problem.
pub fn run_discounted_rate(plan: &ExperimentPlan) -> Result<RateReport> {
    value_rate(plan, true)
}

struct PopulationDraw {
    /// W1 to the reference population's terminal law, per ladder entry except the last
    w1: Vec<f64>,
    /// `|J^N - V^h|` per ladder entry
    gap: Vec<f64>,
    cost: Vec<f64>,
}

fn population_draws(plan: &ExperimentPlan) -> Result<(f64, Vec<PopulationDraw>)> {
    let model = ModelSpec::new(plan.model.clone())?;
    let h = plan.h_ladder[0];
    let grid = TimeGrid::new(h, plan.horizon)?;
    let fm = build_transition(&model, &plan.finite.spec(&model, h)?)?;
    let sol = solve_finite_horizon(&fm, grid.steps())?;
    let value = sol.values.tables[0][fm.initial_index(model.initial_state())?];
    let policy = sol
        .policy
        .ok_or_else(|| Error::config("harness", "horizon shorter than one step"))?;
    let n_max = *plan.n_ladder.last().expect("validated ladder");
    let draws = (0..plan.replications as u32)
        .into_par_iter()
        .map(|s| {
            let reference = simulate_with(&model, &grid, &policy, n_max, SimOptions::new(plan.seed).replication(2 * s))?;
            let target = reference.measure(grid.steps());
            let mut w1 = Vec::new();
            let mut gap = Vec::new();
            let mut cost = Vec::new();
            for &n in &plan.n_ladder {
                let run = simulate_with(&model, &grid, &policy, n, SimOptions::new(plan.seed).replication(2 * s + 1))?;
                if n != n_max {
                    w1.push(wasserstein1(&run.measure(grid.steps()), &target)?);
                }
                let j = run.particle_totals().iter().sum::<f64>() / n as f64;
                cost.push(j);
                gap.push((j - value).abs());
            }
            Ok(PopulationDraw { w1, gap, cost })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((value, draws))
}

fn population_point(n: usize, estimate: f64, l: usize, draws: &[PopulationDraw], value: f64) -> LadderPoint {
    let gaps: Vec<f64> = draws.iter().map(|d| d.gap[l]).collect();
    let costs: Vec<f64> = draws.iter().map(|d| d.cost[l]).collect();
    let (cost_mean, cost_se) = mean_se(&costs);
    let mut extra = BTreeMap::new();
    extra.insert("median_cost_gap".into(), median(&gaps));
    extra.insert("mean_cost".into(), cost_mean);
    extra.insert("mean_cost_std_error".into(), cost_se.unwrap_or(0.0));
    extra.insert("finite_model_value".into(), value);
    LadderPoint {
        param: n as f64,
        estimate,
        std_error: None,
        extra,
    }
}

fn gap_fraction(draws: &[PopulationDraw]) -> f64 {
    let last = draws[0].gap.len() - 1;
    let wins = draws.iter().filter(|d| d.gap[last] < d.gap[0]).count();
    wins as f64 / draws.len() as f64
}

/// Median W1 between the terminal empirical law of an `N`-agent population under the
/// symmetric finite-model policy and an independent population of the largest size,
/// plus the per-agent cost gap to the finite-model value.
pub fn run_chaos(plan: &ExperimentPlan) -> Result<RateReport> {
    plan.validate()?;
    let (value, draws) = population_draws(plan)?;
    let small = &plan.n_ladder[..plan.n_ladder.len() - 1];
    let points = small
        .iter()
        .enumerate()
        .map(|(l, &n)| {
            let w: Vec<f64> = draws.iter().map(|d| d.w1[l]).collect();
            population_point(n, median(&w), l, &draws, value)
        })
        .collect();
    let mut report = RateReport::new(ExperimentId::Chaos, "N", "median_w1", points);
    let medians: Vec<f64> = report.points.iter().map(|p| p.estimate).collect();
    let inv = inversions(&medians);
    report.check("w1_trend", inv as f64, "at most 1 increase".into(), inv <= 1);
    let frac = gap_fraction(&draws);
    report.check(
        "cost_gap_fraction",
        frac,
        format!(">= {}", plan.min_fraction),
        frac >= plan.min_fraction,
    );
    report.fit(None);
    Ok(report)
}

/// Median per-agent cost gap `|J^N - V^h|` along the particle ladder.
pub fn run_n_particle_gap(plan: &ExperimentPlan) -> Result<RateReport> {
    plan.validate()?;
    let (value, draws) = population_draws(plan)?;
    let points = plan
        .n_ladder
        .iter()
        .enumerate()
        .map(|(l, &n)| {
            let g: Vec<f64> = draws.iter().map(|d| d.gap[l]).collect();
            population_point(n, median(&g), l, &draws, value)
        })
        .collect();
    let mut report = RateReport::new(ExperimentId::NParticleGap, "N", "median_cost_gap", points);
    let medians: Vec<f64> = report.points.iter().map(|p| p.estimate).collect();
    let inv = inversions(&medians);
    let allowed = if medians.len() >= 5 { 1 } else { 0 };
    report.check("gap_trend", inv as f64, format!("at most {allowed} increases"), inv <= allowed);
    let frac = gap_fraction(&draws);
    report.check(
        "largest_beats_smallest_fraction",
        frac,
        format!(">= {}", plan.min_fraction),
        frac >= plan.min_fraction,
    );
    report.fit(None);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{reference_simulate, simulate_with};
    use crate::model::{ActionSet, Constants, FunctionRef};
    use crate::policy::InterpolatedPolicy;

    fn constant_config(b: f64, sigma: f64, c: f64) -> ModelConfig {
        ModelConfig {
            dim: 1,
            action_set: ActionSet::interval(-1.0, 1.0, 3),
            drift: FunctionRef::new("constant", &[b]),
            diffusion: FunctionRef::new("constant", &[sigma]),
            running_cost: FunctionRef::new("constant", &[c]),
            terminal_cost: FunctionRef::new("constant", &[0.0]),
            constants: Constants { c1: 0.0, c2: b.abs() + sigma, c3: 0.0, c4: c.abs() },
            initial_state: vec![0.0],
        }
    }

    fn small_strong_plan() -> ExperimentPlan {
        ExperimentPlan {
            h_ladder: dyadic(2, 5, 1.0),
            h_ref: 2f64.powi(-9),
            particles: 8,
            replications: 16,
            ..ExperimentPlan::default_for(ExperimentId::StrongError)
        }
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let xs = [1.0, 0.5, 0.25, 0.125];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(0.75)).collect();
        let fit = fit_loglog(&xs, &ys).unwrap();
        assert!((fit.slope - 0.75).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.residual < 1e-20);
        assert!(fit_loglog(&xs[..3], &ys[..3]).is_none());
    }

    #[test]
    fn median_and_inversions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(inversions(&[3.0, 2.0, 2.5, 1.0]), 1);
    }

    #[test]
    fn plan_validation() {
        let mut p = ExperimentPlan::default_for(ExperimentId::StrongError);
        assert!(p.validate().is_ok());
        p.h_ladder = vec![0.1, 0.2];
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::default_for(ExperimentId::Chaos);
        p.replications = 8;
        assert!(p.validate().is_err());
        assert!(ExperimentId::parse("nope").unwrap_err().is_config());
        assert_eq!(ExperimentId::parse("chaos").unwrap(), ExperimentId::Chaos);
    }

    #[test]
    fn cached_increments_reproduce_the_simulators() {
        let plan = small_strong_plan();
        let model = ModelSpec::new(plan.model.clone()).unwrap();
        let coarse = TimeGrid::new(plan.h_ladder[0], 1.0).unwrap();
        let actions = strong_error_policy(&model, &coarse);
        let ratios = [128usize, 64, 32, 16];
        let sample = strong_error_replication(&model, &plan, &actions, 128, &ratios, 512, 3).unwrap();

        // recompute the coarse-grid statistic from the public simulators
        let control = InterpolatedPolicy::new(Policy::open_loop(actions.clone()), coarse);
        let opts = SimOptions::new(plan.seed).replication(3);
        let reference = reference_simulate(&model, &control, plan.h_ref, 8, opts).unwrap();
        for (l, &r) in ratios.iter().enumerate() {
            let h = plan.h_ref * r as f64;
            let grid = TimeGrid::new(h, 1.0).unwrap();
            let policy = Policy::open_loop(refine(&actions, 128 / r, grid.steps()));
            let run = simulate_with(&model, &grid, &policy, 8, opts.noise_dt(plan.h_ref)).unwrap();
            let mut worst = vec![0.0f64; 8];
            for k in 0..=grid.steps() {
                for i in 0..8 {
                    let e = (reference.snapshots[k * r][i] - run.snapshots[k][i]).powi(2);
                    worst[i] = worst[i].max(e);
                }
            }
            let expect = worst.iter().sum::<f64>() / 8.0;
            assert_eq!(sample.grid_sup[l], expect, "level {l}");
            assert!(sample.path_sup[l] >= sample.grid_sup[l]);
        }
    }

    #[test]
    fn strong_error_is_zero_only_at_the_reference_step() {
        let mut plan = small_strong_plan();
        plan.h_ladder = vec![2f64.powi(-5), 2f64.powi(-9)];
        let r = run_strong_error(&plan).unwrap();
        assert!(r.points[0].estimate > 0.0);
        assert_eq!(r.points[1].estimate, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn deterministic_constant_drift_is_degenerate() {
        let mut plan = small_strong_plan();
        plan.model = constant_config(0.4, 0.0, 0.0);
        let r = run_strong_error(&plan).unwrap();
        assert!(r.points.iter().all(|p| p.estimate < 1e-28));
        assert!(r.degenerate);
        assert!(r.slope.is_none());
        assert!(r.passed);
    }

    #[test]
    fn strong_error_is_reproducible() {
        let plan = small_strong_plan();
        let a = run_strong_error(&plan).unwrap();
        let b = run_strong_error(&plan).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn unit_cost_values_are_step_counts() {
        let mut plan = ExperimentPlan::default_for(ExperimentId::ValueRate);
        plan.model = constant_config(0.1, 1.0, 1.0);
        plan.h_ladder = vec![0.3, 0.15, 0.075, 0.0375];
        plan.finite = FiniteSettings { half_width: 1.0, cells_per_axis: 2, n: 2 };
        plan.particles = 4;
        plan.replications = 2;
        let r = run_value_rate(&plan).unwrap();
        for p in &r.points {
            let steps = TimeGrid::new(p.param, 1.0).unwrap().steps() as f64;
            assert!((p.extra["value_h"] - steps * p.param).abs() < 1e-12);
            assert!(p.estimate <= p.param + 1e-12);
            // the Monte Carlo evaluation of a unit cost is the same step count
            assert!((p.extra["model_gap"]).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_step_has_zero_difference() {
        let mut plan = ExperimentPlan::default_for(ExperimentId::ValueRate);
        plan.finite = FiniteSettings { half_width: 1.0, cells_per_axis: 3, n: 2 };
        let model = ModelSpec::new(plan.model.clone()).unwrap();
        let v = finite_values(&model, &plan, &[0.25, 0.25], false).unwrap();
        assert_eq!(v[0].value, v[1].value);
    }

    #[test]
    fn unit_cost_discounted_values() {
        let mut plan = ExperimentPlan::default_for(ExperimentId::DiscountedRate);
        plan.model = constant_config(0.1, 1.0, 1.0);
        plan.h_ladder = vec![0.25, 0.125, 0.0625, 0.03125];
        plan.finite = FiniteSettings { half_width: 1.0, cells_per_axis: 2, n: 2 };
        plan.particles = 2;
        plan.replications = 2;
        let r = run_discounted_rate(&plan).unwrap();
        for p in &r.points {
            let beta = (-p.param).exp();
            assert!((p.extra["value_h"] - p.param / (1.0 - beta)).abs() < 1e-8);
            assert!(p.estimate <= p.param);
        }
    }

    #[test]
    fn myopic_limit_of_heavy_discounting() {
        let mut plan = ExperimentPlan::default_for(ExperimentId::DiscountedRate);
        plan.finite = FiniteSettings { half_width: 1.0, cells_per_axis: 3, n: 2 };
        plan.discount_rate = 400.0;
        let model = ModelSpec::new(plan.model.clone()).unwrap();
        let h = 0.25;
        let v = finite_values(&model, &plan, &[h], true).unwrap()[0].value;
        let fm = build_transition(&model, &plan.finite.spec(&model, h).unwrap()).unwrap();
        let i0 = fm.initial_index(model.initial_state()).unwrap();
        let rules = fm.rule_count(1_000_000).unwrap();
        let myopic = (0..rules).map(|r| fm.stage_cost(i0, &fm.rule(r))).fold(f64::INFINITY, f64::min);
        let beta = (-400.0f64 * h).exp();
        let bound = beta * fm.stage_cost(i0, &fm.rule(0)).max(1.0) / (1.0 - beta);
        assert!(v >= myopic - 1e-15 && v - myopic <= bound);
    }

    #[test]
    fn frozen_population_has_zero_w1() {
        let mut plan = ExperimentPlan::default_for(ExperimentId::Chaos);
        plan.model = constant_config(0.0, 1e-300, 0.0);
        plan.n_ladder = vec![4, 8, 16];
        plan.replications = 16;
        plan.finite = FiniteSettings { half_width: 1.0, cells_per_axis: 3, n: 2 };
        let r = run_chaos(&plan).unwrap();
        assert!(r.points.iter().all(|p| p.estimate < 1e-250));
    }

    #[test]
    fn report_csv_has_slope_block() {
        let mut r = RateReport::new(
            ExperimentId::StrongError,
            "h",
            "sup_sq_error",
            [0.5, 0.25, 0.125, 0.0625]
                .iter()
                .map(|&h| LadderPoint { param: h, estimate: h, std_error: Some(0.0), extra: BTreeMap::new() })
                .collect(),
        );
        r.fit(Some([0.7, 1.3]));
        assert!(r.passed);
        let csv = r.to_csv();
        assert!(csv.starts_with("h,sup_sq_error,std_error\n"));
        assert!(csv.contains("\nslope,intercept,residual,points,band_low,band_high,degenerate,passed\n"));
        assert_eq!(csv.lines().count(), 1 + 4 + 1 + 2);
    }
}
