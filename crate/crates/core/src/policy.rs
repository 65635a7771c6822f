//! Control policies and Monte Carlo evaluation of their cost.

use crate::em::{advance, brownian_increments, Brownian, EnsembleState, StepScratch, TimeGrid};
use crate::error::{Error, Result};
use crate::measure::{EmpiricalMeasure, MeasureSet, StateGrid};
use crate::model::{MeanField, ModelSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Feedback table indexed by stage, quantized measure and state cell.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    set: MeasureSet,
    actions: Vec<Vec<f64>>,
    stages: usize,
    /// `(stage * measures + measure) * cells + cell -> action index`
    table: Vec<u32>,
}

impl TabularPolicy {
    pub fn new(set: MeasureSet, actions: Vec<Vec<f64>>, stages: usize, table: Vec<u32>) -> Result<Self> {
        let cells = set.grid().cell_count();
        if stages == 0 || actions.is_empty() {
            return Err(Error::config("policy", "tabular policy needs a stage and an action"));
        }
        if table.len() != stages * set.len() * cells {
            return Err(Error::config(
                "policy",
                format!(
                    "table has {} entries, expected {} stages x {} measures x {} cells",
                    table.len(),
                    stages,
                    set.len(),
                    cells
                ),
            ));
        }
        if let Some(bad) = table.iter().find(|&&a| a as usize >= actions.len()) {
            return Err(Error::config("policy", format!("action index {bad} out of range")));
        }
        let dim = actions[0].len();
        if actions.iter().any(|a| a.len() != dim) {
            return Err(Error::config("policy", "action grid points differ in dimension"));
        }
        Ok(Self {
            set,
            actions,
            stages,
            table,
        })
    }

    pub fn measure_set(&self) -> &MeasureSet {
        &self.set
    }

    pub fn grid(&self) -> &StateGrid {
        self.set.grid()
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    /// Per-cell action indices for `stage` at quantized measure `measure`.
    pub fn rule(&self, stage: usize, measure: usize) -> &[u32] {
        let cells = self.set.grid().cell_count();
        let start = (stage.min(self.stages - 1) * self.set.len() + measure) * cells;
        &self.table[start..start + cells]
    }

    fn action_index(&self, stage: usize, measure: usize, cell: usize) -> usize {
        self.rule(stage, measure)[cell] as usize
    }
}

/// A control law consumed by the simulators.
#[derive(Debug, Clone)]
pub enum Policy {
    /// One action per step; the last one is held past the end of the list.
    OpenLoop(Vec<Vec<f64>>),
    /// Stage-dependent feedback on (cell, quantized measure); the last stage is held.
    Markov(Arc<TabularPolicy>),
    /// Stage-independent feedback on (cell, quantized measure).
    StationaryMarkov(Arc<TabularPolicy>),
}

/// What a policy needs to know about the population at step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub stage: usize,
    pub measure: usize,
}

impl Policy {
    pub fn constant(action: Vec<f64>) -> Self {
        Policy::OpenLoop(vec![action])
    }

    pub fn open_loop(actions: Vec<Vec<f64>>) -> Self {
        Policy::OpenLoop(actions)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Policy::OpenLoop(_) => "open_loop",
            Policy::Markov(_) => "markov",
            Policy::StationaryMarkov(_) => "stationary_markov",
        }
    }

    pub fn tabular(&self) -> Option<&TabularPolicy> {
        match self {
            Policy::OpenLoop(_) => None,
            Policy::Markov(t) | Policy::StationaryMarkov(t) => Some(t),
        }
    }

    /// Rejects policies whose actions fall outside the model's action set.
    pub fn check_against(&self, model: &ModelSpec) -> Result<()> {
        let actions: &[Vec<f64>] = match self {
            Policy::OpenLoop(a) => a,
            Policy::Markov(t) | Policy::StationaryMarkov(t) => {
                if t.grid().dim() != model.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: model.dim(),
                        got: t.grid().dim(),
                    });
                }
                &t.actions
            }
        };
        if actions.is_empty() {
            return Err(Error::config("policy", "policy has no actions"));
        }
        let set = model.action_set();
        for a in actions {
            if a.len() != set.dim() {
                return Err(Error::DimensionMismatch {
                    expected: set.dim(),
                    got: a.len(),
                });
            }
            if !set.contains(a) {
                return Err(Error::config("policy", format!("action {a:?} outside the action set")));
            }
        }
        Ok(())
    }

    /// Context from an ensemble (`particles` row-major with `dim` columns).
    pub fn prepare(&self, k: usize, dim: usize, particles: &[f64]) -> StepContext {
        match self {
            Policy::OpenLoop(_) => StepContext { stage: k, measure: 0 },
            Policy::Markov(t) | Policy::StationaryMarkov(t) => {
                let grid = t.grid();
                let mut masses = vec![0.0; grid.cell_count()];
                let w = 1.0 / (particles.len() / dim) as f64;
                for x in particles.chunks_exact(dim) {
                    masses[grid.cell_of(x)] += w;
                }
                StepContext {
                    stage: self.stage_of(k),
                    measure: t.set.project(&masses),
                }
            }
        }
    }

    /// Context from an explicit measure.
    pub fn prepare_measure(&self, k: usize, mu: &EmpiricalMeasure) -> StepContext {
        match self {
            Policy::OpenLoop(_) => StepContext { stage: k, measure: 0 },
            Policy::Markov(t) | Policy::StationaryMarkov(t) => StepContext {
                stage: self.stage_of(k),
                measure: t.set.project_measure(mu),
            },
        }
    }

    fn stage_of(&self, k: usize) -> usize {
        match self {
            Policy::StationaryMarkov(_) => 0,
            _ => k,
        }
    }

    #[inline]
    pub fn action(&self, ctx: &StepContext, x: &[f64]) -> &[f64] {
        match self {
            Policy::OpenLoop(a) => &a[ctx.stage.min(a.len() - 1)],
            Policy::Markov(t) | Policy::StationaryMarkov(t) => {
                let cell = t.grid().cell_of(x);
                &t.actions[t.action_index(ctx.stage, ctx.measure, cell)]
            }
        }
    }

    pub fn to_file(&self) -> PolicyFile {
        match self {
            Policy::OpenLoop(a) => PolicyFile::OpenLoop { actions: a.clone() },
            Policy::Markov(t) => {
                let cells = t.grid().cell_count();
                let table = t
                    .table
                    .chunks(t.set.len() * cells)
                    .map(|stage| stage.chunks(cells).map(<[u32]>::to_vec).collect())
                    .collect();
                PolicyFile::Markov {
                    grid: t.grid().clone(),
                    n: t.set.denominator(),
                    action_grid: t.actions.clone(),
                    table,
                }
            }
            Policy::StationaryMarkov(t) => {
                let cells = t.grid().cell_count();
                PolicyFile::StationaryMarkov {
                    grid: t.grid().clone(),
                    n: t.set.denominator(),
                    action_grid: t.actions.clone(),
                    rule: t.table.chunks(cells).map(<[u32]>::to_vec).collect(),
                }
            }
        }
    }

    pub fn from_file(file: PolicyFile) -> Result<Self> {
        match file {
            PolicyFile::OpenLoop { actions } => {
                if actions.is_empty() {
                    return Err(Error::config("policy", "open-loop policy has no actions"));
                }
                Ok(Policy::OpenLoop(actions))
            }
            PolicyFile::Markov {
                grid,
                n,
                action_grid,
                table,
            } => {
                let set = MeasureSet::new(&grid, n)?;
                let stages = table.len();
                let flat = flatten_rows(table.into_iter().flatten(), set.len() * stages, &grid)?;
                Ok(Policy::Markov(Arc::new(TabularPolicy::new(set, action_grid, stages, flat)?)))
            }
            PolicyFile::StationaryMarkov {
                grid,
                n,
                action_grid,
                rule,
            } => {
                let set = MeasureSet::new(&grid, n)?;
                let flat = flatten_rows(rule.into_iter(), set.len(), &grid)?;
                Ok(Policy::StationaryMarkov(Arc::new(TabularPolicy::new(
                    set,
                    action_grid,
                    1,
                    flat,
                )?)))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: PolicyFile = serde_json::from_str(&text)
            .map_err(|e| Error::config("policy", format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }
}

fn flatten_rows(rows: impl Iterator<Item = Vec<u32>>, expected: usize, grid: &StateGrid) -> Result<Vec<u32>> {
    let cells = grid.cell_count();
    let mut flat = Vec::with_capacity(expected * cells);
    let mut count = 0;
    for row in rows {
        if row.len() != cells {
            return Err(Error::config(
                "policy",
                format!("rule has {} entries for {cells} cells", row.len()),
            ));
        }
        flat.extend(row);
        count += 1;
    }
    if count != expected {
        return Err(Error::config(
            "policy",
            format!("{count} rules in file, expected {expected}"),
        ));
    }
    Ok(flat)
}

/// On-disk policy format. Tables list action indices into `action_grid`, one row per
/// enumerated quantized measure (in enumeration order) and one entry per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyFile {
    OpenLoop {
        actions: Vec<Vec<f64>>,
    },
    Markov {
        grid: StateGrid,
        n: u32,
        action_grid: Vec<Vec<f64>>,
        table: Vec<Vec<Vec<u32>>>,
    },
    StationaryMarkov {
        grid: StateGrid,
        n: u32,
        action_grid: Vec<Vec<f64>>,
        rule: Vec<Vec<u32>>,
    },
}

/// A discrete-time policy read as a control path in continuous time: the action of
/// step `k` is used on `[t_k, t_{k+1})`.
#[derive(Debug, Clone)]
pub struct InterpolatedPolicy {
    policy: Policy,
    grid: TimeGrid,
}

impl InterpolatedPolicy {
    pub fn new(policy: Policy, grid: TimeGrid) -> Self {
        Self { policy, grid }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Step whose action is in force at time `t`.
    pub fn stage_at(&self, t: f64) -> Result<usize> {
        self.grid.step_at(t)
    }

    /// Open-loop action at time `t`.
    pub fn action_at(&self, t: f64) -> Result<&[f64]> {
        let k = self.stage_at(t)?;
        match &self.policy {
            Policy::OpenLoop(a) => Ok(&a[k.min(a.len() - 1)]),
            _ => Err(Error::Unsupported(
                "feedback policies need the state to produce an action".into(),
            )),
        }
    }
}

pub fn deploy_interpolated(policy: &Policy, grid: &TimeGrid) -> InterpolatedPolicy {
    InterpolatedPolicy::new(policy.clone(), *grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    FiniteHorizon,
    Discounted,
}

/// Monte Carlo cost estimate over independent replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub criterion: Criterion,
    pub mean: f64,
    /// Sample standard deviation over replications divided by `sqrt(R)`; absent for a
    /// single replication.
    pub std_error: Option<f64>,
    pub replications: usize,
    pub particles: usize,
    pub h: f64,
    pub steps: usize,
    pub discount_rate: Option<f64>,
    /// Bound on the discounted cost dropped by truncating at `steps`.
    pub tail_bound: Option<f64>,
    /// One value per replication, in replication order.
    pub samples: Vec<f64>,
}

impl CostEstimate {
    fn from_samples(criterion: Criterion, samples: Vec<f64>, particles: usize, h: f64, steps: usize) -> Self {
        let r = samples.len();
        let mean = samples.iter().sum::<f64>() / r as f64;
        let std_error = (r >= 2).then(|| {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        });
        Self {
            criterion,
            mean,
            std_error,
            replications: r,
            particles,
            h,
            steps,
            discount_rate: None,
            tail_bound: None,
            samples,
        }
    }
}

/// Replication layout for the Monte Carlo evaluators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub particles: usize,
    pub replications: usize,
    pub seed: u64,
    /// Replication ids start here, so disjoint batches can share a seed.
    pub first_replication: u32,
}

impl EvalOptions {
    pub fn new(particles: usize, replications: usize, seed: u64) -> Self {
        Self {
            particles,
            replications,
            seed,
            first_replication: 0,
        }
    }

    fn check(&self) -> Result<()> {
        if self.particles == 0 || self.replications == 0 {
            return Err(Error::config("policy", "need at least one particle and one replication"));
        }
        Ok(())
    }
}

/// Population-averaged running cost `c` per step (not multiplied by `h`) and the
/// averaged terminal cost of one replication.
pub(crate) fn rollout_costs(
    model: &ModelSpec,
    h: f64,
    steps: usize,
    policy: &Policy,
    particles: usize,
    seed: u64,
    replication: u32,
) -> Result<(Vec<f64>, f64)> {
    let noise = Brownian::new(seed, replication, h)?;
    let mut state = EnsembleState::at_point(model.initial_state(), particles)?;
    let d = state.dim();
    let mut scratch = StepScratch::new(d);
    let mut costs = vec![0.0; particles];
    let mut per_step = Vec::with_capacity(steps);
    for k in 0..steps {
        let mf = state.mean_field();
        let ctx = policy.prepare(k, d, state.particles());
        advance(
            model,
            &mut state,
            h,
            brownian_increments(&noise, 1, d),
            &mf,
            |_, x| policy.action(&ctx, x),
            Some(&mut costs),
            &mut scratch,
        )?;
        per_step.push(costs.iter().sum::<f64>() / particles as f64);
    }
    let mf = MeanField::of_particles(d, state.particles());
    let terminal = state
        .particles()
        .chunks_exact(d)
        .map(|x| model.terminal_cost(x, &mf))
        .sum::<f64>()
        / particles as f64;
    Ok((per_step, terminal))
}

fn replicate<T: Send>(
    opts: &EvalOptions,
    f: impl Fn(u32) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    (0..opts.replications as u32)
        .into_par_iter()
        .map(|r| f(opts.first_replication + r))
        .collect()
}

/// `E[Σ_{k<N_T} c h + c_T]` averaged over the population.
pub fn evaluate_finite_horizon(
    model: &ModelSpec,
    grid: &TimeGrid,
    policy: &Policy,
    opts: EvalOptions,
) -> Result<CostEstimate> {
    opts.check()?;
    policy.check_against(model)?;
    let h = grid.h();
    let samples = replicate(&opts, |r| {
        let (c, term) = rollout_costs(model, h, grid.steps(), policy, opts.particles, opts.seed, r)?;
        Ok(c.iter().sum::<f64>() * h + term)
    })?;
    Ok(CostEstimate::from_samples(
        Criterion::FiniteHorizon,
        samples,
        opts.particles,
        h,
        grid.steps(),
    ))
}

/// Truncation settings for the discounted evaluator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    /// The horizon `K` is the smallest with `β^K <= tolerance`.
    pub tolerance: f64,
    pub max_steps: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_steps: 10_000_000,
        }
    }
}

/// Smallest `K` with `β^K <= tol`.
pub fn truncation_steps(beta: f64, trunc: Truncation) -> Result<usize> {
    if !(trunc.tolerance > 0.0 && trunc.tolerance < 1.0) {
        return Err(Error::config("policy", "truncation tolerance must lie in (0, 1)"));
    }
    let k = (trunc.tolerance.ln() / beta.ln()).ceil().max(0.0);
    if !k.is_finite() || k > trunc.max_steps as f64 {
        return Err(Error::config(
            "policy",
            format!(
                "discounted horizon needs {k} steps, above the cap of {}",
                trunc.max_steps
            ),
        ));
    }
    let mut k = k as usize;
    while k > 0 && beta.powi(k as i32 - 1) <= trunc.tolerance {
        k -= 1;
    }
    while beta.powi(k as i32) > trunc.tolerance {
        k += 1;
    }
    Ok(k)
}

/// `E[Σ_k β^k h c]` with `β = exp(-α h)`, truncated once the tail is below tolerance.
pub fn evaluate_discounted(
    model: &ModelSpec,
    h: f64,
    discount_rate: f64,
    policy: &Policy,
    opts: EvalOptions,
    trunc: Truncation,
) -> Result<CostEstimate> {
    opts.check()?;
    policy.check_against(model)?;
    if !(discount_rate > 0.0) || !(h > 0.0) {
        return Err(Error::config("policy", "discount rate and step must be positive"));
    }
    let beta = (-discount_rate * h).exp();
    let steps = truncation_steps(beta, trunc)?;
    let samples = replicate(&opts, |r| {
        let (c, _) = rollout_costs(model, h, steps, policy, opts.particles, opts.seed, r)?;
        let mut weight = h;
        let mut acc = 0.0;
        for ck in c {
            acc += weight * ck;
            weight *= beta;
        }
        Ok(acc)
    })?;
    let mut est = CostEstimate::from_samples(Criterion::Discounted, samples, opts.particles, h, steps);
    est.discount_rate = Some(discount_rate);
    est.tail_bound = Some(h * beta.powi(steps as i32) * model.constants().c4 / (1.0 - beta));
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{satmr_config, ActionSet, Constants, FunctionRef, ModelConfig};
    use crate::rng::NoiseSource;

    fn constant_cost_model(c: f64) -> ModelSpec {
        ModelSpec::new(ModelConfig {
            dim: 1,
            action_set: ActionSet::interval(-1.0, 1.0, 3),
            drift: FunctionRef::new("constant", &[0.2]),
            diffusion: FunctionRef::new("constant", &[1.0]),
            running_cost: FunctionRef::new("constant", &[c]),
            terminal_cost: FunctionRef::new("constant", &[0.0]),
            constants: Constants { c1: 0.0, c2: 1.2, c3: 0.0, c4: c.abs() },
            initial_state: vec![0.0],
        })
        .unwrap()
    }

    fn stationary_rule(grid: &StateGrid, n: u32) -> Policy {
        // push toward the origin: left cells act +1, right cells act -1
        let set = MeasureSet::new(grid, n).unwrap();
        let cells = grid.cell_count();
        let mut table = Vec::new();
        for _ in 0..set.len() {
            for c in 0..cells {
                table.push(if 2 * c + 1 < cells { 2 } else if 2 * c + 1 > cells { 0 } else { 1 });
            }
        }
        let actions = vec![vec![-1.0], vec![0.0], vec![1.0]];
        Policy::StationaryMarkov(Arc::new(TabularPolicy::new(set, actions, 1, table).unwrap()))
    }

    /// Straight-line Euler loop written independently of the simulator.
    fn loop_cost(model_params: (f64, f64, f64, f64, f64, f64), action: f64, h: f64, steps: usize, n: usize, seed: u64, rep: u32, beta: Option<f64>) -> f64 {
        let (t1, t2, s0, s1, lam, gam) = model_params;
        let src = NoiseSource::new(seed);
        let mut x = vec![0.0f64; n];
        let mut total = 0.0;
        let mut w = 1.0;
        for k in 0..steps {
            let m: f64 = x.iter().map(|v| v.tanh()).sum::<f64>() / n as f64;
            let mut c = 0.0;
            let mut next = x.clone();
            for i in 0..n {
                let xi = x[i];
                c += xi * xi / (1.0 + xi * xi) + lam * action * action + gam * m * m;
                let mut z = [0.0];
                src.standard_normals(rep, i as u32, k as u32, &mut z);
                next[i] = xi + (t1 * xi.tanh() + t2 * m + action) * h + (s0 + s1 / (1.0 + xi * xi)) * (z[0] * h.sqrt());
            }
            total += w * h * c / n as f64;
            if let Some(b) = beta {
                w *= b;
            }
            x = next;
        }
        if beta.is_none() {
            total += x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>() / n as f64;
        }
        total
    }

    #[test]
    fn finite_horizon_matches_straight_loop() {
        let params = (-0.5, 0.5, 0.5, 0.25, 0.1, 0.5);
        let model = ModelSpec::new(satmr_config(-0.5, 0.5, 1.0, 0.5, 0.25, 0.1, 0.5)).unwrap();
        let grid = TimeGrid::new(0.125, 1.0).unwrap();
        let est = evaluate_finite_horizon(&model, &grid, &Policy::constant(vec![0.5]), EvalOptions::new(16, 4, 11)).unwrap();
        for r in 0..4 {
            let oracle = loop_cost(params, 0.5, 0.125, 8, 16, 11, r, None);
            assert!((est.samples[r as usize] - oracle).abs() < 1e-12, "{} vs {oracle}", est.samples[r as usize]);
        }
        assert_eq!(est.replications, 4);
        assert!(est.std_error.unwrap() > 0.0);
    }

    #[test]
    fn discounted_matches_weighted_loop() {
        let params = (-0.5, 0.5, 0.5, 0.25, 0.1, 0.5);
        let model = ModelSpec::new(satmr_config(-0.5, 0.5, 1.0, 0.5, 0.25, 0.1, 0.5)).unwrap();
        let h = 0.25;
        let alpha = 2.0;
        let est = evaluate_discounted(&model, h, alpha, &Policy::constant(vec![-0.5]), EvalOptions::new(8, 3, 5), Truncation::default()).unwrap();
        let beta = (-alpha * h).exp();
        assert!(beta.powi(est.steps as i32) <= 1e-6);
        assert!(beta.powi(est.steps as i32 - 1) > 1e-6);
        for r in 0..3 {
            let oracle = loop_cost(params, -0.5, h, est.steps, 8, 5, r, Some(beta));
            assert!((est.samples[r as usize] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cost_has_zero_error() {
        let model = constant_cost_model(0.0);
        let grid = TimeGrid::new(0.1, 1.0).unwrap();
        let est = evaluate_finite_horizon(&model, &grid, &Policy::constant(vec![0.0]), EvalOptions::new(4, 5, 1)).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.std_error, Some(0.0));
    }

    #[test]
    fn unit_cost_discounted_is_geometric_sum() {
        let model = constant_cost_model(1.0);
        let h = 0.1;
        let est = evaluate_discounted(&model, h, 1.0, &Policy::constant(vec![0.0]), EvalOptions::new(2, 2, 1), Truncation::default()).unwrap();
        let beta = (-h).exp();
        let full = h / (1.0 - beta);
        assert!((est.mean - full).abs() <= est.tail_bound.unwrap() * (1.0 + 1e-9));
        assert!(est.tail_bound.unwrap() <= 1e-6 * full * (1.0 + 1e-9));
    }

    #[test]
    fn truncation_cap_is_an_error() {
        let model = constant_cost_model(1.0);
        let trunc = Truncation { tolerance: 1e-6, max_steps: 10 };
        let e = evaluate_discounted(&model, 0.1, 1.0, &Policy::constant(vec![0.0]), EvalOptions::new(2, 2, 1), trunc);
        assert!(e.unwrap_err().is_config());
    }

    #[test]
    fn single_replication_has_no_error_bar() {
        let model = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.25, 1.0).unwrap();
        let est = evaluate_finite_horizon(&model, &grid, &Policy::constant(vec![0.0]), EvalOptions::new(4, 1, 1)).unwrap();
        assert!(est.std_error.is_none());
    }

    #[test]
    fn estimates_do_not_depend_on_thread_count() {
        let model = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.125, 1.0).unwrap();
        let p = stationary_rule(&StateGrid::uniform(1, 1.5, 3).unwrap(), 4);
        let opts = EvalOptions::new(32, 6, 99);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| evaluate_finite_horizon(&model, &grid, &p, opts).unwrap());
        let b = four.install(|| evaluate_finite_horizon(&model, &grid, &p, opts).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn actions_outside_the_set_are_rejected() {
        let model = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.25, 1.0).unwrap();
        let e = evaluate_finite_horizon(&model, &grid, &Policy::constant(vec![3.0]), EvalOptions::new(4, 1, 1));
        assert!(e.unwrap_err().is_config());
    }

    #[test]
    fn interpolation_is_right_continuous() {
        let grid = TimeGrid::new(0.5, 1.0).unwrap();
        let p = deploy_interpolated(&Policy::open_loop(vec![vec![1.0], vec![-1.0]]), &grid);
        assert_eq!(p.action_at(0.0).unwrap(), &[1.0]);
        assert_eq!(p.action_at(0.49).unwrap(), &[1.0]);
        assert_eq!(p.action_at(0.5).unwrap(), &[-1.0]);
        assert_eq!(p.action_at(0.75).unwrap(), &[-1.0]);
        assert!(matches!(p.action_at(1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn tabular_lookup_uses_cell_and_measure() {
        let grid = StateGrid::uniform(1, 1.5, 3).unwrap();
        let p = stationary_rule(&grid, 4);
        let particles = [-1.0, -0.9, 0.0, 1.2];
        let ctx = p.prepare(5, 1, &particles);
        let t = p.tabular().unwrap();
        assert_eq!(ctx.stage, 0);
        // cells: two in the left cell, one in the middle, one on the right
        assert_eq!(t.measure_set().get(ctx.measure).counts(), &[2, 1, 1]);
        assert_eq!(p.action(&ctx, &[-1.0]), &[1.0]);
        assert_eq!(p.action(&ctx, &[0.1]), &[0.0]);
        assert_eq!(p.action(&ctx, &[9.0]), &[-1.0]);
    }

    #[test]
    fn policy_file_round_trip() {
        let grid = StateGrid::uniform(1, 1.5, 3).unwrap();
        let p = stationary_rule(&grid, 2);
        let json = serde_json::to_string(&p.to_file()).unwrap();
        let back = Policy::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.to_file(), p.to_file());

        let set = MeasureSet::new(&grid, 2).unwrap();
        let table: Vec<u32> = (0..2 * set.len() * 3).map(|i| (i % 2) as u32).collect();
        let m = Policy::Markov(Arc::new(TabularPolicy::new(set, vec![vec![0.0], vec![1.0]], 2, table).unwrap()));
        let json = serde_json::to_string(&m.to_file()).unwrap();
        assert!(json.contains("\"kind\":\"markov\""));
        let back = Policy::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.to_file(), m.to_file());

        let bad = r#"{"kind":"stationary_markov","grid":{"axes":[[-1.0,0.0,1.0]]},"n":1,"action_grid":[[0.0]],"rule":[[0,0]]}"#;
        assert!(Policy::from_file(serde_json::from_str(bad).unwrap()).unwrap_err().is_config());
    }
}
