//! The quantized finite model: a deterministic MDP on quantized measures whose actions
//! are decision rules (one action per grid cell), with exact dynamic programming.

use crate::error::{Error, Result};
use crate::measure::{dequantize, quantize, EmpiricalMeasure, MeasureSet, StateGrid};
use crate::model::{MeanField, ModelSpec};
use crate::policy::{Policy, TabularPolicy};
use crate::rng::normal_cdf;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Default cap on `|actions|^cells`.
pub const DEFAULT_RULE_CAP: u128 = 1_000_000;

/// Quantization choices for a finite model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteModelSpec {
    pub grid: StateGrid,
    pub n: u32,
    pub actions: Vec<Vec<f64>>,
    pub h: f64,
}

/// A finite model with its one-step cell kernel cached for every (measure, action, cell).
#[derive(Debug, Clone)]
pub struct FiniteModel {
    spec: FiniteModelSpec,
    set: MeasureSet,
    cells: usize,
    /// `((mu * A + a) * m + cell) * m + next_cell`
    kernel: Vec<f64>,
    /// `c(center, dequantize(mu), action)` at `(mu * A + a) * m + cell`
    running: Vec<f64>,
    /// `<c_T(., dequantize(mu)), dequantize(mu)>`
    terminal: Vec<f64>,
}

/// One-step law of the Euler step from `x` under `(mu, u)`, integrated over the grid
/// cells. Boundary cells take all the mass beyond the grid.
pub fn kernel_row(
    model: &ModelSpec,
    grid: &StateGrid,
    h: f64,
    x: &[f64],
    mf: &MeanField,
    u: &[f64],
) -> Vec<f64> {
    let d = grid.dim();
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d];
    model.drift_into(x, mf, u, &mut drift);
    model.diffusion_diag_into(x, mf, &mut sigma);
    let axis_probs: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mean = x[j] + drift[j] * h;
            let sd = sigma[j].abs() * h.sqrt();
            let cells = grid.cells_on_axis(j);
            let mut cdf_prev = 0.0;
            (0..cells)
                .map(|i| {
                    let (_, hi) = grid.axis_interval(j, i);
                    let cdf = if hi.is_infinite() {
                        1.0
                    } else {
                        normal_cdf((hi - mean) / sd)
                    };
                    let p = (cdf - cdf_prev).max(0.0);
                    cdf_prev = cdf;
                    p
                })
                .collect()
        })
        .collect();
    let mut row = vec![1.0; grid.cell_count()];
    for (cell, p) in row.iter_mut().enumerate() {
        for (j, idx) in grid.multi_index(cell).into_iter().enumerate() {
            *p *= axis_probs[j][idx];
        }
    }
    row
}

/// Builds the finite model and caches its kernel, running costs and terminal costs.
pub fn build_transition(model: &ModelSpec, spec: &FiniteModelSpec) -> Result<FiniteModel> {
    let d = spec.grid.dim();
    if d > 2 {
        return Err(Error::Unsupported(format!(
            "finite models support at most 2 state dimensions, got {d}"
        )));
    }
    if d != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: d,
        });
    }
    if !model.has_diagonal_diffusion() {
        return Err(Error::Unsupported("finite models need a diagonal diffusion".into()));
    }
    if !(model.min_diffusion() > 0.0) {
        return Err(Error::Unsupported(
            "finite models need a diffusion bounded away from zero".into(),
        ));
    }
    if !(spec.h > 0.0) || !spec.h.is_finite() {
        return Err(Error::config("finite_mdp", "step size must be positive"));
    }
    if spec.actions.is_empty() {
        return Err(Error::config("finite_mdp", "action grid is empty"));
    }
    for a in &spec.actions {
        if a.len() != model.action_set().dim() || !model.action_set().contains(a) {
            return Err(Error::config(
                "finite_mdp",
                format!("action {a:?} is not in the model's action set"),
            ));
        }
    }
    let set = MeasureSet::new(&spec.grid, spec.n)?;
    let m = spec.grid.cell_count();
    let na = spec.actions.len();
    let centers = spec.grid.centers();

    let per_mu: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..set.len())
        .into_par_iter()
        .map(|mu| {
            let law = dequantize(set.get(mu), &spec.grid);
            let mf = MeanField::of(&law);
            let mut kernel = Vec::with_capacity(na * m * m);
            let mut running = Vec::with_capacity(na * m);
            for a in &spec.actions {
                for x in &centers {
                    kernel.extend(kernel_row(model, &spec.grid, spec.h, x, &mf, a));
                    running.push(model.running_cost(x, &mf, a));
                }
            }
            let terminal = law.integrate(|x| model.terminal_cost(x, &mf));
            (kernel, running, terminal)
        })
        .collect();
    let mut kernel = Vec::with_capacity(set.len() * na * m * m);
    let mut running = Vec::with_capacity(set.len() * na * m);
    let mut terminal = Vec::with_capacity(set.len());
    for (k, r, t) in per_mu {
        kernel.extend(k);
        running.extend(r);
        terminal.push(t);
    }
    Ok(FiniteModel {
        spec: spec.clone(),
        set,
        cells: m,
        kernel,
        running,
        terminal,
    })
}

impl FiniteModel {
    pub fn spec(&self) -> &FiniteModelSpec {
        &self.spec
    }

    pub fn measure_set(&self) -> &MeasureSet {
        &self.set
    }

    pub fn grid(&self) -> &StateGrid {
        &self.spec.grid
    }

    pub fn h(&self) -> f64 {
        self.spec.h
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.spec.actions
    }

    pub fn measures(&self) -> usize {
        self.set.len()
    }

    /// Cached transition row from `cell` under action `a` at measure `mu`.
    pub fn row(&self, mu: usize, a: usize, cell: usize) -> &[f64] {
        let m = self.cells;
        let start = ((mu * self.spec.actions.len() + a) * m + cell) * m;
        &self.kernel[start..start + m]
    }

    pub fn terminal_cost(&self, mu: usize) -> f64 {
        self.terminal[mu]
    }

    fn running(&self, mu: usize, a: usize, cell: usize) -> f64 {
        self.running[(mu * self.spec.actions.len() + a) * self.cells + cell]
    }

    /// Index of the quantized measure closest to the Dirac at `x0`.
    pub fn initial_index(&self, x0: &[f64]) -> Result<usize> {
        let q = quantize(&EmpiricalMeasure::dirac(x0)?, &self.spec.grid, self.spec.n)?;
        Ok(self.set.index_of(&q).expect("quantized measures are enumerated"))
    }

    /// Cell masses after one step from `mu` under `rule`, before projection.
    pub fn propagate(&self, mu: usize, rule: &[u32]) -> Vec<f64> {
        let q = self.set.get(mu);
        let n = q.denominator() as f64;
        let mut next = vec![0.0; self.cells];
        for (cell, &count) in q.counts().iter().enumerate() {
            if count == 0 {
                continue;
            }
            let w = count as f64 / n;
            for (acc, p) in next.iter_mut().zip(self.row(mu, rule[cell] as usize, cell)) {
                *acc += w * p;
            }
        }
        next
    }

    /// Next quantized measure (W1-nearest to the propagated masses) and `h`-weighted
    /// stage cost.
    pub fn lift_step(&self, mu: usize, rule: &[u32]) -> (usize, f64) {
        let next = self.set.project(&self.propagate(mu, rule));
        (next, self.stage_cost(mu, rule))
    }

    pub fn stage_cost(&self, mu: usize, rule: &[u32]) -> f64 {
        let q = self.set.get(mu);
        let mut acc = 0.0;
        for (cell, &count) in q.counts().iter().enumerate() {
            if count > 0 {
                acc += count as f64 * self.running(mu, rule[cell] as usize, cell);
            }
        }
        self.spec.h * (acc / q.denominator() as f64)
    }

    /// Number of decision rules, checked against `cap`.
    pub fn rule_count(&self, cap: u128) -> Result<usize> {
        let a = self.spec.actions.len() as u128;
        let mut count: u128 = 1;
        for _ in 0..self.cells {
            count = count.saturating_mul(a);
            if count > cap {
                return Err(Error::Blowup {
                    what: "decision rules",
                    count: a.checked_pow(self.cells as u32).unwrap_or(u128::MAX),
                    cap,
                });
            }
        }
        Ok(count as usize)
    }

    /// Decision rule with index `r`: base-`|A|` digits, cell 0 most significant, so
    /// index order is lexicographic order.
    pub fn rule(&self, r: usize) -> Vec<u32> {
        let a = self.spec.actions.len();
        let mut digits = vec![0u32; self.cells];
        let mut r = r;
        for d in digits.iter_mut().rev() {
            *d = (r % a) as u32;
            r /= a;
        }
        digits
    }

    /// `next[mu][r]` and `cost[mu][r]` for every measure and rule.
    fn transition_tables(&self, cap: u128) -> Result<(usize, Vec<u32>, Vec<f64>)> {
        let rules = self.rule_count(cap)?;
        let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..self.set.len())
            .into_par_iter()
            .map(|mu| {
                let mut next = Vec::with_capacity(rules);
                let mut cost = Vec::with_capacity(rules);
                for r in 0..rules {
                    let (nx, c) = self.lift_step(mu, &self.rule(r));
                    next.push(nx as u32);
                    cost.push(c);
                }
                (next, cost)
            })
            .collect();
        let mut next = Vec::with_capacity(rules * self.set.len());
        let mut cost = Vec::with_capacity(rules * self.set.len());
        for (n, c) in rows {
            next.extend(n);
            cost.extend(c);
        }
        Ok((rules, next, cost))
    }

    fn tabular(&self, stage_rules: &[Vec<u32>]) -> Result<Policy> {
        let mut table = Vec::with_capacity(stage_rules.len() * self.set.len() * self.cells);
        for stage in stage_rules {
            for &r in stage {
                table.extend(self.rule(r as usize));
            }
        }
        TabularPolicy::new(
            self.set.clone(),
            self.spec.actions.clone(),
            stage_rules.len(),
            table,
        )
        .map(Arc::new)
        .map(Policy::Markov)
    }

    /// Exact cost of following a tabular policy from measure `mu0` for `stages` steps,
    /// plus the terminal cost.
    pub fn evaluate_policy(&self, policy: &TabularPolicy, mu0: usize, stages: usize) -> Result<f64> {
        self.check_policy(policy)?;
        let mut mu = mu0;
        let mut total = 0.0;
        for k in 0..stages {
            let (next, c) = self.lift_step(mu, policy.rule(k, mu));
            total += c;
            mu = next;
        }
        Ok(total + self.terminal[mu])
    }

    /// Exact discounted cost of a stationary tabular policy from `mu0`. The lifted chain
    /// is deterministic, so it enters a cycle after a finite prefix and the infinite sum
    /// closes in geometric form.
    pub fn evaluate_stationary(&self, policy: &TabularPolicy, mu0: usize, discount_rate: f64) -> Result<f64> {
        self.check_policy(policy)?;
        if !(discount_rate > 0.0) || !discount_rate.is_finite() {
            return Err(Error::config("finite_mdp", "discount rate must be positive"));
        }
        let beta = (-discount_rate * self.h()).exp();
        let mut seen = vec![usize::MAX; self.set.len()];
        let mut costs = Vec::new();
        let mut mu = mu0;
        while seen[mu] == usize::MAX {
            seen[mu] = costs.len();
            let (next, c) = self.lift_step(mu, policy.rule(0, mu));
            costs.push(c);
            mu = next;
        }
        let start = seen[mu];
        let prefix: f64 = costs[..start].iter().rev().fold(0.0, |acc, c| c + beta * acc);
        let cycle: f64 = costs[start..].iter().rev().fold(0.0, |acc, c| c + beta * acc);
        let period = (costs.len() - start) as i32;
        Ok(prefix + beta.powi(start as i32) * cycle / (1.0 - beta.powi(period)))
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.grid() != self.grid() || policy.measure_set().denominator() != self.spec.n {
            return Err(Error::config("finite_mdp", "policy was built on a different quantization"));
        }
        if policy.actions() != self.actions() {
            return Err(Error::config("finite_mdp", "policy uses a different action grid"));
        }
        Ok(())
    }
}

/// Value tables and the iteration record of a discounted solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub h: f64,
    /// One table per stage `k = 0..=N_T` (finite horizon) or a single table (discounted),
    /// indexed by quantized-measure enumeration order.
    pub tables: Vec<Vec<f64>>,
    pub discount: Option<DiscountRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountRecord {
    pub discount_rate: f64,
    pub beta: f64,
    pub tolerance: f64,
    /// Sup-norm distance between successive iterates.
    pub residuals: Vec<f64>,
}

impl ValueTable {
    pub fn stage(&self, k: usize) -> &[f64] {
        &self.tables[k]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct FiniteHorizonSolution {
    pub values: ValueTable,
    /// Optimal rule index per stage and measure.
    pub rules: Vec<Vec<u32>>,
    /// `None` when there are no stages.
    pub policy: Option<Policy>,
}

/// Backward induction over `stages` steps; ties go to the lexicographically smallest rule.
pub fn solve_finite_horizon(fm: &FiniteModel, stages: usize) -> Result<FiniteHorizonSolution> {
    solve_finite_horizon_capped(fm, stages, DEFAULT_RULE_CAP)
}

pub fn solve_finite_horizon_capped(
    fm: &FiniteModel,
    stages: usize,
    cap: u128,
) -> Result<FiniteHorizonSolution> {
    let measures = fm.set.len();
    let mut tables = vec![Vec::new(); stages + 1];
    tables[stages] = fm.terminal.clone();
    if stages == 0 {
        return Ok(FiniteHorizonSolution {
            values: ValueTable {
                h: fm.h(),
                tables,
                discount: None,
            },
            rules: Vec::new(),
            policy: None,
        });
    }
    let (rules, next, cost) = fm.transition_tables(cap)?;
    let mut chosen = vec![Vec::new(); stages];
    for k in (0..stages).rev() {
        let ahead = &tables[k + 1];
        let (v, r): (Vec<f64>, Vec<u32>) = (0..measures)
            .into_par_iter()
            .map(|mu| {
                let row = mu * rules;
                bellman_min(rules, |r| cost[row + r] + ahead[next[row + r] as usize])
            })
            .unzip();
        tables[k] = v;
        chosen[k] = r;
    }
    let policy = Some(fm.tabular(&chosen)?);
    Ok(FiniteHorizonSolution {
        values: ValueTable {
            h: fm.h(),
            tables,
            discount: None,
        },
        rules: chosen,
        policy,
    })
}

fn bellman_min(rules: usize, q: impl Fn(usize) -> f64) -> (f64, u32) {
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for r in 0..rules {
        let v = q(r);
        if v < best {
            best = v;
            arg = r as u32;
        }
    }
    (best, arg)
}

#[derive(Debug, Clone)]
pub struct DiscountedSolution {
    pub values: ValueTable,
    pub rules: Vec<u32>,
    pub policy: Policy,
    pub iterations: usize,
}

/// Options for value iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueIteration {
    /// Target sup-norm distance to the fixed point.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub rule_cap: u128,
}

impl Default for ValueIteration {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 1_000_000,
            rule_cap: DEFAULT_RULE_CAP,
        }
    }
}

/// Value iteration from zero with `β = exp(-α h)`, stopped once the residual is at
/// most `tol (1 - β) / (2 β)`; the greedy rule against the final table is returned.
pub fn solve_discounted(fm: &FiniteModel, discount_rate: f64, opts: ValueIteration) -> Result<DiscountedSolution> {
    if !(discount_rate > 0.0) || !discount_rate.is_finite() {
        return Err(Error::config("finite_mdp", "discount rate must be positive"));
    }
    if !(opts.tolerance > 0.0) {
        return Err(Error::config("finite_mdp", "tolerance must be positive"));
    }
    let beta = (-discount_rate * fm.h()).exp();
    if !(beta < 1.0) {
        return Err(Error::config("finite_mdp", "discount factor rounds to one"));
    }
    let measures = fm.set.len();
    let (rules, next, cost) = fm.transition_tables(opts.rule_cap)?;
    let stop = opts.tolerance * (1.0 - beta) / (2.0 * beta);
    let mut v = vec![0.0; measures];
    let mut residuals = Vec::new();
    let mut iterations = 0;
    loop {
        let nv: Vec<f64> = (0..measures)
            .into_par_iter()
            .map(|mu| {
                let row = mu * rules;
                bellman_min(rules, |r| cost[row + r] + beta * v[next[row + r] as usize]).0
            })
            .collect();
        let res = nv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        residuals.push(res);
        v = nv;
        iterations += 1;
        if res <= stop {
            break;
        }
        if iterations >= opts.max_iterations {
            return Err(Error::Blowup {
                what: "value iterations",
                count: iterations as u128,
                cap: opts.max_iterations as u128,
            });
        }
    }
    let greedy: Vec<u32> = (0..measures)
        .map(|mu| {
            let row = mu * rules;
            bellman_min(rules, |r| cost[row + r] + beta * v[next[row + r] as usize]).1
        })
        .collect();
    let mut table = Vec::with_capacity(measures * fm.cells);
    for &r in &greedy {
        table.extend(fm.rule(r as usize));
    }
    let policy = Policy::StationaryMarkov(Arc::new(TabularPolicy::new(
        fm.set.clone(),
        fm.spec.actions.clone(),
        1,
        table,
    )?));
    Ok(DiscountedSolution {
        values: ValueTable {
            h: fm.h(),
            tables: vec![v],
            discount: Some(DiscountRecord {
                discount_rate,
                beta,
                tolerance: opts.tolerance,
                residuals,
            }),
        },
        rules: greedy,
        policy,
        iterations,
    })
}
