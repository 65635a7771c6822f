//! Euler-Maruyama propagation of particle ensembles.
//!
//! The law of the state is always represented by the ensemble's empirical measure.
//! Brownian increments are built from a base resolution `base_dt`: a step of size `h`
//! sums `h / base_dt` base increments in a fixed order, so two simulations sharing a
//! base resolution see exactly the same Brownian path.

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::model::{MeanField, ModelSpec};
use crate::policy::{InterpolatedPolicy, Policy, StepContext};
use crate::rng::NoiseSource;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Grid points within this fraction of a step of `t` count as reaching `t`.
const GRID_SLACK: f64 = 1e-9;

/// Uniform time grid `t_k = k h` on `[0, T]` with `N_T = sup{n : n h <= T}` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    h: f64,
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(h: f64, horizon: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::config("em", format!("step size must be positive, got {h}")));
        }
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(Error::config("em", format!("horizon must be nonnegative, got {horizon}")));
        }
        let slack = GRID_SLACK * h;
        let mut n = (horizon / h).floor();
        while n > 0.0 && n * h > horizon + slack {
            n -= 1.0;
        }
        while (n + 1.0) * h <= horizon + slack {
            n += 1.0;
        }
        if n > u32::MAX as f64 {
            return Err(Error::config("em", "too many time steps"));
        }
        Ok(Self {
            h,
            horizon,
            steps: n as usize,
        })
    }

    /// Grid with exactly `steps` steps of size `h` (horizon `steps * h`).
    pub fn with_steps(h: f64, steps: usize) -> Result<Self> {
        let g = Self::new(h, h * steps as f64)?;
        Ok(Self { steps, ..g })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `N_T`
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    /// Index `k` with `t ∈ [t_k, t_{k+1})`.
    pub fn step_at(&self, t: f64) -> Result<usize> {
        let slack = GRID_SLACK * self.h;
        if !(t >= 0.0) || t > self.horizon + slack {
            return Err(Error::Domain(format!("time {t} outside [0, {}]", self.horizon)));
        }
        let mut k = (t / self.h).floor();
        while k > 0.0 && k * self.h > t + slack {
            k -= 1.0;
        }
        while (k + 1.0) * self.h <= t + slack {
            k += 1.0;
        }
        Ok(k as usize)
    }
}

/// Source of Brownian increments for one replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Brownian {
    source: NoiseSource,
    replication: u32,
    base_dt: f64,
    base_sd: f64,
}

impl Brownian {
    pub fn new(seed: u64, replication: u32, base_dt: f64) -> Result<Self> {
        if !(base_dt > 0.0) || !base_dt.is_finite() {
            return Err(Error::config("em", "noise resolution must be positive"));
        }
        Ok(Self {
            source: NoiseSource::new(seed),
            replication,
            base_dt,
            base_sd: base_dt.sqrt(),
        })
    }

    pub fn base_dt(&self) -> f64 {
        self.base_dt
    }

    pub fn replication(&self) -> u32 {
        self.replication
    }

    /// Number of base increments in a step of size `h`.
    pub fn substeps(&self, h: f64) -> Result<u32> {
        let r = (h / self.base_dt).round();
        if r < 1.0 || ((r * self.base_dt) - h).abs() > 1e-12 * h || r > u32::MAX as f64 {
            return Err(Error::config(
                "em",
                format!("step {h} is not a multiple of the noise resolution {}", self.base_dt),
            ));
        }
        Ok(r as u32)
    }

    /// Base increment `ΔW` at base index `j`.
    #[inline]
    pub fn base_increment(&self, stream: u32, j: u32, out: &mut [f64]) {
        self.source.standard_normals(self.replication, stream, j, out);
        for v in out.iter_mut() {
            *v *= self.base_sd;
        }
    }

    /// Increment over step `k` of a grid with `substeps` base increments per step:
    /// the base increments summed in order, starting from zero.
    #[inline]
    pub fn increment(&self, stream: u32, k: usize, substeps: u32, out: &mut [f64], scratch: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let first = k as u32 * substeps;
        for j in 0..substeps {
            self.base_increment(stream, first + j, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += *s;
            }
        }
    }
}

/// Particle positions at step `k`, one noise stream per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    dim: usize,
    particles: Vec<f64>,
    step: usize,
    streams: Vec<u32>,
}

impl EnsembleState {
    /// `n` particles at `x0`, particle `i` reading stream `i`.
    pub fn at_point(x0: &[f64], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("em", "need at least one particle"));
        }
        let mut particles = Vec::with_capacity(n * x0.len());
        for _ in 0..n {
            particles.extend_from_slice(x0);
        }
        Self::new(x0.len(), particles, (0..n as u32).collect())
    }

    pub fn new(dim: usize, particles: Vec<f64>, streams: Vec<u32>) -> Result<Self> {
        if dim == 0 || particles.len() != dim * streams.len() || streams.is_empty() {
            return Err(Error::config("em", "ensemble shape mismatch"));
        }
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { step: 0 });
        }
        let mut sorted = streams.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("em", "particle streams must be distinct"));
        }
        Ok(Self {
            dim,
            particles,
            step: 0,
            streams,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn streams(&self) -> &[u32] {
        &self.streams
    }

    pub fn measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.particles.clone()).expect("finite ensemble")
    }

    pub fn mean_field(&self) -> MeanField {
        MeanField::of_particles(self.dim, &self.particles)
    }
}

/// Which measure couples the particles at each step.
#[derive(Debug, Clone, Copy)]
pub enum Coupling<'a> {
    /// The ensemble's own empirical measure.
    Empirical,
    /// A precomputed measure path indexed by step (last entry reused past the end).
    Frozen(&'a [EmpiricalMeasure]),
}

pub(crate) struct StepScratch {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    dw: Vec<f64>,
}

impl StepScratch {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            drift: vec![0.0; dim],
            sigma: vec![0.0; dim],
            dw: vec![0.0; dim],
        }
    }
}

/// Advances every particle one step. `increment(i, stream, k, out)` writes particle
/// `i`'s Brownian increment, `action_of(i, x)` returns agent `i`'s action and
/// `mf` is the coupling statistic; when `costs` is given, `c(X_k, μ_k, U_k)` is written
/// per particle before the state moves.
#[allow(clippy::too_many_arguments)]
pub(crate) fn advance<'p>(
    model: &ModelSpec,
    state: &mut EnsembleState,
    h: f64,
    mut increment: impl FnMut(usize, u32, usize, &mut [f64]),
    mf: &MeanField,
    mut action_of: impl FnMut(usize, &[f64]) -> &'p [f64],
    mut costs: Option<&mut [f64]>,
    scratch: &mut StepScratch,
) -> Result<()> {
    let d = state.dim;
    let k = state.step;
    for i in 0..state.streams.len() {
        let x = &state.particles[i * d..(i + 1) * d];
        let u = action_of(i, x);
        if let Some(c) = costs.as_deref_mut() {
            c[i] = model.running_cost(x, mf, u);
        }
        model.drift_into(x, mf, u, &mut scratch.drift);
        model.diffusion_diag_into(x, mf, &mut scratch.sigma);
        increment(i, state.streams[i], k, &mut scratch.dw);
        let x = &mut state.particles[i * d..(i + 1) * d];
        for j in 0..d {
            x[j] += scratch.drift[j] * h + scratch.sigma[j] * scratch.dw[j];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBlowup { step: k + 1 });
        }
    }
    state.step += 1;
    Ok(())
}

pub(crate) fn brownian_increments(
    noise: &Brownian,
    substeps: u32,
    dim: usize,
) -> impl FnMut(usize, u32, usize, &mut [f64]) + '_ {
    let mut base = vec![0.0; dim];
    move |_, stream, k, out| noise.increment(stream, k, substeps, out, &mut base)
}

fn check_dims(model: &ModelSpec, ensemble: &EnsembleState) -> Result<()> {
    if ensemble.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: ensemble.dim(),
        });
    }
    Ok(())
}

/// One step of the mean-field particle scheme under a single shared policy.
pub fn em_step_meanfield(
    model: &ModelSpec,
    ensemble: &EnsembleState,
    policy: &Policy,
    grid: &TimeGrid,
    noise: &Brownian,
) -> Result<EnsembleState> {
    check_dims(model, ensemble)?;
    let substeps = noise.substeps(grid.h())?;
    let mut next = ensemble.clone();
    let mf = ensemble.mean_field();
    let ctx = policy.prepare(ensemble.step(), ensemble.dim(), ensemble.particles());
    let mut scratch = StepScratch::new(ensemble.dim());
    advance(
        model,
        &mut next,
        grid.h(),
        brownian_increments(noise, substeps, ensemble.dim()),
        &mf,
        |_, x| policy.action(&ctx, x),
        None,
        &mut scratch,
    )?;
    Ok(next)
}

/// One step of the N-particle system where agent `i` follows `policies[i]`; the
/// coupling measure is always the empirical measure of all agents.
pub fn em_step_nparticle(
    model: &ModelSpec,
    ensemble: &EnsembleState,
    policies: &[Policy],
    grid: &TimeGrid,
    noise: &Brownian,
) -> Result<EnsembleState> {
    check_dims(model, ensemble)?;
    if policies.len() != ensemble.len() {
        return Err(Error::config(
            "em",
            format!("{} policies for {} agents", policies.len(), ensemble.len()),
        ));
    }
    let substeps = noise.substeps(grid.h())?;
    let mut next = ensemble.clone();
    let mf = ensemble.mean_field();
    let ctxs: Vec<StepContext> = policies
        .iter()
        .map(|p| p.prepare(ensemble.step(), ensemble.dim(), ensemble.particles()))
        .collect();
    let mut scratch = StepScratch::new(ensemble.dim());
    advance(
        model,
        &mut next,
        grid.h(),
        brownian_increments(noise, substeps, ensemble.dim()),
        &mf,
        |i, x| policies[i].action(&ctxs[i], x),
        None,
        &mut scratch,
    )?;
    Ok(next)
}

/// Snapshots of a simulated ensemble and the realized costs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub dim: usize,
    pub particles: usize,
    pub h: f64,
    pub horizon: f64,
    /// Particle positions per step, `N_T + 1` entries.
    pub snapshots: Vec<Vec<f64>>,
    /// `c(X_k, μ_k, U_k) * h` per step `k < N_T` and particle.
    pub running_costs: Vec<Vec<f64>>,
    /// `c_T(X_{N_T}, μ_{N_T})` per particle.
    pub terminal_costs: Vec<f64>,
}

/// Per-run metadata written next to a trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub h: f64,
    pub horizon: f64,
    pub steps: usize,
    pub particles: usize,
    pub dim: usize,
    pub mean_running_cost: f64,
    pub mean_terminal_cost: f64,
    pub mean_total_cost: f64,
    pub final_mean: Vec<f64>,
}

impl TrajectoryBundle {
    pub fn steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    /// Empirical measure at step `k`; the interpolated process at time `t` is the
    /// snapshot at `floor(t / h)`.
    pub fn measure(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.snapshots[k].clone()).expect("finite snapshot")
    }

    pub fn particle(&self, k: usize, i: usize) -> &[f64] {
        &self.snapshots[k][i * self.dim..(i + 1) * self.dim]
    }

    /// Per-particle total cost `Σ c h + c_T`.
    pub fn particle_totals(&self) -> Vec<f64> {
        let mut tot = self.terminal_costs.clone();
        for step in &self.running_costs {
            for (t, c) in tot.iter_mut().zip(step) {
                *t += c;
            }
        }
        tot
    }

    pub fn summary(&self) -> TrajectorySummary {
        let n = self.particles as f64;
        let running: f64 = self.running_costs.iter().flatten().fold(0.0, |a, b| a + b) / n;
        let terminal: f64 = self.terminal_costs.iter().fold(0.0, |a, b| a + b) / n;
        let last = self.measure(self.steps());
        TrajectorySummary {
            h: self.h,
            horizon: self.horizon,
            steps: self.steps(),
            particles: self.particles,
            dim: self.dim,
            mean_running_cost: running,
            mean_terminal_cost: terminal,
            mean_total_cost: running + terminal,
            final_mean: last.mean(),
        }
    }

    /// Rows `step,particle,x0..x{d-1},cost`; the cost column holds `c h` before the
    /// last step and `c_T` at the last step.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,particle");
        for j in 0..self.dim {
            let _ = write!(s, ",x{j}");
        }
        s.push_str(",cost\n");
        let last = self.steps();
        for (k, snap) in self.snapshots.iter().enumerate() {
            for i in 0..self.particles {
                let _ = write!(s, "{k},{i}");
                for v in &snap[i * self.dim..(i + 1) * self.dim] {
                    let _ = write!(s, ",{}", crate::fmt_f64(*v));
                }
                let c = if k == last {
                    self.terminal_costs[i]
                } else {
                    self.running_costs[k][i]
                };
                let _ = writeln!(s, ",{}", crate::fmt_f64(c));
            }
        }
        s
    }
}

/// Options shared by the simulation entry points.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions<'a> {
    pub seed: u64,
    pub replication: u32,
    /// Brownian base resolution; defaults to the step size.
    pub noise_dt: Option<f64>,
    pub coupling: Coupling<'a>,
}

impl<'a> SimOptions<'a> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            replication: 0,
            noise_dt: None,
            coupling: Coupling::Empirical,
        }
    }

    pub fn replication(mut self, r: u32) -> Self {
        self.replication = r;
        self
    }

    pub fn noise_dt(mut self, dt: f64) -> Self {
        self.noise_dt = Some(dt);
        self
    }

    pub fn coupling(mut self, c: Coupling<'a>) -> Self {
        self.coupling = c;
        self
    }
}

/// Simulates `n` particles started at the model's initial state over the grid.
pub fn simulate(
    model: &ModelSpec,
    grid: &TimeGrid,
    policy: &Policy,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBundle> {
    simulate_with(model, grid, policy, n, SimOptions::new(seed))
}

pub fn simulate_with(
    model: &ModelSpec,
    grid: &TimeGrid,
    policy: &Policy,
    n: usize,
    opts: SimOptions<'_>,
) -> Result<TrajectoryBundle> {
    let start = EnsembleState::at_point(model.initial_state(), n)?;
    simulate_from(model, grid, policy, start, opts)
}

/// Simulation from an arbitrary starting ensemble.
pub fn simulate_from(
    model: &ModelSpec,
    grid: &TimeGrid,
    policy: &Policy,
    start: EnsembleState,
    opts: SimOptions<'_>,
) -> Result<TrajectoryBundle> {
    check_dims(model, &start)?;
    let noise = Brownian::new(opts.seed, opts.replication, opts.noise_dt.unwrap_or(grid.h()))?;
    let substeps = noise.substeps(grid.h())?;
    let n = start.len();
    let d = start.dim();
    let mut state = start;
    let mut snapshots = Vec::with_capacity(grid.steps() + 1);
    let mut running_costs = Vec::with_capacity(grid.steps());
    let mut scratch = StepScratch::new(d);
    let h = grid.h();
    snapshots.push(state.particles.clone());
    for k in 0..grid.steps() {
        let (mf, ctx) = coupling_at(&opts.coupling, k, &state, policy);
        let mut costs = vec![0.0; n];
        advance(
            model,
            &mut state,
            h,
            brownian_increments(&noise, substeps, d),
            &mf,
            |_, x| policy.action(&ctx, x),
            Some(&mut costs),
            &mut scratch,
        )?;
        costs.iter_mut().for_each(|c| *c *= h);
        running_costs.push(costs);
        snapshots.push(state.particles.clone());
    }
    let (mf, _) = coupling_at(&opts.coupling, grid.steps(), &state, policy);
    let terminal_costs = state
        .particles
        .chunks_exact(d)
        .map(|x| model.terminal_cost(x, &mf))
        .collect();
    Ok(TrajectoryBundle {
        dim: d,
        particles: n,
        h,
        horizon: grid.horizon(),
        snapshots,
        running_costs,
        terminal_costs,
    })
}

fn coupling_at(
    coupling: &Coupling<'_>,
    k: usize,
    state: &EnsembleState,
    policy: &Policy,
) -> (MeanField, StepContext) {
    match coupling {
        Coupling::Empirical => (
            state.mean_field(),
            policy.prepare(k, state.dim(), state.particles()),
        ),
        Coupling::Frozen(path) => {
            let mu = &path[k.min(path.len() - 1)];
            (MeanField::of(mu), policy.prepare_measure(k, mu))
        }
    }
}

/// Fine-step simulation standing in for the continuous-time process.
///
/// Runs at `h_ref` with the control held constant over each coarse interval
/// `[t_k, t_{k+1})`: open-loop actions come from the interpolated path and feedback
/// rules are sampled from the fine state at each coarse time. The Brownian path has
/// base resolution `h_ref`, the same one a coarse run must use to be coupled to it.
/// Snapshots are kept at every fine step.
pub fn reference_simulate(
    model: &ModelSpec,
    control: &InterpolatedPolicy,
    h_ref: f64,
    n: usize,
    opts: SimOptions<'_>,
) -> Result<TrajectoryBundle> {
    let mut snapshots = Vec::new();
    let mut costs = Vec::new();
    let mut terminal = Vec::new();
    reference_run(
        model,
        control,
        h_ref,
        n,
        opts,
        |_, state, step_costs| {
            snapshots.push(state.particles().to_vec());
            if let Some(c) = step_costs {
                costs.push(c.to_vec());
            }
        },
        &mut terminal,
    )?;
    Ok(TrajectoryBundle {
        dim: model.dim(),
        particles: n,
        h: h_ref,
        horizon: control.grid().horizon(),
        snapshots,
        running_costs: costs,
        terminal_costs: terminal,
    })
}

/// Checks `h_ref` against the coarse grid and returns the refinement ratio.
pub fn refinement_ratio(h: f64, h_ref: f64) -> Result<usize> {
    if !(h_ref > 0.0) {
        return Err(Error::config("em", "reference step must be positive"));
    }
    let r = (h / h_ref).round();
    if r < 1.0 || (r * h_ref - h).abs() > 1e-12 * h {
        return Err(Error::config(
            "em",
            format!("reference step {h_ref} does not divide the coarse step {h}"),
        ));
    }
    let r = r as usize;
    if r != 1 && r < 16 {
        return Err(Error::config(
            "em",
            format!("reference step must be h or at most h/16 (ratio {r})"),
        ));
    }
    Ok(r)
}

/// Streaming core of [`reference_simulate`]: calls `observe(fine_step, state, costs)`
/// after every fine step (and once at the start with `None` costs).
pub(crate) fn reference_run(
    model: &ModelSpec,
    control: &InterpolatedPolicy,
    h_ref: f64,
    n: usize,
    opts: SimOptions<'_>,
    mut observe: impl FnMut(usize, &EnsembleState, Option<&[f64]>),
    terminal: &mut Vec<f64>,
) -> Result<()> {
    let grid = control.grid();
    let ratio = refinement_ratio(grid.h(), h_ref)?;
    let policy = control.policy();
    let noise = Brownian::new(opts.seed, opts.replication, opts.noise_dt.unwrap_or(h_ref))?;
    let substeps = noise.substeps(h_ref)?;
    let mut state = EnsembleState::at_point(model.initial_state(), n)?;
    check_dims(model, &state)?;
    let d = state.dim();
    let fine_steps = grid.steps() * ratio;
    let mut scratch = StepScratch::new(d);
    let mut held: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut costs = vec![0.0; n];
    observe(0, &state, None);
    for j in 0..fine_steps {
        let (mf, _) = coupling_at(&opts.coupling, j, &state, policy);
        if j % ratio == 0 {
            let k = j / ratio;
            let coarse_ctx = policy.prepare(k, d, state.particles());
            for (i, slot) in held.iter_mut().enumerate() {
                *slot = policy.action(&coarse_ctx, state.particle(i)).to_vec();
            }
        }
        advance(
            model,
            &mut state,
            h_ref,
            brownian_increments(&noise, substeps, d),
            &mf,
            |i, _| held[i].as_slice(),
            Some(&mut costs),
            &mut scratch,
        )?;
        costs.iter_mut().for_each(|c| *c *= h_ref);
        observe(j + 1, &state, Some(&costs));
    }
    let mf = state.mean_field();
    terminal.clear();
    terminal.extend(state.particles.chunks_exact(d).map(|x| model.terminal_cost(x, &mf)));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{satmr_config, ActionSet, Constants, FunctionRef, ModelConfig};

    pub(crate) fn constant_model(b: f64, sigma: f64) -> ModelSpec {
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

    fn zero_action() -> Policy {
        Policy::constant(vec![0.0])
    }

    #[test]
    fn time_grid_step_count() {
        assert_eq!(TimeGrid::new(0.25, 1.0).unwrap().steps(), 4);
        assert_eq!(TimeGrid::new(0.3, 1.0).unwrap().steps(), 3);
        assert_eq!(TimeGrid::new(0.1, 1.0).unwrap().steps(), 10);
        assert_eq!(TimeGrid::new(0.5, 0.2).unwrap().steps(), 0);
        let g = TimeGrid::new(0.1, 0.7).unwrap();
        assert_eq!(g.steps(), 7);
        assert_eq!(TimeGrid::new(0.1, 0.75).unwrap().steps(), 7);
        assert!(TimeGrid::new(0.0, 1.0).is_err());
        assert_eq!(g.step_at(0.3).unwrap(), 3);
        assert!(g.step_at(0.8).is_err());
    }

    #[test]
    fn frozen_dynamics_only_advance_step() {
        let m = constant_model(0.0, 0.0);
        let grid = TimeGrid::new(0.1, 1.0).unwrap();
        let e = EnsembleState::new(1, vec![0.3, -1.2, 4.0], vec![0, 1, 2]).unwrap();
        let noise = Brownian::new(1, 0, 0.1).unwrap();
        let next = em_step_meanfield(&m, &e, &zero_action(), &grid, &noise).unwrap();
        assert_eq!(next.particles(), e.particles());
        assert_eq!(next.step(), 1);
    }

    #[test]
    fn unit_drift_moves_by_h() {
        let m = constant_model(1.0, 0.0);
        let grid = TimeGrid::new(0.1, 1.0).unwrap();
        let e = EnsembleState::at_point(&[0.0], 1).unwrap();
        let noise = Brownian::new(1, 0, 0.1).unwrap();
        let next = em_step_meanfield(&m, &e, &zero_action(), &grid, &noise).unwrap();
        assert_eq!(next.particles(), &[0.1]);
    }

    #[test]
    fn satmr_step_is_pinned() {
        let m = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.1, 1.0).unwrap();
        let e = EnsembleState::new(1, vec![0.0, 0.5, -0.25, 1.0], vec![0, 1, 2, 3]).unwrap();
        let noise = Brownian::new(42, 0, 0.1).unwrap();
        let a = em_step_meanfield(&m, &e, &zero_action(), &grid, &noise).unwrap();
        let b = em_step_meanfield(&m, &e, &zero_action(), &grid, &noise).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| em_step_meanfield(&m, &e, &zero_action(), &grid, &noise).unwrap());
        assert_eq!(a, c);
        // recomputed by hand from the same normals: x + b h + σ(x) sqrt(h) z
        let mf = e.mean_field();
        for i in 0..4 {
            let x = e.particle(i)[0];
            let mut z = [0.0];
            NoiseSource::new(42).standard_normals(0, i as u32, 0, &mut z);
            let b = -0.5 * x.tanh() + 0.5 * mf.tanh_mean[0];
            let s = 0.5 + 0.25 / (1.0 + x * x);
            let expect = x + b * 0.1 + s * (z[0] * 0.1f64.sqrt());
            assert_eq!(a.particle(i)[0].to_bits(), expect.to_bits(), "particle {i}");
        }
    }

    #[test]
    fn nparticle_matches_meanfield_for_identical_rules() {
        let m = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.05, 1.0).unwrap();
        let e = EnsembleState::new(1, vec![0.1, -0.4, 0.9], vec![0, 1, 2]).unwrap();
        let noise = Brownian::new(9, 3, 0.05).unwrap();
        let p = Policy::constant(vec![0.5]);
        let a = em_step_meanfield(&m, &e, &p, &grid, &noise).unwrap();
        let b = em_step_nparticle(&m, &e, &[p.clone(), p.clone(), p], &grid, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_agent_is_a_plain_sde_step() {
        let m = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.05, 1.0).unwrap();
        let e = EnsembleState::at_point(&[0.7], 1).unwrap();
        let noise = Brownian::new(2, 0, 0.05).unwrap();
        let next = em_step_nparticle(&m, &e, &[Policy::constant(vec![-1.0])], &grid, &noise).unwrap();
        let mut z = [0.0];
        NoiseSource::new(2).standard_normals(0, 0, 0, &mut z);
        let x: f64 = 0.7;
        // μ = δ_x, so the mean-field term is tanh(x) itself
        let b = -0.5 * x.tanh() + 0.5 * x.tanh() - 1.0;
        let s = 0.5 + 0.25 / (1.0 + x * x);
        let expect = x + b * 0.05 + s * (z[0] * 0.05f64.sqrt());
        assert!((next.particle(0)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn permuting_agents_permutes_output() {
        let m = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.1, 1.0).unwrap();
        let noise = Brownian::new(5, 0, 0.1).unwrap();
        let p = Policy::constant(vec![0.25]);
        let e = EnsembleState::new(1, vec![0.1, -0.4, 0.9, 2.0], vec![0, 1, 2, 3]).unwrap();
        let perm = [2usize, 0, 3, 1];
        let ep = EnsembleState::new(
            1,
            perm.iter().map(|&i| e.particles()[i]).collect(),
            perm.iter().map(|&i| e.streams()[i]).collect(),
        )
        .unwrap();
        let ps = vec![p.clone(); 4];
        let a = em_step_nparticle(&m, &e, &ps, &grid, &noise).unwrap();
        let b = em_step_nparticle(&m, &ep, &ps, &grid, &noise).unwrap();
        let mut sa: Vec<f64> = a.particles().to_vec();
        let mut sb: Vec<f64> = b.particles().to_vec();
        for (slot, &i) in perm.iter().enumerate() {
            // the tanh statistic is summed in a different order, so allow rounding
            assert!((b.particles()[slot] - a.particles()[i]).abs() < 1e-14);
        }
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_horizon_keeps_initial_snapshot() {
        let m = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.5, 0.2).unwrap();
        let b = simulate(&m, &grid, &zero_action(), 8, 1).unwrap();
        assert_eq!(b.snapshots.len(), 1);
        assert!(b.running_costs.is_empty());
        assert_eq!(b.terminal_costs.len(), 8);
    }

    #[test]
    fn zero_cost_records_zeros() {
        let m = constant_model(0.3, 1.0);
        let grid = TimeGrid::new(0.1, 1.0).unwrap();
        let b = simulate(&m, &grid, &zero_action(), 5, 1).unwrap();
        assert_eq!(b.snapshots.len(), 11);
        assert!(b.running_costs.iter().flatten().all(|&c| c == 0.0));
        assert!(b.terminal_costs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn frozen_coupling_makes_prefix_paths_independent_of_n() {
        let m = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.1, 1.0).unwrap();
        let p = zero_action();
        let small = simulate(&m, &grid, &p, 16, 77).unwrap();
        let path: Vec<EmpiricalMeasure> = (0..=grid.steps()).map(|k| small.measure(k)).collect();
        let opts = SimOptions::new(77).coupling(Coupling::Frozen(&path));
        let a = simulate_with(&m, &grid, &p, 16, opts).unwrap();
        let b = simulate_with(&m, &grid, &p, 32, opts).unwrap();
        // the frozen replay of the 16-particle run reproduces it exactly
        assert_eq!(a.snapshots, small.snapshots);
        for k in 0..=grid.steps() {
            assert_eq!(&b.snapshots[k][..16], &a.snapshots[k][..]);
        }
    }

    #[test]
    fn fine_increments_sum_to_coarse_increment() {
        let coarse = Brownian::new(3, 1, 1.0 / 1024.0).unwrap();
        let ratio = coarse.substeps(1.0 / 16.0).unwrap();
        assert_eq!(ratio, 64);
        let mut dw = [0.0; 2];
        let mut scratch = [0.0; 2];
        let mut fine = [0.0; 2];
        for k in 0..4 {
            coarse.increment(7, k, ratio, &mut dw, &mut scratch);
            let mut acc = [0.0; 2];
            for j in 0..ratio {
                coarse.base_increment(7, k as u32 * ratio + j, &mut fine);
                acc[0] += fine[0];
                acc[1] += fine[1];
            }
            assert_eq!(acc[0].to_bits(), dw[0].to_bits());
            assert_eq!(acc[1].to_bits(), dw[1].to_bits());
        }
    }

    #[test]
    fn reference_matches_coarse_for_deterministic_constant_drift() {
        let m = constant_model(0.7, 0.0);
        let grid = TimeGrid::new(0.125, 1.0).unwrap();
        let p = zero_action();
        let control = InterpolatedPolicy::new(p.clone(), grid);
        let fine = reference_simulate(&m, &control, 0.125 / 16.0, 3, SimOptions::new(1)).unwrap();
        let coarse = simulate(&m, &grid, &p, 3, 1).unwrap();
        for k in 0..=grid.steps() {
            for (a, b) in fine.snapshots[16 * k].iter().zip(&coarse.snapshots[k]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_at_coarse_step_is_simulate() {
        let m = ModelSpec::new(satmr_config(-0.5, 0.5, 1.0, 0.5, 0.25, 0.1, 0.5)).unwrap();
        let grid = TimeGrid::new(0.125, 1.0).unwrap();
        let p = Policy::open_loop(vec![vec![0.5], vec![-0.5]]);
        let control = InterpolatedPolicy::new(p.clone(), grid);
        let fine = reference_simulate(&m, &control, 0.125, 8, SimOptions::new(4)).unwrap();
        let coarse = simulate(&m, &grid, &p, 8, 4).unwrap();
        assert_eq!(fine.snapshots, coarse.snapshots);
        assert_eq!(fine.running_costs, coarse.running_costs);
        assert_eq!(fine.terminal_costs, coarse.terminal_costs);
    }

    #[test]
    fn reference_rejects_bad_ratios() {
        assert!(refinement_ratio(0.1, 0.03).is_err());
        assert!(refinement_ratio(0.1, 0.025).is_err());
        assert_eq!(refinement_ratio(0.125, 0.125 / 32.0).unwrap(), 32);
    }

    #[test]
    fn csv_has_one_row_per_particle_step() {
        let m = ModelSpec::satmr_default();
        let grid = TimeGrid::new(0.25, 1.0).unwrap();
        let b = simulate(&m, &grid, &zero_action(), 3, 1).unwrap();
        let csv = b.to_csv();
        assert_eq!(csv.lines().count(), 1 + 5 * 3);
        assert!(csv.starts_with("step,particle,x0,cost\n"));
    }
}
