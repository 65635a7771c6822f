use std::path::{Path, PathBuf};

use mfc::em::{simulate as run_simulation, TimeGrid};
use mfc::finite_mdp::{
    build_transition, solve_discounted, solve_finite_horizon, FiniteModel, FiniteModelSpec, ValueIteration,
};
use mfc::harness::{run_experiment, ExperimentId, ExperimentPlan, RateReport};
use mfc::measure::StateGrid;
use mfc::model::{validate_model, ModelSpec};
use mfc::policy::{evaluate_discounted, evaluate_finite_horizon, CostEstimate, EvalOptions, Policy, Truncation};
use mfc::fmt_f64;
use serde::Serialize;

use crate::config::{CriterionChoice, RunConfig, Settings};
use crate::Failure;

pub struct Context {
    pub config: RunConfig,
    pub settings: Settings,
    pub model: ModelSpec,
}

impl Context {
    pub fn new(config: RunConfig, settings: Settings) -> Result<Self, Failure> {
        let model = ModelSpec::new(config.model.clone())?;
        Ok(Self {
            config,
            settings,
            model,
        })
    }

    fn time_grid(&self) -> Result<TimeGrid, Failure> {
        Ok(TimeGrid::new(self.settings.h, self.settings.horizon)?)
    }

    fn finite_spec(&self) -> Result<FiniteModelSpec, Failure> {
        let s = &self.settings;
        let actions = match &self.config.discretization.actions {
            Some(a) => {
                if let Some(bad) = a.iter().find(|u| !self.model.action_set().contains(u)) {
                    return Err(Failure::Config(format!(
                        "discretization.actions: {bad:?} is outside the action set"
                    )));
                }
                a.clone()
            }
            None => self.model.action_set().grid_points(),
        };
        Ok(FiniteModelSpec {
            grid: StateGrid::uniform(self.model.dim(), s.half_width, s.cells)?,
            n: s.n,
            actions,
            h: s.h,
        })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.settings.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        let dir = &self.settings.out;
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = self.out_path(name);
        let mut text = contents.to_string();
        if !text.ends_with('\n') {
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
        self.write(name, &text)
    }

    /// Policy from `[policy]`: a persisted file, a constant action, or the zero action.
    fn configured_policy(&self) -> Result<Policy, Failure> {
        let section = &self.config.policy;
        let policy = match (&section.file, &section.constant) {
            (Some(_), Some(_)) => {
                return Err(Failure::Config("policy.file and policy.constant are mutually exclusive".into()))
            }
            (Some(path), None) => load_policy(path)?,
            (None, Some(u)) => Policy::constant(u.clone()),
            (None, None) => {
                let zero = vec![0.0; self.model.action_set().dim()];
                if self.model.action_set().contains(&zero) {
                    Policy::constant(zero)
                } else {
                    Policy::constant(self.model.action_set().grid_points().swap_remove(0))
                }
            }
        };
        policy.check_against(&self.model)?;
        Ok(policy)
    }
}

fn load_policy(path: &Path) -> Result<Policy, Failure> {
    if !path.is_file() {
        return Err(Failure::Config(format!(
            "policy file {} not found (set policy.file or run a solve first)",
            path.display()
        )));
    }
    Ok(Policy::load(path)?)
}

pub fn simulate(ctx: &Context) -> Result<(), Failure> {
    let grid = ctx.time_grid()?;
    let policy = ctx.configured_policy()?;
    let bundle = run_simulation(&ctx.model, &grid, &policy, ctx.settings.particles, ctx.settings.seed)?;
    let csv = ctx.write("trajectory.csv", &bundle.to_csv())?;
    let summary = bundle.summary();
    let json = ctx.write_json("summary.json", &summary)?;
    println!(
        "simulated {} particles over {} steps (h = {})",
        summary.particles,
        summary.steps,
        fmt_f64(summary.h)
    );
    println!("mean total cost {}", fmt_f64(summary.mean_total_cost));
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

#[derive(Serialize)]
struct SolveRecord {
    criterion: CriterionChoice,
    h: f64,
    horizon: Option<f64>,
    stages: Option<usize>,
    discount_rate: Option<f64>,
    iterations: Option<usize>,
    cells: usize,
    n: u32,
    actions: Vec<Vec<f64>>,
    measures: usize,
    initial_measure: Vec<u32>,
    value: f64,
}

fn initial(ctx: &Context, fm: &FiniteModel) -> Result<(usize, Vec<u32>), Failure> {
    let mu0 = fm.initial_index(ctx.model.initial_state())?;
    Ok((mu0, fm.measure_set().get(mu0).counts().to_vec()))
}

pub fn solve_finite(ctx: &Context) -> Result<(), Failure> {
    let grid = ctx.time_grid()?;
    let fm = build_transition(&ctx.model, &ctx.finite_spec()?)?;
    let sol = solve_finite_horizon(&fm, grid.steps())?;
    let (mu0, counts) = initial(ctx, &fm)?;
    let value = sol.values.tables[0][mu0];
    match &sol.policy {
        Some(p) => {
            let text = serde_json::to_string_pretty(&p.to_file()).map_err(|e| Failure::Runtime(e.to_string()))?;
            ctx.write("policy.json", &text)?;
        }
        None => {
            eprintln!("warning: zero-stage horizon, no decision rules to persist");
            let stale = ctx.out_path("policy.json");
            if stale.is_file() {
                std::fs::remove_file(&stale)
                    .map_err(|e| Failure::Runtime(format!("cannot remove {}: {e}", stale.display())))?;
            }
        }
    }
    ctx.write("values.json", &sol.values.to_json()?)?;
    ctx.write_json(
        "solution.json",
        &SolveRecord {
            criterion: CriterionChoice::Finite,
            h: fm.h(),
            horizon: Some(ctx.settings.horizon),
            stages: Some(grid.steps()),
            discount_rate: None,
            iterations: None,
            cells: fm.cells(),
            n: fm.spec().n,
            actions: fm.actions().to_vec(),
            measures: fm.measures(),
            initial_measure: counts,
            value,
        },
    )?;
    println!("finite model: {} measures, {} stages", fm.measures(), grid.steps());
    println!("value at initial measure {}", fmt_f64(value));
    println!("wrote artifacts to {}", ctx.settings.out.display());
    Ok(())
}

pub fn solve_discounted_cmd(ctx: &Context) -> Result<(), Failure> {
    let fm = build_transition(&ctx.model, &ctx.finite_spec()?)?;
    let alpha = ctx.settings.discount_rate;
    let sol = solve_discounted(&fm, alpha, ValueIteration::default())?;
    let (mu0, counts) = initial(ctx, &fm)?;
    let value = sol.values.tables[0][mu0];
    let text = serde_json::to_string_pretty(&sol.policy.to_file()).map_err(|e| Failure::Runtime(e.to_string()))?;
    ctx.write("policy.json", &text)?;
    ctx.write("values.json", &sol.values.to_json()?)?;
    ctx.write_json(
        "solution.json",
        &SolveRecord {
            criterion: CriterionChoice::Discounted,
            h: fm.h(),
            horizon: None,
            stages: None,
            discount_rate: Some(alpha),
            iterations: Some(sol.iterations),
            cells: fm.cells(),
            n: fm.spec().n,
            actions: fm.actions().to_vec(),
            measures: fm.measures(),
            initial_measure: counts,
            value,
        },
    )?;
    println!("finite model: {} measures, {} value iterations", fm.measures(), sol.iterations);
    println!("value at initial measure {}", fmt_f64(value));
    println!("wrote artifacts to {}", ctx.settings.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvaluationRecord {
    policy_file: String,
    policy_kind: &'static str,
    criterion: CriterionChoice,
    h: f64,
    horizon: Option<f64>,
    discount_rate: Option<f64>,
    /// Cost of the policy on the finite model it was built on, for tabular policies.
    finite_model_value: Option<f64>,
    monte_carlo: CostEstimate,
}

pub fn evaluate(ctx: &Context) -> Result<(), Failure> {
    // recorded as configured so the artifact does not depend on the output directory
    let (path, recorded) = match &ctx.config.policy.file {
        Some(p) => (p.clone(), p.display().to_string()),
        None => (ctx.out_path("policy.json"), "policy.json".to_string()),
    };
    let policy = load_policy(&path)?;
    policy.check_against(&ctx.model)?;
    let criterion = ctx.config.policy.criterion.unwrap_or(match policy {
        Policy::StationaryMarkov(_) => CriterionChoice::Discounted,
        _ => CriterionChoice::Finite,
    });
    let s = &ctx.settings;
    let grid = ctx.time_grid()?;
    let finite_model_value = match policy.tabular() {
        Some(tab) => {
            let spec = FiniteModelSpec {
                grid: tab.grid().clone(),
                n: tab.measure_set().denominator(),
                actions: tab.actions().to_vec(),
                h: s.h,
            };
            let fm = build_transition(&ctx.model, &spec)?;
            let mu0 = fm.initial_index(ctx.model.initial_state())?;
            Some(match criterion {
                CriterionChoice::Finite => fm.evaluate_policy(tab, mu0, grid.steps())?,
                CriterionChoice::Discounted => fm.evaluate_stationary(tab, mu0, s.discount_rate)?,
            })
        }
        None => None,
    };
    let opts = EvalOptions::new(s.particles, s.replications, s.seed);
    let monte_carlo = match criterion {
        CriterionChoice::Finite => evaluate_finite_horizon(&ctx.model, &grid, &policy, opts)?,
        CriterionChoice::Discounted => {
            evaluate_discounted(&ctx.model, s.h, s.discount_rate, &policy, opts, Truncation::default())?
        }
    };
    let record = EvaluationRecord {
        policy_file: recorded,
        policy_kind: policy.kind(),
        criterion,
        h: s.h,
        horizon: (criterion == CriterionChoice::Finite).then_some(s.horizon),
        discount_rate: (criterion == CriterionChoice::Discounted).then_some(s.discount_rate),
        finite_model_value,
        monte_carlo,
    };
    let out = ctx.write_json("evaluation.json", &record)?;
    if let Some(v) = record.finite_model_value {
        println!("finite model value {}", fmt_f64(v));
    }
    let se = record.monte_carlo.std_error.map(fmt_f64).unwrap_or_else(|| "n/a".into());
    println!(
        "monte carlo cost {} (std error {se}, {} replications of {} particles)",
        fmt_f64(record.monte_carlo.mean),
        record.monte_carlo.replications,
        record.monte_carlo.particles
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Built-in plan for `id` with the run's model and any overrides from the config.
pub fn experiment_plan(ctx: &Context, id: ExperimentId) -> Result<ExperimentPlan, Failure> {
    let mut plan = ExperimentPlan::default_for(id);
    plan.model = ctx.config.model.clone();
    let d = &ctx.config.discretization;
    let x = &ctx.config.experiment;
    let s = &ctx.settings;
    plan.finite.half_width = s.half_width;
    plan.finite.cells_per_axis = s.cells;
    plan.finite.n = s.n;
    plan.discount_rate = s.discount_rate;
    plan.seed = s.seed;
    if let Some(t) = x.horizon.or(d.horizon) {
        plan.horizon = t;
    }
    if let Some(v) = &x.h_ladder {
        plan.h_ladder = v.clone();
    }
    if let Some(v) = x.h_ref {
        plan.h_ref = v;
    }
    if let Some(v) = &x.n_ladder {
        plan.n_ladder = v.clone();
    }
    if let Some(v) = x.particles {
        plan.particles = v;
    }
    if let Some(v) = x.replications {
        plan.replications = v;
    }
    if let Some(v) = x.slope_band {
        plan.slope_band = Some(v);
    }
    if let Some(v) = x.min_fraction {
        plan.min_fraction = v;
    }
    plan.validate()?;
    Ok(plan)
}

pub fn experiment(ctx: &Context, id: Option<&str>) -> Result<(), Failure> {
    let name = id
        .map(str::to_string)
        .or_else(|| ctx.config.experiment.id.clone())
        .ok_or_else(|| Failure::Config("no experiment id given (argument or experiment.id)".into()))?;
    let id = ExperimentId::parse(&name)?;
    let plan = experiment_plan(ctx, id)?;
    let report = run_experiment(&plan)?;
    ctx.write(&format!("{}.json", id.name()), &report.to_json()?)?;
    ctx.write(&format!("{}.csv", id.name()), &report.to_csv())?;
    print_report(&report);
    println!("wrote report to {}", ctx.settings.out.display());
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Tolerance(format!("{} failed: {}", id.name(), failed.join(", "))))
    }
}

fn print_report(report: &RateReport) {
    println!("{} ({} vs {})", report.experiment.name(), report.statistic, report.parameter);
    for p in &report.points {
        println!("  {} {}", fmt_f64(p.param), fmt_f64(p.estimate));
    }
    if let Some(fit) = &report.slope {
        println!("  slope {}", fmt_f64(fit.slope));
    }
    for c in &report.checks {
        let verdict = if c.passed { "ok" } else { "FAILED" };
        println!("  {} = {} (need {}) {verdict}", c.name, fmt_f64(c.value), c.requirement);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

pub fn validate(ctx: &Context) -> Result<(), Failure> {
    let report = validate_model(&ctx.model, ctx.settings.audit_samples, ctx.settings.seed)?;
    let out = ctx.write_json("audit.json", &report)?;
    println!("audited {} samples, wrote {}", report.samples, out.display());
    if report.passed() {
        println!("declared constants hold on all samples");
        Ok(())
    } else {
        for v in &report.violations {
            println!("  violation: {v}");
        }
        Err(Failure::Tolerance(format!("{} constant violations", report.violations.len())))
    }
}
