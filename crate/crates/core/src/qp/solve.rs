use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::assemble::{assemble, default_gamma, dot, QuadraticForm};
use super::project::{check_feasibility, project, ConstraintResiduals, ConstraintSet};
use super::QpError;
use crate::cohort::Cohort;
use crate::features::FeatureRanking;
use crate::regression::{ModelKind, ModelWeights, RegressionModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Trade-off between intra-positive spread and positive/negative
    /// separation. `None` picks `0.1 |P x P| / |P x N|`.
    pub gamma: Option<f64>,
    pub max_iters: usize,
    /// Initial step as a multiple of `1 / L`, `L` the gradient Lipschitz bound.
    pub step_size_init: f64,
    /// Step shrink factor in `(0, 1)` used by the backtracking line search.
    pub backtracking: f64,
    /// Stationarity and constraint-residual tolerance.
    pub tolerance: f64,
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            gamma: None,
            max_iters: 5000,
            step_size_init: 1.0,
            backtracking: 0.5,
            tolerance: 1e-9,
            n_starts: 8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), QpError> {
        let bad = |m: &str| Err(QpError::BadConfig(m.to_string()));
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g > 0.0) {
                return bad("gamma must be positive");
            }
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if !(self.step_size_init > 0.0) {
            return bad("step_size_init must be positive");
        }
        if !(self.backtracking > 0.0 && self.backtracking < 1.0) {
            return bad("backtracking factor must lie in (0, 1)");
        }
        if self.n_starts == 0 {
            return bad("n_starts must be at least 1");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// `max_iters` reached with the stationarity residual above tolerance.
    MaxIterations,
}

/// Objective trace of one start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start_index: usize,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub weights: Vec<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub residuals: ConstraintResiduals,
    pub start_index_of_best: usize,
    pub status: SolveStatus,
    pub starts: Vec<StartTrace>,
}

struct StartOutcome {
    weights: Vec<f64>,
    trace: StartTrace,
}

fn random_start(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn run_start(
    index: usize,
    start: Vec<f64>,
    q: &QuadraticForm,
    cs: &ConstraintSet,
    config: &OptimizerConfig,
    lipschitz: f64,
) -> Result<StartOutcome, QpError> {
    let proj_tol = config.tolerance * 1e-2;
    let mut x = start;
    let mut f = q.value(&x);
    let mut trace = vec![f];
    let t_base = config.step_size_init / lipschitz;
    let t_max = t_base * 1e3;
    let t_min = t_base * 1e-12;
    let mut t = t_base;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        let g = q.gradient(&x);
        let mut accepted = None;
        while t >= t_min {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
            let y = project(&trial, cs, proj_tol)?;
            let d: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let fy = q.value(&y);
            let model = f + dot(&g, &d) + dot(&d, &d) / (2.0 * t);
            if fy <= model && fy <= f {
                accepted = Some((y, d, fy));
                break;
            }
            t *= config.backtracking;
        }
        let Some((y, d, fy)) = accepted else {
            // No descent at any admissible step: stationary up to rounding.
            status = SolveStatus::Converged;
            break;
        };
        assert!(fy <= f, "accepted step increased the objective");
        let moved = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        x = y;
        f = fy;
        trace.push(f);
        if moved <= config.tolerance {
            status = SolveStatus::Converged;
            break;
        }
        t = (t / config.backtracking).min(t_max);
    }

    Ok(StartOutcome {
        weights: x,
        trace: StartTrace {
            start_index: index,
            objective_trace: trace,
            iterations,
            status,
            final_objective: f,
        },
    })
}

/// Multi-start projected gradient descent on `w' Q w` over `cs`.
///
/// Start 0 is the projection of the uniform vector; the others are seeded
/// random points of the simplex, projected. Starts run in parallel and the
/// best objective wins, ties going to the lowest start index.
pub fn solve(
    q: &QuadraticForm,
    cs: &ConstraintSet,
    config: &OptimizerConfig,
) -> Result<SolveResult, QpError> {
    config.validate()?;
    if q.dim() != cs.dim() {
        return Err(QpError::Dimension {
            expected: q.dim(),
            got: cs.dim(),
        });
    }
    check_feasibility(cs)?;

    let dim = q.dim();
    let proj_tol = config.tolerance * 1e-2;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts = Vec::with_capacity(config.n_starts);
    starts.push(project(&vec![1.0 / dim as f64; dim], cs, proj_tol)?);
    for _ in 1..config.n_starts {
        // perturb the start distribution a little toward vertices
        let mut v = random_start(&mut rng, dim);
        if rng.random_bool(0.5) {
            v.iter_mut().for_each(|x| *x = x.powi(3));
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
        }
        starts.push(project(&v, cs, proj_tol)?);
    }

    let lipschitz = q.lipschitz_bound();
    let outcomes: Vec<StartOutcome> = if lipschitz == 0.0 {
        // Zero form: every feasible point is optimal.
        starts
            .into_iter()
            .enumerate()
            .map(|(i, w)| StartOutcome {
                trace: StartTrace {
                    start_index: i,
                    objective_trace: vec![0.0],
                    iterations: 0,
                    status: SolveStatus::Converged,
                    final_objective: 0.0,
                },
                weights: w,
            })
            .collect()
    } else {
        starts
            .into_par_iter()
            .enumerate()
            .map(|(i, w)| run_start(i, w, q, cs, config, lipschitz))
            .collect::<Result<Vec<_>, _>>()?
    };

    let mut best = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.trace.final_objective < outcomes[best].trace.final_objective {
            best = i;
        }
    }
    let weights = outcomes[best].weights.clone();
    let residuals = cs.residuals(&weights);
    if residuals.max() > config.tolerance.max(1e-8) {
        return Err(QpError::InfeasibleConstraints(format!(
            "solution violates constraints by {:e}",
            residuals.max()
        )));
    }
    let best_trace = &outcomes[best].trace;
    Ok(SolveResult {
        objective_value: best_trace.final_objective,
        iterations: best_trace.iterations,
        status: best_trace.status,
        start_index_of_best: best,
        residuals,
        weights,
        starts: outcomes.into_iter().map(|o| o.trace).collect(),
    })
}

/// Options for fitting a regression model to a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub lower: f64,
    pub upper: f64,
    /// Per-weight bounds; override `lower`/`upper` when present.
    pub lower_bounds: Option<Vec<f64>>,
    pub upper_bounds: Option<Vec<f64>>,
    /// Feature ranking for the M1 ordering constraint; the default
    /// importance order when `None`. Ignored for M2.
    pub ranking: Option<FeatureRanking>,
    /// Drop the ordering constraint entirely.
    pub no_ordering: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lower: 0.0,
            upper: 1.0,
            lower_bounds: None,
            upper_bounds: None,
            ranking: None,
            no_ordering: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: RegressionModel,
    pub gamma: f64,
    pub solve: SolveResult,
}

/// Assemble, constrain and solve for one regression kind.
pub fn fit(cohort: &Cohort, kind: ModelKind, options: &FitOptions) -> Result<FitOutcome, QpError> {
    let gamma = options
        .optimizer
        .gamma
        .unwrap_or_else(|| default_gamma(cohort.positives.len().max(1), cohort.negatives.len().max(1)));
    let (q, cs) = assemble(cohort, kind, gamma)?;
    let dim = cs.dim();
    let lower = options
        .lower_bounds
        .clone()
        .unwrap_or_else(|| vec![options.lower; dim]);
    let upper = options
        .upper_bounds
        .clone()
        .unwrap_or_else(|| vec![options.upper; dim]);
    let mut cs = cs.with_bounds(lower, upper)?;
    if kind == ModelKind::M1 && !options.no_ordering {
        let ranking = options
            .ranking
            .clone()
            .unwrap_or_else(FeatureRanking::table_default);
        cs = cs.with_ordering(&ranking)?;
    }
    let solve = solve(&q, &cs, &options.optimizer)?;
    let weights = ModelWeights::from_solver(kind, solve.weights.clone())
        .map_err(|e| QpError::InfeasibleConstraints(e.to_string()))?;
    Ok(FitOutcome {
        model: RegressionModel::new(weights, cohort.caps.clone()),
        gamma,
        solve,
    })
}
