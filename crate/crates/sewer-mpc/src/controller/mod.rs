//! Finite-horizon planning over the linear network model with explicit weir
//! overflow decisions.
//!
//! Two controllers share one prediction model and one cost. The
//! deterministic controller trusts the forecast mean. The chance-constrained
//! controller also propagates forecast variances and backs every uncertain
//! constraint away from its limit by the standard deviation times a normal
//! quantile, paying for slack where the backoff cannot hold. Both produce a
//! plan over the horizon from which the first control is applied.

mod assemble;
mod prediction;

pub use assemble::{assemble_ccmpc_qp, assemble_deterministic_qp};
pub(crate) use assemble::OBJECTIVE_SCALE;
pub use prediction::{build_prediction, simulate_expectation, PredictionOperator};

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::network::{NetworkModel, SystemState};
use crate::qp::{self, QpProblem, QpSolution, SolveStatus, SolverSettings};
use crate::stochastics::Forecast;

/// Column layout of the stacked decision vector shared by both controllers.
/// Controls come first in step-major order, then tank weir flows with slots
/// for steps `0..=N` per tank, then pipe weir flows with slots for steps
/// `0..N`. Tanks get the extra final slot because the volume constraint at
/// the end of the horizon can still demand a spill; pipe flows only exist at
/// the sampled steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecisionLayout {
    pub n_steps: usize,
    pub n_controls: usize,
    pub n_pipes: usize,
}

impl DecisionLayout {
    pub fn new(model: &NetworkModel, n_steps: usize) -> Self {
        DecisionLayout {
            n_steps,
            n_controls: model.n_tanks(),
            n_pipes: model.n_pipes(),
        }
    }

    pub fn n_u(&self) -> usize {
        self.n_controls * self.n_steps
    }

    pub fn n_qw(&self) -> usize {
        self.n_controls * (self.n_steps + 1) + self.n_pipes * self.n_steps
    }

    /// Length of the decision vector seen by the prediction operator, not
    /// counting slack columns.
    pub fn n_dec(&self) -> usize {
        self.n_u() + self.n_qw()
    }

    /// Column of control `tank` at step `k`, `k` in `0..N`.
    pub fn u_col(&self, k: usize, tank: usize) -> usize {
        debug_assert!(k < self.n_steps && tank < self.n_controls);
        k * self.n_controls + tank
    }

    /// Column of the weir flow of tank `tank` at step `k`, `k` in `0..=N`.
    pub fn qw_tank_col(&self, tank: usize, k: usize) -> usize {
        debug_assert!(k <= self.n_steps && tank < self.n_controls);
        self.n_u() + tank * (self.n_steps + 1) + k
    }

    /// Column of the weir flow of pipe `pipe` at step `k`, `k` in `0..N`.
    pub fn qw_pipe_col(&self, pipe: usize, k: usize) -> usize {
        debug_assert!(k < self.n_steps && pipe < self.n_pipes);
        self.n_u() + self.n_controls * (self.n_steps + 1) + pipe * self.n_steps + k
    }
}

/// Controller weights and horizon. Overflow weights are per weir element in
/// `NetworkModel::weir_elements` order; `alpha` is the confidence level of
/// the tightened floor constraints, `gamma` that of the weir activation
/// constraints. The deterministic controller ignores both levels.
#[derive(Clone, Debug)]
pub struct ControllerConfig {
    pub horizon: usize,
    /// Weight R on squared control moves.
    pub move_weight: f64,
    /// Per-flow weight on the treatment plant actuator, negative to reward
    /// forwarding water to treatment.
    pub wwtp_weight: f64,
    /// Per-flow weight on total weir overflow.
    pub env_weight: f64,
    /// Per-volume weight on accumulated overflow, one entry per weir.
    pub overflow_weights: Vec<f64>,
    /// Per-unit cost of the feasibility slacks of the chance constraints.
    pub slack_weight: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl ControllerConfig {
    /// Weighting used with the six tank benchmark network: a 100 minute
    /// horizon at 5 minute samples, overflow weights grading the weirs by
    /// the sensitivity of their receiving waters.
    pub fn benchmark() -> Self {
        ControllerConfig {
            horizon: 20,
            move_weight: 0.01,
            wwtp_weight: -1.0,
            env_weight: 2.0,
            overflow_weights: vec![
                1000.0, 5000.0, 5000.0, 5000.0, 5000.0, 10000.0, 10000.0, 10000.0, 15000.0,
                5000.0,
            ],
            slack_weight: 100.0,
            alpha: 0.9,
            gamma: 0.9,
        }
    }

    /// Same structure with one shared overflow weight, for arbitrary
    /// networks.
    pub fn uniform(model: &NetworkModel, horizon: usize, overflow_weight: f64) -> Self {
        ControllerConfig {
            horizon,
            move_weight: 0.01,
            wwtp_weight: -1.0,
            env_weight: 2.0,
            overflow_weights: vec![overflow_weight; model.weir_elements().len()],
            slack_weight: 100.0,
            alpha: 0.9,
            gamma: 0.9,
        }
    }

    pub(crate) fn check(&self, model: &NetworkModel) -> Result<(), Error> {
        if self.horizon == 0 {
            return Err(Error::Domain("horizon must be at least 1 step".into()));
        }
        if !(self.move_weight.is_finite() && self.move_weight > 0.0) {
            return Err(Error::Domain(format!(
                "move weight must be positive, got {}",
                self.move_weight
            )));
        }
        if !self.wwtp_weight.is_finite() || !self.env_weight.is_finite() {
            return Err(Error::Domain("flow weights must be finite".into()));
        }
        if !(self.slack_weight.is_finite() && self.slack_weight > 0.0) {
            return Err(Error::Domain(format!(
                "slack weight must be positive, got {}",
                self.slack_weight
            )));
        }
        let weirs = model.weir_elements().len();
        if self.overflow_weights.len() != weirs {
            return Err(Error::Dimension(format!(
                "{} overflow weights for {} weir elements",
                self.overflow_weights.len(),
                weirs
            )));
        }
        for w in &self.overflow_weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Domain(format!(
                    "overflow weights must be nonnegative, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn check_levels(&self) -> Result<(), Error> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(0.5..1.0).contains(&v) {
                return Err(Error::Domain(format!(
                    "{name} must lie in [0.5, 1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A solved plan over the horizon, unstacked into named trajectories. The
/// objective is reported in the original weight units, with the solver's
/// internal scaling divided out.
#[derive(Clone, Debug)]
pub struct ControlPlan {
    /// Planned actuator flows, tanks x N.
    pub controls: DMatrix<f64>,
    /// Planned tank weir flows, tanks x (N + 1).
    pub tank_overflows: DMatrix<f64>,
    /// Planned pipe weir flows, pipes x N.
    pub pipe_overflows: DMatrix<f64>,
    pub objective: f64,
    /// Total use of the chance constraint slacks, zero for the
    /// deterministic controller.
    pub slack_usage: f64,
    /// Deliverable range of the first control, from the folded step 0
    /// actuator coupling.
    pub u0_upper: DVector<f64>,
    pub solution: QpSolution,
    pub layout: DecisionLayout,
}

fn make_plan(problem: &QpProblem, layout: DecisionLayout, solution: QpSolution) -> ControlPlan {
    let x = &solution.primal;
    let n = layout.n_steps;
    let controls = DMatrix::from_fn(layout.n_controls, n, |t, k| x[layout.u_col(k, t)]);
    let tank_overflows =
        DMatrix::from_fn(layout.n_controls, n + 1, |t, k| x[layout.qw_tank_col(t, k)]);
    let pipe_overflows = DMatrix::from_fn(layout.n_pipes, n, |p, k| x[layout.qw_pipe_col(p, k)]);
    let (s0, sl) = problem.blocks.s;
    let (c0, cl) = problem.blocks.c;
    let slack_usage = x.rows(s0, sl).sum() + x.rows(c0, cl).sum();
    let u0_upper = DVector::from_fn(layout.n_controls, |t, _| problem.upper[layout.u_col(0, t)]);
    ControlPlan {
        controls,
        tank_overflows,
        pipe_overflows,
        objective: solution.objective / OBJECTIVE_SCALE,
        slack_usage,
        u0_upper,
        solution,
        layout,
    }
}

fn solve_plan(
    problem: QpProblem,
    layout: DecisionLayout,
    settings: &SolverSettings,
) -> Result<ControlPlan, Error> {
    let solution = qp::solve(&problem, settings)?;
    if solution.status == SolveStatus::Infeasible {
        return Err(Error::Solver(
            "controller problem reported infeasible".into(),
        ));
    }
    Ok(make_plan(&problem, layout, solution))
}

/// Plans with the deterministic controller from the measured state.
pub fn plan_deterministic(
    model: &NetworkModel,
    state: &SystemState,
    forecast: &Forecast,
    config: &ControllerConfig,
    prev_control: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<ControlPlan, Error> {
    let problem = assemble_deterministic_qp(model, state, forecast, config, prev_control)?;
    solve_plan(problem, DecisionLayout::new(model, config.horizon), settings)
}

/// Plans with the chance-constrained controller from the measured state and
/// its volume variance (zero when the state is measured exactly).
pub fn plan_chance_constrained(
    model: &NetworkModel,
    state: &SystemState,
    var_v0: &DVector<f64>,
    forecast: &Forecast,
    config: &ControllerConfig,
    prev_control: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<ControlPlan, Error> {
    let problem = assemble_ccmpc_qp(model, state, var_v0, forecast, config, prev_control)?;
    solve_plan(problem, DecisionLayout::new(model, config.horizon), settings)
}

/// First step of a plan, clipped to the deliverable actuator range so that
/// solver tolerance cannot push the plant request out of bounds.
pub fn extract_first_control(plan: &ControlPlan) -> DVector<f64> {
    DVector::from_fn(plan.layout.n_controls, |t, _| {
        plan.controls[(t, 0)].clamp(0.0, plan.u0_upper[t])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::astlingen;
    use crate::stochastics::{make_forecast, RainUncertainty};
    use nalgebra::DMatrix;

    fn moderate_state(model: &NetworkModel) -> SystemState {
        SystemState {
            volumes: DVector::from_fn(model.n_tanks(), |t, _| 0.4 * model.tank_params(t).0),
            registers: DVector::from_element(model.n_registers(), 5.0),
        }
    }

    #[test]
    fn idle_network_drains_toward_treatment() {
        let model = astlingen();
        let nc = model.n_catchments();
        let forecast =
            make_forecast(&model, &DMatrix::zeros(nc, 20), &RainUncertainty::default()).unwrap();
        let plan = plan_deterministic(
            &model,
            &moderate_state(&model),
            &forecast,
            &ControllerConfig::benchmark(),
            &DVector::zeros(6),
            &SolverSettings::default(),
        )
        .unwrap();
        assert_eq!(plan.solution.status, SolveStatus::Optimal);
        // No rain, no overflow; the treatment actuator runs.
        assert!(plan.tank_overflows.amax() < 1e-6);
        assert!(plan.pipe_overflows.amax() < 1e-6);
        let wwtp = model.wwtp_control();
        assert!(plan.controls[(wwtp, 0)] > 1.0);
        assert!(plan.objective < 0.0);
        let u0 = extract_first_control(&plan);
        for t in 0..6 {
            assert!(u0[t] >= 0.0 && u0[t] <= plan.u0_upper[t]);
        }
    }

    #[test]
    fn first_control_limited_by_stored_volume() {
        let model = astlingen();
        let nc = model.n_catchments();
        let forecast =
            make_forecast(&model, &DMatrix::zeros(nc, 20), &RainUncertainty::default()).unwrap();
        let mut state = SystemState::zeros(&model);
        state.volumes[0] = 10.0;
        let plan = plan_deterministic(
            &model,
            &state,
            &forecast,
            &ControllerConfig::benchmark(),
            &DVector::zeros(6),
            &SolverSettings::default(),
        )
        .unwrap();
        // T1 has beta 0.2, so only 2 m3/min can be delivered at step 0.
        assert!((plan.u0_upper[0] - 2.0).abs() < 1e-12);
        assert!(extract_first_control(&plan)[0] <= 2.0 + 1e-12);
    }

    #[test]
    fn chance_plan_costs_at_least_deterministic() {
        let model = astlingen();
        let nc = model.n_catchments();
        let forecast = make_forecast(
            &model,
            &DMatrix::from_element(nc, 20, 2.5),
            &RainUncertainty::default(),
        )
        .unwrap();
        let state = moderate_state(&model);
        let config = ControllerConfig::benchmark();
        let prev = DVector::from_element(6, 1.0);
        let settings = SolverSettings::default();

        let det =
            plan_deterministic(&model, &state, &forecast, &config, &prev, &settings).unwrap();
        let mut last = f64::NEG_INFINITY;
        for alpha in [0.7, 0.8, 0.9] {
            let mut c = config.clone();
            c.alpha = alpha;
            c.gamma = alpha;
            let cc = plan_chance_constrained(
                &model,
                &state,
                &DVector::zeros(6),
                &forecast,
                &c,
                &prev,
                &settings,
            )
            .unwrap();
            assert_eq!(cc.solution.status, SolveStatus::Optimal);
            let tol = 1e-8 * (1.0 + det.objective.abs());
            assert!(
                cc.objective >= det.objective - tol,
                "alpha {alpha}: {} vs det {}",
                cc.objective,
                det.objective
            );
            assert!(
                cc.objective >= last - tol,
                "alpha {alpha} not monotone: {} after {last}",
                cc.objective
            );
            last = cc.objective;
        }
    }
}
