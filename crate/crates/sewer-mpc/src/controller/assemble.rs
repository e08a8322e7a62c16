//! Builds the controller QPs over the stacked decision vector.
//!
//! Both controllers share the cost and the nominal constraint rows. The
//! deterministic variant takes the forecast mean at face value. The chance
//! constrained variant shifts each uncertain row by its standard deviation
//! times the normal quantile of the requested confidence level: floor rows
//! gain a slack `s` capped at the shift so they can fall back to the nominal
//! row at a price, weir activation rows gain an unbounded relaxation `c`
//! that prices predicted overflow states.

use nalgebra::{DMatrix, DVector};

use super::ControllerConfig;
use crate::controller::prediction::build_prediction;
use crate::error::Error;
use crate::network::{NetworkModel, SystemState};
use crate::qp::{QpProblem, VarBlocks};
use crate::stochastics::{normal_quantile, propagate_variances, Forecast, VarianceTrajectories};

/// Uniform factor applied to every cost term. Per-volume overflow weights
/// reach 1.5e6 once accumulated over the horizon; scaling the objective
/// keeps the multipliers near unity for the interior-point solver without
/// changing the minimizer. Reported objectives divide the factor out again.
pub(crate) const OBJECTIVE_SCALE: f64 = 1e-3;

struct CcData {
    var: VarianceTrajectories,
    q_alpha: f64,
    q_gamma: f64,
}

/// Assembles the deterministic controller QP from the measured state and the
/// forecast mean. The previous applied control anchors the first move cost.
pub fn assemble_deterministic_qp(
    model: &NetworkModel,
    state: &SystemState,
    forecast: &Forecast,
    config: &ControllerConfig,
    prev_control: &DVector<f64>,
) -> Result<QpProblem, Error> {
    build(model, state, forecast, config, prev_control, None)
}

/// Assembles the chance-constrained controller QP. Forecast variances are
/// propagated from `var_v0` through the network to size the constraint
/// shifts and slack caps.
pub fn assemble_ccmpc_qp(
    model: &NetworkModel,
    state: &SystemState,
    var_v0: &DVector<f64>,
    forecast: &Forecast,
    config: &ControllerConfig,
    prev_control: &DVector<f64>,
) -> Result<QpProblem, Error> {
    config.check_levels()?;
    let var = propagate_variances(model, var_v0, forecast)?;
    let cc = CcData {
        var,
        q_alpha: normal_quantile(config.alpha)?,
        q_gamma: normal_quantile(config.gamma)?,
    };
    build(model, state, forecast, config, prev_control, Some(cc))
}

fn build(
    model: &NetworkModel,
    state: &SystemState,
    forecast: &Forecast,
    config: &ControllerConfig,
    prev_control: &DVector<f64>,
    cc: Option<CcData>,
) -> Result<QpProblem, Error> {
    config.check(model)?;
    let nt = model.n_tanks();
    if prev_control.len() != nt {
        return Err(Error::Dimension(format!(
            "{} previous controls for {} tanks",
            prev_control.len(),
            nt
        )));
    }
    if prev_control.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("previous control is not finite".into()));
    }

    let n_steps = config.horizon;
    let op = build_prediction(model, state, forecast, n_steps)?;
    let layout = *op.layout();
    let np = model.n_pipes();
    let dt = model.dt();
    let cc = cc.as_ref();

    let n_u = layout.n_u();
    let n_qw = layout.n_qw();
    let nd = layout.n_dec();
    let cuo_rows = nt * (n_steps - 1);
    let (n_s, n_c) = match cc {
        Some(_) => (
            nt * (n_steps + 1) + cuo_rows + np * n_steps,
            nt * n_steps + np * n_steps,
        ),
        None => (0, 0),
    };
    let n = nd + n_s + n_c;
    let m = 2 * nt * (n_steps + 1)
        + cuo_rows
        + 2 * np * n_steps
        + if cc.is_some() { nt * n_steps + np * n_steps } else { 0 };

    let weirs = model.weir_elements();
    let mut weight_of = vec![0.0f64; model.n_elements()];
    for (i, &e) in weirs.iter().enumerate() {
        weight_of[e] = config.overflow_weights[i];
    }

    let sc = OBJECTIVE_SCALE;
    let mut hessian = DMatrix::zeros(n, n);
    let mut linear = DVector::zeros(n);
    let mut constant = 0.0;

    // Move cost sum_k R |u_k - u_{k-1}|^2 with u_{-1} the applied control.
    let r2 = 2.0 * config.move_weight * sc;
    for t in 0..nt {
        for k in 0..n_steps {
            let col = layout.u_col(k, t);
            hessian[(col, col)] += r2 * if k + 1 < n_steps { 2.0 } else { 1.0 };
            if k + 1 < n_steps {
                let next = layout.u_col(k + 1, t);
                hessian[(col, next)] -= r2;
                hessian[(next, col)] -= r2;
            }
        }
        linear[layout.u_col(0, t)] -= r2 * prev_control[t];
        constant += config.move_weight * sc * prev_control[t] * prev_control[t];
    }

    // Treatment reward on the plant-bound actuator.
    let wwtp = model.wwtp_control();
    for k in 0..n_steps {
        linear[layout.u_col(k, wwtp)] += config.wwtp_weight * sc;
    }

    // Overflow cost: the weir flow at step k contributes its volume to every
    // later accumulation sample, so its weight is (N - k + 1) dt W, plus the
    // flat environment flow penalty.
    for t in 0..nt {
        let w = weight_of[model.tanks()[t]];
        for k in 0..=n_steps {
            linear[layout.qw_tank_col(t, k)] +=
                sc * ((n_steps - k + 1) as f64 * dt * w + config.env_weight);
        }
    }
    for p in 0..np {
        let w = weight_of[model.pipes()[p]];
        for k in 0..n_steps {
            linear[layout.qw_pipe_col(p, k)] +=
                sc * ((n_steps - k + 1) as f64 * dt * w + config.env_weight);
        }
    }

    // Slack usage cost, and a ridge keeping the Hessian positive definite on
    // the blocks without quadratic cost.
    for col in nd..n {
        linear[col] += config.slack_weight * sc;
    }
    let ridge = 1e-8 * sc;
    for col in n_u..n {
        hessian[(col, col)] += ridge;
    }

    let lower = DVector::zeros(n);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for t in 0..nt {
        let (_, beta, cap) = model.tank_params(t);
        for k in 0..n_steps {
            upper[layout.u_col(k, t)] = cap;
        }
        // The step 0 coupling u_0 <= beta V_0 has a known right side and
        // folds into the bound; any tightening from initial volume
        // uncertainty is applied without a slack escape.
        let mut avail = beta * state.volumes[t];
        if let Some(cc) = cc {
            avail -= beta * cc.var.var_v[(t, 0)].sqrt() * cc.q_alpha;
        }
        upper[layout.u_col(0, t)] = cap.min(avail.max(0.0));
    }

    let mut a = DMatrix::zeros(m, n);
    let mut b = DVector::zeros(m);
    let vc = op.volume_coef();
    let vo = op.volume_offset();
    let pc = op.pipe_inflow_coef();
    let po = op.pipe_inflow_offset();
    let mut row = 0usize;
    let mut s_col = nd;
    let mut c_col = nd + n_s;

    // Volume floor: the post-weir volume V_k - dt q^w_k stays nonnegative.
    for t in 0..nt {
        for k in 0..=n_steps {
            let src = op.volume_row(t, k);
            for j in 0..nd {
                a[(row, j)] = -vc[(src, j)];
            }
            a[(row, layout.qw_tank_col(t, k))] += dt;
            let mut rhs = vo[src];
            if let Some(cc) = cc {
                let tight = cc.var.var_v[(t, k)].sqrt() * cc.q_alpha;
                rhs -= tight;
                a[(row, s_col)] = -1.0;
                upper[s_col] = tight;
                s_col += 1;
            }
            b[row] = rhs;
            row += 1;
        }
    }

    // Volume cap with weir relief: V_k - dt q^w_k within capacity.
    for t in 0..nt {
        let (capacity, _, _) = model.tank_params(t);
        for k in 0..=n_steps {
            let src = op.volume_row(t, k);
            for j in 0..nd {
                a[(row, j)] = vc[(src, j)];
            }
            a[(row, layout.qw_tank_col(t, k))] -= dt;
            b[row] = capacity - vo[src];
            row += 1;
        }
    }

    // Weir activation: states whose expected volume crosses the shifted
    // capacity are priced through c rather than forbidden.
    if let Some(cc) = cc {
        for t in 0..nt {
            let (capacity, _, _) = model.tank_params(t);
            for k in 1..=n_steps {
                let src = op.volume_row(t, k);
                for j in 0..nd {
                    a[(row, j)] = vc[(src, j)];
                }
                a[(row, c_col)] = -1.0;
                c_col += 1;
                b[row] = capacity - cc.var.var_v[(t, k)].sqrt() * cc.q_gamma - vo[src];
                row += 1;
            }
        }
    }

    // Actuator coupling u_k <= beta V_k for the steps with unknown volume.
    for t in 0..nt {
        let (_, beta, _) = model.tank_params(t);
        for k in 1..n_steps {
            let src = op.volume_row(t, k);
            for j in 0..nd {
                a[(row, j)] = -beta * vc[(src, j)];
            }
            a[(row, layout.u_col(k, t))] += 1.0;
            let mut rhs = beta * vo[src];
            if let Some(cc) = cc {
                let tight = beta * cc.var.var_v[(t, k)].sqrt() * cc.q_alpha;
                rhs -= tight;
                a[(row, s_col)] = -1.0;
                upper[s_col] = tight;
                s_col += 1;
            }
            b[row] = rhs;
            row += 1;
        }
    }

    // Pipe floor: the forwarded flow q_in - q^w stays nonnegative.
    for p in 0..np {
        for k in 0..n_steps {
            let src = op.pipe_row(p, k);
            for j in 0..nd {
                a[(row, j)] = -pc[(src, j)];
            }
            a[(row, layout.qw_pipe_col(p, k))] += 1.0;
            let mut rhs = po[src];
            if let Some(cc) = cc {
                let tight = cc.var.var_pipe_out[(p, k)].sqrt() * cc.q_alpha;
                rhs -= tight;
                a[(row, s_col)] = -1.0;
                upper[s_col] = tight;
                s_col += 1;
            }
            b[row] = rhs;
            row += 1;
        }
    }

    // Pipe cap with weir relief: the forwarded flow stays within capacity.
    for p in 0..np {
        let qbar = model.pipe_capacity(p);
        for k in 0..n_steps {
            let src = op.pipe_row(p, k);
            for j in 0..nd {
                a[(row, j)] = pc[(src, j)];
            }
            a[(row, layout.qw_pipe_col(p, k))] -= 1.0;
            b[row] = qbar - po[src];
            row += 1;
        }
    }

    // Weir activation for pipes, analogous to the tank rows.
    if let Some(cc) = cc {
        for p in 0..np {
            let qbar = model.pipe_capacity(p);
            for k in 0..n_steps {
                let src = op.pipe_row(p, k);
                for j in 0..nd {
                    a[(row, j)] = pc[(src, j)];
                }
                a[(row, c_col)] = -1.0;
                c_col += 1;
                b[row] = qbar - cc.var.var_pipe_out[(p, k)].sqrt() * cc.q_gamma - po[src];
                row += 1;
            }
        }
    }

    debug_assert_eq!(row, m);
    debug_assert_eq!(s_col, nd + n_s);
    debug_assert_eq!(c_col, n);

    let problem = QpProblem {
        hessian,
        linear,
        a,
        b,
        lower,
        upper,
        constant,
        blocks: VarBlocks {
            u: (0, n_u),
            qw: (n_u, n_qw),
            s: (nd, n_s),
            c: (nd + n_s, n_c),
        },
    };
    problem.validate()?;
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{astlingen, load_network};
    use crate::qp::{solve, SolveStatus, SolverSettings};
    use crate::stochastics::{make_deterministic_forecast, make_forecast, RainUncertainty};
    use nalgebra::{DMatrix, DVector};

    fn single_tank() -> NetworkModel {
        let text = "dt = 5\nwwtp = uT\n\n[catchment w]\narea = 100000\n\n\
                    [tank T]\ncapacity = 100\nbeta = 0.2\ncontrol = uT\n\
                    control_cap = 30\ninflows = w\n";
        load_network(text).unwrap()
    }

    fn tank_config(horizon: usize) -> ControllerConfig {
        ControllerConfig {
            horizon,
            move_weight: 0.01,
            wwtp_weight: -1.0,
            env_weight: 2.0,
            overflow_weights: vec![1000.0],
            slack_weight: 100.0,
            alpha: 0.9,
            gamma: 0.9,
        }
    }

    #[test]
    fn deterministic_rows_match_hand_expansion() {
        // Single tank, two steps, rain flow 3 m3/min, V0 = 50: with
        // V1 = 65 - 5 u0 - 5 qw0 and V2 = 80 - 5 u0 - 5 u1 - 5 qw0 - 5 qw1
        // every row and cost entry follows by substitution.
        let model = single_tank();
        let forecast =
            make_deterministic_forecast(&model, &DMatrix::from_element(1, 2, 0.5)).unwrap();
        let state = SystemState {
            volumes: DVector::from_element(1, 50.0),
            registers: DVector::zeros(0),
        };
        let prev = DVector::from_element(1, 3.0);
        let problem =
            assemble_deterministic_qp(&model, &state, &forecast, &tank_config(2), &prev).unwrap();

        assert_eq!(problem.n(), 5);
        assert_eq!(problem.m(), 7);
        let rows: [(&[f64; 5], f64); 7] = [
            (&[0.0, 0.0, 5.0, 0.0, 0.0], 50.0),
            (&[5.0, 0.0, 5.0, 5.0, 0.0], 65.0),
            (&[5.0, 5.0, 5.0, 5.0, 5.0], 80.0),
            (&[0.0, 0.0, -5.0, 0.0, 0.0], 50.0),
            (&[-5.0, 0.0, -5.0, -5.0, 0.0], 35.0),
            (&[-5.0, -5.0, -5.0, -5.0, -5.0], 20.0),
            (&[1.0, 1.0, 1.0, 0.0, 0.0], 13.0),
        ];
        for (r, (coef, rhs)) in rows.iter().enumerate() {
            for j in 0..5 {
                assert!(
                    (problem.a[(r, j)] - coef[j]).abs() < 1e-12,
                    "row {r} col {j}: {} vs {}",
                    problem.a[(r, j)],
                    coef[j]
                );
            }
            assert!((problem.b[r] - rhs).abs() < 1e-12, "row {r} rhs");
        }

        assert_eq!(problem.upper[0], 10.0);
        assert_eq!(problem.upper[1], 30.0);
        assert_eq!(problem.lower.amax(), 0.0);
        assert_eq!(problem.upper[2], f64::INFINITY);

        let sc = OBJECTIVE_SCALE;
        assert!((problem.linear[0] - sc * (-1.0 - 2.0 * 0.01 * 3.0)).abs() < 1e-15);
        assert!((problem.linear[1] - sc * -1.0).abs() < 1e-15);
        assert!((problem.linear[2] - sc * 15002.0).abs() < 1e-12);
        assert!((problem.linear[3] - sc * 10002.0).abs() < 1e-12);
        assert!((problem.linear[4] - sc * 5002.0).abs() < 1e-12);
        assert!((problem.hessian[(0, 0)] - sc * 0.04).abs() < 1e-15);
        assert!((problem.hessian[(1, 1)] - sc * 0.02).abs() < 1e-15);
        assert!((problem.hessian[(0, 1)] + sc * 0.02).abs() < 1e-15);
        assert!((problem.hessian[(2, 2)] - sc * 1e-8).abs() < 1e-20);
        assert!((problem.constant - sc * 0.09).abs() < 1e-15);
    }

    #[test]
    fn benchmark_dimensions() {
        let model = astlingen();
        let nc = model.n_catchments();
        let forecast = make_forecast(
            &model,
            &DMatrix::from_element(nc, 20, 2.0),
            &RainUncertainty::default(),
        )
        .unwrap();
        let state = SystemState::zeros(&model);
        let config = ControllerConfig::benchmark();
        let prev = DVector::zeros(6);

        let det = assemble_deterministic_qp(&model, &state, &forecast, &config, &prev).unwrap();
        assert_eq!(det.n(), 326);
        assert_eq!(det.m(), 526);
        assert_eq!(det.blocks.u, (0, 120));
        assert_eq!(det.blocks.qw, (120, 206));
        assert_eq!(det.blocks.s, (326, 0));

        let cc =
            assemble_ccmpc_qp(&model, &state, &DVector::zeros(6), &forecast, &config, &prev)
                .unwrap();
        assert_eq!(cc.n(), 846);
        assert_eq!(cc.m(), 726);
        assert_eq!(cc.blocks.s, (326, 320));
        assert_eq!(cc.blocks.c, (646, 200));
    }

    #[test]
    fn slack_columns_touch_exactly_one_row() {
        let model = astlingen();
        let nc = model.n_catchments();
        let forecast = make_forecast(
            &model,
            &DMatrix::from_element(nc, 20, 2.0),
            &RainUncertainty::default(),
        )
        .unwrap();
        let state = SystemState {
            volumes: DVector::from_element(6, 200.0),
            registers: DVector::zeros(model.n_registers()),
        };
        let config = ControllerConfig::benchmark();
        let cc = assemble_ccmpc_qp(
            &model,
            &state,
            &DVector::zeros(6),
            &forecast,
            &config,
            &DVector::zeros(6),
        )
        .unwrap();
        let (s0, _) = cc.blocks.s;
        for col in s0..cc.n() {
            let mut hits = 0;
            for r in 0..cc.m() {
                if cc.a[(r, col)] != 0.0 {
                    assert_eq!(cc.a[(r, col)], -1.0);
                    hits += 1;
                }
            }
            assert_eq!(hits, 1, "column {col}");
        }
        // Slack caps grow with the confidence level, right sides shrink.
        let mut low = config.clone();
        low.alpha = 0.7;
        low.gamma = 0.7;
        let cc_low = assemble_ccmpc_qp(
            &model,
            &state,
            &DVector::zeros(6),
            &forecast,
            &low,
            &DVector::zeros(6),
        )
        .unwrap();
        let (_, s_len) = cc.blocks.s;
        let mut widened = 0;
        for j in 0..s_len {
            assert!(cc.upper[s0 + j] >= cc_low.upper[s0 + j] - 1e-12);
            if cc.upper[s0 + j] > cc_low.upper[s0 + j] + 1e-9 {
                widened += 1;
            }
        }
        assert!(widened > 100, "only {widened} caps widened");
        for r in 0..cc.m() {
            assert!(cc.b[r] <= cc_low.b[r] + 1e-12);
        }
    }

    #[test]
    fn zero_variance_chance_plan_matches_deterministic() {
        // With no forecast spread every tightening is zero, the slacks pin
        // to zero and both problems share their minimizer over (u, qw).
        let model = astlingen();
        let nc = model.n_catchments();
        let forecast =
            make_deterministic_forecast(&model, &DMatrix::from_element(nc, 20, 0.3)).unwrap();
        let state = SystemState {
            volumes: DVector::from_fn(6, |t, _| 0.3 * model.tank_params(t).0),
            registers: DVector::zeros(model.n_registers()),
        };
        let config = ControllerConfig::benchmark();
        let prev = DVector::zeros(6);
        let settings = SolverSettings::default();

        let det = assemble_deterministic_qp(&model, &state, &forecast, &config, &prev).unwrap();
        let det_sol = solve(&det, &settings).unwrap();
        assert_eq!(det_sol.status, SolveStatus::Optimal);

        let cc =
            assemble_ccmpc_qp(&model, &state, &DVector::zeros(6), &forecast, &config, &prev)
                .unwrap();
        let cc_sol = solve(&cc, &settings).unwrap();
        assert_eq!(cc_sol.status, SolveStatus::Optimal);

        for j in 0..det.blocks.u.1 {
            assert!(
                (det_sol.primal[j] - cc_sol.primal[j]).abs() < 1e-7,
                "control column {j}: {} vs {}",
                det_sol.primal[j],
                cc_sol.primal[j]
            );
        }
        assert!((det_sol.objective - cc_sol.objective).abs() < 1e-9 * (1.0 + det_sol.objective.abs()));
    }

    #[test]
    fn confidence_levels_outside_range_are_rejected() {
        let model = single_tank();
        let forecast =
            make_deterministic_forecast(&model, &DMatrix::from_element(1, 2, 0.5)).unwrap();
        let state = SystemState::zeros(&model);
        let mut config = tank_config(2);
        config.alpha = 0.3;
        let err = assemble_ccmpc_qp(
            &model,
            &state,
            &DVector::zeros(1),
            &forecast,
            &config,
            &DVector::zeros(1),
        )
        .unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");

        let mut wrong = tank_config(2);
        wrong.overflow_weights = vec![1.0, 2.0];
        assert!(
            assemble_deterministic_qp(&model, &state, &forecast, &wrong, &DVector::zeros(1))
                .is_err()
        );
    }
}
