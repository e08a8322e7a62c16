//! Expected-value prediction: the network response under the forecast mean
//! as an affine function of the stacked decision vector.
//!
//! The recursions mirror the plant with the weir nonlinearity replaced by
//! explicit overflow decisions. Tank volumes integrate inflow minus actuator
//! and weir flow, pipes forward their inflow minus the weir flow, delay
//! registers shift by one sample. Controls and weir flows carry no
//! uncertainty, so expectations distribute over every flow balance.

use nalgebra::{DMatrix, DVector};

use super::DecisionLayout;
use crate::error::Error;
use crate::network::{ElementKind, NetworkModel, SystemState};
use crate::stochastics::Forecast;

/// Affine map `y = C d + y0` from the decision vector `d` to expected tank
/// volumes and expected weir pipe inflows over the horizon. The volume at
/// step `k` accounts for weir relief up to step `k - 1`; the slot at `k`
/// itself is subtracted by the constraints that use it.
#[derive(Clone, Debug)]
pub struct PredictionOperator {
    layout: DecisionLayout,
    v_coef: DMatrix<f64>,
    v_off: DVector<f64>,
    pipe_in_coef: DMatrix<f64>,
    pipe_in_off: DVector<f64>,
}

impl PredictionOperator {
    pub fn layout(&self) -> &DecisionLayout {
        &self.layout
    }

    /// Row of the volume map for tank `tank` at step `k`, `k` in `0..=N`.
    pub fn volume_row(&self, tank: usize, k: usize) -> usize {
        tank * (self.layout.n_steps + 1) + k
    }

    /// Row of the pipe inflow map for pipe `pipe` at step `k`, `k` in `0..N`.
    pub fn pipe_row(&self, pipe: usize, k: usize) -> usize {
        pipe * self.layout.n_steps + k
    }

    /// Decision coefficients of the expected volumes, one row per
    /// `volume_row` index.
    pub fn volume_coef(&self) -> &DMatrix<f64> {
        &self.v_coef
    }

    pub fn volume_offset(&self) -> &DVector<f64> {
        &self.v_off
    }

    /// Decision coefficients of the expected pipe inflows, one row per
    /// `pipe_row` index.
    pub fn pipe_inflow_coef(&self) -> &DMatrix<f64> {
        &self.pipe_in_coef
    }

    pub fn pipe_inflow_offset(&self) -> &DVector<f64> {
        &self.pipe_in_off
    }

    /// Expected volumes for a concrete decision vector, tanks x (N + 1).
    pub fn expected_volumes(&self, d: &DVector<f64>) -> Result<DMatrix<f64>, Error> {
        self.check_decision(d)?;
        let y = &self.v_coef * d + &self.v_off;
        let n = self.layout.n_steps;
        Ok(DMatrix::from_fn(self.layout.n_controls, n + 1, |t, k| {
            y[t * (n + 1) + k]
        }))
    }

    /// Expected weir pipe inflows for a concrete decision vector, pipes x N.
    pub fn expected_pipe_inflows(&self, d: &DVector<f64>) -> Result<DMatrix<f64>, Error> {
        self.check_decision(d)?;
        let y = &self.pipe_in_coef * d + &self.pipe_in_off;
        let n = self.layout.n_steps;
        Ok(DMatrix::from_fn(self.layout.n_pipes, n, |p, k| {
            y[p * n + k]
        }))
    }

    fn check_decision(&self, d: &DVector<f64>) -> Result<(), Error> {
        if d.len() != self.layout.n_dec() {
            return Err(Error::Dimension(format!(
                "decision vector has {} entries, layout wants {}",
                d.len(),
                self.layout.n_dec()
            )));
        }
        Ok(())
    }
}

fn check_inputs(
    model: &NetworkModel,
    state: &SystemState,
    forecast: &Forecast,
    n_steps: usize,
) -> Result<(), Error> {
    if n_steps == 0 {
        return Err(Error::Domain("prediction horizon must be at least 1".into()));
    }
    if forecast.steps() != n_steps {
        return Err(Error::Dimension(format!(
            "forecast covers {} steps, horizon is {n_steps}",
            forecast.steps()
        )));
    }
    if forecast.catchments() != model.n_catchments() {
        return Err(Error::Dimension(format!(
            "forecast has {} catchment rows, model has {}",
            forecast.catchments(),
            model.n_catchments()
        )));
    }
    if state.volumes.len() != model.n_tanks() || state.registers.len() != model.n_registers() {
        return Err(Error::Dimension(format!(
            "state has {} volumes and {} registers, model wants {} and {}",
            state.volumes.len(),
            state.registers.len(),
            model.n_tanks(),
            model.n_registers()
        )));
    }
    for v in state
        .volumes
        .iter()
        .chain(state.registers.iter())
        .chain(forecast.mean.iter())
    {
        if !v.is_finite() {
            return Err(Error::Domain(
                "prediction inputs contain a non-finite value".into(),
            ));
        }
    }
    Ok(())
}

/// Builds the affine prediction operator by simulating the expectation model
/// symbolically from the measured state. The forecast must cover exactly the
/// horizon.
pub fn build_prediction(
    model: &NetworkModel,
    state: &SystemState,
    forecast: &Forecast,
    n_steps: usize,
) -> Result<PredictionOperator, Error> {
    check_inputs(model, state, forecast, n_steps)?;
    let layout = DecisionLayout::new(model, n_steps);
    let nd = layout.n_dec();
    let nt = model.n_tanks();
    let np = model.n_pipes();
    let ne = model.n_elements();
    let dt = model.dt();

    let mut vol: Vec<DVector<f64>> = (0..nt).map(|_| DVector::zeros(nd)).collect();
    let mut vol_off: Vec<f64> = state.volumes.iter().copied().collect();
    let mut regs: Vec<DVector<f64>> = (0..model.n_registers())
        .map(|_| DVector::zeros(nd))
        .collect();
    let mut regs_off: Vec<f64> = state.registers.iter().copied().collect();

    let mut v_coef = DMatrix::zeros(nt * (n_steps + 1), nd);
    let mut v_off = DVector::zeros(nt * (n_steps + 1));
    let mut pipe_in_coef = DMatrix::zeros(np * n_steps, nd);
    let mut pipe_in_off = DVector::zeros(np * n_steps);

    for t in 0..nt {
        v_off[t * (n_steps + 1)] = vol_off[t];
    }

    let mut qin: Vec<DVector<f64>> = (0..ne).map(|_| DVector::zeros(nd)).collect();
    let mut qin_off = vec![0.0f64; ne];

    for k in 0..n_steps {
        for &e in model.topo_order() {
            let r = model.routing(e);
            let mut coef = DVector::zeros(nd);
            let mut off = 0.0;
            for &j in &r.controls {
                coef[layout.u_col(k, model.kind_position(j))] += 1.0;
            }
            for &j in &r.spills {
                coef[layout.qw_tank_col(model.kind_position(j), k)] += 1.0;
            }
            for &j in &r.pipes {
                coef += &qin[j];
                off += qin_off[j];
                coef[layout.qw_pipe_col(model.kind_position(j), k)] -= 1.0;
            }
            for &j in &r.delays {
                let d = model.kind_position(j);
                let last = model.register_offset(d) + model.chain_length(d) - 1;
                coef += &regs[last];
                off += regs_off[last];
            }
            for &c in &r.rains {
                off += forecast.mean[(c, k)];
            }
            match model.elements()[e].kind {
                ElementKind::Tank { .. } => {
                    let t = model.kind_position(e);
                    vol[t].axpy(dt, &coef, 1.0);
                    vol[t][layout.u_col(k, t)] -= dt;
                    vol[t][layout.qw_tank_col(t, k)] -= dt;
                    vol_off[t] += dt * off;
                }
                ElementKind::WeirPipe { .. } => {
                    let row = model.kind_position(e) * n_steps + k;
                    pipe_in_coef.row_mut(row).tr_copy_from(&coef);
                    pipe_in_off[row] = off;
                }
                ElementKind::DelayChain { .. } => {}
            }
            qin[e] = coef;
            qin_off[e] = off;
        }
        for (d, &e) in model.delays().iter().enumerate() {
            let off0 = model.register_offset(d);
            let len = model.chain_length(d);
            for j in (1..len).rev() {
                regs[off0 + j] = regs[off0 + j - 1].clone();
                regs_off[off0 + j] = regs_off[off0 + j - 1];
            }
            regs[off0] = qin[e].clone();
            regs_off[off0] = qin_off[e];
        }
        for t in 0..nt {
            let row = t * (n_steps + 1) + k + 1;
            v_coef.row_mut(row).tr_copy_from(&vol[t]);
            v_off[row] = vol_off[t];
        }
    }

    Ok(PredictionOperator {
        layout,
        v_coef,
        v_off,
        pipe_in_coef,
        pipe_in_off,
    })
}

/// Evaluates the expectation model recursively for a concrete decision
/// vector, without building coefficient matrices. Returns expected volumes
/// (tanks x (N + 1)) and expected pipe inflows (pipes x N). Serves as an
/// independent check of the operator path.
pub fn simulate_expectation(
    model: &NetworkModel,
    state: &SystemState,
    forecast: &Forecast,
    d: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), Error> {
    let n_steps = forecast.steps();
    check_inputs(model, state, forecast, n_steps)?;
    let layout = DecisionLayout::new(model, n_steps);
    if d.len() != layout.n_dec() {
        return Err(Error::Dimension(format!(
            "decision vector has {} entries, layout wants {}",
            d.len(),
            layout.n_dec()
        )));
    }
    let nt = model.n_tanks();
    let np = model.n_pipes();
    let dt = model.dt();

    let mut volumes = state.volumes.clone();
    let mut regs = state.registers.clone();
    let mut v_out = DMatrix::zeros(nt, n_steps + 1);
    let mut pipe_in = DMatrix::zeros(np, n_steps);
    v_out.set_column(0, &volumes);

    let mut qin = vec![0.0f64; model.n_elements()];
    for k in 0..n_steps {
        for &e in model.topo_order() {
            let r = model.routing(e);
            let mut q = 0.0;
            for &j in &r.controls {
                q += d[layout.u_col(k, model.kind_position(j))];
            }
            for &j in &r.spills {
                q += d[layout.qw_tank_col(model.kind_position(j), k)];
            }
            for &j in &r.pipes {
                q += qin[j] - d[layout.qw_pipe_col(model.kind_position(j), k)];
            }
            for &j in &r.delays {
                let dl = model.kind_position(j);
                let last = model.register_offset(dl) + model.chain_length(dl) - 1;
                q += regs[last];
            }
            for &c in &r.rains {
                q += forecast.mean[(c, k)];
            }
            qin[e] = q;
            match model.elements()[e].kind {
                ElementKind::Tank { .. } => {
                    let t = model.kind_position(e);
                    volumes[t] += dt
                        * (q - d[layout.u_col(k, t)] - d[layout.qw_tank_col(t, k)]);
                }
                ElementKind::WeirPipe { .. } => {
                    pipe_in[(model.kind_position(e), k)] = q;
                }
                ElementKind::DelayChain { .. } => {}
            }
        }
        for (dl, &e) in model.delays().iter().enumerate() {
            let off = model.register_offset(dl);
            let len = model.chain_length(dl);
            for j in (1..len).rev() {
                regs[off + j] = regs[off + j - 1];
            }
            regs[off] = qin[e];
        }
        v_out.set_column(k + 1, &volumes);
    }
    Ok((v_out, pipe_in))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{astlingen, load_network};
    use crate::stochastics::{make_forecast, RainUncertainty};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_tank() -> NetworkModel {
        let text = "dt = 5\nwwtp = uT\n\n[catchment w]\narea = 1000000\n\n\
                    [tank T]\ncapacity = 4000\nbeta = 0.1\ncontrol = uT\n\
                    control_cap = 50\ninflows = w\n";
        load_network(text).unwrap()
    }

    #[test]
    fn constant_inflow_fills_linearly() {
        // 1 um/s on 1 km2 is 60 m3/min, so with idle decisions the expected
        // volume grows by dt * 60 = 300 m3 per step.
        let model = single_tank();
        let forecast =
            make_forecast(&model, &DMatrix::from_element(1, 4, 1.0), &RainUncertainty::default())
                .unwrap();
        let state = SystemState {
            volumes: DVector::from_element(1, 100.0),
            registers: DVector::zeros(0),
        };
        let op = build_prediction(&model, &state, &forecast, 4).unwrap();
        let v = op.expected_volumes(&DVector::zeros(op.layout().n_dec())).unwrap();
        for k in 0..=4usize {
            assert!((v[(0, k)] - (100.0 + 300.0 * k as f64)).abs() < 1e-10, "k={k}");
        }
        // One unit of control or weir flow at step 0 removes dt m3 from
        // every later volume sample.
        let layout = *op.layout();
        for k in 1..=4usize {
            let row = op.volume_row(0, k);
            assert_eq!(op.volume_coef()[(row, layout.u_col(0, 0))], -5.0);
            assert_eq!(op.volume_coef()[(row, layout.qw_tank_col(0, 0))], -5.0);
        }
        let row = op.volume_row(0, 0);
        assert_eq!(op.volume_coef().row(row).amax(), 0.0);
    }

    #[test]
    fn control_reaches_downstream_tank_after_delay() {
        // uA feeds a two-register chain, so flow applied at step 0 arrives at
        // tank B during step 2 and shows up in its volume at step 3.
        let text = "dt = 5\nwwtp = uB\n\n[catchment w]\narea = 100000\n\n\
                    [tank A]\ncapacity = 500\nbeta = 0.2\ncontrol = uA\n\
                    control_cap = 20\ninflows = w\n\n\
                    [delay d1]\nlength = 2\ninflows = uA\n\n\
                    [tank B]\ncapacity = 500\nbeta = 0.2\ncontrol = uB\n\
                    control_cap = 20\ninflows = d1\n";
        let model = load_network(text).unwrap();
        let forecast =
            make_forecast(&model, &DMatrix::zeros(1, 5), &RainUncertainty::default()).unwrap();
        let state = SystemState::zeros(&model);
        let op = build_prediction(&model, &state, &forecast, 5).unwrap();
        let layout = *op.layout();
        let b = model.kind_position(model.element_index("B").unwrap());
        let a = model.kind_position(model.element_index("A").unwrap());
        let u0 = layout.u_col(0, a);
        for k in 0..=2usize {
            assert_eq!(op.volume_coef()[(op.volume_row(b, k), u0)], 0.0, "k={k}");
        }
        for k in 3..=5usize {
            assert_eq!(op.volume_coef()[(op.volume_row(b, k), u0)], 5.0, "k={k}");
        }
        assert_eq!(op.volume_coef()[(op.volume_row(a, 1), u0)], -5.0);
    }

    #[test]
    fn operator_matches_recursive_simulation() {
        let model = astlingen();
        let nc = model.n_catchments();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..4 {
            let intensities = DMatrix::from_fn(nc, 12, |_, _| rng.random::<f64>() * 4.0);
            let forecast =
                make_forecast(&model, &intensities, &RainUncertainty::default()).unwrap();
            let state = SystemState {
                volumes: DVector::from_fn(model.n_tanks(), |_, _| rng.random::<f64>() * 800.0),
                registers: DVector::from_fn(model.n_registers(), |_, _| {
                    rng.random::<f64>() * 40.0
                }),
            };
            let op = build_prediction(&model, &state, &forecast, 12).unwrap();
            let d = DVector::from_fn(op.layout().n_dec(), |_, _| rng.random::<f64>() * 10.0);
            let v_op = op.expected_volumes(&d).unwrap();
            let p_op = op.expected_pipe_inflows(&d).unwrap();
            let (v_sim, p_sim) = simulate_expectation(&model, &state, &forecast, &d).unwrap();
            let scale = v_sim.amax().max(1.0);
            assert!((&v_op - &v_sim).amax() / scale < 1e-10);
            assert!((&p_op - &p_sim).amax() / p_sim.amax().max(1.0) < 1e-10);
        }
    }

    #[test]
    fn mismatched_forecast_is_rejected() {
        let model = single_tank();
        let forecast =
            make_forecast(&model, &DMatrix::zeros(1, 3), &RainUncertainty::default()).unwrap();
        let state = SystemState::zeros(&model);
        assert!(build_prediction(&model, &state, &forecast, 4).is_err());
        let d = DVector::zeros(2);
        assert!(simulate_expectation(&model, &state, &forecast, &d).is_err());
    }
}
