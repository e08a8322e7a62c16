//! Network topology, element parameters and the piecewise-linear plant step.
//!
//! A network is a directed acyclic graph of three element kinds. Tanks store
//! volume, drain through a controlled actuator and spill over a weir once
//! full. Weir pipes forward flow up to a capacity and spill the rest. Delay
//! chains are shift registers that move flow downstream by one sample per
//! register. Rain enters through catchments attached to arbitrary elements.
//!
//! Units throughout: volumes in m3, flows in m3/min, areas in m2, rain
//! intensities in um/s, time in minutes.

mod config;

pub use config::{astlingen, check_astlingen, load_network, load_network_file, to_config_string, ASTLINGEN_CONFIG};

use nalgebra::DVector;

use crate::error::Error;

/// Converts a rain intensity in um/s falling on `area_m2` into a flow in
/// m3/min: 1 um/s over 1 m2 is 1e-6 m3/s, and there are 60 s in a minute.
pub fn rain_to_flow(intensity_um_s: f64, area_m2: f64) -> Result<f64, Error> {
    if !intensity_um_s.is_finite() || intensity_um_s < 0.0 {
        return Err(Error::Domain(format!(
            "rain intensity must be finite and nonnegative, got {intensity_um_s}"
        )));
    }
    if !area_m2.is_finite() || area_m2 < 0.0 {
        return Err(Error::Domain(format!(
            "catchment area must be finite and nonnegative, got {area_m2}"
        )));
    }
    Ok(intensity_um_s * 1e-6 * 60.0 * area_m2)
}

/// Element kind together with its physical parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ElementKind {
    /// Storage tank with weir overflow. `beta` is the volume-to-outflow gain
    /// of the actuator (the control is limited to `beta * V`), `control_cap`
    /// its hard upper bound in m3/min.
    Tank {
        capacity_m3: f64,
        beta: f64,
        control_cap: f64,
    },
    /// Sewer pipe with an interceptor weir: forwards at most `capacity`
    /// m3/min, the excess spills.
    WeirPipe { capacity: f64 },
    /// Chain of `length` one-sample delay registers.
    DelayChain { length: usize },
}

/// A named network element.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementSpec {
    pub id: String,
    pub kind: ElementKind,
}

/// A rain catchment: runoff from `area_m2` enters the network at the
/// elements that list this catchment as a source.
#[derive(Clone, Debug, PartialEq)]
pub struct Catchment {
    pub id: String,
    pub area_m2: f64,
}

/// Inflow sources of one element, all given as indices. Controls and spills
/// refer to tank elements, `pipes` and `delays` to elements of the matching
/// kind, `rains` to catchments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Routing {
    /// Tank elements whose actuator outflow feeds this element.
    pub controls: Vec<usize>,
    /// Tank elements whose weir overflow is routed here instead of leaving
    /// the network.
    pub spills: Vec<usize>,
    /// Weir pipes whose forwarded flow feeds this element.
    pub pipes: Vec<usize>,
    /// Delay chains whose output register feeds this element.
    pub delays: Vec<usize>,
    /// Catchments raining into this element.
    pub rains: Vec<usize>,
}

/// Validated network model. Construction checks parameter ranges, routing
/// kinds and acyclicity, and precomputes index maps plus an evaluation order
/// for flows that propagate within a single sample.
#[derive(Clone, Debug)]
pub struct NetworkModel {
    elements: Vec<ElementSpec>,
    routing: Vec<Routing>,
    catchments: Vec<Catchment>,
    control_ids: Vec<String>,
    dt: f64,
    wwtp: usize,
    tanks: Vec<usize>,
    pipes: Vec<usize>,
    delays: Vec<usize>,
    kind_pos: Vec<usize>,
    register_offset: Vec<usize>,
    n_registers: usize,
    topo: Vec<usize>,
    spill_is_routed: Vec<bool>,
}

/// Measured state of the plant: tank volumes plus the contents of every
/// delay register, flattened chain by chain.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState {
    pub volumes: DVector<f64>,
    pub registers: DVector<f64>,
}

impl SystemState {
    pub fn zeros(model: &NetworkModel) -> Self {
        SystemState {
            volumes: DVector::zeros(model.n_tanks()),
            registers: DVector::zeros(model.n_registers()),
        }
    }
}

/// Flows realized during one plant step.
#[derive(Clone, Debug)]
pub struct FlowRecord {
    /// Total inflow per element.
    pub inflow: DVector<f64>,
    /// Applied actuator outflow per tank, after clipping to `[0, min(cap, beta V)]`.
    pub control: DVector<f64>,
    /// Forwarded flow per weir pipe.
    pub pipe_outflow: DVector<f64>,
    /// Output register per delay chain, as seen downstream this step.
    pub delay_outflow: DVector<f64>,
    /// Weir overflow per element (zero for delay chains).
    pub overflow: DVector<f64>,
}

impl NetworkModel {
    /// Builds and validates a model. `wwtp` is the element index of the tank
    /// whose actuator discharges to the treatment plant, `control_ids` names
    /// each tank's control in tank order.
    pub fn new(
        elements: Vec<ElementSpec>,
        routing: Vec<Routing>,
        catchments: Vec<Catchment>,
        control_ids: Vec<String>,
        dt: f64,
        wwtp: usize,
    ) -> Result<Self, Error> {
        if elements.len() != routing.len() {
            return Err(Error::Dimension(format!(
                "{} elements but {} routing entries",
                elements.len(),
                routing.len()
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Network(format!("dt must be positive, got {dt}")));
        }

        let mut seen = std::collections::HashSet::new();
        for e in &elements {
            if e.id.is_empty() {
                return Err(Error::Network("empty element id".into()));
            }
            if !seen.insert(e.id.clone()) {
                return Err(Error::Network(format!("duplicate element id '{}'", e.id)));
            }
        }
        for c in &catchments {
            if !seen.insert(c.id.clone()) {
                return Err(Error::Network(format!("duplicate id '{}'", c.id)));
            }
            if !(c.area_m2.is_finite() && c.area_m2 > 0.0) {
                return Err(Error::Element {
                    element: c.id.clone(),
                    message: format!("area must be positive, got {}", c.area_m2),
                });
            }
        }

        let mut tanks = Vec::new();
        let mut pipes = Vec::new();
        let mut delays = Vec::new();
        let mut kind_pos = vec![0usize; elements.len()];
        for (i, e) in elements.iter().enumerate() {
            let err = |message: String| Error::Element {
                element: e.id.clone(),
                message,
            };
            match &e.kind {
                ElementKind::Tank {
                    capacity_m3,
                    beta,
                    control_cap,
                } => {
                    if !(capacity_m3.is_finite() && *capacity_m3 > 0.0) {
                        return Err(err(format!("capacity must be positive, got {capacity_m3}")));
                    }
                    if !(beta.is_finite() && *beta > 0.0) {
                        return Err(err(format!("beta must be positive, got {beta}")));
                    }
                    if *beta * dt > 1.0 + 1e-12 {
                        return Err(err(format!(
                            "beta * dt = {} exceeds 1; the actuator could drain more than the stored volume in one sample",
                            beta * dt
                        )));
                    }
                    if !(control_cap.is_finite() && *control_cap > 0.0) {
                        return Err(err(format!(
                            "control_cap must be positive, got {control_cap}"
                        )));
                    }
                    kind_pos[i] = tanks.len();
                    tanks.push(i);
                }
                ElementKind::WeirPipe { capacity } => {
                    if !(capacity.is_finite() && *capacity > 0.0) {
                        return Err(err(format!("capacity must be positive, got {capacity}")));
                    }
                    kind_pos[i] = pipes.len();
                    pipes.push(i);
                }
                ElementKind::DelayChain { length } => {
                    if *length == 0 {
                        return Err(err("delay chain length must be at least 1".into()));
                    }
                    kind_pos[i] = delays.len();
                    delays.push(i);
                }
            }
        }
        if tanks.is_empty() {
            return Err(Error::Network("network has no tanks".into()));
        }
        if control_ids.len() != tanks.len() {
            return Err(Error::Dimension(format!(
                "{} control ids for {} tanks",
                control_ids.len(),
                tanks.len()
            )));
        }
        for id in &control_ids {
            if !seen.insert(id.clone()) {
                return Err(Error::Network(format!("duplicate id '{id}'")));
            }
        }

        let is_tank = |j: usize| matches!(elements[j].kind, ElementKind::Tank { .. });
        let is_pipe = |j: usize| matches!(elements[j].kind, ElementKind::WeirPipe { .. });
        let is_delay = |j: usize| matches!(elements[j].kind, ElementKind::DelayChain { .. });

        let mut rain_used = vec![false; catchments.len()];
        for (i, r) in routing.iter().enumerate() {
            let here = &elements[i].id;
            let check = |list: &[usize], pred: &dyn Fn(usize) -> bool, what: &str| {
                for &j in list {
                    if j >= elements.len() || !pred(j) {
                        return Err(Error::Element {
                            element: here.clone(),
                            message: format!("routing source {j} is not a {what}"),
                        });
                    }
                }
                Ok(())
            };
            check(&r.controls, &is_tank, "tank (control source)")?;
            check(&r.spills, &is_tank, "tank (spill source)")?;
            check(&r.pipes, &is_pipe, "weir pipe")?;
            check(&r.delays, &is_delay, "delay chain")?;
            for &c in &r.rains {
                if c >= catchments.len() {
                    return Err(Error::Element {
                        element: here.clone(),
                        message: format!("rain source {c} does not exist"),
                    });
                }
                rain_used[c] = true;
            }
        }
        for (c, used) in rain_used.iter().enumerate() {
            if !used {
                return Err(Error::Element {
                    element: catchments[c].id.clone(),
                    message: "catchment feeds no element".into(),
                });
            }
        }
        if wwtp >= elements.len() || !is_tank(wwtp) {
            return Err(Error::Network(format!(
                "wwtp element index {wwtp} is not a tank"
            )));
        }

        let topo = toposort(&elements, &routing)?;

        let mut register_offset = Vec::with_capacity(delays.len());
        let mut n_registers = 0usize;
        for &d in &delays {
            register_offset.push(n_registers);
            if let ElementKind::DelayChain { length } = elements[d].kind {
                n_registers += length;
            }
        }

        let mut spill_is_routed = vec![false; elements.len()];
        for r in &routing {
            for &j in &r.spills {
                spill_is_routed[j] = true;
            }
        }

        Ok(NetworkModel {
            elements,
            routing,
            catchments,
            control_ids,
            dt,
            wwtp,
            tanks,
            pipes,
            delays,
            kind_pos,
            register_offset,
            n_registers,
            topo,
            spill_is_routed,
        })
    }

    /// Returns a copy of the model running at a different sample time.
    pub fn with_dt(&self, dt: f64) -> Result<Self, Error> {
        NetworkModel::new(
            self.elements.clone(),
            self.routing.clone(),
            self.catchments.clone(),
            self.control_ids.clone(),
            dt,
            self.wwtp,
        )
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn elements(&self) -> &[ElementSpec] {
        &self.elements
    }

    pub fn routing(&self, element: usize) -> &Routing {
        &self.routing[element]
    }

    pub fn catchments(&self) -> &[Catchment] {
        &self.catchments
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_tanks(&self) -> usize {
        self.tanks.len()
    }

    pub fn n_pipes(&self) -> usize {
        self.pipes.len()
    }

    pub fn n_delays(&self) -> usize {
        self.delays.len()
    }

    pub fn n_registers(&self) -> usize {
        self.n_registers
    }

    pub fn n_catchments(&self) -> usize {
        self.catchments.len()
    }

    /// Element indices of all tanks, in declaration order.
    pub fn tanks(&self) -> &[usize] {
        &self.tanks
    }

    pub fn pipes(&self) -> &[usize] {
        &self.pipes
    }

    pub fn delays(&self) -> &[usize] {
        &self.delays
    }

    /// Position of an element within the list of its own kind.
    pub fn kind_position(&self, element: usize) -> usize {
        self.kind_pos[element]
    }

    /// Offset of a delay chain's first register in the flattened register
    /// vector; `delay_pos` indexes into `delays()`.
    pub fn register_offset(&self, delay_pos: usize) -> usize {
        self.register_offset[delay_pos]
    }

    pub fn chain_length(&self, delay_pos: usize) -> usize {
        match self.elements[self.delays[delay_pos]].kind {
            ElementKind::DelayChain { length } => length,
            _ => unreachable!(),
        }
    }

    /// Element index of the tank discharging to the treatment plant.
    pub fn wwtp_element(&self) -> usize {
        self.wwtp
    }

    /// Tank-list position of the treatment plant control.
    pub fn wwtp_control(&self) -> usize {
        self.kind_pos[self.wwtp]
    }

    /// Name of each tank's control, in tank order.
    pub fn control_ids(&self) -> &[String] {
        &self.control_ids
    }

    pub fn element_index(&self, id: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.id == id)
    }

    /// Whether a tank's weir overflow is routed back into the network rather
    /// than leaving it; indexed by element.
    pub fn spill_is_routed(&self, element: usize) -> bool {
        self.spill_is_routed[element]
    }

    /// `(capacity, beta, control_cap)` of a tank; `tank_pos` indexes into
    /// `tanks()`.
    pub fn tank_params(&self, tank_pos: usize) -> (f64, f64, f64) {
        match self.elements[self.tanks[tank_pos]].kind {
            ElementKind::Tank {
                capacity_m3,
                beta,
                control_cap,
            } => (capacity_m3, beta, control_cap),
            _ => unreachable!(),
        }
    }

    /// Flow capacity of a weir pipe; `pipe_pos` indexes into `pipes()`.
    pub fn pipe_capacity(&self, pipe_pos: usize) -> f64 {
        match self.elements[self.pipes[pipe_pos]].kind {
            ElementKind::WeirPipe { capacity } => capacity,
            _ => unreachable!(),
        }
    }

    /// Evaluation order in which same-sample flows (pipe outflows and routed
    /// tank spills) are resolvable.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Weir elements, meaning every element that can overflow: all tanks and
    /// all weir pipes, in element order.
    pub fn weir_elements(&self) -> Vec<usize> {
        (0..self.elements.len())
            .filter(|&i| !matches!(self.elements[i].kind, ElementKind::DelayChain { .. }))
            .collect()
    }

    fn check_step_dims(
        &self,
        state: &SystemState,
        controls: &DVector<f64>,
        rain_flow: &DVector<f64>,
    ) -> Result<(), Error> {
        if state.volumes.len() != self.n_tanks() || state.registers.len() != self.n_registers {
            return Err(Error::Dimension(format!(
                "state has {} volumes and {} registers, model wants {} and {}",
                state.volumes.len(),
                state.registers.len(),
                self.n_tanks(),
                self.n_registers
            )));
        }
        if controls.len() != self.n_tanks() {
            return Err(Error::Dimension(format!(
                "{} controls for {} tanks",
                controls.len(),
                self.n_tanks()
            )));
        }
        if rain_flow.len() != self.n_catchments() {
            return Err(Error::Dimension(format!(
                "{} rain flows for {} catchments",
                rain_flow.len(),
                self.n_catchments()
            )));
        }
        for (i, v) in rain_flow.iter().enumerate() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Domain(format!(
                    "rain flow into '{}' must be nonnegative, got {v}",
                    self.catchments[i].id
                )));
            }
        }
        Ok(())
    }

    /// Advances the plant by one sample. Requested controls are clipped to
    /// the physically deliverable range `[0, min(cap, beta V)]`; weirs then
    /// spill exactly the volume or flow exceeding each element's capacity.
    pub fn plant_step(
        &self,
        state: &SystemState,
        controls: &DVector<f64>,
        rain_flow: &DVector<f64>,
    ) -> Result<(SystemState, FlowRecord), Error> {
        self.check_step_dims(state, controls, rain_flow)?;
        let dt = self.dt;
        let ne = self.n_elements();

        let mut applied = DVector::zeros(self.n_tanks());
        for (t, &e) in self.tanks.iter().enumerate() {
            if let ElementKind::Tank {
                beta, control_cap, ..
            } = self.elements[e].kind
            {
                let physical = (beta * state.volumes[t]).min(control_cap);
                applied[t] = controls[t].clamp(0.0, physical.max(0.0));
            }
        }

        // Delay outputs come from the stored registers, so they are known
        // before any same-sample flow is resolved.
        let mut delay_out = DVector::zeros(self.delays.len());
        for (d, _) in self.delays.iter().enumerate() {
            let last = self.register_offset[d] + self.chain_length(d) - 1;
            delay_out[d] = state.registers[last];
        }

        let mut inflow = DVector::zeros(ne);
        let mut overflow = DVector::zeros(ne);
        let mut pipe_out = DVector::zeros(self.pipes.len());
        let mut new_volumes = state.volumes.clone();

        for &e in &self.topo {
            let r = &self.routing[e];
            let mut q = 0.0;
            for &j in &r.controls {
                q += applied[self.kind_pos[j]];
            }
            for &j in &r.spills {
                q += overflow[j];
            }
            for &j in &r.pipes {
                q += pipe_out[self.kind_pos[j]];
            }
            for &j in &r.delays {
                q += delay_out[self.kind_pos[j]];
            }
            for &c in &r.rains {
                q += rain_flow[c];
            }
            inflow[e] = q;

            match self.elements[e].kind {
                ElementKind::Tank { capacity_m3, .. } => {
                    let t = self.kind_pos[e];
                    let tentative = state.volumes[t] + dt * (q - applied[t]);
                    let spill = ((tentative - capacity_m3) / dt).max(0.0);
                    overflow[e] = spill;
                    new_volumes[t] = tentative - dt * spill;
                }
                ElementKind::WeirPipe { capacity } => {
                    let spill = (q - capacity).max(0.0);
                    overflow[e] = spill;
                    pipe_out[self.kind_pos[e]] = q - spill;
                }
                ElementKind::DelayChain { .. } => {}
            }
        }

        let mut new_registers = state.registers.clone();
        for (d, &e) in self.delays.iter().enumerate() {
            let off = self.register_offset[d];
            let len = self.chain_length(d);
            for j in (1..len).rev() {
                new_registers[off + j] = state.registers[off + j - 1];
            }
            new_registers[off] = inflow[e];
        }

        Ok((
            SystemState {
                volumes: new_volumes,
                registers: new_registers,
            },
            FlowRecord {
                inflow,
                control: applied,
                pipe_outflow: pipe_out,
                delay_outflow: delay_out,
                overflow,
            },
        ))
    }

    /// Total inflow per element for a given state, controls and rain.
    pub fn element_inflows(
        &self,
        state: &SystemState,
        controls: &DVector<f64>,
        rain_flow: &DVector<f64>,
    ) -> Result<DVector<f64>, Error> {
        let (_, record) = self.plant_step(state, controls, rain_flow)?;
        Ok(record.inflow)
    }
}

/// Kahn's algorithm over the full routing graph. Rejects any directed cycle,
/// and doubles as the same-sample evaluation order: every flow source of an
/// element appears before it.
fn toposort(elements: &[ElementSpec], routing: &[Routing]) -> Result<Vec<usize>, Error> {
    let n = elements.len();
    let mut indegree = vec![0usize; n];
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, r) in routing.iter().enumerate() {
        for &j in r
            .controls
            .iter()
            .chain(&r.spills)
            .chain(&r.pipes)
            .chain(&r.delays)
        {
            out_edges[j].push(i);
            indegree[i] += 1;
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    let mut head = 0;
    while head < queue.len() {
        let e = queue[head];
        head += 1;
        order.push(e);
        for &next in &out_edges[e] {
            indegree[next] -= 1;
            if indegree[next] == 0 {
                queue.push(next);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n)
            .find(|&i| indegree[i] > 0)
            .map(|i| elements[i].id.clone())
            .unwrap_or_default();
        return Err(Error::Element {
            element: stuck,
            message: "routing contains a cycle".into(),
        });
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tank_model() -> NetworkModel {
        // w0 -> pipe -> tank A -, control uA -> delay(2) -> tank B, uB = wwtp
        let elements = vec![
            ElementSpec {
                id: "p1".into(),
                kind: ElementKind::WeirPipe { capacity: 8.0 },
            },
            ElementSpec {
                id: "A".into(),
                kind: ElementKind::Tank {
                    capacity_m3: 100.0,
                    beta: 0.2,
                    control_cap: 6.0,
                },
            },
            ElementSpec {
                id: "d1".into(),
                kind: ElementKind::DelayChain { length: 2 },
            },
            ElementSpec {
                id: "B".into(),
                kind: ElementKind::Tank {
                    capacity_m3: 50.0,
                    beta: 0.2,
                    control_cap: 10.0,
                },
            },
        ];
        let routing = vec![
            Routing {
                rains: vec![0],
                ..Default::default()
            },
            Routing {
                pipes: vec![0],
                ..Default::default()
            },
            Routing {
                controls: vec![1],
                ..Default::default()
            },
            Routing {
                delays: vec![2],
                ..Default::default()
            },
        ];
        let catchments = vec![Catchment {
            id: "w0".into(),
            area_m2: 1e5,
        }];
        NetworkModel::new(
            elements,
            routing,
            catchments,
            vec!["uA".into(), "uB".into()],
            5.0,
            3,
        )
        .unwrap()
    }

    #[test]
    fn rain_conversion_matches_hand_value() {
        // 1 um/s on 1 km2: 1e-6 m/s * 1e6 m2 * 60 s/min = 60 m3/min.
        assert!((rain_to_flow(1.0, 1e6).unwrap() - 60.0).abs() < 1e-9);
        assert!((rain_to_flow(3.5, 2e5).unwrap() - 42.0).abs() < 1e-12);
        assert!(rain_to_flow(-1.0, 1.0).is_err());
    }

    #[test]
    fn tank_weir_spills_exact_excess() {
        // V=480, qin=10, u=2 with capacity 500 and dt=5: tentative volume is
        // 480 + 5*8 = 520, so the weir spills 4 m3/min and leaves V'=500.
        let elements = vec![ElementSpec {
            id: "T".into(),
            kind: ElementKind::Tank {
                capacity_m3: 500.0,
                beta: 0.2,
                control_cap: 30.0,
            },
        }];
        let routing = vec![Routing {
            rains: vec![0],
            ..Default::default()
        }];
        let catchments = vec![Catchment {
            id: "w".into(),
            area_m2: 1e6,
        }];
        let model = NetworkModel::new(
            elements,
            routing,
            catchments,
            vec!["u".into()],
            5.0,
            0,
        )
        .unwrap();
        let state = SystemState {
            volumes: DVector::from_element(1, 480.0),
            registers: DVector::zeros(0),
        };
        let (next, rec) = model
            .plant_step(
                &state,
                &DVector::from_element(1, 2.0),
                &DVector::from_element(1, 10.0),
            )
            .unwrap();
        assert!((rec.inflow[0] - 10.0).abs() < 1e-12);
        assert!((rec.overflow[0] - 4.0).abs() < 1e-12);
        assert!((next.volumes[0] - 500.0).abs() < 1e-12);
    }

    #[test]
    fn registers_shift_by_one_sample() {
        let model = two_tank_model();
        let mut state = SystemState::zeros(&model);
        state.registers[0] = 3.0;
        state.registers[1] = 7.0;
        state.volumes[0] = 50.0;
        let controls = DVector::from_vec(vec![4.0, 0.0]);
        let rain = DVector::from_element(1, 0.0);
        let (next, rec) = model.plant_step(&state, &controls, &rain).unwrap();
        // Chain output was register 1, tank B receives it.
        assert_eq!(rec.delay_outflow[0], 7.0);
        assert!((next.volumes[1] - 5.0 * 7.0).abs() < 1e-12);
        // New head register holds the chain inflow (control of A).
        assert_eq!(next.registers[0], 4.0);
        assert_eq!(next.registers[1], 3.0);
    }

    #[test]
    fn pipe_clips_to_capacity_same_sample() {
        let model = two_tank_model();
        let state = SystemState::zeros(&model);
        let controls = DVector::zeros(2);
        // 12 m3/min into a pipe with capacity 8 spills 4 and forwards 8.
        let rain = DVector::from_element(1, 12.0);
        let (next, rec) = model.plant_step(&state, &controls, &rain).unwrap();
        assert!((rec.overflow[0] - 4.0).abs() < 1e-12);
        assert!((rec.pipe_outflow[0] - 8.0).abs() < 1e-12);
        assert!((next.volumes[0] - 5.0 * 8.0).abs() < 1e-12);
    }

    #[test]
    fn controls_clip_to_available_volume() {
        let model = two_tank_model();
        let mut state = SystemState::zeros(&model);
        state.volumes[0] = 10.0;
        // beta V = 2 is below the requested 6.
        let controls = DVector::from_vec(vec![6.0, 0.0]);
        let rain = DVector::from_element(1, 0.0);
        let (next, rec) = model.plant_step(&state, &controls, &rain).unwrap();
        assert!((rec.control[0] - 2.0).abs() < 1e-12);
        assert!((next.volumes[0] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn cycle_is_rejected() {
        let elements = vec![
            ElementSpec {
                id: "T".into(),
                kind: ElementKind::Tank {
                    capacity_m3: 10.0,
                    beta: 0.1,
                    control_cap: 1.0,
                },
            },
            ElementSpec {
                id: "d".into(),
                kind: ElementKind::DelayChain { length: 1 },
            },
        ];
        // d feeds itself.
        let routing = vec![
            Routing {
                rains: vec![0],
                ..Default::default()
            },
            Routing {
                delays: vec![1],
                ..Default::default()
            },
        ];
        let catchments = vec![Catchment {
            id: "w".into(),
            area_m2: 1.0,
        }];
        let err = NetworkModel::new(elements, routing, catchments, vec!["u".into()], 5.0, 0)
            .unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn beta_exceeding_sample_budget_is_rejected() {
        let elements = vec![ElementSpec {
            id: "T".into(),
            kind: ElementKind::Tank {
                capacity_m3: 10.0,
                beta: 0.3,
                control_cap: 1.0,
            },
        }];
        let routing = vec![Routing {
            rains: vec![0],
            ..Default::default()
        }];
        let catchments = vec![Catchment {
            id: "w".into(),
            area_m2: 1.0,
        }];
        let err = NetworkModel::new(elements, routing, catchments, vec!["u".into()], 5.0, 0)
            .unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn mass_is_conserved_per_step() {
        let model = two_tank_model();
        let mut state = SystemState::zeros(&model);
        state.volumes = DVector::from_vec(vec![95.0, 30.0]);
        state.registers = DVector::from_vec(vec![2.0, 5.0]);
        let controls = DVector::from_vec(vec![5.0, 4.0]);
        let rain = DVector::from_element(1, 20.0);
        let (next, rec) = model.plant_step(&state, &controls, &rain).unwrap();
        let dt = model.dt();
        let stored = |s: &SystemState| s.volumes.sum() + dt * s.registers.sum();
        let inflow = dt * rain.sum();
        let wwtp = dt * rec.control[model.wwtp_control()];
        let spilled = dt * rec.overflow.sum();
        let balance = stored(&state) + inflow - wwtp - spilled - stored(&next);
        assert!(balance.abs() < 1e-9, "residual {balance}");
    }
}
