//! Plain-text network description format.
//!
//! The format is line based. Global keys come first, then one block per
//! catchment and element:
//!
//! ```text
//! dt = 5
//! wwtp = u1
//!
//! [catchment w1]
//! area = 300000
//!
//! [tank T1]
//! capacity = 2000
//! beta = 0.2
//! control = u1
//! control_cap = 70
//! inflows = T1:5
//!
//! [pipe p7]
//! capacity = 35
//! inflows = w7
//!
//! [delay T1:5]
//! length = 1
//! inflows = u2, T1:10
//! ```
//!
//! Inflow tokens are catchment ids, control ids, pipe or delay ids (meaning
//! the forwarded flow of that element), or `spill(T)` for the weir overflow
//! of tank `T` routed back into the network. `#` starts a comment.

use std::path::Path;

use crate::error::Error;
use crate::network::{Catchment, ElementKind, ElementSpec, NetworkModel, Routing};

/// The bundled six-tank benchmark network.
pub const ASTLINGEN_CONFIG: &str = include_str!("../../configs/astlingen.cfg");

/// Loads the bundled benchmark network.
pub fn astlingen() -> NetworkModel {
    load_network(ASTLINGEN_CONFIG).expect("bundled network config is valid")
}

#[derive(Clone, Copy, PartialEq)]
enum BlockKind {
    Catchment,
    Tank,
    Pipe,
    Delay,
}

struct Block {
    kind: BlockKind,
    id: String,
    keys: Vec<(String, String, usize)>,
}

impl Block {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        let pos = self.keys.iter().position(|(k, _, _)| k == key)?;
        let (_, value, line) = self.keys.remove(pos);
        Some((value, line))
    }

    fn require(&mut self, key: &str) -> Result<String, Error> {
        self.take(key).map(|(v, _)| v).ok_or_else(|| Error::Element {
            element: self.id.clone(),
            message: format!("missing key '{key}'"),
        })
    }

    fn parse_f64(&mut self, key: &str) -> Result<f64, Error> {
        let raw = self.require(key)?;
        raw.parse::<f64>().map_err(|_| Error::Element {
            element: self.id.clone(),
            message: format!("key '{key}' is not a number: '{raw}'"),
        })
    }

    fn finish(&self) -> Result<(), Error> {
        if let Some((k, _, line)) = self.keys.first() {
            return Err(Error::Parse {
                line: *line,
                message: format!("unknown key '{k}' in block '{}'", self.id),
            });
        }
        Ok(())
    }
}

/// Parses a network description.
pub fn load_network(text: &str) -> Result<NetworkModel, Error> {
    let mut globals: Vec<(String, String, usize)> = Vec::new();
    let mut blocks: Vec<Block> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let header = header.strip_suffix(']').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "unterminated block header".into(),
            })?;
            let mut parts = header.split_whitespace();
            let kind = match parts.next() {
                Some("catchment") => BlockKind::Catchment,
                Some("tank") => BlockKind::Tank,
                Some("pipe") => BlockKind::Pipe,
                Some("delay") => BlockKind::Delay,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown block kind '{}'", other.unwrap_or("")),
                    })
                }
            };
            let id = parts.next().ok_or_else(|| Error::Parse {
                line: line_no,
                message: "block header is missing an id".into(),
            })?;
            if parts.next().is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "block header has trailing tokens".into(),
                });
            }
            blocks.push(Block {
                kind,
                id: id.to_string(),
                keys: Vec::new(),
            });
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        let entry = (key.trim().to_string(), value.trim().to_string(), line_no);
        match blocks.last_mut() {
            Some(block) => block.keys.push(entry),
            None => globals.push(entry),
        }
    }

    let mut dt = None;
    let mut wwtp_control = None;
    for (k, v, line) in globals {
        match k.as_str() {
            "dt" => {
                dt = Some(v.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("dt is not a number: '{v}'"),
                })?)
            }
            "wwtp" => wwtp_control = Some(v),
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown global key '{k}'"),
                })
            }
        }
    }
    let dt = dt.ok_or_else(|| Error::Network("missing global key 'dt'".into()))?;
    let wwtp_control =
        wwtp_control.ok_or_else(|| Error::Network("missing global key 'wwtp'".into()))?;

    // First pass: declare ids so inflow tokens can be resolved in a second
    // pass regardless of declaration order.
    let mut catchments: Vec<Catchment> = Vec::new();
    let mut elements: Vec<ElementSpec> = Vec::new();
    let mut element_blocks: Vec<usize> = Vec::new();
    let mut control_of_tank: Vec<(String, usize)> = Vec::new(); // (control id, element idx)

    for (b, block) in blocks.iter_mut().enumerate() {
        match block.kind {
            BlockKind::Catchment => {
                let area = block.parse_f64("area")?;
                block.finish()?;
                catchments.push(Catchment {
                    id: block.id.clone(),
                    area_m2: area,
                });
            }
            BlockKind::Tank => {
                let capacity_m3 = block.parse_f64("capacity")?;
                let beta = block.parse_f64("beta")?;
                let control_cap = block.parse_f64("control_cap")?;
                let control = block.require("control")?;
                control_of_tank.push((control, elements.len()));
                elements.push(ElementSpec {
                    id: block.id.clone(),
                    kind: ElementKind::Tank {
                        capacity_m3,
                        beta,
                        control_cap,
                    },
                });
                element_blocks.push(b);
            }
            BlockKind::Pipe => {
                let capacity = block.parse_f64("capacity")?;
                elements.push(ElementSpec {
                    id: block.id.clone(),
                    kind: ElementKind::WeirPipe { capacity },
                });
                element_blocks.push(b);
            }
            BlockKind::Delay => {
                let raw = block.require("length")?;
                let length = raw.parse::<usize>().map_err(|_| Error::Element {
                    element: block.id.clone(),
                    message: format!("length is not an integer: '{raw}'"),
                })?;
                elements.push(ElementSpec {
                    id: block.id.clone(),
                    kind: ElementKind::DelayChain { length },
                });
                element_blocks.push(b);
            }
        }
    }

    let find_element = |id: &str| elements.iter().position(|e| e.id == id);
    let find_catchment = |id: &str| catchments.iter().position(|c| c.id == id);
    let find_control = |id: &str| {
        control_of_tank
            .iter()
            .find(|(c, _)| c == id)
            .map(|(_, e)| *e)
    };

    let mut routing = vec![Routing::default(); elements.len()];
    for (e, &b) in element_blocks.iter().enumerate() {
        let block = &mut blocks[b];
        let Some((list, line)) = block.take("inflows") else {
            block.finish()?;
            continue;
        };
        block.finish()?;
        for token in list.split(',') {
            let token = token.trim();
            if token.is_empty() {
                continue;
            }
            if let Some(inner) = token.strip_prefix("spill(").and_then(|t| t.strip_suffix(')')) {
                let j = find_element(inner).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("spill source '{inner}' is not a declared element"),
                })?;
                routing[e].spills.push(j);
            } else if let Some(c) = find_catchment(token) {
                routing[e].rains.push(c);
            } else if let Some(j) = find_control(token) {
                routing[e].controls.push(j);
            } else if let Some(j) = find_element(token) {
                match elements[j].kind {
                    ElementKind::WeirPipe { .. } => routing[e].pipes.push(j),
                    ElementKind::DelayChain { .. } => routing[e].delays.push(j),
                    ElementKind::Tank { .. } => {
                        return Err(Error::Parse {
                            line,
                            message: format!(
                                "'{token}' is a tank; use its control id or spill({token})"
                            ),
                        })
                    }
                }
            } else {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown inflow source '{token}'"),
                });
            }
        }
    }

    let wwtp = find_control(&wwtp_control).ok_or_else(|| {
        Error::Network(format!("wwtp control '{wwtp_control}' is not declared by any tank"))
    })?;

    let mut control_ids = Vec::new();
    for e in &elements {
        if matches!(e.kind, ElementKind::Tank { .. }) {
            let id = control_of_tank
                .iter()
                .find(|(_, idx)| elements[*idx].id == e.id)
                .map(|(c, _)| c.clone())
                .expect("control collected with tank");
            control_ids.push(id);
        }
    }

    NetworkModel::new(elements, routing, catchments, control_ids, dt, wwtp)
}

/// Loads a network description from a file.
pub fn load_network_file(path: &Path) -> Result<NetworkModel, Error> {
    let text = std::fs::read_to_string(path)?;
    load_network(&text)
}

/// Serializes a model back to the text format in canonical order:
/// catchments, tanks, pipes, delays. Parsing the result reproduces the
/// model, and serializing again reproduces the text.
pub fn to_config_string(model: &NetworkModel) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let wwtp = &model.control_ids()[model.wwtp_control()];
    writeln!(out, "dt = {}", model.dt()).unwrap();
    writeln!(out, "wwtp = {wwtp}").unwrap();

    for c in model.catchments() {
        writeln!(out, "\n[catchment {}]", c.id).unwrap();
        writeln!(out, "area = {}", c.area_m2).unwrap();
    }

    let inflow_list = |e: usize| -> String {
        let r = model.routing(e);
        let mut tokens: Vec<String> = Vec::new();
        for &c in &r.rains {
            tokens.push(model.catchments()[c].id.clone());
        }
        for &j in &r.controls {
            tokens.push(model.control_ids()[model.kind_position(j)].clone());
        }
        for &j in &r.spills {
            tokens.push(format!("spill({})", model.elements()[j].id));
        }
        for &j in &r.pipes {
            tokens.push(model.elements()[j].id.clone());
        }
        for &j in &r.delays {
            tokens.push(model.elements()[j].id.clone());
        }
        tokens.join(", ")
    };

    for (t, &e) in model.tanks().iter().enumerate() {
        let spec = &model.elements()[e];
        if let ElementKind::Tank {
            capacity_m3,
            beta,
            control_cap,
        } = spec.kind
        {
            writeln!(out, "\n[tank {}]", spec.id).unwrap();
            writeln!(out, "capacity = {capacity_m3}").unwrap();
            writeln!(out, "beta = {beta}").unwrap();
            writeln!(out, "control = {}", model.control_ids()[t]).unwrap();
            writeln!(out, "control_cap = {control_cap}").unwrap();
            let inflows = inflow_list(e);
            if !inflows.is_empty() {
                writeln!(out, "inflows = {inflows}").unwrap();
            }
        }
    }
    for &e in model.pipes() {
        let spec = &model.elements()[e];
        if let ElementKind::WeirPipe { capacity } = spec.kind {
            writeln!(out, "\n[pipe {}]", spec.id).unwrap();
            writeln!(out, "capacity = {capacity}").unwrap();
            let inflows = inflow_list(e);
            if !inflows.is_empty() {
                writeln!(out, "inflows = {inflows}").unwrap();
            }
        }
    }
    for &e in model.delays() {
        let spec = &model.elements()[e];
        if let ElementKind::DelayChain { length } = spec.kind {
            writeln!(out, "\n[delay {}]", spec.id).unwrap();
            writeln!(out, "length = {length}").unwrap();
            let inflows = inflow_list(e);
            if !inflows.is_empty() {
                writeln!(out, "inflows = {inflows}").unwrap();
            }
        }
    }
    out
}

/// Expected structure of the six-tank benchmark: element kind and inflow
/// tokens per element id, with length-1 delay chains throughout.
const BENCHMARK_STRUCTURE: &[(&str, &str, &[&str])] = &[
    ("T1", "tank", &["T1:5"]),
    ("T2", "tank", &["w2"]),
    ("T3", "tank", &["w3", "T3:5"]),
    ("T4", "tank", &["w4", "T4:5"]),
    ("T5", "tank", &["w5"]),
    ("T6", "tank", &["w6", "T6:5"]),
    ("p7", "pipe", &["w7"]),
    ("p8", "pipe", &["w8"]),
    ("p9", "pipe", &["w9"]),
    ("p10", "pipe", &["w10"]),
    ("T1:5", "delay", &["u2", "T1:10"]),
    ("T1:10", "delay", &["w1", "u3", "u4", "T1:15"]),
    ("T1:15", "delay", &["u5", "T1:20"]),
    ("T1:20", "delay", &["p10"]),
    ("T3:5", "delay", &["T3:10"]),
    ("T3:10", "delay", &["T3:15"]),
    ("T3:15", "delay", &["u6", "p8"]),
    ("T4:5", "delay", &["T4:10"]),
    ("T4:10", "delay", &["p7"]),
    ("T6:5", "delay", &["T6:10"]),
    ("T6:10", "delay", &["T6:15"]),
    ("T6:15", "delay", &["p9"]),
];

const BENCHMARK_CONTROLS: &[(&str, &str)] = &[
    ("T1", "u1"),
    ("T2", "u2"),
    ("T3", "u3"),
    ("T4", "u4"),
    ("T5", "u5"),
    ("T6", "u6"),
];

/// Verifies that a model has exactly the benchmark topology: the six tanks
/// with controls u1..u6 and u1 at the treatment plant, pipes p7..p10,
/// twelve single-register delay chains, ten catchments w1..w10, and the
/// reference routing. Parameters (capacities, areas, gains) are free.
pub fn check_astlingen(model: &NetworkModel) -> Result<(), Error> {
    let mut problems: Vec<String> = Vec::new();

    if model.n_elements() != BENCHMARK_STRUCTURE.len() {
        problems.push(format!(
            "expected {} elements, found {}",
            BENCHMARK_STRUCTURE.len(),
            model.n_elements()
        ));
    }
    for want in 1..=10 {
        let id = format!("w{want}");
        if !model.catchments().iter().any(|c| c.id == id) {
            problems.push(format!("missing catchment {id}"));
        }
    }
    if model.n_catchments() != 10 {
        problems.push(format!("expected 10 catchments, found {}", model.n_catchments()));
    }

    for &(id, kind, sources) in BENCHMARK_STRUCTURE {
        let Some(e) = model.element_index(id) else {
            problems.push(format!("missing element {id}"));
            continue;
        };
        let spec = &model.elements()[e];
        let kind_ok = match (&spec.kind, kind) {
            (ElementKind::Tank { .. }, "tank") => true,
            (ElementKind::WeirPipe { .. }, "pipe") => true,
            (ElementKind::DelayChain { length }, "delay") => {
                if *length != 1 {
                    problems.push(format!("{id}: expected a single register, found {length}"));
                }
                true
            }
            _ => false,
        };
        if !kind_ok {
            problems.push(format!("{id}: expected a {kind}"));
            continue;
        }
        let r = model.routing(e);
        let mut have: Vec<String> = Vec::new();
        for &c in &r.rains {
            have.push(model.catchments()[c].id.clone());
        }
        for &j in &r.controls {
            have.push(model.control_ids()[model.kind_position(j)].clone());
        }
        for &j in &r.spills {
            have.push(format!("spill({})", model.elements()[j].id));
        }
        for &j in r.pipes.iter().chain(&r.delays) {
            have.push(model.elements()[j].id.clone());
        }
        let mut want: Vec<String> = sources.iter().map(|s| s.to_string()).collect();
        have.sort();
        want.sort();
        if have != want {
            problems.push(format!(
                "{id}: inflows [{}] do not match the benchmark [{}]",
                have.join(", "),
                want.join(", ")
            ));
        }
    }

    for &(tank, control) in BENCHMARK_CONTROLS {
        if let Some(e) = model.element_index(tank) {
            let have = &model.control_ids()[model.kind_position(e)];
            if have != control {
                problems.push(format!("{tank}: control is '{have}', benchmark uses '{control}'"));
            }
        }
    }
    if model
        .element_index("T1")
        .is_some_and(|e| e != model.wwtp_element())
    {
        problems.push("treatment plant control is not u1".into());
    }

    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Network(format!(
            "network differs from the benchmark: {}",
            problems.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_network_loads_and_matches_benchmark() {
        let model = astlingen();
        assert_eq!(model.n_tanks(), 6);
        assert_eq!(model.n_pipes(), 4);
        assert_eq!(model.n_delays(), 12);
        assert_eq!(model.n_registers(), 12);
        assert_eq!(model.n_catchments(), 10);
        check_astlingen(&model).unwrap();
    }

    #[test]
    fn serialize_parse_is_a_fixpoint() {
        let model = astlingen();
        let canonical = to_config_string(&model);
        let reparsed = load_network(&canonical).unwrap();
        assert_eq!(to_config_string(&reparsed), canonical);
        check_astlingen(&reparsed).unwrap();
    }

    #[test]
    fn unknown_inflow_source_is_reported_with_line() {
        let text = "dt = 5\nwwtp = u1\n\n[catchment w1]\narea = 100\n\n[tank T1]\ncapacity = 10\nbeta = 0.1\ncontrol = u1\ncontrol_cap = 1\ninflows = w1, nosuch\n";
        let err = load_network(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nosuch") && msg.contains("line 12"), "{msg}");
    }

    #[test]
    fn zero_beta_is_rejected_with_element_name() {
        let text = "dt = 5\nwwtp = u1\n\n[catchment w1]\narea = 100\n\n[tank T1]\ncapacity = 10\nbeta = 0\ncontrol = u1\ncontrol_cap = 1\ninflows = w1\n";
        let err = load_network(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("T1") && msg.contains("beta"), "{msg}");
    }

    #[test]
    fn self_feeding_delay_is_a_cycle() {
        let text = "dt = 5\nwwtp = u1\n\n[catchment w1]\narea = 100\n\n[tank T1]\ncapacity = 10\nbeta = 0.1\ncontrol = u1\ncontrol_cap = 1\ninflows = w1, T1:5\n\n[delay T1:5]\nlength = 1\ninflows = T1:5\n";
        let err = load_network(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cycle"), "{msg}");
    }

    #[test]
    fn unreferenced_catchment_is_rejected() {
        let text = "dt = 5\nwwtp = u1\n\n[catchment w1]\narea = 100\n\n[catchment w2]\narea = 100\n\n[tank T1]\ncapacity = 10\nbeta = 0.1\ncontrol = u1\ncontrol_cap = 1\ninflows = w1\n";
        let err = load_network(text).unwrap_err();
        assert!(err.to_string().contains("w2"), "{err}");
    }

    #[test]
    fn spill_routing_parses() {
        let text = "dt = 5\nwwtp = u1\n\n[catchment w1]\narea = 100\n\n[tank T1]\ncapacity = 10\nbeta = 0.1\ncontrol = u1\ncontrol_cap = 1\ninflows = w1\n\n[tank T2]\ncapacity = 10\nbeta = 0.1\ncontrol = u2\ncontrol_cap = 1\ninflows = spill(T1), u1\n";
        let model = load_network(text).unwrap();
        let t2 = model.element_index("T2").unwrap();
        assert_eq!(model.routing(t2).spills, vec![model.element_index("T1").unwrap()]);
        let round = to_config_string(&model);
        assert!(round.contains("spill(T1)"), "{round}");
        load_network(&round).unwrap();
    }
}
