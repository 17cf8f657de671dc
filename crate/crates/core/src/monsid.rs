//! Model-based fault detection and isolation for the arm.
//!
//! The arm is modelled as a graph of elements (commands, actuators, sensors and
//! the kinematics block) feeding nodes. Each node carries several independently
//! derived values of the same physical quantity; every pair of values at a node
//! is a consistency check. A single fault in element `e` disturbs exactly the
//! values whose derivation depends on `e`, so the checks it trips are those whose
//! two sides differ in their dependence on `e`. Elements tripping identical
//! check sets form an ambiguity group.
//!
//! The runtime engine evaluates the checks on time slices produced by the
//! [`StreamCoordinator`], applies tolerance and persistence, and isolates the
//! faulty group on declaration.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{forward_kinematics, geodesic_distance, wrap_angle, DhChain, DhParam, ParamId, Pose};
use crate::sim::{Stamped, TelemetryStreams, ACTUATOR_TAU};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonsidError {
    #[error("graph is not supported by the runtime engine: {0}")]
    UnsupportedGraph(String),
    #[error("invalid detection parameters: {0}")]
    InvalidParams(String),
    #[error("slice has {got} joints, engine expects {expected}")]
    JointCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Command,
    Actuator,
    Encoder,
    EncoderB,
    Velocity,
    Kinematics,
    EeSensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Element {
    pub name: String,
    pub kind: ElementKind,
    /// Zero-based joint for per-joint elements.
    pub joint: Option<usize>,
    /// Whether single faults of this element are diagnosed. Velocity inputs are
    /// trusted and only serve as the reverse path.
    pub hypothesis: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    CommandForward,
    Encoder,
    EncoderB,
    VelocityIntegral,
    ForwardKinematics,
    Camera,
}

impl ValueKind {
    fn label(self) -> &'static str {
        match self {
            ValueKind::CommandForward => "cmd_forward",
            ValueKind::Encoder => "encoder",
            ValueKind::EncoderB => "encoder_b",
            ValueKind::VelocityIntegral => "velocity_integral",
            ValueKind::ForwardKinematics => "fk_encoders",
            ValueKind::Camera => "camera",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeValueSource {
    pub kind: ValueKind,
    /// Element indices this value is derived from.
    pub deps: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Node {
    pub name: String,
    /// Element whose output port this node is.
    pub parent: String,
    pub joint: Option<usize>,
    pub values: Vec<NodeValueSource>,
}

/// Comparison of two values at one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub node: usize,
    pub a: usize,
    pub b: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentGraph {
    n_joints: usize,
    duplicate_encoders: bool,
    elements: Vec<Element>,
    nodes: Vec<Node>,
    checks: Vec<Check>,
}

fn actuator_name(j: usize) -> String {
    let i = j + 1;
    match i {
        1..=3 => format!("Shoulder Joint {i}"),
        4 => format!("Elbow Joint {i}"),
        _ => format!("Wrist Joint {i}"),
    }
}

impl ComponentGraph {
    /// Arm graph: per joint a command input, an actuator, an encoder and a
    /// velocity input, plus the kinematics block and the end-effector pose sensor.
    pub fn arm(n_joints: usize) -> Self {
        Self::build(n_joints, false)
    }

    /// Same as [`ComponentGraph::arm`] with a second, independent encoder per joint.
    pub fn arm_with_duplicate_encoders(n_joints: usize) -> Self {
        Self::build(n_joints, true)
    }

    fn build(n: usize, dup: bool) -> Self {
        let mut elements = Vec::new();
        let mut push = |name: String, kind, joint, hypothesis| {
            elements.push(Element { name, kind, joint, hypothesis });
            elements.len() - 1
        };
        let mut cmd = Vec::new();
        let mut act = Vec::new();
        let mut enc = Vec::new();
        let mut encb = Vec::new();
        let mut vel = Vec::new();
        for j in 0..n {
            let i = j + 1;
            cmd.push(push(format!("J{i}_Angle_Cmd"), ElementKind::Command, Some(j), true));
            act.push(push(actuator_name(j), ElementKind::Actuator, Some(j), true));
            enc.push(push(format!("J{i}_Angle_Pos"), ElementKind::Encoder, Some(j), true));
            if dup {
                encb.push(push(format!("J{i}_Angle_Pos_B"), ElementKind::EncoderB, Some(j), true));
            }
            vel.push(push(format!("J{i}_Angle_Vel"), ElementKind::Velocity, Some(j), false));
        }
        let kin = push("Kinematics".into(), ElementKind::Kinematics, None, true);
        let ee = push("EE_Pose_Sensor".into(), ElementKind::EeSensor, None, true);

        let set = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
        let mut nodes = Vec::new();
        for j in 0..n {
            let i = j + 1;
            nodes.push(Node {
                name: format!("J{i}_Cmd"),
                parent: elements[cmd[j]].name.clone(),
                joint: Some(j),
                values: vec![NodeValueSource { kind: ValueKind::CommandForward, deps: set(&[cmd[j]]) }],
            });
            let mut values = vec![
                NodeValueSource { kind: ValueKind::CommandForward, deps: set(&[cmd[j], act[j]]) },
                NodeValueSource { kind: ValueKind::Encoder, deps: set(&[enc[j]]) },
                NodeValueSource { kind: ValueKind::VelocityIntegral, deps: set(&[vel[j]]) },
            ];
            if dup {
                values.push(NodeValueSource { kind: ValueKind::EncoderB, deps: set(&[encb[j]]) });
            }
            nodes.push(Node { name: format!("J{i}_Angle"), parent: elements[act[j]].name.clone(), joint: Some(j), values });
        }
        let mut fk_deps = set(&enc);
        fk_deps.insert(kin);
        nodes.push(Node {
            name: "EE_Pose".into(),
            parent: "Kinematics".into(),
            joint: None,
            values: vec![
                NodeValueSource { kind: ValueKind::ForwardKinematics, deps: fk_deps },
                NodeValueSource { kind: ValueKind::Camera, deps: set(&[ee]) },
            ],
        });
        let mut checks = Vec::new();
        for (ni, node) in nodes.iter().enumerate() {
            for a in 0..node.values.len() {
                for b in a + 1..node.values.len() {
                    checks.push(Check {
                        node: ni,
                        a,
                        b,
                        name: format!("{}:{}~{}", node.name, node.values[a].kind.label(), node.values[b].kind.label()),
                    });
                }
            }
        }
        ComponentGraph { n_joints: n, duplicate_encoders: dup, elements, nodes, checks }
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }
    pub fn has_duplicate_encoders(&self) -> bool {
        self.duplicate_encoders
    }
    pub fn elements(&self) -> &[Element] {
        &self.elements
    }
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn checks(&self) -> &[Check] {
        &self.checks
    }

    pub fn element_index(&self, name: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.name == name)
    }

    /// Checks disturbed by a single fault of element `e`.
    pub fn signature(&self, e: usize) -> BTreeSet<usize> {
        self.checks
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                let node = &self.nodes[c.node];
                node.values[c.a].deps.contains(&e) != node.values[c.b].deps.contains(&e)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AmbiguityGroup {
    pub id: usize,
    pub members: Vec<String>,
    pub signature: Vec<String>,
    #[serde(skip)]
    pub member_indices: Vec<usize>,
    #[serde(skip)]
    pub signature_checks: BTreeSet<usize>,
}

impl AmbiguityGroup {
    pub fn contains(&self, name: &str) -> bool {
        self.members.iter().any(|m| m == name)
    }
}

/// Partitions the fault-hypothesis elements by identical check signatures.
/// Groups are ordered by their first member's position in the graph.
pub fn analyze_ambiguity_groups(graph: &ComponentGraph) -> Vec<AmbiguityGroup> {
    let mut by_sig: Vec<(BTreeSet<usize>, Vec<usize>)> = Vec::new();
    for (e, el) in graph.elements.iter().enumerate() {
        if !el.hypothesis {
            continue;
        }
        let sig = graph.signature(e);
        match by_sig.iter_mut().find(|(s, _)| *s == sig) {
            Some((_, members)) => members.push(e),
            None => by_sig.push((sig, vec![e])),
        }
    }
    by_sig
        .into_iter()
        .enumerate()
        .map(|(id, (sig, members))| AmbiguityGroup {
            id,
            members: members.iter().map(|&e| graph.elements[e].name.clone()).collect(),
            signature: sig.iter().map(|&c| graph.checks[c].name.clone()).collect(),
            member_indices: members,
            signature_checks: sig,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identification {
    /// Observed checks single out one group.
    Isolated { group: usize },
    /// Several maximal groups explain the observation equally well.
    Ambiguous { groups: Vec<usize> },
    /// No group signature fits inside the observation.
    NoMatch,
}

/// Matches an observed set of tripped checks against the group signatures:
/// exact match first, otherwise the largest signatures contained in the
/// observation.
pub fn identify(observed: &BTreeSet<usize>, groups: &[AmbiguityGroup]) -> Identification {
    if let Some(g) = groups.iter().find(|g| g.signature_checks == *observed) {
        return Identification::Isolated { group: g.id };
    }
    let contained: Vec<&AmbiguityGroup> = groups
        .iter()
        .filter(|g| !g.signature_checks.is_empty() && g.signature_checks.is_subset(observed))
        .collect();
    let Some(best) = contained.iter().map(|g| g.signature_checks.len()).max() else {
        return Identification::NoMatch;
    };
    let top: Vec<usize> = contained.iter().filter(|g| g.signature_checks.len() == best).map(|g| g.id).collect();
    if top.len() == 1 {
        Identification::Isolated { group: top[0] }
    } else {
        Identification::Ambiguous { groups: top }
    }
}

/// One aligned record of all four channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSlice {
    pub t: f64,
    pub joint_commands: Vec<f64>,
    pub joint_positions: Vec<f64>,
    pub joint_velocities: Vec<f64>,
    pub ee_pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionParams {
    /// Radians, joint-angle nodes.
    pub joint_tolerance: f64,
    /// Meters, end-effector position.
    pub position_tolerance: f64,
    /// Radians, end-effector orientation.
    pub orientation_tolerance: f64,
    /// Consecutive flagged slices before a fault is declared.
    pub persistence: usize,
    /// Tolerance multiplier for checks involving the velocity integral.
    pub integral_factor: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            joint_tolerance: 0.01,
            position_tolerance: 5e-3,
            orientation_tolerance: 1f64.to_radians(),
            persistence: 5,
            integral_factor: 2.0,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<(), MonsidError> {
        let ok = [self.joint_tolerance, self.position_tolerance, self.orientation_tolerance, self.integral_factor]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(MonsidError::InvalidParams("tolerances must be positive".into()));
        }
        if self.persistence < 1 {
            return Err(MonsidError::InvalidParams("persistence must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeValue {
    Angle(f64),
    Pose(Pose),
}

/// Values held at each node for one slice, in graph order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTable {
    pub values: Vec<Vec<Option<NodeValue>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HealthState {
    Healthy,
    Suspect,
    Faulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Declaration {
    pub t: f64,
    pub identification: Identification,
    /// Members of the isolated group, or the union of candidates otherwise.
    pub elements: Vec<String>,
    pub group: Option<usize>,
    pub magnitudes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealthStatus {
    pub t: f64,
    pub states: Vec<HealthState>,
    pub inconsistent: Vec<usize>,
    pub declaration: Option<Declaration>,
}

impl HealthStatus {
    pub fn any_suspect(&self) -> bool {
        self.states.contains(&HealthState::Suspect)
    }

    pub fn is_faulty(&self) -> bool {
        self.declaration.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthEventKind {
    Suspect,
    Cleared,
    Faulty,
}

/// Health-log record emitted on state changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthEvent {
    pub t: f64,
    pub event: HealthEventKind,
    pub elements: Vec<String>,
    pub group: Option<usize>,
    pub magnitudes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EngineCounters {
    pub slices_processed: usize,
    pub slices_dropped: usize,
    pub suspect_episodes: usize,
    pub declarations: usize,
}

/// Runtime detection engine over the default arm graph.
#[derive(Debug, Clone)]
pub struct MonsidEngine {
    graph: ComponentGraph,
    groups: Vec<AmbiguityGroup>,
    params: DetectionParams,
    nominal: DhChain,
    model: DhChain,
    prev: Option<TimeSlice>,
    actuator_state: Vec<f64>,
    integrator: Vec<f64>,
    node_counts: Vec<usize>,
    suspect: bool,
    declaration: Option<Declaration>,
    counters: EngineCounters,
}

impl MonsidEngine {
    pub fn new(graph: ComponentGraph, params: DetectionParams, nominal: DhChain) -> Result<Self, MonsidError> {
        params.validate()?;
        if graph.has_duplicate_encoders() {
            return Err(MonsidError::UnsupportedGraph("duplicate encoders have no telemetry channel".into()));
        }
        if graph.n_joints() != nominal.n_joints() {
            return Err(MonsidError::UnsupportedGraph(format!(
                "graph has {} joints, chain has {}",
                graph.n_joints(),
                nominal.n_joints()
            )));
        }
        let groups = analyze_ambiguity_groups(&graph);
        let n_nodes = graph.nodes().len();
        Ok(MonsidEngine {
            graph,
            groups,
            params,
            model: nominal.clone(),
            nominal,
            prev: None,
            actuator_state: Vec::new(),
            integrator: Vec::new(),
            node_counts: vec![0; n_nodes],
            suspect: false,
            declaration: None,
            counters: EngineCounters::default(),
        })
    }

    pub fn graph(&self) -> &ComponentGraph {
        &self.graph
    }
    pub fn groups(&self) -> &[AmbiguityGroup] {
        &self.groups
    }
    pub fn params(&self) -> &DetectionParams {
        &self.params
    }
    pub fn counters(&self) -> EngineCounters {
        self.counters
    }
    pub fn declaration(&self) -> Option<&Declaration> {
        self.declaration.as_ref()
    }

    pub fn add_dropped(&mut self, n: usize) {
        self.counters.slices_dropped += n;
    }

    /// Replaces the kinematic model used for the pose node. Joint-offset
    /// differences from the nominal chain are also applied to the encoder values
    /// compared at the joint nodes.
    pub fn set_kinematic_model(&mut self, model: DhChain) {
        self.model = model;
    }

    fn encoder_correction(&self, j: usize) -> f64 {
        let p = ParamId::new(DhParam::Phi, j);
        wrap_angle(self.model.param(p) - self.nominal.param(p))
    }

    /// Clears health, counters and the integrator (the engine restarts on the next slice).
    pub fn reset(&mut self) {
        self.prev = None;
        self.node_counts.iter_mut().for_each(|c| *c = 0);
        self.suspect = false;
        self.declaration = None;
        self.counters = EngineCounters::default();
    }

    /// Forward and reverse values at every node for `slice`, advancing the
    /// actuator model and the velocity integrator.
    pub fn propagate(&mut self, slice: &TimeSlice) -> Result<NodeTable, MonsidError> {
        let n = self.graph.n_joints();
        for len in [slice.joint_commands.len(), slice.joint_positions.len(), slice.joint_velocities.len()] {
            if len != n {
                return Err(MonsidError::JointCount { expected: n, got: len });
            }
        }
        let encoders: Vec<f64> = (0..n).map(|j| slice.joint_positions[j] + self.encoder_correction(j)).collect();
        let first = self.prev.is_none();
        match &self.prev {
            None => {
                self.actuator_state = encoders.clone();
                self.integrator = encoders.clone();
            }
            Some(prev) => {
                let dt = slice.t - prev.t;
                let e = (-dt / ACTUATOR_TAU).exp();
                for j in 0..n {
                    let c0 = prev.joint_commands[j];
                    let c1 = slice.joint_commands[j];
                    let rate = if dt > 0.0 { (c1 - c0) / dt } else { 0.0 };
                    self.actuator_state[j] =
                        e * self.actuator_state[j] + (1.0 - e) * c0 + rate * (dt - ACTUATOR_TAU * (1.0 - e));
                    self.integrator[j] += 0.5 * dt * (prev.joint_velocities[j] + slice.joint_velocities[j]);
                }
            }
        }
        self.prev = Some(slice.clone());
        let fk = forward_kinematics(&self.model, &slice.joint_positions);
        let mut values = Vec::with_capacity(self.graph.nodes.len());
        for node in &self.graph.nodes {
            let row = node
                .values
                .iter()
                .map(|v| match (v.kind, node.joint) {
                    (ValueKind::CommandForward, Some(j)) if node.values.len() == 1 => Some(NodeValue::Angle(slice.joint_commands[j])),
                    (ValueKind::CommandForward, Some(j)) => (!first).then(|| NodeValue::Angle(self.actuator_state[j])),
                    (ValueKind::Encoder, Some(j)) => Some(NodeValue::Angle(encoders[j])),
                    (ValueKind::VelocityIntegral, Some(j)) => (!first).then(|| NodeValue::Angle(self.integrator[j])),
                    (ValueKind::ForwardKinematics, _) => Some(NodeValue::Pose(fk)),
                    (ValueKind::Camera, _) => Some(NodeValue::Pose(slice.ee_pose)),
                    _ => None,
                })
                .collect();
            values.push(row);
        }
        Ok(NodeTable { values })
    }

    /// Evaluates every check; returns the flagged checks with their magnitudes
    /// (joint checks in radians; pose checks as the larger of the two ratios to
    /// tolerance, scaled back to the violating quantity).
    pub fn check_consistency(&self, table: &NodeTable) -> BTreeMap<usize, f64> {
        let mut flagged = BTreeMap::new();
        for (ci, c) in self.graph.checks.iter().enumerate() {
            let node = &self.graph.nodes[c.node];
            let (Some(a), Some(b)) = (table.values[c.node][c.a], table.values[c.node][c.b]) else {
                continue;
            };
            match (a, b) {
                (NodeValue::Angle(x), NodeValue::Angle(y)) => {
                    let integral = [c.a, c.b].iter().any(|&k| node.values[k].kind == ValueKind::VelocityIntegral);
                    let tol = self.params.joint_tolerance * if integral { self.params.integral_factor } else { 1.0 };
                    let m = wrap_angle(x - y).abs();
                    if m > tol {
                        flagged.insert(ci, m);
                    }
                }
                (NodeValue::Pose(p), NodeValue::Pose(q)) => {
                    let dp = (p.position - q.position).norm();
                    let dq = geodesic_distance(&p.rotation, &q.rotation);
                    if dp > self.params.position_tolerance || dq > self.params.orientation_tolerance {
                        let m = if dp / self.params.position_tolerance >= dq / self.params.orientation_tolerance { dp } else { dq };
                        flagged.insert(ci, m);
                    }
                }
                _ => {}
            }
        }
        flagged
    }

    fn explaining_elements(&self, checks: &BTreeSet<usize>) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &ci in checks {
            let c = &self.graph.checks[ci];
            let node = &self.graph.nodes[c.node];
            for e in node.values[c.a].deps.symmetric_difference(&node.values[c.b].deps) {
                if self.graph.elements[*e].hypothesis {
                    out.insert(*e);
                }
            }
        }
        out
    }

    fn names(&self, idx: impl IntoIterator<Item = usize>) -> Vec<String> {
        idx.into_iter().map(|e| self.graph.elements[e].name.clone()).collect()
    }

    fn magnitudes(&self, flagged: &BTreeMap<usize, f64>) -> BTreeMap<String, f64> {
        flagged.iter().map(|(c, m)| (self.graph.checks[*c].name.clone(), *m)).collect()
    }

    /// Processes one slice: propagation, consistency with persistence and,
    /// on declaration, identification. Health latches once a fault is declared.
    pub fn step(&mut self, slice: &TimeSlice) -> Result<(HealthStatus, Vec<HealthEvent>), MonsidError> {
        let table = self.propagate(slice)?;
        let flagged = self.check_consistency(&table);
        self.counters.slices_processed += 1;
        let mut events = Vec::new();

        let mut node_flag = vec![false; self.graph.nodes.len()];
        for &c in flagged.keys() {
            node_flag[self.graph.checks[c].node] = true;
        }
        for (cnt, f) in self.node_counts.iter_mut().zip(&node_flag) {
            *cnt = if *f { *cnt + 1 } else { 0 };
        }
        let observed: BTreeSet<usize> = flagged.keys().copied().collect();
        let n_el = self.graph.elements.len();

        if self.declaration.is_none() {
            let reached = self.node_counts.iter().any(|&c| c >= self.params.persistence);
            if reached {
                let identification = identify(&observed, &self.groups);
                let (elements, group) = match &identification {
                    Identification::Isolated { group } => (self.groups[*group].members.clone(), Some(*group)),
                    Identification::Ambiguous { groups } => {
                        let all: BTreeSet<usize> =
                            groups.iter().flat_map(|g| self.groups[*g].member_indices.iter().copied()).collect();
                        (self.names(all), None)
                    }
                    Identification::NoMatch => {
                        let all = (0..n_el).filter(|&e| self.graph.elements[e].hypothesis);
                        (self.names(all), None)
                    }
                };
                let decl = Declaration {
                    t: slice.t,
                    identification,
                    elements: elements.clone(),
                    group,
                    magnitudes: self.magnitudes(&flagged),
                };
                log::info!("fault declared at t={:.3}: {:?}", slice.t, elements);
                events.push(HealthEvent {
                    t: slice.t,
                    event: HealthEventKind::Faulty,
                    elements,
                    group,
                    magnitudes: decl.magnitudes.clone(),
                });
                self.counters.declarations += 1;
                self.declaration = Some(decl);
                self.suspect = false;
            } else if !observed.is_empty() && !self.suspect {
                self.suspect = true;
                self.counters.suspect_episodes += 1;
                events.push(HealthEvent {
                    t: slice.t,
                    event: HealthEventKind::Suspect,
                    elements: self.names(self.explaining_elements(&observed)),
                    group: None,
                    magnitudes: self.magnitudes(&flagged),
                });
            } else if observed.is_empty() && self.suspect {
                self.suspect = false;
                events.push(HealthEvent {
                    t: slice.t,
                    event: HealthEventKind::Cleared,
                    elements: Vec::new(),
                    group: None,
                    magnitudes: BTreeMap::new(),
                });
            }
        }

        let mut states = vec![HealthState::Healthy; n_el];
        match &self.declaration {
            Some(d) => {
                let faulty = matches!(d.identification, Identification::Isolated { .. });
                for name in &d.elements {
                    if let Some(e) = self.graph.element_index(name) {
                        states[e] = if faulty { HealthState::Faulty } else { HealthState::Suspect };
                    }
                }
            }
            None => {
                for e in self.explaining_elements(&observed) {
                    states[e] = HealthState::Suspect;
                }
            }
        }
        Ok((
            HealthStatus { t: slice.t, states, inconsistent: observed.into_iter().collect(), declaration: self.declaration.clone() },
            events,
        ))
    }

    /// Element name → current state, for reports.
    pub fn state_map(&self, status: &HealthStatus) -> BTreeMap<String, HealthState> {
        self.graph.elements.iter().zip(&status.states).map(|(e, s)| (e.name.clone(), *s)).collect()
    }
}

pub const SLICE_PERIOD: f64 = 0.02;
pub const SLICE_HALF_WINDOW: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoordinatorStats {
    pub emitted: usize,
    pub dropped: usize,
}

/// Aligns four independently timestamped channels into 50 Hz slices. Each
/// tick takes, per channel, the message nearest in time within
/// `[tick − 10 ms, tick + 10 ms)`; ticks missing any channel are dropped.
#[derive(Debug, Clone, Default)]
pub struct StreamCoordinator {
    commands: Vec<Stamped<Vec<f64>>>,
    positions: Vec<Stamped<Vec<f64>>>,
    velocities: Vec<Stamped<Vec<f64>>>,
    ee_pose: Vec<Stamped<Pose>>,
    next_tick: Option<i64>,
    watermark: f64,
    stats: CoordinatorStats,
}

fn nearest<T: Clone>(msgs: &[Stamped<T>], tick: f64) -> Option<T> {
    let lo = tick - SLICE_HALF_WINDOW;
    let hi = tick + SLICE_HALF_WINDOW;
    let start = msgs.partition_point(|m| m.t < lo - 1e-12);
    let mut best: Option<(f64, &Stamped<T>)> = None;
    for m in &msgs[start..] {
        if m.t >= hi - 1e-12 {
            break;
        }
        let d = (m.t - tick).abs();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, m));
        }
    }
    best.map(|(_, m)| m.value.clone())
}

impl StreamCoordinator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> CoordinatorStats {
        self.stats
    }

    /// Buffers new messages (each channel must stay time-ordered).
    pub fn push(&mut self, s: TelemetryStreams) {
        let first = [s.commands.first().map(|m| m.t), s.positions.first().map(|m| m.t), s.velocities.first().map(|m| m.t), s.ee_pose.first().map(|m| m.t)]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        let last = [s.commands.last().map(|m| m.t), s.positions.last().map(|m| m.t), s.velocities.last().map(|m| m.t), s.ee_pose.last().map(|m| m.t)]
            .into_iter()
            .flatten()
            .fold(f64::NEG_INFINITY, f64::max);
        if self.next_tick.is_none() && first.is_finite() {
            self.next_tick = Some((first / SLICE_PERIOD - 1e-9).ceil() as i64);
        }
        if last > self.watermark {
            self.watermark = last;
        }
        self.commands.extend(s.commands);
        self.positions.extend(s.positions);
        self.velocities.extend(s.velocities);
        self.ee_pose.extend(s.ee_pose);
    }

    fn emit_until(&mut self, last_tick: i64, out: &mut Vec<TimeSlice>) {
        let Some(mut k) = self.next_tick else { return };
        while k <= last_tick {
            let t = k as f64 * SLICE_PERIOD;
            let slice = match (
                nearest(&self.commands, t),
                nearest(&self.positions, t),
                nearest(&self.velocities, t),
                nearest(&self.ee_pose, t),
            ) {
                (Some(c), Some(p), Some(v), Some(e)) => {
                    Some(TimeSlice { t, joint_commands: c, joint_positions: p, joint_velocities: v, ee_pose: e })
                }
                _ => None,
            };
            match slice {
                Some(s) => {
                    self.stats.emitted += 1;
                    out.push(s);
                }
                None => self.stats.dropped += 1,
            }
            k += 1;
        }
        self.next_tick = Some(k);
        let keep_from = k as f64 * SLICE_PERIOD - SLICE_HALF_WINDOW - 1e-9;
        self.commands.retain(|m| m.t >= keep_from);
        self.positions.retain(|m| m.t >= keep_from);
        self.velocities.retain(|m| m.t >= keep_from);
        self.ee_pose.retain(|m| m.t >= keep_from);
    }

    /// Emits every tick whose window is complete given the messages seen so far.
    pub fn drain(&mut self) -> Vec<TimeSlice> {
        let mut out = Vec::new();
        let last = ((self.watermark - SLICE_HALF_WINDOW) / SLICE_PERIOD + 1e-9).floor() as i64;
        self.emit_until(last, &mut out);
        out
    }

    /// Emits all remaining ticks up to the last message time.
    pub fn finish(&mut self) -> Vec<TimeSlice> {
        let mut out = Vec::new();
        let last = (self.watermark / SLICE_PERIOD + 1e-9).floor() as i64;
        self.emit_until(last, &mut out);
        out
    }
}

/// Batch alignment of complete streams.
pub fn coordinate(streams: TelemetryStreams) -> (Vec<TimeSlice>, CoordinatorStats) {
    let mut c = StreamCoordinator::new();
    c.push(streams);
    let mut out = c.drain();
    out.extend(c.finish());
    (out, c.stats())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group_sets(groups: &[AmbiguityGroup]) -> BTreeSet<BTreeSet<String>> {
        groups.iter().map(|g| g.members.iter().cloned().collect()).collect()
    }

    #[test]
    fn default_arm_has_fifteen_groups() {
        let g = analyze_ambiguity_groups(&ComponentGraph::arm(7));
        assert_eq!(g.len(), 15);
        let sets = group_sets(&g);
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        assert!(sets.contains(&s(&["J2_Angle_Cmd", "Shoulder Joint 2"])));
        assert!(sets.contains(&s(&["J6_Angle_Pos"])));
        assert!(sets.contains(&s(&["Kinematics", "EE_Pose_Sensor"])));
    }

    #[test]
    fn one_joint_graph_has_three_groups() {
        assert_eq!(analyze_ambiguity_groups(&ComponentGraph::arm(1)).len(), 3);
    }

    #[test]
    fn duplicate_encoders_give_twenty_two_groups() {
        let g = analyze_ambiguity_groups(&ComponentGraph::arm_with_duplicate_encoders(7));
        assert_eq!(g.len(), 22);
    }

    #[test]
    fn identify_cases() {
        let graph = ComponentGraph::arm(7);
        let groups = analyze_ambiguity_groups(&graph);
        let enc6 = graph.element_index("J6_Angle_Pos").unwrap();
        let sig = graph.signature(enc6);
        let Identification::Isolated { group } = identify(&sig, &groups) else { panic!() };
        assert_eq!(groups[group].members, vec!["J6_Angle_Pos".to_string()]);
        // superset of the encoder signature still isolates it
        let mut more = sig.clone();
        more.extend(graph.signature(graph.element_index("J6_Angle_Cmd").unwrap()));
        assert!(matches!(identify(&more, &groups), Identification::Isolated { group: g } if g == group));
        assert_eq!(identify(&BTreeSet::new(), &groups), Identification::NoMatch);
        // two unrelated actuator signatures of equal size tie
        let mut two = graph.signature(graph.element_index("J1_Angle_Cmd").unwrap());
        two.extend(graph.signature(graph.element_index("J2_Angle_Cmd").unwrap()));
        assert!(matches!(identify(&two, &groups), Identification::Ambiguous { .. }));
    }

    fn slice(t: f64, cmd: f64, pos: f64, chain: &DhChain) -> TimeSlice {
        let q = vec![pos; 7];
        TimeSlice {
            t,
            joint_commands: vec![cmd; 7],
            joint_velocities: vec![0.0; 7],
            ee_pose: forward_kinematics(chain, &q),
            joint_positions: q,
        }
    }

    #[test]
    fn static_nominal_slices_stay_healthy() {
        let chain = DhChain::wam7();
        let mut eng = MonsidEngine::new(ComponentGraph::arm(7), DetectionParams::default(), chain.clone()).unwrap();
        for k in 0..100 {
            let (h, ev) = eng.step(&slice(k as f64 * 0.02, 0.2, 0.2, &chain)).unwrap();
            assert!(h.states.iter().all(|s| *s == HealthState::Healthy));
            assert!(ev.is_empty());
        }
    }

    #[test]
    fn short_glitch_is_suspect_only() {
        let chain = DhChain::wam7();
        let mut eng = MonsidEngine::new(ComponentGraph::arm(7), DetectionParams::default(), chain.clone()).unwrap();
        let mut kinds = Vec::new();
        for k in 0..20 {
            let mut s = slice(k as f64 * 0.02, 0.2, 0.2, &chain);
            if (5..9).contains(&k) {
                s.ee_pose.position.x += 0.05;
            }
            let (h, ev) = eng.step(&s).unwrap();
            assert!(!h.is_faulty());
            kinds.extend(ev.into_iter().map(|e| e.event));
        }
        assert_eq!(kinds, vec![HealthEventKind::Suspect, HealthEventKind::Cleared]);
    }

    #[test]
    fn reset_clears_latched_fault() {
        let chain = DhChain::wam7();
        let mut eng = MonsidEngine::new(ComponentGraph::arm(7), DetectionParams::default(), chain.clone()).unwrap();
        for k in 0..10 {
            let mut s = slice(k as f64 * 0.02, 0.2, 0.2, &chain);
            s.ee_pose.position.x += 0.05;
            eng.step(&s).unwrap();
        }
        let d = eng.declaration().unwrap();
        assert_eq!(d.elements, vec!["Kinematics".to_string(), "EE_Pose_Sensor".to_string()]);
        eng.reset();
        assert!(eng.declaration().is_none());
        assert_eq!(eng.counters().slices_processed, 0);
    }

    #[test]
    fn rejects_duplicate_encoder_graph() {
        assert!(MonsidEngine::new(ComponentGraph::arm_with_duplicate_encoders(7), DetectionParams::default(), DhChain::wam7()).is_err());
    }
}
