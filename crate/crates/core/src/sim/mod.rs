//! Fixed-step closed-loop world: kinematic-bicycle ego, scripted scenario
//! actors, two-phase signal cycling, infraction detection, and the episode
//! rollout driver.

pub mod scripts;
pub mod trace;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geom::{OrientedRect, Polyline, Pose, Vec2};
use crate::lane_graph::{LaneGraph, LaneId};
use crate::route_gen::{route_polyline, Route, RouteRecord};

pub use scripts::{setup_scenario, ScenarioRuntime};
pub use trace::{Trace, TraceStep};

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Fixed integration step (s).
    pub dt: f64,
    pub v_max: f64,
    pub max_steer: f64,
    /// (max braking, max accel), m/s^2.
    pub accel_limits: (f64, f64),
    /// Ego half-length and half-width (m).
    pub ego_extent: (f64, f64),
    pub wheelbase: f64,
    /// Green duration per signal phase group (s); groups alternate.
    pub signal_green: f64,
    /// Lateral distance from the route beyond which the episode aborts (m).
    pub route_deviation_m: f64,
    /// Grace period off the drivable surface before an infraction (s).
    pub offroad_grace_s: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.1,
            v_max: 15.0,
            max_steer: 0.6,
            accel_limits: (-6.0, 3.0),
            ego_extent: (2.2, 0.95),
            wheelbase: 2.8,
            signal_green: 12.0,
            route_deviation_m: 15.0,
            offroad_grace_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Pose,
    pub v: f64,
    pub steer: f64,
    pub wheelbase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActorKind {
    Car,
    Cyclist,
    Pedestrian,
    Emergency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub kind: ActorKind,
    pub pose: Pose,
    pub v: f64,
    /// Index of the behavior script driving this actor.
    pub script: u32,
    /// Half-length, half-width (m).
    pub extent: (f64, f64),
    /// Inactive actors are parked off-world and ignored by collision checks.
    pub active: bool,
}

impl Actor {
    pub fn rect(&self) -> OrientedRect {
        OrientedRect {
            center: self.pose.position,
            heading: self.pose.heading,
            half_length: self.extent.0,
            half_width: self.extent.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalPhase {
    Red,
    Green,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub t: f64,
    pub ego: EgoState,
    pub actors: Vec<Actor>,
    /// Phase per graph signal, same order as `LaneGraph::signals`.
    pub signal_phases: Vec<SignalPhase>,
}

impl WorldState {
    pub fn ego_rect(&self, cfg: &SimConfig) -> OrientedRect {
        OrientedRect {
            center: self.ego.pose.position,
            heading: self.ego.pose.heading,
            half_length: cfg.ego_extent.0,
            half_width: cfg.ego_extent.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub steer: f64,
    pub accel: f64,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum InfractionKind {
    ActorCollision,
    LayoutCollision,
    OutsideLane,
    RedLight,
    StopSign,
    RouteDeviation,
    Timeout,
}

impl InfractionKind {
    /// Lateral-control (static) infractions.
    pub fn is_static(self) -> bool {
        matches!(
            self,
            InfractionKind::LayoutCollision | InfractionKind::OutsideLane
        )
    }
    /// Interaction (dynamic) infractions.
    pub fn is_dynamic(self) -> bool {
        matches!(
            self,
            InfractionKind::ActorCollision | InfractionKind::RedLight | InfractionKind::StopSign
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: InfractionKind,
    pub t: f64,
}

/// Signal phases at time `t`: groups alternate green, group 0 first.
pub fn signal_phases_at(graph: &LaneGraph, t: f64, cfg: &SimConfig) -> Vec<SignalPhase> {
    let green_group = ((t / cfg.signal_green).floor() as i64).rem_euclid(2) as u8;
    graph
        .signals
        .iter()
        .map(|s| {
            if s.phase_group == green_group {
                SignalPhase::Green
            } else {
                SignalPhase::Red
            }
        })
        .collect()
}

/// Advance ego only: forward-Euler kinematic bicycle with actuator clamps.
pub fn step_ego(ego: &mut EgoState, controls: Controls, cfg: &SimConfig) {
    let steer = controls.steer.clamp(-cfg.max_steer, cfg.max_steer);
    let accel = controls.accel.clamp(cfg.accel_limits.0, cfg.accel_limits.1);
    let dt = cfg.dt;
    let dir = Vec2::new(ego.pose.heading.cos(), ego.pose.heading.sin());
    ego.pose.position = ego.pose.position.add(dir.scale(ego.v * dt));
    ego.pose.heading += ego.v / ego.wheelbase * steer.tan() * dt;
    ego.v = (ego.v + accel * dt).clamp(0.0, cfg.v_max);
    ego.steer = steer;
}

/// One world step: ego, scripted actors, then signal phases.
pub fn step(
    world: &mut WorldState,
    controls: Controls,
    cfg: &SimConfig,
    graph: &LaneGraph,
    runtime: &mut ScenarioRuntime,
) {
    step_ego(&mut world.ego, controls, cfg);
    runtime.step(world, cfg);
    world.t += cfg.dt;
    world.signal_phases = signal_phases_at(graph, world.t, cfg);
}

/// A stop line the route crosses, plus which control guards it.
#[derive(Debug, Clone)]
struct GuardedLine {
    approach: LaneId,
    stop_s: f64,
    /// Index into graph.signals, or None for a stop sign.
    signal: Option<usize>,
    satisfied: bool,
    crossed: bool,
    prev_s: f64,
}

/// Stateful infraction detector for one episode.
pub struct InfractionChecker {
    route_path: Polyline,
    lines: Vec<GuardedLine>,
    colliding: BTreeSet<usize>,
    off_since: Option<f64>,
    off_flagged: bool,
    deviated: bool,
    max_route_s: f64,
    lane_boxes: Vec<(Vec2, Vec2, usize)>,
}

impl InfractionChecker {
    pub fn new(graph: &LaneGraph, route: &Route) -> InfractionChecker {
        let route_path = route_polyline(graph, route);
        let route_lanes: BTreeSet<LaneId> =
            route.waypoints.iter().map(|&(l, _)| l).collect();
        let mut lines = Vec::new();
        for &lane in &route_lanes {
            let signal = graph
                .signals
                .iter()
                .position(|s| s.approach == lane)
                .map(Some);
            let stop = graph.stop_signs.iter().any(|s| s.approach == lane);
            if let Some(sig) = signal {
                lines.push(GuardedLine {
                    approach: lane,
                    stop_s: graph.lane(lane).length(),
                    signal: sig,
                    satisfied: false,
                    crossed: false,
                    prev_s: 0.0,
                });
            } else if stop {
                lines.push(GuardedLine {
                    approach: lane,
                    stop_s: graph.lane(lane).length(),
                    signal: None,
                    satisfied: false,
                    crossed: false,
                    prev_s: 0.0,
                });
            }
        }
        let lane_boxes = graph
            .lanes
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
                let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
                for p in &l.centerline.points {
                    lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
                    hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
                }
                let m = l.width / 2.0 + 0.5;
                (Vec2::new(lo.x - m, lo.y - m), Vec2::new(hi.x + m, hi.y + m), i)
            })
            .collect();
        InfractionChecker {
            route_path,
            lines,
            colliding: BTreeSet::new(),
            off_since: None,
            off_flagged: false,
            deviated: false,
            max_route_s: 0.0,
            lane_boxes,
        }
    }

    pub fn route_length(&self) -> f64 {
        self.route_path.length()
    }

    pub fn route_path(&self) -> &Polyline {
        &self.route_path
    }

    /// Fraction of route arc length covered so far.
    pub fn completion(&self) -> f64 {
        (self.max_route_s / self.route_path.length()).clamp(0.0, 1.0)
    }

    pub fn reached_end(&self) -> bool {
        self.route_path.length() - self.max_route_s < 2.0
    }

    fn on_drivable(&self, graph: &LaneGraph, p: Vec2) -> bool {
        for &(lo, hi, idx) in &self.lane_boxes {
            if p.x < lo.x || p.x > hi.x || p.y < lo.y || p.y > hi.y {
                continue;
            }
            let lane = &graph.lanes[idx];
            let (_, dist, _) = lane.centerline.project_point(p);
            if dist <= lane.width / 2.0 + 0.3 {
                return true;
            }
        }
        false
    }

    /// Inspect one post-step world state and emit any new infractions.
    pub fn step(
        &mut self,
        world: &WorldState,
        graph: &LaneGraph,
        cfg: &SimConfig,
    ) -> Vec<InfractionEvent> {
        let mut events = Vec::new();
        let t = world.t;
        let ego_rect = world.ego_rect(cfg);
        let p = world.ego.pose.position;

        // Route progress, monotone.
        let (s, dist, _) = self.route_path.project_point(p);
        if dist <= cfg.route_deviation_m && s > self.max_route_s {
            self.max_route_s = s;
        }
        if dist > cfg.route_deviation_m && !self.deviated {
            self.deviated = true;
            events.push(InfractionEvent {
                kind: InfractionKind::RouteDeviation,
                t,
            });
        }

        // Collisions, debounced per actor contact episode.
        for (i, actor) in world.actors.iter().enumerate() {
            if !actor.active {
                self.colliding.remove(&i);
                continue;
            }
            if ego_rect.overlaps(&actor.rect()) {
                if self.colliding.insert(i) {
                    events.push(InfractionEvent {
                        kind: InfractionKind::ActorCollision,
                        t,
                    });
                }
            } else {
                self.colliding.remove(&i);
            }
        }

        // Off drivable surface with a grace period, re-armed on re-entry.
        if self.on_drivable(graph, p) {
            self.off_since = None;
            self.off_flagged = false;
        } else {
            let since = *self.off_since.get_or_insert(t);
            if !self.off_flagged && t - since > cfg.offroad_grace_s {
                self.off_flagged = true;
                events.push(InfractionEvent {
                    kind: InfractionKind::OutsideLane,
                    t,
                });
            }
        }

        // Guarded stop lines along the route.
        for line in &mut self.lines {
            if line.crossed {
                continue;
            }
            let lane = graph.lane(line.approach);
            let (ls, ldist, _) = lane.centerline.project_point(p);
            if ldist > lane.width {
                continue;
            }
            match line.signal {
                None => {
                    // Stop sign: a full stop within 5 m before the line.
                    if ls >= line.stop_s - 5.0 && ls <= line.stop_s && world.ego.v < 0.1 {
                        line.satisfied = true;
                    }
                    if line.prev_s < line.stop_s && ls >= line.stop_s {
                        line.crossed = true;
                        if !line.satisfied {
                            events.push(InfractionEvent {
                                kind: InfractionKind::StopSign,
                                t,
                            });
                        }
                    }
                }
                Some(sig) => {
                    if line.prev_s < line.stop_s && ls >= line.stop_s {
                        line.crossed = true;
                        if world.signal_phases[sig] == SignalPhase::Red {
                            events.push(InfractionEvent {
                                kind: InfractionKind::RedLight,
                                t,
                            });
                        }
                    }
                }
            }
            line.prev_s = ls;
        }

        events
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub completion: f64,
    pub infractions: Vec<InfractionEvent>,
    pub timed_out: bool,
    pub agent_error: Option<String>,
    #[serde(skip)]
    pub trace: Trace,
}

impl EpisodeResult {
    pub fn count(&self, kind: InfractionKind) -> usize {
        self.infractions.iter().filter(|e| e.kind == kind).count()
    }
}

/// Episode time budget: route length at 2 m/s plus slack.
pub fn time_budget(route_length: f64) -> f64 {
    route_length / 2.0 + 20.0
}

/// Deterministic closed-loop rollout of one scenario. The agent maps the
/// (privileged) world state to controls; collisions and route deviation are
/// terminal, timeouts end the episode with an event.
pub fn run_scenario(
    graph: &LaneGraph,
    record: &RouteRecord,
    agent: &mut dyn FnMut(&WorldState) -> crate::Result<Controls>,
    cfg: &SimConfig,
) -> EpisodeResult {
    run_scenario_offset(graph, record, agent, cfg, 0.0)
}

/// [`run_scenario`] with the ego nudged laterally (to its left) at spawn;
/// used by offset-recovery probes.
pub fn run_scenario_offset(
    graph: &LaneGraph,
    record: &RouteRecord,
    agent: &mut dyn FnMut(&WorldState) -> crate::Result<Controls>,
    cfg: &SimConfig,
    lateral_offset: f64,
) -> EpisodeResult {
    let (mut world, mut runtime) = setup_scenario(graph, record, cfg);
    let h = world.ego.pose.heading;
    let left = Vec2::new(-h.sin(), h.cos());
    world.ego.pose.position = world.ego.pose.position.add(left.scale(lateral_offset));
    let mut checker = InfractionChecker::new(graph, &record.route);
    let budget = time_budget(checker.route_length());
    let mut infractions = Vec::new();
    let mut trace = Trace::default();
    let mut timed_out = false;
    let mut agent_error = None;

    loop {
        if world.t >= budget {
            timed_out = true;
            infractions.push(InfractionEvent {
                kind: InfractionKind::Timeout,
                t: world.t,
            });
            break;
        }
        let controls = match agent(&world) {
            Ok(c) => c,
            Err(e) => {
                agent_error = Some(e.to_string());
                break;
            }
        };
        step(&mut world, controls, cfg, graph, &mut runtime);
        let events = checker.step(&world, graph, cfg);
        let terminal = events.iter().any(|e| {
            matches!(
                e.kind,
                InfractionKind::ActorCollision
                    | InfractionKind::LayoutCollision
                    | InfractionKind::RouteDeviation
            )
        });
        infractions.extend(events.iter().copied());
        trace.steps.push(TraceStep {
            t: world.t,
            ego: world.ego,
            actors: world.actors.clone(),
            signal_phases: world.signal_phases.clone(),
            controls,
            events,
        });
        if terminal || checker.reached_end() {
            break;
        }
    }

    EpisodeResult {
        // Reaching the goal tolerance counts as full completion.
        completion: if checker.reached_end() {
            1.0
        } else {
            checker.completion()
        },
        infractions,
        timed_out,
        agent_error,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ego_at(x: f64, y: f64, heading: f64, v: f64) -> EgoState {
        EgoState {
            pose: Pose::new(x, y, heading),
            v,
            steer: 0.0,
            wheelbase: 2.8,
        }
    }

    #[test]
    fn straight_integration_exact() {
        let cfg = SimConfig::default();
        let mut ego = ego_at(0.0, 0.0, 0.0, 10.0);
        step_ego(&mut ego, Controls { steer: 0.0, accel: 0.0 }, &cfg);
        assert_eq!(ego.pose.position, Vec2::new(1.0, 0.0));
        assert_eq!(ego.pose.heading, 0.0);
        assert_eq!(ego.v, 10.0);
    }

    #[test]
    fn no_reverse_under_braking() {
        let cfg = SimConfig::default();
        let mut ego = ego_at(0.0, 0.0, 0.0, 0.0);
        step_ego(&mut ego, Controls { steer: 0.0, accel: -5.0 }, &cfg);
        assert_eq!(ego.v, 0.0);
        assert_eq!(ego.pose.position, Vec2::new(0.0, 0.0));
    }

    #[test]
    fn circle_test_within_one_percent() {
        // Constant steer delta and speed trace a circle of radius
        // L / tan(delta); after one period the ego is back within 1% of R.
        let cfg = SimConfig::default();
        let v = 3.0;
        let mut ego = ego_at(0.0, 0.0, 0.0, v);
        // Steer chosen so one revolution is exactly `steps` timesteps.
        let steps = 190usize;
        let omega = 2.0 * std::f64::consts::PI / (steps as f64 * cfg.dt);
        let delta = (omega * ego.wheelbase / v).atan();
        let radius = ego.wheelbase / delta.tan();
        let start = ego.pose.position;
        for _ in 0..steps {
            step_ego(&mut ego, Controls { steer: delta, accel: 0.0 }, &cfg);
        }
        let err = ego.pose.position.dist(start);
        assert!(err <= 0.01 * radius, "closure error {err:.3} m, R={radius:.2}");
    }

    #[test]
    fn actuator_clamps_apply() {
        let cfg = SimConfig::default();
        let mut ego = ego_at(0.0, 0.0, 0.0, 5.0);
        step_ego(&mut ego, Controls { steer: 2.0, accel: 9.0 }, &cfg);
        assert_eq!(ego.steer, cfg.max_steer);
        assert!(ego.v <= 5.0 + cfg.accel_limits.1 * cfg.dt + 1e-12);
    }

    #[test]
    fn collision_symmetry() {
        let a = OrientedRect {
            center: Vec2::new(0.0, 0.0),
            heading: 0.3,
            half_length: 2.0,
            half_width: 1.0,
        };
        let b = OrientedRect {
            center: Vec2::new(2.5, 0.5),
            heading: -0.8,
            half_length: 2.0,
            half_width: 1.0,
        };
        assert_eq!(a.overlaps(&b), b.overlaps(&a));
        let c = OrientedRect {
            center: Vec2::new(50.0, 0.0),
            ..b
        };
        assert!(!a.overlaps(&c) && !c.overlaps(&a));
    }

    #[test]
    fn infraction_partition() {
        use InfractionKind::*;
        for k in [
            ActorCollision,
            LayoutCollision,
            OutsideLane,
            RedLight,
            StopSign,
            RouteDeviation,
            Timeout,
        ] {
            assert!(!(k.is_static() && k.is_dynamic()));
        }
        assert!(LayoutCollision.is_static() && OutsideLane.is_static());
        assert!(ActorCollision.is_dynamic() && RedLight.is_dynamic() && StopSign.is_dynamic());
        assert!(!RouteDeviation.is_static() && !RouteDeviation.is_dynamic());
        assert!(!Timeout.is_static() && !Timeout.is_dynamic());
    }

    #[test]
    fn signal_cycle_alternates() {
        use crate::lane_graph::{build_town, ControlPattern, TownSpec};
        let spec = TownSpec {
            intersection_control: ControlPattern::AllSignalized,
            highway_loop: false,
            ..TownSpec::default_town()
        };
        let g = build_town(&spec, 1).unwrap();
        let cfg = SimConfig::default();
        let p0 = signal_phases_at(&g, 1.0, &cfg);
        let p1 = signal_phases_at(&g, 1.0 + cfg.signal_green, &cfg);
        for (i, s) in g.signals.iter().enumerate() {
            let expect0 = if s.phase_group == 0 {
                SignalPhase::Green
            } else {
                SignalPhase::Red
            };
            assert_eq!(p0[i], expect0);
            assert_ne!(p0[i], p1[i]);
        }
    }
}
