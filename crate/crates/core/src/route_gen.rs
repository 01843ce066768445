//! Scenario route generation: coarse-to-fine trigger point selection on the
//! lane graph, bidirectional route planning around a trigger, scenario
//! parameter sampling, and cumulative data-scaling splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lane_graph::{
    CoarseClass, Intersection, LaneGraph, LaneId, LaneKind, Maneuver, TriggerPoint,
};
use crate::rng;

pub const FORMAT_NAME: &str = "microdrive-routes";
pub const FORMAT_VERSION: u32 = 1;

/// Retry budget per requested route before the route is given up.
pub const RETRY_BUDGET: usize = 50;

/// Default sampling interval (m) for the distance before and after the
/// trigger, independently sampled.
pub const DEFAULT_DISTANCE_INTERVAL: (f64, f64) = (40.0, 120.0);

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum ScenarioName {
    SignalizedJunctionLeftTurn,
    VehicleOpensDoor,
    Accident,
    PedestrianCrossing,
    YieldToEmergencyVehicle,
    ParkingExit,
    HazardAtSide,
    InvadingTurn,
    StopSignCrossTraffic,
    MergeIntoFlow,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 10] = [
        ScenarioName::SignalizedJunctionLeftTurn,
        ScenarioName::VehicleOpensDoor,
        ScenarioName::Accident,
        ScenarioName::PedestrianCrossing,
        ScenarioName::YieldToEmergencyVehicle,
        ScenarioName::ParkingExit,
        ScenarioName::HazardAtSide,
        ScenarioName::InvadingTurn,
        ScenarioName::StopSignCrossTraffic,
        ScenarioName::MergeIntoFlow,
    ];
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .iter()
            .copied()
            .find(|n| format!("{n:?}") == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario type {s:?}")))
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Skill {
    Merging,
    Overtaking,
    EmergencyBrake,
    GiveWay,
    TrafficSign,
}

impl Skill {
    pub const ALL: [Skill; 5] = [
        Skill::Merging,
        Skill::Overtaking,
        Skill::EmergencyBrake,
        Skill::GiveWay,
        Skill::TrafficSign,
    ];
}

/// Static definition of one scenario type: its coarse location class, the
/// fine selection predicates, and the driving skill it exercises.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioType {
    pub name: ScenarioName,
    pub coarse_class: CoarseClass,
    pub predicates: &'static [&'static str],
    pub skill: Skill,
}

impl ScenarioType {
    pub fn get(name: ScenarioName) -> ScenarioType {
        use CoarseClass::*;
        use ScenarioName::*;
        let (coarse_class, predicates, skill): (_, &'static [&'static str], _) = match name {
            SignalizedJunctionLeftTurn => (
                Intersection,
                &["signalized-approach", "left-turn-exit"][..],
                Skill::TrafficSign,
            ),
            StopSignCrossTraffic => (
                Intersection,
                &["stop-sign-approach", "straight-exit"][..],
                Skill::TrafficSign,
            ),
            PedestrianCrossing => (
                Intersection,
                &["crossing-approach"][..],
                Skill::EmergencyBrake,
            ),
            InvadingTurn => (
                Intersection,
                &["straight-exit", "opposing-left-turn"][..],
                Skill::GiveWay,
            ),
            VehicleOpensDoor => (
                NoIntersection,
                &["right-parking", "opposing-left-neighbor"][..],
                Skill::Overtaking,
            ),
            Accident => (
                NoIntersection,
                &["right-shoulder", "left-same-direction"][..],
                Skill::Overtaking,
            ),
            HazardAtSide => (NoIntersection, &["right-bike"][..], Skill::Overtaking),
            ParkingExit => (NoIntersection, &["right-parking"][..], Skill::Merging),
            YieldToEmergencyVehicle => (
                NoIntersection,
                &["same-direction-neighbor"][..],
                Skill::GiveWay,
            ),
            MergeIntoFlow => (HighwayRamp, &["ramp"][..], Skill::Merging),
        };
        ScenarioType {
            name,
            coarse_class,
            predicates,
            skill,
        }
    }
}

/// Per-waypoint navigation command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    Follow,
    Left,
    Right,
    Straight,
    ChangeLaneLeft,
    ChangeLaneRight,
}

impl Command {
    pub fn index(self) -> usize {
        match self {
            Command::Follow => 0,
            Command::Left => 1,
            Command::Right => 2,
            Command::Straight => 3,
            Command::ChangeLaneLeft => 4,
            Command::ChangeLaneRight => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub start: (LaneId, f64),
    pub trigger: TriggerPoint,
    pub end: (LaneId, f64),
    /// Ordered (lane, s) pairs forming a connected walk; lateral neighbor
    /// steps are allowed only under a lane-change command.
    pub waypoints: Vec<(LaneId, f64)>,
    pub commands: Vec<Command>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: ScenarioName,
    pub trigger: TriggerPoint,
    pub parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub id: u32,
    pub route: Route,
    pub spec: ScenarioSpec,
}

impl RouteRecord {
    pub fn skill(&self) -> Skill {
        ScenarioType::get(self.spec.scenario).skill
    }
}

/// Cumulative route-id splits, smallest first; each split is a subset of the
/// next and scenario types stay proportionally represented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub splits: Vec<Vec<u32>>,
}

impl SplitSet {
    /// Check the subset, ratio, and per-type proportionality invariants.
    pub fn validate(&self, records: &[RouteRecord]) -> Result<()> {
        let by_id: BTreeMap<u32, ScenarioName> =
            records.iter().map(|r| (r.id, r.spec.scenario)).collect();
        for w in self.splits.windows(2) {
            let small: BTreeSet<u32> = w[0].iter().copied().collect();
            let large: BTreeSet<u32> = w[1].iter().copied().collect();
            if !small.is_subset(&large) || small.len() >= large.len() {
                return Err(Error::Contract(
                    "split is not a strict subset of the next".into(),
                ));
            }
            let ratio = large.len() as f64 / small.len() as f64;
            if !(1.8..=2.2).contains(&ratio) {
                return Err(Error::Contract(format!(
                    "split size ratio {ratio:.2} outside [1.8, 2.2]"
                )));
            }
            // Per-type proportions match across consecutive splits within
            // one route.
            let count = |ids: &BTreeSet<u32>, ty: ScenarioName| {
                ids.iter().filter(|i| by_id.get(i) == Some(&ty)).count() as f64
            };
            for ty in ScenarioName::ALL {
                let c_large = count(&large, ty);
                if c_large == 0.0 {
                    continue;
                }
                let expected = c_large * small.len() as f64 / large.len() as f64;
                if (count(&small, ty) - expected).abs() > 1.0 {
                    return Err(Error::Contract(format!(
                        "type {ty} over/under-represented in a split"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fine selection predicate evaluation for one candidate approach/road lane.
fn predicate_holds(graph: &LaneGraph, lane: LaneId, pred: &str) -> bool {
    let l = graph.lane(lane);
    let approach_intersection = || -> Option<&Intersection> {
        l.successors
            .iter()
            .find_map(|&s| graph.lane(s).intersection)
            .map(|iid| graph.intersection(iid))
    };
    let connector_with = |m: Maneuver| -> bool {
        l.successors.iter().any(|&s| {
            let succ = graph.lane(s);
            succ.intersection.is_some() && succ.maneuver == Some(m)
        })
    };
    match pred {
        "signalized-approach" => approach_intersection().is_some_and(|i| i.signalized),
        "stop-sign-approach" => approach_intersection().is_some_and(|i| i.has_stop_sign),
        "crossing-approach" => approach_intersection().is_some_and(|i| i.has_crossing),
        "left-turn-exit" => connector_with(Maneuver::Left),
        "straight-exit" => connector_with(Maneuver::Straight),
        "opposing-left-turn" => approach_intersection().is_some_and(|inter| {
            inter.incoming.iter().any(|&other| {
                other != lane
                    && opposing(graph, lane, other)
                    && graph.lane(other).successors.iter().any(|&s| {
                        let succ = graph.lane(s);
                        succ.intersection == Some(inter.id) && succ.maneuver == Some(Maneuver::Left)
                    })
            })
        }),
        "right-parking" => {
            l.right
                .is_some_and(|r| r.same_direction && graph.lane(r.id).kind == LaneKind::Parking)
        }
        "right-shoulder" => {
            l.right
                .is_some_and(|r| r.same_direction && graph.lane(r.id).kind == LaneKind::Shoulder)
        }
        "right-bike" => {
            l.right
                .is_some_and(|r| r.same_direction && graph.lane(r.id).kind == LaneKind::Bike)
        }
        "opposing-left-neighbor" => l.left.is_some_and(|n| !n.same_direction),
        "left-same-direction" => l
            .left
            .is_some_and(|n| n.same_direction && graph.lane(n.id).kind == LaneKind::Driving),
        "same-direction-neighbor" => {
            let ok = |n: Option<crate::lane_graph::NeighborRef>| {
                n.is_some_and(|n| n.same_direction && graph.lane(n.id).kind == LaneKind::Driving)
            };
            ok(l.left) || ok(l.right)
        }
        "ramp" => l.is_ramp,
        other => panic!("contract error: unknown predicate {other:?}"),
    }
}

/// Rough anti-parallelism of two lanes' end tangents.
fn opposing(graph: &LaneGraph, a: LaneId, b: LaneId) -> bool {
    let dir = |id: LaneId| {
        let pts = &graph.lane(id).centerline.points;
        let n = pts.len();
        pts[n - 1].sub(pts[n - 2]).normalized()
    };
    dir(a).dot(dir(b)) < -0.5
}

/// Exhaustive coarse-to-fine candidate enumeration. Candidates are whole
/// qualifying lanes; the trigger sits at a canonical position on each.
pub fn select_trigger_points(graph: &LaneGraph, ty: &ScenarioType) -> Vec<TriggerPoint> {
    let mut out = Vec::new();
    for lane in &graph.lanes {
        if lane.kind != LaneKind::Driving || lane.intersection.is_some() {
            continue;
        }
        let s = match ty.coarse_class {
            // Inside the approach window, shortly before the entry.
            CoarseClass::Intersection => (lane.length() - 15.0).max(lane.length() * 0.5),
            _ => lane.length() * 0.5,
        };
        if graph.classify_location(lane.id, s) != ty.coarse_class {
            continue;
        }
        if ty
            .predicates
            .iter()
            .all(|p| predicate_holds(graph, lane.id, p))
        {
            out.push(TriggerPoint {
                lane: lane.id,
                s,
                coarse_class: ty.coarse_class,
            });
        }
    }
    out
}

/// Planning options for one route: distance intervals around the trigger and
/// the maneuver demanded at the trigger's intersection (if any).
#[derive(Debug, Clone)]
pub struct RoutePlanOptions {
    pub before: (f64, f64),
    pub after: (f64, f64),
    pub maneuver: Option<Maneuver>,
    /// Whether the route may traverse the trigger's own intersection.
    pub cross_intersection: bool,
}

impl RoutePlanOptions {
    pub fn for_type(name: ScenarioName) -> RoutePlanOptions {
        let d = DEFAULT_DISTANCE_INTERVAL;
        let (before, maneuver, cross) = match name {
            ScenarioName::SignalizedJunctionLeftTurn => (d, Some(Maneuver::Left), true),
            ScenarioName::StopSignCrossTraffic | ScenarioName::InvadingTurn => {
                (d, Some(Maneuver::Straight), true)
            }
            ScenarioName::PedestrianCrossing => (d, None, true),
            // The ego begins in the parking pocket just behind the trigger.
            ScenarioName::ParkingExit => ((15.0, 40.0), None, false),
            _ => (d, None, false),
        };
        RoutePlanOptions {
            before,
            after: d,
            maneuver,
            cross_intersection: cross,
        }
    }
}

/// One directed step chain from a point, staying clear of intersections other
/// than an optionally allowed one.
struct Walk {
    /// Lanes in travel order, starting with the trigger's lane.
    lanes: Vec<LaneId>,
    /// Total distance covered from the anchor point to the end of the chain.
    reachable: f64,
    /// Distance at which the allowed intersection's connecting lane was
    /// fully traversed, if it was.
    intersection_cleared_at: Option<f64>,
}

fn walk_forward(
    graph: &LaneGraph,
    from: (LaneId, f64),
    limit: f64,
    allowed: Option<crate::lane_graph::IntersectionId>,
    maneuver: Option<Maneuver>,
    rng: &mut rng::Rng,
) -> Walk {
    let mut lanes = vec![from.0];
    let mut covered = graph.lane(from.0).length() - from.1;
    let mut cleared = None;
    let mut allowed = allowed;
    let mut cur = from.0;
    while covered < limit {
        let next: Vec<LaneId> = graph
            .lane(cur)
            .successors
            .iter()
            .copied()
            .filter(|&s| {
                let succ = graph.lane(s);
                if succ.kind != LaneKind::Driving {
                    return false;
                }
                match succ.intersection {
                    None => true,
                    Some(i) => {
                        Some(i) == allowed
                            && (maneuver.is_none() || succ.maneuver == maneuver)
                    }
                }
            })
            .collect();
        if next.is_empty() {
            break;
        }
        let pick = next[rng.gen_range(0..next.len())];
        if graph.lane(pick).intersection.is_some() {
            allowed = None; // one traversal only
            cleared = Some(covered + graph.lane(pick).length());
        }
        lanes.push(pick);
        covered += graph.lane(pick).length();
        cur = pick;
    }
    Walk {
        lanes,
        reachable: covered.min(limit),
        intersection_cleared_at: cleared,
    }
}

fn walk_backward(
    graph: &LaneGraph,
    from: (LaneId, f64),
    limit: f64,
    rng: &mut rng::Rng,
) -> Walk {
    let mut lanes = vec![from.0];
    let mut covered = from.1;
    let mut cur = from.0;
    while covered < limit {
        let prev: Vec<LaneId> = graph
            .lane(cur)
            .predecessors
            .iter()
            .copied()
            .filter(|&p| {
                let pred = graph.lane(p);
                pred.kind == LaneKind::Driving && pred.intersection.is_none()
            })
            .collect();
        if prev.is_empty() {
            break;
        }
        let pick = prev[rng.gen_range(0..prev.len())];
        lanes.push(pick);
        covered += graph.lane(pick).length();
        cur = pick;
    }
    Walk {
        lanes,
        reachable: covered.min(limit),
        intersection_cleared_at: None,
    }
}

fn sample_interval(rng: &mut rng::Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Plan a route around a trigger by independent backward and forward walks.
/// Distances are sampled from the option intervals, clamped to what the
/// topology allows without touching a second intersection.
pub fn plan_route(
    graph: &LaneGraph,
    trigger: TriggerPoint,
    opts: &RoutePlanOptions,
    rng: &mut rng::Rng,
) -> Result<Route> {
    let allowed = if opts.cross_intersection {
        graph
            .lane(trigger.lane)
            .successors
            .iter()
            .find_map(|&s| graph.lane(s).intersection)
    } else {
        None
    };
    if opts.cross_intersection && allowed.is_none() {
        return Err(Error::Generation(
            "trigger lane does not reach an intersection".into(),
        ));
    }

    let back = walk_backward(graph, (trigger.lane, trigger.s), opts.before.1, rng);
    if back.reachable < opts.before.0 {
        return Err(Error::Generation(format!(
            "only {:.1} m available behind trigger",
            back.reachable
        )));
    }
    let d_back = sample_interval(rng, opts.before.0, back.reachable);

    let fwd = walk_forward(
        graph,
        (trigger.lane, trigger.s),
        opts.after.1,
        allowed,
        opts.maneuver,
        rng,
    );
    // An intersection-crossing route must clear the connecting lane with a
    // small margin before it may end.
    let lo_fwd = match (opts.cross_intersection, fwd.intersection_cleared_at) {
        (true, Some(c)) => opts.after.0.max(c + 5.0),
        (true, None) => {
            return Err(Error::Generation(
                "forward walk never crossed the trigger intersection".into(),
            ))
        }
        (false, _) => opts.after.0,
    };
    if fwd.reachable < lo_fwd {
        return Err(Error::Generation(format!(
            "only {:.1} m available ahead of trigger",
            fwd.reachable
        )));
    }
    let d_fwd = sample_interval(rng, lo_fwd, fwd.reachable);

    // Locate start: walk the backward chain until d_back is consumed.
    let mut remaining = d_back - trigger.s;
    let mut start = (trigger.lane, trigger.s - d_back);
    let mut back_lanes_used = vec![];
    if remaining > 0.0 {
        for &lane in &back.lanes[1..] {
            back_lanes_used.push(lane);
            let len = graph.lane(lane).length();
            if remaining <= len {
                start = (lane, len - remaining);
                break;
            }
            remaining -= len;
        }
    }

    // Locate end on the forward chain.
    let mut end = (trigger.lane, trigger.s + d_fwd);
    let mut fwd_lanes_used = vec![];
    let mut remaining = d_fwd - (graph.lane(trigger.lane).length() - trigger.s);
    if remaining > 0.0 {
        for &lane in &fwd.lanes[1..] {
            fwd_lanes_used.push(lane);
            let len = graph.lane(lane).length();
            if remaining <= len {
                end = (lane, remaining);
                break;
            }
            remaining -= len;
        }
    }

    // Assemble waypoints: start, one per lane boundary, end.
    let mut chain: Vec<LaneId> = back_lanes_used.into_iter().rev().collect();
    chain.push(trigger.lane);
    chain.extend(fwd_lanes_used);
    let mut waypoints = vec![start];
    let mut commands = vec![Command::Follow];
    for &lane in chain.iter().skip_while(|&&l| l != start.0).skip(1) {
        waypoints.push((lane, 0.0));
        commands.push(match graph.lane(lane).maneuver {
            Some(Maneuver::Left) => Command::Left,
            Some(Maneuver::Right) => Command::Right,
            Some(Maneuver::Straight) => Command::Straight,
            None => Command::Follow,
        });
    }
    if waypoints.last().map(|w| w.0) == Some(end.0) && waypoints.len() > 1 {
        // End waypoint replaces the bare entry of its lane when distinct.
        if end.1 > 0.0 {
            waypoints.push(end);
            commands.push(Command::Follow);
        }
    } else {
        waypoints.push(end);
        commands.push(Command::Follow);
    }

    Ok(Route {
        start,
        trigger,
        end,
        waypoints,
        commands,
    })
}

/// Declared sampling intervals per scenario type, name -> [lo, hi].
pub fn parameter_intervals(name: ScenarioName) -> &'static [(&'static str, f64, f64)] {
    use ScenarioName::*;
    match name {
        SignalizedJunctionLeftTurn => &[("oncoming_speed", 5.0, 8.0), ("flow_gap", 18.0, 30.0)],
        VehicleOpensDoor => &[("spawn_ahead", 20.0, 35.0), ("door_width", 0.8, 1.2)],
        Accident => &[("spawn_ahead", 25.0, 45.0), ("lane_overlap", 0.4, 0.8)],
        PedestrianCrossing => &[("walk_speed", 1.2, 2.0), ("trigger_distance", 12.0, 20.0)],
        YieldToEmergencyVehicle => &[("approach_delta", 6.0, 10.0), ("start_behind", 40.0, 60.0)],
        ParkingExit => &[("exit_speed", 2.0, 4.0)],
        HazardAtSide => &[("hazard_speed", 3.0, 5.0), ("spawn_ahead", 20.0, 35.0)],
        InvadingTurn => &[("invader_speed", 4.0, 7.0), ("cut_in_distance", 15.0, 25.0)],
        StopSignCrossTraffic => &[("cross_speed", 5.0, 8.0), ("cross_gap", 10.0, 18.0)],
        MergeIntoFlow => &[("flow_gap", 8.0, 20.0), ("flow_speed", 8.0, 11.0)],
    }
}

/// Sample all declared parameters for a scenario uniformly from their
/// intervals.
pub fn instantiate_scenario(
    route: &Route,
    ty: &ScenarioType,
    rng: &mut rng::Rng,
) -> ScenarioSpec {
    assert_eq!(
        route.trigger.coarse_class, ty.coarse_class,
        "contract error: trigger class does not match scenario type"
    );
    let mut parameters = BTreeMap::new();
    for &(name, lo, hi) in parameter_intervals(ty.name) {
        parameters.insert(name.to_string(), sample_interval(rng, lo, hi));
    }
    ScenarioSpec {
        scenario: ty.name,
        trigger: route.trigger,
        parameters,
    }
}

/// Move a ParkingExit route's start into the adjacent parking pocket; the
/// first command becomes a merge back into the driving lane.
fn apply_parking_start(graph: &LaneGraph, route: &mut Route) {
    let lane = graph.lane(route.start.0);
    let parking = lane
        .right
        .filter(|r| r.same_direction && graph.lane(r.id).kind == LaneKind::Parking);
    if let Some(p) = parking {
        let s = route.start.1.min(graph.lane(p.id).length());
        route.start = (p.id, s);
        route.waypoints[0] = (p.id, s);
        route.commands[0] = Command::ChangeLaneLeft;
    }
}

/// Generate `count` unique scenario routes spread uniformly over `types`.
pub fn generate_routes(
    graph: &LaneGraph,
    types: &[ScenarioName],
    count: usize,
    seed: u64,
) -> Result<Vec<RouteRecord>> {
    if types.is_empty() {
        return Err(Error::Config("no scenario types requested".into()));
    }
    let mut candidates: BTreeMap<ScenarioName, Vec<TriggerPoint>> = BTreeMap::new();
    for &name in types {
        let ty = ScenarioType::get(name);
        let c = select_trigger_points(graph, &ty);
        if c.is_empty() {
            return Err(Error::Generation(format!(
                "no trigger candidates for {name} in this town"
            )));
        }
        candidates.insert(name, c);
    }
    // Even per-type allocation; remainder goes to the first types in order.
    let base = count / types.len();
    let extra = count % types.len();

    let mut records = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut global_idx = 0u64;
    for (ti, &name) in types.iter().enumerate() {
        let ty = ScenarioType::get(name);
        let opts = RoutePlanOptions::for_type(name);
        let want = base + usize::from(ti < extra);
        let cands = &candidates[&name];
        for _ in 0..want {
            let mut rng = rng::substream(seed, "route", global_idx);
            global_idx += 1;
            let mut made = false;
            for _attempt in 0..RETRY_BUDGET {
                let trigger = cands[rng.gen_range(0..cands.len())];
                let mut route = match plan_route(graph, trigger, &opts, &mut rng) {
                    Ok(r) => r,
                    Err(Error::Generation(_)) => continue,
                    Err(e) => return Err(e),
                };
                if name == ScenarioName::ParkingExit {
                    apply_parking_start(graph, &mut route);
                }
                let spec = instantiate_scenario(&route, &ty, &mut rng);
                let key = serde_json::to_string(&(
                    &route.trigger,
                    &route.start,
                    &route.end,
                    &spec.parameters,
                ))?;
                if !seen.insert(key) {
                    continue;
                }
                records.push(RouteRecord {
                    id: records.len() as u32,
                    route,
                    spec,
                });
                made = true;
                break;
            }
            if !made {
                return Err(Error::Generation(format!(
                    "exhausted {RETRY_BUDGET} attempts generating a {name} route"
                )));
            }
        }
    }
    Ok(records)
}

/// Build `k` cumulative splits, smallest first, each roughly doubling and
/// preserving the per-type distribution.
pub fn make_splits(records: &[RouteRecord], k: usize, seed: u64) -> Result<SplitSet> {
    let n_types = records
        .iter()
        .map(|r| r.spec.scenario)
        .collect::<BTreeSet<_>>()
        .len();
    if k < 2 {
        return Err(Error::Config("need at least 2 splits".into()));
    }
    if records.len() < (1 << (k - 1)) * n_types {
        return Err(Error::Config(format!(
            "{} routes cannot fill {k} doubling splits over {n_types} types",
            records.len()
        )));
    }
    let mut rng = rng::stream(seed, "splits");
    let mut by_type: BTreeMap<ScenarioName, Vec<u32>> = BTreeMap::new();
    for r in records {
        by_type.entry(r.spec.scenario).or_default().push(r.id);
    }
    for ids in by_type.values_mut() {
        // Fisher-Yates so prefix membership is unbiased.
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
    }
    let mut splits = Vec::with_capacity(k);
    for j in 0..k {
        let mut ids = Vec::new();
        for per_type in by_type.values() {
            let c = per_type.len();
            // Halve from the full set downwards, rounding up so every type
            // keeps at least one route in the smallest split.
            let take = (c + (1 << (k - 1 - j)) - 1) >> (k - 1 - j);
            ids.extend(per_type.iter().take(take).copied());
        }
        ids.sort_unstable();
        splits.push(ids);
    }
    let set = SplitSet { splits };
    set.validate(records)?;
    Ok(set)
}

/// Dense world-frame geometry of a route at <= 1 m spacing. Lane-change
/// steps blend linearly into the target lane over a short window.
pub fn route_polyline(graph: &LaneGraph, route: &Route) -> crate::geom::Polyline {
    use crate::geom::Vec2;
    const BLEND_M: f64 = 8.0;
    let mut pts: Vec<Vec2> = Vec::new();
    let wps = &route.waypoints;
    let mut cur_from = wps[0].1;
    for (i, &(lane, own_s)) in wps.iter().enumerate() {
        let l = graph.lane(lane);
        let (to, next_from) = match wps.get(i + 1) {
            Some(&(nl, ns)) if nl == lane => (ns, ns),
            Some(&(nl, ns)) if l.successors.contains(&nl) => (l.length(), ns),
            Some(&(nl, ns)) => {
                // Lateral lane change: cut short, then resume on the target
                // lane at a comparable arc position.
                let cut = (cur_from + BLEND_M).min(l.length());
                (cut, cut.min(graph.lane(nl).length()).min(ns))
            }
            None => (own_s.max(cur_from), cur_from),
        };
        let from = cur_from.min(l.length());
        let to = to.min(l.length());
        let mut d = from;
        while d < to {
            pts.push(l.centerline.pose_at(d).position);
            d += 1.0;
        }
        pts.push(l.centerline.pose_at(to).position);
        cur_from = next_from;
    }
    pts.dedup_by(|a, b| a.dist(*b) < 1e-6);
    crate::geom::Polyline::new(pts)
}

#[derive(Serialize, Deserialize)]
struct RoutesFile {
    format: String,
    version: u32,
    records: Vec<RouteRecord>,
    splits: Option<SplitSet>,
}

pub fn save_routes(
    records: &[RouteRecord],
    splits: Option<&SplitSet>,
    path: &Path,
) -> Result<()> {
    let file = RoutesFile {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        records: records.to_vec(),
        splits: splits.cloned(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_routes(path: &Path) -> Result<(Vec<RouteRecord>, Option<SplitSet>)> {
    let text = std::fs::read_to_string(path)?;
    let file: RoutesFile = serde_json::from_str(&text)?;
    if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: not a routes file (or unsupported version)",
            path.display()
        )));
    }
    Ok((file.records, file.splits))
}
