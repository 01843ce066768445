//! Scenario behavior scripts: small deterministic state machines that place
//! and drive the non-ego actors for each scenario type.

use crate::geom::{Polyline, Pose, Vec2};
use crate::lane_graph::{Intersection, LaneGraph, LaneId, Maneuver};
use crate::route_gen::{route_polyline, RouteRecord, ScenarioName};

use super::{signal_phases_at, Actor, ActorKind, EgoState, SimConfig, WorldState};

const CAR_EXTENT: (f64, f64) = (2.2, 0.9);
const CYCLIST_EXTENT: (f64, f64) = (0.9, 0.4);
const PEDESTRIAN_EXTENT: (f64, f64) = (0.35, 0.35);
const EMERGENCY_EXTENT: (f64, f64) = (2.4, 1.0);

/// Constant-target path follower with optional ego-yielding.
#[derive(Debug, Clone)]
pub struct PathFollower {
    pub path: Polyline,
    pub s: f64,
    pub v: f64,
    pub target_speed: f64,
    /// Brake when the ego occupies the path ahead.
    pub yield_to_ego: bool,
}

impl PathFollower {
    fn step(&mut self, ego: &EgoState, dt: f64) -> (Pose, f64, bool) {
        let mut accel = 2.0;
        if self.yield_to_ego {
            let (es, edist, _) = self.path.project_point(ego.pose.position);
            let headway = 5.0 + 1.5 * self.v;
            if edist < 2.5 && es > self.s && es - self.s < headway {
                accel = -4.0;
            }
        }
        self.v = (self.v + accel * dt).clamp(0.0, self.target_speed);
        self.s += self.v * dt;
        let done = self.s >= self.path.length();
        (self.path.pose_at(self.s), self.v, done)
    }
}

#[derive(Debug, Clone)]
pub enum Behavior {
    /// Parked or wrecked vehicle; never moves.
    Static,
    /// Drives a fixed path, optionally only after the ego comes near a
    /// trigger position.
    Drive {
        follower: PathFollower,
        trigger: Option<(Vec2, f64)>,
        started: bool,
    },
    /// Parked car whose door swings into the adjacent lane when the ego
    /// approaches.
    OpenDoor {
        trigger_dist: f64,
        shift: Vec2,
        extra_half_width: f64,
        opened: bool,
    },
    /// Waits at the roadside, then crosses perpendicular to the road.
    PedestrianCross {
        dir: Vec2,
        speed: f64,
        trigger_dist: f64,
        total: f64,
        walked: f64,
        started: bool,
    },
    /// Emergency vehicle materializing behind the ego on the route path once
    /// the ego has made enough progress.
    EmergencyRear {
        path: Polyline,
        s: f64,
        speed: f64,
        appear_at_route_s: f64,
        gap_behind: f64,
        started: bool,
    },
}

/// Owns the behavior state for all scripted actors of one episode.
pub struct ScenarioRuntime {
    behaviors: Vec<Behavior>,
}

impl ScenarioRuntime {
    pub fn step(&mut self, world: &mut WorldState, cfg: &SimConfig) {
        let ego = world.ego;
        let dt = cfg.dt;
        for (i, behavior) in self.behaviors.iter_mut().enumerate() {
            let actor = &mut world.actors[i];
            match behavior {
                Behavior::Static => {}
                Behavior::Drive {
                    follower,
                    trigger,
                    started,
                } => {
                    if !*started {
                        match trigger {
                            Some((p, d)) if ego.pose.position.dist(*p) > *d => continue,
                            _ => *started = true,
                        }
                    }
                    let (pose, v, done) = follower.step(&ego, dt);
                    actor.pose = pose;
                    actor.v = v;
                    if done {
                        actor.active = false;
                    }
                }
                Behavior::OpenDoor {
                    trigger_dist,
                    shift,
                    extra_half_width,
                    opened,
                } => {
                    if !*opened && ego.pose.position.dist(actor.pose.position) < *trigger_dist {
                        *opened = true;
                        actor.pose.position = actor.pose.position.add(*shift);
                        actor.extent.1 += *extra_half_width;
                    }
                }
                Behavior::PedestrianCross {
                    dir,
                    speed,
                    trigger_dist,
                    total,
                    walked,
                    started,
                } => {
                    if !*started {
                        if ego.pose.position.dist(actor.pose.position) > *trigger_dist {
                            continue;
                        }
                        *started = true;
                    }
                    if *walked < *total {
                        actor.pose.position = actor.pose.position.add(dir.scale(*speed * dt));
                        actor.pose.heading = dir.y.atan2(dir.x);
                        actor.v = *speed;
                        *walked += *speed * dt;
                    } else {
                        actor.active = false;
                    }
                }
                Behavior::EmergencyRear {
                    path,
                    s,
                    speed,
                    appear_at_route_s,
                    gap_behind,
                    started,
                } => {
                    if !*started {
                        let (es, _, _) = path.project_point(ego.pose.position);
                        if es < *appear_at_route_s {
                            continue;
                        }
                        *started = true;
                        *s = (es - *gap_behind).max(0.0);
                        actor.active = true;
                    }
                    *s += *speed * dt;
                    if *s >= path.length() {
                        actor.active = false;
                    } else {
                        actor.pose = path.pose_at(*s);
                        actor.v = *speed;
                    }
                }
            }
        }
    }
}

fn concat_lanes(graph: &LaneGraph, lanes: &[LaneId]) -> Polyline {
    let mut pts: Vec<Vec2> = Vec::new();
    for &l in lanes {
        pts.extend(graph.lane(l).centerline.points.iter().copied());
    }
    pts.dedup_by(|a, b| a.dist(*b) < 1e-6);
    Polyline::new(pts)
}

/// Shift a polyline laterally; positive = left of travel direction.
fn offset_polyline(pl: &Polyline, offset: f64) -> Polyline {
    let pts = pl
        .cumulative()
        .to_vec()
        .iter()
        .map(|&s| {
            let pose = pl.pose_at(s);
            let left = Vec2::new(-pose.heading.sin(), pose.heading.cos());
            pose.position.add(left.scale(offset))
        })
        .collect();
    Polyline::new(pts)
}

/// The intersection the trigger lane feeds into, if any.
fn trigger_intersection<'g>(graph: &'g LaneGraph, lane: LaneId) -> Option<&'g Intersection> {
    graph
        .lane(lane)
        .successors
        .iter()
        .find_map(|&s| graph.lane(s).intersection)
        .map(|iid| graph.intersection(iid))
}

/// Path through an intersection: approach + connector of `maneuver` + exit.
fn crossing_path(
    graph: &LaneGraph,
    approach: LaneId,
    maneuver: Maneuver,
) -> Option<Polyline> {
    let conn = graph
        .lane(approach)
        .successors
        .iter()
        .copied()
        .find(|&c| {
            graph.lane(c).intersection.is_some() && graph.lane(c).maneuver == Some(maneuver)
        })?;
    let exit = graph.lane(conn).successors.first().copied();
    let mut chain = vec![approach, conn];
    chain.extend(exit);
    Some(concat_lanes(graph, &chain))
}

fn direction_at_end(graph: &LaneGraph, lane: LaneId) -> Vec2 {
    let pts = &graph.lane(lane).centerline.points;
    pts[pts.len() - 1].sub(pts[pts.len() - 2]).normalized()
}

fn car(pose: Pose, script: u32) -> Actor {
    Actor {
        kind: ActorKind::Car,
        pose,
        v: 0.0,
        script,
        extent: CAR_EXTENT,
        active: true,
    }
}

struct Builder {
    actors: Vec<Actor>,
    behaviors: Vec<Behavior>,
}

impl Builder {
    fn push(&mut self, mut actor: Actor, behavior: Behavior) {
        actor.script = self.actors.len() as u32;
        self.actors.push(actor);
        self.behaviors.push(behavior);
    }
}

/// Build the initial world and the scripted actors for one scenario episode.
pub fn setup_scenario(
    graph: &LaneGraph,
    record: &RouteRecord,
    cfg: &SimConfig,
) -> (WorldState, ScenarioRuntime) {
    let route = &record.route;
    let params = &record.spec.parameters;
    let p = |name: &str| -> f64 {
        *params
            .get(name)
            .unwrap_or_else(|| panic!("contract error: missing parameter {name:?}"))
    };
    let trigger = route.trigger;
    let trigger_pose = graph
        .lane(trigger.lane)
        .centerline
        .pose_at(trigger.s);
    let route_path = route_polyline(graph, route);
    let (trigger_route_s, _, _) = route_path.project_point(trigger_pose.position);
    let ahead = |d: f64| route_path.pose_at(trigger_route_s + d);

    let mut b = Builder {
        actors: Vec::new(),
        behaviors: Vec::new(),
    };

    match record.spec.scenario {
        ScenarioName::SignalizedJunctionLeftTurn | ScenarioName::InvadingTurn => {
            // Opposing traffic through the junction: straight flow for the
            // left-turning ego, a left-turning invader for the straight ego.
            let (maneuver, speed, count, gap, near) = match record.spec.scenario {
                ScenarioName::SignalizedJunctionLeftTurn => (
                    Maneuver::Straight,
                    p("oncoming_speed"),
                    2,
                    p("flow_gap"),
                    35.0,
                ),
                _ => (
                    Maneuver::Left,
                    p("invader_speed"),
                    1,
                    0.0,
                    p("cut_in_distance") + 15.0,
                ),
            };
            if let Some(inter) = trigger_intersection(graph, trigger.lane) {
                let our_dir = direction_at_end(graph, trigger.lane);
                let opposing = inter
                    .incoming
                    .iter()
                    .copied()
                    .find(|&l| l != trigger.lane && direction_at_end(graph, l).dot(our_dir) < -0.5);
                if let Some(opp) = opposing {
                    if let Some(path) = crossing_path(graph, opp, maneuver) {
                        let entry = graph.lane(trigger.lane).centerline.pose_at(
                            graph.lane(trigger.lane).length(),
                        );
                        let stop_at = graph.lane(opp).length();
                        for i in 0..count {
                            let s0 = (stop_at - 20.0 - i as f64 * gap).max(0.0);
                            b.push(
                                car(path.pose_at(s0), 0),
                                Behavior::Drive {
                                    follower: PathFollower {
                                        path: path.clone(),
                                        s: s0,
                                        v: 0.0,
                                        target_speed: speed,
                                        yield_to_ego: false,
                                    },
                                    trigger: Some((entry.position, near)),
                                    started: false,
                                },
                            );
                        }
                    }
                }
            }
        }
        ScenarioName::StopSignCrossTraffic => {
            if let Some(inter) = trigger_intersection(graph, trigger.lane) {
                let our_dir = direction_at_end(graph, trigger.lane);
                let cross = inter
                    .incoming
                    .iter()
                    .copied()
                    .find(|&l| direction_at_end(graph, l).dot(our_dir).abs() < 0.5);
                if let Some(cl) = cross {
                    if let Some(path) = crossing_path(graph, cl, Maneuver::Straight) {
                        let entry = graph.lane(trigger.lane).centerline.pose_at(
                            graph.lane(trigger.lane).length(),
                        );
                        let stop_at = graph.lane(cl).length();
                        for i in 0..2 {
                            let s0 = (stop_at - 15.0 - i as f64 * p("cross_gap")).max(0.0);
                            b.push(
                                car(path.pose_at(s0), 0),
                                Behavior::Drive {
                                    follower: PathFollower {
                                        path: path.clone(),
                                        s: s0,
                                        v: 0.0,
                                        target_speed: p("cross_speed"),
                                        yield_to_ego: false,
                                    },
                                    trigger: Some((entry.position, 30.0)),
                                    started: false,
                                },
                            );
                        }
                    }
                }
            }
        }
        ScenarioName::PedestrianCrossing => {
            let lane = graph.lane(trigger.lane);
            let end = lane.centerline.pose_at(lane.length());
            let left = Vec2::new(-end.heading.sin(), end.heading.cos());
            let fwd = Vec2::new(end.heading.cos(), end.heading.sin());
            let start = end
                .position
                .add(left.scale(-(lane.width / 2.0 + 1.0)))
                .add(fwd.scale(2.0));
            b.push(
                Actor {
                    kind: ActorKind::Pedestrian,
                    pose: Pose {
                        position: start,
                        heading: left.y.atan2(left.x),
                    },
                    v: 0.0,
                    script: 0,
                    extent: PEDESTRIAN_EXTENT,
                    active: true,
                },
                Behavior::PedestrianCross {
                    dir: left,
                    speed: p("walk_speed"),
                    trigger_dist: p("trigger_distance"),
                    total: lane.width * 2.5 + 2.0,
                    walked: 0.0,
                    started: false,
                },
            );
        }
        ScenarioName::YieldToEmergencyVehicle => {
            let appear = 0.5 * p("start_behind");
            let speed = graph.lane(trigger.lane).speed_limit + p("approach_delta");
            // Passes on the left of the route line while the ego pulls right.
            let pass_path = offset_polyline(&route_path, 1.6);
            b.push(
                Actor {
                    kind: ActorKind::Emergency,
                    pose: pass_path.pose_at(0.0),
                    v: 0.0,
                    script: 0,
                    extent: EMERGENCY_EXTENT,
                    active: false,
                },
                Behavior::EmergencyRear {
                    path: pass_path,
                    s: 0.0,
                    speed,
                    appear_at_route_s: appear,
                    gap_behind: appear,
                    started: false,
                },
            );
        }
        ScenarioName::ParkingExit => {
            // Pocket neighbors fore and aft of the ego's parking spot. The
            // front gap leaves room to pull out without reversing.
            let lane = graph.lane(route.start.0);
            for ds in [-7.0, 12.0] {
                let s = route.start.1 + ds;
                if s < 0.0 || s > lane.length() {
                    continue;
                }
                b.push(car(lane.centerline.pose_at(s), 0), Behavior::Static);
            }
        }
        ScenarioName::VehicleOpensDoor => {
            let lane = graph.lane(trigger.lane);
            let parking = lane.right.expect("predicate guaranteed parking").id;
            let pl = graph.lane(parking);
            let s = (trigger.s + p("spawn_ahead")).min(pl.length() - 2.0);
            let pose = pl.centerline.pose_at(s);
            let left = Vec2::new(-pose.heading.sin(), pose.heading.cos());
            let half_door = p("door_width") / 2.0;
            b.push(
                car(pose, 0),
                Behavior::OpenDoor {
                    trigger_dist: 18.0,
                    shift: left.scale(half_door),
                    extra_half_width: half_door,
                    opened: false,
                },
            );
        }
        ScenarioName::Accident => {
            let lane = graph.lane(trigger.lane);
            // Keep the wreck clear of the route goal.
            let max_ahead = (route_path.length() - trigger_route_s - 10.0).max(2.0);
            let pose = ahead(p("spawn_ahead").min(max_ahead));
            let left = Vec2::new(-pose.heading.sin(), pose.heading.cos());
            let off = (1.0 - p("lane_overlap")) * lane.width / 2.0;
            b.push(
                car(
                    Pose {
                        position: pose.position.add(left.scale(-off)),
                        heading: pose.heading + 0.25,
                    },
                    0,
                ),
                Behavior::Static,
            );
        }
        ScenarioName::HazardAtSide => {
            let lane = graph.lane(trigger.lane);
            // Cyclist rides the lane boundary, encroaching on the ego lane.
            let path = offset_polyline(&lane.centerline, -(lane.width / 2.0 - 0.3));
            let s0 = (trigger.s + p("spawn_ahead")).min(path.length() - 2.0);
            b.push(
                Actor {
                    kind: ActorKind::Cyclist,
                    pose: path.pose_at(s0),
                    v: 0.0,
                    script: 0,
                    extent: CYCLIST_EXTENT,
                    active: true,
                },
                Behavior::Drive {
                    follower: PathFollower {
                        path,
                        s: s0,
                        v: 0.0,
                        target_speed: p("hazard_speed"),
                        yield_to_ego: false,
                    },
                    trigger: None,
                    started: false,
                },
            );
        }
        ScenarioName::MergeIntoFlow => {
            // Flow on the lane the ramp merges into.
            let merge_lane = graph
                .lane(trigger.lane)
                .successors
                .first()
                .copied()
                .expect("ramp has a merge target");
            // Extend the flow path upstream and downstream of the merge.
            let mut chain = vec![merge_lane];
            let mut cur = merge_lane;
            for _ in 0..3 {
                let pred = graph
                    .lane(cur)
                    .predecessors
                    .iter()
                    .copied()
                    .find(|&l| !graph.lane(l).is_ramp && graph.lane(l).intersection.is_none());
                match pred {
                    Some(l) => {
                        chain.insert(0, l);
                        cur = l;
                    }
                    None => break,
                }
            }
            let mut cur = merge_lane;
            for _ in 0..3 {
                let succ = graph
                    .lane(cur)
                    .successors
                    .iter()
                    .copied()
                    .find(|&l| !graph.lane(l).is_ramp && graph.lane(l).intersection.is_none());
                match succ {
                    Some(l) => {
                        chain.push(l);
                        cur = l;
                    }
                    None => break,
                }
            }
            let path = concat_lanes(graph, &chain);
            let merge_point = graph.lane(merge_lane).centerline.points[0];
            let (merge_s, _, _) = path.project_point(merge_point);
            for i in 0..3 {
                let s0 = (merge_s - 15.0 - i as f64 * p("flow_gap")).max(0.0);
                b.push(
                    car(path.pose_at(s0), 0),
                    Behavior::Drive {
                        follower: PathFollower {
                            path: path.clone(),
                            s: s0,
                            v: 0.0,
                            target_speed: p("flow_speed"),
                            yield_to_ego: true,
                        },
                        trigger: Some((merge_point, 45.0)),
                        started: false,
                    },
                );
            }
        }
    }

    let start_pose = graph
        .lane(route.start.0)
        .centerline
        .pose_at(route.start.1);
    let ego = EgoState {
        pose: start_pose,
        v: 0.0,
        steer: 0.0,
        wheelbase: cfg.wheelbase,
    };
    let world = WorldState {
        t: 0.0,
        ego,
        actors: b.actors,
        signal_phases: signal_phases_at(graph, 0.0, cfg),
    };
    (world, ScenarioRuntime {
        behaviors: b.behaviors,
    })
}
