//! Privileged rule-based driver. Follows the route centerline with lateral
//! avoidance offsets around blocking actors and an IDM-style speed law, and
//! yields at guarded stop lines and occupied junctions. Supplies the
//! demonstrations for imitation learning and a soundness oracle for the
//! simulator.

use crate::geom::{wrap_angle, Polyline, Vec2};
use crate::lane_graph::{LaneGraph, LaneId};
use crate::route_gen::Route;
use crate::sim::{ActorKind, SignalPhase, SimConfig, WorldState};

/// Path horizon: waypoints at 1 m spacing in the ego frame.
pub const PATH_POINTS: usize = 30;
/// Speed horizon: targets at [`SPEED_DT`] spacing, covering 3 s.
pub const SPEED_POINTS: usize = 15;
pub const SPEED_DT: f64 = 0.2;

/// Disentangled plan: spatial path plus a temporal speed profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPlan {
    /// Ego-frame waypoints, consecutive points exactly 1 m apart.
    pub path: Vec<Vec2>,
    /// Target speeds, `speeds[k]` for time `k * SPEED_DT`; all >= 0.
    pub speeds: Vec<f64>,
}

impl ExpertPlan {
    /// Entangled form: temporal waypoints at [`SPEED_DT`] spacing obtained by
    /// rolling the speed profile along the path.
    pub fn rollout(&self) -> Vec<Vec2> {
        let pl = Polyline::new(self.path.clone());
        let mut out = Vec::with_capacity(SPEED_POINTS);
        let mut dist = 0.0;
        for k in 0..SPEED_POINTS {
            dist += self.speeds[k] * SPEED_DT;
            out.push(pl.pose_at(dist.min(pl.length())).position);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ExpertConfig {
    /// Desired time headway to a leader, s.
    pub headway: f64,
    /// Standstill gap to a leader, m.
    pub min_gap: f64,
    /// Comfortable deceleration, m/s^2.
    pub comfort_decel: f64,
    pub max_accel: f64,
    /// Lateral acceleration cap for curve speeds, m/s^2.
    pub lat_accel_max: f64,
    /// Gap-law relaxation time, s.
    pub follow_tau: f64,
    /// Extra lateral clearance kept when offsetting around obstacles, m.
    pub avoid_margin: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            headway: 2.0,
            min_gap: 2.0,
            comfort_decel: 3.0,
            max_accel: 2.0,
            lat_accel_max: 2.5,
            follow_tau: 1.5,
            avoid_margin: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GuardKind {
    /// Index into `LaneGraph::signals`.
    Signal(usize),
    StopSign,
    /// Ramp end feeding a lane with through traffic.
    Merge,
}

/// A yield line on the route, with junction-occupancy context.
#[derive(Debug, Clone)]
struct Guarded {
    line_s: f64,
    kind: GuardKind,
    center: Vec2,
    satisfied: bool,
}

/// Lateral avoidance window along the route.
#[derive(Debug, Clone, Copy)]
struct AvoidWindow {
    lo: f64,
    hi: f64,
    offset: f64,
}

const AVOID_RAMP_M: f64 = 10.0;

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

impl AvoidWindow {
    fn at(&self, s: f64) -> f64 {
        let u = ((s - self.lo) / AVOID_RAMP_M).min((self.hi - s) / AVOID_RAMP_M);
        self.offset * smoothstep(u)
    }
}

/// Per-episode expert; precomputes route geometry once.
pub struct Expert {
    cfg: SimConfig,
    ecfg: ExpertConfig,
    path: Polyline,
    /// Speed limit changepoints (route_s, limit), sorted.
    limits: Vec<(f64, f64)>,
    guarded: Vec<Guarded>,
}

impl Expert {
    pub fn new(graph: &LaneGraph, route: &Route, cfg: SimConfig) -> Expert {
        let path = crate::route_gen::route_polyline(graph, route);
        let mut lanes: Vec<LaneId> = Vec::new();
        for &(l, _) in &route.waypoints {
            if lanes.last() != Some(&l) {
                lanes.push(l);
            }
        }
        let mut limits = Vec::new();
        let mut guarded = Vec::new();
        for (i, &lid) in lanes.iter().enumerate() {
            let lane = graph.lane(lid);
            let (entry_s, _, _) = path.project_point(lane.centerline.points[0]);
            limits.push((entry_s, lane.speed_limit));
            let end = *lane.centerline.points.last().unwrap();
            let signal = graph.signals.iter().position(|s| s.approach == lid);
            let stop = graph.stop_signs.iter().any(|s| s.approach == lid);
            // A ramp end with through traffic on the target lane is a yield
            // line for gap acceptance.
            let merge = lane.is_ramp
                && lanes.get(i + 1).is_some_and(|&next| {
                    graph.lane(next).predecessors.iter().any(|&p| p != lid)
                });
            let kind = match signal {
                Some(idx) => GuardKind::Signal(idx),
                None if stop => GuardKind::StopSign,
                None if merge => GuardKind::Merge,
                None => continue,
            };
            let (mut line_s, _, _) = path.project_point(end);
            if kind == GuardKind::Merge {
                // Hold back to where the ramp still clears the through
                // traffic's line laterally, so the flow can pass a waiting
                // ego. The flow runs along the target lane's entry tangent.
                let t0 = graph.lane(lanes[i + 1]).centerline.pose_at(0.0);
                let dir = Vec2::new(t0.heading.cos(), t0.heading.sin());
                while line_s > entry_s {
                    let rel = path.pose_at(line_s).position.sub(t0.position);
                    let lat = dir.x * rel.y - dir.y * rel.x;
                    if lat.abs() >= 2.5 {
                        break;
                    }
                    line_s -= 1.0;
                }
            }
            let center = lane
                .successors
                .iter()
                .find_map(|&c| graph.lane(c).intersection)
                .map(|iid| graph.intersection(iid).center)
                .unwrap_or(end);
            guarded.push(Guarded {
                line_s,
                kind,
                center,
                satisfied: false,
            });
        }
        limits.sort_by(|a, b| a.0.total_cmp(&b.0));
        Expert {
            cfg,
            ecfg: ExpertConfig::default(),
            path,
            limits,
            guarded,
        }
    }

    fn limit_at(&self, s: f64) -> f64 {
        let mut v = self.limits.first().map_or(self.cfg.v_max, |l| l.1);
        for &(ls, lim) in &self.limits {
            if ls <= s + 0.5 {
                v = lim;
            }
        }
        v
    }

    fn curve_speed(&self, s: f64) -> f64 {
        let h0 = self.path.pose_at((s - 2.0).max(0.0)).heading;
        let h1 = self.path.pose_at((s + 2.0).min(self.path.length())).heading;
        let kappa = wrap_angle(h1 - h0).abs() / 4.0;
        (self.ecfg.lat_accel_max / kappa.max(1e-6)).sqrt()
    }

    /// Speed admissible at distance `d` before a stop wall. The margin
    /// absorbs controller tracking lag so the vehicle settles short of the
    /// wall instead of creeping past it.
    fn wall_speed(&self, d: f64) -> f64 {
        let eff = d - 2.5;
        if eff <= 0.0 {
            0.0
        } else {
            (2.0 * self.ecfg.comfort_decel * eff).sqrt()
        }
    }

    /// Plan for the current privileged world state.
    pub fn plan(&mut self, world: &WorldState) -> ExpertPlan {
        let ego = &world.ego;
        let (s0, _, lat) = self.path.project_point(ego.pose.position);
        let half_w = self.cfg.ego_extent.1;
        let half_l = self.cfg.ego_extent.0;

        // Lateral avoidance windows around blocking or encroaching actors.
        let mut windows: Vec<AvoidWindow> = Vec::new();
        for a in world.actors.iter().filter(|a| a.active) {
            let (sa, _, lata) = self.path.project_point(a.pose.position);
            if a.kind == ActorKind::Emergency {
                // Pull right from the moment it closes in behind until it
                // has passed on the left.
                if sa > s0 - 80.0 && sa < s0 + 8.0 {
                    windows.push(AvoidWindow {
                        lo: s0 - 20.0,
                        hi: s0 + 60.0,
                        offset: -1.2,
                    });
                }
                continue;
            }
            if sa < s0 - 5.0 || sa > s0 + 45.0 {
                continue;
            }
            let h = self.path.pose_at(sa).heading;
            let dth = wrap_angle(a.pose.heading - h);
            let eff_w = a.extent.0 * dth.sin().abs() + a.extent.1 * dth.cos().abs();
            // Crossing pedestrians are handled by stopping, never by lateral
            // offsets; they walk into whichever side the path would take.
            let slow = a.v < 2.0 || a.kind == ActorKind::Cyclist;
            if !slow || lata.abs() > 3.0 || a.kind == ActorKind::Pedestrian {
                continue;
            }
            let need = eff_w + half_w + self.ecfg.avoid_margin;
            if lata.abs() >= need {
                continue;
            }
            let eff_l = a.extent.0 * dth.cos().abs() + a.extent.1 * dth.sin().abs();
            // Pass on the freer side; dead-ahead obstacles are passed on the
            // left by convention.
            let offset = if lata > 0.3 { lata - need } else { lata + need };
            // The lead-in is long so the ego runs parallel, not angled, when
            // passing; an angled body needs extra clearance.
            windows.push(AvoidWindow {
                lo: sa - eff_l - 16.0,
                hi: sa + eff_l + 12.0,
                offset: offset.clamp(-2.6, 2.6),
            });
        }
        let avoid = |s: f64| -> f64 {
            windows
                .iter()
                .map(|w| w.at(s))
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(0.0)
        };

        // Dense offset path, then exact 1 m chord resampling, in world frame.
        let lat_err = lat - avoid(s0);
        let len = self.path.length();
        let end_pose = self.path.pose_at(len);
        let mut dense = Vec::with_capacity(90);
        for k in 0..90 {
            let d = k as f64 * 0.5;
            let s = s0 + d;
            // Past the route end, continue along the final tangent so the
            // path never folds onto itself.
            let pose = if s <= len {
                self.path.pose_at(s)
            } else {
                crate::geom::Pose {
                    position: end_pose
                        .position
                        .add(end_pose.forward().scale(s - len)),
                    heading: end_pose.heading,
                }
            };
            let n = Vec2::new(-pose.heading.sin(), pose.heading.cos());
            let o = avoid(s0 + d) + lat_err * (1.0 - smoothstep(d / 12.0));
            let p = pose.position.add(n.scale(o));
            if dense.last().map_or(true, |q: &Vec2| q.dist(p) > 1e-9) {
                dense.push(p);
            }
        }
        let world_path = Polyline::new(dense).resample_chord(1.0, PATH_POINTS);
        let path: Vec<Vec2> = world_path
            .iter()
            .map(|&p| ego.pose.world_to_local(p))
            .collect();

        // Stop walls: guarded lines and occupied junctions ahead.
        let mut walls: Vec<f64> = Vec::new();
        for gi in 0..self.guarded.len() {
            let (line_s, kind, center, satisfied) = {
                let g = &self.guarded[gi];
                (g.line_s, g.kind, g.center, g.satisfied)
            };
            let d = line_s - s0;
            if !(-2.0..=60.0).contains(&d) {
                continue;
            }
            match kind {
                GuardKind::Signal(idx) => {
                    let red = world.signal_phases[idx] == SignalPhase::Red;
                    let remaining =
                        self.cfg.signal_green - world.t.rem_euclid(self.cfg.signal_green);
                    // Committed once close and moving; otherwise hold on red,
                    // on a green that would expire before arrival, or when
                    // waiting at the line without enough fresh green left.
                    let committed = d <= 3.0 && ego.v >= 2.0;
                    let t_arr = d / ego.v.max(2.0);
                    let stale = !red && t_arr > remaining - 0.5;
                    let short_release = !red && ego.v < 1.0 && remaining < 4.0;
                    if !committed && (red || stale || short_release) {
                        walls.push(line_s - 0.7);
                    }
                }
                GuardKind::StopSign => {
                    if !satisfied {
                        if ego.v < 0.1 && s0 >= line_s - 5.0 && s0 <= line_s + 0.5 {
                            self.guarded[gi].satisfied = true;
                        } else {
                            walls.push(line_s - 0.7);
                        }
                    }
                }
                // A merge line carries no inherent stop; only the conflict
                // check below gates it on through traffic.
                GuardKind::Merge => {}
            }
            // Hold before the line while conflicting traffic is in or
            // approaching the junction; never once the ego is inside.
            if d > 1.0 {
                let conflict = world.actors.iter().any(|a| {
                    if !a.active || a.kind == ActorKind::Emergency {
                        return false;
                    }
                    let c = a.pose.position.dist(center);
                    if c < 15.0 && a.v > 0.5 {
                        return true;
                    }
                    let toward = center
                        .sub(a.pose.position)
                        .normalized()
                        .dot(Vec2::new(a.pose.heading.cos(), a.pose.heading.sin()));
                    c < 28.0 && a.v > 1.0 && toward > 0.5
                });
                if conflict {
                    walls.push(line_s - 0.7);
                }
            }
        }

        // Leader selection against the planned lateral offsets.
        let mut lead: Option<(f64, f64)> = None;
        for a in world.actors.iter().filter(|a| a.active) {
            if a.kind == ActorKind::Emergency {
                continue;
            }
            let (sa, _, lata) = self.path.project_point(a.pose.position);
            if sa <= s0 + 0.5 || sa > s0 + 50.0 {
                continue;
            }
            let h = self.path.pose_at(sa).heading;
            let dth = wrap_angle(a.pose.heading - h);
            let eff_w = a.extent.0 * dth.sin().abs() + a.extent.1 * dth.cos().abs();
            if (lata - avoid(sa)).abs() >= eff_w + half_w + 0.3 {
                continue;
            }
            let eff_l = a.extent.0 * dth.cos().abs() + a.extent.1 * dth.sin().abs();
            let gap = (sa - s0) - eff_l - half_l;
            let v_lead = a.v * dth.cos().max(0.0);
            if lead.map_or(true, |(g, _)| gap < g) {
                lead = Some((gap, v_lead));
            }
        }

        // Speed rollout over the horizon.
        let mut speeds = Vec::with_capacity(SPEED_POINTS);
        let allow = |s: f64, v: f64, gap: Option<(f64, f64)>| -> f64 {
            let mut va = self.limit_at(s).min(self.curve_speed(s));
            // Slow down only when off the planned line, not when the plan
            // itself offsets away from the centerline.
            if lat_err.abs() > 1.5 {
                va = va.min(4.0);
            }
            for &w in &walls {
                va = va.min(self.wall_speed(w - s));
            }
            if let Some((g, vl)) = gap {
                let desired = self.ecfg.min_gap + self.ecfg.headway * v;
                va = va.min((vl + (g - desired) / self.ecfg.follow_tau).max(0.0));
            }
            va.max(0.0)
        };
        let mut v = ego.v.min(allow(s0, ego.v, lead));
        let mut s = s0;
        let mut gap = lead;
        speeds.push(v);
        for _ in 1..SPEED_POINTS {
            let va = allow(s, v, gap);
            let a = ((va - v) / SPEED_DT).clamp(-4.0, self.ecfg.max_accel);
            v = (v + a * SPEED_DT).clamp(0.0, self.cfg.v_max);
            s += v * SPEED_DT;
            if let Some((g, vl)) = gap {
                gap = Some(((g + (vl - v) * SPEED_DT).max(0.0), vl));
            }
            speeds.push(v);
        }

        ExpertPlan { path, speeds }
    }
}

/// Closed-loop rollout of the expert + controller on one scenario episode.
pub fn run_expert_episode(
    graph: &LaneGraph,
    record: &crate::route_gen::RouteRecord,
    cfg: &SimConfig,
) -> crate::sim::EpisodeResult {
    let mut expert = Expert::new(graph, &record.route, cfg.clone());
    let mut ctrl =
        crate::controller::Controller::new(crate::controller::ControllerConfig::default());
    let dt = cfg.dt;
    let mut agent = |w: &WorldState| {
        let plan: crate::controller::PathSpeed = expert.plan(w).into();
        Ok(ctrl.control(&plan, w.ego.v, dt))
    };
    crate::sim::run_scenario(graph, record, &mut agent, cfg)
}
