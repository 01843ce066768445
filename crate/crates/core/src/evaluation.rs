//! Closed-loop benchmark harness: driving score (DS), success rate (SR),
//! static and dynamic infraction rates (IR_s, IR_d), per-skill aggregation,
//! and the rollout loop that drives a learned planner through a scenario.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bev::{rasterize, AugmentTransform, BevCache};
use crate::controller::{Controller, ControllerConfig, PathSpeed};
use crate::error::{Error, Result};
use crate::geom::{Polyline, Vec2};
use crate::lane_graph::LaneGraph;
use crate::planner::{PlanOutput, PlannerModel};
use crate::route_gen::{route_polyline, Command, Route, RouteRecord, Skill};
use crate::sim::{
    run_scenario_offset, EpisodeResult, InfractionKind, SimConfig, WorldState,
};

/// Outcome of one route rollout, reduced to what the metrics need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResult {
    pub route_id: u32,
    /// Fraction of the route completed, in [0, 1].
    pub completion: f64,
    pub infractions: Vec<InfractionKind>,
    pub timed_out: bool,
    /// Skills the route exercises; every route carries at least one.
    pub skills: Vec<Skill>,
}

impl RouteResult {
    pub fn from_episode(route_id: u32, skills: Vec<Skill>, ep: &EpisodeResult) -> RouteResult {
        RouteResult {
            route_id,
            completion: ep.completion,
            infractions: ep.infractions.iter().map(|e| e.kind).collect(),
            timed_out: ep.timed_out,
            skills,
        }
    }

    /// Strict success: full completion, zero infractions, no timeout.
    pub fn success(&self) -> bool {
        self.completion == 1.0 && self.infractions.is_empty() && !self.timed_out
    }
}

/// Multiplicative per-infraction penalty factors for the driving score.
/// Each factor lives in (0, 1]; kinds outside the table (route deviation,
/// timeout) enter the score through completion instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub actor_collision: f64,
    pub layout_collision: f64,
    pub red_light: f64,
    pub stop_sign: f64,
    pub outside_lane: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Penalties {
            actor_collision: 0.60,
            layout_collision: 0.65,
            red_light: 0.70,
            stop_sign: 0.80,
            outside_lane: 0.65,
        }
    }
}

impl Penalties {
    pub fn factor(&self, kind: InfractionKind) -> f64 {
        match kind {
            InfractionKind::ActorCollision => self.actor_collision,
            InfractionKind::LayoutCollision => self.layout_collision,
            InfractionKind::RedLight => self.red_light,
            InfractionKind::StopSign => self.stop_sign,
            InfractionKind::OutsideLane => self.outside_lane,
            InfractionKind::RouteDeviation | InfractionKind::Timeout => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("actor_collision", self.actor_collision),
            ("layout_collision", self.layout_collision),
            ("red_light", self.red_light),
            ("stop_sign", self.stop_sign),
            ("outside_lane", self.outside_lane),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!(
                    "penalty factor {name} = {v} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

fn require_routes(results: &[RouteResult]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Contract("metrics need at least one route".into()));
    }
    Ok(())
}

/// Static infraction rate: lateral-control events per route. Counts events,
/// not routes, so the rate may exceed 1.
pub fn ir_static(results: &[RouteResult]) -> Result<f64> {
    require_routes(results)?;
    let n: usize = results
        .iter()
        .flat_map(|r| &r.infractions)
        .filter(|k| k.is_static())
        .count();
    Ok(n as f64 / results.len() as f64)
}

/// Dynamic infraction rate: interaction events per route.
pub fn ir_dynamic(results: &[RouteResult]) -> Result<f64> {
    require_routes(results)?;
    let n: usize = results
        .iter()
        .flat_map(|r| &r.infractions)
        .filter(|k| k.is_dynamic())
        .count();
    Ok(n as f64 / results.len() as f64)
}

/// Per-route driving score: `100 * completion * prod(penalty_kind^count)`.
pub fn route_driving_score(r: &RouteResult, p: &Penalties) -> f64 {
    let product: f64 = r.infractions.iter().map(|&k| p.factor(k)).product();
    100.0 * r.completion * product
}

/// Mean per-route driving score.
pub fn driving_score(results: &[RouteResult], p: &Penalties) -> Result<f64> {
    require_routes(results)?;
    p.validate()?;
    let sum: f64 = results.iter().map(|r| route_driving_score(r, p)).sum();
    Ok(sum / results.len() as f64)
}

/// Fraction of routes with strict success.
pub fn success_rate(results: &[RouteResult]) -> Result<f64> {
    require_routes(results)?;
    let n = results.iter().filter(|r| r.success()).count();
    Ok(n as f64 / results.len() as f64)
}

/// Per-skill success rate. A route tagged with several skills enters every
/// one of those denominators; a route with no skill tag is a config error.
pub fn multi_ability(results: &[RouteResult]) -> Result<BTreeMap<Skill, f64>> {
    require_routes(results)?;
    let mut hits: BTreeMap<Skill, (usize, usize)> = BTreeMap::new();
    for r in results {
        if r.skills.is_empty() {
            return Err(Error::Config(format!(
                "route {} is mapped to no driving skill",
                r.route_id
            )));
        }
        for &s in &r.skills {
            let e = hits.entry(s).or_insert((0, 0));
            e.1 += 1;
            if r.success() {
                e.0 += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(s, (succ, total))| (s, succ as f64 / total as f64))
        .collect())
}

/// All benchmark aggregates over one route set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub per_route: Vec<RouteResult>,
    pub driving_score: f64,
    pub success_rate: f64,
    pub ir_static: f64,
    pub ir_dynamic: f64,
    pub per_skill: BTreeMap<Skill, f64>,
}

pub fn aggregate(per_route: Vec<RouteResult>, p: &Penalties) -> Result<BenchmarkResult> {
    Ok(BenchmarkResult {
        driving_score: driving_score(&per_route, p)?,
        success_rate: success_rate(&per_route)?,
        ir_static: ir_static(&per_route)?,
        ir_dynamic: ir_dynamic(&per_route)?,
        per_skill: multi_ability(&per_route)?,
        per_route,
    })
}

/// Route geometry plus the arc position of every commanded waypoint; maps an
/// ego position to the upcoming navigation command.
pub struct RouteContext {
    pub polyline: Polyline,
    wp_s: Vec<f64>,
    commands: Vec<Command>,
}

impl RouteContext {
    pub fn new(graph: &LaneGraph, route: &Route) -> RouteContext {
        let polyline = route_polyline(graph, route);
        let wp_s = route
            .waypoints
            .iter()
            .map(|&(lane, s)| {
                let p = graph.lane(lane).centerline.pose_at(s).position;
                polyline.project_point(p).0
            })
            .collect();
        RouteContext {
            polyline,
            wp_s,
            commands: route.commands.clone(),
        }
    }

    /// Command of the first waypoint still ahead of `pos` (the last one once
    /// all waypoints are behind).
    pub fn command_at(&self, pos: Vec2) -> Command {
        let s = self.polyline.project_point(pos).0;
        for (i, &ws) in self.wp_s.iter().enumerate() {
            if ws > s + 0.5 {
                return self.commands[i];
            }
        }
        *self.commands.last().unwrap_or(&Command::Follow)
    }
}

/// How a learned planner is rolled out in closed loop.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// DDIM iterations for diffusion planners; ignored by point estimators.
    pub s_steps: usize,
    /// Replan period in simulator steps; the controller tracks the latest
    /// plan in between.
    pub replan_every: usize,
    /// Seed for the per-episode sampling stream.
    pub seed: u64,
    /// Lateral ego offset injected at spawn (m); recovery probes.
    pub start_offset: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            s_steps: 5,
            replan_every: 2,
            seed: 0,
            start_offset: 0.0,
        }
    }
}

/// Closed-loop rollout of a learned planner on one route: rasterize, plan,
/// track with the PID controller.
pub fn run_model_episode(
    graph: &LaneGraph,
    record: &RouteRecord,
    model: &PlannerModel,
    sim_cfg: &SimConfig,
    ec: &EvalConfig,
) -> EpisodeResult {
    let ctx = RouteContext::new(graph, &record.route);
    let mut rng = crate::rng::substream(ec.seed, "eval-episode", record.id as u64);
    let mut cache = BevCache::new();
    let mut ctrl = Controller::new(ControllerConfig::default());
    let mut plan: Option<PathSpeed> = None;
    let mut step = 0usize;
    let dt = sim_cfg.dt;
    let identity = AugmentTransform::identity();
    let mut agent = |w: &WorldState| -> Result<crate::sim::Controls> {
        if step % ec.replan_every == 0 || plan.is_none() {
            let grid = rasterize(w, &ctx.polyline, graph, &identity);
            let command = ctx.command_at(w.ego.pose.position);
            let out = model.infer(&grid, &mut cache, command, w.ego.v, ec.s_steps, &mut rng)?;
            plan = Some(match out {
                PlanOutput::Trajectory(t) => crate::controller::hermite_resample(&t),
                PlanOutput::PathSpeed(ps) => ps,
            });
        }
        step += 1;
        Ok(ctrl.control(plan.as_ref().unwrap(), w.ego.v, dt))
    };
    run_scenario_offset(graph, record, &mut agent, sim_cfg, ec.start_offset)
}

/// Roll a learned planner over every route in parallel.
pub fn evaluate_model(
    graph: &LaneGraph,
    records: &[RouteRecord],
    model: &PlannerModel,
    sim_cfg: &SimConfig,
    ec: &EvalConfig,
) -> Vec<RouteResult> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| {
            let ep = run_model_episode(graph, r, model, sim_cfg, ec);
            RouteResult::from_episode(r.id, vec![r.skill()], &ep)
        })
        .collect()
}

/// Roll the privileged expert over every route in parallel.
pub fn evaluate_expert(
    graph: &LaneGraph,
    records: &[RouteRecord],
    sim_cfg: &SimConfig,
) -> Vec<RouteResult> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| {
            let ep = crate::expert::run_expert_episode(graph, r, sim_cfg);
            RouteResult::from_episode(r.id, vec![r.skill()], &ep)
        })
        .collect()
}
