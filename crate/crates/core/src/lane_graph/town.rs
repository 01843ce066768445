//! Procedural grid towns: blocks of two-way roads, controlled intersections,
//! per-road side lanes (parking/shoulder/bike), and an optional one-way
//! highway loop with on/off ramps.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Polyline, Vec2};
use crate::rng;

use super::{
    Intersection, IntersectionId, Lane, LaneGraph, LaneId, LaneKind, Maneuver, NeighborRef,
    SignalSpec, StopSpec,
};

/// Which side lane (if any) a road carries on the right of each direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideLane {
    None,
    Parking,
    Shoulder,
    Bike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadProfile {
    pub driving_lanes: usize,
    pub side: SideLane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlPattern {
    AllSignalized,
    AllStopSigns,
    /// Signals and stop signs alternate over the node grid.
    Checkerboard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TownSpec {
    pub blocks_x: usize,
    pub blocks_y: usize,
    /// Distance between adjacent intersection centers (m).
    pub block_length: f64,
    pub lane_width: f64,
    pub speed_limit: f64,
    pub intersection_control: ControlPattern,
    /// Fraction of intersections flagged with a pedestrian crossing.
    pub crossing_fraction: f64,
    /// Road profiles with sampling weights; one profile drawn per road.
    pub road_profiles: Vec<(RoadProfile, f64)>,
    /// Build the one-way highway loop with on/off ramps (needs blocks_x >= 2).
    pub highway_loop: bool,
    pub highway_speed_limit: f64,
}

impl TownSpec {
    /// A compact mixed town exercising every scenario predicate.
    pub fn default_town() -> TownSpec {
        TownSpec {
            blocks_x: 3,
            blocks_y: 2,
            block_length: 120.0,
            lane_width: 3.5,
            speed_limit: 8.0,
            intersection_control: ControlPattern::Checkerboard,
            crossing_fraction: 0.5,
            road_profiles: vec![
                (
                    RoadProfile {
                        driving_lanes: 1,
                        side: SideLane::Parking,
                    },
                    0.3,
                ),
                (
                    RoadProfile {
                        driving_lanes: 2,
                        side: SideLane::Shoulder,
                    },
                    0.25,
                ),
                (
                    RoadProfile {
                        driving_lanes: 1,
                        side: SideLane::Bike,
                    },
                    0.2,
                ),
                (
                    RoadProfile {
                        driving_lanes: 2,
                        side: SideLane::None,
                    },
                    0.15,
                ),
                (
                    RoadProfile {
                        driving_lanes: 1,
                        side: SideLane::None,
                    },
                    0.1,
                ),
            ],
            highway_loop: true,
            highway_speed_limit: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Heading4 {
    East,
    West,
    North,
    South,
}

impl Heading4 {
    fn left_of(self) -> Heading4 {
        match self {
            Heading4::East => Heading4::North,
            Heading4::North => Heading4::West,
            Heading4::West => Heading4::South,
            Heading4::South => Heading4::East,
        }
    }
    fn right_of(self) -> Heading4 {
        match self {
            Heading4::East => Heading4::South,
            Heading4::South => Heading4::West,
            Heading4::West => Heading4::North,
            Heading4::North => Heading4::East,
        }
    }
}

/// Identifies one directional roadway of one road edge.
#[derive(Debug, Clone)]
struct Roadway {
    /// Driving lanes from innermost (index 0) outward.
    driving: Vec<usize>,
    side: Option<usize>,
}

struct Builder {
    lanes: Vec<Lane>,
    spec: TownSpec,
}

impl Builder {
    fn add_lane(
        &mut self,
        points: Vec<Vec2>,
        kind: LaneKind,
        speed_limit: f64,
        is_ramp: bool,
    ) -> usize {
        let centerline = Polyline::new(points).densified(1.0);
        let id = LaneId(self.lanes.len() as u32);
        self.lanes.push(Lane {
            id,
            centerline,
            width: self.spec.lane_width,
            kind,
            successors: Vec::new(),
            predecessors: Vec::new(),
            left: None,
            right: None,
            speed_limit,
            is_ramp,
            intersection: None,
            maneuver: None,
        });
        id.0 as usize
    }

    fn connect(&mut self, from: usize, to: usize) {
        let to_id = self.lanes[to].id;
        let from_id = self.lanes[from].id;
        if !self.lanes[from].successors.contains(&to_id) {
            self.lanes[from].successors.push(to_id);
        }
        if !self.lanes[to].predecessors.contains(&from_id) {
            self.lanes[to].predecessors.push(from_id);
        }
    }
}

/// Cubic Bezier between two poses with tangent-aligned control points.
fn bezier(p0: Vec2, h0: f64, p1: Vec2, h1: f64) -> Vec<Vec2> {
    let d = p0.dist(p1);
    let c0 = p0.add(Vec2::new(h0.cos(), h0.sin()).scale(d / 2.5));
    let c1 = p1.sub(Vec2::new(h1.cos(), h1.sin()).scale(d / 2.5));
    let n = (d * 2.0).ceil().max(4.0) as usize;
    let mut pts = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let u = 1.0 - t;
        let p = p0
            .scale(u * u * u)
            .add(c0.scale(3.0 * u * u * t))
            .add(c1.scale(3.0 * u * t * t))
            .add(p1.scale(t * t * t));
        pts.push(p);
    }
    // Guard against duplicate consecutive points (zero-length segments).
    pts.dedup_by(|a, b| a.dist(*b) < 1e-9);
    pts
}

fn heading_angle(h: Heading4) -> f64 {
    match h {
        Heading4::East => 0.0,
        Heading4::North => std::f64::consts::FRAC_PI_2,
        Heading4::West => std::f64::consts::PI,
        Heading4::South => -std::f64::consts::FRAC_PI_2,
    }
}

/// Build a deterministic procedural town.
pub fn build_town(spec: &TownSpec, seed: u64) -> Result<LaneGraph> {
    if spec.blocks_x == 0 || spec.blocks_y == 0 {
        return Err(Error::Config("town must have at least one block".into()));
    }
    if spec.lane_width <= 0.0 {
        return Err(Error::Config("lane width must be positive".into()));
    }
    if spec.road_profiles.is_empty() {
        return Err(Error::Config("at least one road profile required".into()));
    }
    if spec.highway_loop && spec.blocks_x < 2 {
        return Err(Error::Config(
            "highway loop requires blocks_x >= 2".into(),
        ));
    }
    let max_lanes = spec
        .road_profiles
        .iter()
        .map(|(p, _)| p.driving_lanes + usize::from(p.side != SideLane::None))
        .max()
        .unwrap();
    if spec
        .road_profiles
        .iter()
        .any(|(p, _)| p.driving_lanes == 0)
    {
        return Err(Error::Config("road profile with zero driving lanes".into()));
    }
    let lw = spec.lane_width;
    let half = lw * max_lanes as f64 + 2.0; // intersection half-size
    let block = spec.block_length;
    if block <= 2.0 * half + 10.0 {
        return Err(Error::Config(format!(
            "block length {block} too small for intersection half-size {half}"
        )));
    }
    let mut rng = rng::stream(seed, "town");

    let nx = spec.blocks_x + 1;
    let ny = spec.blocks_y + 1;
    let node = |i: usize, j: usize| Vec2::new(i as f64 * block, j as f64 * block);

    let mut b = Builder {
        lanes: Vec::new(),
        spec: spec.clone(),
    };

    let total_weight: f64 = spec.road_profiles.iter().map(|(_, w)| w).sum();
    let sample_profile = |rng: &mut rng::Rng| -> RoadProfile {
        let mut x: f64 = rng.gen_range(0.0..total_weight);
        for (p, w) in &spec.road_profiles {
            if x < *w {
                return *p;
            }
            x -= w;
        }
        spec.road_profiles.last().unwrap().0
    };

    // Directional roadway construction along an edge from `a` to `bpt`.
    // `fwd` is the travel direction; lanes are offset to the right.
    let build_roadway = |b: &mut Builder, a: Vec2, bpt: Vec2, profile: RoadProfile| -> Roadway {
        let dir = bpt.sub(a).normalized();
        let right = dir.perp_left().scale(-1.0);
        let start = a.add(dir.scale(half));
        let end = bpt.sub(dir.scale(half));
        let mut driving = Vec::new();
        for k in 0..profile.driving_lanes {
            let off = right.scale(lw * (k as f64 + 0.5));
            let idx = b.add_lane(
                vec![start.add(off), end.add(off)],
                LaneKind::Driving,
                spec.speed_limit,
                false,
            );
            driving.push(idx);
        }
        let side = match profile.side {
            SideLane::None => None,
            s => {
                let off = right.scale(lw * (profile.driving_lanes as f64 + 0.5));
                let kind = match s {
                    SideLane::Parking => LaneKind::Parking,
                    SideLane::Shoulder => LaneKind::Shoulder,
                    SideLane::Bike => LaneKind::Bike,
                    SideLane::None => unreachable!(),
                };
                Some(b.add_lane(
                    vec![start.add(off), end.add(off)],
                    kind,
                    spec.speed_limit,
                    false,
                ))
            }
        };
        Roadway { driving, side }
    };

    // Roadways per edge, keyed by (node, incoming heading at that node) for
    // intersection wiring: inbound[(i, j, heading)] = roadway arriving at node
    // (i, j) travelling `heading`; outbound analogous.
    let mut inbound: BTreeMap<(usize, usize, u8), Roadway> = BTreeMap::new();
    let mut outbound: BTreeMap<(usize, usize, u8), Roadway> = BTreeMap::new();
    let hkey = |h: Heading4| match h {
        Heading4::East => 0u8,
        Heading4::West => 1,
        Heading4::North => 2,
        Heading4::South => 3,
    };

    // Horizontal edges.
    for j in 0..ny {
        for i in 0..nx - 1 {
            let profile = sample_profile(&mut rng);
            let a = node(i, j);
            let c = node(i + 1, j);
            let east = build_roadway(&mut b, a, c, profile);
            let west = build_roadway(&mut b, c, a, profile);
            wire_neighbors(&mut b, &east, &west);
            outbound.insert((i, j, hkey(Heading4::East)), east.clone());
            inbound.insert((i + 1, j, hkey(Heading4::East)), east);
            outbound.insert((i + 1, j, hkey(Heading4::West)), west.clone());
            inbound.insert((i, j, hkey(Heading4::West)), west);
        }
    }
    // Vertical edges.
    for j in 0..ny - 1 {
        for i in 0..nx {
            let profile = sample_profile(&mut rng);
            let a = node(i, j);
            let c = node(i, j + 1);
            let north = build_roadway(&mut b, a, c, profile);
            let south = build_roadway(&mut b, c, a, profile);
            wire_neighbors(&mut b, &north, &south);
            outbound.insert((i, j, hkey(Heading4::North)), north.clone());
            inbound.insert((i, j + 1, hkey(Heading4::North)), north);
            outbound.insert((i, j + 1, hkey(Heading4::South)), south.clone());
            inbound.insert((i, j, hkey(Heading4::South)), south);
        }
    }

    // The highway loop splits boundary lanes at the ramp junctions, so it
    // must run before intersection wiring reads lane endpoints.
    if spec.highway_loop {
        build_highway_loop(&mut b, spec, nx, ny, &mut inbound, &outbound, hkey)?;
    }

    // Intersections.
    let mut intersections = Vec::new();
    let mut signals = Vec::new();
    let mut stop_signs = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let iid = IntersectionId(intersections.len() as u32);
            let signalized = match spec.intersection_control {
                ControlPattern::AllSignalized => true,
                ControlPattern::AllStopSigns => false,
                ControlPattern::Checkerboard => (i + j) % 2 == 0,
            };
            let has_crossing = rng.gen_bool(spec.crossing_fraction.clamp(0.0, 1.0));
            let mut incoming = Vec::new();
            let mut connections: BTreeMap<Maneuver, Vec<LaneId>> = BTreeMap::new();
            for h in [Heading4::East, Heading4::West, Heading4::North, Heading4::South] {
                let inb = match inbound.get(&(i, j, hkey(h))) {
                    Some(r) => r.clone(),
                    None => continue,
                };
                for &lidx in &inb.driving {
                    incoming.push(b.lanes[lidx].id);
                }
                let n_in = inb.driving.len();
                let exits: Vec<(Maneuver, Heading4, Roadway)> = [
                    (Maneuver::Straight, h),
                    (Maneuver::Left, h.left_of()),
                    (Maneuver::Right, h.right_of()),
                ]
                .into_iter()
                .filter_map(|(m, oh)| {
                    outbound.get(&(i, j, hkey(oh))).map(|r| (m, oh, r.clone()))
                })
                .collect();
                let make_conn = |b: &mut Builder,
                                     connections: &mut BTreeMap<Maneuver, Vec<LaneId>>,
                                     maneuver: Maneuver,
                                     out_heading: Heading4,
                                     from: usize,
                                     to: usize| {
                    let p0 = *b.lanes[from].centerline.points.last().unwrap();
                    let p1 = b.lanes[to].centerline.points[0];
                    let pts = bezier(p0, heading_angle(h), p1, heading_angle(out_heading));
                    let conn = b.add_lane(pts, LaneKind::Driving, spec.speed_limit, false);
                    b.lanes[conn].intersection = Some(iid);
                    b.lanes[conn].maneuver = Some(maneuver);
                    b.connect(from, conn);
                    b.connect(conn, to);
                    connections
                        .entry(maneuver)
                        .or_default()
                        .push(b.lanes[conn].id);
                };
                let mut has_exit = vec![false; n_in];
                for (maneuver, out_heading, outb) in &exits {
                    let n_out = outb.driving.len();
                    for k in 0..n_in {
                        let feasible = match maneuver {
                            Maneuver::Straight => k < n_out,
                            Maneuver::Left => k == 0,
                            Maneuver::Right => k == n_in - 1,
                        };
                        if !feasible {
                            continue;
                        }
                        let target = match maneuver {
                            Maneuver::Straight => k,
                            Maneuver::Left => 0,
                            Maneuver::Right => n_out - 1,
                        };
                        make_conn(
                            &mut b,
                            &mut connections,
                            *maneuver,
                            *out_heading,
                            inb.driving[k],
                            outb.driving[target],
                        );
                        has_exit[k] = true;
                    }
                }
                // Border intersections can strand lanes whose only usual
                // maneuver points off the grid; give them any available exit.
                for k in 0..n_in {
                    if has_exit[k] {
                        continue;
                    }
                    let (maneuver, out_heading, outb) = exits
                        .first()
                        .expect("intersection with an incoming lane but no exits");
                    let target = k.min(outb.driving.len() - 1);
                    make_conn(
                        &mut b,
                        &mut connections,
                        *maneuver,
                        *out_heading,
                        inb.driving[k],
                        outb.driving[target],
                    );
                }
            }
            for &lane in &incoming {
                if signalized {
                    let h = lane_heading4(&b.lanes[lane.0 as usize]);
                    let phase_group = match h {
                        Heading4::East | Heading4::West => 0,
                        Heading4::North | Heading4::South => 1,
                    };
                    signals.push(SignalSpec {
                        intersection: iid,
                        approach: lane,
                        phase_group,
                    });
                } else {
                    stop_signs.push(StopSpec {
                        intersection: iid,
                        approach: lane,
                    });
                }
            }
            intersections.push(Intersection {
                id: iid,
                center: node(i, j),
                incoming,
                connections,
                signalized,
                has_stop_sign: !signalized,
                has_crossing,
            });
        }
    }

    let graph = LaneGraph {
        lanes: b.lanes,
        intersections,
        signals,
        stop_signs,
    };
    graph.validate()?;
    Ok(graph)
}

fn lane_heading4(lane: &Lane) -> Heading4 {
    let p0 = lane.centerline.points[0];
    let p1 = *lane.centerline.points.last().unwrap();
    let d = p1.sub(p0);
    if d.x.abs() > d.y.abs() {
        if d.x > 0.0 {
            Heading4::East
        } else {
            Heading4::West
        }
    } else if d.y > 0.0 {
        Heading4::North
    } else {
        Heading4::South
    }
}

/// Same-direction adjacency within a roadway plus the opposing innermost link.
fn wire_neighbors(b: &mut Builder, fwd: &Roadway, rev: &Roadway) {
    for dirway in [fwd, rev] {
        for w in 0..dirway.driving.len() {
            let idx = dirway.driving[w];
            if w + 1 < dirway.driving.len() {
                let right = dirway.driving[w + 1];
                b.lanes[idx].right = Some(NeighborRef {
                    id: b.lanes[right].id,
                    same_direction: true,
                });
                b.lanes[right].left = Some(NeighborRef {
                    id: b.lanes[idx].id,
                    same_direction: true,
                });
            } else if let Some(side) = dirway.side {
                b.lanes[idx].right = Some(NeighborRef {
                    id: b.lanes[side].id,
                    same_direction: true,
                });
                b.lanes[side].left = Some(NeighborRef {
                    id: b.lanes[idx].id,
                    same_direction: true,
                });
            }
        }
    }
    // Innermost lanes of opposing directions are lateral neighbors.
    let f0 = fwd.driving[0];
    let r0 = rev.driving[0];
    b.lanes[f0].left = Some(NeighborRef {
        id: b.lanes[r0].id,
        same_direction: false,
    });
    b.lanes[r0].left = Some(NeighborRef {
        id: b.lanes[f0].id,
        same_direction: false,
    });
}

#[allow(clippy::too_many_arguments)]
fn build_highway_loop(
    b: &mut Builder,
    spec: &TownSpec,
    nx: usize,
    ny: usize,
    inbound: &mut BTreeMap<(usize, usize, u8), Roadway>,
    outbound: &BTreeMap<(usize, usize, u8), Roadway>,
    hkey: impl Fn(Heading4) -> u8,
) -> Result<()> {
    let block = spec.block_length;
    let width = (nx - 1) as f64 * block;
    let height = (ny - 1) as f64 * block;
    let offset = 40.0;
    let corner_r = 15.0;
    let v = spec.highway_speed_limit;

    // Counterclockwise one-way loop. Corners rounded with Bezier arcs; the
    // south edge is split at the ramp junctions.
    let sw = Vec2::new(-offset, -offset);
    let se = Vec2::new(width + offset, -offset);
    let ne = Vec2::new(width + offset, height + offset);
    let nw = Vec2::new(-offset, height + offset);

    // Ramp anchors on the south boundary road (y = 0), eastbound innermost
    // lane: on-ramp branches from edge (0,0)-(1,0), off-ramp rejoins edge
    // (1,0)-(2,0).
    let on_road = outbound
        .get(&(0, 0, hkey(Heading4::East)))
        .ok_or_else(|| Error::Config("missing south boundary road".into()))?
        .clone();
    let off_road = outbound
        .get(&(1, 0, hkey(Heading4::East)))
        .ok_or_else(|| Error::Config("missing second south boundary road".into()))?
        .clone();
    let on_lane = on_road.driving[0];
    let off_lane = off_road.driving[0];

    let split_lane = |b: &mut Builder, lane: usize, split_x: f64| -> (usize, usize) {
        let pts = b.lanes[lane].centerline.points.clone();
        let first: Vec<Vec2> = pts.iter().copied().filter(|p| p.x <= split_x).collect();
        let mut second: Vec<Vec2> = vec![*first.last().unwrap()];
        second.extend(pts.iter().copied().filter(|p| p.x > split_x));
        let succs = b.lanes[lane].successors.clone();
        let kind = b.lanes[lane].kind;
        let sl = b.lanes[lane].speed_limit;
        // Reuse the original id for the first piece.
        b.lanes[lane].centerline = Polyline::new(first).densified(1.0);
        // Neighbor refs stay on the first piece; duplicating them would break
        // the mutual back-reference invariant.
        let second_idx = b.add_lane(second, kind, sl, false);
        // Move outgoing connectivity to the second piece.
        b.lanes[lane].successors.clear();
        for s in succs {
            let sidx = s.0 as usize;
            b.lanes[sidx]
                .predecessors
                .retain(|p| p.0 as usize != lane);
            b.connect(second_idx, sidx);
        }
        b.connect(lane, second_idx);
        (lane, second_idx)
    };

    let x_merge_on = 0.5 * block + 50.0;
    let x_branch_off = 0.5 * block + 90.0;
    let x_rejoin = 1.5 * block + 20.0;

    // Split the boundary lanes at the ramp junctions. Downstream intersection
    // wiring must see the tail pieces as the arriving lanes.
    let (a1, a2) = split_lane(b, on_lane, 0.5 * block);
    let (b1, b2) = split_lane(b, off_lane, x_rejoin);
    inbound.get_mut(&(1, 0, hkey(Heading4::East))).unwrap().driving[0] = a2;
    inbound.get_mut(&(2, 0, hkey(Heading4::East))).unwrap().driving[0] = b2;

    // South edge pieces of the loop.
    let y = -offset;
    let s_start = Vec2::new(sw.x + corner_r, y);
    let s_end = Vec2::new(se.x - corner_r, y);
    let s1 = b.add_lane(
        vec![s_start, Vec2::new(x_merge_on, y)],
        LaneKind::Driving,
        v,
        false,
    );
    let s2 = b.add_lane(
        vec![Vec2::new(x_merge_on, y), Vec2::new(x_branch_off, y)],
        LaneKind::Driving,
        v,
        false,
    );
    let s3 = b.add_lane(vec![Vec2::new(x_branch_off, y), s_end], LaneKind::Driving, v, false);
    b.connect(s1, s2);
    b.connect(s2, s3);

    // Remaining loop edges with rounded corners (counterclockwise).
    let east = b.add_lane(
        vec![
            Vec2::new(se.x, se.y + corner_r),
            Vec2::new(ne.x, ne.y - corner_r),
        ],
        LaneKind::Driving,
        v,
        false,
    );
    let north = b.add_lane(
        vec![
            Vec2::new(ne.x - corner_r, ne.y),
            Vec2::new(nw.x + corner_r, nw.y),
        ],
        LaneKind::Driving,
        v,
        false,
    );
    let west = b.add_lane(
        vec![
            Vec2::new(nw.x, nw.y - corner_r),
            Vec2::new(sw.x, sw.y + corner_r),
        ],
        LaneKind::Driving,
        v,
        false,
    );
    let corner = |b: &mut Builder, p0: Vec2, h0: Heading4, p1: Vec2, h1: Heading4| {
        let pts = bezier(p0, heading_angle(h0), p1, heading_angle(h1));
        b.add_lane(pts, LaneKind::Driving, v, false)
    };
    let c_se = corner(
        b,
        s_end,
        Heading4::East,
        Vec2::new(se.x, se.y + corner_r),
        Heading4::North,
    );
    let c_ne = corner(
        b,
        Vec2::new(ne.x, ne.y - corner_r),
        Heading4::North,
        Vec2::new(ne.x - corner_r, ne.y),
        Heading4::West,
    );
    let c_nw = corner(
        b,
        Vec2::new(nw.x + corner_r, nw.y),
        Heading4::West,
        Vec2::new(nw.x, nw.y - corner_r),
        Heading4::South,
    );
    let c_sw = corner(
        b,
        Vec2::new(sw.x, sw.y + corner_r),
        Heading4::South,
        s_start,
        Heading4::East,
    );
    b.connect(s3, c_se);
    b.connect(c_se, east);
    b.connect(east, c_ne);
    b.connect(c_ne, north);
    b.connect(north, c_nw);
    b.connect(c_nw, west);
    b.connect(west, c_sw);
    b.connect(c_sw, s1);

    // On-ramp: branch from a1's end down to the loop merge point.
    let a1_end = *b.lanes[a1].centerline.points.last().unwrap();
    let on_ramp = b.add_lane(
        bezier(a1_end, 0.0, Vec2::new(x_merge_on, y), 0.0),
        LaneKind::Driving,
        v,
        true,
    );
    b.connect(a1, on_ramp);
    b.connect(on_ramp, s2);

    // Off-ramp: branch from s2's end back up to the boundary road.
    let b2_start = b.lanes[b2].centerline.points[0];
    let off_ramp = b.add_lane(
        bezier(Vec2::new(x_branch_off, y), 0.0, b2_start, 0.0),
        LaneKind::Driving,
        v,
        true,
    );
    b.connect(s2, off_ramp);
    b.connect(off_ramp, b2);
    let _ = b1;

    Ok(())
}
