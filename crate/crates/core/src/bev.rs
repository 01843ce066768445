//! Privileged bird's-eye-view perception: semantic rasterization into an
//! (optionally augmented) ego-centric grid, a learned per-cell encoder with a
//! streaming temporal cache, and the masking + patchify token bottleneck that
//! compresses the feature grid into scene tokens for the planning head.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geom::{Polyline, Rigid2, Vec2};
use crate::lane_graph::{LaneGraph, LaneKind};
use crate::rng::Rng;
use crate::sim::{SignalPhase, WorldState};
use crate::tensor::nn::{init_linear, linear, sinusoidal_embed};
use crate::tensor::optim::{ParamStore, ParamTape};
use crate::tensor::tape::Var;
use crate::tensor::{Array, Real};

pub const BEV_H: usize = 100;
pub const BEV_W: usize = 100;
/// Meters per cell; the grid covers 50 m x 50 m.
pub const BEV_RESOLUTION: f64 = 0.5;
pub const BEV_CHANNELS: usize = 8;
/// Ego cell sits this fraction of the grid from the rear edge (forward bias).
pub const EGO_REAR_FRACTION: f64 = 0.25;
/// Default fraction of columns masked on each side.
pub const MASK_FRACTION: f64 = 0.2;
/// Width of the learned per-cell feature vectors.
pub const BEV_FEATURE_DIM: usize = 32;
/// Patch sizes with a registered bottleneck projection.
pub const PATCH_SIZES: [usize; 4] = [1, 2, 4, 5];

pub const CH_DRIVABLE: usize = 0;
pub const CH_MARKING: usize = 1;
pub const CH_ROUTE: usize = 2;
pub const CH_OCCUPANCY: usize = 3;
pub const CH_VEL_X: usize = 4;
pub const CH_VEL_Y: usize = 5;
pub const CH_SIGNAL: usize = 6;
pub const CH_STOP_LINE: usize = 7;

pub const MAX_AUG_YAW: f64 = 22.5 * std::f64::consts::PI / 180.0;
pub const MAX_AUG_LATERAL: f64 = 0.75;

/// Rigid ego-frame perturbation applied before rasterizing; labels get the
/// same transform so the pair stays consistent.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentTransform {
    pub gamma: f64,
    pub dy: f64,
}

impl AugmentTransform {
    pub fn identity() -> AugmentTransform {
        AugmentTransform { gamma: 0.0, dy: 0.0 }
    }

    /// Ego frame -> augmented BEV frame.
    pub fn rigid(&self) -> Rigid2 {
        Rigid2::new(self.gamma, Vec2::new(0.0, self.dy))
    }
}

pub fn sample_augmentation(enabled: bool, rng: &mut Rng) -> AugmentTransform {
    if !enabled {
        return AugmentTransform::identity();
    }
    AugmentTransform {
        gamma: rng.gen_range(-MAX_AUG_YAW..=MAX_AUG_YAW),
        dy: rng.gen_range(-MAX_AUG_LATERAL..=MAX_AUG_LATERAL),
    }
}

/// Semantic channel raster in the augmented BEV frame. Cell (0, 0) is the
/// rear-right corner; rows advance forward, columns advance to the left.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub resolution: f64,
    /// Cell-major layout: `(i * w + j) * channels + c`.
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn empty() -> BevGrid {
        BevGrid {
            h: BEV_H,
            w: BEV_W,
            channels: BEV_CHANNELS,
            resolution: BEV_RESOLUTION,
            data: vec![0.0; BEV_H * BEV_W * BEV_CHANNELS],
        }
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.w + j) * self.channels + c]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.data[(i * self.w + j) * self.channels + c] = v;
    }

    fn set_max(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let idx = (i * self.w + j) * self.channels + c;
        if v > self.data[idx] {
            self.data[idx] = v;
        }
    }

    /// Cell containing a point given in the BEV frame, if inside the grid.
    pub fn cell(&self, p: Vec2) -> Option<(usize, usize)> {
        let rear = self.h as f64 * self.resolution * EGO_REAR_FRACTION;
        let half_lat = self.w as f64 * self.resolution / 2.0;
        let i = ((p.x + rear) / self.resolution).floor();
        let j = ((p.y + half_lat) / self.resolution).floor();
        if i >= 0.0 && i < self.h as f64 && j >= 0.0 && j < self.w as f64 {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    /// Center of cell (i, j) in the BEV frame.
    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        let rear = self.h as f64 * self.resolution * EGO_REAR_FRACTION;
        let half_lat = self.w as f64 * self.resolution / 2.0;
        Vec2::new(
            (i as f64 + 0.5) * self.resolution - rear,
            (j as f64 + 0.5) * self.resolution - half_lat,
        )
    }
}

fn paint_strip(
    grid: &mut BevGrid,
    ch: usize,
    line: &Polyline,
    half_w: f64,
    value: f64,
    to_bev: &impl Fn(Vec2) -> Vec2,
    ego_pos: Vec2,
) {
    // Early reject: the whole polyline is out of raster range.
    if let Some(&first) = line.points.first() {
        if first.dist(ego_pos) > line.length() + 80.0 {
            return;
        }
    }
    let step = grid.resolution * 0.5;
    let len = line.length();
    let mut s = 0.0f64;
    loop {
        let pose = line.pose_at(s.min(len));
        if pose.position.dist(ego_pos) < 60.0 {
            let left = Vec2::new(-pose.heading.sin(), pose.heading.cos());
            let mut d = -half_w;
            loop {
                let p = to_bev(pose.position.add(left.scale(d.min(half_w))));
                if let Some((i, j)) = grid.cell(p) {
                    grid.set_max(i, j, ch, value);
                }
                if d >= half_w {
                    break;
                }
                d += step;
            }
        }
        if s >= len {
            break;
        }
        s += step;
    }
}

/// Line across a lane at arc length `s` (stop lines, signal bars).
fn paint_cross_line(
    grid: &mut BevGrid,
    ch: usize,
    line: &Polyline,
    s: f64,
    half_w: f64,
    value: f64,
    to_bev: &impl Fn(Vec2) -> Vec2,
    ego_pos: Vec2,
) {
    let pose = line.pose_at(s);
    if pose.position.dist(ego_pos) > 60.0 {
        return;
    }
    let left = Vec2::new(-pose.heading.sin(), pose.heading.cos());
    let step = grid.resolution * 0.5;
    let mut d = -half_w;
    loop {
        let p = to_bev(pose.position.add(left.scale(d.min(half_w))));
        if let Some((i, j)) = grid.cell(p) {
            grid.set_max(i, j, ch, value);
        }
        if d >= half_w {
            break;
        }
        d += step;
    }
}

/// Rasterize the privileged world view into the augmented BEV frame.
pub fn rasterize(
    world: &WorldState,
    route_path: &Polyline,
    graph: &LaneGraph,
    t: &AugmentTransform,
) -> BevGrid {
    let mut grid = BevGrid::empty();
    let rigid = t.rigid();
    let ego = world.ego.pose;
    let to_bev = |p: Vec2| rigid.apply(ego.world_to_local(p));
    let ego_pos = ego.position;

    for lane in &graph.lanes {
        if lane.kind != LaneKind::Driving {
            continue;
        }
        paint_strip(
            &mut grid,
            CH_DRIVABLE,
            &lane.centerline,
            lane.width / 2.0,
            1.0,
            &to_bev,
            ego_pos,
        );
        for side in [-1.0, 1.0] {
            // Thin boundary lines stand in for lane markings.
            let edge: Vec<Vec2> = lane
                .centerline
                .points
                .iter()
                .zip(lane.centerline.points.iter().skip(1))
                .map(|(&a, &b)| {
                    let dir = b.sub(a).normalized();
                    a.add(dir.perp_left().scale(side * lane.width / 2.0))
                })
                .collect();
            if edge.len() >= 2 {
                paint_strip(
                    &mut grid,
                    CH_MARKING,
                    &Polyline::new(edge),
                    0.1,
                    1.0,
                    &to_bev,
                    ego_pos,
                );
            }
        }
    }

    paint_strip(&mut grid, CH_ROUTE, route_path, 1.0, 1.0, &to_bev, ego_pos);

    for a in world.actors.iter().filter(|a| a.active) {
        if a.pose.position.dist(ego_pos) > 60.0 {
            continue;
        }
        let h_bev = a.pose.heading - ego.heading + t.gamma;
        let (vx, vy) = (a.v * h_bev.cos(), a.v * h_bev.sin());
        let fwd = Vec2::new(a.pose.heading.cos(), a.pose.heading.sin());
        let left = fwd.perp_left();
        let step = grid.resolution * 0.5;
        let mut u = -a.extent.0;
        loop {
            let mut v = -a.extent.1;
            loop {
                let p = a
                    .pose
                    .position
                    .add(fwd.scale(u.min(a.extent.0)))
                    .add(left.scale(v.min(a.extent.1)));
                if let Some((i, j)) = grid.cell(to_bev(p)) {
                    grid.set_max(i, j, CH_OCCUPANCY, 1.0);
                    grid.set(i, j, CH_VEL_X, vx);
                    grid.set(i, j, CH_VEL_Y, vy);
                }
                if v >= a.extent.1 {
                    break;
                }
                v += step;
            }
            if u >= a.extent.0 {
                break;
            }
            u += step;
        }
    }

    for (idx, sig) in graph.signals.iter().enumerate() {
        let lane = graph.lane(sig.approach);
        let value = match world.signal_phases.get(idx) {
            Some(SignalPhase::Red) => 1.0,
            Some(SignalPhase::Green) => 0.5,
            None => continue,
        };
        paint_cross_line(
            &mut grid,
            CH_SIGNAL,
            &lane.centerline,
            lane.length(),
            lane.width / 2.0,
            value,
            &to_bev,
            ego_pos,
        );
    }
    for stop in &graph.stop_signs {
        let lane = graph.lane(stop.approach);
        paint_cross_line(
            &mut grid,
            CH_STOP_LINE,
            &lane.centerline,
            lane.length(),
            lane.width / 2.0,
            1.0,
            &to_bev,
            ego_pos,
        );
    }
    grid
}

/// Apply the augmentation to ego-frame label waypoints; speeds are invariant.
pub fn transform_labels(points: &[Vec2], t: &AugmentTransform) -> Vec<Vec2> {
    let r = t.rigid();
    points.iter().map(|&p| r.apply(p)).collect()
}

/// Previous-step feature cache for streaming rollouts; one per episode.
#[derive(Debug, Clone, Default)]
pub struct BevCache {
    prev: Option<Array>,
}

impl BevCache {
    pub fn new() -> BevCache {
        BevCache::default()
    }

    /// Invalidate at snippet/episode boundaries.
    pub fn reset(&mut self) {
        self.prev = None;
    }

    pub fn is_valid(&self) -> bool {
        self.prev.is_some()
    }
}

/// Register the BEV encoder and the per-patch-size bottleneck projections.
pub fn init_bev(store: &mut ParamStore, token_dim: usize, rng: &mut Rng) {
    init_linear(store, "bev.enc.in", BEV_CHANNELS, BEV_FEATURE_DIM, false, rng);
    init_linear(
        store,
        "bev.enc.out",
        BEV_FEATURE_DIM,
        BEV_FEATURE_DIM,
        false,
        rng,
    );
    init_linear(
        store,
        "bev.blend",
        2 * BEV_FEATURE_DIM,
        BEV_FEATURE_DIM,
        false,
        rng,
    );
    // Zero-init gate: the cache blend starts as a no-op.
    store.register("bev.gate", Array::zeros(&[1, BEV_FEATURE_DIM]));
    for p in PATCH_SIZES {
        init_linear(
            store,
            &format!("bev.proj{p}"),
            p * p * BEV_FEATURE_DIM,
            token_dim,
            false,
            rng,
        );
    }
}

/// Fixed 2D sinusoidal positional encoding, half the dims per axis.
pub fn positional_encoding(h: usize, w: usize, dim: usize) -> Array {
    assert!(dim % 4 == 0, "contract error: PE dim must be divisible by 4");
    let mut data = Vec::with_capacity(h * w * dim);
    for i in 0..h {
        let row = sinusoidal_embed(i as Real, dim / 2);
        for j in 0..w {
            let col = sinusoidal_embed(j as Real, dim / 2);
            data.extend_from_slice(&row);
            data.extend_from_slice(&col);
        }
    }
    Array::new(vec![h * w, dim], data)
}

/// Memoized positional codes; the table for one grid geometry never changes.
fn cached_positional_encoding(h: usize, w: usize, dim: usize) -> Array {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize), Array>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    map.entry((h, w, dim))
        .or_insert_with(|| positional_encoding(h, w, dim))
        .clone()
}

/// Per-cell learned encoding + positional code + gated temporal cache blend.
/// Gradients do not flow into cached features (truncated across steps).
///
/// The per-cell MLP is position-independent, and most raster cells share the
/// same channel vector, so it runs once per distinct cell value; the result
/// is scattered back with a differentiable gather.
pub fn encode(pt: &mut ParamTape, grid: &BevGrid, cache: &mut BevCache) -> Var {
    let cells = grid.h * grid.w;
    let ch = grid.channels;
    let mut uniq: Vec<Real> = Vec::new();
    let mut index = Vec::with_capacity(cells);
    let mut seen: std::collections::HashMap<Vec<u64>, usize> = std::collections::HashMap::new();
    for c in 0..cells {
        let row = &grid.data[c * ch..(c + 1) * ch];
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let id = *seen.entry(key).or_insert_with(|| {
            uniq.extend(row.iter().map(|&v| v as Real));
            uniq.len() / ch - 1
        });
        index.push(id);
    }
    let n_uniq = uniq.len() / ch;
    let x = pt.tape.constant(Array::new(vec![n_uniq, ch], uniq));
    let h = linear(pt, "bev.enc.in", x);
    let h = pt.tape.gelu(h);
    let f = linear(pt, "bev.enc.out", h);
    let f = pt.tape.gather_rows(f, &index);
    let pe = pt
        .tape
        .constant(cached_positional_encoding(grid.h, grid.w, BEV_FEATURE_DIM));
    let mut f = pt.tape.add(f, pe);
    if let Some(prev) = cache.prev.clone() {
        let prev = pt.tape.constant(prev);
        let cat = pt.tape.concat_cols(&[f, prev]);
        let blend = linear(pt, "bev.blend", cat);
        let blend = pt.tape.tanh(blend);
        let gate = pt.param("bev.gate");
        let gated = pt.tape.mul_row(blend, gate);
        f = pt.tape.add(f, gated);
    }
    cache.prev = Some(pt.tape.value(f).clone());
    f
}

/// Column validity flags: the `floor(frac * w)` left- and right-most columns
/// are invalid. Feature data is never mutated; consumers treat the flags as a
/// key padding mask.
pub fn mask(h: usize, w: usize, frac: f64) -> Vec<bool> {
    assert!(
        (0.0..0.5).contains(&frac),
        "contract error: mask fraction {frac} outside [0, 0.5)"
    );
    let m = (frac * w as f64).floor() as usize;
    (0..h * w).map(|idx| (m..w - m).contains(&(idx % w))).collect()
}

/// Token field after patchifying: `h x w` grid of projected tokens plus
/// per-token validity (a token is valid iff all constituent cells are).
pub struct SceneTokens {
    pub tokens: Var,
    pub valid: Vec<bool>,
    pub h: usize,
    pub w: usize,
}

impl SceneTokens {
    /// Dimensions of the fully-valid token block (masking is column-only).
    pub fn valid_dims(&self) -> (usize, usize) {
        let cols = (0..self.w)
            .filter(|&pj| (0..self.h).all(|pi| self.valid[pi * self.w + pj]))
            .count();
        (self.h, cols)
    }
}

/// Pixel-unshuffle `p x p` patches of the feature grid and project each to
/// the token dimension. Cells past the grid edge pad as invalid.
pub fn patchify(
    pt: &mut ParamTape,
    features: Var,
    validity: &[bool],
    h: usize,
    w: usize,
    p: usize,
) -> Result<SceneTokens> {
    if p == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let proj = format!("bev.proj{p}");
    if !pt.has_param(&format!("{proj}.w")) {
        return Err(Error::Config(format!(
            "no bottleneck projection registered for patch size {p}"
        )));
    }
    let d = pt.tape.value(features).cols();
    assert_eq!(
        pt.tape.value(features).rows(),
        h * w,
        "contract error: feature rows do not match grid dims"
    );
    assert_eq!(validity.len(), h * w, "contract error: validity length");
    let hp = h.div_ceil(p);
    let wp = w.div_ceil(p);
    let zero = pt.tape.constant(Array::zeros(&[1, d]));
    let padded = pt.tape.concat_rows(&[features, zero]);
    let mut indices = Vec::with_capacity(hp * wp * p * p);
    let mut valid = Vec::with_capacity(hp * wp);
    for pi in 0..hp {
        for pj in 0..wp {
            let mut all = true;
            for a in 0..p {
                for b in 0..p {
                    let (i, j) = (pi * p + a, pj * p + b);
                    if i < h && j < w {
                        indices.push(i * w + j);
                        all &= validity[i * w + j];
                    } else {
                        indices.push(h * w);
                        all = false;
                    }
                }
            }
            valid.push(all);
        }
    }
    let gathered = pt.tape.gather_rows(padded, &indices);
    let flat = pt.tape.reshape(gathered, &[hp * wp, p * p * d]);
    let tokens = linear(pt, &proj, flat);
    Ok(SceneTokens {
        tokens,
        valid,
        h: hp,
        w: wp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::lane_graph::{Lane, LaneId};
    use crate::rng;
    use crate::sim::{Actor, ActorKind, EgoState};
    use crate::tensor::nn::{init_mha, multi_head_attention};
    use crate::tensor::tape::Tape;

    fn tiny_graph() -> LaneGraph {
        let lane = Lane {
            id: LaneId(0),
            centerline: Polyline::new(vec![Vec2::new(-30.0, 0.0), Vec2::new(80.0, 0.0)])
                .densified(1.0),
            width: 3.5,
            kind: LaneKind::Driving,
            successors: vec![],
            predecessors: vec![],
            left: None,
            right: None,
            speed_limit: 8.0,
            is_ramp: false,
            intersection: None,
            maneuver: None,
        };
        LaneGraph {
            lanes: vec![lane],
            intersections: vec![],
            signals: vec![],
            stop_signs: vec![],
        }
    }

    fn world_with_actor_ahead(dist: f64) -> WorldState {
        WorldState {
            t: 0.0,
            ego: EgoState {
                pose: Pose::new(0.0, 0.0, 0.0),
                v: 5.0,
                steer: 0.0,
                wheelbase: 2.8,
            },
            actors: vec![Actor {
                kind: ActorKind::Car,
                pose: Pose::new(dist, 0.0, 0.0),
                v: 3.0,
                script: 0,
                extent: (2.2, 0.95),
                active: true,
            }],
            signal_phases: vec![],
        }
    }

    fn route() -> Polyline {
        Polyline::new(vec![Vec2::new(-30.0, 0.0), Vec2::new(80.0, 0.0)]).densified(1.0)
    }

    #[test]
    fn augmentation_disabled_is_identity() {
        let mut r = rng::stream(1, "bev-test");
        let t = sample_augmentation(false, &mut r);
        assert_eq!(t, AugmentTransform::identity());
        let p = t.rigid().apply(Vec2::new(3.0, -2.0));
        assert_eq!(p, Vec2::new(3.0, -2.0));
    }

    #[test]
    fn augmentation_samples_stay_in_range_with_near_zero_mean() {
        let mut r = rng::stream(2, "bev-test");
        let mut sum = 0.0;
        for _ in 0..10000 {
            let t = sample_augmentation(true, &mut r);
            assert!(t.gamma.abs() <= MAX_AUG_YAW);
            assert!(t.dy.abs() <= MAX_AUG_LATERAL);
            sum += t.gamma;
        }
        let mean_deg = (sum / 10000.0).to_degrees();
        assert!(mean_deg.abs() < 0.5, "mean {mean_deg} deg");
    }

    #[test]
    fn pure_lateral_shift_moves_the_origin() {
        let t = AugmentTransform { gamma: 0.0, dy: 0.75 };
        let p = t.rigid().apply(Vec2::new(0.0, 0.0));
        assert!((p.x - 0.0).abs() < 1e-12 && (p.y - 0.75).abs() < 1e-12);
    }

    #[test]
    fn actor_ahead_paints_rows_in_front_of_the_ego_cell() {
        let g = tiny_graph();
        let grid = rasterize(
            &world_with_actor_ahead(10.0),
            &route(),
            &g,
            &AugmentTransform::identity(),
        );
        // Ego cell row: 25% from the rear of a 100-row grid.
        let ego_row = (BEV_H as f64 * EGO_REAR_FRACTION) as usize;
        let actor_row = ego_row + (10.0 / BEV_RESOLUTION) as usize;
        assert_eq!(grid.at(actor_row, BEV_W / 2, CH_OCCUPANCY), 1.0);
        assert_eq!(grid.at(ego_row, BEV_W / 2, CH_OCCUPANCY), 0.0);
        assert!(grid.at(actor_row, BEV_W / 2, CH_VEL_X) > 2.9);
        assert_eq!(grid.at(actor_row, BEV_W / 2, CH_DRIVABLE), 1.0);
        assert_eq!(grid.at(actor_row, BEV_W / 2, CH_ROUTE), 1.0);
    }

    #[test]
    fn half_meter_lateral_shift_moves_occupancy_one_column() {
        let g = tiny_graph();
        let base = rasterize(
            &world_with_actor_ahead(10.0),
            &route(),
            &g,
            &AugmentTransform::identity(),
        );
        let shifted = rasterize(
            &world_with_actor_ahead(10.0),
            &route(),
            &g,
            &AugmentTransform { gamma: 0.0, dy: 0.5 },
        );
        for i in 0..BEV_H {
            for j in 1..BEV_W {
                assert_eq!(
                    shifted.at(i, j, CH_OCCUPANCY),
                    base.at(i, j - 1, CH_OCCUPANCY),
                    "cell ({i}, {j})"
                );
            }
        }
    }

    #[test]
    fn empty_world_has_zero_actor_channels() {
        let g = tiny_graph();
        let mut world = world_with_actor_ahead(10.0);
        world.actors.clear();
        let grid = rasterize(&world, &route(), &g, &AugmentTransform::identity());
        for i in 0..BEV_H {
            for j in 0..BEV_W {
                for c in [CH_OCCUPANCY, CH_VEL_X, CH_VEL_Y] {
                    assert_eq!(grid.at(i, j, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn rasterize_commutes_with_the_rigid_transform() {
        let g = tiny_graph();
        let t = AugmentTransform { gamma: 0.2, dy: 0.5 };
        let mut world = world_with_actor_ahead(12.0);
        world.actors.push(Actor {
            kind: ActorKind::Car,
            pose: Pose::new(20.0, 1.5, 0.4),
            v: 0.0,
            script: 0,
            extent: (2.2, 0.95),
            active: true,
        });
        let base = rasterize(&world, &route(), &g, &AugmentTransform::identity());
        let aug = rasterize(&world, &route(), &g, &t);
        let inv = t.rigid().inverse();
        let mut agree = 0usize;
        let mut total = 0usize;
        for i in 0..BEV_H {
            for j in 0..BEV_W {
                let p_ego = inv.apply(aug.cell_center(i, j));
                let Some((bi, bj)) = base.cell(p_ego) else {
                    continue;
                };
                total += 1;
                let a = aug.at(i, j, CH_OCCUPANCY) > 0.5;
                let b = base.at(bi, bj, CH_OCCUPANCY) > 0.5;
                if a == b {
                    agree += 1;
                }
            }
        }
        assert!(
            agree as f64 >= 0.99 * total as f64,
            "{agree}/{total} cells agree"
        );
    }

    #[test]
    fn label_transform_roundtrips_through_the_inverse() {
        let t = AugmentTransform { gamma: 0.3, dy: -0.6 };
        let pts = vec![Vec2::new(1.0, 2.0), Vec2::new(-3.0, 0.5)];
        let fwd = transform_labels(&pts, &t);
        assert!((fwd[0].y - (1.0 * 0.3f64.sin() + 2.0 * 0.3f64.cos() - 0.6)).abs() < 1e-12);
        let inv = t.rigid().inverse();
        for (orig, f) in pts.iter().zip(&fwd) {
            let back = inv.apply(*f);
            assert!(back.dist(*orig) < 1e-9);
        }
        let id = transform_labels(&pts, &AugmentTransform::identity());
        assert_eq!(id, pts);
        let dy = AugmentTransform { gamma: 0.0, dy: 0.4 };
        for (orig, moved) in pts.iter().zip(transform_labels(&pts, &dy)) {
            assert!((moved.y - orig.y - 0.4).abs() < 1e-12 && moved.x == orig.x);
        }
    }

    #[test]
    fn mask_column_counts_match_floor_arithmetic() {
        let v = mask(BEV_H, BEV_W, MASK_FRACTION);
        let valid_cols = (0..BEV_W).filter(|&j| v[j]).count();
        assert_eq!(valid_cols, 60);
        assert!(mask(4, 10, 0.2).iter().filter(|&&b| b).count() == 4 * 6);
        assert!(mask(3, 7, 0.0).iter().all(|&b| b));
    }

    fn small_store(d_token: usize) -> ParamStore {
        let mut r = rng::stream(7, "bev-test");
        let mut store = ParamStore::new();
        init_bev(&mut store, d_token, &mut r);
        store
    }

    #[test]
    fn patchify_shapes_follow_the_table() {
        let store = small_store(16);
        let v = mask(BEV_H, BEV_W, MASK_FRACTION);
        for (p, expect) in [(1, (100, 60)), (2, (50, 30)), (4, (25, 15)), (5, (20, 12))] {
            let mut tape = Tape::new();
            let mut pt = ParamTape::new(&mut tape, &store);
            let f = pt
                .tape
                .constant(Array::zeros(&[BEV_H * BEV_W, BEV_FEATURE_DIM]));
            let toks = patchify(&mut pt, f, &v, BEV_H, BEV_W, p).unwrap();
            assert_eq!(toks.valid_dims(), expect, "p = {p}");
            assert_eq!(pt.tape.value(toks.tokens).cols(), 16);
            assert_eq!(pt.tape.value(toks.tokens).rows(), (100 / p) * (100 / p));
        }
        // p = 1 keeps one token per cell, projection still applied.
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let f = pt
            .tape
            .constant(Array::zeros(&[BEV_H * BEV_W, BEV_FEATURE_DIM]));
        let toks = patchify(&mut pt, f, &v, BEV_H, BEV_W, 1).unwrap();
        assert_eq!(toks.valid.iter().filter(|&&b| b).count(), 100 * 60);
    }

    #[test]
    fn zero_patch_size_is_a_configuration_error() {
        let store = small_store(16);
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let f = pt.tape.constant(Array::zeros(&[4, BEV_FEATURE_DIM]));
        assert!(matches!(
            patchify(&mut pt, f, &[true; 4], 2, 2, 0),
            Err(Error::Config(_))
        ));
        let f = pt.tape.constant(Array::zeros(&[4, BEV_FEATURE_DIM]));
        assert!(matches!(
            patchify(&mut pt, f, &[true; 4], 2, 2, 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partially_covered_patches_are_invalid() {
        // 10-wide grid, frac 0.2 -> cols 2..8 valid; p=4 makes the first
        // patch straddle masked and valid cells.
        let store = small_store(8);
        let v = mask(4, 10, 0.2);
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let f = pt.tape.constant(Array::zeros(&[40, BEV_FEATURE_DIM]));
        let toks = patchify(&mut pt, f, &v, 4, 10, 4).unwrap();
        assert_eq!((toks.h, toks.w), (1, 3));
        assert_eq!(toks.valid, vec![false, true, false]);
    }

    #[test]
    fn masked_cell_contents_cannot_reach_attention_output() {
        let mut r = rng::stream(9, "bev-test");
        let d = BEV_FEATURE_DIM;
        let mut store = small_store(d);
        init_mha(&mut store, "probe", d, &mut r);
        let (h, w, p) = (10, 10, 2);
        let v = mask(h, w, 0.2);
        let base = Array::randn(&[h * w, d], &mut r);
        let mut poisoned = base.clone();
        for (idx, &ok) in v.iter().enumerate() {
            if !ok {
                for c in 0..d {
                    poisoned.set2(idx, c, 1e6);
                }
            }
        }
        let q_arr = Array::randn(&[3, d], &mut r);
        let run = |cells: &Array| -> Array {
            let mut tape = Tape::new();
            let mut pt = ParamTape::new(&mut tape, &store);
            let f = pt.tape.constant(cells.clone());
            let toks = patchify(&mut pt, f, &v, h, w, p).unwrap();
            let q = pt.tape.constant(q_arr.clone());
            let out =
                multi_head_attention(&mut pt, "probe", q, toks.tokens, Some(&toks.valid), 2);
            pt.tape.value(out).clone()
        };
        let a = run(&base);
        let b = run(&poisoned);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    fn small_grid() -> BevGrid {
        let g = tiny_graph();
        rasterize(
            &world_with_actor_ahead(8.0),
            &route(),
            &g,
            &AugmentTransform::identity(),
        )
    }

    #[test]
    fn encode_ignores_an_invalidated_cache() {
        let store = small_store(16);
        let grid = small_grid();
        let run = |cache: &mut BevCache| -> Array {
            let mut tape = Tape::new();
            let mut pt = ParamTape::new(&mut tape, &store);
            let f = encode(&mut pt, &grid, cache);
            pt.tape.value(f).clone()
        };
        let mut fresh = BevCache::new();
        let a = run(&mut fresh);
        let mut stale = BevCache::new();
        stale.prev = Some(Array::full(&[BEV_H * BEV_W, BEV_FEATURE_DIM], 1e6));
        stale.reset();
        let b = run(&mut stale);
        assert_eq!(a, b);
        assert!(fresh.is_valid());
    }

    #[test]
    fn zero_gate_matches_the_cache_free_encoding() {
        // init_bev zero-initializes the gate, so a valid cache is a no-op.
        let store = small_store(16);
        let grid = small_grid();
        let mut cache = BevCache::new();
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let first = encode(&mut pt, &grid, &mut cache);
        let first = pt.tape.value(first).clone();
        assert!(cache.is_valid());
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let second = encode(&mut pt, &grid, &mut cache);
        let second = pt.tape.value(second).clone();
        assert_eq!(first, second);
        assert!(second.all_finite());
    }

    #[test]
    fn nonzero_gate_blends_the_cache_in() {
        let mut store = small_store(16);
        for g in store.get_mut("bev.gate").data_mut() {
            *g = 0.5;
        }
        let grid = small_grid();
        let mut cache = BevCache::new();
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let first = encode(&mut pt, &grid, &mut cache);
        let first = pt.tape.value(first).clone();
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let second = encode(&mut pt, &grid, &mut cache);
        let second = pt.tape.value(second).clone();
        assert_ne!(first, second);
        assert!(second.all_finite());
    }
}
