//! Disentangled lateral/longitudinal PID control over a path + speed plan,
//! plus monotone Hermite resampling that converts temporal trajectories into
//! the same interface.

use crate::geom::Vec2;
use crate::sim::Controls;

/// Temporal waypoints in the ego frame at fixed `dt` spacing, starting at
/// `dt` (the ego position itself is implicit at the origin).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Vec2>,
    pub dt: f64,
}

/// Spatial path at 1 m spacing plus a temporal speed profile, ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpeed {
    pub path: Vec<Vec2>,
    pub speeds: Vec<f64>,
}

impl From<crate::expert::ExpertPlan> for PathSpeed {
    fn from(p: crate::expert::ExpertPlan) -> Self {
        PathSpeed {
            path: p.path,
            speeds: p.speeds,
        }
    }
}

/// Fritsch-Carlson monotone cubic Hermite slopes for uniformly spaced data.
fn pchip_slopes(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    assert!(n >= 2, "contract error: need at least 2 samples");
    let d: Vec<f64> = y.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let mut m = vec![0.0; n];
    m[0] = d[0];
    m[n - 1] = d[n - 2];
    for i in 1..n - 1 {
        if d[i - 1] * d[i] <= 0.0 {
            m[i] = 0.0;
        } else {
            // Harmonic mean keeps the interpolant monotone on each interval.
            m[i] = 2.0 * d[i - 1] * d[i] / (d[i - 1] + d[i]);
        }
    }
    // Endpoint limiter (three-point rule would also work; clamping suffices
    // for uniform data).
    for (i, di) in [(0usize, d[0]), (n - 1, d[n - 2])] {
        if m[i] * di <= 0.0 {
            m[i] = 0.0;
        } else if m[i].abs() > 3.0 * di.abs() {
            m[i] = 3.0 * di;
        }
    }
    m
}

fn hermite_eval(y0: f64, y1: f64, m0: f64, m1: f64, h: f64, u: f64) -> f64 {
    let u2 = u * u;
    let u3 = u2 * u;
    y0 * (2.0 * u3 - 3.0 * u2 + 1.0)
        + m0 * h * (u3 - 2.0 * u2 + u)
        + y1 * (-2.0 * u3 + 3.0 * u2)
        + m1 * h * (u3 - u2)
}

/// Fit monotone piecewise-cubic Hermite curves to x(t), y(t), then extract a
/// path at exact 1 m spacing and speeds by central difference quotients.
///
/// A near-stationary trajectory (total length < 0.5 m) returns the stopped
/// plan: the ego position with zero speeds.
pub fn hermite_resample(traj: &Trajectory) -> PathSpeed {
    assert!(traj.points.len() >= 3, "contract error: need >= 3 waypoints");
    let dt = traj.dt;
    // Prepend the implicit ego origin so the fit starts at the ego.
    let mut pts = Vec::with_capacity(traj.points.len() + 1);
    pts.push(Vec2::new(0.0, 0.0));
    pts.extend_from_slice(&traj.points);

    let n = pts.len();
    let total: f64 = pts.windows(2).map(|w| w[1].dist(w[0])).sum();
    let speeds = {
        let mut v = Vec::with_capacity(n - 1);
        for i in 1..n {
            let s = if i + 1 < n {
                pts[i + 1].dist(pts[i - 1]) / (2.0 * dt)
            } else {
                pts[i].dist(pts[i - 1]) / dt
            };
            v.push(s);
        }
        v
    };
    if total < 0.5 {
        return PathSpeed {
            path: vec![Vec2::new(0.0, 0.0)],
            speeds: vec![0.0; speeds.len()],
        };
    }

    let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
    let mx = pchip_slopes(&xs, dt);
    let my = pchip_slopes(&ys, dt);

    // Fine sub-sampling builds the arc-length table for spacing extraction.
    const SUBS: usize = 64;
    let mut dense = Vec::with_capacity((n - 1) * SUBS + 1);
    for i in 0..n - 1 {
        for k in 0..SUBS {
            let u = k as f64 / SUBS as f64;
            dense.push(Vec2::new(
                hermite_eval(xs[i], xs[i + 1], mx[i], mx[i + 1], dt, u),
                hermite_eval(ys[i], ys[i + 1], my[i], my[i + 1], dt, u),
            ));
        }
    }
    dense.push(*pts.last().unwrap());
    dense.dedup_by(|a, b| a.dist(*b) < 1e-9);
    let dense = crate::geom::Polyline::new(dense);
    let n_path = dense.length().floor() as usize + 1;
    let path = dense.resample_chord(1.0, n_path.max(2));
    PathSpeed { path, speeds }
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub p_steer: f64,
    pub i_steer: f64,
    pub d_steer: f64,
    pub p_speed: f64,
    pub i_speed: f64,
    pub d_speed: f64,
    /// Lookahead distance = base + gain * v.
    pub lookahead_base: f64,
    pub lookahead_gain: f64,
    /// Which speed-profile index the longitudinal loop tracks.
    pub target_index: usize,
    pub max_steer: f64,
    pub accel_limits: (f64, f64),
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            p_steer: 1.8,
            i_steer: 0.0,
            d_steer: 0.15,
            p_speed: 1.5,
            i_speed: 0.2,
            d_speed: 0.0,
            lookahead_base: 2.5,
            lookahead_gain: 0.5,
            target_index: 2,
            max_steer: 0.6,
            accel_limits: (-6.0, 3.0),
        }
    }
}

/// Per-episode PID state; one instance per rollout.
#[derive(Debug, Clone)]
pub struct Controller {
    pub cfg: ControllerConfig,
    lat_i: f64,
    lat_prev: Option<f64>,
    lon_i: f64,
    lon_prev: Option<f64>,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Controller {
        Controller {
            cfg,
            lat_i: 0.0,
            lat_prev: None,
            lon_i: 0.0,
            lon_prev: None,
        }
    }

    /// Point at chord distance `d` along an ego-frame path.
    fn lookahead_point(path: &[Vec2], d: f64) -> Vec2 {
        let mut acc = 0.0;
        let mut prev = Vec2::new(0.0, 0.0);
        for &p in path {
            let seg = p.dist(prev);
            if acc + seg >= d && seg > 1e-9 {
                let u = (d - acc) / seg;
                return prev.add(p.sub(prev).scale(u));
            }
            acc += seg;
            prev = p;
        }
        *path.last().unwrap_or(&Vec2::new(1.0, 0.0))
    }

    pub fn steer(&mut self, path: &[Vec2], v: f64, dt: f64) -> f64 {
        if path.len() < 2 {
            return 0.0;
        }
        let d = self.cfg.lookahead_base + self.cfg.lookahead_gain * v;
        let target = Self::lookahead_point(path, d);
        if target.norm() < 1e-6 {
            return 0.0;
        }
        let err = target.y.atan2(target.x);
        self.lat_i = (self.lat_i + err * dt).clamp(-0.5, 0.5);
        let de = self.lat_prev.map_or(0.0, |p| (err - p) / dt);
        self.lat_prev = Some(err);
        (self.cfg.p_steer * err + self.cfg.i_steer * self.lat_i + self.cfg.d_steer * de)
            .clamp(-self.cfg.max_steer, self.cfg.max_steer)
    }

    pub fn accel(&mut self, speeds: &[f64], v: f64, dt: f64) -> f64 {
        assert!(!speeds.is_empty(), "contract error: empty speed profile");
        let target = speeds[self.cfg.target_index.min(speeds.len() - 1)];
        let err = target - v;
        self.lon_i = (self.lon_i + err * dt).clamp(-1.0, 1.0);
        let de = self.lon_prev.map_or(0.0, |p| (err - p) / dt);
        self.lon_prev = Some(err);
        (self.cfg.p_speed * err + self.cfg.i_speed * self.lon_i + self.cfg.d_speed * de)
            .clamp(self.cfg.accel_limits.0, self.cfg.accel_limits.1)
    }

    pub fn control(&mut self, plan: &PathSpeed, v: f64, dt: f64) -> Controls {
        Controls {
            steer: self.steer(&plan.path, v, dt),
            accel: self.accel(&plan.speeds, v, dt),
        }
    }
}
