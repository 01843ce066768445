//! 2D geometry primitives shared by the lane graph, simulator, and rasterizer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// 2D cross product (z component).
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n > 0.0 {
            self.scale(1.0 / n)
        } else {
            Vec2::new(1.0, 0.0)
        }
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn rotated(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Unit vector perpendicular to `self`, pointing left.
    pub fn perp_left(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose {
            position: Vec2::new(x, y),
            heading,
        }
    }

    /// Map a point from the frame of this pose into the world frame.
    pub fn local_to_world(&self, p: Vec2) -> Vec2 {
        p.rotated(self.heading).add(self.position)
    }

    /// Map a world point into the frame of this pose.
    pub fn world_to_local(&self, p: Vec2) -> Vec2 {
        p.sub(self.position).rotated(-self.heading)
    }

    pub fn forward(&self) -> Vec2 {
        Vec2::new(self.heading.cos(), self.heading.sin())
    }
}

/// 2D rigid transform (rotation followed by translation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rigid2 {
    pub rotation: f64,
    pub translation: Vec2,
}

impl Rigid2 {
    pub const IDENTITY: Rigid2 = Rigid2 {
        rotation: 0.0,
        translation: Vec2::ZERO,
    };

    pub fn new(rotation: f64, translation: Vec2) -> Self {
        Rigid2 {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotated(self.rotation).add(self.translation)
    }

    pub fn apply_heading(&self, heading: f64) -> f64 {
        heading + self.rotation
    }

    pub fn inverse(&self) -> Rigid2 {
        Rigid2 {
            rotation: -self.rotation,
            translation: self.translation.scale(-1.0).rotated(-self.rotation),
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Rigid2) -> Rigid2 {
        Rigid2 {
            rotation: self.rotation + other.rotation,
            translation: self.apply(other.translation),
        }
    }
}

/// Oriented rectangle (vehicle footprint).
#[derive(Debug, Clone, Copy)]
pub struct OrientedRect {
    pub center: Vec2,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    pub fn corners(&self) -> [Vec2; 4] {
        let f = Vec2::new(self.heading.cos(), self.heading.sin()).scale(self.half_length);
        let l = Vec2::new(-self.heading.sin(), self.heading.cos()).scale(self.half_width);
        [
            self.center.add(f).add(l),
            self.center.add(f).sub(l),
            self.center.sub(f).sub(l),
            self.center.sub(f).add(l),
        ]
    }

    /// Separating-axis overlap test between two oriented rectangles.
    pub fn overlaps(&self, other: &OrientedRect) -> bool {
        let a = self.corners();
        let b = other.corners();
        let axes = [
            Vec2::new(self.heading.cos(), self.heading.sin()),
            Vec2::new(-self.heading.sin(), self.heading.cos()),
            Vec2::new(other.heading.cos(), other.heading.sin()),
            Vec2::new(-other.heading.sin(), other.heading.cos()),
        ];
        for axis in axes {
            let (a_min, a_max) = project(&a, axis);
            let (b_min, b_max) = project(&b, axis);
            if a_max < b_min || b_max < a_min {
                return false;
            }
        }
        true
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let d = p.sub(self.center).rotated(-self.heading);
        d.x.abs() <= self.half_length && d.y.abs() <= self.half_width
    }
}

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let v = c.dot(axis);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a <= -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// A polyline with a precomputed cumulative arc-length table.
/// Serialized as its point list; the table is rebuilt on deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct Polyline {
    pub points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl From<Polyline> for Vec<Vec2> {
    fn from(pl: Polyline) -> Self {
        pl.points
    }
}

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Self {
        let mut pl = Polyline {
            points,
            cumulative: Vec::new(),
        };
        pl.rebuild_table();
        pl
    }

    pub fn rebuild_table(&mut self) {
        self.cumulative.clear();
        self.cumulative.reserve(self.points.len());
        let mut acc = 0.0;
        self.cumulative.push(0.0);
        for w in self.points.windows(2) {
            acc += w[0].dist(w[1]);
            self.cumulative.push(acc);
        }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Pose at arc length `s`, clamped to [0, length].
    pub fn pose_at(&self, s: f64) -> Pose {
        let s = s.clamp(0.0, self.length());
        let idx = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let idx = idx.min(self.points.len().saturating_sub(2));
        let a = self.points[idx];
        let b = self.points[idx + 1];
        let seg = b.sub(a);
        let seg_len = seg.norm();
        let t = if seg_len > 0.0 {
            (s - self.cumulative[idx]) / seg_len
        } else {
            0.0
        };
        Pose {
            position: a.add(seg.scale(t)),
            heading: seg.angle(),
        }
    }

    /// Closest point on the polyline: returns (arc length, distance, signed lateral offset).
    /// The signed offset is positive when `p` is left of the polyline direction.
    pub fn project_point(&self, p: Vec2) -> (f64, f64, f64) {
        let mut best = (0.0, f64::INFINITY, 0.0);
        for i in 0..self.points.len().saturating_sub(1) {
            let a = self.points[i];
            let b = self.points[i + 1];
            let seg = b.sub(a);
            let seg_len2 = seg.dot(seg);
            let t = if seg_len2 > 0.0 {
                (p.sub(a).dot(seg) / seg_len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = a.add(seg.scale(t));
            let d = p.dist(q);
            if d < best.1 {
                let s = self.cumulative[i] + t * seg.norm();
                let side = seg.normalized().cross(p.sub(a));
                best = (s, d, side.signum() * d);
            }
        }
        best
    }

    /// Resample so that no segment exceeds `max_step` meters. Endpoints preserved.
    pub fn densified(&self, max_step: f64) -> Polyline {
        let mut out = Vec::new();
        for w in self.points.windows(2) {
            let seg = w[1].sub(w[0]);
            let len = seg.norm();
            let n = (len / max_step).ceil().max(1.0) as usize;
            for k in 0..n {
                out.push(w[0].add(seg.scale(k as f64 / n as f64)));
            }
        }
        if let Some(last) = self.points.last() {
            out.push(*last);
        }
        Polyline::new(out)
    }

    /// Resample into `n` points with exact Euclidean spacing `step` between
    /// consecutive samples, starting at the first point. Past the end the
    /// final direction is extrapolated straight.
    pub fn resample_chord(&self, step: f64, n: usize) -> Vec<Vec2> {
        assert!(step > 0.0 && self.points.len() >= 2, "contract error");
        let mut out = Vec::with_capacity(n);
        let mut cur = self.points[0];
        out.push(cur);
        let mut seg = 0usize;
        let mut t = 0.0f64;
        while out.len() < n {
            // Find the first point at distance `step` from `cur` along the
            // remaining polyline.
            let mut found = None;
            let mut si = seg;
            let mut ti = t;
            while si + 1 < self.points.len() {
                let a = self.points[si];
                let b = self.points[si + 1];
                let d = b.sub(a);
                let len2 = d.dot(d);
                if len2 > 1e-18 {
                    // Solve |a + u d - cur| = step for u in (ti, 1].
                    let f = a.sub(cur);
                    let bq = 2.0 * f.dot(d);
                    let cq = f.dot(f) - step * step;
                    let disc = bq * bq - 4.0 * len2 * cq;
                    if disc >= 0.0 {
                        let u = (-bq + disc.sqrt()) / (2.0 * len2);
                        if u > ti - 1e-12 && u <= 1.0 + 1e-12 {
                            found = Some((si, u.clamp(0.0, 1.0)));
                            break;
                        }
                    }
                }
                si += 1;
                ti = 0.0;
            }
            match found {
                Some((si, u)) => {
                    let a = self.points[si];
                    let b = self.points[si + 1];
                    cur = a.add(b.sub(a).scale(u));
                    seg = si;
                    t = u;
                    out.push(cur);
                }
                None => {
                    // Continue straight along the final segment direction.
                    let m = self.points.len();
                    let dir = self.points[m - 1].sub(self.points[m - 2]).normalized();
                    let dir = if dir.norm() > 0.5 {
                        dir
                    } else {
                        Vec2::new(1.0, 0.0)
                    };
                    cur = cur.add(dir.scale(step));
                    out.push(cur);
                }
            }
        }
        out
    }
}

// The arc-length table is skipped during (de)serialization; rebuild it.
impl From<Vec<Vec2>> for Polyline {
    fn from(points: Vec<Vec2>) -> Self {
        Polyline::new(points)
    }
}
