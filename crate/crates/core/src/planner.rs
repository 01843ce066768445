//! Transformer planning head: adaLN-Zero decoder blocks shared across the
//! point-estimator / diffusion modes and the trajectory / path+speed query
//! semantics, plus the DDIM schedule, training objective, and sampler. Only
//! query construction, the conditioning τ-term, and the output heads differ
//! between configurations; the block stack is identical.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bev::{BevCache, BevGrid, SceneTokens, BEV_FEATURE_DIM};
use crate::controller::{PathSpeed, Trajectory};
use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::rng::Rng;
use crate::route_gen::Command;
use crate::tensor::nn::{
    adaln_zero, init_adaln, init_linear, init_mha, linear, multi_head_attention,
    sinusoidal_embed,
};
use crate::tensor::optim::{ParamStore, ParamTape};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Array, Real};

/// Temporal waypoints: 15 steps at 0.2 s = 3 s horizon.
pub const N_T: usize = 15;
/// Spatial waypoints at 1 m spacing.
pub const N_P: usize = 30;
pub const PLAN_DT: f64 = 0.2;
/// Plan-loss weight relative to auxiliary heads.
pub const LAMBDA_PLAN: Real = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerMode {
    PointEstimator,
    Diffusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    Trajectory,
    PathSpeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub n_t: usize,
    pub n_p: usize,
    pub mode: PlannerMode,
    pub representation: Representation,
    pub refinement: bool,
    /// Token bottleneck patch size.
    pub patch: usize,
    /// Fraction of BEV columns masked per side.
    pub mask_frac: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            layers: 4,
            dim: 128,
            heads: 4,
            n_t: N_T,
            n_p: N_P,
            mode: PlannerMode::PointEstimator,
            representation: Representation::Trajectory,
            refinement: true,
            patch: 4,
            mask_frac: crate::bev::MASK_FRACTION,
        }
    }
}

impl PlannerConfig {
    /// Flattened plan dimensionality: (x, y) waypoints plus speeds.
    pub fn plan_dim(&self) -> usize {
        match self.representation {
            Representation::Trajectory => 2 * self.n_t,
            Representation::PathSpeed => 2 * self.n_p + self.n_t,
        }
    }

    /// Number of planning queries.
    pub fn n_queries(&self) -> usize {
        match self.representation {
            Representation::Trajectory => self.n_t,
            Representation::PathSpeed => self.n_p + self.n_t,
        }
    }

    /// Number of spatial (x, y) waypoints among the queries.
    pub fn n_waypoints(&self) -> usize {
        match self.representation {
            Representation::Trajectory => self.n_t,
            Representation::PathSpeed => self.n_p,
        }
    }
}

/// Either plan representation, denormalized to meters / m/s.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanOutput {
    Trajectory(Trajectory),
    PathSpeed(PathSpeed),
}

/// Decode a flat denormalized plan vector; speeds clamp at zero.
pub fn plan_from_flat(repr: Representation, flat: &[Real]) -> PlanOutput {
    match repr {
        Representation::Trajectory => {
            let points = flat
                .chunks_exact(2)
                .map(|c| Vec2::new(c[0] as f64, c[1] as f64))
                .collect();
            PlanOutput::Trajectory(Trajectory {
                points,
                dt: PLAN_DT,
            })
        }
        Representation::PathSpeed => {
            let n_p = (flat.len() - N_T) / 2;
            let path = flat[..2 * n_p]
                .chunks_exact(2)
                .map(|c| Vec2::new(c[0] as f64, c[1] as f64))
                .collect();
            let speeds = flat[2 * n_p..].iter().map(|&v| (v as f64).max(0.0)).collect();
            PlanOutput::PathSpeed(PathSpeed { path, speeds })
        }
    }
}

pub fn plan_to_flat(plan: &PlanOutput) -> Vec<Real> {
    match plan {
        PlanOutput::Trajectory(t) => t
            .points
            .iter()
            .flat_map(|p| [p.x as Real, p.y as Real])
            .collect(),
        PlanOutput::PathSpeed(ps) => ps
            .path
            .iter()
            .flat_map(|p| [p.x as Real, p.y as Real])
            .chain(ps.speeds.iter().map(|&v| v as Real))
            .collect(),
    }
}

/// Per-dimension affine normalization fit on training labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNormalizer {
    pub center: Vec<Real>,
    pub scale: Vec<Real>,
}

impl PlanNormalizer {
    pub fn identity(dim: usize) -> PlanNormalizer {
        PlanNormalizer {
            center: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(samples: &[Vec<Real>]) -> PlanNormalizer {
        assert!(!samples.is_empty(), "contract error: no samples to fit");
        let dim = samples[0].len();
        let n = samples.len() as Real;
        let mut center = vec![0.0 as Real; dim];
        for s in samples {
            for (c, v) in center.iter_mut().zip(s) {
                *c += v / n;
            }
        }
        let mut scale = vec![0.0 as Real; dim];
        for s in samples {
            for ((sc, v), c) in scale.iter_mut().zip(s).zip(&center) {
                *sc += (v - c) * (v - c) / n;
            }
        }
        for sc in &mut scale {
            *sc = sc.sqrt().max(1e-3);
        }
        PlanNormalizer { center, scale }
    }

    pub fn normalize(&self, v: &[Real]) -> Vec<Real> {
        v.iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((x, c), s)| (x - c) / s)
            .collect()
    }

    pub fn denormalize(&self, v: &[Real]) -> Vec<Real> {
        v.iter()
            .zip(&self.center)
            .zip(&self.scale)
            .map(|((x, c), s)| x * s + c)
            .collect()
    }

    /// Persist inside the parameter store so checkpoints carry it.
    pub fn write_to(&self, store: &mut ParamStore) {
        let d = self.center.len();
        let c = Array::new(vec![1, d], self.center.clone());
        let s = Array::new(vec![1, d], self.scale.clone());
        if store.contains("norm.center") {
            *store.get_mut("norm.center") = c;
            *store.get_mut("norm.scale") = s;
        } else {
            store.register("norm.center", c);
            store.register("norm.scale", s);
        }
    }

    pub fn read_from(store: &ParamStore) -> PlanNormalizer {
        PlanNormalizer {
            center: store.get("norm.center").data().to_vec(),
            scale: store.get("norm.scale").data().to_vec(),
        }
    }
}

/// Linear-β DDIM schedule with ᾱ_0 = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub alpha_bar: Vec<Real>,
}

pub const BETA_START: Real = 1e-4;
pub const BETA_END: Real = 0.02;

impl DiffusionSchedule {
    pub fn new(t_steps: usize) -> DiffusionSchedule {
        assert!(t_steps >= 1, "contract error: empty schedule");
        let mut alpha_bar = Vec::with_capacity(t_steps + 1);
        alpha_bar.push(1.0);
        for i in 0..t_steps {
            let beta = BETA_START
                + (BETA_END - BETA_START) * i as Real / (t_steps - 1).max(1) as Real;
            alpha_bar.push(alpha_bar[i] * (1.0 - beta));
        }
        DiffusionSchedule { t_steps, alpha_bar }
    }

    /// Closed-form forward noising: x_τ = √ᾱ_τ x₀ + √(1−ᾱ_τ) ε.
    pub fn ddim_forward(&self, x0: &[Real], tau: usize, eps: &[Real]) -> Vec<Real> {
        assert!(tau <= self.t_steps, "contract error: τ {tau} out of range");
        assert_eq!(x0.len(), eps.len(), "contract error: noise shape");
        let a = self.alpha_bar[tau];
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect()
    }
}

/// Deterministic (η = 0) DDIM sampling over `s_steps` sub-sampled timesteps.
/// `denoise(x_τ, τ)` returns the model's x̂₀ prediction.
pub fn ddim_sample_loop(
    mut denoise: impl FnMut(&[Real], usize) -> Result<Vec<Real>>,
    sched: &DiffusionSchedule,
    s_steps: usize,
    dim: usize,
    rng: &mut Rng,
) -> Result<Vec<Real>> {
    assert!(
        s_steps >= 1 && s_steps <= sched.t_steps,
        "contract error: S {s_steps} outside 1..=T"
    );
    let mut x: Vec<Real> = (0..dim)
        .map(|_| {
            // Box-Muller standard normal.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as Real
        })
        .collect();
    for k in (1..=s_steps).rev() {
        let tau = k * sched.t_steps / s_steps;
        let prev = (k - 1) * sched.t_steps / s_steps;
        let x0 = denoise(&x, tau)?;
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::Sampling(format!(
                "non-finite x0 prediction at τ={tau}"
            )));
        }
        let a_t = sched.alpha_bar[tau];
        let a_p = sched.alpha_bar[prev];
        for i in 0..dim {
            let eps_hat = (x[i] - a_t.sqrt() * x0[i]) / (1.0 - a_t).sqrt();
            x[i] = a_p.sqrt() * x0[i] + (1.0 - a_p).sqrt() * eps_hat;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Sampling(format!(
                "non-finite sample after update from τ={tau}"
            )));
        }
    }
    Ok(x)
}

/// Register every planner parameter (both representations' heads included so
/// checkpoints stay structurally uniform across ablations).
pub fn init_planner(store: &mut ParamStore, cfg: &PlannerConfig, rng: &mut Rng) {
    store.register(
        "plan.queries",
        Array::trunc_normal(&[cfg.n_queries(), cfg.dim], 0.02, rng),
    );
    store.register("plan.cmd", Array::trunc_normal(&[6, cfg.dim], 0.02, rng));
    init_linear(store, "plan.embed_xy", 2, cfg.dim, false, rng);
    init_linear(store, "plan.embed_v", 1, cfg.dim, false, rng);
    for l in 0..cfg.layers {
        init_adaln(store, &format!("plan.l{l}.sa"), cfg.dim, rng);
        init_mha(store, &format!("plan.l{l}.sa.attn"), cfg.dim, rng);
        init_adaln(store, &format!("plan.l{l}.ca"), cfg.dim, rng);
        init_mha(store, &format!("plan.l{l}.ca.attn"), cfg.dim, rng);
    }
    // Refinement aggregation starts as a no-op (zero-init).
    init_linear(store, "plan.refine", 4 * BEV_FEATURE_DIM, cfg.dim, true, rng);
    init_linear(store, "plan.head_traj", cfg.dim, 2, true, rng);
    init_linear(store, "plan.head_path", cfg.dim, 2, true, rng);
    init_linear(store, "plan.head_speed", cfg.dim, 1, true, rng);
}

/// c = emb(command) + emb(v0) (+ emb(τ) in diffusion mode).
pub fn build_conditioning(
    pt: &mut ParamTape,
    cfg: &PlannerConfig,
    command: Command,
    v0: Real,
    tau: Option<usize>,
) -> Var {
    assert_eq!(
        cfg.mode == PlannerMode::Diffusion,
        tau.is_some(),
        "contract error: τ term present iff diffusion mode"
    );
    let table = pt.param("plan.cmd");
    let cmd = pt.tape.gather_rows(table, &[command.index()]);
    let v_emb = pt
        .tape
        .constant(Array::new(vec![1, cfg.dim], sinusoidal_embed(v0, cfg.dim)));
    let mut c = pt.tape.add(cmd, v_emb);
    if let Some(t) = tau {
        let t_emb = pt.tape.constant(Array::new(
            vec![1, cfg.dim],
            sinusoidal_embed(t as Real, cfg.dim),
        ));
        c = pt.tape.add(c, t_emb);
    }
    c
}

/// Planning queries: learned embeddings, plus (diffusion mode) a per-waypoint
/// embedding of the noisy normalized plan.
pub fn build_queries(
    pt: &mut ParamTape,
    cfg: &PlannerConfig,
    noisy: Option<&[Real]>,
) -> Result<Var> {
    let base = pt.param("plan.queries");
    match (cfg.mode, noisy) {
        (PlannerMode::PointEstimator, None) => Ok(base),
        (PlannerMode::Diffusion, Some(x)) => {
            if x.len() != cfg.plan_dim() {
                return Err(Error::Contract(format!(
                    "noisy plan length {} != plan dim {}",
                    x.len(),
                    cfg.plan_dim()
                )));
            }
            let n_wp = cfg.n_waypoints();
            let xy = pt
                .tape
                .constant(Array::new(vec![n_wp, 2], x[..2 * n_wp].to_vec()));
            let mut emb = linear(pt, "plan.embed_xy", xy);
            if cfg.representation == Representation::PathSpeed {
                let v = pt
                    .tape
                    .constant(Array::new(vec![cfg.n_t, 1], x[2 * n_wp..].to_vec()));
                let v_emb = linear(pt, "plan.embed_v", v);
                emb = pt.tape.concat_rows(&[emb, v_emb]);
            }
            Ok(pt.tape.add(base, emb))
        }
        (PlannerMode::PointEstimator, Some(_)) => Err(Error::Contract(
            "point estimator takes no noisy plan".into(),
        )),
        (PlannerMode::Diffusion, None) => Err(Error::Contract(
            "diffusion queries need a noisy plan".into(),
        )),
    }
}

fn decode_heads(pt: &mut ParamTape, cfg: &PlannerConfig, x: Var) -> Var {
    match cfg.representation {
        Representation::Trajectory => {
            let wp = linear(pt, "plan.head_traj", x);
            pt.tape.reshape(wp, &[1, 2 * cfg.n_t])
        }
        Representation::PathSpeed => {
            let path_q = pt.tape.slice_rows(x, 0, cfg.n_p);
            let speed_q = pt.tape.slice_rows(x, cfg.n_p, cfg.n_p + cfg.n_t);
            let path = linear(pt, "plan.head_path", path_q);
            let path = pt.tape.reshape(path, &[1, 2 * cfg.n_p]);
            let speed = linear(pt, "plan.head_speed", speed_q);
            let speed = pt.tape.reshape(speed, &[1, cfg.n_t]);
            pt.tape.concat_cols(&[path, speed])
        }
    }
}

/// Bilinear interpolation entries over a `bh x bw` feature grid for a point
/// in BEV meters.
fn bilinear_entries(p: Vec2, bh: usize, bw: usize) -> Vec<(usize, Real)> {
    use crate::bev::{BEV_RESOLUTION, EGO_REAR_FRACTION};
    let rear = bh as f64 * BEV_RESOLUTION * EGO_REAR_FRACTION;
    let half = bw as f64 * BEV_RESOLUTION / 2.0;
    let ci = ((p.x + rear) / BEV_RESOLUTION - 0.5).clamp(0.0, (bh - 1) as f64);
    let cj = ((p.y + half) / BEV_RESOLUTION - 0.5).clamp(0.0, (bw - 1) as f64);
    let i0 = (ci.floor() as usize).min(bh - 2);
    let j0 = (cj.floor() as usize).min(bw - 2);
    let (fi, fj) = (ci - i0 as f64, cj - j0 as f64);
    vec![
        (i0 * bw + j0, ((1.0 - fi) * (1.0 - fj)) as Real),
        (i0 * bw + j0 + 1, ((1.0 - fi) * fj) as Real),
        ((i0 + 1) * bw + j0, (fi * (1.0 - fj)) as Real),
        ((i0 + 1) * bw + j0 + 1, (fi * fj) as Real),
    ]
}

/// Decoder stack: N_layer blocks of adaLN-Zero self-attention and adaLN-Zero
/// masked cross-attention, an optional local-refinement pass, and the
/// per-representation output heads. Returns the flat normalized plan.
/// Waypoint positions used for refinement sampling are detached.
pub fn planner_forward(
    pt: &mut ParamTape,
    cfg: &PlannerConfig,
    norm: &PlanNormalizer,
    queries: Var,
    tokens: &SceneTokens,
    bev: Option<(Var, usize, usize)>,
    c: Var,
) -> Var {
    let mut x = queries;
    for l in 0..cfg.layers {
        let sa = format!("plan.l{l}.sa");
        let sa_attn = format!("{sa}.attn");
        let heads = cfg.heads;
        x = adaln_zero(pt, &sa, x, c, |pt, h| {
            multi_head_attention(pt, &sa_attn, h, h, None, heads)
        });
        let ca = format!("plan.l{l}.ca");
        let ca_attn = format!("{ca}.attn");
        let toks = tokens.tokens;
        let valid = &tokens.valid;
        x = adaln_zero(pt, &ca, x, c, |pt, h| {
            multi_head_attention(pt, &ca_attn, h, toks, Some(valid), heads)
        });
    }
    if cfg.refinement {
        if let Some((bev_f, bh, bw)) = bev {
            let inter = decode_heads(pt, cfg, x);
            let flat = pt.tape.value(inter).data().to_vec();
            let meters = norm.denormalize(&flat);
            let n_wp = cfg.n_waypoints();
            let mut entries = Vec::with_capacity(n_wp * 4);
            for w in 0..n_wp {
                let p = Vec2::new(meters[2 * w] as f64, meters[2 * w + 1] as f64);
                for (ox, oy) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)]
                {
                    entries.push(bilinear_entries(
                        Vec2::new(p.x + ox, p.y + oy),
                        bh,
                        bw,
                    ));
                }
            }
            let sampled = pt.tape.lin_comb_rows(bev_f, &entries);
            let flat = pt.tape.reshape(sampled, &[n_wp, 4 * BEV_FEATURE_DIM]);
            let mut refine = linear(pt, "plan.refine", flat);
            if cfg.representation == Representation::PathSpeed {
                let pad = pt.tape.constant(Array::zeros(&[cfg.n_t, cfg.dim]));
                refine = pt.tape.concat_rows(&[refine, pad]);
            }
            x = pt.tape.add(x, refine);
        }
    }
    decode_heads(pt, cfg, x)
}

/// λ_plan-weighted mean smooth-L1 between prediction and clean target.
pub fn training_loss(pt: &mut ParamTape, pred: Var, target: &Array, lambda_plan: Real) -> Var {
    let l = pt.tape.smooth_l1(pred, target);
    pt.tape.scale(l, lambda_plan)
}

/// A parameter snapshot plus everything needed to plan from a raster.
#[derive(Debug, Clone)]
pub struct PlannerModel {
    pub cfg: PlannerConfig,
    pub store: ParamStore,
    pub norm: PlanNormalizer,
    pub sched: DiffusionSchedule,
}

impl PlannerModel {
    pub fn init(cfg: PlannerConfig, seed: u64) -> PlannerModel {
        let mut rng = crate::rng::stream(seed, "model-init");
        let mut store = ParamStore::new();
        crate::bev::init_bev(&mut store, cfg.dim, &mut rng);
        init_planner(&mut store, &cfg, &mut rng);
        let norm = PlanNormalizer::identity(cfg.plan_dim());
        norm.write_to(&mut store);
        PlannerModel {
            cfg,
            store,
            norm,
            sched: DiffusionSchedule::new(100),
        }
    }

    /// One closed-loop planning step from a raster. Diffusion mode runs
    /// `s_steps` DDIM iterations; the point estimator ignores them.
    pub fn infer(
        &self,
        grid: &BevGrid,
        cache: &mut BevCache,
        command: Command,
        v0: f64,
        s_steps: usize,
        rng: &mut Rng,
    ) -> Result<PlanOutput> {
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &self.store);
        let features = crate::bev::encode(&mut pt, grid, cache);
        let validity = crate::bev::mask(grid.h, grid.w, self.cfg.mask_frac);
        let tokens = crate::bev::patchify(
            &mut pt,
            features,
            &validity,
            grid.h,
            grid.w,
            self.cfg.patch,
        )?;
        let bev = Some((features, grid.h, grid.w));
        let flat = match self.cfg.mode {
            PlannerMode::PointEstimator => {
                let c = build_conditioning(&mut pt, &self.cfg, command, v0 as Real, None);
                let q = build_queries(&mut pt, &self.cfg, None)?;
                let out = planner_forward(&mut pt, &self.cfg, &self.norm, q, &tokens, bev, c);
                pt.tape.value(out).data().to_vec()
            }
            PlannerMode::Diffusion => ddim_sample_loop(
                |x_tau, tau| {
                    let c =
                        build_conditioning(&mut pt, &self.cfg, command, v0 as Real, Some(tau));
                    let q = build_queries(&mut pt, &self.cfg, Some(x_tau))?;
                    let out =
                        planner_forward(&mut pt, &self.cfg, &self.norm, q, &tokens, bev, c);
                    Ok(pt.tape.value(out).data().to_vec())
                },
                &self.sched,
                s_steps,
                self.cfg.plan_dim(),
                rng,
            )?,
        };
        let meters = self.norm.denormalize(&flat);
        Ok(plan_from_flat(self.cfg.representation, &meters))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_cfg() -> PlannerConfig {
        PlannerConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            n_t: 3,
            n_p: 4,
            mode: PlannerMode::PointEstimator,
            representation: Representation::Trajectory,
            refinement: false,
            patch: 1,
            mask_frac: 0.2,
        }
    }

    fn tiny_store(cfg: &PlannerConfig, seed: u64) -> ParamStore {
        let mut r = rng::stream(seed, "planner-test");
        let mut store = ParamStore::new();
        init_planner(&mut store, cfg, &mut r);
        store
    }

    /// Replace zero-initialized parameters with small noise so gradients and
    /// attention paths are exercised.
    fn randomize_zeros(store: &mut ParamStore, seed: u64) {
        let mut r = rng::stream(seed, "planner-test-perturb");
        for (_, entry) in store.entries_mut() {
            if entry.value.data().iter().all(|&v| v == 0.0) {
                let shape = entry.value.shape().to_vec();
                entry.value = Array::trunc_normal(&shape, 0.05, &mut r);
            }
        }
    }

    fn const_tokens(pt: &mut ParamTape, arr: &Array, valid: Vec<bool>) -> SceneTokens {
        let tokens = pt.tape.constant(arr.clone());
        SceneTokens {
            tokens,
            valid,
            h: 1,
            w: arr.rows(),
        }
    }

    #[test]
    fn schedule_is_monotone_with_unit_start() {
        let s = DiffusionSchedule::new(100);
        assert_eq!(s.alpha_bar[0], 1.0);
        for i in 1..=100 {
            assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
        }
        assert!(s.alpha_bar[100] < 0.5, "ᾱ_T = {}", s.alpha_bar[100]);
    }

    #[test]
    fn ddim_forward_matches_the_closed_form() {
        let s = DiffusionSchedule::new(100);
        let x0 = [1.0, -2.0];
        let eps = [0.3, 0.7];
        assert_eq!(s.ddim_forward(&x0, 0, &eps), vec![1.0, -2.0]);
        let noiseless = s.ddim_forward(&x0, 40, &[0.0, 0.0]);
        let a = s.alpha_bar[40];
        assert!((noiseless[0] - a.sqrt()).abs() < 1e-12);
        // Hand evaluation at ᾱ = 0.25: 0.5·1 + √0.75·1.
        let mut custom = s.clone();
        custom.alpha_bar[40] = 0.25;
        let v = custom.ddim_forward(&[1.0], 40, &[1.0]);
        assert!((v[0] - 1.3660254037844386).abs() < 1e-9, "{}", v[0]);
    }

    #[test]
    fn query_counts_follow_the_representation() {
        for (repr, expect) in [
            (Representation::Trajectory, N_T),
            (Representation::PathSpeed, N_P + N_T),
        ] {
            let cfg = PlannerConfig {
                representation: repr,
                ..PlannerConfig::default()
            };
            let store = tiny_store(&cfg, 11);
            let mut tape = Tape::new();
            let mut pt = ParamTape::new(&mut tape, &store);
            let q = build_queries(&mut pt, &cfg, None).unwrap();
            assert_eq!(pt.tape.value(q).rows(), expect);
        }
    }

    #[test]
    fn diffusion_queries_from_zeros_are_deterministic() {
        let cfg = PlannerConfig {
            mode: PlannerMode::Diffusion,
            ..tiny_cfg()
        };
        let store = tiny_store(&cfg, 12);
        let zeros = vec![0.0; cfg.plan_dim()];
        let run = || {
            let mut tape = Tape::new();
            let mut pt = ParamTape::new(&mut tape, &store);
            let q = build_queries(&mut pt, &cfg, Some(&zeros)).unwrap();
            pt.tape.value(q).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.all_finite());
    }

    #[test]
    fn mode_and_noise_must_match() {
        let pe = tiny_cfg();
        let store = tiny_store(&pe, 13);
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let noisy = vec![0.0; pe.plan_dim()];
        assert!(matches!(
            build_queries(&mut pt, &pe, Some(&noisy)),
            Err(Error::Contract(_))
        ));
        let diff = PlannerConfig {
            mode: PlannerMode::Diffusion,
            ..pe
        };
        let store = tiny_store(&diff, 13);
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        assert!(matches!(
            build_queries(&mut pt, &diff, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_init_blocks_decode_raw_queries() {
        let cfg = tiny_cfg();
        let mut store = tiny_store(&cfg, 14);
        // Make the head non-trivial but keep gates at zero init.
        let mut r = rng::stream(99, "planner-test");
        *store.get_mut("plan.head_traj.w") = Array::randn(&[cfg.dim, 2], &mut r);
        let norm = PlanNormalizer::identity(cfg.plan_dim());
        let toks_arr = Array::randn(&[5, cfg.dim], &mut r);

        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let tokens = const_tokens(&mut pt, &toks_arr, vec![true; 5]);
        let c = build_conditioning(&mut pt, &cfg, Command::Follow, 4.0, None);
        let q = build_queries(&mut pt, &cfg, None).unwrap();
        let out = planner_forward(&mut pt, &cfg, &norm, q, &tokens, None, c);
        let out = pt.tape.value(out).clone();

        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let q = build_queries(&mut pt, &cfg, None).unwrap();
        let direct = decode_heads(&mut pt, &cfg, q);
        let direct = pt.tape.value(direct).clone();
        assert_eq!(out, direct);
    }

    #[test]
    fn masked_tokens_cannot_influence_the_plan() {
        let cfg = tiny_cfg();
        let mut store = tiny_store(&cfg, 15);
        randomize_zeros(&mut store, 15);
        let norm = PlanNormalizer::identity(cfg.plan_dim());
        let mut r = rng::stream(16, "planner-test");
        let base = Array::randn(&[6, cfg.dim], &mut r);
        let valid = vec![true, false, true, true, false, true];
        let mut poisoned = base.clone();
        for (row, &ok) in valid.iter().enumerate() {
            if !ok {
                for c in 0..cfg.dim {
                    poisoned.set2(row, c, 1e6);
                }
            }
        }
        let run = |arr: &Array| {
            let mut tape = Tape::new();
            let mut pt = ParamTape::new(&mut tape, &store);
            let tokens = const_tokens(&mut pt, arr, valid.clone());
            let c = build_conditioning(&mut pt, &cfg, Command::Left, 2.0, None);
            let q = build_queries(&mut pt, &cfg, None).unwrap();
            let out = planner_forward(&mut pt, &cfg, &norm, q, &tokens, None, c);
            pt.tape.value(out).clone()
        };
        let a = run(&base);
        let b = run(&poisoned);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn loss_hand_values_and_scaling() {
        let store = tiny_store(&tiny_cfg(), 17);
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let pred = pt.tape.constant(Array::new(vec![1, 2], vec![0.5, 2.0]));
        let target = Array::zeros(&[1, 2]);
        let l = training_loss(&mut pt, pred, &target, 1.0);
        // Mean of smooth-L1(0.5) = 0.125 and smooth-L1(2.0) = 1.5.
        assert!((pt.tape.value(l).scalar_value() - (0.125 + 1.5) / 2.0).abs() < 1e-9);
        let l2 = training_loss(&mut pt, pred, &target, 2.0);
        assert!(
            (pt.tape.value(l2).scalar_value() - 2.0 * pt.tape.value(l).scalar_value()).abs()
                < 1e-12
        );
        let exact = pt.tape.constant(target.clone());
        let l0 = training_loss(&mut pt, exact, &target, 100.0);
        assert_eq!(pt.tape.value(l0).scalar_value(), 0.0);
    }

    #[test]
    fn normalizer_roundtrip_is_tight() {
        let mut r = rng::stream(18, "planner-test");
        let samples: Vec<Vec<Real>> = (0..50)
            .map(|_| (0..6).map(|_| r.gen_range(-10.0..10.0) as Real).collect())
            .collect();
        let norm = PlanNormalizer::fit(&samples);
        for s in &samples {
            let back = norm.denormalize(&norm.normalize(s));
            for (a, b) in s.iter().zip(&back) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let mut store = ParamStore::new();
        norm.write_to(&mut store);
        assert_eq!(PlanNormalizer::read_from(&store), norm);
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn token_gradients_match_finite_differences() {
        use crate::tensor::gradcheck;
        let cfg = tiny_cfg();
        let mut store = tiny_store(&cfg, 19);
        randomize_zeros(&mut store, 19);
        let norm = PlanNormalizer::identity(cfg.plan_dim());
        let mut r = rng::stream(20, "planner-test");
        let toks = Array::randn(&[4, cfg.dim], &mut r);
        let target = Array::randn(&[1, cfg.plan_dim()], &mut r);
        let valid = vec![true, true, false, true];
        let build = |tape: &mut Tape, vars: &[Var]| {
            let mut pt = ParamTape::new(tape, &store);
            let tokens = SceneTokens {
                tokens: vars[0],
                valid: valid.clone(),
                h: 1,
                w: 4,
            };
            let c = build_conditioning(&mut pt, &cfg, Command::Right, 3.0, None);
            let q = build_queries(&mut pt, &cfg, None).unwrap();
            let out = planner_forward(&mut pt, &cfg, &norm, q, &tokens, None, c);
            training_loss(&mut pt, out, &target, LAMBDA_PLAN)
        };
        let err = gradcheck::check(&build, &[toks], 1e-5);
        assert!(err < 1e-3, "max rel error {err}");
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn ddim_oracle_is_a_fixed_point_and_deterministic() {
        let sched = DiffusionSchedule::new(100);
        let target = vec![0.7, -0.3];
        let oracle = |_x: &[Real], _t: usize| Ok(target.clone());
        let mut r1 = rng::stream(21, "planner-test");
        let a = ddim_sample_loop(oracle, &sched, 100, 2, &mut r1).unwrap();
        for (v, t) in a.iter().zip(&target) {
            assert!((v - t).abs() < 1e-9);
        }
        let mut r2 = rng::stream(22, "planner-test");
        let b = ddim_sample_loop(oracle, &sched, 10, 2, &mut r2).unwrap();
        let mut r3 = rng::stream(22, "planner-test");
        let c = ddim_sample_loop(oracle, &sched, 10, 2, &mut r3).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn non_finite_predictions_surface_as_sampling_errors() {
        let sched = DiffusionSchedule::new(100);
        let bad = |_x: &[Real], _t: usize| Ok(vec![Real::NAN]);
        let mut r = rng::stream(23, "planner-test");
        assert!(matches!(
            ddim_sample_loop(bad, &sched, 5, 1, &mut r),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn plan_output_roundtrips_and_clamps_speeds() {
        let flat: Vec<Real> = (0..2 * N_P)
            .map(|i| i as Real * 0.1)
            .chain((0..N_T).map(|i| i as Real - 5.0))
            .collect();
        let plan = plan_from_flat(Representation::PathSpeed, &flat);
        let PlanOutput::PathSpeed(ps) = &plan else {
            panic!("wrong representation")
        };
        assert_eq!(ps.path.len(), N_P);
        assert_eq!(ps.speeds.len(), N_T);
        assert!(ps.speeds.iter().all(|&v| v >= 0.0));
        assert_eq!(ps.speeds[10], 5.0);
        let traj_flat: Vec<Real> = (0..2 * N_T).map(|i| i as Real).collect();
        let traj = plan_from_flat(Representation::Trajectory, &traj_flat);
        assert_eq!(plan_to_flat(&traj), traj_flat);
    }
}
