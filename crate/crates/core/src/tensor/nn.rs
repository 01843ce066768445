//! Layers used by the planning head: linear, multi-head attention with key
//! padding, adaLN-Zero conditioning, and sinusoidal scalar embeddings.

use crate::rng::Rng;

use super::optim::{ParamStore, ParamTape};
use super::tape::Var;
use super::{Array, Real};

pub const INIT_SIGMA: Real = 0.02;

/// Register a linear layer's weight and bias. Zero-initialized layers are
/// used for adaLN modulation projections and final output heads.
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    zero_init: bool,
    rng: &mut Rng,
) {
    let w = if zero_init {
        Array::zeros(&[in_dim, out_dim])
    } else {
        Array::trunc_normal(&[in_dim, out_dim], INIT_SIGMA, rng)
    };
    store.register(&format!("{name}.w"), w);
    store.register(&format!("{name}.b"), Array::zeros(&[1, out_dim]));
}

pub fn linear(pt: &mut ParamTape, name: &str, x: Var) -> Var {
    let w = pt.param(&format!("{name}.w"));
    let b = pt.param(&format!("{name}.b"));
    let y = pt.tape.matmul(x, w);
    pt.tape.add_row(y, b)
}

pub fn init_mha(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{proj}"), dim, dim, false, rng);
    }
}

/// Scaled dot-product multi-head attention. Keys flagged invalid in
/// `key_padding` receive exactly zero attention weight (excluded before the
/// softmax). Panics (contract error) when every key is padded.
pub fn multi_head_attention(
    pt: &mut ParamTape,
    name: &str,
    queries: Var,
    keys_values: Var,
    key_padding: Option<&[bool]>,
    heads: usize,
) -> Var {
    let dim = pt.tape.value(queries).cols();
    assert!(
        dim % heads == 0,
        "contract error: feature dim {dim} not divisible by {heads} heads"
    );
    if let Some(mask) = key_padding {
        assert!(
            mask.iter().any(|&v| v),
            "contract error: all attention keys padded"
        );
    }
    let dh = dim / heads;
    let q = linear(pt, &format!("{name}.q"), queries);
    let k = linear(pt, &format!("{name}.k"), keys_values);
    let v = linear(pt, &format!("{name}.v"), keys_values);
    let scale = 1.0 / (dh as Real).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = pt.tape.slice_cols(q, lo, hi);
        let kh = pt.tape.slice_cols(k, lo, hi);
        let vh = pt.tape.slice_cols(v, lo, hi);
        let kt = pt.tape.transpose(kh);
        let scores = pt.tape.matmul(qh, kt);
        let scores = pt.tape.scale(scores, scale);
        let attn = pt.tape.softmax(scores, key_padding);
        head_outputs.push(pt.tape.matmul(attn, vh));
    }
    let merged = pt.tape.concat_cols(&head_outputs);
    linear(pt, &format!("{name}.o"), merged)
}

/// Mean attention weights over queries and heads, for visualization.
/// Runs the same projections as [`multi_head_attention`] forward-only.
pub fn attention_rollup(
    store: &ParamStore,
    name: &str,
    queries: &Array,
    keys_values: &Array,
    key_padding: Option<&[bool]>,
    heads: usize,
) -> Vec<Real> {
    use super::tape::Tape;
    let mut tape = Tape::new();
    let mut pt = ParamTape::new(&mut tape, store);
    let q_in = pt.tape.constant(queries.clone());
    let kv_in = pt.tape.constant(keys_values.clone());
    let dim = queries.cols();
    let dh = dim / heads;
    let q = linear(&mut pt, &format!("{name}.q"), q_in);
    let k = linear(&mut pt, &format!("{name}.k"), kv_in);
    let scale = 1.0 / (dh as Real).sqrt();
    let n_keys = keys_values.rows();
    let mut mean = vec![0.0; n_keys];
    let mut count = 0usize;
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = pt.tape.slice_cols(q, lo, hi);
        let kh = pt.tape.slice_cols(k, lo, hi);
        let kt = pt.tape.transpose(kh);
        let scores = pt.tape.matmul(qh, kt);
        let scores = pt.tape.scale(scores, scale);
        let attn = pt.tape.softmax(scores, key_padding);
        let av = pt.tape.value(attn);
        for r in 0..av.rows() {
            for j in 0..n_keys {
                mean[j] += av.at2(r, j);
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as Real;
    }
    mean
}

/// Register the (scale, shift, gate) modulation projection of an adaLN-Zero
/// sub-layer. Zero-initialized so the enclosing block starts as identity.
pub fn init_adaln(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) {
    init_linear(store, &format!("{name}.mod"), dim, 3 * dim, true, rng);
}

/// adaLN-Zero wrapper: `x + gate ⊙ SubLayer(scale ⊙ norm(x) + shift)` with
/// (scale, shift, gate) projected from the conditioning vector `c` ([1, d]).
pub fn adaln_zero(
    pt: &mut ParamTape,
    name: &str,
    x: Var,
    c: Var,
    sublayer: impl FnOnce(&mut ParamTape, Var) -> Var,
) -> Var {
    let dim = pt.tape.value(x).cols();
    let mods = linear(pt, &format!("{name}.mod"), c);
    let scale = pt.tape.slice_cols(mods, 0, dim);
    let shift = pt.tape.slice_cols(mods, dim, 2 * dim);
    let gate = pt.tape.slice_cols(mods, 2 * dim, 3 * dim);
    let normed = pt.tape.layernorm(x);
    let scaled = pt.tape.mul_row(normed, scale);
    let shifted = pt.tape.add_row(scaled, shift);
    let y = sublayer(pt, shifted);
    let gated = pt.tape.mul_row(y, gate);
    pt.tape.add(x, gated)
}

/// Standard alternating sin/cos embedding over a geometric frequency ladder.
pub fn sinusoidal_embed(s: Real, dims: usize) -> Vec<Real> {
    assert!(dims % 2 == 0, "contract error: sinusoidal dims must be even");
    let half = dims / 2;
    let mut out = Vec::with_capacity(dims);
    for i in 0..half {
        let freq = (10000.0 as Real).powf(-(i as Real) / half as Real);
        out.push((s * freq).sin());
        out.push((s * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::tape::Tape;

    #[test]
    fn sinusoidal_zero_pattern_and_norm() {
        let e = sinusoidal_embed(0.0, 8);
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        for s in [0.0, 1.0, 7.3, 29.9] {
            let e = sinusoidal_embed(s, 16);
            let n2: Real = e.iter().map(|v| v * v).sum();
            assert!((n2 - 8.0).abs() < 1e-9, "norm^2 {n2} at s={s}");
        }
    }

    #[test]
    fn sinusoidal_distinct_over_grid() {
        let grid: Vec<Vec<Real>> = (0..1000)
            .map(|i| sinusoidal_embed(30.0 * i as Real / 999.0, 16))
            .collect();
        let mut min_dist = Real::INFINITY;
        for i in 0..grid.len() {
            for j in (i + 1)..grid.len() {
                let d: Real = grid[i]
                    .iter()
                    .zip(&grid[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<Real>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 0.0);
    }

    #[test]
    fn single_valid_key_returns_its_value_row() {
        let mut rng = rng::stream(1, "nn-test");
        let mut store = ParamStore::new();
        let dim = 8;
        init_mha(&mut store, "attn", dim, &mut rng);
        // Identity v/o projections isolate the attention weighting.
        *store.get_mut("attn.v.w") = eye(dim);
        *store.get_mut("attn.o.w") = eye(dim);

        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let q = pt.tape.constant(Array::randn(&[3, dim], &mut rng));
        let kv_arr = Array::randn(&[5, dim], &mut rng);
        let kv = pt.tape.constant(kv_arr.clone());
        let mask = [false, false, true, false, false];
        let out = multi_head_attention(&mut pt, "attn", q, kv, Some(&mask), 2);
        let ov = pt.tape.value(out);
        for r in 0..3 {
            for c in 0..dim {
                assert!((ov.at2(r, c) - kv_arr.at2(2, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn padded_key_contents_do_not_matter() {
        let mut rng = rng::stream(2, "nn-test");
        let mut store = ParamStore::new();
        let dim = 8;
        init_mha(&mut store, "attn", dim, &mut rng);
        let q_arr = Array::randn(&[4, dim], &mut rng);
        let kv_arr = Array::randn(&[6, dim], &mut rng);
        let mask = [true, false, true, true, false, true];

        let run = |kv_arr: &Array| -> Array {
            let mut tape = Tape::new();
            let mut pt = ParamTape::new(&mut tape, &store);
            let q = pt.tape.constant(q_arr.clone());
            let kv = pt.tape.constant(kv_arr.clone());
            let out = multi_head_attention(&mut pt, "attn", q, kv, Some(&mask), 2);
            pt.tape.value(out).clone()
        };

        let base = run(&kv_arr);
        let mut perturbed = kv_arr.clone();
        for j in 0..dim {
            perturbed.set2(1, j, 1e6);
            perturbed.set2(4, j, -42.0);
        }
        let out = run(&perturbed);
        for (a, b) in base.data().iter().zip(out.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    #[should_panic(expected = "all attention keys padded")]
    fn all_padded_is_a_contract_error() {
        let mut rng = rng::stream(3, "nn-test");
        let mut store = ParamStore::new();
        init_mha(&mut store, "attn", 4, &mut rng);
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let q = pt.tape.constant(Array::zeros(&[1, 4]));
        let kv = pt.tape.constant(Array::zeros(&[2, 4]));
        multi_head_attention(&mut pt, "attn", q, kv, Some(&[false, false]), 1);
    }

    #[test]
    fn adaln_zero_is_identity_at_init() {
        let mut rng = rng::stream(4, "nn-test");
        let mut store = ParamStore::new();
        let dim = 6;
        init_adaln(&mut store, "blk", dim, &mut rng);
        init_linear(&mut store, "blk.ff", dim, dim, false, &mut rng);
        let x_arr = Array::randn(&[5, dim], &mut rng);
        let c_arr = Array::randn(&[1, dim], &mut rng);
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, &store);
        let x = pt.tape.constant(x_arr.clone());
        let c = pt.tape.constant(c_arr);
        let y = adaln_zero(&mut pt, "blk", x, c, |pt, h| linear(pt, "blk.ff", h));
        let yv = pt.tape.value(y);
        for (a, b) in yv.data().iter().zip(x_arr.data()) {
            assert_eq!(a, b);
        }
    }

    fn eye(n: usize) -> Array {
        let mut a = Array::zeros(&[n, n]);
        for i in 0..n {
            a.set2(i, i, 1.0);
        }
        a
    }

    #[test]
    fn one_head_equals_many_with_tied_projections() {
        let mut rng = rng::stream(5, "nn-test");
        let dim = 8;
        // Duplicate the half-dim content of all inputs and use identity
        // projections, so each of 2 heads sees identical content. The 1-head
        // run compensates the softmax scale and doubled dot products by
        // scaling its key projection with 1/sqrt(2):
        //   scores_2h = hd / sqrt(4),  scores_1h = 2·hd/sqrt(2) / sqrt(8)
        // which are equal; attention weights and value rows then coincide.
        let mut q_arr = Array::randn(&[3, dim], &mut rng);
        let mut kv_arr = Array::randn(&[5, dim], &mut rng);
        for arr in [&mut q_arr, &mut kv_arr] {
            for r in 0..arr.rows() {
                for c in 0..dim / 2 {
                    let v = arr.at2(r, c);
                    arr.set2(r, c + dim / 2, v);
                }
            }
        }
        let mut store = ParamStore::new();
        init_mha(&mut store, "attn", dim, &mut rng);
        for proj in ["q", "k", "v", "o"] {
            *store.get_mut(&format!("attn.{proj}.w")) = eye(dim);
        }
        let run = |store: &ParamStore, heads: usize| -> Array {
            let mut tape = Tape::new();
            let mut pt = ParamTape::new(&mut tape, store);
            let q = pt.tape.constant(q_arr.clone());
            let kv = pt.tape.constant(kv_arr.clone());
            let out = multi_head_attention(&mut pt, "attn", q, kv, None, heads);
            pt.tape.value(out).clone()
        };
        let many = run(&store, 2);
        let mut store_one = store.clone();
        let kw = store_one.get_mut("attn.k.w");
        for v in kw.data_mut() {
            *v /= (2.0 as Real).sqrt();
        }
        let one = run(&store_one, 1);
        for (a, b) in one.data().iter().zip(many.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
