//! Finite-difference gradient checks for every tape operation and for a
//! composite transformer-style block with attention, layer norm, GELU, and
//! adaptive modulation. Runs in f64 only; central differences lose too many
//! digits in f32.

#![cfg(not(feature = "f32"))]

use microdrive::rng;
use microdrive::tensor::gradcheck::check;
use microdrive::tensor::nn;
use microdrive::tensor::tape::{Tape, Var};
use microdrive::tensor::Array;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Array {
    let mut rng = rng::stream(seed, "gradcheck");
    Array::randn(shape, &mut rng)
}

fn assert_grad(build: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Array]) {
    let err = check(build, inputs, H);
    assert!(err < TOL, "max relative gradient error {err:.3e} >= {TOL:.0e}");
}

#[test]
fn add_sub_mul_scale() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    assert_grad(
        &|t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[0]);
            let m = t.mul(d, v[1]);
            let k = t.scale(m, 0.7);
            t.sum_all(k)
        },
        &[a, b],
    );
}

#[test]
fn row_broadcast_ops() {
    let a = randn(&[5, 3], 3);
    let row = randn(&[1, 3], 4);
    assert_grad(
        &|t, v| {
            let x = t.add_row(v[0], v[1]);
            let y = t.mul_row(x, v[1]);
            t.sum_all(y)
        },
        &[a, row],
    );
}

#[test]
fn matmul_transpose() {
    let a = randn(&[4, 3], 5);
    let b = randn(&[3, 6], 6);
    assert_grad(
        &|t, v| {
            let p = t.matmul(v[0], v[1]);
            let q = t.transpose(p);
            let r = t.matmul(q, v[0]);
            t.sum_all(r)
        },
        &[a, b],
    );
}

#[test]
fn layernorm_rows() {
    let a = randn(&[4, 8], 7);
    assert_grad(
        &|t, v| {
            let y = t.layernorm(v[0]);
            // Non-uniform weighting so the row-mean gradients are exercised.
            let w = t.constant(Array::from_rows(&[vec![
                0.3, -1.2, 0.5, 2.0, -0.7, 0.1, 1.4, -0.9,
            ]]));
            let z = t.mul_row(y, w);
            t.sum_all(z)
        },
        &[a],
    );
}

#[test]
fn softmax_unmasked_and_masked() {
    let a = randn(&[3, 5], 8);
    assert_grad(
        &|t, v| {
            let y = t.softmax(v[0], None);
            let w = t.constant(Array::from_rows(&[vec![1.0, -2.0, 0.5, 3.0, -1.0]]));
            let z = t.mul_row(y, w);
            t.sum_all(z)
        },
        &[a.clone()],
    );
    let mask = [true, false, true, true, false];
    assert_grad(
        &|t, v| {
            let y = t.softmax(v[0], Some(&mask));
            let w = t.constant(Array::from_rows(&[vec![1.0, -2.0, 0.5, 3.0, -1.0]]));
            let z = t.mul_row(y, w);
            t.sum_all(z)
        },
        &[a],
    );
}

#[test]
fn gelu_tanh_nonlinearities() {
    let a = randn(&[4, 4], 9);
    assert_grad(
        &|t, v| {
            let g = t.gelu(v[0]);
            let h = t.tanh(g);
            t.sum_all(h)
        },
        &[a],
    );
}

#[test]
fn concat_and_slice() {
    let a = randn(&[2, 3], 10);
    let b = randn(&[4, 3], 11);
    let c = randn(&[2, 5], 12);
    assert_grad(
        &|t, v| {
            let rows = t.concat_rows(&[v[0], v[1]]);
            let top = t.slice_rows(rows, 1, 4);
            let s1 = t.sum_all(top);
            let cols = t.concat_cols(&[v[0], v[2]]);
            let left = t.slice_cols(cols, 2, 7);
            let s2 = t.sum_all(left);
            t.add(s1, s2)
        },
        &[a, b, c],
    );
}

#[test]
fn reshape_gather_lincomb() {
    let a = randn(&[4, 6], 13);
    assert_grad(
        &|t, v| {
            let r = t.reshape(v[0], &[8, 3]);
            // Gather with repetition: row 2 contributes twice.
            let g = t.gather_rows(r, &[0, 2, 2, 5]);
            let entries = vec![
                vec![(0, 0.5), (1, 0.5)],
                vec![(2, 2.0)],
                vec![(3, -1.0), (0, 0.25)],
            ];
            let l = t.lin_comb_rows(g, &entries);
            t.sum_all(l)
        },
        &[a],
    );
}

#[test]
fn smooth_l1_both_branches() {
    // Residuals straddle the quadratic/linear boundary at |r| = 1.
    let pred = Array::from_rows(&[vec![0.2, -0.6, 1.8], vec![-2.5, 0.05, 0.9]]);
    let target = Array::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
    assert_grad(&|t, v| t.smooth_l1(v[0], &target), &[pred]);
}

#[test]
fn mean_all_scaling() {
    let a = randn(&[3, 7], 14);
    assert_grad(&|t, v| t.mean_all(v[0]), &[a]);
}

#[test]
fn composite_attention_block() {
    // One pre-norm block: LN, single-head attention over 4 keys with one
    // padded column, residual, LN, GELU MLP, residual, then a smooth-L1 loss.
    let d = 6;
    let x = randn(&[3, d], 15);
    let wq = randn(&[d, d], 16);
    let wk = randn(&[d, d], 17);
    let wv = randn(&[d, d], 18);
    let w1 = randn(&[d, 2 * d], 19);
    let w2 = randn(&[2 * d, d], 20);
    let kv = randn(&[4, d], 21);
    let target = randn(&[3, d], 22);
    let mask = [true, true, false, true];
    assert_grad(
        &|t, v| {
            let xn = t.layernorm(v[0]);
            let q = t.matmul(xn, v[1]);
            let k = t.matmul(v[6], v[2]);
            let val = t.matmul(v[6], v[3]);
            let kt = t.transpose(k);
            let scores = t.matmul(q, kt);
            let scaled = t.scale(scores, 1.0 / (d as f64).sqrt());
            let attn = t.softmax(scaled, Some(&mask));
            let ctx = t.matmul(attn, val);
            let res1 = t.add(v[0], ctx);
            let rn = t.layernorm(res1);
            let h1 = t.matmul(rn, v[4]);
            let h1a = t.gelu(h1);
            let h2 = t.matmul(h1a, v[5]);
            let res2 = t.add(res1, h2);
            t.smooth_l1(res2, &target)
        },
        &[x, wq, wk, wv, w1, w2, kv],
    );
}

#[test]
fn composite_adaln_modulated_block() {
    // Scale/shift/gate modulation of a normalized activation by a conditioning
    // projection, as used by the planner blocks, checked end to end.
    let d = 4;
    let x = randn(&[3, d], 23);
    let c = randn(&[1, d], 24);
    let wmod = randn(&[d, 3 * d], 25);
    let target = randn(&[3, d], 26);
    assert_grad(
        &|t, v| {
            let m = t.matmul(v[1], v[2]);
            let scale = t.slice_cols(m, 0, d);
            let shift = t.slice_cols(m, d, 2 * d);
            let gate = t.slice_cols(m, 2 * d, 3 * d);
            let xn = t.layernorm(v[0]);
            let sx = t.mul_row(xn, scale);
            let sxs = t.add_row(sx, shift);
            let inner = t.gelu(sxs);
            let gated = t.mul_row(inner, gate);
            let out = t.add(v[0], gated);
            t.smooth_l1(out, &target)
        },
        &[x, c, wmod],
    );
}

#[test]
fn multi_head_attention_module_gradients() {
    // The packaged multi-head attention wrapper (with parameter store) against
    // finite differences through a scalar readout.
    use microdrive::tensor::optim::{ParamStore, ParamTape};
    let d = 8;
    let heads = 2;
    let mut rng = rng::stream(27, "mha-grad");
    let mut store = ParamStore::new();
    nn::init_mha(&mut store, "blk", d, &mut rng);
    let x = randn(&[3, d], 28);
    let kv = randn(&[5, d], 29);
    let padding = [true, true, true, false, true];

    let run = |store: &ParamStore| -> (f64, std::collections::BTreeMap<String, Array>) {
        let mut tape = Tape::new();
        let mut pt = ParamTape::new(&mut tape, store);
        let xv = pt.tape.leaf(x.clone());
        let kvv = pt.tape.leaf(kv.clone());
        let out = nn::multi_head_attention(&mut pt, "blk", xv, kvv, Some(&padding), heads);
        let loss = pt.tape.mean_all(out);
        let grads = pt.tape.backward(loss);
        let val = pt.tape.value(loss).scalar_value();
        (val, pt.collect_grads(&grads))
    };
    let (_, grads) = run(&store);

    for name in ["blk.q.w", "blk.k.b", "blk.v.w", "blk.o.w"] {
        let base = store.get(name).clone();
        let analytic = grads.get(name).cloned().unwrap_or_else(|| {
            Array::zeros(base.shape())
        });
        let mut numeric = Array::zeros(base.shape());
        for i in 0..base.len() {
            let mut s = store.clone();
            s.get_mut(name).data_mut()[i] += H;
            let (fp, _) = run(&s);
            let mut s = store.clone();
            s.get_mut(name).data_mut()[i] -= H;
            let (fm, _) = run(&s);
            numeric.data_mut()[i] = (fp - fm) / (2.0 * H);
        }
        let err = microdrive::tensor::gradcheck::max_rel_error(&analytic, &numeric);
        assert!(err < TOL, "{name}: gradient error {err:.3e}");
    }
}
