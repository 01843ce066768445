//! Per-op timing probe on encoder-sized tensors.
use microdrive::tensor::tape::Tape;
use microdrive::tensor::Array;
use microdrive::rng;
use std::time::Instant;

#[test]
fn profile_ops() {
    let mut r = rng::stream(1, "p");
    let x = Array::randn(&[10000, 8], &mut r);
    let w = Array::randn(&[8, 32], &mut r);
    let w2 = Array::randn(&[32, 32], &mut r);
    let b = Array::randn(&[1, 32], &mut r);

    let t0 = Instant::now();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let _ = tape.matmul(xv, wv);
    }
    println!("matmul 10000x8x32: {:?}", t0.elapsed() / 20);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let h = tape.matmul(xv, wv);
    let bv = tape.constant(b.clone());
    let t0 = Instant::now();
    for _ in 0..20 { let _ = tape.add_row(h, bv); }
    println!("add_row 10000x32: {:?}", t0.elapsed() / 20);

    let t0 = Instant::now();
    for _ in 0..20 { let _ = tape.gelu(h); }
    println!("gelu 10000x32: {:?}", t0.elapsed() / 20);

    let w2v = tape.constant(w2.clone());
    let t0 = Instant::now();
    for _ in 0..20 { let _ = tape.matmul(h, w2v); }
    println!("matmul 10000x32x32: {:?}", t0.elapsed() / 20);

    let t0 = Instant::now();
    for _ in 0..20 { let _ = microdrive::bev::positional_encoding(100, 100, 32); }
    println!("positional_encoding: {:?}", t0.elapsed() / 20);

    let t0 = Instant::now();
    for _ in 0..20 { let _ = tape.constant(x.clone()); }
    println!("constant clone 10000x8: {:?}", t0.elapsed() / 20);

    let idx: Vec<usize> = (0..20000).map(|i| i % 10000).collect();
    let t0 = Instant::now();
    for _ in 0..20 { let _ = tape.gather_rows(h, &idx); }
    println!("gather_rows 20000 of 10000x32: {:?}", t0.elapsed() / 20);
}
