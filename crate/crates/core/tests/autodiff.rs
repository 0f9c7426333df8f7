use iisan::tensor::{finite_difference_check, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_gradient_is_outer_product_of_upstream() {
    // L = sum(W ⊙ (A·B)) gives dA = W·Bᵀ and dB = Aᵀ·W
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b, w) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5]), random(&mut rng, &[3, 5]));
    let mut store = ParamStore::new();
    let ia = store.add("a", a.clone(), true).unwrap();
    let ib = store.add("b", b.clone(), true).unwrap();
    let mut tape = Tape::new();
    let (va, vb, vw) = (tape.param(&store, ia), tape.param(&store, ib), tape.constant(w.clone()));
    let p = tape.matmul(va, vb).unwrap();
    let m = tape.mul(p, vw).unwrap();
    let loss = tape.sum(m);
    let g = tape.backward(loss).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = (0..5).map(|j| w.data()[i * 5 + j] * b.data()[k * 5 + j]).sum();
            assert!((g.get("a").unwrap().data()[i * 4 + k] - want).abs() < 1e-12);
        }
    }
    for k in 0..4 {
        for j in 0..5 {
            let want: f64 = (0..3).map(|i| a.data()[i * 4 + k] * w.data()[i * 5 + j]).sum();
            assert!((g.get("b").unwrap().data()[k * 5 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn gelu_derivative_at_100_points() {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let xs: Vec<f64> = (0..100).map(|i| -6.0 + 12.0 * i as f64 / 99.0).collect();
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(vec![1, 100], xs.clone()).unwrap(), true).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let y = tape.gelu(x);
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    for (i, &x) in xs.iter().enumerate() {
        let u = c * (x + 0.044715 * x.powi(3));
        let t = u.tanh();
        let want = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
        let got = g.get("x").unwrap().data()[i];
        assert!((got - want).abs() < 1e-12, "x={x}: {got} vs {want}");
    }
}

#[test]
fn composite_graph_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&mut rng, &[4, 6]), true).unwrap();
    let gain = store.add("gain", random(&mut rng, &[6]), true).unwrap();
    let off = store.add("off", random(&mut rng, &[6]), true).unwrap();
    store.add("frozen", random(&mut rng, &[2]), false).unwrap();
    let x = random(&mut rng, &[3, 4]);
    let report = finite_difference_check(
        &mut store,
        |tape, store| {
            let xv = tape.constant(x.clone());
            let wv = tape.param(store, w);
            let h = tape.matmul(xv, wv)?;
            let (gv, ov) = (tape.param(store, gain), tape.param(store, off));
            let n = tape.layernorm(h, gv, ov)?;
            let a = tape.gelu(n);
            let s = tape.softmax_rows(a, true)?;
            let m = tape.mul(s, a)?;
            Ok(tape.sum(m))
        },
        1e-5,
        1e-7,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
    assert_eq!(report.entries.len(), 3);
}
