use kdlt::ndgrad::{grad_check, Tape, Tensor, Var};
use kdlt::Result;
use proptest::prelude::*;

const EPS: f32 = 1e-2;
const TOL: f64 = 1e-3;

fn tensor(shape: &[usize], lo: f32, hi: f32) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    let shape = shape.to_vec();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

// Weighted sum so every output coordinate gets a distinct cotangent.
fn probe(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = t.constant(Tensor::from_fn(shape, |i| ((i * 7 % 11) as f32 - 5.0) * 0.1));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops_pass_gradcheck(x in tensor(&[2, 3], -2.0, 2.0)) {
        let err = grad_check(|t, v| {
            let e = t.exp(v);
            let s = t.silu(v);
            let q = t.square(v)?;
            let sq = t.add_scalar(q, 1.0);
            let r = t.sqrt(sq);
            let l = t.log(sq);
            let a = t.mul(e, s)?;
            let b = t.div(r, sq)?;
            let c = t.sub(a, b)?;
            let d = t.add(c, l)?;
            probe(t, d)
        }, &x, 1e-3).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_family_passes_gradcheck(x in tensor(&[3, 4], -3.0, 3.0), axis in 0usize..2) {
        let err = grad_check(|t, v| {
            let s = t.softmax(v, axis)?;
            let l = t.log_softmax(v, axis)?;
            let y = t.add(s, l)?;
            probe(t, y)
        }, &x, EPS).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn matmul_and_shapes_pass_gradcheck(x in tensor(&[2, 3, 4], -1.0, 1.0)) {
        let err = grad_check(|t, v| {
            let vt = t.permute(v, &[0, 2, 1])?;
            let g = t.matmul(v, vt)?;
            let flat = t.reshape(g, &[6, 3])?;
            let rows = t.gather_rows(flat, &[5, 0, 0, 2])?;
            let both = t.concat(&[rows, flat])?;
            let col = t.sum_axis(both, 1)?;
            let m = t.mean_axis(v, 2)?;
            let m = t.reshape(m, &[2, 3, 1])?;
            let e = t.expand(m, &[2, 3, 4])?;
            let y = t.mul(e, v)?;
            let a = probe(t, col)?;
            let b = probe(t, y)?;
            t.add(a, b)
        }, &x, EPS).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn standardize_passes_gradcheck(x in tensor(&[2, 6], -2.0, 2.0)) {
        let err = grad_check(|t, v| {
            let y = t.standardize(v, 1e-5);
            probe(t, y)
        }, &x, EPS).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn conv2d_passes_gradcheck_in_every_input(
        x in tensor(&[1, 2, 5, 5], -1.0, 1.0),
        w in tensor(&[3, 2, 3, 3], -0.5, 0.5),
        b in tensor(&[3], -0.5, 0.5),
        stride in 1usize..3,
    ) {
        let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
        let wrt_x = grad_check(move |t, v| {
            let (wv, bv) = (t.constant(wc.clone()), t.constant(bc.clone()));
            let y = t.conv2d(v, wv, Some(bv), stride, 1)?;
            probe(t, y)
        }, &x, EPS).unwrap();
        let wrt_w = grad_check(|t, v| {
            let (xv, bv) = (t.constant(xc.clone()), t.constant(b.clone()));
            let y = t.conv2d(xv, v, Some(bv), stride, 1)?;
            probe(t, y)
        }, &w, EPS).unwrap();
        let wrt_b = grad_check(|t, v| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(xv, wv, Some(v), stride, 1)?;
            probe(t, y)
        }, &b, EPS).unwrap();
        prop_assert!(wrt_x.max(wrt_w).max(wrt_b) < TOL, "{wrt_x} {wrt_w} {wrt_b}");
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        x in tensor(&[4, 5], -20.0, 20.0),
        c in -50.0f32..50.0,
    ) {
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v, 1).unwrap();
        let shifted = t.add_scalar(v, c);
        let s2 = t.softmax(shifted, 1).unwrap();
        for row in t.value(s).data().chunks(5) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(t.value(s).max_abs_diff(t.value(s2)) < 1e-5);
    }

    #[test]
    fn matmul_is_associative(
        a in tensor(&[3, 4], -1.0, 1.0),
        b in tensor(&[4, 2], -1.0, 1.0),
        c in tensor(&[2, 5], -1.0, 1.0),
    ) {
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(a), t.constant(b), t.constant(c));
        let ab = t.matmul(a, b).unwrap();
        let left = t.matmul(ab, c).unwrap();
        let bc = t.matmul(b, c).unwrap();
        let right = t.matmul(a, bc).unwrap();
        prop_assert!(t.value(left).max_abs_diff(t.value(right)) < 1e-5);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(x in tensor(&[3, 6], -10.0, 10.0)) {
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v, 1).unwrap();
        let ls = t.log_softmax(v, 1).unwrap();
        for (&p, &l) in t.value(s).data().iter().zip(t.value(ls).data()) {
            prop_assert!((p.ln() - l).abs() < 1e-4 || p < 1e-30);
        }
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let w = t.param(Tensor::from_fn([3], |i| i as f32));
    let c = t.constant(Tensor::ones([3]));
    let y = t.mul(w, c).unwrap();
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    assert!(t.grad(c).is_none());
}

#[test]
fn detach_blocks_gradient() {
    let mut t = Tape::new();
    let w = t.param(Tensor::from_fn([2], |i| i as f32 + 1.0));
    let d = t.detach(w);
    let y = t.mul(w, d).unwrap();
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    // d/dw (w · stop(w)) = stop(w)
    assert_eq!(t.grad(w).unwrap(), &[1.0, 2.0]);
}
