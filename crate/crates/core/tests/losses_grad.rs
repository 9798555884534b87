use kdlt::losses::*;
use kdlt::ndgrad::{grad_check, Tape, Tensor};
use kdlt::recognizer::{cross_entropy_loss, Recognizer, RecognizerConfig};
use kdlt::rng::SeededRng;

const TOL: f64 = 1e-3;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| (rng.gaussian() * scale) as f32)
}

fn tiny_config(first_stride: usize, h: usize, w: usize) -> RecognizerConfig {
    RecognizerConfig {
        input_height: h,
        input_width: w,
        channels: 4,
        max_seq_len: 3,
        alphabet_size: 5,
        first_conv_stride: first_stride,
        stem_channels: [2, 3],
    }
}

#[test]
fn visual_focus_loss_gradcheck() {
    for seed in 0..4 {
        let tea = random(&[2, 3, 2, 4], seed, 1.0);
        let stu = random(&[2, 3, 2, 4], seed + 100, 1.0);
        let mask = Tensor::from_fn([2, 2, 4], |i| ((i * 5 % 7) as f32) / 6.0);
        let err = grad_check(
            |t, v| {
                let ft = t.constant(tea.clone());
                let ft = normalize_features(t, ft, FEATURE_EPS)?;
                let fs = normalize_features(t, v, FEATURE_EPS)?;
                visual_focus_loss(t, ft, fs, &mask)
            },
            &stu,
            1e-2,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn semantic_contrastive_loss_gradcheck() {
    for seed in 0..4 {
        let tea = random(&[2, 3, 5], seed, 1.0);
        let stu = random(&[2, 3, 5], seed + 100, 1.0);
        let err = grad_check(
            |t, v| {
                let ht = t.constant(tea.clone());
                semantic_contrastive_loss(t, ht, v, &[3, 2], 0.1)
            },
            &stu,
            1e-3,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn soft_logits_loss_gradcheck() {
    let w = DistillWeights::default();
    for seed in 0..4 {
        let teacher = random(&[2, 3, 5], seed, 2.0);
        let targets = soft_targets(&teacher, &[3, 1], &w).unwrap();
        let stu = random(&[2, 3, 5], seed + 100, 2.0);
        let err = grad_check(|t, v| soft_logits_loss_batch(t, &targets, v, w.tau_logits), &stu, 1e-2).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn cross_entropy_and_total_gradcheck() {
    let w = DistillWeights::default();
    let labels = vec![vec![1, 4], vec![0, 2, 4]];
    let teacher = random(&[2, 3, 5], 7, 2.0);
    let targets = soft_targets(&teacher, &[2, 3], &w).unwrap();
    let stu = random(&[2, 3, 5], 8, 1.0);
    let err = grad_check(
        |t, v| {
            let ce = cross_entropy_loss(t, v, &labels)?;
            let kl = soft_logits_loss_batch(t, &targets, v, w.tau_logits)?;
            total_loss(t, ce, None, None, Some(kl), &w)
        },
        &stu,
        1e-2,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn recognizer_gradcheck_on_two_sample_batch() {
    let cfg = tiny_config(2, 8, 16);
    let model = Recognizer::new(cfg, 3).unwrap();
    let x = random(&[2, 1, 8, 16], 5, 0.5);
    let labels = vec![vec![1, 4], vec![2, 3, 4]];
    for k in 0..model.weights().len() {
        let w0 = model.weights()[k].tensor.clone();
        let err = grad_check(
            |tape, wv| {
                let mut p = model.bind(tape, false);
                p.0[k] = wv;
                let xi = tape.constant(x.clone());
                let out = model.forward(tape, &p, xi)?;
                cross_entropy_loss(tape, out.logits, &labels)
            },
            &w0,
            1e-2,
        )
        .unwrap();
        assert!(err < TOL, "{}: {err}", model.weights()[k].name);
    }
}

#[test]
fn teacher_receives_no_gradient_from_any_loss() {
    let w = DistillWeights::default();
    let teacher = Recognizer::new(tiny_config(2, 8, 16), 1).unwrap();
    let student = Recognizer::new(tiny_config(1, 4, 8), 2).unwrap();
    let hr = random(&[2, 1, 8, 16], 3, 0.5);
    let lr = random(&[2, 1, 4, 8], 4, 0.5);
    let labels = vec![vec![1, 4], vec![2, 3, 4]];
    let lengths = [2, 3];

    let mut tape = Tape::new();
    let tp = teacher.bind(&mut tape, true);
    let sp = student.bind(&mut tape, true);
    let hv = tape.constant(hr);
    let lv = tape.constant(lr);
    let to = teacher.forward(&mut tape, &tp, hv).unwrap();
    let so = student.forward(&mut tape, &sp, lv).unwrap();

    let mask = teacher_mask(tape.value(to.attention), &lengths).unwrap();
    let ft = normalize_features(&mut tape, to.features, FEATURE_EPS).unwrap();
    let fs = normalize_features(&mut tape, so.features, FEATURE_EPS).unwrap();
    let visual = visual_focus_loss(&mut tape, ft, fs, &mask).unwrap();
    let semantic = semantic_contrastive_loss(&mut tape, to.semantics, so.semantics, &lengths, w.tau_semantic).unwrap();
    let targets = soft_targets(&tape.value(to.logits).clone(), &lengths, &w).unwrap();
    let logits = soft_logits_loss_batch(&mut tape, &targets, so.logits, w.tau_logits).unwrap();
    let ce = cross_entropy_loss(&mut tape, so.logits, &labels).unwrap();
    let total = total_loss(&mut tape, ce, Some(visual), Some(semantic), Some(logits), &w).unwrap();
    tape.backward(total).unwrap();

    for (i, v) in tp.0.iter().enumerate() {
        let g = tape.grad(*v);
        assert!(g.is_none_or(|g| g.iter().all(|&x| x == 0.0)), "teacher param {i} got gradient");
    }
    let student_norm: f32 = sp.0.iter().filter_map(|v| tape.grad(*v)).flatten().map(|g| g * g).sum();
    assert!(student_norm > 0.0);
}

#[test]
fn self_distillation_identity() {
    // Same weights on both sides and the same input: features align exactly
    // and the student sits at the optimum of the visual loss.
    let model = Recognizer::new(tiny_config(1, 4, 8), 9).unwrap();
    let x = random(&[2, 1, 4, 8], 6, 0.5);
    let lengths = [2, 3];
    let mut tape = Tape::new();
    let tp = model.bind(&mut tape, false);
    let sp = model.bind(&mut tape, true);
    let xv = tape.constant(x);
    let to = model.forward(&mut tape, &tp, xv).unwrap();
    let so = model.forward(&mut tape, &sp, xv).unwrap();
    let mask = teacher_mask(tape.value(to.attention), &lengths).unwrap();
    let ft = normalize_features(&mut tape, to.features, FEATURE_EPS).unwrap();
    let fs = normalize_features(&mut tape, so.features, FEATURE_EPS).unwrap();
    let visual = visual_focus_loss(&mut tape, ft, fs, &mask).unwrap();
    assert!(tape.item(visual).unwrap().abs() < 1e-5);

    // The KL against the undistorted teacher distribution vanishes.
    let logits = tape.value(to.logits).clone();
    let a = logits.shape()[2];
    let p: Vec<f32> = logits.data()[..2 * a]
        .chunks(a)
        .flat_map(|row| {
            let m = row.iter().fold(f32::MIN, |x, &y| x.max(y));
            let e: Vec<f32> = row.iter().map(|&z| ((z - m) / 4.0).exp()).collect();
            let s: f32 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect();
    let flat = tape.reshape(so.logits, &[6, a]).unwrap();
    let first = tape.gather_rows(flat, &[0, 1]).unwrap();
    let kl = soft_logits_loss(&mut tape, &Tensor::new([2, a], p).unwrap(), first, 4.0).unwrap();
    assert!(tape.item(kl).unwrap().abs() < 1e-5);
}
