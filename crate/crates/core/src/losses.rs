//! Distillation objectives between a frozen teacher and a trainable student.
//!
//! * visual focus: per-channel cosine between standardized, attention-masked
//!   backbone features;
//! * semantic contrastive: NT-Xent over per-character semantic vectors, with
//!   student anchors and teacher positives;
//! * soft logits: KL from the sequence-revised teacher distribution to the
//!   temperature-softened student distribution;
//! * the weighted total with the task cross-entropy.
//!
//! Teacher-side inputs are detached inside every loss.

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::seqlabel::{self, StepDistributions};

/// Weights and knobs of the combined objective.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillWeights {
    /// Cross-entropy weight.
    pub lambda1: f32,
    /// Visual focus weight.
    pub lambda2: f32,
    /// Semantic contrastive weight.
    pub lambda3: f32,
    /// Soft logits weight.
    pub lambda4: f32,
    pub tau_semantic: f32,
    pub tau_logits: f32,
    /// Mixing weight of the sequence-level vote.
    pub alpha: f64,
    pub beam_k: usize,
    pub threshold_r: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            lambda1: 4.0,
            lambda2: 2.0,
            lambda3: 0.025,
            lambda4: 20.0,
            tau_semantic: 0.1,
            tau_logits: 4.0,
            alpha: 0.5,
            beam_k: 6,
            threshold_r: 0.1,
        }
    }
}

impl DistillWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {lambdas:?}")));
        }
        if !(self.tau_semantic > 0.0) || !(self.tau_logits > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.threshold_r) {
            return Err(Error::Config("alpha and threshold_r must lie in [0, 1]".into()));
        }
        if self.beam_k == 0 {
            return Err(Error::Config("beam_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Default standardization epsilon used during training.
pub const FEATURE_EPS: f32 = 1e-5;
const NORM_EPS: f32 = 1e-8;
const LOG_CLAMP: f32 = 1e-12;
const EXCLUDED_LOGIT: f32 = -1e30;

/// Standardizes each `(sample, channel)` spatial map of `N×C×h×w` features:
/// subtract the spatial mean, divide by population std + `eps`.
pub fn normalize_features(tape: &mut Tape, features: Var, eps: f32) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("features must be N×C×h×w, got {shape:?}")));
    }
    let flat = tape.reshape(features, &[shape[0], shape[1], shape[2] * shape[3]])?;
    let norm = tape.standardize(flat, eps);
    tape.reshape(norm, &shape)
}

/// Soft spatial mask per sample: elementwise max of the teacher attention over
/// valid steps, rescaled so its largest entry is 1. A sample with no valid
/// step gets a mask of ones.
pub fn teacher_mask(attention: &Tensor, valid_lengths: &[usize]) -> Result<Tensor> {
    let shape = attention.shape();
    if shape.len() != 4 || shape[0] != valid_lengths.len() {
        return Err(Error::Dimension(format!(
            "attention {shape:?} does not match {} lengths",
            valid_lengths.len()
        )));
    }
    let (n, t, s) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut mask = vec![1.0f32; n * s];
    for (i, &len) in valid_lengths.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let out = &mut mask[i * s..(i + 1) * s];
        out.fill(0.0);
        for step in 0..len.min(t) {
            let row = &attention.data()[(i * t + step) * s..(i * t + step + 1) * s];
            for (m, &a) in out.iter_mut().zip(row) {
                *m = m.max(a);
            }
        }
        let peak = out.iter().fold(0.0f32, |a, &b| a.max(b));
        if peak > 0.0 {
            out.iter_mut().for_each(|m| *m /= peak);
        } else {
            out.fill(1.0);
        }
    }
    Tensor::new(vec![n, shape[2], shape[3]], mask)
}

/// `1 − mean over (sample, channel) of cos(m ⊙ F_tea, m ⊙ F_stu)`.
///
/// Both inputs are expected standardized; the mask broadcasts over channels.
/// A zero masked vector contributes similarity 0. Range `[0, 2]`.
pub fn visual_focus_loss(tape: &mut Tape, f_tea: Var, f_stu: Var, mask: &Tensor) -> Result<Var> {
    let shape = tape.shape(f_stu).to_vec();
    if shape.len() != 4 || tape.shape(f_tea) != &shape[..] {
        return Err(Error::Dimension(format!(
            "feature shapes {:?} and {shape:?} must match and be N×C×h×w",
            tape.shape(f_tea)
        )));
    }
    let (n, c, s) = (shape[0], shape[1], shape[2] * shape[3]);
    if mask.shape() != [n, shape[2], shape[3]] {
        return Err(Error::Dimension(format!(
            "mask {:?} must be {n}×{}×{}",
            mask.shape(),
            shape[2],
            shape[3]
        )));
    }
    let tea = tape.detach(f_tea);
    let tea = tape.reshape(tea, &[n, c, s])?;
    let stu = tape.reshape(f_stu, &[n, c, s])?;
    let m = tape.constant(mask.clone().reshape([n, 1, s])?);
    let m = tape.expand(m, &[n, c, s])?;
    let a = tape.mul(tea, m)?;
    let b = tape.mul(stu, m)?;
    let ab = tape.mul(a, b)?;
    let dot = tape.sum_axis(ab, 2)?;
    let cos = cosine_from_dot(tape, a, b, dot, 2)?;
    let mean = tape.mean(cos);
    let neg = tape.neg(mean);
    Ok(tape.add_scalar(neg, 1.0))
}

fn cosine_from_dot(tape: &mut Tape, a: Var, b: Var, dot: Var, axis: usize) -> Result<Var> {
    let aa = tape.square(a)?;
    let na = tape.sum_axis(aa, axis)?;
    let bb = tape.square(b)?;
    let nb = tape.sum_axis(bb, axis)?;
    let na = tape.add_scalar(na, NORM_EPS);
    let nb = tape.add_scalar(nb, NORM_EPS);
    let na = tape.sqrt(na);
    let nb = tape.sqrt(nb);
    let den = tape.mul(na, nb)?;
    tape.div(dot, den)
}

fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let sq = tape.square(x)?;
    let ss = tape.sum_axis(sq, 1)?;
    let ss = tape.add_scalar(ss, NORM_EPS);
    let norm = tape.sqrt(ss);
    let norm = tape.expand(norm, &shape)?;
    tape.div(x, norm)
}

/// Generic NT-Xent: for anchor `i`, the softmax over cosine similarities to
/// all candidates except `excluded[i]` is scored at `positives[i]`, then
/// averaged over anchors.
pub fn contrastive_loss(
    tape: &mut Tape,
    anchors: Var,
    candidates: Var,
    positives: &[usize],
    excluded: &[Option<usize>],
    tau: f32,
) -> Result<Var> {
    let (sa, sc) = (tape.shape(anchors).to_vec(), tape.shape(candidates).to_vec());
    if sa.len() != 2 || sc.len() != 2 || sa[1] != sc[1] {
        return Err(Error::Dimension(format!(
            "anchors {sa:?} and candidates {sc:?} must be rank-2 with equal width"
        )));
    }
    let (l, m) = (sa[0], sc[0]);
    if positives.len() != l || excluded.len() != l {
        return Err(Error::Dimension("one positive and exclusion per anchor".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let mut bias = vec![0.0f32; l * m];
    let mut pick = vec![0.0f32; l * m];
    for i in 0..l {
        if positives[i] >= m || excluded[i] == Some(positives[i]) {
            return Err(Error::Contract(format!("invalid positive for anchor {i}")));
        }
        if let Some(e) = excluded[i] {
            bias[i * m + e] = EXCLUDED_LOGIT;
        }
        pick[i * m + positives[i]] = 1.0 / l as f32;
    }
    let an = l2_normalize_rows(tape, anchors)?;
    let cn = l2_normalize_rows(tape, candidates)?;
    let cnt = tape.transpose(cn)?;
    let sims = tape.matmul(an, cnt)?;
    let sims = tape.scale(sims, 1.0 / tau);
    let bias = tape.constant(Tensor::new([l, m], bias)?);
    let logits = tape.add(sims, bias)?;
    let logp = tape.log_softmax(logits, 1)?;
    let pick = tape.constant(Tensor::new([l, m], pick)?);
    let picked = tape.mul(logp, pick)?;
    let total = tape.sum(picked);
    Ok(tape.neg(total))
}

/// Flat `(sample · T + step)` indices of valid character slots.
pub fn valid_rows(valid_lengths: &[usize], steps: usize) -> Vec<usize> {
    valid_lengths
        .iter()
        .enumerate()
        .flat_map(|(n, &len)| (0..len.min(steps)).map(move |t| n * steps + t))
        .collect()
}

/// Contrastive alignment of student semantic vectors to teacher ones.
///
/// Anchors are the `L` valid student vectors; the positive of each is the
/// teacher vector at the same slot; candidates are all valid teacher and
/// student vectors except the anchor itself.
pub fn semantic_contrastive_loss(
    tape: &mut Tape,
    h_tea: Var,
    h_stu: Var,
    valid_lengths: &[usize],
    tau: f32,
) -> Result<Var> {
    let shape = tape.shape(h_stu).to_vec();
    if shape.len() != 3 || tape.shape(h_tea) != &shape[..] || shape[0] != valid_lengths.len() {
        return Err(Error::Dimension(format!(
            "semantic shapes {:?}/{shape:?} do not match {} lengths",
            tape.shape(h_tea),
            valid_lengths.len()
        )));
    }
    let (n, t, c) = (shape[0], shape[1], shape[2]);
    let rows = valid_rows(valid_lengths, t);
    let l = rows.len();
    if l == 0 {
        return Err(Error::Contract("no valid characters in batch".into()));
    }
    let tea = tape.detach(h_tea);
    let tea = tape.reshape(tea, &[n * t, c])?;
    let stu = tape.reshape(h_stu, &[n * t, c])?;
    let tea = tape.gather_rows(tea, &rows)?;
    let stu = tape.gather_rows(stu, &rows)?;
    let candidates = tape.concat(&[tea, stu])?;
    let positives: Vec<usize> = (0..l).collect();
    let excluded: Vec<Option<usize>> = (0..l).map(|i| Some(l + i)).collect();
    contrastive_loss(tape, stu, candidates, &positives, &excluded, tau)
}

/// Weighted KL `Σ_r w_r Σ_k p̃ log(p̃ / q)` with `q = softmax(logits / τ)`,
/// `log q` clamped below at `ln 1e-12`.
fn weighted_kl(tape: &mut Tape, targets: &Tensor, row_weights: &[f32], logits: Var, tau: f32) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || targets.shape() != &shape[..] || row_weights.len() != shape[0] {
        return Err(Error::Dimension(format!(
            "targets {:?}, logits {shape:?} and {} row weights disagree",
            targets.shape(),
            row_weights.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let a = shape[1];
    let mut weighted = vec![0.0f32; targets.numel()];
    let mut entropy_term = 0.0f64;
    for (r, &w) in row_weights.iter().enumerate() {
        for k in 0..a {
            let p = targets.data()[r * a + k];
            weighted[r * a + k] = w * p;
            if p > 0.0 {
                entropy_term += w as f64 * p as f64 * (p as f64).ln();
            }
        }
    }
    let scaled = tape.scale(logits, 1.0 / tau);
    let logq = tape.log_softmax(scaled, 1)?;
    let logq = tape.clamp_min(logq, LOG_CLAMP.ln());
    let wt = tape.constant(Tensor::new(shape, weighted)?);
    let cross = tape.mul(logq, wt)?;
    let cross = tape.sum(cross);
    let neg = tape.neg(cross);
    Ok(tape.add_scalar(neg, entropy_term as f32))
}

/// `(1/T) Σ_t KL(p̃_t ‖ q_t)` for one sequence, `p_tilde` and `logits` both `T×|A|`.
pub fn soft_logits_loss(tape: &mut Tape, p_tilde: &Tensor, student_logits: Var, tau: f32) -> Result<Var> {
    let rows = p_tilde.shape()[0];
    weighted_kl(tape, p_tilde, &vec![1.0 / rows as f32; rows], student_logits, tau)
}

/// Teacher target for the soft logits loss on one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    /// `steps × classes`, rows sum to one.
    pub probs: Vec<f32>,
    pub steps: usize,
    pub used_fallback: bool,
}

/// Builds the revised teacher target from raw teacher logits (`steps×classes`).
///
/// Path likelihoods and the top-K vote use temperature-1 probabilities. The
/// word-level term is `softmax(logits / τ)`; the two are mixed with `α` and
/// rows renormalized. Below the path-likelihood threshold the target is the
/// softened word-level distribution alone.
pub fn soft_target(teacher_logits: &[f32], steps: usize, classes: usize, w: &DistillWeights) -> Result<SoftTarget> {
    let word = StepDistributions::from_logits(steps, classes, teacher_logits, w.tau_logits as f64)?;
    let raw = StepDistributions::from_logits(steps, classes, teacher_logits, 1.0)?;
    let label = seqlabel::revise_distribution(&raw, w.alpha, w.beam_k, w.threshold_r)?;
    let probs: Vec<f32> = match &label.sequence_level {
        None => word.probs().iter().map(|&p| p as f32).collect(),
        Some(seq) => {
            let mut mixed: Vec<f64> = word
                .probs()
                .iter()
                .zip(seq)
                .map(|(&p, &s)| (1.0 - w.alpha) * p + w.alpha * s)
                .collect();
            for row in mixed.chunks_mut(classes) {
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
            }
            mixed.into_iter().map(|p| p as f32).collect()
        }
    };
    Ok(SoftTarget {
        probs,
        steps,
        used_fallback: label.used_fallback,
    })
}

/// Soft targets for the valid steps of every sample in `N×T×|A|` teacher logits.
pub fn soft_targets(teacher_logits: &Tensor, valid_lengths: &[usize], w: &DistillWeights) -> Result<Vec<SoftTarget>> {
    let shape = teacher_logits.shape();
    if shape.len() != 3 || shape[0] != valid_lengths.len() {
        return Err(Error::Dimension(format!(
            "teacher logits {shape:?} do not match {} lengths",
            valid_lengths.len()
        )));
    }
    let (t, a) = (shape[1], shape[2]);
    valid_lengths
        .iter()
        .enumerate()
        .map(|(n, &len)| {
            if len == 0 || len > t {
                return Err(Error::Contract(format!("valid length {len} outside 1..={t}")));
            }
            let start = n * t * a;
            soft_target(&teacher_logits.data()[start..start + len * a], len, a, w)
        })
        .collect()
}

/// Batch soft logits loss: per-sample mean over valid steps, then mean over samples.
pub fn soft_logits_loss_batch(
    tape: &mut Tape,
    targets: &[SoftTarget],
    student_logits: Var,
    tau: f32,
) -> Result<Var> {
    let shape = tape.shape(student_logits).to_vec();
    if shape.len() != 3 || shape[0] != targets.len() {
        return Err(Error::Dimension(format!(
            "student logits {shape:?} do not match {} targets",
            targets.len()
        )));
    }
    let (n, t, a) = (shape[0], shape[1], shape[2]);
    let lengths: Vec<usize> = targets.iter().map(|s| s.steps).collect();
    let rows = valid_rows(&lengths, t);
    let mut probs = Vec::with_capacity(rows.len() * a);
    let mut weights = Vec::with_capacity(rows.len());
    for target in targets {
        if target.probs.len() != target.steps * a {
            return Err(Error::Dimension("soft target width mismatch".into()));
        }
        probs.extend_from_slice(&target.probs);
        weights.extend(std::iter::repeat_n(1.0 / (n * target.steps) as f32, target.steps));
    }
    let flat = tape.reshape(student_logits, &[n * t, a])?;
    let picked = tape.gather_rows(flat, &rows)?;
    let targets = Tensor::new([rows.len(), a], probs)?;
    weighted_kl(tape, &targets, &weights, picked, tau)
}

/// Scalar loss values for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub visual: f64,
    pub semantic: f64,
    pub logits: f64,
}

impl LossComponents {
    pub fn weighted_total(&self, w: &DistillWeights) -> f64 {
        w.lambda1 as f64 * self.ce
            + w.lambda2 as f64 * self.visual
            + w.lambda3 as f64 * self.semantic
            + w.lambda4 as f64 * self.logits
    }
}

/// `λ1·ce + λ2·visual + λ3·semantic + λ4·logits`; absent terms contribute nothing.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    visual: Option<Var>,
    semantic: Option<Var>,
    logits: Option<Var>,
    w: &DistillWeights,
) -> Result<Var> {
    let mut total = tape.scale(ce, w.lambda1);
    for (term, lambda) in [(visual, w.lambda2), (semantic, w.lambda3), (logits, w.lambda4)] {
        if let Some(v) = term {
            let scaled = tape.scale(v, lambda);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}
