//! Teacher pretraining and student distillation loops.

use std::fmt;

use super::optim::Adam;
use crate::alphabet;
use crate::error::{Error, Result};
use crate::losses::{self, DistillWeights, LossComponents, SoftTarget, FEATURE_EPS};
use crate::ndgrad::{Tape, Tensor};
use crate::par;
use crate::recognizer::{check_parity, cross_entropy_loss, Recognizer, RecognizerConfig};
use crate::rng::{derive_seed, SeededRng};
use crate::synthdata::{self, DegradationSpec, GrayImage, SamplePair};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const REDEGRADE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub weights: DistillWeights,
    pub visual: bool,
    pub semantic: bool,
    pub logits: bool,
    pub clip_norm: Option<f64>,
    /// Start the student from the teacher's weights instead of a random init.
    pub init_from_teacher: bool,
    /// After the first epoch, feed the student a freshly degraded copy of each
    /// high-resolution image, drawn from the sample's own subset band.
    pub redegrade: bool,
    /// Teacher geometry; the student's is derived from it.
    pub architecture: RecognizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 3e-3,
            lr_decay: 0.1,
            decay_every: 25,
            seed: 0,
            weights: DistillWeights::default(),
            visual: true,
            semantic: true,
            logits: true,
            clip_norm: Some(5.0),
            init_from_teacher: true,
            redegrade: true,
            architecture: RecognizerConfig::teacher(),
        }
    }
}

impl TrainConfig {
    /// Cross-entropy only; the three distillation terms are switched off.
    pub fn ce_only(mut self) -> Self {
        self.visual = false;
        self.semantic = false;
        self.logits = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.semantic && self.weights.lambda3 > 0.0 && self.batch_size < 2 {
            return Err(Error::Config("semantic loss needs batch size >= 2 for negatives".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || self.decay_every == 0 {
            return Err(Error::Config(
                "learning rate, decay factor and decay interval must be positive".into(),
            ));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    fn enabled(&self) -> (bool, bool, bool) {
        let w = &self.weights;
        (
            self.visual && w.lambda2 > 0.0,
            self.semantic && w.lambda3 > 0.0,
            self.logits && w.lambda4 > 0.0,
        )
    }
}

/// Epoch averages of the loss terms (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total: f64,
    pub components: LossComponents,
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_ce,loss_visual,loss_semantic,loss_logits";

impl fmt::Display for EpochMetrics {
    /// One metrics CSV row.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.components;
        write!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.total, c.ce, c.visual, c.semantic, c.logits
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{r}\n"));
    }
    out
}

/// Stacks images into an `N×1×H×W` tensor.
pub fn stack_images(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Dimension("images in a batch must share a size".into()));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new([images.len(), 1, h, w], data)
}

fn encode_labels(samples: &[SamplePair]) -> Result<Vec<Vec<usize>>> {
    samples.iter().map(|s| alphabet::encode(&s.text)).collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(derive_seed(derive_seed(seed, SHUFFLE_STREAM), epoch as u64)).shuffle(&mut order);
    order
}

/// Student inputs for one epoch: the stored low-resolution images, or fresh
/// degradations when `redegrade` is on.
fn epoch_inputs(samples: &[SamplePair], config: &TrainConfig, epoch: usize) -> Option<Vec<GrayImage>> {
    if !config.redegrade || epoch == 0 {
        return None;
    }
    let root = derive_seed(derive_seed(config.seed, REDEGRADE_STREAM), epoch as u64);
    Some(par::map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let seed = derive_seed(root, i as u64);
        let mut rng = SeededRng::new(seed);
        let spec = DegradationSpec::sample(s.subset, &mut rng, derive_seed(seed, 1));
        synthdata::degrade(&s.hr, &spec)
    }))
}

fn collect_grads(tape: &Tape, params: &crate::recognizer::ParamVars, model: &Recognizer) -> Vec<Vec<f32>> {
    params
        .0
        .iter()
        .zip(model.weights())
        .map(|(&v, w)| {
            tape.grad(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; w.tensor.numel()])
        })
        .collect()
}

fn divergence(phase: &str, epoch: usize, batch: usize, c: &LossComponents, total: f64) -> Error {
    Error::Divergence(format!(
        "{phase} epoch {epoch} batch {batch}: total={total} ce={} visual={} semantic={} logits={}",
        c.ce, c.visual, c.semantic, c.logits
    ))
}

/// Per-batch loss accumulator.
#[derive(Default)]
struct Running {
    batches: usize,
    total: f64,
    c: LossComponents,
}

impl Running {
    fn add(&mut self, total: f64, c: &LossComponents) {
        self.batches += 1;
        self.total += total;
        self.c.ce += c.ce;
        self.c.visual += c.visual;
        self.c.semantic += c.semantic;
        self.c.logits += c.logits;
    }

    fn finish(&self, epoch: usize) -> EpochMetrics {
        let k = self.batches.max(1) as f64;
        EpochMetrics {
            epoch,
            total: self.total / k,
            components: LossComponents {
                ce: self.c.ce / k,
                visual: self.c.visual / k,
                semantic: self.c.semantic / k,
                logits: self.c.logits / k,
            },
        }
    }
}

/// Trains a teacher with cross-entropy on high-resolution images.
/// `on_epoch` sees each epoch's averages as they complete.
pub fn train_teacher(
    samples: &[SamplePair],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Recognizer, Vec<EpochMetrics>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut model = Recognizer::new(config.architecture.clone(), derive_seed(config.seed, INIT_STREAM))?;
    let labels = encode_labels(samples)?;
    let mut adam = Adam::new(model.weights(), config.clip_norm);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut run = Running::default();
        for (b, batch) in epoch_order(samples.len(), config.seed, epoch)
            .chunks(config.batch_size)
            .enumerate()
        {
            let images: Vec<&GrayImage> = batch.iter().map(|&i| &samples[i].hr).collect();
            let batch_labels: Vec<Vec<usize>> = batch.iter().map(|&i| labels[i].clone()).collect();
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let x = tape.constant(stack_images(&images)?);
            let out = model.forward(&mut tape, &p, x)?;
            let ce = cross_entropy_loss(&mut tape, out.logits, &batch_labels)?;
            let c = LossComponents {
                ce: tape.item(ce)? as f64,
                ..Default::default()
            };
            if !c.ce.is_finite() {
                return Err(divergence("teacher", epoch, b, &c, c.ce));
            }
            tape.backward(ce)?;
            let grads = collect_grads(&tape, &p, &model);
            adam.update(model.weights_mut(), &grads, lr)?;
            run.add(c.ce, &c);
        }
        let m = run.finish(epoch + 1);
        log::info!("teacher {m}");
        on_epoch(&m);
        history.push(m);
    }
    Ok((model, history))
}

/// Teacher outputs for one sample, computed once because the teacher is frozen.
#[derive(Clone, Debug)]
pub struct TeacherCache {
    /// `C×h×w`, standardized per channel.
    pub features: Vec<f32>,
    /// `h×w`
    pub mask: Vec<f32>,
    /// `T×C`
    pub semantics: Vec<f32>,
    pub target: Option<SoftTarget>,
}

/// Runs the teacher over every sample's high-resolution image.
pub fn teacher_cache(
    teacher: &Recognizer,
    samples: &[SamplePair],
    w: &DistillWeights,
    with_targets: bool,
    batch: usize,
) -> Result<Vec<TeacherCache>> {
    let labels = encode_labels(samples)?;
    let chunks: Vec<Vec<usize>> = (0..samples.len())
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    let per_chunk = par::map_indexed(chunks.len(), |ci| -> Result<Vec<TeacherCache>> {
        let idx = &chunks[ci];
        let images: Vec<&GrayImage> = idx.iter().map(|&i| &samples[i].hr).collect();
        let lengths: Vec<usize> = idx.iter().map(|&i| labels[i].len()).collect();
        let out = teacher.infer(&stack_images(&images)?)?;
        let mut tape = Tape::new();
        let f = tape.constant(out.features.clone());
        let f = losses::normalize_features(&mut tape, f, FEATURE_EPS)?;
        let features = tape.value(f).clone();
        let mask = losses::teacher_mask(&out.attention, &lengths)?;
        let targets = if with_targets {
            Some(losses::soft_targets(&out.logits, &lengths, w)?)
        } else {
            None
        };
        let (fs, ms, ss) = (
            features.numel() / idx.len(),
            mask.numel() / idx.len(),
            out.semantics.numel() / idx.len(),
        );
        Ok((0..idx.len())
            .map(|k| TeacherCache {
                features: features.data()[k * fs..(k + 1) * fs].to_vec(),
                mask: mask.data()[k * ms..(k + 1) * ms].to_vec(),
                semantics: out.semantics.data()[k * ss..(k + 1) * ss].to_vec(),
                target: targets.as_ref().map(|t| t[k].clone()),
            })
            .collect())
    });
    let mut all = Vec::with_capacity(samples.len());
    for chunk in per_chunk {
        all.extend(chunk?);
    }
    Ok(all)
}

fn weights_fingerprint(model: &Recognizer) -> Vec<u32> {
    model
        .weights()
        .iter()
        .flat_map(|w| w.tensor.data().iter().map(|v| v.to_bits()))
        .collect()
}

/// One distillation step's loss graph on `tape`; returns the total and its parts.
pub fn distill_batch_loss(
    tape: &mut Tape,
    student: &Recognizer,
    params: &crate::recognizer::ParamVars,
    lr_images: Tensor,
    labels: &[Vec<usize>],
    cache: &[&TeacherCache],
    config: &TrainConfig,
) -> Result<(crate::ndgrad::Var, LossComponents)> {
    let (use_visual, use_semantic, use_logits) = config.enabled();
    let w = &config.weights;
    let n = labels.len();
    let x = tape.constant(lr_images);
    let out = student.forward(tape, params, x)?;
    let ce = cross_entropy_loss(tape, out.logits, labels)?;
    let lengths: Vec<usize> = labels.iter().map(Vec::len).collect();
    let mut c = LossComponents {
        ce: tape.item(ce)? as f64,
        ..Default::default()
    };

    let visual = if use_visual {
        let shape = tape.shape(out.features).to_vec();
        let f_tea = Tensor::new(shape.clone(), cache.iter().flat_map(|t| t.features.iter().copied()).collect())?;
        let mask = Tensor::new(
            vec![n, shape[2], shape[3]],
            cache.iter().flat_map(|t| t.mask.iter().copied()).collect(),
        )?;
        let f_tea = tape.constant(f_tea);
        let f_stu = losses::normalize_features(tape, out.features, FEATURE_EPS)?;
        let v = losses::visual_focus_loss(tape, f_tea, f_stu, &mask)?;
        c.visual = tape.item(v)? as f64;
        Some(v)
    } else {
        None
    };

    let semantic = if use_semantic {
        let shape = tape.shape(out.semantics).to_vec();
        let h_tea = Tensor::new(shape, cache.iter().flat_map(|t| t.semantics.iter().copied()).collect())?;
        let h_tea = tape.constant(h_tea);
        let s = losses::semantic_contrastive_loss(tape, h_tea, out.semantics, &lengths, w.tau_semantic)?;
        c.semantic = tape.item(s)? as f64;
        Some(s)
    } else {
        None
    };

    let logits = if use_logits {
        let targets: Vec<SoftTarget> = cache
            .iter()
            .map(|t| {
                t.target
                    .clone()
                    .ok_or_else(|| Error::State("teacher cache lacks soft targets".into()))
            })
            .collect::<Result<_>>()?;
        let l = losses::soft_logits_loss_batch(tape, &targets, out.logits, w.tau_logits)?;
        c.logits = tape.item(l)? as f64;
        Some(l)
    } else {
        None
    };

    let total = losses::total_loss(tape, ce, visual, semantic, logits, w)?;
    Ok((total, c))
}

/// Distills a low-resolution student from a frozen teacher.
pub fn distill_student(
    samples: &[SamplePair],
    teacher: &Recognizer,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Recognizer, Vec<EpochMetrics>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let student_config = RecognizerConfig::student_of(teacher.config())?;
    check_parity(teacher.config(), &student_config)?;
    let mut student = if config.init_from_teacher {
        teacher.with_config(student_config)?
    } else {
        Recognizer::new(student_config, derive_seed(config.seed, INIT_STREAM))?
    };

    let before = weights_fingerprint(teacher);
    let (use_visual, use_semantic, use_logits) = config.enabled();
    let cache = if use_visual || use_semantic || use_logits {
        teacher_cache(teacher, samples, &config.weights, use_logits, config.batch_size.max(8))?
    } else {
        Vec::new()
    };
    let labels = encode_labels(samples)?;
    let mut adam = Adam::new(student.weights(), config.clip_norm);
    let mut history = Vec::with_capacity(config.epochs);
    let empty = TeacherCache {
        features: Vec::new(),
        mask: Vec::new(),
        semantics: Vec::new(),
        target: None,
    };
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut run = Running::default();
        let fresh = epoch_inputs(samples, config, epoch);
        for (b, batch) in epoch_order(samples.len(), config.seed, epoch)
            .chunks(config.batch_size)
            .enumerate()
        {
            let images: Vec<&GrayImage> = batch
                .iter()
                .map(|&i| fresh.as_ref().map_or(&samples[i].lr, |f| &f[i]))
                .collect();
            let batch_labels: Vec<Vec<usize>> = batch.iter().map(|&i| labels[i].clone()).collect();
            let batch_cache: Vec<&TeacherCache> = batch.iter().map(|&i| cache.get(i).unwrap_or(&empty)).collect();
            let mut tape = Tape::new();
            let p = student.bind(&mut tape, true);
            let (total, c) = distill_batch_loss(
                &mut tape,
                &student,
                &p,
                stack_images(&images)?,
                &batch_labels,
                &batch_cache,
                config,
            )?;
            let total_value = tape.item(total)? as f64;
            if !total_value.is_finite() {
                return Err(divergence("student", epoch, b, &c, total_value));
            }
            tape.backward(total)?;
            let grads = collect_grads(&tape, &p, &student);
            adam.update(student.weights_mut(), &grads, lr)?;
            run.add(total_value, &c);
        }
        let m = run.finish(epoch + 1);
        log::info!("student {m}");
        on_epoch(&m);
        history.push(m);
    }
    if weights_fingerprint(teacher) != before {
        return Err(Error::State("teacher weights changed during distillation".into()));
    }
    Ok((student, history))
}
