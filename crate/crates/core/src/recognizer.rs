//! Attention-based encoder–decoder text recognizer.
//!
//! A four-block convolutional backbone (the last one at stride 1) produces features `F[N×C×h×w]`.
//! Learned position queries attend over the flattened feature map
//! (`softmax(QKᵀ/√C)V`) to produce one semantic vector per character slot,
//! and a linear head maps each vector to class logits. Teacher and student
//! share the architecture; the student halves the first block's stride so a
//! half-resolution input yields teacher-shaped features.

use crate::alphabet;
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecognizerConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Feature channels `C` produced by the backbone.
    pub channels: usize,
    /// Number of character slots `T` (longest label + end marker must fit).
    pub max_seq_len: usize,
    pub alphabet_size: usize,
    pub first_conv_stride: usize,
    /// Output channels of the first two backbone blocks.
    pub stem_channels: [usize; 2],
}

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;
/// Std of the positional embeddings and queries at init. Unit-scale draws
/// make the first attention maps sharp and random, and some seeds never
/// recover a clean slot-to-column alignment.
const EMBED_INIT_STD: f64 = 0.1;

impl RecognizerConfig {
    pub fn teacher() -> Self {
        Self {
            input_height: 32,
            input_width: 128,
            channels: 64,
            max_seq_len: 12,
            alphabet_size: alphabet::SIZE,
            first_conv_stride: 2,
            stem_channels: [16, 32],
        }
    }

    pub fn student() -> Self {
        Self {
            input_height: 16,
            input_width: 64,
            first_conv_stride: 1,
            ..Self::teacher()
        }
    }

    /// Student geometry for a teacher: half the input extent, half the first stride.
    pub fn student_of(teacher: &Self) -> Result<Self> {
        if !teacher.first_conv_stride.is_multiple_of(2)
            || !teacher.input_height.is_multiple_of(2)
            || !teacher.input_width.is_multiple_of(2)
        {
            return Err(Error::Config(
                "teacher geometry cannot be halved for a student".into(),
            ));
        }
        let student = Self {
            input_height: teacher.input_height / 2,
            input_width: teacher.input_width / 2,
            first_conv_stride: teacher.first_conv_stride / 2,
            ..teacher.clone()
        };
        check_parity(teacher, &student)?;
        Ok(student)
    }

    /// Per-block strides; the last block keeps resolution and widens context.
    pub fn strides(&self) -> [usize; 4] {
        [self.first_conv_stride, 2, 2, 1]
    }

    pub fn block_channels(&self) -> [usize; 4] {
        [self.stem_channels[0], self.stem_channels[1], self.channels, self.channels]
    }

    /// Spatial extent `(h, w)` of the backbone output.
    pub fn feature_hw(&self) -> Result<(usize, usize)> {
        let mut hw = (self.input_height, self.input_width);
        for s in self.strides() {
            let step = |len: usize| -> Result<usize> {
                let padded = len + 2 * PAD;
                if s == 0 || padded < KERNEL {
                    return Err(Error::Dimension(format!(
                        "input {}x{} too small for the backbone",
                        self.input_height, self.input_width
                    )));
                }
                Ok((padded - KERNEL) / s + 1)
            };
            hw = (step(hw.0)?, step(hw.1)?);
        }
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.max_seq_len == 0
            || self.alphabet_size < 2
            || self.stem_channels.contains(&0)
        {
            return Err(Error::Config(format!("degenerate recognizer config {self:?}")));
        }
        self.feature_hw().map(|_| ())
    }
}

/// Fails unless both configs produce the same `C×h×w` features and the same heads.
pub fn check_parity(teacher: &RecognizerConfig, student: &RecognizerConfig) -> Result<()> {
    teacher.validate()?;
    student.validate()?;
    let (th, sh) = (teacher.feature_hw()?, student.feature_hw()?);
    if th != sh
        || teacher.channels != student.channels
        || teacher.max_seq_len != student.max_seq_len
        || teacher.alphabet_size != student.alphabet_size
        || teacher.stem_channels != student.stem_channels
    {
        return Err(Error::Config(format!(
            "teacher features {}x{}x{} vs student {}x{}x{} (T {} vs {}, |A| {} vs {})",
            teacher.channels,
            th.0,
            th.1,
            student.channels,
            sh.0,
            sh.1,
            teacher.max_seq_len,
            student.max_seq_len,
            teacher.alphabet_size,
            student.alphabet_size
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Index of each parameter in [`Recognizer::weights`].
pub mod param {
    pub const CONV1_W: usize = 0;
    pub const CONV1_B: usize = 1;
    pub const CONV2_W: usize = 2;
    pub const CONV2_B: usize = 3;
    pub const CONV3_W: usize = 4;
    pub const CONV3_B: usize = 5;
    pub const CONV4_W: usize = 6;
    pub const CONV4_B: usize = 7;
    pub const POS_EMBED: usize = 8;
    pub const KEY_W: usize = 9;
    pub const KEY_B: usize = 10;
    pub const VALUE_W: usize = 11;
    pub const VALUE_B: usize = 12;
    pub const QUERIES: usize = 13;
    pub const DECODER_W: usize = 14;
    pub const DECODER_B: usize = 15;

    pub const NAMES: [&str; 16] = [
        "conv1.weight",
        "conv1.bias",
        "conv2.weight",
        "conv2.bias",
        "conv3.weight",
        "conv3.bias",
        "conv4.weight",
        "conv4.bias",
        "pos_embed",
        "key.weight",
        "key.bias",
        "value.weight",
        "value.bias",
        "queries",
        "decoder.weight",
        "decoder.bias",
    ];
}

/// Plain-tensor view of one forward pass.
#[derive(Clone, Debug)]
pub struct RecognizerOutputs {
    /// `N×C×h×w`
    pub features: Tensor,
    /// `N×T×h×w`, each `(n, t)` map sums to one.
    pub attention: Tensor,
    /// `N×T×C`
    pub semantics: Tensor,
    /// `N×T×|A|`
    pub logits: Tensor,
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub features: Var,
    pub attention: Var,
    pub semantics: Var,
    pub logits: Var,
}

/// Parameters bound onto a tape, in [`param::NAMES`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn get(&self, index: usize) -> Var {
        self.0[index]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recognizer {
    config: RecognizerConfig,
    weights: Vec<NamedTensor>,
}

impl Recognizer {
    pub fn param_shapes(config: &RecognizerConfig) -> Result<Vec<Vec<usize>>> {
        config.validate()?;
        let [c1, c2, c, _] = config.block_channels();
        let (h, w) = config.feature_hw()?;
        let k = KERNEL;
        Ok(vec![
            vec![c1, 1, k, k],
            vec![c1],
            vec![c2, c1, k, k],
            vec![c2],
            vec![c, c2, k, k],
            vec![c],
            vec![c, c, k, k],
            vec![c],
            vec![h * w, c],
            vec![c, c],
            vec![c],
            vec![c, c],
            vec![c],
            vec![config.max_seq_len, c],
            vec![c, config.alphabet_size],
            vec![config.alphabet_size],
        ])
    }

    /// Randomly initialized recognizer; identical seeds give identical weights.
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self> {
        let shapes = Self::param_shapes(&config)?;
        let mut rng = SeededRng::new(seed);
        let weights = shapes
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let fan_in: usize = match i {
                    param::CONV1_W | param::CONV2_W | param::CONV3_W | param::CONV4_W => shape[1..].iter().product(),
                    param::KEY_W | param::VALUE_W | param::DECODER_W => shape[0],
                    _ => 0,
                };
                let tensor = match i {
                    param::POS_EMBED | param::QUERIES => {
                        Tensor::from_fn(shape, |_| (EMBED_INIT_STD * rng.gaussian()) as f32)
                    }
                    _ if fan_in > 0 => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        Tensor::from_fn(shape, |_| rng.uniform(-bound, bound) as f32)
                    }
                    _ => Tensor::zeros(shape),
                };
                NamedTensor {
                    name: param::NAMES[i].to_string(),
                    tensor,
                }
            })
            .collect();
        Ok(Self { config, weights })
    }

    /// Assembles a recognizer from named tensors, checking names and shapes.
    pub fn from_weights(config: RecognizerConfig, weights: Vec<NamedTensor>) -> Result<Self> {
        let shapes = Self::param_shapes(&config)?;
        if weights.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} weight tensors, got {}",
                shapes.len(),
                weights.len()
            )));
        }
        for (i, (w, shape)) in weights.iter().zip(&shapes).enumerate() {
            if w.name != param::NAMES[i] || w.tensor.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "weight {i}: expected {} {:?}, got {} {:?}",
                    param::NAMES[i],
                    shape,
                    w.name,
                    w.tensor.shape()
                )));
            }
        }
        Ok(Self { config, weights })
    }

    /// Copies this recognizer's weights under another (parity-checked) geometry.
    pub fn with_config(&self, config: RecognizerConfig) -> Result<Self> {
        Self::from_weights(config, self.weights.clone())
    }

    pub fn config(&self) -> &RecognizerConfig {
        &self.config
    }

    pub fn weights(&self) -> &[NamedTensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.tensor.numel()).sum()
    }

    /// Places every weight on `tape`; trainable weights receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.weights
                .iter()
                .map(|w| tape.leaf(w.tensor.clone().with_requires_grad(trainable)))
                .collect(),
        )
    }

    pub fn extract_features(&self, tape: &mut Tape, p: &ParamVars, images: Var) -> Result<Var> {
        let shape = tape.shape(images);
        if shape.len() != 4
            || shape[1] != 1
            || shape[2] != self.config.input_height
            || shape[3] != self.config.input_width
        {
            return Err(Error::Dimension(format!(
                "expected N×1×{}×{} images, got {:?}",
                self.config.input_height, self.config.input_width, shape
            )));
        }
        let strides = self.config.strides();
        let convs = [
            (param::CONV1_W, param::CONV1_B),
            (param::CONV2_W, param::CONV2_B),
            (param::CONV3_W, param::CONV3_B),
            (param::CONV4_W, param::CONV4_B),
        ];
        let mut x = images;
        for ((w, b), s) in convs.into_iter().zip(strides) {
            let y = tape.conv2d(x, p.get(w), Some(p.get(b)), s, PAD)?;
            x = tape.silu(y);
        }
        Ok(x)
    }

    /// Position-query attention over features. Returns `H[N×T×C]` and `M[N×T×S]`
    /// with `S = h·w`.
    pub fn attend_sequence(&self, tape: &mut Tape, p: &ParamVars, features: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!("features must be N×C×h×w, got {shape:?}")));
        }
        let (n, c, s) = (shape[0], shape[1], shape[2] * shape[3]);
        let t = self.config.max_seq_len;
        if c != self.config.channels || tape.shape(p.get(param::POS_EMBED)) != [s, c] {
            return Err(Error::Dimension(format!(
                "features {shape:?} do not match the attention parameters"
            )));
        }
        let perm = tape.permute(features, &[0, 2, 3, 1])?;
        let flat = tape.reshape(perm, &[n, s, c])?;

        let pos = tape.reshape(p.get(param::POS_EMBED), &[1, s, c])?;
        let pos = tape.expand(pos, &[n, s, c])?;
        let keyed = tape.add(flat, pos)?;
        let keys = self.linear(tape, p, keyed, param::KEY_W, param::KEY_B, n * s)?;
        let keys = tape.reshape(keys, &[n, s, c])?;
        let values = self.linear(tape, p, flat, param::VALUE_W, param::VALUE_B, n * s)?;
        let values = tape.reshape(values, &[n, s, c])?;

        let q = tape.reshape(p.get(param::QUERIES), &[1, t, c])?;
        let q = tape.expand(q, &[n, t, c])?;
        let kt = tape.transpose(keys)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (c as f32).sqrt());
        let attention = tape.softmax(scores, 2)?;
        let semantics = tape.matmul(attention, values)?;
        Ok((semantics, attention))
    }

    /// Linear head over the channel axis: `N×T×C → N×T×|A|`.
    pub fn decode_logits(&self, tape: &mut Tape, p: &ParamVars, semantics: Var) -> Result<Var> {
        let shape = tape.shape(semantics).to_vec();
        if shape.len() != 3 || shape[2] != self.config.channels {
            return Err(Error::Dimension(format!("semantics must be N×T×C, got {shape:?}")));
        }
        let (n, t) = (shape[0], shape[1]);
        let flat = tape.reshape(semantics, &[n * t, self.config.channels])?;
        let logits = self.linear(tape, p, flat, param::DECODER_W, param::DECODER_B, n * t)?;
        tape.reshape(logits, &[n, t, self.config.alphabet_size])
    }

    fn linear(&self, tape: &mut Tape, p: &ParamVars, x: Var, w: usize, b: usize, rows: usize) -> Result<Var> {
        let cols = *tape.shape(x).last().expect("rank >= 1");
        let x2 = tape.reshape(x, &[rows, cols])?;
        let y = tape.matmul(x2, p.get(w))?;
        let out = tape.shape(y)[1];
        let bias = tape.reshape(p.get(b), &[1, out])?;
        let bias = tape.expand(bias, &[rows, out])?;
        tape.add(y, bias)
    }

    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, images: Var) -> Result<OutputVars> {
        let features = self.extract_features(tape, p, images)?;
        let (semantics, attention) = self.attend_sequence(tape, p, features)?;
        let logits = self.decode_logits(tape, p, semantics)?;
        let (n, t) = (tape.shape(attention)[0], tape.shape(attention)[1]);
        let (h, w) = (tape.shape(features)[2], tape.shape(features)[3]);
        let attention = tape.reshape(attention, &[n, t, h, w])?;
        Ok(OutputVars {
            features,
            attention,
            semantics,
            logits,
        })
    }

    /// Forward pass without gradients.
    pub fn infer(&self, images: &Tensor) -> Result<RecognizerOutputs> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(RecognizerOutputs {
            features: tape.value(out.features).clone(),
            attention: tape.value(out.attention).clone(),
            semantics: tape.value(out.semantics).clone(),
            logits: tape.value(out.logits).clone(),
        })
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<String>> {
        Ok(greedy_decode(&self.infer(images)?.logits))
    }
}

/// Per-step argmax, read up to the first end marker.
pub fn greedy_decode(logits: &Tensor) -> Vec<String> {
    let shape = logits.shape();
    let (n, t, a) = (shape[0], shape[1], shape[2]);
    (0..n)
        .map(|i| {
            let steps: Vec<usize> = (0..t)
                .map(|s| {
                    let row = &logits.data()[(i * t + s) * a..(i * t + s + 1) * a];
                    argmax(row)
                })
                .collect();
            alphabet::decode(&steps)
        })
        .collect()
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Mean negative log-likelihood over label positions up to and including the
/// end marker; later positions are masked out.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[Vec<usize>]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, t, a) = (shape[0], shape[1], shape[2]);
    let mut target = vec![0.0f32; n * t * a];
    let mut count = 0usize;
    for (i, label) in labels.iter().enumerate() {
        if label.is_empty() {
            return Err(Error::Contract(format!("label {i} is empty")));
        }
        if label.len() > t {
            return Err(Error::Contract(format!(
                "label {i} has {} steps but only {t} slots",
                label.len()
            )));
        }
        for (s, &k) in label.iter().enumerate() {
            if k >= a {
                return Err(Error::Contract(format!(
                    "label index {k} out of range for alphabet size {a}"
                )));
            }
            target[(i * t + s) * a + k] = 1.0;
            count += 1;
        }
    }
    let target = tape.constant(Tensor::new(shape, target)?);
    let logp = tape.log_softmax(logits, 2)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / count as f32))
}
