//! Deterministic paired high/low-resolution text images.
//!
//! High-resolution images are 32×128, low-resolution ones 16×64. Each sample
//! draws its text, layout and degradation from a seed derived from the
//! dataset seed and the sample index, so generation order does not matter.

pub mod font;
pub mod image;
mod manifest;

use std::fmt;
use std::str::FromStr;

use crate::alphabet;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

pub use image::GrayImage;
pub use manifest::{
    format_records, generate_dataset, load_dataset, load_manifest, write_dataset, ManifestRecord, MANIFEST_FILE,
};

pub const HR_HEIGHT: usize = 32;
pub const HR_WIDTH: usize = 128;
pub const LR_HEIGHT: usize = 16;
pub const LR_WIDTH: usize = 64;
pub const DOWNSCALE: usize = 2;
pub const MAX_TEXT_LEN: usize = 10;

const MARGIN: usize = 4;
/// Horizontal origin jitter; kept below one feature column (8 pixels) so
/// character `t` stays near column `t`.
const MAX_X_JITTER: u64 = 1;
/// Glyph tops fall in `Y_BASE..=Y_BASE + MAX_Y_JITTER`, roughly centred.
const Y_BASE: usize = 6;
const MAX_Y_JITTER: u64 = 3;
const RENDER_STREAM: u64 = 1;
const DEGRADE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subset {
    Easy,
    Medium,
    Hard,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Easy, Subset::Medium, Subset::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Subset::Easy => "easy",
            Subset::Medium => "medium",
            Subset::Hard => "hard",
        }
    }

    /// Closed ranges for blur σ and noise std.
    pub fn severity(self) -> ((f64, f64), (f64, f64)) {
        match self {
            Subset::Easy => ((0.0, 0.5), (0.0, 0.02)),
            Subset::Medium => ((0.5, 1.2), (0.02, 0.05)),
            Subset::Hard => ((1.2, 2.0), (0.05, 0.1)),
        }
    }

    pub fn contains(self, spec: &DegradationSpec) -> bool {
        let ((b0, b1), (n0, n1)) = self.severity();
        (b0..=b1).contains(&spec.blur_sigma) && (n0..=n1).contains(&spec.noise_std)
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown subset {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DegradationSpec {
    /// Draws parameters uniformly inside the subset's severity band.
    pub fn sample(subset: Subset, rng: &mut SeededRng, seed: u64) -> Self {
        let ((b0, b1), (n0, n1)) = subset.severity();
        Self {
            blur_sigma: rng.uniform(b0, b1),
            noise_std: rng.uniform(n0, n1),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub hr: GrayImage,
    pub lr: GrayImage,
    pub text: String,
    pub subset: Subset,
    pub degradation: DegradationSpec,
    /// Per-sample seed everything else is derived from.
    pub seed: u64,
}

fn check_text(text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::Contract("cannot render empty text".into()));
    }
    let n = text.chars().count();
    if n > MAX_TEXT_LEN {
        return Err(Error::Contract(format!(
            "text {text:?} has {n} characters, at most {MAX_TEXT_LEN} fit"
        )));
    }
    let mut idx = alphabet::encode(text)?;
    idx.pop();
    Ok(idx)
}

/// Renders `text` left-aligned onto a 32×128 canvas at an 8-pixel pitch.
/// Background and ink levels, the origin and a per-glyph vertical jitter of
/// at most one pixel come from `seed`.
pub fn render_text(text: &str, seed: u64) -> Result<GrayImage> {
    let glyphs = check_text(text)?;
    let mut rng = SeededRng::new(seed);
    let pitch = font::GLYPH_WIDTH;
    let x0 = MARGIN + rng.below(MAX_X_JITTER + 1) as usize;
    let y0 = Y_BASE + rng.below(MAX_Y_JITTER + 1) as usize;
    let bg = image::quantize(rng.uniform(0.0, 0.35));
    let ink = image::quantize(rng.uniform(0.65, 1.0));

    let mut img = GrayImage::filled(HR_WIDTH, HR_HEIGHT, bg);
    for (i, &g) in glyphs.iter().enumerate() {
        let gx = x0 + i * pitch;
        let gy = y0 + rng.below(2) as usize;
        for y in 0..font::GLYPH_HEIGHT {
            for x in 0..font::GLYPH_WIDTH {
                if font::ink(g, x, y) {
                    img.data[(gy + y) * HR_WIDTH + gx + x] = ink;
                }
            }
        }
    }
    Ok(img)
}

/// Blur, ×½ bicubic downscale, noise, clamp.
pub fn degrade(hr: &GrayImage, spec: &DegradationSpec) -> GrayImage {
    image::degrade(hr, spec.blur_sigma, spec.noise_std, spec.seed)
}

/// Uniform text with length uniform in `1..=MAX_TEXT_LEN`.
pub fn random_text(rng: &mut SeededRng) -> String {
    let len = 1 + rng.below(MAX_TEXT_LEN as u64) as usize;
    (0..len)
        .map(|_| alphabet::char_of(rng.below(alphabet::NUM_CHARS as u64) as usize).unwrap())
        .collect()
}

/// Builds sample `index` of a dataset rooted at `seed`.
pub fn make_sample(seed: u64, index: u64, subset: Subset) -> SamplePair {
    let sample_seed = derive_seed(seed, index);
    let mut rng = SeededRng::new(sample_seed);
    let text = random_text(&mut rng);
    let degradation = DegradationSpec::sample(subset, &mut rng, derive_seed(sample_seed, DEGRADE_STREAM));
    let hr = render_text(&text, derive_seed(sample_seed, RENDER_STREAM)).expect("generated text is valid");
    let lr = degrade(&hr, &degradation);
    SamplePair {
        hr,
        lr,
        text,
        subset,
        degradation,
        seed: sample_seed,
    }
}

/// Seed used for the degradation noise of a sample with per-sample seed `s`.
pub fn degradation_seed(sample_seed: u64) -> u64 {
    derive_seed(sample_seed, DEGRADE_STREAM)
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier entry.
pub fn apportion(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = ratios.iter().sum();
    if ratios.is_empty() || ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || total <= 0.0 {
        return Err(Error::Contract(format!("invalid split ratios {ratios:?}")));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Generates `n` samples in memory. Sample `i` belongs to the subset whose
/// contiguous index block contains `i`.
pub fn generate_samples(n: usize, ratios: &[f64; 3], seed: u64) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::Contract("dataset size must be at least 1".into()));
    }
    let counts = apportion(n, ratios)?;
    let subsets: Vec<Subset> = Subset::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&s, &c)| std::iter::repeat_n(s, c))
        .collect();
    Ok(crate::par::map_indexed(n, |i| make_sample(seed, i as u64, subsets[i])))
}
