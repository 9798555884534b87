//! Word-accuracy evaluation and degradation sweeps.

use std::collections::BTreeMap;
use std::fmt;

use super::train::stack_images;
use crate::error::{Error, Result};
use crate::par;
use crate::recognizer::Recognizer;
use crate::rng::derive_seed;
use crate::synthdata::{self, DegradationSpec, GrayImage, SamplePair, Subset};

pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SubsetScore {
    pub correct: usize,
    pub count: usize,
}

impl SubsetScore {
    /// `correct / count`, or 0 for an empty subset.
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub easy: SubsetScore,
    pub medium: SubsetScore,
    pub hard: SubsetScore,
    pub params: usize,
}

impl EvalReport {
    pub fn subset(&self, s: Subset) -> &SubsetScore {
        match s {
            Subset::Easy => &self.easy,
            Subset::Medium => &self.medium,
            Subset::Hard => &self.hard,
        }
    }

    pub fn samples(&self) -> usize {
        self.easy.count + self.medium.count + self.hard.count
    }

    pub fn correct(&self) -> usize {
        self.easy.correct + self.medium.correct + self.hard.correct
    }

    /// Sample-weighted mean over subsets.
    pub fn average(&self) -> f64 {
        self.correct() as f64 / self.samples().max(1) as f64
    }

    /// Parses the `key=value` form written by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let int = |key: &str| -> Result<usize> {
            let (line, v) = map
                .get(key)
                .ok_or_else(|| Error::Parse { line: 0, message: format!("missing key {key}") })?;
            v.parse().map_err(|_| Error::Parse {
                line: *line,
                message: format!("invalid integer {v:?} for {key}"),
            })
        };
        let score = |s: &str| -> Result<SubsetScore> {
            Ok(SubsetScore {
                correct: int(&format!("{s}_correct"))?,
                count: int(&format!("{s}_count"))?,
            })
        };
        Ok(Self {
            easy: score("easy")?,
            medium: score("medium")?,
            hard: score("hard")?,
            params: int("params")?,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in Subset::ALL {
            let sc = self.subset(s);
            writeln!(f, "{s}_correct={}", sc.correct)?;
            writeln!(f, "{s}_count={}", sc.count)?;
            writeln!(f, "{s}_accuracy={:.6}", sc.accuracy())?;
        }
        writeln!(f, "average_accuracy={:.6}", self.average())?;
        writeln!(f, "samples={}", self.samples())?;
        writeln!(f, "params={}", self.params)
    }
}

/// Exact match after lowercasing.
pub fn word_match(prediction: &str, label: &str) -> bool {
    prediction.to_lowercase() == label.to_lowercase()
}

/// Predictions for `images`, batched.
pub fn predict_all(model: &Recognizer, images: &[&GrayImage]) -> Result<Vec<String>> {
    let chunks: Vec<&[&GrayImage]> = images.chunks(EVAL_BATCH).collect();
    let per_chunk = par::map_indexed(chunks.len(), |i| model.predict(&stack_images(chunks[i])?));
    let mut out = Vec::with_capacity(images.len());
    for c in per_chunk {
        out.extend(c?);
    }
    Ok(out)
}

/// Scores predictions against `(subset, label)` pairs.
pub fn score(predictions: &[String], truth: &[(Subset, &str)], params: usize) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut report = EvalReport {
        easy: SubsetScore::default(),
        medium: SubsetScore::default(),
        hard: SubsetScore::default(),
        params,
    };
    for (p, (subset, label)) in predictions.iter().zip(truth) {
        let s = match subset {
            Subset::Easy => &mut report.easy,
            Subset::Medium => &mut report.medium,
            Subset::Hard => &mut report.hard,
        };
        s.count += 1;
        s.correct += word_match(p, label) as usize;
    }
    Ok(report)
}

/// Evaluates on the images matching the model's input size: high-resolution
/// for a 32×128 model, low-resolution otherwise.
pub fn evaluate(model: &Recognizer, samples: &[SamplePair]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let cfg = model.config();
    let images: Vec<&GrayImage> = samples
        .iter()
        .map(|s| {
            if (s.hr.height, s.hr.width) == (cfg.input_height, cfg.input_width) {
                Ok(&s.hr)
            } else if (s.lr.height, s.lr.width) == (cfg.input_height, cfg.input_width) {
                Ok(&s.lr)
            } else {
                Err(Error::Dimension(format!(
                    "no {}×{} image in sample {:?}",
                    cfg.input_height, cfg.input_width, s.text
                )))
            }
        })
        .collect::<Result<_>>()?;
    let predictions = predict_all(model, &images)?;
    let truth: Vec<(Subset, &str)> = samples.iter().map(|s| (s.subset, s.text.as_str())).collect();
    score(&predictions, &truth, model.param_count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Blur,
    Noise,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Blur => "blur",
            SweepAxis::Noise => "noise",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub level: f64,
    pub accuracy: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,level,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6}\n", r.axis, r.level, r.accuracy));
    }
    out
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Contract(format!("{name} grid is empty")));
    }
    if grid.iter().any(|v| !v.is_finite() || *v < 0.0) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Contract(format!("{name} grid must be nonnegative and nondecreasing: {grid:?}")));
    }
    Ok(())
}

/// Accuracy at each blur level (no noise) and each noise level (no blur),
/// degrading the high-resolution images on the fly. Noise for sample `i`
/// uses `derive_seed(seed, i)`.
pub fn robustness_sweep(
    model: &Recognizer,
    samples: &[SamplePair],
    blur_grid: &[f64],
    noise_grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    check_grid("blur", blur_grid)?;
    check_grid("noise", noise_grid)?;
    if samples.is_empty() {
        return Err(Error::Contract("sweep split is empty".into()));
    }
    let truth: Vec<(Subset, &str)> = samples.iter().map(|s| (s.subset, s.text.as_str())).collect();
    let levels = blur_grid
        .iter()
        .map(|&b| (SweepAxis::Blur, b, b, 0.0))
        .chain(noise_grid.iter().map(|&n| (SweepAxis::Noise, n, 0.0, n)));
    let mut rows = Vec::new();
    for (axis, level, blur_sigma, noise_std) in levels {
        let degraded: Vec<GrayImage> = par::map_indexed(samples.len(), |i| {
            let spec = DegradationSpec {
                blur_sigma,
                noise_std,
                seed: derive_seed(seed, i as u64),
            };
            synthdata::degrade(&samples[i].hr, &spec)
        });
        let refs: Vec<&GrayImage> = degraded.iter().collect();
        let predictions = predict_all(model, &refs)?;
        let accuracy = score(&predictions, &truth, model.param_count())?.average();
        rows.push(SweepRow { axis, level, accuracy });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoring_arithmetic() {
        let preds: Vec<String> = ["abc", "x", "Q1", "zz", "hello"].iter().map(|s| s.to_string()).collect();
        let truth = [
            (Subset::Easy, "abc"),
            (Subset::Easy, "y"),
            (Subset::Easy, "q1"),
            (Subset::Easy, "zz"),
            (Subset::Hard, "hello"),
        ];
        let r = score(&preds, &truth, 10).unwrap();
        assert_eq!(r.easy.accuracy(), 0.75);
        assert_eq!(r.hard.accuracy(), 1.0);
        assert_eq!(r.medium.count, 0);
        assert_eq!(r.average(), 4.0 / 5.0);
        assert!(score(&[], &[], 0).is_err());
    }

    #[test]
    fn report_round_trips() {
        let r = EvalReport {
            easy: SubsetScore { correct: 3, count: 4 },
            medium: SubsetScore { correct: 0, count: 2 },
            hard: SubsetScore { correct: 1, count: 1 },
            params: 1234,
        };
        let text = r.to_string();
        assert!(text.contains("average_accuracy=0.571429"));
        assert_eq!(EvalReport::parse(&text).unwrap(), r);
        assert!(EvalReport::parse("easy_correct=x").is_err());
    }

    #[test]
    fn grids_are_validated() {
        assert!(check_grid("blur", &[]).is_err());
        assert!(check_grid("blur", &[1.0, 0.5]).is_err());
        assert!(check_grid("blur", &[0.0, 0.0, 2.0]).is_ok());
    }
}
