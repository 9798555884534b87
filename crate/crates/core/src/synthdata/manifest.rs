//! On-disk datasets: `hr/` and `lr/` PNG directories plus a tab-separated
//! manifest with one record per line:
//! `hr_path  lr_path  text  subset  blur_sigma  noise_std  seed`.
//! Paths are relative to the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{degradation_seed, generate_samples, DegradationSpec, GrayImage, SamplePair, Subset};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// Resolved against the manifest directory when loaded.
    pub hr_path: PathBuf,
    pub lr_path: PathBuf,
    pub text: String,
    pub subset: Subset,
    pub degradation: DegradationSpec,
    pub seed: u64,
}

impl ManifestRecord {
    pub fn load(&self) -> Result<SamplePair> {
        Ok(SamplePair {
            hr: GrayImage::load_png(&self.hr_path)?,
            lr: GrayImage::load_png(&self.lr_path)?,
            text: self.text.clone(),
            subset: self.subset,
            degradation: self.degradation,
            seed: self.seed,
        })
    }
}

fn manifest_line(index: usize, s: &SamplePair) -> String {
    format!(
        "hr/{index:06}.png\tlr/{index:06}.png\t{}\t{}\t{}\t{}\t{}\n",
        s.text, s.subset, s.degradation.blur_sigma, s.degradation.noise_std, s.seed
    )
}

/// Writes images and the manifest under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, samples: &[SamplePair]) -> Result<PathBuf> {
    for sub in ["hr", "lr"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let results = crate::par::map_indexed(samples.len(), |i| -> Result<()> {
        samples[i].hr.save_png(&dir.join(format!("hr/{i:06}.png")))?;
        samples[i].lr.save_png(&dir.join(format!("lr/{i:06}.png")))
    });
    results.into_iter().collect::<Result<()>>()?;
    let mut text = String::new();
    for (i, s) in samples.iter().enumerate() {
        text.push_str(&manifest_line(i, s));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

/// Generates `n` samples split by `ratios` over (easy, medium, hard) and
/// writes them under `dir`. Returns the manifest path.
pub fn generate_dataset(dir: &Path, n: usize, ratios: &[f64; 3], seed: u64) -> Result<PathBuf> {
    let samples = generate_samples(n, ratios, seed)?;
    write_dataset(dir, &samples)
}

fn parse_line(line: &str, lineno: usize, base: &Path) -> Result<ManifestRecord> {
    let err = |message: String| Error::Parse { line: lineno, message };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(err(format!("expected 7 tab-separated fields, found {}", fields.len())));
    }
    let float = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| err(format!("invalid {what} {s:?}")))
    };
    let text = fields[2].to_string();
    if text.is_empty() || super::check_text(&text).is_err() {
        return Err(err(format!("invalid text {text:?}")));
    }
    let subset: Subset = fields[3].parse().map_err(|_| err(format!("unknown subset {:?}", fields[3])))?;
    let seed: u64 = fields[6].parse().map_err(|_| err(format!("invalid seed {:?}", fields[6])))?;
    Ok(ManifestRecord {
        hr_path: base.join(fields[0]),
        lr_path: base.join(fields[1]),
        text,
        subset,
        degradation: DegradationSpec {
            blur_sigma: float(fields[4], "blur sigma")?,
            noise_std: float(fields[5], "noise std")?,
            seed: degradation_seed(seed),
        },
        seed,
    })
}

/// Parses a manifest and checks that every referenced image exists.
/// Accepts either the manifest file or the directory containing it.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let content = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec = parse_line(line, i + 1, base)?;
        for p in [&rec.hr_path, &rec.lr_path] {
            if !p.is_file() {
                return Err(Error::io(
                    format!("record {} ({:?}) at line {}: missing image {}", records.len(), rec.text, i + 1, p.display()),
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

/// Loads every record's images.
pub fn load_dataset(path: &Path) -> Result<Vec<SamplePair>> {
    let records = load_manifest(path)?;
    crate::par::map_indexed(records.len(), |i| records[i].load())
        .into_iter()
        .collect()
}

/// Formats records back into manifest text; used to compare manifests.
pub fn format_records(records: &[ManifestRecord], base: &Path) -> String {
    let mut out = String::new();
    for r in records {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            rel(&r.hr_path),
            rel(&r.lr_path),
            r.text,
            r.subset,
            r.degradation.blur_sigma,
            r.degradation.noise_std,
            r.seed
        );
    }
    out
}
