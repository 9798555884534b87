//! Grayscale images and the degradation chain: Gaussian blur, bicubic ×½
//! downscale, additive Gaussian noise. Pixel values are kept on the 8-bit grid
//! so PNG round trips are exact.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major values in `[0, 1]`.
    pub data: Vec<f32>,
}

pub fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let img_err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(img_err)?;
        writer.write_image_data(&self.to_u8()).map_err(img_err)?;
        writer.finish().map_err(img_err)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img_err = |message: String| Error::Image {
            path: path.to_path_buf(),
            message,
        };
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(img_err(format!(
                "expected 8-bit grayscale, found {:?} {:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        Ok(Self::from_u8(w, h, &buf[..w * h]))
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with edge clamping; `σ = 0` is the identity.
/// The result is not quantized.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * img.clamped(x as isize + k as isize - r, y as isize) as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += t * tmp[yy * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    GrayImage {
        width: w,
        height: h,
        data: out,
    }
}

/// Keys cubic convolution kernel with `a = −0.5`.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic ×½ downscale sampling at pixel-centre-aligned source positions,
/// edge clamped. The result is not quantized.
pub fn bicubic_half(img: &GrayImage) -> GrayImage {
    let (ow, oh) = (img.width / 2, img.height / 2);
    // output pixel i samples source coordinate 2i + 0.5
    let taps: Vec<(isize, f64)> = (-1..=2).map(|o| (o, cubic(o as f64 - 0.5))).collect();
    let mut tmp = vec![0.0f64; ow * img.height];
    for y in 0..img.height {
        for ox in 0..ow {
            tmp[y * ow + ox] = taps
                .iter()
                .map(|&(o, t)| t * img.clamped(2 * ox as isize + o, y as isize) as f64)
                .sum();
        }
    }
    let mut out = vec![0.0f32; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let v: f64 = taps
                .iter()
                .map(|&(o, t)| {
                    let y = (2 * oy as isize + o).clamp(0, img.height as isize - 1) as usize;
                    t * tmp[y * ow + ox]
                })
                .sum();
            out[oy * ow + ox] = v as f32;
        }
    }
    GrayImage {
        width: ow,
        height: oh,
        data: out,
    }
}

/// Blur, downscale by two, add noise, clamp and quantize.
pub fn degrade(hr: &GrayImage, blur_sigma: f64, noise_std: f64, seed: u64) -> GrayImage {
    let blurred = gaussian_blur(hr, blur_sigma);
    let mut lr = bicubic_half(&blurred);
    let mut rng = SeededRng::new(seed);
    for v in lr.data.iter_mut() {
        let noisy = if noise_std > 0.0 {
            *v as f64 + noise_std * rng.gaussian()
        } else {
            *v as f64
        };
        *v = quantize(noisy);
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern() -> GrayImage {
        GrayImage {
            width: 8,
            height: 4,
            data: (0..32).map(|i| quantize(((i * 7) % 13) as f64 / 12.0)).collect(),
        }
    }

    #[test]
    fn kernel_normalizes() {
        for s in [0.3, 1.0, 2.0] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len() % 2, 1);
        }
    }

    #[test]
    fn cubic_weights_at_half_offsets() {
        assert!((cubic(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn downscale_of_constant_is_constant() {
        let img = GrayImage::filled(8, 4, 0.4);
        let lr = bicubic_half(&img);
        assert_eq!((lr.width, lr.height), (4, 2));
        assert!(lr.data.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn zero_degradation_is_plain_downscale() {
        let img = pattern();
        let lr = degrade(&img, 0.0, 0.0, 1);
        let plain = bicubic_half(&img);
        for (a, b) in lr.data.iter().zip(&plain.data) {
            assert_eq!(*a, quantize(*b as f64));
        }
    }

    #[test]
    fn noise_is_seeded() {
        let img = pattern();
        assert_eq!(degrade(&img, 0.7, 0.05, 3), degrade(&img, 0.7, 0.05, 3));
        assert_ne!(degrade(&img, 0.7, 0.05, 3), degrade(&img, 0.7, 0.05, 4));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = pattern();
        img.save_png(&path).unwrap();
        assert_eq!(GrayImage::load_png(&path).unwrap(), img);
    }
}
