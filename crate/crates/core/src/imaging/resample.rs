use super::Image;
use crate::error::{Error, Result};

/// Keys cubic convolution kernel with free parameter `a`.
#[inline]
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source indices and normalized weights for one output sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// The degradation operator shared by pair synthesis, back-projection and
/// LR PSNR: separable cubic resampling on a center-aligned grid, with the
/// kernel stretched by the scale factor when downsampling and out-of-range
/// taps clamped to the border.
#[derive(Debug, PartialEq)]
pub struct Degradation {
    pub a: f64,
}

static CANONICAL: Degradation = Degradation { a: -0.5 };

/// The single canonical operator. Callers compare against it by address.
pub fn degradation() -> &'static Degradation {
    &CANONICAL
}

impl Degradation {
    pub fn taps(&self, in_len: usize, out_len: usize) -> Vec<Taps> {
        let scale = in_len as f64 / out_len as f64;
        let stretch = scale.max(1.0);
        let support = 2.0 * stretch;
        (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale - 0.5;
                let lo = (center - support).ceil() as i64;
                let hi = (center + support).floor() as i64;
                let mut indices = Vec::new();
                let mut weights = Vec::new();
                for k in lo..=hi {
                    let w = cubic_kernel((center - k as f64) / stretch, self.a);
                    if w == 0.0 {
                        continue;
                    }
                    indices.push(k.clamp(0, in_len as i64 - 1) as usize);
                    weights.push(w);
                }
                let total: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= total);
                Taps { indices, weights }
            })
            .collect()
    }

    pub fn resize(&self, image: &Image, out_h: usize, out_w: usize) -> Image {
        assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
        let (h, w) = image.dims();
        let tx = self.taps(w, out_w);
        let ty = self.taps(h, out_h);
        let mut out = Image::zeros(out_h, out_w);
        let mut rows = vec![0.0f64; h * out_w];
        for c in 0..3 {
            let src = image.plane(c);
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for (x, t) in tx.iter().enumerate() {
                    let mut acc = 0.0;
                    for (&k, &wt) in t.indices.iter().zip(&t.weights) {
                        acc += wt * row[k] as f64;
                    }
                    rows[y * out_w + x] = acc;
                }
            }
            let dst = out.plane_mut(c);
            for (y, t) in ty.iter().enumerate() {
                for x in 0..out_w {
                    let mut acc = 0.0;
                    for (&k, &wt) in t.indices.iter().zip(&t.weights) {
                        acc += wt * rows[k * out_w + x];
                    }
                    dst[y * out_w + x] = acc as f32;
                }
            }
        }
        out
    }

    pub fn downsample(&self, hr: &Image, s: usize) -> Result<Image> {
        let (h, w) = hr.dims();
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!("degrade: {h}x{w} is not divisible by scale {s}")));
        }
        Ok(self.resize(hr, h / s, w / s))
    }

    pub fn upsample(&self, lr: &Image, s: usize) -> Image {
        let (h, w) = lr.dims();
        self.resize(lr, h * s, w * s)
    }
}

pub fn resample_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    degradation().taps(in_len, out_len)
}

/// Cubic resize with Catmull-Rom coefficient `a = -0.5`, antialiased when
/// shrinking.
pub fn bicubic_resize(image: &Image, out_h: usize, out_w: usize) -> Image {
    degradation().resize(image, out_h, out_w)
}

pub fn bicubic_upsample(lr: &Image, s: usize) -> Image {
    degradation().upsample(lr, s)
}

/// Canonical `×1/s` degradation.
pub fn degrade(hr: &Image, s: usize) -> Result<Image> {
    degradation().downsample(hr, s)
}
