//! PSNR, LR PSNR, the random-feature perceptual distance and the diversity
//! score.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{degradation, Degradation, Image, NamedImage};
use crate::numerics::{kernels, Real, Tensor};
use crate::rng::SeedStream;
use crate::vspm::{super_resolve_with, SampleOptions, VSpMModel};

/// Reported for identical images instead of an infinite value.
pub const PSNR_CAP: f64 = 99.0;

/// Seed of the random feature extractor. Changing it changes every
/// distance this crate reports.
pub const RFD_SEED: u64 = 0x5256_4644_2021_0001;
pub const RFD_WIDTHS: [usize; 3] = [16, 32, 64];

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b, "psnr")?;
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR between `degrade(sr)` and the LR input.
pub fn lr_psnr(sr: &Image, y: &Image, s: usize) -> Result<f64> {
    let (h, w) = y.dims();
    if sr.dims() != (h * s, w * s) {
        return Err(Error::shape(format!(
            "lr_psnr: SR image is {:?}, expected {:?}",
            sr.dims(),
            (h * s, w * s)
        )));
    }
    psnr(&degradation().downsample(sr, s)?, y)
}

/// Fails unless `op` is the canonical operator itself (not merely an
/// equal value).
pub fn assert_canonical_degradation(op: &Degradation) -> Result<()> {
    if std::ptr::eq(op, degradation()) {
        Ok(())
    } else {
        Err(Error::Config(
            "evaluation must use the same degradation operator as pair synthesis".into(),
        ))
    }
}

/// Per-pixel distance at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DistanceMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "distance map of {height}×{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("distance map values must be non-negative".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        crate::imaging::save_gray16_png(&self.values, self.height, self.width, max, path)
    }
}

fn mean(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in v {
        acc += x;
    }
    acc / v.len() as f64
}

/// Untrained convolutional pyramid used as a perceptual stand-in.
#[derive(Clone, Debug)]
pub struct RfdExtractor {
    stages: Vec<(Tensor<f64>, Tensor<f64>)>,
}

/// Box-Muller normals from the raw 64-bit output of a seeded stream.
fn normals(rng: &mut impl RngCore, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let u2 = ((rng.next_u64() >> 11) as f64) / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        out.push(r * t.cos());
        out.push(r * t.sin());
    }
    out.truncate(n);
    out
}

impl RfdExtractor {
    pub fn new(seed: u64) -> Self {
        let seeds = SeedStream::new(seed);
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &co) in RFD_WIDTHS.iter().enumerate() {
            let mut rng = seeds.stream("rfd", i as u64);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let k: Vec<f64> = normals(&mut rng, co * cin * 9).into_iter().map(|v| v * std).collect();
            let b: Vec<f64> = normals(&mut rng, co).into_iter().map(|v| 0.1 * v).collect();
            stages.push((
                Tensor::new(&[co, cin, 3, 3], k).expect("rfd kernel"),
                Tensor::new(&[co], b).expect("rfd bias"),
            ));
            cin = co;
        }
        Self { stages }
    }

    /// The published extractor.
    pub fn standard() -> &'static RfdExtractor {
        static EXTRACTOR: OnceLock<RfdExtractor> = OnceLock::new();
        EXTRACTOR.get_or_init(|| RfdExtractor::new(RFD_SEED))
    }

    /// Unit-normalized features of every stage, `[1, C, h, w]`.
    pub fn features(&self, img: &Image) -> Result<Vec<Tensor<f64>>> {
        let (h, w) = img.dims();
        let data = img.data().iter().map(|&v| 2.0 * v as f64 - 1.0).collect();
        let mut x = Tensor::new(&[1, 3, h, w], data)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, (k, b)) in self.stages.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let y = kernels::conv2d(&x, k, Some(b), stride, 1)?.map(|v| v.max(0.0));
            out.push(unit_normalize(&y));
            x = y;
        }
        Ok(out)
    }

    pub fn distance_map(&self, a: &Image, b: &Image) -> Result<DistanceMap> {
        a.same_dims(b, "proxy_perceptual")?;
        let (h, w) = a.dims();
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total = vec![0.0; h * w];
        for (ta, tb) in fa.iter().zip(&fb) {
            let (_, c, sh, sw) = ta.nchw("rfd")?;
            let mut d = vec![0.0; sh * sw];
            for ch in 0..c {
                let base = ch * sh * sw;
                for (p, dv) in d.iter_mut().enumerate() {
                    let diff = ta.data()[base + p] - tb.data()[base + p];
                    *dv += diff * diff;
                }
            }
            d.iter_mut().for_each(|v| *v /= c as f64);
            let up = bilinear(&d, sh, sw, h, w);
            for (t, u) in total.iter_mut().zip(up) {
                *t += u;
            }
        }
        let n = fa.len() as f64;
        total.iter_mut().for_each(|v| *v /= n);
        DistanceMap::new(h, w, total)
    }
}

fn unit_normalize(t: &Tensor<f64>) -> Tensor<f64> {
    let (_, c, h, w) = t.nchw("rfd").expect("layout");
    let hw = h * w;
    let mut out = t.clone();
    let d = out.data_mut();
    for p in 0..hw {
        let mut n = 0.0;
        for ch in 0..c {
            n += d[ch * hw + p] * d[ch * hw + p];
        }
        let inv = 1.0 / (n.sqrt() + 1e-10);
        for ch in 0..c {
            d[ch * hw + p] *= inv;
        }
    }
    out
}

/// Center-aligned bilinear resize with clamped borders.
fn bilinear(src: &[f64], sh: usize, sw: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, out: usize, inp: usize| {
        let c = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, sh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Random-feature distance map using the standard extractor.
pub fn proxy_perceptual(a: &Image, b: &Image) -> Result<DistanceMap> {
    RfdExtractor::standard().distance_map(a, b)
}

/// Gap between the best single map and the per-pixel best composite, as a
/// percentage of the former.
pub fn diversity_from_maps(maps: &[DistanceMap]) -> Result<f64> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Domain("diversity score needs at least one sample".into()))?;
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(Error::shape("distance maps differ in size"));
        }
    }
    let global = maps.iter().map(DistanceMap::mean).fold(f64::INFINITY, f64::min);
    let mut best = first.values.clone();
    for m in &maps[1..] {
        for (b, &v) in best.iter_mut().zip(&m.values) {
            *b = b.min(v);
        }
    }
    let local = mean(&best);
    if global <= 0.0 || local >= global {
        return Ok(0.0);
    }
    Ok(100.0 * (global - local) / global)
}

pub fn diversity_score(samples: &[Image], reference: &Image) -> Result<f64> {
    let maps = samples
        .iter()
        .map(|s| proxy_perceptual(s, reference))
        .collect::<Result<Vec<_>>>()?;
    diversity_from_maps(&maps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    /// Mean random-feature distance of the samples to the HR image.
    pub rfd: f64,
    pub lr_psnr: f64,
    pub lr_psnr_min: f64,
    pub div: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rfd: f64,
    pub lr_psnr: f64,
    pub div: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub seed: u64,
    pub images: Vec<ImageRow>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    fn from_rows(n_samples: usize, seed: u64, images: Vec<ImageRow>) -> Self {
        let col = |f: fn(&ImageRow) -> f64| mean(&images.iter().map(f).collect::<Vec<_>>());
        let aggregate = Aggregate {
            rfd: col(|r| r.rfd),
            lr_psnr: col(|r| r.lr_psnr),
            div: col(|r| r.div),
        };
        Self {
            n_samples,
            seed,
            images,
            aggregate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Three-column summary line.
    pub fn summary(&self) -> String {
        format!(
            "RFD(proxy LPIPS)↓ {:.5}   LR PSNR↑ {:.3} dB   Div↑ {:.3}   ({} images, {} samples)",
            self.aggregate.rfd,
            self.aggregate.lr_psnr,
            self.aggregate.div,
            self.images.len(),
            self.n_samples
        )
    }
}

/// Per-image seed of an evaluation run.
pub fn eval_seed(seed: u64, index: usize) -> u64 {
    SeedStream::new(seed).stream("eval", index as u64).next_u64()
}

/// Largest top-left crop whose sides are multiples of `s`.
pub fn crop_to_scale(img: &Image, s: usize) -> Result<Image> {
    let (h, w) = img.dims();
    let (ch, cw) = (h / s * s, w / s * s);
    if ch == 0 || cw == 0 {
        return Err(Error::Data(format!("image {h}×{w} is smaller than the scale {s}")));
    }
    img.crop(0, 0, ch, cw)
}

/// Evaluation settings shared by every image.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub sampling: SampleOptions,
    /// Directory for 16-bit distance-map heat maps.
    pub map_dir: Option<PathBuf>,
    /// Worker threads; images are distributed round-robin and merged by
    /// index, so the report does not depend on this.
    pub threads: usize,
}

fn evaluate_image<T: Real>(
    model: &VSpMModel<T>,
    index: usize,
    named: &NamedImage,
    n: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<ImageRow> {
    let s = model.config().scale;
    let hr = crop_to_scale(&named.image, s)?;
    let y = degradation().downsample(&hr, s)?;
    let set = super_resolve_with(model, &y, n, eval_seed(seed, index), &opts.sampling)?;
    let maps = set
        .samples
        .iter()
        .map(|x| proxy_perceptual(x, &hr))
        .collect::<Result<Vec<_>>>()?;
    let psnrs = set
        .samples
        .iter()
        .map(|x| lr_psnr(x, &y, s))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &opts.map_dir {
        for (k, m) in maps.iter().enumerate() {
            m.save_png(map_path(dir, &named.id, k))?;
        }
    }
    Ok(ImageRow {
        id: named.id.clone(),
        rfd: mean(&maps.iter().map(DistanceMap::mean).collect::<Vec<_>>()),
        lr_psnr: mean(&psnrs),
        lr_psnr_min: psnrs.iter().cloned().fold(f64::INFINITY, f64::min),
        div: if n >= 2 { diversity_from_maps(&maps)? } else { 0.0 },
    })
}

/// Degrades each HR image, draws `n` samples and scores them.
pub fn evaluate<T: Real>(model: &VSpMModel<T>, images: &[NamedImage], n: usize, seed: u64, opts: &EvalOptions) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    if images.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if n == 1 {
        log::warn!("diversity is undefined for a single sample; reporting 0");
    }
    let threads = opts.threads.clamp(1, images.len());
    let mut rows: Vec<Option<Result<ImageRow>>> = (0..images.len()).map(|_| None).collect();
    if threads == 1 {
        for (i, named) in images.iter().enumerate() {
            rows[i] = Some(evaluate_image(model, i, named, n, seed, opts));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    scope.spawn(move || {
                        (t..images.len())
                            .step_by(threads)
                            .map(|i| (i, evaluate_image(model, i, &images[i], n, seed, opts)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("evaluation worker panicked") {
                    rows[i] = Some(r);
                }
            }
        });
    }
    let rows = rows
        .into_iter()
        .map(|r| r.expect("every image evaluated"))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(n, seed, rows))
}

fn map_path(dir: &Path, id: &str, k: usize) -> PathBuf {
    dir.join(format!("{id}-rfd{k:03}.png"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synth::natural_image;

    #[test]
    fn psnr_cases() {
        let a = natural_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, 0.25);
        let c = Image::filled(4, 4, 0.375);
        // 0.125² = 1/64 exactly
        assert!((psnr(&b, &c).unwrap() - 10.0 * 64f64.log10()).abs() < 1e-12);
        let d = a.map(|v| v + 0.1);
        assert!((psnr(&a, &d).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&a, &d).unwrap(), psnr(&d, &a).unwrap());
        assert!(psnr(&a, &Image::zeros(4, 8)).is_err());
    }

    #[test]
    fn hand_diversity_example() {
        let a = DistanceMap::new(2, 2, vec![1.0, 3.0, 2.0, 2.0]).unwrap();
        let b = DistanceMap::new(2, 2, vec![2.0, 1.0, 3.0, 1.0]).unwrap();
        let d = diversity_from_maps(&[a, b]).unwrap();
        assert!((d - 100.0 * 0.5 / 1.75).abs() < 1e-12, "{d}");
    }

    #[test]
    fn identical_and_duplicate_samples() {
        let a = DistanceMap::new(1, 3, vec![0.5, 0.2, 0.9]).unwrap();
        let b = DistanceMap::new(1, 3, vec![0.1, 0.6, 0.3]).unwrap();
        assert_eq!(diversity_from_maps(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        let base = diversity_from_maps(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(diversity_from_maps(&[a.clone(), b.clone(), b.clone()]).unwrap(), base);
        assert_eq!(diversity_from_maps(&[b, a]).unwrap(), base);
        assert!(diversity_from_maps(&[]).is_err());
    }

    #[test]
    fn rfd_of_identical_images_is_zero() {
        let a = natural_image(16, 16, 3);
        let m = proxy_perceptual(&a, &a).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rfd_extractor_is_reproducible() {
        let a = natural_image(16, 16, 3);
        let b = natural_image(16, 16, 4);
        let m1 = RfdExtractor::new(RFD_SEED).distance_map(&a, &b).unwrap();
        let m2 = proxy_perceptual(&a, &b).unwrap();
        assert_eq!(m1, m2);
        assert!(m1.mean() > 0.0);
    }

    #[test]
    fn pointer_identity_of_degradation() {
        assert!(assert_canonical_degradation(degradation()).is_ok());
        let copy = Degradation { a: -0.5 };
        assert!(assert_canonical_degradation(&copy).is_err());
    }

    #[test]
    fn bilinear_preserves_constants() {
        let up = bilinear(&[2.0; 6], 2, 3, 8, 12);
        assert!(up.iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }
}
