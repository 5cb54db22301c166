use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{nchw_to_pixel_major, tiles_to_basis};
use super::{cem_project, BasisSet, BranchOutputs, CoeffDistribution, DeterministicPath, VSpMModel};
use crate::error::{Error, Result};
use crate::imaging::{bicubic_upsample, load_png, Image};
use crate::numerics::{kernels, Graph, Real, Tensor, Var};
use crate::rng::SeedStream;

/// ε for the reparameterized draw `ω = μ + σ ⊙ ε`.
pub fn sample_coeffs<T: Real, R: Rng + ?Sized>(dist: &CoeffDistribution<T>, rng: &mut R) -> Tensor<T> {
    let mut out = dist.mu.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(dist.sigma.data()) {
        let eps: f64 = rng.sample(StandardNormal);
        *o += s * T::lit(eps);
    }
    out
}

/// Residual of one channel at HR resolution, shape `[s·H, s·W]`.
pub fn assemble_residual<T: Real>(z: &BasisSet<T>, omega: &Tensor<T>, lr_height: usize, lr_width: usize) -> Result<Tensor<T>> {
    let (zs, c) = match z.z.shape() {
        &[a, b] => (a, b),
        other => return Err(Error::shape(format!("basis must be 2-D, got {other:?}"))),
    };
    let s = (zs as f64).sqrt().round() as usize;
    if s * s != zs {
        return Err(Error::shape(format!("basis has {zs} rows, not a square tile")));
    }
    if omega.shape() != [lr_height * lr_width, c] {
        return Err(Error::shape(format!(
            "coefficients {:?} do not match {lr_height}×{lr_width} pixels of {c} atoms",
            omega.shape()
        )));
    }
    let (hh, ww) = (lr_height * s, lr_width * s);
    let mut e = vec![T::zero(); hh * ww];
    let zd = z.z.data();
    let od = omega.data();
    for y in 0..lr_height {
        for x in 0..lr_width {
            let w_i = &od[(y * lr_width + x) * c..][..c];
            for p in 0..zs {
                let mut acc = T::zero();
                for (j, &wj) in w_i.iter().enumerate() {
                    acc += zd[p * c + j] * wj;
                }
                e[(y * s + p / s) * ww + x * s + p % s] = acc;
            }
        }
    }
    Tensor::new(&[hh, ww], e)
}

/// Deterministic low-frequency estimate `m` for LR input `y`.
pub fn deterministic_path(mode: &DeterministicPath, y: &Image, s: usize) -> Result<Image> {
    let (h, w) = y.dims();
    match mode {
        DeterministicPath::Bicubic => Ok(bicubic_upsample(y, s)),
        DeterministicPath::None => Ok(Image::zeros(h * s, w * s)),
        DeterministicPath::External(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "external deterministic estimate {} does not exist",
                    path.display()
                )));
            }
            let m = load_png(path).map_err(|e| Error::Config(e.to_string()))?;
            if m.dims() != (h * s, w * s) {
                return Err(Error::Config(format!(
                    "external estimate {} is {:?}, expected {:?}",
                    path.display(),
                    m.dims(),
                    (h * s, w * s)
                )));
            }
            Ok(m)
        }
    }
}

/// Residual `e` on the graph from branch outputs. `eps` (shape of μ)
/// drives the coefficient draw and `delta` (shape of the tiles) the
/// optional basis perturbation; `None` uses the mean.
pub fn residual_on_graph<T: Real>(g: &mut Graph<T>, out: &BranchOutputs, eps: Option<Var>, delta: Option<Var>) -> Result<Var> {
    let tiles = match (out.noise_scale, delta) {
        (Some(scale), Some(d)) => {
            let scaled = g.scale(d, scale)?;
            g.add(out.tiles, scaled)?
        }
        _ => out.tiles,
    };
    let omega = match eps {
        Some(eps) => {
            let noise = g.mul(out.sigma, eps)?;
            g.add(out.mu, noise)?
        }
        None => out.mu,
    };
    g.tile_combine(tiles, omega)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleOptions {
    /// Overrides the configured number of back-projection iterations.
    pub cem_iters: Option<usize>,
    /// Forces `ω = 0`, so every sample is `cem_project(m, y)`.
    pub zero_coefficients: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SRSampleSet {
    pub m: Image,
    pub samples: Vec<Image>,
    pub seed: u64,
    /// Counter of the `"sample"` stream behind each entry of `samples`.
    pub sample_counters: Vec<u64>,
}

pub fn super_resolve<T: Real>(model: &VSpMModel<T>, y: &Image, n: usize, seed: u64) -> Result<SRSampleSet> {
    super_resolve_with(model, y, n, seed, &SampleOptions::default())
}

pub fn super_resolve_with<T: Real>(
    model: &VSpMModel<T>,
    y: &Image,
    n: usize,
    seed: u64,
    opts: &SampleOptions,
) -> Result<SRSampleSet> {
    let counters: Vec<u64> = (0..n as u64).collect();
    super_resolve_counters(model, y, &counters, seed, opts)
}

/// Samples for explicit stream counters; entry `k` depends only on
/// `(seed, counters[k])`.
pub fn super_resolve_counters<T: Real>(
    model: &VSpMModel<T>,
    y: &Image,
    counters: &[u64],
    seed: u64,
    opts: &SampleOptions,
) -> Result<SRSampleSet> {
    let cfg = model.config();
    let s = cfg.scale;
    let (h, w) = y.dims();
    let m = deterministic_path(&cfg.deterministic_path, y, s)?;
    let iters = opts.cem_iters.unwrap_or(cfg.cem_iters);

    // the three colour channels form one batch through shared weights
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let input: Vec<T> = y.data().iter().map(|&v| T::lit(v as f64)).collect();
    let yv = g.constant(Tensor::new(&[3, 1, h, w], input)?);
    let out = model.forward(&mut g, &vars, yv)?;
    let tiles = g.value(out.tiles).clone();
    let mu = g.value(out.mu).clone();
    let sigma = g.value(out.sigma).clone();
    let noise_scale = out.noise_scale.map(|v| g.value(v).item());

    let seeds = SeedStream::new(seed);
    let mut samples = Vec::with_capacity(counters.len());
    for &k in counters {
        let mut rng = seeds.stream("sample", k);
        let mut z = tiles.clone();
        if let Some(ns) = noise_scale {
            for v in z.data_mut() {
                let d: f64 = rng.sample(StandardNormal);
                *v += ns * T::lit(d);
            }
        }
        let omega = if opts.zero_coefficients {
            Tensor::zeros(mu.shape())
        } else if cfg.stochastic_omega {
            let mut o = mu.clone();
            for (ov, &sv) in o.data_mut().iter_mut().zip(sigma.data()) {
                let eps: f64 = rng.sample(StandardNormal);
                *ov += sv * T::lit(eps);
            }
            o
        } else {
            mu.clone()
        };
        let e = kernels::tile_combine(&z, &omega)?;
        let mut sr = m.clone();
        for (o, &ev) in sr.data_mut().iter_mut().zip(e.data()) {
            *o += ev.as_f32();
        }
        samples.push(cem_project(&sr, y, s, iters)?);
    }
    Ok(SRSampleSet {
        m,
        samples,
        seed,
        sample_counters: counters.to_vec(),
    })
}

/// Basis and coefficient distribution of every colour channel.
pub fn channel_branches<T: Real>(model: &VSpMModel<T>, y: &Image) -> Result<Vec<(BasisSet<T>, CoeffDistribution<T>)>> {
    let (h, w) = y.dims();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let input: Vec<T> = y.data().iter().map(|&v| T::lit(v as f64)).collect();
    let yv = g.constant(Tensor::new(&[3, 1, h, w], input)?);
    let out = model.forward(&mut g, &vars, yv)?;
    Ok((0..3)
        .map(|c| {
            (
                tiles_to_basis(g.value(out.tiles), c),
                CoeffDistribution {
                    mu: nchw_to_pixel_major(g.value(out.mu), c),
                    sigma: nchw_to_pixel_major(g.value(out.sigma), c),
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synth::natural_image;
    use crate::vspm::VSpMConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(stochastic_omega: bool) -> VSpMConfig {
        VSpMConfig {
            scale: 2,
            num_basis: 4,
            blocks: 1,
            width: 4,
            coeff_depth: 1,
            stochastic_omega,
            ..VSpMConfig::default()
        }
    }

    #[test]
    fn zero_coefficients_give_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = BasisSet {
            z: Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng),
        };
        let e = assemble_residual(&z, &Tensor::zeros(&[6, 3]), 2, 3).unwrap();
        assert_eq!(e.shape(), &[4, 6]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_basis_is_nearest_neighbour_magnification() {
        let z = BasisSet {
            z: Tensor::<f64>::full(&[9, 1], 1.0),
        };
        let c: Vec<f64> = (0..4).map(|i| i as f64 + 0.5).collect();
        let e = assemble_residual(&z, &Tensor::new(&[4, 1], c.clone()).unwrap(), 2, 2).unwrap();
        for yy in 0..6 {
            for x in 0..6 {
                assert_eq!(e.data()[yy * 6 + x], c[(yy / 3) * 2 + x / 3]);
            }
        }
    }

    #[test]
    fn agrees_with_tile_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tiles = Tensor::<f64>::randn(&[1, 5, 3, 3], 1.0, &mut rng);
        let coeffs = Tensor::<f64>::randn(&[1, 5, 2, 4], 1.0, &mut rng);
        let via_kernel = kernels::tile_combine(&tiles, &coeffs).unwrap();
        let e = assemble_residual(&tiles_to_basis(&tiles, 0), &nchw_to_pixel_major(&coeffs, 0), 2, 4).unwrap();
        assert!(e.max_abs_diff(&via_kernel.reshape(&[6, 12]).unwrap()) < 1e-12);
    }

    #[test]
    fn degenerate_sigma_returns_mean() {
        let dist = CoeffDistribution {
            mu: Tensor::<f64>::full(&[3, 2], 0.7),
            sigma: Tensor::full(&[3, 2], 1e-12),
        };
        let w = sample_coeffs(&dist, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(w.max_abs_diff(&dist.mu) < 1e-10);
    }

    #[test]
    fn external_path_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let y = natural_image(4, 4, 1);
        let missing = DeterministicPath::External(dir.path().join("nope.png"));
        assert!(matches!(deterministic_path(&missing, &y, 2), Err(Error::Config(_))));
        let p = dir.path().join("m.png");
        crate::imaging::save_png(&Image::zeros(8, 6), &p).unwrap();
        let wrong = DeterministicPath::External(p);
        assert!(matches!(deterministic_path(&wrong, &y, 2), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_config_repeats_itself() {
        let model = VSpMModel::<f32>::init(tiny(false), 0.4, 1).unwrap();
        let y = natural_image(6, 6, 2);
        let set = super_resolve(&model, &y, 3, 5).unwrap();
        assert_eq!(set.samples[0], set.samples[1]);
        assert_eq!(set.samples[1], set.samples[2]);
    }

    #[test]
    fn samples_depend_only_on_their_counter() {
        let model = VSpMModel::<f32>::init(tiny(true), 0.4, 1).unwrap();
        let y = natural_image(6, 6, 2);
        let fwd = super_resolve_counters(&model, &y, &[0, 1, 2], 8, &SampleOptions::default()).unwrap();
        let rev = super_resolve_counters(&model, &y, &[2, 1, 0], 8, &SampleOptions::default()).unwrap();
        assert_eq!(fwd.samples[0], rev.samples[2]);
        assert_eq!(fwd.samples[2], rev.samples[0]);
        assert_ne!(fwd.samples[0], fwd.samples[1]);
    }
}
