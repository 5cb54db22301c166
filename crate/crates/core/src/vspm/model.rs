use super::VSpMConfig;
use crate::error::{Error, Result};
use crate::numerics::{softplus_inv, Graph, Real, Tensor, Var};
use crate::rng::SeedStream;

const LN_EPS: f64 = 1e-5;
/// Initial scale of the learned basis-noise amplitude (stochastic `z` only).
const Z_NOISE_INIT: f64 = 0.05;
/// The deconvolution starts small so that early residuals stay near zero.
const UP_INIT_GAIN: f64 = 0.1;

/// All learnable tensors of the module plus its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct VSpMModel<T> {
    config: VSpMConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Basis of one channel: `z` with shape `[s², C]`; column `j` is atom `j`
/// flattened row-major over its `s×s` tile.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet<T> {
    pub z: Tensor<T>,
}

/// Per-LR-pixel Gaussian over coefficients of one channel; `mu`, `sigma`
/// have shape `[H·W, C]` in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffDistribution<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

/// Graph outputs of both branches for a batch of single-channel inputs.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutputs {
    /// `[N, C, s, s]`
    pub tiles: Var,
    /// `[N, C, H, W]`
    pub mu: Var,
    /// `[N, C, H, W]`, at least the configured floor.
    pub sigma: Var,
    /// Softplus of the learned basis-noise scale, `[1]`.
    pub noise_scale: Option<Var>,
}

impl<T: Real> VSpMModel<T> {
    /// Fan-in scaled random init. The σ head starts with zero weights and a
    /// bias that puts every σ at `prior_scale`.
    pub fn init(config: VSpMConfig, prior_scale: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(prior_scale > config.sigma_floor) {
            return Err(Error::Config(format!(
                "initial σ {prior_scale} must exceed the floor {}",
                config.sigma_floor
            )));
        }
        let shapes = config.param_shapes();
        let seeds = SeedStream::new(seed);
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (i, (name, shape)) in shapes.into_iter().enumerate() {
            let mut rng = seeds.stream("init", i as u64);
            let t = if name.ends_with(".bias") || name.ends_with(".offset") {
                if name == "coeff.sigma.bias" {
                    Tensor::full(&shape, T::lit(softplus_inv(prior_scale - config.sigma_floor)))
                } else {
                    Tensor::zeros(&shape)
                }
            } else if name.ends_with(".gain") {
                Tensor::full(&shape, T::one())
            } else if name == "basis.noise_scale" {
                Tensor::full(&shape, T::lit(softplus_inv(Z_NOISE_INIT)))
            } else if name == "coeff.sigma.weight" {
                Tensor::zeros(&shape)
            } else if name == "basis.up.weight" {
                // each output element sees `width` inputs
                let std = UP_INIT_GAIN / (shape[0] as f64).sqrt();
                Tensor::randn(&shape, std, &mut rng)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("coeff.mu") { 1.0 } else { 2.0 };
                Tensor::randn(&shape, (gain / fan_in as f64).sqrt(), &mut rng)
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn from_params(config: VSpMConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "config mismatch: expected {} tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "config mismatch: {name} should be {shape:?}, found {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: shapes.into_iter().map(|(n, _)| n).collect(),
            params,
        })
    }

    pub fn config(&self) -> &VSpMConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> VSpMModel<U> {
        VSpMModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every parameter on the graph, as gradient-receiving leaves
    /// when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// Runs both branches on `y` of shape `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], y: Var) -> Result<BranchOutputs> {
        let (_, ch, _, _) = g.value(y).nchw("vspm input")?;
        if ch != 1 {
            return Err(Error::shape(format!("vspm input must have one channel, got {ch}")));
        }
        if vars.len() != self.params.len() {
            return Err(Error::shape("parameter handles do not match the model"));
        }
        let mut next = vars.iter().copied();
        let mut take = || next.next().expect("parameter layout");
        let x = g.add_scalar(y, T::lit(-0.5))?;

        // basis branch: head conv, L residual blocks, pool, deconvolution
        let (hw, hb) = (take(), take());
        let mut h = g.conv2d(x, hw, Some(hb), 1, 1)?;
        for _ in 0..self.config.blocks {
            let (w1, b1, w2, b2) = (take(), take(), take(), take());
            let a = g.conv2d(h, w1, Some(b1), 1, 1)?;
            let a = g.relu(a)?;
            let r = g.conv2d(a, w2, Some(b2), 1, 1)?;
            h = g.add(h, r)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let up = take();
        let tiles = g.transposed_conv2d(pooled, up, self.config.scale)?;
        let noise_scale = if self.config.stochastic_z {
            let raw = take();
            Some(g.softplus(raw)?)
        } else {
            None
        };

        // coefficient branch: conv → layer norm → ReLU, then two 1×1 heads
        let mut c = x;
        for _ in 0..self.config.coeff_depth {
            let (w, b, gain, off) = (take(), take(), take(), take());
            let v = g.conv2d(c, w, Some(b), 1, 1)?;
            let v = g.layer_norm(v, gain, off, T::lit(LN_EPS))?;
            c = g.relu(v)?;
        }
        let (mw, mb) = (take(), take());
        let mu = g.conv2d(c, mw, Some(mb), 1, 0)?;
        let (sw, sb) = (take(), take());
        let raw = g.conv2d(c, sw, Some(sb), 1, 0)?;
        let sp = g.softplus(raw)?;
        let sigma = g.add_scalar(sp, T::lit(self.config.sigma_floor))?;
        Ok(BranchOutputs {
            tiles,
            mu,
            sigma,
            noise_scale,
        })
    }

    fn run_single(&self, plane: &[f32], height: usize, width: usize) -> Result<(Graph<T>, BranchOutputs)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let data = plane.iter().map(|&v| T::lit(v as f64)).collect();
        let y = g.constant(Tensor::new(&[1, 1, height, width], data)?);
        let out = self.forward(&mut g, &vars, y)?;
        Ok((g, out))
    }

    /// Basis for one LR channel (without the stochastic-`z` perturbation).
    pub fn basis_branch(&self, plane: &[f32], height: usize, width: usize) -> Result<BasisSet<T>> {
        let (g, out) = self.run_single(plane, height, width)?;
        Ok(tiles_to_basis(g.value(out.tiles), 0))
    }

    pub fn coeff_branch(&self, plane: &[f32], height: usize, width: usize) -> Result<CoeffDistribution<T>> {
        let (g, out) = self.run_single(plane, height, width)?;
        Ok(CoeffDistribution {
            mu: nchw_to_pixel_major(g.value(out.mu), 0),
            sigma: nchw_to_pixel_major(g.value(out.sigma), 0),
        })
    }
}

/// `[N, C, s, s]` tiles of sample `n` as the `[s², C]` matrix `z`.
pub(crate) fn tiles_to_basis<T: Real>(tiles: &Tensor<T>, n: usize) -> BasisSet<T> {
    let (_, c, s, _) = tiles.nchw("tiles").expect("tile layout");
    let mut z = vec![T::zero(); s * s * c];
    for j in 0..c {
        for p in 0..s * s {
            z[p * c + j] = tiles.data()[(n * c + j) * s * s + p];
        }
    }
    BasisSet {
        z: Tensor::new(&[s * s, c], z).expect("shape"),
    }
}

/// `[N, C, H, W]` slice `n` as `[H·W, C]`.
pub(crate) fn nchw_to_pixel_major<T: Real>(t: &Tensor<T>, n: usize) -> Tensor<T> {
    let (_, c, h, w) = t.nchw("coefficients").expect("layout");
    let hw = h * w;
    let mut out = vec![T::zero(); hw * c];
    for j in 0..c {
        for p in 0..hw {
            out[p * c + j] = t.data()[(n * c + j) * hw + p];
        }
    }
    Tensor::new(&[hw, c], out).expect("shape")
}
