//! Independent reference implementations and the self-check suite.
//!
//! Each oracle recomputes a quantity by a route that shares no code with
//! the production path: explicit loops for convolutions, double-double
//! arithmetic for the KL term, adaptive quadrature for the prior marginal
//! and exhaustive minima for the diversity score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::metrics::{diversity_from_maps, DistanceMap};
use crate::numerics::{finite_diff_check, kernels, FdReport, Graph, Tensor};
use crate::objective::{kl_loss, prior_logpdf, LossInputs, LossWeights, Objective, PriorParams};
use crate::vspm::{residual_on_graph, VSpMConfig, VSpMModel};

/// Loop-nest cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let at = |t: &Tensor<f64>, i: [usize; 4]| {
        let s = t.shape();
        t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
    };
    let mut out = vec![0.0; n * co * oh * ow];
    let mut idx = 0;
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[o]);
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += at(x, [b, c, iy as usize, ix as usize]) * at(k, [o, c, dy, dx]);
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out).expect("shape")
}

/// Double-double number `hi + lo`.
#[derive(Clone, Copy, Debug)]
struct Dd(f64, f64);

impl Dd {
    fn from(x: f64) -> Self {
        Dd(x, 0.0)
    }

    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        Dd(s, (a - (s - bb)) + (b - bb))
    }

    fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.0, o.0);
        let t = Dd::two_sum(self.1, o.1);
        let r = Dd::two_sum(s.0, s.1 + t.0);
        Dd::two_sum(r.0, r.1 + t.1)
    }

    fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }

    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let e = self.0.mul_add(o.0, -p);
        Dd::two_sum(p, e + (self.0 * o.1 + self.1 * o.0))
    }

    fn div(self, o: Dd) -> Dd {
        let q1 = self.0 / o.0;
        let r = self.add(o.mul(Dd::from(q1)).neg());
        let q2 = r.0 / o.0;
        let r = r.add(o.mul(Dd::from(q2)).neg());
        let q3 = r.0 / o.0;
        Dd::two_sum(q1, q2).add(Dd::from(q3))
    }

    fn value(self) -> f64 {
        self.0 + self.1
    }
}

/// One KL entry, `½[μρ(μ²+σ²) − log σ²]`, in double-double arithmetic.
pub fn kl_entry_precise(mu: f64, sigma: f64, alpha: f64, beta: f64) -> f64 {
    let t = Dd::from(mu).mul(Dd::from(mu)).add(Dd::from(sigma).mul(Dd::from(sigma)));
    let denom = Dd::from(beta).add(Dd::from(0.5).mul(t));
    let mu_rho = Dd::from(alpha).add(Dd::from(0.5)).div(denom);
    let log_s2 = Dd::from(2.0 * sigma.ln());
    Dd::from(0.5).mul(mu_rho.mul(t).add(log_s2.neg())).value()
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Integrates over a fixed partition, adaptively on each piece.
fn integrate(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, pieces: usize, tol: f64) -> f64 {
    let step = (hi - lo) / pieces as f64;
    (0..pieces)
        .map(|i| adaptive_simpson(f, lo + step * i as f64, lo + step * (i + 1) as f64, tol / pieces as f64))
        .sum()
}

/// `p(w) = ∫ N(w; 0, 1/ρ) Gamma(ρ; α, β) dρ` by quadrature, with the gamma
/// normalizer itself obtained by quadrature. Integrates over `u = ln ρ`.
pub fn prior_density_quadrature(w: f64, alpha: f64, beta: f64) -> f64 {
    // unnormalized gamma density in u, scaled by its peak for range safety
    let peak_u = (alpha / beta).ln();
    let log_g = |u: f64| alpha * u - beta * u.exp();
    let log_g_peak = log_g(peak_u);
    let g = |u: f64| (log_g(u) - log_g_peak).exp();
    let (lo, hi) = (peak_u - 60.0 / alpha.min(1.0) - 10.0, peak_u + 6.0 + (60.0 / beta).ln().max(0.0));
    let z = integrate(&g, lo, hi, 64, 1e-15);
    let lik = |u: f64| {
        let rho = u.exp();
        (rho / std::f64::consts::TAU).sqrt() * (-0.5 * rho * w * w).exp() * g(u)
    };
    integrate(&lik, lo, hi, 64, 1e-15) / z
}

/// `∫ exp(prior_logpdf)` over the whole line via `w = tan θ`.
pub fn prior_total_mass(prior: &PriorParams) -> f64 {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let f = |th: f64| {
        let c = th.cos();
        if c <= 0.0 {
            return 0.0;
        }
        prior_logpdf(th.tan(), prior).exp() / (c * c)
    };
    integrate(&f, -half_pi, half_pi, 256, 1e-12)
}

/// Score from explicit per-pixel sorting and a scan of every sample mean.
pub fn diversity_brute_force(maps: &[Vec<f64>]) -> f64 {
    let n = maps[0].len();
    let mut local = 0.0;
    for p in 0..n {
        let mut col: Vec<f64> = maps.iter().map(|m| m[p]).collect();
        col.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        local += col[0];
    }
    local /= n as f64;
    let mut means: Vec<f64> = maps.iter().map(|m| m.iter().sum::<f64>() / n as f64).collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let global = means[0];
    if global <= 0.0 || local >= global {
        0.0
    } else {
        100.0 * (global - local) / global
    }
}

/// Central-difference step of the gradient oracle.
pub const FD_STEP: f64 = 1e-5;

/// Model used by the gradient oracle: ×2, four atoms, stochastic basis and
/// coefficients.
pub fn gradcheck_config() -> VSpMConfig {
    VSpMConfig {
        scale: 2,
        num_basis: 4,
        blocks: 1,
        width: 4,
        coeff_depth: 2,
        stochastic_z: true,
        stochastic_omega: true,
        ..VSpMConfig::default()
    }
}

/// Finite-difference check of the full module plus total loss in 64-bit
/// precision with frozen noise, on an `8×8` LR input.
pub fn vspm_gradient_check(seed: u64, h: f64) -> Result<FdReport> {
    let cfg = gradcheck_config();
    let mut model = VSpMModel::<f64>::init(cfg.clone(), 0.4, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // move away from the initializer's zeros and small scales so that no
    // gradient sits at the round-off level of the differences
    for p in model.params_mut() {
        let jitter = Tensor::<f64>::randn(p.shape(), 0.3, &mut rng);
        for (v, j) in p.data_mut().iter_mut().zip(jitter.data()) {
            *v += j;
        }
    }
    let (lh, lw, s, c) = (8, 8, cfg.scale, cfg.num_basis);
    let y = Tensor::<f64>::uniform(&[1, 1, lh, lw], 0.0, 1.0, &mut rng);
    let x = Tensor::<f64>::uniform(&[1, 1, lh * s, lw * s], 0.0, 1.0, &mut rng);
    let m = Tensor::<f64>::uniform(&[1, 1, lh * s, lw * s], 0.0, 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[1, c, lh, lw], 1.0, &mut rng);
    let delta = Tensor::<f64>::randn(&[1, c, s, s], 1.0, &mut rng);
    let objective = Objective::<f64>::new(
        PriorParams::default(),
        LossWeights {
            lambda_omega: 1.0,
            ..LossWeights::default()
        },
    )?;
    let eval = |params: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
        let yv = g.constant(y.clone());
        let xv = g.constant(x.clone());
        let mv = g.constant(m.clone());
        let ev = g.constant(eps.clone());
        let dv = g.constant(delta.clone());
        let out = model.forward(&mut g, &vars, yv)?;
        let e = residual_on_graph(&mut g, &out, Some(ev), Some(dv))?;
        let rep = objective.total_loss(
            &mut g,
            LossInputs {
                hr: xv,
                m: mv,
                e,
                mu: out.mu,
                sigma: out.sigma,
            },
        )?;
        let value = g.value(rep.total).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(rep.total)?;
        Ok((
            value,
            vars.iter()
                .zip(params)
                .map(|(&v, p)| gr.get_or_zeros(v, p.shape()))
                .collect(),
        ))
    };
    let (_, analytic) = eval(model.params(), true)?;
    Ok(finite_diff_check(
        |ps| eval(ps, false).map(|r| r.0).unwrap_or(f64::NAN),
        model.params(),
        &analytic,
        h,
    ))
}

/// Outcome of one oracle in the self-check suite.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

/// Worst rel err of `kl_loss` against [`kl_entry_precise`] over random
/// tuples with `σ ∈ [1e-3, 10]`.
pub fn kl_oracle(tuples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..tuples {
        let mu: f64 = rng.random_range(-10.0..10.0);
        let sigma = 10f64.powf(rng.random_range(-3.0..1.0));
        let alpha = 10f64.powf(rng.random_range(-1.0..1.0));
        let beta = 10f64.powf(rng.random_range(-1.0..1.0));
        let prior = PriorParams::new(alpha, beta)?;
        let mut g = Graph::<f64>::new();
        let mv = g.constant(Tensor::scalar(mu));
        let sv = g.constant(Tensor::scalar(sigma));
        let l = kl_loss(&mut g, mv, sv, &prior, false)?;
        let got = g.value(l).item();
        let want = kl_entry_precise(mu, sigma, alpha, beta);
        worst = worst.max((got - want).abs() / want.abs().max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

pub const PRIOR_CASES: [(f64, f64); 3] = [(3.0, 0.5), (3.0, 1.0), (1.0, 1.0)];

/// Test abscissae for the prior marginal.
pub fn prior_points() -> Vec<f64> {
    (0..20).map(|i| -6.0 + 12.0 * i as f64 / 19.0).collect()
}

/// Worst `|prior_logpdf − ln(quadrature)|` over [`PRIOR_CASES`] ×
/// [`prior_points`].
pub fn prior_oracle() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (a, b) in PRIOR_CASES {
        let prior = PriorParams::new(a, b)?;
        for w in prior_points() {
            let err = (prior_logpdf(w, &prior) - prior_density_quadrature(w, a, b).ln()).abs();
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Worst `|mass − 1|` of the prior over [`PRIOR_CASES`].
pub fn prior_mass_oracle() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (a, b) in PRIOR_CASES {
        worst = worst.max((prior_total_mass(&PriorParams::new(a, b)?) - 1.0).abs());
    }
    Ok(worst)
}

/// Worst diversity-score disagreement over randomized tiny cases.
pub fn diversity_oracle(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let h = rng.random_range(2..=4);
        let w = rng.random_range(2..=4);
        let n = rng.random_range(2..=5);
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..h * w).map(|_| rng.random_range(0.0..3.0)).collect())
            .collect();
        let maps = raw
            .iter()
            .map(|v| DistanceMap::new(h, w, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        worst = worst.max((diversity_from_maps(&maps)? - diversity_brute_force(&raw)).abs());
        let same = vec![maps[0].clone(); n];
        worst = worst.max(diversity_from_maps(&same)?.abs());
    }
    Ok(worst)
}

/// Worst gap of the optimized convolutions against loops, and of the
/// adjoint identity `⟨conv(u), v⟩ = ⟨u, convᵀ(v)⟩`.
pub fn conv_oracle(seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv_err: f64 = 0.0;
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        let x = Tensor::<f64>::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let kt = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let fast = kernels::conv2d(&x, &kt, Some(&b), stride, pad)?;
        conv_err = conv_err.max(fast.max_abs_diff(&naive_conv2d(&x, &kt, Some(&b), stride, pad)));
    }
    let mut adj_err: f64 = 0.0;
    for &(s, k) in &[(2, 2), (4, 4), (2, 3)] {
        let v = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let kt = Tensor::<f64>::randn(&[3, 2, k, k], 1.0, &mut rng);
        let tv = kernels::transposed_conv2d(&v, &kt, s)?;
        let u = Tensor::<f64>::randn(tv.shape(), 1.0, &mut rng);
        let cu = kernels::conv2d(&u, &kt, None, s, 0)?;
        let lhs = cu.dot(&v);
        let rhs = u.dot(&tv);
        adj_err = adj_err.max((lhs - rhs).abs() / (lhs.abs() + rhs.abs()));
    }
    Ok((conv_err, adj_err))
}

/// Runs every oracle once.
pub fn run_all(seed: u64) -> Result<Vec<OracleResult>> {
    let (conv, adjoint) = conv_oracle(seed)?;
    let fd = vspm_gradient_check(seed, FD_STEP)?;
    Ok(vec![
        OracleResult {
            name: "conv2d vs loop nest",
            max_error: conv,
            tolerance: 1e-12,
        },
        OracleResult {
            name: "transposed conv adjoint",
            max_error: adjoint,
            tolerance: 1e-12,
        },
        OracleResult {
            name: "finite differences (vspm + total loss)",
            max_error: fd.max_rel_err,
            tolerance: 1e-5,
        },
        OracleResult {
            name: "KL term vs double-double",
            max_error: kl_oracle(1000, seed)?,
            tolerance: 1e-10,
        },
        OracleResult {
            name: "prior marginal vs quadrature",
            max_error: prior_oracle()?,
            tolerance: 1e-6,
        },
        OracleResult {
            name: "prior total mass",
            max_error: prior_mass_oracle()?,
            tolerance: 1e-4,
        },
        OracleResult {
            name: "diversity vs brute force",
            max_error: diversity_oracle(50, seed)?,
            tolerance: 1e-9,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_double_kl_hand_value() {
        assert_eq!(kl_entry_precise(0.0, 1.0, 3.0, 0.5), 1.75);
    }

    #[test]
    fn simpson_on_polynomial_and_gaussian() {
        assert!((adaptive_simpson(&|x| x * x * x, 0.0, 2.0, 1e-12) - 4.0).abs() < 1e-12);
        let g = |x: f64| (-0.5 * x * x).exp();
        let v = integrate(&g, -12.0, 12.0, 8, 1e-13);
        assert!((v - std::f64::consts::TAU.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn brute_force_hand_case() {
        let d = diversity_brute_force(&[vec![1.0, 3.0, 2.0, 2.0], vec![2.0, 1.0, 3.0, 1.0]]);
        assert!((d - 28.571428571428573).abs() < 1e-9);
    }
}
