use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for an ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update with learning rate `lr`. The bias corrections are
    /// evaluated in 64-bit precision.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::shape(format!(
                "adam: {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(format!(
                    "adam: parameter {i} has shape {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.first[i].shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let step_size = T::lit(lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let (b1, b2, e) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let denom = vv.sqrt() * inv_sqrt_bc2 + e;
                *pv -= step_size * *mv / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![Tensor::<f64>::from_f64(&[2], &[1.5, -0.5]).unwrap()];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            st.step(&mut params, &[Tensor::zeros(&[2])], 1e-2).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, &[Tensor::scalar(1.0)], 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = lr · 1 / (1 + 1e-8)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut params = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..100 {
            let w = params[0].item();
            let g = Tensor::scalar(2.0 * (w - 3.0));
            st.step(&mut params, &[g], 0.3).unwrap();
        }
        assert!((params[0].item() - 3.0).abs() < 1e-2, "w = {}", params[0].item());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        assert!(st.step(&mut params, &[Tensor::zeros(&[3])], 1e-3).is_err());
        assert!(st.step(&mut params, &[], 1e-3).is_err());
        assert_eq!(st.step, 0);
    }
}
