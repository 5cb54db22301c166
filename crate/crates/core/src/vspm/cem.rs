use crate::error::{Error, Result};
use crate::imaging::{degradation, Image};

/// Relative slack on the per-iteration residual check. Once the iteration
/// has converged to 32-bit round-off, the residual only jitters.
const MONOTONE_SLACK: f64 = 1e-3;

/// LR residual `‖degrade(sr) − y‖²` before the first and after every
/// iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CemTrace {
    pub residuals: Vec<f64>,
}

/// Iterative back-projection onto the set of images consistent with `y`.
pub fn cem_project(sr: &Image, y: &Image, s: usize, iters: usize) -> Result<Image> {
    cem_project_traced(sr, y, s, iters).map(|(img, _)| img)
}

pub fn cem_project_traced(sr: &Image, y: &Image, s: usize, iters: usize) -> Result<(Image, CemTrace)> {
    let (h, w) = y.dims();
    if sr.dims() != (h * s, w * s) {
        return Err(Error::shape(format!(
            "cem: SR image is {:?}, expected {:?} for LR {:?} at ×{s}",
            sr.dims(),
            (h * s, w * s),
            (h, w)
        )));
    }
    let op = degradation();
    // one 32-bit ulp per pixel, squared
    let floor = (h * w * 3) as f64 * (f32::EPSILON as f64).powi(2);
    let mut cur = sr.clone();
    let mut diff = y.sub(&op.downsample(&cur, s)?)?;
    let mut residuals = vec![diff.sum_sq()];
    for it in 0..iters {
        cur = cur.add(&op.upsample(&diff, s))?;
        diff = y.sub(&op.downsample(&cur, s)?)?;
        let r = diff.sum_sq();
        let prev = residuals[residuals.len() - 1];
        if !r.is_finite() || r > prev * (1.0 + MONOTONE_SLACK) + floor {
            return Err(Error::Numerical(format!(
                "cem: LR residual grew from {prev:e} to {r:e} at iteration {}",
                it + 1
            )));
        }
        residuals.push(r);
    }
    Ok((cur, CemTrace { residuals }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synth::{natural_image, smooth_image};
    use crate::imaging::{bicubic_upsample, degrade};

    #[test]
    fn fixed_point_is_kept() {
        let y = smooth_image(12, 12, 4);
        let base = bicubic_upsample(&y, 4);
        let (consistent, _) = cem_project_traced(&base, &y, 4, 30).unwrap();
        let y2 = degrade(&consistent, 4).unwrap();
        let again = cem_project(&consistent, &y2, 4, 5).unwrap();
        assert!(again.max_abs_diff(&consistent) <= 1e-6);
    }

    #[test]
    fn residual_drops_tenfold() {
        let hr = smooth_image(48, 48, 1);
        let y = degrade(&hr, 4).unwrap();
        let noisy = Image::from_fn(48, 48, |c, yy, x| {
            hr.get(c, yy, x) + 0.1 * (((yy * 31 + x * 17 + c * 7) % 13) as f32 / 13.0 - 0.5)
        });
        let (_, trace) = cem_project_traced(&noisy, &y, 4, 10).unwrap();
        assert!(trace.residuals[10] * 10.0 <= trace.residuals[0], "{:?}", trace.residuals);
        for w in trace.residuals.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + MONOTONE_SLACK) + 1e-9);
        }
    }

    #[test]
    fn dims_are_checked() {
        let y = natural_image(8, 8, 2);
        assert!(cem_project(&Image::zeros(30, 32), &y, 4, 1).is_err());
    }

    #[test]
    fn zero_iterations_is_identity() {
        let y = natural_image(8, 8, 2);
        let sr = bicubic_upsample(&y, 2);
        assert_eq!(cem_project(&sr, &y, 2, 0).unwrap(), sr);
    }
}
