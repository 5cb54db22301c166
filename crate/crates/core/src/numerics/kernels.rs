//! Forward and backward kernels for the layer operations used by the model.
//!
//! These work on plain tensors; [`super::Graph`] wires them into the tape.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Range of output indices `o` for which `o*stride + tap - pad` lands inside
/// `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi = if len + pad > tap {
        ((len - 1 + pad - tap) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_out_size(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape("conv2d: stride must be at least 1"));
    }
    if len + 2 * pad < k {
        return Err(Error::shape(format!(
            "conv2d: kernel extent {k} exceeds padded input extent {}",
            len + 2 * pad
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

fn check_conv(x: &Tensor<impl Real>, k: &Tensor<impl Real>, op: &str) -> Result<()> {
    let (_, ci, _, _) = x.nchw(op)?;
    let (_, kci, _, _) = k.nchw(op)?;
    if ci != kci {
        return Err(Error::shape(format!(
            "{op}: kernel expects {kci} input channels, input has {ci}"
        )));
    }
    Ok(())
}

/// Cross-correlation of an NCHW input with a `[Co, Ci, Kh, Kw]` kernel and
/// symmetric zero padding.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_conv(x, k, "conv2d")?;
    let (n, ci, h, w) = x.nchw("conv2d")?;
    let (co, _, kh, kw) = k.nchw("conv2d")?;
    if let Some(b) = bias {
        if b.len() != co {
            return Err(Error::shape(format!(
                "conv2d: bias has {} entries for {co} output channels",
                b.len()
            )));
        }
    }
    let oh = conv2d_out_size(h, kh, stride, pad)?;
    let ow = conv2d_out_size(w, kw, stride, pad)?;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let plane = &mut out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            if let Some(bias) = bias {
                let bv = bias.data()[o];
                plane.iter_mut().for_each(|v| *v = bv);
            }
            for c in 0..ci {
                let xin = &xd[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(h, oh, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = kd[((o * ci + c) * kh + ky) * kw + kx];
                        let (x0, x1) = valid_range(w, ow, kx, stride, pad);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            if stride == 1 {
                                let off = x0 + kx - pad;
                                let len = x1 - x0;
                                for (ov, &iv) in orow[x0..x1].iter_mut().zip(&irow[off..off + len]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for ox in x0..x1 {
                                    orow[ox] += wv * irow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> ConvGrads<T> {
    let (n, ci, h, w) = x.nchw("conv2d").expect("checked in forward");
    let (co, _, kh, kw) = k.nchw("conv2d").expect("checked in forward");
    let (_, _, oh, ow) = gout.nchw("conv2d").expect("checked in forward");
    let xd = x.data();
    let kd = k.data();
    let gd = gout.data();
    let mut gx = if want[0] { Some(vec![T::zero(); x.len()]) } else { None };
    let mut gk = if want[1] { Some(vec![T::zero(); k.len()]) } else { None };
    for b in 0..n {
        for o in 0..co {
            let gplane = &gd[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                for ky in 0..kh {
                    let (y0, y1) = valid_range(h, oh, ky, stride, pad);
                    for kx in 0..kw {
                        let kidx = ((o * ci + c) * kh + ky) * kw + kx;
                        let (x0, x1) = valid_range(w, ow, kx, stride, pad);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = kd[kidx];
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let ioff = xbase + iy * w;
                            if stride == 1 {
                                let off = x0 + kx - pad;
                                let len = x1 - x0;
                                if gk.is_some() {
                                    let irow = &xd[ioff + off..ioff + off + len];
                                    for (&g, &iv) in grow[x0..x1].iter().zip(irow) {
                                        acc += g * iv;
                                    }
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let grow_in = &mut gx[ioff + off..ioff + off + len];
                                    for (gi, &g) in grow_in.iter_mut().zip(&grow[x0..x1]) {
                                        *gi += wv * g;
                                    }
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = ox * stride + kx - pad;
                                    let g = grow[ox];
                                    if gk.is_some() {
                                        acc += g * xd[ioff + ix];
                                    }
                                    if let Some(gx) = gx.as_mut() {
                                        gx[ioff + ix] += wv * g;
                                    }
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    let gb = if want[2] {
        let mut gb = vec![T::zero(); co];
        for b in 0..n {
            for (o, slot) in gb.iter_mut().enumerate() {
                for &g in &gd[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow] {
                    *slot += g;
                }
            }
        }
        Some(Tensor::new(&[co], gb).expect("bias shape"))
    } else {
        None
    };
    ConvGrads {
        input: gx.map(|d| Tensor::new(x.shape(), d).expect("shape")),
        kernel: gk.map(|d| Tensor::new(k.shape(), d).expect("shape")),
        bias: gb,
    }
}

/// Transposed convolution with a `[Ci, Co, Kh, Kw]` kernel, no padding. The
/// output extent is `(in - 1) * stride + k`; this is the adjoint of
/// [`conv2d`] with the same kernel and stride.
pub fn transposed_conv2d<T: Real>(x: &Tensor<T>, k: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (n, ci, h, w) = x.nchw("transposed_conv2d")?;
    let (kci, co, kh, kw) = k.nchw("transposed_conv2d")?;
    if kci != ci {
        return Err(Error::shape(format!(
            "transposed_conv2d: kernel expects {kci} input channels, input has {ci}"
        )));
    }
    if stride == 0 || kh < stride || kw < stride {
        return Err(Error::shape(format!(
            "transposed_conv2d: kernel {kh}x{kw} incompatible with stride {stride}"
        )));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::zero(); n * co * oh * ow];
    for b in 0..n {
        for c in 0..ci {
            let xin = &xd[(b * ci + c) * h * w..(b * ci + c + 1) * h * w];
            for o in 0..co {
                let plane = &mut out[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
                let kbase = (c * co + o) * kh * kw;
                for iy in 0..h {
                    for ix in 0..w {
                        let v = xin[iy * w + ix];
                        for ky in 0..kh {
                            let row = &mut plane[(iy * stride + ky) * ow + ix * stride..];
                            let krow = &kd[kbase + ky * kw..kbase + (ky + 1) * kw];
                            for (ov, &kv) in row[..kw].iter_mut().zip(krow) {
                                *ov += v * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, oh, ow], out)
}

pub fn transposed_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    want: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, w) = x.nchw("transposed_conv2d").expect("checked");
    let (_, co, kh, kw) = k.nchw("transposed_conv2d").expect("checked");
    let (_, _, oh, ow) = gout.nchw("transposed_conv2d").expect("checked");
    let xd = x.data();
    let kd = k.data();
    let gd = gout.data();
    let mut gx = if want[0] { Some(vec![T::zero(); x.len()]) } else { None };
    let mut gk = if want[1] { Some(vec![T::zero(); k.len()]) } else { None };
    for b in 0..n {
        for c in 0..ci {
            for o in 0..co {
                let gplane = &gd[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
                let kbase = (c * co + o) * kh * kw;
                for iy in 0..h {
                    for ix in 0..w {
                        let xi = (b * ci + c) * h * w + iy * w + ix;
                        let v = xd[xi];
                        let mut acc = T::zero();
                        for ky in 0..kh {
                            let grow = &gplane[(iy * stride + ky) * ow + ix * stride..][..kw];
                            for kx in 0..kw {
                                let g = grow[kx];
                                acc += g * kd[kbase + ky * kw + kx];
                                if let Some(gk) = gk.as_mut() {
                                    gk[kbase + ky * kw + kx] += v * g;
                                }
                            }
                        }
                        if let Some(gx) = gx.as_mut() {
                            gx[xi] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d).expect("shape")),
        gk.map(|d| Tensor::new(k.shape(), d).expect("shape")),
    )
}

pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw("global_avg_pool")?;
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| {
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            acc * inv
        })
        .collect();
    Tensor::new(&[n, c, 1, 1], out)
}

pub fn global_avg_pool_backward<T: Real>(x_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let hw = x_shape[2] * x_shape[3];
    let inv = T::one() / T::lit(hw as f64);
    let mut gx = Vec::with_capacity(hw * gout.len());
    for &g in gout.data() {
        gx.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(x_shape, gx).expect("shape")
}

/// Values saved by [`layer_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each spatial location of an NCHW tensor across its channels,
/// then applies per-channel `gain` and `offset`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    offset: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (n, c, h, w) = x.nchw("layer_norm")?;
    if gain.len() != c || offset.len() != c {
        return Err(Error::shape(format!(
            "layer_norm: gain/offset lengths {}/{} for {c} channels",
            gain.len(),
            offset.len()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Domain("layer_norm: eps must be positive".into()));
    }
    let hw = h * w;
    let xd = x.data();
    let inv_c = T::one() / T::lit(c as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * hw];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mean = T::zero();
            for ch in 0..c {
                mean += xd[base + ch * hw + p];
            }
            mean *= inv_c;
            let mut var = T::zero();
            for ch in 0..c {
                let d = xd[base + ch * hw + p] - mean;
                var += d * d;
            }
            var *= inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[b * hw + p] = is;
            for ch in 0..c {
                let i = base + ch * hw + p;
                let xn = (xd[i] - mean) * is;
                xhat[i] = xn;
                out[i] = gain.data()[ch] * xn + offset.data()[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        LayerNormCache {
            normalized: Tensor::new(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = cache.normalized.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let xh = cache.normalized.data();
    let gd = gout.data();
    let gn = gain.data();
    let inv_c = T::one() / T::lit(c as f64);
    let mut gx = vec![T::zero(); xh.len()];
    let mut ggain = vec![T::zero(); c];
    let mut goff = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for ch in 0..c {
                let i = base + ch * hw + p;
                let g = gd[i] * gn[ch];
                sum_g += g;
                sum_gx += g * xh[i];
                ggain[ch] += gd[i] * xh[i];
                goff[ch] += gd[i];
            }
            let is = cache.inv_std[b * hw + p];
            for ch in 0..c {
                let i = base + ch * hw + p;
                let g = gd[i] * gn[ch];
                gx[i] = is * (g - sum_g * inv_c - xh[i] * sum_gx * inv_c);
            }
        }
    }
    (
        Tensor::new(shape, gx).expect("shape"),
        Tensor::new(&[c], ggain).expect("shape"),
        Tensor::new(&[c], goff).expect("shape"),
    )
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match a.shape() {
        &[m, k] => (m, k),
        s => return Err(Error::shape(format!("matmul: left operand must be 2-D, got {s:?}"))),
    };
    let (k2, n) = match b.shape() {
        &[k2, n] => (k2, n),
        s => return Err(Error::shape(format!("matmul: right operand must be 2-D, got {s:?}"))),
    };
    if k != k2 {
        return Err(Error::shape(format!("matmul: inner extents {k} and {k2} differ")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = ad[i * k + l];
            for (o, &bv) in orow.iter_mut().zip(&bd[l * n..(l + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose2d<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out).expect("shape")
}

/// Residual assembly. `tiles` is `[N, C, s, s]` (atom `j` reshaped to an
/// `s×s` tile), `coeffs` is `[N, C, H, W]`; the output `[N, 1, sH, sW]`
/// places `Σ_j tiles[j] · coeffs[j, y, x]` at tile `(y, x)`.
pub fn tile_combine<T: Real>(tiles: &Tensor<T>, coeffs: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, s, s2) = tiles.nchw("tile_combine")?;
    let (n2, c2, h, w) = coeffs.nchw("tile_combine")?;
    if s != s2 || n != n2 || c != c2 {
        return Err(Error::shape(format!(
            "tile_combine: tiles {:?} incompatible with coefficients {:?}",
            tiles.shape(),
            coeffs.shape()
        )));
    }
    let (oh, ow) = (h * s, w * s);
    let td = tiles.data();
    let cd = coeffs.data();
    let mut out = vec![T::zero(); n * oh * ow];
    let mut tile = vec![T::zero(); s * s];
    for b in 0..n {
        let plane = &mut out[b * oh * ow..(b + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                tile.iter_mut().for_each(|v| *v = T::zero());
                for j in 0..c {
                    let wj = cd[((b * c + j) * h + y) * w + x];
                    let t = &td[(b * c + j) * s * s..(b * c + j + 1) * s * s];
                    for (acc, &tv) in tile.iter_mut().zip(t) {
                        *acc += tv * wj;
                    }
                }
                for a in 0..s {
                    plane[(y * s + a) * ow + x * s..(y * s + a) * ow + x * s + s]
                        .copy_from_slice(&tile[a * s..(a + 1) * s]);
                }
            }
        }
    }
    Tensor::new(&[n, 1, oh, ow], out)
}

pub fn tile_combine_backward<T: Real>(
    tiles: &Tensor<T>,
    coeffs: &Tensor<T>,
    gout: &Tensor<T>,
    want: [bool; 2],
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, c, s, _) = tiles.nchw("tile_combine").expect("checked");
    let (_, _, h, w) = coeffs.nchw("tile_combine").expect("checked");
    let ow = w * s;
    let oh = h * s;
    let td = tiles.data();
    let cd = coeffs.data();
    let gd = gout.data();
    let mut gt = if want[0] { Some(vec![T::zero(); tiles.len()]) } else { None };
    let mut gc = if want[1] { Some(vec![T::zero(); coeffs.len()]) } else { None };
    let mut gtile = vec![T::zero(); s * s];
    for b in 0..n {
        let plane = &gd[b * oh * ow..(b + 1) * oh * ow];
        for y in 0..h {
            for x in 0..w {
                for a in 0..s {
                    gtile[a * s..(a + 1) * s]
                        .copy_from_slice(&plane[(y * s + a) * ow + x * s..(y * s + a) * ow + x * s + s]);
                }
                for j in 0..c {
                    let ci = ((b * c + j) * h + y) * w + x;
                    let toff = (b * c + j) * s * s;
                    if let Some(gc) = gc.as_mut() {
                        let mut acc = T::zero();
                        for (&g, &tv) in gtile.iter().zip(&td[toff..toff + s * s]) {
                            acc += g * tv;
                        }
                        gc[ci] = acc;
                    }
                    if let Some(gt) = gt.as_mut() {
                        let wj = cd[ci];
                        for (acc, &g) in gt[toff..toff + s * s].iter_mut().zip(&gtile) {
                            *acc += g * wj;
                        }
                    }
                }
            }
        }
    }
    (
        gt.map(|d| Tensor::new(tiles.shape(), d).expect("shape")),
        gc.map(|d| Tensor::new(coeffs.shape(), d).expect("shape")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, w) = x.nchw("").unwrap();
        let (co, _, kh, kw) = k.nchw("").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * oh * ow];
        for bi in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bi * ci + c) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * ci + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * co + o) * oh + oy) * ow + ox] = acc + b[o];
                    }
                }
            }
        }
        Tensor::new(&[n, co, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut k = Tensor::<f32>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
            let fast = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
            let slow = naive_conv(&x, &k, b.data(), stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"));
        let k = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &k, None, 0, 1).is_err());
        let k = Tensor::<f32>::zeros(&[1, 2, 7, 7]);
        assert!(conv2d(&x, &k, None, 1, 0).is_err());
    }

    #[test]
    fn transposed_broadcasts_scalar_over_block() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 1], 0.75);
        let k = Tensor::<f32>::full(&[1, 1, 4, 4], 1.0);
        let y = transposed_conv2d(&x, &k, 4).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.75));
        let z = transposed_conv2d(&Tensor::<f32>::zeros(&[1, 1, 1, 1]), &k, 4).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_rejects_gappy_stride() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(transposed_conv2d(&x, &k, 3).is_err());
        assert!(transposed_conv2d(&x, &k, 0).is_err());
    }

    #[test]
    fn pool_means() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().item(), 2.5);
        let c = Tensor::<f64>::full(&[2, 3, 4, 5], -0.3);
        assert!(global_avg_pool(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v + 0.3).abs() < 1e-15));
    }

    #[test]
    fn layer_norm_constant_gives_offset() {
        let x = Tensor::<f64>::full(&[1, 4, 2, 2], 3.0);
        let gain = Tensor::<f64>::from_f64(&[4], &[1., 2., 3., 4.]).unwrap();
        let off = Tensor::<f64>::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (y, _) = layer_norm(&x, &gain, &off, 1e-5).unwrap();
        for ch in 0..4 {
            for p in 0..4 {
                assert!((y.data()[ch * 4 + p] - off.data()[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 16, 3, 3], 2.0, &mut rng);
        let gain = Tensor::<f64>::full(&[16], 1.5);
        let off = Tensor::<f64>::full(&[16], 0.25);
        let (y, _) = layer_norm(&x, &gain, &off, 1e-8).unwrap();
        for b in 0..2 {
            for p in 0..9 {
                let vals: Vec<f64> = (0..16).map(|c| y.data()[(b * 16 + c) * 9 + p]).collect();
                let mean = vals.iter().sum::<f64>() / 16.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                assert!((mean - 0.25).abs() < 1e-9);
                assert!((var - 2.25).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_identity_and_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let mut eye = Tensor::<f64>::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0;
                for l in 0..3 {
                    acc += a.data()[i * 3 + l] * b.data()[l * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - acc).abs() <= 1e-7);
            }
        }
        assert!(matmul(&a, &a).is_err());
    }
}
