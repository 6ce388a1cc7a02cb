use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::ops::PadMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-output-index `(i0, i1, w1)` for half-pixel-centre bilinear sampling
/// (`align_corners = false`).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

/// Bilinear resize of the last two axes of `src` (`[.., h, w]` flattened as
/// `planes × h × w`).
pub fn resize_bilinear_planes<T: Scalar>(src: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<(usize, usize, T, T)> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::of(1.0 - l), T::of(l)))
        .collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let img = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let (wy0, wy1) = (T::of(1.0 - ly), T::of(ly));
            let r0 = &img[y0 * w..(y0 + 1) * w];
            let r1 = &img[y1 * w..(y1 + 1) * w];
            for &(x0, x1, wx0, wx1) in &tx {
                out.push(wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]));
            }
        }
    }
    out
}

fn resize_bilinear_adjoint<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gi = &g[p * oh * ow..(p + 1) * oh * ow];
        let img = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(1.0 - ly), T::of(ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = gi[oy * ow + ox];
                let (wx0, wx1) = (T::of(1.0 - lx), T::of(lx));
                img[y0 * w + x0] += v * wy0 * wx0;
                img[y0 * w + x1] += v * wy0 * wx1;
                img[y1 * w + x0] += v * wy1 * wx0;
                img[y1 * w + x1] += v * wy1 * wx1;
            }
        }
    }
    out
}

fn spatial_dims<T: Scalar>(v: &Var<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let r = v.rank();
    if r < 2 {
        return Err(invalid(op, "needs at least two axes"));
    }
    let (h, w) = (v.dim(r - 2), v.dim(r - 1));
    Ok((v.value().numel() / (h * w).max(1), h, w))
}

impl<T: Scalar> Var<T> {
    /// Bilinear resize of the last two axes, `align_corners = false`.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Var<T>> {
        let (planes, h, w) = spatial_dims(self, "resize_bilinear")?;
        if h == 0 || w == 0 || oh == 0 || ow == 0 {
            return Err(invalid("resize_bilinear", "empty spatial extent"));
        }
        let data = resize_bilinear_planes(self.value().data(), planes, h, w, oh, ow);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(&shape, data)?;
        Ok(Var::from_op(
            out,
            "resize_bilinear",
            &[self],
            Box::new(move |g, x, _| {
                let d = resize_bilinear_adjoint(g.data(), planes, h, w, oh, ow);
                Ok(vec![Some(Tensor::new(x[0].shape(), d)?)])
            }),
        ))
    }

    /// Non-overlapping `k × k` average pooling of the last two axes.
    pub fn avg_pool(&self, k: usize) -> Result<Var<T>> {
        let (planes, h, w) = spatial_dims(self, "avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(invalid("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::of(1.0 / (k * k) as f64);
        let src = self.value().data();
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..h {
                for x in 0..w {
                    data[(p * oh + y / k) * ow + x / k] += src[(p * h + y) * w + x];
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(&shape, data)?;
        Ok(Var::from_op(
            out,
            "avg_pool",
            &[self],
            Box::new(move |g, x, _| {
                let gd = g.data();
                let mut d = vec![T::zero(); x[0].numel()];
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(p * h + y) * w + xx] = gd[(p * oh + y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(x[0].shape(), d)?)])
            }),
        ))
    }
    /// Pads the last two axes by `(top, bottom, left, right)`.
    pub fn pad2d(&self, pads: [usize; 4], mode: PadMode) -> Result<Var<T>> {
        let (planes, h, w) = spatial_dims(self, "pad2d")?;
        let [top, bottom, left, right] = pads;
        if mode == PadMode::Reflect && (top.max(bottom) >= h || left.max(right) >= w) {
            return Err(invalid("pad2d", format!("reflect pad {pads:?} too large for {h}x{w}")));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let src_of = |o: usize, pad: usize, n: usize| -> Option<usize> {
            let i = o as isize - pad as isize;
            if i >= 0 && (i as usize) < n {
                Some(i as usize)
            } else if mode == PadMode::Reflect {
                Some(if i < 0 { (-i) as usize } else { 2 * (n - 1) - i as usize })
            } else {
                None
            }
        };
        let ymap: Vec<Option<usize>> = (0..oh).map(|o| src_of(o, top, h)).collect();
        let xmap: Vec<Option<usize>> = (0..ow).map(|o| src_of(o, left, w)).collect();
        let src = self.value().data();
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for (oy, sy) in ymap.iter().enumerate() {
                let Some(sy) = sy else { continue };
                for (ox, sx) in xmap.iter().enumerate() {
                    if let Some(sx) = sx {
                        data[(p * oh + oy) * ow + ox] = src[(p * h + sy) * w + sx];
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(&shape, data)?;
        Ok(Var::from_op(
            out,
            "pad2d",
            &[self],
            Box::new(move |g, x, _| {
                let gd = g.data();
                let mut d = vec![T::zero(); x[0].numel()];
                for p in 0..planes {
                    for (oy, sy) in ymap.iter().enumerate() {
                        let Some(sy) = sy else { continue };
                        for (ox, sx) in xmap.iter().enumerate() {
                            if let Some(sx) = sx {
                                d[(p * h + sy) * w + sx] += gd[(p * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
                Ok(vec![Some(Tensor::new(x[0].shape(), d)?)])
            }),
        ))
    }
}
