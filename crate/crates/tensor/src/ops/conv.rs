//! 2-D convolutions via im2col + GEMM, plus a direct depthwise kernel.

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    /// 1 (dense) or the channel count (depthwise).
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
            pad_mode: PadMode::Zeros,
        }
    }
}

impl ConvOpts {
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn pad_mode(mut self, m: PadMode) -> Self {
        self.pad_mode = m;
        self
    }
}

/// Geometry of a convolution reading a `[c, h, w]` image.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, o: &ConvOpts) -> Result<Self> {
        if o.stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * o.padding < kh || w + 2 * o.padding < kw {
            return Err(invalid("conv2d", format!("kernel {kh}x{kw} larger than padded {h}x{w}")));
        }
        if o.pad_mode == PadMode::Reflect && (o.padding >= h || o.padding >= w) {
            return Err(invalid("conv2d", "reflect padding must be smaller than the input"));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride: o.stride,
            pad: o.padding,
            mode: o.pad_mode,
            oh: (h + 2 * o.padding - kh) / o.stride + 1,
            ow: (w + 2 * o.padding - kw) / o.stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source index along an axis of length `n` for output `o` and tap `k`.
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self.mode {
            PadMode::Zeros => None,
            PadMode::Reflect => {
                let r = if i < 0 { -i } else { 2 * (n as isize - 1) - i };
                Some(r.clamp(0, n as isize - 1) as usize)
            }
        }
    }

    /// `maps[k][o]`: source index for tap `k` at output position `o`.
    fn maps(&self, taps: usize, outs: usize, n: usize) -> Vec<Vec<Option<usize>>> {
        (0..taps)
            .map(|k| (0..outs).map(|o| self.src(o, k, n)).collect())
            .collect()
    }
}

fn im2col<T: Scalar>(g: &Geom, x: &[T], col: &mut [T]) {
    let ohw = g.ohw();
    let ymap = g.maps(g.kh, g.oh, g.h);
    let xmap = g.maps(g.kw, g.ow, g.w);
    for ci in 0..g.c {
        let img = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match ymap[ky][oy] {
                        None => drow.fill(T::zero()),
                        Some(sy) => {
                            let srow = &img[sy * g.w..(sy + 1) * g.w];
                            for (d, sx) in drow.iter_mut().zip(&xmap[kx]) {
                                *d = match sx {
                                    Some(sx) => srow[*sx],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geom, col: &[T], x: &mut [T]) {
    let ohw = g.ohw();
    let ymap = g.maps(g.kh, g.oh, g.h);
    let xmap = g.maps(g.kw, g.ow, g.w);
    for ci in 0..g.c {
        let img = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let Some(sy) = ymap[ky][oy] else { continue };
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (v, sx) in srow.iter().zip(&xmap[kx]) {
                        if let Some(sx) = sx {
                            img[sy * g.w + sx] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn check_rank4<T: Scalar>(v: &Var<T>, op: &'static str) -> Result<[usize; 4]> {
    match v.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(invalid(op, format!("expected rank-4 tensor, got {s:?}"))),
    }
}

impl<T: Scalar> Var<T> {
    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&self, weight: &Var<T>, opts: ConvOpts) -> Result<Var<T>> {
        let [b, cin, h, w] = check_rank4(self, "conv2d")?;
        let [cout, wcin, kh, kw] = check_rank4(weight, "conv2d")?;
        if opts.groups == 1 {
            if wcin != cin {
                return Err(invalid("conv2d", format!("weight expects {wcin} channels, input has {cin}")));
            }
            dense_conv(self, weight, Geom::new(cin, h, w, kh, kw, &opts)?, b, cout)
        } else if opts.groups == cin && cout == cin && wcin == 1 {
            depthwise_conv(self, weight, Geom::new(cin, h, w, kh, kw, &opts)?, b)
        } else {
            Err(invalid("conv2d", "only dense or depthwise (groups == channels) convolutions are supported"))
        }
    }

    /// Transposed convolution with zero padding; weight is `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(&self, weight: &Var<T>, stride: usize, padding: usize) -> Result<Var<T>> {
        let [b, cin, h, w] = check_rank4(self, "conv_transpose2d")?;
        let [wcin, cout, kh, kw] = check_rank4(weight, "conv_transpose2d")?;
        if wcin != cin {
            return Err(invalid("conv_transpose2d", format!("weight expects {wcin} channels, input has {cin}")));
        }
        let out_h = ((h - 1) * stride + kh)
            .checked_sub(2 * padding)
            .ok_or_else(|| invalid("conv_transpose2d", "padding too large"))?;
        let out_w = ((w - 1) * stride + kw)
            .checked_sub(2 * padding)
            .ok_or_else(|| invalid("conv_transpose2d", "padding too large"))?;
        let opts = ConvOpts::default().stride(stride).padding(padding);
        // Geometry of the forward convolution this op is the adjoint of.
        let g = Geom::new(cout, out_h, out_w, kh, kw, &opts)?;
        debug_assert_eq!((g.oh, g.ow), (h, w));
        let (kk, hw) = (g.k(), h * w);
        let xd = self.value().data();
        let wd = weight.value().data();
        let mut out = vec![T::zero(); b * cout * out_h * out_w];
        let mut col = vec![T::zero(); kk * hw];
        for bi in 0..b {
            T::gemm(kk, cin, hw, T::one(), wd, 1, kk as isize, &xd[bi * cin * hw..(bi + 1) * cin * hw], hw as isize, 1, T::zero(), &mut col, hw as isize, 1);
            col2im(&g, &col, &mut out[bi * cout * out_h * out_w..(bi + 1) * cout * out_h * out_w]);
        }
        let out = Tensor::new(&[b, cout, out_h, out_w], out)?;
        Ok(Var::from_op(
            out,
            "conv_transpose2d",
            &[self, weight],
            Box::new(move |gy, x, _| {
                let (xd, wd, gd) = (x[0].data(), x[1].data(), gy.data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wd.len()];
                let mut col = vec![T::zero(); kk * hw];
                let osz = cout * out_h * out_w;
                for bi in 0..b {
                    im2col(&g, &gd[bi * osz..(bi + 1) * osz], &mut col);
                    let xb = &xd[bi * cin * hw..(bi + 1) * cin * hw];
                    T::gemm(cin, kk, hw, T::one(), wd, kk as isize, 1, &col, hw as isize, 1, T::zero(), &mut dx[bi * cin * hw..(bi + 1) * cin * hw], hw as isize, 1);
                    let beta = if bi == 0 { T::zero() } else { T::one() };
                    T::gemm(cin, hw, kk, T::one(), xb, hw as isize, 1, &col, 1, hw as isize, beta, &mut dw, kk as isize, 1);
                }
                Ok(vec![
                    Some(Tensor::new(x[0].shape(), dx)?),
                    Some(Tensor::new(x[1].shape(), dw)?),
                ])
            }),
        ))
    }
}

fn dense_conv<T: Scalar>(x: &Var<T>, weight: &Var<T>, g: Geom, b: usize, cout: usize) -> Result<Var<T>> {
    let (kk, ohw, isz) = (g.k(), g.ohw(), g.c * g.h * g.w);
    let xd = x.value().data();
    let wd = weight.value().data();
    let mut out = vec![T::zero(); b * cout * ohw];
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); kk * ohw] };
    for bi in 0..b {
        let xb = &xd[bi * isz..(bi + 1) * isz];
        let cols: &[T] = if g.pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut col);
            &col
        };
        T::gemm(cout, kk, ohw, T::one(), wd, kk as isize, 1, cols, ohw as isize, 1, T::zero(), &mut out[bi * cout * ohw..(bi + 1) * cout * ohw], ohw as isize, 1);
    }
    let out = Tensor::new(&[b, cout, g.oh, g.ow], out)?;
    Ok(Var::from_op(
        out,
        "conv2d",
        &[x, weight],
        Box::new(move |gy, inp, _| {
            let (xd, wd, gd) = (inp[0].data(), inp[1].data(), gy.data());
            let mut dx = vec![T::zero(); xd.len()];
            let mut dw = vec![T::zero(); wd.len()];
            let mut col = vec![T::zero(); if g.pointwise() { 0 } else { kk * ohw }];
            let mut dcol = vec![T::zero(); if g.pointwise() { 0 } else { kk * ohw }];
            for bi in 0..b {
                let xb = &xd[bi * isz..(bi + 1) * isz];
                let gb = &gd[bi * cout * ohw..(bi + 1) * cout * ohw];
                let beta = if bi == 0 { T::zero() } else { T::one() };
                if g.pointwise() {
                    T::gemm(cout, ohw, kk, T::one(), gb, ohw as isize, 1, xb, 1, ohw as isize, beta, &mut dw, kk as isize, 1);
                    T::gemm(kk, cout, ohw, T::one(), wd, 1, kk as isize, gb, ohw as isize, 1, T::zero(), &mut dx[bi * isz..(bi + 1) * isz], ohw as isize, 1);
                } else {
                    im2col(&g, xb, &mut col);
                    T::gemm(cout, ohw, kk, T::one(), gb, ohw as isize, 1, &col, 1, ohw as isize, beta, &mut dw, kk as isize, 1);
                    T::gemm(kk, cout, ohw, T::one(), wd, 1, kk as isize, gb, ohw as isize, 1, T::zero(), &mut dcol, ohw as isize, 1);
                    col2im(&g, &dcol, &mut dx[bi * isz..(bi + 1) * isz]);
                }
            }
            Ok(vec![
                Some(Tensor::new(inp[0].shape(), dx)?),
                Some(Tensor::new(inp[1].shape(), dw)?),
            ])
        }),
    ))
}

fn depthwise_conv<T: Scalar>(x: &Var<T>, weight: &Var<T>, g: Geom, b: usize) -> Result<Var<T>> {
    let (hw, ohw, taps) = (g.h * g.w, g.ohw(), g.kh * g.kw);
    let ymap = g.maps(g.kh, g.oh, g.h);
    let xmap = g.maps(g.kw, g.ow, g.w);
    let xd = x.value().data();
    let wd = weight.value().data();
    let mut out = vec![T::zero(); b * g.c * ohw];
    for bc in 0..b * g.c {
        let c = bc % g.c;
        let img = &xd[bc * hw..(bc + 1) * hw];
        let dst = &mut out[bc * ohw..(bc + 1) * ohw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let wv = wd[c * taps + ky * g.kw + kx];
                for oy in 0..g.oh {
                    let Some(sy) = ymap[ky][oy] else { continue };
                    let srow = &img[sy * g.w..(sy + 1) * g.w];
                    for (d, sx) in dst[oy * g.ow..(oy + 1) * g.ow].iter_mut().zip(&xmap[kx]) {
                        if let Some(sx) = sx {
                            *d += wv * srow[*sx];
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[b, g.c, g.oh, g.ow], out)?;
    Ok(Var::from_op(
        out,
        "depthwise_conv2d",
        &[x, weight],
        Box::new(move |gy, inp, _| {
            let (xd, wd, gd) = (inp[0].data(), inp[1].data(), gy.data());
            let mut dx = vec![T::zero(); xd.len()];
            let mut dw = vec![T::zero(); wd.len()];
            for bc in 0..b * g.c {
                let c = bc % g.c;
                let img = &xd[bc * hw..(bc + 1) * hw];
                let gimg = &gd[bc * ohw..(bc + 1) * ohw];
                let dimg = &mut dx[bc * hw..(bc + 1) * hw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = c * taps + ky * g.kw + kx;
                        let wv = wd[widx];
                        let mut acc = T::zero();
                        for oy in 0..g.oh {
                            let Some(sy) = ymap[ky][oy] else { continue };
                            let grow = &gimg[oy * g.ow..(oy + 1) * g.ow];
                            for (gv, sx) in grow.iter().zip(&xmap[kx]) {
                                if let Some(sx) = sx {
                                    acc += *gv * img[sy * g.w + sx];
                                    dimg[sy * g.w + sx] += *gv * wv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
            Ok(vec![
                Some(Tensor::new(inp[0].shape(), dx)?),
                Some(Tensor::new(inp[1].shape(), dw)?),
            ])
        }),
    ))
}
