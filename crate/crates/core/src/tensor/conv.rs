use std::cell::RefCell;

use super::ops::gemm;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec { stride, padding, groups }
    }

    /// Stride 1, "same" padding for an odd kernel, no grouping.
    pub const fn same(kernel: usize) -> Self {
        Conv2dSpec { stride: 1, padding: kernel / 2, groups: 1 }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return Err(Error::Geometry(format!(
                "kernel {kernel} with padding {} and stride {} does not fit input of size {input}",
                self.padding, self.stride
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn ckk(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn hwo(&self) -> usize {
        self.ho * self.wo
    }
    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// 2-D cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin/groups, kh, kw]`.
///
/// Output size follows `floor((H + 2p - k) / s) + 1`; kernels must be odd.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: Conv2dSpec,
) -> Result<Tensor> {
    input.expect_rank(4, "conv2d input")?;
    weight.expect_rank(4, "conv2d weight")?;
    let (batch, cin, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (cout, wc, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    let groups = spec.groups;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return shape_err(format!(
            "channels in={cin} out={cout} not divisible by groups={groups}"
        ));
    }
    if wc != cin / groups {
        return shape_err(format!(
            "weight expects {wc} input channels per group, input provides {}",
            cin / groups
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Geometry(format!("kernel {kh}x{kw} must be odd")));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return shape_err(format!("bias has {} entries for {cout} channels", b.numel()));
        }
    }
    let g = Geometry {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: spec.output_size(h, kh)?,
        wo: spec.output_size(w, kw)?,
        stride: spec.stride,
        pad: spec.padding,
        groups,
    };

    let mut out = vec![0.0; batch * cout * g.hwo()];
    {
        let x = input.data();
        let wt = weight.data();
        if g.is_depthwise() {
            depthwise_forward(&g, &x, &wt, &mut out);
        } else {
            dense_forward(&g, &x, &wt, &mut out);
        }
        if let Some(b) = bias {
            let bd = b.data();
            let hwo = g.hwo();
            for n in 0..batch {
                for c in 0..cout {
                    let at = (n * cout + c) * hwo;
                    out[at..at + hwo].iter_mut().for_each(|v| *v += bd[c]);
                }
            }
        }
    }

    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        out,
        vec![batch, cout, g.ho, g.wo],
        "conv2d",
        inputs,
        Box::new(move |gout, _, ins, needs| {
            let x = ins[0].data();
            let wt = ins[1].data();
            let (mut gx, mut gw) = (None, None);
            if g.is_depthwise() {
                depthwise_backward(&g, &x, &wt, gout, needs[0], needs[1], &mut gx, &mut gw);
            } else {
                dense_backward(&g, &x, &wt, gout, needs[0], needs[1], &mut gx, &mut gw);
            }
            let mut grads = vec![gx, gw];
            if ins.len() == 3 {
                let gb = needs[2].then(|| {
                    let hwo = g.hwo();
                    let mut gb = vec![0.0; g.cout];
                    for n in 0..g.batch {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let at = (n * g.cout + c) * hwo;
                            *acc += gout[at..at + hwo].iter().sum::<f64>();
                        }
                    }
                    gb
                });
                grads.push(gb);
            }
            grads
        }),
    ))
}

fn im2col(g: &Geometry, x: &[f64], cols: &mut [f64]) {
    let (kh, kw, ho, wo) = (g.kh, g.kw, g.ho, g.wo);
    let (h, w) = (g.h, g.w);
    for c in 0..g.cin_g() {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((c * kh + ky) * kw + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[f64], gx: &mut [f64]) {
    let (kh, kw, ho, wo) = (g.kh, g.kw, g.ho, g.wo);
    let (h, w) = (g.h, g.w);
    for c in 0..g.cin_g() {
        let plane = &mut gx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((c * kh + ky) * kw + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dense_forward(g: &Geometry, x: &[f64], wt: &[f64], out: &mut [f64]) {
    let (cin_g, cout_g, ckk, hwo) = (g.cin_g(), g.cout_g(), g.ckk(), g.hwo());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * hwo] };
    for n in 0..g.batch {
        for grp in 0..g.groups {
            let xin = &x[(n * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
            let src: &[f64] = if g.is_pointwise() {
                xin
            } else {
                im2col(g, xin, &mut cols);
                &cols
            };
            let wg = &wt[grp * cout_g * ckk..(grp + 1) * cout_g * ckk];
            let o = &mut out[(n * g.cout + grp * cout_g) * hwo..][..cout_g * hwo];
            gemm(cout_g, ckk, hwo, wg, (ckk, 1), src, (hwo, 1), o, 0.0);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    g: &Geometry,
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    need_x: bool,
    need_w: bool,
    gx: &mut Option<Vec<f64>>,
    gw: &mut Option<Vec<f64>>,
) {
    let (cin_g, cout_g, ckk, hwo) = (g.cin_g(), g.cout_g(), g.ckk(), g.hwo());
    let plane = g.h * g.w;
    if need_w {
        let mut acc = vec![0.0; g.cout * ckk];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; ckk * hwo] };
        for n in 0..g.batch {
            for grp in 0..g.groups {
                let xin = &x[(n * g.cin + grp * cin_g) * plane..][..cin_g * plane];
                let src: &[f64] = if g.is_pointwise() {
                    xin
                } else {
                    im2col(g, xin, &mut cols);
                    &cols
                };
                let go = &gout[(n * g.cout + grp * cout_g) * hwo..][..cout_g * hwo];
                // dW_g += dOut_g [cout_g x hwo] * cols^T [hwo x ckk]
                let dst = &mut acc[grp * cout_g * ckk..(grp + 1) * cout_g * ckk];
                gemm(cout_g, hwo, ckk, go, (hwo, 1), src, (1, hwo), dst, 1.0);
            }
        }
        *gw = Some(acc);
    }
    if need_x {
        let mut acc = vec![0.0; g.batch * g.cin * plane];
        let mut dcols = vec![0.0; ckk * hwo];
        for n in 0..g.batch {
            for grp in 0..g.groups {
                let go = &gout[(n * g.cout + grp * cout_g) * hwo..][..cout_g * hwo];
                let wg = &wt[grp * cout_g * ckk..(grp + 1) * cout_g * ckk];
                let dst = &mut acc[(n * g.cin + grp * cin_g) * plane..][..cin_g * plane];
                if g.is_pointwise() {
                    // dX = W^T dOut
                    gemm(ckk, cout_g, hwo, wg, (1, ckk), go, (hwo, 1), dst, 0.0);
                } else {
                    gemm(ckk, cout_g, hwo, wg, (1, ckk), go, (hwo, 1), &mut dcols, 0.0);
                    col2im(g, &dcols, dst);
                }
            }
        }
        *gx = Some(acc);
    }
}

fn depthwise_forward(g: &Geometry, x: &[f64], wt: &[f64], out: &mut [f64]) {
    let (h, w, ho, wo, kh, kw) = (g.h, g.w, g.ho, g.wo, g.kh, g.kw);
    for n in 0..g.batch {
        for c in 0..g.cin {
            let src = &x[(n * g.cin + c) * h * w..][..h * w];
            let k = &wt[c * kh * kw..(c + 1) * kh * kw];
            let dst = &mut out[(n * g.cout + c) * ho * wo..][..ho * wo];
            for oy in 0..ho {
                for ky in 0..kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..kw {
                        let kv = k[ky * kw + kx];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] += kv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    g: &Geometry,
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    need_x: bool,
    need_w: bool,
    gx: &mut Option<Vec<f64>>,
    gw: &mut Option<Vec<f64>>,
) {
    let (h, w, ho, wo, kh, kw) = (g.h, g.w, g.ho, g.wo, g.kh, g.kw);
    let mut ax = need_x.then(|| vec![0.0; g.batch * g.cin * h * w]);
    let mut aw = need_w.then(|| vec![0.0; g.cout * kh * kw]);
    for n in 0..g.batch {
        for c in 0..g.cin {
            let src = &x[(n * g.cin + c) * h * w..][..h * w];
            let go = &gout[(n * g.cout + c) * ho * wo..][..ho * wo];
            let k = &wt[c * kh * kw..(c + 1) * kh * kw];
            for oy in 0..ho {
                for ky in 0..kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..kw {
                        let mut wacc = 0.0;
                        let kv = k[ky * kw + kx];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gv = go[oy * wo + ox];
                            wacc += gv * src[iy * w + ix as usize];
                            if let Some(ax) = ax.as_mut() {
                                ax[(n * g.cin + c) * h * w + iy * w + ix as usize] += gv * kv;
                            }
                        }
                        if let Some(aw) = aw.as_mut() {
                            aw[c * kh * kw + ky * kw + kx] += wacc;
                        }
                    }
                }
            }
        }
    }
    *gx = ax;
    *gw = aw;
}

/// Running statistics of a batch-norm layer.
#[derive(Debug)]
pub struct BatchNormState {
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            running_mean: RefCell::new(vec![0.0; channels]),
            running_var: RefCell::new(vec![1.0; channels]),
            momentum,
            eps,
        }
    }
}

/// Per-channel batch normalization of `[B, C, H, W]`.
///
/// In training mode batch statistics are used and the running estimates are
/// updated with `momentum`; in eval mode the layer is the affine map
/// `gamma * (x - mean) / sqrt(var + eps) + beta` over the running estimates.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &BatchNormState,
    train: bool,
) -> Result<Tensor> {
    x.expect_rank(4, "batch_norm")?;
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if gamma.numel() != c || beta.numel() != c || state.running_mean.borrow().len() != c {
        return shape_err(format!("batch_norm parameters do not match {c} channels"));
    }
    let hw = h * w;
    let count = b * hw;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());

    let (mean, var) = if train {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for n in 0..b {
                s += xd[(n * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for n in 0..b {
                v += xd[(n * c + ch) * hw..][..hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        let mut rm = state.running_mean.borrow_mut();
        let mut rv = state.running_var.borrow_mut();
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for ch in 0..c {
            rm[ch] = (1.0 - state.momentum) * rm[ch] + state.momentum * mean[ch];
            rv[ch] = (1.0 - state.momentum) * rv[ch] + state.momentum * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (state.running_mean.borrow().clone(), state.running_var.borrow().clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();

    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for n in 0..b {
        for ch in 0..c {
            let at = (n * c + ch) * hw;
            for i in at..at + hw {
                let v = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                out[i] = gd[ch] * v + bd[ch];
            }
        }
    }
    drop((xd, gd, bd));

    Ok(Tensor::from_op(
        out,
        vec![b, c, h, w],
        if train { "batch_norm_train" } else { "batch_norm_eval" },
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, ins, needs| {
            let gamma = ins[1].data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for n in 0..b {
                for ch in 0..c {
                    let at = (n * c + ch) * hw;
                    for i in at..at + hw {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; g.len()];
                let nf = count as f64;
                for n in 0..b {
                    for ch in 0..c {
                        let at = (n * c + ch) * hw;
                        let k = gamma[ch] * inv_std[ch];
                        for i in at..at + hw {
                            gx[i] = if train {
                                k * (g[i] - sum_g[ch] / nf - xhat[i] * sum_gx[ch] / nf)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                gx
            });
            vec![gx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
        }),
    ))
}
