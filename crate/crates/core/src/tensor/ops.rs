use rand::Rng;

use super::{numel, Tensor};
use crate::error::{shape_err, Error, Result};

// ---------------------------------------------------------------------------
// broadcasting

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Element strides of `src` laid against `out`, zero on broadcast axes.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

type BinFn = fn(f64, f64) -> f64;

fn binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: BinFn,
    da: BinFn,
    db: BinFn,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
        drop((ad, bd));
        return Ok(Tensor::from_op(
            data,
            a.shape().to_vec(),
            op,
            vec![a.clone(), b.clone()],
            Box::new(move |g, _out, ins, needs| {
                let (ad, bd) = (ins[0].data(), ins[1].data());
                let ga = needs[0].then(|| {
                    g.iter().zip(ad.iter().zip(bd.iter())).map(|(g, (&x, &y))| g * da(x, y)).collect()
                });
                let gb = needs[1].then(|| {
                    g.iter().zip(ad.iter().zip(bd.iter())).map(|(g, (&x, &y))| g * db(x, y)).collect()
                });
                vec![ga, gb]
            }),
        ));
    }

    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; numel(&out_shape)];
    {
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    }
    let shape = out_shape.clone();
    Ok(Tensor::from_op(
        data,
        out_shape,
        op,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _out, ins, needs| {
            let (ad, bd) = (ins[0].data(), ins[1].data());
            let mut ga = needs[0].then(|| vec![0.0; ad.len()]);
            let mut gb = needs[1].then(|| vec![0.0; bd.len()]);
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += g[o] * da(ad[ia], bd[ib]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += g[o] * db(ad[ia], bd[ib]);
                }
            });
            vec![ga, gb]
        }),
    ))
}

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    // derivative given (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        op,
        vec![x.clone()],
        Box::new(move |g, out, ins, _| {
            let xd = ins[0].data();
            let gx = g
                .iter()
                .zip(xd.iter().zip(out))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        }),
    )
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_df(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn check_axis(t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::Axis { axis, rank: t.rank() });
    }
    Ok(())
}

/// (outer, len, inner) view of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        unary(self, "mul_scalar", |x| s * x, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, "add_scalar", |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        unary(self, "square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, "sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, "ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, "sigmoid", sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        unary(self, "silu", |x| x * sigmoid_f(x), |x, _| {
            let s = sigmoid_f(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor {
        unary(self, "gelu", gelu_f, |x, _| gelu_df(x))
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, "softplus", softplus_f, |x, _| sigmoid_f(x))
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![total],
            vec![1],
            "sum",
            vec![self.clone()],
            Box::new(move |g, _, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Mean along `axis`, keeping it as a size-1 dimension.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis(self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for k in 0..len {
                    let row = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                    let acc = &mut out[o * inner..(o + 1) * inner];
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Tensor::from_op(
            out,
            shape,
            "mean_axis",
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let dst = &mut gx[(o * len + k) * inner..(o * len + k + 1) * inner];
                        let src = &g[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * inv);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Biased (divide-by-n) variance along `axis`, keeping the dimension.
    pub fn var_axis(&self, axis: usize) -> Result<Tensor> {
        let mu = self.mean_axis(axis)?;
        self.sub(&mu)?.square().mean_axis(axis)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(self, axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| out[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (out[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |g, y, _, _| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let r = self.rank();
        let (m, n) = (self.dim(r - 2), self.dim(r - 1));
        let batch = self.numel() / (m * n);
        let transpose = move |src: &[f64], rows: usize, cols: usize| {
            let mut dst = vec![0.0; src.len()];
            for b in 0..batch {
                let (s, d) = (&src[b * rows * cols..], &mut dst[b * rows * cols..]);
                for i in 0..rows {
                    for j in 0..cols {
                        d[j * rows + i] = s[i * cols + j];
                    }
                }
            }
            dst
        };
        let data = transpose(&self.data(), m, n);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::from_op(
            data,
            shape,
            "transpose",
            vec![self.clone()],
            Box::new(move |g, _, _, _| vec![Some(transpose(g, n, m))]),
        ))
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`; batch
    /// dimensions must agree exactly.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || ra != rb || self.shape()[..ra - 2] != other.shape()[..rb - 2] {
            return shape_err(format!(
                "matmul shapes {:?} and {:?} are incompatible",
                self.shape(),
                other.shape()
            ));
        }
        let (m, k) = (self.dim(ra - 2), self.dim(ra - 1));
        let (k2, n) = (other.dim(rb - 2), other.dim(rb - 1));
        if k != k2 {
            return shape_err(format!("matmul inner dims {k} and {k2} differ"));
        }
        let batch = numel(&self.shape()[..ra - 2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (a, b) = (self.data(), other.data());
            for i in 0..batch {
                gemm(
                    m, k, n,
                    &a[i * m * k..], (k, 1),
                    &b[i * k * n..], (n, 1),
                    &mut out[i * m * n..], 0.0,
                );
            }
        }
        let mut shape = self.shape().to_vec();
        shape[ra - 1] = n;
        Ok(Tensor::from_op(
            out,
            shape,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, ins, needs| {
                let (a, b) = (ins[0].data(), ins[1].data());
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = dC B^T
                        gemm(
                            m, n, k,
                            &g[i * m * n..], (n, 1),
                            &b[i * k * n..], (1, n),
                            &mut ga[i * m * k..], 0.0,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        // dB = A^T dC
                        gemm(
                            k, m, n,
                            &a[i * m * k..], (1, k),
                            &g[i * m * n..], (n, 1),
                            &mut gb[i * k * n..], 0.0,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[B, C, H, W]` tensor.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        self.expect_rank(4, "upsample_nearest2x")?;
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * h2 * w2];
        {
            let d = self.data();
            for p in 0..b * c {
                let src = &d[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
                for y in 0..h2 {
                    for x in 0..w2 {
                        dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![b, c, h2, w2],
            "upsample_nearest2x",
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..h2 {
                        for x in 0..w2 {
                            dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Max pooling over square windows; padded cells never win.
    pub fn maxpool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
        self.expect_rank(4, "maxpool2d")?;
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::Geometry(format!(
                "maxpool k={kernel} s={stride} p={padding} on {h}x{w}"
            )));
        }
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let mut out = vec![0.0; b * c * ho * wo];
        let mut arg = vec![0usize; b * c * ho * wo];
        {
            let d = self.data();
            for p in 0..b * c {
                let base = p * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = usize::MAX;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let j = base + iy as usize * w + ix as usize;
                                if d[j] > best {
                                    best = d[j];
                                    at = j;
                                }
                            }
                        }
                        let o = (p * ho + oy) * wo + ox;
                        out[o] = best;
                        arg[o] = at;
                    }
                }
            }
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(
            out,
            vec![b, c, ho, wo],
            "maxpool2d",
            vec![self.clone()],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; n_in];
                for (o, &j) in arg.iter().enumerate() {
                    gx[j] += g[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&self, p: f64, train: bool, rng: &mut impl Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.numel()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            "dropout",
            vec![self.clone()],
            Box::new(move |g, _, _, _| vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())]),
        ))
    }

    /// Sum over all elements of the logistic loss
    /// `-(t log sigmoid(z) + (1 - t) log(1 - sigmoid(z)))`.
    pub fn bce_with_logits_sum(&self, targets: &[f64]) -> Result<Tensor> {
        if targets.len() != self.numel() {
            return shape_err(format!(
                "{} targets for {} logits",
                targets.len(),
                self.numel()
            ));
        }
        let total: f64 = self
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![total],
            vec![1],
            "bce_with_logits",
            vec![self.clone()],
            Box::new(move |g, _, ins, _| {
                let z = ins[0].data();
                let gz = z.iter().zip(&targets).map(|(&z, &t)| g[0] * (sigmoid_f(z) - t)).collect();
                vec![Some(gz)]
            }),
        ))
    }
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return shape_err("concat of zero tensors");
    };
    check_axis(first, axis)?;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        let same_other = same_rank
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same_other {
            return shape_err(format!(
                "concat along axis {axis}: {:?} does not match {:?}",
                p.shape(),
                first.shape()
            ));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    {
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &len) in datas.iter().zip(&lens) {
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        out,
        shape,
        "concat",
        parts.to_vec(),
        Box::new(move |g, _, _, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = needs
                .iter()
                .zip(&lens)
                .map(|(&n, &len)| n.then(|| Vec::with_capacity(outer * len * inner)))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gp, &len) in grads.iter_mut().zip(&lens) {
                    let chunk = len * inner;
                    if let Some(gp) = gp.as_mut() {
                        gp.extend_from_slice(&g[pos..pos + chunk]);
                    }
                    pos += chunk;
                }
            }
            grads
        }),
    ))
}

/// Splits `x` along `axis` into consecutive pieces of the given sizes.
pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    check_axis(x, axis)?;
    if sizes.iter().sum::<usize>() != x.dim(axis) || sizes.contains(&0) {
        return shape_err(format!(
            "split sizes {sizes:?} do not partition axis {axis} of {:?}",
            x.shape()
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut pieces = Vec::with_capacity(sizes.len());
    let mut start = 0;
    let d = x.data();
    for &size in sizes {
        let mut out = Vec::with_capacity(outer * size * inner);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            out.extend_from_slice(&d[from..from + size * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = size;
        let offset = start;
        pieces.push(Tensor::from_op(
            out,
            shape,
            "split",
            vec![x.clone()],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let to = (o * len + offset) * inner;
                    gx[to..to + size * inner]
                        .copy_from_slice(&g[o * size * inner..(o + 1) * size * inner]);
                }
                vec![Some(gx)]
            }),
        ));
        start += size;
    }
    Ok(pieces)
}

/// `c = a * b + beta * c` for row-major buffers with explicit (row, col)
/// strides on the operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n,
            1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}
