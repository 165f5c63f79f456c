//! Forward ops and their backward closures.
//!
//! Per-op shape rules are documented on each method. Every op records a graph
//! node when any input is connected to a `requires_grad` leaf; otherwise the
//! result is a plain value. In debug builds, NaN inputs are rejected.

use super::kernels::{self, ConvShape, WarpMatrix};
use super::{BackwardFn, Node, Tensor, TensorError, TensorResult};

impl Tensor {
    fn with_node(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let live = parents.iter().any(|p| p.live());
        if live {
            Tensor::from_parts(shape, data, false, Some(Node { parents, backward }))
        } else {
            Tensor::from_parts(shape, data, false, None)
        }
    }
}

#[cfg(debug_assertions)]
fn check_nan(op: &'static str, inputs: &[&Tensor]) -> TensorResult<()> {
    for t in inputs {
        if t.with_data(|d| d.iter().any(|v| v.is_nan())) {
            return Err(TensorError::NanInput { op });
        }
    }
    Ok(())
}

#[cfg(not(debug_assertions))]
fn check_nan(_op: &'static str, _inputs: &[&Tensor]) -> TensorResult<()> {
    Ok(())
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn is_scalar(t: &Tensor) -> bool {
    t.len() == 1
}

/// Elementwise binary op with optional scalar broadcast on either side.
fn ew_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    // (grad_out, a_val, b_val) -> (grad_a, grad_b)
    df: impl Fn(f64, f64, f64) -> (f64, f64) + Send + Sync + 'static,
) -> TensorResult<Tensor> {
    check_nan(op, &[a, b])?;
    let same = a.shape() == b.shape();
    if !same && !is_scalar(a) && !is_scalar(b) {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (n, shape) = if is_scalar(a) && !same {
        (b.len(), b.shape().to_vec())
    } else {
        (a.len(), a.shape().to_vec())
    };
    let out = a.with_data(|ad| {
        b.with_data(|bd| {
            (0..n)
                .map(|i| f(ad[if ad.len() == 1 { 0 } else { i }], bd[if bd.len() == 1 { 0 } else { i }]))
                .collect::<Vec<f64>>()
        })
    });
    let (ac, bc) = (a.clone(), b.clone());
    let backward: BackwardFn = Box::new(move |g: &[f64]| {
        let (mut ga, mut gb) = (vec![0.0; ac.len()], vec![0.0; bc.len()]);
        ac.with_data(|ad| {
            bc.with_data(|bd| {
                for (i, &gi) in g.iter().enumerate() {
                    let ia = if ad.len() == 1 { 0 } else { i };
                    let ib = if bd.len() == 1 { 0 } else { i };
                    let (da, db) = df(gi, ad[ia], bd[ib]);
                    ga[ia] += da;
                    gb[ib] += db;
                }
            })
        });
        if ac.live() {
            ac.accumulate_grad_owned(ga);
        }
        if bc.live() {
            bc.accumulate_grad_owned(gb);
        }
    });
    Ok(Tensor::with_node(shape, out, vec![a.clone(), b.clone()], backward))
}

fn ew_unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    // (grad_out, x_val) -> grad_x
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> TensorResult<Tensor> {
    check_nan(op, &[x])?;
    let out = x.with_data(|d| d.iter().map(|&v| f(v)).collect::<Vec<f64>>());
    let xc = x.clone();
    let backward: BackwardFn = Box::new(move |g: &[f64]| {
        if !xc.live() {
            return;
        }
        let gx = xc.with_data(|d| {
            g.iter().zip(d.iter()).map(|(&gi, &xi)| df(gi, xi)).collect::<Vec<f64>>()
        });
        xc.accumulate_grad_owned(gx);
    });
    Ok(Tensor::with_node(x.shape().to_vec(), out, vec![x.clone()], backward))
}

impl Tensor {
    // ── elementwise ─────────────────────────────────────────────────────────

    /// Elementwise sum. Shapes must match, or either side may be scalar.
    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        ew_binary("add", self, other, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        ew_binary("sub", self, other, |a, b| a - b, |g, _, _| (g, -g))
    }

    /// Elementwise product. Shapes must match, or either side may be scalar.
    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        ew_binary("mul", self, other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> TensorResult<Tensor> {
        ew_unary("scale", self, |v| c * v, move |g, _| c * g)
    }

    pub fn relu(&self) -> TensorResult<Tensor> {
        ew_unary("relu", self, |v| v.max(0.0), |g, x| if x > 0.0 { g } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> TensorResult<Tensor> {
        ew_unary(
            "leaky_relu",
            self,
            move |v| if v > 0.0 { v } else { slope * v },
            move |g, x| if x > 0.0 { g } else { slope * g },
        )
    }

    pub fn sigmoid(&self) -> TensorResult<Tensor> {
        fn sig(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        ew_unary("sigmoid", self, sig, |g, x| {
            let s = sig(x);
            g * s * (1.0 - s)
        })
    }

    /// Numerically stable ln(1 + eˣ).
    pub fn softplus(&self) -> TensorResult<Tensor> {
        fn sig(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        ew_unary(
            "softplus",
            self,
            |v| v.max(0.0) + (-v.abs()).exp().ln_1p(),
            |g, x| g * sig(x),
        )
    }

    // ── shape plumbing ──────────────────────────────────────────────────────

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        let xc = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if xc.live() {
                xc.accumulate_grad(g);
            }
        });
        Ok(Tensor::with_node(shape.to_vec(), self.data(), vec![self.clone()], backward))
    }

    /// Concatenate along `axis`. All parts must agree on the other dims.
    pub fn concat(parts: &[Tensor], axis: usize) -> TensorResult<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat", detail: "no inputs".into() });
        }
        let nd = parts[0].shape().len();
        if axis >= nd {
            return Err(TensorError::InvalidArg {
                op: "concat",
                detail: format!("axis {axis} out of range for ndim {nd}"),
            });
        }
        for p in parts {
            if p.shape().len() != nd {
                return Err(shape_err("concat", "rank mismatch".into()));
            }
            for d in 0..nd {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(shape_err(
                        "concat",
                        format!("{:?} vs {:?} at dim {d}", p.shape(), parts[0].shape()),
                    ));
                }
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total_ax = shape[axis];

        let mut out = vec![0.0; outer * total_ax * inner];
        let mut off = 0;
        for p in parts {
            let ax = p.shape()[axis];
            p.with_data(|d| {
                for o in 0..outer {
                    let src = &d[o * ax * inner..(o + 1) * ax * inner];
                    let dst = &mut out[(o * total_ax + off) * inner..(o * total_ax + off + ax) * inner];
                    dst.copy_from_slice(src);
                }
            });
            off += ax;
        }

        let parents: Vec<Tensor> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let pclone = parents.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let mut off = 0;
            for (p, &ax) in pclone.iter().zip(&sizes) {
                if p.live() {
                    let mut gp = vec![0.0; p.len()];
                    for o in 0..outer {
                        let src = &g[(o * total_ax + off) * inner..(o * total_ax + off + ax) * inner];
                        gp[o * ax * inner..(o + 1) * ax * inner].copy_from_slice(src);
                    }
                    p.accumulate_grad_owned(gp);
                }
                off += ax;
            }
        });
        Ok(Tensor::with_node(shape, out, parents, backward))
    }

    /// Pick index `i` along `axis`, removing that axis.
    pub fn select(&self, axis: usize, i: usize) -> TensorResult<Tensor> {
        let nd = self.shape().len();
        if axis >= nd || i >= self.shape()[axis] {
            return Err(TensorError::InvalidArg {
                op: "select",
                detail: format!("axis {axis} index {i} on shape {:?}", self.shape()),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let ax = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut out = vec![0.0; outer * inner];
        self.with_data(|d| {
            for o in 0..outer {
                out[o * inner..(o + 1) * inner]
                    .copy_from_slice(&d[(o * ax + i) * inner..(o * ax + i + 1) * inner]);
            }
        });
        let xc = self.clone();
        let xlen = self.len();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if !xc.live() {
                return;
            }
            let mut gx = vec![0.0; xlen];
            for o in 0..outer {
                gx[(o * ax + i) * inner..(o * ax + i + 1) * inner]
                    .copy_from_slice(&g[o * inner..(o + 1) * inner]);
            }
            xc.accumulate_grad_owned(gx);
        });
        Ok(Tensor::with_node(shape, out, vec![self.clone()], backward))
    }

    // ── broadcasting helpers ────────────────────────────────────────────────

    /// Add a 1-d bias along `axis`: `bias.len() == shape[axis]`.
    pub fn bias_add(&self, bias: &Tensor, axis: usize) -> TensorResult<Tensor> {
        check_nan("bias_add", &[self, bias])?;
        let nd = self.shape().len();
        if axis >= nd || bias.shape().len() != 1 || bias.len() != self.shape()[axis] {
            return Err(shape_err(
                "bias_add",
                format!("x {:?}, bias {:?}, axis {axis}", self.shape(), bias.shape()),
            ));
        }
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let ax = self.shape()[axis];
        let out = self.with_data(|d| {
            bias.with_data(|b| {
                d.iter()
                    .enumerate()
                    .map(|(i, &v)| v + b[(i / inner) % ax])
                    .collect::<Vec<f64>>()
            })
        });
        let (xc, bc) = (self.clone(), bias.clone());
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if xc.live() {
                xc.accumulate_grad(g);
            }
            if bc.live() {
                let mut gb = vec![0.0; ax];
                for (i, &gi) in g.iter().enumerate() {
                    gb[(i / inner) % ax] += gi;
                }
                bc.accumulate_grad_owned(gb);
            }
        });
        Ok(Tensor::with_node(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            backward,
        ))
    }

    /// Multiply every trailing [h,w] map by a fixed (non-differentiable) map.
    pub fn mul_map(&self, map: &[f64]) -> TensorResult<Tensor> {
        check_nan("mul_map", &[self])?;
        let nd = self.shape().len();
        if nd < 2 {
            return Err(shape_err("mul_map", format!("need ndim >= 2, got {:?}", self.shape())));
        }
        let plane = self.shape()[nd - 2] * self.shape()[nd - 1];
        if map.len() != plane {
            return Err(shape_err(
                "mul_map",
                format!("map len {} vs plane {}", map.len(), plane),
            ));
        }
        let out = self.with_data(|d| {
            d.iter()
                .enumerate()
                .map(|(i, &v)| v * map[i % plane])
                .collect::<Vec<f64>>()
        });
        let xc = self.clone();
        let mapc = map.to_vec();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if !xc.live() {
                return;
            }
            let gx: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * mapc[i % plane]).collect();
            xc.accumulate_grad_owned(gx);
        });
        Ok(Tensor::with_node(self.shape().to_vec(), out, vec![self.clone()], backward))
    }

    // ── linear algebra ──────────────────────────────────────────────────────

    /// Matrix product: [m,k] @ [k,n] → [m,n].
    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        check_nan("matmul", &[self, other])?;
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} @ {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut out = vec![0.0; m * n];
        self.with_data(|a| other.with_data(|b| kernels::matmul_nn(a, b, &mut out, m, k, n)));
        let (ac, bc) = (self.clone(), other.clone());
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if ac.live() {
                let mut ga = vec![0.0; m * k];
                bc.with_data(|b| kernels::matmul_nt(g, b, &mut ga, m, n, k));
                ac.accumulate_grad_owned(ga);
            }
            if bc.live() {
                let mut gb = vec![0.0; k * n];
                ac.with_data(|a| kernels::matmul_tn(a, g, &mut gb, k, m, n));
                bc.accumulate_grad_owned(gb);
            }
        });
        Ok(Tensor::with_node(vec![m, n], out, vec![self.clone(), other.clone()], backward))
    }

    /// 2-d convolution, stride 1, zero padding `pad`.
    /// x: [b,ci,h,w], weight: [co,ci,kh,kw], bias: [co].
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> TensorResult<Tensor> {
        check_nan("conv2d", &[self, weight])?;
        if let Some(b) = bias {
            check_nan("conv2d", &[b])?;
        }
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", format!("x {:?}, weight {:?}", xs, ws)));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} vs cout {}", b.shape(), ws[0]),
                ));
            }
        }
        let s = ConvShape {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            pad,
        };
        if s.h + 2 * s.pad < s.kh || s.w + 2 * s.pad < s.kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", s.kh, s.kw, s.h + 2 * pad, s.w + 2 * pad),
            ));
        }
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut out = vec![0.0; s.batch * s.cout * oh * ow];
        self.with_data(|x| {
            weight.with_data(|w| match bias {
                Some(b) => b.with_data(|bb| kernels::conv2d_forward(x, w, Some(bb), &mut out, s)),
                None => kernels::conv2d_forward(x, w, None, &mut out, s),
            })
        });

        let xc = self.clone();
        let wc = weight.clone();
        let bc = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if xc.live() {
                let mut gx = vec![0.0; xc.len()];
                wc.with_data(|w| kernels::conv2d_backward_input(g, w, &mut gx, s));
                xc.accumulate_grad_owned(gx);
            }
            let need_w = wc.live();
            let need_b = bc.as_ref().map(|b| b.live()).unwrap_or(false);
            if need_w || need_b {
                let mut gw = vec![0.0; wc.len()];
                let mut gb = bc.as_ref().map(|b| vec![0.0; b.len()]);
                xc.with_data(|x| {
                    kernels::conv2d_backward_weight(x, g, &mut gw, gb.as_deref_mut(), s)
                });
                if need_w {
                    wc.accumulate_grad(&gw);
                }
                if need_b {
                    if let (Some(b), Some(gb)) = (&bc, &gb) {
                        b.accumulate_grad(gb);
                    }
                }
            }
        });
        Ok(Tensor::with_node(vec![s.batch, s.cout, oh, ow], out, parents, backward))
    }

    /// Nearest-neighbor ×2 upsample of [.., h, w].
    pub fn nearest_upsample2(&self) -> TensorResult<Tensor> {
        check_nan("nearest_upsample2", &[self])?;
        let nd = self.shape().len();
        if nd < 2 {
            return Err(shape_err("nearest_upsample2", format!("{:?}", self.shape())));
        }
        let (h, w) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        let n_maps = self.len() / (h * w);
        let mut shape = self.shape().to_vec();
        shape[nd - 2] = 2 * h;
        shape[nd - 1] = 2 * w;
        let mut out = vec![0.0; self.len() * 4];
        self.with_data(|d| kernels::upsample2_forward(d, &mut out, n_maps, h, w));
        let xc = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if !xc.live() {
                return;
            }
            let mut gx = vec![0.0; xc.len()];
            kernels::upsample2_backward(g, &mut gx, n_maps, h, w);
            xc.accumulate_grad_owned(gx);
        });
        Ok(Tensor::with_node(shape, out, vec![self.clone()], backward))
    }

    /// 2×2 average pooling of [.., h, w]; h and w must be even.
    pub fn avg_pool2(&self) -> TensorResult<Tensor> {
        check_nan("avg_pool2", &[self])?;
        let nd = self.shape().len();
        if nd < 2 {
            return Err(shape_err("avg_pool2", format!("{:?}", self.shape())));
        }
        let (h, w) = (self.shape()[nd - 2], self.shape()[nd - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("odd spatial dims {h}x{w}")));
        }
        let n_maps = self.len() / (h * w);
        let mut shape = self.shape().to_vec();
        shape[nd - 2] = h / 2;
        shape[nd - 1] = w / 2;
        let mut out = vec![0.0; self.len() / 4];
        self.with_data(|d| kernels::avg_pool2_forward(d, &mut out, n_maps, h, w));
        let xc = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if !xc.live() {
                return;
            }
            let mut gx = vec![0.0; xc.len()];
            kernels::avg_pool2_backward(g, &mut gx, n_maps, h, w);
            xc.accumulate_grad_owned(gx);
        });
        Ok(Tensor::with_node(shape, out, vec![self.clone()], backward))
    }

    // ── per-map softmax / normalization ─────────────────────────────────────

    /// Softmax of `beta * values` over each trailing [h,w] map.
    pub fn spatial_softmax(&self, beta: f64) -> TensorResult<Tensor> {
        check_nan("spatial_softmax", &[self])?;
        if beta <= 0.0 {
            return Err(TensorError::InvalidArg {
                op: "spatial_softmax",
                detail: format!("beta must be > 0, got {beta}"),
            });
        }
        let nd = self.shape().len();
        if nd < 2 {
            return Err(shape_err("spatial_softmax", format!("{:?}", self.shape())));
        }
        let plane = self.shape()[nd - 2] * self.shape()[nd - 1];
        let n_maps = self.len() / plane;
        let mut out = vec![0.0; self.len()];
        self.with_data(|d| {
            for m in 0..n_maps {
                let src = &d[m * plane..(m + 1) * plane];
                let dst = &mut out[m * plane..(m + 1) * plane];
                let mx = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (o, &v) in dst.iter_mut().zip(src) {
                    let e = (beta * (v - mx)).exp();
                    *o = e;
                    z += e;
                }
                for o in dst.iter_mut() {
                    *o /= z;
                }
            }
        });
        let xc = self.clone();
        let soft = out.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if !xc.live() {
                return;
            }
            let mut gx = vec![0.0; soft.len()];
            for m in 0..n_maps {
                let s = &soft[m * plane..(m + 1) * plane];
                let gm = &g[m * plane..(m + 1) * plane];
                let dot: f64 = s.iter().zip(gm).map(|(a, b)| a * b).sum();
                for ((o, &si), &gi) in gx[m * plane..(m + 1) * plane].iter_mut().zip(s).zip(gm) {
                    *o = beta * si * (gi - dot);
                }
            }
            xc.accumulate_grad_owned(gx);
        });
        Ok(Tensor::with_node(self.shape().to_vec(), out, vec![self.clone()], backward))
    }

    /// Normalize slices along `axis` to unit L2 norm. The divisor is
    /// max(norm, 1e-12), so near-zero inputs stay near zero instead of NaN.
    pub fn l2_normalize(&self, axis: usize) -> TensorResult<Tensor> {
        check_nan("l2_normalize", &[self])?;
        const FLOOR: f64 = 1e-12;
        let nd = self.shape().len();
        if axis >= nd {
            return Err(TensorError::InvalidArg {
                op: "l2_normalize",
                detail: format!("axis {axis} on shape {:?}", self.shape()),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let ax = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; self.len()];
        self.with_data(|d| {
            for o in 0..outer {
                for i in 0..inner {
                    let mut nrm = 0.0;
                    for j in 0..ax {
                        let v = d[(o * ax + j) * inner + i];
                        nrm += v * v;
                    }
                    let nrm = nrm.sqrt().max(FLOOR);
                    for j in 0..ax {
                        let idx = (o * ax + j) * inner + i;
                        out[idx] = d[idx] / nrm;
                    }
                }
            }
        });
        let xc = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if !xc.live() {
                return;
            }
            let mut gx = vec![0.0; xc.len()];
            xc.with_data(|d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut nrm = 0.0;
                        for j in 0..ax {
                            let v = d[(o * ax + j) * inner + i];
                            nrm += v * v;
                        }
                        let raw = nrm.sqrt();
                        let nrm = raw.max(FLOOR);
                        if raw <= FLOOR {
                            // clamped: constant divisor
                            for j in 0..ax {
                                let idx = (o * ax + j) * inner + i;
                                gx[idx] = g[idx] / nrm;
                            }
                        } else {
                            let mut dot = 0.0;
                            for j in 0..ax {
                                let idx = (o * ax + j) * inner + i;
                                dot += g[idx] * d[idx] / nrm;
                            }
                            for j in 0..ax {
                                let idx = (o * ax + j) * inner + i;
                                gx[idx] = (g[idx] - d[idx] / nrm * dot) / nrm;
                            }
                        }
                    }
                }
            });
            xc.accumulate_grad_owned(gx);
        });
        Ok(Tensor::with_node(self.shape().to_vec(), out, vec![self.clone()], backward))
    }

    // ── reductions ──────────────────────────────────────────────────────────

    pub fn sum(&self) -> TensorResult<Tensor> {
        check_nan("sum", &[self])?;
        let s = self.with_data(|d| d.iter().sum::<f64>());
        let xc = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if xc.live() {
                xc.accumulate_grad_owned(vec![g[0]; xc.len()]);
            }
        });
        Ok(Tensor::with_node(vec![1], vec![s], vec![self.clone()], backward))
    }

    pub fn mean(&self) -> TensorResult<Tensor> {
        check_nan("mean", &[self])?;
        let n = self.len() as f64;
        let s = self.with_data(|d| d.iter().sum::<f64>()) / n;
        let xc = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if xc.live() {
                xc.accumulate_grad_owned(vec![g[0] / n; xc.len()]);
            }
        });
        Ok(Tensor::with_node(vec![1], vec![s], vec![self.clone()], backward))
    }

    /// Sum over the two trailing axes: [..., h, w] → [...].
    pub fn sum_spatial(&self) -> TensorResult<Tensor> {
        check_nan("sum_spatial", &[self])?;
        let nd = self.shape().len();
        if nd < 2 {
            return Err(shape_err("sum_spatial", format!("{:?}", self.shape())));
        }
        let plane = self.shape()[nd - 2] * self.shape()[nd - 1];
        let n_maps = self.len() / plane;
        let mut shape = self.shape()[..nd - 2].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = self.with_data(|d| {
            (0..n_maps)
                .map(|m| d[m * plane..(m + 1) * plane].iter().sum::<f64>())
                .collect::<Vec<f64>>()
        });
        let xc = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if !xc.live() {
                return;
            }
            let mut gx = vec![0.0; xc.len()];
            for m in 0..n_maps {
                gx[m * plane..(m + 1) * plane].fill(g[m]);
            }
            xc.accumulate_grad_owned(gx);
        });
        Ok(Tensor::with_node(shape, out, vec![self.clone()], backward))
    }

    // ── losses ──────────────────────────────────────────────────────────────

    /// Mean squared error over all elements.
    pub fn mse_loss(&self, target: &Tensor) -> TensorResult<Tensor> {
        check_nan("mse_loss", &[self, target])?;
        if self.shape() != target.shape() {
            return Err(shape_err(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(), target.shape()),
            ));
        }
        let n = self.len() as f64;
        let s = self.with_data(|a| {
            target.with_data(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        }) / n;
        let (ac, bc) = (self.clone(), target.clone());
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let scale = 2.0 * g[0] / n;
            if ac.live() || bc.live() {
                let diff: Vec<f64> = ac.with_data(|a| {
                    bc.with_data(|b| a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect())
                });
                if ac.live() {
                    ac.accumulate_grad(&diff);
                }
                if bc.live() {
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    bc.accumulate_grad_owned(neg);
                }
            }
        });
        Ok(Tensor::with_node(vec![1], vec![s], vec![self.clone(), target.clone()], backward))
    }

    /// Mean binary cross entropy. Probabilities are clipped to
    /// [1e-7, 1 - 1e-7] before the logs, so the result is always finite.
    pub fn bce_loss(&self, target: &Tensor) -> TensorResult<Tensor> {
        check_nan("bce_loss", &[self, target])?;
        const CLIP: f64 = 1e-7;
        if self.shape() != target.shape() {
            return Err(shape_err(
                "bce_loss",
                format!("{:?} vs {:?}", self.shape(), target.shape()),
            ));
        }
        let n = self.len() as f64;
        let s = self.with_data(|p| {
            target.with_data(|t| {
                p.iter()
                    .zip(t)
                    .map(|(&pi, &ti)| {
                        let pc = pi.clamp(CLIP, 1.0 - CLIP);
                        -ti * pc.ln() - (1.0 - ti) * (1.0 - pc).ln()
                    })
                    .sum::<f64>()
            })
        }) / n;
        let (pc_t, tc) = (self.clone(), target.clone());
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let scale = g[0] / n;
            if pc_t.live() {
                let gp: Vec<f64> = pc_t.with_data(|p| {
                    tc.with_data(|t| {
                        p.iter()
                            .zip(t)
                            .map(|(&pi, &ti)| {
                                if pi < CLIP || pi > 1.0 - CLIP {
                                    0.0 // clamped region: flat
                                } else {
                                    scale * (-ti / pi + (1.0 - ti) / (1.0 - pi))
                                }
                            })
                            .collect()
                    })
                });
                pc_t.accumulate_grad_owned(gp);
            }
            if tc.live() {
                let gt: Vec<f64> = pc_t.with_data(|p| {
                    p.iter()
                        .map(|&pi| {
                            let pc = pi.clamp(CLIP, 1.0 - CLIP);
                            scale * ((1.0 - pc).ln() - pc.ln())
                        })
                        .collect()
                });
                tc.accumulate_grad_owned(gt);
            }
        });
        Ok(Tensor::with_node(vec![1], vec![s], vec![self.clone(), target.clone()], backward))
    }

    // ── warping ─────────────────────────────────────────────────────────────

    /// Bilinear affine warp of [b,c,h,w] with one sampling matrix per batch
    /// element (output coords → input coords); regions sampled outside the
    /// frame are filled with 0.
    pub fn affine_warp(&self, mats: &[WarpMatrix]) -> TensorResult<Tensor> {
        check_nan("affine_warp", &[self])?;
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(shape_err("affine_warp", format!("need [b,c,h,w], got {:?}", xs)));
        }
        if mats.len() != xs[0] {
            return Err(TensorError::InvalidArg {
                op: "affine_warp",
                detail: format!("{} matrices for batch {}", mats.len(), xs[0]),
            });
        }
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let img = c * h * w;
        let mut out = vec![0.0; self.len()];
        self.with_data(|d| {
            for (bi, m) in mats.iter().enumerate() {
                kernels::warp_forward(&d[bi * img..(bi + 1) * img], &mut out[bi * img..(bi + 1) * img], m, c, h, w);
            }
        });
        let xc = self.clone();
        let mats = mats.to_vec();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            if !xc.live() {
                return;
            }
            let mut gx = vec![0.0; xc.len()];
            for (bi, m) in mats.iter().enumerate() {
                kernels::warp_backward(&g[bi * img..(bi + 1) * img], &mut gx[bi * img..(bi + 1) * img], m, c, h, w);
            }
            xc.accumulate_grad_owned(gx);
        });
        Ok(Tensor::with_node(xs.to_vec(), out, vec![self.clone()], backward))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::new(&[3, 3], (0..9).map(|i| i as f64 * 1.7 - 3.0).collect());
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().unwrap().data(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_ones_center() {
        let x = Tensor::new(&[1, 1, 5, 5], vec![1.0; 25]);
        let w = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = x.conv2d(&w, None, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.data()[12], 9.0);
    }

    #[test]
    fn mse_grad_mean_reduction() {
        let x = Tensor::param(&[2], vec![1.0, 1.0]);
        let zero = Tensor::zeros(&[2]);
        let loss = x.mse_loss(&zero).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn spatial_softmax_sums_to_one() {
        let x = Tensor::new(&[2, 3, 3], (0..18).map(|i| (i as f64) * 0.37 - 2.0).collect());
        let s = x.spatial_softmax(7.0).unwrap();
        let d = s.data();
        for m in 0..2 {
            let z: f64 = d[m * 9..(m + 1) * 9].iter().sum();
            assert!((z - 1.0).abs() < 1e-9, "sum {z}");
        }
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let x = Tensor::new(&[2, 2], vec![3.0, 4.0, -1.0, 1.0]);
        let y = x.l2_normalize(1).unwrap();
        let d = y.data();
        for row in d.chunks(2) {
            let n = (row[0] * row[0] + row[1] * row[1]).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!((d[0] - 0.6).abs() < 1e-12);
        assert!((d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn bce_half_is_ln2() {
        let p = Tensor::new(&[4], vec![0.5; 4]);
        let t = Tensor::new(&[4], vec![0.0, 1.0, 1.0, 0.0]);
        let l = p.bce_loss(&t).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn concat_and_select_round_trip() {
        let a = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(&[2, 1, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        let sa = c.select(1, 0).unwrap();
        let sb = c.select(1, 1).unwrap();
        assert_eq!(sa.data(), a.data());
        assert_eq!(sb.data(), b.data());
    }

    #[test]
    fn shape_mismatch_names_op() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]);
        let b = Tensor::new(&[3], vec![1.0, 2.0, 3.0]);
        let err = a.add(&b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn nan_input_rejected_in_debug() {
        let a = Tensor::new(&[1], vec![f64::NAN]);
        assert!(a.relu().is_err());
    }
}
