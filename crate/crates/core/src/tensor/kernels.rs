//! Raw slice kernels behind the tensor ops.
//!
//! Inner loops run over contiguous rows with `mul_add` so they vectorize.
//! Parallel splits are per output slice, so every output cell is computed by
//! one fixed sequential sum and results do not depend on thread count.

use rayon::prelude::*;

/// Work threshold (in MACs) below which rayon overhead beats the speedup.
const PAR_THRESHOLD: usize = 1 << 16;

/// Dot product with eight independent accumulators so the FMA chain has
/// instruction-level parallelism and vectorizes.
#[inline]
fn dot8(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

// ── matmul ──────────────────────────────────────────────────────────────────

/// C += A @ B with A: [m,k], B: [k,n]. Blocks over rows of A so each row of B
/// streams through cache once per block.
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const IB: usize = 8;
    let body = |i0: usize, cblock: &mut [f64]| {
        let rows = cblock.len() / n;
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for di in 0..rows {
                let av = a[(i0 + di) * k + p];
                let crow = &mut cblock[di * n..(di + 1) * n];
                for j in 0..n {
                    crow[j] = av.mul_add(brow[j], crow[j]);
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(IB * n)
            .enumerate()
            .for_each(|(bi, cblock)| body(bi * IB, cblock));
    } else {
        for (bi, cblock) in c.chunks_mut(IB * n).enumerate() {
            body(bi * IB, cblock);
        }
    }
}

/// C += A @ Bᵀ with A: [m,k], B: [n,k]. Row-dot formulation.
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            crow[j] += dot8(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
}

/// C += Aᵀ @ B with A: [k,m], B: [k,n]. Row-axpy formulation.
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const IB: usize = 8;
    let body = |i0: usize, cblock: &mut [f64]| {
        let rows = cblock.len() / n;
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for di in 0..rows {
                let av = a[p * m + i0 + di];
                let crow = &mut cblock[di * n..(di + 1) * n];
                for j in 0..n {
                    crow[j] = av.mul_add(brow[j], crow[j]);
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(IB * n)
            .enumerate()
            .for_each(|(bi, cblock)| body(bi * IB, cblock));
    } else {
        for (bi, cblock) in c.chunks_mut(IB * n).enumerate() {
            body(bi * IB, cblock);
        }
    }
}

// ── conv2d (stride 1, zero padding) ─────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
}

/// One output row of a same-size 3×3 conv: scalar column edges, then a
/// branch-free interior loop with three independent accumulator chains.
#[inline]
fn conv3x3_row(up: &[f64], mid: &[f64], down: &[f64], wk: &[f64; 9], orow: &mut [f64], w: usize) {
    let mut a = orow[0];
    a = wk[1].mul_add(up[0], a);
    a = wk[2].mul_add(up[1], a);
    a = wk[4].mul_add(mid[0], a);
    a = wk[5].mul_add(mid[1], a);
    a = wk[7].mul_add(down[0], a);
    a = wk[8].mul_add(down[1], a);
    orow[0] = a;
    for x in 1..w - 1 {
        let mut a = wk[0].mul_add(up[x - 1], orow[x]);
        let mut b = wk[1] * up[x];
        let mut c = wk[2] * up[x + 1];
        a = wk[3].mul_add(mid[x - 1], a);
        b = wk[4].mul_add(mid[x], b);
        c = wk[5].mul_add(mid[x + 1], c);
        a = wk[6].mul_add(down[x - 1], a);
        b = wk[7].mul_add(down[x], b);
        c = wk[8].mul_add(down[x + 1], c);
        orow[x] = a + b + c;
    }
    let x = w - 1;
    let mut a = orow[x];
    a = wk[0].mul_add(up[x - 1], a);
    a = wk[1].mul_add(up[x], a);
    a = wk[3].mul_add(mid[x - 1], a);
    a = wk[4].mul_add(mid[x], a);
    a = wk[6].mul_add(down[x - 1], a);
    a = wk[7].mul_add(down[x], a);
    orow[x] = a;
}

/// 3×3 pad-1 fast path. Border rows reuse the interior row pass with the
/// out-of-range taps zero-weighted (0·finite = 0 exactly).
fn conv3x3_plane(iplane: &[f64], wk: &[f64], oplane: &mut [f64], h: usize, w: usize) {
    debug_assert_eq!(wk.len(), 9);
    let full: [f64; 9] = wk.try_into().unwrap();
    let mut top = full;
    top[0] = 0.0;
    top[1] = 0.0;
    top[2] = 0.0;
    let mut bottom = full;
    bottom[6] = 0.0;
    bottom[7] = 0.0;
    bottom[8] = 0.0;
    for y in 0..h {
        let mid = &iplane[y * w..(y + 1) * w];
        let (up, down, wk_eff) = if y == 0 {
            (mid, &iplane[w..2 * w], &top)
        } else if y == h - 1 {
            (&iplane[(y - 1) * w..y * w], mid, &bottom)
        } else {
            (&iplane[(y - 1) * w..y * w], &iplane[(y + 1) * w..(y + 2) * w], &full)
        };
        conv3x3_row(up, mid, down, wk_eff, &mut oplane[y * w..(y + 1) * w], w);
    }
}

fn is_conv3x3_same(s: &ConvShape) -> bool {
    s.kh == 3 && s.kw == 3 && s.pad == 1 && s.h >= 2 && s.w >= 2
}

/// Forward: out[b,co,y,x] = Σ_{ci,ky,kx} w[co,ci,ky,kx]·in[b,ci,y+ky-p,x+kx-p] + bias[co].
pub fn conv2d_forward(inp: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64], s: ConvShape) {
    if is_conv3x3_same(&s) {
        // one task per image: the input planes stay cache-resident while
        // every output channel accumulates
        let plane = s.h * s.w;
        let in_img = s.cin * plane;
        let out_img = s.cout * plane;
        let body = |b: usize, oimg: &mut [f64]| {
            let img = &inp[b * in_img..(b + 1) * in_img];
            for co in 0..s.cout {
                let oplane = &mut oimg[co * plane..(co + 1) * plane];
                oplane.fill(bias.map(|bb| bb[co]).unwrap_or(0.0));
                for ci in 0..s.cin {
                    conv3x3_plane(
                        &img[ci * plane..(ci + 1) * plane],
                        &weight[(co * s.cin + ci) * 9..(co * s.cin + ci + 1) * 9],
                        oplane,
                        s.h,
                        s.w,
                    );
                }
            }
        };
        if s.batch * s.cout * s.cin * 9 * plane >= PAR_THRESHOLD && s.batch > 1 {
            out.par_chunks_mut(out_img).enumerate().for_each(|(b, p)| body(b, p));
        } else {
            for (b, p) in out.chunks_mut(out_img).enumerate() {
                body(b, p);
            }
        }
        return;
    }
    conv2d_forward_generic(inp, weight, bias, out, s)
}

fn conv2d_forward_generic(inp: &[f64], weight: &[f64], bias: Option<&[f64]>, out: &mut [f64], s: ConvShape) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let in_plane = s.h * s.w;
    let out_plane = oh * ow;
    let in_img = s.cin * in_plane;
    let out_img = s.cout * out_plane;
    let kplane = s.kh * s.kw;

    let body = |idx: usize, oplane: &mut [f64]| {
        let b = idx / s.cout;
        let co = idx % s.cout;
        if let Some(bias) = bias {
            oplane.fill(bias[co]);
        }
        let img = &inp[b * in_img..(b + 1) * in_img];
        for ci in 0..s.cin {
            let iplane = &img[ci * in_plane..(ci + 1) * in_plane];
            let wk = &weight[(co * s.cin + ci) * kplane..(co * s.cin + ci + 1) * kplane];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let wv = wk[ky * s.kw + kx];
                    // output row y samples input row y+ky-pad
                    for y in 0..oh {
                        let iy = y as isize + ky as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let irow = &iplane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let orow = &mut oplane[y * ow..(y + 1) * ow];
                        let off = kx as isize - s.pad as isize;
                        let x0 = (-off).max(0) as usize;
                        let x1 = ow.min((s.w as isize - off) as usize);
                        for x in x0..x1 {
                            let ix = (x as isize + off) as usize;
                            orow[x] = wv.mul_add(irow[ix], orow[x]);
                        }
                    }
                }
            }
        }
    };

    let work = s.batch * s.cout * s.cin * kplane * out_plane;
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(idx, oplane)| body(idx, oplane));
    } else {
        for (idx, oplane) in out.chunks_mut(out_plane).enumerate() {
            body(idx, oplane);
        }
    }
    let _ = out_img;
}

/// Backward w.r.t. input: din[b,ci,iy,ix] += Σ dout[b,co,y,x]·w[co,ci,ky,kx].
pub fn conv2d_backward_input(dout: &[f64], weight: &[f64], din: &mut [f64], s: ConvShape) {
    if is_conv3x3_same(&s) {
        // the input gradient of a same-size 3×3 conv is itself a 3×3 conv of
        // the output grads with the kernel rotated 180° and co/ci swapped
        let plane = s.h * s.w;
        let out_img = s.cout * plane;
        let mut flipped = vec![0.0; weight.len()];
        for co in 0..s.cout {
            for ci in 0..s.cin {
                let src = &weight[(co * s.cin + ci) * 9..(co * s.cin + ci + 1) * 9];
                let dst = &mut flipped[(ci * s.cout + co) * 9..(ci * s.cout + co + 1) * 9];
                for t in 0..9 {
                    dst[t] = src[8 - t];
                }
            }
        }
        let in_img = s.cin * plane;
        let body = |b: usize, iimg: &mut [f64]| {
            let dimg = &dout[b * out_img..(b + 1) * out_img];
            for ci in 0..s.cin {
                let iplane = &mut iimg[ci * plane..(ci + 1) * plane];
                for co in 0..s.cout {
                    conv3x3_plane(
                        &dimg[co * plane..(co + 1) * plane],
                        &flipped[(ci * s.cout + co) * 9..(ci * s.cout + co + 1) * 9],
                        iplane,
                        s.h,
                        s.w,
                    );
                }
            }
        };
        if s.batch * s.cout * s.cin * 9 * plane >= PAR_THRESHOLD && s.batch > 1 {
            din.par_chunks_mut(in_img).enumerate().for_each(|(b, p)| body(b, p));
        } else {
            for (b, p) in din.chunks_mut(in_img).enumerate() {
                body(b, p);
            }
        }
        return;
    }
    conv2d_backward_input_generic(dout, weight, din, s)
}

fn conv2d_backward_input_generic(dout: &[f64], weight: &[f64], din: &mut [f64], s: ConvShape) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let in_plane = s.h * s.w;
    let out_plane = oh * ow;
    let out_img = s.cout * out_plane;
    let kplane = s.kh * s.kw;

    let body = |idx: usize, iplane: &mut [f64]| {
        let b = idx / s.cin;
        let ci = idx % s.cin;
        let dimg = &dout[b * out_img..(b + 1) * out_img];
        for co in 0..s.cout {
            let dplane = &dimg[co * out_plane..(co + 1) * out_plane];
            let wk = &weight[(co * s.cin + ci) * kplane..(co * s.cin + ci + 1) * kplane];
            for ky in 0..s.kh {
                for kx in 0..s.kw {
                    let wv = wk[ky * s.kw + kx];
                    for y in 0..oh {
                        let iy = y as isize + ky as isize - s.pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let drow = &dplane[y * ow..(y + 1) * ow];
                        let irow = &mut iplane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let off = kx as isize - s.pad as isize;
                        let x0 = (-off).max(0) as usize;
                        let x1 = ow.min((s.w as isize - off) as usize);
                        for x in x0..x1 {
                            let ix = (x as isize + off) as usize;
                            irow[ix] = wv.mul_add(drow[x], irow[ix]);
                        }
                    }
                }
            }
        }
    };

    let work = s.batch * s.cout * s.cin * kplane * out_plane;
    if work >= PAR_THRESHOLD {
        din.par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(idx, iplane)| body(idx, iplane));
    } else {
        for (idx, iplane) in din.chunks_mut(in_plane).enumerate() {
            body(idx, iplane);
        }
    }
}

/// One row of the 3×3 weight gradient. The macro stamps out one function per
/// row kind (interior / top / bottom) with literal accumulator slots, so the
/// nine live accumulators stay in registers; border rows send their
/// out-of-range taps to slots 9..12, which are discarded.
macro_rules! wgrad_row_fn {
    ($name:ident, [$t0:literal, $t1:literal, $t2:literal, $t3:literal, $t4:literal,
                   $t5:literal, $t6:literal, $t7:literal, $t8:literal]) => {
        #[inline]
        fn $name(up: &[f64], mid: &[f64], down: &[f64], drow: &[f64], acc: &mut [f64; 12], w: usize) {
            let d = drow[0];
            acc[$t1] = d.mul_add(up[0], acc[$t1]);
            acc[$t2] = d.mul_add(up[1], acc[$t2]);
            acc[$t4] = d.mul_add(mid[0], acc[$t4]);
            acc[$t5] = d.mul_add(mid[1], acc[$t5]);
            acc[$t7] = d.mul_add(down[0], acc[$t7]);
            acc[$t8] = d.mul_add(down[1], acc[$t8]);
            for x in 1..w - 1 {
                let d = drow[x];
                acc[$t0] = d.mul_add(up[x - 1], acc[$t0]);
                acc[$t1] = d.mul_add(up[x], acc[$t1]);
                acc[$t2] = d.mul_add(up[x + 1], acc[$t2]);
                acc[$t3] = d.mul_add(mid[x - 1], acc[$t3]);
                acc[$t4] = d.mul_add(mid[x], acc[$t4]);
                acc[$t5] = d.mul_add(mid[x + 1], acc[$t5]);
                acc[$t6] = d.mul_add(down[x - 1], acc[$t6]);
                acc[$t7] = d.mul_add(down[x], acc[$t7]);
                acc[$t8] = d.mul_add(down[x + 1], acc[$t8]);
            }
            let x = w - 1;
            let d = drow[x];
            acc[$t0] = d.mul_add(up[x - 1], acc[$t0]);
            acc[$t1] = d.mul_add(up[x], acc[$t1]);
            acc[$t3] = d.mul_add(mid[x - 1], acc[$t3]);
            acc[$t4] = d.mul_add(mid[x], acc[$t4]);
            acc[$t6] = d.mul_add(down[x - 1], acc[$t6]);
            acc[$t7] = d.mul_add(down[x], acc[$t7]);
        }
    };
}

wgrad_row_fn!(wgrad_row_mid, [0, 1, 2, 3, 4, 5, 6, 7, 8]);
wgrad_row_fn!(wgrad_row_top, [9, 10, 11, 3, 4, 5, 6, 7, 8]);
wgrad_row_fn!(wgrad_row_bottom, [0, 1, 2, 3, 4, 5, 9, 10, 11]);

/// 3×3 pad-1 weight-grad fast path.
fn conv3x3_weight_grad_plane(iplane: &[f64], dplane: &[f64], wk: &mut [f64], h: usize, w: usize) {
    let mut acc = [0.0f64; 12];
    for y in 0..h {
        let mid = &iplane[y * w..(y + 1) * w];
        let drow = &dplane[y * w..(y + 1) * w];
        if y == 0 {
            wgrad_row_top(mid, mid, &iplane[w..2 * w], drow, &mut acc, w);
        } else if y == h - 1 {
            wgrad_row_bottom(&iplane[(y - 1) * w..y * w], mid, mid, drow, &mut acc, w);
        } else {
            wgrad_row_mid(
                &iplane[(y - 1) * w..y * w],
                mid,
                &iplane[(y + 1) * w..(y + 2) * w],
                drow,
                &mut acc,
                w,
            );
        }
    }
    for t in 0..9 {
        wk[t] += acc[t];
    }
}

/// Backward w.r.t. weights (and bias): dw[co,ci,ky,kx] += Σ_{b,y,x} dout·in.
pub fn conv2d_backward_weight(
    inp: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
    s: ConvShape,
) {
    if is_conv3x3_same(&s) {
        // per-image partial gradients, then a fixed-order reduction so the
        // result does not depend on the parallel schedule
        let plane = s.h * s.w;
        let in_img = s.cin * plane;
        let out_img = s.cout * plane;
        let body = |b: usize| -> Vec<f64> {
            let mut partial = vec![0.0; dweight.len()];
            let dimg = &dout[b * out_img..(b + 1) * out_img];
            let img = &inp[b * in_img..(b + 1) * in_img];
            for co in 0..s.cout {
                let dplane = &dimg[co * plane..(co + 1) * plane];
                for ci in 0..s.cin {
                    conv3x3_weight_grad_plane(
                        &img[ci * plane..(ci + 1) * plane],
                        dplane,
                        &mut partial[(co * s.cin + ci) * 9..(co * s.cin + ci + 1) * 9],
                        s.h,
                        s.w,
                    );
                }
            }
            partial
        };
        let partials: Vec<Vec<f64>> =
            if s.batch * s.cout * s.cin * 9 * plane >= PAR_THRESHOLD && s.batch > 1 {
                (0..s.batch).into_par_iter().map(body).collect()
            } else {
                (0..s.batch).map(body).collect()
            };
        for partial in &partials {
            for (w, p) in dweight.iter_mut().zip(partial) {
                *w += p;
            }
        }
        if let Some(db) = dbias {
            for co in 0..s.cout {
                let mut acc = 0.0;
                for b in 0..s.batch {
                    let dplane = &dout[b * out_img + co * plane..b * out_img + (co + 1) * plane];
                    for v in dplane {
                        acc += v;
                    }
                }
                db[co] += acc;
            }
        }
        return;
    }
    conv2d_backward_weight_generic(inp, dout, dweight, dbias, s)
}

fn conv2d_backward_weight_generic(
    inp: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: Option<&mut [f64]>,
    s: ConvShape,
) {
    let (oh, ow) = (s.out_h(), s.out_w());
    let in_plane = s.h * s.w;
    let out_plane = oh * ow;
    let in_img = s.cin * in_plane;
    let out_img = s.cout * out_plane;
    let kplane = s.kh * s.kw;

    let body = |co: usize, dw_co: &mut [f64]| {
        for b in 0..s.batch {
            let dplane = &dout[b * out_img + co * out_plane..b * out_img + (co + 1) * out_plane];
            let img = &inp[b * in_img..(b + 1) * in_img];
            for ci in 0..s.cin {
                let iplane = &img[ci * in_plane..(ci + 1) * in_plane];
                let wk = &mut dw_co[ci * kplane..(ci + 1) * kplane];
                for ky in 0..s.kh {
                    for kx in 0..s.kw {
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let iy = y as isize + ky as isize - s.pad as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            let drow = &dplane[y * ow..(y + 1) * ow];
                            let irow = &iplane[iy as usize * s.w..(iy as usize + 1) * s.w];
                            let off = kx as isize - s.pad as isize;
                            let x0 = (-off).max(0) as usize;
                            let x1 = ow.min((s.w as isize - off) as usize);
                            acc += dot8(
                                &drow[x0..x1],
                                &irow[(x0 as isize + off) as usize..(x1 as isize + off) as usize],
                            );
                        }
                        wk[ky * s.kw + kx] += acc;
                    }
                }
            }
        }
    };

    let work = s.batch * s.cout * s.cin * kplane * out_plane;
    if work >= PAR_THRESHOLD {
        dweight
            .par_chunks_mut(s.cin * kplane)
            .enumerate()
            .for_each(|(co, dw_co)| body(co, dw_co));
    } else {
        for (co, dw_co) in dweight.chunks_mut(s.cin * kplane).enumerate() {
            body(co, dw_co);
        }
    }

    if let Some(db) = dbias {
        for co in 0..s.cout {
            let mut acc = 0.0;
            for b in 0..s.batch {
                let dplane =
                    &dout[b * out_img + co * out_plane..b * out_img + (co + 1) * out_plane];
                for v in dplane {
                    acc += v;
                }
            }
            db[co] += acc;
        }
    }
}

// ── pooling / upsampling ────────────────────────────────────────────────────

/// 2×2 average pool; maps are [h,w] with even dims, `n_maps` of them.
pub fn avg_pool2_forward(inp: &[f64], out: &mut [f64], n_maps: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for m in 0..n_maps {
        let ip = &inp[m * h * w..(m + 1) * h * w];
        let op = &mut out[m * oh * ow..(m + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &ip[(2 * y) * w..(2 * y) * w + w];
            let r1 = &ip[(2 * y + 1) * w..(2 * y + 1) * w + w];
            let orow = &mut op[y * ow..(y + 1) * ow];
            for x in 0..ow {
                orow[x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
}

pub fn avg_pool2_backward(dout: &[f64], din: &mut [f64], n_maps: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for m in 0..n_maps {
        let dp = &dout[m * oh * ow..(m + 1) * oh * ow];
        let ip = &mut din[m * h * w..(m + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * dp[y * ow + x];
                ip[(2 * y) * w + 2 * x] += g;
                ip[(2 * y) * w + 2 * x + 1] += g;
                ip[(2 * y + 1) * w + 2 * x] += g;
                ip[(2 * y + 1) * w + 2 * x + 1] += g;
            }
        }
    }
}

/// Nearest-neighbor 2× upsample.
pub fn upsample2_forward(inp: &[f64], out: &mut [f64], n_maps: usize, h: usize, w: usize) {
    let (oh, ow) = (2 * h, 2 * w);
    for m in 0..n_maps {
        let ip = &inp[m * h * w..(m + 1) * h * w];
        let op = &mut out[m * oh * ow..(m + 1) * oh * ow];
        for y in 0..h {
            let irow = &ip[y * w..(y + 1) * w];
            for dy in 0..2 {
                let orow = &mut op[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                for x in 0..w {
                    orow[2 * x] = irow[x];
                    orow[2 * x + 1] = irow[x];
                }
            }
        }
    }
}

pub fn upsample2_backward(dout: &[f64], din: &mut [f64], n_maps: usize, h: usize, w: usize) {
    let ow = 2 * w;
    for m in 0..n_maps {
        let dp = &dout[m * 4 * h * w..(m + 1) * 4 * h * w];
        let ip = &mut din[m * h * w..(m + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                ip[y * w + x] += dp[(2 * y) * ow + 2 * x]
                    + dp[(2 * y) * ow + 2 * x + 1]
                    + dp[(2 * y + 1) * ow + 2 * x]
                    + dp[(2 * y + 1) * ow + 2 * x + 1];
            }
        }
    }
}

// ── bilinear affine warp ────────────────────────────────────────────────────

/// Sampling matrix [a, b, tx, c, d, ty]: source = (a·x + b·y + tx, c·x + d·y + ty).
pub type WarpMatrix = [f64; 6];

#[inline]
fn bilinear_taps(m: &WarpMatrix, x: usize, y: usize, h: usize, w: usize) -> [(usize, f64); 4] {
    let sx = m[0] * x as f64 + m[1] * y as f64 + m[2];
    let sy = m[3] * x as f64 + m[4] * y as f64 + m[5];
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let mut taps = [(0usize, 0.0f64); 4];
    let mut i = 0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let px = x0 + dx;
            let py = y0 + dy;
            let weight = wx * wy;
            if px >= 0.0 && px < w as f64 && py >= 0.0 && py < h as f64 && weight != 0.0 {
                taps[i] = (py as usize * w + px as usize, weight);
                i += 1;
            }
        }
    }
    for t in taps.iter_mut().skip(i) {
        *t = (0, 0.0);
    }
    taps
}

/// Warp each [h,w] map: out(x,y) = bilinear(in, M·(x,y)); zero fill outside.
pub fn warp_forward(inp: &[f64], out: &mut [f64], m: &WarpMatrix, n_maps: usize, h: usize, w: usize) {
    let plane = h * w;
    let body = |mi: usize, op: &mut [f64]| {
        let ip = &inp[mi * plane..(mi + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let taps = bilinear_taps(m, x, y, h, w);
                let mut acc = 0.0;
                for (idx, wt) in taps {
                    acc = wt.mul_add(ip[idx], acc);
                }
                op[y * w + x] = acc;
            }
        }
    };
    if n_maps * plane >= PAR_THRESHOLD {
        out.par_chunks_mut(plane).enumerate().for_each(|(mi, op)| body(mi, op));
    } else {
        for (mi, op) in out.chunks_mut(plane).enumerate() {
            body(mi, op);
        }
    }
}

/// Transpose of `warp_forward`: scatter output grads through the same taps.
pub fn warp_backward(dout: &[f64], din: &mut [f64], m: &WarpMatrix, n_maps: usize, h: usize, w: usize) {
    let plane = h * w;
    let body = |mi: usize, ip: &mut [f64]| {
        let dp = &dout[mi * plane..(mi + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let g = dp[y * w + x];
                if g == 0.0 {
                    continue;
                }
                let taps = bilinear_taps(m, x, y, h, w);
                for (idx, wt) in taps {
                    ip[idx] = wt.mul_add(g, ip[idx]);
                }
            }
        }
    };
    if n_maps * plane >= PAR_THRESHOLD {
        din.par_chunks_mut(plane).enumerate().for_each(|(mi, ip)| body(mi, ip));
    } else {
        for (mi, ip) in din.chunks_mut(plane).enumerate() {
            body(mi, ip);
        }
    }
}
