//! Differentiable operations over [`Var`]s.
//!
//! Feature maps are `[N, C, H, W]`. Every op builds its backward closure at
//! forward time; the closures only capture what they need (argmax tables,
//! normalized activations, op hyperparameters).
//!
//! Parallel loops always write disjoint output regions with a fixed
//! iteration order inside each region, so results are bitwise reproducible
//! regardless of thread count.

use rayon::prelude::*;

use super::tensor::Tensor;
use super::var::{BackwardCtx, Var};

/// Below this many output elements the parallel dispatch overhead is not
/// worth paying.
const PAR_THRESHOLD: usize = 1 << 14;

fn for_each_chunk_mut<F>(buf: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if buf.len() >= PAR_THRESHOLD && chunk < buf.len() {
        buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in buf.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

pub fn add(a: &Var, b: &Var) -> Var {
    let av = a.value();
    let bv = b.value();
    assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
    let out = Tensor::from_vec(
        av.shape(),
        av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect(),
    );
    drop(av);
    drop(bv);
    Var::from_op(out, &[a, b], Box::new(|ctx: &BackwardCtx| {
        vec![Some(ctx.grad_out.clone()), Some(ctx.grad_out.clone())]
    }))
}

pub fn scale(x: &Var, c: f64) -> Var {
    let out = x.value().map(|v| v * c);
    Var::from_op(out, &[x], Box::new(move |ctx: &BackwardCtx| {
        vec![Some(ctx.grad_out.map(|g| g * c))]
    }))
}

pub fn sigmoid(x: &Var) -> Var {
    let out = x.value().map(|v| 1.0 / (1.0 + (-v).exp()));
    Var::from_op(out, &[x], Box::new(|ctx: &BackwardCtx| {
        let g = ctx
            .grad_out
            .data()
            .iter()
            .zip(ctx.out.data())
            .map(|(&g, &y)| g * y * (1.0 - y))
            .collect();
        vec![Some(Tensor::from_vec(ctx.out.shape(), g))]
    }))
}

/// Clamp to `[lo, hi]` with passthrough gradient strictly inside the
/// interval. Used to keep sigmoid gates inside the open unit interval when
/// f64 rounding would otherwise saturate them to exactly 0 or 1.
pub fn clamp(x: &Var, lo: f64, hi: f64) -> Var {
    let out = x.value().map(|v| v.clamp(lo, hi));
    Var::from_op(out, &[x], Box::new(move |ctx: &BackwardCtx| {
        let xin = ctx.parents[0].value();
        let g = ctx
            .grad_out
            .data()
            .iter()
            .zip(xin.data())
            .map(|(&g, &v)| if v > lo && v < hi { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::from_vec(xin.shape(), g))]
    }))
}

/// Swish activation `x * sigmoid(x)`.
pub fn swish(x: &Var) -> Var {
    let out = x.value().map(|v| v / (1.0 + (-v).exp()));
    Var::from_op(out, &[x], Box::new(|ctx: &BackwardCtx| {
        let xin = ctx.parents[0].value();
        let g = ctx
            .grad_out
            .data()
            .iter()
            .zip(xin.data())
            .map(|(&g, &v)| {
                let s = 1.0 / (1.0 + (-v).exp());
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect();
        vec![Some(Tensor::from_vec(xin.shape(), g))]
    }))
}

/// GELU with the tanh approximation.
pub fn gelu(x: &Var) -> Var {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let out = x.value().map(|v| {
        let u = C * (v + A * v * v * v);
        0.5 * v * (1.0 + u.tanh())
    });
    Var::from_op(out, &[x], Box::new(|ctx: &BackwardCtx| {
        let xin = ctx.parents[0].value();
        let g = ctx
            .grad_out
            .data()
            .iter()
            .zip(xin.data())
            .map(|(&g, &v)| {
                let u = C * (v + A * v * v * v);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * C * (1.0 + 3.0 * A * v * v))
            })
            .collect();
        vec![Some(Tensor::from_vec(xin.shape(), g))]
    }))
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Hyperparameters of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

pub fn conv2d_out_size(in_size: usize, kernel: usize, spec: &ConvSpec) -> usize {
    let effective = spec.dilation * (kernel - 1) + 1;
    assert!(
        in_size + 2 * spec.padding >= effective,
        "conv window {} larger than padded input {}",
        effective,
        in_size + 2 * spec.padding
    );
    (in_size + 2 * spec.padding - effective) / spec.stride + 1
}

/// 2-d convolution. `input` is `[N, Cin, H, W]`, `weight` is
/// `[Cout, Cin/groups, KH, KW]`, `bias` is `[Cout]`.
pub fn conv2d(input: &Var, weight: &Var, bias: Option<&Var>, spec: ConvSpec) -> Var {
    let x = input.value();
    let w = weight.value();
    let (n, cin, h, wd) = dims4(&x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin % spec.groups, 0);
    assert_eq!(cout % spec.groups, 0);
    assert_eq!(cin_g, cin / spec.groups, "weight shape inconsistent with groups");
    let oh = conv2d_out_size(h, kh, &spec);
    let ow = conv2d_out_size(wd, kw, &spec);
    let oc_per_g = cout / spec.groups;

    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    {
        let xd = x.data();
        let wdat = w.data();
        let bias_val = bias.map(|b| b.value().data().to_vec());
        for_each_chunk_mut(out.data_mut(), oh * ow, |chunk_idx, plane| {
            let ni = chunk_idx / cout;
            let oc = chunk_idx % cout;
            let group = oc / oc_per_g;
            let b0 = bias_val.as_ref().map_or(0.0, |b| b[oc]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    let iy0 = (oy * spec.stride) as isize - spec.padding as isize;
                    let ix0 = (ox * spec.stride) as isize - spec.padding as isize;
                    for icl in 0..cin_g {
                        let ic = group * cin_g + icl;
                        let xbase = (ni * cin + ic) * h * wd;
                        let wbase = ((oc * cin_g) + icl) * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + (ky * spec.dilation) as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + (kx * spec.dilation) as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[xrow + ix as usize] * wdat[wrow + kx];
                            }
                        }
                    }
                    plane[oy * ow + ox] = acc;
                }
            }
        });
    }
    drop(x);
    drop(w);

    let has_bias = bias.is_some();
    let mut parents: Vec<&Var> = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Var::from_op(out, &parents, Box::new(move |ctx: &BackwardCtx| {
        let x = ctx.parents[0].value();
        let w = ctx.parents[1].value();
        let g = ctx.grad_out;
        let (n, cin, h, wd) = dims4(&x);
        let ws = w.shape();
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = {
            let gs = g.shape();
            (gs[2], gs[3])
        };
        let oc_per_g = cout / spec.groups;
        let gd = g.data();
        let wdat = w.data();
        let xd = x.data();

        // d input: scatter over grad_out, parallel across samples.
        let mut gx = Tensor::zeros(&[n, cin, h, wd]);
        for_each_chunk_mut(gx.data_mut(), cin * h * wd, |ni, gxs| {
            for oc in 0..cout {
                let group = oc / oc_per_g;
                let gbase = (ni * cout + oc) * oh * ow;
                for oy in 0..oh {
                    let iy0 = (oy * spec.stride) as isize - spec.padding as isize;
                    for ox in 0..ow {
                        let gval = gd[gbase + oy * ow + ox];
                        if gval == 0.0 {
                            continue;
                        }
                        let ix0 = (ox * spec.stride) as isize - spec.padding as isize;
                        for icl in 0..cin_g {
                            let ic = group * cin_g + icl;
                            let xbase = ic * h * wd;
                            let wbase = ((oc * cin_g) + icl) * kh * kw;
                            for ky in 0..kh {
                                let iy = iy0 + (ky * spec.dilation) as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = xbase + iy as usize * wd;
                                let wrow = wbase + ky * kw;
                                for kx in 0..kw {
                                    let ix = ix0 + (kx * spec.dilation) as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    gxs[row + ix as usize] += gval * wdat[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        });

        // d weight: parallel across output channels.
        let mut gw = Tensor::zeros(&[cout, cin_g, kh, kw]);
        for_each_chunk_mut(gw.data_mut(), cin_g * kh * kw, |oc, gws| {
            let group = oc / oc_per_g;
            for ni in 0..n {
                let gbase = (ni * cout + oc) * oh * ow;
                for icl in 0..cin_g {
                    let ic = group * cin_g + icl;
                    let xbase = (ni * cin + ic) * h * wd;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = gbase + oy * ow;
                                let xrow = xbase + iy as usize * wd;
                                for ox in 0..ow {
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += gd[grow + ox] * xd[xrow + ix as usize];
                                }
                            }
                            gws[(icl * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });

        let mut grads = vec![Some(gx), Some(gw)];
        if has_bias {
            let mut gb = vec![0.0; cout];
            for ni in 0..n {
                for (oc, gbv) in gb.iter_mut().enumerate() {
                    let base = (ni * cout + oc) * oh * ow;
                    *gbv += gd[base..base + oh * ow].iter().sum::<f64>();
                }
            }
            grads.push(Some(Tensor::from_vec(&[cout], gb)));
        }
        grads
    }))
}

/// Transposed 2-d convolution (learned upsampling). `input` is
/// `[N, Cin, H, W]`, `weight` is `[Cin, Cout, KH, KW]`.
pub fn conv_transpose2d(
    input: &Var,
    weight: &Var,
    bias: Option<&Var>,
    stride: usize,
) -> Var {
    let x = input.value();
    let w = weight.value();
    let (n, cin, h, wd) = dims4(&x);
    let ws = w.shape();
    let (wcin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, wcin, "conv_transpose2d weight shape mismatch");
    let oh = (h - 1) * stride + kh;
    let ow = (wd - 1) * stride + kw;

    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    {
        let xd = x.data();
        let wdat = w.data();
        let bias_val = bias.map(|b| b.value().data().to_vec());
        for_each_chunk_mut(out.data_mut(), oh * ow, |chunk_idx, plane| {
            let ni = chunk_idx / cout;
            let oc = chunk_idx % cout;
            if let Some(b) = bias_val.as_ref() {
                plane.fill(b[oc]);
            }
            for ic in 0..cin {
                let xbase = (ni * cin + ic) * h * wd;
                let wbase = (ic * cout + oc) * kh * kw;
                for iy in 0..h {
                    for ix in 0..wd {
                        let v = xd[xbase + iy * wd + ix];
                        if v == 0.0 {
                            continue;
                        }
                        let oy0 = iy * stride;
                        let ox0 = ix * stride;
                        for ky in 0..kh {
                            let orow = (oy0 + ky) * ow + ox0;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                plane[orow + kx] += v * wdat[wrow + kx];
                            }
                        }
                    }
                }
            }
        });
    }
    drop(x);
    drop(w);

    let has_bias = bias.is_some();
    let mut parents: Vec<&Var> = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Var::from_op(out, &parents, Box::new(move |ctx: &BackwardCtx| {
        let x = ctx.parents[0].value();
        let w = ctx.parents[1].value();
        let g = ctx.grad_out;
        let (n, cin, h, wd) = dims4(&x);
        let ws = w.shape();
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let (oh, ow) = { (g.shape()[2], g.shape()[3]) };
        let gd = g.data();
        let xd = x.data();
        let wdat = w.data();

        // d input: gathering convolution of grad_out with the same kernel.
        let mut gx = Tensor::zeros(&[n, cin, h, wd]);
        for_each_chunk_mut(gx.data_mut(), h * wd, |chunk_idx, plane| {
            let ni = chunk_idx / cin;
            let ic = chunk_idx % cin;
            for iy in 0..h {
                for ix in 0..wd {
                    let mut acc = 0.0;
                    for oc in 0..cout {
                        let gbase = (ni * cout + oc) * oh * ow;
                        let wbase = (ic * cout + oc) * kh * kw;
                        for ky in 0..kh {
                            let grow = gbase + (iy * stride + ky) * ow + ix * stride;
                            let wrow = wbase + ky * kw;
                            for kx in 0..kw {
                                acc += gd[grow + kx] * wdat[wrow + kx];
                            }
                        }
                    }
                    plane[iy * wd + ix] = acc;
                }
            }
        });

        // d weight: parallel across input channels.
        let mut gw = Tensor::zeros(&[cin, cout, kh, kw]);
        for_each_chunk_mut(gw.data_mut(), cout * kh * kw, |ic, gws| {
            for ni in 0..n {
                let xbase = (ni * cin + ic) * h * wd;
                for oc in 0..cout {
                    let gbase = (ni * cout + oc) * oh * ow;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = 0.0;
                            for iy in 0..h {
                                let grow = gbase + (iy * stride + ky) * ow;
                                let xrow = xbase + iy * wd;
                                for ix in 0..wd {
                                    acc += xd[xrow + ix] * gd[grow + ix * stride + kx];
                                }
                            }
                            gws[(oc * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });

        let mut grads = vec![Some(gx), Some(gw)];
        if has_bias {
            let mut gb = vec![0.0; cout];
            for ni in 0..n {
                for (oc, gbv) in gb.iter_mut().enumerate() {
                    let base = (ni * cout + oc) * oh * ow;
                    *gbv += gd[base..base + oh * ow].iter().sum::<f64>();
                }
            }
            grads.push(Some(Tensor::from_vec(&[cout], gb)));
        }
        grads
    }))
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

pub fn max_pool2d(input: &Var, kernel: usize, stride: usize, padding: usize) -> Var {
    let x = input.value();
    let (n, c, h, w) = dims4(&x);
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax: Vec<u32> = vec![0; n * c * oh * ow];
    {
        let xd = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let xbase = (ni * c + ci) * h * w;
                let obase = (ni * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
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
                                let idx = iy as usize * w + ix as usize;
                                let v = xd[xbase + idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out.data_mut()[obase + oy * ow + ox] = best;
                        argmax[obase + oy * ow + ox] = best_idx as u32;
                    }
                }
            }
        }
    }
    drop(x);
    Var::from_op(out, &[input], Box::new(move |ctx: &BackwardCtx| {
        let x = ctx.parents[0].value();
        let (n, c, h, w) = dims4(&x);
        let g = ctx.grad_out.data();
        let plane_out = ctx.grad_out.shape()[2] * ctx.grad_out.shape()[3];
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for_each_chunk_mut(gx.data_mut(), h * w, |chunk_idx, plane| {
            let obase = chunk_idx * plane_out;
            for i in 0..plane_out {
                plane[argmax[obase + i] as usize] += g[obase + i];
            }
        });
        vec![Some(gx)]
    }))
}

pub fn nearest_upsample2x(input: &Var) -> Var {
    let x = input.value();
    let (n, c, h, w) = dims4(&x);
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    {
        let xd = x.data();
        for_each_chunk_mut(out.data_mut(), 4 * h * w, |chunk_idx, plane| {
            let xbase = chunk_idx * h * w;
            for oy in 0..2 * h {
                let row = xbase + (oy / 2) * w;
                for ox in 0..2 * w {
                    plane[oy * 2 * w + ox] = xd[row + ox / 2];
                }
            }
        });
    }
    drop(x);
    Var::from_op(out, &[input], Box::new(|ctx: &BackwardCtx| {
        let shape = ctx.parents[0].value().shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = ctx.grad_out.data();
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for_each_chunk_mut(gx.data_mut(), h * w, |chunk_idx, plane| {
            let gbase = chunk_idx * 4 * h * w;
            for oy in 0..2 * h {
                let grow = gbase + oy * 2 * w;
                let prow = (oy / 2) * w;
                for ox in 0..2 * w {
                    plane[prow + ox / 2] += g[grow + ox];
                }
            }
        });
        vec![Some(gx)]
    }))
}

/// Per-axis source indices and blend weight for a 2x bilinear resize with
/// half-pixel centers (`align_corners = false`): output pixel `o` blends
/// source pixels `lo` and `hi` as `(1 - w) * src[lo] + w * src[hi]`.
fn bilinear2x_axis(in_size: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * in_size)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let lo = floor.max(0.0) as usize;
            let hi = ((floor as isize + 1).max(0) as usize).min(in_size - 1);
            let lo = lo.min(in_size - 1);
            (lo, hi, frac)
        })
        .collect()
}

pub fn bilinear_upsample2x(input: &Var) -> Var {
    let x = input.value();
    let (n, c, h, w) = dims4(&x);
    let ytab = bilinear2x_axis(h);
    let xtab = bilinear2x_axis(w);
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    {
        let xd = x.data();
        let ytab = &ytab;
        let xtab = &xtab;
        for_each_chunk_mut(out.data_mut(), 4 * h * w, |chunk_idx, plane| {
            let xbase = chunk_idx * h * w;
            for (oy, &(y0, y1, wy)) in ytab.iter().enumerate() {
                let r0 = xbase + y0 * w;
                let r1 = xbase + y1 * w;
                let orow = oy * 2 * w;
                for (ox, &(x0, x1, wx)) in xtab.iter().enumerate() {
                    let top = xd[r0 + x0] * (1.0 - wx) + xd[r0 + x1] * wx;
                    let bot = xd[r1 + x0] * (1.0 - wx) + xd[r1 + x1] * wx;
                    plane[orow + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        });
    }
    drop(x);
    Var::from_op(out, &[input], Box::new(move |ctx: &BackwardCtx| {
        let shape = ctx.parents[0].value().shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = ctx.grad_out.data();
        let ytab = &ytab;
        let xtab = &xtab;
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for_each_chunk_mut(gx.data_mut(), h * w, |chunk_idx, plane| {
            let gbase = chunk_idx * 4 * h * w;
            for (oy, &(y0, y1, wy)) in ytab.iter().enumerate() {
                let grow = gbase + oy * 2 * w;
                for (ox, &(x0, x1, wx)) in xtab.iter().enumerate() {
                    let gv = g[grow + ox];
                    plane[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                    plane[y0 * w + x1] += gv * (1.0 - wy) * wx;
                    plane[y1 * w + x0] += gv * wy * (1.0 - wx);
                    plane[y1 * w + x1] += gv * wy * wx;
                }
            }
        });
        vec![Some(gx)]
    }))
}

pub fn global_avg_pool(input: &Var) -> Var {
    let x = input.value();
    let (n, c, h, w) = dims4(&x);
    let m = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        let base = i * h * w;
        out.data_mut()[i] = x.data()[base..base + h * w].iter().sum::<f64>() / m;
    }
    drop(x);
    Var::from_op(out, &[input], Box::new(move |ctx: &BackwardCtx| {
        let shape = ctx.parents[0].value().shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = ctx.grad_out.data();
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        let m = (h * w) as f64;
        for i in 0..n * c {
            let gv = g[i] / m;
            let base = i * h * w;
            gx.data_mut()[base..base + h * w].fill(gv);
        }
        vec![Some(gx)]
    }))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel statistics of one batch, reported so the caller can maintain
/// running estimates.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide by m) variance, as used in the normalization itself.
    pub var: Vec<f64>,
}

/// Batch normalization over `(N, H, W)` per channel, training mode.
pub fn batch_norm_train(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> (Var, BatchStats) {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    let m = (n * h * w) as f64;
    let xd = xv.data();

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut acc = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            acc += xd[base..base + h * w].iter().sum::<f64>();
        }
        mean[ci] = acc / m;
        let mut vacc = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            vacc += xd[base..base + h * w]
                .iter()
                .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                .sum::<f64>();
        }
        var[ci] = vacc / m;
    }

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let gv = gamma.value();
    let bv = beta.value();
    let mut xhat = Tensor::zeros(&[n, c, h, w]);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (ga, be) = (gv.data()[ci], bv.data()[ci]);
            for i in base..base + h * w {
                let xh = (xd[i] - mu) * is;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = ga * xh + be;
            }
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);

    let stats = BatchStats { mean, var: var.clone() };
    let inv_std_c = inv_std.clone();
    let var_out = Var::from_op(out, &[x, gamma, beta], Box::new(move |ctx: &BackwardCtx| {
        let g = ctx.grad_out.data();
        let shape = ctx.parents[0].value().shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let m = (n * h * w) as f64;
        let gamma_v = ctx.parents[1].value();
        let xh = xhat.data();

        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let ga = gamma_v.data()[ci];
                for i in base..base + h * w {
                    dgamma[ci] += g[i] * xh[i];
                    dbeta[ci] += g[i];
                    let dxh = g[i] * ga;
                    sum_dxhat[ci] += dxh;
                    sum_dxhat_xhat[ci] += dxh * xh[i];
                }
            }
        }
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let ga = gamma_v.data()[ci];
                let is = inv_std_c[ci];
                let mean_dxh = sum_dxhat[ci] / m;
                let mean_dxh_xh = sum_dxhat_xhat[ci] / m;
                for i in base..base + h * w {
                    let dxh = g[i] * ga;
                    gx.data_mut()[i] = is * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                }
            }
        }
        vec![
            Some(gx),
            Some(Tensor::from_vec(&[c], dgamma)),
            Some(Tensor::from_vec(&[c], dbeta)),
        ]
    }));
    (var_out, stats)
}

/// Batch normalization with fixed (running) statistics, inference mode.
pub fn batch_norm_eval(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Var {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let gv = gamma.value();
    let bv = beta.value();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (ga, be) = (gv.data()[ci], bv.data()[ci]);
            for i in base..base + h * w {
                out.data_mut()[i] = ga * (xv.data()[i] - mu) * is + be;
            }
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);
    Var::from_op(out, &[x, gamma, beta], Box::new(move |ctx: &BackwardCtx| {
        let g = ctx.grad_out.data();
        let xv = ctx.parents[0].value();
        let shape = xv.shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let gamma_v = ctx.parents[1].value();
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let (mu, is) = (mean[ci], inv_std[ci]);
                let ga = gamma_v.data()[ci];
                for i in base..base + h * w {
                    gx.data_mut()[i] = g[i] * ga * is;
                    dgamma[ci] += g[i] * (xv.data()[i] - mu) * is;
                    dbeta[ci] += g[i];
                }
            }
        }
        vec![
            Some(gx),
            Some(Tensor::from_vec(&[c], dgamma)),
            Some(Tensor::from_vec(&[c], dbeta)),
        ]
    }))
}

/// Layer normalization across the channel axis at each `(n, h, w)` position.
pub fn layer_norm_channels(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Var {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    let hw = h * w;
    let xd = xv.data();
    let gv = gamma.value();
    let bv = beta.value();

    let mut xhat = Tensor::zeros(&[n, c, h, w]);
    let mut inv_std = vec![0.0; n * hw];
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for p in 0..hw {
            let mut mu = 0.0;
            for ci in 0..c {
                mu += xd[(ni * c + ci) * hw + p];
            }
            mu /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let d = xd[(ni * c + ci) * hw + p] - mu;
                var += d * d;
            }
            var /= c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ni * hw + p] = is;
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + p;
                let xh = (xd[idx] - mu) * is;
                xhat.data_mut()[idx] = xh;
                out.data_mut()[idx] = gv.data()[ci] * xh + bv.data()[ci];
            }
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);

    Var::from_op(out, &[x, gamma, beta], Box::new(move |ctx: &BackwardCtx| {
        let g = ctx.grad_out.data();
        let shape = ctx.parents[0].value().shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;
        let gamma_v = ctx.parents[1].value();
        let xh = xhat.data();
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ni in 0..n {
            for p in 0..hw {
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for ci in 0..c {
                    let idx = (ni * c + ci) * hw + p;
                    dgamma[ci] += g[idx] * xh[idx];
                    dbeta[ci] += g[idx];
                    let dxh = g[idx] * gamma_v.data()[ci];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh[idx];
                }
                let is = inv_std[ni * hw + p];
                let mean_dxh = sum_dxh / c as f64;
                let mean_dxh_xh = sum_dxh_xh / c as f64;
                for ci in 0..c {
                    let idx = (ni * c + ci) * hw + p;
                    let dxh = g[idx] * gamma_v.data()[ci];
                    gx.data_mut()[idx] = is * (dxh - mean_dxh - xh[idx] * mean_dxh_xh);
                }
            }
        }
        vec![
            Some(gx),
            Some(Tensor::from_vec(&[c], dgamma)),
            Some(Tensor::from_vec(&[c], dbeta)),
        ]
    }))
}

// ---------------------------------------------------------------------------
// Dense / gating / fusion
// ---------------------------------------------------------------------------

/// Fully connected layer: `x [N, Fin] -> [N, Fout]` with `weight [Fout, Fin]`.
pub fn linear(x: &Var, weight: &Var, bias: &Var) -> Var {
    let xv = x.value();
    let wv = weight.value();
    let bv = bias.value();
    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
    let fout = wv.shape()[0];
    assert_eq!(wv.shape()[1], fin, "linear weight shape mismatch");
    let mut out = Tensor::zeros(&[n, fout]);
    for ni in 0..n {
        for fo in 0..fout {
            let mut acc = bv.data()[fo];
            let wrow = fo * fin;
            let xrow = ni * fin;
            for fi in 0..fin {
                acc += xv.data()[xrow + fi] * wv.data()[wrow + fi];
            }
            out.data_mut()[ni * fout + fo] = acc;
        }
    }
    drop(xv);
    drop(wv);
    drop(bv);
    Var::from_op(out, &[x, weight, bias], Box::new(|ctx: &BackwardCtx| {
        let xv = ctx.parents[0].value();
        let wv = ctx.parents[1].value();
        let g = ctx.grad_out.data();
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let fout = wv.shape()[0];
        let mut gx = Tensor::zeros(&[n, fin]);
        let mut gw = Tensor::zeros(&[fout, fin]);
        let mut gb = vec![0.0; fout];
        for ni in 0..n {
            for fo in 0..fout {
                let gv = g[ni * fout + fo];
                gb[fo] += gv;
                for fi in 0..fin {
                    gx.data_mut()[ni * fin + fi] += gv * wv.data()[fo * fin + fi];
                    gw.data_mut()[fo * fin + fi] += gv * xv.data()[ni * fin + fi];
                }
            }
        }
        vec![Some(gx), Some(gw), Some(Tensor::from_vec(&[fout], gb))]
    }))
}

/// Multiplies feature maps `[N, C, H, W]` by a per-sample channel gate
/// `[N, C]`.
pub fn mul_channel_gate(features: &Var, gate: &Var) -> Var {
    let fv = features.value();
    let gv = gate.value();
    let (n, c, h, w) = dims4(&fv);
    assert_eq!(gv.shape(), &[n, c], "gate shape mismatch");
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n * c {
        let base = i * h * w;
        let gval = gv.data()[i];
        for j in base..base + h * w {
            out.data_mut()[j] = fv.data()[j] * gval;
        }
    }
    drop(fv);
    drop(gv);
    Var::from_op(out, &[features, gate], Box::new(|ctx: &BackwardCtx| {
        let fv = ctx.parents[0].value();
        let gv = ctx.parents[1].value();
        let (n, c, h, w) = dims4(&fv);
        let g = ctx.grad_out.data();
        let mut gf = Tensor::zeros(&[n, c, h, w]);
        let mut gg = Tensor::zeros(&[n, c]);
        for i in 0..n * c {
            let base = i * h * w;
            let gval = gv.data()[i];
            let mut acc = 0.0;
            for j in base..base + h * w {
                gf.data_mut()[j] = g[j] * gval;
                acc += g[j] * fv.data()[j];
            }
            gg.data_mut()[i] = acc;
        }
        vec![Some(gf), Some(gg)]
    }))
}

/// Fast normalized fusion: `out = sum_i relu(w_i) x_i / (sum_j relu(w_j) + eps)`.
///
/// All inputs must share one shape; `weights` holds one scalar per input.
pub fn weighted_fusion(inputs: &[&Var], weights: &Var, eps: f64) -> Var {
    let k = inputs.len();
    assert!(k >= 2, "fusion needs at least two inputs");
    let wv = weights.value();
    assert_eq!(wv.shape(), &[k], "fusion weight count mismatch");
    let a: Vec<f64> = wv.data().iter().map(|&w| w.max(0.0)).collect();
    let denom = a.iter().sum::<f64>() + eps;
    let shape = inputs[0].value().shape().to_vec();
    let numel = inputs[0].value().numel();
    let mut out = Tensor::zeros(&shape);
    for (i, inp) in inputs.iter().enumerate() {
        let v = inp.value();
        assert_eq!(v.shape(), shape.as_slice(), "fusion input shape mismatch");
        let coef = a[i] / denom;
        for j in 0..numel {
            out.data_mut()[j] += coef * v.data()[j];
        }
    }
    drop(wv);
    let mut parents: Vec<&Var> = inputs.to_vec();
    parents.push(weights);
    Var::from_op(out, &parents, Box::new(move |ctx: &BackwardCtx| {
        let k = ctx.parents.len() - 1;
        let wv = ctx.parents[k].value();
        let a: Vec<f64> = wv.data().iter().map(|&w| w.max(0.0)).collect();
        let denom = a.iter().sum::<f64>() + eps;
        let g = ctx.grad_out.data();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(k + 1);
        let mut gw = vec![0.0; k];
        for i in 0..k {
            let xi = ctx.parents[i].value();
            let coef = a[i] / denom;
            let gi = Tensor::from_vec(
                xi.shape(),
                g.iter().map(|&gv| gv * coef).collect(),
            );
            // d/dw_i = <g, (x_i - out)> / denom, gated by relu'.
            if wv.data()[i] > 0.0 {
                let mut acc = 0.0;
                for j in 0..xi.numel() {
                    acc += g[j] * (xi.data()[j] - ctx.out.data()[j]);
                }
                gw[i] = acc / denom;
            }
            grads.push(Some(gi));
        }
        grads.push(Some(Tensor::from_vec(&[k], gw)));
        grads
    }))
}
