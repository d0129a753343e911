//! 3D cross-correlation with gradients for input, weight and bias.
//!
//! Work is split over disjoint output blocks (forward), weight rows and
//! batch slabs (backward), so parallel execution accumulates in a fixed
//! per-element order and results are bit-identical across thread counts.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::{Tape, Var};

#[derive(Clone, Copy)]
struct ConvDims {
    b: usize,
    cin: usize,
    cout: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    od: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

/// Output range along one axis such that the input coordinate
/// z*stride + k - pad stays inside [0, extent).
fn axis_range(out_extent: usize, in_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k < pad {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi_in = in_extent + pad;
    let hi = if hi_in > k {
        (((hi_in - k - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv_forward_block(
    out: &mut [f64],
    input: &[f64],
    weight: &[f64],
    bias_o: f64,
    bi: usize,
    o: usize,
    dims: ConvDims,
) {
    let ConvDims {
        cin, d, h, w, k, od, oh, ow, stride, pad, ..
    } = dims;
    out.fill(bias_o);
    for ci in 0..cin {
        let in_base = (bi * cin + ci) * d * h * w;
        let w_base = (o * cin + ci) * k * k * k;
        for kz in 0..k {
            let (zl, zh) = axis_range(od, d, kz, stride, pad);
            for ky in 0..k {
                let (yl, yh) = axis_range(oh, h, ky, stride, pad);
                for kx in 0..k {
                    let (xl, xh) = axis_range(ow, w, kx, stride, pad);
                    let wv = weight[w_base + (kz * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for z in zl..zh {
                        let iz = z * stride + kz - pad;
                        for y in yl..yh {
                            let iy = y * stride + ky - pad;
                            let irow = in_base + (iz * h + iy) * w;
                            let orow = (z * oh + y) * ow;
                            if stride == 1 {
                                let ioff = irow + xl + kx - pad;
                                let seg = xh - xl;
                                let inp = &input[ioff..ioff + seg];
                                let dst = &mut out[orow + xl..orow + xh];
                                for (dv, &sv) in dst.iter_mut().zip(inp) {
                                    *dv += wv * sv;
                                }
                            } else {
                                for x in xl..xh {
                                    let ix = x * stride + kx - pad;
                                    out[orow + x] += wv * input[irow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// Cross-correlation of [B, Cin, D, H, W] with [Cout, Cin, k, k, k]
    /// plus a [Cout] bias. The kernel extent must be odd.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        self.note_conv_call();
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 5 {
            return Err(Error::BadRank {
                op: "conv3d(input)",
                expected: 5,
                shape: ishape,
            });
        }
        if wshape.len() != 5 || wshape[2] != wshape[3] || wshape[3] != wshape[4] {
            return Err(Error::BadShape {
                op: "conv3d",
                msg: "weight must be [Cout, Cin, k, k, k]".into(),
                shape: wshape,
            });
        }
        let k = wshape[2];
        if k % 2 == 0 {
            return Err(Error::BadArgument {
                op: "conv3d",
                msg: format!("kernel extent must be odd, got {k}"),
            });
        }
        if stride == 0 {
            return Err(Error::BadArgument {
                op: "conv3d",
                msg: "stride must be >= 1".into(),
            });
        }
        if ishape[1] != wshape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv3d(channels)",
                lhs: ishape,
                rhs: wshape,
            });
        }
        if bshape != [wshape[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv3d(bias)",
                lhs: bshape,
                rhs: vec![wshape[0]],
            });
        }
        let (b, cin, d, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
        let cout = wshape[0];
        let mut out_sp = [0usize; 3];
        for (axis, &ext) in [d, h, w].iter().enumerate() {
            let span = ext + 2 * padding;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::ConvGeometry {
                    input: ishape,
                    kernel: k,
                    stride,
                    padding,
                });
            }
            out_sp[axis] = (span - k) / stride + 1;
        }
        let (od, oh, ow) = (out_sp[0], out_sp[1], out_sp[2]);
        let dims = ConvDims {
            b,
            cin,
            cout,
            d,
            h,
            w,
            k,
            od,
            oh,
            ow,
            stride,
            pad: padding,
        };

        let mut vals = vec![0.0; b * cout * od * oh * ow];
        {
            let iv = self.values(input);
            let wv = self.values(weight);
            let bv = self.values(bias);
            vals.par_chunks_mut(od * oh * ow)
                .enumerate()
                .for_each(|(chunk, out_block)| {
                    let bi = chunk / cout;
                    let o = chunk % cout;
                    conv_forward_block(out_block, iv, wv, bv[o], bi, o, dims);
                });
        }
        let req = self.requires_grad(input) || self.requires_grad(weight) || self.requires_grad(bias);
        let out = self.push_node(vec![b, cout, od, oh, ow], vals, req);
        if req {
            let reqs = (
                self.requires_grad(input),
                self.requires_grad(weight),
                self.requires_grad(bias),
            );
            self.push_record(out, Box::new(move |vals, og, grads| {
                conv_backward(vals, og, grads, input, weight, bias, dims, reqs);
            }));
        }
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    vals: &[Vec<f64>],
    og: &[f64],
    grads: &mut [Vec<f64>],
    input: Var,
    weight: Var,
    bias: Var,
    dims: ConvDims,
    (req_in, req_w, req_b): (bool, bool, bool),
) {
    let ConvDims {
        b, cin, cout, d, h, w, k, od, oh, ow, stride, pad,
    } = dims;
    let osp = od * oh * ow;

    // Bias gradient: sum of the output gradient per channel.
    if req_b {
        let gb = &mut grads[bias.0];
        for bi in 0..b {
            for o in 0..cout {
                let base = (bi * cout + o) * osp;
                let mut acc = 0.0;
                for v in &og[base..base + osp] {
                    acc += v;
                }
                gb[o] += acc;
            }
        }
    }

    // dInput: parallel over batch slabs.
    if req_in {
        let wv = &vals[weight.0];
        grads[input.0]
            .par_chunks_mut(cin * d * h * w)
            .enumerate()
            .for_each(|(bi, gin)| {
                for o in 0..cout {
                    let og_base = (bi * cout + o) * osp;
                    for ci in 0..cin {
                        let w_base = (o * cin + ci) * k * k * k;
                        let gin_base = ci * d * h * w;
                        for kz in 0..k {
                            let (zl, zh) = axis_range(od, d, kz, stride, pad);
                            for ky in 0..k {
                                let (yl, yh) = axis_range(oh, h, ky, stride, pad);
                                for kx in 0..k {
                                    let (xl, xh) = axis_range(ow, w, kx, stride, pad);
                                    let wval = wv[w_base + (kz * k + ky) * k + kx];
                                    if wval == 0.0 {
                                        continue;
                                    }
                                    for z in zl..zh {
                                        let iz = z * stride + kz - pad;
                                        for y in yl..yh {
                                            let iy = y * stride + ky - pad;
                                            let grow = og_base + (z * oh + y) * ow;
                                            let irow = gin_base + (iz * h + iy) * w;
                                            if stride == 1 {
                                                let ioff = irow + xl + kx - pad;
                                                let dst = &mut gin[ioff..ioff + (xh - xl)];
                                                let src = &og[grow + xl..grow + xh];
                                                for (dv, &sv) in dst.iter_mut().zip(src) {
                                                    *dv += wval * sv;
                                                }
                                            } else {
                                                for x in xl..xh {
                                                    let ix = x * stride + kx - pad;
                                                    gin[irow + ix] += wval * og[grow + x];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }

    // dWeight: parallel over output-channel rows.
    if req_w {
        let iv = &vals[input.0];
        grads[weight.0]
            .par_chunks_mut(cin * k * k * k)
            .enumerate()
            .for_each(|(o, gw_row)| {
                for bi in 0..b {
                    let og_base = (bi * cout + o) * osp;
                    for ci in 0..cin {
                        let in_base = (bi * cin + ci) * d * h * w;
                        for kz in 0..k {
                            let (zl, zh) = axis_range(od, d, kz, stride, pad);
                            for ky in 0..k {
                                let (yl, yh) = axis_range(oh, h, ky, stride, pad);
                                for kx in 0..k {
                                    let (xl, xh) = axis_range(ow, w, kx, stride, pad);
                                    let mut acc = 0.0;
                                    for z in zl..zh {
                                        let iz = z * stride + kz - pad;
                                        for y in yl..yh {
                                            let iy = y * stride + ky - pad;
                                            let grow = og_base + (z * oh + y) * ow;
                                            let irow = in_base + (iz * h + iy) * w;
                                            if stride == 1 {
                                                let ioff = irow + xl + kx - pad;
                                                let src_in = &iv[ioff..ioff + (xh - xl)];
                                                let src_og = &og[grow + xl..grow + xh];
                                                for (&a, &g) in src_in.iter().zip(src_og) {
                                                    acc += a * g;
                                                }
                                            } else {
                                                for x in xl..xh {
                                                    let ix = x * stride + kx - pad;
                                                    acc += iv[irow + ix] * og[grow + x];
                                                }
                                            }
                                        }
                                    }
                                    gw_row[(ci * k * k + kz * k + ky) * k + kx] += acc;
                                }
                            }
                        }
                    }
                }
            });
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn scalar_affine() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 1, 1, 1, 1], vec![2.0], true).unwrap();
        let w = t.leaf(vec![1, 1, 1, 1, 1], vec![3.0], true).unwrap();
        let b = t.leaf(vec![1], vec![1.0], true).unwrap();
        let y = t.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.values(y), &[7.0]);
    }

    #[test]
    fn window_sum() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 1, 3, 3, 3], vec![1.0; 27], true).unwrap();
        let w = t.leaf(vec![1, 1, 3, 3, 3], vec![1.0; 27], true).unwrap();
        let b = t.leaf(vec![1], vec![0.0], true).unwrap();
        let y = t.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1, 1]);
        assert_eq!(t.values(y), &[27.0]);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 1, 4, 4, 4], vec![0.0; 64], true).unwrap();
        let w = t.leaf(vec![1, 1, 3, 3, 3], vec![0.0; 27], true).unwrap();
        let b = t.leaf(vec![1], vec![0.0], true).unwrap();
        // (4 - 3) % 2 != 0 -> non-integral output extent
        assert!(t.conv3d(x, w, b, 2, 0).is_err());
        // channel mismatch
        let w2 = t.leaf(vec![1, 2, 3, 3, 3], vec![0.0; 54], true).unwrap();
        assert!(t.conv3d(x, w2, b, 1, 1).is_err());
        // even kernel
        let w3 = t.leaf(vec![1, 1, 2, 2, 2], vec![0.0; 8], true).unwrap();
        assert!(t.conv3d(x, w3, b, 1, 0).is_err());
    }
}
