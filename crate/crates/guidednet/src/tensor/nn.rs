//! Activation, pooling, upsampling and channel softmax.

use crate::error::{Error, Result};

use super::{Tape, Var};

impl Tape {
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let vals: Vec<f64> = self.values(a).iter().map(|&x| x.max(0.0)).collect();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |vals, og, grads| {
                let av = &vals[a.0];
                let ga = &mut grads[a.0];
                for i in 0..og.len() {
                    if av[i] > 0.0 {
                        ga[i] += og[i];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// 2x max-pool over the three spatial extents of a [B, C, D, H, W]
    /// node. Ties route the gradient to the first index in scan order.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 5 {
            return Err(Error::BadRank {
                op: "maxpool2",
                expected: 5,
                shape,
            });
        }
        let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddPoolExtent { shape });
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let av = self.values(a);
        let out_n = b * c * od * oh * ow;
        let mut vals = vec![0.0; out_n];
        let mut argmax = vec![0u32; out_n];
        let mut oi = 0usize;
        for bc in 0..b * c {
            let base = bc * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best_idx = base + (2 * z) * h * w + (2 * y) * w + 2 * x;
                        let mut best = av[best_idx];
                        for kz in 0..2 {
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    let idx = base
                                        + (2 * z + kz) * h * w
                                        + (2 * y + ky) * w
                                        + (2 * x + kx);
                                    if av[idx] > best {
                                        best = av[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        vals[oi] = best;
                        argmax[oi] = best_idx as u32;
                        oi += 1;
                    }
                }
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_node(vec![b, c, od, oh, ow], vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                for (i, &src) in argmax.iter().enumerate() {
                    ga[src as usize] += og[i];
                }
            }));
        }
        Ok(out)
    }

    /// 2x nearest-neighbor upsample over the spatial extents; backward
    /// sums the gradients of the eight replicas.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 5 {
            return Err(Error::BadRank {
                op: "upsample2",
                expected: 5,
                shape,
            });
        }
        let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let av = self.values(a);
        let mut vals = vec![0.0; b * c * od * oh * ow];
        for bc in 0..b * c {
            let ibase = bc * d * h * w;
            let obase = bc * od * oh * ow;
            for z in 0..od {
                for y in 0..oh {
                    let irow = ibase + (z / 2) * h * w + (y / 2) * w;
                    let orow = obase + z * oh * ow + y * ow;
                    for x in 0..ow {
                        vals[orow + x] = av[irow + x / 2];
                    }
                }
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_node(vec![b, c, od, oh, ow], vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                for bc in 0..b * c {
                    let ibase = bc * d * h * w;
                    let obase = bc * od * oh * ow;
                    for z in 0..od {
                        for y in 0..oh {
                            let irow = ibase + (z / 2) * h * w + (y / 2) * w;
                            let orow = obase + z * oh * ow + y * ow;
                            for x in 0..ow {
                                ga[irow + x / 2] += og[orow + x];
                            }
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Softmax over axis 1 of a rank >= 2 node, stabilized by
    /// subtracting the per-position channel max. Covers both
    /// [B, K, D, H, W] probability maps and [V, K] voxel matrices.
    pub fn softmax_axis1(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::BadRank {
                op: "softmax_axis1",
                expected: 2,
                shape,
            });
        }
        let outer = shape[0];
        let k = shape[1];
        if k < 2 {
            return Err(Error::BadShape {
                op: "softmax_axis1",
                msg: "needs at least 2 channels".into(),
                shape,
            });
        }
        let inner: usize = shape[2..].iter().product();
        let av = self.values(a);
        let mut vals = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = f64::NEG_INFINITY;
                for c in 0..k {
                    m = m.max(av[(o * k + c) * inner + i]);
                }
                let mut s = 0.0;
                for c in 0..k {
                    let e = (av[(o * k + c) * inner + i] - m).exp();
                    vals[(o * k + c) * inner + i] = e;
                    s += e;
                }
                for c in 0..k {
                    vals[(o * k + c) * inner + i] /= s;
                }
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |vals, og, grads| {
                let ov = &vals[out.0];
                let ga = &mut grads[a.0];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for c in 0..k {
                            let idx = (o * k + c) * inner + i;
                            dot += og[idx] * ov[idx];
                        }
                        for c in 0..k {
                            let idx = (o * k + c) * inner + i;
                            ga[idx] += ov[idx] * (og[idx] - dot);
                        }
                    }
                }
            }));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![-3.0, 4.0], true).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.values(y), &[0.0, 4.0]);
        let s = t.reduce_sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_cube() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 1, 2, 2, 2], (1..=8).map(f64::from).collect(), true).unwrap();
        let y = t.maxpool2(x).unwrap();
        assert_eq!(t.values(y), &[8.0]);
        let s = t.reduce_sum(y).unwrap();
        t.backward(s).unwrap();
        let mut expected = vec![0.0; 8];
        expected[7] = 1.0;
        assert_eq!(t.grad(x), expected.as_slice());
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 1, 2, 2, 2], vec![5.0; 8], true).unwrap();
        let y = t.maxpool2(x).unwrap();
        let s = t.reduce_sum(y).unwrap();
        t.backward(s).unwrap();
        let mut expected = vec![0.0; 8];
        expected[0] = 1.0;
        assert_eq!(t.grad(x), expected.as_slice());
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 1, 3, 2, 2], vec![0.0; 12], true).unwrap();
        assert!(t.maxpool2(x).is_err());
    }

    #[test]
    fn upsample_replication_and_backward() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 1, 1, 1, 1], vec![5.0], true).unwrap();
        let y = t.upsample2(x).unwrap();
        assert_eq!(t.values(y), vec![5.0; 8].as_slice());
        let s = t.reduce_sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[8.0]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1, 4], vec![0.7; 4], false).unwrap();
        let y = t.softmax_axis1(x).unwrap();
        for &v in t.values(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // K=2, logits [0, ln 3] -> [0.25, 0.75]
        let x2 = t.leaf(vec![1, 2], vec![0.0, 3.0f64.ln()], false).unwrap();
        let y2 = t.softmax_axis1(x2).unwrap();
        assert!((t.values(y2)[0] - 0.25).abs() < 1e-12);
        assert!((t.values(y2)[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut t = Tape::new();
        let logits = vec![0.3, -1.2, 2.0, 0.0, 250.0, 249.0, 251.0, 248.5];
        let x = t.leaf(vec![2, 4], logits.clone(), false).unwrap();
        let y = t.softmax_axis1(x).unwrap();
        let shifted: Vec<f64> = logits.iter().enumerate()
            .map(|(i, &v)| if i < 4 { v + 200.0 } else { v - 200.0 })
            .collect();
        let xs = t.leaf(vec![2, 4], shifted, false).unwrap();
        let ys = t.softmax_axis1(xs).unwrap();
        for (a, b) in t.values(y).iter().zip(t.values(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
