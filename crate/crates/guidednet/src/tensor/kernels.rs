//! Elementwise and structural kernels, each with its backward rule.

use crate::error::{Error, Result};

use super::{numel, Tape, Var, LOG_FLOOR};

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        same_shape(op, self.shape(a), self.shape(b))?;
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let vals: Vec<f64> = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_node(shape, vals, req);
        if req {
            let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
            self.push_record(out, Box::new(move |_vals, og, grads| {
                if ra {
                    for (g, &d) in grads[a.0].iter_mut().zip(og) {
                        *g += d;
                    }
                }
                if rb {
                    for (g, &d) in grads[b.0].iter_mut().zip(og) {
                        *g += d;
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("sub", a, b)?;
        let vals: Vec<f64> = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_node(shape, vals, req);
        if req {
            let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
            self.push_record(out, Box::new(move |_vals, og, grads| {
                if ra {
                    for (g, &d) in grads[a.0].iter_mut().zip(og) {
                        *g += d;
                    }
                }
                if rb {
                    for (g, &d) in grads[b.0].iter_mut().zip(og) {
                        *g -= d;
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let vals: Vec<f64> = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_node(shape, vals, req);
        if req {
            let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
            self.push_record(out, Box::new(move |vals, og, grads| {
                if ra {
                    let bv = &vals[b.0];
                    for i in 0..og.len() {
                        grads[a.0][i] += og[i] * bv[i];
                    }
                }
                if rb {
                    let av = &vals[a.0];
                    for i in 0..og.len() {
                        grads[b.0][i] += og[i] * av[i];
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("div", a, b)?;
        let vals: Vec<f64> = self.values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x / y)
            .collect();
        let req = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push_node(shape, vals, req);
        if req {
            let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
            self.push_record(out, Box::new(move |vals, og, grads| {
                let bv = &vals[b.0];
                if ra {
                    for i in 0..og.len() {
                        grads[a.0][i] += og[i] / bv[i];
                    }
                }
                if rb {
                    let av = &vals[a.0];
                    for i in 0..og.len() {
                        grads[b.0][i] -= og[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let vals: Vec<f64> = self.values(a).iter().map(|x| -x).collect();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                for (g, &d) in grads[a.0].iter_mut().zip(og) {
                    *g -= d;
                }
            }));
        }
        Ok(out)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let vals: Vec<f64> = self.values(a).iter().map(|x| x + c).collect();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                for (g, &d) in grads[a.0].iter_mut().zip(og) {
                    *g += d;
                }
            }));
        }
        Ok(out)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let vals: Vec<f64> = self.values(a).iter().map(|x| x * c).collect();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                for (g, &d) in grads[a.0].iter_mut().zip(og) {
                    *g += d * c;
                }
            }));
        }
        Ok(out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let vals: Vec<f64> = self.values(a).iter().map(|x| x.exp()).collect();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |vals, og, grads| {
                let ov = &vals[out.0];
                for i in 0..og.len() {
                    grads[a.0][i] += og[i] * ov[i];
                }
            }));
        }
        Ok(out)
    }

    /// Natural log with the input floored at [`LOG_FLOOR`]; below the
    /// floor the gradient is zero, matching log(clamp(x, floor)).
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let vals: Vec<f64> = self.values(a)
            .iter()
            .map(|&x| x.max(LOG_FLOOR).ln())
            .collect();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |vals, og, grads| {
                let av = &vals[a.0];
                for i in 0..og.len() {
                    if av[i] >= LOG_FLOOR {
                        grads[a.0][i] += og[i] / av[i];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Elementwise clamp to [lo, hi]; gradient passes inside the
    /// closed interval and is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::BadArgument {
                op: "clamp",
                msg: format!("lo {lo} > hi {hi}"),
            });
        }
        let shape = self.shape(a).to_vec();
        let vals: Vec<f64> = self.values(a).iter().map(|x| x.clamp(lo, hi)).collect();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |vals, og, grads| {
                let av = &vals[a.0];
                for i in 0..og.len() {
                    if av[i] >= lo && av[i] <= hi {
                        grads[a.0][i] += og[i];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// max(sqrt(x), floor) fused so a zero variance cannot emit NaN
    /// through the chain rule; gradient is zero in the floored region.
    pub fn sqrt_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        if floor <= 0.0 {
            return Err(Error::BadArgument {
                op: "sqrt_floor",
                msg: format!("floor must be positive, got {floor}"),
            });
        }
        let shape = self.shape(a).to_vec();
        let vals: Vec<f64> = self.values(a)
            .iter()
            .map(|&x| x.max(0.0).sqrt().max(floor))
            .collect();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |vals, og, grads| {
                let av = &vals[a.0];
                let ov = &vals[out.0];
                for i in 0..og.len() {
                    let root = av[i].max(0.0).sqrt();
                    if root > floor {
                        grads[a.0][i] += og[i] / (2.0 * ov[i]);
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.numel_of(a) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let vals = self.values(a).to_vec();
        let req = self.requires_grad(a);
        let out = self.push_node(shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                for (g, &d) in grads[a.0].iter_mut().zip(og) {
                    *g += d;
                }
            }));
        }
        Ok(out)
    }

    /// Stretch leading singleton extents up to `target`. The source
    /// shape is left-padded with ones; every stretched dim must precede
    /// every non-singleton dim.
    pub fn broadcast_to(&mut self, a: Var, target: Vec<usize>) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if src == target {
            return Ok(a);
        }
        if src.len() > target.len() {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src,
                rhs: target,
            });
        }
        let pad = target.len() - src.len();
        let mut padded = vec![1usize; pad];
        padded.extend_from_slice(&src);
        let mut first_wide = target.len();
        for (i, &p) in padded.iter().enumerate() {
            if p != 1 {
                first_wide = i;
                break;
            }
        }
        for i in 0..target.len() {
            let ok = if i < first_wide {
                padded[i] == 1
            } else {
                padded[i] == target[i]
            };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: src,
                    rhs: target,
                });
            }
        }
        let tile = numel(&padded);
        let reps = numel(&target) / tile;
        let mut vals = Vec::with_capacity(reps * tile);
        for _ in 0..reps {
            vals.extend_from_slice(self.values(a));
        }
        let req = self.requires_grad(a);
        let out = self.push_node(target, vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                for r in 0..reps {
                    let base = r * tile;
                    for i in 0..tile {
                        ga[i] += og[base + i];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Contiguous slice of `len` extents starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::BadArgument {
                op: "narrow",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(Error::BadArgument {
                op: "narrow",
                msg: format!(
                    "slice {start}..{} out of range for extent {}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let av = self.values(a);
        let mut vals = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            vals.extend_from_slice(&av[base..base + len * inner]);
        }
        let req = self.requires_grad(a);
        let out = self.push_node(out_shape, vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * mid + start) * inner;
                    for i in 0..len * inner {
                        ga[dst + i] += og[src + i];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Concatenate along axis 1. All parts must agree on every other
    /// extent.
    pub fn concat_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::BadArgument {
                op: "concat_axis1",
                msg: "no operands".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::BadRank {
                op: "concat_axis1",
                expected: 2,
                shape: first,
            });
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != outer || s[2..] != first[2..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_axis1",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out_shape = first.clone();
        out_shape[1] = total;
        let mut vals = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.values(p);
            for o in 0..outer {
                let src = o * w * inner;
                let dst = (o * total + offset) * inner;
                vals[dst..dst + w * inner].copy_from_slice(&pv[src..src + w * inner]);
            }
            offset += w;
        }
        let req = parts.iter().any(|&p| self.requires_grad(p));
        let out = self.push_node(out_shape, vals, req);
        if req {
            let pieces: Vec<(usize, usize, bool)> = {
                let mut acc = Vec::new();
                let mut off = 0usize;
                for (&p, &w) in parts.iter().zip(&widths) {
                    acc.push((p.0, off, self.requires_grad(Var(p.0))));
                    off += w;
                }
                acc
            };
            let widths = widths.clone();
            self.push_record(out, Box::new(move |_vals, og, grads| {
                for ((pid, off, preq), &w) in pieces.iter().zip(&widths) {
                    if !preq {
                        continue;
                    }
                    let gp = &mut grads[*pid];
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        let dst = o * w * inner;
                        for i in 0..w * inner {
                            gp[dst + i] += og[src + i];
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Select (and reorder) extents along axis 1 by index.
    pub fn select_axis1(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::BadRank {
                op: "select_axis1",
                expected: 2,
                shape,
            });
        }
        let outer = shape[0];
        let mid = shape[1];
        let inner: usize = shape[2..].iter().product();
        for &id in ids {
            if id >= mid {
                return Err(Error::BadArgument {
                    op: "select_axis1",
                    msg: format!("index {id} out of range for extent {mid}"),
                });
            }
        }
        let mut out_shape = shape.clone();
        out_shape[1] = ids.len();
        let av = self.values(a);
        let mut vals = Vec::with_capacity(outer * ids.len() * inner);
        for o in 0..outer {
            for &id in ids {
                let base = (o * mid + id) * inner;
                vals.extend_from_slice(&av[base..base + inner]);
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_node(out_shape, vals, req);
        if req {
            let ids = ids.to_vec();
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                let k = ids.len();
                for o in 0..outer {
                    for (j, &id) in ids.iter().enumerate() {
                        let src = (o * k + j) * inner;
                        let dst = (o * mid + id) * inner;
                        for i in 0..inner {
                            ga[dst + i] += og[src + i];
                        }
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.values(a).iter().sum();
        let req = self.requires_grad(a);
        let out = self.push_node(vec![], vec![s], req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let d = og[0];
                for g in grads[a.0].iter_mut() {
                    *g += d;
                }
            }));
        }
        Ok(out)
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let n = self.numel_of(a);
        if n == 0 {
            return Err(Error::BadArgument {
                op: "reduce_mean",
                msg: "empty tensor".into(),
            });
        }
        let s: f64 = self.values(a).iter().sum();
        let mean = s / n as f64;
        let req = self.requires_grad(a);
        let out = self.push_node(vec![], vec![mean], req);
        if req {
            let inv = 1.0 / n as f64;
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let d = og[0] * inv;
                for g in grads[a.0].iter_mut() {
                    *g += d;
                }
            }));
        }
        Ok(out)
    }

    /// Column sums of a rank-2 node: [N, C] -> [C].
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::BadRank {
                op: "sum_axis0",
                expected: 2,
                shape,
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let av = self.values(a);
        let mut vals = vec![0.0; c];
        for r in 0..n {
            for j in 0..c {
                vals[j] += av[r * c + j];
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_node(vec![c], vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                for r in 0..n {
                    for j in 0..c {
                        ga[r * c + j] += og[j];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Row sums of a rank-2 node: [N, C] -> [N].
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::BadRank {
                op: "sum_axis1",
                expected: 2,
                shape,
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let av = self.values(a);
        let vals: Vec<f64> = (0..n).map(|r| av[r * c..(r + 1) * c].iter().sum()).collect();
        let req = self.requires_grad(a);
        let out = self.push_node(vec![n], vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                for r in 0..n {
                    for j in 0..c {
                        ga[r * c + j] += og[r];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Column means of a rank-2 node: [N, C] -> [C].
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::BadShape {
                op: "mean_axis0",
                msg: "needs a non-empty rank-2 operand".into(),
                shape,
            });
        }
        let s = self.sum_axis0(a)?;
        self.mul_scalar(s, 1.0 / shape[0] as f64)
    }

    /// Row-scalar product: out[n, c] = x[n, c] * s[n].
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() != 2 || ss.len() != 1 || ss[0] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: xs,
                rhs: ss,
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let xv = self.values(x);
        let sv = self.values(s);
        let mut vals = Vec::with_capacity(n * c);
        for r in 0..n {
            for j in 0..c {
                vals.push(xv[r * c + j] * sv[r]);
            }
        }
        let req = self.requires_grad(x) || self.requires_grad(s);
        let out = self.push_node(xs, vals, req);
        if req {
            let (rx, rs) = (self.requires_grad(x), self.requires_grad(s));
            self.push_record(out, Box::new(move |vals, og, grads| {
                if rx {
                    let sv = &vals[s.0];
                    let gx = &mut grads[x.0];
                    for r in 0..n {
                        for j in 0..c {
                            gx[r * c + j] += og[r * c + j] * sv[r];
                        }
                    }
                }
                if rs {
                    let xv = &vals[x.0];
                    let gs = &mut grads[s.0];
                    for r in 0..n {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += og[r * c + j] * xv[r * c + j];
                        }
                        gs[r] += acc;
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Gather rows of a rank-2 node; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::BadRank {
                op: "gather_rows",
                expected: 2,
                shape,
            });
        }
        let (n, c) = (shape[0], shape[1]);
        for &i in idx {
            if i >= n {
                return Err(Error::BadArgument {
                    op: "gather_rows",
                    msg: format!("row {i} out of range for {n}"),
                });
            }
        }
        let av = self.values(a);
        let mut vals = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            vals.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let req = self.requires_grad(a);
        let out = self.push_node(vec![idx.len(), c], vals, req);
        if req {
            let idx = idx.to_vec();
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += og[r * c + j];
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Rearrange [B, C, D, H, W] into a voxel-major matrix
    /// [B*D*H*W, C]; row order is batch-major then spatial scan order.
    pub fn to_voxel_matrix(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 5 {
            return Err(Error::BadRank {
                op: "to_voxel_matrix",
                expected: 5,
                shape,
            });
        }
        let (b, c) = (shape[0], shape[1]);
        let sp: usize = shape[2..].iter().product();
        let av = self.values(a);
        let mut vals = vec![0.0; b * sp * c];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * sp;
                for s in 0..sp {
                    vals[(bi * sp + s) * c + ci] = av[src + s];
                }
            }
        }
        let req = self.requires_grad(a);
        let out = self.push_node(vec![b * sp, c], vals, req);
        if req {
            self.push_record(out, Box::new(move |_vals, og, grads| {
                let ga = &mut grads[a.0];
                for bi in 0..b {
                    for ci in 0..c {
                        let dst = (bi * c + ci) * sp;
                        for s in 0..sp {
                            ga[dst + s] += og[(bi * sp + s) * c + ci];
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
    use crate::tensor::{Tape, LOG_FLOOR};

    #[test]
    fn exp_identity() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![0.0], true).unwrap();
        let y = t.exp(x).unwrap();
        assert_eq!(t.values(y), &[1.0]);
    }

    #[test]
    fn log_floor_guard() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1], vec![0.0], true).unwrap();
        let c = t.clamp(x, LOG_FLOOR, f64::INFINITY).unwrap();
        let y = t.log(c).unwrap();
        let expected = (1e-12f64).ln();
        assert!((t.values(y)[0] - expected).abs() < 1e-9);
        assert!((t.values(y)[0] - (-27.631_021_115_928_547)).abs() < 1e-6);
        // log applies the same floor on its own
        let mut t2 = Tape::new();
        let x2 = t2.leaf(vec![1], vec![0.0], true).unwrap();
        let y2 = t2.log(x2).unwrap();
        assert_eq!(t2.values(y2)[0], expected);
    }

    #[test]
    fn reduce_mean_arith() {
        let mut t = Tape::new();
        let x = t.leaf(vec![4], vec![1.0, 2.0, 3.0, 6.0], true).unwrap();
        let y = t.reduce_mean(x).unwrap();
        assert_eq!(t.scalar_value(y), 3.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), &[0.25; 4]);
    }

    #[test]
    fn shape_mismatch_names_kernel_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let b = t.leaf(vec![3], vec![1.0, 2.0, 3.0], true).unwrap();
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn broadcast_leading_only() {
        let mut t = Tape::new();
        let row = t.leaf(vec![1, 3], vec![1.0, 2.0, 3.0], true).unwrap();
        let wide = t.broadcast_to(row, vec![2, 3]).unwrap();
        assert_eq!(t.values(wide), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = t.reduce_sum(wide).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(row), &[2.0, 2.0, 2.0]);

        let mut t2 = Tape::new();
        let col = t2.leaf(vec![3, 1], vec![1.0, 2.0, 3.0], true).unwrap();
        assert!(t2.broadcast_to(col, vec![3, 2]).is_err());
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2, 3], (0..6).map(f64::from).collect(), true).unwrap();
        let a = t.narrow(x, 1, 0, 1).unwrap();
        let b = t.narrow(x, 1, 1, 2).unwrap();
        let back = t.concat_axis1(&[a, b]).unwrap();
        assert_eq!(t.values(back), t.values(x));
    }

    #[test]
    fn to_voxel_matrix_layout() {
        let mut t = Tape::new();
        // B=1, C=2, D=1, H=1, W=2 -> rows are voxels, columns channels
        let x = t.leaf(vec![1, 2, 1, 1, 2], vec![1.0, 2.0, 10.0, 20.0], true).unwrap();
        let m = t.to_voxel_matrix(x).unwrap();
        assert_eq!(t.shape(m), &[2, 2]);
        assert_eq!(t.values(m), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn gather_scatter_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3, 1], vec![1.0, 2.0, 3.0], true).unwrap();
        let g = t.gather_rows(x, &[0, 0, 2]).unwrap();
        let s = t.reduce_sum(g).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[2.0, 0.0, 1.0]);
    }
}
