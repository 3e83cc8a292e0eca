use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph<'_> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(g.clone().reshape(&from).expect("reshape back"))]),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(ReidError::shape(
                "slice",
                format!("axis {axis} [{start}, {}) of {xs:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_at_axis(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&xs);
                let dst = gx.data_mut();
                for (o, chunk) in g.data().chunks(len * inner).enumerate() {
                    let base = o * n * inner + start * inner;
                    dst[base..base + len * inner].copy_from_slice(chunk);
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| ReidError::InvalidArgument("concat of nothing".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(ReidError::shape("concat", format!("axis {axis} of {base_shape:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(ReidError::shape(
                    "concat",
                    format!("{s:?} vs {base_shape:?} on axis {axis}"),
                ));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&base_shape, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base_shape.clone();
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        let parent_shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.shape(x).to_vec()).collect();
        Ok(self.push(
            out,
            xs,
            Box::new(move |g, _, _, need| {
                let mut grads: Vec<Vec<f64>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let src = g.data();
                let mut off = 0;
                for _ in 0..outer {
                    for (gbuf, &l) in grads.iter_mut().zip(&lens) {
                        gbuf.extend_from_slice(&src[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&parent_shapes)
                    .zip(need)
                    .map(|((d, s), &n)| n.then(|| Tensor::new(s, d).expect("concat grad")))
                    .collect()
            }),
        ))
    }

    /// Builds `[idx.len(), d]` from rows of `x: [n, d]`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(ReidError::shape("gather_rows", format!("rank-2 input, got {xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= n) {
            return Err(ReidError::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                out.row_mut(r).copy_from_slice(self.value(x).row(*i));
            }
        }
        let idx = idx.to_vec();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&[n, d]);
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        let src = g.row(r);
                        for (a, b) in gx.row_mut(*i).iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[n, c, h, w] -> [n, h*w, c]`: one token per spatial position, row-major.
    pub fn spatial_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(ReidError::shape("spatial_tokens", format!("rank-4 input, got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.value(x).data();
        let mut data = vec![0.0; n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
                }
            }
        }
        let out = Tensor::new(&[n, hw, c], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let src = g.data();
                let mut gx = vec![0.0; n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            gx[(b * c + ch) * hw + p] = src[(b * hw + p) * c + ch];
                        }
                    }
                }
                vec![Some(Tensor::new(&xs, gx).expect("token grad"))]
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Weighted sum `sum(x * w)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        if self.shape(x) != w.shape() {
            return Err(ReidError::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.shape(x), w.shape()),
            ));
        }
        let out = Tensor::scalar(self.value(x).dot(w));
        let w = w.clone();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| vec![Some(w.map(|v| v * g.item()))]),
        ))
    }

    /// Smallest entry, as a one-element tensor.
    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        self.extreme(x, false)
    }

    /// Largest entry, as a one-element tensor.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        self.extreme(x, true)
    }

    fn extreme(&mut self, x: Var, largest: bool) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(ReidError::InvalidArgument("min/max of empty tensor".into()));
        }
        let mut best = 0;
        for (i, &val) in v.data().iter().enumerate() {
            let better = if largest { val > v.data()[best] } else { val < v.data()[best] };
            if better {
                best = i;
            }
        }
        let out = Tensor::scalar(v.data()[best]);
        let shape = v.shape().to_vec();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&shape);
                gx.data_mut()[best] = g.item();
                vec![Some(gx)]
            }),
        ))
    }

    /// Per-row L2 norm, `[n, d] -> [n, 1]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(ReidError::shape("row_norm", format!("rank-2 input, got {xs:?}")));
        }
        let n = xs[0];
        let norms: Vec<f64> = (0..n)
            .map(|i| self.value(x).row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(&[n, 1], norms)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, p, y, _| {
                let mut gx = p[0].clone();
                for i in 0..n {
                    let norm = y.data()[i];
                    let k = if norm > 0.0 { g.data()[i] / norm } else { 0.0 };
                    gx.row_mut(i).iter_mut().for_each(|v| *v *= k);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Scales each row of `[n, d]` to unit L2 norm (zero rows stay zero).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(ReidError::shape("l2_normalize", format!("rank-2 input, got {xs:?}")));
        }
        let n = xs[0];
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norms.push(norm);
        }
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, y, _| {
                let mut gx = g.clone();
                for (i, &norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = gx.row_mut(i);
                    if norm > 0.0 {
                        let proj: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - proj * yv) / norm;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
