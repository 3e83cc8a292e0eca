use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(ReidError::shape(
            op,
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph<'_> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|g, p, _, need| {
                vec![
                    need[0].then(|| g.zip_map(p[1], |u, v| u * v)),
                    need[1].then(|| g.zip_map(p[0], |u, v| u * v)),
                ]
            }),
        ))
    }

    /// Sum of a list of equally shaped values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| ReidError::InvalidArgument("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, &[a], Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * k))]))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, &[a], Box::new(|g, _, _, _| vec![Some(g.clone())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(
            out,
            &[a],
            Box::new(|g, p, _, _| vec![Some(g.zip_map(p[0], |u, x| if x > 0.0 { u } else { 0.0 }))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(
            out,
            &[a],
            Box::new(|g, _, y, _| vec![Some(g.zip_map(y, |u, s| u * s * (1.0 - s)))]),
        )
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape (bias, position tables).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(ReidError::shape("add_broadcast", format!("{xs:?} + {ys:?}")));
        }
        let inner = self.value(y).len();
        let yv = self.value(y).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, b) in chunk.iter_mut().zip(&yv) {
                *o += b;
            }
        }
        Ok(self.push(
            out,
            &[x, y],
            Box::new(move |g, _, _, need| {
                let gy = need[1].then(|| {
                    let mut acc = vec![0.0; inner];
                    for chunk in g.data().chunks(inner) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    Tensor::new(&ys, acc).expect("suffix shape")
                });
                vec![Some(g.clone()), gy]
            }),
        ))
    }

    /// `x[n,c,h,w] * gate[n,c]`.
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gate) != [xs[0], xs[1]] {
            return Err(ReidError::shape(
                "mul_channel_gate",
                format!("{xs:?} * {:?}", self.shape(gate)),
            ));
        }
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        let gv = self.value(gate).data();
        for (plane, &s) in out.data_mut().chunks_mut(hw).zip(gv) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(
            out,
            &[x, gate],
            Box::new(move |g, p, _, need| {
                let gx = need[0].then(|| {
                    let mut gx = g.clone();
                    for (plane, &s) in gx.data_mut().chunks_mut(hw).zip(p[1].data()) {
                        plane.iter_mut().for_each(|v| *v *= s);
                    }
                    gx
                });
                let gg = need[1].then(|| {
                    let data = g
                        .data()
                        .chunks(hw)
                        .zip(p[0].data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::new(p[1].shape(), data).expect("gate shape")
                });
                vec![gx, gg]
            }),
        ))
    }

    /// `x[n,c,h,w] * gate[n,1,h,w]`.
    pub fn mul_spatial_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gate) != [xs[0], 1, xs[2], xs[3]] {
            return Err(ReidError::shape(
                "mul_spatial_gate",
                format!("{xs:?} * {:?}", self.shape(gate)),
            ));
        }
        let (c, hw) = (xs[1], xs[2] * xs[3]);
        let mut out = self.value(x).clone();
        let gv = self.value(gate).data();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let gp = &gv[(i / c) * hw..(i / c + 1) * hw];
            plane.iter_mut().zip(gp).for_each(|(v, s)| *v *= s);
        }
        Ok(self.push(
            out,
            &[x, gate],
            Box::new(move |g, p, _, need| {
                let gx = need[0].then(|| {
                    let mut gx = g.clone();
                    for (i, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let gp = &p[1].data()[(i / c) * hw..(i / c + 1) * hw];
                        plane.iter_mut().zip(gp).for_each(|(v, s)| *v *= s);
                    }
                    gx
                });
                let gg = need[1].then(|| {
                    let mut gg = Tensor::zeros(p[1].shape());
                    for (i, (gp, xp)) in g.data().chunks(hw).zip(p[0].data().chunks(hw)).enumerate() {
                        let dst = &mut gg.data_mut()[(i / c) * hw..(i / c + 1) * hw];
                        for ((d, a), b) in dst.iter_mut().zip(gp).zip(xp) {
                            *d += a * b;
                        }
                    }
                    gg
                });
                vec![gx, gg]
            }),
        ))
    }
}
