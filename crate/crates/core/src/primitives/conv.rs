use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output columns `ox` for which input column `ox*stride + kx - pad` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        range_for(self.wo, self.w, self.stride, kx, self.pad)
    }

    fn row_range(&self, ky: usize) -> (usize, usize) {
        range_for(self.ho, self.h, self.stride, ky, self.pad)
    }
}

fn range_for(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= in_len - 1
    let limit = in_len + pad - 1;
    let hi = if k > limit { 0 } else { ((limit - k) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

/// Unfolds image `b` into `[c*k*k, ho*wo]` patch rows (zero outside the image).
fn im2col(geom: &ConvGeom, x: &[f64], b: usize, col: &mut [f64]) {
    let ConvGeom { c, h, w, k, stride, pad, ho, wo, .. } = *geom;
    let p = ho * wo;
    col.iter_mut().for_each(|v| *v = 0.0);
    for ic in 0..c {
        let xin = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
        for ky in 0..k {
            let (y0, y1) = geom.row_range(ky);
            for kx in 0..k {
                let (x0, x1) = geom.col_range(kx);
                let row = &mut col[((ic * k + ky) * k + kx) * p..((ic * k + ky) * k + kx + 1) * p];
                for oy in y0..y1 {
                    let irow = &xin[(oy * stride + ky - pad) * w..];
                    let orow = &mut row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let ix0 = x0 + kx - pad;
                        orow[x0..x1].copy_from_slice(&irow[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            orow[ox] = irow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adds patch-row gradients back onto image `b` of `gx`.
fn col2im(geom: &ConvGeom, col: &[f64], b: usize, gx: &mut [f64]) {
    let ConvGeom { c, h, w, k, stride, pad, ho, wo, .. } = *geom;
    let p = ho * wo;
    for ic in 0..c {
        let gxin = &mut gx[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
        for ky in 0..k {
            let (y0, y1) = geom.row_range(ky);
            for kx in 0..k {
                let (x0, x1) = geom.col_range(kx);
                let row = &col[((ic * k + ky) * k + kx) * p..((ic * k + ky) * k + kx + 1) * p];
                for oy in y0..y1 {
                    let base = (oy * stride + ky - pad) * w;
                    let grow = &row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let ix0 = base + x0 + kx - pad;
                        for (d, g) in gxin[ix0..ix0 + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                            *d += g;
                        }
                    } else {
                        for ox in x0..x1 {
                            gxin[base + ox * stride + kx - pad] += grow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn forward(geom: &ConvGeom, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let ConvGeom { n, c, o, k, ho, wo, .. } = *geom;
    let (p, r) = (ho * wo, c * k * k);
    let mut out = vec![0.0; n * o * p];
    let mut col = vec![0.0; r * p];
    for b in 0..n {
        im2col(geom, x, b, &mut col);
        for oc in 0..o {
            let plane = &mut out[(b * o + oc) * p..(b * o + oc + 1) * p];
            if let Some(bias) = bias {
                plane.iter_mut().for_each(|v| *v = bias[oc]);
            }
            for (ri, &wv) in wt[oc * r..(oc + 1) * r].iter().enumerate() {
                if wv != 0.0 {
                    axpy(plane, wv, &col[ri * p..(ri + 1) * p]);
                }
            }
        }
    }
    out
}

fn backward_input(geom: &ConvGeom, g: &[f64], wt: &[f64]) -> Vec<f64> {
    let ConvGeom { n, c, h, w, o, k, ho, wo, .. } = *geom;
    let (p, r) = (ho * wo, c * k * k);
    let mut gx = vec![0.0; n * c * h * w];
    let mut gcol = vec![0.0; r * p];
    for b in 0..n {
        gcol.iter_mut().for_each(|v| *v = 0.0);
        for oc in 0..o {
            let gp = &g[(b * o + oc) * p..(b * o + oc + 1) * p];
            for (ri, &wv) in wt[oc * r..(oc + 1) * r].iter().enumerate() {
                if wv != 0.0 {
                    axpy(&mut gcol[ri * p..(ri + 1) * p], wv, gp);
                }
            }
        }
        col2im(geom, &gcol, b, &mut gx);
    }
    gx
}

fn backward_weight(geom: &ConvGeom, g: &[f64], x: &[f64]) -> Vec<f64> {
    let ConvGeom { n, c, o, k, ho, wo, .. } = *geom;
    let (p, r) = (ho * wo, c * k * k);
    let mut gw = vec![0.0; o * r];
    let mut col = vec![0.0; r * p];
    for b in 0..n {
        im2col(geom, x, b, &mut col);
        for oc in 0..o {
            let gp = &g[(b * o + oc) * p..(b * o + oc + 1) * p];
            for ri in 0..r {
                gw[oc * r + ri] += dot(gp, &col[ri * p..(ri + 1) * p]);
            }
        }
    }
    gw
}

impl Graph<'_> {
    /// 2-D cross-correlation of `x[n,c,h,w]` with `weight[o,c,k,k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(ReidError::shape(
                "conv2d",
                format!("input {xs:?}, kernel {ws:?}, stride {stride}"),
            ));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(ReidError::shape(
                "conv2d",
                format!("{}x{} input with padding {pad} is smaller than kernel {k}", xs[2], xs[3]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(ReidError::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), ws[0]),
                ));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let data = forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[geom.n, geom.o, geom.ho, geom.wo], data)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            out,
            &parents,
            Box::new(move |g, p, _, need| {
                let gx = need[0]
                    .then(|| Tensor::new(&xs, backward_input(&geom, g.data(), p[1].data())).unwrap());
                let gw = need[1]
                    .then(|| Tensor::new(&ws, backward_weight(&geom, g.data(), p[0].data())).unwrap());
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(need[2].then(|| {
                        let hw = geom.ho * geom.wo;
                        let mut gb = vec![0.0; geom.o];
                        for (i, plane) in g.data().chunks(hw).enumerate() {
                            gb[i % geom.o] += plane.iter().sum::<f64>();
                        }
                        Tensor::new(&[geom.o], gb).unwrap()
                    }));
                }
                grads
            }),
        ))
    }
}
