use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable scale/shift plus running statistics of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormState {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// `[n, c]` or `[n, c, h, w]` → (n, c, spatial extent).
fn bn_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

impl Graph<'_> {
    /// Batch normalization over every axis except the channel axis.
    ///
    /// In training mode statistics come from the rows selected by `mask`
    /// (all rows when `None`) and the running statistics are queued for update.
    /// Rows outside the mask are still normalized with those statistics.
    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormState, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, hw) = bn_layout(&shape)
            .ok_or_else(|| ReidError::shape("batch_norm", format!("rank 2 or 4 input, got {shape:?}")))?;
        if self.param_value(bn.gamma).shape() != [c] {
            return Err(ReidError::shape(
                "batch_norm",
                format!("{c} channels vs scale {:?}", self.param_value(bn.gamma).shape()),
            ));
        }
        let mask: Vec<bool> = match mask {
            Some(m) if m.len() != n => {
                return Err(ReidError::shape("batch_norm", format!("mask of {} for batch {n}", m.len())))
            }
            Some(m) => m.to_vec(),
            None => vec![true; n],
        };
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let xv = self.value(x).data().to_vec();
        let idx = move |b: usize, ch: usize, p: usize| (b * c + ch) * hw + p;

        let (mean, var) = if self.is_training() {
            let count = mask.iter().filter(|&&m| m).count() * hw;
            if count < 2 {
                return Err(ReidError::BatchTooSmall(count));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in (0..n).filter(|&b| mask[b]) {
                    for p in 0..hw {
                        s += xv[idx(b, ch, p)];
                    }
                }
                let mu = s / count as f64;
                let mut ss = 0.0;
                for b in (0..n).filter(|&b| mask[b]) {
                    for p in 0..hw {
                        let d = xv[idx(b, ch, p)] - mu;
                        ss += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = ss / count as f64;
            }
            let rm = self.param_value(bn.running_mean);
            let rv = self.param_value(bn.running_var);
            let unbias = count as f64 / (count as f64 - 1.0);
            let new_mean = Tensor::from_fn(&[c], |i| {
                (1.0 - BN_MOMENTUM) * rm.data()[i] + BN_MOMENTUM * mean[i]
            });
            let new_var = Tensor::from_fn(&[c], |i| {
                (1.0 - BN_MOMENTUM) * rv.data()[i] + BN_MOMENTUM * var[i] * unbias
            });
            self.record_stat_update(bn.running_mean, new_mean);
            self.record_stat_update(bn.running_var, new_var);
            (mean, var)
        } else {
            (
                self.param_value(bn.running_mean).data().to_vec(),
                self.param_value(bn.running_var).data().to_vec(),
            )
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = idx(b, ch, p);
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = idx(b, ch, p);
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let training = self.is_training();
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, _, need| {
                let gd = g.data();
                let gamma = p[1].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for q in 0..hw {
                            let i = idx(b, ch, q);
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                let gx = need[0].then(|| {
                    let mut gx = vec![0.0; n * c * hw];
                    let count = (mask.iter().filter(|&&m| m).count() * hw) as f64;
                    for ch in 0..c {
                        // sums of dL/dxhat and dL/dxhat * xhat over every row
                        let sum_g = gamma[ch] * dbeta[ch];
                        let sum_gx = gamma[ch] * dgamma[ch];
                        for b in 0..n {
                            for q in 0..hw {
                                let i = idx(b, ch, q);
                                let gxhat = gd[i] * gamma[ch];
                                let mut v = inv_std[ch] * gxhat;
                                if training && mask[b] {
                                    v -= inv_std[ch] / count * (sum_g + xhat[i] * sum_gx);
                                }
                                gx[i] = v;
                            }
                        }
                    }
                    Tensor::new(&shape, gx).unwrap()
                });
                vec![
                    gx,
                    need[1].then(|| Tensor::new(&[c], dgamma.clone()).unwrap()),
                    need[2].then(|| Tensor::new(&[c], dbeta).unwrap()),
                ]
            }),
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(ReidError::shape(
                "layer_norm",
                format!("feature dimension must be at least 2, got {shape:?}"),
            ));
        }
        if self.param_value(gamma).shape() != [d] {
            return Err(ReidError::shape(
                "layer_norm",
                format!("dim {d} vs scale {:?}", self.param_value(gamma).shape()),
            ));
        }
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = s;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * s;
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| gv[i % d] * v + bv[i % d])
            .collect();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, _, need| {
                let gd = g.data();
                let gamma = p[1].data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut gx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for j in 0..d {
                        let i = r * d + j;
                        dgamma[j] += gd[i] * xhat[i];
                        dbeta[j] += gd[i];
                        let gh = gd[i] * gamma[j];
                        sum_g += gh;
                        sum_gx += gh * xhat[i];
                    }
                    for j in 0..d {
                        let i = r * d + j;
                        let gh = gd[i] * gamma[j];
                        gx[i] = inv_std[r] / d as f64 * (d as f64 * gh - sum_g - xhat[i] * sum_gx);
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(&shape, gx).unwrap()),
                    need[1].then(|| Tensor::new(&[d], dgamma).unwrap()),
                    need[2].then(|| Tensor::new(&[d], dbeta).unwrap()),
                ]
            }),
        ))
    }
}
