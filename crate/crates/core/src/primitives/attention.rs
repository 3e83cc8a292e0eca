//! Multi-head scaled dot-product attention.

use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    groups: usize,
    queries: usize,
    keys: usize,
    dim: usize,
    heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn check(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<AttnGeom> {
    let (&[s, g, d], &[sk, t, dk], &[sv, tv, dv]) = (q, k, v) else {
        return Err(ReidError::shape(
            "attention",
            format!("expected rank-3 q/k/v, got {q:?} {k:?} {v:?}"),
        ));
    };
    if s != sk || s != sv || t != tv || d != dk || d != dv || t == 0 {
        return Err(ReidError::shape("attention", format!("q {q:?}, k {k:?}, v {v:?}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(ReidError::shape(
            "attention",
            format!("dimension {d} is not divisible by {heads} heads"),
        ));
    }
    Ok(AttnGeom {
        groups: s,
        queries: g,
        keys: t,
        dim: d,
        heads,
    })
}

/// Softmax weights `[s, heads, g, t]`.
fn weights(geom: &AttnGeom, q: &[f64], k: &[f64]) -> Vec<f64> {
    let AttnGeom { groups, queries, keys, dim, heads } = *geom;
    let hd = geom.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut a = vec![0.0; groups * heads * queries * keys];
    for s in 0..groups {
        for h in 0..heads {
            for i in 0..queries {
                let qrow = &q[(s * queries + i) * dim + h * hd..(s * queries + i) * dim + (h + 1) * hd];
                let row = &mut a[((s * heads + h) * queries + i) * keys..((s * heads + h) * queries + i + 1) * keys];
                for (j, r) in row.iter_mut().enumerate() {
                    let krow = &k[(s * keys + j) * dim + h * hd..(s * keys + j) * dim + (h + 1) * hd];
                    *r = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                row.iter_mut().for_each(|r| *r /= z);
            }
        }
    }
    a
}

/// Attention weights of queries `q[s,g,d]` over keys `k[s,t,d]`, shaped `[s, heads, g, t]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let geom = check(q.shape(), k.shape(), k.shape(), heads)?;
    Tensor::new(
        &[geom.groups, heads, geom.queries, geom.keys],
        weights(&geom, q.data(), k.data()),
    )
}

impl Graph<'_> {
    /// Per group `s` and head `h`: `softmax(q_h k_hᵀ / sqrt(d_h)) v_h`, heads concatenated.
    ///
    /// `q: [s, g, d]`, `k, v: [s, t, d]` -> `[s, g, d]`. No projections, no residual.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let geom = check(self.shape(q), self.shape(k), self.shape(v), heads)?;
        let AttnGeom { groups, queries, keys, dim, .. } = geom;
        let hd = geom.head_dim();
        let a = weights(&geom, self.value(q).data(), self.value(k).data());
        let vv = self.value(v).data();
        let mut out = vec![0.0; groups * queries * dim];
        for s in 0..groups {
            for h in 0..heads {
                for i in 0..queries {
                    let arow = &a[((s * heads + h) * queries + i) * keys..][..keys];
                    let orow = &mut out[(s * queries + i) * dim + h * hd..][..hd];
                    for (j, &w) in arow.iter().enumerate() {
                        let vrow = &vv[(s * keys + j) * dim + h * hd..][..hd];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[groups, queries, dim], out)?;
        Ok(self.push(
            out,
            &[q, k, v],
            Box::new(move |g, p, _, need| {
                let (qv, kv, vv) = (p[0].data(), p[1].data(), p[2].data());
                let gd = g.data();
                let scale = 1.0 / (hd as f64).sqrt();
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gvv = vec![0.0; vv.len()];
                let mut da = vec![0.0; keys];
                for s in 0..groups {
                    for h in 0..heads {
                        for i in 0..queries {
                            let arow = &a[((s * heads + h) * queries + i) * keys..][..keys];
                            let grow = &gd[(s * queries + i) * dim + h * hd..][..hd];
                            // dA and dV
                            for j in 0..keys {
                                let vrow = &vv[(s * keys + j) * dim + h * hd..][..hd];
                                da[j] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                let gvrow = &mut gvv[(s * keys + j) * dim + h * hd..][..hd];
                                for (o, x) in gvrow.iter_mut().zip(grow) {
                                    *o += arow[j] * x;
                                }
                            }
                            // softmax backward
                            let dot: f64 = da.iter().zip(arow).map(|(x, y)| x * y).sum();
                            let qoff = (s * queries + i) * dim + h * hd;
                            for j in 0..keys {
                                let ds = arow[j] * (da[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let koff = (s * keys + j) * dim + h * hd;
                                for e in 0..hd {
                                    gq[qoff + e] += ds * kv[koff + e];
                                    gk[koff + e] += ds * qv[qoff + e];
                                }
                            }
                        }
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(p[0].shape(), gq).unwrap()),
                    need[1].then(|| Tensor::new(p[1].shape(), gk).unwrap()),
                    need[2].then(|| Tensor::new(p[2].shape(), gvv).unwrap()),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn weights_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::randn(&[3, 4, 16], 2.0, &mut rng);
        let k = Tensor::randn(&[3, 49, 16], 2.0, &mut rng);
        let a = attention_weights(&q, &k, 4).unwrap();
        for row in a.data().chunks(49) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let q = Tensor::zeros(&[1, 1, 10]);
        assert!(attention_weights(&q, &q, 3).is_err());
    }
}
