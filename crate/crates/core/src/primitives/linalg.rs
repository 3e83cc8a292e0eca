use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `a[m,k] · b[n,k]ᵀ -> [m,n]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m,n] · b[n,k] -> [m,k]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let orow = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let s = a[i * n + j];
            if s == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[j * k..(j + 1) * k]) {
                *o += s * bv;
            }
        }
    }
    out
}

/// `a[n,m]ᵀ · b[n,k] -> [m,k]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for r in 0..n {
        let brow = &b[r * k..(r + 1) * k];
        for i in 0..m {
            let s = a[r * m + i];
            if s == 0.0 {
                continue;
            }
            for (o, bv) in out[i * k..(i + 1) * k].iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

impl Graph<'_> {
    /// `x[m,k] · w[n,k]ᵀ -> [m,n]`, the layout of a linear layer's weight.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(ReidError::shape("matmul", format!("{xs:?} · {ws:?}ᵀ")));
        }
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        let out = Tensor::new(
            &[m, n],
            matmul_nt(self.value(x).data(), self.value(w).data(), m, k, n),
        )?;
        Ok(self.push(
            out,
            &[x, w],
            Box::new(move |g, p, _, need| {
                let gx = need[0]
                    .then(|| Tensor::new(&[m, k], matmul_nn(g.data(), p[1].data(), m, n, k)).unwrap());
                let gw = need[1]
                    .then(|| Tensor::new(&[n, k], matmul_tn(g.data(), p[0].data(), m, n, k)).unwrap());
                vec![gx, gw]
            }),
        ))
    }

    /// Affine map over the last axis of `x[m, k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }
}
