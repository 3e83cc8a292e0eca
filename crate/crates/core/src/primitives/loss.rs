use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

impl Graph<'_> {
    /// Mean binary cross-entropy of probabilities `q` (any shape) against 0/1 targets.
    ///
    /// Also reports whether any probability had to be clamped.
    pub fn binary_cross_entropy(&mut self, q: Var, targets: &[f64]) -> Result<(Var, bool)> {
        let n = self.value(q).len();
        if n != targets.len() || n == 0 {
            return Err(ReidError::shape(
                "binary_cross_entropy",
                format!("{n} probabilities vs {} targets", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(ReidError::InvalidArgument(format!("target {bad} is not 0 or 1")));
        }
        let qv = self.value(q).data();
        let clamped = qv.iter().any(|&p| !(PROB_EPS..=1.0 - PROB_EPS).contains(&p));
        let loss: f64 = qv
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n as f64;
        let targets = targets.to_vec();
        let var = self.push(
            Tensor::scalar(loss),
            &[q],
            Box::new(move |g, p, _, _| {
                let k = g.item() / n as f64;
                let data = p[0]
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&p, &y)| {
                        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        -k * (y / p - (1.0 - y) / (1.0 - p))
                    })
                    .collect();
                vec![Some(Tensor::new(p[0].shape(), data).unwrap())]
            }),
        );
        Ok((var, clamped))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    ///
    /// `valid` (row-major, same size as `logits`) excludes entries from the
    /// softmax; a row's target entry must be valid.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        valid: Option<&[bool]>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, k] = shape[..] else {
            return Err(ReidError::shape("softmax_cross_entropy", format!("rank-2 logits, got {shape:?}")));
        };
        if targets.len() != n || n == 0 {
            return Err(ReidError::shape(
                "softmax_cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        let valid: Vec<bool> = match valid {
            Some(v) if v.len() != n * k => {
                return Err(ReidError::shape("softmax_cross_entropy", "mask size"))
            }
            Some(v) => v.to_vec(),
            None => vec![true; n * k],
        };
        for (r, &t) in targets.iter().enumerate() {
            if t >= k || !valid[r * k + t] {
                return Err(ReidError::InvalidLabel { label: t, size: k });
            }
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let vrow = &valid[r * k..(r + 1) * k];
            let m = row
                .iter()
                .zip(vrow)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                if vrow[j] {
                    probs[r * k + j] = (row[j] - m).exp();
                    z += probs[r * k + j];
                }
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss -= probs[r * k + targets[r]].ln();
        }
        let targets = targets.to_vec();
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            &[logits],
            Box::new(move |g, _, _, _| {
                let scale = g.item() / n as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * k + t] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::new(&[n, k], gl).unwrap())]
            }),
        ))
    }
}
