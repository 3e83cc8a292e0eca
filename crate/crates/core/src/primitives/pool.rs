use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn rank4(g: &Graph, op: &'static str, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, c, h, w] if h > 0 && w > 0 => Ok([n, c, h, w]),
        ref s => Err(ReidError::shape(op, format!("expected [n,c,h,w], got {s:?}"))),
    }
}

/// Half-open window `[floor(i*len/out), ceil((i+1)*len/out))`.
pub(crate) fn adaptive_window(i: usize, out: usize, len: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

fn first_argmax(vals: impl Iterator<Item = (usize, f64)>) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, v) in vals {
        if best.0 == usize::MAX || v > best.1 {
            best = (i, v);
        }
    }
    best
}

impl Graph<'_> {
    /// `[n,c,h,w] -> [n,c]` spatial maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4(self, "global_max_pool", x)?;
        let hw = h * w;
        let mut arg = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for (i, plane) in self.value(x).data().chunks(hw).enumerate() {
            let (j, v) = first_argmax(plane.iter().copied().enumerate());
            arg.push(i * hw + j);
            out.push(v);
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for (&a, gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[a] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[n,c,h,w] -> [n,c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4(self, "global_avg_pool", x)?;
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for (plane, gv) in gx.data_mut().chunks_mut(hw).zip(g.data()) {
                    plane.iter_mut().for_each(|v| *v = gv / hw as f64);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[n,c,h,w] -> [n,1,h,w]` mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4(self, "channel_mean", x)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let plane = &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, v) in out[b * hw..(b + 1) * hw].iter_mut().zip(plane) {
                    *o += v / c as f64;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&[n, 1, h, w], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for b in 0..n {
                    let gp = &g.data()[b * hw..(b + 1) * hw];
                    for ch in 0..c {
                        let dst = &mut gx.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for (d, v) in dst.iter_mut().zip(gp) {
                            *d = v / c as f64;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[n,c,h,w] -> [n,1,h,w]` maximum over channels.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4(self, "channel_max", x)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        let mut arg = vec![0usize; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let (ch, v) = first_argmax((0..c).map(|ch| (ch, xv[(b * c + ch) * hw + p])));
                out[b * hw + p] = v;
                arg[b * hw + p] = (b * c + ch) * hw + p;
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&[n, 1, h, w], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for (&a, gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[a] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Maximum over the standard adaptive partition into `oh x ow` windows.
    pub fn adaptive_max_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [n, c, h, w] = rank4(self, "adaptive_max_pool", x)?;
        if h < oh || w < ow {
            return Err(ReidError::shape(
                "adaptive_max_pool",
                format!("{h}x{w} input is smaller than the {oh}x{ow} output"),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                let (y0, y1) = adaptive_window(i, oh, h);
                for j in 0..ow {
                    let (x0, x1) = adaptive_window(j, ow, w);
                    let cells = (y0..y1).flat_map(|y| (x0..x1).map(move |xx| base + y * w + xx));
                    let (a, v) = first_argmax(cells.map(|k| (k, xv[k])));
                    out.push(v);
                    arg.push(a);
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = Tensor::zeros(&shape);
                for (&a, gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[a] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }
}
