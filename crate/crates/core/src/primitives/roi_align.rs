//! RoI-Align: bilinear pooling of box regions onto a fixed output grid.
//!
//! Coordinates are continuous feature-map coordinates where pixel `(i, j)`
//! covers `[j, j+1) x [i, i+1)` and its value sits at the center. Each output
//! cell averages a 2x2 grid of bilinear samples.

use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const SAMPLES_PER_AXIS: usize = 2;

/// A box on one scene of a batched scene map, in feature-map coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub scene: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoiBox {
    pub fn new(scene: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        RoiBox { scene, x1, y1, x2, y2 }
    }

    /// Maps an image-pixel box onto a feature map downsampled by `stride`.
    pub fn from_image_box(scene: usize, bbox: [f64; 4], stride: f64) -> Self {
        RoiBox::new(
            scene,
            bbox[0] / stride,
            bbox[1] / stride,
            bbox[2] / stride,
            bbox[3] / stride,
        )
    }
}

/// Position, lower and upper neighbour along one axis, clamped at the far edge.
fn clamp_axis(v: f64, len: usize) -> (f64, usize, usize) {
    let lo = v.floor() as usize;
    if lo >= len - 1 {
        ((len - 1) as f64, len - 1, len - 1)
    } else {
        (v, lo, lo + 1)
    }
}

/// Up to four `(flat index, weight)` taps of a bilinear sample at `(y, x)`.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return [(0, 0.0); 4];
    }
    let (y, y0, y1) = clamp_axis(y.max(0.0), h);
    let (x, x0, x1) = clamp_axis(x.max(0.0), w);
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    [
        (y0 * w + x0, hy * hx),
        (y0 * w + x1, hy * lx),
        (y1 * w + x0, ly * hx),
        (y1 * w + x1, ly * lx),
    ]
}

/// Per output cell, the averaged bilinear taps (shared by every channel).
fn cell_taps(roi: &RoiBox, h: usize, w: usize, oh: usize, ow: usize) -> Vec<Vec<(usize, f64)>> {
    let bin_h = (roi.y2 - roi.y1) / oh as f64;
    let bin_w = (roi.x2 - roi.x1) / ow as f64;
    let norm = 1.0 / (SAMPLES_PER_AXIS * SAMPLES_PER_AXIS) as f64;
    let mut cells = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut taps = Vec::with_capacity(16);
            for sy in 0..SAMPLES_PER_AXIS {
                let y = roi.y1 + (i as f64 + (sy as f64 + 0.5) / SAMPLES_PER_AXIS as f64) * bin_h - 0.5;
                for sx in 0..SAMPLES_PER_AXIS {
                    let x = roi.x1 + (j as f64 + (sx as f64 + 0.5) / SAMPLES_PER_AXIS as f64) * bin_w - 0.5;
                    for (idx, wt) in bilinear_taps(y, x, h, w) {
                        if wt != 0.0 {
                            taps.push((idx, wt * norm));
                        }
                    }
                }
            }
            cells.push(taps);
        }
    }
    cells
}

impl Graph<'_> {
    /// Pools each box of `scenes[s,c,h,w]` onto an `oh x ow` grid: `[boxes, c, oh, ow]`.
    pub fn roi_align(&mut self, scenes: Var, rois: &[RoiBox], oh: usize, ow: usize) -> Result<Var> {
        let shape = self.shape(scenes).to_vec();
        let [s, c, h, w] = shape[..] else {
            return Err(ReidError::shape("roi_align", format!("expected [s,c,h,w], got {shape:?}")));
        };
        if rois.is_empty() || oh == 0 || ow == 0 {
            return Err(ReidError::shape("roi_align", "no boxes or empty output grid"));
        }
        const TOL: f64 = 1e-9;
        for roi in rois {
            if roi.scene >= s {
                return Err(ReidError::UnknownScene(roi.scene));
            }
            if !(roi.x2 - roi.x1 > 0.0 && roi.y2 - roi.y1 > 0.0) {
                return Err(ReidError::InvalidArgument(format!("degenerate box {roi:?}")));
            }
            if roi.x1 < -TOL || roi.y1 < -TOL || roi.x2 > w as f64 + TOL || roi.y2 > h as f64 + TOL {
                return Err(ReidError::InvalidArgument(format!(
                    "box {roi:?} outside the {h}x{w} map"
                )));
            }
        }
        let taps: Vec<Vec<Vec<(usize, f64)>>> =
            rois.iter().map(|r| cell_taps(r, h, w, oh, ow)).collect();
        let scenes_of: Vec<usize> = rois.iter().map(|r| r.scene).collect();
        let src = self.value(scenes).data();
        let (hw, ohw) = (h * w, oh * ow);
        let mut out = vec![0.0; rois.len() * c * ohw];
        for (r, cells) in taps.iter().enumerate() {
            for ch in 0..c {
                let plane = &src[(scenes_of[r] * c + ch) * hw..(scenes_of[r] * c + ch + 1) * hw];
                let dst = &mut out[(r * c + ch) * ohw..(r * c + ch + 1) * ohw];
                for (o, cell) in dst.iter_mut().zip(cells) {
                    *o = cell.iter().map(|&(k, wt)| wt * plane[k]).sum();
                }
            }
        }
        let out = Tensor::new(&[rois.len(), c, oh, ow], out)?;
        Ok(self.push(
            out,
            &[scenes],
            Box::new(move |g, _, _, _| {
                let mut gs = Tensor::zeros(&shape);
                let gd = gs.data_mut();
                for (r, cells) in taps.iter().enumerate() {
                    for ch in 0..c {
                        let base = (scenes_of[r] * c + ch) * hw;
                        let gp = &g.data()[(r * c + ch) * ohw..(r * c + ch + 1) * ohw];
                        for (gv, cell) in gp.iter().zip(cells) {
                            for &(k, wt) in cell {
                                gd[base + k] += wt * gv;
                            }
                        }
                    }
                }
                vec![Some(gs)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::params::ParamStore;

    fn pool(scene: &Tensor, roi: RoiBox, oh: usize, ow: usize) -> Result<Tensor> {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let s = g.input(scene.clone());
        let y = g.roi_align(s, &[roi], oh, ow)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn constant_map_stays_constant() {
        let scene = Tensor::full(&[1, 2, 6, 5], 3.25);
        let out = pool(&scene, RoiBox::new(0, 0.3, 0.7, 4.6, 5.9), 24, 12).unwrap();
        assert_eq!(out.shape(), &[1, 2, 24, 12]);
        assert!(out.data().iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn whole_map_box_equals_average_pool() {
        let scene = Tensor::from_fn(&[1, 1, 48, 24], |i| ((i * 37) % 11) as f64 - 4.0);
        let out = pool(&scene, RoiBox::new(0, 0.0, 0.0, 24.0, 48.0), 24, 12).unwrap();
        for i in 0..24 {
            for j in 0..12 {
                let at = |r: usize, c: usize| scene.data()[r * 24 + c];
                let avg = (at(2 * i, 2 * j) + at(2 * i + 1, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j + 1)) / 4.0;
                assert!((out.data()[i * 12 + j] - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifting_box_on_a_ramp_adds_the_slope() {
        let slope = 0.75;
        let scene = Tensor::from_fn(&[1, 1, 20, 20], |i| slope * (i % 20) as f64 + 0.1 * (i / 20) as f64);
        let a = pool(&scene, RoiBox::new(0, 3.0, 4.0, 9.0, 13.0), 24, 12).unwrap();
        let b = pool(&scene, RoiBox::new(0, 4.0, 4.0, 10.0, 13.0), 24, 12).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((y - x - slope).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_area_box_is_rejected() {
        let scene = Tensor::ones(&[1, 1, 8, 8]);
        assert!(pool(&scene, RoiBox::new(0, 2.0, 2.0, 2.0, 5.0), 24, 12).is_err());
        assert!(pool(&scene, RoiBox::new(0, 2.0, 2.0, 9.5, 5.0), 24, 12).is_err());
    }
}
