//! Identity supervision: online instance matching against a lookup table of
//! identity prototypes and a queue of unlabeled features, plus a cosine-margin
//! triplet hinge over mini-batch and lookup-table candidates.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OimConfig {
    pub tau: f64,
    pub momentum: f64,
    pub cq_size: usize,
}

impl Default for OimConfig {
    fn default() -> Self {
        OimConfig {
            tau: 1.0 / 30.0,
            momentum: 0.5,
            cq_size: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.25,
            positives: 4,
            negatives: 8,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin < 2.0) || self.positives == 0 || self.negatives == 0 {
            return Err(ReidError::Config(format!(
                "triplet margin must lie in (0, 2) and sample sizes be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        x.to_vec()
    } else {
        x.iter().map(|v| v / n).collect()
    }
}

/// Lookup table of labeled prototypes plus a bounded FIFO of unlabeled features.
#[derive(Clone, Debug, PartialEq)]
pub struct OimState {
    pub cfg: OimConfig,
    lut: Tensor,
    populated: Vec<bool>,
    queue: VecDeque<Vec<f64>>,
}

impl OimState {
    pub fn new(identities: usize, dim: usize, cfg: OimConfig) -> Result<Self> {
        if !(cfg.tau > 0.0) || !(0.0..=1.0).contains(&cfg.momentum) {
            return Err(ReidError::Config(format!("invalid OIM settings {cfg:?}")));
        }
        Ok(OimState {
            cfg,
            lut: Tensor::zeros(&[identities, dim]),
            populated: vec![false; identities],
            queue: VecDeque::new(),
        })
    }

    /// Restores a state exactly as stored, without renormalizing.
    pub fn from_parts(cfg: OimConfig, lut: Tensor, populated: Vec<bool>, queue: Vec<Vec<f64>>) -> Result<Self> {
        let cap = cfg.cq_size;
        let mut s = OimState::new(populated.len(), lut.shape().get(1).copied().unwrap_or(0), cfg)?;
        if lut.shape() != s.lut.shape() || queue.len() > cap || queue.iter().any(|r| r.len() != s.dim()) {
            return Err(ReidError::shape("oim_state", format!("table {:?} with {} queued rows", lut.shape(), queue.len())));
        }
        s.lut = lut;
        s.populated = populated;
        s.queue = queue.into();
        Ok(s)
    }

    pub fn identities(&self) -> usize {
        self.populated.len()
    }

    pub fn dim(&self) -> usize {
        self.lut.shape()[1]
    }

    pub fn lut(&self) -> &Tensor {
        &self.lut
    }

    pub fn is_populated(&self, label: usize) -> bool {
        self.populated.get(label).copied().unwrap_or(false)
    }

    pub fn queue(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.queue.iter().map(Vec::as_slice)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Replaces a prototype row with the normalized `v`.
    pub fn set_prototype(&mut self, label: usize, v: &[f64]) -> Result<()> {
        self.check_label(label)?;
        self.check_dim(v.len())?;
        self.lut.row_mut(label).copy_from_slice(&normalized(v));
        self.populated[label] = true;
        Ok(())
    }

    /// Appends an unlabeled feature (normalized), evicting the oldest at capacity.
    pub fn push_unlabeled(&mut self, v: &[f64]) -> Result<()> {
        self.check_dim(v.len())?;
        if self.cfg.cq_size == 0 {
            return Ok(());
        }
        if self.queue.len() == self.cfg.cq_size {
            self.queue.pop_front();
        }
        self.queue.push_back(normalized(v));
        Ok(())
    }

    /// Momentum update of labeled rows, queue push of unlabeled rows.
    pub fn update(&mut self, features: &Tensor, labels: &[Option<usize>]) -> Result<()> {
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(ReidError::shape("oim_update", format!("{:?} for {} labels", features.shape(), labels.len())));
        }
        let m = self.cfg.momentum;
        for (i, label) in labels.iter().enumerate() {
            let x = normalized(features.row(i));
            match *label {
                Some(t) => {
                    self.check_label(t)?;
                    self.check_dim(x.len())?;
                    let mixed: Vec<f64> = self.lut.row(t).iter().zip(&x).map(|(v, x)| m * v + (1.0 - m) * x).collect();
                    self.set_prototype(t, &mixed)?;
                }
                None => self.push_unlabeled(&x)?,
            }
        }
        Ok(())
    }

    /// `[L + Q, d]` table rows followed by queue rows, plus which rows may enter the softmax.
    fn bank(&self) -> (Tensor, Vec<bool>) {
        let d = self.dim();
        let mut data = self.lut.data().to_vec();
        for q in &self.queue {
            data.extend_from_slice(q);
        }
        let rows = self.identities() + self.queue.len();
        let mut valid = self.populated.clone();
        valid.resize(rows, true);
        (Tensor::new(&[rows, d], data).expect("bank shape"), valid)
    }

    fn check_label(&self, t: usize) -> Result<()> {
        if t >= self.identities() {
            return Err(ReidError::InvalidLabel { label: t, size: self.identities() });
        }
        Ok(())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(ReidError::shape("oim", format!("feature dim {d} vs table dim {}", self.dim())));
        }
        Ok(())
    }

    fn logit_mask(&self, bank_valid: &[bool], labels: &[usize]) -> Result<Vec<bool>> {
        let mut mask = Vec::with_capacity(labels.len() * bank_valid.len());
        for &t in labels {
            self.check_label(t)?;
            let start = mask.len();
            mask.extend_from_slice(bank_valid);
            mask[start + t] = true;
        }
        Ok(mask)
    }

    /// Softmax over table ∪ queue for a unit-norm `x`; the first `L` entries
    /// are the identity probabilities. Unpopulated rows other than `target`
    /// get zero mass.
    pub fn probabilities(&self, x: &[f64], target: Option<usize>) -> Result<Vec<f64>> {
        if self.identities() == 0 {
            return Err(ReidError::InvalidArgument("empty lookup table".into()));
        }
        self.check_dim(x.len())?;
        let (bank, mut valid) = self.bank();
        if let Some(t) = target {
            self.check_label(t)?;
            valid[t] = true;
        }
        let logits: Vec<f64> = (0..valid.len())
            .map(|r| bank.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / self.cfg.tau)
            .collect();
        let m = logits
            .iter()
            .zip(&valid)
            .filter(|(_, &ok)| ok)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits
            .iter()
            .zip(&valid)
            .map(|(&l, &ok)| if ok { (l - m).exp() } else { 0.0 })
            .collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        Ok(p)
    }
}

/// Mean over rows of `-log p_target`; `x: [n, d]` unit-norm rows.
pub fn oim_loss(g: &mut Graph, x: Var, labels: &[usize], state: &OimState) -> Result<Var> {
    if state.identities() == 0 {
        return Err(ReidError::InvalidArgument("empty lookup table".into()));
    }
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(ReidError::shape("oim_loss", format!("{shape:?} for {} labels", labels.len())));
    }
    state.check_dim(shape[1])?;
    let (bank, valid) = state.bank();
    let mask = state.logit_mask(&valid, labels)?;
    let bank = g.constant(bank);
    let logits = g.matmul_nt(x, bank)?;
    let logits = g.scale(logits, 1.0 / state.cfg.tau);
    g.softmax_cross_entropy(logits, labels, Some(&mask))
}

/// A triplet candidate: a mini-batch row or a lookup-table row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Candidate {
    Batch(usize),
    Table(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletSample {
    pub positives: Vec<Candidate>,
    pub negatives: Vec<Candidate>,
}

fn pick<R: Rng + ?Sized>(pool: Vec<Candidate>, k: usize, rng: &mut R) -> Vec<Candidate> {
    if pool.len() <= k {
        return pool;
    }
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Draws positives and negatives for anchor `anchor` of the mini-batch without
/// replacement. Unlabeled batch rows are never candidates. `None` when either
/// side has no candidate.
pub fn triplet_sample<R: Rng + ?Sized>(
    anchor: usize,
    labels: &[Option<usize>],
    state: &OimState,
    cfg: &TripletConfig,
    rng: &mut R,
) -> Option<TripletSample> {
    let l = labels.get(anchor).copied().flatten()?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (j, lj) in labels.iter().enumerate() {
        match lj {
            Some(t) if j != anchor && *t == l => pos.push(Candidate::Batch(j)),
            Some(t) if *t != l => neg.push(Candidate::Batch(j)),
            _ => {}
        }
    }
    for t in 0..state.identities() {
        if state.is_populated(t) {
            if t == l {
                pos.push(Candidate::Table(t));
            } else {
                neg.push(Candidate::Table(t));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    Some(TripletSample {
        positives: pick(pos, cfg.positives, rng),
        negatives: pick(neg, cfg.negatives, rng),
    })
}

/// `max(margin - (min pos-sim - max neg-sim), 0)` for unit-norm vectors.
pub fn triplet_value(x: &[f64], positives: &[&[f64]], negatives: &[&[f64]], margin: f64) -> Option<f64> {
    let dot = |v: &[f64]| v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let min_pos = positives.iter().map(|v| dot(v)).reduce(f64::min)?;
    let max_neg = negatives.iter().map(|v| dot(v)).reduce(f64::max)?;
    Some((margin - (min_pos - max_neg)).max(0.0))
}

/// Graph form of [`triplet_value`]: `x: [1, d]`, `pos: [p, d]`, `neg: [q, d]`.
pub fn triplet_loss(g: &mut Graph, x: Var, pos: Var, neg: Var, margin: f64) -> Result<Var> {
    let sp = g.matmul_nt(x, pos)?;
    let sn = g.matmul_nt(x, neg)?;
    let min_pos = g.min_all(sp)?;
    let max_neg = g.max_all(sn)?;
    let gap = g.sub(min_pos, max_neg)?;
    let neg_gap = g.scale(gap, -1.0);
    let hinge = g.add_scalar(neg_gap, margin);
    Ok(g.relu(hinge))
}

#[derive(Clone, Copy, Debug)]
pub struct BoimTerms {
    pub oim: Var,
    /// Mean triplet hinge over labeled anchors (skipped anchors contribute 0).
    pub triplet: Option<Var>,
    pub total: Var,
    pub triplet_anchors: usize,
}

/// Mean over labeled rows of OIM loss plus triplet hinge. `features: [n, d]`
/// unit-norm rows; only rows with a label are supervised.
pub fn boim_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    features: Var,
    labels: &[Option<usize>],
    state: &OimState,
    cfg: &TripletConfig,
    rng: &mut R,
) -> Result<Option<BoimTerms>> {
    let labeled: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if labeled.is_empty() {
        return Ok(None);
    }
    let idx: Vec<Option<usize>> = labeled.iter().map(|&i| Some(i)).collect();
    let xl = g.gather_rows(features, &idx)?;
    let targets: Vec<usize> = labeled.iter().map(|&i| labels[i].unwrap()).collect();
    let oim = oim_loss(g, xl, &targets, state)?;

    let n = labels.len();
    let table = g.constant(state.lut().clone());
    let candidates = g.concat(&[features, table], 0)?;
    let row = |c: Candidate| match c {
        Candidate::Batch(j) => Some(j),
        Candidate::Table(t) => Some(n + t),
    };
    let mut hinges = Vec::new();
    for &i in &labeled {
        let Some(s) = triplet_sample(i, labels, state, cfg, rng) else {
            continue;
        };
        let x = g.gather_rows(features, &[Some(i)])?;
        let pos_idx: Vec<_> = s.positives.iter().map(|&c| row(c)).collect();
        let neg_idx: Vec<_> = s.negatives.iter().map(|&c| row(c)).collect();
        let pos = g.gather_rows(candidates, &pos_idx)?;
        let neg = g.gather_rows(candidates, &neg_idx)?;
        hinges.push(triplet_loss(g, x, pos, neg, cfg.margin)?);
    }
    let triplet_anchors = hinges.len();
    let triplet = if hinges.is_empty() {
        None
    } else {
        let sum = g.add_all(&hinges)?;
        Some(g.scale(sum, 1.0 / labeled.len() as f64))
    };
    let total = match triplet {
        Some(t) => g.add(oim, t)?,
        None => oim,
    };
    Ok(Some(BoimTerms {
        oim,
        triplet,
        total,
        triplet_anchors,
    }))
}
