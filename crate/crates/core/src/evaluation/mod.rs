//! Retrieval metrics and gallery protocols.
//!
//! A query is matched against a gallery drawn from every other scene. Entries
//! are relevant when they carry the query's identity; unlabeled entries are
//! always distractors.

pub mod ablation;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::pipeline::model::Model;
use crate::pipeline::synth::Split;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub rep: Vec<f64>,
    pub identity: Option<usize>,
    pub scene: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GalleryIndex {
    pub entries: Vec<Entry>,
    pub queries: Vec<Entry>,
}

const EMBED_BATCH: usize = 8;

impl GalleryIndex {
    /// Embeds every person of `split`; labeled persons also become queries.
    pub fn from_split(model: &Model, split: &Split) -> Result<Self> {
        let mut entries = Vec::new();
        for chunk in split.scenes.chunks(EMBED_BATCH) {
            let scenes: Vec<_> = chunk.iter().collect();
            let reps = model.embed_persons(&scenes)?;
            let mut row = 0;
            for s in chunk {
                for b in s.persons() {
                    entries.push(Entry {
                        rep: reps.row(row).to_vec(),
                        identity: b.identity,
                        scene: s.id,
                        camera: s.camera,
                    });
                    row += 1;
                }
            }
        }
        let queries = entries.iter().filter(|e| e.identity.is_some()).cloned().collect();
        Ok(GalleryIndex { entries, queries })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Positions into `gallery`, by descending cosine similarity; ties keep
/// gallery order.
pub fn rank_gallery(query: &[f64], gallery: &[&Entry]) -> Vec<usize> {
    // Folds -0.0 into +0.0.
    let sims: Vec<f64> = gallery.iter().map(|e| cosine(query, &e.rep) + 0.0).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order
}

/// Mean precision at the rank of each relevant entry; `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// Gallery entries (indices into the index) in ranked order.
    pub ranked: Vec<usize>,
    pub relevant: usize,
    pub ap: f64,
    pub top1: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub queries: Vec<QueryResult>,
    pub map: f64,
    pub top1: f64,
    /// Queries without any relevant gallery entry; scored AP 0.
    pub zero_relevant: usize,
}

/// Ranks one gallery (indices into `index.entries`) for a query.
pub fn score_query(query: &Entry, index: &GalleryIndex, gallery: &[usize]) -> QueryResult {
    let entries: Vec<&Entry> = gallery.iter().map(|&i| &index.entries[i]).collect();
    let order = rank_gallery(&query.rep, &entries);
    let flags: Vec<bool> = order
        .iter()
        .map(|&k| query.identity.is_some() && entries[k].identity == query.identity)
        .collect();
    let relevant = flags.iter().filter(|&&f| f).count();
    QueryResult {
        ranked: order.iter().map(|&k| gallery[k]).collect(),
        relevant,
        ap: average_precision(&flags).unwrap_or(0.0),
        top1: flags.first().copied().unwrap_or(false),
    }
}

pub fn summarize(queries: Vec<QueryResult>) -> RetrievalResult {
    let n = queries.len().max(1) as f64;
    let map = queries.iter().map(|q| q.ap).sum::<f64>() / n;
    let top1 = queries.iter().filter(|q| q.top1).count() as f64 / n;
    let zero_relevant = queries.iter().filter(|q| q.relevant == 0).count();
    RetrievalResult {
        queries,
        map,
        top1,
        zero_relevant,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "protocol")]
pub enum Protocol {
    Standard { gallery_size: usize },
    Sweep { sizes: Vec<usize> },
    CrossCamera { gallery_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub size: usize,
    pub result: RetrievalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluation {
    Single(RetrievalResult),
    Sweep(Vec<SweepPoint>),
}

/// Matches first, then distractors in a per-query random order.
struct Candidates {
    matches: Vec<usize>,
    distractors: Vec<usize>,
}

fn candidates(q: usize, query: &Entry, index: &GalleryIndex, cross_camera: bool, seed: u64) -> Candidates {
    let mut matches = Vec::new();
    let mut distractors = Vec::new();
    for (i, e) in index.entries.iter().enumerate() {
        if e.scene == query.scene || (cross_camera && e.camera == query.camera) {
            continue;
        }
        if query.identity.is_some() && e.identity == query.identity {
            matches.push(i);
        } else {
            distractors.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(q as u64));
    distractors.shuffle(&mut rng);
    Candidates { matches, distractors }
}

/// All matches plus the first `size - matches` distractors, in index order.
fn gallery_of(c: &Candidates, size: usize, q: usize) -> Result<Vec<usize>> {
    let need = size.saturating_sub(c.matches.len());
    if need > c.distractors.len() {
        return Err(ReidError::Protocol(format!(
            "query {q} has {} candidate entries outside its scene, fewer than the gallery size {size}; generate more scenes or shrink the gallery",
            c.matches.len() + c.distractors.len()
        )));
    }
    let mut g: Vec<usize> = c.matches.iter().chain(&c.distractors[..need]).copied().collect();
    g.sort_unstable();
    Ok(g)
}

pub fn evaluate(protocol: &Protocol, index: &GalleryIndex, seed: u64) -> Result<Evaluation> {
    if index.queries.is_empty() {
        return Err(ReidError::Protocol("no labeled queries".into()));
    }
    let run = |size: usize, cross: bool| -> Result<RetrievalResult> {
        if size == 0 {
            return Err(ReidError::Protocol("gallery size must be positive".into()));
        }
        let mut out = Vec::with_capacity(index.queries.len());
        for (q, query) in index.queries.iter().enumerate() {
            let c = candidates(q, query, index, cross, seed);
            out.push(score_query(query, index, &gallery_of(&c, size, q)?));
        }
        Ok(summarize(out))
    };
    match protocol {
        Protocol::Standard { gallery_size } => Ok(Evaluation::Single(run(*gallery_size, false)?)),
        Protocol::CrossCamera { gallery_size } => Ok(Evaluation::Single(run(*gallery_size, true)?)),
        Protocol::Sweep { sizes } => {
            let mut sorted = sizes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            sorted.into_iter().map(|size| Ok(SweepPoint { size, result: run(size, false)? })).collect::<Result<_>>().map(Evaluation::Sweep)
        }
    }
}

/// Mean cosine similarity over pairs of same-identity entries from different scenes.
pub fn cross_scene_similarity(index: &GalleryIndex) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, a) in index.entries.iter().enumerate() {
        for b in &index.entries[i + 1..] {
            if a.identity.is_some() && a.identity == b.identity && a.scene != b.scene {
                sum += cosine(&a.rep, &b.rep);
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Definition-level mAP and top-1: ranks by counting, precision by counting.
pub fn brute_force_metrics(queries: &[Entry], galleries: &[Vec<Entry>]) -> (f64, f64) {
    let mut ap_sum = 0.0;
    let mut top1 = 0usize;
    for (q, gallery) in queries.iter().zip(galleries) {
        let sims: Vec<f64> = gallery.iter().map(|e| cosine(&q.rep, &e.rep)).collect();
        let rank = |j: usize| {
            (0..gallery.len())
                .filter(|&k| sims[k] > sims[j] || (sims[k] == sims[j] && k < j))
                .count()
                + 1
        };
        let rel: Vec<usize> = (0..gallery.len())
            .filter(|&j| q.identity.is_some() && gallery[j].identity == q.identity)
            .collect();
        if !rel.is_empty() {
            let ranks: Vec<usize> = rel.iter().map(|&j| rank(j)).collect();
            let ap: f64 = ranks
                .iter()
                .map(|&r| ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
                .sum::<f64>()
                / rel.len() as f64;
            ap_sum += ap;
        }
        if let Some(best) = (0..gallery.len()).find(|&j| rank(j) == 1) {
            if q.identity.is_some() && gallery[best].identity == q.identity {
                top1 += 1;
            }
        }
    }
    let n = queries.len().max(1) as f64;
    (ap_sum / n, top1 as f64 / n)
}
