//! Train-and-evaluate comparisons over ablation variants.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::evaluation::{cross_scene_similarity, evaluate, Evaluation, GalleryIndex, Protocol};
use crate::pipeline::config::{Config, ModelOverrides};
use crate::pipeline::synth::Dataset;
use crate::pipeline::train::{train, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub name: String,
    #[serde(flatten)]
    pub overrides: ModelOverrides,
}

/// Grid file: seeds plus one `[[run]]` table per variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    #[serde(rename = "run")]
    pub runs: Vec<AblationRun>,
}

impl AblationGrid {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let g: AblationGrid = toml::from_str(s).map_err(|e| ReidError::Config(e.to_string()))?;
        if g.seeds.is_empty() || g.runs.is_empty() {
            return Err(ReidError::Config("ablation grid needs at least one seed and one run".into()));
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub seed: u64,
    pub map: f64,
    pub top1: f64,
    pub cross_camera_map: f64,
    /// Standard-protocol mAP at each of `eval.gallery_sizes`, ascending.
    pub sweep: Vec<(usize, f64)>,
    /// Mean same-identity cosine similarity across scenes on the test split.
    pub cross_scene_similarity: f64,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub map: f64,
    pub top1: f64,
    pub delta_map: f64,
    pub delta_top1: f64,
    pub cross_scene_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub records: Vec<RunRecord>,
    /// Seed means; deltas relative to the first run.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn record(&self, name: &str, seed: u64) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.name == name && r.seed == seed)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}", "variant", "mAP", "top-1", "dmAP", "dtop-1", "xscene");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>8.4} {:>8.4} {:>+8.4} {:>+8.4} {:>8.4}",
                r.name, r.map, r.top1, r.delta_map, r.delta_top1, r.cross_scene_similarity
            );
        }
        s
    }

    /// One JSON line per (variant, seed) record, then one per aggregated row.
    pub fn jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r).expect("row serializes"));
            s.push('\n');
        }
        s
    }
}

/// Trains and evaluates one variant with one seed.
pub fn run_variant(base: &Config, run: &AblationRun, dataset: &Dataset, seed: u64) -> Result<RunRecord> {
    let cfg = run.overrides.apply(base)?;
    let (trainer, history) = train(&cfg, dataset, seed, TrainOptions::default())?;
    let index = GalleryIndex::from_split(&trainer.model, &dataset.test)?;
    let single = |p: Protocol| -> Result<(f64, f64)> {
        match evaluate(&p, &index, cfg.eval.seed)? {
            Evaluation::Single(r) => Ok((r.map, r.top1)),
            Evaluation::Sweep(_) => unreachable!("single-gallery protocol"),
        }
    };
    let (map, top1) = single(Protocol::Standard {
        gallery_size: cfg.eval.gallery_size,
    })?;
    let (cross_camera_map, _) = single(Protocol::CrossCamera {
        gallery_size: cfg.eval.gallery_size,
    })?;
    let sweep = match evaluate(&Protocol::Sweep { sizes: cfg.eval.gallery_sizes.clone() }, &index, cfg.eval.seed)? {
        Evaluation::Sweep(points) => points.iter().map(|p| (p.size, p.result.map)).collect(),
        Evaluation::Single(_) => unreachable!("sweep protocol"),
    };
    Ok(RunRecord {
        name: run.name.clone(),
        seed,
        map,
        top1,
        cross_camera_map,
        sweep,
        cross_scene_similarity: cross_scene_similarity(&index).unwrap_or(0.0),
        first_epoch_loss: history.first().map_or(f64::NAN, |m| m.loss),
        final_epoch_loss: history.last().map_or(f64::NAN, |m| m.loss),
    })
}

/// Runs every variant under every seed on one dataset and protocol.
pub fn ablation_report(
    base: &Config,
    runs: &[AblationRun],
    dataset: &Dataset,
    seeds: &[u64],
    mut progress: impl FnMut(&RunRecord),
) -> Result<AblationReport> {
    let mut records = Vec::new();
    for &seed in seeds {
        for run in runs {
            let r = run_variant(base, run, dataset, seed)?;
            progress(&r);
            records.push(r);
        }
    }
    Ok(summarize_runs(runs, records))
}

pub fn summarize_runs(runs: &[AblationRun], records: Vec<RunRecord>) -> AblationReport {
    let mean = |name: &str, f: &dyn Fn(&RunRecord) -> f64| {
        let v: Vec<f64> = records.iter().filter(|r| r.name == name).map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let mut rows: Vec<AblationRow> = runs
        .iter()
        .map(|run| AblationRow {
            name: run.name.clone(),
            map: mean(&run.name, &|r| r.map),
            top1: mean(&run.name, &|r| r.top1),
            delta_map: 0.0,
            delta_top1: 0.0,
            cross_scene_similarity: mean(&run.name, &|r| r.cross_scene_similarity),
        })
        .collect();
    if let Some((m0, t0)) = rows.first().map(|r| (r.map, r.top1)) {
        for r in &mut rows {
            r.delta_map = r.map - m0;
            r.delta_top1 = r.top1 - t0;
        }
    }
    AblationReport { records, rows }
}
