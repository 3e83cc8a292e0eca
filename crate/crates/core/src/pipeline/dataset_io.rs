//! On-disk dataset layout.
//!
//! ```text
//! <dir>/dataset.json             registry, identity lists, generator settings
//! <dir>/<split>/annotations.jsonl one record per scene
//! <dir>/<split>/images/<id>.png
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::pipeline::config::DataConfig;
use crate::pipeline::synth::{Appearance, BoxAnnotation, Dataset, SceneSample, SceneTransform, Split};

pub const DATASET_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    seed: u64,
    data: DataConfig,
    registry: Vec<Appearance>,
    train_identities: Vec<usize>,
    test_identities: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene: usize,
    camera: usize,
    file: String,
    width: usize,
    height: usize,
    transform: SceneTransform,
    boxes: Vec<BoxAnnotation>,
}

fn write_split(dir: &Path, split: &Split) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut ann = BufWriter::new(fs::File::create(dir.join("annotations.jsonl"))?);
    for s in &split.scenes {
        let file = format!("images/{:06}.png", s.id);
        let img = image::RgbImage::from_raw(s.width as u32, s.height as u32, s.pixels.clone())
            .ok_or_else(|| ReidError::Dataset(format!("scene {} has a malformed pixel buffer", s.id)))?;
        img.save_with_format(dir.join(&file), image::ImageFormat::Png)?;
        let rec = SceneRecord {
            scene: s.id,
            camera: s.camera,
            file,
            width: s.width,
            height: s.height,
            transform: s.transform.clone(),
            boxes: s.boxes.clone(),
        };
        serde_json::to_writer(&mut ann, &rec)?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

fn read_split(dir: &Path, identities: Vec<usize>) -> Result<Split> {
    let file = fs::File::open(dir.join("annotations.jsonl"))?;
    let mut scenes = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| ReidError::Dataset(format!("{}: line {}: {e}", dir.display(), n + 1)))?;
        let img = image::open(dir.join(&rec.file))?.to_rgb8();
        if (img.width() as usize, img.height() as usize) != (rec.width, rec.height) {
            return Err(ReidError::Dataset(format!("{} does not match its annotated size", rec.file)));
        }
        for b in &rec.boxes {
            let [x1, y1, x2, y2] = b.bbox;
            if !(0.0 <= x1 && x1 < x2 && x2 <= rec.width as f64 && 0.0 <= y1 && y1 < y2 && y2 <= rec.height as f64) {
                return Err(ReidError::Dataset(format!("scene {}: box {:?} out of bounds", rec.scene, b.bbox)));
            }
        }
        scenes.push(SceneSample {
            id: rec.scene,
            camera: rec.camera,
            width: rec.width,
            height: rec.height,
            pixels: img.into_raw(),
            boxes: rec.boxes,
            transform: rec.transform,
        });
    }
    Ok(Split { scenes, identities })
}

pub fn save_dataset(dataset: &Dataset, data: &DataConfig, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: DATASET_FORMAT,
        seed,
        data: data.clone(),
        registry: dataset.registry.clone(),
        train_identities: dataset.train.identities.clone(),
        test_identities: dataset.test.identities.clone(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_split(&dir.join("train"), &dataset.train)?;
    write_split(&dir.join("test"), &dataset.test)?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`], with its generator settings and seed.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DataConfig, u64)> {
    let text = fs::read_to_string(dir.join("dataset.json"))
        .map_err(|e| ReidError::Dataset(format!("{}: {e}", dir.join("dataset.json").display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != DATASET_FORMAT {
        return Err(ReidError::Dataset(format!("dataset format {} is not supported", m.format)));
    }
    let train = read_split(&dir.join("train"), m.train_identities)?;
    let test = read_split(&dir.join("test"), m.test_identities)?;
    Ok((
        Dataset {
            registry: m.registry,
            train,
            test,
        },
        m.data,
        m.seed,
    ))
}
