//! Backbone plus re-identification head over oracle boxes.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bmn::{Bmn, BnrHead, FINE_GRID};
use crate::error::{ReidError, Result};
use crate::fmn::{fmn_apply, Fmn};
use crate::graph::{Graph, Mode, Var};
use crate::params::ParamStore;
use crate::pipeline::config::Config;
use crate::pipeline::synth::SceneSample;
use crate::primitives::{BatchNormState, Conv2d, RoiBox};
use crate::tensor::Tensor;

pub const BACKBONE_STRIDE: usize = 16;

/// Four stride-2 stages of conv 3×3, batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<(Conv2d, BatchNormState)>,
}

impl Backbone {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        channels: [usize; 4],
        rng: &mut R,
    ) -> Self {
        let mut prev = in_ch;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, &format!("{name}.stage{i}.conv"), prev, c, 3, 2, 1, false, rng);
                let bn = BatchNormState::new(store, &format!("{name}.stage{i}.bn"), c);
                prev = c;
                (conv, bn)
            })
            .collect();
        Backbone { stages }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |(c, _)| c.out_ch)
    }

    /// `images: [b, c, h, w]` with `h` and `w` divisible by 16.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[2] % BACKBONE_STRIDE != 0 || s[3] % BACKBONE_STRIDE != 0 {
            return Err(ReidError::shape(
                "toy_backbone",
                format!("image dims must be divisible by {BACKBONE_STRIDE}, got {s:?}"),
            ));
        }
        let mut x = images;
        for (conv, bn) in &self.stages {
            let y = conv.forward(g, x)?;
            let y = bn.forward(g, y)?;
            x = g.relu(y);
        }
        Ok(x)
    }
}

/// Every module of the head, as parameter handles into a store.
#[derive(Clone, Debug)]
pub struct Network {
    pub backbone: Backbone,
    pub bmn: Bmn,
    pub bnr: BnrHead,
    pub fmn: Option<Fmn>,
}

/// Per-box outputs; `final_repr` holds only the rows listed in `person_rows`.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub raw: Var,
    pub q: Option<Var>,
    pub final_repr: Var,
    pub person_rows: Vec<usize>,
}

impl Network {
    pub fn new<R: rand::Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Result<Self> {
        let backbone = Backbone::new(store, "backbone", 3, cfg.model.backbone_channels, rng);
        let c = backbone.out_channels();
        let bmn = Bmn::new(store, "bmn", c, &cfg.mge(), rng)?;
        let bnr = BnrHead::new(store, "bnr", cfg.model.bnr);
        let fmn = Fmn::new(store, "fmn", c, bmn.dim, &cfg.fmn(), rng)?;
        if let Some(f) = &fmn {
            f.zero_output(store)?;
        }
        Ok(Network { backbone, bmn, bnr, fmn })
    }

    pub fn dim(&self) -> usize {
        self.bmn.dim
    }

    /// Treats every box as a person.
    pub fn forward_head(
        &self,
        g: &mut Graph,
        scene_maps: Var,
        boxes: &[RoiBox],
        rng: &mut dyn RngCore,
    ) -> Result<HeadOutput> {
        self.forward_mixed(g, scene_maps, boxes, &vec![true; boxes.len()], rng)
    }

    /// Embeds all boxes and scores their norms; only person boxes go through
    /// the offset path and normalization.
    pub fn forward_mixed(
        &self,
        g: &mut Graph,
        scene_maps: Var,
        boxes: &[RoiBox],
        is_person: &[bool],
        rng: &mut dyn RngCore,
    ) -> Result<HeadOutput> {
        if boxes.len() != is_person.len() {
            return Err(ReidError::InvalidArgument(format!(
                "{} boxes but {} person flags",
                boxes.len(),
                is_person.len()
            )));
        }
        let scenes = g.shape(scene_maps)[0];
        if let Some(b) = boxes.iter().find(|b| b.scene >= scenes) {
            return Err(ReidError::UnknownScene(b.scene));
        }
        let maps = g.roi_align(scene_maps, boxes, FINE_GRID.0, FINE_GRID.1)?;
        let raw = self.bmn.embed(g, maps, rng)?;
        let q = self.bnr.map_norm(g, raw)?;
        let person_rows: Vec<usize> = (0..boxes.len()).filter(|&i| is_person[i]).collect();
        let idx: Vec<Option<usize>> = person_rows.iter().map(|&i| Some(i)).collect();
        let persons = if person_rows.len() == boxes.len() {
            raw
        } else {
            g.gather_rows(raw, &idx)?
        };
        let adjusted = match &self.fmn {
            Some(fmn) => {
                let scene_ids: Vec<usize> = person_rows.iter().map(|&i| boxes[i].scene).collect();
                let offset = fmn.offsets(g, scene_maps, persons, &scene_ids)?;
                fmn_apply(g, persons, offset)?
            }
            None => persons,
        };
        let final_repr = g.l2_normalize_rows(adjusted)?;
        Ok(HeadOutput {
            raw,
            q,
            final_repr,
            person_rows,
        })
    }
}

/// Parameters plus the network layout and the config that built them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub net: Network,
}

impl Model {
    pub fn new(config: &Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(&mut store, config, &mut rng)?;
        Ok(Model {
            config: config.clone(),
            store,
            net,
        })
    }

    /// Eval-mode final representations of all person boxes of `scenes`, in
    /// scene order then annotation order.
    pub fn embed_persons(&self, scenes: &[&SceneSample]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let images = g.input(scene_tensor(scenes)?);
        let maps = self.net.backbone.forward(&mut g, images)?;
        let boxes = person_boxes(scenes);
        if boxes.is_empty() {
            return Ok(Tensor::zeros(&[0, self.net.dim()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.net.forward_head(&mut g, maps, &boxes, &mut rng)?;
        Ok(g.value(out.final_repr).clone())
    }
}

/// Normalizes 8-bit RGB scenes to `[b, 3, h, w]` with `(x/255 - 0.5) / 0.25`.
pub fn scene_tensor(scenes: &[&SceneSample]) -> Result<Tensor> {
    let Some(first) = scenes.first() else {
        return Err(ReidError::InvalidArgument("empty scene batch".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(scenes.len() * 3 * h * w);
    for s in scenes {
        if (s.height, s.width) != (h, w) || s.pixels.len() != h * w * 3 {
            return Err(ReidError::Dataset(format!("scene {} has inconsistent size", s.id)));
        }
        for c in 0..3 {
            data.extend(s.pixels.iter().skip(c).step_by(3).map(|&p| (p as f64 / 255.0 - 0.5) / 0.25));
        }
    }
    Tensor::new(&[scenes.len(), 3, h, w], data)
}

/// Person boxes of a scene batch on the backbone grid.
pub fn person_boxes(scenes: &[&SceneSample]) -> Vec<RoiBox> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.persons().map(move |b| RoiBox::from_image_box(i, b.bbox, BACKBONE_STRIDE as f64)))
        .collect()
}
