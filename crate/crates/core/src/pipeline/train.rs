//! Training loop: BNR over person and background boxes, BOIM over persons.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmn::bnr_loss;
use crate::error::{ReidError, Result};
use crate::evaluation::{evaluate, Evaluation, GalleryIndex, Protocol};
use crate::graph::{Graph, Mode};
use crate::losses::{boim_loss, OimState};
use crate::pipeline::config::Config;
use crate::pipeline::model::{scene_tensor, Model, BACKBONE_STRIDE};
use crate::pipeline::optim::{Adam, Schedule};
use crate::pipeline::synth::{BoxKind, Dataset, SceneSample, Split};
use crate::primitives::RoiBox;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub bnr: f64,
    pub oim: f64,
    pub triplet: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    pub bnr: f64,
    pub oim: f64,
    pub triplet: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub oim: OimState,
    pub adam: Adam,
    pub seed: u64,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh state; `identities` is the size of the training lookup table.
    pub fn new(config: &Config, identities: usize, seed: u64) -> Result<Self> {
        let model = Model::new(config, seed)?;
        let oim = OimState::new(identities, model.net.dim(), config.oim())?;
        let t = &config.train;
        let adam = Adam::new(&model.store, t.beta1, t.beta2, t.weight_decay);
        Ok(Trainer {
            model,
            oim,
            adam,
            seed,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7EA1),
        })
    }

    pub(crate) fn from_parts(
        model: Model,
        oim: OimState,
        adam: Adam,
        seed: u64,
        epoch: usize,
        (stream, word_pos): (u64, u128),
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7EA1);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Trainer {
            model,
            oim,
            adam,
            seed,
            epoch,
            rng,
        }
    }

    /// Stream and word position of the sampling RNG.
    pub(crate) fn rng_position(&self) -> (u64, u128) {
        (self.rng.get_stream(), self.rng.get_word_pos())
    }

    /// One optimizer step on a batch of training scenes.
    pub fn step(&mut self, scenes: &[&SceneSample], dataset: &Dataset, lr: f64) -> Result<Option<StepLosses>> {
        let cfg = &self.model.config;
        let mut boxes = Vec::new();
        let mut is_person = Vec::new();
        let mut labels = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            for b in &s.boxes {
                boxes.push(RoiBox::from_image_box(i, b.bbox, BACKBONE_STRIDE as f64));
                let person = b.kind == BoxKind::Person;
                is_person.push(person);
                if person {
                    labels.push(b.identity.and_then(|id| dataset.train_label(id)));
                }
            }
        }
        if labels.is_empty() {
            return Ok(None);
        }
        let images = scene_tensor(scenes)?;
        let mut g = Graph::new(&self.model.store, Mode::Train);
        let x = g.input(images);
        let maps = self.model.net.backbone.forward(&mut g, x)?;
        let out = self.model.net.forward_mixed(&mut g, maps, &boxes, &is_person, &mut self.rng)?;
        let mut losses = StepLosses::default();
        let mut terms = Vec::new();
        if let Some(q) = out.q {
            let (l, _) = bnr_loss(&mut g, q, &is_person)?;
            losses.bnr = g.value(l).item();
            terms.push(g.scale(l, cfg.loss.loss_weights.bnr));
        }
        if let Some(b) = boim_loss(&mut g, out.final_repr, &labels, &self.oim, &cfg.triplet(), &mut self.rng)? {
            losses.oim = g.value(b.oim).item();
            losses.triplet = b.triplet.map_or(0.0, |t| g.value(t).item());
            terms.push(g.scale(b.total, cfg.loss.loss_weights.boim));
        }
        if terms.is_empty() {
            return Ok(None);
        }
        let total = g.add_all(&terms)?;
        losses.total = g.value(total).item();
        if !losses.total.is_finite() {
            return Err(ReidError::Numerical(format!(
                "loss became {} at optimizer step {} (bnr {}, oim {}, triplet {})",
                losses.total, self.adam.step, losses.bnr, losses.oim, losses.triplet
            )));
        }
        g.backward(total)?;
        let grads = g.param_grads();
        let stats = g.take_stat_updates();
        let features = g.value(out.final_repr).clone();
        drop(g);
        self.model.store.apply_updates(stats)?;
        self.adam.update(&mut self.model.store, &grads, lr)?;
        self.oim.update(&features, &labels)?;
        Ok(Some(losses))
    }

    /// Runs one epoch over the training split in a seeded random order.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochMetrics> {
        let cfg = self.model.config.clone();
        let batch = cfg.train.batch_size;
        let steps_per_epoch = dataset.train.scenes.len().div_ceil(batch);
        let schedule = Schedule::from_params(&cfg.paper, steps_per_epoch);
        let mut order: Vec<usize> = (0..dataset.train.scenes.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = StepLosses::default();
        let mut steps = 0;
        let mut lr = schedule.lr(self.adam.step);
        for chunk in order.chunks(batch) {
            let scenes: Vec<&SceneSample> = chunk.iter().map(|&i| &dataset.train.scenes[i]).collect();
            lr = schedule.lr(self.adam.step);
            if let Some(l) = self.step(&scenes, dataset, lr)? {
                sum.total += l.total;
                sum.bnr += l.bnr;
                sum.oim += l.oim;
                sum.triplet += l.triplet;
                steps += 1;
            }
        }
        self.epoch += 1;
        let n = steps.max(1) as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            steps,
            lr,
            loss: sum.total / n,
            bnr: sum.bnr / n,
            oim: sum.oim / n,
            triplet: sum.triplet / n,
            map: None,
            top1: None,
        })
    }
}

/// Standard-protocol mAP and top-1 on a split.
pub fn quick_eval(model: &Model, split: &Split) -> Result<(f64, f64)> {
    let index = GalleryIndex::from_split(model, split)?;
    let protocol = Protocol::Standard {
        gallery_size: model.config.eval.gallery_size,
    };
    match evaluate(&protocol, &index, model.config.eval.seed)? {
        Evaluation::Single(r) => Ok((r.map, r.top1)),
        Evaluation::Sweep(_) => unreachable!("standard protocol yields a single result"),
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Evaluated after every epoch when set.
    pub eval_split: Option<&'a Split>,
    /// Receives one JSON line per epoch.
    pub log: Option<&'a mut dyn Write>,
}

/// Trains for the configured number of epochs.
pub fn train(config: &Config, dataset: &Dataset, seed: u64, mut opts: TrainOptions) -> Result<(Trainer, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(config, dataset.train.identities.len(), seed)?;
    let mut history = Vec::with_capacity(config.paper.epochs);
    for _ in 0..config.paper.epochs {
        let mut m = trainer.run_epoch(dataset)?;
        if let Some(split) = opts.eval_split {
            let (map, top1) = quick_eval(&trainer.model, split)?;
            m.map = Some(map);
            m.top1 = Some(top1);
        }
        if let Some(w) = opts.log.as_mut() {
            serde_json::to_writer(&mut **w, &m)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        history.push(m);
    }
    Ok((trainer, history))
}
