//! Person-map encoder and the norm-based person/background supervision.
//!
//! A 24×12 person map is encoded at two levels: directly, and after a
//! stride-2 convolution down to 12×6. Each level runs three branches that cut
//! the map into 1, 2 and 3 horizontal strips; every strip has its own encoder
//! and the strip outputs are summed into one per-level vector. The two level
//! vectors are concatenated into the embedding.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::primitives::{drop_path, BatchNormState, Cbam, Conv2d, Linear};

pub const FINE_GRID: (usize, usize) = (24, 12);
pub const COARSE_GRID: (usize, usize) = (12, 6);
pub const STRIP_PARTITIONS: [usize; 3] = [1, 2, 3];

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $name {
            type Err = $crate::error::ReidError;

            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err($crate::error::ReidError::Config(format!(
                        "unknown {} value {other:?}; expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}
pub(crate) use string_enum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Mge,
    Gfe,
}
string_enum!(EmbeddingKind { Mge => "mge", Gfe => "gfe" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MgeLevels {
    #[serde(rename = "both")]
    Both,
    /// Only the 12×6 level.
    #[serde(rename = "12x6")]
    Coarse,
}
string_enum!(MgeLevels { Both => "both", Coarse => "12x6" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnrMode {
    On,
    Off,
    NoBn,
}
string_enum!(BnrMode { On => "on", Off => "off", NoBn => "no-bn" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgeConfig {
    pub embedding: EmbeddingKind,
    pub levels: MgeLevels,
    pub level_dim: usize,
    pub drop_path: f64,
    pub cbam_reduction: usize,
}

impl Default for MgeConfig {
    fn default() -> Self {
        MgeConfig {
            embedding: EmbeddingKind::Mge,
            levels: MgeLevels::Both,
            level_dim: 512,
            drop_path: 0.1,
            cbam_reduction: 16,
        }
    }
}

impl MgeConfig {
    pub fn embedding_dim(&self) -> usize {
        match self.levels {
            MgeLevels::Both => 2 * self.level_dim,
            MgeLevels::Coarse => self.level_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_dim == 0 || self.cbam_reduction == 0 {
            return Err(ReidError::Config("level_dim and cbam_reduction must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(ReidError::Config(format!("drop_path {} outside [0, 1)", self.drop_path)));
        }
        for grid in [FINE_GRID, COARSE_GRID] {
            if let Some(p) = STRIP_PARTITIONS.iter().find(|&&p| grid.0 % p != 0) {
                return Err(ReidError::Config(format!("{p} strips do not divide height {}", grid.0)));
            }
        }
        Ok(())
    }
}

/// Cuts `x: [n, c, h, w]` into `parts` equal horizontal strips, top to bottom.
pub fn strip_split(g: &mut Graph, x: Var, parts: usize) -> Result<Vec<Var>> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(ReidError::shape("strip_split", format!("rank-4 input, got {shape:?}")));
    }
    if parts == 0 || shape[2] % parts != 0 {
        return Err(ReidError::shape(
            "strip_split",
            format!("height {} is not divisible into {parts} strips", shape[2]),
        ));
    }
    if parts == 1 {
        return Ok(vec![x]);
    }
    let h = shape[2] / parts;
    (0..parts).map(|i| g.slice_axis(x, 2, i * h, h)).collect()
}

/// Attention gate, global max pool, projection, batch norm, drop path.
#[derive(Clone, Copy, Debug)]
pub struct StripEncoder {
    pub cbam: Cbam,
    pub proj: Linear,
    pub bn: BatchNormState,
    pub drop_path: f64,
}

impl StripEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &MgeConfig,
        rng: &mut R,
    ) -> Self {
        StripEncoder {
            cbam: Cbam::new(store, &format!("{name}.cbam"), channels, cfg.cbam_reduction, rng),
            proj: Linear::new(store, &format!("{name}.proj"), channels, cfg.level_dim, false, rng),
            bn: BatchNormState::new(store, &format!("{name}.bn"), cfg.level_dim),
            drop_path: cfg.drop_path,
        }
    }

    /// `strip: [n, c, h, w] -> [n, level_dim]`.
    pub fn forward(&self, g: &mut Graph, strip: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let x = self.cbam.forward(g, strip)?;
        let x = g.global_max_pool(x)?;
        let x = self.proj.forward(g, x)?;
        let x = self.bn.forward(g, x)?;
        drop_path(g, x, self.drop_path, rng)
    }
}

/// Three strip branches over one pyramid level.
#[derive(Clone, Debug)]
pub struct MgeLevel {
    pub grid: (usize, usize),
    /// `branches[b]` holds one encoder per strip of partition `STRIP_PARTITIONS[b]`.
    pub branches: Vec<Vec<StripEncoder>>,
}

impl MgeLevel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        grid: (usize, usize),
        channels: usize,
        cfg: &MgeConfig,
        rng: &mut R,
    ) -> Self {
        let branches = STRIP_PARTITIONS
            .iter()
            .map(|&parts| {
                (0..parts)
                    .map(|s| StripEncoder::new(store, &format!("{name}.b{parts}.s{s}"), channels, cfg, rng))
                    .collect()
            })
            .collect();
        MgeLevel { grid, branches }
    }

    fn check_grid(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || (s[2], s[3]) != self.grid {
            return Err(ReidError::shape(
                "mge_encode",
                format!("expected a {}x{} level map, got {s:?}", self.grid.0, self.grid.1),
            ));
        }
        Ok(())
    }

    /// Outputs of every strip encoder, grouped by branch.
    pub fn strip_outputs(&self, g: &mut Graph, x: Var, rng: &mut dyn RngCore) -> Result<Vec<Vec<Var>>> {
        self.check_grid(g, x)?;
        let mut out = Vec::with_capacity(self.branches.len());
        for encoders in &self.branches {
            let strips = strip_split(g, x, encoders.len())?;
            let vs = encoders
                .iter()
                .zip(strips)
                .map(|(e, s)| e.forward(g, s, rng))
                .collect::<Result<Vec<_>>>()?;
            out.push(vs);
        }
        Ok(out)
    }

    /// `x: [n, c, gh, gw] -> [n, level_dim]`: strips summed per branch, branches summed.
    pub fn forward(&self, g: &mut Graph, x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let parts = self.strip_outputs(g, x, rng)?;
        let branch_sums = parts.iter().map(|b| g.add_all(b)).collect::<Result<Vec<_>>>()?;
        g.add_all(&branch_sums)
    }
}

/// Global max pool then a linear map; the ablation baseline for one level.
#[derive(Clone, Copy, Debug)]
pub struct GfeLevel {
    pub proj: Linear,
}

impl GfeLevel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, dim: usize, rng: &mut R) -> Self {
        GfeLevel {
            proj: Linear::new(store, &format!("{name}.proj"), channels, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = g.global_max_pool(x)?;
        self.proj.forward(g, p)
    }
}

#[derive(Clone, Debug)]
pub enum LevelEncoder {
    Mge(MgeLevel),
    Gfe(GfeLevel),
}

impl LevelEncoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        grid: (usize, usize),
        channels: usize,
        cfg: &MgeConfig,
        rng: &mut R,
    ) -> Self {
        match cfg.embedding {
            EmbeddingKind::Mge => LevelEncoder::Mge(MgeLevel::new(store, name, grid, channels, cfg, rng)),
            EmbeddingKind::Gfe => LevelEncoder::Gfe(GfeLevel::new(store, name, channels, cfg.level_dim, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, rng: &mut dyn RngCore) -> Result<Var> {
        match self {
            LevelEncoder::Mge(m) => m.forward(g, x, rng),
            LevelEncoder::Gfe(l) => l.forward(g, x),
        }
    }
}

/// Two-level person-map encoder.
#[derive(Clone, Debug)]
pub struct Bmn {
    pub conv5: Conv2d,
    pub fine: Option<LevelEncoder>,
    pub coarse: LevelEncoder,
    pub dim: usize,
}

impl Bmn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, cfg: &MgeConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let conv5 = Conv2d::new(store, &format!("{name}.conv5"), channels, channels, 3, 2, 1, true, rng);
        let fine = (cfg.levels == MgeLevels::Both)
            .then(|| LevelEncoder::new(store, &format!("{name}.fine"), FINE_GRID, channels, cfg, rng));
        let coarse = LevelEncoder::new(store, &format!("{name}.coarse"), COARSE_GRID, channels, cfg, rng);
        Ok(Bmn {
            conv5,
            fine,
            coarse,
            dim: cfg.embedding_dim(),
        })
    }

    /// Down-samples a 24×12 person map to 12×6.
    pub fn downsample(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv5.forward(g, x)?;
        Ok(g.relu(y))
    }

    /// `person_maps: [n, c, 24, 12] -> [n, dim]`.
    pub fn embed(&self, g: &mut Graph, person_maps: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let s = g.shape(person_maps).to_vec();
        if s.len() != 4 || (s[2], s[3]) != FINE_GRID {
            return Err(ReidError::shape("bmn_embed", format!("expected [n, c, 24, 12], got {s:?}")));
        }
        let small = self.downsample(g, person_maps)?;
        let coarse = self.coarse.forward(g, small, rng)?;
        match &self.fine {
            Some(fine) => {
                let f = fine.forward(g, person_maps, rng)?;
                g.concat(&[f, coarse], 1)
            }
            None => Ok(coarse),
        }
    }
}

/// Maps embedding norms to person probabilities.
#[derive(Clone, Copy, Debug)]
pub struct BnrHead {
    pub mode: BnrMode,
    pub bn: Option<BatchNormState>,
}

impl BnrHead {
    pub fn new(store: &mut ParamStore, name: &str, mode: BnrMode) -> Self {
        let bn = (mode == BnrMode::On).then(|| BatchNormState::new(store, &format!("{name}.bn"), 1));
        BnrHead { mode, bn }
    }

    /// `sigmoid(bn(‖e‖))` per row of `e: [n, d]`, shaped `[n, 1]`; `None` when disabled.
    pub fn map_norm(&self, g: &mut Graph, e: Var) -> Result<Option<Var>> {
        if self.mode == BnrMode::Off {
            return Ok(None);
        }
        if g.shape(e).first() == Some(&0) {
            return Err(ReidError::BatchTooSmall(0));
        }
        let n = g.row_norm(e)?;
        let z = match &self.bn {
            Some(bn) => bn.forward(g, n)?,
            None => n,
        };
        Ok(Some(g.sigmoid(z)))
    }
}

/// Binary cross-entropy of person probabilities against 1 (person) / 0 (background).
pub fn bnr_loss(g: &mut Graph, q: Var, is_person: &[bool]) -> Result<(Var, bool)> {
    let y: Vec<f64> = is_person.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    g.binary_cross_entropy(q, &y)
}
