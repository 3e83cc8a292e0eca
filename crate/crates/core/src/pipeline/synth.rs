//! Synthetic person-search scenes.
//!
//! Every identity is a fixed arrangement of head, torso and leg colors plus a
//! torso pattern. A scene belongs to one camera, which fixes the background
//! palette and texture family; the scene itself draws a texture phase, a
//! global color tint, a brightness factor and a shadow gradient that affect
//! people and background alike. The bottom band of every scene is a gray
//! floor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::pipeline::config::DataConfig;

pub type Rgb = [f64; 3];

const PALETTE: [Rgb; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.15, 0.3, 0.85],
    [0.9, 0.8, 0.15],
    [0.75, 0.2, 0.75],
    [0.1, 0.75, 0.8],
    [0.95, 0.5, 0.1],
    [0.95, 0.95, 0.95],
];
const FLOOR_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TorsoPattern {
    Plain,
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub head: Rgb,
    pub torso: Rgb,
    pub legs: Rgb,
    pub pattern: TorsoPattern,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxKind {
    Person,
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub kind: BoxKind,
    /// Registry identity; `None` for unlabeled people and background.
    pub identity: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneTransform {
    pub tint: Rgb,
    pub brightness: f64,
    /// Darkening strength at the shadowed edge, in `[0, 1)`.
    pub shadow: f64,
    pub shadow_angle: f64,
    pub texture_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: usize,
    pub camera: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes.
    pub pixels: Vec<u8>,
    pub boxes: Vec<BoxAnnotation>,
    pub transform: SceneTransform,
}

impl SceneSample {
    pub fn persons(&self) -> impl Iterator<Item = &BoxAnnotation> {
        self.boxes.iter().filter(|b| b.kind == BoxKind::Person)
    }

    pub fn backgrounds(&self) -> impl Iterator<Item = &BoxAnnotation> {
        self.boxes.iter().filter(|b| b.kind == BoxKind::Background)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub scenes: Vec<SceneSample>,
    /// Registry identities that occur in this split, ascending.
    pub identities: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub registry: Vec<Appearance>,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    /// Training label (lookup-table row) of a registry identity.
    pub fn train_label(&self, identity: usize) -> Option<usize> {
        self.train.identities.binary_search(&identity).ok()
    }
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Distinct color arrangements; consecutive entries often reuse one color
/// set in a different order.
fn build_registry(count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Appearance>> {
    let mut combos = Vec::new();
    for a in 0..PALETTE.len() {
        for b in 0..PALETTE.len() {
            for c in 0..PALETTE.len() {
                if a != b && b != c {
                    for pattern in [TorsoPattern::Plain, TorsoPattern::Stripes] {
                        combos.push((a, b, c, pattern));
                    }
                }
            }
        }
    }
    if count > combos.len() {
        return Err(ReidError::Config(format!("at most {} identities are supported", combos.len())));
    }
    // Group permutations of the same color set so that arrangement, not the
    // set of colors, distinguishes identities.
    let mut sets: Vec<[usize; 3]> = Vec::new();
    for &(a, b, c, _) in &combos {
        let mut s = [a, b, c];
        s.sort_unstable();
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    sets.shuffle(rng);
    let mut chosen = Vec::new();
    'outer: for s in sets {
        let mut group: Vec<_> = combos
            .iter()
            .filter(|&&(a, b, c, _)| {
                let mut t = [a, b, c];
                t.sort_unstable();
                t == s
            })
            .copied()
            .collect();
        group.shuffle(rng);
        for item in group.into_iter().take(4) {
            chosen.push(item);
            if chosen.len() == count {
                break 'outer;
            }
        }
    }
    if chosen.len() < count {
        return Err(ReidError::Config(format!("cannot build {count} distinct identities")));
    }
    Ok(chosen
        .into_iter()
        .map(|(a, b, c, pattern)| Appearance {
            head: PALETTE[a],
            torso: PALETTE[b],
            legs: PALETTE[c],
            pattern,
        })
        .collect())
}

fn random_appearance(rng: &mut ChaCha8Rng) -> Appearance {
    let mut color = || [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    Appearance {
        head: color(),
        torso: color(),
        legs: color(),
        pattern: TorsoPattern::Plain,
    }
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Stripes { angle: f64, period: f64 },
    Checker { cell: f64 },
    Waves { fx: f64, fy: f64 },
}

#[derive(Clone, Copy, Debug)]
struct CameraStyle {
    base: Rgb,
    accent: Rgb,
    texture: Texture,
}

fn camera_style(rng: &mut ChaCha8Rng) -> CameraStyle {
    let mut muted = || {
        let v = rng.gen_range(0.25..0.7);
        [v + rng.gen_range(-0.15..0.15), v + rng.gen_range(-0.15..0.15), v + rng.gen_range(-0.15..0.15)]
    };
    let base = muted();
    let accent = muted();
    let texture = match rng.gen_range(0..3) {
        0 => Texture::Stripes {
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            period: rng.gen_range(6.0..16.0),
        },
        1 => Texture::Checker { cell: rng.gen_range(5.0..12.0) },
        _ => Texture::Waves {
            fx: rng.gen_range(0.05..0.3),
            fy: rng.gen_range(0.05..0.3),
        },
    };
    CameraStyle { base, accent, texture }
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }
}

fn paint_background(canvas: &mut Canvas, style: &CameraStyle, phase: (f64, f64)) {
    let floor_top = ((1.0 - FLOOR_FRACTION) * canvas.h as f64) as usize;
    for y in 0..canvas.h {
        for x in 0..canvas.w {
            let (fx, fy) = (x as f64 + phase.0, y as f64 + phase.1);
            let c = if y >= floor_top {
                let v = 0.5 + 0.04 * ((fx * 0.7).sin() * (fy * 0.9).cos());
                [v, v, v]
            } else {
                let t = match style.texture {
                    Texture::Stripes { angle, period } => {
                        let u = fx * angle.cos() + fy * angle.sin();
                        if (u / period).rem_euclid(1.0) < 0.5 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Texture::Checker { cell } => (((fx / cell).floor() + (fy / cell).floor()) as i64).rem_euclid(2) as f64,
                    Texture::Waves { fx: a, fy: b } => 0.5 + 0.5 * (fx * a).sin() * (fy * b).cos(),
                };
                std::array::from_fn(|k| style.base[k] * (1.0 - t) + style.accent[k] * t)
            };
            canvas.px[y * canvas.w + x] = c;
        }
    }
}

/// Draws a person into `[x0, y0, x0 + w, y0 + h)`.
fn paint_clutter(canvas: &mut Canvas, cfg: &DataConfig, rng: &mut ChaCha8Rng) {
    for _ in 0..cfg.clutter {
        let w = rng.gen_range(0.2..0.6) * cfg.sprite_width as f64;
        let h = rng.gen_range(0.15..0.5) * cfg.sprite_height as f64;
        let x0 = rng.gen_range(0.0..(canvas.w as f64 - w).max(1.0));
        let y0 = rng.gen_range(0.0..(canvas.h as f64 - h).max(1.0));
        let c = PALETTE[rng.gen_range(0..PALETTE.len())];
        for y in y0 as i64..(y0 + h) as i64 {
            for x in x0 as i64..(x0 + w) as i64 {
                canvas.set(x, y, c);
            }
        }
    }
}

fn paint_person(canvas: &mut Canvas, app: &Appearance, x0: f64, y0: f64, w: f64, h: f64) {
    let head_h = 0.22 * h;
    let torso_h = 0.38 * h;
    let cx = x0 + w / 2.0;
    let (rx, ry) = (0.25 * w, head_h / 2.0);
    let cy = y0 + ry;
    for y in (y0.floor() as i64)..((y0 + h).ceil() as i64) {
        let yc = y as f64 + 0.5;
        for x in (x0.floor() as i64)..((x0 + w).ceil() as i64) {
            let xc = x as f64 + 0.5;
            let rel = yc - y0;
            let color = if rel < head_h {
                let d = ((xc - cx) / rx).powi(2) + ((yc - cy) / ry).powi(2);
                (d <= 1.0).then_some(app.head)
            } else if rel < head_h + torso_h {
                let inside = (xc - cx).abs() <= 0.4 * w;
                inside.then(|| match app.pattern {
                    TorsoPattern::Stripes if ((rel - head_h) / (torso_h / 6.0)) as i64 % 2 == 1 => {
                        app.torso.map(|v| v * 0.45)
                    }
                    _ => app.torso,
                })
            } else if rel < h {
                let off = (xc - cx).abs();
                (off >= 0.06 * w && off <= 0.36 * w).then_some(app.legs)
            } else {
                None
            };
            if let Some(c) = color {
                canvas.set(x, y, c);
            }
        }
    }
}

fn apply_transform(canvas: &mut Canvas, t: &SceneTransform) {
    let (w, h) = (canvas.w as f64, canvas.h as f64);
    let (dx, dy) = (t.shadow_angle.cos(), t.shadow_angle.sin());
    let half = 0.5 * (w * dx.abs() + h * dy.abs());
    for y in 0..canvas.h {
        for x in 0..canvas.w {
            let u = ((x as f64 - w / 2.0) * dx + (y as f64 - h / 2.0) * dy) / half.max(1.0);
            let shade = 1.0 - t.shadow * (0.5 + 0.5 * u).clamp(0.0, 1.0);
            let p = &mut canvas.px[y * canvas.w + x];
            for k in 0..3 {
                p[k] = (p[k] * t.tint[k] * t.brightness * shade).clamp(0.0, 1.0);
            }
        }
    }
}

fn random_transform(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> SceneTransform {
    let t = cfg.tint_jitter;
    let [b0, b1] = cfg.brightness_range;
    SceneTransform {
        tint: [rng.gen_range(1.0 - t..=1.0 + t), rng.gen_range(1.0 - t..=1.0 + t), rng.gen_range(1.0 - t..=1.0 + t)],
        brightness: rng.gen_range(b0..=b1),
        shadow: rng.gen_range(0.0..=cfg.max_shadow),
        shadow_angle: rng.gen_range(0.0..std::f64::consts::TAU),
        texture_seed: rng.gen(),
    }
}

/// Places `count` sprites whose boxes (sprite plus margin) do not overlap.
/// Returns `(sprite rect, box)` pairs.
fn place_people(cfg: &DataConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<([f64; 4], [f64; 4])>> {
    'layout: for _ in 0..50 {
        let mut placed: Vec<([f64; 4], [f64; 4])> = Vec::new();
        for _ in 0..count {
            let found = (0..100).find_map(|_| {
                let s = rng.gen_range(0.9..1.1);
                let w = (cfg.sprite_width as f64 * s).min(cfg.width as f64);
                let h = (cfg.sprite_height as f64 * s).min(cfg.height as f64);
                let x0 = rng.gen_range(0.0..=(cfg.width as f64 - w));
                // Feet land in the lower part of the scene.
                let feet = rng.gen_range((cfg.height as f64 * 0.35).max(h)..=cfg.height as f64);
                let y0 = feet - h;
                let sprite = [x0, y0, x0 + w, y0 + h];
                let (mx, my) = (cfg.box_margin * w, 0.5 * cfg.box_margin * h);
                let b = [
                    (x0 - mx).max(0.0),
                    (y0 - my).max(0.0),
                    (x0 + w + mx).min(cfg.width as f64),
                    (y0 + h + my).min(cfg.height as f64),
                ];
                placed.iter().all(|p| iou(&p.1, &b) == 0.0).then_some((sprite, b))
            });
            match found {
                Some(p) => placed.push(p),
                None => continue 'layout,
            }
        }
        return Ok(placed);
    }
    Err(ReidError::Dataset(format!(
        "cannot place {count} non-overlapping {}x{} people in a {}x{} scene",
        cfg.sprite_width, cfg.sprite_height, cfg.width, cfg.height
    )))
}

/// Random boxes of person-like size whose IoU with every person is below `max_iou`.
pub fn sample_background_boxes<R: Rng + ?Sized>(
    cfg: &DataConfig,
    persons: &[[f64; 4]],
    count: usize,
    rng: &mut R,
) -> Vec<[f64; 4]> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 200 * count.max(1) {
        attempts += 1;
        let w = cfg.sprite_width as f64 * rng.gen_range(0.8..1.2);
        let h = cfg.sprite_height as f64 * rng.gen_range(0.8..1.2);
        let w = w.min(cfg.width as f64);
        let h = h.min(cfg.height as f64);
        let x0 = rng.gen_range(0.0..=(cfg.width as f64 - w));
        let y0 = rng.gen_range(0.0..=(cfg.height as f64 - h));
        let b = [x0, y0, x0 + w, y0 + h];
        if persons.iter().all(|p| iou(p, &b) < cfg.background_max_iou) {
            out.push(b);
        }
    }
    out
}

struct SplitPlan<'a> {
    identities: &'a [usize],
    scenes: usize,
    first_id: usize,
}

fn generate_split(
    cfg: &DataConfig,
    registry: &[Appearance],
    cameras: &[CameraStyle],
    plan: SplitPlan,
    rng: &mut ChaCha8Rng,
) -> Result<Split> {
    let mut counts = vec![0usize; plan.identities.len()];
    let mut seen_cams: Vec<Vec<bool>> = vec![vec![false; cameras.len()]; plan.identities.len()];
    let mut scenes = Vec::with_capacity(plan.scenes);
    for s in 0..plan.scenes {
        let camera = s % cameras.len();
        let n = rng.gen_range(cfg.persons_per_scene[0]..=cfg.persons_per_scene[1]);
        let mut members: Vec<Option<usize>> = Vec::with_capacity(n);
        for _ in 0..n {
            if rng.gen_bool(cfg.unlabeled_fraction) {
                members.push(None);
                continue;
            }
            // Least-used identity not yet in this scene; prefer a new camera.
            let mut best: Option<(usize, bool, u32, usize)> = None;
            for k in 0..plan.identities.len() {
                if members.contains(&Some(k)) {
                    continue;
                }
                let key = (counts[k], seen_cams[k][camera], rng.gen::<u32>(), k);
                if best.map_or(true, |b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                    best = Some(key);
                }
            }
            match best {
                Some((_, _, _, k)) => {
                    counts[k] += 1;
                    seen_cams[k][camera] = true;
                    members.push(Some(k));
                }
                None => members.push(None),
            }
        }
        let placed = place_people(cfg, members.len(), rng)?;
        let boxes: Vec<[f64; 4]> = placed.iter().map(|p| p.1).collect();
        let transform = random_transform(cfg, rng);
        let mut canvas = Canvas {
            w: cfg.width,
            h: cfg.height,
            px: vec![[0.0; 3]; cfg.width * cfg.height],
        };
        let mut trng = ChaCha8Rng::seed_from_u64(transform.texture_seed);
        let phase = (trng.gen_range(0.0..32.0), trng.gen_range(0.0..32.0));
        paint_background(&mut canvas, &cameras[camera], phase);
        paint_clutter(&mut canvas, cfg, rng);
        let mut annotations = Vec::new();
        for (m, (r, b)) in members.iter().zip(&placed) {
            let app = match m {
                Some(k) => registry[plan.identities[*k]].clone(),
                None => random_appearance(rng),
            };
            let jitter = |c: Rgb, r: &mut ChaCha8Rng| c.map(|v| (v + r.gen_range(-0.04..0.04)).clamp(0.0, 1.0));
            let app = Appearance {
                head: jitter(app.head, rng),
                torso: jitter(app.torso, rng),
                legs: jitter(app.legs, rng),
                pattern: app.pattern,
            };
            paint_person(&mut canvas, &app, r[0], r[1], r[2] - r[0], r[3] - r[1]);
            annotations.push(BoxAnnotation {
                bbox: *b,
                kind: BoxKind::Person,
                identity: m.map(|k| plan.identities[k]),
            });
        }
        apply_transform(&mut canvas, &transform);
        let bg_count = (cfg.background_ratio * boxes.len() as f64).round() as usize;
        for b in sample_background_boxes(cfg, &boxes, bg_count, rng) {
            annotations.push(BoxAnnotation {
                bbox: b,
                kind: BoxKind::Background,
                identity: None,
            });
        }
        let pixels = canvas
            .px
            .iter()
            .flat_map(|p| p.map(|v| (v * 255.0).round() as u8))
            .collect();
        scenes.push(SceneSample {
            id: plan.first_id + s,
            camera,
            width: cfg.width,
            height: cfg.height,
            pixels,
            boxes: annotations,
            transform,
        });
    }
    for (k, cams) in seen_cams.iter().enumerate() {
        let c = cams.iter().filter(|&&b| b).count();
        if counts[k] > 0 && c < 2 {
            return Err(ReidError::Dataset(format!(
                "identity {} appears in only {c} camera(s); add scenes or cameras",
                plan.identities[k]
            )));
        }
    }
    let present: Vec<usize> = (0..plan.identities.len())
        .filter(|&k| counts[k] > 0)
        .map(|k| plan.identities[k])
        .collect();
    Ok(Split {
        scenes,
        identities: present,
    })
}

/// Generates train and test splits with disjoint identities.
pub fn synth_generate(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    if cfg.train_identities < 2 || cfg.test_identities < 2 || cfg.cameras < 2 {
        return Err(ReidError::Config("need at least 2 identities per split and 2 cameras".into()));
    }
    if cfg.sprite_width > cfg.width || cfg.sprite_height > cfg.height {
        return Err(ReidError::Dataset(format!(
            "{}x{} sprite does not fit in a {}x{} scene",
            cfg.sprite_width, cfg.sprite_height, cfg.width, cfg.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = build_registry(cfg.train_identities + cfg.test_identities, &mut rng)?;
    let mut order: Vec<usize> = (0..registry.len()).collect();
    order.shuffle(&mut rng);
    let mut train_ids = order[..cfg.train_identities].to_vec();
    let mut test_ids = order[cfg.train_identities..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let cameras: Vec<CameraStyle> = (0..cfg.cameras).map(|_| camera_style(&mut rng)).collect();
    let mut train_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut test_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let train = generate_split(
        cfg,
        &registry,
        &cameras,
        SplitPlan {
            identities: &train_ids,
            scenes: cfg.train_scenes,
            first_id: 0,
        },
        &mut train_rng,
    )?;
    let test = generate_split(
        cfg,
        &registry,
        &cameras,
        SplitPlan {
            identities: &test_ids,
            scenes: cfg.test_scenes,
            first_id: cfg.train_scenes,
        },
        &mut test_rng,
    )?;
    Ok(Dataset { registry, train, test })
}
