//! Seeded procedural scenes: a person (torso, arms, head, hands) in skin tone,
//! partly covered by clothing, on a cluttered background.
//!
//! Each scene yields the rendered image, the true skin mask, a noisy skin
//! label and the part mask. Label noise is one-sided by default: accessory
//! blobs (rendered in non-skin colors) are labeled as skin, so
//! `noisy ⊇ true`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, PartCode, PartMask};

/// Skin-tone anchors, light to dark.
pub const SKIN_TONES: [[u8; 3]; 12] = [
    [255, 224, 196],
    [241, 194, 167],
    [234, 192, 134],
    [224, 172, 105],
    [210, 160, 120],
    [198, 134, 66],
    [180, 120, 90],
    [161, 102, 94],
    [141, 85, 36],
    [120, 75, 50],
    [92, 56, 38],
    [70, 45, 35],
];

/// Per-channel jitter applied to the chosen anchor.
pub const TONE_JITTER: i32 = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub cy: f64,
    pub cx: f64,
    pub r: f64,
}

impl Disc {
    fn contains(&self, y: f64, x: f64) -> bool {
        (y - self.cy).powi(2) + (x - self.cx).powi(2) <= self.r * self.r
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2) <= 1.0
    }
}

/// Segment from `(y0, x0)` to `(y1, x1)` thickened by `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub y0: f64,
    pub x0: f64,
    pub y1: f64,
    pub x1: f64,
    pub r: f64,
}

impl Capsule {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (self.y1 - self.y0, self.x1 - self.x0);
        let len2 = dy * dy + dx * dx;
        let s = if len2 == 0.0 {
            0.0
        } else {
            (((y - self.y0) * dy + (x - self.x0) * dx) / len2).clamp(0.0, 1.0)
        };
        (y - self.y0 - s * dy).powi(2) + (x - self.x0 - s * dx).powi(2) <= self.r * self.r
    }
}

/// Half-open pixel rectangle `[top, bottom) x [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.bottom).contains(&r) && (self.left..self.right).contains(&c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: usize,
    pub skin_tone: [u8; 3],
    pub torso: Ellipse,
    pub face: Disc,
    pub arms: Vec<Capsule>,
    pub hands: Vec<Disc>,
    /// Clipped to the body minus face and hands when rendered.
    pub clothing: Vec<Rect>,
    pub clothing_color: [u8; 3],
    /// Non-skin objects labeled as skin.
    pub accessories: Vec<Disc>,
    pub accessory_color: [u8; 3],
    /// Growth of the noisy label, kept inside the body.
    pub dilation_radius: usize,
    /// Skin regions dropped from the noisy label (symmetric noise).
    pub holes: Vec<Disc>,
}

/// Generator output for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    pub true_skin: BinaryMask,
    pub noisy_skin: BinaryMask,
    pub parts: PartMask,
}

impl Scene {
    pub fn noise_iou(&self) -> f64 {
        self.noisy_skin.iou(&self.true_skin)
    }
}

/// Pixel centers sit at half-integer coordinates.
fn center(i: usize) -> f64 {
    i as f64 + 0.5
}

fn raster(size: usize, f: impl Fn(f64, f64) -> bool) -> BinaryMask {
    BinaryMask::from_fn(size, size, |r, c| f(center(r), center(c)))
}

fn or(a: &BinaryMask, b: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(a.height(), a.width(), |r, c| a.get(r, c) || b.get(r, c))
}

/// Square-window dilation (Chebyshev radius).
pub fn dilate(m: &BinaryMask, radius: usize) -> BinaryMask {
    if radius == 0 {
        return m.clone();
    }
    let (h, w) = (m.height(), m.width());
    BinaryMask::from_fn(h, w, |r, c| {
        let rows = r.saturating_sub(radius)..(r + radius + 1).min(h);
        rows.into_iter()
            .any(|rr| (c.saturating_sub(radius)..(c + radius + 1).min(w)).any(|cc| m.get(rr, cc)))
    })
}

struct Layers {
    parts: PartMask,
    body: BinaryMask,
    clothing: BinaryMask,
    true_skin: BinaryMask,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGeometry(m));
        let s = self.canvas;
        if s < 16 || !s.is_multiple_of(8) {
            return bad(format!("canvas {s} must be a multiple of 8 and at least 16"));
        }
        let sf = s as f64;
        let inside = |y: f64, x: f64, r: f64| y - r >= 0.0 && x - r >= 0.0 && y + r <= sf && x + r <= sf;
        let discs = std::iter::once(&self.face).chain(&self.hands);
        for d in discs.clone().chain(&self.accessories).chain(&self.holes) {
            if !(d.r > 0.0 && d.r.is_finite() && d.cy.is_finite() && d.cx.is_finite()) {
                return bad(format!("disc radius must be positive: {d:?}"));
            }
        }
        for d in discs {
            if !inside(d.cy, d.cx, d.r) {
                return bad(format!("disc {d:?} leaves the canvas"));
            }
        }
        let t = &self.torso;
        if !(t.ry > 0.0 && t.rx > 0.0) {
            return bad("torso radii must be positive".into());
        }
        for a in &self.arms {
            if !(a.r > 0.0 && inside(a.y0, a.x0, a.r) && inside(a.y1, a.x1, a.r)) {
                return bad(format!("arm {a:?} leaves the canvas"));
            }
        }
        for r in &self.clothing {
            if r.top >= r.bottom || r.left >= r.right || r.bottom > s || r.right > s {
                return bad(format!("clothing rectangle {r:?} is empty or off canvas"));
            }
        }
        let body = self.layers().body;
        for a in &self.accessories {
            if !raster(s, |y, x| a.contains(y, x))
                .values()
                .iter()
                .zip(body.values())
                .any(|(&p, &b)| p & b == 1)
            {
                return bad(format!("accessory {a:?} does not touch the body"));
            }
        }
        Ok(())
    }

    fn layers(&self) -> Layers {
        let s = self.canvas;
        let mut codes = vec![PartCode::Background as u8; s * s];
        for r in 0..s {
            for c in 0..s {
                let (y, x) = (center(r), center(c));
                let code = if self.hands.iter().any(|d| d.contains(y, x)) {
                    PartCode::Hand
                } else if self.face.contains(y, x) {
                    PartCode::Face
                } else if self.torso.contains(y, x) || self.arms.iter().any(|a| a.contains(y, x)) {
                    PartCode::Body
                } else {
                    continue;
                };
                codes[r * s + c] = code as u8;
            }
        }
        let parts = PartMask::new(s, s, codes).expect("valid codes");
        let body = crate::types::derive_body_mask(&parts);
        let clothing = BinaryMask::from_fn(s, s, |r, c| {
            parts.get(r, c) == PartCode::Body && self.clothing.iter().any(|q| q.contains(r, c))
        });
        let true_skin = BinaryMask::from_fn(s, s, |r, c| body.get(r, c) && !clothing.get(r, c));
        Layers {
            parts,
            body,
            clothing,
            true_skin,
        }
    }

    fn noisy_label(&self, l: &Layers) -> BinaryMask {
        let s = self.canvas;
        let blobs = raster(s, |y, x| self.accessories.iter().any(|a| a.contains(y, x)));
        let grown = dilate(&or(&l.true_skin, &blobs), self.dilation_radius);
        let holes = raster(s, |y, x| self.holes.iter().any(|d| d.contains(y, x)));
        BinaryMask::from_fn(s, s, |r, c| {
            let labeled = blobs.get(r, c) || (grown.get(r, c) && l.body.get(r, c));
            labeled && !(holes.get(r, c) && l.true_skin.get(r, c))
        })
    }

    /// Random person geometry and colors; noise per `noise`.
    pub fn random(seed: u64, canvas: usize, noise: &NoiseConfig) -> Result<SceneSpec> {
        if canvas < 16 || !canvas.is_multiple_of(8) {
            return Err(Error::InvalidGeometry(format!(
                "canvas {canvas} must be a multiple of 8 and at least 16"
            )));
        }
        noise.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = canvas as f64;
        let j = |rng: &mut ChaCha8Rng, a: f64| rng.gen_range(-a..a) * s;

        let anchor = SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())];
        let skin_tone = anchor.map(|v| (v as i32 + rng.gen_range(-TONE_JITTER..=TONE_JITTER)).clamp(0, 255) as u8);

        let torso = Ellipse {
            cy: 0.68 * s + j(&mut rng, 0.03),
            cx: 0.5 * s + j(&mut rng, 0.06),
            ry: 0.25 * s + j(&mut rng, 0.02),
            rx: 0.16 * s + j(&mut rng, 0.02),
        };
        let head_r = 0.1 * s + j(&mut rng, 0.012);
        let face = Disc {
            cy: torso.cy - torso.ry - 0.6 * head_r,
            cx: torso.cx + j(&mut rng, 0.02),
            r: head_r,
        };
        let arm_r = 0.045 * s;
        let hand_r = 0.055 * s + j(&mut rng, 0.008);
        let margin = hand_r + 1.0;
        let mut arms = Vec::new();
        let mut hands = Vec::new();
        for side in [-1.0, 1.0] {
            let sy = torso.cy - 0.7 * torso.ry;
            let sx = torso.cx + side * 0.85 * torso.rx;
            let hy = rng.gen_range(0.35..0.85) * s;
            let hx = (torso.cx + side * rng.gen_range(0.28..0.42) * s).clamp(margin, s - margin);
            let hy = hy.clamp(margin, s - margin);
            arms.push(Capsule {
                y0: sy,
                x0: sx,
                y1: hy,
                x1: hx,
                r: arm_r,
            });
            hands.push(Disc {
                cy: hy,
                cx: hx,
                r: hand_r,
            });
        }

        let neck_gap = rng.gen_range(0.02..0.12) * s;
        let sleeve = rng.gen_range(0.0..0.12) * s;
        let top = (torso.cy - torso.ry + neck_gap).max(0.0) as usize;
        let left = (torso.cx - torso.rx - sleeve).max(0.0) as usize;
        let right = ((torso.cx + torso.rx + sleeve).ceil() as usize).min(canvas);
        let clothing = vec![Rect {
            top: top.min(canvas - 1),
            left: left.min(right.saturating_sub(1)),
            bottom: canvas,
            right: right.max(1),
        }];
        let clothing_color = distinct_color(&mut rng, skin_tone, 0.3);
        let accessory_color = loop {
            let c = distinct_color(&mut rng, skin_tone, 0.3);
            if dist(c, clothing_color) > 0.25 {
                break c;
            }
        };

        let mut spec = SceneSpec {
            seed,
            canvas,
            skin_tone,
            torso,
            face,
            arms,
            hands,
            clothing,
            clothing_color,
            accessories: Vec::new(),
            accessory_color,
            dilation_radius: noise.dilation_radius,
            holes: Vec::new(),
        };
        spec.place_noise(&mut rng, noise);
        Ok(spec)
    }

    fn place_noise(&mut self, rng: &mut ChaCha8Rng, noise: &NoiseConfig) {
        let layers = self.layers();
        let s = self.canvas;
        let scale = s as f64 / 64.0;
        let sites: Vec<(usize, usize)> = (0..s * s)
            .map(|i| (i / s, i % s))
            .filter(|&(r, c)| layers.clothing.get(r, c))
            .collect();
        let skin: Vec<(usize, usize)> = (0..s * s)
            .map(|i| (i / s, i % s))
            .filter(|&(r, c)| layers.true_skin.get(r, c))
            .collect();
        for _ in 0..noise.holes {
            if let Some(&(r, c)) = pick(rng, &skin) {
                self.holes.push(Disc {
                    cy: center(r),
                    cx: center(c),
                    r: rng.gen_range(noise.blob_radius.0..=noise.blob_radius.1) * scale,
                });
            }
        }
        let blob = |rng: &mut ChaCha8Rng| {
            pick(rng, &sites).map(|&(r, c)| Disc {
                cy: center(r),
                cx: center(c),
                r: rng.gen_range(noise.blob_radius.0..=noise.blob_radius.1) * scale,
            })
        };
        match noise.iou_target {
            None => {
                for _ in 0..noise.blobs {
                    if let Some(d) = blob(rng) {
                        self.accessories.push(d);
                    }
                }
            }
            Some(target) => {
                let mut iou = self.noisy_label(&layers).iou(&layers.true_skin);
                for _ in 0..noise.max_blobs {
                    if iou <= target {
                        break;
                    }
                    let Some(d) = blob(rng) else { break };
                    self.accessories.push(d);
                    let next = self.noisy_label(&layers).iou(&layers.true_skin);
                    if next <= target && target - next > iou - target {
                        self.accessories.pop();
                        break;
                    }
                    iou = next;
                }
            }
        }
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, v: &'a [T]) -> Option<&'a T> {
    if v.is_empty() {
        None
    } else {
        Some(&v[rng.gen_range(0..v.len())])
    }
}

fn dist(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| ((x as f64 - y as f64) / 255.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn distinct_color(rng: &mut ChaCha8Rng, skin: [u8; 3], min_dist: f64) -> [u8; 3] {
    loop {
        let c = [rng.gen(), rng.gen(), rng.gen()];
        if dist(c, skin) > min_dist {
            return c;
        }
    }
}

/// Render a scene. Deterministic in the spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let s = spec.canvas;
    let layers = spec.layers();
    let noisy_skin = spec.noisy_label(&layers);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_BA5E);

    let base = distinct_color(&mut rng, spec.skin_tone, 0.25);
    let clutter: Vec<(Rect, [u8; 3])> = (0..8)
        .map(|_| {
            let (t, l) = (rng.gen_range(0..s), rng.gen_range(0..s));
            let rect = Rect {
                top: t,
                left: l,
                bottom: (t + rng.gen_range(2..=s / 3)).min(s),
                right: (l + rng.gen_range(2..=s / 3)).min(s),
            };
            (rect, distinct_color(&mut rng, spec.skin_tone, 0.25))
        })
        .collect();
    let accessories = raster(s, |y, x| spec.accessories.iter().any(|a| a.contains(y, x)));
    let to_f = |c: [u8; 3]| c.map(|v| v as f64 / 255.0);

    let mut data = Vec::with_capacity(s * s * 3);
    for r in 0..s {
        for c in 0..s {
            let (color, amp) = if accessories.get(r, c) && !layers.true_skin.get(r, c) {
                (to_f(spec.accessory_color), 0.03)
            } else if layers.clothing.get(r, c) {
                (to_f(spec.clothing_color), 0.04)
            } else if layers.body.get(r, c) {
                let shade = 1.0 - 0.1 * ((center(r) - spec.torso.cy).abs() / s as f64);
                (to_f(spec.skin_tone).map(|v| v * shade), 0.025)
            } else {
                let col = clutter
                    .iter()
                    .rev()
                    .find(|(q, _)| q.contains(r, c))
                    .map_or(base, |&(_, col)| col);
                (to_f(col), 0.05)
            };
            for v in color {
                data.push((v + rng.gen_range(-amp..amp)).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Scene {
        image: ImageTensor::new(s, s, data)?,
        true_skin: layers.true_skin,
        noisy_skin,
        parts: layers.parts,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Add accessory blobs until IoU(noisy, true) reaches this value.
    pub iou_target: Option<f64>,
    /// Fixed blob count when no target is set.
    pub blobs: usize,
    pub max_blobs: usize,
    /// Radius range at a 64 px canvas; scaled with the canvas.
    pub blob_radius: (f64, f64),
    pub dilation_radius: usize,
    /// Symmetric-noise holes cut into true skin; 0 keeps noise one-sided.
    pub holes: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            iou_target: Some(0.75),
            blobs: 0,
            max_blobs: 64,
            blob_radius: (2.0, 4.0),
            dilation_radius: 0,
            holes: 0,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            iou_target: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.iou_target {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidConfig(format!("noise IoU target {t} outside (0, 1]")));
            }
        }
        let (a, b) = self.blob_radius;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::InvalidConfig(format!("blob radius range {a}..{b} is invalid")));
        }
        Ok(())
    }
}

/// FNV-1a over the seed bytes followed by the stem.
pub fn record_seed(seed: u64, stem: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(stem.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Scene of one record of a synthetic dump.
pub fn scene_for(seed: u64, stem: &str, canvas: usize, noise: &NoiseConfig) -> Result<Scene> {
    generate_scene(&SceneSpec::random(record_seed(seed, stem), canvas, noise)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub size: usize,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl SynthConfig {
    /// `num` training scenes, with a quarter as many (at least one) for
    /// validation and test.
    pub fn with_num(num: usize, size: usize, seed: u64) -> Self {
        let held = (num / 4).max(1);
        Self {
            num_train: num,
            num_val: held,
            num_test: held,
            size,
            seed,
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Pooled IoU of the noisy training labels against the true masks.
    pub train_noise_iou: f64,
}

pub fn stem(split: &str, i: usize) -> String {
    format!("{split}_{i:05}")
}

/// Pooled IoU: total intersection over total union.
pub fn pooled_iou<'a>(pairs: impl IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (a, b) in pairs {
        for (&x, &y) in a.values().iter().zip(b.values()) {
            inter += (x & y) as u64;
            union += (x | y) as u64;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Write `root/{train,val,test}/{images,labels,parts}/<stem>.png`.
///
/// Training labels are the noisy ones; `train/labels_true` holds the clean
/// masks. Validation and test labels are clean.
pub fn write_synthetic_dataset(root: &Path, cfg: &SynthConfig) -> Result<SynthSummary> {
    cfg.noise.validate()?;
    let mut noisy_pairs = Vec::new();
    for (split, n) in [("train", cfg.num_train), ("val", cfg.num_val), ("test", cfg.num_test)] {
        let dir = root.join(split);
        let sub = |name: &str| -> PathBuf { dir.join(name) };
        for d in ["images", "labels", "parts"] {
            mkdir(&sub(d))?;
        }
        if split == "train" {
            mkdir(&sub("labels_true"))?;
        }
        for i in 0..n {
            let stem = stem(split, i);
            let scene = scene_for(cfg.seed, &stem, cfg.size, &cfg.noise)?;
            let file = format!("{stem}.png");
            codec::save_rgb(&sub("images").join(&file), &codec::tensor_to_rgb(&scene.image))?;
            codec::save_part_mask(&sub("parts").join(&file), &scene.parts)?;
            if split == "train" {
                codec::save_binary_mask(&sub("labels").join(&file), &scene.noisy_skin)?;
                codec::save_binary_mask(&sub("labels_true").join(&file), &scene.true_skin)?;
                noisy_pairs.push((scene.noisy_skin, scene.true_skin));
            } else {
                codec::save_binary_mask(&sub("labels").join(&file), &scene.true_skin)?;
            }
        }
    }
    Ok(SynthSummary {
        train: cfg.num_train,
        val: cfg.num_val,
        test: cfg.num_test,
        train_noise_iou: pooled_iou(noisy_pairs.iter().map(|(a, b)| (a, b))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::derive_face_hand_mask;
    use proptest::prelude::*;

    fn clean(seed: u64) -> SceneSpec {
        let mut s = SceneSpec::random(seed, 64, &NoiseConfig::none()).unwrap();
        s.clothing.clear();
        s
    }

    fn subset(a: &BinaryMask, b: &BinaryMask) -> bool {
        a.values().iter().zip(b.values()).all(|(&x, &y)| x <= y)
    }

    #[test]
    fn noiseless_unclothed_scene_labels_the_whole_body() {
        let scene = generate_scene(&clean(3)).unwrap();
        let body = crate::types::derive_body_mask(&scene.parts);
        assert_eq!(scene.true_skin, body);
        assert_eq!(scene.noisy_skin, body);
    }

    #[test]
    fn single_blob_adds_its_pixel_count() {
        let mut spec = SceneSpec::random(4, 64, &NoiseConfig::none()).unwrap();
        let l = spec.layers();
        let (r, c) = (0..64 * 64)
            .map(|i| (i / 64, i % 64))
            .find(|&(r, c)| {
                (4..60).contains(&r)
                    && (4..60).contains(&c)
                    && l.clothing.get(r, c)
                    && (r - 4..=r + 4).all(|rr| (c - 4..=c + 4).all(|cc| !l.true_skin.get(rr, cc)))
            })
            .unwrap();
        let blob = Disc {
            cy: center(r),
            cx: center(c),
            r: 3.1,
        };
        spec.accessories = vec![blob];
        let scene = generate_scene(&spec).unwrap();
        // brute-force count of disc pixels outside the true mask
        let mut expected = 0;
        for rr in 0..64 {
            for cc in 0..64 {
                let (dy, dx) = (rr as f64 + 0.5 - blob.cy, cc as f64 + 0.5 - blob.cx);
                if dy * dy + dx * dx <= blob.r * blob.r && !scene.true_skin.get(rr, cc) {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 29);
        assert_eq!(scene.noisy_skin.count() - scene.true_skin.count(), expected);

        spec.dilation_radius = 1;
        let grown = generate_scene(&spec).unwrap();
        assert!(grown.noisy_skin.count() - grown.true_skin.count() > expected);
    }

    #[test]
    fn same_seed_same_scene() {
        let noise = NoiseConfig::default();
        let a = generate_scene(&SceneSpec::random(77, 64, &noise).unwrap()).unwrap();
        let b = generate_scene(&SceneSpec::random(77, 64, &noise).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SceneSpec::random(78, 64, &noise).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_target_is_approached() {
        let noise = NoiseConfig::default();
        let scenes: Vec<Scene> = (0..40)
            .map(|i| scene_for(1, &stem("train", i), 64, &noise).unwrap())
            .collect();
        let iou = pooled_iou(scenes.iter().map(|s| (&s.noisy_skin, &s.true_skin)));
        assert!((iou - 0.75).abs() < 0.03, "pooled noise IoU {iou}");
    }

    #[test]
    fn bad_geometry_rejected() {
        let mut s = clean(1);
        s.face.cy = -5.0;
        assert!(matches!(generate_scene(&s), Err(Error::InvalidGeometry(_))));
        let mut s = clean(1);
        s.accessories.push(Disc {
            cy: 1.0,
            cx: 1.0,
            r: 0.5,
        });
        assert!(matches!(generate_scene(&s), Err(Error::InvalidGeometry(_))));
        assert!(SceneSpec::random(1, 60, &NoiseConfig::none()).is_err());
    }

    #[test]
    fn record_seed_is_fnv1a() {
        // FNV-1a of the empty input is the offset basis; of 8 zero bytes:
        let mut h: u64 = 0xcbf29ce484222325;
        for _ in 0..8 {
            h = h.wrapping_mul(0x100000001b3);
        }
        assert_eq!(record_seed(0, ""), h);
        assert_ne!(record_seed(0, "a"), record_seed(0, "b"));
        assert_ne!(record_seed(0, "a"), record_seed(1, "a"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn scene_invariants(seed in any::<u64>(), holes in 0usize..2) {
            let noise = NoiseConfig { holes, ..NoiseConfig::default() };
            let spec = SceneSpec::random(seed, 64, &noise).unwrap();
            let scene = generate_scene(&spec).unwrap();
            let body = crate::types::derive_body_mask(&scene.parts);
            prop_assert!(subset(&scene.true_skin, &body));
            prop_assert!(subset(&derive_face_hand_mask(&scene.parts), &scene.true_skin));
            if holes == 0 {
                prop_assert!(subset(&scene.true_skin, &scene.noisy_skin));
            }
            let blobs = raster(64, |y, x| spec.accessories.iter().any(|a| a.contains(y, x)));
            for i in 0..64 * 64 {
                let (r, c) = (i / 64, i % 64);
                if scene.noisy_skin.get(r, c) && !body.get(r, c) {
                    prop_assert!(blobs.get(r, c));
                }
            }
        }
    }
}
