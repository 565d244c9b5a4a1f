//! Directory datasets laid out as `root/<split>/{images,labels,parts}/<stem>.png`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::provider::MaskProvider;
use crate::types::{BinaryMask, ImageTensor, PartMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidConfig(format!(
                "unknown split `{s}`; expected train, val or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub stem: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub parts: PathBuf,
}

/// A record left out of the index, with the reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub path: PathBuf,
    pub reason: String,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.reason)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub split: Split,
    pub records: Vec<Record>,
    pub rejected: Vec<Rejection>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Index `root/<split>` with the part masks from its `parts/` directory.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    load_dataset_with(root, split, None)
}

/// Like [`load_dataset`], optionally taking part masks from `parts_dir`.
///
/// Records whose files are missing, unreadable or disagree in size are
/// listed in `rejected` instead of failing the whole load.
pub fn load_dataset_with(root: &Path, split: Split, parts_dir: Option<&Path>) -> Result<DatasetIndex> {
    let base = root.join(split.as_str());
    let images = base.join("images");
    let labels = base.join("labels");
    let parts = parts_dir.map_or_else(|| base.join("parts"), Path::to_path_buf);
    for d in [&images, &labels, &parts] {
        if !d.is_dir() {
            return Err(Error::MissingDirectory(d.clone()));
        }
    }
    let mut index = DatasetIndex {
        split,
        records: Vec::new(),
        rejected: Vec::new(),
    };
    for stem in png_stems(&images)? {
        let file = format!("{stem}.png");
        let rec = Record {
            image: images.join(&file),
            label: labels.join(&file),
            parts: parts.join(&file),
            stem,
        };
        match check_record(&rec) {
            Ok(()) => index.records.push(rec),
            Err((path, reason)) => index.rejected.push(Rejection { path, reason }),
        }
    }
    Ok(index)
}

fn check_record(rec: &Record) -> std::result::Result<(), (PathBuf, String)> {
    let mut dims = Vec::with_capacity(3);
    for (what, path) in [("image", &rec.image), ("label", &rec.label), ("part mask", &rec.parts)] {
        if !path.is_file() {
            return Err((path.clone(), format!("missing {what} for `{}`", rec.stem)));
        }
        let d = codec::png_dimensions(path).map_err(|e| (path.clone(), e.to_string()))?;
        dims.push((what, d));
    }
    let (_, first) = dims[0];
    if let Some(&(what, (h, w))) = dims.iter().find(|(_, d)| *d != first) {
        let err = Error::DimensionMismatch {
            stem: rec.stem.clone(),
            detail: format!("image is {}x{} but {what} is {h}x{w}", first.0, first.1),
        };
        return Err((rec.image.clone(), err.to_string()));
    }
    Ok(())
}

/// A decoded record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: ImageTensor,
    pub label: BinaryMask,
    pub parts: PartMask,
}

fn load_sample(rec: &Record, provider: Option<&MaskProvider>) -> Result<Sample> {
    let image = codec::rgb_to_tensor(&codec::load_rgb(&rec.image)?)?;
    let label = codec::load_binary_mask(&rec.label)?;
    let (h, w) = (image.height(), image.width());
    let parts = match provider {
        Some(p) => p.get_parts(&rec.stem, h, w)?,
        None => codec::load_part_mask(&rec.parts)?,
    };
    if (label.height(), label.width()) != (h, w) || (parts.height(), parts.width()) != (h, w) {
        return Err(Error::DimensionMismatch {
            stem: rec.stem.clone(),
            detail: format!(
                "image {h}x{w}, label {}x{}, parts {}x{}",
                label.height(),
                label.width(),
                parts.height(),
                parts.width()
            ),
        });
    }
    Ok(Sample {
        stem: rec.stem.clone(),
        image,
        label,
        parts,
    })
}

/// Decode every record in index order. `provider` replaces the indexed
/// part-mask files when given.
pub fn load_samples(index: &DatasetIndex, provider: Option<&MaskProvider>, workers: usize) -> Result<Vec<Sample>> {
    par_map(&index.records, workers, |r| load_sample(r, provider))
        .into_iter()
        .collect()
}

/// Random draw of one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    /// Image brightness factor in `[0.9, 1.1]`.
    pub brightness: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        brightness: 1.0,
    };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip: rng.gen_bool(0.5),
            brightness: rng.gen_range(0.9..=1.1),
        }
    }
}

fn flip_rows<T: Copy>(data: &[T], w: usize, depth: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(w * depth) {
        for px in row.chunks(depth).rev() {
            out.extend_from_slice(px);
        }
    }
    out
}

/// Apply `draw`: the flip goes to every array, brightness to the image only.
pub fn apply_augment(
    draw: AugmentDraw,
    img: &ImageTensor,
    label: &BinaryMask,
    parts: &PartMask,
) -> Result<(ImageTensor, BinaryMask, PartMask)> {
    let (h, w) = (img.height(), img.width());
    let mut pixels = if draw.flip {
        flip_rows(img.data(), w, 3)
    } else {
        img.data().to_vec()
    };
    if draw.brightness != 1.0 {
        for v in &mut pixels {
            *v = (*v * draw.brightness).clamp(0.0, 1.0);
        }
    }
    let (label, parts) = if draw.flip {
        (
            BinaryMask::new(
                label.height(),
                label.width(),
                flip_rows(label.values(), label.width(), 1),
            )?,
            PartMask::new(
                parts.height(),
                parts.width(),
                flip_rows(parts.codes(), parts.width(), 1),
            )?,
        )
    } else {
        (label.clone(), parts.clone())
    };
    Ok((ImageTensor::new(h, w, pixels)?, label, parts))
}

/// Horizontal flip with probability 0.5 and brightness jitter of ±10%,
/// deterministic in `seed`.
pub fn augment(
    img: &ImageTensor,
    label: &BinaryMask,
    parts: &PartMask,
    seed: u64,
) -> Result<(ImageTensor, BinaryMask, PartMask)> {
    apply_augment(AugmentDraw::sample(seed), img, label, parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_synthetic_dataset, SynthConfig};

    #[test]
    fn empty_dirs_give_empty_index() {
        let root = tempfile::tempdir().unwrap();
        for d in ["images", "labels", "parts"] {
            fs::create_dir_all(root.path().join("val").join(d)).unwrap();
        }
        let idx = load_dataset(root.path(), Split::Val).unwrap();
        assert!(idx.is_empty() && idx.rejected.is_empty());
        assert!(matches!(
            load_dataset(root.path(), Split::Train),
            Err(Error::MissingDirectory(_))
        ));
    }

    #[test]
    fn partial_failures_are_reported_per_file() {
        let root = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_train: 4,
            num_val: 1,
            num_test: 1,
            ..SynthConfig::with_num(4, 16, 1)
        };
        write_synthetic_dataset(root.path(), &cfg).unwrap();
        let train = root.path().join("train");
        fs::remove_file(train.join("labels/train_00001.png")).unwrap();
        fs::write(train.join("parts/train_00002.png"), b"garbage").unwrap();
        codec::save_binary_mask(&train.join("labels/train_00003.png"), &BinaryMask::zeros(8, 8)).unwrap();
        let idx = load_dataset(root.path(), Split::Train).unwrap();
        assert_eq!(idx.records.len(), 1);
        assert_eq!(idx.records[0].stem, "train_00000");
        assert_eq!(idx.rejected.len(), 3);
        assert!(idx.rejected[0].reason.contains("missing label"));
        assert!(idx.rejected[2].reason.contains("dimension mismatch"));
    }

    #[test]
    fn synthetic_dump_round_trips() {
        let root = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            num_train: 10,
            ..SynthConfig::with_num(10, 32, 9)
        };
        write_synthetic_dataset(root.path(), &cfg).unwrap();
        let idx = load_dataset(root.path(), Split::Train).unwrap();
        let samples = load_samples(&idx, None, 3).unwrap();
        assert_eq!(samples.len(), 10);
        for s in &samples {
            let scene = crate::synth::scene_for(9, &s.stem, 32, &cfg.noise).unwrap();
            assert_eq!(s.label, scene.noisy_skin);
            assert_eq!(s.parts, scene.parts);
            assert!(s
                .image
                .data()
                .iter()
                .zip(scene.image.data())
                .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
            let truth =
                codec::load_binary_mask(&root.path().join(format!("train/labels_true/{}.png", s.stem))).unwrap();
            assert_eq!(truth, scene.true_skin);
        }
    }

    fn sample() -> (ImageTensor, BinaryMask, PartMask) {
        let img = ImageTensor::new(8, 8, (0..192).map(|i| i as f64 / 192.0).collect()).unwrap();
        let label = BinaryMask::from_fn(8, 8, |r, c| c > r);
        let parts = PartMask::new(8, 8, (0..64).map(|i| (i % 4) as u8).collect()).unwrap();
        (img, label, parts)
    }

    #[test]
    fn identity_draw_is_identity() {
        let (img, label, parts) = sample();
        let out = apply_augment(AugmentDraw::IDENTITY, &img, &label, &parts).unwrap();
        assert_eq!(out, (img, label, parts));
    }

    #[test]
    fn flip_commutes_with_masks() {
        let (img, label, parts) = sample();
        let draw = AugmentDraw {
            flip: true,
            brightness: 1.0,
        };
        let (fi, fl, fp) = apply_augment(draw, &img, &label, &parts).unwrap();
        assert_eq!(fl, BinaryMask::from_fn(8, 8, |r, c| 7 - c > r));
        assert_eq!(fp.get(2, 7), parts.get(2, 0));
        assert_eq!(fi.pixel(3, 0), img.pixel(3, 7));
        let (back, _, _) = apply_augment(draw, &fi, &fl, &fp).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn jitter_never_touches_masks() {
        let (img, label, parts) = sample();
        for seed in 0..100 {
            let draw = AugmentDraw::sample(seed);
            let (_, l, p) = augment(&img, &label, &parts, seed).unwrap();
            let (_, l0, p0) = apply_augment(
                AugmentDraw {
                    brightness: 1.0,
                    ..draw
                },
                &img,
                &label,
                &parts,
            )
            .unwrap();
            assert_eq!((l, p), (l0, p0));
            assert!((0.9..=1.1).contains(&draw.brightness));
        }
    }
}
