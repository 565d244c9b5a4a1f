//! PNG encodings of images and masks.
//!
//! * Part masks: 8-bit grayscale, values exactly `{0, 1, 2, 3}`.
//! * Binary masks: 8-bit grayscale, values exactly `{0, 255}`.
//! * Images: 8-bit RGB (gray and RGBA inputs are converted on load).

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, ImageReader, Limits, RgbImage};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ImageTensor, PartMask, SkinProbMap};

const MAX_SIDE: u32 = 16_384;
const MAX_ALLOC: u64 = 512 << 20;

fn decode_png(bytes: &[u8], context: &str) -> Result<DynamicImage> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let mut limits = Limits::default();
    limits.max_image_width = Some(MAX_SIDE);
    limits.max_image_height = Some(MAX_SIDE);
    limits.max_alloc = Some(MAX_ALLOC);
    reader.limits(limits);
    reader.decode().map_err(|source| Error::Image {
        context: context.to_string(),
        source,
    })
}

fn gray8(bytes: &[u8], context: &str) -> Result<GrayImage> {
    match decode_png(bytes, context)? {
        DynamicImage::ImageLuma8(img) => Ok(img),
        other => Err(Error::InvalidValue(format!(
            "{context}: expected 8-bit single-channel PNG, got {:?}",
            other.color()
        ))),
    }
}

pub fn decode_part_mask(bytes: &[u8]) -> Result<PartMask> {
    let img = gray8(bytes, "part mask")?;
    let (w, h) = img.dimensions();
    PartMask::new(h as usize, w as usize, img.into_raw())
}

pub fn decode_binary_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let img = gray8(bytes, "binary mask")?;
    let (w, h) = img.dimensions();
    let mut values = Vec::with_capacity((w * h) as usize);
    for (i, &v) in img.as_raw().iter().enumerate() {
        match v {
            0 => values.push(0),
            255 => values.push(1),
            other => {
                return Err(Error::InvalidValue(format!(
                    "binary mask pixel ({}, {}) is {other}; expected 0 or 255",
                    i / w as usize,
                    i % w as usize
                )))
            }
        }
    }
    BinaryMask::new(h as usize, w as usize, values)
}

/// Decode any PNG into 8-bit RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(decode_png(bytes, "image")?.into_rgb8())
}

pub fn rgb_to_tensor(img: &RgbImage) -> Result<ImageTensor> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

pub fn tensor_to_rgb(img: &ImageTensor) -> RgbImage {
    let raw = img
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("sized by tensor")
}

fn encode(img: DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn encode_part_mask(m: &PartMask) -> Vec<u8> {
    let img = GrayImage::from_raw(m.width() as u32, m.height() as u32, m.codes().to_vec()).expect("mask dims");
    encode(DynamicImage::ImageLuma8(img))
}

pub fn encode_binary_mask(m: &BinaryMask) -> Vec<u8> {
    let raw = m.values().iter().map(|&v| v * 255).collect();
    let img = GrayImage::from_raw(m.width() as u32, m.height() as u32, raw).expect("mask dims");
    encode(DynamicImage::ImageLuma8(img))
}

pub fn encode_rgb(img: &RgbImage) -> Vec<u8> {
    encode(DynamicImage::ImageRgb8(img.clone()))
}

/// Grayscale rendering of an attention map, `(-1, 1)` mapped linearly onto
/// `[0, 255]`; zero lands on 128.
pub fn encode_attention(map: &SkinProbMap) -> Vec<u8> {
    let raw = map
        .values()
        .iter()
        .map(|&a| ((a.clamp(-1.0, 1.0) + 1.0) * 127.5).round().min(255.0) as u8)
        .collect();
    let img = GrayImage::from_raw(map.width() as u32, map.height() as u32, raw).expect("map dims");
    encode(DynamicImage::ImageLuma8(img))
}

/// Width and height from the PNG header, without decoding pixels.
pub fn png_dimensions(path: &Path) -> Result<(usize, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::with_format(std::io::BufReader::new(file), ImageFormat::Png);
    let (w, h) = reader.into_dimensions().map_err(|source| Error::Image {
        context: path.display().to_string(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Image { context, source } => Error::Image {
            context: format!("{context} {}", path.display()),
            source,
        },
        Error::InvalidValue(msg) => Error::InvalidValue(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_part_mask(path: &Path) -> Result<PartMask> {
    with_path(path, decode_part_mask(&read(path)?))
}

pub fn load_binary_mask(path: &Path) -> Result<BinaryMask> {
    with_path(path, decode_binary_mask(&read(path)?))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    with_path(path, decode_rgb(&read(path)?))
}

pub fn save_part_mask(path: &Path, m: &PartMask) -> Result<()> {
    write(path, &encode_part_mask(m))
}

pub fn save_binary_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write(path, &encode_binary_mask(m))
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write(path, &encode_rgb(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binary_mask_rejects_gray_levels() {
        let img = GrayImage::from_raw(2, 1, vec![0, 128]).unwrap();
        let bytes = encode(DynamicImage::ImageLuma8(img));
        assert!(matches!(decode_binary_mask(&bytes), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn part_mask_rejects_out_of_range_codes() {
        let img = GrayImage::from_raw(2, 2, vec![0, 1, 2, 9]).unwrap();
        let bytes = encode(DynamicImage::ImageLuma8(img));
        assert!(matches!(
            decode_part_mask(&bytes),
            Err(Error::InvalidCode { code: 9, .. })
        ));
    }

    #[test]
    fn masks_reject_rgb_png() {
        let bytes = encode_rgb(&RgbImage::new(4, 4));
        assert!(decode_part_mask(&bytes).is_err());
        assert!(decode_binary_mask(&bytes).is_err());
    }

    #[test]
    fn garbage_is_an_error_not_a_panic() {
        assert!(decode_part_mask(b"not a png").is_err());
        assert!(decode_rgb(&[0x89, b'P', b'N', b'G']).is_err());
    }

    #[test]
    fn attention_zero_is_mid_gray() {
        let map = SkinProbMap::new(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let img = gray8(&encode_attention(&map), "t").unwrap();
        assert_eq!(img.as_raw(), &vec![128, 0, 255, 128]);
    }

    proptest! {
        #[test]
        fn masks_survive_png(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
            let codes: Vec<u8> = (0..h * w).map(|i| ((seed >> (i % 60)) & 3) as u8).collect();
            let parts = PartMask::new(h, w, codes).unwrap();
            prop_assert_eq!(decode_part_mask(&encode_part_mask(&parts)).unwrap(), parts.clone());
            let bin = crate::types::derive_face_hand_mask(&parts);
            prop_assert_eq!(decode_binary_mask(&encode_binary_mask(&bin)).unwrap(), bin);
        }
    }
}
