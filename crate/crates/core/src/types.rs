//! Image, mask and feature containers shared by every other module.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with intensities in `[0, 1]`, stored row-major as `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < 8 || width < 8 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
            return Err(Error::shape(format!(
                "image sides must be multiples of 8 and at least 8, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("image intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-first copy, `[3, H, W]`.
    pub fn to_chw(&self) -> Tensor {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.data[i * 3 + c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("sized above")
    }
}

/// `C x H x W` activation. Always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor(Tensor);

impl FeatureTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![channels, height, width], data)?)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        t.dims3()?;
        if !t.all_finite() {
            return Err(Error::NumericFailure("non-finite feature value".into()));
        }
        Ok(Self(t))
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[channels, height, width]))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Body-part code of one pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PartCode {
    Background = 0,
    Body = 1,
    Face = 2,
    Hand = 3,
}

impl PartCode {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Background),
            1 => Some(Self::Body),
            2 => Some(Self::Face),
            3 => Some(Self::Hand),
            _ => None,
        }
    }
}

/// Per-pixel body-part map with codes `0=background, 1=body, 2=face, 3=hand`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartMask {
    height: usize,
    width: usize,
    codes: Vec<u8>,
}

impl PartMask {
    pub fn new(height: usize, width: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} part mask needs {} codes, got {}",
                height * width,
                codes.len()
            )));
        }
        if let Some(i) = codes.iter().position(|&c| c > 3) {
            return Err(Error::InvalidCode {
                code: codes[i],
                row: i / width.max(1),
                col: i % width.max(1),
            });
        }
        Ok(Self { height, width, codes })
    }

    pub fn filled(height: usize, width: usize, code: PartCode) -> Self {
        Self {
            height,
            width,
            codes: vec![code as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn get(&self, row: usize, col: usize) -> PartCode {
        PartCode::from_u8(self.codes[row * self.width + col]).expect("validated on construction")
    }

    /// Nearest-neighbour resampling of the code map.
    pub fn resized(&self, height: usize, width: usize) -> Result<PartMask> {
        let codes = nearest(&self.codes, (self.height, self.width), (height, width))?;
        Ok(PartMask { height, width, codes })
    }
}

/// Strictly binary `{0, 1}` mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidValue(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c) as u8);
            }
        }
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col] == 1
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Threshold a probability map: positive where `value > threshold`.
    pub fn from_threshold(map: &SkinProbMap, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: map.height,
            width: map.width,
            values: map.values.iter().map(|&v| (v > threshold) as u8).collect(),
        }
    }

    /// Intersection over union with `other`; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.values.iter().zip(&other.values) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Real-valued per-pixel map: sigmoid output in `[0, 1]` or attention in `(-1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinProbMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SkinProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

fn nearest<T: Copy>(src: &[T], (h, w): (usize, usize), (th, tw): (usize, usize)) -> Result<Vec<T>> {
    if th == 0 || tw == 0 {
        return Err(Error::shape("resize target must be at least 1x1"));
    }
    if (h, w) == (th, tw) {
        return Ok(src.to_vec());
    }
    let mut out = Vec::with_capacity(th * tw);
    for r in 0..th {
        let sr = r * h / th;
        for c in 0..tw {
            out.push(src[sr * w + c * w / tw]);
        }
    }
    Ok(out)
}

/// Pixels with any body-part code (`code >= 1`).
pub fn derive_body_mask(parts: &PartMask) -> BinaryMask {
    BinaryMask {
        height: parts.height,
        width: parts.width,
        values: parts.codes.iter().map(|&c| (c >= 1) as u8).collect(),
    }
}

/// Pixels coded face or hand.
pub fn derive_face_hand_mask(parts: &PartMask) -> BinaryMask {
    BinaryMask {
        height: parts.height,
        width: parts.width,
        values: parts.codes.iter().map(|&c| (c == 2 || c == 3) as u8).collect(),
    }
}

/// Nearest-neighbour mask resampling; source row for target row `i` is
/// `floor(i * h / target_h)`.
pub fn resize_mask(mask: &BinaryMask, target_h: usize, target_w: usize) -> Result<BinaryMask> {
    let values = nearest(&mask.values, (mask.height, mask.width), (target_h, target_w))?;
    Ok(BinaryMask {
        height: target_h,
        width: target_w,
        values,
    })
}
