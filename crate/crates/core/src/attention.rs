//! Body Attention (CBAM channel + mask-guided spatial attention) and Skin
//! Attention (face/hand affinity map gated by a trainable scalar).
//!
//! Each block is available two ways: as a graph builder taking bound
//! parameter [`Var`]s, used by the network and by gradient checks, and as a
//! pure function over [`FeatureTensor`]s.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::types::{derive_body_mask, derive_face_hand_mask, BinaryMask, FeatureTensor, PartMask, SkinProbMap};

/// Kernel side of the spatial attention convolution.
pub const SPATIAL_KERNEL: usize = 7;
/// Initial value of the skin attention gate.
pub const OMEGA_INIT: f64 = 1.0;

/// Shared MLP of the channel attention: `C -> C/r -> C`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub reduction: usize,
}

impl ChannelAttentionParams {
    pub fn new(w1: Tensor, w2: Tensor, reduction: usize) -> Result<Self> {
        let (hidden, c) = match w1.shape() {
            &[h, c] => (h, c),
            s => return Err(Error::shape(format!("mlp_w1 must be a matrix, got {s:?}"))),
        };
        if reduction == 0 || c % reduction != 0 || hidden != c / reduction || hidden == 0 {
            return Err(Error::shape(format!(
                "hidden size {hidden} does not equal {c} / {reduction}"
            )));
        }
        if w2.shape() != [c, hidden] {
            return Err(Error::shape(format!("mlp_w2 must be [{c}, {hidden}]")));
        }
        Ok(Self { w1, w2, reduction })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = hidden_size(channels, reduction)?;
        Self::new(
            Tensor::zeros(&[hidden, channels]),
            Tensor::zeros(&[channels, hidden]),
            reduction,
        )
    }

    pub fn random(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = hidden_size(channels, reduction)?;
        Self::new(
            uniform(&[hidden, channels], channels, rng),
            uniform(&[channels, hidden], hidden, rng),
            reduction,
        )
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }
}

pub fn hidden_size(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) || channels / reduction == 0 {
        return Err(Error::shape(format!(
            "reduction ratio {reduction} must divide {channels} channels"
        )));
    }
    Ok(channels / reduction)
}

/// 7x7 convolution over `[avg, max, body]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    pub kernel: Tensor,
    pub bias: f64,
}

impl SpatialAttentionParams {
    pub fn new(kernel: Tensor, bias: f64) -> Result<Self> {
        if kernel.shape() != [1, 3, SPATIAL_KERNEL, SPATIAL_KERNEL] {
            return Err(Error::shape(format!(
                "spatial kernel must be [1, 3, 7, 7], got {:?}",
                kernel.shape()
            )));
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros() -> Self {
        Self {
            kernel: Tensor::zeros(&[1, 3, SPATIAL_KERNEL, SPATIAL_KERNEL]),
            bias: 0.0,
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            kernel: uniform(&[1, 3, SPATIAL_KERNEL, SPATIAL_KERNEL], 3 * 49, rng),
            bias: 0.0,
        }
    }
}

/// 1x1 projections producing K and Q, their normalization affine terms, and
/// the gate `omega`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinAttentionParams {
    pub conv_k: Tensor,
    pub conv_q: Tensor,
    pub k_scale: Tensor,
    pub k_shift: Tensor,
    pub q_scale: Tensor,
    pub q_shift: Tensor,
    pub omega: f64,
}

impl SkinAttentionParams {
    /// Identity projections, unit scale, zero shift.
    pub fn identity(channels: usize, omega: f64) -> Self {
        let mut eye = Tensor::zeros(&[channels, channels, 1, 1]);
        for c in 0..channels {
            eye.data_mut()[c * channels + c] = 1.0;
        }
        Self {
            conv_k: eye.clone(),
            conv_q: eye,
            k_scale: Tensor::full(&[channels], 1.0),
            k_shift: Tensor::zeros(&[channels]),
            q_scale: Tensor::full(&[channels], 1.0),
            q_shift: Tensor::zeros(&[channels]),
            omega,
        }
    }

    /// Random projection shared by K and Q at initialization, so that the
    /// initial affinity of a face/hand pixel with itself is non-negative.
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let w = uniform(&[channels, channels, 1, 1], channels, rng);
        Self {
            conv_k: w.clone(),
            conv_q: w,
            omega: OMEGA_INIT,
            ..Self::identity(channels, OMEGA_INIT)
        }
    }

    pub fn channels(&self) -> usize {
        self.conv_k.shape()[0]
    }

    fn validate(&self, c: usize) -> Result<()> {
        let conv = [c, c, 1, 1];
        if self.conv_k.shape() != conv || self.conv_q.shape() != conv {
            return Err(Error::shape(format!("skin attention projections must be {conv:?}")));
        }
        for t in [&self.k_scale, &self.k_shift, &self.q_scale, &self.q_shift] {
            if t.shape() != [c] {
                return Err(Error::shape(format!("normalization terms must be [{c}]")));
            }
        }
        if !self.omega.is_finite() {
            return Err(Error::InvalidValue("omega must be finite".into()));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform draw in `±sqrt(6 / fan_in)`.
pub(crate) fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Channel attention parameters bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct ChannelVars {
    pub w1: Var,
    pub w2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialVars {
    pub kernel: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SkinVars {
    pub conv_k: Var,
    pub conv_q: Var,
    pub k_scale: Var,
    pub k_shift: Var,
    pub q_scale: Var,
    pub q_shift: Var,
    pub omega: Var,
}

impl ChannelAttentionParams {
    pub fn bind(&self, g: &mut Graph) -> ChannelVars {
        ChannelVars {
            w1: g.leaf(self.w1.clone()),
            w2: g.leaf(self.w2.clone()),
        }
    }
}

impl SpatialAttentionParams {
    pub fn bind(&self, g: &mut Graph) -> SpatialVars {
        SpatialVars {
            kernel: g.leaf(self.kernel.clone()),
            bias: g.leaf(Tensor::scalar(self.bias)),
        }
    }
}

impl SkinAttentionParams {
    pub fn bind(&self, g: &mut Graph) -> SkinVars {
        SkinVars {
            conv_k: g.leaf(self.conv_k.clone()),
            conv_q: g.leaf(self.conv_q.clone()),
            k_scale: g.leaf(self.k_scale.clone()),
            k_shift: g.leaf(self.k_shift.clone()),
            q_scale: g.leaf(self.q_scale.clone()),
            q_shift: g.leaf(self.q_shift.clone()),
            omega: g.leaf(Tensor::scalar(self.omega)),
        }
    }
}

fn shared_mlp(g: &mut Graph, v: Var, p: ChannelVars) -> Result<Var> {
    let hidden = g.matvec(p.w1, v)?;
    let hidden = g.relu(hidden);
    g.matvec(p.w2, hidden)
}

/// `sigmoid(MLP(avgpool F) + MLP(maxpool F)) ⊗ F`.
pub fn channel_attention_node(g: &mut Graph, x: Var, p: ChannelVars) -> Result<Var> {
    let c = g.value(x).dims3()?.0;
    if g.value(p.w1).shape().get(1) != Some(&c) {
        return Err(Error::shape(format!(
            "channel attention for {:?} applied to {c} channels",
            g.value(p.w1).shape()
        )));
    }
    let avg = g.global_avg_pool(x)?;
    let max = g.global_max_pool(x)?;
    let a = shared_mlp(g, avg, p)?;
    let m = shared_mlp(g, max, p)?;
    let logits = g.add(a, m)?;
    let weights = g.sigmoid(logits);
    g.scale_channels(x, weights)
}

/// `sigmoid(conv7x7([mean_c F; max_c F; body])) ⊗ F`.
pub fn spatial_attention_node(g: &mut Graph, x: Var, body: Var, p: SpatialVars) -> Result<Var> {
    let (_, h, w) = g.value(x).dims3()?;
    if g.value(body).shape() != [1, h, w] {
        return Err(Error::shape(format!(
            "body mask {:?} for {h}x{w} features",
            g.value(body).shape()
        )));
    }
    let avg = g.channel_mean(x)?;
    let max = g.channel_max(x)?;
    let desc = g.concat(&[avg, max, body])?;
    let logits = g.conv2d(desc, p.kernel, Some(p.bias), 1, SPATIAL_KERNEL / 2)?;
    let map = g.sigmoid(logits);
    g.scale_spatial(x, map)
}

/// `F + M_s(M_c(F) ⊗ F) ⊗ (M_c(F) ⊗ F)`.
pub fn body_attention_node(
    g: &mut Graph,
    x: Var,
    body: Var,
    channel: ChannelVars,
    spatial: SpatialVars,
) -> Result<Var> {
    let refined = channel_attention_node(g, x, channel)?;
    let refined = spatial_attention_node(g, refined, body, spatial)?;
    g.add(x, refined)
}

/// Reduced-form affinity map of the normalized projections, `[1, H, W]`.
pub fn skin_affinity_node(g: &mut Graph, k: Var, q: Var, face_hand: &BinaryMask, body: &BinaryMask) -> Result<Var> {
    let (_, h, w) = g.value(k).dims3()?;
    for m in [face_hand, body] {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape(format!(
                "mask {}x{} for {h}x{w} features",
                m.height(),
                m.width()
            )));
        }
    }
    g.skin_affinity(k, q, &face_hand.as_f64(), &body.as_f64())
}

/// Returns `(T + ω·A, A)`.
pub fn skin_attention_node(
    g: &mut Graph,
    t: Var,
    face_hand: &BinaryMask,
    body: &BinaryMask,
    p: SkinVars,
) -> Result<(Var, Var)> {
    let k = g.conv2d(t, p.conv_k, None, 1, 0)?;
    let k = g.norm(k, p.k_scale, p.k_shift)?;
    let q = g.conv2d(t, p.conv_q, None, 1, 0)?;
    let q = g.norm(q, p.q_scale, p.q_shift)?;
    let a = skin_affinity_node(g, k, q, face_hand, body)?;
    let gated = g.mul_scalar(a, p.omega)?;
    let out = g.add_spatial(t, gated)?;
    Ok((out, a))
}

pub fn channel_attention(f: &FeatureTensor, p: &ChannelAttentionParams) -> Result<FeatureTensor> {
    let mut g = Graph::new();
    let x = g.constant(f.as_tensor().clone());
    let vars = p.bind(&mut g);
    let out = channel_attention_node(&mut g, x, vars)?;
    FeatureTensor::from_tensor(g.value(out).clone())
}

fn mask_tensor(m: &BinaryMask) -> Tensor {
    Tensor::new(vec![1, m.height(), m.width()], m.as_f64()).expect("mask dims")
}

pub fn spatial_body_attention(
    f: &FeatureTensor,
    body: &BinaryMask,
    p: &SpatialAttentionParams,
) -> Result<FeatureTensor> {
    let mut g = Graph::new();
    let x = g.constant(f.as_tensor().clone());
    let b = g.constant(mask_tensor(body));
    let vars = p.bind(&mut g);
    let out = spatial_attention_node(&mut g, x, b, vars)?;
    FeatureTensor::from_tensor(g.value(out).clone())
}

pub fn body_attention_block(
    f: &FeatureTensor,
    body: &BinaryMask,
    channel: &ChannelAttentionParams,
    spatial: &SpatialAttentionParams,
) -> Result<FeatureTensor> {
    let mut g = Graph::new();
    let x = g.constant(f.as_tensor().clone());
    let b = g.constant(mask_tensor(body));
    let cv = channel.bind(&mut g);
    let sv = spatial.bind(&mut g);
    let out = body_attention_node(&mut g, x, b, cv, sv)?;
    FeatureTensor::from_tensor(g.value(out).clone())
}

pub fn skin_affinity_map(
    k: &FeatureTensor,
    q: &FeatureTensor,
    face_hand: &BinaryMask,
    body: &BinaryMask,
) -> Result<SkinProbMap> {
    if k.as_tensor().shape() != q.as_tensor().shape() {
        return Err(Error::shape("K and Q must share a shape"));
    }
    let mut g = Graph::new();
    let kv = g.constant(k.as_tensor().clone());
    let qv = g.constant(q.as_tensor().clone());
    let a = skin_affinity_node(&mut g, kv, qv, face_hand, body)?;
    SkinProbMap::new(k.height(), k.width(), g.value(a).data().to_vec())
}

pub fn skin_attention_block(
    t: &FeatureTensor,
    parts: &PartMask,
    p: &SkinAttentionParams,
) -> Result<(FeatureTensor, SkinProbMap)> {
    p.validate(t.channels())?;
    if (parts.height(), parts.width()) != (t.height(), t.width()) {
        return Err(Error::shape(format!(
            "parts {}x{} for {}x{} features",
            parts.height(),
            parts.width(),
            t.height(),
            t.width()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(t.as_tensor().clone());
    let vars = p.bind(&mut g);
    let (out, a) = skin_attention_node(&mut g, x, &derive_face_hand_mask(parts), &derive_body_mask(parts), vars)?;
    Ok((
        FeatureTensor::from_tensor(g.value(out).clone())?,
        SkinProbMap::new(t.height(), t.width(), g.value(a).data().to_vec())?,
    ))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, project};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_feature(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureTensor {
        FeatureTensor::from_tensor(random_tensor(&[c, h, w], rng)).unwrap()
    }

    fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
        BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..2)).collect()).unwrap()
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Straight-line channel attention.
    fn channel_oracle(f: &FeatureTensor, p: &ChannelAttentionParams) -> Vec<f64> {
        let (c, n) = (f.channels(), f.height() * f.width());
        let hidden = c / p.reduction;
        let d = f.data();
        let avg: Vec<f64> = (0..c)
            .map(|ch| d[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let max: Vec<f64> = (0..c)
            .map(|ch| d[ch * n..(ch + 1) * n].iter().cloned().fold(f64::MIN, f64::max))
            .collect();
        let mlp = |v: &[f64]| -> Vec<f64> {
            let h: Vec<f64> = (0..hidden)
                .map(|j| (0..c).map(|i| p.w1.data()[j * c + i] * v[i]).sum::<f64>().max(0.0))
                .collect();
            (0..c)
                .map(|i| (0..hidden).map(|j| p.w2.data()[i * hidden + j] * h[j]).sum())
                .collect()
        };
        let (ma, mm) = (mlp(&avg), mlp(&max));
        (0..c * n).map(|i| sig(ma[i / n] + mm[i / n]) * d[i]).collect()
    }

    /// Nested-loop 7x7 spatial attention with zero padding.
    fn spatial_oracle(f: &FeatureTensor, body: &BinaryMask, p: &SpatialAttentionParams) -> Vec<f64> {
        let (c, h, w) = (f.channels(), f.height(), f.width());
        let d = f.data();
        let mut desc = vec![[0.0f64; 3]; h * w];
        for i in 0..h * w {
            let vals: Vec<f64> = (0..c).map(|ch| d[ch * h * w + i]).collect();
            desc[i] = [
                vals.iter().sum::<f64>() / c as f64,
                vals.iter().cloned().fold(f64::MIN, f64::max),
                body.values()[i] as f64,
            ];
        }
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = p.bias;
                for ch in 0..3 {
                    for ky in 0..7 {
                        for kx in 0..7 {
                            let (iy, ix) = (y as isize + ky as isize - 3, x as isize + kx as isize - 3);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += p.kernel.data()[(ch * 7 + ky) * 7 + kx] * desc[iy as usize * w + ix as usize][ch];
                        }
                    }
                }
                let m = sig(acc);
                for ch in 0..c {
                    out[ch * h * w + y * w + x] = m * d[ch * h * w + y * w + x];
                }
            }
        }
        out
    }

    /// Explicit N x N energy matrix, then the face/hand column average.
    pub(crate) fn affinity_oracle(
        k: &FeatureTensor,
        q: &FeatureTensor,
        fh: &BinaryMask,
        body: &BinaryMask,
    ) -> Vec<f64> {
        let (c, n) = (k.channels(), k.height() * k.width());
        let khat: Vec<f64> = (0..c * n).map(|i| k.data()[i] * fh.values()[i % n] as f64).collect();
        let qhat: Vec<f64> = (0..c * n).map(|i| q.data()[i] * body.values()[i % n] as f64).collect();
        let mut e = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                e[i * n + j] = (0..c).map(|ch| qhat[ch * n + i] * khat[ch * n + j]).sum();
            }
        }
        let cols: Vec<usize> = (0..n).filter(|&j| fh.values()[j] == 1).collect();
        (0..n)
            .map(|i| {
                if cols.is_empty() {
                    0.0
                } else {
                    (cols.iter().map(|&j| e[i * n + j]).sum::<f64>() / cols.len() as f64).tanh()
                }
            })
            .collect()
    }

    #[test]
    fn channel_attention_zero_mlp_halves() {
        let f = random_feature(16, 3, 3, &mut rng(1));
        let p = ChannelAttentionParams::zeros(16, 16).unwrap();
        let out = channel_attention(&f, &p).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - 0.5 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_attention_constant_planes() {
        let mut r = rng(2);
        let vals: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = FeatureTensor::new(4, 2, 3, (0..24).map(|i| vals[i / 6]).collect()).unwrap();
        let p = ChannelAttentionParams::random(4, 2, &mut r).unwrap();
        let out = channel_attention(&f, &p).unwrap();
        // avg == max, so M_c = sigmoid(2 * MLP(v))
        let hidden: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|i| p.w1.data()[j * 4 + i] * vals[i]).sum::<f64>().max(0.0))
            .collect();
        for ch in 0..4 {
            let mlp: f64 = (0..2).map(|j| p.w2.data()[ch * 2 + j] * hidden[j]).sum();
            let expected = sig(2.0 * mlp) * vals[ch];
            assert!((out.data()[ch * 6] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn channel_attention_matches_direct_formula() {
        let mut r = rng(3);
        let f = random_feature(4, 2, 2, &mut r);
        let p = ChannelAttentionParams::random(4, 2, &mut r).unwrap();
        let out = channel_attention(&f, &p).unwrap();
        let oracle = channel_oracle(&f, &p);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_attention_rejects_mismatch() {
        let f = random_feature(8, 2, 2, &mut rng(4));
        let p = ChannelAttentionParams::zeros(4, 2).unwrap();
        assert!(matches!(channel_attention(&f, &p), Err(Error::ShapeMismatch(_))));
        assert!(ChannelAttentionParams::zeros(6, 4).is_err());
    }

    #[test]
    fn spatial_attention_zero_kernel_halves() {
        let mut r = rng(5);
        let f = random_feature(3, 5, 6, &mut r);
        let out = spatial_body_attention(&f, &random_mask(5, 6, &mut r), &SpatialAttentionParams::zeros()).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - 0.5 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_attention_ignores_dead_mask_channel() {
        let mut r = rng(6);
        let f = random_feature(2, 6, 6, &mut r);
        let mut p = SpatialAttentionParams::random(&mut r);
        p.kernel.data_mut()[2 * 49..].fill(0.0);
        let a = spatial_body_attention(&f, &random_mask(6, 6, &mut r), &p).unwrap();
        let b = spatial_body_attention(&f, &random_mask(6, 6, &mut r), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spatial_attention_matches_nested_loops() {
        let mut r = rng(7);
        let f = random_feature(2, 4, 4, &mut r);
        let body = random_mask(4, 4, &mut r);
        let mut p = SpatialAttentionParams::random(&mut r);
        p.bias = 0.3;
        let out = spatial_body_attention(&f, &body, &p).unwrap();
        let oracle = spatial_oracle(&f, &body, &p);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_attention_rejects_mask_size() {
        let f = random_feature(2, 4, 4, &mut rng(8));
        let err = spatial_body_attention(&f, &BinaryMask::ones(3, 4), &SpatialAttentionParams::zeros());
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn body_attention_zero_params() {
        let mut r = rng(9);
        let f = random_feature(16, 4, 4, &mut r);
        let out = body_attention_block(
            &f,
            &random_mask(4, 4, &mut r),
            &ChannelAttentionParams::zeros(16, 16).unwrap(),
            &SpatialAttentionParams::zeros(),
        )
        .unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert!((o - 1.25 * i).abs() < 1e-14);
        }
    }

    #[test]
    fn body_attention_zero_input() {
        let mut r = rng(10);
        let f = FeatureTensor::zeros(8, 4, 4);
        let out = body_attention_block(
            &f,
            &random_mask(4, 4, &mut r),
            &ChannelAttentionParams::random(8, 4, &mut r).unwrap(),
            &SpatialAttentionParams::random(&mut r),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn body_attention_is_composition_plus_residual() {
        let mut r = rng(11);
        let f = random_feature(4, 4, 4, &mut r);
        let body = random_mask(4, 4, &mut r);
        let cp = ChannelAttentionParams::random(4, 2, &mut r).unwrap();
        let sp = SpatialAttentionParams::random(&mut r);
        let out = body_attention_block(&f, &body, &cp, &sp).unwrap();
        let f1 = FeatureTensor::new(4, 4, 4, channel_oracle(&f, &cp)).unwrap();
        let f2 = spatial_oracle(&f1, &body, &sp);
        for i in 0..f.data().len() {
            assert!((out.data()[i] - (f.data()[i] + f2[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn affinity_empty_face_hand_is_zero() {
        let mut r = rng(12);
        let k = random_feature(3, 4, 4, &mut r);
        let q = random_feature(3, 4, 4, &mut r);
        let a = skin_affinity_map(&k, &q, &BinaryMask::zeros(4, 4), &BinaryMask::ones(4, 4)).unwrap();
        assert!(a.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affinity_worked_example() {
        // columns (1,0), (0,1), (1,1), (0,0); channel-major layout
        let k = FeatureTensor::new(2, 2, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let fh = BinaryMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let a = skin_affinity_map(&k, &k, &fh, &BinaryMask::ones(2, 2)).unwrap();
        let expected = [1.0f64.tanh(), 0.5f64.tanh(), 1.5f64.tanh(), 0.0];
        for (got, want) in a.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((a.values()[0] - 0.76159).abs() < 1e-5);
        assert!((a.values()[1] - 0.46212).abs() < 1e-5);
        assert!((a.values()[2] - 0.90515).abs() < 1e-5);
    }

    #[test]
    fn affinity_reduced_form_matches_energy_matrix() {
        let mut r = rng(13);
        for _ in 0..100 {
            let c = r.gen_range(1..=8);
            let s = r.gen_range(1..=8);
            let k = random_feature(c, s, s, &mut r);
            let q = random_feature(c, s, s, &mut r);
            let fh = random_mask(s, s, &mut r);
            let body = random_mask(s, s, &mut r);
            let a = skin_affinity_map(&k, &q, &fh, &body).unwrap();
            let oracle = affinity_oracle(&k, &q, &fh, &body);
            for (x, y) in a.values().iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn affinity_range_and_off_body_zero() {
        let mut r = rng(14);
        let k = random_feature(5, 6, 6, &mut r);
        let q = random_feature(5, 6, 6, &mut r);
        let fh = random_mask(6, 6, &mut r);
        let body = random_mask(6, 6, &mut r);
        let a = skin_affinity_map(&k, &q, &fh, &body).unwrap();
        for (v, b) in a.values().iter().zip(body.values()) {
            assert!(*v > -1.0 && *v < 1.0);
            if *b == 0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn affinity_scales_with_face_hand_magnitude() {
        let mut r = rng(15);
        let k = random_feature(3, 4, 4, &mut r);
        let q = random_feature(3, 4, 4, &mut r);
        let fh = random_mask(4, 4, &mut r);
        let body = BinaryMask::ones(4, 4);
        let base = skin_affinity_map(&k, &q, &fh, &body).unwrap();
        let lambda = 1.7;
        let scaled: Vec<f64> = k
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if fh.values()[i % 16] == 1 { v * lambda } else { *v })
            .collect();
        let k2 = FeatureTensor::new(3, 4, 4, scaled).unwrap();
        let out = skin_affinity_map(&k2, &q, &fh, &body).unwrap();
        for (a, b) in base.values().iter().zip(out.values()) {
            let (sa, sb) = (a.atanh(), b.atanh());
            assert!((sb - lambda * sa).abs() < 1e-9 * (1.0 + sa.abs()));
            assert!(b.abs() >= a.abs());
        }
    }

    fn parts_with_face(h: usize, w: usize, rng: &mut ChaCha8Rng) -> PartMask {
        PartMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..4)).collect()).unwrap()
    }

    #[test]
    fn skin_attention_zero_gate_is_identity() {
        let mut r = rng(16);
        let t = random_feature(4, 6, 6, &mut r);
        let mut p = SkinAttentionParams::random(4, &mut r);
        p.omega = 0.0;
        let (out, a) = skin_attention_block(&t, &parts_with_face(6, 6, &mut r), &p).unwrap();
        assert_eq!(out, t);
        assert!(a.values().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn skin_attention_without_face_hand_is_identity() {
        let mut r = rng(17);
        let t = random_feature(4, 6, 6, &mut r);
        let p = SkinAttentionParams::random(4, &mut r);
        let parts = PartMask::new(6, 6, (0..36).map(|_| r.gen_range(0..2)).collect()).unwrap();
        let (out, a) = skin_attention_block(&t, &parts, &p).unwrap();
        assert_eq!(out, t);
        assert!(a.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skin_attention_composes_with_affinity() {
        let mut r = rng(18);
        let t = random_feature(3, 4, 4, &mut r);
        let parts = parts_with_face(4, 4, &mut r);
        let p = SkinAttentionParams::identity(3, 1.3);
        let (out, a) = skin_attention_block(&t, &parts, &p).unwrap();
        // identity projection followed by standardization
        let n = 16;
        let mut normed = vec![0.0; 3 * n];
        for ch in 0..3 {
            let row = &t.data()[ch * n..(ch + 1) * n];
            let m = row.iter().sum::<f64>() / n as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            for i in 0..n {
                normed[ch * n + i] = (row[i] - m) / (v + 1e-5).sqrt();
            }
        }
        let kq = FeatureTensor::new(3, 4, 4, normed).unwrap();
        let oracle = affinity_oracle(&kq, &kq, &derive_face_hand_mask(&parts), &derive_body_mask(&parts));
        for i in 0..n {
            assert!((a.values()[i] - oracle[i]).abs() < 1e-9);
            for ch in 0..3 {
                let want = t.data()[ch * n + i] + 1.3 * oracle[i];
                assert!((out.data()[ch * n + i] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_channel_attention() {
        let mut r = rng(19);
        let x = random_tensor(&[4, 5, 5], &mut r);
        let p = ChannelAttentionParams::random(4, 2, &mut r).unwrap();
        let report = check_gradients(&[x, p.w1.clone(), p.w2.clone()], 1e-6, |g, v| {
            let out = channel_attention_node(g, v[0], ChannelVars { w1: v[1], w2: v[2] })?;
            project(g, out, 99)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn gradients_spatial_attention() {
        let mut r = rng(20);
        let x = random_tensor(&[2, 6, 6], &mut r);
        let body = mask_tensor(&random_mask(6, 6, &mut r));
        let p = SpatialAttentionParams::random(&mut r);
        let report = check_gradients(&[x, p.kernel.clone(), Tensor::scalar(0.1)], 1e-6, |g, v| {
            let b = g.constant(body.clone());
            let out = spatial_attention_node(
                g,
                v[0],
                b,
                SpatialVars {
                    kernel: v[1],
                    bias: v[2],
                },
            )?;
            project(g, out, 98)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn gradients_skin_attention() {
        let mut r = rng(21);
        let x = random_tensor(&[4, 6, 6], &mut r);
        let parts = parts_with_face(6, 6, &mut r);
        let (fh, body) = (derive_face_hand_mask(&parts), derive_body_mask(&parts));
        let p = SkinAttentionParams::random(4, &mut r);
        // keep tanh away from saturation so the check is informative
        let small = |t: &Tensor| t.map(|v| v * 0.3);
        let inputs = [
            x,
            small(&p.conv_k),
            small(&p.conv_q),
            Tensor::new(vec![4], vec![0.4, 0.3, 0.5, 0.2]).unwrap(),
            p.k_shift.clone(),
            Tensor::new(vec![4], vec![0.3, 0.6, 0.2, 0.4]).unwrap(),
            Tensor::new(vec![4], vec![0.1, -0.1, 0.05, 0.0]).unwrap(),
            Tensor::scalar(1.3),
        ];
        let report = check_gradients(&inputs, 1e-6, |g, v| {
            let vars = SkinVars {
                conv_k: v[1],
                conv_q: v[2],
                k_scale: v[3],
                k_shift: v[4],
                q_scale: v[5],
                q_shift: v[6],
                omega: v[7],
            };
            let (out, _) = skin_attention_node(g, v[0], &fh, &body, vars)?;
            project(g, out, 97)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
