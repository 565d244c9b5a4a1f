//! The segmentation network.
//!
//! ```text
//! image (1/1) ── conv 3x3 s2 ───────────────► stem   (1/2) ──────────────┐
//!                 dw-sep s2 ────────────────► enc1   (1/4) ─────────┐    │
//!                 dw-sep s2 ────────────────► enc2   (1/8)          │    │
//! interaction: inverted residual branches at strides 1, 2, 4,        │    │
//!              upsampled back to 1/8 and concatenated               │    │
//! decoder:  up x2 → conv block → + proj(enc1) → body attention  (1/4)    │
//!           up x2 → conv block → + proj(stem) → skin attention  (1/2) ◄──┘
//!           up x2 → conv block → 1x1 conv → sigmoid             (1/1)
//! ```
//!
//! Every convolution block is conv → per-channel standardization → ReLU.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, hidden_size, ChannelVars, SkinVars, SpatialVars, OMEGA_INIT, SPATIAL_KERNEL};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::loss::LossConfig;
use crate::tensor::Tensor;
use crate::types::{
    derive_body_mask, derive_face_hand_mask, resize_mask, BinaryMask, ImageTensor, PartMask, SkinProbMap,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub base_filters: usize,
    pub interaction_filters: [usize; 3],
    pub expansion_factor: usize,
    pub decoder_filters: [usize; 3],
    pub reduction: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            base_filters: 32,
            interaction_filters: [64, 96, 128],
            expansion_factor: 6,
            decoder_filters: [96, 64, 32],
            reduction: 16,
            seed: 0,
        }
    }
}

/// Strides of the three interaction branches, relative to the 1/8 map.
pub const INTERACTION_STRIDES: [usize; 3] = [1, 2, 4];

impl ModelConfig {
    /// Narrow variant for CPU-scale experiments on small canvases.
    pub fn compact(input_size: usize) -> Self {
        Self {
            input_size,
            base_filters: 8,
            interaction_filters: [16, 24, 32],
            expansion_factor: 4,
            decoder_filters: [24, 16, 8],
            reduction: 4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_size < 8 || !self.input_size.is_multiple_of(8) {
            return bad(format!(
                "input_size {} must be a positive multiple of 8",
                self.input_size
            ));
        }
        if self.base_filters == 0
            || self.expansion_factor == 0
            || self.interaction_filters.contains(&0)
            || self.decoder_filters.contains(&0)
        {
            return bad("filter counts and expansion factor must be positive".into());
        }
        hidden_size(self.decoder_filters[0], self.reduction).map_err(|_| {
            Error::InvalidConfig(format!(
                "reduction {} must divide the body attention width {}",
                self.reduction, self.decoder_filters[0]
            ))
        })?;
        Ok(())
    }

    pub fn encoder_filters(&self) -> usize {
        2 * self.base_filters
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: String, t: Tensor) {
        debug_assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Build a store from `(name, tensor)` pairs, keeping their order.
    pub fn from_pairs(pairs: Vec<(String, Tensor)>) -> Self {
        let mut s = Self::new();
        for (n, t) in pairs {
            s.insert(n, t);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    pub fn omega(&self) -> f64 {
        self.store.get("skin_att.omega").map_or(f64::NAN, Tensor::item)
    }
}

/// Exact number of trainable scalars.
pub fn parameter_count(params: &ModelParams) -> usize {
    params.store.scalar_count()
}

/// Layer plan shared by initialization and forward.
struct Init<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        let w = attention::uniform(&[c_out, c_in, k, k], c_in * k * k, self.rng);
        self.store.insert(format!("{name}.w"), w);
    }

    fn depthwise(&mut self, name: &str, c: usize, k: usize) {
        let w = attention::uniform(&[c, 1, k, k], k * k, self.rng);
        self.store.insert(format!("{name}.w"), w);
    }

    fn bias(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.store.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    }

    fn conv_block(&mut self, name: &str, c_out: usize, c_in: usize) {
        self.conv(name, c_out, c_in, 3);
        self.norm(name, c_out);
    }

    fn separable(&mut self, name: &str, c_out: usize, c_in: usize) {
        self.depthwise(&format!("{name}.dw"), c_in, 3);
        self.norm(&format!("{name}.dw"), c_in);
        self.conv(&format!("{name}.pw"), c_out, c_in, 1);
        self.norm(&format!("{name}.pw"), c_out);
    }

    fn inverted_residual(&mut self, name: &str, c_out: usize, c_in: usize, expansion: usize) {
        let hidden = c_in * expansion;
        self.conv(&format!("{name}.expand"), hidden, c_in, 1);
        self.norm(&format!("{name}.expand"), hidden);
        self.depthwise(&format!("{name}.dw"), hidden, 3);
        self.norm(&format!("{name}.dw"), hidden);
        self.conv(&format!("{name}.project"), c_out, hidden, 1);
        self.norm(&format!("{name}.project"), c_out);
    }

    fn projection(&mut self, name: &str, c_out: usize, c_in: usize) {
        self.conv(name, c_out, c_in, 1);
        self.bias(name, c_out);
    }
}

/// Deterministic initialization from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = Init {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let base = cfg.base_filters;
    let enc = cfg.encoder_filters();
    let [d1, d2, d3] = cfg.decoder_filters;

    b.conv_block("stem", base, 3);
    b.separable("enc1", enc, base);
    b.separable("enc2", enc, enc);
    for (i, &f) in cfg.interaction_filters.iter().enumerate() {
        b.inverted_residual(&format!("inter{i}"), f, enc, cfg.expansion_factor);
    }
    let concat: usize = cfg.interaction_filters.iter().sum();

    b.conv_block("dec1", d1, concat);
    b.projection("skip1", d1, enc);
    let hidden = hidden_size(d1, cfg.reduction)?;
    let w1 = attention::uniform(&[hidden, d1], d1, b.rng);
    let w2 = attention::uniform(&[d1, hidden], hidden, b.rng);
    b.store.insert("body_att.mlp_w1".into(), w1);
    b.store.insert("body_att.mlp_w2".into(), w2);
    let sk = attention::uniform(
        &[1, 3, SPATIAL_KERNEL, SPATIAL_KERNEL],
        3 * SPATIAL_KERNEL * SPATIAL_KERNEL,
        b.rng,
    );
    b.store.insert("body_att.spatial.w".into(), sk);
    b.store.insert("body_att.spatial.b".into(), Tensor::zeros(&[1]));

    b.conv_block("dec2", d2, d1);
    b.projection("skip2", d2, base);
    let skin = attention::SkinAttentionParams::random(d2, b.rng);
    b.store.insert("skin_att.conv_k".into(), skin.conv_k);
    b.store.insert("skin_att.conv_q".into(), skin.conv_q);
    b.store.insert("skin_att.k_scale".into(), skin.k_scale);
    b.store.insert("skin_att.k_shift".into(), skin.k_shift);
    b.store.insert("skin_att.q_scale".into(), skin.q_scale);
    b.store.insert("skin_att.q_shift".into(), skin.q_shift);
    b.store.insert("skin_att.omega".into(), Tensor::scalar(OMEGA_INIT));

    b.conv_block("dec3", d3, d2);
    b.projection("head", 1, d3);

    Ok(ModelParams {
        config: cfg.clone(),
        store: b.store,
    })
}

/// Parameters bound into one graph.
struct Bound<'a> {
    store: &'a ParamStore,
    vars: &'a [Var],
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    fn conv_block(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = g.conv2d(x, self.get(&format!("{name}.w"))?, None, stride, 1)?;
        self.norm_relu(g, name, y)
    }

    fn norm(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        g.norm(
            x,
            self.get(&format!("{name}.gamma"))?,
            self.get(&format!("{name}.beta"))?,
        )
    }

    fn norm_relu(&self, g: &mut Graph, name: &str, x: Var) -> Result<Var> {
        let y = self.norm(g, name, x)?;
        Ok(g.relu(y))
    }

    fn separable(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let dw = format!("{name}.dw");
        let y = g.depthwise_conv2d(x, self.get(&format!("{dw}.w"))?, None, stride, 1)?;
        let y = self.norm_relu(g, &dw, y)?;
        let pw = format!("{name}.pw");
        let y = g.conv2d(y, self.get(&format!("{pw}.w"))?, None, 1, 0)?;
        self.norm_relu(g, &pw, y)
    }

    fn inverted_residual(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Result<Var> {
        let e = format!("{name}.expand");
        let y = g.conv2d(x, self.get(&format!("{e}.w"))?, None, 1, 0)?;
        let y = self.norm_relu(g, &e, y)?;
        let d = format!("{name}.dw");
        let y = g.depthwise_conv2d(y, self.get(&format!("{d}.w"))?, None, stride, 1)?;
        let y = self.norm_relu(g, &d, y)?;
        let p = format!("{name}.project");
        let y = g.conv2d(y, self.get(&format!("{p}.w"))?, None, 1, 0)?;
        let y = self.norm(g, &p, y)?;
        if stride == 1 && g.value(x).shape() == g.value(y).shape() {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }

    /// Additive skip: decoder feature plus a 1x1 projection of the encoder feature.
    fn skip(&self, g: &mut Graph, name: &str, decoder: Var, encoder: Var) -> Result<Var> {
        let p = g.conv2d(
            encoder,
            self.get(&format!("{name}.w"))?,
            Some(self.get(&format!("{name}.b"))?),
            1,
            0,
        )?;
        g.add(decoder, p)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Sigmoid output, `[1, H, W]`.
    pub prob: Var,
    /// Skin attention map at its native resolution, `[1, H/2, W/2]`.
    pub attention: Var,
    /// Spatial size at which the body attention block ran.
    pub body_attention_hw: (usize, usize),
    /// Spatial size at which the skin attention block ran.
    pub skin_attention_hw: (usize, usize),
}

fn mask_tensor(m: &BinaryMask) -> Tensor {
    Tensor::new(vec![1, m.height(), m.width()], m.as_f64()).expect("mask dims")
}

/// Record a forward pass into `g`. Returns the bound parameter vars (aligned
/// with the store) and the output handles.
pub fn forward_graph(
    g: &mut Graph,
    params: &ModelParams,
    img: &ImageTensor,
    parts: &PartMask,
    trainable: bool,
) -> Result<(Vec<Var>, ForwardVars)> {
    let vars: Vec<Var> = params
        .store
        .tensors
        .iter()
        .map(|t| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let out = forward_with_vars(g, params, &vars, img, parts)?;
    Ok((vars, out))
}

/// Forward pass over parameter vars already present in `g`, one per store
/// entry in store order. Only the config and layout of `params` are read.
pub fn forward_with_vars(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[Var],
    img: &ImageTensor,
    parts: &PartMask,
) -> Result<ForwardVars> {
    if vars.len() != params.store.len() {
        return Err(Error::shape(format!(
            "{} vars for {} parameters",
            vars.len(),
            params.store.len()
        )));
    }
    let cfg = &params.config;
    let (h, w) = (img.height(), img.width());
    if (h, w) != (cfg.input_size, cfg.input_size) {
        return Err(Error::shape(format!(
            "model expects {0}x{0} input, got {h}x{w}",
            cfg.input_size
        )));
    }
    if (parts.height(), parts.width()) != (h, w) {
        return Err(Error::shape(format!(
            "part mask {}x{} for {h}x{w} image",
            parts.height(),
            parts.width()
        )));
    }
    let p = Bound {
        store: &params.store,
        vars,
    };

    let x = g.constant(img.to_chw());
    let stem = p.conv_block(g, "stem", x, 2)?;
    let enc1 = p.separable(g, "enc1", stem, 2)?;
    let enc2 = p.separable(g, "enc2", enc1, 2)?;
    let (_, h8, w8) = g.value(enc2).dims3()?;

    let mut branches = Vec::with_capacity(3);
    for (i, &stride) in INTERACTION_STRIDES.iter().enumerate() {
        let y = p.inverted_residual(g, &format!("inter{i}"), enc2, stride)?;
        let y = if g.value(y).shape()[1..] == [h8, w8] {
            y
        } else {
            g.resize(y, h8, w8)?
        };
        branches.push(y);
    }
    let inter = g.concat(&branches)?;

    // 1/4: body attention
    let (h4, w4) = (h / 4, w / 4);
    let u1 = g.resize(inter, h4, w4)?;
    let d1 = p.conv_block(g, "dec1", u1, 1)?;
    let d1 = p.skip(g, "skip1", d1, enc1)?;
    let body4 = resize_mask(&derive_body_mask(parts), h4, w4)?;
    let body4 = g.constant(mask_tensor(&body4));
    let d1 = attention::body_attention_node(
        g,
        d1,
        body4,
        ChannelVars {
            w1: p.get("body_att.mlp_w1")?,
            w2: p.get("body_att.mlp_w2")?,
        },
        SpatialVars {
            kernel: p.get("body_att.spatial.w")?,
            bias: p.get("body_att.spatial.b")?,
        },
    )?;

    // 1/2: skin attention
    let (h2, w2) = (h / 2, w / 2);
    let u2 = g.resize(d1, h2, w2)?;
    let d2 = p.conv_block(g, "dec2", u2, 1)?;
    let d2 = p.skip(g, "skip2", d2, stem)?;
    let parts2 = parts.resized(h2, w2)?;
    let (d2, attention_map) = attention::skin_attention_node(
        g,
        d2,
        &derive_face_hand_mask(&parts2),
        &derive_body_mask(&parts2),
        SkinVars {
            conv_k: p.get("skin_att.conv_k")?,
            conv_q: p.get("skin_att.conv_q")?,
            k_scale: p.get("skin_att.k_scale")?,
            k_shift: p.get("skin_att.k_shift")?,
            q_scale: p.get("skin_att.q_scale")?,
            q_shift: p.get("skin_att.q_shift")?,
            omega: p.get("skin_att.omega")?,
        },
    )?;

    // 1/1: head
    let u3 = g.resize(d2, h, w)?;
    let d3 = p.conv_block(g, "dec3", u3, 1)?;
    let logits = g.conv2d(d3, p.get("head.w")?, Some(p.get("head.b")?), 1, 0)?;
    let prob = g.sigmoid(logits);

    Ok(ForwardVars {
        prob,
        attention: attention_map,
        body_attention_hw: (h4, w4),
        skin_attention_hw: (h2, w2),
    })
}

/// Inference result of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Sigmoid skin probability, `[0, 1]`, input resolution.
    pub prob: SkinProbMap,
    /// Skin attention map (before the ω gate) upsampled to input resolution
    /// with [`upsample_within`] over the body; `(-1, 1)`.
    pub attention: SkinProbMap,
}

pub fn forward(params: &ModelParams, img: &ImageTensor, parts: &PartMask) -> Result<Prediction> {
    let mut g = Graph::new();
    let (_, out) = forward_graph(&mut g, params, img, parts, false)?;
    let (h, w) = (img.height(), img.width());
    let (h2, w2) = out.skin_attention_hw;
    let body2 = derive_body_mask(&parts.resized(h2, w2)?);
    let up = upsample_within(g.value(out.attention).data(), &body2, h, w);
    if !g.value(out.prob).all_finite() || up.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite network output".into()));
    }
    Ok(Prediction {
        prob: SkinProbMap::new(h, w, g.value(out.prob).data().to_vec())?,
        attention: SkinProbMap::new(h, w, up)?,
    })
}

/// Bilinear upsampling of a map that is zero outside `support`, normalized
/// by the upsampled support so border values are not pulled toward zero.
/// Pixels with no support in their footprint are 0.
pub fn upsample_within(map: &[f64], support: &BinaryMask, out_h: usize, out_w: usize) -> Vec<f64> {
    let src = (support.height(), support.width());
    let num = kernels::resize_forward(map, 1, src, (out_h, out_w));
    let den = kernels::resize_forward(&support.as_f64(), 1, src, (out_h, out_w));
    num.iter()
        .zip(&den)
        .map(|(&n, &d)| if d > 1e-12 { n / d } else { 0.0 })
        .collect()
}

/// Attach the training objective to a recorded forward pass.
pub fn loss_node(g: &mut Graph, prob: Var, label: &BinaryMask, cfg: &LossConfig) -> Result<Var> {
    let target = label.as_f64();
    let dice = g.dice_loss(prob, &target, cfg.dice_smooth)?;
    let focal = g.focal_loss(prob, &target, cfg.focal_gamma, cfg.focal_alpha)?;
    g.weighted_sum(&[(dice, cfg.dice_weight), (focal, cfg.focal_weight)])
}

/// Loss of one example and the gradient for every parameter (store order).
pub fn loss_and_grads(
    params: &ModelParams,
    img: &ImageTensor,
    parts: &PartMask,
    label: &BinaryMask,
    cfg: &LossConfig,
) -> Result<(f64, Vec<Tensor>)> {
    if (label.height(), label.width()) != (img.height(), img.width()) {
        return Err(Error::shape("label and image sizes differ"));
    }
    let mut g = Graph::new();
    let (vars, out) = forward_graph(&mut g, params, img, parts, true)?;
    let loss = loss_node(&mut g, out.prob, label, cfg)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NumericFailure(format!("loss is {value}")));
    }
    let mut grads = g.backward(loss);
    let out = vars
        .iter()
        .zip(&params.store.tensors)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, out))
}
