//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly: values are computed when a
//! node is added, and [`Graph::backward`] replays the tape in reverse. Nodes
//! that do not depend on any gradient-carrying leaf are never differentiated.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        depthwise: bool,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        s: Var,
    },
    ScaleSpatial {
        x: Var,
        m: Var,
    },
    AddSpatial {
        x: Var,
        m: Var,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    MatVec {
        w: Var,
        v: Var,
    },
    Resize {
        x: Var,
        from: (usize, usize),
    },
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    SkinAffinity {
        k: Var,
        q: Var,
        face_hand: Vec<f64>,
        body: Vec<f64>,
        mean_fh: Vec<f64>,
        n_fh: usize,
    },
    Dice {
        pred: Var,
        grad: Vec<f64>,
    },
    Focal {
        pred: Var,
        grad: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    DotConst {
        x: Var,
        w: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).dims3()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = self.dims(x)?;
        let ws = self.value(w).shape().to_vec();
        let (c_out, k) = match ws.as_slice() {
            &[co, ci, k1, k2] if ci == c_in && k1 == k2 => (co, k1),
            _ => return Err(Error::shape(format!("conv weight {ws:?} for {c_in} input channels"))),
        };
        self.conv_common(x, w, b, c_in, h, wd, c_out, k, stride, pad, false)
    }

    /// Depthwise convolution; weight shape `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.dims(x)?;
        let ws = self.value(w).shape().to_vec();
        let k = match ws.as_slice() {
            &[co, 1, k1, k2] if co == c && k1 == k2 => k1,
            _ => return Err(Error::shape(format!("depthwise weight {ws:?} for {c} channels"))),
        };
        self.conv_common(x, w, b, c, h, wd, c, k, stride, pad, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_common(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        c_in: usize,
        h: usize,
        wd: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<Var> {
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(format!("conv bias must be [{c_out}]")));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let out = if depthwise {
            kernels::depthwise_forward(xv, wv, bv, &geom)
        } else {
            kernels::conv2d_forward(xv, wv, bv, &geom)
        };
        let value = Tensor::new(vec![c_out, geom.h_out(), geom.w_out()], out)?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                depthwise,
            },
            needs,
        ))
    }

    /// Per-channel spatial standardization with learnable scale and shift.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!("norm parameters must be [{c}]")));
        }
        let (out, xhat, inv_std) = kernels::norm_forward(
            self.value(x).data(),
            c,
            h * w,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        let n = self.needs(x);
        self.push(v, Op::Relu(x), n)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let n = self.needs(x);
        self.push(v, Op::Sigmoid(x), n)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let n = self.needs(x);
        self.push(v, Op::Tanh(x), n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let n = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), n))
    }

    /// `x[c, :, :] * s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        if self.value(s).shape() != [c] {
            return Err(Error::shape(format!("channel scale must be [{c}]")));
        }
        let n = h * w;
        let sv = self.value(s).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / n])
            .collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::ScaleChannels { x, s }, needs))
    }

    /// `x[c, i, j] * m[0, i, j]`.
    pub fn scale_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        if self.value(m).shape() != [1, h, w] {
            return Err(Error::shape(format!(
                "spatial map {:?} for {h}x{w}",
                self.value(m).shape()
            )));
        }
        let n = h * w;
        let mv = self.value(m).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * mv[i % n])
            .collect();
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::ScaleSpatial { x, m }, needs))
    }

    /// `x[c, i, j] + m[0, i, j]`.
    pub fn add_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        if self.value(m).shape() != [1, h, w] {
            return Err(Error::shape(format!(
                "spatial map {:?} for {h}x{w}",
                self.value(m).shape()
            )));
        }
        let n = h * w;
        let mv = self.value(m).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                // A zero addend leaves the bits of `v` untouched (including -0.0).
                let a = mv[i % n];
                if a == 0.0 {
                    v
                } else {
                    v + a
                }
            })
            .collect();
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::AddSpatial { x, m }, needs))
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scalar factor must hold one value"));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|v| v * sv);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(v, Op::MulScalar { x, s }, needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        let n = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|ch| ch.iter().sum::<f64>() / n as f64)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c], data)?, Op::GlobalAvgPool(x), needs))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        let n = h * w;
        let mut data = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for (ci, ch) in self.value(x).data().chunks(n).enumerate() {
            let (idx, best) = ch.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
            data.push(best);
            argmax.push(ci * n + idx);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c], data)?, Op::GlobalMaxPool { x, argmax }, needs))
    }

    /// Mean across channels, `[C,H,W] -> [1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        let n = h * w;
        let xv = self.value(x).data();
        let mut data = vec![0.0; n];
        for ch in xv.chunks(n) {
            for (d, v) in data.iter_mut().zip(ch) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= c as f64);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![1, h, w], data)?, Op::ChannelMean(x), needs))
    }

    /// Max across channels, `[C,H,W] -> [1,H,W]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.dims(x)?;
        let n = h * w;
        let xv = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0; n];
        for (ci, ch) in xv.chunks(n).enumerate() {
            for i in 0..n {
                if ch[i] > data[i] {
                    data[i] = ch[i];
                    argmax[i] = ci * n + i;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![1, h, w], data)?, Op::ChannelMax { x, argmax }, needs))
    }

    /// Concatenate rank-3 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let (_, h, w) = self.dims(*first)?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.dims(p)?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(format!("concat {ph}x{pw} with {h}x{w}")));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![c_total, h, w], data)?,
            Op::Concat(parts.to_vec()),
            needs,
        ))
    }

    /// `w [out, in] · v [in]`.
    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var> {
        let (o, i) = match self.value(w).shape() {
            &[o, i] => (o, i),
            s => return Err(Error::shape(format!("matrix expected, got {s:?}"))),
        };
        if self.value(v).shape() != [i] {
            return Err(Error::shape(format!(
                "matvec [{o}, {i}] with {:?}",
                self.value(v).shape()
            )));
        }
        let wv = self.value(w).data();
        let vv = self.value(v).data();
        let data: Vec<f64> = wv
            .chunks(i)
            .map(|row| row.iter().zip(vv).map(|(a, b)| a * b).sum())
            .collect();
        let needs = self.needs(w) || self.needs(v);
        Ok(self.push(Tensor::new(vec![o], data)?, Op::MatVec { w, v }, needs))
    }

    /// Bilinear resampling (half-pixel centres) to `out_h x out_w`.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize target must be non-empty"));
        }
        let data = kernels::resize_forward(self.value(x).data(), c, (h, w), (out_h, out_w));
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, out_h, out_w], data)?,
            Op::Resize { x, from: (h, w) },
            needs,
        ))
    }

    /// Multiply by a fixed `{0,1}` (or any constant) spatial mask.
    pub fn mask_mul(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let (c, h, w) = self.dims(x)?;
        if mask.len() != h * w {
            return Err(Error::shape(format!("mask of {} for {h}x{w}", mask.len())));
        }
        let n = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * mask[i % n])
            .collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, h, w], data)?,
            Op::MaskMul { x, mask: mask.to_vec() },
            needs,
        ))
    }

    /// Reduced-form skin affinity: `A = tanh(Q̂ᵀ m)` where `m` is the mean
    /// face/hand column of the masked `K`. Output `[1, H, W]`.
    pub fn skin_affinity(&mut self, k: Var, q: Var, face_hand: &[f64], body: &[f64]) -> Result<Var> {
        let (c, h, w) = self.dims(k)?;
        if self.value(q).shape() != [c, h, w] {
            return Err(Error::shape("K and Q must share a shape"));
        }
        let n = h * w;
        if face_hand.len() != n || body.len() != n {
            return Err(Error::shape(format!("masks must be {h}x{w}")));
        }
        let n_fh = face_hand.iter().filter(|&&m| m != 0.0).count();
        let kv = self.value(k).data();
        let qv = self.value(q).data();
        let mut mean_fh = vec![0.0; c];
        if n_fh > 0 {
            for ch in 0..c {
                let row = &kv[ch * n..(ch + 1) * n];
                mean_fh[ch] = row.iter().zip(face_hand).map(|(a, m)| a * m).sum::<f64>() / n_fh as f64;
            }
        }
        let mut a = vec![0.0; n];
        if n_fh > 0 {
            for (ch, &m) in mean_fh.iter().enumerate() {
                let row = &qv[ch * n..(ch + 1) * n];
                for i in 0..n {
                    a[i] += row[i] * body[i] * m;
                }
            }
            a.iter_mut().for_each(|s| *s = s.tanh());
        }
        let needs = self.needs(k) || self.needs(q);
        Ok(self.push(
            Tensor::new(vec![1, h, w], a)?,
            Op::SkinAffinity {
                k,
                q,
                face_hand: face_hand.to_vec(),
                body: body.to_vec(),
                mean_fh,
                n_fh,
            },
            needs,
        ))
    }

    /// Soft Dice loss of a `[1,H,W]` prediction against a fixed target.
    pub fn dice_loss(&mut self, pred: Var, target: &[f64], smooth: f64) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::shape("dice prediction and target differ in size"));
        }
        let (loss, grad) = crate::loss::dice_with_grad(p, target, smooth);
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Dice { pred, grad }, needs))
    }

    /// Mean binary focal loss of a `[1,H,W]` prediction against a fixed target.
    pub fn focal_loss(&mut self, pred: Var, target: &[f64], gamma: f64, alpha: f64) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::shape("focal prediction and target differ in size"));
        }
        let (loss, grad) = crate::loss::focal_with_grad(p, target, gamma, alpha);
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Focal { pred, grad }, needs))
    }

    /// `Σ w_i · x_i` over single-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, wt) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum takes scalars"));
            }
            total += wt * self.value(v).item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs))
    }

    /// `Σ x_i w_i` against fixed weights, as a scalar.
    pub fn dot_const(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let xv = self.value(x).data();
        if xv.len() != w.len() {
            return Err(Error::shape(format!("dot of {} with {} weights", xv.len(), w.len())));
        }
        let v = xv.iter().zip(w).map(|(a, b)| a * b).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(v), Op::DotConst { x, w: w.to_vec() }, needs))
    }

    /// Reverse pass from a single-element output, seeded with 1.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.value(out).shape().to_vec();
        grads[out.0] = Some(Tensor::full(&seed_shape, 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        let shape = self.value(v).shape();
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                geom,
                depthwise,
            } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if *depthwise {
                    let (dx, dw, db) = kernels::depthwise_backward(xv, wv, d, geom, self.needs(*x));
                    if let Some(dx) = dx {
                        self.accum(grads, *x, dx);
                    }
                    self.accum(grads, *w, dw);
                    if let Some(b) = b {
                        self.accum(grads, *b, db);
                    }
                } else {
                    let (dx, dw, db) = kernels::conv2d_backward(xv, wv, d, geom, self.needs(*x), self.needs(*w));
                    if let Some(dx) = dx {
                        self.accum(grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        self.accum(grads, *w, dw);
                    }
                    if let Some(b) = b {
                        self.accum(grads, *b, db);
                    }
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let (dx, dg, db) = kernels::norm_backward(d, xhat, inv_std, self.value(*gamma).data(), c, h * w);
                self.accum(grads, *x, dx);
                self.accum(grads, *gamma, dg);
                self.accum(grads, *beta, db);
            }
            Op::Relu(x) => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accum(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                self.accum(grads, *x, g);
            }
            Op::Tanh(x) => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(&t, &g)| g * (1.0 - t * t))
                    .collect();
                self.accum(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, d.to_vec());
                self.accum(grads, *b, d.to_vec());
            }
            Op::ScaleChannels { x, s } => {
                let (c, h, w) = self.value(*x).dims3().expect("rank 3");
                let n = h * w;
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if self.needs(*x) {
                    self.accum(grads, *x, d.iter().enumerate().map(|(i, g)| g * sv[i / n]).collect());
                }
                if self.needs(*s) {
                    let ds = (0..c)
                        .map(|ch| (ch * n..(ch + 1) * n).map(|i| d[i] * xv[i]).sum())
                        .collect();
                    self.accum(grads, *s, ds);
                }
            }
            Op::ScaleSpatial { x, m } => {
                let n = self.value(*m).len();
                let xv = self.value(*x).data();
                let mv = self.value(*m).data();
                if self.needs(*x) {
                    self.accum(grads, *x, d.iter().enumerate().map(|(i, g)| g * mv[i % n]).collect());
                }
                if self.needs(*m) {
                    let mut dm = vec![0.0; n];
                    for (i, (g, xv)) in d.iter().zip(xv).enumerate() {
                        dm[i % n] += g * xv;
                    }
                    self.accum(grads, *m, dm);
                }
            }
            Op::AddSpatial { x, m } => {
                let n = self.value(*m).len();
                self.accum(grads, *x, d.to_vec());
                if self.needs(*m) {
                    let mut dm = vec![0.0; n];
                    for (i, g) in d.iter().enumerate() {
                        dm[i % n] += g;
                    }
                    self.accum(grads, *m, dm);
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.needs(*x) {
                    self.accum(grads, *x, d.iter().map(|g| g * sv).collect());
                }
                if self.needs(*s) {
                    let ds = d.iter().zip(self.value(*x).data()).map(|(g, v)| g * v).sum();
                    self.accum(grads, *s, vec![ds]);
                }
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x);
                let n = xs.len() / d.len();
                let g = (0..xs.len()).map(|i| d[i / n] / n as f64).collect();
                self.accum(grads, *x, g);
            }
            Op::GlobalMaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
                let mut g = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += d[o];
                }
                self.accum(grads, *x, g);
            }
            Op::ChannelMean(x) => {
                let xs = self.value(*x);
                let n = d.len();
                let c = xs.len() / n;
                let g = (0..xs.len()).map(|i| d[i % n] / c as f64).collect();
                self.accum(grads, *x, g);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accum(grads, p, d[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::MatVec { w, v } => {
                let wv = self.value(*w).data();
                let vv = self.value(*v).data();
                let i = vv.len();
                if self.needs(*w) {
                    let mut dw = vec![0.0; wv.len()];
                    for (o, g) in d.iter().enumerate() {
                        for j in 0..i {
                            dw[o * i + j] = g * vv[j];
                        }
                    }
                    self.accum(grads, *w, dw);
                }
                if self.needs(*v) {
                    let mut dv = vec![0.0; i];
                    for (o, g) in d.iter().enumerate() {
                        for j in 0..i {
                            dv[j] += g * wv[o * i + j];
                        }
                    }
                    self.accum(grads, *v, dv);
                }
            }
            Op::Resize { x, from } => {
                let (c, oh, ow) = node.value.dims3().expect("rank 3");
                self.accum(grads, *x, kernels::resize_backward(d, c, *from, (oh, ow)));
            }
            Op::MaskMul { x, mask } => {
                let n = mask.len();
                self.accum(grads, *x, d.iter().enumerate().map(|(i, g)| g * mask[i % n]).collect());
            }
            Op::SkinAffinity {
                k,
                q,
                face_hand,
                body,
                mean_fh,
                n_fh,
            } => {
                if *n_fh == 0 {
                    return;
                }
                let n = body.len();
                let c = mean_fh.len();
                // dS = dA (1 - A^2), zero off-body since S is identically 0 there.
                let ds: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(d)
                    .zip(body)
                    .map(|((a, g), b)| g * (1.0 - a * a) * b)
                    .collect();
                if self.needs(*q) {
                    let mut dq = vec![0.0; c * n];
                    for ch in 0..c {
                        for i in 0..n {
                            dq[ch * n + i] = ds[i] * mean_fh[ch];
                        }
                    }
                    self.accum(grads, *q, dq);
                }
                if self.needs(*k) {
                    let qv = self.value(*q).data();
                    let mut dk = vec![0.0; c * n];
                    for ch in 0..c {
                        let dm: f64 = (0..n).map(|i| ds[i] * qv[ch * n + i]).sum::<f64>() / *n_fh as f64;
                        for j in 0..n {
                            dk[ch * n + j] = dm * face_hand[j];
                        }
                    }
                    self.accum(grads, *k, dk);
                }
            }
            Op::Dice { pred, grad } | Op::Focal { pred, grad } => {
                let s = d[0];
                self.accum(grads, *pred, grad.iter().map(|g| g * s).collect());
            }
            Op::DotConst { x, w } => {
                self.accum(grads, *x, w.iter().map(|v| v * d[0]).collect());
            }
            Op::WeightedSum(terms) => {
                for &(v, wt) in terms {
                    self.accum(grads, v, vec![d[0] * wt]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let s = g.mul_scalar(b, a).unwrap();
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }

    #[test]
    fn gradients_accumulate_over_fan_out() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, -2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let s = g.global_avg_pool(y).unwrap();
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3, 4]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch(_))));
        let w = g.leaf(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(g.conv2d(a, w, None, 1, 1).is_err());
    }
}
