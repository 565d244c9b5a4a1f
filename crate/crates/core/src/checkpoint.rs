//! Binary checkpoint format.
//!
//! ```text
//! SKINSEG-CKPT-1
//! config 7
//! input_size = 256
//! ...                       (one `key = value` line per config field)
//! params <n>
//! <name> <d0>x<d1>x...      (n lines, store order)
//! data <scalars>
//! <scalars * 8 bytes of little-endian f64>
//! ```
//!
//! The parameter list must match the layout that `build_model` produces for
//! the stored config.

use std::path::Path;

use crate::codec;
use crate::error::{Error, Result};
use crate::network::{build_model, ModelConfig, ModelParams, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &str = "SKINSEG-CKPT-1";
const CONFIG_KEYS: usize = 7;
const MAX_SCALARS: usize = 1 << 28;

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut head = format!("{MAGIC}\nconfig {CONFIG_KEYS}\n");
    head += &format!("input_size = {}\n", c.input_size);
    head += &format!("base_filters = {}\n", c.base_filters);
    head += &format!("interaction_filters = {}\n", join(&c.interaction_filters));
    head += &format!("expansion_factor = {}\n", c.expansion_factor);
    head += &format!("decoder_filters = {}\n", join(&c.decoder_filters));
    head += &format!("reduction = {}\n", c.reduction);
    head += &format!("seed = {}\n", c.seed);
    head += &format!("params {}\n", params.store.len());
    for (name, t) in params.store.names().iter().zip(params.store.tensors()) {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head += &format!("{name} {}\n", dims.join("x"));
    }
    head += &format!("data {}\n", params.store.scalar_count());
    let mut out = head.into_bytes();
    for t in params.store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .take(4096)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }

    fn counted(&mut self, key: &str) -> Result<usize> {
        let l = self.line()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("expected `{key} <count>`, found `{l}`")))
    }
}

fn parse_list<const N: usize>(v: &str) -> Option<[usize; N]> {
    let items: Vec<usize> = v.split(',').map(|s| s.trim().parse().ok()).collect::<Option<_>>()?;
    items.try_into().ok()
}

fn parse_config(r: &mut Reader) -> Result<ModelConfig> {
    if r.counted("config")? != CONFIG_KEYS {
        return Err(Error::Checkpoint(format!("config block must have {CONFIG_KEYS} keys")));
    }
    let mut c = ModelConfig::default();
    let mut seen = [false; CONFIG_KEYS];
    for _ in 0..CONFIG_KEYS {
        let l = r.line()?;
        let (k, v) = l
            .split_once(" = ")
            .ok_or_else(|| Error::Checkpoint(format!("bad config line `{l}`")))?;
        let bad = || Error::Checkpoint(format!("bad value for `{k}`: `{v}`"));
        let slot = match k {
            "input_size" => {
                c.input_size = v.parse().map_err(|_| bad())?;
                0
            }
            "base_filters" => {
                c.base_filters = v.parse().map_err(|_| bad())?;
                1
            }
            "interaction_filters" => {
                c.interaction_filters = parse_list(v).ok_or_else(bad)?;
                2
            }
            "expansion_factor" => {
                c.expansion_factor = v.parse().map_err(|_| bad())?;
                3
            }
            "decoder_filters" => {
                c.decoder_filters = parse_list(v).ok_or_else(bad)?;
                4
            }
            "reduction" => {
                c.reduction = v.parse().map_err(|_| bad())?;
                5
            }
            "seed" => {
                c.seed = v.parse().map_err(|_| bad())?;
                6
            }
            _ => return Err(Error::Checkpoint(format!("unknown config key `{k}`"))),
        };
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Checkpoint(format!("duplicate config key `{k}`")));
        }
    }
    c.validate()
        .map_err(|e| Error::Checkpoint(format!("stored config rejected: {e}")))?;
    Ok(c)
}

/// Inverse of [`encode`]. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.line()? != MAGIC {
        return Err(Error::Checkpoint(format!("missing `{MAGIC}` header")));
    }
    let config = parse_config(&mut r)?;
    let n = r.counted("params")?;
    let mut layout: Vec<(String, Vec<usize>)> = Vec::new();
    let mut total = 0usize;
    for _ in 0..n.min(4096) {
        let l = r.line()?;
        let (name, dims) = l
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("bad parameter line `{l}`")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().ok())
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Checkpoint(format!("bad shape `{dims}` for `{name}`")))?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l <= MAX_SCALARS)
            .ok_or_else(|| Error::Checkpoint(format!("shape of `{name}` too large")))?;
        total = total.saturating_add(len);
        layout.push((name.to_string(), shape));
    }
    if layout.len() != n {
        return Err(Error::Checkpoint(format!("too many parameters: {n}")));
    }
    let declared = r.counted("data")?;
    if declared != total {
        return Err(Error::Checkpoint(format!(
            "data holds {declared} scalars; shapes need {total}"
        )));
    }

    // The stored layout must agree with the architecture of the stored config.
    let reference = build_model(&config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let expected: Vec<(&String, &[usize])> = reference
        .store
        .names()
        .iter()
        .zip(reference.store.tensors().iter().map(Tensor::shape))
        .collect();
    if expected.len() != layout.len()
        || expected
            .iter()
            .zip(&layout)
            .any(|((en, es), (n, s))| *en != n || *es != s.as_slice())
    {
        return Err(Error::Checkpoint(
            "parameter layout does not match the stored config".into(),
        ));
    }

    let payload = &bytes[r.pos..];
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes; expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut chunks = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut pairs = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let len = shape.iter().product();
        let data: Vec<f64> = chunks.by_ref().take(len).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite value in `{name}`")));
        }
        pairs.push((name, Tensor::new(shape, data)?));
    }
    Ok(ModelParams {
        config,
        store: ParamStore::from_pairs(pairs),
    })
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    codec::write(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    decode(&codec::read(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
