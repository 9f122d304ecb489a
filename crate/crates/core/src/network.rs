//! Model assembly, forward pass and checkpoint files.
//!
//! The input is reflect-padded to a multiple of 8 and embedded by a 3x3
//! convolution. Each of three encoder levels splits its input with the Haar
//! transform: the approximation band is fused with a bilinearly reduced copy
//! of the image and refined by LFSS blocks, the three detail bands are fused
//! by SKFF and refined by HFE blocks guided by the refined approximation.
//! The decoder runs from the coarsest level up: LFSS and HFE blocks again,
//! a 1x1 expansion of the detail map to three bands, inverse transform, and
//! an additive skip from the encoder. A final 3x3 convolution produces a
//! residual added to the input.
//!
//! Parameter names follow the block structure, for example
//! `enc.l1.lfss.0.vssm.in_linear.w` or `dec.l3.hfe.0.fcfn.fmt.conv.b`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Scope, Var};
use crate::error::{Error, Result};
use crate::hfe::{hfe_block, skff};
use crate::layers::{conv, linear};
use crate::lfss::{lfss_block, LfssConfig};
use crate::real::Real;
use crate::tensor::{reflect_pad, ConvSpec, Tensor};

pub const LEVELS: usize = 3;
const MAGIC: &[u8; 4] = b"WMCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    /// LFSS blocks per level, used by both the encoder and the decoder.
    pub lfss_counts: Vec<usize>,
    /// HFE blocks per level, used by both the encoder and the decoder.
    pub hfe_counts: Vec<usize>,
    pub heads: usize,
    pub lambda: usize,
    pub state_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            lfss_counts: vec![1, 2, 4],
            hfe_counts: vec![1, 1, 1],
            heads: 8,
            lambda: 2,
            state_size: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The reduced configuration used for quick training runs.
    pub fn toy() -> Self {
        Self {
            channels: 8,
            lfss_counts: vec![1, 1, 1],
            hfe_counts: vec![1, 1, 1],
            heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.lfss_counts.len() != LEVELS || self.hfe_counts.len() != LEVELS {
            return bad(format!(
                "block counts need {LEVELS} entries, got {:?} and {:?}",
                self.lfss_counts, self.hfe_counts
            ));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            ));
        }
        self.lfss().validate()
    }

    fn lfss(&self) -> LfssConfig {
        LfssConfig {
            lambda: self.lambda,
            state_size: self.state_size,
        }
    }
}

/// Runs the network on an `[H, W, 3]` image and returns the unclamped
/// output at the input size.
pub fn forward_graph<T: Real>(
    s: &Scope<'_, '_, T>,
    cfg: &ModelConfig,
    img: &Tensor<T>,
) -> Result<Var<T>> {
    let (h, w, ch) = img.dims3("forward")?;
    if ch != 3 {
        return Err(Error::InvalidArgument {
            op: "forward",
            detail: format!("expected 3 color channels, got {ch}"),
        });
    }
    let c = cfg.channels;
    let lfss_cfg = cfg.lfss();
    let up8 = |n: usize| n.div_ceil(8) * 8;
    let padded = reflect_pad(img, up8(h) - h, up8(w) - w)?;
    let (ph, pw, _) = padded.dims3("forward")?;
    let ip = Var::constant(padded.clone());

    let f0 = conv(s, "embed", &ip, c, ConvSpec::dense(3))?;
    let mut skips = vec![f0];
    let mut highs = Vec::with_capacity(LEVELS);
    for i in 1..=LEVELS {
        let ls = s.sub(format!("enc.l{i}"));
        let bands = skips[i - 1].dwt2()?;
        let ca = bands.narrow_channels(0, c)?;
        let down = Var::constant(padded.resize_bilinear(ph >> i, pw >> i)?);
        let down = conv(&ls, "fuse_in", &down, c, ConvSpec::dense(3))?;
        let mut low = linear(&ls, "fuse", &Var::concat_channels(&[&ca, &down])?, c)?;
        for j in 0..cfg.lfss_counts[i - 1] {
            low = lfss_block(&ls.sub("lfss").sub(j), &low, &lfss_cfg)?;
        }
        let detail: Vec<Var<T>> = (1..4)
            .map(|k| bands.narrow_channels(k * c, c))
            .collect::<Result<_>>()?;
        let mut high = skff(&ls.sub("skff"), [&detail[0], &detail[1], &detail[2]])?;
        for j in 0..cfg.hfe_counts[i - 1] {
            high = hfe_block(&ls.sub("hfe").sub(j), &high, &low, cfg.heads)?;
        }
        highs.push(high);
        skips.push(low);
    }

    let mut low = skips[LEVELS].clone();
    for i in (1..=LEVELS).rev() {
        let ds = s.sub(format!("dec.l{i}"));
        for j in 0..cfg.lfss_counts[i - 1] {
            low = lfss_block(&ds.sub("lfss").sub(j), &low, &lfss_cfg)?;
        }
        let mut high = highs[i - 1].clone();
        for j in 0..cfg.hfe_counts[i - 1] {
            high = hfe_block(&ds.sub("hfe").sub(j), &high, &low, cfg.heads)?;
        }
        let high = linear(&ds, "expand", &high, 3 * c)?;
        low = Var::concat_channels(&[&low, &high])?
            .iwt2()?
            .add(&skips[i - 1])?;
    }
    let residual = conv(s, "head", &low, 3, ConvSpec::dense(3))?;
    ip.add(&residual)?.crop(h, w)
}

/// Architecture plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

fn create_params<T: Real>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let g = Graph::<T>::building(cfg.seed);
    forward_graph(&g.scope(), cfg, &Tensor::full([8, 8, 3], T::lit(0.5)))?;
    Ok(g.into_params().expect("building graph"))
}

impl Model {
    /// Seeded initialization; the same config always gives the same weights.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            config: cfg.clone(),
            params: create_params(cfg)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Zeroes the final convolution so the network returns its input.
    pub fn zero_residual(&mut self) {
        for name in ["head.w", "head.b"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Enhances an `[H, W, 3]` image with values in `[0, 1]`; the output is
    /// clamped to `[0, 1]`.
    pub fn forward(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !img.is_finite() {
            return Err(Error::NonFinite {
                op: "forward input".into(),
            });
        }
        let g = Graph::inference(&self.params);
        let out = forward_graph(&g.scope(), &self.config, img)?;
        Ok(out.value().map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            let byte_len = 4 * t.numel() as u64;
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                    byte_len,
                },
            );
            offset += byte_len;
        }
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 {
            return Err(bad(format!(
                "file is {} bytes, too short for a header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = 16u64
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| bad(format!("manifest length {mlen} exceeds the file")))?
            as usize;
        let manifest: BTreeMap<String, ManifestEntry> =
            serde_json::from_slice(&bytes[16..payload_start])
                .map_err(|e| bad(format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut params = ParamStore::new();
        for (name, e) in &manifest {
            if e.dtype != "f32" {
                return Err(bad(format!("{name}: unsupported dtype {}", e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.shape.is_empty() || numel == 0 || e.byte_len != 4 * numel as u64 {
                return Err(bad(format!(
                    "{name}: shape {:?} does not match {} bytes",
                    e.shape, e.byte_len
                )));
            }
            let end = e
                .offset
                .checked_add(e.byte_len)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| bad(format!("{name}: data runs past the end of the file")))?;
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            params.insert(name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        let config = infer_config(&params)?;
        let expected = create_params::<f32>(&config)?;
        let unknown: Vec<&String> = params.names().filter(|n| !expected.contains(n)).collect();
        if !unknown.is_empty() {
            return Err(bad(format!("unknown tensors: {unknown:?}")));
        }
        let missing: Vec<&String> = expected.names().filter(|n| !params.contains(n)).collect();
        if !missing.is_empty() {
            return Err(bad(format!("missing tensors: {missing:?}")));
        }
        for (name, t) in expected.iter() {
            let got = params.get(name).unwrap().shape();
            if got != t.shape() {
                return Err(bad(format!(
                    "{name} has shape {got:?}, expected {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Recovers the architecture from tensor names and shapes.
fn infer_config(params: &ParamStore<f32>) -> Result<ModelConfig> {
    let shape = |n: &str| -> Result<&[usize]> {
        params
            .get(n)
            .map(|t| t.shape())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensors: [\"{n}\"]")))
    };
    let mut cfg = ModelConfig {
        channels: shape("embed.w")?[0],
        ..ModelConfig::default()
    };
    let count = |level: usize, kind: &str| {
        let prefix = format!("enc.l{level}.{kind}.");
        params
            .names()
            .filter_map(|n| {
                n.strip_prefix(&prefix)?
                    .split('.')
                    .next()?
                    .parse::<usize>()
                    .ok()
            })
            .collect::<BTreeSet<_>>()
            .len()
    };
    cfg.lfss_counts = (1..=LEVELS).map(|l| count(l, "lfss")).collect();
    cfg.hfe_counts = (1..=LEVELS).map(|l| count(l, "hfe")).collect();
    if let Some(t) = params
        .iter()
        .find(|(n, _)| n.ends_with(".fmta.alpha"))
        .map(|p| p.1)
    {
        cfg.heads = t.shape()[0];
    }
    if let Some(t) = params
        .iter()
        .find(|(n, _)| n.ends_with(".scan.a_log"))
        .map(|p| p.1)
    {
        cfg.lambda = t.shape()[0] / cfg.channels.max(1);
        cfg.state_size = t.shape()[1];
    }
    cfg.validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(cfg)
}
