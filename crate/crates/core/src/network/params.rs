//! Flat parameter storage, seeded initialization and the binary file format.
//!
//! All tensors live in one `Vec<f64>` in declaration order; the layout maps
//! each layer onto its slice. The file format is
//!
//! ```text
//! magic      8 bytes  "HDRFPARM"
//! version    u32 LE   (1)
//! config     5 × u32 LE  in_channels, feat_channels, window, heads, mlp_ratio
//! seed       u64 LE
//! count      u64 LE   number of scalars that follow
//! values     count × f64 LE, declaration order
//! ```

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{NetworkConfig, ENCODER_DILATIONS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HDRFPARM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-normal, `std = sqrt(2 / fan_in)`.
    Weight { fan_in: usize },
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvSlot {
    pub weight: (usize, usize),
    pub bias: (usize, usize),
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearSlot {
    pub weight: (usize, usize),
    pub bias: (usize, usize),
    pub din: usize,
    pub dout: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormSlot {
    pub scale: (usize, usize),
    pub shift: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SwinSlot {
    pub norm1: NormSlot,
    pub qkv: LinearSlot,
    pub proj: LinearSlot,
    pub norm2: NormSlot,
    pub fc1: LinearSlot,
    pub fc2: LinearSlot,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub encoder: [ConvSlot; 3],
    pub query: LinearSlot,
    pub key: LinearSlot,
    pub value: LinearSlot,
    pub blocks: [SwinSlot; 3],
    pub fusion: ConvSlot,
    pub head: ConvSlot,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> (usize, usize) {
        let len: usize = shape.iter().product();
        let offset = self.total;
        self.tensors.push(TensorInfo { name, shape, offset, init });
        self.total += len;
        (offset, len)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, dilation: usize) -> ConvSlot {
        let weight = self.push(format!("{name}.weight"), vec![cout, cin, 3, 3], Init::Weight { fan_in: cin * 9 });
        let bias = self.push(format!("{name}.bias"), vec![cout], Init::Zero);
        ConvSlot {
            weight,
            bias,
            cin,
            cout,
            dilation,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearSlot {
        let weight = self.push(format!("{name}.weight"), vec![dout, din], Init::Weight { fan_in: din });
        let bias = self.push(format!("{name}.bias"), vec![dout], Init::Zero);
        LinearSlot { weight, bias, din, dout }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormSlot {
        let scale = self.push(format!("{name}.scale"), vec![dim], Init::One);
        let shift = self.push(format!("{name}.shift"), vec![dim], Init::Zero);
        NormSlot { scale, shift }
    }
}

impl Layout {
    pub fn new(cfg: &NetworkConfig) -> Layout {
        let c = cfg.feat_channels;
        let d = cfg.decoder_channels();
        let hidden = cfg.mlp_ratio * d;
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let encoder = [
            b.conv("encoder.0", cfg.in_channels, c, ENCODER_DILATIONS[0]),
            b.conv("encoder.1", c, c, ENCODER_DILATIONS[1]),
            b.conv("encoder.2", c, c, ENCODER_DILATIONS[2]),
        ];
        let query = b.linear("ccam.query", c, c);
        let key = b.linear("ccam.key", c, c);
        let value = b.linear("ccam.value", c, c);
        let mut block = |i: usize| SwinSlot {
            norm1: b.norm(&format!("decoder.block{i}.norm1"), d),
            qkv: b.linear(&format!("decoder.block{i}.attn.qkv"), d, 3 * d),
            proj: b.linear(&format!("decoder.block{i}.attn.proj"), d, d),
            norm2: b.norm(&format!("decoder.block{i}.norm2"), d),
            fc1: b.linear(&format!("decoder.block{i}.mlp.fc1"), d, hidden),
            fc2: b.linear(&format!("decoder.block{i}.mlp.fc2"), hidden, d),
        };
        let blocks = [block(0), block(1), block(2)];
        let fusion = b.conv("decoder.fusion", cfg.fusion_in_channels(), c, 1);
        let head = b.conv("head", c, 3, 1);
        Layout {
            encoder,
            query,
            key,
            value,
            blocks,
            fusion,
            head,
            tensors: b.tensors,
            total: b.total,
        }
    }
}

/// Closed-form scalar count for a configuration.
pub fn expected_param_count(cfg: &NetworkConfig) -> usize {
    let c = cfg.feat_channels;
    let d = cfg.decoder_channels();
    let h = cfg.mlp_ratio * d;
    let conv = |cin: usize, cout: usize| cin * cout * 9 + cout;
    let lin = |din: usize, dout: usize| din * dout + dout;
    let block = 2 * 2 * d + lin(d, 3 * d) + lin(d, d) + lin(d, h) + lin(h, d);
    conv(cfg.in_channels, c) + 2 * conv(c, c) + 3 * lin(c, c) + 3 * block + conv(4 * d, c) + conv(c, 3)
}

/// All learnable weights plus the configuration and seed that produced them.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    config: NetworkConfig,
    seed: u64,
    values: Vec<f64>,
    layout: Layout,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl NetworkParams {
    /// Seeded He-normal weights, zero biases, unit norm scales.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total];
        for t in &layout.tensors {
            let slot = &mut values[t.range()];
            match t.init {
                Init::Weight { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
                Init::Zero => slot.fill(0.0),
                Init::One => slot.fill(1.0),
            }
        }
        Ok(NetworkParams {
            config,
            seed,
            values,
            layout,
        })
    }

    /// Every scalar zero, norm scales included.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(NetworkParams {
            config,
            seed: 0,
            values: vec![0.0; layout.total],
            layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.layout.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn slice(&self, (offset, len): (usize, usize)) -> &[f64] {
        &self.values[offset..offset + len]
    }

    /// Human-readable path of a flat index, e.g. `head.weight[17]`.
    pub fn path_of(&self, index: usize) -> String {
        self.layout
            .tensors
            .iter()
            .find(|t| t.range().contains(&index))
            .map(|t| format!("{}[{}]", t.name, index - t.offset))
            .unwrap_or_else(|| format!("<out of range {index}>"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for field in [c.in_channels, c.feat_channels, c.window, c.heads, c.mlp_ratio] {
            out.extend_from_slice(&(field as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptHeader(format!("params: {m}"));
        if bytes.len() < 48 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        if u32_at(8) != VERSION as usize {
            return Err(corrupt("unsupported version"));
        }
        let config = NetworkConfig {
            in_channels: u32_at(12),
            feat_channels: u32_at(16),
            window: u32_at(20),
            heads: u32_at(24),
            mlp_ratio: u32_at(28),
        };
        config.validate()?;
        let seed = u64_at(32);
        let count = u64_at(40) as usize;
        let layout = Layout::new(&config);
        if count != layout.total {
            return Err(corrupt(&format!("count {count} does not match config ({})", layout.total)));
        }
        let body = &bytes[48..];
        if body.len() != count * 8 {
            return Err(corrupt("truncated or oversized body"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(NetworkParams {
            config,
            seed,
            values,
            layout,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        NetworkParams::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let a = NetworkParams::init(NetworkConfig::tiny(), 7).unwrap();
        let b = NetworkParams::init(NetworkConfig::tiny(), 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = NetworkParams::init(NetworkConfig::tiny(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = NetworkParams::init(NetworkConfig::tiny(), 3).unwrap();
        for t in p.tensors() {
            let vals = &p.values()[t.range()];
            match t.init {
                Init::Zero => assert!(vals.iter().all(|&v| v == 0.0), "{}", t.name),
                Init::One => assert!(vals.iter().all(|&v| v == 1.0), "{}", t.name),
                Init::Weight { .. } => assert!(vals.iter().any(|&v| v != 0.0), "{}", t.name),
            }
        }
    }

    #[test]
    fn first_encoder_layer_has_4096_scalars() {
        let p = NetworkParams::init(NetworkConfig::full(), 0).unwrap();
        let w = p.tensor("encoder.0.weight").unwrap().len();
        let b = p.tensor("encoder.0.bias").unwrap().len();
        assert_eq!(w, 4032);
        assert_eq!(w + b, 4096);
    }

    #[test]
    fn weight_scale_follows_fan_in() {
        let p = NetworkParams::init(NetworkConfig::full(), 11).unwrap();
        let t = p.tensor("decoder.fusion.weight").unwrap();
        let vals = &p.values()[t.range()];
        let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        let want = 2.0 / (512.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.02, "variance {var} vs {want}");
    }

    #[test]
    fn count_matches_closed_form() {
        for cfg in [NetworkConfig::full(), NetworkConfig::tiny()] {
            let p = NetworkParams::init(cfg, 1).unwrap();
            assert_eq!(p.count(), expected_param_count(&cfg));
            let spans: usize = p.tensors().iter().map(|t| t.len()).sum();
            assert_eq!(spans, p.count());
        }
    }

    #[test]
    fn file_round_trip_and_rejections() {
        let mut p = NetworkParams::init(NetworkConfig::tiny(), 5).unwrap();
        p.values_mut()[3] = 1.0 / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        p.save(&path).unwrap();
        let q = NetworkParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_bytes(), fs::read(&path).unwrap());

        let mut bytes = p.to_bytes();
        bytes[0] = b'X';
        assert_eq!(NetworkParams::from_bytes(&bytes).unwrap_err().code(), "corrupt_header");
        let bytes = p.to_bytes();
        assert!(NetworkParams::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert_eq!(NetworkParams::load(dir.path().join("none")).unwrap_err().code(), "missing_file");
    }

    #[test]
    fn path_of_names_tensor_and_offset() {
        let p = NetworkParams::init(NetworkConfig::tiny(), 0).unwrap();
        let head = p.tensor("head.bias").unwrap();
        assert_eq!(p.path_of(head.offset + 2), "head.bias[2]");
        assert_eq!(p.path_of(0), "encoder.0.weight[0]");
    }
}
