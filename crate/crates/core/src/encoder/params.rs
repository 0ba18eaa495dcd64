//! Architecture configuration, named weight tensors and the checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `CIPW`, `u32` tensor count, then
//! per tensor `u8` name length, name bytes, `u32` rank, `rank` x `u32` dims,
//! `f32` data. Weights are kept f32-representable in memory so a
//! save/load cycle is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::Mat;
use super::EncoderError;
use crate::geometry::io::{write_atomic, FormatError};
use crate::geometry::ImageSpec;
use crate::kv::{KvError, KvMap};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CIPW";

/// Network sizes. Channel widths are given at full scale and divided by
/// `channel_scale` for the toy network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub width: usize,
    pub height: usize,
    pub d1: usize,
    pub d2: usize,
    pub c: usize,
    pub d1_fused: usize,
    pub d_fused: usize,
    pub channel_scale: usize,
    pub k: usize,
    pub n1: usize,
    pub n2: usize,
    /// Meters per unit of network input for point coordinates.
    pub coord_scale: f64,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 64,
            d1: 256,
            d2: 512,
            c: 128,
            d1_fused: 256,
            d_fused: 256,
            channel_scale: 8,
            k: 32,
            n1: 256,
            n2: 256,
            coord_scale: 10.0,
            seed: 0,
        }
    }
}

/// Effective (scaled) widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub d1: usize,
    pub d2: usize,
    pub c: usize,
    pub d1_fused: usize,
    pub d_fused: usize,
}

impl ArchConfig {
    pub fn widths(&self) -> Widths {
        let s = |v: usize| v.div_ceil(self.channel_scale.max(1)).max(1);
        Widths {
            d1: s(self.d1),
            d2: s(self.d2),
            c: s(self.c),
            d1_fused: s(self.d1_fused),
            d_fused: s(self.d_fused),
        }
    }

    pub fn image_spec(&self) -> Result<ImageSpec, EncoderError> {
        ImageSpec::new(self.width, self.height).map_err(|e| EncoderError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        self.image_spec()?;
        if self.n1 == 0 || self.n2 == 0 || self.n2 > self.n1 {
            return Err(EncoderError::Config(format!(
                "need 0 < n2 <= n1, got n1={} n2={}",
                self.n1, self.n2
            )));
        }
        if self.k == 0 {
            return Err(EncoderError::Config("k must be positive".into()));
        }
        if self.channel_scale == 0 {
            return Err(EncoderError::Config("channel_scale must be positive".into()));
        }
        if !(self.coord_scale > 0.0) {
            return Err(EncoderError::Config("coord_scale must be positive".into()));
        }
        Ok(())
    }

    /// Grid sizes `(rows, cols)` at 1/16, 1/32 and 1/4 scale.
    pub fn grids(&self) -> [(usize, usize); 3] {
        [
            (self.height / 16, self.width / 16),
            (self.height / 32, self.width / 32),
            (self.height / 4, self.width / 4),
        ]
    }

    /// Consumes the architecture keys from a parsed map.
    pub fn read_from(&mut self, kv: &mut KvMap) -> Result<(), KvError> {
        kv.take_into("width", &mut self.width)?;
        kv.take_into("height", &mut self.height)?;
        kv.take_into("d1", &mut self.d1)?;
        kv.take_into("d2", &mut self.d2)?;
        kv.take_into("c", &mut self.c)?;
        kv.take_into("d1_fused", &mut self.d1_fused)?;
        kv.take_into("d_fused", &mut self.d_fused)?;
        kv.take_into("channel_scale", &mut self.channel_scale)?;
        kv.take_into("k", &mut self.k)?;
        kv.take_into("n1", &mut self.n1)?;
        kv.take_into("n2", &mut self.n2)?;
        kv.take_into("coord_scale", &mut self.coord_scale)?;
        kv.take_into("arch_seed", &mut self.seed)?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut String) {
        let _ = writeln!(out, "width={}", self.width);
        let _ = writeln!(out, "height={}", self.height);
        let _ = writeln!(out, "d1={}", self.d1);
        let _ = writeln!(out, "d2={}", self.d2);
        let _ = writeln!(out, "c={}", self.c);
        let _ = writeln!(out, "d1_fused={}", self.d1_fused);
        let _ = writeln!(out, "d_fused={}", self.d_fused);
        let _ = writeln!(out, "channel_scale={}", self.channel_scale);
        let _ = writeln!(out, "k={}", self.k);
        let _ = writeln!(out, "n1={}", self.n1);
        let _ = writeln!(out, "n2={}", self.n2);
        let _ = writeln!(out, "coord_scale={}", self.coord_scale);
        let _ = writeln!(out, "arch_seed={}", self.seed);
    }

    pub fn parse(text: &str) -> Result<Self, EncoderError> {
        let mut kv = KvMap::parse(text).map_err(|e| EncoderError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        cfg.read_from(&mut kv).map_err(|e| EncoderError::Config(e.to_string()))?;
        kv.finish().map_err(|e| EncoderError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_to(&mut s);
        s
    }

    /// Ordered `(name, shape)` table of every learnable tensor.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.widths();
        let [(h1, w1), (h2, w2), _] = self.grids();
        let (cells1, cells2) = (h1 * w1, h2 * w2);
        let mut table = Vec::new();
        let mut dense = |name: &str, input: usize, output: usize| {
            table.push((format!("{name}.w"), vec![input, output]));
            table.push((format!("{name}.b"), vec![output]));
        };
        dense("img.s1.l1", 48, w.d1);
        dense("img.s1.l2", w.d1, w.d1);
        dense("img.s2.l1", 4 * w.d1, w.d2);
        dense("img.s2.l2", w.d2, w.d2);
        dense("pts.s1.l1", 6, w.d1);
        dense("pts.s1.l2", w.d1, w.d1);
        dense("pts.s2.l1", w.d1 + 3, w.d2);
        dense("pts.s2.l2", w.d2, w.d2);
        dense("i2p.1.l1", w.d2 + w.d1, w.d1);
        dense("i2p.1.l2", w.d1, cells1);
        dense("i2p.2.l1", w.d2 + w.d2, w.d2);
        dense("i2p.2.l2", w.d2, cells2);
        dense("p2i.1.l1", w.d2 + w.d1, w.d1);
        dense("p2i.1.l2", w.d1, self.n1);
        dense("p2i.2.l1", w.d2 + w.d2, w.d2);
        dense("p2i.2.l2", w.d2, self.n2);
        dense("imgdec.up2", 2 * w.d2, 4 * w.d1_fused);
        dense("imgdec.up1a", 2 * w.d1 + w.d1_fused, 4 * w.d_fused);
        dense("imgdec.up1b", w.d_fused, 4 * w.d_fused);
        dense("imgdec.skip", w.d_fused + 3, w.d_fused);
        dense("imgdec.score", w.d_fused, 1);
        dense("imgdec.desc", w.d_fused, w.c);
        dense("ptdec.up2", 2 * w.d2, w.d1_fused);
        dense("ptdec.up1a", 2 * w.d1 + w.d1_fused, w.d_fused);
        dense("ptdec.up1b", w.d_fused, w.d_fused);
        dense("ptdec.skip", w.d_fused + 3, w.d_fused);
        dense("ptdec.score", w.d_fused, 1);
        dense("ptdec.desc", w.d_fused, w.c);
        table
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    /// 2-D view (`rank 1` becomes a single row).
    pub fn as_mat(&self) -> Mat {
        match self.shape.as_slice() {
            [n] => Mat::from_vec(1, *n, self.data.clone()),
            [r, c] => Mat::from_vec(*r, *c, self.data.clone()),
            _ => Mat::from_vec(1, self.data.len(), self.data.clone()),
        }
    }
}

/// Every learnable weight of the network, in shape-table order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases, rounded to f32.
    pub fn init(cfg: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = cfg
            .shape_table()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if shape.len() == 2 {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..len).map(|_| rng.random_range(-limit..limit) as f32 as f64).collect()
                } else {
                    vec![0.0; len]
                };
                Tensor { name, shape, data }
            })
            .collect();
        Self { tensors }
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Rounds every weight to the nearest f32.
    pub fn quantize(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn check_shapes(&self, cfg: &ArchConfig) -> Result<(), EncoderError> {
        let table = cfg.shape_table();
        if table.len() != self.tensors.len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                table.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in table.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(EncoderError::ShapeMismatch(format!(
                    "tensor {}: expected {name} {shape:?}, found {} {:?}",
                    t.name, t.name, t.shape
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.push(t.name.len() as u8);
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(FormatError::BadMagic { expected: "CIPW" });
        }
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.take(1)?[0] as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| FormatError::Parse("tensor name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let raw = cur.take(len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(FormatError::Parse(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - cur.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated { expected: self.pos + n, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchConfig {
        ArchConfig { width: 64, height: 64, n1: 16, n2: 8, k: 4, channel_scale: 32, ..Default::default() }
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let cfg = small();
        let params = EncoderParams::init(&cfg, 3);
        params.check_shapes(&cfg).unwrap();
        assert!(params.all_finite());
        let back = EncoderParams::decode(&params.encode()).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn checkpoint_layout() {
        let params = EncoderParams::from_tensors(vec![Tensor {
            name: "a".into(),
            shape: vec![2],
            data: vec![1.0, -0.5],
        }]);
        let mut expected = b"CIPW".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(1);
        expected.push(b'a');
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(params.encode(), expected);
        let mut bad = expected.clone();
        bad.push(0);
        assert!(EncoderParams::decode(&bad).is_err());
        assert!(EncoderParams::decode(&expected[..expected.len() - 1]).is_err());
    }

    #[test]
    fn shape_check_catches_mismatch() {
        let cfg = small();
        let mut params = EncoderParams::init(&cfg, 0);
        params.tensors_mut()[0].shape = vec![1, 1];
        assert!(matches!(params.check_shapes(&cfg), Err(EncoderError::ShapeMismatch(_))));
        let other = ArchConfig { n1: 32, ..cfg.clone() };
        assert!(EncoderParams::init(&cfg, 0).check_shapes(&other).is_err());
    }

    #[test]
    fn arch_text_round_trip() {
        let cfg = ArchConfig { coord_scale: 12.5, seed: 7, ..small() };
        assert_eq!(ArchConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(ArchConfig::parse("width=100\n").is_err());
        assert!(ArchConfig::parse("bogus=1\n").is_err());
    }

    #[test]
    fn default_widths_follow_scale() {
        let w = ArchConfig::default().widths();
        assert_eq!((w.d1, w.d2, w.c), (32, 64, 16));
    }
}
