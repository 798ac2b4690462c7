//! Binary checkpoint archive.
//!
//! All integers and floats are little-endian; floats are IEEE-754 binary64.
//!
//! ```text
//! magic        8 bytes   "RTXNCKPT"
//! version      u32       1
//! variant      u8        0 cross_attention, 1 self_only, 2 concat4
//! config       7 x u64   base_channels, heads, attention_blocks_per_branch,
//!                        fused_channels, patch_train_size, ffn_hidden, head_hidden
//! iteration    u64
//! n_params     u32
//!   name_len   u32, name (UTF-8)
//!   ndim       u32, dims (ndim x u64)
//!   values     prod(dims) x f64
//! pca          c_in u32, c_f u32, explained_variance_fraction f64,
//!              mean (c_in x f64), basis (c_f x c_in f64, row-major)
//! adam         t u64, then for each parameter in order: m, v (numel x f64 each)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::config::{ModelConfig, Variant};
use super::network::Network;
use super::params::ParameterStore;
use super::pca::PcaProjection;
use crate::error::{Error, Result};
use crate::training::adam::AdamState;

pub const MAGIC: &[u8; 8] = b"RTXNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParameterStore,
    pub pca: PcaProjection,
    pub optimizer: AdamState,
    pub iteration: u64,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.0.write_all(b)
    }
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
        for v in vs {
            self.bytes(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated archive at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        self.write_into(&mut w).expect("writing to memory cannot fail");
        w.0
    }

    fn write_into<W: Write>(&self, w: &mut Writer<W>) -> std::io::Result<()> {
        let c = &self.config;
        w.bytes(MAGIC)?;
        w.u32(FORMAT_VERSION)?;
        w.u8(self.variant.code())?;
        for v in [
            c.base_channels,
            c.heads,
            c.attention_blocks_per_branch,
            c.fused_channels,
            c.patch_train_size,
            c.ffn_hidden,
            c.head_hidden,
        ] {
            w.u64(v as u64)?;
        }
        w.u64(self.iteration)?;
        w.u32(self.params.len() as u32)?;
        for id in self.params.ids() {
            let meta = self.params.meta(id);
            w.u32(meta.name.len() as u32)?;
            w.bytes(meta.name.as_bytes())?;
            w.u32(meta.shape.len() as u32)?;
            for &d in &meta.shape {
                w.u64(d as u64)?;
            }
            w.f64s(self.params.values(id).iter().copied())?;
        }
        w.u32(self.pca.in_channels() as u32)?;
        w.u32(self.pca.out_channels() as u32)?;
        w.f64s([self.pca.explained_variance_fraction])?;
        w.f64s(self.pca.mean.iter().copied())?;
        w.f64s(self.pca.basis.iter().copied())?;
        w.u64(self.optimizer.t)?;
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            w.f64s(m.iter().copied())?;
            w.f64s(v.iter().copied())?;
        }
        Ok(())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let variant = Variant::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown variant".into()))?;
        let config = ModelConfig {
            base_channels: r.usize()?,
            heads: r.usize()?,
            attention_blocks_per_branch: r.usize()?,
            fused_channels: r.usize()?,
            patch_train_size: r.usize()?,
            ffn_hidden: r.usize()?,
            head_hidden: r.usize()?,
        };
        config
            .validate_for(variant)
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
        let iteration = r.u64()?;
        let (_, mut params) = Network::new(config, variant)?;
        let n = r.u32()? as usize;
        if n != params.len() {
            return Err(Error::Checkpoint(format!(
                "archive has {n} parameters, architecture has {}",
                params.len()
            )));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let meta = params.meta(id);
            if meta.name != name || meta.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {shape:?} does not match expected {} {:?}",
                    meta.name, meta.shape
                )));
            }
            let values = r.f64s(meta.numel())?;
            params.set_values(id, &values)?;
        }
        let c_in = r.u32()? as usize;
        let c_f = r.u32()? as usize;
        let explained_variance_fraction = r.f64()?;
        let mean = Array1::from(r.f64s(c_in)?);
        let basis = Array2::from_shape_vec((c_f, c_in), r.f64s(c_f * c_in)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let t = r.u64()?;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for id in params.ids() {
            let numel = params.values(id).len();
            m.push(r.f64s(numel)?);
            v.push(r.f64s(numel)?);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            variant,
            params,
            pca: PcaProjection {
                mean,
                basis,
                explained_variance_fraction,
            },
            optimizer: AdamState { m, v, t },
            iteration,
        })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// half-written archive at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = Writer(std::io::BufWriter::new(file));
            self.write_into(&mut w).map_err(|e| Error::io(&tmp, e))?;
            w.0.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the network described by this checkpoint.
    pub fn network(&self) -> Result<Network> {
        Ok(Network::new(self.config, self.variant)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            base_channels: 4,
            heads: 2,
            attention_blocks_per_branch: 1,
            fused_channels: 3,
            patch_train_size: 16,
            ffn_hidden: 5,
            head_hidden: 6,
        };
        let (net, mut params) = Network::new(cfg, Variant::CrossAttention).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        net.initialize(&mut params, &mut rng);
        let mut optimizer = AdamState::new(&params);
        for m in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
            m.iter_mut().for_each(|x| *x = rng.random());
        }
        optimizer.t = 17;
        let pca = PcaProjection {
            mean: Array1::from_shape_fn(8, |_| rng.random()),
            basis: Array2::from_shape_fn((3, 8), |_| rng.random()),
            explained_variance_fraction: 0.81,
        };
        Checkpoint {
            config: cfg,
            variant: Variant::CrossAttention,
            params,
            pca,
            optimizer,
            iteration: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.pca, ck.pca);
        assert_eq!(back.optimizer, ck.optimizer);
        for id in ck.params.ids() {
            let a: Vec<u64> = ck.params.values(id).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params.values(id).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes(), ck.to_bytes());
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
