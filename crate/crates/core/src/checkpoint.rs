//! Binary checkpoint format.
//!
//! All integers are little-endian `u64` unless noted, floats are IEEE-754
//! `f64` little-endian.
//!
//! ```text
//! magic            8 bytes  "AOPCKPT1"
//! input_dim        u64
//! hidden_count     u64      H
//! hidden_widths    H × u64
//! num_classes      u64
//! activation       u8       0 = relu
//! seed             u64
//! epoch            u64
//! param_count      u64      P
//! params           P × f64  per layer: weights row-major, then biases
//! mask_flag        u8       0 = absent, 1 = present
//!   bit_count      u64      number of prunable weights
//!   bits           ⌈bit_count/8⌉ bytes, LSB-first, flat weight order
//! ema_flag         u8       0 = absent, 1 = present
//!   ema            P × f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::netcore::{Activation, MlpSpec, ParamSet};
use crate::pruning::SparsityMask;

pub const MAGIC: &[u8; 8] = b"AOPCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub seed: u64,
    pub epoch: u64,
    pub params: ParamSet,
    pub mask: Option<SparsityMask>,
    pub ema: Option<ParamSet>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_matches(&self.spec)?;
        if let Some(e) = &self.ema {
            e.check_matches(&self.spec)?;
        }
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u64(&mut b, self.spec.input_dim as u64);
        put_u64(&mut b, self.spec.hidden_widths.len() as u64);
        for &w in &self.spec.hidden_widths {
            put_u64(&mut b, w as u64);
        }
        put_u64(&mut b, self.spec.num_classes as u64);
        b.push(match self.spec.activation {
            Activation::Relu => 0,
        });
        put_u64(&mut b, self.seed);
        put_u64(&mut b, self.epoch);
        let flat = self.params.to_flat();
        put_u64(&mut b, flat.len() as u64);
        flat.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        match &self.mask {
            None => b.push(0),
            Some(m) => {
                if m.prunable_count() != self.spec.weight_count() {
                    return Err(Error::shape("checkpoint mask", "mask does not match the network"));
                }
                b.push(1);
                let bits = m.flat_bits();
                put_u64(&mut b, bits.len() as u64);
                for chunk in bits.chunks(8) {
                    let byte = chunk
                        .iter()
                        .enumerate()
                        .fold(0u8, |acc, (i, &bit)| acc | ((bit as u8) << i));
                    b.push(byte);
                }
            }
        }
        match &self.ema {
            None => b.push(0),
            Some(e) => {
                b.push(1);
                e.to_flat().iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let input_dim = r.count()?;
        let h = r.count()?;
        if h > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible hidden layer count {h}")));
        }
        let hidden = (0..h).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
        let num_classes = r.count()?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            other => return Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        };
        let spec = MlpSpec {
            input_dim,
            hidden_widths: hidden,
            num_classes,
            activation,
        };
        spec.validate()
            .map_err(|e| Error::Checkpoint(format!("invalid network description: {e}")))?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let p = r.count()?;
        let params = ParamSet::from_flat(&spec, &r.f64s(p)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mask = match r.u8()? {
            0 => None,
            1 => {
                let n = r.count()?;
                let packed = r.take(n.div_ceil(8))?;
                let bits: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
                Some(
                    SparsityMask::from_flat_bits(&spec, &bits)
                        .map_err(|e| Error::Checkpoint(e.to_string()))?,
                )
            }
            other => return Err(Error::Checkpoint(format!("bad mask flag {other}"))),
        };
        let ema = match r.u8()? {
            0 => None,
            1 => Some(
                ParamSet::from_flat(&spec, &r.f64s(p)?).map_err(|e| Error::Checkpoint(e.to_string()))?,
            ),
            other => return Err(Error::Checkpoint(format!("bad EMA flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            spec,
            seed,
            epoch,
            params,
            mask,
            ema,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("count overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
