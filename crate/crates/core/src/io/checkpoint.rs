//! Versioned binary container for splat optimizer state.
//!
//! Layout, all little-endian: the 8-byte magic, a `u32` version, a `u64`
//! splat count, `u64` step, the three Adam constants and seven learning-rate
//! fields as `f64` (the decay step count as `u64`), then for each of the five
//! parameter groups its first and second moments as `f64` arrays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, LearningRates, Moments, SplatOptimizer, GROUPS};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"GADOPTIM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_optimizer(opt: &SplatOptimizer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(opt.splat_count() as u64).to_le_bytes());
    out.extend_from_slice(&opt.step.to_le_bytes());
    let r = &opt.rates;
    for v in [opt.config.beta1, opt.config.beta2, opt.config.epsilon, r.position_init, r.position_final] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&r.position_decay_steps.to_le_bytes());
    for v in [r.color, r.opacity, r.scale, r.rotation] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in &opt.groups {
        for v in g.m.iter().chain(&g.v) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::parse(format!("byte {}", self.at), format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_optimizer(bytes: &[u8]) -> Result<SplatOptimizer> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::parse("byte 0", "not an optimizer checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse("byte 8", format!("unsupported checkpoint version {version}")));
    }
    let n = usize::try_from(r.u64("splat count")?).map_err(|_| Error::parse("byte 12", "splat count overflows"))?;
    let step = r.u64("step")?;
    let config = AdamConfig {
        beta1: r.f64("beta1")?,
        beta2: r.f64("beta2")?,
        epsilon: r.f64("epsilon")?,
    };
    let position_init = r.f64("position_init")?;
    let position_final = r.f64("position_final")?;
    let position_decay_steps = r.u64("position_decay_steps")?;
    let rates = LearningRates {
        position_init,
        position_final,
        position_decay_steps,
        color: r.f64("color")?,
        opacity: r.f64("opacity")?,
        scale: r.f64("scale")?,
        rotation: r.f64("rotation")?,
    };
    let mut groups: [Moments; 5] = Default::default();
    for (g, (name, width)) in groups.iter_mut().zip(GROUPS) {
        let len = n
            .checked_mul(width)
            .ok_or_else(|| Error::parse("header", "splat count overflows"))?;
        g.m = r.f64s(len, name)?;
        g.v = r.f64s(len, name)?;
    }
    if r.at != bytes.len() {
        return Err(Error::parse(format!("byte {}", r.at), "trailing data after the last group"));
    }
    Ok(SplatOptimizer {
        config,
        rates,
        step,
        groups,
    })
}

pub fn save_optimizer(opt: &SplatOptimizer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_optimizer(opt)).map_err(|e| Error::io(path, e))
}

pub fn load_optimizer(path: impl AsRef<Path>) -> Result<SplatOptimizer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_optimizer(&bytes)
}
