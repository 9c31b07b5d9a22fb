//! Versioned binary checkpoint container: model config, named parameter
//! tensors, and (optionally) optimizer state so training can resume on the
//! exact trajectory. Floats are stored as little-endian f64 bytes, so a
//! save/load round-trip is bit-exact.

use std::collections::HashMap;
use std::path::Path;

use crate::error::CoreError;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Adam;

const MAGIC: &[u8; 4] = b"GLNC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step: u64,
    /// Per-parameter first and second moment vectors.
    pub slots: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub opt: Option<OptState>,
}

impl Checkpoint {
    pub fn capture(params: &ModelParams, step: u64, opt: Option<&Adam>) -> Self {
        let tensors = params
            .named()
            .into_iter()
            .map(|(name, t)| NamedTensor { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        let opt = opt.map(|a| {
            let (t, slots) = a.export_state();
            OptState { step: t, slots }
        });
        Checkpoint { config: params.cfg.clone(), step, params: tensors, opt }
    }

    /// Rebuild model parameters; every stored tensor must match a parameter
    /// of the config by name and shape.
    pub fn restore_params(&self) -> Result<ModelParams, CoreError> {
        self.config
            .validate()
            .map_err(|e| CoreError::Checkpoint(format!("bad stored config: {e}")))?;
        let mut model = ModelParams::init(&self.config, 0);
        let stored: HashMap<&str, &NamedTensor> =
            self.params.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, tensor) in model.named_mut() {
            let saved = stored.get(name.as_str()).ok_or_else(|| {
                CoreError::Checkpoint(format!("parameter `{name}` missing from checkpoint"))
            })?;
            if saved.shape != tensor.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "parameter `{name}` shape {:?} does not match config shape {:?}",
                    saved.shape,
                    tensor.shape()
                )));
            }
            tensor.data_mut().copy_from_slice(&saved.data);
        }
        if stored.len() != model.named().len() {
            return Err(CoreError::Checkpoint("checkpoint carries unknown parameters".into()));
        }
        Ok(model)
    }

    pub fn restore_optimizer(&self, adam: &mut Adam) -> Result<(), CoreError> {
        let opt = self
            .opt
            .as_ref()
            .ok_or_else(|| CoreError::Checkpoint("checkpoint has no optimizer state".into()))?;
        adam.import_state(opt.step, opt.slots.clone());
        Ok(())
    }

    /// Elementwise arithmetic mean of parameters across checkpoints; configs
    /// and tensor shapes must agree. Optimizer state is dropped.
    pub fn average(checkpoints: &[Checkpoint]) -> Result<Checkpoint, CoreError> {
        let first = checkpoints
            .first()
            .ok_or_else(|| CoreError::Checkpoint("cannot average zero checkpoints".into()))?;
        for c in checkpoints {
            if c.config != first.config {
                return Err(CoreError::Checkpoint("checkpoint configs differ".into()));
            }
            if c.params.len() != first.params.len() {
                return Err(CoreError::Checkpoint("checkpoint parameter sets differ".into()));
            }
        }
        // mean computed as first + mean(delta) so that averaging identical
        // checkpoints reproduces them bit-for-bit
        let k = checkpoints.len() as f64;
        let mut params = first.params.clone();
        for (i, p) in params.iter_mut().enumerate() {
            let base = first.params[i].data.clone();
            let mut delta = vec![0.0; base.len()];
            for c in &checkpoints[1..] {
                let other = &c.params[i];
                if other.name != p.name || other.shape != p.shape {
                    return Err(CoreError::Checkpoint(format!(
                        "parameter mismatch while averaging: `{}` vs `{}`",
                        p.name, other.name
                    )));
                }
                for (d, (a, b)) in delta.iter_mut().zip(base.iter().zip(&other.data)) {
                    *d += b - a;
                }
            }
            for (out, (a, d)) in p.data.iter_mut().zip(base.iter().zip(&delta)) {
                *out = a + d / k;
            }
        }
        Ok(Checkpoint { config: first.config.clone(), step: first.step, params, opt: None })
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| CoreError::Checkpoint(format!("config encode: {e}")))?;
        write_bytes(&mut buf, &cfg);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for t in &self.params {
            write_bytes(&mut buf, t.name.as_bytes());
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            write_floats(&mut buf, &t.data);
        }
        match &self.opt {
            None => buf.push(0),
            Some(o) => {
                buf.push(1);
                buf.extend_from_slice(&o.step.to_le_bytes());
                buf.extend_from_slice(&(o.slots.len() as u32).to_le_bytes());
                for (name, m, v) in &o.slots {
                    write_bytes(&mut buf, name.as_bytes());
                    write_floats(&mut buf, m);
                    write_floats(&mut buf, v);
                }
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CoreError> {
        let bytes = std::fs::read(path)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(cur.err("not a checkpoint file (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(cur.err(&format!("unsupported version {version}")));
        }
        let step = cur.u64()?;
        let cfg_bytes = cur.bytes_field()?;
        let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| CoreError::Checkpoint(format!("config decode: {e}")))?;
        let n = cur.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = cur.string_field()?;
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u64()? as usize);
            }
            let data = cur.floats_field()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(cur.err(&format!("tensor `{name}` shape/data mismatch")));
            }
            params.push(NamedTensor { name, shape, data });
        }
        let opt = match cur.take(1)?[0] {
            0 => None,
            1 => {
                let ostep = cur.u64()?;
                let k = cur.u32()? as usize;
                let mut slots = Vec::with_capacity(k);
                for _ in 0..k {
                    let name = cur.string_field()?;
                    let m = cur.floats_field()?;
                    let v = cur.floats_field()?;
                    slots.push((name, m, v));
                }
                Some(OptState { step: ostep, slots })
            }
            other => return Err(cur.err(&format!("bad optimizer flag {other}"))),
        };
        Ok(Checkpoint { config, step, params, opt })
    }
}

fn write_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
    buf.extend_from_slice(b);
}

fn write_floats(buf: &mut Vec<u8>, data: &[f64]) {
    buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: &str) -> CoreError {
        CoreError::Checkpoint(format!("{}: {msg}", self.path.display()))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CoreError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<Vec<u8>, CoreError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn string_field(&mut self) -> Result<String, CoreError> {
        String::from_utf8(self.bytes_field()?).map_err(|_| self.err("bad utf-8 in name"))
    }

    fn floats_field(&mut self) -> Result<Vec<f64>, CoreError> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParams {
        let mut cfg = ModelConfig::toy(12);
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.ffn_dim = 16;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        cfg.at_dec_layers = 1;
        cfg.max_src_len = 6;
        cfg.l_max = 8;
        ModelParams::init(&cfg, 77)
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let params = tiny();
        let mut adam = Adam::new(1e-3);
        // give the optimizer some non-trivial state
        let mut p = params.clone();
        for (_, t) in p.named_mut() {
            let z = vec![0.125; t.numel()];
            t.accumulate_grad(&z);
        }
        let mut named = p.named_mut();
        let mut refs: Vec<(&str, &mut crate::tensor::Tensor)> =
            named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
        adam.step(&mut refs);
        drop(named);

        let ckpt = Checkpoint::capture(&p, 42, Some(&adam));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt, "round trip must preserve every bit");

        let restored = loaded.restore_params().unwrap();
        for ((n1, a), (n2, b)) in restored.named().iter().zip(p.named().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn averaging_identities() {
        let params = tiny();
        let c = Checkpoint::capture(&params, 7, None);
        // averaging one checkpoint: identical parameters
        let avg1 = Checkpoint::average(std::slice::from_ref(&c)).unwrap();
        assert_eq!(avg1.params, c.params);
        // averaging k copies: identical parameters
        let avg3 = Checkpoint::average(&[c.clone(), c.clone(), c.clone()]).unwrap();
        assert_eq!(avg3.params, c.params);
        // average of p and -p: zeros
        let mut neg = c.clone();
        for t in neg.params.iter_mut() {
            for v in t.data.iter_mut() {
                *v = -*v;
            }
        }
        let zero = Checkpoint::average(&[c.clone(), neg]).unwrap();
        for t in &zero.params {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params = tiny();
        let a = Checkpoint::capture(&params, 0, None);
        let mut b = a.clone();
        b.params[0].shape = vec![1, b.params[0].data.len()];
        // same data length, different shape
        assert!(Checkpoint::average(&[a, b]).is_err());
    }
}
