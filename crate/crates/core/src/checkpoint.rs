//! Checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!   magic "MHCAF1"
//!   u32 parameter count
//!   per parameter: u16 name length, name bytes, u8 dtype (0 = f64),
//!     u8 trainable, u8 ndim, u32 dims[ndim]
//!   raw f64 payloads in manifest order
//!   u8 optimizer-present flag; when set: u64 t, f64 lr/beta1/beta2/eps,
//!     then per parameter a u8 slot flag followed by m and v payloads
//!   u32 epoch, f64 best validation accuracy
//!   u64 config length, config snapshot bytes

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamEntry};
use crate::tensor::Tensor;
use crate::train::{AdamSlot, AdamState};

const MAGIC: &[u8; 6] = b"MHCAF1";

#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: Option<AdamState>,
    pub epoch: u32,
    pub best_val_acc: f64,
    pub config: String,
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    // chunked little-endian encode keeps the staging buffer small
    let mut staging = [0u8; 8 * 1024];
    for chunk in values.chunks(1024) {
        for (i, v) in chunk.iter().enumerate() {
            staging[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
        }
        w.write_all(&staging[..chunk.len() * 8])?;
    }
    Ok(())
}

pub fn save(
    path: &Path,
    params: &ModelParams,
    opt: Option<&AdamState>,
    epoch: u32,
    best_val_acc: f64,
    config: &str,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::with_capacity(1 << 20, file);
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for e in params.entries() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[0u8, e.trainable as u8, e.tensor.shape.len() as u8])?;
        for &d in &e.tensor.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for e in params.entries() {
        write_f64s(&mut w, &e.tensor.data)?;
    }
    match opt {
        Some(st) => {
            w.write_all(&[1u8])?;
            w.write_all(&st.t.to_le_bytes())?;
            for v in [st.lr, st.beta1, st.beta2, st.eps] {
                w.write_all(&v.to_le_bytes())?;
            }
            for slot in &st.slots {
                match slot {
                    Some(s) => {
                        w.write_all(&[1u8])?;
                        write_f64s(&mut w, &s.m)?;
                        write_f64s(&mut w, &s.v)?;
                    }
                    None => w.write_all(&[0u8])?,
                }
            }
        }
        None => w.write_all(&[0u8])?,
    }
    w.write_all(&epoch.to_le_bytes())?;
    w.write_all(&best_val_acc.to_le_bytes())?;
    let cfg = config.as_bytes();
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg)?;
    w.flush()?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let count = r.u32()? as usize;
    let mut metas: Vec<(String, bool, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint name is not utf-8".into()))?;
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(Error::Data(format!("unsupported dtype {}", dtype)));
        }
        let trainable = r.u8()? != 0;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        metas.push((name, trainable, shape));
    }
    let mut params = ModelParams::new();
    for (name, trainable, shape) in &metas {
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        params.insert(name, Tensor::from_vec(shape.clone(), data)?, *trainable);
    }
    let opt = if r.u8()? == 1 {
        let t = r.u64()?;
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let mut slots = Vec::with_capacity(count);
        for e in params.entries() {
            if r.u8()? == 1 {
                let n = e.tensor.numel();
                slots.push(Some(AdamSlot {
                    m: r.f64s(n)?,
                    v: r.f64s(n)?,
                }));
            } else {
                slots.push(None);
            }
        }
        Some(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            t,
            slots,
        })
    } else {
        None
    };
    let epoch = r.u32()?;
    let best_val_acc = r.f64()?;
    let cfg_len = r.u64()? as usize;
    let config = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::Data("checkpoint config is not utf-8".into()))?;
    Ok(Checkpoint {
        params,
        opt,
        epoch,
        best_val_acc,
        config,
    })
}

/// Verifies that checkpoint parameter shapes match a freshly initialized
/// model's registry; mismatches list both shapes.
pub fn check_compat(loaded: &ModelParams, expected: &ModelParams) -> Result<()> {
    if loaded.len() != expected.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            expected.len()
        )));
    }
    for (l, e) in loaded.entries().iter().zip(expected.entries()) {
        if l.name != e.name {
            return Err(Error::Config(format!(
                "checkpoint parameter {} does not match model parameter {}",
                l.name, e.name
            )));
        }
        if l.tensor.shape != e.tensor.shape {
            return Err(Error::Config(format!(
                "parameter {} shape mismatch: checkpoint {:?} vs model {:?}",
                l.name, l.tensor.shape, e.tensor.shape
            )));
        }
    }
    Ok(())
}

pub fn entry_names(params: &ModelParams) -> Vec<&str> {
    params.entries().iter().map(|e: &ParamEntry| e.name.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::train::TrainConfig;
    use tempfile::tempdir;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = Model::init(ModelConfig::tiny(3), 9).unwrap();
        let mut opt = AdamState::new(&TrainConfig::default(), &model.params);
        opt.t = 17;
        opt.slots[0] = Some(AdamSlot {
            m: vec![0.25; model.params.entries()[0].tensor.numel()],
            v: vec![0.5; model.params.entries()[0].tensor.numel()],
        });
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&p1, &model.params, Some(&opt), 12, 0.875, "seed=9\n").unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded.epoch, 12);
        assert_eq!(loaded.best_val_acc, 0.875);
        assert_eq!(loaded.config, "seed=9\n");
        let lopt = loaded.opt.as_ref().unwrap();
        assert_eq!(lopt.t, 17);
        save(&p2, &loaded.params, loaded.opt.as_ref(), loaded.epoch, loaded.best_val_acc, &loaded.config).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn round_trip_preserves_names_shapes_flags_and_bits() {
        let mut model = Model::init(ModelConfig::tiny(4), 3).unwrap();
        model.params.freeze_matching(&["cnn.stem.stage0".to_string()]);
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &model.params, None, 0, 0.0, "").unwrap();
        let loaded = load(&p).unwrap();
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in loaded.params.entries().iter().zip(model.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            assert_eq!(a.tensor.data, b.tensor.data);
        }
    }

    #[test]
    fn shape_mismatch_is_reported_with_both_shapes() {
        let small = Model::init(ModelConfig::tiny(3), 1).unwrap();
        let big = Model::init(
            ModelConfig {
                feature_dim: 64,
                ..ModelConfig::tiny(3)
            },
            1,
        )
        .unwrap();
        let err = check_compat(&small.params, &big.params).unwrap_err().to_string();
        assert!(err.contains("[32") && err.contains("[64") || err.contains("mismatch"), "{}", err);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"NOTMHCAF").unwrap();
        assert!(load(&p).is_err());
    }
}
