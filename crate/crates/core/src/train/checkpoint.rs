//! Checkpoint persistence. One file carries the model tensors, optimizer
//! moments, rng state, and a hash of the config that produced them, so a
//! resumed run continues the exact trajectory of an uninterrupted one.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::graph::Real;
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::train::AdamW;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const OPT_M_PREFIX: &str = "opt.m.";
const OPT_V_PREFIX: &str = "opt.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u32,
    pub opt_step: u64,
    pub rng: RngState,
    pub tensors: BTreeMap<String, Array2<f32>>,
}

impl Checkpoint {
    pub fn from_training_state(
        config_hash: [u8; 32],
        epoch: u32,
        rng: RngState,
        params: &ParamStore<f32>,
        opt: &AdamW<f32>,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, value) in params.iter() {
            tensors.insert(name.clone(), value.clone());
        }
        for (name, m, v) in opt.moments() {
            tensors.insert(format!("{OPT_M_PREFIX}{name}"), m.clone());
            tensors.insert(format!("{OPT_V_PREFIX}{name}"), v.clone());
        }
        Self { config_hash, epoch, opt_step: opt.step_count(), rng, tensors }
    }

    /// Model tensors only, without optimizer moments.
    pub fn params(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, value) in &self.tensors {
            if !name.starts_with(OPT_M_PREFIX) && !name.starts_with(OPT_V_PREFIX) {
                store.insert(name.clone(), value.clone());
            }
        }
        store
    }

    pub fn optimizer(&self) -> AdamW<f32> {
        let strip = |prefix: &str| {
            self.tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, v)| (n[prefix.len()..].to_string(), v.clone()))
                .collect::<BTreeMap<_, _>>()
        };
        AdamW::from_state(self.opt_step, strip(OPT_M_PREFIX), strip(OPT_V_PREFIX))
    }

    pub fn params_as<T: Real>(&self) -> ParamStore<T> {
        self.params().map_values(|v| T::from_f64(v as f64))
    }

    pub fn ensure_config(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_hash == expected {
            Ok(())
        } else {
            Err(Error::config(format!(
                "checkpoint was produced by a different config (hash {}.. vs expected {}..)",
                hex_prefix(&self.config_hash),
                hex_prefix(expected)
            )))
        }
    }
}

fn hex_prefix(hash: &[u8; 32]) -> String {
    hash[..6].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.config_hash);
    buf.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buf.extend_from_slice(&ckpt.opt_step.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.seed);
    buf.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng.stream.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &ckpt.tensors {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "tensor name too long");
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        let (rows, cols) = tensor.dim();
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for &v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    // Write-then-rename so a crash never leaves a half-written checkpoint
    // behind the final name.
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, at: 0 };

    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint file: magic {:02x?}",
            &magic
        )));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32, "config hash")?);
    let epoch = r.u32("epoch")?;
    let opt_step = u64::from_le_bytes(r.take(8, "optimizer step")?.try_into().unwrap());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32, "rng seed")?);
    let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
    let stream = u64::from_le_bytes(r.take(8, "rng stream")?.try_into().unwrap());
    let rng = RngState { seed, word_pos, stream };

    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "tensor name length")?.try_into().unwrap());
        let name = String::from_utf8(r.take(name_len as usize, "tensor name")?.to_vec())
            .map_err(|_| Error::Format(format!("tensor {i}: name is not utf-8")))?;
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let payload = r.take(rows * cols * 4, &format!("tensor {name} payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint data",
            bytes.len() - r.at
        )));
    }
    Ok(Checkpoint { config_hash, epoch, opt_step, rng, tensors })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "checkpoint ends inside {what} (offset {})",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = stream(7, "ckpt.test", &[]);
        let mut params: ParamStore<f32> = ParamStore::new();
        params.insert("layer.w", crate::params::normal_init(&mut rng, 3, 4, 1.0));
        params.insert("layer.b", Array2::from_elem((1, 4), -0.0f32));
        let mut odd = Array2::zeros((2, 2));
        odd[[0, 0]] = f32::MIN_POSITIVE / 2.0; // subnormal survives the trip
        odd[[1, 1]] = 1.0e-38;
        params.insert("odd", odd);

        let mut opt = AdamW::new();
        let g = crate::params::normal_init(&mut rng, 3, 4, 0.1);
        opt.step(&mut params, &[("layer.w".into(), g)], 1e-3, 0.01);

        let _ = rng.random::<u64>();
        Checkpoint::from_training_state([5u8; 32], 17, RngState::capture(&rng), &params, &opt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.config_hash, ckpt.config_hash);
        assert_eq!(loaded.epoch, ckpt.epoch);
        assert_eq!(loaded.opt_step, ckpt.opt_step);
        assert_eq!(loaded.rng, ckpt.rng);
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for (name, t) in &ckpt.tensors {
            let l = &loaded.tensors[name];
            assert_eq!(l.dim(), t.dim());
            for (a, b) in l.iter().zip(t.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "tensor {name}");
            }
        }
    }

    #[test]
    fn saved_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.ckpt"), dir.path().join("2.ckpt"));
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &p1).unwrap();
        save_checkpoint(&ckpt, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn optimizer_state_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.ckpt");

        let make_grad = |seed: u64| {
            let mut r = stream(seed, "ckpt.grad", &[]);
            crate::params::normal_init::<f32>(&mut r, 2, 2, 1.0)
        };
        let mut params: ParamStore<f32> = ParamStore::new();
        params.insert("w", Array2::from_elem((2, 2), 1.0f32));
        let mut opt = AdamW::new();
        opt.step(&mut params, &[("w".into(), make_grad(1))], 0.01, 0.05);

        let rng = stream(9, "ckpt.rng", &[]);
        let ckpt = Checkpoint::from_training_state(
            [1u8; 32],
            1,
            RngState::capture(&rng),
            &params,
            &opt,
        );
        save_checkpoint(&ckpt, &path).unwrap();

        opt.step(&mut params, &[("w".into(), make_grad(2))], 0.01, 0.05);
        let direct = params.get("w").clone();

        let loaded = load_checkpoint(&path).unwrap();
        let mut params2 = loaded.params();
        let mut opt2 = loaded.optimizer();
        assert_eq!(opt2.step_count(), 1);
        opt2.step(&mut params2, &[("w".into(), make_grad(2))], 0.01, 0.05);
        for (a, b) in params2.get("w").iter().zip(direct.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_foreign_and_damaged_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");

        std::fs::write(&path, b"MVDSxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut versioned = good.clone();
        versioned[4] = 9;
        std::fs::write(&path, &versioned).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { expected: CHECKPOINT_VERSION, found: 9 })
        ));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated(_))));

        let mut trailing = good.clone();
        trailing.extend_from_slice(b"junk");
        std::fs::write(&path, &trailing).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn config_hash_guard() {
        let ckpt = sample_checkpoint();
        assert!(ckpt.ensure_config(&[5u8; 32]).is_ok());
        let err = ckpt.ensure_config(&[6u8; 32]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rng_state_survives_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rng.ckpt");
        let mut rng = stream(11, "ckpt.seq", &[3]);
        let _burn: [u64; 5] = rng.random();

        let params: ParamStore<f32> = ParamStore::new();
        let ckpt = Checkpoint::from_training_state(
            [0u8; 32],
            0,
            RngState::capture(&rng),
            &params,
            &AdamW::new(),
        );
        save_checkpoint(&ckpt, &path).unwrap();

        let expected: [u64; 4] = rng.random();
        let mut restored = load_checkpoint(&path).unwrap().rng.restore();
        let got: [u64; 4] = restored.random();
        assert_eq!(expected, got);
    }
}
