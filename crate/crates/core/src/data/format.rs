//! Binary dataset container. Little-endian throughout: a "MVDS" magic,
//! a u16 version, counts and image dims, optional normalization stats,
//! then per-record headers (subject, class, voxel length) and f32 payloads.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{FmriSample, Image, NormStats, Pair, PairedDataset};
use crate::error::Error;
use crate::Result;

pub const DATASET_MAGIC: [u8; 4] = *b"MVDS";
pub const DATASET_VERSION: u16 = 1;

const NO_CLASS: u32 = u32::MAX;

pub fn save_dataset(ds: &PairedDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.train.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.test.len() as u32).to_le_bytes())?;
    w.write_all(&ds.class_count.to_le_bytes())?;
    w.write_all(&(ds.image_h as u32).to_le_bytes())?;
    w.write_all(&(ds.image_w as u32).to_le_bytes())?;
    match ds.norm {
        Some(n) => {
            w.write_all(&[1u8])?;
            w.write_all(&n.mean.to_le_bytes())?;
            w.write_all(&n.std.to_le_bytes())?;
        }
        None => {
            w.write_all(&[0u8])?;
            w.write_all(&0f32.to_le_bytes())?;
            w.write_all(&0f32.to_le_bytes())?;
        }
    }
    for pair in ds.train.iter().chain(ds.test.iter()) {
        write_pair(&mut w, pair, ds.image_h, ds.image_w)?;
    }
    w.flush()?;
    Ok(())
}

fn write_pair(w: &mut impl Write, pair: &Pair, h: usize, wd: usize) -> Result<()> {
    if pair.image.h != h || pair.image.w != wd {
        return Err(Error::shape(format!(
            "dataset image is {}x{}, expected {}x{}",
            pair.image.h, pair.image.w, h, wd
        )));
    }
    if pair.image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Format("image pixels outside [0, 1]".into()));
    }
    w.write_all(&pair.fmri.subject_id.to_le_bytes())?;
    w.write_all(&pair.fmri.class_id.unwrap_or(NO_CLASS).to_le_bytes())?;
    w.write_all(&(pair.fmri.voxels.len() as u32).to_le_bytes())?;
    for v in &pair.fmri.voxels {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &pair.image.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, not a dataset file",
            magic
        )));
    }
    let version = read_u16(&mut r, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let train_count = read_u32(&mut r, "train count")? as usize;
    let test_count = read_u32(&mut r, "test count")? as usize;
    let class_count = read_u32(&mut r, "class count")?;
    let image_h = read_u32(&mut r, "image height")? as usize;
    let image_w = read_u32(&mut r, "image width")? as usize;
    let mut has_norm = [0u8; 1];
    read_exact(&mut r, &mut has_norm, "norm flag")?;
    let mean = read_f32(&mut r, "norm mean")?;
    let std = read_f32(&mut r, "norm std")?;
    let norm = match has_norm[0] {
        0 => None,
        1 => Some(NormStats { mean, std }),
        f => return Err(Error::Format(format!("bad norm flag {f}"))),
    };

    let mut read_split = |count: usize| -> Result<Vec<Pair>> {
        (0..count)
            .map(|_| read_pair(&mut r, image_h, image_w))
            .collect()
    };
    let train = read_split(train_count)?;
    let test = read_split(test_count)?;

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(PairedDataset {
        train,
        test,
        class_count,
        image_h,
        image_w,
        norm,
    })
}

fn read_pair(r: &mut impl Read, h: usize, w: usize) -> Result<Pair> {
    let subject_id = read_u32(r, "subject id")?;
    let class_raw = read_u32(r, "class id")?;
    let voxel_len = read_u32(r, "voxel length")? as usize;
    let mut voxels = vec![0f32; voxel_len];
    for v in &mut voxels {
        *v = read_f32(r, "voxel value")?;
    }
    let mut data = vec![0f32; h * w * 3];
    for v in &mut data {
        *v = read_f32(r, "pixel value")?;
        if !(0.0..=1.0).contains(v) {
            return Err(Error::Format(format!("pixel value {v} outside [0, 1]")));
        }
    }
    Ok(Pair {
        fmri: FmriSample {
            subject_id,
            class_id: if class_raw == NO_CLASS { None } else { Some(class_raw) },
            voxels,
        },
        image: Image { h, w, data },
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("file ends inside {what}")))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

/// Per-record summary for eyeballing a dataset.
pub fn export_csv(ds: &PairedDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "split,index,subject_id,class_id,voxel_len,voxel_mean,voxel_std")?;
    for (split, pairs) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, p) in pairs.iter().enumerate() {
            let n = p.fmri.voxels.len() as f64;
            let mean = p.fmri.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = p
                .fmri
                .voxels
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            let class = p
                .fmri
                .class_id
                .map(|c| c.to_string())
                .unwrap_or_else(|| "".into());
            writeln!(
                w,
                "{split},{i},{},{class},{},{mean},{}",
                p.fmri.subject_id,
                p.fmri.voxels.len(),
                var.sqrt()
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
