//! Dataset directory format.
//!
//! A dataset directory holds two files:
//!
//! * `meta`: `key = value` lines for `name`, `classes`, `dim`, `count`
//!   and the comma-separated `class_names`.
//! * `samples`: `"DGDS"`, u32 version, u64 count, u32 dim, then per sample
//!   a u16 class id followed by `dim` f32 values. Little-endian throughout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::DomainDataset;
use crate::error::{Error, Result};

pub const SAMPLES_MAGIC: &[u8; 4] = b"DGDS";
pub const SAMPLES_VERSION: u32 = 1;

pub fn write_dataset(dir: &Path, dataset: &DomainDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = format!(
        "name = {}\nclasses = {}\ndim = {}\ncount = {}\nclass_names = {}\n",
        dataset.name(),
        dataset.num_classes(),
        dataset.dim(),
        dataset.len(),
        dataset.class_names().join(","),
    );
    let meta_path = dir.join("meta");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;

    let mut out = Vec::with_capacity(20 + dataset.len() * (2 + 4 * dataset.dim()));
    out.extend_from_slice(SAMPLES_MAGIC);
    out.extend_from_slice(&SAMPLES_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.dim() as u32).to_le_bytes());
    for i in 0..dataset.len() {
        let (x, y) = dataset.sample(i);
        out.extend_from_slice(&(y as u16).to_le_bytes());
        for &v in x {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let samples_path = dir.join("samples");
    fs::write(&samples_path, out).map_err(|e| Error::io(&samples_path, e))
}

pub fn read_dataset(dir: &Path) -> Result<DomainDataset> {
    let meta_path = dir.join("meta");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut meta = BTreeMap::new();
    for (no, line) in meta_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(&meta_path, format!("line {}: expected key = value", no + 1)))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::parse(&meta_path, format!("missing {k}")))
    };
    let number = |k: &str| -> Result<usize> {
        field(k)?
            .parse()
            .map_err(|_| Error::parse(&meta_path, format!("{k} is not a number")))
    };
    let name = field("name")?.clone();
    let classes = number("classes")?;
    let dim = number("dim")?;
    let count = number("count")?;
    let class_names: Vec<String> = match meta.get("class_names") {
        Some(s) => s.split(',').map(|c| c.trim().to_string()).collect(),
        None => super::default_class_names(classes),
    };
    if class_names.len() != classes {
        return Err(Error::parse(
            &meta_path,
            format!("{} class names for {classes} classes", class_names.len()),
        ));
    }

    let samples_path = dir.join("samples");
    let bytes = fs::read(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
    if bytes.len() < 4 || &bytes[..4] != SAMPLES_MAGIC {
        return Err(Error::BadMagic {
            path: samples_path,
            expected: "DGDS".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < 20 {
        return Err(Error::parse(&samples_path, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SAMPLES_VERSION {
        return Err(Error::Version {
            path: samples_path,
            expected: SAMPLES_VERSION,
            found: version,
        });
    }
    let file_count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let file_dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if file_count != count || file_dim != dim {
        return Err(Error::parse(
            &samples_path,
            format!("header says {file_count}×{file_dim}, meta says {count}×{dim}"),
        ));
    }
    let record = 2 + 4 * dim;
    let body = &bytes[20..];
    if body.len() != count * record {
        return Err(Error::parse(
            &samples_path,
            format!("expected {} body bytes, found {}", count * record, body.len()),
        ));
    }
    let mut features = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for rec in body.chunks_exact(record) {
        labels.push(u16::from_le_bytes([rec[0], rec[1]]) as usize);
        features.extend(
            rec[2..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        );
    }
    DomainDataset::new(name, class_names, dim, features, labels)
}
