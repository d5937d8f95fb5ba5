//! On-disk layout of prepared splits and loss curves.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cmsr_core::checkpoint;
use cmsr_core::data::{synth_textures, tensor_checksum, Dataset, DatasetManifest, ImageRecord, Split};
use cmsr_core::distill::LossRecord;
use cmsr_core::params::ParamSet;

use crate::config::{Config, DataSource};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.ckpt";

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub fn split_dir(cfg: &Config, split: Split) -> PathBuf {
    cfg.data_dir().join(split_name(split))
}

/// Writes `manifest.json` and the pixel tensors of every record.
pub fn save_split(dir: &Path, manifest: &DatasetManifest, records: &[ImageRecord]) -> Result<(), CliError> {
    let mut set = ParamSet::new();
    for r in records {
        set.insert(r.id.clone(), r.pixels.clone())?;
    }
    checkpoint::save(&dir.join(RECORDS_FILE), &set)?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

/// Reads a prepared split, recomputing every low-resolution image and
/// checking each record against its manifest checksum.
pub fn load_split(dir: &Path) -> Result<(DatasetManifest, Dataset), CliError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let set = checkpoint::load(&dir.join(RECORDS_FILE))?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let pixels = set
            .get(&entry.id)
            .ok_or_else(|| CliError::Data(format!("record {} listed in the manifest is missing", entry.id)))?;
        if format!("{:016x}", tensor_checksum(pixels)) != entry.checksum {
            return Err(CliError::Data(format!("record {} does not match its manifest checksum", entry.id)));
        }
        records.push(ImageRecord::new(entry.id.clone(), pixels.clone(), entry.source_path.clone())?);
    }
    Ok((manifest, Dataset::new(records)?))
}

/// The configured split: prepared on disk if present, otherwise generated
/// textures when the data source allows it.
pub fn dataset(cfg: &Config, split: Split) -> Result<Dataset, CliError> {
    let dir = split_dir(cfg, split);
    if dir.join(MANIFEST_FILE).exists() {
        let (manifest, data) = load_split(&dir)?;
        if manifest.size != cfg.data.image_size {
            return Err(CliError::Data(format!(
                "{} holds {}x{} images, data.image_size is {}",
                dir.display(),
                manifest.size,
                manifest.size,
                cfg.data.image_size
            )));
        }
        if data.is_empty() {
            return Err(CliError::Data(format!("{} holds no records", dir.display())));
        }
        return Ok(data);
    }
    match cfg.data.source {
        DataSource::Textures => Ok(Dataset::new(synthetic_records(cfg, split)?)?),
        DataSource::Prepared => Err(CliError::Data(format!(
            "no prepared {} split at {}; run `cmsr etl` first",
            split_name(split),
            dir.display()
        ))),
    }
}

pub fn synthetic_records(cfg: &Config, split: Split) -> Result<Vec<ImageRecord>, CliError> {
    let d = &cfg.data;
    let (count, seed) = match split {
        Split::Train => (d.train_count, d.train_seed),
        Split::Test => (d.test_count, d.test_seed),
    };
    Ok(synth_textures(d.texture_modes, d.image_size, count, seed)?)
}

/// Writes a loss curve as JSON lines. When resuming at `resume_from`, earlier
/// lines of an existing file up to that step are kept.
pub fn write_loss_curve(path: &Path, records: &[LossRecord], resume_from: Option<u64>) -> Result<(), CliError> {
    let mut kept: Vec<LossRecord> = Vec::new();
    if let (Some(k), true) = (resume_from, path.exists()) {
        for line in BufReader::new(std::fs::File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: LossRecord = serde_json::from_str(&line)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if r.step <= k {
                kept.push(r);
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in kept.iter().chain(records) {
        writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossRecord>, CliError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// FNV-1a of a file's bytes as 16 hex digits.
pub fn file_checksum(path: &Path) -> Result<String, CliError> {
    Ok(format!("{:016x}", checkpoint::checksum(&std::fs::read(path)?)))
}
