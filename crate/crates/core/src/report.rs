//! Output emission: atomic writes, provenance-stamped JSON/CSV/PNG, and the
//! per-run manifest.
//!
//! Every file written through [`OutputWriter`] carries the full run
//! configuration and a SHA-256 of its content. JSON files wrap their payload
//! as `{"config", "content_hash", "data"}`; CSV files start with `#` comment
//! lines; PNGs carry `tEXt` chunks. The hash covers the payload only (JSON in
//! canonical form, CSV body, raw pixels), so equal inputs and config give
//! equal hashes and [`verify_file`] can recheck a file from disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{RgbImage, RgbaImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(Error::at(parent))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(Error::at(&tmp))?;
        f.write_all(bytes).map_err(Error::at(&tmp))?;
        f.sync_all().map_err(Error::at(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(Error::at(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_png(
    width: u32,
    height: u32,
    color: png::ColorType,
    data: &[u8],
    text: &[(&str, &str)],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk((*k).to_string(), (*v).to_string())
                .map_err(|e| Error::InvalidInput(format!("png text chunk: {e}")))?;
        }
        let mut w = enc
            .write_header()
            .map_err(|e| Error::InvalidInput(format!("png header: {e}")))?;
        w.write_image_data(data)
            .map_err(|e| Error::InvalidInput(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Saves an RGB PNG with optional `tEXt` chunks.
pub fn save_png(path: &Path, image: &RgbImage, text: &[(&str, &str)]) -> Result<()> {
    let bytes = encode_png(
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        image.as_raw(),
        text,
    )?;
    write_atomic(path, &bytes)
}

pub fn save_rgba_png(path: &Path, image: &RgbaImage, text: &[(&str, &str)]) -> Result<()> {
    let bytes = encode_png(
        image.width(),
        image.height(),
        png::ColorType::Rgba,
        image.as_raw(),
        text,
    )?;
    write_atomic(path, &bytes)
}

/// Hash of the canonical (sorted-key, compact) JSON form of `data`, so a
/// payload read back from disk hashes the same as the value that was written.
pub fn json_hash<T: Serialize + ?Sized>(data: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(&serde_json::to_value(data)?)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub content_hash: String,
}

#[derive(Serialize)]
struct Stamped<'a, C: Serialize, T: Serialize> {
    config: &'a C,
    content_hash: String,
    data: &'a T,
}

/// Writes provenance-stamped outputs under one directory.
pub struct OutputWriter<C: Serialize> {
    dir: PathBuf,
    config: C,
    config_json: String,
    entries: Vec<ManifestEntry>,
}

impl<C: Serialize> OutputWriter<C> {
    pub fn new(dir: impl Into<PathBuf>, config: C) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(Error::at(&dir))?;
        let config_json = serde_json::to_string(&config)?;
        Ok(Self {
            dir,
            config,
            config_json,
            entries: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, name: &str, hash: String) {
        self.entries.retain(|e| e.file != name);
        self.entries.push(ManifestEntry {
            file: name.to_string(),
            content_hash: hash,
        });
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<PathBuf> {
        let hash = json_hash(data)?;
        let stamped = Stamped {
            config: &self.config,
            content_hash: hash.clone(),
            data,
        };
        let mut bytes = serde_json::to_vec_pretty(&stamped)?;
        bytes.push(b'\n');
        let path = self.dir.join(name);
        write_atomic(&path, &bytes)?;
        self.record(name, hash);
        Ok(path)
    }

    /// CSV with a header row; `#` comment lines carry the config and hash.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let body = w
            .into_inner()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let hash = sha256_hex(&body);
        let mut bytes = format!("# config: {}\n# content_hash: {}\n", self.config_json, hash).into_bytes();
        bytes.extend_from_slice(&body);
        let path = self.dir.join(name);
        write_atomic(&path, &bytes)?;
        self.record(name, hash);
        Ok(path)
    }

    pub fn write_png(&mut self, name: &str, image: &RgbImage) -> Result<PathBuf> {
        let hash = sha256_hex(image.as_raw());
        let path = self.dir.join(name);
        save_png(
            &path,
            image,
            &[("config", &self.config_json), ("content_hash", &hash)],
        )?;
        self.record(name, hash);
        Ok(path)
    }

    pub fn write_rgba_png(&mut self, name: &str, image: &RgbaImage) -> Result<PathBuf> {
        let hash = sha256_hex(image.as_raw());
        let path = self.dir.join(name);
        save_rgba_png(
            &path,
            image,
            &[("config", &self.config_json), ("content_hash", &hash)],
        )?;
        self.record(name, hash);
        Ok(path)
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Writes `manifest.json` listing every file and its hash, sorted by name.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.entries.sort_by(|a, b| a.file.cmp(&b.file));
        let entries = std::mem::take(&mut self.entries);
        self.write_json("manifest.json", &entries)
    }
}

/// Entries of `dir/manifest.json`.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.json");
    let v: serde_json::Value = serde_json::from_slice(&fs::read(&path).map_err(Error::at(&path))?)?;
    let data = v
        .get("data")
        .cloned()
        .ok_or_else(|| Error::Format(format!("{}: no data field", path.display())))?;
    Ok(serde_json::from_value(data)?)
}

/// Recomputes the payload hash of a file written by [`OutputWriter`].
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::at(path))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let v: serde_json::Value = serde_json::from_slice(&bytes)?;
            let data = v
                .get("data")
                .ok_or_else(|| Error::Format(format!("{}: no data field", path.display())))?;
            json_hash(data)
        }
        Some("csv") => {
            let mut rest = &bytes[..];
            while rest.first() == Some(&b'#') {
                let end = rest.iter().position(|b| *b == b'\n').map_or(rest.len(), |i| i + 1);
                rest = &rest[end..];
            }
            Ok(sha256_hex(rest))
        }
        Some("png") => {
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?;
            Ok(match img {
                image::DynamicImage::ImageRgba8(i) => sha256_hex(i.as_raw()),
                other => sha256_hex(other.to_rgb8().as_raw()),
            })
        }
        _ => Err(Error::Format(format!("{}: unknown output type", path.display()))),
    }
}

/// Whether the file under `dir` still matches its manifest hash.
pub fn verify_file(dir: &Path, entry: &ManifestEntry) -> Result<bool> {
    Ok(file_hash(&dir.join(&entry.file))? == entry.content_hash)
}
