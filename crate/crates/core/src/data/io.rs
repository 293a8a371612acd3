//! On-disk dataset layout.
//!
//! A dataset directory holds PNG images and a `manifest.txt` with one
//! tab-separated record per sample:
//!
//! ```text
//! # id	fundus	oct	vf	label	present
//! syn-0-0000	images/syn-0-0000_fundus.png	images/syn-0-0000_oct.png	images/syn-0-0000_vf.png	0	111
//! ```
//!
//! Paths are relative to the manifest's directory. An absent modality is
//! written as `-` with a `0` presence bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};

use super::{denormalize_rgb8, normalize_rgb8, Image, Modality, MultimodalSample, NUM_MODALITIES};
use crate::error::{HammError, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
const HEADER: &str = "# id\tfundus\toct\tvf\tlabel\tpresent";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative image paths; `None` for an absent modality.
    pub paths: [Option<String>; NUM_MODALITIES],
    pub label: u8,
}

impl ManifestRecord {
    fn to_line(&self) -> String {
        let p = |m: usize| self.paths[m].clone().unwrap_or_else(|| "-".into());
        let bits: String = self
            .paths
            .iter()
            .map(|p| if p.is_some() { '1' } else { '0' })
            .collect();
        format!("{}\t{}\t{}\t{}\t{}\t{}", self.id, p(0), p(1), p(2), self.label, bits)
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let bad = |why: &str| HammError::Data(format!("manifest line {lineno}: {why}: '{line}'"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad("expected 6 tab-separated fields"));
        }
        let label: u8 = fields[4].parse().map_err(|_| bad("label is not an integer"))?;
        let bits: Vec<char> = fields[5].chars().collect();
        if bits.len() != 3 || bits.iter().any(|c| *c != '0' && *c != '1') {
            return Err(bad("presence must be three 0/1 bits"));
        }
        let mut paths: [Option<String>; 3] = Default::default();
        for m in 0..3 {
            let present = bits[m] == '1';
            let path = fields[1 + m];
            match (present, path) {
                (true, "-") => return Err(bad("present modality without a path")),
                (true, p) => paths[m] = Some(p.to_string()),
                (false, _) => {}
            }
        }
        Ok(Self {
            id: fields[0].to_string(),
            paths,
            label,
        })
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::with_capacity(records.len() * 96);
    let _ = writeln!(text, "{HEADER}");
    for r in records {
        let _ = writeln!(text, "{}", r.to_line());
    }
    fs::write(path, text).map_err(|e| HammError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| HammError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| ManifestRecord::parse(l, i + 1))
        .collect()
}

fn manifest_path(root: &Path) -> PathBuf {
    if root.is_dir() {
        root.join(MANIFEST_NAME)
    } else {
        root.to_path_buf()
    }
}

/// Writes `samples` as PNG files under `root/images` plus `root/manifest.txt`.
pub fn write_dataset(root: &Path, samples: &[MultimodalSample]) -> Result<()> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| HammError::io(&images, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let mut paths: [Option<String>; 3] = Default::default();
        for m in Modality::ALL {
            if !s.is_present(m) {
                continue;
            }
            let rel = format!("images/{}_{}.png", s.id, m.name());
            let size = s.image_size() as u32;
            let img = RgbImage::from_raw(size, size, denormalize_rgb8(s.image(m)))
                .ok_or_else(|| HammError::Data(format!("sample {}: bad image buffer", s.id)))?;
            let full = root.join(&rel);
            img.save(&full)
                .map_err(|e| HammError::Data(format!("writing {}: {e}", full.display())))?;
            paths[m.index()] = Some(rel);
        }
        records.push(ManifestRecord {
            id: s.id.clone(),
            paths,
            label: s.label,
        });
    }
    write_manifest(&root.join(MANIFEST_NAME), &records)
}

fn load_image(path: &Path, size: Option<usize>) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| HammError::Data(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let img = match size {
        Some(s) if img.width() as usize != s || img.height() as usize != s => {
            image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle)
        }
        _ => img,
    };
    if img.width() != img.height() {
        return Err(HammError::Data(format!(
            "{} is {}x{}; square images expected",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(normalize_rgb8(img.as_raw(), img.width() as usize))
}

/// Loads every record of a manifest (or of `dir/manifest.txt`), resizing to
/// `size` when given.
pub fn read_dataset(root: &Path, size: Option<usize>) -> Result<Vec<MultimodalSample>> {
    let manifest = manifest_path(root);
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let records = read_manifest(&manifest)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut loaded: [Option<Image>; 3] = Default::default();
        for m in 0..3 {
            if let Some(p) = &r.paths[m] {
                loaded[m] = Some(load_image(&base.join(p), size)?);
            }
        }
        let side = loaded
            .iter()
            .flatten()
            .map(|i| i.shape()[1])
            .next()
            .ok_or_else(|| HammError::Data(format!("sample {} has no modality", r.id)))?;
        let present = [loaded[0].is_some(), loaded[1].is_some(), loaded[2].is_some()];
        let [f, o, v] = loaded.map(|i| i.unwrap_or_else(|| Image::zeros((3, side, side))));
        let s = MultimodalSample {
            id: r.id,
            label: r.label,
            images: [f, o, v],
            present,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
