//! Dataset directory: `listings.jsonl` with one record per line, plus
//! `photos.blemb` (all photo rows stacked) and `text.blemb` (one row per
//! listing). Each line points into the sidecars by row offset.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ListingRecord;
use crate::error::{Error, Result};
use crate::io::{load_embeddings, write_atomic, write_embeddings, Embeddings};
use crate::linalg::Matrix;

pub const LISTINGS_FILE: &str = "listings.jsonl";
pub const PHOTOS_FILE: &str = "photos.blemb";
pub const TEXT_FILE: &str = "text.blemb";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: u64,
    latent: Vec<f64>,
    photo_offset: usize,
    photo_count: usize,
    text_row: usize,
    text_length_proxy: usize,
    attributes: BTreeMap<String, u32>,
}

pub fn save_dataset(dir: &Path, records: &[ListingRecord]) -> Result<()> {
    let (d, d_text) = match records.first() {
        Some(r) => (r.photos.cols(), r.text_features.len()),
        None => return Err(Error::degenerate("refusing to save an empty dataset")),
    };
    std::fs::create_dir_all(dir)?;
    let mut lines = String::new();
    let mut photo_rows: Vec<f64> = Vec::new();
    let mut text_rows: Vec<f64> = Vec::with_capacity(records.len() * d_text);
    let mut offset = 0;
    for (i, r) in records.iter().enumerate() {
        if r.photos.cols() != d || r.text_features.len() != d_text || r.photos.rows() < r.photo_count {
            return Err(Error::shape(
                format!("photos of width {d}, text of width {d_text}"),
                format!("record {} with {}x{} photos", r.id, r.photos.rows(), r.photos.cols()),
            ));
        }
        let line = Line {
            id: r.id,
            latent: r.latent.clone(),
            photo_offset: offset,
            photo_count: r.photo_count,
            text_row: i,
            text_length_proxy: r.text_length_proxy,
            attributes: r.attributes.clone(),
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
        photo_rows.extend_from_slice(&r.photos.as_slice()[..r.photo_count * d]);
        text_rows.extend_from_slice(&r.text_features);
        offset += r.photo_count;
    }
    let photos = Matrix::new(offset, d, photo_rows)?;
    let text = Matrix::new(records.len(), d_text, text_rows)?;
    for (name, m) in [(PHOTOS_FILE, photos), (TEXT_FILE, text)] {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &Embeddings::F32(m))?;
        write_atomic(&dir.join(name), &buf)?;
    }
    write_atomic(&dir.join(LISTINGS_FILE), lines.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ListingRecord>> {
    let photos = load_embeddings(&dir.join(PHOTOS_FILE))?.into_f32()?;
    let text = load_embeddings(&dir.join(TEXT_FILE))?.into_f32()?;
    let raw = std::fs::read_to_string(dir.join(LISTINGS_FILE))?;
    let mut records = Vec::new();
    for (n, l) in raw.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(l)
            .map_err(|e| Error::Format(format!("{LISTINGS_FILE} line {}: {e}", n + 1)))?;
        let end = line.photo_offset.checked_add(line.photo_count);
        if end.is_none_or(|e| e > photos.rows()) || line.text_row >= text.rows() || line.photo_count == 0 {
            return Err(Error::Format(format!(
                "{LISTINGS_FILE} line {}: offsets outside the sidecar files",
                n + 1
            )));
        }
        records.push(ListingRecord {
            id: line.id,
            latent: line.latent,
            photos: photos.slice_rows(line.photo_offset, line.photo_count),
            photo_count: line.photo_count,
            text_features: text.row(line.text_row).to_vec(),
            text_length_proxy: line.text_length_proxy,
            attributes: line.attributes,
        });
    }
    Ok(records)
}
