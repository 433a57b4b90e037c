//! Ingestion of ODIR-style metadata tables (one row per patient with left
//! and right fundus file names, age and sex columns).

use std::path::Path;

use crate::dataio::{Gender, Manifest, SampleRecord, SplitTag};
use crate::error::{Error, Result};

/// Builds a manifest from an ODIR-style CSV and an image directory.
///
/// Column names are matched case-insensitively: an `id` column, one
/// containing `age`, one containing `sex` or `gender`, and the left/right
/// fundus file-name columns (containing `left`/`right` and `fundus`).
/// Left and right eyes of one patient share a subject id. Rows whose image
/// files are missing are skipped and counted in the provenance note.
pub fn ingest_odir(metadata_file: &Path, image_dir: &Path) -> Result<Manifest> {
    let path_str = metadata_file.display().to_string();
    let mut reader = csv::Reader::from_path(metadata_file).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            metadata_file,
            std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        ),
        _ => Error::format(&path_str, e.to_string()),
    })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(&path_str, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();

    let find = |pred: &dyn Fn(&str) -> bool, what: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| pred(h))
            .ok_or_else(|| Error::format(&path_str, format!("no {what} column found")))
    };
    let id_col = find(&|h| h == "id" || h == "patient id" || h == "patient_id", "patient id")?;
    let age_col = find(&|h| h.contains("age"), "age")?;
    let sex_col = find(&|h| h.contains("sex") || h.contains("gender"), "sex")?;
    let left_col = find(&|h| h.contains("left") && h.contains("fundus"), "left fundus")?;
    let right_col = find(&|h| h.contains("right") && h.contains("fundus"), "right fundus")?;

    let mut records = Vec::new();
    let mut missing_files = 0usize;
    let mut skipped_rows = 0usize;
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(&path_str, e.to_string()))?;
        let get = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let subject = get(id_col);
        let age: f64 = match get(age_col).parse() {
            Ok(a) => a,
            Err(_) => {
                skipped_rows += 1;
                continue;
            }
        };
        let gender: Gender = match get(sex_col).parse() {
            Ok(g) => g,
            Err(_) => {
                skipped_rows += 1;
                continue;
            }
        };
        if subject.is_empty() || !(1.0..=120.0).contains(&age) {
            skipped_rows += 1;
            continue;
        }
        for file in [get(left_col), get(right_col)] {
            if file.is_empty() {
                continue;
            }
            if image_dir.join(&file).exists() {
                records.push(SampleRecord {
                    image_path: file,
                    age_years: age,
                    gender,
                    subject_id: subject.clone(),
                    split: SplitTag::Unassigned,
                    source: "odir".to_string(),
                });
            } else {
                missing_files += 1;
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyIngest(format!(
            "no images from {path_str} were found under {}",
            image_dir.display()
        )));
    }
    let provenance = format!(
        "odir ingest from {path_str}: {} records, {missing_files} missing image file(s) skipped, \
         {skipped_rows} unusable metadata row(s) skipped",
        records.len()
    );
    Ok(Manifest::new(records, provenance)?.with_base_dir(image_dir))
}
