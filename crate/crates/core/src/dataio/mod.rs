//! Dataset manifests, image loading, ODIR-style ingestion, deterministic
//! synthetic fundus generation, and subject-grouped k-fold splitting.

mod imageio;
mod kfold;
mod odir;
mod synth;

pub use imageio::{load_image, save_image, ImageTensor};
pub use kfold::{kfold_split, KFoldSplit};
pub use odir::ingest_odir;
pub use synth::{load_truth, synth_generate, SynthParams, SynthTruth, TRUTH_FILE};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: [&str; 6] = [
    "image_path",
    "age_years",
    "gender",
    "subject_id",
    "split",
    "source",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gender {
    Male,
    Female,
}

impl std::str::FromStr for Gender {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            other => Err(Error::InvalidInput(format!("unknown gender `{other}`"))),
        }
    }
}

impl std::fmt::Display for Gender {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gender::Male => write!(f, "male"),
            Gender::Female => write!(f, "female"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl std::str::FromStr for SplitTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            "unassigned" | "" => Ok(SplitTag::Unassigned),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
            SplitTag::Unassigned => write!(f, "unassigned"),
        }
    }
}

/// One dataset row: where the image lives and what we know about it.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub image_path: String,
    pub age_years: f64,
    pub gender: Gender,
    pub subject_id: String,
    pub split: SplitTag,
    pub source: String,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image_path.trim().is_empty() {
            return Err(Error::InvalidInput("image_path is empty".into()));
        }
        if !self.age_years.is_finite() || !(1.0..=120.0).contains(&self.age_years) {
            return Err(Error::InvalidInput(format!(
                "age {} outside [1, 120]",
                self.age_years
            )));
        }
        if self.subject_id.trim().is_empty() {
            return Err(Error::InvalidInput("subject_id is empty".into()));
        }
        Ok(())
    }
}

/// Ordered, validated collection of sample records.
#[derive(Clone, Debug)]
pub struct Manifest {
    records: Vec<SampleRecord>,
    provenance: String,
    /// Directory relative image paths resolve against (the manifest's own
    /// location on disk); not serialized.
    base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(records: Vec<SampleRecord>, provenance: impl Into<String>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            r.validate()
                .map_err(|e| Error::InvalidInput(format!("record {i}: {e}")))?;
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.image_path.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate image_path `{}`",
                    r.image_path
                )));
            }
        }
        Ok(Manifest {
            records,
            provenance: provenance.into(),
            base_dir: None,
        })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Absolute path of a record's image file.
    pub fn resolve_path(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            match &self.base_dir {
                Some(dir) => dir.join(p),
                None => p.to_path_buf(),
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut out = String::new();
        out.push_str(&MANIFEST_HEADER.join(","));
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.image_path, r.age_years, r.gender, r.subject_id, r.split, r.source
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Loads and validates a manifest CSV.
///
/// Any row violating the record invariants fails the load; the error lists
/// the offending line numbers.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
            }
            _ => Error::format(&path_str, e.to_string()),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(&path_str, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers != MANIFEST_HEADER {
        return Err(Error::format(
            &path_str,
            format!("expected header {MANIFEST_HEADER:?}, got {headers:?}"),
        ));
    }
    let mut records = Vec::new();
    let mut bad_lines = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::format(&path_str, format!("line {line}: {e}")))?;
        match parse_record(&row) {
            Ok(r) => records.push(r),
            Err(e) => bad_lines.push(format!("line {line}: {e}")),
        }
    }
    if !bad_lines.is_empty() {
        return Err(Error::format(
            &path_str,
            format!("{} invalid row(s): {}", bad_lines.len(), bad_lines.join("; ")),
        ));
    }
    let base = path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    Ok(Manifest::new(records, format!("loaded from {path_str}"))?.with_base_dir(base))
}

fn parse_record(row: &csv::StringRecord) -> Result<SampleRecord> {
    let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
    let age: f64 = field(1)
        .parse()
        .map_err(|_| Error::InvalidInput(format!("age_years `{}` is not a number", field(1))))?;
    let record = SampleRecord {
        image_path: field(0),
        age_years: age,
        gender: field(2).parse()?,
        subject_id: field(3),
        split: field(4).parse()?,
        source: field(5),
    };
    record.validate()?;
    Ok(record)
}

/// Loads every record's image at `size` and stacks an NCHW batch, returning
/// ages and genders in the same order.
pub fn load_batch(
    manifest: &Manifest,
    indices: &[usize],
    size: usize,
) -> Result<(Tensor, Vec<f64>, Vec<Gender>)> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty batch request".into()));
    }
    let mut batch = Tensor::zeros(&[indices.len(), 3, size, size]);
    let plane = 3 * size * size;
    let mut ages = Vec::with_capacity(indices.len());
    let mut genders = Vec::with_capacity(indices.len());
    for (slot, &idx) in indices.iter().enumerate() {
        let record = &manifest.records()[idx];
        let image = load_image(&manifest.resolve_path(record), size)?;
        batch.data_mut()[slot * plane..(slot + 1) * plane].copy_from_slice(image.tensor().data());
        ages.push(record.age_years);
        genders.push(record.gender);
    }
    Ok((batch, ages, genders))
}
