//! Cross-validation tables and age-progression difference grids.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataio::{load_image, save_image};
use crate::error::{Error, Result};
use crate::metrics::MetricTable;
use crate::tensor::Tensor;
use crate::trainer::{load_model, LoadedModel};

/// Builds an FCV table from per-fold rows and appends an `Average` row
/// computed as the arithmetic mean per column.
pub fn cv_table(columns: &[&str], fold_rows: &[(String, Vec<f64>)]) -> Result<MetricTable> {
    if fold_rows.is_empty() {
        return Err(Error::InvalidInput("no fold rows given".into()));
    }
    let mut table = MetricTable::new(columns);
    let mut sums = vec![0.0; columns.len()];
    for (label, values) in fold_rows {
        if values.len() != columns.len() {
            return Err(Error::InvalidInput(format!(
                "row `{label}` has {} values for {} columns",
                values.len(),
                columns.len()
            )));
        }
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
        table.push_row(label.clone(), values.clone())?;
    }
    let n = fold_rows.len() as f64;
    table.push_row("Average", sums.into_iter().map(|s| s / n).collect())?;
    Ok(table)
}

/// Elementwise absolute difference of two equal-shaped images in [0, 1].
pub fn difference_map(original: &Tensor, generated: &Tensor) -> Result<Tensor> {
    if original.shape() != generated.shape() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            original.shape(),
            generated.shape()
        )));
    }
    let mut out = original.clone();
    for (o, g) in out.data_mut().iter_mut().zip(generated.data()) {
        *o = (*o - g).abs();
    }
    Ok(out)
}

/// One progression run: the source image and, per age, the generated image
/// and its difference map against the source.
pub struct ProgressionGrid {
    pub source: Tensor,
    pub panels: Vec<(f64, Tensor, Tensor)>,
    pub grid: Tensor,
}

/// Min-max stretches a difference panel into the full [0, 1] range;
/// returns the panel plus the (min, max) recorded in the metadata.
fn contrast_stretch(panel: &Tensor) -> (Tensor, f64, f64) {
    let min = panel.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = panel.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = panel.clone();
    if max > min {
        let scale = 1.0 / (max - min);
        out.data_mut().iter_mut().for_each(|v| *v = (*v - min) * scale);
    }
    (out, min, max)
}

/// Lays panels out in one row, left to right, with a thin separator.
fn compose_row(panels: &[&Tensor]) -> Tensor {
    let (c, h, w) = (panels[0].shape()[0], panels[0].shape()[1], panels[0].shape()[2]);
    let sep = 2usize;
    let total_w = panels.len() * w + (panels.len() - 1) * sep;
    let mut grid = Tensor::full(&[c, h, total_w], 1.0);
    for (i, panel) in panels.iter().enumerate() {
        let x0 = i * (w + sep);
        for ci in 0..c {
            for y in 0..h {
                let src = &panel.data()[ci * h * w + y * w..][..w];
                let dst_start = ci * h * total_w + y * total_w + x0;
                grid.data_mut()[dst_start..dst_start + w].copy_from_slice(src);
            }
        }
    }
    grid
}

/// Loads an FGC-Net checkpoint, generates one image per age from one input
/// fundus, and writes a Fig-4-style row grid: the source first, then the
/// per-age difference maps in ascending age order. Per-age difference PNGs
/// and a JSON metadata sidecar land next to the grid.
pub fn progression_grid(
    checkpoint_path: &Path,
    image_path: &Path,
    ages: &[f64],
    seed: u64,
    out_path: &Path,
    stretch: bool,
) -> Result<ProgressionGrid> {
    if ages.is_empty() {
        return Err(Error::InvalidInput("age list is empty".into()));
    }
    let (model, run) = load_model(checkpoint_path)?;
    let net = match model {
        LoadedModel::Fgc(net, store) => Some((net, store)),
        LoadedModel::Fag(..) => None,
    };
    let (net, store) =
        net.ok_or_else(|| Error::Incompatible("progression grids need an fgcnet checkpoint".into()))?;

    let image = load_image(image_path, run.fgcnet.input_size)?;
    let source = image.tensor().clone();
    let mut sorted_ages = ages.to_vec();
    sorted_ages.sort_by(|a, b| a.partial_cmp(b).expect("ages are finite"));

    let generated = net.generate_progression(&store, &source, &sorted_ages, seed)?;
    let mut panels = Vec::with_capacity(sorted_ages.len());
    let mut metadata_panels = Vec::new();
    for (age, g) in sorted_ages.iter().zip(generated) {
        let s = run.fgcnet.input_size;
        let flat = g.reshape(&[3, s, s])?;
        let diff = difference_map(&source, &flat)?;
        let (display, lo, hi) = if stretch {
            contrast_stretch(&diff)
        } else {
            (diff.clone(), 0.0, 1.0)
        };
        metadata_panels.push(serde_json::json!({
            "age": age,
            "panel_min": lo,
            "panel_max": hi,
        }));
        panels.push((*age, flat, diff, display));
    }

    let mut row: Vec<&Tensor> = vec![&source];
    for (_, _, _, display) in &panels {
        row.push(display);
    }
    let grid = compose_row(&row);
    save_image(&grid, out_path)?;

    let stem = out_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "grid".to_string());
    let parent = out_path.parent().map(|p| p.to_path_buf()).unwrap_or_default();
    for (age, generated, diff, _) in &panels {
        save_image(generated, &parent.join(format!("{stem}-age{age:.0}-generated.png")))?;
        save_image(diff, &parent.join(format!("{stem}-age{age:.0}-diff.png")))?;
    }

    let checkpoint_hash = {
        let bytes = std::fs::read(checkpoint_path).map_err(|e| Error::io(checkpoint_path, e))?;
        format!("{:x}", Sha256::digest(&bytes))
    };
    let metadata = serde_json::json!({
        "ages": sorted_ages,
        "seed": seed,
        "checkpoint": checkpoint_path.display().to_string(),
        "checkpoint_sha256": checkpoint_hash,
        "contrast_stretch": stretch,
        "panels": metadata_panels,
    });
    let meta_path = parent.join(format!("{stem}.json"));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&metadata).expect("valid json"))
        .map_err(|e| Error::io(&meta_path, e))?;

    Ok(ProgressionGrid {
        source,
        panels: panels
            .into_iter()
            .map(|(age, gen, diff, _)| (age, gen, diff))
            .collect(),
        grid,
    })
}
