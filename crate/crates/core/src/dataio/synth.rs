//! Deterministic synthetic fundus generator for desk-scale testing.
//!
//! Each image is a dark circular retina field with a bright optic disc and
//! branching vessels. Disc brightness is an exact affine function of age
//! (no noise inside the disc), vessel tortuosity grows with age, and all
//! randomness comes from one seeded stream per image, so re-runs are
//! bit-identical. A `truth.csv` sidecar records each disc's center and
//! radius so tests can audit the rendered features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{save_image, Gender, Manifest, SampleRecord, SplitTag};
use crate::error::{Error, Result};
use crate::nn::init::standard_normal;
use crate::tensor::Tensor;

pub const TRUTH_FILE: &str = "truth.csv";

#[derive(Clone, Debug)]
pub struct SynthParams {
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Inclusive age range; ages are drawn as whole years so distinct ages
    /// always differ by at least one 8-bit brightness step.
    pub age_range: (u32, u32),
    pub vessel_count_range: (usize, usize),
    /// Disc brightness gained per year of age.
    pub disc_brightness_slope: f64,
    /// Vessel wiggle amplitude (radians) gained per year of age.
    pub tortuosity_slope: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            count: 16,
            seed: 42,
            image_size: 64,
            age_range: (10, 80),
            vessel_count_range: (4, 7),
            disc_brightness_slope: 0.005,
            tortuosity_slope: 0.01,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("synth count must be >= 1".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig("synth image_size must be >= 16".into()));
        }
        let (lo, hi) = self.age_range;
        if lo < 1 || hi > 120 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "synth age range [{lo}, {hi}] must lie within [1, 120]"
            )));
        }
        let (vlo, vhi) = self.vessel_count_range;
        if vlo > vhi {
            return Err(Error::InvalidConfig("vessel count range inverted".into()));
        }
        Ok(())
    }
}

/// Ground truth for one generated image.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    pub image_path: String,
    pub age_years: f64,
    pub disc_cx: f64,
    pub disc_cy: f64,
    pub disc_r: f64,
}

/// Renders `count` synthetic fundus PNGs plus `manifest.csv` and
/// `truth.csv` into `out_dir`.
pub fn synth_generate(params: &SynthParams, out_dir: &Path) -> Result<Manifest> {
    params.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::with_capacity(params.count);
    let mut truths = Vec::with_capacity(params.count);
    for i in 0..params.count {
        let mut rng =
            ChaCha8Rng::seed_from_u64(params.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let age = rng.gen_range(params.age_range.0..=params.age_range.1) as f64;
        let gender = if i % 2 == 0 { Gender::Male } else { Gender::Female };
        let file = format!("synth-{i:04}.png");
        let (image, truth) = render_fundus(params, age, &file, &mut rng);
        save_image(&image, &out_dir.join(&file))?;
        truths.push(truth);
        records.push(SampleRecord {
            image_path: file,
            age_years: age,
            gender,
            subject_id: format!("subj-{i:04}"),
            split: SplitTag::Unassigned,
            source: "synth".to_string(),
        });
    }

    write_truth(&truths, &out_dir.join(TRUTH_FILE))?;
    let manifest = Manifest::new(
        records,
        format!(
            "synthetic fundus set: count={} seed={} size={}",
            params.count, params.seed, params.image_size
        ),
    )?
    .with_base_dir(out_dir);
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Reads the ground-truth sidecar back.
pub fn load_truth(path: &Path) -> Result<Vec<SynthTruth>> {
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::format(&path_str, e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(&path_str, e.to_string()))?;
        let get = |i: usize| -> Result<f64> {
            row.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::format(&path_str, "bad numeric field"))
        };
        out.push(SynthTruth {
            image_path: row.get(0).unwrap_or("").to_string(),
            age_years: get(1)?,
            disc_cx: get(2)?,
            disc_cy: get(3)?,
            disc_r: get(4)?,
        });
    }
    Ok(out)
}

fn write_truth(truths: &[SynthTruth], path: &Path) -> Result<()> {
    let mut out = String::from("image_path,age_years,disc_cx,disc_cy,disc_r\n");
    for t in truths {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t.image_path, t.age_years, t.disc_cx, t.disc_cy, t.disc_r
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn render_fundus(
    params: &SynthParams,
    age: f64,
    file: &str,
    rng: &mut ChaCha8Rng,
) -> (Tensor, SynthTruth) {
    let s = params.image_size;
    let sf = s as f64;
    let mut img = Tensor::zeros(&[3, s, s]);
    let center = sf / 2.0;
    let field_r = 0.48 * sf;

    // retina field: dark reddish disc with a gentle radial falloff
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - center;
            let dy = y as f64 - center;
            let r = (dx * dx + dy * dy).sqrt();
            if r <= field_r {
                let fall = 1.0 - 0.35 * (r / field_r);
                put_px(&mut img, s, x, y, [0.32 * fall, 0.10 * fall, 0.05 * fall]);
            }
        }
    }

    // optic disc placement
    let disc_angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let disc_dist = 0.22 * sf;
    let disc_cx = center + disc_dist * disc_angle.cos();
    let disc_cy = center + disc_dist * disc_angle.sin();
    let disc_r = 0.09 * sf * rng.gen_range(0.9..1.1);

    // vessels start at the disc rim and wander outward; tortuosity rises
    // with age
    let n_vessels = rng.gen_range(params.vessel_count_range.0..=params.vessel_count_range.1);
    let amplitude = 0.05 + params.tortuosity_slope * age;
    for _ in 0..n_vessels {
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let freq = rng.gen_range(0.15..0.35);
        draw_vessel(
            &mut img, s, disc_cx, disc_cy, disc_r, heading, amplitude, freq, phase, center,
            field_r, true, rng,
        );
    }

    // optic disc drawn last so its interior is exactly the affine brightness
    let brightness = (0.35 + params.disc_brightness_slope * age).clamp(0.0, 1.0);
    let disc_color = [brightness, brightness * 0.9, brightness * 0.55];
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 - disc_cx;
            let dy = y as f64 - disc_cy;
            let r = (dx * dx + dy * dy).sqrt();
            if r <= disc_r {
                put_px(&mut img, s, x, y, disc_color);
            } else if r <= disc_r + 1.5 {
                let t = (r - disc_r) / 1.5;
                blend_px(&mut img, s, x, y, disc_color, 1.0 - t);
            }
        }
    }

    // seeded sensor noise outside the disc
    let plane = s * s;
    for y in 0..s {
        for x in 0..s {
            let ddx = x as f64 - disc_cx;
            let ddy = y as f64 - disc_cy;
            if (ddx * ddx + ddy * ddy).sqrt() <= disc_r + 1.5 {
                continue;
            }
            let n = 0.01 * standard_normal(rng);
            for c in 0..3 {
                let v = &mut img.data_mut()[c * plane + y * s + x];
                *v = (*v + n).clamp(0.0, 1.0);
            }
        }
    }

    (
        img,
        SynthTruth {
            image_path: file.to_string(),
            age_years: age,
            disc_cx,
            disc_cy,
            disc_r,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn draw_vessel(
    img: &mut Tensor,
    s: usize,
    disc_cx: f64,
    disc_cy: f64,
    disc_r: f64,
    heading: f64,
    amplitude: f64,
    freq: f64,
    phase: f64,
    center: f64,
    field_r: f64,
    allow_branch: bool,
    rng: &mut ChaCha8Rng,
) {
    let mut x = disc_cx + disc_r * heading.cos();
    let mut y = disc_cy + disc_r * heading.sin();
    let color = [0.45, 0.08, 0.05];
    let branch_at = rng.gen_range(20..60);
    let mut branch: Option<(f64, f64, f64)> = None;
    for t in 0..200 {
        let angle = heading + amplitude * (freq * t as f64 + phase).sin();
        x += angle.cos();
        y += angle.sin();
        let dxc = x - center;
        let dyc = y - center;
        if (dxc * dxc + dyc * dyc).sqrt() >= field_r {
            break;
        }
        // keep vessels out of the disc so its brightness stays exact
        let ddx = x - disc_cx;
        let ddy = y - disc_cy;
        if (ddx * ddx + ddy * ddy).sqrt() > disc_r + 1.5 {
            stamp(img, s, x, y, color);
        }
        if allow_branch && t == branch_at {
            branch = Some((x, y, angle + rng.gen_range(-0.9..0.9f64).signum() * 0.7));
        }
    }
    if let Some((bx, by, bangle)) = branch {
        let mut x = bx;
        let mut y = by;
        for t in 0..120 {
            let angle = bangle + 0.8 * amplitude * (freq * t as f64 + phase + 1.0).sin();
            x += angle.cos();
            y += angle.sin();
            let dxc = x - center;
            let dyc = y - center;
            if (dxc * dxc + dyc * dyc).sqrt() >= field_r {
                break;
            }
            let ddx = x - disc_cx;
            let ddy = y - disc_cy;
            if (ddx * ddx + ddy * ddy).sqrt() > disc_r + 1.5 {
                stamp(img, s, x, y, color);
            }
        }
    }
}

fn stamp(img: &mut Tensor, s: usize, x: f64, y: f64, color: [f64; 3]) {
    let xi = x.round() as isize;
    let yi = y.round() as isize;
    for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
        let px = xi + dx;
        let py = yi + dy;
        if px >= 0 && py >= 0 && (px as usize) < s && (py as usize) < s {
            put_px(img, s, px as usize, py as usize, color);
        }
    }
}

fn put_px(img: &mut Tensor, s: usize, x: usize, y: usize, color: [f64; 3]) {
    let plane = s * s;
    for (c, &v) in color.iter().enumerate() {
        img.data_mut()[c * plane + y * s + x] = v;
    }
}

fn blend_px(img: &mut Tensor, s: usize, x: usize, y: usize, color: [f64; 3], alpha: f64) {
    let plane = s * s;
    for (c, &v) in color.iter().enumerate() {
        let slot = &mut img.data_mut()[c * plane + y * s + x];
        *slot = *slot * (1.0 - alpha) + v * alpha;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::load_image;
    use sha2::{Digest, Sha256};

    fn dir_hash(dir: &Path) -> String {
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        names.sort();
        let mut hasher = Sha256::new();
        for p in names {
            hasher.update(std::fs::read(&p).unwrap());
        }
        format!("{:x}", hasher.finalize())
    }

    #[test]
    fn rerun_is_bit_identical() {
        let params = SynthParams {
            count: 8,
            seed: 42,
            image_size: 48,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synth_generate(&params, d1.path()).unwrap();
        let m2 = synth_generate(&params, d2.path()).unwrap();
        assert_eq!(m1.len(), 8);
        assert_eq!(m2.len(), 8);
        assert_eq!(dir_hash(d1.path()), dir_hash(d2.path()));

        let other = SynthParams { seed: 43, ..params };
        let d3 = tempfile::tempdir().unwrap();
        synth_generate(&other, d3.path()).unwrap();
        assert_ne!(dir_hash(d1.path()), dir_hash(d3.path()));
    }

    #[test]
    fn singleton_manifest() {
        let params = SynthParams {
            count: 1,
            image_size: 32,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&params, dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert!(dir.path().join("synth-0000.png").exists());
        assert!(dir.path().join("manifest.csv").exists());
        assert!(dir.path().join(TRUTH_FILE).exists());
    }

    #[test]
    fn disc_brightness_increases_with_age() {
        for seed in [1u64, 7, 20] {
            let params = SynthParams {
                count: 12,
                seed,
                image_size: 64,
                disc_brightness_slope: 0.005,
                ..Default::default()
            };
            let dir = tempfile::tempdir().unwrap();
            synth_generate(&params, dir.path()).unwrap();
            let truths = load_truth(&dir.path().join(TRUTH_FILE)).unwrap();

            // group by age, then require strict increase across distinct ages
            let mut by_age: std::collections::BTreeMap<i64, Vec<f64>> = Default::default();
            for t in &truths {
                let img = load_image(&dir.path().join(&t.image_path), params.image_size).unwrap();
                let s = params.image_size;
                let plane = s * s;
                let mut sum = 0.0;
                let mut n = 0usize;
                for y in 0..s {
                    for x in 0..s {
                        let ddx = x as f64 - t.disc_cx;
                        let ddy = y as f64 - t.disc_cy;
                        if (ddx * ddx + ddy * ddy).sqrt() <= t.disc_r - 1.0 {
                            sum += img.tensor().data()[y * s + x]; // red channel
                            n += 1;
                        }
                    }
                }
                let _ = plane;
                by_age.entry(t.age_years as i64).or_default().push(sum / n as f64);
            }
            let means: Vec<f64> = by_age
                .values()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .collect();
            assert!(means.len() >= 2, "need at least two distinct ages");
            for w in means.windows(2) {
                assert!(
                    w[1] > w[0],
                    "seed {seed}: disc intensity not strictly increasing: {means:?}"
                );
            }
        }
    }

    #[test]
    fn params_validation() {
        let mut p = SynthParams::default();
        p.count = 0;
        assert!(p.validate().is_err());
        let mut p = SynthParams::default();
        p.age_range = (0, 50);
        assert!(p.validate().is_err());
        let mut p = SynthParams::default();
        p.age_range = (60, 50);
        assert!(p.validate().is_err());
    }
}
