//! Synthetic "brain-like" slices for desk-scale runs.
//!
//! Every image is an elliptical blob with a bright rim, a textured interior
//! and mild boundary wobble. Class 1 images have the inner part of the rim
//! carved out inside a fixed upper-left sector (the cue region), leaving a
//! thinner rim behind a dark gap whose depth is `cue_strength`. The control
//! region is the cue region reflected through the image centre, so both
//! have the same pixel count.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{write_pgm, GrayImage};
use super::{write_manifest, Dataset, GroupName, Manifest, Plane, SliceRecord};
use crate::error::{Error, Result};
use crate::tensor::Prng;

const RADIUS_Y: f64 = 0.36;
const RADIUS_X: f64 = 0.42;
const CUE_ANGLE: f64 = 135.0;
const CUE_HALF_WIDTH: f64 = 35.0;
const CUE_INNER: f64 = 0.70;
const CUE_OUTER: f64 = 1.0;
const RIM_LEVEL: f64 = 0.85;
const INTERIOR_LEVEL: f64 = 0.45;
const NOISE_SD: f64 = 0.02;
/// Centre and width of the carved gap, in normalised radius.
const GAP_CENTRE: f64 = 0.82;
const GAP_WIDTH: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub cue_strength: f64,
    /// Multiplier applied to the finished image, noise included.
    pub brightness: f64,
    pub plane: Plane,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { seed: 0, n: 200, height: 96, width: 96, cue_strength: 0.8, brightness: 1.0, plane: Plane::Midsagittal }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !self.n.is_multiple_of(2) {
            return Err(Error::Parameter(format!("n must be even and positive, got {}", self.n)));
        }
        if !(self.cue_strength > 0.0 && self.cue_strength <= 1.0) {
            return Err(Error::Parameter(format!("cue_strength must be in (0, 1], got {}", self.cue_strength)));
        }
        if !(self.brightness > 0.0 && self.brightness <= 1.0) {
            return Err(Error::Parameter(format!("brightness must be in (0, 1], got {}", self.brightness)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Parameter(format!("image must be at least 8x8, got {}x{}", self.height, self.width)));
        }
        Ok(())
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Offset from the nominal centre, scaled by the nominal radii.
fn nominal_coords(h: usize, w: usize, row: usize, col: usize) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    ((row as f64 - cy) / (RADIUS_Y * h as f64), (col as f64 - cx) / (RADIUS_X * w as f64))
}

/// Row-major `[H, W]` mask of the cue region.
pub fn cue_region_mask(h: usize, w: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let (dy, dx) = nominal_coords(h, w, row, col);
            let rho = dy.hypot(dx);
            // Angle measured counter-clockwise from +x with up as positive.
            let angle = (-dy).atan2(dx).to_degrees();
            mask.push((CUE_INNER..=CUE_OUTER).contains(&rho) && (angle - CUE_ANGLE).abs() <= CUE_HALF_WIDTH);
        }
    }
    mask
}

/// Point reflection of the cue region through the image centre.
pub fn control_region_mask(h: usize, w: usize) -> Vec<bool> {
    let cue = cue_region_mask(h, w);
    (0..h * w).map(|i| cue[h * w - 1 - i]).collect()
}

struct Bump {
    y: f64,
    x: f64,
    amp: f64,
    inv_two_var: f64,
}

fn render(spec: &SynthSpec, class: usize, cue: &[bool], rng: &mut Prng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let cy = (h as f64 - 1.0) / 2.0 + rng.uniform(-0.02, 0.02) * h as f64;
    let cx = (w as f64 - 1.0) / 2.0 + rng.uniform(-0.02, 0.02) * w as f64;
    let ry = RADIUS_Y * h as f64 * (1.0 + rng.uniform(-0.03, 0.03));
    let rx = RADIUS_X * w as f64 * (1.0 + rng.uniform(-0.03, 0.03));
    let harmonics: Vec<(f64, f64, f64)> =
        (3..=5).map(|k| (k as f64, rng.uniform(0.0, 0.01), rng.uniform(0.0, 2.0 * PI))).collect();
    let scale = h.min(w) as f64;
    let bumps: Vec<Bump> = (0..4)
        .map(|_| {
            let s = rng.uniform(0.08, 0.15) * scale;
            Bump {
                y: cy + rng.uniform(-0.5, 0.5) * ry,
                x: cx + rng.uniform(-0.5, 0.5) * rx,
                amp: rng.uniform(-0.08, 0.08),
                inv_two_var: 1.0 / (2.0 * s * s),
            }
        })
        .collect();
    let gap_depth = if class == 1 { spec.cue_strength } else { 0.0 };

    let mut pixels = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let dy = (row as f64 - cy) / ry;
            let dx = (col as f64 - cx) / rx;
            let theta = dy.atan2(dx);
            let wobble: f64 = 1.0 + harmonics.iter().map(|&(k, a, p)| a * (k * theta + p).cos()).sum::<f64>();
            let rho = dy.hypot(dx) / wobble;

            let texture: f64 = bumps
                .iter()
                .map(|b| {
                    let d2 = (row as f64 - b.y).powi(2) + (col as f64 - b.x).powi(2);
                    b.amp * (-d2 * b.inv_two_var).exp()
                })
                .sum();
            let interior = INTERIOR_LEVEL + texture;
            let inside = interior + (RIM_LEVEL - interior) * smoothstep(0.76, 0.82, rho);
            let support = 1.0 - smoothstep(0.97, 1.03, rho);
            let mut v = inside * support;
            if cue[row * w + col] {
                v *= 1.0 - gap_depth * (-((rho - GAP_CENTRE) / GAP_WIDTH).powi(2)).exp();
            }
            // Noise lives on the tissue only; the background stays clean.
            v = (v + NOISE_SD * support * rng.normal()) * spec.brightness;
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    pixels
}

fn group_for(i: usize) -> GroupName {
    match i % 4 {
        1 | 3 => GroupName::Ad,
        0 => GroupName::SMci,
        _ => GroupName::PMci,
    }
}

/// Generate the dataset in memory. Record `source_path`s are relative to
/// the dataset root (`images/synth_XXXX.pgm`).
pub fn synth_images(spec: &SynthSpec) -> Result<(Dataset, Vec<GrayImage>)> {
    spec.validate()?;
    let cue = cue_region_mask(spec.height, spec.width);
    let mut rng = Prng::new(spec.seed);
    let mut records = Vec::with_capacity(spec.n);
    let mut images = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let group = group_for(i);
        let img = GrayImage {
            width: spec.width,
            height: spec.height,
            pixels: render(spec, group.label().index(), &cue, &mut rng),
        };
        records.push(SliceRecord {
            image: img.to_tensor(),
            label: group.label(),
            group,
            subject_id: format!("synth-{i:04}"),
            plane: spec.plane,
            source_path: PathBuf::from(format!("images/synth_{i:04}.pgm")),
        });
        images.push(img);
    }
    Ok((Dataset::new(records)?, images))
}

/// Generate the dataset and write `<root>/images/*.pgm` plus
/// `<root>/manifest.csv`.
pub fn synth_generate(spec: &SynthSpec, root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let (ds, images) = synth_images(spec)?;
    let image_dir = root.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for (r, img) in ds.records().iter().zip(&images) {
        write_pgm(img, root.join(&r.source_path))?;
    }
    write_manifest(&Manifest::from_dataset(&ds), root.join("manifest.csv"))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    fn small(n: usize) -> SynthSpec {
        SynthSpec { seed: 3, n, height: 32, width: 32, ..SynthSpec::default() }
    }

    #[test]
    fn ten_images_balanced_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&small(10), dir.path()).unwrap();
        let ones = ds.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!((ds.len(), ones), (10, 5));
        assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 10);
        let back = load_manifest(dir.path().join("manifest.csv"), dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&small(6), a.path()).unwrap();
        synth_generate(&small(6), b.path()).unwrap();
        for i in 0..6 {
            let name = format!("images/synth_{i:04}.pgm");
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
        assert_eq!(fs::read(a.path().join("manifest.csv")).unwrap(), fs::read(b.path().join("manifest.csv")).unwrap());
        let (c, _) = synth_images(&SynthSpec { seed: 4, ..small(6) }).unwrap();
        let (d, _) = synth_images(&small(6)).unwrap();
        assert_ne!(c, d);
    }

    #[test]
    fn odd_count_and_bad_strength_rejected() {
        assert!(matches!(synth_images(&small(7)), Err(Error::Parameter(_))));
        assert!(matches!(synth_images(&SynthSpec { cue_strength: 0.0, ..small(4) }), Err(Error::Parameter(_))));
    }

    #[test]
    fn masks_have_equal_area_and_do_not_overlap() {
        for (h, w) in [(96, 96), (32, 40), (21, 21)] {
            let cue = cue_region_mask(h, w);
            let ctl = control_region_mask(h, w);
            let a = cue.iter().filter(|&&m| m).count();
            assert!(a > 0);
            assert_eq!(a, ctl.iter().filter(|&&m| m).count());
            assert!(cue.iter().zip(&ctl).all(|(a, b)| !(a & b)));
        }
        // Upper-left: the first masked pixel lies in the top half, left half.
        let cue = cue_region_mask(96, 96);
        let first = cue.iter().position(|&m| m).unwrap();
        assert!(first / 96 < 48);
        let cols: Vec<usize> = (0..96 * 96).filter(|&i| cue[i]).map(|i| i % 96).collect();
        assert!(cols.iter().all(|&c| c < 48));
    }

    #[test]
    fn cue_region_separates_classes() {
        let spec = SynthSpec { seed: 11, n: 200, height: 48, width: 48, ..SynthSpec::default() };
        let (ds, _) = synth_images(&spec).unwrap();
        let cue = cue_region_mask(48, 48);
        let area = cue.iter().filter(|&&m| m).count() as f64;
        let mut means = [Vec::new(), Vec::new()];
        for r in ds.records() {
            let m: f64 = r.image.data().iter().zip(&cue).filter(|(_, &c)| c).map(|(v, _)| v).sum::<f64>() / area;
            means[r.label.index()].push(m);
        }
        let stats = |v: &[f64]| {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (mu, var.sqrt())
        };
        let (m0, s0) = stats(&means[0]);
        let (m1, s1) = stats(&means[1]);
        assert!((m0 - m1).abs() >= 5.0 * s0.max(s1), "{m0} {s0} {m1} {s1}");
    }

    #[test]
    fn brightness_scales_intensity() {
        let (full, _) = synth_images(&small(4)).unwrap();
        let (dim, _) = synth_images(&SynthSpec { brightness: 0.3, ..small(4) }).unwrap();
        let mean = |d: &Dataset| d.records().iter().map(|r| r.image.sum()).sum::<f64>();
        let ratio = mean(&dim) / mean(&full);
        assert!((0.25..0.4).contains(&ratio), "{ratio}");
    }
}
