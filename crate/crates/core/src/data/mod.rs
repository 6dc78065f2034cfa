//! Slice records, manifests, gamma correction, image I/O and the synthetic
//! slice generator.

mod gamma;
mod manifest;
pub mod netpbm;
mod synth;

pub use gamma::{gamma_correct, gamma_correct_u8, GammaSpec};
pub use manifest::{load_manifest, read_manifest, write_manifest, Manifest, ManifestRow};
pub use netpbm::{load_pgm, save_pgm};
pub use synth::{control_region_mask, cue_region_mask, synth_generate, synth_images, SynthSpec};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary class. MCI (stable and progressive merged) is negative, AD positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Mci = 0,
    Ad = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Diagnostic group as written in a manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupName {
    SMci,
    PMci,
    Ad,
}

impl GroupName {
    pub fn label(self) -> Label {
        match self {
            GroupName::SMci | GroupName::PMci => Label::Mci,
            GroupName::Ad => Label::Ad,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::SMci => "sMCI",
            GroupName::PMci => "pMCI",
            GroupName::Ad => "AD",
        }
    }
}

impl FromStr for GroupName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sMCI" => Ok(GroupName::SMci),
            "pMCI" => Ok(GroupName::PMci),
            "AD" => Ok(GroupName::Ad),
            other => Err(format!("unknown label {other:?} (expected sMCI, pMCI or AD)")),
        }
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Midsagittal,
    Parasagittal,
}

impl Plane {
    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Midsagittal => "midsagittal",
            Plane::Parasagittal => "parasagittal",
        }
    }
}

impl FromStr for Plane {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "midsagittal" => Ok(Plane::Midsagittal),
            "parasagittal" => Ok(Plane::Parasagittal),
            _ => Err(format!("unknown plane {s:?} (expected midsagittal or parasagittal)")),
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One labelled grayscale slice; `image` is `[1, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub image: Tensor,
    pub label: Label,
    pub group: GroupName,
    pub subject_id: String,
    pub plane: Plane,
    pub source_path: PathBuf,
}

/// Ordered collection of slices sharing one image size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<SliceRecord>,
}

impl Dataset {
    pub fn new(records: Vec<SliceRecord>) -> Result<Self> {
        let ds = Self { records };
        ds.image_dims()?;
        for (i, r) in ds.records.iter().enumerate() {
            if r.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("record {i}: intensities outside [0, 1]")));
            }
        }
        Ok(ds)
    }

    pub fn records(&self) -> &[SliceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<SliceRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label.index()).collect()
    }

    /// Common `(height, width)`, or `None` for an empty dataset.
    pub fn image_dims(&self) -> Result<Option<(usize, usize)>> {
        let mut dims = None;
        for (i, r) in self.records.iter().enumerate() {
            let d = match r.image.shape() {
                &[1, h, w] => (h, w),
                s => return Err(Error::Data(format!("record {i}: image shape {s:?} is not [1, H, W]"))),
            };
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Data(format!(
                        "record {i}: image {}x{} differs from {}x{}",
                        d.0, d.1, prev.0, prev.1
                    )))
                }
                _ => {}
            }
        }
        Ok(dims)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { records: indices.iter().map(|&i| self.records[i].clone()).collect() }
    }

    pub fn filter_plane(&self, plane: Plane) -> Dataset {
        Dataset { records: self.records.iter().filter(|r| r.plane == plane).cloned().collect() }
    }

    /// Stack the selected images into `[B, 1, H, W]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (h, w) = self.image_dims()?.ok_or_else(|| Error::Data("cannot batch an empty dataset".into()))?;
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self.records.get(i).ok_or_else(|| Error::Data(format!("batch index {i} out of range")))?;
            data.extend_from_slice(r.image.data());
            labels.push(r.label.index());
        }
        Ok((Tensor::new(&[indices.len(), 1, h, w], data)?, labels))
    }

    /// Apply gamma correction to every image.
    pub fn gamma_corrected(&self, spec: &GammaSpec) -> Result<Dataset> {
        let records = self
            .records
            .iter()
            .map(|r| Ok(SliceRecord { image: gamma_correct(&r.image, spec)?, ..r.clone() }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { records })
    }
}
