//! Synthetic data, image I/O, preprocessing and subject-level splits.

pub mod image;
pub mod preprocess;
pub mod split;
pub mod synth;

use std::path::{Path, PathBuf};

pub use image::{decode_pgm, load_image, write_pgm, ImageTensor};
pub use preprocess::{apply_augment, augment, orient_normalize, AugmentParams};
pub use split::{split, Partition, SplitPlan, SplitRow};
pub use synth::{draw_latents, render, synth_generate, LabelScheme, Latent, StudyRecord, SynthOutput};

use crate::error::{Error, Result};

/// A decoded, orientation-normalised study.
#[derive(Clone, Debug)]
pub struct Study {
    pub subject_id: String,
    pub label: usize,
    pub mlo: ImageTensor,
    pub cc: ImageTensor,
}

/// All studies of a manifest, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub studies: Vec<Study>,
}

impl Dataset {
    pub fn load(manifest: &Path, size: usize, num_classes: usize) -> Result<Self> {
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let records: Vec<StudyRecord> = synth::read_rows(manifest)?;
        let mut studies = Vec::with_capacity(records.len());
        for r in records {
            if r.label >= num_classes {
                return Err(Error::Config(format!(
                    "subject `{}` has label {} outside {num_classes} classes",
                    r.subject_id, r.label
                )));
            }
            let read = |rel: &str| -> Result<ImageTensor> {
                Ok(orient_normalize(&load_image(&root.join(rel), [size, size])?))
            };
            studies.push(Study {
                mlo: read(&r.mlo)?,
                cc: read(&r.cc)?,
                subject_id: r.subject_id,
                label: r.label,
            });
        }
        Ok(Dataset { root, studies })
    }

    pub fn labels(&self) -> Vec<(String, usize)> {
        self.studies.iter().map(|s| (s.subject_id.clone(), s.label)).collect()
    }

    /// Studies whose ids appear in `ids`, in manifest order.
    pub fn subset(&self, ids: &[&str]) -> Vec<&Study> {
        let keep: std::collections::HashSet<&str> = ids.iter().copied().collect();
        self.studies.iter().filter(|s| keep.contains(s.subject_id.as_str())).collect()
    }
}
