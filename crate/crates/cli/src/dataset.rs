//! Phantom cohorts on disk: one directory per subject plus a manifest.

use std::path::{Path, PathBuf};

use harmonize_core::metrics::LabelVolume;
use harmonize_core::phantom::{generate_pair, CohortSpec, ContrastSpec};
use harmonize_core::{hvol, Direction, Slice, Volume};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const SOURCE_FILE: &str = "source.hvol";
pub const TARGET_FILE: &str = "target.hvol";
pub const LABELS_FILE: &str = "labels.hvol";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub seed: u64,
    pub lesions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Hex SHA-256 of the cohort spec serialized as JSON.
    pub spec_hash: String,
    pub cohort: CohortSpec,
    pub subjects: Vec<SubjectEntry>,
}

impl Manifest {
    pub fn read(data_dir: &Path) -> CliResult<Self> {
        let path = data_dir.join(MANIFEST);
        let text = io_at(&path, std::fs::read_to_string(&path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Hex SHA-256 of the manifest text as written to disk.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    /// Contrast specs of the input and the reference of `direction`.
    pub fn contrasts(&self, direction: Direction) -> (&ContrastSpec, &ContrastSpec) {
        let base = &self.cohort.base;
        match direction {
            Direction::SourceToTarget => (&base.source, &base.target),
            Direction::TargetToSource => (&base.target, &base.source),
        }
    }
}

pub fn spec_hash(cohort: &CohortSpec) -> String {
    let json = serde_json::to_string(cohort).expect("cohort spec serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Renders every subject of `cohort` into `data_dir` and writes the manifest.
pub fn generate_cohort(cohort: &CohortSpec, data_dir: &Path) -> CliResult<Manifest> {
    if cohort.subjects > 0 {
        cohort
            .base
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    io_at(data_dir, std::fs::create_dir_all(data_dir))?;
    let subjects = (0..cohort.subjects)
        .into_par_iter()
        .map(|i| {
            let id = CohortSpec::subject_id(i);
            let spec = cohort.subject(i);
            let pair = generate_pair(&spec)?;
            let dir = data_dir.join(&id);
            io_at(&dir, std::fs::create_dir_all(&dir))?;
            hvol::write(dir.join(SOURCE_FILE), &pair.source.with_tags("S", &id))?;
            hvol::write(dir.join(TARGET_FILE), &pair.target.with_tags("T", &id))?;
            hvol::write(
                dir.join(LABELS_FILE),
                &pair.labels.to_volume().with_tags("labels", &id),
            )?;
            Ok(SubjectEntry {
                id,
                seed: spec.seed,
                lesions: spec.lesions.enabled,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = Manifest {
        spec_hash: spec_hash(cohort),
        cohort: cohort.clone(),
        subjects,
    };
    let path = data_dir.join(MANIFEST);
    io_at(&path, std::fs::write(&path, manifest.to_json()))?;
    Ok(manifest)
}

/// The volumes of one subject, oriented for a translation direction.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: String,
    /// Volume in the input contrast.
    pub input: Volume,
    /// Volume in the reference contrast.
    pub reference: Volume,
    pub labels: LabelVolume,
}

pub fn subject_dir(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join(id)
}

pub fn load_subject(data_dir: &Path, id: &str, direction: Direction) -> CliResult<SubjectData> {
    let dir = subject_dir(data_dir, id);
    let source = hvol::read(dir.join(SOURCE_FILE))?;
    let target = hvol::read(dir.join(TARGET_FILE))?;
    let labels = LabelVolume::from_volume(&hvol::read(dir.join(LABELS_FILE))?)?;
    if !source.same_geometry(&target) {
        return Err(CliError::Data(format!(
            "{id}: source and target volumes differ in geometry"
        )));
    }
    let (input, reference) = match direction {
        Direction::SourceToTarget => (source, target),
        Direction::TargetToSource => (target, source),
    };
    Ok(SubjectData {
        id: id.to_string(),
        input,
        reference,
        labels,
    })
}

/// Paired (condition, target) sagittal slices of `subjects`.
pub fn training_pairs(
    subjects: &[SubjectData],
    skip_empty: bool,
) -> Vec<(Slice, Slice)> {
    subjects
        .iter()
        .flat_map(|s| {
            let inputs = harmonize_core::volume::slice_sagittal(&s.input);
            let refs = harmonize_core::volume::slice_sagittal(&s.reference);
            inputs.into_iter().zip(refs)
        })
        .filter(|(b, _)| !skip_empty || b.data().iter().any(|&v| v != 0.0))
        .collect()
}
