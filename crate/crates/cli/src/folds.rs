//! Subject-level cross-validation splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, CliError, CliResult};

pub const FOLD_FILE: &str = "folds.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldFile {
    pub k: usize,
    pub shuffle_seed: u64,
    /// Digest of the manifest the split was made from.
    pub manifest_digest: String,
    pub folds: Vec<Fold>,
}

/// Shuffles `subjects` with `seed` and deals them round-robin into `k` test
/// sets; each fold trains on everything outside its test set. With `k = 1`
/// the single fold trains and tests on every subject.
pub fn split(subjects: &[String], k: usize, seed: u64) -> CliResult<Vec<Fold>> {
    if k == 0 || k > subjects.len() {
        return Err(CliError::Config(format!(
            "cannot split {} subjects into {k} folds",
            subjects.len()
        )));
    }
    if k == 1 {
        log::warn!("k = 1: training and test sets are the same subjects");
        return Ok(vec![Fold {
            index: 0,
            train: subjects.to_vec(),
            test: subjects.to_vec(),
        }]);
    }
    let mut order = subjects.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let (mut test, mut train) = (Vec::new(), Vec::new());
            for (i, id) in order.iter().enumerate() {
                if i % k == f {
                    test.push(id.clone());
                } else {
                    train.push(id.clone());
                }
            }
            test.sort();
            train.sort();
            Fold {
                index: f,
                train,
                test,
            }
        })
        .collect())
}

impl FoldFile {
    pub fn read(out_dir: &Path) -> CliResult<Self> {
        let path = out_dir.join(FOLD_FILE);
        let text = io_at(&path, std::fs::read_to_string(&path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        let path = out_dir.join(FOLD_FILE);
        let text = serde_json::to_string_pretty(self)?;
        io_at(&path, std::fs::write(&path, text))
    }

    pub fn fold(&self, index: usize) -> CliResult<&Fold> {
        self.folds.get(index).ok_or_else(|| {
            CliError::Config(format!(
                "fold {index} does not exist (the split has {} folds)",
                self.folds.len()
            ))
        })
    }
}
