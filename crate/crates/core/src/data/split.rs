use super::{DataError, WindowSet};
use crate::numerics::Rng64;

/// Window indices for one leave-one-subject-out iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub test_subject: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fraction of each training subject's (trailing) windows used for
/// validation when the remaining subjects cannot form two folds.
const FALLBACK_VAL_FRACTION: f64 = 0.2;

/// One partition per subject (sorted by id). The test subject's windows form
/// the test set; the other subjects are dealt into `n_folds` seeded folds,
/// fold 0 validates and the rest train.
pub fn split_loso(windows: &WindowSet, n_folds: usize, seed: u64) -> Result<Vec<Partition>, DataError> {
    if n_folds < 2 {
        return Err(DataError::Protocol(format!("n_folds must be >= 2, got {n_folds}")));
    }
    let subjects = windows.subjects();
    if subjects.len() < 2 {
        return Err(DataError::Protocol("cross-validation needs at least 2 subjects".into()));
    }
    let mut rng = Rng64::new(seed);
    let mut out = Vec::with_capacity(subjects.len());
    for test_subject in &subjects {
        let mut part_rng = rng.split();
        let mut rest: Vec<&String> = subjects.iter().filter(|s| *s != test_subject).collect();
        part_rng.shuffle(&mut rest);
        let folds = n_folds.min(rest.len());
        let (mut train, mut validation) = (Vec::new(), Vec::new());
        if folds >= 2 {
            for (i, s) in rest.iter().enumerate() {
                let idx = windows.indices_of(s);
                if i % folds == 0 {
                    validation.extend(idx);
                } else {
                    train.extend(idx);
                }
            }
        } else {
            for s in &rest {
                let idx = windows.indices_of(s);
                let n_val = ((idx.len() as f64 * FALLBACK_VAL_FRACTION).ceil() as usize).min(idx.len().saturating_sub(1));
                let cut = idx.len() - n_val;
                train.extend_from_slice(&idx[..cut]);
                validation.extend_from_slice(&idx[cut..]);
            }
        }
        train.sort_unstable();
        validation.sort_unstable();
        out.push(Partition {
            test_subject: test_subject.clone(),
            train,
            validation,
            test: windows.indices_of(test_subject),
        });
    }
    Ok(out)
}
