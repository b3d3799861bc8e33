use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Split, SubjectRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub paired: usize,
}

/// Partitions subjects into train/val/test, flags `counts.paired` training
/// subjects as paired and reduces every other subject to a single modality
/// so that per-modality counts within each split differ by at most one.
///
/// The input records describe what is available; their `paired` and
/// `split` fields are ignored. Subjects beyond `train + val + test` are
/// dropped. The result is a pure function of the arguments.
pub fn plan_splits(
    records: &[SubjectRecord],
    counts: SplitCounts,
    n_modalities: usize,
    seed: u64,
) -> Result<Vec<SubjectRecord>> {
    let total = counts.train + counts.val + counts.test;
    if counts.paired > counts.train {
        return Err(Error::InvalidArgument(format!(
            "{} paired subjects requested but only {} training subjects",
            counts.paired, counts.train
        )));
    }
    if total > records.len() {
        return Err(Error::InvalidArgument(format!(
            "split needs {total} subjects but only {} are available",
            records.len()
        )));
    }
    for r in records {
        if r.available_modalities.is_empty() {
            return Err(Error::subject(&r.subject_id, "no modalities available"));
        }
        if let Some(&m) = r.available_modalities.iter().find(|&&m| m >= n_modalities) {
            return Err(Error::subject(&r.subject_id, format!("modality index {m} out of range")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);

    let mut assigned: Vec<Option<(Split, bool)>> = vec![None; records.len()];
    let train = &order[..counts.train];
    let mut n_paired = 0;
    for &i in train {
        let pairable = records[i].available_modalities.len() >= 2;
        let paired = pairable && n_paired < counts.paired;
        if paired {
            n_paired += 1;
        }
        assigned[i] = Some((Split::Train, paired));
    }
    if n_paired < counts.paired {
        return Err(Error::InvalidArgument(format!(
            "only {n_paired} training subjects have two or more modalities, {} requested as paired",
            counts.paired
        )));
    }
    for &i in &order[counts.train..counts.train + counts.val] {
        assigned[i] = Some((Split::Val, false));
    }
    for &i in &order[counts.train + counts.val..total] {
        assigned[i] = Some((Split::Test, false));
    }

    // Balanced single-modality assignment, visiting subjects in shuffled order.
    // One stream per split keeps held-out choices independent of the paired count.
    let mut chosen: Vec<Option<usize>> = vec![None; records.len()];
    for (stream, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 + stream as u64);
        let mut per_modality = vec![0usize; n_modalities];
        for &i in &order[..total] {
            if assigned[i] != Some((split, false)) {
                continue;
            }
            let avail = &records[i].available_modalities;
            let least = avail.iter().map(|&m| per_modality[m]).min().unwrap_or(0);
            let ties: Vec<usize> = avail.iter().copied().filter(|&m| per_modality[m] == least).collect();
            let m = ties[rng.random_range(0..ties.len())];
            per_modality[m] += 1;
            chosen[i] = Some(m);
        }
    }

    let planned = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let (split, paired) = assigned[i]?;
            let available_modalities: BTreeSet<usize> = if paired {
                r.available_modalities.clone()
            } else {
                chosen[i].into_iter().collect()
            };
            Some(SubjectRecord {
                subject_id: r.subject_id.clone(),
                available_modalities,
                paired,
                split,
            })
        })
        .collect();
    Ok(planned)
}
