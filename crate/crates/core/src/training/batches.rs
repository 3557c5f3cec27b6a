use std::collections::{HashSet, VecDeque};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::weaksup::TrainingExample;

/// Shuffled batches of example indices with no repeated target inside a batch.
///
/// An example whose target already appears in the open batch is deferred and
/// placed in the next batch that has room for it. Whatever cannot be placed, and a
/// final short batch, is dropped.
pub fn make_batches(dataset: &[TrainingExample], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    if dataset.len() < batch_size {
        return Err(Error::Data(format!(
            "dataset of {} examples is smaller than one batch of {batch_size}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut crate::rng::stream(seed, "batches"));

    let mut batches = Vec::with_capacity(dataset.len() / batch_size);
    let mut deferred: VecDeque<usize> = VecDeque::new();
    let mut current: Vec<usize> = Vec::with_capacity(batch_size);
    let mut targets: HashSet<&str> = HashSet::new();

    for idx in order {
        let target = dataset[idx].target_id.as_str();
        if targets.insert(target) {
            current.push(idx);
        } else {
            deferred.push_back(idx);
        }
        while current.len() == batch_size {
            batches.push(std::mem::take(&mut current));
            targets.clear();
            // Refill the fresh batch from the deferred queue, oldest first.
            let mut still = VecDeque::with_capacity(deferred.len());
            while let Some(d) = deferred.pop_front() {
                if current.len() < batch_size && targets.insert(dataset[d].target_id.as_str()) {
                    current.push(d);
                } else {
                    still.push_back(d);
                }
            }
            deferred = still;
        }
    }
    if batches.is_empty() {
        return Err(Error::Data(format!(
            "cannot form a batch of {batch_size} distinct targets"
        )));
    }
    Ok(batches)
}

/// Indices of the first repeated target within a batch, if any.
pub fn find_duplicate_target(dataset: &[TrainingExample], batch: &[usize]) -> Option<(usize, usize)> {
    for (a, &i) in batch.iter().enumerate() {
        for &j in &batch[a + 1..] {
            if dataset[i].target_id == dataset[j].target_id {
                return Some((i, j));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weaksup::ExampleSource;

    fn examples(targets: &[usize]) -> Vec<TrainingExample> {
        targets
            .iter()
            .enumerate()
            .map(|(i, t)| TrainingExample {
                query_id: format!("q{i}"),
                caption: "is red".into(),
                target_id: format!("t{t}"),
                source: ExampleSource::Synthetic,
                change: None,
            })
            .collect()
    }

    #[test]
    fn two_disjoint_batches() {
        let data = examples(&(0..64).collect::<Vec<_>>());
        let batches = make_batches(&data, 32, 1).unwrap();
        assert_eq!(batches.len(), 2);
        let all: HashSet<usize> = batches.iter().flatten().copied().collect();
        assert_eq!(all.len(), 64);
    }

    #[test]
    fn too_small_dataset_is_data_error() {
        let data = examples(&(0..31).collect::<Vec<_>>());
        assert!(matches!(make_batches(&data, 32, 0), Err(Error::Data(_))));
    }

    #[test]
    fn short_tail_is_dropped() {
        let data = examples(&(0..70).collect::<Vec<_>>());
        let batches = make_batches(&data, 32, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 32));
    }

    #[test]
    fn duplicated_targets_are_repaired() {
        for seed in 0..20 {
            // Every target appears four times.
            let targets: Vec<usize> = (0..256).map(|i| i % 64).collect();
            let data = examples(&targets);
            let batches = make_batches(&data, 32, seed).unwrap();
            assert!(batches.len() >= 7, "seed {seed}: {} batches", batches.len());
            let mut seen = HashSet::new();
            for b in &batches {
                assert_eq!(b.len(), 32);
                assert_eq!(find_duplicate_target(&data, b), None);
                for &i in b {
                    assert!(seen.insert(i), "example {i} used twice");
                }
            }
        }
    }

    #[test]
    fn impossible_batch_is_data_error() {
        let data = examples(&[0; 40]);
        assert!(matches!(make_batches(&data, 4, 0), Err(Error::Data(_))));
    }

    #[test]
    fn seeded_and_shuffled() {
        let data = examples(&(0..64).collect::<Vec<_>>());
        assert_eq!(make_batches(&data, 8, 3).unwrap(), make_batches(&data, 8, 3).unwrap());
        assert_ne!(make_batches(&data, 8, 3).unwrap(), make_batches(&data, 8, 4).unwrap());
    }
}
