use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::DatasetSplit;
use crate::error::{Error, Result};

/// Identity-balanced batches: `ids_per_batch` identities with
/// `instances_per_id` samples each.
#[derive(Debug, Clone)]
pub struct PkSampler {
    ids_per_batch: usize,
    instances_per_id: usize,
    groups: Vec<Vec<usize>>,
}

impl PkSampler {
    pub fn new(split: &DatasetSplit, ids_per_batch: usize, instances_per_id: usize) -> Result<Self> {
        if ids_per_batch * instances_per_id == 0 {
            return Err(Error::Config("P * K_inst must be positive".into()));
        }
        let groups = split.indices_by_label();
        if groups.len() < ids_per_batch {
            return Err(Error::Config(alloc::format!(
                "{} identities in the split, {ids_per_batch} needed per batch",
                groups.len()
            )));
        }
        Ok(Self {
            ids_per_batch,
            instances_per_id,
            groups,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.instances_per_id
    }

    /// `instances_per_id` indices from one identity, with replacement when the
    /// identity has fewer images than that.
    fn draw_instances<R: Rng + ?Sized>(&self, group: &[usize], rng: &mut R) -> Vec<usize> {
        if group.len() >= self.instances_per_id {
            let mut g = group.to_vec();
            g.shuffle(rng);
            g.truncate(self.instances_per_id);
            g
        } else {
            (0..self.instances_per_id)
                .map(|_| group[rng.random_range(0..group.len())])
                .collect()
        }
    }

    /// One epoch of batches. Every identity appears in at least one batch.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let k = self.instances_per_id;
        // per identity: shuffled chunks of K, incomplete tails dropped
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .groups
            .iter()
            .map(|group| {
                if group.len() < k {
                    return alloc::vec![self.draw_instances(group, rng)];
                }
                let mut g = group.clone();
                g.shuffle(rng);
                g.chunks_exact(k).map(|c| c.to_vec()).collect()
            })
            .collect();

        let mut batches = Vec::new();
        loop {
            let mut available: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if available.is_empty() {
                break;
            }
            available.shuffle(rng);
            let mut chosen: Vec<usize> = available.into_iter().take(self.ids_per_batch).collect();
            if chosen.len() < self.ids_per_batch {
                // last batch: fill with fresh draws from other identities
                let mut others: Vec<usize> = (0..self.groups.len()).filter(|i| !chosen.contains(i)).collect();
                others.shuffle(rng);
                let missing = self.ids_per_batch - chosen.len();
                let mut batch = Vec::with_capacity(self.batch_size());
                for &id in &chosen {
                    batch.extend(chunks[id].pop().expect("available identity has a chunk"));
                }
                for &id in others.iter().take(missing) {
                    batch.extend(self.draw_instances(&self.groups[id], rng));
                }
                batches.push(batch);
                break;
            }
            chosen.sort_unstable();
            let mut batch = Vec::with_capacity(self.batch_size());
            for &id in &chosen {
                batch.extend(chunks[id].pop().expect("available identity has a chunk"));
            }
            batches.push(batch);
        }
        batches
    }
}
