//! FIFO replay buffer with provenance tags.
//!
//! Evaluation rollouts never feed the models; the tag on every entry lets
//! the trainer assert that invariant instead of trusting call sites. A tenth
//! of insertions (by running index) is held out for the NLL regression check.

use nalgebra::DVector;
use std::collections::VecDeque;

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Training,
    Evaluation,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone)]
struct Entry {
    t: Transition,
    provenance: Provenance,
    holdout: bool,
}

#[derive(Debug)]
pub struct ReplayBuffer {
    buf: VecDeque<Entry>,
    capacity: usize,
    inserted: u64,
}

const HOLDOUT_EVERY: u64 = 10;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        Self {
            buf: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
            inserted: 0,
        }
    }

    /// Push evicts the oldest entry once full.
    pub fn push(&mut self, t: Transition, provenance: Provenance) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        let holdout = self.inserted % HOLDOUT_EVERY == HOLDOUT_EVERY - 1;
        self.inserted += 1;
        self.buf.push_back(Entry {
            t,
            provenance,
            holdout,
        });
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.buf[i].t
    }

    pub fn evaluation_count(&self) -> usize {
        self.buf
            .iter()
            .filter(|e| e.provenance == Provenance::Evaluation)
            .count()
    }

    fn pool(&self, holdout: bool) -> Vec<usize> {
        self.buf
            .iter()
            .enumerate()
            .filter(|(_, e)| e.provenance == Provenance::Training && e.holdout == holdout)
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of the held-out tenth (training provenance only).
    pub fn holdout_indices(&self) -> Vec<usize> {
        self.pool(true)
    }

    /// Uniform minibatch without replacement from the non-held-out training
    /// entries. Smaller pools are returned whole.
    pub fn sample_minibatch(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let pool = self.pool(false);
        if pool.len() <= batch {
            return pool;
        }
        sample(rng, pool.len(), batch)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chacha;
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn tr(v: f64) -> Transition {
        Transition {
            x: DVector::from_element(1, v),
            u: DVector::from_element(1, 0.0),
            x_next: DVector::from_element(1, v + 1.0),
            cost: v,
        }
    }

    #[test]
    fn eviction_is_fifo() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(tr(i as f64), Provenance::Training);
        }
        assert_eq!(b.len(), 3);
        let kept: Vec<f64> = (0..3).map(|i| b.get(i).cost).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn holdout_fraction_is_a_tenth() {
        let mut b = ReplayBuffer::new(1000);
        for i in 0..1000 {
            b.push(tr(i as f64), Provenance::Training);
        }
        assert_eq!(b.holdout_indices().len(), 100);
    }

    #[test]
    fn minibatch_excludes_holdout_and_evaluation_entries() {
        let mut b = ReplayBuffer::new(200);
        for i in 0..100 {
            b.push(tr(i as f64), Provenance::Training);
        }
        for i in 0..50 {
            b.push(tr(1000.0 + i as f64), Provenance::Evaluation);
        }
        let holdout: std::collections::HashSet<usize> =
            b.holdout_indices().into_iter().collect();
        let mut rng = chacha(7);
        let batch = b.sample_minibatch(64, &mut rng);
        assert_eq!(batch.len(), 64);
        for &i in &batch {
            assert!(!holdout.contains(&i));
            assert!(b.get(i).cost < 1000.0);
        }
        assert_eq!(b.evaluation_count(), 50);
    }

    #[test]
    fn minibatch_is_without_replacement_and_reproducible() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..100 {
            b.push(tr(i as f64), Provenance::Training);
        }
        let batch1 = b.sample_minibatch(32, &mut chacha(9));
        let batch2 = b.sample_minibatch(32, &mut chacha(9));
        assert_eq!(batch1, batch2);
        let unique: std::collections::HashSet<usize> = batch1.iter().copied().collect();
        assert_eq!(unique.len(), batch1.len());
    }

    proptest! {
        #[test]
        fn buffer_keeps_the_most_recent_entries(cap in 1usize..40, n in 0usize..120) {
            let mut b = ReplayBuffer::new(cap);
            for i in 0..n {
                b.push(tr(i as f64), Provenance::Training);
            }
            prop_assert_eq!(b.len(), n.min(cap));
            let start = n.saturating_sub(cap);
            for (k, i) in (start..n).enumerate() {
                prop_assert_eq!(b.get(k).cost, i as f64);
            }
        }
    }
}
