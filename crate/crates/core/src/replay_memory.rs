//! Prioritized experience replay: a proportional sum-tree buffer with
//! importance-sampling weights, ring eviction, and max-priority insertion.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gsh_features::FEATURE_DIM;
use crate::process_env::STATE_DIM;

/// Priority floor so zero-error items never starve.
pub const EPS_PRIO: f64 = 1e-6;

/// Prioritization exponent default.
pub const DEFAULT_ALPHA: f64 = 0.6;

/// Initial importance-sampling correction exponent.
pub const DEFAULT_BETA0: f64 = 0.4;

/// Default capacity for single-goal runs.
pub const DEFAULT_CAPACITY: usize = 100_000;

/// Default capacity for multi-goal runs, sized to hold all augmented
/// experiences of a full run without eviction.
pub const MULTI_GOAL_CAPACITY: usize = 250_000;

/// Exact sum-tree rebuild cadence (writes between rebuilds), bounding the
/// drift of the incremental partial sums.
const REBUILD_INTERVAL: usize = 1 << 14;

/// Linear anneal of the IS exponent from `beta0` at step 0 to 1.0 at
/// `total_steps`, clamped afterwards.
pub fn beta_schedule(beta0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    let frac = (step as f64 / total_steps as f64).min(1.0);
    beta0 + (1.0 - beta0) * frac
}

/// One stored transition, goal-conditioned: the goal feature block is all
/// zeros in single-goal mode and the target encoding in multi-goal mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub state: [f64; STATE_DIM],
    pub action: usize,
    pub next_state: [f64; STATE_DIM],
    pub reward: f64,
    pub goal: [f64; FEATURE_DIM],
    pub done: bool,
}

impl Experience {
    fn validate(&self) -> Result<()> {
        let finite = self.state.iter().all(|x| x.is_finite())
            && self.next_state.iter().all(|x| x.is_finite())
            && self.goal.iter().all(|x| x.is_finite())
            && self.reward.is_finite();
        if finite {
            Ok(())
        } else {
            Err(Error::invalid_argument("experience contains non-finite values"))
        }
    }
}

/// Reference to a sampled slot. The generation tag detects eviction between
/// sampling and the priority update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub slot: usize,
    pub generation: u64,
}

/// A sampled mini-batch with its importance-sampling weights (normalized so
/// the largest weight is exactly 1).
#[derive(Clone, Debug)]
pub struct SampledBatch {
    pub items: Vec<Experience>,
    pub refs: Vec<SampleRef>,
    pub weights: Vec<f64>,
}

/// Proportional prioritized replay buffer over a binary sum-tree.
pub struct PrioritizedBuffer {
    capacity: usize,
    alpha: f64,
    /// 1-based heap layout; leaves occupy tree[leaf_base..leaf_base+capacity].
    tree: Vec<f64>,
    leaf_base: usize,
    items: Vec<Option<Experience>>,
    generations: Vec<u64>,
    next_slot: usize,
    len: usize,
    /// Largest priority ever assigned; new items enter at this value.
    max_priority: f64,
    writes_since_rebuild: usize,
    stale_skips: u64,
    generation_counter: u64,
}

impl PrioritizedBuffer {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid_argument("replay capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid_argument("alpha must lie in [0, 1]"));
        }
        let leaf_base = capacity.next_power_of_two();
        Ok(PrioritizedBuffer {
            capacity,
            alpha,
            tree: vec![0.0; 2 * leaf_base],
            leaf_base,
            items: vec![None; capacity],
            generations: vec![0; capacity],
            next_slot: 0,
            len: 0,
            max_priority: 1.0,
            writes_since_rebuild: 0,
            stale_skips: 0,
            generation_counter: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Count of priority updates dropped because the slot was evicted.
    pub fn stale_skips(&self) -> u64 {
        self.stale_skips
    }

    pub fn total_priority(&self) -> f64 {
        self.tree[1]
    }

    pub fn leaf_priority(&self, slot: usize) -> f64 {
        self.tree[self.leaf_base + slot]
    }

    fn set_leaf(&mut self, slot: usize, priority: f64) {
        let mut idx = self.leaf_base + slot;
        let delta = priority - self.tree[idx];
        self.tree[idx] = priority;
        while idx > 1 {
            idx /= 2;
            self.tree[idx] += delta;
        }
        self.writes_since_rebuild += 1;
        if self.writes_since_rebuild >= REBUILD_INTERVAL {
            self.rebuild();
        }
    }

    /// Recomputes every internal node exactly from the leaves.
    pub fn rebuild(&mut self) {
        for idx in (1..self.leaf_base).rev() {
            self.tree[idx] = self.tree[2 * idx] + self.tree[2 * idx + 1];
        }
        self.writes_since_rebuild = 0;
    }

    /// Stores an experience at the current maximum priority, evicting the
    /// oldest item once full.
    pub fn insert(&mut self, exp: Experience) -> Result<()> {
        exp.validate()?;
        let slot = self.next_slot;
        self.generation_counter += 1;
        self.items[slot] = Some(exp);
        self.generations[slot] = self.generation_counter;
        self.set_leaf(slot, self.max_priority);
        self.next_slot = (self.next_slot + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    fn find_leaf(&self, mass: f64) -> usize {
        let mut idx = 1usize;
        let mut mass = mass;
        while idx < self.leaf_base {
            let left = 2 * idx;
            if mass <= self.tree[left] || self.tree[left + 1] <= 0.0 {
                idx = left;
            } else {
                mass -= self.tree[left];
                idx = left + 1;
            }
        }
        (idx - self.leaf_base).min(self.capacity - 1)
    }

    /// Draws `batch` items with replacement, each with probability
    /// p_i / sum p, and returns IS weights (N P(i))^-beta normalized by the
    /// batch maximum.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<SampledBatch> {
        if batch == 0 {
            return Err(Error::invalid_argument("batch size must be positive"));
        }
        if self.len < batch {
            return Err(Error::InvalidState(format!(
                "buffer holds {} experiences, need {batch}",
                self.len
            )));
        }
        let total = self.total_priority();
        if !(total > 0.0) {
            return Err(Error::InvalidState("total priority vanished".into()));
        }
        let mut items = Vec::with_capacity(batch);
        let mut refs = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        let n = self.len as f64;
        for _ in 0..batch {
            let u: f64 = rng.gen_range(0.0..total);
            let slot = self.find_leaf(u);
            let exp = self.items[slot]
                .clone()
                .ok_or_else(|| Error::InternalConsistency("sampled an empty slot".into()))?;
            let prob = self.leaf_priority(slot) / total;
            weights.push((n * prob).powf(-beta));
            refs.push(SampleRef { slot, generation: self.generations[slot] });
            items.push(exp);
        }
        let max_w = weights.iter().copied().fold(0.0f64, f64::max);
        for w in weights.iter_mut() {
            *w /= max_w;
        }
        Ok(SampledBatch { items, refs, weights })
    }

    /// Reprioritizes sampled slots with fresh TD magnitudes; references whose
    /// slot was evicted in the meantime are skipped and counted.
    pub fn update_priorities(&mut self, refs: &[SampleRef], deltas: &[f64]) -> Result<()> {
        if refs.len() != deltas.len() {
            return Err(Error::invalid_argument("refs and deltas must have equal length"));
        }
        for (r, &d) in refs.iter().zip(deltas.iter()) {
            if r.slot >= self.capacity {
                return Err(Error::invalid_argument(format!("slot {} out of range", r.slot)));
            }
            if self.generations[r.slot] != r.generation || self.items[r.slot].is_none() {
                self.stale_skips += 1;
                continue;
            }
            if !d.is_finite() {
                return Err(Error::invalid_argument("priority update with non-finite delta"));
            }
            let p = (d.abs() + EPS_PRIO).powf(self.alpha);
            self.max_priority = self.max_priority.max(p);
            self.set_leaf(r.slot, p);
        }
        Ok(())
    }

    /// Debug dump, one experience per line:
    /// `slot generation priority action done reward s[..] s'[..] g[..]`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let emit = |w: &mut std::io::BufWriter<std::fs::File>,
                    slot: usize,
                    exp: &Experience|
         -> std::io::Result<()> {
            write!(
                w,
                "{slot} {} {:.17e} {} {} {:.17e}",
                self.generations[slot],
                self.leaf_priority(slot),
                exp.action,
                exp.done as u8,
                exp.reward
            )?;
            for x in exp.state.iter().chain(exp.next_state.iter()).chain(exp.goal.iter()) {
                write!(w, " {x:.17e}")?;
            }
            writeln!(w)
        };
        for slot in 0..self.capacity {
            if let Some(exp) = &self.items[slot] {
                emit(&mut w, slot, exp).map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp_with(action: usize, reward: f64) -> Experience {
        Experience {
            state: [0.25; STATE_DIM],
            action,
            next_state: [0.5; STATE_DIM],
            reward,
            goal: [0.0; FEATURE_DIM],
            done: false,
        }
    }

    #[test]
    fn insert_makes_items_sampleable_and_evicts_in_ring_order() {
        let mut buf = PrioritizedBuffer::new(4, DEFAULT_ALPHA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        buf.insert(exp_with(0, 0.0)).unwrap();
        assert_eq!(buf.len(), 1);
        let b = buf.sample(1, 1.0, &mut rng).unwrap();
        assert_eq!(b.items[0].action, 0);
        assert_eq!(b.weights[0], 1.0);
        for a in 1..5 {
            buf.insert(exp_with(a, 0.0)).unwrap();
        }
        assert_eq!(buf.len(), 4);
        // Action 0 was evicted; 1000 draws never see it.
        for _ in 0..1000 {
            let b = buf.sample(2, 1.0, &mut rng).unwrap();
            assert!(b.items.iter().all(|e| e.action != 0));
        }
    }

    #[test]
    fn new_items_enter_at_the_running_max_priority() {
        let mut buf = PrioritizedBuffer::new(8, 1.0).unwrap();
        buf.insert(exp_with(0, 0.0)).unwrap();
        assert_eq!(buf.leaf_priority(0), 1.0);
        let r = SampleRef { slot: 0, generation: 1 };
        buf.update_priorities(&[r], &[4.0]).unwrap();
        let p_hot = buf.leaf_priority(0);
        assert!((p_hot - (4.0 + EPS_PRIO)).abs() < 1e-12);
        buf.insert(exp_with(1, 0.0)).unwrap();
        assert_eq!(buf.leaf_priority(1), p_hot);
    }

    #[test]
    fn zero_delta_keeps_a_positive_floor_priority() {
        let mut buf = PrioritizedBuffer::new(2, DEFAULT_ALPHA).unwrap();
        buf.insert(exp_with(0, 0.0)).unwrap();
        buf.update_priorities(&[SampleRef { slot: 0, generation: 1 }], &[0.0]).unwrap();
        let p = buf.leaf_priority(0);
        assert!((p - EPS_PRIO.powf(DEFAULT_ALPHA)).abs() < 1e-18);
        assert!(p > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(buf.sample(1, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn proportional_frequencies_for_one_three_priorities() {
        let mut buf = PrioritizedBuffer::new(2, 1.0).unwrap();
        buf.insert(exp_with(0, 0.0)).unwrap();
        buf.insert(exp_with(1, 0.0)).unwrap();
        buf.update_priorities(
            &[
                SampleRef { slot: 0, generation: 1 },
                SampleRef { slot: 1, generation: 2 },
            ],
            &[1.0 - EPS_PRIO, 3.0 - EPS_PRIO],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000usize;
        let mut hits = [0usize; 2];
        for _ in 0..draws {
            let b = buf.sample(1, 1.0, &mut rng).unwrap();
            hits[b.items[0].action] += 1;
        }
        let f0 = hits[0] as f64 / draws as f64;
        let f1 = hits[1] as f64 / draws as f64;
        assert!((f0 - 0.25).abs() < 0.01, "p(item0) = {f0}");
        assert!((f1 - 0.75).abs() < 0.01, "p(item1) = {f1}");
    }

    #[test]
    fn alpha_zero_sampling_is_uniform_by_chi_square() {
        let n_items = 8usize;
        let mut buf = PrioritizedBuffer::new(n_items, 0.0).unwrap();
        for a in 0..n_items {
            buf.insert(exp_with(a, 0.0)).unwrap();
        }
        // Wildly different TD errors must not matter at alpha = 0.
        let refs: Vec<SampleRef> = (0..n_items)
            .map(|s| SampleRef { slot: s, generation: (s + 1) as u64 })
            .collect();
        let deltas: Vec<f64> = (0..n_items).map(|i| (i as f64 + 1.0) * 10.0).collect();
        buf.update_priorities(&refs, &deltas).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 100_000usize;
        let mut hits = vec![0usize; n_items];
        for _ in 0..draws {
            let b = buf.sample(1, 1.0, &mut rng).unwrap();
            hits[b.items[0].action] += 1;
        }
        let expected = draws as f64 / n_items as f64;
        let chi2: f64 =
            hits.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
        // Critical value of chi-square with 7 degrees of freedom at p = 0.01.
        assert!(chi2 < 18.475, "chi-square {chi2} rejects uniformity");
    }

    #[test]
    fn tree_root_tracks_leaf_sum_under_random_updates() {
        let mut buf = PrioritizedBuffer::new(100, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for a in 0..100 {
            buf.insert(exp_with(a % 7, 0.0)).unwrap();
        }
        for _ in 0..10_000 {
            let slot = rng.gen_range(0..100usize);
            let gen = buf.generations[slot];
            let delta: f64 = rng.gen_range(0.0..50.0);
            buf.update_priorities(&[SampleRef { slot, generation: gen }], &[delta]).unwrap();
        }
        let leaf_sum: f64 = (0..100).map(|s| buf.leaf_priority(s)).sum();
        let rel = (buf.total_priority() - leaf_sum).abs() / leaf_sum;
        assert!(rel < 1e-6, "root drifted by {rel} relative");
        buf.rebuild();
        let rel2 = (buf.total_priority() - leaf_sum).abs() / leaf_sum;
        assert!(rel2 < 1e-12);
    }

    #[test]
    fn stale_references_are_skipped_and_counted() {
        let mut buf = PrioritizedBuffer::new(2, 1.0).unwrap();
        buf.insert(exp_with(0, 0.0)).unwrap();
        buf.insert(exp_with(1, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = buf.sample(2, 1.0, &mut rng).unwrap();
        // Two more inserts overwrite both ring slots.
        buf.insert(exp_with(2, 0.0)).unwrap();
        buf.insert(exp_with(3, 0.0)).unwrap();
        let before: Vec<f64> = (0..2).map(|s| buf.leaf_priority(s)).collect();
        buf.update_priorities(&batch.refs, &[9.0, 9.0]).unwrap();
        assert_eq!(buf.stale_skips(), 2);
        for s in 0..2 {
            assert_eq!(buf.leaf_priority(s), before[s]);
        }
    }

    #[test]
    fn is_weights_match_the_formula_and_cap_at_one() {
        let mut buf = PrioritizedBuffer::new(2, 1.0).unwrap();
        buf.insert(exp_with(0, 0.0)).unwrap();
        buf.insert(exp_with(1, 0.0)).unwrap();
        buf.update_priorities(
            &[
                SampleRef { slot: 0, generation: 1 },
                SampleRef { slot: 1, generation: 2 },
            ],
            &[1.0 - EPS_PRIO, 3.0 - EPS_PRIO],
        )
        .unwrap();
        let beta = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let b = buf.sample(2, beta, &mut rng).unwrap();
            let max_w = b.weights.iter().copied().fold(0.0f64, f64::max);
            assert!((max_w - 1.0).abs() < 1e-15);
            for (i, r) in b.refs.iter().enumerate() {
                let prob = buf.leaf_priority(r.slot) / buf.total_priority();
                let raw = (2.0 * prob).powf(-beta);
                let raw_max: f64 = b
                    .refs
                    .iter()
                    .map(|r2| {
                        (2.0 * buf.leaf_priority(r2.slot) / buf.total_priority()).powf(-beta)
                    })
                    .fold(0.0, f64::max);
                assert!((b.weights[i] - raw / raw_max).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn undersized_buffer_and_bad_input_are_rejected() {
        let mut buf = PrioritizedBuffer::new(4, DEFAULT_ALPHA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(buf.sample(1, 1.0, &mut rng).is_err());
        buf.insert(exp_with(0, 0.0)).unwrap();
        assert!(buf.sample(2, 1.0, &mut rng).is_err());
        let mut bad = exp_with(0, f64::NAN);
        assert!(buf.insert(bad.clone()).is_err());
        bad.reward = 0.0;
        bad.state[3] = f64::INFINITY;
        assert!(buf.insert(bad).is_err());
    }

    #[test]
    fn beta_anneals_linearly_to_one() {
        assert_eq!(beta_schedule(0.4, 0, 1000), 0.4);
        assert!((beta_schedule(0.4, 500, 1000) - 0.7).abs() < 1e-12);
        assert_eq!(beta_schedule(0.4, 1000, 1000), 1.0);
        assert_eq!(beta_schedule(0.4, 5000, 1000), 1.0);
    }

    #[test]
    fn dump_lists_live_experiences() {
        let mut buf = PrioritizedBuffer::new(3, DEFAULT_ALPHA).unwrap();
        buf.insert(exp_with(5, 1.5)).unwrap();
        buf.insert(exp_with(6, -0.5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("buffer.txt");
        buf.dump(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("0 1 "));
        let fields: Vec<&str> = lines[0].split_whitespace().collect();
        assert_eq!(fields.len(), 6 + 2 * STATE_DIM + FEATURE_DIM);
    }
}
