//! Experience replay: one flat ring buffer, or per-destination partitions.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::topology::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Flat buffer, base reward.
    Plain,
    /// Flat buffer, destination-shaped reward.
    Sherb,
    /// Buffer partitioned by destination base station, base reward.
    Hherb,
}

impl BufferMode {
    /// Whether transitions carry the destination-shaped reward.
    pub fn shaped(self) -> bool {
        self == BufferMode::Sherb
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub o: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub o_next: Vec<f64>,
    /// Valid slots at `o_next`.
    pub mask_next: Vec<bool>,
    /// Agent whose networks score `o_next`; `None` for the collecting agent.
    pub next_agent: Option<usize>,
    pub done: bool,
    /// Valid slots when the action was taken.
    pub mask: Vec<bool>,
    pub destination: NodeId,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    mode: BufferMode,
    capacity: usize,
    partitions: BTreeMap<NodeId, VecDeque<Transition>>,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(mode: BufferMode, capacity: usize) -> Self {
        ReplayBuffer {
            mode,
            capacity: capacity.max(1),
            partitions: BTreeMap::new(),
            len: 0,
        }
    }

    pub fn mode(&self) -> BufferMode {
        self.mode
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

    fn key(&self, t: &Transition) -> NodeId {
        match self.mode {
            BufferMode::Hherb => t.destination,
            _ => NodeId(u32::MAX),
        }
    }

    /// Partition keys and sizes. Flat buffers report one partition.
    pub fn partitions(&self) -> impl Iterator<Item = (NodeId, usize)> + '_ {
        self.partitions.iter().map(|(k, v)| (*k, v.len()))
    }

    pub fn partition(&self, key: NodeId) -> impl Iterator<Item = &Transition> {
        self.partitions.get(&key).into_iter().flatten()
    }

    /// Appends `t`. When full, evicts the oldest entry of `t`'s partition, or
    /// of the largest partition if `t`'s is empty.
    pub fn push(&mut self, t: Transition) {
        let key = self.key(&t);
        if self.len == self.capacity {
            let victim = match self.partitions.get(&key) {
                Some(p) if !p.is_empty() => key,
                _ => *self
                    .partitions
                    .iter()
                    .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))
                    .expect("full buffer has a partition")
                    .0,
            };
            let p = self.partitions.get_mut(&victim).expect("victim exists");
            p.pop_front();
            if p.is_empty() {
                self.partitions.remove(&victim);
            }
            self.len -= 1;
        }
        self.partitions.entry(key).or_default().push_back(t);
        self.len += 1;
    }

    /// Draws `n` transitions with replacement. Partitioned buffers pick a
    /// nonempty partition uniformly, then an entry uniformly within it.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        if self.is_empty() {
            return Vec::new();
        }
        let parts: Vec<&VecDeque<Transition>> = self.partitions.values().collect();
        (0..n)
            .map(|_| {
                let p = parts[rng.gen_range(0..parts.len())];
                &p[rng.gen_range(0..p.len())]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dest: u32, r: f64) -> Transition {
        Transition {
            o: vec![0.0],
            a: 0,
            r,
            o_next: vec![0.0],
            mask_next: vec![true],
            next_agent: None,
            done: false,
            mask: vec![true],
            destination: NodeId(dest),
        }
    }

    #[test]
    fn flat_buffer_is_fifo_ring() {
        let mut b = ReplayBuffer::new(BufferMode::Plain, 3);
        for i in 0..5 {
            b.push(t(i % 2, f64::from(i)));
        }
        assert_eq!(b.len(), 3);
        let rs: Vec<f64> = b.partitions.values().flatten().map(|x| x.r).collect();
        assert_eq!(rs, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn partitions_hold_only_their_destination() {
        let mut b = ReplayBuffer::new(BufferMode::Hherb, 10);
        for i in 0..25 {
            b.push(t(i % 3, f64::from(i)));
        }
        assert_eq!(b.len(), 10);
        for (k, _) in b.partitions().collect::<Vec<_>>() {
            assert!(b.partition(k).all(|x| x.destination == k));
        }
    }

    #[test]
    fn partition_sampling_is_uniform_over_partitions() {
        let mut b = ReplayBuffer::new(BufferMode::Hherb, 1000);
        for _ in 0..90 {
            b.push(t(0, 0.0));
        }
        for _ in 0..10 {
            b.push(t(1, 1.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.sample(20_000, &mut rng);
        let ones = s.iter().filter(|x| x.destination == NodeId(1)).count() as f64 / 20_000.0;
        assert!((ones - 0.5).abs() < 0.02, "{ones}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let mut b = ReplayBuffer::new(BufferMode::Sherb, 100);
        for i in 0..50 {
            b.push(t(0, f64::from(i)));
        }
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            b.sample(16, &mut rng).iter().map(|x| x.r).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }
}
