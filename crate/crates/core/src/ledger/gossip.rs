//! Push gossip of transactions among full nodes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tx::Transaction;
use crate::topology::NodeId;

/// FIFO transaction pool with duplicate suppression by `(author, nonce)`.
#[derive(Clone, Debug, Default)]
pub struct TxPool {
    queue: VecDeque<Transaction>,
    seen: BTreeSet<(NodeId, u64)>,
}

impl TxPool {
    /// Returns false if the transaction was already seen.
    pub fn insert(&mut self, tx: Transaction) -> bool {
        if !self.seen.insert((tx.author, tx.nonce)) {
            return false;
        }
        self.queue.push_back(tx);
        true
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.queue.iter()
    }

    /// Removes every transaction whose key is in `keys` from the queue. The
    /// keys stay marked as seen.
    pub fn remove(&mut self, keys: &BTreeSet<(NodeId, u64)>) {
        self.queue.retain(|t| !keys.contains(&(t.author, t.nonce)));
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GossipReport {
    /// Rounds until every reachable full node held the transaction.
    pub rounds: u32,
    pub reached: BTreeSet<NodeId>,
    pub pool_insertions: usize,
    pub duplicates: usize,
    /// Receptions discarded because the signature did not verify there.
    pub rejected: usize,
}

/// Spreads `tx` from `origin`: each round, every node holding it pushes to
/// `fanout` overlay neighbors chosen uniformly. `verify(node, tx)` is the
/// signature check a receiving node performs. Stops when all overlay nodes
/// hold the transaction or after `max_rounds`.
pub fn gossip_broadcast<R: Rng, V: Fn(NodeId, &Transaction) -> bool>(
    tx: &Transaction,
    origin: NodeId,
    overlay: &BTreeMap<NodeId, Vec<NodeId>>,
    fanout: usize,
    pools: &mut BTreeMap<NodeId, TxPool>,
    verify: V,
    rng: &mut R,
    max_rounds: u32,
) -> GossipReport {
    let mut report = GossipReport::default();
    if !verify(origin, tx) {
        report.rejected += 1;
        return report;
    }
    let mut holders = BTreeSet::from([origin]);
    if pools.entry(origin).or_default().insert(tx.clone()) {
        report.pool_insertions += 1;
    } else {
        report.duplicates += 1;
    }
    let mut refused: BTreeSet<NodeId> = BTreeSet::new();
    while holders.len() + refused.len() < overlay.len().max(1) && report.rounds < max_rounds {
        report.rounds += 1;
        let mut fresh = Vec::new();
        for &h in &holders {
            let Some(peers) = overlay.get(&h) else { continue };
            for &p in peers.choose_multiple(rng, fanout) {
                if holders.contains(&p) || fresh.contains(&p) {
                    report.duplicates += 1;
                    continue;
                }
                if !verify(p, tx) {
                    report.rejected += 1;
                    refused.insert(p);
                    continue;
                }
                if pools.entry(p).or_default().insert(tx.clone()) {
                    report.pool_insertions += 1;
                } else {
                    report.duplicates += 1;
                }
                fresh.push(p);
            }
        }
        holders.extend(fresh);
    }
    report.reached = holders;
    report
}

/// Every full node adjacent to every other.
pub fn complete_overlay(nodes: &[NodeId]) -> BTreeMap<NodeId, Vec<NodeId>> {
    nodes
        .iter()
        .map(|&n| (n, nodes.iter().copied().filter(|&m| m != n).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::tx::TxPayload;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tx() -> Transaction {
        Transaction::new(NodeId(1), 1, TxPayload::Join { public_key: vec![1] })
    }

    fn ids(n: u32) -> Vec<NodeId> {
        (0..n).map(NodeId).collect()
    }

    #[test]
    fn single_node_zero_rounds() {
        let mut pools = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = gossip_broadcast(&tx(), NodeId(0), &complete_overlay(&ids(1)), 2, &mut pools, |_, _| true, &mut rng, 10);
        assert_eq!(r.rounds, 0);
        assert_eq!(r.reached.len(), 1);
    }

    #[test]
    fn eight_nodes_fanout_two_reach_all_quickly() {
        for seed in 0..200 {
            let mut pools = BTreeMap::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = gossip_broadcast(&tx(), NodeId(3), &complete_overlay(&ids(8)), 2, &mut pools, |_, _| true, &mut rng, 50);
            assert_eq!(r.reached.len(), 8);
            assert!(r.rounds <= 6, "seed {seed} took {} rounds", r.rounds);
            assert_eq!(r.pool_insertions, 8);
        }
    }

    #[test]
    fn duplicate_send_inserts_once() {
        let mut pools = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let overlay = complete_overlay(&ids(4));
        gossip_broadcast(&tx(), NodeId(0), &overlay, 2, &mut pools, |_, _| true, &mut rng, 20);
        let again = gossip_broadcast(&tx(), NodeId(0), &overlay, 2, &mut pools, |_, _| true, &mut rng, 20);
        assert_eq!(again.pool_insertions, 0);
        assert!(pools.values().all(|p| p.len() == 1));
    }

    #[test]
    fn rejecting_hop_discards() {
        let mut pools = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = gossip_broadcast(&tx(), NodeId(0), &complete_overlay(&ids(4)), 3, &mut pools, |n, _| n != NodeId(2), &mut rng, 20);
        assert!(r.rejected >= 1);
        assert!(!r.reached.contains(&NodeId(2)));
        assert!(pools.get(&NodeId(2)).map_or(true, |p| p.is_empty()));
    }

    #[test]
    fn invalid_at_origin_goes_nowhere() {
        let mut pools = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = gossip_broadcast(&tx(), NodeId(0), &complete_overlay(&ids(4)), 2, &mut pools, |_, _| false, &mut rng, 20);
        assert_eq!(r.rejected, 1);
        assert!(r.reached.is_empty());
    }
}
