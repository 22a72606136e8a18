//! Permissioned ledger for UAV membership and status: signed transactions,
//! gossip among full nodes, PBFT-committed blocks and periodic
//! re-authentication.

pub mod chain;
pub mod codec;
pub mod crypto;
pub mod gossip;
pub mod membership;
pub mod pbft;
pub mod tx;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use chain::{verify_chain, Block, BlockHeader, Certificate, ChainVerdict, LightLedger};
pub use crypto::{Crypto, Digest, KeyPair};
pub use gossip::{gossip_broadcast, GossipReport, TxPool};
pub use membership::{AdmissionRules, DefaultAdmission, Identity, IdentityStatus, JoinRequest, Registry, Rejected};
pub use pbft::{pbft_round, Behavior, ConsensusOutcome, PbftReplicaState};
pub use tx::{ExitReason, Transaction, TxKind, TxPayload};

use crate::error::{Error, Result};
use crate::topology::{NodeId, Topology, Vec3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CryptoKind {
    /// SHA-256 and Ed25519.
    #[default]
    Real,
    /// Non-cryptographic hash and signature doubles.
    Fast,
}

impl CryptoKind {
    pub fn build(self) -> Crypto {
        match self {
            CryptoKind::Real => Crypto::real(),
            CryptoKind::Fast => Crypto::fast(),
        }
    }
}

/// A Byzantine replica for consensus rounds `start_round..stop_round`.
/// `replica` indexes the committee in proposer order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub replica: usize,
    pub behavior: Behavior,
    #[serde(default)]
    pub start_round: u64,
    #[serde(default = "far")]
    pub stop_round: u64,
}

fn far() -> u64 {
    u64::MAX
}

/// Per-UAV event probabilities, sampled once per block period.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChurnConfig {
    pub exit_probability: f64,
    pub rejoin_probability: f64,
    /// Chance that a UAV stops answering authentication challenges.
    pub silent_probability: f64,
    /// Exits requested at fixed steps.
    pub scripted_exits: Vec<ScriptedEvent>,
    /// UAVs that go silent at fixed steps.
    pub scripted_silences: Vec<ScriptedEvent>,
}

/// A churn event applied at the first block period boundary at or after
/// `step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub step: u64,
    pub node: NodeId,
}

impl ScriptedEvent {
    /// True when the epoch closing at `step` is the first one at or after
    /// the event.
    pub fn due(&self, step: u64, period: u64) -> bool {
        self.step <= step && step < self.step + period
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LedgerConfig {
    pub enabled: bool,
    pub crypto: CryptoKind,
    pub block_period_steps: u64,
    pub auth_period_steps: u64,
    /// Full nodes per cluster; they form the consensus committee.
    pub heads_per_cluster: usize,
    pub gossip_fanout: usize,
    pub max_view_changes: u32,
    pub max_block_txs: usize,
    pub faults: Vec<FaultEntry>,
    pub churn: ChurnConfig,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig {
            enabled: true,
            crypto: CryptoKind::Real,
            block_period_steps: 5,
            auth_period_steps: 20,
            heads_per_cluster: 2,
            gossip_fanout: 2,
            max_view_changes: 4,
            max_block_txs: 256,
            faults: Vec::new(),
            churn: ChurnConfig::default(),
        }
    }
}

impl LedgerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_period_steps == 0 || self.auth_period_steps == 0 {
            return Err(Error::Config("ledger periods must be positive".into()));
        }
        if self.gossip_fanout == 0 {
            return Err(Error::Config("gossip_fanout must be positive".into()));
        }
        let c = &self.churn;
        for p in [c.exit_probability, c.rejoin_probability, c.silent_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("churn probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Last committed status of one UAV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusEntry {
    pub queue_len: u32,
    pub position: Vec3,
    pub neighbors: Vec<NodeId>,
    pub block_height: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerStats {
    pub rounds: u64,
    pub committed_blocks: u64,
    pub failed_rounds: u64,
    /// Rounds skipped because fewer than four full nodes were active.
    pub skipped_rounds: u64,
    pub view_changes: u64,
    pub messages: u64,
    pub gossip_rounds: u64,
    pub gossip_rejected: u64,
    pub joins: u64,
    pub rejected_joins: u64,
    pub exits: u64,
    pub revocations: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOutcome {
    pub height: Option<u64>,
    pub view_changes: u32,
    pub activated: Vec<NodeId>,
    pub revoked: Vec<NodeId>,
}

fn tx_valid(registry: &Registry, crypto: &Crypto, tx: &Transaction) -> bool {
    match &tx.payload {
        TxPayload::Join { public_key } => tx.verify(crypto, public_key),
        _ => registry
            .active(tx.author)
            .is_some_and(|id| tx.verify(crypto, &id.public_key)),
    }
}

/// The ledger as run alongside the simulator. Holds every UAV's key, the
/// committed registry and chain, one transaction pool per full node and
/// the committed status snapshot routing reads from.
pub struct LedgerRuntime {
    cfg: LedgerConfig,
    crypto: Crypto,
    keys: BTreeMap<NodeId, KeyPair>,
    generations: BTreeMap<NodeId, u64>,
    registry: Registry,
    nonces: BTreeMap<NodeId, u64>,
    committed_nonces: BTreeMap<NodeId, u64>,
    pools: BTreeMap<NodeId, TxPool>,
    chain: Vec<Block>,
    light: LightLedger,
    status: BTreeMap<NodeId, StatusEntry>,
    silent: BTreeSet<NodeId>,
    pending_exit: BTreeSet<NodeId>,
    stats: LedgerStats,
    rng: ChaCha8Rng,
}

impl LedgerRuntime {
    /// Issues keys to every UAV in `topo` and commits a genesis block of
    /// their joins, certified by the initial full nodes.
    pub fn genesis(topo: &Topology, cfg: LedgerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let crypto = cfg.crypto.build();
        let mut rt = LedgerRuntime {
            cfg,
            crypto,
            keys: BTreeMap::new(),
            generations: BTreeMap::new(),
            registry: Registry::default(),
            nonces: BTreeMap::new(),
            committed_nonces: BTreeMap::new(),
            pools: BTreeMap::new(),
            chain: Vec::new(),
            light: LightLedger::default(),
            status: BTreeMap::new(),
            silent: BTreeSet::new(),
            pending_exit: BTreeSet::new(),
            stats: LedgerStats::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut txs = Vec::new();
        for node in topo.uavs().filter(|n| n.active) {
            let kp = rt.issue_key(node.id);
            let tx = Transaction::new(
                node.id,
                rt.next_nonce(node.id),
                TxPayload::Join {
                    public_key: kp.public.clone(),
                },
            )
            .signed(&rt.crypto, &kp.secret);
            rt.registry.register_pending(node.id, kp.public.clone(), 0);
            txs.push(tx);
        }
        let committee = topo.cluster_heads(rt.cfg.heads_per_cluster);
        let proposer = *committee
            .first()
            .ok_or_else(|| Error::Config("topology has no UAVs to form a committee".into()))?;
        let header = BlockHeader {
            height: 0,
            prev_hash: [0; 32],
            payload_hash: chain::merkle_root(&txs, &rt.crypto),
            proposer,
            step: 0,
            committee: committee.clone(),
        };
        let msg = chain::commit_bytes(0, &header.hash(&rt.crypto));
        let signatures = committee
            .iter()
            .map(|c| (*c, rt.crypto.sig.sign(&rt.keys[c].secret, &msg)))
            .collect();
        let block = Block {
            header,
            transactions: txs,
            certificate: Certificate { signatures },
        };
        rt.apply(block)?;
        Ok(rt)
    }

    fn issue_key(&mut self, node: NodeId) -> KeyPair {
        let g = self.generations.entry(node).or_insert(0);
        *g += 1;
        let kp = self.crypto.sig.keypair((u64::from(node.0) << 20) ^ *g);
        self.keys.insert(node, kp.clone());
        kp
    }

    fn next_nonce(&mut self, node: NodeId) -> u64 {
        let n = self.nonces.entry(node).or_insert(0);
        *n += 1;
        *n
    }

    pub fn config(&self) -> &LedgerConfig {
        &self.cfg
    }

    pub fn crypto(&self) -> &Crypto {
        &self.crypto
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn light_ledger(&self) -> &LightLedger {
        &self.light
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn stats(&self) -> &LedgerStats {
        &self.stats
    }

    pub fn is_active(&self, node: NodeId) -> bool {
        self.registry.is_active(node)
    }

    pub fn status(&self, node: NodeId) -> Option<&StatusEntry> {
        self.status.get(&node)
    }

    pub fn pool_len(&self) -> usize {
        self.pools.values().map(TxPool::len).max().unwrap_or(0)
    }

    pub fn committee(&self, topo: &Topology) -> Vec<NodeId> {
        topo.cluster_heads(self.cfg.heads_per_cluster)
            .into_iter()
            .filter(|n| self.registry.is_active(*n))
            .collect()
    }

    fn gossip(&mut self, tx: Transaction, topo: &Topology) {
        let committee = self.committee(topo);
        if committee.is_empty() {
            return;
        }
        let origin = if committee.contains(&tx.author) {
            tx.author
        } else {
            committee[tx.author.index() % committee.len()]
        };
        let overlay = gossip::complete_overlay(&committee);
        let registry = &self.registry;
        let crypto = &self.crypto;
        let report = gossip_broadcast(
            &tx,
            origin,
            &overlay,
            self.cfg.gossip_fanout,
            &mut self.pools,
            |_, t| tx_valid(registry, crypto, t),
            &mut self.rng,
            64,
        );
        self.stats.gossip_rounds += u64::from(report.rounds);
        self.stats.gossip_rejected += report.rejected as u64;
    }

    /// Signs and gossips a status transaction for `node`.
    pub fn submit_status(
        &mut self,
        node: NodeId,
        queue_len: u32,
        position: Vec3,
        neighbors: Vec<NodeId>,
        topo: &Topology,
    ) {
        let Some(kp) = self.keys.get(&node).cloned() else { return };
        if !self.registry.is_active(node) {
            return;
        }
        let tx = Transaction::new(
            node,
            self.next_nonce(node),
            TxPayload::Status {
                queue_len,
                position,
                neighbors,
            },
        )
        .signed(&self.crypto, &kp.secret);
        self.gossip(tx, topo);
    }

    /// Checks a join request against `rules` and submits the join. The node
    /// becomes active once a block containing it commits.
    pub fn admit(
        &mut self,
        req: &JoinRequest,
        rules: &dyn AdmissionRules,
        step: u64,
        topo: &Topology,
    ) -> std::result::Result<(), Rejected> {
        if let Err(e) = rules.check(req, &self.registry, &self.crypto) {
            self.stats.rejected_joins += 1;
            return Err(e);
        }
        let Some(kp) = self.keys.get(&req.node).filter(|k| k.public == req.public_key).cloned() else {
            self.stats.rejected_joins += 1;
            return Err(Rejected::BadCredential);
        };
        self.registry.register_pending(req.node, req.public_key.clone(), step);
        let tx = Transaction::new(
            req.node,
            self.next_nonce(req.node),
            TxPayload::Join {
                public_key: req.public_key.clone(),
            },
        )
        .signed(&self.crypto, &kp.secret);
        self.gossip(tx, topo);
        Ok(())
    }

    /// A revoked or departed node asks to come back under a fresh key.
    pub fn request_rejoin(&mut self, node: NodeId, step: u64, topo: &Topology) -> std::result::Result<(), Rejected> {
        let kp = self.issue_key(node);
        self.silent.remove(&node);
        let req = JoinRequest::new(node, &kp, step, &self.crypto);
        self.admit(&req, &DefaultAdmission::default(), step, topo)
    }

    /// Voluntary departure, signed by the leaving node.
    pub fn request_exit(&mut self, node: NodeId, topo: &Topology) {
        if !self.registry.is_active(node) || !self.pending_exit.insert(node) {
            return;
        }
        let kp = self.keys[&node].clone();
        let tx = Transaction::new(
            node,
            self.next_nonce(node),
            TxPayload::Exit {
                subject: node,
                reason: ExitReason::Voluntary,
            },
        )
        .signed(&self.crypto, &kp.secret);
        self.gossip(tx, topo);
    }

    /// Makes `node` ignore authentication challenges from now on.
    pub fn set_silent(&mut self, node: NodeId, silent: bool) {
        if silent {
            self.silent.insert(node);
        } else {
            self.silent.remove(&node);
        }
    }

    /// Challenges every active identity whose last authentication is at
    /// least one period old. Nodes that fail are reported in an exit
    /// transaction authored by a full node; the revocation takes effect when
    /// that transaction commits. Returns the nodes that failed.
    pub fn reauthenticate_epoch(&mut self, step: u64, topo: &Topology) -> Vec<NodeId> {
        let due: Vec<(NodeId, Vec<u8>)> = self
            .registry
            .identities()
            .iter()
            .filter(|i| i.status == IdentityStatus::Active)
            .filter(|i| step.saturating_sub(i.last_auth_at) >= self.cfg.auth_period_steps)
            .map(|i| (i.node, i.public_key.clone()))
            .collect();
        let mut failed = Vec::new();
        for (node, public) in due {
            let challenge = membership::auth_challenge(node, step, &self.crypto);
            let response = if self.silent.contains(&node) {
                Vec::new()
            } else {
                self.crypto.sig.sign(&self.keys[&node].secret, &challenge)
            };
            if self.crypto.sig.verify(&public, &challenge, &response) {
                self.registry.touch_auth(node, step);
            } else if !self.pending_exit.contains(&node) {
                failed.push(node);
            }
        }
        let committee = self.committee(topo);
        for &node in &failed {
            let Some(&reporter) = committee.iter().find(|c| **c != node) else { break };
            self.pending_exit.insert(node);
            let kp = self.keys[&reporter].clone();
            let tx = Transaction::new(
                reporter,
                self.next_nonce(reporter),
                TxPayload::Exit {
                    subject: node,
                    reason: ExitReason::AuthFailed,
                },
            )
            .signed(&self.crypto, &kp.secret);
            self.gossip(tx, topo);
        }
        failed
    }

    /// Runs one consensus round over the pending transactions.
    pub fn produce_block(&mut self, step: u64, topo: &Topology) -> Result<BlockOutcome> {
        let round = self.stats.rounds;
        self.stats.rounds += 1;
        let mut outcome = BlockOutcome {
            height: None,
            view_changes: 0,
            activated: Vec::new(),
            revoked: Vec::new(),
        };
        let mut committee = self.committee(topo);
        if committee.len() < 4 {
            self.stats.skipped_rounds += 1;
            return Ok(outcome);
        }
        let height = self.chain.len() as u64;
        let shift = height as usize % committee.len();
        committee.rotate_left(shift);
        let proposer = committee[0];

        let txs = self.select_transactions(proposer);
        let header = BlockHeader {
            height,
            prev_hash: self.chain.last().map_or([0; 32], |b| b.hash(&self.crypto)),
            payload_hash: chain::merkle_root(&txs, &self.crypto),
            proposer,
            step,
            committee: {
                let mut c = committee.clone();
                c.sort();
                c
            },
        };
        let digest = header.hash(&self.crypto);
        let faults: BTreeMap<usize, Behavior> = self
            .cfg
            .faults
            .iter()
            .filter(|f| f.replica < committee.len() && (f.start_round..f.stop_round).contains(&round))
            .map(|f| (f.replica, f.behavior))
            .collect();
        let mut replicas: Vec<PbftReplicaState> = (0..committee.len())
            .map(|i| PbftReplicaState::new(i, committee.len(), digest))
            .collect();
        let signer = KeyedSigner {
            crypto: &self.crypto,
            keys: committee.iter().map(|c| self.keys[c].clone()).collect(),
            height,
        };
        let mut rogue = digest;
        rogue[0] ^= 0xff;
        let result = pbft_round(&mut replicas, &faults, &signer, rogue, self.cfg.max_view_changes)?;
        self.stats.view_changes += u64::from(result.view_changes);
        self.stats.messages += result.messages as u64;
        outcome.view_changes = result.view_changes;
        if result.committed != Some(digest) {
            self.stats.failed_rounds += 1;
            return Ok(outcome);
        }
        let mut signatures: Vec<(NodeId, Vec<u8>)> = result
            .certificate
            .into_iter()
            .map(|(r, sig)| (committee[r], sig))
            .collect();
        signatures.sort();
        let block = Block {
            header,
            transactions: txs,
            certificate: Certificate { signatures },
        };
        let (activated, revoked) = self.apply(block)?;
        outcome.height = Some(height);
        outcome.activated = activated;
        outcome.revoked = revoked;
        Ok(outcome)
    }

    /// FIFO from the proposer's pool, skipping transactions that would not
    /// verify against the membership as it evolves within the block.
    fn select_transactions(&mut self, proposer: NodeId) -> Vec<Transaction> {
        let Some(pool) = self.pools.get(&proposer) else {
            return Vec::new();
        };
        let mut registry = self.registry.clone();
        let mut last = self.committed_nonces.clone();
        let mut picked = Vec::new();
        let mut stale = BTreeSet::new();
        for tx in pool.iter() {
            if picked.len() >= self.cfg.max_block_txs {
                break;
            }
            let fresh = last.get(&tx.author).map_or(true, |&n| tx.nonce > n);
            let ok = fresh
                && match &tx.payload {
                    TxPayload::Join { public_key } => {
                        registry.current(tx.author).is_some_and(|i| i.status == IdentityStatus::Pending)
                            && tx.verify(&self.crypto, public_key)
                    }
                    _ => tx_valid(&registry, &self.crypto, tx),
                };
            if !ok {
                stale.insert((tx.author, tx.nonce));
                continue;
            }
            if let TxPayload::Join { public_key } = &tx.payload {
                registry.activate(tx.author, public_key, 0);
            }
            last.insert(tx.author, tx.nonce);
            picked.push(tx.clone());
        }
        // Exits apply after the whole block, so later txs by an exiting
        // author in the same block remain valid.
        if !stale.is_empty() {
            for p in self.pools.values_mut() {
                p.remove(&stale);
            }
        }
        picked
    }

    fn apply(&mut self, block: Block) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
        let h = block.header.height;
        let step = block.header.step;
        let mut activated = Vec::new();
        let mut exits = Vec::new();
        let mut keys = BTreeSet::new();
        for tx in &block.transactions {
            keys.insert((tx.author, tx.nonce));
            self.committed_nonces.insert(tx.author, tx.nonce);
            match &tx.payload {
                TxPayload::Join { public_key } => {
                    if self.registry.activate(tx.author, public_key, step) {
                        activated.push(tx.author);
                        self.stats.joins += 1;
                    }
                }
                TxPayload::Status {
                    queue_len,
                    position,
                    neighbors,
                } => {
                    self.status.insert(
                        tx.author,
                        StatusEntry {
                            queue_len: *queue_len,
                            position: *position,
                            neighbors: neighbors.clone(),
                            block_height: h,
                        },
                    );
                }
                TxPayload::Exit { subject, reason } => {
                    exits.push(*subject);
                    match reason {
                        ExitReason::Voluntary => self.stats.exits += 1,
                        ExitReason::AuthFailed => self.stats.revocations += 1,
                    }
                }
            }
        }
        let mut revoked = Vec::new();
        for s in exits {
            if self.registry.revoke(s) {
                revoked.push(s);
            }
            self.pending_exit.remove(&s);
            self.status.remove(&s);
        }
        for p in self.pools.values_mut() {
            p.remove(&keys);
        }
        self.light.append(block.header.clone(), &self.crypto)?;
        self.chain.push(block);
        self.stats.committed_blocks += 1;
        Ok((activated, revoked))
    }
}

struct KeyedSigner<'a> {
    crypto: &'a Crypto,
    keys: Vec<KeyPair>,
    height: u64,
}

impl pbft::CommitSigner for KeyedSigner<'_> {
    fn sign(&self, replica: usize, digest: &Digest) -> Vec<u8> {
        self.crypto
            .sig
            .sign(&self.keys[replica].secret, &chain::commit_bytes(self.height, digest))
    }

    fn verify(&self, replica: usize, digest: &Digest, sig: &[u8]) -> bool {
        self.keys.get(replica).is_some_and(|k| {
            self.crypto
                .sig
                .verify(&k.public, &chain::commit_bytes(self.height, digest), sig)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::TopologyConfig;

    fn setup(crypto: CryptoKind) -> (Topology, LedgerRuntime) {
        let topo = Topology::from_config(&TopologyConfig::default()).unwrap();
        let cfg = LedgerConfig {
            crypto,
            auth_period_steps: 5,
            ..LedgerConfig::default()
        };
        let rt = LedgerRuntime::genesis(&topo, cfg, 7).unwrap();
        (topo, rt)
    }

    #[test]
    fn genesis_activates_all_uavs() {
        let (topo, rt) = setup(CryptoKind::Real);
        for u in topo.active_uavs() {
            assert!(rt.is_active(u));
        }
        assert_eq!(verify_chain(rt.chain(), rt.crypto()), ChainVerdict::Valid);
    }

    #[test]
    fn status_commits_and_chain_verifies() {
        let (topo, mut rt) = setup(CryptoKind::Real);
        let u = topo.active_uavs().next().unwrap();
        rt.submit_status(u, 3, [1.0, 2.0, 3.0], vec![], &topo);
        let out = rt.produce_block(5, &topo).unwrap();
        assert_eq!(out.height, Some(1));
        assert_eq!(rt.status(u).unwrap().queue_len, 3);
        assert_eq!(rt.pool_len(), 0);
        assert_eq!(verify_chain(rt.chain(), rt.crypto()), ChainVerdict::Valid);
        assert_eq!(rt.light_ledger().headers.len(), 2);
    }

    #[test]
    fn all_respond_means_no_revocations() {
        let (topo, mut rt) = setup(CryptoKind::Fast);
        assert!(rt.reauthenticate_epoch(10, &topo).is_empty());
    }

    #[test]
    fn silent_node_is_revoked_after_commit() {
        let (topo, mut rt) = setup(CryptoKind::Fast);
        let committee = rt.committee(&topo);
        let victim = topo.active_uavs().find(|u| !committee.contains(u)).unwrap();
        rt.set_silent(victim, true);
        assert_eq!(rt.reauthenticate_epoch(10, &topo), vec![victim]);
        assert!(rt.is_active(victim));
        let out = rt.produce_block(10, &topo).unwrap();
        assert_eq!(out.revoked, vec![victim]);
        assert!(!rt.is_active(victim));
        assert_eq!(verify_chain(rt.chain(), rt.crypto()), ChainVerdict::Valid);
    }

    #[test]
    fn rejoin_after_exit_gets_new_identity() {
        let (mut topo, mut rt) = setup(CryptoKind::Fast);
        let committee = rt.committee(&topo);
        let u = topo.active_uavs().find(|u| !committee.contains(u)).unwrap();
        let old = rt.registry().active(u).unwrap().serial;
        rt.request_exit(u, &topo);
        rt.produce_block(5, &topo).unwrap();
        assert!(!rt.is_active(u));
        topo.set_active(u, false);
        topo.set_active(u, true);
        rt.request_rejoin(u, 6, &topo).unwrap();
        assert!(!rt.is_active(u));
        let out = rt.produce_block(10, &topo).unwrap();
        assert_eq!(out.activated, vec![u]);
        let new = rt.registry().active(u).unwrap().serial;
        assert_ne!(old, new);
        assert_eq!(rt.registry().identities()[old as usize].status, IdentityStatus::Revoked);
        assert_eq!(verify_chain(rt.chain(), rt.crypto()), ChainVerdict::Valid);
    }

    #[test]
    fn mute_primary_still_commits() {
        let topo = Topology::from_config(&TopologyConfig::default()).unwrap();
        let cfg = LedgerConfig {
            crypto: CryptoKind::Fast,
            faults: vec![FaultEntry {
                replica: 0,
                behavior: Behavior::Mute,
                start_round: 0,
                stop_round: u64::MAX,
            }],
            ..LedgerConfig::default()
        };
        let mut rt = LedgerRuntime::genesis(&topo, cfg, 1).unwrap();
        let out = rt.produce_block(5, &topo).unwrap();
        assert_eq!(out.height, Some(1));
        assert_eq!(out.view_changes, 1);
        assert_eq!(verify_chain(rt.chain(), rt.crypto()), ChainVerdict::Valid);
    }

    #[test]
    fn duplicate_join_rejected() {
        let (topo, mut rt) = setup(CryptoKind::Fast);
        let u = topo.active_uavs().next().unwrap();
        let kp = rt.crypto().sig.keypair(99);
        let req = JoinRequest::new(u, &kp, 3, rt.crypto());
        assert_eq!(
            rt.admit(&req, &DefaultAdmission::default(), 3, &topo),
            Err(Rejected::AlreadyMember)
        );
    }
}
