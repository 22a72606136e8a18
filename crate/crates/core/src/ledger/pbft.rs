//! Three-phase PBFT agreement on one block, with view changes.
//!
//! Replicas are deterministic state machines driven by a scheduler. Two
//! schedulers live here: [`pbft_round`], a synchronous FIFO schedule used by
//! the running ledger, and [`model_check`], which explores every schedule
//! within a bounded number of reorderings and timeouts.

use std::collections::hash_map::DefaultHasher;
use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::chain::{byzantine_bound, quorum};
use super::crypto::Digest;
use crate::error::{Error, Result};

pub type Replica = usize;

/// Evidence that `prepares` (backups, excluding the view's primary) sent
/// matching prepares for `digest` in `view`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreparedCert {
    pub view: u32,
    pub digest: Digest,
    pub prepares: Vec<Replica>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Msg {
    PrePrepare {
        view: u32,
        digest: Digest,
    },
    Prepare {
        view: u32,
        digest: Digest,
    },
    Commit {
        view: u32,
        digest: Digest,
        sig: Vec<u8>,
    },
    ViewChange {
        new_view: u32,
        prepared: Option<PreparedCert>,
    },
    NewView {
        view: u32,
        digest: Digest,
        proof: Vec<(Replica, Option<PreparedCert>)>,
    },
    /// Quorum of commit votes, sent by a committed replica to one that is
    /// still changing views.
    CommitProof {
        view: u32,
        digest: Digest,
        sigs: Vec<(Replica, Vec<u8>)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    PrePrepare,
    Prepare,
    Commit,
    Committed,
}

/// Scripted Byzantine behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Sends nothing.
    Mute,
    /// Proposes two blocks when primary and votes for both in every phase.
    Equivocate,
}

/// Stand-in for message signatures: a record of what was actually sent, so
/// certificates naming other replicas can be checked.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct SentLog {
    prepares: BTreeSet<(Replica, u32, Digest)>,
    view_changes: BTreeSet<(Replica, u32, Option<PreparedCert>)>,
    commits: BTreeSet<(Replica, u32, Digest)>,
}

impl SentLog {
    fn record(&mut self, from: Replica, msg: &Msg) {
        match msg {
            Msg::Prepare { view, digest } => {
                self.prepares.insert((from, *view, *digest));
            }
            Msg::ViewChange { new_view, prepared } => {
                self.view_changes.insert((from, *new_view, prepared.clone()));
            }
            Msg::Commit { view, digest, .. } => {
                self.commits.insert((from, *view, *digest));
            }
            _ => {}
        }
    }
}

/// Signs and checks commit votes.
pub trait CommitSigner {
    fn sign(&self, replica: Replica, digest: &Digest) -> Vec<u8>;
    fn verify(&self, replica: Replica, digest: &Digest, sig: &[u8]) -> bool;
}

/// No signatures; the scheduler authenticates senders.
pub struct Unsigned;

impl CommitSigner for Unsigned {
    fn sign(&self, _: Replica, _: &Digest) -> Vec<u8> {
        Vec::new()
    }
    fn verify(&self, _: Replica, _: &Digest, _: &[u8]) -> bool {
        true
    }
}

struct Auth<'a> {
    sent: &'a SentLog,
    signer: &'a dyn CommitSigner,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PbftReplicaState {
    pub index: Replica,
    pub n: usize,
    pub view: u32,
    proposal: Digest,
    accepted: BTreeMap<u32, Digest>,
    prepares: BTreeMap<(u32, Digest), BTreeSet<Replica>>,
    commits: BTreeMap<(u32, Digest), BTreeMap<Replica, Vec<u8>>>,
    prepared_in: BTreeSet<u32>,
    prepared: Option<PreparedCert>,
    committed: Option<(u32, Digest)>,
    view_changes: BTreeMap<u32, BTreeMap<Replica, Option<PreparedCert>>>,
    new_view_sent: BTreeSet<u32>,
    proof_sent: bool,
    /// Delivered messages, kept only when logging is enabled.
    pub log: Option<Vec<(Replica, Msg)>>,
}

impl PbftReplicaState {
    pub fn new(index: Replica, n: usize, proposal: Digest) -> Self {
        PbftReplicaState {
            index,
            n,
            view: 0,
            proposal,
            accepted: BTreeMap::new(),
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            prepared_in: BTreeSet::new(),
            prepared: None,
            committed: None,
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            proof_sent: false,
            log: None,
        }
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    fn f(&self) -> usize {
        byzantine_bound(self.n)
    }

    pub fn primary_of(&self, view: u32) -> Replica {
        view as usize % self.n
    }

    pub fn is_primary(&self) -> bool {
        self.primary_of(self.view) == self.index
    }

    pub fn committed(&self) -> Option<Digest> {
        self.committed.map(|(_, d)| d)
    }

    pub fn phase(&self) -> Phase {
        if self.committed.is_some() {
            Phase::Committed
        } else if self.prepared_in.contains(&self.view) {
            Phase::Commit
        } else if self.accepted.contains_key(&self.view) {
            Phase::Prepare
        } else {
            Phase::PrePrepare
        }
    }

    /// Commit signatures backing the committed block.
    pub fn commit_certificate(&self) -> Vec<(Replica, Vec<u8>)> {
        match self.committed {
            Some(key) => self.commits[&key].iter().map(|(r, s)| (*r, s.clone())).collect(),
            None => Vec::new(),
        }
    }

    fn start(&mut self, auth: &Auth<'_>) -> Vec<Msg> {
        let mut out = Vec::new();
        if self.view == 0 && self.is_primary() && !self.accepted.contains_key(&0) {
            self.accepted.insert(0, self.proposal);
            out.push(Msg::PrePrepare {
                view: 0,
                digest: self.proposal,
            });
        }
        self.progress(auth, &mut out);
        out
    }

    fn accept_and_prepare(&mut self, view: u32, digest: Digest, out: &mut Vec<Msg>) {
        self.accepted.insert(view, digest);
        if self.primary_of(view) != self.index {
            self.prepares.entry((view, digest)).or_default().insert(self.index);
            out.push(Msg::Prepare { view, digest });
        }
    }

    fn on_message(&mut self, from: Replica, msg: Msg, auth: &Auth<'_>) -> Vec<Msg> {
        if let Some(log) = &mut self.log {
            log.push((from, msg.clone()));
        }
        let mut out = Vec::new();
        match msg {
            Msg::PrePrepare { view, digest } => {
                if view == 0
                    && self.view == 0
                    && from == self.primary_of(0)
                    && !self.accepted.contains_key(&0)
                {
                    self.accept_and_prepare(0, digest, &mut out);
                }
            }
            Msg::Prepare { view, digest } => {
                self.prepares.entry((view, digest)).or_default().insert(from);
            }
            Msg::Commit { view, digest, sig } => {
                if auth.signer.verify(from, &digest, &sig) {
                    self.commits.entry((view, digest)).or_default().insert(from, sig);
                }
            }
            Msg::ViewChange { new_view, prepared } => {
                if self.cert_ok(prepared.as_ref(), auth) {
                    self.view_changes.entry(new_view).or_default().insert(from, prepared);
                    let support = self.view_changes[&new_view].len();
                    if new_view > self.view && support > self.f() && self.committed.is_none() {
                        self.enter_view(new_view, &mut out);
                    }
                }
            }
            Msg::NewView { view, digest, proof } => {
                if view > 0
                    && view >= self.view
                    && from == self.primary_of(view)
                    && !self.accepted.contains_key(&view)
                    && self.new_view_ok(view, &digest, &proof, auth)
                {
                    self.view = view;
                    self.accept_and_prepare(view, digest, &mut out);
                }
            }
            Msg::CommitProof { view, digest, sigs } => {
                if self.committed.is_none() && self.commit_proof_ok(view, &digest, &sigs, auth) {
                    self.committed = Some((view, digest));
                    self.commits.insert((view, digest), sigs.into_iter().collect());
                }
            }
        }
        self.progress(auth, &mut out);
        out
    }

    fn on_timeout(&mut self, auth: &Auth<'_>) -> Vec<Msg> {
        let mut out = Vec::new();
        if self.committed.is_none() {
            self.enter_view(self.view + 1, &mut out);
            self.progress(auth, &mut out);
        }
        out
    }

    fn enter_view(&mut self, view: u32, out: &mut Vec<Msg>) {
        self.view = view;
        self.view_changes
            .entry(view)
            .or_default()
            .insert(self.index, self.prepared.clone());
        out.push(Msg::ViewChange {
            new_view: view,
            prepared: self.prepared.clone(),
        });
    }

    fn cert_ok(&self, cert: Option<&PreparedCert>, auth: &Auth<'_>) -> bool {
        let Some(c) = cert else { return true };
        let distinct: BTreeSet<&Replica> = c.prepares.iter().collect();
        distinct.len() == c.prepares.len()
            && c.prepares.len() >= 2 * self.f()
            && c.prepares.iter().all(|&r| {
                r < self.n
                    && r != self.primary_of(c.view)
                    && auth.sent.prepares.contains(&(r, c.view, c.digest))
            })
    }

    fn commit_proof_ok(&self, view: u32, digest: &Digest, sigs: &[(Replica, Vec<u8>)], auth: &Auth<'_>) -> bool {
        let signers: BTreeSet<Replica> = sigs.iter().map(|(r, _)| *r).collect();
        signers.len() == sigs.len()
            && signers.len() >= quorum(self.n)
            && sigs.iter().all(|(r, sig)| {
                auth.sent.commits.contains(&(*r, view, *digest)) && auth.signer.verify(*r, digest, sig)
            })
    }

    fn new_view_ok(
        &self,
        view: u32,
        digest: &Digest,
        proof: &[(Replica, Option<PreparedCert>)],
        auth: &Auth<'_>,
    ) -> bool {
        let senders: BTreeSet<Replica> = proof.iter().map(|(r, _)| *r).collect();
        if senders.len() != proof.len() || senders.len() < quorum(self.n) {
            return false;
        }
        for (r, cert) in proof {
            if !auth.sent.view_changes.contains(&(*r, view, cert.clone()))
                || !self.cert_ok(cert.as_ref(), auth)
            {
                return false;
            }
        }
        match choose_digest(proof) {
            Some(d) => &d == digest,
            None => true,
        }
    }

    fn progress(&mut self, auth: &Auth<'_>, out: &mut Vec<Msg>) {
        loop {
            let before = out.len();
            let v = self.view;
            if let Some(&d) = self.accepted.get(&v) {
                if !self.prepared_in.contains(&v) {
                    let primary = self.primary_of(v);
                    let backups: Vec<Replica> = self
                        .prepares
                        .get(&(v, d))
                        .map(|s| s.iter().copied().filter(|&r| r != primary).collect())
                        .unwrap_or_default();
                    if backups.len() >= 2 * self.f() {
                        self.prepared_in.insert(v);
                        self.prepared = Some(PreparedCert {
                            view: v,
                            digest: d,
                            prepares: backups,
                        });
                        let sig = auth.signer.sign(self.index, &d);
                        self.commits
                            .entry((v, d))
                            .or_default()
                            .insert(self.index, sig.clone());
                        out.push(Msg::Commit {
                            view: v,
                            digest: d,
                            sig,
                        });
                    }
                }
            }
            if self.committed.is_none() {
                let q = quorum(self.n);
                self.committed = self.prepared_in.iter().find_map(|w| {
                    let d = self.accepted[w];
                    (self.commits.get(&(*w, d)).map_or(0, |c| c.len()) >= q).then_some((*w, d))
                });
            }
            if let Some((cv, cd)) = self.committed.filter(|_| !self.proof_sent) {
                let lagging = self
                    .view_changes
                    .range(cv + 1..)
                    .any(|(_, m)| m.keys().any(|&r| r != self.index));
                if lagging {
                    self.proof_sent = true;
                    out.push(Msg::CommitProof {
                        view: cv,
                        digest: cd,
                        sigs: self.commit_certificate(),
                    });
                }
            }
            if v > 0 && self.primary_of(v) == self.index && !self.new_view_sent.contains(&v) {
                if let Some(vcs) = self.view_changes.get(&v).filter(|m| m.len() >= quorum(self.n)) {
                    let proof: Vec<(Replica, Option<PreparedCert>)> =
                        vcs.iter().map(|(r, c)| (*r, c.clone())).collect();
                    let digest = choose_digest(&proof).unwrap_or(self.proposal);
                    self.new_view_sent.insert(v);
                    self.accepted.insert(v, digest);
                    out.push(Msg::NewView {
                        view: v,
                        digest,
                        proof,
                    });
                }
            }
            if out.len() == before {
                break;
            }
        }
    }
}

/// Digest of the highest-view prepared certificate in a view-change proof.
fn choose_digest(proof: &[(Replica, Option<PreparedCert>)]) -> Option<Digest> {
    proof
        .iter()
        .filter_map(|(_, c)| c.as_ref())
        .max_by(|a, b| (a.view, a.digest).cmp(&(b.view, b.digest)))
        .map(|c| c.digest)
}

/// Byzantine replica `b`'s whole transcript, sent up front as `(to, msg)`.
/// `split` selects which replicas get `honest` (bit set) versus `rogue`
/// when `b` equivocates as primary of view 0.
pub fn byzantine_transcript(
    b: Replica,
    behavior: Behavior,
    n: usize,
    honest: Digest,
    rogue: Digest,
    split: u32,
) -> Vec<(Replica, Msg)> {
    if behavior == Behavior::Mute {
        return Vec::new();
    }
    let mut out = Vec::new();
    for to in (0..n).filter(|&r| r != b) {
        if b == 0 {
            let digest = if split & (1 << to) != 0 { honest } else { rogue };
            out.push((to, Msg::PrePrepare { view: 0, digest }));
        }
        for d in [honest, rogue] {
            out.push((to, Msg::Prepare { view: 0, digest: d }));
            out.push((
                to,
                Msg::Commit {
                    view: 0,
                    digest: d,
                    sig: Vec::new(),
                },
            ));
        }
        out.push((
            to,
            Msg::ViewChange {
                new_view: 1,
                prepared: None,
            },
        ));
        if b == 1 % n {
            out.push((
                to,
                Msg::NewView {
                    view: 1,
                    digest: rogue,
                    proof: (0..n).map(|r| (r, None)).collect(),
                },
            ));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    /// The block all honest replicas committed, if they agree and all did.
    pub committed: Option<Digest>,
    pub honest_commits: Vec<Option<Digest>>,
    pub view_changes: u32,
    pub messages: usize,
    pub certificate: Vec<(Replica, Vec<u8>)>,
    /// Two honest replicas committed different blocks.
    pub conflicting: bool,
}

/// Runs one consensus instance under a synchronous schedule: messages are
/// delivered in FIFO order and, whenever the network drains with an honest
/// replica still uncommitted, every such replica times out together.
pub fn pbft_round(
    replicas: &mut [PbftReplicaState],
    faults: &BTreeMap<Replica, Behavior>,
    signer: &dyn CommitSigner,
    rogue: Digest,
    max_view_changes: u32,
) -> Result<ConsensusOutcome> {
    let n = replicas.len();
    if n < 4 {
        return Err(Error::Config(format!("PBFT needs at least 4 replicas, got {n}")));
    }
    let honest: Vec<Replica> = (0..n).filter(|r| !faults.contains_key(r)).collect();
    let mut sent = SentLog::default();
    let mut queue: VecDeque<(Replica, Replica, Msg)> = VecDeque::new();
    for (&b, &behavior) in faults {
        let proposal = replicas[b].proposal;
        let split = (0..n as u32).filter(|r| r % 2 == 1).fold(0, |m, r| m | (1 << r));
        for (to, msg) in byzantine_transcript(b, behavior, n, proposal, rogue, split) {
            sent.record(b, &msg);
            queue.push_back((b, to, msg));
        }
    }
    let broadcast = |queue: &mut VecDeque<_>, sent: &mut SentLog, from: Replica, msgs: Vec<Msg>| {
        for m in msgs {
            sent.record(from, &m);
            for to in (0..n).filter(|&t| t != from) {
                queue.push_back((from, to, m.clone()));
            }
        }
    };
    for &r in &honest {
        let out = replicas[r].start(&Auth {
            sent: &sent,
            signer,
        });
        broadcast(&mut queue, &mut sent, r, out);
    }
    let mut messages = 0;
    let mut view_changes = 0;
    loop {
        while let Some((from, to, msg)) = queue.pop_front() {
            if faults.contains_key(&to) {
                continue;
            }
            messages += 1;
            let out = replicas[to].on_message(from, msg, &Auth {
                sent: &sent,
                signer,
            });
            broadcast(&mut queue, &mut sent, to, out);
        }
        let pending: Vec<Replica> = honest
            .iter()
            .copied()
            .filter(|&r| replicas[r].committed.is_none())
            .collect();
        if pending.is_empty() || view_changes >= max_view_changes {
            break;
        }
        view_changes += 1;
        for r in pending {
            let out = replicas[r].on_timeout(&Auth {
                sent: &sent,
                signer,
            });
            broadcast(&mut queue, &mut sent, r, out);
        }
    }
    let honest_commits: Vec<Option<Digest>> = honest.iter().map(|&r| replicas[r].committed()).collect();
    let distinct: BTreeSet<Digest> = honest_commits.iter().flatten().copied().collect();
    let committed = match (distinct.len(), honest_commits.iter().all(Option::is_some)) {
        (1, true) => distinct.first().copied(),
        _ => None,
    };
    let certificate = honest
        .iter()
        .find(|&&r| replicas[r].committed().is_some() && replicas[r].committed() == committed)
        .map(|&r| replicas[r].commit_certificate())
        .unwrap_or_default();
    Ok(ConsensusOutcome {
        committed,
        honest_commits,
        view_changes,
        messages,
        certificate,
        conflicting: distinct.len() > 1,
    })
}

/// One fault configuration for the model checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub byzantine: Option<(Replica, Behavior)>,
    /// Replicas receiving the honest proposal from an equivocating primary.
    pub split: u32,
}

/// Every single-Byzantine scenario at size `n`, plus the fault-free one.
/// An equivocating primary is enumerated over every split of the backups.
pub fn single_fault_scenarios(n: usize) -> Vec<Scenario> {
    let mut out = vec![Scenario {
        byzantine: None,
        split: 0,
    }];
    for b in 0..n {
        out.push(Scenario {
            byzantine: Some((b, Behavior::Mute)),
            split: 0,
        });
        if b == 0 {
            for split in 0..(1u32 << n) {
                if split & 1 == 0 {
                    out.push(Scenario {
                        byzantine: Some((b, Behavior::Equivocate)),
                        split,
                    });
                }
            }
        } else {
            out.push(Scenario {
                byzantine: Some((b, Behavior::Equivocate)),
                split: 0,
            });
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ModelCheckReport {
    pub states: usize,
    pub terminal_states: usize,
    pub violations: usize,
    /// Terminal states in which every honest replica committed.
    pub all_committed_terminals: usize,
}

/// Exploration bounds for [`model_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bounds {
    /// Timeouts each honest replica may take.
    pub timeouts: u8,
    /// Deviations from send order: delivering any message other than the
    /// oldest in flight, or timing out while messages are in flight.
    pub delays: u8,
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct Global {
    replicas: Vec<Option<PbftReplicaState>>,
    links: Vec<VecDeque<(u32, Msg)>>,
    byzantine_inbox: Vec<Vec<(u32, Msg)>>,
    timeouts_left: Vec<u8>,
    sent: SentLog,
    next_seq: u32,
}

#[derive(Clone, Copy)]
enum Move {
    Link(Replica, Replica),
    Byzantine(Replica, usize),
}

impl Global {
    fn fingerprint(&self) -> u128 {
        let mut a = DefaultHasher::new();
        self.hash(&mut a);
        let mut b = DefaultHasher::new();
        0x5eed_u64.hash(&mut b);
        self.hash(&mut b);
        ((a.finish() as u128) << 64) | b.finish() as u128
    }

    fn send(&mut self, n: usize, from: Replica, msgs: Vec<Msg>) {
        for m in msgs {
            self.sent.record(from, &m);
            for to in (0..n).filter(|&t| t != from && self.replicas[t].is_some()) {
                self.links[from * n + to].push_back((self.next_seq, m.clone()));
                self.next_seq += 1;
            }
        }
    }

    /// Renumbers in-flight sequence numbers by rank so that states differing
    /// only in absolute numbering coincide.
    fn canonicalize(&mut self) {
        let mut seqs: Vec<u32> = self
            .links
            .iter()
            .flat_map(|q| q.iter().map(|(s, _)| *s))
            .chain(self.byzantine_inbox.iter().flat_map(|v| v.iter().map(|(s, _)| *s)))
            .collect();
        seqs.sort_unstable();
        let rank = |s: &mut u32| *s = seqs.binary_search(s).unwrap() as u32;
        for q in &mut self.links {
            q.iter_mut().for_each(|(s, _)| rank(s));
        }
        for v in &mut self.byzantine_inbox {
            v.iter_mut().for_each(|(s, _)| rank(s));
        }
        self.next_seq = seqs.len() as u32;
    }

    fn moves(&self, n: usize) -> Vec<(u32, Move)> {
        let mut out = Vec::new();
        for from in 0..n {
            for to in 0..n {
                if let Some((s, _)) = self.links[from * n + to].front() {
                    out.push((*s, Move::Link(from, to)));
                }
            }
        }
        for (to, inbox) in self.byzantine_inbox.iter().enumerate() {
            out.extend(inbox.iter().enumerate().map(|(i, (s, _))| (*s, Move::Byzantine(to, i))));
        }
        out
    }

    fn conflicting(&self) -> bool {
        let set: BTreeSet<Digest> = self
            .replicas
            .iter()
            .flatten()
            .filter_map(|r| r.committed())
            .collect();
        set.len() > 1
    }
}

/// Explores every schedule of one scenario within `bounds`. Honest links
/// are FIFO. The default schedule delivers messages in send order (the
/// Byzantine transcript counts as sent first) and fires timeouts only when
/// nothing is in flight; each departure from it spends one unit of the
/// delay budget. States are deduplicated by a 128-bit fingerprint.
pub fn model_check(n: usize, scenario: Scenario, bounds: Bounds) -> ModelCheckReport {
    const HONEST: Digest = [0xA; 32];
    const ROGUE: Digest = [0xB; 32];
    let signer = Unsigned;
    let byz = scenario.byzantine.map(|(b, _)| b);
    let mut g = Global {
        replicas: (0..n)
            .map(|r| (Some(r) != byz).then(|| PbftReplicaState::new(r, n, HONEST)))
            .collect(),
        links: vec![VecDeque::new(); n * n],
        byzantine_inbox: vec![Vec::new(); n],
        timeouts_left: (0..n).map(|r| if Some(r) == byz { 0 } else { bounds.timeouts }).collect(),
        sent: SentLog::default(),
        next_seq: 0,
    };
    if let Some((b, behavior)) = scenario.byzantine {
        for (to, msg) in byzantine_transcript(b, behavior, n, HONEST, ROGUE, scenario.split) {
            g.sent.record(b, &msg);
            g.byzantine_inbox[to].push((g.next_seq, msg));
            g.next_seq += 1;
        }
    }
    for r in 0..n {
        if let Some(mut rep) = g.replicas[r].take() {
            let out = rep.start(&Auth {
                sent: &g.sent,
                signer: &signer,
            });
            g.replicas[r] = Some(rep);
            g.send(n, r, out);
        }
    }
    g.canonicalize();

    let mut report = ModelCheckReport::default();
    let mut seen: HashMap<u128, u8> = HashMap::new();
    let mut stack = vec![(g, bounds.delays)];
    while let Some((state, budget)) = stack.pop() {
        match seen.entry(state.fingerprint()) {
            Entry::Occupied(mut e) => {
                if *e.get() >= budget {
                    continue;
                }
                e.insert(budget);
            }
            Entry::Vacant(e) => {
                e.insert(budget);
                report.states += 1;
            }
        }
        if state.conflicting() {
            report.violations += 1;
            continue;
        }
        let moves = state.moves(n);
        let oldest = moves.iter().map(|(s, _)| *s).min();
        let mut successors = Vec::new();
        for (seq, mv) in moves {
            let cost = u8::from(Some(seq) != oldest);
            if cost > budget {
                continue;
            }
            let mut next = state.clone();
            let (from, to, msg) = match mv {
                Move::Link(from, to) => (from, to, next.links[from * n + to].pop_front().unwrap().1),
                Move::Byzantine(to, i) => (byz.unwrap(), to, next.byzantine_inbox[to].remove(i).1),
            };
            if next.replicas[to].is_some() {
                deliver(&mut next, n, from, to, msg, &signer);
            }
            successors.push((next, budget - cost));
        }
        let timeout_cost = u8::from(oldest.is_some());
        for r in 0..n {
            let can = state.timeouts_left[r] > 0
                && timeout_cost <= budget
                && state.replicas[r].as_ref().is_some_and(|x| x.committed.is_none());
            if can {
                let mut next = state.clone();
                next.timeouts_left[r] -= 1;
                let mut rep = next.replicas[r].take().unwrap();
                let out = rep.on_timeout(&Auth {
                    sent: &next.sent,
                    signer: &signer,
                });
                next.replicas[r] = Some(rep);
                next.send(n, r, out);
                successors.push((next, budget - timeout_cost));
            }
        }
        if successors.is_empty() && oldest.is_none() {
            report.terminal_states += 1;
            if state.replicas.iter().flatten().all(|r| r.committed.is_some()) {
                report.all_committed_terminals += 1;
            }
        }
        for (mut next, b) in successors {
            next.canonicalize();
            stack.push((next, b));
        }
    }
    report
}

fn deliver(g: &mut Global, n: usize, from: Replica, to: Replica, msg: Msg, signer: &dyn CommitSigner) {
    let mut rep = g.replicas[to].take().expect("deliver to honest replica");
    let out = rep.on_message(from, msg, &Auth {
        sent: &g.sent,
        signer,
    });
    g.replicas[to] = Some(rep);
    g.send(n, to, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Digest = [0xA; 32];
    const B: Digest = [0xB; 32];

    fn fresh(n: usize) -> Vec<PbftReplicaState> {
        (0..n).map(|r| PbftReplicaState::new(r, n, A)).collect()
    }

    #[test]
    fn fault_free_round_commits_without_view_change() {
        let mut reps = fresh(4);
        let out = pbft_round(&mut reps, &BTreeMap::new(), &Unsigned, B, 4).unwrap();
        assert_eq!(out.committed, Some(A));
        assert_eq!(out.view_changes, 0);
        assert!(out.certificate.len() >= 3);
        assert!(reps.iter().all(|r| r.phase() == Phase::Committed));
    }

    #[test]
    fn one_mute_replica_is_tolerated() {
        for mute in 0..4 {
            let mut reps = fresh(4);
            let faults = BTreeMap::from([(mute, Behavior::Mute)]);
            let out = pbft_round(&mut reps, &faults, &Unsigned, B, 4).unwrap();
            assert_eq!(out.committed, Some(A), "mute replica {mute}");
            assert!(out.view_changes <= 2);
            assert_eq!(out.view_changes, u32::from(mute == 0));
        }
    }

    #[test]
    fn two_mute_replicas_stall() {
        let mut reps = fresh(4);
        let faults = BTreeMap::from([(0, Behavior::Mute), (1, Behavior::Mute)]);
        let out = pbft_round(&mut reps, &faults, &Unsigned, B, 6).unwrap();
        assert_eq!(out.committed, None);
        assert!(out.certificate.is_empty());
        assert_eq!(out.view_changes, 6);
        assert!(!out.conflicting);
    }

    #[test]
    fn equivocating_primary_never_splits_honest_replicas() {
        let mut reps = fresh(4);
        let faults = BTreeMap::from([(0, Behavior::Equivocate)]);
        let out = pbft_round(&mut reps, &faults, &Unsigned, B, 4).unwrap();
        assert!(!out.conflicting);
        assert!(out.committed.is_some());
    }

    #[test]
    fn too_few_replicas_is_an_error() {
        let mut reps = fresh(3);
        assert!(pbft_round(&mut reps, &BTreeMap::new(), &Unsigned, B, 1).is_err());
    }

    #[test]
    fn primary_rotates_with_view() {
        let r = PbftReplicaState::new(2, 4, A);
        assert_eq!(r.primary_of(0), 0);
        assert_eq!(r.primary_of(2), 2);
        assert_eq!(r.primary_of(5), 1);
        assert!(!r.is_primary());
    }

    #[test]
    fn forged_new_view_is_ignored() {
        let sent = SentLog::default();
        let auth = Auth {
            sent: &sent,
            signer: &Unsigned,
        };
        let mut r = PbftReplicaState::new(2, 4, A);
        let out = r.on_message(
            1,
            Msg::NewView {
                view: 1,
                digest: B,
                proof: (0..4).map(|i| (i, None)).collect(),
            },
            &auth,
        );
        assert!(out.is_empty());
        assert_eq!(r.view, 0);
    }

    #[test]
    fn model_check_fault_free_small() {
        let report = model_check(
            4,
            single_fault_scenarios(4)[0],
            Bounds {
                timeouts: 0,
                delays: 2,
            },
        );
        assert_eq!(report.violations, 0);
        assert!(report.terminal_states > 0);
        assert_eq!(report.terminal_states, report.all_committed_terminals);
    }
}
