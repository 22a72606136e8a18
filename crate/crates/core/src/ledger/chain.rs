//! Blocks, commit certificates, binary and JSON-lines chain dumps, and chain
//! verification by full replay.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::codec::{Reader, Writer};
use super::crypto::{to_hex, Crypto, Digest};
use super::membership::Registry;
use super::tx::{Transaction, TxPayload};
use crate::error::{Error, Result};
use crate::topology::NodeId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Digest,
    pub payload_hash: Digest,
    pub proposer: NodeId,
    /// Simulation step at which the block was proposed.
    pub step: u64,
    /// Replicas that ran consensus for this block.
    pub committee: Vec<NodeId>,
}

impl BlockHeader {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.height)
            .raw(&self.prev_hash)
            .raw(&self.payload_hash)
            .u32(self.proposer.0)
            .u64(self.step)
            .u32(self.committee.len() as u32);
        for c in &self.committee {
            w.u32(c.0);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let height = r.u64()?;
        let prev_hash = r.array32()?;
        let payload_hash = r.array32()?;
        let proposer = NodeId(r.u32()?);
        let step = r.u64()?;
        let n = r.u32()? as usize;
        if n > r.remaining() / 4 {
            return Err(Error::Decode("committee size exceeds record".into()));
        }
        let committee = (0..n).map(|_| r.u32().map(NodeId)).collect::<Result<_>>()?;
        Ok(BlockHeader {
            height,
            prev_hash,
            payload_hash,
            proposer,
            step,
            committee,
        })
    }

    pub fn hash(&self, crypto: &Crypto) -> Digest {
        let mut w = Writer::default();
        w.raw(b"hdr");
        self.encode(&mut w);
        crypto.digest(&w.0)
    }
}

/// Replica signatures over [`commit_bytes`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub signatures: Vec<(NodeId, Vec<u8>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub transactions: Vec<Transaction>,
    pub certificate: Certificate,
}

/// Message a replica signs when committing a block.
pub fn commit_bytes(height: u64, block_hash: &Digest) -> Vec<u8> {
    let mut w = Writer::default();
    w.raw(b"commit").u64(height).raw(block_hash);
    w.0
}

/// Binary Merkle root over transaction hashes; odd levels duplicate the
/// last node.
pub fn merkle_root(txs: &[Transaction], crypto: &Crypto) -> Digest {
    if txs.is_empty() {
        return crypto.digest(b"empty");
    }
    let mut level: Vec<Digest> = txs.iter().map(|t| t.hash(crypto)).collect();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let mut buf = [0u8; 64];
                buf[..32].copy_from_slice(&pair[0]);
                buf[32..].copy_from_slice(pair.get(1).unwrap_or(&pair[0]));
                crypto.digest(&buf)
            })
            .collect();
    }
    level[0]
}

pub fn byzantine_bound(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

pub fn quorum(n: usize) -> usize {
    2 * byzantine_bound(n) + 1
}

impl Block {
    pub fn hash(&self, crypto: &Crypto) -> Digest {
        self.header.hash(crypto)
    }

    fn encode_body(&self, w: &mut Writer) {
        self.header.encode(w);
        w.u32(self.transactions.len() as u32);
        for t in &self.transactions {
            t.encode(w);
        }
        w.u32(self.certificate.signatures.len() as u32);
        for (id, sig) in &self.certificate.signatures {
            w.u32(id.0).bytes(sig);
        }
    }

    fn decode_body(body: &[u8]) -> Result<Block> {
        let mut r = Reader::new(body);
        let header = BlockHeader::decode(&mut r)?;
        let ntx = r.u32()? as usize;
        if ntx > r.remaining() / 8 {
            return Err(Error::Decode("transaction count exceeds record".into()));
        }
        let transactions = (0..ntx).map(|_| Transaction::decode(&mut r)).collect::<Result<_>>()?;
        let nsig = r.u32()? as usize;
        if nsig > r.remaining() / 8 {
            return Err(Error::Decode("signature count exceeds record".into()));
        }
        let signatures = (0..nsig)
            .map(|_| Ok((NodeId(r.u32()?), r.bytes()?)))
            .collect::<Result<_>>()?;
        r.finish()?;
        Ok(Block {
            header,
            transactions,
            certificate: Certificate { signatures },
        })
    }
}

/// Length-prefixed binary dump: one `u32` length + block record per block.
pub fn encode_chain(chain: &[Block]) -> Vec<u8> {
    let mut out = Writer::default();
    for b in chain {
        let mut body = Writer::default();
        b.encode_body(&mut body);
        out.bytes(&body.0);
    }
    out.0
}

/// Decodes a binary dump. On a malformed record returns the blocks decoded
/// so far together with the index of the bad record.
pub fn decode_chain(bytes: &[u8]) -> (Vec<Block>, Option<(u64, Error)>) {
    let mut r = Reader::new(bytes);
    let mut blocks = Vec::new();
    while r.remaining() > 0 {
        let idx = blocks.len() as u64;
        match r.bytes().and_then(|body| Block::decode_body(&body)) {
            Ok(b) => blocks.push(b),
            Err(e) => return (blocks, Some((idx, e))),
        }
    }
    (blocks, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChainVerdict {
    Valid,
    TamperedAt(u64),
}

/// Replays the chain from genesis, checking height, hash links, payload
/// roots, transaction signatures and nonces against the membership the
/// chain itself establishes, and every commit certificate.
pub fn verify_chain(chain: &[Block], crypto: &Crypto) -> ChainVerdict {
    let mut registry = Registry::default();
    let mut nonces: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut prev = [0u8; 32];
    for (i, block) in chain.iter().enumerate() {
        let idx = i as u64;
        if !verify_block(block, idx, &prev, &mut registry, &mut nonces, crypto) {
            return ChainVerdict::TamperedAt(idx);
        }
        prev = block.hash(crypto);
    }
    ChainVerdict::Valid
}

pub fn verify_encoded_chain(bytes: &[u8], crypto: &Crypto) -> ChainVerdict {
    let (blocks, err) = decode_chain(bytes);
    match verify_chain(&blocks, crypto) {
        ChainVerdict::Valid => match err {
            Some((idx, _)) => ChainVerdict::TamperedAt(idx),
            None => ChainVerdict::Valid,
        },
        tampered => tampered,
    }
}

fn verify_block(
    block: &Block,
    idx: u64,
    prev: &Digest,
    registry: &mut Registry,
    nonces: &mut BTreeMap<NodeId, u64>,
    crypto: &Crypto,
) -> bool {
    let h = &block.header;
    if h.height != idx || &h.prev_hash != prev || h.payload_hash != merkle_root(&block.transactions, crypto) {
        return false;
    }
    let mut exits = Vec::new();
    for tx in &block.transactions {
        if nonces.get(&tx.author).is_some_and(|&n| tx.nonce <= n) {
            return false;
        }
        nonces.insert(tx.author, tx.nonce);
        match &tx.payload {
            TxPayload::Join { public_key } => {
                if registry.current(tx.author).is_some() || !tx.verify(crypto, public_key) {
                    return false;
                }
                registry.register_pending(tx.author, public_key.clone(), h.step);
                registry.activate(tx.author, public_key, h.step);
            }
            TxPayload::Status { .. } | TxPayload::Exit { .. } => {
                let Some(id) = registry.active(tx.author) else {
                    return false;
                };
                if !tx.verify(crypto, &id.public_key) {
                    return false;
                }
                if let TxPayload::Exit { subject, .. } = tx.payload {
                    exits.push(subject);
                }
            }
        }
    }

    let committee: BTreeSet<NodeId> = h.committee.iter().copied().collect();
    if committee.len() != h.committee.len() || !committee.contains(&h.proposer) {
        return false;
    }
    let msg = commit_bytes(h.height, &h.hash(crypto));
    let mut signers = BTreeSet::new();
    for (id, sig) in &block.certificate.signatures {
        let Some(identity) = registry.active(*id) else {
            return false;
        };
        if !committee.contains(id) || !signers.insert(*id) || !crypto.sig.verify(&identity.public_key, &msg, sig) {
            return false;
        }
    }
    if signers.len() < quorum(committee.len()) {
        return false;
    }
    for s in exits {
        registry.revoke(s);
    }
    true
}

/// Header-only chain kept by light nodes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightLedger {
    pub headers: Vec<BlockHeader>,
}

impl LightLedger {
    pub fn append(&mut self, header: BlockHeader, crypto: &Crypto) -> Result<()> {
        let expected_prev = self.headers.last().map_or([0u8; 32], |h| h.hash(crypto));
        if header.height != self.headers.len() as u64 || header.prev_hash != expected_prev {
            return Err(Error::Decode(format!("header {} does not extend the chain", header.height)));
        }
        self.headers.push(header);
        Ok(())
    }
}

#[derive(Serialize)]
struct BlockJson<'a> {
    height: u64,
    hash: String,
    prev_hash: String,
    payload_hash: String,
    proposer: NodeId,
    step: u64,
    committee: &'a [NodeId],
    transactions: &'a [Transaction],
    certificate: Vec<NodeId>,
}

/// One JSON object per line, per block.
pub fn write_jsonl<W: Write>(chain: &[Block], crypto: &Crypto, mut w: W) -> std::io::Result<()> {
    for b in chain {
        let view = BlockJson {
            height: b.header.height,
            hash: to_hex(&b.hash(crypto)),
            prev_hash: to_hex(&b.header.prev_hash),
            payload_hash: to_hex(&b.header.payload_hash),
            proposer: b.header.proposer,
            step: b.header.step,
            committee: &b.header.committee,
            transactions: &b.transactions,
            certificate: b.certificate.signatures.iter().map(|(id, _)| *id).collect(),
        };
        serde_json::to_writer(&mut w, &view)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ledger::crypto::KeyPair;
    use crate::ledger::tx::ExitReason;

    /// A chain of `len` blocks signed by a fixed four-member committee.
    pub(crate) fn sample_chain(len: usize, crypto: &Crypto) -> Vec<Block> {
        let keys: Vec<KeyPair> = (0..6).map(|i| crypto.sig.keypair(100 + i)).collect();
        let committee: Vec<NodeId> = (0..4).map(NodeId).collect();
        let mut nonce = 0u64;
        let mut next_nonce = || {
            nonce += 1;
            nonce
        };
        let mut chain: Vec<Block> = Vec::new();
        for height in 0..len as u64 {
            let mut txs = Vec::new();
            if height == 0 {
                for (i, k) in keys.iter().enumerate() {
                    txs.push(
                        Transaction::new(NodeId(i as u32), next_nonce(), TxPayload::Join {
                            public_key: k.public.clone(),
                        })
                        .signed(crypto, &k.secret),
                    );
                }
            } else {
                for i in 0..4u32 {
                    let author = NodeId((height as u32 + i) % 4);
                    txs.push(
                        Transaction::new(author, next_nonce(), TxPayload::Status {
                            queue_len: i,
                            position: [height as f64, i as f64, 300.0],
                            neighbors: vec![NodeId((i + 1) % 4)],
                        })
                        .signed(crypto, &keys[author.index()].secret),
                    );
                }
                if height == 3 {
                    txs.push(
                        Transaction::new(NodeId(0), next_nonce(), TxPayload::Exit {
                            subject: NodeId(5),
                            reason: ExitReason::AuthFailed,
                        })
                        .signed(crypto, &keys[0].secret),
                    );
                }
            }
            let header = BlockHeader {
                height,
                prev_hash: chain.last().map_or([0; 32], |b| b.hash(crypto)),
                payload_hash: merkle_root(&txs, crypto),
                proposer: committee[height as usize % 4],
                step: height * 5,
                committee: committee.clone(),
            };
            let msg = commit_bytes(height, &header.hash(crypto));
            let signatures = committee[..3]
                .iter()
                .map(|id| (*id, crypto.sig.sign(&keys[id.index()].secret, &msg)))
                .collect();
            chain.push(Block {
                header,
                transactions: txs,
                certificate: Certificate { signatures },
            });
        }
        chain
    }

    #[test]
    fn untouched_chain_is_valid() {
        let crypto = Crypto::real();
        let chain = sample_chain(6, &crypto);
        assert_eq!(verify_chain(&chain, &crypto), ChainVerdict::Valid);
        assert_eq!(verify_encoded_chain(&encode_chain(&chain), &crypto), ChainVerdict::Valid);
        let (decoded, err) = decode_chain(&encode_chain(&chain));
        assert!(err.is_none());
        assert_eq!(decoded, chain);
    }

    #[test]
    fn payload_bit_flip_is_located() {
        let crypto = Crypto::real();
        let mut chain = sample_chain(6, &crypto);
        if let TxPayload::Status { position, .. } = &mut chain[3].transactions[1].payload {
            position[0] = f64::from_bits(position[0].to_bits() ^ 1);
        }
        assert_eq!(verify_chain(&chain, &crypto), ChainVerdict::TamperedAt(3));
    }

    #[test]
    fn certificate_below_quorum_is_rejected() {
        let crypto = Crypto::real();
        let mut chain = sample_chain(6, &crypto);
        // n = 4 tolerates f = 1; f signatures cannot certify a block
        chain[4].certificate.signatures.truncate(1);
        assert_eq!(verify_chain(&chain, &crypto), ChainVerdict::TamperedAt(4));
        let mut chain = sample_chain(6, &crypto);
        let dup = chain[2].certificate.signatures[0].clone();
        chain[2].certificate.signatures[1] = dup;
        assert_eq!(verify_chain(&chain, &crypto), ChainVerdict::TamperedAt(2));
    }

    #[test]
    fn revoked_author_cannot_sign_later_status() {
        let crypto = Crypto::fast();
        let keys: Vec<KeyPair> = (0..6).map(|i| crypto.sig.keypair(100 + i)).collect();
        let mut chain = sample_chain(5, &crypto);
        // node 5 was revoked at height 3; a status from it at height 4 is invalid
        chain[4].transactions.push(
            Transaction::new(NodeId(5), 1_000, TxPayload::Status {
                queue_len: 0,
                position: [0.0; 3],
                neighbors: vec![],
            })
            .signed(&crypto, &keys[5].secret),
        );
        chain[4].header.payload_hash = merkle_root(&chain[4].transactions, &crypto);
        let msg = commit_bytes(4, &chain[4].hash(&crypto));
        chain[4].certificate.signatures = (0..3)
            .map(|i| (NodeId(i), crypto.sig.sign(&keys[i as usize].secret, &msg)))
            .collect();
        assert_eq!(verify_chain(&chain, &crypto), ChainVerdict::TamperedAt(4));
        chain[4].transactions.pop();
        chain[4].header.payload_hash = merkle_root(&chain[4].transactions, &crypto);
        let msg = commit_bytes(4, &chain[4].hash(&crypto));
        chain[4].certificate.signatures = (0..3)
            .map(|i| (NodeId(i), crypto.sig.sign(&keys[i as usize].secret, &msg)))
            .collect();
        assert_eq!(verify_chain(&chain, &crypto), ChainVerdict::Valid);
    }

    #[test]
    fn light_ledger_tracks_headers() {
        let crypto = Crypto::fast();
        let chain = sample_chain(4, &crypto);
        let mut light = LightLedger::default();
        for b in &chain {
            light.append(b.header.clone(), &crypto).unwrap();
        }
        assert!(light.append(chain[1].header.clone(), &crypto).is_err());
    }

    #[test]
    fn jsonl_has_line_per_block() {
        let crypto = Crypto::fast();
        let chain = sample_chain(3, &crypto);
        let mut out = Vec::new();
        write_jsonl(&chain, &crypto, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["height"], 0);
        assert_eq!(first["transactions"].as_array().unwrap().len(), 6);
    }
}
