use serde::{Deserialize, Serialize};

use super::codec::{Reader, Writer};
use super::crypto::{to_hex, Crypto, Digest};
use crate::error::{Error, Result};
use crate::topology::{NodeId, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxKind {
    Status,
    Join,
    Exit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitReason {
    Voluntary,
    AuthFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TxPayload {
    /// Periodic UAV status: queue length, location and current neighbors.
    Status {
        queue_len: u32,
        position: Vec3,
        neighbors: Vec<NodeId>,
    },
    Join {
        public_key: Vec<u8>,
    },
    Exit {
        subject: NodeId,
        reason: ExitReason,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub author: NodeId,
    pub nonce: u64,
    pub payload: TxPayload,
    #[serde(serialize_with = "hex_bytes")]
    pub signature: Vec<u8>,
}

fn hex_bytes<S: serde::Serializer>(v: &[u8], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&to_hex(v))
}

impl Transaction {
    pub fn new(author: NodeId, nonce: u64, payload: TxPayload) -> Self {
        Transaction {
            author,
            nonce,
            payload,
            signature: Vec::new(),
        }
    }

    pub fn kind(&self) -> TxKind {
        match self.payload {
            TxPayload::Status { .. } => TxKind::Status,
            TxPayload::Join { .. } => TxKind::Join,
            TxPayload::Exit { .. } => TxKind::Exit,
        }
    }

    /// Canonical bytes covered by the signature.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.raw(b"tx").u32(self.author.0).u64(self.nonce);
        match &self.payload {
            TxPayload::Status {
                queue_len,
                position,
                neighbors,
            } => {
                w.u8(0).u32(*queue_len);
                for c in position {
                    w.f64(*c);
                }
                w.u32(neighbors.len() as u32);
                for n in neighbors {
                    w.u32(n.0);
                }
            }
            TxPayload::Join { public_key } => {
                w.u8(1).bytes(public_key);
            }
            TxPayload::Exit { subject, reason } => {
                w.u8(2).u32(subject.0).u8(match reason {
                    ExitReason::Voluntary => 0,
                    ExitReason::AuthFailed => 1,
                });
            }
        }
        w.0
    }

    pub fn signed(mut self, crypto: &Crypto, secret: &[u8]) -> Self {
        self.signature = crypto.sig.sign(secret, &self.signing_bytes());
        self
    }

    pub fn verify(&self, crypto: &Crypto, public: &[u8]) -> bool {
        crypto.sig.verify(public, &self.signing_bytes(), &self.signature)
    }

    pub fn encode(&self, w: &mut Writer) {
        let body = self.signing_bytes();
        w.bytes(&body).bytes(&self.signature);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Transaction> {
        let body = r.bytes()?;
        let signature = r.bytes()?;
        let mut b = Reader::new(&body);
        if b.take(2)? != b"tx" {
            return Err(Error::Decode("bad transaction magic".into()));
        }
        let author = NodeId(b.u32()?);
        let nonce = b.u64()?;
        let payload = match b.u8()? {
            0 => {
                let queue_len = b.u32()?;
                let position = [b.f64()?, b.f64()?, b.f64()?];
                let count = b.u32()? as usize;
                if count > b.remaining() / 4 {
                    return Err(Error::Decode("neighbor count exceeds record".into()));
                }
                let neighbors = (0..count).map(|_| b.u32().map(NodeId)).collect::<Result<_>>()?;
                TxPayload::Status {
                    queue_len,
                    position,
                    neighbors,
                }
            }
            1 => TxPayload::Join {
                public_key: b.bytes()?,
            },
            2 => TxPayload::Exit {
                subject: NodeId(b.u32()?),
                reason: match b.u8()? {
                    0 => ExitReason::Voluntary,
                    1 => ExitReason::AuthFailed,
                    t => return Err(Error::Decode(format!("bad exit reason {t}"))),
                },
            },
            t => return Err(Error::Decode(format!("bad payload tag {t}"))),
        };
        b.finish()?;
        Ok(Transaction {
            author,
            nonce,
            payload,
            signature,
        })
    }

    pub fn hash(&self, crypto: &Crypto) -> Digest {
        let mut w = Writer::default();
        self.encode(&mut w);
        crypto.digest(&w.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_preserves_signature_validity() {
        let crypto = Crypto::real();
        let kp = crypto.sig.keypair(5);
        let tx = Transaction::new(
            NodeId(3),
            9,
            TxPayload::Status {
                queue_len: 4,
                position: [1.5, -2.0, 250.0],
                neighbors: vec![NodeId(1), NodeId(7)],
            },
        )
        .signed(&crypto, &kp.secret);
        let mut w = Writer::default();
        tx.encode(&mut w);
        let mut r = Reader::new(&w.0);
        let back = Transaction::decode(&mut r).unwrap();
        r.finish().unwrap();
        assert_eq!(back, tx);
        assert!(back.verify(&crypto, &kp.public));
        assert_eq!(back.kind(), TxKind::Status);
    }
}
