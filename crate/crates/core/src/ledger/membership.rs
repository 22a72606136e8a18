//! Zero-trust membership: identities, admission rules and challenge-based
//! periodic re-authentication.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::codec::Writer;
use super::crypto::{Crypto, KeyPair};
use crate::topology::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdentityStatus {
    Pending,
    Active,
    Revoked,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    /// Unique across the run; a node that re-joins gets a new serial.
    pub serial: u64,
    pub node: NodeId,
    pub public_key: Vec<u8>,
    pub admitted_at: u64,
    pub last_auth_at: u64,
    pub status: IdentityStatus,
}

/// Every identity ever issued, in issue order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    identities: Vec<Identity>,
}

impl Registry {
    pub fn identities(&self) -> &[Identity] {
        &self.identities
    }

    /// The live (pending or active) identity of `node`.
    pub fn current(&self, node: NodeId) -> Option<&Identity> {
        self.identities
            .iter()
            .rev()
            .find(|i| i.node == node && i.status != IdentityStatus::Revoked)
    }

    fn current_mut(&mut self, node: NodeId) -> Option<&mut Identity> {
        self.identities
            .iter_mut()
            .rev()
            .find(|i| i.node == node && i.status != IdentityStatus::Revoked)
    }

    pub fn active(&self, node: NodeId) -> Option<&Identity> {
        self.current(node).filter(|i| i.status == IdentityStatus::Active)
    }

    pub fn is_active(&self, node: NodeId) -> bool {
        self.active(node).is_some()
    }

    pub fn active_nodes(&self) -> BTreeSet<NodeId> {
        self.identities
            .iter()
            .filter(|i| i.status == IdentityStatus::Active)
            .map(|i| i.node)
            .collect()
    }

    pub fn register_pending(&mut self, node: NodeId, public_key: Vec<u8>, step: u64) -> u64 {
        let serial = self.identities.len() as u64;
        self.identities.push(Identity {
            serial,
            node,
            public_key,
            admitted_at: step,
            last_auth_at: step,
            status: IdentityStatus::Pending,
        });
        serial
    }

    /// Promotes the pending identity of `node` carrying `public_key`.
    pub fn activate(&mut self, node: NodeId, public_key: &[u8], step: u64) -> bool {
        match self.current_mut(node) {
            Some(i) if i.status == IdentityStatus::Pending && i.public_key == public_key => {
                i.status = IdentityStatus::Active;
                i.admitted_at = step;
                i.last_auth_at = step;
                true
            }
            _ => false,
        }
    }

    pub fn revoke(&mut self, node: NodeId) -> bool {
        match self.current_mut(node) {
            Some(i) => {
                i.status = IdentityStatus::Revoked;
                true
            }
            None => false,
        }
    }

    pub fn touch_auth(&mut self, node: NodeId, step: u64) {
        if let Some(i) = self.current_mut(node) {
            i.last_auth_at = step;
        }
    }
}

/// Self-signed proof that the requester holds the key it registers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub node: NodeId,
    pub public_key: Vec<u8>,
    pub step: u64,
    pub signature: Vec<u8>,
}

impl JoinRequest {
    pub fn signing_bytes(node: NodeId, public_key: &[u8], step: u64) -> Vec<u8> {
        let mut w = Writer::default();
        w.raw(b"join").u32(node.0).bytes(public_key).u64(step);
        w.0
    }

    pub fn new(node: NodeId, keys: &KeyPair, step: u64, crypto: &Crypto) -> Self {
        let signature = crypto
            .sig
            .sign(&keys.secret, &Self::signing_bytes(node, &keys.public, step));
        JoinRequest {
            node,
            public_key: keys.public.clone(),
            step,
            signature,
        }
    }

    pub fn verify(&self, crypto: &Crypto) -> bool {
        crypto.sig.verify(
            &self.public_key,
            &Self::signing_bytes(self.node, &self.public_key, self.step),
            &self.signature,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum Rejected {
    #[error("credential does not verify")]
    BadCredential,
    #[error("node already holds a live identity")]
    AlreadyMember,
    #[error("node is not on the admission list")]
    NotAllowed,
}

/// Native stand-in for the admission smart contract.
pub trait AdmissionRules {
    fn check(&self, req: &JoinRequest, registry: &Registry, crypto: &Crypto) -> Result<(), Rejected>;
}

/// Accepts any node with a valid self-signature and no live identity,
/// optionally restricted to an allow-list.
#[derive(Clone, Debug, Default)]
pub struct DefaultAdmission {
    pub allowlist: Option<BTreeSet<NodeId>>,
}

impl AdmissionRules for DefaultAdmission {
    fn check(&self, req: &JoinRequest, registry: &Registry, crypto: &Crypto) -> Result<(), Rejected> {
        if !req.verify(crypto) {
            return Err(Rejected::BadCredential);
        }
        if registry.current(req.node).is_some() {
            return Err(Rejected::AlreadyMember);
        }
        if let Some(list) = &self.allowlist {
            if !list.contains(&req.node) {
                return Err(Rejected::NotAllowed);
            }
        }
        Ok(())
    }
}

/// Challenge a node must sign during re-authentication at `step`.
pub fn auth_challenge(node: NodeId, step: u64, crypto: &Crypto) -> Vec<u8> {
    let mut w = Writer::default();
    w.raw(b"auth").u32(node.0).u64(step);
    crypto.digest(&w.0).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admission_rules() {
        let crypto = Crypto::fast();
        let mut reg = Registry::default();
        let kp = crypto.sig.keypair(1);
        let req = JoinRequest::new(NodeId(4), &kp, 0, &crypto);
        let rules = DefaultAdmission::default();
        assert_eq!(rules.check(&req, &reg, &crypto), Ok(()));

        let mut forged = req.clone();
        forged.signature[0] ^= 1;
        assert_eq!(rules.check(&forged, &reg, &crypto), Err(Rejected::BadCredential));

        reg.register_pending(NodeId(4), kp.public.clone(), 0);
        assert_eq!(rules.check(&req, &reg, &crypto), Err(Rejected::AlreadyMember));

        let only_five = DefaultAdmission {
            allowlist: Some(BTreeSet::from([NodeId(5)])),
        };
        assert_eq!(
            only_five.check(&req, &Registry::default(), &crypto),
            Err(Rejected::NotAllowed)
        );
    }

    #[test]
    fn rejoin_creates_fresh_identity() {
        let mut reg = Registry::default();
        reg.register_pending(NodeId(2), vec![1], 0);
        assert!(reg.activate(NodeId(2), &[1], 1));
        assert!(reg.revoke(NodeId(2)));
        assert!(reg.current(NodeId(2)).is_none());
        let serial = reg.register_pending(NodeId(2), vec![2], 5);
        assert!(!reg.activate(NodeId(2), &[1], 6));
        assert!(reg.activate(NodeId(2), &[2], 6));
        assert_eq!(reg.active(NodeId(2)).unwrap().serial, serial);
        assert_eq!(reg.identities()[0].status, IdentityStatus::Revoked);
    }
}
