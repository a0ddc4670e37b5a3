//! Short-lived credentials: keys, signatures, aggregation and certificates.
//!
//! Signatures live in a prime-order subgroup G of a pairing-friendly curve
//! with a symmetric pairing e: G x G -> GT. A signature on msg is
//! sk * H(msg) and verifies through e(sig, P) == e(H(msg), pk). Signatures
//! over distinct messages add up into one group element that verifies with
//! |messages| + 1 pairings instead of 2 * |messages|.
//!
//! Serialized sizes are load-bearing for the wire formats built on top:
//!
//!   private key   28 B   scalar
//!   public key    29 B   compressed point
//!   signature     56 B   uncompressed point
//!   certificate   93 B   subject key || expiry (8 B) || issuer signature
//!
//! Every primitive operation reports itself to the [`OpCounter`] carried by
//! [`GroupParams`] so simulations can price computation.

use crate::math::curve::{self, Affine, Scalar};
use crate::math::pairing::pairing;
use crate::math::Fp2;
use crate::metrics::{OpCounter, OpKind};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::sync::Arc;
use thiserror::Error;

pub const PRIVATE_KEY_LEN: usize = 28;
pub const PUBLIC_KEY_LEN: usize = 29;
pub const SIGNATURE_LEN: usize = 56;
pub const CERTIFICATE_LEN: usize = PUBLIC_KEY_LEN + 8 + SIGNATURE_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("point bytes do not decode to a curve point")]
    MalformedPoint,
    #[error("scalar bytes outside the group order range")]
    MalformedScalar,
    #[error("cannot aggregate zero signatures")]
    EmptyAggregate,
    #[error("certificate validity window is empty")]
    EmptyValidity,
}

/// Handle to the fixed group parameters plus this run's operation counter.
///
/// Clones share the counter, so hand one instance to everything that should
/// be accounted together.
#[derive(Clone, Default)]
pub struct GroupParams {
    ops: Arc<OpCounter>,
}

impl GroupParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ops(&self) -> &OpCounter {
        &self.ops
    }

    fn hash_to_group(&self, msg: &[u8]) -> Affine {
        self.ops.record(OpKind::Hash, 1);
        curve::hash_to_point(msg)
    }

    fn pair(&self, a: &Affine, b: &Affine) -> Fp2 {
        self.ops.record(OpKind::Pairing, 1);
        pairing(a, b)
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PrivateKey(Scalar);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PublicKey(Affine);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Signature(Affine);

/// Sum of individual signatures plus how many went in.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AggregateSignature {
    point: Affine,
    count: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Certificate {
    pub subject: PublicKey,
    /// First millisecond at which the certificate no longer counts.
    pub not_after: u64,
    pub signature: Signature,
}

impl PrivateKey {
    pub fn to_bytes(&self) -> [u8; PRIVATE_KEY_LEN] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8; PRIVATE_KEY_LEN]) -> Result<Self, CryptoError> {
        let s = Scalar::from_bytes(bytes).ok_or(CryptoError::MalformedScalar)?;
        if s.is_zero() {
            return Err(CryptoError::MalformedScalar);
        }
        Ok(PrivateKey(s))
    }
}

impl PublicKey {
    pub fn to_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.0.to_compressed()
    }

    pub fn from_bytes(bytes: &[u8; PUBLIC_KEY_LEN]) -> Result<Self, CryptoError> {
        Affine::from_compressed(bytes)
            .map(PublicKey)
            .ok_or(CryptoError::MalformedPoint)
    }

    /// Order-q membership, worth checking on keys from untrusted storage.
    pub fn is_torsion_free(&self) -> bool {
        self.0.is_torsion_free()
    }
}

impl std::hash::Hash for PublicKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.to_bytes().hash(state);
    }
}

impl PartialOrd for PublicKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PublicKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_bytes().cmp(&other.to_bytes())
    }
}

impl Signature {
    pub fn to_bytes(&self) -> [u8; SIGNATURE_LEN] {
        self.0.to_uncompressed()
    }

    pub fn from_bytes(bytes: &[u8; SIGNATURE_LEN]) -> Result<Self, CryptoError> {
        Affine::from_uncompressed(bytes)
            .map(Signature)
            .ok_or(CryptoError::MalformedPoint)
    }
}

impl AggregateSignature {
    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn to_bytes(&self) -> [u8; SIGNATURE_LEN] {
        self.point.to_uncompressed()
    }

    pub fn from_bytes(bytes: &[u8; SIGNATURE_LEN], count: u32) -> Result<Self, CryptoError> {
        let point = Affine::from_uncompressed(bytes).ok_or(CryptoError::MalformedPoint)?;
        Ok(AggregateSignature { point, count })
    }
}

impl Certificate {
    pub fn to_bytes(&self) -> [u8; CERTIFICATE_LEN] {
        let mut out = [0u8; CERTIFICATE_LEN];
        out[..29].copy_from_slice(&self.subject.to_bytes());
        out[29..37].copy_from_slice(&self.not_after.to_be_bytes());
        out[37..].copy_from_slice(&self.signature.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; CERTIFICATE_LEN]) -> Result<Self, CryptoError> {
        Ok(Certificate {
            subject: PublicKey::from_bytes(bytes[..29].try_into().unwrap())?,
            not_after: u64::from_be_bytes(bytes[29..37].try_into().unwrap()),
            signature: Signature::from_bytes(bytes[37..].try_into().unwrap())?,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CertStatus {
    Valid,
    Expired,
    BadSignature,
}

pub fn keygen(params: &GroupParams, seed: u64) -> (PrivateKey, PublicKey) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    keygen_from_rng(params, &mut rng)
}

pub fn keygen_from_rng(params: &GroupParams, rng: &mut impl RngCore) -> (PrivateKey, PublicKey) {
    let mut raw = [0u8; 28];
    rng.fill_bytes(&mut raw);
    let sk = Scalar::from_bytes_nonzero(&raw);
    params.ops.record(OpKind::Mul, 1);
    let pk = curve::scalar_mul(&sk, &Affine::generator());
    (PrivateKey(sk), PublicKey(pk))
}

pub fn sign(params: &GroupParams, sk: &PrivateKey, msg: &[u8]) -> Signature {
    let h = params.hash_to_group(msg);
    params.ops.record(OpKind::Mul, 1);
    Signature(curve::scalar_mul(&sk.0, &h))
}

pub fn verify(params: &GroupParams, pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let h = params.hash_to_group(msg);
    params.pair(&sig.0, &Affine::generator()) == params.pair(&h, &pk.0)
}

pub fn aggregate(
    params: &GroupParams,
    sigs: &[Signature],
) -> Result<AggregateSignature, CryptoError> {
    if sigs.is_empty() {
        return Err(CryptoError::EmptyAggregate);
    }
    params.ops.record(OpKind::Add, sigs.len() as u64 - 1);
    let point = curve::sum_points(sigs.iter().map(|s| &s.0));
    Ok(AggregateSignature {
        point,
        count: sigs.len() as u32,
    })
}

/// Checks e(agg, P) against the product of per-message pairings. Exactly
/// `messages.len() + 1` pairing evaluations.
pub fn aggregate_verify(
    params: &GroupParams,
    messages: &[(&PublicKey, &[u8])],
    agg: &AggregateSignature,
) -> bool {
    if messages.is_empty() || messages.len() != agg.count as usize {
        return false;
    }
    let lhs = params.pair(&agg.point, &Affine::generator());
    let mut rhs = Fp2::ONE;
    for (pk, msg) in messages {
        let h = params.hash_to_group(msg);
        rhs = rhs * params.pair(&h, &pk.0);
    }
    lhs == rhs
}

fn certificate_body(subject: &PublicKey, not_after: u64) -> [u8; 37] {
    let mut body = [0u8; 37];
    body[..29].copy_from_slice(&subject.to_bytes());
    body[29..].copy_from_slice(&not_after.to_be_bytes());
    body
}

/// The validity window is half-open: the certificate is good for
/// `not_before <= now < not_after`. Only the expiry travels inside the
/// certificate; issuance time stays with the issuer.
pub fn issue_certificate(
    params: &GroupParams,
    issuer: &PrivateKey,
    subject: &PublicKey,
    not_before: u64,
    not_after: u64,
) -> Result<Certificate, CryptoError> {
    if not_before >= not_after {
        return Err(CryptoError::EmptyValidity);
    }
    let signature = sign(params, issuer, &certificate_body(subject, not_after));
    Ok(Certificate {
        subject: *subject,
        not_after,
        signature,
    })
}

pub fn validate_certificate(
    params: &GroupParams,
    issuer_pk: &PublicKey,
    cert: &Certificate,
    now: u64,
) -> CertStatus {
    let body = certificate_body(&cert.subject, cert.not_after);
    if !verify(params, issuer_pk, &body, &cert.signature) {
        CertStatus::BadSignature
    } else if now >= cert.not_after {
        CertStatus::Expired
    } else {
        CertStatus::Valid
    }
}
