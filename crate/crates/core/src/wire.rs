//! Frame encodings for every message the simulated radios carry.
//!
//! Each frame is one tag byte followed by a fixed layout. The tag is
//! transport framing; size accounting never includes it. [`Frame::nominal_len`]
//! returns the number of bytes a frame contributes to the protocol-level
//! byte counts: request/response plumbing that exists only to drive the
//! simulation (consensus internals, lookup responses) returns `None`, and
//! variable frames return their closed-form size.
//!
//! Multi-byte integers are big-endian throughout.

use crate::crypto::{
    self, AggregateSignature, Certificate, PublicKey, Signature, CERTIFICATE_LEN, PUBLIC_KEY_LEN,
    SIGNATURE_LEN,
};
use crate::ledger::{KeyStatus, LedgerError, StatusBlock, ZoneBlock, ZoneRecord, ZoneStatus};
use thiserror::Error;

pub const NONCE_LEN: usize = 5;
pub const LOCATION_LEN: usize = 6;
pub const PROOF_MESSAGE_LEN: usize = PUBLIC_KEY_LEN + 8 + LOCATION_LEN;
pub const GROUPED_RECORD_LEN: usize = PROOF_MESSAGE_LEN + CERTIFICATE_LEN;
pub const SIGNED_RECORD_LEN: usize = PROOF_MESSAGE_LEN + SIGNATURE_LEN + CERTIFICATE_LEN;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unknown frame tag {0:#04x}")]
    UnknownTag(u8),
    #[error("frame truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("{extra} trailing bytes after frame")]
    TrailingBytes { extra: usize },
    #[error("bad frame field: {0}")]
    BadValue(&'static str),
    #[error(transparent)]
    Crypto(#[from] crypto::CryptoError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated {
                needed: n - self.buf.len(),
            });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn arr<const N: usize>(&mut self) -> Result<&'a [u8; N], WireError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(*self.arr()?))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(*self.arr()?))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(*self.arr()?))
    }

    fn remaining(&self) -> usize {
        self.buf.len()
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    fn finish(self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::TrailingBytes {
                extra: self.buf.len(),
            })
        }
    }
}

/// Challenge nonce for the mutual-authentication handshakes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Nonce(pub [u8; NONCE_LEN]);

/// Fixed-point coordinates, three bytes per axis.
///
/// The simulator keeps geography abstract: a place's zone id is simply its
/// latitude word, so zone attribution falls out of the records themselves.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Location {
    lat: i32,
    lon: i32,
}

impl Location {
    /// Both axes must fit in a signed 24-bit word.
    pub fn new(lat: i32, lon: i32) -> Option<Self> {
        let fits = |v: i32| (-(1 << 23)..1 << 23).contains(&v);
        (fits(lat) && fits(lon)).then_some(Location { lat, lon })
    }

    pub fn for_zone(zone: u16, lon: i32) -> Self {
        Location::new(zone as i32, lon).unwrap()
    }

    pub fn zone(&self) -> u16 {
        self.lat as u16
    }

    pub fn lat(&self) -> i32 {
        self.lat
    }

    pub fn lon(&self) -> i32 {
        self.lon
    }

    pub fn to_bytes(&self) -> [u8; LOCATION_LEN] {
        let mut out = [0u8; LOCATION_LEN];
        out[..3].copy_from_slice(&self.lat.to_be_bytes()[1..]);
        out[3..].copy_from_slice(&self.lon.to_be_bytes()[1..]);
        out
    }

    pub fn from_bytes(bytes: &[u8; LOCATION_LEN]) -> Self {
        let word = |b: &[u8]| {
            let mut v = [if b[0] & 0x80 != 0 { 0xff } else { 0 }, 0, 0, 0];
            v[1..].copy_from_slice(b);
            i32::from_be_bytes(v)
        };
        Location {
            lat: word(&bytes[..3]),
            lon: word(&bytes[3..]),
        }
    }
}

/// The signed payload of a contact or visit proof: who, when, where.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ProofMessage {
    pub subject: PublicKey,
    pub time: u64,
    pub location: Location,
}

impl ProofMessage {
    /// Also the signing input.
    pub fn to_bytes(&self) -> [u8; PROOF_MESSAGE_LEN] {
        let mut out = [0u8; PROOF_MESSAGE_LEN];
        out[..29].copy_from_slice(&self.subject.to_bytes());
        out[29..37].copy_from_slice(&self.time.to_be_bytes());
        out[37..].copy_from_slice(&self.location.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; PROOF_MESSAGE_LEN]) -> Result<Self, WireError> {
        Ok(ProofMessage {
            subject: PublicKey::from_bytes(bytes[..29].try_into().unwrap())?,
            time: u64::from_be_bytes(bytes[29..37].try_into().unwrap()),
            location: Location::from_bytes(bytes[37..].try_into().unwrap()),
        })
    }
}

/// A proof as it sits in a device's local store: message, the other
/// party's signature over it, and their certificate.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SignedRecord {
    pub msg: ProofMessage,
    pub sig: Signature,
    pub cert: Certificate,
}

impl SignedRecord {
    pub fn to_bytes(&self) -> [u8; SIGNED_RECORD_LEN] {
        let mut out = [0u8; SIGNED_RECORD_LEN];
        out[..43].copy_from_slice(&self.msg.to_bytes());
        out[43..99].copy_from_slice(&self.sig.to_bytes());
        out[99..].copy_from_slice(&self.cert.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; SIGNED_RECORD_LEN]) -> Result<Self, WireError> {
        Ok(SignedRecord {
            msg: ProofMessage::from_bytes(bytes[..43].try_into().unwrap())?,
            sig: Signature::from_bytes(bytes[43..99].try_into().unwrap())?,
            cert: Certificate::from_bytes(bytes[99..].try_into().unwrap())?,
        })
    }

    pub fn strip(&self) -> GroupedRecord {
        GroupedRecord {
            msg: self.msg,
            cert: self.cert,
        }
    }
}

/// A record inside an aggregated group: the individual signature is folded
/// into the group's aggregate, so only message and certificate travel.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct GroupedRecord {
    pub msg: ProofMessage,
    pub cert: Certificate,
}

impl GroupedRecord {
    pub fn to_bytes(&self) -> [u8; GROUPED_RECORD_LEN] {
        let mut out = [0u8; GROUPED_RECORD_LEN];
        out[..43].copy_from_slice(&self.msg.to_bytes());
        out[43..].copy_from_slice(&self.cert.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; GROUPED_RECORD_LEN]) -> Result<Self, WireError> {
        Ok(GroupedRecord {
            msg: ProofMessage::from_bytes(bytes[..43].try_into().unwrap())?,
            cert: Certificate::from_bytes(bytes[43..].try_into().unwrap())?,
        })
    }
}

/// M records sharing one aggregate signature: 136 M + 56 bytes. M is
/// implicit in the length, so nothing else travels.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RecordGroup {
    records: Vec<GroupedRecord>,
    agg: AggregateSignature,
}

impl RecordGroup {
    pub fn new(records: Vec<GroupedRecord>, agg: AggregateSignature) -> Result<Self, WireError> {
        if records.is_empty() {
            return Err(WireError::BadValue("empty record group"));
        }
        if agg.count() as usize != records.len() {
            return Err(WireError::BadValue("aggregate count mismatch"));
        }
        Ok(RecordGroup { records, agg })
    }

    pub fn records(&self) -> &[GroupedRecord] {
        &self.records
    }

    pub fn aggregate(&self) -> &AggregateSignature {
        &self.agg
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encoded_len(&self) -> usize {
        GROUPED_RECORD_LEN * self.records.len() + SIGNATURE_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for r in &self.records {
            out.extend_from_slice(&r.to_bytes());
        }
        out.extend_from_slice(&self.agg.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < GROUPED_RECORD_LEN + SIGNATURE_LEN {
            return Err(WireError::BadValue("record group too short"));
        }
        let body = bytes.len() - SIGNATURE_LEN;
        if body % GROUPED_RECORD_LEN != 0 {
            return Err(WireError::BadValue("record group length not 136m + 56"));
        }
        let count = body / GROUPED_RECORD_LEN;
        let records = bytes[..body]
            .chunks_exact(GROUPED_RECORD_LEN)
            .map(|c| GroupedRecord::from_bytes(c.try_into().unwrap()))
            .collect::<Result<Vec<_>, _>>()?;
        let agg =
            AggregateSignature::from_bytes(bytes[body..].try_into().unwrap(), count as u32)?;
        Ok(RecordGroup { records, agg })
    }
}

/// Which protocol a frame belongs to, attributed at send time.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
#[repr(u8)]
pub enum Phase {
    Setup = 0,
    Contact = 1,
    StatusUpdate = 2,
    Tracing = 3,
    AccessControl = 4,
    Consensus = 5,
}

impl Phase {
    pub const ALL: [Phase; 6] = [
        Phase::Setup,
        Phase::Contact,
        Phase::StatusUpdate,
        Phase::Tracing,
        Phase::AccessControl,
        Phase::Consensus,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Phase::Setup => "setup",
            Phase::Contact => "contact",
            Phase::StatusUpdate => "status_update",
            Phase::Tracing => "tracing",
            Phase::AccessControl => "access_control",
            Phase::Consensus => "consensus",
        }
    }
}

/// A consensus log entry's payload.
#[derive(Clone, PartialEq, Debug)]
pub enum ProposedBlock {
    Status(StatusBlock),
    Zone(ZoneBlock),
}

impl ProposedBlock {
    fn kind_byte(&self) -> u8 {
        match self {
            ProposedBlock::Status(_) => 0,
            ProposedBlock::Zone(_) => 1,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ProposedBlock::Status(b) => b.to_bytes(),
            ProposedBlock::Zone(b) => b.to_bytes(),
        }
    }

    fn from_bytes(kind: u8, bytes: &[u8]) -> Result<Self, WireError> {
        match kind {
            0 => Ok(ProposedBlock::Status(StatusBlock::from_bytes(bytes)?)),
            1 => Ok(ProposedBlock::Zone(ZoneBlock::from_bytes(bytes)?)),
            _ => Err(WireError::BadValue("unknown block kind")),
        }
    }

    /// Bytes the block occupies on chain (header plus filter payloads or
    /// zone records).
    pub fn chain_size(&self) -> usize {
        match self {
            ProposedBlock::Status(b) => b.chain_size(),
            ProposedBlock::Zone(b) => b.chain_size(),
        }
    }
}

/// One replicated log entry.
#[derive(Clone, PartialEq, Debug)]
pub struct LogEntry {
    pub term: u64,
    pub block: ProposedBlock,
}

#[derive(Clone, PartialEq, Debug)]
pub enum Frame {
    // Contact: mutual authentication, then proof exchange.
    ContactNonce { nonce: Nonce },
    ContactAuthReply { cert: Certificate, sig: Signature, nonce: Nonce },
    ContactAuthFinish { cert: Certificate, sig: Signature },
    ContactProof { msg: ProofMessage, sig: Signature },

    // Access control at a place: same handshake shape plus a verdict.
    AccessNonce { nonce: Nonce },
    AccessAuthReply { cert: Certificate, sig: Signature, nonce: Nonce },
    AccessAuthFinish { cert: Certificate, sig: Signature },
    AccessVerdict { admit: bool },
    VisitProof { msg: ProofMessage, sig: Signature },

    // Ledger lookups anyone can make.
    StatusQuery { pk: PublicKey },
    StatusResult { pk: PublicKey, status: KeyStatus },
    ZoneQuery { zone: u16 },
    ZoneResult { record: ZoneRecord, status: ZoneStatus },

    // Evidence upload after a positive test, and validator gossip of it.
    TracingUpload { group: RecordGroup },
    TracingResult { accepted: bool },
    RecordUpload { record: SignedRecord },
    EvidenceBroadcast { group: RecordGroup },
    PlaceWindowRequest { from: u64, to: u64 },
    PlaceWindowRecords { group: Option<RecordGroup> },

    // Status-update bookkeeping between authority and key service.
    KeyListRequest { keys: Vec<PublicKey> },
    KeyListResponse { keys: Vec<Option<PublicKey>> },

    // Credential renewal against the key service.
    RenewRequest { token: [u8; 8] },
    RenewResponse { issued: Option<(crypto::PrivateKey, Certificate)> },

    // Validator consensus.
    VoteRequest { term: u64, candidate: u64, last_log_index: u64, last_log_term: u64 },
    VoteResponse { term: u64, granted: bool },
    AppendEntries {
        term: u64,
        leader: u64,
        prev_log_index: u64,
        prev_log_term: u64,
        leader_commit: u64,
        entry: Option<LogEntry>,
    },
    AppendResponse { term: u64, success: bool, match_index: u64 },
}

/// Fieldless mirror of [`Frame`] for traces and per-kind tallies.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
#[repr(u8)]
pub enum FrameKind {
    ContactNonce = 0x01,
    ContactAuthReply = 0x02,
    ContactAuthFinish = 0x03,
    ContactProof = 0x04,
    AccessNonce = 0x05,
    AccessAuthReply = 0x06,
    AccessAuthFinish = 0x07,
    AccessVerdict = 0x08,
    VisitProof = 0x09,
    StatusQuery = 0x0a,
    StatusResult = 0x0b,
    ZoneQuery = 0x0c,
    ZoneResult = 0x0d,
    TracingUpload = 0x0e,
    TracingResult = 0x0f,
    RecordUpload = 0x10,
    EvidenceBroadcast = 0x11,
    PlaceWindowRequest = 0x12,
    PlaceWindowRecords = 0x13,
    KeyListRequest = 0x14,
    KeyListResponse = 0x15,
    RenewRequest = 0x16,
    RenewResponse = 0x17,
    VoteRequest = 0x18,
    VoteResponse = 0x19,
    AppendEntries = 0x1a,
    AppendResponse = 0x1b,
}

impl FrameKind {
    pub fn name(&self) -> &'static str {
        match self {
            FrameKind::ContactNonce => "contact_nonce",
            FrameKind::ContactAuthReply => "contact_auth_reply",
            FrameKind::ContactAuthFinish => "contact_auth_finish",
            FrameKind::ContactProof => "contact_proof",
            FrameKind::AccessNonce => "access_nonce",
            FrameKind::AccessAuthReply => "access_auth_reply",
            FrameKind::AccessAuthFinish => "access_auth_finish",
            FrameKind::AccessVerdict => "access_verdict",
            FrameKind::VisitProof => "visit_proof",
            FrameKind::StatusQuery => "status_query",
            FrameKind::StatusResult => "status_result",
            FrameKind::ZoneQuery => "zone_query",
            FrameKind::ZoneResult => "zone_result",
            FrameKind::TracingUpload => "tracing_upload",
            FrameKind::TracingResult => "tracing_result",
            FrameKind::RecordUpload => "record_upload",
            FrameKind::EvidenceBroadcast => "evidence_broadcast",
            FrameKind::PlaceWindowRequest => "place_window_request",
            FrameKind::PlaceWindowRecords => "place_window_records",
            FrameKind::KeyListRequest => "key_list_request",
            FrameKind::KeyListResponse => "key_list_response",
            FrameKind::RenewRequest => "renew_request",
            FrameKind::RenewResponse => "renew_response",
            FrameKind::VoteRequest => "vote_request",
            FrameKind::VoteResponse => "vote_response",
            FrameKind::AppendEntries => "append_entries",
            FrameKind::AppendResponse => "append_response",
        }
    }
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::ContactNonce { .. } => FrameKind::ContactNonce,
            Frame::ContactAuthReply { .. } => FrameKind::ContactAuthReply,
            Frame::ContactAuthFinish { .. } => FrameKind::ContactAuthFinish,
            Frame::ContactProof { .. } => FrameKind::ContactProof,
            Frame::AccessNonce { .. } => FrameKind::AccessNonce,
            Frame::AccessAuthReply { .. } => FrameKind::AccessAuthReply,
            Frame::AccessAuthFinish { .. } => FrameKind::AccessAuthFinish,
            Frame::AccessVerdict { .. } => FrameKind::AccessVerdict,
            Frame::VisitProof { .. } => FrameKind::VisitProof,
            Frame::StatusQuery { .. } => FrameKind::StatusQuery,
            Frame::StatusResult { .. } => FrameKind::StatusResult,
            Frame::ZoneQuery { .. } => FrameKind::ZoneQuery,
            Frame::ZoneResult { .. } => FrameKind::ZoneResult,
            Frame::TracingUpload { .. } => FrameKind::TracingUpload,
            Frame::TracingResult { .. } => FrameKind::TracingResult,
            Frame::RecordUpload { .. } => FrameKind::RecordUpload,
            Frame::EvidenceBroadcast { .. } => FrameKind::EvidenceBroadcast,
            Frame::PlaceWindowRequest { .. } => FrameKind::PlaceWindowRequest,
            Frame::PlaceWindowRecords { .. } => FrameKind::PlaceWindowRecords,
            Frame::KeyListRequest { .. } => FrameKind::KeyListRequest,
            Frame::KeyListResponse { .. } => FrameKind::KeyListResponse,
            Frame::RenewRequest { .. } => FrameKind::RenewRequest,
            Frame::RenewResponse { .. } => FrameKind::RenewResponse,
            Frame::VoteRequest { .. } => FrameKind::VoteRequest,
            Frame::VoteResponse { .. } => FrameKind::VoteResponse,
            Frame::AppendEntries { .. } => FrameKind::AppendEntries,
            Frame::AppendResponse { .. } => FrameKind::AppendResponse,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.kind() as u8];
        match self {
            Frame::ContactNonce { nonce } | Frame::AccessNonce { nonce } => {
                out.extend_from_slice(&nonce.0);
            }
            Frame::ContactAuthReply { cert, sig, nonce }
            | Frame::AccessAuthReply { cert, sig, nonce } => {
                out.extend_from_slice(&cert.to_bytes());
                out.extend_from_slice(&sig.to_bytes());
                out.extend_from_slice(&nonce.0);
            }
            Frame::ContactAuthFinish { cert, sig } | Frame::AccessAuthFinish { cert, sig } => {
                out.extend_from_slice(&cert.to_bytes());
                out.extend_from_slice(&sig.to_bytes());
            }
            Frame::ContactProof { msg, sig } | Frame::VisitProof { msg, sig } => {
                out.extend_from_slice(&msg.to_bytes());
                out.extend_from_slice(&sig.to_bytes());
            }
            Frame::AccessVerdict { admit } => out.push(*admit as u8),
            Frame::StatusQuery { pk } => out.extend_from_slice(&pk.to_bytes()),
            Frame::StatusResult { pk, status } => {
                out.extend_from_slice(&pk.to_bytes());
                out.push(match status {
                    KeyStatus::NotFound => 0,
                    KeyStatus::Suspected => 1,
                    KeyStatus::Infected => 2,
                });
            }
            Frame::ZoneQuery { zone } => out.extend_from_slice(&zone.to_be_bytes()),
            Frame::ZoneResult { record, status } => {
                out.extend_from_slice(&record.to_bytes());
                out.push(match status {
                    ZoneStatus::Green => 0,
                    ZoneStatus::Orange => 1,
                    ZoneStatus::Red => 2,
                });
            }
            Frame::TracingUpload { group } | Frame::EvidenceBroadcast { group } => {
                out.extend_from_slice(&group.to_bytes());
            }
            Frame::TracingResult { accepted } => out.push(*accepted as u8),
            Frame::RecordUpload { record } => out.extend_from_slice(&record.to_bytes()),
            Frame::PlaceWindowRequest { from, to } => {
                out.extend_from_slice(&from.to_be_bytes());
                out.extend_from_slice(&to.to_be_bytes());
            }
            Frame::PlaceWindowRecords { group } => {
                if let Some(g) = group {
                    out.extend_from_slice(&g.to_bytes());
                }
            }
            Frame::KeyListRequest { keys } => {
                for k in keys {
                    out.extend_from_slice(&k.to_bytes());
                }
            }
            Frame::KeyListResponse { keys } => {
                for k in keys {
                    match k {
                        Some(pk) => out.extend_from_slice(&pk.to_bytes()),
                        None => out.extend_from_slice(&[0u8; PUBLIC_KEY_LEN]),
                    }
                }
            }
            Frame::RenewRequest { token } => out.extend_from_slice(token),
            Frame::RenewResponse { issued } => match issued {
                Some((sk, cert)) => {
                    out.push(1);
                    out.extend_from_slice(&sk.to_bytes());
                    out.extend_from_slice(&cert.to_bytes());
                }
                None => out.push(0),
            },
            Frame::VoteRequest {
                term,
                candidate,
                last_log_index,
                last_log_term,
            } => {
                out.extend_from_slice(&term.to_be_bytes());
                out.extend_from_slice(&candidate.to_be_bytes());
                out.extend_from_slice(&last_log_index.to_be_bytes());
                out.extend_from_slice(&last_log_term.to_be_bytes());
            }
            Frame::VoteResponse { term, granted } => {
                out.extend_from_slice(&term.to_be_bytes());
                out.push(*granted as u8);
            }
            Frame::AppendEntries {
                term,
                leader,
                prev_log_index,
                prev_log_term,
                leader_commit,
                entry,
            } => {
                out.extend_from_slice(&term.to_be_bytes());
                out.extend_from_slice(&leader.to_be_bytes());
                out.extend_from_slice(&prev_log_index.to_be_bytes());
                out.extend_from_slice(&prev_log_term.to_be_bytes());
                out.extend_from_slice(&leader_commit.to_be_bytes());
                match entry {
                    Some(e) => {
                        out.push(1);
                        out.extend_from_slice(&e.term.to_be_bytes());
                        out.push(e.block.kind_byte());
                        let block = e.block.to_bytes();
                        out.extend_from_slice(&(block.len() as u32).to_be_bytes());
                        out.extend_from_slice(&block);
                    }
                    None => out.push(0),
                }
            }
            Frame::AppendResponse {
                term,
                success,
                match_index,
            } => {
                out.extend_from_slice(&term.to_be_bytes());
                out.push(*success as u8);
                out.extend_from_slice(&match_index.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let frame = match tag {
            0x01 => Frame::ContactNonce { nonce: Nonce(*r.arr()?) },
            0x02 | 0x06 => {
                let cert = Certificate::from_bytes(r.arr()?)?;
                let sig = Signature::from_bytes(r.arr()?)?;
                let nonce = Nonce(*r.arr()?);
                if tag == 0x02 {
                    Frame::ContactAuthReply { cert, sig, nonce }
                } else {
                    Frame::AccessAuthReply { cert, sig, nonce }
                }
            }
            0x03 | 0x07 => {
                let cert = Certificate::from_bytes(r.arr()?)?;
                let sig = Signature::from_bytes(r.arr()?)?;
                if tag == 0x03 {
                    Frame::ContactAuthFinish { cert, sig }
                } else {
                    Frame::AccessAuthFinish { cert, sig }
                }
            }
            0x04 | 0x09 => {
                let msg = ProofMessage::from_bytes(r.arr()?)?;
                let sig = Signature::from_bytes(r.arr()?)?;
                if tag == 0x04 {
                    Frame::ContactProof { msg, sig }
                } else {
                    Frame::VisitProof { msg, sig }
                }
            }
            0x05 => Frame::AccessNonce { nonce: Nonce(*r.arr()?) },
            0x08 => Frame::AccessVerdict {
                admit: decode_bool(r.u8()?)?,
            },
            0x0a => Frame::StatusQuery {
                pk: PublicKey::from_bytes(r.arr()?)?,
            },
            0x0b => Frame::StatusResult {
                pk: PublicKey::from_bytes(r.arr()?)?,
                status: match r.u8()? {
                    0 => KeyStatus::NotFound,
                    1 => KeyStatus::Suspected,
                    2 => KeyStatus::Infected,
                    _ => return Err(WireError::BadValue("unknown status code")),
                },
            },
            0x0c => Frame::ZoneQuery { zone: r.u16()? },
            0x0d => Frame::ZoneResult {
                record: ZoneRecord::from_bytes(r.arr()?),
                status: match r.u8()? {
                    0 => ZoneStatus::Green,
                    1 => ZoneStatus::Orange,
                    2 => ZoneStatus::Red,
                    _ => return Err(WireError::BadValue("unknown zone status")),
                },
            },
            0x0e => Frame::TracingUpload {
                group: RecordGroup::from_bytes(r.rest())?,
            },
            0x0f => Frame::TracingResult {
                accepted: decode_bool(r.u8()?)?,
            },
            0x10 => Frame::RecordUpload {
                record: SignedRecord::from_bytes(r.arr()?)?,
            },
            0x11 => Frame::EvidenceBroadcast {
                group: RecordGroup::from_bytes(r.rest())?,
            },
            0x12 => Frame::PlaceWindowRequest {
                from: r.u64()?,
                to: r.u64()?,
            },
            0x13 => Frame::PlaceWindowRecords {
                group: if r.remaining() == 0 {
                    None
                } else {
                    Some(RecordGroup::from_bytes(r.rest())?)
                },
            },
            0x14 => {
                if r.remaining() % PUBLIC_KEY_LEN != 0 {
                    return Err(WireError::BadValue("key list length"));
                }
                let keys = r
                    .rest()
                    .chunks_exact(PUBLIC_KEY_LEN)
                    .map(|c| PublicKey::from_bytes(c.try_into().unwrap()))
                    .collect::<Result<Vec<_>, _>>()?;
                Frame::KeyListRequest { keys }
            }
            0x15 => {
                if r.remaining() % PUBLIC_KEY_LEN != 0 {
                    return Err(WireError::BadValue("key list length"));
                }
                let keys = r
                    .rest()
                    .chunks_exact(PUBLIC_KEY_LEN)
                    .map(|c| {
                        if c.iter().all(|&b| b == 0) {
                            Ok(None)
                        } else {
                            PublicKey::from_bytes(c.try_into().unwrap()).map(Some)
                        }
                    })
                    .collect::<Result<Vec<_>, crypto::CryptoError>>()?;
                Frame::KeyListResponse { keys }
            }
            0x16 => Frame::RenewRequest { token: *r.arr()? },
            0x17 => Frame::RenewResponse {
                issued: match r.u8()? {
                    0 => None,
                    1 => {
                        let sk = crypto::PrivateKey::from_bytes(r.arr()?)?;
                        let cert = Certificate::from_bytes(r.arr()?)?;
                        Some((sk, cert))
                    }
                    _ => return Err(WireError::BadValue("bad issue flag")),
                },
            },
            0x18 => Frame::VoteRequest {
                term: r.u64()?,
                candidate: r.u64()?,
                last_log_index: r.u64()?,
                last_log_term: r.u64()?,
            },
            0x19 => Frame::VoteResponse {
                term: r.u64()?,
                granted: decode_bool(r.u8()?)?,
            },
            0x1a => {
                let term = r.u64()?;
                let leader = r.u64()?;
                let prev_log_index = r.u64()?;
                let prev_log_term = r.u64()?;
                let leader_commit = r.u64()?;
                let entry = match r.u8()? {
                    0 => None,
                    1 => {
                        let entry_term = r.u64()?;
                        let kind = r.u8()?;
                        let len = r.u32()? as usize;
                        let block = ProposedBlock::from_bytes(kind, r.take(len)?)?;
                        Some(LogEntry {
                            term: entry_term,
                            block,
                        })
                    }
                    _ => return Err(WireError::BadValue("bad entry flag")),
                };
                Frame::AppendEntries {
                    term,
                    leader,
                    prev_log_index,
                    prev_log_term,
                    leader_commit,
                    entry,
                }
            }
            0x1b => Frame::AppendResponse {
                term: r.u64()?,
                success: decode_bool(r.u8()?)?,
                match_index: r.u64()?,
            },
            other => return Err(WireError::UnknownTag(other)),
        };
        r.finish()?;
        Ok(frame)
    }

    /// Payload bytes on the simulated link (tag excluded).
    pub fn payload_len(&self) -> usize {
        self.encode().len() - 1
    }

    /// Bytes this frame contributes to protocol-level size accounting, or
    /// `None` for frames that exist only as simulation plumbing.
    ///
    /// Block proposals count their chain payload (filter bits or zone
    /// records); heartbeats and all other consensus traffic count nothing.
    /// The access verdict is part of its protocol but carries no protocol
    /// data, so it counts zero.
    pub fn nominal_len(&self) -> Option<usize> {
        match self {
            Frame::ContactNonce { .. } | Frame::AccessNonce { .. } => Some(NONCE_LEN),
            Frame::ContactAuthReply { .. } | Frame::AccessAuthReply { .. } => {
                Some(CERTIFICATE_LEN + SIGNATURE_LEN + NONCE_LEN)
            }
            Frame::ContactAuthFinish { .. } | Frame::AccessAuthFinish { .. } => {
                Some(CERTIFICATE_LEN + SIGNATURE_LEN)
            }
            Frame::ContactProof { .. } | Frame::VisitProof { .. } => {
                Some(PROOF_MESSAGE_LEN + SIGNATURE_LEN)
            }
            Frame::AccessVerdict { .. } => Some(0),
            Frame::StatusQuery { .. } => Some(PUBLIC_KEY_LEN),
            Frame::ZoneQuery { .. } => Some(2),
            Frame::TracingUpload { group } | Frame::EvidenceBroadcast { group } => {
                Some(group.encoded_len())
            }
            Frame::RecordUpload { .. } => Some(SIGNED_RECORD_LEN),
            Frame::KeyListRequest { keys } => Some(keys.len() * PUBLIC_KEY_LEN),
            Frame::KeyListResponse { keys } => Some(keys.len() * PUBLIC_KEY_LEN),
            Frame::AppendEntries { entry, .. } => match entry {
                Some(e) => Some(match &e.block {
                    ProposedBlock::Status(b) => b.body.content_len(),
                    ProposedBlock::Zone(b) => b.records.len() * 6,
                }),
                None => None,
            },
            Frame::StatusResult { .. }
            | Frame::ZoneResult { .. }
            | Frame::TracingResult { .. }
            | Frame::PlaceWindowRequest { .. }
            | Frame::PlaceWindowRecords { .. }
            | Frame::RenewRequest { .. }
            | Frame::RenewResponse { .. }
            | Frame::VoteRequest { .. }
            | Frame::VoteResponse { .. }
            | Frame::AppendResponse { .. } => None,
        }
    }
}

fn decode_bool(b: u8) -> Result<bool, WireError> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(WireError::BadValue("bad bool")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{aggregate, issue_certificate, keygen, sign, GroupParams};
    use crate::ledger::{build_status_block, build_zone_block};

    struct Fixture {
        params: GroupParams,
        cert: Certificate,
        sig: Signature,
        pk: PublicKey,
        sk: crypto::PrivateKey,
    }

    fn fixture() -> Fixture {
        let params = GroupParams::new();
        let (issuer_sk, _) = keygen(&params, 1);
        let (sk, pk) = keygen(&params, 2);
        let cert = issue_certificate(&params, &issuer_sk, &pk, 0, 86_400_000).unwrap();
        let sig = sign(&params, &sk, b"handshake");
        Fixture {
            params,
            cert,
            sig,
            pk,
            sk,
        }
    }

    fn group(f: &Fixture, m: usize) -> RecordGroup {
        let msg = ProofMessage {
            subject: f.pk,
            time: 42,
            location: Location::for_zone(3, 17),
        };
        let sigs: Vec<Signature> = (0..m)
            .map(|i| sign(&f.params, &f.sk, &[i as u8]))
            .collect();
        let agg = aggregate(&f.params, &sigs).unwrap();
        let records = vec![GroupedRecord { msg, cert: f.cert }; m];
        RecordGroup::new(records, agg).unwrap()
    }

    fn roundtrip(frame: Frame) -> Frame {
        let bytes = frame.encode();
        let back = Frame::decode(&bytes).unwrap();
        assert_eq!(back, frame);
        back
    }

    #[test]
    fn step_sizes_match_the_protocol_tables() {
        let f = fixture();
        let msg = ProofMessage {
            subject: f.pk,
            time: 7,
            location: Location::for_zone(1, 0),
        };
        let record = SignedRecord {
            msg,
            sig: f.sig,
            cert: f.cert,
        };
        let nonce = Nonce([1, 2, 3, 4, 5]);

        let cases: Vec<(Frame, usize, Option<usize>)> = vec![
            (Frame::ContactNonce { nonce }, 5, Some(5)),
            (
                Frame::ContactAuthReply { cert: f.cert, sig: f.sig, nonce },
                154,
                Some(154),
            ),
            (
                Frame::ContactAuthFinish { cert: f.cert, sig: f.sig },
                149,
                Some(149),
            ),
            (Frame::StatusQuery { pk: f.pk }, 29, Some(29)),
            (
                Frame::StatusResult { pk: f.pk, status: KeyStatus::NotFound },
                30,
                None,
            ),
            (Frame::ContactProof { msg, sig: f.sig }, 99, Some(99)),
            (Frame::VisitProof { msg, sig: f.sig }, 99, Some(99)),
            (Frame::AccessNonce { nonce }, 5, Some(5)),
            (
                Frame::AccessAuthReply { cert: f.cert, sig: f.sig, nonce },
                154,
                Some(154),
            ),
            (
                Frame::AccessAuthFinish { cert: f.cert, sig: f.sig },
                149,
                Some(149),
            ),
            (Frame::AccessVerdict { admit: true }, 1, Some(0)),
            (Frame::RecordUpload { record }, 192, Some(192)),
            (Frame::ZoneQuery { zone: 9 }, 2, Some(2)),
        ];
        for (frame, raw, nominal) in cases {
            assert_eq!(frame.payload_len(), raw, "{:?}", frame.kind());
            assert_eq!(frame.nominal_len(), nominal, "{:?}", frame.kind());
            roundtrip(frame);
        }
    }

    #[test]
    fn record_groups_are_length_delimited() {
        let f = fixture();
        for m in [1usize, 14, 22] {
            let g = group(&f, m);
            let frame = Frame::TracingUpload { group: g.clone() };
            assert_eq!(frame.payload_len(), 136 * m + 56);
            assert_eq!(frame.nominal_len(), Some(136 * m + 56));
            roundtrip(frame);
            roundtrip(Frame::EvidenceBroadcast { group: g });
        }
    }

    #[test]
    fn group_construction_is_checked() {
        let f = fixture();
        let g = group(&f, 3);
        // Aggregate count must match the record count.
        assert!(matches!(
            RecordGroup::new(g.records()[..2].to_vec(), *g.aggregate()),
            Err(WireError::BadValue(_))
        ));
        assert!(matches!(
            RecordGroup::new(vec![], *g.aggregate()),
            Err(WireError::BadValue(_))
        ));
        // Length that is not 136m + 56 fails to parse.
        let mut bytes = Frame::TracingUpload { group: g }.encode();
        bytes.insert(40, 0);
        assert!(Frame::decode(&bytes).is_err());
    }

    #[test]
    fn key_lists_scale_by_29() {
        let f = fixture();
        let keys = vec![f.pk; 6];
        let req = Frame::KeyListRequest { keys };
        assert_eq!(req.payload_len(), 6 * 29);
        assert_eq!(req.nominal_len(), Some(6 * 29));
        roundtrip(req);

        let resp = Frame::KeyListResponse {
            keys: vec![Some(f.pk), None, Some(f.pk), None],
        };
        assert_eq!(resp.payload_len(), 4 * 29);
        assert_eq!(resp.nominal_len(), Some(4 * 29));
        roundtrip(resp);
    }

    #[test]
    fn block_proposals_count_chain_payload_only() {
        let f = fixture();
        let (n1, n2) = (40usize, 24usize);
        let infected: Vec<PublicKey> = (0..n1).map(|i| keygen(&f.params, 100 + i as u64).1).collect();
        let suspected: Vec<PublicKey> =
            (0..n2).map(|i| keygen(&f.params, 500 + i as u64).1).collect();
        let block = build_status_block(
            &f.params,
            &f.sk,
            0,
            [0u8; 28],
            1,
            &infected,
            &suspected,
            true,
        )
        .unwrap();
        let frame = Frame::AppendEntries {
            term: 1,
            leader: 0,
            prev_log_index: 0,
            prev_log_term: 0,
            leader_commit: 0,
            entry: Some(LogEntry {
                term: 1,
                block: ProposedBlock::Status(block),
            }),
        };
        assert_eq!(frame.nominal_len(), Some((10 * n1 + 10 * n2) / 8));
        roundtrip(frame);

        let raw = build_status_block(
            &f.params,
            &f.sk,
            0,
            [0u8; 28],
            1,
            &infected,
            &suspected,
            false,
        )
        .unwrap();
        let frame = Frame::AppendEntries {
            term: 1,
            leader: 0,
            prev_log_index: 0,
            prev_log_term: 0,
            leader_commit: 0,
            entry: Some(LogEntry {
                term: 1,
                block: ProposedBlock::Status(raw),
            }),
        };
        assert_eq!(frame.nominal_len(), Some(29 * (n1 + n2)));
        roundtrip(frame);

        let zb = build_zone_block(
            &f.params,
            &f.sk,
            0,
            [0u8; 28],
            1,
            vec![
                ZoneRecord { zone: 1, infected: 2, suspected: 3 },
                ZoneRecord { zone: 4, infected: 0, suspected: 9 },
            ],
        )
        .unwrap();
        let frame = Frame::AppendEntries {
            term: 1,
            leader: 0,
            prev_log_index: 0,
            prev_log_term: 0,
            leader_commit: 0,
            entry: Some(LogEntry {
                term: 1,
                block: ProposedBlock::Zone(zb),
            }),
        };
        assert_eq!(frame.nominal_len(), Some(12));
        roundtrip(frame);

        let heartbeat = Frame::AppendEntries {
            term: 3,
            leader: 2,
            prev_log_index: 7,
            prev_log_term: 2,
            leader_commit: 7,
            entry: None,
        };
        assert_eq!(heartbeat.nominal_len(), None);
        roundtrip(heartbeat);
    }

    #[test]
    fn consensus_and_service_frames_roundtrip() {
        let f = fixture();
        roundtrip(Frame::VoteRequest {
            term: 2,
            candidate: 4,
            last_log_index: 9,
            last_log_term: 1,
        });
        roundtrip(Frame::VoteResponse { term: 2, granted: true });
        roundtrip(Frame::AppendResponse {
            term: 2,
            success: false,
            match_index: 0,
        });
        roundtrip(Frame::TracingResult { accepted: true });
        roundtrip(Frame::ZoneResult {
            record: ZoneRecord { zone: 5, infected: 1, suspected: 2 },
            status: ZoneStatus::Orange,
        });
        roundtrip(Frame::PlaceWindowRequest { from: 10, to: 99 });
        roundtrip(Frame::PlaceWindowRecords { group: None });
        roundtrip(Frame::PlaceWindowRecords {
            group: Some(group(&f, 2)),
        });
        roundtrip(Frame::RenewRequest { token: [7u8; 8] });
        roundtrip(Frame::RenewResponse { issued: None });
        roundtrip(Frame::RenewResponse {
            issued: Some((f.sk.clone(), f.cert)),
        });
    }

    #[test]
    fn decode_is_strict() {
        let f = fixture();
        assert_eq!(Frame::decode(&[0xee]), Err(WireError::UnknownTag(0xee)));

        let mut bytes = Frame::ContactNonce { nonce: Nonce([0; 5]) }.encode();
        bytes.pop();
        assert!(matches!(
            Frame::decode(&bytes),
            Err(WireError::Truncated { .. })
        ));

        let mut bytes = Frame::StatusQuery { pk: f.pk }.encode();
        bytes.push(0);
        assert_eq!(
            Frame::decode(&bytes),
            Err(WireError::TrailingBytes { extra: 1 })
        );

        assert!(matches!(
            Frame::decode(&[0x08, 9]),
            Err(WireError::BadValue(_))
        ));
    }

    #[test]
    fn locations_pack_into_six_bytes() {
        for (lat, lon) in [(0, 0), (12345, -1), (-8_388_608, 8_388_607), (65535, 400)] {
            let loc = Location::new(lat, lon).unwrap();
            assert_eq!(Location::from_bytes(&loc.to_bytes()), loc);
        }
        assert!(Location::new(1 << 23, 0).is_none());
        assert!(Location::new(0, -(1 << 23) - 1).is_none());
        assert_eq!(Location::for_zone(513, 9).zone(), 513);
    }

    #[test]
    fn proof_message_is_the_signing_input() {
        let f = fixture();
        let msg = ProofMessage {
            subject: f.pk,
            time: 123_456,
            location: Location::for_zone(2, -5),
        };
        let bytes = msg.to_bytes();
        assert_eq!(bytes.len(), 43);
        let sig = sign(&f.params, &f.sk, &bytes);
        assert!(crypto::verify(&f.params, &f.pk, &msg.to_bytes(), &sig));
        assert_eq!(ProofMessage::from_bytes(&bytes).unwrap(), msg);
    }
}
