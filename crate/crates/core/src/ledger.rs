//! Status and zone ledgers: hash-linked blocks committed by the validator
//! quorum, queried by everyone else.
//!
//! A status block carries two Bloom filters (infected keys, suspected
//! keys). A zone block carries one 6-byte record per zone. Both share a
//! 100-byte header:
//!
//!   prev hash    28 B   SHA-224 of the previous block's full serialization
//!   timestamp     8 B
//!   leader sig   56 B   over prev || timestamp || leader id || body hash
//!   leader id     8 B
//!
//! Queries always read the latest block only; history stays on chain for
//! audit, not for lookups.

use crate::bloom::{self, BloomFilter};
use crate::crypto::{self, GroupParams, PrivateKey, PublicKey, Signature};
use crate::metrics::OpKind;
use sha2::{Digest, Sha224};
use thiserror::Error;

pub const BLOCK_HEADER_LEN: usize = 28 + 8 + 56 + 8;
pub const ZONE_RECORD_LEN: usize = 6;

pub type BlockHash = [u8; 28];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("infected and suspected key sets overlap")]
    OverlappingSets,
    #[error("block {index}: previous-hash link broken")]
    BrokenChain { index: usize },
    #[error("block {index}: leader signature invalid")]
    BadLeaderSignature { index: usize },
    #[error("block {index}: unknown leader {leader}")]
    UnknownLeader { index: usize, leader: u64 },
    #[error("zone records must be sorted by zone id without duplicates")]
    UnsortedZones,
    #[error("malformed block bytes: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Bloom(#[from] bloom::BloomError),
    #[error(transparent)]
    Crypto(#[from] crypto::CryptoError),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BlockHeader {
    pub prev_hash: BlockHash,
    pub timestamp: u64,
    pub leader_sig: Signature,
    pub leader_id: u64,
}

impl BlockHeader {
    pub fn to_bytes(&self) -> [u8; BLOCK_HEADER_LEN] {
        let mut out = [0u8; BLOCK_HEADER_LEN];
        out[..28].copy_from_slice(&self.prev_hash);
        out[28..36].copy_from_slice(&self.timestamp.to_be_bytes());
        out[36..92].copy_from_slice(&self.leader_sig.to_bytes());
        out[92..].copy_from_slice(&self.leader_id.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; BLOCK_HEADER_LEN]) -> Result<Self, LedgerError> {
        Ok(BlockHeader {
            prev_hash: bytes[..28].try_into().unwrap(),
            timestamp: u64::from_be_bytes(bytes[28..36].try_into().unwrap()),
            leader_sig: Signature::from_bytes(bytes[36..92].try_into().unwrap())?,
            leader_id: u64::from_be_bytes(bytes[92..].try_into().unwrap()),
        })
    }
}

fn leader_signing_bytes(
    prev_hash: &BlockHash,
    timestamp: u64,
    leader_id: u64,
    body: &[u8],
) -> Vec<u8> {
    let mut buf = Vec::with_capacity(28 + 8 + 8 + 28);
    buf.extend_from_slice(prev_hash);
    buf.extend_from_slice(&timestamp.to_be_bytes());
    buf.extend_from_slice(&leader_id.to_be_bytes());
    buf.extend_from_slice(&Sha224::digest(body));
    buf
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum KeyStatus {
    NotFound,
    Suspected,
    Infected,
}

/// Key-set representation inside a status block. `Filters` is the normal
/// mode; `Keys` lists members outright and exists as the uncompressed
/// baseline the filters are judged against.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum StatusBody {
    Filters {
        infected: BloomFilter,
        suspected: BloomFilter,
    },
    Keys {
        infected: Vec<PublicKey>,
        suspected: Vec<PublicKey>,
    },
}

impl StatusBody {
    /// (infected, suspected) member counts.
    pub fn counts(&self) -> (u32, u32) {
        match self {
            StatusBody::Filters { infected, suspected } => (infected.len(), suspected.len()),
            StatusBody::Keys { infected, suspected } => {
                (infected.len() as u32, suspected.len() as u32)
            }
        }
    }

    /// Set content only: filter bit payloads or raw keys. Headers and tag
    /// bytes are reconstruction metadata, excluded on purpose.
    pub fn content_len(&self) -> usize {
        match self {
            StatusBody::Filters { infected, suspected } => {
                infected.payload_len() + suspected.payload_len()
            }
            StatusBody::Keys { infected, suspected } => {
                29 * (infected.len() + suspected.len())
            }
        }
    }

    fn encode(&self) -> Vec<u8> {
        match self {
            StatusBody::Filters { infected, suspected } => {
                let mut out = vec![0u8];
                out.extend_from_slice(&infected.serialize());
                out.extend_from_slice(&suspected.serialize());
                out
            }
            StatusBody::Keys { infected, suspected } => {
                let mut out = vec![1u8];
                out.extend_from_slice(&(infected.len() as u32).to_be_bytes());
                for k in infected.iter().chain(suspected) {
                    out.extend_from_slice(&k.to_bytes());
                }
                out
            }
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct StatusBlock {
    pub header: BlockHeader,
    pub body: StatusBody,
}

impl StatusBlock {
    pub fn body_bytes(&self) -> Vec<u8> {
        self.body.encode()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.body_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        if bytes.len() < BLOCK_HEADER_LEN + 1 {
            return Err(LedgerError::Malformed("short header"));
        }
        let header = BlockHeader::from_bytes(bytes[..BLOCK_HEADER_LEN].try_into().unwrap())?;
        let tag = bytes[BLOCK_HEADER_LEN];
        let rest = &bytes[BLOCK_HEADER_LEN + 1..];
        let body = match tag {
            0 => {
                let (infected, used) = take_filter(rest)?;
                let suspected = BloomFilter::deserialize(&rest[used..])?;
                StatusBody::Filters {
                    infected,
                    suspected,
                }
            }
            1 => {
                if rest.len() < 4 {
                    return Err(LedgerError::Malformed("short key-list body"));
                }
                let n1 = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
                let keys = &rest[4..];
                if keys.len() % 29 != 0 || keys.len() / 29 < n1 {
                    return Err(LedgerError::Malformed("bad key-list length"));
                }
                let mut all = keys
                    .chunks_exact(29)
                    .map(|c| PublicKey::from_bytes(c.try_into().unwrap()))
                    .collect::<Result<Vec<_>, _>>()?;
                let suspected = all.split_off(n1);
                StatusBody::Keys {
                    infected: all,
                    suspected,
                }
            }
            _ => return Err(LedgerError::Malformed("unknown body tag")),
        };
        Ok(StatusBlock { header, body })
    }

    /// Header plus set content, the size that matters on chain.
    pub fn chain_size(&self) -> usize {
        BLOCK_HEADER_LEN + self.body.content_len()
    }

    pub fn hash(&self) -> BlockHash {
        Sha224::digest(self.to_bytes()).into()
    }

    pub fn verify_leader_sig(&self, params: &GroupParams, leader_pk: &PublicKey) -> bool {
        let msg = leader_signing_bytes(
            &self.header.prev_hash,
            self.header.timestamp,
            self.header.leader_id,
            &self.body_bytes(),
        );
        crypto::verify(params, leader_pk, &msg, &self.header.leader_sig)
    }
}

/// Splits one serialized filter off the front of `bytes`.
fn take_filter(bytes: &[u8]) -> Result<(BloomFilter, usize), LedgerError> {
    if bytes.len() < 4 {
        return Err(LedgerError::Malformed("short filter header"));
    }
    let m = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    let len = 12 + (m as usize + 7) / 8;
    if bytes.len() < len {
        return Err(LedgerError::Malformed("short filter payload"));
    }
    Ok((BloomFilter::deserialize(&bytes[..len])?, len))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ZoneRecord {
    pub zone: u16,
    pub infected: u16,
    pub suspected: u16,
}

impl ZoneRecord {
    pub fn to_bytes(&self) -> [u8; ZONE_RECORD_LEN] {
        let mut out = [0u8; ZONE_RECORD_LEN];
        out[..2].copy_from_slice(&self.zone.to_be_bytes());
        out[2..4].copy_from_slice(&self.infected.to_be_bytes());
        out[4..].copy_from_slice(&self.suspected.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; ZONE_RECORD_LEN]) -> Self {
        ZoneRecord {
            zone: u16::from_be_bytes(bytes[..2].try_into().unwrap()),
            infected: u16::from_be_bytes(bytes[2..4].try_into().unwrap()),
            suspected: u16::from_be_bytes(bytes[4..].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ZoneStatus {
    Green,
    Orange,
    Red,
}

/// Weights and thresholds for turning zone tallies into a color.
#[derive(Clone, Copy, Debug)]
pub struct ZonePolicy {
    pub infected_weight: f64,
    pub suspected_weight: f64,
    /// Above this the zone turns orange.
    pub threshold_orange: f64,
    /// Above this the zone turns red.
    pub threshold_red: f64,
}

impl Default for ZonePolicy {
    fn default() -> Self {
        ZonePolicy {
            infected_weight: 1.0,
            suspected_weight: 0.5,
            threshold_orange: 10.0,
            threshold_red: 50.0,
        }
    }
}

impl ZonePolicy {
    /// Weighted average of the two tallies.
    pub fn weight(&self, infected: u16, suspected: u16) -> f64 {
        let num =
            self.infected_weight * infected as f64 + self.suspected_weight * suspected as f64;
        num / (self.infected_weight + self.suspected_weight)
    }

    pub fn categorize(&self, infected: u16, suspected: u16) -> ZoneStatus {
        let w = self.weight(infected, suspected);
        if w > self.threshold_red {
            ZoneStatus::Red
        } else if w > self.threshold_orange {
            ZoneStatus::Orange
        } else {
            ZoneStatus::Green
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ZoneBlock {
    pub header: BlockHeader,
    pub records: Vec<ZoneRecord>,
}

impl ZoneBlock {
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.records.len() * ZONE_RECORD_LEN);
        for r in &self.records {
            out.extend_from_slice(&r.to_bytes());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header.to_bytes().to_vec();
        out.extend_from_slice(&self.body_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        if bytes.len() < BLOCK_HEADER_LEN {
            return Err(LedgerError::Malformed("short header"));
        }
        let header = BlockHeader::from_bytes(bytes[..BLOCK_HEADER_LEN].try_into().unwrap())?;
        let body = &bytes[BLOCK_HEADER_LEN..];
        if body.len() % ZONE_RECORD_LEN != 0 {
            return Err(LedgerError::Malformed("zone body not a record multiple"));
        }
        let records = body
            .chunks_exact(ZONE_RECORD_LEN)
            .map(|c| ZoneRecord::from_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ZoneBlock { header, records })
    }

    pub fn chain_size(&self) -> usize {
        BLOCK_HEADER_LEN + self.records.len() * ZONE_RECORD_LEN
    }

    pub fn hash(&self) -> BlockHash {
        Sha224::digest(self.to_bytes()).into()
    }

    pub fn verify_leader_sig(&self, params: &GroupParams, leader_pk: &PublicKey) -> bool {
        let msg = leader_signing_bytes(
            &self.header.prev_hash,
            self.header.timestamp,
            self.header.leader_id,
            &self.body_bytes(),
        );
        crypto::verify(params, leader_pk, &msg, &self.header.leader_sig)
    }
}

/// Builds a status block over the final key sets and signs the header.
/// The sets must already be resolved to latest keys and disjoint.
/// `use_filters` picks the body representation.
pub fn build_status_block(
    params: &GroupParams,
    leader_sk: &PrivateKey,
    leader_id: u64,
    prev_hash: BlockHash,
    timestamp: u64,
    infected_keys: &[PublicKey],
    suspected_keys: &[PublicKey],
    use_filters: bool,
) -> Result<StatusBlock, LedgerError> {
    if infected_keys.iter().any(|k| suspected_keys.contains(k)) {
        return Err(LedgerError::OverlappingSets);
    }
    let body = if use_filters {
        StatusBody::Filters {
            infected: fill_filter(params, infected_keys)?,
            suspected: fill_filter(params, suspected_keys)?,
        }
    } else {
        StatusBody::Keys {
            infected: infected_keys.to_vec(),
            suspected: suspected_keys.to_vec(),
        }
    };
    let sig = crypto::sign(
        params,
        leader_sk,
        &leader_signing_bytes(&prev_hash, timestamp, leader_id, &body.encode()),
    );
    Ok(StatusBlock {
        header: BlockHeader {
            prev_hash,
            timestamp,
            leader_sig: sig,
            leader_id,
        },
        body,
    })
}

fn fill_filter(params: &GroupParams, keys: &[PublicKey]) -> Result<BloomFilter, LedgerError> {
    if keys.is_empty() {
        return Ok(BloomFilter::empty());
    }
    let mut f = BloomFilter::new(keys.len() as u32)?;
    for key in keys {
        f.insert(&key.to_bytes());
    }
    params
        .ops()
        .record(OpKind::Hash, f.hash_count() as u64 * keys.len() as u64);
    Ok(f)
}

pub fn build_zone_block(
    params: &GroupParams,
    leader_sk: &PrivateKey,
    leader_id: u64,
    prev_hash: BlockHash,
    timestamp: u64,
    records: Vec<ZoneRecord>,
) -> Result<ZoneBlock, LedgerError> {
    if records.windows(2).any(|w| w[0].zone >= w[1].zone) {
        return Err(LedgerError::UnsortedZones);
    }
    let mut body = Vec::with_capacity(records.len() * ZONE_RECORD_LEN);
    for r in &records {
        body.extend_from_slice(&r.to_bytes());
    }
    let sig = crypto::sign(
        params,
        leader_sk,
        &leader_signing_bytes(&prev_hash, timestamp, leader_id, &body),
    );
    Ok(ZoneBlock {
        header: BlockHeader {
            prev_hash,
            timestamp,
            leader_sig: sig,
            leader_id,
        },
        records,
    })
}

#[derive(Clone, Default, Debug)]
pub struct StatusLedger {
    blocks: Vec<StatusBlock>,
}

impl StatusLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn head_hash(&self) -> BlockHash {
        self.blocks.last().map(|b| b.hash()).unwrap_or([0u8; 28])
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[StatusBlock] {
        &self.blocks
    }

    pub fn latest(&self) -> Option<&StatusBlock> {
        self.blocks.last()
    }

    pub fn append(&mut self, block: StatusBlock) -> Result<(), LedgerError> {
        if block.header.prev_hash != self.head_hash() {
            return Err(LedgerError::BrokenChain {
                index: self.blocks.len(),
            });
        }
        self.blocks.push(block);
        Ok(())
    }

    /// Latest-block lookup, infected set first. One lookup costs one round
    /// of index hashes: the indices are derived once from the key and reused
    /// against both filters (double hashing makes the second application
    /// pure arithmetic). Raw key lists cost nothing modeled.
    pub fn query(&self, params: &GroupParams, pk: &PublicKey) -> KeyStatus {
        let Some(block) = self.blocks.last() else {
            return KeyStatus::NotFound;
        };
        match &block.body {
            StatusBody::Filters {
                infected,
                suspected,
            } => {
                let element = pk.to_bytes();
                params
                    .ops()
                    .record(OpKind::Hash, infected.hash_count() as u64);
                if infected.contains(&element) {
                    return KeyStatus::Infected;
                }
                if suspected.contains(&element) {
                    return KeyStatus::Suspected;
                }
                KeyStatus::NotFound
            }
            StatusBody::Keys {
                infected,
                suspected,
            } => {
                if infected.contains(pk) {
                    KeyStatus::Infected
                } else if suspected.contains(pk) {
                    KeyStatus::Suspected
                } else {
                    KeyStatus::NotFound
                }
            }
        }
    }

    /// Full structural audit: hash links and leader signatures.
    pub fn verify_chain(
        &self,
        params: &GroupParams,
        resolve_leader: impl Fn(u64) -> Option<PublicKey>,
    ) -> Result<(), LedgerError> {
        let mut prev = [0u8; 28];
        for (index, block) in self.blocks.iter().enumerate() {
            if block.header.prev_hash != prev {
                return Err(LedgerError::BrokenChain { index });
            }
            let leader = resolve_leader(block.header.leader_id).ok_or(
                LedgerError::UnknownLeader {
                    index,
                    leader: block.header.leader_id,
                },
            )?;
            if !block.verify_leader_sig(params, &leader) {
                return Err(LedgerError::BadLeaderSignature { index });
            }
            prev = block.hash();
        }
        Ok(())
    }

    pub fn to_hex_lines(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&hex::encode(b.to_bytes()));
            out.push('\n');
        }
        out
    }

    pub fn from_hex_lines(text: &str) -> Result<Self, LedgerError> {
        let mut ledger = StatusLedger::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let bytes = hex::decode(line.trim())
                .map_err(|_| LedgerError::Malformed("bad hex line"))?;
            ledger.blocks.push(StatusBlock::from_bytes(&bytes)?);
        }
        Ok(ledger)
    }
}

#[derive(Clone, Debug)]
pub struct ZoneLedger {
    blocks: Vec<ZoneBlock>,
    policy: ZonePolicy,
}

impl ZoneLedger {
    pub fn new(policy: ZonePolicy) -> Self {
        ZoneLedger {
            blocks: Vec::new(),
            policy,
        }
    }

    pub fn policy(&self) -> &ZonePolicy {
        &self.policy
    }

    pub fn head_hash(&self) -> BlockHash {
        self.blocks.last().map(|b| b.hash()).unwrap_or([0u8; 28])
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[ZoneBlock] {
        &self.blocks
    }

    pub fn latest(&self) -> Option<&ZoneBlock> {
        self.blocks.last()
    }

    pub fn append(&mut self, block: ZoneBlock) -> Result<(), LedgerError> {
        if block.header.prev_hash != self.head_hash() {
            return Err(LedgerError::BrokenChain {
                index: self.blocks.len(),
            });
        }
        self.blocks.push(block);
        Ok(())
    }

    /// A zone nobody has reported on is green with zero tallies.
    pub fn query(&self, zone: u16) -> (ZoneRecord, ZoneStatus) {
        let record = self
            .blocks
            .last()
            .and_then(|b| b.records.iter().find(|r| r.zone == zone).copied())
            .unwrap_or(ZoneRecord {
                zone,
                infected: 0,
                suspected: 0,
            });
        let status = self.policy.categorize(record.infected, record.suspected);
        (record, status)
    }

    pub fn verify_chain(
        &self,
        params: &GroupParams,
        resolve_leader: impl Fn(u64) -> Option<PublicKey>,
    ) -> Result<(), LedgerError> {
        let mut prev = [0u8; 28];
        for (index, block) in self.blocks.iter().enumerate() {
            if block.header.prev_hash != prev {
                return Err(LedgerError::BrokenChain { index });
            }
            let leader = resolve_leader(block.header.leader_id).ok_or(
                LedgerError::UnknownLeader {
                    index,
                    leader: block.header.leader_id,
                },
            )?;
            if !block.verify_leader_sig(params, &leader) {
                return Err(LedgerError::BadLeaderSignature { index });
            }
            prev = block.hash();
        }
        Ok(())
    }

    pub fn to_hex_lines(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&hex::encode(b.to_bytes()));
            out.push('\n');
        }
        out
    }

    pub fn from_hex_lines(text: &str, policy: ZonePolicy) -> Result<Self, LedgerError> {
        let mut ledger = ZoneLedger::new(policy);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let bytes = hex::decode(line.trim())
                .map_err(|_| LedgerError::Malformed("bad hex line"))?;
            ledger.blocks.push(ZoneBlock::from_bytes(&bytes)?);
        }
        Ok(ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;

    fn keys(params: &GroupParams, count: usize, base: u64) -> Vec<PublicKey> {
        (0..count)
            .map(|i| keygen(params, base + i as u64).1)
            .collect()
    }

    #[test]
    fn empty_block_is_header_sized() {
        let p = GroupParams::new();
        let (sk, pk) = keygen(&p, 1);
        let b = build_status_block(&p, &sk, 0, [0u8; 28], 5, &[], &[], true).unwrap();
        assert_eq!(b.chain_size(), 100);
        assert!(b.verify_leader_sig(&p, &pk));
        let back = StatusBlock::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn chain_size_formula() {
        let p = GroupParams::new();
        let (sk, _) = keygen(&p, 1);
        for (n1, n2) in [(4usize, 4usize), (100, 60), (400, 200), (3500, 3500)] {
            let b = build_status_block(
                &p,
                &sk,
                0,
                [0u8; 28],
                1,
                &keys(&p, n1, 10_000),
                &keys(&p, n2, 20_000),
                true,
            )
            .unwrap();
            assert_eq!(b.chain_size(), 100 + (10 * n1 + 10 * n2) / 8, "{n1},{n2}");
        }
    }

    #[test]
    fn overlap_rejected() {
        let p = GroupParams::new();
        let (sk, _) = keygen(&p, 1);
        let shared = keys(&p, 3, 500);
        let err = build_status_block(&p, &sk, 0, [0u8; 28], 1, &shared, &shared[2..], true).unwrap_err();
        assert_eq!(err, LedgerError::OverlappingSets);
    }

    #[test]
    fn query_reads_latest_only() {
        let p = GroupParams::new();
        let (sk, _) = keygen(&p, 1);
        let old_keys = keys(&p, 4, 100);
        let new_keys = keys(&p, 4, 200);

        let mut ledger = StatusLedger::new();
        assert_eq!(ledger.query(&p, &old_keys[0]), KeyStatus::NotFound);

        let b1 =
            build_status_block(&p, &sk, 0, ledger.head_hash(), 1, &old_keys, &[], true).unwrap();
        ledger.append(b1).unwrap();
        assert_eq!(ledger.query(&p, &old_keys[0]), KeyStatus::Infected);

        let b2 = build_status_block(
            &p,
            &sk,
            0,
            ledger.head_hash(),
            2,
            &new_keys[..2],
            &new_keys[2..],
            true,
        )
        .unwrap();
        ledger.append(b2).unwrap();
        assert_eq!(ledger.query(&p, &new_keys[0]), KeyStatus::Infected);
        assert_eq!(ledger.query(&p, &new_keys[3]), KeyStatus::Suspected);
        // Dropped from the newest block, so gone.
        assert_eq!(ledger.query(&p, &old_keys[0]), KeyStatus::NotFound);

        // One lookup costs one round of index hashes, even when it falls
        // through to the second filter.
        let before = p.ops().snapshot();
        ledger.query(&p, &old_keys[1]);
        let used = p.ops().snapshot().since(&before);
        assert_eq!(used.hash, 5);
        assert_eq!(used.total(), 5);
    }

    #[test]
    fn chain_links_verify() {
        let p = GroupParams::new();
        let (sk, pk) = keygen(&p, 1);
        let mut ledger = StatusLedger::new();
        for t in 0..3u64 {
            let b = build_status_block(
                &p,
                &sk,
                7,
                ledger.head_hash(),
                t,
                &keys(&p, 2, 300 + t * 10),
                &[],
                true,
            )
            .unwrap();
            ledger.append(b).unwrap();
        }
        let resolve = |id: u64| (id == 7).then_some(pk);
        ledger.verify_chain(&p, resolve).unwrap();

        // Wrong link refused on append.
        let stray = build_status_block(&p, &sk, 7, [9u8; 28], 9, &[], &[], true).unwrap();
        assert!(matches!(
            ledger.clone().append(stray),
            Err(LedgerError::BrokenChain { index: 3 })
        ));

        // A flipped body byte breaks the recorded hash link.
        let mut text = ledger.to_hex_lines();
        let mid = 300;
        let flipped = if &text[mid..mid + 1] == "0" { "1" } else { "0" };
        text.replace_range(mid..mid + 1, flipped);
        let damaged = StatusLedger::from_hex_lines(&text).unwrap();
        assert!(matches!(
            damaged.verify_chain(&p, resolve),
            Err(LedgerError::BrokenChain { .. }) | Err(LedgerError::BadLeaderSignature { .. })
        ));
    }

    #[test]
    fn zone_block_roundtrip_and_query() {
        let p = GroupParams::new();
        let (sk, pk) = keygen(&p, 1);
        let records = vec![
            ZoneRecord { zone: 1, infected: 100, suspected: 50 },
            ZoneRecord { zone: 2, infected: 10, suspected: 20 },
            ZoneRecord { zone: 5, infected: 0, suspected: 1 },
        ];
        let b = build_zone_block(&p, &sk, 3, [0u8; 28], 9, records.clone()).unwrap();
        assert_eq!(b.chain_size(), 100 + 6 * 3);
        assert!(b.verify_leader_sig(&p, &pk));
        assert_eq!(ZoneBlock::from_bytes(&b.to_bytes()).unwrap(), b);

        let mut ledger = ZoneLedger::new(ZonePolicy::default());
        ledger.append(b).unwrap();
        let (r, s) = ledger.query(1);
        assert_eq!(r.infected, 100);
        assert_eq!(s, ZoneStatus::Red);
        assert_eq!(ledger.query(2).1, ZoneStatus::Orange);
        assert_eq!(ledger.query(5).1, ZoneStatus::Green);
        // Unknown zone reads green.
        assert_eq!(ledger.query(40).1, ZoneStatus::Green);

        let unsorted = vec![
            ZoneRecord { zone: 2, infected: 0, suspected: 0 },
            ZoneRecord { zone: 2, infected: 1, suspected: 0 },
        ];
        assert_eq!(
            build_zone_block(&p, &sk, 3, [0u8; 28], 9, unsorted).unwrap_err(),
            LedgerError::UnsortedZones
        );
    }

    #[test]
    fn zone_weighting() {
        let even = ZonePolicy {
            infected_weight: 1.0,
            suspected_weight: 1.0,
            ..ZonePolicy::default()
        };
        // (100 + 50) / 2 = 75 > 50.
        assert_eq!(even.categorize(100, 50), ZoneStatus::Red);
        assert!((even.weight(100, 50) - 75.0).abs() < 1e-12);

        let policy = ZonePolicy::default();
        // Exactly at a threshold stays in the lower band.
        // w = (1*15 + 0.5*0) / 1.5 = 10 = orange threshold.
        assert_eq!(policy.categorize(15, 0), ZoneStatus::Green);
        // w = (1*75 + 0.5*0) / 1.5 = 50 = red threshold.
        assert_eq!(policy.categorize(75, 0), ZoneStatus::Orange);
        assert_eq!(policy.categorize(76, 0), ZoneStatus::Red);
        assert_eq!(policy.categorize(0, 0), ZoneStatus::Green);
    }

    #[test]
    fn raw_key_body_roundtrip_and_exact_query() {
        let p = GroupParams::new();
        let (sk, pk) = keygen(&p, 1);
        let infected = keys(&p, 3, 700);
        let suspected = keys(&p, 2, 800);
        let absent = keygen(&p, 900).1;
        let b = build_status_block(
            &p,
            &sk,
            0,
            [0u8; 28],
            1,
            &infected,
            &suspected,
            false,
        )
        .unwrap();
        assert_eq!(b.chain_size(), 100 + 29 * 5);
        assert!(b.verify_leader_sig(&p, &pk));
        assert_eq!(StatusBlock::from_bytes(&b.to_bytes()).unwrap(), b);

        let mut ledger = StatusLedger::new();
        ledger.append(b).unwrap();
        let before = p.ops().snapshot();
        assert_eq!(ledger.query(&p, &infected[0]), KeyStatus::Infected);
        assert_eq!(ledger.query(&p, &suspected[1]), KeyStatus::Suspected);
        assert_eq!(ledger.query(&p, &absent), KeyStatus::NotFound);
        // Exact lookups, nothing modeled.
        assert_eq!(p.ops().snapshot().since(&before).total(), 0);
    }

    #[test]
    fn raw_key_baseline_sizes() {
        // Listing 7000 keys raw instead of filtering them.
        let filtered = 100 + (10 * 3500 + 10 * 3500) / 8;
        let raw = 100 + 29 * 7000;
        assert_eq!(filtered, 8850);
        assert_eq!(raw, 203_100);
        let reduction = 1.0 - filtered as f64 / raw as f64;
        assert!(reduction >= 0.95, "reduction {reduction}");
    }
}
