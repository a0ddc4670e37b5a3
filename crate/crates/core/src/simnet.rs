//! Deterministic discrete-event plumbing: a scheduler with a total event
//! order, a seeded link model, and the frame trace everything is audited
//! from.
//!
//! Time is integer milliseconds. Events at the same instant run in
//! insertion order, so a run is a pure function of its inputs. The trace
//! records every send (delivered or not) and hashes to a single digest two
//! equal runs must share.

use crate::wire::{Frame, FrameKind, Phase};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha224};
use std::collections::{BTreeMap, BTreeSet};

pub type ActorId = u64;

/// Time-ordered event queue; ties run in insertion order.
pub struct Scheduler<E> {
    events: BTreeMap<(u64, u64), E>,
    time: u64,
    seq: u64,
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            events: BTreeMap::new(),
            time: 0,
            seq: 0,
        }
    }

    pub fn now(&self) -> u64 {
        self.time
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn schedule_at(&mut self, at: u64, event: E) {
        debug_assert!(at >= self.time, "scheduling into the past");
        let key = (at.max(self.time), self.seq);
        self.seq += 1;
        self.events.insert(key, event);
    }

    pub fn schedule_after(&mut self, delay: u64, event: E) {
        self.schedule_at(self.time + delay, event);
    }

    /// Pops the next event not later than `until`, advancing the clock to
    /// it. Returns `None` when the horizon is reached; the clock then sits
    /// at `until`.
    pub fn pop_until(&mut self, until: u64) -> Option<(u64, E)> {
        match self.events.first_key_value() {
            Some((&(at, _), _)) if at <= until => {
                let ((at, seq), event) = self.events.pop_first().unwrap();
                let _ = seq;
                self.time = at;
                Some((at, event))
            }
            _ => {
                self.time = until;
                None
            }
        }
    }
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Nodes in `group_a` cannot reach the others while the window is open.
/// Evaluated when a frame is sent, not when it would arrive.
#[derive(Clone, Debug)]
pub struct PartitionWindow {
    pub from_ms: u64,
    pub to_ms: u64,
    pub group_a: BTreeSet<ActorId>,
}

/// Seeded latency, loss and partitions.
pub struct LinkModel {
    rng: ChaCha20Rng,
    latency_ms: (u64, u64),
    loss: f64,
    partitions: Vec<PartitionWindow>,
}

/// What the link decided for one frame at send time.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LinkOutcome {
    Deliver { after_ms: u64 },
    Lost,
    Partitioned,
}

impl LinkModel {
    pub fn new(seed: u64) -> Self {
        LinkModel {
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6c69_6e6b),
            latency_ms: (5, 20),
            loss: 0.0,
            partitions: Vec::new(),
        }
    }

    pub fn set_latency(&mut self, range: (u64, u64)) {
        assert!(range.0 <= range.1);
        self.latency_ms = range;
    }

    pub fn set_loss(&mut self, loss: f64) {
        assert!((0.0..=1.0).contains(&loss));
        self.loss = loss;
    }

    pub fn set_partitions(&mut self, windows: Vec<PartitionWindow>) {
        self.partitions = windows;
    }

    pub fn partitioned(&self, src: ActorId, dst: ActorId, now: u64) -> bool {
        self.partitions.iter().any(|w| {
            now >= w.from_ms
                && now < w.to_ms
                && (w.group_a.contains(&src) != w.group_a.contains(&dst))
        })
    }

    pub fn judge(&mut self, src: ActorId, dst: ActorId, now: u64) -> LinkOutcome {
        if self.partitioned(src, dst, now) {
            return LinkOutcome::Partitioned;
        }
        if self.loss > 0.0 && self.rng.gen_bool(self.loss) {
            return LinkOutcome::Lost;
        }
        let (lo, hi) = self.latency_ms;
        LinkOutcome::Deliver {
            after_ms: self.rng.gen_range(lo..=hi),
        }
    }
}

pub const TRACE_ENTRY_LEN: usize = 35;

/// One frame send, whether or not it arrived.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TraceEntry {
    pub time: u64,
    pub src: ActorId,
    pub dst: ActorId,
    pub phase: Phase,
    pub kind: FrameKind,
    /// Encoded frame payload, transport tag excluded.
    pub payload_len: u32,
    /// Protocol-level accounting size; `None` for plumbing frames.
    pub nominal_len: Option<u32>,
    pub delivered: bool,
}

impl TraceEntry {
    pub fn to_bytes(&self) -> [u8; TRACE_ENTRY_LEN] {
        let mut out = [0u8; TRACE_ENTRY_LEN];
        out[..8].copy_from_slice(&self.time.to_be_bytes());
        out[8..16].copy_from_slice(&self.src.to_be_bytes());
        out[16..24].copy_from_slice(&self.dst.to_be_bytes());
        out[24] = self.phase as u8;
        out[25] = self.kind as u8;
        out[26..30].copy_from_slice(&self.payload_len.to_be_bytes());
        out[30..34].copy_from_slice(&self.nominal_len.map_or(u32::MAX, |v| v).to_be_bytes());
        out[34] = self.delivered as u8;
        out
    }

    pub fn from_bytes(bytes: &[u8; TRACE_ENTRY_LEN]) -> Option<Self> {
        let phase = match bytes[24] {
            0 => Phase::Setup,
            1 => Phase::Contact,
            2 => Phase::StatusUpdate,
            3 => Phase::Tracing,
            4 => Phase::AccessControl,
            5 => Phase::Consensus,
            _ => return None,
        };
        let kind = frame_kind_from_u8(bytes[25])?;
        let nominal = u32::from_be_bytes(bytes[30..34].try_into().unwrap());
        Some(TraceEntry {
            time: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            src: u64::from_be_bytes(bytes[8..16].try_into().unwrap()),
            dst: u64::from_be_bytes(bytes[16..24].try_into().unwrap()),
            phase,
            kind,
            payload_len: u32::from_be_bytes(bytes[26..30].try_into().unwrap()),
            nominal_len: (nominal != u32::MAX).then_some(nominal),
            delivered: match bytes[34] {
                0 => false,
                1 => true,
                _ => return None,
            },
        })
    }
}

fn frame_kind_from_u8(b: u8) -> Option<FrameKind> {
    use FrameKind::*;
    Some(match b {
        0x01 => ContactNonce,
        0x02 => ContactAuthReply,
        0x03 => ContactAuthFinish,
        0x04 => ContactProof,
        0x05 => AccessNonce,
        0x06 => AccessAuthReply,
        0x07 => AccessAuthFinish,
        0x08 => AccessVerdict,
        0x09 => VisitProof,
        0x0a => StatusQuery,
        0x0b => StatusResult,
        0x0c => ZoneQuery,
        0x0d => ZoneResult,
        0x0e => TracingUpload,
        0x0f => TracingResult,
        0x10 => RecordUpload,
        0x11 => EvidenceBroadcast,
        0x12 => PlaceWindowRequest,
        0x13 => PlaceWindowRecords,
        0x14 => KeyListRequest,
        0x15 => KeyListResponse,
        0x16 => RenewRequest,
        0x17 => RenewResponse,
        0x18 => VoteRequest,
        0x19 => VoteResponse,
        0x1a => AppendEntries,
        0x1b => AppendResponse,
        _ => return None,
    })
}

/// Append-only record of every send in a run.
#[derive(Default)]
pub struct Trace {
    entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn record(&mut self, entry: TraceEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Digest over the canonical encoding of all entries in order.
    pub fn digest(&self) -> [u8; 28] {
        let mut h = Sha224::new();
        for e in &self.entries {
            h.update(e.to_bytes());
        }
        h.finalize().into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.entries.len() * TRACE_ENTRY_LEN);
        out.extend_from_slice(&(self.entries.len() as u64).to_be_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 8 {
            return None;
        }
        let count = u64::from_be_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != count * TRACE_ENTRY_LEN {
            return None;
        }
        let entries = body
            .chunks_exact(TRACE_ENTRY_LEN)
            .map(|c| TraceEntry::from_bytes(c.try_into().unwrap()))
            .collect::<Option<Vec<_>>>()?;
        Some(Trace { entries })
    }

    /// Convenience constructor used by the engine's send path.
    pub fn record_send(
        &mut self,
        time: u64,
        src: ActorId,
        dst: ActorId,
        phase: Phase,
        frame: &Frame,
        delivered: bool,
    ) {
        self.record(TraceEntry {
            time,
            src,
            dst,
            phase,
            kind: frame.kind(),
            payload_len: frame.payload_len() as u32,
            nominal_len: frame.nominal_len().map(|v| v as u32),
            delivered,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, GroupParams};

    #[test]
    fn scheduler_orders_by_time_then_insertion() {
        let mut s: Scheduler<&str> = Scheduler::new();
        s.schedule_at(10, "b");
        s.schedule_at(5, "a");
        s.schedule_at(10, "c");
        s.schedule_at(30, "d");
        let mut seen = Vec::new();
        while let Some((t, e)) = s.pop_until(20) {
            seen.push((t, e));
        }
        assert_eq!(seen, vec![(5, "a"), (10, "b"), (10, "c")]);
        assert_eq!(s.now(), 20);
        assert_eq!(s.len(), 1);
        assert_eq!(s.pop_until(100), Some((30, "d")));
    }

    #[test]
    fn link_latency_stays_in_range_and_is_seeded() {
        let draws = |seed: u64| {
            let mut link = LinkModel::new(seed);
            (0..200)
                .map(|_| match link.judge(0, 1, 0) {
                    LinkOutcome::Deliver { after_ms } => after_ms,
                    other => panic!("unexpected {other:?}"),
                })
                .collect::<Vec<_>>()
        };
        let a = draws(1);
        assert!(a.iter().all(|&d| (5..=20).contains(&d)));
        assert!(a.iter().any(|&d| d == 5) && a.iter().any(|&d| d == 20));
        assert_eq!(a, draws(1));
        assert_ne!(a, draws(2));
    }

    #[test]
    fn partitions_cut_cross_group_sends_at_send_time() {
        let mut link = LinkModel::new(3);
        link.set_partitions(vec![PartitionWindow {
            from_ms: 100,
            to_ms: 200,
            group_a: BTreeSet::from([1, 2]),
        }]);
        assert_eq!(link.judge(1, 3, 50).is_partitioned(), false);
        assert!(link.judge(1, 3, 100).is_partitioned());
        assert!(link.judge(3, 1, 150).is_partitioned());
        // Same side stays connected.
        assert!(!link.judge(1, 2, 150).is_partitioned());
        // Window closed again.
        assert!(!link.judge(1, 3, 200).is_partitioned());
    }

    impl LinkOutcome {
        fn is_partitioned(&self) -> bool {
            matches!(self, LinkOutcome::Partitioned)
        }
    }

    #[test]
    fn loss_is_applied_after_partition_check() {
        let mut link = LinkModel::new(9);
        link.set_loss(0.5);
        let outcomes: Vec<LinkOutcome> = (0..100).map(|_| link.judge(0, 1, 0)).collect();
        let lost = outcomes.iter().filter(|o| **o == LinkOutcome::Lost).count();
        assert!(lost > 20 && lost < 80, "lost {lost}");
    }

    #[test]
    fn trace_roundtrip_and_digest() {
        let params = GroupParams::new();
        let (_, pk) = keygen(&params, 4);
        let mut trace = Trace::new();
        trace.record_send(
            10,
            1,
            2,
            Phase::Contact,
            &Frame::StatusQuery { pk },
            true,
        );
        trace.record_send(
            12,
            2,
            1,
            Phase::Contact,
            &Frame::StatusResult {
                pk,
                status: crate::ledger::KeyStatus::NotFound,
            },
            false,
        );
        assert_eq!(trace.entries()[0].payload_len, 29);
        assert_eq!(trace.entries()[0].nominal_len, Some(29));
        assert_eq!(trace.entries()[1].nominal_len, None);

        let bytes = trace.to_bytes();
        let back = Trace::from_bytes(&bytes).unwrap();
        assert_eq!(back.entries(), trace.entries());
        assert_eq!(back.digest(), trace.digest());

        let mut damaged = bytes.clone();
        damaged[20] ^= 1;
        let tampered = Trace::from_bytes(&damaged).unwrap();
        assert_ne!(tampered.digest(), trace.digest());
    }
}
