//! Operation accounting and the calibrated cost model.
//!
//! Cryptographic work is counted, not timed: every primitive bumps a counter
//! and reports multiply counts by per-operation costs measured on the
//! reference handset (milliseconds). That keeps simulated computation
//! figures independent of the host machine.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::simnet::Trace;
use crate::wire::{FrameKind, Phase};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Pairing,
    Hash,
    Add,
    Mul,
    Exp,
}

/// Concurrent-safe counters for the five primitive operation classes.
#[derive(Default, Debug)]
pub struct OpCounter {
    pairing: AtomicU64,
    hash: AtomicU64,
    add: AtomicU64,
    mul: AtomicU64,
    exp: AtomicU64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, kind: OpKind, n: u64) {
        let cell = match kind {
            OpKind::Pairing => &self.pairing,
            OpKind::Hash => &self.hash,
            OpKind::Add => &self.add,
            OpKind::Mul => &self.mul,
            OpKind::Exp => &self.exp,
        };
        cell.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            pairing: self.pairing.load(Ordering::Relaxed),
            hash: self.hash.load(Ordering::Relaxed),
            add: self.add.load(Ordering::Relaxed),
            mul: self.mul.load(Ordering::Relaxed),
            exp: self.exp.load(Ordering::Relaxed),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub pairing: u64,
    pub hash: u64,
    pub add: u64,
    pub mul: u64,
    pub exp: u64,
}

impl OpCounts {
    pub fn since(&self, earlier: &OpCounts) -> OpCounts {
        OpCounts {
            pairing: self.pairing - earlier.pairing,
            hash: self.hash - earlier.hash,
            add: self.add - earlier.add,
            mul: self.mul - earlier.mul,
            exp: self.exp - earlier.exp,
        }
    }

    pub fn accumulate(&mut self, other: &OpCounts) {
        self.pairing += other.pairing;
        self.hash += other.hash;
        self.add += other.add;
        self.mul += other.mul;
        self.exp += other.exp;
    }

    pub fn modeled_ms(&self, model: &CostModel) -> f64 {
        self.pairing as f64 * model.pairing_ms
            + self.hash as f64 * model.hash_ms
            + self.add as f64 * model.add_ms
            + self.mul as f64 * model.mul_ms
            + self.exp as f64 * model.exp_ms
    }

    pub fn total(&self) -> u64 {
        self.pairing + self.hash + self.add + self.mul + self.exp
    }
}

/// Per-operation costs in milliseconds on the reference handset.
#[derive(Clone, Copy, Debug)]
pub struct CostModel {
    pub pairing_ms: f64,
    pub hash_ms: f64,
    pub add_ms: f64,
    pub mul_ms: f64,
    pub exp_ms: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            pairing_ms: 3.139,
            hash_ms: 0.058,
            add_ms: 0.000227,
            mul_ms: 0.000269,
            exp_ms: 0.334,
        }
    }
}

impl CostModel {
    /// One signature: hash to the group, then a scalar multiplication.
    pub fn sign_ms(&self) -> f64 {
        self.hash_ms + self.mul_ms
    }

    /// One verification: two pairing evaluations.
    pub fn verify_ms(&self) -> f64 {
        2.0 * self.pairing_ms
    }

    /// Verifying an aggregate over m messages: m + 1 pairings.
    pub fn aggregate_verify_ms(&self, m: u64) -> f64 {
        (m + 1) as f64 * self.pairing_ms
    }

    /// One filter probe: k index hashes.
    pub fn bloom_probe_ms(&self, k: u64) -> f64 {
        k as f64 * self.hash_ms
    }

    /// Building filters over n keys, k index hashes each.
    pub fn filter_build_ms(&self, n: u64, k: u64) -> f64 {
        (n * k) as f64 * self.hash_ms
    }
}

/// The entity classes compute is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum ActorClass {
    User = 0,
    Place = 1,
    Validator = 2,
    Authority = 3,
    Kdc = 4,
}

impl ActorClass {
    pub const ALL: [ActorClass; 5] = [
        ActorClass::User,
        ActorClass::Place,
        ActorClass::Validator,
        ActorClass::Authority,
        ActorClass::Kdc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActorClass::User => "user",
            ActorClass::Place => "place",
            ActorClass::Validator => "validator",
            ActorClass::Authority => "authority",
            ActorClass::Kdc => "kdc",
        }
    }
}

/// Collects per-class, per-phase operation counts and notable events over a
/// run.
///
/// The engine snapshots the shared [`OpCounter`] around each handler and
/// attributes the delta to the acting entity's class and the phase the
/// handler serves, so one counter can feed all the buckets without the
/// primitives knowing about either.
#[derive(Debug, Default)]
pub struct MetricsSink {
    compute: [[OpCounts; 6]; 5],
    fp_detected: u64,
}

impl MetricsSink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Credit a counted-operation delta to a class and phase.
    pub fn attribute(&mut self, class: ActorClass, phase: Phase, delta: &OpCounts) {
        self.compute[class as usize][phase as usize].accumulate(delta);
    }

    /// Record one detected filter false positive.
    pub fn fp_event(&mut self) {
        self.fp_detected += 1;
    }

    pub fn fp_detected(&self) -> u64 {
        self.fp_detected
    }

    pub fn class_phase_counts(&self, class: ActorClass, phase: Phase) -> &OpCounts {
        &self.compute[class as usize][phase as usize]
    }

    pub fn phase_counts(&self, phase: Phase) -> OpCounts {
        let mut total = OpCounts::default();
        for class in ActorClass::ALL {
            total.accumulate(&self.compute[class as usize][phase as usize]);
        }
        total
    }

    pub fn compute_report(&self, model: &CostModel) -> ComputeReport {
        let mut rows = Vec::new();
        let mut total = OpCounts::default();
        for class in ActorClass::ALL {
            for phase in Phase::ALL {
                let counts = self.compute[class as usize][phase as usize];
                total.accumulate(&counts);
                if counts.total() == 0 {
                    continue;
                }
                rows.push(ComputeRow {
                    class,
                    phase,
                    counts,
                    modeled_ms: counts.modeled_ms(model),
                });
            }
        }
        ComputeReport {
            rows,
            total_ms: total.modeled_ms(model),
            total,
            fp_detected: self.fp_detected,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ComputeRow {
    pub class: ActorClass,
    pub phase: Phase,
    pub counts: OpCounts,
    pub modeled_ms: f64,
}

/// Modeled computation per class and phase, priced with a [`CostModel`].
/// Rows with no operations are omitted.
#[derive(Clone, Debug)]
pub struct ComputeReport {
    pub rows: Vec<ComputeRow>,
    pub total: OpCounts,
    pub total_ms: f64,
    pub fp_detected: u64,
}

impl ComputeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,phase,pairing,hash,add,mul,exp,modeled_ms\n");
        for row in &self.rows {
            let c = row.counts;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3}",
                row.class.name(),
                row.phase.name(),
                c.pairing,
                c.hash,
                c.add,
                c.mul,
                c.exp,
                row.modeled_ms
            )
            .unwrap();
        }
        let t = self.total;
        writeln!(
            out,
            "total,all,{},{},{},{},{},{:.3}",
            t.pairing, t.hash, t.add, t.mul, t.exp, self.total_ms
        )
        .unwrap();
        out
    }
}

/// Byte and frame tallies for one (phase, frame kind) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommTotals {
    pub frames: u64,
    pub raw_bytes: u64,
    /// Bytes under the published accounting convention, where counted.
    pub nominal_bytes: u64,
    pub undelivered: u64,
}

impl CommTotals {
    fn add_entry(&mut self, payload_len: u32, nominal_len: Option<u32>, delivered: bool) {
        self.frames += 1;
        self.raw_bytes += payload_len as u64;
        if let Some(p) = nominal_len {
            self.nominal_bytes += p as u64;
        }
        if !delivered {
            self.undelivered += 1;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CommRow {
    pub phase: Phase,
    pub kind: FrameKind,
    pub totals: CommTotals,
}

/// Traffic broken down by phase and frame kind, derived from a trace.
#[derive(Clone, Debug, Default)]
pub struct CommReport {
    pub rows: Vec<CommRow>,
    pub phase_totals: [CommTotals; 6],
}

impl CommReport {
    pub fn from_trace(trace: &Trace) -> Self {
        let mut by_key: BTreeMap<(u8, u8), (Phase, FrameKind, CommTotals)> = BTreeMap::new();
        let mut phase_totals = [CommTotals::default(); 6];
        for e in trace.entries() {
            let slot = by_key
                .entry((e.phase as u8, e.kind as u8))
                .or_insert((e.phase, e.kind, CommTotals::default()));
            slot.2.add_entry(e.payload_len, e.nominal_len, e.delivered);
            phase_totals[e.phase as usize].add_entry(e.payload_len, e.nominal_len, e.delivered);
        }
        CommReport {
            rows: by_key
                .into_values()
                .map(|(phase, kind, totals)| CommRow { phase, kind, totals })
                .collect(),
            phase_totals,
        }
    }

    pub fn phase_total(&self, phase: Phase) -> CommTotals {
        self.phase_totals[phase as usize]
    }

    /// Sum of counted bytes for one frame kind across all phases.
    pub fn kind_nominal_bytes(&self, kind: FrameKind) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.totals.nominal_bytes)
            .sum()
    }

    pub fn kind_frames(&self, kind: FrameKind) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.totals.frames)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,frame,frames,raw_bytes,counted_bytes,undelivered\n");
        for row in &self.rows {
            let t = row.totals;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                row.phase.name(),
                row.kind.name(),
                t.frames,
                t.raw_bytes,
                t.nominal_bytes,
                t.undelivered
            )
            .unwrap();
        }
        for phase in Phase::ALL {
            let t = self.phase_totals[phase as usize];
            if t.frames == 0 {
                continue;
            }
            writeln!(
                out,
                "{},all,{},{},{},{}",
                phase.name(),
                t.frames,
                t.raw_bytes,
                t.nominal_bytes,
                t.undelivered
            )
            .unwrap();
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct StorageRow {
    pub store: &'static str,
    pub blocks: u64,
    /// Bytes actually kept on chain.
    pub chain_bytes: u64,
    /// Bytes the same content would occupy with raw key lists.
    pub baseline_bytes: u64,
}

/// Chain footprints next to their uncompressed baselines.
#[derive(Clone, Debug, Default)]
pub struct StorageReport {
    pub rows: Vec<StorageRow>,
}

impl StorageReport {
    pub fn push(&mut self, row: StorageRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("store,blocks,chain_bytes,baseline_bytes,saved\n");
        for row in &self.rows {
            let saved = if row.baseline_bytes > 0 {
                1.0 - row.chain_bytes as f64 / row.baseline_bytes as f64
            } else {
                0.0
            };
            writeln!(
                out,
                "{},{},{},{},{:.4}",
                row.store, row.blocks, row.chain_bytes, row.baseline_bytes, saved
            )
            .unwrap();
        }
        out
    }
}
