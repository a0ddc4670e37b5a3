//! Leader-based replication for the validator quorum.
//!
//! [`RaftNode`] is a pure state machine: feed it frames and timer
//! expirations, apply the [`Output`]s it hands back. It never touches a
//! clock or a socket, which is what makes whole-cluster runs reproducible.
//! Entries are replicated one per message.
//!
//! Followers do not take a proposed block on faith. Every append runs the
//! caller's [`BlockValidator`] first, so a block whose evidence does not
//! check out is refused before it can reach a majority.
//!
//! [`harness::Cluster`] wires five nodes to a tiny event queue with random
//! link latency, message loss and scripted partitions. Tests use it to
//! hammer the election and commit rules across seeds.

use crate::wire::{Frame, LogEntry, ProposedBlock};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug)]
pub struct RaftConfig {
    /// Election timeouts are drawn uniformly from this range, fresh per arm.
    pub election_timeout_ms: (u64, u64),
    pub heartbeat_interval_ms: u64,
}

impl Default for RaftConfig {
    fn default() -> Self {
        RaftConfig {
            election_timeout_ms: (150, 300),
            heartbeat_interval_ms: 50,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

/// What the caller must do after feeding the node an input.
#[derive(Clone, PartialEq, Debug)]
pub enum Output {
    Send { to: u64, frame: Frame },
    /// Replaces any earlier election timer; stale generations must be
    /// dropped on expiry.
    ArmElectionTimer { gen: u64, after_ms: u64 },
    ArmHeartbeatTimer { gen: u64, after_ms: u64 },
    /// `index` is 1-based and strictly increasing per node.
    Committed { index: u64, entry: LogEntry },
}

/// Application-level check a follower runs before appending a block.
/// `prior` is the log prefix the block would extend, so chain linkage can
/// be checked against the entry actually preceding it rather than whatever
/// happens to be applied.
pub trait BlockValidator {
    fn validate(&mut self, prior: &[LogEntry], block: &ProposedBlock) -> bool;
}

pub struct AcceptAll;

impl BlockValidator for AcceptAll {
    fn validate(&mut self, _prior: &[LogEntry], _block: &ProposedBlock) -> bool {
        true
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct NotLeader;

pub struct RaftNode {
    id: u64,
    others: Vec<u64>,
    majority: usize,
    config: RaftConfig,
    rng: ChaCha20Rng,

    term: u64,
    voted_for: Option<u64>,
    role: Role,
    log: Vec<LogEntry>,
    commit_index: u64,
    applied: u64,

    election_gen: u64,
    heartbeat_gen: u64,
    votes: BTreeSet<u64>,
    next_index: BTreeMap<u64, u64>,
    match_index: BTreeMap<u64, u64>,
}

impl RaftNode {
    /// `validators` lists every cluster member including this node.
    pub fn new(id: u64, validators: &[u64], config: RaftConfig, seed: u64) -> Self {
        assert!(validators.contains(&id), "node must be in the member list");
        let others: Vec<u64> = validators.iter().copied().filter(|&v| v != id).collect();
        RaftNode {
            id,
            majority: validators.len() / 2 + 1,
            others,
            config,
            rng: ChaCha20Rng::seed_from_u64(
                seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(id),
            ),
            term: 0,
            voted_for: None,
            role: Role::Follower,
            log: Vec::new(),
            commit_index: 0,
            applied: 0,
            election_gen: 0,
            heartbeat_gen: 0,
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn commit_index(&self) -> u64 {
        self.commit_index
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn start(&mut self) -> Vec<Output> {
        vec![self.arm_election()]
    }

    fn arm_election(&mut self) -> Output {
        self.election_gen += 1;
        let (lo, hi) = self.config.election_timeout_ms;
        Output::ArmElectionTimer {
            gen: self.election_gen,
            after_ms: self.rng.gen_range(lo..=hi),
        }
    }

    fn arm_heartbeat(&mut self) -> Output {
        self.heartbeat_gen += 1;
        Output::ArmHeartbeatTimer {
            gen: self.heartbeat_gen,
            after_ms: self.config.heartbeat_interval_ms,
        }
    }

    fn last_log_term(&self) -> u64 {
        self.log.last().map(|e| e.term).unwrap_or(0)
    }

    fn become_follower(&mut self, term: u64, out: &mut Vec<Output>) {
        self.term = term;
        self.role = Role::Follower;
        self.voted_for = None;
        self.votes.clear();
        out.push(self.arm_election());
    }

    pub fn on_election_timeout(&mut self, gen: u64) -> Vec<Output> {
        if gen != self.election_gen || self.role == Role::Leader {
            return Vec::new();
        }
        // New term, vote for self, canvass the cluster.
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.votes = BTreeSet::from([self.id]);
        let mut out = vec![self.arm_election()];
        for &peer in &self.others {
            out.push(Output::Send {
                to: peer,
                frame: Frame::VoteRequest {
                    term: self.term,
                    candidate: self.id,
                    last_log_index: self.log.len() as u64,
                    last_log_term: self.last_log_term(),
                },
            });
        }
        if self.votes.len() >= self.majority {
            self.become_leader(&mut out);
        }
        out
    }

    pub fn on_heartbeat_timeout(&mut self, gen: u64) -> Vec<Output> {
        if gen != self.heartbeat_gen || self.role != Role::Leader {
            return Vec::new();
        }
        let mut out = vec![self.arm_heartbeat()];
        for i in 0..self.others.len() {
            let peer = self.others[i];
            out.push(self.append_for(peer));
        }
        out
    }

    fn become_leader(&mut self, out: &mut Vec<Output>) {
        self.role = Role::Leader;
        let next = self.log.len() as u64 + 1;
        self.next_index = self.others.iter().map(|&p| (p, next)).collect();
        self.match_index = self.others.iter().map(|&p| (p, 0)).collect();
        out.push(self.arm_heartbeat());
        for i in 0..self.others.len() {
            let peer = self.others[i];
            out.push(self.append_for(peer));
        }
    }

    /// Builds the AppendEntries a peer currently needs: the entry at its
    /// next index, or a bare heartbeat when it is caught up.
    fn append_for(&self, peer: u64) -> Output {
        let next = self.next_index[&peer];
        let prev_log_index = next - 1;
        let prev_log_term = if prev_log_index == 0 {
            0
        } else {
            self.log[prev_log_index as usize - 1].term
        };
        let entry = self.log.get(next as usize - 1).cloned();
        Output::Send {
            to: peer,
            frame: Frame::AppendEntries {
                term: self.term,
                leader: self.id,
                prev_log_index,
                prev_log_term,
                leader_commit: self.commit_index,
                entry,
            },
        }
    }

    /// Leader-only: appends the block to the local log and starts
    /// replicating it.
    pub fn propose(&mut self, block: ProposedBlock) -> Result<Vec<Output>, NotLeader> {
        if self.role != Role::Leader {
            return Err(NotLeader);
        }
        self.log.push(LogEntry {
            term: self.term,
            block,
        });
        let new_index = self.log.len() as u64;
        let mut out = Vec::new();
        for i in 0..self.others.len() {
            let peer = self.others[i];
            if self.next_index[&peer] == new_index {
                out.push(self.append_for(peer));
            }
        }
        // A cluster of one commits immediately.
        self.advance_commit(&mut out);
        Ok(out)
    }

    pub fn on_frame(
        &mut self,
        from: u64,
        frame: Frame,
        validator: &mut dyn BlockValidator,
    ) -> Vec<Output> {
        let mut out = Vec::new();
        let term = match &frame {
            Frame::VoteRequest { term, .. }
            | Frame::VoteResponse { term, .. }
            | Frame::AppendEntries { term, .. }
            | Frame::AppendResponse { term, .. } => *term,
            _ => return out,
        };
        if term > self.term {
            self.become_follower(term, &mut out);
        }

        match frame {
            Frame::VoteRequest {
                term,
                candidate,
                last_log_index,
                last_log_term,
            } => {
                let up_to_date = (last_log_term, last_log_index)
                    >= (self.last_log_term(), self.log.len() as u64);
                let granted = term == self.term
                    && up_to_date
                    && self.voted_for.map_or(true, |v| v == candidate);
                if granted {
                    self.voted_for = Some(candidate);
                    out.push(self.arm_election());
                }
                out.push(Output::Send {
                    to: from,
                    frame: Frame::VoteResponse {
                        term: self.term,
                        granted,
                    },
                });
            }
            Frame::VoteResponse { term, granted } => {
                if self.role == Role::Candidate && term == self.term && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.majority {
                        self.become_leader(&mut out);
                    }
                }
            }
            Frame::AppendEntries {
                term,
                leader: _,
                prev_log_index,
                prev_log_term,
                leader_commit,
                entry,
            } => {
                if term < self.term {
                    out.push(Output::Send {
                        to: from,
                        frame: Frame::AppendResponse {
                            term: self.term,
                            success: false,
                            match_index: 0,
                        },
                    });
                    return out;
                }
                // Current leader's authority: stand down and stay quiet.
                self.role = Role::Follower;
                out.push(self.arm_election());

                let prev_ok = prev_log_index == 0
                    || self
                        .log
                        .get(prev_log_index as usize - 1)
                        .map_or(false, |e| e.term == prev_log_term);
                let mut success = prev_ok;
                let mut match_index = 0;
                if prev_ok {
                    match_index = prev_log_index;
                    if let Some(entry) = entry {
                        let index = prev_log_index + 1;
                        let existing = self.log.get(index as usize - 1);
                        if existing.map_or(false, |e| e.term == entry.term) {
                            // Duplicate delivery; already have it.
                            match_index = index;
                        } else if !validator.validate(
                            &self.log[..prev_log_index as usize],
                            &entry.block,
                        ) {
                            success = false;
                        } else {
                            // Conflicting suffix dies here.
                            self.log.truncate(index as usize - 1);
                            self.log.push(entry);
                            match_index = index;
                        }
                    }
                    if success {
                        let reachable = leader_commit.min(match_index.max(self.commit_index));
                        if reachable > self.commit_index {
                            self.commit_index = reachable;
                        }
                        self.emit_committed(&mut out);
                    }
                }
                out.push(Output::Send {
                    to: from,
                    frame: Frame::AppendResponse {
                        term: self.term,
                        success,
                        match_index,
                    },
                });
            }
            Frame::AppendResponse {
                term,
                success,
                match_index,
            } => {
                if self.role != Role::Leader || term != self.term {
                    return out;
                }
                if success {
                    let m = self.match_index.entry(from).or_insert(0);
                    *m = (*m).max(match_index);
                    let m = *m;
                    self.next_index.insert(from, m + 1);
                    self.advance_commit(&mut out);
                    if m < self.log.len() as u64 {
                        out.push(self.append_for(from));
                    }
                } else {
                    let next = self.next_index.entry(from).or_insert(1);
                    *next = (*next - 1).max(1);
                    out.push(self.append_for(from));
                }
            }
            _ => {}
        }
        out
    }

    fn advance_commit(&mut self, out: &mut Vec<Output>) {
        if self.role != Role::Leader {
            return;
        }
        for n in (self.commit_index + 1..=self.log.len() as u64).rev() {
            // Only entries from the current term commit by counting.
            if self.log[n as usize - 1].term != self.term {
                continue;
            }
            let replicas =
                1 + self.match_index.values().filter(|&&m| m >= n).count();
            if replicas >= self.majority {
                self.commit_index = n;
                break;
            }
        }
        self.emit_committed(out);
    }

    fn emit_committed(&mut self, out: &mut Vec<Output>) {
        while self.applied < self.commit_index {
            self.applied += 1;
            out.push(Output::Committed {
                index: self.applied,
                entry: self.log[self.applied as usize - 1].clone(),
            });
        }
    }
}

pub mod harness {
    //! Self-contained cluster simulation: five (or n) nodes, a seeded event
    //! queue, uniform 5..=20 ms link latency, optional loss and scripted
    //! partitions. Verifies election safety and log agreement as it runs.

    use super::*;
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    #[derive(Clone, Debug)]
    enum EventKind {
        Deliver { to: u64, from: u64, frame: Frame },
        Election { node: u64, gen: u64 },
        Heartbeat { node: u64, gen: u64 },
        Propose { block: ProposedBlock, retries: u32 },
        Crash { node: u64 },
    }

    /// Nodes in `group_a` cannot talk to the rest between `from` and `to`.
    /// Membership is evaluated when a message is sent.
    #[derive(Clone, Debug)]
    pub struct PartitionWindow {
        pub from_ms: u64,
        pub to_ms: u64,
        pub group_a: Vec<u64>,
    }

    pub struct Cluster {
        nodes: Vec<RaftNode>,
        queue: BinaryHeap<Reverse<(u64, u64)>>,
        payloads: BTreeMap<(u64, u64), EventKind>,
        seq: u64,
        time: u64,
        rng: ChaCha20Rng,
        loss: f64,
        partitions: Vec<PartitionWindow>,
        crashed: BTreeSet<u64>,
        committed: Vec<Vec<LogEntry>>,
        leaders_by_term: BTreeMap<u64, u64>,
        validator: fn(&ProposedBlock) -> bool,
    }

    struct FnValidator(fn(&ProposedBlock) -> bool);

    impl BlockValidator for FnValidator {
        fn validate(&mut self, _prior: &[LogEntry], block: &ProposedBlock) -> bool {
            (self.0)(block)
        }
    }

    impl Cluster {
        pub fn new(n: usize, config: RaftConfig, seed: u64) -> Self {
            let ids: Vec<u64> = (0..n as u64).collect();
            let nodes = ids
                .iter()
                .map(|&id| RaftNode::new(id, &ids, config, seed))
                .collect::<Vec<_>>();
            let mut cluster = Cluster {
                nodes,
                queue: BinaryHeap::new(),
                payloads: BTreeMap::new(),
                seq: 0,
                time: 0,
                rng: ChaCha20Rng::seed_from_u64(seed ^ 0x5a5a_5a5a),
                loss: 0.0,
                partitions: Vec::new(),
                crashed: BTreeSet::new(),
                committed: vec![Vec::new(); n],
                leaders_by_term: BTreeMap::new(),
                validator: |_| true,
            };
            for i in 0..n {
                let outs = cluster.nodes[i].start();
                cluster.apply(i as u64, outs).unwrap();
            }
            cluster
        }

        pub fn set_loss(&mut self, loss: f64) {
            self.loss = loss;
        }

        pub fn set_partitions(&mut self, windows: Vec<PartitionWindow>) {
            self.partitions = windows;
        }

        pub fn set_validator(&mut self, validator: fn(&ProposedBlock) -> bool) {
            self.validator = validator;
        }

        pub fn crash_at(&mut self, time: u64, node: u64) {
            self.push_at(time, EventKind::Crash { node });
        }

        /// Schedules a proposal; it retries every 50 ms until some leader
        /// accepts it or the retry budget runs out.
        pub fn propose_at(&mut self, time: u64, block: ProposedBlock) {
            self.push_at(
                time,
                EventKind::Propose {
                    block,
                    retries: 200,
                },
            );
        }

        pub fn time(&self) -> u64 {
            self.time
        }

        pub fn committed(&self, node: u64) -> &[LogEntry] {
            &self.committed[node as usize]
        }

        pub fn leaders_by_term(&self) -> &BTreeMap<u64, u64> {
            &self.leaders_by_term
        }

        pub fn current_leader(&self) -> Option<u64> {
            let mut best: Option<(u64, u64)> = None;
            for n in &self.nodes {
                if n.is_leader() && !self.crashed.contains(&n.id()) {
                    let cand = (n.term(), n.id());
                    if best.map_or(true, |b| cand.0 > b.0) {
                        best = Some(cand);
                    }
                }
            }
            best.map(|(_, id)| id)
        }

        pub fn node(&self, id: u64) -> &RaftNode {
            &self.nodes[id as usize]
        }

        fn push_at(&mut self, time: u64, kind: EventKind) {
            let key = (time, self.seq);
            self.seq += 1;
            self.queue.push(Reverse(key));
            self.payloads.insert(key, kind);
        }

        fn reachable(&self, a: u64, b: u64) -> bool {
            if self.crashed.contains(&a) || self.crashed.contains(&b) {
                return false;
            }
            for w in &self.partitions {
                if self.time >= w.from_ms && self.time < w.to_ms {
                    let in_a = w.group_a.contains(&a);
                    let in_b = w.group_a.contains(&b);
                    if in_a != in_b {
                        return false;
                    }
                }
            }
            true
        }

        fn apply(&mut self, node: u64, outputs: Vec<Output>) -> Result<(), String> {
            for output in outputs {
                match output {
                    Output::Send { to, frame } => {
                        if !self.reachable(node, to) {
                            continue;
                        }
                        if self.loss > 0.0 && self.rng.gen_bool(self.loss) {
                            continue;
                        }
                        let latency = self.rng.gen_range(5..=20);
                        self.push_at(
                            self.time + latency,
                            EventKind::Deliver {
                                to,
                                from: node,
                                frame,
                            },
                        );
                    }
                    Output::ArmElectionTimer { gen, after_ms } => {
                        self.push_at(self.time + after_ms, EventKind::Election { node, gen });
                    }
                    Output::ArmHeartbeatTimer { gen, after_ms } => {
                        self.push_at(self.time + after_ms, EventKind::Heartbeat { node, gen });
                    }
                    Output::Committed { index, entry } => {
                        let list = &mut self.committed[node as usize];
                        if index as usize != list.len() + 1 {
                            return Err(format!(
                                "node {node} committed index {index} out of order"
                            ));
                        }
                        // Agreement: every node that has this index has the
                        // same entry.
                        for (other, c) in self.committed.iter().enumerate() {
                            if other != node as usize {
                                if let Some(e) = c.get(index as usize - 1) {
                                    if *e != entry {
                                        return Err(format!(
                                            "commit divergence at index {index} between {node} and {other}"
                                        ));
                                    }
                                }
                            }
                        }
                        self.committed[node as usize].push(entry);
                    }
                }
            }
            // Election safety: one leader per term.
            for n in &self.nodes {
                if n.is_leader() {
                    let prev = self.leaders_by_term.entry(n.term()).or_insert(n.id());
                    if *prev != n.id() {
                        return Err(format!(
                            "two leaders in term {}: {} and {}",
                            n.term(),
                            prev,
                            n.id()
                        ));
                    }
                }
            }
            Ok(())
        }

        /// Runs the event queue until `until_ms`. Errors describe an
        /// invariant violation.
        pub fn run_until(&mut self, until_ms: u64) -> Result<(), String> {
            while let Some(&Reverse(key)) = self.queue.peek() {
                if key.0 > until_ms {
                    break;
                }
                self.queue.pop();
                self.time = key.0;
                let kind = self.payloads.remove(&key).expect("queued payload");
                match kind {
                    EventKind::Crash { node } => {
                        self.crashed.insert(node);
                    }
                    EventKind::Deliver { to, from, frame } => {
                        if self.crashed.contains(&to) {
                            continue;
                        }
                        let mut v = FnValidator(self.validator);
                        let outs = self.nodes[to as usize].on_frame(from, frame, &mut v);
                        self.apply(to, outs)?;
                    }
                    EventKind::Election { node, gen } => {
                        if self.crashed.contains(&node) {
                            continue;
                        }
                        let outs = self.nodes[node as usize].on_election_timeout(gen);
                        self.apply(node, outs)?;
                    }
                    EventKind::Heartbeat { node, gen } => {
                        if self.crashed.contains(&node) {
                            continue;
                        }
                        let outs = self.nodes[node as usize].on_heartbeat_timeout(gen);
                        self.apply(node, outs)?;
                    }
                    EventKind::Propose { block, retries } => {
                        match self.current_leader() {
                            Some(id) => match self.nodes[id as usize].propose(block.clone()) {
                                Ok(outs) => {
                                    self.apply(id, outs)?;
                                    continue;
                                }
                                Err(NotLeader) => {}
                            },
                            None => {}
                        }
                        if retries > 0 {
                            self.push_at(
                                self.time + 50,
                                EventKind::Propose {
                                    block,
                                    retries: retries - 1,
                                },
                            );
                        }
                    }
                }
            }
            self.time = until_ms;
            Ok(())
        }
    }
}
