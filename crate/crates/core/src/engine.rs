//! The scenario engine: builds a world from a config, then runs actors,
//! network, consensus and accounting as one deterministic event loop.
//!
//! Everything observable comes out in the [`RunReport`]: the frame trace
//! and its digest, communication and computation tallies, the committed
//! chains, and journals of queries, admissions and upload verdicts.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::actors::{
    AdversaryState, AuthorityState, KdcState, Note, Outgoing, PlaceState, UserState,
    ValidatorState,
};
use crate::crypto::{Certificate, GroupParams, PublicKey};
use crate::ledger::{
    build_status_block, build_zone_block, BlockHash, KeyStatus, ZonePolicy, BLOCK_HEADER_LEN,
};
use crate::metrics::{
    ActorClass, CommReport, ComputeReport, CostModel, MetricsSink, StorageReport, StorageRow,
};
use crate::raft::{BlockValidator, Output as RaftOutput, RaftConfig, RaftNode};
use crate::scenario::{Action, ActorLayout, ScenarioConfig, ScenarioError};
use crate::simnet::{ActorId, LinkModel, LinkOutcome, PartitionWindow, Scheduler, Trace};
use crate::wire::{Frame, Location, LogEntry, Phase, ProposedBlock};

/// One frame as offered to the link, delivered or not. Kept verbatim so a
/// run can be audited for what actually crossed the air.
#[derive(Clone, Debug)]
pub struct SentFrame {
    pub time: u64,
    pub src: ActorId,
    pub dst: ActorId,
    pub phase: Phase,
    pub frame: Frame,
}

/// A status query answered by a validator, cross-checked against the exact
/// key sets behind the block that answered it.
#[derive(Clone, Debug)]
pub struct QueryRecord {
    pub time: u64,
    pub asker: ActorId,
    /// Owner of the queried key, when the key belongs to anyone simulated.
    pub owner: Option<ActorId>,
    pub status: KeyStatus,
    pub expected: KeyStatus,
    pub false_positive: bool,
}

#[derive(Clone, Debug)]
pub struct AdmissionRecord {
    pub time: u64,
    pub place: ActorId,
    pub user: ActorId,
    pub admitted: bool,
    pub reason: &'static str,
}

#[derive(Clone, Debug)]
pub struct UploadRecord {
    pub time: u64,
    pub from: ActorId,
    pub records: u32,
    pub accepted: bool,
    pub reason: &'static str,
}

#[derive(Clone, Debug)]
pub struct UserSummary {
    pub actor: ActorId,
    pub infected: bool,
    pub last_status: Option<KeyStatus>,
    pub records: usize,
    /// Every key generation this user held over the run.
    pub keys: Vec<PublicKey>,
}

/// Everything a finished run leaves behind.
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub trace: Trace,
    pub comm: CommReport,
    pub compute: ComputeReport,
    pub storage: StorageReport,
    pub events_log: Vec<String>,
    pub queries: Vec<QueryRecord>,
    pub admissions: Vec<AdmissionRecord>,
    pub uploads: Vec<UploadRecord>,
    pub false_positives: u64,
    pub status_blocks: usize,
    pub zone_blocks: usize,
    /// Which validator actor led each term that elected one.
    pub leaders_by_term: BTreeMap<u64, u64>,
    /// Actors whose keys the newest committed status block flags.
    pub final_infected: BTreeSet<ActorId>,
    pub final_suspected: BTreeSet<ActorId>,
    pub users: Vec<UserSummary>,
    pub frame_log: Vec<SentFrame>,
    /// Registration tokens (users in index order, adversary last). These are
    /// the real identities the key service knows; exposed so audits can scan
    /// the frame log for leaks.
    pub tokens: Vec<[u8; 8]>,
    /// Owner of every key generation issued over the run.
    pub key_owner: BTreeMap<[u8; 29], ActorId>,
    pub validator_keys: Vec<(ActorId, PublicKey)>,
    pub status_chain_hex: String,
    pub zone_chain_hex: String,
    pub layout: ActorLayout,
    pub zone_policy: ZonePolicy,
}

impl RunReport {
    /// Human-readable run digest for the summary file.
    pub fn summary(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "scenario: {}", self.scenario);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "duration_ms: {}", self.duration_ms);
        let _ = writeln!(s, "trace_digest: {}", hex::encode(self.trace.digest()));
        let _ = writeln!(s, "frames_sent: {}", self.trace.len());
        let _ = writeln!(
            s,
            "blocks: {} status, {} zone",
            self.status_blocks, self.zone_blocks
        );
        let _ = writeln!(s, "filter_false_positives: {}", self.false_positives);
        let terms: Vec<String> = self
            .leaders_by_term
            .iter()
            .map(|(t, l)| format!("term {t}: actor {l}"))
            .collect();
        let _ = writeln!(s, "leaders: {}", terms.join("; "));
        let inf: Vec<String> = self.final_infected.iter().map(|a| a.to_string()).collect();
        let sus: Vec<String> = self.final_suspected.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(s, "final_infected_actors: [{}]", inf.join(", "));
        let _ = writeln!(s, "final_suspected_actors: [{}]", sus.join(", "));
        let _ = writeln!(
            s,
            "uploads: {} accepted, {} rejected",
            self.uploads.iter().filter(|u| u.accepted).count(),
            self.uploads.iter().filter(|u| !u.accepted).count()
        );
        let _ = writeln!(
            s,
            "admissions: {} granted, {} denied",
            self.admissions.iter().filter(|a| a.admitted).count(),
            self.admissions.iter().filter(|a| !a.admitted).count()
        );
        let _ = writeln!(s, "queries_answered: {}", self.queries.len());
        let _ = writeln!(s, "journal:");
        for line in &self.events_log {
            let _ = writeln!(s, "  {line}");
        }
        s
    }
}

enum Event {
    Script(Action),
    Deliver {
        from: ActorId,
        to: ActorId,
        phase: Phase,
        frame: Frame,
    },
    /// Actor-requested delayed send (upload jitter).
    SendLater {
        from: ActorId,
        to: ActorId,
        phase: Phase,
        frame: Frame,
    },
    ElectionTimeout {
        node: usize,
        gen: u64,
    },
    HeartbeatTimeout {
        node: usize,
        gen: u64,
    },
    /// A status update waiting for the cluster to elect a leader.
    UpdateRetry {
        attempts: u32,
    },
}

/// Follower-side hook the consensus module calls before appending.
struct ChainValidator<'a> {
    params: &'a GroupParams,
    state: &'a mut ValidatorState,
}

impl BlockValidator for ChainValidator<'_> {
    fn validate(&mut self, prior: &[LogEntry], block: &ProposedBlock) -> bool {
        self.state.validate_block(self.params, prior, block)
    }
}

pub struct World {
    params: GroupParams,
    config: ScenarioConfig,
    layout: ActorLayout,
    sched: Scheduler<Event>,
    link: LinkModel,
    trace: Trace,
    sink: MetricsSink,
    kdc: KdcState,
    authority: AuthorityState,
    validators: Vec<ValidatorState>,
    raft: Vec<RaftNode>,
    places: Vec<PlaceState>,
    users: Vec<UserState>,
    adversary: AdversaryState,
    user_tokens: Vec<[u8; 8]>,
    adversary_token: [u8; 8],
    /// Exact key sets behind every status block this engine built, for
    /// auditing filter answers.
    truth: BTreeMap<BlockHash, (BTreeSet<[u8; 29]>, BTreeSet<[u8; 29]>)>,
    latest_committed: Option<BlockHash>,
    key_owner: BTreeMap<[u8; 29], ActorId>,
    pending_update_since: BTreeMap<usize, u64>,
    leaders_by_term: BTreeMap<u64, u64>,
    frame_log: Vec<SentFrame>,
    events_log: Vec<String>,
    queries: Vec<QueryRecord>,
    admissions: Vec<AdmissionRecord>,
    uploads: Vec<UploadRecord>,
    now: u64,
}

impl World {
    pub fn new(config: ScenarioConfig) -> Result<World, ScenarioError> {
        config.validate()?;
        let params = GroupParams::new();
        let layout = ActorLayout::new(&config.population);
        let policy = config.policy;
        let zone_policy = ZonePolicy {
            infected_weight: policy.infected_weight,
            suspected_weight: policy.suspected_weight,
            threshold_orange: policy.zone_orange_threshold,
            threshold_red: policy.zone_red_threshold,
        };
        let mut seeds = ChaCha20Rng::seed_from_u64(config.seed);
        fn fresh_token(rng: &mut ChaCha20Rng) -> [u8; 8] {
            let mut t = [0u8; 8];
            rng.fill_bytes(&mut t);
            t
        }

        let mut kdc = KdcState::new(
            layout.kdc,
            &params,
            policy.credential_lifetime_ms,
            seeds.gen(),
        );
        let mut key_owner = BTreeMap::new();

        let mut validators: Vec<ValidatorState> = (0..config.population.validators)
            .map(|i| ValidatorState::new(layout.validator(i), &params, zone_policy, seeds.gen()))
            .collect();
        let directory: Vec<(ActorId, PublicKey)> =
            validators.iter().map(|v| (v.actor, v.pk)).collect();
        for v in validators.iter_mut() {
            for (actor, pk) in &directory {
                v.learn_validator(*actor, *pk);
            }
        }

        let mut authority = AuthorityState::new(
            layout.authority,
            directory.iter().map(|(a, _)| *a).collect(),
            policy.contamination_window_ms,
            policy.evidence_window_ms,
        );

        let zones = config.population.zones.max(1);
        let mut places = Vec::new();
        for i in 0..config.population.places {
            let t = fresh_token(&mut seeds);
            let (sk, cert) = kdc.register(&params, t, 0);
            let actor = layout.place(i);
            let place = PlaceState::new(
                actor,
                sk,
                cert,
                Location::for_zone(i as u16 % zones, 1_000 + i as i32),
                layout.validator(i % config.population.validators),
                kdc.pk,
                policy.evidence_window_ms,
                seeds.gen(),
            );
            authority.register_place(&place.pk, actor);
            for v in validators.iter_mut() {
                v.learn_place(&place.pk);
            }
            places.push(place);
        }

        let mut users = Vec::new();
        let mut user_tokens = Vec::new();
        for i in 0..config.population.users {
            let t = fresh_token(&mut seeds);
            let (sk, cert) = kdc.register(&params, t, 0);
            let actor = layout.user(i);
            let user = UserState::new(
                actor,
                sk,
                cert,
                t,
                Location::for_zone(i as u16 % zones, 100 + i as i32),
                layout.validator(i % config.population.validators),
                kdc.pk,
                seeds.gen(),
            );
            key_owner.insert(user.pk.to_bytes(), actor);
            user_tokens.push(t);
            users.push(user);
        }

        let adv_token = fresh_token(&mut seeds);
        let (adv_sk, adv_cert) = kdc.register(&params, adv_token, 0);
        let adv_user = UserState::new(
            layout.adversary,
            adv_sk,
            adv_cert,
            adv_token,
            Location::for_zone(0, 99),
            layout.validator(0),
            kdc.pk,
            seeds.gen(),
        );
        key_owner.insert(adv_user.pk.to_bytes(), layout.adversary);
        let adversary = AdversaryState::new(adv_user);

        let validator_ids: Vec<u64> = directory.iter().map(|(a, _)| *a).collect();
        let raft: Vec<RaftNode> = validator_ids
            .iter()
            .map(|id| RaftNode::new(*id, &validator_ids, RaftConfig::default(), seeds.gen()))
            .collect();

        let mut link = LinkModel::new(seeds.gen());
        link.set_latency(config.link.latency_ms);
        link.set_loss(config.link.loss);
        link.set_partitions(
            config
                .partitions
                .iter()
                .map(|p| PartitionWindow {
                    from_ms: p.from_ms,
                    to_ms: p.to_ms,
                    group_a: p.group_a.clone(),
                })
                .collect(),
        );

        let mut sched = Scheduler::new();
        for ev in &config.events {
            sched.schedule_at(ev.at_ms, Event::Script(ev.action.clone()));
        }

        let mut world = World {
            params,
            layout,
            sched,
            link,
            trace: Trace::new(),
            sink: MetricsSink::new(),
            kdc,
            authority,
            validators,
            raft,
            places,
            users,
            adversary,
            user_tokens,
            adversary_token: adv_token,
            truth: BTreeMap::new(),
            latest_committed: None,
            key_owner,
            pending_update_since: BTreeMap::new(),
            leaders_by_term: BTreeMap::new(),
            frame_log: Vec::new(),
            events_log: Vec::new(),
            queries: Vec::new(),
            admissions: Vec::new(),
            uploads: Vec::new(),
            now: 0,
            config,
        };
        for vi in 0..world.raft.len() {
            let outs = world.raft[vi].start();
            world.process_raft_outputs(vi, outs);
        }
        Ok(world)
    }

    pub fn run(mut self) -> RunReport {
        let until = self.config.duration_ms;
        while let Some((t, ev)) = self.sched.pop_until(until) {
            self.now = t;
            self.dispatch(ev);
        }
        self.now = until;
        self.finish()
    }

    // -- identity helpers ---------------------------------------------------

    fn class_of(&self, id: ActorId) -> ActorClass {
        if id == self.layout.kdc {
            ActorClass::Kdc
        } else if id == self.layout.authority {
            ActorClass::Authority
        } else if self.layout.validators.contains(&id) {
            ActorClass::Validator
        } else if self.layout.places.contains(&id) {
            ActorClass::Place
        } else {
            ActorClass::User
        }
    }

    fn label(&self, id: ActorId) -> String {
        if id == self.layout.kdc {
            "key service".into()
        } else if id == self.layout.authority {
            "authority".into()
        } else if self.layout.validators.contains(&id) {
            format!("validator {}", id - self.layout.validators.start)
        } else if self.layout.places.contains(&id) {
            format!("place {}", id - self.layout.places.start)
        } else if id == self.layout.adversary {
            "adversary".into()
        } else {
            format!("user {}", id - self.layout.users.start)
        }
    }

    fn is_user_actor(&self, id: ActorId) -> bool {
        self.layout.users.contains(&id) || id == self.layout.adversary
    }

    /// Split borrow: the shared crypto context next to one mutable handset.
    fn user_ctx(&mut self, id: ActorId) -> (&GroupParams, &mut UserState) {
        let u = if id == self.layout.adversary {
            &mut self.adversary.user
        } else {
            &mut self.users[(id - self.layout.users.start) as usize]
        };
        (&self.params, u)
    }

    fn history_of(&self, id: ActorId) -> Vec<PublicKey> {
        if id == self.layout.adversary {
            self.adversary.user.history.clone()
        } else if self.layout.users.contains(&id) {
            self.users[(id - self.layout.users.start) as usize]
                .history
                .clone()
        } else {
            Vec::new()
        }
    }

    fn log(&mut self, line: String) {
        self.events_log.push(format!("{}ms {}", self.now, line));
    }

    // -- event dispatch -----------------------------------------------------

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Script(action) => self.dispatch_action(action),
            Event::Deliver {
                from,
                to,
                phase,
                frame,
            } => self.route_frame(from, to, phase, frame),
            Event::SendLater {
                from,
                to,
                phase,
                frame,
            } => self.do_send(from, to, phase, frame),
            Event::ElectionTimeout { node, gen } => {
                let outs = self.raft[node].on_election_timeout(gen);
                self.process_raft_outputs(node, outs);
            }
            Event::HeartbeatTimeout { node, gen } => {
                let outs = self.raft[node].on_heartbeat_timeout(gen);
                self.process_raft_outputs(node, outs);
            }
            Event::UpdateRetry { attempts } => self.try_status_update(attempts),
        }
    }

    fn dispatch_action(&mut self, action: Action) {
        match action {
            Action::Contact { a, b } => {
                if a == b {
                    return;
                }
                let (aa, ab) = (self.layout.user(a), self.layout.user(b));
                let before = self.params.ops().snapshot();
                let (_, u) = self.user_ctx(aa);
                let batch = u.start_contact(ab);
                let delta = self.params.ops().snapshot().since(&before);
                self.sink.attribute(ActorClass::User, Phase::Contact, &delta);
                self.send_batch(aa, batch);
            }
            Action::Visit { user, place } => {
                let ua = self.layout.user(user);
                let pa = self.layout.place(place);
                let loc = self.places[place as usize].location;
                let before = self.params.ops().snapshot();
                let (_, u) = self.user_ctx(ua);
                let batch = u.start_visit(pa, loc);
                let delta = self.params.ops().snapshot().since(&before);
                self.sink
                    .attribute(ActorClass::User, Phase::AccessControl, &delta);
                self.send_batch(ua, batch);
            }
            Action::ReportInfected { user } => {
                let ua = self.layout.user(user);
                if let Some(token) = self.user_tokens.get(user as usize) {
                    self.kdc.set_cleared(*token, false);
                }
                let p = self.config.policy;
                let (authority, now) = (self.layout.authority, self.now);
                let before = self.params.ops().snapshot();
                let (params, u) = self.user_ctx(ua);
                let batch = u.report_infection(
                    params,
                    now,
                    authority,
                    p.upload_groups,
                    p.evidence_window_ms,
                    p.upload_jitter_ms,
                    p.aggregation,
                );
                let delta = self.params.ops().snapshot().since(&before);
                self.sink.attribute(ActorClass::User, Phase::Tracing, &delta);
                let n = batch.len();
                self.log(format!(
                    "user {user} reported infected, uploading {n} group(s)"
                ));
                self.send_batch(ua, batch);
            }
            Action::StatusUpdate => self.try_status_update(0),
            Action::QueryStatus { user } => {
                let ua = self.layout.user(user);
                let (_, u) = self.user_ctx(ua);
                let batch = u.query_own_status();
                self.send_batch(ua, batch);
            }
            Action::QueryZone { user, zone } => {
                let ua = self.layout.user(user);
                let (_, u) = self.user_ctx(ua);
                let batch = u.query_zone(zone);
                self.send_batch(ua, batch);
            }
            Action::Renew { user } => {
                let ua = self.layout.user(user);
                let kdc = self.layout.kdc;
                let (_, u) = self.user_ctx(ua);
                let batch = u.start_renew(kdc);
                self.send_batch(ua, batch);
            }
            Action::BlockUser { user } => {
                if let Some(token) = self.user_tokens.get(user as usize) {
                    self.kdc.set_blocked(*token, true);
                }
                self.log(format!("user {user} blocklisted at the key service"));
            }
            Action::TestNegative { user } => {
                if let Some(token) = self.user_tokens.get(user as usize) {
                    self.kdc.set_cleared(*token, true);
                }
                let ua = self.layout.user(user);
                let (_, u) = self.user_ctx(ua);
                u.infected = false;
                self.log(format!(
                    "user {user} certified negative; keys cleared for the next update"
                ));
            }
            Action::ForgeUpload { victims } => {
                let certs: Vec<Certificate> = victims
                    .iter()
                    .filter_map(|v| self.users.get(*v as usize).map(|u| u.cert))
                    .collect();
                let (authority, now) = (self.layout.authority, self.now);
                let before = self.params.ops().snapshot();
                let batch = self
                    .adversary
                    .forge_upload(&self.params, now, authority, &certs);
                let delta = self.params.ops().snapshot().since(&before);
                self.sink.attribute(ActorClass::User, Phase::Tracing, &delta);
                self.log(format!(
                    "adversary uploaded forged evidence naming {} user(s)",
                    certs.len()
                ));
                self.send_batch(self.layout.adversary, batch);
            }
            Action::ReplayUpload => {
                let batch = self.adversary.replay_upload(self.layout.authority);
                if batch.is_empty() {
                    self.log("adversary had nothing overheard to replay".into());
                } else {
                    self.log("adversary replayed an overheard upload".into());
                }
                self.send_batch(self.layout.adversary, batch);
            }
            Action::RestampUpload => {
                let (authority, now) = (self.layout.authority, self.now);
                let batch = self.adversary.restamp_upload(now, authority);
                if !batch.is_empty() {
                    self.log("adversary re-stamped an overheard upload as fresh".into());
                }
                self.send_batch(self.layout.adversary, batch);
            }
        }
    }

    // -- network ------------------------------------------------------------

    fn send_batch(&mut self, from: ActorId, batch: Vec<Outgoing>) {
        for o in batch {
            if o.delay_ms == 0 {
                self.do_send(from, o.to, o.phase, o.frame);
            } else {
                self.sched.schedule_at(
                    self.now + o.delay_ms,
                    Event::SendLater {
                        from,
                        to: o.to,
                        phase: o.phase,
                        frame: o.frame,
                    },
                );
            }
        }
    }

    fn do_send(&mut self, from: ActorId, to: ActorId, phase: Phase, frame: Frame) {
        // The adversary sniffs the uplink: honest evidence uploads are
        // fodder for replay attempts.
        if to == self.layout.authority && from != self.layout.adversary {
            if let Frame::TracingUpload { group } = &frame {
                self.adversary.observed.push(group.clone());
            }
        }
        self.frame_log.push(SentFrame {
            time: self.now,
            src: from,
            dst: to,
            phase,
            frame: frame.clone(),
        });
        let outcome = self.link.judge(from, to, self.now);
        let delivered = matches!(outcome, LinkOutcome::Deliver { .. });
        self.trace
            .record_send(self.now, from, to, phase, &frame, delivered);
        if let LinkOutcome::Deliver { after_ms } = outcome {
            self.sched.schedule_at(
                self.now + after_ms,
                Event::Deliver {
                    from,
                    to,
                    phase,
                    frame,
                },
            );
        }
    }

    fn route_frame(&mut self, from: ActorId, to: ActorId, phase: Phase, frame: Frame) {
        let class = self.class_of(to);
        let before = self.params.ops().snapshot();

        if to == self.layout.kdc {
            let outs = self.kdc.handle(&self.params, self.now, from, phase, frame);
            let delta = self.params.ops().snapshot().since(&before);
            self.sink.attribute(class, phase, &delta);
            self.send_batch(to, outs);
            return;
        }

        if to == self.layout.authority {
            let outs = match frame {
                Frame::TracingUpload { group } => {
                    let keys = self.history_of(from);
                    self.authority
                        .handle_upload(&self.params, self.now, from, &group, &keys)
                }
                Frame::RecordUpload { record } => {
                    let keys = self.history_of(from);
                    self.authority
                        .handle_record(&self.params, self.now, from, &record, &keys)
                }
                Frame::PlaceWindowRecords { group } => {
                    self.authority
                        .handle_place_records(&self.params, self.now, from, group)
                }
                _ => Vec::new(),
            };
            let delta = self.params.ops().snapshot().since(&before);
            self.sink.attribute(class, phase, &delta);
            self.drain_authority_notes();
            self.send_batch(to, outs);
            return;
        }

        if self.layout.validators.contains(&to) {
            let vi = (to - self.layout.validators.start) as usize;
            if matches!(
                frame,
                Frame::VoteRequest { .. }
                    | Frame::VoteResponse { .. }
                    | Frame::AppendEntries { .. }
                    | Frame::AppendResponse { .. }
            ) {
                let outs = {
                    let mut cv = ChainValidator {
                        params: &self.params,
                        state: &mut self.validators[vi],
                    };
                    self.raft[vi].on_frame(from, frame, &mut cv)
                };
                let delta = self.params.ops().snapshot().since(&before);
                self.sink.attribute(class, Phase::Consensus, &delta);
                self.process_raft_outputs(vi, outs);
                return;
            }
            if let Frame::KeyListResponse { keys } = frame {
                self.finish_status_update(vi, keys);
                let delta = self.params.ops().snapshot().since(&before);
                self.sink.attribute(class, Phase::StatusUpdate, &delta);
                return;
            }
            let outs = self.validators[vi].handle(&self.params, self.now, from, phase, frame);
            let delta = self.params.ops().snapshot().since(&before);
            self.sink.attribute(class, phase, &delta);
            self.drain_validator_notes(vi);
            self.send_batch(to, outs);
            return;
        }

        if self.layout.places.contains(&to) {
            let pi = (to - self.layout.places.start) as usize;
            let outs = self.places[pi].handle(&self.params, self.now, from, phase, frame);
            let delta = self.params.ops().snapshot().since(&before);
            self.sink.attribute(class, phase, &delta);
            self.drain_place_notes(pi);
            self.send_batch(to, outs);
            return;
        }

        if self.is_user_actor(to) {
            let now = self.now;
            let (params, u) = self.user_ctx(to);
            let outs = u.handle(params, now, from, phase, frame);
            let delta = self.params.ops().snapshot().since(&before);
            self.sink.attribute(class, phase, &delta);
            self.drain_user_notes(to);
            self.send_batch(to, outs);
        }
    }

    // -- consensus ----------------------------------------------------------

    fn process_raft_outputs(&mut self, vi: usize, outs: Vec<RaftOutput>) {
        let actor = self.layout.validator(vi as u32);
        for o in outs {
            match o {
                RaftOutput::Send { to, frame } => self.do_send(actor, to, Phase::Consensus, frame),
                RaftOutput::ArmElectionTimer { gen, after_ms } => self
                    .sched
                    .schedule_at(self.now + after_ms, Event::ElectionTimeout { node: vi, gen }),
                RaftOutput::ArmHeartbeatTimer { gen, after_ms } => self.sched.schedule_at(
                    self.now + after_ms,
                    Event::HeartbeatTimeout { node: vi, gen },
                ),
                RaftOutput::Committed { index: _, entry } => self.apply_commit(vi, entry),
            }
        }
        let node = &self.raft[vi];
        if node.is_leader() {
            let (term, id) = (node.term(), node.id());
            if self.leaders_by_term.insert(term, id) != Some(id) {
                self.log(format!("validator {vi} leads term {term}"));
            }
        }
    }

    fn apply_commit(&mut self, vi: usize, entry: LogEntry) {
        match entry.block {
            ProposedBlock::Status(b) => {
                let hash = b.hash();
                let (n1, n2) = b.body.counts();
                self.validators[vi]
                    .status_ledger
                    .append(b)
                    .expect("committed entries extend the replica in order");
                if vi == 0 {
                    self.latest_committed = Some(hash);
                    self.log(format!(
                        "status block {} committed ({n1} infected, {n2} suspected keys)",
                        hex::encode(&hash[..4])
                    ));
                }
            }
            ProposedBlock::Zone(b) => {
                let hash = b.hash();
                let zones = b.records.len();
                self.validators[vi]
                    .zone_ledger
                    .append(b)
                    .expect("committed entries extend the replica in order");
                if vi == 0 {
                    self.log(format!(
                        "zone block {} committed ({zones} zone(s))",
                        hex::encode(&hash[..4])
                    ));
                }
            }
        }
    }

    fn try_status_update(&mut self, attempts: u32) {
        let Some(vi) = (0..self.raft.len()).find(|i| self.raft[*i].is_leader()) else {
            if attempts < 100 {
                self.sched.schedule_at(
                    self.now + 200,
                    Event::UpdateRetry {
                        attempts: attempts + 1,
                    },
                );
            } else {
                self.log("status update abandoned: no leader elected".into());
            }
            return;
        };
        if self.validators[vi].update_pending() {
            let stale = self
                .pending_update_since
                .get(&vi)
                .map(|s| self.now.saturating_sub(*s) > 5_000)
                .unwrap_or(true);
            if stale {
                self.validators[vi].abort_update();
                self.log(format!("validator {vi} dropped a stalled key resolution"));
            } else {
                self.log("status update skipped: one already in flight".into());
                return;
            }
        }
        let before = self.params.ops().snapshot();
        let batch = self.validators[vi]
            .begin_update(self.layout.kdc)
            .expect("no update pending");
        let delta = self.params.ops().snapshot().since(&before);
        self.sink
            .attribute(ActorClass::Validator, Phase::StatusUpdate, &delta);
        self.pending_update_since.insert(vi, self.now);
        let (inf, sus) = self.validators[vi].evidence_counts();
        self.log(format!(
            "validator {vi} started a status update over {} evidence key(s)",
            inf + sus
        ));
        self.send_batch(self.layout.validator(vi as u32), batch);
    }

    fn last_block_hash(log: &[LogEntry], want_status: bool) -> BlockHash {
        for e in log.iter().rev() {
            match (&e.block, want_status) {
                (ProposedBlock::Status(b), true) => return b.hash(),
                (ProposedBlock::Zone(b), false) => return b.hash(),
                _ => {}
            }
        }
        [0u8; 28]
    }

    /// Key resolution came back: build both blocks, chain them off the
    /// leader's replicated log, and propose them.
    fn finish_status_update(&mut self, vi: usize, resolved: Vec<Option<PublicKey>>) {
        let Some(plan) = self.validators[vi].finish_update(&resolved) else {
            return;
        };
        self.pending_update_since.remove(&vi);
        if !self.raft[vi].is_leader() {
            self.log(format!(
                "validator {vi} lost leadership mid-update; blocks dropped"
            ));
            return;
        }
        let before = self.params.ops().snapshot();
        let prev_status = Self::last_block_hash(self.raft[vi].log(), true);
        let prev_zone = Self::last_block_hash(self.raft[vi].log(), false);
        let v = &self.validators[vi];
        let status_block = build_status_block(
            &self.params,
            &v.sk,
            v.actor,
            prev_status,
            self.now,
            &plan.infected,
            &plan.suspected,
            self.config.policy.bloom,
        )
        .expect("plan sets are disjoint");
        let zone_block = build_zone_block(
            &self.params,
            &v.sk,
            v.actor,
            prev_zone,
            self.now,
            plan.zones.clone(),
        )
        .expect("plan zones are sorted");
        let delta = self.params.ops().snapshot().since(&before);
        self.sink
            .attribute(ActorClass::Validator, Phase::StatusUpdate, &delta);
        self.truth.insert(
            status_block.hash(),
            (
                plan.infected.iter().map(|k| k.to_bytes()).collect(),
                plan.suspected.iter().map(|k| k.to_bytes()).collect(),
            ),
        );
        self.log(format!(
            "validator {vi} proposed blocks: {} infected, {} suspected keys, {} zone row(s)",
            plan.infected.len(),
            plan.suspected.len(),
            plan.zones.len()
        ));
        let outs = self.raft[vi]
            .propose(ProposedBlock::Status(status_block))
            .expect("leadership checked above");
        self.process_raft_outputs(vi, outs);
        let outs = self.raft[vi]
            .propose(ProposedBlock::Zone(zone_block))
            .expect("leadership checked above");
        self.process_raft_outputs(vi, outs);
    }

    // -- notes --------------------------------------------------------------

    fn drain_user_notes(&mut self, actor: ActorId) {
        let (_, u) = self.user_ctx(actor);
        let notes = std::mem::take(&mut u.notes);
        let key = u.pk.to_bytes();
        self.key_owner.insert(key, actor);
        for n in notes {
            match n {
                Note::ContactStored { peer } => {
                    let (a, b) = (self.label(actor), self.label(peer));
                    self.log(format!("{a} stored a contact proof from {b}"));
                }
                Note::ContactAborted { peer, reason } => {
                    let (a, b) = (self.label(actor), self.label(peer));
                    self.log(format!("{a} aborted the contact with {b}: {reason}"));
                }
                Note::VisitStored { place } => {
                    let (a, b) = (self.label(actor), self.label(place));
                    self.log(format!("{a} stored a visit proof from {b}"));
                }
                Note::VisitDenied { place } => {
                    let (a, b) = (self.label(actor), self.label(place));
                    self.log(format!("{a} was turned away from {b}"));
                }
                Note::OwnStatus { status, .. } => {
                    let a = self.label(actor);
                    self.log(format!("{a} sees own status {status:?}"));
                }
                Note::RenewOutcome { ok } => {
                    let a = self.label(actor);
                    if ok {
                        self.log(format!("{a} renewed its credential"));
                    } else {
                        self.log(format!("{a} was refused a renewal"));
                    }
                }
                _ => {}
            }
        }
    }

    fn drain_validator_notes(&mut self, vi: usize) {
        let notes = std::mem::take(&mut self.validators[vi].notes);
        for n in notes {
            match n {
                Note::StatusAnswer {
                    asker,
                    pk,
                    status,
                    head,
                } => {
                    let kb = pk.to_bytes();
                    let expected = match self.truth.get(&head) {
                        None => KeyStatus::NotFound,
                        Some((inf, sus)) => {
                            if inf.contains(&kb) {
                                KeyStatus::Infected
                            } else if sus.contains(&kb) {
                                KeyStatus::Suspected
                            } else {
                                KeyStatus::NotFound
                            }
                        }
                    };
                    let false_positive = status != expected;
                    if false_positive {
                        self.sink.fp_event();
                        let who = self.label(asker);
                        self.log(format!(
                            "filter false positive answering {who}: {status:?} against exact {expected:?}"
                        ));
                    }
                    self.queries.push(QueryRecord {
                        time: self.now,
                        asker,
                        owner: self.key_owner.get(&kb).copied(),
                        status,
                        expected,
                        false_positive,
                    });
                }
                Note::BroadcastRejected { from } => {
                    let who = self.label(from);
                    self.log(format!(
                        "validator {vi} rejected a broadcast group from {who}"
                    ));
                }
                _ => {}
            }
        }
    }

    fn drain_place_notes(&mut self, pi: usize) {
        let place_actor = self.places[pi].actor;
        let notes = std::mem::take(&mut self.places[pi].notes);
        for n in notes {
            if let Note::Admission {
                user,
                admitted,
                reason,
            } = n
            {
                self.admissions.push(AdmissionRecord {
                    time: self.now,
                    place: place_actor,
                    user,
                    admitted,
                    reason,
                });
                let (u, p) = (self.label(user), self.label(place_actor));
                if admitted {
                    self.log(format!("{p} admitted {u}"));
                } else {
                    self.log(format!("{p} denied {u}: {reason}"));
                }
            }
        }
    }

    fn drain_authority_notes(&mut self) {
        let notes = std::mem::take(&mut self.authority.notes);
        for n in notes {
            if let Note::UploadJudged {
                from,
                records,
                accepted,
                reason,
            } = n
            {
                self.uploads.push(UploadRecord {
                    time: self.now,
                    from,
                    records,
                    accepted,
                    reason,
                });
                let who = self.label(from);
                if accepted {
                    self.log(format!("authority accepted {records} record(s) from {who}"));
                } else {
                    self.log(format!(
                        "authority rejected {records} record(s) from {who}: {reason}"
                    ));
                }
            }
        }
    }

    // -- reporting ----------------------------------------------------------

    fn finish(self) -> RunReport {
        let comm = CommReport::from_trace(&self.trace);
        let compute = self.sink.compute_report(&CostModel::default());

        let mut storage = StorageReport::default();
        let (mut up_count, mut up_chain, mut up_base) = (0u64, 0u64, 0u64);
        for u in self.uploads.iter().filter(|u| u.accepted) {
            up_count += 1;
            up_chain += 136 * u.records as u64 + 56;
            up_base += 192 * u.records as u64;
        }
        storage.push(StorageRow {
            store: "evidence-uploads",
            blocks: up_count,
            chain_bytes: up_chain,
            baseline_bytes: up_base,
        });
        let status_ledger = &self.validators[0].status_ledger;
        let (mut sc, mut sb) = (0u64, 0u64);
        for b in status_ledger.blocks() {
            sc += b.chain_size() as u64;
            let (n1, n2) = b.body.counts();
            sb += (BLOCK_HEADER_LEN as u64) + 29 * (n1 as u64 + n2 as u64);
        }
        storage.push(StorageRow {
            store: "status-chain",
            blocks: status_ledger.len() as u64,
            chain_bytes: sc,
            baseline_bytes: sb,
        });
        let zone_ledger = &self.validators[0].zone_ledger;
        let zc: u64 = zone_ledger
            .blocks()
            .iter()
            .map(|b| b.chain_size() as u64)
            .sum();
        storage.push(StorageRow {
            store: "zone-chain",
            blocks: zone_ledger.len() as u64,
            chain_bytes: zc,
            baseline_bytes: zc,
        });

        let (final_infected, final_suspected) =
            match self.latest_committed.and_then(|h| self.truth.get(&h)) {
                Some((inf, sus)) => {
                    let owners = |set: &BTreeSet<[u8; 29]>| {
                        set.iter()
                            .filter_map(|kb| self.key_owner.get(kb).copied())
                            .collect::<BTreeSet<ActorId>>()
                    };
                    (owners(inf), owners(sus))
                }
                None => (BTreeSet::new(), BTreeSet::new()),
            };

        let mut users: Vec<UserSummary> = self
            .users
            .iter()
            .map(|u| UserSummary {
                actor: u.actor,
                infected: u.infected,
                last_status: u.last_status,
                records: u.records.len(),
                keys: u.history.clone(),
            })
            .collect();
        users.push(UserSummary {
            actor: self.adversary.user.actor,
            infected: self.adversary.user.infected,
            last_status: self.adversary.user.last_status,
            records: self.adversary.user.records.len(),
            keys: self.adversary.user.history.clone(),
        });
        let mut tokens = self.user_tokens.clone();
        tokens.push(self.adversary_token);

        RunReport {
            scenario: self.config.name.clone(),
            seed: self.config.seed,
            duration_ms: self.config.duration_ms,
            comm,
            compute,
            storage,
            events_log: self.events_log,
            queries: self.queries,
            admissions: self.admissions,
            uploads: self.uploads,
            false_positives: self.sink.fp_detected(),
            status_blocks: status_ledger.len(),
            zone_blocks: zone_ledger.len(),
            leaders_by_term: self.leaders_by_term,
            final_infected,
            final_suspected,
            users,
            frame_log: self.frame_log,
            tokens,
            key_owner: self.key_owner,
            validator_keys: self.validators.iter().map(|v| (v.actor, v.pk)).collect(),
            status_chain_hex: status_ledger.to_hex_lines(),
            zone_chain_hex: zone_ledger.to_hex_lines(),
            layout: self.layout,
            zone_policy: *zone_ledger.policy(),
            trace: self.trace,
        }
    }
}
