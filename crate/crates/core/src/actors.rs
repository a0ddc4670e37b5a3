//! Protocol state machines for the entity kinds: users, public places, the
//! key service, the evidence-collecting authority, and the ledger
//! validators.
//!
//! Actors are deterministic: they own a seeded generator, touch nothing but
//! their own state, and express every effect as an [`Outgoing`] frame or a
//! [`Note`] for the engine to collect. Network delivery, operation
//! accounting and consensus plumbing all live in the engine.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha224};

use crate::crypto::{
    self, validate_certificate, CertStatus, Certificate, GroupParams, PrivateKey, PublicKey,
};
use crate::ledger::{BlockHash, KeyStatus, StatusLedger, ZonePolicy, ZoneRecord, ZoneLedger};
use crate::simnet::ActorId;
use crate::wire::{
    Frame, GroupedRecord, Location, Nonce, Phase, ProofMessage, RecordGroup, SignedRecord,
};

/// A frame an actor wants sent, stamped with the phase it belongs to.
/// `delay_ms` lets an actor spread its own sends over time (upload jitter);
/// the network latency draw comes later, in the link model.
#[derive(Clone, Debug)]
pub struct Outgoing {
    pub to: ActorId,
    pub frame: Frame,
    pub phase: Phase,
    pub delay_ms: u64,
}

impl Outgoing {
    fn now(to: ActorId, phase: Phase, frame: Frame) -> Self {
        Outgoing {
            to,
            frame,
            phase,
            delay_ms: 0,
        }
    }
}

/// Side-channel observations the engine drains after every dispatch. These
/// never touch the wire; they exist so runs can be audited.
#[derive(Clone, Debug)]
pub enum Note {
    ContactStored {
        peer: ActorId,
    },
    ContactAborted {
        peer: ActorId,
        reason: &'static str,
    },
    VisitStored {
        place: ActorId,
    },
    VisitDenied {
        place: ActorId,
    },
    /// Place-side admission decision.
    Admission {
        user: ActorId,
        admitted: bool,
        reason: &'static str,
    },
    /// Authority verdict over one uploaded group.
    UploadJudged {
        from: ActorId,
        records: u32,
        accepted: bool,
        reason: &'static str,
    },
    /// A validator answered a status query; `head` names the block the
    /// answer came from so it can be audited against the exact key sets.
    StatusAnswer {
        asker: ActorId,
        pk: PublicKey,
        status: KeyStatus,
        head: BlockHash,
    },
    OwnStatus {
        pk: PublicKey,
        status: KeyStatus,
    },
    RenewOutcome {
        ok: bool,
    },
    /// A broadcast group failed re-verification at a validator.
    BroadcastRejected {
        from: ActorId,
    },
}

fn fresh_nonce(rng: &mut ChaCha20Rng) -> Nonce {
    let mut b = [0u8; 5];
    rng.fill_bytes(&mut b);
    Nonce(b)
}

fn two_nonces(a: &Nonce, b: &Nonce) -> [u8; 10] {
    let mut m = [0u8; 10];
    m[..5].copy_from_slice(&a.0);
    m[5..].copy_from_slice(&b.0);
    m
}

// ---------------------------------------------------------------------------
// Users

#[derive(Debug)]
struct ContactSession {
    initiator: bool,
    my_nonce: Nonce,
    peer_nonce: Option<Nonce>,
    peer_cert: Option<Certificate>,
    /// Our ledger check of the peer came back clean.
    status_ok: bool,
    sent_proof: bool,
    pending_record: Option<SignedRecord>,
    stored: bool,
}

#[derive(Debug)]
struct VisitSession {
    my_nonce: Nonce,
    place_loc: Location,
    place_cert: Option<Certificate>,
    admitted: Option<bool>,
    sent_proof: bool,
    pending_record: Option<SignedRecord>,
}

/// A handset: short-term credentials, collected proofs, and the in-flight
/// handshake state. The real identity is the actor id, which exists only in
/// simulation bookkeeping and never inside a frame payload.
pub struct UserState {
    pub actor: ActorId,
    pub sk: PrivateKey,
    pub pk: PublicKey,
    pub cert: Certificate,
    pub token: [u8; 8],
    pub home: Location,
    /// The validator this handset directs ledger queries to.
    pub validator: ActorId,
    kdc_pk: PublicKey,
    pub records: Vec<SignedRecord>,
    /// Every key generation this user has held, current one last.
    pub history: Vec<PublicKey>,
    pub infected: bool,
    pub last_status: Option<KeyStatus>,
    pub notes: Vec<Note>,
    contacts: BTreeMap<ActorId, ContactSession>,
    visits: BTreeMap<ActorId, VisitSession>,
    own_queries: u32,
    rng: ChaCha20Rng,
}

impl UserState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        actor: ActorId,
        sk: PrivateKey,
        cert: Certificate,
        token: [u8; 8],
        home: Location,
        validator: ActorId,
        kdc_pk: PublicKey,
        seed: u64,
    ) -> Self {
        let pk = cert.subject;
        UserState {
            actor,
            sk,
            pk,
            cert,
            token,
            home,
            validator,
            kdc_pk,
            records: Vec::new(),
            history: vec![pk],
            infected: false,
            last_status: None,
            notes: Vec::new(),
            contacts: BTreeMap::new(),
            visits: BTreeMap::new(),
            own_queries: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Step 1 of the proximity handshake.
    pub fn start_contact(&mut self, peer: ActorId) -> Vec<Outgoing> {
        let nonce = fresh_nonce(&mut self.rng);
        self.contacts.insert(
            peer,
            ContactSession {
                initiator: true,
                my_nonce: nonce,
                peer_nonce: None,
                peer_cert: None,
                status_ok: false,
                sent_proof: false,
                pending_record: None,
                stored: false,
            },
        );
        vec![Outgoing::now(
            peer,
            Phase::Contact,
            Frame::ContactNonce { nonce },
        )]
    }

    /// Step 1 of place entry. The location is read off the venue, since the
    /// handset is physically there.
    pub fn start_visit(&mut self, place: ActorId, place_loc: Location) -> Vec<Outgoing> {
        let nonce = fresh_nonce(&mut self.rng);
        self.visits.insert(
            place,
            VisitSession {
                my_nonce: nonce,
                place_loc,
                place_cert: None,
                admitted: None,
                sent_proof: false,
                pending_record: None,
            },
        );
        vec![Outgoing::now(
            place,
            Phase::AccessControl,
            Frame::AccessNonce { nonce },
        )]
    }

    /// Positive test: purge anything outside the retention window, split the
    /// survivors into at most `upload_groups` groups, fold each group's
    /// signatures into one aggregate, and schedule the uploads at jittered
    /// times. With `aggregate` off every record travels alone, signature
    /// and certificate attached.
    #[allow(clippy::too_many_arguments)]
    pub fn report_infection(
        &mut self,
        params: &GroupParams,
        now: u64,
        authority: ActorId,
        upload_groups: u32,
        evidence_window_ms: u64,
        jitter_ms: u64,
        aggregate: bool,
    ) -> Vec<Outgoing> {
        self.infected = true;
        let horizon = now.saturating_sub(evidence_window_ms);
        self.records.retain(|r| r.msg.time >= horizon);
        let n = self.records.len();
        if n == 0 {
            return Vec::new();
        }
        let mut records = self.records.clone();
        records.sort_by_key(|r| (r.msg.time, r.msg.subject.to_bytes()));
        let mut out = Vec::new();
        let jitter = |rng: &mut ChaCha20Rng| {
            if jitter_ms == 0 {
                0
            } else {
                rng.gen_range(0..=jitter_ms)
            }
        };
        if aggregate {
            let m = n.div_ceil(upload_groups.max(1) as usize);
            for chunk in records.chunks(m) {
                let grouped: Vec<GroupedRecord> = chunk.iter().map(SignedRecord::strip).collect();
                let sigs: Vec<_> = chunk.iter().map(|r| r.sig).collect();
                let agg = crypto::aggregate(params, &sigs).expect("chunk is never empty");
                let group = RecordGroup::new(grouped, agg).expect("sizes agree by construction");
                out.push(Outgoing {
                    to: authority,
                    frame: Frame::TracingUpload { group },
                    phase: Phase::Tracing,
                    delay_ms: jitter(&mut self.rng),
                });
            }
        } else {
            for record in records {
                out.push(Outgoing {
                    to: authority,
                    frame: Frame::RecordUpload { record },
                    phase: Phase::Tracing,
                    delay_ms: jitter(&mut self.rng),
                });
            }
        }
        out
    }

    pub fn query_own_status(&mut self) -> Vec<Outgoing> {
        self.own_queries += 1;
        vec![Outgoing::now(
            self.validator,
            Phase::StatusUpdate,
            Frame::StatusQuery { pk: self.pk },
        )]
    }

    pub fn query_zone(&mut self, zone: u16) -> Vec<Outgoing> {
        vec![Outgoing::now(
            self.validator,
            Phase::StatusUpdate,
            Frame::ZoneQuery { zone },
        )]
    }

    pub fn start_renew(&mut self, kdc: ActorId) -> Vec<Outgoing> {
        vec![Outgoing::now(
            kdc,
            Phase::Setup,
            Frame::RenewRequest { token: self.token },
        )]
    }

    pub fn handle(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        phase: Phase,
        frame: Frame,
    ) -> Vec<Outgoing> {
        match frame {
            Frame::ContactNonce { nonce } => self.on_contact_nonce(params, from, nonce),
            Frame::ContactAuthReply { cert, sig, nonce } => {
                self.on_contact_reply(params, now, from, cert, sig, nonce)
            }
            Frame::ContactAuthFinish { cert, sig } => {
                self.on_contact_finish(params, now, from, cert, sig)
            }
            Frame::ContactProof { msg, sig } => self.on_contact_proof(params, from, msg, sig),
            Frame::AccessAuthReply { cert, sig, nonce } => {
                self.on_access_reply(params, now, from, cert, sig, nonce)
            }
            Frame::AccessVerdict { admit } => self.on_access_verdict(params, now, from, admit),
            Frame::VisitProof { msg, sig } => self.on_visit_proof(params, from, msg, sig),
            Frame::StatusResult { pk, status } => self.on_status_result(params, now, pk, status),
            Frame::ZoneResult { .. } => Vec::new(),
            Frame::TracingResult { .. } => Vec::new(),
            Frame::RenewResponse { issued } => self.on_renew_response(issued),
            _ => {
                let _ = (now, phase);
                Vec::new()
            }
        }
    }

    fn on_contact_nonce(
        &mut self,
        params: &GroupParams,
        from: ActorId,
        nonce: Nonce,
    ) -> Vec<Outgoing> {
        let my_nonce = fresh_nonce(&mut self.rng);
        // The responder signs the initiator's challenge.
        let sig = crypto::sign(params, &self.sk, &nonce.0);
        self.contacts.insert(
            from,
            ContactSession {
                initiator: false,
                my_nonce,
                peer_nonce: Some(nonce),
                peer_cert: None,
                status_ok: false,
                sent_proof: false,
                pending_record: None,
                stored: false,
            },
        );
        vec![Outgoing::now(
            from,
            Phase::Contact,
            Frame::ContactAuthReply {
                cert: self.cert,
                sig,
                nonce: my_nonce,
            },
        )]
    }

    fn abort_contact(&mut self, peer: ActorId, reason: &'static str) -> Vec<Outgoing> {
        self.contacts.remove(&peer);
        self.notes.push(Note::ContactAborted { peer, reason });
        Vec::new()
    }

    fn on_contact_reply(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        cert: Certificate,
        sig: crypto::Signature,
        nonce: Nonce,
    ) -> Vec<Outgoing> {
        let Some(session) = self.contacts.get_mut(&from) else {
            return Vec::new();
        };
        if !session.initiator || session.peer_cert.is_some() {
            return Vec::new();
        }
        if validate_certificate(params, &self.kdc_pk, &cert, now) != CertStatus::Valid {
            return self.abort_contact(from, "invalid certificate");
        }
        if !crypto::verify(params, &cert.subject, &session.my_nonce.0, &sig) {
            return self.abort_contact(from, "bad signature");
        }
        session.peer_cert = Some(cert);
        session.peer_nonce = Some(nonce);
        // The initiator signs both challenges, in exchange order.
        let both = two_nonces(&session.my_nonce, &nonce);
        let own_sig = crypto::sign(params, &self.sk, &both);
        vec![
            Outgoing::now(
                from,
                Phase::Contact,
                Frame::ContactAuthFinish {
                    cert: self.cert,
                    sig: own_sig,
                },
            ),
            Outgoing::now(
                self.validator,
                Phase::Contact,
                Frame::StatusQuery { pk: cert.subject },
            ),
        ]
    }

    fn on_contact_finish(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        cert: Certificate,
        sig: crypto::Signature,
    ) -> Vec<Outgoing> {
        let Some(session) = self.contacts.get_mut(&from) else {
            return Vec::new();
        };
        if session.initiator || session.peer_cert.is_some() {
            return Vec::new();
        }
        if validate_certificate(params, &self.kdc_pk, &cert, now) != CertStatus::Valid {
            return self.abort_contact(from, "invalid certificate");
        }
        let peer_nonce = session.peer_nonce.expect("responder stored the challenge");
        let both = two_nonces(&peer_nonce, &session.my_nonce);
        if !crypto::verify(params, &cert.subject, &both, &sig) {
            return self.abort_contact(from, "bad signature");
        }
        session.peer_cert = Some(cert);
        vec![Outgoing::now(
            self.validator,
            Phase::Contact,
            Frame::StatusQuery { pk: cert.subject },
        )]
    }

    fn on_contact_proof(
        &mut self,
        params: &GroupParams,
        from: ActorId,
        msg: ProofMessage,
        sig: crypto::Signature,
    ) -> Vec<Outgoing> {
        let Some(session) = self.contacts.get_mut(&from) else {
            return Vec::new();
        };
        let Some(cert) = session.peer_cert else {
            return Vec::new();
        };
        if msg.subject != self.pk {
            return self.abort_contact(from, "proof names someone else");
        }
        if !crypto::verify(params, &cert.subject, &msg.to_bytes(), &sig) {
            return self.abort_contact(from, "bad proof signature");
        }
        session.pending_record = Some(SignedRecord { msg, sig, cert });
        self.settle_contact(from);
        Vec::new()
    }

    /// Store the counterpart's proof once our own ledger check has passed;
    /// an aborted or still-pending check keeps the record out.
    fn settle_contact(&mut self, peer: ActorId) {
        let Some(session) = self.contacts.get_mut(&peer) else {
            return;
        };
        if session.status_ok && !session.stored {
            if let Some(record) = session.pending_record.take() {
                session.stored = true;
                self.records.push(record);
                self.notes.push(Note::ContactStored { peer });
            }
        }
        let done = self
            .contacts
            .get(&peer)
            .map(|s| s.stored && s.sent_proof)
            .unwrap_or(false);
        if done {
            self.contacts.remove(&peer);
        }
    }

    fn on_status_result(
        &mut self,
        params: &GroupParams,
        now: u64,
        pk: PublicKey,
        status: KeyStatus,
    ) -> Vec<Outgoing> {
        if pk == self.pk && self.own_queries > 0 {
            self.own_queries -= 1;
            self.last_status = Some(status);
            self.notes.push(Note::OwnStatus { pk, status });
            return Vec::new();
        }
        // Find the handshake waiting on this counterpart's status.
        let peer = self.contacts.iter().find_map(|(peer, s)| {
            (s.peer_cert.map(|c| c.subject) == Some(pk) && !s.status_ok).then_some(*peer)
        });
        let Some(peer) = peer else {
            return Vec::new();
        };
        if status != KeyStatus::NotFound {
            let reason = match status {
                KeyStatus::Infected => "peer flagged infected",
                _ => "peer flagged close contact",
            };
            return self.abort_contact(peer, reason);
        }
        let session = self.contacts.get_mut(&peer).expect("session present");
        session.status_ok = true;
        session.sent_proof = true;
        let peer_pk = session.peer_cert.expect("verified").subject;
        let msg = ProofMessage {
            subject: peer_pk,
            time: now,
            location: self.home,
        };
        let sig = crypto::sign(params, &self.sk, &msg.to_bytes());
        let out = vec![Outgoing::now(
            peer,
            Phase::Contact,
            Frame::ContactProof { msg, sig },
        )];
        self.settle_contact(peer);
        out
    }

    fn on_access_reply(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        cert: Certificate,
        sig: crypto::Signature,
        nonce: Nonce,
    ) -> Vec<Outgoing> {
        let Some(session) = self.visits.get_mut(&from) else {
            return Vec::new();
        };
        if session.place_cert.is_some() {
            return Vec::new();
        }
        if validate_certificate(params, &self.kdc_pk, &cert, now) != CertStatus::Valid
            || !crypto::verify(params, &cert.subject, &session.my_nonce.0, &sig)
        {
            self.visits.remove(&from);
            self.notes.push(Note::VisitDenied { place: from });
            return Vec::new();
        }
        session.place_cert = Some(cert);
        let both = two_nonces(&session.my_nonce, &nonce);
        let own_sig = crypto::sign(params, &self.sk, &both);
        vec![Outgoing::now(
            from,
            Phase::AccessControl,
            Frame::AccessAuthFinish {
                cert: self.cert,
                sig: own_sig,
            },
        )]
    }

    fn on_access_verdict(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        admit: bool,
    ) -> Vec<Outgoing> {
        let Some(session) = self.visits.get_mut(&from) else {
            return Vec::new();
        };
        if !admit {
            self.visits.remove(&from);
            self.notes.push(Note::VisitDenied { place: from });
            return Vec::new();
        }
        session.admitted = Some(true);
        session.sent_proof = true;
        let place_pk = session.place_cert.expect("authenticated").subject;
        let msg = ProofMessage {
            subject: place_pk,
            time: now,
            location: session.place_loc,
        };
        let sig = crypto::sign(params, &self.sk, &msg.to_bytes());
        // Visit proofs ride the contact-phase record machinery.
        let out = vec![Outgoing::now(
            from,
            Phase::Contact,
            Frame::VisitProof { msg, sig },
        )];
        self.settle_visit(from);
        out
    }

    fn on_visit_proof(
        &mut self,
        params: &GroupParams,
        from: ActorId,
        msg: ProofMessage,
        sig: crypto::Signature,
    ) -> Vec<Outgoing> {
        let Some(session) = self.visits.get_mut(&from) else {
            return Vec::new();
        };
        let Some(cert) = session.place_cert else {
            return Vec::new();
        };
        if msg.subject != self.pk || !crypto::verify(params, &cert.subject, &msg.to_bytes(), &sig)
        {
            self.visits.remove(&from);
            self.notes.push(Note::VisitDenied { place: from });
            return Vec::new();
        }
        session.pending_record = Some(SignedRecord { msg, sig, cert });
        self.settle_visit(from);
        Vec::new()
    }

    fn settle_visit(&mut self, place: ActorId) {
        let ready = self
            .visits
            .get(&place)
            .map(|s| s.admitted == Some(true) && s.sent_proof && s.pending_record.is_some())
            .unwrap_or(false);
        if ready {
            let session = self.visits.remove(&place).expect("present");
            self.records.push(session.pending_record.expect("checked"));
            self.notes.push(Note::VisitStored { place });
        }
    }

    fn on_renew_response(
        &mut self,
        issued: Option<(PrivateKey, Certificate)>,
    ) -> Vec<Outgoing> {
        match issued {
            Some((sk, cert)) => {
                self.sk = sk;
                self.pk = cert.subject;
                self.cert = cert;
                self.history.push(cert.subject);
                self.notes.push(Note::RenewOutcome { ok: true });
            }
            None => self.notes.push(Note::RenewOutcome { ok: false }),
        }
        Vec::new()
    }
}

// ---------------------------------------------------------------------------
// Adversary

/// A registered handset that also hoards everything it overhears and is
/// willing to lie. It holds no honest user's private key.
pub struct AdversaryState {
    pub user: UserState,
    pub observed: Vec<RecordGroup>,
}

impl AdversaryState {
    pub fn new(user: UserState) -> Self {
        AdversaryState {
            user,
            observed: Vec::new(),
        }
    }

    /// Fabricate evidence naming the victims as counterparts. The victims'
    /// certificates are public, their keys are not, so the signatures are
    /// the adversary's own and the aggregate cannot check out.
    pub fn forge_upload(
        &mut self,
        params: &GroupParams,
        now: u64,
        authority: ActorId,
        victim_certs: &[Certificate],
    ) -> Vec<Outgoing> {
        if victim_certs.is_empty() {
            return Vec::new();
        }
        let mut grouped = Vec::new();
        let mut sigs = Vec::new();
        for cert in victim_certs {
            let msg = ProofMessage {
                subject: self.user.pk,
                time: now,
                location: self.user.home,
            };
            grouped.push(GroupedRecord { msg, cert: *cert });
            sigs.push(crypto::sign(params, &self.user.sk, &msg.to_bytes()));
        }
        let agg = crypto::aggregate(params, &sigs).expect("nonempty");
        let group = RecordGroup::new(grouped, agg).expect("sizes agree");
        vec![Outgoing::now(
            authority,
            Phase::Tracing,
            Frame::TracingUpload { group },
        )]
    }

    /// Re-send the last overheard upload verbatim.
    pub fn replay_upload(&mut self, authority: ActorId) -> Vec<Outgoing> {
        let Some(group) = self.observed.last().cloned() else {
            return Vec::new();
        };
        vec![Outgoing::now(
            authority,
            Phase::Tracing,
            Frame::TracingUpload { group },
        )]
    }

    /// Claim overheard records as fresh evidence of the adversary's own:
    /// new timestamps, new subject, original signatures. The signatures
    /// cover the old bytes, so the aggregate no longer matches.
    pub fn restamp_upload(&mut self, now: u64, authority: ActorId) -> Vec<Outgoing> {
        let Some(group) = self.observed.last() else {
            return Vec::new();
        };
        let records: Vec<GroupedRecord> = group
            .records()
            .iter()
            .map(|r| GroupedRecord {
                msg: ProofMessage {
                    subject: self.user.pk,
                    time: now,
                    location: r.msg.location,
                },
                cert: r.cert,
            })
            .collect();
        let group = RecordGroup::new(records, *group.aggregate()).expect("same length");
        vec![Outgoing::now(
            authority,
            Phase::Tracing,
            Frame::TracingUpload { group },
        )]
    }
}

// ---------------------------------------------------------------------------
// Public places

#[derive(Debug)]
struct PlaceSession {
    my_nonce: Nonce,
    peer_nonce: Nonce,
    user_cert: Option<Certificate>,
    /// Status check in flight for this key.
    awaiting_status: bool,
}

/// A venue with a long-term key: runs the entry handshake, checks the
/// ledger, and keeps a visit log for contamination-window requests.
pub struct PlaceState {
    pub actor: ActorId,
    pub sk: PrivateKey,
    pub pk: PublicKey,
    pub cert: Certificate,
    pub location: Location,
    pub validator: ActorId,
    kdc_pk: PublicKey,
    pub visit_log: Vec<SignedRecord>,
    evidence_window_ms: u64,
    sessions: BTreeMap<ActorId, PlaceSession>,
    pub notes: Vec<Note>,
    rng: ChaCha20Rng,
}

impl PlaceState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        actor: ActorId,
        sk: PrivateKey,
        cert: Certificate,
        location: Location,
        validator: ActorId,
        kdc_pk: PublicKey,
        evidence_window_ms: u64,
        seed: u64,
    ) -> Self {
        PlaceState {
            actor,
            sk,
            pk: cert.subject,
            cert,
            location,
            validator,
            kdc_pk,
            visit_log: Vec::new(),
            evidence_window_ms,
            sessions: BTreeMap::new(),
            notes: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn handle(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        phase: Phase,
        frame: Frame,
    ) -> Vec<Outgoing> {
        let _ = phase;
        match frame {
            Frame::AccessNonce { nonce } => self.on_access_nonce(params, from, nonce),
            Frame::AccessAuthFinish { cert, sig } => {
                self.on_access_finish(params, now, from, cert, sig)
            }
            Frame::StatusResult { pk, status } => self.on_status_result(params, now, pk, status),
            Frame::VisitProof { msg, sig } => self.on_visit_proof(params, now, from, msg, sig),
            Frame::PlaceWindowRequest { from: lo, to: hi } => {
                self.on_window_request(params, now, from, lo, hi)
            }
            _ => Vec::new(),
        }
    }

    fn on_access_nonce(
        &mut self,
        params: &GroupParams,
        from: ActorId,
        nonce: Nonce,
    ) -> Vec<Outgoing> {
        let my_nonce = fresh_nonce(&mut self.rng);
        let sig = crypto::sign(params, &self.sk, &nonce.0);
        self.sessions.insert(
            from,
            PlaceSession {
                my_nonce,
                peer_nonce: nonce,
                user_cert: None,
                awaiting_status: false,
            },
        );
        vec![Outgoing::now(
            from,
            Phase::AccessControl,
            Frame::AccessAuthReply {
                cert: self.cert,
                sig,
                nonce: my_nonce,
            },
        )]
    }

    fn deny(&mut self, user: ActorId, reason: &'static str) -> Vec<Outgoing> {
        self.sessions.remove(&user);
        self.notes.push(Note::Admission {
            user,
            admitted: false,
            reason,
        });
        vec![Outgoing::now(
            user,
            Phase::AccessControl,
            Frame::AccessVerdict { admit: false },
        )]
    }

    fn on_access_finish(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        cert: Certificate,
        sig: crypto::Signature,
    ) -> Vec<Outgoing> {
        let Some(session) = self.sessions.get_mut(&from) else {
            return Vec::new();
        };
        if session.user_cert.is_some() {
            return Vec::new();
        }
        if validate_certificate(params, &self.kdc_pk, &cert, now) != CertStatus::Valid {
            return self.deny(from, "invalid certificate");
        }
        let both = two_nonces(&session.peer_nonce, &session.my_nonce);
        if !crypto::verify(params, &cert.subject, &both, &sig) {
            return self.deny(from, "bad signature");
        }
        session.user_cert = Some(cert);
        session.awaiting_status = true;
        vec![Outgoing::now(
            self.validator,
            Phase::AccessControl,
            Frame::StatusQuery { pk: cert.subject },
        )]
    }

    fn on_status_result(
        &mut self,
        params: &GroupParams,
        now: u64,
        pk: PublicKey,
        status: KeyStatus,
    ) -> Vec<Outgoing> {
        let user = self.sessions.iter().find_map(|(user, s)| {
            (s.awaiting_status && s.user_cert.map(|c| c.subject) == Some(pk)).then_some(*user)
        });
        let Some(user) = user else {
            return Vec::new();
        };
        if status != KeyStatus::NotFound {
            let reason = match status {
                KeyStatus::Infected => "flagged infected",
                _ => "flagged close contact",
            };
            return self.deny(user, reason);
        }
        let session = self.sessions.get_mut(&user).expect("present");
        session.awaiting_status = false;
        self.notes.push(Note::Admission {
            user,
            admitted: true,
            reason: "clear",
        });
        let user_pk = session.user_cert.expect("authenticated").subject;
        let msg = ProofMessage {
            subject: user_pk,
            time: now,
            location: self.location,
        };
        let sig = crypto::sign(params, &self.sk, &msg.to_bytes());
        vec![
            Outgoing::now(user, Phase::AccessControl, Frame::AccessVerdict { admit: true }),
            // Visit proofs ride the contact-phase record machinery.
            Outgoing::now(user, Phase::Contact, Frame::VisitProof { msg, sig }),
        ]
    }

    fn on_visit_proof(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        msg: ProofMessage,
        sig: crypto::Signature,
    ) -> Vec<Outgoing> {
        let Some(session) = self.sessions.get(&from) else {
            return Vec::new();
        };
        let Some(cert) = session.user_cert else {
            return Vec::new();
        };
        if msg.subject != self.pk
            || !crypto::verify(params, &cert.subject, &msg.to_bytes(), &sig)
        {
            return Vec::new();
        }
        self.visit_log.push(SignedRecord { msg, sig, cert });
        self.sessions.remove(&from);
        // Drop entries too old to ever be requested again.
        let horizon = now.saturating_sub(self.evidence_window_ms);
        self.visit_log.retain(|r| r.msg.time >= horizon);
        Vec::new()
    }

    /// Contamination-window lookup: everyone logged inside [lo, hi] goes
    /// back as one aggregated group.
    fn on_window_request(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        lo: u64,
        hi: u64,
    ) -> Vec<Outgoing> {
        let horizon = now.saturating_sub(self.evidence_window_ms);
        self.visit_log.retain(|r| r.msg.time >= horizon);
        let hits: Vec<&SignedRecord> = self
            .visit_log
            .iter()
            .filter(|r| r.msg.time >= lo && r.msg.time <= hi)
            .collect();
        let group = if hits.is_empty() {
            None
        } else {
            let grouped: Vec<GroupedRecord> = hits.iter().map(|r| r.strip()).collect();
            let sigs: Vec<_> = hits.iter().map(|r| r.sig).collect();
            let agg = crypto::aggregate(params, &sigs).expect("nonempty");
            Some(RecordGroup::new(grouped, agg).expect("sizes agree"))
        };
        let _ = &self.rng;
        vec![Outgoing::now(
            from,
            Phase::Tracing,
            Frame::PlaceWindowRecords { group },
        )]
    }
}

// ---------------------------------------------------------------------------
// Key distribution center

#[derive(Debug)]
struct Registration {
    chain: Vec<PublicKey>,
    blocked: bool,
    /// A certified negative test: resolution reports these keys gone and
    /// renewal works again.
    cleared: bool,
}

/// Issues short-term credentials, maps any generation of a key to its
/// newest sibling, and refuses renewals to blocked identities.
pub struct KdcState {
    pub actor: ActorId,
    pub sk: PrivateKey,
    pub pk: PublicKey,
    lifetime_ms: u64,
    registry: BTreeMap<[u8; 8], Registration>,
    by_key: BTreeMap<[u8; 29], [u8; 8]>,
    pub notes: Vec<Note>,
    rng: ChaCha20Rng,
}

impl KdcState {
    pub fn new(actor: ActorId, params: &GroupParams, lifetime_ms: u64, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (sk, pk) = crypto::keygen_from_rng(params, &mut rng);
        KdcState {
            actor,
            sk,
            pk,
            lifetime_ms,
            registry: BTreeMap::new(),
            by_key: BTreeMap::new(),
            notes: Vec::new(),
            rng,
        }
    }

    /// Initial issuance at registration time; no frames involved.
    pub fn register(
        &mut self,
        params: &GroupParams,
        token: [u8; 8],
        now: u64,
    ) -> (PrivateKey, Certificate) {
        let (sk, pk) = crypto::keygen_from_rng(params, &mut self.rng);
        let cert = crypto::issue_certificate(params, &self.sk, &pk, now, now + self.lifetime_ms)
            .expect("positive lifetime");
        self.registry.insert(
            token,
            Registration {
                chain: vec![pk],
                blocked: false,
                cleared: false,
            },
        );
        self.by_key.insert(pk.to_bytes(), token);
        (sk, cert)
    }

    /// Administrative blocklisting (used by scripted scenarios).
    pub fn set_blocked(&mut self, token: [u8; 8], blocked: bool) {
        if let Some(reg) = self.registry.get_mut(&token) {
            reg.blocked = blocked;
        }
    }

    /// Positive test certification (cleared = false) or a negative test
    /// (cleared = true, renewals resume).
    pub fn set_cleared(&mut self, token: [u8; 8], cleared: bool) {
        if let Some(reg) = self.registry.get_mut(&token) {
            reg.cleared = cleared;
            if cleared {
                reg.blocked = false;
            }
        }
    }

    pub fn handle(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        phase: Phase,
        frame: Frame,
    ) -> Vec<Outgoing> {
        match frame {
            Frame::RenewRequest { token } => self.on_renew(params, now, from, token),
            Frame::KeyListRequest { keys } => self.on_key_list(from, phase, &keys),
            _ => Vec::new(),
        }
    }

    fn on_renew(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        token: [u8; 8],
    ) -> Vec<Outgoing> {
        let issued = match self.registry.get(&token) {
            Some(reg) if !reg.blocked => {
                let (sk, pk) = crypto::keygen_from_rng(params, &mut self.rng);
                let cert =
                    crypto::issue_certificate(params, &self.sk, &pk, now, now + self.lifetime_ms)
                        .expect("positive lifetime");
                let reg = self.registry.get_mut(&token).expect("present");
                reg.chain.push(pk);
                self.by_key.insert(pk.to_bytes(), token);
                Some((sk, cert))
            }
            _ => None,
        };
        vec![Outgoing::now(
            from,
            Phase::Setup,
            Frame::RenewResponse { issued },
        )]
    }

    /// Status-update resolution: every listed key's owner is blocked from
    /// renewing, and the newest key of the chain goes back. Cleared or
    /// unknown keys come back as the not-found marker.
    fn on_key_list(&mut self, from: ActorId, phase: Phase, keys: &[PublicKey]) -> Vec<Outgoing> {
        let resolved: Vec<Option<PublicKey>> = keys
            .iter()
            .map(|k| {
                let token = self.by_key.get(&k.to_bytes())?;
                let reg = self.registry.get_mut(token).expect("indexed");
                if reg.cleared {
                    return None;
                }
                reg.blocked = true;
                Some(*reg.chain.last().expect("nonempty chain"))
            })
            .collect();
        vec![Outgoing::now(
            from,
            phase,
            Frame::KeyListResponse { keys: resolved },
        )]
    }
}

// ---------------------------------------------------------------------------
// Health authority (evidence intake)

/// Receives evidence uploads, enforces the acceptance rules, runs indirect
/// tracing against visited places, and broadcasts accepted groups to the
/// validators.
pub struct AuthorityState {
    pub actor: ActorId,
    validators: Vec<ActorId>,
    place_by_key: BTreeMap<[u8; 29], ActorId>,
    contamination_window_ms: u64,
    evidence_window_ms: u64,
    seen_digests: BTreeSet<[u8; 28]>,
    window_requests: BTreeSet<(ActorId, u64)>,
    pub notes: Vec<Note>,
}

impl AuthorityState {
    pub fn new(
        actor: ActorId,
        validators: Vec<ActorId>,
        contamination_window_ms: u64,
        evidence_window_ms: u64,
    ) -> Self {
        AuthorityState {
            actor,
            validators,
            place_by_key: BTreeMap::new(),
            contamination_window_ms,
            evidence_window_ms,
            seen_digests: BTreeSet::new(),
            window_requests: BTreeSet::new(),
            notes: Vec::new(),
        }
    }

    pub fn register_place(&mut self, pk: &PublicKey, actor: ActorId) {
        self.place_by_key.insert(pk.to_bytes(), actor);
    }

    /// Judge one uploaded group. `uploader_keys` is every key generation the
    /// authenticated upload session proved ownership of; records naming
    /// anyone else are evidence theft and sink the group.
    pub fn handle_upload(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        group: &RecordGroup,
        uploader_keys: &[PublicKey],
    ) -> Vec<Outgoing> {
        let verdict = self.judge(params, now, group, uploader_keys);
        let mut out = vec![Outgoing::now(
            from,
            Phase::Tracing,
            Frame::TracingResult {
                accepted: verdict.is_ok(),
            },
        )];
        match verdict {
            Err(reason) => {
                self.notes.push(Note::UploadJudged {
                    from,
                    records: group.len() as u32,
                    accepted: false,
                    reason,
                });
            }
            Ok(digests) => {
                self.seen_digests.extend(digests);
                self.notes.push(Note::UploadJudged {
                    from,
                    records: group.len() as u32,
                    accepted: true,
                    reason: "ok",
                });
                // Records signed by a registered place witness a visit;
                // ask the venue who else overlapped the contamination
                // window.
                for r in group.records() {
                    let signer = r.cert.subject.to_bytes();
                    if let Some(place) = self.place_by_key.get(&signer).copied() {
                        let lo = r.msg.time;
                        let hi = lo + self.contamination_window_ms;
                        if self.window_requests.insert((place, lo)) {
                            out.push(Outgoing::now(
                                place,
                                Phase::Tracing,
                                Frame::PlaceWindowRequest { from: lo, to: hi },
                            ));
                        }
                    }
                }
                for v in &self.validators {
                    out.push(Outgoing::now(
                        *v,
                        Phase::Tracing,
                        Frame::EvidenceBroadcast {
                            group: group.clone(),
                        },
                    ));
                }
            }
        }
        out
    }

    fn judge(
        &self,
        params: &GroupParams,
        now: u64,
        group: &RecordGroup,
        uploader_keys: &[PublicKey],
    ) -> Result<Vec<[u8; 28]>, &'static str> {
        let horizon = now.saturating_sub(self.evidence_window_ms);
        let mut digests = Vec::with_capacity(group.len());
        for r in group.records() {
            if r.msg.time < horizon {
                return Err("record outside the retention window");
            }
            if r.msg.time > now {
                return Err("record from the future");
            }
            if r.msg.time >= r.cert.not_after {
                return Err("credential expired before the record");
            }
            let digest: [u8; 28] = Sha224::digest(r.to_bytes()).into();
            if self.seen_digests.contains(&digest) {
                return Err("replayed record");
            }
            digests.push(digest);
        }
        if group
            .records()
            .iter()
            .any(|r| !uploader_keys.contains(&r.msg.subject))
        {
            return Err("record names a key the uploader does not own");
        }
        let bufs: Vec<[u8; 43]> = group.records().iter().map(|r| r.msg.to_bytes()).collect();
        let messages: Vec<(&PublicKey, &[u8])> = group
            .records()
            .iter()
            .zip(&bufs)
            .map(|(r, b)| (&r.cert.subject, &b[..]))
            .collect();
        if !crypto::aggregate_verify(params, &messages, group.aggregate()) {
            return Err("aggregate signature check failed");
        }
        Ok(digests)
    }

    /// Single-record upload, the path without aggregation: same acceptance
    /// rules, one signature check per record.
    pub fn handle_record(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        record: &SignedRecord,
        uploader_keys: &[PublicKey],
    ) -> Vec<Outgoing> {
        let verdict: Result<[u8; 28], &'static str> = (|| {
            let horizon = now.saturating_sub(self.evidence_window_ms);
            if record.msg.time < horizon {
                return Err("record outside the retention window");
            }
            if record.msg.time > now {
                return Err("record from the future");
            }
            if record.msg.time >= record.cert.not_after {
                return Err("credential expired before the record");
            }
            let digest: [u8; 28] = Sha224::digest(record.to_bytes()).into();
            if self.seen_digests.contains(&digest) {
                return Err("replayed record");
            }
            if !uploader_keys.contains(&record.msg.subject) {
                return Err("record names a key the uploader does not own");
            }
            if !crypto::verify(params, &record.cert.subject, &record.msg.to_bytes(), &record.sig)
            {
                return Err("signature check failed");
            }
            Ok(digest)
        })();
        let mut out = vec![Outgoing::now(
            from,
            Phase::Tracing,
            Frame::TracingResult {
                accepted: verdict.is_ok(),
            },
        )];
        match verdict {
            Err(reason) => self.notes.push(Note::UploadJudged {
                from,
                records: 1,
                accepted: false,
                reason,
            }),
            Ok(digest) => {
                self.seen_digests.insert(digest);
                self.notes.push(Note::UploadJudged {
                    from,
                    records: 1,
                    accepted: true,
                    reason: "ok",
                });
                let signer = record.cert.subject.to_bytes();
                if let Some(place) = self.place_by_key.get(&signer).copied() {
                    let lo = record.msg.time;
                    let hi = lo + self.contamination_window_ms;
                    if self.window_requests.insert((place, lo)) {
                        out.push(Outgoing::now(
                            place,
                            Phase::Tracing,
                            Frame::PlaceWindowRequest { from: lo, to: hi },
                        ));
                    }
                }
                let agg = crypto::aggregate(params, &[record.sig]).expect("one signature");
                let group =
                    RecordGroup::new(vec![record.strip()], agg).expect("sizes agree");
                for v in &self.validators {
                    out.push(Outgoing::now(
                        *v,
                        Phase::Tracing,
                        Frame::EvidenceBroadcast {
                            group: group.clone(),
                        },
                    ));
                }
            }
        }
        out
    }

    /// A venue answered a contamination-window request: verify and forward
    /// to the validators like any other evidence.
    pub fn handle_place_records(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        group: Option<RecordGroup>,
    ) -> Vec<Outgoing> {
        let Some(group) = group else {
            return Vec::new();
        };
        let horizon = now.saturating_sub(self.evidence_window_ms);
        if group.records().iter().any(|r| r.msg.time < horizon) {
            self.notes.push(Note::UploadJudged {
                from,
                records: group.len() as u32,
                accepted: false,
                reason: "stale visit records",
            });
            return Vec::new();
        }
        let bufs: Vec<[u8; 43]> = group.records().iter().map(|r| r.msg.to_bytes()).collect();
        let messages: Vec<(&PublicKey, &[u8])> = group
            .records()
            .iter()
            .zip(&bufs)
            .map(|(r, b)| (&r.cert.subject, &b[..]))
            .collect();
        if !crypto::aggregate_verify(params, &messages, group.aggregate()) {
            self.notes.push(Note::UploadJudged {
                from,
                records: group.len() as u32,
                accepted: false,
                reason: "place aggregate failed",
            });
            return Vec::new();
        }
        self.validators
            .iter()
            .map(|v| {
                Outgoing::now(
                    *v,
                    Phase::Tracing,
                    Frame::EvidenceBroadcast {
                        group: group.clone(),
                    },
                )
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Validators

#[derive(Clone, Copy, Debug)]
struct Evidence {
    pk: PublicKey,
    /// Latest record backing this key, and the zone it places it in.
    time: u64,
    zone: u16,
}

/// What a status update wants written, before consensus: the resolved key
/// sets and the per-zone tallies, plus the exact sets for auditing.
#[derive(Clone, Debug)]
pub struct UpdatePlan {
    pub infected: Vec<PublicKey>,
    pub suspected: Vec<PublicKey>,
    pub zones: Vec<ZoneRecord>,
}

/// One consensus member: ledger replicas, the evidence store it verifies
/// for itself, and the leader-side update machinery.
pub struct ValidatorState {
    pub actor: ActorId,
    pub sk: PrivateKey,
    pub pk: PublicKey,
    pub status_ledger: StatusLedger,
    pub zone_ledger: ZoneLedger,
    validator_pks: BTreeMap<u64, PublicKey>,
    place_keys: BTreeSet<[u8; 29]>,
    policy: ZonePolicy,
    infected: BTreeMap<[u8; 29], Evidence>,
    suspected: BTreeMap<[u8; 29], Evidence>,
    /// Keys sent for resolution, in request order; present while a
    /// status update is in flight from this node.
    pending: Option<Vec<PublicKey>>,
    pub notes: Vec<Note>,
    rng: ChaCha20Rng,
}

impl ValidatorState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(actor: ActorId, params: &GroupParams, policy: ZonePolicy, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (sk, pk) = crypto::keygen_from_rng(params, &mut rng);
        ValidatorState {
            actor,
            sk,
            pk,
            status_ledger: StatusLedger::new(),
            zone_ledger: ZoneLedger::new(policy),
            validator_pks: BTreeMap::new(),
            place_keys: BTreeSet::new(),
            policy,
            infected: BTreeMap::new(),
            suspected: BTreeMap::new(),
            pending: None,
            notes: Vec::new(),
            rng,
        }
    }

    pub fn learn_validator(&mut self, actor: ActorId, pk: PublicKey) {
        self.validator_pks.insert(actor, pk);
    }

    pub fn learn_place(&mut self, pk: &PublicKey) {
        self.place_keys.insert(pk.to_bytes());
    }

    pub fn evidence_counts(&self) -> (usize, usize) {
        (self.infected.len(), self.suspected.len())
    }

    pub fn handle(
        &mut self,
        params: &GroupParams,
        now: u64,
        from: ActorId,
        phase: Phase,
        frame: Frame,
    ) -> Vec<Outgoing> {
        let _ = now;
        match frame {
            Frame::StatusQuery { pk } => {
                let status = self.status_ledger.query(params, &pk);
                self.notes.push(Note::StatusAnswer {
                    asker: from,
                    pk,
                    status,
                    head: self.status_ledger.head_hash(),
                });
                vec![Outgoing::now(from, phase, Frame::StatusResult { pk, status })]
            }
            Frame::ZoneQuery { zone } => {
                let (record, status) = self.zone_ledger.query(zone);
                vec![Outgoing::now(
                    from,
                    phase,
                    Frame::ZoneResult { record, status },
                )]
            }
            Frame::EvidenceBroadcast { group } => {
                self.ingest(params, from, &group);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    /// Re-verify a broadcast group and fold it into the local evidence
    /// store: signers become close-contact candidates, named subjects
    /// become infected candidates, registered venues stay out of both.
    fn ingest(&mut self, params: &GroupParams, from: ActorId, group: &RecordGroup) {
        let bufs: Vec<[u8; 43]> = group.records().iter().map(|r| r.msg.to_bytes()).collect();
        let messages: Vec<(&PublicKey, &[u8])> = group
            .records()
            .iter()
            .zip(&bufs)
            .map(|(r, b)| (&r.cert.subject, &b[..]))
            .collect();
        if !crypto::aggregate_verify(params, &messages, group.aggregate()) {
            self.notes.push(Note::BroadcastRejected { from });
            return;
        }
        for r in group.records() {
            let t = r.msg.time;
            let zone = r.msg.location.zone();
            let signer = r.cert.subject;
            if !self.place_keys.contains(&signer.to_bytes()) {
                merge_evidence(&mut self.suspected, signer, t, zone);
            }
            let subject = r.msg.subject;
            if !self.place_keys.contains(&subject.to_bytes()) {
                merge_evidence(&mut self.infected, subject, t, zone);
            }
        }
    }

    /// Leader side, step 1: ship every evidence key to the key service for
    /// resolution, in a seeded shuffle so the request order says nothing
    /// about who met whom.
    pub fn begin_update(&mut self, kdc: ActorId) -> Option<Vec<Outgoing>> {
        if self.pending.is_some() {
            return None;
        }
        let mut keys: Vec<PublicKey> = self
            .infected
            .values()
            .map(|e| e.pk)
            .chain(self.suspected.values().map(|e| e.pk))
            .collect();
        keys.sort_by_key(|k| k.to_bytes());
        keys.dedup();
        keys.shuffle(&mut self.rng);
        self.pending = Some(keys.clone());
        Some(vec![Outgoing::now(
            kdc,
            Phase::StatusUpdate,
            Frame::KeyListRequest { keys },
        )])
    }

    /// Leader side, step 2: apply the resolution, keep the sets disjoint
    /// (infected wins), and lay out per-zone tallies. Keys the service
    /// reports gone (negative test) drop out entirely.
    pub fn finish_update(&mut self, resolved: &[Option<PublicKey>]) -> Option<UpdatePlan> {
        let sent = self.pending.take()?;
        if sent.len() != resolved.len() {
            return None;
        }
        let map: BTreeMap<[u8; 29], Option<PublicKey>> = sent
            .iter()
            .map(|k| k.to_bytes())
            .zip(resolved.iter().copied())
            .collect();
        let resolve = |store: &BTreeMap<[u8; 29], Evidence>| {
            let mut out: BTreeMap<[u8; 29], Evidence> = BTreeMap::new();
            for (kb, ev) in store {
                let Some(Some(latest)) = map.get(kb) else {
                    continue;
                };
                merge_evidence(&mut out, *latest, ev.time, ev.zone);
            }
            out
        };
        let infected = resolve(&self.infected);
        let mut suspected = resolve(&self.suspected);
        suspected.retain(|kb, _| !infected.contains_key(kb));

        let mut tallies: BTreeMap<u16, (u16, u16)> = BTreeMap::new();
        for ev in infected.values() {
            tallies.entry(ev.zone).or_default().0 += 1;
        }
        for ev in suspected.values() {
            tallies.entry(ev.zone).or_default().1 += 1;
        }
        Some(UpdatePlan {
            infected: infected.values().map(|e| e.pk).collect(),
            suspected: suspected.values().map(|e| e.pk).collect(),
            zones: tallies
                .into_iter()
                .map(|(zone, (i, s))| ZoneRecord {
                    zone,
                    infected: i,
                    suspected: s,
                })
                .collect(),
        })
    }

    /// Abandon an in-flight update (leadership lost before the resolution
    /// came back).
    pub fn abort_update(&mut self) {
        self.pending = None;
    }

    pub fn update_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Follower-side proposal check: the block must extend the last block
    /// of its kind in the log prefix, carry a known leader's valid
    /// signature, and claim nothing beyond this node's own verified
    /// evidence.
    pub fn validate_block(
        &mut self,
        params: &GroupParams,
        prior: &[crate::wire::LogEntry],
        block: &crate::wire::ProposedBlock,
    ) -> bool {
        use crate::wire::ProposedBlock;
        let expect_prev = |want_status: bool| -> BlockHash {
            for e in prior.iter().rev() {
                match (&e.block, want_status) {
                    (ProposedBlock::Status(b), true) => return b.hash(),
                    (ProposedBlock::Zone(b), false) => return b.hash(),
                    _ => {}
                }
            }
            [0u8; 28]
        };
        match block {
            ProposedBlock::Status(b) => {
                if b.header.prev_hash != expect_prev(true) {
                    return false;
                }
                let Some(leader_pk) = self.validator_pks.get(&b.header.leader_id) else {
                    return false;
                };
                if !b.verify_leader_sig(params, leader_pk) {
                    return false;
                }
                let (n1, n2) = b.body.counts();
                if n1 as usize > self.infected.len() || n2 as usize > self.suspected.len() {
                    return false;
                }
                if let crate::ledger::StatusBody::Keys {
                    infected,
                    suspected,
                } = &b.body
                {
                    // Raw lists are enumerable, so membership is checked
                    // exactly.
                    if !infected
                        .iter()
                        .all(|k| self.infected.contains_key(&k.to_bytes()))
                        || !suspected
                            .iter()
                            .all(|k| self.suspected.contains_key(&k.to_bytes()))
                    {
                        return false;
                    }
                }
                true
            }
            ProposedBlock::Zone(b) => {
                if b.header.prev_hash != expect_prev(false) {
                    return false;
                }
                let Some(leader_pk) = self.validator_pks.get(&b.header.leader_id) else {
                    return false;
                };
                if !b.verify_leader_sig(params, leader_pk) {
                    return false;
                }
                if b.records.windows(2).any(|w| w[0].zone >= w[1].zone) {
                    return false;
                }
                let mut tallies: BTreeMap<u16, (u16, u16)> = BTreeMap::new();
                for ev in self.infected.values() {
                    tallies.entry(ev.zone).or_default().0 += 1;
                }
                for ev in self.suspected.values() {
                    tallies.entry(ev.zone).or_default().1 += 1;
                }
                // Resolution can only merge or drop keys, so a truthful
                // leader never claims more than local evidence supports.
                b.records.iter().all(|r| {
                    let (i, s) = tallies.get(&r.zone).copied().unwrap_or((0, 0));
                    r.infected <= i && r.suspected <= s
                })
            }
        }
    }

    pub fn zone_policy(&self) -> ZonePolicy {
        self.policy
    }
}

fn merge_evidence(
    store: &mut BTreeMap<[u8; 29], Evidence>,
    pk: PublicKey,
    time: u64,
    zone: u16,
) {
    let entry = store.entry(pk.to_bytes()).or_insert(Evidence { pk, time, zone });
    if (time, zone) > (entry.time, entry.zone) {
        entry.time = time;
        entry.zone = zone;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::build_status_block;
    use std::collections::VecDeque;

    const KDC: ActorId = 0;
    const AUTHORITY: ActorId = 1;
    const VALIDATOR: ActorId = 2;
    const PLACE: ActorId = 3;
    const USER_BASE: ActorId = 4;

    struct TestWorld {
        params: GroupParams,
        kdc: KdcState,
        authority: AuthorityState,
        validator: ValidatorState,
        places: BTreeMap<ActorId, PlaceState>,
        users: BTreeMap<ActorId, UserState>,
    }

    fn world(user_count: u64) -> TestWorld {
        let params = GroupParams::new();
        let mut kdc = KdcState::new(KDC, &params, 86_400_000, 11);
        let mut validator = ValidatorState::new(VALIDATOR, &params, ZonePolicy::default(), 12);
        validator.learn_validator(VALIDATOR, validator.pk);
        let authority = AuthorityState::new(AUTHORITY, vec![VALIDATOR], 3_600_000, 86_400_000);
        let mut users = BTreeMap::new();
        for i in 0..user_count {
            let actor = USER_BASE + i;
            let token = [i as u8 + 1; 8];
            let (sk, cert) = kdc.register(&params, token, 0);
            let home = Location::for_zone(1, 40 + i as i32);
            users.insert(
                actor,
                UserState::new(actor, sk, cert, token, home, VALIDATOR, kdc.pk, 100 + i),
            );
        }
        TestWorld {
            params,
            kdc,
            authority,
            validator,
            places: BTreeMap::new(),
            users,
        }
    }

    fn add_place(w: &mut TestWorld, zone: u16) -> ActorId {
        let token = [0xB0 + w.places.len() as u8; 8];
        let (sk, cert) = w.kdc.register(&w.params, token, 0);
        let place = PlaceState::new(
            PLACE + w.places.len() as u64,
            sk,
            cert,
            Location::for_zone(zone, 9),
            VALIDATOR,
            w.kdc.pk,
            86_400_000,
            500,
        );
        let actor = place.actor;
        w.authority.register_place(&place.pk, actor);
        w.validator.learn_place(&place.pk);
        w.places.insert(actor, place);
        actor
    }

    /// Instant in-order delivery, enough to drive handshakes in tests.
    fn pump(w: &mut TestWorld, now: u64, from: ActorId, batch: Vec<Outgoing>) {
        let mut queue: VecDeque<(ActorId, Outgoing)> =
            batch.into_iter().map(|o| (from, o)).collect();
        while let Some((src, o)) = queue.pop_front() {
            let replies = if o.to == KDC {
                w.kdc.handle(&w.params, now, src, o.phase, o.frame)
            } else if o.to == VALIDATOR {
                w.validator.handle(&w.params, now, src, o.phase, o.frame)
            } else if o.to == AUTHORITY {
                let keys = w
                    .users
                    .get(&src)
                    .map(|u| u.history.clone())
                    .unwrap_or_default();
                match o.frame {
                    Frame::TracingUpload { group } => {
                        w.authority.handle_upload(&w.params, now, src, &group, &keys)
                    }
                    Frame::PlaceWindowRecords { group } => {
                        w.authority.handle_place_records(&w.params, now, src, group)
                    }
                    _ => Vec::new(),
                }
            } else if let Some(p) = w.places.get_mut(&o.to) {
                p.handle(&w.params, now, src, o.phase, o.frame)
            } else if let Some(u) = w.users.get_mut(&o.to) {
                u.handle(&w.params, now, src, o.phase, o.frame)
            } else {
                Vec::new()
            };
            let dst = o.to;
            queue.extend(replies.into_iter().map(|r| (dst, r)));
        }
    }

    fn run_contact(w: &mut TestWorld, now: u64, a: ActorId, b: ActorId) {
        let batch = w.users.get_mut(&a).unwrap().start_contact(b);
        pump(w, now, a, batch);
    }

    fn run_visit(w: &mut TestWorld, now: u64, user: ActorId, place: ActorId) {
        let loc = w.places[&place].location;
        let batch = w.users.get_mut(&user).unwrap().start_visit(place, loc);
        pump(w, now, user, batch);
    }

    /// Writes a status block straight into the validator's replica, as if
    /// consensus had already committed it.
    fn seed_status(w: &mut TestWorld, infected: &[PublicKey], suspected: &[PublicKey]) {
        let prev = w.validator.status_ledger.head_hash();
        let block = build_status_block(
            &w.params,
            &w.validator.sk,
            VALIDATOR,
            prev,
            1,
            infected,
            suspected,
            true,
        )
        .unwrap();
        w.validator.status_ledger.append(block).unwrap();
    }

    #[test]
    fn contact_handshake_stores_mutual_proofs() {
        let mut w = world(2);
        let (a, b) = (USER_BASE, USER_BASE + 1);
        run_contact(&mut w, 5_000, a, b);

        let ua = &w.users[&a];
        let ub = &w.users[&b];
        assert_eq!(ua.records.len(), 1);
        assert_eq!(ub.records.len(), 1);
        // Each party holds a proof naming itself, signed by the other.
        assert_eq!(ua.records[0].msg.subject, ua.pk);
        assert_eq!(ua.records[0].cert.subject, ub.pk);
        assert_eq!(ub.records[0].msg.subject, ub.pk);
        assert_eq!(ub.records[0].cert.subject, ua.pk);
        assert!(ua.notes.iter().any(|n| matches!(n, Note::ContactStored { peer } if *peer == b)));
        // Sessions cleaned up.
        assert!(w.users[&a].contacts.is_empty());
        assert!(w.users[&b].contacts.is_empty());
    }

    #[test]
    fn contact_aborts_against_flagged_peer() {
        let mut w = world(2);
        let (a, b) = (USER_BASE, USER_BASE + 1);
        let b_pk = w.users[&b].pk;
        seed_status(&mut w, &[b_pk], &[]);

        run_contact(&mut w, 5_000, a, b);
        assert!(w.users[&a].records.is_empty());
        assert!(w.users[&b].records.is_empty());
        assert!(w.users[&a].notes.iter().any(
            |n| matches!(n, Note::ContactAborted { peer, reason } if *peer == b && *reason == "peer flagged infected")
        ));
    }

    #[test]
    fn contact_rejects_expired_certificate() {
        let mut w = world(2);
        let (a, b) = (USER_BASE, USER_BASE + 1);
        // Run the handshake after every certificate has lapsed.
        let late = 86_400_001;
        run_contact(&mut w, late, a, b);
        assert!(w.users[&a].records.is_empty());
        assert!(w.users[&b].records.is_empty());
        assert!(w.users[&a]
            .notes
            .iter()
            .any(|n| matches!(n, Note::ContactAborted { reason, .. } if *reason == "invalid certificate")));
    }

    #[test]
    fn place_denies_suspected_user() {
        let mut w = world(1);
        let place = add_place(&mut w, 7);
        let u = USER_BASE;
        let u_pk = w.users[&u].pk;
        seed_status(&mut w, &[], &[u_pk]);

        run_visit(&mut w, 10_000, u, place);
        assert!(w.users[&u].records.is_empty());
        assert!(w.places[&place].visit_log.is_empty());
        assert!(w.places[&place].notes.iter().any(
            |n| matches!(n, Note::Admission { user, admitted, .. } if *user == u && !admitted)
        ));
        assert!(w.users[&u]
            .notes
            .iter()
            .any(|n| matches!(n, Note::VisitDenied { place: p } if *p == place)));
    }

    #[test]
    fn place_admits_clear_user_and_both_log_proofs() {
        let mut w = world(1);
        let place = add_place(&mut w, 7);
        let u = USER_BASE;
        run_visit(&mut w, 10_000, u, place);

        let user = &w.users[&u];
        let venue = &w.places[&place];
        assert_eq!(user.records.len(), 1);
        assert_eq!(user.records[0].msg.subject, user.pk);
        assert_eq!(user.records[0].cert.subject, venue.pk);
        assert_eq!(user.records[0].msg.location.zone(), 7);
        assert_eq!(venue.visit_log.len(), 1);
        assert_eq!(venue.visit_log[0].msg.subject, venue.pk);
        assert_eq!(venue.visit_log[0].cert.subject, user.pk);
        assert!(venue.notes.iter().any(
            |n| matches!(n, Note::Admission { user: who, admitted, .. } if *who == u && *admitted)
        ));
    }

    #[test]
    fn renewal_rotates_keys_until_resolution_blocks_it() {
        let mut w = world(1);
        let u = USER_BASE;
        let first_pk = w.users[&u].pk;

        let batch = w.users.get_mut(&u).unwrap().start_renew(KDC);
        pump(&mut w, 1_000, u, batch);
        let second_pk = w.users[&u].pk;
        assert_ne!(first_pk, second_pk);
        assert_eq!(w.users[&u].history, vec![first_pk, second_pk]);

        // Resolution lists the old key: owner gets blocked, latest key
        // comes back.
        let out = w.kdc.handle(
            &w.params,
            2_000,
            VALIDATOR,
            Phase::StatusUpdate,
            Frame::KeyListRequest {
                keys: vec![first_pk],
            },
        );
        match &out[0].frame {
            Frame::KeyListResponse { keys } => assert_eq!(keys[0], Some(second_pk)),
            other => panic!("unexpected reply {other:?}"),
        }

        let batch = w.users.get_mut(&u).unwrap().start_renew(KDC);
        pump(&mut w, 3_000, u, batch);
        assert_eq!(w.users[&u].pk, second_pk, "blocked identity kept its key");
        assert!(w.users[&u]
            .notes
            .iter()
            .any(|n| matches!(n, Note::RenewOutcome { ok: false })));

        // A negative test clears the identity: resolution stops naming the
        // keys and renewal works again.
        w.kdc.set_cleared([1; 8], true);
        let out = w.kdc.handle(
            &w.params,
            4_000,
            VALIDATOR,
            Phase::StatusUpdate,
            Frame::KeyListRequest {
                keys: vec![first_pk],
            },
        );
        match &out[0].frame {
            Frame::KeyListResponse { keys } => assert_eq!(keys[0], None),
            other => panic!("unexpected reply {other:?}"),
        }
        let batch = w.users.get_mut(&u).unwrap().start_renew(KDC);
        pump(&mut w, 5_000, u, batch);
        assert_ne!(w.users[&u].pk, second_pk);
    }

    #[test]
    fn authority_accepts_genuine_upload_and_rejects_tampering() {
        let mut w = world(3);
        let (a, b, c) = (USER_BASE, USER_BASE + 1, USER_BASE + 2);
        run_contact(&mut w, 5_000, a, b);
        run_contact(&mut w, 6_000, a, c);
        assert_eq!(w.users[&a].records.len(), 2);

        let uploads =
            w.users
                .get_mut(&a)
                .unwrap()
                .report_infection(&w.params, 20_000, AUTHORITY, 14, 86_400_000, 0, true);
        // Two records, room for fourteen groups: one record per group.
        assert_eq!(uploads.len(), 2);
        let group = match &uploads[0].frame {
            Frame::TracingUpload { group } => group.clone(),
            other => panic!("unexpected frame {other:?}"),
        };

        // Claiming someone else's records outright trips the ownership
        // check; no digest gets burned by a rejected group.
        let eve_keys = w.users[&c].history.clone();
        w.authority
            .handle_upload(&w.params, 19_000, c, &group, &eve_keys);
        assert!(w.authority.notes.iter().any(|n| matches!(
            n,
            Note::UploadJudged { accepted: false, reason, .. }
                if *reason == "record names a key the uploader does not own"
        )));

        pump(&mut w, 20_000, a, uploads);
        assert!(w.authority.notes.iter().any(
            |n| matches!(n, Note::UploadJudged { from, accepted, .. } if *from == a && *accepted)
        ));

        // Verbatim replay dies on the record digests.
        let keys = w.users[&a].history.clone();
        let out = w
            .authority
            .handle_upload(&w.params, 21_000, a, &group, &keys);
        assert!(matches!(
            &out[0].frame,
            Frame::TracingResult { accepted: false }
        ));
        assert!(w.authority.notes.iter().any(
            |n| matches!(n, Note::UploadJudged { accepted: false, reason, .. } if *reason == "replayed record")
        ));

        // Re-stamped records keep the old aggregate, which cannot match.
        let eve_pk = w.users[&c].pk;
        let restamped: Vec<GroupedRecord> = group
            .records()
            .iter()
            .map(|r| GroupedRecord {
                msg: ProofMessage {
                    subject: eve_pk,
                    time: 22_000,
                    location: r.msg.location,
                },
                cert: r.cert,
            })
            .collect();
        let forged = RecordGroup::new(restamped, *group.aggregate()).unwrap();
        w.authority
            .handle_upload(&w.params, 22_000, c, &forged, &eve_keys);
        assert!(w.authority.notes.iter().any(
            |n| matches!(n, Note::UploadJudged { accepted: false, reason, .. } if *reason == "aggregate signature check failed")
        ));
    }

    #[test]
    fn place_visit_triggers_window_request_and_indirect_evidence() {
        let mut w = world(2);
        let place = add_place(&mut w, 7);
        let (a, b) = (USER_BASE, USER_BASE + 1);
        run_visit(&mut w, 10_000, a, place);
        run_visit(&mut w, 11_000, b, place);
        assert_eq!(w.places[&place].visit_log.len(), 2);

        let uploads =
            w.users
                .get_mut(&a)
                .unwrap()
                .report_infection(&w.params, 30_000, AUTHORITY, 14, 86_400_000, 0, true);
        pump(&mut w, 30_000, a, uploads);

        // The venue's window answer flows back through the authority to the
        // validator, flagging the other visitor.
        let b_pk = w.users[&b].pk;
        let (infected, suspected) = w.validator.evidence_counts();
        assert_eq!(infected, 1, "uploader only");
        assert_eq!(suspected, 2, "both visitors signed in the window");
        assert!(w.validator.suspected.contains_key(&b_pk.to_bytes()));
        assert!(w
            .validator
            .infected
            .contains_key(&w.users[&a].pk.to_bytes()));
        // The venue key itself never enters the evidence store.
        assert!(!w
            .validator
            .suspected
            .contains_key(&w.places[&place].pk.to_bytes()));
    }

    #[test]
    fn update_plan_resolves_and_drops_cleared_keys() {
        let mut w = world(3);
        let (a, b, c) = (USER_BASE, USER_BASE + 1, USER_BASE + 2);
        run_contact(&mut w, 5_000, a, b);
        run_contact(&mut w, 6_000, a, c);
        let uploads =
            w.users
                .get_mut(&a)
                .unwrap()
                .report_infection(&w.params, 20_000, AUTHORITY, 14, 86_400_000, 0, true);
        pump(&mut w, 20_000, a, uploads);

        let batch = w.validator.begin_update(KDC).expect("no update in flight");
        assert!(w.validator.update_pending());
        let sent = match &batch[0].frame {
            Frame::KeyListRequest { keys } => keys.clone(),
            other => panic!("unexpected frame {other:?}"),
        };
        assert_eq!(sent.len(), 3);
        // Second call while pending stays silent.
        assert!(w.validator.begin_update(KDC).is_none());

        // The service clears b (negative test) before answering.
        w.kdc.set_cleared([2; 8], true);
        let reply = w
            .kdc
            .handle(&w.params, 21_000, VALIDATOR, Phase::StatusUpdate, Frame::KeyListRequest { keys: sent })
            .remove(0);
        let resolved = match reply.frame {
            Frame::KeyListResponse { keys } => keys,
            other => panic!("unexpected frame {other:?}"),
        };
        let plan = w.validator.finish_update(&resolved).expect("plan");
        assert!(!w.validator.update_pending());

        let a_pk = w.users[&a].pk;
        let b_pk = w.users[&b].pk;
        let c_pk = w.users[&c].pk;
        assert_eq!(plan.infected, vec![a_pk]);
        assert!(plan.suspected.contains(&c_pk));
        assert!(!plan.suspected.contains(&b_pk), "cleared key dropped");
        assert!(!plan.suspected.contains(&a_pk), "infected wins overlap");
        let total: u16 = plan.zones.iter().map(|z| z.infected + z.suspected).sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn follower_validation_bounds_claims_by_own_evidence() {
        let mut w = world(2);
        let (a, b) = (USER_BASE, USER_BASE + 1);
        run_contact(&mut w, 5_000, a, b);
        let uploads =
            w.users
                .get_mut(&a)
                .unwrap()
                .report_infection(&w.params, 20_000, AUTHORITY, 14, 86_400_000, 0, true);
        pump(&mut w, 20_000, a, uploads);

        let a_pk = w.users[&a].pk;
        let b_pk = w.users[&b].pk;
        let stranger = crypto::keygen(&w.params, 777).1;

        let mk = |w: &TestWorld,
                  infected: &[PublicKey],
                  suspected: &[PublicKey],
                  prev: BlockHash| {
            crate::wire::ProposedBlock::Status(
                build_status_block(
                    &w.params,
                    &w.validator.sk,
                    VALIDATOR,
                    prev,
                    30_000,
                    infected,
                    suspected,
                    false,
                )
                .unwrap(),
            )
        };

        let honest = mk(&w, &[a_pk], &[b_pk], [0u8; 28]);
        let overclaim = mk(&w, &[a_pk, stranger], &[b_pk], [0u8; 28]);
        let bad_prev = mk(&w, &[a_pk], &[b_pk], [9u8; 28]);
        let first = match &honest {
            crate::wire::ProposedBlock::Status(b) => b.clone(),
            _ => unreachable!(),
        };
        let second = mk(&w, &[a_pk], &[b_pk], first.hash());

        assert!(w.validator.validate_block(&w.params, &[], &honest));
        assert!(!w.validator.validate_block(&w.params, &[], &overclaim));
        assert!(!w.validator.validate_block(&w.params, &[], &bad_prev));

        // Chained off the log prefix rather than genesis.
        let prior = vec![crate::wire::LogEntry {
            term: 1,
            block: honest.clone(),
        }];
        assert!(w.validator.validate_block(&w.params, &prior, &second));
        assert!(!w.validator.validate_block(&w.params, &prior, &honest));
    }
}
