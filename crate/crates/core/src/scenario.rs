//! Run configuration: population, policy knobs, link behavior and the
//! event script, loaded from TOML.
//!
//! Scenarios are fully declarative. The same file plus the same seed gives
//! the same run, byte for byte.

use crate::simnet::ActorId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("could not parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: u64,
    pub population: Population,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub partitions: Vec<PartitionConfig>,
    /// Path of a second TOML file with more `[[events]]`, relative to this
    /// file. Loaded by [`ScenarioConfig::from_path`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events_file: Option<String>,
    #[serde(default)]
    pub events: Vec<ScriptEvent>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    pub users: u32,
    #[serde(default)]
    pub places: u32,
    #[serde(default = "default_validators")]
    pub validators: u32,
    #[serde(default = "default_zones")]
    pub zones: u16,
}

fn default_validators() -> u32 {
    5
}

fn default_zones() -> u16 {
    4
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    /// Ceiling on how many groups one evidence upload is split into; group
    /// size becomes M = ceil(N / upload_groups), one group per retention
    /// day at the default.
    pub upload_groups: u32,
    pub credential_lifetime_ms: u64,
    /// How far around a visit a place considers other visitors exposed.
    pub contamination_window_ms: u64,
    /// Upload starts a uniform 0..=jitter after the report event.
    pub upload_jitter_ms: u64,
    /// Evidence older than this is refused during tracing.
    pub evidence_window_ms: u64,
    pub infected_weight: f64,
    pub suspected_weight: f64,
    pub zone_orange_threshold: f64,
    pub zone_red_threshold: f64,
    /// Off: every record travels alone with its own signature.
    pub aggregation: bool,
    /// Off: status blocks carry raw key lists instead of filters.
    pub bloom: bool,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            upload_groups: 14,
            credential_lifetime_ms: 86_400_000,
            contamination_window_ms: 4 * 3_600_000,
            upload_jitter_ms: 21_600_000,
            evidence_window_ms: 14 * 86_400_000,
            infected_weight: 1.0,
            suspected_weight: 0.5,
            zone_orange_threshold: 10.0,
            zone_red_threshold: 50.0,
            aggregation: true,
            bloom: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub latency_ms: (u64, u64),
    pub loss: f64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            latency_ms: (5, 20),
            loss: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub from_ms: u64,
    pub to_ms: u64,
    pub group_a: BTreeSet<ActorId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    #[serde(default)]
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

/// Everything a script can make the world do. Indexes are zero-based
/// within their population (user 0 is the first user, place 0 the first
/// place), not raw actor ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Full proximity handshake and proof exchange between two users.
    Contact { a: u32, b: u32 },
    /// Access-controlled entry: handshake, status check, verdict, and on
    /// admission a visit-proof exchange.
    Visit { user: u32, place: u32 },
    /// The user tests positive and uploads its stored evidence.
    ReportInfected { user: u32 },
    /// The validator leader resolves latest keys and commits fresh status
    /// and zone blocks.
    StatusUpdate,
    /// The user asks a validator for a key's current status (their own).
    QueryStatus { user: u32 },
    QueryZone { user: u32, zone: u16 },
    /// The user rotates to a fresh key pair and certificate.
    Renew { user: u32 },
    /// The key service blocklists the user; renewals are refused.
    BlockUser { user: u32 },
    /// A certified negative test: the key service clears the user's key
    /// chain and resumes renewals; the next status update drops the keys.
    TestNegative { user: u32 },
    /// The adversary fabricates evidence against the listed users and
    /// uploads it without owning their keys.
    ForgeUpload { victims: Vec<u32> },
    /// The adversary re-sends a previously overheard evidence upload
    /// verbatim.
    ReplayUpload,
    /// The adversary re-stamps overheard records to look fresh and
    /// uploads them.
    RestampUpload,
}

/// Where each population lives in the flat actor-id space.
///
/// The key service is actor 0 and the health authority actor 1;
/// validators, places and users follow in that order, and the last id is
/// reserved for the adversary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActorLayout {
    pub kdc: ActorId,
    pub authority: ActorId,
    pub validators: Range<ActorId>,
    pub places: Range<ActorId>,
    pub users: Range<ActorId>,
    pub adversary: ActorId,
}

impl ActorLayout {
    pub fn new(p: &Population) -> Self {
        let v0 = 2u64;
        let p0 = v0 + p.validators as u64;
        let u0 = p0 + p.places as u64;
        let end = u0 + p.users as u64;
        ActorLayout {
            kdc: 0,
            authority: 1,
            validators: v0..p0,
            places: p0..u0,
            users: u0..end,
            adversary: end,
        }
    }

    pub fn actor_count(&self) -> u64 {
        self.adversary + 1
    }

    pub fn user(&self, index: u32) -> ActorId {
        let id = self.users.start + index as u64;
        assert!(self.users.contains(&id), "user index {index} out of range");
        id
    }

    pub fn place(&self, index: u32) -> ActorId {
        let id = self.places.start + index as u64;
        assert!(self.places.contains(&id), "place index {index} out of range");
        id
    }

    pub fn validator(&self, index: u32) -> ActorId {
        let id = self.validators.start + index as u64;
        assert!(
            self.validators.contains(&id),
            "validator index {index} out of range"
        );
        id
    }

    pub fn is_user(&self, id: ActorId) -> bool {
        self.users.contains(&id)
    }

    pub fn is_place(&self, id: ActorId) -> bool {
        self.places.contains(&id)
    }

    pub fn is_validator(&self, id: ActorId) -> bool {
        self.validators.contains(&id)
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let config: ScenarioConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| ScenarioError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        let mut config: ScenarioConfig = toml::from_str(&read(path)?)?;
        if let Some(extra) = config.events_file.take() {
            let sibling = path.parent().unwrap_or(Path::new(".")).join(extra);
            #[derive(Deserialize)]
            struct EventsFile {
                events: Vec<ScriptEvent>,
            }
            let more: EventsFile = toml::from_str(&read(&sibling)?)?;
            config.events.extend(more.events);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn layout(&self) -> ActorLayout {
        ActorLayout::new(&self.population)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |msg: String| Err(ScenarioError::Invalid(msg));
        if self.name.is_empty() {
            return fail("name must not be empty".into());
        }
        if self.population.users == 0 {
            return fail("population needs at least one user".into());
        }
        if self.population.validators == 0 {
            return fail("population needs at least one validator".into());
        }
        if self.policy.upload_groups == 0 {
            return fail("policy.upload_groups must be at least 1".into());
        }
        if self.policy.credential_lifetime_ms == 0 {
            return fail("policy.credential_lifetime_ms must be positive".into());
        }
        if self.policy.zone_red_threshold < self.policy.zone_orange_threshold {
            return fail("zone thresholds out of order".into());
        }
        if self.policy.infected_weight + self.policy.suspected_weight <= 0.0 {
            return fail("zone weights must sum to a positive value".into());
        }
        if self.link.latency_ms.0 > self.link.latency_ms.1 {
            return fail("link.latency_ms range is inverted".into());
        }
        if !(0.0..=1.0).contains(&self.link.loss) {
            return fail("link.loss must be in [0, 1]".into());
        }
        for w in &self.partitions {
            if w.from_ms >= w.to_ms {
                return fail(format!(
                    "partition window {}..{} is empty",
                    w.from_ms, w.to_ms
                ));
            }
        }
        let p = &self.population;
        let user_ok = |u: u32| u < p.users;
        for (i, e) in self.events.iter().enumerate() {
            if e.at_ms >= self.duration_ms {
                return fail(format!(
                    "event {i} at {} ms is outside the {} ms run",
                    e.at_ms, self.duration_ms
                ));
            }
            let ok = match &e.action {
                Action::Contact { a, b } => user_ok(*a) && user_ok(*b) && a != b,
                Action::Visit { user, place } => user_ok(*user) && *place < p.places,
                Action::ReportInfected { user }
                | Action::QueryStatus { user }
                | Action::Renew { user }
                | Action::BlockUser { user }
                | Action::TestNegative { user } => user_ok(*user),
                Action::QueryZone { user, zone } => user_ok(*user) && *zone < p.zones,
                Action::ForgeUpload { victims } => {
                    !victims.is_empty() && victims.iter().all(|v| user_ok(*v))
                }
                Action::ReplayUpload | Action::RestampUpload | Action::StatusUpdate => true,
            };
            if !ok {
                return fail(format!("event {i} references someone outside the population"));
            }
        }
        Ok(())
    }
}

/// Built-in scenarios, also exported as TOML by the command-line tool.
pub mod presets {
    use super::*;

    /// Small end-to-end tour: contacts, a visit, a positive report, a
    /// status update, queries and a renewal.
    pub fn demo() -> ScenarioConfig {
        let events = vec![
            ev(1_000, Action::Contact { a: 0, b: 1 }),
            ev(2_000, Action::Contact { a: 0, b: 2 }),
            ev(3_000, Action::Contact { a: 1, b: 3 }),
            ev(4_000, Action::Contact { a: 2, b: 4 }),
            ev(5_000, Action::Visit { user: 5, place: 0 }),
            ev(6_000, Action::Visit { user: 0, place: 0 }),
            ev(8_000, Action::Renew { user: 6 }),
            ev(20_000, Action::ReportInfected { user: 0 }),
            ev(60_000, Action::StatusUpdate),
            ev(70_000, Action::QueryStatus { user: 1 }),
            ev(70_000, Action::QueryStatus { user: 3 }),
            ev(71_000, Action::QueryZone { user: 1, zone: 0 }),
            ev(75_000, Action::Visit { user: 1, place: 1 }),
            ev(76_000, Action::Visit { user: 7, place: 1 }),
            // Recovery: a negative test clears the suspect and the next
            // rebuild drops the key.
            ev(85_000, Action::TestNegative { user: 1 }),
            ev(95_000, Action::StatusUpdate),
            ev(110_000, Action::QueryStatus { user: 1 }),
        ];
        ScenarioConfig {
            name: "demo".into(),
            seed: 1,
            duration_ms: 120_000,
            population: Population {
                users: 8,
                places: 2,
                validators: 5,
                zones: 4,
            },
            policy: Policy {
                upload_jitter_ms: 4_000,
                ..Policy::default()
            },
            link: LinkConfig::default(),
            partitions: Vec::new(),
            events_file: None,
            events,
        }
    }

    /// Six reporters with growing contact lists (50 to 300), each turning
    /// infected; sized to read upload cost as a function of contact count.
    pub fn tracing_sweep() -> ScenarioConfig {
        let reporters = 6u32;
        let peers = 300u32;
        let mut events = Vec::new();
        let mut t = 1_000u64;
        for r in 0..reporters {
            let contacts = 50 * (r + 1);
            for c in 0..contacts {
                events.push(ev(t, Action::Contact { a: r, b: reporters + (c % peers) }));
                t += 40;
            }
        }
        let report_start = t + 5_000;
        for r in 0..reporters {
            events.push(ev(report_start + r as u64 * 30_000, Action::ReportInfected { user: r }));
        }
        let update_at = report_start + reporters as u64 * 30_000 + 60_000;
        events.push(ev(update_at, Action::StatusUpdate));
        events.push(ev(update_at + 5_000, Action::QueryStatus { user: reporters }));
        ScenarioConfig {
            name: "tracing-sweep".into(),
            seed: 7,
            duration_ms: update_at + 30_000,
            population: Population {
                users: reporters + peers,
                places: 0,
                validators: 5,
                zones: 4,
            },
            policy: Policy {
                upload_jitter_ms: 4_000,
                ..Policy::default()
            },
            link: LinkConfig::default(),
            partitions: Vec::new(),
            events_file: None,
            events,
        }
    }

    /// Forged, replayed and re-stamped uploads against a healthy
    /// population, plus a blocked user trying to renew and enter a place.
    pub fn adversary_suite() -> ScenarioConfig {
        let mut events = vec![
            ev(1_000, Action::Contact { a: 0, b: 1 }),
            ev(2_000, Action::Contact { a: 2, b: 3 }),
            ev(3_000, Action::Contact { a: 4, b: 5 }),
            ev(5_000, Action::Visit { user: 6, place: 0 }),
            // A legitimate infection to give the adversary something to
            // overhear and replay.
            ev(10_000, Action::ReportInfected { user: 0 }),
            ev(30_000, Action::StatusUpdate),
            // Forgery against users who never met the adversary.
            ev(40_000, Action::ForgeUpload { victims: vec![2, 3, 4] }),
            // Verbatim replay of user 0's upload.
            ev(45_000, Action::ReplayUpload),
            // Same records, fresh timestamps.
            ev(50_000, Action::RestampUpload),
            ev(60_000, Action::StatusUpdate),
            ev(65_000, Action::QueryStatus { user: 2 }),
            ev(65_000, Action::QueryStatus { user: 3 }),
            ev(65_000, Action::QueryStatus { user: 4 }),
            ev(65_000, Action::QueryStatus { user: 5 }),
            // Blocklist flow.
            ev(70_000, Action::BlockUser { user: 7 }),
            ev(71_000, Action::Renew { user: 7 }),
            ev(72_000, Action::Visit { user: 7, place: 0 }),
        ];
        events.sort_by_key(|e| e.at_ms);
        ScenarioConfig {
            name: "adversary-suite".into(),
            seed: 13,
            duration_ms: 90_000,
            population: Population {
                users: 8,
                places: 1,
                validators: 5,
                zones: 2,
            },
            policy: Policy {
                upload_jitter_ms: 2_000,
                ..Policy::default()
            },
            link: LinkConfig::default(),
            partitions: Vec::new(),
            events_file: None,
            events,
        }
    }

    pub fn all() -> Vec<ScenarioConfig> {
        vec![demo(), tracing_sweep(), adversary_suite()]
    }

    fn ev(at_ms: u64, action: Action) -> ScriptEvent {
        ScriptEvent { at_ms, action }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        for preset in presets::all() {
            let text = preset.to_toml_string();
            let back = ScenarioConfig::from_toml_str(&text).unwrap();
            assert_eq!(back.events, preset.events, "{}", preset.name);
            assert_eq!(back.population.users, preset.population.users);
        }
    }

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let text = r#"
            name = "tiny"
            duration_ms = 1000

            [population]
            users = 2

            [[events]]
            at_ms = 10
            action = "contact"
            a = 0
            b = 1
        "#;
        let s = ScenarioConfig::from_toml_str(text).unwrap();
        assert_eq!(s.population.validators, 5);
        assert_eq!(s.policy.upload_groups, 14);
        assert!(s.policy.aggregation);
        assert_eq!(s.link.latency_ms, (5, 20));
        assert_eq!(
            s.events[0].action,
            Action::Contact { a: 0, b: 1 }
        );
    }

    #[test]
    fn validation_catches_bad_references() {
        let text = r#"
            name = "broken"
            duration_ms = 1000

            [population]
            users = 2

            [[events]]
            at_ms = 10
            action = "contact"
            a = 0
            b = 9
        "#;
        assert!(matches!(
            ScenarioConfig::from_toml_str(text),
            Err(ScenarioError::Invalid(_))
        ));

        let text = r#"
            name = "late"
            duration_ms = 1000

            [population]
            users = 2

            [[events]]
            at_ms = 2000
            action = "status_update"
        "#;
        assert!(ScenarioConfig::from_toml_str(text).is_err());

        let text = r#"
            name = "self-contact"
            duration_ms = 1000

            [population]
            users = 2

            [[events]]
            action = "contact"
            a = 1
            b = 1
        "#;
        assert!(ScenarioConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"
            name = "typo"
            duration_ms = 1000
            sede = 4

            [population]
            users = 1
        "#;
        assert!(matches!(
            ScenarioConfig::from_toml_str(text),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn layout_is_contiguous() {
        let p = Population {
            users: 10,
            places: 3,
            validators: 5,
            zones: 4,
        };
        let l = ActorLayout::new(&p);
        assert_eq!(l.kdc, 0);
        assert_eq!(l.authority, 1);
        assert_eq!(l.validators, 2..7);
        assert_eq!(l.places, 7..10);
        assert_eq!(l.users, 10..20);
        assert_eq!(l.adversary, 20);
        assert_eq!(l.actor_count(), 21);
        assert_eq!(l.user(9), 19);
        assert_eq!(l.place(0), 7);
        assert!(l.is_user(10) && !l.is_user(20));
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn layout_rejects_out_of_range_user() {
        let p = Population {
            users: 2,
            places: 0,
            validators: 5,
            zones: 1,
        };
        ActorLayout::new(&p).user(2);
    }

    #[test]
    fn events_file_merges() {
        let dir = std::env::temp_dir().join("icsim-scenario-test");
        std::fs::create_dir_all(&dir).unwrap();
        let events_path = dir.join("extra-events.toml");
        std::fs::write(
            &events_path,
            r#"
                [[events]]
                at_ms = 20
                action = "status_update"
            "#,
        )
        .unwrap();
        let main_path = dir.join("main.toml");
        std::fs::write(
            &main_path,
            r#"
                name = "merged"
                duration_ms = 1000
                events_file = "extra-events.toml"

                [population]
                users = 1

                [[events]]
                at_ms = 10
                action = "status_update"
            "#,
        )
        .unwrap();
        let s = ScenarioConfig::from_path(&main_path).unwrap();
        assert_eq!(s.events.len(), 2);
        assert_eq!(s.events[1].at_ms, 20);
    }

    #[test]
    fn presets_validate() {
        for p in presets::all() {
            p.validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
            assert!(p.layout().actor_count() > 0);
        }
    }
}
