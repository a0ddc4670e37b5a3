//! The manifest ties a run directory together: what ran, what the trace
//! hashed to, and which validator keys signed the chains.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use icsim_core::crypto::PublicKey;
use icsim_core::engine::RunReport;
use icsim_core::ledger::ZonePolicy;

#[derive(Serialize, Deserialize)]
pub struct ValidatorEntry {
    pub actor: u64,
    pub key: String,
}

#[derive(Serialize, Deserialize)]
pub struct PolicyEntry {
    pub infected_weight: f64,
    pub suspected_weight: f64,
    pub threshold_orange: f64,
    pub threshold_red: f64,
}

#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub trace_digest: String,
    pub frames: u64,
    pub status_blocks: u64,
    pub zone_blocks: u64,
    pub zone_policy: PolicyEntry,
    pub validators: Vec<ValidatorEntry>,
}

impl Manifest {
    pub fn from_report(report: &RunReport) -> Self {
        Manifest {
            scenario: report.scenario.clone(),
            seed: report.seed,
            duration_ms: report.duration_ms,
            trace_digest: hex::encode(report.trace.digest()),
            frames: report.trace.len() as u64,
            status_blocks: report.status_blocks as u64,
            zone_blocks: report.zone_blocks as u64,
            zone_policy: PolicyEntry {
                infected_weight: report.zone_policy.infected_weight,
                suspected_weight: report.zone_policy.suspected_weight,
                threshold_orange: report.zone_policy.threshold_orange,
                threshold_red: report.zone_policy.threshold_red,
            },
            validators: report
                .validator_keys
                .iter()
                .map(|(actor, pk)| ValidatorEntry {
                    actor: *actor,
                    key: hex::encode(pk.to_bytes()),
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("encoding manifest")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing manifest")
    }

    pub fn zone_policy(&self) -> ZonePolicy {
        ZonePolicy {
            infected_weight: self.zone_policy.infected_weight,
            suspected_weight: self.zone_policy.suspected_weight,
            threshold_orange: self.zone_policy.threshold_orange,
            threshold_red: self.zone_policy.threshold_red,
        }
    }

    /// Leader id to public key, as recorded at run time.
    pub fn resolve_validator(&self, actor: u64) -> Option<PublicKey> {
        let entry = self.validators.iter().find(|v| v.actor == actor)?;
        let bytes: [u8; 29] = hex::decode(&entry.key).ok()?.try_into().ok()?;
        PublicKey::from_bytes(&bytes).ok()
    }
}
