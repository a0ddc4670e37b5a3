//! Independent re-check of a run directory. Nothing here trusts the
//! summary: the trace is re-hashed, the traffic table re-derived, and both
//! chains re-walked hash by hash with the leader signatures verified
//! against the manifest's validator keys.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use icsim_core::crypto::GroupParams;
use icsim_core::ledger::{StatusLedger, ZoneLedger};
use icsim_core::metrics::CommReport;
use icsim_core::simnet::Trace;

use crate::manifest::Manifest;

pub fn cmd_verify(dir: &Path) -> Result<()> {
    let manifest_text = fs::read_to_string(dir.join("manifest.toml"))
        .with_context(|| format!("reading {}/manifest.toml", dir.display()))?;
    let manifest = Manifest::from_toml(&manifest_text)?;
    println!(
        "manifest: scenario {} seed {} ({} validators)",
        manifest.scenario,
        manifest.seed,
        manifest.validators.len()
    );

    let trace_bytes = fs::read(dir.join("trace.bin")).context("reading trace.bin")?;
    let Some(trace) = Trace::from_bytes(&trace_bytes) else {
        bail!("trace.bin is malformed");
    };
    if trace.len() as u64 != manifest.frames {
        bail!(
            "trace holds {} frames, manifest says {}",
            trace.len(),
            manifest.frames
        );
    }
    let digest = hex::encode(trace.digest());
    if digest != manifest.trace_digest {
        bail!(
            "trace digest mismatch: computed {digest}, manifest {}",
            manifest.trace_digest
        );
    }
    println!("trace: {} frames, digest {} ok", trace.len(), &digest[..16]);

    let comm = CommReport::from_trace(&trace).to_csv();
    let stored = fs::read_to_string(dir.join("comm.csv")).context("reading comm.csv")?;
    if comm != stored {
        bail!("comm.csv does not match the traffic re-derived from the trace");
    }
    println!("traffic accounting: re-derived from trace, matches");

    let params = GroupParams::new();
    let resolve = |id: u64| manifest.resolve_validator(id);

    let status_text =
        fs::read_to_string(dir.join("status_chain.txt")).context("reading status_chain.txt")?;
    let status = StatusLedger::from_hex_lines(&status_text)
        .map_err(|e| anyhow::anyhow!("status chain: {e}"))?;
    if status.len() as u64 != manifest.status_blocks {
        bail!(
            "status chain holds {} blocks, manifest says {}",
            status.len(),
            manifest.status_blocks
        );
    }
    status
        .verify_chain(&params, resolve)
        .map_err(|e| anyhow::anyhow!("status chain: {e}"))?;
    println!(
        "status chain: {} blocks, hash links and leader signatures ok",
        status.len()
    );

    let zone_text =
        fs::read_to_string(dir.join("zone_chain.txt")).context("reading zone_chain.txt")?;
    let zone = ZoneLedger::from_hex_lines(&zone_text, manifest.zone_policy())
        .map_err(|e| anyhow::anyhow!("zone chain: {e}"))?;
    if zone.len() as u64 != manifest.zone_blocks {
        bail!(
            "zone chain holds {} blocks, manifest says {}",
            zone.len(),
            manifest.zone_blocks
        );
    }
    zone.verify_chain(&params, resolve)
        .map_err(|e| anyhow::anyhow!("zone chain: {e}"))?;
    println!(
        "zone chain: {} blocks, hash links and leader signatures ok",
        zone.len()
    );

    println!("verify: all checks passed");
    Ok(())
}
