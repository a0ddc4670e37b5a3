//! Cost tables from the calibrated operation model, with an optional
//! wall-clock pass over the real group arithmetic.

use std::time::Instant;

use icsim_core::bloom;
use icsim_core::crypto::{self, GroupParams};
use icsim_core::ledger::BLOCK_HEADER_LEN;
use icsim_core::metrics::CostModel;

pub fn cmd_bench(wall_clock: bool) {
    let model = CostModel::default();
    println!("operation model (ms): pairing {}, hash {}, add {}, mul {}, exp {}",
        model.pairing_ms, model.hash_ms, model.add_ms, model.mul_ms, model.exp_ms);
    println!();
    println!("protocol step costs:");
    println!(
        "  sign a message                      {:>8.3} ms",
        model.sign_ms()
    );
    println!(
        "  verify one signature                {:>8.3} ms",
        model.verify_ms()
    );
    println!(
        "  contact authentication, per party   {:>8.3} ms  (sign + certificate + signature checks)",
        model.sign_ms() + 2.0 * model.verify_ms()
    );
    println!(
        "  ledger probe (one key, both sets)   {:>8.3} ms",
        model.bloom_probe_ms(5)
    );
    println!(
        "  filter build, per key               {:>8.3} ms",
        model.filter_build_ms(1, 5)
    );
    println!();

    println!("evidence upload, N records, groups capped at 14:");
    println!(
        "  {:>4} {:>3} {:>3} {:>9} {:>9} {:>6} {:>10} {:>10} {:>6}",
        "N", "M", "G", "grouped_B", "single_B", "save%", "grouped_ms", "single_ms", "save%"
    );
    for n in (50u64..=300).step_by(50) {
        let m = n.div_ceil(14);
        let g = n.div_ceil(m);
        let grouped_bytes = 136 * n + 56 * g;
        let single_bytes = 192 * n;
        let byte_save = 100.0 * (1.0 - grouped_bytes as f64 / single_bytes as f64);
        // Verification cost over the whole batch: one m+1 pairing check per
        // group against two pairings per lone record. The group count is
        // the real ratio N/M, matching the published accounting.
        let grouped_ms = (n as f64 / m as f64) * (m as f64 + 1.0) * model.pairing_ms;
        let single_ms = 2.0 * n as f64 * model.pairing_ms;
        let ms_save = 100.0 * (1.0 - grouped_ms / single_ms);
        println!(
            "  {n:>4} {m:>3} {g:>3} {grouped_bytes:>9} {single_bytes:>9} {byte_save:>6.1} {grouped_ms:>10.1} {single_ms:>10.1} {ms_save:>6.1}"
        );
    }
    println!();

    println!("status block size, n flagged keys split across both sets:");
    println!(
        "  {:>6} {:>10} {:>10} {:>6}",
        "n", "filters_B", "keylist_B", "save%"
    );
    for n in [70u32, 700, 7000] {
        let half = n / 2;
        let filters = BLOCK_HEADER_LEN + bloom::payload_len(half) + bloom::payload_len(n - half);
        let keys = BLOCK_HEADER_LEN + 29 * n as usize;
        let save = 100.0 * (1.0 - filters as f64 / keys as f64);
        println!("  {n:>6} {filters:>10} {keys:>10} {save:>6.1}");
    }

    if wall_clock {
        println!();
        wall_clock_pass();
    }
}

fn wall_clock_pass() {
    let params = GroupParams::new();
    let (sk, pk) = crypto::keygen(&params, 7);
    let msg = b"wall clock probe";
    let sig = crypto::sign(&params, &sk, msg);

    let t = Instant::now();
    let rounds = 200;
    for _ in 0..rounds {
        assert!(crypto::verify(&params, &pk, msg, &sig));
    }
    let verify_ms = t.elapsed().as_secs_f64() * 1000.0 / rounds as f64;

    let t = Instant::now();
    let signs = 500;
    for _ in 0..signs {
        crypto::sign(&params, &sk, msg);
    }
    let sign_ms = t.elapsed().as_secs_f64() * 1000.0 / signs as f64;

    let members: Vec<_> = (0..64u64).map(|i| crypto::keygen(&params, 100 + i)).collect();
    let msgs: Vec<Vec<u8>> = (0..64).map(|i| format!("m{i}").into_bytes()).collect();
    let sigs: Vec<_> = members
        .iter()
        .zip(&msgs)
        .map(|((sk, _), m)| crypto::sign(&params, sk, m))
        .collect();
    let agg = crypto::aggregate(&params, &sigs).unwrap();
    let pairs: Vec<(&crypto::PublicKey, &[u8])> = members
        .iter()
        .zip(&msgs)
        .map(|((_, pk), m)| (pk, m.as_slice()))
        .collect();
    let t = Instant::now();
    let agg_rounds = 10;
    for _ in 0..agg_rounds {
        assert!(crypto::aggregate_verify(&params, &pairs, &agg));
    }
    let agg_ms = t.elapsed().as_secs_f64() * 1000.0 / agg_rounds as f64;

    println!("wall clock on this machine:");
    println!("  sign                 {sign_ms:>9.3} ms");
    println!("  verify (2 pairings)  {verify_ms:>9.3} ms");
    println!("  aggregate verify, 64 {agg_ms:>9.3} ms  ({:.3} ms per pairing)", agg_ms / 65.0);
    println!("  one pairing          {:>9.3} ms", verify_ms / 2.0);
}
