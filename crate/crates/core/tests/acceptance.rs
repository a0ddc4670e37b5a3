//! Release gate: one test per headline claim, each printing a single
//! PASS line with the measured numbers (run with --nocapture to see them).

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use icsim_core::bloom::{self, BloomFilter};
use icsim_core::crypto::{
    aggregate, aggregate_verify, issue_certificate, keygen, sign, verify, GroupParams, PublicKey,
    Signature,
};
use icsim_core::engine::World;
use icsim_core::ledger::{build_status_block, build_zone_block, KeyStatus, ZoneRecord};
use icsim_core::metrics::CostModel;
use icsim_core::raft::harness::{Cluster, PartitionWindow};
use icsim_core::raft::{ProposedBlock, RaftConfig};
use icsim_core::scenario::{
    presets, Action, LinkConfig, Policy, Population, ScenarioConfig, ScriptEvent,
};
use icsim_core::wire::{Frame, GroupedRecord, Location, Nonce, ProofMessage, RecordGroup, SignedRecord};

/// Grouped evidence uploads cost 136 bytes per record plus 56 per group;
/// lone records cost 192 each. Checked against the actual frames of a
/// six-reporter sweep (50 to 300 contacts), run both ways.
#[test]
fn grouped_uploads_match_the_byte_model() {
    let started = Instant::now();
    let grouped = World::new(presets::tracing_sweep()).unwrap().run();
    let mut single_cfg = presets::tracing_sweep();
    single_cfg.policy.aggregation = false;
    let single = World::new(single_cfg).unwrap().run();

    for r in 0..6u32 {
        let n = 50 * (r as usize + 1);
        let reporter = grouped.layout.user(r);
        let grouped_bytes: usize = grouped
            .frame_log
            .iter()
            .filter(|f| f.src == reporter && matches!(f.frame, Frame::TracingUpload { .. }))
            .map(|f| f.frame.nominal_len().unwrap())
            .sum();
        let per_group = n.div_ceil(14);
        let groups = n.div_ceil(per_group);
        assert_eq!(grouped_bytes, 136 * n + 56 * groups, "grouped, n={n}");

        let single_bytes: usize = single
            .frame_log
            .iter()
            .filter(|f| f.src == reporter && matches!(f.frame, Frame::RecordUpload { .. }))
            .map(|f| f.frame.nominal_len().unwrap())
            .sum();
        assert_eq!(single_bytes, 192 * n, "single, n={n}");
    }

    let grouped_300 = 136 * 300 + 56 * 14;
    let single_300 = 192 * 300;
    assert_eq!(grouped_300, 41_584);
    assert_eq!(single_300, 57_600);
    let saved = 1.0 - grouped_300 as f64 / single_300 as f64;
    assert!(saved >= 0.27, "saved only {:.3}", saved);
    assert!(started.elapsed() < Duration::from_secs(60));
    println!(
        "PASS upload bytes: grouped 41584 B vs single 57600 B at 300 records ({:.1}% saved), all six reporters exact",
        100.0 * saved
    );
}

/// Verifying one aggregate over M records costs M+1 pairings instead of
/// 2M, so a batch of N records checks out almost twice as fast.
#[test]
fn grouped_verification_halves_the_pairing_time() {
    let model = CostModel::default();
    let n = 300.0_f64;
    let per_group = (n / 14.0).ceil();
    let grouped_ms = (n / per_group) * model.aggregate_verify_ms(per_group as u64);
    let single_ms = 2.0 * n * model.pairing_ms;
    let saved = 100.0 * (1.0 - grouped_ms / single_ms);
    assert!(
        (saved - 48.0).abs() <= 1.0,
        "saved {saved:.2}% (grouped {grouped_ms:.1} ms, single {single_ms:.1} ms)"
    );
    println!(
        "PASS verify time: {:.1} ms grouped vs {:.1} ms single for 300 records ({:.1}% saved)",
        grouped_ms, single_ms, saved
    );
}

/// A status block that publishes two filters instead of raw key lists
/// shrinks by more than 95% at realistic set sizes.
#[test]
fn filter_blocks_compress_the_key_sets() {
    let params = GroupParams::new();
    let (leader_sk, _) = keygen(&params, 3);
    let infected: Vec<PublicKey> = (0..3_000).map(|i| keygen(&params, 10_000 + i).1).collect();
    let suspected: Vec<PublicKey> = (0..4_000).map(|i| keygen(&params, 50_000 + i).1).collect();

    let filters = build_status_block(
        &params, &leader_sk, 0, [0u8; 28], 1, &infected, &suspected, true,
    )
    .unwrap();
    let keys = build_status_block(
        &params, &leader_sk, 0, [0u8; 28], 1, &infected, &suspected, false,
    )
    .unwrap();

    assert_eq!(filters.chain_size(), 8_850);
    assert_eq!(keys.chain_size(), 203_100);
    let saved = 1.0 - filters.chain_size() as f64 / keys.chain_size() as f64;
    assert!(saved >= 0.95, "saved only {:.3}", saved);
    println!(
        "PASS block size: 8850 B filtered vs 203100 B raw for 7000 keys ({:.1}% saved)",
        100.0 * saved
    );
}

/// Every protocol frame encodes to its fixed budget: the contact and
/// access handshakes, the evidence uploads, and the ledger traffic.
#[test]
fn frame_sizes_match_their_budgets() {
    let params = GroupParams::new();
    let (issuer_sk, _) = keygen(&params, 1);
    let (sk, pk) = keygen(&params, 2);
    let cert = issue_certificate(&params, &issuer_sk, &pk, 0, 86_400_000).unwrap();
    let sig = sign(&params, &sk, b"budget probe");
    let nonce = Nonce([9, 8, 7, 6, 5]);
    let msg = ProofMessage {
        subject: pk,
        time: 11,
        location: Location::for_zone(2, 40),
    };

    // Proximity handshake and proof exchange.
    assert_eq!(Frame::ContactNonce { nonce }.nominal_len(), Some(5));
    assert_eq!(
        Frame::ContactAuthReply { cert, sig, nonce }.nominal_len(),
        Some(154)
    );
    assert_eq!(
        Frame::ContactAuthFinish { cert, sig }.nominal_len(),
        Some(149)
    );
    assert_eq!(Frame::StatusQuery { pk }.nominal_len(), Some(29));
    assert_eq!(Frame::ContactProof { msg, sig }.nominal_len(), Some(99));
    assert_eq!(Frame::VisitProof { msg, sig }.nominal_len(), Some(99));

    // Gated entry runs the same handshake under different frame kinds.
    assert_eq!(Frame::AccessNonce { nonce }.nominal_len(), Some(5));
    assert_eq!(
        Frame::AccessAuthReply { cert, sig, nonce }.nominal_len(),
        Some(154)
    );
    assert_eq!(
        Frame::AccessAuthFinish { cert, sig }.nominal_len(),
        Some(149)
    );

    // Evidence uploads: 192 per lone record, 136m + 56 per group.
    let record = SignedRecord { msg, cert, sig };
    assert_eq!(Frame::RecordUpload { record }.nominal_len(), Some(192));
    for m in [1usize, 14, 22] {
        let sigs: Vec<Signature> = (0..m).map(|i| sign(&params, &sk, &[i as u8])).collect();
        let agg = aggregate(&params, &sigs).unwrap();
        let group = RecordGroup::new(vec![GroupedRecord { msg, cert }; m], agg).unwrap();
        assert_eq!(
            Frame::TracingUpload { group }.nominal_len(),
            Some(136 * m + 56)
        );
    }

    // Status publication: 29 bytes per key requested, filter payload on
    // the block, 6 per zone row, 29 per query, 2 per zone query.
    for v in [1usize, 6, 40] {
        let req = Frame::KeyListRequest {
            keys: vec![pk; v],
        };
        assert_eq!(req.nominal_len(), Some(29 * v));
    }
    let (n1, n2) = (40usize, 24usize);
    let infected: Vec<PublicKey> = (0..n1).map(|i| keygen(&params, 300 + i as u64).1).collect();
    let suspected: Vec<PublicKey> = (0..n2).map(|i| keygen(&params, 700 + i as u64).1).collect();
    let block = build_status_block(
        &params, &sk, 0, [0u8; 28], 1, &infected, &suspected, true,
    )
    .unwrap();
    let entry = icsim_core::raft::LogEntry {
        term: 1,
        block: ProposedBlock::Status(block),
    };
    let frame = Frame::AppendEntries {
        term: 1,
        leader: 0,
        prev_log_index: 0,
        prev_log_term: 0,
        leader_commit: 0,
        entry: Some(entry),
    };
    assert_eq!(frame.nominal_len(), Some((10 * n1 + 10 * n2) / 8));

    for z in [1usize, 2, 9] {
        let rows: Vec<ZoneRecord> = (0..z)
            .map(|i| ZoneRecord {
                zone: i as u16,
                infected: 1,
                suspected: 2,
            })
            .collect();
        let zb = build_zone_block(&params, &sk, 0, [0u8; 28], 1, rows).unwrap();
        let frame = Frame::AppendEntries {
            term: 1,
            leader: 0,
            prev_log_index: 0,
            prev_log_term: 0,
            leader_commit: 0,
            entry: Some(icsim_core::raft::LogEntry {
                term: 1,
                block: ProposedBlock::Zone(zb),
            }),
        };
        assert_eq!(frame.nominal_len(), Some(6 * z));
    }
    assert_eq!(Frame::ZoneQuery { zone: 3 }.nominal_len(), Some(2));

    println!(
        "PASS frame sizes: handshake 5/154/149/29, proofs 99, uploads 192 and 136m+56, key lists 29 each, filters 10 bits per key, zones 6 each, zone query 2"
    );
}

/// The handset cost model: mutual authentication comes to 12.6 ms per
/// side, a ledger probe 0.29 ms, a proof check 6.3 ms, and filter
/// construction 0.29 ms per key.
#[test]
fn step_costs_follow_the_operation_model() {
    let model = CostModel::default();
    let auth_ms = model.sign_ms() + 2.0 * model.verify_ms();
    assert!((auth_ms - 12.6).abs() <= 0.1, "auth {auth_ms}");
    let probe_ms = model.bloom_probe_ms(5);
    assert!((probe_ms - 0.29).abs() < 1e-9, "probe {probe_ms}");
    let proof_ms = model.verify_ms();
    assert!((proof_ms - 6.3).abs() <= 0.1, "proof {proof_ms}");
    for n in [70u64, 700, 7_000] {
        let build = model.filter_build_ms(n, 5);
        assert!(
            (build - 0.29 * n as f64).abs() < 1e-6,
            "build({n}) = {build}"
        );
    }
    println!(
        "PASS step costs: auth {:.3} ms, probe {:.2} ms, proof check {:.3} ms, filter build 0.29 ms/key",
        auth_ms, probe_ms, proof_ms
    );
}

/// With 10 bits and 5 index hashes per key, the measured false-positive
/// rate stays within three standard errors of the closed-form rate.
#[test]
fn filter_false_positive_rate_matches_the_formula() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(60);
    let mut line = String::from("PASS filter fp rate:");
    for n in [100u32, 1_000] {
        let mut filter = BloomFilter::new(n).unwrap();
        assert_eq!(filter.bit_count(), 10 * n);
        assert_eq!(filter.hash_count(), 5);
        for _ in 0..n {
            let mut key = [0u8; 29];
            rng.fill_bytes(&mut key[1..]);
            filter.insert(&key);
        }
        let trials = 200_000u32;
        let mut hits = 0u32;
        for _ in 0..trials {
            let mut probe = [1u8; 29];
            rng.fill_bytes(&mut probe[1..]);
            if filter.contains(&probe) {
                hits += 1;
            }
        }
        let measured = hits as f64 / trials as f64;
        let predicted = bloom::predict_fp(10 * n, 5, n);
        let se = (predicted * (1.0 - predicted) / trials as f64).sqrt();
        assert!(
            (measured - predicted).abs() <= 3.0 * se,
            "n={n}: measured {measured:.5}, predicted {predicted:.5}, se {se:.6}"
        );
        line.push_str(&format!(
            " n={n} measured {measured:.5} vs predicted {predicted:.5} over {trials} probes;"
        ));
    }
    assert!(started.elapsed() < Duration::from_secs(60));
    println!("{line}");
}

/// Signature scheme guarantees: honest signatures always verify, honest
/// aggregates of any size up to 64 verify, a single corrupted member
/// breaks the aggregate, and aggregation order never matters.
#[test]
fn signature_scheme_completeness_and_soundness() {
    let params = GroupParams::new();
    let mut rng = ChaCha20Rng::seed_from_u64(70);

    for i in 0..100u64 {
        let (sk, pk) = keygen(&params, 7_000 + i);
        let mut msg = vec![0u8; 1 + (i as usize % 64)];
        rng.fill_bytes(&mut msg);
        let sig = sign(&params, &sk, &msg);
        assert!(verify(&params, &pk, &msg, &sig), "case {i}");
        assert!(!verify(&params, &pk, b"something else", &sig), "case {i}");
    }

    let members: Vec<_> = (0..64u64).map(|i| keygen(&params, 8_000 + i)).collect();
    let msgs: Vec<Vec<u8>> = (0..64).map(|i| format!("record {i}").into_bytes()).collect();
    let sigs: Vec<Signature> = members
        .iter()
        .zip(&msgs)
        .map(|((sk, _), m)| sign(&params, sk, m))
        .collect();
    let pairs: Vec<(&PublicKey, &[u8])> = members
        .iter()
        .zip(&msgs)
        .map(|((_, pk), m)| (pk, m.as_slice()))
        .collect();
    for m in 1..=64usize {
        let agg = aggregate(&params, &sigs[..m]).unwrap();
        assert!(aggregate_verify(&params, &pairs[..m], &agg), "size {m}");
    }

    // One bad member poisons the whole aggregate.
    let m = 16;
    let mut corrupted = sigs[..m].to_vec();
    corrupted[5] = sign(&params, &members[5].0, b"not the claimed record");
    let bad = aggregate(&params, &corrupted).unwrap();
    assert!(!aggregate_verify(&params, &pairs[..m], &bad));
    // Swapping two claimed messages breaks it just the same.
    let good = aggregate(&params, &sigs[..m]).unwrap();
    let mut swapped = pairs[..m].to_vec();
    swapped.swap(3, 11);
    assert!(!aggregate_verify(&params, &swapped, &good));

    // Order independence: sum of signatures and product of pairings.
    let mut order: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let shuffled_sigs: Vec<Signature> = order.iter().map(|&i| sigs[i]).collect();
    assert_eq!(aggregate(&params, &shuffled_sigs).unwrap(), good);
    let shuffled_pairs: Vec<(&PublicKey, &[u8])> = order.iter().map(|&i| pairs[i]).collect();
    assert!(aggregate_verify(&params, &shuffled_pairs, &good));

    println!(
        "PASS signatures: 100 sign/verify cases, aggregates of 1..=64, corrupt-one soundness, order independence"
    );
}

/// Consensus under partitions: across 1000 seeded runs of a five-node
/// cluster split at random, no term ever has two leaders, the majority
/// side commits, the minority side never does, and the cluster converges
/// once healed.
#[test]
fn consensus_stays_safe_across_random_partitions() {
    let started = Instant::now();
    let params = GroupParams::new();
    let (sk, _) = keygen(&params, 88);
    for seed in 0..1_000u64 {
        let block = ProposedBlock::Zone(
            build_zone_block(
                &params,
                &sk,
                0,
                [0u8; 28],
                seed,
                vec![ZoneRecord {
                    zone: (seed % 9_000) as u16,
                    infected: 1,
                    suspected: 0,
                }],
            )
            .unwrap(),
        );
        let mut cluster = Cluster::new(5, RaftConfig::default(), seed);
        let mut rng = ChaCha20Rng::seed_from_u64(0xD15C0 ^ seed);
        let mut ids: Vec<u64> = (0..5).collect();
        for i in (1..5).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        let cut = rng.gen_range(1..=4usize);
        let group_a: Vec<u64> = ids[..cut].to_vec();
        let group_b: Vec<u64> = ids[cut..].to_vec();
        let (majority, minority) = if cut >= 3 {
            (&group_a, &group_b)
        } else {
            (&group_b, &group_a)
        };
        cluster.set_partitions(vec![PartitionWindow {
            from_ms: 0,
            to_ms: 4_000,
            group_a: group_a.clone(),
        }]);
        cluster.propose_at(1_000, block);

        // While split: the harness itself fails the run on a double
        // leader or commit divergence.
        cluster.run_until(3_900).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        for &node in minority {
            assert!(
                cluster.committed(node).is_empty(),
                "seed {seed}: minority node {node} committed"
            );
        }
        for &node in majority {
            assert_eq!(
                cluster.committed(node).len(),
                1,
                "seed {seed}: majority node {node} missing the commit"
            );
        }

        // Healed: everyone converges on the same single entry.
        cluster.run_until(9_000).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        for node in 0..5 {
            assert_eq!(
                cluster.committed(node).len(),
                1,
                "seed {seed}: node {node} did not converge"
            );
        }
        assert!(!cluster.leaders_by_term().is_empty(), "seed {seed}");
    }
    assert!(started.elapsed() < Duration::from_secs(60));
    println!(
        "PASS consensus: 1000 seeded partition runs, single leader per term, majority-only commits, convergence after heal ({}s)",
        started.elapsed().as_secs()
    );
}

/// Full-protocol guarantees on real runs: every scripted contact of a
/// reporter ends up flagged, every forged or replayed upload bounces
/// without creating a false suspect, every flagged key is refused entry,
/// and no frame ever carries a real identity or links two of a user's
/// keys.
#[test]
fn end_to_end_tracing_attacks_access_and_anonymity() {
    // (a) Tracing completeness: six reporters, 300 distinct peers, every
    // peer flagged after the sweep.
    let sweep = World::new(presets::tracing_sweep()).unwrap().run();
    let reporters: BTreeSet<_> = (0..6).map(|i| sweep.layout.user(i)).collect();
    let peers: BTreeSet<_> = (6..306).map(|i| sweep.layout.user(i)).collect();
    assert_eq!(sweep.final_infected, reporters);
    assert_eq!(sweep.final_suspected, peers);
    assert_eq!(sweep.false_positives, 0);

    // (b) Panic-attack rejection: forged, replayed and re-stamped uploads
    // all bounce; the only suspect is the one real contact.
    let attack = World::new(presets::adversary_suite()).unwrap().run();
    let adversary_uploads: Vec<_> = attack
        .uploads
        .iter()
        .filter(|u| u.from == attack.layout.adversary)
        .collect();
    assert_eq!(adversary_uploads.len(), 3);
    assert!(adversary_uploads.iter().all(|u| !u.accepted));
    assert_eq!(
        attack.final_infected,
        BTreeSet::from([attack.layout.user(0)])
    );
    assert_eq!(
        attack.final_suspected,
        BTreeSet::from([attack.layout.user(1)])
    );
    for victim in [2, 3, 4] {
        let actor = attack.layout.user(victim);
        assert!(!attack.final_infected.contains(&actor), "victim {victim}");
        assert!(!attack.final_suspected.contains(&actor), "victim {victim}");
    }

    // (c) Access control: after one infection and an update, the
    // infected key and both contact keys are all turned away.
    let gate = ScenarioConfig {
        name: "gate-check".into(),
        seed: 5,
        duration_ms: 30_000,
        population: Population {
            users: 3,
            places: 1,
            validators: 5,
            zones: 1,
        },
        policy: Policy {
            upload_jitter_ms: 2_000,
            ..Policy::default()
        },
        link: LinkConfig::default(),
        partitions: Vec::new(),
        events_file: None,
        events: vec![
            ScriptEvent { at_ms: 1_000, action: Action::Contact { a: 0, b: 1 } },
            ScriptEvent { at_ms: 2_000, action: Action::Contact { a: 0, b: 2 } },
            ScriptEvent { at_ms: 5_000, action: Action::ReportInfected { user: 0 } },
            ScriptEvent { at_ms: 12_000, action: Action::StatusUpdate },
            ScriptEvent { at_ms: 20_000, action: Action::Visit { user: 0, place: 0 } },
            ScriptEvent { at_ms: 21_000, action: Action::Visit { user: 1, place: 0 } },
            ScriptEvent { at_ms: 22_000, action: Action::Visit { user: 2, place: 0 } },
        ],
    };
    let gated = World::new(gate).unwrap().run();
    assert_eq!(gated.admissions.len(), 3);
    for adm in &gated.admissions {
        assert!(!adm.admitted, "user actor {} got in", adm.user);
    }
    let denied: BTreeSet<_> = gated.admissions.iter().map(|a| a.user).collect();
    assert_eq!(denied, (0..3).map(|i| gated.layout.user(i)).collect());
    assert!(gated
        .admissions
        .iter()
        .any(|a| a.user == gated.layout.user(0) && a.reason == "flagged infected"));
    assert_eq!(
        gated
            .admissions
            .iter()
            .filter(|a| a.reason == "flagged close contact")
            .count(),
        2
    );

    // (d) Anonymity: no frame of a busy run contains a registration
    // token, and no frame carries two keys of the same user.
    let demo = World::new(presets::demo()).unwrap().run();
    assert!(!demo.tokens.is_empty());
    let multi_key_users: Vec<Vec<[u8; 29]>> = demo
        .users
        .iter()
        .filter(|u| u.keys.len() >= 2)
        .map(|u| u.keys.iter().map(|k| k.to_bytes()).collect())
        .collect();
    assert!(
        !multi_key_users.is_empty(),
        "run never rotated a key, scan would be vacuous"
    );
    for sent in &demo.frame_log {
        let bytes = sent.frame.encode();
        for token in &demo.tokens {
            assert!(
                !bytes.windows(token.len()).any(|w| w == token),
                "token bytes surfaced in a {:?} frame at {} ms",
                sent.frame.kind(),
                sent.time
            );
        }
        for keys in &multi_key_users {
            let linked = keys
                .iter()
                .filter(|k| bytes.windows(29).any(|w| w == &k[..]))
                .count();
            assert!(
                linked <= 1,
                "a {:?} frame at {} ms links {} keys of one user",
                sent.frame.kind(),
                sent.time,
                linked
            );
        }
    }

    println!(
        "PASS end-to-end: sweep flagged 6 reporters and all 300 contacts, 3 attack uploads bounced with zero false suspects, 3 flagged keys denied entry, no identity bytes or key links in {} frames",
        demo.frame_log.len()
    );
}
