//! End-to-end runs of the bundled scenario presets.

use icsim_core::engine::World;
use icsim_core::ledger::KeyStatus;
use icsim_core::scenario::presets;

#[test]
fn demo_runs_are_deterministic() {
    let a = World::new(presets::demo()).unwrap().run();
    let b = World::new(presets::demo()).unwrap().run();
    assert_eq!(a.trace.digest(), b.trace.digest());
    assert_eq!(a.events_log, b.events_log);
    assert_eq!(a.trace.len(), b.trace.len());
    assert!(a.trace.len() > 1_000, "consensus alone sends thousands");

    let mut other = presets::demo();
    other.seed = 2;
    let c = World::new(other).unwrap().run();
    assert_ne!(a.trace.digest(), c.trace.digest());
}

#[test]
fn demo_traces_the_infection_through_contacts_and_recovery() {
    let report = World::new(presets::demo()).unwrap().run();
    let layout = report.layout.clone();

    // One report, three single-record groups, all accepted.
    let accepted: Vec<_> = report.uploads.iter().filter(|u| u.accepted).collect();
    assert_eq!(accepted.len(), 3);
    assert!(accepted.iter().all(|u| u.from == layout.user(0)));
    assert!(report.uploads.iter().all(|u| u.accepted));

    // Two update rounds, each committing one status and one zone block.
    assert_eq!(report.status_blocks, 2);
    assert_eq!(report.zone_blocks, 2);

    // The reporter ends up infected; its direct contact user 2 stays
    // suspected. User 1 was suspected too but cleared by the negative test
    // before the second update.
    assert_eq!(
        report.final_infected.iter().copied().collect::<Vec<_>>(),
        vec![layout.user(0)]
    );
    assert_eq!(
        report.final_suspected.iter().copied().collect::<Vec<_>>(),
        vec![layout.user(2)]
    );

    // While flagged, user 1 is refused entry; afterwards its own query
    // comes back clean.
    let denial = report
        .admissions
        .iter()
        .find(|a| !a.admitted)
        .expect("one denial");
    assert_eq!(denial.user, layout.user(1));
    assert_eq!(denial.place, layout.place(1));
    assert_eq!(denial.reason, "flagged close contact");
    assert!(report
        .admissions
        .iter()
        .any(|a| a.admitted && a.user == layout.user(7) && a.place == layout.place(1)));

    let mid_queries: Vec<_> = report
        .queries
        .iter()
        .filter(|q| q.owner == Some(layout.user(1)) && q.asker == layout.user(1))
        .collect();
    assert_eq!(mid_queries.len(), 2);
    assert_eq!(mid_queries[0].status, KeyStatus::Suspected);
    assert_eq!(mid_queries[0].expected, KeyStatus::Suspected);
    assert_eq!(mid_queries[1].status, KeyStatus::NotFound);
    assert_eq!(mid_queries[1].expected, KeyStatus::NotFound);

    // Every answer in this run agrees with the exact sets behind the block.
    assert_eq!(report.false_positives, 0);
    assert!(report.queries.iter().all(|q| !q.false_positive));
}

#[test]
fn adversary_suite_rejects_every_attack_with_no_false_suspects() {
    let report = World::new(presets::adversary_suite()).unwrap().run();
    let layout = report.layout.clone();

    let adversary_uploads: Vec<_> = report
        .uploads
        .iter()
        .filter(|u| u.from == layout.adversary)
        .collect();
    assert_eq!(adversary_uploads.len(), 3);
    assert!(adversary_uploads.iter().all(|u| !u.accepted));
    let reasons: Vec<&str> = adversary_uploads.iter().map(|u| u.reason).collect();
    assert_eq!(
        reasons,
        vec![
            "aggregate signature check failed",
            "replayed record",
            "aggregate signature check failed",
        ]
    );

    // The one honest upload still lands.
    let honest: Vec<_> = report.uploads.iter().filter(|u| u.accepted).collect();
    assert_eq!(honest.len(), 1);
    assert_eq!(honest[0].from, layout.user(0));

    // Nobody the adversary named ends up flagged: the chain carries only
    // the genuine reporter and its genuine contact.
    assert_eq!(
        report.final_infected.iter().copied().collect::<Vec<_>>(),
        vec![layout.user(0)]
    );
    assert_eq!(
        report.final_suspected.iter().copied().collect::<Vec<_>>(),
        vec![layout.user(1)]
    );
    for victim in [2, 3, 4] {
        let actor = layout.user(victim);
        assert!(!report.final_infected.contains(&actor));
        assert!(!report.final_suspected.contains(&actor));
        let own: Vec<_> = report
            .queries
            .iter()
            .filter(|q| q.asker == actor && q.owner == Some(actor))
            .collect();
        assert!(!own.is_empty(), "victim {victim} checked its own status");
        assert!(own
            .iter()
            .all(|q| q.status == KeyStatus::NotFound && q.expected == KeyStatus::NotFound));
    }
    assert!(report.queries.iter().all(|q| !q.false_positive));

    // Blocklisting kills renewal but not a still-valid credential: user 7
    // keeps its single key generation and is admitted on status alone.
    let blocked = report
        .users
        .iter()
        .find(|u| u.actor == layout.user(7))
        .unwrap();
    assert_eq!(blocked.keys.len(), 1);
    assert!(report
        .events_log
        .iter()
        .any(|l| l.contains("user 7 was refused a renewal")));
    assert!(report
        .admissions
        .iter()
        .any(|a| a.admitted && a.user == layout.user(7)));
}
