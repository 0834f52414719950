use pmo::harness::{self, Boundary, HarnessConfig, Outcome, Script};
use pmo::store::Mutation;

const STANDARD: &str = "\
create A 4 k1
attach A w k1
write A 0 0x11
write A 2 0x22
psync A
write A 1 0x33
write A 2 0x44
write A 3 0x55
psync A
detach A
crashpoints all
";

fn standard() -> Script {
    Script::parse(STANDARD).unwrap()
}

#[test]
fn standard_script_has_no_violations() {
    let r = harness::run_exhaustive(&standard(), &HarnessConfig::default()).unwrap();
    assert!(r.exhaustive, "budget too small for exhaustive enumeration");
    assert!(r.violations.is_empty(), "{}", r.violations[0]);
    assert_eq!(r.distinct_states("A"), 3);
    assert!(r.histogram.contains_key(&("A".into(), Boundary::Absent)));
    println!(
        "events={} schedules={} images={}",
        r.events, r.schedules, r.distinct_images
    );
}

#[test]
fn every_mutation_is_caught() {
    for m in Mutation::ALL {
        let cfg = HarnessConfig {
            mutation: Some(m),
            budget: 256,
            allow_sampling: true,
            ..HarnessConfig::default()
        };
        let base = cfg.formatted_image().unwrap();
        let r = harness::run_on_image(&standard(), &cfg, &base).unwrap();
        assert!(r.violation_count > 0, "{m} went undetected");
        let v = r
            .violations
            .iter()
            .find(|v| v.pmo == "A")
            .unwrap_or_else(|| panic!("{m}: no violation about A"));
        assert!(matches!(v.outcome, Outcome::Violation(_)));
        let obs = harness::replay(&standard(), &cfg, &base, &v.schedule).unwrap();
        assert_eq!(
            obs.contents.get("A"),
            v.observed.as_ref(),
            "{m}: replay differs"
        );
    }
}

#[test]
fn minimized_counterexample_is_short() {
    let cfg = HarnessConfig {
        mutation: Some(Mutation::DropFence2),
        budget: 256,
        allow_sampling: true,
        ..HarnessConfig::default()
    };
    let base = cfg.formatted_image().unwrap();
    let small = harness::minimize(&standard(), &cfg, &base);
    assert!(small.steps.len() <= 5, "{small}");
    let r = harness::run_on_image(&small, &cfg, &base).unwrap();
    assert!(r.violation_count > 0);
}

#[test]
fn recovery_is_idempotent_and_crash_consistent() {
    let r = harness::run_recovery_idempotence(&standard(), &HarnessConfig::default()).unwrap();
    assert!(r.mismatches.is_empty(), "{}", r.mismatches[0]);
    assert!(r.images > 1 && r.recovery_schedules > r.images);
    println!(
        "images={} recovery_schedules={}",
        r.images, r.recovery_schedules
    );
}
