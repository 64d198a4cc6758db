//! Whole-simulation invariants checked on small randomized clusters.

use std::collections::{BTreeMap, BTreeSet};

use pdsim_core::config::RunConfig;
use pdsim_core::gateway::GatewayPolicy;
use pdsim_core::workload::RequestStatus;
use pdsim_core::{run, RunOutput, SimOptions};
use proptest::prelude::*;

#[allow(clippy::too_many_arguments)]
fn small_config(
    seed: u64,
    n_p: u32,
    n_d: u32,
    b_p: u32,
    b_d: u32,
    rate: f64,
    ttft: f64,
    tpot: f64,
    on_demand: bool,
    slo_ms: f64,
) -> RunConfig {
    let policy = if on_demand { "on_demand" } else { "baseline" };
    let text = format!(
        r#"
name = "inv"
seed = {seed}
duration = 60.0
warmup = 10.0
drain = 20.0

[model]
hidden_size = 256
num_layers = 4
bytes_per_elem = 2
tp_degree = 1

[[scenarios]]
name = "s"
prompt_len = [[256, 0.5], [1024, 0.5]]
output_len = [[16, 0.5], [48, 0.5]]
prefixes = [{{ name = "sys", len = 32 }}]
ttft_slo_ms = {slo_ms}
e2e_timeout_ms = 30000.0

[profiles.s]
ttft_ms = [[1, {ttft}], [{b_p2}, {ttft_hi}]]
tpot_ms = [[1, {tpot}], [{b_d2}, {tpot_hi}]]
prefix_benefit = 0.9

[[groups]]
name = "g"
scenarios = ["s"]
n_prefill = {n_p}
n_decode = {n_d}
batch_prefill = {b_p}
batch_decode = {b_d}

[[traffic.slots]]
start = 0.0
rates = {{ s = {rate} }}

[gateway]
policy = "{policy}"
retry_interval_ms = 2.0
"#,
        b_p2 = b_p.max(2),
        ttft_hi = ttft * 1.5,
        b_d2 = b_d.max(2),
        tpot_hi = tpot * 1.5,
    );
    RunConfig::from_toml(&text).unwrap()
}

fn check_outcomes(out: &RunOutput) -> Result<(), TestCaseError> {
    let r = &out.report;
    prop_assert!(r.violations.is_empty(), "violations: {:?}", r.violations);
    prop_assert_eq!(r.engine.order_violations, 0);
    let mut ids = BTreeSet::new();
    for o in &out.outcomes {
        prop_assert!(ids.insert(o.id), "duplicate outcome {}", o.id);
        prop_assert!(o.status.is_terminal());
        prop_assert!(o.finish >= o.arrival);
        prop_assert!((o.e2e - (o.finish - o.arrival)).abs() < 1e-9);
        if o.status == RequestStatus::Done {
            let (tp, td) = (o.tp.unwrap(), o.td.unwrap());
            prop_assert!(tp > 0.0 && td > 0.0);
            prop_assert!((tp + td - o.e2e).abs() < 1e-6, "tp {} + td {} != e2e {}", tp, td, o.e2e);
            prop_assert!(o.transfer.unwrap() <= td + 1e-9);
            prop_assert!(o.attempts >= 1);
        }
        if o.ok {
            prop_assert_eq!(o.status, RequestStatus::Done);
        }
    }
    prop_assert_eq!(out.outcomes.len() as u64 + r.unfinished, r.requests);
    let s = &r.summary;
    prop_assert!(s.ok <= s.terminal && s.terminal <= s.arrivals + r.requests);
    prop_assert!(s.goodput <= s.throughput + 1e-12);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    /// Random small clusters never trip the simulator's internal checks, and
    /// every finished request has a consistent timeline.
    #[test]
    fn random_clusters_are_consistent(
        seed in 0u64..1000,
        n_p in 1u32..4,
        n_d in 1u32..4,
        b_p in 1u32..4,
        b_d in 1u32..16,
        rate in 0.5f64..40.0,
        ttft in 20.0f64..300.0,
        tpot in 5.0f64..40.0,
        on_demand in any::<bool>(),
        slo_ms in 200.0f64..5000.0,
    ) {
        let cfg = small_config(seed, n_p, n_d, b_p, b_d, rate, ttft, tpot, on_demand, slo_ms);
        let out = run(&cfg, SimOptions::default()).unwrap();
        check_outcomes(&out)?;
    }

    /// Prefills cannot start requests faster than their batch capacity allows.
    #[test]
    fn admissions_respect_prefill_capacity(
        seed in 0u64..1000,
        n_p in 1u32..4,
        b_p in 1u32..4,
        ttft in 50.0f64..300.0,
    ) {
        let cfg = small_config(seed, n_p, 4, b_p, 32, 200.0, ttft, 10.0, true, 20_000.0);
        let out = run(&cfg, SimOptions::default()).unwrap();
        check_outcomes(&out)?;
        let cap = out.report.analytic[0].estimate.unwrap().prefill_capacity;
        let prefilled = out.outcomes.iter().filter(|o| o.tp.is_some()).count() as f64;
        // The first batches of every prefill can finish early on cache hits.
        let slack = f64::from(n_p * b_p);
        let horizon = out.report.end;
        prop_assert!(prefilled <= cap * horizon + slack, "{} prefills vs capacity {}", prefilled, cap * horizon);
    }
}

const TWO_GROUPS: &str = r#"
name = "isolation"
seed = 5
duration = 60.0
warmup = 10.0

[model]
hidden_size = 256
num_layers = 4
bytes_per_elem = 2
tp_degree = 1

[[scenarios]]
name = "chat"
prompt_len = [[256, 1.0]]
output_len = [[16, 1.0]]
ttft_slo_ms = 2000.0
e2e_timeout_ms = 20000.0

[[scenarios]]
name = "code"
prompt_len = [[1024, 1.0]]
output_len = [[32, 1.0]]
ttft_slo_ms = 4000.0
e2e_timeout_ms = 20000.0

[profiles.chat]
ttft_ms = [[1, 40.0], [2, 60.0]]
tpot_ms = [[1, 10.0], [16, 15.0]]
prefix_benefit = 1.0

[profiles.code]
ttft_ms = [[1, 120.0], [2, 180.0]]
tpot_ms = [[1, 12.0], [16, 18.0]]
prefix_benefit = 1.0

[[groups]]
name = "a"
scenarios = ["chat"]
n_prefill = 1
n_decode = 1
batch_prefill = 2
batch_decode = 16

[[groups]]
name = "b"
scenarios = ["code"]
n_prefill = 2
n_decode = 1
batch_prefill = 2
batch_decode = 16

[[traffic.slots]]
start = 0.0
rates = { chat = 10.0, code = 4.0 }
"#;

#[test]
fn requests_stay_inside_their_scenario_group() {
    for policy in [GatewayPolicy::Baseline, GatewayPolicy::OnDemand] {
        let mut cfg = RunConfig::from_toml(TWO_GROUPS).unwrap();
        cfg.gateway.policy = policy;
        let out = run(&cfg, SimOptions::default()).unwrap();
        assert!(out.report.violations.is_empty(), "{:?}", out.report.violations);
        let expected: BTreeMap<u32, &str> = [(0, "a"), (1, "b")].into();
        let mut seen = BTreeMap::<u32, u64>::new();
        for o in &out.outcomes {
            if let Some(g) = &o.group {
                assert_eq!(g, expected[&o.scenario], "request {} of scenario {}", o.id, o.scenario);
                *seen.entry(o.scenario).or_default() += 1;
            }
        }
        assert!(seen[&0] > 300 && seen[&1] > 100, "{seen:?}");
        let names: Vec<&str> = out.report.scenarios.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["chat", "code"]);
    }
}

#[test]
fn seeds_change_the_trace_but_not_the_contract() {
    let a = run(&small_config(1, 2, 2, 2, 8, 10.0, 100.0, 20.0, true, 2000.0), SimOptions::default()).unwrap();
    let b = run(&small_config(2, 2, 2, 2, 8, 10.0, 100.0, 20.0, true, 2000.0), SimOptions::default()).unwrap();
    assert_ne!(a.frame.to_csv(), b.frame.to_csv());
    assert!(a.report.violations.is_empty() && b.report.violations.is_empty());
    let again = run(&small_config(1, 2, 2, 2, 8, 10.0, 100.0, 20.0, true, 2000.0), SimOptions::default()).unwrap();
    assert_eq!(a.frame.to_csv(), again.frame.to_csv());
    assert_eq!(a.report_json(), again.report_json());
}
