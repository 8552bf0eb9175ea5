//! Experiment-level behaviour of the harness.

use openvlc_core::harness::scenario::ScenarioSpec;
use openvlc_core::harness::{analytic_throughput_kbps, run_flood, run_ping, run_scenario};
use openvlc_core::sim::SimDuration;

fn quiet(payload: usize, t_end: f64) -> ScenarioSpec {
    let mut s = ScenarioSpec::two_node(payload, t_end);
    s.channel.noise_sigma = 0.0;
    s
}

#[test]
fn unloaded_pings_have_equal_rtts() {
    let out = run_ping(&quiet(1000, 1.0), 2.0, 20, 10).unwrap();
    let rtts = out.report.rtts_ms();
    assert_eq!(rtts.len(), 20);
    let spread = rtts.last().unwrap() - rtts[0];
    assert!(spread <= 0.020, "spread {spread} ms");
}

#[test]
fn noiseless_flood_series_is_flat_at_the_oracle() {
    let spec = quiet(1000, 1.0);
    let out = run_flood(&spec, 1000, 60.0).unwrap();
    let want = analytic_throughput_kbps(&spec.mac.to_params(), SimDuration::from_micros(2), 1000);
    let f = &out.report.flows[0];
    assert_eq!(f.interval_kbps.len(), 6);
    for kbps in &f.interval_kbps {
        assert!((kbps - want).abs() / want < 0.02, "{kbps} vs {want}");
    }
    assert_eq!(f.duplicates, 0);
}

#[test]
fn goodput_never_exceeds_transmitted_bits() {
    let mut spec = quiet(500, 30.0);
    spec.channel.noise_sigma = 0.08;
    spec.nodes[1].position = Some([1.0, 0.0, 0.0]);
    let out = run_scenario(&spec).unwrap();
    let c = &out.report.counters[0].counters;
    let f = &out.report.flows[0];
    assert!(c.retx > 0, "noise should force retransmissions");
    assert!(f.delivered_bytes <= c.tx_data * 500);
    assert!(f.delivered_bytes <= c.acked * 500 + 500);
}

#[test]
fn lone_uplink_source_matches_a_single_flow() {
    let mut spec = quiet(1000, 60.0);
    spec.nodes.push(openvlc_core::harness::scenario::NodeSpec {
        id: 3,
        address: 3,
        position: Some([0.3, 0.5, 0.0]),
        gain_row: None,
        ambient: None,
        noise_sigma: None,
    });
    let single = run_flood(&spec, 1000, 60.0).unwrap().report.flows[0].mean_kbps;
    let mut lone = spec.clone();
    let mut flow = openvlc_core::harness::scenario::FlowSpec::saturation(2, 1, 1000);
    flow.kind = openvlc_core::harness::scenario::FlowKind::Flood;
    lone.traffic = vec![flow];
    let got = run_scenario(&lone).unwrap().report.flows[0].mean_kbps;
    assert!((got - single).abs() / single < 0.02, "{got} vs {single}");
}
