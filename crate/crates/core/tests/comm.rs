use distzo::comm::{
    execute_offload, execute_upload, plan_naive_upload, plan_pipelined_upload, plan_sliced_offload, plan_sliced_upload,
    simulate_plan, slice_speedup, t_comm, HostLinkModel, LinkTopology, PeerModel, SliceLayout,
};
use distzo::Error;
use proptest::prelude::*;

fn per_device(host: f64, peer: f64, lat: f64, n: usize) -> LinkTopology {
    LinkTopology::new(host, peer, lat, n)
        .unwrap()
        .with_host_link(HostLinkModel::PerDevice)
}

#[test]
fn formula_matches_simulation_per_phase_latency() {
    let m = 8 * 3 * 5 * 7 * 1024;
    let topologies = [(1.0, 3.0, 0.0), (4.0e9, 24.0e9, 5.0e-6), (2.0e9, 50.0e9, 1.0e-5)];
    for (host, peer, lat) in topologies {
        for n in [1usize, 2, 4, 8] {
            let topo = per_device(host, peer, lat, n);
            let layout = SliceLayout::new(0, m, n).unwrap();
            let sim = simulate_plan(&plan_sliced_upload(&layout, &topo).unwrap(), &topo).unwrap();
            let formula = t_comm(m as f64, n, &topo);
            let phases = if n == 1 { 1.0 } else { 2.0 };
            let excess = sim.makespan - formula;
            assert!(excess >= -1e-12 * formula, "n={n}: sim below formula");
            assert!(excess <= phases * lat + 1e-12 * formula, "n={n}: excess {excess}");
        }
    }
}

#[test]
fn naive_upload_serializes_on_shared_host_link() {
    for n in [1usize, 2, 4, 8] {
        let topo = LinkTopology::new(2.0, 12.0, 0.0, n).unwrap();
        let layout = SliceLayout::new(0, 96, n).unwrap();
        let tl = simulate_plan(&plan_naive_upload(&layout, &topo).unwrap(), &topo).unwrap();
        assert_eq!(tl.makespan, n as f64 * 96.0 / 2.0);
    }
}

#[test]
fn speedup_trend_at_peer_ratio_six() {
    let topo = LinkTopology::new(1.0, 6.0, 0.0, 4).unwrap();
    let s = slice_speedup(4 * 1024, &topo).unwrap();
    assert!((s.upload() - 4.0 / (1.0 + 3.0 / 24.0)).abs() < 1e-12);
    assert!((s.offload() - 4.0).abs() < 1e-12);
}

#[test]
fn peer_models_order_makespans() {
    let base = per_device(1.0, 3.0, 0.0, 4);
    let layout = SliceLayout::new(0, 12, 4).unwrap();
    let span = |t: LinkTopology| simulate_plan(&plan_sliced_upload(&layout, &t).unwrap(), &t).unwrap().makespan;
    let full = span(base.with_peer_model(PeerModel::FullBisection));
    let ports = span(base);
    let bus = span(base.with_peer_model(PeerModel::SharedBus));
    assert_eq!((full, ports, bus), (4.0, 6.0, 3.0 + 12.0));
    let pipelined = simulate_plan(&plan_pipelined_upload(&layout, &base).unwrap(), &base).unwrap();
    assert!(pipelined.makespan <= ports);
}

#[test]
fn zero_devices_is_config_error() {
    assert!(matches!(SliceLayout::new(0, 10, 0), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn sliced_beats_naive_when_peer_is_faster(
        m in 1usize..4096, n in 2usize..9, host in 0.5f64..8.0, ratio in 1.05f64..16.0,
        shared in any::<bool>(),
    ) {
        let mut topo = LinkTopology::new(host, host * ratio, 0.0, n).unwrap();
        if !shared {
            topo = topo.with_host_link(HostLinkModel::PerDevice);
        }
        let layout = SliceLayout::new(0, m * n, n).unwrap();
        let sliced = plan_sliced_upload(&layout, &topo).unwrap();
        let naive = plan_naive_upload(&layout, &topo).unwrap();
        prop_assert_eq!(sliced.host_volume(), m * n);
        prop_assert_eq!(sliced.peer_volume(), (n - 1) * m * n);
        prop_assert_eq!(naive.host_volume(), n * m * n);
        let a = simulate_plan(&sliced, &topo).unwrap().makespan;
        let b = simulate_plan(&naive, &topo).unwrap().makespan;
        prop_assert!(a < b);
    }

    #[test]
    fn ragged_blocks_round_trip(m in 0usize..200, n in 1usize..9) {
        let topo = LinkTopology::new(1.0, 4.0, 0.1, n).unwrap();
        let block: Vec<f64> = (0..m).map(|i| i as f64 - 7.5).collect();
        let layout = SliceLayout::new(1, m, n).unwrap();
        let copies = execute_upload(&plan_sliced_upload(&layout, &topo).unwrap(), &block).unwrap();
        prop_assert!(copies.iter().all(|c| c == &block));
        let views: Vec<&[f64]> = copies.iter().map(|c| c.as_slice()).collect();
        let back = execute_offload(&plan_sliced_offload(&layout, &topo).unwrap(), &views).unwrap();
        prop_assert_eq!(back, block);
    }
}
