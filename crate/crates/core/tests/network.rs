use openvlc_core::channel::ChannelParams;
use openvlc_core::frame::MacFrame;
use openvlc_core::mac::{Datagram, MacParams};
use openvlc_core::net::{Application, NetConfig, Network};
use openvlc_core::sim::SimTime;

struct Saturate {
    payload: usize,
    delivered: usize,
}

impl Application for Saturate {
    fn start(&mut self, net: &mut Network) {
        net.register_protocol(1, 0x11);
        for _ in 0..2 {
            net.send(0, 2, 0x11, vec![0xA5; self.payload]).unwrap();
        }
    }
    fn on_frame_done(&mut self, net: &mut Network, node: usize, _f: &MacFrame, _acked: bool) {
        net.send(node, 2, 0x11, vec![0xA5; self.payload]).unwrap();
    }
    fn on_deliver(&mut self, _net: &mut Network, _node: usize, d: Datagram) {
        self.delivered += d.payload.len();
    }
}

fn oracle_kbps(payload: usize) -> f64 {
    let ts = 20e-6;
    let d = payload + 10;
    let coded = d + 16 * d.div_ceil(200);
    let t_data = (32 + 16 * coded) as f64 * ts;
    let cycle = 16.0 * ts + 2e-6 + t_data + 2e-6 + 448.0 * ts;
    8.0 * payload as f64 / cycle / 1e3
}

#[test]
fn saturation_matches_cycle_formula() {
    for payload in [50usize, 1000] {
        let mut ch = ChannelParams::uniform(2, 1.0);
        ch.noise_sigma = vec![0.0; 2];
        let mut net = Network::new(NetConfig {
            mac: MacParams::default(),
            channel: ch,
            addresses: vec![1, 2],
            seed: 1,
            trace: false,
        })
        .unwrap();
        let mut app = Saturate { payload, delivered: 0 };
        net.run(&mut app, SimTime::from_secs_f64(30.0)).unwrap();
        let kbps = app.delivered as f64 * 8.0 / 30.0 / 1e3;
        let expect = oracle_kbps(payload);
        println!("{payload}: {kbps:.3} vs {expect:.3} {:?}", net.counters(0));
        assert!((kbps - expect).abs() / expect < 0.02);
    }
}
