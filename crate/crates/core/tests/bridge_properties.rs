use proptest::prelude::*;

use wplc::bridge::{BridgeConfig, PlcBridge, Simulation, SystemConfig};
use wplc::btlink::{encode_frame, ChannelModel};
use wplc::electrical::{RelayConfig, SettleAction};
use wplc::ladder::parse_program;
use wplc::netmodels::{network_spec, Network};

fn lossless() -> SystemConfig {
    SystemConfig {
        bridge: BridgeConfig::default(),
        channel: ChannelModel {
            network: network_spec(Network::Bluetooth, None).unwrap(),
            loss: 0.0,
            jitter_us: 0,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lossless_link_converges_exactly(
        steps in prop::collection::vec((0u64..40_000, 0u8..8, any::<bool>()), 1..30),
        seed in any::<u64>(),
    ) {
        let program = parse_program("LD X0\nOUT Y1").unwrap();
        let mut sim = Simulation::new(lossless(), program, seed).unwrap();
        let mut t = 0;
        for (gap, switch, on) in steps {
            t += gap;
            sim.advance_to(t).unwrap();
            sim.set_switch(switch, on).unwrap();
        }
        sim.advance_to(t + 200_000).unwrap();
        let snap = sim.snapshot();
        prop_assert_eq!(snap.field_state, snap.switches);
        prop_assert_eq!(snap.inputs, snap.switches);
        prop_assert_eq!(snap.relays, snap.switches);
        prop_assert_eq!(snap.outputs, (snap.switches & 1) << 1);
        prop_assert_eq!(snap.link_stats.dropped, 0);
    }

    #[test]
    fn duplicate_frames_never_move_coils(
        history in prop::collection::vec((any::<u8>(), any::<u8>(), 0u64..20_000), 0..12),
        image in any::<u8>(),
        seq in any::<u8>(),
        gap in 0u64..20_000,
    ) {
        let mut bridge = PlcBridge::new(RelayConfig::default());
        let mut now = 0;
        for (img, s, dt) in history {
            now += dt;
            bridge.plc_step(&encode_frame(img, s), now).unwrap();
        }
        now += 1;
        bridge.plc_step(&encode_frame(image, seq), now).unwrap();
        let coils = bridge.coil_mask();
        let stale_before = bridge.stats().stale;

        let again = bridge.plc_step(&encode_frame(image, seq), now + gap).unwrap();
        prop_assert!(again.stale);
        prop_assert_eq!(bridge.stats().stale, stale_before + 1);
        prop_assert_eq!(bridge.coil_mask(), coils);
        prop_assert!(again.settle.iter().all(|a| *a == SettleAction::None));
    }
}
