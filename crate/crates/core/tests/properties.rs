use proptest::prelude::*;

use seqsched::physmodel::{compression_time, snr_and_rate};
use seqsched::scenario::{ChannelRealization, DeviceSpec};
use seqsched::sequencer::extract_permutation;
use seqsched::subproblems::{linearized_penalty, solve_fixed};
use seqsched::{
    gain, load_scenario, sample_channel, Assignment, DeviceModel, ObjectiveKind, Scenario, SchemeKind, SolverOptions,
    SystemParams,
};

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn config_text(
    mu: f64,
    beta: f64,
    t_frame_ms: f64,
    devices: &[(f64, f64)],
    channel: Option<u64>,
    gains: &[f64],
) -> String {
    let mut s = format!(
        "[system]\nmu = {mu:?}\nbeta = {beta:?}\nt_frame_ms = {t_frame_ms:?}\np_cp_mw = 24.0\nmin_cp_ratio = 0.4\n"
    );
    for (kb, d) in devices {
        s.push_str(&format!("[[devices]]\npacket_kbits = {kb:?}\ndistance_m = {d:?}\n"));
    }
    match channel {
        Some(seed) => s.push_str(&format!("[channel]\nseed = {seed}\n")),
        None => {
            let g: Vec<String> = gains.iter().map(|g| format!("{g:?}")).collect();
            s.push_str(&format!("[channel]\ngains = [{}]\n", g.join(", ")));
        }
    }
    s
}

fn fleet() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((10.0f64..1000.0, 5.0f64..80.0), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trip(
        mu in 0.05f64..=1.0,
        beta in 0.5f64..8.0,
        t in 1.0f64..500.0,
        devs in fleet(),
        seed in prop::option::of(any::<u64>()),
        g in prop::collection::vec(0.01f64..5.0, 6),
    ) {
        let text = config_text(mu, beta, t, &devs, seed, &g[..devs.len()]);
        let a = load_scenario(&text).unwrap();
        let b = load_scenario(&a.to_config_text()).unwrap();
        prop_assert_eq!(a.n(), b.n());
        let pa = serde_json::to_value(&a.params).unwrap();
        let pb = serde_json::to_value(&b.params).unwrap();
        for (k, va) in pa.as_object().unwrap() {
            let (x, y) = (va.as_f64().unwrap(), pb[k].as_f64().unwrap());
            prop_assert!(rel(y, x) <= 1e-12, "{k}: {x} vs {y}");
        }
        for (da, db) in a.devices.iter().zip(&b.devices) {
            prop_assert!(rel(db.packet_bits, da.packet_bits) <= 1e-12);
            prop_assert!(rel(db.distance, da.distance) <= 1e-12);
            prop_assert!(rel(db.d_min_bits, da.d_min_bits) <= 1e-12);
        }
        for (x, y) in a.channel.gains.iter().zip(&b.channel.gains) {
            prop_assert!(rel(*y, *x) <= 1e-12);
        }
        prop_assert_eq!(a.channel.seed, b.channel.seed);
    }

    #[test]
    fn derived_coefficients_are_consistent(devs in fleet(), seed in any::<u64>()) {
        let p = SystemParams::reference();
        let specs: Vec<DeviceSpec> = devs.iter().map(|&(kb, d)| DeviceSpec::new(kb * 1e3, d, 0.4).unwrap()).collect();
        let base = Scenario::new(p.clone(), specs, ChannelRealization::fixed(vec![1.0; devs.len()])).unwrap();
        let sc = base.with_channel(sample_channel(&base, seed)).unwrap();
        prop_assert_eq!(&sample_channel(&sc, seed), &sc.channel);
        for (i, dev) in sc.devices.iter().enumerate() {
            let g = sc.channel.gains[i];
            let c = sc.derived_coeffs(i).unwrap();
            let snr_unit = p.kappa * g / (p.gamma * p.sigma2 * dev.distance.powf(p.alpha));
            prop_assert!(c.b > 0.0 && c.one_plus_c > 0.0);
            prop_assert!(rel(c.b, std::f64::consts::LN_2 / (snr_unit * p.mu * p.bandwidth)) <= 1e-12);
            prop_assert!(rel(c.one_plus_c, p.mu * p.p_o * snr_unit) <= 1e-12);
            prop_assert!(rel(c.z_max, (p.p_max * snr_unit).ln_1p()) <= 1e-12);
        }
    }

    #[test]
    fn compression_time_decreases(d in 1e3f64..1e6, r1 in 0.1f64..1.0, r2 in 0.1f64..1.0) {
        prop_assume!((r1 - r2).abs() > 1e-6);
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let t_lo = compression_time(d, lo * d, 7.5e-9, 5.0).unwrap();
        let t_hi = compression_time(d, hi * d, 7.5e-9, 5.0).unwrap();
        prop_assert!(t_lo > t_hi);
    }

    #[test]
    fn rate_is_increasing_and_concave(p1 in 1e-6f64..1.0, p2 in 1e-6f64..1.0, d in 5.0f64..80.0) {
        let params = SystemParams::reference();
        let r = |p: f64| snr_and_rate(p, 1.0, d, &params).1;
        let (lo, hi) = if p1 < p2 { (p1, p2) } else { (p2, p1) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(r(hi) > r(lo));
        prop_assert!(r(0.5 * (lo + hi)) >= 0.5 * (r(lo) + r(hi)) * (1.0 - 1e-12));
    }

    #[test]
    fn transmission_energy_grows_with_size(kb in 10.0f64..800.0, d in 5.0f64..60.0, zf in 0.01f64..1.0, r1 in 0.4f64..1.0, r2 in 0.4f64..1.0) {
        prop_assume!((r1 - r2).abs() > 1e-6);
        let p = SystemParams::reference();
        let dev = DeviceSpec::new(kb * 1e3, d, p.min_cp_ratio).unwrap();
        let sc = Scenario::new(p, vec![dev], ChannelRealization::fixed(vec![1.0])).unwrap();
        let m = DeviceModel::new(&sc, 0).unwrap();
        let z = zf * m.z_max();
        let tx = |r: f64| {
            let dcp = r * m.packet_bits;
            m.energy_zd(z, dcp).0 - sc.params.p_cp * compression_time(m.packet_bits, dcp, sc.params.tau, sc.params.beta).unwrap()
        };
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(tx(hi) > tx(lo));
    }

    #[test]
    fn gain_identity(a in 1e-6f64..10.0, b in 1e-6f64..10.0) {
        let g = gain(a, b).unwrap();
        prop_assert!((g + a / b - 1.0).abs() <= 4.0 * f64::EPSILON * (1.0 + a / b));
    }

    #[test]
    fn linearization_majorizes(x in prop::collection::vec(0.0f64..=1.0, 9), r in prop::collection::vec(0.0f64..=1.0, 9)) {
        let to_m = |v: &[f64]| v.chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
        let (xm, rm) = (to_m(&x), to_m(&r));
        let exact: f64 = x.iter().map(|v| v - v * v).sum();
        prop_assert!(linearized_penalty(&xm, &rm) >= exact - 1e-12);
        prop_assert!((linearized_penalty(&rm, &rm) - r.iter().map(|v| v - v * v).sum::<f64>()).abs() <= 1e-12);
    }

    #[test]
    fn extraction_recovers_dominant_permutation(
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        other in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        w in 0.0f64..0.45,
    ) {
        let mut x = vec![vec![0.0; 5]; 5];
        for b in 0..5 {
            x[b][perm[b]] += 1.0 - w;
            x[b][other[b]] += w;
        }
        prop_assert_eq!(extract_permutation(&x).unwrap().perm, perm);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fixed_sequence_policies_pass_audit(
        devs in prop::collection::vec((50.0f64..400.0, 10.0f64..50.0), 1..4),
        slack in 1.2f64..3.0,
        obj in prop::sample::select(ObjectiveKind::ALL.to_vec()),
        scheme in prop::sample::select(vec![SchemeKind::SubOptimal, SchemeKind::Benchmark, SchemeKind::Case1]),
    ) {
        let mut p = SystemParams::reference();
        let specs: Vec<DeviceSpec> = devs.iter().map(|&(kb, d)| DeviceSpec::new(kb * 1e3, d, p.min_cp_ratio).unwrap()).collect();
        let probe = Scenario::new(p.clone(), specs.clone(), ChannelRealization::fixed(vec![1.0; devs.len()])).unwrap();
        // every raw packet at full power, with slack; case1 needs the largest share per block
        let worst: f64 = (0..devs.len())
            .map(|i| DeviceModel::new(&probe, i).unwrap())
            .map(|m| m.packet_bits / m.rate_from_z(m.z_max()))
            .fold(0.0, f64::max);
        p.t_frame = slack * worst * devs.len() as f64;
        let sc = Scenario::new(p, specs, ChannelRealization::fixed(vec![1.0; devs.len()])).unwrap();
        let r = solve_fixed(&sc, scheme, &Assignment::identity(devs.len()), obj, &SolverOptions::default()).unwrap();
        r.policy.audit(&sc).unwrap();
        let total: f64 = r.policy.blocks.iter().sum();
        prop_assert!((total - sc.t_frame()).abs() <= 1e-9);
        prop_assert!(rel(obj.evaluate(&r.policy.energies), r.policy.objective_value) <= 1e-8);
        for (ph, dec) in r.policy.physical.iter().zip(&r.policy.decisions) {
            prop_assert!(ph.p_tx_amp <= sc.params.p_max * (1.0 + 1e-9));
            prop_assert!(rel(ph.energy, sc.params.p_cp * ph.t_cp + ph.p_tx_total * ph.t_tx) <= 1e-10);
            prop_assert!((dec.v - dec.d_cp.ln()).abs() <= 1e-12);
        }
    }
}
