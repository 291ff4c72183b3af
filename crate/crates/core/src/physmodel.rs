//! Physical-layer formulas and the change of variables that makes the
//! per-device energy tractable.
//!
//! Decision variables live in one of two spaces:
//!
//! * `(z, d_cp)` with `z = ln(1 + gamma/Gamma)` the rate variable and `d_cp`
//!   the compressed size in bits;
//! * `(z, v)` with `v = ln(d_cp)`.
//!
//! In the second space the energy `tau D P_cp ((D/d_cp)^beta - 1) +
//! d_cp b (e^z + c)/z` and both timing functions are jointly convex; in the
//! first space the bilinear `d_cp * h(z)` term is not, which is why the
//! optimization builders work in `(z, v)`.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{DeviceCoeffs, Scenario, SystemParams};

/// Below this `z` the `(e^z - 1)/z` family is evaluated from its Taylor series.
const SERIES_Z: f64 = 1e-4;
/// Relative slack when checking values that came out of a solver.
const DOMAIN_SLACK: f64 = 1e-9;

/// Time to compress `d` raw bits into `d_cp` bits.
pub fn compression_time(d: f64, d_cp: f64, tau: f64, beta: f64) -> Result<f64> {
    if !(d_cp > 0.0) || d_cp > d {
        return Err(Error::Domain(format!(
            "compressed size {d_cp} outside (0, {d}]"
        )));
    }
    Ok(tau * d * ((d / d_cp).powf(beta) - 1.0))
}

/// Received SNR and achievable rate (bit/s) at transmit power `p`.
pub fn snr_and_rate(p: f64, gain: f64, distance: f64, params: &SystemParams) -> (f64, f64) {
    let snr = params.kappa * p * gain / (params.sigma2 * distance.powf(params.alpha));
    let rate = params.bandwidth * (snr / params.gamma).ln_1p() / LN_2;
    (snr, rate)
}

/// `expm1(z)/z` and its first two derivatives.
fn q_family(z: f64) -> (f64, f64, f64) {
    let (q, q1) = if z < SERIES_Z {
        (
            1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0,
            0.5 + z / 3.0 + z * z / 8.0,
        )
    } else {
        let em1 = z.exp_m1();
        (em1 / z, (z * (em1 + 1.0) - em1) / (z * z))
    };
    // the closed form of q'' cancels to ~z^3/3, so the series runs further
    let q2 = if z < 0.1 {
        1.0 / 3.0 + z * (1.0 / 4.0 + z * (1.0 / 10.0 + z * (1.0 / 36.0 + z * (1.0 / 168.0 + z / 960.0))))
    } else {
        ((z.exp()) * (z * z - 2.0 * z + 2.0) - 2.0) / (z * z * z)
    };
    (q, q1, q2)
}

/// `h(z) = (e^z + c)/z` and `h'(z)`, written as `(1+c)/z + expm1(z)/z` so the
/// result stays accurate when `c` is close to -1.
pub fn rate_cost(z: f64, one_plus_c: f64) -> (f64, f64) {
    let (q, q1, _) = q_family(z);
    (one_plus_c / z + q, -one_plus_c / (z * z) + q1)
}

/// Second derivative of [`rate_cost`].
pub fn rate_cost_curvature(z: f64, one_plus_c: f64) -> f64 {
    let (_, _, q2) = q_family(z);
    2.0 * one_plus_c / (z * z * z) + q2
}

/// Per-device decision in the transformed variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceDecision {
    pub d_cp: f64,
    pub z: f64,
    pub v: f64,
}

impl DeviceDecision {
    pub fn from_size(z: f64, d_cp: f64) -> Self {
        DeviceDecision {
            d_cp,
            z,
            v: d_cp.ln(),
        }
    }

    pub fn from_log_size(z: f64, v: f64) -> Self {
        DeviceDecision { d_cp: v.exp(), z, v }
    }
}

/// Physical quantities recovered from a decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevicePhysical {
    /// Radiated transmit power P_i, W.
    pub p_tx_amp: f64,
    /// Power drawn while transmitting, P_i/mu + P_o, W.
    pub p_tx_total: f64,
    pub rate: f64,
    pub t_cp: f64,
    pub t_tx: f64,
    pub energy: f64,
}

/// Everything needed to evaluate one device's cost and timing functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceModel {
    pub index: usize,
    pub packet_bits: f64,
    pub d_min_bits: f64,
    pub coeffs: DeviceCoeffs,
    p_cp: f64,
    tau: f64,
    beta: f64,
    bandwidth: f64,
    mu: f64,
    p_o: f64,
    p_max: f64,
}

impl DeviceModel {
    pub fn new(scenario: &Scenario, index: usize) -> Result<Self> {
        let coeffs = scenario.derived_coeffs(index)?;
        let dev = &scenario.devices[index];
        let p = &scenario.params;
        Ok(DeviceModel {
            index,
            packet_bits: dev.packet_bits,
            d_min_bits: dev.d_min_bits,
            coeffs,
            p_cp: p.p_cp,
            tau: p.tau,
            beta: p.beta,
            bandwidth: p.bandwidth,
            mu: p.mu,
            p_o: p.p_o,
            p_max: p.p_max,
        })
    }

    pub fn all(scenario: &Scenario) -> Result<Vec<Self>> {
        (0..scenario.n()).map(|i| DeviceModel::new(scenario, i)).collect()
    }

    pub fn z_max(&self) -> f64 {
        self.coeffs.z_max
    }

    pub fn ln_packet(&self) -> f64 {
        self.packet_bits.ln()
    }

    pub fn ln_d_min(&self) -> f64 {
        self.d_min_bits.ln()
    }

    fn check_z(&self, z: f64) -> Result<()> {
        if !(z > 0.0) || z > self.coeffs.z_max * (1.0 + DOMAIN_SLACK) {
            return Err(Error::Domain(format!(
                "rate variable {z} outside (0, {}]",
                self.coeffs.z_max
            )));
        }
        Ok(())
    }

    fn check_size(&self, d_cp: f64) -> Result<()> {
        if !(d_cp >= self.d_min_bits * (1.0 - DOMAIN_SLACK))
            || d_cp > self.packet_bits * (1.0 + DOMAIN_SLACK)
        {
            return Err(Error::Domain(format!(
                "compressed size {d_cp} outside [{}, {}]",
                self.d_min_bits, self.packet_bits
            )));
        }
        Ok(())
    }

    /// Transmit power realising rate variable `z`.
    pub fn power_from_z(&self, z: f64) -> Result<f64> {
        if z < 0.0 || z > self.coeffs.z_max * (1.0 + DOMAIN_SLACK) {
            return Err(Error::Domain(format!(
                "rate variable {z} outside [0, {}]",
                self.coeffs.z_max
            )));
        }
        Ok((z.exp_m1() * self.coeffs.attenuation).min(self.p_max))
    }

    pub fn z_from_power(&self, p: f64) -> Result<f64> {
        if !(0.0..=self.p_max * (1.0 + DOMAIN_SLACK)).contains(&p) {
            return Err(Error::Domain(format!("power {p} outside [0, {}]", self.p_max)));
        }
        Ok((p / self.coeffs.attenuation).ln_1p())
    }

    pub fn rate_from_z(&self, z: f64) -> f64 {
        self.bandwidth * z / LN_2
    }

    /// Compression time as a function of `v = ln d_cp`, with d/dv.
    pub fn cp_time_v(&self, v: f64) -> (f64, f64) {
        let ratio_pow = (self.beta * (self.ln_packet() - v)).exp();
        let k = self.tau * self.packet_bits;
        (k * (ratio_pow - 1.0), -self.beta * k * ratio_pow)
    }

    /// Transmission time `e^v ln2 / (B z)` with gradient (d/dz, d/dv).
    pub fn tx_time_zv(&self, z: f64, v: f64) -> (f64, [f64; 2]) {
        let t = v.exp() * LN_2 / (self.bandwidth * z);
        (t, [-t / z, t])
    }

    /// Transmission time `d_cp ln2 / (B z)` with gradient (d/dz, d/dd_cp).
    pub fn tx_time_zd(&self, z: f64, d_cp: f64) -> (f64, [f64; 2]) {
        let t = d_cp * LN_2 / (self.bandwidth * z);
        (t, [-t / z, LN_2 / (self.bandwidth * z)])
    }

    /// Transformed energy in `(z, d_cp)` with gradient.
    pub fn energy_zd(&self, z: f64, d_cp: f64) -> (f64, [f64; 2]) {
        let d = self.packet_bits;
        let k = self.tau * d * self.p_cp;
        let ratio_pow = (d / d_cp).powf(self.beta);
        let (h, h1) = rate_cost(z, self.coeffs.one_plus_c);
        let b = self.coeffs.b;
        let e = k * (ratio_pow - 1.0) + d_cp * b * h;
        (e, [d_cp * b * h1, -k * self.beta * ratio_pow / d_cp + b * h])
    }

    /// Transformed energy in `(z, v)` with gradient.
    pub fn energy_zv(&self, z: f64, v: f64) -> (f64, [f64; 2]) {
        let k = self.tau * self.packet_bits * self.p_cp;
        let ratio_pow = (self.beta * (self.ln_packet() - v)).exp();
        let (h, h1) = rate_cost(z, self.coeffs.one_plus_c);
        let tx = self.coeffs.b * v.exp();
        let e = k * (ratio_pow - 1.0) + tx * h;
        (e, [tx * h1, -k * self.beta * ratio_pow + tx * h])
    }

    /// `ln E(z, v)` with gradient.
    pub fn log_energy_zv(&self, z: f64, v: f64) -> (f64, [f64; 2]) {
        let (e, g) = self.energy_zv(z, v);
        (e.ln(), [g[0] / e, g[1] / e])
    }

    /// Energy of an uncompressed transmission at rate variable `z`, with d/dz.
    pub fn energy_raw_tx(&self, z: f64) -> (f64, f64) {
        let (h, h1) = rate_cost(z, self.coeffs.one_plus_c);
        let k = self.packet_bits * self.coeffs.b;
        (k * h, k * h1)
    }

    /// All physical quantities for a decision. The energy uses the transformed
    /// expression; the power/rate/time fields use the untransformed formulas.
    pub fn physical(&self, decision: &DeviceDecision) -> Result<DevicePhysical> {
        self.check_z(decision.z)?;
        self.check_size(decision.d_cp)?;
        let d_cp = decision.d_cp.clamp(self.d_min_bits, self.packet_bits);
        let p = self.power_from_z(decision.z)?;
        let rate = self.rate_from_z(decision.z);
        let t_cp = compression_time(self.packet_bits, d_cp, self.tau, self.beta)?;
        let t_tx = d_cp / rate;
        let (energy, _) = self.energy_zd(decision.z, d_cp);
        Ok(DevicePhysical {
            p_tx_amp: p,
            p_tx_total: p / self.mu + self.p_o,
            rate,
            t_cp,
            t_tx,
            energy,
        })
    }
}

/// Physical quantities of device `index` under `decision`.
pub fn device_energy(
    decision: &DeviceDecision,
    scenario: &Scenario,
    index: usize,
) -> Result<DevicePhysical> {
    DeviceModel::new(scenario, index)?.physical(decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ChannelRealization, DeviceSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        if b == 0.0 {
            a.abs()
        } else {
            (a - b).abs() / b.abs()
        }
    }

    fn single(kbits: f64, distance: f64) -> Scenario {
        let p = SystemParams::reference();
        Scenario::new(
            p.clone(),
            vec![DeviceSpec::new(kbits * 1e3, distance, p.min_cp_ratio).unwrap()],
            ChannelRealization::fixed(vec![1.0]),
        )
        .unwrap()
    }

    /// Energy straight from the untransformed formula, independent of the
    /// b/c coefficients.
    fn desk_energy(sc: &Scenario, z: f64, d_cp: f64) -> f64 {
        let p = &sc.params;
        let dev = &sc.devices[0];
        let h = sc.channel.gains[0];
        let power = (z.exp() - 1.0) * p.gamma * p.sigma2 * dev.distance.powf(p.alpha) / (p.kappa * h);
        let snr = p.kappa * power * h / (p.sigma2 * dev.distance.powf(p.alpha));
        let rate = p.bandwidth * (1.0 + snr / p.gamma).log2();
        let t_cp = p.tau * dev.packet_bits * ((dev.packet_bits / d_cp).powf(p.beta) - 1.0);
        p.p_cp * t_cp + (power / p.mu + p.p_o) * d_cp / rate
    }

    #[test]
    fn compression_time_values() {
        assert_eq!(compression_time(1e5, 1e5, 7.5e-9, 5.0).unwrap(), 0.0);
        let t = compression_time(1e5, 5e4, 7.5e-9, 5.0).unwrap();
        assert!(rel(t, 0.02325) < 1e-9, "{t}");
        let t = compression_time(5e5, 2e5, 7.5e-9, 5.0).unwrap();
        assert!(rel(t, 3.75e-3 * (2.5f64.powi(5) - 1.0)) < 1e-9);
        assert!((t - 0.36246).abs() < 1e-5);
        assert!(compression_time(1e5, 0.0, 7.5e-9, 5.0).is_err());
        assert!(compression_time(1e5, 1.1e5, 7.5e-9, 5.0).is_err());
    }

    #[test]
    fn rate_values() {
        let p = SystemParams::reference();
        assert_eq!(snr_and_rate(0.0, 1.0, 15.0, &p), (0.0, 0.0));
        // gamma == Gamma gives exactly one bit per symbol
        let att = p.gamma * p.sigma2 * 15f64.powi(4) / p.kappa;
        let (snr, rate) = snr_and_rate(att, 1.0, 15.0, &p);
        assert!(rel(snr, p.gamma) < 1e-12);
        assert!(rel(rate, p.bandwidth) < 1e-12);
        let (_, rate) = snr_and_rate(1.0, 1.0, 15.0, &p);
        assert!(rel(rate, 1.85e7) < 0.01, "{rate}");
    }

    #[test]
    fn uncompressed_energy_is_power_times_airtime() {
        let sc = single(100.0, 31.0);
        let m = DeviceModel::new(&sc, 0).unwrap();
        let z = 0.5 * m.z_max();
        let phys = m.physical(&DeviceDecision::from_size(z, 1e5)).unwrap();
        assert_eq!(phys.t_cp, 0.0);
        let p = m.power_from_z(z).unwrap();
        let expect = (p / sc.params.mu + sc.params.p_o) * 1e5 / m.rate_from_z(z);
        assert!(rel(phys.energy, expect) < 1e-12);
    }

    #[test]
    fn transforms_round_trip() {
        let sc = Scenario::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..sc.n() {
            let m = DeviceModel::new(&sc, i).unwrap();
            assert_eq!(m.power_from_z(0.0).unwrap(), 0.0);
            assert!(rel(m.power_from_z(m.z_max()).unwrap(), sc.params.p_max) < 1e-9);
            assert!(m.power_from_z(m.z_max() * 1.01).is_err());
            for _ in 0..200 {
                let p: f64 = rng.random_range(1e-9..=1.0);
                let back = m.power_from_z(m.z_from_power(p).unwrap()).unwrap();
                assert!(rel(back, p) < 1e-12, "{p} -> {back}");
            }
        }
    }

    #[test]
    fn inverse_transform_at_ln2() {
        let sc = single(200.0, 22.0);
        let m = DeviceModel::new(&sc, 0).unwrap();
        let p = &sc.params;
        let expect = p.gamma * p.sigma2 * 22f64.powi(4) / p.kappa;
        assert!(rel(m.power_from_z(LN_2).unwrap(), expect) < 1e-12);
    }

    #[test]
    fn energy_two_paths_fixed_point() {
        let sc = single(100.0, 31.0);
        let m = DeviceModel::new(&sc, 0).unwrap();
        let z = m.z_max() / 2.0;
        let d_cp = 0.7e5;
        let phys = m.physical(&DeviceDecision::from_size(z, d_cp)).unwrap();
        assert!(rel(phys.energy, desk_energy(&sc, z, d_cp)) < 1e-9);
        let split = sc.params.p_cp * phys.t_cp + phys.p_tx_total * phys.t_tx;
        assert!(rel(phys.energy, split) < 1e-10);
    }

    #[test]
    fn energy_two_paths_random() {
        let sc = Scenario::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..sc.n() {
            let m = DeviceModel::new(&sc, i).unwrap();
            let one = Scenario::new(
                sc.params.clone(),
                vec![sc.devices[i]],
                ChannelRealization::fixed(vec![sc.channel.gains[i]]),
            )
            .unwrap();
            for _ in 0..500 {
                let z = rng.random_range(1e-3..m.z_max());
                let d_cp = rng.random_range(m.d_min_bits..=m.packet_bits);
                let (e, _) = m.energy_zd(z, d_cp);
                assert!(rel(e, desk_energy(&one, z, d_cp)) < 1e-9);
                let (ev, _) = m.energy_zv(z, d_cp.ln());
                assert!(rel(ev, e) < 1e-12);
            }
        }
    }

    #[test]
    fn rate_cost_series_branch_is_continuous() {
        for opc in [1e-12, 0.5, 207.0] {
            let (zb, za) = (SERIES_Z * (1.0 - 1e-9), SERIES_Z * (1.0 + 1e-9));
            let below = rate_cost(zb, opc);
            let above = rate_cost(za, opc);
            // compare only the expm1(z)/z part, the pole term moves with z
            assert!(rel(below.0 - opc / zb, above.0 - opc / za) < 1e-9);
            assert!(rel(below.1 + opc / (zb * zb), above.1 + opc / (za * za)) < 1e-6);
        }
        // c = -1 + 1e-12: the cost tends to expm1(z)/z, not 0/0 noise
        let (h, _) = rate_cost(1e-6, 1e-12);
        assert!(rel(h, 1e-6 + 1.0 + 5e-7) < 1e-9);
    }

    #[test]
    fn rejects_out_of_domain_decisions() {
        let sc = single(100.0, 31.0);
        let m = DeviceModel::new(&sc, 0).unwrap();
        assert!(m.physical(&DeviceDecision::from_size(0.0, 1e5)).is_err());
        assert!(m.physical(&DeviceDecision::from_size(m.z_max() * 1.1, 1e5)).is_err());
        assert!(m.physical(&DeviceDecision::from_size(1.0, 1e4)).is_err());
    }
}
