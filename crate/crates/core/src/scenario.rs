//! Problem data: physical constants, the device fleet, channel realizations
//! and the per-device coefficients every optimization builder consumes.
//!
//! Everything inside the crate is SI (bits, seconds, watts, joules). The
//! config document uses the engineering units operators usually quote
//! (mW, dB, dBm/Hz, ns/bit, kbit, ms) and is converted once, here.

use std::f64::consts::{LN_2, PI};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and protocol constants, stored in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Amplifier drain efficiency in (0, 1].
    pub mu: f64,
    /// Compression processing power, W.
    pub p_cp: f64,
    /// Communication circuitry power, W.
    pub p_o: f64,
    pub gamma_db: f64,
    /// Modulation gap as a linear factor.
    pub gamma: f64,
    /// Per-bit processing time, s/bit.
    pub tau: f64,
    pub beta: f64,
    /// Bandwidth, Hz.
    pub bandwidth: f64,
    pub n0_dbm_hz: f64,
    pub alpha: f64,
    /// Wavelength, m.
    pub wavelength: f64,
    /// Maximum transmit power, W.
    pub p_max: f64,
    pub min_cp_ratio: f64,
    /// Frame duration, s.
    pub t_frame: f64,
    /// Scale (mean) of the exponential channel-gain distribution.
    pub varsigma: f64,
    /// Path-loss factor (wavelength / 4 pi)^2.
    pub kappa: f64,
    /// Noise power N0 * B, W.
    pub sigma2: f64,
}

/// `system` section of the scenario document. Missing keys take the
/// reference values used throughout the examples and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub mu: f64,
    pub p_cp_mw: f64,
    pub p_o_mw: f64,
    pub gamma_db: f64,
    pub tau_ns_per_bit: f64,
    pub beta: f64,
    pub bandwidth_hz: f64,
    pub n0_dbm_hz: f64,
    pub alpha: f64,
    pub wavelength_m: f64,
    pub p_max_watts: f64,
    pub min_cp_ratio: f64,
    pub t_frame_ms: f64,
    pub varsigma: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            mu: 0.35,
            p_cp_mw: 24.0,
            p_o_mw: 82.5,
            gamma_db: 9.8,
            tau_ns_per_bit: 7.5,
            beta: 5.0,
            bandwidth_hz: 1e6,
            n0_dbm_hz: -174.0,
            alpha: 4.0,
            wavelength_m: 0.333,
            // "0 dB" read as 0 dBW.
            p_max_watts: 1.0,
            min_cp_ratio: 0.4,
            t_frame_ms: 100.0,
            varsigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub packet_kbits: f64,
    pub distance_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Top-level scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub system: SystemConfig,
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub channel: ChannelConfig,
}

fn check(field: &str, ok: bool, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::validation(field, reason))
    }
}

fn finite(field: &str, v: f64) -> Result<()> {
    check(field, v.is_finite(), "must be finite")
}

impl SystemParams {
    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        for (name, v) in [
            ("mu", cfg.mu),
            ("p_cp_mw", cfg.p_cp_mw),
            ("p_o_mw", cfg.p_o_mw),
            ("gamma_db", cfg.gamma_db),
            ("tau_ns_per_bit", cfg.tau_ns_per_bit),
            ("beta", cfg.beta),
            ("bandwidth_hz", cfg.bandwidth_hz),
            ("n0_dbm_hz", cfg.n0_dbm_hz),
            ("alpha", cfg.alpha),
            ("wavelength_m", cfg.wavelength_m),
            ("p_max_watts", cfg.p_max_watts),
            ("min_cp_ratio", cfg.min_cp_ratio),
            ("t_frame_ms", cfg.t_frame_ms),
            ("varsigma", cfg.varsigma),
        ] {
            finite(name, v)?;
        }
        check("mu", cfg.mu > 0.0 && cfg.mu <= 1.0, "out of (0,1]")?;
        check("p_cp_mw", cfg.p_cp_mw >= 0.0, "must be >= 0")?;
        check("p_o_mw", cfg.p_o_mw >= 0.0, "must be >= 0")?;
        check("tau_ns_per_bit", cfg.tau_ns_per_bit > 0.0, "must be > 0")?;
        check("beta", cfg.beta > 0.0, "must be > 0")?;
        check("bandwidth_hz", cfg.bandwidth_hz > 0.0, "must be > 0")?;
        check("alpha", cfg.alpha > 0.0, "must be > 0")?;
        check("wavelength_m", cfg.wavelength_m > 0.0, "must be > 0")?;
        check("p_max_watts", cfg.p_max_watts > 0.0, "must be > 0")?;
        check(
            "min_cp_ratio",
            cfg.min_cp_ratio > 0.0 && cfg.min_cp_ratio <= 1.0,
            "out of (0,1]",
        )?;
        check("t_frame_ms", cfg.t_frame_ms > 0.0, "must be > 0")?;
        check("varsigma", cfg.varsigma > 0.0, "must be > 0")?;

        let bandwidth = cfg.bandwidth_hz;
        let kappa = (cfg.wavelength_m / (4.0 * PI)).powi(2);
        let sigma2 = 10f64.powf((cfg.n0_dbm_hz - 30.0) / 10.0) * bandwidth;
        Ok(SystemParams {
            mu: cfg.mu,
            p_cp: cfg.p_cp_mw * 1e-3,
            p_o: cfg.p_o_mw * 1e-3,
            gamma_db: cfg.gamma_db,
            gamma: 10f64.powf(cfg.gamma_db / 10.0),
            tau: cfg.tau_ns_per_bit * 1e-9,
            beta: cfg.beta,
            bandwidth,
            n0_dbm_hz: cfg.n0_dbm_hz,
            alpha: cfg.alpha,
            wavelength: cfg.wavelength_m,
            p_max: cfg.p_max_watts,
            min_cp_ratio: cfg.min_cp_ratio,
            t_frame: cfg.t_frame_ms * 1e-3,
            varsigma: cfg.varsigma,
            kappa,
            sigma2,
        })
    }

    pub fn to_config(&self) -> SystemConfig {
        SystemConfig {
            mu: self.mu,
            p_cp_mw: self.p_cp * 1e3,
            p_o_mw: self.p_o * 1e3,
            gamma_db: self.gamma_db,
            tau_ns_per_bit: self.tau * 1e9,
            beta: self.beta,
            bandwidth_hz: self.bandwidth,
            n0_dbm_hz: self.n0_dbm_hz,
            alpha: self.alpha,
            wavelength_m: self.wavelength,
            p_max_watts: self.p_max,
            min_cp_ratio: self.min_cp_ratio,
            t_frame_ms: self.t_frame * 1e3,
            varsigma: self.varsigma,
        }
    }

    /// Reference constants (drain efficiency 0.35, 24 mW / 82.5 mW, 9.8 dB gap,
    /// 7.5 ns/bit, beta = 5, 1 MHz, -174 dBm/Hz, alpha = 4, 0.333 m, 1 W).
    pub fn reference() -> Self {
        SystemParams::from_config(&SystemConfig::default()).expect("reference constants are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    /// Raw packet size D_i, bits.
    pub packet_bits: f64,
    /// Distance to the base station, m.
    pub distance: f64,
    /// Smallest admissible compressed size, bits.
    pub d_min_bits: f64,
}

impl DeviceSpec {
    pub fn new(packet_bits: f64, distance: f64, min_cp_ratio: f64) -> Result<Self> {
        check(
            "packet_kbits",
            packet_bits.is_finite() && packet_bits > 0.0,
            "must be > 0",
        )?;
        check(
            "distance_m",
            distance.is_finite() && distance > 0.0,
            "must be > 0",
        )?;
        Ok(DeviceSpec {
            packet_bits,
            distance,
            d_min_bits: min_cp_ratio * packet_bits,
        })
    }
}

/// Instantaneous channel gains |h_i|^2, one per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub gains: Vec<f64>,
    pub seed: Option<u64>,
}

impl ChannelRealization {
    pub fn fixed(gains: Vec<f64>) -> Self {
        ChannelRealization { gains, seed: None }
    }
}

/// Coefficients of the transformed energy and rate expressions for one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceCoeffs {
    /// Gamma sigma^2 d^alpha / (kappa |h|^2): the transmit power that lifts
    /// gamma/Gamma to one, W.
    pub attenuation: f64,
    pub b: f64,
    pub c: f64,
    /// 1 + c, computed directly so it keeps full precision when c is near -1.
    pub one_plus_c: f64,
    pub z_max: f64,
}

impl DeviceCoeffs {
    fn compute(params: &SystemParams, device: &DeviceSpec, gain: f64) -> Option<Self> {
        if gain <= 0.0 {
            return None;
        }
        let attenuation = params.gamma * params.sigma2 * device.distance.powf(params.alpha)
            / (params.kappa * gain);
        let b = attenuation * LN_2 / (params.mu * params.bandwidth);
        let one_plus_c = params.mu * params.p_o / attenuation;
        Some(DeviceCoeffs {
            attenuation,
            b,
            c: one_plus_c - 1.0,
            one_plus_c,
            z_max: (params.p_max / attenuation).ln_1p(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: SystemParams,
    pub devices: Vec<DeviceSpec>,
    pub channel: ChannelRealization,
    coeffs: Vec<Option<DeviceCoeffs>>,
}

impl Scenario {
    pub fn new(
        params: SystemParams,
        devices: Vec<DeviceSpec>,
        channel: ChannelRealization,
    ) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::validation("devices", "must list at least one device"));
        }
        if channel.gains.len() != devices.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} channel gains for {} devices",
                channel.gains.len(),
                devices.len()
            )));
        }
        if let Some(g) = channel.gains.iter().find(|g| !g.is_finite() || **g < 0.0) {
            return Err(Error::validation("gains", format!("{g} is not a finite value >= 0")));
        }
        let coeffs = devices
            .iter()
            .zip(&channel.gains)
            .map(|(d, &g)| DeviceCoeffs::compute(&params, d, g))
            .collect();
        Ok(Scenario {
            params,
            devices,
            channel,
            coeffs,
        })
    }

    /// The reference five-device fleet with every gain at the distribution mean.
    pub fn reference() -> Self {
        let params = SystemParams::reference();
        let devices = [(310.0, 40.0), (500.0, 15.0), (100.0, 31.0), (80.0, 49.0), (200.0, 22.0)]
            .iter()
            .map(|&(kb, d)| DeviceSpec::new(kb * 1e3, d, params.min_cp_ratio).unwrap())
            .collect::<Vec<_>>();
        let gains = vec![params.varsigma; devices.len()];
        Scenario::new(params, devices, ChannelRealization::fixed(gains)).unwrap()
    }

    pub fn n(&self) -> usize {
        self.devices.len()
    }

    pub fn t_frame(&self) -> f64 {
        self.params.t_frame
    }

    /// Cached (b, c, z_max) for one device.
    pub fn derived_coeffs(&self, device: usize) -> Result<DeviceCoeffs> {
        self.coeffs
            .get(device)
            .ok_or_else(|| Error::Domain(format!("device index {device} out of range")))?
            .ok_or(Error::DeviceUnreachable(device))
    }

    pub fn with_t_frame(&self, t_frame: f64) -> Result<Scenario> {
        check("t_frame_ms", t_frame.is_finite() && t_frame > 0.0, "must be > 0")?;
        let mut out = self.clone();
        out.params.t_frame = t_frame;
        Ok(out)
    }

    pub fn with_channel(&self, channel: ChannelRealization) -> Result<Scenario> {
        Scenario::new(self.params.clone(), self.devices.clone(), channel)
    }

    pub fn to_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            system: self.params.to_config(),
            devices: self
                .devices
                .iter()
                .map(|d| DeviceConfig {
                    packet_kbits: d.packet_bits * 1e-3,
                    distance_m: d.distance,
                })
                .collect(),
            channel: match self.channel.seed {
                Some(seed) => ChannelConfig {
                    gains: None,
                    seed: Some(seed),
                },
                None => ChannelConfig {
                    gains: Some(self.channel.gains.clone()),
                    seed: None,
                },
            },
        }
    }

    /// Serializes to the scenario document format read by [`load_scenario`].
    pub fn to_config_text(&self) -> String {
        toml::to_string(&self.to_config()).expect("scenario config serializes")
    }

    pub fn from_config(cfg: &ScenarioConfig) -> Result<Scenario> {
        let params = SystemParams::from_config(&cfg.system)?;
        let devices = cfg
            .devices
            .iter()
            .map(|d| {
                finite("packet_kbits", d.packet_kbits)?;
                DeviceSpec::new(d.packet_kbits * 1e3, d.distance_m, params.min_cp_ratio)
            })
            .collect::<Result<Vec<_>>>()?;
        let channel = match (&cfg.channel.gains, cfg.channel.seed) {
            (Some(_), Some(_)) => {
                return Err(Error::validation("channel", "give either gains or seed, not both"))
            }
            (Some(g), None) => ChannelRealization::fixed(g.clone()),
            (None, Some(seed)) => draw_gains(params.varsigma, devices.len(), seed),
            (None, None) => ChannelRealization::fixed(vec![params.varsigma; devices.len()]),
        };
        Scenario::new(params, devices, channel)
    }
}

fn draw_gains(varsigma: f64, n: usize, seed: u64) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(1.0 / varsigma).expect("varsigma > 0");
    ChannelRealization {
        gains: (0..n).map(|_| exp.sample(&mut rng)).collect(),
        seed: Some(seed),
    }
}

/// Parses and validates a scenario document (TOML).
pub fn load_scenario(config_text: &str) -> Result<Scenario> {
    let cfg: ScenarioConfig =
        toml::from_str(config_text).map_err(|e| Error::Parse(e.message().to_string()))?;
    Scenario::from_config(&cfg)
}

pub fn load_scenario_file(path: impl AsRef<Path>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    load_scenario(&text)
}

/// Draws i.i.d. exponential gains with mean `varsigma`; identical seeds give
/// identical vectors.
pub fn sample_channel(scenario: &Scenario, seed: u64) -> ChannelRealization {
    draw_gains(scenario.params.varsigma, scenario.n(), seed)
}
