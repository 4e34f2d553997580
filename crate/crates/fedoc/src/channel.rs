//! Wireless latency model.
//!
//! Channel gains combine the 128.1 + 37.6 log10(d_km) path-loss law with
//! exponentially distributed Rayleigh power fading (floored at 1e-6 so no
//! link ever has zero rate). Adjacent cells use disjoint half-band sub-bands;
//! an ES splits its half band equally among simultaneous uploaders, and each
//! relay hop through a ROC runs on a quarter band with a downlink (ES power)
//! and an uplink (client power) leg.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::config::{ChannelSpec, LogBase, RelayGainMode};
use crate::rng;
use crate::topology::{ClientId, Topology};

/// Minimum Rayleigh power sample; keeps every link at a positive rate.
pub const FADING_FLOOR: f64 = 1e-6;
/// Distances below one meter are clamped before the path-loss law.
pub const MIN_DISTANCE_M: f64 = 1.0;

/// Physical parameters with the noise density already converted to W/Hz.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelParams {
    pub bandwidth_hz: f64,
    pub client_power_w: f64,
    pub es_power_w: f64,
    pub noise_w_per_hz: f64,
    pub pathloss_fixed_db: f64,
    pub pathloss_distance_coeff: f64,
    pub rayleigh_variance: f64,
    /// Model size in bits.
    pub model_bits: f64,
    /// t_c: cloud/edge latency ratio.
    pub cloud_edge_ratio: f64,
    pub compute_time_range_s: (f64, f64),
    pub log_base: LogBase,
    pub relay_gain_mode: RelayGainMode,
}

impl ChannelParams {
    /// Build from the config spec; dBm/Hz is converted exactly once, here.
    pub fn from_spec(spec: &ChannelSpec, param_count: usize) -> ChannelParams {
        ChannelParams {
            bandwidth_hz: spec.bandwidth_hz,
            client_power_w: spec.client_power_w,
            es_power_w: spec.es_power_w,
            noise_w_per_hz: 10f64.powf((spec.noise_dbm_per_hz - 30.0) / 10.0),
            pathloss_fixed_db: spec.pathloss_fixed_db,
            pathloss_distance_coeff: spec.pathloss_distance_coeff,
            rayleigh_variance: spec.rayleigh_variance,
            model_bits: spec.model_bits.unwrap_or((param_count * 64) as u64) as f64,
            cloud_edge_ratio: spec.cloud_edge_ratio,
            compute_time_range_s: (spec.compute_time_range_s[0], spec.compute_time_range_s[1]),
            log_base: spec.log_base,
            relay_gain_mode: spec.relay_gain_mode,
        }
    }

    /// Path loss in dB at distance `d_m` meters (clamped to 1 m).
    pub fn pathloss_db(&self, d_m: f64) -> f64 {
        let d_km = (d_m.max(MIN_DISTANCE_M)) / 1000.0;
        self.pathloss_fixed_db + self.pathloss_distance_coeff * d_km.log10()
    }

    fn log(&self, x: f64) -> f64 {
        match self.log_base {
            LogBase::Log2 => x.log2(),
            LogBase::Ln => x.ln(),
        }
    }

    /// Achievable rate of one link: band * log(1 + p * gain / (band * N0)).
    pub fn rate(&self, band_hz: f64, power_w: f64, gain: f64) -> f64 {
        band_hz * self.log(1.0 + power_w * gain / (band_hz * self.noise_w_per_hz))
    }
}

/// Dimensionless power gains per (client, covering cell) link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GainTable {
    gains: BTreeMap<(ClientId, usize), f64>,
}

impl GainTable {
    pub fn insert(&mut self, client: ClientId, cell: usize, gain: f64) {
        assert!(gain > 0.0, "gains must be positive");
        self.gains.insert((client, cell), gain);
    }

    pub fn gain(&self, client: ClientId, cell: usize) -> f64 {
        *self
            .gains
            .get(&(client, cell))
            .unwrap_or_else(|| panic!("no gain sampled for client {client} <-> ES {cell}"))
    }

    fn min_gain(&self, clients: &[ClientId], cell: usize) -> f64 {
        clients
            .iter()
            .map(|&k| self.gain(k, cell))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sample pathloss x |h|^2 gains for every client-ES link in the topology.
///
/// Gains are keyed per (client, cell) so the draw order cannot leak between
/// links; the same seed always yields the same table.
pub fn sample_gains(topo: &Topology, params: &ChannelParams, seed: u64) -> GainTable {
    let mut table = GainTable::default();
    for k in 0..topo.num_clients() {
        for cell in topo.covering_cells(k) {
            let [px, py] = topo.client_positions[k];
            let [ex, ey] = topo.es_positions[cell];
            let d = ((px - ex).powi(2) + (py - ey).powi(2)).sqrt();
            let pl = params.pathloss_db(d);
            let mut rs = rng::stream(seed, "gain", &[k as u64, cell as u64]);
            // |h|^2 for Rayleigh |h| is exponential with mean = variance.
            let u: f64 = rs.gen::<f64>().max(f64::MIN_POSITIVE);
            let fade = (-(u.ln())) * params.rayleigh_variance;
            let fade = fade.max(FADING_FLOOR);
            table.insert(k, cell, 10f64.powf(-pl / 10.0) * fade);
        }
    }
    table
}

/// Per-epoch compute time per client, uniform in the configured range.
pub fn sample_compute_times(num_clients: usize, params: &ChannelParams, seed: u64) -> Vec<f64> {
    let (lo, hi) = params.compute_time_range_s;
    (0..num_clients)
        .map(|k| {
            let mut rs = rng::stream(seed, "compute-time", &[k as u64]);
            lo + (hi - lo) * rs.gen::<f64>()
        })
        .collect()
}

/// Upload time for a cell: the half band splits across |S| uploaders and the
/// worst-gain client sets the pace.
pub fn upload_latency(cell: usize, uploaders: &[ClientId], gains: &GainTable, params: &ChannelParams) -> f64 {
    if uploaders.is_empty() {
        return 0.0;
    }
    let band = params.bandwidth_hz / (2.0 * uploaders.len() as f64);
    let min_gain = gains.min_gain(uploaders, cell);
    params.model_bits / params.rate(band, params.client_power_w, min_gain)
}

/// Broadcast time: full half band at ES power, paced by the worst downlink.
pub fn broadcast_latency(cell: usize, receivers: &[ClientId], gains: &GainTable, params: &ChannelParams) -> f64 {
    if receivers.is_empty() {
        return 0.0;
    }
    let band = params.bandwidth_hz / 2.0;
    let min_gain = gains.min_gain(receivers, cell);
    params.model_bits / params.rate(band, params.es_power_w, min_gain)
}

/// Relay time for one directed hop `src ES -> ROC -> dst ES` on a quarter band.
pub fn relay_latency(
    src_cell: usize,
    dst_cell: usize,
    roc: ClientId,
    gains: &GainTable,
    params: &ChannelParams,
) -> f64 {
    let g_src = gains.gain(roc, src_cell);
    let g_dst = gains.gain(roc, dst_cell);
    let (g_down, g_up) = match params.relay_gain_mode {
        RelayGainMode::Shared => {
            let g = g_src.min(g_dst);
            (g, g)
        }
        RelayGainMode::Distinct => (g_src, g_dst),
    };
    let b = params.bandwidth_hz;
    let n0 = params.noise_w_per_hz;
    let down = params.log(1.0 + 4.0 * g_down * params.es_power_w / (b * n0));
    let up = params.log(1.0 + 4.0 * g_up * params.client_power_w / (b * n0));
    params.model_bits / ((b / 4.0) * (down + up))
}

/// Max incoming relay latency for an ES; boundary pairs contribute zero.
pub fn es_relay_latency(topo: &Topology, cell: usize, gains: &GainTable, params: &ChannelParams) -> f64 {
    let mut t = 0.0f64;
    if cell > 0 && !topo.overlap_clients[cell - 1].is_empty() {
        let roc = topo.relay(cell - 1);
        t = t.max(relay_latency(cell - 1, cell, roc, gains, params));
    }
    if cell < topo.num_pairs() && !topo.overlap_clients[cell].is_empty() {
        let roc = topo.relay(cell);
        t = t.max(relay_latency(cell + 1, cell, roc, gains, params));
    }
    t
}

/// Per-ES timing breakdown for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EsRoundTimes {
    pub t_cast: f64,
    pub t_comp: f64,
    pub t_upload: f64,
    pub t_relay: f64,
    pub t_edge: f64,
}

/// Assemble the per-ES breakdown: t_edge = t_cast + t_comp + t_upload, with
/// compute paced by the slowest trainer among the cell's uploaders.
pub fn round_times(
    topo: &Topology,
    gains: &GainTable,
    compute_times: &[f64],
    epochs: usize,
    params: &ChannelParams,
    uploaders: &[Vec<ClientId>],
) -> Vec<EsRoundTimes> {
    (0..topo.num_servers)
        .map(|cell| {
            let receivers = topo.covered_clients(cell);
            let t_cast = broadcast_latency(cell, &receivers, gains, params);
            let t_comp = uploaders[cell]
                .iter()
                .map(|&k| epochs as f64 * compute_times[k])
                .fold(0.0, f64::max);
            let t_upload = upload_latency(cell, &uploaders[cell], gains, params);
            let t_relay = es_relay_latency(topo, cell, gains, params);
            EsRoundTimes {
                t_cast,
                t_comp,
                t_upload,
                t_relay,
                t_edge: t_cast + t_comp + t_upload,
            }
        })
        .collect()
}

/// Cloud round overhead: t_c times the slowest edge round.
pub fn cloud_latency(times: &[EsRoundTimes], params: &ChannelParams) -> f64 {
    params.cloud_edge_ratio * times.iter().map(|t| t.t_edge).fold(0.0, f64::max)
}
