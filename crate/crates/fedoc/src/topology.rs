//! Chain topology of edge servers with overlapping coverage regions.
//!
//! ES centers sit on a line, spaced so that consecutive coverage disks
//! overlap; each overlap region holds a set of overlapping clients, exactly
//! one of which is designated as the relay (ROC). Local clients live in the
//! exclusive part of a single cell. The topology is immutable after
//! construction and safe to share across workers.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RelayPolicy};
use crate::error::{FedocError, Result};
use crate::rng;

pub type ClientId = usize;

/// Role of a client within the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "role")]
pub enum ClientRole {
    /// Local client of a single cell.
    Local { cell: usize },
    /// Normal overlapping client of adjacent pair `(pair, pair + 1)`.
    Noc { pair: usize },
    /// Relay overlapping client of adjacent pair `(pair, pair + 1)`.
    Roc { pair: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub num_servers: usize,
    pub cell_radius_m: f64,
    /// Planar ES coordinates in meters.
    pub es_positions: Vec<[f64; 2]>,
    /// U_l: local client ids per cell.
    pub local_clients: Vec<Vec<ClientId>>,
    /// V_{l,l+1}: overlap client ids per adjacent pair.
    pub overlap_clients: Vec<Vec<ClientId>>,
    /// Designated relay per pair; exactly one entry when the topology is valid.
    pub relay_clients: Vec<Vec<ClientId>>,
    /// Planar client coordinates in meters, indexed by client id.
    pub client_positions: Vec<[f64; 2]>,
}

impl Topology {
    pub fn num_clients(&self) -> usize {
        self.client_positions.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.num_servers.saturating_sub(1)
    }

    /// The single relay client of a pair. Panics on invalid topologies.
    pub fn relay(&self, pair: usize) -> ClientId {
        assert_eq!(
            self.relay_clients[pair].len(),
            1,
            "pair {pair} must have exactly one relay"
        );
        self.relay_clients[pair][0]
    }

    /// N_{l,l+1}: overlap clients of a pair minus its relay.
    pub fn nocs(&self, pair: usize) -> Vec<ClientId> {
        let roc = self.relay(pair);
        self.overlap_clients[pair]
            .iter()
            .copied()
            .filter(|&k| k != roc)
            .collect()
    }

    /// Cells whose coverage includes client `k` (one for LCs, two for OCs).
    pub fn covering_cells(&self, k: ClientId) -> Vec<usize> {
        match self.role_of(k) {
            Some(ClientRole::Local { cell }) => vec![cell],
            Some(ClientRole::Noc { pair }) | Some(ClientRole::Roc { pair }) => vec![pair, pair + 1],
            None => vec![],
        }
    }

    pub fn role_of(&self, k: ClientId) -> Option<ClientRole> {
        for (cell, ids) in self.local_clients.iter().enumerate() {
            if ids.contains(&k) {
                return Some(ClientRole::Local { cell });
            }
        }
        for (pair, ids) in self.overlap_clients.iter().enumerate() {
            if ids.contains(&k) {
                if self.relay_clients[pair].contains(&k) {
                    return Some(ClientRole::Roc { pair });
                }
                return Some(ClientRole::Noc { pair });
            }
        }
        None
    }

    /// Role of every client, indexed by id.
    pub fn roles(&self) -> Vec<ClientRole> {
        let mut out: BTreeMap<ClientId, ClientRole> = BTreeMap::new();
        for (cell, ids) in self.local_clients.iter().enumerate() {
            for &k in ids {
                out.insert(k, ClientRole::Local { cell });
            }
        }
        for (pair, ids) in self.overlap_clients.iter().enumerate() {
            for &k in ids {
                if self.relay_clients[pair].contains(&k) {
                    out.insert(k, ClientRole::Roc { pair });
                } else {
                    out.insert(k, ClientRole::Noc { pair });
                }
            }
        }
        (0..self.num_clients())
            .map(|k| *out.get(&k).expect("every client has a role"))
            .collect()
    }

    /// All clients covered by cell `l` (its LCs plus adjacent overlap sets), ascending.
    pub fn covered_clients(&self, cell: usize) -> Vec<ClientId> {
        let mut ids = self.local_clients[cell].clone();
        if cell > 0 {
            ids.extend_from_slice(&self.overlap_clients[cell - 1]);
        }
        if cell < self.num_pairs() {
            ids.extend_from_slice(&self.overlap_clients[cell]);
        }
        ids.sort_unstable();
        ids
    }

    fn distance(&self, k: ClientId, cell: usize) -> f64 {
        let [px, py] = self.client_positions[k];
        let [ex, ey] = self.es_positions[cell];
        ((px - ex).powi(2) + (py - ey).powi(2)).sqrt()
    }

    /// Audit document with explicit roles, for replay and inspection.
    pub fn to_json(&self) -> String {
        let doc = TopologyDoc {
            topology: self.clone(),
            roles: self.roles(),
        };
        serde_json::to_string_pretty(&doc).expect("topology serializes")
    }

    pub fn from_json(s: &str) -> Result<Topology> {
        let doc: TopologyDoc =
            serde_json::from_str(s).map_err(|e| FedocError::Other(format!("topology json: {e}")))?;
        Ok(doc.topology)
    }
}

#[derive(Serialize, Deserialize)]
struct TopologyDoc {
    topology: Topology,
    roles: Vec<ClientRole>,
}

/// An invariant violation found by [`validate_topology`]; data, not an error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    DuplicateMembership { client: ClientId, first: String, second: String },
    UnassignedClient { client: ClientId },
    RelayCardinality { pair: usize, count: usize },
    RelayNotInOverlap { pair: usize, client: ClientId },
    LocalOutsideHomeCell { client: ClientId, cell: usize, distance_m: f64 },
    LocalInsideForeignCell { client: ClientId, foreign_cell: usize, distance_m: f64 },
    OverlapOutsideCoveringCell { client: ClientId, cell: usize, distance_m: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateMembership { client, first, second } => {
                write!(f, "duplicate membership: client {client} appears in {first} and {second}")
            }
            Violation::UnassignedClient { client } => {
                write!(f, "partition: client {client} belongs to no local or overlap set")
            }
            Violation::RelayCardinality { pair, count } => {
                write!(f, "relay cardinality: pair ({}, {}) declares {count} relays, expected 1", pair, pair + 1)
            }
            Violation::RelayNotInOverlap { pair, client } => {
                write!(f, "relay membership: client {client} is not in overlap set ({}, {})", pair, pair + 1)
            }
            Violation::LocalOutsideHomeCell { client, cell, distance_m } => {
                write!(f, "geometry: local client {client} is {distance_m:.1} m from home ES {cell}, beyond the cell radius")
            }
            Violation::LocalInsideForeignCell { client, foreign_cell, distance_m } => {
                write!(f, "geometry: local client {client} lies {distance_m:.1} m from foreign ES {foreign_cell}, inside its radius")
            }
            Violation::OverlapOutsideCoveringCell { client, cell, distance_m } => {
                write!(f, "geometry: overlap client {client} is {distance_m:.1} m from covering ES {cell}, beyond the cell radius")
            }
        }
    }
}

/// Solve the equal-effective-load equations U_l = K/L - (V_{l-1,l} + V_{l,l+1})/2.
pub fn balanced_local_counts(
    num_clients: usize,
    num_servers: usize,
    overlap_sizes: &[usize],
) -> Result<Vec<usize>> {
    let l = num_servers;
    assert_eq!(overlap_sizes.len() + 1, l, "need one overlap size per adjacent pair");
    if num_clients % l != 0 {
        return Err(FedocError::CountMismatch(format!(
            "balance requires num_clients divisible by num_servers ({num_clients} % {l} != 0)"
        )));
    }
    let per_cell = num_clients / l;
    let mut counts = Vec::with_capacity(l);
    for cell in 0..l {
        let left = if cell > 0 { overlap_sizes[cell - 1] } else { 0 };
        let right = if cell < l - 1 { overlap_sizes[cell] } else { 0 };
        if (left + right) % 2 != 0 {
            return Err(FedocError::CountMismatch(format!(
                "balance for cell {cell} needs (V_{{{cell_l},{cell}}} + V_{{{cell},{cell_r}}}) = {sum} to be even",
                cell_l = cell.wrapping_sub(1),
                cell_r = cell + 1,
                sum = left + right
            )));
        }
        let half = (left + right) / 2;
        if half > per_cell {
            return Err(FedocError::CountMismatch(format!(
                "balance for cell {cell}: effective load {per_cell} cannot absorb {half} overlap halves"
            )));
        }
        counts.push(per_cell - half);
    }
    Ok(counts)
}

// Rejection-sampling budget per client before geometry is declared infeasible.
const MAX_SAMPLE_ATTEMPTS: usize = 100_000;

/// Build a topology from the experiment config; fully determined by the seed.
pub fn build_topology(cfg: &ExperimentConfig, seed: u64) -> Result<Topology> {
    let spec = &cfg.topology;
    let l = spec.num_servers;
    let k = spec.num_clients;
    let radius = spec.cell_radius_m;
    let overlaps = &spec.overlap_sizes;
    if l == 0 {
        return Err(FedocError::InfeasibleGeometry("need at least one server".into()));
    }
    if overlaps.len() + 1 != l {
        return Err(FedocError::CountMismatch(format!(
            "expected {} overlap sizes for {} servers, got {}",
            l - 1,
            l,
            overlaps.len()
        )));
    }
    let overlap_total: usize = overlaps.iter().sum();
    if overlap_total > 0 && (spec.overlap_fraction <= 0.0 || spec.overlap_fraction >= 0.5) {
        return Err(FedocError::InfeasibleGeometry(format!(
            "overlap clients requested but overlap_fraction {} leaves adjacent disks without a usable lens",
            spec.overlap_fraction
        )));
    }

    let local_counts = match &spec.local_counts {
        Some(counts) => {
            if counts.len() != l {
                return Err(FedocError::CountMismatch(format!(
                    "local_counts has {} entries for {} servers",
                    counts.len(),
                    l
                )));
            }
            counts.clone()
        }
        None if spec.balance => balanced_local_counts(k, l, overlaps)?,
        None => {
            // Spread local clients as evenly as possible; first cells take the remainder.
            let locals = k.checked_sub(overlap_total).ok_or_else(|| {
                FedocError::CountMismatch(format!(
                    "overlap sizes total {overlap_total} but only {k} clients exist"
                ))
            })?;
            let base = locals / l;
            let rem = locals % l;
            (0..l).map(|i| base + usize::from(i < rem)).collect()
        }
    };
    let total: usize = local_counts.iter().sum::<usize>() + overlap_total;
    if total != k {
        return Err(FedocError::CountMismatch(format!(
            "local counts {local_counts:?} plus overlaps {overlaps:?} total {total}, expected {k}"
        )));
    }

    let spacing = 2.0 * radius * (1.0 - spec.overlap_fraction);
    let es_positions: Vec<[f64; 2]> = (0..l).map(|i| [i as f64 * spacing, 0.0]).collect();

    // Assign ids cell-major, then overlap pairs.
    let mut next_id = 0usize;
    let mut local_clients = Vec::with_capacity(l);
    for &count in &local_counts {
        local_clients.push((next_id..next_id + count).collect::<Vec<_>>());
        next_id += count;
    }
    let mut overlap_clients = Vec::with_capacity(overlaps.len());
    for &count in overlaps {
        overlap_clients.push((next_id..next_id + count).collect::<Vec<_>>());
        next_id += count;
    }

    let mut positions = vec![[0.0f64, 0.0f64]; k];
    let mut rs = rng::stream(seed, "positions", &[]);
    let inside = |p: [f64; 2], c: [f64; 2]| -> bool {
        (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= radius * radius
    };

    for (cell, ids) in local_clients.iter().enumerate() {
        let center = es_positions[cell];
        for &id in ids {
            let mut placed = false;
            for _ in 0..MAX_SAMPLE_ATTEMPTS {
                // Uniform in the disk, rejected if a foreign disk also covers it.
                let r = radius * rs.gen::<f64>().sqrt();
                let th = std::f64::consts::TAU * rs.gen::<f64>();
                let p = [center[0] + r * th.cos(), center[1] + r * th.sin()];
                let foreign = (0..l).any(|other| other != cell && inside(p, es_positions[other]));
                if !foreign {
                    positions[id] = p;
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(FedocError::InfeasibleGeometry(format!(
                    "could not place local client {id} in the exclusive region of cell {cell}"
                )));
            }
        }
    }

    for (pair, ids) in overlap_clients.iter().enumerate() {
        let (a, b) = (es_positions[pair], es_positions[pair + 1]);
        // Lens bounding box between the two centers.
        let (x_lo, x_hi) = (b[0] - radius, a[0] + radius);
        if x_lo >= x_hi && !ids.is_empty() {
            return Err(FedocError::InfeasibleGeometry(format!(
                "overlap clients requested for pair ({pair}, {}) but the disks are disjoint",
                pair + 1
            )));
        }
        for &id in ids {
            let mut placed = false;
            for _ in 0..MAX_SAMPLE_ATTEMPTS {
                let p = [
                    x_lo + (x_hi - x_lo) * rs.gen::<f64>(),
                    -radius + 2.0 * radius * rs.gen::<f64>(),
                ];
                let third = (0..l).any(|other| other != pair && other != pair + 1 && inside(p, es_positions[other]));
                if inside(p, a) && inside(p, b) && !third {
                    positions[id] = p;
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(FedocError::InfeasibleGeometry(format!(
                    "could not place overlap client {id} in region ({pair}, {})",
                    pair + 1
                )));
            }
        }
    }

    let mut relay_clients = Vec::with_capacity(overlap_clients.len());
    for (pair, ids) in overlap_clients.iter().enumerate() {
        if ids.is_empty() {
            relay_clients.push(Vec::new());
            continue;
        }
        let roc = match spec.relay_policy {
            RelayPolicy::Random => {
                let mut rr = rng::stream(seed, "relay", &[pair as u64]);
                ids[rr.gen_range(0..ids.len())]
            }
            RelayPolicy::LowestId => *ids.iter().min().unwrap(),
        };
        relay_clients.push(vec![roc]);
    }

    Ok(Topology {
        num_servers: l,
        cell_radius_m: radius,
        es_positions,
        local_clients,
        overlap_clients,
        relay_clients,
        client_positions: positions,
    })
}

/// Check every topology invariant; an empty list means the topology is valid.
pub fn validate_topology(t: &Topology) -> Vec<Violation> {
    let mut out = Vec::new();
    let eps = 1e-9 * t.cell_radius_m.max(1.0);

    // Membership: every id in exactly one set.
    let mut seen: BTreeMap<ClientId, String> = BTreeMap::new();
    for (cell, ids) in t.local_clients.iter().enumerate() {
        for &k in ids {
            if let Some(first) = seen.insert(k, format!("U_{cell}")) {
                out.push(Violation::DuplicateMembership {
                    client: k,
                    first,
                    second: format!("U_{cell}"),
                });
            }
        }
    }
    for (pair, ids) in t.overlap_clients.iter().enumerate() {
        let label = format!("V_({},{})", pair, pair + 1);
        for &k in ids {
            if let Some(first) = seen.insert(k, label.clone()) {
                out.push(Violation::DuplicateMembership {
                    client: k,
                    first,
                    second: label.clone(),
                });
            }
        }
    }
    for k in 0..t.num_clients() {
        if !seen.contains_key(&k) {
            out.push(Violation::UnassignedClient { client: k });
        }
    }

    // Relays: exactly one per non-empty pair, member of its overlap set.
    for (pair, relays) in t.relay_clients.iter().enumerate() {
        if t.overlap_clients[pair].is_empty() {
            if !relays.is_empty() {
                out.push(Violation::RelayCardinality { pair, count: relays.len() });
            }
            continue;
        }
        if relays.len() != 1 {
            out.push(Violation::RelayCardinality { pair, count: relays.len() });
        }
        for &r in relays {
            if !t.overlap_clients[pair].contains(&r) {
                out.push(Violation::RelayNotInOverlap { pair, client: r });
            }
        }
    }

    // Geometry.
    for (cell, ids) in t.local_clients.iter().enumerate() {
        for &k in ids {
            let d = t.distance(k, cell);
            if d > t.cell_radius_m + eps {
                out.push(Violation::LocalOutsideHomeCell { client: k, cell, distance_m: d });
            }
            for other in 0..t.num_servers {
                if other == cell {
                    continue;
                }
                let d = t.distance(k, other);
                if d <= t.cell_radius_m - eps {
                    out.push(Violation::LocalInsideForeignCell {
                        client: k,
                        foreign_cell: other,
                        distance_m: d,
                    });
                }
            }
        }
    }
    for (pair, ids) in t.overlap_clients.iter().enumerate() {
        for &k in ids {
            for cell in [pair, pair + 1] {
                let d = t.distance(k, cell);
                if d > t.cell_radius_m + eps {
                    out.push(Violation::OverlapOutsideCoveringCell { client: k, cell, distance_m: d });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use proptest::prelude::*;

    fn cfg_with(l: usize, k: usize, overlaps: Vec<usize>, balance: bool) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.topology.num_servers = l;
        cfg.topology.num_clients = k;
        cfg.topology.overlap_sizes = overlaps;
        cfg.topology.balance = balance;
        cfg
    }

    #[test]
    fn balance_solves_the_three_cell_case() {
        // 20 clients per effective cell: U = (15, 10, 15) with V = (10, 10).
        let counts = balanced_local_counts(60, 3, &[10, 10]).unwrap();
        assert_eq!(counts, vec![15, 10, 15]);
        let topo = build_topology(&cfg_with(3, 60, vec![10, 10], true), 7).unwrap();
        assert_eq!(topo.local_clients.iter().map(Vec::len).collect::<Vec<_>>(), vec![15, 10, 15]);
        assert!(validate_topology(&topo).is_empty());
    }

    #[test]
    fn single_cell_degenerates() {
        let topo = build_topology(&cfg_with(1, 5, vec![], true), 3).unwrap();
        assert_eq!(topo.local_clients[0], vec![0, 1, 2, 3, 4]);
        assert!(topo.overlap_clients.is_empty());
        assert!(topo.relay_clients.is_empty());
        assert!(validate_topology(&topo).is_empty());
    }

    #[test]
    fn minimal_overlap_makes_every_oc_a_relay() {
        let mut cfg = cfg_with(3, 60, vec![1, 1], false);
        cfg.topology.local_counts = Some(vec![20, 19, 19]);
        let topo = build_topology(&cfg, 11).unwrap();
        for pair in 0..2 {
            assert_eq!(topo.overlap_clients[pair].len(), 1);
            assert_eq!(topo.relay(pair), topo.overlap_clients[pair][0]);
            assert!(topo.nocs(pair).is_empty());
        }
    }

    #[test]
    fn constructor_output_is_valid_and_deterministic() {
        let cfg = cfg_with(4, 48, vec![2, 4, 2], true);
        let a = build_topology(&cfg, 42).unwrap();
        let b = build_topology(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert!(validate_topology(&a).is_empty());
        let c = build_topology(&cfg, 43).unwrap();
        assert_ne!(a.client_positions, c.client_positions);
    }

    #[test]
    fn duplicate_membership_is_reported() {
        let mut topo = build_topology(&cfg_with(3, 60, vec![10, 10], true), 1).unwrap();
        let dup = topo.overlap_clients[0][0];
        topo.local_clients[0].push(dup);
        let violations = validate_topology(&topo);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateMembership { client, .. } if *client == dup)));
    }

    #[test]
    fn relay_cardinality_is_reported() {
        let mut topo = build_topology(&cfg_with(3, 60, vec![10, 10], true), 1).unwrap();
        let extra = topo
            .overlap_clients[0]
            .iter()
            .copied()
            .find(|&k| k != topo.relay(0))
            .unwrap();
        topo.relay_clients[0].push(extra);
        let violations = validate_topology(&topo);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::RelayCardinality { pair: 0, count: 2 })));
    }

    #[test]
    fn geometry_holds_for_every_role() {
        let topo = build_topology(&cfg_with(3, 36, vec![4, 4], false), 5).unwrap();
        let r = topo.cell_radius_m;
        for (pair, ids) in topo.overlap_clients.iter().enumerate() {
            for &k in ids {
                assert!(topo.distance(k, pair) <= r + 1e-9);
                assert!(topo.distance(k, pair + 1) <= r + 1e-9);
            }
        }
        for (cell, ids) in topo.local_clients.iter().enumerate() {
            for &k in ids {
                assert!(topo.distance(k, cell) <= r + 1e-9);
                for other in 0..topo.num_servers {
                    if other != cell {
                        assert!(topo.distance(k, other) > r - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_geometry_is_an_error() {
        let mut cfg = cfg_with(2, 10, vec![2], false);
        cfg.topology.overlap_fraction = 0.0; // tangent disks, no lens
        let err = build_topology(&cfg, 1).unwrap_err();
        assert!(matches!(err, FedocError::InfeasibleGeometry(_)), "{err}");
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let mut cfg = cfg_with(2, 10, vec![2], false);
        cfg.topology.local_counts = Some(vec![3, 3]); // 3 + 3 + 2 != 10
        let err = build_topology(&cfg, 1).unwrap_err();
        assert!(matches!(err, FedocError::CountMismatch(_)), "{err}");
    }

    #[test]
    fn json_roundtrip_preserves_topology() {
        let topo = build_topology(&cfg_with(3, 30, vec![2, 2], false), 9).unwrap();
        let json = topo.to_json();
        let back = Topology::from_json(&json).unwrap();
        assert_eq!(topo, back);
        assert!(json.contains("roc"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn partition_property(
            l in 1usize..=4,
            seed in 0u64..1000,
            v0 in 0usize..=3,
            v1 in 0usize..=3,
            v2 in 0usize..=3,
            extra in 0usize..=12,
        ) {
            let overlaps: Vec<usize> = [v0, v1, v2][..l - 1].to_vec();
            let k = overlaps.iter().sum::<usize>() + l + extra;
            let topo = build_topology(&cfg_with(l, k, overlaps, false), seed).unwrap();
            // Every id in exactly one set, totals add to K.
            let mut count = vec![0usize; k];
            for ids in topo.local_clients.iter().chain(topo.overlap_clients.iter()) {
                for &id in ids {
                    count[id] += 1;
                }
            }
            prop_assert!(count.iter().all(|&c| c == 1));
            prop_assert!(validate_topology(&topo).is_empty());
        }
    }
}
