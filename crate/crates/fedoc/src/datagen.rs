//! Dataset ingestion and non-IID partitioning.
//!
//! Two sources: MNIST-style IDX files (big-endian magic + dims header, pixel
//! bytes scaled to [0, 1]) and synthetic Gaussian blobs. Partitioning follows
//! the two heterogeneity regimes: each cell is restricted to a class
//! allowance, and each client draws a fixed number of classes from its cell's
//! allowance. Overlapping clients pick a random home cell for their draw
//! (recorded in the plan); a `union` mode lets them mix both allowances.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, DatasetSpec, OcClassSource, PartitionSpec};
use crate::error::{FedocError, Result};
use crate::rng;
use crate::topology::{ClientId, ClientRole, Topology};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset with row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// N x dims, row-major.
    pub features: Vec<f64>,
    /// Class indices in 0..num_classes.
    pub labels: Vec<usize>,
    pub dims: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(FedocError::Other(format!("dataset {} is empty", self.name)));
        }
        if self.features.len() != self.len() * self.dims {
            return Err(FedocError::Other(format!(
                "dataset {}: feature buffer size does not match N x dims",
                self.name
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(FedocError::Other(format!(
                "dataset {}: label {bad} out of range (C = {})",
                self.name, self.num_classes
            )));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(FedocError::Other(format!("dataset {}: non-finite feature", self.name)));
        }
        Ok(())
    }

    /// Row indices grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn global_histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1.0;
        }
        let n = self.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    /// Stratified subset preserving class proportions as closely as possible.
    pub fn stratified_subset(&self, size: usize, seed: u64) -> Dataset {
        if size >= self.len() {
            return self.clone();
        }
        let by_class = self.class_indices();
        let mut keep: Vec<usize> = Vec::with_capacity(size);
        let mut rs = rng::stream(seed, "stratified", &[]);
        for (c, idx) in by_class.iter().enumerate() {
            let want = ((size as f64) * (idx.len() as f64) / (self.len() as f64)).round() as usize;
            let want = want.min(idx.len());
            let mut pool = idx.clone();
            pool.shuffle(&mut rs);
            pool.truncate(want);
            let _ = c;
            keep.extend(pool);
        }
        keep.sort_unstable();
        keep.truncate(size);
        let mut features = Vec::with_capacity(keep.len() * self.dims);
        let mut labels = Vec::with_capacity(keep.len());
        for &i in &keep {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: format!("{}-subset{}", self.name, keep.len()),
            features,
            labels,
            dims: self.dims,
            num_classes: self.num_classes,
        }
    }
}

/// A client's materialized training shard.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dims: usize,
    pub num_classes: usize,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn from_dataset(ds: &Dataset) -> Shard {
        Shard {
            features: ds.features.clone(),
            labels: ds.labels.clone(),
            dims: ds.dims,
            num_classes: ds.num_classes,
        }
    }

    pub fn from_indices(ds: &Dataset, idx: &[usize]) -> Shard {
        let mut features = Vec::with_capacity(idx.len() * ds.dims);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(ds.row(i));
            labels.push(ds.labels[i]);
        }
        Shard {
            features,
            labels,
            dims: ds.dims,
            num_classes: ds.num_classes,
        }
    }

    pub fn histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1.0;
        }
        let n = self.len().max(1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }
}

// ---------------------------------------------------------------------------
// IDX binary format
// ---------------------------------------------------------------------------

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| FedocError::io(path, e))?;
    Ok(buf)
}

fn be_u32(buf: &[u8], off: usize, path: &Path) -> Result<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FedocError::IdxFormat {
            path: path.to_path_buf(),
            detail: format!("truncated header at byte {off}"),
        })
}

/// Read an IDX image file: returns (pixels, count, rows, cols).
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let buf = read_file(path)?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(FedocError::IdxFormat {
            path: path.to_path_buf(),
            detail: format!("bad magic: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let n = be_u32(&buf, 4, path)? as usize;
    let rows = be_u32(&buf, 8, path)? as usize;
    let cols = be_u32(&buf, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if buf.len() < expected {
        return Err(FedocError::IdxFormat {
            path: path.to_path_buf(),
            detail: format!("truncated: expected {expected} bytes, file has {}", buf.len()),
        });
    }
    Ok((buf[16..expected].to_vec(), n, rows, cols))
}

/// Read an IDX label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = read_file(path)?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(FedocError::IdxFormat {
            path: path.to_path_buf(),
            detail: format!("bad magic: expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let n = be_u32(&buf, 4, path)? as usize;
    let expected = 8 + n;
    if buf.len() < expected {
        return Err(FedocError::IdxFormat {
            path: path.to_path_buf(),
            detail: format!("truncated: expected {expected} bytes, file has {}", buf.len()),
        });
    }
    Ok(buf[8..expected].to_vec())
}

pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    assert_eq!(pixels.len(), n * rows * cols);
    let mut f = std::fs::File::create(path).map_err(|e| FedocError::io(path, e))?;
    let mut hdr = Vec::with_capacity(16);
    hdr.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    hdr.extend_from_slice(&(n as u32).to_be_bytes());
    hdr.extend_from_slice(&(rows as u32).to_be_bytes());
    hdr.extend_from_slice(&(cols as u32).to_be_bytes());
    f.write_all(&hdr)
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| FedocError::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| FedocError::io(path, e))?;
    let mut hdr = Vec::with_capacity(8);
    hdr.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    hdr.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    f.write_all(&hdr)
        .and_then(|_| f.write_all(labels))
        .map_err(|e| FedocError::io(path, e))
}

/// Load an MNIST-format image/label pair into a dataset with C = 10.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (pixels, n_img, rows, cols) = read_idx_images(images_path)?;
    let labels_raw = read_idx_labels(labels_path)?;
    if n_img != labels_raw.len() {
        return Err(FedocError::IdxFormat {
            path: images_path.to_path_buf(),
            detail: format!("image/label count mismatch: {n_img} images vs {} labels", labels_raw.len()),
        });
    }
    let dims = rows * cols;
    let features: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&y| y as usize).collect();
    let ds = Dataset {
        name: "mnist".into(),
        features,
        labels,
        dims,
        num_classes: 10,
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

/// Gaussian blobs: one unit-sphere mean per class, isotropic noise `spread`.
pub fn make_synthetic(classes: usize, dims: usize, per_class: usize, spread: f64, seed: u64) -> Dataset {
    make_synthetic_split(classes, dims, per_class, 0, spread, seed).0
}

/// Train/test pair sharing the same class means but independent noise.
pub fn make_synthetic_split(
    classes: usize,
    dims: usize,
    per_class_train: usize,
    per_class_test: usize,
    spread: f64,
    seed: u64,
) -> (Dataset, Dataset) {
    assert!(classes >= 2, "need at least two classes");
    assert!(dims >= 1, "need at least one feature dimension");
    let mut mean_rng = rng::stream(seed, "means", &[]);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut m: Vec<f64> = (0..dims).map(|_| rng::next_gaussian(&mut mean_rng)).collect();
        let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        m.iter_mut().for_each(|x| *x /= norm);
        means.push(m);
    }
    let sample = |per_class: usize, tag: &str| -> Dataset {
        let mut features = Vec::with_capacity(classes * per_class * dims);
        let mut labels = Vec::with_capacity(classes * per_class);
        let mut noise = rng::stream(seed, tag, &[]);
        for (c, m) in means.iter().enumerate() {
            for _ in 0..per_class {
                for &mu in m {
                    features.push(mu + spread * rng::next_gaussian(&mut noise));
                }
                labels.push(c);
            }
        }
        Dataset {
            name: format!("synthetic-c{classes}-d{dims}"),
            features,
            labels,
            dims,
            num_classes: classes,
        }
    };
    (sample(per_class_train, "train-noise"), sample(per_class_test, "test-noise"))
}

/// Load the dataset named by the spec; returns (train, test).
pub fn load_dataset(spec: &DatasetSpec, data_dir: Option<&Path>, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec.kind {
        DatasetKind::Synthetic => Ok(make_synthetic_split(
            spec.classes,
            spec.dims,
            spec.per_class,
            spec.test_per_class.max(1),
            spec.spread,
            seed,
        )),
        DatasetKind::Mnist => {
            let dir: PathBuf = data_dir
                .map(Path::to_path_buf)
                .ok_or_else(|| FedocError::Other("mnist dataset requires a data directory".into()))?;
            let train = load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_mnist_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            let train = if spec.full_set {
                train
            } else {
                train.stratified_subset(spec.desk_subset, rng::subseed(seed, "desk-subset", &[]))
            };
            Ok((train, test))
        }
    }
}

// ---------------------------------------------------------------------------
// Non-IID partitioning
// ---------------------------------------------------------------------------

/// Per-client index lists plus the class histograms the analysis needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// Row indices into the source dataset, per client.
    pub client_indices: Vec<Vec<usize>>,
    /// P_{y=i}^{(k)} per client.
    pub client_hist: Vec<Vec<f64>>,
    /// P_{y=i}^{(c_j)} per cell, over each cell's draw members.
    pub cell_hist: Vec<Vec<f64>>,
    /// P_{y=i} over all assigned samples.
    pub global_hist: Vec<f64>,
    /// The cell whose allowance each client drew from.
    pub draw_cell: Vec<usize>,
    /// Class allowance per cell.
    pub cell_allowances: Vec<Vec<usize>>,
    pub num_classes: usize,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn client_size(&self, k: ClientId) -> usize {
        self.client_indices[k].len()
    }

    pub fn shard(&self, ds: &Dataset, k: ClientId) -> Shard {
        Shard::from_indices(ds, &self.client_indices[k])
    }

    /// Sum_i |P^{(k)}_{y=i} - P^{(c_j)}_{y=i}| against the client's draw cell.
    pub fn heterogeneity(&self, k: ClientId) -> f64 {
        let cell = self.draw_cell[k];
        self.client_hist[k]
            .iter()
            .zip(&self.cell_hist[cell])
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Split the dataset across clients under the cell/class allowance regime.
pub fn partition_noniid(
    ds: &Dataset,
    topo: &Topology,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<PartitionPlan> {
    let c = ds.num_classes;
    let k = topo.num_clients();
    let l = topo.num_servers;
    if spec.classes_per_client > spec.classes_per_cell || spec.classes_per_cell > c {
        return Err(FedocError::InvalidConfig {
            violations: vec![format!(
                "partition: need classes_per_client ({}) <= classes_per_cell ({}) <= C ({c})",
                spec.classes_per_client, spec.classes_per_cell
            )],
        });
    }

    // Cell allowances: a random classes_per_cell-subset per cell, sorted for
    // deterministic demand splitting.
    let mut allowances: Vec<Vec<usize>> = Vec::with_capacity(l);
    for cell in 0..l {
        let mut all: Vec<usize> = (0..c).collect();
        all.shuffle(&mut rng::stream(seed, "allowance", &[cell as u64]));
        let mut chosen = all[..spec.classes_per_cell].to_vec();
        chosen.sort_unstable();
        allowances.push(chosen);
    }

    // Draw cell and class choice per client.
    let roles = topo.roles();
    let mut draw_cell = vec![0usize; k];
    let mut client_classes: Vec<Vec<usize>> = Vec::with_capacity(k);
    for id in 0..k {
        let mut rs = rng::stream(seed, "client-classes", &[id as u64]);
        let (home, candidates): (usize, Vec<usize>) = match roles[id] {
            ClientRole::Local { cell } => (cell, allowances[cell].clone()),
            ClientRole::Noc { pair } | ClientRole::Roc { pair } => {
                let home = if rs.gen_bool(0.5) { pair } else { pair + 1 };
                let cands = match spec.oc_class_source {
                    OcClassSource::Home => allowances[home].clone(),
                    OcClassSource::Union => {
                        let mut u = allowances[pair].clone();
                        u.extend_from_slice(&allowances[pair + 1]);
                        u.sort_unstable();
                        u.dedup();
                        u
                    }
                };
                (home, cands)
            }
        };
        draw_cell[id] = home;
        let mut pool = candidates;
        pool.shuffle(&mut rs);
        let mut mine = pool[..spec.classes_per_client.min(pool.len())].to_vec();
        mine.sort_unstable();
        client_classes.push(mine);
    }

    // Shard sizes: equal by default, linear skew when requested.
    let base = ds.len() / k;
    if base == 0 {
        return Err(FedocError::Other(format!(
            "dataset has {} samples for {k} clients; nothing to assign",
            ds.len()
        )));
    }
    let mut sizes: Vec<usize> = if spec.size_skew == 0.0 || k == 1 {
        vec![base; k]
    } else {
        (0..k)
            .map(|i| {
                let t = 2.0 * (i as f64) / ((k - 1) as f64) - 1.0;
                ((base as f64) * (1.0 + spec.size_skew * t)).round().max(1.0) as usize
            })
            .collect()
    };
    // Keep the union within the dataset.
    while sizes.iter().sum::<usize>() > ds.len() {
        let i = sizes
            .iter()
            .enumerate()
            .max_by_key(|(_, &s)| s)
            .map(|(i, _)| i)
            .unwrap();
        sizes[i] -= 1;
    }

    // Shuffled per-class pools, consumed in ascending client order.
    let mut pools = ds.class_indices();
    for (class, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut rng::stream(seed, "class-pool", &[class as u64]));
    }
    let mut cursor = vec![0usize; c];
    let mut client_indices: Vec<Vec<usize>> = Vec::with_capacity(k);
    for id in 0..k {
        let classes = &client_classes[id];
        let n = sizes[id];
        let per = n / classes.len();
        let rem = n % classes.len();
        let mut idx = Vec::with_capacity(n);
        for (slot, &class) in classes.iter().enumerate() {
            let want = per + usize::from(slot < rem);
            let available = pools[class].len() - cursor[class];
            if want > available {
                return Err(FedocError::InfeasiblePartition {
                    class,
                    needed: want,
                    available,
                });
            }
            idx.extend_from_slice(&pools[class][cursor[class]..cursor[class] + want]);
            cursor[class] += want;
        }
        idx.sort_unstable();
        client_indices.push(idx);
    }

    // Histograms: per client, per draw cell (sample-weighted), global.
    let hist_of = |idx: &[usize]| -> Vec<f64> {
        let mut h = vec![0.0; c];
        for &i in idx {
            h[ds.labels[i]] += 1.0;
        }
        let n = idx.len().max(1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    };
    let client_hist: Vec<Vec<f64>> = client_indices.iter().map(|idx| hist_of(idx)).collect();
    let mut cell_hist = vec![vec![0.0; c]; l];
    let mut cell_n = vec![0.0f64; l];
    for id in 0..k {
        let cell = draw_cell[id];
        let n = client_indices[id].len() as f64;
        cell_n[cell] += n;
        for &i in &client_indices[id] {
            cell_hist[cell][ds.labels[i]] += 1.0;
        }
    }
    for (h, &n) in cell_hist.iter_mut().zip(&cell_n) {
        if n > 0.0 {
            h.iter_mut().for_each(|v| *v /= n);
        }
    }
    let mut global_hist = vec![0.0; c];
    let mut total = 0.0;
    for idx in &client_indices {
        total += idx.len() as f64;
        for &i in idx {
            global_hist[ds.labels[i]] += 1.0;
        }
    }
    global_hist.iter_mut().for_each(|v| *v /= total.max(1.0));

    Ok(PartitionPlan {
        client_indices,
        client_hist,
        cell_hist,
        global_hist,
        draw_cell,
        cell_allowances: allowances,
        num_classes: c,
    })
}
