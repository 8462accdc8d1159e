//! Non-IID federated splits: per-class Dirichlet allocation across clients,
//! random per-(client, class) removal, and a stratified train/test split
//! inside every client.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassPrior;

/// Re-draws allowed when some client ends up with an empty shard.
pub const MAX_RETRIES: u64 = 16;
const RETRY_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Class concentrations in index order 0 Epidural, 1 Intraparenchymal,
/// 2 Intraventricular, 3 Subarachnoid, 4 Subdural.
pub const SPLIT1_ALPHAS: [f64; 5] = [0.5, 50.0, 50.0, 50.0, 50.0];
pub const SPLIT2_ALPHAS: [f64; 5] = [0.5, 5.0, 10.0, 30.0, 50.0];
pub const SPLIT2_MISSING_PROB: f64 = 0.3;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub per_class_alpha: Vec<f64>,
    pub missing_class_prob: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn split1(num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            num_clients,
            per_class_alpha: SPLIT1_ALPHAS.to_vec(),
            missing_class_prob: 0.0,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed,
        }
    }

    pub fn split2(num_clients: usize, seed: u64) -> Self {
        PartitionSpec {
            num_clients,
            per_class_alpha: SPLIT2_ALPHAS.to_vec(),
            missing_class_prob: SPLIT2_MISSING_PROB,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if self.per_class_alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Config("every Dirichlet alpha must be finite and > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_class_prob) {
            return Err(Error::Config("missing_class_prob must lie in [0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Sample-index assignment of one federation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub num_clients: usize,
    pub num_classes: usize,
    /// Seed of the draw that succeeded (differs from the spec seed after retries).
    pub draw_seed: u64,
    pub assignment: Vec<Vec<usize>>,
    pub removed_classes: Vec<Vec<usize>>,
    /// Samples dropped with a removed (client, class) pair.
    pub dropped: Vec<usize>,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub train_counts: Vec<Vec<u64>>,
}

impl Partition {
    /// Union of every client's test indices, in client order.
    pub fn aggregated_test(&self) -> Vec<usize> {
        self.test.iter().flatten().copied().collect()
    }

    pub fn train_sizes(&self) -> Vec<u64> {
        self.train.iter().map(|t| t.len() as u64).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path, labels: &[usize]) -> Result<Self> {
        let p = Partition::from_json(&std::fs::read_to_string(path)?)?;
        p.check_against(labels)?;
        Ok(p)
    }

    /// Structural consistency with a label vector.
    pub fn check_against(&self, labels: &[usize]) -> Result<()> {
        let bad = |m: String| Err(Error::Partition(m));
        let k = self.num_clients;
        if [self.assignment.len(), self.removed_classes.len(), self.train.len(), self.test.len(), self.train_counts.len()]
            .iter()
            .any(|&n| n != k)
        {
            return bad(format!("per-client tables must have {} entries", k));
        }
        let mut seen = vec![false; labels.len()];
        for idx in self.assignment.iter().flatten().chain(&self.dropped) {
            match seen.get_mut(*idx) {
                Some(s) if !*s => *s = true,
                Some(_) => return bad(format!("index {} appears twice", idx)),
                None => return bad(format!("index {} out of range", idx)),
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("some samples are neither assigned nor dropped".into());
        }
        for c in 0..k {
            let mut shard: Vec<usize> = self.train[c].iter().chain(&self.test[c]).copied().collect();
            let mut assigned = self.assignment[c].clone();
            shard.sort_unstable();
            assigned.sort_unstable();
            if shard != assigned {
                return bad(format!("client {} train/test do not cover its assignment", c));
            }
            let mut counts = vec![0u64; self.num_classes];
            for &i in &self.train[c] {
                match counts.get_mut(labels[i]) {
                    Some(n) => *n += 1,
                    None => return bad(format!("label {} out of range", labels[i])),
                }
            }
            if counts != self.train_counts[c] {
                return bad(format!("client {} train counts do not match labels", c));
            }
            if self.assignment[c].iter().any(|&i| self.removed_classes[c].contains(&labels[i])) {
                return bad(format!("client {} holds a removed class", c));
            }
        }
        Ok(())
    }
}

pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(Error::Partition("no samples to partition".into()));
    }
    let max_label = *labels.iter().max().unwrap();
    if max_label >= spec.per_class_alpha.len() {
        return Err(Error::Config(format!(
            "label {} has no Dirichlet alpha ({} given)",
            max_label,
            spec.per_class_alpha.len()
        )));
    }
    for attempt in 0..=MAX_RETRIES {
        let seed = spec.seed.wrapping_add(attempt.wrapping_mul(RETRY_SEED_STRIDE));
        let p = draw(labels, spec, seed)?;
        if p.train.iter().all(|t| !t.is_empty()) && p.test.iter().all(|t| !t.is_empty()) {
            return Ok(p);
        }
    }
    Err(Error::Partition(format!(
        "some client had an empty train or test shard in all {} draws",
        MAX_RETRIES + 1
    )))
}

fn draw(labels: &[usize], spec: &PartitionSpec, seed: u64) -> Result<Partition> {
    let k = spec.num_clients;
    let classes = spec.per_class_alpha.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }

    // held[client][class]
    let mut held: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); classes]; k];
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let proportions = dirichlet(&mut rng, spec.per_class_alpha[c], k)?;
        let sizes = largest_remainder(&proportions, members.len());
        let mut start = 0;
        for (client, &n) in sizes.iter().enumerate() {
            held[client][c] = members[start..start + n].to_vec();
            start += n;
        }
    }

    let mut removed_classes = vec![Vec::new(); k];
    let mut dropped = Vec::new();
    for (client, shard) in held.iter_mut().enumerate() {
        for (c, members) in shard.iter_mut().enumerate() {
            if rng.random::<f64>() < spec.missing_class_prob {
                removed_classes[client].push(c);
                dropped.append(members);
            }
        }
    }
    dropped.sort_unstable();

    let mut assignment = Vec::with_capacity(k);
    let mut train = Vec::with_capacity(k);
    let mut test = Vec::with_capacity(k);
    let mut train_counts = Vec::with_capacity(k);
    for shard in &held {
        let mut a = Vec::new();
        let mut tr = Vec::new();
        let mut te = Vec::new();
        let mut counts = vec![0u64; classes];
        for (c, members) in shard.iter().enumerate() {
            let n_train = (spec.train_fraction * members.len() as f64).round() as usize;
            tr.extend_from_slice(&members[..n_train]);
            te.extend_from_slice(&members[n_train..]);
            a.extend_from_slice(members);
            counts[c] = n_train as u64;
        }
        assignment.push(a);
        train.push(tr);
        test.push(te);
        train_counts.push(counts);
    }
    Ok(Partition {
        num_clients: k,
        num_classes: classes,
        draw_seed: seed,
        assignment,
        removed_classes,
        dropped,
        train,
        test,
        train_counts,
    })
}

/// One draw from a symmetric Dirichlet via normalized Gamma variates.
fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("alpha {}: {}", alpha, e)))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|x| x / total).collect());
        }
    }
}

/// Integer sizes summing exactly to `n`, closest to `proportions · n`;
/// leftover units go to the largest fractional parts, ties to lower index.
pub fn largest_remainder(proportions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

pub fn compute_prior(partition: &Partition, client: usize) -> Result<ClassPrior> {
    let counts = partition
        .train_counts
        .get(client)
        .ok_or_else(|| Error::Contract(format!("no client {}", client)))?;
    ClassPrior::from_counts(client, counts.clone())
}

fn require_five_classes(labels: &[usize]) -> Result<()> {
    match labels.iter().max() {
        Some(&m) if m < 5 => Ok(()),
        _ => Err(Error::Config("split presets need labels in 0..5".into())),
    }
}

/// Mild variation: skewed minority class (index 0), near-uniform rest.
pub fn make_split1(labels: &[usize], num_clients: usize, seed: u64) -> Result<Partition> {
    require_five_classes(labels)?;
    dirichlet_partition(labels, &PartitionSpec::split1(num_clients, seed))
}

/// Severe variation with randomly missing classes.
pub fn make_split2(labels: &[usize], num_clients: usize, seed: u64) -> Result<Partition> {
    require_five_classes(labels)?;
    dirichlet_partition(labels, &PartitionSpec::split2(num_clients, seed))
}
