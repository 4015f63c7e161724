//! Synthetic Gaussian-mixture data and Dirichlet label-skew partitioning.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};
use thiserror::Error;

use crate::nn::Tensor;
use crate::rng::{stream, Purpose, StreamRng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset size: {0}")]
    InvalidSize(String),
    #[error("cannot split {samples} samples across {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("concentration must be positive, got {0}")]
    Concentration(f64),
    #[error("no partition with at least {min} samples per client after {attempts} attempts")]
    Exhausted { min: usize, attempts: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

/// Rows of a [`Dataset`] gathered for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            rows: rows.to_vec(),
            x: self.features.select_rows(rows),
            y: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn class_histogram(&self, rows: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &r in rows {
            h[self.labels[r]] += 1;
        }
        h
    }

    /// Writes `index,label,x0..x{d-1}` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::from("index,label");
        for j in 0..self.dim() {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{i},{}", self.labels[i]);
            for v in self.features.row(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Mean of class `c`: a signed unit axis, `+e_0, −e_0, +e_1, −e_1, …`, with
/// the radius growing by one each time the axes wrap around.
pub fn class_mean(c: usize, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    let axis = (c / 2) % dim;
    let radius = 1.0 + (c / (2 * dim)) as f64;
    m[axis] = if c.is_multiple_of(2) { radius } else { -radius };
    m
}

/// `n` samples from `C` isotropic Gaussians of standard deviation `spread`
/// around [`class_mean`]. Labels are balanced to within one sample.
pub fn gen_gaussian_mixture(
    classes: usize,
    dim: usize,
    n: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if classes < 2 || dim == 0 || n < classes {
        return Err(DataError::InvalidSize(format!(
            "classes={classes} dim={dim} samples={n}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::InvalidSize(format!("spread={spread}")));
    }
    let mut rng = stream(seed, Purpose::Data, 0, 0, 0);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let means: Vec<Vec<f64>> = (0..classes).map(|c| class_mean(c, dim)).collect();
    let mut data = Vec::with_capacity(n * dim);
    if spread == 0.0 {
        for &y in &labels {
            data.extend_from_slice(&means[y]);
        }
    } else {
        let noise = Normal::new(0.0, spread).expect("positive spread");
        for &y in &labels {
            data.extend(means[y].iter().map(|m| m + noise.sample(&mut rng)));
        }
    }
    Ok(Dataset {
        features: Tensor::matrix(n, dim, data),
        labels,
        class_count: classes,
    })
}

/// One client's portion of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub owner: usize,
    pub indices: Vec<usize>,
    /// `ζ_n = |D_n| / Σ_i |D_i|`.
    pub weight: f64,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Deterministically splits the shard into `(train, held_out)` rows.
    /// At least one row stays in `train`; held-out rows exist only when the
    /// shard has two or more samples and `fraction > 0`.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rows = self.indices.clone();
        let mut rng = stream(seed, Purpose::Holdout, self.owner as u64, 0, 0);
        rows.shuffle(&mut rng);
        let mut held = (rows.len() as f64 * fraction).floor() as usize;
        if fraction > 0.0 && held == 0 && rows.len() >= 2 {
            held = 1;
        }
        held = held.min(rows.len().saturating_sub(1));
        let test = rows.split_off(rows.len() - held);
        (rows, test)
    }
}

/// Dirichlet label-skew partition with at least one sample per client.
pub fn dirichlet_partition(
    ds: &Dataset,
    clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<Shard>, DataError> {
    dirichlet_partition_min(ds, clients, concentration, seed, 1)
}

const MAX_PARTITION_ATTEMPTS: usize = 10_000;

/// [`dirichlet_partition`] with a configurable minimum shard size, enforced
/// by rejection resampling.
pub fn dirichlet_partition_min(
    ds: &Dataset,
    clients: usize,
    concentration: f64,
    seed: u64,
    min_size: usize,
) -> Result<Vec<Shard>, DataError> {
    if clients == 0 || clients > ds.len() || clients * min_size.max(1) > ds.len() {
        return Err(DataError::TooManyClients {
            clients,
            samples: ds.len(),
        });
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(DataError::Concentration(concentration));
    }
    let mut rng = stream(seed, Purpose::Partition, 0, 0, 0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(concentration, 1.0).expect("positive shape");

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut owned: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props = sample_dirichlet(&gamma, clients, &mut rng);
            let mut start = 0;
            let mut cum = 0.0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k + 1 == clients {
                    members.len()
                } else {
                    ((cum * members.len() as f64).round() as usize).clamp(start, members.len())
                };
                owned[k].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if owned.iter().all(|o| o.len() >= min_size.max(1)) {
            let total = ds.len() as f64;
            return Ok(owned
                .into_iter()
                .enumerate()
                .map(|(owner, mut indices)| {
                    indices.sort_unstable();
                    let weight = indices.len() as f64 / total;
                    Shard {
                        owner,
                        indices,
                        weight,
                    }
                })
                .collect());
        }
    }
    Err(DataError::Exhausted {
        min: min_size,
        attempts: MAX_PARTITION_ATTEMPTS,
    })
}

fn sample_dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut StreamRng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // Redraw if every component underflowed to zero.
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spread_hits_means() {
        let ds = gen_gaussian_mixture(3, 4, 30, 0.0, 5).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.features.row(i), class_mean(ds.labels[i], 4).as_slice());
        }
    }

    #[test]
    fn labels_are_balanced() {
        let ds = gen_gaussian_mixture(3, 2, 100, 0.3, 1).unwrap();
        let h = ds.class_histogram(&(0..100).collect::<Vec<_>>());
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_gaussian_mixture(4, 8, 64, 0.5, 9).unwrap();
        let b = gen_gaussian_mixture(4, 8, 64, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_gaussian_mixture(4, 8, 64, 0.5, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(gen_gaussian_mixture(1, 2, 10, 0.1, 0).is_err());
        assert!(gen_gaussian_mixture(2, 0, 10, 0.1, 0).is_err());
        assert!(gen_gaussian_mixture(5, 2, 4, 0.1, 0).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = gen_gaussian_mixture(2, 2, 20, 0.1, 0).unwrap();
        let shards = dirichlet_partition(&ds, 1, 0.5, 3).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, (0..20).collect::<Vec<_>>());
        assert_eq!(shards[0].weight, 1.0);
    }

    #[test]
    fn partition_errors() {
        let ds = gen_gaussian_mixture(2, 2, 4, 0.1, 0).unwrap();
        assert!(matches!(
            dirichlet_partition(&ds, 5, 1.0, 0),
            Err(DataError::TooManyClients { .. })
        ));
        assert!(matches!(
            dirichlet_partition(&ds, 2, 0.0, 0),
            Err(DataError::Concentration(_))
        ));
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let shard = Shard {
            owner: 2,
            indices: (10..30).collect(),
            weight: 1.0,
        };
        let (train, test) = shard.split_holdout(0.25, 4);
        assert_eq!(test.len(), 5);
        let mut all: Vec<_> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, shard.indices);
        let tiny = Shard {
            owner: 0,
            indices: vec![7],
            weight: 1.0,
        };
        assert_eq!(tiny.split_holdout(0.5, 0), (vec![7], vec![]));
    }

    fn class_fractions(h: &[usize]) -> Vec<f64> {
        let total: usize = h.iter().sum();
        h.iter().map(|&c| c as f64 / total as f64).collect()
    }

    #[test]
    fn high_concentration_is_near_iid() {
        let ds = gen_gaussian_mixture(4, 2, 4000, 0.5, 1).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        let global = class_fractions(&ds.class_histogram(&all));
        for seed in 0..20 {
            for shard in dirichlet_partition(&ds, 4, 1000.0, seed).unwrap() {
                let local = class_fractions(&ds.class_histogram(&shard.indices));
                for (l, g) in local.iter().zip(&global) {
                    assert!((l - g).abs() <= 0.1 * g, "seed {seed}: {l} vs {g}");
                }
            }
        }
    }

    #[test]
    fn low_concentration_is_skewed() {
        let ds = gen_gaussian_mixture(4, 2, 400, 0.5, 1).unwrap();
        for seed in 0..20 {
            let shards = dirichlet_partition(&ds, 4, 0.1, seed).unwrap();
            let peak = shards
                .iter()
                .map(|s| {
                    class_fractions(&ds.class_histogram(&s.indices))
                        .into_iter()
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            assert!(peak >= 0.7, "seed {seed}: peak share {peak}");
        }
    }

    #[test]
    fn min_size_is_enforced() {
        let ds = gen_gaussian_mixture(3, 2, 90, 0.5, 2).unwrap();
        for seed in 0..10 {
            let shards = dirichlet_partition_min(&ds, 6, 0.3, seed, 5).unwrap();
            assert!(shards.iter().all(|s| s.len() >= 5));
        }
    }

    #[test]
    fn separable_mixture_is_learnable() {
        use crate::client::ClientModel;
        use crate::nn::{Activation, Head, ParamBlock, Tensor};

        let ds = gen_gaussian_mixture(2, 2, 400, 0.1, 3).unwrap();
        let mut model = ClientModel {
            prefix: vec![ParamBlock::identity(1, 2)],
            head: Head {
                weights: Tensor::zeros(vec![2, 2]),
                bias: Tensor::zeros(vec![2]),
            },
            activation: Activation::Identity,
        };
        let rows: Vec<usize> = (0..ds.len()).collect();
        let batch = ds.batch(&rows);
        for _ in 0..200 {
            let (_, grad) = model.local_loss_grad(&batch).unwrap();
            model.apply(&grad, 0.5).unwrap();
        }
        assert!(model.accuracy(&ds, &rows).unwrap() >= 0.99);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]
        #[test]
        fn partition_is_exact(seed in proptest::prelude::any::<u64>()) {
            let ds = gen_gaussian_mixture(3, 2, 60, 0.5, 0).unwrap();
            let shards = dirichlet_partition(&ds, 5, 0.5, seed).unwrap();
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
            all.sort_unstable();
            proptest::prop_assert_eq!(all, (0..60).collect::<Vec<_>>());
            proptest::prop_assert!(shards.iter().all(|s| !s.is_empty()));
            let total: f64 = shards.iter().map(|s| s.weight).sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
