//! Synthetic classification data and label-skewed client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numcore::{MlpObjective, ModelArch};
use crate::seed::rng_for;
use crate::{Error, Result};

/// Labeled samples, row-major `[N x input_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    num_classes: usize,
    samples: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        samples: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if input_dim == 0 || samples.len() != labels.len() * input_dim {
            return Err(Error::config(format!(
                "dataset holds {} values for {} labels of dimension {input_dim}",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::config(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            input_dim,
            num_classes,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Cross-entropy objective over every sample.
    pub fn objective(&self, arch: &ModelArch) -> Result<MlpObjective<'_>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.subset_objective(arch, &idx)
    }

    /// Cross-entropy objective over the samples at `indices`.
    pub fn subset_objective(&self, arch: &ModelArch, indices: &[usize]) -> Result<MlpObjective<'_>> {
        if arch.input_dim != self.input_dim || arch.num_classes < self.num_classes {
            return Err(Error::config(format!(
                "model expects {} features / {} classes, data has {} / {}",
                arch.input_dim, arch.num_classes, self.input_dim, self.num_classes
            )));
        }
        let rows = indices.iter().map(|&i| self.row(i)).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        MlpObjective::new(arch, rows, labels)
    }

    /// Writes a header (`x0..x{d-1},label`) then one row per sample.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`Dataset::write_csv`]. The class count is
    /// `num_classes` when given, else one past the largest label.
    pub fn read_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let width = r.headers()?.len();
        if width < 2 {
            return Err(Error::config("csv needs at least one feature column and a label"));
        }
        let input_dim = width - 1;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for j in 0..input_dim {
                samples.push(rec[j].trim().parse::<f64>().map_err(|e| {
                    Error::config(format!("row {}: feature {j}: {e}", line + 1))
                })?);
            }
            labels.push(rec[input_dim].trim().parse::<usize>().map_err(|e| {
                Error::config(format!("row {}: label: {e}", line + 1))
            })?);
        }
        let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(input_dim, k, samples, labels)
    }
}

/// Stratified train/test pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub class_sep: f64,
    pub noise_sd: f64,
}

/// Gaussian class clusters: class `c` is centred on `class_sep * mu_c` for a
/// random unit direction `mu_c`, with isotropic noise `noise_sd`. Each class
/// gets exactly `per_class` samples, 80% of which (at least one) go to train.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SplitData> {
    let SyntheticSpec {
        num_classes,
        per_class,
        input_dim,
        class_sep,
        noise_sd,
    } = *spec;
    if input_dim < 2 {
        return Err(Error::config("synthetic data needs input_dim >= 2"));
    }
    if num_classes < 2 {
        return Err(Error::config("synthetic data needs num_classes >= 2"));
    }
    if per_class < 1 {
        return Err(Error::config("synthetic data needs per_class >= 1"));
    }
    if !(noise_sd >= 0.0) || !class_sep.is_finite() {
        return Err(Error::config("noise_sd must be >= 0 and class_sep finite"));
    }

    let mut rng = rng_for(seed, "synthetic", &[]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.into_iter().map(|v| class_sep * v / n).collect()
        })
        .collect();

    let n_train = ((per_class as f64 * 0.8).round() as usize).clamp(1, per_class);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (c, center) in centers.iter().enumerate() {
        for i in 0..per_class {
            let dst = if i < n_train { &mut train } else { &mut test };
            for mu in center {
                let eps: f64 = rng.sample(StandardNormal);
                dst.0.push(mu + noise_sd * eps);
            }
            dst.1.push(c);
        }
    }
    Ok(SplitData {
        train: Dataset::new(input_dim, num_classes, train.0, train.1)?,
        test: Dataset::new(input_dim, num_classes, test.0, test.1)?,
    })
}

/// Disjoint per-client index lists into a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    /// Per-client label histogram.
    pub fn label_histograms(&self, data: &Dataset) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut h = vec![0; data.num_classes()];
                for &i in idx {
                    h[data.labels()[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Mean number of distinct labels held per client.
    pub fn mean_classes_per_client(&self, data: &Dataset) -> f64 {
        let hists = self.label_histograms(data);
        let total: usize = hists
            .iter()
            .map(|h| h.iter().filter(|&&n| n > 0).count())
            .sum();
        total as f64 / hists.len() as f64
    }

    /// Mean Shannon entropy (nats) of per-client label distributions.
    pub fn mean_label_entropy(&self, data: &Dataset) -> f64 {
        let hists = self.label_histograms(data);
        let total: f64 = hists
            .iter()
            .map(|h| {
                let n: usize = h.iter().sum();
                if n == 0 {
                    return 0.0;
                }
                h.iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / n as f64;
                        -p * p.ln()
                    })
                    .sum::<f64>()
            })
            .sum();
        total / hists.len() as f64
    }
}

pub fn shard_sizes(partition: &Partition) -> Vec<usize> {
    partition.client_indices.iter().map(Vec::len).collect()
}

/// Symmetric Dirichlet(alpha) draw, computed in log space so that very small
/// concentrations do not underflow to an all-zero vector.
fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    // Gamma(a) = Gamma(a + 1) * U^(1/a)
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha + 1 > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Split `data` over `num_clients` equal shards of `floor(N / C)` samples.
///
/// For `alpha > 0` each client draws class proportions from a symmetric
/// Dirichlet and fills its shard by sampling classes against them without
/// replacement; when a class runs out the remaining proportions are
/// renormalized. `alpha = 0` deals classes round-robin, one class per client.
/// Leftover samples are discarded.
pub fn partition_dirichlet(
    data: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    let n = data.len();
    if num_clients == 0 || num_clients > n {
        return Err(Error::config(format!(
            "cannot split {n} samples over {num_clients} clients"
        )));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let shard = n / num_clients;
    let k = data.num_classes();
    let mut rng = rng_for(seed, "partition", &[]);

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in data.labels().iter().enumerate() {
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut client_indices = Vec::with_capacity(num_clients);
    if alpha == 0.0 {
        for client in 0..num_clients {
            let class = client % k;
            let pool = &mut pools[class];
            if pool.len() < shard {
                return Err(Error::config(format!(
                    "alpha = 0: class {class} has {} samples left, client {client} needs {shard}",
                    pool.len()
                )));
            }
            let taken = pool.split_off(pool.len() - shard);
            client_indices.push(taken);
        }
    } else {
        for _ in 0..num_clients {
            let props = dirichlet(&mut rng, alpha, k);
            let mut taken = Vec::with_capacity(shard);
            while taken.len() < shard {
                let mut weights: Vec<f64> = props
                    .iter()
                    .zip(&pools)
                    .map(|(p, pool)| if pool.is_empty() { 0.0 } else { *p })
                    .collect();
                if weights.iter().sum::<f64>() <= 0.0 {
                    // Proportions sit entirely on exhausted classes; fall back
                    // to the remaining class sizes.
                    weights = pools.iter().map(|p| p.len() as f64).collect();
                }
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut class = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
                for (c, w) in weights.iter().enumerate() {
                    if *w <= 0.0 {
                        continue;
                    }
                    if u < *w {
                        class = c;
                        break;
                    }
                    u -= w;
                }
                let pool = &mut pools[class];
                let pick = rng.random_range(0..pool.len());
                taken.push(pool.swap_remove(pick));
            }
            client_indices.push(taken);
        }
    }
    for idx in &mut client_indices {
        idx.sort_unstable();
    }
    Ok(Partition {
        client_indices,
        alpha,
    })
}
