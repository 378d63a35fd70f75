//! Differentiable objectives over a set of samples.
//!
//! Local training, Hessian probes and landscape slices only need losses and
//! gradients over index subsets, so they are written against [`Objective`]
//! rather than the MLP directly. Quadratics implement it too, which gives the
//! diagnostics closed-form oracles.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::mlp::{loss_and_accuracy, loss_and_gradient, Batch, ModelArch};
use super::ParamVector;
use crate::{Error, Result};

pub trait Objective: Sync {
    /// Parameter dimension.
    fn dim(&self) -> usize;

    /// Number of samples that index subsets refer to.
    fn num_samples(&self) -> usize;

    /// Mean loss over the samples in `idx`.
    fn loss_on(&self, w: &ParamVector, idx: &[usize]) -> Result<f64>;

    /// Gradient of the mean loss over the samples in `idx`.
    fn gradient_on(&self, w: &ParamVector, idx: &[usize]) -> Result<ParamVector>;

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.loss_on(w, &all)
    }

    fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.gradient_on(w, &all)
    }

    /// Classification accuracy over all samples, when the objective has one.
    fn accuracy(&self, _w: &ParamVector) -> Result<Option<f64>> {
        Ok(None)
    }
}

impl<O: Objective + ?Sized> Objective for &O {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn num_samples(&self) -> usize {
        (**self).num_samples()
    }
    fn loss_on(&self, w: &ParamVector, idx: &[usize]) -> Result<f64> {
        (**self).loss_on(w, idx)
    }
    fn gradient_on(&self, w: &ParamVector, idx: &[usize]) -> Result<ParamVector> {
        (**self).gradient_on(w, idx)
    }
    fn loss(&self, w: &ParamVector) -> Result<f64> {
        (**self).loss(w)
    }
    fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        (**self).gradient(w)
    }
    fn accuracy(&self, w: &ParamVector) -> Result<Option<f64>> {
        (**self).accuracy(w)
    }
}

/// Cross-entropy of an MLP over borrowed sample rows.
#[derive(Debug, Clone)]
pub struct MlpObjective<'a> {
    arch: ModelArch,
    rows: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> MlpObjective<'a> {
    pub fn new(arch: &ModelArch, rows: Vec<&'a [f64]>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::config("rows and labels differ in length"));
        }
        Ok(MlpObjective {
            arch: arch.clone(),
            rows,
            labels,
        })
    }

    pub fn from_batch(arch: &ModelArch, batch: &'a Batch) -> Self {
        MlpObjective {
            arch: arch.clone(),
            rows: batch.rows(),
            labels: batch.labels().to_vec(),
        }
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn gather(&self, idx: &[usize]) -> Result<(Vec<&'a [f64]>, Vec<usize>)> {
        let mut rows = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.rows.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for {} samples",
                    self.rows.len()
                )));
            }
            rows.push(self.rows[i]);
            labels.push(self.labels[i]);
        }
        Ok((rows, labels))
    }
}

impl Objective for MlpObjective<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn num_samples(&self) -> usize {
        self.rows.len()
    }

    fn loss_on(&self, w: &ParamVector, idx: &[usize]) -> Result<f64> {
        let (rows, labels) = self.gather(idx)?;
        loss_and_accuracy(w, &self.arch, &rows, &labels).map(|s| s.loss)
    }

    fn gradient_on(&self, w: &ParamVector, idx: &[usize]) -> Result<ParamVector> {
        let (rows, labels) = self.gather(idx)?;
        loss_and_gradient(w, &self.arch, &rows, &labels).map(|(_, g)| g)
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        loss_and_accuracy(w, &self.arch, &self.rows, &self.labels).map(|s| s.loss)
    }

    fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        loss_and_gradient(w, &self.arch, &self.rows, &self.labels).map(|(_, g)| g)
    }

    fn accuracy(&self, w: &ParamVector) -> Result<Option<f64>> {
        let s = loss_and_accuracy(w, &self.arch, &self.rows, &self.labels)?;
        Ok(Some(s.correct as f64 / self.rows.len() as f64))
    }
}

/// `f(w) = 1/2 (w - c)^T A (w - c)` with symmetric `A`; a single "sample".
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    dim: usize,
    matrix: Vec<f64>,
    center: ParamVector,
}

impl Quadratic {
    /// `matrix` is `dim x dim`, row-major, assumed symmetric.
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::config(format!(
                "quadratic matrix has {} entries, expected {dim}^2",
                matrix.len()
            )));
        }
        Ok(Quadratic {
            dim,
            matrix,
            center: ParamVector::zeros(dim),
        })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut matrix = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            matrix[i * n + i] = *d;
        }
        Quadratic {
            dim: n,
            matrix,
            center: ParamVector::zeros(n),
        }
    }

    pub fn with_center(mut self, center: ParamVector) -> Result<Self> {
        center.check_len(self.dim, "quadratic center")?;
        self.center = center;
        Ok(self)
    }

    pub fn apply(&self, v: &ParamVector) -> ParamVector {
        let n = self.dim;
        ParamVector::new(
            (0..n)
                .map(|i| {
                    self.matrix[i * n..(i + 1) * n]
                        .iter()
                        .zip(v.iter())
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect(),
        )
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_samples(&self) -> usize {
        1
    }

    fn loss_on(&self, w: &ParamVector, _idx: &[usize]) -> Result<f64> {
        w.check_len(self.dim, "parameter vector")?;
        let x = w.sub(&self.center);
        Ok(0.5 * x.dot(&self.apply(&x)))
    }

    fn gradient_on(&self, w: &ParamVector, _idx: &[usize]) -> Result<ParamVector> {
        w.check_len(self.dim, "parameter vector")?;
        Ok(self.apply(&w.sub(&self.center)))
    }
}

/// `c * f(w)`.
#[derive(Debug, Clone)]
pub struct Scaled<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: Objective> Objective for Scaled<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }
    fn loss_on(&self, w: &ParamVector, idx: &[usize]) -> Result<f64> {
        Ok(self.factor * self.inner.loss_on(w, idx)?)
    }
    fn gradient_on(&self, w: &ParamVector, idx: &[usize]) -> Result<ParamVector> {
        Ok(self.inner.gradient_on(w, idx)?.scaled(self.factor))
    }
}

/// Counts gradient evaluations of the wrapped objective.
#[derive(Debug)]
pub struct Counting<O> {
    pub inner: O,
    gradients: AtomicUsize,
}

impl<O> Counting<O> {
    pub fn new(inner: O) -> Self {
        Counting {
            inner,
            gradients: AtomicUsize::new(0),
        }
    }

    pub fn gradient_calls(&self) -> usize {
        self.gradients.load(Ordering::Relaxed)
    }
}

impl<O: Objective> Objective for Counting<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }
    fn loss_on(&self, w: &ParamVector, idx: &[usize]) -> Result<f64> {
        self.inner.loss_on(w, idx)
    }
    fn gradient_on(&self, w: &ParamVector, idx: &[usize]) -> Result<ParamVector> {
        self.gradients.fetch_add(1, Ordering::Relaxed);
        self.inner.gradient_on(w, idx)
    }
    fn gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        self.gradients.fetch_add(1, Ordering::Relaxed);
        self.inner.gradient(w)
    }
}

/// Default finite-difference step for [`hvp`]: `1e-3 * (1 + |w|)`.
pub fn default_hvp_step(w: &ParamVector) -> f64 {
    1e-3 * (1.0 + w.norm())
}

/// Hessian-vector product by central differences of gradients along `v/|v|`,
/// rescaled by `|v|`.
pub fn hvp<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    v: &ParamVector,
    h: f64,
) -> Result<ParamVector> {
    hvp_on(obj, w, v, h, None)
}

/// [`hvp`] restricted to a subset of samples (`None` uses all of them).
pub fn hvp_on<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    v: &ParamVector,
    h: f64,
    idx: Option<&[usize]>,
) -> Result<ParamVector> {
    v.check_len(w.len(), "hvp direction")?;
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArgument(
            "hvp direction must be a nonzero finite vector".into(),
        ));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("hvp step must be > 0, got {h}")));
    }
    let unit = v.scaled(1.0 / norm);
    let mut plus = w.clone();
    plus.axpy(h, &unit);
    let mut minus = w.clone();
    minus.axpy(-h, &unit);
    let (g_plus, g_minus) = match idx {
        Some(idx) => (obj.gradient_on(&plus, idx)?, obj.gradient_on(&minus, idx)?),
        None => (obj.gradient(&plus)?, obj.gradient(&minus)?),
    };
    let mut out = g_plus.sub(&g_minus);
    out.scale(norm / (2.0 * h));
    Ok(out)
}
