//! Sharpness diagnostics: dominant Hessian eigenvalue, 1D interpolation
//! between two models, 2D loss slices and perturbation alignment.

use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numcore::{default_hvp_step, hvp_on, Objective, ParamVector};
use crate::seed::rng_for;
use crate::{Error, Result};

/// Below this `|Hv|` the Hessian is treated as zero.
const DEGENERATE_HVP_NORM: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerIterConfig {
    pub max_iter: usize,
    /// Stop once the relative change of the estimate drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Finite-difference step; `None` picks [`default_hvp_step`].
    pub hvp_step: Option<f64>,
    /// Draw a fresh minibatch of this size per iteration instead of using
    /// every sample.
    pub batch_size: Option<usize>,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        PowerIterConfig {
            max_iter: 20,
            tol: 1e-6,
            seed: 0,
            hvp_step: None,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub lambda1: f64,
    pub iterations: usize,
    /// `|Hv - lambda1 v|` for the final unit vector.
    pub residual: f64,
    pub converged: bool,
    /// The Hessian-vector product vanished; `lambda1` is reported as 0.
    pub degenerate: bool,
}

impl EigenEstimate {
    /// Dominant eigenvalue is negative: the point is near a saddle.
    pub fn is_negative(&self) -> bool {
        self.lambda1 < 0.0
    }
}

/// Dominant (largest magnitude) Hessian eigenvalue at `w` from
/// finite-difference Hessian-vector products.
///
/// With the full dataset the iterates of power iteration span a Krylov space;
/// the estimate is the Rayleigh-Ritz value over that space (Lanczos with full
/// reorthogonalization), which sharpens plain power iteration considerably
/// when the spectral gap is small. With `batch_size` set the operator changes
/// every step, so plain power iteration is used instead.
pub fn power_iteration_lambda1<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    cfg: &PowerIterConfig,
) -> Result<EigenEstimate> {
    if obj.num_samples() == 0 {
        return Err(Error::config("power iteration needs a nonempty dataset"));
    }
    w.check_len(obj.dim(), "model")?;
    if cfg.max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
    }
    let h = cfg.hvp_step.unwrap_or_else(|| default_hvp_step(w));
    let mut rng = rng_for(cfg.seed, "power-iteration", &[]);
    let mut v = ParamVector::new((0..w.len()).map(|_| StandardNormal.sample(&mut rng)).collect());
    let n0 = v.norm();
    v.scale(1.0 / n0);
    match cfg.batch_size {
        None => lanczos(|u| checked_hvp(obj, w, u, h, None), v, cfg),
        Some(b) => {
            let n = obj.num_samples();
            stochastic_power(
                |u, rng| {
                    let idx = sample(rng, n, b.clamp(1, n)).into_vec();
                    checked_hvp(obj, w, u, h, Some(&idx))
                },
                v,
                cfg,
                &mut rng,
            )
        }
    }
}

fn checked_hvp<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    v: &ParamVector,
    h: f64,
    idx: Option<&[usize]>,
) -> Result<ParamVector> {
    let hv = hvp_on(obj, w, v, h, idx)?;
    if !hv.is_finite() {
        return Err(Error::InvalidArgument("Hessian-vector product is not finite".into()));
    }
    Ok(hv)
}

fn degenerate(iterations: usize) -> EigenEstimate {
    EigenEstimate {
        lambda1: 0.0,
        iterations,
        residual: 0.0,
        converged: true,
        degenerate: true,
    }
}

fn settled(prev: f64, next: f64, tol: f64) -> bool {
    prev.is_finite() && (next - prev).abs() <= tol * next.abs().max(f64::MIN_POSITIVE)
}

fn lanczos(
    mut op: impl FnMut(&ParamVector) -> Result<ParamVector>,
    v0: ParamVector,
    cfg: &PowerIterConfig,
) -> Result<EigenEstimate> {
    let mut basis = vec![v0];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut scale = 0.0f64;
    let mut lambda = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let v = basis.last().expect("basis is never empty");
        let mut r = op(v)?;
        let hv_norm = r.norm();
        if it == 1 && hv_norm < DEGENERATE_HVP_NORM {
            return Ok(degenerate(it));
        }
        scale = scale.max(hv_norm);
        alpha.push(v.dot(&r));
        // Full reorthogonalization (twice is enough).
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q);
            }
        }
        let b = r.norm();

        let k = alpha.len();
        let t = nalgebra::DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j || j + 1 == i {
                beta[i.min(j)]
            } else {
                0.0
            }
        });
        let eig = nalgebra::SymmetricEigen::new(t);
        let top = eig.eigenvalues.iamax();
        let next = eig.eigenvalues[top];
        residual = (b * eig.eigenvectors[(k - 1, top)]).abs();
        let done = settled(lambda, next, cfg.tol) || b <= 1e-12 * scale;
        lambda = next;
        if done {
            return Ok(EigenEstimate {
                lambda1: lambda,
                iterations: it,
                residual,
                converged: true,
                degenerate: false,
            });
        }
        beta.push(b);
        r.scale(1.0 / b);
        basis.push(r);
    }
    Ok(EigenEstimate {
        lambda1: lambda,
        iterations: cfg.max_iter,
        residual,
        converged: false,
        degenerate: false,
    })
}

fn stochastic_power(
    mut op: impl FnMut(&ParamVector, &mut rand_chacha::ChaCha8Rng) -> Result<ParamVector>,
    mut v: ParamVector,
    cfg: &PowerIterConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<EigenEstimate> {
    let mut lambda = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let hv = op(&v, rng)?;
        let hv_norm = hv.norm();
        if hv_norm < DEGENERATE_HVP_NORM {
            return Ok(degenerate(it));
        }
        let next = v.dot(&hv);
        let mut r = hv.clone();
        r.axpy(-next, &v);
        residual = r.norm();
        let done = settled(lambda, next, cfg.tol);
        lambda = next;
        if done {
            return Ok(EigenEstimate {
                lambda1: lambda,
                iterations: it,
                residual,
                converged: true,
                degenerate: false,
            });
        }
        v = hv.scaled(1.0 / hv_norm);
    }
    Ok(EigenEstimate {
        lambda1: lambda,
        iterations: cfg.max_iter,
        residual,
        converged: false,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpPoint {
    pub gamma: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// `num_points` values of `gamma` spread evenly over `[-1, 2]`.
pub fn gamma_grid(num_points: usize) -> Vec<f64> {
    let steps = (num_points - 1) as f64;
    (0..num_points).map(|i| -1.0 + 3.0 * i as f64 / steps).collect()
}

/// Loss and accuracy along `gamma * w_a + (1 - gamma) * w_b`.
pub fn interpolate_1d<O: Objective + ?Sized>(
    obj: &O,
    w_a: &ParamVector,
    w_b: &ParamVector,
    num_points: usize,
) -> Result<Vec<InterpPoint>> {
    w_a.check_len(obj.dim(), "first model")?;
    w_b.check_len(obj.dim(), "second model")?;
    if num_points < 2 {
        return Err(Error::InvalidArgument("interpolation needs at least 2 points".into()));
    }
    gamma_grid(num_points)
        .into_iter()
        .map(|gamma| {
            let w = ParamVector::new(
                w_a.iter()
                    .zip(w_b.iter())
                    .map(|(a, b)| gamma * a + (1.0 - gamma) * b)
                    .collect(),
            );
            Ok(InterpPoint {
                gamma,
                loss: obj.loss(&w)?,
                accuracy: obj.accuracy(&w)?,
            })
        })
        .collect()
}

/// Largest loss strictly inside `(0, 1)` minus the larger endpoint loss.
pub fn interpolation_barrier(curve: &[InterpPoint]) -> Option<f64> {
    let at = |g: f64| curve.iter().find(|p| p.gamma == g).map(|p| p.loss);
    let endpoints = at(0.0)?.max(at(1.0)?);
    let interior = curve
        .iter()
        .filter(|p| p.gamma > 0.0 && p.gamma < 1.0)
        .map(|p| p.loss)
        .fold(f64::NEG_INFINITY, f64::max);
    interior.is_finite().then_some(interior - endpoints)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSpec {
    /// Points per axis.
    pub resolution: usize,
    /// Grid covers `[-extent, extent]^2`.
    pub extent: f64,
    pub seed: u64,
}

impl Default for LandscapeSpec {
    fn default() -> Self {
        LandscapeSpec {
            resolution: 21,
            extent: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub d1: ParamVector,
    pub d2: ParamVector,
    pub coords: Vec<f64>,
    /// `loss[i][j]` is the loss at `w + coords[i] * d1 + coords[j] * d2`.
    pub loss: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn center_loss(&self) -> f64 {
        let c = self.coords.len() / 2;
        self.loss[c][c]
    }
}

/// Two Gaussian directions that depend only on `(dim, seed)`, so every model
/// compared under one seed is probed along the same raw directions.
pub fn raw_directions(dim: usize, seed: u64) -> (ParamVector, ParamVector) {
    let draw = |tag| {
        let mut rng = rng_for(seed, tag, &[dim as u64]);
        ParamVector::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
    };
    (draw("landscape-d1"), draw("landscape-d2"))
}

/// Rescale each segment of `dir` to the norm of the same segment of `w`.
pub fn filter_normalize(dir: &ParamVector, w: &ParamVector, segments: &[Range<usize>]) -> ParamVector {
    let mut out = dir.clone();
    for seg in segments {
        let d = &mut out.as_mut_slice()[seg.clone()];
        let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        let wn = w.as_slice()[seg.clone()].iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = if dn > 0.0 { wn / dn } else { 0.0 };
        d.iter_mut().for_each(|x| *x *= s);
    }
    out
}

/// Loss over the plane `w + x * d1 + y * d2`, `x, y` in `[-extent, extent]`,
/// with per-segment filter-normalized directions. Does not modify `w`.
pub fn landscape_2d<O: Objective + ?Sized>(
    obj: &O,
    w: &ParamVector,
    segments: &[Range<usize>],
    spec: &LandscapeSpec,
) -> Result<LandscapeGrid> {
    w.check_len(obj.dim(), "model")?;
    if spec.resolution < 3 {
        return Err(Error::InvalidArgument("landscape resolution must be >= 3".into()));
    }
    if segments.iter().any(|s| s.end > w.len()) {
        return Err(Error::InvalidArgument("segment exceeds parameter vector".into()));
    }
    let (r1, r2) = raw_directions(w.len(), spec.seed);
    let d1 = filter_normalize(&r1, w, segments);
    let d2 = filter_normalize(&r2, w, segments);
    let n = spec.resolution;
    let coords: Vec<f64> = (0..n)
        .map(|i| spec.extent * (-1.0 + 2.0 * i as f64 / (n - 1) as f64))
        .collect();
    let loss = coords
        .par_iter()
        .map(|&x| {
            coords
                .iter()
                .map(|&y| {
                    let mut p = w.clone();
                    p.axpy(x, &d1);
                    p.axpy(y, &d2);
                    obj.loss(&p)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandscapeGrid {
        d1,
        d2,
        coords,
        loss,
    })
}

/// `rho * | prev/|prev| - curr/|curr| |`, undefined when either is zero.
pub fn delta_eps(prev: &ParamVector, curr: &ParamVector, rho: f64) -> Option<f64> {
    let (pn, cn) = (prev.norm(), curr.norm());
    if pn == 0.0 || cn == 0.0 || prev.len() != curr.len() {
        return None;
    }
    let dist = prev
        .iter()
        .zip(curr.iter())
        .map(|(p, c)| (p / pn - c / cn).powi(2))
        .sum::<f64>()
        .sqrt();
    Some(rho * dist)
}

pub fn param_norm(w: &ParamVector) -> f64 {
    w.norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigRow {
    pub client: usize,
    pub lambda_local: f64,
    pub lambda_global: f64,
}

/// Dominant eigenvalue of each client model on its own shard and on the
/// global objective.
pub fn local_global_eigs<O: Objective, G: Objective + ?Sized>(
    client_models: &[(usize, ParamVector)],
    shards: &[O],
    global: &G,
    cfg: &PowerIterConfig,
) -> Result<Vec<EigRow>> {
    client_models
        .iter()
        .map(|(k, w)| {
            let shard = shards
                .get(*k)
                .ok_or_else(|| Error::InvalidArgument(format!("no shard for client {k}")))?;
            Ok(EigRow {
                client: *k,
                lambda_local: power_iteration_lambda1(shard, w, cfg)?.lambda1,
                lambda_global: power_iteration_lambda1(global, w, cfg)?.lambda1,
            })
        })
        .collect()
}

pub fn write_interp_csv(path: &Path, curve: &[InterpPoint]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["gamma", "loss", "acc"])?;
    for p in curve {
        let acc = p.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.write_record([p.gamma.to_string(), p.loss.to_string(), acc])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_landscape_csv(path: &Path, grid: &LandscapeGrid) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["x", "y", "loss"])?;
    for (i, x) in grid.coords.iter().enumerate() {
        for (j, y) in grid.coords.iter().enumerate() {
            out.write_record([x.to_string(), y.to_string(), grid.loss[i][j].to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_eigs_csv(path: &Path, rows: &[EigRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path)?;
    out.write_record(["client", "lambda1_local", "lambda1_global"])?;
    for r in rows {
        out.write_record([
            r.client.to_string(),
            r.lambda_local.to_string(),
            r.lambda_global.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Quadratic, Scaled};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    fn diag_1_to_10() -> Quadratic {
        Quadratic::diagonal(&(1..=10).map(f64::from).collect::<Vec<_>>())
    }

    #[test]
    fn power_iteration_recovers_diag_spectrum() {
        let q = diag_1_to_10();
        for seed in 0..10 {
            let cfg = PowerIterConfig { seed, ..Default::default() };
            let est = power_iteration_lambda1(&q, &ParamVector::zeros(10), &cfg).unwrap();
            assert!((est.lambda1 - 10.0).abs() < 0.1, "seed {seed}: {est:?}");
            assert!(est.iterations <= 20);
            assert!(!est.degenerate);
        }
    }

    #[test]
    fn power_iteration_flat_loss_is_degenerate() {
        let q = Quadratic::diagonal(&[0.0; 5]);
        let est = power_iteration_lambda1(&q, &pv(&[1.0, 2.0, 3.0, 4.0, 5.0]), &Default::default()).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.lambda1, 0.0);
    }

    #[test]
    fn power_iteration_scales_with_loss() {
        let q = diag_1_to_10();
        let cfg = PowerIterConfig { max_iter: 200, ..Default::default() };
        let w = ParamVector::zeros(10);
        let base = power_iteration_lambda1(&q, &w, &cfg).unwrap().lambda1;
        let scaled = power_iteration_lambda1(&Scaled { inner: q, factor: 3.0 }, &w, &cfg)
            .unwrap()
            .lambda1;
        assert!((scaled - 3.0 * base).abs() < 1e-6 * scaled);
    }

    #[test]
    fn power_iteration_reports_negative_dominant() {
        let q = Quadratic::diagonal(&[1.0, -6.0, 2.0]);
        let cfg = PowerIterConfig { max_iter: 100, ..Default::default() };
        let est = power_iteration_lambda1(&q, &ParamVector::zeros(3), &cfg).unwrap();
        assert!((est.lambda1 + 6.0).abs() < 1e-4, "{est:?}");
        assert!(est.is_negative());
    }

    #[test]
    fn stochastic_variant_runs_plain_power_iteration() {
        let q = Quadratic::diagonal(&[1.0, 2.0, 8.0]);
        let cfg = PowerIterConfig { max_iter: 100, batch_size: Some(1), ..Default::default() };
        let est = power_iteration_lambda1(&q, &ParamVector::zeros(3), &cfg).unwrap();
        assert!((est.lambda1 - 8.0).abs() < 1e-4, "{est:?}");
        assert!(est.iterations > 3);
    }

    #[test]
    fn power_iteration_dense_matrix() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1.
        let q = Quadratic::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let est = power_iteration_lambda1(&q, &pv(&[0.3, 0.1]), &Default::default()).unwrap();
        assert!((est.lambda1 - 3.0).abs() < 1e-6);
        assert!(est.residual < 1e-3);
    }

    #[test]
    fn gamma_grid_hits_endpoints_exactly() {
        let g = gamma_grid(31);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[10], 0.0);
        assert_eq!(g[20], 1.0);
        assert_eq!(g[30], 2.0);
    }

    #[test]
    fn interpolation_endpoints_and_constant_curve() {
        let q = diag_1_to_10();
        let a = ParamVector::new((0..10).map(|i| 0.1 * i as f64).collect());
        let b = ParamVector::new((0..10).map(|i| 1.0 - 0.05 * i as f64).collect());
        let curve = interpolate_1d(&q, &a, &b, 31).unwrap();
        assert!((curve[20].loss - q.loss(&a).unwrap()).abs() < 1e-12);
        assert!((curve[10].loss - q.loss(&b).unwrap()).abs() < 1e-12);
        let flat = interpolate_1d(&q, &a, &a, 7).unwrap();
        assert!(flat.iter().all(|p| (p.loss - flat[0].loss).abs() < 1e-12));
        assert!(interpolate_1d(&q, &a, &pv(&[1.0]), 5).is_err());
    }

    #[test]
    fn interpolation_on_quadratic_is_a_parabola() {
        let q = Quadratic::diagonal(&[1.0, 4.0]);
        let (a, b) = (pv(&[1.0, -1.0]), pv(&[-2.0, 0.5]));
        let curve = interpolate_1d(&q, &a, &b, 31).unwrap();
        // f(gamma) = 0.5 * (b + gamma (a - b))^T A (b + gamma (a - b))
        let dv = a.sub(&b);
        let (c2, c1, c0) = (
            0.5 * dv.dot(&q.apply(&dv)),
            b.dot(&q.apply(&dv)),
            0.5 * b.dot(&q.apply(&b)),
        );
        for p in &curve {
            let g = p.gamma;
            assert!((p.loss - (c2 * g * g + c1 * g + c0)).abs() < 1e-12);
        }
        assert!(interpolation_barrier(&curve).unwrap() <= 1e-12);
    }

    #[test]
    fn landscape_matches_quadratic_form() {
        let q = Quadratic::new(3, vec![2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 3.0]).unwrap();
        let w = pv(&[0.5, -1.0, 2.0]);
        let spec = LandscapeSpec { resolution: 5, extent: 1.0, seed: 9 };
        let grid = landscape_2d(&q, &w, &[0..3], &spec).unwrap();
        assert!((grid.center_loss() - q.loss(&w).unwrap()).abs() < 1e-12);
        assert!((grid.d1.norm() - w.norm()).abs() < 1e-12);
        for (i, x) in grid.coords.iter().enumerate() {
            for (j, y) in grid.coords.iter().enumerate() {
                let mut p = w.clone();
                p.axpy(*x, &grid.d1);
                p.axpy(*y, &grid.d2);
                let exact = 0.5 * p.dot(&q.apply(&p));
                assert!((grid.loss[i][j] - exact).abs() < 1e-9);
            }
        }
        assert_eq!(w, pv(&[0.5, -1.0, 2.0]));
    }

    #[test]
    fn landscape_directions_are_reproducible() {
        let q = diag_1_to_10();
        let w = ParamVector::new((1..=10).map(f64::from).collect());
        let spec = LandscapeSpec { resolution: 3, ..Default::default() };
        let a = landscape_2d(&q, &w, &[0..4, 4..10], &spec).unwrap();
        let b = landscape_2d(&q, &w, &[0..4, 4..10], &spec).unwrap();
        assert_eq!(a, b);
        let seg_norm = |d: &ParamVector, r: Range<usize>| d.as_slice()[r].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((seg_norm(&a.d1, 0..4) - seg_norm(&w, 0..4)).abs() < 1e-12);
        assert!((seg_norm(&a.d2, 4..10) - seg_norm(&w, 4..10)).abs() < 1e-12);
        assert!(landscape_2d(&q, &w, &[0..10], &LandscapeSpec { resolution: 2, ..spec }).is_err());
    }

    #[test]
    fn delta_eps_examples() {
        let g = pv(&[1.0, 2.0]);
        assert_eq!(delta_eps(&g, &g, 0.5), Some(0.0));
        assert!((delta_eps(&g, &g.scaled(-3.0), 0.5).unwrap() - 1.0).abs() < 1e-15);
        let e = delta_eps(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0]), 1.0).unwrap();
        assert!((e - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(delta_eps(&ParamVector::zeros(2), &g, 1.0), None);
    }

    #[test]
    fn param_norm_examples() {
        assert_eq!(param_norm(&ParamVector::zeros(4)), 0.0);
        assert_eq!(param_norm(&pv(&[3.0, 4.0])), 5.0);
        assert!((param_norm(&pv(&[3.0, 4.0]).scaled(-2.5)) - 12.5).abs() < 1e-15);
    }

    #[test]
    fn local_global_eigs_on_constructed_quadratics() {
        // Global loss is the sample-weighted mean of the two shard losses,
        // so its Hessian is the mean of diag(4,1) and diag(1,2).
        let shards = vec![Quadratic::diagonal(&[4.0, 1.0]), Quadratic::diagonal(&[1.0, 2.0])];
        let global = Quadratic::diagonal(&[2.5, 1.5]);
        let models = vec![(0, pv(&[0.1, 0.2])), (1, pv(&[-0.3, 0.0]))];
        let cfg = PowerIterConfig { max_iter: 50, ..Default::default() };
        let rows = local_global_eigs(&models, &shards, &global, &cfg).unwrap();
        assert!((rows[0].lambda_local - 4.0).abs() < 0.04);
        assert!((rows[1].lambda_local - 2.0).abs() < 0.02);
        for r in &rows {
            assert!((r.lambda_global - 2.5).abs() < 0.025);
        }
        let same = local_global_eigs(&models[..1], &shards[..1], &shards[0], &cfg).unwrap();
        assert!((same[0].lambda_local - same[0].lambda_global).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn delta_eps_bounds_and_scale_invariance(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            rho in 0.0f64..2.0,
            s in 0.01f64..100.0,
        ) {
            let (a, b) = (ParamVector::new(a), ParamVector::new(b));
            prop_assume!(a.norm() > 1e-6 && b.norm() > 1e-6);
            let d = delta_eps(&a, &b, rho).unwrap();
            prop_assert!(d >= 0.0 && d <= 2.0 * rho + 1e-12);
            let ds = delta_eps(&a.scaled(s), &b, rho).unwrap();
            prop_assert!((d - ds).abs() < 1e-9);
            prop_assert!(delta_eps(&a, &a, rho).unwrap() < 1e-12);
        }

        #[test]
        fn power_iteration_with_gap(mut diag in prop::collection::vec(0.1f64..5.0, 6), top in 0usize..6) {
            // Force a spectral gap of at least 1.1 on one coordinate.
            let second = diag.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, x)| *x).fold(0.0, f64::max);
            diag[top] = second * 1.1;
            let q = Quadratic::diagonal(&diag);
            let est = power_iteration_lambda1(&q, &ParamVector::zeros(6), &PowerIterConfig::default()).unwrap();
            prop_assert!((est.lambda1 - diag[top]).abs() < 0.01 * diag[top], "{:?} vs {}", est, diag[top]);
        }
    }
}
