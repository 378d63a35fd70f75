use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_case(seed: u64, act: Activation) -> (ModelArch, ParamVector, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(1..6);
    let hidden: Vec<usize> = (0..rng.random_range(1..3))
        .map(|_| rng.random_range(1..7))
        .collect();
    let classes = rng.random_range(2..5);
    let arch = ModelArch::new(input_dim, hidden, classes, act).unwrap();
    let w = ParamVector::new(
        (0..arch.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let b = rng.random_range(1..6);
    let inputs = (0..b * input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
    (arch, w, Batch::new(input_dim, inputs, labels).unwrap())
}

/// Scalar re-implementation working on structured layers, independent of the
/// flat-buffer forward pass.
fn oracle_loss(arch: &ModelArch, w: &ParamVector, batch: &Batch) -> f64 {
    let layers = unflatten(arch, w).unwrap();
    let shapes = arch.layer_shapes();
    let mut total = 0.0;
    for (x, &y) in batch.rows().iter().zip(batch.labels()) {
        let mut a: Vec<f64> = x.to_vec();
        for (l, ((n_in, n_out), lw)) in shapes.iter().zip(&layers).enumerate() {
            let mut z = vec![0.0; *n_out];
            for r in 0..*n_out {
                z[r] = lw.bias[r];
                for c in 0..*n_in {
                    z[r] += lw.weights[r * n_in + c] * a[c];
                }
            }
            a = if l + 1 < shapes.len() {
                z.iter()
                    .map(|v| match arch.activation {
                        Activation::Relu => {
                            if *v > 0.0 {
                                *v
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => v.tanh(),
                    })
                    .collect()
            } else {
                z
            };
        }
        let m = a.iter().cloned().fold(f64::MIN, f64::max);
        let s: f64 = a.iter().map(|v| (v - m).exp()).sum();
        total += -(a[y] - m - s.ln());
    }
    total / batch.len() as f64
}

fn fd_gradient(arch: &ModelArch, w: &ParamVector, batch: &Batch, h: f64) -> ParamVector {
    let mut g = ParamVector::zeros(w.len());
    for i in 0..w.len() {
        let mut p = w.clone();
        p[i] += h;
        let mut m = w.clone();
        m[i] -= h;
        g[i] = (forward_loss(&p, arch, batch).unwrap().loss
            - forward_loss(&m, arch, batch).unwrap().loss)
            / (2.0 * h);
    }
    g
}

#[test]
fn uniform_logits_give_log_k() {
    let arch = ModelArch::new(3, vec![2], 4, Activation::Tanh).unwrap();
    let w = ParamVector::zeros(arch.param_count());
    let batch = Batch::new(3, vec![0.3, -1.0, 2.0], vec![2]).unwrap();
    let out = forward_loss(&w, &arch, &batch).unwrap();
    assert!((out.loss - 4f64.ln()).abs() < 1e-15);
    assert_eq!(out.scores, vec![0.0; 4]);
}

#[test]
fn zero_weights_give_log_num_classes() {
    let arch = ModelArch::new(5, vec![3, 3], 7, Activation::Relu).unwrap();
    let w = ParamVector::zeros(arch.param_count());
    let batch = Batch::new(5, (0..15).map(|i| i as f64).collect(), vec![0, 3, 6]).unwrap();
    let loss = forward_loss(&w, &arch, &batch).unwrap().loss;
    assert!((loss - 7f64.ln()).abs() < 1e-15);
}

#[test]
fn forward_matches_scalar_oracle() {
    for seed in 0..20 {
        for act in [Activation::Relu, Activation::Tanh] {
            let (arch, w, batch) = random_case(seed, act);
            let fast = forward_loss(&w, &arch, &batch).unwrap().loss;
            let slow = oracle_loss(&arch, &w, &batch);
            assert!((fast - slow).abs() < 1e-12, "seed {seed}: {fast} vs {slow}");
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (arch, w, batch) = random_case(1000 + seed, Activation::Tanh);
        let g = backward(&w, &arch, &batch).unwrap();
        let fd = fd_gradient(&arch, &w, &batch, 1e-5);
        for i in 0..g.len() {
            let rel = (g[i] - fd[i]).abs() / g[i].abs().max(fd[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn saturated_correct_class_has_zero_gradient() {
    let arch = ModelArch::new(2, vec![2], 3, Activation::Tanh).unwrap();
    let mut layers = unflatten(&arch, &ParamVector::zeros(arch.param_count())).unwrap();
    layers[1].bias = vec![0.0, 60.0, 0.0];
    let w = flatten(&arch, &layers).unwrap();
    let batch = Batch::new(2, vec![0.5, -0.5], vec![1]).unwrap();
    let g = backward(&w, &arch, &batch).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn label_permutation_permutes_output_gradient() {
    let (arch, w, batch) = random_case(42, Activation::Tanh);
    let k = arch.num_classes;
    let perm: Vec<usize> = (0..k).map(|c| (c + 1) % k).collect();

    let mut layers = unflatten(&arch, &w).unwrap();
    let last = layers.len() - 1;
    let n_in = arch.layer_shapes()[last].0;
    let orig = layers[last].clone();
    for r in 0..k {
        let dst = perm[r];
        layers[last].weights[dst * n_in..(dst + 1) * n_in]
            .copy_from_slice(&orig.weights[r * n_in..(r + 1) * n_in]);
        layers[last].bias[dst] = orig.bias[r];
    }
    let w_perm = flatten(&arch, &layers).unwrap();
    let labels: Vec<usize> = batch.labels().iter().map(|&y| perm[y]).collect();
    let inputs: Vec<f64> = batch.rows().concat();
    let batch_perm = Batch::new(arch.input_dim, inputs, labels).unwrap();

    let l0 = forward_loss(&w, &arch, &batch).unwrap().loss;
    let l1 = forward_loss(&w_perm, &arch, &batch_perm).unwrap().loss;
    assert!((l0 - l1).abs() < 1e-12);

    let g = unflatten(&arch, &backward(&w, &arch, &batch).unwrap()).unwrap();
    let gp = unflatten(&arch, &backward(&w_perm, &arch, &batch_perm).unwrap()).unwrap();
    for r in 0..k {
        let dst = perm[r];
        for c in 0..n_in {
            let a = g[last].weights[r * n_in + c];
            let b = gp[last].weights[dst * n_in + c];
            assert!((a - b).abs() < 1e-12);
        }
        assert!((g[last].bias[r] - gp[last].bias[dst]).abs() < 1e-12);
    }
    for l in 0..last {
        for (a, b) in g[l].weights.iter().zip(&gp[l].weights) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dimension_errors_are_config_errors() {
    let arch = ModelArch::new(3, vec![2], 2, Activation::Relu).unwrap();
    let w = ParamVector::zeros(arch.param_count());
    let batch = Batch::new(2, vec![1.0, 2.0], vec![0]).unwrap();
    assert!(matches!(
        forward_loss(&w, &arch, &batch),
        Err(crate::Error::Config(_))
    ));
    let short = ParamVector::zeros(3);
    let ok = Batch::new(3, vec![1.0, 2.0, 3.0], vec![1]).unwrap();
    assert!(matches!(backward(&short, &arch, &ok), Err(crate::Error::Config(_))));
    let bad_label = Batch::new(3, vec![1.0, 2.0, 3.0], vec![2]).unwrap();
    assert!(forward_loss(&w, &arch, &bad_label).is_err());
    assert!(ModelArch::new(3, vec![], 2, Activation::Relu).is_err());
    assert!(ModelArch::new(3, vec![0], 2, Activation::Relu).is_err());
}

#[test]
fn param_count_closed_form() {
    let arch = ModelArch::new(10, vec![32], 4, Activation::Relu).unwrap();
    assert_eq!(arch.param_count(), 484);
    let segs = arch.layer_segments();
    assert_eq!(segs, vec![0..352, 352..484]);
}

#[test]
fn flatten_zero_layers_and_round_trip() {
    let arch = ModelArch::new(4, vec![3, 5], 2, Activation::Tanh).unwrap();
    let zeros: Vec<LayerWeights> = arch
        .layer_shapes()
        .iter()
        .map(|(i, o)| LayerWeights {
            weights: vec![0.0; i * o],
            bias: vec![0.0; *o],
        })
        .collect();
    let flat = flatten(&arch, &zeros).unwrap();
    assert_eq!(flat, ParamVector::zeros(arch.param_count()));

    let w = arch.init_params(&mut ChaCha8Rng::seed_from_u64(3));
    let layers = unflatten(&arch, &w).unwrap();
    assert_eq!(flatten(&arch, &layers).unwrap(), w);
    assert!(unflatten(&arch, &ParamVector::zeros(5)).is_err());
    assert!(flatten(&arch, &layers[..1]).is_err());
}

#[test]
fn loss_and_gradient_are_deterministic() {
    let (arch, w, batch) = random_case(9, Activation::Relu);
    let a = backward(&w, &arch, &batch).unwrap();
    let b = backward(&w, &arch, &batch).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn hvp_exact_on_quadratic() {
    let q = Quadratic::diagonal(&[2.0, 5.0]);
    let w = ParamVector::new(vec![0.7, -1.3]);
    let hv = hvp(&q, &w, &ParamVector::new(vec![1.0, 0.0]), 1e-3).unwrap();
    assert!((hv[0] - 2.0).abs() < 1e-6 && hv[1].abs() < 1e-6);

    let dense = Quadratic::new(2, vec![3.0, 1.0, 1.0, 2.0]).unwrap();
    let v = ParamVector::new(vec![0.5, -2.0]);
    let hv = hvp(&dense, &w, &v, default_hvp_step(&w)).unwrap();
    let exact = dense.apply(&v);
    assert!(hv.max_abs_diff(&exact) < 1e-6);
}

#[test]
fn hvp_rejects_zero_direction() {
    let q = Quadratic::diagonal(&[1.0]);
    let w = ParamVector::zeros(1);
    assert!(matches!(
        hvp(&q, &w, &ParamVector::zeros(1), 1e-3),
        Err(crate::Error::InvalidArgument(_))
    ));
}

#[test]
fn hvp_linear_and_symmetric_on_small_net() {
    let (arch, w, batch) = random_case(77, Activation::Tanh);
    let obj = MlpObjective::from_batch(&arch, &batch);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u = ParamVector::new((0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let v = ParamVector::new((0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let h = 1e-4;
    let hu = hvp(&obj, &w, &u, h).unwrap();
    let hv = hvp(&obj, &w, &v, h).unwrap();
    assert!((v.dot(&hu) - u.dot(&hv)).abs() < 1e-5);

    let h2v = hvp(&obj, &w, &v.scaled(2.0), h).unwrap();
    assert!(h2v.max_abs_diff(&hv.scaled(2.0)) < 1e-10);
}

proptest! {
    #[test]
    fn cross_entropy_is_nonnegative(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let (arch, w, batch) = random_case(seed, Activation::Relu);
        let loss = forward_loss(&w.scaled(scale), &arch, &batch).unwrap().loss;
        prop_assert!(loss >= 0.0);
    }
}
