//! Central finite differences as the ground truth for every analytic
//! gradient the library produces: supervised cross-entropy, the mixed
//! distillation objective, and the gradient handed back across a
//! layer boundary.

use fedsim::model::{init_model, Arch, LayeredNet, LoraConfig};
use fedsim::rng;
use fedsim::tensor::{cross_entropy, cross_entropy_grad, gemm_nt, kl_distill_loss, softmax_rows, Matrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

fn test_arch() -> Arch {
    Arch::new(vec![4, 5, 3]).unwrap()
}

fn test_lora() -> LoraConfig {
    LoraConfig {
        rank: 2,
        alpha: 32.0,
        dropout: 0.0,
        adapted_layers: [1, 2].into_iter().collect(),
    }
}

/// Fresh model with both adapter factors randomized so gradients flow
/// through every parameter (B starts at zero otherwise, which would
/// zero out the A gradients and make the check vacuous). The factors
/// stay small: the adapter scale amplifies them, and saturated
/// softmax rows would push probabilities into the log floor where the
/// clipped loss no longer differentiates like its exact gradient.
fn randomized_model(seed: u64) -> LayeredNet {
    let mut model = init_model(&test_arch(), &test_lora(), seed).unwrap();
    let (mut values, manifest) = model.export_adapters();
    let mut s = rng::stream(seed, 0xFD);
    for v in values.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut s);
        *v = 0.05 * z;
    }
    model.import_adapters(&values, &manifest).unwrap();
    model
}

fn batch(seed: u64, n: usize, d: usize, classes: usize) -> (Matrix, Vec<usize>) {
    let mut s = rng::stream(seed, 0xB0);
    let mut x = Matrix::zeros(n, d);
    for v in x.values_mut() {
        let z: f64 = StandardNormal.sample(&mut s);
        *v = z;
    }
    let y = (0..n).map(|_| s.random_range(0..classes)).collect();
    (x, y)
}

/// Smallest absolute pre-activation entering the hidden ReLU. Central
/// differences are only trustworthy when no bump of `FD_STEP` can flip
/// a gate, so tests pick seeds where this margin is comfortably wide.
fn layer1_preact_margin(model: &LayeredNet, x: &Matrix) -> f64 {
    let mut z = gemm_nt(x, model.weight(1)).unwrap();
    z.add_row_bias(model.bias(1)).unwrap();
    if let Some(pair) = model.adapter(1) {
        let low_rank = gemm_nt(&gemm_nt(x, &pair.a).unwrap(), &pair.b).unwrap();
        z.add_scaled(&low_rank, model.lora().scale()).unwrap();
    }
    z.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// First seeded setup that is numerically benign for differencing:
/// hidden pre-activations clear of the ReLU kink, and every softmax
/// probability far above the log floor so the exact cross-entropy
/// gradient describes the clipped loss to well under the tolerance.
fn smooth_setup(base: u64) -> (LayeredNet, Matrix, Vec<usize>) {
    for offset in 0..50 {
        let model = randomized_model(base + offset);
        let (x, y) = batch(base + 100 + offset, 8, 4, 3);
        if layer1_preact_margin(&model, &x) < 2e-3 {
            continue;
        }
        let layers = model.arch().layers();
        let (logits, _) = model.forward_range(&x, 0, layers, false, None).unwrap();
        let probs = softmax_rows(&logits);
        if probs.values().iter().all(|&p| p > 1e-4) {
            return (model, x, y);
        }
    }
    panic!("no smooth setup found near seed {base}");
}

fn supervised_loss(model: &LayeredNet, x: &Matrix, y: &[usize]) -> f64 {
    let layers = model.arch().layers();
    let (logits, _) = model.forward_range(x, 0, layers, false, None).unwrap();
    cross_entropy(&softmax_rows(&logits), y).unwrap()
}

fn distill_loss(
    model: &LayeredNet,
    x: &Matrix,
    y: &[usize],
    teacher: &Matrix,
    tau: f64,
    lambda: f64,
) -> f64 {
    let layers = model.arch().layers();
    let (logits, _) = model.forward_range(x, 0, layers, false, None).unwrap();
    lambda * kl_distill_loss(teacher, &logits, tau).unwrap()
        + (1.0 - lambda) * cross_entropy(&softmax_rows(&logits), y).unwrap()
}

fn fd_gradient(loss: impl Fn(&LayeredNet) -> f64, model: &LayeredNet) -> Vec<f64> {
    let (values, manifest) = model.export_adapters();
    let mut fd = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let mut probe = model.clone();
        let mut bumped = values.clone();
        bumped[i] += FD_STEP;
        probe.import_adapters(&bumped, &manifest).unwrap();
        let up = loss(&probe);
        bumped[i] = values[i] - FD_STEP;
        probe.import_adapters(&bumped, &manifest).unwrap();
        let down = loss(&probe);
        fd.push((up - down) / (2.0 * FD_STEP));
    }
    fd
}

fn assert_matches_fd(analytic: &[f64], fd: &[f64]) {
    assert_eq!(analytic.len(), fd.len());
    let mut worst = 0.0f64;
    for (i, (&a, &f)) in analytic.iter().zip(fd).enumerate() {
        let scale = a.abs().max(f.abs());
        if scale < 1e-5 {
            assert!(
                (a - f).abs() < 1e-9,
                "index {i}: analytic {a} vs fd {f} (near-zero component)"
            );
        } else {
            let rel = (a - f).abs() / scale;
            worst = worst.max(rel);
            assert!(rel < REL_TOL, "index {i}: analytic {a} vs fd {f}, rel {rel}");
        }
    }
    assert!(worst < REL_TOL);
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let (model, x, y) = smooth_setup(7);

    let layers = model.arch().layers();
    let (logits, tape) = model.forward_range(&x, 0, layers, true, None).unwrap();
    let grad = cross_entropy_grad(&softmax_rows(&logits), &y).unwrap();
    let (grads, _) = model.backward_range(&tape, &grad).unwrap();
    let analytic = grads.flatten(&model.manifest()).unwrap();

    let fd = fd_gradient(|m| supervised_loss(m, &x, &y), &model);
    assert_matches_fd(&analytic, &fd);
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn distillation_gradients_match_finite_differences() {
    let (model, x, y) = smooth_setup(19);
    let (teacher, _) = batch(29, 8, 3, 3);
    let (tau, lambda) = (2.5, 0.7);

    let layers = model.arch().layers();
    let (logits, tape) = model.forward_range(&x, 0, layers, true, None).unwrap();
    let n = x.rows() as f64;

    // lambda * tau * (softened student - softened teacher) / n
    // + (1 - lambda) * d/dz cross-entropy.
    let mut upstream = cross_entropy_grad(&softmax_rows(&logits), &y).unwrap();
    upstream.scale(1.0 - lambda);
    let mut student_t = logits.clone();
    student_t.scale(1.0 / tau);
    let mut soft = softmax_rows(&student_t);
    let mut teacher_t = teacher.clone();
    teacher_t.scale(1.0 / tau);
    soft.add_scaled(&softmax_rows(&teacher_t), -1.0).unwrap();
    soft.scale(lambda * tau / n);
    upstream.add_in_place(&soft).unwrap();

    let (grads, _) = model.backward_range(&tape, &upstream).unwrap();
    let analytic = grads.flatten(&model.manifest()).unwrap();

    let fd = fd_gradient(|m| distill_loss(m, &x, &y, &teacher, tau, lambda), &model);
    assert_matches_fd(&analytic, &fd);
}

#[test]
fn boundary_input_gradient_matches_finite_differences() {
    // The gradient a split server hands back equals finite differences
    // of the suffix loss with respect to the boundary activations.
    let model = randomized_model(31);
    let (x, y) = batch(37, 6, 4, 3);
    let layers = model.arch().layers();
    let k = 1;

    let (acts, _) = model.forward_range(&x, 0, k, false, None).unwrap();
    let (logits, tape) = model.forward_range(&acts, k, layers, true, None).unwrap();
    let grad = cross_entropy_grad(&softmax_rows(&logits), &y).unwrap();
    let (_, boundary) = model.backward_range(&tape, &grad).unwrap();

    let suffix_loss = |a: &Matrix| {
        let (z, _) = model.forward_range(a, k, layers, false, None).unwrap();
        cross_entropy(&softmax_rows(&z), &y).unwrap()
    };

    let mut fd = Vec::with_capacity(acts.rows() * acts.cols());
    for i in 0..acts.rows() {
        for j in 0..acts.cols() {
            let mut up = acts.clone();
            up.set(i, j, acts.get(i, j) + FD_STEP);
            let mut down = acts.clone();
            down.set(i, j, acts.get(i, j) - FD_STEP);
            fd.push((suffix_loss(&up) - suffix_loss(&down)) / (2.0 * FD_STEP));
        }
    }
    assert_matches_fd(boundary.values(), &fd);
}
