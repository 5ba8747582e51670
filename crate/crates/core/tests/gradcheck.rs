//! Analytic gradients vs central finite differences, one layer kind at a
//! time. The acceptance suite runs the same check at higher instance counts;
//! here a handful per layer keeps the signal with fast turnaround.

use fedsikd::nn::{Activation, Architecture, LayerSpec};
use fedsikd::testkit::gradcheck;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn check(name: &str, input_shape: Vec<usize>, layers: Vec<LayerSpec>, instances: u64) {
    let arch = Architecture::new(name, input_shape, layers).unwrap();
    for seed in 0..instances {
        let report = gradcheck(&arch, 1000 + seed, EPS).unwrap();
        assert!(
            report.max_rel_err <= TOL,
            "{name} instance {seed}: rel err {} over {} coords",
            report.max_rel_err,
            report.coords_checked
        );
    }
}

#[test]
fn dense_gradients() {
    check("gc_dense", vec![5], vec![LayerSpec::Dense { units: 4 }], 5);
}

#[test]
fn conv2d_gradients() {
    check(
        "gc_conv2d",
        vec![5, 6, 2],
        vec![LayerSpec::Conv2d {
            filters: 3,
            kernel: (3, 3),
            stride: (2, 2),
        }],
        5,
    );
}

#[test]
fn conv1d_gradients() {
    check(
        "gc_conv1d",
        vec![9, 2],
        vec![LayerSpec::Conv1d {
            filters: 3,
            kernel: 3,
            stride: 2,
        }],
        5,
    );
}

#[test]
fn maxpool1d_gradients() {
    check(
        "gc_pool",
        vec![9, 3],
        vec![LayerSpec::MaxPool1d { pool: 2, stride: 1 }],
        5,
    );
}

#[test]
fn dropout_gradients() {
    check(
        "gc_dropout",
        vec![12],
        vec![LayerSpec::Dropout { rate: 0.3 }],
        5,
    );
}

#[test]
fn flatten_gradients() {
    check("gc_flatten", vec![3, 4], vec![LayerSpec::Flatten], 3);
}

#[test]
fn activation_gradients() {
    check(
        "gc_relu",
        vec![8],
        vec![LayerSpec::Activation(Activation::Relu)],
        5,
    );
    check(
        "gc_leaky",
        vec![8],
        vec![LayerSpec::Activation(Activation::LeakyRelu(0.2))],
        5,
    );
    check(
        "gc_softmax",
        vec![6],
        vec![LayerSpec::Activation(Activation::Softmax)],
        5,
    );
}

#[test]
fn stacked_chain_gradients() {
    // A miniature of the HAR chain exercises layer interactions.
    check(
        "gc_chain",
        vec![11, 1],
        vec![
            LayerSpec::Conv1d {
                filters: 4,
                kernel: 3,
                stride: 2,
            },
            LayerSpec::Activation(Activation::LeakyRelu(0.2)),
            LayerSpec::MaxPool1d { pool: 2, stride: 1 },
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 5 },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Dense { units: 3 },
        ],
        3,
    );
}

#[test]
fn loss_gradient_against_finite_differences() {
    // dlogits of the cross-entropy and distillation losses, checked the
    // same way (central differences on the scalar loss).
    use fedsikd::nn::{ce_loss_and_grad, kd_loss_and_grad};
    use fedsikd::tensor::Tensor;

    let logits = Tensor::new(
        vec![3, 3],
        vec![0.2, -0.7, 1.1, 0.0, 0.3, -0.2, 2.0, 1.9, -0.5],
    )
    .unwrap();
    let teacher = Tensor::new(
        vec![3, 3],
        vec![1.0, 0.0, 0.0, -0.5, 0.7, 0.1, 0.0, 0.0, 3.0],
    )
    .unwrap();
    let labels = [2usize, 1, 0];

    let (_, d_ce) = ce_loss_and_grad(&logits, &labels).unwrap();
    let (_, d_kd) = kd_loss_and_grad(&logits, &teacher, &labels, 2.5, 0.7).unwrap();

    for i in 0..logits.len() {
        let mut plus = logits.clone();
        plus.data_mut()[i] += EPS;
        let mut minus = logits.clone();
        minus.data_mut()[i] -= EPS;

        let fd_ce = (ce_loss_and_grad(&plus, &labels).unwrap().0
            - ce_loss_and_grad(&minus, &labels).unwrap().0)
            / (2.0 * EPS);
        let rel = (d_ce.data()[i] - fd_ce).abs() / d_ce.data()[i].abs().max(fd_ce.abs()).max(1e-6);
        assert!(rel < 1e-4, "ce coord {i}: {rel}");

        let fd_kd = (kd_loss_and_grad(&plus, &teacher, &labels, 2.5, 0.7).unwrap().0
            - kd_loss_and_grad(&minus, &teacher, &labels, 2.5, 0.7).unwrap().0)
            / (2.0 * EPS);
        let rel = (d_kd.data()[i] - fd_kd).abs() / d_kd.data()[i].abs().max(fd_kd.abs()).max(1e-6);
        assert!(rel < 1e-4, "kd coord {i}: {rel}");
    }
}
