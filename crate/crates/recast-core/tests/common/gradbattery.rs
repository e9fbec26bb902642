//! The finite-difference check battery shared by the op-level tests and
//! the acceptance suite.

use super::{fd_check, rand_tensor64, rand_tensor64_off_zero, FdCase};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recast_core::tensor::{Mode, Tape, Tensor, ValRef};

const RTOL: f64 = 1e-3;
const H: f64 = 1e-4;

fn scalarize(tape: &mut Tape<f64>, out: ValRef, target: &Tensor<f64>) -> ValRef {
    let t = tape.leaf(target.clone());
    tape.mse_loss(out, t).unwrap()
}

/// Runs the full op-level check battery; returns the number of cases.
pub fn run_op_battery() -> usize {
    let mut cases = 0usize;

    // conv2d: grads wrt input, weight and bias over strides/paddings/kernels
    for trial in 0..15 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let (k, stride, padding) = match trial % 5 {
            0 => (3, 1, 1),
            1 => (3, 2, 1),
            2 => (1, 1, 0),
            3 => (3, 1, 0),
            _ => (1, 2, 0),
        };
        let (cin, cout) = (2 + (trial as usize % 2), 3);
        let x = rand_tensor64(&mut rng, &[2, cin, 5, 4], -1.0, 1.0);
        let w = rand_tensor64(&mut rng, &[cout, cin, k, k], -0.5, 0.5);
        let b = rand_tensor64(&mut rng, &[cout], -0.5, 0.5);
        let oh = (5 + 2 * padding - k) / stride + 1;
        let ow = (4 + 2 * padding - k) / stride + 1;
        let target = rand_tensor64(&mut rng, &[2, cout, oh, ow], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "conv2d",
                inputs: vec![x, w, b],
                build: Box::new(move |tape, vs| {
                    let y = tape.conv2d(vs[0], vs[1], Some(vs[2]), stride, padding).unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // batchnorm, train mode: grads wrt input, gamma, beta through batch stats
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let x = rand_tensor64(&mut rng, &[3, 2, 3, 3], -2.0, 2.0);
        let gamma = rand_tensor64(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_tensor64(&mut rng, &[2], -0.5, 0.5);
        let target = rand_tensor64(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "batchnorm-train",
                inputs: vec![x, gamma, beta],
                build: Box::new(move |tape, vs| {
                    let mut rm = Tensor::zeros(&[2]);
                    let mut rv = Tensor::full(&[2], 1.0);
                    let y = tape
                        .batchnorm2d(vs[0], vs[1], vs[2], &mut rm, &mut rv, Mode::Train, 0.1, 1e-5)
                        .unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // batchnorm, eval mode: running stats act as constants
    for trial in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let x = rand_tensor64(&mut rng, &[2, 3, 2, 2], -2.0, 2.0);
        let gamma = rand_tensor64(&mut rng, &[3], 0.5, 1.5);
        let beta = rand_tensor64(&mut rng, &[3], -0.5, 0.5);
        let rm0 = rand_tensor64(&mut rng, &[3], -0.3, 0.3);
        let rv0 = rand_tensor64(&mut rng, &[3], 0.5, 1.5);
        let target = rand_tensor64(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "batchnorm-eval",
                inputs: vec![x, gamma, beta],
                build: Box::new(move |tape, vs| {
                    let mut rm = rm0.clone();
                    let mut rv = rv0.clone();
                    let y = tape
                        .batchnorm2d(vs[0], vs[1], vs[2], &mut rm, &mut rv, Mode::Eval, 0.1, 1e-5)
                        .unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // relu (inputs kept away from the kink)
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
        let x = rand_tensor64_off_zero(&mut rng, &[2, 3, 4, 2]);
        let target = rand_tensor64(&mut rng, &[2, 3, 4, 2], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "relu",
                inputs: vec![x],
                build: Box::new(move |tape, vs| {
                    let y = tape.relu(vs[0]);
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // elementwise add
    for trial in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        let a = rand_tensor64(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor64(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let target = rand_tensor64(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "add",
                inputs: vec![a, b],
                build: Box::new(move |tape, vs| {
                    let y = tape.add(vs[0], vs[1]).unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // channel concatenation
    for trial in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + trial);
        let a = rand_tensor64(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = rand_tensor64(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let target = rand_tensor64(&mut rng, &[2, 5, 3, 3], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "concat_channels",
                inputs: vec![a, b],
                build: Box::new(move |tape, vs| {
                    let y = tape.concat_channels(&[vs[0], vs[1]]).unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // average pooling
    for trial in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + trial);
        let x = rand_tensor64(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        let target = rand_tensor64(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "avgpool",
                inputs: vec![x],
                build: Box::new(move |tape, vs| {
                    let y = tape.avgpool(vs[0], 2, 2).unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // max pooling; smaller step so perturbations cannot flip the argmax
    for trial in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + trial);
        let x = rand_tensor64(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        let target = rand_tensor64(&mut rng, &[2, 2, 2, 2], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "maxpool",
                inputs: vec![x],
                build: Box::new(move |tape, vs| {
                    let y = tape.maxpool(vs[0], 2, 2).unwrap();
                    scalarize(tape, y, &target)
                }),
                h: 1e-6,
            },
            RTOL,
        );
        cases += 1;
    }

    // global average pooling
    for trial in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
        let x = rand_tensor64(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let target = rand_tensor64(&mut rng, &[2, 3], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "global_avgpool",
                inputs: vec![x],
                build: Box::new(move |tape, vs| {
                    let y = tape.global_avgpool(vs[0]).unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // linear
    for trial in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let x = rand_tensor64(&mut rng, &[3, 5], -1.0, 1.0);
        let w = rand_tensor64(&mut rng, &[4, 5], -0.5, 0.5);
        let b = rand_tensor64(&mut rng, &[4], -0.5, 0.5);
        let target = rand_tensor64(&mut rng, &[3, 4], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "linear",
                inputs: vec![x, w, b],
                build: Box::new(move |tape, vs| {
                    let y = tape.linear(vs[0], vs[1], Some(vs[2])).unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // sum
    for trial in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(1100 + trial);
        let x = rand_tensor64(&mut rng, &[2, 3, 2], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "sum",
                inputs: vec![x],
                build: Box::new(|tape, vs| tape.sum(vs[0])),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // mse loss wrt both sides
    for trial in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(1200 + trial);
        let a = rand_tensor64(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let b = rand_tensor64(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "mse_loss",
                inputs: vec![a, b],
                build: Box::new(|tape, vs| tape.mse_loss(vs[0], vs[1]).unwrap()),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // softmax cross-entropy
    for trial in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(1300 + trial);
        let logits = rand_tensor64(&mut rng, &[3, 5], -2.0, 2.0);
        let labels = vec![
            (trial as usize) % 5,
            (trial as usize + 2) % 5,
            (trial as usize + 4) % 5,
        ];
        fd_check(
            &FdCase {
                name: "softmax_cross_entropy",
                inputs: vec![logits],
                build: Box::new(move |tape, vs| {
                    tape.softmax_cross_entropy(vs[0], &labels).unwrap()
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    cases
}

/// Composed-block checks: conv/bn/relu chains with shortcut add,
/// dense-style concatenation, and a bottleneck-plus-head chain.
pub fn run_composed_battery() -> usize {
    let mut cases = 0usize;

    // basic-residual-like: conv3x3 -> bn -> relu -> conv3x3 -> bn -> add(x) -> relu
    for trial in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let c = 4usize;
        let x = rand_tensor64(&mut rng, &[2, c, 6, 6], -1.0, 1.0);
        let w1 = rand_tensor64(&mut rng, &[c, c, 3, 3], -0.3, 0.3);
        let g1 = rand_tensor64(&mut rng, &[c], 0.5, 1.5);
        let b1 = rand_tensor64(&mut rng, &[c], -0.3, 0.3);
        let w2 = rand_tensor64(&mut rng, &[c, c, 3, 3], -0.3, 0.3);
        let g2 = rand_tensor64(&mut rng, &[c], 0.5, 1.5);
        let b2 = rand_tensor64(&mut rng, &[c], -0.3, 0.3);
        let target = rand_tensor64(&mut rng, &[2, c, 6, 6], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "composed-basic",
                inputs: vec![x, w1, g1, b1, w2, g2, b2],
                build: Box::new(move |tape, vs| {
                    let mut rm1 = Tensor::zeros(&[4]);
                    let mut rv1 = Tensor::full(&[4], 1.0);
                    let mut rm2 = Tensor::zeros(&[4]);
                    let mut rv2 = Tensor::full(&[4], 1.0);
                    let y = tape.conv2d(vs[0], vs[1], None, 1, 1).unwrap();
                    let y = tape
                        .batchnorm2d(y, vs[2], vs[3], &mut rm1, &mut rv1, Mode::Train, 0.1, 1e-5)
                        .unwrap();
                    let y = tape.relu(y);
                    let y = tape.conv2d(y, vs[4], None, 1, 1).unwrap();
                    let y = tape
                        .batchnorm2d(y, vs[5], vs[6], &mut rm2, &mut rv2, Mode::Train, 0.1, 1e-5)
                        .unwrap();
                    let y = tape.add(y, vs[0]).unwrap();
                    let y = tape.relu(y);
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // dense-layer-like: bn -> relu -> conv1x1 -> bn -> relu -> conv3x3 -> concat(x, .)
    for trial in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(2100 + trial);
        let x = rand_tensor64(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let g0 = rand_tensor64(&mut rng, &[3], 0.5, 1.5);
        let b0 = rand_tensor64(&mut rng, &[3], -0.3, 0.3);
        let w1 = rand_tensor64(&mut rng, &[6, 3, 1, 1], -0.4, 0.4);
        let g1 = rand_tensor64(&mut rng, &[6], 0.5, 1.5);
        let b1 = rand_tensor64(&mut rng, &[6], -0.3, 0.3);
        let w2 = rand_tensor64(&mut rng, &[2, 6, 3, 3], -0.3, 0.3);
        let target = rand_tensor64(&mut rng, &[2, 5, 4, 4], -1.0, 1.0);
        fd_check(
            &FdCase {
                name: "composed-dense",
                inputs: vec![x, g0, b0, w1, g1, b1, w2],
                build: Box::new(move |tape, vs| {
                    let mut rm0 = Tensor::zeros(&[3]);
                    let mut rv0 = Tensor::full(&[3], 1.0);
                    let mut rm1 = Tensor::zeros(&[6]);
                    let mut rv1 = Tensor::full(&[6], 1.0);
                    let y = tape
                        .batchnorm2d(vs[0], vs[1], vs[2], &mut rm0, &mut rv0, Mode::Train, 0.1, 1e-5)
                        .unwrap();
                    let y = tape.relu(y);
                    let y = tape.conv2d(y, vs[3], None, 1, 0).unwrap();
                    let y = tape
                        .batchnorm2d(y, vs[4], vs[5], &mut rm1, &mut rv1, Mode::Train, 0.1, 1e-5)
                        .unwrap();
                    let y = tape.relu(y);
                    let y = tape.conv2d(y, vs[6], None, 1, 1).unwrap();
                    let y = tape.concat_channels(&[vs[0], y]).unwrap();
                    scalarize(tape, y, &target)
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    // bottleneck-like with classifier head: 1x1 down, 3x3, 1x1 up, add,
    // global pool, linear, cross-entropy
    for trial in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(2200 + trial);
        let x = rand_tensor64(&mut rng, &[2, 4, 4, 4], -1.0, 1.0);
        let w1 = rand_tensor64(&mut rng, &[2, 4, 1, 1], -0.4, 0.4);
        let w2 = rand_tensor64(&mut rng, &[2, 2, 3, 3], -0.4, 0.4);
        let w3 = rand_tensor64(&mut rng, &[4, 2, 1, 1], -0.4, 0.4);
        let wl = rand_tensor64(&mut rng, &[3, 4], -0.5, 0.5);
        let bl = rand_tensor64(&mut rng, &[3], -0.3, 0.3);
        let labels = vec![(trial as usize) % 3, (trial as usize + 1) % 3];
        fd_check(
            &FdCase {
                name: "composed-bottleneck-head",
                inputs: vec![x, w1, w2, w3, wl, bl],
                build: Box::new(move |tape, vs| {
                    let y = tape.conv2d(vs[0], vs[1], None, 1, 0).unwrap();
                    let y = tape.relu(y);
                    let y = tape.conv2d(y, vs[2], None, 1, 1).unwrap();
                    let y = tape.relu(y);
                    let y = tape.conv2d(y, vs[3], None, 1, 0).unwrap();
                    let y = tape.add(y, vs[0]).unwrap();
                    let y = tape.relu(y);
                    let y = tape.global_avgpool(y).unwrap();
                    let y = tape.linear(y, vs[4], Some(vs[5])).unwrap();
                    tape.softmax_cross_entropy(y, &labels).unwrap()
                }),
                h: H,
            },
            RTOL,
        );
        cases += 1;
    }

    cases
}

