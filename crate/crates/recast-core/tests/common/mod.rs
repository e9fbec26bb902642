//! Shared test oracles, independent of the implementation paths they check.

#![allow(dead_code)]

pub mod gradbattery;

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use recast_core::tensor::{Tape, Tensor};

/// Uniform f64 in [lo, hi) from explicit bits (platform-stable).
pub fn urand(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + (hi - lo) * u
}

pub fn rand_tensor64(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| urand(rng, lo, hi))
}

/// Random values kept away from zero, for kinked ops like relu.
pub fn rand_tensor64_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = urand(rng, 0.05, 1.0);
        if rng.next_u32() & 1 == 0 {
            v
        } else {
            -v
        }
    })
}

/// Brute-force cross-correlation: six nested loops, no im2col, no GEMM.
/// This is the independent reference conv2d is checked against.
pub fn conv2d_reference(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    for bi in 0..b {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |bd| bd[co]);
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (i * stride + ki) as isize - padding as isize;
                                let iw = (j * stride + kj) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * cin + ci) * h + ih as usize) * wd + iw as usize;
                                let wi = ((co * cin + ci) * kh + ki) * kw + kj;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + co) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

/// One gradient-check case: `build` records the forward pass from leaf
/// inputs to a scalar loss on a fresh tape.
pub struct FdCase<'a> {
    pub name: &'a str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<dyn Fn(&mut Tape<f64>, &[recast_core::tensor::ValRef]) -> recast_core::tensor::ValRef + 'a>,
    /// Central-difference step; a couple of ops want a smaller one.
    pub h: f64,
}

/// Central finite differences against the tape's analytic gradients.
///
/// Every element of every input is perturbed by ±h; the analytic gradient
/// must match (L(x+h)-L(x-h))/2h within `rtol` relative tolerance.
pub fn fd_check(case: &FdCase, rtol: f64) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = tape.nodes_from(&case.inputs);
    let loss = (case.build)(&mut tape, &vars);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let vs: Vec<_> = t.nodes_from(inputs);
        let l = (case.build)(&mut t, &vs);
        t.value(l).item()
    };

    for (ii, input) in case.inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus = case.inputs.clone();
            plus[ii].data_mut()[ei] += case.h;
            let mut minus = case.inputs.clone();
            minus[ii].data_mut()[ei] -= case.h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * case.h);
            let an = analytic[ii].data()[ei];
            let tol = rtol * an.abs().max(fd.abs()) + 1e-7;
            assert!(
                (an - fd).abs() <= tol,
                "{}: input {ii} elem {ei}: analytic {an} vs finite-diff {fd}",
                case.name
            );
        }
    }
}

pub fn approx_rel(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + 1e-12
}
