//! Procedural desk-scale dataset: class-dependent oriented gratings with
//! frequency/phase/contrast jitter and pixel noise. Small CNNs separate
//! the classes cleanly while the noise keeps the task non-trivial.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::tensor::Tensor;

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = unit(rng).max(1e-12);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const NOISE_SIGMA: f64 = 0.35;

/// Class c pattern: frequency band c/2, near-horizontal stripes for even
/// c, near-vertical for odd. Both attributes survive crops and horizontal
/// flips, so labels stay valid under the standard augmentation. Frequency
/// bands overlap at their edges, which keeps peak accuracy away from 100%.
pub fn synth_dataset(seed: u64, n: usize, num_classes: usize, size: usize) -> Dataset {
    assert!(n >= num_classes, "need at least one sample per class");
    let c = 3usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![0.0f32; n * c * size * size];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % num_classes) as u32;
        labels.push(label);
        let freq_idx = (label / 2) as f64;
        let vertical = label % 2 == 1;
        // adjacent frequency classes spaced 1.35x with +-15% jitter, so the
        // class boundaries genuinely overlap; orientation jittered +-20deg
        // around horizontal/vertical
        let f = 2.0 * 1.35f64.powf(freq_idx) * range(&mut rng, 0.85, 1.15);
        let theta = if vertical {
            std::f64::consts::FRAC_PI_2
        } else {
            0.0
        } + range(&mut rng, -0.35, 0.35);
        let (cos_t, sin_t) = (theta.cos(), theta.sin());
        let phase = range(&mut rng, 0.0, std::f64::consts::TAU);
        let contrast = range(&mut rng, 0.45, 0.9);
        let gains = [
            range(&mut rng, 0.8, 1.0),
            range(&mut rng, 0.8, 1.0),
            range(&mut rng, 0.8, 1.0),
        ];
        for ch in 0..c {
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 * cos_t + y as f64 * sin_t;
                    let s = (std::f64::consts::TAU * f * u / size as f64 + phase).sin();
                    let v = 0.5
                        + 0.5 * contrast * gains[ch] * s
                        + NOISE_SIGMA * gauss(&mut rng);
                    let idx = ((i * c + ch) * size + y) * size + x;
                    images[idx] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let images = Tensor::new(vec![n, c, size, size], images).expect("synth shape");
    Dataset::new(images, labels, Split::Train, num_classes).expect("synth labels")
}
