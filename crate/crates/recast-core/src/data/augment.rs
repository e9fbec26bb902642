//! Standard CIFAR-style augmentation: four-pixel zero padding, random
//! crop back to the original size, horizontal flip with probability 0.5.

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;

pub const PAD: usize = 4;

/// One augmentation draw. Offsets index into the padded image, so
/// `(PAD, PAD)` with no flip is the identity transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        dy: PAD,
        dx: PAD,
        flip: false,
    };

    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        let dy = (rng.next_u32() as usize) % (2 * PAD + 1);
        let dx = (rng.next_u32() as usize) % (2 * PAD + 1);
        let flip = rng.next_u32() & 1 == 1;
        Self { dy, dx, flip }
    }
}

/// Apply pad-crop-flip to one `[C,H,W]` image slice.
pub fn augment_image(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    params: AugmentParams,
    dst: &mut [f32],
) {
    debug_assert_eq!(src.len(), c * h * w);
    debug_assert_eq!(dst.len(), c * h * w);
    debug_assert!(params.dy <= 2 * PAD && params.dx <= 2 * PAD);
    for ch in 0..c {
        for y in 0..h {
            // source row in the virtual padded image
            let py = y + params.dy;
            let sy = py as isize - PAD as isize;
            for x in 0..w {
                let px = x + params.dx;
                let sx = px as isize - PAD as isize;
                let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    0.0
                } else {
                    src[(ch * h + sy as usize) * w + sx as usize]
                };
                let ox = if params.flip { w - 1 - x } else { x };
                dst[(ch * h + y) * w + ox] = v;
            }
        }
    }
}
