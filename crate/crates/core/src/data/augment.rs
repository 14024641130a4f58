use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SampleShape;

/// Mirror every channel left to right.
pub fn flip_horizontal(sample: &[f64], shape: SampleShape) -> Vec<f64> {
    let SampleShape::Image {
        channels,
        height,
        width,
    } = shape
    else {
        return sample.to_vec();
    };
    let mut out = vec![0.0; sample.len()];
    for c in 0..channels {
        for y in 0..height {
            let row = (c * height + y) * width;
            for x in 0..width {
                out[row + x] = sample[row + width - 1 - x];
            }
        }
    }
    out
}

/// Zero-pads by `pad_y`/`pad_x` on every side, then crops back to the
/// original size with the top-left corner at `(off_y, off_x)` in the padded
/// frame.
pub fn crop_with_padding(
    sample: &[f64],
    shape: SampleShape,
    pad: (usize, usize),
    offset: (usize, usize),
) -> Vec<f64> {
    let SampleShape::Image {
        channels,
        height,
        width,
    } = shape
    else {
        return sample.to_vec();
    };
    let (pad_y, pad_x) = pad;
    let (off_y, off_x) = offset;
    let mut out = vec![0.0; sample.len()];
    for c in 0..channels {
        for y in 0..height {
            let src_y = (y + off_y) as isize - pad_y as isize;
            if src_y < 0 || src_y >= height as isize {
                continue;
            }
            for x in 0..width {
                let src_x = (x + off_x) as isize - pad_x as isize;
                if src_x < 0 || src_x >= width as isize {
                    continue;
                }
                out[(c * height + y) * width + x] =
                    sample[(c * height + src_y as usize) * width + src_x as usize];
            }
        }
    }
    out
}

/// Random horizontal flip (p = 0.5) followed by a random crop with 10%
/// padding. Vector samples pass through untouched.
pub fn augment_with<R: Rng + ?Sized>(sample: &[f64], shape: SampleShape, rng: &mut R) -> Vec<f64> {
    let SampleShape::Image { height, width, .. } = shape else {
        return sample.to_vec();
    };
    let flipped = if rng.random_bool(0.5) {
        flip_horizontal(sample, shape)
    } else {
        sample.to_vec()
    };
    let pad_y = (height as f64 * 0.1).ceil() as usize;
    let pad_x = (width as f64 * 0.1).ceil() as usize;
    let off = (
        rng.random_range(0..=2 * pad_y),
        rng.random_range(0..=2 * pad_x),
    );
    crop_with_padding(&flipped, shape, (pad_y, pad_x), off)
}

/// Seeded form of [`augment_with`].
pub fn augment(sample: &[f64], shape: SampleShape, seed: u64) -> Vec<f64> {
    augment_with(sample, shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMG: SampleShape = SampleShape::Image {
        channels: 2,
        height: 3,
        width: 4,
    };

    fn ramp() -> Vec<f64> {
        (0..24).map(|v| v as f64).collect()
    }

    #[test]
    fn double_flip_is_identity() {
        let s = ramp();
        assert_eq!(flip_horizontal(&flip_horizontal(&s, IMG), IMG), s);
        assert_ne!(flip_horizontal(&s, IMG), s);
    }

    #[test]
    fn centred_crop_is_identity() {
        let s = ramp();
        assert_eq!(crop_with_padding(&s, IMG, (1, 1), (1, 1)), s);
    }

    #[test]
    fn shifted_crop_moves_content_and_zero_fills() {
        let s = ramp();
        let out = crop_with_padding(&s, IMG, (1, 1), (0, 0));
        // Shifted down-right by one: first row and column are padding.
        assert_eq!(out[0], 0.0);
        assert_eq!(out[5], s[0]);
    }

    #[test]
    fn vectors_pass_through() {
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(augment(&v, SampleShape::Vector { len: 3 }, 42), v);
    }

    #[test]
    fn augmentation_is_seeded_and_shape_preserving() {
        let s = ramp();
        let a = augment(&s, IMG, 5);
        assert_eq!(a, augment(&s, IMG, 5));
        assert_eq!(a.len(), s.len());
    }
}
