use rand::Rng;

use crate::corpus::ImageGrid;
use crate::seeding::rng_from;

pub const MAX_ROTATION_DEG: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub offset_row: usize,
    pub offset_col: usize,
}

impl AugmentParams {
    pub fn centered(side: usize, crop: usize) -> Self {
        let off = (side - crop) / 2;
        Self { angle_deg: 0.0, offset_row: off, offset_col: off }
    }
}

fn bilinear(img: &ImageGrid, y: f64, x: f64) -> f64 {
    let max = (img.side() - 1) as f64;
    let y = y.clamp(0.0, max);
    let x = x.clamp(0.0, max);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.side() - 1), (x0 + 1).min(img.side() - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.intensity(y0, x0) * (1.0 - fx) + img.intensity(y0, x1) * fx;
    let bottom = img.intensity(y1, x0) * (1.0 - fx) + img.intensity(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates about the image centre (bilinear, edge-replicated) and then crops
/// a `crop × crop` window at the given offset.
pub fn augment_with(img: &ImageGrid, crop: usize, params: AugmentParams) -> ImageGrid {
    let side = img.side();
    assert!(crop <= side, "crop {crop} exceeds image side {side}");
    assert!(params.offset_row + crop <= side && params.offset_col + crop <= side, "crop window out of bounds");
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = params.angle_deg.to_radians().sin_cos();
    let mut out = Vec::with_capacity(crop * crop);
    for r in 0..crop {
        for col in 0..crop {
            let y = (params.offset_row + r) as f64;
            let x = (params.offset_col + col) as f64;
            let v = if params.angle_deg == 0.0 {
                img.intensity(y as usize, x as usize)
            } else {
                // Inverse mapping: sample the source at the point that rotates onto (y, x).
                let (dy, dx) = (y - c, x - c);
                let sy = c + cos * dy - sin * dx;
                let sx = c + sin * dy + cos * dx;
                bilinear(img, sy, sx)
            };
            out.push(v);
        }
    }
    ImageGrid::from_intensities(crop, img.view(), &out)
}

/// Training mode draws an angle from U[-5°, 5°] and a uniform crop offset;
/// evaluation mode takes the centred crop without rotation.
pub fn augment_image(img: &ImageGrid, crop: usize, train: bool, seed: u64) -> ImageGrid {
    let side = img.side();
    let params = if train {
        let mut rng = rng_from(seed);
        AugmentParams {
            angle_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            offset_row: rng.gen_range(0..=side - crop),
            offset_col: rng.gen_range(0..=side - crop),
        }
    } else {
        AugmentParams::centered(side, crop)
    };
    augment_with(img, crop, params)
}

/// Augments every image of a study, each with its own derived seed.
pub fn prepare_images(images: &[ImageGrid], crop: usize, train: bool, seed: u64) -> Vec<ImageGrid> {
    images
        .iter()
        .enumerate()
        .map(|(i, im)| augment_image(im, crop, train, crate::seeding::derive_seed(seed, &[i as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ViewTag;

    fn image() -> ImageGrid {
        let side = 16;
        let px: Vec<f64> = (0..side * side).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        ImageGrid::from_intensities(side, ViewTag::Frontal, &px)
    }

    #[test]
    fn eval_mode_is_deterministic_center_crop() {
        let img = image();
        let a = augment_image(&img, 12, false, 1);
        let b = augment_image(&img, 12, false, 99);
        assert_eq!(a, b);
        assert_eq!(a.side(), 12);
        assert_eq!(a.intensity(0, 0), img.intensity(2, 2));
    }

    #[test]
    fn null_augmentation_is_identity() {
        let img = image();
        assert_eq!(augment_with(&img, 16, AugmentParams::centered(16, 16)), img);
        assert_eq!(augment_with(&img, 12, AugmentParams::centered(16, 12)), augment_image(&img, 12, false, 0));
    }

    #[test]
    fn rotation_stays_in_unit_range_and_varies_with_seed() {
        let img = image();
        for seed in 0..20 {
            let out = augment_image(&img, 12, true, seed);
            assert!(out.intensities().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(augment_image(&img, 12, true, 1), augment_image(&img, 12, true, 2));
        assert_eq!(augment_image(&img, 12, true, 3), augment_image(&img, 12, true, 3));
    }

    #[test]
    fn small_rotation_moves_pixels_off_center() {
        let side = 21;
        let mut px = vec![0.0; side * side];
        px[10 * side + 20] = 1.0;
        let img = ImageGrid::from_intensities(side, ViewTag::Lateral, &px);
        let rotated = augment_with(&img, side, AugmentParams { angle_deg: 5.0, offset_row: 0, offset_col: 0 });
        assert!(rotated.intensity(10, 20) < 1.0);
        assert_eq!(rotated.intensity(10, 10), 0.0);
    }
}
