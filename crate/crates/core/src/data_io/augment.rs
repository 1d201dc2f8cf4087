use rand::Rng;

use super::{DatasetConfig, Sample};
use crate::grid::{Grid, Image, LabelMask};

pub fn flip_h<T: Clone>(g: &Grid<T>) -> Grid<T> {
    let w = g.width();
    Grid::from_fn(w, g.height(), |x, y| g.get(w - 1 - x, y).clone())
}

pub fn flip_v<T: Clone>(g: &Grid<T>) -> Grid<T> {
    let h = g.height();
    Grid::from_fn(g.width(), h, |x, y| g.get(x, h - 1 - y).clone())
}

pub fn transpose<T: Clone>(g: &Grid<T>) -> Grid<T> {
    Grid::from_fn(g.height(), g.width(), |x, y| g.get(y, x).clone())
}

/// Rotation about the image center by `radians` (clockwise on screen for
/// positive angles, since y points down). Image bilinear, mask nearest,
/// zero fill outside.
pub fn rotate(image: &Image, mask: &LabelMask, radians: f64) -> (Image, LabelMask) {
    let (w, h) = (image.width(), image.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = radians.sin_cos();
    // inverse map: output pixel center -> source continuous position
    let source = |x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        (c * dx + s * dy + cx, -s * dx + c * dy + cy)
    };
    let out_mask = Grid::from_fn(w, h, |x, y| {
        let (sx, sy) = source(x, y);
        mask.get_signed(sx.floor() as i64, sy.floor() as i64)
            .copied()
            .unwrap_or(0)
    });
    let out_image = Grid::from_fn(w, h, |x, y| {
        let (sx, sy) = source(x, y);
        let (u, v) = (sx - 0.5, sy - 0.5);
        let (x0, y0) = (u.floor() as i64, v.floor() as i64);
        let (ax, ay) = (u - x0 as f64, v - y0 as f64);
        let at = |xx: i64, yy: i64| image.get_signed(xx, yy).copied().unwrap_or(0.0);
        let top = at(x0, y0) * (1.0 - ax) + at(x0 + 1, y0) * ax;
        let bottom = at(x0, y0 + 1) * (1.0 - ax) + at(x0 + 1, y0 + 1) * ax;
        top * (1.0 - ay) + bottom * ay
    });
    (out_image, out_mask)
}

/// Applies each enabled transform with probability 1/2, in the order
/// horizontal flip, vertical flip, rotation, transpose. Random draws are
/// only made for enabled transforms.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &DatasetConfig, rng: &mut R) -> Sample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if cfg.aug_flip_h && rng.random_bool(0.5) {
        image = flip_h(&image);
        mask = flip_h(&mask);
    }
    if cfg.aug_flip_v && rng.random_bool(0.5) {
        image = flip_v(&image);
        mask = flip_v(&mask);
    }
    if cfg.aug_rotate && rng.random_bool(0.5) {
        let max = cfg.rotate_max_deg.to_radians();
        let angle = if max > 0.0 {
            rng.random_range(-max..=max)
        } else {
            0.0
        };
        (image, mask) = rotate(&image, &mask, angle);
    }
    if cfg.aug_transpose && rng.random_bool(0.5) {
        image = transpose(&image);
        mask = transpose(&mask);
    }
    Sample {
        image,
        mask,
        subject_id: sample.subject_id.clone(),
        annotated_organs: sample.annotated_organs.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let mask: LabelMask = Grid::from_fn(12, 12, |x, y| u8::from(x > 2 && x < 7 && y > 1 && y < 9));
        let image = Grid::from_fn(12, 12, |x, y| (x * 12 + y) as f64 / 144.0);
        Sample::new(image, mask, "a")
    }

    fn all_on() -> DatasetConfig {
        DatasetConfig {
            aug_flip_h: true,
            aug_flip_v: true,
            aug_rotate: true,
            aug_transpose: true,
            rotate_max_deg: 15.0,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn disabled_flags_are_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&s, &DatasetConfig::default(), &mut rng), s);
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample();
        assert_eq!(flip_h(&flip_h(&s.mask)), s.mask);
        assert_eq!(flip_v(&flip_v(&s.image)), s.image);
        assert_eq!(transpose(&transpose(&s.mask)), s.mask);
    }

    #[test]
    fn same_seed_same_output() {
        let s = sample();
        let cfg = all_on();
        for seed in 0..20 {
            let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let b = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let s = sample();
        let (img, m) = rotate(&s.image, &s.mask, 0.0);
        assert_eq!(m, s.mask);
        for (a, b) in img.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_matches_transpose_and_flip() {
        let s = sample();
        let (_, m) = rotate(&s.image, &s.mask, std::f64::consts::FRAC_PI_2);
        // +90 degrees with y down: (x, y) -> (w-1-y, x)
        assert_eq!(m, flip_h(&transpose(&s.mask)));
    }
}
