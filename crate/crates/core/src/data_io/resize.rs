use super::Sample;
use crate::grid::Grid;

/// Pads with zeros to a square with the content centered.
pub fn pad_to_square<T: Clone + Default>(grid: &Grid<T>) -> Grid<T> {
    let side = grid.width().max(grid.height());
    if grid.width() == side && grid.height() == side {
        return grid.clone();
    }
    let ox = (side - grid.width()) / 2;
    let oy = (side - grid.height()) / 2;
    let mut out = Grid::new(side, side);
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            out.set(x + ox, y + oy, grid.get(x, y).clone());
        }
    }
    out
}

/// Nearest-neighbour resampling, source index `floor((x + 0.5) * src / dst)`.
pub(crate) fn resize_nearest<T: Clone>(grid: &Grid<T>, width: usize, height: usize) -> Grid<T> {
    let (sw, sh) = (grid.width(), grid.height());
    Grid::from_fn(width, height, |x, y| {
        let sx = ((2 * x + 1) * sw) / (2 * width);
        let sy = ((2 * y + 1) * sh) / (2 * height);
        grid.get(sx.min(sw - 1), sy.min(sh - 1)).clone()
    })
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub(crate) fn resize_bilinear(grid: &Grid<f64>, width: usize, height: usize) -> Grid<f64> {
    let (sw, sh) = (grid.width(), grid.height());
    let fx = sw as f64 / width as f64;
    let fy = sh as f64 / height as f64;
    Grid::from_fn(width, height, |x, y| {
        let u = ((x as f64 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f64);
        let v = ((y as f64 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
        let (ax, ay) = (u - x0 as f64, v - y0 as f64);
        let top = grid.get(x0, y0) * (1.0 - ax) + grid.get(x1, y0) * ax;
        let bottom = grid.get(x0, y1) * (1.0 - ax) + grid.get(x1, y1) * ax;
        top * (1.0 - ay) + bottom * ay
    })
}

/// Pads to a centered square, then resamples to `size`x`size`: bilinear for
/// the image, nearest neighbour for the mask.
pub fn pad_and_resize(sample: &Sample, size: usize) -> Sample {
    assert!(size > 0, "target size must be positive");
    let image = pad_to_square(&sample.image);
    let mask = pad_to_square(&sample.mask);
    let (image, mask) = if image.width() == size {
        (image, mask)
    } else {
        (
            resize_bilinear(&image, size, size),
            resize_nearest(&mask, size, size),
        )
    };
    let present = mask.labels();
    Sample {
        image,
        mask,
        subject_id: sample.subject_id.clone(),
        annotated_organs: sample
            .annotated_organs
            .iter()
            .copied()
            .filter(|l| present.contains(l))
            .collect(),
    }
}
