//! Geometric resampling: resize, right-angle rotation, flips and small-angle
//! rotation. Elevations resample bilinearly, masks with nearest neighbour.

use super::{Grid, Mask};

/// Bilinear resize with pixel-centre alignment; constants are preserved exactly.
pub fn resize_bilinear(grid: &Grid, width: usize, height: usize) -> Grid {
    if width == grid.width() && height == grid.height() {
        return grid.clone();
    }
    let sx = grid.width() as f64 / width as f64;
    let sy = grid.height() as f64 / height as f64;
    let values = (0..height)
        .flat_map(|r| {
            (0..width).map(move |c| {
                grid.bilinear_at((c as f64 + 0.5) * sx - 0.5, (r as f64 + 0.5) * sy - 0.5)
            })
        })
        .collect();
    Grid::with_georef(width, height, grid.pixel_size() * sx, grid.origin(), values)
        .expect("positive dimensions")
}

pub fn resize_nearest(mask: &Mask, width: usize, height: usize) -> Mask {
    let sx = mask.width() as f64 / width as f64;
    let sy = mask.height() as f64 / height as f64;
    Mask::from_fn(width, height, |r, c| {
        let sr = (((r as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        let sc = (((c as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
        mask.get(sr, sc)
    })
}

/// Source (row, col) for output (row, col) of a counter-clockwise quarter turn
/// repeated `k` times. Output dimensions swap for odd `k`.
fn rot90_source(k: usize, w: usize, h: usize, r: usize, c: usize) -> (usize, usize) {
    match k % 4 {
        0 => (r, c),
        1 => (c, w - 1 - r),
        2 => (h - 1 - r, w - 1 - c),
        _ => (h - 1 - c, r),
    }
}

fn rot90_dims(k: usize, w: usize, h: usize) -> (usize, usize) {
    if k % 2 == 1 {
        (h, w)
    } else {
        (w, h)
    }
}

pub fn rotate90(grid: &Grid, k: usize) -> Grid {
    let (w, h) = (grid.width(), grid.height());
    let (ow, oh) = rot90_dims(k, w, h);
    let values = (0..oh)
        .flat_map(|r| {
            (0..ow).map(move |c| {
                let (sr, sc) = rot90_source(k, w, h, r, c);
                grid.get(sr, sc)
            })
        })
        .collect();
    Grid::with_georef(ow, oh, grid.pixel_size(), grid.origin(), values).expect("same size")
}

pub fn rotate90_mask(mask: &Mask, k: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let (ow, oh) = rot90_dims(k, w, h);
    Mask::from_fn(ow, oh, |r, c| {
        let (sr, sc) = rot90_source(k, w, h, r, c);
        mask.get(sr, sc)
    })
}

pub fn flip_horizontal(grid: &Grid) -> Grid {
    let w = grid.width();
    let flipped = Grid::from_fn(w, grid.height(), |r, c| grid.get(r, w - 1 - c));
    grid.with_values(flipped.into_values()).expect("same shape")
}

pub fn flip_vertical(grid: &Grid) -> Grid {
    let h = grid.height();
    let flipped = Grid::from_fn(grid.width(), h, |r, c| grid.get(h - 1 - r, c));
    grid.with_values(flipped.into_values()).expect("same shape")
}

pub fn flip_horizontal_mask(mask: &Mask) -> Mask {
    let w = mask.width();
    Mask::from_fn(w, mask.height(), |r, c| mask.get(r, w - 1 - c))
}

pub fn flip_vertical_mask(mask: &Mask) -> Mask {
    let h = mask.height();
    Mask::from_fn(mask.width(), h, |r, c| mask.get(h - 1 - r, c))
}

fn rotation_source(deg: f64, w: usize, h: usize, r: usize, c: usize) -> (f64, f64) {
    let (sin, cos) = deg.to_radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let dx = c as f64 - cx;
    let dy = r as f64 - cy;
    (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
}

/// Rotate about the raster centre by `deg` degrees. Pixels whose source falls
/// outside the raster become nodata.
pub fn rotate_bilinear(grid: &Grid, deg: f64) -> Grid {
    let (w, h) = (grid.width(), grid.height());
    let values = (0..h)
        .flat_map(|r| {
            (0..w).map(move |c| {
                let (sx, sy) = rotation_source(deg, w, h, r, c);
                let eps = 1e-9;
                if sx < -eps || sy < -eps || sx > (w - 1) as f64 + eps || sy > (h - 1) as f64 + eps
                {
                    f64::NAN
                } else {
                    grid.bilinear_at(sx, sy)
                }
            })
        })
        .collect();
    grid.with_values(values).expect("same shape")
}

pub fn rotate_nearest_mask(mask: &Mask, deg: f64) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    Mask::from_fn(w, h, |r, c| {
        let (sx, sy) = rotation_source(deg, w, h, r, c);
        let (ix, iy) = (sx.round(), sy.round());
        if ix < 0.0 || iy < 0.0 || ix > (w - 1) as f64 || iy > (h - 1) as f64 {
            false
        } else {
            mask.get(iy as usize, ix as usize)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(w: usize, h: usize) -> Grid {
        Grid::from_fn(w, h, |r, c| (r * w + c) as f64)
    }

    #[test]
    fn quarter_turns_compose() {
        let g = numbered(5, 3);
        let once = rotate90(&g, 1);
        assert_eq!((once.width(), once.height()), (3, 5));
        assert_eq!(rotate90(&rotate90(&g, 2), 2), g);
        let four = (0..4).fold(g.clone(), |acc, _| rotate90(&acc, 1));
        assert_eq!(four, g);
        assert_eq!(rotate90(&once, 3), g);
    }

    #[test]
    fn zero_angle_rotation_is_identity() {
        let g = numbered(6, 4);
        assert_eq!(rotate_bilinear(&g, 0.0), g);
    }

    #[test]
    fn small_rotation_invalidates_corners() {
        let g = Grid::filled(16, 16, 2.0);
        let r = rotate_bilinear(&g, 5.0);
        assert!(r.get(0, 0).is_nan());
        assert_eq!(r.get(8, 8), 2.0);
        let m = rotate_nearest_mask(&Mask::filled(16, 16, true), 5.0);
        assert!(m.get(8, 8));
    }

    #[test]
    fn resize_preserves_constants() {
        let g = Grid::filled(7, 5, 3.5);
        let up = resize_bilinear(&g, 20, 13);
        assert!(up.values().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        let down = resize_bilinear(&up, 4, 3);
        assert!(down.values().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert!((up.pixel_size() - 7.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn flips_are_involutions() {
        let g = numbered(4, 3);
        assert_eq!(flip_horizontal(&flip_horizontal(&g)), g);
        assert_eq!(flip_vertical(&flip_vertical(&g)), g);
        assert_eq!(flip_horizontal(&g).get(0, 0), 3.0);
    }
}
