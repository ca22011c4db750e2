use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

/// Bilinear zoom by `factor` about the image centre; equivalent to
/// resizing by `factor` and centre-cropping back to the original size.
pub fn zoom_center(image: &Image, factor: f64) -> Image {
    let (h, w) = (image.height(), image.width());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        let sy = (cy + (y as f64 - cy) / factor).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = (cx + (x as f64 - cx) / factor).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let (a, b) = (image.pixel(y0, x0), image.pixel(y0, x1));
            let (c, d) = (image.pixel(y1, x0), image.pixel(y1, x1));
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bot = c[ch] + (d[ch] - c[ch]) * fx;
                rgb[ch] = top + (bot - top) * fy;
            }
            out.set_pixel(y, x, rgb);
        }
    }
    out
}

/// Random resize with factor `u ~ U[1, max_factor]`, then centre crop.
pub fn augment(image: &Image, seed: u64, max_factor: f64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = if max_factor > 1.0 {
        rng.random_range(1.0..max_factor)
    } else {
        1.0
    };
    zoom_center(image, u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_factor_is_identity() {
        let data = (0..8 * 8 * 3).map(|i| (i % 11) as f64 / 11.0).collect();
        let img = Image::new(8, 8, data).unwrap();
        assert_eq!(zoom_center(&img, 1.0), img);
        assert_eq!(augment(&img, 3, 1.0), img);
    }

    #[test]
    fn extents_preserved() {
        let img = Image::filled(10, 10, [0.3; 3]);
        let out = augment(&img, 9, 1.25);
        assert_eq!((out.height(), out.width()), (10, 10));
    }
}
