//! Procedural 16×16 digit glyphs built from line strokes.

use rand::Rng;

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;

type Seg = ((f64, f64), (f64, f64));

const L: f64 = 4.5;
const R: f64 = 11.5;
const T: f64 = 2.5;
const M: f64 = 8.0;
const B: f64 = 13.5;

const SEG_A: Seg = ((L, T), (R, T));
const SEG_B: Seg = ((R, T), (R, M));
const SEG_C: Seg = ((R, M), (R, B));
const SEG_D: Seg = ((L, B), (R, B));
const SEG_E: Seg = ((L, M), (L, B));
const SEG_F: Seg = ((L, T), (L, M));
const SEG_G: Seg = ((L, M), (R, M));

/// Stroke skeleton of digit `class` (0..=9).
pub fn strokes(class: usize) -> Vec<Seg> {
    match class {
        0 => vec![SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F, ((R, T), (L, B))],
        1 => vec![((8.0, T), (8.0, B)), ((5.5, 5.0), (8.0, T)), ((6.0, B), (10.0, B))],
        2 => vec![SEG_A, SEG_B, SEG_G, SEG_E, SEG_D],
        3 => vec![SEG_A, SEG_B, ((6.0, M), (R, M)), SEG_C, SEG_D],
        4 => vec![SEG_F, SEG_G, SEG_B, SEG_C],
        5 => vec![SEG_A, SEG_F, SEG_G, SEG_C, SEG_D],
        6 => vec![((R, T), (L, M)), SEG_E, SEG_D, SEG_C, SEG_G],
        7 => vec![SEG_A, ((R, T), (6.5, B))],
        8 => vec![SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F, SEG_G],
        9 => vec![SEG_A, SEG_B, SEG_F, SEG_G, ((R, M), (6.5, B))],
        _ => panic!("digit class {class} out of range"),
    }
}

/// Writer-style variation applied to the skeleton before rasterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub scale: f64,
    pub shear: f64,
    pub angle: f64,
    pub dx: f64,
    pub dy: f64,
    pub half_width: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { scale: 1.0, shear: 0.0, angle: 0.0, dx: 0.0, dy: 0.0, half_width: 0.8 };

    pub fn sample<R: Rng>(rng: &mut R) -> Jitter {
        Jitter {
            scale: rng.gen_range(0.85..1.1),
            shear: rng.gen_range(-0.2..0.2),
            angle: rng.gen_range(-5f64..5.0).to_radians(),
            dx: rng.gen_range(-1.0..1.0),
            dy: rng.gen_range(-1.0..1.0),
            half_width: rng.gen_range(0.6..1.0),
        }
    }

    fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let c = SIDE as f64 / 2.0;
        let (u, v) = ((x - c) * self.scale, (y - c) * self.scale);
        let u = u + self.shear * v;
        let (s, co) = self.angle.sin_cos();
        (c + co * u - s * v + self.dx, c + s * u + co * v + self.dy)
    }
}

fn seg_distance(p: (f64, f64), (a, b): Seg) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Anti-aliased raster in `[0, 1]`, row-major.
pub fn render(class: usize, jitter: &Jitter) -> Vec<f64> {
    let segs: Vec<Seg> = strokes(class)
        .into_iter()
        .map(|(a, b)| (jitter.apply(a), jitter.apply(b)))
        .collect();
    let mut out = vec![0.0; PIXELS];
    for py in 0..SIDE {
        for px in 0..SIDE {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let d = segs.iter().map(|s| seg_distance(p, *s)).fold(f64::INFINITY, f64::min);
            out[py * SIDE + px] = (jitter.half_width + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    out
}

/// Bilinear rotation about the raster center; outside samples read as `fill`.
pub fn rotate(img: &[f64], degrees: f64, fill: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let mid = SIDE as f64 / 2.0;
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= SIDE as isize || y >= SIDE as isize {
            fill
        } else {
            img[y as usize * SIDE + x as usize]
        }
    };
    let mut out = vec![0.0; PIXELS];
    for py in 0..SIDE {
        for px in 0..SIDE {
            let (u, v) = (px as f64 + 0.5 - mid, py as f64 + 0.5 - mid);
            // inverse map: destination pixel to source coordinates
            let sx = c * u + s * v + mid - 0.5;
            let sy = -s * u + c * v + mid - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[py * SIDE + px] = (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                + fx * (1.0 - fy) * at(x0 + 1, y0)
                + (1.0 - fx) * fy * at(x0, y0 + 1)
                + fx * fy * at(x0 + 1, y0 + 1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_in_range() {
        let imgs: Vec<Vec<f64>> = (0..10).map(|c| render(c, &Jitter::NONE)).collect();
        for (i, a) in imgs.iter().enumerate() {
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.iter().sum::<f64>() > 5.0, "glyph {i} nearly empty");
            for b in &imgs[i + 1..] {
                let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                assert!(diff > 3.0);
            }
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = render(4, &Jitter::NONE);
        let r = rotate(&img, 0.0, 0.0);
        for (a, b) in img.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
