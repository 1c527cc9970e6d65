//! Label-preserving augmentations and two-view construction.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::numgrad::Tensor;
use crate::par::{map_indexed, Exec};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Flat,
    Raster { width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    /// Integer translation drawn from `[-shift, shift]` on both axes.
    pub shift: i32,
    /// Additive Gaussian jitter on flat inputs.
    pub jitter_sigma: f64,
    pub noise_sigma: f64,
    /// Side of a square patch zeroed at a random position (0 = off).
    pub erase: usize,
    /// Per-element multiplicative gain range; `(1, 1)` disables.
    pub gain: (f64, f64),
}

impl AugmentPolicy {
    pub const IDENTITY: AugmentPolicy = AugmentPolicy {
        flip_prob: 0.0,
        shift: 0,
        jitter_sigma: 0.0,
        noise_sigma: 0.0,
        erase: 0,
        gain: (1.0, 1.0),
    };

    /// Flip-and-shift for rasters, small jitter for flat vectors.
    pub fn weak(layout: Layout) -> Self {
        match layout {
            Layout::Raster { .. } => AugmentPolicy { flip_prob: 0.5, shift: 1, ..Self::IDENTITY },
            Layout::Flat => AugmentPolicy { jitter_sigma: 0.02, ..Self::IDENTITY },
        }
    }

    /// Weak, then noise, patch erase and per-element gain.
    pub fn strong(layout: Layout) -> Self {
        let erase = match layout {
            Layout::Raster { .. } => 4,
            Layout::Flat => 0,
        };
        AugmentPolicy { noise_sigma: 0.1, erase, gain: (0.8, 1.2), ..Self::weak(layout) }
    }
}

/// Applies `policy` to one input. All randomness comes from `rng`.
pub fn augment<R: Rng>(x: &[f64], layout: Layout, policy: &AugmentPolicy, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    if let Layout::Raster { width, height } = layout {
        let flip = policy.flip_prob > 0.0 && rng.gen_bool(policy.flip_prob);
        let (dx, dy) = if policy.shift > 0 {
            (rng.gen_range(-policy.shift..=policy.shift), rng.gen_range(-policy.shift..=policy.shift))
        } else {
            (0, 0)
        };
        if flip || dx != 0 || dy != 0 {
            let mut moved = vec![0.0; out.len()];
            for y in 0..height as i32 {
                for x in 0..width as i32 {
                    let sx = if flip { width as i32 - 1 - x } else { x } - dx;
                    let sy = y - dy;
                    if sx >= 0 && sy >= 0 && sx < width as i32 && sy < height as i32 {
                        moved[(y * width as i32 + x) as usize] = out[(sy * width as i32 + sx) as usize];
                    }
                }
            }
            out = moved;
        }
    }
    if policy.jitter_sigma > 0.0 {
        let n = Normal::new(0.0, policy.jitter_sigma).unwrap();
        out.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    if policy.noise_sigma > 0.0 {
        let n = Normal::new(0.0, policy.noise_sigma).unwrap();
        out.iter_mut().for_each(|v| *v += n.sample(rng));
    }
    if policy.erase > 0 {
        if let Layout::Raster { width, height } = layout {
            let e = policy.erase.min(width).min(height);
            let x0 = rng.gen_range(0..=width - e);
            let y0 = rng.gen_range(0..=height - e);
            for y in y0..y0 + e {
                out[y * width + x0..y * width + x0 + e].fill(0.0);
            }
        }
    }
    if policy.gain != (1.0, 1.0) {
        let (lo, hi) = policy.gain;
        out.iter_mut().for_each(|v| *v *= rng.gen_range(lo..=hi));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewRole {
    /// Both views weak.
    Source,
    /// Strong query view, weak key view.
    Target,
}

/// `(query_view, key_view)` for one sample; `seed` fixes both views.
pub fn make_views(x: &[f64], layout: Layout, role: ViewRole, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let weak = AugmentPolicy::weak(layout);
    let query_policy = match role {
        ViewRole::Source => weak,
        ViewRole::Target => AugmentPolicy::strong(layout),
    };
    let mut rq = stream_rng(seed, Stream::Augment, &[0]);
    let mut rk = stream_rng(seed, Stream::Augment, &[1]);
    (augment(x, layout, &query_policy, &mut rq), augment(x, layout, &weak, &mut rk))
}

/// Query and key view matrices for rows `idx` of `data`. Sample `r` of the
/// batch is seeded from `seed_of(r)`; rows are independent so this runs
/// data-parallel.
pub fn augment_batch(
    data: &Dataset,
    idx: &[usize],
    layout: Layout,
    role: ViewRole,
    seed_of: impl Fn(usize) -> u64 + Sync + Send,
    exec: Exec,
) -> (Tensor, Tensor) {
    let views = map_indexed(idx.len(), exec, |r| {
        let x: Vec<f64> = data.samples[idx[r]].x.iter().map(|&v| v as f64).collect();
        make_views(&x, layout, role, seed_of(r))
    });
    let mut q = Vec::with_capacity(idx.len() * data.dim);
    let mut k = Vec::with_capacity(idx.len() * data.dim);
    for (a, b) in views {
        q.extend(a);
        k.extend(b);
    }
    (
        Tensor::matrix(idx.len(), data.dim, q).unwrap(),
        Tensor::matrix(idx.len(), data.dim, k).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const RASTER: Layout = Layout::Raster { width: 4, height: 4 };

    fn img() -> Vec<f64> {
        (0..16).map(|i| i as f64 / 16.0).collect()
    }

    fn flip_shift_candidates(x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for flip in [false, true] {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let mut m = vec![0.0; 16];
                    for y in 0..4i32 {
                        for xx in 0..4i32 {
                            let sx = if flip { 3 - xx } else { xx } - dx;
                            let sy = y - dy;
                            if (0..4).contains(&sx) && (0..4).contains(&sy) {
                                m[(y * 4 + xx) as usize] = x[(sy * 4 + sx) as usize];
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
        out
    }

    #[test]
    fn zero_noise_policy_is_a_flip_or_shift() {
        let policy = AugmentPolicy::weak(RASTER);
        let candidates = flip_shift_candidates(&img());
        for s in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let out = augment(&img(), RASTER, &policy, &mut rng);
            assert!(candidates.contains(&out));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img(), RASTER, &AugmentPolicy::IDENTITY, &mut rng), img());
    }

    #[test]
    fn strong_views_differ_and_are_deterministic() {
        let layout = Layout::Raster { width: 16, height: 16 };
        let x: Vec<f64> = (0..256).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let (q1, k1) = make_views(&x, layout, ViewRole::Target, 9);
        let (q2, k2) = make_views(&x, layout, ViewRole::Target, 9);
        assert_eq!((q1.clone(), k1.clone()), (q2, k2));
        assert_ne!(q1, k1);
        assert_eq!(q1.len(), 256);
    }

    #[test]
    fn source_views_are_both_weak() {
        let x = vec![0.5; 8];
        let (q, k) = make_views(&x, Layout::Flat, ViewRole::Source, 4);
        for v in q.iter().chain(&k) {
            assert!((v - 0.5).abs() < 0.2);
        }
        assert_ne!(q, k);
    }
}
