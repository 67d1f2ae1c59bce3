//! Synthetic training pairs: procedural textures warped by random bounded
//! homographies, with exact ground-truth correspondences.

use crate::error::{Error, Result};
use crate::image::{Image, ImagePair};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 3x3 projective map between normalized [0,1]^2 image frames, row-major.
#[derive(Debug, Clone, Copy)]
pub struct Homography {
    pub m: [f64; 9],
}

impl Homography {
    pub fn identity() -> Homography {
        Homography { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] }
    }

    pub fn translation(dx: f64, dy: f64) -> Homography {
        Homography { m: [1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0] }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let m = &self.m;
        let w = m[6] * p.0 + m[7] * p.1 + m[8];
        if w.abs() < 1e-12 {
            return (f64::INFINITY, f64::INFINITY);
        }
        (
            (m[0] * p.0 + m[1] * p.1 + m[2]) / w,
            (m[3] * p.0 + m[4] * p.1 + m[5]) / w,
        )
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let d = self.det();
        if d.abs() < 1e-8 {
            return Err(Error::Degenerate(format!("homography det {} too small", d)));
        }
        let m = &self.m;
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        let mut out = [0.0; 9];
        for i in 0..9 {
            out[i] = adj[i] / d;
        }
        Ok(Homography { m: out })
    }

    /// Direct linear transform from four point correspondences.
    pub fn from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Homography> {
        // Solve the 8x8 system for h with h[8] = 1.
        let mut a = [[0.0f64; 9]; 8];
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst.iter()).enumerate() {
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        // Gaussian elimination with partial pivoting on the 8x8 left block.
        for col in 0..8 {
            let mut pivot = col;
            for row in col + 1..8 {
                if a[row][col].abs() > a[pivot][col].abs() {
                    pivot = row;
                }
            }
            if a[pivot][col].abs() < 1e-12 {
                return Err(Error::Degenerate("DLT system is singular".to_string()));
            }
            a.swap(col, pivot);
            let inv = 1.0 / a[col][col];
            for row in 0..8 {
                if row == col {
                    continue;
                }
                let f = a[row][col] * inv;
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        let mut m = [0.0f64; 9];
        for i in 0..8 {
            m[i] = a[i][8] / a[i][i];
        }
        m[8] = 1.0;
        let h = Homography { m };
        if h.det().abs() < 1e-8 {
            return Err(Error::Degenerate("homography not invertible".to_string()));
        }
        Ok(h)
    }

    /// Random bounded homography: unit-square corners perturbed by at most
    /// `magnitude` per axis. Degenerate draws are resampled.
    pub fn random(rng: &mut ChaCha8Rng, magnitude: f64) -> Result<Homography> {
        let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        for _ in 0..32 {
            let mut dst = corners;
            for d in dst.iter_mut() {
                d.0 += rng.gen_range(-magnitude..=magnitude);
                d.1 += rng.gen_range(-magnitude..=magnitude);
            }
            if let Ok(h) = Homography::from_points(&corners, &dst) {
                if h.inverse().is_ok() {
                    return Ok(h);
                }
            }
        }
        Err(Error::Degenerate("could not sample an invertible homography".to_string()))
    }
}

/// Multi-octave value noise, 3 channels, values in [0,1].
pub fn noise_texture(seed: u64, size: usize, octaves: usize) -> Image {
    let mut img = Image::new(size, size);
    let mut amp_total = 0.0;
    for o in 0..octaves {
        let grid = (1usize << (o + 1)) + 1;
        let amp = 0.5f64.powi(o as i32);
        amp_total += amp;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(o as u64 + 1)));
        let nodes: Vec<f64> = (0..3 * grid * grid).map(|_| rng.gen::<f64>()).collect();
        for c in 0..3 {
            let plane = &nodes[c * grid * grid..(c + 1) * grid * grid];
            for y in 0..size {
                let fy = y as f64 / (size - 1) as f64 * (grid - 1) as f64;
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(grid - 1);
                let ty = fy - y0 as f64;
                // smoothstep keeps octave seams soft
                let ty = ty * ty * (3.0 - 2.0 * ty);
                for x in 0..size {
                    let fx = x as f64 / (size - 1) as f64 * (grid - 1) as f64;
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(grid - 1);
                    let tx = fx - x0 as f64;
                    let tx = tx * tx * (3.0 - 2.0 * tx);
                    let v = (1.0 - ty) * ((1.0 - tx) * plane[y0 * grid + x0] + tx * plane[y0 * grid + x1])
                        + ty * ((1.0 - tx) * plane[y1 * grid + x0] + tx * plane[y1 * grid + x1]);
                    let idx = (c * size + y) * size + x;
                    img.data[idx] += amp * v;
                }
            }
        }
    }
    for v in img.data.iter_mut() {
        *v /= amp_total;
    }
    img
}

/// Render B as A warped by `h` (A-frame -> B-frame): each B pixel samples
/// A at the inverse-mapped position; pixels with no preimage stay black.
pub fn warp_image(a: &Image, h: &Homography) -> Result<Image> {
    let h_inv = h.inverse()?;
    let (w, hgt) = (a.width, a.height);
    let mut b = Image::new(w, hgt);
    for y in 0..hgt {
        for x in 0..w {
            let p = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / hgt as f64);
            let q = h_inv.apply(p);
            if q.0 >= 0.0 && q.0 <= 1.0 && q.1 >= 0.0 && q.1 <= 1.0 {
                let px = q.0 * w as f64 - 0.5;
                let py = q.1 * hgt as f64 - 0.5;
                for c in 0..3 {
                    b.set(c, y, x, a.sample(c, px, py));
                }
            }
        }
    }
    Ok(b)
}

/// A texture pair related by a known homography.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub pair: ImagePair,
    pub homography: Homography,
}

/// One sampled query: position in A, its exact match in B when it exists.
#[derive(Debug, Clone, Copy)]
pub struct QuerySample {
    pub query: (f64, f64),
    pub gt: (f64, f64),
    /// True iff the ground-truth match lands inside image B.
    pub valid: bool,
}

impl SyntheticPair {
    /// Build a pair from a seeded texture and a random bounded warp.
    pub fn generate(seed: u64, size: usize, octaves: usize, magnitude: f64) -> Result<SyntheticPair> {
        if size % 32 != 0 {
            return Err(Error::Config(format!("size {} not divisible by 32", size)));
        }
        let tex = noise_texture(seed, size, octaves);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x5851_f42d_4c95_7f2d).wrapping_add(1));
        let h = Homography::random(&mut rng, magnitude)?;
        let warped = warp_image(&tex, &h)?;
        Ok(SyntheticPair { pair: ImagePair::from_images(tex, warped)?, homography: h })
    }

    pub fn ground_truth(&self, q: (f64, f64)) -> QuerySample {
        let gt = self.homography.apply(q);
        let valid = gt.0 >= 0.0 && gt.0 <= 1.0 && gt.1 >= 0.0 && gt.1 <= 1.0;
        QuerySample { query: q, gt, valid }
    }

    /// Sample `n` queries; roughly `invalid_fraction` of them map outside
    /// image B (when the warp pushes any part of A out of view).
    pub fn sample_queries(&self, rng: &mut ChaCha8Rng, n: usize, invalid_fraction: f64) -> Vec<QuerySample> {
        let want_invalid = (n as f64 * invalid_fraction).round() as usize;
        let mut valid = Vec::new();
        let mut invalid = Vec::new();
        let mut guard = 0;
        while valid.len() + invalid.len().min(want_invalid) < n && guard < n * 200 {
            guard += 1;
            let q = (rng.gen::<f64>(), rng.gen::<f64>());
            let s = self.ground_truth(q);
            if s.valid {
                if valid.len() < n {
                    valid.push(s);
                }
            } else if invalid.len() < want_invalid {
                invalid.push(s);
            }
        }
        let take_invalid = invalid.len().min(want_invalid);
        let mut out = Vec::with_capacity(n);
        out.extend(invalid.into_iter().take(take_invalid));
        out.extend(valid.into_iter().take(n - take_invalid));
        // Interleave deterministically so batches are not sorted by validity.
        let mut order: Vec<usize> = (0..out.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order.into_iter().map(|i| out[i]).collect()
    }
}
