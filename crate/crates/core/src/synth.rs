//! Synthetic IR/VIS pair generator: hot elliptical targets on a cool
//! background for the IR channel, gratings and rectangles for the visible
//! texture, plus the exact binary target mask. Deterministic per
//! (seed, index), so train/eval runs need no external data.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{recombine_color, save_png, ImagePair};
use crate::{Result, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 96,
            height: 96,
            pairs: 8,
            seed: 0,
        }
    }
}

/// A generated pair together with its ground-truth saliency mask.
pub struct SynthPair {
    pub pair: ImagePair,
    /// `[H,W]` binary plane marking the hot targets.
    pub mask: Tensor,
}

struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    rot: f32,
    peak: f32,
}

impl Blob {
    /// Normalized elliptical distance of a pixel from the blob center.
    fn dist(&self, x: f32, y: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.rot.cos(), self.rot.sin());
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        (u * u + v * v).sqrt()
    }
}

fn smoothstep(lo: f32, hi: f32, x: f32) -> f32 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Builds pair `index` of the spec deterministically.
pub fn generate_pair(spec: &SynthSpec, index: usize) -> Result<SynthPair> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (h, w) = (spec.height, spec.width);
    let min_dim = h.min(w) as f32;

    let blobs: Vec<Blob> = (0..rng.gen_range(1..=3usize))
        .map(|_| Blob {
            cx: rng.gen_range(0.2..0.8) * w as f32,
            cy: rng.gen_range(0.2..0.8) * h as f32,
            rx: rng.gen_range(0.08..0.18) * min_dim,
            ry: rng.gen_range(0.08..0.18) * min_dim,
            rot: rng.gen_range(0.0..PI),
            peak: rng.gen_range(0.78..0.97),
        })
        .collect();

    // IR: cool smooth background plus the hot targets.
    let bg_angle = rng.gen_range(0.0..PI);
    let bg_level = rng.gen_range(0.08..0.22f32);
    let bg_slope = rng.gen_range(0.04..0.12f32);
    let mut ir = vec![0.0f32; h * w];
    let mut mask = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let fx = x as f32 / w as f32;
            let fy = y as f32 / h as f32;
            let sweep = fx * bg_angle.cos() + fy * bg_angle.sin();
            let mut v = bg_level + bg_slope * sweep;
            for blob in &blobs {
                let d = blob.dist(x as f32, y as f32);
                let profile = blob.peak * (1.0 - smoothstep(0.72, 1.0, d));
                if profile > v {
                    v = profile;
                }
                if d < 0.86 {
                    mask[y * w + x] = 1.0;
                }
            }
            ir[y * w + x] = v.clamp(0.0, 1.0);
        }
    }

    // VIS luma: gratings, rectangles, and a faint target silhouette.
    let gratings: Vec<(f32, f32, f32, f32)> = (0..rng.gen_range(2..=4usize))
        .map(|_| {
            (
                rng.gen_range(0.0..PI),               // orientation
                rng.gen_range(5.0..18.0f32),          // cycles across the image
                rng.gen_range(0.0..2.0 * PI),         // phase
                rng.gen_range(0.07..0.14f32),         // amplitude
            )
        })
        .collect();
    struct RectFeature {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        delta: f32,
    }
    let rects: Vec<RectFeature> = (0..rng.gen_range(2..=4usize))
        .map(|_| {
            let rw = rng.gen_range(w / 8..w / 3);
            let rh = rng.gen_range(h / 8..h / 3);
            let x0 = rng.gen_range(0..w - rw);
            let y0 = rng.gen_range(0..h - rh);
            RectFeature {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
                delta: rng.gen_range(0.1..0.22) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            }
        })
        .collect();
    let vis_base = rng.gen_range(0.4..0.6f32);

    let mut vis_y = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = vis_base;
            for &(theta, cycles, phase, amp) in &gratings {
                let proj =
                    (x as f32 / w as f32) * theta.cos() + (y as f32 / h as f32) * theta.sin();
                v += amp * (2.0 * PI * cycles * proj + phase).sin();
            }
            for r in &rects {
                if x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1 {
                    v += r.delta;
                }
            }
            // Thermal targets are barely visible in the visible band.
            if mask[y * w + x] > 0.5 {
                v *= 0.82;
            }
            vis_y[y * w + x] = v.clamp(0.02, 0.98);
        }
    }

    // Mild smooth chroma so the visible image is actually colored.
    let tint_angle = rng.gen_range(0.0..PI);
    let (cb_amp, cr_amp) = (rng.gen_range(0.02..0.07f32), rng.gen_range(0.02..0.07f32));
    let mut cb = vec![0.0f32; h * w];
    let mut cr = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let sweep = (x as f32 / w as f32) * tint_angle.cos()
                + (y as f32 / h as f32) * tint_angle.sin();
            cb[y * w + x] = 0.5 + cb_amp * (2.0 * PI * sweep).sin();
            cr[y * w + x] = 0.5 + cr_amp * (2.0 * PI * sweep).cos();
        }
    }

    let vis_rgb = recombine_color(
        &Tensor::new(vec![1, h, w], vis_y)?,
        &Tensor::new(vec![h, w], cb)?,
        &Tensor::new(vec![h, w], cr)?,
    )?;
    let pair = ImagePair::from_tensors(
        Tensor::new(vec![1, h, w], ir)?,
        vis_rgb,
        format!("synth_{:03}", index),
    )?;
    Ok(SynthPair {
        pair,
        mask: Tensor::new(vec![h, w], mask)?,
    })
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthPair>> {
    (0..spec.pairs).map(|i| generate_pair(spec, i)).collect()
}

/// Writes `<root>/ir`, `<root>/vis`, and `<root>/mask` PNG trees.
pub fn write_dataset(root: &Path, spec: &SynthSpec) -> Result<()> {
    for sub in ["ir", "vis", "mask"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| crate::Error::io(root.join(sub), e))?;
    }
    for item in generate(spec)? {
        let id = &item.pair.id;
        save_png(&root.join("ir").join(format!("{id}.png")), &item.pair.ir)?;
        save_png(&root.join("vis").join(format!("{id}.png")), &item.pair.vis_rgb)?;
        let (h, w) = (item.pair.height(), item.pair.width());
        let mask_img = item.mask.clone().reshaped(vec![1, h, w])?;
        save_png(&root.join("mask").join(format!("{id}.png")), &mask_img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        let a = generate_pair(&spec, 3).unwrap();
        let b = generate_pair(&spec, 3).unwrap();
        assert_eq!(a.pair.ir.data(), b.pair.ir.data());
        assert_eq!(a.pair.vis_rgb.data(), b.pair.vis_rgb.data());
        assert_eq!(a.mask.data(), b.mask.data());
    }

    #[test]
    fn mask_marks_hot_region() {
        let spec = SynthSpec::default();
        for idx in 0..4 {
            let item = generate_pair(&spec, idx).unwrap();
            let inside = item.mask.data().iter().filter(|&&v| v > 0.5).count();
            assert!(inside > 0, "pair {} has an empty mask", idx);
            assert!(inside < item.mask.len(), "pair {} mask covers everything", idx);
            // Mean IR inside the mask must exceed the outside mean.
            let (mut hot, mut cold, mut nh, mut nc) = (0.0f64, 0.0f64, 0usize, 0usize);
            for (i, &m) in item.mask.data().iter().enumerate() {
                if m > 0.5 {
                    hot += item.pair.ir.data()[i] as f64;
                    nh += 1;
                } else {
                    cold += item.pair.ir.data()[i] as f64;
                    nc += 1;
                }
            }
            assert!(hot / nh as f64 > cold / nc as f64 + 0.3);
        }
    }

    #[test]
    fn written_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            pairs: 2,
            width: 48,
            height: 40,
            seed: 7,
        };
        write_dataset(dir.path(), &spec).unwrap();
        let index =
            crate::imaging::dataset_index(&dir.path().join("ir"), &dir.path().join("vis"), Some(&dir.path().join("mask")))
                .unwrap();
        assert_eq!(index.pairs.len(), 2);
        assert!(index.pairs.iter().all(|p| p.mask.is_some()));
        let pair = crate::imaging::load_pair(&index.pairs[0].ir, &index.pairs[0].vis).unwrap();
        assert_eq!(pair.height(), 40);
        assert_eq!(pair.width(), 48);
        let original = generate_pair(&spec, 0).unwrap();
        for i in 0..pair.ir.len() {
            assert!((pair.ir.data()[i] - original.pair.ir.data()[i]).abs() < 0.5 / 255.0);
        }
    }
}
