//! Independent reference implementations used to verify the fast paths.
//!
//! Everything here is deliberately naive — double loops, O(N^2) transforms,
//! f64 arithmetic — and shares no code with the implementations it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::Tensor;

/// O(N^2) forward DFT of a real plane: `F[u,v] = sum x[h,w] e^{-2pi i(uh/H+vw/W)}`.
pub fn naive_dft2(data: &[f32], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0f64; h * w];
    let mut im = vec![0.0f64; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                    let val = data[y * w + x] as f64;
                    acc_re += val * ang.cos();
                    acc_im += val * ang.sin();
                }
            }
            re[u * w + v] = acc_re;
            im[u * w + v] = acc_im;
        }
    }
    (re, im)
}

/// O(N^2) inverse DFT with 1/(H*W) normalization; returns the real part.
pub fn naive_idft2_real(re: &[f64], im: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    let norm = 1.0 / (h * w) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let ang = 2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                    acc += re[u * w + v] * ang.cos() - im[u * w + v] * ang.sin();
                }
            }
            out[y * w + x] = acc * norm;
        }
    }
    out
}

/// Six-nested-loop reference convolution (zero padding).
pub fn conv2d_reference(x: &Tensor, w: &Tensor, b: &Tensor, padding: usize) -> Tensor {
    let (ic, h, iw) = x.chw().expect("oracle conv input");
    let ws = w.shape();
    let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = h + 2 * padding - kh + 1;
    let ow = iw + 2 * padding - kw + 1;
    let mut out = vec![0.0f32; oc * oh * ow];
    for o in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b.data()[o] as f64;
                for c in 0..ic {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let sy = i + ky;
                            let sx = j + kx;
                            if sy < padding || sx < padding {
                                continue;
                            }
                            let (sy, sx) = (sy - padding, sx - padding);
                            if sy >= h || sx >= iw {
                                continue;
                            }
                            let xv = x.data()[(c * h + sy) * iw + sx] as f64;
                            let wv = w.data()[((o * ic + c) * kh + ky) * kw + kx] as f64;
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc as f32;
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out).expect("oracle conv shape")
}

/// Direct application of the standard 3x3 Sobel kernels with replicate
/// padding (same convention as the implementation's contract).
pub fn sobel_reference(x: &Tensor) -> (Tensor, Tensor) {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (c, h, w) = x.chw().expect("oracle sobel input");
    let apply = |k: &[[f64; 3]; 3]| -> Tensor {
        let mut out = vec![0.0f32; c * h * w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0f64;
                    for (dy, row) in k.iter().enumerate() {
                        for (dx, &coef) in row.iter().enumerate() {
                            let sy = (i as isize + dy as isize - 1).clamp(0, h as isize - 1);
                            let sx = (j as isize + dx as isize - 1).clamp(0, w as isize - 1);
                            acc += coef * x.data()[(ch * h + sy as usize) * w + sx as usize] as f64;
                        }
                    }
                    out[(ch * h + i) * w + j] = acc as f32;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out).expect("oracle sobel shape")
    };
    (apply(&kx), apply(&ky))
}

/// Central-difference check of an autodiff gradient on sampled entries.
///
/// Returns the worst mismatch `|ad - fd| / max(1e-3, |ad|, |fd|)`; the floor
/// keeps near-zero gradients from inflating the ratio past the f32 noise of
/// the loss evaluation.
pub fn finite_diff_worst(
    eval: &dyn Fn(&Tensor) -> f32,
    at: &Tensor,
    autodiff_grad: &[f32],
    samples: usize,
    step: f32,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = at.len();
    let mut worst = 0.0f64;
    for _ in 0..samples.min(n) {
        let idx = rng.gen_range(0..n);
        let mut plus = at.clone();
        plus.data_mut()[idx] += step;
        let mut minus = at.clone();
        minus.data_mut()[idx] -= step;
        let fd = (eval(&plus) as f64 - eval(&minus) as f64) / (2.0 * step as f64);
        let ad = autodiff_grad[idx] as f64;
        let rel = (ad - fd).abs() / (1e-3f64).max(ad.abs()).max(fd.abs());
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Central-difference check against the `k` largest-magnitude autodiff
/// gradient entries of a tensor. Checking the dominant entries keeps the
/// comparison above the f32 noise floor of the loss evaluation while still
/// catching any sign, scale, or wiring error in the backward pass.
pub fn finite_diff_topk(
    eval: &dyn Fn(&Tensor) -> f32,
    at: &Tensor,
    autodiff_grad: &[f32],
    k: usize,
    step: f32,
) -> f64 {
    let mut order: Vec<usize> = (0..autodiff_grad.len()).collect();
    order.sort_by(|&a, &b| {
        autodiff_grad[b]
            .abs()
            .partial_cmp(&autodiff_grad[a].abs())
            .unwrap()
    });
    let mut worst = 0.0f64;
    for &idx in order.iter().take(k) {
        let mut plus = at.clone();
        plus.data_mut()[idx] += step;
        let mut minus = at.clone();
        minus.data_mut()[idx] -= step;
        let fd = (eval(&plus) as f64 - eval(&minus) as f64) / (2.0 * step as f64);
        let ad = autodiff_grad[idx] as f64;
        let rel = (ad - fd).abs() / (1e-3f64).max(ad.abs()).max(fd.abs());
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// valid positions only, computed windowwise in f64.
pub fn ssim_reference(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let win = 11usize;
    assert!(h >= win && w >= win, "image smaller than SSIM window");
    let sigma = 1.5f64;
    let mut kernel = vec![0.0f64; win * win];
    let mid = (win / 2) as f64;
    let mut total = 0.0;
    for i in 0..win {
        for j in 0..win {
            let d2 = (i as f64 - mid).powi(2) + (j as f64 - mid).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            kernel[i * win + j] = v;
            total += v;
        }
    }
    for k in kernel.iter_mut() {
        *k /= total;
    }

    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in 0..=(h - win) {
        for x in 0..=(w - win) {
            let (mut ma, mut mb) = (0.0f64, 0.0f64);
            for i in 0..win {
                for j in 0..win {
                    let k = kernel[i * win + j];
                    ma += k * a[(y + i) * w + x + j] as f64;
                    mb += k * b[(y + i) * w + x + j] as f64;
                }
            }
            let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..win {
                for j in 0..win {
                    let k = kernel[i * win + j];
                    let da = a[(y + i) * w + x + j] as f64 - ma;
                    let db = b[(y + i) * w + x + j] as f64 - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
            count += 1;
        }
    }
    acc / count as f64
}

/// Pearson correlation over the pixels where `mask` is 1, in f64.
/// Returns 0 when the region is empty or has zero variance.
pub fn masked_pearson(x: &[f32], y: &[f32], mask: &[f32]) -> f64 {
    let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] > 0.5).collect();
    if idx.is_empty() {
        return 0.0;
    }
    let n = idx.len() as f64;
    let mx = idx.iter().map(|&i| x[i] as f64).sum::<f64>() / n;
    let my = idx.iter().map(|&i| y[i] as f64).sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for &i in &idx {
        let dx = x[i] as f64 - mx;
        let dy = y[i] as f64 - my;
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Exhaustive Otsu: scans all 256 thresholds for the maximum between-class
/// variance over an 8-bit histogram.
pub fn otsu_exhaustive(values: &[f32]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        hist[q.min(255)] += 1;
    }
    let total = values.len() as f64;
    let mut best_t = 0u8;
    let mut best_var = -1.0f64;
    for t in 0..256usize {
        let w0: u64 = hist[..=t].iter().sum();
        let w1: u64 = hist[t + 1..].iter().sum();
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0: f64 = hist[..=t]
            .iter()
            .enumerate()
            .map(|(v, &c)| v as f64 * c as f64)
            .sum::<f64>()
            / w0 as f64;
        let m1: f64 = hist[t + 1..]
            .iter()
            .enumerate()
            .map(|(v, &c)| (v + t + 1) as f64 * c as f64)
            .sum::<f64>()
            / w1 as f64;
        let var = (w0 as f64 / total) * (w1 as f64 / total) * (m0 - m1).powi(2);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}
