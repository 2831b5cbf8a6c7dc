//! 2D discrete Fourier transforms of arbitrary size.
//!
//! Power-of-two lengths run an iterative radix-2 Cooley-Tukey; everything
//! else goes through Bluestein's chirp-z algorithm, so fused output always
//! matches the input resolution exactly (no padding/cropping). Transforms
//! accumulate in f64 internally and expose f32 planes.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::{Error, Result, Tensor};

/// Complex spectrum of a real H×W plane, split into f32 real/imag planes.
#[derive(Clone, Debug)]
pub struct ComplexField {
    h: usize,
    w: usize,
    re: Vec<f32>,
    im: Vec<f32>,
}

impl ComplexField {
    pub fn new(h: usize, w: usize, re: Vec<f32>, im: Vec<f32>) -> Result<Self> {
        if re.len() != h * w || im.len() != h * w {
            return Err(Error::Dimension(format!(
                "complex field {}x{} needs {} elements per plane, got re={} im={}",
                h,
                w,
                h * w,
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexField { h, w, re, im })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn re(&self) -> &[f32] {
        &self.re
    }

    pub fn im(&self) -> &[f32] {
        &self.im
    }
}

/// Forward 2D DFT of a real plane, unnormalized:
/// `F[u,v] = sum_{h,w} x[h,w] * exp(-2*pi*i*(u*h/H + v*w/W))`.
pub fn fft2(plane: &Tensor) -> Result<ComplexField> {
    let (c, h, w) = plane.chw()?;
    if c != 1 {
        return Err(Error::Dimension(format!(
            "fft2 expects a single plane, got {} channels",
            c
        )));
    }
    let mut buf: Vec<Complex64> = plane
        .data()
        .iter()
        .map(|&v| Complex64::new(v as f64, 0.0))
        .collect();
    fft2_c64(&mut buf, h, w, false);
    let re = buf.iter().map(|z| z.re as f32).collect();
    let im = buf.iter().map(|z| z.im as f32).collect();
    ComplexField::new(h, w, re, im)
}

/// Inverse 2D DFT with 1/(H*W) normalization; returns the real part.
pub fn ifft2(field: &ComplexField) -> Tensor {
    let (h, w) = (field.h, field.w);
    let mut buf: Vec<Complex64> = field
        .re
        .iter()
        .zip(&field.im)
        .map(|(&re, &im)| Complex64::new(re as f64, im as f64))
        .collect();
    fft2_c64(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    let data = buf.iter().map(|z| (z.re * norm) as f32).collect();
    Tensor::new(vec![h, w], data).expect("ifft2 output shape")
}

/// Splits a spectrum into amplitude `sqrt(re^2+im^2)` and phase
/// `atan2(im, re)`; the zero bin maps to phase 0 (atan2(0,0) = 0).
pub fn amplitude_phase(field: &ComplexField) -> (Tensor, Tensor) {
    let shape = vec![field.h, field.w];
    let amp: Vec<f32> = field
        .re
        .iter()
        .zip(&field.im)
        .map(|(&re, &im)| (re * re + im * im).sqrt())
        .collect();
    let pha: Vec<f32> = field
        .re
        .iter()
        .zip(&field.im)
        .map(|(&re, &im)| im.atan2(re))
        .collect();
    (
        Tensor::new(shape.clone(), amp).expect("amp shape"),
        Tensor::new(shape, pha).expect("pha shape"),
    )
}

/// Rebuilds `amp * (cos(pha) + i*sin(pha))`, applies the normalized inverse
/// DFT, and returns the real part; the imaginary residue is discarded.
pub fn ifft2_from_polar(amp: &Tensor, pha: &Tensor) -> Result<Tensor> {
    if amp.shape() != pha.shape() {
        return Err(Error::Dimension(format!(
            "amp shape {:?} != pha shape {:?}",
            amp.shape(),
            pha.shape()
        )));
    }
    let (c, h, w) = amp.chw()?;
    if c != 1 {
        return Err(Error::Dimension(format!(
            "ifft2_from_polar expects a single plane, got {} channels",
            c
        )));
    }
    let mut buf: Vec<Complex64> = amp
        .data()
        .iter()
        .zip(pha.data())
        .map(|(&a, &p)| {
            let (a, p) = (a as f64, p as f64);
            Complex64::new(a * p.cos(), a * p.sin())
        })
        .collect();
    fft2_c64(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    let data = buf.iter().map(|z| (z.re * norm) as f32).collect();
    Tensor::new(vec![h, w], data)
}

/// In-place unnormalized 2D transform over a row-major H×W buffer.
pub(crate) fn fft2_c64(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(buf.len(), h * w);
    if h == 0 || w == 0 {
        return;
    }
    // Rows.
    let mut row = vec![Complex64::default(); w];
    for r in 0..h {
        row.copy_from_slice(&buf[r * w..(r + 1) * w]);
        fft_1d(&mut row, inverse);
        buf[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    // Columns.
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        fft_1d(&mut col, inverse);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
}

/// Unnormalized 1D DFT, any length.
pub(crate) fn fft_1d(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        bluestein(buf, inverse);
    }
}

/// Iterative radix-2 Cooley-Tukey, power-of-two length only.
fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w *= wlen;
            }
        }
        len <<= 1;
    }
}

/// Bluestein chirp-z transform: expresses an arbitrary-length DFT as a
/// circular convolution carried out with power-of-two FFTs. The chirp angle
/// uses k^2 mod 2n to keep arguments small.
fn bluestein(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };

    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let ang = sign * PI * ((k * k) % (2 * n)) as f64 / n as f64;
            Complex64::new(ang.cos(), ang.sin())
        })
        .collect();

    let mut a = vec![Complex64::default(); m];
    for k in 0..n {
        a[k] = buf[k] * chirp[k];
    }
    let mut b = vec![Complex64::default(); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        let v = chirp[k].conj();
        b[k] = v;
        b[m - k] = v;
    }

    radix2(&mut a, false);
    radix2(&mut b, false);
    for k in 0..m {
        a[k] *= b[k];
    }
    radix2(&mut a, true);
    let norm = 1.0 / m as f64;
    for k in 0..n {
        buf[k] = a[k] * norm * chirp[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::oracle;

    fn random_plane(h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| rng.gen::<f32>())
    }

    #[test]
    fn constant_plane_is_dc_only() {
        let c = 0.37f32;
        let plane = Tensor::filled(&[6, 9], c);
        let f = fft2(&plane).unwrap();
        assert!((f.re()[0] - c * 54.0).abs() < 1e-4);
        assert!(f.im()[0].abs() < 1e-4);
        for i in 1..f.re().len() {
            assert!(f.re()[i].abs() < 1e-4, "bin {} re {}", i, f.re()[i]);
            assert!(f.im()[i].abs() < 1e-4, "bin {} im {}", i, f.im()[i]);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut plane = Tensor::zeros(&[4, 5]);
        plane.data_mut()[0] = 1.0;
        let f = fft2(&plane).unwrap();
        for i in 0..f.re().len() {
            assert!((f.re()[i] - 1.0).abs() < 1e-5);
            assert!(f.im()[i].abs() < 1e-5);
        }
    }

    #[test]
    fn matches_naive_dft_on_non_power_of_two() {
        for (h, w, seed) in [(5, 7, 1u64), (31, 17, 2), (8, 8, 3), (12, 10, 4)] {
            let plane = random_plane(h, w, seed);
            let fast = fft2(&plane).unwrap();
            let (nre, nim) = oracle::naive_dft2(plane.data(), h, w);
            for i in 0..h * w {
                assert!(
                    (fast.re()[i] as f64 - nre[i]).abs() < 1e-4,
                    "{}x{} re bin {}: {} vs {}",
                    h,
                    w,
                    i,
                    fast.re()[i],
                    nre[i]
                );
                assert!((fast.im()[i] as f64 - nim[i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn roundtrip_recovers_plane() {
        for (h, w) in [(5, 7), (31, 17), (16, 16), (1, 9)] {
            let plane = random_plane(h, w, 7);
            let back = ifft2(&fft2(&plane).unwrap());
            for i in 0..h * w {
                assert!((back.data()[i] - plane.data()[i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn polar_roundtrip_recovers_plane() {
        let plane = random_plane(8, 8, 9);
        let (amp, pha) = amplitude_phase(&fft2(&plane).unwrap());
        let back = ifft2_from_polar(&amp, &pha).unwrap();
        for i in 0..64 {
            assert!((back.data()[i] - plane.data()[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn polar_of_zero_amp_is_zero_plane() {
        let amp = Tensor::zeros(&[5, 6]);
        let pha = random_plane(5, 6, 11);
        let out = ifft2_from_polar(&amp, &pha).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn amplitude_phase_345() {
        let field = ComplexField::new(1, 1, vec![3.0], vec![4.0]).unwrap();
        let (amp, pha) = amplitude_phase(&field);
        assert!((amp.data()[0] - 5.0).abs() < 1e-6);
        assert!((pha.data()[0] - 4.0f32.atan2(3.0)).abs() < 1e-6);
        let zero = ComplexField::new(1, 1, vec![0.0], vec![0.0]).unwrap();
        let (amp, pha) = amplitude_phase(&zero);
        assert_eq!(amp.data()[0], 0.0);
        assert_eq!(pha.data()[0], 0.0);
    }

    #[test]
    fn averaged_polar_fields_match_naive_inverse() {
        let a = random_plane(6, 5, 21);
        let b = random_plane(6, 5, 22);
        let (amp_a, pha_a) = amplitude_phase(&fft2(&a).unwrap());
        let (amp_b, pha_b) = amplitude_phase(&fft2(&b).unwrap());
        let amp = Tensor::from_fn(&[6, 5], |i| 0.5 * (amp_a.data()[i] + amp_b.data()[i]));
        let pha = Tensor::from_fn(&[6, 5], |i| 0.5 * (pha_a.data()[i] + pha_b.data()[i]));
        let fast = ifft2_from_polar(&amp, &pha).unwrap();

        let re: Vec<f64> = amp
            .data()
            .iter()
            .zip(pha.data())
            .map(|(&a, &p)| a as f64 * (p as f64).cos())
            .collect();
        let im: Vec<f64> = amp
            .data()
            .iter()
            .zip(pha.data())
            .map(|(&a, &p)| a as f64 * (p as f64).sin())
            .collect();
        let naive = oracle::naive_idft2_real(&re, &im, 6, 5);
        for i in 0..30 {
            assert!((fast.data()[i] as f64 - naive[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn linearity_property() {
        let x = random_plane(7, 6, 31);
        let y = random_plane(7, 6, 32);
        let (a, b) = (0.7f32, -1.3f32);
        let combo = Tensor::from_fn(&[7, 6], |i| a * x.data()[i] + b * y.data()[i]);
        let fc = fft2(&combo).unwrap();
        let fx = fft2(&x).unwrap();
        let fy = fft2(&y).unwrap();
        for i in 0..42 {
            assert!((fc.re()[i] - (a * fx.re()[i] + b * fy.re()[i])).abs() < 1e-4);
            assert!((fc.im()[i] - (a * fx.im()[i] + b * fy.im()[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn parseval_identity() {
        let x = random_plane(9, 11, 41);
        let f = fft2(&x).unwrap();
        let spatial: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let spectral: f64 = f
            .re()
            .iter()
            .zip(f.im())
            .map(|(&re, &im)| (re as f64).powi(2) + (im as f64).powi(2))
            .sum::<f64>()
            / 99.0;
        assert!(
            (spatial - spectral).abs() / spatial < 1e-3,
            "{} vs {}",
            spatial,
            spectral
        );
    }
}
