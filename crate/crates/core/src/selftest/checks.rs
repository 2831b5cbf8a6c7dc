//! The actual self-test checks: fast oracle comparisons suitable for a
//! post-install smoke run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle;
use crate::graph::Graph;
use crate::{fft, metrics, Tensor};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Test-fixture hooks that deliberately corrupt one implementation path so
/// the oracle comparison must notice. All `None` in production.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Replaces the X-direction Sobel kernel fed to the implementation side
    /// of the gradient-extraction check.
    pub sobel_kx: Option<[f32; 9]>,
}

/// Runs every suite and returns one result per check.
pub fn run(overrides: &Overrides) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(fft_roundtrip_check());
    out.push(fft_oracle_check());
    out.push(conv_oracle_check());
    out.push(sobel_oracle_check(overrides));
    out.push(gradient_fd_check());
    out.push(metric_oracle_check());
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen::<f32>())
}

fn fft_roundtrip_check() -> CheckResult {
    let mut r = rng(101);
    let mut worst = 0.0f32;
    for (h, w) in [(5, 7), (31, 17), (16, 16), (12, 20)] {
        let x = random_tensor(&[h, w], &mut r);
        let back = fft::ifft2(&fft::fft2(&x).unwrap());
        for i in 0..h * w {
            worst = worst.max((back.data()[i] - x.data()[i]).abs());
        }
    }
    CheckResult::new(
        "fft-roundtrip",
        worst < 1e-4,
        format!("max abs roundtrip error {:.3e} (limit 1e-4)", worst),
    )
}

fn fft_oracle_check() -> CheckResult {
    let mut r = rng(103);
    let mut worst = 0.0f64;
    for (h, w) in [(5, 7), (9, 8), (13, 11)] {
        let x = random_tensor(&[h, w], &mut r);
        let fast = fft::fft2(&x).unwrap();
        let (ore, oim) = oracle::naive_dft2(x.data(), h, w);
        for i in 0..h * w {
            worst = worst.max((fast.re()[i] as f64 - ore[i]).abs());
            worst = worst.max((fast.im()[i] as f64 - oim[i]).abs());
        }
    }
    CheckResult::new(
        "fft-vs-naive-dft",
        worst < 1e-4,
        format!("max abs deviation {:.3e} (limit 1e-4)", worst),
    )
}

fn conv_oracle_check() -> CheckResult {
    let mut r = rng(107);
    let x = random_tensor(&[2, 4, 4], &mut r);
    let w = random_tensor(&[3, 2, 3, 3], &mut r);
    let b = random_tensor(&[3], &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (
        g.constant(x.clone()),
        g.constant(w.clone()),
        g.constant(b.clone()),
    );
    let y = g.conv2d(xv, wv, bv, 1).unwrap();
    let reference = oracle::conv2d_reference(&x, &w, &b, 1);
    let worst = g
        .value(y)
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, e)| (a - e).abs())
        .fold(0.0f32, f32::max);
    CheckResult::new(
        "conv-vs-loop-oracle",
        worst < 1e-6,
        format!("max abs deviation {:.3e} (limit 1e-6)", worst),
    )
}

fn sobel_oracle_check(overrides: &Overrides) -> CheckResult {
    let mut r = rng(109);
    let x = random_tensor(&[1, 6, 6], &mut r);
    let (impl_gx, impl_gy) = match overrides.sobel_kx {
        None => {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (gx, gy) = g.sobel_xy(xv).unwrap();
            (g.value(gx).clone(), g.value(gy).clone())
        }
        Some(kx) => {
            // Mutation fixture: replicate-padded correlation with a
            // corrupted X kernel stands in for the implementation path.
            let (_, h, w) = x.chw().unwrap();
            let mut gx = Tensor::zeros(&[1, h, w]);
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0f64;
                    for (k, &coef) in kx.iter().enumerate() {
                        let si = (i as isize + (k / 3) as isize - 1).clamp(0, h as isize - 1);
                        let sj = (j as isize + (k % 3) as isize - 1).clamp(0, w as isize - 1);
                        acc += coef as f64 * x.data()[si as usize * w + sj as usize] as f64;
                    }
                    gx.data_mut()[i * w + j] = acc as f32;
                }
            }
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (_, gy) = g.sobel_xy(xv).unwrap();
            (gx, g.value(gy).clone())
        }
    };
    let (ox, oy) = oracle::sobel_reference(&x);
    let mut worst = 0.0f32;
    for i in 0..36 {
        worst = worst.max((impl_gx.data()[i] - ox.data()[i]).abs());
        worst = worst.max((impl_gy.data()[i] - oy.data()[i]).abs());
    }
    CheckResult::new(
        "sobel-vs-loop-oracle",
        worst < 1e-6,
        format!("max abs deviation {:.3e} (limit 1e-6)", worst),
    )
}

fn gradient_fd_check() -> CheckResult {
    let mut r = rng(113);
    let x0 = Tensor::from_fn(&[1, 8, 8], |_| r.gen_range(0.05..0.95f32));
    let w0 = Tensor::from_fn(&[2, 1, 3, 3], |_| r.gen_range(-0.5..0.5f32));
    let b0 = Tensor::from_fn(&[2], |_| r.gen_range(-0.1..0.1f32));
    let eval = |w: &Tensor| -> f32 {
        let mut g = Graph::new();
        let xv = g.constant(x0.clone());
        let wv = g.leaf(w.clone(), true);
        let bv = g.constant(b0.clone());
        let y = g.conv2d(xv, wv, bv, 1).unwrap();
        let a = g.sigmoid(y);
        let ch = g_channel(&mut g, a);
        let (re, im) = g.fft2(ch).unwrap();
        let amp = g.complex_abs(re, im).unwrap();
        let pha = g.complex_angle(re, im).unwrap();
        let back = g.polar_ifft2(amp, pha).unwrap();
        let sq = g.mul(back, back).unwrap();
        let loss = g.mean(sq);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let xv = g.constant(x0.clone());
    let wv = g.leaf(w0.clone(), true);
    let bv = g.constant(b0.clone());
    let y = g.conv2d(xv, wv, bv, 1).unwrap();
    let a = g.sigmoid(y);
    let ch = g_channel(&mut g, a);
    let (re, im) = g.fft2(ch).unwrap();
    let amp = g.complex_abs(re, im).unwrap();
    let pha = g.complex_angle(re, im).unwrap();
    let back = g.polar_ifft2(amp, pha).unwrap();
    let sq = g.mul(back, back).unwrap();
    let loss = g.mean(sq);
    g.backward(loss).unwrap();
    let ad = g.grad(wv).unwrap();
    let worst = oracle::finite_diff_worst(&eval, &w0, ad.data(), 10, 1e-3, &mut r);
    CheckResult::new(
        "gradient-finite-difference",
        worst < 1e-2,
        format!("worst sampled mismatch {:.3e} (limit 1e-2)", worst),
    )
}

/// First channel of a multi-channel graph value, as a graph op.
fn g_channel(g: &mut Graph, x: crate::graph::VarId) -> crate::graph::VarId {
    g.channel_mean(x).expect("channel reduce")
}

fn metric_oracle_check() -> CheckResult {
    let mut failures = Vec::new();
    let constant = Tensor::filled(&[16, 16], 0.5);
    if metrics::metric_en(&constant).abs() > 1e-9 {
        failures.push("EN(constant) != 0");
    }
    let two_point = Tensor::from_fn(&[16, 16], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
    if (metrics::metric_en(&two_point) - 1.0).abs() > 1e-9 {
        failures.push("EN(two-point) != 1");
    }
    if (metrics::metric_sd(&two_point) - 127.5).abs() > 1e-9 {
        failures.push("SD(two-point) != 127.5");
    }
    let stripes = Tensor::from_fn(&[16, 16], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
    if (metrics::metric_sf(&stripes) - 255.0).abs() > 1e-6 {
        failures.push("SF(stripes) != 255");
    }
    let mut r = rng(127);
    let img = random_tensor(&[32, 32], &mut r);
    let mi_self = metrics::metric_mi(&img, &img, &img);
    let en = metrics::metric_en(&img);
    if (mi_self - 2.0 * en).abs() > 1e-6 {
        failures.push("MI(x,x,x) != 2*EN(x)");
    }
    let vif_self = metrics::metric_vif(&img, &img, &img);
    if (vif_self - 2.0).abs() > 1e-6 {
        failures.push("VIF self-case != 2.0");
    }
    CheckResult::new(
        "metric-analytic-oracles",
        failures.is_empty(),
        if failures.is_empty() {
            "EN/SD/SF/MI/VIF analytic cases hold".to_string()
        } else {
            failures.join("; ")
        },
    )
}
