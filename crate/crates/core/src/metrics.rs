//! Fusion-quality metrics over (ir, vis, fused) triples.
//!
//! All six metrics are computed in f64 on the 8-bit intensity scale
//! (values x 255), matching the conventions the fusion literature reports
//! against. EN, SD, and SF depend on the fused image alone; MI, VIF, and
//! Qabf sum one term per source image.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result, Tensor};

/// Per-image metric row.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub id: String,
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub vif: f64,
    pub qabf: f64,
}

/// Per-image rows plus their arithmetic means.
#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub label: String,
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Mean row over all images (zeros when empty).
    pub fn means(&self) -> MetricRow {
        let n = self.rows.len().max(1) as f64;
        let mut mean = MetricRow {
            id: "MEAN".to_string(),
            en: 0.0,
            sd: 0.0,
            sf: 0.0,
            mi: 0.0,
            vif: 0.0,
            qabf: 0.0,
        };
        for r in &self.rows {
            mean.en += r.en;
            mean.sd += r.sd;
            mean.sf += r.sf;
            mean.mi += r.mi;
            mean.vif += r.vif;
            mean.qabf += r.qabf;
        }
        mean.en /= n;
        mean.sd /= n;
        mean.sf /= n;
        mean.mi /= n;
        mean.vif /= n;
        mean.qabf /= n;
        mean
    }

    /// Writes `id,en,sd,sf,mi,vif,qabf` rows plus a final MEAN row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fn emit(file: &mut std::fs::File, row: &MetricRow) -> std::io::Result<()> {
            writeln!(
                file,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                row.id, row.en, row.sd, row.sf, row.mi, row.vif, row.qabf
            )
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "id,en,sd,sf,mi,vif,qabf").map_err(|e| Error::io(path, e))?;
        for row in &self.rows {
            emit(&mut file, row).map_err(|e| Error::io(path, e))?;
        }
        emit(&mut file, &self.means()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Computes all six metrics for one fused image against its sources.
pub fn metric_row(id: &str, fused: &Tensor, ir: &Tensor, vis: &Tensor) -> MetricRow {
    MetricRow {
        id: id.to_string(),
        en: metric_en(fused),
        sd: metric_sd(fused),
        sf: metric_sf(fused),
        mi: metric_mi(fused, ir, vis),
        vif: metric_vif(fused, ir, vis),
        qabf: metric_qabf(fused, ir, vis),
    }
}

fn quantize(img: &Tensor) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn histogram256(q: &[u8]) -> [f64; 256] {
    let mut hist = [0.0f64; 256];
    for &v in q {
        hist[v as usize] += 1.0;
    }
    hist
}

/// Shannon entropy in bits over the 256-bin intensity histogram.
pub fn metric_en(img: &Tensor) -> f64 {
    let q = quantize(img);
    let hist = histogram256(&q);
    let n = q.len() as f64;
    let mut en = 0.0;
    for &count in &hist {
        if count > 0.0 {
            let p = count / n;
            en -= p * p.log2();
        }
    }
    en
}

/// Population standard deviation on the 8-bit scale.
pub fn metric_sd(img: &Tensor) -> f64 {
    let n = img.len() as f64;
    let mean = img.data().iter().map(|&v| v as f64 * 255.0).sum::<f64>() / n;
    let var = img
        .data()
        .iter()
        .map(|&v| {
            let d = v as f64 * 255.0 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Spatial frequency `sqrt(RF^2 + CF^2)` from first differences along rows
/// and columns, 8-bit scale.
pub fn metric_sf(img: &Tensor) -> f64 {
    let (_, h, w) = img.chw().expect("metric_sf input");
    let at = |i: usize, j: usize| img.data()[i * w + j] as f64 * 255.0;
    let mut rf = 0.0;
    if w > 1 {
        for i in 0..h {
            for j in 1..w {
                let d = at(i, j) - at(i, j - 1);
                rf += d * d;
            }
        }
        rf /= (h * (w - 1)) as f64;
    }
    let mut cf = 0.0;
    if h > 1 {
        for i in 1..h {
            for j in 0..w {
                let d = at(i, j) - at(i - 1, j);
                cf += d * d;
            }
        }
        cf /= ((h - 1) * w) as f64;
    }
    (rf + cf).sqrt()
}

fn mutual_information(a: &[u8], b: &[u8]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut joint = vec![0.0f64; 256 * 256];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * 256 + y as usize] += 1.0;
    }
    let pa = histogram256(a);
    let pb = histogram256(b);
    let mut mi = 0.0;
    for x in 0..256 {
        if pa[x] == 0.0 {
            continue;
        }
        for y in 0..256 {
            let j = joint[x * 256 + y];
            if j > 0.0 && pb[y] > 0.0 {
                let pxy = j / n;
                mi += pxy * (pxy * n * n / (pa[x] * pb[y])).log2();
            }
        }
    }
    mi
}

/// `MI(fused, ir) + MI(fused, vis)` from 256x256 joint histograms, in bits.
pub fn metric_mi(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> f64 {
    let qf = quantize(fused);
    mutual_information(&qf, &quantize(ir)) + mutual_information(&qf, &quantize(vis))
}

// ---- VIF (pixel domain) --------------------------------------------------------

/// Separable Gaussian filter with border-renormalized truncated kernels.
fn gaussian_filter(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();

    let mut tmp = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let jj = j as isize + k as isize - radius;
                if jj < 0 || jj >= w as isize {
                    continue;
                }
                acc += kv * img[i * w + jj as usize];
                norm += kv;
            }
            tmp[i * w + j] = acc / norm;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let ii = i as isize + k as isize - radius;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                acc += kv * tmp[ii as usize * w + j];
                norm += kv;
            }
            out[i * w + j] = acc / norm;
        }
    }
    out
}

fn downsample2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let nh = h.div_ceil(2);
    let nw = w.div_ceil(2);
    let mut out = vec![0.0f64; nh * nw];
    for i in 0..nh {
        for j in 0..nw {
            out[i * nw + j] = img[(i * 2) * w + j * 2];
        }
    }
    (out, nh, nw)
}

/// Pixel-domain visual information fidelity of `dist` given `reference`,
/// accumulated over 4 scales. Returns 0 for a constant (zero-information)
/// reference.
fn vif_single(reference: &Tensor, dist: &Tensor) -> f64 {
    const EPS: f64 = 1e-10;
    const SIGMA_N_SQ: f64 = 2.0;
    let (_, h0, w0) = reference.chw().expect("vif input");
    let mut xref: Vec<f64> = reference.data().iter().map(|&v| v as f64 * 255.0).collect();
    let mut xdst: Vec<f64> = dist.data().iter().map(|&v| v as f64 * 255.0).collect();
    let (mut h, mut w) = (h0, w0);

    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for scale in 1..=4usize {
        let sigma = f64::powi(2.0, scale as i32 - 1);
        if scale > 1 {
            // Low-pass with the previous window, then decimate by 2.
            xref = gaussian_filter(&xref, h, w, sigma / 2.0);
            xdst = gaussian_filter(&xdst, h, w, sigma / 2.0);
            let (r, nh, nw) = downsample2(&xref, h, w);
            let (d, _, _) = downsample2(&xdst, h, w);
            xref = r;
            xdst = d;
            h = nh;
            w = nw;
        }
        if h < 2 || w < 2 {
            break;
        }
        let mu_r = gaussian_filter(&xref, h, w, sigma);
        let mu_d = gaussian_filter(&xdst, h, w, sigma);
        let rr: Vec<f64> = xref.iter().map(|&v| v * v).collect();
        let dd: Vec<f64> = xdst.iter().map(|&v| v * v).collect();
        let rd: Vec<f64> = xref.iter().zip(&xdst).map(|(&a, &b)| a * b).collect();
        let m_rr = gaussian_filter(&rr, h, w, sigma);
        let m_dd = gaussian_filter(&dd, h, w, sigma);
        let m_rd = gaussian_filter(&rd, h, w, sigma);

        for i in 0..h * w {
            let sx2 = (m_rr[i] - mu_r[i] * mu_r[i]).max(0.0);
            let sy2 = (m_dd[i] - mu_d[i] * mu_d[i]).max(0.0);
            let sxy = m_rd[i] - mu_r[i] * mu_d[i];

            let mut g = sxy / (sx2 + EPS);
            let mut sv2 = sy2 - g * sxy;
            let mut sx2 = sx2;
            if sx2 < EPS {
                g = 0.0;
                sv2 = sy2;
                sx2 = 0.0;
            }
            if sy2 < EPS {
                g = 0.0;
                sv2 = 0.0;
            }
            if g < 0.0 {
                sv2 = sy2;
                g = 0.0;
            }
            if sv2 <= EPS {
                sv2 = EPS;
            }
            num += (1.0 + g * g * sx2 / (sv2 + SIGMA_N_SQ)).log2();
            den += (1.0 + sx2 / SIGMA_N_SQ).log2();
        }
    }
    if den <= 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `VIF(ir -> fused) + VIF(vis -> fused)`.
pub fn metric_vif(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> f64 {
    vif_single(ir, fused) + vif_single(vis, fused)
}

// ---- Qabf ---------------------------------------------------------------------

struct EdgeMap {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edge_map(img: &Tensor) -> EdgeMap {
    let (_, h, w) = img.chw().expect("edge_map input");
    // Replicate padding keeps flat images edge-free at the borders.
    let at = |i: isize, j: isize| -> f64 {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        img.data()[ii * w + jj] as f64 * 255.0
    };
    let mut strength = vec![0.0f64; h * w];
    let mut angle = vec![0.0f64; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let gx = -at(i - 1, j - 1) + at(i - 1, j + 1) - 2.0 * at(i, j - 1)
                + 2.0 * at(i, j + 1)
                - at(i + 1, j - 1)
                + at(i + 1, j + 1);
            let gy = -at(i - 1, j - 1) - 2.0 * at(i - 1, j) - at(i - 1, j + 1)
                + at(i + 1, j - 1)
                + 2.0 * at(i + 1, j)
                + at(i + 1, j + 1);
            let idx = i as usize * w + j as usize;
            strength[idx] = (gx * gx + gy * gy).sqrt();
            angle[idx] = if gx != 0.0 { (gy / gx).atan() } else { PI / 2.0 };
        }
    }
    EdgeMap { strength, angle }
}

const QABF_GAMMA_G: f64 = 0.9994;
const QABF_KAPPA_G: f64 = -15.0;
const QABF_SIGMA_G: f64 = 0.5;
const QABF_GAMMA_A: f64 = 0.9879;
const QABF_KAPPA_A: f64 = -22.0;
const QABF_SIGMA_A: f64 = 0.8;

fn edge_preservation(src: &EdgeMap, fus: &EdgeMap, i: usize) -> f64 {
    let (ga, gf) = (src.strength[i], fus.strength[i]);
    let g_rel = if ga > gf {
        gf / ga
    } else if ga < gf {
        ga / gf
    } else if ga > 0.0 {
        1.0
    } else {
        0.0
    };
    let a_rel = 1.0 - (src.angle[i] - fus.angle[i]).abs() / (PI / 2.0);
    let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g_rel - QABF_SIGMA_G)).exp());
    let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a_rel - QABF_SIGMA_A)).exp());
    qg * qa
}

/// Gradient-based fusion quality: edge-strength-weighted preservation of
/// per-source Sobel strength and orientation, mapped through the standard
/// sigmoid constants.
pub fn metric_qabf(fused: &Tensor, ir: &Tensor, vis: &Tensor) -> f64 {
    let ea = edge_map(ir);
    let eb = edge_map(vis);
    let ef = edge_map(fused);
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..ef.strength.len() {
        let (wa, wb) = (ea.strength[i], eb.strength[i]);
        num += edge_preservation(&ea, &ef, i) * wa + edge_preservation(&eb, &ef, i) * wb;
        den += wa + wb;
    }
    if den <= 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_img(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| rng.gen::<f32>())
    }

    #[test]
    fn en_analytic_cases() {
        assert_eq!(metric_en(&Tensor::filled(&[8, 8], 0.3)), 0.0);
        let coin = Tensor::from_fn(&[8, 8], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        assert!((metric_en(&coin) - 1.0).abs() < 1e-12);
        // Uniform ramp over all 256 levels, each level equally often.
        let ramp = Tensor::from_fn(&[16, 16], |i| i as f32 / 255.0);
        assert!((metric_en(&ramp) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn sd_analytic_cases() {
        assert_eq!(metric_sd(&Tensor::filled(&[4, 4], 0.9)), 0.0);
        let coin = Tensor::from_fn(&[4, 4], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        assert!((metric_sd(&coin) - 127.5).abs() < 1e-9);
    }

    #[test]
    fn sd_matches_two_pass_oracle() {
        let img = random_img(13, 9, 3);
        let vals: Vec<f64> = img.data().iter().map(|&v| v as f64 * 255.0).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((metric_sd(&img) - var.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn sf_analytic_cases() {
        assert_eq!(metric_sf(&Tensor::filled(&[5, 5], 0.2)), 0.0);
        let stripes = Tensor::from_fn(&[6, 6], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        assert!((metric_sf(&stripes) - 255.0).abs() < 1e-9);
    }

    #[test]
    fn sf_matches_difference_loop() {
        let img = random_img(7, 11, 5);
        let (h, w) = (7usize, 11usize);
        let at = |i: usize, j: usize| img.data()[i * w + j] as f64 * 255.0;
        let mut rf = 0.0;
        for i in 0..h {
            for j in 1..w {
                rf += (at(i, j) - at(i, j - 1)).powi(2);
            }
        }
        rf /= (h * (w - 1)) as f64;
        let mut cf = 0.0;
        for i in 1..h {
            for j in 0..w {
                cf += (at(i, j) - at(i - 1, j)).powi(2);
            }
        }
        cf /= ((h - 1) * w) as f64;
        assert!((metric_sf(&img) - (rf + cf).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn mi_self_case_doubles_entropy() {
        let img = random_img(16, 16, 7);
        assert!((metric_mi(&img, &img, &img) - 2.0 * metric_en(&img)).abs() < 1e-9);
    }

    #[test]
    fn mi_with_constant_source_term_is_zero() {
        let img = random_img(16, 16, 9);
        let constant = Tensor::filled(&[16, 16], 0.5);
        let with = metric_mi(&img, &constant, &img);
        let self_only = metric_mi(&img, &img, &img) / 2.0;
        assert!((with - self_only).abs() < 1e-9);
    }

    #[test]
    fn vif_self_case_is_two() {
        let img = random_img(48, 40, 11);
        let v = metric_vif(&img, &img, &img);
        assert!((v - 2.0).abs() < 1e-6, "self VIF {}", v);
    }

    #[test]
    fn vif_constant_source_is_zero_and_noise_is_small() {
        let img = random_img(48, 40, 13);
        let constant = Tensor::filled(&[48, 40], 0.5);
        assert_eq!(super::vif_single(&constant, &img), 0.0);
        // Uncorrelated noise carries almost no source information.
        let mut worst: f64 = 0.0;
        for seed in [21u64, 22, 23] {
            let noise = random_img(48, 40, seed);
            let src = random_img(48, 40, seed + 100);
            worst = worst.max(super::vif_single(&src, &noise));
        }
        assert!(worst < 0.05, "noise VIF reached {}", worst);
    }

    #[test]
    fn qabf_self_and_flat_cases() {
        let img = random_img(32, 32, 17);
        let q_self = metric_qabf(&img, &img, &img);
        assert!(q_self > 0.97, "self Qabf {}", q_self);
        let flat = Tensor::filled(&[32, 32], 0.5);
        let q_flat = metric_qabf(&flat, &img, &img);
        assert!(q_flat < 0.05, "flat Qabf {}", q_flat);
    }

    #[test]
    fn source_swap_symmetry() {
        let fused = random_img(24, 24, 31);
        let a = random_img(24, 24, 32);
        let b = random_img(24, 24, 33);
        assert!((metric_mi(&fused, &a, &b) - metric_mi(&fused, &b, &a)).abs() < 1e-12);
        assert!((metric_vif(&fused, &a, &b) - metric_vif(&fused, &b, &a)).abs() < 1e-12);
        assert!((metric_qabf(&fused, &a, &b) - metric_qabf(&fused, &b, &a)).abs() < 1e-12);
    }

    #[test]
    fn report_csv_has_mean_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let mut report = MetricsReport::default();
        let img = random_img(16, 16, 41);
        report.push(metric_row("a", &img, &img, &img));
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,en,sd,sf,mi,vif,qabf");
        assert!(lines[2].starts_with("MEAN,"));
    }

    #[test]
    fn metric_ranges_hold_on_random_triples() {
        for seed in 0..25u64 {
            let fused = random_img(20, 20, 900 + seed);
            let ir = random_img(20, 20, 1900 + seed);
            let vis = random_img(20, 20, 2900 + seed);
            let row = metric_row("r", &fused, &ir, &vis);
            assert!((0.0..=8.0).contains(&row.en));
            assert!(row.sd >= 0.0);
            assert!(row.sf >= 0.0);
            assert!(row.mi >= -1e-9);
            assert!(row.vif >= 0.0);
            assert!((0.0..=1.0).contains(&row.qabf));
        }
    }
}
