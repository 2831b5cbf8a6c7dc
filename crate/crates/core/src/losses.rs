//! The four training losses and their weighted total.
//!
//! All losses are built as graph ops so their gradients flow back into the
//! network. The breakdown reported per step is recombined in f64 so the
//! weighted-sum identities hold to well below 1e-6.

use crate::graph::{Graph, VarId};
use crate::net::FreqIntermediate;
use crate::{Error, Result, Tensor};

/// Balancing coefficients: total = alpha1*L_int + alpha2*L_grad + L_ssim
/// + lambda_s*L_saliency + L_fre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f32,
    pub alpha1: f32,
    pub alpha2: f32,
    pub beta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 10.0,
            alpha1: 5.0,
            alpha2: 10.0,
            beta: 5.0,
        }
    }
}

/// Scalar loss values for one step, recombined in f64.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub l_int: f64,
    pub l_grad: f64,
    pub l_content: f64,
    pub l_ssim: f64,
    pub l_saliency: f64,
    pub l_fre: f64,
    pub l_total: f64,
    /// Set when a saliency mask left one correlation region empty, forcing
    /// that CC term to 0.
    pub fre_degenerate: bool,
}

/// Weighted recombination shared by the graph build and the breakdown.
pub fn combine(
    weights: &LossWeights,
    l_int: f64,
    l_grad: f64,
    l_ssim: f64,
    l_saliency: f64,
    l_fre: f64,
) -> (f64, f64) {
    let l_content = weights.alpha1 as f64 * l_int + weights.alpha2 as f64 * l_grad;
    let l_total = l_content + l_ssim + weights.lambda_s as f64 * l_saliency + l_fre;
    (l_content, l_total)
}

/// Pixel intensity loss: `mean |fused - max(ir, vis)|`.
pub fn loss_int(g: &mut Graph, fused: VarId, ir: VarId, vis: VarId) -> Result<VarId> {
    let target = g.max_elem(ir, vis)?;
    let diff = g.sub(fused, target)?;
    let a = g.abs(diff);
    Ok(g.mean(a))
}

/// `|sobel_x| + |sobel_y|` of a single-channel plane.
fn grad_magnitude(g: &mut Graph, x: VarId) -> Result<VarId> {
    let (gx, gy) = g.sobel_xy(x)?;
    let ax = g.abs(gx);
    let ay = g.abs(gy);
    g.add(ax, ay)
}

/// Gradient loss: `mean | |grad fused| - max(|grad ir|, |grad vis|) |`.
pub fn loss_grad(g: &mut Graph, fused: VarId, ir: VarId, vis: VarId) -> Result<VarId> {
    let gf = grad_magnitude(g, fused)?;
    let gi = grad_magnitude(g, ir)?;
    let gv = grad_magnitude(g, vis)?;
    let target = g.max_elem(gi, gv)?;
    let diff = g.sub(gf, target)?;
    let a = g.abs(diff);
    Ok(g.mean(a))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f32 = 1e-4; // (0.01)^2 for L = 1
const SSIM_C2: f32 = 9e-4; // (0.03)^2

/// Normalized 11x11 Gaussian window as a conv weight `[1,1,11,11]`.
pub fn ssim_window() -> Tensor {
    let n = SSIM_WINDOW;
    let mid = (n / 2) as f64;
    let mut data = vec![0.0f64; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - mid).powi(2) + (j as f64 - mid).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            data[i * n + j] = v;
            total += v;
        }
    }
    Tensor::new(
        vec![1, 1, n, n],
        data.iter().map(|&v| (v / total) as f32).collect(),
    )
    .expect("ssim window shape")
}

/// Mean SSIM over valid window positions, as a graph scalar.
fn ssim_graph(g: &mut Graph, a: VarId, b: VarId, win: VarId, zero_bias: VarId) -> Result<VarId> {
    let (_, h, w) = g.value(a).chw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "SSIM needs images at least {}x{}, got {}x{}",
            SSIM_WINDOW, SSIM_WINDOW, h, w
        )));
    }
    let mu_a = g.conv2d(a, win, zero_bias, 0)?;
    let mu_b = g.conv2d(b, win, zero_bias, 0)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let m_aa = g.conv2d(aa, win, zero_bias, 0)?;
    let m_bb = g.conv2d(bb, win, zero_bias, 0)?;
    let m_ab = g.conv2d(ab, win, zero_bias, 0)?;

    let mu_a2 = g.mul(mu_a, mu_a)?;
    let mu_b2 = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(m_aa, mu_a2)?;
    let var_b = g.sub(m_bb, mu_b2)?;
    let cov = g.sub(m_ab, mu_ab)?;

    let two_mu = g.mul_scalar(mu_ab, 2.0);
    let num1 = g.add_scalar(two_mu, SSIM_C1);
    let two_cov = g.mul_scalar(cov, 2.0);
    let num2 = g.add_scalar(two_cov, SSIM_C2);
    let num = g.mul(num1, num2)?;

    let mu_sum = g.add(mu_a2, mu_b2)?;
    let den1 = g.add_scalar(mu_sum, SSIM_C1);
    let var_sum = g.add(var_a, var_b)?;
    let den2 = g.add_scalar(var_sum, SSIM_C2);
    let den = g.mul(den1, den2)?;

    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// Structural loss: `(1 - SSIM(fused, ir))/2 + (1 - SSIM(fused, vis))/2`.
pub fn loss_ssim(g: &mut Graph, fused: VarId, ir: VarId, vis: VarId) -> Result<VarId> {
    let win = g.constant(ssim_window());
    let zero_bias = g.constant(Tensor::zeros(&[1]));
    let s_ir = ssim_graph(g, fused, ir, win, zero_bias)?;
    let s_vis = ssim_graph(g, fused, vis, win, zero_bias)?;
    let sum = g.add(s_ir, s_vis)?;
    let half = g.mul_scalar(sum, -0.5);
    Ok(g.add_scalar(half, 1.0))
}

/// Saliency target loss: IR fidelity inside the mask (weighted by beta),
/// visible fidelity outside.
pub fn loss_saliency(
    g: &mut Graph,
    fused: VarId,
    ir: VarId,
    vis: VarId,
    mask: VarId,
    beta: f32,
) -> Result<VarId> {
    let in_diff = g.sub(ir, fused)?;
    let in_masked = g.mul(mask, in_diff)?;
    let in_abs = g.abs(in_masked);
    let in_term = g.mean(in_abs);

    let neg = g.mul_scalar(mask, -1.0);
    let inv_mask = g.add_scalar(neg, 1.0);
    let out_diff = g.sub(vis, fused)?;
    let out_masked = g.mul(inv_mask, out_diff)?;
    let out_abs = g.abs(out_masked);
    let out_term = g.mean(out_abs);

    let weighted = g.mul_scalar(in_term, beta);
    g.add(weighted, out_term)
}

const CC_EPS: f32 = 1e-8;

/// Pearson correlation of `x` and `y` over the pixels where `mask` is 1;
/// statistics are computed over in-region pixels only.
fn masked_cc(g: &mut Graph, x: VarId, y: VarId, mask: VarId, count: usize) -> Result<VarId> {
    let inv_n = 1.0 / count as f32;
    let mx_masked = g.mul(mask, x)?;
    let sx = g.sum(mx_masked);
    let mean_x = g.mul_scalar(sx, inv_n);
    let my_masked = g.mul(mask, y)?;
    let sy = g.sum(my_masked);
    let mean_y = g.mul_scalar(sy, inv_n);

    let x_c = g.sub(x, mean_x)?;
    let dx = g.mul(mask, x_c)?;
    let y_c = g.sub(y, mean_y)?;
    let dy = g.mul(mask, y_c)?;

    let dxx = g.mul(dx, dx)?;
    let sxx = g.sum(dxx);
    let var_x = g.mul_scalar(sxx, inv_n);
    let dyy = g.mul(dy, dy)?;
    let syy = g.sum(dyy);
    let var_y = g.mul_scalar(syy, inv_n);
    let dxy = g.mul(dx, dy)?;
    let sxy = g.sum(dxy);
    let cov = g.mul_scalar(sxy, inv_n);

    let vx_e = g.add_scalar(var_x, CC_EPS);
    let vy_e = g.add_scalar(var_y, CC_EPS);
    let prod = g.mul(vx_e, vy_e)?;
    let denom = g.sqrt(prod);
    g.div(cov, denom)
}

/// Frequency consistency loss on the fused spectra:
/// `2 - CC(M*X, M*ir) - CC((1-M)*X, (1-M)*vis)` with
/// `X = ifft_polar(amp_f, pha_f)`, minimized at 0 when both correlations
/// reach 1. With `literal_sign` the printed form `CC + CC` is returned
/// instead. An empty region forces its CC term to 0 and sets the flag.
pub fn loss_fre(
    g: &mut Graph,
    freq: &FreqIntermediate,
    ir: VarId,
    vis: VarId,
    mask: VarId,
    literal_sign: bool,
) -> Result<(VarId, bool)> {
    let x = g.polar_ifft2(freq.amp_f, freq.pha_f)?;

    let total = g.value(mask).len();
    let inside = g.value(mask).data().iter().filter(|&&v| v > 0.5).count();
    let outside = total - inside;
    let mut degenerate = false;

    let cc_in = if inside == 0 {
        degenerate = true;
        g.scalar(0.0)
    } else {
        masked_cc(g, x, ir, mask, inside)?
    };
    let cc_out = if outside == 0 {
        degenerate = true;
        g.scalar(0.0)
    } else {
        let neg = g.mul_scalar(mask, -1.0);
        let inv_mask = g.add_scalar(neg, 1.0);
        masked_cc(g, x, vis, inv_mask, outside)?
    };

    let cc_sum = g.add(cc_in, cc_out)?;
    let value = if literal_sign {
        cc_sum
    } else {
        let neg = g.mul_scalar(cc_sum, -1.0);
        g.add_scalar(neg, 2.0)
    };
    Ok((value, degenerate))
}

/// Everything the total loss needs for one batch item, already on the graph.
pub struct ItemLossInputs {
    pub fused: VarId,
    pub ir: VarId,
    pub vis: VarId,
    /// Binary mask, `[1,H,W]`, same shape as the image planes.
    pub mask: VarId,
    pub freq: Option<FreqIntermediate>,
}

/// Options beyond the balancing weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossOptions {
    /// Use the additive CC form of the frequency loss instead of `2 - CC`.
    pub fre_literal_sign: bool,
    /// Drop the frequency loss term (`use_lfre = false` or no FDFM branch).
    pub disable_fre: bool,
}

/// Batch total: every component is averaged over items first, then combined
/// with the balancing weights on the graph.
pub fn total_loss(
    g: &mut Graph,
    items: &[ItemLossInputs],
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<(VarId, LossBreakdown)> {
    if items.is_empty() {
        return Err(Error::Contract("total_loss over an empty batch".into()));
    }
    let mut ints = Vec::new();
    let mut grads = Vec::new();
    let mut ssims = Vec::new();
    let mut sals = Vec::new();
    let mut fres = Vec::new();
    let mut degenerate = false;
    for item in items {
        ints.push(loss_int(g, item.fused, item.ir, item.vis)?);
        grads.push(loss_grad(g, item.fused, item.ir, item.vis)?);
        ssims.push(loss_ssim(g, item.fused, item.ir, item.vis)?);
        sals.push(loss_saliency(
            g,
            item.fused,
            item.ir,
            item.vis,
            item.mask,
            weights.beta,
        )?);
        if !options.disable_fre {
            if let Some(freq) = &item.freq {
                let (l, d) = loss_fre(
                    g,
                    freq,
                    item.ir,
                    item.vis,
                    item.mask,
                    options.fre_literal_sign,
                )?;
                fres.push(l);
                degenerate |= d;
            }
        }
    }

    let l_int = mean_of(g, &ints)?;
    let l_grad = mean_of(g, &grads)?;
    let l_ssim = mean_of(g, &ssims)?;
    let l_sal = mean_of(g, &sals)?;
    let l_fre = if fres.is_empty() {
        g.scalar(0.0)
    } else {
        mean_of(g, &fres)?
    };

    // total = alpha1*L_int + alpha2*L_grad + L_ssim + lambda_s*L_sal + L_fre
    let w_int = g.mul_scalar(l_int, weights.alpha1);
    let w_grad = g.mul_scalar(l_grad, weights.alpha2);
    let l_content = g.add(w_int, w_grad)?;
    let w_sal = g.mul_scalar(l_sal, weights.lambda_s);
    let t1 = g.add(l_content, l_ssim)?;
    let t2 = g.add(t1, w_sal)?;
    let total = g.add(t2, l_fre)?;

    let (int_v, grad_v, ssim_v, sal_v, fre_v) = (
        g.value(l_int).item() as f64,
        g.value(l_grad).item() as f64,
        g.value(l_ssim).item() as f64,
        g.value(l_sal).item() as f64,
        g.value(l_fre).item() as f64,
    );
    let (content_v, total_v) = combine(weights, int_v, grad_v, ssim_v, sal_v, fre_v);
    let breakdown = LossBreakdown {
        l_int: int_v,
        l_grad: grad_v,
        l_content: content_v,
        l_ssim: ssim_v,
        l_saliency: sal_v,
        l_fre: fre_v,
        l_total: total_v,
        fre_degenerate: degenerate,
    };
    if !breakdown.l_total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: {:?}",
            breakdown
        )));
    }
    Ok((total, breakdown))
}

fn mean_of(g: &mut Graph, scalars: &[VarId]) -> Result<VarId> {
    let mut acc = scalars[0];
    for &s in &scalars[1..] {
        acc = g.add(acc, s)?;
    }
    Ok(g.mul_scalar(acc, 1.0 / scalars.len() as f32))
}
