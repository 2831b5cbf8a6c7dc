//! Frequency-domain fusion: FFT both modalities, fuse amplitude and phase
//! spectra with separate two-conv stacks, transform back, and lift the
//! reconstruction to D feature channels.

use rand_chacha::ChaCha8Rng;

use super::{ConvParams, ConvVars, NetConfig};
use crate::graph::{Graph, VarId};
use crate::{fft, Result, Tensor};

/// Parameters of the frequency branch. The amplitude and phase stacks are
/// structurally identical (2 -> C -> 1 channels) but independently
/// parameterized.
#[derive(Clone, Debug)]
pub struct FdfmParams {
    pub amp1: ConvParams,
    pub amp2: ConvParams,
    pub pha1: ConvParams,
    pub pha2: ConvParams,
    /// 2 -> D conv over the concatenated channel max/mean planes.
    pub post: ConvParams,
}

impl FdfmParams {
    pub fn init(d: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        FdfmParams {
            amp1: spectrum_conv_init(c, 2, rng),
            amp2: spectrum_conv_init(1, c, rng),
            pha1: spectrum_conv_init(c, 2, rng),
            pha2: spectrum_conv_init(1, c, rng),
            post: ConvParams::init(d, 2, 3, rng),
        }
    }

    pub(crate) fn push_named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, conv) in [
            ("fdfm.amp1", &self.amp1),
            ("fdfm.amp2", &self.amp2),
            ("fdfm.pha1", &self.pha1),
            ("fdfm.pha2", &self.pha2),
            ("fdfm.post", &self.post),
        ] {
            out.push((format!("{name}.w"), &conv.w));
            out.push((format!("{name}.b"), &conv.b));
        }
    }

    pub(crate) fn push_named_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (name, conv) in [
            ("fdfm.amp1", &mut self.amp1),
            ("fdfm.amp2", &mut self.amp2),
            ("fdfm.pha1", &mut self.pha1),
            ("fdfm.pha2", &mut self.pha2),
            ("fdfm.post", &mut self.post),
        ] {
            out.push((format!("{name}.w"), &mut conv.w));
            out.push((format!("{name}.b"), &mut conv.b));
        }
    }
}

/// Init for the spectrum-fusion convs: damped Kaiming noise around an
/// averaging prior (each output taps the center of every input channel with
/// weight 1/C_in). A purely random stack reconstructs noise for a long
/// time, which starves the branch of gradient signal on small datasets;
/// starting near "fused spectrum = mean of source spectra" gives it real
/// content from the first step.
fn spectrum_conv_init(oc: usize, ic: usize, rng: &mut ChaCha8Rng) -> ConvParams {
    let mut conv = ConvParams::init(oc, ic, 3, rng);
    let center_tap = 1.0 / ic as f32;
    let k = 3;
    for w in conv.w.data_mut().iter_mut() {
        *w *= 0.25;
    }
    for o in 0..oc {
        for i in 0..ic {
            let idx = ((o * ic + i) * k + 1) * k + 1;
            conv.w.data_mut()[idx] += center_tap;
        }
    }
    conv
}

pub(crate) struct FdfmVars {
    amp1: ConvVars,
    amp2: ConvVars,
    pha1: ConvVars,
    pha2: ConvVars,
    post: ConvVars,
}

impl FdfmVars {
    pub(crate) fn bind(g: &mut Graph, p: &FdfmParams, trainable: bool) -> Self {
        FdfmVars {
            amp1: ConvVars::bind(g, &p.amp1, trainable),
            amp2: ConvVars::bind(g, &p.amp2, trainable),
            pha1: ConvVars::bind(g, &p.pha1, trainable),
            pha2: ConvVars::bind(g, &p.pha2, trainable),
            post: ConvVars::bind(g, &p.post, trainable),
        }
    }

    pub(crate) fn push_named(&self, out: &mut Vec<(String, VarId)>) {
        for (name, conv) in [
            ("fdfm.amp1", &self.amp1),
            ("fdfm.amp2", &self.amp2),
            ("fdfm.pha1", &self.pha1),
            ("fdfm.pha2", &self.pha2),
            ("fdfm.post", &self.post),
        ] {
            out.push((format!("{name}.w"), conv.w));
            out.push((format!("{name}.b"), conv.b));
        }
    }
}

/// Raw amplitude and phase planes of a single-channel image.
pub fn spectrum(image: &Tensor) -> Result<(Tensor, Tensor)> {
    let field = fft::fft2(image)?;
    Ok(fft::amplitude_phase(&field))
}

/// Graph version of [`spectrum`], shapes preserved as `[1,H,W]`.
fn spectrum_on_graph(g: &mut Graph, image: VarId) -> Result<(VarId, VarId)> {
    let (re, im) = g.fft2(image)?;
    let amp = g.complex_abs(re, im)?;
    let pha = g.complex_angle(re, im)?;
    Ok((amp, pha))
}

fn conv_stack(
    g: &mut Graph,
    input: VarId,
    c1: &ConvVars,
    c2: &ConvVars,
    slope: f32,
) -> Result<VarId> {
    let x = g.conv2d(input, c1.w, c1.b, 1)?;
    let x = g.leaky_relu(x, slope);
    let x = g.conv2d(x, c2.w, c2.b, 1)?;
    Ok(g.leaky_relu(x, slope))
}

/// Fuses the four spectra into one amplitude and one phase plane. With
/// compression enabled the amplitude branch runs in log space:
/// `amp_f = expm1(stack(log1p(amp_ir), log1p(amp_vis)))`.
fn fuse_spectra_on_graph(
    g: &mut Graph,
    vars: &FdfmVars,
    cfg: &NetConfig,
    amp_ir: VarId,
    amp_vis: VarId,
    pha_ir: VarId,
    pha_vis: VarId,
) -> Result<(VarId, VarId)> {
    let (amp_ir, amp_vis) = if cfg.amp_log_compress {
        (g.log1p(amp_ir), g.log1p(amp_vis))
    } else {
        (amp_ir, amp_vis)
    };
    let amp_cat = g.concat_ch(&[amp_ir, amp_vis])?;
    let amp_out = conv_stack(g, amp_cat, &vars.amp1, &vars.amp2, cfg.leaky_slope)?;
    let amp_f = if cfg.amp_log_compress {
        g.expm1(amp_out)
    } else {
        amp_out
    };

    let pha_cat = g.concat_ch(&[pha_ir, pha_vis])?;
    let pha_f = conv_stack(g, pha_cat, &vars.pha1, &vars.pha2, cfg.leaky_slope)?;
    Ok((amp_f, pha_f))
}

/// Standalone spectrum fusion on plain tensors.
pub fn fuse_spectra(
    params: &FdfmParams,
    cfg: &NetConfig,
    amp_ir: &Tensor,
    amp_vis: &Tensor,
    pha_ir: &Tensor,
    pha_vis: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let vars = FdfmVars::bind(&mut g, params, false);
    let (ai, av, pi, pv) = (
        g.constant(amp_ir.clone()),
        g.constant(amp_vis.clone()),
        g.constant(pha_ir.clone()),
        g.constant(pha_vis.clone()),
    );
    let (amp_f, pha_f) = fuse_spectra_on_graph(&mut g, &vars, cfg, ai, av, pi, pv)?;
    Ok((g.value(amp_f).clone(), g.value(pha_f).clone()))
}

pub(crate) struct FdfmOutput {
    pub f_fre: VarId,
    pub amp_f: VarId,
    pub pha_f: VarId,
}

/// Full frequency branch. The reconstruction is a single plane, so the
/// channel max and mean duplicate it; the concat is kept literal so the
/// architecture is identical under every ablation.
pub(crate) fn forward(
    g: &mut Graph,
    vars: &FdfmVars,
    cfg: &NetConfig,
    ir: VarId,
    vis_y: VarId,
) -> Result<FdfmOutput> {
    let (amp_ir, pha_ir) = spectrum_on_graph(g, ir)?;
    let (amp_vis, pha_vis) = spectrum_on_graph(g, vis_y)?;
    let (amp_f, pha_f) = fuse_spectra_on_graph(g, vars, cfg, amp_ir, amp_vis, pha_ir, pha_vis)?;
    let f_hat = g.polar_ifft2(amp_f, pha_f)?;
    let mx = g.channel_max(f_hat)?;
    let mn = g.channel_mean(f_hat)?;
    let cat = g.concat_ch(&[mx, mn])?;
    let f_fre = g.conv2d(cat, vars.post.w, vars.post.b, 1)?;
    Ok(FdfmOutput {
        f_fre,
        amp_f,
        pha_f,
    })
}
