//! The fusion network: a spatial refinement branch (DMRM) and a frequency
//! fusion branch (FDFM) running in parallel, joined by a four-conv fusion
//! block that maps the concatenated features to a single luma plane in (0,1).

pub mod dmrm;
pub mod fdfm;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, VarId};
use crate::imaging::{recombine_color, ImagePair};
use crate::{Error, Result, Tensor};

pub use dmrm::DmrmParams;
pub use fdfm::FdfmParams;

/// Which parts of the network (and loss) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationConfig {
    pub use_dmrm: bool,
    pub use_fdfm: bool,
    pub use_lfre: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            use_dmrm: true,
            use_fdfm: true,
            use_lfre: true,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_dmrm && !self.use_fdfm {
            return Err(Error::Config(
                "ablation disables both branches; at least one of dmrm/fdfm must stay on".into(),
            ));
        }
        Ok(())
    }
}

/// Structural hyperparameters. `d` is the embedding width, `c` the internal
/// width of the FDFM spectrum branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    pub d: usize,
    pub c: usize,
    pub leaky_slope: f32,
    /// Compress spectrum amplitudes with log1p before the conv stack and
    /// expand with expm1 after; raw FFT amplitudes span several orders of
    /// magnitude otherwise.
    pub amp_log_compress: bool,
    pub ablation: AblationConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d: 32,
            c: 16,
            leaky_slope: 0.2,
            amp_log_compress: true,
            ablation: AblationConfig::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "embedding width d must be even and >= 2, got {}",
                self.d
            )));
        }
        if self.c == 0 {
            return Err(Error::Config("fdfm width c must be >= 1".into()));
        }
        self.ablation.validate()
    }
}

/// One convolution layer's parameters.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    /// Kaiming-uniform fan-in init (`bound = sqrt(6 / fan_in)`), zero bias.
    pub fn init(oc: usize, ic: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (ic * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        ConvParams {
            w: Tensor::from_fn(&[oc, ic, k, k], |_| rng.gen_range(-bound..bound)),
            b: Tensor::zeros(&[oc]),
        }
    }

    pub fn count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Graph handles for one conv layer.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub w: VarId,
    pub b: VarId,
}

impl ConvVars {
    pub fn bind(g: &mut Graph, p: &ConvParams, trainable: bool) -> Self {
        ConvVars {
            w: g.leaf(p.w.clone(), trainable),
            b: g.leaf(p.b.clone(), trainable),
        }
    }
}

/// Fusion block: four 3x3 convs with channel plan `in -> D -> D -> D/2 -> 1`,
/// Leaky ReLU after the first three and a sigmoid after the last. The input
/// width depends on the ablation (3D full, 2D without FDFM, D without DMRM).
#[derive(Clone, Debug)]
pub struct FusionBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
    pub conv4: ConvParams,
}

impl FusionBlockParams {
    fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        let in_ch = fusion_input_channels(cfg);
        FusionBlockParams {
            conv1: ConvParams::init(d, in_ch, 3, rng),
            conv2: ConvParams::init(d, d, 3, rng),
            conv3: ConvParams::init(d / 2, d, 3, rng),
            conv4: ConvParams::init(1, d / 2, 3, rng),
        }
    }
}

fn fusion_input_channels(cfg: &NetConfig) -> usize {
    match (cfg.ablation.use_dmrm, cfg.ablation.use_fdfm) {
        (true, true) => 3 * cfg.d,
        (true, false) => 2 * cfg.d,
        (false, true) => cfg.d,
        (false, false) => unreachable!("rejected by AblationConfig::validate"),
    }
}

struct FusionBlockVars {
    conv1: ConvVars,
    conv2: ConvVars,
    conv3: ConvVars,
    conv4: ConvVars,
}

/// Every learnable tensor of the network, plus the structure that shaped it.
#[derive(Clone, Debug)]
pub struct FusionNetParams {
    pub config: NetConfig,
    pub dmrm: Option<DmrmParams>,
    pub fdfm: Option<FdfmParams>,
    pub fusion: FusionBlockParams,
}

impl FusionNetParams {
    /// Deterministic initialization from a seed.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dmrm = config
            .ablation
            .use_dmrm
            .then(|| DmrmParams::init(config.d, &mut rng));
        let fdfm = config
            .ablation
            .use_fdfm
            .then(|| FdfmParams::init(config.d, config.c, &mut rng));
        let fusion = FusionBlockParams::init(&config, &mut rng);
        Ok(FusionNetParams {
            config,
            dmrm,
            fdfm,
            fusion,
        })
    }

    /// Canonical (name, tensor) listing; the order defines checkpoint and
    /// optimizer layout.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(d) = &self.dmrm {
            d.push_named(&mut out);
        }
        if let Some(f) = &self.fdfm {
            f.push_named(&mut out);
        }
        for (name, conv) in [
            ("fusion.conv1", &self.fusion.conv1),
            ("fusion.conv2", &self.fusion.conv2),
            ("fusion.conv3", &self.fusion.conv3),
            ("fusion.conv4", &self.fusion.conv4),
        ] {
            out.push((format!("{name}.w"), &conv.w));
            out.push((format!("{name}.b"), &conv.b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Some(d) = &mut self.dmrm {
            d.push_named_mut(&mut out);
        }
        if let Some(f) = &mut self.fdfm {
            f.push_named_mut(&mut out);
        }
        for (name, conv) in [
            ("fusion.conv1", &mut self.fusion.conv1),
            ("fusion.conv2", &mut self.fusion.conv2),
            ("fusion.conv3", &mut self.fusion.conv3),
            ("fusion.conv4", &mut self.fusion.conv4),
        ] {
            out.push((format!("{name}.w"), &mut conv.w));
            out.push((format!("{name}.b"), &mut conv.b));
        }
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph bindings of all parameters, in canonical order.
pub struct NetVars {
    config: NetConfig,
    dmrm: Option<dmrm::DmrmVars>,
    fdfm: Option<fdfm::FdfmVars>,
    fusion: FusionBlockVars,
    named: Vec<(String, VarId)>,
}

impl NetVars {
    /// Registers every parameter as a graph leaf.
    pub fn bind(g: &mut Graph, params: &FusionNetParams, trainable: bool) -> NetVars {
        let dmrm = params.dmrm.as_ref().map(|p| dmrm::DmrmVars::bind(g, p, trainable));
        let fdfm = params.fdfm.as_ref().map(|p| fdfm::FdfmVars::bind(g, p, trainable));
        let fusion = FusionBlockVars {
            conv1: ConvVars::bind(g, &params.fusion.conv1, trainable),
            conv2: ConvVars::bind(g, &params.fusion.conv2, trainable),
            conv3: ConvVars::bind(g, &params.fusion.conv3, trainable),
            conv4: ConvVars::bind(g, &params.fusion.conv4, trainable),
        };
        let mut named = Vec::new();
        if let Some(d) = &dmrm {
            d.push_named(&mut named);
        }
        if let Some(f) = &fdfm {
            f.push_named(&mut named);
        }
        for (name, conv) in [
            ("fusion.conv1", &fusion.conv1),
            ("fusion.conv2", &fusion.conv2),
            ("fusion.conv3", &fusion.conv3),
            ("fusion.conv4", &fusion.conv4),
        ] {
            named.push((format!("{name}.w"), conv.w));
            named.push((format!("{name}.b"), conv.b));
        }
        NetVars {
            config: params.config,
            dmrm,
            fdfm,
            fusion,
            named,
        }
    }

    /// (name, VarId) pairs matching [`FusionNetParams::named_tensors`] order.
    pub fn named_vars(&self) -> &[(String, VarId)] {
        &self.named
    }
}

/// Intermediate FDFM spectra, kept for the frequency-domain loss.
#[derive(Clone, Copy, Debug)]
pub struct FreqIntermediate {
    pub amp_f: VarId,
    pub pha_f: VarId,
}

/// Output of one network forward pass on the graph.
pub struct ForwardOutput {
    pub fused: VarId,
    pub freq: Option<FreqIntermediate>,
}

/// Runs the network on one registered (ir, vis luma) pair already on the
/// graph. Inputs are `[1,H,W]` in [0,1].
pub fn forward(g: &mut Graph, vars: &NetVars, ir: VarId, vis_y: VarId) -> Result<ForwardOutput> {
    let cfg = &vars.config;
    cfg.ablation.validate()?;
    {
        let (ci, hi, wi) = g.value(ir).chw()?;
        let (cv, hv, wv) = g.value(vis_y).chw()?;
        if ci != 1 || cv != 1 {
            return Err(Error::Dimension("network inputs must be single-channel".into()));
        }
        if (hi, wi) != (hv, wv) {
            return Err(Error::Registration(format!(
                "ir {}x{} vs vis {}x{}",
                wi, hi, wv, hv
            )));
        }
    }

    let mut features: Vec<VarId> = Vec::new();
    if let Some(dv) = &vars.dmrm {
        let (f_ir, f_vis) = dmrm::forward(g, dv, ir, vis_y)?;
        features.push(f_ir);
        features.push(f_vis);
    }
    let mut freq = None;
    if let Some(fv) = &vars.fdfm {
        let out = fdfm::forward(g, fv, cfg, ir, vis_y)?;
        features.push(out.f_fre);
        freq = Some(FreqIntermediate {
            amp_f: out.amp_f,
            pha_f: out.pha_f,
        });
    }

    let cat = g.concat_ch(&features)?;
    let slope = cfg.leaky_slope;
    let x1 = g.conv2d(cat, vars.fusion.conv1.w, vars.fusion.conv1.b, 1)?;
    let x1 = g.leaky_relu(x1, slope);
    let x2 = g.conv2d(x1, vars.fusion.conv2.w, vars.fusion.conv2.b, 1)?;
    let x2 = g.leaky_relu(x2, slope);
    let x3 = g.conv2d(x2, vars.fusion.conv3.w, vars.fusion.conv3.b, 1)?;
    let x3 = g.leaky_relu(x3, slope);
    let x4 = g.conv2d(x3, vars.fusion.conv4.w, vars.fusion.conv4.b, 1)?;
    let fused = g.sigmoid(x4);
    Ok(ForwardOutput { fused, freq })
}

/// Inference convenience: fused luma plane for a pair, no gradients.
pub fn infer(params: &FusionNetParams, pair: &ImagePair) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = NetVars::bind(&mut g, params, false);
    let ir = g.constant(pair.ir.clone());
    let vis = g.constant(pair.vis_y.clone());
    let out = forward(&mut g, &vars, ir, vis)?;
    Ok(g.value(out.fused).clone())
}

/// Fused luma recombined with the pair's chroma into an RGB image.
pub fn fuse_to_rgb(params: &FusionNetParams, pair: &ImagePair) -> Result<Tensor> {
    let fused_y = infer(params, pair)?;
    recombine_color(&fused_y, &pair.vis_cb, &pair.vis_cr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn test_pair(h: usize, w: usize, seed: u64) -> ImagePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ir = Tensor::from_fn(&[1, h, w], |_| rng.gen::<f32>());
        let vis = Tensor::from_fn(&[3, h, w], |_| rng.gen::<f32>());
        ImagePair::from_tensors(ir, vis, format!("t{}", seed)).unwrap()
    }

    fn small_config(ablation: AblationConfig) -> NetConfig {
        NetConfig {
            d: 8,
            c: 4,
            ablation,
            ..NetConfig::default()
        }
    }

    #[test]
    fn forward_output_is_inside_unit_interval() {
        let params = FusionNetParams::init(small_config(AblationConfig::default()), 0).unwrap();
        let pair = test_pair(12, 10, 1);
        let fused = infer(&params, &pair).unwrap();
        assert_eq!(fused.shape(), &[1, 12, 10]);
        let (lo, hi) = fused.min_max();
        assert!(lo > 0.0 && hi < 1.0, "range ({lo}, {hi})");
    }

    #[test]
    fn forward_preserves_odd_resolutions() {
        let params = FusionNetParams::init(small_config(AblationConfig::default()), 0).unwrap();
        let pair = test_pair(31, 17, 2);
        let fused = infer(&params, &pair).unwrap();
        assert_eq!(fused.shape(), &[1, 31, 17]);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = FusionNetParams::init(small_config(AblationConfig::default()), 3).unwrap();
        let pair = test_pair(16, 16, 4);
        let a = infer(&params, &pair).unwrap();
        let b = infer(&params, &pair).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ablation_rejects_empty_network() {
        let ablation = AblationConfig {
            use_dmrm: false,
            use_fdfm: false,
            use_lfre: false,
        };
        assert!(FusionNetParams::init(small_config(ablation), 0).is_err());
    }

    #[test]
    fn ablation_changes_param_count_exactly_by_branch() {
        let full = FusionNetParams::init(small_config(AblationConfig::default()), 0).unwrap();
        let no_fdfm = FusionNetParams::init(
            small_config(AblationConfig {
                use_fdfm: false,
                ..AblationConfig::default()
            }),
            0,
        )
        .unwrap();
        let fdfm_params = full.fdfm.as_ref().unwrap();
        let mut fdfm_count = 0;
        let mut sink: Vec<(String, &Tensor)> = Vec::new();
        fdfm_params.push_named(&mut sink);
        for (_, t) in &sink {
            fdfm_count += t.len();
        }
        // Removing FDFM also shrinks the first fusion conv from 3D to 2D input.
        let conv1_delta = full.fusion.conv1.count() - no_fdfm.fusion.conv1.count();
        assert_eq!(
            full.param_count() - no_fdfm.param_count(),
            fdfm_count + conv1_delta
        );
    }

    #[test]
    fn param_count_of_single_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = ConvParams::init(1, 1, 3, &mut rng);
        assert_eq!(conv.count(), 10);
    }

    #[test]
    fn default_param_count_near_reported_budget() {
        let params = FusionNetParams::init(NetConfig::default(), 0).unwrap();
        let count = params.param_count() as f64;
        // Soft budget: within a factor of two of 0.14 M.
        assert!(count > 0.07e6 && count < 0.28e6, "param count {}", count);
    }

    #[test]
    fn doubling_d_quadruples_dxd_conv_weights() {
        let params8 = FusionNetParams::init(small_config(AblationConfig::default()), 0).unwrap();
        let params16 = FusionNetParams::init(
            NetConfig {
                d: 16,
                c: 4,
                ..NetConfig::default()
            },
            0,
        )
        .unwrap();
        let w8 = params8.fusion.conv2.w.len();
        let w16 = params16.fusion.conv2.w.len();
        assert_eq!(w16, 4 * w8);
    }

    #[test]
    fn fuse_to_rgb_with_neutral_chroma_is_grayscale() {
        let params = FusionNetParams::init(small_config(AblationConfig::default()), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ir = Tensor::from_fn(&[1, 12, 12], |_| rng.gen::<f32>());
        let gray = Tensor::from_fn(&[1, 12, 12], |_| rng.gen::<f32>());
        let mut vis = Tensor::zeros(&[3, 12, 12]);
        for ch in 0..3 {
            for i in 0..144 {
                vis.data_mut()[ch * 144 + i] = gray.data()[i];
            }
        }
        let pair = ImagePair::from_tensors(ir, vis, "gray".into()).unwrap();
        let rgb = fuse_to_rgb(&params, &pair).unwrap();
        for i in 0..144 {
            let (r, g_, b) = (rgb.data()[i], rgb.data()[144 + i], rgb.data()[288 + i]);
            assert!((r - g_).abs() < 1.5 / 255.0);
            assert!((g_ - b).abs() < 1.5 / 255.0);
        }
    }

    #[test]
    fn fuse_to_rgb_stays_in_range() {
        let params = FusionNetParams::init(small_config(AblationConfig::default()), 7).unwrap();
        let pair = test_pair(16, 14, 8);
        let rgb = fuse_to_rgb(&params, &pair).unwrap();
        let (lo, hi) = rgb.min_max();
        assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
    }
}
