//! Dual-modality refinement: per-modality embedding followed by three
//! additive branches — gradient extraction (GEB), self-attention gating
//! (ATB), and a complementary branch gating the summed embeddings through
//! two separately parameterized ATBs.

use rand_chacha::ChaCha8Rng;

use super::{ConvParams, ConvVars};
use crate::graph::{Graph, VarId};
use crate::{Result, Tensor};

/// Parameters of the spatial branch. All convs are 3x3 same-padding.
#[derive(Clone, Debug)]
pub struct DmrmParams {
    /// 1 -> D embeddings, one per modality.
    pub embed_ir: ConvParams,
    pub embed_vis: ConvParams,
    /// D -> D conv applied after the Sobel gradient magnitude.
    pub geb_ir: ConvParams,
    pub geb_vis: ConvParams,
    /// D -> D attention gates on each modality's own embedding.
    pub atb_ir: ConvParams,
    pub atb_vis: ConvParams,
    /// Two untied gates over the summed embeddings, one feeding each output.
    pub atb_shared_ir: ConvParams,
    pub atb_shared_vis: ConvParams,
}

impl DmrmParams {
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        DmrmParams {
            embed_ir: ConvParams::init(d, 1, 3, rng),
            embed_vis: ConvParams::init(d, 1, 3, rng),
            geb_ir: ConvParams::init(d, d, 3, rng),
            geb_vis: ConvParams::init(d, d, 3, rng),
            atb_ir: ConvParams::init(d, d, 3, rng),
            atb_vis: ConvParams::init(d, d, 3, rng),
            atb_shared_ir: ConvParams::init(d, d, 3, rng),
            atb_shared_vis: ConvParams::init(d, d, 3, rng),
        }
    }

    fn layers(&self) -> [(&'static str, &ConvParams); 8] {
        [
            ("dmrm.embed_ir", &self.embed_ir),
            ("dmrm.embed_vis", &self.embed_vis),
            ("dmrm.geb_ir", &self.geb_ir),
            ("dmrm.geb_vis", &self.geb_vis),
            ("dmrm.atb_ir", &self.atb_ir),
            ("dmrm.atb_vis", &self.atb_vis),
            ("dmrm.atb_shared_ir", &self.atb_shared_ir),
            ("dmrm.atb_shared_vis", &self.atb_shared_vis),
        ]
    }

    pub(crate) fn push_named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, conv) in self.layers() {
            out.push((format!("{name}.w"), &conv.w));
            out.push((format!("{name}.b"), &conv.b));
        }
    }

    pub(crate) fn push_named_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (name, conv) in [
            ("dmrm.embed_ir", &mut self.embed_ir),
            ("dmrm.embed_vis", &mut self.embed_vis),
            ("dmrm.geb_ir", &mut self.geb_ir),
            ("dmrm.geb_vis", &mut self.geb_vis),
            ("dmrm.atb_ir", &mut self.atb_ir),
            ("dmrm.atb_vis", &mut self.atb_vis),
            ("dmrm.atb_shared_ir", &mut self.atb_shared_ir),
            ("dmrm.atb_shared_vis", &mut self.atb_shared_vis),
        ] {
            out.push((format!("{name}.w"), &mut conv.w));
            out.push((format!("{name}.b"), &mut conv.b));
        }
    }
}

pub(crate) struct DmrmVars {
    embed_ir: ConvVars,
    embed_vis: ConvVars,
    geb_ir: ConvVars,
    geb_vis: ConvVars,
    atb_ir: ConvVars,
    atb_vis: ConvVars,
    atb_shared_ir: ConvVars,
    atb_shared_vis: ConvVars,
}

impl DmrmVars {
    pub(crate) fn bind(g: &mut Graph, p: &DmrmParams, trainable: bool) -> Self {
        DmrmVars {
            embed_ir: ConvVars::bind(g, &p.embed_ir, trainable),
            embed_vis: ConvVars::bind(g, &p.embed_vis, trainable),
            geb_ir: ConvVars::bind(g, &p.geb_ir, trainable),
            geb_vis: ConvVars::bind(g, &p.geb_vis, trainable),
            atb_ir: ConvVars::bind(g, &p.atb_ir, trainable),
            atb_vis: ConvVars::bind(g, &p.atb_vis, trainable),
            atb_shared_ir: ConvVars::bind(g, &p.atb_shared_ir, trainable),
            atb_shared_vis: ConvVars::bind(g, &p.atb_shared_vis, trainable),
        }
    }

    pub(crate) fn push_named(&self, out: &mut Vec<(String, VarId)>) {
        for (name, conv) in [
            ("dmrm.embed_ir", &self.embed_ir),
            ("dmrm.embed_vis", &self.embed_vis),
            ("dmrm.geb_ir", &self.geb_ir),
            ("dmrm.geb_vis", &self.geb_vis),
            ("dmrm.atb_ir", &self.atb_ir),
            ("dmrm.atb_vis", &self.atb_vis),
            ("dmrm.atb_shared_ir", &self.atb_shared_ir),
            ("dmrm.atb_shared_vis", &self.atb_shared_vis),
        ] {
            out.push((format!("{name}.w"), conv.w));
            out.push((format!("{name}.b"), conv.b));
        }
    }
}

/// `ReLU(Conv(x))`: lifts a single-channel image to D feature channels.
pub fn embed(g: &mut Graph, x: VarId, conv: &ConvVars) -> Result<VarId> {
    let y = g.conv2d(x, conv.w, conv.b, 1)?;
    Ok(g.relu(y))
}

/// Gradient extraction block: `Conv(|sobel_x(f)| + |sobel_y(f)|)`.
pub fn geb(g: &mut Graph, f: VarId, conv: &ConvVars) -> Result<VarId> {
    let (gx, gy) = g.sobel_xy(f)?;
    let ax = g.abs(gx);
    let ay = g.abs(gy);
    let mag = g.add(ax, ay)?;
    g.conv2d(mag, conv.w, conv.b, 1)
}

/// Attention block: `f * sigmoid(Conv(f))`.
pub fn atb(g: &mut Graph, f: VarId, conv: &ConvVars) -> Result<VarId> {
    let gate = g.conv2d(f, conv.w, conv.b, 1)?;
    let gate = g.sigmoid(gate);
    g.mul(f, gate)
}

/// Full spatial branch: refined IR and VIS feature maps `[D,H,W]`.
pub(crate) fn forward(
    g: &mut Graph,
    vars: &DmrmVars,
    ir: VarId,
    vis_y: VarId,
) -> Result<(VarId, VarId)> {
    let f_ir = embed(g, ir, &vars.embed_ir)?;
    let f_vis = embed(g, vis_y, &vars.embed_vis)?;
    let summed = g.add(f_ir, f_vis)?;

    let ir_geb = geb(g, f_ir, &vars.geb_ir)?;
    let ir_atb = atb(g, f_ir, &vars.atb_ir)?;
    let ir_comp = atb(g, summed, &vars.atb_shared_ir)?;
    let t = g.add(ir_geb, ir_atb)?;
    let out_ir = g.add(t, ir_comp)?;

    let vis_geb = geb(g, f_vis, &vars.geb_vis)?;
    let vis_atb = atb(g, f_vis, &vars.atb_vis)?;
    let vis_comp = atb(g, summed, &vars.atb_shared_vis)?;
    let t = g.add(vis_geb, vis_atb)?;
    let out_vis = g.add(t, vis_comp)?;

    Ok((out_ir, out_vis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::oracle;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0f32))
    }

    #[test]
    fn embed_of_zero_image_with_zero_bias_is_zero() {
        let mut r = rng(1);
        let params = ConvParams::init(4, 1, 3, &mut r);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 6, 6]));
        let conv = ConvVars::bind(&mut g, &params, false);
        let y = embed(&mut g, x, &conv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_output_is_nonnegative() {
        let mut r = rng(2);
        let params = ConvParams::init(4, 1, 3, &mut r);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 6, 6], |_| r.gen::<f32>()));
        let conv = ConvVars::bind(&mut g, &params, false);
        let y = embed(&mut g, x, &conv).unwrap();
        let (lo, _) = g.value(y).min_max();
        assert!(lo >= 0.0);
    }

    #[test]
    fn embed_matches_conv_then_relu_composition() {
        let mut r = rng(3);
        let params = ConvParams::init(3, 1, 3, &mut r);
        let x = Tensor::from_fn(&[1, 5, 5], |_| r.gen_range(-1.0..1.0f32));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let conv = ConvVars::bind(&mut g, &params, false);
        let y = embed(&mut g, xv, &conv).unwrap();
        // Bit-exact against the composed primitives.
        let pre = g.conv2d(xv, conv.w, conv.b, 1).unwrap();
        let composed = g.relu(pre);
        assert_eq!(g.value(y).data(), g.value(composed).data());
        // And against the independent loop oracle within float tolerance.
        let reference = oracle::conv2d_reference(&x, &params.w, &params.b, 1).map(|v| v.max(0.0));
        for i in 0..reference.len() {
            assert!((g.value(y).data()[i] - reference.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn geb_on_constant_field_is_bias_response() {
        let mut r = rng(4);
        let params = ConvParams::init(2, 2, 3, &mut r);
        let mut g = Graph::new();
        let f = g.constant(Tensor::filled(&[2, 7, 7], 0.5));
        let conv = ConvVars::bind(&mut g, &params, false);
        let y = geb(&mut g, f, &conv).unwrap();
        // The Sobel magnitude of a flat field is zero away from the border,
        // so interior outputs equal the conv bias.
        let v = g.value(y);
        for ch in 0..2 {
            for i in 2..5 {
                for j in 2..5 {
                    let got = v.data()[(ch * 7 + i) * 7 + j];
                    assert!((got - params.b.data()[ch]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn geb_matches_chained_oracle() {
        let mut r = rng(5);
        let params = ConvParams::init(2, 2, 3, &mut r);
        let f = random_tensor(&[2, 6, 6], &mut r);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let conv = ConvVars::bind(&mut g, &params, false);
        let y = geb(&mut g, fv, &conv).unwrap();
        let (gx, gy) = oracle::sobel_reference(&f);
        let mag = Tensor::from_fn(f.shape(), |i| gx.data()[i].abs() + gy.data()[i].abs());
        let reference = oracle::conv2d_reference(&mag, &params.w, &params.b, 1);
        for i in 0..g.value(y).len() {
            assert!((g.value(y).data()[i] - reference.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn atb_of_zero_input_is_zero() {
        let mut r = rng(6);
        let params = ConvParams::init(2, 2, 3, &mut r);
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[2, 5, 5]));
        let conv = ConvVars::bind(&mut g, &params, false);
        let y = atb(&mut g, f, &conv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn atb_with_zero_conv_is_half_gate() {
        let params = ConvParams {
            w: Tensor::zeros(&[2, 2, 3, 3]),
            b: Tensor::zeros(&[2]),
        };
        let mut r = rng(7);
        let f = random_tensor(&[2, 5, 5], &mut r);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let conv = ConvVars::bind(&mut g, &params, false);
        let y = atb(&mut g, fv, &conv).unwrap();
        for i in 0..f.len() {
            assert!((g.value(y).data()[i] - 0.5 * f.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn atb_gating_bound_holds() {
        let mut r = rng(8);
        for seed in 0..5 {
            let params = ConvParams::init(3, 3, 3, &mut rng(100 + seed));
            let f = random_tensor(&[3, 6, 6], &mut r);
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let conv = ConvVars::bind(&mut g, &params, false);
            let y = atb(&mut g, fv, &conv).unwrap();
            for i in 0..f.len() {
                assert!(g.value(y).data()[i].abs() <= f.data()[i].abs() + 1e-7);
            }
        }
    }

    #[test]
    fn forward_zero_inputs_zero_biases_is_zero() {
        let mut params = DmrmParams::init(4, &mut rng(9));
        for (_, t) in [
            &mut params.embed_ir.b,
            &mut params.embed_vis.b,
            &mut params.geb_ir.b,
            &mut params.geb_vis.b,
            &mut params.atb_ir.b,
            &mut params.atb_vis.b,
            &mut params.atb_shared_ir.b,
            &mut params.atb_shared_vis.b,
        ]
        .into_iter()
        .enumerate()
        {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let vars = DmrmVars::bind(&mut g, &params, false);
        let zero = g.constant(Tensor::zeros(&[1, 6, 6]));
        let (f_ir, f_vis) = forward(&mut g, &vars, zero, zero).unwrap();
        assert!(g.value(f_ir).data().iter().all(|&v| v == 0.0));
        assert!(g.value(f_vis).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shape_contract() {
        let params = DmrmParams::init(4, &mut rng(10));
        let mut g = Graph::new();
        let vars = DmrmVars::bind(&mut g, &params, false);
        let mut r = rng(11);
        let ir = g.constant(Tensor::from_fn(&[1, 9, 5], |_| r.gen::<f32>()));
        let vis = g.constant(Tensor::from_fn(&[1, 9, 5], |_| r.gen::<f32>()));
        let (f_ir, f_vis) = forward(&mut g, &vars, ir, vis).unwrap();
        assert_eq!(g.value(f_ir).shape(), &[4, 9, 5]);
        assert_eq!(g.value(f_vis).shape(), &[4, 9, 5]);
    }

    #[test]
    fn forward_equals_sum_of_isolated_branches() {
        let params = DmrmParams::init(4, &mut rng(12));
        let mut r = rng(13);
        let ir = Tensor::from_fn(&[1, 6, 6], |_| r.gen::<f32>());
        let vis = Tensor::from_fn(&[1, 6, 6], |_| r.gen::<f32>());

        let mut g = Graph::new();
        let vars = DmrmVars::bind(&mut g, &params, false);
        let irv = g.constant(ir.clone());
        let visv = g.constant(vis.clone());
        let (f_ir, _) = forward(&mut g, &vars, irv, visv).unwrap();
        let combined = g.value(f_ir).clone();

        // Each branch recomputed in isolation.
        let mut g2 = Graph::new();
        let vars2 = DmrmVars::bind(&mut g2, &params, false);
        let irv2 = g2.constant(ir);
        let visv2 = g2.constant(vis);
        let e_ir = embed(&mut g2, irv2, &vars2.embed_ir).unwrap();
        let e_vis = embed(&mut g2, visv2, &vars2.embed_vis).unwrap();
        let summed = g2.add(e_ir, e_vis).unwrap();
        let b1 = geb(&mut g2, e_ir, &vars2.geb_ir).unwrap();
        let b2 = atb(&mut g2, e_ir, &vars2.atb_ir).unwrap();
        let b3 = atb(&mut g2, summed, &vars2.atb_shared_ir).unwrap();
        for i in 0..combined.len() {
            let expect =
                g2.value(b1).data()[i] + g2.value(b2).data()[i] + g2.value(b3).data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-6);
        }
    }
}
