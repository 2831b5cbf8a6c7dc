//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops evaluate eagerly and append one tape node per primitive when any
//! input participates in a gradient. [`Graph::backward`] walks the tape in
//! reverse exactly once, accumulating gradients into every `requires_grad`
//! leaf. Values are immutable once produced; the tape is single-writer, so
//! repeated evaluation of the same construction is bit-deterministic.

use num_complex::Complex64;

use crate::fft::fft2_c64;
use crate::{Error, Result, Tensor};

/// Handle to a value stored in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// Epsilon added to squared magnitudes in amplitude/phase gradients.
const POLAR_EPS: f32 = 1e-8;
/// Expm1 saturates above this input to keep amplitudes finite in f32.
const EXPM1_CLAMP: f32 = 30.0;

#[derive(Clone, Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    MaxElem,
    ScalarAdd(f32),
    ScalarMul(f32),
    Abs,
    Relu,
    LeakyRelu(f32),
    Sigmoid,
    Sqrt,
    Log1p,
    Expm1,
    Sum,
    Mean,
    Conv2d { padding: usize },
    SobelXY,
    ConcatCh,
    ChannelMax,
    ChannelMean,
    Fft2,
    ComplexAbs,
    ComplexAngle,
    PolarIfft2,
}

struct Node {
    op: Op,
    inputs: Vec<VarId>,
    outputs: Vec<VarId>,
}

/// Autodiff tape: values plus the ordered record of ops that produced them.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f32>>>,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Registers a leaf value. Leaves with `requires_grad` receive a
    /// populated gradient after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        debug_assert!(value.all_finite(), "non-finite leaf");
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        self.needs_grad.push(requires_grad);
        self.grads.push(None);
        VarId(self.values.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f32) -> VarId {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of `id` as a tensor, if one was populated by `backward`.
    pub fn grad(&self, id: VarId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[id.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push_result(&mut self, value: Tensor, needs: bool) -> VarId {
        debug_assert!(value.all_finite(), "op produced non-finite value");
        self.values.push(value);
        self.requires_grad.push(false);
        self.needs_grad.push(needs);
        self.grads.push(None);
        VarId(self.values.len() - 1)
    }

    fn record(&mut self, op: Op, inputs: Vec<VarId>, outputs: Vec<VarId>) {
        self.nodes.push(Node {
            op,
            inputs,
            outputs,
        });
    }

    fn any_needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.needs_grad[id.0])
    }

    // ---- binary elementwise -------------------------------------------------

    fn binary(&mut self, op: Op, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let out = eval_binary(&op, ta, tb)?;
        let needs = self.any_needs(&[a, b]);
        let id = self.push_result(out, needs);
        if needs {
            self.record(op, vec![a, b], vec![id]);
        }
        Ok(id)
    }

    /// Elementwise `a + b`; either side may be a 1-element scalar.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Div, a, b)
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn max_elem(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::MaxElem, a, b)
    }

    // ---- unary elementwise --------------------------------------------------

    fn unary(&mut self, op: Op, a: VarId) -> VarId {
        let out = eval_unary(&op, &self.values[a.0]);
        let needs = self.needs_grad[a.0];
        let id = self.push_result(out, needs);
        if needs {
            self.record(op, vec![a], vec![id]);
        }
        id
    }

    pub fn add_scalar(&mut self, a: VarId, c: f32) -> VarId {
        self.unary(Op::ScalarAdd(c), a)
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f32) -> VarId {
        self.unary(Op::ScalarMul(c), a)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(Op::Abs, a)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        self.unary(Op::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f32) -> VarId {
        self.unary(Op::LeakyRelu(slope), a)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        self.unary(Op::Sigmoid, a)
    }

    /// Elementwise square root; inputs are expected nonnegative (callers add
    /// an epsilon) and the gradient is floored away from the 0 singularity.
    pub fn sqrt(&mut self, a: VarId) -> VarId {
        self.unary(Op::Sqrt, a)
    }

    pub fn log1p(&mut self, a: VarId) -> VarId {
        self.unary(Op::Log1p, a)
    }

    /// `exp(x) - 1` with the input saturated at 30 so f32 stays finite.
    pub fn expm1(&mut self, a: VarId) -> VarId {
        self.unary(Op::Expm1, a)
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, a: VarId) -> VarId {
        self.unary(Op::Sum, a)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        self.unary(Op::Mean, a)
    }

    // ---- structured ops -------------------------------------------------------

    /// 2D convolution of `x` `[C_in,H,W]` with `weight` `[C_out,C_in,K,K]`
    /// plus `bias` `[C_out]`, zero padding on all sides.
    pub fn conv2d(&mut self, x: VarId, weight: VarId, bias: VarId, padding: usize) -> Result<VarId> {
        let out = conv2d_forward(
            &self.values[x.0],
            &self.values[weight.0],
            &self.values[bias.0],
            padding,
        )?;
        let needs = self.any_needs(&[x, weight, bias]);
        let id = self.push_result(out, needs);
        if needs {
            self.record(Op::Conv2d { padding }, vec![x, weight, bias], vec![id]);
        }
        Ok(id)
    }

    /// Per-channel Sobel responses in X and Y, replicate same-padding.
    pub fn sobel_xy(&mut self, x: VarId) -> Result<(VarId, VarId)> {
        let v = &self.values[x.0];
        let (_, h, w) = v.chw()?;
        if h < 3 || w < 3 {
            return Err(Error::Dimension(format!(
                "sobel_xy needs H,W >= 3, got {}x{}",
                h, w
            )));
        }
        let gx = depthwise3x3(v, &SOBEL_X);
        let gy = depthwise3x3(v, &SOBEL_Y);
        let needs = self.needs_grad[x.0];
        let gx_id = self.push_result(gx, needs);
        let gy_id = self.push_result(gy, needs);
        if needs {
            self.record(Op::SobelXY, vec![x], vec![gx_id, gy_id]);
        }
        Ok((gx_id, gy_id))
    }

    /// Concatenates `[C_i,H,W]` tensors along the channel axis.
    pub fn concat_ch(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_ch of zero tensors".into()));
        }
        let (_, h0, w0) = self.values[parts[0].0].chw()?;
        let mut total_c = 0;
        for &p in parts {
            let (c, h, w) = self.values[p.0].chw()?;
            if (h, w) != (h0, w0) {
                return Err(Error::Dimension(format!(
                    "concat_ch spatial mismatch: {}x{} vs {}x{}",
                    h, w, h0, w0
                )));
            }
            total_c += c;
        }
        let mut data = Vec::with_capacity(total_c * h0 * w0);
        for &p in parts {
            data.extend_from_slice(self.values[p.0].data());
        }
        let out = Tensor::new(vec![total_c, h0, w0], data)?;
        let needs = self.any_needs(parts);
        let id = self.push_result(out, needs);
        if needs {
            self.record(Op::ConcatCh, parts.to_vec(), vec![id]);
        }
        Ok(id)
    }

    /// Per-pixel max over channels, `[C,H,W] -> [1,H,W]`.
    pub fn channel_max(&mut self, x: VarId) -> Result<VarId> {
        let v = &self.values[x.0];
        let (c, h, w) = v.chw()?;
        let plane = h * w;
        let mut data = v.data()[..plane].to_vec();
        for ch in 1..c {
            for i in 0..plane {
                let cand = v.data()[ch * plane + i];
                if cand > data[i] {
                    data[i] = cand;
                }
            }
        }
        let out = Tensor::new(vec![1, h, w], data)?;
        let needs = self.needs_grad[x.0];
        let id = self.push_result(out, needs);
        if needs {
            self.record(Op::ChannelMax, vec![x], vec![id]);
        }
        Ok(id)
    }

    /// Per-pixel mean over channels, `[C,H,W] -> [1,H,W]`.
    pub fn channel_mean(&mut self, x: VarId) -> Result<VarId> {
        let v = &self.values[x.0];
        let (c, h, w) = v.chw()?;
        let plane = h * w;
        let mut data = vec![0.0f32; plane];
        for ch in 0..c {
            for i in 0..plane {
                data[i] += v.data()[ch * plane + i];
            }
        }
        let inv = 1.0 / c as f32;
        for d in &mut data {
            *d *= inv;
        }
        let out = Tensor::new(vec![1, h, w], data)?;
        let needs = self.needs_grad[x.0];
        let id = self.push_result(out, needs);
        if needs {
            self.record(Op::ChannelMean, vec![x], vec![id]);
        }
        Ok(id)
    }

    /// Unnormalized forward 2D DFT of a real plane; returns (re, im).
    pub fn fft2(&mut self, x: VarId) -> Result<(VarId, VarId)> {
        let v = &self.values[x.0];
        let (c, h, w) = v.chw()?;
        if c != 1 {
            return Err(Error::Dimension("fft2 expects one channel".into()));
        }
        let mut buf: Vec<Complex64> = v
            .data()
            .iter()
            .map(|&x| Complex64::new(x as f64, 0.0))
            .collect();
        fft2_c64(&mut buf, h, w, false);
        let shape = v.shape().to_vec();
        let re = Tensor::new(shape.clone(), buf.iter().map(|z| z.re as f32).collect())?;
        let im = Tensor::new(shape, buf.iter().map(|z| z.im as f32).collect())?;
        let needs = self.needs_grad[x.0];
        let re_id = self.push_result(re, needs);
        let im_id = self.push_result(im, needs);
        if needs {
            self.record(Op::Fft2, vec![x], vec![re_id, im_id]);
        }
        Ok((re_id, im_id))
    }

    /// `sqrt(re^2 + im^2)`; the gradient uses an epsilon-guarded magnitude.
    pub fn complex_abs(&mut self, re: VarId, im: VarId) -> Result<VarId> {
        self.binary(Op::ComplexAbs, re, im)
    }

    /// `atan2(im, re)` in (-pi, pi], 0 at the origin; epsilon-guarded gradient.
    pub fn complex_angle(&mut self, re: VarId, im: VarId) -> Result<VarId> {
        self.binary(Op::ComplexAngle, re, im)
    }

    /// Real part of the normalized inverse DFT of `amp * exp(i * pha)`.
    pub fn polar_ifft2(&mut self, amp: VarId, pha: VarId) -> Result<VarId> {
        let (ta, tp) = (&self.values[amp.0], &self.values[pha.0]);
        if ta.shape() != tp.shape() {
            return Err(Error::Dimension(format!(
                "polar_ifft2 amp {:?} vs pha {:?}",
                ta.shape(),
                tp.shape()
            )));
        }
        let (c, h, w) = ta.chw()?;
        if c != 1 {
            return Err(Error::Dimension("polar_ifft2 expects one channel".into()));
        }
        let mut buf: Vec<Complex64> = ta
            .data()
            .iter()
            .zip(tp.data())
            .map(|(&a, &p)| {
                let (a, p) = (a as f64, p as f64);
                Complex64::new(a * p.cos(), a * p.sin())
            })
            .collect();
        fft2_c64(&mut buf, h, w, true);
        let norm = 1.0 / (h * w) as f64;
        let out = Tensor::new(
            ta.shape().to_vec(),
            buf.iter().map(|z| (z.re * norm) as f32).collect(),
        )?;
        let needs = self.any_needs(&[amp, pha]);
        let id = self.push_result(out, needs);
        if needs {
            self.record(Op::PolarIfft2, vec![amp, pha], vec![id]);
        }
        Ok(id)
    }

    // ---- backward -------------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every `requires_grad` leaf. The
    /// tape is traversed once, in reverse recording order; leaves the loss
    /// does not reach receive zero gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for ni in (0..self.nodes.len()).rev() {
            let node = &self.nodes[ni];
            let gouts: Vec<Option<Vec<f32>>> = node
                .outputs
                .iter()
                .map(|id| self.grads[id.0].take())
                .collect();
            if gouts.iter().all(Option::is_none) {
                continue;
            }
            backward_node(
                &self.values,
                &self.needs_grad,
                &mut self.grads,
                &node.op,
                &node.inputs,
                &gouts,
            )?;
        }

        for i in 0..self.values.len() {
            if self.requires_grad[i] && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.values[i].len()]);
            }
        }
        Ok(())
    }
}

type GradStore = [Option<Vec<f32>>];

fn accum(values: &[Tensor], grads: &mut GradStore, id: VarId, contribution: &[f32]) {
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; values[id.0].len()]);
    debug_assert_eq!(slot.len(), contribution.len());
    for (g, &c) in slot.iter_mut().zip(contribution) {
        *g += c;
    }
}

/// Accumulates a full-size contribution, reducing to one slot when the
/// target is a broadcast scalar.
fn accum_reduced(values: &[Tensor], grads: &mut GradStore, id: VarId, contrib: &[f32]) {
    if values[id.0].is_scalar() && contrib.len() > 1 {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; 1]);
        slot[0] += contrib.iter().sum::<f32>();
    } else {
        accum(values, grads, id, contrib);
    }
}

fn backward_node(
    values: &[Tensor],
    needs_grad: &[bool],
    grads: &mut GradStore,
    op: &Op,
    inputs: &[VarId],
    gouts: &[Option<Vec<f32>>],
) -> Result<()> {
    let g = gouts[0].as_deref();
    match op {
        Op::Add | Op::Sub => {
            let g = g.expect("binary grad");
            let sign_b = if matches!(op, Op::Sub) { -1.0 } else { 1.0 };
            for (k, &id) in inputs.iter().enumerate() {
                if !needs_grad[id.0] {
                    continue;
                }
                let sign = if k == 0 { 1.0 } else { sign_b };
                if sign == 1.0 {
                    accum_reduced(values, grads, id, g);
                } else {
                    let contrib: Vec<f32> = g.iter().map(|&v| -v).collect();
                    accum_reduced(values, grads, id, &contrib);
                }
            }
        }
        Op::Mul => {
            let g = g.expect("mul grad");
            let (a, b) = (inputs[0], inputs[1]);
            if needs_grad[a.0] {
                let vb = values[b.0].data();
                let contrib: Vec<f32> = (0..g.len()).map(|i| g[i] * pick(vb, i)).collect();
                accum_reduced(values, grads, a, &contrib);
            }
            if needs_grad[b.0] {
                let va = values[a.0].data();
                let contrib: Vec<f32> = (0..g.len()).map(|i| g[i] * pick(va, i)).collect();
                accum_reduced(values, grads, b, &contrib);
            }
        }
        Op::Div => {
            let g = g.expect("div grad");
            let (a, b) = (inputs[0], inputs[1]);
            let n = g.len();
            if needs_grad[a.0] {
                let vb = values[b.0].data();
                let contrib: Vec<f32> = (0..n).map(|i| g[i] / pick(vb, i)).collect();
                accum_reduced(values, grads, a, &contrib);
            }
            if needs_grad[b.0] {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                let contrib: Vec<f32> = (0..n)
                    .map(|i| {
                        let bi = pick(vb, i);
                        -g[i] * pick(va, i) / (bi * bi)
                    })
                    .collect();
                accum_reduced(values, grads, b, &contrib);
            }
        }
        Op::MaxElem => {
            let g = g.expect("max grad");
            let (a, b) = (inputs[0], inputs[1]);
            let (va, vb) = (values[a.0].data(), values[b.0].data());
            let n = g.len();
            if needs_grad[a.0] {
                let contrib: Vec<f32> = (0..n)
                    .map(|i| if pick(va, i) >= pick(vb, i) { g[i] } else { 0.0 })
                    .collect();
                accum_reduced(values, grads, a, &contrib);
            }
            if needs_grad[b.0] {
                let contrib: Vec<f32> = (0..n)
                    .map(|i| if pick(va, i) >= pick(vb, i) { 0.0 } else { g[i] })
                    .collect();
                accum_reduced(values, grads, b, &contrib);
            }
        }
        Op::ScalarAdd(_) => {
            let g = g.expect("grad");
            if needs_grad[inputs[0].0] {
                accum(values, grads, inputs[0], g);
            }
        }
        Op::ScalarMul(c) => {
            let g = g.expect("grad");
            if needs_grad[inputs[0].0] {
                let contrib: Vec<f32> = g.iter().map(|&v| v * c).collect();
                accum(values, grads, inputs[0], &contrib);
            }
        }
        Op::Abs | Op::Relu | Op::LeakyRelu(_) | Op::Sigmoid | Op::Sqrt | Op::Log1p | Op::Expm1 => {
            let g = g.expect("grad");
            let a = inputs[0];
            if !needs_grad[a.0] {
                return Ok(());
            }
            let va = values[a.0].data();
            let contrib: Vec<f32> = match op {
                Op::Abs => va
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        if x > 0.0 {
                            gy
                        } else if x < 0.0 {
                            -gy
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                Op::Relu => va
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                    .collect(),
                Op::LeakyRelu(s) => va
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { s * gy })
                    .collect(),
                Op::Sigmoid => va
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let y = sigmoid(x);
                        gy * y * (1.0 - y)
                    })
                    .collect(),
                Op::Sqrt => va
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| gy * 0.5 / x.max(1e-12).sqrt())
                    .collect(),
                Op::Log1p => va.iter().zip(g).map(|(&x, &gy)| gy / (1.0 + x)).collect(),
                Op::Expm1 => va
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x < EXPM1_CLAMP { gy * x.exp() } else { 0.0 })
                    .collect(),
                _ => unreachable!(),
            };
            accum(values, grads, a, &contrib);
        }
        Op::Sum => {
            let gy = gouts[0].as_ref().expect("grad")[0];
            let a = inputs[0];
            if needs_grad[a.0] {
                let contrib = vec![gy; values[a.0].len()];
                accum(values, grads, a, &contrib);
            }
        }
        Op::Mean => {
            let gy = gouts[0].as_ref().expect("grad")[0];
            let a = inputs[0];
            if needs_grad[a.0] {
                let n = values[a.0].len();
                let contrib = vec![gy / n as f32; n];
                accum(values, grads, a, &contrib);
            }
        }
        Op::Conv2d { padding } => {
            let g = g.expect("conv grad");
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (gx, gw, gb) = conv2d_backward(
                &values[x.0],
                &values[w.0],
                g,
                *padding,
                needs_grad[x.0],
                needs_grad[w.0],
                needs_grad[b.0],
            )?;
            if let Some(gx) = gx {
                accum(values, grads, x, &gx);
            }
            if let Some(gw) = gw {
                accum(values, grads, w, &gw);
            }
            if let Some(gb) = gb {
                accum(values, grads, b, &gb);
            }
        }
        Op::SobelXY => {
            let x = inputs[0];
            if !needs_grad[x.0] {
                return Ok(());
            }
            let (c, h, w) = values[x.0].chw()?;
            let mut total = vec![0.0f32; values[x.0].len()];
            // Adjoint of the replicate-padded correlation: scatter each
            // output gradient back onto the clamped source pixel.
            for (gout, kernel) in gouts.iter().zip([&SOBEL_X, &SOBEL_Y]) {
                if let Some(gv) = gout {
                    for ch in 0..c {
                        let gplane = &gv[ch * h * w..(ch + 1) * h * w];
                        let dst = &mut total[ch * h * w..(ch + 1) * h * w];
                        for (k, &coef) in kernel.iter().enumerate() {
                            if coef == 0.0 {
                                continue;
                            }
                            let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                            for i in 0..h {
                                let si = (i as isize + dy).clamp(0, h as isize - 1) as usize;
                                for j in 0..w {
                                    let sj = (j as isize + dx).clamp(0, w as isize - 1) as usize;
                                    dst[si * w + sj] += coef * gplane[i * w + j];
                                }
                            }
                        }
                    }
                }
            }
            accum(values, grads, x, &total);
        }
        Op::ConcatCh => {
            let g = g.expect("concat grad");
            let (_, h, w) = values[inputs[0].0].chw()?;
            let plane = h * w;
            let mut offset = 0;
            for &p in inputs {
                let (c, _, _) = values[p.0].chw()?;
                let span = c * plane;
                if needs_grad[p.0] {
                    accum(values, grads, p, &g[offset..offset + span]);
                }
                offset += span;
            }
        }
        Op::ChannelMax => {
            let g = g.expect("grad");
            let x = inputs[0];
            if !needs_grad[x.0] {
                return Ok(());
            }
            let v = values[x.0].data();
            let (c, h, w) = values[x.0].chw()?;
            let plane = h * w;
            let mut contrib = vec![0.0f32; v.len()];
            for i in 0..plane {
                let mut best = 0usize;
                for ch in 1..c {
                    if v[ch * plane + i] > v[best * plane + i] {
                        best = ch;
                    }
                }
                contrib[best * plane + i] = g[i];
            }
            accum(values, grads, x, &contrib);
        }
        Op::ChannelMean => {
            let g = g.expect("grad");
            let x = inputs[0];
            if !needs_grad[x.0] {
                return Ok(());
            }
            let (c, h, w) = values[x.0].chw()?;
            let plane = h * w;
            let inv = 1.0 / c as f32;
            let mut contrib = vec![0.0f32; c * plane];
            for ch in 0..c {
                for i in 0..plane {
                    contrib[ch * plane + i] = g[i] * inv;
                }
            }
            accum(values, grads, x, &contrib);
        }
        Op::Fft2 => {
            let x = inputs[0];
            if !needs_grad[x.0] {
                return Ok(());
            }
            let (_, h, w) = values[x.0].chw()?;
            let zero = vec![0.0f32; h * w];
            let gre = gouts[0].as_deref().unwrap_or(&zero);
            let gim = gouts[1].as_deref().unwrap_or(&zero);
            // DFT is linear: the pullback is the unnormalized inverse
            // transform of (g_re + i*g_im), real part.
            let mut buf: Vec<Complex64> = gre
                .iter()
                .zip(gim)
                .map(|(&re, &im)| Complex64::new(re as f64, im as f64))
                .collect();
            fft2_c64(&mut buf, h, w, true);
            let contrib: Vec<f32> = buf.iter().map(|z| z.re as f32).collect();
            accum(values, grads, x, &contrib);
        }
        Op::ComplexAbs => {
            let g = g.expect("grad");
            let (re, im) = (inputs[0], inputs[1]);
            let (vre, vim) = (values[re.0].data(), values[im.0].data());
            let denom = |i: usize| (vre[i] * vre[i] + vim[i] * vim[i] + POLAR_EPS).sqrt();
            if needs_grad[re.0] {
                let contrib: Vec<f32> = (0..g.len()).map(|i| g[i] * vre[i] / denom(i)).collect();
                accum(values, grads, re, &contrib);
            }
            if needs_grad[im.0] {
                let contrib: Vec<f32> = (0..g.len()).map(|i| g[i] * vim[i] / denom(i)).collect();
                accum(values, grads, im, &contrib);
            }
        }
        Op::ComplexAngle => {
            let g = g.expect("grad");
            let (re, im) = (inputs[0], inputs[1]);
            let (vre, vim) = (values[re.0].data(), values[im.0].data());
            let denom = |i: usize| vre[i] * vre[i] + vim[i] * vim[i] + POLAR_EPS;
            if needs_grad[re.0] {
                let contrib: Vec<f32> = (0..g.len()).map(|i| -g[i] * vim[i] / denom(i)).collect();
                accum(values, grads, re, &contrib);
            }
            if needs_grad[im.0] {
                let contrib: Vec<f32> = (0..g.len()).map(|i| g[i] * vre[i] / denom(i)).collect();
                accum(values, grads, im, &contrib);
            }
        }
        Op::PolarIfft2 => {
            let g = g.expect("grad");
            let (amp, pha) = (inputs[0], inputs[1]);
            let (_, h, w) = values[amp.0].chw()?;
            // y = Re(IDFT(z))/HW with z = amp*exp(i*pha). The pullback of
            // the linear Re-IDFT is a forward FFT of the output gradient;
            // the polar factors chain through cos/sin.
            let mut buf: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
            fft2_c64(&mut buf, h, w, false);
            let norm = 1.0 / (h * w) as f64;
            let va = values[amp.0].data();
            let vp = values[pha.0].data();
            if needs_grad[amp.0] {
                let contrib: Vec<f32> = (0..g.len())
                    .map(|i| {
                        let (c, s) = ((vp[i] as f64).cos(), (vp[i] as f64).sin());
                        ((buf[i].re * c + buf[i].im * s) * norm) as f32
                    })
                    .collect();
                accum(values, grads, amp, &contrib);
            }
            if needs_grad[pha.0] {
                let contrib: Vec<f32> = (0..g.len())
                    .map(|i| {
                        let (c, s) = ((vp[i] as f64).cos(), (vp[i] as f64).sin());
                        let a = va[i] as f64;
                        ((-buf[i].re * s + buf[i].im * c) * a * norm) as f32
                    })
                    .collect();
                accum(values, grads, pha, &contrib);
            }
        }
    }
    Ok(())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Broadcast-aware element pick: scalar operands repeat their single value.
fn pick(v: &[f32], i: usize) -> f32 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn eval_binary(op: &Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let compatible = a.shape() == b.shape() || a.is_scalar() || b.is_scalar();
    if !compatible {
        return Err(Error::Dimension(format!(
            "elementwise op on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (va, vb) = (a.data(), b.data());
    let n = va.len().max(vb.len());
    let shape = if a.len() >= b.len() {
        a.shape().to_vec()
    } else {
        b.shape().to_vec()
    };
    let data: Vec<f32> = match op {
        Op::Add => (0..n).map(|i| pick(va, i) + pick(vb, i)).collect(),
        Op::Sub => (0..n).map(|i| pick(va, i) - pick(vb, i)).collect(),
        Op::Mul => (0..n).map(|i| pick(va, i) * pick(vb, i)).collect(),
        Op::Div => (0..n).map(|i| pick(va, i) / pick(vb, i)).collect(),
        Op::MaxElem => (0..n).map(|i| pick(va, i).max(pick(vb, i))).collect(),
        Op::ComplexAbs => (0..n)
            .map(|i| {
                let (re, im) = (pick(va, i), pick(vb, i));
                (re * re + im * im).sqrt()
            })
            .collect(),
        Op::ComplexAngle => (0..n).map(|i| pick(vb, i).atan2(pick(va, i))).collect(),
        _ => unreachable!("not a binary op"),
    };
    Tensor::new(shape, data)
}

fn eval_unary(op: &Op, a: &Tensor) -> Tensor {
    match op {
        Op::Sum => {
            let total = a.data().iter().map(|&v| v as f64).sum::<f64>();
            return Tensor::scalar(total as f32);
        }
        Op::Mean => {
            let total = a.data().iter().map(|&v| v as f64).sum::<f64>();
            return Tensor::scalar((total / a.len() as f64) as f32);
        }
        _ => {}
    }
    a.map(|x| match op {
        Op::ScalarAdd(c) => x + c,
        Op::ScalarMul(c) => x * c,
        Op::Abs => x.abs(),
        Op::Relu => x.max(0.0),
        Op::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Op::Sigmoid => sigmoid(x),
        Op::Sqrt => x.max(0.0).sqrt(),
        Op::Log1p => x.ln_1p(),
        Op::Expm1 => x.min(EXPM1_CLAMP).exp_m1(),
        _ => unreachable!("not a unary op"),
    })
}

const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f32; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Per-channel 3x3 correlation with one fixed kernel, replicate padding
/// (border pixels repeat outward). Taps accumulate per pixel in f64 so a
/// flat field cancels to exact zero everywhere.
fn depthwise3x3(x: &Tensor, kernel: &[f32; 9]) -> Tensor {
    let (c, h, w) = x.chw().expect("depthwise3x3 input");
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    for ch in 0..c {
        let src = &x.data()[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for i in 0..h {
            let up = i.saturating_sub(1) * w;
            let mid = i * w;
            let down = (i + 1).min(h - 1) * w;
            for j in 0..w {
                let left = j.saturating_sub(1);
                let right = (j + 1).min(w - 1);
                let rows = [up, mid, down];
                let cols = [left, j, right];
                let mut acc = 0.0f64;
                for (k, &coef) in kernel.iter().enumerate() {
                    if coef != 0.0 {
                        acc += coef as f64 * src[rows[k / 3] + cols[k % 3]] as f64;
                    }
                }
                dst[mid + j] = acc as f32;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("depthwise shape")
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
    let (ic, h, iw) = x.chw()?;
    let ws = w.shape();
    if ws.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv weight must be [C_out,C_in,K,K], got {:?}",
            ws
        )));
    }
    let (oc, wic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wic != ic {
        return Err(Error::Dimension(format!(
            "conv input has {} channels but weight expects {}",
            ic, wic
        )));
    }
    if b.shape() != [oc] {
        return Err(Error::Dimension(format!(
            "conv bias shape {:?}, expected [{}]",
            b.shape(),
            oc
        )));
    }
    let oh = (h + 2 * padding).checked_sub(kh - 1).filter(|&v| v > 0);
    let ow = (iw + 2 * padding).checked_sub(kw - 1).filter(|&v| v > 0);
    let (oh, ow) = match (oh, ow) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::Dimension(format!(
                "conv kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                iw + 2 * padding
            )))
        }
    };

    let xp = pad2d(x, padding);
    let (ph, pw) = (h + 2 * padding, iw + 2 * padding);
    debug_assert_eq!(xp.len(), ic * ph * pw);

    let mut out = vec![0.0f32; oc * oh * ow];
    let wdat = w.data();
    for o in 0..oc {
        let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
        dst.fill(b.data()[o]);
        for i_ch in 0..ic {
            let src = &xp[i_ch * ph * pw..(i_ch + 1) * ph * pw];
            let wbase = ((o * ic) + i_ch) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let coef = wdat[wbase + ky * kw + kx];
                    if coef == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let srow = (i + ky) * pw + kx;
                        let drow = i * ow;
                        let s = &src[srow..srow + ow];
                        let d = &mut dst[drow..drow + ow];
                        for j in 0..ow {
                            d[j] += coef * s[j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out)
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &[f32],
    padding: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> Result<(Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>)> {
    let (ic, h, iw) = x.chw()?;
    let ws = w.shape();
    let (oc, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (ph, pw) = (h + 2 * padding, iw + 2 * padding);
    let oh = ph - kh + 1;
    let ow = pw - kw + 1;
    debug_assert_eq!(gy.len(), oc * oh * ow);

    let gb = if need_b {
        let mut gb = vec![0.0f32; oc];
        for o in 0..oc {
            gb[o] = gy[o * oh * ow..(o + 1) * oh * ow]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>() as f32;
        }
        Some(gb)
    } else {
        None
    };

    let xp = if need_w { Some(pad2d(x, padding)) } else { None };
    let gw = if need_w {
        let xp = xp.as_ref().unwrap();
        let mut gw = vec![0.0f32; w.len()];
        for o in 0..oc {
            let gplane = &gy[o * oh * ow..(o + 1) * oh * ow];
            for i_ch in 0..ic {
                let src = &xp[i_ch * ph * pw..(i_ch + 1) * ph * pw];
                let wbase = ((o * ic) + i_ch) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f32;
                        for i in 0..oh {
                            let s = &src[(i + ky) * pw + kx..(i + ky) * pw + kx + ow];
                            let gr = &gplane[i * ow..i * ow + ow];
                            let mut row = 0.0f32;
                            for j in 0..ow {
                                row += s[j] * gr[j];
                            }
                            acc += row;
                        }
                        gw[wbase + ky * kw + kx] = acc;
                    }
                }
            }
        }
        Some(gw)
    } else {
        None
    };

    let gx = if need_x {
        let wdat = w.data();
        let mut gxp = vec![0.0f32; ic * ph * pw];
        for o in 0..oc {
            let gplane = &gy[o * oh * ow..(o + 1) * oh * ow];
            for i_ch in 0..ic {
                let dst = &mut gxp[i_ch * ph * pw..(i_ch + 1) * ph * pw];
                let wbase = ((o * ic) + i_ch) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let coef = wdat[wbase + ky * kw + kx];
                        if coef == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let drow = (i + ky) * pw + kx;
                            let gr = &gplane[i * ow..i * ow + ow];
                            let d = &mut dst[drow..drow + ow];
                            for j in 0..ow {
                                d[j] += coef * gr[j];
                            }
                        }
                    }
                }
            }
        }
        // Crop padding back off.
        let mut gx = vec![0.0f32; ic * h * iw];
        for i_ch in 0..ic {
            for i in 0..h {
                let src = (i_ch * ph + i + padding) * pw + padding;
                let dst = (i_ch * h + i) * iw;
                gx[dst..dst + iw].copy_from_slice(&gxp[src..src + iw]);
            }
        }
        Some(gx)
    } else {
        None
    };

    Ok((gx, gw, gb))
}

fn pad2d(x: &Tensor, padding: usize) -> Vec<f32> {
    let (c, h, w) = x.chw().expect("pad2d input");
    if padding == 0 {
        return x.data().to_vec();
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for i in 0..h {
            let src = (ch * h + i) * w;
            let dst = (ch * ph + i + padding) * pw + padding;
            out[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0f32))
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[2, 2], 3.0), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]), true);
        let y = g.leaf(Tensor::scalar(2.0), true);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[1.0]);
    }

    #[test]
    fn conv2d_ones_counts_receptive_field() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 3, 3], 1.0));
        let w = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 3, 3]);
        assert_eq!(v.data()[4], 9.0);
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut r = rng(3);
        let x = random_tensor(&[2, 5, 6], &mut r);
        let mut wdat = vec![0.0f32; 2 * 2 * 9];
        // One-hot center per matching channel pair.
        wdat[4] = 1.0; // oc0<-ic0
        wdat[2 * 9 + 9 + 4] = 1.0; // oc1<-ic1
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::new(vec![2, 2, 3, 3], wdat).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(xv, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut r = rng(11);
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
        for (a, e) in g.value(y).data().iter().zip(reference.data()) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.conv2d(x, w, b, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn sobel_flat_field_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[1, 5, 5], 0.7));
        let (gx, gy) = g.sobel_xy(x).unwrap();
        // Replicate padding: zero everywhere, including borders.
        for i in 0..25 {
            assert_eq!(g.value(gx).data()[i], 0.0);
            assert_eq!(g.value(gy).data()[i], 0.0);
        }
    }

    #[test]
    fn sobel_ramp_interior_is_eight() {
        let x = Tensor::from_fn(&[1, 6, 6], |i| (i % 6) as f32);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (gx, gy) = g.sobel_xy(xv).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert_eq!(g.value(gx).data()[i * 6 + j], 8.0);
                assert_eq!(g.value(gy).data()[i * 6 + j], 0.0);
            }
        }
    }

    #[test]
    fn sobel_matches_loop_oracle() {
        let mut r = rng(17);
        let x = random_tensor(&[1, 6, 6], &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (gx, gy) = g.sobel_xy(xv).unwrap();
        let (ox, oy) = oracle::sobel_reference(&x);
        for i in 0..36 {
            assert!((g.value(gx).data()[i] - ox.data()[i]).abs() < 1e-6);
            assert!((g.value(gy).data()[i] - oy.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn fft_ops_match_fft_module() {
        let mut r = rng(23);
        let x = random_tensor(&[1, 8, 8], &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (re, im) = g.fft2(xv).unwrap();
        let amp = g.complex_abs(re, im).unwrap();
        let pha = g.complex_angle(re, im).unwrap();
        let field = crate::fft::fft2(&x).unwrap();
        let (oamp, opha) = crate::fft::amplitude_phase(&field);
        assert_eq!(g.value(amp).data(), oamp.data());
        assert_eq!(g.value(pha).data(), opha.data());
    }

    #[test]
    fn polar_ifft_roundtrips_through_graph() {
        let mut r = rng(29);
        let x = random_tensor(&[1, 5, 7], &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (re, im) = g.fft2(xv).unwrap();
        let amp = g.complex_abs(re, im).unwrap();
        let pha = g.complex_angle(re, im).unwrap();
        let back = g.polar_ifft2(amp, pha).unwrap();
        for i in 0..35 {
            assert!((g.value(back).data()[i] - x.data()[i]).abs() < 1e-3);
        }
    }

    /// Central finite differences over every primitive the network uses.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut r = rng(31);
        type Build = Box<dyn Fn(&mut Graph, VarId) -> VarId>;
        let shape: &[usize] = &[1, 6, 6];
        let cases: Vec<(&str, Build)> = vec![
            ("abs", Box::new(|g, x| g.abs(x))),
            ("relu", Box::new(|g, x| g.relu(x))),
            ("leaky", Box::new(|g, x| g.leaky_relu(x, 0.2))),
            ("sigmoid", Box::new(|g, x| g.sigmoid(x))),
            ("log1p_shift", Box::new(|g, x| {
                let s = g.add_scalar(x, 2.0);
                g.log1p(s)
            })),
            ("expm1", Box::new(|g, x| g.expm1(x))),
            ("sqrt_shift", Box::new(|g, x| {
                let s = g.add_scalar(x, 2.0);
                g.sqrt(s)
            })),
            ("sobel", Box::new(|g, x| {
                let (gx, gy) = g.sobel_xy(x).unwrap();
                let ax = g.abs(gx);
                let ay = g.abs(gy);
                g.add(ax, ay).unwrap()
            })),
            ("channel_ops", Box::new(|g, x| {
                let c = g.concat_ch(&[x, x]).unwrap();
                let mx = g.channel_max(c).unwrap();
                let mn = g.channel_mean(c).unwrap();
                g.mul(mx, mn).unwrap()
            })),
            ("fft_polar", Box::new(|g, x| {
                let (re, im) = g.fft2(x).unwrap();
                let amp = g.complex_abs(re, im).unwrap();
                let pha = g.complex_angle(re, im).unwrap();
                g.polar_ifft2(amp, pha).unwrap()
            })),
        ];
        for (name, build) in cases {
            let x0 = random_tensor(shape, &mut r);
            let eval = |xt: &Tensor| -> f32 {
                let mut g = Graph::new();
                let x = g.leaf(xt.clone(), true);
                let y = build(&mut g, x);
                let sq = g.mul(y, y).unwrap();
                let loss = g.mean(sq);
                g.value(loss).item()
            };
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true);
            let y = build(&mut g, x);
            let sq = g.mul(y, y).unwrap();
            let loss = g.mean(sq);
            g.backward(loss).unwrap();
            let ad = g.grad(x).unwrap();
            let worst = oracle::finite_diff_worst(&eval, &x0, ad.data(), 12, 1e-3, &mut r);
            assert!(worst < 1e-2, "{}: worst FD mismatch {}", name, worst);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(37);
        let x0 = random_tensor(&[2, 6, 6], &mut r);
        let w0 = random_tensor(&[3, 2, 3, 3], &mut r);
        let b0 = random_tensor(&[3], &mut r);
        let eval = |x: &Tensor, w: &Tensor, b: &Tensor| -> f32 {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.leaf(x.clone(), true), g.leaf(w.clone(), true), g.leaf(b.clone(), true));
            let y = g.conv2d(xv, wv, bv, 1).unwrap();
            let act = g.leaky_relu(y, 0.2);
            let sq = g.mul(act, act).unwrap();
            let m = g.mean(sq);
            g.value(m).item()
        };
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.leaf(x0.clone(), true),
            g.leaf(w0.clone(), true),
            g.leaf(b0.clone(), true),
        );
        let y = g.conv2d(xv, wv, bv, 1).unwrap();
        let act = g.leaky_relu(y, 0.2);
        let sq = g.mul(act, act).unwrap();
        let m = g.mean(sq);
        g.backward(m).unwrap();

        for (name, id, t0) in [("x", xv, &x0), ("w", wv, &w0), ("b", bv, &b0)] {
            let ad = g.grad(id).unwrap();
            let wrap = |t: &Tensor| match name {
                "x" => eval(t, &w0, &b0),
                "w" => eval(&x0, t, &b0),
                _ => eval(&x0, &w0, t),
            };
            let worst = oracle::finite_diff_worst(&wrap, t0, ad.data(), 10, 1e-3, &mut r);
            assert!(worst < 1e-2, "conv {}: worst FD mismatch {}", name, worst);
        }
    }

    #[test]
    fn repeated_graph_evaluation_is_bit_identical() {
        let run = || -> Vec<f32> {
            let mut r = rng(41);
            let x = random_tensor(&[1, 8, 8], &mut r);
            let w = random_tensor(&[4, 1, 3, 3], &mut r);
            let b = random_tensor(&[4], &mut r);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
            let y = g.conv2d(xv, wv, bv, 1).unwrap();
            let s = g.sigmoid(y);
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
