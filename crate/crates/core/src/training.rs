//! Adam optimizer, checkpoint persistence, and the training loop.
//!
//! Training is deterministic end to end: parameter init, epoch shuffles,
//! and crop offsets all draw from one seeded ChaCha8 stream (rand_chacha's
//! documented, platform-stable generator), and every reduction runs in a
//! fixed order. Two runs with the same config produce byte-identical logs
//! and checkpoints.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::imaging::{self, ImagePair, SaliencyMask};
use crate::losses::{self, ItemLossInputs, LossBreakdown, LossOptions, LossWeights};
use crate::net::{self, FusionNetParams, NetConfig, NetVars};
use crate::{Error, Result, Tensor};

// ---- Adam ------------------------------------------------------------------------

/// Adam with bias correction; moment buffers follow the canonical parameter
/// order of [`FusionNetParams::named_tensors`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(named: &[(String, &Tensor)], lr: f32) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// One update. `params` and `grads` must follow the construction order;
    /// a non-finite gradient aborts the step before touching any parameter.
    pub fn step(
        &mut self,
        params: &mut Vec<(String, &mut Tensor)>,
        grads: &[Tensor],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam trackes {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} does not match parameter '{}' {:?}",
                    g.shape(),
                    name,
                    p.shape()
                )));
            }
            g.ensure_finite(&format!("gradient of '{}'", name))?;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, (_, p)) in params.iter_mut().enumerate() {
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let g = grads[idx].data();
            let pd = p.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    fn from_moments(lr: f32, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }
}

// ---- training config ------------------------------------------------------------------

/// Full training configuration. Every field is addressable in the flat
/// `key=value` config file and overridable from the CLI.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub dataset_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub lr: f32,
    pub weights: LossWeights,
    pub net: NetConfig,
    /// Global L2 gradient clip; 0 disables.
    pub clip_norm: f32,
    /// Use the printed additive form of the frequency loss.
    pub fre_literal_sign: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_root: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("out"),
            epochs: 20,
            batch_size: 4,
            crop: 128,
            seed: 0,
            lr: 5e-4,
            weights: LossWeights::default(),
            net: NetConfig::default(),
            clip_norm: 1.0,
            fre_literal_sign: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {}={}", key, value)))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {}={} as bool", key, value))),
    }
}

impl TrainConfig {
    /// Applies one `key=value` assignment.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset_root" => self.dataset_root = PathBuf::from(value),
            "checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lambda_s" => self.weights.lambda_s = parse(key, value)?,
            "alpha1" => self.weights.alpha1 = parse(key, value)?,
            "alpha2" => self.weights.alpha2 = parse(key, value)?,
            "beta" => self.weights.beta = parse(key, value)?,
            "d" => self.net.d = parse(key, value)?,
            "c" => self.net.c = parse(key, value)?,
            "leaky_slope" => self.net.leaky_slope = parse(key, value)?,
            "amp_log_compress" => self.net.amp_log_compress = parse_bool(key, value)?,
            "use_dmrm" => self.net.ablation.use_dmrm = parse_bool(key, value)?,
            "use_fdfm" => self.net.ablation.use_fdfm = parse_bool(key, value)?,
            "use_lfre" => self.net.ablation.use_lfre = parse_bool(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "fre_literal_sign" => self.fre_literal_sign = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{}'", key))),
        }
        Ok(())
    }

    /// Parses a flat `key=value` file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            config.apply_kv(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.crop < 16 {
            return Err(Error::Config("crop must be >= 16".into()));
        }
        self.net.validate()
    }
}

// ---- checkpoint format ---------------------------------------------------------------

const MAGIC: &[u8; 4] = b"SFDF";
const VERSION: u32 = 1;

fn header_config_lines(net: &NetConfig) -> String {
    format!(
        "config d={}\nconfig c={}\nconfig leaky_slope={}\nconfig amp_log_compress={}\nconfig use_dmrm={}\nconfig use_fdfm={}\nconfig use_lfre={}\n",
        net.d,
        net.c,
        net.leaky_slope,
        net.amp_log_compress as u8,
        net.ablation.use_dmrm as u8,
        net.ablation.use_fdfm as u8,
        net.ablation.use_lfre as u8,
    )
}

/// Serializes parameters (and optionally optimizer state) as
/// `SFDF | version | header | little-endian f32 payload`. Saving the result
/// of a load reproduces the file byte for byte.
pub fn save_checkpoint(
    path: &Path,
    params: &FusionNetParams,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut header = header_config_lines(&params.config);
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;

    let mut put_tensor = |header: &mut String, payload: &mut Vec<u8>, name: &str, t: &Tensor| {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "tensor {} f32 {} {} {}\n",
            name,
            dims.join("x"),
            offset,
            t.len()
        ));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    };

    for (name, t) in params.named_tensors() {
        put_tensor(&mut header, &mut payload, &name, t);
    }
    if let Some(adam) = adam {
        header.push_str(&format!("adam step={} lr={}\n", adam.step, adam.lr));
        let (m, v) = adam.moments();
        for ((name, _), buf) in params.named_tensors().iter().zip(m) {
            put_tensor(&mut header, &mut payload, &format!("adam.m.{}", name), buf);
        }
        for ((name, _), buf) in params.named_tensors().iter().zip(v) {
            put_tensor(&mut header, &mut payload, &format!("adam.v.{}", name), buf);
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |file: &mut std::fs::File, bytes: &[u8]| -> Result<()> {
        file.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&mut file, MAGIC)?;
    write(&mut file, &VERSION.to_le_bytes())?;
    write(&mut file, &(header.len() as u32).to_le_bytes())?;
    write(&mut file, header.as_bytes())?;
    write(&mut file, &payload)?;
    Ok(())
}

struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Loads a checkpoint; validates magic, version, and the shape table.
pub fn load_checkpoint(path: &Path) -> Result<(FusionNetParams, Option<AdamState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |what: &str| Error::Checkpoint(format!("{}: {}", path.display(), what));
    if bytes.len() < 12 {
        return Err(fail("file shorter than the 12-byte preamble"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic (expected SFDF)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!(
            "unsupported version {} (expected {})",
            version, VERSION
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(fail(&format!(
            "truncated header: need bytes 12..{}, file ends at {}",
            12 + header_len,
            bytes.len()
        )));
    }
    let header = std::str::from_utf8(&bytes[12..12 + header_len])
        .map_err(|_| fail("header is not UTF-8"))?;
    let payload = &bytes[12 + header_len..];

    let mut net = NetConfig::default();
    let mut entries: Vec<TensorEntry> = Vec::new();
    let mut adam_meta: Option<(u64, f32)> = None;
    for line in header.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("config") => {
                let kv = parts.next().ok_or_else(|| fail("bare config line"))?;
                let (key, value) = kv
                    .split_once('=')
                    .ok_or_else(|| fail("config line without '='"))?;
                match key {
                    "d" => net.d = value.parse().map_err(|_| fail("bad config d"))?,
                    "c" => net.c = value.parse().map_err(|_| fail("bad config c"))?,
                    "leaky_slope" => {
                        net.leaky_slope = value.parse().map_err(|_| fail("bad leaky_slope"))?
                    }
                    "amp_log_compress" => net.amp_log_compress = value == "1",
                    "use_dmrm" => net.ablation.use_dmrm = value == "1",
                    "use_fdfm" => net.ablation.use_fdfm = value == "1",
                    "use_lfre" => net.ablation.use_lfre = value == "1",
                    other => return Err(fail(&format!("unknown config key '{}'", other))),
                }
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| fail("tensor line without name"))?;
                let dtype = parts.next().ok_or_else(|| fail("tensor line without dtype"))?;
                if dtype != "f32" {
                    return Err(fail(&format!("unsupported dtype '{}'", dtype)));
                }
                let dims = parts.next().ok_or_else(|| fail("tensor line without shape"))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse().map_err(|_| fail("bad tensor dim")))
                    .collect::<Result<_>>()?;
                let offset: usize = parts
                    .next()
                    .ok_or_else(|| fail("tensor line without offset"))?
                    .parse()
                    .map_err(|_| fail("bad tensor offset"))?;
                let len: usize = parts
                    .next()
                    .ok_or_else(|| fail("tensor line without length"))?
                    .parse()
                    .map_err(|_| fail("bad tensor length"))?;
                entries.push(TensorEntry {
                    name: name.to_string(),
                    shape,
                    offset,
                    len,
                });
            }
            Some("adam") => {
                let mut step = 0u64;
                let mut lr = 0.0f32;
                for kv in parts {
                    let (key, value) = kv
                        .split_once('=')
                        .ok_or_else(|| fail("adam line without '='"))?;
                    match key {
                        "step" => step = value.parse().map_err(|_| fail("bad adam step"))?,
                        "lr" => lr = value.parse().map_err(|_| fail("bad adam lr"))?,
                        other => return Err(fail(&format!("unknown adam key '{}'", other))),
                    }
                }
                adam_meta = Some((step, lr));
            }
            Some(other) => return Err(fail(&format!("unknown header record '{}'", other))),
            None => {}
        }
    }

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
        let expect: usize = entry.shape.iter().product();
        if expect != entry.len {
            return Err(fail(&format!(
                "tensor '{}' declares {} elements but shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > payload.len() {
            return Err(fail(&format!(
                "truncated payload: tensor '{}' needs bytes {}..{} of the payload, file provides {}",
                entry.name,
                start,
                end,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(entry.len);
        let mut cursor = &payload[start..end];
        let mut quad = [0u8; 4];
        for _ in 0..entry.len {
            cursor.read_exact(&mut quad).expect("bounds checked");
            data.push(f32::from_le_bytes(quad));
        }
        let t = Tensor::new(entry.shape.clone(), data)?;
        t.ensure_finite(&format!("checkpoint tensor '{}'", entry.name))?;
        Ok(t)
    };

    // Materialize the parameter structure from the config, then fill by name.
    let mut params = FusionNetParams::init(net, 0)?;
    let find = |name: &str| -> Result<&TensorEntry> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| fail(&format!("missing tensor '{}'", name)))
    };
    {
        let named = params.named_tensors_mut();
        for (name, slot) in named {
            let entry = find(&name)?;
            let t = read_tensor(entry)?;
            if t.shape() != slot.shape() {
                return Err(fail(&format!(
                    "tensor '{}' has shape {:?} but the requested network needs {:?}",
                    name,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    let expected_names = params.named_tensors().len();
    let plain = entries.iter().filter(|e| !e.name.starts_with("adam.")).count();
    if plain != expected_names {
        return Err(fail(&format!(
            "checkpoint has {} parameter tensors, network needs {}",
            plain, expected_names
        )));
    }

    let adam = match adam_meta {
        None => None,
        Some((step, lr)) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, slot) in params.named_tensors() {
                let me = read_tensor(find(&format!("adam.m.{}", name))?)?;
                let ve = read_tensor(find(&format!("adam.v.{}", name))?)?;
                if me.shape() != slot.shape() || ve.shape() != slot.shape() {
                    return Err(fail(&format!("adam moments for '{}' have wrong shape", name)));
                }
                m.push(me);
                v.push(ve);
            }
            Some(AdamState::from_moments(lr, step, m, v))
        }
    };
    Ok((params, adam))
}

/// Loads a checkpoint and verifies it matches a requested architecture,
/// naming the first offending tensor otherwise.
pub fn load_checkpoint_with_config(
    path: &Path,
    want: &NetConfig,
) -> Result<(FusionNetParams, Option<AdamState>)> {
    let (params, adam) = load_checkpoint(path)?;
    let wanted = FusionNetParams::init(*want, 0)?;
    let have = params.named_tensors();
    for (name, t) in wanted.named_tensors() {
        match have.iter().find(|(n, _)| *n == name) {
            None => {
                return Err(Error::Checkpoint(format!(
                    "{}: missing tensor '{}' required by the requested config",
                    path.display(),
                    name
                )))
            }
            Some((_, got)) if got.shape() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor '{}' has shape {:?}, requested config needs {:?}",
                    path.display(),
                    name,
                    got.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if have.len() != wanted.named_tensors().len() {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint carries {} tensors, requested config needs {}",
            path.display(),
            have.len(),
            wanted.named_tensors().len()
        )));
    }
    Ok((params, adam))
}

// ---- training loop -------------------------------------------------------------------

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Mean total loss per epoch, in order.
    pub epoch_means: Vec<f64>,
    pub steps: u64,
    /// Steps on which the global-norm clip fired.
    pub clip_events: u64,
}

struct LoadedItem {
    pair: ImagePair,
    mask: SaliencyMask,
}

fn load_dataset(config: &TrainConfig) -> Result<Vec<LoadedItem>> {
    let root = &config.dataset_root;
    let mask_dir = root.join("mask");
    let index = imaging::dataset_index(
        &root.join("ir"),
        &root.join("vis"),
        mask_dir.is_dir().then_some(mask_dir.as_path()),
    )?;
    let mut items = Vec::new();
    for entry in &index.pairs {
        let pair = imaging::load_pair(&entry.ir, &entry.vis)?;
        let mask = imaging::load_or_generate_mask(&pair, entry.mask.as_deref())?;
        if pair.height() < config.crop || pair.width() < config.crop {
            return Err(Error::Config(format!(
                "crop {} exceeds image '{}' ({}x{})",
                config.crop,
                pair.id,
                pair.width(),
                pair.height()
            )));
        }
        items.push(LoadedItem { pair, mask });
    }
    Ok(items)
}

fn format_row(step: u64, bd: &LossBreakdown, lr: f32) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
        step, bd.l_int, bd.l_grad, bd.l_ssim, bd.l_saliency, bd.l_fre, bd.l_total, lr
    )
}

/// Runs the full training loop described by `config`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let items = load_dataset(config)?;
    std::fs::create_dir_all(&config.checkpoint_dir)
        .map_err(|e| Error::io(&config.checkpoint_dir, e))?;

    let mut params = FusionNetParams::init(config.net, config.seed)?;
    let mut adam = AdamState::new(&params.named_tensors(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let options = LossOptions {
        fre_literal_sign: config.fre_literal_sign,
        disable_fre: !config.net.ablation.use_lfre || !config.net.ablation.use_fdfm,
    };

    let log_path = config.checkpoint_dir.join("train_log.csv");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    log.write_all(b"step,l_int,l_grad,l_ssim,l_saliency,l_fre,l_total,lr\n")
        .map_err(|e| Error::io(&log_path, e))?;

    let mut step = 0u64;
    let mut clip_events = 0u64;
    let mut epoch_means = Vec::with_capacity(config.epochs);
    let mut last_saved: Option<PathBuf> = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0f64;
        let mut epoch_steps = 0u64;

        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let vars = NetVars::bind(&mut g, &params, true);
            let mut batch_items = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let item = &items[idx];
                let (h, w) = (item.pair.height(), item.pair.width());
                let x0 = if w == config.crop {
                    0
                } else {
                    rng.gen_range(0..=w - config.crop)
                };
                let y0 = if h == config.crop {
                    0
                } else {
                    rng.gen_range(0..=h - config.crop)
                };
                let pair = item.pair.crop(x0, y0, config.crop)?;
                let mask = item.mask.crop(x0, y0, config.crop)?;
                let ir = g.constant(pair.ir.clone());
                let vis = g.constant(pair.vis_y.clone());
                let mask_t = mask.m.reshaped(vec![1, config.crop, config.crop])?;
                let mask_id = g.constant(mask_t);
                let out = net::forward(&mut g, &vars, ir, vis)?;
                batch_items.push(ItemLossInputs {
                    fused: out.fused,
                    ir,
                    vis,
                    mask: mask_id,
                    freq: out.freq,
                });
            }

            let (total, bd) = match losses::total_loss(&mut g, &batch_items, &config.weights, &options)
            {
                Ok(v) => v,
                Err(e) => {
                    return Err(Error::Numeric(format!(
                        "training halted at step {}: {}; last checkpoint: {}",
                        step + 1,
                        e,
                        last_saved
                            .as_deref()
                            .map(|p| p.display().to_string())
                            .unwrap_or_else(|| "none".into())
                    )))
                }
            };
            g.backward(total)?;

            let mut grads = Vec::with_capacity(vars.named_vars().len());
            for (name, id) in vars.named_vars() {
                let grad = g.grad(*id).ok_or_else(|| {
                    Error::Numeric(format!("no gradient populated for '{}'", name))
                })?;
                grads.push(grad);
            }
            if config.clip_norm > 0.0 {
                let norm = grads
                    .iter()
                    .flat_map(|t| t.data())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > config.clip_norm as f64 {
                    let scale = (config.clip_norm as f64 / norm) as f32;
                    for t in &mut grads {
                        for v in t.data_mut() {
                            *v *= scale;
                        }
                    }
                    clip_events += 1;
                    log::info!("step {}: clipped gradient norm {:.3} -> {}", step + 1, norm, config.clip_norm);
                }
            }

            let mut named_mut = params.named_tensors_mut();
            adam.step(&mut named_mut, &grads).map_err(|e| {
                Error::Numeric(format!(
                    "training halted at step {}: {}; last checkpoint: {}",
                    step + 1,
                    e,
                    last_saved
                        .as_deref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_else(|| "none".into())
                ))
            })?;

            step += 1;
            epoch_total += bd.l_total;
            epoch_steps += 1;
            log.write_all(format_row(step, &bd, config.lr).as_bytes())
                .map_err(|e| Error::io(&log_path, e))?;
        }

        epoch_means.push(epoch_total / epoch_steps.max(1) as f64);
        let epoch_path = config.checkpoint_dir.join(format!("epoch_{:03}.sfdf", epoch));
        save_checkpoint(&epoch_path, &params, Some(&adam))?;
        last_saved = Some(epoch_path);
        log::info!(
            "epoch {}/{}: mean total loss {:.4}",
            epoch,
            config.epochs,
            epoch_means.last().unwrap()
        );
    }

    let final_path = config.checkpoint_dir.join("final.sfdf");
    save_checkpoint(&final_path, &params, Some(&adam))?;
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        log_path,
        epoch_means,
        steps: step,
        clip_events,
    })
}
