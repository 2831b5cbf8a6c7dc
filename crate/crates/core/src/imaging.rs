//! Image I/O, color-space conversion, saliency masks, and dataset pairing.
//!
//! Only 8-bit PNG is mandatory (16-bit inputs are right-shifted to 8 bits).
//! Luma/chroma use the BT.601 full-range matrix:
//! `Y = 0.299R + 0.587G + 0.114B`, `Cb = 0.564(B-Y) + 0.5`,
//! `Cr = 0.713(R-Y) + 0.5`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::DynamicImage;

use crate::{Error, Result, Tensor};

/// Registered IR/VIS pair with precomputed luma and chroma planes.
#[derive(Clone, Debug)]
pub struct ImagePair {
    /// IR intensities, `[1,H,W]` in [0,1].
    pub ir: Tensor,
    /// Visible RGB, `[3,H,W]` in [0,1].
    pub vis_rgb: Tensor,
    /// Visible luma, `[1,H,W]`.
    pub vis_y: Tensor,
    /// Blue-difference chroma plane `[H,W]`.
    pub vis_cb: Tensor,
    /// Red-difference chroma plane `[H,W]`.
    pub vis_cr: Tensor,
    pub id: String,
}

impl ImagePair {
    pub fn height(&self) -> usize {
        self.ir.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.ir.shape()[2]
    }

    /// Builds the pair from decoded tensors, checking registration and range.
    pub fn from_tensors(ir: Tensor, vis_rgb: Tensor, id: String) -> Result<Self> {
        let (ic, ih, iw) = ir.chw()?;
        let (vc, vh, vw) = vis_rgb.chw()?;
        if ic != 1 || vc != 3 {
            return Err(Error::Dimension(format!(
                "expected 1-channel IR and 3-channel VIS, got {} and {}",
                ic, vc
            )));
        }
        if (ih, iw) != (vh, vw) {
            return Err(Error::Registration(format!(
                "pair '{}': IR is {}x{} but VIS is {}x{}",
                id, iw, ih, vw, vh
            )));
        }
        for (name, t) in [("ir", &ir), ("vis", &vis_rgb)] {
            let (lo, hi) = t.min_max();
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                return Err(Error::Numeric(format!(
                    "pair '{}': {} values outside [0,1] (min {}, max {})",
                    id, name, lo, hi
                )));
            }
        }
        let (y, cb, cr) = rgb_to_ycbcr(&vis_rgb)?;
        Ok(ImagePair {
            ir,
            vis_rgb,
            vis_y: y,
            vis_cb: cb,
            vis_cr: cr,
            id,
        })
    }

    /// Aligned crop of all planes; `(x0, y0)` is the top-left corner.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<ImagePair> {
        let (h, w) = (self.height(), self.width());
        if y0 + size > h || x0 + size > w {
            return Err(Error::Dimension(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                size, size, x0, y0, w, h
            )));
        }
        let ir = crop_chw(&self.ir, x0, y0, size)?;
        let vis_rgb = crop_chw(&self.vis_rgb, x0, y0, size)?;
        ImagePair::from_tensors(ir, vis_rgb, self.id.clone())
    }
}

/// Binary saliency mask aligned to an [`ImagePair`].
#[derive(Clone, Debug)]
pub struct SaliencyMask {
    /// `[H,W]` plane with values in {0,1}.
    pub m: Tensor,
    pub source: MaskSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    File,
    Fallback,
}

impl SaliencyMask {
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<SaliencyMask> {
        let cropped = crop_plane(&self.m, x0, y0, size)?;
        Ok(SaliencyMask {
            m: cropped,
            source: self.source,
        })
    }
}

// ---- color-space conversion -------------------------------------------------

const KR: f32 = 0.299;
const KG: f32 = 0.587;
const KB: f32 = 0.114;
const CB_SCALE: f32 = 0.564;
const CR_SCALE: f32 = 0.713;

/// Forward BT.601 full-range conversion of a `[3,H,W]` tensor.
pub fn rgb_to_ycbcr(rgb: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = rgb.chw()?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {}", c)));
    }
    let plane = h * w;
    let d = rgb.data();
    let mut y = vec![0.0f32; plane];
    let mut cb = vec![0.0f32; plane];
    let mut cr = vec![0.0f32; plane];
    for i in 0..plane {
        let (r, g, b) = (d[i], d[plane + i], d[2 * plane + i]);
        let yy = KR * r + KG * g + KB * b;
        y[i] = yy;
        cb[i] = CB_SCALE * (b - yy) + 0.5;
        cr[i] = CR_SCALE * (r - yy) + 0.5;
    }
    Ok((
        Tensor::new(vec![1, h, w], y)?,
        Tensor::new(vec![h, w], cb)?,
        Tensor::new(vec![h, w], cr)?,
    ))
}

/// Inverse BT.601: combines a fused luma plane with carried chroma, clamping
/// every channel to [0,1].
pub fn recombine_color(fused_y: &Tensor, cb: &Tensor, cr: &Tensor) -> Result<Tensor> {
    let (c, h, w) = fused_y.chw()?;
    if c != 1 {
        return Err(Error::Dimension("fused luma must be single-channel".into()));
    }
    let plane = h * w;
    if cb.len() != plane || cr.len() != plane {
        return Err(Error::Dimension(format!(
            "chroma planes {}/{} do not match luma {}x{}",
            cb.len(),
            cr.len(),
            h,
            w
        )));
    }
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let y = fused_y.data()[i].clamp(0.0, 1.0);
        let dcb = cb.data()[i] - 0.5;
        let dcr = cr.data()[i] - 0.5;
        let r = y + dcr / CR_SCALE;
        let b = y + dcb / CB_SCALE;
        let g = (y - KR * r - KB * b) / KG;
        out[i] = r.clamp(0.0, 1.0);
        out[plane + i] = g.clamp(0.0, 1.0);
        out[2 * plane + i] = b.clamp(0.0, 1.0);
    }
    Tensor::new(vec![3, h, w], out)
}

// ---- PNG I/O ------------------------------------------------------------------

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::image(path, e))
}

/// Grayscale `[1,H,W]` tensor in [0,1] from any supported PNG bit depth.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data: Vec<f32> = gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

/// RGB `[3,H,W]` tensor in [0,1]; grayscale inputs are broadcast to 3 channels.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        data[i] = px[0] as f32 / 255.0;
        data[plane + i] = px[1] as f32 / 255.0;
        data[2 * plane + i] = px[2] as f32 / 255.0;
    }
    Tensor::new(vec![3, h as usize, w as usize], data)
}

/// Loads a registered IR/VIS pair; the pair id is the IR file stem.
pub fn load_pair(ir_path: &Path, vis_path: &Path) -> Result<ImagePair> {
    let ir = load_gray(ir_path)?;
    let vis = load_rgb(vis_path)?;
    let id = ir_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pair".to_string());
    ImagePair::from_tensors(ir, vis, id)
}

/// Writes a `[1,H,W]` or `[3,H,W]` tensor in [0,1] as an 8-bit PNG.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.chw()?;
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = match c {
        1 => {
            let buf: Vec<u8> = img.data().iter().map(|&v| quant(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("gray buffer size")
                .save(path)
        }
        3 => {
            let plane = h * w;
            let mut buf = vec![0u8; 3 * plane];
            for i in 0..plane {
                buf[3 * i] = quant(img.data()[i]);
                buf[3 * i + 1] = quant(img.data()[plane + i]);
                buf[3 * i + 2] = quant(img.data()[2 * plane + i]);
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .expect("rgb buffer size")
                .save(path)
        }
        other => {
            return Err(Error::Dimension(format!(
                "cannot encode {}-channel tensor as PNG",
                other
            )))
        }
    };
    result.map_err(|e| Error::image(path, e))
}

// ---- saliency masks --------------------------------------------------------------

/// Loads a mask file (thresholded at 0.5) or falls back to an Otsu threshold
/// of the pair's IR channel.
pub fn load_or_generate_mask(pair: &ImagePair, mask_path: Option<&Path>) -> Result<SaliencyMask> {
    let (h, w) = (pair.height(), pair.width());
    match mask_path {
        Some(path) => {
            let gray = load_gray(path)?;
            let (_, mh, mw) = gray.chw()?;
            if (mh, mw) != (h, w) {
                return Err(Error::Registration(format!(
                    "mask {} is {}x{} but pair '{}' is {}x{}",
                    path.display(),
                    mw,
                    mh,
                    pair.id,
                    w,
                    h
                )));
            }
            let m = gray.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            Ok(SaliencyMask {
                m: m.reshaped(vec![h, w])?,
                source: MaskSource::File,
            })
        }
        None => {
            let t = otsu_threshold(pair.ir.data());
            let cut = t as f32 / 255.0;
            let m = pair
                .ir
                .map(|v| if v > cut { 1.0 } else { 0.0 })
                .reshaped(vec![h, w])?;
            Ok(SaliencyMask {
                m,
                source: MaskSource::Fallback,
            })
        }
    }
}

/// Otsu threshold over a 256-bin histogram of [0,1] values; returns the
/// 8-bit level that maximizes between-class variance. Binarize with `> t`.
pub fn otsu_threshold(values: &[f32]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        hist[q.min(255)] += 1;
    }
    let total = values.len() as f64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(v, &c)| v as f64 * c as f64)
        .sum();

    let mut best_t = 0u8;
    let mut best_var = -1.0f64;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for t in 0..256usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total_sum - sum0) / w1;
        let var = (w0 / total) * (w1 / total) * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}

// ---- dataset indexing --------------------------------------------------------------

/// One dataset entry: registered paths matched by file stem.
#[derive(Clone, Debug)]
pub struct PairPaths {
    pub id: String,
    pub ir: PathBuf,
    pub vis: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Index of a `<root>/ir`, `<root>/vis`[, `<root>/mask`] directory layout.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub pairs: Vec<PairPaths>,
    /// Stems present on only one side.
    pub unmatched: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e.eq_ignore_ascii_case("png")) == Some(true) {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs IR and VIS files by identical stem, sorted lexicographically.
/// Unmatched stems are reported, an empty intersection is an error.
pub fn dataset_index(ir_dir: &Path, vis_dir: &Path, mask_dir: Option<&Path>) -> Result<DatasetIndex> {
    let ir = png_stems(ir_dir)?;
    let vis = png_stems(vis_dir)?;
    let masks = match mask_dir {
        Some(d) => png_stems(d)?,
        None => BTreeMap::new(),
    };

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (stem, ir_path) in &ir {
        match vis.get(stem) {
            Some(vis_path) => pairs.push(PairPaths {
                id: stem.clone(),
                ir: ir_path.clone(),
                vis: vis_path.clone(),
                mask: masks.get(stem).cloned(),
            }),
            None => unmatched.push(stem.clone()),
        }
    }
    for stem in vis.keys() {
        if !ir.contains_key(stem) {
            unmatched.push(stem.clone());
        }
    }
    unmatched.sort();

    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no common file stems between {} and {}",
            ir_dir.display(),
            vis_dir.display()
        )));
    }
    for stem in &unmatched {
        log::warn!("unmatched dataset stem: {}", stem);
    }
    Ok(DatasetIndex { pairs, unmatched })
}

// ---- crop helpers --------------------------------------------------------------

fn crop_chw(t: &Tensor, x0: usize, y0: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    debug_assert!(y0 + size <= h && x0 + size <= w);
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for i in 0..size {
            let src = (ch * h + y0 + i) * w + x0;
            out.extend_from_slice(&t.data()[src..src + size]);
        }
    }
    Tensor::new(vec![c, size, size], out)
}

fn crop_plane(t: &Tensor, x0: usize, y0: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if c != 1 {
        return Err(Error::Dimension("crop_plane expects a plane".into()));
    }
    if y0 + size > h || x0 + size > w {
        return Err(Error::Dimension(format!(
            "crop {}+{} exceeds plane {}x{}",
            x0, y0, w, h
        )));
    }
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let src = (y0 + i) * w + x0;
        out.extend_from_slice(&t.data()[src..src + size]);
    }
    Tensor::new(vec![size, size], out)
}
