//! Images, bicubic degradation, LR/HR pairing and aligned patch sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

/// Planar image with samples in `[0, 1]` (values outside are allowed while
/// processing and clamped on export).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Image::new(width, height, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        img
    }

    /// From interleaved 8-bit samples (`RGBRGB...` or gray).
    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * channels {
            return Err(Error::invalid(
                "Image::from_u8",
                format!("{} bytes for {width}x{height}x{channels}", bytes.len()),
            ));
        }
        Ok(Image::from_fn(width, height, channels, |c, y, x| {
            bytes[(y * width + x) * channels + c] as f64 / 255.0
        }))
    }

    /// Interleaved 8-bit samples, rounded and clamped.
    pub fn to_u8(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.data.len()];
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out[(y * self.width + x) * self.channels + c] = to_byte(self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::invalid(
                "crop",
                format!(
                    "{width}x{height} at ({x0}, {y0}) exceeds {}x{}",
                    self.width, self.height
                ),
            ));
        }
        Ok(Image::from_fn(width, height, self.channels, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Rounds every sample to the nearest 8-bit level, clamped to `[0, 1]`.
    pub fn quantize(&self) -> Self {
        Image {
            data: self.data.iter().map(|&v| to_byte(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    /// `(1, channels, height, width)` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let shape = Shape::new(1, self.channels, self.height, self.width);
        Tensor::from_vec(shape, self.data.iter().map(|&v| T::from_f64_lossy(v)).collect())
            .expect("sizes agree")
    }

    /// Sample `i` of a batch tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, i: usize) -> Self {
        let s = t.shape();
        Image {
            width: s.w,
            height: s.h,
            channels: s.c,
            data: t.sample(i).iter().map(|v| v.as_f64()).collect(),
        }
    }

    /// The same gray plane in three channels.
    pub fn gray_to_rgb(&self) -> Self {
        if self.channels != 1 {
            return self.clone();
        }
        Image::from_fn(self.width, self.height, 3, |_, y, x| self.get(0, y, x))
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8- or 16-bit PNG as RGB or gray. Alpha is dropped; 16-bit
/// samples are reduced to 8 bits.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| img_err(e.to_string()))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| img_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (stored, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(img_err(format!("unsupported color type {other:?}"))),
    };
    let row = info.line_size;
    Ok(Image::from_fn(w, h, keep, |c, y, x| buf[y * row + x * stored + c] as f64 / 255.0))
}

/// Writes an 8-bit PNG (gray or RGB), rounding and clamping samples.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(img_err(format!("cannot write {c} channels"))),
    };
    let file = File::create(path).map_err(|e| img_err(e.to_string()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| img_err(e.to_string()))?;
    writer
        .write_image_data(&img.to_u8())
        .map_err(|e| img_err(e.to_string()))?;
    writer.finish().map_err(|e| img_err(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum YRange {
    /// BT.601 studio swing, 16..235 on the 8-bit scale.
    #[default]
    Studio,
    /// BT.601 full swing, 0..255.
    Full,
}

/// Luma of an RGB image; a single-channel image is returned unchanged.
pub fn rgb_to_y(img: &Image, range: YRange) -> Result<Image> {
    match img.channels {
        1 => return Ok(img.clone()),
        3 => {}
        c => return Err(Error::invalid("rgb_to_y", format!("expected 3 channels, got {c}"))),
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..r.len())
        .map(|i| match range {
            YRange::Studio => (16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]) / 255.0,
            YRange::Full => 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i],
        })
        .collect();
    Ok(Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    })
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn keys_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        (A + 2.0) * ax3 - (A + 3.0) * ax2 + 1.0
    } else if ax < 2.0 {
        A * ax3 - 5.0 * A * ax2 + 8.0 * A * ax - 4.0 * A
    } else {
        0.0
    }
}

/// How taps that fall outside the image are mapped back inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Clamp,
    /// Mirror including the edge sample (`... 2 1 1 2 ...`).
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizeOptions {
    /// Widen the kernel by the scale factor when shrinking.
    pub antialias: bool,
    pub boundary: Boundary,
}

impl Default for ResizeOptions {
    fn default() -> Self {
        ResizeOptions {
            antialias: true,
            boundary: Boundary::Clamp,
        }
    }
}

/// Taps of one output sample: source indices and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

/// Resampling taps along one axis, placing output sample `i` at input
/// coordinate `(i + 0.5) / scale - 0.5`.
pub fn resize_taps(in_len: usize, out_len: usize, opts: ResizeOptions) -> Vec<Taps> {
    let scale = out_len as f64 / in_len as f64;
    let (support, kscale) = if scale < 1.0 && opts.antialias {
        (4.0 / scale, scale)
    } else {
        (4.0, 1.0)
    };
    let taps = support.ceil() as i64 + 2;
    (0..out_len)
        .map(|i| {
            // one-based input coordinate of the output sample's center
            let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - support / 2.0).floor() as i64;
            let mut index = Vec::with_capacity(taps as usize);
            let mut weight = Vec::with_capacity(taps as usize);
            for j in 0..taps {
                let k = left + j;
                let w = kscale * keys_kernel(kscale * (u - k as f64));
                if w != 0.0 {
                    index.push(map_index(k - 1, in_len, opts.boundary));
                    weight.push(w);
                }
            }
            let sum: f64 = weight.iter().sum();
            weight.iter_mut().for_each(|w| *w /= sum);
            Taps { index, weight }
        })
        .collect()
}

fn map_index(k: i64, len: usize, boundary: Boundary) -> usize {
    let n = len as i64;
    match boundary {
        Boundary::Clamp => k.clamp(0, n - 1) as usize,
        Boundary::Symmetric => {
            let m = k.rem_euclid(2 * n);
            (if m < n { m } else { 2 * n - 1 - m }) as usize
        }
    }
}

/// Separable bicubic resize to `out_w x out_h`, rows first then columns.
pub fn bicubic_resize(img: &Image, out_w: usize, out_h: usize, opts: ResizeOptions) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("bicubic_resize", format!("output {out_w}x{out_h} is empty")));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::invalid("bicubic_resize", "input is empty"));
    }
    let (w, h, ch) = (img.width, img.height, img.channels);
    let vt = resize_taps(h, out_h, opts);
    let ht = resize_taps(w, out_w, opts);
    let mut tmp = vec![0.0; ch * out_h * w];
    for c in 0..ch {
        let src = img.plane(c);
        for (y, t) in vt.iter().enumerate() {
            let dst = &mut tmp[(c * out_h + y) * w..(c * out_h + y + 1) * w];
            for (&k, &wt) in t.index.iter().zip(&t.weight) {
                for (d, s) in dst.iter_mut().zip(&src[k * w..(k + 1) * w]) {
                    *d += wt * s;
                }
            }
        }
    }
    let mut out = Image::new(out_w, out_h, ch);
    for (row_out, row_in) in out.data.chunks_exact_mut(out_w).zip(tmp.chunks_exact(w)) {
        for (d, t) in row_out.iter_mut().zip(&ht) {
            *d = t.index.iter().zip(&t.weight).map(|(&k, &wt)| wt * row_in[k]).sum();
        }
    }
    Ok(out)
}

/// Crops an image to the largest centered region whose sides divide by `s`.
pub fn mod_crop(img: &Image, s: usize) -> Result<Image> {
    let (w, h) = (img.width - img.width % s, img.height - img.height % s);
    if w == 0 || h == 0 {
        return Err(Error::invalid(
            "mod_crop",
            format!("{}x{} is smaller than scale {s}", img.width, img.height),
        ));
    }
    img.crop((img.width - w) / 2, (img.height - h) / 2, w, h)
}

/// HR image mod-cropped, then shrunk by `s` with antialiased bicubic and
/// rounded to 8 bits.
pub fn degrade(hr: &Image, s: usize, opts: ResizeOptions) -> Result<(Image, Image)> {
    let hr = mod_crop(hr, s)?;
    if s == 1 {
        return Ok((hr.clone(), hr));
    }
    let lr = bicubic_resize(&hr, hr.width / s, hr.height / s, opts)?.quantize();
    Ok((hr, lr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub hr_path: PathBuf,
    /// File the LR image came from, if it was not synthesized.
    pub lr_path: Option<PathBuf>,
    pub hr: Image,
    pub lr: Image,
    pub scale: usize,
}

/// PNG files of a directory sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Loads every PNG of `hr_dir` and pairs it with an LR image: the file of
/// the same name in `lr_dir` if given, otherwise a bicubic degradation.
/// Grayscale inputs are replicated to RGB.
pub fn make_pairs(hr_dir: impl AsRef<Path>, s: usize, lr_dir: Option<&Path>) -> Result<Vec<ImagePair>> {
    if s == 0 {
        return Err(Error::invalid("make_pairs", "scale must be positive"));
    }
    let hr_dir = hr_dir.as_ref();
    let files = list_pngs(hr_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in {}", hr_dir.display())));
    }
    files
        .into_iter()
        .map(|hr_path| {
            let name = hr_path.file_name().unwrap().to_string_lossy().into_owned();
            let hr_full = load_png(&hr_path)?.gray_to_rgb();
            let (hr, lr, lr_path) = match lr_dir {
                Some(dir) => {
                    let lr_path = dir.join(&name);
                    let hr = mod_crop(&hr_full, s)?;
                    let lr = load_png(&lr_path)?.gray_to_rgb();
                    if lr.width * s != hr.width || lr.height * s != hr.height {
                        return Err(Error::Data(format!(
                            "{}: LR {}x{} does not match HR {}x{} at scale {s}",
                            lr_path.display(),
                            lr.width,
                            lr.height,
                            hr.width,
                            hr.height
                        )));
                    }
                    (hr, lr, Some(lr_path))
                }
                None => {
                    let (hr, lr) = degrade(&hr_full, s, ResizeOptions::default())?;
                    (hr, lr, None)
                }
            };
            Ok(ImagePair {
                name,
                hr_path,
                lr_path,
                hr,
                lr,
                scale: s,
            })
        })
        .collect()
}

/// One manifest row: `hr_path,lr_path,scale`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub hr_path: PathBuf,
    pub lr_path: PathBuf,
    pub scale: usize,
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Draws aligned LR/HR patch batches from a fixed set of pairs.
#[derive(Debug)]
pub struct PatchSampler<'a> {
    pairs: Vec<&'a ImagePair>,
    lr_patch: usize,
    scale: usize,
}

impl<'a> PatchSampler<'a> {
    /// `patch_hr` is rounded down to a multiple of the scale. Pairs whose
    /// LR side is shorter than the LR patch are skipped with a warning.
    pub fn new(pairs: &'a [ImagePair], patch_hr: usize) -> Result<Self> {
        let scale = pairs
            .first()
            .map(|p| p.scale)
            .ok_or_else(|| Error::Data("no image pairs to sample from".into()))?;
        if pairs.iter().any(|p| p.scale != scale) {
            return Err(Error::Data("image pairs mix scales".into()));
        }
        let lr_patch = patch_hr / scale;
        if lr_patch == 0 {
            return Err(Error::invalid("PatchSampler", format!("patch {patch_hr} below scale {scale}")));
        }
        let mut kept = Vec::new();
        for p in pairs {
            if p.lr.width < lr_patch || p.lr.height < lr_patch {
                log::warn!(
                    "skipping {}: LR {}x{} is smaller than the {lr_patch}px patch",
                    p.name,
                    p.lr.width,
                    p.lr.height
                );
            } else {
                kept.push(p);
            }
        }
        if kept.is_empty() {
            return Err(Error::Data("every image is smaller than the patch size".into()));
        }
        Ok(PatchSampler {
            pairs: kept,
            lr_patch,
            scale,
        })
    }

    pub fn lr_patch(&self) -> usize {
        self.lr_patch
    }

    pub fn hr_patch(&self) -> usize {
        self.lr_patch * self.scale
    }

    pub fn usable(&self) -> usize {
        self.pairs.len()
    }

    /// Picks an image and an LR offset `(y, x)` per sample; the HR patch
    /// starts at `(s*y, s*x)`.
    pub fn positions(&self, batch: usize, rng: &mut Rng) -> Vec<(usize, usize, usize)> {
        (0..batch)
            .map(|_| {
                let i = rng.below(self.pairs.len());
                let lr = &self.pairs[i].lr;
                let y = rng.below(lr.height - self.lr_patch + 1);
                let x = rng.below(lr.width - self.lr_patch + 1);
                (i, y, x)
            })
            .collect()
    }

    pub fn sample<T: Element>(&self, batch: usize, rng: &mut Rng) -> (Tensor<T>, Tensor<T>) {
        let (lp, hp, s) = (self.lr_patch, self.hr_patch(), self.scale);
        let ch = self.pairs[0].lr.channels;
        let mut lr = Tensor::zeros(Shape::new(batch, ch, lp, lp));
        let mut hr = Tensor::zeros(Shape::new(batch, ch, hp, hp));
        for (b, (i, y, x)) in self.positions(batch, rng).into_iter().enumerate() {
            let pair = self.pairs[i];
            copy_patch(&pair.lr, x, y, lp, lr.sample_mut(b));
            copy_patch(&pair.hr, x * s, y * s, hp, hr.sample_mut(b));
        }
        (lr, hr)
    }
}

fn copy_patch<T: Element>(img: &Image, x0: usize, y0: usize, size: usize, out: &mut [T]) {
    for c in 0..img.channels {
        for y in 0..size {
            let src = &img.plane(c)[(y0 + y) * img.width + x0..][..size];
            let dst = &mut out[(c * size + y) * size..][..size];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::from_f64_lossy(s);
            }
        }
    }
}

/// One batch of aligned patches; see [`PatchSampler`].
pub fn sample_patches<T: Element>(
    pairs: &[ImagePair],
    patch_hr: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok(PatchSampler::new(pairs, patch_hr)?.sample(batch, rng))
}
