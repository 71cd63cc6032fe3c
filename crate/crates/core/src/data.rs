//! Data pipeline: samples, geometric augmentation, the resize policy,
//! train/validation splitting, a deterministic synthetic dataset, and mask
//! file I/O.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One image/mask pair. The image is a `[3, H, W]` tensor in `[0, 1]`; the
/// mask stores one class index per pixel, row-major. `original_size` is the
/// `(H, W)` the pair had before any resizing, so predictions can be restored
/// for evaluation.
#[derive(Clone)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Vec<u8>,
    pub original_size: (usize, usize),
}

impl SegmentationSample {
    pub fn new(
        id: impl Into<String>,
        image: Tensor,
        mask: Vec<u8>,
        original_size: (usize, usize),
    ) -> Result<SegmentationSample> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Data(format!(
                "sample image must be [3, H, W], got {s:?}"
            )));
        }
        if mask.len() != s[1] * s[2] {
            return Err(Error::Data(format!(
                "sample mask has {} pixels for a {}x{} image",
                mask.len(),
                s[1],
                s[2]
            )));
        }
        Ok(SegmentationSample { id: id.into(), image, mask, original_size })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Every mask value must fall under `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        let w = self.width();
        for (i, &m) in self.mask.iter().enumerate() {
            if m as usize >= num_classes {
                return Err(Error::Data(format!(
                    "sample {}: mask class {m} out of range for {num_classes} classes at \
                     pixel (y={}, x={})",
                    self.id,
                    i / w,
                    i % w
                )));
            }
        }
        Ok(())
    }
}

/// Stack samples (equal extents required) into a `[B, 3, H, W]` batch.
pub fn stack_images(samples: &[&SegmentationSample]) -> Result<Tensor> {
    let (h, w) = (samples[0].height(), samples[0].width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(Error::Data(format!(
                "batch mixes extents {}x{} (sample {}) and {h}x{w}",
                s.height(),
                s.width(),
                s.id
            )));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(data, &[samples.len(), 3, h, w])
}

/// Concatenate masks in batch order.
pub fn stack_masks(samples: &[&SegmentationSample]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.iter().map(|s| s.mask.len()).sum());
    for s in samples {
        out.extend_from_slice(&s.mask);
    }
    out
}

// ---------------------------------------------------------------------------
// Resizing primitives (pure data-side, no gradients)
// ---------------------------------------------------------------------------

/// Bilinear resample of `c` row-major planes to `oh x ow` (half-pixel
/// centers, edges clamped).
pub fn resize_image_bilinear(
    data: &[Elem],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<Elem> {
    if oh == h && ow == w {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(c * oh * ow);
    let sy = h as Elem / oh as Elem;
    let sx = w as Elem / ow as Elem;
    for ci in 0..c {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let src_y = ((oy as Elem + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as Elem);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = src_y - y0 as Elem;
            for ox in 0..ow {
                let src_x = ((ox as Elem + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as Elem);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = src_x - x0 as Elem;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Nearest-neighbor resample of a class mask (pixel centers).
pub fn resize_mask_nearest(mask: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    if oh == h && ow == w {
        return mask.to_vec();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let y = (((oy as f64 + 0.5) * sy) as usize).min(h - 1);
        for ox in 0..ow {
            let x = (((ox as f64 + 0.5) * sx) as usize).min(w - 1);
            out.push(mask[y * w + x]);
        }
    }
    out
}

/// Resize a sample to `size x size` for the model; the original extents stay
/// recorded for later restoration.
pub fn resize_for_model(s: &SegmentationSample, size: usize) -> Result<SegmentationSample> {
    let (h, w) = (s.height(), s.width());
    let image = resize_image_bilinear(s.image.data(), 3, h, w, size, size);
    let mask = resize_mask_nearest(&s.mask, h, w, size, size);
    SegmentationSample::new(
        s.id.clone(),
        Tensor::new(image, &[3, size, size])?,
        mask,
        s.original_size,
    )
}

/// Nearest-neighbor restoration of a predicted mask to the original extents
/// (`(H, W)`); the output feeds metric accumulation.
pub fn restore_prediction(pred: &[u8], h: usize, w: usize, original_size: (usize, usize)) -> Vec<u8> {
    resize_mask_nearest(pred, h, w, original_size.0, original_size.1)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub resized_crop: bool,
    pub hflip: bool,
    pub vflip: bool,
    /// Probability that each enabled flip fires.
    pub flip_prob: Elem,
    /// Crop area as a fraction of the source, sampled uniformly.
    pub crop_area: (Elem, Elem),
    /// Crop aspect ratio bounds, sampled log-uniformly.
    pub crop_aspect: (Elem, Elem),
}

impl Default for AugmentConfig {
    fn default() -> AugmentConfig {
        AugmentConfig {
            resized_crop: true,
            hflip: true,
            vflip: true,
            flip_prob: 0.5,
            crop_area: (0.5, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "augment: flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        let (a0, a1) = self.crop_area;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!(
                "augment: crop area range ({a0}, {a1}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        let (r0, r1) = self.crop_aspect;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(format!(
                "augment: crop aspect range ({r0}, {r1}) must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }

    /// Identity policy (all transforms off).
    pub fn none() -> AugmentConfig {
        AugmentConfig { resized_crop: false, hflip: false, vflip: false, ..Default::default() }
    }
}

fn hflip_in_place(image: &mut [Elem], mask: &mut [u8], h: usize, w: usize) {
    for plane in image.chunks_mut(h * w) {
        for row in plane.chunks_mut(w) {
            row.reverse();
        }
    }
    for row in mask.chunks_mut(w) {
        row.reverse();
    }
}

fn vflip_in_place(image: &mut [Elem], mask: &mut [u8], h: usize, w: usize) {
    for plane in image.chunks_mut(h * w) {
        for y in 0..h / 2 {
            for x in 0..w {
                plane.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }
    for y in 0..h / 2 {
        for x in 0..w {
            mask.swap(y * w + x, (h - 1 - y) * w + x);
        }
    }
}

/// Apply one random geometric transform pass (crop, then flips) to image and
/// mask together. The image is resampled bilinearly, the mask by nearest
/// neighbor; extents are unchanged.
pub fn augment(
    s: &SegmentationSample,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SegmentationSample> {
    cfg.validate()?;
    let (h, w) = (s.height(), s.width());
    let mut image = s.image.data().to_vec();
    let mut mask = s.mask.clone();

    if cfg.resized_crop {
        // Sample a crop window (area fraction + log-uniform aspect), retrying
        // a few times like the usual resized-crop recipe, falling back to the
        // full frame.
        let mut window = None;
        for _ in 0..10 {
            let area = rng.random_range(cfg.crop_area.0..=cfg.crop_area.1) * (h * w) as Elem;
            let log_r = rng.random_range(cfg.crop_aspect.0.ln()..=cfg.crop_aspect.1.ln());
            let ratio = log_r.exp();
            let cw = (area * ratio).sqrt().round() as usize;
            let ch = (area / ratio).sqrt().round() as usize;
            if ch == 0 || cw == 0 {
                return Err(Error::Contract(format!(
                    "augment: crop of {ch}x{cw} pixels from a {h}x{w} frame"
                )));
            }
            if ch <= h && cw <= w {
                let y0 = rng.random_range(0..=h - ch);
                let x0 = rng.random_range(0..=w - cw);
                window = Some((y0, x0, ch, cw));
                break;
            }
        }
        if let Some((y0, x0, ch, cw)) = window {
            let mut cropped_img = Vec::with_capacity(3 * ch * cw);
            for plane in image.chunks(h * w) {
                for y in y0..y0 + ch {
                    cropped_img.extend_from_slice(&plane[y * w + x0..y * w + x0 + cw]);
                }
            }
            let mut cropped_mask = Vec::with_capacity(ch * cw);
            for y in y0..y0 + ch {
                cropped_mask.extend_from_slice(&mask[y * w + x0..y * w + x0 + cw]);
            }
            image = resize_image_bilinear(&cropped_img, 3, ch, cw, h, w);
            mask = resize_mask_nearest(&cropped_mask, ch, cw, h, w);
        }
    }
    if cfg.hflip && rng.random_range(0.0..1.0) < cfg.flip_prob {
        hflip_in_place(&mut image, &mut mask, h, w);
    }
    if cfg.vflip && rng.random_range(0.0..1.0) < cfg.flip_prob {
        vflip_in_place(&mut image, &mut mask, h, w);
    }
    SegmentationSample::new(s.id.clone(), Tensor::new(image, &[3, h, w])?, mask, s.original_size)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec { train_fraction: 0.8, seed: 42 }
    }
}

/// Deterministic disjoint, exhaustive train/validation partition.
pub fn split(
    samples: Vec<SegmentationSample>,
    spec: &SplitSpec,
) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "split: train fraction {} outside (0, 1]",
            spec.train_fraction
        )));
    }
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut n_train = (n as f64 * spec.train_fraction).round() as usize;
    n_train = n_train.clamp(usize::from(n > 0), n);
    let take: std::collections::HashSet<usize> = order[..n_train].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if take.contains(&i) {
            train.push(s);
        } else {
            val.push(s);
        }
    }
    Ok((train, val))
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-sample RNG derived from the dataset seed and sample index,
/// so generation order (or parallelism) cannot change a sample's content.
fn sample_rng(seed: u64, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(idx)))
}

/// Deterministic RGB for a class: dark background for class 0, a bright,
/// well-separated hue for each shape class.
pub fn class_color(class: usize, num_classes: usize) -> [Elem; 3] {
    if class == 0 {
        return [0.15, 0.15, 0.15];
    }
    let hue = (class - 1) as Elem / (num_classes - 1).max(1) as Elem * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (v, p) = (0.9, 0.15);
    let q = v - (v - p) * f;
    let t = p + (v - p) * f;
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn paint(image: &mut [Elem], mask: &mut [u8], size: usize, y: usize, x: usize, class: u8, color: [Elem; 3], rng: &mut ChaCha8Rng) {
    let idx = y * size + x;
    mask[idx] = class;
    for (ci, &col) in color.iter().enumerate() {
        image[ci * size * size + idx] = (col + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
}

/// Generate `n` deterministic scenes of colored shapes on a noisy dark
/// background. Shape classes cycle through filled rectangles, filled
/// ellipses, and 1-pixel-wide polylines (the thin-structure class, kept
/// under 2% of the frame by construction). Each shape lives in its own
/// horizontal band so every class is present in every scene.
pub fn synth_dataset(
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<SegmentationSample>> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset needs at least 2 classes, got {num_classes}"
        )));
    }
    let shapes = num_classes - 1;
    if size < shapes.max(2) * 8 {
        return Err(Error::Config(format!(
            "synthetic dataset: size {size} too small for {shapes} shape bands"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = sample_rng(seed, i as u64);
        let mut image = vec![0.0; 3 * size * size];
        let mut mask = vec![0u8; size * size];

        // Textured background.
        let base: [Elem; 3] = [
            rng.random_range(0.08..0.22),
            rng.random_range(0.08..0.22),
            rng.random_range(0.08..0.22),
        ];
        for ci in 0..3 {
            for p in 0..size * size {
                image[ci * size * size + p] =
                    (base[ci] + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
        }

        let band_h = size / shapes;
        for c in 1..num_classes {
            let color = class_color(c, num_classes);
            let b0 = (c - 1) * band_h;
            let b1 = if c == shapes { size } else { c * band_h };
            let bh = b1 - b0;
            match (c - 1) % 3 {
                // Filled rectangle.
                0 => {
                    let rh = rng.random_range((bh / 2).max(2)..=(bh - 2).max(2));
                    let rw = rng.random_range(size / 4..=size / 2);
                    let y0 = b0 + rng.random_range(0..=bh - rh.min(bh));
                    let x0 = rng.random_range(1..=size - rw - 1);
                    for y in y0..(y0 + rh).min(b1) {
                        for x in x0..x0 + rw {
                            paint(&mut image, &mut mask, size, y, x, c as u8, color, &mut rng);
                        }
                    }
                }
                // Filled ellipse.
                1 => {
                    let ay = ((bh / 2).saturating_sub(2)).max(2);
                    let ax = rng.random_range(size / 8..=size / 4);
                    let cy = b0 + bh / 2;
                    let cx = rng.random_range(ax + 1..=size - ax - 1);
                    for y in b0..b1 {
                        for x in 0..size {
                            let dy = (y as Elem - cy as Elem) / ay as Elem;
                            let dx = (x as Elem - cx as Elem) / ax as Elem;
                            if dy * dy + dx * dx <= 1.0 {
                                paint(&mut image, &mut mask, size, y, x, c as u8, color, &mut rng);
                            }
                        }
                    }
                }
                // 1-pixel-wide polyline on the stride-4 grid (rows ≡ 1 mod 4
                // survive ×4 feature upsampling), capped below 2% of pixels.
                _ => {
                    let budget = size * size / 50 - 1;
                    let mut row = b0 + 1;
                    while row % 4 != 1 {
                        row += 1;
                    }
                    let row = row.min(b1 - 1);
                    let max_len = (size - 6).min(budget);
                    let len = rng.random_range(size / 2..=max_len.max(size / 2 + 1));
                    let x0 = rng.random_range(2..=size - len.min(size - 4) - 2);
                    for x in x0..x0 + len.min(size - 4) {
                        paint(&mut image, &mut mask, size, row, x, c as u8, color, &mut rng);
                    }
                }
            }
        }
        out.push(SegmentationSample::new(
            format!("synth-{i:04}"),
            Tensor::new(image, &[3, size, size])?,
            mask,
            (size, size),
        )?);
    }
    Ok(out)
}

/// Default class names for synthetic data.
pub fn synth_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| {
            if c == 0 {
                "background".to_string()
            } else {
                match (c - 1) % 3 {
                    0 => format!("rect-{c}"),
                    1 => format!("ellipse-{c}"),
                    _ => format!("thread-{c}"),
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

/// Write a file atomically (temp + rename) so readers never observe a
/// truncated artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Save a class mask as a single-channel 8-bit PNG whose pixel values are
/// raw class indices.
pub fn save_mask_png(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, mask.to_vec()).ok_or_else(|| {
        Error::Data(format!("mask of {} pixels does not fill {h}x{w}", mask.len()))
    })?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("encoding mask {}: {e}", path.display())))?;
    write_atomic(path, &bytes)
}

/// Load a single-channel mask PNG; returns `(mask, h, w)`.
pub fn load_mask_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("reading mask {}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

/// Save a `[3, H, W]` image tensor as an 8-bit RGB PNG.
pub fn save_image_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Data(format!("image tensor must be [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let data = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ci in 0..3 {
            bytes.push((data[ci * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes).unwrap();
    let mut png = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("encoding image {}: {e}", path.display())))?;
    write_atomic(path, &png)
}

/// Load an RGB image file as a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("reading image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (h, w) = (h as usize, w as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for ci in 0..3 {
            data[ci * h * w + p] = raw[p * 3 + ci] as Elem / 255.0;
        }
    }
    Tensor::new(data, &[3, h, w])
}

/// Convert an RGB-coded mask to class indices via an exact palette lookup.
pub fn palette_to_indices(rgb: &[u8], palette: &[[u8; 3]], w: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(rgb.len() / 3);
    for (i, px) in rgb.chunks(3).enumerate() {
        match palette.iter().position(|p| p == px) {
            Some(c) => out.push(c as u8),
            None => {
                return Err(Error::Data(format!(
                    "palette mask: unknown color ({}, {}, {}) at pixel (y={}, x={})",
                    px[0],
                    px[1],
                    px[2],
                    i / w,
                    i % w
                )))
            }
        }
    }
    Ok(out)
}

/// Parse a class-name mapping file: one `index<TAB>name` per line.
pub fn load_class_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("reading class names {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (idx, name) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!(
                "class names {}:{}: expected index<TAB>name, got {line:?}",
                path.display(),
                ln + 1
            ))
        })?;
        let idx: usize = idx.trim().parse().map_err(|_| {
            Error::Data(format!(
                "class names {}:{}: bad index {idx:?}",
                path.display(),
                ln + 1
            ))
        })?;
        pairs.push((idx, name.trim().to_string()));
    }
    pairs.sort();
    for (want, (got, _)) in pairs.iter().enumerate() {
        if *got != want {
            return Err(Error::Data(format!(
                "class names {}: indices must cover 0..n, missing {want}",
                path.display()
            )));
        }
    }
    Ok(pairs.into_iter().map(|(_, n)| n).collect())
}

/// Write a dataset to the on-disk layout: `images/<id>.png`,
/// `masks/<id>.png`, and `classes.txt`.
pub fn save_dataset(dir: &Path, samples: &[SegmentationSample], class_names: &[String]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        save_image_png(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        save_mask_png(
            &dir.join("masks").join(format!("{}.png", s.id)),
            &s.mask,
            s.height(),
            s.width(),
        )?;
    }
    let names: String = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| format!("{i}\t{n}\n"))
        .collect();
    write_atomic(&dir.join("classes.txt"), names.as_bytes())
}

/// Load a dataset from the `images/` + `masks/` layout, sorted by id.
pub fn load_dataset(dir: &Path, num_classes: usize) -> Result<Vec<SegmentationSample>> {
    let images_dir = dir.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Data(format!(
            "dataset directory {} has no images/ subdirectory",
            dir.display()
        )));
    }
    let mut image_paths: Vec<PathBuf> = fs::read_dir(&images_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    image_paths.sort();
    let mut samples = Vec::with_capacity(image_paths.len());
    for path in image_paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("unusable image file name {}", path.display())))?
            .to_string();
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(Error::Data(format!(
                "image {id} has no mask at {}",
                mask_path.display()
            )));
        }
        let image = load_image(&path)?;
        let (mask, mh, mw) = load_mask_png(&mask_path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if (mh, mw) != (h, w) {
            return Err(Error::Data(format!(
                "sample {id}: image is {h}x{w} but mask is {mh}x{mw}"
            )));
        }
        let sample = SegmentationSample::new(id, image, mask, (h, w))?;
        sample.validate_classes(num_classes)?;
        samples.push(sample);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}
