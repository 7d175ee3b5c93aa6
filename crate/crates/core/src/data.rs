//! Dataset ingestion (IDX), stacked-composite construction, and PGM/PPM I/O.
//!
//! Composites stack two same-class images vertically so that the lower one
//! sits in a model's dead zone; the audit then measures how much saliency
//! mass the explanation methods place there.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Images (single channel, values in [0, 1]) with class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Shape {
                expected: format!("{} labels", self.images.len()),
                found: format!("{}", self.labels.len()),
            });
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!("image {i} has pixels outside [0, 1]")));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_names.len()];
        for (i, &label) in self.labels.iter().enumerate() {
            by_class[label].push(i);
        }
        by_class
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// One half of an IDX pair.
#[derive(Debug, Clone)]
pub enum IdxContent {
    /// Single-channel images scaled by 1/255.
    Images(Vec<Tensor>),
    Labels(Vec<u8>),
}

/// Big-endian IDX decoding. Never reads past the declared payload; trailing
/// bytes are ignored.
pub fn parse_idx_bytes(bytes: &[u8]) -> Result<IdxContent> {
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
            .ok_or(Error::Truncated { expected: offset + 4, actual: bytes.len() })
    };
    let magic = word(0)?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let count = word(4)? as usize;
            let rows = word(8)? as usize;
            let cols = word(12)? as usize;
            let per_image = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::DimensionOverflow(format!("{rows} x {cols}")))?;
            let payload = count
                .checked_mul(per_image)
                .ok_or_else(|| Error::DimensionOverflow(format!("{count} x {rows} x {cols}")))?;
            let expected = 16usize
                .checked_add(payload)
                .ok_or_else(|| Error::DimensionOverflow(format!("{payload} + header")))?;
            if bytes.len() < expected {
                return Err(Error::Truncated { expected, actual: bytes.len() });
            }
            let mut images = Vec::with_capacity(count);
            for i in 0..count {
                let start = 16 + i * per_image;
                let data: Vec<f64> = bytes[start..start + per_image]
                    .iter()
                    .map(|&b| b as f64 / 255.0)
                    .collect();
                images.push(Tensor::from_vec(&[1, rows, cols], data)?);
            }
            Ok(IdxContent::Images(images))
        }
        IDX_LABELS_MAGIC => {
            let count = word(4)? as usize;
            let expected = 8usize
                .checked_add(count)
                .ok_or_else(|| Error::DimensionOverflow(format!("{count} labels")))?;
            if bytes.len() < expected {
                return Err(Error::Truncated { expected, actual: bytes.len() });
            }
            Ok(IdxContent::Labels(bytes[8..8 + count].to_vec()))
        }
        found => Err(Error::BadMagic { found }),
    }
}

pub fn parse_idx(path: &Path) -> Result<IdxContent> {
    parse_idx_bytes(&std::fs::read(path)?)
}

/// Load an images/labels IDX pair into a dataset.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = match parse_idx(images_path)? {
        IdxContent::Images(images) => images,
        IdxContent::Labels(_) => {
            return Err(Error::Format(format!("{} holds labels, not images", images_path.display())))
        }
    };
    let labels = match parse_idx(labels_path)? {
        IdxContent::Labels(labels) => labels,
        IdxContent::Images(_) => {
            return Err(Error::Format(format!("{} holds images, not labels", labels_path.display())))
        }
    };
    if images.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", images.len()),
            found: format!("{}", labels.len()),
        });
    }
    let classes = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
    Ok(LabeledDataset {
        images,
        labels: labels.into_iter().map(|l| l as usize).collect(),
        class_names: (0..classes).map(|c| c.to_string()).collect(),
    })
}

/// Vertical-split composition geometry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StackSpec {
    /// Input row where the bottom slice begins.
    pub split_row: usize,
    /// Canvas extents (rows, cols).
    pub canvas: (usize, usize),
}

impl StackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.split_row == 0 || self.split_row >= self.canvas.0 {
            return Err(Error::Config(format!(
                "split row {} outside (0, {})",
                self.split_row, self.canvas.0
            )));
        }
        Ok(())
    }
}

/// Deterministic same-class pairing: consume a shuffled queue two at a time;
/// a final odd element pairs with a uniformly re-drawn partner; the queue is
/// reshuffled when exhausted.
fn draw_pairs(items: &[usize], count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    debug_assert!(items.len() >= 2);
    let mut queue: Vec<usize> = Vec::new();
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        if queue.len() < 2 {
            let leftover = queue.pop();
            if let Some(first) = leftover {
                let mut partner = first;
                while partner == first {
                    partner = items[rng.next_below(items.len())];
                }
                pairs.push((first, partner));
                if pairs.len() == count {
                    break;
                }
            }
            queue = items.to_vec();
            rng.shuffle(&mut queue);
        }
        let a = queue.pop().expect("queue refilled");
        let b = queue.pop().expect("queue holds a partner");
        pairs.push((a, b));
    }
    pairs
}

/// Stack rows `[0, split_row)` of one image over rows `[split_row, rows)` of
/// another image with the same label. `per_class` composites per class.
pub fn compose_stack_mix(
    ds: &LabeledDataset,
    spec: &StackSpec,
    per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    ds.validate()?;
    spec.validate()?;
    let (rows, cols) = spec.canvas;
    for (i, img) in ds.images.iter().enumerate() {
        if img.shape() != [1, rows, cols] {
            return Err(Error::Shape {
                expected: format!("[1, {rows}, {cols}]"),
                found: format!("image {i}: {:?}", img.shape()),
            });
        }
    }
    let by_class = ds.indices_by_class();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, items) in by_class.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        if items.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} image(s); composition needs at least 2",
                items.len()
            )));
        }
        let mut rng = Rng::from_seed_stream(seed, class as u64);
        for (top, bottom) in draw_pairs(items, per_class, &mut rng) {
            let mut data = Vec::with_capacity(rows * cols);
            data.extend_from_slice(&ds.images[top].data()[..spec.split_row * cols]);
            data.extend_from_slice(&ds.images[bottom].data()[spec.split_row * cols..]);
            images.push(Tensor::from_vec(&[1, rows, cols], data)?);
            labels.push(class);
        }
    }
    Ok(LabeledDataset { images, labels, class_names: ds.class_names.clone() })
}

/// Stack two same-class 28x28 digits on a taller canvas: digit A at the top,
/// digit B starting at `bottom_row`, both horizontally centered.
pub fn stack_digits(
    ds: &LabeledDataset,
    canvas: (usize, usize),
    bottom_row: usize,
    per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    ds.validate()?;
    let (rows, cols) = canvas;
    let (dr, dc) = (28usize, 28usize);
    for (i, img) in ds.images.iter().enumerate() {
        if img.shape() != [1, dr, dc] {
            return Err(Error::Shape {
                expected: "[1, 28, 28]".into(),
                found: format!("image {i}: {:?}", img.shape()),
            });
        }
    }
    if cols < dc || bottom_row + dr > rows {
        return Err(Error::Config(format!(
            "canvas ({rows}, {cols}) cannot hold digits at rows 0 and {bottom_row}"
        )));
    }
    let col_off = (cols - dc) / 2;
    let by_class = ds.indices_by_class();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, items) in by_class.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        if items.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} image(s); stacking needs at least 2",
                items.len()
            )));
        }
        let mut rng = Rng::from_seed_stream(seed, class as u64);
        for (top, bottom) in draw_pairs(items, per_class, &mut rng) {
            let mut canvas_img = Tensor::zeros(&[1, rows, cols]);
            for (src, row_off) in [(top, 0usize), (bottom, bottom_row)] {
                let img = &ds.images[src];
                for r in 0..dr {
                    for c in 0..dc {
                        canvas_img.set3(0, row_off + r, col_off + c, img.at3(0, r, c));
                    }
                }
            }
            images.push(canvas_img);
            labels.push(class);
        }
    }
    Ok(LabeledDataset { images, labels, class_names: ds.class_names.clone() })
}

// ---------------------------------------------------------------------------
// Synthetic digit corpus
// ---------------------------------------------------------------------------

/// Seven-segment endpoints in a 15 x 21 glyph box: (x0, y0, x1, y1).
const SEGMENTS: [(f64, f64, f64, f64); 7] = [
    (2.0, 1.0, 12.0, 1.0),   // A: top
    (13.0, 2.0, 13.0, 9.0),  // B: top-right
    (13.0, 11.0, 13.0, 18.0), // C: bottom-right
    (2.0, 19.0, 12.0, 19.0), // D: bottom
    (1.0, 11.0, 1.0, 18.0),  // E: bottom-left
    (1.0, 2.0, 1.0, 9.0),    // F: top-left
    (2.0, 10.0, 12.0, 10.0), // G: middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 3, 2],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn segment_distance(px: f64, py: f64, seg: (f64, f64, f64, f64)) -> f64 {
    let (x0, y0, x1, y1) = seg;
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

/// Render one 28x28 digit with positional jitter, stroke-intensity
/// variation, and mild pixel noise. Deterministic given the generator.
pub fn render_digit(digit: usize, rng: &mut Rng) -> Tensor {
    assert!(digit < 10);
    let jitter_x = rng.next_below(5) as f64 - 2.0;
    let jitter_y = rng.next_below(5) as f64 - 2.0;
    let intensity = 0.75 + 0.25 * rng.next_f64();
    let radius = 1.0 + 0.3 * rng.next_f64();
    let (off_x, off_y) = (6.5 + jitter_x, 3.5 + jitter_y);
    let mut img = Tensor::zeros(&[1, 28, 28]);
    for y in 0..28 {
        for x in 0..28 {
            let (gx, gy) = (x as f64 - off_x, y as f64 - off_y);
            let mut coverage: f64 = 0.0;
            for &s in DIGIT_SEGMENTS[digit] {
                let d = segment_distance(gx, gy, SEGMENTS[s]);
                coverage = coverage.max((radius + 0.5 - d).clamp(0.0, 1.0));
            }
            let noise = 0.02 * rng.next_f64();
            img.set3(0, y, x, (intensity * coverage + noise).clamp(0.0, 1.0));
        }
    }
    img
}

/// Deterministic 10-class digit corpus, `per_class` images per class.
pub fn synthetic_digits(per_class: usize, seed: u64) -> LabeledDataset {
    let mut images = Vec::with_capacity(per_class * 10);
    let mut labels = Vec::with_capacity(per_class * 10);
    for digit in 0..10 {
        for i in 0..per_class {
            let mut rng = Rng::from_seed_stream(seed, (digit * per_class + i) as u64);
            images.push(render_digit(digit, &mut rng));
            labels.push(digit);
        }
    }
    LabeledDataset { images, labels, class_names: (0..10).map(|c| c.to_string()).collect() }
}

// ---------------------------------------------------------------------------
// PGM / PPM
// ---------------------------------------------------------------------------

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale P5 bytes, maxval 255. Accepts `(rows, cols)` or `(1, rows, cols)`.
pub fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = match image.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::Shape {
                expected: "grayscale image".into(),
                found: format!("{other:?}"),
            })
        }
    };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, pgm_bytes(image)?)?;
    Ok(())
}

fn parse_netpbm_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::Format(format!("not a {magic} file")));
    }
    // Three whitespace-separated fields after the magic; '#' starts a comment.
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated header".into()));
        }
        let field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Format("non-ASCII header".into()))?;
        fields.push(
            field
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad header field {field:?}")))?,
        );
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    if fields[2] != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", fields[2])));
    }
    Ok((fields[0], fields[1], pos))
}

/// Read a P5 grayscale image; pixels scaled by 1/255.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    pgm_from_bytes(&bytes)
}

pub fn pgm_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let (cols, rows, payload) = parse_netpbm_header(bytes, "P5")?;
    let expected = payload + rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, actual: bytes.len() });
    }
    let data: Vec<f64> = bytes[payload..payload + rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Tensor::from_vec(&[1, rows, cols], data)
}

/// Color P6 bytes from interleaved RGB.
pub fn ppm_bytes(rgb: &[u8], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rgb.len() != rows * cols * 3 {
        return Err(Error::Shape {
            expected: format!("{} RGB bytes", rows * cols * 3),
            found: format!("{}", rgb.len()),
        });
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn write_ppm(path: &Path, rgb: &[u8], rows: usize, cols: usize) -> Result<()> {
    std::fs::write(path, ppm_bytes(rgb, rows, cols)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// Composite-dataset manifest: image paths plus labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub canvas: (usize, usize),
    pub split_row: usize,
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub path: PathBuf,
    pub label: usize,
    pub class_name: String,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, crate::report::canonical_json(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Load every referenced image, resolving relative paths against the
    /// manifest's directory.
    pub fn load_dataset(&self, base: &Path) -> Result<LabeledDataset> {
        let mut images = Vec::with_capacity(self.items.len());
        let mut labels = Vec::with_capacity(self.items.len());
        let mut class_names: Vec<String> = Vec::new();
        for item in &self.items {
            let path = if item.path.is_absolute() { item.path.clone() } else { base.join(&item.path) };
            images.push(read_pgm(&path)?);
            labels.push(item.label);
            if item.label >= class_names.len() {
                class_names.resize(item.label + 1, String::new());
            }
            class_names[item.label] = item.class_name.clone();
        }
        Ok(LabeledDataset { images, labels, class_names })
    }
}
