//! Synthetic referring-segmentation scenes and their on-disk manifest.
//!
//! Each scene has 2 to 4 non-overlapping shapes in distinct colours on a
//! noise background. The target always has a distractor of the same kind,
//! so only the colour in the prompt tells them apart.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::{self, Mask};
use crate::rng::{self, SeededRng};

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.1]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.9, 0.9, 0.1]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the pixel centred at `(x, y)` lies inside the shape of
    /// half-extent `r` centred at `(cx, cy)`. Triangles point up.
    fn contains(self, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                let top = cy - r;
                (top..=cy + r).contains(&y) && dx.abs() <= (y - top) / 2.0
            }
        }
    }

    fn raster(self, size: usize, cx: f64, cy: f64, r: f64) -> Mask {
        Mask::from_fn(size, size, |row, col| self.contains(cx, cy, r, col as f64 + 0.5, row as f64 + 0.5))
    }
}

/// One image with its target mask and the prompts that name the target.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `H x W x 3`, row-major, 8-bit.
    pub image: Vec<u8>,
    pub mask: Mask,
    pub prompts: Vec<String>,
    /// Every shape in the scene; what a prompt-blind segmenter would return.
    pub all_shapes: Option<Mask>,
}

/// Compares what a manifest stores; the scene layout is generator metadata.
impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.image == other.image && self.mask == other.mask && self.prompts == other.prompts
    }
}

impl Sample {
    pub fn size(&self) -> usize {
        self.mask.height()
    }

    /// `[H, W, 3]` with values in `[0, 1]`.
    pub fn image_tensor(&self) -> Tensor {
        let s = self.size();
        let data = self.image.iter().map(|&v| f64::from(v) / 255.0).collect();
        Tensor::new(data, &[s, s, 3]).expect("image buffer matches its mask")
    }

    pub fn mask_tensor(&self) -> Tensor {
        let s = self.size();
        Tensor::new(self.mask.to_f64(), &[s, s]).expect("mask is square")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Split, &Sample)> {
        Split::ALL.into_iter().flat_map(move |s| self.get(s).iter().map(move |x| (s, x)))
    }
}

/// Generator settings; serializable so a run config can embed them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n: usize,
    pub size: usize,
}

pub const SUPPORTED_SIZES: [usize; 3] = [32, 64, 128];

/// `70/15/15` sizes for `n` samples; validation and test get `floor(0.15 n)`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n * 15 / 100;
    (n - 2 * val, val, val)
}

fn prompts(color: &str, kind: ShapeKind) -> Vec<String> {
    let k = kind.name();
    let region = if kind == ShapeKind::Circle { "round" } else { k };
    vec![format!("the {color} {k}"), format!("segment the {k} that is {color}"), format!("{color} {region} region")]
}

/// Places one shape per entry of `kinds` without overlap. Returns the shape
/// masks and their union, or `None` when a shape found no room.
fn place(rng: &mut SeededRng, size: usize, kinds: &[ShapeKind]) -> Option<(Vec<Mask>, Mask)> {
    let h = size as f64;
    let mut occupied = Mask::empty(size, size);
    let mut shapes = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut placed = None;
        for _ in 0..50 {
            let r = rng.random_range(0.1 * h..0.2 * h);
            let cx = rng.random_range(r + 1.0..h - r - 1.0);
            let cy = rng.random_range(r + 1.0..h - r - 1.0);
            let grown = kind.raster(size, cx, cy, r + 2.0);
            if !grown.data().iter().zip(occupied.data()).any(|(a, b)| *a && *b) {
                placed = Some(kind.raster(size, cx, cy, r));
                break;
            }
        }
        let m = placed.filter(|m| !m.is_empty())?;
        for (i, &v) in m.data().iter().enumerate() {
            if v {
                occupied.set(i / size, i % size, true);
            }
        }
        shapes.push(m);
    }
    Some((shapes, occupied))
}

/// Noise background with shape `i` filled in colour `palette[i]`.
fn paint(rng: &mut SeededRng, size: usize, shapes: &[Mask], palette: &[usize]) -> Vec<u8> {
    let mut image: Vec<u8> = (0..size * size * 3).map(|_| (rng.random_range(0.0..0.3f64) * 255.0).round() as u8).collect();
    for (m, &ci) in shapes.iter().zip(palette) {
        let rgb = COLORS[ci].1.map(|v| (v * 255.0).round() as u8);
        for (i, _) in m.data().iter().enumerate().filter(|(_, v)| **v) {
            image[3 * i..3 * i + 3].copy_from_slice(&rgb);
        }
    }
    image
}

fn scene(rng: &mut SeededRng, size: usize) -> Sample {
    loop {
        let k = rng.random_range(2..=4usize);
        let mut palette: Vec<usize> = (0..COLORS.len()).collect();
        palette.shuffle(rng);
        let mut kinds: Vec<ShapeKind> = (0..k).map(|_| *ShapeKind::ALL.choose(rng).expect("nonempty")).collect();
        // Shape 0 is the target and shape 1 its same-kind distractor.
        kinds[1] = kinds[0];
        let Some((mut shapes, occupied)) = place(rng, size, &kinds) else { continue };
        let image = paint(rng, size, &shapes, &palette);
        return Sample {
            image,
            mask: shapes.swap_remove(0),
            prompts: prompts(COLORS[palette[0]].0, kinds[0]),
            all_shapes: Some(occupied),
        };
    }
}

/// Deterministic in `(seed, n, size)`; sample `i` draws from its own stream.
pub fn generate(spec: &GeneratorSpec) -> Result<DatasetSplits> {
    if spec.n < 3 {
        return Err(Error::config("data.n", format!("{} samples cannot fill three splits", spec.n)));
    }
    if !SUPPORTED_SIZES.contains(&spec.size) {
        return Err(Error::config("data.size", format!("{} is not one of {SUPPORTED_SIZES:?}", spec.size)));
    }
    let (n_train, n_val, _) = split_sizes(spec.n);
    let mut out = DatasetSplits::default();
    for i in 0..spec.n {
        let mut r = rng::derived(spec.seed, (1 << 32) + i as u64);
        let s = scene(&mut r, spec.size);
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        out.get_mut(split).push(s);
    }
    Ok(out)
}

/// Mean DSC of a segmenter that ignores the prompt and returns every shape.
pub fn text_blind_ceiling(samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let all = s
            .all_shapes
            .as_ref()
            .ok_or_else(|| Error::config("data", "samples carry no scene layout"))?;
        total += metrics::dsc(all, &s.mask)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    pub mask: String,
    pub prompts: Vec<String>,
    pub split: Split,
}

pub const MANIFEST: &str = "manifest.jsonl";

fn write_png(path: &Path, size: usize, data: &[u8], color: png::ColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), size as u32, size as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    enc.write_header().map_err(fail)?.write_image_data(data).map_err(fail)
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |e: png::DecodingError| Error::io(path, std::io::Error::other(e));
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fail)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::io(path, std::io::Error::other("expected an 8-bit PNG")));
    }
    buf.truncate(info.line_size * info.height as usize);
    Ok((info.height as usize, info.width as usize, info.color_type, buf))
}

/// Writes `images/NNNNNN.png`, `masks/NNNNNN.png` and the manifest under `dir`.
pub fn save(data: &DatasetSplits, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = dir.join(MANIFEST);
    let file = File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for (i, (split, s)) in data.iter().enumerate() {
        let rec = Record {
            image: format!("images/{i:06}.png"),
            mask: format!("masks/{i:06}.png"),
            prompts: s.prompts.clone(),
            split,
        };
        write_png(&dir.join(&rec.image), s.size(), &s.image, png::ColorType::Rgb)?;
        let mask: Vec<u8> = s.mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
        write_png(&dir.join(&rec.mask), s.size(), &mask, png::ColorType::Grayscale)?;
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads a manifest; relative paths resolve against its directory.
pub fn load(manifest: &Path) -> Result<DatasetSplits> {
    let file = File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut out = DatasetSplits::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest { path: manifest.to_path_buf(), line: line_no, reason };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.prompts.is_empty() || rec.prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(bad("prompts must be a nonempty list of nonempty strings".into()));
        }
        let (ih, iw, ic, image) = read_png(&root.join(&rec.image)).map_err(|e| bad(e.to_string()))?;
        let (mh, mw, mc, mask) = read_png(&root.join(&rec.mask)).map_err(|e| bad(e.to_string()))?;
        if ic != png::ColorType::Rgb || mc != png::ColorType::Grayscale {
            return Err(bad("images must be RGB and masks grayscale".into()));
        }
        if (ih, iw) != (mh, mw) || ih != iw {
            return Err(bad(format!("image {ih}x{iw} and mask {mh}x{mw} must be equal squares")));
        }
        if let Some(v) = mask.iter().find(|&&v| v != 0 && v != 255) {
            return Err(bad(format!("mask value {v} is not 0 or 255")));
        }
        let mask = Mask::new(mh, mw, mask.iter().map(|&v| v == 255).collect())?;
        out.get_mut(rec.split).push(Sample { image, mask, prompts: rec.prompts, all_shapes: None });
    }
    Ok(out)
}

/// A uniformly chosen prompt.
pub fn sample_prompt<'a>(s: &'a Sample, rng: &mut SeededRng) -> &'a str {
    s.prompts.choose(rng).expect("prompt lists are nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> GeneratorSpec {
        GeneratorSpec { seed: 0, n, size: 32 }
    }

    #[test]
    fn split_sizes_follow_seventy_fifteen_fifteen() {
        assert_eq!(split_sizes(100), (70, 15, 15));
        assert_eq!(split_sizes(300), (210, 45, 45));
        let d = generate(&spec(100)).unwrap();
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (70, 15, 15));
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(matches!(generate(&spec(2)), Err(Error::Config { .. })));
        assert!(generate(&GeneratorSpec { seed: 0, n: 10, size: 48 }).is_err());
    }

    #[test]
    fn masks_nonempty_and_inside_scene() {
        let d = generate(&spec(30)).unwrap();
        for (_, s) in d.iter() {
            assert!(!s.mask.is_empty());
            let all = s.all_shapes.as_ref().unwrap();
            assert!(s.mask.data().iter().zip(all.data()).all(|(m, a)| !m || *a));
            assert_eq!(s.prompts.len(), 3);
        }
    }

    #[test]
    fn prompt_templates() {
        assert_eq!(
            prompts("red", ShapeKind::Circle),
            ["the red circle", "segment the circle that is red", "red round region"]
        );
    }

    #[test]
    fn split_labels_parse() {
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
    }
}
