//! Deterministic synthetic shapes with image-level labels and pixel masks.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use swt_tensor::Tensor;

use crate::error::{Error, Result};
use crate::losses::LabelVector;

pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const NUM_SHAPE_CLASSES: usize = CLASS_NAMES.len();
pub const MANIFEST_FILE: &str = "manifest.txt";

const BASE_COLORS: [[f32; 3]; NUM_SHAPE_CLASSES] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.90, 0.80, 0.15],
];
const BACKGROUND_LEVEL: f32 = 0.45;
const MAX_ATTEMPTS: usize = 1000;
const MARGIN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub image_size: usize,
    pub min_object: usize,
    pub max_object: usize,
    pub color_jitter: f32,
    pub noise: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 128,
            min_object: 16,
            max_object: 48,
            color_jitter: 0.1,
            noise: 0.15,
        }
    }
}

impl DataConfig {
    /// Defaults with object sizes scaled to `image_size`.
    pub fn for_image(image_size: usize) -> Self {
        let scale = |v: usize| (v * image_size / 128).max(3);
        DataConfig {
            image_size,
            min_object: scale(16),
            max_object: scale(48),
            ..Default::default()
        }
    }

    fn validate(&self, seed: u64) -> Result<()> {
        if self.min_object == 0 || self.min_object > self.max_object || self.max_object > self.image_size {
            return Err(Error::Generation {
                seed,
                msg: format!(
                    "object sizes {}..={} do not fit a {} px image",
                    self.min_object, self.max_object, self.image_size
                ),
            });
        }
        Ok(())
    }
}

/// Row-major class-index map; background is the class count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Mask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub labels: LabelVector,
    pub gt_mask: Mask,
}

impl Sample {
    /// Labels implied by the mask.
    pub fn labels_from_mask(&self) -> LabelVector {
        let mut v = vec![false; self.labels.num_classes()];
        for &c in &self.gt_mask.data {
            if let Some(slot) = v.get_mut(c as usize) {
                *slot = true;
            }
        }
        LabelVector(v)
    }
}

fn inside(class: usize, u: f32, v: f32) -> bool {
    // u, v in [0, 1] across the object's bounding box
    let (dx, dy) = (u - 0.5, v - 0.5);
    match class {
        0 => dx * dx + dy * dy <= 0.25,
        1 => true,
        2 => dx.abs() <= v / 2.0,
        _ => dx.abs() <= 1.0 / 6.0 || dy.abs() <= 1.0 / 6.0,
    }
}

#[derive(Clone, Copy)]
struct Placement {
    class: usize,
    x: usize,
    y: usize,
    size: usize,
}

impl Placement {
    fn overlaps(&self, o: &Placement) -> bool {
        let sep = |a: usize, asz: usize, b: usize, bsz: usize| a + asz + MARGIN <= b || b + bsz + MARGIN <= a;
        !(sep(self.x, self.size, o.x, o.size) || sep(self.y, self.size, o.y, o.size))
    }
}

pub fn gen_sample(seed: u64, cfg: &DataConfig) -> Result<Sample> {
    cfg.validate(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let count = rng.random_range(1..=3);
    let mut classes: Vec<usize> = (0..NUM_SHAPE_CLASSES).collect();
    for i in 0..count {
        let j = rng.random_range(i..NUM_SHAPE_CLASSES);
        classes.swap(i, j);
    }
    classes.truncate(count);

    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    let mut attempts = 0;
    for &class in &classes {
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Generation {
                    seed,
                    msg: format!("no non-overlapping placement after {MAX_ATTEMPTS} attempts"),
                });
            }
            let size = rng.random_range(cfg.min_object..=cfg.max_object);
            let cand = Placement {
                class,
                x: rng.random_range(0..=n - size),
                y: rng.random_range(0..=n - size),
                size,
            };
            if placed.iter().all(|p| !p.overlaps(&cand)) {
                placed.push(cand);
                break;
            }
        }
    }

    let bg = NUM_SHAPE_CLASSES as u8;
    let mut mask = Mask::filled(n, n, bg);
    let mut image = vec![BACKGROUND_LEVEL; 3 * n * n];
    for p in &placed {
        let color: [f32; 3] =
            std::array::from_fn(|ch| BASE_COLORS[p.class][ch] + rng.random_range(-cfg.color_jitter..=cfg.color_jitter));
        let s = p.size as f32;
        for yy in 0..p.size {
            for xx in 0..p.size {
                if inside(p.class, (xx as f32 + 0.5) / s, (yy as f32 + 0.5) / s) {
                    let idx = (p.y + yy) * n + p.x + xx;
                    mask.data[idx] = p.class as u8;
                    for (ch, &c) in color.iter().enumerate() {
                        image[ch * n * n + idx] = c;
                    }
                }
            }
        }
    }
    for v in &mut image {
        *v = (*v + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
    }
    let labels = LabelVector::from_classes(NUM_SHAPE_CLASSES, &classes);
    let sample = Sample {
        id: seed,
        image: Tensor::from_vec(&[3, n, n], image)?,
        labels,
        gt_mask: mask,
    };
    debug_assert_eq!(sample.labels_from_mask(), sample.labels);
    Ok(sample)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}, expected train or val"))),
        }
    }
}

/// Number of leading samples that form the training split.
pub fn train_count(n: usize) -> usize {
    (n * 4 + 2) / 5
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == which)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn find(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Samples with ids `base_seed..base_seed+n`; the first 80% are training.
pub fn gen_dataset(n: usize, base_seed: u64, cfg: &DataConfig) -> Result<Dataset> {
    let cut = train_count(n);
    let samples = (0..n as u64)
        .map(|i| gen_sample(base_seed + i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let splits = (0..n).map(|i| if i < cut { Split::Train } else { Split::Val }).collect();
    Ok(Dataset { samples, splits })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary PPM of a `[3, H, W]` tensor in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Dimension(format!("PPM needs [3,H,W], got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        out.extend((0..3).map(|ch| quantize(d[ch * h * w + i])));
    }
    Ok(out)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PNM with maxval 255; returns (magic, width, height, payload).
pub fn decode_pnm<'a>(bytes: &'a [u8], path: &Path) -> Result<(&'a str, usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
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
            return Err(Error::format(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(path, "non-ASCII header"))?);
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::format(path, format!("unsupported magic {m}"))),
    };
    let payload = bytes.get(pos..pos + channels * w * h).ok_or_else(|| Error::format(path, "truncated payload"))?;
    Ok((fields[0], w, h, payload))
}

fn image_file(id: u64) -> String {
    format!("{id:06}.ppm")
}

fn mask_file(id: u64) -> String {
    format!("{id:06}_mask.pgm")
}

/// Writes images, masks and then the manifest, so a failed export leaves no
/// manifest behind.
pub fn export_dataset(data: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (s, split) in data.samples.iter().zip(&data.splits) {
        let (img, msk) = (image_file(s.id), mask_file(s.id));
        write_file(&dir.join(&img), &encode_ppm(&s.image)?)?;
        write_file(&dir.join(&msk), &encode_pgm(s.gt_mask.width, s.gt_mask.height, &s.gt_mask.data))?;
        writeln!(manifest, "{} {} {img} {msk} {}", s.id, s.labels, split.as_str()).expect("string write");
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut data = Dataset::default();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::format(&path, format!("line {}: {m}", lineno + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, bits, img, msk, split] = parts[..] else {
            return Err(bad("expected 5 fields"));
        };
        let id: u64 = id.parse().map_err(|_| bad("bad id"))?;
        let labels = LabelVector::parse_bitstring(bits).ok_or_else(|| bad("bad label bits"))?;
        let split: Split = split.parse().map_err(|_| bad("bad split"))?;

        let img_path = dir.join(img);
        let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let (magic, w, h, px) = decode_pnm(&bytes, &img_path)?;
        if magic != "P6" {
            return Err(Error::format(&img_path, "expected a P6 image"));
        }
        let mut chw = vec![0f32; 3 * w * h];
        for i in 0..w * h {
            for ch in 0..3 {
                chw[ch * w * h + i] = px[3 * i + ch] as f32 / 255.0;
            }
        }

        let msk_path = dir.join(msk);
        let bytes = fs::read(&msk_path).map_err(|e| Error::io(&msk_path, e))?;
        let (magic, mw, mh, mpx) = decode_pnm(&bytes, &msk_path)?;
        if magic != "P5" || (mw, mh) != (w, h) {
            return Err(Error::format(&msk_path, "mask must be a P5 map matching its image"));
        }
        data.samples.push(Sample {
            id,
            image: Tensor::from_vec(&[3, h, w], chw)?,
            labels,
            gt_mask: Mask {
                height: h,
                width: w,
                data: mpx.to_vec(),
            },
        });
        data.splits.push(split);
    }
    Ok(data)
}
