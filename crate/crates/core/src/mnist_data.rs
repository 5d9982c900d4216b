//! MNIST ingestion (IDX format), average-pool down-scaling and pruning of
//! pixels that never carry signal in the training split.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Default number of training items held out at the end of the train file for
/// architecture-search evaluation.
pub const EVAL_HOLDOUT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

/// Images stored row-major in one flat buffer, `input_dim` values per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<u8>,
    input_dim: usize,
    /// Image grid, if the vectors still form one (lost after pruning).
    shape: Option<(usize, usize)>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<u8>,
        input_dim: usize,
        shape: Option<(usize, usize)>,
        split: Split,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Consistency("input_dim must be positive".into()));
        }
        if pixels.len() != labels.len() * input_dim {
            return Err(Error::Consistency(format!(
                "{} pixel values do not hold {} images of {} values",
                pixels.len(),
                labels.len(),
                input_dim
            )));
        }
        if let Some((r, c)) = shape {
            if r * c != input_dim {
                return Err(Error::Consistency(format!("shape {r}x{c} != input_dim {input_dim}")));
            }
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Consistency(format!("label {bad} outside 0..9")));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Consistency("pixel intensity outside [0, 1]".into()));
        }
        Ok(Self { pixels, labels, input_dim, shape, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.pixels[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f32], usize)> + '_ {
        self.pixels
            .chunks_exact(self.input_dim)
            .zip(self.labels.iter().map(|&l| l as usize))
    }

    /// Contiguous sub-range `[start, end)` as a new dataset with the same split tag.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        Dataset {
            pixels: self.pixels[start * self.input_dim..end * self.input_dim].to_vec(),
            labels: self.labels[start..end].to_vec(),
            input_dim: self.input_dim,
            shape: self.shape,
            split: self.split,
        }
    }

    /// Items at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.input_dim;
        Dataset {
            pixels: idx.iter().flat_map(|&i| self.pixels[i * d..(i + 1) * d].iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            input_dim: d,
            shape: self.shape,
            split: self.split,
        }
    }

    /// First `n` items.
    pub fn head(&self, n: usize) -> Dataset {
        self.slice(0, n)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_u32_be(r: &mut dyn Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Consistency(format!("file truncated in {what}")),
        _ => Error::Io(e),
    })?;
    Ok(u32::from_be_bytes(buf))
}

fn read_body(r: &mut dyn Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut body = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut body)?;
    if body.len() != len {
        return Err(Error::Consistency(format!(
            "{what}: header announces {len} bytes, file holds {}",
            body.len()
        )));
    }
    Ok(body)
}

/// Raw IDX image tensor: `(count, rows, cols, bytes)`.
pub fn read_idx_images(r: &mut dyn Read) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32_be(r, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32_be(r, "image header")? as usize;
    let rows = read_u32_be(r, "image header")? as usize;
    let cols = read_u32_be(r, "image header")? as usize;
    let body = read_body(r, n * rows * cols, "image data")?;
    Ok((n, rows, cols, body))
}

pub fn read_idx_labels(r: &mut dyn Read) -> Result<Vec<u8>> {
    let magic = read_u32_be(r, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32_be(r, "label header")? as usize;
    read_body(r, n, "label data")
}

pub fn write_idx_images(w: &mut dyn Write, rows: usize, cols: usize, images: &[u8]) -> io::Result<()> {
    let n = images.len() / (rows * cols);
    w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    for v in [n, rows, cols] {
        w.write_all(&(v as u32).to_be_bytes())?;
    }
    w.write_all(images)
}

pub fn write_idx_labels(w: &mut dyn Write, labels: &[u8]) -> io::Result<()> {
    w.write_all(&LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)
}

/// Loads an image/label IDX pair (plain or `.gz`). Intensities are scaled by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (n, rows, cols, bytes) = read_idx_images(&mut *open_maybe_gz(images_path.as_ref())?)?;
    let labels = read_idx_labels(&mut *open_maybe_gz(labels_path.as_ref())?)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!("{n} images but {} labels", labels.len())));
    }
    let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(pixels, labels, rows * cols, Some((rows, cols)), Split::Train)
}

/// Train / held-out evaluation / official test splits.
#[derive(Debug, Clone)]
pub struct MnistSplits {
    pub train: Dataset,
    pub eval: Dataset,
    pub test: Dataset,
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
        if candidate.exists() {
            return Ok(candidate);
        }
    }
    Err(Error::Unresolved(format!("{stem} in {}", dir.display())))
}

impl MnistSplits {
    /// Loads the four standard MNIST files from `dir`. The last `eval_holdout`
    /// training items become the evaluation split.
    pub fn load(dir: impl AsRef<Path>, eval_holdout: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let full = load_idx(
            find_idx(dir, "train-images-idx3-ubyte")?,
            find_idx(dir, "train-labels-idx1-ubyte")?,
        )?;
        let test = load_idx(
            find_idx(dir, "t10k-images-idx3-ubyte")?,
            find_idx(dir, "t10k-labels-idx1-ubyte")?,
        )?
        .with_split(Split::Test);
        if eval_holdout >= full.len() {
            return Err(Error::Config(format!(
                "evaluation holdout {eval_holdout} leaves no training data"
            )));
        }
        let cut = full.len() - eval_holdout;
        Ok(Self {
            train: full.slice(0, cut),
            eval: full.slice(cut, full.len()).with_split(Split::Eval),
            test,
        })
    }

    /// Pools every split; with pruning enabled the mask is fitted on the
    /// training split and reused for the others.
    pub fn downscale(&self, spec: &PoolSpec) -> Result<(MnistSplits, Option<PruneMask>)> {
        let train = pool(&self.train, spec)?;
        let eval = pool(&self.eval, spec)?;
        let test = pool(&self.test, spec)?;
        if !spec.prune_constant_pixels {
            return Ok((MnistSplits { train, eval, test }, None));
        }
        let mask = PruneMask::fit(&train);
        let out = MnistSplits {
            train: mask.apply(&train)?,
            eval: mask.apply(&eval)?,
            test: mask.apply(&test)?,
        };
        Ok((out, Some(mask)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Average,
}

/// Where the zero rows/columns go when the image does not tile the stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PadPlacement {
    /// Top and left.
    #[default]
    Leading,
    /// Bottom and right.
    Trailing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    #[serde(default)]
    pub mode: PoolMode,
    #[serde(default)]
    pub padding: PadPlacement,
    pub prune_constant_pixels: bool,
}

impl PoolSpec {
    /// 3x3 average pooling, stride 3, pruning on.
    pub fn mnist_3x3() -> Self {
        Self {
            window: (3, 3),
            stride: (3, 3),
            mode: PoolMode::Average,
            padding: PadPlacement::Leading,
            prune_constant_pixels: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window.0 == 0 || self.window.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Config("pool window and stride must be positive".into()));
        }
        Ok(())
    }

    /// Output grid for an input grid.
    pub fn output_shape(&self, rows: usize, cols: usize) -> (usize, usize) {
        let out = |n: usize, w: usize, s: usize| {
            let padded = n.max(w).div_ceil(s) * s;
            (padded - w) / s + 1
        };
        (out(rows, self.window.0, self.stride.0), out(cols, self.window.1, self.stride.1))
    }
}

/// Average pooling over zero-padded images. Each output is the window sum
/// divided by the full window area, so padded cells count as zeros.
pub fn pool(d: &Dataset, spec: &PoolSpec) -> Result<Dataset> {
    spec.validate()?;
    let (rows, cols) = d
        .shape()
        .ok_or_else(|| Error::Config("pooling needs images that still form a grid".into()))?;
    let (out_r, out_c) = spec.output_shape(rows, cols);
    let (wr, wc) = spec.window;
    let (sr, sc) = spec.stride;
    let (pad_r, pad_c) = match spec.padding {
        PadPlacement::Trailing => (0, 0),
        PadPlacement::Leading => {
            let need = |n: usize, w: usize, s: usize, o: usize| ((o - 1) * s + w).saturating_sub(n);
            (need(rows, wr, sr, out_r), need(cols, wc, sc, out_c))
        }
    };
    let area = (wr * wc) as f32;
    let mut pixels = Vec::with_capacity(d.len() * out_r * out_c);
    for (img, _) in d.iter() {
        for orow in 0..out_r {
            for ocol in 0..out_c {
                let mut sum = 0.0f32;
                for dr in 0..wr {
                    let pr = orow * sr + dr;
                    let Some(r) = pr.checked_sub(pad_r).filter(|&r| r < rows) else { continue };
                    for dc in 0..wc {
                        let pc = ocol * sc + dc;
                        if let Some(c) = pc.checked_sub(pad_c).filter(|&c| c < cols) {
                            sum += img[r * cols + c];
                        }
                    }
                }
                pixels.push((sum / area).clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(pixels, d.labels.clone(), out_r * out_c, Some((out_r, out_c)), d.split)
}

/// Indices of input positions kept after dropping positions that are zero in
/// every image of the split the mask was fitted on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub source_dim: usize,
    pub retained: Vec<usize>,
}

impl PruneMask {
    pub fn fit(train: &Dataset) -> Self {
        let mut any = vec![false; train.input_dim()];
        for (img, _) in train.iter() {
            for (flag, &p) in any.iter_mut().zip(img) {
                *flag |= p != 0.0;
            }
        }
        Self {
            source_dim: train.input_dim(),
            retained: any.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect(),
        }
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if d.input_dim() != self.source_dim {
            return Err(Error::Shape { expected: self.source_dim, got: d.input_dim() });
        }
        let mut pixels = Vec::with_capacity(d.len() * self.retained.len());
        for (img, _) in d.iter() {
            pixels.extend(self.retained.iter().map(|&i| img[i]));
        }
        Dataset::new(pixels, d.labels.clone(), self.retained.len(), None, d.split)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.retained)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>, source_dim: usize) -> Result<Self> {
        let retained: Vec<usize> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if retained.iter().any(|&i| i >= source_dim) {
            return Err(Error::Consistency("pruning mask index out of range".into()));
        }
        Ok(Self { source_dim, retained })
    }
}
