//! Hyperspectral cube container, spectral tokenization and synthetic batches.
//!
//! A cube file is one JSON header line followed by the little-endian `f32`
//! payload in band-sequential order (`band, row, col`) and, when the header
//! lists `"labels": true`, an `i32` label raster of `height * width` entries
//! (0 = unlabeled).

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::TokenGeometry;
use crate::tensor::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_NUM_CLASSES: usize = 16;
const STD_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Band-sequential values, index `(band * height + row) * width + col`.
    pub values: Vec<f32>,
    pub labels: Option<Vec<i32>>,
}

#[derive(Serialize, Deserialize, Debug)]
struct CubeHeader {
    height: usize,
    width: usize,
    bands: usize,
    dtype: String,
    layout: String,
    #[serde(default)]
    standardize: bool,
    #[serde(default)]
    labels: bool,
}

impl HsiCube {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        values: Vec<f32>,
        labels: Option<Vec<i32>>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Format(format!("empty cube extents {height}x{width}x{bands}")));
        }
        if values.len() != height * width * bands {
            return Err(Error::Format(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite cube value at index {pos}")));
        }
        if let Some(l) = &labels {
            if l.len() != height * width {
                return Err(Error::Format(format!(
                    "label raster has {} entries, expected {}",
                    l.len(),
                    height * width
                )));
            }
            if l.iter().any(|&v| v < 0) {
                return Err(Error::Data("negative class label in raster".into()));
            }
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            values,
            labels,
        })
    }

    pub fn value(&self, band: usize, row: usize, col: usize) -> f32 {
        self.values[(band * self.height + row) * self.width + col]
    }

    /// Number of classes implied by the label raster (largest label).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().copied().max())
            .filter(|&m| m > 0)
            .map(|m| m as usize)
    }

    /// Per-band standardization to zero mean and unit variance (ddof 0).
    pub fn standardize(&mut self) {
        let plane = self.height * self.width;
        for band in self.values.chunks_mut(plane) {
            let n = band.len() as f64;
            let mean = band.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = band.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt().max(STD_EPS);
            for v in band.iter_mut() {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
    }
}

pub fn write_cube(path: &Path, cube: &HsiCube, standardize: bool) -> Result<()> {
    let header = CubeHeader {
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        dtype: "f32".into(),
        layout: "band-sequential".into(),
        standardize,
        labels: cube.labels.is_some(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for v in &cube.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &cube.labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: CubeHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("bad cube header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.layout != "band-sequential" {
        return Err(Error::Format(format!("unsupported layout {:?}", header.layout)));
    }
    let count = header.height * header.width * header.bands;
    let label_count = if header.labels {
        header.height * header.width
    } else {
        0
    };
    let payload = &bytes[nl + 1..];
    let expected = 4 * (count + label_count);
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected} bytes",
            payload.len()
        )));
    }
    let words = |b: &[u8]| -> Vec<[u8; 4]> {
        b.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
    };
    let values = words(&payload[..4 * count]).into_iter().map(f32::from_le_bytes).collect();
    let labels = header
        .labels
        .then(|| words(&payload[4 * count..]).into_iter().map(i32::from_le_bytes).collect());
    let mut cube = HsiCube::new(header.height, header.width, header.bands, values, labels)?;
    if header.standardize {
        cube.standardize();
    }
    Ok(cube)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerParams {
    /// Odd spatial patch side.
    pub patch: usize,
    pub band_group: usize,
    pub stride: usize,
}

impl Default for TokenizerParams {
    fn default() -> Self {
        TokenizerParams {
            patch: 1,
            band_group: 10,
            stride: 10,
        }
    }
}

impl TokenizerParams {
    pub fn validate(&self, bands: usize) -> Result<()> {
        if self.patch == 0 || self.patch % 2 == 0 {
            return Err(Error::Config(format!("patch size must be odd, got {}", self.patch)));
        }
        if self.band_group == 0 || self.stride == 0 {
            return Err(Error::Config("band group and stride must be positive".into()));
        }
        if self.band_group > bands {
            return Err(Error::Config(format!(
                "band group {} exceeds {bands} bands",
                self.band_group
            )));
        }
        Ok(())
    }

    pub fn num_tokens(&self, bands: usize) -> usize {
        (bands - self.band_group).div_ceil(self.stride) + 1
    }

    pub fn token_width(&self) -> usize {
        self.patch * self.patch * self.band_group
    }

    pub fn geometry(&self, bands: usize, num_classes: usize) -> Result<TokenGeometry> {
        self.validate(bands)?;
        TokenGeometry::new(self.num_tokens(bands), self.token_width(), num_classes)
    }
}

/// Symmetric (edge-duplicating) reflection of `i` into `0..n`.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Token sequence for one pixel, `[T * D_in]` row-major. Token `t` covers
/// bands `t * s .. t * s + g` (the last one right-aligned to the final band)
/// and is flattened in `(dy, dx, band)` order over the mirror-padded patch.
pub fn tokenize(cube: &HsiCube, row: usize, col: usize, p: &TokenizerParams) -> Result<Vec<f64>> {
    p.validate(cube.bands)?;
    if row >= cube.height || col >= cube.width {
        return Err(Error::Config(format!(
            "pixel ({row}, {col}) outside {}x{} cube",
            cube.height, cube.width
        )));
    }
    let t = p.num_tokens(cube.bands);
    let half = (p.patch / 2) as isize;
    let mut out = Vec::with_capacity(t * p.token_width());
    for tok in 0..t {
        let start = (tok * p.stride).min(cube.bands - p.band_group);
        for dy in -half..=half {
            let r = mirror(row as isize + dy, cube.height);
            for dx in -half..=half {
                let c = mirror(col as isize + dx, cube.width);
                for band in start..start + p.band_group {
                    out.push(cube.value(band, r, c) as f64);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Real,
    Random,
    Ones,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Real => "REAL",
            Provenance::Random => "RANDOM",
            Provenance::Ones => "ONES",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchKind {
    Random,
    Ones,
}

#[derive(Clone, Debug)]
pub struct TokenBatch {
    data: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
}

impl TokenBatch {
    pub fn new(
        data: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::dim("TokenBatch", format!("data must be [B, T, D], got {:?}", data.shape())));
        }
        if labels.len() != data.shape()[0] {
            return Err(Error::dim(
                "TokenBatch",
                format!("{} labels for batch of {}", labels.len(), data.shape()[0]),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside 0..{num_classes}")));
        }
        if !data.all_finite() {
            return Err(Error::Data("non-finite batch data".into()));
        }
        Ok(TokenBatch {
            data,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// Single-sample batch holding row `i`.
    pub fn sample(&self, i: usize) -> TokenBatch {
        let s = self.data.shape();
        let per = s[1] * s[2];
        let data = Tensor::new(vec![1, s[1], s[2]], self.data.data()[i * per..(i + 1) * per].to_vec())
            .expect("row slice matches shape");
        TokenBatch {
            data,
            labels: vec![self.labels[i]],
            num_classes: self.num_classes,
            provenance: self.provenance,
        }
    }

    /// All-ones single-sample batch with the same geometry.
    pub fn ones_like_single(&self) -> TokenBatch {
        let s = self.data.shape();
        TokenBatch {
            data: Tensor::ones(&[1, s[1], s[2]]),
            labels: vec![0],
            num_classes: self.num_classes,
            provenance: Provenance::Ones,
        }
    }
}

pub fn synth_batch(
    geom: &TokenGeometry,
    kind: BatchKind,
    batch_size: usize,
    seed: u64,
) -> Result<TokenBatch> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let shape = [batch_size, geom.tokens, geom.token_width];
    match kind {
        BatchKind::Ones => TokenBatch::new(
            Tensor::ones(&shape),
            vec![0; batch_size],
            geom.num_classes,
            Provenance::Ones,
        ),
        BatchKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = Tensor::from_fn(&shape, |_| StandardNormal.sample(&mut rng));
            let labels = (0..batch_size).map(|_| rng.random_range(0..geom.num_classes)).collect();
            TokenBatch::new(data, labels, geom.num_classes, Provenance::Random)
        }
    }
}

/// Batch of tokenized pixels drawn from the cube. Labeled pixels are used
/// when a raster exists (class = label - 1); otherwise pixels are uniform and
/// labels are uniform random.
pub fn cube_batch(
    cube: &HsiCube,
    params: &TokenizerParams,
    num_classes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TokenBatch> {
    let geom = params.geometry(cube.bands, num_classes)?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labeled: Vec<(usize, usize)> = match &cube.labels {
        Some(l) => l
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0)
            .map(|(i, &v)| (i, v as usize - 1))
            .collect(),
        None => Vec::new(),
    };
    let mut data = Vec::with_capacity(batch_size * geom.tokens * geom.token_width);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (pixel, label) = if labeled.is_empty() {
            let px = rng.random_range(0..cube.height * cube.width);
            (px, rng.random_range(0..num_classes))
        } else {
            *labeled.choose(&mut rng).expect("non-empty")
        };
        if label >= num_classes {
            return Err(Error::Data(format!(
                "cube label {} exceeds {num_classes} classes",
                label + 1
            )));
        }
        data.extend(tokenize(cube, pixel / cube.width, pixel % cube.width, params)?);
        labels.push(label);
    }
    let data = Tensor::new(vec![batch_size, geom.tokens, geom.token_width], data)?;
    TokenBatch::new(data, labels, num_classes, Provenance::Real)
}

/// Input source: a cube file or a synthetic `HxWxB` geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputSpec {
    Cube(std::path::PathBuf),
    Synth {
        height: usize,
        width: usize,
        bands: usize,
    },
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec::Synth {
            height: 16,
            width: 16,
            bands: 200,
        }
    }
}

impl FromStr for InputSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix("cube:") {
            return Ok(InputSpec::Cube(p.into()));
        }
        if let Some(g) = s.strip_prefix("synth:") {
            let dims: Vec<usize> = g
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad synthetic geometry {g:?}")))?;
            if dims.len() != 3 || dims.contains(&0) {
                return Err(Error::Config(format!("synthetic geometry must be HxWxB, got {g:?}")));
            }
            return Ok(InputSpec::Synth {
                height: dims[0],
                width: dims[1],
                bands: dims[2],
            });
        }
        Err(Error::Config(format!("input must be cube:<path> or synth:<HxWxB>, got {s:?}")))
    }
}

impl std::fmt::Display for InputSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputSpec::Cube(p) => write!(f, "cube:{}", p.display()),
            InputSpec::Synth {
                height,
                width,
                bands,
            } => write!(f, "synth:{height}x{width}x{bands}"),
        }
    }
}

/// Resolved input: token geometry plus a way to draw batches.
#[derive(Clone, Debug)]
pub struct InputSource {
    pub spec: InputSpec,
    pub tokenizer: TokenizerParams,
    pub geometry: TokenGeometry,
    cube: Option<HsiCube>,
}

impl InputSource {
    pub fn open(spec: &InputSpec, tokenizer: TokenizerParams, num_classes: Option<usize>) -> Result<Self> {
        match spec {
            InputSpec::Cube(path) => {
                let cube = load_cube(path)?;
                let classes = num_classes.or(cube.num_classes()).unwrap_or(DEFAULT_NUM_CLASSES);
                let geometry = tokenizer.geometry(cube.bands, classes)?;
                Ok(InputSource {
                    spec: spec.clone(),
                    tokenizer,
                    geometry,
                    cube: Some(cube),
                })
            }
            InputSpec::Synth { bands, .. } => {
                let classes = num_classes.unwrap_or(DEFAULT_NUM_CLASSES);
                let geometry = tokenizer.geometry(*bands, classes)?;
                Ok(InputSource {
                    spec: spec.clone(),
                    tokenizer,
                    geometry,
                    cube: None,
                })
            }
        }
    }

    /// A batch from the cube, or a RANDOM synthetic batch.
    pub fn batch(&self, batch_size: usize, seed: u64) -> Result<TokenBatch> {
        match &self.cube {
            Some(c) => cube_batch(c, &self.tokenizer, self.geometry.num_classes, batch_size, seed),
            None => synth_batch(&self.geometry, BatchKind::Random, batch_size, seed),
        }
    }
}
