//! Error-bounded lossy codec: Lorenzo prediction, linear quantization of the
//! prediction residual, and canonical Huffman coding of the quantization codes.
//!
//! Every element satisfies `|original - decompressed| <= eb`. Elements whose
//! code falls outside `(-quant_radius, quant_radius)`, or whose single-precision
//! reconstruction would miss the bound, are stored verbatim as outliers.

mod format;
pub mod huffman;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub use format::BLOB_MAGIC;
use huffman::{BitStream, Codebook};

pub const DEFAULT_QUANT_RADIUS: u32 = 1 << 15;
pub const MAX_QUANT_RADIUS: u32 = 1 << 15;

/// Symbol reserved for outliers; code `c` maps to symbol `c + quant_radius`.
pub const ESCAPE_SYMBOL: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Predictor {
    /// Previous reconstructed value in the per-plane scan.
    #[default]
    Lorenzo1d,
    /// `left + top - top_left` within each plane.
    Lorenzo2d,
}

impl Predictor {
    pub fn id(self) -> u8 {
        match self {
            Predictor::Lorenzo1d => 0,
            Predictor::Lorenzo2d => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Predictor::Lorenzo1d),
            1 => Some(Predictor::Lorenzo2d),
            _ => None,
        }
    }
}

impl std::fmt::Display for Predictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Predictor::Lorenzo1d => "lorenzo1d",
            Predictor::Lorenzo2d => "lorenzo2d",
        })
    }
}

impl std::str::FromStr for Predictor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lorenzo1d" | "1d" | "previous" => Ok(Predictor::Lorenzo1d),
            "lorenzo2d" | "2d" => Ok(Predictor::Lorenzo2d),
            other => Err(Error::Config(format!("unknown predictor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecParams {
    pub eb: f64,
    pub quant_radius: u32,
    pub predictor: Predictor,
}

impl CodecParams {
    pub fn new(eb: f64) -> Self {
        CodecParams {
            eb,
            quant_radius: DEFAULT_QUANT_RADIUS,
            predictor: Predictor::default(),
        }
    }

    pub fn with_predictor(mut self, predictor: Predictor) -> Self {
        self.predictor = predictor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eb.is_finite() && self.eb > 0.0) {
            return Err(Error::Parameter(format!(
                "error bound must be positive and finite, got {}",
                self.eb
            )));
        }
        let r = self.quant_radius;
        if r < 2 || !r.is_power_of_two() || r > MAX_QUANT_RADIUS {
            return Err(Error::Parameter(format!(
                "quant_radius must be a power of two in [2, {MAX_QUANT_RADIUS}], got {r}"
            )));
        }
        Ok(())
    }
}

/// Self-describing compressed tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTensor {
    shape: Vec<usize>,
    params: CodecParams,
    codebook: Codebook,
    bitstream: BitStream,
    outliers: Vec<(u64, f32)>,
}

impl CompressedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn bitstream(&self) -> &BitStream {
        &self.bitstream
    }

    pub fn outliers(&self) -> &[(u64, f32)] {
        &self.outliers
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn uncompressed_bytes(&self) -> usize {
        self.element_count() * std::mem::size_of::<f32>()
    }

    /// Size of the serialized blob.
    pub fn compressed_bytes(&self) -> usize {
        format::serialized_len(self)
    }

    pub fn compression_ratio(&self) -> f64 {
        self.uncompressed_bytes() as f64 / self.compressed_bytes() as f64
    }

    /// Decoded quantization codes in scan order; `None` marks an outlier.
    pub fn quantization_codes(&self) -> Result<Vec<Option<i32>>> {
        let symbols =
            huffman::huffman_decode(&self.codebook, &self.bitstream, self.element_count())?;
        let r = self.params.quant_radius as i64;
        Ok(symbols
            .into_iter()
            .map(|s| (s != ESCAPE_SYMBOL).then(|| (s as i64 - r) as i32))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::serialize(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::deserialize(bytes)
    }
}

/// Plane decomposition of a shape: the last two extents form one plane
/// (a 1-D tensor is a single one-row plane).
#[derive(Debug, Clone, Copy)]
struct Planes {
    count: usize,
    rows: usize,
    cols: usize,
}

impl Planes {
    fn of(shape: &[usize]) -> Self {
        match shape {
            [n] => Planes {
                count: 1,
                rows: 1,
                cols: *n,
            },
            _ => {
                let r = shape.len();
                Planes {
                    count: shape[..r - 2].iter().product(),
                    rows: shape[r - 2],
                    cols: shape[r - 1],
                }
            }
        }
    }

    fn size(&self) -> usize {
        self.rows * self.cols
    }
}

#[inline]
fn predict(p: Predictor, recon: &[f32], i: usize, cols: usize) -> f64 {
    match p {
        Predictor::Lorenzo1d => {
            if i == 0 {
                0.0
            } else {
                recon[i - 1] as f64
            }
        }
        Predictor::Lorenzo2d => {
            let (r, c) = (i / cols, i % cols);
            let left = if c > 0 { recon[i - 1] as f64 } else { 0.0 };
            let top = if r > 0 { recon[i - cols] as f64 } else { 0.0 };
            let top_left = if r > 0 && c > 0 {
                recon[i - cols - 1] as f64
            } else {
                0.0
            };
            left + top - top_left
        }
    }
}

/// Quantized form of one plane: symbols plus verbatim outliers (plane-local index).
struct PlaneCodes {
    symbols: Vec<u32>,
    outliers: Vec<(usize, f32)>,
}

fn quantize_plane(values: &[f32], cols: usize, params: &CodecParams) -> PlaneCodes {
    let two_eb = 2.0 * params.eb;
    let radius = params.quant_radius as f64;
    let mut recon = vec![0f32; values.len()];
    let mut symbols = Vec::with_capacity(values.len());
    let mut outliers = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        let pred = predict(params.predictor, &recon, i, cols);
        let v64 = v as f64;
        // f64::round rounds half away from zero.
        let code = ((v64 - pred) / two_eb).round();
        let mut accepted = None;
        if code.abs() < radius {
            let r = (pred + code * two_eb) as f32;
            if r.is_finite() && (r as f64 - v64).abs() <= params.eb {
                accepted = Some((code as i64, r));
            }
        }
        match accepted {
            Some((code, r)) => {
                symbols.push((code + params.quant_radius as i64) as u32);
                recon[i] = r;
            }
            None => {
                symbols.push(ESCAPE_SYMBOL);
                outliers.push((i, v));
                recon[i] = v;
            }
        }
    }
    PlaneCodes { symbols, outliers }
}

fn reconstruct_plane(
    symbols: &[u32],
    outliers: &[(u64, f32)],
    plane_start: usize,
    cols: usize,
    params: &CodecParams,
) -> Result<Vec<f32>> {
    let two_eb = 2.0 * params.eb;
    let r = params.quant_radius as i64;
    let mut recon = vec![0f32; symbols.len()];
    let mut next_outlier = outliers.iter();
    for (i, &s) in symbols.iter().enumerate() {
        if s == ESCAPE_SYMBOL {
            let &(idx, v) = next_outlier
                .next()
                .ok_or_else(|| Error::Decode("escape symbol without outlier".into()))?;
            if idx != (plane_start + i) as u64 {
                return Err(Error::Decode(format!(
                    "outlier index {idx} does not match escape at {}",
                    plane_start + i
                )));
            }
            recon[i] = v;
        } else {
            let code = s as i64 - r;
            if code.abs() >= r {
                return Err(Error::Decode(format!("symbol {s} outside code range")));
            }
            let pred = predict(params.predictor, &recon, i, cols);
            recon[i] = (pred + code as f64 * two_eb) as f32;
        }
    }
    if next_outlier.next().is_some() {
        return Err(Error::Decode("more outliers than escape symbols".into()));
    }
    Ok(recon)
}

/// Compresses `t` so that every element is reproduced within `params.eb`.
pub fn compress(t: &Tensor<f32>, params: &CodecParams) -> Result<CompressedTensor> {
    params.validate()?;
    if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite element at index {i}")));
    }
    let planes = Planes::of(t.shape());
    let data = t.data();
    let per_plane = par::map_range(planes.count, |p| {
        let start = p * planes.size();
        quantize_plane(&data[start..start + planes.size()], planes.cols, params)
    });

    let mut symbols = Vec::with_capacity(t.len());
    let mut outliers = Vec::new();
    for (p, pc) in per_plane.into_iter().enumerate() {
        let start = p * planes.size();
        symbols.extend_from_slice(&pc.symbols);
        outliers.extend(
            pc.outliers
                .into_iter()
                .map(|(i, v)| ((start + i) as u64, v)),
        );
    }
    let (codebook, bitstream) = huffman::huffman_encode(&symbols)?;
    Ok(CompressedTensor {
        shape: t.shape().to_vec(),
        params: *params,
        codebook,
        bitstream,
        outliers,
    })
}

/// Reconstructs the tensor. With `zero_filter`, reconstructed values with
/// `|v| <= eb` are set to exactly zero, which restores original zeros.
pub fn decompress(c: &CompressedTensor, zero_filter: bool) -> Result<Tensor<f32>> {
    c.params.validate()?;
    let count = c.element_count();
    if let Some(w) = c.outliers.windows(2).find(|w| w[0].0 >= w[1].0) {
        return Err(Error::format(
            0,
            format!("outlier index {} not increasing", w[1].0),
        ));
    }
    if let Some(&(idx, _)) = c.outliers.last() {
        if idx >= count as u64 {
            return Err(Error::format(
                0,
                format!("outlier index {idx} out of range"),
            ));
        }
    }
    let symbols = huffman::huffman_decode(&c.codebook, &c.bitstream, count)?;

    let planes = Planes::of(&c.shape);
    let size = planes.size();
    // Outlier sub-slices per plane.
    let mut bounds = Vec::with_capacity(planes.count + 1);
    let mut k = 0;
    for p in 0..=planes.count {
        let start = (p * size) as u64;
        while k < c.outliers.len() && c.outliers[k].0 < start {
            k += 1;
        }
        bounds.push(k);
    }
    let per_plane = par::map_range(planes.count, |p| {
        reconstruct_plane(
            &symbols[p * size..(p + 1) * size],
            &c.outliers[bounds[p]..bounds[p + 1]],
            p * size,
            planes.cols,
            &c.params,
        )
    });
    let mut data = Vec::with_capacity(count);
    for plane in per_plane {
        data.extend(plane?);
    }
    if zero_filter {
        let eb = c.params.eb;
        for v in &mut data {
            if (*v as f64).abs() <= eb {
                *v = 0.0;
            }
        }
    }
    Tensor::new(c.shape.clone(), data).map_err(|e| Error::Decode(e.to_string()))
}

pub fn compression_ratio(c: &CompressedTensor) -> f64 {
    c.compression_ratio()
}
