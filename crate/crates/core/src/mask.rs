//! Binary and soft masks.
//!
//! All grids in this crate are stored column-major (`index = col * height + row`),
//! the same order COCO uses for uncompressed run-length encoding. That keeps
//! RLE decoding a straight run expansion with no transposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense column-major grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type BinaryGrid = Grid<u8>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    /// Wraps column-major `data`. Fails if the length does not equal `height * width`.
    pub fn from_column_major(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidValue(format!(
                "grid of {height}x{width} needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for col in 0..width {
            for row in 0..height {
                data.push(f(row, col));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[col * self.height + row]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut T {
        &mut self.data[col * self.height + row]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl BinaryGrid {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

pub(crate) fn check_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::Geometry { expected, found });
    }
    Ok(())
}

/// Uncompressed COCO run-length encoded binary mask.
///
/// `counts` alternates zero-runs and one-runs over the column-major pixel
/// order, always starting with a (possibly empty) run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RleRecord", into = "RleRecord")]
pub struct RleMask {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RleRecord {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl TryFrom<RleRecord> for RleMask {
    type Error = Error;

    fn try_from(r: RleRecord) -> Result<Self> {
        RleMask::new(r.size[0] as usize, r.size[1] as usize, r.counts)
    }
}

impl From<RleMask> for RleRecord {
    fn from(m: RleMask) -> Self {
        RleRecord {
            size: [m.height as u32, m.width as u32],
            counts: m.counts,
        }
    }
}

impl RleMask {
    /// Validates and wraps raw counts.
    ///
    /// Only the first run may be empty, and the runs must cover exactly
    /// `height * width` pixels.
    pub fn new(height: usize, width: usize, counts: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Decode(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if counts.is_empty() {
            return Err(Error::Decode("counts must not be empty".into()));
        }
        if let Some(i) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(Error::Decode(format!(
                "zero-length run at index {} (only the leading run may be empty)",
                i + 1
            )));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = (height * width) as u64;
        if total != expected {
            return Err(Error::Decode(format!(
                "counts sum to {total}, expected {expected} for a {height}x{width} mask"
            )));
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![(height * width) as u32])
    }

    /// Encodes a dense grid. Every cell must be 0 or 1.
    pub fn encode(grid: &BinaryGrid) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Encode("grid has no cells".into()));
        }
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for (i, &v) in grid.as_slice().iter().enumerate() {
            if v > 1 {
                return Err(Error::Encode(format!(
                    "non-binary value {v} at column-major index {i}"
                )));
            }
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
        counts.push(run);
        Ok(Self {
            height: grid.height(),
            width: grid.width(),
            counts,
        })
    }

    pub fn decode(&self) -> BinaryGrid {
        let mut data = Vec::with_capacity(self.height * self.width);
        for (i, &c) in self.counts.iter().enumerate() {
            let v = (i % 2) as u8;
            data.extend(std::iter::repeat_n(v, c as usize));
        }
        Grid {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Half-open column-major index ranges of the foreground runs.
    fn one_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    /// Pixel count of `self ∩ other`, computed on the runs directly.
    pub fn intersection_area(&self, other: &RleMask) -> Result<u64> {
        check_shape(self.shape(), other.shape())?;
        let a: Vec<_> = self.one_runs().collect();
        let b: Vec<_> = other.one_runs().collect();
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                total += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }

    pub fn union(&self, other: &RleMask) -> Result<RleMask> {
        check_shape(self.shape(), other.shape())?;
        let a = self.decode();
        let b = other.decode();
        let merged = Grid {
            height: self.height,
            width: self.width,
            data: a.data.iter().zip(&b.data).map(|(x, y)| x | y).collect(),
        };
        RleMask::encode(&merged)
    }
}

/// `|a ∩ b| / |a ∪ b|`. Two empty masks have IoU 1.
pub fn iou(a: &RleMask, b: &RleMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Dense per-pixel foreground probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(Grid<f64>);

impl SoftMask {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some((i, v)) = grid
            .as_slice()
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidValue(format!(
                "soft mask value {v} at index {i} is outside [0, 1]"
            )));
        }
        Ok(Self(grid))
    }

    pub fn from_column_major(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(Grid::from_column_major(height, width, values)?)
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Grid::filled(height, width, value))
    }

    pub fn from_binary(grid: &BinaryGrid) -> Self {
        Self(grid.map(|&v| if v != 0 { 1.0 } else { 0.0 }))
    }

    pub fn from_rle(mask: &RleMask) -> Self {
        Self::from_binary(&mask.decode())
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Foreground where the probability is at least `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryGrid {
        self.0.map(|&p| u8::from(p >= threshold))
    }
}

struct SoftOverlap {
    intersection: f64,
    union: f64,
}

fn soft_overlap(pred: &[f64], target: &[u8]) -> SoftOverlap {
    let mut inter = 0.0;
    let mut pred_sum = 0.0;
    let mut target_sum = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let t = t as f64;
        inter += p * t;
        pred_sum += p;
        target_sum += t;
    }
    SoftOverlap {
        intersection: inter,
        union: pred_sum + target_sum - inter,
    }
}

/// Soft IoU against an already decoded target.
pub fn soft_iou_dense(pred: &SoftMask, target: &BinaryGrid) -> Result<f64> {
    check_shape(target.shape(), pred.shape())?;
    let o = soft_overlap(pred.values(), target.as_slice());
    if o.union == 0.0 {
        return Ok(1.0);
    }
    Ok(o.intersection / o.union)
}

/// Differentiable IoU relaxation: `I = Σ p·t`, `U = Σ p + Σ t − I`.
pub fn soft_iou(pred: &SoftMask, target: &RleMask) -> Result<f64> {
    check_shape(target.shape(), pred.shape())?;
    soft_iou_dense(pred, &target.decode())
}

/// Per-pixel `∂(I/U)/∂p = (t·U − I·(1 − t)) / U²`.
pub fn soft_iou_grad(pred: &SoftMask, target: &RleMask) -> Result<Grid<f64>> {
    check_shape(target.shape(), pred.shape())?;
    let target = target.decode();
    let o = soft_overlap(pred.values(), target.as_slice());
    if o.union <= 0.0 {
        return Err(Error::UndefinedGradient);
    }
    let u2 = o.union * o.union;
    Ok(target.map(|&t| {
        let t = t as f64;
        (t * o.union - o.intersection * (1.0 - t)) / u2
    }))
}
