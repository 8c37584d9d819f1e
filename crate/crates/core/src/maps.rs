//! Per-pixel class-score maps and discrete label maps.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Class-score map over an h x w grid with one score per class.
/// Depending on the call site the grid is at patch or pixel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    scores: Tensor,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, scores: Tensor) -> Result<ProbMap> {
        if scores.shape() != [height, width, classes] {
            return Err(Error::ShapeMismatch(format!(
                "prob map expects [{height}x{width}x{classes}]"
            )));
        }
        Ok(ProbMap {
            height,
            width,
            classes,
            scores,
        })
    }

    /// Builds from a flat [pixels x classes] matrix in row-major pixel order.
    pub fn from_flat(height: usize, width: usize, classes: usize, flat: Tensor) -> Result<ProbMap> {
        if flat.len() != height * width * classes {
            return Err(Error::ShapeMismatch(format!(
                "flat scores of length {} for {height}x{width}x{classes}",
                flat.len()
            )));
        }
        ProbMap::new(
            height,
            width,
            classes,
            flat.reshaped(vec![height, width, classes]),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn into_scores(self) -> Tensor {
        self.scores
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let j = self.classes;
        let data = self.scores.data();
        let mut labels = Vec::with_capacity(self.height * self.width);
        for p in 0..self.height * self.width {
            let row = &data[p * j..(p + 1) * j];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
        LabelMap {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Nearest-neighbor upsampling by an integer factor: the map becomes
    /// blockwise constant on factor x factor cells.
    pub fn upsample_nearest(&self, factor: usize) -> ProbMap {
        assert!(factor >= 1);
        let (h, w, j) = (self.height, self.width, self.classes);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.scores.data();
        let mut out = vec![0.0; oh * ow * j];
        for y in 0..oh {
            let sy = y / factor;
            for x in 0..ow {
                let sx = x / factor;
                let s = (sy * w + sx) * j;
                let d = (y * ow + x) * j;
                out[d..d + j].copy_from_slice(&src[s..s + j]);
            }
        }
        ProbMap {
            height: oh,
            width: ow,
            classes: j,
            scores: Tensor::new(vec![oh, ow, j], out),
        }
    }

    /// Elementwise mean, reduced in list order.
    pub fn mean(maps: &[ProbMap]) -> Result<ProbMap> {
        let mut acc = Self::accumulate(maps)?;
        let inv = 1.0 / maps.len() as f64;
        for v in acc.scores.data_mut() {
            *v *= inv;
        }
        Ok(acc)
    }

    /// Elementwise maximum over the list.
    pub fn max(maps: &[ProbMap]) -> Result<ProbMap> {
        let first = maps.first().ok_or(Error::EmptyInput)?;
        let mut out = first.clone();
        for m in &maps[1..] {
            if m.scores.shape() != first.scores.shape() {
                return Err(Error::ShapeMismatch("prob map shapes differ".into()));
            }
            for (o, &v) in out.scores.data_mut().iter_mut().zip(m.scores.data()) {
                if v > *o {
                    *o = v;
                }
            }
        }
        Ok(out)
    }

    fn accumulate(maps: &[ProbMap]) -> Result<ProbMap> {
        let first = maps.first().ok_or(Error::EmptyInput)?;
        let mut out = first.clone();
        for m in &maps[1..] {
            if m.scores.shape() != first.scores.shape() {
                return Err(Error::ShapeMismatch("prob map shapes differ".into()));
            }
            out.scores.add_assign(&m.scores)?;
        }
        Ok(out)
    }

    /// delta * self + (1 - delta) * other.
    pub fn blend(&self, other: &ProbMap, delta: f64) -> Result<ProbMap> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::ConfigError(format!(
                "blend factor {delta} outside [0, 1]"
            )));
        }
        if self.scores.shape() != other.scores.shape() {
            return Err(Error::ShapeMismatch("blend: map shapes differ".into()));
        }
        let data: Vec<f64> = self
            .scores
            .data()
            .iter()
            .zip(other.scores.data())
            .map(|(&a, &b)| delta * a + (1.0 - delta) * b)
            .collect();
        Ok(ProbMap {
            height: self.height,
            width: self.width,
            classes: self.classes,
            scores: Tensor::new(self.scores.shape().to_vec(), data),
        })
    }
}

/// Discrete per-pixel class assignment. Class indices fit in one byte to
/// match the on-disk graymap format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<LabelMap> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {height}x{width}",
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }
}
