//! Whole-image inference: sliding-window traversal, per-window adaptation
//! lifecycle, and assembly of window scores into full-resolution maps.

use crate::error::{Error, Result};
use crate::maps::{LabelMap, ProbMap};
use crate::numerics::Tensor;
use crate::oci::{fuse_scores, static_consensus, AdaptOptions, AdaptationSession};
use crate::scl::{enrich, SynonymLibrary};
use crate::vlm::FrozenModel;

/// Sliding-window placements covering an image. Offsets advance by the
/// stride; the final row/column placement clamps so windows stay in
/// bounds, so every pixel is covered at least once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub window: usize,
    pub stride: usize,
    pub placements: Vec<(usize, usize)>,
}

fn axis_offsets(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut at = 0;
    loop {
        if at + window >= extent {
            offsets.push(extent - window);
            break;
        }
        offsets.push(at);
        at += stride;
    }
    offsets
}

pub fn plan_windows(
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
) -> Result<WindowPlan> {
    if stride == 0 {
        return Err(Error::ConfigError("stride must be at least 1".into()));
    }
    if window == 0 || window > height || window > width {
        return Err(Error::WindowTooLarge {
            window,
            height,
            width,
        });
    }
    let rows = axis_offsets(height, window, stride);
    let cols = axis_offsets(width, window, stride);
    let mut placements = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            placements.push((r, c));
        }
    }
    Ok(WindowPlan {
        window,
        stride,
        placements,
    })
}

/// Whether adaptation state is rebuilt per window or carried across all
/// windows of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionScope {
    Window,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    /// Frozen consensus only; constructs no trainable state.
    Static,
    /// Test-time adaptation before each fused prediction.
    Adaptive,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    pub adapt: AdaptOptions,
    pub window: usize,
    pub stride: usize,
    pub scope: SessionScope,
    pub mode: InferenceMode,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            adapt: AdaptOptions::default(),
            window: 224,
            stride: 112,
            scope: SessionScope::Window,
            mode: InferenceMode::Adaptive,
        }
    }
}

/// Outcome of one window.
#[derive(Debug, Clone, Copy)]
pub struct WindowReport {
    pub row: usize,
    pub col: usize,
    pub loss_pre: Option<f64>,
    pub loss_post: Option<f64>,
    /// True when adaptation hit a non-finite loss and the window fell
    /// back to the static prediction.
    pub diverged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SegmentReport {
    pub windows: Vec<WindowReport>,
}

impl SegmentReport {
    pub fn mean_loss_pre(&self) -> Option<f64> {
        mean_of(self.windows.iter().filter_map(|w| w.loss_pre))
    }

    pub fn mean_loss_post(&self) -> Option<f64> {
        mean_of(self.windows.iter().filter_map(|w| w.loss_post))
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Sum of overlapping window scores plus a per-pixel coverage count.
#[derive(Debug, Clone)]
pub struct AssembledPrediction {
    height: usize,
    width: usize,
    classes: usize,
    sums: Tensor,
    coverage: Vec<u32>,
}

impl AssembledPrediction {
    pub fn new(height: usize, width: usize, classes: usize) -> AssembledPrediction {
        AssembledPrediction {
            height,
            width,
            classes,
            sums: Tensor::zeros(vec![height, width, classes]),
            coverage: vec![0; height * width],
        }
    }

    fn add_window(&mut self, row: usize, col: usize, scores: &ProbMap) -> Result<()> {
        if scores.classes() != self.classes
            || row + scores.height() > self.height
            || col + scores.width() > self.width
        {
            return Err(Error::ShapeMismatch(format!(
                "window {}x{} at ({row},{col}) outside {}x{}",
                scores.height(),
                scores.width(),
                self.height,
                self.width
            )));
        }
        let j = self.classes;
        let src = scores.scores().data();
        let dst = self.sums.data_mut();
        for y in 0..scores.height() {
            for x in 0..scores.width() {
                let s = (y * scores.width() + x) * j;
                let d = ((row + y) * self.width + (col + x)) * j;
                for c in 0..j {
                    dst[d + c] += src[s + c];
                }
                self.coverage[(row + y) * self.width + col + x] += 1;
            }
        }
        Ok(())
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    /// Per-pixel mean of the contributing window scores.
    pub fn averaged(&self) -> Result<ProbMap> {
        if self.coverage.contains(&0) {
            return Err(Error::Internal("uncovered pixel in assembly".into()));
        }
        let j = self.classes;
        let mut data = self.sums.data().to_vec();
        for p in 0..self.height * self.width {
            let inv = 1.0 / self.coverage[p] as f64;
            for c in 0..j {
                data[p * j + c] *= inv;
            }
        }
        ProbMap::new(
            self.height,
            self.width,
            self.classes,
            Tensor::new(vec![self.height, self.width, self.classes], data),
        )
    }
}

/// Accumulates window contributions in ascending row-major placement
/// order regardless of list order, so the result is independent of the
/// order windows were processed in.
pub fn assemble(
    height: usize,
    width: usize,
    classes: usize,
    contributions: &[((usize, usize), ProbMap)],
) -> Result<AssembledPrediction> {
    let mut order: Vec<usize> = (0..contributions.len()).collect();
    order.sort_by_key(|&i| contributions[i].0);
    let mut acc = AssembledPrediction::new(height, width, classes);
    for i in order {
        let ((row, col), scores) = &contributions[i];
        acc.add_window(*row, *col, scores)?;
    }
    Ok(acc)
}

/// Full segmentation result.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub labels: LabelMap,
    pub scores: ProbMap,
    pub coverage: Vec<u32>,
    pub report: SegmentReport,
}

fn crop(img: &Tensor, row: usize, col: usize, size: usize) -> Tensor {
    let [_, w, c] = *img.shape() else {
        unreachable!("validated rank-3 image")
    };
    let mut out = Vec::with_capacity(size * size * c);
    for y in 0..size {
        let base = ((row + y) * w + col) * c;
        out.extend_from_slice(&img.data()[base..base + size * c]);
    }
    Tensor::new(vec![size, size, c], out)
}

/// Segments one image: per window, a fresh adaptation session (unless
/// scope is per-image or mode is static), consensus, fusion per the
/// trade-off factor, and mean-blended assembly of the fused scores.
pub fn segment_image(
    model: &FrozenModel,
    img: &Tensor,
    categories: &[String],
    library: &SynonymLibrary,
    opts: &SegmentOptions,
) -> Result<Segmentation> {
    let [h, w, c] = *img.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "image must be [h x w x 3], got {:?}",
            img.shape()
        )));
    };
    if c != 3 {
        return Err(Error::ShapeMismatch("image must have 3 channels".into()));
    }
    if opts.window != model.config().image_size {
        return Err(Error::ConfigError(format!(
            "window {} must match the model input size {}",
            opts.window,
            model.config().image_size
        )));
    }
    opts.adapt.validate()?;
    let plan = plan_windows(h, w, opts.window, opts.stride)?;
    let text = model.text_embeddings(categories)?;
    let enriched = enrich(model, &text, library)?;
    let classes = categories.len();
    let patch = model.config().patch_size;

    let mut shared_session = match (opts.mode, opts.scope) {
        (InferenceMode::Adaptive, SessionScope::Image) => {
            Some(AdaptationSession::new(model, &enriched, opts.adapt)?)
        }
        _ => None,
    };

    let mut report = SegmentReport::default();
    let mut assembly = AssembledPrediction::new(h, w, classes);
    for &(row, col) in &plan.placements {
        let window_img = crop(img, row, col, opts.window);
        let static_blend = |diverged: bool| -> Result<(ProbMap, WindowReport)> {
            let (gcl, scl) = static_consensus(model, &window_img, &enriched, &opts.adapt)?;
            let blended = fuse_scores(&gcl.target, &scl.y_scl, opts.adapt.delta)?;
            Ok((
                blended,
                WindowReport {
                    row,
                    col,
                    loss_pre: None,
                    loss_post: None,
                    diverged,
                },
            ))
        };

        let (blended, window_report) = match opts.mode {
            InferenceMode::Static => static_blend(false)?,
            InferenceMode::Adaptive => {
                let mut local_session;
                let session = match shared_session.as_mut() {
                    Some(s) => s,
                    None => {
                        local_session = Some(AdaptationSession::new(model, &enriched, opts.adapt)?);
                        local_session.as_mut().unwrap()
                    }
                };
                match session.adapt(&window_img) {
                    Ok(outcome) => {
                        let blended =
                            fuse_scores(&outcome.gcl.target, &outcome.scl.y_scl, opts.adapt.delta)?;
                        (
                            blended,
                            WindowReport {
                                row,
                                col,
                                loss_pre: Some(outcome.loss_pre),
                                loss_post: Some(outcome.loss_post),
                                diverged: false,
                            },
                        )
                    }
                    Err(Error::AdaptationDiverged) => {
                        // Session state is poisoned; per-image sessions
                        // restart from scratch for the remaining windows.
                        if let Some(s) = shared_session.as_mut() {
                            s.reset()?;
                        }
                        static_blend(true)?
                    }
                    Err(other) => return Err(other),
                }
            }
        };
        let pixel_scores = blended.upsample_nearest(patch);
        assembly.add_window(row, col, &pixel_scores)?;
        report.windows.push(window_report);
    }

    let scores = assembly.averaged()?;
    let labels = scores.argmax();
    Ok(Segmentation {
        labels,
        scores,
        coverage: assembly.coverage().to_vec(),
        report,
    })
}
