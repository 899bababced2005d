//! Multi-view image similarity losses with gradients w.r.t. the rendered
//! images. Lower is better; views are aggregated by the arithmetic mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

/// Images with standard deviation at or below this are treated as constant.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("{rendered} rendered images but {observed} observed")]
    ViewCountMismatch { rendered: usize, observed: usize },
    #[error("view {view}: rendered {rendered:?} vs observed {observed:?}")]
    DimensionMismatch {
        view: usize,
        rendered: (usize, usize),
        observed: (usize, usize),
    },
    #[error("view {view}: {which} image has zero variance")]
    ZeroVariance { view: usize, which: &'static str },
    #[error("view {view}: non-finite {which} pixel")]
    NonFinite { view: usize, which: &'static str },
}

#[derive(Debug, Clone)]
pub struct ViewPairBatch<'a> {
    pub rendered: Vec<&'a Image>,
    pub observed: Vec<&'a Image>,
}

impl<'a> ViewPairBatch<'a> {
    pub fn new(rendered: Vec<&'a Image>, observed: Vec<&'a Image>) -> Result<Self, SimilarityError> {
        let batch = Self { rendered, observed };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.rendered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rendered.is_empty()
    }

    pub fn validate(&self) -> Result<(), SimilarityError> {
        if self.rendered.len() != self.observed.len() {
            return Err(SimilarityError::ViewCountMismatch {
                rendered: self.rendered.len(),
                observed: self.observed.len(),
            });
        }
        if self.rendered.len() < 2 {
            return Err(SimilarityError::TooFewViews(self.rendered.len()));
        }
        for (view, (r, o)) in self.rendered.iter().zip(&self.observed).enumerate() {
            if r.dims() != o.dims() {
                return Err(SimilarityError::DimensionMismatch {
                    view,
                    rendered: r.dims(),
                    observed: o.dims(),
                });
            }
            for (img, which) in [(r, "rendered"), (o, "observed")] {
                if img.data.iter().any(|v| !v.is_finite()) {
                    return Err(SimilarityError::NonFinite { view, which });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    /// Per-view gradient of the loss w.r.t. each rendered pixel.
    pub grads: Vec<Image>,
}

/// Plug-in seam for similarity losses.
pub trait SimilarityMetric {
    fn name(&self) -> &'static str;

    fn loss_and_grad(&self, batch: &ViewPairBatch<'_>) -> Result<LossAndGrad, SimilarityError>;

    fn loss(&self, batch: &ViewPairBatch<'_>) -> Result<f64, SimilarityError> {
        self.loss_and_grad(batch).map(|r| r.loss)
    }
}

/// Mean over views of `1 - NCC`, with per-image global standardisation
/// (population standard deviation). Range `[0, 2]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ncc;

/// Mean over views of the per-pixel mean squared difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mse;

fn standardize(img: &Image, view: usize, which: &'static str) -> Result<(Vec<f64>, f64), SimilarityError> {
    let mean = img.mean();
    let std = img.std_dev();
    if std <= MIN_STD {
        return Err(SimilarityError::ZeroVariance { view, which });
    }
    Ok((img.data.iter().map(|v| (v - mean) / std).collect(), std))
}

/// NCC of two equally sized images and its gradient w.r.t. the first.
pub fn ncc_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), SimilarityError> {
    let (ah, sa) = standardize(a, 0, "rendered")?;
    let (bh, _) = standardize(b, 0, "observed")?;
    let n = ah.len() as f64;
    let ncc = ah.iter().zip(&bh).map(|(x, y)| x * y).sum::<f64>() / n;
    let scale = 1.0 / (n * sa);
    let grad = ah.iter().zip(&bh).map(|(x, y)| scale * (y - ncc * x)).collect();
    Ok((ncc, Image::from_vec(a.width, a.height, grad)))
}

impl SimilarityMetric for Ncc {
    fn name(&self) -> &'static str {
        "ncc"
    }

    fn loss_and_grad(&self, batch: &ViewPairBatch<'_>) -> Result<LossAndGrad, SimilarityError> {
        batch.validate()?;
        let v = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (view, (r, o)) in batch.rendered.iter().zip(&batch.observed).enumerate() {
            standardize(o, view, "observed")?;
            standardize(r, view, "rendered")?;
            let (ncc, g) = ncc_with_grad(r, o)?;
            loss += (1.0 - ncc) / v;
            grads.push(g.scaled(-1.0 / v));
        }
        Ok(LossAndGrad { loss, grads })
    }
}

impl SimilarityMetric for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn loss_and_grad(&self, batch: &ViewPairBatch<'_>) -> Result<LossAndGrad, SimilarityError> {
        batch.validate()?;
        let v = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (r, o) in batch.rendered.iter().zip(&batch.observed) {
            let n = r.data.len() as f64;
            let diff: Vec<f64> = r.data.iter().zip(&o.data).map(|(a, b)| a - b).collect();
            loss += diff.iter().map(|d| d * d).sum::<f64>() / (n * v);
            grads.push(Image::from_vec(r.width, r.height, diff.iter().map(|d| 2.0 * d / (n * v)).collect()));
        }
        Ok(LossAndGrad { loss, grads })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[default]
    Ncc,
    Mse,
}

impl MetricKind {
    pub fn metric(self) -> Box<dyn SimilarityMetric> {
        match self {
            MetricKind::Ncc => Box::new(Ncc),
            MetricKind::Mse => Box::new(Mse),
        }
    }
}

/// Intensity convention of observed radiographs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    #[default]
    BoneBright,
    BoneDark,
}

impl Polarity {
    /// Maps an observed image to the bone-bright convention of the renderer.
    pub fn apply(self, img: &Image) -> Image {
        match self {
            Polarity::BoneBright => img.clone(),
            Polarity::BoneDark => img.scaled(-1.0),
        }
    }
}
