//! Dice scoring, ensemble inference and report aggregation.
//!
//! Scores are fractions in `[0, 1]` internally and percentages with two
//! decimals when rendered.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SegmentationModel;
use crate::nn::{ops, Tensor};
use crate::types::{BinaryMask, ExperimentConfig, Sample, TaskDataset};

/// Per-pixel foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("probability map", &[height * width], &[values.len()]));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("probability map", "values must be finite and within [0, 1]"));
        }
        Ok(ProbabilityMap { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        ProbabilityMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Bilinear resize to `size`.
    pub fn resized(&self, size: (usize, usize)) -> ProbabilityMap {
        let values = ops::resize_planes(&self.values, 1, self.height, self.width, size.0, size.1);
        ProbabilityMap {
            height: size.0,
            width: size.1,
            values,
        }
    }
}

/// Elementwise logistic of a logit raster whose trailing axes are `h, w`.
pub fn sigmoid_map(logits: &Tensor) -> ProbabilityMap {
    let n = logits.shape.len();
    assert!(n >= 2, "logit raster needs two spatial axes");
    let (h, w) = (logits.shape[n - 2], logits.shape[n - 1]);
    assert_eq!(logits.numel(), h * w, "sigmoid_map takes a single map");
    ProbabilityMap {
        height: h,
        width: w,
        values: logits.data.iter().map(|&x| ops::sigmoid(x)).collect(),
    }
}

/// Foreground where `p >= t`.
pub fn threshold(p: &ProbabilityMap, t: f64) -> BinaryMask {
    BinaryMask::from_bools(p.height, p.width, p.values.iter().map(|&v| v >= t))
}

/// Pixelwise mean of member probabilities.
pub fn ensemble(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps.first().ok_or(Error::Empty("ensemble members"))?;
    let mut sum = vec![0.0; first.values.len()];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::shape("ensemble member", &[first.height, first.width], &[m.height, m.width]));
        }
        for (s, v) in sum.iter_mut().zip(&m.values) {
            *s += v;
        }
    }
    let n = maps.len() as f64;
    Ok(ProbabilityMap {
        height: first.height,
        width: first.width,
        values: sum.into_iter().map(|s| (s / n).clamp(0.0, 1.0)).collect(),
    })
}

/// `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("dice", &[gt.height, gt.width], &[pred.height, pred.width]));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.values.iter().zip(&gt.values) {
        let (a, b) = (a == 1.0, b == 1.0);
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
pub fn aggregate(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Resolution models run at and the binarization threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub resolution: (usize, usize),
    pub threshold: f64,
}

impl From<&ExperimentConfig> for EvalConfig {
    fn from(c: &ExperimentConfig) -> Self {
        EvalConfig {
            resolution: c.train_resolution,
            threshold: c.threshold,
        }
    }
}

/// Image tensor `[1, 3, h, w]` of a sample resized bilinearly to `size`.
pub fn image_tensor(sample: &Sample, size: (usize, usize)) -> Tensor {
    let p = &sample.patch;
    let data: Vec<f64> = p.pixels.iter().map(|&v| v as f64).collect();
    let data = ops::resize_planes(&data, 3, p.height, p.width, size.0, size.1);
    Tensor::new(vec![1, 3, size.0, size.1], data)
}

/// Anything that maps a sample to a probability map at its native size.
pub trait Segmenter {
    fn probability(&self, sample: &Sample) -> Result<ProbabilityMap>;
}

/// Resize to the working resolution, run every model, average the member
/// probabilities and resize the mean back to the sample's native size.
pub fn predict(models: &[SegmentationModel], sample: &Sample, resolution: (usize, usize)) -> Result<ProbabilityMap> {
    let first = models.first().ok_or(Error::Empty("ensemble models"))?;
    for m in models {
        if m.fingerprint() != first.fingerprint() {
            return Err(Error::FingerprintMismatch {
                model: first.fingerprint().to_string(),
                checkpoint: m.fingerprint().to_string(),
            });
        }
    }
    let x = image_tensor(sample, resolution);
    let maps = models
        .iter()
        .map(|m| m.forward(&x).map(|logits| sigmoid_map(&logits)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ensemble(&maps)?.resized(sample.patch.native_size()))
}

/// A k-fold ensemble evaluated at a fixed working resolution.
pub struct ModelEnsemble<'a> {
    pub models: &'a [SegmentationModel],
    pub resolution: (usize, usize),
}

impl Segmenter for ModelEnsemble<'_> {
    fn probability(&self, sample: &Sample) -> Result<ProbabilityMap> {
        predict(self.models, sample, self.resolution)
    }
}

/// Predicts the ground truth exactly.
pub struct PerfectSegmenter;

impl Segmenter for PerfectSegmenter {
    fn probability(&self, sample: &Sample) -> Result<ProbabilityMap> {
        let m = &sample.mask;
        Ok(ProbabilityMap {
            height: m.height,
            width: m.width,
            values: m.values.iter().map(|&v| v as f64).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub domain: String,
    pub seen: bool,
    pub dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(scores: &[f64]) -> Result<Summary> {
        let (mean, std) = aggregate(scores)?;
        Ok(Summary {
            n: scores.len(),
            mean,
            std,
        })
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Sorted by sample id.
    pub per_image: Vec<ImageScore>,
    pub aggregate: Summary,
    pub per_domain: BTreeMap<String, Summary>,
    pub seen: Option<Summary>,
    pub unseen: Option<Summary>,
}

impl MetricsReport {
    pub fn from_scores(mut per_image: Vec<ImageScore>) -> Result<Self> {
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let all: Vec<f64> = per_image.iter().map(|s| s.dice).collect();
        let aggregate = Summary::of(&all)?;
        let mut by_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &per_image {
            by_domain.entry(s.domain.clone()).or_default().push(s.dice);
        }
        let per_domain = by_domain
            .into_iter()
            .map(|(d, v)| Summary::of(&v).map(|s| (d, s)))
            .collect::<Result<_>>()?;
        let split = |seen: bool| {
            let v: Vec<f64> = per_image.iter().filter(|s| s.seen == seen).map(|s| s.dice).collect();
            Summary::of(&v).ok()
        };
        Ok(MetricsReport {
            aggregate,
            per_domain,
            seen: split(true),
            unseen: split(false),
            per_image,
        })
    }

    /// Whether the stored aggregates equal a fresh recomputation.
    pub fn is_consistent(&self) -> bool {
        MetricsReport::from_scores(self.per_image.clone()).is_ok_and(|r| &r == self)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// CSV with columns `id, domain, seen, dice`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_err = |e: csv::Error| Error::config("csv", e.to_string());
        for s in &self.per_image {
            w.serialize(s).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io("csv", e))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<ImageScore>> {
        csv::Reader::from_reader(input)
            .deserialize()
            .collect::<std::result::Result<Vec<ImageScore>, _>>()
            .map_err(|e| Error::config("csv", e.to_string()))
    }
}

/// Per-image Dice of thresholded predictions at native resolution.
pub fn evaluate(segmenter: &dyn Segmenter, dataset: &TaskDataset, threshold_at: f64) -> Result<MetricsReport> {
    evaluate_samples(segmenter, dataset.samples.iter(), threshold_at)
}

pub fn evaluate_samples<'a>(
    segmenter: &dyn Segmenter,
    samples: impl IntoIterator<Item = &'a Sample>,
    threshold_at: f64,
) -> Result<MetricsReport> {
    let mut scores = Vec::new();
    for sample in samples {
        let p = segmenter.probability(sample)?;
        let score = dice(&threshold(&p, threshold_at), &sample.mask)?;
        scores.push(ImageScore {
            id: sample.id().to_string(),
            domain: sample.domain.domain_name.clone(),
            seen: sample.domain.seen,
            dice: score,
        });
    }
    if scores.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    MetricsReport::from_scores(scores)
}

/// Evaluates an ensemble of models on `dataset` with the experiment's
/// working resolution and threshold.
pub fn evaluate_models(models: &[SegmentationModel], dataset: &TaskDataset, config: &ExperimentConfig) -> Result<MetricsReport> {
    let ens = ModelEnsemble {
        models,
        resolution: config.train_resolution,
    };
    evaluate(&ens, dataset, config.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::types::{DomainLabel, ImagePatch, Task};

    fn mask(h: usize, w: usize, on: &[usize]) -> BinaryMask {
        BinaryMask::from_bools(h, w, (0..h * w).map(|i| on.contains(&i)))
    }

    #[test]
    fn dice_cases() {
        let a = mask(4, 4, &[0, 1, 5]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(4, 4, &[10, 11])).unwrap(), 0.0);
        let ones = mask(4, 4, &(0..16).collect::<Vec<_>>());
        let eight = mask(4, 4, &(0..8).collect::<Vec<_>>());
        assert!((dice(&ones, &eight).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&BinaryMask::zeros(3, 3), &BinaryMask::zeros(3, 3)).unwrap(), 1.0);
        assert_eq!(dice(&BinaryMask::zeros(3, 3), &mask(3, 3, &[4])).unwrap(), 0.0);
        assert!(dice(&a, &BinaryMask::zeros(2, 8)).is_err());
    }

    #[test]
    fn sigmoid_and_threshold() {
        let p = sigmoid_map(&Tensor::new(vec![1, 2], vec![0.0, 30.0]));
        assert_eq!(p.values[0], 0.5);
        assert!(p.values[1] >= 1.0 - 1e-12);
        let t = threshold(&ProbabilityMap::constant(2, 2, 0.5), 0.5);
        assert_eq!(t.foreground(), 4);
        let t = threshold(&ProbabilityMap::constant(2, 2, 0.6), 0.5);
        assert_eq!(t.foreground(), 4);
    }

    #[test]
    fn ensemble_mean() {
        let maps: Vec<_> = [0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|&v| ProbabilityMap::constant(1, 1, v)).collect();
        assert!((ensemble(&maps).unwrap().values[0] - 0.6).abs() < 1e-15);
        assert_eq!(ensemble(&maps[1..2]).unwrap(), maps[1]);
        assert!(matches!(ensemble(&[]), Err(Error::Empty(_))));
        assert!(ensemble(&[ProbabilityMap::constant(1, 1, 0.1), ProbabilityMap::constant(1, 2, 0.1)]).is_err());
    }

    #[test]
    fn mean_then_threshold_differs_from_voting() {
        // members 0.9, 0.3, 0.3: mean 0.5 passes t = 0.5, majority vote fails
        let maps: Vec<_> = [0.9, 0.3, 0.3].iter().map(|&v| ProbabilityMap::constant(1, 1, v)).collect();
        let mean_first = threshold(&ensemble(&maps).unwrap(), 0.5);
        let votes = maps.iter().filter(|m| threshold(m, 0.5).foreground() == 1).count();
        assert_eq!(mean_first.foreground(), 1);
        assert!(votes * 2 < maps.len());
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate(&[1.0, 1.0, 1.0]).unwrap(), (1.0, 0.0));
        let (m, s) = aggregate(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(aggregate(&[0.3]).unwrap(), (0.3, 0.0));
        assert!(aggregate(&[]).is_err());
    }

    fn sample(id: &str, seen: bool, n: usize) -> Sample {
        Sample {
            patch: ImagePatch::new(id, n, n, vec![0.25; 3 * n * n]),
            mask: mask(n, n, &[0, 1, n + 1]),
            domain: DomainLabel {
                task: Task::CrossOrgan,
                domain_name: if seen { "organ-0" } else { "organ-4" }.into(),
                seen,
            },
        }
    }

    #[test]
    fn report_formats_and_recomputes() {
        let scores = vec![
            ImageScore { id: "b".into(), domain: "d".into(), seen: true, dice: 0.5 },
            ImageScore { id: "a".into(), domain: "d".into(), seen: true, dice: 1.0 },
        ];
        let r = MetricsReport::from_scores(scores).unwrap();
        assert_eq!(r.per_image[0].id, "a");
        assert_eq!(r.aggregate.to_string(), "75.00 ± 35.36");
        assert!(r.is_consistent());
        assert!(r.unseen.is_none());

        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(MetricsReport::read_csv(&buf[..]).unwrap(), r.per_image);
    }

    #[test]
    fn perfect_segmenter_scores_one_hundred() {
        let ds = TaskDataset::new(Task::CrossOrgan, vec![sample("x", true, 8), sample("y", false, 8)], "").unwrap();
        let r = evaluate(&PerfectSegmenter, &ds, 0.5).unwrap();
        assert_eq!(r.aggregate.to_string(), "100.00 ± 0.00");
        assert_eq!(r.per_image.len(), 2);
        assert!(r.seen.is_some() && r.unseen.is_some());
    }

    #[test]
    fn predict_returns_native_size_and_zero_logit_half() {
        let mut m = build_model(&ModelConfig::tiny(), 0, None).unwrap();
        for name in ["head.weight", "head.bias"] {
            m.params_mut().get_mut(name).unwrap().data.fill(0.0);
        }
        let s = sample("x", true, 20);
        let p = predict(std::slice::from_ref(&m), &s, (16, 16)).unwrap();
        assert_eq!(p.shape(), (20, 20));
        assert!(p.values.iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let other = build_model(&ModelConfig::tiny(), 5, None).unwrap();
        let single = predict(std::slice::from_ref(&other), &s, (16, 16)).unwrap();
        let logits = other.forward(&image_tensor(&s, (16, 16))).unwrap();
        assert_eq!(single, sigmoid_map(&logits).resized((20, 20)));

        let wide = build_model(&ModelConfig::desk(), 0, None).unwrap();
        assert!(matches!(predict(&[m, wide], &s, (16, 16)), Err(Error::FingerprintMismatch { .. })));
    }
}
