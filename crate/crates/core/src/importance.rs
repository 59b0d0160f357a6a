//! Head importance by ablation.
//!
//! Two model-level metrics compare the class distributions before and after
//! pruning a head (drop in true-class probability, Jensen-Shannon
//! divergence). Two layer-level metrics compare the pruned head's own layer
//! attention output `z`: cosine distance on the class token, and the mean
//! per-patch cosine distance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_distance, jsd, mean_std};
use crate::pruning::{PruneMode, PruneSpec};
use crate::vit::{ForwardTrace, Image, ModelWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Prob,
    Jsd,
    Cls,
    Patch,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Prob, Metric::Jsd, Metric::Cls, Metric::Patch];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Prob => "prob",
            Metric::Jsd => "jsd",
            Metric::Cls => "cls",
            Metric::Patch => "patch",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown metric `{s}` (expected prob|jsd|cls|patch)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProb {
    pub class: usize,
    pub prob: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub image_id: String,
    pub layer: usize,
    pub head: usize,
    pub mode: PruneMode,
    /// Probability of the true class after pruning.
    pub prob_true: f32,
    pub i_prob: f64,
    pub i_jsd: f64,
    pub i_cls: f64,
    pub i_patch: f64,
    pub top5: Vec<ClassProb>,
}

impl ImportanceRecord {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Prob => self.i_prob,
            Metric::Jsd => self.i_jsd,
            Metric::Cls => self.i_cls,
            Metric::Patch => self.i_patch,
        }
    }

    /// The value plotted per head: the pruned true-class probability for
    /// `prob`, the metric itself otherwise.
    pub fn view_value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Prob => self.prob_true as f64,
            m => self.metric(m),
        }
    }
}

/// Derives all four metrics from a baseline and a pruned trace of the same
/// image.
pub fn record_from_traces(
    image_id: &str,
    label: usize,
    spec: PruneSpec,
    baseline: &ForwardTrace,
    pruned: &ForwardTrace,
) -> Result<ImportanceRecord> {
    if label >= baseline.probs.len() {
        return Err(Error::arg(format!(
            "label {label} outside {} classes",
            baseline.probs.len()
        )));
    }
    let prob_true = pruned.probs[label];
    let z = &baseline.layer_z[spec.layer];
    let z_pruned = &pruned.layer_z[spec.layer];
    let i_cls = cosine_distance(z.row(0), z_pruned.row(0))?;
    let patches = z.rows() - 1;
    let mut i_patch = 0.0;
    for t in 1..z.rows() {
        i_patch += cosine_distance(z.row(t), z_pruned.row(t))?;
    }
    i_patch /= patches as f64;
    Ok(ImportanceRecord {
        image_id: image_id.to_string(),
        layer: spec.layer,
        head: spec.head,
        mode: spec.mode,
        prob_true,
        i_prob: baseline.probs[label] as f64 - prob_true as f64,
        i_jsd: jsd(&baseline.probs, &pruned.probs)?,
        i_cls,
        i_patch,
        top5: pruned
            .probs
            .top_k(5)
            .into_iter()
            .map(|(class, prob)| ClassProb { class, prob })
            .collect(),
    })
}

/// Runs the baseline and the pruned forward and scores the head.
pub fn head_importance(
    weights: &ModelWeights,
    image: &Image,
    image_id: &str,
    label: usize,
    spec: PruneSpec,
) -> Result<ImportanceRecord> {
    spec.check(&weights.config)?;
    let baseline = weights.forward(image, None)?;
    let pruned = weights.forward(image, Some(spec))?;
    record_from_traces(image_id, label, spec, &baseline, &pruned)
}

/// Per-image vector of true-class probabilities after fully pruning each
/// head, layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub image_id: String,
    pub values: Vec<f32>,
}

impl ImportanceVector {
    /// Collects the mode-1 records of one image; `records` must hold one per
    /// head.
    pub fn from_records(
        image_id: &str,
        layers: usize,
        heads: usize,
        records: &[ImportanceRecord],
    ) -> Result<Self> {
        let mut values = vec![None; layers * heads];
        for r in records.iter().filter(|r| r.mode == PruneMode::Full) {
            if r.layer < layers && r.head < heads {
                values[r.layer * heads + r.head] = Some(r.prob_true);
            }
        }
        let values = values
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::arg(format!("no full-prune record for head {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image_id: image_id.to_string(),
            values,
        })
    }
}

pub fn importance_vector(
    weights: &ModelWeights,
    image: &Image,
    image_id: &str,
    label: usize,
) -> Result<ImportanceVector> {
    let cfg = weights.config;
    let baseline = weights.forward(image, None)?;
    let mut records = Vec::with_capacity(cfg.total_heads());
    for layer in 0..cfg.layers {
        for head in 0..cfg.heads {
            let spec = PruneSpec::new(layer, head, PruneMode::Full);
            let pruned = weights.forward(image, Some(spec))?;
            records.push(record_from_traces(image_id, label, spec, &baseline, &pruned)?);
        }
    }
    ImportanceVector::from_records(image_id, cfg.layers, cfg.heads, &records)
}

/// Mean and population standard deviation of a metric per head over a set
/// of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub metric: Metric,
    pub images: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Summarizes per-image head vectors (each of equal length `l·n`).
pub fn summarize(per_image: &[Vec<f64>], metric: Metric) -> Result<ImportanceSummary> {
    let first = per_image
        .first()
        .ok_or_else(|| Error::arg("cannot summarize an empty image set"))?;
    let dims = first.len();
    if per_image.iter().any(|v| v.len() != dims) {
        return Err(Error::arg("per-image vectors differ in length"));
    }
    let mut mean = Vec::with_capacity(dims);
    let mut std = Vec::with_capacity(dims);
    let mut column = Vec::with_capacity(per_image.len());
    for d in 0..dims {
        column.clear();
        column.extend(per_image.iter().map(|v| v[d]));
        let (m, s) = mean_std(&column)?;
        mean.push(m);
        std.push(s);
    }
    Ok(ImportanceSummary {
        metric,
        images: per_image.len(),
        mean,
        std,
    })
}

/// Summarizes mode-1 records over all images, using the per-head view value.
pub fn summarize_records(
    records: &[ImportanceRecord],
    layers: usize,
    heads: usize,
    metric: Metric,
) -> Result<ImportanceSummary> {
    let mut by_image: Vec<(&str, Vec<Option<f64>>)> = Vec::new();
    for r in records.iter().filter(|r| r.mode == PruneMode::Full) {
        let slot = match by_image.iter().position(|(id, _)| *id == r.image_id) {
            Some(i) => i,
            None => {
                by_image.push((&r.image_id, vec![None; layers * heads]));
                by_image.len() - 1
            }
        };
        by_image[slot].1[r.layer * heads + r.head] = Some(r.view_value(metric));
    }
    let vectors = by_image
        .into_iter()
        .map(|(id, v)| {
            v.into_iter()
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::arg(format!("image {id} lacks records for some heads")))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(&vectors, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(32, (0..32 * 32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn metric_names() {
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert!("entropy".parse::<Metric>().is_err());
    }

    #[test]
    fn identical_traces_score_zero() {
        let w = ModelWeights::init(ModelConfig::TINY, 1).unwrap();
        let t = w.forward(&image(2), None).unwrap();
        let r = record_from_traces("x", 3, PruneSpec::new(1, 1, PruneMode::Full), &t, &t).unwrap();
        assert_eq!((r.i_prob, r.i_jsd, r.i_cls, r.i_patch), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn mode_zero_is_exactly_zero() {
        let w = ModelWeights::init(ModelConfig::TINY, 4).unwrap();
        let img = image(5);
        for layer in 0..4 {
            for head in 0..4 {
                let r = head_importance(&w, &img, "a", 2, PruneSpec::new(layer, head, PruneMode::None)).unwrap();
                assert_eq!((r.i_prob, r.i_jsd, r.i_cls, r.i_patch), (0.0, 0.0, 0.0, 0.0));
            }
        }
    }

    #[test]
    fn record_matches_engine_and_bounds() {
        let w = ModelWeights::init(ModelConfig::TINY, 8).unwrap();
        let img = image(9);
        for mode in PruneMode::ALL {
            let spec = PruneSpec::new(1, 2, mode);
            let r = head_importance(&w, &img, "a", 7, spec).unwrap();
            let engine = w.forward(&img, Some(spec)).unwrap();
            assert_eq!(r.prob_true, engine.probs[7]);
            assert!((0.0..=std::f64::consts::LN_2).contains(&r.i_jsd));
            assert!((0.0..=2.0).contains(&r.i_cls) && (0.0..=2.0).contains(&r.i_patch));
            assert!((-1.0..=1.0).contains(&r.i_prob));
            assert_eq!(r.top5.len(), 5);
            assert!(r.top5.windows(2).all(|w| w[0].prob >= w[1].prob));
        }
        assert!(head_importance(&w, &img, "a", 10, PruneSpec::new(0, 0, PruneMode::Full)).is_err());
    }

    #[test]
    fn vector_shape_and_determinism() {
        let w = ModelWeights::init(ModelConfig::TINY, 3).unwrap();
        let a = importance_vector(&w, &image(1), "a", 0).unwrap();
        assert_eq!(a.values.len(), 16);
        assert!(a.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, importance_vector(&w, &image(1), "a", 0).unwrap());
    }

    #[test]
    fn summary_examples() {
        let one = summarize(&[vec![0.3, 0.5]], Metric::Jsd).unwrap();
        assert_eq!(one.std, vec![0.0, 0.0]);
        let two = summarize(&[vec![0.4], vec![-0.4]], Metric::Prob).unwrap();
        assert_eq!(two.mean, vec![0.0]);
        assert!((two.std[0] - 0.4).abs() < 1e-15);
        assert!(summarize(&[], Metric::Cls).is_err());
    }

    #[test]
    fn summary_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let data: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let s = summarize(&data, Metric::Patch).unwrap();
        for d in 0..16 {
            let mut sum = 0.0;
            for v in &data {
                sum += v[d];
            }
            let mean = sum / 50.0;
            let mut sq = 0.0;
            for v in &data {
                sq += (v[d] - mean) * (v[d] - mean);
            }
            let std = (sq / 50.0).sqrt();
            assert!((s.mean[d] - mean).abs() < 1e-6);
            assert!((s.std[d] - std).abs() < 1e-6);
        }
    }
}
