//! Offline pipeline that fills an analysis cache from a model and a dataset.
//!
//! Per-image work (baseline, the six prune modes of every head, strength
//! profiles, binarized patterns) fans out over a thread pool; results are
//! written by the calling thread in dataset order. The corpus-level steps
//! (entropy histograms, autoencoder, latents, the three t-SNE layouts) run
//! once every per-image key is present. Keys already in the cache are
//! never recomputed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{ae_encode, ae_train, AeConfig, AutoencoderWeights};
use crate::embed::{tsne, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::importance::{record_from_traces, ImportanceRecord, ImportanceVector};
use crate::numerics::Matrix;
use crate::patterns::{
    binarize, classify_pattern, split_attention, BinaryMatrix, ClassifierThresholds, PatternTag,
    DEFAULT_BINARIZE_RATIO,
};
use crate::pruning::{PruneMode, PruneSpec};
use crate::store::{
    autoencoder_from_bytes, autoencoder_to_bytes, model_digest, to_jsonl, Cache, CacheMeta, CacheWriter,
    CachedImage, Dataset, DatasetEntry, Key, Kind, FORMAT_VERSION,
};
use crate::strength::{head_strength, EntropyDistribution, StrengthVector};
use crate::vit::ModelWeights;

/// Images processed between cache flushes.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeConfig {
    pub binarize_ratio: f64,
    pub thresholds: ClassifierThresholds,
    pub ae: AeConfig,
    pub embedding: EmbeddingConfig,
}

impl Default for PrecomputeConfig {
    fn default() -> Self {
        Self {
            binarize_ratio: DEFAULT_BINARIZE_RATIO,
            thresholds: ClassifierThresholds::default(),
            ae: AeConfig::default(),
            embedding: EmbeddingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub image_id: String,
    pub label: usize,
    pub pred: usize,
    pub prob_true: f32,
    pub probs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecord {
    pub image_id: String,
    pub layer: usize,
    pub head: usize,
    /// Full `(1+p²) × (1+p²)` attention matrix.
    pub attention: Matrix,
    pub a_cls: Vec<f32>,
    pub a_patch_bin: BinaryMatrix,
    pub tags: Vec<PatternTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub image_id: String,
    pub layer: usize,
    pub head: usize,
    pub latent: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPoint {
    pub image_id: String,
    pub layer: usize,
    pub head: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedKey {
    pub key: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecomputeReport {
    pub computed: usize,
    pub skipped: usize,
    pub failed: Vec<FailedKey>,
}

/// Builds the pattern record of one head from its attention matrix.
pub fn pattern_record(
    image_id: &str,
    layer: usize,
    head: usize,
    attention: &Matrix,
    ratio: f64,
    thresholds: &ClassifierThresholds,
) -> Result<PatternRecord> {
    let (a_cls, a_patch) = split_attention(attention)?;
    let a_patch_bin = binarize(&a_patch, ratio)?;
    let tags = classify_pattern(&a_patch_bin, thresholds)?.into_iter().collect();
    Ok(PatternRecord {
        image_id: image_id.to_string(),
        layer,
        head,
        attention: attention.clone(),
        a_cls,
        a_patch_bin,
        tags,
    })
}

/// Keys owned by one image.
pub fn image_keys(image_id: &str, layers: usize, heads: usize) -> Vec<Key> {
    let mut keys = vec![Key::image(Kind::Baseline, image_id)];
    for l in 0..layers {
        for h in 0..heads {
            for kind in [Kind::Importance, Kind::Strength, Kind::Pattern] {
                keys.push(Key::image_head(kind, image_id, l, h));
            }
        }
    }
    keys.push(Key::image(Kind::ImportanceVector, image_id));
    keys
}

type Payloads = Vec<(Key, Vec<u8>)>;

/// Computes every per-image payload whose key is missing from `cache`.
fn image_payloads(
    model: &ModelWeights,
    dataset: &Dataset,
    entry: &DatasetEntry,
    cfg: &PrecomputeConfig,
    cache: &Cache,
) -> Result<Payloads> {
    let mc = model.config;
    let keys = image_keys(&entry.image_id, mc.layers, mc.heads);
    if keys.iter().all(|k| cache.contains(k)) {
        return Ok(Vec::new());
    }
    let id = entry.image_id.as_str();
    let label = entry.class_index;
    let image = dataset.load_image(entry, &mc)?;
    let baseline = model.forward(&image, None)?;
    let mut out = Vec::new();
    let mut push = |key: Key, bytes: Vec<u8>| {
        if !cache.contains(&key) {
            out.push((key, bytes));
        }
    };

    push(
        Key::image(Kind::Baseline, id),
        to_jsonl(&[BaselineRecord {
            image_id: id.to_string(),
            label,
            pred: baseline.probs.argmax(),
            prob_true: baseline.probs[label],
            probs: baseline.probs.values().to_vec(),
        }])?,
    );
    let mut full = Vec::with_capacity(mc.total_heads());
    for l in 0..mc.layers {
        for h in 0..mc.heads {
            let records = PruneMode::ALL
                .iter()
                .map(|&mode| {
                    let spec = PruneSpec::new(l, h, mode);
                    let pruned = model.forward(&image, Some(spec))?;
                    record_from_traces(id, label, spec, &baseline, &pruned)
                })
                .collect::<Result<Vec<ImportanceRecord>>>()?;
            full.push(records[PruneMode::Full.index() as usize].clone());
            push(Key::image_head(Kind::Importance, id, l, h), to_jsonl(&records)?);

            let a = &baseline.attentions[l][h];
            push(
                Key::image_head(Kind::Strength, id, l, h),
                to_jsonl(&[head_strength(id, l, h, a)?])?,
            );
            push(
                Key::image_head(Kind::Pattern, id, l, h),
                to_jsonl(&[pattern_record(id, l, h, a, cfg.binarize_ratio, &cfg.thresholds)?])?,
            );
        }
    }
    push(
        Key::image(Kind::ImportanceVector, id),
        to_jsonl(&[ImportanceVector::from_records(id, mc.layers, mc.heads, &full)?])?,
    );
    Ok(out)
}

fn require<T>(value: Option<T>, key: &Key) -> Result<T> {
    value.ok_or_else(|| Error::Cache(format!("missing {key}")))
}

/// Pattern records of the whole corpus in (image, layer, head) order.
pub fn corpus_patterns(cache: &Cache) -> Result<Vec<PatternRecord>> {
    let cfg = cache.meta().config;
    let mut out = Vec::with_capacity(cache.meta().images.len() * cfg.total_heads());
    for img in &cache.meta().images {
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let key = Key::image_head(Kind::Pattern, &img.image_id, l, h);
                out.push(require(cache.read_one(&key)?, &key)?);
            }
        }
    }
    Ok(out)
}

fn head_points(records: &[PatternRecord], coords: &[[f64; 2]]) -> Vec<HeadPoint> {
    records
        .iter()
        .zip(coords)
        .map(|(r, c)| HeadPoint {
            image_id: r.image_id.clone(),
            layer: r.layer,
            head: r.head,
            x: c[0],
            y: c[1],
        })
        .collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// One corpus-level step: writes `key` from `compute` unless present.
fn corpus_step(
    writer: &mut CacheWriter,
    report: &mut PrecomputeReport,
    key: Key,
    compute: impl FnOnce(&Cache) -> Result<(Vec<u8>, &'static str)>,
) {
    if writer.contains(&key) {
        report.skipped += 1;
        return;
    }
    let result = compute(writer.cache()).and_then(|(bytes, ext)| writer.put_bytes(&key, &bytes, ext));
    match result {
        Ok(_) => report.computed += 1,
        Err(e) => {
            tracing::error!(key = %key, error = %e, "precompute step failed");
            report.failed.push(FailedKey {
                key: key.to_string(),
                error: e.to_string(),
            });
        }
    }
}

/// Fills `root` with every analysis product for `dataset` under `model`.
/// `jobs` caps the worker pool (defaults to the available parallelism).
pub fn precompute(
    model: &ModelWeights,
    dataset: &Dataset,
    root: &std::path::Path,
    cfg: &PrecomputeConfig,
    jobs: Option<usize>,
) -> Result<PrecomputeReport> {
    let mc = model.config;
    let meta = CacheMeta {
        format_version: FORMAT_VERSION,
        config: mc,
        model_sha256: model_digest(model),
        class_names: dataset.class_names(mc.num_classes),
        images: dataset
            .entries
            .iter()
            .map(|e| CachedImage {
                image_id: e.image_id.clone(),
                class_index: e.class_index,
            })
            .collect(),
        settings: serde_json::to_value(cfg)?,
    };
    let mut writer = CacheWriter::create(root, meta)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    let mut report = PrecomputeReport::default();

    for chunk in dataset.entries.chunks(CHUNK) {
        let cache = writer.cache();
        let results: Vec<Result<Payloads>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|entry| image_payloads(model, dataset, entry, cfg, cache))
                .collect()
        });
        for (entry, result) in chunk.iter().zip(results) {
            let keys = image_keys(&entry.image_id, mc.layers, mc.heads);
            match result {
                Ok(payloads) => {
                    report.skipped += keys.len() - payloads.len();
                    for (key, bytes) in payloads {
                        writer.put_bytes(&key, &bytes, "jsonl")?;
                        report.computed += 1;
                    }
                }
                Err(e) => {
                    tracing::error!(image = %entry.image_id, error = %e, "image failed");
                    for key in keys.iter().filter(|k| !writer.contains(k)) {
                        report.failed.push(FailedKey {
                            key: key.to_string(),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
    }

    let per_image_done = dataset
        .entries
        .iter()
        .flat_map(|e| image_keys(&e.image_id, mc.layers, mc.heads))
        .all(|k| writer.contains(&k));
    if !per_image_done {
        for key in writer.cache().missing_keys() {
            if !report.failed.iter().any(|f| f.key == key.to_string()) {
                report.failed.push(FailedKey {
                    key: key.to_string(),
                    error: "not attempted: per-image results incomplete".into(),
                });
            }
        }
        tracing::info!("{} keys computed", report.computed);
        return Ok(report);
    }

    let ids: Vec<String> = dataset.entries.iter().map(|e| e.image_id.clone()).collect();
    for l in 0..mc.layers {
        for h in 0..mc.heads {
            corpus_step(&mut writer, &mut report, Key::head(Kind::EntropyHistogram, l, h), |cache| {
                let mut values = Vec::with_capacity(ids.len());
                for id in &ids {
                    let key = Key::image_head(Kind::Strength, id, l, h);
                    let s: StrengthVector = require(cache.read_one(&key)?, &key)?;
                    values.push(s.entropy_norm);
                }
                Ok((to_jsonl(&[EntropyDistribution::from_values(l, h, &values)])?, "jsonl"))
            });
        }
    }

    let mut report_json = None;
    corpus_step(&mut writer, &mut report, Key::global(Kind::Autoencoder), |cache| {
        let data: Vec<BinaryMatrix> = corpus_patterns(cache)?.into_iter().map(|r| r.a_patch_bin).collect();
        let (weights, train) = ae_train(&data, &cfg.ae)?;
        tracing::info!(
            initial = train.initial_loss,
            last = train.final_loss(),
            "autoencoder trained"
        );
        report_json = Some(train);
        Ok((autoencoder_to_bytes(&weights), "bin"))
    });
    corpus_step(&mut writer, &mut report, Key::global(Kind::AeReport), |_| {
        let train = report_json
            .take()
            .ok_or_else(|| Error::Cache("autoencoder was cached without its training report".into()))?;
        Ok((to_jsonl(&[train])?, "jsonl"))
    });

    corpus_step(&mut writer, &mut report, Key::global(Kind::Latents), |cache| {
        let key = Key::global(Kind::Autoencoder);
        let bytes = require(cache.read_bytes(&key)?, &key)?;
        let ae: AutoencoderWeights = autoencoder_from_bytes(&bytes)?;
        let records = corpus_patterns(cache)?;
        let latents = records
            .iter()
            .map(|r| {
                Ok(LatentRecord {
                    image_id: r.image_id.clone(),
                    layer: r.layer,
                    head: r.head,
                    latent: ae_encode(&ae, &r.a_patch_bin)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((to_jsonl(&latents)?, "jsonl"))
    });

    let emb = cfg.embedding;
    pool.install(|| {
        corpus_step(&mut writer, &mut report, Key::global(Kind::LayoutImages), |cache| {
            let mut vectors = Vec::with_capacity(ids.len());
            for id in &ids {
                let key = Key::image(Kind::ImportanceVector, id);
                let v: ImportanceVector = require(cache.read_one(&key)?, &key)?;
                vectors.push(widen(&v.values));
            }
            let layout = tsne(&vectors, &emb)?;
            let points: Vec<ImagePoint> = ids
                .iter()
                .zip(&layout.coords)
                .map(|(id, c)| ImagePoint {
                    image_id: id.clone(),
                    x: c[0],
                    y: c[1],
                })
                .collect();
            Ok((to_jsonl(&points)?, "jsonl"))
        });
        corpus_step(&mut writer, &mut report, Key::global(Kind::LayoutPatch), |cache| {
            let key = Key::global(Kind::Latents);
            let latents: Vec<LatentRecord> = require(cache.read_lines(&key)?, &key)?;
            let records = corpus_patterns(cache)?;
            let vectors: Vec<Vec<f64>> = latents.iter().map(|r| widen(&r.latent)).collect();
            let layout = tsne(&vectors, &emb)?;
            Ok((to_jsonl(&head_points(&records, &layout.coords))?, "jsonl"))
        });
        corpus_step(&mut writer, &mut report, Key::global(Kind::LayoutCls), |cache| {
            let records = corpus_patterns(cache)?;
            let vectors: Vec<Vec<f64>> = records.iter().map(|r| widen(&r.a_cls)).collect();
            let layout = tsne(&vectors, &emb)?;
            Ok((to_jsonl(&head_points(&records, &layout.coords))?, "jsonl"))
        });
    });

    tracing::info!("{} keys computed", report.computed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{generate_synthetic, init_model};
    use crate::vit::ModelConfig;

    fn quick_config() -> PrecomputeConfig {
        PrecomputeConfig {
            ae: AeConfig {
                epochs: 2,
                ..AeConfig::default()
            },
            embedding: EmbeddingConfig {
                iterations: 50,
                exaggeration_iterations: 25,
                momentum_switch: 25,
                ..EmbeddingConfig::default()
            },
            ..PrecomputeConfig::default()
        }
    }

    #[test]
    fn fills_cache_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(&dir.path().join("data"), 10, 32, 1).unwrap();
        let model = init_model(ModelConfig::TINY, 7).unwrap();
        let root = dir.path().join("cache");
        let cfg = quick_config();

        let first = precompute(&model, &data, &root, &cfg, Some(2)).unwrap();
        assert!(first.failed.is_empty(), "{:?}", first.failed);
        let cache = Cache::open(&root).unwrap();
        assert!(cache.is_complete());
        // 10·(2 + 3·16) per-image keys, 16 histograms, 6 corpus keys
        assert_eq!(first.computed, 10 * 50 + 16 + 6);
        let kinds = |k: Kind| cache.keys().filter(|key| key.kind == k).count();
        assert_eq!(kinds(Kind::ImportanceVector), 10);
        assert_eq!(kinds(Kind::Strength), 160);
        assert_eq!(kinds(Kind::EntropyHistogram), 16);

        let second = precompute(&model, &data, &root, &cfg, Some(2)).unwrap();
        assert_eq!(second.computed, 0);
        assert_eq!(second.skipped, first.computed);

        // a fresh run with the same seeds produces identical objects
        let other = dir.path().join("cache2");
        precompute(&model, &data, &other, &cfg, Some(3)).unwrap();
        let a = std::fs::read_to_string(root.join("index.jsonl")).unwrap();
        let b = std::fs::read_to_string(other.join("index.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_image_reports_failed_keys() {
        let dir = tempfile::tempdir().unwrap();
        let data_root = dir.path().join("data");
        let data = generate_synthetic(&data_root, 4, 32, 2).unwrap();
        std::fs::write(data_root.join(&data.entries[2].path), b"garbage").unwrap();
        let model = init_model(ModelConfig::TINY, 7).unwrap();
        let root = dir.path().join("cache");
        let report = precompute(&model, &data, &root, &quick_config(), Some(1)).unwrap();
        assert!(report.failed.iter().any(|f| f.key == "baseline/img_0002"));
        assert!(report.failed.iter().any(|f| f.key == "autoencoder"));
        let cache = Cache::open(&root).unwrap();
        assert!(cache.contains(&Key::image(Kind::Baseline, "img_0001")));
        assert!(!cache.is_complete());
    }
}
