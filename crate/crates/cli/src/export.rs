use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use vitlens_core::importance::{summarize_records, ImportanceRecord, Metric};
use vitlens_core::patterns::PatternTag;
use vitlens_core::precompute::{corpus_patterns, HeadPoint, ImagePoint};
use vitlens_core::store::{Cache, Key, Kind};
use vitlens_core::PruneMode;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportWhat {
    Embeddings,
    Summaries,
    Patterns,
    All,
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn lines<T: serde::de::DeserializeOwned>(cache: &Cache, key: &Key) -> CliResult<Vec<T>> {
    cache
        .read_lines(key)?
        .ok_or_else(|| CliError::Data(format!("cache has no {key}; run precompute")))
}

fn write_table(path: &Path, delimiter: u8, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(data_err)?;
    w.write_record(header).map_err(data_err)?;
    for r in rows {
        w.write_record(r).map_err(data_err)?;
    }
    w.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn head_rows(points: &[HeadPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| {
            vec![
                p.image_id.clone(),
                p.layer.to_string(),
                p.head.to_string(),
                p.x.to_string(),
                p.y.to_string(),
            ]
        })
        .collect()
}

fn embeddings(cache: &Cache, out: &Path, d: u8) -> CliResult<Vec<PathBuf>> {
    let labels: BTreeMap<&str, usize> = cache
        .meta()
        .images
        .iter()
        .map(|i| (i.image_id.as_str(), i.class_index))
        .collect();
    let images: Vec<ImagePoint> = lines(cache, &Key::global(Kind::LayoutImages))?;
    let rows: Vec<Vec<String>> = images
        .iter()
        .map(|p| {
            vec![
                p.image_id.clone(),
                labels.get(p.image_id.as_str()).map_or(String::new(), |l| l.to_string()),
                p.x.to_string(),
                p.y.to_string(),
            ]
        })
        .collect();
    let path_images = out.join("embedding_images.csv");
    write_table(&path_images, d, &["image_id", "label", "x", "y"], &rows)?;
    let mut written = vec![path_images];
    for (kind, name) in [(Kind::LayoutPatch, "embedding_patch.csv"), (Kind::LayoutCls, "embedding_cls.csv")] {
        let points: Vec<HeadPoint> = lines(cache, &Key::global(kind))?;
        let path = out.join(name);
        write_table(&path, d, &["image_id", "layer", "head", "x", "y"], &head_rows(&points))?;
        written.push(path);
    }
    Ok(written)
}

fn summaries(cache: &Cache, out: &Path, d: u8) -> CliResult<Vec<PathBuf>> {
    let cfg = cache.meta().config;
    let mut records = Vec::new();
    for img in &cache.meta().images {
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let recs: Vec<ImportanceRecord> = lines(cache, &Key::image_head(Kind::Importance, &img.image_id, l, h))?;
                records.extend(recs.into_iter().filter(|r| r.mode == PruneMode::Full));
            }
        }
    }
    let mut rows = Vec::new();
    for metric in Metric::ALL {
        let s = summarize_records(&records, cfg.layers, cfg.heads, metric)?;
        for (i, (m, sd)) in s.mean.iter().zip(&s.std).enumerate() {
            rows.push(vec![
                metric.as_str().to_string(),
                (i / cfg.heads).to_string(),
                (i % cfg.heads).to_string(),
                m.to_string(),
                sd.to_string(),
                s.images.to_string(),
            ]);
        }
    }
    let path = out.join("importance_summary.csv");
    write_table(&path, d, &["metric", "layer", "head", "mean", "std", "images"], &rows)?;
    Ok(vec![path])
}

/// Tag occurrences over all pattern records, plus the number of untagged
/// records under the key `None`.
pub fn tag_census<'a>(tags: impl IntoIterator<Item = &'a [PatternTag]>) -> BTreeMap<Option<PatternTag>, usize> {
    let mut census = BTreeMap::new();
    for set in tags {
        if set.is_empty() {
            *census.entry(None).or_default() += 1;
        }
        for &t in set {
            *census.entry(Some(t)).or_default() += 1;
        }
    }
    census
}

fn patterns(cache: &Cache, out: &Path, d: u8) -> CliResult<Vec<PathBuf>> {
    let records = corpus_patterns(cache)?;
    let census = tag_census(records.iter().map(|r| r.tags.as_slice()));
    let rows: Vec<Vec<String>> = census
        .iter()
        .map(|(tag, n)| vec![tag.map_or("none".to_string(), |t| t.to_string()), n.to_string()])
        .collect();
    let census_path = out.join("pattern_census.csv");
    write_table(&census_path, d, &["tag", "count"], &rows)?;

    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let tags: Vec<String> = r.tags.iter().map(|t| t.to_string()).collect();
            vec![r.image_id.clone(), r.layer.to_string(), r.head.to_string(), tags.join(" ")]
        })
        .collect();
    let tags_path = out.join("pattern_tags.csv");
    write_table(&tags_path, d, &["image_id", "layer", "head", "tags"], &rows)?;
    Ok(vec![census_path, tags_path])
}

/// Writes the requested tables into `out` and returns their paths.
pub fn export(cache: &Cache, what: ExportWhat, out: &Path, delimiter: u8) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let mut written = Vec::new();
    if matches!(what, ExportWhat::Embeddings | ExportWhat::All) {
        written.extend(embeddings(cache, out, delimiter)?);
    }
    if matches!(what, ExportWhat::Summaries | ExportWhat::All) {
        written.extend(summaries(cache, out, delimiter)?);
    }
    if matches!(what, ExportWhat::Patterns | ExportWhat::All) {
        written.extend(patterns(cache, out, delimiter)?);
    }
    Ok(written)
}
