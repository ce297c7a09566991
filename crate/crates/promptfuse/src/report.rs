//! Metric evaluation over image files and report output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use promptfuse_core::metrics::{evaluate, ImageMetrics, MetricReport};

use crate::dataset::{DatasetManifest, IMAGE_EXTENSIONS};
use crate::error::{Error, Result};
use crate::imageio::load_image;

pub const CSV_FILE: &str = "metrics.csv";
pub const JSON_FILE: &str = "metrics.json";

/// A fused image and its two sources.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTriple {
    pub name: String,
    pub fused: PathBuf,
    pub ir: PathBuf,
    pub vi: PathBuf,
}

fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs every image in `fused_dir` with the same-stem sources in `ir_dir` and `vi_dir`.
pub fn triples_from_dirs(fused_dir: &Path, ir_dir: &Path, vi_dir: &Path) -> Result<Vec<EvalTriple>> {
    let (ir, vi) = (images_by_stem(ir_dir)?, images_by_stem(vi_dir)?);
    images_by_stem(fused_dir)?
        .into_iter()
        .map(|(name, fused)| {
            let source = |m: &BTreeMap<String, PathBuf>, dir: &Path| {
                m.get(&name)
                    .cloned()
                    .ok_or_else(|| Error::Manifest(format!("no source image `{name}` in {}", dir.display())))
            };
            Ok(EvalTriple { ir: source(&ir, ir_dir)?, vi: source(&vi, vi_dir)?, name, fused })
        })
        .collect()
}

/// Pairs each manifest record's input images with `<fused_dir>/<name>.png`.
pub fn triples_from_manifest(fused_dir: &Path, manifest: &DatasetManifest) -> Vec<EvalTriple> {
    manifest
        .records
        .iter()
        .map(|r| EvalTriple {
            name: r.name.clone(),
            fused: fused_dir.join(format!("{}.png", r.name)),
            ir: manifest.resolve(&r.ir_path),
            vi: manifest.resolve(&r.vi_path),
        })
        .collect()
}

pub fn evaluate_triples(triples: &[EvalTriple]) -> Result<MetricReport> {
    let images = triples
        .iter()
        .map(|t| {
            let values = evaluate(&load_image(&t.fused)?, &load_image(&t.ir)?, &load_image(&t.vi)?)
                .map_err(|e| Error::Manifest(format!("image `{}`: {e}", t.name)))?;
            Ok(ImageMetrics { name: t.name.clone(), values })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(images)?)
}

/// Writes the report as CSV and JSON into `out_dir`.
pub fn write_report(report: &MetricReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let csv = out_dir.join(CSV_FILE);
    std::fs::write(&csv, report.to_csv()).map_err(Error::io(&csv))?;
    let json = out_dir.join(JSON_FILE);
    let text = serde_json::to_string_pretty(report).expect("reports serialize");
    std::fs::write(&json, text + "\n").map_err(Error::io(&json))
}
