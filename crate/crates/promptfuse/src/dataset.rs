//! Paired-image manifests, patch cropping and batching.
//!
//! A manifest is a JSON-lines file with one [`ManifestRecord`] per sample.
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use promptfuse_core::degrade::DegradeSpec;
use promptfuse_core::prompt::PromptTemplate;
use promptfuse_core::train::epoch_order;
use promptfuse_core::{FusionSample, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_image, with_channels};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 96;

/// File extensions picked up when scanning directories.
pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub name: String,
    pub ir_path: PathBuf,
    pub vi_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ir_ref_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vi_ref_path: Option<PathBuf>,
    pub prompt_ir: String,
    pub prompt_vi: String,
    #[serde(default)]
    pub spec: DegradeSpec,
}

impl ManifestRecord {
    /// A record for an undegraded pair with the no-degradation prompts.
    pub fn clean(name: impl Into<String>, ir_path: PathBuf, vi_path: PathBuf) -> Self {
        let t = PromptTemplate::clean();
        Self {
            name: name.into(),
            ir_path,
            vi_path,
            ir_ref_path: None,
            vi_ref_path: None,
            prompt_ir: t.render_ir(),
            prompt_vi: t.render_vi(),
            spec: DegradeSpec::default(),
        }
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [&mut self.ir_path, &mut self.vi_path]
            .into_iter()
            .chain(self.ir_ref_path.as_mut())
            .chain(self.vi_ref_path.as_mut())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
            records.push(record);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { root, records };
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        for r in &self.records {
            for p in [Some(&r.ir_path), Some(&r.vi_path), r.ir_ref_path.as_ref(), r.vi_ref_path.as_ref()]
                .into_iter()
                .flatten()
            {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!("record `{}`: missing file {}", r.name, full.display())));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Writes the manifest as JSON lines. Paths are stored relative to the
    /// file's directory when they lie below it and absolute otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let dir = std::path::absolute(dir).map_err(Error::io(dir))?;
        let mut out = Vec::new();
        for r in &self.records {
            let mut r = r.clone();
            for p in r.paths_mut() {
                let full = std::path::absolute(self.resolve(p)).map_err(Error::io(&*p))?;
                *p = full.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(full);
            }
            serde_json::to_writer(&mut out, &r).expect("records serialize");
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
        f.write_all(&out).map_err(Error::io(path))
    }

    /// Loads the images of one record. References default to the inputs;
    /// infrared images are reduced to one channel and gray visible images
    /// are replicated to three.
    pub fn load_sample(&self, r: &ManifestRecord) -> Result<FusionSample> {
        let load = |p: &Path, channels: usize| -> Result<ImageTensor> {
            let full = self.resolve(p);
            let img = load_image(&full)?;
            if img.height() < MIN_SIDE || img.width() < MIN_SIDE {
                return Err(Error::Manifest(format!(
                    "{} is {}x{}, smaller than {MIN_SIDE}x{MIN_SIDE}",
                    full.display(),
                    img.width(),
                    img.height()
                )));
            }
            Ok(with_channels(&img, channels))
        };
        let ir = load(&r.ir_path, 1)?;
        let vi = load(&r.vi_path, 3)?;
        let ir_ref = r.ir_ref_path.as_deref().map(|p| load(p, 1)).transpose()?.unwrap_or_else(|| ir.clone());
        let vi_ref = r.vi_ref_path.as_deref().map(|p| load(p, 3)).transpose()?.unwrap_or_else(|| vi.clone());
        FusionSample::new(ir, vi, ir_ref, vi_ref, r.prompt_ir.clone(), r.prompt_vi.clone())
            .map_err(|e| Error::Manifest(format!("record `{}`: {e}", r.name)))
    }

    pub fn load_samples(&self) -> Result<Vec<FusionSample>> {
        self.records.iter().map(|r| self.load_sample(r)).collect()
    }
}

/// Result of matching directories by file name.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub manifest: DatasetManifest,
    /// Files present in some but not all directories; excluded from the manifest.
    pub unmatched: Vec<PathBuf>,
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Builds a manifest from parallel directories matched by file name. The
/// optional pair of reference directories must match as well.
pub fn prepare(ir_dir: &Path, vi_dir: &Path, refs: Option<(&Path, &Path)>) -> Result<Prepared> {
    let mut dirs = vec![list_images(ir_dir)?, list_images(vi_dir)?];
    if let Some((a, b)) = refs {
        dirs.push(list_images(a)?);
        dirs.push(list_images(b)?);
    }
    let mut records = Vec::new();
    let mut unmatched = Vec::new();
    let mut names: Vec<&String> = dirs.iter().flat_map(|d| d.keys()).collect();
    names.sort();
    names.dedup();
    for name in names {
        let found: Vec<Option<&PathBuf>> = dirs.iter().map(|d| d.get(name)).collect();
        if found.iter().any(Option::is_none) {
            unmatched.extend(found.into_iter().flatten().cloned());
            continue;
        }
        let paths: Vec<PathBuf> = found.into_iter().flatten().cloned().collect();
        for p in &paths {
            let (w, h) = image::image_dimensions(p).map_err(|source| Error::Image { path: p.clone(), source })?;
            if (w as usize) < MIN_SIDE || (h as usize) < MIN_SIDE {
                return Err(Error::Manifest(format!("{} is {w}x{h}, smaller than {MIN_SIDE}x{MIN_SIDE}", p.display())));
            }
        }
        let stem = Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name);
        let mut r = ManifestRecord::clean(stem, paths[0].clone(), paths[1].clone());
        if paths.len() == 4 {
            r.ir_ref_path = Some(paths[2].clone());
            r.vi_ref_path = Some(paths[3].clone());
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!(
            "no matching image pairs in {} and {}",
            ir_dir.display(),
            vi_dir.display()
        )));
    }
    Ok(Prepared { manifest: DatasetManifest { root: PathBuf::new(), records }, unmatched })
}

/// Top-left corners of the aligned `size`-pixel windows cut from an
/// `h x w` image: one per cell of a `floor(h/size) x floor(w/size)` grid,
/// placed uniformly at random inside its cell.
pub fn patch_windows(h: usize, w: usize, size: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if size == 0 || h < size || w < size {
        return Err(Error::Manifest(format!("{h}x{w} image is smaller than the {size}x{size} patch")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (h / size, w / size);
    let mut out = Vec::with_capacity(rows * cols);
    let offset = |i: usize, n: usize, extent: usize, rng: &mut ChaCha8Rng| {
        let start = i * extent / n;
        let end = (i + 1) * extent / n;
        rng.random_range(start..=end - size)
    };
    for i in 0..rows {
        for j in 0..cols {
            let top = offset(i, rows, h, &mut rng);
            let left = offset(j, cols, w, &mut rng);
            out.push((top, left));
        }
    }
    Ok(out)
}

/// Cuts aligned patches (same window in all four images) from `sample`.
pub fn crop_patches(sample: &FusionSample, size: usize, seed: u64) -> Result<Vec<FusionSample>> {
    patch_windows(sample.height(), sample.width(), size, seed)?
        .into_iter()
        .map(|(top, left)| Ok(sample.crop(top, left, size)?))
        .collect()
}

/// Batches of `items` in the seeded order of `epoch`; the last batch may be short.
pub fn batch_iter<T>(
    items: &[T],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Vec<&T>> + '_> {
    if items.is_empty() {
        return Err(Error::Manifest("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Manifest("batch size must be at least 1".into()));
    }
    let order = epoch_order(items.len(), seed, epoch);
    let batches: Vec<Vec<&T>> = order.chunks(batch_size).map(|c| c.iter().map(|&i| &items[i]).collect()).collect();
    Ok(batches.into_iter())
}
