//! Dataset ingestion: a folder-per-class manifest with stratified splits, the
//! preprocessing fan-out that turns files into training-ready samples, and a
//! synthetic glyph generator so the full pipeline is testable without any
//! external corpus.

use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageproc::{preprocess_pipeline_stages, ChannelOrder, Image, PipelineConfig};
use crate::tensor::Tensor;

/// Metadata view of an on-disk corpus: sorted class folders, per-class file
/// lists, and the seeded stratified train/val/test assignment.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    /// Per class, sorted file paths.
    pub files: Vec<Vec<PathBuf>>,
    pub split_seed: u64,
    /// Indices into the flattened (class-major, file-minor) sample list.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    pub fn num_samples(&self) -> usize {
        self.files.iter().map(|f| f.len()).sum()
    }

    /// Flattened (path, label) list in class-major order.
    pub fn entries(&self) -> Vec<(PathBuf, usize)> {
        let mut out = Vec::with_capacity(self.num_samples());
        for (label, files) in self.files.iter().enumerate() {
            for f in files {
                out.push((f.clone(), label));
            }
        }
        out
    }
}

/// One preprocessed sample: an 8-bit RGB image at the pipeline's target size
/// (normalization to [0,1] happens when the tensor is built).
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

impl Sample {
    /// Stored samples are already RGB; this is just the final /255.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            vec![self.image.height, self.image.width, 3],
            self.image.pixels.iter().map(|&v| v as f64 / 255.0).collect(),
        )
        .expect("sample buffer matches dims")
    }
}

/// Fully materialized dataset: preprocessed samples plus the manifest splits.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl LoadedDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Per-class sample counts over the given index set.
    pub fn label_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for &i in indices {
            counts[self.samples[i].label] += 1;
        }
        counts
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

/// Scans a folder-per-class tree, validates that every file decodes, and
/// assigns a seeded stratified 80/10/10 split. Class ids are the
/// lexicographic ranks of the folder names.
pub fn load_dataset(root: &Path, split_seed: u64) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} does not exist", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "no classes found: {} contains {} class folders, need at least 2",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut files = Vec::with_capacity(class_dirs.len());
    for dir in &class_dirs {
        let mut per: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        per.sort();
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        if per.is_empty() {
            return Err(Error::Data(format!("class folder {} has no decodable images", name)));
        }
        classes.push(name);
        files.push(per);
    }
    // every file must decode
    let all: Vec<&PathBuf> = files.iter().flatten().collect();
    let failures: Vec<String> = all
        .par_iter()
        .filter_map(|p| Image::load(p).err().map(|e| format!("{}: {}", p.display(), e)))
        .collect();
    if let Some(first) = failures.first() {
        return Err(Error::Data(format!("undecodable image {}", first)));
    }

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let mut base = 0usize;
    for (ci, per) in files.iter().enumerate() {
        let n = per.len();
        let n_val = n / 10;
        let n_test = n / 10;
        if n_val == 0 || n_test == 0 {
            return Err(Error::Data(format!(
                "class {} has only {} samples; at least 10 are needed for an 80/10/10 split",
                classes[ci], n
            )));
        }
        let mut idx: Vec<usize> = (base..base + n).collect();
        let mut rng = StdRng::seed_from_u64(split_seed.wrapping_add(ci as u64).wrapping_mul(0x9E3779B97F4A7C15));
        idx.shuffle(&mut rng);
        val.extend_from_slice(&idx[0..n_val]);
        test.extend_from_slice(&idx[n_val..n_val + n_test]);
        train.extend_from_slice(&idx[n_val + n_test..]);
        base += n;
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        files,
        split_seed,
        train,
        val,
        test,
    })
}

/// Decodes and preprocesses every manifest file (in parallel, deterministic
/// order) into a [`LoadedDataset`].
pub fn prepare(manifest: &DatasetManifest, pipe: &PipelineConfig) -> Result<LoadedDataset> {
    let entries = manifest.entries();
    let samples: Result<Vec<Sample>> = entries
        .par_iter()
        .map(|(path, label)| {
            let img = Image::load(path)?;
            let norm = preprocess_pipeline_stages(&img, pipe, None)
                .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
            Ok(Sample {
                image: normalized_to_rgb8(&norm),
                label: *label,
            })
        })
        .collect();
    Ok(LoadedDataset {
        class_names: manifest.classes.clone(),
        samples: samples?,
        train: manifest.train.clone(),
        val: manifest.val.clone(),
        test: manifest.test.clone(),
    })
}

/// Stores pipeline output back as 8-bit RGB (the integer image the pipeline
/// produced before its final /255).
pub fn normalized_to_rgb8(norm: &crate::imageproc::NormalizedImage) -> Image {
    Image {
        height: norm.height,
        width: norm.width,
        channels: 3,
        order: ChannelOrder::Rgb,
        pixels: norm.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect(),
    }
}

// ── synthetic glyphs ─────────────────────────────────────────────────

/// Procedural "handwritten" glyphs: every class shares a horizontal
/// headstroke and differs in the strokes hung below it; samples jitter in
/// position, tilt, and pen thickness.
pub mod synth {
    use super::*;

    fn stamp_disc(img: &mut Image, r: f64, c: f64, radius: f64, value: u8) {
        let r0 = (r - radius).floor().max(0.0) as usize;
        let r1 = (r + radius).ceil().min(img.height as f64 - 1.0) as usize;
        let c0 = (c - radius).floor().max(0.0) as usize;
        let c1 = (c + radius).ceil().min(img.width as f64 - 1.0) as usize;
        for rr in r0..=r1 {
            for cc in c0..=c1 {
                let d2 = (rr as f64 - r).powi(2) + (cc as f64 - c).powi(2);
                if d2 <= radius * radius {
                    for ch in 0..img.channels {
                        img.set(rr, cc, ch, value);
                    }
                }
            }
        }
    }

    pub fn draw_line(img: &mut Image, from: (f64, f64), to: (f64, f64), thickness: f64, value: u8) {
        let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
        let steps = (len * 2.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            stamp_disc(
                img,
                from.0 + (to.0 - from.0) * t,
                from.1 + (to.1 - from.1) * t,
                thickness / 2.0,
                value,
            );
        }
    }

    pub fn draw_arc(
        img: &mut Image,
        center: (f64, f64),
        radius: f64,
        start_deg: f64,
        end_deg: f64,
        thickness: f64,
        value: u8,
    ) {
        let steps = (radius * (end_deg - start_deg).abs().to_radians() * 2.0).ceil().max(4.0) as usize;
        for i in 0..=steps {
            let a = (start_deg + (end_deg - start_deg) * i as f64 / steps as f64).to_radians();
            stamp_disc(
                img,
                center.0 + radius * a.sin(),
                center.1 + radius * a.cos(),
                thickness / 2.0,
                value,
            );
        }
    }

    /// Renders one glyph for (class, index). Deterministic in all arguments.
    pub fn render_glyph(class: usize, index: usize, seed: u64, size: usize) -> Image {
        let mut rng = StdRng::seed_from_u64(
            seed.wrapping_mul(0x9E3779B97F4A7C15)
                .wrapping_add((class as u64) << 32)
                .wrapping_add(index as u64),
        );
        let mut img = Image::new(size, size, 1, ChannelOrder::Gray, 255);
        let s = size as f64;
        let thick = rng.gen_range(5.5..7.5);
        let ink = rng.gen_range(0..30) as u8;
        let jit = |rng: &mut StdRng| rng.gen_range(-2.5..2.5);

        // headstroke (matra) shared by every class
        let top = s * 0.22 + jit(&mut rng);
        let left = s * 0.18 + jit(&mut rng);
        let right = s * 0.82 + jit(&mut rng);
        draw_line(&mut img, (top, left), (top, right), thick, ink);

        // class-specific arrangement below the matra
        let a = class % 8;
        let b = (class / 8) % 5;
        let c = (class / 40) % 3;
        let bottom = s * 0.78;
        let mid_c = s * 0.5;
        match a {
            0 => draw_line(&mut img, (top, left + 6.0 + jit(&mut rng)), (bottom, left + 6.0 + jit(&mut rng)), thick, ink),
            1 => draw_line(&mut img, (top, mid_c + jit(&mut rng)), (bottom, mid_c + jit(&mut rng)), thick, ink),
            2 => draw_line(&mut img, (top, right - 6.0 + jit(&mut rng)), (bottom, right - 6.0 + jit(&mut rng)), thick, ink),
            3 => draw_line(&mut img, (top, left + 4.0), (bottom, right - 4.0 + jit(&mut rng)), thick, ink),
            4 => draw_line(&mut img, (top, right - 4.0), (bottom, left + 4.0 + jit(&mut rng)), thick, ink),
            5 => {
                draw_line(&mut img, (top, left + 5.0), (bottom, mid_c + jit(&mut rng)), thick, ink);
                draw_line(&mut img, (bottom, mid_c + jit(&mut rng)), (top, right - 5.0), thick, ink);
            }
            6 => draw_arc(&mut img, (s * 0.52 + jit(&mut rng), mid_c + jit(&mut rng)), s * 0.22, 0.0, 360.0, thick, ink),
            _ => {
                draw_line(&mut img, (top, mid_c), (s * 0.6 + jit(&mut rng), mid_c + jit(&mut rng)), thick, ink);
                draw_arc(&mut img, (s * 0.66, mid_c - s * 0.1), s * 0.13, 90.0, 320.0, thick, ink);
            }
        }
        match b {
            0 => {}
            1 => draw_line(&mut img, (bottom + 4.0, left + 6.0), (bottom + 4.0, right - 6.0), thick, ink),
            2 => draw_arc(&mut img, (s * 0.42, s * 0.70), s * 0.11, 0.0, 360.0, thick, ink),
            3 => draw_line(&mut img, (s * 0.5 + jit(&mut rng), left + 2.0), (s * 0.5 + jit(&mut rng), mid_c - 4.0), thick, ink),
            _ => draw_arc(&mut img, (s * 0.52, s * 0.74), s * 0.16, 140.0, 360.0, thick, ink),
        }
        match c {
            0 => {}
            1 => stamp_disc(&mut img, s * 0.88, s * 0.5 + jit(&mut rng), thick, ink),
            _ => draw_line(&mut img, (bottom, right - 8.0), (s * 0.88 + jit(&mut rng), right - 2.0), thick, ink),
        }

        // small tilt, as if scanned slightly askew
        let angle = rng.gen_range(-3.0..3.0);
        crate::imageproc::rotate(&img, angle)
    }

    /// Writes a folder-per-class PNG corpus under `root`.
    pub fn generate_tree(
        root: &Path,
        classes: usize,
        per_class: usize,
        seed: u64,
        size: usize,
    ) -> Result<()> {
        if classes < 2 || classes > 120 {
            return Err(Error::Config(format!(
                "synthetic corpus supports 2..=120 classes, got {}",
                classes
            )));
        }
        for class in 0..classes {
            let dir = root.join(format!("class_{:03}", class));
            std::fs::create_dir_all(&dir)?;
            for idx in 0..per_class {
                let img = render_glyph(class, idx, seed, size);
                img.save_png(&dir.join(format!("glyph_{:04}.png", idx)))?;
            }
        }
        Ok(())
    }

    /// In-memory synthetic dataset (no disk round trip) with the same split
    /// logic as [`load_dataset`].
    pub fn dataset(
        classes: usize,
        per_class: usize,
        seed: u64,
        pipe: &PipelineConfig,
    ) -> Result<LoadedDataset> {
        if classes < 2 || classes > 120 {
            return Err(Error::Config(format!(
                "synthetic corpus supports 2..=120 classes, got {}",
                classes
            )));
        }
        if per_class < 10 {
            return Err(Error::Data(format!(
                "need at least 10 samples per class for the 80/10/10 split, got {}",
                per_class
            )));
        }
        let raw: Vec<(usize, usize)> = (0..classes)
            .flat_map(|c| (0..per_class).map(move |i| (c, i)))
            .collect();
        let samples: Result<Vec<Sample>> = raw
            .par_iter()
            .map(|&(class, idx)| {
                let img = render_glyph(class, idx, seed, 128);
                let norm = preprocess_pipeline_stages(&img, pipe, None)?;
                Ok(Sample {
                    image: normalized_to_rgb8(&norm),
                    label: class,
                })
            })
            .collect();
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for class in 0..classes {
            let base = class * per_class;
            let n_val = per_class / 10;
            let n_test = per_class / 10;
            let mut idx: Vec<usize> = (base..base + per_class).collect();
            let mut rng =
                StdRng::seed_from_u64(seed.wrapping_add(class as u64).wrapping_mul(0x9E3779B97F4A7C15));
            idx.shuffle(&mut rng);
            val.extend_from_slice(&idx[0..n_val]);
            test.extend_from_slice(&idx[n_val..n_val + n_test]);
            train.extend_from_slice(&idx[n_val + n_test..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(LoadedDataset {
            class_names: (0..classes).map(|c| format!("class_{:03}", c)).collect(),
            samples: samples?,
            train,
            val,
            test,
        })
    }
}
