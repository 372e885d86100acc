//! Raw sample storage: synthetic generators and the on-disk
//! `<root>/{train,test}/<class>/<file>` layout.

use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::SyntheticConfig;
use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// Locates one sample: source dataset index plus row index in its split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub source: u32,
    pub split: Split,
    pub index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Row-major sample matrix with per-row local class labels.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SourceDataset {
    pub name: String,
    /// `[dim]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub class_names: Vec<String>,
    pub train: SplitData,
    pub test: SplitData,
}

impl SourceDataset {
    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Row slice for one sample.
    pub fn row(&self, split: Split, index: usize) -> &[f64] {
        let d = self.input_dim();
        &self.split(split).data[index * d..(index + 1) * d]
    }
}

/// All datasets of one experiment, sharing one input shape after
/// [`DataPool::harmonize`].
#[derive(Debug, Clone, Default)]
pub struct DataPool {
    pub sources: Vec<SourceDataset>,
}

impl DataPool {
    pub fn new(sources: Vec<SourceDataset>) -> Self {
        Self { sources }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.sources[0].input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.sources[0].input_dim()
    }

    pub fn source_index(&self, name: &str) -> Option<usize> {
        self.sources.iter().position(|s| s.name == name)
    }

    pub fn row(&self, r: SampleRef) -> &[f64] {
        self.sources[r.source as usize].row(r.split, r.index as usize)
    }

    /// Stacks the referenced samples into an `n x dim` matrix.
    pub fn gather(&self, refs: &[SampleRef]) -> DMatrix<f64> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(refs.len() * d);
        for &r in refs {
            data.extend_from_slice(self.row(r));
        }
        DMatrix::from_row_slice(refs.len(), d, &data)
    }

    /// Brings every source to a common input shape. Image sources are resized
    /// bilinearly to the largest height/width present; single-channel images
    /// are replicated to three channels when any source is colour.
    pub fn harmonize(&mut self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Dataset("no datasets loaded".into()));
        }
        let first = self.sources[0].input_shape.clone();
        if self.sources.iter().all(|s| s.input_shape == first) {
            return Ok(());
        }
        if self.sources.iter().any(|s| s.input_shape.len() != 3) {
            return Err(Error::Dataset(
                "flat-vector datasets of different widths cannot be combined".into(),
            ));
        }
        let channels = if self.sources.iter().any(|s| s.input_shape[0] == 3) { 3 } else { 1 };
        let h = self.sources.iter().map(|s| s.input_shape[1]).max().unwrap_or(1);
        let w = self.sources.iter().map(|s| s.input_shape[2]).max().unwrap_or(1);
        let target = vec![channels, h, w];
        for src in &mut self.sources {
            if src.input_shape == target {
                continue;
            }
            if !(src.input_shape[0] == 1 || src.input_shape[0] == 3) {
                return Err(Error::Dataset(format!(
                    "dataset `{}` has {} channels; only 1 or 3 can be harmonized",
                    src.name, src.input_shape[0]
                )));
            }
            let shape = src.input_shape.clone();
            for split in [&mut src.train, &mut src.test] {
                split.data = resize_rows(&split.data, &shape, &target);
            }
            src.input_shape = target.clone();
        }
        Ok(())
    }
}

fn resize_rows(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let (c, h, w) = (from[0], from[1], from[2]);
    let (tc, th, tw) = (to[0], to[1], to[2]);
    let d = c * h * w;
    let mut out = Vec::with_capacity(data.len() / d * tc * th * tw);
    for row in data.chunks(d) {
        let img: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| row[ch * h * w + y as usize * w + x as usize] as f32;
            if c == 1 {
                Rgb([px(0); 3])
            } else {
                Rgb([px(0), px(1), px(2)])
            }
        });
        let resized = if (h, w) == (th, tw) {
            img
        } else {
            imageops::resize(&img, tw as u32, th as u32, FilterType::Triangle)
        };
        for ch in 0..tc {
            for y in 0..th {
                for x in 0..tw {
                    out.push(resized.get_pixel(x as u32, y as u32).0[ch] as f64);
                }
            }
        }
    }
    out
}

/// Index suffix of a synthetic dataset name: `synthetic` is 0, `synthetic:3` is 3.
pub fn synthetic_index(name: &str) -> Option<u64> {
    if name == "synthetic" {
        return Some(0);
    }
    name.strip_prefix("synthetic:").and_then(|s| s.parse().ok())
}

/// Gaussian clusters in a low-dimensional latent space, lifted to the input
/// shape by a fixed random linear map plus isotropic input noise. The lift is
/// scaled so every input value has roughly unit variance.
pub fn generate_synthetic(name: &str, cfg: &SyntheticConfig) -> Result<SourceDataset> {
    let index = synthetic_index(name)
        .ok_or_else(|| Error::Dataset(format!("`{name}` is not a synthetic dataset name")))?;
    let mut rng = seeded_rng(cfg.data_seed, &[0x5a17, index]);
    let dim: usize = cfg.input_shape.iter().product();
    let latent = cfg.latent_dim.max(1);
    let gauss = |rng: &mut crate::util::Rng| rng.sample::<f64, _>(StandardNormal);

    let means: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| (0..latent).map(|_| cfg.class_sep * gauss(&mut rng)).collect())
        .collect();
    let spread = (cfg.class_sep.powi(2) + cfg.noise.powi(2)).max(f64::MIN_POSITIVE);
    let scale = 1.0 / (latent as f64 * spread).sqrt();
    let lift: Vec<f64> = (0..dim * latent).map(|_| scale * gauss(&mut rng)).collect();
    let pixel_noise = 0.1 * cfg.noise / spread.sqrt();

    let make = |per_class: usize, rng: &mut crate::util::Rng| {
        let mut split = SplitData::default();
        split.data.reserve(per_class * cfg.num_classes * dim);
        let mut z = vec![0.0; latent];
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for (zi, mi) in z.iter_mut().zip(mean) {
                    *zi = mi + cfg.noise * gauss(rng);
                }
                for r in 0..dim {
                    let row = &lift[r * latent..(r + 1) * latent];
                    let v: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                    split.data.push(v + pixel_noise * gauss(rng));
                }
                split.labels.push(c);
            }
        }
        split
    };
    let train = make(cfg.train_per_class, &mut rng);
    let test = make(cfg.test_per_class, &mut rng);
    Ok(SourceDataset {
        name: name.to_string(),
        input_shape: cfg.input_shape.clone(),
        class_names: (0..cfg.num_classes).map(|c| format!("class_{c:03}")).collect(),
        train,
        test,
    })
}

fn sorted_dirs(path: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = fs::read_dir(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads `<root>/train/<class>/*` and `<root>/test/<class>/*` image folders.
/// Pixel values are scaled to `[0, 1]`.
pub fn load_image_folder(name: &str, root: &Path) -> Result<SourceDataset> {
    let train_dirs = sorted_dirs(&root.join("train"))?;
    let test_dirs = sorted_dirs(&root.join("test"))?;
    let names = |dirs: &[std::path::PathBuf]| -> Vec<String> {
        dirs.iter()
            .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect()
    };
    let class_names = names(&train_dirs);
    if class_names.is_empty() {
        return Err(Error::Dataset(format!("{}: no class folders under train/", root.display())));
    }
    if names(&test_dirs) != class_names {
        return Err(Error::Dataset(format!(
            "{}: train/ and test/ must contain the same class folders",
            root.display()
        )));
    }
    let mut shape: Option<Vec<usize>> = None;
    let mut load_split = |dirs: &[std::path::PathBuf]| -> Result<SplitData> {
        let mut split = SplitData::default();
        for (label, dir) in dirs.iter().enumerate() {
            let mut files: Vec<_> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir.display().to_string(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Dataset(format!("{}: class folder is empty", dir.display())));
            }
            for f in files {
                let img = image::open(&f)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", f.display())))?;
                let gray = !img.color().has_color();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let this = vec![if gray { 1 } else { 3 }, h, w];
                match &shape {
                    None => shape = Some(this.clone()),
                    Some(s) if *s != this => {
                        return Err(Error::Dataset(format!(
                            "{}: shape {:?} differs from {:?} within one dataset",
                            f.display(),
                            this,
                            s
                        )))
                    }
                    _ => {}
                }
                if gray {
                    let buf = img.to_luma32f();
                    split.data.extend(buf.pixels().map(|p| p.0[0] as f64));
                } else {
                    let buf = img.to_rgb32f();
                    for ch in 0..3 {
                        split.data.extend(buf.pixels().map(|p| p.0[ch] as f64));
                    }
                }
                split.labels.push(label);
            }
        }
        Ok(split)
    };
    let train = load_split(&train_dirs)?;
    let test = load_split(&test_dirs)?;
    Ok(SourceDataset {
        name: name.to_string(),
        input_shape: shape.unwrap_or_default(),
        class_names,
        train,
        test,
    })
}
