//! Image datasets: a directory loader and a planted-feature generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Dataset;
use crate::tensor::{Scalar, Tensor};
use crate::viz::{read_image, write_image, RgbImage};

pub const PATCH_SIZE: usize = 12;
pub const DEFAULT_INPUT_SIZE: usize = 64;
pub const DEFAULT_SPLIT: f64 = 0.8;
/// Classes 0..4 use the four quadrants, class 4 the centre.
pub const MAX_SYNTH_CLASSES: usize = 5;

const PATCH_COLORS: [[f64; 3]; MAX_SYNTH_CLASSES] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.2, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
];

/// Axis-aligned square region `[y, y + size) x [x, x + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchBox {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

impl PatchBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.size).contains(&y) && (self.x..self.x + self.size).contains(&x)
    }

    pub fn area(&self) -> usize {
        self.size * self.size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset<T = f64> {
    pub data: Dataset<T>,
    /// Ground-truth patch of each image, aligned with `data.images`.
    pub patches: Vec<PatchBox>,
}

impl<T: Scalar> SynthDataset<T> {
    pub fn subset(&self, indices: &[usize]) -> Self {
        SynthDataset {
            data: self.data.subset(indices),
            patches: indices.iter().map(|&i| self.patches[i]).collect(),
        }
    }

    /// Writes `root/<class>/<index>.ppm` plus `root/patches.csv`.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let mut csv = String::from("file,class,y,x,size\n");
        for (i, (img, &label)) in self.data.images.iter().zip(&self.data.labels).enumerate() {
            let class = &self.data.class_names[label];
            let dir = root.join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let name = format!("{i:05}.ppm");
            write_image(&RgbImage::from_tensor(img)?, dir.join(&name))?;
            let p = self.patches[i];
            csv.push_str(&format!(
                "{class}/{name},{label},{},{},{}\n",
                p.y, p.x, p.size
            ));
        }
        let path = root.join("patches.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }
}

fn patch_region(class: usize, size: usize) -> (usize, usize, usize, usize) {
    let half = size / 2;
    match class {
        0 => (0, half, 0, half),
        1 => (0, half, half, size),
        2 => (half, size, 0, half),
        3 => (half, size, half, size),
        _ => (size / 4, size - size / 4, size / 4, size - size / 4),
    }
}

/// Textured noise background with one bright coloured `12 x 12` patch.
/// Class `c` fixes both the patch colour and the quadrant it is placed in.
/// Images are interleaved by class.
pub fn synth_dataset<T: Scalar>(
    n_per_class: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<SynthDataset<T>> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    if classes == 0 || classes > MAX_SYNTH_CLASSES {
        return Err(Error::invalid(format!(
            "classes must be in 1..={MAX_SYNTH_CLASSES}"
        )));
    }
    if size < 2 * PATCH_SIZE {
        return Err(Error::invalid(format!(
            "image size must be at least {}",
            2 * PATCH_SIZE
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut images = Vec::with_capacity(n_per_class * classes);
    let mut labels = Vec::with_capacity(images.capacity());
    let mut patches = Vec::with_capacity(images.capacity());
    for _ in 0..n_per_class {
        for class in 0..classes {
            let (fy, fx, phase) = (
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.5),
                rng.random_range(0.0..6.3),
            );
            // Gray texture: identical in every channel, so only the patch carries colour.
            let mut data = vec![0.0f64; 3 * plane];
            for p in 0..plane {
                let (y, x) = ((p / size) as f64, (p % size) as f64);
                let wave = 0.05 * ((fy * y + phase).sin() * (fx * x).cos());
                let v = (0.1 + wave + rng.random_range(-0.05..0.05)).clamp(0.0, 0.2);
                for ch in 0..3 {
                    data[ch * plane + p] = v;
                }
            }
            let (y0, y1, x0, x1) = patch_region(class, size);
            let patch = PatchBox {
                y: rng.random_range(y0..=y1 - PATCH_SIZE),
                x: rng.random_range(x0..=x1 - PATCH_SIZE),
                size: PATCH_SIZE,
            };
            let color = PATCH_COLORS[class];
            for y in patch.y..patch.y + PATCH_SIZE {
                for x in patch.x..patch.x + PATCH_SIZE {
                    for (ch, &c) in color.iter().enumerate() {
                        data[ch * plane + y * size + x] = c - rng.random_range(0.0..0.1);
                    }
                }
            }
            images.push(Tensor::new(
                vec![3, size, size],
                data.into_iter().map(T::of).collect(),
            )?);
            labels.push(class);
            patches.push(patch);
        }
    }
    let class_names = (0..classes).map(|c| format!("class{c}")).collect();
    Ok(SynthDataset {
        data: Dataset {
            images,
            labels,
            class_names,
        },
        patches,
    })
}

/// Deterministic per-class split: `round(n * fraction)` of each class goes
/// to the first list.
pub fn split_indices(
    labels: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "split fraction {fraction} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let cut = (members.len() as f64 * fraction).round() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    /// Sorted image files of each class.
    pub files: Vec<Vec<PathBuf>>,
    pub target_size: usize,
    pub split: f64,
    pub seed: u64,
    /// `(class, file index)` pairs.
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset<T = f64> {
    pub manifest: DatasetManifest,
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("ppm" | "png")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Decodes one image, resizes it bilinearly to `size x size` and scales it
/// to `[0, 1]`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, size: usize) -> Result<Tensor<T>> {
    let img = read_image(path)?;
    img.to_tensor::<T>().bilinear_resize(size, size)
}

/// Reads `root/<class>/*.{ppm,png}`; class names are the sorted
/// subdirectory names.
pub fn load_dataset<T: Scalar>(
    root: impl AsRef<Path>,
    target_size: usize,
    split: f64,
    seed: u64,
) -> Result<LoadedDataset<T>> {
    let root = root.as_ref();
    if target_size == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let mut class_names = Vec::new();
    let mut files = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .map(str::to_owned)
            .ok_or_else(|| {
                Error::Dataset(format!(
                    "class directory name is not valid UTF-8: {}",
                    dir.display()
                ))
            })?;
        let images: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} has no .ppm or .png images",
                dir.display()
            )));
        }
        class_names.push(name);
        files.push(images);
    }
    if class_names.is_empty() {
        return Err(Error::Dataset(format!(
            "no class subdirectories under {}",
            root.display()
        )));
    }

    let mut labels = Vec::new();
    let mut images = Vec::new();
    let mut index = Vec::new();
    for (class, list) in files.iter().enumerate() {
        for (i, path) in list.iter().enumerate() {
            let t = load_image::<T>(path, target_size)
                .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", path.display())))?;
            images.push(t);
            labels.push(class);
            index.push((class, i));
        }
    }
    let (train_idx, test_idx) = split_indices(&labels, class_names.len(), split, seed)?;
    let all = Dataset {
        images,
        labels,
        class_names: class_names.clone(),
    };
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        class_names,
        files,
        target_size,
        split,
        seed,
        train: train_idx.iter().map(|&i| index[i]).collect(),
        test: test_idx.iter().map(|&i| index[i]).collect(),
    };
    Ok(LoadedDataset {
        manifest,
        train: all.subset(&train_idx),
        test: all.subset(&test_idx),
    })
}
