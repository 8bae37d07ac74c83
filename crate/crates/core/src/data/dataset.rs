//! Samples, manifests and on-disk datasets.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::image::{adapt_channels, read_image, read_mask, write_image, write_mask};
use super::patch::PatchGrid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor<f32>,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let (ih, iw) = match image.shape() {
            &[_, h, w] => (h, w),
            s => return Err(Error::Dataset(format!("{id}: image must be [C,H,W], got {:?}", s))),
        };
        if mask.shape() != [1, ih, iw] {
            return Err(Error::Dataset(format!(
                "{id}: image is {}x{} but mask has shape {:?}",
                ih,
                iw,
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("{id}: mask is not binary")));
        }
        Ok(Sample { image, mask, id })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.mask.numel() as f64
    }

    /// Mirror image along the horizontal axis (left-right flip).
    pub fn flipped(&self) -> Sample {
        let flip = |t: &Tensor<f32>| {
            let [c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
            let d = t.data();
            Tensor::from_fn(vec![c, h, w], |i| {
                let x = i % w;
                d[i - x + (w - 1 - x)]
            })
        };
        Sample {
            image: flip(&self.image),
            mask: flip(&self.mask),
            id: self.id.clone(),
        }
    }

    /// Cuts the sample into the patches of `grid`; ids get a `#k` suffix.
    pub fn patches(&self, grid: &PatchGrid) -> Result<Vec<Sample>> {
        let imgs = grid.extract(&self.image)?;
        let masks = grid.extract(&self.mask)?;
        Ok(imgs
            .into_iter()
            .zip(masks)
            .enumerate()
            .map(|(k, (image, mask))| Sample {
                image,
                mask,
                id: format!("{}#{}", self.id, k),
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(
                "split",
                format!("unknown split `{}` (expected train, val or test)", other),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
}

impl ManifestEntry {
    /// Sample id: the image file stem.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Tab-separated `split image mask` lines; relative paths resolve against
/// `root` (the manifest's directory).
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Dataset(format!(
                    "manifest line {}: expected `split<TAB>image<TAB>mask`, got {} fields",
                    i + 1,
                    cols.len()
                )));
            }
            entries.push(ManifestEntry {
                split: cols[0].parse()?,
                image: PathBuf::from(cols[1]),
                mask: PathBuf::from(cols[2]),
            });
        }
        let m = Manifest { root, entries };
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\n", e.split, e.image.display(), e.mask.display()))
            .collect()
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<String, Split> = HashMap::new();
        for e in &self.entries {
            let id = e.id();
            match seen.get(&id) {
                Some(&s) if s != e.split => {
                    return Err(Error::Dataset(format!(
                        "sample `{}` appears in both {} and {} splits",
                        id, s, e.split
                    )))
                }
                Some(_) => {
                    return Err(Error::Dataset(format!(
                        "sample `{}` listed twice in the {} split",
                        id, e.split
                    )))
                }
                None => {
                    seen.insert(id, e.split);
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads every sample of `split`, converting images to `channels`
    /// channels.
    pub fn load(&self, split: Split, channels: usize) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for e in self.entries(split) {
            let (ip, mp) = (self.resolve(&e.image), self.resolve(&e.mask));
            for p in [&ip, &mp] {
                if !p.exists() {
                    return Err(Error::Dataset(format!("missing file {}", p.display())));
                }
            }
            let image = adapt_channels(read_image(&ip)?, channels)?;
            let mask = read_mask(&mp)?;
            out.push(Sample::new(image, mask, e.id())?);
        }
        Ok(out)
    }
}

/// Writes samples as `images/<id>.ppm|pgm` and `masks/<id>.png` plus a
/// `manifest.tsv`, returning the manifest path.
pub fn write_dataset(dir: &Path, splits: &[(Split, &[Sample])]) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut entries = Vec::new();
    for (split, samples) in splits {
        for s in *samples {
            let ext = if s.image.shape()[0] == 1 { "pgm" } else { "ppm" };
            let image = PathBuf::from("images").join(format!("{}.{}", s.id, ext));
            let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
            write_image(&dir.join(&image), &s.image)?;
            let bits: Vec<bool> = s.mask.data().iter().map(|&v| v >= 0.5).collect();
            write_mask(&dir.join(&mask), s.width(), s.height(), &bits)?;
            entries.push(ManifestEntry {
                split: *split,
                image,
                mask,
            });
        }
    }
    let m = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    m.check_disjoint()?;
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, m.render()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parse_and_disjointness() {
        let m = Manifest::parse("train\ta/x1.png\tm/x1.png\nval\ta/x2.png\tm/x2.png\n", "/r").unwrap();
        assert_eq!(m.entries(Split::Train).count(), 1);
        assert_eq!(m.resolve(&m.entries[1].image), PathBuf::from("/r/a/x2.png"));
        assert!(Manifest::parse("train\ta/x1.png\tm/x1.png\nval\tb/x1.png\tm/x1.png\n", "/r").is_err());
        assert!(Manifest::parse("train a.png b.png\n", "/r").is_err());
        assert!(Manifest::parse("dev\ta.png\tb.png\n", "/r").is_err());
    }

    #[test]
    fn sample_validation() {
        let img = Tensor::zeros(vec![3, 4, 4]);
        assert!(Sample::new(img.clone(), Tensor::zeros(vec![1, 4, 5]), "a").is_err());
        assert!(Sample::new(img.clone(), Tensor::full(vec![1, 4, 4], 0.5), "a").is_err());
        assert!(Sample::new(img, Tensor::zeros(vec![1, 4, 4]), "a").is_ok());
    }

    #[test]
    fn flip_is_involution() {
        let img = Tensor::from_fn(vec![3, 2, 5], |i| i as f32 / 30.0);
        let mask = Tensor::from_fn(vec![1, 2, 5], |i| (i % 2) as f32);
        let s = Sample::new(img, mask, "s").unwrap();
        let f = s.flipped();
        assert_eq!(f.image.data()[0], s.image.data()[4]);
        assert_eq!(f.flipped(), s);
    }
}
