use std::path::{Path, PathBuf};

use rand::Rng;

use super::{degrade, load_png, Dihedral, Image};
use crate::error::{Error, Result};

/// Flat folder of HR images; LR counterparts are always synthesized with
/// the canonical degradation.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub dir: PathBuf,
    pub scale: usize,
    pub lr_patch: usize,
    pub augment: bool,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn hr_patch(&self) -> usize {
        self.scale * self.lr_patch
    }
}

#[derive(Clone, Debug)]
pub struct NamedImage {
    pub id: String,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: Image,
    pub hr: Image,
    pub source: usize,
    /// Crop offset in LR pixels; the HR window starts at `scale ×` this.
    pub offset: (usize, usize),
    pub transform: Dihedral,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: Vec<NamedImage>,
    eligible: Vec<usize>,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"))
        {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

impl Dataset {
    pub fn load(spec: DatasetSpec) -> Result<Self> {
        let files = png_files(&spec.dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!("no PNG images in {}", spec.dir.display())));
        }
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let id = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            images.push(NamedImage {
                id,
                image: load_png(&f)?,
            });
        }
        Self::from_images(spec, images)
    }

    pub fn from_images(spec: DatasetSpec, images: Vec<NamedImage>) -> Result<Self> {
        if spec.scale == 0 || spec.lr_patch == 0 {
            return Err(Error::Config("scale and patch size must be positive".into()));
        }
        let hr = spec.hr_patch();
        let eligible: Vec<usize> = images
            .iter()
            .enumerate()
            .filter_map(|(i, img)| {
                let (h, w) = img.image.dims();
                if h >= hr && w >= hr {
                    Some(i)
                } else {
                    log::warn!("skipping {} ({h}x{w}): smaller than a {hr}x{hr} crop", img.id);
                    None
                }
            })
            .collect();
        if eligible.is_empty() {
            return Err(Error::Data(format!(
                "no image is large enough for {hr}x{hr} HR crops"
            )));
        }
        Ok(Self {
            spec,
            images,
            eligible,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn eligible(&self) -> &[usize] {
        &self.eligible
    }

    /// Uniform random aligned crop; `augment` is applied when enabled.
    pub fn crop_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PatchPair> {
        let s = self.spec.scale;
        let p = self.spec.lr_patch;
        let source = self.eligible[rng.random_range(0..self.eligible.len())];
        let img = &self.images[source].image;
        let (lr_h, lr_w) = (img.height() / s, img.width() / s);
        let oy = rng.random_range(0..=lr_h - p);
        let ox = rng.random_range(0..=lr_w - p);
        let hr = img.crop(oy * s, ox * s, p * s, p * s)?;
        let lr = degrade(&hr, s)?;
        let pair = PatchPair {
            lr,
            hr,
            source,
            offset: (oy, ox),
            transform: Dihedral::IDENTITY,
        };
        Ok(if self.spec.augment {
            augment(pair, rng)
        } else {
            pair
        })
    }
}

/// Applies one of the eight dihedral transforms, chosen uniformly, to both
/// halves of the pair.
pub fn augment<R: Rng + ?Sized>(pair: PatchPair, rng: &mut R) -> PatchPair {
    let t = Dihedral::new(rng.random_range(0..8));
    PatchPair {
        lr: pair.lr.transformed(t),
        hr: pair.hr.transformed(t),
        transform: t,
        ..pair
    }
}
