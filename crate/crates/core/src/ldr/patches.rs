use super::{Image, NetworkInput};
use crate::error::{Error, Result};

/// Where a training patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub source: usize,
    pub y: usize,
    pub x: usize,
    /// Element of the dihedral group applied, `0..8`.
    pub augmentation: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub input: NetworkInput,
    pub gt: Image,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    /// One entry per source image that could not be cropped.
    pub warnings: Vec<String>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Crop origins along one axis: a regular grid from 0, plus an anchor flush
/// with the far border when the grid does not reach it.
pub fn crop_anchors(size: usize, patch: usize, stride: usize) -> Vec<usize> {
    if size < patch || patch == 0 || stride == 0 {
        return Vec::new();
    }
    let last = size - patch;
    let mut anchors: Vec<usize> = (0..=last).step_by(stride).collect();
    if last % stride != 0 {
        anchors.push(last);
    }
    anchors
}

/// Tiles every `(input, gt)` pair into `patch × patch` crops.
pub fn crop_patches(
    samples: &[(NetworkInput, Image)],
    patch: usize,
    stride: usize,
) -> Result<PatchSet> {
    if patch == 0 || stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    let mut set = PatchSet::default();
    for (source, (input, gt)) in samples.iter().enumerate() {
        let (h, w) = (input.height(), input.width());
        if h < patch || w < patch {
            let msg = format!("sample {source}: {h}x{w} is smaller than patch {patch}, skipped");
            log::warn!("{msg}");
            set.warnings.push(msg);
            continue;
        }
        for &y in &crop_anchors(h, patch, stride) {
            for &x in &crop_anchors(w, patch, stride) {
                set.patches.push(Patch {
                    input: input.crop(y, x, patch, patch),
                    gt: gt.crop(y, x, patch, patch),
                    provenance: Provenance {
                        source,
                        y,
                        x,
                        augmentation: 0,
                    },
                });
            }
        }
    }
    Ok(set)
}

fn rot90(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    Image::from_fn(w, h, img.channels(), |y, x, c| img.get(x, w - 1 - y, c))
}

fn flip(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, img.channels(), |y, x, c| img.get(y, w - 1 - x, c))
}

/// Dihedral transform `id`: an optional horizontal flip (`id >= 4`)
/// followed by `id % 4` counter-clockwise quarter turns.
pub fn transform_image(img: &Image, id: u8) -> Result<Image> {
    if id >= 8 {
        return Err(Error::Domain(format!("augmentation id {id} outside 0..8")));
    }
    let mut out = if id >= 4 { flip(img) } else { img.clone() };
    for _ in 0..id % 4 {
        out = rot90(&out);
    }
    Ok(out)
}

/// Id of the inverse dihedral element.
pub fn inverse_augment(id: u8) -> u8 {
    if id >= 4 {
        id
    } else {
        (4 - id) % 4
    }
}

/// Applies the same dihedral transform to all three inputs and the target.
pub fn augment(patch: &Patch, id: u8) -> Result<Patch> {
    let t = |img: &Image| transform_image(img, id);
    Ok(Patch {
        input: NetworkInput {
            x: [t(&patch.input.x[0])?, t(&patch.input.x[1])?, t(&patch.input.x[2])?],
        },
        gt: t(&patch.gt)?,
        provenance: Provenance {
            augmentation: id,
            ..patch.provenance
        },
    })
}
