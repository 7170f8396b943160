//! On-disk dataset layout: `split.tsv` plus `images/<id>.png` and
//! palette-encoded `masks/<id>.png`.

use std::path::{Path, PathBuf};

use image::GrayImage;
use wearseg::dataio::{load_gray, load_mask, save_gray, save_mask, ClassPalette, DatasetSplit, Fit, LabelMask, Placement, Subset};
use wearseg::training::Example;

use crate::error::{CliError, CliResult};

pub const SPLIT_FILE: &str = "split.tsv";

pub type Item = (String, GrayImage, LabelMask);

#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub split: DatasetSplit,
}

impl DatasetDir {
    /// Opens `root` and checks that every listed image and mask exists.
    pub fn open(root: &Path) -> CliResult<Self> {
        let manifest = root.join(SPLIT_FILE);
        let text = std::fs::read_to_string(&manifest).map_err(|_| CliError::MissingPath {
            path: manifest.clone(),
            what: "dataset split manifest".into(),
        })?;
        let dir = DatasetDir {
            root: root.to_path_buf(),
            split: DatasetSplit::from_manifest(&text)?,
        };
        for which in [Subset::Train, Subset::Validation, Subset::Test] {
            for id in dir.split.subset(which) {
                for (path, what) in [(dir.image_path(id), "image"), (dir.mask_path(id), "mask")] {
                    if !path.is_file() {
                        return Err(CliError::MissingPath {
                            path,
                            what: format!("{what} of `{id}`"),
                        });
                    }
                }
            }
        }
        Ok(dir)
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join("images").join(format!("{id}.png"))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }

    pub fn load(&self, which: Subset, palette: &ClassPalette) -> CliResult<Vec<Item>> {
        self.split
            .subset(which)
            .iter()
            .map(|id| {
                let image = load_gray(self.image_path(id))?;
                let mask = load_mask(self.mask_path(id), palette)?;
                Ok((id.clone(), image, mask))
            })
            .collect()
    }
}

pub fn write_dataset<'a>(
    root: &Path,
    split: &DatasetSplit,
    items: impl IntoIterator<Item = (&'a str, &'a GrayImage, &'a LabelMask)>,
    palette: &ClassPalette,
) -> CliResult<()> {
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    for (id, image, mask) in items {
        save_gray(root.join("images").join(format!("{id}.png")), image)?;
        save_mask(root.join("masks").join(format!("{id}.png")), mask, palette)?;
    }
    let manifest = root.join(SPLIT_FILE);
    std::fs::write(&manifest, split.to_manifest()).map_err(|e| CliError::io(&manifest, e))
}

/// Brings an image to the network stride `multiple` according to `fit`.
/// `Fit::None` on a non-conforming extent is a configuration contradiction.
pub fn fit_image(id: &str, image: &GrayImage, fit: Fit, multiple: usize) -> CliResult<(GrayImage, Placement)> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if fit == Fit::None && (w % multiple != 0 || h % multiple != 0) {
        return Err(CliError::Contradiction(format!(
            "`{id}` is {w} x {h}, not a multiple of {multiple}; set data.fit = pad or crop"
        )));
    }
    Ok(wearseg::dataio::fit_gray(image, fit))
}

/// Applies the placement of a fitted image to its mask. Padding replicates
/// edge labels just like edge pixels.
pub fn fit_mask(mask: &LabelMask, place: &Placement) -> CliResult<LabelMask> {
    if place.padded {
        let (w, h) = (mask.width() as isize, mask.height() as isize);
        let classes = (0..place.height)
            .flat_map(|y| (0..place.width).map(move |x| (x, y)))
            .map(|(x, y)| {
                let sx = (x as isize - place.offset_x as isize).clamp(0, w - 1) as usize;
                let sy = (y as isize - place.offset_y as isize).clamp(0, h - 1) as usize;
                mask.get(sx, sy)
            })
            .collect();
        Ok(LabelMask::new(place.width, place.height, classes)?)
    } else if (place.width, place.height) == (mask.width(), mask.height()) {
        Ok(mask.clone())
    } else {
        Ok(mask.crop(place.offset_x, place.offset_y, place.width, place.height)?)
    }
}

pub fn to_examples(items: Vec<Item>, fit: Fit, multiple: usize) -> CliResult<Vec<Example>> {
    items
        .into_iter()
        .map(|(id, image, mask)| {
            let (img, place) = fit_image(&id, &image, fit, multiple)?;
            Ok(Example::new(img, fit_mask(&mask, &place)?)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use wearseg::dataio::WearClass;

    #[test]
    fn padded_mask_matches_padded_image_geometry() {
        let image = GrayImage::from_fn(5, 3, |x, _| image::Luma([x as u8]));
        let mut classes = vec![0u8; 15];
        classes[4] = 5;
        let mask = LabelMask::new(5, 3, classes).unwrap();
        let (img, place) = fit_image("a", &image, Fit::Pad(4), 4).unwrap();
        let m = fit_mask(&mask, &place).unwrap();
        assert_eq!((m.width(), m.height()), (img.width() as usize, img.height() as usize));
        assert_eq!(place.restore_mask(&m).unwrap(), mask);
        assert_eq!(m.count(WearClass::AdhesiveWear), 3);
    }

    #[test]
    fn unfitted_odd_extent_is_rejected() {
        let image = GrayImage::new(20, 16);
        let err = fit_image("odd", &image, Fit::None, 16).unwrap_err();
        assert_eq!(err.category(), "config");
        let (img, place) = fit_image("odd", &image, Fit::Crop(16), 16).unwrap();
        assert_eq!(img.width(), 16);
        let m = fit_mask(&LabelMask::filled(20, 16, WearClass::Unworn), &place).unwrap();
        assert_eq!(m.width(), 16);
    }
}
