//! Square chip extraction around bounding-box annotations.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use ufl_autodiff::{Real, Tensor};

use crate::error::{Error, Result};
use crate::ClassId;

/// One labeled axis-aligned box, pixel coordinates, half-open on the max side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    /// `[x_min, y_min, x_max, y_max]`
    pub bbox: [i64; 4],
    pub class_id: ClassId,
}

impl Annotation {
    pub fn width(&self) -> i64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> i64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn is_valid(&self) -> bool {
        self.width() > 0 && self.height() > 0
    }

    /// Square window centred on the box with side equal to its longest
    /// dimension: `[x0, y0, x0 + side, y0 + side)`.
    ///
    /// The origin is `round(centre − side/2)` with halves rounding up.
    pub fn chip_window(&self) -> ChipWindow {
        let side = self.width().max(self.height());
        let origin = |lo: i64, hi: i64| (lo + hi - side + 1).div_euclid(2);
        ChipWindow {
            x0: origin(self.bbox[0], self.bbox[2]),
            y0: origin(self.bbox[1], self.bbox[3]),
            side,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChipWindow {
    pub x0: i64,
    pub y0: i64,
    pub side: i64,
}

impl ChipWindow {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x0 >= 0
            && self.y0 >= 0
            && self.x0 + self.side <= width as i64
            && self.y0 + self.side <= height as i64
    }
}

/// Where a chip was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipSource {
    pub image: String,
    pub bbox: [i64; 4],
}

/// Square 8-bit RGB crop, stored row-major as `side × side × 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chip {
    side: usize,
    pixels: Vec<u8>,
    pub class_id: ClassId,
    pub source: Option<ChipSource>,
}

impl Chip {
    pub fn new(side: usize, pixels: Vec<u8>, class_id: ClassId) -> Result<Self> {
        if side == 0 || pixels.len() != side * side * 3 {
            return Err(Error::Invalid(format!(
                "chip of side {side} needs {} bytes, got {}",
                side * side * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            side,
            pixels,
            class_id,
            source: None,
        })
    }

    pub fn with_source(mut self, source: ChipSource) -> Self {
        self.source = Some(source);
        self
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.side + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_raw(self.side as u32, self.side as u32, self.pixels.clone())
            .expect("chip buffer matches its side")
    }

    pub fn from_image(img: &RgbImage, class_id: ClassId) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::Invalid(format!(
                "chip image is {}x{}, not square",
                img.width(),
                img.height()
            )));
        }
        Chip::new(img.width() as usize, img.as_raw().clone(), class_id)
    }

    /// Bilinear resample to `side × side`; a chip already at that side is cloned.
    pub fn resized(&self, side: usize) -> Chip {
        if side == self.side {
            return self.clone();
        }
        let img = image::imageops::resize(
            &self.to_image(),
            side as u32,
            side as u32,
            image::imageops::FilterType::Triangle,
        );
        Chip {
            side,
            pixels: img.into_raw(),
            class_id: self.class_id,
            source: self.source.clone(),
        }
    }
}

/// Packs chips into a `[batch, 3, side, side]` tensor scaled to `[0, 1]`,
/// resampling any chip whose side differs.
pub fn chips_to_tensor<'a>(
    chips: impl IntoIterator<Item = &'a Chip>,
    side: usize,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut batch = 0;
    let plane = side * side;
    for chip in chips {
        let resized;
        let chip = if chip.side() == side {
            chip
        } else {
            resized = chip.resized(side);
            &resized
        };
        let start = data.len();
        data.resize(start + 3 * plane, 0.0);
        for (p, rgb) in chip.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[start + c * plane + p] = rgb[c] as Real / 255.0;
            }
        }
        batch += 1;
    }
    Ok(Tensor::new(vec![batch, 3, side, side], data)?)
}

/// Why an annotation produced no chip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum DiscardReason {
    DegenerateBox,
    CrossesBoundary {
        window: [i64; 4],
        image_size: [u32; 2],
    },
    UnreadableImage(String),
}

impl std::fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DiscardReason::DegenerateBox => write!(f, "degenerate box"),
            DiscardReason::CrossesBoundary { window, image_size } => write!(
                f,
                "chip window {window:?} crosses the {}x{} image boundary",
                image_size[0], image_size[1]
            ),
            DiscardReason::UnreadableImage(e) => write!(f, "unreadable image: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Discard {
    pub annotation: usize,
    pub reason: DiscardReason,
}

/// Output of [`extract_chips`]: every input annotation index appears exactly
/// once, either in `kept` or in `discarded`.
#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub chips: Vec<Chip>,
    /// Annotation index for each entry of `chips`.
    pub kept: Vec<usize>,
    pub discarded: Vec<Discard>,
}

/// Source of decoded images keyed by the annotation's `image` field.
pub trait ImageSource {
    fn load(&self, image: &str) -> std::result::Result<RgbImage, String>;
}

/// Images read from disk, relative paths resolved against `root`.
#[derive(Debug, Clone)]
pub struct DiskImages {
    pub root: PathBuf,
}

impl DiskImages {
    pub fn new(root: impl AsRef<Path>) -> Self {
        Self {
            root: root.as_ref().to_path_buf(),
        }
    }
}

impl ImageSource for DiskImages {
    fn load(&self, image: &str) -> std::result::Result<RgbImage, String> {
        let path = self.root.join(image);
        image::open(&path)
            .map(|img| img.to_rgb8())
            .map_err(|e| e.to_string())
    }
}

impl ImageSource for HashMap<String, RgbImage> {
    fn load(&self, image: &str) -> std::result::Result<RgbImage, String> {
        self.get(image)
            .cloned()
            .ok_or_else(|| format!("no image named {image}"))
    }
}

/// Cuts a square chip for every annotation whose window lies fully inside
/// its image. Each image is decoded once; failures are logged per
/// annotation and processing continues.
pub fn extract_chips(annotations: &[Annotation], images: &dyn ImageSource) -> Extraction {
    let mut by_image: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, a) in annotations.iter().enumerate() {
        let s = *slot.entry(a.image.as_str()).or_insert_with(|| {
            by_image.push((a.image.as_str(), Vec::new()));
            by_image.len() - 1
        });
        by_image[s].1.push(i);
    }

    let mut out = Extraction::default();
    for (name, members) in by_image {
        let img = match images.load(name) {
            Ok(img) => img,
            Err(e) => {
                for &i in &members {
                    out.discarded.push(Discard {
                        annotation: i,
                        reason: DiscardReason::UnreadableImage(e.clone()),
                    });
                }
                continue;
            }
        };
        for i in members {
            let a = &annotations[i];
            if !a.is_valid() {
                out.discarded.push(Discard {
                    annotation: i,
                    reason: DiscardReason::DegenerateBox,
                });
                continue;
            }
            let w = a.chip_window();
            if !w.fits(img.width(), img.height()) {
                out.discarded.push(Discard {
                    annotation: i,
                    reason: DiscardReason::CrossesBoundary {
                        window: [w.x0, w.y0, w.x0 + w.side, w.y0 + w.side],
                        image_size: [img.width(), img.height()],
                    },
                });
                continue;
            }
            let crop = image::imageops::crop_imm(
                &img,
                w.x0 as u32,
                w.y0 as u32,
                w.side as u32,
                w.side as u32,
            )
            .to_image();
            let chip = Chip::from_image(&crop, a.class_id)
                .expect("square crop")
                .with_source(ChipSource {
                    image: a.image.clone(),
                    bbox: a.bbox,
                });
            out.chips.push(chip);
            out.kept.push(i);
        }
    }
    out
}
