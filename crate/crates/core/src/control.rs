//! Control maps, the native Canny extractor, and extractor dispatch.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backends::ControlExtractorBackend;
use crate::error::{BackendError, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlType {
    Seg,
    Canny,
    Hed,
    Lineart,
    Depth,
}

impl ControlType {
    pub const ALL: [ControlType; 5] =
        [ControlType::Seg, ControlType::Canny, ControlType::Hed, ControlType::Lineart, ControlType::Depth];

    pub fn name(self) -> &'static str {
        match self {
            ControlType::Seg => "SEG",
            ControlType::Canny => "CANNY",
            ControlType::Hed => "HED",
            ControlType::Lineart => "LINEART",
            ControlType::Depth => "DEPTH",
        }
    }

    /// Human-readable description used in oracle prompts.
    pub fn describe(self) -> &'static str {
        match self {
            ControlType::Seg => "segmentation mask",
            ControlType::Canny => "canny edge map",
            ControlType::Hed => "HED boundary map",
            ControlType::Lineart => "lineart drawing",
            ControlType::Depth => "depth map",
        }
    }
}

impl fmt::Display for ControlType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControlType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControlType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown control type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Values in {0, 1}.
    Binary(Vec<u8>),
    Gray(Vec<u8>),
    Labels {
        data: Vec<u32>,
        class_count: u32,
    },
}

/// A typed raster tagged with its control type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMap {
    control_type: ControlType,
    width: u32,
    height: u32,
    payload: Payload,
}

impl ControlMap {
    pub fn new(control_type: ControlType, width: u32, height: u32, payload: Payload) -> Result<Self> {
        let n = width as usize * height as usize;
        let len = match &payload {
            Payload::Binary(d) | Payload::Gray(d) => d.len(),
            Payload::Labels { data, .. } => data.len(),
        };
        if len != n {
            return Err(Error::invalid(format!("payload has {len} values, expected {width}x{height}")));
        }
        match &payload {
            Payload::Binary(d) if d.iter().any(|&v| v > 1) => {
                return Err(Error::invalid("binary payload contains values other than 0/1"));
            }
            Payload::Labels { data, class_count } => {
                if let Some(bad) = data.iter().find(|&&l| l >= *class_count) {
                    return Err(Error::invalid(format!("label {bad} outside declared class count {class_count}")));
                }
            }
            _ => {}
        }
        let compatible = matches!(
            (control_type, &payload),
            (ControlType::Canny, Payload::Binary(_))
                | (ControlType::Hed | ControlType::Lineart, Payload::Binary(_) | Payload::Gray(_))
                | (ControlType::Depth, Payload::Gray(_))
                | (ControlType::Seg, Payload::Labels { .. })
        );
        if !compatible {
            return Err(Error::invalid(format!("{control_type} map cannot carry a {} payload", payload_kind(&payload))));
        }
        Ok(ControlMap { control_type, width, height, payload })
    }

    pub fn control_type(&self) -> ControlType {
        self.control_type
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.payload, Payload::Binary(_))
    }

    /// Renders the map as an 8-bit RGB image (binary as {0,255}, labels spread
    /// over the 8-bit range).
    pub fn to_rgb(&self) -> RgbImage {
        let gray = self.to_gray();
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let v = gray.get_pixel(x, y)[0];
            image::Rgb([v, v, v])
        })
    }

    pub fn to_gray(&self) -> GrayImage {
        let values: Vec<u8> = match &self.payload {
            Payload::Binary(d) => d.iter().map(|&v| v * 255).collect(),
            Payload::Gray(d) => d.clone(),
            Payload::Labels { data, class_count } => {
                let span = (*class_count).saturating_sub(1).max(1) as u64;
                data.iter().map(|&l| (l as u64 * 255 / span).min(255) as u8).collect()
            }
        };
        GrayImage::from_raw(self.width, self.height, values).expect("dimensions checked on construction")
    }

    /// Writes an 8-bit PNG; binary maps as {0,255}, label maps as raw labels
    /// (16-bit when more than 256 classes).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let res = match &self.payload {
            Payload::Labels { data, class_count } if *class_count > 256 => {
                let raw: Vec<u16> = data.iter().map(|&l| l as u16).collect();
                ImageBuffer::<Luma<u16>, _>::from_raw(self.width, self.height, raw).expect("dimensions checked").save(path)
            }
            Payload::Labels { data, .. } => {
                let raw: Vec<u8> = data.iter().map(|&l| l as u8).collect();
                GrayImage::from_raw(self.width, self.height, raw).expect("dimensions checked").save(path)
            }
            _ => self.to_gray().save(path),
        };
        res.map_err(|e| Error::Image { path: path.to_owned(), message: e.to_string() })
    }

    /// Loads a control map PNG. `class_count` is required for SEG maps.
    pub fn load_png(path: &Path, control_type: ControlType, class_count: Option<u32>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_owned(), message: e.to_string() })?;
        let (w, h) = (img.width(), img.height());
        match control_type {
            ControlType::Seg => {
                let raw: Vec<u32> = img.to_luma16().into_raw().into_iter().map(u32::from).collect();
                // 8-bit sources are widened by image as v * 257
                let data: Vec<u32> = if img.color().bits_per_pixel() <= 8 * img.color().channel_count() as u16 {
                    raw.into_iter().map(|v| v / 257).collect()
                } else {
                    raw
                };
                let class_count = class_count.unwrap_or_else(|| data.iter().copied().max().map_or(1, |m| m + 1));
                ControlMap::new(control_type, w, h, Payload::Labels { data, class_count })
            }
            ControlType::Depth => ControlMap::new(control_type, w, h, Payload::Gray(img.to_luma8().into_raw())),
            _ => threshold_gray(&img.to_luma8(), 128, control_type),
        }
    }
}

fn payload_kind(p: &Payload) -> &'static str {
    match p {
        Payload::Binary(_) => "binary",
        Payload::Gray(_) => "grayscale",
        Payload::Labels { .. } => "label",
    }
}

/// ITU-R 601 luma, rounded.
pub fn luma(image: &RgbImage) -> GrayImage {
    GrayImage::from_fn(image.width(), image.height(), |x, y| {
        let [r, g, b] = image.get_pixel(x, y).0;
        let y = (299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000;
        Luma([y as u8])
    })
}

/// Pixels at or above `threshold` become 1. Only edge-like types (CANNY,
/// HED, LINEART) can carry a binary payload.
pub fn binarize(map: &ControlMap, threshold: u8) -> Result<ControlMap> {
    let values: Vec<u8> = match &map.payload {
        Payload::Gray(d) | Payload::Binary(d) => d.iter().map(|&v| u8::from(v >= threshold)).collect(),
        Payload::Labels { .. } => return Err(Error::invalid("cannot binarize a label map")),
    };
    ControlMap::new(map.control_type, map.width, map.height, Payload::Binary(values))
}

/// Thresholds an 8-bit raster straight into a binary map of `control_type`.
pub(crate) fn threshold_gray(gray: &GrayImage, threshold: u8, control_type: ControlType) -> Result<ControlMap> {
    let values = gray.as_raw().iter().map(|&v| u8::from(v >= threshold)).collect();
    ControlMap::new(control_type, gray.width(), gray.height(), Payload::Binary(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannyParams {
    pub gaussian_sigma: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { gaussian_sigma: 1.4, low_threshold: 100.0, high_threshold: 200.0 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::invalid("canny sigma must be positive"));
        }
        if !(0.0..=255.0).contains(&self.low_threshold) || !(0.0..=255.0).contains(&self.high_threshold) {
            return Err(Error::invalid("canny thresholds must lie in [0, 255]"));
        }
        if self.low_threshold >= self.high_threshold {
            return Err(Error::invalid("canny low threshold must be below the high threshold"));
        }
        Ok(())
    }
}

/// Fixed-point Gaussian taps. Integer arithmetic keeps the pipeline exactly
/// symmetric under intensity inversion.
fn gaussian_taps(sigma: f64) -> Vec<i64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    (-radius..=radius)
        .map(|k| {
            let w = (-(k * k) as f64 / (2.0 * sigma * sigma)).exp();
            (w * 1024.0).round().max(1.0) as i64
        })
        .collect()
}

/// Canny edge detector: Gaussian smoothing, 3x3 Sobel gradients, non-maximum
/// suppression over four direction bins, and 8-connected double-threshold
/// hysteresis. Thresholds are in gradient-magnitude units of the 8-bit input.
pub fn canny_extract(image: &GrayImage, params: &CannyParams) -> Result<ControlMap> {
    params.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::invalid("canny input has a zero dimension"));
    }
    let taps = gaussian_taps(params.gaussian_sigma);
    let radius = (taps.len() / 2) as i64;
    let scale: i64 = taps.iter().sum::<i64>().pow(2);
    let src = image.as_raw();
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

    let mut horiz = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            horiz[y * w + x] =
                taps.iter().enumerate().map(|(k, t)| t * src[y * w + clamp(x as i64 + k as i64 - radius, w)] as i64).sum();
        }
    }
    let mut blurred = vec![0i64; w * h];
    for y in 0..h {
        for x in 0..w {
            blurred[y * w + x] =
                taps.iter().enumerate().map(|(k, t)| t * horiz[clamp(y as i64 + k as i64 - radius, h) * w + x]).sum();
        }
    }

    let at = |x: i64, y: i64| blurred[clamp(y, h) * w + clamp(x, w)] as i128;
    let mut gx = vec![0i128; w * h];
    let mut gy = vec![0i128; w * h];
    let mut mag2 = vec![0i128; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let dx = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
            let dy = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag2[i] = dx * dx + dy * dy;
        }
    }

    let mag_at = |x: i64, y: i64| -> i128 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0
        } else {
            mag2[y as usize * w + x as usize]
        }
    };
    let mut suppressed = vec![0i128; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let m = mag2[i];
            if m == 0 {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            // tan(22.5deg) ~ 0.41421, tan(67.5deg) ~ 2.41421
            let (dx, dy) = if ay * 100_000 <= ax * 41_421 {
                (1, 0)
            } else if ay * 100_000 >= ax * 241_421 {
                (0, 1)
            } else if (gx[i] > 0) == (gy[i] > 0) {
                (1, 1)
            } else {
                (1, -1)
            };
            if m > mag_at(x + dx, y + dy) && m >= mag_at(x - dx, y - dy) {
                suppressed[i] = m;
            }
        }
    }

    let threshold2 = |t: f64| -> i128 {
        let s = t * scale as f64;
        (s * s).ceil() as i128
    };
    let (low2, high2) = (threshold2(params.low_threshold), threshold2(params.high_threshold));
    let mut edges = vec![0u8; w * h];
    let mut queue = VecDeque::new();
    for (i, &m) in suppressed.iter().enumerate() {
        if m > 0 && m >= high2 {
            edges[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges[j] == 0 && suppressed[j] > 0 && suppressed[j] >= low2 {
                    edges[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }

    ControlMap::new(ControlType::Canny, w as u32, h as u32, Payload::Binary(edges))
}

/// Routes extraction by control type: CANNY may use the native detector, all
/// other types need a registered backend.
#[derive(Clone, Default)]
pub struct ExtractorRegistry {
    native_canny: Option<CannyParams>,
    backends: BTreeMap<ControlType, Arc<dyn ControlExtractorBackend>>,
}

impl ExtractorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_native_canny(mut self, params: CannyParams) -> Self {
        self.native_canny = Some(params);
        self
    }

    pub fn register(mut self, control_type: ControlType, backend: Arc<dyn ControlExtractorBackend>) -> Self {
        self.backends.insert(control_type, backend);
        self
    }

    pub fn supports(&self, control_type: ControlType) -> bool {
        self.backends.contains_key(&control_type) || (control_type == ControlType::Canny && self.native_canny.is_some())
    }

    pub fn extract(&self, control_type: ControlType, image: &RgbImage) -> Result<ControlMap> {
        let map = if let Some(backend) = self.backends.get(&control_type) {
            backend.extract(image, control_type)?
        } else if let (ControlType::Canny, Some(params)) = (control_type, &self.native_canny) {
            canny_extract(&luma(image), params)?
        } else {
            return Err(Error::Config(format!("no extractor registered for {control_type}")));
        };
        if map.control_type() != control_type || map.dimensions() != image.dimensions() {
            return Err(BackendError::malformed(format!(
                "extractor returned a {} map of {:?} for a {control_type} request on {:?}",
                map.control_type(),
                map.dimensions(),
                image.dimensions()
            ))
            .into());
        }
        Ok(map)
    }
}

impl ControlExtractorBackend for ExtractorRegistry {
    fn extract(&self, image: &RgbImage, control_type: ControlType) -> Result<ControlMap, BackendError> {
        ExtractorRegistry::extract(self, control_type, image).map_err(|e| match e {
            Error::Backend(b) => b,
            other => BackendError::malformed(other.to_string()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_image(w: u32, h: u32, col: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, _| Luma([if x < col { 0 } else { 255 }]))
    }

    fn edge_columns(map: &ControlMap) -> Vec<u32> {
        let Payload::Binary(d) = map.payload() else { panic!("not binary") };
        let mut cols: Vec<u32> =
            (0..map.width()).filter(|&x| (0..map.height()).any(|y| d[(y * map.width() + x) as usize] == 1)).collect();
        cols.dedup();
        cols
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = GrayImage::from_pixel(32, 32, Luma([77]));
        let map = canny_extract(&img, &CannyParams::default()).unwrap();
        assert!(edge_columns(&map).is_empty());
    }

    #[test]
    fn step_edge_found_at_boundary() {
        let map = canny_extract(&step_image(64, 64, 32), &CannyParams::default()).unwrap();
        let cols = edge_columns(&map);
        assert!(!cols.is_empty());
        assert!(cols.iter().all(|&c| (31..=32).contains(&c)), "{cols:?}");
    }

    #[test]
    fn zero_dimension_rejected() {
        let img = GrayImage::new(0, 4);
        assert!(canny_extract(&img, &CannyParams::default()).is_err());
        let bad = CannyParams { low_threshold: 200.0, high_threshold: 100.0, ..Default::default() };
        assert!(canny_extract(&step_image(8, 8, 4), &bad).is_err());
    }

    #[test]
    fn binarize_boundaries() {
        let zeros = ControlMap::new(ControlType::Hed, 4, 4, Payload::Gray(vec![0; 16])).unwrap();
        let full = ControlMap::new(ControlType::Lineart, 4, 4, Payload::Gray(vec![255; 16])).unwrap();
        assert_eq!(binarize(&zeros, 1).unwrap().payload(), &Payload::Binary(vec![0; 16]));
        assert_eq!(binarize(&full, 128).unwrap().payload(), &Payload::Binary(vec![1; 16]));
        assert_eq!(binarize(&zeros, 0).unwrap().payload(), &Payload::Binary(vec![1; 16]));
    }

    #[test]
    fn payload_validation() {
        assert!(ControlMap::new(ControlType::Canny, 2, 2, Payload::Binary(vec![0, 1, 2, 0])).is_err());
        assert!(ControlMap::new(ControlType::Canny, 2, 2, Payload::Binary(vec![0; 3])).is_err());
        assert!(ControlMap::new(ControlType::Seg, 2, 1, Payload::Labels { data: vec![0, 3], class_count: 3 }).is_err());
        assert!(ControlMap::new(ControlType::Depth, 2, 1, Payload::Binary(vec![0, 1])).is_err());
    }

    #[test]
    fn dispatch_and_missing_backend() {
        let img = RgbImage::from_fn(16, 16, |x, _| if x < 8 { image::Rgb([0; 3]) } else { image::Rgb([255; 3]) });
        let reg = ExtractorRegistry::new().with_native_canny(CannyParams::default());
        let via = reg.extract(ControlType::Canny, &img).unwrap();
        let direct = canny_extract(&luma(&img), &CannyParams::default()).unwrap();
        assert_eq!(via, direct);
        assert!(matches!(reg.extract(ControlType::Depth, &img), Err(Error::Config(_))));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seg = ControlMap::new(ControlType::Seg, 3, 1, Payload::Labels { data: vec![0, 4, 2], class_count: 5 }).unwrap();
        let p = dir.path().join("seg.png");
        seg.save_png(&p).unwrap();
        assert_eq!(ControlMap::load_png(&p, ControlType::Seg, Some(5)).unwrap(), seg);
        let edge = ControlMap::new(ControlType::Canny, 2, 2, Payload::Binary(vec![0, 1, 1, 0])).unwrap();
        let p = dir.path().join("edge.png");
        edge.save_png(&p).unwrap();
        assert_eq!(ControlMap::load_png(&p, ControlType::Canny, None).unwrap(), edge);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn canny_is_binary_and_inversion_invariant(
            w in 3u32..20, h in 3u32..20, seed in any::<u64>()
        ) {
            let img = GrayImage::from_fn(w, h, |x, y| {
                let v = seed.wrapping_mul(6364136223846793005).wrapping_add((x * 31 + y * 17) as u64);
                Luma([(v >> 33) as u8])
            });
            let inv = GrayImage::from_fn(w, h, |x, y| Luma([255 - img.get_pixel(x, y)[0]]));
            let a = canny_extract(&img, &CannyParams::default()).unwrap();
            let b = canny_extract(&inv, &CannyParams::default()).unwrap();
            prop_assert_eq!(a.dimensions(), (w, h));
            prop_assert!(a.is_binary());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn binarize_idempotent_on_binary(bits in proptest::collection::vec(0u8..2, 16)) {
            let m = ControlMap::new(ControlType::Canny, 4, 4, Payload::Binary(bits)).unwrap();
            prop_assert_eq!(binarize(&m, 1).unwrap(), m);
        }
    }
}
