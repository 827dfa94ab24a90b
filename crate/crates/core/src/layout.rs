//! Semantic layouts, class masks and reference images.
//!
//! A layout is a `c`-channel tensor holding a per-pixel distribution over
//! semantic classes. At source resolution every pixel is one-hot; block-average
//! downsampling produces soft pixels but keeps every pixel a partition of
//! unity, which the class-masked diversity loss relies on. Class 0 is the
//! void label and gets no special treatment.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CrnError, Result};
use crate::tensor::{FeatureTensor, Shape};

/// Tolerance for the per-pixel partition of unity.
pub const PARTITION_TOLERANCE: f64 = 1e-6;

/// Integer class index per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CrnError::Dimension("label grid must be non-empty".into()));
        }
        if labels.len() != height * width {
            return Err(CrnError::Dimension(format!(
                "{} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        Ok(LabelGrid {
            height,
            width,
            labels,
        })
    }

    pub fn from_rows(rows: &[&[usize]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(CrnError::Dimension("ragged label rows".into()));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }
}

/// Raw dataset id to training class id. Ids without an entry map to void.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RemapTable {
    entries: BTreeMap<String, usize>,
}

impl RemapTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, usize)>) -> Self {
        RemapTable {
            entries: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CrnError::io(path, e))?;
        let table: RemapTable = serde_json::from_str(&text).map_err(|e| CrnError::json(path, e))?;
        for key in table.entries.keys() {
            key.parse::<u8>().map_err(|_| {
                CrnError::Schema(format!("remap key {key:?} in {} is not an 8-bit id", path.display()))
            })?;
        }
        Ok(table)
    }

    /// Cityscapes `labelIds` to the 19 evaluation classes, shifted by one so
    /// that class 0 stays void.
    pub fn cityscapes() -> Self {
        const LABEL_IDS: [u8; 19] = [7, 8, 11, 12, 13, 17, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 31, 32, 33];
        Self::from_pairs(LABEL_IDS.iter().enumerate().map(|(i, &raw)| (raw, i + 1)))
    }

    pub fn lookup(&self, raw: u8) -> Option<usize> {
        self.entries.get(&raw.to_string()).copied()
    }

    /// Number of layout channels the table produces, void included.
    pub fn num_classes(&self) -> usize {
        self.entries.values().copied().max().map_or(1, |m| m + 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How raw label ids become class indices.
#[derive(Debug, Clone, Copy)]
pub enum LabelMapping<'a> {
    /// Raw ids are class indices.
    Identity,
    /// Table lookup; ids missing from the table become void, or are
    /// rejected when `strict`.
    Remap { table: &'a RemapTable, strict: bool },
}

/// Reads an 8-bit single-channel (grayscale or palette-indexed) label image.
pub fn load_label_map(path: &Path, mapping: LabelMapping<'_>) -> Result<LabelGrid> {
    let decode_err = |detail: String| CrnError::Decode {
        path: path.to_path_buf(),
        detail,
    };
    let file = File::open(path).map_err(|e| CrnError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed)
    {
        return Err(decode_err(format!(
            "label maps must be 8-bit single-channel, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut raw = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        raw.extend_from_slice(&row[..w]);
    }
    labels_from_raw(h, w, &raw, mapping)
}

/// Applies a [`LabelMapping`] to raw ids laid out row-major.
pub fn labels_from_raw(height: usize, width: usize, raw: &[u8], mapping: LabelMapping<'_>) -> Result<LabelGrid> {
    let labels = raw
        .iter()
        .map(|&id| match mapping {
            LabelMapping::Identity => Ok(id as usize),
            LabelMapping::Remap { table, strict } => match table.lookup(id) {
                Some(class) => Ok(class),
                None if strict => Err(CrnError::UnmappedLabel(id)),
                None => Ok(0),
            },
        })
        .collect::<Result<Vec<_>>>()?;
    LabelGrid::new(height, width, labels)
}

/// Writes a label grid as an 8-bit grayscale PNG.
pub fn save_label_map(grid: &LabelGrid, path: &Path) -> Result<()> {
    let raw = grid
        .labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| CrnError::LabelBounds {
                label: l,
                classes: 256,
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    let img = image::GrayImage::from_raw(grid.width as u32, grid.height as u32, raw)
        .expect("buffer sized from grid");
    img.save(path).map_err(|e| CrnError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Per-pixel class distribution, `c` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLayout {
    tensor: FeatureTensor,
}

impl SemanticLayout {
    /// Wraps a tensor after checking the per-pixel partition of unity.
    pub fn new(tensor: FeatureTensor) -> Result<Self> {
        check_partition(&tensor, PARTITION_TOLERANCE)?;
        Ok(SemanticLayout { tensor })
    }

    pub fn tensor(&self) -> &FeatureTensor {
        &self.tensor
    }

    pub fn num_classes(&self) -> usize {
        self.tensor.channels()
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }

    /// Most probable class per pixel, lowest index on ties.
    pub fn argmax(&self) -> LabelGrid {
        let (h, w, c) = (self.height(), self.width(), self.num_classes());
        let mut labels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for p in 1..c {
                    if self.tensor.get(p, y, x) > self.tensor.get(best, y, x) {
                        best = p;
                    }
                }
                labels.push(best);
            }
        }
        LabelGrid::new(h, w, labels).expect("layout dimensions are positive")
    }

    /// Channel `p` as a single-channel mask.
    pub fn class_mask(&self, class: usize) -> Result<ClassMask> {
        Ok(ClassMask {
            class,
            values: self.tensor.slice_channels(class, 1)?,
        })
    }
}

/// Verifies that channels sum to one at every pixel.
pub fn check_partition(tensor: &FeatureTensor, tolerance: f64) -> Result<()> {
    let plane = tensor.shape().plane();
    if plane == 0 || tensor.channels() == 0 {
        return Err(CrnError::Dimension("layout must be non-empty".into()));
    }
    for i in 0..plane {
        let mut sum = 0.0;
        for c in 0..tensor.channels() {
            let v = tensor.channel(c)[i];
            if !(0.0..=1.0 + tolerance).contains(&v) {
                return Err(CrnError::Invariant(format!(
                    "class probability {v} outside [0, 1] at pixel {i}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > tolerance {
            return Err(CrnError::Invariant(format!(
                "class probabilities sum to {sum} at pixel {i}"
            )));
        }
    }
    Ok(())
}

pub fn one_hot(grid: &LabelGrid, num_classes: usize) -> Result<SemanticLayout> {
    if let Some(&label) = grid.labels.iter().find(|&&l| l >= num_classes) {
        return Err(CrnError::LabelBounds {
            label,
            classes: num_classes,
        });
    }
    let shape = Shape::new(num_classes, grid.height, grid.width);
    let mut tensor = FeatureTensor::zeros(shape);
    let plane = shape.plane();
    for (i, &label) in grid.labels.iter().enumerate() {
        tensor.data_mut()[label * plane + i] = 1.0;
    }
    Ok(SemanticLayout { tensor })
}

/// Mean over non-overlapping blocks; source dims must be integer multiples of the target.
pub fn block_average(src: &FeatureTensor, target_h: usize, target_w: usize) -> Result<FeatureTensor> {
    if target_h == 0
        || target_w == 0
        || src.height() % target_h != 0
        || src.width() % target_w != 0
    {
        return Err(CrnError::Dimension(format!(
            "{}x{} is not an integer multiple of {target_h}x{target_w}",
            src.height(),
            src.width()
        )));
    }
    let (fy, fx) = (src.height() / target_h, src.width() / target_w);
    if fy == 1 && fx == 1 {
        return Ok(src.clone());
    }
    let inv = 1.0 / (fy * fx) as f64;
    let mut out = FeatureTensor::zeros(Shape::new(src.channels(), target_h, target_w));
    for c in 0..src.channels() {
        let s = src.channel(c);
        let d = out.channel_mut(c);
        for y in 0..src.height() {
            let row = &s[y * src.width()..(y + 1) * src.width()];
            let drow = &mut d[(y / fy) * target_w..(y / fy + 1) * target_w];
            for (x, &v) in row.iter().enumerate() {
                drow[x / fx] += v;
            }
        }
        for v in d.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

pub fn downsample_layout(layout: &SemanticLayout, target_h: usize, target_w: usize) -> Result<SemanticLayout> {
    let tensor = block_average(&layout.tensor, target_h, target_w)?;
    Ok(SemanticLayout { tensor })
}

/// One class channel of a layout at some resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMask {
    pub class: usize,
    pub values: FeatureTensor,
}

/// Class masks of one layout at several resolutions.
///
/// Level `l` holds all `c` masks at the `l`-th requested resolution, stored as
/// a `c`-channel tensor whose channel `p` is the mask for class `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMasks {
    levels: Vec<SemanticLayout>,
}

impl ClassMasks {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.levels.first().map_or(0, |l| l.num_classes())
    }

    pub fn level(&self, l: usize) -> &FeatureTensor {
        self.levels[l].tensor()
    }

    pub fn mask(&self, class: usize, level: usize) -> ClassMask {
        self.levels[level]
            .class_mask(class)
            .expect("class index within layout channels")
    }

    /// Builds masks from explicit per-level tensors, checking the partition
    /// of unity at `tolerance`.
    pub fn from_levels(levels: Vec<FeatureTensor>, tolerance: f64) -> Result<Self> {
        let c = levels.first().map(|t| t.channels()).unwrap_or(0);
        let mut out = Vec::with_capacity(levels.len());
        for t in levels {
            if t.channels() != c {
                return Err(CrnError::Dimension("mask levels disagree on class count".into()));
            }
            check_partition(&t, tolerance)?;
            out.push(SemanticLayout { tensor: t });
        }
        Ok(ClassMasks { levels: out })
    }
}

/// Class masks at each `(height, width)` in `resolutions`.
pub fn class_masks(layout: &SemanticLayout, resolutions: &[(usize, usize)]) -> Result<ClassMasks> {
    let levels = resolutions
        .iter()
        .map(|&(h, w)| downsample_layout(layout, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassMasks { levels })
}

/// RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    tensor: FeatureTensor,
}

impl ReferenceImage {
    pub fn new(tensor: FeatureTensor) -> Result<Self> {
        if tensor.channels() != 3 {
            return Err(CrnError::Dimension(format!(
                "reference image needs 3 channels, got {}",
                tensor.channels()
            )));
        }
        if !tensor.is_finite() {
            return Err(CrnError::Invariant("reference image has non-finite values".into()));
        }
        Ok(ReferenceImage { tensor })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| CrnError::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let rgb = img.into_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.into_raw();
        let tensor = FeatureTensor::from_fn(Shape::new(3, h, w), |c, y, x| {
            (raw[(y * w + x) * 3 + c] as f64).clamp(0.0, 1.0)
        });
        Self::new(tensor)
    }

    pub fn tensor(&self) -> &FeatureTensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> FeatureTensor {
        self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }
}

/// Clamps to `[0, 1]` and rounds to 8 bits per channel.
pub fn quantize_rgb8(image: &FeatureTensor) -> Result<image::RgbImage> {
    if image.channels() != 3 {
        return Err(CrnError::Dimension(format!(
            "expected a 3-channel image, got {}",
            image.shape()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(out)
}

pub fn save_rgb_png(image: &FeatureTensor, path: &Path) -> Result<()> {
    quantize_rgb8(image)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CrnError::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_strategy(max_h: usize, max_w: usize, classes: usize) -> impl Strategy<Value = LabelGrid> {
        (1..=max_h, 1..=max_w).prop_flat_map(move |(h, w)| {
            proptest::collection::vec(0..classes, h * w)
                .prop_map(move |labels| LabelGrid::new(h, w, labels).unwrap())
        })
    }

    #[test]
    fn remap_table_lookup() {
        let table = RemapTable::from_pairs([(7, 1), (26, 2)]);
        let grid = labels_from_raw(2, 2, &[7, 7, 26, 0], LabelMapping::Remap { table: &table, strict: false }).unwrap();
        assert_eq!(grid.labels(), &[1, 1, 2, 0]);
        let err = labels_from_raw(1, 1, &[9], LabelMapping::Remap { table: &table, strict: true }).unwrap_err();
        assert!(matches!(err, CrnError::UnmappedLabel(9)));
        assert!(err.to_string().contains('9'));
    }

    #[test]
    fn cityscapes_table_has_nineteen_classes_plus_void() {
        let table = RemapTable::cityscapes();
        assert_eq!(table.len(), 19);
        assert_eq!(table.num_classes(), 20);
        assert_eq!(table.lookup(7), Some(1));
        assert_eq!(table.lookup(0), None);
    }

    #[test]
    fn one_hot_small_grid() {
        let grid = LabelGrid::from_rows(&[&[0, 2], &[1, 1]]).unwrap();
        let layout = one_hot(&grid, 3).unwrap();
        assert_eq!(layout.tensor().get(0, 0, 0), 1.0);
        assert_eq!(layout.tensor().get(2, 0, 1), 1.0);
        assert_eq!(layout.tensor().get(1, 1, 0), 1.0);
        assert_eq!(layout.tensor().sum(), 4.0);
        check_partition(layout.tensor(), 0.0).unwrap();
    }

    #[test]
    fn one_hot_uniform_class() {
        let grid = LabelGrid::new(2, 3, vec![1; 6]).unwrap();
        let layout = one_hot(&grid, 2).unwrap();
        assert!(layout.tensor().channel(1).iter().all(|&v| v == 1.0));
        assert!(layout.tensor().channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_rejects_out_of_range_label() {
        let grid = LabelGrid::new(1, 2, vec![0, 3]).unwrap();
        assert!(matches!(
            one_hot(&grid, 3),
            Err(CrnError::LabelBounds { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn downsample_to_single_soft_pixel() {
        let grid = LabelGrid::from_rows(&[&[0, 0], &[1, 1]]).unwrap();
        let down = downsample_layout(&one_hot(&grid, 2).unwrap(), 1, 1).unwrap();
        assert_eq!(down.tensor().data(), &[0.5, 0.5]);
    }

    #[test]
    fn downsample_rejects_fractional_ratio() {
        let layout = one_hot(&LabelGrid::new(4, 6, vec![0; 24]).unwrap(), 1).unwrap();
        assert!(matches!(downsample_layout(&layout, 3, 3), Err(CrnError::Dimension(_))));
    }

    #[test]
    fn vertical_split_masks_are_half_on_boundary() {
        let grid = LabelGrid::from_rows(&[&[0, 0, 0, 1], &[0, 0, 0, 1], &[0, 0, 0, 1], &[0, 0, 0, 1]]).unwrap();
        let masks = class_masks(&one_hot(&grid, 2).unwrap(), &[(4, 4), (2, 2)]).unwrap();
        let m1 = masks.mask(1, 1);
        assert_eq!(m1.values.data(), &[0.0, 0.5, 0.0, 0.5]);
        assert_eq!(masks.mask(0, 1).values.data(), &[1.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn single_class_masks_are_all_ones() {
        let layout = one_hot(&LabelGrid::new(8, 8, vec![2; 64]).unwrap(), 3).unwrap();
        let masks = class_masks(&layout, &[(8, 8), (4, 4), (1, 1)]).unwrap();
        for l in 0..3 {
            assert!(masks.mask(2, l).values.data().iter().all(|&v| v == 1.0));
        }
    }

    proptest! {
        #[test]
        fn argmax_inverts_one_hot(grid in grid_strategy(8, 8, 5)) {
            let layout = one_hot(&grid, 5).unwrap();
            prop_assert_eq!(layout.argmax(), grid);
        }

        #[test]
        fn downsampling_preserves_partition(labels in proptest::collection::vec(0usize..4, 16 * 32)) {
            let grid = LabelGrid::new(16, 32, labels).unwrap();
            let layout = one_hot(&grid, 4).unwrap();
            let masks = class_masks(&layout, &[(8, 16), (4, 8), (2, 4)]).unwrap();
            for l in 0..masks.num_levels() {
                check_partition(masks.level(l), PARTITION_TOLERANCE).unwrap();
            }
        }

        #[test]
        fn downsampling_commutes_with_class_extraction(labels in proptest::collection::vec(0usize..3, 8 * 8), p in 0usize..3) {
            let layout = one_hot(&LabelGrid::new(8, 8, labels).unwrap(), 3).unwrap();
            let a = downsample_layout(&layout, 2, 4).unwrap().class_mask(p).unwrap().values;
            let b = block_average(&layout.class_mask(p).unwrap().values, 2, 4).unwrap();
            prop_assert!(a.max_abs_diff(&b) == 0.0);
        }

        #[test]
        fn constant_layout_is_unchanged_by_downsampling(class in 0usize..3, f in 0u32..4) {
            let s = 1usize << f;
            let layout = one_hot(&LabelGrid::new(8, 16, vec![class; 128]).unwrap(), 3).unwrap();
            let down = downsample_layout(&layout, 8 / s, 16 / s).unwrap();
            prop_assert!(down.tensor().channel(class).iter().all(|&v| v == 1.0));
        }
    }
}
