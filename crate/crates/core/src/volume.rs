//! Volumes, label maps, slicing and canvas padding.
//!
//! All volumes are indexed `[z][y][x]` with `x` fastest in memory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, DType, Header};
use crate::error::{dim_err, Error, Result};

/// `(D, H, W)`.
pub type Shape3 = [usize; 3];
/// `(sz, sy, sx)` in millimetres.
pub type Spacing3 = [f64; 3];

/// Voxel geometry of the reference acquisition.
pub const ACQUISITION_SPACING_MM: Spacing3 = [5.0, 2.0, 2.0];

/// Tissue class ids.
pub mod tissue {
    pub const BACKGROUND: u8 = 0;
    pub const SAT: u8 = 1;
    pub const VAT: u8 = 2;
    pub const BONE: u8 = 3;
    pub const OTHER: u8 = 4;
    pub const NUM_CLASSES: usize = 5;
}

/// Body-region class ids.
pub mod region {
    pub const BACKGROUND: u8 = 0;
    pub const THORACIC: u8 = 1;
    pub const ABDOMINAL: u8 = 2;
    pub const PELVIC: u8 = 3;
    pub const NUM_CLASSES: usize = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LabelScheme {
    Tissue,
    Region,
}

impl LabelScheme {
    pub fn num_classes(self) -> usize {
        match self {
            LabelScheme::Tissue => tissue::NUM_CLASSES,
            LabelScheme::Region => region::NUM_CLASSES,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            LabelScheme::Tissue => "TISSUE",
            LabelScheme::Region => "REGION",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "TISSUE" => Ok(LabelScheme::Tissue),
            "REGION" => Ok(LabelScheme::Region),
            other => Err(Error::Format(format!("unknown label scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlicePlane {
    Axial,
    Coronal,
    Sagittal,
}

impl SlicePlane {
    pub const ALL: [SlicePlane; 3] = [SlicePlane::Axial, SlicePlane::Coronal, SlicePlane::Sagittal];

    /// Number of slices and the `(rows, cols)` of each slice.
    pub fn slice_layout(self, shape: Shape3) -> (usize, (usize, usize)) {
        let [d, h, w] = shape;
        match self {
            SlicePlane::Axial => (d, (h, w)),
            SlicePlane::Coronal => (h, (d, w)),
            SlicePlane::Sagittal => (w, (d, h)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SlicePlane::Axial => "axial",
            SlicePlane::Coronal => "coronal",
            SlicePlane::Sagittal => "sagittal",
        }
    }
}

fn validate_geometry(shape: Shape3, spacing: Spacing3, len: usize) -> Result<()> {
    if shape.contains(&0) {
        return dim_err(format!("shape {shape:?} has a zero extent"));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Argument(format!("spacing {spacing:?} must be positive")));
    }
    if shape.iter().product::<usize>() != len {
        return dim_err(format!("shape {shape:?} does not match {len} elements"));
    }
    Ok(())
}

/// Scalar image with voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    shape: Shape3,
    spacing_mm: Spacing3,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(shape: Shape3, spacing_mm: Spacing3, data: Vec<f32>) -> Result<Self> {
        validate_geometry(shape, spacing_mm, data.len())?;
        Ok(Self { shape, spacing_mm, data })
    }

    pub fn zeros(shape: Shape3, spacing_mm: Spacing3) -> Result<Self> {
        Self::new(shape, spacing_mm, vec![0.0; shape.iter().product()])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing_mm(&self) -> Spacing3 {
        self.spacing_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[index(self.shape, z, y, x)]
    }

    pub fn slices(&self, plane: SlicePlane) -> Vec<Image2D<f32>> {
        extract_slices(self.shape, &self.data, plane)
    }
}

/// Integer class map under a fixed label scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: Shape3,
    spacing_mm: Spacing3,
    scheme: LabelScheme,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: Shape3, spacing_mm: Spacing3, scheme: LabelScheme, data: Vec<u8>) -> Result<Self> {
        validate_geometry(shape, spacing_mm, data.len())?;
        let k = scheme.num_classes() as u8;
        if let Some(bad) = data.iter().find(|&&v| v >= k) {
            return Err(Error::Argument(format!("label {bad} outside {scheme:?} scheme")));
        }
        Ok(Self { shape, spacing_mm, scheme, data })
    }

    pub fn zeros(shape: Shape3, spacing_mm: Spacing3, scheme: LabelScheme) -> Result<Self> {
        Self::new(shape, spacing_mm, scheme, vec![0; shape.iter().product()])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing_mm(&self) -> Spacing3 {
        self.spacing_mm
    }

    pub fn scheme(&self) -> LabelScheme {
        self.scheme
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[index(self.shape, z, y, x)]
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.scheme.num_classes()];
        for &v in &self.data {
            c[v as usize] += 1;
        }
        c
    }

    /// Volume of `label` in millilitres.
    pub fn volume_ml(&self, label: u8) -> f64 {
        self.count(label) as f64 * self.voxel_volume_mm3() / 1000.0
    }

    pub fn slices(&self, plane: SlicePlane) -> Vec<Image2D<u8>> {
        extract_slices(self.shape, &self.data, plane)
    }

    pub fn mask(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == label).collect()
    }
}

#[inline]
pub fn index(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

/// Either kind of storable volume.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredVolume {
    Image(Volume3D),
    Labels(LabelMap),
}

#[derive(Clone, Copy, Debug)]
pub enum VolumeRef<'a> {
    Image(&'a Volume3D),
    Labels(&'a LabelMap),
}

impl<'a> From<&'a Volume3D> for VolumeRef<'a> {
    fn from(v: &'a Volume3D) -> Self {
        VolumeRef::Image(v)
    }
}

impl<'a> From<&'a LabelMap> for VolumeRef<'a> {
    fn from(v: &'a LabelMap) -> Self {
        VolumeRef::Labels(v)
    }
}

impl<'a> From<&'a StoredVolume> for VolumeRef<'a> {
    fn from(v: &'a StoredVolume) -> Self {
        match v {
            StoredVolume::Image(v) => VolumeRef::Image(v),
            StoredVolume::Labels(v) => VolumeRef::Labels(v),
        }
    }
}

pub fn encode_volume<'a>(v: impl Into<VolumeRef<'a>>) -> Result<Vec<u8>> {
    let (header, payload) = match v.into() {
        VolumeRef::Image(v) => (
            Header {
                dtype: DType::F32,
                shape: v.shape.to_vec(),
                spacing_mm: Some(v.spacing_mm.to_vec()),
                scheme: None,
            },
            container::f32_to_bytes(&v.data),
        ),
        VolumeRef::Labels(v) => (
            Header {
                dtype: DType::U8,
                shape: v.shape.to_vec(),
                spacing_mm: Some(v.spacing_mm.to_vec()),
                scheme: Some(v.scheme.tag().to_string()),
            },
            v.data.clone(),
        ),
    };
    container::encode(&header, &payload)
}

pub fn decode_volume(bytes: &[u8]) -> Result<StoredVolume> {
    let (header, payload) = container::decode(bytes)?;
    let shape: Shape3 = header
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Format(format!("volume shape must have 3 dims, got {:?}", header.shape)))?;
    let spacing: Spacing3 = header
        .spacing_mm
        .as_deref()
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Format("volume header needs 3 spacing values".into()))?;
    let fmt = |e: Error| Error::Format(e.to_string());
    match (header.dtype, header.scheme.as_deref()) {
        (DType::F32, None) => Ok(StoredVolume::Image(
            Volume3D::new(shape, spacing, container::bytes_to_f32(payload)).map_err(fmt)?,
        )),
        (DType::U8, Some(tag)) => Ok(StoredVolume::Labels(
            LabelMap::new(shape, spacing, LabelScheme::from_tag(tag)?, payload.to_vec()).map_err(fmt)?,
        )),
        (dtype, scheme) => Err(Error::Format(format!(
            "dtype {dtype:?} with scheme {scheme:?} is not a volume"
        ))),
    }
}

pub fn write_volume<'a>(v: impl Into<VolumeRef<'a>>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<StoredVolume> {
    decode_volume(&std::fs::read(path)?)
}

pub fn read_image(path: &Path) -> Result<Volume3D> {
    match read_volume(path)? {
        StoredVolume::Image(v) => Ok(v),
        StoredVolume::Labels(_) => Err(Error::Format(format!("{} holds labels, not an image", path.display()))),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read_volume(path)? {
        StoredVolume::Labels(v) => Ok(v),
        StoredVolume::Image(_) => Err(Error::Format(format!("{} holds an image, not labels", path.display()))),
    }
}

/// Row-major 2D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2D<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Image2D<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return dim_err(format!("{rows}x{cols} slice with {} elements", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }
}

/// Slices of a `[z][y][x]` buffer along `plane`, in increasing index order.
pub fn extract_slices<T: Copy + Default>(shape: Shape3, data: &[T], plane: SlicePlane) -> Vec<Image2D<T>> {
    let [d, h, w] = shape;
    let (n, (rows, cols)) = plane.slice_layout(shape);
    (0..n)
        .map(|s| {
            let mut out = Vec::with_capacity(rows * cols);
            match plane {
                SlicePlane::Axial => out.extend_from_slice(&data[s * h * w..(s + 1) * h * w]),
                SlicePlane::Coronal => {
                    for z in 0..d {
                        let start = index(shape, z, s, 0);
                        out.extend_from_slice(&data[start..start + w]);
                    }
                }
                SlicePlane::Sagittal => {
                    for z in 0..d {
                        for y in 0..h {
                            out.push(data[index(shape, z, y, s)]);
                        }
                    }
                }
            }
            Image2D { rows, cols, data: out }
        })
        .collect()
}

/// Inverse of [`extract_slices`].
pub fn restack_slices<T: Copy + Default>(shape: Shape3, slices: &[Image2D<T>], plane: SlicePlane) -> Result<Vec<T>> {
    let (n, (rows, cols)) = plane.slice_layout(shape);
    if slices.len() != n {
        return dim_err(format!("{plane:?} restack needs {n} slices, got {}", slices.len()));
    }
    if let Some(s) = slices.iter().find(|s| s.rows != rows || s.cols != cols) {
        return dim_err(format!("slice {}x{} does not match {rows}x{cols}", s.rows, s.cols));
    }
    let mut out = vec![T::default(); shape.iter().product()];
    for (s, img) in slices.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                let (z, y, x) = match plane {
                    SlicePlane::Axial => (s, r, c),
                    SlicePlane::Coronal => (r, s, c),
                    SlicePlane::Sagittal => (r, c, s),
                };
                out[index(shape, z, y, x)] = img.data[r * cols + c];
            }
        }
    }
    Ok(out)
}

/// Where a slice sits on its canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadOffset {
    pub top: usize,
    pub left: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Centres `slice` on a zero canvas of `(rows, cols)`.
pub fn pad_to_canvas<T: Copy + Default>(slice: &Image2D<T>, canvas: (usize, usize)) -> Result<(Image2D<T>, PadOffset)> {
    let (hc, wc) = canvas;
    if slice.rows > hc || slice.cols > wc {
        return dim_err(format!(
            "slice {}x{} does not fit canvas {hc}x{wc}",
            slice.rows, slice.cols
        ));
    }
    let off = PadOffset {
        top: (hc - slice.rows) / 2,
        left: (wc - slice.cols) / 2,
        rows: slice.rows,
        cols: slice.cols,
    };
    let mut out = Image2D::filled(hc, wc, T::default());
    for r in 0..slice.rows {
        let dst = (r + off.top) * wc + off.left;
        out.data[dst..dst + slice.cols].copy_from_slice(&slice.data[r * slice.cols..(r + 1) * slice.cols]);
    }
    Ok((out, off))
}

/// Crops a padded canvas back to the original slice.
pub fn crop_from_canvas<T: Copy + Default>(padded: &Image2D<T>, off: PadOffset) -> Result<Image2D<T>> {
    if off.top + off.rows > padded.rows || off.left + off.cols > padded.cols {
        return dim_err("offset record does not fit the canvas");
    }
    let mut data = Vec::with_capacity(off.rows * off.cols);
    for r in 0..off.rows {
        let src = (r + off.top) * padded.cols + off.left;
        data.extend_from_slice(&padded.data[src..src + off.cols]);
    }
    Ok(Image2D { rows: off.rows, cols: off.cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: Shape3) -> Volume3D {
        let n = shape.iter().product();
        Volume3D::new(shape, [5.0, 2.0, 2.0], (0..n).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Volume3D::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(Volume3D::new([2, 1, 1], [1.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(LabelMap::new([1, 1, 1], [1.0; 3], LabelScheme::Region, vec![4]).is_err());
        assert!(LabelMap::new([1, 1, 1], [1.0; 3], LabelScheme::Tissue, vec![4]).is_ok());
    }

    #[test]
    fn single_voxel_file_size() {
        let v = Volume3D::zeros([1, 1, 1], [1.0; 3]).unwrap();
        let bytes = encode_volume(&v).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + 4 + hlen + 4);
    }

    #[test]
    fn acquisition_sized_payload() {
        let v = Volume3D::zeros([72, 224, 256], ACQUISITION_SPACING_MM).unwrap();
        let bytes = encode_volume(&v).unwrap();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 12 - hlen, 72 * 224 * 256 * 4);
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.fsv");
        let v = ramp([3, 4, 5]);
        write_volume(&v, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), v);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let v = ramp([1, 1, 1]);
        let err = write_volume(&v, Path::new("/nonexistent-dir/x/v.fsv")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn axial_slices_at_acquisition_size() {
        let v = Volume3D::zeros([72, 224, 256], ACQUISITION_SPACING_MM).unwrap();
        let s = v.slices(SlicePlane::Axial);
        assert_eq!(s.len(), 72);
        assert!(s.iter().all(|s| s.rows == 224 && s.cols == 256));
    }

    #[test]
    fn single_voxel_slices() {
        let v = ramp([1, 1, 1]);
        for p in SlicePlane::ALL {
            let s = v.slices(p);
            assert_eq!(s.len(), 1);
            assert_eq!((s[0].rows, s[0].cols), (1, 1));
        }
    }

    #[test]
    fn slice_orientation() {
        let v = ramp([2, 3, 4]);
        let cor = v.slices(SlicePlane::Coronal);
        assert_eq!(cor.len(), 3);
        assert_eq!((cor[1].rows, cor[1].cols), (2, 4));
        assert_eq!(cor[1].get(1, 2), v.get(1, 1, 2));
        let sag = v.slices(SlicePlane::Sagittal);
        assert_eq!(sag.len(), 4);
        assert_eq!((sag[3].rows, sag[3].cols), (2, 3));
        assert_eq!(sag[3].get(1, 2), v.get(1, 2, 3));
    }

    #[test]
    fn pad_identity_and_offsets() {
        let s = Image2D::filled(224, 256, 1.0f32);
        let (p, off) = pad_to_canvas(&s, (224, 256)).unwrap();
        assert_eq!(p, s);
        assert_eq!((off.top, off.left), (0, 0));

        let s = Image2D::filled(200, 220, 1.0f32);
        let (p, off) = pad_to_canvas(&s, (224, 256)).unwrap();
        assert_eq!((off.top, off.left), (12, 18));
        let total: f32 = p.data.iter().sum();
        assert_eq!(total, 200.0 * 220.0);
        let border: f32 = (0..224)
            .flat_map(|r| (0..256).map(move |c| (r, c)))
            .filter(|&(r, c)| !(12..212).contains(&r) || !(18..238).contains(&c))
            .map(|(r, c)| p.get(r, c))
            .sum();
        assert_eq!(border, 0.0);
        assert!(matches!(
            pad_to_canvas(&Image2D::filled(225, 256, 0.0f32), (224, 256)),
            Err(Error::Dimension(_))
        ));
    }

    proptest! {
        #[test]
        fn restack_inverts_extract(d in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let n = d * h * w;
            let data: Vec<f32> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32).collect();
            for p in SlicePlane::ALL {
                let s = extract_slices([d, h, w], &data, p);
                prop_assert_eq!(restack_slices([d, h, w], &s, p).unwrap(), data.clone());
            }
        }

        #[test]
        fn label_round_trip(d in 1usize..4, h in 1usize..5, w in 1usize..5, vals in proptest::collection::vec(0u8..5, 80)) {
            let n = d * h * w;
            let lm = LabelMap::new([d, h, w], [1.5, 2.0, 0.5], LabelScheme::Tissue, vals[..n].to_vec()).unwrap();
            let back = decode_volume(&encode_volume(&lm).unwrap()).unwrap();
            prop_assert_eq!(back, StoredVolume::Labels(lm));
        }

        #[test]
        fn pad_conserves_and_crop_inverts(rows in 1usize..12, cols in 1usize..12, extra_r in 0usize..5, extra_c in 0usize..5, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols).map(|i| ((i as u32 ^ seed) % 97) as f32).collect();
            let s = Image2D::new(rows, cols, data).unwrap();
            let (p, off) = pad_to_canvas(&s, (rows + extra_r, cols + extra_c)).unwrap();
            let a: f64 = s.data.iter().map(|&v| v as f64).sum();
            let b: f64 = p.data.iter().map(|&v| v as f64).sum();
            prop_assert_eq!(a, b);
            prop_assert_eq!(crop_from_canvas(&p, off).unwrap(), s);
        }
    }
}
