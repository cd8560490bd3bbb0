//! Localization, per-view segmentation, view aggregation and volume reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::netgraph::{self, build_segnet_with, build_view_agg_net, FusionMode, Model, NetworkSpec, SegNetConfig};
use crate::phantom::{self, PhantomCase};
use crate::tensor::Tensor;
use crate::train::{train_model, Sample, TrainConfig, TrainLog};
use crate::volume::{
    crop_from_canvas, extract_slices, pad_to_canvas, region, tissue, Image2D, LabelMap, LabelScheme, PadOffset, Shape3,
    SlicePlane, Volume3D,
};

/// Fraction of non-background voxels that must be labeled abdominal.
pub const ABDOMINAL_FRACTION: f64 = 0.85;
pub const AXIAL_FOCUS: [f64; 3] = [0.5, 0.25, 0.25];
pub const BALANCED: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
/// Slices per inference batch.
pub const INFER_BATCH: usize = 8;
/// Bound on the im2col buffer of one aggregation chunk, in floats.
const AGG_CHUNK_FLOATS: usize = 24 << 20;

/// Inclusive axial slice range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbdominalRegion {
    pub z_low: usize,
    pub z_high: usize,
}

impl AbdominalRegion {
    pub fn new(z_low: usize, z_high: usize, depth: usize) -> Result<Self> {
        if z_low > z_high || z_high >= depth {
            return arg_err(format!("region [{z_low}, {z_high}] invalid for {depth} slices"));
        }
        Ok(Self { z_low, z_high })
    }

    pub fn len(&self) -> usize {
        self.z_high - self.z_low + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, z: usize) -> bool {
        (self.z_low..=self.z_high).contains(&z)
    }
}

/// The six networks of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    LocSagittal,
    LocCoronal,
    SegAxial,
    SegCoronal,
    SegSagittal,
    ViewAgg,
}

impl Target {
    pub const ALL: [Target; 6] =
        [Target::LocSagittal, Target::LocCoronal, Target::SegAxial, Target::SegCoronal, Target::SegSagittal, Target::ViewAgg];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::LocSagittal => "loc-sagittal",
            Target::LocCoronal => "loc-coronal",
            Target::SegAxial => "seg-axial",
            Target::SegCoronal => "seg-coronal",
            Target::SegSagittal => "seg-sagittal",
            Target::ViewAgg => "view-agg",
        }
    }

    pub fn plane(self) -> Option<SlicePlane> {
        match self {
            Target::LocSagittal | Target::SegSagittal => Some(SlicePlane::Sagittal),
            Target::LocCoronal | Target::SegCoronal => Some(SlicePlane::Coronal),
            Target::SegAxial => Some(SlicePlane::Axial),
            Target::ViewAgg => None,
        }
    }

    pub fn scheme(self) -> LabelScheme {
        match self {
            Target::LocSagittal | Target::LocCoronal => LabelScheme::Region,
            _ => LabelScheme::Tissue,
        }
    }

    pub fn segmentation(plane: SlicePlane) -> Target {
        match plane {
            SlicePlane::Axial => Target::SegAxial,
            SlicePlane::Coronal => Target::SegCoronal,
            SlicePlane::Sagittal => Target::SegSagittal,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown target {s:?}")))
    }
}

/// Trained networks, one per [`Target`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub models: BTreeMap<Target, Model>,
}

impl ModelBundle {
    pub fn get(&self, t: Target) -> Result<&Model> {
        self.models.get(&t).ok_or_else(|| Error::MissingArtifact(format!("model {t}")))
    }

    /// Loads `dir/<target>/` for every target.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut models = BTreeMap::new();
        for t in Target::ALL {
            let sub = dir.join(t.as_str());
            if !sub.is_dir() {
                return Err(Error::MissingArtifact(format!("{} not found", sub.display())));
            }
            models.insert(t, Model::load(&sub)?);
        }
        Ok(Self { models })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (t, m) in &self.models {
            m.save(&dir.join(t.as_str()))?;
        }
        Ok(())
    }
}

fn canvas_of(model: &Model) -> Result<(usize, usize)> {
    match model.spec.input_canvas {
        Some([1, h, w]) => Ok((h, w)),
        other => Err(Error::Config(format!("{} has no 2D canvas ({other:?})", model.spec.name))),
    }
}

/// Index of the largest value; ties go to the lower index.
fn argmax(values: impl Iterator<Item = f32>) -> u8 {
    let mut best = (0u8, f32::NEG_INFINITY);
    for (c, v) in values.enumerate() {
        if v > best.1 {
            best = (c as u8, v);
        }
    }
    best.0
}

/// Per-voxel argmax of a class-major probability volume.
pub fn argmax_classes(probs: &[f32], num_classes: usize) -> Vec<u8> {
    let p = probs.len() / num_classes;
    (0..p).map(|i| argmax((0..num_classes).map(|c| probs[c * p + i]))).collect()
}

/// The part of a slice of `plane` that lies inside the axial range `rows`.
fn restrict(slice: &Image2D<f32>, plane: SlicePlane, zr: Option<AbdominalRegion>) -> Image2D<f32> {
    match (plane, zr) {
        (SlicePlane::Axial, _) | (_, None) => slice.clone(),
        (_, Some(r)) => Image2D {
            rows: r.len(),
            cols: slice.cols,
            data: slice.data[r.z_low * slice.cols..(r.z_high + 1) * slice.cols].to_vec(),
        },
    }
}

/// Volume coordinates of pixel `(row, col)` of slice `s` of `plane`, rows offset by `z0`.
fn voxel(shape: Shape3, plane: SlicePlane, s: usize, row: usize, col: usize, z0: usize) -> usize {
    let [_, h, w] = shape;
    let (z, y, x) = match plane {
        SlicePlane::Axial => (s, row, col),
        SlicePlane::Coronal => (row + z0, s, col),
        SlicePlane::Sagittal => (row + z0, col, s),
    };
    (z * h + y) * w + x
}

/// Runs a 2D network slice-wise over `plane` within `zr` (all slices when `None`).
/// Returns class-major probabilities in the volume frame; voxels outside `zr` are left at zero.
fn predict_plane(fat: &Volume3D, plane: SlicePlane, model: &Model, zr: Option<AbdominalRegion>) -> Result<Vec<f32>> {
    let shape = fat.shape();
    let canvas = canvas_of(model)?;
    let k = model.spec.num_classes;
    let n_vox: usize = shape.iter().product();
    let mut out = vec![0.0f32; k * n_vox];
    let slices = fat.slices(plane);
    let indices: Vec<usize> = match (plane, zr) {
        (SlicePlane::Axial, Some(r)) => (r.z_low..=r.z_high).collect(),
        _ => (0..slices.len()).collect(),
    };
    let z0 = match (plane, zr) {
        (SlicePlane::Axial, _) | (_, None) => 0,
        (_, Some(r)) => r.z_low,
    };
    for batch in indices.chunks(INFER_BATCH) {
        let mut data = Vec::with_capacity(batch.len() * canvas.0 * canvas.1);
        let mut offsets: Vec<PadOffset> = Vec::with_capacity(batch.len());
        for &s in batch {
            let (padded, off) = pad_to_canvas(&restrict(&slices[s], plane, zr), canvas)?;
            data.extend_from_slice(&padded.data);
            offsets.push(off);
        }
        let x = Tensor::from_vec([batch.len(), 1, 1, canvas.0, canvas.1], data)?;
        let probs = netgraph::forward(model, x)?;
        for (b, (&s, off)) in batch.iter().zip(&offsets).enumerate() {
            for c in 0..k {
                let plane_img = Image2D { rows: canvas.0, cols: canvas.1, data: probs.channel(b, c).to_vec() };
                let crop = crop_from_canvas(&plane_img, *off)?;
                for r in 0..crop.rows {
                    for col in 0..crop.cols {
                        out[c * n_vox + voxel(shape, plane, s, r, col, z0)] = crop.get(r, col);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Region labels predicted slice-wise on `plane` and re-stacked into the volume frame.
pub fn predict_region_labels(fat: &Volume3D, plane: SlicePlane, model: &Model) -> Result<LabelMap> {
    if model.spec.num_classes != region::NUM_CLASSES {
        return Err(Error::Config(format!("{} is not a region network", model.spec.name)));
    }
    let probs = predict_plane(fat, plane, model, None)?;
    LabelMap::new(fat.shape(), fat.spacing_mm(), LabelScheme::Region, argmax_classes(&probs, region::NUM_CLASSES))
}

/// Abdominal share of non-background voxels per axial slice; 0 for empty slices.
pub fn abdominal_ratio(labels: &LabelMap) -> Vec<f64> {
    let [d, h, w] = labels.shape();
    (0..d)
        .map(|z| {
            let s = &labels.data()[z * h * w..(z + 1) * h * w];
            let fg = s.iter().filter(|&&v| v != region::BACKGROUND).count();
            let ab = s.iter().filter(|&&v| v == region::ABDOMINAL).count();
            if fg == 0 {
                0.0
            } else {
                ab as f64 / fg as f64
            }
        })
        .collect()
}

/// Lowest and highest slice satisfying the abdominal fraction rule.
pub fn view_bounds(labels: &LabelMap) -> Option<(usize, usize)> {
    let ok: Vec<usize> =
        abdominal_ratio(labels).iter().enumerate().filter(|(_, &r)| r >= ABDOMINAL_FRACTION).map(|(z, _)| z).collect();
    Some((*ok.first()?, *ok.last()?))
}

/// Averages per-view bounds; half-way values round away from the region centre.
pub fn localize_from_labels(sagittal: &LabelMap, coronal: &LabelMap) -> Result<AbdominalRegion> {
    if sagittal.shape() != coronal.shape() {
        return dim_err("view predictions differ in shape");
    }
    let depth = sagittal.shape()[0];
    let (lo, hi) = match (view_bounds(sagittal), view_bounds(coronal)) {
        (Some(a), Some(b)) => ((a.0 + b.0) / 2, (a.1 + b.1).div_ceil(2)),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::Localization("no slice is predominantly abdominal in either view".into())),
    };
    AbdominalRegion::new(lo, hi, depth)
}

pub fn localize_abdominal_region(fat: &Volume3D, sagittal: &Model, coronal: &Model) -> Result<AbdominalRegion> {
    if fat.shape().contains(&0) {
        return dim_err("empty volume");
    }
    let s = predict_region_labels(fat, SlicePlane::Sagittal, sagittal)?;
    let c = predict_region_labels(fat, SlicePlane::Coronal, coronal)?;
    localize_from_labels(&s, &c)
}

/// Sets background probability 1 outside the axial range.
fn force_background_outside(probs: &mut [f32], shape: Shape3, num_classes: usize, zr: AbdominalRegion) {
    let [d, h, w] = shape;
    let n = d * h * w;
    for z in (0..d).filter(|&z| !zr.contains(z)) {
        for c in 0..num_classes {
            let v = if c == 0 { 1.0 } else { 0.0 };
            probs[c * n + z * h * w..c * n + (z + 1) * h * w].fill(v);
        }
    }
}

/// Tissue probabilities of one view within the region, re-stacked into the volume frame.
pub fn segment_view(fat: &Volume3D, zr: AbdominalRegion, plane: SlicePlane, model: &Model) -> Result<Vec<f32>> {
    AbdominalRegion::new(zr.z_low, zr.z_high, fat.shape()[0])?;
    if model.spec.num_classes != tissue::NUM_CLASSES {
        return Err(Error::Config(format!("{} is not a tissue network", model.spec.name)));
    }
    let mut probs = predict_plane(fat, plane, model, Some(zr))?;
    force_background_outside(&mut probs, fat.shape(), tissue::NUM_CLASSES, zr);
    Ok(probs)
}

/// Class-major tissue probabilities of the three views in the volume frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewProbabilities {
    pub shape: Shape3,
    pub num_classes: usize,
    pub region: AbdominalRegion,
    pub planes: BTreeMap<SlicePlane, Vec<f32>>,
}

impl ViewProbabilities {
    pub fn get(&self, plane: SlicePlane) -> Result<&[f32]> {
        self.planes
            .get(&plane)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Argument(format!("{} view missing", plane.name())))
    }

    fn check(&self) -> Result<()> {
        let n = self.num_classes * self.shape.iter().product::<usize>();
        for p in SlicePlane::ALL {
            if self.get(p)?.len() != n {
                return dim_err(format!("{} probabilities have the wrong size", p.name()));
            }
        }
        Ok(())
    }

    pub fn argmax(&self, plane: SlicePlane) -> Result<Vec<u8>> {
        Ok(argmax_classes(self.get(plane)?, self.num_classes))
    }

    /// The region slab of all views as a `(1, 3K, Dr, H, W)` tensor, views in axial, coronal, sagittal order.
    pub fn slab(&self) -> Result<Tensor> {
        self.check()?;
        let [_, h, w] = self.shape;
        let n = self.shape.iter().product::<usize>();
        let plane_len = h * w;
        let (z0, dr) = (self.region.z_low, self.region.len());
        let mut data = Vec::with_capacity(3 * self.num_classes * dr * plane_len);
        for p in SlicePlane::ALL {
            let v = self.get(p)?;
            for c in 0..self.num_classes {
                data.extend_from_slice(&v[c * n + z0 * plane_len..c * n + (z0 + dr) * plane_len]);
            }
        }
        Tensor::from_vec([1, 3 * self.num_classes, dr, h, w], data)
    }
}

pub fn segment_all_views(fat: &Volume3D, zr: AbdominalRegion, bundle: &ModelBundle, threads: usize) -> Result<ViewProbabilities> {
    let planes: Vec<(SlicePlane, Result<Vec<f32>>)> = if threads > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = SlicePlane::ALL
                .into_iter()
                .map(|p| {
                    s.spawn(move || {
                        let m = bundle.get(Target::segmentation(p))?;
                        segment_view(fat, zr, p, m)
                    })
                })
                .collect();
            SlicePlane::ALL.into_iter().zip(handles).map(|(p, h)| (p, h.join().expect("view worker panicked"))).collect()
        })
    } else {
        SlicePlane::ALL
            .into_iter()
            .map(|p| (p, bundle.get(Target::segmentation(p)).and_then(|m| segment_view(fat, zr, p, m))))
            .collect()
    };
    let mut out = BTreeMap::new();
    for (p, r) in planes {
        out.insert(p, r?);
    }
    Ok(ViewProbabilities { shape: fat.shape(), num_classes: tissue::NUM_CLASSES, region: zr, planes: out })
}

/// Runs the aggregation network over the region slab in z-chunks with a one-slice halo.
pub fn aggregate_probabilities(views: &ViewProbabilities, agg: &Model) -> Result<Vec<f32>> {
    let slab = views.slab()?;
    if agg.spec.input_channels() != slab.channels() {
        return dim_err(format!("aggregation net takes {} channels, views give {}", agg.spec.input_channels(), slab.channels()));
    }
    let [_, c, dr, h, w] = slab.shape();
    let k = agg.spec.num_classes;
    let halo = agg.spec.layers.iter().filter_map(|l| l.kind.kernel()).map(|kk| kk[0] / 2).sum::<usize>();
    let kernel_taps = agg.spec.layers.iter().filter_map(|l| l.kind.kernel()).map(|kk| kk.iter().product::<usize>()).max().unwrap_or(1);
    let per_slice = (c * kernel_taps * h * w).max(1);
    let chunk = (AGG_CHUNK_FLOATS / per_slice).saturating_sub(2 * halo).max(1);
    let plane_len = h * w;
    let mut out = vec![0.0f32; k * dr * plane_len];
    let mut z = 0;
    while z < dr {
        let z_end = (z + chunk).min(dr);
        let (a, b) = (z.saturating_sub(halo), (z_end + halo).min(dr));
        let mut data = Vec::with_capacity(c * (b - a) * plane_len);
        for ch in 0..c {
            let src = slab.channel(0, ch);
            data.extend_from_slice(&src[a * plane_len..b * plane_len]);
        }
        let probs = netgraph::forward(agg, Tensor::from_vec([1, c, b - a, h, w], data)?)?;
        for cls in 0..k {
            let src = probs.channel(0, cls);
            out[cls * dr * plane_len + z * plane_len..cls * dr * plane_len + z_end * plane_len]
                .copy_from_slice(&src[(z - a) * plane_len..(z_end - a) * plane_len]);
        }
        z = z_end;
    }
    Ok(out)
}

fn embed_slab_labels(views: &ViewProbabilities, slab_labels: &[u8], spacing: [f64; 3]) -> Result<LabelMap> {
    let [d, h, w] = views.shape;
    let mut labels = vec![tissue::BACKGROUND; d * h * w];
    let z0 = views.region.z_low * h * w;
    labels[z0..z0 + slab_labels.len()].copy_from_slice(slab_labels);
    LabelMap::new(views.shape, spacing, LabelScheme::Tissue, labels)
}

pub fn aggregate_learned(views: &ViewProbabilities, agg: &Model, spacing: [f64; 3]) -> Result<LabelMap> {
    let probs = aggregate_probabilities(views, agg)?;
    embed_slab_labels(views, &argmax_classes(&probs, agg.spec.num_classes), spacing)
}

/// Convex combination of the views with weights `(axial, coronal, sagittal)`, then argmax.
pub fn aggregate_hardcoded(views: &ViewProbabilities, weights: [f64; 3], spacing: [f64; 3]) -> Result<LabelMap> {
    if weights.iter().any(|&v| !(v >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return arg_err(format!("view weights {weights:?} must be non-negative and sum to 1"));
    }
    views.check()?;
    let n: usize = views.shape.iter().product();
    let k = views.num_classes;
    let v: Vec<&[f32]> = SlicePlane::ALL.iter().map(|&p| views.get(p)).collect::<Result<_>>()?;
    let labels = (0..n)
        .map(|i| {
            argmax((0..k).map(|c| {
                let j = c * n + i;
                (weights[0] * v[0][j] as f64 + weights[1] * v[1][j] as f64 + weights[2] * v[2][j] as f64) as f32
            }))
        })
        .collect();
    LabelMap::new(views.shape, spacing, LabelScheme::Tissue, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Aggregation {
    Learned,
    Hardcoded([f64; 3]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumesReport {
    pub sat_ml: f64,
    pub vat_ml: f64,
    pub aat_ml: f64,
    pub z_low: usize,
    pub z_high: usize,
    /// Voxels per tissue class inside the region.
    pub voxel_counts: BTreeMap<String, usize>,
    pub runtime_s: f64,
}

const TISSUE_NAMES: [&str; 5] = ["background", "sat", "vat", "bone", "other"];

impl VolumesReport {
    /// Volumes of the labels inside `zr`, in mL.
    pub fn from_labels(labels: &LabelMap, zr: AbdominalRegion, runtime_s: f64) -> Self {
        let [_, h, w] = labels.shape();
        let mut counts = [0usize; 5];
        for &v in &labels.data()[zr.z_low * h * w..(zr.z_high + 1) * h * w] {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
        let ml = |n: usize| n as f64 * labels.voxel_volume_mm3() / 1000.0;
        let sat_ml = ml(counts[tissue::SAT as usize]);
        let vat_ml = ml(counts[tissue::VAT as usize]);
        Self {
            sat_ml,
            vat_ml,
            aat_ml: sat_ml + vat_ml,
            z_low: zr.z_low,
            z_high: zr.z_high,
            voxel_counts: TISSUE_NAMES.iter().zip(counts).map(|(n, c)| (n.to_string(), c)).collect(),
            runtime_s,
        }
    }

    /// JSON without the wall-clock field, for byte comparisons.
    pub fn to_json_without_runtime(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("runtime_s");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub aggregation: Aggregation,
    pub threads: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { aggregation: Aggregation::Learned, threads: 1 }
    }
}

/// Full pipeline output.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub labels: LabelMap,
    pub report: VolumesReport,
    pub views: ViewProbabilities,
}

pub fn run_pipeline(fat: &Volume3D, bundle: &ModelBundle, opts: &PipelineOptions) -> Result<PipelineOutput> {
    let start = Instant::now();
    let zr = localize_abdominal_region(fat, bundle.get(Target::LocSagittal)?, bundle.get(Target::LocCoronal)?)?;
    let views = segment_all_views(fat, zr, bundle, opts.threads)?;
    let labels = match opts.aggregation {
        Aggregation::Learned => aggregate_learned(&views, bundle.get(Target::ViewAgg)?, fat.spacing_mm())?,
        Aggregation::Hardcoded(w) => aggregate_hardcoded(&views, w, fat.spacing_mm())?,
    };
    let report = VolumesReport::from_labels(&labels, zr, start.elapsed().as_secs_f64());
    Ok(PipelineOutput { labels, report, views })
}

/// Training slices of one plane, padded to `canvas`. With `zr`, slices are
/// restricted to the axial range as during inference.
pub fn slice_samples(
    fat: &Volume3D,
    labels: &LabelMap,
    plane: SlicePlane,
    canvas: (usize, usize),
    zr: Option<AbdominalRegion>,
) -> Result<Vec<Sample>> {
    if fat.shape() != labels.shape() {
        return dim_err("image and labels differ in shape");
    }
    let images = fat.slices(plane);
    let labs = extract_slices(labels.shape(), labels.data(), plane);
    let indices: Vec<usize> = match (plane, zr) {
        (SlicePlane::Axial, Some(r)) => (r.z_low..=r.z_high).collect(),
        _ => (0..images.len()).collect(),
    };
    indices
        .into_iter()
        .map(|s| {
            let img = restrict(&images[s], plane, zr);
            let lab = match (plane, zr) {
                (SlicePlane::Axial, _) | (_, None) => labs[s].clone(),
                (_, Some(r)) => Image2D {
                    rows: r.len(),
                    cols: labs[s].cols,
                    data: labs[s].data[r.z_low * labs[s].cols..(r.z_high + 1) * labs[s].cols].to_vec(),
                },
            };
            let (img, _) = pad_to_canvas(&img, canvas)?;
            let (lab, _) = pad_to_canvas(&lab, canvas)?;
            Sample::from_slice(&img, &lab)
        })
        .collect()
}

/// One aggregation training example: the region slab of the view probabilities and its labels.
pub fn aggregation_sample(views: &ViewProbabilities, truth: &LabelMap) -> Result<Sample> {
    if truth.shape() != views.shape {
        return dim_err("labels differ in shape from the views");
    }
    let [_, h, w] = views.shape;
    let r = views.region;
    Ok(Sample { input: views.slab()?, labels: truth.data()[r.z_low * h * w..(r.z_high + 1) * h * w].to_vec() })
}

/// Network shapes of every target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    /// Segmentation network; its canvas is used for axial slices.
    pub net: SegNetConfig,
    /// Canvas of coronal and sagittal slices.
    pub through_plane_canvas: (usize, usize),
    pub fusion: FusionMode,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self { net: SegNetConfig::desk(), through_plane_canvas: (32, 112), fusion: FusionMode::Maxout }
    }
}

impl BundleConfig {
    /// Paper-size networks on the 224x256 canvas in every plane.
    pub fn full() -> Self {
        Self { net: SegNetConfig::default(), through_plane_canvas: (224, 256), fusion: FusionMode::Maxout }
    }

    pub fn canvas(&self, plane: SlicePlane) -> (usize, usize) {
        match plane {
            SlicePlane::Axial => self.net.canvas,
            _ => self.through_plane_canvas,
        }
    }

    pub fn spec(&self, target: Target) -> Result<NetworkSpec> {
        let Some(plane) = target.plane() else {
            return build_view_agg_net(tissue::NUM_CLASSES);
        };
        let cfg = SegNetConfig { canvas: self.canvas(plane), ..self.net.clone() };
        let mut spec = build_segnet_with(target.scheme().num_classes(), self.fusion, 1, &cfg)?;
        spec.name = format!("{}-{}", target.as_str(), spec.name);
        Ok(spec)
    }
}

/// An image with its tissue and region ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub fat: Volume3D,
    pub tissue: LabelMap,
    pub region: LabelMap,
}

impl Case {
    pub fn from_phantom(id: impl Into<String>, p: &PhantomCase) -> Self {
        Self { id: id.into(), fat: p.fat_image.clone(), tissue: p.tissue_labels.clone(), region: p.region_labels.clone() }
    }

    /// Ground-truth abdominal range.
    pub fn abdominal_region(&self) -> Result<AbdominalRegion> {
        let (lo, hi) = phantom::abdominal_range(&self.region)
            .ok_or_else(|| Error::Argument(format!("case {} has no abdominal slices", self.id)))?;
        AbdominalRegion::new(lo, hi, self.fat.shape()[0])
    }
}

/// Slice samples of a 2D target over all cases. Segmentation targets use the
/// ground-truth abdominal range, localization targets whole slices.
pub fn target_samples(target: Target, cases: &[Case], cfg: &BundleConfig) -> Result<Vec<Sample>> {
    let Some(plane) = target.plane() else {
        return arg_err("aggregation samples are built from view probabilities");
    };
    let mut out = Vec::new();
    for c in cases {
        let s = match target.scheme() {
            LabelScheme::Region => slice_samples(&c.fat, &c.region, plane, cfg.canvas(plane), None)?,
            LabelScheme::Tissue => slice_samples(&c.fat, &c.tissue, plane, cfg.canvas(plane), Some(c.abdominal_region()?))?,
        };
        out.extend(s);
    }
    Ok(out)
}

pub fn train_target(target: Target, cases: &[Case], cfg: &BundleConfig, tc: &TrainConfig) -> Result<(Model, TrainLog)> {
    let spec = cfg.spec(target)?;
    let samples = target_samples(target, cases, cfg)?;
    let (weights, log) = train_model(&spec, &samples, tc)?;
    Ok((Model::new(spec, weights)?, log))
}

/// View probabilities of the three segmentation networks within the ground-truth range.
pub fn training_views(case: &Case, seg: [&Model; 3], threads: usize) -> Result<ViewProbabilities> {
    let zr = case.abdominal_region()?;
    let bundle = ModelBundle {
        models: SlicePlane::ALL.into_iter().zip(seg).map(|(p, m)| (Target::segmentation(p), m.clone())).collect(),
    };
    segment_all_views(&case.fat, zr, &bundle, threads)
}

pub fn train_aggregation(samples: &[Sample], tc: &TrainConfig) -> Result<(Model, TrainLog)> {
    let spec = build_view_agg_net(tissue::NUM_CLASSES)?;
    let (weights, log) = train_model(&spec, samples, tc)?;
    Ok((Model::new(spec, weights)?, log))
}

/// Trains the five 2D networks, then the aggregation network on their outputs.
pub fn train_bundle(
    cases: &[Case],
    cfg: &BundleConfig,
    train_cfg: impl Fn(Target) -> TrainConfig,
    threads: usize,
) -> Result<(ModelBundle, BTreeMap<Target, TrainLog>)> {
    let mut models = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for t in Target::ALL.into_iter().filter(|t| *t != Target::ViewAgg) {
        let (m, log) = train_target(t, cases, cfg, &train_cfg(t))?;
        models.insert(t, m);
        logs.insert(t, log);
    }
    let seg = [&models[&Target::SegAxial], &models[&Target::SegCoronal], &models[&Target::SegSagittal]];
    let samples: Vec<Sample> = cases
        .iter()
        .map(|c| aggregation_sample(&training_views(c, seg, threads)?, &c.tissue))
        .collect::<Result<_>>()?;
    let (agg, log) = train_aggregation(&samples, &train_cfg(Target::ViewAgg))?;
    models.insert(Target::ViewAgg, agg);
    logs.insert(Target::ViewAgg, log);
    Ok((ModelBundle { models }, logs))
}
