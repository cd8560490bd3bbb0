//! Synthetic abdominal phantoms with exact tissue and region ground truth.
//!
//! A phantom is described parametrically by an [`Anatomy`] (body ellipse per
//! slice, subcutaneous shell, spine, rib and pelvic rings, lungs, iliac bones,
//! pelvic cavity and visceral blobs) and then rasterized and rendered into a fat-like image.
//! Re-rasterizing the same anatomy with an integer shift gives the test-retest counterpart.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    region, tissue, write_volume, LabelMap, LabelScheme, Shape3, Spacing3, Volume3D, ACQUISITION_SPACING_MM,
};

/// Gap between the body outline and the canvas edge, in voxels.
const BODY_MARGIN: f64 = 3.0;
/// Visceral fat stays inside this fraction of the inner (muscle) ellipse.
const VAT_MAX_RADIUS: f64 = 0.85;
/// Bone ring under the shell outside the abdomen, as a fraction of the inner ellipse.
const RING_RADII: (f64, f64) = (0.87, 0.97);
const MIN_RADIUS: f64 = 3.0;
const RADIUS_WOBBLE: f64 = 0.06;

/// Mean rendered intensity per [`Material`].
const MATERIAL_MEAN: [f64; 6] = [0.0, 0.9, 0.6, 0.2, 0.05, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Material {
    Background = 0,
    Fat = 1,
    Marrow = 2,
    Soft = 3,
    Air = 4,
    Fluid = 5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub shape: Shape3,
    pub spacing_mm: Spacing3,
    /// Subcutaneous shell thickness in voxels.
    pub sat_thickness_range: (f64, f64),
    pub vat_blob_count_range: (usize, usize),
    /// In-plane blob radius in voxels.
    pub vat_blob_radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    /// `(thoracic, abdominal, pelvic)` share of the slices.
    pub region_fractions: (f64, f64, f64),
    /// Body half-axes as a fraction of the available half-extent.
    pub body_scale_range: (f64, f64),
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [32, 96, 112],
            spacing_mm: ACQUISITION_SPACING_MM,
            sat_thickness_range: (2.0, 7.0),
            vat_blob_count_range: (4, 9),
            vat_blob_radius_range: (3.0, 7.0),
            noise_sigma: 0.03,
            bias_amplitude: 0.1,
            region_fractions: (0.3, 0.4, 0.3),
            body_scale_range: (0.75, 0.97),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let ranges = [
            ("sat_thickness_range", self.sat_thickness_range),
            ("vat_blob_radius_range", self.vat_blob_radius_range),
            ("body_scale_range", self.body_scale_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} ({lo}, {hi}) must satisfy min <= max"));
            }
        }
        if self.vat_blob_count_range.0 > self.vat_blob_count_range.1 {
            return bad("vat_blob_count_range must satisfy min <= max".into());
        }
        if self.sat_thickness_range.0 < 1.0 {
            return bad("SAT thickness must be at least one voxel".into());
        }
        if self.vat_blob_radius_range.0 <= 0.0 {
            return bad("VAT blob radius must be positive".into());
        }
        if !(self.body_scale_range.0 > 0.0 && self.body_scale_range.1 <= 1.0) {
            return bad("body_scale_range must lie in (0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return bad("bias_amplitude must lie in [0, 1)".into());
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad("spacing must be positive".into());
        }
        let (t, a, p) = self.region_fractions;
        if t <= 0.0 || a <= 0.0 || p <= 0.0 || (t + a + p - 1.0).abs() > 1e-9 {
            return bad(format!("region_fractions {:?} must be positive and sum to 1", self.region_fractions));
        }
        let [d, h, w] = self.shape;
        let (b1, b2) = region_bounds(d, self.region_fractions);
        if d < 5 || !(1 < b1 && b1 < b2 && b2 < d - 1) {
            return bad(format!("{d} slices cannot host three regions"));
        }
        for extent in [h, w] {
            let outer = self.body_scale_range.0 * (extent as f64 / 2.0 - BODY_MARGIN) * (1.0 - 2.0 * RADIUS_WOBBLE);
            let inner = outer - self.sat_thickness_range.1;
            if outer < MIN_RADIUS || inner < MIN_RADIUS {
                return bad(format!(
                    "shape {:?} too small: body radius {outer:.2}, interior radius {inner:.2} voxels",
                    self.shape
                ));
            }
        }
        Ok(())
    }
}

/// First abdominal slice and first pelvic slice. The first and last slice
/// stay empty so a one-slice retest shift never clips the body.
fn region_bounds(d: usize, fractions: (f64, f64, f64)) -> (usize, usize) {
    let body = d.saturating_sub(2) as f64;
    let b1 = 1 + (fractions.0 * body).round() as usize;
    let b2 = 1 + ((fractions.0 + fractions.1) * body).round() as usize;
    (b1, b2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radius: f64,
    pub radius_z: f64,
}

/// Parametric description of one synthetic body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub shape: Shape3,
    pub spacing_mm: Spacing3,
    /// Outer body half-axes per slice, `(ry, rx)`.
    pub radii: Vec<(f64, f64)>,
    pub sat_thickness: f64,
    pub abdominal_start: usize,
    pub pelvic_start: usize,
    pub blobs: Vec<Blob>,
}

impl Anatomy {
    /// Draws an anatomy from a validated config.
    pub fn sample(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let [d, h, w] = cfg.shape;
        let scale = uniform(rng, cfg.body_scale_range);
        let aspect = uniform(rng, (0.9, 1.0));
        let base_y = scale * aspect * (h as f64 / 2.0 - BODY_MARGIN);
        let base_x = scale * (w as f64 / 2.0 - BODY_MARGIN);
        let (fy, fx) = (uniform(rng, (0.5, 1.5)), uniform(rng, (0.5, 1.5)));
        let (py, px) = (uniform(rng, (0.0, 2.0 * PI)), uniform(rng, (0.0, 2.0 * PI)));
        let wobble = |base: f64, f: f64, p: f64, z: usize| {
            base * (1.0 - RADIUS_WOBBLE + RADIUS_WOBBLE * (2.0 * PI * f * z as f64 / d as f64 + p).sin())
        };
        let radii: Vec<(f64, f64)> = (0..d).map(|z| (wobble(base_y, fy, py, z), wobble(base_x, fx, px, z))).collect();
        let sat_thickness = uniform(rng, cfg.sat_thickness_range);
        let (abdominal_start, pelvic_start) = region_bounds(d, cfg.region_fractions);

        let n_blobs = rng.random_range(cfg.vat_blob_count_range.0..=cfg.vat_blob_count_range.1);
        let mut blobs = Vec::with_capacity(n_blobs);
        for _ in 0..n_blobs {
            let z = rng.random_range(abdominal_start..pelvic_start);
            let (ry, rx) = radii[z];
            let (iy, ix) = (ry - sat_thickness, rx - sat_thickness);
            let (u, v) = loop {
                let u: f64 = rng.random_range(-0.6..=0.6);
                let v: f64 = rng.random_range(-0.6..=0.6);
                if u * u + v * v <= 0.36 {
                    break (u, v);
                }
            };
            let radius = uniform(rng, cfg.vat_blob_radius_range);
            let radius_z = (radius * cfg.spacing_mm[1] / cfg.spacing_mm[0]).max(1.0);
            let cz = z as f64 + 0.5;
            blobs.push(Blob {
                center: [cz, h as f64 / 2.0 + u * iy, w as f64 / 2.0 + v * ix],
                radius,
                radius_z,
            });
        }
        Self {
            shape: cfg.shape,
            spacing_mm: cfg.spacing_mm,
            radii,
            sat_thickness,
            abdominal_start,
            pelvic_start,
            blobs,
        }
    }

    fn region_of(&self, z: usize) -> u8 {
        if z < self.abdominal_start {
            region::THORACIC
        } else if z < self.pelvic_start {
            region::ABDOMINAL
        } else {
            region::PELVIC
        }
    }

    /// Tissue label and material at voxel `(z, y, x)` of the unshifted body.
    fn classify(&self, z: usize, y: usize, x: usize) -> (u8, Material) {
        let [d, h, w] = self.shape;
        if z == 0 || z + 1 == d {
            return (tissue::BACKGROUND, Material::Background);
        }
        let (ry, rx) = self.radii[z];
        let py = y as f64 + 0.5 - h as f64 / 2.0;
        let px = x as f64 + 0.5 - w as f64 / 2.0;
        if (py / ry).powi(2) + (px / rx).powi(2) > 1.0 {
            return (tissue::BACKGROUND, Material::Background);
        }
        let (iy, ix) = (ry - self.sat_thickness, rx - self.sat_thickness);
        let (u, v) = (py / iy, px / ix);
        if u * u + v * v > 1.0 {
            return (tissue::SAT, Material::Fat);
        }
        let spine_r = 0.17 * iy.min(ix);
        if (py - 0.62 * iy).powi(2) + px.powi(2) <= spine_r * spine_r {
            return (tissue::BONE, Material::Marrow);
        }
        let reg = self.region_of(z);
        let r2 = u * u + v * v;
        if reg != region::ABDOMINAL && (RING_RADII.0.powi(2)..=RING_RADII.1.powi(2)).contains(&r2) {
            return (tissue::BONE, Material::Marrow);
        }
        if reg == region::PELVIC && ((u - 0.2) / 0.3).powi(2) + ((v.abs() - 0.55) / 0.22).powi(2) <= 1.0 {
            return (tissue::BONE, Material::Marrow);
        }
        // lungs above, fluid-filled pelvic cavity below; both fill most of the interior
        if reg != region::ABDOMINAL && (u / 0.75).powi(2) + (v / 0.8).powi(2) <= 1.0 {
            let m = if reg == region::THORACIC { Material::Air } else { Material::Fluid };
            return (tissue::OTHER, m);
        }
        if u * u + v * v <= VAT_MAX_RADIUS * VAT_MAX_RADIUS {
            let (cz, cy, cx) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
            let inside = self.blobs.iter().any(|b| {
                ((cz - b.center[0]) / b.radius_z).powi(2)
                    + ((cy - b.center[1]) / b.radius).powi(2)
                    + ((cx - b.center[2]) / b.radius).powi(2)
                    <= 1.0
            });
            if inside {
                return (tissue::VAT, Material::Fat);
            }
        }
        (tissue::OTHER, Material::Soft)
    }

    /// Tissue labels, region labels and materials, shifted by `shift = (dz, dy, dx)`.
    pub fn rasterize(&self, shift: [i32; 3]) -> (Vec<u8>, Vec<u8>, Vec<Material>) {
        let [d, h, w] = self.shape;
        let n = d * h * w;
        let (mut tis, mut reg, mut mat) = (vec![0u8; n], vec![0u8; n], vec![Material::Background; n]);
        let src = |i: usize, s: i32, len: usize| {
            let j = i as i64 - s as i64;
            (0..len as i64).contains(&j).then_some(j as usize)
        };
        for z in 0..d {
            let Some(sz) = src(z, shift[0], d) else { continue };
            for y in 0..h {
                let Some(sy) = src(y, shift[1], h) else { continue };
                for x in 0..w {
                    let Some(sx) = src(x, shift[2], w) else { continue };
                    let (t, m) = self.classify(sz, sy, sx);
                    let i = (z * h + y) * w + x;
                    tis[i] = t;
                    mat[i] = m;
                    if t != tissue::BACKGROUND {
                        reg[i] = self.region_of(sz);
                    }
                }
            }
        }
        (tis, reg, mat)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Renders materials into a fat image with a smooth multiplicative bias and Gaussian noise.
pub fn render(shape: Shape3, materials: &[Material], noise_sigma: f64, bias_amplitude: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = shape;
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let freq = [0.4, 0.6, 0.5];
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("sigma is finite");
    let mut out = Vec::with_capacity(materials.len());
    for z in 0..d {
        let bz = (2.0 * PI * freq[0] * z as f64 / d as f64 + phase[0]).sin();
        for y in 0..h {
            let by = (2.0 * PI * freq[1] * y as f64 / h as f64 + phase[1]).sin();
            for x in 0..w {
                let bx = (2.0 * PI * freq[2] * x as f64 / w as f64 + phase[2]).sin();
                let bias = 1.0 + bias_amplitude * (bz + by + bx) / 3.0;
                let m = materials[(z * h + y) * w + x];
                let mut v = MATERIAL_MEAN[m as usize] * bias;
                if noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                out.push(v as f32);
            }
        }
    }
    out
}

/// One synthetic subject.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub config: PhantomConfig,
    pub anatomy: Anatomy,
    pub fat_image: Volume3D,
    pub tissue_labels: LabelMap,
    pub region_labels: LabelMap,
    /// Whole-volume tissue volumes in mL keyed by tissue label.
    pub true_volumes_ml: BTreeMap<u8, f64>,
}

impl PhantomCase {
    fn assemble(config: PhantomConfig, anatomy: Anatomy, shift: [i32; 3], render_seed: u64) -> Result<Self> {
        let (tis, reg, mat) = anatomy.rasterize(shift);
        let image = render(config.shape, &mat, config.noise_sigma, config.bias_amplitude, render_seed);
        let fat_image = Volume3D::new(config.shape, config.spacing_mm, image)?;
        let tissue_labels = LabelMap::new(config.shape, config.spacing_mm, LabelScheme::Tissue, tis)?;
        let region_labels = LabelMap::new(config.shape, config.spacing_mm, LabelScheme::Region, reg)?;
        let true_volumes_ml = volumes_ml(&tissue_labels);
        Ok(Self { config, anatomy, fat_image, tissue_labels, region_labels, true_volumes_ml })
    }

    /// Inclusive abdominal slice range of the ground truth, if any slice is abdominal.
    pub fn abdominal_range(&self) -> Option<(usize, usize)> {
        abdominal_range(&self.region_labels)
    }

    /// Tissue volumes restricted to the ground-truth abdominal slices.
    pub fn abdominal_volumes_ml(&self) -> BTreeMap<u8, f64> {
        let mut counts = [0usize; tissue::NUM_CLASSES];
        if let Some((lo, hi)) = self.abdominal_range() {
            let [_, h, w] = self.tissue_labels.shape();
            for &v in &self.tissue_labels.data()[lo * h * w..(hi + 1) * h * w] {
                counts[v as usize] += 1;
            }
        }
        let vox = self.tissue_labels.voxel_volume_mm3();
        (0..tissue::NUM_CLASSES as u8).map(|l| (l, counts[l as usize] as f64 * vox / 1000.0)).collect()
    }
}

/// Inclusive range of slices containing any abdominal label.
pub fn abdominal_range(regions: &LabelMap) -> Option<(usize, usize)> {
    let [d, h, w] = regions.shape();
    let has = |z: usize| regions.data()[z * h * w..(z + 1) * h * w].contains(&region::ABDOMINAL);
    let lo = (0..d).find(|&z| has(z))?;
    let hi = (0..d).rev().find(|&z| has(z))?;
    Some((lo, hi))
}

/// Per-label volumes in mL by voxel counting.
pub fn volumes_ml(labels: &LabelMap) -> BTreeMap<u8, f64> {
    let counts = labels.counts();
    let vox = labels.voxel_volume_mm3();
    counts.iter().enumerate().map(|(l, &c)| (l as u8, c as f64 * vox / 1000.0)).collect()
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomCase> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let anatomy = Anatomy::sample(cfg, &mut rng);
    let render_seed: u64 = rng.random();
    PhantomCase::assemble(cfg.clone(), anatomy, [0, 0, 0], render_seed)
}

/// Number of body-habitus strata used when spreading a cohort.
const COHORT_STRATA: usize = 5;

/// Config used for case `index` of a cohort: seed `seed + index`, with SAT
/// thickness and body size confined to stratum `index % 5` of their ranges.
pub fn cohort_case_config(base: &PhantomConfig, index: usize, seed: u64) -> PhantomConfig {
    let stratum = (index % COHORT_STRATA) as f64;
    let k = COHORT_STRATA as f64;
    let sub = |(lo, hi): (f64, f64)| (lo + (hi - lo) * stratum / k, lo + (hi - lo) * (stratum + 1.0) / k);
    PhantomConfig {
        seed: seed.wrapping_add(index as u64),
        sat_thickness_range: sub(base.sat_thickness_range),
        body_scale_range: sub(base.body_scale_range),
        ..base.clone()
    }
}

pub fn generate_cohort(base: &PhantomConfig, n: usize, seed: u64) -> Result<Vec<PhantomCase>> {
    if n == 0 {
        return Err(Error::Argument("cohort size must be at least 1".into()));
    }
    base.validate()?;
    (0..n).map(|i| generate_phantom(&cohort_case_config(base, i, seed))).collect()
}

/// Same anatomy, shifted by `shift = (dz, dy, dx)` voxels and re-rendered with fresh noise and bias.
pub fn perturb_retest_with_shift(case: &PhantomCase, shift: [i32; 3], render_seed: u64) -> Result<PhantomCase> {
    PhantomCase::assemble(case.config.clone(), case.anatomy.clone(), shift, render_seed)
}

/// Simulated repositioning: up to 2 voxels in-plane and 1 slice in z.
pub fn perturb_retest(case: &PhantomCase, seed: u64) -> Result<PhantomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = retest_shift(&mut rng);
    let render_seed: u64 = rng.random();
    perturb_retest_with_shift(case, shift, render_seed)
}

fn retest_shift(rng: &mut ChaCha8Rng) -> [i32; 3] {
    [rng.random_range(-1..=1), rng.random_range(-2..=2), rng.random_range(-2..=2)]
}

/// The shift [`perturb_retest`] draws for `seed`.
pub fn retest_shift_for_seed(seed: u64) -> [i32; 3] {
    retest_shift(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// One row of the cohort manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub fat_path: PathBuf,
    pub tissue_path: PathBuf,
    pub region_path: PathBuf,
    pub sat_ml: f64,
    pub vat_ml: f64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes all volumes into `dir` plus `manifest.csv`; paths in the manifest are relative to `dir`.
pub fn write_cohort(dir: &Path, cases: &[PhantomCase]) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let id = format!("case_{i:03}");
        let entry = ManifestEntry {
            fat_path: format!("{id}_fat.fsv").into(),
            tissue_path: format!("{id}_tissue.fsv").into(),
            region_path: format!("{id}_region.fsv").into(),
            sat_ml: case.true_volumes_ml[&tissue::SAT],
            vat_ml: case.true_volumes_ml[&tissue::VAT],
            case_id: id,
        };
        write_volume(&case.fat_image, &dir.join(&entry.fat_path))?;
        write_volume(&case.tissue_labels, &dir.join(&entry.tissue_path))?;
        write_volume(&case.region_labels, &dir.join(&entry.region_path))?;
        entries.push(entry);
    }
    write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for e in entries {
        w.serialize(e).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let entries = r.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>().map_err(csv_err)?;
    Ok(entries)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("manifest: {other:?}")),
    }
}
