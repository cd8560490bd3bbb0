//! Parameter storage and its on-disk form: one FSVOL1 container per array
//! plus a JSON manifest mapping layer names to file names.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{LayerKind, NetworkSpec};
use crate::container::{self, DType, Header};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamArray {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Conv { weight: ParamArray, bias: ParamArray },
    BatchNorm { gamma: ParamArray, beta: ParamArray, running_mean: ParamArray, running_var: ParamArray },
}

impl LayerParams {
    /// Named arrays in a fixed order; trainable arrays come first.
    pub fn arrays(&self) -> Vec<(&'static str, &ParamArray)> {
        match self {
            LayerParams::Conv { weight, bias } => vec![("weight", weight), ("bias", bias)],
            LayerParams::BatchNorm { gamma, beta, running_mean, running_var } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut ParamArray> {
        match self {
            LayerParams::Conv { weight, bias } => vec![weight, bias],
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        }
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(self, LayerParams::BatchNorm { .. })
    }

    fn expected_shapes(kind: &LayerKind, in_ch: usize, out_ch: usize) -> Option<Vec<Vec<usize>>> {
        if let Some(k) = kind.kernel() {
            let mut w = vec![out_ch, in_ch];
            w.extend_from_slice(&k);
            return Some(vec![w, vec![out_ch]]);
        }
        (*kind == LayerKind::BatchNorm).then(|| vec![vec![out_ch]; 4])
    }
}

/// Parameters keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    pub layers: BTreeMap<String, LayerParams>,
}

impl WeightStore {
    /// He-normal convolution kernels, zero biases, unit batch-norm scale.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = BTreeMap::new();
        for l in &spec.layers {
            if let Some(k) = l.kind.kernel() {
                let fan_in = l.in_channels * k.iter().product::<usize>();
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
                let mut weight = ParamArray::zeros(vec![l.out_channels, l.in_channels, k[0], k[1], k[2]]);
                for v in &mut weight.data {
                    *v = normal.sample(&mut rng);
                }
                let bias = ParamArray::zeros(vec![l.out_channels]);
                layers.insert(l.name.clone(), LayerParams::Conv { weight, bias });
            } else if l.kind == LayerKind::BatchNorm {
                let c = vec![l.out_channels];
                layers.insert(
                    l.name.clone(),
                    LayerParams::BatchNorm {
                        gamma: ParamArray::filled(c.clone(), 1.0),
                        beta: ParamArray::zeros(c.clone()),
                        running_mean: ParamArray::zeros(c.clone()),
                        running_var: ParamArray::filled(c, 1.0),
                    },
                );
            }
        }
        Self { layers }
    }

    pub fn get(&self, name: &str) -> Result<&LayerParams> {
        self.layers.get(name).ok_or_else(|| Error::MissingArtifact(format!("weights for layer {name}")))
    }

    /// Checks that every parametrized layer has arrays of exactly the declared shapes.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let mut expected = 0;
        for l in &spec.layers {
            let Some(shapes) = LayerParams::expected_shapes(&l.kind, l.in_channels, l.out_channels) else {
                continue;
            };
            expected += 1;
            let p = self.get(&l.name)?;
            let kind_ok = p.is_batch_norm() == (l.kind == LayerKind::BatchNorm);
            let got: Vec<&Vec<usize>> = p.arrays().iter().map(|(_, a)| &a.shape).collect();
            if !kind_ok || got.len() != shapes.len() || got.iter().zip(&shapes).any(|(g, s)| *g != s) {
                return Err(Error::Dimension(format!("weights for {} have shapes {got:?}, expected {shapes:?}", l.name)));
            }
        }
        if expected != self.layers.len() {
            return Err(Error::Dimension("weight store holds layers not in the network".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = WeightManifest { dtype: "f32".into(), layers: BTreeMap::new() };
        for (name, params) in &self.layers {
            let mut files = BTreeMap::new();
            for (array, p) in params.arrays() {
                let file = format!("{name}.{array}.fsv");
                let header = Header { dtype: DType::F32, shape: p.shape.clone(), spacing_mm: None, scheme: None };
                container::write_file(&dir.join(&file), &header, &container::f32_to_bytes(&p.data))?;
                files.insert(array.to_string(), file);
            }
            manifest.layers.insert(name.clone(), files);
        }
        fs::write(dir.join(WEIGHT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(WEIGHT_MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("{} not found", path.display())));
        }
        let manifest: WeightManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let mut layers = BTreeMap::new();
        for (name, files) in manifest.layers {
            let read = |array: &str| -> Result<ParamArray> {
                let file = files
                    .get(array)
                    .ok_or_else(|| Error::Format(format!("layer {name} lacks array {array}")))?;
                let (header, payload) = container::read_file(&dir.join(file))?;
                if header.dtype != DType::F32 {
                    return Err(Error::Format(format!("{file}: weights must be f32")));
                }
                Ok(ParamArray { shape: header.shape, data: container::bytes_to_f32(&payload) })
            };
            let params = if files.contains_key("gamma") {
                LayerParams::BatchNorm {
                    gamma: read("gamma")?,
                    beta: read("beta")?,
                    running_mean: read("running_mean")?,
                    running_var: read("running_var")?,
                }
            } else {
                LayerParams::Conv { weight: read("weight")?, bias: read("bias")? }
            };
            layers.insert(name, params);
        }
        Ok(Self { layers })
    }
}

pub const WEIGHT_MANIFEST: &str = "weights.json";
pub const SPEC_FILE: &str = "network.json";

#[derive(Debug, Serialize, Deserialize)]
struct WeightManifest {
    dtype: String,
    layers: BTreeMap<String, BTreeMap<String, String>>,
}

/// A network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub weights: WeightStore,
}

impl Model {
    pub fn new(spec: NetworkSpec, weights: WeightStore) -> Result<Self> {
        weights.check(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(&self.spec)?)?;
        self.weights.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        if !spec_path.exists() {
            return Err(Error::MissingArtifact(format!("{} not found", spec_path.display())));
        }
        let spec: NetworkSpec = serde_json::from_str(&fs::read_to_string(spec_path)?)?;
        spec.validate()?;
        let weights = WeightStore::load(dir)?;
        Self::new(spec, weights)
    }
}
