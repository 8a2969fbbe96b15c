//! Label embeddings and the linear codec between the ambient embedding space
//! (dimension `D`) and the low-dimensional feature space (dimension `d`).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scene::{Level, Scene, SemanticLabel};

/// Unit-norm ambient embedding per label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDictionary {
    pub dim: usize,
    pub vectors: BTreeMap<SemanticLabel, Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&v);
    (n > 1e-12).then(|| v.into_iter().map(|x| x / n).collect())
}

fn mean_unit<'a>(vectors: impl Iterator<Item = &'a Vec<f64>>, dim: usize) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    unit(sum)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0)
}

impl LabelDictionary {
    pub fn new(dim: usize, vectors: BTreeMap<SemanticLabel, Vec<f64>>) -> Result<Self> {
        for (label, v) in &vectors {
            if v.len() != dim {
                return Err(Error::Embed(format!("{label:?} has {} entries, expected {dim}", v.len())));
            }
            if (norm(v) - 1.0).abs() > 1e-6 {
                return Err(Error::Embed(format!("{label:?} is not unit norm")));
            }
        }
        Ok(LabelDictionary { dim, vectors })
    }

    pub fn get(&self, label: SemanticLabel) -> Result<&[f64]> {
        self.vectors
            .get(&label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Embed(format!("unknown label {label:?}")))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Leaves get seeded random unit vectors; each part is the normalized mean of
/// its subparts and each whole the normalized mean of its parts.
pub fn build_dictionary(scene: &Scene, dim: usize, seed: u64) -> Result<LabelDictionary> {
    if dim < 2 {
        return Err(Error::Embed(format!("embedding dimension {dim} must be at least 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = BTreeMap::new();
    for id in scene.labels_at(Level::Subpart) {
        let v = loop {
            let draw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Some(v) = unit(draw) {
                break v;
            }
        };
        vectors.insert(SemanticLabel { level: Level::Subpart, id }, v);
    }
    for (level, child) in [(Level::Part, Level::Subpart), (Level::Whole, Level::Part)] {
        for id in scene.labels_at(level) {
            let label = SemanticLabel { level, id };
            let children: Vec<SemanticLabel> = scene
                .labels_at(child)
                .into_iter()
                .map(|c| SemanticLabel { level: child, id: c })
                .filter(|c| scene.parent_of(*c) == Some(label))
                .collect();
            let v = mean_unit(children.iter().map(|c| &vectors[c]), dim)
                .ok_or_else(|| Error::Embed(format!("children of {label:?} cancel out")))?;
            vectors.insert(label, v);
        }
    }
    LabelDictionary::new(dim, vectors)
}

/// Linear map pair between the ambient space and the feature space.
///
/// `encode` is stored `D × d` row-major and maps `v ↦ encodeᵀ v`; `decode`
/// is stored `d × D` row-major and maps `z ↦ decodeᵀ z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticCodec {
    pub ambient_dim: usize,
    pub latent_dim: usize,
    pub encode: Vec<f64>,
    pub decode: Vec<f64>,
    /// Eigenvalues of the dictionary second-moment matrix, descending.
    pub spectrum: Vec<f64>,
}

impl SemanticCodec {
    pub fn from_matrices(ambient_dim: usize, latent_dim: usize, encode: Vec<f64>, decode: Vec<f64>) -> Result<Self> {
        if encode.len() != ambient_dim * latent_dim || decode.len() != ambient_dim * latent_dim {
            return Err(Error::Embed(format!(
                "codec matrices do not match D={ambient_dim}, d={latent_dim}"
            )));
        }
        Ok(SemanticCodec {
            ambient_dim,
            latent_dim,
            encode,
            decode,
            spectrum: Vec::new(),
        })
    }

    pub fn encode(&self, ambient: &[f64]) -> Vec<f64> {
        let (big, small) = (self.ambient_dim, self.latent_dim);
        (0..small)
            .map(|k| (0..big).map(|i| self.encode[i * small + k] * ambient[i]).sum())
            .collect()
    }

    pub fn decode(&self, latent: &[f64]) -> Vec<f64> {
        let big = self.ambient_dim;
        let mut out = vec![0.0; big];
        for (k, z) in latent.iter().enumerate() {
            for (i, o) in out.iter_mut().enumerate() {
                *o += z * self.decode[k * big + i];
            }
        }
        out
    }

    /// Total squared reconstruction error over the dictionary.
    pub fn reconstruction_error(&self, dict: &LabelDictionary) -> f64 {
        dict.vectors
            .values()
            .map(|v| {
                let r = self.decode(&self.encode(v));
                v.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum()
    }
}

/// Principal-subspace codec: projects onto the top-`d` eigenvectors of the
/// (uncentered) second-moment matrix of the dictionary vectors.
pub fn fit_codec(dict: &LabelDictionary, latent_dim: usize) -> Result<SemanticCodec> {
    let big = dict.dim;
    if latent_dim == 0 || latent_dim > big {
        return Err(Error::Embed(format!("latent dimension {latent_dim} must be in 1..={big}")));
    }
    if dict.is_empty() {
        return Err(Error::Embed("cannot fit a codec to an empty dictionary".into()));
    }
    let mut moment = DMatrix::<f64>::zeros(big, big);
    for v in dict.vectors.values() {
        let v = DVector::from_column_slice(v);
        moment += &v * v.transpose();
    }
    let eigen = SymmetricEigen::new(moment);
    let mut order: Vec<usize> = (0..big).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]).then(a.cmp(&b)));
    let spectrum: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i].max(0.0)).collect();

    let mut encode = vec![0.0; big * latent_dim];
    let mut decode = vec![0.0; latent_dim * big];
    for (k, &col) in order.iter().take(latent_dim).enumerate() {
        let mut u: Vec<f64> = eigen.eigenvectors.column(col).iter().copied().collect();
        // sign convention: largest-magnitude entry positive
        let pivot = u
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if u[pivot] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..big {
            encode[i * latent_dim + k] = u[i];
            decode[k * big + i] = u[i];
        }
    }
    Ok(SemanticCodec {
        ambient_dim: big,
        latent_dim,
        encode,
        decode,
        spectrum,
    })
}

/// Ambient embedding of a label and its latent code.
pub fn encode_query(dict: &LabelDictionary, codec: &SemanticCodec, label: SemanticLabel) -> Result<(Vec<f64>, Vec<f64>)> {
    let ambient = dict.get(label)?.to_vec();
    if ambient.len() != codec.ambient_dim {
        return Err(Error::Embed(format!(
            "dictionary dimension {} does not match codec D={}",
            ambient.len(),
            codec.ambient_dim
        )));
    }
    Ok((codec.encode(&ambient), ambient))
}

/// Maps a d-dimensional feature to the ambient embedding space.
pub trait Decode {
    fn latent_dim(&self) -> usize;
    fn ambient_dim(&self) -> usize;
    fn decode_feature(&self, feature: &[f64]) -> Vec<f64>;
}

impl Decode for SemanticCodec {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    fn decode_feature(&self, feature: &[f64]) -> Vec<f64> {
        self.decode(feature)
    }
}

/// Scene-specific decoder: each label owns a prototype (the mean trained
/// feature of its masks). A feature is softly assigned to the prototypes by
/// a softmax over cosine similarities and the assignment mixes the labels'
/// ambient embeddings. Cosine keeps the assignment independent of pixel
/// coverage, which scales rendered features.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeDecoder {
    pub latent_dim: usize,
    pub labels: Vec<SemanticLabel>,
    /// Mean feature of each label's samples.
    pub prototypes: Vec<Vec<f64>>,
    /// Ambient embedding of each label.
    pub ambients: Vec<Vec<f64>>,
    pub temperature: f64,
}

pub const PROTOTYPE_TEMPERATURE: f64 = 0.1;

impl PrototypeDecoder {
    /// Builds prototypes from `(label, feature)` samples, averaging the
    /// samples of each label.
    pub fn fit(dict: &LabelDictionary, samples: &[(SemanticLabel, Vec<f64>)], temperature: f64) -> Result<Self> {
        let Some((_, first)) = samples.first() else {
            return Err(Error::Embed("no prototype samples".into()));
        };
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Embed(format!("temperature {temperature} must be positive")));
        }
        let d = first.len();
        let mut sums: BTreeMap<SemanticLabel, (Vec<f64>, usize)> = BTreeMap::new();
        for (label, feature) in samples {
            if feature.len() != d {
                return Err(Error::Embed("prototype samples disagree on dimension".into()));
            }
            let slot = sums.entry(*label).or_insert_with(|| (vec![0.0; d], 0));
            for (a, b) in slot.0.iter_mut().zip(feature) {
                *a += b;
            }
            slot.1 += 1;
        }
        let mut labels = Vec::new();
        let mut prototypes = Vec::new();
        let mut ambients = Vec::new();
        for (label, (sum, n)) in sums {
            ambients.push(dict.get(label)?.to_vec());
            labels.push(label);
            prototypes.push(sum.into_iter().map(|v| v / n as f64).collect());
        }
        Ok(PrototypeDecoder {
            latent_dim: d,
            labels,
            prototypes,
            ambients,
            temperature,
        })
    }

    /// Softmax of `cos(feature, prototype) / temperature`.
    pub fn assignment(&self, feature: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self.prototypes.iter().map(|c| cosine(feature, c) / self.temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

impl Decode for PrototypeDecoder {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn ambient_dim(&self) -> usize {
        self.ambients.first().map_or(0, Vec::len)
    }

    fn decode_feature(&self, feature: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ambient_dim()];
        for (w, e) in self.assignment(feature).iter().zip(&self.ambients) {
            for (a, b) in out.iter_mut().zip(e) {
                *a += w * b;
            }
        }
        out
    }
}
