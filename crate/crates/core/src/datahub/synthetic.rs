//! A generated annotator world with planted focus regions. Each annotator
//! labels a sample from the mean class signal inside its own patch mask, so
//! a model that recovers the masks can predict every annotator.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::annotations::{save_annotations, AnnotationMatrix};
use super::features::{save_features, FeatureSet};
use crate::error::{Error, Result};
use crate::fsio;
use crate::numkernel::Tensor;

pub const FEATURES_FILE: &str = "features.qmfs";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const MASKS_FILE: &str = "masks.json";
pub const CLEAN_LABELS_FILE: &str = "clean_labels.json";
pub const SPEC_FILE: &str = "world.json";

/// How annotator masks are placed over the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLayout {
    /// Patches split into contiguous regions of `mask_size`; annotator `k`
    /// takes region `perm[k mod n_regions]`, so annotators beyond the region
    /// count share a region with an earlier one.
    Regions,
    /// Independent random subsets; overlaps allowed.
    Random,
    /// Random pairwise-disjoint subsets.
    Disjoint,
}

fn d_samples() -> usize {
    2000
}
fn d_patches() -> usize {
    64
}
fn d_feature_dim() -> usize {
    32
}
fn d_annotators() -> usize {
    12
}
fn d_classes() -> usize {
    4
}
fn d_mask_size() -> usize {
    8
}
fn d_layout() -> MaskLayout {
    MaskLayout::Regions
}
fn d_noise() -> f64 {
    0.1
}
fn d_seed() -> u64 {
    7
}
fn d_strength() -> f64 {
    1.0
}
fn d_feature_noise() -> f64 {
    0.2
}
fn d_position_scale() -> f64 {
    1.0
}
fn d_coherence() -> f64 {
    0.8
}

/// Generator parameters. Defaults describe the standard world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default = "d_samples")]
    pub n_samples: usize,
    #[serde(default = "d_patches")]
    pub n_patches: usize,
    #[serde(default = "d_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d_annotators")]
    pub n_annotators: usize,
    #[serde(default = "d_classes")]
    pub n_classes: usize,
    #[serde(default = "d_mask_size")]
    pub mask_size: usize,
    #[serde(default = "d_layout")]
    pub mask_layout: MaskLayout,
    /// Probability that an annotator's label is replaced by a different
    /// class chosen uniformly.
    #[serde(default = "d_noise")]
    pub noise_level: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Length of the class direction added to each patch.
    #[serde(default = "d_strength")]
    pub signal_strength: f64,
    /// Std of isotropic per-patch noise.
    #[serde(default = "d_feature_noise")]
    pub feature_noise: f64,
    /// Std of the fixed per-patch position code, which is kept orthogonal
    /// to the class directions.
    #[serde(default = "d_position_scale")]
    pub position_scale: f64,
    /// Probability that a patch carries its region's class rather than an
    /// independent random one.
    #[serde(default = "d_coherence")]
    pub region_coherence: f64,
    /// Class sampling weights; uniform when absent.
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl WorldSpec {
    pub fn n_regions(&self) -> usize {
        self.n_patches / self.mask_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 || self.n_patches == 0 || self.n_annotators == 0 {
            return fail("n_samples, n_patches and n_annotators must be positive".into());
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.n_classes > self.feature_dim {
            return fail(format!(
                "{} class directions do not fit in feature_dim {}",
                self.n_classes, self.feature_dim
            ));
        }
        if self.mask_size == 0 || self.mask_size > self.n_patches {
            return fail(format!("mask_size {} must be in 1..={}", self.mask_size, self.n_patches));
        }
        if self.mask_layout == MaskLayout::Disjoint && self.mask_size * self.n_annotators > self.n_patches {
            return fail(format!(
                "{} disjoint masks of {} do not fit in {} patches",
                self.n_annotators, self.mask_size, self.n_patches
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) || !(0.0..=1.0).contains(&self.region_coherence) {
            return fail("noise_level and region_coherence must lie in [0, 1]".into());
        }
        if !(self.signal_strength >= 0.0 && self.feature_noise >= 0.0 && self.position_scale >= 0.0) {
            return fail("signal_strength, feature_noise and position_scale must be >= 0".into());
        }
        if let Some(p) = &self.class_prior {
            if p.len() != self.n_classes || p.iter().any(|w| !(*w >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                return fail(format!("class_prior needs {} non-negative weights", self.n_classes));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub features: FeatureSet,
    pub annotations: AnnotationMatrix,
    /// Sorted patch indices per annotator.
    pub masks: Vec<Vec<usize>>,
    /// Noise-free label per sample and annotator.
    pub clean_labels: Vec<Vec<usize>>,
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

pub fn sample_id(i: usize, n: usize) -> String {
    format!("s{i:0w$}", w = id_width(n))
}

pub fn annotator_id(k: usize) -> String {
    format!("A{}", k + 1)
}

/// Zero-padded so lexicographic order matches the class index.
pub fn class_name(c: usize, n: usize) -> String {
    format!("c{c:0w$}", w = id_width(n))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Orthonormal class directions by Gram-Schmidt on Gaussian vectors.
fn class_directions(rng: &mut ChaCha8Rng, c: usize, f: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(c);
    while dirs.len() < c {
        let mut v: Vec<f64> = (0..f).map(|_| gaussian(rng)).collect();
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            dirs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    dirs
}

fn make_masks(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (p, m, a) = (spec.n_patches, spec.mask_size, spec.n_annotators);
    let mut masks: Vec<Vec<usize>> = match spec.mask_layout {
        MaskLayout::Regions => {
            let mut regions: Vec<usize> = (0..spec.n_regions()).collect();
            regions.shuffle(rng);
            (0..a)
                .map(|k| {
                    let r = regions[k % regions.len()];
                    (r * m..(r + 1) * m).collect()
                })
                .collect()
        }
        MaskLayout::Random => (0..a).map(|_| sample_indices(rng, p, m).into_vec()).collect(),
        MaskLayout::Disjoint => {
            let mut all: Vec<usize> = (0..p).collect();
            all.shuffle(rng);
            all.chunks(m).take(a).map(<[usize]>::to_vec).collect()
        }
    };
    masks.iter_mut().for_each(|mk| mk.sort_unstable());
    masks
}

pub fn gen_synthetic_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, p, f, a, c) = (spec.n_samples, spec.n_patches, spec.feature_dim, spec.n_annotators, spec.n_classes);

    let dirs = class_directions(&mut rng, c, f);
    let positions: Vec<Vec<f64>> = (0..p)
        .map(|_| {
            let mut v: Vec<f64> = (0..f).map(|_| spec.position_scale * gaussian(&mut rng)).collect();
            for d in &dirs {
                let dot: f64 = v.iter().zip(d).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(d).for_each(|(x, y)| *x -= dot * y);
            }
            v
        })
        .collect();
    let masks = make_masks(spec, &mut rng);
    let prior = match &spec.class_prior {
        Some(w) => WeightedIndex::new(w).map_err(|e| Error::Config(format!("class_prior: {e}")))?,
        None => WeightedIndex::new(vec![1.0; c]).expect("uniform weights"),
    };
    let n_regions = spec.n_regions();

    let mut ids = Vec::with_capacity(n);
    let mut tensors = Vec::with_capacity(n);
    let mut clean_labels = Vec::with_capacity(n);
    let mut annotations = AnnotationMatrix::new(
        (0..n).map(|i| sample_id(i, n)).collect(),
        (0..a).map(annotator_id).collect(),
        (0..c).map(|k| class_name(k, c)).collect(),
    )?;
    for i in 0..n {
        let region_class: Vec<usize> = (0..n_regions).map(|_| prior.sample(&mut rng)).collect();
        let mut content = vec![0.0f64; p * f];
        for patch in 0..p {
            let region = patch / spec.mask_size;
            let class = if region < n_regions && rng.random::<f64>() < spec.region_coherence {
                region_class[region]
            } else {
                prior.sample(&mut rng)
            };
            let row = &mut content[patch * f..(patch + 1) * f];
            for (j, v) in row.iter_mut().enumerate() {
                *v = spec.signal_strength * dirs[class][j] + spec.feature_noise * gaussian(&mut rng);
            }
        }
        let data: Vec<f32> = (0..p * f)
            .map(|ix| (content[ix] + positions[ix / f][ix % f]) as f32)
            .collect();
        ids.push(sample_id(i, n));
        tensors.push(Tensor::new(&[p, f], data)?);

        let clean: Vec<usize> = masks
            .iter()
            .map(|mask| {
                let mut mean = vec![0.0; f];
                for &patch in mask {
                    mean.iter_mut().zip(&content[patch * f..(patch + 1) * f]).for_each(|(m, v)| *m += v);
                }
                let scores: Vec<f64> = dirs.iter().map(|d| d.iter().zip(&mean).map(|(x, y)| x * y).sum()).collect();
                crate::model::forward::argmax(&scores)
            })
            .collect();
        for (k, &y) in clean.iter().enumerate() {
            let label = if rng.random::<f64>() < spec.noise_level {
                (y + rng.random_range(1..c)) % c
            } else {
                y
            };
            annotations.insert(i, k, label)?;
        }
        clean_labels.push(clean);
    }
    Ok(SyntheticWorld {
        spec: spec.clone(),
        features: FeatureSet::new(ids, tensors)?,
        annotations,
        masks,
        clean_labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasksDoc {
    pub n_patches: usize,
    pub annotators: Vec<String>,
    pub masks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanLabelsDoc {
    pub sample_ids: Vec<String>,
    pub labels: Vec<Vec<usize>>,
}

impl SyntheticWorld {
    pub fn masks_doc(&self) -> MasksDoc {
        MasksDoc {
            n_patches: self.spec.n_patches,
            annotators: self.annotations.annotator_ids().to_vec(),
            masks: self.masks.clone(),
        }
    }

    /// Writes features, annotations, masks, clean labels and the spec.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_features(&self.features, &dir.join(FEATURES_FILE))?;
        save_annotations(&self.annotations, &dir.join(ANNOTATIONS_FILE))?;
        fsio::write_json(&dir.join(MASKS_FILE), &self.masks_doc())?;
        fsio::write_json(
            &dir.join(CLEAN_LABELS_FILE),
            &CleanLabelsDoc {
                sample_ids: self.features.ids.clone(),
                labels: self.clean_labels.clone(),
            },
        )?;
        fsio::write_json(&dir.join(SPEC_FILE), &self.spec)
    }

    /// Clean-label annotation matrix with the same ids and vocabulary.
    pub fn clean_annotations(&self) -> AnnotationMatrix {
        let mut m = AnnotationMatrix::new(
            self.annotations.sample_ids().to_vec(),
            self.annotations.annotator_ids().to_vec(),
            self.annotations.vocabulary().to_vec(),
        )
        .expect("ids are unique");
        for (i, row) in self.clean_labels.iter().enumerate() {
            for (k, &y) in row.iter().enumerate() {
                m.insert(i, k, y).expect("fresh cell");
            }
        }
        m
    }
}

pub fn load_masks(path: &Path) -> Result<MasksDoc> {
    fsio::read_json(path)
}

pub fn load_world_spec(path: &Path) -> Result<WorldSpec> {
    let spec: WorldSpec = fsio::read_json(path)?;
    spec.validate()?;
    Ok(spec)
}
