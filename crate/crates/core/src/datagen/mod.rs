//! Toy dataset generation and persistence.
//!
//! Each image is a latent scene rendered two ways: five caption
//! realizations from the grammar, and a fixed-size set of region feature
//! vectors (one-hot noun/adjective/relation blocks plus Gaussian noise).

mod checkpoint;
mod grammar;
mod jsonl;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::text::{TokenSeq, Vocabulary, MAX_CAPTION_LEN};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use grammar::{CanonicalScene, Derivation, Entity, Grammar, LatentScene, SceneRelation};
pub use jsonl::{read_jsonl, write_jsonl};

pub const CAPTIONS_PER_IMAGE: usize = 5;
pub const DEFAULT_REGIONS: usize = 8;
pub const REGION_NOISE: f64 = 0.05;

/// One JSONL line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub regions: Vec<Vec<f64>>,
    pub captions: Vec<String>,
}

/// An image as region features plus its annotated captions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionImage {
    pub image_id: u64,
    /// `[R, d_img]`
    pub regions: Tensor,
    pub captions: Vec<TokenSeq>,
}

impl RegionImage {
    pub fn from_record(record: &ImageRecord, vocab: &Vocabulary) -> Result<Self> {
        let invalid = |m: String| Error::InvalidArgument(format!("image {}: {m}", record.image_id));
        if record.captions.len() != CAPTIONS_PER_IMAGE {
            return Err(invalid(format!(
                "expected {CAPTIONS_PER_IMAGE} captions, got {}",
                record.captions.len()
            )));
        }
        if record.regions.is_empty() {
            return Err(invalid("no regions".into()));
        }
        let regions = Tensor::from_rows(&record.regions).map_err(|e| invalid(e.to_string()))?;
        let captions = record
            .captions
            .iter()
            .map(|c| {
                let seq = vocab.tokenize(c);
                if seq.len() > MAX_CAPTION_LEN {
                    Err(Error::CaptionTooLong {
                        len: seq.len(),
                        max: MAX_CAPTION_LEN,
                    })
                } else {
                    Ok(seq)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            image_id: record.image_id,
            regions,
            captions,
        })
    }

    pub fn region_count(&self) -> usize {
        self.regions.rows()
    }

    pub fn region_dim(&self) -> usize {
        self.regions.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<RegionImage>,
}

impl Dataset {
    pub fn from_records(records: &[ImageRecord], vocab: &Vocabulary) -> Result<Self> {
        let images: Vec<RegionImage> = records
            .iter()
            .map(|r| RegionImage::from_record(r, vocab))
            .collect::<Result<_>>()?;
        if let Some(first) = images.first() {
            let shape = first.regions.shape();
            if let Some(bad) = images.iter().find(|im| im.regions.shape() != shape) {
                return Err(Error::InvalidArgument(format!(
                    "image {} has region shape {:?}, expected {shape:?}",
                    bad.image_id,
                    bad.regions.shape()
                )));
            }
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Splits off the last `n` images.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let at = self.images.len().saturating_sub(n);
        let tail = self.images.split_off(at);
        (self, Dataset { images: tail })
    }
}

/// Generation output: serializable records plus the latent ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub records: Vec<ImageRecord>,
    pub scenes: Vec<LatentScene>,
    pub derivations: Vec<Vec<Derivation>>,
}

/// Region feature width for `grammar`: noun, adjective and relation one-hot
/// blocks side by side.
pub fn region_dim(grammar: &Grammar) -> usize {
    grammar.num_nouns() + grammar.num_adjectives() + grammar.num_relations()
}

/// Deterministic in `(n_images, seed)`.
pub fn generate_dataset(grammar: &Grammar, n_images: usize, seed: u64) -> GeneratedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, REGION_NOISE).expect("valid sigma");
    let mut out = GeneratedDataset {
        records: Vec::with_capacity(n_images),
        scenes: Vec::with_capacity(n_images),
        derivations: Vec::with_capacity(n_images),
    };
    for image_id in 0..n_images as u64 {
        let scene = grammar.sample_scene(&mut rng);
        let mut derivations: Vec<Derivation> = Vec::with_capacity(CAPTIONS_PER_IMAGE);
        while derivations.len() < CAPTIONS_PER_IMAGE {
            let d = grammar.realize(&scene, &mut rng);
            if derivations.iter().all(|prev| prev.text != d.text) {
                derivations.push(d);
            }
        }
        let mut regions = region_features(grammar, &scene, DEFAULT_REGIONS);
        // Padding stays exactly zero; noisy padding would fingerprint images.
        let content = scene.entities.len() + scene.relations.len();
        for v in regions[..content].iter_mut().flatten() {
            *v += noise.sample(&mut rng);
        }
        out.records.push(ImageRecord {
            image_id,
            regions,
            captions: derivations.iter().map(|d| d.text.clone()).collect(),
        });
        out.scenes.push(scene);
        out.derivations.push(derivations);
    }
    out
}

/// Noise-free region vectors: one per entity, one per relation, then zero
/// padding up to `count`.
pub fn region_features(grammar: &Grammar, scene: &LatentScene, count: usize) -> Vec<Vec<f64>> {
    let dim = region_dim(grammar);
    let adj_off = grammar.num_nouns();
    let rel_off = adj_off + grammar.num_adjectives();
    let mut regions = Vec::with_capacity(count);
    for entity in &scene.entities {
        let mut v = vec![0.0; dim];
        v[entity.noun] = 1.0;
        for &a in &entity.adjectives {
            v[adj_off + a] = 1.0;
        }
        regions.push(v);
    }
    for rel in &scene.relations {
        let mut v = vec![0.0; dim];
        v[rel_off + rel.relation] = 1.0;
        regions.push(v);
    }
    debug_assert!(regions.len() <= count);
    regions.resize(count, vec![0.0; dim]);
    regions
}

#[cfg(test)]
mod tests;
