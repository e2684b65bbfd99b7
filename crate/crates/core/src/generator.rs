//! Synthetic negative sentences: mask key spans of a positive caption,
//! refill them by sampling the image-conditioned MLM head, drop refills
//! that are probably still correct descriptions, and keep the hardest few.

use std::collections::{BTreeSet, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::RegionImage;
use crate::error::{Error, Result};
use crate::model::MatchModel;
use crate::nn::{softmax_t, Tensor};
use crate::scenegraph::{MaskCandidateSet, Span};
use crate::text::{TokenId, TokenSeq, Vocabulary, MASK_ID, RESERVED};

/// How mask positions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Masking {
    /// Whole object, attribute and relation spans from the scene graph.
    #[default]
    SceneGraph,
    /// Individual tokens chosen uniformly, ignoring structure.
    Word,
}

impl std::str::FromStr for Masking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene-graph" | "scenegraph" | "sg" => Ok(Self::SceneGraph),
            "word" | "wm" => Ok(Self::Word),
            other => Err(Error::InvalidArgument(format!("unknown masking {other:?}"))),
        }
    }
}

impl std::fmt::Display for Masking {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SceneGraph => "scene-graph",
            Self::Word => "word",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedCaption {
    pub ids: Vec<TokenId>,
    pub masked_spans: Vec<Span>,
    pub source: TokenSeq,
}

impl MaskedCaption {
    /// Masked positions in ascending order.
    pub fn positions(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.masked_spans.iter().flat_map(|s| s.positions()).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticNegative {
    pub caption: TokenSeq,
    pub source: TokenSeq,
    /// Positions whose sampled token differs from the source.
    pub replaced_positions: Vec<usize>,
    pub itm: f64,
}

impl SyntheticNegative {
    /// Per-token word-discrimination targets: 1 where the token is
    /// unchanged, 0 where it was replaced.
    pub fn gold_wod(&self) -> Vec<usize> {
        let mut labels = vec![1; self.caption.len()];
        for &p in &self.replaced_positions {
            labels[p] = 0;
        }
        labels
    }
}

/// Number of tokens a masking should cover, at least one.
pub fn mask_budget(len: usize, ratio: f64) -> usize {
    ((ratio * len as f64).ceil() as usize).max(1)
}

/// Masks whole candidate spans, in random order, until the budget is met or
/// the candidates run out.
pub fn mask_caption<R: Rng>(candidates: &MaskCandidateSet, ratio: f64, rng: &mut R) -> Result<MaskedCaption> {
    if candidates.is_empty() {
        return Err(Error::UnmaskableCaption);
    }
    let source = &candidates.source;
    let budget = mask_budget(source.len(), ratio);
    let mut order = candidates.spans.clone();
    order.shuffle(rng);
    let mut ids = source.ids().to_vec();
    let mut masked_spans = Vec::new();
    let mut covered = 0;
    for span in order {
        if covered >= budget {
            break;
        }
        for p in span.positions() {
            ids[p] = MASK_ID;
        }
        covered += span.len();
        masked_spans.push(span);
    }
    masked_spans.sort();
    Ok(MaskedCaption {
        ids,
        masked_spans,
        source: source.clone(),
    })
}

/// Masks `mask_budget` distinct single tokens drawn uniformly.
pub fn mask_words<R: Rng>(source: &TokenSeq, ratio: f64, rng: &mut R) -> Result<MaskedCaption> {
    if source.is_empty() {
        return Err(Error::UnmaskableCaption);
    }
    let budget = mask_budget(source.len(), ratio).min(source.len());
    let mut positions = rand::seq::index::sample(rng, source.len(), budget).into_vec();
    positions.sort_unstable();
    let mut ids = source.ids().to_vec();
    for &p in &positions {
        ids[p] = MASK_ID;
    }
    Ok(MaskedCaption {
        ids,
        masked_spans: positions.into_iter().map(Span::single).collect(),
        source: source.clone(),
    })
}

/// Refill distribution for one logit row: temperature softmax with the
/// reserved ids removed from the support.
pub fn refill_distribution(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if logits.len() <= RESERVED.len() {
        return Err(Error::InvalidArgument("vocabulary has no ordinary tokens".into()));
    }
    let support = Tensor::vector(logits[RESERVED.len()..].to_vec())?;
    let probs = softmax_t(&support, tau)?;
    let mut out = vec![0.0; RESERVED.len()];
    out.extend_from_slice(probs.data());
    Ok(out)
}

/// Draws one index from a probability vector.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::InvalidArgument(format!("refill distribution: {e}")))?;
    Ok(dist.sample(rng))
}

/// `count` independent refills drawn from precomputed MLM logits for
/// `masked.ids`.
pub fn refill_from_logits<R: Rng>(
    vocab: &Vocabulary,
    masked: &MaskedCaption,
    logits: &Tensor,
    tau: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<SyntheticNegative>> {
    let dists: Vec<(usize, Vec<f64>)> = masked
        .positions()
        .into_iter()
        .map(|p| Ok((p, refill_distribution(logits.row(p), tau)?)))
        .collect::<Result<_>>()?;
    (0..count).map(|_| fill(vocab, masked, &dists, rng)).collect()
}

fn fill<R: Rng>(
    vocab: &Vocabulary,
    masked: &MaskedCaption,
    dists: &[(usize, Vec<f64>)],
    rng: &mut R,
) -> Result<SyntheticNegative> {
    let mut caption = masked.source.clone();
    let mut replaced_positions = Vec::new();
    for (p, probs) in dists {
        let id = sample_index(probs, rng)?;
        if id != masked.source.ids()[*p] {
            caption.set(*p, id, vocab.token(id).unwrap_or_default().to_string());
            replaced_positions.push(*p);
        }
    }
    Ok(SyntheticNegative {
        caption,
        source: masked.source.clone(),
        replaced_positions,
        itm: f64::NAN,
    })
}

/// Samples every masked position independently from one MLM pass. The
/// returned negative has no score yet (`itm` is NaN).
pub fn refill<R: Rng>(
    generator: &MatchModel,
    vocab: &Vocabulary,
    image: &RegionImage,
    masked: &MaskedCaption,
    tau: f64,
    rng: &mut R,
) -> Result<SyntheticNegative> {
    Ok(refill_many(generator, vocab, image, masked, tau, 1, rng)?.remove(0))
}

/// `count` independent refills sharing one MLM pass.
pub fn refill_many<R: Rng>(
    generator: &MatchModel,
    vocab: &Vocabulary,
    image: &RegionImage,
    masked: &MaskedCaption,
    tau: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<SyntheticNegative>> {
    let logits = generator.mlm_logits(image, &masked.ids)?;
    refill_from_logits(vocab, masked, &logits, tau, count, rng)
}

/// True when every replaced word also occurs in some annotation of the
/// image, in which case the refill may well still describe it. Compares
/// surfaces so unknown words never collide.
pub fn is_false_negative(candidate: &SyntheticNegative, annotations: &[TokenSeq]) -> bool {
    let known: HashSet<&str> = annotations
        .iter()
        .flat_map(|a| a.surfaces().iter().map(String::as_str))
        .collect();
    candidate
        .replaced_positions
        .iter()
        .all(|&p| known.contains(candidate.caption.surfaces()[p].as_str()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    /// Maskings per caption.
    pub k: usize,
    /// Refills per masking.
    pub l: usize,
    /// Pool size kept after mining.
    pub m: usize,
    pub tau: f64,
    pub mask_ratio: f64,
    pub masking: Masking,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            k: 3,
            l: 4,
            m: 2,
            tau: 1.0,
            mask_ratio: 0.15,
            masking: Masking::SceneGraph,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 || self.m == 0 {
            return Err(Error::InvalidArgument("k, l and m must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!("mask ratio {} outside (0, 1]", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Unscored refills of `caption` before any filtering: `k` maskings times
/// `l` samples, in generation order.
pub fn draw_candidates<R: Rng>(
    generator: &MatchModel,
    vocab: &Vocabulary,
    image: &RegionImage,
    candidates: &MaskCandidateSet,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<SyntheticNegative>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.k * config.l);
    for _ in 0..config.k {
        let masked = mask_with(config.masking, candidates, config.mask_ratio, rng)?;
        out.extend(refill_many(generator, vocab, image, &masked, config.tau, config.l, rng)?);
    }
    Ok(out)
}

/// One masking of `candidates.source` under `masking`.
pub fn mask_with<R: Rng>(
    masking: Masking,
    candidates: &MaskCandidateSet,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskedCaption> {
    match masking {
        Masking::SceneGraph => mask_caption(candidates, ratio, rng),
        Masking::Word => mask_words(&candidates.source, ratio, rng),
    }
}

/// Keeps candidates that differ from the source, are not false negatives,
/// and are not duplicates of an earlier candidate.
pub fn filter_candidates(drawn: Vec<SyntheticNegative>, annotations: &[TokenSeq]) -> Vec<SyntheticNegative> {
    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    drawn
        .into_iter()
        .filter(|c| c.caption.ids() != c.source.ids())
        .filter(|c| !is_false_negative(c, annotations))
        .filter(|c| seen.insert(c.caption.ids().to_vec()))
        .collect()
}

/// Full unmined pool for one positive pair. `generator` proposes words and
/// `matcher` scores the survivors; they are the same model in dynamic mode.
pub fn generate_pool<R: Rng>(
    generator: &MatchModel,
    matcher: &MatchModel,
    vocab: &Vocabulary,
    image: &RegionImage,
    candidates: &MaskCandidateSet,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<SyntheticNegative>> {
    let drawn = draw_candidates(generator, vocab, image, candidates, config, rng)?;
    let mut pool = filter_candidates(drawn, &image.captions);
    for item in &mut pool {
        item.itm = matcher.itm_score(image, &item.caption)?;
    }
    Ok(pool)
}

/// The `m` highest-scoring items; ties go to the earlier item.
pub fn mine_top_m(mut pool: Vec<SyntheticNegative>, m: usize) -> Vec<SyntheticNegative> {
    // Stable sort keeps generation order among equal scores.
    pool.sort_by(|a, b| b.itm.total_cmp(&a.itm));
    pool.truncate(m);
    pool
}

#[cfg(test)]
mod tests;
