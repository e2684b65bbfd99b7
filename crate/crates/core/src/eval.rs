//! Retrieval recall, negative discrimination, word-level task accuracy and
//! difficulty-gap statistics.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{Dataset, RegionImage};
use crate::error::{Error, Result};
use crate::generator::{generate_pool, mine_top_m, GenerationConfig, SyntheticNegative};
use crate::model::MatchModel;
use crate::scenegraph::{mask_candidates, parse_scene_graph, RoleLexicon};
use crate::text::{TokenSeq, Vocabulary, RESERVED};

/// Anything that scores an (image, caption) pair; higher means better match.
pub trait Scorer {
    fn score(&self, image: &RegionImage, caption: &TokenSeq) -> Result<f64>;
}

impl Scorer for MatchModel {
    fn score(&self, image: &RegionImage, caption: &TokenSeq) -> Result<f64> {
        self.itm_score(image, caption)
    }
}

/// Scores 1 for an image's own captions and 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn score(&self, image: &RegionImage, caption: &TokenSeq) -> Result<f64> {
        Ok(if image.captions.iter().any(|c| c.ids() == caption.ids()) {
            1.0
        } else {
            0.0
        })
    }
}

impl<F: Fn(&RegionImage, &TokenSeq) -> f64> Scorer for F {
    fn score(&self, image: &RegionImage, caption: &TokenSeq) -> Result<f64> {
        Ok(self(image, caption))
    }
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Every image scored against every gallery caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// Row-major `[images, captions]`.
    pub scores: Vec<f64>,
    pub images: usize,
    pub captions: usize,
    /// Owning image of each caption.
    pub owner: Vec<usize>,
}

impl ScoreMatrix {
    /// Gallery captions are the images' captions, image by image.
    pub fn compute(scorer: &impl Scorer, gallery: &[RegionImage]) -> Result<Self> {
        if gallery.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let captions: Vec<(usize, &TokenSeq)> = gallery
            .iter()
            .enumerate()
            .flat_map(|(i, im)| im.captions.iter().map(move |c| (i, c)))
            .collect();
        let mut scores = Vec::with_capacity(gallery.len() * captions.len());
        for image in gallery {
            for (_, caption) in &captions {
                scores.push(scorer.score(image, caption)?);
            }
        }
        Ok(Self {
            scores,
            images: gallery.len(),
            captions: captions.len(),
            owner: captions.iter().map(|(i, _)| *i).collect(),
        })
    }

    pub fn get(&self, image: usize, caption: usize) -> f64 {
        self.scores[image * self.captions + caption]
    }
}

/// 1-based rank of `target` when `scores` are sorted descending with ties
/// broken by lower index first.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Fraction of queries whose best gold rank is at most `k`.
pub fn recall_from_ranks(best_ranks: &[usize], k: usize) -> f64 {
    if best_ranks.is_empty() {
        return 0.0;
    }
    best_ranks.iter().filter(|&&r| r <= k).count() as f64 / best_ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    /// Image-to-text recall at 1, 5 and 10.
    pub i2t: [f64; 3],
    /// Text-to-image recall at 1, 5 and 10.
    pub t2i: [f64; 3],
    pub rsum: f64,
}

impl RetrievalReport {
    pub fn from_matrix(m: &ScoreMatrix) -> Self {
        let i2t_ranks: Vec<usize> = (0..m.images)
            .map(|i| {
                let row = &m.scores[i * m.captions..(i + 1) * m.captions];
                (0..m.captions)
                    .filter(|&c| m.owner[c] == i)
                    .map(|c| rank_of(row, c))
                    .min()
                    .unwrap_or(usize::MAX)
            })
            .collect();
        let t2i_ranks: Vec<usize> = (0..m.captions)
            .map(|c| {
                let column: Vec<f64> = (0..m.images).map(|i| m.get(i, c)).collect();
                rank_of(&column, m.owner[c])
            })
            .collect();
        let i2t = RECALL_KS.map(|k| recall_from_ranks(&i2t_ranks, k));
        let t2i = RECALL_KS.map(|k| recall_from_ranks(&t2i_ranks, k));
        let rsum = 100.0 * (i2t.iter().sum::<f64>() + t2i.iter().sum::<f64>());
        Self { i2t, t2i, rsum }
    }

    pub const CSV_HEADER: &'static str = "direction,r1,r5,r10";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\ni2t,{},{},{}\nt2i,{},{},{}\nrsum,{},,\n",
            Self::CSV_HEADER,
            self.i2t[0],
            self.i2t[1],
            self.i2t[2],
            self.t2i[0],
            self.t2i[1],
            self.t2i[2],
            self.rsum
        )
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "image-to-text  R@1 {:.3}  R@5 {:.3}  R@10 {:.3}",
            self.i2t[0], self.i2t[1], self.i2t[2]
        )?;
        writeln!(
            f,
            "text-to-image  R@1 {:.3}  R@5 {:.3}  R@10 {:.3}",
            self.t2i[0], self.t2i[1], self.t2i[2]
        )?;
        write!(f, "RSum {:.1}", self.rsum)
    }
}

/// Retrieval over the gallery formed by `images` and all their captions.
pub fn recall_at_k(scorer: &impl Scorer, images: &[RegionImage]) -> Result<RetrievalReport> {
    Ok(RetrievalReport::from_matrix(&ScoreMatrix::compute(scorer, images)?))
}

/// An image with a matching and a mismatching caption.
#[derive(Debug, Clone)]
pub struct Triple<'a> {
    pub image: &'a RegionImage,
    pub positive: TokenSeq,
    pub negative: TokenSeq,
}

/// Fraction of triples where the positive strictly outscores the negative.
pub fn discrimination_accuracy(scorer: &impl Scorer, triples: &[Triple<'_>]) -> Result<f64> {
    if triples.is_empty() {
        return Ok(0.0);
    }
    let mut wins = 0usize;
    for t in triples {
        if scorer.score(t.image, &t.positive)? > scorer.score(t.image, &t.negative)? {
            wins += 1;
        }
    }
    Ok(wins as f64 / triples.len() as f64)
}

/// Per-token accuracy of thresholding the "matched" probability at 0.5.
pub fn wod_accuracy(model: &MatchModel, negatives: &[(&RegionImage, &SyntheticNegative)]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for (image, n) in negatives {
        let probs = model.wod_probs(image, &n.caption)?;
        for (j, gold) in n.gold_wod().into_iter().enumerate() {
            let predicted = usize::from(probs.row(j)[1] >= 0.5);
            right += usize::from(predicted == gold);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

/// Fraction of replaced positions whose top correction (reserved ids
/// excluded, ties to the lowest id) is the original token.
pub fn woc_accuracy(model: &MatchModel, negatives: &[(&RegionImage, &SyntheticNegative)]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for (image, n) in negatives {
        let logits = model.woc_logits(image, &n.caption)?;
        for &p in &n.replaced_positions {
            let row = logits.row(p);
            let best = (RESERVED.len()..row.len())
                .fold(RESERVED.len(), |best, j| if row[j] > row[best] { j } else { best });
            right += usize::from(best == n.source.ids()[p]);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

pub const GAP_BINS: usize = 40;
pub const GAP_BIN_WIDTH: f64 = 0.05;

/// Distribution of `itm(negative) - itm(positive)` values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GapHistogram {
    pub values: Vec<f64>,
    /// Images for which no negative could be produced.
    pub skipped: usize,
}

impl GapHistogram {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values, skipped: 0 }
    }

    pub fn bin_left(bin: usize) -> f64 {
        -1.0 + bin as f64 * GAP_BIN_WIDTH
    }

    pub fn bin_of(value: f64) -> usize {
        (((value + 1.0) / GAP_BIN_WIDTH).floor().max(0.0) as usize).min(GAP_BINS - 1)
    }

    pub fn counts(&self) -> [usize; GAP_BINS] {
        let mut counts = [0; GAP_BINS];
        for &v in &self.values {
            counts[Self::bin_of(v)] += 1;
        }
        counts
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values.iter().sum::<f64>() / self.values.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,count\n");
        for (i, c) in self.counts().iter().enumerate() {
            out.push_str(&format!("{:.2},{c}\n", Self::bin_left(i)));
        }
        out
    }
}

/// Source of the negative caption in a difficulty-gap measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapStrategy {
    /// Hardest caption of another image in a random batch.
    InBatch,
    /// Hardest caption of any other image.
    DatasetWide,
    /// Hardest synthetic negative built from the positive.
    Generated,
}

impl GapStrategy {
    pub const ALL: [GapStrategy; 3] = [Self::InBatch, Self::DatasetWide, Self::Generated];
}

impl FromStr for GapStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-batch" => Ok(Self::InBatch),
            "dataset-wide" => Ok(Self::DatasetWide),
            "generated" => Ok(Self::Generated),
            other => Err(Error::InvalidArgument(format!("unknown gap strategy {other:?}"))),
        }
    }
}

impl fmt::Display for GapStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InBatch => "in-batch",
            Self::DatasetWide => "dataset-wide",
            Self::Generated => "generated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapOptions {
    pub batch_size: usize,
    pub generation: GenerationConfig,
    pub seed: u64,
}

impl Default for GapOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            generation: GenerationConfig::default(),
            seed: 0,
        }
    }
}

/// What `difficulty_gap` needs beyond the scored model.
#[derive(Debug, Clone, Copy)]
pub struct GapContext<'a> {
    /// Proposes synthetic negatives; usually the model itself.
    pub generator: &'a MatchModel,
    pub vocab: &'a Vocabulary,
    pub lexicon: &'a RoleLexicon,
}

/// One gap per image, using its first caption as the positive.
pub fn difficulty_gap(
    model: &MatchModel,
    ctx: GapContext<'_>,
    data: &Dataset,
    strategy: GapStrategy,
    opts: &GapOptions,
) -> Result<GapHistogram> {
    let images = &data.images;
    let mut hist = GapHistogram::default();
    if images.is_empty() {
        return Ok(hist);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pos: Vec<f64> = images
        .iter()
        .map(|im| model.itm_score(im, &im.captions[0]))
        .collect::<Result<_>>()?;
    match strategy {
        GapStrategy::InBatch | GapStrategy::DatasetWide => {
            let mut order: Vec<usize> = (0..images.len()).collect();
            let group = if strategy == GapStrategy::InBatch {
                order.shuffle(&mut rng);
                opts.batch_size.max(2)
            } else {
                images.len()
            };
            for chunk in order.chunks(group) {
                for &i in chunk {
                    let mut best: Option<f64> = None;
                    for &j in chunk.iter().filter(|&&j| j != i) {
                        for c in &images[j].captions {
                            if images[i].captions.iter().any(|own| own.ids() == c.ids()) {
                                continue;
                            }
                            let s = model.itm_score(&images[i], c)?;
                            best = Some(best.map_or(s, |b: f64| b.max(s)));
                        }
                    }
                    match best {
                        Some(b) => hist.values.push(b - pos[i]),
                        None => hist.skipped += 1,
                    }
                }
            }
        }
        GapStrategy::Generated => {
            for (i, im) in images.iter().enumerate() {
                let caption = &im.captions[0];
                let candidates = mask_candidates(&parse_scene_graph(caption, ctx.lexicon), caption);
                let pool = match generate_pool(ctx.generator, model, ctx.vocab, im, &candidates, &opts.generation, &mut rng) {
                    Ok(p) => p,
                    Err(Error::UnmaskableCaption) => Vec::new(),
                    Err(e) => return Err(e),
                };
                match mine_top_m(pool, 1).first() {
                    Some(n) => hist.values.push(n.itm - pos[i]),
                    None => hist.skipped += 1,
                }
            }
        }
    }
    Ok(hist)
}

#[cfg(test)]
mod tests;
