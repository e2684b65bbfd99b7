//! The training objective and loop.
//!
//! Each step samples a batch of positive pairs, retrieves one mismatched
//! image and caption per pair from the batch, builds a pool of synthetic
//! negatives per pair, keeps the hardest few, and takes one optimizer step
//! on the weighted sum of all loss parts.

mod losses;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{Dataset, RegionImage};
use crate::error::{Error, Result};
use crate::generator::{
    filter_candidates, mask_with, mine_top_m, refill_from_logits, GenerationConfig, MaskedCaption, SyntheticNegative,
};
use crate::model::MatchModel;
use crate::nn::{Adam, Gradients, ParamSet, Sgd, Tape, Var};
use crate::scenegraph::{mask_candidates, parse_scene_graph, MaskCandidateSet, RoleLexicon};
use crate::text::{TokenSeq, Vocabulary};

pub use losses::{
    combine_objective, irtm_loss, istm_loss, mlm_loss, pair_objective, tape_irtm, tape_istm, tape_mlm,
    tape_mlm_mean, tape_pool_woc, tape_pool_wod, tape_score, tape_triplet, tape_woc, tape_wod, total_loss,
    triplet_loss, wod_loss, woc_loss, LossParts, LossWeights, PairInputs,
};

/// Where synthetic negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeneratorMode {
    /// The matcher's own MLM head, so generation tracks the matcher.
    #[default]
    Dynamic,
    /// A separately pretrained copy whose parameters stay fixed.
    Static,
}

impl FromStr for GeneratorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Self::Dynamic),
            "static" => Ok(Self::Static),
            other => Err(Error::InvalidArgument(format!("unknown generator mode {other:?}"))),
        }
    }
}

impl fmt::Display for GeneratorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dynamic => "dynamic",
            Self::Static => "static",
        })
    }
}

/// How retrieved negatives are picked from the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativeStrategy {
    Random,
    #[default]
    InBatchHardest,
}

impl FromStr for NegativeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "hardest" | "in-batch-hardest" => Ok(Self::InBatchHardest),
            other => Err(Error::InvalidArgument(format!("unknown negative strategy {other:?}"))),
        }
    }
}

impl fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::InBatchHardest => "hardest",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

/// Optimizer together with its running state.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(lr, clip)),
            OptimizerKind::Adam => {
                let mut adam = Adam::new(lr, clip);
                adam.weight_decay = weight_decay;
                Self::Adam(adam)
            }
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(config.optimizer, config.lr, config.clip, config.weight_decay)
    }

    /// Applies and clears the accumulated gradients; returns their norm
    /// before clipping.
    pub fn step(&mut self, params: &mut ParamSet) -> f64 {
        match self {
            Self::Sgd(o) => o.step(params),
            Self::Adam(o) => o.step(params),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub generation: GenerationConfig,
    pub mode: GeneratorMode,
    pub negatives: NegativeStrategy,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Decoupled weight decay; ignored by SGD.
    pub weight_decay: f64,
    pub clip: f64,
    /// MLM-only steps used to prepare the static generator.
    pub warmup_steps: usize,
    pub woc_all_positions: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            generation: GenerationConfig::default(),
            mode: GeneratorMode::Dynamic,
            negatives: NegativeStrategy::Random,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            weight_decay: 0.0,
            clip: 5.0,
            warmup_steps: 300,
            woc_all_positions: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.generation.validate()?;
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::InvalidArgument(format!("clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }
}

/// One positive pair of a batch.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub image: &'a RegionImage,
    pub caption: &'a TokenSeq,
    pub candidates: &'a MaskCandidateSet,
}

/// Batch indices of the retrieved negative image and caption for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Retrieved {
    pub image: usize,
    pub caption: usize,
}

/// Picks, for every pair, a mismatched image and caption from the other
/// pairs. Captions identical to the positive are never chosen unless no
/// other exists. The hardest strategy takes the highest score, ties to the
/// lowest index.
pub fn sample_retrieved_negatives<R: Rng>(
    batch: &[Pair<'_>],
    model: &MatchModel,
    strategy: NegativeStrategy,
    rng: &mut R,
) -> Result<Vec<Retrieved>> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let caption_options = |i: usize| -> Vec<usize> {
        let distinct: Vec<usize> = (0..n)
            .filter(|&j| j != i && batch[j].caption.ids() != batch[i].caption.ids())
            .collect();
        if distinct.is_empty() {
            (0..n).filter(|&j| j != i).collect()
        } else {
            distinct
        }
    };
    match strategy {
        NegativeStrategy::Random => Ok((0..n)
            .map(|i| {
                let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
                let captions = caption_options(i);
                Retrieved {
                    image: others[rng.random_range(0..others.len())],
                    caption: captions[rng.random_range(0..captions.len())],
                }
            })
            .collect()),
        NegativeStrategy::InBatchHardest => {
            let mut scores = vec![vec![0.0; n]; n];
            for (a, row) in scores.iter_mut().enumerate() {
                for (b, s) in row.iter_mut().enumerate() {
                    if a != b {
                        *s = model.itm_score(batch[a].image, batch[b].caption)?;
                    }
                }
            }
            let argmax = |it: &mut dyn Iterator<Item = (usize, f64)>| {
                it.fold(None, |best: Option<(usize, f64)>, (j, s)| match best {
                    Some((_, b)) if b >= s => best,
                    _ => Some((j, s)),
                })
                .expect("batch of at least two")
                .0
            };
            Ok((0..n)
                .map(|i| Retrieved {
                    caption: argmax(&mut caption_options(i).into_iter().map(|j| (j, scores[i][j]))),
                    image: argmax(&mut (0..n).filter(|&k| k != i).map(|k| (k, scores[k][i]))),
                })
                .collect())
        }
    }
}

/// Averages over the pairs of one step. Parts are `None` when no pair
/// produced them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub step: usize,
    pub l_irtm: Option<f64>,
    pub l_mlm: Option<f64>,
    pub l_istm: Option<f64>,
    pub l_wod: Option<f64>,
    pub l_woc: Option<f64>,
    /// Filtered pool size before mining.
    pub mean_pool_size: f64,
    /// Mean of `itm(negative) - itm(positive)` over mined negatives.
    pub mean_gap: Option<f64>,
    pub gaps: Vec<f64>,
    pub grad_norm: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,l_irtm,l_mlm,l_istm,l_wod,l_woc,mean_pool_size,mean_gap";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            f(self.l_irtm),
            f(self.l_mlm),
            f(self.l_istm),
            f(self.l_wod),
            f(self.l_woc),
            self.mean_pool_size,
            f(self.mean_gap)
        )
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// One optimizer step on `batch`. `snapshot` is the frozen generator and
/// must be present exactly in static mode.
pub fn training_step<R: Rng>(
    model: &mut MatchModel,
    snapshot: Option<&MatchModel>,
    vocab: &Vocabulary,
    batch: &[Pair<'_>],
    config: &TrainConfig,
    optimizer: &mut Optimizer,
    rng: &mut R,
) -> Result<StepReport> {
    config.validate()?;
    if (config.mode == GeneratorMode::Static) != snapshot.is_some() {
        return Err(Error::InvalidArgument("a frozen generator is required exactly in static mode".into()));
    }
    let w = &config.weights;
    let gen = &config.generation;
    let generate = w.uses_pool();
    let retrieved = sample_retrieved_negatives(batch, model, config.negatives, rng)?;

    let mut grads: Vec<Gradients> = Vec::with_capacity(batch.len());
    let mut parts: Vec<LossParts> = Vec::with_capacity(batch.len());
    let mut pool_sizes = Vec::with_capacity(batch.len());
    let mut gaps = Vec::new();
    let mut frozen_mlm = Vec::new();
    for (i, pair) in batch.iter().enumerate() {
        let mut tape = model.tape();
        let wants_masks = generate || (w.mlm > 0.0 && config.mode == GeneratorMode::Dynamic);
        let masked: Vec<MaskedCaption> = if wants_masks {
            match (0..gen.k)
                .map(|_| mask_with(gen.masking, pair.candidates, gen.mask_ratio, rng))
                .collect::<Result<Vec<_>>>()
            {
                Ok(m) => m,
                Err(Error::UnmaskableCaption) => Vec::new(),
                Err(e) => return Err(e),
            }
        } else {
            Vec::new()
        };

        // Generator logits, one tensor per masking.
        let (mlm_node, logits) = match (config.mode, masked.is_empty()) {
            (_, true) => (None, Vec::new()),
            (GeneratorMode::Dynamic, false) => {
                let (node, vars) = tape_mlm_mean(&mut tape, model, pair.image, &masked)?;
                let logits = vars.iter().map(|&v| tape.value(v).clone()).collect();
                (Some(node), logits)
            }
            (GeneratorMode::Static, false) => {
                let frozen = snapshot.expect("checked above");
                let logits = masked
                    .iter()
                    .map(|m| frozen.mlm_logits(pair.image, &m.ids))
                    .collect::<Result<Vec<_>>>()?;
                if w.mlm > 0.0 {
                    let values = masked
                        .iter()
                        .map(|m| mlm_loss(frozen, pair.image, m))
                        .collect::<Result<Vec<_>>>()?;
                    frozen_mlm.push(mean(&values).expect("non-empty"));
                }
                (None, logits)
            }
        };

        let mut pool: Vec<SyntheticNegative> = Vec::new();
        if generate {
            let mut drawn = Vec::with_capacity(gen.k * gen.l);
            for (m, z) in masked.iter().zip(&logits) {
                drawn.extend(refill_from_logits(vocab, m, z, gen.tau, gen.l, rng)?);
            }
            pool = filter_candidates(drawn, &pair.image.captions);
            for item in &mut pool {
                item.itm = model.itm_score(pair.image, &item.caption)?;
            }
        }
        pool_sizes.push(pool.len() as f64);
        let mined = mine_top_m(pool, gen.m);

        let r = retrieved[i];
        let inputs = PairInputs {
            image: pair.image,
            caption: pair.caption.ids(),
            neg_image: batch[r.image].image,
            neg_caption: batch[r.caption].caption.ids(),
            masked: &[],
            pool: &mined,
        };
        let (total, p) = combine_objective(&mut tape, model, &inputs, w, config.woc_all_positions, mlm_node)?;
        if !mined.is_empty() {
            let pos = model.itm_score(pair.image, pair.caption)?;
            gaps.extend(mined.iter().map(|n| n.itm - pos));
        }
        grads.push(tape.backward(total)?);
        parts.push(p);
    }

    let scale = 1.0 / batch.len() as f64;
    let params = model.params_mut();
    params.zero_grad();
    for g in &grads {
        params.accumulate(g, scale);
    }
    let grad_norm = optimizer.step(params);

    let collect = |f: fn(&LossParts) -> Option<f64>| mean(&parts.iter().filter_map(f).collect::<Vec<_>>());
    let l_mlm = match config.mode {
        GeneratorMode::Dynamic => collect(|p| p.mlm),
        GeneratorMode::Static => mean(&frozen_mlm),
    };
    Ok(StepReport {
        step: 0,
        l_irtm: collect(|p| p.irtm),
        l_mlm,
        l_istm: collect(|p| p.istm),
        l_wod: collect(|p| p.wod),
        l_woc: collect(|p| p.woc),
        mean_pool_size: mean(&pool_sizes).unwrap_or(0.0),
        mean_gap: mean(&gaps),
        gaps,
        grad_norm,
    })
}

/// MLM-only training, used to prepare a static generator.
pub fn pretrain_mlm<R: Rng>(
    model: &mut MatchModel,
    data: &Dataset,
    candidates: &[Vec<MaskCandidateSet>],
    steps: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<()> {
    let b = config.batch_size.min(data.len());
    let gen = &config.generation;
    let mut optimizer = Optimizer::from_config(&config);
    for _ in 0..steps {
        let picks = index::sample(rng, data.len(), b).into_vec();
        let mut grads = Vec::with_capacity(b);
        for i in picks {
            let c = rng.random_range(0..candidates[i].len());
            let masked = match mask_with(gen.masking, &candidates[i][c], gen.mask_ratio, rng) {
                Ok(m) => m,
                Err(Error::UnmaskableCaption) => continue,
                Err(e) => return Err(e),
            };
            let mut tape: Tape<'_> = model.tape();
            let (loss, _): (Var, Var) = tape_mlm(&mut tape, model, &data.images[i], &masked)?;
            grads.push(tape.backward(loss)?);
        }
        let params = model.params_mut();
        params.zero_grad();
        for g in &grads {
            params.accumulate(g, 1.0 / b as f64);
        }
        optimizer.step(params);
    }
    Ok(())
}

/// Mask candidates of every caption of every image.
pub fn caption_candidates(data: &Dataset, lexicon: &RoleLexicon) -> Vec<Vec<MaskCandidateSet>> {
    data.images
        .iter()
        .map(|im| {
            im.captions
                .iter()
                .map(|c| mask_candidates(&parse_scene_graph(c, lexicon), c))
                .collect()
        })
        .collect()
}

/// Owns the model, data and random stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: MatchModel,
    snapshot: Option<MatchModel>,
    vocab: Vocabulary,
    data: Dataset,
    candidates: Vec<Vec<MaskCandidateSet>>,
    config: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    steps_done: usize,
}

impl Trainer {
    /// In static mode this also pretrains the frozen generator, starting
    /// from a copy of `model`.
    pub fn new(
        model: MatchModel,
        vocab: Vocabulary,
        lexicon: &RoleLexicon,
        data: Dataset,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if data.len() < config.batch_size {
            return Err(Error::InvalidArgument(format!(
                "batch size {} exceeds the {} training images",
                config.batch_size,
                data.len()
            )));
        }
        let candidates = caption_candidates(&data, lexicon);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let snapshot = match config.mode {
            GeneratorMode::Dynamic => None,
            GeneratorMode::Static => {
                let mut frozen = model.clone();
                let mut warm_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_5a4e);
                pretrain_mlm(&mut frozen, &data, &candidates, config.warmup_steps, &config, &mut warm_rng)?;
                Some(frozen)
            }
        };
        Ok(Self {
            model,
            snapshot,
            vocab,
            data,
            candidates,
            config,
            optimizer: Optimizer::from_config(&config),
            rng,
            steps_done: 0,
        })
    }

    pub fn model(&self) -> &MatchModel {
        &self.model
    }

    pub fn into_model(self) -> MatchModel {
        self.model
    }

    pub fn snapshot(&self) -> Option<&MatchModel> {
        self.snapshot.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let picks = index::sample(&mut self.rng, self.data.len(), self.config.batch_size).into_vec();
        let batch: Vec<Pair<'_>> = picks
            .iter()
            .map(|&i| {
                let c = self.rng.random_range(0..self.data.images[i].captions.len());
                Pair {
                    image: &self.data.images[i],
                    caption: &self.data.images[i].captions[c],
                    candidates: &self.candidates[i][c],
                }
            })
            .collect();
        let mut report = training_step(
            &mut self.model,
            self.snapshot.as_ref(),
            &self.vocab,
            &batch,
            &self.config,
            &mut self.optimizer,
            &mut self.rng,
        )?;
        self.steps_done += 1;
        report.step = self.steps_done;
        Ok(report)
    }

    /// Runs `steps` steps, handing each report to `on_step`.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        for _ in 0..steps {
            let report = self.step()?;
            on_step(&report);
        }
        Ok(())
    }
}
