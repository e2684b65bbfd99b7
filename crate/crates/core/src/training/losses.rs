//! Loss terms, each available as a tape node (for training) and as a plain
//! value (for inspection and tests).

use crate::datagen::RegionImage;
use crate::error::{Error, Result};
use crate::generator::{MaskedCaption, SyntheticNegative};
use crate::model::MatchModel;
use crate::nn::{Tape, Var};
use crate::text::TokenId;

/// Weights of the five loss parts, plus the triplet margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub irtm: f64,
    pub mlm: f64,
    pub istm: f64,
    pub wod: f64,
    pub woc: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            irtm: 1.0,
            mlm: 0.1,
            istm: 0.001,
            wod: 0.1,
            woc: 0.1,
            alpha: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda-irtm", self.irtm),
            ("lambda-mlm", self.mlm),
            ("lambda-istm", self.istm),
            ("lambda-wod", self.wod),
            ("lambda-woc", self.woc),
            ("alpha", self.alpha),
        ];
        match all.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            Some((name, v)) => Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}"))),
            None => Ok(()),
        }
    }

    /// Whether any term needs a synthetic pool.
    pub fn uses_pool(&self) -> bool {
        self.istm > 0.0 || self.wod > 0.0 || self.woc > 0.0
    }
}

/// Values of the five parts for one pair. A part is `None` when its inputs
/// were unavailable (for example an empty pool).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub irtm: Option<f64>,
    pub mlm: Option<f64>,
    pub istm: Option<f64>,
    pub wod: Option<f64>,
    pub woc: Option<f64>,
}

/// Weighted sum of the available parts.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    [
        (parts.irtm, w.irtm),
        (parts.mlm, w.mlm),
        (parts.istm, w.istm),
        (parts.wod, w.wod),
        (parts.woc, w.woc),
    ]
    .iter()
    .map(|(p, l)| p.map_or(0.0, |v| v * l))
    .sum()
}

pub fn triplet_loss(pos_score: f64, neg_score: f64, alpha: f64) -> f64 {
    (alpha - pos_score + neg_score).max(0.0)
}

pub fn tape_triplet(tape: &mut Tape<'_>, pos: Var, neg: Var, alpha: f64) -> Result<Var> {
    let d = tape.sub(neg, pos)?;
    let d = tape.shift(d, alpha);
    Ok(tape.relu(d))
}

/// Matching score node for one pair.
pub fn tape_score(tape: &mut Tape<'_>, model: &MatchModel, image: &RegionImage, ids: &[TokenId]) -> Result<Var> {
    let s = model.encode(tape, image, ids)?;
    model.itm_head(tape, &s)
}

/// Image-anchored triplet with the negative caption plus caption-anchored
/// triplet with the negative image. `pos` is the positive score node.
pub fn tape_irtm(
    tape: &mut Tape<'_>,
    model: &MatchModel,
    pos: Var,
    image: &RegionImage,
    caption: &[TokenId],
    neg_image: &RegionImage,
    neg_caption: &[TokenId],
    alpha: f64,
) -> Result<Var> {
    let s_neg_caption = tape_score(tape, model, image, neg_caption)?;
    let s_neg_image = tape_score(tape, model, neg_image, caption)?;
    let a = tape_triplet(tape, pos, s_neg_caption, alpha)?;
    let b = tape_triplet(tape, pos, s_neg_image, alpha)?;
    tape.add(a, b)
}

/// Mean triplet over the pool, anchored on the image.
pub fn tape_istm(
    tape: &mut Tape<'_>,
    model: &MatchModel,
    pos: Var,
    image: &RegionImage,
    pool: &[SyntheticNegative],
    alpha: f64,
) -> Result<Var> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut sum: Option<Var> = None;
    for item in pool {
        let s = tape_score(tape, model, image, item.caption.ids())?;
        let t = tape_triplet(tape, pos, s, alpha)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    Ok(tape.scale(sum.expect("non-empty pool"), 1.0 / pool.len() as f64))
}

/// MLM loss node and the `[len, V]` logits it was computed from.
pub fn tape_mlm(tape: &mut Tape<'_>, model: &MatchModel, image: &RegionImage, masked: &MaskedCaption) -> Result<(Var, Var)> {
    let positions = masked.positions();
    if positions.is_empty() {
        return Err(Error::NothingToPredict);
    }
    let s = model.encode(tape, image, &masked.ids)?;
    let logits = model.mlm_head(tape, &s)?;
    let probs = tape.softmax_t(logits, 1.0)?;
    let mut mask = vec![false; masked.ids.len()];
    for p in positions {
        mask[p] = true;
    }
    let loss = tape.nll(probs, masked.source.ids(), &mask)?;
    Ok((loss, logits))
}

pub fn tape_wod(tape: &mut Tape<'_>, model: &MatchModel, image: &RegionImage, negative: &SyntheticNegative) -> Result<Var> {
    let s = model.encode(tape, image, negative.caption.ids())?;
    let probs = model.wod_head(tape, &s)?;
    let mask = vec![true; negative.caption.len()];
    tape.nll(probs, &negative.gold_wod(), &mask)
}

/// Correction loss against the source tokens, over replaced positions only
/// unless `all_positions` is set.
pub fn tape_woc(
    tape: &mut Tape<'_>,
    model: &MatchModel,
    image: &RegionImage,
    negative: &SyntheticNegative,
    all_positions: bool,
) -> Result<Var> {
    if negative.replaced_positions.is_empty() {
        return Err(Error::NoReplacedPositions);
    }
    let s = model.encode(tape, image, negative.caption.ids())?;
    let logits = model.woc_head(tape, &s)?;
    let probs = tape.softmax_t(logits, 1.0)?;
    let mut mask = vec![all_positions; negative.caption.len()];
    for &p in &negative.replaced_positions {
        mask[p] = true;
    }
    tape.nll(probs, negative.source.ids(), &mask)
}

/// Mean of `terms` over the pool, one term per item.
fn pool_mean(
    tape: &mut Tape<'_>,
    pool: &[SyntheticNegative],
    mut term: impl FnMut(&mut Tape<'_>, &SyntheticNegative) -> Result<Var>,
) -> Result<Var> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut sum: Option<Var> = None;
    for item in pool {
        let t = term(tape, item)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
    }
    Ok(tape.scale(sum.expect("non-empty pool"), 1.0 / pool.len() as f64))
}

pub fn tape_pool_wod(tape: &mut Tape<'_>, model: &MatchModel, image: &RegionImage, pool: &[SyntheticNegative]) -> Result<Var> {
    pool_mean(tape, pool, |t, n| tape_wod(t, model, image, n))
}

pub fn tape_pool_woc(
    tape: &mut Tape<'_>,
    model: &MatchModel,
    image: &RegionImage,
    pool: &[SyntheticNegative],
    all_positions: bool,
) -> Result<Var> {
    pool_mean(tape, pool, |t, n| tape_woc(t, model, image, n, all_positions))
}

/// Everything one positive pair contributes to the objective.
#[derive(Debug, Clone, Copy)]
pub struct PairInputs<'a> {
    pub image: &'a RegionImage,
    pub caption: &'a [TokenId],
    pub neg_image: &'a RegionImage,
    pub neg_caption: &'a [TokenId],
    /// Maskings whose MLM loss is averaged.
    pub masked: &'a [MaskedCaption],
    /// Mined synthetic negatives.
    pub pool: &'a [SyntheticNegative],
}

/// Mean MLM loss over `masked`, plus the logits node of each masking.
pub fn tape_mlm_mean(
    tape: &mut Tape<'_>,
    model: &MatchModel,
    image: &RegionImage,
    masked: &[MaskedCaption],
) -> Result<(Var, Vec<Var>)> {
    if masked.is_empty() {
        return Err(Error::NothingToPredict);
    }
    let mut sum: Option<Var> = None;
    let mut logits = Vec::with_capacity(masked.len());
    for m in masked {
        let (l, z) = tape_mlm(tape, model, image, m)?;
        logits.push(z);
        sum = Some(match sum {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let mean = tape.scale(sum.expect("non-empty"), 1.0 / masked.len() as f64);
    Ok((mean, logits))
}

/// Weighted objective for one pair as a tape node, with the part values.
/// Terms with zero weight are skipped entirely.
pub fn pair_objective(
    tape: &mut Tape<'_>,
    model: &MatchModel,
    inputs: &PairInputs<'_>,
    w: &LossWeights,
    woc_all_positions: bool,
) -> Result<(Var, LossParts)> {
    let mlm = if w.mlm > 0.0 && !inputs.masked.is_empty() {
        Some(tape_mlm_mean(tape, model, inputs.image, inputs.masked)?.0)
    } else {
        None
    };
    combine_objective(tape, model, inputs, w, woc_all_positions, mlm)
}

/// Like [`pair_objective`], with the MLM node supplied by the caller
/// (`inputs.masked` is ignored). A `None` node leaves the MLM part out.
pub fn combine_objective(
    tape: &mut Tape<'_>,
    model: &MatchModel,
    inputs: &PairInputs<'_>,
    w: &LossWeights,
    woc_all_positions: bool,
    mlm: Option<Var>,
) -> Result<(Var, LossParts)> {
    let mut parts = LossParts::default();
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let needs_pos = w.irtm > 0.0 || (w.istm > 0.0 && !inputs.pool.is_empty());
    let pos = if needs_pos {
        Some(tape_score(tape, model, inputs.image, inputs.caption)?)
    } else {
        None
    };
    if w.irtm > 0.0 {
        let v = tape_irtm(
            tape,
            model,
            pos.expect("computed above"),
            inputs.image,
            inputs.caption,
            inputs.neg_image,
            inputs.neg_caption,
            w.alpha,
        )?;
        parts.irtm = Some(tape.value(v).item());
        terms.push((v, w.irtm));
    }
    if let Some(v) = mlm.filter(|_| w.mlm > 0.0) {
        parts.mlm = Some(tape.value(v).item());
        terms.push((v, w.mlm));
    }
    if !inputs.pool.is_empty() && w.uses_pool() {
        let (istm, wod, woc) = pool_terms(tape, model, pos, inputs, w, woc_all_positions)?;
        for (slot, v, l) in [(&mut parts.istm, istm, w.istm), (&mut parts.wod, wod, w.wod), (&mut parts.woc, woc, w.woc)] {
            if let Some(v) = v {
                *slot = Some(tape.value(v).item());
                terms.push((v, l));
            }
        }
    }
    let mut total: Option<Var> = None;
    for (v, l) in terms {
        let scaled = tape.scale(v, l);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.input(crate::nn::Tensor::scalar(0.0)),
    };
    Ok((total, parts))
}

/// Pool-mean ISTM, WoD and WoC nodes for the weighted terms, encoding each
/// pool item once.
fn pool_terms(
    tape: &mut Tape<'_>,
    model: &MatchModel,
    pos: Option<Var>,
    inputs: &PairInputs<'_>,
    w: &LossWeights,
    woc_all_positions: bool,
) -> Result<(Option<Var>, Option<Var>, Option<Var>)> {
    let mut sums: [Option<Var>; 3] = [None; 3];
    for item in inputs.pool {
        let s = model.encode(tape, inputs.image, item.caption.ids())?;
        let mut found: [Option<Var>; 3] = [None; 3];
        if w.istm > 0.0 {
            let score = model.itm_head(tape, &s)?;
            found[0] = Some(tape_triplet(tape, pos.expect("positive score"), score, w.alpha)?);
        }
        if w.wod > 0.0 {
            let probs = model.wod_head(tape, &s)?;
            let mask = vec![true; item.caption.len()];
            found[1] = Some(tape.nll(probs, &item.gold_wod(), &mask)?);
        }
        if w.woc > 0.0 {
            if item.replaced_positions.is_empty() {
                return Err(Error::NoReplacedPositions);
            }
            let logits = model.woc_head(tape, &s)?;
            let probs = tape.softmax_t(logits, 1.0)?;
            let mut mask = vec![woc_all_positions; item.caption.len()];
            for &p in &item.replaced_positions {
                mask[p] = true;
            }
            found[2] = Some(tape.nll(probs, item.source.ids(), &mask)?);
        }
        for (sum, t) in sums.iter_mut().zip(found) {
            if let Some(t) = t {
                *sum = Some(match *sum {
                    Some(acc) => tape.add(acc, t)?,
                    None => t,
                });
            }
        }
    }
    let inv = 1.0 / inputs.pool.len() as f64;
    let [a, b, c] = sums.map(|s| s.map(|v| tape.scale(v, inv)));
    Ok((a, b, c))
}

fn eval(model: &MatchModel, f: impl FnOnce(&mut Tape<'_>) -> Result<Var>) -> Result<f64> {
    let mut tape = model.tape();
    let v = f(&mut tape)?;
    Ok(tape.value(v).item())
}

pub fn irtm_loss(
    model: &MatchModel,
    image: &RegionImage,
    caption: &[TokenId],
    neg_image: &RegionImage,
    neg_caption: &[TokenId],
    alpha: f64,
) -> Result<f64> {
    eval(model, |t| {
        let pos = tape_score(t, model, image, caption)?;
        tape_irtm(t, model, pos, image, caption, neg_image, neg_caption, alpha)
    })
}

pub fn istm_loss(
    model: &MatchModel,
    image: &RegionImage,
    caption: &[TokenId],
    pool: &[SyntheticNegative],
    alpha: f64,
) -> Result<f64> {
    eval(model, |t| {
        let pos = tape_score(t, model, image, caption)?;
        tape_istm(t, model, pos, image, pool, alpha)
    })
}

pub fn mlm_loss(model: &MatchModel, image: &RegionImage, masked: &MaskedCaption) -> Result<f64> {
    eval(model, |t| Ok(tape_mlm(t, model, image, masked)?.0))
}

pub fn wod_loss(model: &MatchModel, image: &RegionImage, negative: &SyntheticNegative) -> Result<f64> {
    eval(model, |t| tape_wod(t, model, image, negative))
}

pub fn woc_loss(
    model: &MatchModel,
    image: &RegionImage,
    negative: &SyntheticNegative,
    all_positions: bool,
) -> Result<f64> {
    eval(model, |t| tape_woc(t, model, image, negative, all_positions))
}
