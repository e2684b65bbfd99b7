//! Cross-modal matching model: a shared transformer encoder over region
//! features and caption tokens, with four task heads.
//!
//! Region rows carry no position embedding, so the encoder is invariant to
//! region order. Token rows get learned position embeddings. The matching
//! head reads the mean over all positions; the three token-level heads read
//! the token rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datagen::RegionImage;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::text::{TokenId, TokenSeq, MASK_ID, MAX_CAPTION_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub regions: usize,
    pub d_img: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Default sizes for a given vocabulary and region feature width.
    pub fn new(vocab_size: usize, d_img: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
            regions: 8,
            d_img,
            max_len: MAX_CAPTION_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_hidden", self.ffn_hidden),
            ("regions", self.regions),
            ("d_img", self.d_img),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    token_emb: ParamId,
    pos_emb: ParamId,
    region_proj: Linear,
    layers: Vec<Layer>,
    final_norm: Norm,
    itm: Linear,
    mlm: (Linear, Linear),
    wod: Linear,
    woc: (Linear, Linear),
}

/// Name prefix shared by every backbone parameter.
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Backbone parameters plus the ITM, MLM, WoD and WoC heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // Layout is a pure function of the config.
        true
    }
}

struct Builder<'a> {
    params: ParamSet,
    init: &'a mut dyn FnMut(&str, &[usize]) -> Tensor,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize]) -> ParamId {
        let value = (self.init)(&name, shape);
        self.params.add(name, value)
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.w"), &[d_in, d_out]),
            b: self.add(format!("{name}.b"), &[d_out]),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{name}.gain"), &[d]),
            bias: self.add(format!("{name}.bias"), &[d]),
        }
    }
}

fn build(config: &ModelConfig, init: &mut dyn FnMut(&str, &[usize]) -> Tensor) -> (ParamSet, Layout) {
    let ModelConfig {
        vocab_size: v,
        d_model: d,
        ffn_hidden: f,
        d_img,
        max_len,
        ..
    } = *config;
    let mut b = Builder {
        params: ParamSet::new(),
        init,
    };
    let token_emb = b.add("backbone.token_emb".into(), &[v, d]);
    let pos_emb = b.add("backbone.pos_emb".into(), &[max_len, d]);
    let region_proj = b.linear("backbone.region_proj", d_img, d);
    let layers = (0..config.layers)
        .map(|i| {
            let p = format!("backbone.layer{i}");
            Layer {
                norm1: b.norm(&format!("{p}.norm1"), d),
                q: b.linear(&format!("{p}.attn.q"), d, d),
                k: b.linear(&format!("{p}.attn.k"), d, d),
                v: b.linear(&format!("{p}.attn.v"), d, d),
                out: b.linear(&format!("{p}.attn.out"), d, d),
                norm2: b.norm(&format!("{p}.norm2"), d),
                ff1: b.linear(&format!("{p}.ffn.fc1"), d, f),
                ff2: b.linear(&format!("{p}.ffn.fc2"), f, d),
            }
        })
        .collect();
    let final_norm = b.norm("backbone.final_norm", d);
    let itm = b.linear("head.itm", d, 1);
    let mlm = (b.linear("head.mlm.fc1", d, d), b.linear("head.mlm.fc2", d, v));
    let wod = b.linear("head.wod", d, 2);
    let woc = (b.linear("head.woc.fc1", d, d), b.linear("head.woc.fc2", d, v));
    let layout = Layout {
        token_emb,
        pos_emb,
        region_proj,
        layers,
        final_norm,
        itm,
        mlm,
        wod,
        woc,
    };
    (b.params, layout)
}

/// Encoder output for one (image, caption) pair: region rows then token rows.
#[derive(Debug, Clone, Copy)]
pub struct JointStates {
    pub states: Var,
    pub regions: usize,
    pub tokens: usize,
}

impl MatchModel {
    /// Random initialization: scaled Gaussian weights, zero biases, unit
    /// normalization gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |name: &str, shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            if name.ends_with(".gain") {
                return Tensor::full(shape, 1.0);
            }
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            let std = if name.ends_with("_emb") {
                0.5
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape.to_vec(), data).expect("finite init")
        };
        let (params, layout) = build(&config, &mut init);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Every parameter zero, including normalization gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, &mut |_, shape| Tensor::zeros(shape));
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, matching by name and shape.
    pub fn from_params(config: ModelConfig, stored: ParamSet) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for (_, param) in stored.iter() {
            let id = model
                .params
                .find(&param.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", param.name)))?;
            let slot = model.params.get_mut(id);
            if slot.value.shape() != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    param.name,
                    param.value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = param.value.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.params)
    }

    fn check_inputs(&self, image: &RegionImage, ids: &[TokenId]) -> Result<()> {
        let c = &self.config;
        if image.regions.shape() != [c.regions, c.d_img] {
            return Err(Error::ShapeMismatch {
                op: "encode regions",
                left: image.regions.shape().to_vec(),
                right: vec![c.regions, c.d_img],
            });
        }
        if ids.len() > c.max_len {
            return Err(Error::CaptionTooLong {
                len: ids.len(),
                max: c.max_len,
            });
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, l: Linear) -> Result<Var> {
        let (w, b) = (tape.param(l.w), tape.param(l.b));
        tape.affine(x, w, b)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, n: Norm) -> Result<Var> {
        let (g, b) = (tape.param(n.gain), tape.param(n.bias));
        tape.layer_norm(x, g, b)
    }

    /// Runs the shared backbone. `tape` must have been created from this
    /// model's parameters.
    pub fn encode(&self, tape: &mut Tape<'_>, image: &RegionImage, ids: &[TokenId]) -> Result<JointStates> {
        debug_assert!(std::ptr::eq(tape.param_set(), &self.params));
        self.check_inputs(image, ids)?;
        let l = &self.layout;
        let regions = tape.input(image.regions.clone());
        let regions = self.linear(tape, regions, l.region_proj)?;
        let mut x = if ids.is_empty() {
            regions
        } else {
            let table = tape.param(l.token_emb);
            let tokens = tape.gather(table, ids)?;
            let pos_table = tape.param(l.pos_emb);
            let positions: Vec<usize> = (0..ids.len()).collect();
            let pos = tape.gather(pos_table, &positions)?;
            let tokens = tape.add(tokens, pos)?;
            tape.concat_rows(regions, tokens)?
        };
        for layer in &l.layers {
            let h = self.norm(tape, x, layer.norm1)?;
            let q = self.linear(tape, h, layer.q)?;
            let k = self.linear(tape, h, layer.k)?;
            let v = self.linear(tape, h, layer.v)?;
            let a = tape.attention(q, k, v, self.config.heads)?;
            let a = self.linear(tape, a, layer.out)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, layer.norm2)?;
            let h = self.linear(tape, h, layer.ff1)?;
            let h = tape.relu(h);
            let h = self.linear(tape, h, layer.ff2)?;
            x = tape.add(x, h)?;
        }
        let states = self.norm(tape, x, l.final_norm)?;
        Ok(JointStates {
            states,
            regions: self.config.regions,
            tokens: ids.len(),
        })
    }

    fn token_rows(&self, tape: &mut Tape<'_>, s: &JointStates) -> Result<Var> {
        tape.slice_rows(s.states, s.regions, s.tokens)
    }

    /// Matching score in (0, 1), as a scalar node.
    pub fn itm_head(&self, tape: &mut Tape<'_>, s: &JointStates) -> Result<Var> {
        let pooled = if s.tokens == 0 {
            tape.mean_rows(s.states)?
        } else {
            let regions = tape.slice_rows(s.states, 0, s.regions)?;
            let regions = tape.mean_rows(regions)?;
            let tokens = self.token_rows(tape, s)?;
            let tokens = tape.mean_rows(tokens)?;
            tape.mul(regions, tokens)?
        };
        let logit = self.linear(tape, pooled, self.layout.itm)?;
        let logit = tape.reshape(logit, vec![])?;
        Ok(tape.sigmoid(logit))
    }

    fn two_layer(&self, tape: &mut Tape<'_>, s: &JointStates, (a, b): (Linear, Linear)) -> Result<Var> {
        let t = self.token_rows(tape, s)?;
        let h = self.linear(tape, t, a)?;
        let h = tape.relu(h);
        self.linear(tape, h, b)
    }

    /// `[len, V]` vocabulary logits for masked-token prediction.
    pub fn mlm_head(&self, tape: &mut Tape<'_>, s: &JointStates) -> Result<Var> {
        self.two_layer(tape, s, self.layout.mlm)
    }

    /// `[len, 2]` word-discrimination probabilities; column 1 is "matched".
    pub fn wod_head(&self, tape: &mut Tape<'_>, s: &JointStates) -> Result<Var> {
        let t = self.token_rows(tape, s)?;
        let logits = self.linear(tape, t, self.layout.wod)?;
        tape.softmax_t(logits, 1.0)
    }

    /// `[len, V]` word-correction logits.
    pub fn woc_head(&self, tape: &mut Tape<'_>, s: &JointStates) -> Result<Var> {
        self.two_layer(tape, s, self.layout.woc)
    }

    pub fn itm_score(&self, image: &RegionImage, caption: &TokenSeq) -> Result<f64> {
        let mut tape = self.tape();
        let s = self.encode(&mut tape, image, caption.ids())?;
        let score = self.itm_head(&mut tape, &s)?;
        Ok(tape.value(score).item())
    }

    /// Fails with "nothing to predict" unless `ids` contains a mask token.
    pub fn mlm_logits(&self, image: &RegionImage, ids: &[TokenId]) -> Result<Tensor> {
        if !ids.contains(&MASK_ID) {
            return Err(Error::NothingToPredict);
        }
        let mut tape = self.tape();
        let s = self.encode(&mut tape, image, ids)?;
        let logits = self.mlm_head(&mut tape, &s)?;
        Ok(tape.value(logits).clone())
    }

    pub fn wod_probs(&self, image: &RegionImage, caption: &TokenSeq) -> Result<Tensor> {
        let mut tape = self.tape();
        let s = self.encode(&mut tape, image, caption.ids())?;
        let probs = self.wod_head(&mut tape, &s)?;
        Ok(tape.value(probs).clone())
    }

    pub fn woc_logits(&self, image: &RegionImage, caption: &TokenSeq) -> Result<Tensor> {
        let mut tape = self.tape();
        let s = self.encode(&mut tape, image, caption.ids())?;
        let logits = self.woc_head(&mut tape, &s)?;
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests;

