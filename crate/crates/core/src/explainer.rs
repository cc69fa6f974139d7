//! Attention LSTM decoder that verbalizes the classifier's features, and
//! attention enforcement from extrinsic saliency maps.

use std::collections::{BTreeSet, HashMap};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureGrid, SaliencyMap, SaliencySource};
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Bound, Linear, LstmCell, ParamId, Params, Real, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const DEFAULT_MAX_LEN: usize = 20;
pub const DEFAULT_BEAM: usize = 3;

/// `[BOS, w₁..w_n, EOS]`.
pub fn framed(tokens: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(tokens.iter().copied()).chain(std::iter::once(EOS)).collect()
}

/// Token ↔ index bijection; indices 0..4 are PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary must start with the reserved tokens".into()));
        }
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::Format("vocabulary contains duplicates".into()));
        }
        Ok(Self { words, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Reserved tokens followed by the distinct words, sorted.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = words.into_iter().filter(|w| !RESERVED.contains(w)).collect();
        let all: Vec<String> = RESERVED.iter().copied().chain(distinct).map(str::to_string).collect();
        Self::try_from(all).expect("reserved prefix and distinct words")
    }

    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: Vec<&str> = captions.into_iter().flat_map(str::split_whitespace).collect();
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.word(i).to_string()).collect()
    }
}

/// Vocabulary-indexed word sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub indices: Vec<usize>,
    pub terminated: bool,
}

impl TokenSequence {
    /// Checks PAD only trails and EOS, if present, is last.
    pub fn validate(&self) -> Result<()> {
        if let Some(first_pad) = self.indices.iter().position(|&t| t == PAD) {
            if self.indices[first_pad..].iter().any(|&t| t != PAD) {
                return Err(Error::contract("PAD before a non-PAD token"));
            }
        }
        let content: Vec<usize> = self.indices.iter().copied().filter(|&t| t != PAD).collect();
        if let Some(at) = content.iter().position(|&t| t == EOS) {
            if at + 1 != content.len() {
                return Err(Error::contract("EOS must be terminal"));
            }
        }
        Ok(())
    }
}

/// Nonnegative weights over the K grid locations, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub step: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new<T: Real>(step: usize, weights: &[T]) -> Self {
        Self {
            step,
            weights: weights.iter().map(|w| w.to_f64_lossy()).collect(),
        }
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        self.weights.iter().all(|&w| w >= 0.0) && (self.total() - 1.0).abs() <= tol
    }

    pub fn argmax(&self) -> usize {
        crate::encoder::argmax(&self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextScale {
    /// `(1/K) Σ αⱼ Vⱼ`.
    #[default]
    PerPaper,
    /// `Σ αⱼ Vⱼ`.
    Sat,
}

impl ContextScale {
    pub fn factor<T: Real>(self, locations: usize) -> T {
        match self {
            ContextScale::PerPaper => T::one() / T::lit(locations as f64),
            ContextScale::Sat => T::one(),
        }
    }
}

impl FromStr for ContextScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_paper" => Ok(Self::PerPaper),
            "sat" => Ok(Self::Sat),
            other => Err(Error::contract(format!("unknown context scale {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    Intrinsic,
    Realigned,
    Enforced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector<T = f32> {
    pub values: Vec<T>,
    pub kind: ContextKind,
}

/// Attention-weighted average of the focus features.
pub fn focus_features<T: Real>(alpha: &[T], features: &FeatureGrid<T>, scale: ContextScale) -> Result<ContextVector<T>> {
    let k = features.locations();
    if alpha.len() != k {
        return Err(Error::shape("focus_features", &[alpha.len()], &[k, features.channels]));
    }
    let s: T = scale.factor(k);
    let mut values = vec![T::zero(); features.channels];
    for (j, &a) in alpha.iter().enumerate() {
        for (v, &f) in values.iter_mut().zip(features.location(j)) {
            *v = *v + a * f;
        }
    }
    values.iter_mut().for_each(|v| *v = *v * s);
    Ok(ContextVector {
        values,
        kind: ContextKind::Intrinsic,
    })
}

/// `Softmax(ε)` over the grid, after resampling `eps` to the grid shape.
pub fn enforced_weights<T: Real>(eps: &SaliencyMap, features: &FeatureGrid<T>) -> Result<Vec<T>> {
    if eps.has_nan() {
        return Err(Error::NumericDomain("saliency map contains NaN".into()));
    }
    let map = eps.resample(features.height, features.width);
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("saliency map contains Inf".into()));
    }
    let mut w: Vec<T> = map.values.iter().map(|&v| T::lit(f64::from(v))).collect();
    softmax_in_place(&mut w);
    Ok(w)
}

/// Focus feature built from an extrinsic map instead of the model's attention.
pub fn enforce_context<T: Real>(eps: &SaliencyMap, features: &FeatureGrid<T>, scale: ContextScale) -> Result<ContextVector<T>> {
    let w = enforced_weights(eps, features)?;
    let mut ctx = focus_features(&w, features, scale)?;
    ctx.kind = ContextKind::Enforced;
    Ok(ctx)
}

/// 1-based decoding steps at which enforcement is active.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepSet(pub BTreeSet<usize>);

impl StepSet {
    pub fn all(max_len: usize) -> Self {
        Self((1..=max_len).collect())
    }

    pub fn contains(&self, step: usize) -> bool {
        self.0.contains(&step)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Grammar: comma-separated items, each `n` or `a..b` (inclusive).
    pub fn parse(spec: &str) -> Result<Self> {
        let mut steps = BTreeSet::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::contract(format!("bad step {s:?} in {spec:?}")))
            };
            match item.split_once("..") {
                Some((a, b)) => {
                    let (a, b) = (num(a)?, num(b)?);
                    if a > b {
                        return Err(Error::contract(format!("empty step range {item:?}")));
                    }
                    steps.extend(a..=b);
                }
                None => {
                    steps.insert(num(item)?);
                }
            }
        }
        Ok(Self(steps))
    }

    pub fn check_within(&self, max_len: usize) -> Result<()> {
        match self.0.iter().find(|&&s| s == 0 || s > max_len) {
            Some(s) => Err(Error::contract(format!("step {s} outside 1..={max_len}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnforcementDescriptor {
    pub source: SaliencySource,
    /// Where the map came from (file name or a label).
    pub map: String,
    pub active_steps: StepSet,
}

/// Generated explanation and everything needed to score or inspect it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub image_id: String,
    pub predicted_class: Option<usize>,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub terminated: bool,
    /// Length-normalized log-probability of the sequence.
    pub score: f64,
    pub attention: Vec<AttentionMap>,
    pub enforcement: Option<EnforcementDescriptor>,
}

impl ExplanationRecord {
    /// Fills `tokens` from `token_ids`.
    pub fn with_vocabulary(mut self, vocab: &Vocabulary) -> Self {
        self.tokens = vocab.decode(&self.token_ids);
        self
    }

    pub fn sentence(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub att_dim: usize,
    pub feature_dim: usize,
    pub locations: usize,
    pub context_scale: ContextScale,
    pub max_len: usize,
}

impl ExplainerConfig {
    pub fn new(vocab_size: usize, feature_dim: usize, locations: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            att_dim: 32,
            feature_dim,
            locations,
            context_scale: ContextScale::PerPaper,
            max_len: DEFAULT_MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return Err(Error::contract("hidden_dim must be even and positive"));
        }
        if self.vocab_size <= EOS || self.locations == 0 || self.feature_dim == 0 || self.max_len == 0 {
            return Err(Error::contract("explainer dimensions must be positive"));
        }
        Ok(())
    }
}

/// LSTM hidden and cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T: Real = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    pub step: usize,
}

/// Features of a batch recorded on a tape, with the location projection of
/// the attention model precomputed.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBatch {
    /// `[B·K × c]`.
    pub rows: Var,
    /// `[B·K × A]`, `rows·W_v + b`.
    pub projected: Var,
    /// `[B × c]` mean location vector.
    pub mean: Var,
    pub batch: usize,
    pub locations: usize,
}

/// Tape handles produced by one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub logits: Var,
    pub alpha: Var,
    pub context: Var,
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    embed: ParamId,
    att_hidden: Linear,
    att_feature: Linear,
    att_score: Linear,
    init_h: Linear,
    init_c: Linear,
    lstm: LstmCell,
    output: Linear,
}

/// Attention model `f_Att` plus the LSTM decoder.
#[derive(Debug, Clone)]
pub struct Explainer<T: Real = f32> {
    pub config: ExplainerConfig,
    pub params: Params<T>,
    layers: Layers,
}

impl<T: Real> Explainer<T> {
    pub fn new(config: ExplainerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ExplainerConfig {
            vocab_size: n,
            embed_dim: e,
            hidden_dim: d,
            att_dim: a,
            feature_dim: c,
            ..
        } = config;
        let mut params = Params::new();
        let embed = params.add("explainer.embed", crate::numerics::layers_uniform(rng, &[n, e], 0.1));
        let att_hidden = Linear::init(&mut params, "explainer.att.hidden", d, a, false, rng);
        let att_feature = Linear::init(&mut params, "explainer.att.feature", c, a, true, rng);
        let att_score = Linear::init(&mut params, "explainer.att.score", a, 1, false, rng);
        let init_h = Linear::init(&mut params, "explainer.init_h", c, d, true, rng);
        let init_c = Linear::init(&mut params, "explainer.init_c", c, d, true, rng);
        let lstm = LstmCell::init(&mut params, "explainer.lstm", e + c, d, rng);
        let output = Linear::init(&mut params, "explainer.output", d, n, true, rng);
        Ok(Self {
            config,
            params,
            layers: Layers {
                embed,
                att_hidden,
                att_feature,
                att_score,
                init_h,
                init_c,
                lstm,
                output,
            },
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: ExplainerConfig) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(config, &mut rng)?;
        for (_, t) in m.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(m)
    }

    pub fn cast<U: Real>(&self) -> Explainer<U> {
        Explainer {
            config: self.config,
            params: self.params.cast(),
            layers: self.layers,
        }
    }

    pub fn score_vector(&self) -> ParamId {
        self.layers.att_score.weight
    }

    pub fn output_bias(&self) -> ParamId {
        self.layers.output.bias.expect("output head has a bias")
    }

    pub fn output_weight(&self) -> ParamId {
        self.layers.output.weight
    }

    fn check_features(&self, f: &FeatureGrid<T>) -> Result<()> {
        if f.channels != self.config.feature_dim || f.locations() != self.config.locations {
            return Err(Error::shape(
                "explainer features",
                &[self.config.locations, self.config.feature_dim],
                &[f.locations(), f.channels],
            ));
        }
        Ok(())
    }

    /// Records a batch of feature grids.
    pub fn prepare(&self, tape: &mut Tape<T>, bound: &Bound, features: &[&FeatureGrid<T>]) -> Result<FeatureBatch> {
        let (k, c) = (self.config.locations, self.config.feature_dim);
        let mut rows = Vec::with_capacity(features.len() * k * c);
        let mut mean = Vec::with_capacity(features.len() * c);
        for f in features {
            self.check_features(f)?;
            rows.extend_from_slice(&f.data);
            mean.extend(f.mean_vector());
        }
        let rows = tape.constant([features.len() * k, c], rows)?;
        let mean = tape.constant([features.len(), c], mean)?;
        let projected = self.layers.att_feature.forward(tape, bound, rows)?;
        Ok(FeatureBatch {
            rows,
            projected,
            mean,
            batch: features.len(),
            locations: k,
        })
    }

    /// `(h₀, c₀)` from the mean location vector.
    pub fn init_state(&self, tape: &mut Tape<T>, bound: &Bound, fb: &FeatureBatch) -> Result<(Var, Var)> {
        let h = self.layers.init_h.forward(tape, bound, fb.mean)?;
        let c = self.layers.init_c.forward(tape, bound, fb.mean)?;
        Ok((tape.tanh(h), tape.tanh(c)))
    }

    /// Pre-softmax additive attention scores `[B×K]`.
    pub fn attention_scores_var(&self, tape: &mut Tape<T>, bound: &Bound, h: Var, fb: &FeatureBatch) -> Result<Var> {
        let hp = self.layers.att_hidden.forward(tape, bound, h)?;
        let hp = tape.repeat_rows(hp, fb.locations);
        let joint = tape.add(hp, fb.projected)?;
        let joint = tape.tanh(joint);
        let scores = self.layers.att_score.forward(tape, bound, joint)?;
        tape.reshape(scores, [fb.batch, fb.locations])
    }

    /// `f_Att(h, V^f)`: softmax of the additive scores, `[B×K]`.
    pub fn attend_var(&self, tape: &mut Tape<T>, bound: &Bound, h: Var, fb: &FeatureBatch) -> Result<Var> {
        let scores = self.attention_scores_var(tape, bound, h, fb)?;
        tape.softmax_rows(scores)
    }

    pub fn context_var(&self, tape: &mut Tape<T>, alpha: Var, fb: &FeatureBatch) -> Result<Var> {
        let ctx = tape.weighted_rows(alpha, fb.rows)?;
        Ok(tape.scale(ctx, self.config.context_scale.factor(fb.locations)))
    }

    /// One decoder step. `enforced` replaces the model's attention with fixed weights `[B×K]`.
    pub fn step_var(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prev: &[usize],
        h: Var,
        c: Var,
        fb: &FeatureBatch,
        enforced: Option<Var>,
    ) -> Result<StepVars> {
        if let Some(&bad) = prev.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!("token {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let alpha = match enforced {
            Some(a) => a,
            None => self.attend_var(tape, bound, h, fb)?,
        };
        let context = self.context_var(tape, alpha, fb)?;
        let emb = tape.embed(bound[self.layers.embed], prev)?;
        let x = tape.concat_cols(&[emb, context])?;
        let (h, c) = self.layers.lstm.step(tape, bound, x, h, c)?;
        let logits = self.layers.output.forward(tape, bound, h)?;
        Ok(StepVars {
            logits,
            alpha,
            context,
            h,
            c,
        })
    }

    pub fn initial_state(&self, features: &FeatureGrid<T>) -> Result<DecoderState<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fb = self.prepare(&mut tape, &bound, &[features])?;
        let (h, c) = self.init_state(&mut tape, &bound, &fb)?;
        Ok(DecoderState {
            h: tape.tensor(h),
            c: tape.tensor(c),
            step: 0,
        })
    }

    /// Additive attention scores for a single hidden state.
    pub fn attention_scores(&self, h: &[T], features: &FeatureGrid<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fb = self.prepare(&mut tape, &bound, &[features])?;
        let hv = tape.constant([1, h.len()], h.to_vec())?;
        let s = self.attention_scores_var(&mut tape, &bound, hv, &fb)?;
        Ok(tape.value(s).to_vec())
    }

    pub fn attend(&self, h: &[T], features: &FeatureGrid<T>) -> Result<AttentionMap> {
        if h.len() != self.config.hidden_dim {
            return Err(Error::shape("attend", &[self.config.hidden_dim], &[h.len()]));
        }
        let mut scores = self.attention_scores(h, features)?;
        softmax_in_place(&mut scores);
        Ok(AttentionMap::new(0, &scores))
    }

    /// Single step from an explicit state: `(logits, α, next state)`.
    pub fn decode_step(
        &self,
        prev: usize,
        state: &DecoderState<T>,
        features: &FeatureGrid<T>,
    ) -> Result<(Tensor<T>, AttentionMap, DecoderState<T>)> {
        let d = self.config.hidden_dim;
        if state.h.len() != d || state.c.len() != d {
            return Err(Error::shape("decoder state", &[d], state.h.shape()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fb = self.prepare(&mut tape, &bound, &[features])?;
        let h = tape.constant([1, d], state.h.data().to_vec())?;
        let c = tape.constant([1, d], state.c.data().to_vec())?;
        let out = self.step_var(&mut tape, &bound, &[prev], h, c, &fb, None)?;
        let next = DecoderState {
            h: tape.tensor(out.h).reshape([d])?,
            c: tape.tensor(out.c).reshape([d])?,
            step: state.step + 1,
        };
        let alpha = AttentionMap::new(state.step + 1, tape.value(out.alpha));
        Ok((tape.tensor(out.logits).reshape([self.config.vocab_size])?, alpha, next))
    }

    /// Generates an explanation from BOS until EOS or `max_len` tokens.
    pub fn generate(&self, features: &FeatureGrid<T>, mode: DecodeMode) -> Result<ExplanationRecord> {
        match mode {
            DecodeMode::Greedy => self.decode_greedy(features, None),
            DecodeMode::Beam(width) => self.decode_beam(features, width.max(1)),
        }
    }

    /// Greedy generation that consumes `Softmax(ε)` instead of the model's
    /// attention at every step in `active_steps`.
    pub fn generate_enforced(
        &self,
        features: &FeatureGrid<T>,
        eps: &SaliencyMap,
        active_steps: &StepSet,
        label: &str,
    ) -> Result<ExplanationRecord> {
        active_steps.check_within(self.config.max_len)?;
        let weights = enforced_weights(eps, features)?;
        let mut rec = self.decode_greedy(features, Some((&weights, active_steps)))?;
        rec.enforcement = Some(EnforcementDescriptor {
            source: eps.source,
            map: label.to_string(),
            active_steps: active_steps.clone(),
        });
        Ok(rec)
    }

    fn decode_greedy(&self, features: &FeatureGrid<T>, enforce: Option<(&[T], &StepSet)>) -> Result<ExplanationRecord> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fb = self.prepare(&mut tape, &bound, &[features])?;
        let (mut h, mut c) = self.init_state(&mut tape, &bound, &fb)?;
        let enforced_alpha = match enforce {
            Some((w, _)) => Some(tape.constant([1, w.len()], w.to_vec())?),
            None => None,
        };
        let mut prev = BOS;
        let mut ids = Vec::new();
        let mut attention = Vec::new();
        let mut log_prob = 0.0;
        let mut terminated = false;
        for step in 1..=self.config.max_len {
            let active = enforce.is_some_and(|(_, steps)| steps.contains(step));
            let out = self.step_var(&mut tape, &bound, &[prev], h, c, &fb, enforced_alpha.filter(|_| active))?;
            let logp = log_softmax(tape.value(out.logits));
            let tok = crate::encoder::argmax(&logp);
            log_prob += logp[tok];
            if tok == EOS {
                terminated = true;
                break;
            }
            ids.push(tok);
            attention.push(AttentionMap::new(step, tape.value(out.alpha)));
            prev = tok;
            h = out.h;
            c = out.c;
        }
        let steps = ids.len() + usize::from(terminated);
        Ok(ExplanationRecord {
            image_id: String::new(),
            predicted_class: None,
            tokens: Vec::new(),
            token_ids: ids,
            terminated,
            score: normalized(log_prob, steps),
            attention,
            enforcement: None,
        })
    }

    fn decode_beam(&self, features: &FeatureGrid<T>, width: usize) -> Result<ExplanationRecord> {
        struct Hyp {
            ids: Vec<usize>,
            attention: Vec<AttentionMap>,
            log_prob: f64,
            h: Var,
            c: Var,
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let fb = self.prepare(&mut tape, &bound, &[features])?;
        let (h, c) = self.init_state(&mut tape, &bound, &fb)?;
        let mut live = vec![Hyp {
            ids: Vec::new(),
            attention: Vec::new(),
            log_prob: 0.0,
            h,
            c,
        }];
        let mut finished: Vec<ExplanationRecord> = Vec::new();
        for step in 1..=self.config.max_len {
            let mut candidates: Vec<(f64, usize, usize, StepVars)> = Vec::new();
            for (hi, hyp) in live.iter().enumerate() {
                let prev = hyp.ids.last().copied().unwrap_or(BOS);
                let out = self.step_var(&mut tape, &bound, &[prev], hyp.h, hyp.c, &fb, None)?;
                let logp = log_softmax(tape.value(out.logits));
                let mut order: Vec<usize> = (0..logp.len()).collect();
                order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
                for &tok in order.iter().take(width) {
                    candidates.push((hyp.log_prob + logp[tok], hi, tok, out));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (lp, hi, tok, out) in candidates.into_iter().take(width) {
                let parent = &live[hi];
                if tok == EOS {
                    finished.push(ExplanationRecord {
                        image_id: String::new(),
                        predicted_class: None,
                        tokens: Vec::new(),
                        token_ids: parent.ids.clone(),
                        terminated: true,
                        score: normalized(lp, parent.ids.len() + 1),
                        attention: parent.attention.clone(),
                        enforcement: None,
                    });
                    continue;
                }
                let mut ids = parent.ids.clone();
                ids.push(tok);
                let mut attention = parent.attention.clone();
                attention.push(AttentionMap::new(step, tape.value(out.alpha)));
                next.push(Hyp {
                    ids,
                    attention,
                    log_prob: lp,
                    h: out.h,
                    c: out.c,
                });
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }
        for hyp in live {
            let steps = hyp.ids.len();
            finished.push(ExplanationRecord {
                image_id: String::new(),
                predicted_class: None,
                tokens: Vec::new(),
                token_ids: hyp.ids,
                terminated: false,
                score: normalized(hyp.log_prob, steps),
                attention: hyp.attention,
                enforcement: None,
            });
        }
        // the greedy path is always a finalist, so beam never scores below greedy
        finished.push(self.decode_greedy(features, None)?);
        let best = finished
            .into_iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.score.total_cmp(&b.score).then(ib.cmp(ia)))
            .map(|(_, r)| r)
            .expect("at least the greedy hypothesis");
        Ok(best)
    }
}

fn normalized(log_prob: f64, steps: usize) -> f64 {
    if steps == 0 {
        0.0
    } else {
        log_prob / steps as f64
    }
}

pub(crate) fn log_softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let v: Vec<f64> = logits.iter().map(|x| x.to_f64_lossy()).collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}
