//! Bidirectional re-encoding of a generated sentence and the realigned
//! attention used to tie intrinsic attention to the words produced.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::explainer::{focus_features, framed, AttentionMap, ContextKind, ContextVector, Explainer, FeatureBatch, PAD};
use crate::numerics::{Bound, LstmCell, ParamId, Params, Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Width of the concatenated bidirectional state; must be even.
    pub hidden_dim: usize,
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return Err(Error::contract("bidirectional hidden size must be even and positive"));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 {
            return Err(Error::contract("aligner dimensions must be positive"));
        }
        Ok(())
    }
}

/// `h̄₁..h̄_T`, each the concatenation of forward and backward states.
#[derive(Debug, Clone, PartialEq)]
pub struct BiStateSequence<T = f32> {
    pub hidden: usize,
    pub states: Vec<Vec<T>>,
}

impl<T: Real> BiStateSequence<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn forward_half(&self, t: usize) -> &[T] {
        &self.states[t][..self.hidden / 2]
    }

    pub fn backward_half(&self, t: usize) -> &[T] {
        &self.states[t][self.hidden / 2..]
    }
}

/// BiLSTM over word embeddings private to alignment.
#[derive(Debug, Clone)]
pub struct Aligner<T: Real = f32> {
    pub config: AlignerConfig,
    pub params: Params<T>,
    embed: ParamId,
    forward: LstmCell,
    backward: LstmCell,
}

impl<T: Real> Aligner<T> {
    pub fn new(config: AlignerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let embed = params.add(
            "aligner.embed",
            crate::numerics::layers_uniform(rng, &[config.vocab_size, config.embed_dim], 0.1),
        );
        let half = config.hidden_dim / 2;
        let forward = LstmCell::init(&mut params, "aligner.forward", config.embed_dim, half, rng);
        let backward = LstmCell::init(&mut params, "aligner.backward", config.embed_dim, half, rng);
        Ok(Self {
            config,
            params,
            embed,
            forward,
            backward,
        })
    }

    pub fn cast<U: Real>(&self) -> Aligner<U> {
        Aligner {
            config: self.config,
            params: self.params.cast(),
            embed: self.embed,
            forward: self.forward,
            backward: self.backward,
        }
    }

    /// Batched encoding of variable-length sequences. Returns one `[B×D]`
    /// variable per position up to the longest sequence; rows past a
    /// sequence's end are unspecified.
    pub fn encode_var(&self, tape: &mut Tape<T>, bound: &Bound, seqs: &[Vec<usize>]) -> Result<Vec<Var>> {
        if let Some(&bad) = seqs.iter().flatten().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!("token {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let batch = seqs.len();
        let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let half = self.config.hidden_dim / 2;
        let run = |tape: &mut Tape<T>, cell: &LstmCell, reversed: bool| -> Result<Vec<Var>> {
            let mut h = tape.constant([batch, half], vec![T::zero(); batch * half])?;
            let mut c = h;
            let mut out = Vec::with_capacity(longest);
            for p in 0..longest {
                let idx: Vec<usize> = seqs
                    .iter()
                    .map(|s| match (p < s.len(), reversed) {
                        (false, _) => PAD,
                        (true, false) => s[p],
                        (true, true) => s[s.len() - 1 - p],
                    })
                    .collect();
                let x = tape.embed(bound[self.embed], &idx)?;
                (h, c) = cell.step(tape, bound, x, h, c)?;
                out.push(h);
            }
            Ok(out)
        };
        let fwd = run(tape, &self.forward, false)?;
        let bwd_rev = run(tape, &self.backward, true)?;
        (0..longest)
            .map(|p| {
                let picks: Vec<usize> = seqs.iter().map(|s| if p < s.len() { s.len() - 1 - p } else { 0 }).collect();
                let bwd = tape.gather_steps(&bwd_rev, &picks)?;
                tape.concat_cols(&[fwd[p], bwd])
            })
            .collect()
    }

    pub fn encode_bidirectional(&self, tokens: &[usize]) -> Result<BiStateSequence<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = self.encode_var(&mut tape, &bound, &[tokens.to_vec()])?;
        Ok(BiStateSequence {
            hidden: self.config.hidden_dim,
            states: vars.iter().map(|&v| tape.value(v).to_vec()).collect(),
        })
    }
}

/// Realigned attention `ᾱ_t = f_Att(h̄_t, V^f)` for each bidirectional state,
/// with the realigned focus features.
pub fn realign<T: Real>(
    explainer: &Explainer<T>,
    states: &BiStateSequence<T>,
    features: &FeatureGrid<T>,
) -> Result<(Vec<AttentionMap>, Vec<ContextVector<T>>)> {
    if states.hidden != explainer.config.hidden_dim {
        return Err(Error::shape("realign", &[explainer.config.hidden_dim], &[states.hidden]));
    }
    let mut maps = Vec::with_capacity(states.len());
    let mut contexts = Vec::with_capacity(states.len());
    for (t, h) in states.states.iter().enumerate() {
        let mut m = explainer.attend(h, features)?;
        m.step = t + 1;
        let mut ctx = focus_features(&m.weights.iter().map(|&w| T::lit(w)).collect::<Vec<_>>(), features, explainer.config.context_scale)?;
        ctx.kind = ContextKind::Realigned;
        maps.push(m);
        contexts.push(ctx);
    }
    Ok((maps, contexts))
}

/// Realigned attention for an explanation's emitted tokens: the BiLSTM reads
/// `[BOS, y₁..y_n, EOS]` and the state before each token yields its map.
pub fn realign_tokens<T: Real>(
    explainer: &Explainer<T>,
    aligner: &Aligner<T>,
    features: &FeatureGrid<T>,
    tokens: &[usize],
) -> Result<Vec<AttentionMap>> {
    let mut states = aligner.encode_bidirectional(&framed(tokens))?;
    states.states.truncate(tokens.len());
    Ok(realign(explainer, &states, features)?.0)
}

/// Tape version of [`realign`] for a batch: one `[B×K]` map per state.
pub fn realign_var<T: Real>(
    explainer: &Explainer<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    states: &[Var],
    fb: &FeatureBatch,
) -> Result<Vec<Var>> {
    states.iter().map(|&h| explainer.attend_var(tape, bound, h, fb)).collect()
}

/// `Σ_t ‖α_t − ᾱ_t‖₁`.
pub fn alignment_loss(intrinsic: &[AttentionMap], realigned: &[AttentionMap]) -> Result<f64> {
    if intrinsic.len() != realigned.len() {
        return Err(Error::shape("alignment_loss", &[intrinsic.len()], &[realigned.len()]));
    }
    let mut total = 0.0;
    for (a, b) in intrinsic.iter().zip(realigned) {
        if a.weights.len() != b.weights.len() {
            return Err(Error::shape("alignment_loss", &[a.weights.len()], &[b.weights.len()]));
        }
        total += a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total)
}
