//! Loss assembly and SGD training for the classifier and the explainer.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ExplainerBundle, ManifestEntry, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{realign_var, Aligner, AlignerConfig};
use crate::encoder::{Classifier, ClassifierConfig, FeatureGrid, Image};
use crate::error::{Error, Result};
use crate::explainer::{framed, ContextScale, DecodeMode, Explainer, ExplainerConfig, Vocabulary, PAD};
use crate::numerics::{Bound, Params, Precision, Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignInput {
    /// BiLSTM reads the ground-truth caption.
    #[default]
    TeacherForced,
    /// BiLSTM reads the model's own greedy decode.
    TwoPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_align: f64,
    pub lambda_ds: f64,
    pub clip_norm: f64,
    pub context_scale: ContextScale,
    pub align_input: AlignInput,
    pub stop_grad_realign: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 16,
            lambda_align: 1.0,
            lambda_ds: 0.0,
            clip_norm: 5.0,
            context_scale: ContextScale::PerPaper,
            align_input: AlignInput::TeacherForced,
            stop_grad_realign: false,
            seed: 7,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(self.lambda_align >= 0.0 && self.lambda_ds >= 0.0) {
            return Err(Error::contract("loss weights must be nonnegative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::contract("clip_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 16,
            clip_norm: 5.0,
            seed: 7,
        }
    }
}

/// Layer sizes shared by the explainer and its aligner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub att_dim: usize,
    pub max_len: usize,
}

impl Default for ExplainerDims {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 64,
            att_dim: 32,
            max_len: crate::explainer::DEFAULT_MAX_LEN,
        }
    }
}

/// Classifier initialized from `seed`.
pub fn init_classifier<T: Real>(config: ClassifierConfig, seed: u64) -> Classifier<T> {
    Classifier::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Explainer and aligner initialized from `train.seed`, sized for `features`.
pub fn init_explainer<T: Real>(
    vocab_size: usize,
    features: &FeatureGrid<T>,
    dims: &ExplainerDims,
    train: &TrainConfig,
) -> Result<(Explainer<T>, Aligner<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let config = ExplainerConfig {
        vocab_size,
        embed_dim: dims.embed_dim,
        hidden_dim: dims.hidden_dim,
        att_dim: dims.att_dim,
        feature_dim: features.channels,
        locations: features.locations(),
        context_scale: train.context_scale,
        max_len: dims.max_len,
    };
    let explainer = Explainer::new(config, &mut rng)?;
    let aligner = Aligner::new(
        AlignerConfig {
            vocab_size,
            embed_dim: dims.embed_dim,
            hidden_dim: dims.hidden_dim,
        },
        &mut rng,
    )?;
    Ok((explainer, aligner))
}

/// Per-term loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub align: f64,
    pub ds: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub align: f64,
    pub ds: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain numeric record") + "\n")
            .collect()
    }
}

/// One training pair: focus features and the caption's word ids (no BOS/EOS).
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionExample<T: Real = f32> {
    pub features: FeatureGrid<T>,
    pub tokens: Vec<usize>,
}

/// Tape handles of the assembled loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub align: Option<Var>,
    pub ds: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x)[0].to_f64_lossy();
        LossBreakdown {
            ce: v(self.ce),
            align: self.align.map_or(0.0, v),
            ds: v(self.ds),
            total: v(self.total),
        }
    }
}

/// Teacher-forced decode of full `[BOS..EOS]` sequences. Returns the step
/// outputs and the per-step row masks.
fn teacher_forced<T: Real>(
    explainer: &Explainer<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    fb: &crate::explainer::FeatureBatch,
    seqs: &[Vec<usize>],
) -> Result<(Vec<crate::explainer::StepVars>, Vec<Vec<T>>, Vec<Vec<Option<usize>>>)> {
    let steps = seqs.iter().map(|s| s.len() - 1).max().unwrap_or(0);
    let (mut h, mut c) = explainer.init_state(tape, bound, fb)?;
    let mut outs = Vec::with_capacity(steps);
    let mut masks = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    for t in 0..steps {
        let live = |s: &Vec<usize>| t + 1 < s.len();
        let prev: Vec<usize> = seqs.iter().map(|s| if live(s) { s[t] } else { PAD }).collect();
        let out = explainer.step_var(tape, bound, &prev, h, c, fb, None)?;
        masks.push(seqs.iter().map(|s| if live(s) { T::one() } else { T::zero() }).collect());
        targets.push(seqs.iter().map(|s| live(s).then(|| s[t + 1])).collect());
        (h, c) = (out.h, out.c);
        outs.push(out);
    }
    Ok((outs, masks, targets))
}

/// Cross-entropy + `λ_align·L_α` + `λ_ds·Σ_j(1 − Σ_t α_tj)²` on a teacher-forced batch.
/// Every term is summed over the batch and divided by the number of non-PAD
/// targets, so CE is the mean token loss and `L_α` the mean per-step L1.
pub fn explainer_loss<T: Real>(
    explainer: &Explainer<T>,
    aligner: &Aligner<T>,
    tape: &mut Tape<T>,
    bound_explainer: &Bound,
    bound_aligner: &Bound,
    batch: &[&CaptionExample<T>],
    config: &TrainConfig,
) -> Result<LossVars> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|ex| framed(&ex.tokens)).collect();
    let n_targets: usize = seqs.iter().map(|s| s.len() - 1).sum();
    if batch.is_empty() || n_targets == 0 {
        return Err(Error::contract("batch has no non-PAD targets"));
    }
    let grids: Vec<&FeatureGrid<T>> = batch.iter().map(|ex| &ex.features).collect();
    let fb = explainer.prepare(tape, bound_explainer, &grids)?;
    let (outs, masks, targets) = teacher_forced(explainer, tape, bound_explainer, &fb, &seqs)?;
    let per_token = T::one() / T::lit(n_targets as f64);

    let mut ce_terms = Vec::with_capacity(outs.len());
    for (out, tg) in outs.iter().zip(&targets) {
        ce_terms.push(tape.cross_entropy(out.logits, tg)?);
    }
    let ce = sum_vars(tape, &ce_terms)?;
    let ce = tape.scale(ce, T::one() / T::lit(n_targets as f64));

    let mut coverage = None;
    for (out, mask) in outs.iter().zip(&masks) {
        let a = tape.mask_rows(out.alpha, mask)?;
        coverage = Some(match coverage {
            None => a,
            Some(acc) => tape.add(acc, a)?,
        });
    }
    let coverage = coverage.expect("at least one step");
    let ones = tape.constant(tape.shape(coverage).to_vec(), vec![T::one(); batch.len() * fb.locations])?;
    let gap = tape.sub(ones, coverage)?;
    let gap = tape.square(gap);
    let ds = tape.sum(gap);
    let ds = tape.scale(ds, per_token);

    // the align term only feeds gradients when weighted, so it is skipped at zero weight
    let align = if config.lambda_align > 0.0 {
        let (align_seqs, intrinsic, align_masks) = match config.align_input {
            AlignInput::TeacherForced => (seqs.clone(), outs.iter().map(|o| o.alpha).collect(), masks),
            AlignInput::TwoPass => {
                let mut decoded = Vec::with_capacity(batch.len());
                for ex in batch {
                    decoded.push(framed(&explainer.generate(&ex.features, DecodeMode::Greedy)?.token_ids));
                }
                let (outs2, masks2, _) = teacher_forced(explainer, tape, bound_explainer, &fb, &decoded)?;
                (decoded, outs2.iter().map(|o| o.alpha).collect::<Vec<_>>(), masks2)
            }
        };
        let states = aligner.encode_var(tape, bound_aligner, &align_seqs)?;
        let realigned = realign_var(explainer, tape, bound_explainer, &states[..intrinsic.len()], &fb)?;
        let mut terms = Vec::with_capacity(intrinsic.len());
        for ((&a, &r), mask) in intrinsic.iter().zip(&realigned).zip(&align_masks) {
            let r = if config.stop_grad_realign { tape.detach(r) } else { r };
            let d = tape.sub(a, r)?;
            let d = tape.abs(d);
            let d = tape.mask_rows(d, mask)?;
            terms.push(tape.sum(d));
        }
        let a = sum_vars(tape, &terms)?;
        Some(tape.scale(a, per_token))
    } else {
        None
    };

    let mut total = ce;
    if let Some(a) = align {
        let w = tape.scale(a, T::lit(config.lambda_align));
        total = tape.add(total, w)?;
    }
    if config.lambda_ds > 0.0 {
        let w = tape.scale(ds, T::lit(config.lambda_ds));
        total = tape.add(total, w)?;
    }
    Ok(LossVars { total, ce, align, ds })
}

fn sum_vars<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars.split_first().ok_or_else(|| Error::contract("nothing to sum"))?;
    rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))
}

fn check_finite(value: f64, epoch: usize, batch: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            batch,
            detail: format!("{what} is {value}"),
        })
    }
}

/// Numeric-domain failures inside a training step become [`Error::Divergence`].
fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericDomain(detail) => Error::Divergence { epoch, batch, detail },
        other => other,
    }
}

/// Clips the joint gradient norm of several parameter sets.
fn clip_joint<T: Real>(sets: &mut [&mut Params<T>], max_norm: T) -> T {
    let norm = sets.iter().map(|p| p.grad_norm().powi(2)).sum::<T>().sqrt();
    if norm > max_norm && norm > T::zero() {
        sets.iter_mut().for_each(|p| p.scale_grads(max_norm / norm));
    }
    norm
}

/// Batch order draws from a stream separate from initialization.
fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn batches(n: usize, size: usize, epoch_rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(epoch_rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// SGD on the explainer and aligner with the classifier's features held fixed.
pub fn train_explainer<T: Real>(
    config: &TrainConfig,
    explainer: &mut Explainer<T>,
    aligner: &mut Aligner<T>,
    data: &[CaptionExample<T>],
) -> Result<TrainLog> {
    train_explainer_with(config, explainer, aligner, data, |_| {})
}

/// [`train_explainer`] with a callback after every epoch.
pub fn train_explainer_with<T: Real>(
    config: &TrainConfig,
    explainer: &mut Explainer<T>,
    aligner: &mut Aligner<T>,
    data: &[CaptionExample<T>],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::contract("no training examples"));
    }
    if explainer.config.context_scale != config.context_scale {
        return Err(Error::contract("explainer context scale differs from the training config"));
    }
    let mut rng = shuffle_rng(config.seed);
    let lr = T::lit(config.learning_rate);
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let mut sums = LossBreakdown::default();
        let plan = batches(data.len(), config.batch_size, &mut rng);
        for (bi, idx) in plan.iter().enumerate() {
            let batch: Vec<&CaptionExample<T>> = idx.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let be = explainer.params.bind(&mut tape);
            let ba = aligner.params.bind(&mut tape);
            let loss = explainer_loss(explainer, aligner, &mut tape, &be, &ba, &batch, config)
                .map_err(|e| diverged(e, epoch, bi + 1))?;
            let b = loss.breakdown(&tape);
            check_finite(b.total, epoch, bi + 1, "loss")?;
            let grads = tape.backward(loss.total)?;
            explainer.params.zero_grad();
            aligner.params.zero_grad();
            explainer.params.accumulate(&grads, &be);
            aligner.params.accumulate(&grads, &ba);
            let norm = clip_joint(&mut [&mut explainer.params, &mut aligner.params], T::lit(config.clip_norm));
            check_finite(norm.to_f64_lossy(), epoch, bi + 1, "gradient norm")?;
            explainer.params.sgd_step(lr);
            aligner.params.sgd_step(lr);
            sums.ce += b.ce;
            sums.align += b.align;
            sums.ds += b.ds;
            sums.total += b.total;
        }
        let n = plan.len() as f64;
        let entry = EpochLog {
            epoch,
            ce: sums.ce / n,
            align: sums.align / n,
            ds: sums.ds / n,
            total: sums.total / n,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Cross-entropy pretraining of the classifier; `align`/`ds` are logged as zero.
pub fn train_classifier<T: Real>(
    config: &ClassifierTrainConfig,
    classifier: &mut Classifier<T>,
    data: &[(&Image, usize)],
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::contract("no training images"));
    }
    if config.batch_size == 0 || !(config.learning_rate >= 0.0) || !(config.clip_norm > 0.0) {
        return Err(Error::contract("invalid classifier training config"));
    }
    if let Some(&(_, bad)) = data.iter().find(|(_, c)| *c >= classifier.config.num_classes) {
        return Err(Error::contract(format!("label {bad} out of range")));
    }
    let mut rng = shuffle_rng(config.seed);
    let lr = T::lit(config.learning_rate);
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let plan = batches(data.len(), config.batch_size, &mut rng);
        let mut total = 0.0;
        for (bi, idx) in plan.iter().enumerate() {
            let images: Vec<&Image> = idx.iter().map(|&i| data[i].0).collect();
            let labels: Vec<Option<usize>> = idx.iter().map(|&i| Some(data[i].1)).collect();
            let (shape, input) = classifier.batch_input(&images)?;
            let mut tape = Tape::new();
            let bound = classifier.params.bind(&mut tape);
            let x = tape.constant(shape, input)?;
            let pass = classifier.forward(&mut tape, &bound, x).map_err(|e| diverged(e, epoch, bi + 1))?;
            let ce = tape.cross_entropy(pass.logits, &labels)?;
            let ce = tape.scale(ce, T::one() / T::lit(idx.len() as f64));
            let value = tape.value(ce)[0].to_f64_lossy();
            check_finite(value, epoch, bi + 1, "loss")?;
            let grads = tape.backward(ce)?;
            classifier.params.zero_grad();
            classifier.params.accumulate(&grads, &bound);
            classifier.params.clip_grad_norm(T::lit(config.clip_norm));
            classifier.params.sgd_step(lr);
            total += value;
        }
        let ce = total / plan.len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            ce,
            align: 0.0,
            ds: 0.0,
            total: ce,
        });
    }
    Ok(log)
}

/// Fraction of images whose predicted class matches the label.
pub fn accuracy<T: Real>(classifier: &Classifier<T>, data: &[(&Image, usize)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in data.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|(img, _)| *img).collect();
        for ((logits, _), (_, label)) in classifier.classify_batch(&images)?.iter().zip(chunk) {
            correct += usize::from(crate::encoder::argmax(logits) == *label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Focus features for each image, computed in batches with the frozen classifier.
pub fn extract_features<T: Real>(classifier: &Classifier<T>, images: &[&Image]) -> Result<Vec<FeatureGrid<T>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        out.extend(classifier.classify_batch(chunk)?.into_iter().map(|(_, g)| g));
    }
    Ok(out)
}

/// One example per (image, caption) pair.
pub fn caption_examples<T: Real>(
    features: &[FeatureGrid<T>],
    captions: &[Vec<String>],
    vocab: &Vocabulary,
) -> Vec<CaptionExample<T>> {
    features
        .iter()
        .zip(captions)
        .flat_map(|(f, caps)| {
            caps.iter().map(move |c| CaptionExample {
                features: f.clone(),
                tokens: vocab.encode(c),
            })
        })
        .collect()
}

