//! Composite objective, AdamW, the warmup+cosine schedule, and the epoch
//! loop.
//!
//! The total loss is label-smoothed LM cross-entropy plus a weighted
//! auxiliary BCE on the semantic predictions (fusion only) plus a small
//! adjective-class uniformizer (both variants). Loss functions take explicit
//! per-position weights; the trainer weights every teacher-forced position,
//! including pad targets, which is what the reported perplexity range
//! assumes.

use ndarray::{Array2, Array3, ArrayD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusError, CorpusSplit, Lexicon, Vocabulary, MAX_LEN};
use crate::evaluation;
use crate::model::{Model, ModelError, Param, Variant};
use crate::numerics::rng::{chacha, derive_seed};
use crate::numerics::{NodeId, NumericsError, Real, Tape};
use crate::semantics::{self, SemanticsError, FEATURE_COUNT};

/// Teacher-forced target positions per sentence.
pub const TARGETS_PER_SENTENCE: usize = MAX_LEN - 1;

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("loss has no contributing positions")]
    EmptyLoss,
    #[error("label smoothing must lie in [0, 1): {0}")]
    BadSmoothing(f64),
    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch})")]
    NonFinite { step: usize, epoch: usize, batch: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub lambda_aux: f64,
    pub lambda_uni: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch: 64,
            lr_peak: 3e-4,
            weight_decay: 0.01,
            clip_norm: 1.0,
            label_smoothing: 0.02,
            lambda_aux: 0.5,
            lambda_uni: 0.01,
            warmup_frac: 0.10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
        }
    }
}

/// Adjective class membership by token id; both classes are contiguous id
/// ranges in the standard vocabulary.
#[derive(Debug, Clone)]
pub struct AdjectiveClassIndex {
    pub pos: std::ops::Range<usize>,
    pub neg: std::ops::Range<usize>,
}

impl AdjectiveClassIndex {
    pub fn from_vocab(vocab: &Vocabulary) -> Self {
        let idx = AdjectiveClassIndex {
            pos: vocab.ranges.adjectives_pos.clone(),
            neg: vocab.ranges.adjectives_neg.clone(),
        };
        debug_assert!(idx.pos.end <= idx.neg.start || idx.neg.end <= idx.pos.start);
        idx
    }

    /// Class range of an adjective target, if it is one.
    pub fn class_of(&self, id: usize) -> Option<&std::ops::Range<usize>> {
        if self.pos.contains(&id) {
            Some(&self.pos)
        } else if self.neg.contains(&id) {
            Some(&self.neg)
        } else {
            None
        }
    }
}

/// One sentence ready for the model: padded ids plus its gold semantics.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    pub ids: Vec<usize>,
    pub n_real: usize,
    pub sem: Array2<f32>,
}

/// Encoded splits plus the lookup structures shared by trainer and metrics.
pub struct PreparedCorpus {
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    pub train: Vec<EncodedSentence>,
    pub val: Vec<EncodedSentence>,
    pub classes: AdjectiveClassIndex,
    pub heldout: Vec<usize>,
    pub seed: u64,
}

pub fn encode_split(
    split: &[corpus::SentenceRecord],
    lex: &Lexicon,
    vocab: &Vocabulary,
) -> Result<Vec<EncodedSentence>, TrainingError> {
    split
        .iter()
        .map(|r| {
            let enc = corpus::encode(r, vocab)?;
            let sem = semantics::annotate(r, &enc, lex, vocab)?;
            Ok(EncodedSentence {
                ids: enc.ids.clone(),
                n_real: enc.n_real,
                sem: sem.degrees.mapv(|v| v as f32),
            })
        })
        .collect()
}

pub fn prepare(
    lex: &Lexicon,
    train: &CorpusSplit,
    val: &CorpusSplit,
) -> Result<PreparedCorpus, TrainingError> {
    let vocab = Vocabulary::build(lex)?;
    Ok(PreparedCorpus {
        train: encode_split(&train.records, lex, &vocab)?,
        val: encode_split(&val.records, lex, &vocab)?,
        classes: AdjectiveClassIndex::from_vocab(&vocab),
        heldout: vocab.heldout_ids(lex),
        seed: train.seed,
        lexicon: lex.clone(),
        vocab,
    })
}

/// Inputs, shifted targets, semantics, and loss weights for a batch.
pub struct Batch {
    pub inputs: Array2<usize>,
    pub targets: Array2<usize>,
    pub sem: Array3<f32>,
    pub weights: Array2<f64>,
}

/// Assemble a batch. Every target position gets weight 1, pad targets
/// included; the model has to close the sentence (`<eos>` then padding) just
/// like the reported metrics expect.
pub fn make_batch(data: &[EncodedSentence], picks: &[usize]) -> Batch {
    let b = picks.len();
    let t = TARGETS_PER_SENTENCE;
    let mut inputs = Array2::zeros((b, t));
    let mut targets = Array2::zeros((b, t));
    let mut sem = Array3::zeros((b, t, FEATURE_COUNT));
    for (row, &pick) in picks.iter().enumerate() {
        let s = &data[pick];
        for pos in 0..t {
            inputs[[row, pos]] = s.ids[pos];
            targets[[row, pos]] = s.ids[pos + 1];
            for f in 0..FEATURE_COUNT {
                sem[[row, pos, f]] = s.sem[[pos, f]];
            }
        }
    }
    Batch { inputs, targets, sem, weights: Array2::ones((b, t)) }
}

fn weights_const<F: Real>(tape: &mut Tape<F>, weights: &Array2<f64>) -> NodeId {
    tape.constant(weights.mapv(F::from_f64).into_dyn())
}

/// Label-smoothed cross-entropy, averaged over positions with nonzero
/// weight: the smoothed target puts `1 - eps + eps/V` on the gold token and
/// `eps/V` everywhere else.
pub fn lm_loss_label_smoothed<F: Real>(
    tape: &mut Tape<F>,
    lm_logits: NodeId,
    targets: &Array2<usize>,
    weights: &Array2<f64>,
    eps: f64,
) -> Result<NodeId, TrainingError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(TrainingError::BadSmoothing(eps));
    }
    let z: f64 = weights.sum();
    if z <= 0.0 {
        return Err(TrainingError::EmptyLoss);
    }
    let (b, t) = targets.dim();
    let v = tape.value(lm_logits).shape()[2];
    let floor = eps / v as f64;
    let mut q = Array3::<f64>::from_elem((b, t, v), floor);
    for bi in 0..b {
        for ti in 0..t {
            q[[bi, ti, targets[[bi, ti]]]] += 1.0 - eps;
        }
    }
    let q = tape.constant(q.mapv(F::from_f64).into_dyn());
    let logp = tape.log_softmax_last(lm_logits);
    let weighted = tape.mul(logp, q)?;
    let per_pos = tape.sum_last(weighted);
    let w = weights_const(tape, weights);
    let masked = tape.mul(per_pos, w)?;
    let sum = tape.sum_all(masked);
    Ok(tape.affine(sum, F::from_f64(-1.0 / z), F::zero()))
}

/// Mean binary cross-entropy against soft targets over weighted
/// token-feature pairs. Predictions are clamped to `[1e-7, 1 - 1e-7]` before
/// the logs so saturated sigmoids cannot produce infinities.
pub fn aux_loss_bce<F: Real>(
    tape: &mut Tape<F>,
    aux_pred: NodeId,
    sem_targets: &Array3<F>,
    weights: &Array2<f64>,
) -> Result<NodeId, TrainingError> {
    let z: f64 = weights.sum();
    if z <= 0.0 {
        return Err(TrainingError::EmptyLoss);
    }
    let f_count = sem_targets.dim().2;
    let lo = F::from_f64(1e-7);
    let hi = F::from_f64(1.0 - 1e-7);
    let s = tape.constant(sem_targets.to_owned().into_dyn());
    let one_minus_s = tape.affine(s, F::from_f64(-1.0), F::one());
    let p = tape.clamp(aux_pred, lo, hi);
    let ln_p = tape.ln(p);
    let one_minus_p = tape.affine(p, F::from_f64(-1.0), F::one());
    let ln_q = tape.ln(one_minus_p);
    let term_pos = tape.mul(ln_p, s)?;
    let term_neg = tape.mul(ln_q, one_minus_s)?;
    let sum_terms = tape.add(term_pos, term_neg)?;
    let per_pos = tape.sum_last(sum_terms);
    let w = weights_const(tape, weights);
    let masked = tape.mul(per_pos, w)?;
    let total = tape.sum_all(masked);
    Ok(tape.affine(total, F::from_f64(-1.0 / (z * f_count as f64)), F::zero()))
}

/// KL(class-restricted softmax || uniform) averaged over positions whose
/// target is an adjective; exactly zero when the batch has none.
pub fn uniformizer_loss<F: Real>(
    tape: &mut Tape<F>,
    lm_logits: NodeId,
    targets: &Array2<usize>,
    weights: &Array2<f64>,
    classes: &AdjectiveClassIndex,
) -> Result<NodeId, TrainingError> {
    let (b, t) = targets.dim();
    let v = tape.value(lm_logits).shape()[2];
    let mut rows_pos = Vec::new();
    let mut rows_neg = Vec::new();
    for bi in 0..b {
        for ti in 0..t {
            if weights[[bi, ti]] <= 0.0 {
                continue;
            }
            let target = targets[[bi, ti]];
            if classes.pos.contains(&target) {
                rows_pos.push(bi * t + ti);
            } else if classes.neg.contains(&target) {
                rows_neg.push(bi * t + ti);
            }
        }
    }
    let n_adj = rows_pos.len() + rows_neg.len();
    if n_adj == 0 {
        return Ok(tape.constant(ndarray::arr0(F::zero()).into_dyn()));
    }

    let flat = tape.reshape(lm_logits, &[b * t, v])?;
    let mut class_sum: Option<NodeId> = None;
    let mut ln_k_total = 0.0;
    for (rows, range) in [(rows_pos, &classes.pos), (rows_neg, &classes.neg)] {
        if rows.is_empty() {
            continue;
        }
        let selected = tape.gather_rows(flat, &rows)?;
        let restricted = tape.slice_last(selected, range.start, range.len())?;
        let lsm = tape.log_softmax_last(restricted);
        let p = tape.exp(lsm);
        let plogp = tape.mul(p, lsm)?;
        let s = tape.sum_all(plogp);
        ln_k_total += rows.len() as f64 * (range.len() as f64).ln();
        class_sum = Some(match class_sum {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let s = class_sum.expect("n_adj > 0");
    Ok(tape.affine(
        s,
        F::from_f64(1.0 / n_adj as f64),
        F::from_f64(ln_k_total / n_adj as f64),
    ))
}

pub struct LossParts {
    pub total: NodeId,
    pub lm: NodeId,
    pub aux: Option<NodeId>,
    pub uni: NodeId,
}

/// Total objective: `lm + lambda_aux * aux + lambda_uni * uni`, the auxiliary
/// term present exactly when `aux_pred`/`sem_targets` are (fusion variant).
pub fn composite_loss<F: Real>(
    tape: &mut Tape<F>,
    lm_logits: NodeId,
    aux_pred: Option<NodeId>,
    targets: &Array2<usize>,
    weights: &Array2<f64>,
    sem_targets: Option<&Array3<F>>,
    classes: &AdjectiveClassIndex,
    cfg: &TrainConfig,
) -> Result<LossParts, TrainingError> {
    let lm = lm_loss_label_smoothed(tape, lm_logits, targets, weights, cfg.label_smoothing)?;
    let uni = uniformizer_loss(tape, lm_logits, targets, weights, classes)?;
    let mut total = lm;
    let aux = match (aux_pred, sem_targets) {
        (Some(pred), Some(s)) => {
            let a = aux_loss_bce(tape, pred, s, weights)?;
            let scaled = tape.affine(a, F::from_f64(cfg.lambda_aux), F::zero());
            total = tape.add(total, scaled)?;
            Some(a)
        }
        _ => None,
    };
    let uni_scaled = tape.affine(uni, F::from_f64(cfg.lambda_uni), F::zero());
    total = tape.add(total, uni_scaled)?;
    Ok(LossParts { total, lm, aux, uni })
}

/// Warmup+cosine schedule over 1-based steps: linear `0 -> lr_peak` across
/// the first `floor(warmup_frac * total)` steps, then cosine down to zero at
/// `total`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 || step > total_steps {
        return 0.0;
    }
    let warmup = (cfg.warmup_frac * total_steps as f64).floor() as usize;
    if warmup > 0 && step <= warmup {
        return cfg.lr_peak * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    0.5 * cfg.lr_peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut [ArrayD<F>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// AdamW with decoupled weight decay; decay skips parameters flagged
/// `decay: false` (biases, layer-norm gains/shifts).
pub struct AdamW<F: Real> {
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &[Param<F>]) -> Self {
        AdamW {
            m: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut [Param<F>], grads: &[ArrayD<F>], lr: f64, cfg: &TrainConfig) {
        assert_eq!(params.len(), grads.len(), "gradient list mismatches parameters");
        self.step += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1f, b2f) = (F::from_f64(b1), F::from_f64(b2));
        let (nb1f, nb2f) = (F::from_f64(1.0 - b1), F::from_f64(1.0 - b2));
        let eps = F::from_f64(cfg.eps);
        let lr_f = F::from_f64(lr);
        let bc1f = F::from_f64(bc1);
        let bc2f = F::from_f64(bc2);
        for i in 0..params.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = b1f * *mv + nb1f * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = b2f * *vv + nb2f * gv * gv);
            let theta = &mut params[i].value;
            ndarray::Zip::from(&mut *theta).and(&*m).and(&*v).for_each(|t, &mv, &vv| {
                let m_hat = mv / bc1f;
                let v_hat = vv / bc2f;
                *t = *t - lr_f * m_hat / (v_hat.sqrt() + eps);
            });
            if params[i].decay && cfg.weight_decay > 0.0 {
                let decay = F::from_f64(lr * cfg.weight_decay);
                theta.mapv_inplace(|t| t - decay * t);
            }
        }
    }
}

/// Validation numbers recorded after each epoch.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ppl: f64,
    pub val_ppl_seen_only: f64,
    pub sem_mse: Option<f64>,
}

/// Run the full training loop; `on_epoch` fires after each epoch's
/// validation pass (checkpointing hook).
pub fn train<E>(
    model: &mut Model<f32>,
    data: &PreparedCorpus,
    cfg: &TrainConfig,
    mut on_epoch: E,
) -> Result<Vec<EpochStats>, TrainingError>
where
    E: FnMut(&Model<f32>, &EpochStats) -> Result<(), TrainingError>,
{
    let n = data.train.len();
    if n == 0 {
        return Err(TrainingError::EmptyLoss);
    }
    let fusion = model.config.variant == Variant::Fusion;
    let batches_per_epoch = n.div_ceil(cfg.batch);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut optimizer = AdamW::new(&model.params);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut chacha(derive_seed(cfg.seed, &format!("shuffle-epoch-{epoch}"))));
        let mut loss_sum = 0.0;
        for (batch_idx, picks) in order.chunks(cfg.batch).enumerate() {
            global_step += 1;
            let batch = make_batch(&data.train, picks);
            let mut tape =
                Tape::train(chacha(derive_seed(cfg.seed, &format!("dropout-step-{global_step}"))));
            let fwd = model.forward(&mut tape, &batch.inputs, fusion.then_some(&batch.sem))?;
            let losses = composite_loss(
                &mut tape,
                fwd.lm_logits,
                fwd.aux_pred,
                &batch.targets,
                &batch.weights,
                fusion.then_some(&batch.sem),
                &data.classes,
                cfg,
            )?;
            let loss_value = tape.scalar_value(losses.total).as_f64();
            if !loss_value.is_finite() {
                return Err(TrainingError::NonFinite { step: global_step, epoch, batch: batch_idx });
            }
            tape.backward(losses.total)?;
            let mut grads: Vec<ArrayD<f32>> = fwd
                .leaves
                .iter()
                .zip(model.params.iter())
                .map(|(&leaf, p)| {
                    tape.grad(leaf).cloned().unwrap_or_else(|| ArrayD::zeros(p.value.raw_dim()))
                })
                .collect();
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TrainingError::NonFinite { step: global_step, epoch, batch: batch_idx });
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = lr_at(global_step, total_steps, cfg);
            optimizer.apply(&mut model.params, &grads, lr, cfg);
            loss_sum += loss_value;
        }

        let val = evaluation::validation_metrics(model, &data.val, &data.heldout)
            .map_err(|e| TrainingError::Model(ModelError::BadInput(e.to_string())))?;
        let epoch_stats = EpochStats {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_ppl: val.ppl,
            val_ppl_seen_only: val.ppl_seen_only,
            sem_mse: val.sem_mse,
        };
        on_epoch(model, &epoch_stats)?;
        stats.push(epoch_stats);
    }
    Ok(stats)
}

/// Gradient-check the full fusion objective at the tiny configuration in
/// 64-bit mode: reverse-mode gradients versus central differences on one
/// batch of real sentences.
pub fn fusion_grad_check(
    seed: u64,
    n_sentences: usize,
    min_coords: usize,
    step: f64,
) -> Result<crate::numerics::GradCheckReport, TrainingError> {
    use crate::model::ModelConfig;
    use crate::numerics::{grad_check, NodeId};

    let lex = Lexicon::standard();
    let vocab = Vocabulary::build(&lex)?;
    let classes = AdjectiveClassIndex::from_vocab(&vocab);
    let model = Model::<f64>::init(ModelConfig::tiny(Variant::Fusion), seed)?;

    let mut rng = chacha(derive_seed(seed, "grad-check-data"));
    let t = TARGETS_PER_SENTENCE;
    let mut inputs = Array2::zeros((n_sentences, t));
    let mut targets = Array2::zeros((n_sentences, t));
    let mut sem = Array3::<f64>::zeros((n_sentences, t, FEATURE_COUNT));
    for row in 0..n_sentences {
        let record = corpus::sample_sentence(
            &lex,
            &corpus::SamplerConfig::default(),
            &mut rng,
            true,
        );
        let enc = corpus::encode(&record, &vocab)?;
        let gold = semantics::annotate(&record, &enc, &lex, &vocab)?;
        for pos in 0..t {
            inputs[[row, pos]] = enc.ids[pos];
            targets[[row, pos]] = enc.ids[pos + 1];
            for f in 0..FEATURE_COUNT {
                sem[[row, pos, f]] = gold.degrees[[pos, f]];
            }
        }
    }
    let weights = Array2::ones((n_sentences, t));
    let cfg = TrainConfig::default();

    let params: Vec<(String, ArrayD<f64>)> =
        model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    let build = |tape: &mut Tape<f64>, leaves: &[NodeId]| {
        let wrap = |msg: String| NumericsError::InvalidArg { op: "fusion_loss", msg };
        let fwd = model
            .forward_with_leaves(tape, leaves.to_vec(), &inputs, Some(&sem))
            .map_err(|e| wrap(e.to_string()))?;
        let losses = composite_loss(
            tape,
            fwd.lm_logits,
            fwd.aux_pred,
            &targets,
            &weights,
            Some(&sem),
            &classes,
            &cfg,
        )
        .map_err(|e| wrap(e.to_string()))?;
        Ok(losses.total)
    };
    Ok(grad_check(&params, build, step, min_coords, seed)?)
}

/// Curve CSV shared by the trainer and the CLI: one row per epoch per model.
pub fn write_curve_csv(
    path: &std::path::Path,
    rows: &[(String, EpochStats)],
) -> Result<(), std::io::Error> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "model,epoch,train_loss,val_ppl,val_ppl_seen_only,sem_mse")?;
    for (name, s) in rows {
        let mse = s.sem_mse.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{name},{},{:.6},{:.6},{:.6},{mse}",
            s.epoch, s.train_loss, s.val_ppl, s.val_ppl_seen_only
        )?;
    }
    out.flush()
}
