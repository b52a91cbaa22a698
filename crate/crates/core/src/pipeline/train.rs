//! Training, evaluation and the ablation sweep.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{relabel_visible, sequence_loss, Adam, AblationFlags, LossReport, ModelConfig, Runner};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::io::IndexMask;
use crate::metrics::{score_sequence, EvalResult};
use crate::segnet::ParamStore;
use crate::synthvos::{NamedSequence, SequenceSample};
use crate::tensor::Tensor;

/// Two-stage schedule: short snippets first, then longer ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_frames: usize,
    pub stage2_frames: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier per epoch.
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Seed of the sequence order and snippet offsets.
    pub seed: u64,
    /// Run validation every this many epochs (and after the last one).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 6,
            stage2_epochs: 4,
            stage1_frames: 4,
            stage2_frames: 8,
            batch_size: 2,
            learning_rate: 2e-3,
            lr_decay: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            val_every: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_frames < 2 || self.stage2_frames < 2 {
            return Err(Error::invalid("snippets need at least two frames"));
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::invalid("batch size and validation interval must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.lr_decay > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("learning rate, decay and weight decay out of range"));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    /// Means over (sequence, frame, object) terms.
    pub mean_fine_loss: f64,
    pub mean_coarse_loss: f64,
    pub val_j_seen: Option<f64>,
    pub val_j_unseen: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,stage,mean_fine_loss,mean_coarse_loss,val_J_seen,val_J_unseen";

    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        format!(
            "{},{},{:.8},{:.8},{},{}",
            self.epoch,
            self.stage,
            self.mean_fine_loss,
            self.mean_coarse_loss,
            fmt(self.val_j_seen),
            fmt(self.val_j_unseen)
        )
    }

    pub fn csv(logs: &[EpochLog]) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for l in logs {
            s.push_str(&l.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(model: &ModelConfig) -> Result<Self> {
        let params = ParamStore::init(&model.net)?;
        let adam = Adam::new(&params);
        Ok(TrainState { params, adam })
    }

    pub fn to_bundle(&self) -> Vec<(String, Tensor)> {
        let mut out = self.params.to_bundle();
        out.extend(self.adam.to_bundle(&self.params));
        out
    }

    /// Loads a checkpoint written for the network described by `model`.
    pub fn from_bundle(model: &ModelConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut params = ParamStore::init(&model.net)?;
        params.load_bundle(entries)?;
        let adam = Adam::from_bundle(&params, entries)?;
        Ok(TrainState { params, adam })
    }
}

/// Loss report and per-parameter gradients of the summed loss over one
/// sequence. Objects absent from the first frame are not tracked; a sequence
/// with no visible object yields `None`.
pub fn sequence_gradients(
    params: &ParamStore,
    model: &ModelConfig,
    sample: &SequenceSample,
) -> Result<Option<(LossReport, Vec<Tensor>)>> {
    let (masks, kept) = relabel_visible(&sample.masks);
    if kept.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let runner = Runner::new(&mut tape, params, model, true)?;
    let (_, steps) = runner.run(&mut tape, &sample.frames, &masks[0])?;
    let (loss, report) = sequence_loss(&mut tape, &steps, &masks[1..])?;
    let mut grads = tape.backward(loss, &Tensor::scalar(1.0))?;
    let g = runner
        .net
        .ids()
        .iter()
        .zip(params.tensors())
        .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(Some((report, g)))
}

/// Predicted index masks for every frame; frame 0 is the annotation itself.
///
/// Each frame runs on a fresh tape holding the recurrent state as constants,
/// so memory stays bounded over long sequences.
pub fn predict_sequence(
    params: &ParamStore,
    model: &ModelConfig,
    frames: &[Tensor],
    gt0: &IndexMask,
) -> Result<Vec<IndexMask>> {
    let first = frames.first().ok_or_else(|| Error::invalid("empty sequence"))?;
    let mut tape = Tape::new();
    let runner = Runner::new(&mut tape, params, model, false)?;
    let mut tracks = runner.init_sequence(&mut tape, first, gt0)?;
    let mut out = Vec::with_capacity(frames.len());
    out.push(gt0.clone());
    for frame in &frames[1..] {
        let mut next = Tape::new();
        let runner = Runner::new(&mut next, params, model, false)?;
        let mut moved: Vec<_> = tracks.iter().map(|t| t.transplant(&tape, &mut next)).collect();
        let step = runner.step(&mut next, frame, &mut moved)?;
        out.push(step.labels);
        tape = next;
        tracks = moved;
    }
    Ok(out)
}

/// Scores every sequence of a split. Returns the aggregate result and the
/// predicted masks per sequence.
pub fn evaluate_split(
    params: &ParamStore,
    model: &ModelConfig,
    seqs: &[NamedSequence],
) -> Result<(EvalResult, Vec<Vec<IndexMask>>)> {
    let per_seq: Vec<_> = seqs
        .par_iter()
        .map(|s| {
            let pred = predict_sequence(params, model, &s.sample.frames, &s.sample.masks[0])?;
            let scores = score_sequence(s, &pred)?;
            Ok((scores, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut objects = Vec::new();
    let mut preds = Vec::with_capacity(per_seq.len());
    for (scores, pred) in per_seq {
        objects.extend(scores);
        preds.push(pred);
    }
    Ok((EvalResult::from_objects(objects), preds))
}

/// Trains from the initialization given by `model.net.seed`. `on_epoch` sees
/// each epoch's log as soon as it is complete.
pub fn train(
    train_set: &[NamedSequence],
    val_set: &[NamedSequence],
    model: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(TrainState, Vec<EpochLog>)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut state = TrainState::new(model)?;
    let mut logs = Vec::with_capacity(cfg.epochs());
    for epoch in 0..cfg.epochs() {
        let stage = if epoch < cfg.stage1_epochs { 1 } else { 2 };
        let frames = if stage == 1 { cfg.stage1_frames } else { cfg.stage2_frames };
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let snippets: Vec<SequenceSample> = order
            .iter()
            .map(|&i| {
                let s = &train_set[i].sample;
                let n = frames.min(s.len());
                let start = rng.gen_range(0..=s.len() - n);
                s.snippet(start, n)
            })
            .collect::<Result<_>>()?;

        let (mut fine, mut coarse, mut terms) = (0.0, 0.0, 0usize);
        for batch in snippets.chunks(cfg.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|s| sequence_gradients(&state.params, model, s))
                .collect::<Result<Vec<_>>>()?;
            let mut sum: Option<Vec<Tensor>> = None;
            let mut count = 0;
            for (report, g) in results.into_iter().flatten() {
                fine += report.fine;
                coarse += report.coarse;
                terms += report.terms;
                count += 1;
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            if let Some(mut g) = sum {
                let scale = 1.0 / count as f64;
                g.iter_mut().for_each(|t| *t = t.scale(scale));
                state.adam.update(&mut state.params, &g, lr, cfg.weight_decay)?;
            }
        }
        let (val_j_seen, val_j_unseen) = if !val_set.is_empty() && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs()) {
            let (r, _) = evaluate_split(&state.params, model, val_set)?;
            (r.j_seen, r.j_unseen)
        } else {
            (None, None)
        };
        let denom = terms.max(1) as f64;
        let log = EpochLog {
            epoch,
            stage,
            mean_fine_loss: fine / denom,
            mean_coarse_loss: coarse / denom,
            val_j_seen,
            val_j_unseen,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((state, logs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub result: EvalResult,
    pub log: Vec<EpochLog>,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,G,J_seen,J_unseen,F_seen,F_unseen";

    pub fn csv(rows: &[AblationRow]) -> String {
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in rows {
            let e = &r.result;
            let _ = writeln!(
                s,
                "{},{:.6},{},{},{},{}",
                r.variant,
                e.g,
                fmt(e.j_seen),
                fmt(e.j_unseen),
                fmt(e.f_seen),
                fmt(e.f_unseen)
            );
        }
        s
    }
}

/// Retrains each named variant from scratch with the same seeds and schedule
/// and evaluates it on `val_set`.
pub fn run_ablation(
    train_set: &[NamedSequence],
    val_set: &[NamedSequence],
    base: &ModelConfig,
    cfg: &TrainConfig,
    variants: &[&str],
    on_epoch: &mut dyn FnMut(&str, &EpochLog),
) -> Result<Vec<AblationRow>> {
    if val_set.is_empty() {
        return Err(Error::invalid("ablation needs a validation split"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &name in variants {
        let model = ModelConfig {
            flags: AblationFlags::from_variant(name)?,
            ..*base
        };
        let (state, log) = train(train_set, val_set, &model, cfg, &mut |l| on_epoch(name, l))?;
        let (result, _) = evaluate_split(&state.params, &model, val_set)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            result,
            log,
        });
    }
    Ok(rows)
}
