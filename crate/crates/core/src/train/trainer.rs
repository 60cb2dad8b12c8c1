//! Minibatch BPTT training with validation-driven scheduling.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Utterance};
use super::loss::LossConfig;
use super::metrics::delta_snr;
use super::optim::{Adam, Plateau, ScheduleConfig, StopReason};
use crate::autodiff::{Eval, Graph, ParamId, Tape};
use crate::dsp::mask::bound_and_apply_mask;
use crate::dsp::stft::{istft, FrameConfig};
use crate::error::{Error, Result};
use crate::recurrent::CellState;
use crate::tensor::{ActShape, Tensor};
use crate::topology::{checkpoint, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Frames per training segment; recurrent state starts at zero in each.
    pub seq_len: usize,
    pub batch: usize,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps regardless of the schedule.
    pub max_steps: Option<usize>,
    /// Validation utterances scored with ΔSNR each epoch.
    pub snr_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 100,
            batch: 16,
            schedule: ScheduleConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            max_steps: None,
            snr_subset: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch == 0 {
            return Err(Error::Config(
                "sequence length and batch size must be positive".into(),
            ));
        }
        self.schedule.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub delta_snr_db: Option<f64>,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finish {
    Schedule(StopReason),
    MaxSteps,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub steps: usize,
    pub finish: Finish,
}

fn zero_states<G: Graph<f32>>(
    g: &mut G,
    model: &Model<f32>,
    batch: usize,
) -> Vec<CellState<G::Value>> {
    model
        .zero_state(batch)
        .cells
        .iter()
        .map(|c| c.map(|t| g.constant(t.clone())))
        .collect()
}

/// Mean loss over a batch on a tape; returns the loss and parameter
/// gradients.
pub fn loss_and_grads(
    model: &Model<f32>,
    noisy: &Tensor<f32>,
    clean: &Tensor<f32>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<(ParamId, Tensor<f32>)>)> {
    let batch = noisy.act()?.batch;
    let mut tape = Tape::new(model.store());
    let x = tape.constant(noisy.clone());
    let init = zero_states(&mut tape, model, batch);
    let (mask, _) = model.forward(&mut tape, &x, &init)?;
    let bounded = tape.bound_mask(&mask)?;
    let est = tape.complex_mul(&bounded, noisy)?;
    let loss = tape.compressed_loss(&est, clean, *cfg)?;
    let value = f64::from(tape.value(&loss).item());
    let grads = tape.backward(loss)?;
    Ok((
        value,
        grads.params().map(|(id, g)| (id, g.clone())).collect(),
    ))
}

/// Tape-free loss of one batch.
pub fn batch_loss(
    model: &Model<f32>,
    noisy: &Tensor<f32>,
    clean: &Tensor<f32>,
    cfg: &LossConfig,
) -> Result<f64> {
    let batch = noisy.act()?.batch;
    let mut g = Eval::new(model.store());
    let x = g.constant(noisy.clone());
    let init = zero_states(&mut g, model, batch);
    let (mask, _) = model.forward(&mut g, &x, &init)?;
    let bounded = g.bound_mask(&mask)?;
    let est = g.complex_mul(&bounded, noisy)?;
    let loss = g.compressed_loss(&est, clean, *cfg)?;
    Ok(f64::from(g.value(&loss).item()))
}

fn split_batch(t: &Tensor<f32>, parts: usize) -> Result<Vec<Tensor<f32>>> {
    let s = t.act()?;
    let per = s.batch.div_ceil(parts);
    let item = s.time * s.row_len();
    t.data()
        .chunks(per * item)
        .map(|c| {
            Tensor::act_from_vec(
                ActShape::new(c.len() / item, s.time, s.freq, s.chan),
                c.to_vec(),
            )
        })
        .collect()
}

/// Computes the batch gradient into the store's `grad` slots, splitting
/// the batch across the rayon pool. Returns the batch loss.
pub fn accumulate_batch(
    model: &mut Model<f32>,
    noisy: &Tensor<f32>,
    clean: &Tensor<f32>,
    cfg: &LossConfig,
) -> Result<f64> {
    let batch = noisy.act()?.batch;
    let parts = rayon::current_num_threads().clamp(1, batch);
    let (xs, ys) = (split_batch(noisy, parts)?, split_batch(clean, parts)?);
    let results: Vec<_> = {
        let m = &*model;
        xs.par_iter()
            .zip(&ys)
            .map(|(x, y)| {
                let b = x.act()?.batch;
                loss_and_grads(m, x, y, cfg).map(|r| (b, r))
            })
            .collect::<Result<_>>()?
    };
    let store = model.store_mut();
    store.zero_grad();
    let mut total = 0.0;
    for (b, (loss, grads)) in results {
        let w = b as f32 / batch as f32;
        total += loss * f64::from(w);
        for (id, mut g) in grads {
            g.scale(w);
            store.get_mut(id).grad.add_assign(&g)?;
        }
    }
    Ok(total)
}

/// Mean loss over every segment of `ds`.
pub fn dataset_loss(
    model: &Model<f32>,
    ds: &Dataset,
    batch: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let per: Vec<(usize, f64)> = idx
        .par_chunks(batch.max(1))
        .map(|c| {
            let (x, y) = ds.batch(c)?;
            Ok((c.len(), batch_loss(model, &x, &y, cfg)?))
        })
        .collect::<Result<_>>()?;
    let n: usize = per.iter().map(|p| p.0).sum();
    Ok(per.iter().map(|(k, l)| *k as f64 * l).sum::<f64>() / n.max(1) as f64)
}

/// Enhances a whole utterance in one pass from zero state.
pub fn enhance_utterance(
    model: &Model<f32>,
    utt: &Utterance,
    frame: FrameConfig,
) -> Result<Vec<f64>> {
    let mut state = model.zero_state(1);
    let mask = model.forward_sequence(&utt.noisy_spec, &mut state)?;
    let est = bound_and_apply_mask(&mask, &utt.noisy_spec)?;
    let mut out = istft(&est, frame)?;
    out.truncate(utt.noisy.len());
    Ok(out)
}

/// Mean ΔSNR over utterances, scored on the interior so the half-windowed
/// edge frames do not count.
pub fn mean_delta_snr(model: &Model<f32>, utts: &[Utterance], frame: FrameConfig) -> Result<f64> {
    let edge = frame.dft_size - frame.shift;
    let scores = utts
        .par_iter()
        .map(|u| {
            let e = enhance_utterance(model, u, frame)?;
            let r = if u.clean.len() > 4 * edge {
                edge..u.clean.len() - edge
            } else {
                0..u.clean.len()
            };
            Ok(delta_snr(&u.clean[r.clone()], &u.noisy[r.clone()], &e[r])?.delta)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

fn check_finite(model: &Model<f32>, loss: f64, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "epoch {epoch}, step {step}: loss is {loss}"
        )));
    }
    if let Some(p) = model.store().iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!(
            "epoch {epoch}, step {step}: gradient of {} is not finite",
            p.name
        )));
    }
    Ok(())
}

/// Trains `model` in place and leaves it holding the weights with the best
/// validation loss. Each epoch appends one JSON line to `log`; when
/// `best_path` is given the best model is checkpointed there.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn Write,
    best_path: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    let mut adam = Adam::new(model.store());
    let mut plateau = Plateau::new(cfg.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let snr_utts = &val_set.utterances[..cfg.snr_subset.min(val_set.utterances.len())];
    let mut best: Option<(usize, f64, Vec<Tensor<f32>>)> = None;
    let mut epochs = Vec::new();
    let mut steps = 0;

    let finish = loop {
        let epoch = epochs.len() + 1;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut hit_cap = false;
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = train_set.batch(chunk)?;
            let loss = accumulate_batch(model, &x, &y, &cfg.loss)?;
            check_finite(model, loss, epoch, steps + 1)?;
            adam.step(model.store_mut(), plateau.lr)?;
            steps += 1;
            loss_sum += loss;
            batches += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                hit_cap = true;
                break;
            }
        }

        let val_loss = dataset_loss(model, val_set, cfg.batch, &cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch}: validation loss is {val_loss}"
            )));
        }
        let delta = if snr_utts.is_empty() {
            None
        } else {
            Some(mean_delta_snr(model, snr_utts, val_set.frame)?)
        };
        let outcome = plateau.end_epoch(val_loss);
        if outcome.improved {
            let values = model.store().iter().map(|p| p.value.clone()).collect();
            best = Some((epoch, val_loss, values));
            if let Some(path) = best_path {
                let meta = serde_json::json!({
                    "epoch": epoch,
                    "steps": steps,
                    "val_loss": val_loss,
                    "lr": outcome.lr,
                    "spec_hash": model.spec().hash(),
                });
                checkpoint::save(path, model, &meta)?;
            }
        }
        let entry = EpochLog {
            epoch,
            steps,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss,
            lr: outcome.lr,
            delta_snr_db: delta,
            improved: outcome.improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&entry)?)?;
        epochs.push(entry);
        if hit_cap {
            break Finish::MaxSteps;
        }
        if let Some(reason) = outcome.stop {
            break Finish::Schedule(reason);
        }
    };

    let (best_epoch, best_val_loss, values) =
        best.expect("first epoch always improves on infinity");
    model.set_values(values)?;
    Ok(TrainReport {
        epochs,
        best_val_loss,
        best_epoch,
        steps,
        finish,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Overrides, Variant};
    use crate::train::synth;

    fn tiny() -> (Model<f32>, Dataset) {
        let model = Model::from_variant(&Variant::EffCrn23Lite, &Overrides::default(), 1).unwrap();
        let ds = Dataset::from_synth(&synth::generate(2, 0.4, 3), 8).unwrap();
        (model, ds)
    }

    #[test]
    fn split_batch_keeps_items() {
        let t = Tensor::from_vec(&[3, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let parts = split_batch(&t, 2).unwrap();
        assert_eq!(parts[0].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(parts[1].data(), &[5.0, 6.0]);
    }

    #[test]
    fn tape_and_eval_losses_agree() {
        let (model, ds) = tiny();
        let (x, y) = ds.batch(&[0, 1]).unwrap();
        let (a, grads) = loss_and_grads(&model, &x, &y, &LossConfig::default()).unwrap();
        let b = batch_loss(&model, &x, &y, &LossConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(grads.len(), model.store().len());
    }

    #[test]
    fn empty_sets_rejected() {
        let (mut model, ds) = tiny();
        let empty = Dataset::new(vec![], 8, FrameConfig::default()).unwrap();
        let cfg = TrainConfig {
            seq_len: 8,
            batch: 2,
            ..Default::default()
        };
        let err = train(&mut model, &empty, &ds, &cfg, &mut Vec::new(), None).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn short_run_logs_and_is_deterministic() {
        let cfg = TrainConfig {
            seq_len: 8,
            batch: 2,
            max_steps: Some(3),
            schedule: ScheduleConfig {
                initial_lr: 1e-3,
                ..Default::default()
            },
            snr_subset: 1,
            ..Default::default()
        };
        let run = || {
            let (mut model, ds) = tiny();
            let mut log = Vec::new();
            let report = train(&mut model, &ds, &ds, &cfg, &mut log, None).unwrap();
            (report, String::from_utf8(log).unwrap())
        };
        let (r1, log1) = run();
        let (r2, _) = run();
        assert_eq!(r1.finish, Finish::MaxSteps);
        assert_eq!(r1.steps, 3);
        assert_eq!(r1.epochs[0].train_loss, r2.epochs[0].train_loss);
        let first: EpochLog = serde_json::from_str(log1.lines().next().unwrap()).unwrap();
        assert_eq!(first.epoch, 1);
        assert!(first.delta_snr_db.is_some());
    }

    #[test]
    fn non_finite_input_aborts() {
        let (mut model, mut ds) = tiny();
        ds.utterances[0].noisy_spec.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            seq_len: 8,
            batch: 8,
            max_steps: Some(1),
            ..Default::default()
        };
        let err = train(&mut model, &ds, &ds, &cfg, &mut Vec::new(), None).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }
}
