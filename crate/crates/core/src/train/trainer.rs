use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{split_dataset, Adam, PhaseKind, PhaseSpec};
use crate::config::RunConfig;
use crate::data::{Batch, Dataset, Sampler, SliceRecord};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{pathology_bits, EvalReport, SliceScores};
use crate::model::{argmax_channels, checkpoint, MfuNet};
use crate::nn::{Forward, ParamStore};
use crate::tensor::{io, NdTensor, Tape};

/// Dice losses of the three label groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub anatomy: f64,
    pub infarct: f64,
    pub edema: f64,
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: usize,
    pub kind: PhaseKind,
    pub val_split: Option<usize>,
    pub epoch: usize,
    pub global_epoch: usize,
    pub iterations: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean weighted tversky + focal per label group.
    pub train_terms: Curves,
    pub val_dice_loss: Option<f64>,
    pub val_curves: Option<Curves>,
    pub best: bool,
    pub skipped_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub index: usize,
    pub kind: PhaseKind,
    pub val_split: Option<usize>,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub lrs: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Total loss of every iteration, in order.
    pub iteration_losses: Vec<f64>,
    /// Sorted record indices that appeared in any training batch.
    pub drawn_records: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub phases: Vec<PhaseReport>,
    pub epochs: Vec<EpochLog>,
    pub iterations: u64,
    pub skipped_steps: u64,
}

impl ScheduleReport {
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

/// Position inside the schedule, at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: usize,
    /// Completed epochs of the current phase.
    pub epoch: usize,
    pub iteration: u64,
    pub global_epoch: usize,
    pub best_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Reference score for early stopping; only improvements above
    /// `min_delta` move it.
    pub plateau_ref: Option<f64>,
    pub stale_epochs: usize,
    pub adam_step: u64,
    pub skipped_steps: u64,
    pub current: Option<PhaseReport>,
    pub report: ScheduleReport,
}

impl TrainState {
    fn new() -> Self {
        TrainState {
            phase: 0,
            epoch: 0,
            iteration: 0,
            global_epoch: 0,
            best_loss: None,
            best_epoch: None,
            plateau_ref: None,
            stale_epochs: 0,
            adam_step: 0,
            skipped_steps: 0,
            current: None,
            report: ScheduleReport {
                phases: Vec::new(),
                epochs: Vec::new(),
                iterations: 0,
                skipped_steps: 0,
            },
        }
    }
}

/// Record indices used by one phase.
#[derive(Debug, Clone)]
pub struct PhaseContext {
    pub index: usize,
    pub spec: PhaseSpec,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub train_pool: Vec<usize>,
    pub val_records: Vec<usize>,
}

pub struct Trainer<'a> {
    pub config: RunConfig,
    dataset: &'a Dataset,
    out_dir: Option<PathBuf>,
    splits: Vec<Vec<String>>,
    /// Stop after this many global epochs, leaving a resumable state behind.
    pub halt_after: Option<usize>,
}

struct Session<'m> {
    model: &'m mut MfuNet<f32>,
    adam: Adam<f32>,
    best: Option<ParamStore<f32>>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, dataset: &'a Dataset, out_dir: Option<&Path>) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        if config.model.image_size != dataset.image_size {
            return Err(Error::Config(format!(
                "model.image_size = {} but the dataset holds {}x{} slices",
                config.model.image_size, dataset.image_size, dataset.image_size
            )));
        }
        if dataset.is_empty() {
            return Err(Error::Config("the dataset is empty".into()));
        }
        let splits = if config.schedule.rotate {
            split_dataset(&dataset.case_ids(), super::PhaseSchedule::FOLDS, config.schedule.split_seed)?
        } else {
            Vec::new()
        };
        Ok(Trainer {
            config,
            dataset,
            out_dir: out_dir.map(Path::to_path_buf),
            splits,
            halt_after: None,
        })
    }

    pub fn splits(&self) -> &[Vec<String>] {
        &self.splits
    }

    pub fn phase_context(&self, index: usize) -> Result<PhaseContext> {
        let specs = self.config.schedule.specs();
        let spec = *specs
            .get(index)
            .ok_or_else(|| Error::Config(format!("schedule has no phase {index}")))?;
        let all = self.dataset.case_ids();
        let (train_cases, val_cases) = match spec.val_split {
            Some(k) => {
                let val = self.splits[k].clone();
                (all.into_iter().filter(|c| !val.contains(c)).collect(), val)
            }
            None => (all, Vec::new()),
        };
        Ok(PhaseContext {
            index,
            spec,
            train_pool: self.dataset.indices_of(&train_cases),
            val_records: self.dataset.indices_of(&val_cases),
            train_cases,
            val_cases,
        })
    }

    fn epoch_iterations(&self, pool: usize) -> usize {
        match self.config.train.epoch_iterations {
            0 => pool.div_ceil(self.config.sampler.n0),
            n => n,
        }
    }

    /// Runs the whole schedule from scratch.
    pub fn run(&self, model: &mut MfuNet<f32>) -> Result<ScheduleReport> {
        self.check_model(model)?;
        let adam = Adam::new(self.config.train.adam, model.params());
        let session = Session {
            model,
            adam,
            best: None,
            state: TrainState::new(),
        };
        self.drive(session)
    }

    /// Continues from a state directory written by a previous run.
    pub fn resume(&self, state_dir: &Path) -> Result<(MfuNet<f32>, ScheduleReport)> {
        let mut model: MfuNet<f32> = checkpoint::load(&state_dir.join("model"))?;
        self.check_model(&model)?;
        let text = fs::read_to_string(state_dir.join("state.json")).map_err(|e| Error::io(state_dir.join("state.json"), e))?;
        let state: TrainState = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: state_dir.join("state.json"),
            detail: e.to_string(),
        })?;
        let mut adam = Adam::new(self.config.train.adam, model.params());
        adam.step = state.adam_step;
        adam.skipped = state.skipped_steps;
        for (i, (m, v)) in adam.m.iter_mut().zip(adam.v.iter_mut()).enumerate() {
            *m = io::read_tensor::<f32>(&state_dir.join(format!("adam/m{i}.ndt")))?.into_data();
            *v = io::read_tensor::<f32>(&state_dir.join(format!("adam/v{i}.ndt")))?.into_data();
        }
        let best = if state_dir.join("best").exists() {
            let mut best = model.params().clone();
            let mut tmp = model.clone();
            checkpoint::load_into(&mut tmp, &state_dir.join("best"))?;
            best.copy_values_from(tmp.params())?;
            Some(best)
        } else {
            None
        };
        let report = {
            let session = Session {
                model: &mut model,
                adam,
                best,
                state,
            };
            self.drive(session)?
        };
        Ok((model, report))
    }

    fn check_model(&self, model: &MfuNet<f32>) -> Result<()> {
        if model.config() != &self.config.model {
            return Err(Error::Config("the model was built from a different model configuration".into()));
        }
        Ok(())
    }

    fn drive(&self, mut s: Session<'_>) -> Result<ScheduleReport> {
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            io::write_bytes(&dir.join("config.toml"), self.config.to_toml()?.as_bytes())?;
            self.write_log(&s.state.report)?;
        }
        let n_phases = self.config.schedule.specs().len();
        while s.state.phase < n_phases {
            let ctx = self.phase_context(s.state.phase)?;
            let finished = run_phase(self, &mut s, &ctx)?;
            if !finished {
                return Ok(s.state.report);
            }
        }
        if let Some(dir) = &self.out_dir {
            checkpoint::save(s.model, &dir.join("final"))?;
        }
        s.state.report.iterations = s.state.iteration;
        s.state.report.skipped_steps = s.state.skipped_steps;
        Ok(s.state.report)
    }

    fn write_log(&self, report: &ScheduleReport) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            io::write_bytes(&dir.join("metrics.jsonl"), report.metrics_jsonl().as_bytes())?;
        }
        Ok(())
    }

    fn save_state(&self, s: &Session<'_>, dir: &Path) -> Result<()> {
        checkpoint::save(s.model, &dir.join("model"))?;
        let adam_dir = dir.join("adam");
        fs::create_dir_all(&adam_dir).map_err(|e| Error::io(&adam_dir, e))?;
        for (i, (m, v)) in s.adam.m.iter().zip(&s.adam.v).enumerate() {
            io::write_tensor(&adam_dir.join(format!("m{i}.ndt")), &NdTensor::new(vec![m.len()], m.clone())?)?;
            io::write_tensor(&adam_dir.join(format!("v{i}.ndt")), &NdTensor::new(vec![v.len()], v.clone())?)?;
        }
        let best_dir = dir.join("best");
        match &s.best {
            Some(best) => {
                let mut snapshot = s.model.clone();
                snapshot.params_mut().copy_values_from(best)?;
                checkpoint::save(&snapshot, &best_dir)?;
            }
            None if best_dir.exists() => fs::remove_dir_all(&best_dir).map_err(|e| Error::io(&best_dir, e))?,
            None => {}
        }
        let mut state = s.state.clone();
        state.adam_step = s.adam.step;
        state.skipped_steps = s.adam.skipped;
        let json = serde_json::to_string_pretty(&state).map_err(|e| Error::Config(e.to_string()))?;
        io::write_bytes(&dir.join("state.json"), json.as_bytes())
    }

    fn train_step(&self, s: &mut Session<'_>, batch: &Batch, lr: f64) -> Result<(f64, [f64; 5])> {
        let tape = Tape::new();
        let (value, terms, grads) = {
            let f = Forward::new(&tape, s.model.params(), true);
            let [a, b, c] = &batch.images;
            let out = s.model.forward_tensors(&f, [a, b, c])?;
            let loss = total_loss(&tape, &out, &batch.y_ana, &batch.y_pat, &self.config.loss)?;
            let value = tape.item(loss.total) as f64;
            if !value.is_finite() {
                return Err(Error::Numeric { op: "training loss" });
            }
            let terms = std::array::from_fn(|i| loss.weighted(i));
            (value, terms, tape.backward(loss.total))
        };
        let grads = match grads {
            Ok(grads) => grads,
            Err(e) if e.is_numeric() => {
                s.adam.skipped += 1;
                log::warn!("non-finite gradient at iteration {}; step skipped", batch.draw.iteration);
                return Ok((value, terms));
            }
            Err(e) => return Err(e),
        };
        let params = s.model.params_mut();
        params.zero_grad();
        params.accumulate(&grads)?;
        s.adam.update(params, lr);
        Ok((value, terms))
    }

    fn diverged(&self, s: &Session<'_>, err: Error) -> Error {
        if let Some(dir) = &self.out_dir {
            let diag = dir.join("diagnostic");
            if let Err(e) = self.save_state(s, &diag) {
                log::error!("could not write diagnostic checkpoint: {e}");
            } else {
                log::error!("training diverged; diagnostic checkpoint in {}", diag.display());
            }
        }
        err
    }
}

/// Trains one phase from the session's current epoch. Returns false when the
/// run halted before the phase finished.
fn run_phase(trainer: &Trainer<'_>, s: &mut Session<'_>, ctx: &PhaseContext) -> Result<bool> {
    let cfg = &trainer.config;
    if s.state.epoch == 0 && s.state.current.is_none() {
        if ctx.index > 0 && cfg.schedule.reset_optimizer {
            s.adam.reset();
        }
        s.best = None;
        s.state.best_loss = None;
        s.state.best_epoch = None;
        s.state.plateau_ref = None;
        s.state.stale_epochs = 0;
        s.state.current = Some(PhaseReport {
            index: ctx.index,
            kind: ctx.spec.kind,
            val_split: ctx.spec.val_split,
            train_cases: ctx.train_cases.clone(),
            val_cases: ctx.val_cases.clone(),
            epochs_run: 0,
            early_stopped: false,
            best_epoch: None,
            best_val_loss: None,
            lrs: Vec::new(),
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            iteration_losses: Vec::new(),
            drawn_records: Vec::new(),
        });
        log::info!(
            "phase {} ({:?}): {} training slices, {} validation slices",
            ctx.index,
            ctx.spec.kind,
            ctx.train_pool.len(),
            ctx.val_records.len()
        );
    }
    let sampler = Sampler::new(trainer.dataset, ctx.train_pool.clone(), cfg.sampler.clone())?;
    let per_epoch = trainer.epoch_iterations(ctx.train_pool.len()) as u64;
    let mut halted = false;
    while s.state.epoch < ctx.spec.epochs {
        if s.state.stale_epochs >= cfg.schedule.patience && ctx.spec.val_split.is_some() {
            break;
        }
        let lr = cfg.schedule.lr_at(ctx.spec.lr, s.state.epoch);
        let start = s.state.iteration;
        let mut losses = Vec::with_capacity(per_epoch as usize);
        let mut terms = [0f64; 5];
        let mut drawn = Vec::new();
        let mut step = |batch: Batch| -> Result<()> {
            drawn.extend(batch.draw.items.iter().map(|it| it.record));
            match trainer.train_step(s, &batch, lr) {
                Ok((value, t)) => {
                    losses.push(value);
                    terms.iter_mut().zip(t).for_each(|(a, b)| *a += b);
                    Ok(())
                }
                Err(e) if e.is_numeric() => Err(trainer.diverged(s, e)),
                Err(e) => Err(e),
            }
        };
        let range = start..start + per_epoch;
        if cfg.train.prefetch {
            sampler.prefetch(trainer.dataset, range, cfg.train.resample, step)?;
        } else {
            for t in range {
                step(sampler.sample_batch(trainer.dataset, t, cfg.train.resample)?)?;
            }
        }
        s.state.iteration = start + per_epoch;
        let n = losses.len().max(1) as f64;
        let train_loss = losses.iter().sum::<f64>() / n;
        let train_terms = Curves {
            anatomy: (terms[0] + terms[1] + terms[2]) / n,
            infarct: terms[3] / n,
            edema: terms[4] / n,
        };

        let (val_loss, val_curves, best) = if ctx.spec.val_split.is_some() {
            let report = evaluate(s.model, trainer.dataset, &ctx.val_records)?;
            let loss = report.mean_dice_loss();
            let mean = |name: &str| 1.0 - report.summary(name).mean;
            let curves = Curves {
                anatomy: (mean("myo") + mean("lv") + mean("rv")) / 3.0,
                infarct: mean("infarct"),
                edema: mean("edema"),
            };
            let best = s.state.best_loss.is_none_or(|b| loss < b);
            if best {
                s.state.best_loss = Some(loss);
                s.state.best_epoch = Some(s.state.epoch);
                s.best = Some(s.model.params().clone());
            }
            if s.state.plateau_ref.is_none_or(|r| loss < r - cfg.schedule.min_delta) {
                s.state.plateau_ref = Some(loss);
                s.state.stale_epochs = 0;
            } else {
                s.state.stale_epochs += 1;
            }
            (Some(loss), Some(curves), best)
        } else {
            (None, None, false)
        };

        let entry = EpochLog {
            phase: ctx.index,
            kind: ctx.spec.kind,
            val_split: ctx.spec.val_split,
            epoch: s.state.epoch,
            global_epoch: s.state.global_epoch,
            iterations: s.state.iteration,
            lr,
            train_loss,
            train_terms,
            val_dice_loss: val_loss,
            val_curves,
            best,
            skipped_steps: s.adam.skipped,
        };
        log::info!(
            "phase {} epoch {} lr {:.3e} train {:.4} val {}",
            ctx.index,
            s.state.epoch,
            lr,
            train_loss,
            val_loss.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        let current = s.state.current.as_mut().expect("phase report");
        current.epochs_run += 1;
        current.lrs.push(lr);
        current.train_loss.push(train_loss);
        current.val_loss.extend(val_loss);
        current.iteration_losses.extend(&losses);
        current.drawn_records.extend(drawn);
        current.drawn_records.sort_unstable();
        current.drawn_records.dedup();
        s.state.report.epochs.push(entry);
        s.state.epoch += 1;
        s.state.global_epoch += 1;
        trainer.write_log(&s.state.report)?;

        if let Some(dir) = &trainer.out_dir {
            let k = cfg.train.checkpoint_every;
            if k > 0 && s.state.global_epoch % k == 0 {
                trainer.save_state(s, &dir.join("state"))?;
            }
        }
        if trainer.halt_after.is_some_and(|h| s.state.global_epoch >= h) {
            halted = true;
            break;
        }
    }
    if halted {
        if let Some(dir) = &trainer.out_dir {
            trainer.save_state(s, &dir.join("state"))?;
        }
        return Ok(false);
    }

    let mut report = s.state.current.take().expect("phase report");
    report.early_stopped = report.epochs_run < ctx.spec.epochs;
    report.best_epoch = s.state.best_epoch;
    report.best_val_loss = s.state.best_loss;
    if let Some(best) = s.best.take() {
        s.model.params_mut().copy_values_from(&best)?;
    }
    if let Some(dir) = &trainer.out_dir {
        checkpoint::save(s.model, &dir.join(format!("phase{}", ctx.index)))?;
    }
    s.state.report.phases.push(report);
    s.state.phase += 1;
    s.state.epoch = 0;
    s.state.stale_epochs = 0;
    Ok(true)
}

/// Trains a fresh run of the whole schedule.
pub fn run_full_schedule(
    model: &mut MfuNet<f32>,
    dataset: &Dataset,
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<ScheduleReport> {
    Trainer::new(config.clone(), dataset, out_dir)?.run(model)
}

/// Anatomy codes, pathology bits and optional attention summary of one slice.
pub fn predict_record(model: &MfuNet<f32>, record: &SliceRecord) -> Result<(Vec<u8>, Vec<u8>, Option<NdTensor<f32>>)> {
    let shape = vec![1, 1, record.height, record.width];
    let [a, b, c] = record.modalities().map(|m| NdTensor::new(shape.clone(), m.to_vec()));
    let prediction = model.predict([&a?, &b?, &c?])?;
    let ana = argmax_channels(&prediction.anatomy);
    let pat = argmax_channels(&prediction.pathology).into_iter().map(pathology_bits).collect();
    Ok((ana, pat, prediction.attention_received))
}

/// Full-size evaluation of the given records, in order.
pub fn evaluate(model: &MfuNet<f32>, dataset: &Dataset, records: &[usize]) -> Result<EvalReport> {
    let slices = records
        .par_iter()
        .map(|&i| {
            let r = &dataset.records[i];
            let (ana, pat, _) = predict_record(model, r)?;
            Ok(SliceScores::compute(&r.case_id, &r.slice_id, &ana, &pat, &r.y_ana, &r.y_pat))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(slices))
}
