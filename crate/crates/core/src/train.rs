//! Mini-batch training with an L1 loss, Adam and a step-halving learning rate.
//!
//! The batch for update `t` is drawn from a generator seeded with
//! `(seed, stream = t)`, so a run can be stopped and resumed from a checkpoint
//! without changing the remaining loss trace.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config_file::Section;
use crate::data::{Dataset, PatchOptions};
use crate::error::{Error, Result};
use crate::model::{Attention, Checkpoint, DefianModel};
use crate::optim::{halving_lr, Adam};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch: usize,
    pub lr0: f64,
    pub halve_every: u64,
    pub total_updates: u64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Save a checkpoint every this many updates; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub augment: bool,
    /// Batches prepared ahead on a worker thread; 0 samples inline.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            patch: 48,
            lr0: 1e-4,
            halve_every: 200_000,
            total_updates: 2_000,
            seed: 0,
            grad_clip: None,
            checkpoint_every: 0,
            augment: true,
            prefetch: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "patch",
        "lr0",
        "halve_every",
        "total_updates",
        "seed",
        "grad_clip",
        "checkpoint_every",
        "augment",
        "prefetch",
    ];

    pub fn lr_at(&self, update: u64) -> f64 {
        halving_lr(self.lr0, self.halve_every, update)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(None, format!("train.{f}"), m));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.patch == 0 {
            return bad("patch", "must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", "must be positive and finite");
        }
        if self.halve_every == 0 {
            return bad("halve_every", "must be positive");
        }
        if self.total_updates == 0 {
            return bad("total_updates", "must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("grad_clip", "must be positive and finite");
            }
        }
        Ok(())
    }

    /// Reads a `[train]` section; absent keys keep their defaults.
    /// `grad_clip = off` (or 0) disables clipping.
    pub fn from_section(s: &Section) -> Result<Self> {
        s.check_known(Self::KEYS)?;
        let d = Self::default();
        let grad_clip = match s.raw("grad_clip").map(|e| e.value.as_str()) {
            None | Some("off") | Some("none") => None,
            Some(_) => s.get::<f64>("grad_clip")?.filter(|&c| c != 0.0),
        };
        let cfg = Self {
            batch_size: s.get_or("batch_size", d.batch_size)?,
            patch: s.get_or("patch", d.patch)?,
            lr0: s.get_or("lr0", d.lr0)?,
            halve_every: s.get_or("halve_every", d.halve_every)?,
            total_updates: s.get_or("total_updates", d.total_updates)?,
            seed: s.get_or("seed", d.seed)?,
            grad_clip,
            checkpoint_every: s.get_or("checkpoint_every", d.checkpoint_every)?,
            augment: s.get_or("augment", d.augment)?,
            prefetch: s.get_or("prefetch", d.prefetch)?,
        };
        cfg.validate().map_err(|e| match e {
            Error::Config(c) => s.error(c.field.trim_start_matches("train."), c.msg),
            other => other,
        })?;
        Ok(cfg)
    }
}

/// Mean absolute error over all elements.
pub fn mae_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    g.mae(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based update number.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in trace {
        let _ = writeln!(out, "{},{:e},{}", r.step, r.lr, r.loss);
    }
    out
}

/// Trailing moving average with window `window` (shorter at the start).
pub fn smoothed(trace: &[LossRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, r) in trace.iter().enumerate() {
        acc += r.loss;
        if i >= w {
            acc -= trace[i - w].loss;
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// The batch used for update `update`.
pub fn batch_for_update(dataset: &Dataset, cfg: &TrainConfig, update: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(update);
    let opts = PatchOptions {
        patch: cfg.patch,
        scale: dataset.scale(),
        augment: cfg.augment,
        rgb_range: 1.0,
    };
    dataset.sample_batch(cfg.batch_size, &opts, &mut rng)
}

/// Owns the model and optimizer state during a run.
pub struct Trainer {
    model: DefianModel<f32>,
    adam: Adam<f32>,
    updates: u64,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: DefianModel<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            adam: Adam::default(),
            updates: 0,
            cfg,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.model()?;
        let adam = ckpt.adam_for(&model)?.unwrap_or_default();
        Ok(Self {
            model,
            adam,
            updates: ckpt.updates,
            cfg,
        })
    }

    pub fn model(&self) -> &DefianModel<f32> {
        &self.model
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(&self.adam), self.updates)
    }

    /// One update on a given batch.
    pub fn step_on(&mut self, lr_batch: Tensor<f32>, hr_batch: Tensor<f32>) -> Result<LossRecord> {
        let lr = self.cfg.lr_at(self.updates);
        let mut g = Graph::new();
        let x = g.input(lr_batch);
        let target = g.input(hr_batch);
        let pred = self.model.forward(&mut g, x, Attention::Learned)?;
        let loss = mae_loss(&mut g, pred, target)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            let culprit = g.first_non_finite().unwrap_or_else(|| "the loss".into());
            return Err(Error::NonFinite(format!(
                "update {}: loss is {value}; first at {culprit}",
                self.updates + 1
            )));
        }
        g.backward(loss)?;
        let mut grads = g.param_grads();
        if !grads.all_finite() {
            let name = grads
                .iter()
                .find(|(_, t)| !t.all_finite())
                .map(|(id, _)| self.model.store().get(id).name.clone())
                .unwrap_or_default();
            return Err(Error::NonFinite(format!(
                "update {}: gradient of {name}",
                self.updates + 1
            )));
        }
        if let Some(max) = self.cfg.grad_clip {
            grads.clip_global_norm(max);
        }
        self.adam.step(self.model.store_mut(), &grads, lr);
        self.updates += 1;
        Ok(LossRecord {
            step: self.updates,
            lr,
            loss: value,
        })
    }

    /// Runs until `until` total updates, saving checkpoints into `out_dir` if
    /// given. `on_step` sees every record as it is produced.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        until: u64,
        out_dir: Option<&Path>,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let start = self.updates;
        if until <= start {
            return Ok(Vec::new());
        }
        let mut trace = Vec::with_capacity((until - start) as usize);
        let every = self.cfg.checkpoint_every;
        let mut handle = |this: &mut Self, batch: Result<(Tensor<f32>, Tensor<f32>)>| -> Result<()> {
            let (lr, hr) = batch?;
            let rec = this.step_on(lr, hr)?;
            on_step(&rec);
            trace.push(rec);
            if let Some(dir) = out_dir {
                if every > 0 && this.updates.is_multiple_of(every) && this.updates != until {
                    this.checkpoint()
                        .save(&dir.join(format!("checkpoint_{:06}.dfan", this.updates)))?;
                }
            }
            Ok(())
        };
        if self.cfg.prefetch == 0 {
            for t in start..until {
                handle(self, batch_for_update(dataset, &self.cfg, t))?;
            }
        } else {
            let cfg = self.cfg.clone();
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel(cfg.prefetch);
                scope.spawn(move || {
                    for t in start..until {
                        if tx.send(batch_for_update(dataset, &cfg, t)).is_err() {
                            break;
                        }
                    }
                });
                for batch in rx.iter() {
                    handle(self, batch)?;
                }
                Ok(())
            })?;
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("final.dfan"))?;
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
    pub final_path: Option<PathBuf>,
}

/// Trains `model` for `cfg.total_updates` updates from scratch.
pub fn train(
    model: DefianModel<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if dataset.scale() != model.config().scale {
        return Err(Error::InvalidArgument(format!(
            "dataset scale {} does not match model scale {}",
            dataset.scale(),
            model.config().scale
        )));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let trace = trainer.run(dataset, cfg.total_updates, out_dir, |_| {})?;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("loss.csv"), trace_csv(&trace))?;
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        trace,
        final_path: out_dir.map(|d| d.join("final.dfan")),
    })
}
