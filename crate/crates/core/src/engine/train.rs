//! Joint training of the generator and the perception model.
//!
//! Each step: draw a timestep and noise, corrupt the frames, predict
//! occupancy from the noisy first frame, condition the denoiser on it, and
//! minimize L_LDM + sqrt(alpha_bar_t) * L_p. Stage 1 freezes the perception
//! weights; stage 2 trains both. In independent mode the conditioning
//! occupancy comes from a frozen copy of the perception net applied to clean
//! frames, so no gradient couples the two tasks.

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::AdamW;
use crate::autodiff::{Tape, Var};
use crate::denoiser::DenoiserNet;
use crate::error::{OccError, Result};
use crate::params::Params;
use crate::perception::{perception_loss, LossWeights, PerceptionNet};
use crate::rng::RngStream;
use crate::schedule::{q_sample, NoiseSchedule};
use crate::synthworld::Sample;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Mutual,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    /// Diffuse all N frames jointly (shared grid, shared timestep).
    All,
    /// Diffuse only the first frame.
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptionInput {
    /// Perception sees the noisy frame (the default reading).
    Noisy,
    /// Perception sees the clean frame (the literal-algorithm reading).
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr_denoiser: f64,
    pub lr_perception: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub mode: TrainMode,
    pub train_frames: FrameMode,
    pub perception_input: PerceptionInput,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 300,
            stage2_steps: 700,
            batch_size: 2,
            lr_denoiser: 2e-4,
            lr_perception: 1e-3,
            weight_decay: 1e-4,
            loss_weights: LossWeights::default(),
            mode: TrainMode::Mutual,
            train_frames: FrameMode::All,
            perception_input: PerceptionInput::Noisy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps + self.stage2_steps < 1 {
            return Err(OccError::InvalidConfig("need at least one training step".into()));
        }
        if self.batch_size == 0 {
            return Err(OccError::InvalidConfig("batch size must be positive".into()));
        }
        self.loss_weights.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }
}

/// Generator and perception model trained together.
pub struct Nets<T> {
    pub denoiser: DenoiserNet<T>,
    pub perception: PerceptionNet<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub l_ldm: f64,
    pub l_p: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub miou: f64,
}

pub struct Trainer<T> {
    pub nets: Nets<T>,
    pub sched: NoiseSchedule,
    pub cfg: TrainConfig,
    pub class_weights: Vec<f64>,
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    opt_denoiser: AdamW<T>,
    opt_mda: Option<AdamW<T>>,
    opt_perception: AdamW<T>,
    /// Independent-mode conditioning source, frozen at initialization.
    frozen_delta: Option<PerceptionNet<T>>,
    root: RngStream,
}

/// Map an image in [0,1] to the diffusion working range [-1,1].
pub fn to_signed<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|x| x + x - T::ONE)
}

/// Inverse of `to_signed`, clamped back to [0,1].
pub fn to_unit<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|x| ((x + T::ONE) * T::of(0.5)).maxv(T::ZERO).minv(T::ONE))
}

impl<T: Real> Trainer<T> {
    pub fn new(
        nets: Nets<T>,
        sched: NoiseSchedule,
        cfg: TrainConfig,
        class_weights: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        let opt_denoiser = AdamW::new(cfg.lr_denoiser, cfg.weight_decay, &nets.denoiser.params);
        let opt_mda = nets
            .denoiser
            .mda
            .as_ref()
            .map(|m| AdamW::new(cfg.lr_denoiser, cfg.weight_decay, &m.params));
        let opt_perception =
            AdamW::new(cfg.lr_perception, cfg.weight_decay, &nets.perception.params);
        let frozen_delta = match cfg.mode {
            TrainMode::Independent => Some(PerceptionNet {
                cfg: nets.perception.cfg.clone(),
                params: nets.perception.params.clone(),
            }),
            TrainMode::Mutual => None,
        };
        let root = RngStream::new(cfg.seed);
        Ok(Trainer {
            nets,
            sched,
            cfg,
            class_weights,
            step: 0,
            history: Vec::new(),
            evals: Vec::new(),
            opt_denoiser,
            opt_mda,
            opt_perception,
            frozen_delta,
            root,
        })
    }

    /// The frozen conditioning net used by independent mode, if any.
    pub fn frozen_conditioning(&self) -> Option<&PerceptionNet<T>> {
        self.frozen_delta.as_ref()
    }

    pub fn stage(&self) -> u8 {
        if (self.step as usize) < self.cfg.stage1_steps {
            1
        } else {
            2
        }
    }

    /// Deterministic batch indices for a given step.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let mut s = self.root.derive_n("batch", step);
        (0..self.cfg.batch_size).map(|_| s.below(n as u64) as usize).collect()
    }

    /// One optimizer step over a batch. Returns the recorded losses.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(OccError::InvalidConfig("empty batch".into()));
        }
        let stage = self.stage();
        let t_count = self.sched.len();
        let tape: Tape<T> = Tape::new();
        let theta_vars = self.nets.denoiser.lift(&tape, true);
        let delta_trainable = stage == 2;
        let delta_vars = self.nets.perception.params.lift(&tape, delta_trainable);

        let mut total_acc: Option<Var<T>> = None;
        let mut ldm_acc = 0.0f64;
        let mut lp_acc = 0.0f64;

        for (bi, sample) in batch.iter().enumerate() {
            let mut t_stream = self.root.derive_n("t", self.step * 1024 + bi as u64);
            let t = t_stream.below(t_count as u64) as usize;
            let frames_used = match self.cfg.train_frames {
                FrameMode::All => sample.frames.len(),
                FrameMode::First => 1,
            };
            let cams = &sample.cameras[..frames_used];

            // corrupt the frames
            let mut noisy = Vec::with_capacity(frames_used);
            let mut epses = Vec::with_capacity(frames_used);
            for f in 0..frames_used {
                let mut es =
                    self.root.derive_n("eps", (self.step * 1024 + bi as u64) * 16 + f as u64);
                let clean = to_signed(&sample.frames[f].cast::<T>());
                let eps = Tensor::randn(clean.shape(), 1.0, &mut es);
                let y_t = q_sample(&clean, t, &eps, &self.sched)?;
                noisy.push(y_t);
                epses.push(eps);
            }

            // perception on its configured input
            let percep_in = match self.cfg.perception_input {
                PerceptionInput::Noisy => noisy[0].clone(),
                PerceptionInput::Clean => to_signed(&sample.frames[0].cast::<T>()),
            };
            let logits_live =
                self.nets.perception.forward(&delta_vars, &tape.constant(percep_in))?;
            let l_p = perception_loss(
                &logits_live,
                &sample.grid,
                &self.cfg.loss_weights,
                &self.class_weights,
            )?;

            // conditioning source
            let cond_logits: Var<T> = match self.cfg.mode {
                TrainMode::Mutual => logits_live.clone(),
                TrainMode::Independent => {
                    let frozen = self.frozen_delta.as_ref().expect("frozen copy exists");
                    let clean0 = to_signed(&sample.frames[0].cast::<T>());
                    tape.constant(frozen.predict(&clean0)?)
                }
            };

            // denoise and measure the reconstruction loss
            let frame_vars: Vec<Var<T>> =
                noisy.iter().map(|f| tape.constant(f.clone())).collect();
            let eps_hats = self.nets.denoiser.forward(
                &theta_vars,
                &frame_vars,
                t,
                &sample.spec.encode_tokens(),
                Some(&cond_logits),
                cams,
            )?;
            let mut sq_sum: Option<Var<T>> = None;
            let mut numel = 0usize;
            for (eh, eps) in eps_hats.iter().zip(&epses) {
                numel += eps.numel();
                let diff = eh.sub(&tape.constant(eps.clone()))?;
                let s = diff.square()?.sum_all()?;
                sq_sum = Some(match sq_sum {
                    Some(acc) => acc.add(&s)?,
                    None => s,
                });
            }
            let l_ldm = sq_sum.unwrap().mul_scalar(1.0 / numel as f64)?;

            // total = L_LDM + sqrt(alpha_bar_t) * L_p
            let w = self.sched.alpha_bar(t).sqrt();
            let item_total = l_ldm.add(&l_p.mul_scalar(w)?)?;

            ldm_acc += l_ldm.value().item().to_f64();
            lp_acc += l_p.value().item().to_f64();
            total_acc = Some(match total_acc {
                Some(acc) => acc.add(&item_total)?,
                None => item_total,
            });
        }

        let loss = total_acc.unwrap().mul_scalar(1.0 / batch.len() as f64)?;
        let loss_val = loss.value().item().to_f64();
        if !loss_val.is_finite() {
            return Err(OccError::NonFiniteLoss {
                step: self.step,
                detail: format!(
                    "total={loss_val}, l_ldm={}, l_p={}",
                    ldm_acc / batch.len() as f64,
                    lp_acc / batch.len() as f64
                ),
            });
        }

        let grads = tape.backward(&loss)?;
        let g_den = theta_vars.net.collect_grads(&self.nets.denoiser.params, &grads);
        self.opt_denoiser.apply(&mut self.nets.denoiser.params, &g_den)?;
        if let (Some(mda), Some(opt), Some(mda_vars)) = (
            self.nets.denoiser.mda.as_mut(),
            self.opt_mda.as_mut(),
            theta_vars.mda.as_ref(),
        ) {
            let g_mda = mda_vars.collect_grads(&mda.params, &grads);
            opt.apply(&mut mda.params, &g_mda)?;
        }
        if delta_trainable {
            let g_per = delta_vars.collect_grads(&self.nets.perception.params, &grads);
            self.opt_perception.apply(&mut self.nets.perception.params, &g_per)?;
        }

        let rec = StepRecord {
            step: self.step,
            stage,
            l_ldm: ldm_acc / batch.len() as f64,
            l_p: lp_acc / batch.len() as f64,
            total: loss_val,
        };
        self.history.push(rec);
        self.step += 1;
        Ok(rec)
    }

    /// Run until the configured step budget, optionally evaluating held-out
    /// mIoU every `eval_every` steps.
    pub fn run(
        &mut self,
        train: &[Sample],
        heldout: &[Sample],
        eval_every: usize,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(OccError::InvalidConfig("empty training set".into()));
        }
        while (self.step as usize) < self.cfg.total_steps() {
            let idx = self.batch_indices(self.step, train.len());
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let rec = self.train_step(&batch)?;
            on_step(&rec);
            if eval_every > 0 && (self.step as usize) % eval_every == 0 && !heldout.is_empty() {
                let m = self.eval_miou(heldout)?;
                self.evals.push(EvalRecord { step: self.step, miou: m });
            }
        }
        Ok(())
    }

    /// Mean held-out mIoU of the live perception net on clean frames.
    pub fn eval_miou(&self, heldout: &[Sample]) -> Result<f64> {
        let mut acc = 0.0;
        for s in heldout {
            let img = to_signed(&s.frames[0].cast::<T>());
            let grid = self.nets.perception.predict_grid(&img, s.grid.voxel_size)?;
            acc += crate::perception::miou(&grid, &s.grid, true)?.mean;
        }
        Ok(acc / heldout.len() as f64)
    }

    /// Package the live state into a checkpoint.
    pub fn to_checkpoint(&self, config_hash: &str, config_json: &str) -> Checkpoint<T> {
        let mut tensors = Params::new();
        tensors.extend_prefixed("denoiser", &self.nets.denoiser.params);
        if let Some(m) = &self.nets.denoiser.mda {
            tensors.extend_prefixed("mda", &m.params);
        }
        tensors.extend_prefixed("perception", &self.nets.perception.params);
        self.opt_denoiser.export_state(&self.nets.denoiser.params, "opt/denoiser", &mut tensors);
        if let (Some(m), Some(opt)) = (&self.nets.denoiser.mda, &self.opt_mda) {
            opt.export_state(&m.params, "opt/mda", &mut tensors);
        }
        self.opt_perception.export_state(
            &self.nets.perception.params,
            "opt/perception",
            &mut tensors,
        );
        // schedule betas, for provenance alongside the config json
        let betas: Vec<T> = self.sched.betas().iter().map(|&b| T::of(b)).collect();
        tensors.insert(
            "schedule/beta",
            Tensor::from_vec(vec![betas.len()], betas).unwrap(),
        );
        Checkpoint {
            config_hash: config_hash.to_string(),
            config_json: config_json.to_string(),
            step: self.step,
            history: self.history.clone(),
            evals: self.evals.clone(),
            tensors,
        }
    }

    /// Restore live state from a checkpoint (nets must match in shape).
    pub fn restore(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        let take = |prefix: &str, into: &mut Params<T>| -> Result<()> {
            let names: Vec<String> = into.iter().map(|(n, _)| n.to_string()).collect();
            for name in names {
                let stored = ck.tensors.get(&format!("{prefix}/{name}"))?;
                into.set(&name, stored.clone())?;
            }
            Ok(())
        };
        take("denoiser", &mut self.nets.denoiser.params)?;
        if let Some(m) = self.nets.denoiser.mda.as_mut() {
            take("mda", &mut m.params)?;
        }
        take("perception", &mut self.nets.perception.params)?;
        self.opt_denoiser.import_state(
            &self.nets.denoiser.params,
            "opt/denoiser",
            &ck.tensors,
        )?;
        if let (Some(m), Some(opt)) = (&self.nets.denoiser.mda, self.opt_mda.as_mut()) {
            opt.import_state(&m.params, "opt/mda", &ck.tensors)?;
        }
        self.opt_perception.import_state(
            &self.nets.perception.params,
            "opt/perception",
            &ck.tensors,
        )?;
        self.step = ck.step;
        self.history = ck.history.clone();
        self.evals = ck.evals.clone();
        Ok(())
    }
}
