//! Minibatch training loop.
//!
//! Step `s` draws everything random (batch rows, reparameterisation noise,
//! dropout masks) from `RngStream::new(seed).fork(s)`, so a run resumed from
//! a checkpoint at step `s` continues exactly as the uninterrupted run.

use serde::{Deserialize, Serialize};

use crate::data::MaskedData;
use crate::error::{Error, Result};
use crate::nd::{AdamConfig, AdamState, LrSchedule};
use crate::objectives::{draw_eps, loss_and_grad, LossBreakdown, Objective};
use crate::rng::RngStream;
use crate::vae::{is_encoder, Checkpoint, VaeConfig, VaeParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    All,
    /// Only `enc.*` arrays move; decoder and noise stay bit-identical.
    EncoderOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// `None` picks IWAE when the model's `iwae_k > 1`, else a one-draw ELBO.
    pub objective: Option<Objective>,
    pub scope: TrainScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch_size: 64,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            objective: None,
            scope: TrainScope::All,
        }
    }
}

impl TrainConfig {
    /// Toy-experiment settings: constant 1e-4, no weight decay.
    pub fn toy(steps: u64, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 64,
            schedule: LrSchedule::constant(1e-4),
            adam: AdamConfig { weight_decay: 0.0, ..AdamConfig::default() },
            seed,
            objective: None,
            scope: TrainScope::All,
        }
    }

    pub fn objective_for(&self, model: &VaeConfig) -> Objective {
        self.objective.unwrap_or(if model.iwae_k > 1 {
            Objective::Iwae { k: model.iwae_k }
        } else {
            Objective::Elbo { m: 1 }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub params: VaeParams,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: u64,
    pub config: TrainConfig,
    objective: Objective,
}

impl Trainer {
    pub fn new(params: VaeParams, config: TrainConfig) -> Result<Self> {
        params.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let objective = config.objective_for(&params.config);
        objective.validate()?;
        Ok(Self { params, adam: AdamState::new(config.adam), step: 0, config, objective })
    }

    /// Fresh model initialised from the training seed.
    pub fn from_seed(model: &VaeConfig, config: TrainConfig) -> Result<Self> {
        let params = VaeParams::init(model, &mut RngStream::new(config.seed).fork(u64::MAX))?;
        Self::new(params, config)
    }

    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let mut t = Self::new(ck.vae_params()?, config)?;
        t.step = ck.step;
        if let Some(st) = &ck.optimizer {
            t.adam = st.clone();
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(&self.params, self.config.seed, self.step, self.config.adam);
        ck.optimizer = Some(self.adam.clone());
        ck
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    fn trainable(&self) -> fn(&str) -> bool {
        match self.config.scope {
            TrainScope::All => |_| true,
            TrainScope::EncoderOnly => is_encoder,
        }
    }

    /// Run one optimiser step; returns the batch loss before the update.
    pub fn train_step(&mut self, data: &MaskedData) -> Result<LogRow> {
        if data.rows() == 0 {
            return Err(Error::Data("no training rows".into()));
        }
        let rng = RngStream::new(self.config.seed).fork(self.step);
        let idx = rng.fork(1).sample_indices(data.rows(), self.config.batch_size);
        let batch = data.select_rows(&idx);
        let eps = draw_eps(batch.rows(), &self.objective, self.params.config.latent_dim, &mut rng.fork(2));
        let mut drop_rng = rng.fork(3);
        let dropout = (self.params.config.dropout > 0.0).then_some(&mut drop_rng);
        let (loss, grads) = loss_and_grad(&self.params, &batch, &self.objective, &eps, dropout, &self.trainable())?;
        let lr = self.config.schedule.lr_at(self.step);
        self.adam.step(&mut self.params.tensors, &grads, lr)?;
        self.step += 1;
        Ok(row(self.step, &loss, lr))
    }

    /// Train until `config.steps` completed steps, calling `on_step` after each.
    pub fn run(&mut self, data: &MaskedData, mut on_step: impl FnMut(&Trainer, &LogRow) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let r = self.train_step(data)?;
            on_step(self, &r)?;
        }
        Ok(())
    }
}

fn row(step: u64, l: &LossBreakdown, lr: f64) -> LogRow {
    LogRow { step, total: l.total, recon: l.recon_loglik, kl: l.kl, lr }
}

/// Exponential moving average of a loss series, used to compare final
/// training losses without single-batch noise.
pub fn smoothed_tail(losses: &[f64], window: usize) -> f64 {
    let w = window.min(losses.len()).max(1);
    let tail = &losses[losses.len() - w..];
    tail.iter().sum::<f64>() / w as f64
}
