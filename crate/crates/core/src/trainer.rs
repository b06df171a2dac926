//! Truncated-BPTT training: SGD with global-norm gradient clipping and
//! non-monotonically triggered ASGD weight averaging.

use std::time::Instant;

use crate::corpus::{make_batches, TokenStream, THINKING_ID};
use crate::error::{Error, Result};
use crate::eval::masked_perplexity;
use crate::inject::{derive_loss_mask, inject, ThinkingTokenConfig};
use crate::math::dot;
use crate::model::{init_params, loss_and_grad, Dims, HiddenState, ModelParams};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub bptt_len: usize,
    pub batch_lanes: usize,
    pub clip_norm: f64,
    pub hidden: usize,
    pub embed: usize,
    pub layers: usize,
    pub learn_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Width of the non-monotonic trigger window.
    pub asgd_nonmono: usize,
    /// When set, switch to averaging at this epoch instead of using the
    /// non-monotonic criterion.
    pub asgd_start_epoch: Option<usize>,
    /// Thinking tokens inserted after each observed token; 0 = baseline.
    pub thinking_n: usize,
    /// Exclude `<T>`-target positions from the training loss as well.
    /// Evaluation always excludes them.
    pub train_mask_thinking: bool,
    pub tie_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bptt_len: 70,
            batch_lanes: 12,
            clip_norm: 0.25,
            hidden: 450,
            embed: 450,
            layers: 1,
            learn_rate: 2.0,
            max_epochs: 40,
            seed: 0,
            asgd_nonmono: 5,
            asgd_start_epoch: None,
            thinking_n: 0,
            train_mask_thinking: false,
            tie_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bptt_len == 0 || self.batch_lanes == 0 || self.hidden == 0 || self.embed == 0 || self.max_epochs == 0 {
            return Err(Error::Config("bptt, batch, hidden, embed and epochs must be positive".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.layers != 1 {
            return Err(Error::Config("only a single LSTM layer is supported (layers = 1)".into()));
        }
        if self.tie_weights && self.embed != self.hidden {
            return Err(Error::Config(format!(
                "weight tying requires embed == hidden (got {} and {})",
                self.embed, self.hidden
            )));
        }
        Ok(())
    }
}

/// Scale all gradients jointly so their concatenated L2 norm does not
/// exceed `clip_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut ModelParams, clip_norm: f64) -> Result<f64> {
    assert!(clip_norm > 0.0);
    let mut sumsq = 0.0;
    for (name, t) in grads.tensors() {
        let s = dot(t, t);
        if !s.is_finite() {
            return Err(Error::NonFiniteGradient { tensor: name });
        }
        sumsq += s;
    }
    let norm = sumsq.sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for (_, t) in grads.tensors_mut() {
            for v in t.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// p ← p − learn_rate · g, elementwise.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, learn_rate: f64) -> Result<()> {
    for ((name, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        let mut ok = true;
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= learn_rate * gv;
            ok &= pv.is_finite();
        }
        if !ok {
            return Err(Error::NonFiniteParam { tensor: name });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMode {
    Sgd,
    Averaging,
}

impl std::fmt::Display for OptimizerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerMode::Sgd => write!(f, "sgd"),
            OptimizerMode::Averaging => write!(f, "asgd"),
        }
    }
}

/// SGD until the non-monotonic trigger fires, then a running arithmetic
/// mean over every subsequent parameter iterate.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    mode: OptimizerMode,
    averaged: Option<ModelParams>,
    steps_averaged: usize,
    val_nll_history: Vec<f64>,
    nonmono: usize,
}

impl OptimizerState {
    pub fn new(nonmono: usize) -> Self {
        OptimizerState {
            mode: OptimizerMode::Sgd,
            averaged: None,
            steps_averaged: 0,
            val_nll_history: Vec::new(),
            nonmono,
        }
    }

    pub fn mode(&self) -> OptimizerMode {
        self.mode
    }

    pub fn steps_averaged(&self) -> usize {
        self.steps_averaged
    }

    pub fn averaged(&self) -> Option<&ModelParams> {
        self.averaged.as_ref()
    }

    /// Fold the current iterate into the running mean:
    /// avg ← avg + (p − avg)/(n+1).
    pub fn accumulate(&mut self, params: &ModelParams) {
        let avg = self.averaged.as_mut().expect("accumulate requires averaging mode");
        let n1 = (self.steps_averaged + 1) as f64;
        for ((_, a), (_, p)) in avg.tensors_mut().into_iter().zip(params.tensors()) {
            for (av, pv) in a.iter_mut().zip(p) {
                *av += (*pv - *av) / n1;
            }
        }
        self.steps_averaged += 1;
    }

    /// Start averaging. The current iterate becomes the first averaged
    /// snapshot.
    pub fn trigger(&mut self, params: &ModelParams) {
        if self.mode == OptimizerMode::Sgd {
            self.mode = OptimizerMode::Averaging;
            self.averaged = Some(params.clone());
            self.steps_averaged = 1;
        }
    }

    /// Record an end-of-epoch validation NLL and switch to averaging when
    /// it fails to beat the best of the last `nonmono` recorded values
    /// (requiring at least nonmono+1 validations overall). Returns whether
    /// the trigger fired.
    pub fn maybe_trigger_asgd(&mut self, current_val_nll: f64, params: &ModelParams) -> bool {
        let window = self.nonmono.max(1);
        let prior = &self.val_nll_history;
        let fire = self.mode == OptimizerMode::Sgd && prior.len() >= window && {
            let tail = &prior[prior.len() - window..];
            let best = tail.iter().cloned().fold(f64::INFINITY, f64::min);
            current_val_nll >= best
        };
        self.val_nll_history.push(current_val_nll);
        if fire {
            self.trigger(params);
        }
        fire
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub valid_ppl: f64,
    pub lr: f64,
    pub mode: OptimizerMode,
    pub seconds: f64,
}

pub struct TrainOutcome {
    /// Averaged parameters if the trigger fired, otherwise the last iterate.
    pub final_params: ModelParams,
    /// Snapshot with the lowest masked validation perplexity.
    pub best_params: ModelParams,
    pub best_valid_ppl: f64,
    pub log: Vec<EpochRecord>,
}

/// Train on `train_stream` (raw, uninjected ids): applies the
/// thinking-token transform when configured, batches contiguously, carries
/// hidden state across windows within an epoch (detached between windows,
/// reset at epoch start), and validates with masked perplexity after every
/// epoch. The learning rate halves after two consecutive epochs without a
/// validation improvement.
pub fn train(
    cfg: &TrainConfig,
    train_stream: &TokenStream,
    valid_stream: &TokenStream,
    vocab_size: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tt = ThinkingTokenConfig::new(cfg.thinking_n, THINKING_ID);
    let train_inj = inject(train_stream, tt)?;
    let valid_inj = inject(valid_stream, tt)?;
    let batches = make_batches(&train_inj, cfg.batch_lanes, cfg.bptt_len)?;

    let dims = Dims { vocab: vocab_size, embed: cfg.embed, hidden: cfg.hidden };
    let mut params = init_params(dims, cfg.seed, cfg.tie_weights)?;
    let mut opt = OptimizerState::new(cfg.asgd_nonmono);
    let mut lr = cfg.learn_rate;

    // Divergence reference: the untrained model's validation NLL.
    let initial_nll = masked_perplexity(&params, &valid_inj, Some(THINKING_ID), "init")?
        .perplexity
        .ln();

    let mut best_params = params.clone();
    let mut best_valid_ppl = f64::INFINITY;
    let mut epochs_since_improvement = 0usize;
    let mut log = Vec::with_capacity(cfg.max_epochs);

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let epoch_mode = opt.mode();
        let epoch_lr = lr;
        let mut state = HiddenState::zeros(cfg.batch_lanes, cfg.hidden);
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;

        for (inputs, targets) in batches.windows() {
            let mask = if cfg.train_mask_thinking && cfg.thinking_n > 0 {
                derive_loss_mask(&targets.ids, THINKING_ID).flags
            } else {
                vec![true; targets.ids.len()]
            };
            let mut out = loss_and_grad(&params, &inputs, &targets, &mask, &state)?;
            state = out.final_state;
            epoch_nll += out.total_nll;
            epoch_tokens += out.token_count;
            if out.token_count == 0 {
                continue;
            }
            // Update on the mean NLL per counted token so clip_norm keeps
            // the same scale for every window size.
            let inv = 1.0 / out.token_count as f64;
            for (_, t) in out.grads.tensors_mut() {
                for v in t.iter_mut() {
                    *v *= inv;
                }
            }
            clip_gradients(&mut out.grads, cfg.clip_norm)?;
            sgd_step(&mut params, &out.grads, lr)?;
            params.sync_tied();
            if opt.mode() == OptimizerMode::Averaging {
                opt.accumulate(&params);
            }
        }

        let eval_params = opt.averaged().unwrap_or(&params);
        let report = masked_perplexity(eval_params, &valid_inj, Some(THINKING_ID), "train")?;
        let valid_ppl = report.perplexity;
        let val_nll = valid_ppl.ln();
        if !val_nll.is_finite() || val_nll > 3.0 * initial_nll {
            return Err(Error::Diverged { epoch, nll: val_nll });
        }

        if valid_ppl < best_valid_ppl {
            best_valid_ppl = valid_ppl;
            best_params = eval_params.clone();
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= 2 {
                lr /= 2.0;
                epochs_since_improvement = 0;
            }
        }

        match cfg.asgd_start_epoch {
            Some(start) => {
                if epoch >= start {
                    opt.trigger(&params);
                }
            }
            None => {
                opt.maybe_trigger_asgd(val_nll, &params);
            }
        }

        let record = EpochRecord {
            epoch,
            train_nll: if epoch_tokens > 0 { epoch_nll / epoch_tokens as f64 } else { 0.0 },
            valid_ppl,
            lr: epoch_lr,
            mode: epoch_mode,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
    }

    let final_params = opt.averaged().cloned().unwrap_or_else(|| params.clone());
    Ok(TrainOutcome { final_params, best_params, best_valid_ppl, log })
}
