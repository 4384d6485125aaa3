use std::time::Instant;

use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Metrics;
use crate::error::{invalid, Error, Result};
use crate::model::StdPlm;
use crate::runtime::evaluate::{evaluate_windows, ModelPredictor};
use crate::runtime::prepare::{PreparedData, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub l1: f64,
    pub l_g: f64,
    pub l_r: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_epoch: usize,
    pub test: Metrics,
    pub history: Vec<EpochLog>,
}

/// Trains `model` in place, keeping the weights with the lowest validation
/// MAE. Stops once `patience` epochs pass without a strict improvement.
pub fn fit(model: &StdPlm, data: &PreparedData, cfg: &TrainConfig, seed: u64) -> Result<SeedOutcome> {
    if data.val.is_empty() {
        return Err(invalid!("validation split has no windows"));
    }
    let mut opt = AdamW::new(
        model.store().trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_0c0d);
    let mut order = data.train.clone();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, _)> = None;
    let mut stopped = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum, mut l1, mut lg, mut lr_, mut steps) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let hb = data.assemble(chunk, Purpose::Train, &mut rng)?;
            if hb.eval_count() == 0 {
                continue;
            }
            let (batch, target, eval) = hb.to_device(model.device(), model.dtype())?;
            let out = model.forward(&batch)?;
            let (loss, terms) = model.objective(&out, &target, &eval, cfg.lambda_c)?;
            if !terms.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("l1 {} l_g {} l_r {}", terms.l1, terms.l_g, terms.l_r),
                });
            }
            opt.backward_step(&loss)?;
            sum += terms.total;
            l1 += terms.l1;
            lg += terms.l_g;
            lr_ += terms.l_r;
            steps += 1;
        }
        if steps == 0 {
            return Err(invalid!("no training window has a loss target; check condition_ratio"));
        }
        let val = evaluate_windows(&ModelPredictor(model), data, &data.val, cfg.eval_batch_size)?;
        if !val.mae.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: steps,
                detail: "validation MAE is not finite".into(),
            });
        }
        let k = steps as f64;
        let log = EpochLog {
            epoch,
            train_loss: sum / k,
            l1: l1 / k,
            l_g: lg / k,
            l_r: lr_ / k,
            val_mae: val.mae,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "seed {seed} epoch {epoch}: loss {:.4} (l1 {:.4}) val mae {:.4} [{:.1}s]",
            log.train_loss,
            log.l1,
            log.val_mae,
            log.seconds
        );
        history.push(log);
        stopped = epoch;
        if best.as_ref().is_none_or(|(_, m, _)| val.mae < *m) {
            best = Some((epoch, val.mae, model.store().snapshot(true)?));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            log::info!("seed {seed}: no improvement for {} epochs, stopping", cfg.patience);
            break;
        }
    }
    let (best_epoch, best_val_mae, weights) = best.ok_or_else(|| invalid!("epochs must be at least 1"))?;
    model.store().restore(&weights, false)?;
    let test = evaluate_windows(&ModelPredictor(model), data, &data.test, cfg.eval_batch_size)?;
    Ok(SeedOutcome {
        seed,
        best_epoch,
        best_val_mae,
        stopped_epoch: stopped,
        test,
        history,
    })
}
