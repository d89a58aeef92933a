use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Model, ModelConfig, TrainingMeta};
use crate::error::{Error, Result};
use crate::nn::OptimizerState;
use crate::rng;
use crate::scm::PathBatch;

const TRAIN_STREAM: u64 = 0x5452_4149_4e00;

/// Sequence-weighted means of the loss terms over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn first(&self) -> Option<&EpochStats> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Builds a model from `config` and trains it on `data`.
pub fn train(config: &ModelConfig, data: &PathBatch) -> Result<(Checkpoint, TrainReport)> {
    let model = Model::new(config.clone())?;
    train_model(model, data, |_| {})
}

/// Mini-batch Adam on the ELBO for `config.epochs` epochs. The batch order
/// and reparameterization noise come from a stream derived from
/// `config.seed`, so runs are bit-reproducible.
pub fn train_model(
    mut model: Model,
    data: &PathBatch,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Checkpoint, TrainReport)> {
    let config = model.config().clone();
    if data.variables != config.graph.variables {
        return Err(Error::Shape(format!(
            "data variables {:?} differ from model variables {:?}",
            data.variables, config.graph.variables
        )));
    }
    if data.len_t() != config.seq_len {
        return Err(Error::Shape(format!(
            "data sequences have length {}, model window is {}",
            data.len_t(),
            config.seq_len
        )));
    }
    let n = data.n_sequences();
    let d = model.latent_width();
    let mut rng = rng::stream(config.seed, TRAIN_STREAM);
    let mut opt = OptimizerState::new(config.optimizer, model.params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut rec, mut kl) = (0.0, 0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            let batch = data.values.select(Axis(0), idx);
            let eps = Array3::from_shape_simple_fn((idx.len(), config.seq_len, d), || rng.sample(StandardNormal));
            let (terms, grads) = model
                .elbo_gradient(batch.view(), eps.view(), config.beta)
                .map_err(|e| Error::Divergence { epoch, detail: e.to_string() })?;
            opt.adam_step(model.params_mut(), &grads)
                .map_err(|e| Error::Divergence { epoch, detail: e.to_string() })?;
            let w = idx.len() as f64;
            tot += terms.total * w;
            rec += terms.reconstruction * w;
            kl += terms.kl * w;
        }
        let stats = EpochStats {
            epoch,
            total: tot / n as f64,
            reconstruction: rec / n as f64,
            kl: kl / n as f64,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    let meta = TrainingMeta {
        epochs: config.epochs,
        final_loss: report.last().map(|s| s.total),
    };
    Ok((Checkpoint { model, meta }, report))
}
