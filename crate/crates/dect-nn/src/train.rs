//! The two-stage training loop.
//!
//! Stage one fits the sinogram decomposition network on (interleaved DE
//! transmission -> normalized material sinograms); stage two fits the image
//! refiner on (reconstructed material images -> fraction maps). Both stages
//! minimize the configured loss with Adam, augment on the fly, track a
//! validation loss per epoch, checkpoint the best parameters and stop early
//! after a configurable patience.
//!
//! Determinism: sample order and augmentation draws come from one seeded rng
//! consumed sequentially; batch gradients are reduced in sample order. The
//! result is bit-reproducible for a fixed seed regardless of thread count.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dect_core::error::{Error, Result};
use dect_core::metrics::{combination_loss_stack_grad, LossConfig};
use dect_core::projector::interleave_arrays;

use crate::augment::{
    augment_image_pair, augment_path_stack, augment_transmission, ImageAugmentParams,
    SinoAugmentParams,
};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub sinonet: StageHyper,
    pub denoisenet: StageHyper,
    pub loss: LossConfig,
    pub augment: bool,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Samples processed per forward/backward slice (gradient accumulation).
    pub micro_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            sinonet: StageHyper {
                lr: 1e-3,
                batch_size: 8,
                max_epochs: 1000,
            },
            denoisenet: StageHyper {
                lr: 1e-2,
                batch_size: 16,
                max_epochs: 200,
            },
            loss: LossConfig::default(),
            augment: true,
            patience: 50,
            micro_batch: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for h in [&self.sinonet, &self.denoisenet] {
            if h.lr < 0.0 {
                return Err(Error::Config("learning rate must be nonnegative".into()));
            }
            if h.batch_size == 0 || h.max_epochs == 0 {
                return Err(Error::Config("batch size and epochs must be >= 1".into()));
            }
        }
        if self.micro_batch == 0 {
            return Err(Error::Config("micro_batch must be >= 1".into()));
        }
        self.loss.validate()
    }

    pub fn hyper(&self, stage: Stage) -> StageHyper {
        match stage {
            Stage::Sino => self.sinonet,
            Stage::Image => self.denoisenet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sino,
    Image,
}

/// Raw per-case material for stage one. Targets are the normalized
/// all-views material sinogram stack.
#[derive(Debug, Clone)]
pub struct SinoCase {
    pub low: Array2<f64>,
    pub high: Array2<f64>,
    pub target: Array3<f64>,
}

/// Prepared per-case material for stage two.
#[derive(Debug, Clone)]
pub struct ImageCase {
    pub input: Array3<f64>,
    pub target: Array3<f64>,
}

#[derive(Debug, Clone)]
pub enum StageData {
    Sino(Vec<SinoCase>),
    Image(Vec<ImageCase>),
}

impl StageData {
    pub fn len(&self) -> usize {
        match self {
            StageData::Sino(v) => v.len(),
            StageData::Image(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn materialize(&self, idx: usize, rng: Option<&mut ChaCha8Rng>) -> (Array3<f64>, Array3<f64>) {
        match self {
            StageData::Sino(cases) => {
                let case = &cases[idx];
                let params = match rng {
                    Some(r) => SinoAugmentParams::sample(r),
                    None => SinoAugmentParams::identity(),
                };
                let low = augment_transmission(&case.low, params);
                let high = augment_transmission(&case.high, params);
                let target = augment_path_stack(&case.target, params);
                (interleave_arrays(&high, &low), target)
            }
            StageData::Image(cases) => {
                let case = &cases[idx];
                let params = match rng {
                    Some(r) => ImageAugmentParams::sample(r),
                    None => ImageAugmentParams::identity(),
                };
                augment_image_pair(&case.input, &case.target, &params)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Mean per-sample stack loss over a batch, with the gradient tensor.
pub fn batch_loss_grad(pred: &Tensor, target: &Tensor, loss: &LossConfig) -> Result<(f64, Tensor)> {
    let n = pred.n();
    let mut total = 0.0;
    let mut grad = Tensor::zeros(pred.shape);
    for s in 0..n {
        let p = pred.to_stack(s);
        let t = target.to_stack(s);
        let (v, g) = combination_loss_stack_grad(&p, &t, loss)?;
        total += v;
        let scale = 1.0 / n as f64;
        let dst = grad.sample_mut(s);
        for (d, src) in dst.iter_mut().zip(g.iter()) {
            *d = src * scale;
        }
    }
    Ok((total / n as f64, grad))
}

/// Mean loss of a model over a data set, without augmentation.
pub fn evaluate_loss(
    model: &Model,
    data: &StageData,
    loss: &LossConfig,
    micro_batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let n = data.len();
    let mut idx = 0;
    while idx < n {
        let hi = (idx + micro_batch).min(n);
        let pairs: Vec<(Array3<f64>, Array3<f64>)> =
            (idx..hi).map(|k| data.materialize(k, None)).collect();
        let x = Tensor::from_stacks(&pairs.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>());
        let y = Tensor::from_stacks(&pairs.iter().map(|(_, b)| b.clone()).collect::<Vec<_>>());
        let (pred, _) = model.forward(&x);
        let (v, _) = batch_loss_grad(&pred, &y, loss)?;
        total += v * (hi - idx) as f64;
        idx = hi;
    }
    Ok(total / n as f64)
}

/// Runs one optimization step over a full batch, accumulating gradients over
/// micro-batches. Returns the batch training loss.
fn run_batch(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[(Array3<f64>, Array3<f64>)],
    loss: &LossConfig,
    micro_batch: usize,
) -> Result<f64> {
    let b = batch.len();
    let mut batch_loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut idx = 0;
    while idx < b {
        let hi = (idx + micro_batch).min(b);
        let xs: Vec<Array3<f64>> = batch[idx..hi].iter().map(|(x, _)| x.clone()).collect();
        let ys: Vec<Array3<f64>> = batch[idx..hi].iter().map(|(_, y)| y.clone()).collect();
        let x = Tensor::from_stacks(&xs);
        let y = Tensor::from_stacks(&ys);
        let (pred, cache) = model.forward(&x);
        if !pred.all_finite() {
            return Err(Error::Numeric("forward pass produced non-finite values".into()));
        }
        let (v, g) = batch_loss_grad(&pred, &y, loss)?;
        batch_loss += v * (hi - idx) as f64;
        let (pg, _) = model.backward(&cache, &g);
        // Micro-batch means scaled into the full-batch mean.
        let w = (hi - idx) as f64 / b as f64;
        for (dst, src) in grads.iter_mut().zip(&pg) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * w;
            }
        }
        idx = hi;
    }
    batch_loss /= b as f64;
    if !batch_loss.is_finite() {
        return Err(Error::Numeric(format!("training loss diverged: {batch_loss}")));
    }
    adam.step(&mut model.params, &grads);
    Ok(batch_loss)
}

/// Trains a model on one stage. Returns the parameters of the best
/// validation epoch together with the loss history.
pub fn train_stage(
    mut model: Model,
    train: &StageData,
    val: &StageData,
    cfg: &TrainConfig,
    stage: Stage,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let hyper = cfg.hyper(stage);
    let mut adam = Adam::new(
        AdamConfig {
            lr: hyper.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Vec<Tensor> = model.params.clone();
    let mut since_best = 0usize;

    for epoch in 0..hyper.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<(Array3<f64>, Array3<f64>)> = chunk
                .iter()
                .map(|&k| {
                    train.materialize(k, if cfg.augment { Some(&mut rng) } else { None })
                })
                .collect();
            train_loss += run_batch(&mut model, &mut adam, &batch, &cfg.loss, cfg.micro_batch)?;
            batches += 1;
        }
        train_loss /= batches as f64;
        let val_loss = evaluate_loss(&model, val, &cfg.loss, cfg.micro_batch)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = model.params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }

    model.params = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val,
    })
}

/// Single forward pass over a list of stacks (batch of one each); used for
/// inference and stage-two input preparation.
pub fn forward_stacks(model: &Model, inputs: &[Array3<f64>]) -> Vec<Array3<f64>> {
    inputs
        .iter()
        .map(|stack| {
            let x = Tensor::from_stacks(std::slice::from_ref(stack));
            let (y, _) = model.forward(&x);
            y.to_stack(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_denoisenet, DenoiseNetConfig};
    use rand::Rng;

    fn tiny_image_data(n: usize, seed: u64) -> StageData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cases = (0..n)
            .map(|_| {
                let target = Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0..1.0));
                let input = target.mapv(|v: f64| (v + 0.1).min(1.0));
                ImageCase { input, target }
            })
            .collect();
        StageData::Image(cases)
    }

    fn tiny_net(seed: u64) -> Model {
        build_denoisenet(
            &DenoiseNetConfig {
                in_channels: 3,
                out_channels: 3,
                n_blocks: 1,
                kernel: 3,
                stride: 1,
                channel_schedule: vec![6],
            },
            seed,
        )
        .unwrap()
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            sinonet: StageHyper {
                lr: 1e-3,
                batch_size: 2,
                max_epochs: 3,
            },
            denoisenet: StageHyper {
                lr: 1e-2,
                batch_size: 2,
                max_epochs: 3,
            },
            loss: LossConfig {
                msssim_sigmas: vec![0.5, 1.0],
                ..LossConfig::default()
            },
            micro_batch: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_and_loss_flat() {
        let data = tiny_image_data(4, 1);
        let model = tiny_net(2);
        let before: Vec<Vec<f64>> = model.params.iter().map(|p| p.data.clone()).collect();
        let mut cfg = fast_cfg();
        cfg.denoisenet.lr = 0.0;
        let out = train_stage(model, &data, &data, &cfg, Stage::Image).unwrap();
        for (p, b) in out.model.params.iter().zip(&before) {
            assert_eq!(&p.data, b);
        }
        let losses: Vec<f64> = out.history.iter().map(|e| e.val_loss).collect();
        for w in losses.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let data = tiny_image_data(4, 11);
        let model = tiny_net(3);
        let mut cfg = fast_cfg();
        cfg.denoisenet.max_epochs = 12;
        cfg.augment = false;
        let out = train_stage(model, &data, &data, &cfg, Stage::Image).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = tiny_image_data(4, 21);
        let cfg = fast_cfg();
        let a = train_stage(tiny_net(7), &data, &data, &cfg, Stage::Image).unwrap();
        let b = train_stage(tiny_net(7), &data, &data, &cfg, Stage::Image).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
        }
        for (pa, pb) in a.model.params.iter().zip(&b.model.params) {
            assert_eq!(pa.data, pb.data);
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = fast_cfg();
        let empty = StageData::Image(Vec::new());
        let data = tiny_image_data(2, 0);
        assert!(train_stage(tiny_net(0), &empty, &data, &cfg, Stage::Image).is_err());
        assert!(train_stage(tiny_net(0), &data, &empty, &cfg, Stage::Image).is_err());
    }

    #[test]
    fn sino_stage_materializes_interleaved_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let low = Array2::from_shape_fn((4, 8), |_| rng.gen_range(0.2..1.0));
        let high = Array2::from_shape_fn((4, 8), |_| rng.gen_range(0.2..1.0));
        let target = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0..0.5));
        let data = StageData::Sino(vec![SinoCase {
            low: low.clone(),
            high: high.clone(),
            target,
        }]);
        let (x, y) = data.materialize(0, None);
        assert_eq!(x.dim(), (2, 8, 8));
        assert_eq!(y.dim(), (3, 8, 8));
        // Parity layout: channel 0 even rows zero, channel 1 odd rows zero.
        for r in (0..8).step_by(2) {
            assert!(x.index_axis(ndarray::Axis(0), 0).row(r).iter().all(|&v| v == 0.0));
        }
        for r in (1..8).step_by(2) {
            assert!(x.index_axis(ndarray::Axis(0), 1).row(r).iter().all(|&v| v == 0.0));
        }
        assert_eq!(x[[0, 1, 3]], high[[0, 3]]);
        assert_eq!(x[[1, 2, 5]], low[[1, 5]]);
    }
}
