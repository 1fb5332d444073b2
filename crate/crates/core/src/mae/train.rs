//! Training loops: further pre-training, self-distillation and fine-tuning,
//! all by plain gradient descent with a fixed step.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{Sequence, ToySequenceDataset, ToyTask};
use super::loss::{distill_loss_grad, mae_loss_grad, MaskedBatch, Variant};
use super::model::{classify, classify_backward, encode, encode_backward, log_softmax_rows};
use super::params::{weight_distance, Head, ModelDims, ToyModelParams, WeightNorm};
use crate::error::{Error, Result};

/// Entry scale of a freshly attached task head.
pub const HEAD_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub steps_pretrain: usize,
    pub steps_finetune: usize,
    /// Items per pre-training step; the whole set when at least its size.
    pub batch: usize,
    pub rounds: usize,
    pub variant: Variant,
    /// Scale on the distillation loss relative to the reconstruction loss.
    pub distill_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            gamma: 0.3,
            lr_pretrain: 0.003,
            lr_finetune: 0.1,
            steps_pretrain: 150,
            steps_finetune: 150,
            batch: 32,
            rounds: 3,
            variant: Variant::Representation,
            distill_weight: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Domain(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        for (name, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_finetune", self.lr_finetune),
            ("distill_weight", self.distill_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.batch == 0 {
            return Err(Error::Domain("batch must be >= 1".into()));
        }
        Ok(())
    }
}

fn draw_batch<R: Rng + ?Sized>(
    data: &[Sequence],
    batch: usize,
    gamma: f64,
    rng: &mut R,
) -> MaskedBatch {
    let items = if batch >= data.len() {
        data.to_vec()
    } else {
        let mut picked = index::sample(rng, data.len(), batch).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| data[i].clone()).collect()
    };
    MaskedBatch::sample(items, gamma, rng)
}

fn check_data(data: &[Sequence]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("pre-training data is empty".into()));
    }
    Ok(())
}

/// Gradient descent on the reconstruction loss from `init`. The RNG stream
/// depends only on `config.seed`, so every stage sees the same batches and
/// masks.
pub fn further_pretrain(
    init: &ToyModelParams,
    data: &[Sequence],
    config: &TrainConfig,
) -> Result<ToyModelParams> {
    config.validate()?;
    check_data(data)?;
    let mut params = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for step in 0..config.steps_pretrain {
        let batch = draw_batch(data, config.batch, config.gamma, &mut rng);
        let (loss, grad) = mae_loss_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        params.axpy(-config.lr_pretrain, &grad)?;
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
    }
    Ok(params)
}

/// `θ_init`: reconstruction training from a seeded random model on the
/// general-domain pool.
pub fn initial_pretrain(
    dims: ModelDims,
    general: &[Sequence],
    config: &TrainConfig,
) -> Result<ToyModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1417);
    let init = ToyModelParams::random(dims, &mut rng);
    further_pretrain(&init, general, config)
}

/// One student step of a distillation round. `θ` receives
/// `∂(L₁ + w·L₂)/∂θ`, `φ` receives `∂L₁/∂φ` only. Returns `(L₁, L₂)`.
pub fn distill_step(
    student: &mut ToyModelParams,
    teacher: &ToyModelParams,
    batch: &MaskedBatch,
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut grad = student.zeros_like();
    let mut l1 = 0.0;
    if config.variant.uses_mae() {
        let (loss, g) = mae_loss_grad(student, batch)?;
        l1 = loss;
        grad = g;
    }
    let mut l2 = 0.0;
    if config.variant.uses_distill() {
        let (loss, g) = distill_loss_grad(student, teacher, batch, config.variant)?;
        l2 = loss;
        for ((_, a), (_, b)) in grad
            .encoder
            .tensors_mut()
            .into_iter()
            .zip(g.student.encoder.tensors())
        {
            *a += b * config.distill_weight;
        }
    }
    student.axpy(-config.lr_pretrain, &grad)?;
    Ok((l1, l2))
}

/// Result of Algorithm-1 style self-distillation.
#[derive(Debug, Clone)]
pub struct SelfDistillRun {
    /// Round-0 teacher: further pre-training from the initial weights.
    pub teacher0: ToyModelParams,
    /// Students of rounds `1..=T′`, in order.
    pub students: Vec<ToyModelParams>,
    /// Checksum of each round's student before its first step.
    pub start_checksums: Vec<u64>,
}

impl SelfDistillRun {
    /// Encoder/decoder after round `t` (`t = 0` is the teacher).
    pub fn round(&self, t: usize) -> &ToyModelParams {
        if t == 0 {
            &self.teacher0
        } else {
            &self.students[t - 1]
        }
    }

    pub fn last(&self) -> &ToyModelParams {
        self.students.last().unwrap_or(&self.teacher0)
    }
}

/// Every round restarts the student at `init`, trains it against the
/// current teacher and promotes it to teacher.
pub fn self_distill(
    init: &ToyModelParams,
    data: &[Sequence],
    config: &TrainConfig,
) -> Result<SelfDistillRun> {
    config.validate()?;
    check_data(data)?;
    let teacher0 = further_pretrain(init, data, config)?;
    let mut teacher = teacher0.clone();
    let mut students = Vec::with_capacity(config.rounds);
    let mut start_checksums = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let mut student = init.clone();
        start_checksums.push(student.checksum());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for step in 0..config.steps_pretrain {
            let batch = draw_batch(data, config.batch, config.gamma, &mut rng);
            let (l1, l2) = distill_step(&mut student, &teacher, &batch, config)?;
            if !(l1 + l2).is_finite() || !student.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
        }
        teacher = student.clone();
        students.push(student);
    }
    Ok(SelfDistillRun {
        teacher0,
        students,
        start_checksums,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneMetrics {
    pub train_loss: f64,
    pub test_loss: f64,
    pub accuracy: f64,
    /// `test_loss − train_loss`.
    pub gap: f64,
}

fn check_labeled(data: &ToySequenceDataset, dims: &ModelDims) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("labeled data is empty".into()));
    }
    if data.dims.mode != dims.mode {
        return Err(Error::ModeMismatch);
    }
    Ok(())
}

/// Mean cross-entropy and accuracy of an encoder with head.
pub fn evaluate(params: &ToyModelParams, data: &ToySequenceDataset) -> Result<(f64, f64)> {
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("evaluation needs a task head".into()))?;
    check_labeled(data, &params.dims)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (seq, &label) in data.sequences.iter().zip(&data.labels) {
        let out = encode(&params.encoder, &params.dims, seq, None)?.out;
        let logp = log_softmax_rows(&classify(head, &out));
        loss -= logp[(0, label)];
        let predicted = (0..logp.ncols())
            .max_by(|&a, &b| logp[(0, a)].total_cmp(&logp[(0, b)]))
            .expect("at least one class");
        correct += (predicted == label) as usize;
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Mean cross-entropy and its gradient w.r.t. encoder and head.
pub fn classification_loss_grad(
    params: &ToyModelParams,
    data: &ToySequenceDataset,
) -> Result<(f64, ToyModelParams)> {
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("classification needs a task head".into()))?;
    check_labeled(data, &params.dims)?;
    let mut grad = params.zeros_like();
    let scale = 1.0 / data.len() as f64;
    let mut loss = 0.0;
    for (seq, &label) in data.sequences.iter().zip(&data.labels) {
        let trace = encode(&params.encoder, &params.dims, seq, None)?;
        let logp = log_softmax_rows(&classify(head, &trace.out));
        loss -= logp[(0, label)] * scale;
        let mut d_logits = logp.map(f64::exp);
        d_logits[(0, label)] -= 1.0;
        let d_logits: DMatrix<f64> = d_logits * scale;
        let g_head = grad.head.as_mut().expect("gradient mirrors params");
        let d_hidden = classify_backward(head, &trace.out, &d_logits, g_head);
        encode_backward(
            &params.encoder,
            &params.dims,
            &trace,
            &d_hidden,
            &mut grad.encoder,
        );
    }
    Ok((loss, grad))
}

/// Drops the decoder, attaches a fresh head drawn from `config.seed` and runs
/// full-batch gradient descent on cross-entropy over encoder and head.
pub fn finetune(
    pretrained: &ToyModelParams,
    train: &ToySequenceDataset,
    test: &ToySequenceDataset,
    config: &TrainConfig,
) -> Result<(ToyModelParams, FinetuneMetrics)> {
    config.validate()?;
    let dims = pretrained.dims;
    if train.dims.classes != dims.classes || test.dims.classes != dims.classes {
        return Err(Error::ShapeMismatch(
            "class count differs from the model".into(),
        ));
    }
    let mut params = pretrained.encoder_only();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4ead_0001);
    params.head = Some(Head::random(&dims, HEAD_INIT_STD, &mut rng));
    for step in 0..config.steps_finetune {
        let (loss, grad) = classification_loss_grad(&params, train)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        params.axpy(-config.lr_finetune, &grad)?;
    }
    let (train_loss, _) = evaluate(&params, train)?;
    let (test_loss, accuracy) = evaluate(&params, test)?;
    if !(train_loss.is_finite() && test_loss.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: config.steps_finetune,
        });
    }
    Ok((
        params,
        FinetuneMetrics {
            train_loss,
            test_loss,
            accuracy,
            gap: test_loss - train_loss,
        },
    ))
}

/// Encoder distance between `θ_init` and a fine-tuned model.
pub fn encoder_distance(
    init: &ToyModelParams,
    tuned: &ToyModelParams,
    norm: WeightNorm,
) -> Result<f64> {
    weight_distance(&init.encoder_only(), &tuned.encoder_only(), norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageReport {
    pub metrics: FinetuneMetrics,
    pub distance_l2: f64,
    pub distance_mars: f64,
}

/// One seed of the pipeline comparison on a fixed task.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub init_checksum: u64,
    /// Fine-tuning straight from `θ_init`.
    pub finetune_only: StageReport,
    /// `rounds[0]` fine-tunes the further pre-trained model; `rounds[t]`
    /// fine-tunes the round-`t` student.
    pub rounds: Vec<StageReport>,
}

impl PipelineReport {
    pub fn further_pretrain(&self) -> &StageReport {
        &self.rounds[0]
    }

    /// The last self-distillation round, or further pre-training when `T′ = 0`.
    pub fn self_distill(&self) -> &StageReport {
        self.rounds.last().expect("round 0 is always present")
    }
}

fn stage(
    init: &ToyModelParams,
    pretrained: &ToyModelParams,
    train: &ToySequenceDataset,
    test: &ToySequenceDataset,
    config: &TrainConfig,
) -> Result<StageReport> {
    let (tuned, metrics) = finetune(pretrained, train, test, config)?;
    Ok(StageReport {
        metrics,
        distance_l2: encoder_distance(init, &tuned, WeightNorm::L2)?,
        distance_mars: encoder_distance(init, &tuned, WeightNorm::Mars)?,
    })
}

/// Runs fine-tune-only, further pre-training and `T′` self-distillation rounds
/// from a shared `θ_init`, pre-training on the unlabeled view of `train`.
pub fn run_pipelines(
    init: &ToyModelParams,
    train: &ToySequenceDataset,
    test: &ToySequenceDataset,
    config: &TrainConfig,
) -> Result<PipelineReport> {
    let finetune_only = stage(init, init, train, test, config)?;
    let run = self_distill(init, train.unlabeled(), config)?;
    let rounds = (0..=config.rounds)
        .map(|t| stage(init, run.round(t), train, test, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineReport {
        init_checksum: init.checksum(),
        finetune_only,
        rounds,
    })
}

/// Convenience: `θ_init` from the task's general pool, then [`run_pipelines`].
pub fn run_task(
    task: &ToyTask,
    init_config: &TrainConfig,
    config: &TrainConfig,
) -> Result<PipelineReport> {
    let init = initial_pretrain(task.train.dims, &task.general, init_config)?;
    run_pipelines(&init, &task.train, &task.test, config)
}
