//! Block-step training, sequential recasting and knowledge-distillation
//! fine-tuning.

use super::{EngineError, PlanAction, RecastPlan};
use crate::data::{BatchStream, Dataset};
use crate::net::{rebuild_next_block, Network};
use crate::tensor::{
    optimizer_step, Mode, OptimizerConfig, ParamId, RngPool, Tape, Tensor, TensorError, ValRef,
};

/// Defaults follow the only schedule the source training recipe states:
/// Adam at 5e-4 for block training and 1e-4 for fine-tuning, divided by 10
/// every five epochs.
#[derive(Debug, Clone)]
pub struct RecastConfig {
    pub epochs_per_block: usize,
    pub optimizer: OptimizerConfig,
    pub finetune_epochs: usize,
    pub finetune_optimizer: OptimizerConfig,
    /// Keep previously recast blocks frozen during later steps (ablation;
    /// default trains them together with the target and next block).
    pub freeze_prefix: bool,
    /// Seed for fresh target/next block initialization.
    pub seed: u64,
}

impl Default for RecastConfig {
    fn default() -> Self {
        Self {
            epochs_per_block: 8,
            optimizer: OptimizerConfig::adam(5e-4).with_schedule(vec![(5, 10.0)]),
            finetune_epochs: 8,
            finetune_optimizer: OptimizerConfig::adam(1e-4).with_schedule(vec![(5, 10.0)]),
            freeze_prefix: false,
            seed: 0x5eed,
        }
    }
}

/// Eq-style activation-mimicking loss: mean squared difference between the
/// student activation and the (detached) teacher activation, normalized by
/// per-sample activation size and batch.
pub fn mse_activation_loss(
    tape: &mut Tape<f32>,
    student_act: ValRef,
    teacher_act: &Tensor<f32>,
) -> Result<ValRef, TensorError> {
    let t = tape.leaf(teacher_act.clone());
    tape.mse_loss(student_act, t)
}

/// Fine-tuning loss: logit MSE against the (detached) teacher plus
/// cross-entropy against ground truth, unweighted sum.
pub fn kd_loss(
    tape: &mut Tape<f32>,
    student_logits: ValRef,
    teacher_logits: &Tensor<f32>,
    labels: &[usize],
) -> Result<ValRef, TensorError> {
    let t = tape.leaf(teacher_logits.clone());
    let mse = tape.mse_loss(student_logits, t)?;
    let ce = tape.softmax_cross_entropy(student_logits, labels)?;
    tape.add(mse, ce)
}

/// One schedule entry of a sequential recast.
#[derive(Debug, Clone)]
pub struct RecastStep {
    pub step: usize,
    pub block_index: usize,
    /// Block indices trained at this step (previously recast blocks,
    /// the target, and the next block when it is not the classifier).
    pub trainable_blocks: Vec<usize>,
    pub train_classifier: bool,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub block_index: usize,
    /// Eq-1 loss on the first batch before any update.
    pub initial_loss: f64,
    /// Epoch-averaged training loss.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RecastLog {
    pub steps: Vec<StepLog>,
    /// Append-only `step,epoch,loss,lr` records.
    pub lines: Vec<String>,
}

impl RecastLog {
    pub fn summary_line(&self) -> String {
        let total_epochs: usize = self.steps.iter().map(|s| s.epoch_losses.len()).sum();
        let last = self.steps.last().map(|s| s.final_loss).unwrap_or(0.0);
        format!(
            "summary,steps={},epochs={},final_loss={:.6}",
            self.steps.len(),
            total_epochs,
            last
        )
    }
}

fn labels_usize(labels: &[u32]) -> Vec<usize> {
    labels.iter().map(|&l| l as usize).collect()
}

fn map_mismatch(err: TensorError, block_index: usize) -> EngineError {
    match err {
        TensorError::ShapeMismatch { op: "mse_loss", lhs, rhs } => EngineError::ActivationMismatch {
            index: block_index,
            student: lhs,
            teacher: rhs,
        },
        other => EngineError::Tensor(other),
    }
}

/// Train the step's trainable set to mimic the teacher's next-block output
/// (or logits when the classifier is the next block). The teacher runs in
/// eval mode; the student prefix through the next block runs in train mode.
pub fn recast_block_step(
    teacher: &mut Network,
    student: &mut Network,
    step: &RecastStep,
    stream: &BatchStream,
    optimizer: &OptimizerConfig,
    log: &mut RecastLog,
) -> Result<StepLog, EngineError> {
    optimizer.validate()?;
    let next_index = step.block_index + 1;
    let has_next_block = next_index < student.num_blocks();
    let last_student_block = if has_next_block {
        next_index
    } else {
        step.block_index
    };

    let mut ids: Vec<ParamId> = Vec::new();
    for &bi in &step.trainable_blocks {
        ids.extend(student.trainable_block(bi));
    }
    if step.train_classifier {
        ids.extend(student.trainable_classifier());
    }
    student.params.reset_opt_state(&ids);

    let mut initial_loss = None;
    let mut epoch_losses = Vec::with_capacity(step.epochs);
    for epoch in 0..step.epochs {
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (images, _labels) in stream.epoch(epoch) {
            // teacher activation for this batch, detached
            let teacher_act = {
                let mut tape = Tape::new();
                if has_next_block {
                    let act = teacher.forward_upto(&mut tape, images.clone(), next_index, Mode::Eval)?;
                    tape.value(act).clone()
                } else {
                    let act =
                        teacher.forward_upto(&mut tape, images.clone(), step.block_index, Mode::Eval)?;
                    let logits = teacher.forward_classifier(&mut tape, act, Mode::Eval)?;
                    tape.value(logits).clone()
                }
            };

            let mut tape = Tape::new();
            let mut act = student.forward_upto(&mut tape, images, last_student_block, Mode::Train)?;
            if !has_next_block {
                act = student.forward_classifier(&mut tape, act, Mode::Train)?;
            }
            let loss = mse_activation_loss(&mut tape, act, &teacher_act)
                .map_err(|e| map_mismatch(e, step.block_index))?;
            let loss_val = tape.value(loss).item() as f64;
            if initial_loss.is_none() {
                initial_loss = Some(loss_val);
            }
            loss_sum += loss_val;
            batches += 1;

            tape.backward(loss)?;
            tape.export_grads(&mut student.params);
            optimizer_step(&mut student.params, &ids, optimizer, epoch)?;
            student.params.zero_grads();
        }
        let avg = loss_sum / batches.max(1) as f64;
        log.lines.push(format!(
            "{},{},{:.6},{:.6}",
            step.step,
            epoch,
            avg,
            optimizer.lr_at(epoch)
        ));
        epoch_losses.push(avg);
    }

    let entry = StepLog {
        step: step.step,
        block_index: step.block_index,
        initial_loss: initial_loss.unwrap_or(0.0),
        epoch_losses: epoch_losses.clone(),
        final_loss: epoch_losses.last().copied().unwrap_or(0.0),
    };
    log.steps.push(entry.clone());
    Ok(entry)
}

/// Sequential recasting: front-to-back over every recast-marked block. The
/// target and (when its shape changed or it is itself recast-marked) the
/// next block are freshly initialized; previously recast blocks carry
/// their trained parameters and stay trainable. Keep-marked blocks whose
/// shape is unchanged keep the teacher's weights.
pub fn sequential_recast(
    teacher: &mut Network,
    plan: &RecastPlan,
    stream: &BatchStream,
    config: &RecastConfig,
) -> Result<(Network, RecastLog), EngineError> {
    let teacher_spec = teacher.spec();
    plan.validate(&teacher_spec)?;
    let student_spec = plan.resolve(&teacher_spec)?;

    let mut student = teacher.clone();
    let mut log = RecastLog::default();
    let rng = RngPool::new(config.seed);
    let indices = plan.recast_indices();
    let mut recast_so_far: Vec<usize> = Vec::new();

    for (k, &bi) in indices.iter().enumerate() {
        // fresh target block
        student.replace_block(bi, &student_spec.blocks[bi], &rng)?;

        let mut trainable = if config.freeze_prefix {
            vec![bi]
        } else {
            let mut t = recast_so_far.clone();
            t.push(bi);
            t
        };

        let next_index = bi + 1;
        let train_classifier = if next_index < student.num_blocks() {
            // the next block is rebuilt from the teacher's block; fresh
            // random init when recast-marked or reshaped, teacher weights
            // otherwise (they are already in place from the clone)
            let rebuilt = rebuild_next_block(
                &teacher_spec.blocks[next_index],
                student_spec.blocks[bi].out_channels,
            );
            let next_is_recast = matches!(plan.actions[next_index], PlanAction::Recast { .. });
            if next_is_recast || student.blocks[next_index].spec != rebuilt {
                student.replace_block(next_index, &rebuilt, &rng)?;
            }
            trainable.push(next_index);
            false
        } else {
            // final step: the classifier serves as the next block
            let feat = student_spec.blocks[bi].out_channels;
            if student.classifier.spec.in_channels != feat {
                student.replace_classifier(feat, &rng)?;
            } else {
                student.copy_classifier_params_from(teacher);
            }
            true
        };

        let step = RecastStep {
            step: k,
            block_index: bi,
            trainable_blocks: trainable,
            train_classifier,
            epochs: config.epochs_per_block,
        };
        recast_block_step(teacher, &mut student, &step, stream, &config.optimizer, &mut log)?;
        recast_so_far.push(bi);
    }

    if !indices.is_empty() {
        refresh_bn_stats(&mut student, stream)?;
    }
    log.lines.push(log.summary_line());
    Ok((student, log))
}

/// Re-estimate every batch-norm running statistic with one train-mode pass
/// over the stream (no parameter updates).
pub fn refresh_bn_stats(net: &mut Network, stream: &BatchStream) -> Result<(), EngineError> {
    for i in 0..net.num_blocks() {
        let block = net.blocks[i].clone();
        block.reset_bn_stats(&mut net.params);
    }
    for (images, _) in stream.epoch(0) {
        let mut tape = Tape::new();
        net.forward(&mut tape, images, Mode::Train, &[])?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_train_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// `epoch,train_loss,val_acc,lr` records.
    pub lines: Vec<String>,
}

/// Eval-mode top-1 accuracy over a dataset (normalization from the
/// dataset's own stats; attach the train-split stats for eval splits).
pub fn evaluate(net: &mut Network, data: &Dataset, batch_size: usize) -> Result<f64, EngineError> {
    let stream = BatchStream::new(data, batch_size, 0, false);
    let mut correct = 0usize;
    for (images, labels) in stream.epoch(0) {
        let logits = net.logits(images)?;
        let k = logits.shape()[1];
        for (bi, &label) in labels.iter().enumerate() {
            let row = &logits.data()[bi * k..(bi + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if pred == label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn snapshot(net: &Network) -> Vec<Tensor<f32>> {
    net.named_tensors()
        .iter()
        .map(|(_, id)| net.params.value(*id).clone())
        .collect()
}

fn restore(net: &mut Network, snap: &[Tensor<f32>]) {
    for ((_, id), t) in net.named_tensors().iter().zip(snap) {
        *net.params.value_mut(*id) = t.clone();
    }
}

/// Whole-student fine-tuning on the KD loss; the teacher stays in eval
/// mode throughout. Returns the best-validation-accuracy parameters.
pub fn kd_finetune(
    teacher: &mut Network,
    student: &mut Network,
    stream: &BatchStream,
    val: &Dataset,
    epochs: usize,
    optimizer: &OptimizerConfig,
) -> Result<TrainLog, EngineError> {
    optimizer.validate()?;
    if teacher.num_classes != student.num_classes {
        return Err(EngineError::ClassMismatch {
            teacher: teacher.num_classes,
            student: student.num_classes,
        });
    }
    let ids = student.trainable_all();
    let mut log = TrainLog::default();
    let mut best: Option<Vec<Tensor<f32>>> = None;
    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (images, labels) in stream.epoch(epoch) {
            let teacher_logits = teacher.logits(images.clone())?;
            let mut tape = Tape::new();
            let (logits, _) = student.forward(&mut tape, images, Mode::Train, &[])?;
            let loss = kd_loss(&mut tape, logits, &teacher_logits, &labels_usize(&labels))?;
            loss_sum += tape.value(loss).item() as f64;
            batches += 1;
            tape.backward(loss)?;
            tape.export_grads(&mut student.params);
            optimizer_step(&mut student.params, &ids, optimizer, epoch)?;
            student.params.zero_grads();
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let acc = evaluate(student, val, stream.batch_size)?;
        log.epoch_train_loss.push(train_loss);
        log.val_acc.push(acc);
        log.lines.push(format!(
            "{},{:.6},{:.4},{:.6}",
            epoch,
            train_loss,
            acc,
            optimizer.lr_at(epoch)
        ));
        if acc > log.best_val_acc || best.is_none() {
            log.best_val_acc = acc;
            log.best_epoch = epoch;
            best = Some(snapshot(student));
        }
    }
    if let Some(snap) = best {
        restore(student, &snap);
    }
    Ok(log)
}

/// Plain supervised training on cross-entropy (teacher training and the
/// from-scratch baseline). Returns the best-validation parameters.
pub fn train_backprop(
    net: &mut Network,
    stream: &BatchStream,
    val: &Dataset,
    epochs: usize,
    optimizer: &OptimizerConfig,
) -> Result<TrainLog, EngineError> {
    optimizer.validate()?;
    let ids = net.trainable_all();
    let mut log = TrainLog::default();
    let mut best: Option<Vec<Tensor<f32>>> = None;
    for epoch in 0..epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (images, labels) in stream.epoch(epoch) {
            let mut tape = Tape::new();
            let (logits, _) = net.forward(&mut tape, images, Mode::Train, &[])?;
            let loss = tape.softmax_cross_entropy(logits, &labels_usize(&labels))?;
            loss_sum += tape.value(loss).item() as f64;
            batches += 1;
            tape.backward(loss)?;
            tape.export_grads(&mut net.params);
            optimizer_step(&mut net.params, &ids, optimizer, epoch)?;
            net.params.zero_grads();
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let acc = evaluate(net, val, stream.batch_size)?;
        log.epoch_train_loss.push(train_loss);
        log.val_acc.push(acc);
        log.lines.push(format!(
            "{},{:.6},{:.4},{:.6}",
            epoch,
            train_loss,
            acc,
            optimizer.lr_at(epoch)
        ));
        if acc > log.best_val_acc || best.is_none() {
            log.best_val_acc = acc;
            log.best_epoch = epoch;
            best = Some(snapshot(net));
        }
    }
    if let Some(snap) = best {
        restore(net, &snap);
    }
    Ok(log)
}
