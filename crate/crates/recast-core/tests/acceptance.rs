//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured quantities (run with `--nocapture` to see them).
//!
//! The desk benchmark is the 10k-image / 2k-image synthetic set at 16x16;
//! the heavy experiments are seeded end to end.

mod common;

use common::gradbattery::{run_composed_battery, run_op_battery};
use recast_core::cost;
use recast_core::data::{synth_dataset, BatchStream, Dataset, Split};
use recast_core::engine::{
    kd_finetune, make_compression_plan, mse_activation_loss, sequential_recast, train_backprop,
    RecastConfig, RecastPlan,
};
use recast_core::net::{preset_spec, BlockSpec, NetSpec, Network};
use recast_core::tensor::{Mode, OptimizerConfig, Tape};

fn pass(criterion: usize, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion} ({name}): PASS — {detail}");
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() / target <= rel
}

/// The 10k/2k desk benchmark with train-split normalization attached.
fn desk_data(classes: usize) -> (Dataset, Dataset) {
    let mut train = synth_dataset(1, 10_000, classes, 16);
    let stats = train.compute_norm();
    let mut val = synth_dataset(2, 2_000, classes, 16);
    val.norm = Some(stats);
    val.split = Split::Val;
    (train, val)
}

fn basic_stack(widths16: usize, widths32: usize) -> Vec<BlockSpec> {
    let mut blocks = Vec::new();
    for _ in 0..widths16 {
        blocks.push(BlockSpec::basic(16, 16, 1));
    }
    for i in 0..widths32 {
        blocks.push(if i == 0 {
            BlockSpec::basic(16, 32, 2)
        } else {
            BlockSpec::basic(32, 32, 1)
        });
    }
    blocks
}

fn teacher_sgd() -> OptimizerConfig {
    OptimizerConfig::sgd_nesterov(0.05, 0.9, 5e-4).with_schedule(vec![(5, 10.0)])
}

#[test]
fn criterion_1_cost_model_reproduction() {
    let rn56 = cost::cost_report(&preset_spec("resnet56", 10).unwrap());
    let wrn = cost::cost_report(&preset_spec("wrn-28-10", 10).unwrap());

    let rn_params = rn56.params() as f64;
    let rn_mults = rn56.mults() as f64;
    let rn_acts = rn56.act_load() as f64;
    let wrn_params = wrn.params() as f64;
    let wrn_mults = wrn.mults() as f64;

    assert!(within(rn_params, 0.85e6, 0.02), "ResNet-56 params {rn_params}");
    assert!(within(rn_mults, 125.75e6, 0.02), "ResNet-56 mults {rn_mults}");
    assert!(within(rn_acts, 0.56e6, 0.15), "ResNet-56 act load {rn_acts}");
    assert!(within(wrn_params, 36.45e6, 0.02), "WRN-28-10 params {wrn_params}");
    assert!(within(wrn_mults, 5.24e9, 0.02), "WRN-28-10 mults {wrn_mults}");
    pass(
        1,
        "cost-model reproduction",
        format!(
            "ResNet-56 params {rn_params:.3e} mults {rn_mults:.4e} acts {rn_acts:.3e}; WRN-28-10 params {wrn_params:.4e} mults {wrn_mults:.3e}"
        ),
    );
}

#[test]
fn criterion_2_gradient_correctness() {
    let op_cases = run_op_battery();
    let composed = run_composed_battery();
    assert!(op_cases >= 100, "only {op_cases} op-level cases");
    assert!(composed >= 3, "only {composed} composed-block cases");
    pass(
        2,
        "gradient correctness",
        format!("{op_cases} op cases + {composed} composed-block cases at rtol 1e-3 (f64)"),
    );
}

#[test]
fn criterion_3_identity_fixed_point() {
    let spec = NetSpec {
        input_shape: [3, 16, 16],
        stem_channels: 16,
        blocks: basic_stack(2, 1),
        num_classes: 4,
        classifier_hidden: 0,
    };
    let mut teacher = Network::build(&spec, 301).unwrap();
    let mut data = synth_dataset(5, 256, 4, 16);
    data.compute_norm();
    let stream = BatchStream::new(&data, 64, 9, true);

    // all-keep plan: bit-identical logits
    let plan = RecastPlan::all_keep(teacher.num_blocks());
    let before = teacher.tensor_bytes();
    let (mut student, _) =
        sequential_recast(&mut teacher, &plan, &stream, &RecastConfig::default()).unwrap();
    assert_eq!(teacher.tensor_bytes(), before, "teacher modified");
    let input = {
        let d = synth_dataset(6, 8, 4, 16);
        d.images
    };
    let t_logits = teacher.logits(input.clone()).unwrap();
    let s_logits = student.logits(input.clone()).unwrap();
    assert_eq!(t_logits, s_logits, "all-keep logits must be bit-identical");

    // teacher-copied same-type target: activation loss exactly zero
    let mut copy = teacher.clone();
    let mut ttape = Tape::new();
    let tv = teacher
        .forward_upto(&mut ttape, input.clone(), 1, Mode::Eval)
        .unwrap();
    let teacher_act = ttape.value(tv).clone();
    let mut stape = Tape::new();
    let sv = copy.forward_upto(&mut stape, input, 1, Mode::Eval).unwrap();
    let loss = mse_activation_loss(&mut stape, sv, &teacher_act).unwrap();
    assert_eq!(stape.value(loss).item(), 0.0, "copied-target loss must be exactly 0");
    pass(
        3,
        "identity fixed point",
        "all-keep logits bit-identical; teacher-copied target loss exactly 0".to_string(),
    );
}

#[test]
fn criterion_4_desk_scale_transformation() {
    let (train, val) = desk_data(4);
    let stream = BatchStream::new(&train, 128, 11, true);
    let teacher_spec = NetSpec {
        input_shape: [3, 16, 16],
        stem_channels: 16,
        blocks: basic_stack(3, 3),
        num_classes: 4,
        classifier_hidden: 0,
    };

    let mut teacher = Network::build(&teacher_spec, 7).unwrap();
    let tlog = train_backprop(&mut teacher, &stream, &val, 8, &teacher_sgd()).unwrap();
    let teacher_acc = tlog.best_val_acc;
    assert!(teacher_acc >= 0.95, "teacher only reached {teacher_acc:.4}");

    // all-conv recasting + KD fine-tune
    let plan = RecastPlan::all_to_convolution(&teacher_spec);
    let student_spec = plan.resolve(&teacher_spec).unwrap();
    let cfg = RecastConfig {
        epochs_per_block: 3,
        optimizer: OptimizerConfig::adam(2e-3),
        finetune_epochs: 6,
        finetune_optimizer: OptimizerConfig::adam(3e-4).with_schedule(vec![(4, 10.0)]),
        freeze_prefix: false,
        seed: 0x5eed,
    };
    let teacher_bytes = teacher.tensor_bytes();
    let (mut student, rlog) = sequential_recast(&mut teacher, &plan, &stream, &cfg).unwrap();
    assert_eq!(teacher.tensor_bytes(), teacher_bytes, "teacher modified by recasting");
    // epoch-averaged activation loss decreases monotonically (1.05 slack)
    for step in &rlog.steps {
        for w in step.epoch_losses.windows(2) {
            assert!(
                w[1] <= w[0] * 1.05,
                "step {} loss rose {:.5} -> {:.5}",
                step.block_index,
                w[0],
                w[1]
            );
        }
    }
    let pre_ft_acc = recast_core::engine::evaluate(&mut student, &val, 256).unwrap();
    let ftlog = kd_finetune(
        &mut teacher,
        &mut student,
        &stream,
        &val,
        cfg.finetune_epochs,
        &cfg.finetune_optimizer,
    )
    .unwrap();
    let recast_acc = ftlog.best_val_acc;
    assert!(
        recast_acc >= pre_ft_acc,
        "fine-tuning reduced accuracy: {pre_ft_acc:.4} -> {recast_acc:.4}"
    );
    assert!(
        recast_acc >= teacher_acc - 0.02,
        "recast {recast_acc:.4} below teacher {teacher_acc:.4} - 2pp"
    );

    // identical-architecture baselines
    let baseline_sgd = OptimizerConfig::sgd_nesterov(0.05, 0.9, 5e-4).with_schedule(vec![(8, 10.0)]);
    let mut scratch = Network::build(&student_spec, 1007).unwrap();
    let scratch_acc = train_backprop(&mut scratch, &stream, &val, 12, &baseline_sgd)
        .unwrap()
        .best_val_acc;
    let mut kd_student = Network::build(&student_spec, 1009).unwrap();
    let kd_acc = kd_finetune(&mut teacher, &mut kd_student, &stream, &val, 12, &baseline_sgd)
        .unwrap()
        .best_val_acc;

    assert!(
        scratch_acc <= recast_acc + 0.005,
        "backprop {scratch_acc:.4} beats recasting {recast_acc:.4} beyond slack"
    );
    assert!(
        kd_acc <= recast_acc + 0.005,
        "KD-only {kd_acc:.4} beats recasting {recast_acc:.4} beyond slack"
    );
    pass(
        4,
        "desk-scale transformation",
        format!(
            "teacher {teacher_acc:.4}, recast {recast_acc:.4}, backprop {scratch_acc:.4}, kd {kd_acc:.4}"
        ),
    );
}

#[test]
fn criterion_5_desk_scale_dense_to_basic() {
    let (train, val) = desk_data(4);
    let stream = BatchStream::new(&train, 128, 13, true);
    let teacher_spec = NetSpec {
        input_shape: [3, 16, 16],
        stem_channels: 16,
        blocks: vec![
            BlockSpec::dense(16, 8, 5),
            BlockSpec::transition(56, 28),
            BlockSpec::dense(28, 8, 5),
        ],
        num_classes: 4,
        classifier_hidden: 0,
    };
    let mut teacher = Network::build(&teacher_spec, 17).unwrap();
    let teacher_acc = train_backprop(&mut teacher, &stream, &val, 8, &teacher_sgd())
        .unwrap()
        .best_val_acc;

    let plan = RecastPlan::dense_to_basic(&teacher_spec);
    let student_spec = plan.resolve(&teacher_spec).unwrap();
    let act_ratio = cost::count_activation_load(&teacher_spec, (16, 16)) as f64
        / cost::count_activation_load(&student_spec, (16, 16)) as f64;
    assert!(act_ratio >= 2.0, "act load only reduced {act_ratio:.2}x");

    let cfg = RecastConfig {
        epochs_per_block: 4,
        optimizer: OptimizerConfig::adam(2e-3),
        finetune_epochs: 5,
        finetune_optimizer: OptimizerConfig::adam(3e-4).with_schedule(vec![(3, 10.0)]),
        freeze_prefix: false,
        seed: 0xdead,
    };
    let (mut student, _) = sequential_recast(&mut teacher, &plan, &stream, &cfg).unwrap();
    let recast_acc = kd_finetune(
        &mut teacher,
        &mut student,
        &stream,
        &val,
        cfg.finetune_epochs,
        &cfg.finetune_optimizer,
    )
    .unwrap()
    .best_val_acc;
    assert!(
        recast_acc >= teacher_acc - 0.02,
        "dense->basic {recast_acc:.4} below teacher {teacher_acc:.4} - 2pp"
    );
    pass(
        5,
        "desk-scale dense->basic",
        format!("teacher {teacher_acc:.4}, recast {recast_acc:.4}, act load ratio {act_ratio:.2}x"),
    );
}

#[test]
fn criterion_6_compression() {
    // analytic spot check first: WRN-28-10 at 5x smaller blocks
    let wrn = preset_spec("wrn-28-10", 10).unwrap();
    let wrn_small = make_compression_plan(&wrn, 0.2)
        .unwrap()
        .resolve(&wrn)
        .unwrap();
    let wrn_ratio = cost::count_params(&wrn) as f64 / cost::count_params(&wrn_small) as f64;
    assert!(within(wrn_ratio, 24.9, 0.10), "WRN ratio {wrn_ratio:.2}");

    // trained compression on a conv chain at r = 0.5
    let (train, val) = desk_data(4);
    let stream = BatchStream::new(&train, 128, 19, true);
    let mut blocks = vec![BlockSpec::convolution(16, 32, 1)];
    for i in 1..10 {
        blocks.push(BlockSpec::convolution(32, 32, if i == 5 { 2 } else { 1 }));
    }
    let teacher_spec = NetSpec {
        input_shape: [3, 16, 16],
        stem_channels: 16,
        blocks,
        num_classes: 4,
        classifier_hidden: 0,
    };
    let mut teacher = Network::build(&teacher_spec, 23).unwrap();
    let teacher_acc = train_backprop(&mut teacher, &stream, &val, 6, &teacher_sgd())
        .unwrap()
        .best_val_acc;

    let plan = make_compression_plan(&teacher_spec, 0.5).unwrap();
    let student_spec = plan.resolve(&teacher_spec).unwrap();
    let params_ratio =
        cost::count_params(&teacher_spec) as f64 / cost::count_params(&student_spec) as f64;
    assert!(
        within(params_ratio, 4.0, 0.15),
        "compression params ratio {params_ratio:.2} not ~4x"
    );

    let cfg = RecastConfig {
        epochs_per_block: 2,
        optimizer: OptimizerConfig::adam(2e-3),
        finetune_epochs: 4,
        finetune_optimizer: OptimizerConfig::adam(3e-4).with_schedule(vec![(3, 10.0)]),
        freeze_prefix: false,
        seed: 0xc0de,
    };
    let (mut student, _) = sequential_recast(&mut teacher, &plan, &stream, &cfg).unwrap();
    let student_acc = kd_finetune(
        &mut teacher,
        &mut student,
        &stream,
        &val,
        cfg.finetune_epochs,
        &cfg.finetune_optimizer,
    )
    .unwrap()
    .best_val_acc;
    assert!(
        student_acc >= teacher_acc - 0.03,
        "compressed {student_acc:.4} below teacher {teacher_acc:.4} - 3pp"
    );
    pass(
        6,
        "compression",
        format!(
            "teacher {teacher_acc:.4}, r=0.5 student {student_acc:.4}, params {params_ratio:.2}x, WRN spot check {wrn_ratio:.1}x"
        ),
    );
}

#[test]
fn criterion_7_sequential_vs_whole_ablation() {
    let (train, val) = desk_data(4);
    let stream = BatchStream::new(&train, 128, 29, true);
    // 12-block teacher whose all-conv student is a 12-conv-block plain net
    let teacher_spec = NetSpec {
        input_shape: [3, 16, 16],
        stem_channels: 16,
        blocks: basic_stack(6, 6),
        num_classes: 4,
        classifier_hidden: 0,
    };
    let mut teacher = Network::build(&teacher_spec, 31).unwrap();
    train_backprop(&mut teacher, &stream, &val, 8, &teacher_sgd()).unwrap();

    let plan = RecastPlan::all_to_convolution(&teacher_spec);
    let student_spec = plan.resolve(&teacher_spec).unwrap();
    assert!(student_spec.blocks.len() >= 10);

    let cfg = RecastConfig {
        epochs_per_block: 2,
        optimizer: OptimizerConfig::adam(2e-3),
        finetune_epochs: 4,
        finetune_optimizer: OptimizerConfig::adam(3e-4).with_schedule(vec![(3, 10.0)]),
        freeze_prefix: false,
        seed: 0xab1e,
    };
    let (mut student, _) = sequential_recast(&mut teacher, &plan, &stream, &cfg).unwrap();
    let recast_acc = kd_finetune(
        &mut teacher,
        &mut student,
        &stream,
        &val,
        cfg.finetune_epochs,
        &cfg.finetune_optimizer,
    )
    .unwrap()
    .best_val_acc;

    // from-scratch backprop of the same plain student with a matched
    // compute budget: 12 steps x 2 epochs over growing prefixes plus 4
    // fine-tune epochs come to ~18 full-network epochs
    let mut scratch = Network::build(&student_spec, 3001).unwrap();
    let sgd = OptimizerConfig::sgd_nesterov(0.05, 0.9, 5e-4)
        .with_schedule(vec![(10, 10.0), (15, 10.0)]);
    let scratch_acc = train_backprop(&mut scratch, &stream, &val, 18, &sgd)
        .unwrap()
        .best_val_acc;

    let recast_err = 1.0 - recast_acc;
    let scratch_err = 1.0 - scratch_acc;
    assert!(
        recast_err < scratch_err + 0.005,
        "sequential recasting err {recast_err:.4} not below backprop err {scratch_err:.4} + slack"
    );
    pass(
        7,
        "sequential-vs-whole ablation",
        format!(
            "{}-conv-block student: recast err {recast_err:.4} vs backprop err {scratch_err:.4}",
            student_spec.blocks.len()
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let run = || {
        let mut train = synth_dataset(41, 1024, 4, 16);
        train.compute_norm();
        let mut val = synth_dataset(42, 256, 4, 16);
        val.norm = train.norm.clone();
        val.split = Split::Val;
        let spec = NetSpec {
            input_shape: [3, 16, 16],
            stem_channels: 16,
            blocks: basic_stack(1, 1),
            num_classes: 4,
            classifier_hidden: 0,
        };
        let mut net = Network::build(&spec, 43).unwrap();
        let stream = BatchStream::new(&train, 64, 44, true);
        let log = train_backprop(&mut net, &stream, &val, 2, &teacher_sgd()).unwrap();

        let plan = RecastPlan::all_to_convolution(&net.spec());
        let cfg = RecastConfig {
            epochs_per_block: 1,
            ..Default::default()
        };
        let (student, rlog) = sequential_recast(&mut net, &plan, &stream, &cfg).unwrap();
        (
            net.tensor_bytes(),
            student.tensor_bytes(),
            log.lines.join("\n"),
            rlog.lines.join("\n"),
        )
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0, "teacher checkpoints differ");
    assert_eq!(a.1, b.1, "student checkpoints differ");
    assert_eq!(a.2, b.2, "training metrics differ");
    assert_eq!(a.3, b.3, "recast logs differ");
    pass(
        8,
        "determinism",
        "two identical runs: byte-identical checkpoints and metrics".to_string(),
    );
}
