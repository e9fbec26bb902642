//! Named CIFAR-scale architectures.

use super::{BlockSpec, NetError, NetSpec};

/// Literature-standard CIFAR topologies by name.
pub fn preset_spec(name: &str, num_classes: usize) -> Result<NetSpec, NetError> {
    let key = name.to_ascii_lowercase().replace(['-', '_'], "");
    match key.as_str() {
        "resnet56" => Ok(resnet_basic(&[(9, 16), (9, 32), (9, 64)], 16, num_classes)),
        // Same block count as ResNet-56 but bottleneck blocks with the
        // standard 4x expansion (stage widths reconstructed).
        "resnet83" => Ok(resnet_bottleneck(
            &[(9, 64), (9, 128), (9, 256)],
            16,
            num_classes,
        )),
        "wrn2810" => Ok(resnet_basic(
            &[(4, 160), (4, 320), (4, 640)],
            16,
            num_classes,
        )),
        "densenet100" => Ok(densenet_bc(12, 16, 3, num_classes)),
        "vgg16" => Ok(vgg16(num_classes)),
        _ => Err(NetError::UnknownPreset(name.to_string())),
    }
}

fn resnet_basic(stages: &[(usize, usize)], stem: usize, num_classes: usize) -> NetSpec {
    let mut blocks = Vec::new();
    let mut in_c = stem;
    for (si, &(n, width)) in stages.iter().enumerate() {
        for bi in 0..n {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            blocks.push(BlockSpec::basic(in_c, width, stride));
            in_c = width;
        }
    }
    NetSpec {
        input_shape: [3, 32, 32],
        stem_channels: stem,
        blocks,
        num_classes,
        classifier_hidden: 0,
    }
}

fn resnet_bottleneck(stages: &[(usize, usize)], stem: usize, num_classes: usize) -> NetSpec {
    let mut blocks = Vec::new();
    let mut in_c = stem;
    for (si, &(n, width)) in stages.iter().enumerate() {
        for bi in 0..n {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            blocks.push(BlockSpec::bottleneck(in_c, width, stride));
            in_c = width;
        }
    }
    NetSpec {
        input_shape: [3, 32, 32],
        stem_channels: stem,
        blocks,
        num_classes,
        classifier_hidden: 0,
    }
}

/// DenseNet-BC: bottleneck composite layers, transitions halving channels.
fn densenet_bc(growth: usize, layers_per_block: usize, num_blocks: usize, num_classes: usize) -> NetSpec {
    let stem = 2 * growth;
    let mut blocks = Vec::new();
    let mut in_c = stem;
    for bi in 0..num_blocks {
        let dense = BlockSpec::dense(in_c, growth, layers_per_block);
        in_c = dense.out_channels;
        blocks.push(dense);
        if bi + 1 < num_blocks {
            let out = in_c / 2;
            blocks.push(BlockSpec::transition(in_c, out));
            in_c = out;
        }
    }
    NetSpec {
        input_shape: [3, 32, 32],
        stem_channels: stem,
        blocks,
        num_classes,
        classifier_hidden: 0,
    }
}

/// CIFAR VGG-16 variant: batch-normed 3x3 stacks with max pooling, one
/// hidden fully-connected layer of 512.
fn vgg16(num_classes: usize) -> NetSpec {
    let mut blocks = Vec::new();
    let mut in_c = 64; // first conv is the stem
    let plan: &[(usize, bool)] = &[
        (64, true),
        (128, false),
        (128, true),
        (256, false),
        (256, false),
        (256, true),
        (512, false),
        (512, false),
        (512, true),
        (512, false),
        (512, false),
        (512, true),
    ];
    for &(width, pool) in plan {
        let mut b = BlockSpec::convolution(in_c, width, 1);
        if pool {
            b = b.with_pool();
        }
        blocks.push(b);
        in_c = width;
    }
    NetSpec {
        input_shape: [3, 32, 32],
        stem_channels: 64,
        blocks,
        num_classes,
        classifier_hidden: 512,
    }
}
