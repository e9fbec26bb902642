//! Analytic inference-cost accounting: parameters, multiplications and
//! activation loads per image, per block and in total.
//!
//! All counts are pure functions of the architecture spec and the input
//! shape; nothing is executed. The activation-load headline counts the
//! input elements each convolution layer reads (so a dense layer reading
//! a concatenated feature map pays for every channel it touches); the
//! write-side count is carried in the breakdown so both conventions stay
//! inspectable.

use crate::net::{BlockKind, NetSpec};

/// Costs of one named segment (stem, one block, or the classifier).
#[derive(Debug, Clone, Default)]
pub struct BlockCost {
    pub label: String,
    pub kind: String,
    pub params_conv: u64,
    pub params_bn: u64,
    pub params_linear: u64,
    pub mults_conv: u64,
    pub mults_linear: u64,
    pub act_reads_conv: u64,
    pub act_writes_conv: u64,
}

impl BlockCost {
    fn add_conv(&mut self, in_c: usize, out_c: usize, k: usize, h_in: (usize, usize), h_out: (usize, usize)) {
        self.params_conv += (out_c * in_c * k * k) as u64;
        self.mults_conv += (out_c * in_c * k * k) as u64 * (h_out.0 * h_out.1) as u64;
        self.act_reads_conv += (in_c * h_in.0 * h_in.1) as u64;
        self.act_writes_conv += (out_c * h_out.0 * h_out.1) as u64;
    }
}

/// Whole-network cost report with a per-block breakdown.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub input_shape: [usize; 3],
    pub per_block: Vec<BlockCost>,
}

impl CostReport {
    /// Headline parameter count: convolution plus linear weights (batch
    /// norm affine reported separately in the breakdown).
    pub fn params(&self) -> u64 {
        self.per_block
            .iter()
            .map(|b| b.params_conv + b.params_linear)
            .sum()
    }

    pub fn params_conv_only(&self) -> u64 {
        self.per_block.iter().map(|b| b.params_conv).sum()
    }

    pub fn params_full(&self) -> u64 {
        self.per_block
            .iter()
            .map(|b| b.params_conv + b.params_linear + b.params_bn)
            .sum()
    }

    /// Multiplications for one image: convolutions plus linear layers.
    pub fn mults(&self) -> u64 {
        self.per_block
            .iter()
            .map(|b| b.mults_conv + b.mults_linear)
            .sum()
    }

    pub fn mults_conv_only(&self) -> u64 {
        self.per_block.iter().map(|b| b.mults_conv).sum()
    }

    /// Activation load per image: elements read by convolution layers.
    pub fn act_load(&self) -> u64 {
        self.per_block.iter().map(|b| b.act_reads_conv).sum()
    }

    /// Alternative convention: elements written by convolution layers.
    pub fn act_writes(&self) -> u64 {
        self.per_block.iter().map(|b| b.act_writes_conv).sum()
    }

    /// Human-readable table.
    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "input {}x{}x{}\n",
            self.input_shape[0], self.input_shape[1], self.input_shape[2]
        ));
        out.push_str(&format!(
            "{:<14} {:<11} {:>12} {:>16} {:>12} {:>12}\n",
            "segment", "kind", "params", "mults", "act_reads", "act_writes"
        ));
        for b in &self.per_block {
            out.push_str(&format!(
                "{:<14} {:<11} {:>12} {:>16} {:>12} {:>12}\n",
                b.label,
                b.kind,
                b.params_conv + b.params_linear,
                b.mults_conv + b.mults_linear,
                b.act_reads_conv,
                b.act_writes_conv
            ));
        }
        out.push_str(&format!(
            "total params {} (conv-only {}, +bn {})\n",
            self.params(),
            self.params_conv_only(),
            self.params_full()
        ));
        out.push_str(&format!(
            "total mults {} (conv-only {})\n",
            self.mults(),
            self.mults_conv_only()
        ));
        out.push_str(&format!(
            "act load/image {} (reads convention; writes {})\n",
            self.act_load(),
            self.act_writes()
        ));
        out
    }

    /// Flat key=value form for scripts.
    pub fn kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("params={}\n", self.params()));
        out.push_str(&format!("params_conv={}\n", self.params_conv_only()));
        out.push_str(&format!("params_full={}\n", self.params_full()));
        out.push_str(&format!("mults={}\n", self.mults()));
        out.push_str(&format!("mults_conv={}\n", self.mults_conv_only()));
        out.push_str(&format!("act_load={}\n", self.act_load()));
        out.push_str(&format!("act_writes={}\n", self.act_writes()));
        for b in &self.per_block {
            out.push_str(&format!(
                "{}.params={}\n{}.mults={}\n{}.act_reads={}\n",
                b.label,
                b.params_conv + b.params_linear,
                b.label,
                b.mults_conv + b.mults_linear,
                b.label,
                b.act_reads_conv
            ));
        }
        out
    }
}

fn conv_out(h: usize, k: usize, stride: usize, padding: usize) -> usize {
    (h + 2 * padding - k) / stride + 1
}

/// Full cost accounting of a network spec at its declared input shape.
pub fn cost_report(spec: &NetSpec) -> CostReport {
    cost_report_at(spec, (spec.input_shape[1], spec.input_shape[2]))
}

/// Cost accounting at an explicit spatial input size.
pub fn cost_report_at(spec: &NetSpec, input_hw: (usize, usize)) -> CostReport {
    let mut per_block = Vec::new();
    let (mut h, mut w) = input_hw;

    // stem: conv3x3 stride 1 pad 1 + bn
    let mut stem = BlockCost {
        label: "stem".into(),
        kind: "stem".into(),
        ..Default::default()
    };
    stem.add_conv(spec.input_shape[0], spec.stem_channels, 3, (h, w), (h, w));
    stem.params_bn = 2 * spec.stem_channels as u64;
    per_block.push(stem);

    for (i, b) in spec.blocks.iter().enumerate() {
        let mut c = BlockCost {
            label: format!("block{i}"),
            kind: b.kind.name().into(),
            ..Default::default()
        };
        // spatial size after the block's striding conv (or transition pool)
        let (oh, ow) = match b.kind {
            BlockKind::Transition => (h / 2, w / 2),
            _ => (
                conv_out(h, 3, b.stride, 1),
                conv_out(w, 3, b.stride, 1),
            ),
        };
        for g in b.conv_geometry() {
            let (gin, gout) = if g.at_block_input {
                let out = (
                    conv_out(h, g.k, g.stride, g.padding),
                    conv_out(w, g.k, g.stride, g.padding),
                );
                ((h, w), out)
            } else {
                ((oh, ow), (oh, ow))
            };
            c.add_conv(g.in_c, g.out_c, g.k, gin, gout);
        }
        c.params_bn = 2 * b.bn_param_channels().iter().sum::<usize>() as u64;
        per_block.push(c);
        h = oh;
        w = ow;
        if b.max_pool_after {
            h = (h - 2) / 2 + 1;
            w = (w - 2) / 2 + 1;
        }
    }

    // classifier: global pool then linear layer(s)
    let mut cls = BlockCost {
        label: "classifier".into(),
        kind: "classifier".into(),
        ..Default::default()
    };
    let feat = spec.blocks.last().map(|b| b.out_channels).unwrap_or(0);
    let mut d = feat;
    if spec.classifier_hidden > 0 {
        cls.params_linear += (spec.classifier_hidden * d + spec.classifier_hidden) as u64;
        cls.mults_linear += (spec.classifier_hidden * d) as u64;
        d = spec.classifier_hidden;
    }
    cls.params_linear += (spec.num_classes * d + spec.num_classes) as u64;
    cls.mults_linear += (spec.num_classes * d) as u64;
    per_block.push(cls);

    CostReport {
        input_shape: [spec.input_shape[0], input_hw.0, input_hw.1],
        per_block,
    }
}

/// Parameter count (headline convention: conv + linear).
pub fn count_params(spec: &NetSpec) -> u64 {
    cost_report(spec).params()
}

/// Multiplication count per image at the given spatial input.
pub fn count_mults(spec: &NetSpec, input_hw: (usize, usize)) -> u64 {
    cost_report_at(spec, input_hw).mults()
}

/// Activation load per image (reads convention) at the given input.
pub fn count_activation_load(spec: &NetSpec, input_hw: (usize, usize)) -> u64 {
    cost_report_at(spec, input_hw).act_load()
}
