//! Recasting plans: which source block becomes which target block.
//!
//! Supported pairs (transformation rows preserve the output dimension,
//! compression rows reduce it):
//!
//! | source      | target      | dimension  |
//! |-------------|-------------|------------|
//! | dense       | basic       | preserved  |
//! | dense       | convolution | preserved  |
//! | basic       | convolution | preserved  |
//! | bottleneck  | convolution | reduced    |
//! | basic       | basic       | reduced    |
//! | convolution | convolution | reduced    |
//!
//! Anything else must be `keep`. Target input channels are never declared;
//! they follow from the chain after next-block rebuilds.

use super::EngineError;
use crate::net::{rebuild_next_block, BlockKind, BlockSpec, NetSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanAction {
    Keep,
    Recast {
        kind: BlockKind,
        out_channels: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecastPlan {
    pub actions: Vec<PlanAction>,
}

impl RecastPlan {
    pub fn all_keep(blocks: usize) -> Self {
        Self {
            actions: vec![PlanAction::Keep; blocks],
        }
    }

    /// Recast every block to a convolution block where Table 1 allows it:
    /// dense/basic preserved, bottleneck reduced to its 3x3 width.
    /// Convolution blocks and transitions are kept.
    pub fn all_to_convolution(teacher: &NetSpec) -> Self {
        let actions = teacher
            .blocks
            .iter()
            .map(|b| match b.kind {
                BlockKind::Dense | BlockKind::Basic => PlanAction::Recast {
                    kind: BlockKind::Convolution,
                    out_channels: b.out_channels,
                },
                BlockKind::Bottleneck => PlanAction::Recast {
                    kind: BlockKind::Convolution,
                    out_channels: (b.out_channels / 4).max(1),
                },
                _ => PlanAction::Keep,
            })
            .collect();
        Self { actions }
    }

    /// Recast dense blocks to basic blocks (dimension preserved), keep the
    /// rest.
    pub fn dense_to_basic(teacher: &NetSpec) -> Self {
        let actions = teacher
            .blocks
            .iter()
            .map(|b| match b.kind {
                BlockKind::Dense => PlanAction::Recast {
                    kind: BlockKind::Basic,
                    out_channels: b.out_channels,
                },
                _ => PlanAction::Keep,
            })
            .collect();
        Self { actions }
    }

    pub fn is_identity(&self) -> bool {
        self.actions.iter().all(|a| matches!(a, PlanAction::Keep))
    }

    pub fn recast_indices(&self) -> Vec<usize> {
        self.actions
            .iter()
            .enumerate()
            .filter_map(|(i, a)| matches!(a, PlanAction::Recast { .. }).then_some(i))
            .collect()
    }

    pub fn validate(&self, teacher: &NetSpec) -> Result<(), EngineError> {
        if self.actions.len() != teacher.blocks.len() {
            return Err(EngineError::PlanLength {
                plan_blocks: self.actions.len(),
                teacher_blocks: teacher.blocks.len(),
            });
        }
        for (i, (action, source)) in self.actions.iter().zip(&teacher.blocks).enumerate() {
            let PlanAction::Recast { kind, out_channels } = action else {
                continue;
            };
            if *out_channels == 0 {
                return Err(EngineError::PlanBlock {
                    index: i,
                    msg: "target needs at least one output channel".into(),
                });
            }
            let ok = match (source.kind, kind) {
                // transformation rows: dimension preserved
                (BlockKind::Dense, BlockKind::Basic)
                | (BlockKind::Dense, BlockKind::Convolution)
                | (BlockKind::Basic, BlockKind::Convolution) => {
                    *out_channels == source.out_channels
                }
                // bottleneck -> convolution: dimension reduced
                (BlockKind::Bottleneck, BlockKind::Convolution) => {
                    *out_channels <= source.out_channels
                }
                // compression rows: same type, reduced (or equal) width
                (BlockKind::Basic, BlockKind::Basic)
                | (BlockKind::Convolution, BlockKind::Convolution) => {
                    *out_channels <= source.out_channels
                }
                _ => false,
            };
            if !ok {
                return Err(EngineError::InvalidPair {
                    index: i,
                    source_kind: source.kind.name().into(),
                    target_kind: kind.name().into(),
                    out_channels: *out_channels,
                    source_out: source.out_channels,
                });
            }
            // A dense next block concatenates its input into its output, so
            // it cannot absorb a width reduction and still match the
            // teacher's activation. Reject the configuration up front.
            if *out_channels < source.out_channels {
                if let Some(next) = teacher.blocks.get(i + 1) {
                    if next.kind == BlockKind::Dense {
                        return Err(EngineError::PlanBlock {
                            index: i,
                            msg: format!(
                                "reducing to {out_channels} channels feeds dense block {}, which cannot restore the teacher's activation dimension",
                                i + 1
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Target spec for a recast block given the chain's incoming channel
    /// count; the source contributes stride and pooling.
    pub fn target_spec(
        source: &BlockSpec,
        kind: BlockKind,
        out_channels: usize,
        in_channels: usize,
    ) -> BlockSpec {
        let mut spec = match kind {
            BlockKind::Convolution => BlockSpec::convolution(in_channels, out_channels, source.stride),
            BlockKind::Basic => BlockSpec::basic(in_channels, out_channels, source.stride),
            other => unreachable!("unsupported recast target {other:?}"),
        };
        if source.max_pool_after {
            spec = spec.with_pool();
        }
        spec
    }

    /// The student architecture this plan produces on the given teacher
    /// (chain made consistent with next-block rebuilds).
    pub fn resolve(&self, teacher: &NetSpec) -> Result<NetSpec, EngineError> {
        self.validate(teacher)?;
        let mut blocks = Vec::with_capacity(teacher.blocks.len());
        let mut in_c = teacher.stem_channels;
        for (action, source) in self.actions.iter().zip(&teacher.blocks) {
            let spec = match action {
                PlanAction::Keep => rebuild_next_block(source, in_c),
                PlanAction::Recast { kind, out_channels } => {
                    Self::target_spec(source, *kind, *out_channels, in_c)
                }
            };
            in_c = spec.out_channels;
            blocks.push(spec);
        }
        let spec = NetSpec {
            input_shape: teacher.input_shape,
            stem_channels: teacher.stem_channels,
            blocks,
            num_classes: teacher.num_classes,
            classifier_hidden: teacher.classifier_hidden,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Plan file: one line per block, `block <i>: keep` or
    /// `block <i>: recast <kind> <out_channels>`.
    pub fn format(&self) -> String {
        let mut out = String::new();
        for (i, a) in self.actions.iter().enumerate() {
            match a {
                PlanAction::Keep => out.push_str(&format!("block {i}: keep\n")),
                PlanAction::Recast { kind, out_channels } => {
                    out.push_str(&format!("block {i}: recast {} {}\n", kind.name(), out_channels))
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, EngineError> {
        let mut entries: Vec<(usize, PlanAction)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| EngineError::PlanParse { line: ln + 1, msg };
            let rest = line
                .strip_prefix("block ")
                .ok_or_else(|| err("expected `block <i>: ...`".into()))?;
            let (idx_str, action_str) = rest
                .split_once(':')
                .ok_or_else(|| err("missing `:`".into()))?;
            let idx: usize = idx_str
                .trim()
                .parse()
                .map_err(|_| err(format!("bad block index `{}`", idx_str.trim())))?;
            let toks: Vec<&str> = action_str.split_whitespace().collect();
            let action = match toks.as_slice() {
                ["keep"] => PlanAction::Keep,
                ["recast", kind, out] => {
                    let kind = match *kind {
                        "conv" | "convolution" => BlockKind::Convolution,
                        "basic" => BlockKind::Basic,
                        other => return Err(err(format!("unsupported target kind `{other}`"))),
                    };
                    let out_channels: usize = out
                        .parse()
                        .map_err(|_| err(format!("bad channel count `{out}`")))?;
                    PlanAction::Recast { kind, out_channels }
                }
                _ => return Err(err(format!("bad action `{}`", action_str.trim()))),
            };
            entries.push((idx, action));
        }
        entries.sort_by_key(|(i, _)| *i);
        for (pos, (i, _)) in entries.iter().enumerate() {
            if *i != pos {
                return Err(EngineError::PlanParse {
                    line: 0,
                    msg: format!("block indices must cover 0..n contiguously; missing {pos}"),
                });
            }
        }
        Ok(Self {
            actions: entries.into_iter().map(|(_, a)| a).collect(),
        })
    }
}

/// Same-type width compression: every basic/convolution block mapped to
/// `max(1, round(r * out_channels))` filters; stem, transitions, dense
/// blocks and the classifier are kept.
pub fn make_compression_plan(teacher: &NetSpec, r: f64) -> Result<RecastPlan, EngineError> {
    if !(r > 0.0 && r < 1.0) {
        return Err(EngineError::BadMultiplier(r));
    }
    let mut any = false;
    let actions = teacher
        .blocks
        .iter()
        .map(|b| match b.kind {
            BlockKind::Basic | BlockKind::Convolution => {
                any = true;
                PlanAction::Recast {
                    kind: b.kind,
                    out_channels: ((r * b.out_channels as f64).round() as usize).max(1),
                }
            }
            _ => PlanAction::Keep,
        })
        .collect();
    if !any {
        return Err(EngineError::NothingToCompress);
    }
    Ok(RecastPlan { actions })
}
