//! Text architecture files: one block per line.
//!
//! ```text
//! # comments and blank lines are skipped
//! input 3 32 32
//! stem 16
//! basic 16 1
//! conv 32 2 pool
//! dense 12 16
//! transition 108
//! classifier 512     # optional hidden width; line itself optional
//! ```
//!
//! Input channels of each block follow from the previous line, so a
//! parsed file always has a consistent channel chain.

use super::{BlockSpec, NetError, NetSpec};

pub fn parse_arch(text: &str, num_classes: usize) -> Result<NetSpec, NetError> {
    let mut input_shape: Option<[usize; 3]> = None;
    let mut stem: Option<usize> = None;
    let mut blocks: Vec<BlockSpec> = Vec::new();
    let mut hidden = 0usize;

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| NetError::ArchParse { line: ln + 1, msg };
        let mut parts = line.split_whitespace();
        let kw = parts.next().unwrap();
        let args: Vec<&str> = parts.collect();
        let parse = |s: &str| -> Result<usize, NetError> {
            s.parse::<usize>()
                .map_err(|_| err(format!("expected a number, got `{s}`")))
        };
        let cur_channels = || -> Result<usize, NetError> {
            blocks
                .last()
                .map(|b| b.out_channels)
                .or(stem)
                .ok_or_else(|| err("block appears before `stem` line".into()))
        };
        match kw {
            "input" => {
                if args.len() != 3 {
                    return Err(err("input needs C H W".into()));
                }
                input_shape = Some([parse(args[0])?, parse(args[1])?, parse(args[2])?]);
            }
            "stem" => {
                if args.len() != 1 {
                    return Err(err("stem needs one channel count".into()));
                }
                stem = Some(parse(args[0])?);
            }
            "conv" => {
                if args.is_empty() || args.len() > 3 {
                    return Err(err("conv needs `out stride [pool]`".into()));
                }
                let in_c = cur_channels()?;
                let out = parse(args[0])?;
                let stride = if args.len() >= 2 { parse(args[1])? } else { 1 };
                let mut b = BlockSpec::convolution(in_c, out, stride);
                if args.len() == 3 {
                    if args[2] != "pool" {
                        return Err(err(format!("unknown conv flag `{}`", args[2])));
                    }
                    b = b.with_pool();
                }
                blocks.push(b);
            }
            "basic" | "bottleneck" => {
                if args.is_empty() || args.len() > 2 {
                    return Err(err(format!("{kw} needs `out [stride]`")));
                }
                let in_c = cur_channels()?;
                let out = parse(args[0])?;
                let stride = if args.len() == 2 { parse(args[1])? } else { 1 };
                blocks.push(if kw == "basic" {
                    BlockSpec::basic(in_c, out, stride)
                } else {
                    BlockSpec::bottleneck(in_c, out, stride)
                });
            }
            "dense" => {
                if args.len() != 2 {
                    return Err(err("dense needs `growth num_layers`".into()));
                }
                let in_c = cur_channels()?;
                blocks.push(BlockSpec::dense(in_c, parse(args[0])?, parse(args[1])?));
            }
            "transition" => {
                if args.len() != 1 {
                    return Err(err("transition needs `out`".into()));
                }
                let in_c = cur_channels()?;
                blocks.push(BlockSpec::transition(in_c, parse(args[0])?));
            }
            "classifier" => {
                if args.len() > 1 {
                    return Err(err("classifier takes at most a hidden width".into()));
                }
                if args.len() == 1 {
                    hidden = parse(args[0])?;
                }
            }
            other => return Err(err(format!("unknown block kind `{other}`"))),
        }
    }

    let spec = NetSpec {
        input_shape: input_shape.ok_or(NetError::ArchParse {
            line: 0,
            msg: "missing `input C H W` line".into(),
        })?,
        stem_channels: stem.ok_or(NetError::ArchParse {
            line: 0,
            msg: "missing `stem N` line".into(),
        })?,
        blocks,
        num_classes,
        classifier_hidden: hidden,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn format_arch(spec: &NetSpec) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "input {} {} {}\n",
        spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]
    ));
    out.push_str(&format!("stem {}\n", spec.stem_channels));
    for b in &spec.blocks {
        match b.kind {
            super::BlockKind::Convolution => {
                out.push_str(&format!("conv {} {}", b.out_channels, b.stride));
                if b.max_pool_after {
                    out.push_str(" pool");
                }
                out.push('\n');
            }
            super::BlockKind::Basic => {
                out.push_str(&format!("basic {} {}\n", b.out_channels, b.stride))
            }
            super::BlockKind::Bottleneck => {
                out.push_str(&format!("bottleneck {} {}\n", b.out_channels, b.stride))
            }
            super::BlockKind::Dense => {
                out.push_str(&format!("dense {} {}\n", b.growth_rate, b.num_layers))
            }
            super::BlockKind::Transition => {
                out.push_str(&format!("transition {}\n", b.out_channels))
            }
            super::BlockKind::Classifier => {}
        }
    }
    if spec.classifier_hidden > 0 {
        out.push_str(&format!("classifier {}\n", spec.classifier_hidden));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let text = "input 3 16 16\nstem 8\nbasic 8 1\nconv 16 2 pool\ndense 4 3\ntransition 14\n";
        let spec = parse_arch(text, 5).unwrap();
        assert_eq!(spec.blocks.len(), 4);
        assert_eq!(spec.blocks[2].out_channels, 16 + 12);
        let again = parse_arch(&format_arch(&spec), 5).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "input 3 16 16\nstem 8\nwhat 4\n";
        match parse_arch(text, 2) {
            Err(NetError::ArchParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
