//! Checkpoint files: magic + version, a human-readable structural header,
//! then little-endian f32 blobs in header order. Round-trips are bit-exact
//! on parameters, running statistics and specs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BlockKind, BlockSpec, NetError, NetSpec, Network};

const MAGIC: &[u8; 6] = b"RCNET\n";
const VERSION: u32 = 1;

pub fn save(net: &Network, path: &Path) -> Result<(), NetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    writeln!(w, "version {VERSION}")?;
    let spec = net.spec();
    writeln!(
        w,
        "input {} {} {}",
        spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]
    )?;
    writeln!(w, "classes {}", spec.num_classes)?;
    writeln!(w, "stem {}", spec.stem_channels)?;
    writeln!(w, "blocks {}", spec.blocks.len())?;
    for b in &spec.blocks {
        writeln!(w, "{}", block_line(b))?;
    }
    writeln!(w, "classifier {}", spec.classifier_hidden)?;
    let tensors = net.named_tensors();
    writeln!(w, "tensors {}", tensors.len())?;
    for (name, id) in &tensors {
        let dims: Vec<String> = net
            .params
            .value(*id)
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect();
        writeln!(w, "{name} {}", dims.join(" "))?;
    }
    writeln!(w, "data")?;
    for (_, id) in &tensors {
        for v in net.params.value(*id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn block_line(b: &BlockSpec) -> String {
    match b.kind {
        BlockKind::Convolution => format!(
            "block conv {} {} {} {}",
            b.in_channels,
            b.out_channels,
            b.stride,
            u8::from(b.max_pool_after)
        ),
        BlockKind::Basic => format!(
            "block basic {} {} {} {}",
            b.in_channels,
            b.out_channels,
            b.stride,
            u8::from(b.has_projection_shortcut)
        ),
        BlockKind::Bottleneck => format!(
            "block bottleneck {} {} {} {}",
            b.in_channels,
            b.out_channels,
            b.stride,
            u8::from(b.has_projection_shortcut)
        ),
        BlockKind::Dense => format!(
            "block dense {} {} {} {}",
            b.in_channels, b.growth_rate, b.num_layers, b.bottleneck_width
        ),
        BlockKind::Transition => format!("block transition {} {}", b.in_channels, b.out_channels),
        BlockKind::Classifier => unreachable!("classifier is not part of the block chain"),
    }
}

fn parse_block_line(line: &str) -> Result<BlockSpec, NetError> {
    let bad = |msg: &str| NetError::HeaderParse(format!("{msg}: `{line}`"));
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() < 4 || parts[0] != "block" {
        return Err(bad("malformed block line"));
    }
    let num = |i: usize| -> Result<usize, NetError> {
        parts
            .get(i)
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad("malformed block field"))
    };
    let spec = match parts[1] {
        "conv" => {
            let mut s = BlockSpec::convolution(num(2)?, num(3)?, num(4)?);
            if num(5)? != 0 {
                s = s.with_pool();
            }
            s
        }
        "basic" => {
            let mut s = BlockSpec::basic(num(2)?, num(3)?, num(4)?);
            s.has_projection_shortcut = num(5)? != 0;
            s
        }
        "bottleneck" => {
            let mut s = BlockSpec::bottleneck(num(2)?, num(3)?, num(4)?);
            s.has_projection_shortcut = num(5)? != 0;
            s
        }
        "dense" => {
            let mut s = BlockSpec::dense(num(2)?, num(3)?, num(4)?);
            s.bottleneck_width = num(5)?;
            s
        }
        "transition" => BlockSpec::transition(num(2)?, num(3)?),
        other => return Err(bad(&format!("unknown block kind `{other}`"))),
    };
    Ok(spec)
}

pub fn load(path: &Path) -> Result<Network, NetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| NetError::Truncated("missing magic".into()))?;
    if &magic != MAGIC {
        return Err(NetError::BadMagic);
    }

    let read_line = |r: &mut BufReader<File>| -> Result<String, NetError> {
        let mut line = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte)
                .map_err(|_| NetError::Truncated("header ended early".into()))?;
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        String::from_utf8(line).map_err(|_| NetError::HeaderParse("non-utf8 header".into()))
    };

    let vline = read_line(&mut r)?;
    let version: u32 = vline
        .strip_prefix("version ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| NetError::HeaderParse(format!("bad version line `{vline}`")))?;
    if version != VERSION {
        return Err(NetError::UnsupportedVersion(version));
    }

    let field = |line: &str, key: &str| -> Result<Vec<usize>, NetError> {
        line.strip_prefix(key)
            .map(|rest| {
                rest.split_whitespace()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| NetError::HeaderParse(format!("bad `{key}` line: {line}")))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .ok_or_else(|| NetError::HeaderParse(format!("expected `{key}`, got `{line}`")))?
    };

    let input = field(&read_line(&mut r)?, "input ")?;
    if input.len() != 3 {
        return Err(NetError::HeaderParse("input needs 3 dims".into()));
    }
    let classes = field(&read_line(&mut r)?, "classes ")?[0];
    let stem = field(&read_line(&mut r)?, "stem ")?[0];
    let nblocks = field(&read_line(&mut r)?, "blocks ")?[0];
    let mut blocks = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        blocks.push(parse_block_line(&read_line(&mut r)?)?);
    }
    let hidden = field(&read_line(&mut r)?, "classifier ")?[0];

    let spec = NetSpec {
        input_shape: [input[0], input[1], input[2]],
        stem_channels: stem,
        blocks,
        num_classes: classes,
        classifier_hidden: hidden,
    };
    let mut net = Network::build(&spec, 0)?;

    let ntensors = field(&read_line(&mut r)?, "tensors ")?[0];
    let mut declared: Vec<(String, Vec<usize>)> = Vec::with_capacity(ntensors);
    for _ in 0..ntensors {
        let line = read_line(&mut r)?;
        let mut it = line.split_whitespace();
        let name = it
            .next()
            .ok_or_else(|| NetError::HeaderParse("empty tensor line".into()))?
            .to_string();
        let dims = it
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| NetError::HeaderParse(format!("bad tensor dims: {line}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        declared.push((name, dims));
    }
    let data_line = read_line(&mut r)?;
    if data_line != "data" {
        return Err(NetError::HeaderParse(format!(
            "expected `data`, got `{data_line}`"
        )));
    }

    let expected = net.named_tensors();
    if expected.len() != declared.len() {
        return Err(NetError::HeaderParse(format!(
            "file declares {} tensors, network needs {}",
            declared.len(),
            expected.len()
        )));
    }
    for ((name, dims), (ename, id)) in declared.iter().zip(&expected) {
        let shape = net.params.value(*id).shape().to_vec();
        if dims != &shape {
            return Err(NetError::TensorShapeMismatch {
                name: name.clone(),
                expected: shape,
                found: dims.clone(),
            });
        }
        let _ = ename;
    }

    for (name, id) in &expected {
        let n = net.params.value(*id).numel();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|_| NetError::Truncated(format!("tensor `{name}` data missing")))?;
        let dst = net.params.value_mut(*id).data_mut();
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(NetError::Truncated("trailing bytes after tensor data".into()));
    }
    Ok(net)
}
