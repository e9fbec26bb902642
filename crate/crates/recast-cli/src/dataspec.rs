//! Dataset specifiers on the command line and in config files:
//!
//! - `synth:seed=1,n=10000,classes=4,size=16`
//! - `cifar:path/a.bin[,path/b.bin...]`
//! - `idx:images_path,labels_path`
//! - `raw:path.rcdata`

use anyhow::{anyhow, bail, Context, Result};
use std::path::PathBuf;

use recast_core::data::{load_cifar_binary, load_idx, load_raw, synth_dataset, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Synth {
        seed: u64,
        n: usize,
        classes: usize,
        size: usize,
    },
    Cifar(Vec<PathBuf>),
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Raw(PathBuf),
}

impl DataSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| anyhow!("data spec `{spec}` needs a `kind:` prefix"))?;
        match kind {
            "synth" => {
                let (mut seed, mut n, mut classes, mut size) = (0u64, 10_000usize, 4usize, 16usize);
                for kv in rest.split(',').filter(|s| !s.is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| anyhow!("synth spec: bad `{kv}`"))?;
                    match k {
                        "seed" => seed = v.parse().context("synth seed")?,
                        "n" => n = v.parse().context("synth n")?,
                        "classes" => classes = v.parse().context("synth classes")?,
                        "size" => size = v.parse().context("synth size")?,
                        other => bail!("synth spec: unknown key `{other}`"),
                    }
                }
                Ok(Self::Synth {
                    seed,
                    n,
                    classes,
                    size,
                })
            }
            "cifar" => Ok(Self::Cifar(rest.split(',').map(PathBuf::from).collect())),
            "idx" => {
                let (images, labels) = rest
                    .split_once(',')
                    .ok_or_else(|| anyhow!("idx spec needs `images,labels`"))?;
                Ok(Self::Idx {
                    images: images.into(),
                    labels: labels.into(),
                })
            }
            "raw" => Ok(Self::Raw(rest.into())),
            other => bail!("unknown data kind `{other}` (expected synth/cifar/idx/raw)"),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            Self::Synth {
                seed,
                n,
                classes,
                size,
            } => Ok(synth_dataset(*seed, *n, *classes, *size)),
            Self::Cifar(paths) => Ok(load_cifar_binary(paths)?),
            Self::Idx { images, labels } => Ok(load_idx(images, labels)?),
            Self::Raw(path) => Ok(load_raw(path)?),
        }
    }

    /// Default validation companion: synth specs shift the seed and take a
    /// fifth of the samples; file-backed specs need an explicit val spec.
    pub fn default_val(&self) -> Option<Self> {
        match self {
            Self::Synth {
                seed,
                n,
                classes,
                size,
            } => Some(Self::Synth {
                seed: seed.wrapping_add(1),
                n: (*n / 5).max(*classes),
                classes: *classes,
                size: *size,
            }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_synth_spec() {
        let s = DataSpec::parse("synth:seed=3,n=100,classes=2,size=8").unwrap();
        assert_eq!(
            s,
            DataSpec::Synth {
                seed: 3,
                n: 100,
                classes: 2,
                size: 8
            }
        );
        assert!(DataSpec::parse("synth:bogus=1").is_err());
        assert!(DataSpec::parse("nope").is_err());
    }

    #[test]
    fn parse_file_specs() {
        assert!(matches!(DataSpec::parse("cifar:a.bin,b.bin").unwrap(), DataSpec::Cifar(v) if v.len() == 2));
        assert!(matches!(DataSpec::parse("idx:i,l").unwrap(), DataSpec::Idx { .. }));
        assert!(matches!(DataSpec::parse("raw:x.rcdata").unwrap(), DataSpec::Raw(_)));
        assert!(DataSpec::parse("idx:only_images").is_err());
    }
}
