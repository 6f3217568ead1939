//! Checkpoint container.
//!
//! A UTF-8 manifest (magic line, architecture, epoch, RNG state, preprocessing, the network
//! dump) followed by a table of named tensors, each a text header line plus the binary tensor
//! payload. Files are written to a temporary name and renamed into place, so an interrupted
//! write never replaces the previous checkpoint.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::sgd::Sgd;
use crate::data::{ChannelStats, Preprocessor, ZcaTransform};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::rng::{Rng, RngState};
use crate::tensor::{read_tensor_from, write_tensor_to, Tensor};

const MAGIC: &str = "mpelu-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
    Velocity,
    Preproc,
}

impl TensorKind {
    fn tag(self) -> &'static str {
        match self {
            TensorKind::Param => "param",
            TensorKind::Buffer => "buffer",
            TensorKind::Velocity => "velocity",
            TensorKind::Preproc => "preproc",
        }
    }

    fn parse(s: &str) -> Option<TensorKind> {
        Some(match s {
            "param" => TensorKind::Param,
            "buffer" => TensorKind::Buffer,
            "velocity" => TensorKind::Velocity,
            "preproc" => TensorKind::Preproc,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub preprocessor: Preprocessor,
    pub dump: String,
    pub tensors: Vec<(TensorKind, String, Tensor)>,
}

fn preproc_tensors(p: &Preprocessor) -> (String, Vec<(TensorKind, String, Tensor)>) {
    let vec = |v: &[f64]| Tensor::new([v.len()], v.to_vec()).expect("rank-1 tensor");
    match p {
        Preprocessor::Identity => ("none".into(), vec![]),
        Preprocessor::Standardize(s) => (
            "standardize".into(),
            vec![
                (TensorKind::Preproc, "mean".into(), vec(&s.mean)),
                (TensorKind::Preproc, "std".into(), vec(&s.std)),
            ],
        ),
        Preprocessor::GcnZca(z) => (
            format!("gcn-zca {}", z.eps),
            vec![
                (TensorKind::Preproc, "mean".into(), vec(&z.mean)),
                (TensorKind::Preproc, "whitening".into(), z.whitening.clone()),
            ],
        ),
    }
}

impl Checkpoint {
    pub fn capture(
        arch: &str,
        epoch: usize,
        rng: &Rng,
        net: &NetworkGraph,
        sgd: &Sgd,
        pre: &Preprocessor,
    ) -> Self {
        let mut tensors: Vec<(TensorKind, String, Tensor)> = Vec::new();
        tensors.extend(
            net.params()
                .into_iter()
                .map(|(n, p)| (TensorKind::Param, n, p.value.clone())),
        );
        tensors.extend(
            net.buffers()
                .into_iter()
                .map(|(n, t)| (TensorKind::Buffer, n, t.clone())),
        );
        tensors.extend(
            sgd.velocities()
                .iter()
                .map(|(n, t)| (TensorKind::Velocity, n.clone(), t.clone())),
        );
        Checkpoint {
            arch: arch.to_string(),
            epoch,
            rng: rng.state(),
            preprocessor: pre.clone(),
            dump: net.dump(),
            tensors,
        }
    }

    fn of_kind(&self, kind: TensorKind) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors
            .iter()
            .filter(move |t| t.0 == kind)
            .map(|t| (&t.1, &t.2))
    }

    /// Copies parameters and buffers into `net`, and momentum buffers into `sgd` when given.
    /// The tensor table must match the network exactly (names, order and shapes).
    pub fn restore(&self, net: &mut NetworkGraph, sgd: Option<&mut Sgd>) -> Result<()> {
        let mismatch = |what: &str, detail: String| Error::Schema(format!("{what}: {detail}"));
        let saved: Vec<_> = self.of_kind(TensorKind::Param).collect();
        let params = net.params();
        if saved.len() != params.len() {
            return Err(mismatch(
                "parameters",
                format!(
                    "checkpoint has {}, network has {}",
                    saved.len(),
                    params.len()
                ),
            ));
        }
        for ((name, t), (pname, p)) in saved.iter().zip(&params) {
            if *name != pname || t.shape() != p.value.shape() {
                return Err(mismatch(
                    "parameters",
                    format!(
                        "`{name}` {:?} vs `{pname}` {:?}",
                        t.shape(),
                        p.value.shape()
                    ),
                ));
            }
        }
        let saved_buf: Vec<_> = self.of_kind(TensorKind::Buffer).collect();
        let bufs = net.buffers();
        if saved_buf.len() != bufs.len()
            || saved_buf
                .iter()
                .zip(&bufs)
                .any(|((n, t), (bn, b))| *n != bn || t.shape() != b.shape())
        {
            return Err(mismatch(
                "buffers",
                format!("{} saved, {} in network", saved_buf.len(), bufs.len()),
            ));
        }
        for ((_, t), (_, p)) in saved.iter().zip(net.params_mut()) {
            p.value = (*t).clone();
        }
        for ((_, t), (_, b)) in saved_buf.iter().zip(net.buffers_mut()) {
            *b = (*t).clone();
        }
        if let Some(sgd) = sgd {
            let v = self
                .of_kind(TensorKind::Velocity)
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect();
            sgd.set_velocities(v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (pre_name, pre_tensors) = preproc_tensors(&self.preprocessor);
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "arch {}", self.arch)?;
        writeln!(w, "epoch {}", self.epoch)?;
        writeln!(w, "rng {} {}", self.rng.seed, self.rng.word_pos)?;
        writeln!(w, "preproc {pre_name}")?;
        writeln!(w, "dump {}", self.dump.len())?;
        w.write_all(self.dump.as_bytes())?;
        let all: Vec<_> = self.tensors.iter().chain(&pre_tensors).collect();
        writeln!(w, "tensors {}", all.len())?;
        for (kind, name, t) in all {
            writeln!(w, "{} {name}", kind.tag())?;
            write_tensor_to(t, &mut w)?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        Checkpoint::read_from(
            BufReader::new(File::open(path)?),
            &path.display().to_string(),
        )
    }

    pub fn read_from<R: BufRead>(mut r: R, origin: &str) -> Result<Checkpoint> {
        let bad = |msg: String| Error::Format {
            path: origin.to_string(),
            message: msg,
        };
        let mut line = String::new();
        let mut next = |r: &mut R, key: &str| -> Result<String> {
            line.clear();
            r.read_line(&mut line)?;
            let l = line.trim_end_matches('\n');
            if key.is_empty() {
                return Ok(l.to_string());
            }
            l.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}` line, found `{l}`")))
        };
        let magic = next(&mut r, "")?;
        if magic != MAGIC {
            return Err(bad(format!("not a checkpoint (header `{magic}`)")));
        }
        let arch = next(&mut r, "arch")?;
        let epoch = next(&mut r, "epoch")?
            .parse()
            .map_err(|e| bad(format!("epoch: {e}")))?;
        let rng_line = next(&mut r, "rng")?;
        let rng = match rng_line.split_once(' ') {
            Some((s, p)) => RngState {
                seed: s.parse().map_err(|e| bad(format!("rng seed: {e}")))?,
                word_pos: p.parse().map_err(|e| bad(format!("rng position: {e}")))?,
            },
            None => return Err(bad(format!("malformed rng line `{rng_line}`"))),
        };
        let pre_name = next(&mut r, "preproc")?;
        let dump_len: usize = next(&mut r, "dump")?
            .parse()
            .map_err(|e| bad(format!("dump length: {e}")))?;
        let mut dump = vec![0u8; dump_len];
        r.read_exact(&mut dump)
            .map_err(|e| bad(format!("truncated dump: {e}")))?;
        let dump = String::from_utf8(dump).map_err(|e| bad(format!("dump is not UTF-8: {e}")))?;
        let count: usize = next(&mut r, "tensors")?
            .parse()
            .map_err(|e| bad(format!("tensor count: {e}")))?;
        let mut tensors = Vec::with_capacity(count);
        let mut pre = Vec::new();
        for _ in 0..count {
            let header = next(&mut r, "")?;
            let (kind, name) = header
                .split_once(' ')
                .and_then(|(k, n)| Some((TensorKind::parse(k)?, n.to_string())))
                .ok_or_else(|| bad(format!("malformed tensor header `{header}`")))?;
            let t = read_tensor_from(&mut r, origin)?;
            if kind == TensorKind::Preproc {
                pre.push((name, t));
            } else {
                tensors.push((kind, name, t));
            }
        }
        if next(&mut r, "")? != "end" {
            return Err(bad("missing end marker".into()));
        }
        let preprocessor = parse_preprocessor(&pre_name, pre).map_err(|m| bad(m))?;
        Ok(Checkpoint {
            arch,
            epoch,
            rng,
            preprocessor,
            dump,
            tensors,
        })
    }
}

fn parse_preprocessor(
    name: &str,
    tensors: Vec<(String, Tensor)>,
) -> std::result::Result<Preprocessor, String> {
    let take = |key: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == key)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| format!("preprocessing tensor `{key}` missing"))
    };
    let mut parts = name.split(' ');
    match parts.next() {
        Some("none") => Ok(Preprocessor::Identity),
        Some("standardize") => Ok(Preprocessor::Standardize(ChannelStats {
            mean: take("mean")?.into_data(),
            std: take("std")?.into_data(),
        })),
        Some("gcn-zca") => {
            let eps = parts
                .next()
                .and_then(|e| e.parse().ok())
                .ok_or_else(|| format!("gcn-zca without eps in `{name}`"))?;
            Ok(Preprocessor::GcnZca(ZcaTransform {
                mean: take("mean")?.into_data(),
                whitening: take("whitening")?,
                eps,
            }))
        }
        _ => Err(format!("unknown preprocessing `{name}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_network, FanMode, InitMethod};
    use crate::models::{build_plain, PlainConfig};
    use crate::train::SgdConfig;
    use crate::ActivationKind;

    fn net(seed: u64, depth: usize) -> NetworkGraph {
        let mut cfg = PlainConfig::new(depth, 4, ActivationKind::mpelu(1.0, 1.0));
        cfg.batch_norm = true;
        let mut n = build_plain(&cfg).unwrap();
        init_network(
            &mut n,
            &InitMethod::Msra { slope: 0.0 },
            FanMode::FanIn,
            &mut Rng::new(seed),
        )
        .unwrap();
        n
    }

    #[test]
    fn roundtrip_is_exact() {
        let n = net(1, 2);
        let mut sgd = Sgd::new(SgdConfig::default(), &n).unwrap();
        let v: Vec<_> = sgd
            .velocities()
            .iter()
            .map(|(k, t)| (k.clone(), t.map(|x| x + 0.25)))
            .collect();
        sgd.set_velocities(v).unwrap();
        let mut rng = Rng::new(5);
        rng.normal();
        let pre = Preprocessor::Standardize(ChannelStats {
            mean: vec![0.1, 0.2, 0.3],
            std: vec![1.0, 2.0, 3.0],
        });
        let ck = Checkpoint::capture("plain:2:4", 3, &rng, &n, &sgd, &pre);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);

        let mut fresh = net(2, 2);
        let mut sgd2 = Sgd::new(SgdConfig::default(), &fresh).unwrap();
        back.restore(&mut fresh, Some(&mut sgd2)).unwrap();
        assert_eq!(fresh.params(), n.params());
        assert_eq!(fresh.buffers(), n.buffers());
        assert_eq!(sgd2, sgd);
        assert_eq!(Rng::from_state(back.rng).normal(), rng.clone().normal());
    }

    #[test]
    fn mismatched_network_is_schema_error() {
        let n = net(1, 2);
        let sgd = Sgd::new(SgdConfig::default(), &n).unwrap();
        let ck = Checkpoint::capture("x", 0, &Rng::new(0), &n, &sgd, &Preprocessor::Identity);
        let mut other = net(1, 3);
        assert!(matches!(
            ck.restore(&mut other, None),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn garbage_is_format_error() {
        let err = Checkpoint::read_from(&b"hello\n"[..], "mem").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let n = net(1, 1);
        let sgd = Sgd::new(SgdConfig::default(), &n).unwrap();
        let ck = Checkpoint::capture("x", 0, &Rng::new(0), &n, &sgd, &Preprocessor::Identity);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 20);
        assert!(Checkpoint::read_from(&bytes[..], "mem").is_err());
    }
}
