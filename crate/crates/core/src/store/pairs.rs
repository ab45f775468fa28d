use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{open_container, with_path, write_container_with, ContainerReader, Dtype, Tensor};
use crate::error::{Error, FormatError, Result};
use crate::linalg::DenseMatrix;
use crate::model::{HiddenStatePair, HiddenStatePairSet};

pub const PAIRS_KIND: &str = "pairs";

/// Header metadata of a pair-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSetMeta {
    pub layer_index: usize,
    pub d_model: usize,
    pub samples: usize,
    pub source_hash: String,
    pub distribution: String,
    pub dtype: Dtype,
}

pub fn pair_tensor_name(layer: usize, sample: usize, output: bool) -> String {
    format!("layer{layer}/sample{sample}/{}", if output { "x_o" } else { "x_i" })
}

fn pair_names(layer: usize, samples: usize) -> Vec<String> {
    (0..samples)
        .flat_map(|k| [pair_tensor_name(layer, k, false), pair_tensor_name(layer, k, true)])
        .collect()
}

/// Writes `meta.samples` pairs produced on demand by `produce(k)`, so a set
/// never has to be held in memory. `produce` is called twice per sample and
/// must be deterministic.
pub fn write_pairs_with<F>(path: &Path, meta: &PairSetMeta, produce: F) -> Result<()>
where
    F: Fn(usize) -> Result<HiddenStatePair>,
{
    let file = File::create(path).map_err(|source| Error::Io {
        path: Some(path.to_path_buf()),
        source,
    })?;
    let names = pair_names(meta.layer_index, meta.samples);
    let value = serde_json::to_value(meta).expect("pair metadata serializes");
    write_container_with(BufWriter::new(file), PAIRS_KIND, value, names, |emit| {
        for k in 0..meta.samples {
            let p = produce(k)?;
            check_pair(&p, meta.d_model, k)?;
            for (output, m) in [(false, &p.x_i), (true, &p.x_o)] {
                let t = Tensor::float(
                    pair_tensor_name(meta.layer_index, k, output),
                    vec![m.rows(), m.cols()],
                    m.data(),
                    meta.dtype,
                );
                emit(&t)?;
            }
        }
        Ok(())
    })
    .map_err(|e| with_path(e, path))
}

pub fn save_pairs(path: &Path, set: &HiddenStatePairSet, dtype: Dtype) -> Result<()> {
    let meta = PairSetMeta {
        layer_index: set.layer_index,
        d_model: set.d_model,
        samples: set.len(),
        source_hash: set.source_hash.clone(),
        distribution: set.distribution.clone(),
        dtype,
    };
    write_pairs_with(path, &meta, |k| Ok(set.pairs[k].clone()))
}

fn check_pair(p: &HiddenStatePair, d_model: usize, k: usize) -> Result<()> {
    if p.x_i.cols() != d_model || p.x_o.cols() != d_model || p.x_i.rows() != p.x_o.rows() {
        return Err(Error::shape(format!(
            "pair {k}: x_i {:?}, x_o {:?}, expected n×{d_model}",
            p.x_i.shape(),
            p.x_o.shape()
        )));
    }
    Ok(())
}

/// Streams pairs from a file one sample at a time. The content hash is
/// verified after the last pair; a corrupted file surfaces as an error item.
pub struct PairReader {
    inner: ContainerReader<BufReader<File>>,
    meta: PairSetMeta,
    next: usize,
    done: bool,
}

impl PairReader {
    pub fn open(path: &Path) -> Result<Self> {
        let inner = open_container(path)?;
        let header = inner.header();
        if header.kind != PAIRS_KIND {
            return Err(FormatError::Header(format!(
                "expected a {PAIRS_KIND} container, found `{}`",
                header.kind
            ))
            .into());
        }
        let meta: PairSetMeta =
            serde_json::from_value(header.meta.clone()).map_err(|e| FormatError::Header(e.to_string()))?;
        if meta.samples == 0 || meta.d_model == 0 {
            return Err(FormatError::Header("pair set with zero samples or zero width".into()).into());
        }
        if header.tensors != pair_names(meta.layer_index, meta.samples) {
            return Err(FormatError::Header("pair tensor names are not complete x_i/x_o pairs".into()).into());
        }
        Ok(Self {
            inner,
            meta,
            next: 0,
            done: false,
        })
    }

    pub fn meta(&self) -> &PairSetMeta {
        &self.meta
    }

    fn matrix(&mut self) -> Result<DenseMatrix> {
        let t = self
            .inner
            .next_tensor()?
            .ok_or_else(|| FormatError::Truncated {
                what: format!("sample {}", self.next),
            })?;
        let width_err = |detail: String| FormatError::BadTensor {
            tensor: t.name.clone(),
            detail,
        };
        if t.dims.len() != 2 || t.dims[1] != self.meta.d_model {
            return Err(width_err(format!("dims {:?}, expected n×{}", t.dims, self.meta.d_model)).into());
        }
        let values = t.to_f64().ok_or_else(|| width_err("expected a floating-point tensor".into()))?;
        DenseMatrix::new(t.dims[0], t.dims[1], values)
    }

    fn read_pair(&mut self) -> Result<HiddenStatePair> {
        let x_i = self.matrix()?;
        let x_o = self.matrix()?;
        if x_i.rows() != x_o.rows() {
            return Err(FormatError::BadTensor {
                tensor: pair_tensor_name(self.meta.layer_index, self.next, true),
                detail: format!("{} rows, x_i has {}", x_o.rows(), x_i.rows()),
            }
            .into());
        }
        self.next += 1;
        if self.next == self.meta.samples {
            // Runs the trailing-byte and hash checks.
            if self.inner.next_tensor()?.is_some() {
                return Err(FormatError::TrailingBytes.into());
            }
        }
        Ok(HiddenStatePair { x_i, x_o })
    }
}

impl Iterator for PairReader {
    type Item = Result<HiddenStatePair>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.next == self.meta.samples {
            return None;
        }
        let r = self.read_pair();
        if r.is_err() {
            self.done = true;
        }
        Some(r)
    }
}

pub fn load_pairs(path: &Path) -> Result<HiddenStatePairSet> {
    let reader = PairReader::open(path)?;
    let meta = reader.meta().clone();
    let pairs = reader.collect::<Result<Vec<_>>>().map_err(|e| with_path(e, path))?;
    let mut set = HiddenStatePairSet::new(meta.layer_index, meta.d_model, pairs)?;
    set.source_hash = meta.source_hash;
    set.distribution = meta.distribution;
    Ok(set)
}
