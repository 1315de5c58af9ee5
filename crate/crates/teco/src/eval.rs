//! Evaluation and persistence: accuracy, the corruption-robustness mean,
//! feature-coherence diagnostics, checkpoints and CSV/JSON reports.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptationConfig;
use crate::autodiff::{Graph, NodeId, ReduceKind, Tensor};
use crate::data::{batch_from_samples, dense_sample, uniform_sample, LabeledDataset};
use crate::error::{Result, TecoError};
use crate::model::VideoClassifier;
use crate::nn::{NormLayer, StatMode};

const EVAL_CHUNK: usize = 32;

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    (0..logits.shape()[0])
        .map(|r| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn eval_logits(
    model: &mut VideoClassifier,
    dataset: &LabeledDataset,
    k_global: usize,
) -> Result<Vec<Tensor>> {
    if dataset.clips.is_empty() {
        return Err(TecoError::EmptyDataset);
    }
    let mut out = Vec::new();
    for chunk in dataset.clips.chunks(EVAL_CHUNK) {
        let samples: Vec<_> = chunk
            .iter()
            .map(|c| uniform_sample(c, k_global.min(c.len()), true, 0))
            .collect::<Result<_>>()?;
        let batch = batch_from_samples(&samples);
        let mut g = Graph::new();
        let logits = model.forward_global(&mut g, &batch, StatMode::Eval)?;
        out.push(g.value(logits).clone());
    }
    Ok(out)
}

/// Classification accuracy with frozen parameters and statistics; inference
/// uses deterministic uniform sampling on the global pathway only.
pub fn evaluate(
    model: &mut VideoClassifier,
    dataset: &LabeledDataset,
    k_global: usize,
) -> Result<f32> {
    let mut correct = 0usize;
    let mut offset = 0usize;
    for logits in eval_logits(model, dataset, k_global)? {
        for (i, pred) in argmax_rows(&logits).into_iter().enumerate() {
            if pred == dataset.clips[offset + i].label {
                correct += 1;
            }
        }
        offset += logits.shape()[0];
    }
    Ok(correct as f32 / dataset.clips.len() as f32)
}

/// Row-major `[true][pred]` class confusion counts under frozen statistics.
pub fn confusion_matrix(
    model: &mut VideoClassifier,
    dataset: &LabeledDataset,
    k_global: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = model.num_classes;
    let mut m = vec![vec![0usize; n]; n];
    let mut offset = 0usize;
    for logits in eval_logits(model, dataset, k_global)? {
        for (i, pred) in argmax_rows(&logits).into_iter().enumerate() {
            m[dataset.clips[offset + i].label][pred] += 1;
        }
        offset += logits.shape()[0];
    }
    Ok(m)
}

/// Mean prediction entropy over the dataset under frozen statistics.
pub fn mean_entropy(
    model: &mut VideoClassifier,
    dataset: &LabeledDataset,
    k_global: usize,
) -> Result<f32> {
    let mut total = 0.0f32;
    let mut rows = 0usize;
    for logits in eval_logits(model, dataset, k_global)? {
        let n = logits.shape()[0];
        let mut g = Graph::new();
        let x = g.constant(logits);
        let sm = g.softmax(x, 1)?;
        total += crate::adapt::entropy(g.value(sm))? * n as f32;
        rows += n;
    }
    Ok(total / rows as f32)
}

/// Arithmetic mean over all cells of the corruption-accuracy matrix.
pub fn compute_mpc(ca: &[Vec<f32>]) -> Result<f32> {
    let mut sum = 0.0f32;
    let mut count = 0usize;
    for row in ca {
        for &v in row {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(TecoError::EmptyDataset);
    }
    Ok(sum / count as f32)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub clean_acc: f32,
    /// corruption kind names, row order of `ca`
    pub kinds: Vec<String>,
    /// severities, column order of `ca`
    pub severities: Vec<u32>,
    pub ca: Vec<Vec<f32>>,
    pub mpc: f32,
    pub config: AdaptationConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub per_clip: Vec<f32>,
    pub aggregate: f32,
}

/// Mean temporal L1 of the raw feature tap under deterministic dense
/// sampling: per clip, mean over t of mean-per-element |x^t − x^{t−i}|.
/// Uses the tap directly (not the attention module), so adapted and
/// unadapted models are compared on the same quantity.
pub fn feature_coherence_report(
    model: &mut VideoClassifier,
    dataset: &LabeledDataset,
    time_gap: usize,
    k_local: usize,
    stride_local: usize,
) -> Result<CoherenceReport> {
    if dataset.clips.is_empty() {
        return Err(TecoError::EmptyDataset);
    }
    let mut per_clip = Vec::with_capacity(dataset.clips.len());
    for chunk in dataset.clips.chunks(EVAL_CHUNK) {
        let samples: Vec<_> = chunk
            .iter()
            .map(|c| dense_sample(c, k_local.min(c.len()), stride_local, true, 0))
            .collect::<Result<_>>()?;
        let batch = batch_from_samples(&samples);
        let mut g = Graph::new();
        let z = model.forward_tap(&mut g, &batch, StatMode::Eval)?;
        let t_len = g.value(z).shape()[2];
        if time_gap == 0 || time_gap >= t_len {
            return Err(TecoError::BadTimeGap {
                gap: time_gap,
                t: t_len,
            });
        }
        let mut acc: Option<NodeId> = None;
        for t in time_gap..t_len {
            let a = g.slice_time(z, t)?;
            let b = g.slice_time(z, t - time_gap)?;
            let d = g.sub(a, b)?;
            let ad = g.abs(d);
            let m = g.reduce(ReduceKind::Mean, ad, &[1, 2, 3])?; // per clip
            acc = Some(match acc {
                Some(p) => g.add(p, m)?,
                None => m,
            });
        }
        let total = acc.expect("at least one time pair");
        let scaled = g.scale(total, 1.0 / (t_len - time_gap) as f32);
        per_clip.extend_from_slice(g.value(scaled).data());
    }
    let aggregate = per_clip.iter().sum::<f32>() / per_clip.len() as f32;
    Ok(CoherenceReport {
        per_clip,
        aggregate,
    })
}

const CKPT_MAGIC: [u8; 4] = *b"TECO";
const CKPT_VERSION: u32 = 1;

fn stats_prefix(n: &NormLayer) -> String {
    let g = n.gamma.name();
    g.strip_suffix(".gamma").unwrap_or(&g).to_string()
}

fn norm_layers(model: &VideoClassifier) -> Vec<&NormLayer> {
    let mut v = vec![&model.stem_norm];
    v.extend(model.blocks.iter().map(|b| &b.norm));
    v
}

fn named_tensors(model: &VideoClassifier) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    out.push((
        "__meta".to_string(),
        vec![4],
        vec![
            model.num_classes as f32,
            model.split_index as f32,
            model.coherence_stage as f32,
            model.attention.is_some() as u8 as f32,
        ],
    ));
    for p in model.params() {
        out.push((p.name(), p.value().shape().to_vec(), p.value().data().to_vec()));
    }
    for n in norm_layers(model) {
        let prefix = stats_prefix(n);
        let s = &n.stats;
        for (suffix, data) in [
            ("mu_s", &s.mu_s),
            ("var_s", &s.var_s),
            ("mu_t", &s.mu_t),
            ("var_t", &s.var_t),
            ("eval_mu", &s.eval_mu),
            ("eval_var", &s.eval_var),
        ] {
            out.push((format!("{prefix}.{suffix}"), vec![data.len()], data.clone()));
        }
        out.push((format!("{prefix}.alpha"), vec![1], vec![s.alpha]));
    }
    out
}

pub fn save_checkpoint(model: &VideoClassifier, path: &Path) -> Result<()> {
    let tensors = named_tensors(model);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| TecoError::Truncated(what.to_string()))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<VideoClassifier> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(TecoError::BadMagic {
            expected: CKPT_MAGIC,
            got: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != CKPT_VERSION {
        return Err(TecoError::VersionMismatch {
            expected: CKPT_VERSION,
            got: version,
        });
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..count {
        let mut lb = [0u8; 2];
        read_exact(&mut r, &mut lb, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| TecoError::Truncated("non-utf8 tensor name".to_string()))?;
        let mut nd = [0u8; 1];
        read_exact(&mut r, &mut nd, "ndim")?;
        let mut shape = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            shape.push(read_u32(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exact(&mut r, &mut bytes, &format!("data of {name}"))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, (shape, data));
    }

    let meta = tensors
        .get("__meta")
        .ok_or_else(|| TecoError::Truncated("missing __meta".to_string()))?
        .1
        .clone();
    let mut model = VideoClassifier::new(meta[0] as usize, meta[1] as usize, meta[2] as usize, 0);
    if meta[3] != 0.0 {
        model.attach_attention(0);
    }
    for p in model.params() {
        let (shape, data) = tensors
            .get(&p.name())
            .ok_or_else(|| TecoError::Truncated(format!("missing tensor {}", p.name())))?;
        *p.value_mut() = Tensor::new(shape.clone(), data.clone())?;
    }
    for n in model.norm_layers_mut() {
        let prefix = stats_prefix(n);
        let pick = |suffix: &str| -> Result<Vec<f32>> {
            tensors
                .get(&format!("{prefix}.{suffix}"))
                .map(|(_, d)| d.clone())
                .ok_or_else(|| TecoError::Truncated(format!("missing {prefix}.{suffix}")))
        };
        n.stats.mu_s = pick("mu_s")?;
        n.stats.var_s = pick("var_s")?;
        n.stats.mu_t = pick("mu_t")?;
        n.stats.var_t = pick("var_t")?;
        n.stats.eval_mu = pick("eval_mu")?;
        n.stats.eval_var = pick("eval_var")?;
        n.stats.alpha = pick("alpha")?[0];
    }
    Ok(model)
}

pub const CSV_HEADER: &str = "method,kind,severity,accuracy,seed";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub kind: String,
    pub severity: String,
    pub accuracy: f32,
    pub seed: u64,
}

/// Fixed-schema CSV: one row per (method, kind, severity) plus one aggregate
/// row per method (`kind = all, severity = all`) holding its mPC.
pub fn write_results_csv(rows: &[ResultRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{}",
            r.method, r.kind, r.severity, r.accuracy, r.seed
        )?;
    }
    Ok(())
}

pub fn read_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(TecoError::Truncated(format!("bad CSV header: {line}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(TecoError::Truncated(format!("bad CSV row: {line}")));
        }
        rows.push(ResultRow {
            method: f[0].to_string(),
            kind: f[1].to_string(),
            severity: f[2].to_string(),
            accuracy: f[3]
                .parse()
                .map_err(|_| TecoError::Truncated(format!("bad accuracy: {}", f[3])))?,
            seed: f[4]
                .parse()
                .map_err(|_| TecoError::Truncated(format!("bad seed: {}", f[4])))?,
        });
    }
    Ok(rows)
}
