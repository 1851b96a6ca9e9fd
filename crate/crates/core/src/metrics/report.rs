use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{mic_tic, r2_linear, wd1};
use crate::error::{Error, Result};
use crate::model::FlexCausal;
use crate::numerics::Tensor;
use crate::parallel::Exec;
use crate::synthdata::Dataset;

pub const REPORT_HEADER: &str = "concept,label,mic,tic,wd,r2";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub concept: String,
    pub label: String,
    pub mic: f64,
    pub tic: f64,
    /// W1 between readout `h_concept` and the label's marginal.
    pub wd: f64,
    /// Linear R² from block `z_concept` to the label.
    pub r2: f64,
    pub ridge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Every (concept, label) pair, concept-major in graph order.
    pub pairs: Vec<PairMetrics>,
    pub concepts: Vec<String>,
    /// Means over matched pairs (concept == label).
    pub mean_mic: f64,
    pub mean_tic: f64,
    pub mean_wd: f64,
    pub mean_r2: f64,
}

impl MetricReport {
    pub fn matched(&self, concept: &str) -> Option<&PairMetrics> {
        self.pairs.iter().find(|p| p.concept == concept && p.label == concept)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{},{},{},{}", p.concept, p.label, p.mic, p.tic, p.wd, p.r2);
        }
        let _ = writeln!(
            s,
            "mean,matched,{},{},{},{}",
            self.mean_mic, self.mean_tic, self.mean_wd, self.mean_r2
        );
        let _ = writeln!(
            s,
            "mean_x100,matched,{},{},{},{}",
            100.0 * self.mean_mic,
            100.0 * self.mean_tic,
            100.0 * self.mean_wd,
            100.0 * self.mean_r2
        );
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Metrics from precomputed readouts `[N, K]`, latents `[N, D]` split by
/// `dims`, and labels `[N, K]` in concept order.
pub fn evaluate_readouts(
    names: &[String],
    dims: &[usize],
    readouts: &Tensor,
    z: &Tensor,
    labels: &Tensor,
    exec: Exec,
) -> Result<MetricReport> {
    let k = names.len();
    if readouts.cols() != k || labels.cols() != k || dims.len() != k {
        return Err(Error::shape(
            "evaluate",
            format!("{k} concepts, readouts {:?}, labels {:?}", readouts.shape(), labels.shape()),
        ));
    }
    if z.cols() != dims.iter().sum::<usize>() || z.rows() != labels.rows() || readouts.rows() != labels.rows() {
        return Err(Error::shape("evaluate", format!("latents {:?} for dims {dims:?}", z.shape())));
    }
    let offsets: Vec<usize> = dims.iter().scan(0, |o, &d| {
        let cur = *o;
        *o += d;
        Some(cur)
    }).collect();
    let cols_r: Vec<Vec<f64>> = (0..k).map(|c| readouts.column_values(c)).collect();
    let cols_u: Vec<Vec<f64>> = (0..k).map(|c| labels.column_values(c)).collect();
    let blocks: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|c| {
            (0..z.rows())
                .map(|r| z.row_slice(r)[offsets[c]..offsets[c] + dims[c]].to_vec())
                .collect()
        })
        .collect();
    let results = exec.map_indexed(k * k, |i| -> Result<PairMetrics> {
        let (c, l) = (i / k, i % k);
        let (mic, tic) = mic_tic(&cols_r[c], &cols_u[l])?;
        let wd = wd1(&cols_r[c], &cols_u[l])?;
        let r2 = r2_linear(&blocks[c], &cols_u[l])?;
        Ok(PairMetrics {
            concept: names[c].clone(),
            label: names[l].clone(),
            mic,
            tic,
            wd,
            r2: r2.value,
            ridge: r2.ridge,
        })
    });
    let pairs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let matched: Vec<&PairMetrics> = (0..k).map(|c| &pairs[c * k + c]).collect();
    let mean = |f: fn(&PairMetrics) -> f64| matched.iter().map(|p| f(p)).sum::<f64>() / k as f64;
    Ok(MetricReport {
        mean_mic: mean(|p| p.mic),
        mean_tic: mean(|p| p.tic),
        mean_wd: mean(|p| p.wd),
        mean_r2: mean(|p| p.r2),
        concepts: names.to_vec(),
        pairs,
    })
}

/// Posterior means, readouts and labels of a whole dataset.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub z: Tensor,
    pub readouts: Tensor,
    pub labels: Tensor,
}

pub fn encode_dataset(model: &FlexCausal, data: &Dataset, exec: Exec) -> Result<Encoding> {
    if data.manifest.obs_dim != model.spec.obs_dim {
        return Err(Error::Mismatch(format!(
            "dataset observations have {} dims, model expects {}",
            data.manifest.obs_dim, model.spec.obs_dim
        )));
    }
    let labels = data.labels(model.graph.names())?;
    let z = model.encode_means(&data.observations(), exec)?;
    let readouts = model.readouts(&z)?;
    Ok(Encoding { z, readouts, labels })
}

pub fn evaluate_model(model: &FlexCausal, data: &Dataset, exec: Exec) -> Result<(MetricReport, Encoding)> {
    let enc = encode_dataset(model, data, exec)?;
    let report = evaluate_readouts(
        model.graph.names(),
        model.graph.dims(),
        &enc.readouts,
        &enc.z,
        &enc.labels,
        exec,
    )?;
    Ok((report, enc))
}

#[derive(Serialize)]
struct LatentRow<'a> {
    u: &'a [f64],
    z: &'a [f64],
    readouts: &'a [f64],
}

/// One JSON object `{u, z, readouts}` per record.
pub fn write_latents(enc: &Encoding, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in 0..enc.z.rows() {
        let row = LatentRow {
            u: enc.labels.row_slice(r),
            z: enc.z.row_slice(r),
            readouts: enc.readouts.row_slice(r),
        };
        serde_json::to_writer(&mut w, &row).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
