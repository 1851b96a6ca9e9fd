//! Tabular "Filter-lite" generator: the Filter causal graph and factor
//! distributions, mixed into a dense observation vector instead of rendered
//! images.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::numerics::Tensor;

pub const FILTER_FACTORS: [&str; 6] = [
    "size",
    "position",
    "filter_color",
    "background_color",
    "shadow_size",
    "shadow_color",
];

pub const LIGHT_HEIGHT: f64 = 3.0;
pub const DEFAULT_OBS_DIM: usize = 20;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
const MIXER_HIDDEN: usize = 32;

const FACTOR_STREAM: u64 = 0x5eed_f00d;
const NOISE_STREAM: u64 = 0x0b5e_7e11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Gaussian { mean: f64, sigma: f64 },
    /// Components are `(weight, mean, sigma)`.
    Mixture { components: Vec<(f64, f64, f64)> },
    Uniform { low: f64, high: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            Distribution::Gaussian { sigma, .. } if *sigma <= 0.0 => {
                Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")))
            }
            Distribution::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::Config("mixture has no components".into()));
                }
                if components.iter().any(|&(w, _, s)| w <= 0.0 || s <= 0.0) {
                    return Err(Error::Config("mixture weights and sigmas must be positive".into()));
                }
                let total: f64 = components.iter().map(|c| c.0).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
                }
                Ok(())
            }
            Distribution::Uniform { low, high } if !(low < high) => {
                Err(Error::Config(format!("uniform bounds [{low}, {high}] are empty")))
            }
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            Distribution::Gaussian { mean, sigma } => {
                Normal::new(*mean, *sigma).expect("validated sigma").sample(rng)
            }
            Distribution::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = components[components.len() - 1];
                for &c in components {
                    acc += c.0;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                let e: f64 = StandardNormal.sample(rng);
                chosen.1 + chosen.2 * e
            }
            Distribution::Uniform { low, high } => rng.random_range(*low..*high),
        }
    }

    /// Means of the modes, used by cluster checks.
    pub fn modes(&self) -> Vec<f64> {
        match self {
            Distribution::Gaussian { mean, .. } => vec![*mean],
            Distribution::Mixture { components } => components.iter().map(|c| c.1).collect(),
            Distribution::Uniform { low, high } => vec![0.5 * (low + high)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub distribution: Distribution,
}

impl FactorSpec {
    pub fn new(name: &str, distribution: Distribution) -> Self {
        FactorSpec {
            name: name.to_string(),
            distribution,
        }
    }
}

/// Dataset family to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Standard,
    /// Position modes pushed far apart with a 30/70 weight split.
    StrongBimodal,
}

/// Root factor distributions for `variant`, in [`FILTER_FACTORS`] order.
pub fn filter_root_specs(variant: Variant) -> Vec<FactorSpec> {
    let position = match variant {
        Variant::Standard => Distribution::Mixture {
            components: vec![(0.5, 1.1, 0.05), (0.5, 1.8, 0.05)],
        },
        Variant::StrongBimodal => Distribution::Mixture {
            components: vec![(0.3, 0.6, 0.05), (0.7, 2.2, 0.05)],
        },
    };
    let third = 1.0 / 3.0;
    vec![
        FactorSpec::new("size", Distribution::Uniform { low: 0.5, high: 1.5 }),
        FactorSpec::new("position", position),
        FactorSpec::new(
            "filter_color",
            Distribution::Mixture {
                components: vec![(third, 0.2, 0.05), (third, 0.5, 0.05), (1.0 - 2.0 * third, 0.8, 0.05)],
            },
        ),
        FactorSpec::new("background_color", Distribution::Gaussian { mean: 0.6, sigma: 0.1 }),
    ]
}

/// Closed-form mechanism of a child factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    /// `size * L / (L - position)`: point-light projection of the filter.
    Projection { size: usize, position: usize, light_height: f64 },
    /// `a * b`: subtractive mixing of two [0, 1] colors.
    Product { a: usize, b: usize },
}

impl Mechanism {
    pub fn parents(&self) -> Vec<usize> {
        match self {
            Mechanism::Projection { size, position, .. } => vec![*size, *position],
            Mechanism::Product { a, b } => vec![*a, *b],
        }
    }

    pub fn eval(&self, u: &[f64]) -> Result<f64> {
        match *self {
            Mechanism::Projection {
                size,
                position,
                light_height,
            } => {
                if u[position] >= light_height {
                    return Err(Error::Domain {
                        op: "projection",
                        detail: format!(
                            "position {} is at or above the light height {light_height}",
                            u[position]
                        ),
                    });
                }
                Ok(u[size] * light_height / (light_height - u[position]))
            }
            Mechanism::Product { a, b } => Ok(u[a] * u[b]),
        }
    }
}

/// Fixed 2-layer tanh network standing in for the renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixer {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mixer {
    pub fn random(inputs: usize, hidden: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    scale * e
                })
                .collect::<Vec<f64>>()
        };
        let w1 = gauss(inputs * hidden, 1.0 / (inputs as f64).sqrt());
        let b1 = gauss(hidden, 0.5);
        let w2 = gauss(hidden * outputs, 1.0 / (hidden as f64).sqrt());
        let b2 = gauss(outputs, 0.1);
        Mixer {
            inputs,
            hidden,
            outputs,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Mixer {
            inputs,
            hidden,
            outputs,
            w1: vec![0.0; inputs * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * outputs],
            b2: vec![0.0; outputs],
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let s: f64 = (0..self.inputs).map(|i| u[i] * self.w1[i * self.hidden + j]).sum();
                (s + self.b1[j]).tanh()
            })
            .collect();
        (0..self.outputs)
            .map(|o| {
                let s: f64 = (0..self.hidden).map(|j| h[j] * self.w2[j * self.outputs + o]).sum();
                s + self.b2[o]
            })
            .collect()
    }
}

/// Ground-truth generator: root distributions, child mechanisms, renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScm {
    pub factor_names: Vec<String>,
    pub roots: Vec<FactorSpec>,
    /// `(child index, mechanism)` in evaluation order.
    pub mechanisms: Vec<(usize, Mechanism)>,
    pub mixer: Mixer,
    pub noise_sigma: f64,
}

impl GroundTruthScm {
    pub fn filter(variant: Variant, obs_dim: usize, noise_sigma: f64, mixer_seed: u64) -> Self {
        GroundTruthScm {
            factor_names: FILTER_FACTORS.iter().map(|s| s.to_string()).collect(),
            roots: filter_root_specs(variant),
            mechanisms: vec![
                (
                    4,
                    Mechanism::Projection {
                        size: 0,
                        position: 1,
                        light_height: LIGHT_HEIGHT,
                    },
                ),
                (5, Mechanism::Product { a: 2, b: 3 }),
            ],
            mixer: Mixer::random(FILTER_FACTORS.len(), MIXER_HIDDEN, obs_dim, mixer_seed),
            noise_sigma,
        }
    }

    pub fn num_factors(&self) -> usize {
        self.factor_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.roots {
            r.distribution.validate()?;
        }
        if self.roots.len() + self.mechanisms.len() != self.num_factors() {
            return Err(Error::Config("every factor needs a distribution or a mechanism".into()));
        }
        let mut known = vec![false; self.num_factors()];
        known[..self.roots.len()].iter_mut().for_each(|k| *k = true);
        for (child, m) in &self.mechanisms {
            if m.parents().iter().any(|&p| !known[p]) {
                return Err(Error::Config(format!(
                    "mechanism for '{}' reads a factor that is not yet computed",
                    self.factor_names[*child]
                )));
            }
            known[*child] = true;
        }
        if self.mixer.inputs != self.num_factors() {
            return Err(Error::Config("mixer input width does not match factor count".into()));
        }
        Ok(())
    }

    /// `(parent, child)` name pairs.
    pub fn edges(&self) -> Vec<(String, String)> {
        self.mechanisms
            .iter()
            .flat_map(|(c, m)| {
                m.parents()
                    .into_iter()
                    .map(|p| (self.factor_names[p].clone(), self.factor_names[*c].clone()))
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

fn record_rng(seed: u64, domain: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index as u64);
    rng
}

/// Root factors for `n` records; row `i` depends only on `(seed, i)`.
pub fn sample_factors(spec: &[FactorSpec], n: usize, seed: u64, exec: Exec) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Invalid("record count must be positive".into()));
    }
    for s in spec {
        s.distribution.validate()?;
    }
    Ok(exec.map_indexed(n, |i| {
        let mut rng = record_rng(seed, FACTOR_STREAM, i);
        spec.iter().map(|s| s.distribution.sample(&mut rng)).collect()
    }))
}

/// Extend root-factor rows with every child factor.
pub fn apply_mechanisms(roots: &[Vec<f64>], scm: &GroundTruthScm) -> Result<Vec<Vec<f64>>> {
    roots
        .iter()
        .map(|r| {
            if r.len() != scm.roots.len() {
                return Err(Error::shape(
                    "apply_mechanisms",
                    format!("{} root values for {} roots", r.len(), scm.roots.len()),
                ));
            }
            let mut u = r.clone();
            u.resize(scm.num_factors(), 0.0);
            for (child, m) in &scm.mechanisms {
                u[*child] = m.eval(&u)?;
            }
            Ok(u)
        })
        .collect()
}

/// `x = mixer(u) + noise`, noise for row `i` drawn from `(seed, i)`.
pub fn mix_to_observation(factors: &[Vec<f64>], scm: &GroundTruthScm, seed: u64, exec: Exec) -> Vec<Vec<f64>> {
    exec.map_indexed(factors.len(), |i| {
        let mut rng = record_rng(seed, NOISE_STREAM, i);
        scm.mixer
            .apply(&factors[i])
            .into_iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + scm.noise_sigma * e
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

/// Everything needed to regenerate or interpret a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub factor_names: Vec<String>,
    pub factors: Vec<FactorSpec>,
    pub mechanisms: Vec<(usize, Mechanism)>,
    pub edges: Vec<(String, String)>,
    pub seed: u64,
    pub mixer_seed: u64,
    pub records: usize,
    pub obs_dim: usize,
    pub noise_sigma: f64,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `[N, obs_dim]` observation matrix.
    pub fn observations(&self) -> Tensor {
        let data = self.records.iter().flat_map(|r| r.x.iter().copied()).collect();
        Tensor::matrix(self.records.len(), self.manifest.obs_dim, data).expect("records validated on load")
    }

    /// Column of each named factor in the label vectors.
    pub fn label_columns(&self, names: &[String]) -> Result<Vec<usize>> {
        let have = &self.manifest.factor_names;
        if names.len() != have.len() {
            return Err(Error::Mismatch(format!(
                "graph has {} concepts {:?}, dataset has {} factors {:?}",
                names.len(),
                names,
                have.len(),
                have
            )));
        }
        names
            .iter()
            .map(|n| {
                have.iter().position(|h| h == n).ok_or_else(|| {
                    Error::Mismatch(format!("graph concept '{n}' is not a dataset factor (factors: {have:?})"))
                })
            })
            .collect()
    }

    /// `[N, K]` labels reordered to match `names`.
    pub fn labels(&self, names: &[String]) -> Result<Tensor> {
        let cols = self.label_columns(names)?;
        let data = self
            .records
            .iter()
            .flat_map(|r| cols.iter().map(move |&c| r.u[c]))
            .collect();
        Tensor::matrix(self.records.len(), names.len(), data)
    }
}

/// Generation settings as they appear in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub records: usize,
    pub seed: u64,
    pub mixer_seed: u64,
    pub obs_dim: usize,
    pub noise_sigma: f64,
    pub variant: Variant,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            records: 12_000,
            seed: 0,
            mixer_seed: 1,
            obs_dim: DEFAULT_OBS_DIM,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            variant: Variant::Standard,
        }
    }
}

impl DataConfig {
    /// 2000-record preset for desk runs.
    pub fn desk() -> Self {
        DataConfig {
            records: 2000,
            ..DataConfig::default()
        }
    }
}

/// Pure function of the config: same config, same dataset.
pub fn generate(cfg: &DataConfig, exec: Exec) -> Result<Dataset> {
    let scm = GroundTruthScm::filter(cfg.variant, cfg.obs_dim, cfg.noise_sigma, cfg.mixer_seed);
    scm.validate()?;
    let roots = sample_factors(&scm.roots, cfg.records, cfg.seed, exec)?;
    let u = apply_mechanisms(&roots, &scm)?;
    let x = mix_to_observation(&u, &scm, cfg.seed, exec);
    let records = x.into_iter().zip(u).map(|(x, u)| DatasetRecord { x, u }).collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            factor_names: scm.factor_names.clone(),
            factors: scm.roots.clone(),
            mechanisms: scm.mechanisms.clone(),
            edges: scm.edges(),
            seed: cfg.seed,
            mixer_seed: cfg.mixer_seed,
            records: cfg.records,
            obs_dim: cfg.obs_dim,
            noise_sigma: cfg.noise_sigma,
            variant: cfg.variant,
        },
        records,
    })
}

/// Sidecar manifest path: `data.jsonl` -> `data.manifest.json`.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Write records and the sidecar manifest next to them.
pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(&dataset.records, path)?;
    write_manifest(&dataset.manifest, &manifest_path(path))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&manifest_path(path))?;
    let records = read_dataset(path)?;
    if let Some((i, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.u.len() != manifest.factor_names.len() || r.x.len() != manifest.obs_dim)
    {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!(
                "record has {} labels and {} observations, manifest expects {} and {}",
                r.u.len(),
                r.x.len(),
                manifest.factor_names.len(),
                manifest.obs_dim
            ),
        });
    }
    Ok(Dataset { manifest, records })
}

#[cfg(test)]
mod tests;
