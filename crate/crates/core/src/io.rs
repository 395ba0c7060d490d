//! File formats: TOML model and safety configs, a text weights format tied
//! to the config by hash, CSV datasets and JSON run reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editing::{build_model, Activation, LayerSpec, PhyTaylorModel};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeSpec;
use crate::monomial::MonomialBasis;
use crate::selfcorrect::{QuadSign, SafetyQuadratic};
use crate::suppressor::{NoiseSign, SuppressorChannel, SuppressorConfig};
use crate::train::{Dataset, EpochRecord, Split};

pub const WEIGHTS_MAGIC: &str = "phytaylor-weights";
pub const WEIGHTS_VERSION: &str = "v1";

fn toml_error(text: &str, err: &toml::de::Error) -> Error {
    let (line, column) = match err.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
            (line, Some(column))
        }
        None => (0, None),
    };
    Error::parse(line, column, err.message().trim())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuppressorEntry {
    pub channel: usize,
    pub kappa: f64,
    pub rho: f64,
    pub noise: NoiseSign,
    /// Bound on the magnitude of the channel input, for the `rho` check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub out_dim: usize,
    pub order: u32,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressor: Vec<SuppressorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub first_order: u32,
    pub terminal_out_dim: usize,
    /// Rows of `*` or numbers; omitted means everything unknown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<String>,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| toml_error(text, &e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config always serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn knowledge_spec(&self) -> Result<KnowledgeSpec> {
        let basis = MonomialBasis::new(self.input_dim, self.first_order)?;
        match &self.knowledge {
            Some(text) => KnowledgeSpec::parse(text, basis, self.terminal_out_dim),
            None => KnowledgeSpec::all_unknown(basis, self.terminal_out_dim),
        }
    }

    pub fn plan(&self) -> Result<Vec<LayerSpec>> {
        let mut in_dim = self.input_dim;
        let mut plan = Vec::with_capacity(self.layers.len());
        for (t, l) in self.layers.iter().enumerate() {
            let mut spec = LayerSpec::new(l.out_dim, l.order, l.activation);
            if !l.suppressor.is_empty() {
                let mut cfg = SuppressorConfig::inactive(in_dim);
                for s in &l.suppressor {
                    if s.channel >= in_dim {
                        return Err(Error::PlanInconsistent(format!(
                            "layer {t} suppressor channel {} out of range for {in_dim} inputs",
                            s.channel
                        )));
                    }
                    let ch = SuppressorChannel::new(s.kappa, s.rho, s.noise);
                    if let Some(bound) = s.bound {
                        ch.validate(bound)?;
                    }
                    cfg.set(s.channel, ch);
                }
                spec = spec.with_suppressor(cfg);
            }
            plan.push(spec);
            in_dim = l.out_dim;
        }
        Ok(plan)
    }

    /// Builds the model with zero weights.
    pub fn build(&self) -> Result<PhyTaylorModel> {
        build_model(&self.knowledge_spec()?, &self.plan()?)
    }

    pub fn from_model(model: &PhyTaylorModel) -> Self {
        let spec = model.knowledge();
        let layers = model
            .layers()
            .iter()
            .map(|l| LayerConfig {
                out_dim: l.out_dim(),
                order: l.order(),
                activation: l.activation(),
                suppressor: l
                    .suppressor()
                    .channels()
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.active)
                    .map(|(i, c)| SuppressorEntry {
                        channel: i,
                        kappa: c.kappa,
                        rho: c.rho,
                        noise: c.noise,
                        bound: None,
                    })
                    .collect(),
            })
            .collect();
        Self {
            input_dim: model.input_dim(),
            first_order: model.first_order(),
            terminal_out_dim: model.terminal_out_dim(),
            knowledge: (spec.known_count() > 0).then(|| spec.to_text()),
            layers,
        }
    }
}

fn write_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

/// Text serialization of every layer's `K` and `W`, shortest round-trip
/// decimal for each value.
pub fn weights_to_string(model: &PhyTaylorModel, config_hash: &str) -> String {
    let mut out = format!("{WEIGHTS_MAGIC} {WEIGHTS_VERSION}\nconfig-hash {config_hash}\nlayers {}\n", model.layers().len());
    for (t, layer) in model.layers().iter().enumerate() {
        let _ = writeln!(out, "layer {t}");
        write_matrix(&mut out, "K", layer.knowledge());
        write_matrix(&mut out, "W", layer.weights());
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l.trim()))
            .ok_or_else(|| Error::parse(0, None, "unexpected end of weights file"))
    }

    fn expect(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = self.next()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::parse(n, None, format!("expected `{key}`, found `{line}`")));
        }
        Ok((n, parts.collect()))
    }

    fn matrix(&mut self, key: &str, shape: (usize, usize)) -> Result<DMatrix<f64>> {
        let (n, dims) = self.expect(key)?;
        let parsed: Vec<usize> = dims.iter().filter_map(|d| d.parse().ok()).collect();
        if parsed != [shape.0, shape.1] {
            return Err(Error::ShapeMismatch(format!(
                "line {n}: {key} is {dims:?}, model expects {} x {}",
                shape.0, shape.1
            )));
        }
        let mut m = DMatrix::zeros(shape.0, shape.1);
        for i in 0..shape.0 {
            let (n, line) = self.next()?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != shape.1 {
                return Err(Error::parse(n, None, format!("expected {} values, found {}", shape.1, vals.len())));
            }
            for (j, v) in vals.iter().enumerate() {
                let x: f64 = v
                    .parse()
                    .map_err(|_| Error::parse(n, Some(j + 1), format!("`{v}` is not a number")))?;
                if !x.is_finite() {
                    return Err(Error::parse(n, Some(j + 1), "non-finite weight"));
                }
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }
}

/// Builds the model described by `config` and fills in `K` and `W` from a
/// weights file written for the same config.
pub fn weights_from_str(text: &str, config: &ModelConfig) -> Result<PhyTaylorModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, header) = lines.expect(WEIGHTS_MAGIC)?;
    if header != [WEIGHTS_VERSION] {
        return Err(Error::VersionUnknown(header.join(" ")));
    }
    let (n, hash) = lines.expect("config-hash")?;
    let expected = config.hash();
    match hash.as_slice() {
        [h] if *h == expected => {}
        [h] => {
            return Err(Error::HashMismatch {
                expected,
                found: h.to_string(),
            })
        }
        _ => return Err(Error::parse(n, None, "malformed config-hash line")),
    }
    let mut model = config.build()?;
    let (n, count) = lines.expect("layers")?;
    if count != [model.layers().len().to_string()] {
        return Err(Error::parse(n, None, format!("layer count {count:?} does not match the config")));
    }
    for t in 0..model.layers().len() {
        let (n, idx) = lines.expect("layer")?;
        if idx != [t.to_string()] {
            return Err(Error::parse(n, None, format!("expected layer {t}")));
        }
        let shape = model.layer(t).knowledge().shape();
        let k = lines.matrix("K", shape)?;
        let w = lines.matrix("W", shape)?;
        model.layer_mut(t).set_knowledge(k)?;
        model.layer_mut(t).set_weights(w)?;
    }
    Ok(model)
}

pub fn save_weights(path: &Path, model: &PhyTaylorModel, config: &ModelConfig) -> Result<()> {
    fs::write(path, weights_to_string(model, &config.hash())).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<PhyTaylorModel> {
    weights_from_str(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadraticEntry {
    sign: QuadSign,
    b: f64,
    p: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SafetyFile {
    quadratic: Vec<QuadraticEntry>,
}

/// Reads `[[quadratic]]` tables with `sign`, `b` and row-major `p`.
pub fn parse_safety_config(text: &str) -> Result<Vec<SafetyQuadratic>> {
    let file: SafetyFile = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
    file.quadratic
        .iter()
        .map(|q| SafetyQuadratic::from_row_major(q.sign, q.b, q.p))
        .collect()
}

pub fn safety_config_to_string(quadratics: &[SafetyQuadratic]) -> String {
    let file = SafetyFile {
        quadratic: quadratics
            .iter()
            .map(|q| QuadraticEntry {
                sign: q.sign,
                b: q.b,
                p: [q.p[(0, 0)], q.p[(0, 1)], q.p[(1, 0)], q.p[(1, 1)]],
            })
            .collect(),
    };
    toml::to_string(&file).expect("safety config always serializes")
}

/// Reads a CSV with a header row. Optional `split` and `traj` columns are
/// picked out by name; the remaining columns must be `input_dim` inputs
/// followed by `target_dim` targets.
pub fn read_csv<R: Read>(reader: R, input_dim: usize, target_dim: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(1, None, e.to_string()))?
        .clone();
    let split_col = headers.iter().position(|h| h == "split");
    let traj_col = headers.iter().position(|h| h == "traj");
    let value_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| Some(c) != split_col && Some(c) != traj_col)
        .collect();
    if value_cols.len() != input_dim + target_dim {
        return Err(Error::DimensionMismatch {
            expected: input_dim + target_dim,
            actual: value_cols.len(),
        });
    }
    let (mut inputs, mut targets, mut splits, mut trajs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::parse(line, None, e.to_string()))?;
        let mut values = Vec::with_capacity(value_cols.len());
        for &c in &value_cols {
            let field = record.get(c).unwrap_or("");
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(line, Some(c + 1), format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(line, Some(c + 1), format!("non-finite value `{field}`")));
            }
            values.push(v);
        }
        let split = match split_col {
            Some(c) => {
                let s = record.get(c).unwrap_or("");
                Split::parse(s).ok_or_else(|| Error::parse(line, Some(c + 1), format!("unknown split `{s}`")))?
            }
            None => Split::Train,
        };
        let traj = match traj_col {
            Some(c) => {
                let s = record.get(c).unwrap_or("");
                s.parse()
                    .map_err(|_| Error::parse(line, Some(c + 1), format!("`{s}` is not a trajectory id")))?
            }
            None => 0,
        };
        targets.push(values.split_off(input_dim));
        inputs.push(values);
        splits.push(split);
        trajs.push(traj);
    }
    Dataset::with_tags(inputs, targets, splits, trajs)
}

pub fn load_csv(path: &Path, input_dim: usize, target_dim: usize) -> Result<Dataset> {
    read_csv(fs::File::open(path).map_err(|e| Error::file(path, e))?, input_dim, target_dim)
}

pub fn dataset_to_csv(data: &Dataset, input_names: &[String], target_names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["split".to_string(), "traj".to_string()];
    header.extend(input_names.iter().cloned());
    header.extend(target_names.iter().cloned());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut row = vec![data.splits[i].as_str().to_string(), data.trajectories[i].to_string()];
        row.extend(data.inputs[i].iter().chain(&data.targets[i]).map(|v| format!("{v}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceSummary {
    pub probes: usize,
    pub known_positions: usize,
    pub max_deviation: f64,
}

/// Everything needed to audit a run; contains no timestamps so reruns are
/// byte-identical.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub compliance: Option<ComplianceSummary>,
    pub rollout_errors: Vec<f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(e.line(), Some(e.column()), e.to_string()))
    }
}
