//! File formats: matrix CSV, run config, metrics CSV/JSON and run manifests.
//!
//! Matrix files start with a `rows,cols` line followed by `rows` lines of
//! `cols` comma-separated values. Blank lines and lines starting with `#` are
//! ignored. A params file holds three such blocks back to back (`W_Q`, `W_K`,
//! `W_V`).
//!
//! Config files are flat `key = value` TOML; every key maps to one field of
//! [`RunSpec`]. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::conditioning::{Conditioning, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::harness::{Divergence, MetricsRow, OptimizerConfig, RunSpec, TransformerConfig};
use crate::linalg::Matrix;
use crate::report::{fmt_f64, parse_f64};

/// `(line number, fields)` for every non-blank, non-comment line.
fn records(text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        out.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn parse_block(recs: &[(usize, Vec<String>)], at: usize) -> Result<(Matrix, usize)> {
    let (line, header) = recs.get(at).ok_or(Error::Parse {
        line: recs.last().map_or(1, |r| r.0 + 1),
        msg: "expected a `rows,cols` header, found end of input".into(),
    })?;
    let dims: Vec<usize> = header
        .iter()
        .map(|f| f.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse {
            line: *line,
            msg: format!("header must be `rows,cols` integers, got {:?}", header.join(",")),
        })?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Parse {
            line: *line,
            msg: format!("header must have two fields, got {}", dims.len()),
        });
    };
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            line: *line,
            msg: format!("matrix dimensions must be positive, got {rows}x{cols}"),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (l, fields) = recs.get(at + 1 + r).ok_or(Error::Parse {
            line: recs.last().map_or(*line, |x| x.0) + 1,
            msg: format!("expected {rows} rows, found {r}"),
        })?;
        if fields.len() != cols {
            return Err(Error::Parse {
                line: *l,
                msg: format!("expected {cols} values, found {}", fields.len()),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            let v = parse_f64(f).filter(|v| v.is_finite()).ok_or(Error::Parse {
                line: *l,
                msg: format!("column {}: {f:?} is not a finite number", c + 1),
            })?;
            data.push(v);
        }
    }
    Ok((Matrix::new(rows, cols, data)?, at + 1 + rows))
}

pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let recs = records(text)?;
    let (m, next) = parse_block(&recs, 0)?;
    if let Some((line, _)) = recs.get(next) {
        return Err(Error::Parse {
            line: *line,
            msg: "unexpected content after the matrix".into(),
        });
    }
    Ok(m)
}

/// Three blocks: `W_Q`, `W_K`, `W_V`.
pub fn parse_params(text: &str) -> Result<AttentionParams> {
    let recs = records(text)?;
    let (q, next) = parse_block(&recs, 0)?;
    let (k, next) = parse_block(&recs, next)?;
    let (v, next) = parse_block(&recs, next)?;
    if let Some((line, _)) = recs.get(next) {
        return Err(Error::Parse {
            line: *line,
            msg: "unexpected content after the third matrix".into(),
        });
    }
    AttentionParams::new(q, k, v)
}

pub fn write_matrix(m: &Matrix) -> String {
    let mut s = format!("{},{}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn write_params(p: &AttentionParams) -> String {
    [&p.w_q, &p.w_k, &p.w_v].map(write_matrix).join("\n")
}

/// Flat run configuration as read from disk. Omitted keys take the reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub seq_len: usize,
    pub ffn_width: usize,
    pub layer_norm: bool,
    /// `off`, `svd-cap` or `diag-shift`.
    pub conditioning: String,
    pub lambda: f64,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub probe_every: usize,
    pub probe_batch: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from_spec(&RunSpec::reference())
    }
}

impl ConfigFile {
    pub fn from_spec(spec: &RunSpec) -> Self {
        let c = &spec.config;
        let lambda = match c.conditioning {
            Conditioning::DiagonalShift { lambda } => lambda,
            _ => DEFAULT_LAMBDA,
        };
        Self {
            layers: c.layers,
            heads: c.heads,
            d_model: c.d_model,
            d_head: c.d_head,
            seq_len: c.seq_len,
            ffn_width: c.ffn_width,
            layer_norm: c.layer_norm,
            conditioning: c.conditioning.name().into(),
            lambda,
            seed: c.seed,
            lr: spec.optimizer.lr,
            beta1: spec.optimizer.beta1,
            beta2: spec.optimizer.beta2,
            weight_decay: spec.optimizer.weight_decay,
            eps: spec.optimizer.eps,
            steps: spec.steps,
            batch_size: spec.batch_size,
            probe_every: spec.probe_every,
            probe_batch: spec.probe_batch,
            n_train: spec.n_train,
            n_eval: spec.n_eval,
        }
    }

    pub fn to_spec(&self) -> Result<RunSpec> {
        let spec = RunSpec {
            config: TransformerConfig {
                layers: self.layers,
                heads: self.heads,
                d_model: self.d_model,
                d_head: self.d_head,
                seq_len: self.seq_len,
                ffn_width: self.ffn_width,
                layer_norm: self.layer_norm,
                feedforward: true,
                conditioning: Conditioning::from_name(&self.conditioning, self.lambda)?,
                seed: self.seed,
            },
            optimizer: OptimizerConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                weight_decay: self.weight_decay,
                eps: self.eps,
            },
            steps: self.steps,
            batch_size: self.batch_size,
            probe_every: self.probe_every,
            probe_batch: self.probe_batch,
            n_train: self.n_train,
            n_eval: self.n_eval,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn parse_config(text: &str) -> Result<RunSpec> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    file.to_spec()
}

/// Column names of `metrics.csv`, in order.
pub fn metrics_header() -> Vec<String> {
    let mut h: Vec<String> = ["step", "loss", "eval_loss", "eval_acc"].map(String::from).to_vec();
    for r in ["q", "k", "v"] {
        for prefix in ["w", "wc"] {
            for q in ["sigma_min", "sigma_max", "kappa"] {
                h.push(format!("{prefix}_{q}_{r}"));
            }
        }
        h.push(format!("c_norm_{r}"));
    }
    h.extend(["kappa_j_effective", "kappa_j", "bound_value"].map(String::from));
    h
}

fn metrics_fields(row: &MetricsRow) -> Vec<String> {
    let mut f = vec![
        row.step.to_string(),
        fmt_f64(row.loss),
        fmt_f64(row.eval_loss),
        fmt_f64(row.eval_acc),
    ];
    let width = metrics_header().len();
    match &row.spectral {
        Some(p) => {
            for r in 0..3 {
                for m in [&p.weights[r], &p.corrected[r]] {
                    f.extend([m.sigma_min, m.sigma_max, m.kappa].map(fmt_f64));
                }
                f.push(fmt_f64(p.correction_norms[r]));
            }
            f.extend([p.kappa_j_effective, p.kappa_j, p.bound_value].map(fmt_f64));
        }
        None => f.resize(width, fmt_f64(f64::NAN)),
    }
    f
}

fn csv_text(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let map = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(header).map_err(map)?;
    for r in rows {
        w.write_record(&r).map_err(map)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    csv_text(&metrics_header(), rows.iter().map(metrics_fields))
}

/// Reads `metrics.csv` back as `(header, numeric rows)`.
pub fn read_metrics_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let recs = records(text)?;
    let (_, header) = recs.first().ok_or(Error::Parse {
        line: 1,
        msg: "empty metrics file".into(),
    })?;
    let rows = recs[1..]
        .iter()
        .map(|(line, fields)| {
            fields
                .iter()
                .map(|f| {
                    parse_f64(f).ok_or(Error::Parse {
                        line: *line,
                        msg: format!("{f:?} is not a number"),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((header.clone(), rows))
}

pub fn metrics_json(rows: &[MetricsRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)? + "\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub kind: String,
    pub path: String,
}

/// Provenance for one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<OutputFile>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<Divergence>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            seeds,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
            warnings: Vec::new(),
            notes: Vec::new(),
            divergence: None,
        }
    }

    pub fn output(&mut self, kind: impl Into<String>, path: impl Into<String>) {
        self.outputs.push(OutputFile {
            kind: kind.into(),
            path: path.into(),
        });
    }

    pub fn finish(&mut self) {
        self.finished_unix = unix_now();
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}
