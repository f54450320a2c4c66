//! On-disk formats: the comma-separated trajectory file and the JSON
//! checkpoint. All writers go through a temp file in the destination
//! directory and are renamed into place only once complete.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cn::{CnConfig, CnParams, Normalization, TrainConfig, TrainReport};
use crate::dem::{DemError, FloeSystem, SimState, Trajectory, DEFAULT_DENSITY, DEFAULT_YOUNGS_MODULUS};
use crate::nn::{Activation, Layer, Mlp, NnError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: invalid system: {source}")]
    System {
        path: PathBuf,
        #[source]
        source: DemError,
    },
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `contents` to `path` via a sibling temp file and an atomic rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".partial-")
        .tempfile_in(dir)
        .map_err(io_err(path))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Where an artifact came from: enough to run it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Fully resolved configuration of the producing command.
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: "floe".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
        }
    }
}

/// A trajectory plus whatever provenance travelled with it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub trajectory: Trajectory,
    pub provenance: Option<Provenance>,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Renders the text form. Values carry 17 significant digits, so a
/// write/read cycle is exact.
pub fn format_trajectory(traj: &Trajectory, provenance: Option<&Provenance>) -> String {
    let sys = &traj.system;
    let n = sys.n_floes();
    let mut out = String::with_capacity(traj.len() * n * 48 + 256);
    let _ = writeln!(
        out,
        "# n_floes={n} dt={} domain={},{} radii={} thickness={}",
        traj.dt,
        sys.domain_left(),
        sys.domain_right(),
        join(sys.radius()),
        join(sys.thickness())
    );
    let _ = writeln!(
        out,
        "# youngs_modulus={} density={}",
        sys.youngs_modulus(),
        sys.density()
    );
    if let Some(p) = provenance {
        let _ = writeln!(out, "# provenance={}", serde_json::to_string(p).expect("provenance serializes"));
    }
    out.push('t');
    for i in 0..n {
        let _ = write!(out, ",x_{i}");
    }
    for i in 0..n {
        let _ = write!(out, ",v_{i}");
    }
    out.push('\n');
    for s in &traj.states {
        let _ = write!(out, "{}", s.time_index);
        for v in s.x.iter().chain(&s.v) {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, provenance: Option<&Provenance>) -> Result<(), IoError> {
    write_atomic(path, format_trajectory(traj, provenance).as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryFile, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_trajectory(&text, path)
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("bad number `{v}`: {e}")))
        .collect()
}

/// Parses the text form; `path` is used only for diagnostics.
pub fn parse_trajectory(text: &str, path: &Path) -> Result<TrajectoryFile, IoError> {
    let perr = |line: usize, message: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().peekable();
    let (_, first) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let meta = first
        .strip_prefix('#')
        .ok_or_else(|| perr(1, "first line must start with `# n_floes=`".into()))?;
    let mut n_floes = None;
    let mut dt = None;
    let mut domain = None;
    let mut radii = None;
    let mut thickness = None;
    let mut youngs = DEFAULT_YOUNGS_MODULUS;
    let mut density = DEFAULT_DENSITY;
    let mut provenance = None;
    for token in meta.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| perr(1, format!("expected key=value, got `{token}`")))?;
        match k {
            "n_floes" => n_floes = Some(v.parse::<usize>().map_err(|e| perr(1, format!("n_floes: {e}")))?),
            "dt" => dt = Some(v.parse::<f64>().map_err(|e| perr(1, format!("dt: {e}")))?),
            "domain" => {
                let d = parse_list(v).map_err(|m| perr(1, m))?;
                if d.len() != 2 {
                    return Err(perr(1, "domain needs two values".into()));
                }
                domain = Some((d[0], d[1]));
            }
            "radii" => radii = Some(parse_list(v).map_err(|m| perr(1, m))?),
            "thickness" => thickness = Some(parse_list(v).map_err(|m| perr(1, m))?),
            _ => {}
        }
    }
    let missing = |what: &str| perr(1, format!("missing `{what}`"));
    let n = n_floes.ok_or_else(|| missing("n_floes"))?;
    let dt = dt.ok_or_else(|| missing("dt"))?;
    let (left, right) = domain.ok_or_else(|| missing("domain"))?;
    let radii = radii.ok_or_else(|| missing("radii"))?;
    let thickness = thickness.ok_or_else(|| missing("thickness"))?;
    if radii.len() != n || thickness.len() != n {
        return Err(perr(1, format!("expected {n} radii and thicknesses")));
    }

    // Optional comment lines, then the column header.
    let mut header = None;
    for (i, line) in lines.by_ref() {
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(json) = rest.strip_prefix("provenance=") {
                provenance = Some(serde_json::from_str(json).map_err(|e| perr(i + 1, format!("provenance: {e}")))?);
            } else {
                for token in rest.split_whitespace() {
                    match token.split_once('=') {
                        Some(("youngs_modulus", v)) => {
                            youngs = v.parse().map_err(|e| perr(i + 1, format!("youngs_modulus: {e}")))?
                        }
                        Some(("density", v)) => density = v.parse().map_err(|e| perr(i + 1, format!("density: {e}")))?,
                        _ => {}
                    }
                }
            }
            continue;
        }
        header = Some((i, line));
        break;
    }
    let (hline, header) = header.ok_or_else(|| perr(2, "missing column header".into()))?;
    let mut expected = vec!["t".to_string()];
    expected.extend((0..n).map(|i| format!("x_{i}")));
    expected.extend((0..n).map(|i| format!("v_{i}")));
    if header.split(',').map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(perr(hline + 1, format!("header must be `{}`", expected.join(","))));
    }

    let system = FloeSystem::new(radii, thickness, density, youngs, left, right).map_err(|source| IoError::System {
        path: path.to_path_buf(),
        source,
    })?;
    let mut states = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let t = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse::<u64>()
            .map_err(|e| perr(i + 1, format!("time index: {e}")))?;
        let values: Vec<f64> = fields
            .map(|v| v.trim().parse::<f64>().map_err(|e| perr(i + 1, format!("bad number `{v}`: {e}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 2 * n {
            return Err(perr(i + 1, format!("expected {} values, got {}", 2 * n, values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(perr(i + 1, "non-finite value".into()));
        }
        states.push(SimState::new(t, values[..n].to_vec(), values[n..].to_vec()));
    }
    Ok(TrajectoryFile {
        trajectory: Trajectory { system, dt, states },
        provenance,
    })
}

pub const CHECKPOINT_FORMAT: &str = "floe-cn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    /// Row-major `rows x cols`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MlpRecord {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerRecord>,
}

impl From<&Mlp> for MlpRecord {
    fn from(m: &Mlp) -> Self {
        Self {
            widths: m.widths(),
            activation: m.activation(),
            layers: m
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.transpose().as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

impl MlpRecord {
    fn to_mlp(&self) -> Result<Mlp, String> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(format!("layer {k} has inconsistent sizes"));
            }
            layers.push(Layer {
                weight: DMatrix::from_row_slice(l.rows, l.cols, &l.weight),
                bias: DVector::from_column_slice(&l.bias),
            });
        }
        let mlp = Mlp::from_layers(layers, self.activation).map_err(|e: NnError| e.to_string())?;
        if mlp.widths() != self.widths {
            return Err(format!("declared widths {:?} do not match layers {:?}", self.widths, mlp.widths()));
        }
        if !mlp.is_finite() {
            return Err("non-finite weights".into());
        }
        Ok(mlp)
    }
}

/// The floe system and step a checkpoint was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub n_floes: usize,
    pub domain: (f64, f64),
    pub dt: f64,
    pub radii: Vec<f64>,
    pub thickness: Vec<f64>,
    pub density: f64,
    pub youngs_modulus: f64,
}

impl GraphMeta {
    pub fn from_system(system: &FloeSystem, dt: f64) -> Self {
        Self {
            n_floes: system.n_floes(),
            domain: (system.domain_left(), system.domain_right()),
            dt,
            radii: system.radius().to_vec(),
            thickness: system.thickness().to_vec(),
            density: system.density(),
            youngs_modulus: system.youngs_modulus(),
        }
    }

    pub fn system(&self) -> Result<FloeSystem, DemError> {
        FloeSystem::new(
            self.radii.clone(),
            self.thickness.clone(),
            self.density,
            self.youngs_modulus,
            self.domain.0,
            self.domain.1,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: CnParams,
    pub graph: GraphMeta,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub report: Option<TrainReport>,
    pub provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    config: CnConfig,
    phi: MlpRecord,
    gamma: MlpRecord,
    normalization: Normalization,
    seed: u64,
    graph: GraphMeta,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    report: Option<TrainReport>,
    #[serde(default)]
    provenance: Option<Provenance>,
}

pub fn checkpoint_to_string(ck: &Checkpoint) -> String {
    let record = CheckpointRecord {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: ck.params.config.clone(),
        phi: MlpRecord::from(&ck.params.phi),
        gamma: MlpRecord::from(&ck.params.gamma),
        normalization: ck.params.norm.clone(),
        seed: ck.seed,
        graph: ck.graph.clone(),
        train_config: ck.train_config.clone(),
        report: ck.report.clone(),
        provenance: ck.provenance.clone(),
    };
    let mut s = serde_json::to_string_pretty(&record).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn checkpoint_from_str(text: &str, path: &Path) -> Result<Checkpoint, IoError> {
    let cerr = |message: String| IoError::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let rec: CheckpointRecord = serde_json::from_str(text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if rec.format != CHECKPOINT_FORMAT {
        return Err(cerr(format!("not a checkpoint (format `{}`)", rec.format)));
    }
    if rec.version != CHECKPOINT_VERSION {
        return Err(cerr(format!("unsupported checkpoint version {}", rec.version)));
    }
    let phi = rec.phi.to_mlp().map_err(|m| cerr(format!("phi: {m}")))?;
    let gamma = rec.gamma.to_mlp().map_err(|m| cerr(format!("gamma: {m}")))?;
    if phi.widths() != rec.config.phi_widths() || gamma.widths() != rec.config.gamma_widths() {
        return Err(cerr("network widths disagree with the stored config".into()));
    }
    let f = rec.config.feature_width();
    if rec.normalization.feature_mean.len() != f || rec.normalization.feature_std.len() != f {
        return Err(cerr("normalization width disagrees with the config".into()));
    }
    rec.graph
        .system()
        .map_err(|e| cerr(format!("graph metadata: {e}")))?;
    Ok(Checkpoint {
        params: CnParams {
            config: rec.config,
            phi,
            gamma,
            norm: rec.normalization,
        },
        graph: rec.graph,
        seed: rec.seed,
        train_config: rec.train_config,
        report: rec.report,
        provenance: rec.provenance,
    })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), IoError> {
    write_atomic(path, checkpoint_to_string(ck).as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    checkpoint_from_str(&text, path)
}
