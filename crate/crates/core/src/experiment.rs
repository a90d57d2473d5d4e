//! Config-driven experiment runs: a flat `key = value` config format,
//! training with artifact emission, a checksum manifest, text checkpoints,
//! checkpoint evaluation and ASCII rendering.
//!
//! The config format has one assignment per line. Keys use dotted sections
//! (`train.epochs`), `#` starts a comment, and a key may appear only once.
//!
//! ```text
//! architecture = fc_classifier
//! output_dir = runs/fc
//! emit = history, checkpoint
//! train.epochs = 350
//! sensor.noise_frac = 0.2
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::array::{
    build_conv_array, build_fc_array, conv_forward_traced, fc_forward_traced, series_image,
    BankTrace,
};
use crate::dataset::{
    balanced_batch, classify_bitmap, encode_capacitive, format_bitmap, letter_pattern,
    sample_batch, Glyph, CLASS_COUNT,
};
use crate::device::{NoiseMode, SensorParams};
use crate::error::{Error, Result};
use crate::metrics::{
    assemble_waveform, summarize, waveform_csv, EnergyMode, EnergyModel, MetricsSummary,
    PhaseTiming, WaveformRow,
};
use crate::netlab::{
    train, Architecture, Autoencoder, CnnClassifier, FcClassifier, Model, NetworkSpec, TrainConfig,
    TrainHistory, WeightBank,
};

pub const TOOL_VERSION: &str = concat!("capmac ", env!("CARGO_PKG_VERSION"));

/// Largest matrix side accepted by the ASCII renderers.
pub const MAX_RENDER_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Artifact {
    History,
    Waveform,
    Reconstruction,
    Schedule,
    Checkpoint,
}

impl Artifact {
    pub const ALL: [Artifact; 5] = [
        Artifact::History,
        Artifact::Waveform,
        Artifact::Reconstruction,
        Artifact::Schedule,
        Artifact::Checkpoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Artifact::History => "history",
            Artifact::Waveform => "waveform",
            Artifact::Reconstruction => "reconstruction",
            Artifact::Schedule => "schedule",
            Artifact::Checkpoint => "checkpoint",
        }
    }

    pub fn parse(s: &str) -> Option<Artifact> {
        Artifact::ALL.into_iter().find(|a| a.name() == s.trim())
    }

    pub fn applies_to(self, architecture: Architecture) -> bool {
        self != Artifact::Reconstruction || architecture == Architecture::Autoencoder
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub sensor: SensorParams,
    pub timing: PhaseTiming,
    pub energy: EnergyModel,
    pub output_dir: PathBuf,
    pub emit: BTreeSet<Artifact>,
}

impl ExperimentConfig {
    /// Defaults for `architecture`, emitting every applicable artifact.
    pub fn defaults(architecture: Architecture) -> Self {
        ExperimentConfig {
            architecture,
            train: TrainConfig::defaults(architecture),
            sensor: SensorParams::default(),
            timing: PhaseTiming::default(),
            energy: EnergyModel::default(),
            output_dir: PathBuf::from("runs").join(architecture.name()),
            emit: Artifact::ALL
                .into_iter()
                .filter(|a| a.applies_to(architecture))
                .collect(),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        RawConfig::parse(text)?.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        let field = |section: &str, e: Error| Error::Usage(format!("{section}: {e}"));
        self.train.validate().map_err(|e| field("train", e))?;
        self.sensor.validate().map_err(|e| field("sensor", e))?;
        self.timing.validate().map_err(|e| field("timing", e))?;
        self.energy.validate().map_err(|e| field("energy", e))?;
        if let Some(a) = self.emit.iter().find(|a| !a.applies_to(self.architecture)) {
            return Err(Error::Usage(format!(
                "emit: {} needs architecture autoencoder, not {}",
                a.name(),
                self.architecture.name()
            )));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        out.push_str(&self.hashed_text());
        out
    }

    /// Canonical text without `output_dir`, so the same experiment hashes
    /// identically wherever it is written.
    fn hashed_text(&self) -> String {
        let t = &self.train;
        let s = &self.sensor;
        let emit: Vec<&str> = self.emit.iter().map(|a| a.name()).collect();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("architecture", self.architecture.name().into());
        kv("emit", emit.join(", "));
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.binarize", t.binarize.to_string());
        kv("train.eval_per_glyph", t.eval_per_glyph.to_string());
        kv("train.threads", t.threads.to_string());
        kv("sensor.c0", s.c0.to_string());
        kv("sensor.c_ih", s.c_ih.to_string());
        kv("sensor.c_il", s.c_il.to_string());
        kv("sensor.noise_frac", s.noise_frac.to_string());
        kv("sensor.noise_mode", noise_mode_name(s.noise_mode).into());
        kv("timing.clear", self.timing.t_clear.to_string());
        kv("timing.charge", self.timing.t_charge.to_string());
        kv("timing.transfer", self.timing.t_transfer.to_string());
        kv("timing.sum", self.timing.t_sum.to_string());
        kv("energy.mode", energy_mode_name(self.energy.mode).into());
        kv(
            "energy.e_per_classification",
            self.energy.e_per_classification.to_string(),
        );
        kv("energy.supply_v", self.energy.supply_v.to_string());
        out
    }

    /// SHA-256 of the canonical config, thread count excluded since it does
    /// not change results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.threads = 1;
        sha256_hex(c.hashed_text().as_bytes())
    }
}

fn noise_mode_name(mode: NoiseMode) -> &'static str {
    match mode {
        NoiseMode::PerClass => "per_class",
        NoiseMode::Global => "global",
    }
}

fn energy_mode_name(mode: EnergyMode) -> &'static str {
    match mode {
        EnergyMode::Calibrated => "calibrated",
        EnergyMode::ChargeBased => "charge_based",
    }
}

/// Unresolved assignments, each remembering the config line it came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (Option<usize>, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = split_assignment(body).ok_or_else(|| Error::Parse {
                line: line_no,
                detail: format!("expected `key = value`, found {body:?}"),
            })?;
            if raw.entries.contains_key(&key) {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("duplicate key {key}"),
                });
            }
            raw.entries.insert(key, (Some(line_no), value));
        }
        Ok(raw)
    }

    /// Applies a `key=value` override; later overrides win.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = split_assignment(assignment).ok_or_else(|| {
            Error::Usage(format!("override must be key=value, got {assignment:?}"))
        })?;
        self.entries.insert(key, (None, value));
        Ok(())
    }

    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let architecture = match self.entries.get("architecture") {
            Some((line, v)) => Architecture::parse(v)
                .ok_or_else(|| bad_value("architecture", *line, v, "unknown architecture"))?,
            None => Architecture::FcClassifier,
        };
        let mut c = ExperimentConfig::defaults(architecture);
        for (key, (line, v)) in &self.entries {
            let line = *line;
            let num = || parse_num::<f64>(key, line, v);
            match key.as_str() {
                "architecture" => {}
                "output_dir" => c.output_dir = PathBuf::from(v),
                "emit" => {
                    c.emit = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty() && *s != "none")
                        .map(|s| {
                            Artifact::parse(s)
                                .ok_or_else(|| bad_value(key, line, s, "unknown artifact"))
                        })
                        .collect::<Result<_>>()?
                }
                "train.batch_size" => c.train.batch_size = parse_num(key, line, v)?,
                "train.learning_rate" => c.train.learning_rate = num()?,
                "train.epochs" => c.train.epochs = parse_num(key, line, v)?,
                "train.seed" => c.train.seed = parse_num(key, line, v)?,
                "train.binarize" => c.train.binarize = parse_num(key, line, v)?,
                "train.eval_per_glyph" => c.train.eval_per_glyph = parse_num(key, line, v)?,
                "train.threads" => c.train.threads = parse_num(key, line, v)?,
                "sensor.c0" => c.sensor.c0 = num()?,
                "sensor.c_ih" => c.sensor.c_ih = num()?,
                "sensor.c_il" => c.sensor.c_il = num()?,
                "sensor.noise_frac" => c.sensor.noise_frac = num()?,
                "sensor.noise_mode" => {
                    c.sensor.noise_mode = match v.as_str() {
                        "per_class" => NoiseMode::PerClass,
                        "global" => NoiseMode::Global,
                        _ => return Err(bad_value(key, line, v, "expected per_class or global")),
                    }
                }
                "timing.clear" => c.timing.t_clear = num()?,
                "timing.charge" => c.timing.t_charge = num()?,
                "timing.transfer" => c.timing.t_transfer = num()?,
                "timing.sum" => c.timing.t_sum = num()?,
                "energy.mode" => {
                    c.energy.mode = match v.as_str() {
                        "calibrated" => EnergyMode::Calibrated,
                        "charge_based" => EnergyMode::ChargeBased,
                        _ => {
                            return Err(bad_value(
                                key,
                                line,
                                v,
                                "expected calibrated or charge_based",
                            ))
                        }
                    }
                }
                "energy.e_per_classification" => c.energy.e_per_classification = num()?,
                "energy.supply_v" => c.energy.supply_v = num()?,
                _ => return Err(bad_value(key, line, v, "unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Measurement settings that may be overridden when evaluating or tracing
/// an existing checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub sensor: SensorParams,
    pub timing: PhaseTiming,
    pub energy: EnergyModel,
}

impl Settings {
    /// Applies `key=value` overrides limited to the `sensor.`, `timing.` and
    /// `energy.` sections, using the config file parser.
    pub fn with_overrides(self, assignments: &[String]) -> Result<Settings> {
        let mut c = ExperimentConfig::defaults(Architecture::FcClassifier);
        c.sensor = self.sensor;
        c.timing = self.timing;
        c.energy = self.energy;
        let mut raw = RawConfig::parse(&c.to_text())?;
        for a in assignments {
            let key = a.split('=').next().unwrap_or("").trim();
            if !["sensor.", "timing.", "energy."]
                .iter()
                .any(|p| key.starts_with(p))
            {
                return Err(Error::Usage(format!(
                    "{key}: only sensor.*, timing.* and energy.* can be overridden here"
                )));
            }
            raw.set(a)?;
        }
        let c = raw.resolve()?;
        Ok(Settings {
            sensor: c.sensor,
            timing: c.timing,
            energy: c.energy,
        })
    }
}

fn split_assignment(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let k = k.trim();
    if k.is_empty() {
        return None;
    }
    Some((k.to_string(), v.trim().to_string()))
}

fn bad_value(key: &str, line: Option<usize>, value: &str, detail: &str) -> Error {
    let at = line.map(|l| format!(" (line {l})")).unwrap_or_default();
    Error::Usage(format!("{key}{at}: {detail}: {value:?}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, line: Option<usize>, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad_value(key, line, v, "cannot parse value"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

// ---------------------------------------------------------------------------
// Checkpoints

/// A trained model plus the settings needed to rebuild and evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub sensor: SensorParams,
}

const CHECKPOINT_FORMAT: &str = "capmac-checkpoint 1";

fn write_matrix(out: &mut String, name: &str, m: &Array2<f64>) {
    let _ = writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
}

impl Checkpoint {
    pub fn from_history(history: &TrainHistory, sensor: &SensorParams) -> Self {
        Checkpoint {
            model: history.model.clone(),
            seed: history.seed,
            epoch: history.records.len(),
            sensor: *sensor,
        }
    }

    /// Text form. Floats use the shortest representation that parses back
    /// to the same value, so save and load round-trip exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.sensor;
        let _ = writeln!(out, "format = {CHECKPOINT_FORMAT}");
        let _ = writeln!(out, "architecture = {}", self.model.architecture().name());
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "epoch = {}", self.epoch);
        let _ = writeln!(out, "sensor.c0 = {}", s.c0);
        let _ = writeln!(out, "sensor.c_ih = {}", s.c_ih);
        let _ = writeln!(out, "sensor.c_il = {}", s.c_il);
        let _ = writeln!(out, "sensor.noise_frac = {}", s.noise_frac);
        let _ = writeln!(out, "sensor.noise_mode = {}", noise_mode_name(s.noise_mode));
        match &self.model {
            Model::Fc(m) => {
                let _ = writeln!(out, "binarize = {}", m.binarize);
                let _ = writeln!(out, "beta = {}", m.weights.beta);
                write_matrix(&mut out, "weights", &m.weights.v);
            }
            Model::Autoencoder(m) => {
                let _ = writeln!(out, "beta = {}", m.encoder.beta);
                write_matrix(&mut out, "encoder", &m.encoder.v);
                write_matrix(&mut out, "decoder", &m.decoder);
            }
            Model::Cnn(m) => {
                let _ = writeln!(out, "beta = {}", m.kernel.beta);
                write_matrix(&mut out, "kernel", &m.kernel.v);
                write_matrix(&mut out, "head", &m.head);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut matrices: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        while let Some((line, body)) = lines.next() {
            if body.is_empty() {
                continue;
            }
            if let Some(spec) = body.strip_prefix("matrix ") {
                let parts: Vec<&str> = spec.split_whitespace().collect();
                let [name, rows, cols] = parts[..] else {
                    return Err(Error::Parse {
                        line,
                        detail: "expected `matrix <name> <rows> <cols>`".into(),
                    });
                };
                let dims = rows.parse::<usize>().ok().zip(cols.parse::<usize>().ok());
                let (rows, cols) = dims.ok_or_else(|| Error::Parse {
                    line,
                    detail: format!("bad matrix dimensions in {spec:?}"),
                })?;
                let mut cells = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (row_line, row) = lines.next().ok_or_else(|| Error::Parse {
                        line,
                        detail: format!("matrix {name} is truncated"),
                    })?;
                    let values: Vec<f64> = row
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Parse {
                            line: row_line,
                            detail: format!("{e}"),
                        })?;
                    if values.len() != cols {
                        return Err(Error::Parse {
                            line: row_line,
                            detail: format!("expected {cols} values, found {}", values.len()),
                        });
                    }
                    cells.extend(values);
                }
                let m = Array2::from_shape_vec((rows, cols), cells).expect("row lengths checked");
                matrices.insert(name.to_string(), m);
            } else {
                let (k, v) = split_assignment(body).ok_or_else(|| Error::Parse {
                    line,
                    detail: format!("expected `key = value`, found {body:?}"),
                })?;
                header.insert(k, (line, v));
            }
        }

        let get = |key: &str| -> Result<&(usize, String)> {
            header.get(key).ok_or_else(|| Error::Parse {
                line: 0,
                detail: format!("checkpoint is missing {key}"),
            })
        };
        let num = |key: &str| -> Result<f64> {
            let (line, v) = get(key)?;
            v.parse().map_err(|_| Error::Parse {
                line: *line,
                detail: format!("{key}: cannot parse {v:?}"),
            })
        };
        let (line, format) = get("format")?;
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                line: *line,
                detail: format!("unsupported checkpoint format {format:?}"),
            });
        }
        let (line, arch) = get("architecture")?;
        let architecture = Architecture::parse(arch).ok_or_else(|| Error::Parse {
            line: *line,
            detail: format!("unknown architecture {arch:?}"),
        })?;
        let noise_mode = match get("sensor.noise_mode")?.1.as_str() {
            "per_class" => NoiseMode::PerClass,
            "global" => NoiseMode::Global,
            other => {
                return Err(Error::Parse {
                    line: get("sensor.noise_mode")?.0,
                    detail: format!("unknown noise mode {other:?}"),
                })
            }
        };
        let sensor = SensorParams {
            c0: num("sensor.c0")?,
            c_ih: num("sensor.c_ih")?,
            c_il: num("sensor.c_il")?,
            noise_frac: num("sensor.noise_frac")?,
            noise_mode,
        };
        sensor.validate()?;
        let beta = num("beta")?;
        let take = |name: &str| -> Result<Array2<f64>> {
            matrices.get(name).cloned().ok_or_else(|| Error::Parse {
                line: 0,
                detail: format!("checkpoint is missing matrix {name}"),
            })
        };
        let bank = |name: &str| -> Result<WeightBank> {
            Ok(WeightBank {
                v: take(name)?,
                beta,
            })
        };
        let model = match architecture {
            Architecture::FcClassifier => {
                let (line, b) = get("binarize")?;
                let binarize = b.parse().map_err(|_| Error::Parse {
                    line: *line,
                    detail: format!("binarize: cannot parse {b:?}"),
                })?;
                Model::Fc(FcClassifier::new(bank("weights")?, binarize)?)
            }
            Architecture::Autoencoder => Model::Autoencoder(Autoencoder::new(
                bank("encoder")?,
                take("decoder")?,
                &sensor,
            )?),
            Architecture::CnnClassifier => {
                Model::Cnn(CnnClassifier::new(bank("kernel")?, take("head")?)?)
            }
        };
        Ok(Checkpoint {
            model,
            seed: num("seed")? as u64,
            epoch: num("epoch")? as usize,
            sensor,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_text(&text)
    }
}

// ---------------------------------------------------------------------------
// Traces

/// Waveform and metrics of one inference on a clean glyph.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub traces: Vec<BankTrace>,
    pub waveform: Vec<WaveformRow>,
    pub summary: MetricsSummary,
}

/// Runs the model's analog layer on the clean `glyph` with phase capture.
/// The FC classifier uses its programmed (possibly binarized) weights, the
/// autoencoder its encoder, the CNN its kernel.
pub fn trace_model(
    model: &Model,
    glyph: Glyph,
    sensor: &SensorParams,
    timing: &PhaseTiming,
    energy: &EnergyModel,
) -> Result<TraceReport> {
    let architecture = model.architecture();
    let net = NetworkSpec::for_architecture(architecture);
    let image = encode_capacitive(&letter_pattern(glyph, architecture.resolution())?, sensor).c_i;
    let (topology, traces) = match model {
        Model::Fc(m) => {
            let t = fc_forward_traced(m.topology(), &image, &m.programmed(), sensor)?;
            (m.topology().clone(), t)
        }
        Model::Autoencoder(m) => {
            let topo = build_fc_array(net.rows, net.cols, net.banks)?;
            let t = fc_forward_traced(&topo, &image, &m.encoder, sensor)?;
            (topo, t)
        }
        Model::Cnn(m) => {
            let weights: Vec<f64> = m.kernel.v.iter().copied().collect();
            let t = conv_forward_traced(m.topology(), m.schedule(), &image, &weights, sensor)?;
            (m.topology().clone(), t)
        }
    };
    let records: Vec<_> = traces
        .iter()
        .flat_map(|t| t.records.iter().copied())
        .collect();
    let summary = summarize(&net, &topology, timing, energy, Some(&records))?;
    let waveform = assemble_waveform(&traces, timing)?;
    Ok(TraceReport {
        traces,
        waveform,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed { epochs: usize },
    Diverged { epoch: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub architecture: Architecture,
    pub status: RunStatus,
    /// `(file name, sha256)` in the order written.
    pub artifacts: Vec<(String, String)>,
    pub config_text: String,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tool_version = {}", self.tool_version);
        let _ = writeln!(out, "config_sha256 = {}", self.config_sha256);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "architecture = {}", self.architecture.name());
        match &self.status {
            RunStatus::Completed { epochs } => {
                let _ = writeln!(out, "status = completed after {epochs} epochs");
            }
            RunStatus::Diverged { epoch, detail } => {
                let _ = writeln!(out, "status = diverged at epoch {epoch}: {detail}");
            }
        }
        for (file, sum) in &self.artifacts {
            let _ = writeln!(out, "artifact {file} sha256 {sum}");
        }
        out.push_str("config:\n");
        for line in self.config_text.lines() {
            let _ = writeln!(out, "  {line}");
        }
        out
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub manifest: RunManifest,
    /// The completed history, or the last good one before divergence.
    pub history: TrainHistory,
}

struct ArtifactWriter<'a> {
    dir: &'a Path,
    written: Vec<(String, String)>,
}

impl ArtifactWriter<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.written
            .push((name.to_string(), sha256_hex(contents.as_bytes())));
        Ok(())
    }
}

/// 8-bit plain PGM of a reconstructed series-capacitance image, scaled so
/// `C_L` is black and `C_H` is white.
pub fn reconstruction_pgm(c_series: &[f64], side: usize, sensor: &SensorParams) -> String {
    let (c_h, c_l) = (sensor.c_high(), sensor.c_low());
    let mut out = format!("P2\n{side} {side}\n255\n");
    for row in c_series.chunks(side) {
        let cells: Vec<String> = row
            .iter()
            .map(|&c| {
                let level = ((c - c_l) / (c_h - c_l)).clamp(0.0, 1.0) * 255.0;
                (level.round() as u8).to_string()
            })
            .collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Trains the configured model and writes the requested artifacts plus
/// `manifest.txt` into `output_dir`. A diverged run still writes its
/// artifacts, with the checkpoint holding the last good model.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let (history, status) = match train(config.architecture, &config.train, &config.sensor)? {
        Ok(h) => {
            let epochs = h.records.len();
            (h, RunStatus::Completed { epochs })
        }
        Err(d) => (
            d.last_good,
            RunStatus::Diverged {
                epoch: d.epoch,
                detail: d.detail,
            },
        ),
    };

    let mut out = ArtifactWriter {
        dir,
        written: Vec::new(),
    };
    for artifact in &config.emit {
        match artifact {
            Artifact::History => out.write("history.csv", &history.history_csv())?,
            Artifact::Checkpoint => out.write(
                "checkpoint.txt",
                &Checkpoint::from_history(&history, &config.sensor).to_text(),
            )?,
            Artifact::Waveform => {
                let report = trace_model(
                    &history.model,
                    Glyph::InvZ,
                    &config.sensor,
                    &config.timing,
                    &config.energy,
                )?;
                out.write("waveform.csv", &waveform_csv(&report.waveform))?;
                out.write("metrics.json", &(report.summary.to_json() + "\n"))?;
            }
            Artifact::Schedule => {
                let json = match &history.model {
                    Model::Cnn(m) => m.schedule().to_json(),
                    Model::Fc(m) => topology_json(m.topology()),
                    Model::Autoencoder(_) => {
                        let net = NetworkSpec::for_architecture(Architecture::Autoencoder);
                        topology_json(&build_fc_array(net.rows, net.cols, net.banks)?)
                    }
                };
                out.write("schedule.json", &(json + "\n"))?;
            }
            Artifact::Reconstruction => {
                let Model::Autoencoder(ae) = &history.model else {
                    unreachable!("validated: reconstruction needs an autoencoder")
                };
                for glyph in Glyph::ALL {
                    let img = encode_capacitive(&letter_pattern(glyph, 3)?, &config.sensor);
                    let pass = ae.forward(&img.c_i, &config.sensor)?;
                    let name = format!("reconstruction_{}", glyph.name());
                    out.write(
                        &format!("{name}.txt"),
                        &format_bitmap(&ae.reconstruct_bitmap(&pass, 3)),
                    )?;
                    out.write(
                        &format!("{name}.pgm"),
                        &reconstruction_pgm(&pass.c_series_rec, 3, &config.sensor),
                    )?;
                }
            }
        }
    }

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_sha256: config.hash(),
        seed: config.train.seed,
        architecture: config.architecture,
        status,
        artifacts: out.written,
        config_text: config.to_text(),
    };
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(RunReport { manifest, history })
}

fn topology_json(topology: &crate::array::ArrayTopology) -> String {
    serde_json::to_string_pretty(topology).expect("topology serializes")
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub sensor: SensorParams,
    /// Evaluation samples per glyph.
    pub per_glyph: usize,
    /// Random noisy letters reconstructed by an autoencoder.
    pub letters: usize,
    pub seed: u64,
    /// Reject checkpoints of any other architecture.
    pub expect: Option<Architecture>,
}

impl EvalOptions {
    pub fn for_checkpoint(checkpoint: &Checkpoint) -> Self {
        EvalOptions {
            sensor: checkpoint.sensor,
            per_glyph: 25,
            letters: 8,
            seed: 0,
            expect: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LetterReconstruction {
    pub glyph: Glyph,
    pub mse: f64,
    pub bitmap: Array2<bool>,
    pub classified: Option<Glyph>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub architecture: Architecture,
    pub samples: usize,
    pub accuracy: f64,
    /// `class_means[class][m]`: mean output `m` over samples of `class`.
    pub class_means: [[f64; CLASS_COUNT]; CLASS_COUNT],
    /// Autoencoder only: mean reconstruction MSE per glyph.
    pub letter_mse: Option<[f64; CLASS_COUNT]>,
    /// Autoencoder only: reconstructions of random noisy letters.
    pub letters: Vec<LetterReconstruction>,
}

impl EvalReport {
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "architecture: {}", self.architecture.name());
        let _ = writeln!(out, "samples: {}", self.samples);
        let _ = writeln!(out, "accuracy: {}", self.accuracy);
        for glyph in Glyph::ALL {
            let means: Vec<String> = self.class_means[glyph.index()]
                .iter()
                .map(|x| format!("{x:.6}"))
                .collect();
            let _ = writeln!(out, "mean outputs {}: {}", glyph.name(), means.join(" "));
        }
        if let Some(mse) = self.letter_mse {
            for glyph in Glyph::ALL {
                let _ = writeln!(out, "mse {}: {:.3}", glyph.name(), mse[glyph.index()]);
            }
        }
        for (i, r) in self.letters.iter().enumerate() {
            let got = r.classified.map_or("none", Glyph::name);
            let _ = writeln!(
                out,
                "letter {}: {} -> {} (mse {:.3})",
                i + 1,
                r.glyph.name(),
                got,
                r.mse
            );
            out.push_str(&render_bitmap(&r.bitmap)?);
        }
        Ok(out)
    }
}

/// Scores a checkpoint on a fresh balanced batch drawn from `options.seed`.
pub fn eval(checkpoint: &Checkpoint, options: &EvalOptions) -> Result<EvalReport> {
    let architecture = checkpoint.model.architecture();
    if let Some(expected) = options.expect {
        if expected != architecture {
            return Err(Error::Usage(format!(
                "checkpoint holds {}, expected {}",
                architecture.name(),
                expected.name()
            )));
        }
    }
    options.sensor.validate()?;
    let sensor = &options.sensor;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let resolution = architecture.resolution();
    let batch = balanced_batch(options.per_glyph, resolution, sensor, &mut rng)?;

    let mut correct = 0usize;
    let mut sums = [[0.0; CLASS_COUNT]; CLASS_COUNT];
    let mut mse = [0.0; CLASS_COUNT];
    let mut counts = [0usize; CLASS_COUNT];
    for s in &batch {
        let e = checkpoint.model.evaluate(s, sensor)?;
        correct += usize::from(e.correct);
        let class = s.glyph().index();
        counts[class] += 1;
        for (acc, x) in sums[class].iter_mut().zip(&e.outputs) {
            *acc += x;
        }
        if let Model::Autoencoder(_) = checkpoint.model {
            mse[class] += checkpoint.model.loss(s, sensor)?;
        }
    }
    for class in 0..CLASS_COUNT {
        if counts[class] > 0 {
            let n = counts[class] as f64;
            sums[class].iter_mut().for_each(|x| *x /= n);
            mse[class] /= n;
        }
    }

    let mut letters = Vec::new();
    let mut letter_mse = None;
    if let Model::Autoencoder(ae) = &checkpoint.model {
        letter_mse = Some(mse);
        for s in sample_batch(options.letters, resolution, sensor, &mut rng)? {
            let pass = ae.forward(&s.c_i, sensor)?;
            let bitmap = ae.reconstruct_bitmap(&pass, resolution);
            letters.push(LetterReconstruction {
                glyph: s.glyph(),
                mse: Autoencoder::mse(&pass, &s.c_i),
                classified: classify_bitmap(&bitmap),
                bitmap,
            });
        }
    }
    Ok(EvalReport {
        architecture,
        samples: batch.len(),
        accuracy: correct as f64 / batch.len().max(1) as f64,
        class_means: sums,
        letter_mse,
        letters,
    })
}

// ---------------------------------------------------------------------------
// ASCII rendering

fn check_render_size(rows: usize, cols: usize) -> Result<()> {
    if rows > MAX_RENDER_SIDE || cols > MAX_RENDER_SIDE {
        return Err(Error::Usage(format!(
            "cannot render {rows}x{cols}; the limit is {MAX_RENDER_SIDE}x{MAX_RENDER_SIDE}"
        )));
    }
    Ok(())
}

/// `#` for set cells, `.` for clear ones, one text row per matrix row.
pub fn render_bitmap(bitmap: &Array2<bool>) -> Result<String> {
    check_render_size(bitmap.nrows(), bitmap.ncols())?;
    let mut out = String::with_capacity(bitmap.len() + bitmap.nrows());
    for row in bitmap.rows() {
        out.extend(row.iter().map(|&b| if b { '#' } else { '.' }));
        out.push('\n');
    }
    Ok(out)
}

/// Thresholds an induced-capacitance image at `(C_H + C_L) / 2` in series
/// capacitance and renders it like [`render_bitmap`].
pub fn render_capacitance(c_i: &Array2<f64>, sensor: &SensorParams) -> Result<String> {
    check_render_size(c_i.nrows(), c_i.ncols())?;
    let mid = 0.5 * (sensor.c_high() + sensor.c_low());
    let series = series_image(c_i, sensor.c0)?;
    render_bitmap(&series.mapv(|c| c > mid))
}

/// Conv array used by the CNN, exposed for the CLI's schedule command.
pub fn cnn_topology() -> Result<crate::array::ArrayTopology> {
    let net = NetworkSpec::for_architecture(Architecture::CnnClassifier);
    build_conv_array(net.rows, net.cols, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CapacitiveSample;

    #[test]
    fn config_round_trips_through_text() {
        let mut c = ExperimentConfig::defaults(Architecture::CnnClassifier);
        c.train.learning_rate = 0.1 + 0.2;
        c.sensor.noise_mode = NoiseMode::Global;
        c.emit = [Artifact::History].into_iter().collect();
        assert_eq!(ExperimentConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_blanks_and_defaults() {
        let c = ExperimentConfig::from_text(
            "# fc run\n\narchitecture = fc_classifier  # trailing\ntrain.epochs = 5\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.learning_rate, 10.0);
        assert_eq!(c.train.batch_size, 20);
    }

    #[test]
    fn empty_emit_means_manifest_only() {
        let c = ExperimentConfig::from_text("emit =\n").unwrap();
        assert!(c.emit.is_empty());
    }

    #[test]
    fn bad_value_names_the_field_and_line() {
        let err = ExperimentConfig::from_text("\ntrain.epochs = many\n").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("train.epochs") && msg.contains("line 2"),
            "{msg}"
        );
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = ExperimentConfig::from_text("train.momentum = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("train.momentum"));
    }

    #[test]
    fn duplicate_key_is_a_parse_error() {
        let err = ExperimentConfig::from_text("train.seed = 1\ntrain.seed = 2\n").unwrap_err();
        assert_eq!(
            err,
            Error::Parse {
                line: 2,
                detail: "duplicate key train.seed".into()
            }
        );
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut raw = RawConfig::parse("train.seed = 1\n").unwrap();
        raw.set("train.seed=7").unwrap();
        assert_eq!(raw.resolve().unwrap().train.seed, 7);
        assert!(raw.set("no equals sign").is_err());
    }

    #[test]
    fn settings_overrides_are_limited_to_measurement_sections() {
        let base = Settings {
            sensor: SensorParams::default(),
            timing: PhaseTiming::default(),
            energy: EnergyModel::default(),
        };
        let s = base
            .with_overrides(&["sensor.noise_frac=0".into(), "timing.sum=10".into()])
            .unwrap();
        assert_eq!(s.sensor.noise_frac, 0.0);
        assert_eq!(s.timing.t_sum, 10.0);
        assert!(base.with_overrides(&["train.epochs=3".into()]).is_err());
    }

    #[test]
    fn reconstruction_needs_autoencoder() {
        let err = ExperimentConfig::from_text("emit = reconstruction\n").unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn hash_ignores_output_dir_and_threads() {
        let a = ExperimentConfig::defaults(Architecture::FcClassifier);
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        b.train.threads = 4;
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    fn random_checkpoint(architecture: Architecture) -> Checkpoint {
        let sensor = SensorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = match architecture {
            Architecture::FcClassifier => Model::Fc(FcClassifier::random(&mut rng, true)),
            Architecture::Autoencoder => {
                Model::Autoencoder(Autoencoder::random(&mut rng, &sensor).unwrap())
            }
            Architecture::CnnClassifier => Model::Cnn(CnnClassifier::random(&mut rng)),
        };
        Checkpoint {
            model,
            seed: 11,
            epoch: 0,
            sensor,
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly() {
        for arch in [
            Architecture::FcClassifier,
            Architecture::Autoencoder,
            Architecture::CnnClassifier,
        ] {
            let ckpt = random_checkpoint(arch);
            let text = ckpt.to_text();
            let back = Checkpoint::from_text(&text).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_parse_error() {
        let text = random_checkpoint(Architecture::FcClassifier).to_text();
        let cut: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            Checkpoint::from_text(&cut),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn eval_rejects_architecture_mismatch() {
        let ckpt = random_checkpoint(Architecture::CnnClassifier);
        let mut opts = EvalOptions::for_checkpoint(&ckpt);
        opts.expect = Some(Architecture::FcClassifier);
        assert!(matches!(eval(&ckpt, &opts), Err(Error::Usage(_))));
    }

    #[test]
    fn autoencoder_eval_reconstructs_requested_letters() {
        let ckpt = random_checkpoint(Architecture::Autoencoder);
        let mut opts = EvalOptions::for_checkpoint(&ckpt);
        opts.per_glyph = 2;
        let report = eval(&ckpt, &opts).unwrap();
        assert_eq!(report.letters.len(), 8);
        assert_eq!(report.samples, 8);
        assert!(report.letter_mse.is_some());
        assert!(report.to_text().unwrap().contains("letter 8"));
    }

    #[test]
    fn render_clean_h() {
        let sensor = SensorParams::default();
        let CapacitiveSample { c_i, .. } =
            encode_capacitive(&letter_pattern(Glyph::H, 3).unwrap(), &sensor);
        assert_eq!(
            render_capacitance(&c_i, &sensor).unwrap(),
            "#.#\n###\n#.#\n"
        );
    }

    #[test]
    fn render_all_low_is_blank() {
        let sensor = SensorParams::default();
        let c_i = Array2::from_elem((4, 4), sensor.c_il);
        assert_eq!(
            render_capacitance(&c_i, &sensor).unwrap(),
            "....\n".repeat(4)
        );
    }

    #[test]
    fn render_rejects_oversize() {
        let big = Array2::from_elem((17, 3), true);
        assert!(matches!(render_bitmap(&big), Err(Error::Usage(_))));
        assert!(render_bitmap(&Array2::from_elem((16, 16), false)).is_ok());
    }

    #[test]
    fn pgm_scales_between_c_low_and_c_high() {
        let sensor = SensorParams::default();
        let (lo, hi) = (sensor.c_low(), sensor.c_high());
        let pgm = reconstruction_pgm(&[lo, hi, hi, lo], 2, &sensor);
        assert_eq!(pgm, "P2\n2 2\n255\n0 255\n255 0\n");
    }
}
