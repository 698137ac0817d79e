//! On-disk formats.
//!
//! * curves and observations: CSV with header `index,s,x,y[,sigma2]`
//! * chains: one JSON object per line (`iteration, accepted, phi, sigma2, p0, nu`)
//! * configuration: TOML with `[shoot]`, `[prior]`, `[sampler]`, `[optimizer]`
//!   and `[scenario]` sections
//! * run manifests and summaries: pretty-printed JSON
//!
//! Floats in CSV are written with 17 significant digits; JSON uses the
//! shortest representation that parses back to the same bits. Either way
//! every value round-trips exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{loop_knot, ClosedCurve2D, Point};
use crate::inference::{ChainRecord, ChainSummary, FieldSummary, SamplerConfig};
use crate::observation::{NoiseModel, ObservationSet};
use crate::optimize::OptimizerConfig;
use crate::prior::{validate_spec, PriorPair, ValidationReport};
use crate::scenarios::{ScenarioKind, ScenarioSpec};
use crate::shooting::ShootConfig;

/// 17 significant digits: enough for any f64 to round-trip.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

/// I/O errors carry the path they concern.
fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(with_path(path))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(with_path(path))?))
}

/// Backticked name in a serde error message, e.g. ``missing field `phi` ``.
fn quoted_field(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

/// Points on a loop with their parameters and optional noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub s: Vec<f64>,
    pub points: Vec<Point>,
    pub sigma2: Option<Vec<f64>>,
}

impl CurveTable {
    /// Samples of a curve at its equispaced knots.
    pub fn from_curve(q: &ClosedCurve2D) -> Self {
        let n = q.len();
        Self {
            s: (0..n).map(|j| loop_knot(j, n)).collect(),
            points: q.points().to_vec(),
            sigma2: None,
        }
    }

    pub fn from_observations(obs: &ObservationSet) -> Self {
        Self {
            s: obs.parameters().to_vec(),
            points: obs.points().to_vec(),
            sigma2: Some((0..obs.len()).map(|i| obs.variance(i)).collect()),
        }
    }

    /// Observations with a shared variance when every row carries the same
    /// `sigma2`, per-point variances otherwise. `file` names the source in
    /// errors.
    pub fn into_observations(self, file: &str) -> Result<ObservationSet> {
        let Some(v) = self.sigma2 else {
            return Err(Error::schema(file, "sigma2", "missing column (required for observations)"));
        };
        let noise = match v.first() {
            Some(v0) if v.iter().all(|x| x == v0) => NoiseModel::Shared(*v0),
            _ => NoiseModel::PerPoint(v),
        };
        ObservationSet::new(self.points, self.s, noise)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Io(e.into());
        let mut header = vec!["index", "s", "x", "y"];
        if self.sigma2.is_some() {
            header.push("sigma2");
        }
        out.write_record(&header).map_err(csv_err)?;
        for (i, (s, p)) in self.s.iter().zip(&self.points).enumerate() {
            let mut row = vec![i.to_string(), format_float(*s), format_float(p[0]), format_float(p[1])];
            if let Some(v) = &self.sigma2 {
                row.push(format_float(v[i]));
            }
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Parses a table; `file` names the source in errors. Columns are found
    /// by name, so their order is free.
    pub fn read<R: Read>(r: R, file: &str) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let header = input
            .headers()
            .map_err(|e| Error::schema(file, "header", e.to_string()))?
            .clone();
        let column = |name: &str| header.iter().position(|h| h.trim() == name);
        let required = |name: &str| column(name).ok_or_else(|| Error::schema(file, name, "missing column"));
        let (ci, cs, cx, cy) = (required("index")?, required("s")?, required("x")?, required("y")?);
        let cv = column("sigma2");

        let mut table = Self {
            s: vec![],
            points: vec![],
            sigma2: cv.map(|_| vec![]),
        };
        for (row, rec) in input.records().enumerate() {
            let rec = rec.map_err(|e| Error::schema(file, format!("row {}", row + 1), e.to_string()))?;
            let cell = |c: usize, name: &str| -> Result<f64> {
                let text = rec.get(c).unwrap_or("").trim();
                text.parse::<f64>()
                    .map_err(|_| Error::schema(file, name, format!("row {}: `{text}` is not a number", row + 1)))
            };
            let index = rec.get(ci).unwrap_or("").trim();
            if index.parse::<usize>().ok() != Some(row) {
                return Err(Error::schema(file, "index", format!("row {} has index `{index}`", row + 1)));
            }
            table.s.push(cell(cs, "s")?);
            table.points.push([cell(cx, "x")?, cell(cy, "y")?]);
            if let (Some(c), Some(v)) = (cv, table.sigma2.as_mut()) {
                v.push(cell(c, "sigma2")?);
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(open(path)?, &file_label(path))
    }
}

/// Streams chain records, one JSON object per line.
pub struct RecordWriter<W: Write> {
    out: BufWriter<W>,
}

impl RecordWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self::new(File::create(path).map_err(with_path(path))?))
    }
}

impl<W: Write> RecordWriter<W> {
    pub fn new(w: W) -> Self {
        Self { out: BufWriter::new(w) }
    }

    pub fn write(&mut self, rec: &ChainRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_records<W: Write>(w: W, records: &[ChainRecord]) -> Result<()> {
    let mut out = RecordWriter::new(w);
    for r in records {
        out.write(r)?;
    }
    out.finish()
}

/// Parses a record stream; blank lines are skipped.
pub fn read_records<R: BufRead>(r: R, file: &str) -> Result<Vec<ChainRecord>> {
    let mut records = vec![];
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChainRecord = serde_json::from_str(&line).map_err(|e| {
            let msg = e.to_string();
            let field = quoted_field(&msg).unwrap_or_else(|| format!("line {}", i + 1));
            Error::schema(file, field, format!("line {}: {msg}", i + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn load_records(path: &Path) -> Result<Vec<ChainRecord>> {
    read_records(open(path)?, &file_label(path))
}

/// Everything that influences results, as read from a configuration file.
/// Absent sections and keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Histogram bins in summaries.
    pub bins: usize,
    pub shoot: ShootConfig,
    pub prior: PriorPair,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub scenario: ScenarioSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bins: 40,
            shoot: ShootConfig::default(),
            prior: PriorPair::default(),
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            scenario: ScenarioSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, file: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = quoted_field(&msg).unwrap_or_else(|| "document".into());
            Error::schema(file, field, msg)
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("config does not serialise: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(with_path(path))?, &file_label(path))
    }

    /// Checks every section; the report carries non-fatal warnings.
    pub fn validate(&self) -> Result<ValidationReport> {
        self.shoot.validate()?;
        self.sampler.validate()?;
        self.optimizer.validate()?;
        self.scenario.validate()?;
        if self.bins == 0 {
            return Err(Error::Validation("bins must be at least 1".into()));
        }
        validate_spec(&self.prior, &self.shoot.metric)
    }

    /// SHA-256 of the canonical JSON form: any change to a parameter changes it.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Provenance written next to every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config_digest: String,
    pub scenario: Option<ScenarioKind>,
    /// Curve samples used to synthesise data, when this run synthesised any.
    pub data_resolution: Option<usize>,
    pub data_steps: Option<usize>,
    pub model_resolution: usize,
    pub n_g: usize,
    pub steps: usize,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, model_resolution: usize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: cfg.seed,
            config_digest: cfg.digest(),
            scenario: None,
            data_resolution: None,
            data_steps: None,
            model_resolution,
            n_g: cfg.shoot.n_g,
            steps: cfg.shoot.steps,
            started: unix_now(),
            finished: 0,
            files: vec![],
        }
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(with_path(path))?;
    serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        Error::schema(file_label(path), quoted_field(&msg).unwrap_or_else(|| "document".into()), msg)
    })
}

/// Per-coefficient histograms of a summary as
/// `field,coefficient,bin,lo,hi,count` rows; `sigma2` appears as
/// coefficient 0 of field `sigma2`.
pub fn write_histogram_table<W: Write>(w: W, summary: &ChainSummary) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    out.write_record(["field", "coefficient", "bin", "lo", "hi", "count"]).map_err(csv_err)?;
    let sigma = std::slice::from_ref(&summary.sigma2_histogram);
    let all = [
        ("p0", summary.p0.mode_histograms.as_slice()),
        ("nu", summary.nu.mode_histograms.as_slice()),
        ("sigma2", sigma),
    ];
    for (name, hists) in all {
        for (j, h) in hists.iter().enumerate() {
            let width = if h.counts.is_empty() { 0.0 } else { (h.hi - h.lo) / h.counts.len() as f64 };
            for (b, c) in h.counts.iter().enumerate() {
                let lo = h.lo + b as f64 * width;
                let hi = if b + 1 == h.counts.len() { h.hi } else { lo + width };
                out.write_record([
                    name.to_string(),
                    j.to_string(),
                    b.to_string(),
                    format_float(lo),
                    format_float(hi),
                    c.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Pointwise posterior mean and standard deviation of both fields as
/// `index,s,p0_mean,p0_std,nu_mean,nu_std` rows.
pub fn write_pointwise_table<W: Write>(w: W, p0: &FieldSummary, nu: &FieldSummary) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    out.write_record(["index", "s", "p0_mean", "p0_std", "nu_mean", "nu_std"]).map_err(csv_err)?;
    let n = p0.point_mean.len();
    for i in 0..n {
        out.write_record([
            i.to_string(),
            format_float(loop_knot(i, n)),
            format_float(p0.point_mean[i]),
            format_float(p0.point_std[i]),
            format_float(nu.point_mean[i]),
            format_float(nu.point_std[i]),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Several curves in one table as `sample,iteration,index,s,x,y` rows,
/// `iteration` naming the chain state each curve was shot from.
pub fn write_sample_curves<W: Write>(w: W, curves: &[(usize, CurveTable)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(e.into());
    out.write_record(["sample", "iteration", "index", "s", "x", "y"]).map_err(csv_err)?;
    for (k, (iteration, t)) in curves.iter().enumerate() {
        for (i, (s, p)) in t.s.iter().zip(&t.points).enumerate() {
            out.write_record([
                k.to_string(),
                iteration.to_string(),
                i.to_string(),
                format_float(*s),
                format_float(p[0]),
                format_float(p[1]),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_with<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = create(path)?;
    write(&mut w)?;
    w.flush()?;
    Ok(())
}
