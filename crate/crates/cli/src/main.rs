//! `curvematch`: synthesise data, run samplers and optimisers, and summarise
//! chains from the command line.
//!
//! Exit status: 0 on success, 1 for invalid input (flags, configuration,
//! files), 2 when the forward model fails numerically.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use curvematch::geometry::loop_knot;
use curvematch::inference::{chain_summary, dip_test, ChainRecord, ChainStats, ChainSummary, CurvePotential, DipTest};
use curvematch::io::{
    load_records, save_json, save_with, unix_now, write_histogram_table, write_pointwise_table, write_records,
    write_sample_curves, CurveTable, RunConfig, RunManifest,
};
use curvematch::observation::{ForwardModel, NoiseModel};
use curvematch::optimize::{bfgs_minimize, MapEstimate};
use curvematch::prior::SpectralField;
use curvematch::scenarios::{
    infer, run_scenario, scenario_data, stream_rng, template_circle, RunSettings, ScenarioKind, SyntheticData,
};
use curvematch::{Error, Result};

#[derive(Parser)]
#[command(name = "curvematch", version, about = "Bayesian registration of closed planar curves")]
struct Cli {
    /// Random seed; overrides `seed` in the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise the data sets of a scenario.
    Simulate {
        /// consistency | multimodality | partial (default: `scenario.kind` of the config)
        #[arg(long)]
        scenario: Option<ScenarioKind>,
    },
    /// MAP initialisation (unless `scenario.map_init = false`) and a pCN chain on a data file.
    Sample {
        #[arg(long)]
        data: PathBuf,
    },
    /// MAP estimate on a data file.
    Map {
        #[arg(long)]
        data: PathBuf,
    },
    /// Summary and histogram tables of a chain file.
    Diagnose {
        #[arg(long)]
        chain: PathBuf,
    },
    /// A full experiment: data, MAP, chain and summary for every sub-case.
    Scenario { kind: ScenarioKind },
    /// Dense final curves shot from evenly spaced states of a chain.
    Curves {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Points per exported curve.
        #[arg(long, default_value_t = 400)]
        points: usize,
    },
}

/// Exit status of a failed run.
fn status(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(status(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn check(cfg: &RunConfig) -> Result<()> {
    for w in cfg.validate()?.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn settings(cfg: &RunConfig) -> RunSettings<'_> {
    RunSettings {
        priors: &cfg.prior,
        shoot: &cfg.shoot,
        sampler: &cfg.sampler,
        optimizer: &cfg.optimizer,
        seed: cfg.seed,
        bins: cfg.bins,
    }
}

/// Collects written files for the manifest.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: vec![],
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(mut self, mut manifest: RunManifest, cfg: &RunConfig) -> Result<()> {
        let text = cfg.to_toml()?;
        fs::write(self.path("config.toml"), text)?;
        manifest.files = self.files.clone();
        manifest.finished = unix_now();
        save_json(&self.dir.join("manifest.json"), &manifest)
    }
}

#[derive(Serialize)]
struct ChainReport<'a> {
    stats: &'a ChainStats,
    map: Option<&'a MapEstimate>,
    /// Dip test on the lowest momentum coefficient.
    lowest_mode_dip: DipTest,
    summary: &'a ChainSummary,
}

fn lowest_mode_dip(records: &[ChainRecord]) -> DipTest {
    let x: Vec<f64> = records.iter().map(|r| r.p0[0]).collect();
    dip_test(&x, 500, 0)
}

/// Chain, summary, histogram and pointwise tables under `tag`.
fn write_chain_outputs(
    out: &mut Output,
    tag: &str,
    records: &[ChainRecord],
    stats: &ChainStats,
    map: Option<&MapEstimate>,
    summary: &ChainSummary,
) -> Result<()> {
    save_with(&out.path(&format!("chain{tag}.ndjson")), |w| write_records(w, records))?;
    let report = ChainReport {
        stats,
        map,
        lowest_mode_dip: lowest_mode_dip(records),
        summary,
    };
    save_json(&out.path(&format!("summary{tag}.json")), &report)?;
    save_with(&out.path(&format!("histograms{tag}.csv")), |w| write_histogram_table(w, summary))?;
    save_with(&out.path(&format!("pointwise{tag}.csv")), |w| {
        write_pointwise_table(w, &summary.p0, &summary.nu)
    })
}

fn write_data(out: &mut Output, label: &str, d: &SyntheticData) -> Result<()> {
    CurveTable::from_observations(&d.obs).save(&out.path(&format!("data_{label}.csv")))?;
    if let Some(t) = &d.truth {
        save_json(&out.path(&format!("truth_{label}.json")), t)?;
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<SyntheticData> {
    let obs = CurveTable::load(path)?.into_observations(&path.display().to_string())?;
    Ok(SyntheticData { obs, truth: None })
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = load_config(&cli)?;
    if let Command::Simulate { scenario: Some(kind) } = &cli.command {
        cfg.scenario.kind = *kind;
    }
    if let Command::Scenario { kind } = &cli.command {
        cfg.scenario.kind = *kind;
    }
    check(&cfg)?;
    let model_n = cfg.scenario.model_resolution;
    let mut out = Output::new(&cli.out)?;

    match &cli.command {
        Command::Simulate { .. } => {
            let mut manifest = RunManifest::new("simulate", &cfg, model_n);
            manifest.scenario = Some(cfg.scenario.kind);
            manifest.data_resolution = Some(cfg.scenario.data_resolution);
            manifest.data_steps = Some(cfg.scenario.data_steps);
            for (label, d) in scenario_data(&cfg.scenario, &settings(&cfg))? {
                write_data(&mut out, &label, &d)?;
            }
            out.finish(manifest, &cfg)?;
        }
        Command::Sample { data } => {
            let manifest = RunManifest::new("sample", &cfg, model_n);
            let d = load_data(data)?;
            let mut rng = stream_rng(cfg.seed, 1000);
            let run = settings(&cfg);
            let (map, records, stats, summary) =
                infer(&d, model_n, cfg.sampler.infer_sigma2, &run, &mut rng, cfg.scenario.map_init)?;
            write_chain_outputs(&mut out, "", &records, &stats, map.as_ref(), &summary)?;
            out.finish(manifest, &cfg)?;
        }
        Command::Map { data } => {
            let manifest = RunManifest::new("map", &cfg, model_n);
            let d = load_data(data)?;
            let k = cfg.prior.momentum.modes_for(model_n);
            if k != cfg.prior.reparam.modes_for(model_n) {
                return Err(Error::Validation("momentum and reparameterisation priors must retain the same modes".into()));
            }
            let obs = match d.obs.noise() {
                NoiseModel::Shared(_) => d.obs.clone(),
                NoiseModel::PerPoint(v) if cfg.sampler.infer_sigma2 => {
                    d.obs.with_shared_variance(v.iter().sum::<f64>() / v.len() as f64)?
                }
                NoiseModel::PerPoint(_) => d.obs.clone(),
            };
            let target = CurvePotential::new(template_circle(model_n)?, cfg.shoot, obs, k)?;
            let zero = SpectralField::zeros(k);
            let map = bfgs_minimize(&zero, &zero, &target, &cfg.prior, &cfg.optimizer)?;
            save_json(&out.path("map.json"), &map)?;
            let curve = target
                .model()
                .final_curve(&map.p0.to_samples(model_n), &map.nu.to_samples(model_n))?;
            CurveTable::from_curve(&curve).save(&out.path("map_curve.csv"))?;
            out.finish(manifest, &cfg)?;
        }
        Command::Diagnose { chain } => {
            let manifest = RunManifest::new("diagnose", &cfg, model_n);
            let records = load_records(chain)?;
            let summary = chain_summary(&records, model_n, cfg.bins)?;
            #[derive(Serialize)]
            struct Diagnosis<'a> {
                lowest_mode_dip: DipTest,
                summary: &'a ChainSummary,
            }
            let report = Diagnosis {
                lowest_mode_dip: lowest_mode_dip(&records),
                summary: &summary,
            };
            save_json(&out.path("summary.json"), &report)?;
            save_with(&out.path("histograms.csv"), |w| write_histogram_table(w, &summary))?;
            save_with(&out.path("pointwise.csv"), |w| write_pointwise_table(w, &summary.p0, &summary.nu))?;
            out.finish(manifest, &cfg)?;
        }
        Command::Scenario { kind } => {
            let mut manifest = RunManifest::new("scenario", &cfg, model_n);
            manifest.scenario = Some(*kind);
            manifest.data_resolution = Some(cfg.scenario.data_resolution);
            manifest.data_steps = Some(cfg.scenario.data_steps);
            let outcome = run_scenario(&cfg.scenario, &settings(&cfg))?;

            #[derive(Serialize)]
            struct CaseLine {
                label: String,
                error: Option<String>,
                acceptance_rate: Option<f64>,
                beta: Option<f64>,
                map_value: Option<f64>,
                sigma2_quartiles: Option<[f64; 3]>,
                lowest_mode_dip: Option<DipTest>,
                /// Mean over the loop of the pointwise posterior std of `nu`.
                nu_mean_std: Option<f64>,
            }
            let mut lines = vec![];
            let mut failed = false;
            for (label, res) in &outcome.cases {
                match res {
                    Ok(case) => {
                        write_data(&mut out, label, &case.data)?;
                        let tag = format!("_{label}");
                        write_chain_outputs(&mut out, &tag, &case.records, &case.stats, case.map.as_ref(), &case.summary)?;
                        let std = &case.summary.nu.point_std;
                        lines.push(CaseLine {
                            label: label.clone(),
                            error: None,
                            acceptance_rate: Some(case.stats.acceptance_rate),
                            beta: Some(case.stats.beta),
                            map_value: case.map.as_ref().map(|m| m.value),
                            sigma2_quartiles: Some(case.summary.sigma2_quartiles),
                            lowest_mode_dip: Some(lowest_mode_dip(&case.records)),
                            nu_mean_std: Some(std.iter().sum::<f64>() / std.len() as f64),
                        });
                    }
                    Err(msg) => {
                        eprintln!("error: sub-case {label}: {msg}");
                        failed = true;
                        lines.push(CaseLine {
                            label: label.clone(),
                            error: Some(msg.clone()),
                            acceptance_rate: None,
                            beta: None,
                            map_value: None,
                            sigma2_quartiles: None,
                            lowest_mode_dip: None,
                            nu_mean_std: None,
                        });
                    }
                }
            }
            save_json(&out.path("summary.json"), &lines)?;
            out.finish(manifest, &cfg)?;
            if failed {
                return Ok(2);
            }
        }
        Command::Curves { chain, count, points } => {
            let manifest = RunManifest::new("curves", &cfg, model_n);
            let records = load_records(chain)?;
            if *count == 0 || *count > records.len() {
                return Err(Error::InvalidInput(format!(
                    "--count must lie in 1..={} for this chain, got {count}",
                    records.len()
                )));
            }
            let model = ForwardModel::new(template_circle(model_n)?, cfg.shoot)?;
            let mut curves = Vec::with_capacity(*count);
            for k in 0..*count {
                let r = &records[k * records.len() / count];
                let p0 = SpectralField::from_flat(&r.p0)?.to_samples(model_n);
                let nu = SpectralField::from_flat(&r.nu)?.to_samples(model_n);
                let spline = model.final_curve(&p0, &nu)?.spline();
                let s: Vec<f64> = (0..*points).map(|i| loop_knot(i, *points)).collect();
                let pts = s.iter().map(|&si| spline.eval(si)).collect();
                curves.push((
                    r.iteration,
                    CurveTable {
                        s,
                        points: pts,
                        sigma2: None,
                    },
                ));
            }
            save_with(&out.path("curves.csv"), |w| write_sample_curves(w, &curves))?;
            out.finish(manifest, &cfg)?;
        }
    }
    Ok(0)
}
