mod io;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use stdk::convforecaster::{self, NeighborhoodSeries, QConvLstmConfig, QConvLstmModel};
use stdk::evaluation::{EvalReport, FoldPredictions};
use stdk::forecaster::{self, Forecast, QlstmConfig, QlstmModel};
use stdk::interpolator::{DeepKrigingModel, InterpolatorConfig};
use stdk::simulator::{self, SimulationSpec};
use stdk::SpaceTimeDataset;

#[derive(Parser)]
#[command(name = "stdk", version, about = "Space-time DeepKriging with quantile forecasters")]
struct Cli {
    /// Overrides every seed taken from specs and configs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "STDK_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 100 stations, 50 times; small enough for exact Cholesky.
    Desk,
    /// 100 stations, 500 times.
    Full,
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Variant {
    Lstm,
    Conv,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a Matérn space-time field to CSV.
    Simulate {
        /// JSON simulation spec; overrides the preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit the quantile interpolator on an observation CSV.
    TrainInterp {
        #[arg(long)]
        data: PathBuf,
        /// JSON interpolator config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated quantile levels.
        #[arg(long)]
        taus: Option<String>,
        /// Comma-separated hidden widths.
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Model directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Predict quantiles at query points.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV with s1,s2,t and optional covariate columns.
        #[arg(long)]
        query: PathBuf,
        /// Subset of the trained levels; all by default.
        #[arg(long)]
        taus: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit a forecaster per location on interpolated series.
    TrainForecast {
        /// Interpolator model directory.
        #[arg(long)]
        interp: PathBuf,
        /// CSV with location_id,s1,s2.
        #[arg(long)]
        locations: PathBuf,
        #[arg(long, value_enum, default_value = "lstm")]
        variant: Variant,
        /// JSON forecaster config for the chosen variant.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
        /// Comma-separated hidden sizes (lstm) or filter counts (conv).
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Output directory of per-location artifacts.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Recursive multi-step forecasts from trained forecasters.
    Forecast {
        /// Directory written by train-forecast.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, short)]
        out: PathBuf,
        /// Writes each location's neighbourhood frames under this directory (conv only).
        #[arg(long)]
        frames_dir: Option<PathBuf>,
    },
    /// Score predictions against held-out observations.
    Evaluate {
        /// Predictions CSV (s1,s2,t,tau,value).
        #[arg(long)]
        pred: PathBuf,
        /// Observation CSV with z.
        #[arg(long)]
        truth: PathBuf,
        /// Lower interval level; the smallest predicted level by default.
        #[arg(long)]
        lo_tau: Option<f64>,
        /// Upper interval level; the largest predicted level by default.
        #[arg(long)]
        hi_tau: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

/// One location's trained forecaster with the inputs it forecasts from.
#[derive(Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
enum LocationArtifact {
    Lstm {
        location_id: String,
        s: [f64; 2],
        series: Vec<f64>,
        model: QlstmModel,
    },
    Conv {
        location_id: String,
        s: [f64; 2],
        neighborhood: NeighborhoodSeries,
        model: QConvLstmModel,
    },
}

impl LocationArtifact {
    fn id(&self) -> &str {
        match self {
            LocationArtifact::Lstm { location_id, .. } | LocationArtifact::Conv { location_id, .. } => location_id,
        }
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| anyhow!("{what}: cannot parse `{p}`")))
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("not found: {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let dd = cli.data_dir.as_deref();
    let p = |x: &Path| io::resolve(dd, x);
    match cli.command {
        Command::Simulate { spec, preset, out } => {
            let mut s = match &spec {
                Some(path) => read_json::<SimulationSpec>(&p(path))?,
                None => match preset {
                    Preset::Desk => SimulationSpec::desk_scale(0),
                    Preset::Full => SimulationSpec::nonstationary_full(0),
                },
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let out = p(&out);
            ensure_parent(&out)?;
            let ds = simulator::simulate_spec(&s)?;
            ds.write_csv(&out)?;
            log::info!("wrote {} observations to {}", ds.len(), out.display());
            let inputs: Vec<PathBuf> = spec.iter().map(|x| p(x)).collect();
            io::write_manifest(&out, "simulate", s.seed, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), &s)?;
        }
        Command::TrainInterp { data, config, taus, hidden, epochs, lr, batch_size, out } => {
            let data = p(&data);
            let mut cfg = match &config {
                Some(c) => read_json::<InterpolatorConfig>(&p(c))?,
                None => InterpolatorConfig::default(),
            };
            if let Some(t) = taus {
                cfg.taus = parse_list(&t, "--taus")?;
            }
            if let Some(h) = hidden {
                cfg.hidden_layers = parse_list(&h, "--hidden")?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.learning_rate = l;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            let ds = SpaceTimeDataset::read_csv(&data).with_context(|| format!("reading {}", data.display()))?;
            let model = DeepKrigingModel::fit(&ds, &cfg)?;
            let out = p(&out);
            model.save(&out)?;
            for (tau, risk) in &model.training_risk {
                log::info!("tau {tau}: training risk {risk:.5}");
            }
            io::write_manifest(&out, "train-interp", cfg.train.seed, &[&data], &cfg)?;
        }
        Command::Predict { model, query, taus, out } => {
            let model = DeepKrigingModel::load(p(&model))?;
            let query = p(&query);
            let q = io::read_queries(&query)?;
            let taus = match taus {
                Some(t) => parse_list(&t, "--taus")?,
                None => model.taus(),
            };
            let by_tau = taus
                .iter()
                .map(|&tau| Ok((tau, model.predict_at(&q.points, q.covariates.as_deref(), tau)?)))
                .collect::<Result<Vec<_>>>()?;
            let out = p(&out);
            ensure_parent(&out)?;
            io::write_predictions(&out, &q.points, &by_tau)?;
            io::write_manifest(&out, "predict", model.config.train.seed, &[&query], &taus)?;
        }
        Command::TrainForecast { interp, locations, variant, config, window, hidden, epochs, lr, batch_size, out } => {
            let interp_dir = p(&interp);
            let model = DeepKrigingModel::load(&interp_dir)?;
            let locations = p(&locations);
            let locs = io::read_locations(&locations)?;
            let times = model.train_times.clone();
            let out = p(&out);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let widths = hidden.map(|h| parse_list::<usize>(&h, "--hidden")).transpose()?;
            let artifacts: Vec<LocationArtifact> = match variant {
                Variant::Lstm => {
                    let mut cfg = match &config {
                        Some(c) => read_json::<QlstmConfig>(&p(c))?,
                        None => QlstmConfig::default(),
                    };
                    if let Some(w) = window {
                        cfg.window = w;
                    }
                    if let Some(h) = widths {
                        cfg.hidden = h;
                    }
                    if let Some(e) = epochs {
                        cfg.train.epochs = e;
                    }
                    if let Some(l) = lr {
                        cfg.train.learning_rate = l;
                    }
                    if let Some(b) = batch_size {
                        cfg.train.batch_size = b;
                    }
                    if let Some(seed) = cli.seed {
                        cfg.train.seed = seed;
                    }
                    io::write_manifest(&out, "train-forecast", cfg.train.seed, &[&interp_dir, &locations], &cfg)?;
                    locs.par_iter()
                        .map(|(id, s)| {
                            let series = model.interpolate_series(*s, &times)?;
                            let m = forecaster::fit_qlstm(&series, &cfg).with_context(|| format!("location {id}"))?;
                            Ok(LocationArtifact::Lstm { location_id: id.clone(), s: *s, series, model: m })
                        })
                        .collect::<Result<_>>()?
                }
                Variant::Conv => {
                    let mut cfg = match &config {
                        Some(c) => read_json::<QConvLstmConfig>(&p(c))?,
                        None => QConvLstmConfig::default(),
                    };
                    if let Some(w) = window {
                        cfg.window = w;
                    }
                    if let Some(h) = widths {
                        cfg.filters = h;
                    }
                    if let Some(e) = epochs {
                        cfg.train.epochs = e;
                    }
                    if let Some(l) = lr {
                        cfg.train.learning_rate = l;
                    }
                    if let Some(b) = batch_size {
                        cfg.train.batch_size = b;
                    }
                    if let Some(seed) = cli.seed {
                        cfg.train.seed = seed;
                    }
                    let delta = match cfg.delta {
                        Some(d) => d,
                        None => convforecaster::median_nn_distance(&model.train_stations)?,
                    };
                    cfg.delta = Some(delta);
                    io::write_manifest(&out, "train-forecast", cfg.train.seed, &[&interp_dir, &locations], &cfg)?;
                    locs.par_iter()
                        .map(|(id, s)| {
                            let neigh = convforecaster::grid_neighborhood(&model, *s, &times, cfg.r, delta)?;
                            let m = convforecaster::fit_qconvlstm(&neigh, &cfg).with_context(|| format!("location {id}"))?;
                            Ok(LocationArtifact::Conv { location_id: id.clone(), s: *s, neighborhood: neigh, model: m })
                        })
                        .collect::<Result<_>>()?
                }
            };
            for a in &artifacts {
                let path = out.join(format!("location_{}.json", a.id()));
                std::fs::write(&path, serde_json::to_string(a)?).with_context(|| format!("writing {}", path.display()))?;
            }
            log::info!("trained {} forecasters into {}", artifacts.len(), out.display());
        }
        Command::Forecast { model, horizon, out, frames_dir } => {
            let dir = p(&model);
            if !dir.is_dir() {
                bail!("not found: forecaster directory {}", dir.display());
            }
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|x| {
                    x.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("location_") && n.ends_with(".json"))
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("not found: no location_*.json artifacts in {}", dir.display());
            }
            let frames_dir = frames_dir.map(|f| p(&f));
            let forecasts: Vec<(String, Forecast)> = paths
                .par_iter()
                .map(|path| {
                    let art: LocationArtifact = read_json(path)?;
                    match art {
                        LocationArtifact::Lstm { location_id, series, model, .. } => {
                            Ok((location_id, forecaster::forecast(&model, &series, horizon)?))
                        }
                        LocationArtifact::Conv { location_id, neighborhood, model, .. } => {
                            if let Some(fd) = &frames_dir {
                                neighborhood.write_frames(fd.join(&location_id))?;
                            }
                            Ok((location_id, convforecaster::forecast_conv(&model, &neighborhood, horizon)?))
                        }
                    }
                })
                .collect::<Result<_>>()?;
            let out = p(&out);
            ensure_parent(&out)?;
            let file = std::fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
            forecaster::write_forecast_csv(file, &forecasts)?;
            io::write_manifest(&out, "forecast", cli.seed.unwrap_or(0), &[&dir], &horizon)?;
        }
        Command::Evaluate { pred, truth, lo_tau, hi_tau, out } => {
            let pred = p(&pred);
            let truth = p(&truth);
            let rows = io::read_predictions(&pred)?;
            let ds = SpaceTimeDataset::read_csv(&truth).with_context(|| format!("reading {}", truth.display()))?;
            let mut levels: Vec<f64> = rows.iter().map(|r| r.tau).collect();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            if !levels.contains(&0.5) {
                bail!("{}: no rows with tau = 0.5", pred.display());
            }
            let lo = lo_tau.unwrap_or(levels[0]);
            let hi = hi_tau.unwrap_or(levels[levels.len() - 1]);
            let mut table: HashMap<(u64, u64, u64), HashMap<u64, f64>> = HashMap::new();
            for r in &rows {
                table.entry(io::key(r.s, r.t)).or_default().insert(r.tau.to_bits(), r.value);
            }
            let mut fold = FoldPredictions::default();
            let want_interval = lo < hi;
            let (mut los, mut his) = (Vec::new(), Vec::new());
            for (k, obs) in ds.rows.iter().enumerate() {
                let at = table.get(&io::key(obs.s, obs.t)).ok_or_else(|| {
                    anyhow!("{}: row {}: no prediction at s=({}, {}), t={}", truth.display(), k + 2, obs.s[0], obs.s[1], obs.t)
                })?;
                let get = |tau: f64| {
                    at.get(&tau.to_bits()).copied().ok_or_else(|| {
                        anyhow!("{}: row {}: no prediction at tau={tau}", truth.display(), k + 2)
                    })
                };
                fold.point.push(get(0.5)?);
                fold.truth.push(obs.z);
                if want_interval {
                    los.push(get(lo)?);
                    his.push(get(hi)?);
                }
            }
            if want_interval {
                fold.interval = Some((los, his));
            }
            let report = EvalReport::from_folds(&[fold])?;
            let out = p(&out);
            ensure_parent(&out)?;
            std::fs::write(&out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", report.to_json()?);
            io::write_manifest(&out, "evaluate", cli.seed.unwrap_or(0), &[&pred, &truth], &(lo, hi))?;
        }
    }
    Ok(())
}
