use anyhow::{anyhow, bail, Context, Result};
use chromapulse_core::actuator::{load_bank, write_timeline_csv};
use chromapulse_core::colorspace::Srgb8;
use chromapulse_core::config::Config;
use chromapulse_core::detector::{write_event_log, DetectorMode};
use chromapulse_core::encoder::{encode, FrameStream, RegionMap};
use chromapulse_core::pairgen::{build_palette, Palette};
use chromapulse_core::psychofit::{fit_with, FitMethod, ResponseData};
use chromapulse_core::repro;
use chromapulse_core::simharness::{CrossingExperiment, Direction, Harness, HarnessConfig, LatencyReport, ReceiverKind, Trajectory};
use clap::{Parser, Subcommand, ValueEnum};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Constant-luminance color-vibration codec and optical haptic link simulator.
#[derive(Parser)]
#[command(name = "chromapulse", version)]
struct Cli {
    /// TOML configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed. Overrides CHROMAPULSE_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for trial fan-out (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the color-pair palette as JSON.
    Pairs {
        /// Target color as R,G,B; repeat for several. Replaces the configured colors.
        #[arg(long = "color", value_parser = parse_rgb)]
        colors: Vec<Srgb8>,
        /// Use an empty color list.
        #[arg(long, conflicts_with = "colors")]
        no_colors: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Encode a region map into a CVF1 frame stream.
    Encode {
        /// Region map JSON. Omit with --stimulus.
        #[arg(long, required_unless_present = "stimulus")]
        map: Option<PathBuf>,
        /// Palette JSON; built from the configured colors when omitted.
        #[arg(long)]
        palette: Option<PathBuf>,
        /// Use the gray/green latency stimulus as the region map.
        #[arg(long, conflicts_with = "map")]
        stimulus: bool,
        /// Also write the region map used.
        #[arg(long)]
        map_out: Option<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the receiver/detector/actuator pipeline.
    Simulate {
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
        /// Trajectory JSON: {"waypoints": [{"t_s", "x_mm", "y_mm"}, ...]}.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Directory of <texture id>.wav files.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Random-phase boundary crossings instead of a single trajectory. Presets
        /// default to the ideal receiver with a one-edge-spacing turn-off timeout.
        #[arg(long, conflicts_with = "trajectory")]
        preset: Option<Preset>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        receiver: Option<Receiver>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        extra_delay_ms: Option<f64>,
        /// Output directory for report.json and CSV files.
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit the psychometric sigmoid to a responses CSV.
    Fit {
        responses: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Compare simulated numbers with the published ones.
    Repro {
        target: Target,
        /// Crossings per direction for table1.
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Print the default configuration as TOML.
    DumpDefaults {
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Worst-case latency per direction.
    Table1,
    /// Realized latency for each configured delay.
    Sweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Table1,
    Thresholds,
}

#[derive(Clone, Copy, ValueEnum)]
enum Receiver {
    Analog,
    Ideal,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    FirstEdge,
    Confirmed,
    Lockin,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    LeastSquares,
    MaxLikelihood,
}

fn parse_rgb(s: &str) -> Result<Srgb8, String> {
    let v: Vec<u8> = s
        .split(',')
        .map(|p| p.trim().parse::<u8>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [r, g, b] => Ok(Srgb8::new(r, g, b)),
        _ => Err(format!("expected R,G,B, got {s:?}")),
    }
}

/// Error carrying a specific exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Exit>() {
                Some(Exit(code, _)) => ExitCode::from(*code),
                None => ExitCode::FAILURE,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("cannot set up worker threads")?;
    }
    if let Command::DumpDefaults { output } = &cli.command {
        return emit(output.as_deref(), &Config::default().to_toml()?);
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Pairs { colors, no_colors, output } => {
            if no_colors {
                cfg.palette.colors.clear();
            } else if !colors.is_empty() {
                cfg.palette.colors = colors;
            }
            let palette = build_palette(&cfg.palette.colors, &cfg.palette.constraints);
            emit(output.as_deref(), &palette.to_json()?)?;
            let missing: Vec<String> = palette
                .entries
                .iter()
                .filter(|e| e.pair.is_none())
                .map(|e| {
                    let [r, g, b] = e.target.to_array();
                    format!("({r},{g},{b}) {}: {}", e.symbol, e.reason.as_deref().unwrap_or("infeasible"))
                })
                .collect();
            if !missing.is_empty() {
                return Err(Exit(2, format!("{} infeasible palette entries:\n  {}", missing.len(), missing.join("\n  "))).into());
            }
            Ok(())
        }
        Command::Encode {
            map,
            palette,
            stimulus,
            map_out,
            duration,
            output,
        } => {
            if let Some(d) = duration {
                cfg.encode.duration_s = d;
            }
            let palette = match palette.or(cfg.paths.palette.clone()) {
                Some(p) => Palette::from_json(&read(&p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => build_palette(&cfg.palette.colors, &cfg.palette.constraints),
            };
            let map = if stimulus {
                stimulus_map(&palette)?
            } else {
                let p = map.or(cfg.paths.region_map.clone()).ok_or_else(|| anyhow!("no region map given"))?;
                RegionMap::from_json(&read(&p)?)?
            };
            let stream = encode(&map, &palette, cfg.encode.duration_s)?;
            stream.write_cvf(BufWriter::new(create(&output)?))?;
            if let Some(p) = map_out {
                emit(Some(&p), &map.to_json()?)?;
            }
            eprintln!(
                "wrote {} frames of {}x{} to {}",
                stream.frames.len(),
                stream.width,
                stream.height,
                output.display()
            );
            Ok(())
        }
        Command::Simulate {
            stream,
            map,
            trajectory,
            bank,
            preset,
            trials,
            receiver,
            mode,
            extra_delay_ms,
            out_dir,
        } => {
            let h = &mut cfg.harness;
            if preset.is_some() {
                let t = HarnessConfig::table1();
                h.receiver = t.receiver;
                h.detector.off_timeout_s = t.detector.off_timeout_s;
            }
            if let Some(r) = receiver {
                h.receiver = match r {
                    Receiver::Analog => ReceiverKind::Analog,
                    Receiver::Ideal => ReceiverKind::Ideal,
                };
            }
            if let Some(m) = mode {
                h.detector.mode = match m {
                    Mode::FirstEdge => DetectorMode::FirstEdge,
                    Mode::Confirmed => DetectorMode::Confirmed,
                    Mode::Lockin => DetectorMode::Lockin,
                };
            }
            if let Some(d) = extra_delay_ms {
                h.extra_delay_s = d / 1000.0;
            }
            if let Some(t) = trials {
                cfg.crossing.trials = t;
            }
            cfg.crossing.seed = cfg.seed;
            cfg.validate()?;
            let out_dir = out_dir.or(cfg.paths.output_dir.clone());
            let bank_dir = bank.or(cfg.paths.waveform_bank.clone());
            let (map, stream) = match (stream.or(cfg.paths.stream.clone()), map.or(cfg.paths.region_map.clone())) {
                (Some(s), Some(m)) => (
                    RegionMap::from_json(&read(&m)?)?,
                    FrameStream::read_cvf(BufReader::new(open(&s)?))?,
                ),
                (None, None) if preset.is_some() => repro::latency_stimulus(cfg.crossing.stream_duration())?,
                _ => bail!("simulate needs both --stream and --map"),
            };
            match preset {
                Some(p) => simulate_preset(p, &cfg, &stream, &map, bank_dir.as_deref(), out_dir.as_deref()),
                None => {
                    let p = trajectory
                        .or(cfg.paths.trajectory.clone())
                        .ok_or_else(|| anyhow!("simulate needs --trajectory or --preset"))?;
                    let raw: Trajectory = serde_json::from_str(&read(&p)?).with_context(|| format!("parsing {}", p.display()))?;
                    let traj = Trajectory::new(raw.waypoints)?;
                    let harness = with_bank(Harness::new(&stream, &map, cfg.harness)?, bank_dir.as_deref())?;
                    let out = harness.run_trial(&traj, cfg.seed, 0)?;
                    let report = LatencyReport::from_records(out.records);
                    if let Some(dir) = &out_dir {
                        fs::create_dir_all(dir)?;
                        write_event_log(create(&dir.join("events.csv"))?, &out.events, &out.decoded)?;
                        write_timeline_csv(create(&dir.join("timeline.csv"))?, &out.timeline)?;
                    }
                    write_report(&report, out_dir.as_deref())
                }
            }
        }
        Command::Fit { responses, method, output } => {
            let method = match method {
                Some(Method::LeastSquares) => FitMethod::LeastSquares,
                Some(Method::MaxLikelihood) => FitMethod::MaxLikelihood,
                None => cfg.fit.method,
            };
            let data = ResponseData::from_csv(BufReader::new(open(&responses)?))?;
            let f = fit_with(&data, method)?;
            eprintln!("50% threshold: {:.2} ms", f.threshold());
            emit(output.as_deref(), &serde_json::to_string_pretty(&f)?)
        }
        Command::Repro { target, trials } => {
            let report = match target {
                Target::Table1 => {
                    let h = HarnessConfig::table1();
                    repro::table1(&h, trials, cfg.seed)?
                }
                Target::Thresholds => repro::thresholds(cfg.fit.method)?,
            };
            print!("{report}");
            if !report.pass() {
                return Err(Exit(1, "simulated values outside tolerance".into()).into());
            }
            Ok(())
        }
        Command::DumpDefaults { .. } => unreachable!(),
    }
}

fn simulate_preset(
    preset: Preset,
    cfg: &Config,
    stream: &FrameStream,
    map: &RegionMap,
    bank: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let h = with_bank(Harness::new(stream, map, cfg.harness)?, bank)?;
    match preset {
        Preset::Table1 => {
            let mut records = Vec::new();
            for direction in [Direction::TurnOn, Direction::TurnOff] {
                let exp = CrossingExperiment { direction, ..cfg.crossing };
                records.extend(h.crossings(&exp)?.records);
            }
            write_report(&LatencyReport::from_records(records), out_dir)
        }
        Preset::Sweep => {
            let rows = h.sweep_delays(&cfg.crossing, &cfg.sweep.delays_ms, cfg.sweep.policy)?;
            let json = serde_json::to_string_pretty(&rows)?;
            match out_dir {
                Some(dir) => {
                    fs::create_dir_all(dir)?;
                    emit(Some(&dir.join("sweep.json")), &json)
                }
                None => emit(None, &json),
            }
        }
    }
}

fn write_report(report: &LatencyReport, out_dir: Option<&Path>) -> Result<()> {
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            emit(Some(&dir.join("report.json")), &report.to_json()?)?;
            report.write_csv(BufWriter::new(create(&dir.join("records.csv"))?))?;
        }
        None => emit(None, &report.to_json()?)?,
    }
    for s in &report.summaries {
        eprintln!(
            "{:?}: {} transitions, {} missed, max T_total {:.2} ms, max T_recv {:.2} ms",
            s.direction, s.count, s.missed, s.t_total_ms.max, s.t_recv_ms.max
        );
    }
    Ok(())
}

fn with_bank<'a>(h: Harness<'a>, dir: Option<&Path>) -> Result<Harness<'a>> {
    Ok(match dir {
        Some(d) => h.with_bank(load_bank(d)?),
        None => h,
    })
}

fn stimulus_map(palette: &Palette) -> Result<RegionMap> {
    let index = |c: Srgb8, name: &str| {
        palette
            .colors
            .iter()
            .position(|&p| p == c)
            .ok_or_else(|| anyhow!("palette has no {name} {:?} for the stimulus", c.to_array()))
    };
    Ok(RegionMap::latency_stimulus(
        index(Srgb8::gray(128), "gray")?,
        index(Srgb8::new(80, 176, 80), "green")?,
    ))
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
}

fn open(p: &Path) -> Result<File> {
    File::open(p).with_context(|| format!("cannot open {}", p.display()))
}

fn create(p: &Path) -> Result<File> {
    File::create(p).with_context(|| format!("cannot create {}", p.display()))
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                out.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}
