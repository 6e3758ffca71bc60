//! `navcli`: offline trajectory analysis, fiducial registration, tracker
//! simulation and the live navigation server.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 network error.

mod analyze;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scopenav_core::geometry::{write_obj, DEFAULT_THRESHOLD};
use scopenav_core::registration::{read_fiducial_pairs, solve_rigid};
use scopenav_core::volume::load_nrrd;
use scopenav_live::protocol::PlaneRequest;
use scopenav_live::server::render_slice;
use scopenav_live::sim::{self, Endpoint, SimMode, SimScenario};
use scopenav_live::{start_session, SessionConfig};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Network(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Network(_) => 4,
        }
    }
}

fn data(e: impl ToString) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser)]
#[command(name = "navcli", version, about = "Tracked scope navigation tools")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Machine,
}

#[derive(Subcommand)]
enum Cmd {
    /// Outlier fraction, hull volume and path length per trajectory or session
    Analyze {
        /// Trajectory CSV files or exported session directories
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// `baseline:treatment`, naming two of the inputs; repeatable
        #[arg(long)]
        pair: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Solve the tracker to CT transform from a fiducial pair file
    Register {
        pairs: PathBuf,
        /// Matrix output; stdout when absent
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Stream a replayed or synthetic trajectory over OpenIGTLink
    Simulate(SimulateArgs),
    /// Run the navigation server until interrupted, then export the session
    Serve(ServeArgs),
    /// Extract a CT slice as a windowed PNG with a JSON geometry sidecar
    Slice(SliceArgs),
    /// Accept one tracker connection and write its poses to a trajectory CSV
    Record {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = scopenav_core::igtl::DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Write the built-in phantom surface as OBJ
    Phantom {
        #[arg(long, short)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML; defaults to a synthetic path in the built-in phantom
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = scopenav_core::igtl::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Wait for the receiver to connect instead of dialing out
    #[arg(long)]
    listen: bool,
    /// Replay this trajectory CSV
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Synthesize inside this OBJ mesh
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    waypoints: Option<usize>,
    #[arg(long)]
    max_samples: Option<usize>,
    #[arg(long)]
    rate_hz: Option<f64>,
    #[arg(long)]
    noise_sigma_mm: Option<f64>,
    #[arg(long)]
    dropout_prob: Option<f64>,
    #[arg(long)]
    time_scale: Option<f64>,
}

#[derive(Args)]
struct ServeArgs {
    /// Session config TOML
    #[arg(long)]
    config: Option<PathBuf>,
    /// OpenIGTLink listen port
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    viewer_port: Option<u16>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    session_root: Option<PathBuf>,
    #[arg(long)]
    anatomy_mesh: Option<PathBuf>,
    #[arg(long)]
    collecting_system_mesh: Option<PathBuf>,
    #[arg(long)]
    volume: Option<PathBuf>,
    #[arg(long)]
    ct_fiducials: Option<PathBuf>,
    #[arg(long)]
    decimation_mm: Option<f64>,
    #[arg(long)]
    trail_capacity: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    metrics_interval_ms: Option<u64>,
}

#[derive(Args)]
struct SliceArgs {
    volume: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
    /// Axis-aligned slice: axis 0, 1 or 2 (with --index)
    #[arg(long, requires = "index", conflicts_with = "origin")]
    axis: Option<usize>,
    #[arg(long)]
    index: Option<usize>,
    /// Oblique plane origin `x,y,z` (with --u, --v, --size)
    #[arg(long, value_parser = parse_vec3, requires_all = ["u", "v", "size"])]
    origin: Option<[f64; 3]>,
    #[arg(long, value_parser = parse_vec3)]
    u: Option<[f64; 3]>,
    #[arg(long, value_parser = parse_vec3)]
    v: Option<[f64; 3]>,
    /// Pixels, `WIDTHxHEIGHT`
    #[arg(long, value_parser = parse_size)]
    size: Option<[usize; 2]>,
    /// Pixel spacing in mm, `du,dv`
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    spacing: [f64; 2],
    #[arg(long, default_value_t = 400.0)]
    window: f64,
    #[arg(long, default_value_t = 40.0)]
    level: f64,
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers"));
    }
    Ok(v)
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let v = parse_floats(s, 3)?;
    Ok([v[0], v[1], v[2]])
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v = parse_floats(s, 2)?;
    Ok([v[0], v[1]])
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let p = |x: &str| x.parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok([p(w)?, p(h)?])
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprintln!("navcli: missing subcommand, see `navcli --help`");
                return ExitCode::from(2);
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            eprintln!("navcli: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("navcli: {msg}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Analyze {
            inputs,
            threshold,
            pair,
            format,
        } => cmd_analyze(&inputs, threshold, &pair, format),
        Cmd::Register { pairs, output } => cmd_register(&pairs, output.as_deref()),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Serve(args) => cmd_serve(args),
        Cmd::Slice(args) => cmd_slice(args),
        Cmd::Record { output, port, host } => {
            let endpoint = Endpoint::listen(&format!("{host}:{port}")).map_err(|e| CliError::Network(e.to_string()))?;
            let traj = sim::record(endpoint, &output).map_err(|e| match e.is_network() {
                true => CliError::Network(e.to_string()),
                false => data(e),
            })?;
            println!("recorded={} output={}", traj.len(), output.display());
            Ok(())
        }
        Cmd::Phantom { output } => {
            let mut f = File::create(&output).map_err(|e| data(format!("{}: {e}", output.display())))?;
            write_obj(&mut f, &sim::phantom_mesh()).map_err(|e| data(format!("{}: {e}", output.display())))
        }
    }
}

fn write_stdout(text: &str) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(data)
}

fn cmd_analyze(inputs: &[String], threshold: f64, pairs: &[String], format: Format) -> Result<(), CliError> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(CliError::Usage(format!("--threshold must be positive, got {threshold}")));
    }
    let index_of = |name: &str| {
        inputs
            .iter()
            .position(|i| i == name)
            .ok_or_else(|| CliError::Usage(format!("--pair names {name:?}, which is not an input")))
    };
    let pair_idx = pairs
        .iter()
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("--pair {p:?} is not baseline:treatment")))?;
            Ok((index_of(a)?, index_of(b)?))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let files = inputs.iter().map(|i| analyze::analyze_input(i, threshold)).collect();
    let report = analyze::build_report(threshold, files, &pair_idx);
    let text = match format {
        Format::Table => analyze::format_table(&report),
        Format::Machine => analyze::format_machine(&report),
    };
    write_stdout(&text)?;
    let failed: Vec<_> = report.failed().collect();
    match failed.as_slice() {
        [] => Ok(()),
        [one] => Err(data(one.error.clone().unwrap_or_default())),
        many => Err(data(format!(
            "{} of {} inputs failed, first: {}",
            many.len(),
            report.files.len(),
            many[0].error.clone().unwrap_or_default()
        ))),
    }
}

fn cmd_register(pairs: &Path, output: Option<&Path>) -> Result<(), CliError> {
    let f = File::open(pairs).map_err(|e| data(format!("{}: {e}", pairs.display())))?;
    let pairs_list = read_fiducial_pairs(BufReader::new(f)).map_err(|e| data(format!("{}: {e}", pairs.display())))?;
    let result = solve_rigid(&pairs_list).map_err(data)?;
    let matrix = result.transform.to_matrix_text();
    let mut report = String::new();
    match output {
        Some(path) => {
            std::fs::write(path, &matrix).map_err(|e| data(format!("{}: {e}", path.display())))?;
            report.push_str(&format!("matrix={}\n", path.display()));
        }
        None => report.push_str(&matrix),
    }
    report.push_str(&format!("fre_mm={}\n", result.fre));
    for (p, r) in pairs_list.iter().zip(&result.per_point_residuals) {
        report.push_str(&format!("residual_mm {}={}\n", p.label, r));
    }
    write_stdout(&report)
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut s = match &args.scenario {
        Some(p) => SimScenario::load(p).map_err(data)?,
        None => SimScenario::default(),
    };
    if let Some(t) = args.trajectory {
        s.mode = SimMode::Replay;
        s.trajectory = Some(t);
    }
    if let Some(m) = args.mesh {
        s.mode = SimMode::Synthetic;
        s.mesh = Some(m);
    }
    s.seed = args.seed.unwrap_or(s.seed);
    s.n_waypoints = args.waypoints.unwrap_or(s.n_waypoints);
    s.max_samples = args.max_samples.or(s.max_samples);
    s.rate_hz = args.rate_hz.unwrap_or(s.rate_hz);
    s.noise_sigma_mm = args.noise_sigma_mm.unwrap_or(s.noise_sigma_mm);
    s.dropout_prob = args.dropout_prob.unwrap_or(s.dropout_prob);
    s.time_scale = args.time_scale.unwrap_or(s.time_scale);
    s.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let traj = s.build_trajectory().map_err(data)?;
    let addr = format!("{}:{}", args.host, args.port);
    let endpoint = match args.listen {
        true => Endpoint::listen(&addr).map_err(|e| CliError::Network(e.to_string()))?,
        false => Endpoint::Connect(addr),
    };
    let summary = sim::stream(&traj, &s.stream_options(), endpoint).map_err(|e| match e.is_network() {
        true => CliError::Network(e.to_string()),
        false => data(e),
    })?;
    write_stdout(&format!("sent={} dropped={}\n", summary.sent, summary.dropped))
}

fn serve_config(args: &ServeArgs) -> Result<SessionConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => SessionConfig::load(p).map_err(data)?,
        None => SessionConfig::default(),
    };
    macro_rules! set {
        ($($field:ident <- $arg:expr),* $(,)?) => {
            $(if let Some(v) = $arg.clone() { cfg.$field = v; })*
        };
    }
    set!(
        igtl_port <- args.port,
        viewer_port <- args.viewer_port,
        bind <- args.bind,
        session_root <- args.session_root,
        decimation_mm <- args.decimation_mm,
        trail_capacity <- args.trail_capacity,
        threshold <- args.threshold,
        metrics_interval_ms <- args.metrics_interval_ms,
    );
    macro_rules! set_opt {
        ($($field:ident <- $arg:expr),* $(,)?) => {
            $(if let Some(v) = $arg.clone() { cfg.$field = Some(v); })*
        };
    }
    set_opt!(
        anatomy_mesh <- args.anatomy_mesh,
        collecting_system_mesh <- args.collecting_system_mesh,
        volume <- args.volume,
        ct_fiducials <- args.ct_fiducials,
    );
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    let cfg = serve_config(&args)?;
    let rt = tokio::runtime::Runtime::new().map_err(data)?;
    rt.block_on(async move {
        let handle = start_session(cfg).await.map_err(|e| match e.is_network() {
            true => CliError::Network(e.to_string()),
            false => data(e),
        })?;
        write_stdout(&format!(
            "session_id={}\nsession_dir={}\nigtl={}\nviewer={}\n",
            handle.session_id,
            handle.session_dir.display(),
            handle.igtl_addr,
            handle.viewer_addr
        ))?;
        wait_for_signal().await;
        let summary = handle.shutdown().await.map_err(data)?;
        let metrics = serde_json::to_string(&summary.metrics).expect("metrics serialize");
        write_stdout(&format!("exported samples={} metrics={metrics}\n", summary.sample_count))
    })
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

#[derive(Serialize)]
struct SliceSidecar {
    image: String,
    content_id: String,
    window: f64,
    level: f64,
    geometry: scopenav_core::volume::SliceGeometry,
}

fn cmd_slice(args: SliceArgs) -> Result<(), CliError> {
    let plane = match (args.axis, args.index, args.origin, args.u, args.v, args.size) {
        (Some(axis), Some(index), None, ..) => PlaneRequest::Axis { axis, index },
        (None, _, Some(origin), Some(u), Some(v), Some([width, height])) => PlaneRequest::Oblique {
            origin,
            u,
            v,
            width,
            height,
            spacing: args.spacing,
        },
        _ => return Err(CliError::Usage("give --axis/--index or --origin/--u/--v/--size".into())),
    };
    let vol = load_nrrd(&args.volume).map_err(|e| data(format!("{}: {e}", args.volume.display())))?;
    let r = render_slice(&vol, &plane, args.window, args.level).map_err(data)?;
    std::fs::write(&args.output, &r.png).map_err(|e| data(format!("{}: {e}", args.output.display())))?;
    let sidecar_path = args.output.with_extension("json");
    let sidecar = SliceSidecar {
        image: args.output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        content_id: r.content_id.clone(),
        window: args.window,
        level: args.level,
        geometry: r.geometry,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    std::fs::write(&sidecar_path, json).map_err(|e| data(format!("{}: {e}", sidecar_path.display())))?;
    write_stdout(&format!(
        "slice={} sidecar={} content_id={}\n",
        args.output.display(),
        sidecar_path.display(),
        r.content_id
    ))
}
