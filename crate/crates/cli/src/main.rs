//! Command-line front end: simulation, selection, chain fitting, the causal
//! pipeline and report rendering.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use stcausal_core::causal::{fit_pre_period, CausalConfig, ModelArm};
use stcausal_core::emvs::v0_grid_scan;
use stcausal_core::experiments::{replicate_ks_table, replicate_table2, write_ks_table, write_table2};
use stcausal_core::io::{self, GraphSource};
use stcausal_core::{full_causal_pipeline, generate_panel, Error, SimConfig, TimeSeriesPanel};

#[derive(Parser)]
#[command(name = "stcausal", version, about = "Causal impact on panels of related time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated panel and optionally run the replication experiments.
    Simulate(SimulateArgs),
    /// Spike-and-slab selection path over the v0 grid on the pre-period.
    Select(SelectArgs),
    /// Posterior chain on the pre-period.
    Fit(FitArgs),
    /// Counterfactuals, re-fits and both causal estimands.
    Causal(CausalArgs),
    /// Per-horizon counts, plot data and difference summary from a report.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Run the difference-estimand table for this arm.
    #[arg(long, value_parser = parse_arm)]
    arm: Option<ModelArm>,
    /// Run the KS table (counterfactual re-fits).
    #[arg(long)]
    ks: bool,
    /// Run configuration supplying the model settings for the experiments.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated spike variances.
    #[arg(long, value_delimiter = ',')]
    v0_grid: Option<Vec<f64>>,
    #[arg(long)]
    v1: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    out_path_table: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CausalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the counterfactual re-fits.
    #[arg(long)]
    difference_only: bool,
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_arm(s: &str) -> Result<ModelArm, String> {
    match s {
        "multivariate_stationary" => Ok(ModelArm::MultivariateStationary),
        "multivariate_nonstationary" => Ok(ModelArm::MultivariateNonstationary),
        "univariate" => Ok(ModelArm::Univariate),
        _ => Err(format!("unknown arm {s:?}")),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    panel: PathBuf,
    /// First timestamp of the causal window.
    causal_start: String,
    edges: Option<PathBuf>,
    coordinates: Option<PathBuf>,
    distance_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    output_dir: PathBuf,
    data: DataConfig,
    causal: CausalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            causal: CausalConfig::default(),
        }
    }
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid configuration: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Loaded configuration with data paths resolved against the config file.
struct Loaded {
    config: RunConfig,
    base: PathBuf,
}

impl Loaded {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.path(&self.config.output_dir)
    }
}

fn load_config(path: &Path) -> CliResult<Loaded> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let config: RunConfig =
        toml::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

fn validate(loaded: &Loaded, needs_data: bool) -> CliResult<()> {
    let c = &loaded.config;
    c.causal.validate()?;
    if !needs_data {
        return Ok(());
    }
    let d = &c.data;
    let mut files = vec![&d.panel];
    files.extend(d.edges.iter());
    files.extend(d.coordinates.iter());
    for f in files {
        if !loaded.path(f).is_file() {
            return Err(Failure::Validation(format!("file {} does not exist", f.display())));
        }
    }
    if d.causal_start.is_empty() {
        return Err(Failure::Validation("data.causal_start is required".into()));
    }
    if d.edges.is_some() && d.coordinates.is_some() {
        return Err(Failure::Validation("give either data.edges or data.coordinates".into()));
    }
    if d.coordinates.is_some() && !d.distance_threshold.is_some_and(|t| t > 0.0) {
        return Err(Failure::Validation("data.coordinates needs a positive data.distance_threshold".into()));
    }
    Ok(())
}

fn load_panel(loaded: &Loaded) -> CliResult<io::Ingested> {
    let d = &loaded.config.data;
    let source = if let Some(e) = &d.edges {
        GraphSource::Edges(io::read_edges(File::open(loaded.path(e))?)?)
    } else if let Some(c) = &d.coordinates {
        GraphSource::Coordinates {
            points: io::read_coordinates(File::open(loaded.path(c))?)?,
            threshold: d.distance_threshold.unwrap_or_default(),
        }
    } else {
        GraphSource::Region
    };
    let file = BufReader::new(File::open(loaded.path(&d.panel))?);
    Ok(io::read_panel(file, &d.causal_start, &source)?)
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

#[derive(Serialize)]
struct StoreSummary<'a> {
    store_id: &'a str,
    selected_controls: &'a [String],
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
    dropped_stores: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stores: Vec<StoreSummary<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phi_acceptance: Option<f64>,
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> CliResult<()> {
    let mut w = create(dir, &format!("manifest_{}.json", manifest.command))?;
    serde_json::to_writer_pretty(&mut w, manifest).map_err(|e| Failure::Core(Error::Io(e.into())))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn manifest<'a>(command: &'a str, seed: u64, config: &'a RunConfig) -> Manifest<'a> {
    Manifest {
        command,
        seed,
        config,
        outputs: Vec::new(),
        dropped_stores: Vec::new(),
        stores: Vec::new(),
        phi_acceptance: None,
    }
}

fn simulate(args: SimulateArgs) -> CliResult<()> {
    let mut config = match &args.config {
        Some(p) => {
            let l = load_config(p)?;
            validate(&l, false)?;
            l.config
        }
        None => RunConfig::default(),
    };
    let sim = SimConfig::default();
    let data = generate_panel(&sim, args.seed)?;
    let out = &args.out;
    let p = &data.panel;
    let mut outputs = Vec::new();

    let mut w = create(out, "panel.csv")?;
    io::write_panel(p, &mut w)?;
    w.flush()?;
    let mut w = create(out, "edges.csv")?;
    io::write_edges(p, &mut w)?;
    w.flush()?;
    write_truth(p, &data.truth, &mut create(out, "truth.csv")?)?;
    outputs.extend(["panel.csv", "edges.csv", "truth.csv"].map(String::from));

    config.seed = args.seed;
    config.output_dir = PathBuf::from(".");
    config.data = DataConfig {
        panel: "panel.csv".into(),
        causal_start: io::format_timestamp(p.timestamps[p.causal_start], p.time_format),
        edges: Some("edges.csv".into()),
        coordinates: None,
        distance_threshold: None,
    };
    let toml_text = toml::to_string(&config).map_err(|e| Failure::Validation(e.to_string()))?;
    create(out, "run.toml")?.write_all(toml_text.as_bytes())?;
    outputs.push("run.toml".into());

    if let Some(arm) = args.arm {
        let rows = replicate_table2(&sim, &config.causal, arm, args.seed)?;
        let name = format!("table2_{}.csv", arm_name(arm));
        let mut w = create(out, &name)?;
        write_table2(arm, &rows, &mut w)?;
        w.flush()?;
        outputs.push(name);
    }
    if args.ks {
        let cfg = CausalConfig {
            difference_only: false,
            ..config.causal.clone()
        };
        let (table, rows) = replicate_ks_table(&sim, &cfg, args.seed)?;
        let mut w = create(out, "ks_table.csv")?;
        write_ks_table(&rows, &mut w)?;
        w.flush()?;
        let mut w = create(out, "ks_difference.csv")?;
        write_table2(cfg.arm, &table, &mut w)?;
        w.flush()?;
        outputs.extend(["ks_table.csv", "ks_difference.csv"].map(String::from));
    }
    let mut m = manifest("simulate", args.seed, &config);
    m.outputs = outputs;
    write_manifest(out, &m)
}

fn arm_name(arm: ModelArm) -> &'static str {
    match arm {
        ModelArm::MultivariateStationary => "multivariate_stationary",
        ModelArm::MultivariateNonstationary => "multivariate_nonstationary",
        ModelArm::Univariate => "univariate",
    }
}

fn write_truth<W: Write>(p: &TimeSeriesPanel, t: &stcausal_core::sim::GroundTruth, w: &mut W) -> CliResult<()> {
    writeln!(w, "store_id,timestamp,trend,seasonal,regression,noise,impact")?;
    for i in 0..p.n_series() {
        for k in 0..p.n_time() {
            let vals = [t.trend[(i, k)], t.seasonal[(i, k)], t.regression[(i, k)], t.noise[(i, k)], t.impact[(i, k)]];
            let vals: Vec<String> = vals.iter().map(|&v| io::fmt_num(v)).collect();
            writeln!(
                w,
                "{},{},{}",
                p.store_ids[i],
                io::format_timestamp(p.timestamps[k], p.time_format),
                vals.join(",")
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn split_out(path: Option<PathBuf>, default_dir: PathBuf, default_name: &str) -> (PathBuf, String) {
    match path {
        Some(p) => {
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| default_name.into());
            (dir, name)
        }
        None => (default_dir, default_name.into()),
    }
}

fn select(args: SelectArgs) -> CliResult<()> {
    let mut loaded = load_config(&args.config)?;
    {
        let e = &mut loaded.config.causal.emvs;
        if let Some(g) = args.v0_grid {
            e.v0_grid = g;
        }
        if let Some(v1) = args.v1 {
            e.v1 = v1;
        }
        if let Some(s) = args.temperature {
            e.temperature = s;
        }
    }
    validate(&loaded, true)?;
    let ingested = load_panel(&loaded)?;
    let panel = &ingested.panel;
    let c = &loaded.config.causal;
    let problem = c.hyper.emvs_problem(c.arm, c.seasonal_period, panel.n_series(), &c.emvs);
    let path = v0_grid_scan(&panel.pre_period(), &problem, true)?;
    let (dir, name) = split_out(args.out_path_table, loaded.out_dir(), "path.csv");
    let mut w = create(&dir, &name)?;
    io::write_path_table(panel, &path, &mut w)?;
    w.flush()?;
    let mut m = manifest("select", loaded.config.seed, &loaded.config);
    m.outputs = vec![name];
    m.dropped_stores = ingested.dropped.clone();
    write_manifest(&dir, &m)
}

fn fit(args: FitArgs) -> CliResult<()> {
    let mut loaded = load_config(&args.config)?;
    {
        let c = &mut loaded.config;
        if let Some(n) = args.iters {
            c.causal.mcmc.n_iters = n;
        }
        if let Some(b) = args.burnin {
            c.causal.mcmc.n_burnin = b;
        }
        if let Some(s) = args.seed {
            c.seed = s;
        }
    }
    validate(&loaded, true)?;
    let ingested = load_panel(&loaded)?;
    let c = &loaded.config;
    let (_, fits) = fit_pre_period(&ingested.panel, &c.causal, c.seed)?;
    let dir = args.out.unwrap_or_else(|| loaded.out_dir());
    let mut outputs = Vec::new();
    let single = fits.len() == 1;
    for f in &fits {
        let suffix = if single { String::new() } else { format!("_{}", f.store_ids[0]) };
        let traces = format!("traces{suffix}.csv");
        let diag = format!("diagnostics{suffix}.csv");
        let mut w = create(&dir, &traces)?;
        io::write_traces(&f.draws, &mut w)?;
        w.flush()?;
        let mut w = create(&dir, &diag)?;
        io::write_diagnostics(&f.draws, &mut w)?;
        w.flush()?;
        outputs.extend([traces, diag]);
    }
    let mut m = manifest("fit", c.seed, c);
    m.outputs = outputs;
    m.dropped_stores = ingested.dropped.clone();
    m.phi_acceptance = fits.first().and_then(|f| f.draws.phi_acceptance());
    write_manifest(&dir, &m)
}

fn causal(args: CausalArgs) -> CliResult<()> {
    let mut loaded = load_config(&args.config)?;
    {
        let c = &mut loaded.config;
        if let Some(k) = args.k {
            c.causal.k = k;
        }
        if let Some(q) = args.percentile {
            c.causal.percentile = q;
        }
        if let Some(s) = args.seed {
            c.seed = s;
        }
        if args.difference_only {
            c.causal.difference_only = true;
        }
    }
    validate(&loaded, true)?;
    let ingested = load_panel(&loaded)?;
    let c = &loaded.config;
    let report = full_causal_pipeline(&ingested.panel, &c.causal, c.seed)?;
    let (dir, name) = split_out(args.out_report, loaded.out_dir(), "report.csv");
    let mut w = create(&dir, &name)?;
    io::write_report(&report, &mut w)?;
    w.flush()?;
    let mut m = manifest("causal", c.seed, c);
    m.outputs = vec![name];
    m.dropped_stores = ingested.dropped.iter().chain(&report.dropped).cloned().collect();
    m.stores = report
        .stores
        .iter()
        .map(|s| StoreSummary {
            store_id: &s.store_id,
            selected_controls: &s.selected_controls,
        })
        .collect();
    m.phi_acceptance = report.phi_acceptance;
    write_manifest(&dir, &m)
}

fn report(args: ReportArgs) -> CliResult<()> {
    let rows = io::read_report(BufReader::new(File::open(&args.report)?))?;
    let out = &args.out;
    let mut w = create(out, "counts.csv")?;
    io::write_counts(&rows, &mut w)?;
    w.flush()?;
    let mut w = create(out, "plot_data.csv")?;
    io::write_plot_data(&rows, &mut w)?;
    w.flush()?;
    let mut w = create(out, "difference.csv")?;
    io::write_difference_summary(&rows, &mut w)?;
    w.flush()?;
    let config = RunConfig::default();
    let mut m = manifest("report", 0, &config);
    m.outputs = ["counts.csv", "plot_data.csv", "difference.csv"].map(String::from).to_vec();
    write_manifest(out, &m)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Select(a) => select(a),
        Command::Fit(a) => fit(a),
        Command::Causal(a) => causal(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
