//! The `prio` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::bank::{bank_from_json, bank_to_json, build_bank, PriorBank};
use crate::config::{RunConfig, SEED_ENV};
use crate::error::PrioError;
use crate::gradcheck::{render_summary, run_gradcheck};
use crate::kitti_io::{load_feature_file, load_query_file, read_label_dir};
use crate::metrics::{read_pairs, write_pairs, MetricsReport};
use crate::params::ModelParams;
use crate::routing::{route, Query, RoutedPrior, RoutingParams};
use crate::sizepath::HeadParams;
use crate::toy::{prepare_seed, run_suite, train_head, evaluate_run, Mode, RunRecord, ToySetup};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "prio", version, about = "Size-prior banks, routing, conditioning and toy experiments")]
struct Cli {
    /// Cap the worker threads used by parallel stages.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Override a config key, e.g. --set toy.epochs=20 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a prior bank from KITTI label files and a feature file.
    BuildBank(BuildBankArgs),
    /// Print the classes, slices and prototypes of a bank file.
    InspectBank(InspectArgs),
    /// Route a query file against a bank and write the mixture priors.
    Route(RouteArgs),
    /// Compare analytic size-path gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Size metrics of a matched-pair file.
    Metrics(MetricsArgs),
    /// Synthetic size-ambiguity experiments.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Write randomly initialised head and routing parameters.
    InitParams(InitParamsArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed; takes precedence over PRIO_SEED and the config file.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct BuildBankArgs {
    /// Directory of KITTI label .txt files.
    #[arg(long, value_name = "DIR")]
    labels: PathBuf,
    /// PRIOFEAT feature file keyed by instance key.
    #[arg(long, value_name = "FILE")]
    features: PathBuf,
    #[command(flatten)]
    cfg: ConfigArg,
    /// Output bank file (JSON).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Bank file.
    bank: PathBuf,
    /// Only show this class.
    #[arg(long, value_name = "NAME")]
    class: Option<String>,
}

#[derive(Args, Debug)]
struct RouteArgs {
    #[arg(long, value_name = "FILE")]
    bank: PathBuf,
    /// PRIOFEAT query file: key, query vector, class probabilities.
    #[arg(long, value_name = "FILE")]
    queries: PathBuf,
    /// Parameter file holding a routing block.
    #[arg(long, value_name = "FILE")]
    params: PathBuf,
    /// Output JSON file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Number of random problems (overrides gradcheck.trials).
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Tab-separated matched-pair file.
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,
    /// Outlier threshold on the mean relative error.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_TAU)]
    tau: f64,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Comma-separated seeds; defaults to the resolved global seed, else 0.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory (overrides output_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Double lambda0 and lambda_cap.
    #[arg(long)]
    strong_prior: bool,
}

#[derive(Args, Debug)]
struct ToyModeArgs {
    #[command(flatten)]
    common: ToyArgs,
    /// baseline, inject or inject_cap.
    #[arg(long, value_name = "M")]
    mode: Mode,
}

#[derive(Subcommand, Debug)]
enum ToyCommand {
    /// Train one mode per seed and write parameters and loss histories.
    Train(ToyModeArgs),
    /// Evaluate parameters written by `toy train`.
    Eval(ToyModeArgs),
    /// Train and evaluate every mode over every seed and report medians.
    Suite(ToyArgs),
}

#[derive(Args, Debug)]
struct InitParamsArgs {
    #[arg(long, value_name = "N")]
    query_dim: usize,
    /// Feature dimension; taken from --bank when omitted.
    #[arg(long, value_name = "N")]
    feature_dim: Option<usize>,
    #[arg(long, value_name = "FILE")]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = crate::routing::ROUTING_WIDTH)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

/// A failure tagged with the subcommand and, when known, the file involved.
#[derive(Debug)]
struct Failure {
    command: &'static str,
    file: Option<PathBuf>,
    error: PrioError,
    code: i32,
}

impl Failure {
    fn new(command: &'static str, file: Option<&Path>, error: PrioError) -> Self {
        Failure {
            command,
            file: file.map(Path::to_path_buf),
            error,
            code: EXIT_INVALID,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "prio {}: ", self.command)?;
        match (&self.file, &self.error) {
            // Io errors already carry their path.
            (Some(p), e) if !matches!(e, PrioError::Io { .. }) => write!(f, "{}: {e}", p.display()),
            (_, e) => write!(f, "{e}"),
        }
    }
}

type CmdResult = std::result::Result<String, Failure>;

/// Attaches context to a library result.
trait Ctx<T> {
    fn ctx(self, command: &'static str, file: Option<&Path>) -> std::result::Result<T, Failure>;
}

impl<T> Ctx<T> for crate::Result<T> {
    fn ctx(self, command: &'static str, file: Option<&Path>) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::new(command, file, e))
    }
}

fn read_text(command: &'static str, path: &Path) -> std::result::Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new(command, Some(path), PrioError::io(path, e)))
}

fn read_bytes(command: &'static str, path: &Path) -> std::result::Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::new(command, Some(path), PrioError::io(path, e)))
}

fn write_file(command: &'static str, path: &Path, data: impl AsRef<[u8]>) -> std::result::Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new(command, Some(dir), PrioError::io(dir, e)))?;
    }
    std::fs::write(path, data).map_err(|e| Failure::new(command, Some(path), PrioError::io(path, e)))
}

fn load_config(command: &'static str, args: &ConfigArg, overrides: &[String]) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(args.config.as_deref(), overrides).ctx(command, args.config.as_deref())?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(args.seed, env.as_deref()).ctx(command, None)?;
    Ok(cfg)
}

fn load_bank(command: &'static str, path: &Path) -> std::result::Result<PriorBank, Failure> {
    bank_from_json(&read_text(command, path)?).ctx(command, Some(path))
}

fn help_text() -> String {
    format!(
        "Configuration keys (TOML; every key is optional, defaults shown):\n\n{}\n\
         Seed precedence: --seed, then the {SEED_ENV} environment variable, then `seed` in the file.\n\
         Exit codes: 0 success, 1 invalid input or configuration, 2 gradient check failed.",
        RunConfig::default().to_toml()
    )
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let command = Cli::command().after_long_help(help_text());
    let cli = match command.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("prio: --threads must be at least 1");
            return EXIT_INVALID;
        }
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("{f}");
            f.code
        }
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    let ov = &cli.overrides;
    match cli.command {
        Command::BuildBank(a) => build_bank_cmd(a, ov),
        Command::InspectBank(a) => inspect_bank_cmd(a),
        Command::Route(a) => route_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a, ov),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Toy(ToyCommand::Train(a)) => toy_train_cmd(a, ov),
        Command::Toy(ToyCommand::Eval(a)) => toy_eval_cmd(a, ov),
        Command::Toy(ToyCommand::Suite(a)) => toy_suite_cmd(a, ov),
        Command::InitParams(a) => init_params_cmd(a),
    }
}

fn build_bank_cmd(a: BuildBankArgs, ov: &[String]) -> CmdResult {
    const C: &str = "build-bank";
    let cfg = load_config(C, &a.cfg, ov)?;
    let labels = read_label_dir(&a.labels).ctx(C, Some(&a.labels))?;
    let features = load_feature_file(&read_bytes(C, &a.features)?).ctx(C, Some(&a.features))?;
    let bank = build_bank(&labels, &features, &cfg.thresholds(), &cfg.bank).ctx(C, Some(&a.labels))?;
    write_file(C, &a.out, bank_to_json(&bank))?;
    Ok(format!(
        "wrote {} ({} classes, {} prototypes)\n",
        a.out.display(),
        bank.num_classes(),
        bank.len()
    ))
}

fn fmt3(v: [f64; 3]) -> String {
    format!("{:.4} {:.4} {:.4}", v[0], v[1], v[2])
}

fn inspect_bank_cmd(a: InspectArgs) -> CmdResult {
    const C: &str = "inspect-bank";
    let bank = load_bank(C, &a.bank)?;
    let mut out = String::new();
    let _ = writeln!(out, "bank: {} classes, {} prototypes, feature dim {}", bank.num_classes(), bank.len(), bank.feature_dim());
    let _ = writeln!(out, "classes: {}", bank.classes().join(", "));
    let wanted = match &a.class {
        Some(name) => vec![bank.class_index(name).ok_or_else(|| {
            Failure::new(C, Some(&a.bank), PrioError::validation("--class", format!("{name:?} is not in the bank")))
        })?],
        None => (0..bank.num_classes()).collect(),
    };
    for c in wanted {
        let slice = bank.slice(c);
        let _ = writeln!(out, "\n{} slice {}..{} ({} prototypes)", bank.classes()[c], slice.start, slice.end, slice.len());
        let _ = writeln!(out, "{:>5} {:>6}  {:<26} {:<26}", "k", "count", "mu (h w l)", "sigma (h w l)");
        for k in slice {
            let p = &bank.prototypes()[k];
            let _ = writeln!(out, "{:>5} {:>6}  {:<26} {:<26}", k, p.count, fmt3(p.mu_lin), fmt3(p.sigma_lin));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct RouteRow {
    key: u64,
    #[serde(flatten)]
    prior: RoutedPrior,
}

fn route_cmd(a: RouteArgs) -> CmdResult {
    const C: &str = "route";
    let bank = load_bank(C, &a.bank)?;
    let params = ModelParams::from_json(&read_text(C, &a.params)?).ctx(C, Some(&a.params))?;
    let routing = params.routing.ok_or_else(|| {
        Failure::new(C, Some(&a.params), PrioError::validation("routing", "the parameter file has no routing block"))
    })?;
    let queries = load_query_file(&read_bytes(C, &a.queries)?, bank.num_classes()).ctx(C, Some(&a.queries))?;
    let mut rows = Vec::with_capacity(queries.len());
    for rec in &queries {
        let q = Query {
            q: rec.q.iter().map(|&v| f64::from(v)).collect(),
            p: rec.p.iter().map(|&v| f64::from(v)).collect(),
        };
        let prior = route(&q, &routing, &bank)
            .map_err(|e| PrioError::validation(format!("query {}", rec.key), e.to_string()))
            .ctx(C, Some(&a.queries))?;
        rows.push(RouteRow { key: rec.key, prior });
    }
    let mut doc = serde_json::to_string_pretty(&rows).expect("routes serialise");
    doc.push('\n');
    write_file(C, &a.out, doc)?;
    Ok(format!("routed {} queries to {}\n", rows.len(), a.out.display()))
}

fn gradcheck_cmd(a: GradcheckArgs, ov: &[String]) -> CmdResult {
    const C: &str = "gradcheck";
    let mut cfg = load_config(C, &a.cfg, ov)?;
    if let Some(t) = a.trials {
        cfg.gradcheck.trials = t;
    }
    cfg.gradcheck.validate().ctx(C, a.cfg.config.as_deref())?;
    let summary = run_gradcheck(&cfg.gradcheck).ctx(C, None)?;
    if let Some(p) = &a.json {
        let mut doc = serde_json::to_string_pretty(&summary).expect("summary serialises");
        doc.push('\n');
        write_file(C, p, doc)?;
    }
    let text = render_summary(&summary);
    if summary.passed() {
        Ok(text)
    } else {
        print!("{text}");
        Err(Failure {
            command: C,
            file: None,
            error: PrioError::validation("gradient check", "tolerances exceeded"),
            code: EXIT_CHECK_FAILED,
        })
    }
}

fn metrics_cmd(a: MetricsArgs) -> CmdResult {
    const C: &str = "metrics";
    let name = a.pairs.display().to_string();
    let pairs = read_pairs(&read_text(C, &a.pairs)?, &name).ctx(C, None)?;
    let report = MetricsReport::from_pairs(&pairs, a.tau).ctx(C, Some(&a.pairs))?;
    if let Some(p) = &a.json {
        write_file(C, p, report.to_json())?;
    }
    Ok(report.render())
}

struct ToyRun {
    setup: ToySetup,
    seeds: Vec<u64>,
    out: PathBuf,
}

fn toy_run(command: &'static str, a: &ToyArgs, ov: &[String]) -> std::result::Result<ToyRun, Failure> {
    let cfg = load_config(command, &a.cfg, ov)?;
    let mut setup = cfg.toy_setup();
    if a.strong_prior {
        setup = setup.strong_prior();
    }
    setup.validate().ctx(command, a.cfg.config.as_deref())?;
    let seeds = if a.seeds.is_empty() { vec![cfg.seed.unwrap_or(0)] } else { a.seeds.clone() };
    let out = a.out.clone().unwrap_or(cfg.output_dir);
    Ok(ToyRun { setup, seeds, out })
}

fn params_path(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(format!("params_{mode}_seed{seed}.json"))
}

fn toy_train_cmd(a: ToyModeArgs, ov: &[String]) -> CmdResult {
    const C: &str = "toy train";
    let run = toy_run(C, &a.common, ov)?;
    let mut out = String::new();
    for &seed in &run.seeds {
        let data = prepare_seed(&run.setup, seed).ctx(C, None)?;
        let s = &run.setup;
        let o = train_head(&data.train, &data.bank, a.mode, &s.toy, &s.conditioning, &s.cap, seed).ctx(C, None)?;
        let params = ModelParams {
            head: Some(o.head.clone()),
            routing: o.routing.clone(),
        };
        let path = params_path(&run.out, a.mode, seed);
        write_file(C, &path, params.to_json())?;
        let mut hist = String::from("epoch\tloss\n");
        for (e, l) in o.loss_history.iter().enumerate() {
            let _ = writeln!(hist, "{e}\t{l}");
        }
        write_file(C, &run.out.join(format!("loss_{}_seed{seed}.tsv", a.mode)), hist)?;
        let _ = writeln!(
            out,
            "seed {seed} {}: final loss {:.6} -> {}",
            a.mode,
            o.loss_history.last().copied().unwrap_or(f64::NAN),
            path.display()
        );
    }
    Ok(out)
}

fn toy_eval_cmd(a: ToyModeArgs, ov: &[String]) -> CmdResult {
    const C: &str = "toy eval";
    let run = toy_run(C, &a.common, ov)?;
    let mut out = String::new();
    for &seed in &run.seeds {
        let data = prepare_seed(&run.setup, seed).ctx(C, None)?;
        let path = params_path(&run.out, a.mode, seed);
        let params = ModelParams::from_json(&read_text(C, &path)?).ctx(C, Some(&path))?;
        let head: HeadParams = params
            .head
            .ok_or_else(|| Failure::new(C, Some(&path), PrioError::validation("head", "missing")))?;
        let routing: Option<RoutingParams> = params.routing;
        if (a.mode == Mode::Baseline) != routing.is_none() {
            return Err(Failure::new(
                C,
                Some(&path),
                PrioError::validation("routing", format!("presence does not match mode {}", a.mode)),
            ));
        }
        let outcome = crate::toy::TrainOutcome {
            mode: a.mode,
            head,
            routing,
            loss_history: Vec::new(),
        };
        let s = &run.setup;
        let eval = evaluate_run(&data.val, &outcome, &data.bank, &s.toy, &s.conditioning, s.tau).ctx(C, Some(&path))?;
        let stem = format!("{}_seed{seed}", a.mode);
        write_file(C, &run.out.join(format!("pairs_{stem}.tsv")), write_pairs(&eval.pairs))?;
        write_file(C, &run.out.join(format!("report_{stem}.json")), eval.report.to_json())?;
        let record = RunRecord::from_eval(seed, &outcome, &eval);
        let _ = writeln!(out, "seed {seed} {}", a.mode);
        out.push_str(&eval.report.render());
        for m in &record.per_mask {
            let _ = writeln!(
                out,
                "mask {:.2}: size_mae {:.4} rel_mae {:.4} outlier {:.4}",
                m.mask, m.size_mae, m.rel_mae, m.outlier_ratio
            );
        }
    }
    Ok(out)
}

fn toy_suite_cmd(a: ToyArgs, ov: &[String]) -> CmdResult {
    const C: &str = "toy suite";
    let run = toy_run(C, &a, ov)?;
    let summary = run_suite(&run.setup, &run.seeds).ctx(C, None)?;
    let text = summary.render();
    write_file(C, &run.out.join("summary.txt"), &text)?;
    write_file(C, &run.out.join("summary.json"), summary.to_json())?;
    Ok(text)
}

fn init_params_cmd(a: InitParamsArgs) -> CmdResult {
    const C: &str = "init-params";
    let feature_dim = match (a.feature_dim, &a.bank) {
        (Some(d), _) => d,
        (None, Some(b)) => load_bank(C, b)?.feature_dim(),
        (None, None) => {
            return Err(Failure::new(
                C,
                None,
                PrioError::validation("--feature-dim", "give --feature-dim or --bank"),
            ))
        }
    };
    if a.query_dim == 0 || feature_dim == 0 || a.width == 0 {
        return Err(Failure::new(C, None, PrioError::validation("--query-dim", "dimensions must be positive")));
    }
    let params = ModelParams {
        head: Some(HeadParams::init(a.query_dim, crate::rng::derive_seed(a.seed, &[10]))),
        routing: Some(RoutingParams::init(a.query_dim, feature_dim, a.width, crate::rng::derive_seed(a.seed, &[11]))),
    };
    write_file(C, &a.out, params.to_json())?;
    Ok(format!("wrote {}\n", a.out.display()))
}
