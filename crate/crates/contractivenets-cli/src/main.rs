//! Operator surface: certify matrices, sample subnetworks, simulate and
//! measure contraction, train and evaluate composed networks.
//!
//! Exit codes: 0 success, 1 usage/IO error, 2 certification rejection,
//! 3 invariant violation during training.

mod config;

use clap::{Parser, Subcommand};
use config::RunConfig;
use contractivenets::certificates::{
    certify_abs, certify_svd_condition, certify_symmetric, certify_triangular,
    constant_metric_feasible, CertifyError, DSet, Feasibility,
};
use contractivenets::checkpoint::{self, Checkpoint, Seeds, TrainStatePayload};
use contractivenets::composition::CompositionError;
use contractivenets::dynamics::{
    contraction_rate, simulate, Activation, InputSequence, Method,
};
use contractivenets::numerics::{Diagonal, Matrix, Vector};
use contractivenets::rng::StreamRng;
use contractivenets::samplers::{
    estimate_acceptance_rate, sample_sparse_subnet_stream, SparseInitConfig,
};
use contractivenets::training::{
    self, evaluate, init_state, train_epoch, TrainError, TrainSetup, TrainState,
};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_REJECTED: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "contractivenets", version, about)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed override applied to every seeded section of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a weight matrix against the contraction conditions and write a
    /// certificate.
    Certify {
        /// Matrix file: CSV rows or a JSON array of arrays.
        matrix: PathBuf,
        /// Activation slope bound.
        #[arg(long, default_value_t = 1.0)]
        g: f64,
        /// Try one condition only: abs | symmetric | triangular | svd.
        #[arg(long)]
        theorem: Option<String>,
        /// Starting ε for the triangular-metric search.
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        /// Certificate output path (default: <matrix>.cert.json).
        #[arg(long)]
        cert_out: Option<PathBuf>,
    },
    /// Rejection-sample certified sparse subnetworks.
    Sample {
        /// JSON file with keys n, density, pre_scalar, post_scalar, max_tries, seed.
        #[arg(long)]
        config: PathBuf,
        /// How many subnetworks to sample (stream-split by index).
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Also estimate the acceptance rate over this many trials.
        #[arg(long)]
        estimate_trials: Option<usize>,
        #[arg(long, default_value = "samples")]
        out_dir: PathBuf,
    },
    /// Simulate a checkpointed network and measure its contraction rate.
    Simulate {
        checkpoint: PathBuf,
        /// Integration steps.
        #[arg(long, default_value_t = 4000)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        /// Input drive: "zero", "const:<value>", or "sin:<amp>,<period>".
        #[arg(long, default_value = "zero")]
        input: String,
        /// Size of the random perturbation separating the paired trajectories.
        #[arg(long, default_value_t = 1.0)]
        perturbation: f64,
        #[arg(long, default_value_t = 0)]
        traj_seed: u64,
        #[arg(long, default_value = "trajectories")]
        out_dir: PathBuf,
    },
    /// Train a composed network per a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Print the fully resolved config and exit.
        #[arg(long)]
        print_effective_config: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// "train" or "test".
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap help/version are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code)
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Rejected(String),
    Invariant(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) | CliError::Io(s) | CliError::Rejected(s) | CliError::Invariant(s) => {
                write!(f, "{s}")
            }
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => EXIT_USAGE,
            CliError::Rejected(_) => EXIT_REJECTED,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(e.to_string())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Certify {
            matrix,
            g,
            theorem,
            eps,
            cert_out,
        } => cmd_certify(&matrix, g, theorem.as_deref(), eps, cert_out),
        Command::Sample {
            config,
            count,
            estimate_trials,
            out_dir,
        } => cmd_sample(&config, count, estimate_trials, cli.out.unwrap_or(out_dir), cli.seed),
        Command::Simulate {
            checkpoint,
            steps,
            dt,
            input,
            perturbation,
            traj_seed,
            out_dir,
        } => cmd_simulate(
            &checkpoint,
            steps,
            dt,
            &input,
            perturbation,
            cli.seed.unwrap_or(traj_seed),
            cli.out.unwrap_or(out_dir),
        ),
        Command::Train {
            config,
            print_effective_config,
        } => cmd_train(&config, print_effective_config, cli.seed, cli.out),
        Command::Eval {
            checkpoint,
            config,
            split,
        } => cmd_eval(&checkpoint, &config, &split),
    }
}

// ---- certify ----

fn parse_matrix_file(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let trimmed = text.trim_start();
    let rows: Vec<Vec<f64>> = if trimmed.starts_with('[') {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: JSON matrix: {e}", path.display())))?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .map(|f| {
                        f.trim()
                            .parse::<f64>()
                            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?
    };
    if rows.is_empty() {
        return Err(CliError::Usage("matrix file is empty".into()));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Usage("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    contractivenets::numerics::from_row_major(flat.len() / cols, cols, &flat)
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_certify(
    matrix: &Path,
    g: f64,
    theorem: Option<&str>,
    eps: f64,
    cert_out: Option<PathBuf>,
) -> Result<u8> {
    let w = parse_matrix_file(matrix)?;
    let n = w.nrows();
    let attempts: Vec<(&str, std::result::Result<contractivenets::certificates::Certificate, CertifyError>)> =
        match theorem {
            Some(name) => {
                let r = match name {
                    "abs" => certify_abs(&w, g),
                    "symmetric" => certify_symmetric(&w, g),
                    "triangular" => certify_triangular(&w, g, eps),
                    "svd" => certify_svd_condition(&w, g, &Diagonal::identity(n)),
                    other => {
                        return Err(CliError::Usage(format!(
                            "unknown theorem '{other}' (expected abs|symmetric|triangular|svd)"
                        )))
                    }
                };
                vec![(name, r)]
            }
            None => vec![
                ("abs", certify_abs(&w, g)),
                ("symmetric", certify_symmetric(&w, g)),
                ("triangular", certify_triangular(&w, g, eps)),
                ("svd", certify_svd_condition(&w, g, &Diagonal::identity(n))),
            ],
        };

    for (name, outcome) in &attempts {
        if let Ok(cert) = outcome {
            let out = cert_out.unwrap_or_else(|| matrix.with_extension("cert.json"));
            std::fs::write(&out, cert.to_json()).map_err(io_err)?;
            println!(
                "certified ({name}): margin {:.6e}, certificate written to {}",
                cert.margin,
                out.display()
            );
            return Ok(EXIT_OK);
        }
    }
    eprintln!("no condition certified the matrix:");
    for (name, outcome) in &attempts {
        if let Err(e) = outcome {
            eprintln!("  {name}: {e}");
        }
    }
    // small matrices: also report whether any constant metric can exist at all
    if n <= 4 {
        let vertices: Vec<Diagonal> = (0..(1usize << n))
            .map(|mask| {
                Diagonal::from_slice(
                    &(0..n)
                        .map(|i| if mask & (1 << i) != 0 { g } else { 0.0 })
                        .collect::<Vec<_>>(),
                )
                .expect("finite vertex")
            })
            .collect();
        let dset = DSet::new(vertices, g).expect("vertex dset");
        match constant_metric_feasible(&w, g, &dset, 60, None) {
            Ok(Feasibility::Infeasible) => eprintln!(
                "constant-metric search: infeasible — no constant metric certifies this matrix \
                 over the slope box (grid over trace-normalized SPD metrics)"
            ),
            Ok(Feasibility::Feasible(m)) => eprintln!(
                "constant-metric search: a feasible metric exists (no theorem form applies); \
                 witness trace-normalized metric:\n{m}"
            ),
            Err(e) => eprintln!("constant-metric search failed: {e}"),
        }
    }
    Err(CliError::Rejected("certification rejected".into()))
}

// ---- sample ----

fn cmd_sample(
    config: &Path,
    count: usize,
    estimate_trials: Option<usize>,
    out_dir: PathBuf,
    seed_override: Option<u64>,
) -> Result<u8> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::Io(format!("{}: {e}", config.display())))?;
    let mut cfg: SparseInitConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&out_dir).map_err(io_err)?;
    let mut margins = Vec::new();
    for i in 0..count {
        match sample_sparse_subnet_stream(&cfg, i as u64) {
            Ok((w, cert)) => {
                let base = out_dir.join(format!("subnet_{i:03}"));
                std::fs::write(base.with_extension("cert.json"), cert.to_json())
                    .map_err(io_err)?;
                let mut csv = String::new();
                for r in 0..w.nrows() {
                    let row: Vec<String> = (0..w.ncols()).map(|c| format!("{}", w[(r, c)])).collect();
                    csv.push_str(&row.join(","));
                    csv.push('\n');
                }
                std::fs::write(base.with_extension("csv"), csv).map_err(io_err)?;
                margins.push(cert.margin);
            }
            Err(e) => return Err(CliError::Rejected(format!("subnetwork {i}: {e}"))),
        }
    }
    println!(
        "sampled {count} certified subnetworks into {} (margins {:.3e}..{:.3e})",
        out_dir.display(),
        margins.iter().cloned().fold(f64::INFINITY, f64::min),
        margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    if let Some(trials) = estimate_trials {
        let rate = estimate_acceptance_rate(cfg.n, cfg.density, cfg.pre_scalar, trials, cfg.seed)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        println!(
            "acceptance rate: {:.4}% over {trials} trials (n={}, density={}, pre_scalar={})",
            rate * 100.0,
            cfg.n,
            cfg.density,
            cfg.pre_scalar
        );
    }
    Ok(EXIT_OK)
}

// ---- simulate ----

fn parse_input_spec(spec: &str, steps: usize, dim: usize, dt: f64) -> Result<InputSequence> {
    if spec == "zero" {
        return Ok(InputSequence::zeros(steps, dim, dt));
    }
    if let Some(v) = spec.strip_prefix("const:") {
        let value: f64 = v
            .parse()
            .map_err(|e| CliError::Usage(format!("input spec: {e}")))?;
        return Ok(InputSequence::constant(
            &Vector::from_element(dim, value),
            steps,
            dt,
        ));
    }
    if let Some(rest) = spec.strip_prefix("sin:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 2 {
            return Err(CliError::Usage("sin input spec is sin:<amp>,<period>".into()));
        }
        let amp: f64 = parts[0]
            .parse()
            .map_err(|e| CliError::Usage(format!("input spec: {e}")))?;
        let period: f64 = parts[1]
            .parse()
            .map_err(|e| CliError::Usage(format!("input spec: {e}")))?;
        let omega = 2.0 * std::f64::consts::PI / period;
        return Ok(InputSequence::from_fn(steps, dim, dt, move |t, i| {
            amp * (omega * t + i as f64).sin()
        }));
    }
    Err(CliError::Usage(format!("unknown input spec '{spec}'")))
}

fn cmd_simulate(
    ckpt_path: &Path,
    steps: usize,
    dt: f64,
    input: &str,
    perturbation: f64,
    traj_seed: u64,
    out_dir: PathBuf,
) -> Result<u8> {
    let ckpt = checkpoint::load(ckpt_path).map_err(io_err)?;
    let net = ckpt.net;
    let n = net.n_total();
    let inputs = parse_input_spec(input, steps, net.in_dim(), dt)?;
    let mut rng = StreamRng::new(traj_seed);
    let x0_a = Vector::zeros(n);
    let x0_b = Vector::from_fn(n, |_, _| rng.uniform(-perturbation, perturbation));
    let traj_a = simulate(&x0_a, &inputs, &net, Activation::Relu, Method::Euler)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let traj_b = simulate(&x0_b, &inputs, &net, Activation::Relu, Method::Euler)
        .map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::create_dir_all(&out_dir).map_err(io_err)?;
    for (name, traj) in [("trajectory_a.csv", &traj_a), ("trajectory_b.csv", &traj_b)] {
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(out_dir.join(name), buf).map_err(io_err)?;
    }
    match contraction_rate(&traj_a, &traj_b, &net.block_metric, 1.0) {
        Ok(fit) => println!(
            "contraction rate {:.6} (r² {:.6}, {} samples) — trajectories in {}",
            fit.rate,
            fit.r2,
            fit.window,
            out_dir.display()
        ),
        Err(e) => println!(
            "trajectories written to {}; rate fit unavailable ({e})",
            out_dir.display()
        ),
    }
    Ok(EXIT_OK)
}

// ---- train / eval ----

fn cmd_train(
    config_path: &Path,
    print_only: bool,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<u8> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        cfg.override_seed(seed);
    }
    if let Some(out) = out_override {
        cfg.io.out_dir = out;
    }
    if print_only {
        println!("{}", cfg.to_pretty_json()?);
        return Ok(EXIT_OK);
    }
    let out_dir = cfg.io.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(io_err)?;

    let (train_seq, test_seq) = cfg.load_datasets()?;
    let (arch, train_cfg) = cfg.build_configs(train_seq.dim)?;
    let (net, svd_params) = training::initialize_network(&arch).map_err(train_err)?;
    let setup = TrainSetup::new(net, arch.variant, train_cfg, Activation::Relu);
    let mut state = init_state(&setup, svd_params.as_deref()).map_err(train_err)?;
    println!(
        "training {:?} network: p={} n_sub={} inim={} params={}",
        arch.variant,
        arch.p,
        arch.n_sub,
        train_seq.dim,
        training::enumerate_trainable(&state)
    );

    let log_path = out_dir.join("training_log.csv");
    let mut log = std::fs::File::create(&log_path).map_err(io_err)?;
    writeln!(
        log,
        "epoch,lr,train_loss,train_acc,test_acc,skew_residual,wall_seconds"
    )
    .map_err(io_err)?;
    for _ in 0..cfg.training.epochs {
        let metrics = train_epoch(&mut state, &setup, &train_seq).map_err(train_err)?;
        let test_acc = evaluate(&setup, &state, &test_seq).map_err(train_err)?;
        writeln!(
            log,
            "{},{},{},{},{},{},{}",
            metrics.epoch,
            metrics.lr,
            metrics.train_loss,
            metrics.train_acc,
            test_acc,
            metrics.skew_residual,
            metrics.wall_seconds
        )
        .map_err(io_err)?;
        println!(
            "epoch {:3}  lr {:.2e}  loss {:.4}  train {:.4}  test {:.4}  skew {:.2e}  ({:.1}s)",
            metrics.epoch,
            metrics.lr,
            metrics.train_loss,
            metrics.train_acc,
            test_acc,
            metrics.skew_residual,
            metrics.wall_seconds
        );
    }

    let final_net = training::rebuild_network(&setup, &state).map_err(train_err)?;
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    checkpoint::save(
        &ckpt_path,
        &Checkpoint {
            net: final_net,
            variant: arch.variant,
            seeds: Seeds {
                init: Some(arch.seed),
                train: Some(setup.cfg.seed),
            },
            train: Some(TrainStatePayload {
                params: state.params.clone(),
                m: state.m.clone(),
                v: state.v.clone(),
                step_count: state.step_count,
                lr: state.lr,
                epoch: state.epoch,
            }),
        },
    )
    .map_err(io_err)?;
    println!(
        "checkpoint written to {}; log at {}",
        ckpt_path.display(),
        log_path.display()
    );
    Ok(EXIT_OK)
}

fn train_err(e: TrainError) -> CliError {
    match &e {
        TrainError::Composition(CompositionError::InterconnectionViolated { .. })
        | TrainError::FrozenWeightsChanged => CliError::Invariant(e.to_string()),
        _ => CliError::Io(e.to_string()),
    }
}

fn cmd_eval(ckpt_path: &Path, config_path: &Path, split: &str) -> Result<u8> {
    let cfg = RunConfig::load(config_path)?;
    let ckpt = checkpoint::load(ckpt_path).map_err(io_err)?;
    let (train_seq, test_seq) = cfg.load_datasets()?;
    let data = match split {
        "train" => train_seq,
        "test" => test_seq,
        other => return Err(CliError::Usage(format!("unknown split '{other}'"))),
    };
    if data.dim != ckpt.net.in_dim() {
        return Err(CliError::Usage(format!(
            "dataset dimension {} does not match the checkpoint's input layer ({})",
            data.dim,
            ckpt.net.in_dim()
        )));
    }
    let variant = ckpt.variant;
    let train_payload = ckpt
        .train
        .as_ref()
        .ok_or_else(|| CliError::Usage("checkpoint carries no training state".into()))?;
    let setup = TrainSetup::new(
        ckpt.net,
        variant,
        contractivenets::training::TrainConfig::with_seed(0),
        Activation::Relu,
    );
    // rebuild the state straight from the payload (the flat vector already
    // contains the SVD raw parameters in layout order)
    let layout = training::build_layout(&setup);
    if layout.total != train_payload.params.len() {
        return Err(CliError::Usage(format!(
            "checkpoint parameter vector has {} entries, layout expects {}",
            train_payload.params.len(),
            layout.total
        )));
    }
    let state = TrainState {
        params: train_payload.params.clone(),
        layout,
        m: train_payload.m.clone(),
        v: train_payload.v.clone(),
        step_count: train_payload.step_count,
        lr: train_payload.lr,
        epoch: train_payload.epoch,
    };
    let acc = evaluate(&setup, &state, &data).map_err(train_err)?;
    println!("{split} accuracy: {:.4}", acc);
    Ok(EXIT_OK)
}
