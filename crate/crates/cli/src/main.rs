//! `crossmodal`: generate paired data, train with the two-phase protocol,
//! evaluate retrieval, and inspect the shared codebook.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crossmodal::analysis::{
    codeword_stats, conditional_probability_csv, correspondence_csv, correspondence_table, encode, evaluate,
    label_agreement, localize, partition_statistic, retrieval_csv, LabelSource, DEFAULT_PARTITION_THRESHOLD,
};
use crossmodal::data::{generate, GeneratorConfig, ImportedDataset, PairedDataset};
use crossmodal::diagnostics::{check_gradients, GRAD_CHECK_TOLERANCE};
use crossmodal::training::{metrics_csv, train, Checkpoint, Init, Phase};
use crossmodal::{Error, Modality};

use config::{ConfigFile, Provenance};

pub const THREADS_ENV: &str = "CODEX_BRIDGE_THREADS";

pub const CHECKPOINT_FILE: &str = "checkpoint.cmck";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RETRIEVAL_FILE: &str = "retrieval.csv";
pub const CORRESPONDENCE_FILE: &str = "correspondence.csv";
pub const ANALYSIS_FILE: &str = "analysis.json";

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => Failure::Usage(msg),
            Error::NonFinite(_) | Error::Undefined(_) => Failure::Numeric(msg),
            Error::Dimension { .. }
            | Error::Empty(_)
            | Error::Index { .. }
            | Error::Format(_)
            | Error::Incompatible(_)
            | Error::Io { .. } => Failure::Data(msg),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "crossmodal", version, about = "Cross-modal code matching on paired sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Convert a JSON dataset into the binary dataset format.
    Import(ImportArgs),
    /// Train one phase and write a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Retrieval metrics in both directions.
    Eval(EvalArgs),
    /// Codeword statistics: conditional probabilities, correspondences, partition.
    Analyze(AnalyzeArgs),
    /// Positions where a codeword fires in one instance.
    Localize(LocalizeArgs),
    /// Finite-difference check of the loss gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    len_a: Option<usize>,
    #[arg(long)]
    len_b: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    instance_ratio: Option<f64>,
    #[arg(long)]
    prototype_scale: Option<f64>,
    #[arg(long)]
    max_secondary: Option<usize>,
    #[arg(long)]
    identity_distortion: bool,
    /// Extra pairs generated alongside and written to `--test-out`.
    #[arg(long, requires = "test_out")]
    test_instances: Option<usize>,
    #[arg(long, requires = "test_instances")]
    test_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PhaseArg {
    Warmstart,
    Full,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Warmstart => Phase::Warmstart,
            PhaseArg::Full => Phase::Full,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file; keys override the phase defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    phase: Option<PhaseArg>,
    /// Checkpoint of a finished warm-start run.
    #[arg(long, conflicts_with_all = ["no_warmstart", "resume"])]
    warmstart_ckpt: Option<PathBuf>,
    /// Train the full phase from a fresh initialization.
    #[arg(long, conflicts_with = "resume")]
    no_warmstart: bool,
    /// Continue an interrupted run of the same phase.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Average the loss over both anchor modalities.
    #[arg(long)]
    symmetric: bool,
    #[arg(long)]
    no_vq: bool,
    #[arg(long)]
    no_continuous: bool,
    #[arg(long)]
    freeze_low: bool,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
}

impl TrainOverrides {
    fn sets_model(&self) -> bool {
        self.codebook_size.is_some() || self.d_hidden.is_some()
    }

    fn apply(&self, cfg: &mut crossmodal::training::TrainConfig) {
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.margin {
            cfg.margin = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.symmetric {
            cfg.symmetric = true;
        }
        if self.no_vq {
            cfg.use_vq = false;
        }
        if self.no_continuous {
            cfg.use_continuous = false;
        }
        if self.freeze_low {
            cfg.freeze_low = true;
        }
        if let Some(v) = self.codebook_size {
            cfg.model.codebook.size = v;
        }
        if let Some(v) = self.d_hidden {
            cfg.model.encoder.d_hidden = v;
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; the report is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LabelSourceArg {
    Instance,
    Position,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PARTITION_THRESHOLD)]
    partition_threshold: f64,
    /// Label every position with its instance's label or its own.
    #[arg(long, value_enum, default_value = "instance")]
    labels: LabelSourceArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModalityArg {
    A,
    B,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    instance: u64,
    #[arg(long)]
    code: usize,
    /// Both modalities when omitted.
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
    /// JSON file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 3, 4])]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    codebook_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable report") + "\n"
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn gen_data(args: &GenDataArgs) -> CliResult {
    let d = GeneratorConfig::default();
    let train_n = args.instances.unwrap_or(d.instances);
    let cfg = GeneratorConfig {
        concepts: args.concepts.unwrap_or(d.concepts),
        instances: train_n + args.test_instances.unwrap_or(0),
        len_a: args.len_a.unwrap_or(d.len_a),
        len_b: args.len_b.unwrap_or(d.len_b),
        d_in: args.d_in.unwrap_or(d.d_in),
        noise_sigma: args.noise_sigma.unwrap_or(d.noise_sigma),
        seed: args.seed.unwrap_or(d.seed),
        instance_ratio: args.instance_ratio.unwrap_or(d.instance_ratio),
        prototype_scale: args.prototype_scale.unwrap_or(d.prototype_scale),
        min_separation: d.min_separation,
        max_secondary: args.max_secondary.unwrap_or(d.max_secondary),
        identity_distortion: args.identity_distortion,
    };
    let ds = generate(&cfg)?;
    match (&args.test_instances, &args.test_out) {
        (Some(_), Some(test_out)) => {
            let (train_ds, test) = ds.split_at(train_n)?;
            train_ds.save(&args.out)?;
            test.save(test_out)?;
        }
        _ => ds.save(&args.out)?,
    }
    print!("{}", json(&cfg));
    Ok(())
}

fn import(args: &ImportArgs) -> CliResult {
    let ds = ImportedDataset::read(&args.input)?.into_dataset()?;
    ds.save(&args.out)?;
    println!("imported {} pairs over {} concepts", ds.len(), ds.num_concepts());
    Ok(())
}

fn run_train(args: &TrainArgs) -> CliResult {
    let ds = PairedDataset::load(&args.data)?;
    let file = match &args.config {
        Some(p) => ConfigFile::read(p)?,
        None => ConfigFile::default(),
    };
    let phase = match args.phase {
        Some(p) => p.into(),
        None => file.phase()?.unwrap_or(Phase::Full),
    };
    let mut cfg = file.resolve(phase)?;
    args.overrides.apply(&mut cfg);
    let model_given = file.sets_model() || args.overrides.sets_model();

    let init = if let Some(path) = &args.resume {
        let ck = Checkpoint::load(path)?;
        if !model_given {
            cfg.model = ck.config.model.clone();
        }
        Init::Resume(ck)
    } else {
        match phase {
            Phase::Warmstart => {
                if args.warmstart_ckpt.is_some() || args.no_warmstart {
                    return Err(Failure::Usage(
                        "--warmstart-ckpt and --no-warmstart only apply to --phase full".into(),
                    ));
                }
                Init::Fresh
            }
            Phase::Full => match &args.warmstart_ckpt {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    if !model_given {
                        cfg.model = ck.config.model.clone();
                    }
                    Init::WarmStart(ck)
                }
                None if args.no_warmstart => {
                    cfg.allow_cold_start = true;
                    Init::Fresh
                }
                None => {
                    return Err(Failure::Usage(
                        "the full phase needs --warmstart-ckpt (or --no-warmstart to start from scratch)".into(),
                    ))
                }
            },
        }
    };
    if matches!(init, Init::Fresh) && !model_given {
        cfg.model.encoder.d_in = ds.d_in;
    }

    create_dir(&args.out)?;
    let mut provenance = Provenance::new("train", cfg.clone()).input("data", &args.data);
    for (role, path) in [("warmstart_ckpt", &args.warmstart_ckpt), ("resume", &args.resume)] {
        if let Some(p) = path {
            provenance = provenance.input(role, p);
        }
    }
    provenance.write(&args.out)?;

    let (ck, trace) = train(&ds, &cfg, init)?;
    ck.save(args.out.join(CHECKPOINT_FILE))?;
    write_text(&args.out.join(METRICS_FILE), &metrics_csv(&trace))?;
    match trace.last() {
        Some(m) => println!(
            "{phase} phase: {} epochs, {} steps, final loss {:.6}",
            ck.epoch, ck.step, m.loss
        ),
        None => println!("{phase} phase: nothing to do, already at epoch {}", ck.epoch),
    }
    Ok(())
}

fn load_pair(ckpt: &Path, data: &Path) -> CliResult<(Checkpoint, PairedDataset)> {
    let ck = Checkpoint::load(ckpt)?;
    let ds = PairedDataset::load(data)?;
    let d_in = ck.config.model.encoder.d_in;
    if ds.d_in != d_in {
        return Err(Failure::Data(format!(
            "dataset feature width {} does not match the checkpoint's {d_in}",
            ds.d_in
        )));
    }
    Ok((ck, ds))
}

fn eval(args: &EvalArgs) -> CliResult {
    let (ck, ds) = load_pair(&args.ckpt, &args.data)?;
    let enc = encode(&ck.model, &ds, ck.config.flags())?;
    let csv = retrieval_csv(&evaluate(&enc)?);
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        Provenance::new("eval", ck.config.flags())
            .input("checkpoint", &args.ckpt)
            .input("data", &args.data)
            .write(dir)?;
        write_text(&dir.join(RETRIEVAL_FILE), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeSettings {
    partition_threshold: f64,
    labels: LabelSourceArg,
}

#[derive(Serialize)]
struct AnalysisSummary {
    partition_threshold: f64,
    partition_statistic: f64,
    /// Codewords used at least once on this dataset.
    active_codewords: usize,
    codebook_size: usize,
    label_agreement: Option<crossmodal::analysis::LabelAgreement>,
}

fn analyze(args: &AnalyzeArgs) -> CliResult {
    let (ck, ds) = load_pair(&args.ckpt, &args.data)?;
    let source = match args.labels {
        LabelSourceArg::Instance => LabelSource::Instance,
        LabelSourceArg::Position => LabelSource::Position,
    };
    let enc = encode(&ck.model, &ds, ck.config.flags())?;
    let stats = codeword_stats(&ck.model, &ds, &enc, source)?;
    let partition = partition_statistic(&stats, args.partition_threshold)?;
    let summary = AnalysisSummary {
        partition_threshold: args.partition_threshold,
        partition_statistic: partition,
        active_codewords: (0..stats.size).filter(|&v| stats.total_occurrence(v) > 0).count(),
        codebook_size: stats.size,
        label_agreement: label_agreement(&stats).ok(),
    };

    create_dir(&args.out)?;
    Provenance::new(
        "analyze",
        AnalyzeSettings {
            partition_threshold: args.partition_threshold,
            labels: args.labels,
        },
    )
    .input("checkpoint", &args.ckpt)
    .input("data", &args.data)
    .write(&args.out)?;
    for m in Modality::BOTH {
        let name = format!("conditional_probability_{}.csv", m.to_string().to_lowercase());
        write_text(&args.out.join(name), &conditional_probability_csv(&stats, m))?;
    }
    write_text(
        &args.out.join(CORRESPONDENCE_FILE),
        &correspondence_csv(&correspondence_table(&stats)),
    )?;
    let text = json(&summary);
    write_text(&args.out.join(ANALYSIS_FILE), &text)?;
    print!("{text}");
    Ok(())
}

fn run_localize(args: &LocalizeArgs) -> CliResult {
    let (ck, ds) = load_pair(&args.ckpt, &args.data)?;
    let index = ds
        .instances
        .iter()
        .position(|inst| inst.id == args.instance)
        .ok_or_else(|| Failure::Data(format!("no instance with id {} in {}", args.instance, args.data.display())))?;
    let single = PairedDataset::new(ds.d_in, ds.concepts.clone(), vec![ds.instances[index].clone()], None)?;
    let enc = encode(&ck.model, &single, ck.config.flags())?;
    let modalities = match args.modality {
        Some(ModalityArg::A) => vec![Modality::A],
        Some(ModalityArg::B) => vec![Modality::B],
        None => Modality::BOTH.to_vec(),
    };
    let mut masks = Vec::new();
    for m in modalities {
        masks.push(localize(&enc.codes(m)[0], args.code, ck.model.codebook.size())?);
    }
    let text = json(&masks);
    match &args.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn grad_check(args: &GradCheckArgs) -> CliResult {
    let mut suites = Vec::new();
    for &n in &args.batch {
        suites.push(check_gradients(args.seed, n, args.codebook_size)?);
    }
    let worst = suites.iter().map(|s| s.max_rel_error()).fold(0.0, f64::max);
    if let Some(path) = &args.out {
        write_text(path, &json(&suites))?;
    }
    println!("max relative error {worst:.3e} (tolerance {GRAD_CHECK_TOLERANCE:.0e})");
    if worst < GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        let worst_entry = suites
            .iter()
            .flat_map(|s| s.entries.iter().map(move |e| (s.batch, e)))
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
            .map(|(n, e)| format!("{} (batch {n}, coordinate {})", e.target, e.worst_coordinate))
            .unwrap_or_default();
        Err(Failure::Numeric(format!("gradient check failed at {worst_entry}")))
    }
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Import(a) => import(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Localize(a) => run_localize(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
