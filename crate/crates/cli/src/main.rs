use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mimseq::checks;
use mimseq::data::{self, DataError, DatasetFile, Split, SynthSpec};
use mimseq::harness::{self, AblationConfig, MetricsWriter, TrainConfig, TrainData, TrainError, Variant};
use mimseq::kv::{KvError, KvMap};
use mimseq::model::checkpoint::{self, CheckpointError};
use mimseq::model::{Heads, ModelConfig, SequenceModel};
use mimseq::par::Exec;
use mimseq::tensor::{GradCheckOptions, TensorError};

#[derive(Parser)]
#[command(name = "mimseq", version, about = "Synthetic lipreading-style sequence classification with MI constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value configuration file (keys prefixed `synth.`, `model.`, `train.`, `ablate.`)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration entry, e.g. `--set train.epochs=5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Clone, Default)]
struct SynthFlags {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    window_min: Option<usize>,
    #[arg(long)]
    window_max: Option<usize>,
    /// Pairs as `a:b,c:d`
    #[arg(long)]
    confusable: Option<String>,
    /// Range as `lo,hi`
    #[arg(long)]
    brightness: Option<String>,
    #[arg(long)]
    translation: Option<usize>,
    /// Range as `lo,hi`
    #[arg(long)]
    speed_warp: Option<String>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    distractor_pool: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    variant: Option<String>,
    /// `joint` or `backend-then-joint`
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, validation and test splits
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthFlags,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "parallel")]
        exec: Exec,
    },
    /// Train one variant
    Train {
        /// Directory written by `gen`
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint (its model config wins)
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset file
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-class table output
        #[arg(long)]
        per_class: Option<PathBuf>,
        /// Per-sample `label,prediction` output
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Baseline / +LMIM / +GLMIM over several seeds
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Frame weights with ground-truth windows
    ExportBeta {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// 2-D PCA of final representations for a class subset
    ExportPca {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// Random shapes per primitive
        #[arg(long, default_value_t = 10)]
        shapes: usize,
        /// Probed elements per parameter in the full-loss check
        #[arg(long, default_value_t = 4)]
        elements: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Discrete MI estimator oracle
    MiOracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
}

#[derive(Debug)]
enum Category {
    Usage,
    Config,
    Data,
    Checkpoint,
    Numeric,
    Io,
    Check,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Data => "data",
            Category::Checkpoint => "checkpoint",
            Category::Numeric => "numeric",
            Category::Io => "io",
            Category::Check => "check",
        })
    }
}

struct CliError(Category, String);

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        CliError(Category::Config, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => CliError(Category::Io, e.to_string()),
            DataError::Spec(m) => CliError(Category::Config, m),
            e => CliError(Category::Data, e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(e) => CliError(Category::Io, e.to_string()),
            e => CliError(Category::Checkpoint, e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError(Category::Numeric, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError(Category::Io, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            TrainError::Config(e) => e.into(),
            TrainError::Io(e) => e.into(),
            TrainError::Invalid(m) => CliError(Category::Usage, m),
            e => CliError(Category::Numeric, e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const SECTIONS: &[&str] = &["synth.", "model.", "train.", "ablate."];

fn layered(cfg: &ConfigArgs) -> Result<KvMap> {
    let mut map = match &cfg.config {
        Some(p) => KvMap::parse(&fs::read_to_string(p).map_err(|e| CliError(Category::Io, format!("{}: {e}", p.display())))?)?,
        None => KvMap::new(),
    };
    let overrides = KvMap::parse(&cfg.sets.join("\n"))?;
    map.merge(&overrides);
    if let Some((k, _)) = map.iter().find(|(k, _)| !SECTIONS.iter().any(|s| k.starts_with(s))) {
        return Err(KvError::UnknownKey(k.to_string()).into());
    }
    Ok(map)
}

fn set_opt<T: fmt::Display>(m: &mut KvMap, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        m.set(key, v);
    }
}

fn synth_spec(flags: &SynthFlags, cfg: &KvMap) -> Result<SynthSpec> {
    let mut m = cfg.section("synth.");
    set_opt(&mut m, "classes", &flags.classes);
    set_opt(&mut m, "frames", &flags.frames);
    set_opt(&mut m, "side", &flags.side);
    set_opt(&mut m, "window_min", &flags.window_min);
    set_opt(&mut m, "window_max", &flags.window_max);
    set_opt(&mut m, "confusable", &flags.confusable);
    set_opt(&mut m, "brightness", &flags.brightness);
    set_opt(&mut m, "translation", &flags.translation);
    set_opt(&mut m, "speed_warp", &flags.speed_warp);
    set_opt(&mut m, "noise_std", &flags.noise_std);
    set_opt(&mut m, "distractor_pool", &flags.distractor_pool);
    set_opt(&mut m, "train_per_class", &flags.train_per_class);
    set_opt(&mut m, "test_per_class", &flags.test_per_class);
    set_opt(&mut m, "seed", &flags.seed);
    Ok(SynthSpec::from_kv(&m, &SynthSpec::default())?)
}

fn train_config(flags: &TrainFlags, cfg: &KvMap) -> Result<TrainConfig> {
    let mut m = cfg.section("train.");
    set_opt(&mut m, "variant", &flags.variant);
    set_opt(&mut m, "schedule", &flags.schedule);
    set_opt(&mut m, "epochs", &flags.epochs);
    set_opt(&mut m, "phase1_epochs", &flags.phase1_epochs);
    set_opt(&mut m, "lr_start", &flags.lr);
    set_opt(&mut m, "lr_floor", &flags.lr_floor);
    set_opt(&mut m, "batch_size", &flags.batch_size);
    set_opt(&mut m, "seed", &flags.seed);
    Ok(TrainConfig::from_kv(&m, &TrainConfig::default())?)
}

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.bin"))
}

fn read_split(dir: &Path, split: &str) -> Result<DatasetFile> {
    let p = split_path(dir, split);
    data::read_dataset(&p).map_err(|e| match e {
        DataError::Io(io) => CliError(Category::Io, format!("{}: {io}", p.display())),
        e => CliError(Category::Data, format!("{}: {e}", p.display())),
    })
}

fn check_extents(model: &ModelConfig, d: &DatasetFile) -> Result<()> {
    if d.frames != model.frames || d.side != model.input_size || d.classes != model.classes {
        return Err(CliError(
            Category::Config,
            format!(
                "dataset extents T={} S={} C={} do not match model T={} S={} C={}",
                d.frames, d.side, d.classes, model.frames, model.input_size, model.classes
            ),
        ));
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError(Category::Io, format!("{}: {e}", path.display())))
}

fn cmd_gen(out: &Path, flags: &SynthFlags, cfg: &ConfigArgs, exec: Exec) -> Result<()> {
    let spec = synth_spec(flags, &layered(cfg)?)?;
    fs::create_dir_all(out)?;
    for (name, split) in [("train", Split::Train), ("val", Split::Validation), ("test", Split::Test)] {
        let samples = data::generate_split(&spec, split, exec)?;
        let n = samples.len();
        data::write_dataset(&DatasetFile::new(samples, spec.classes)?, &split_path(out, name))?;
        println!("{name}: {n} sequences");
    }
    let mut text = String::new();
    for (k, v) in spec.to_kv().iter() {
        text.push_str(&format!("synth.{k}={v}\n"));
    }
    write_file(&out.join("synth.cfg"), &text)
}

fn cmd_train(data_dir: &Path, out: &Path, init: Option<&Path>, flags: &TrainFlags, cfg: &ConfigArgs) -> Result<()> {
    let kv = layered(cfg)?;
    let tc = train_config(flags, &kv)?;
    let model = match init {
        Some(p) => checkpoint::load(p)?,
        None => {
            let mc = ModelConfig::from_kv(&kv.section("model."), &ModelConfig::desk())?;
            SequenceModel::new(mc, Heads::default(), tc.seed)?
        }
    };
    let train = read_split(data_dir, "train")?;
    let val = read_split(data_dir, "val")?;
    let test = read_split(data_dir, "test")?;
    for d in [&train, &val, &test] {
        check_extents(&model.config, d)?;
    }
    fs::create_dir_all(out)?;
    let classes = model.config.classes;
    let mut metrics = MetricsWriter::new(BufWriter::new(fs::File::create(out.join("metrics.csv"))?), classes)?;
    let mut timing = BufWriter::new(fs::File::create(out.join("timing.csv"))?);
    writeln!(timing, "epoch,split,seconds")?;
    let data = TrainData {
        train: &train.samples,
        val: &val.samples,
        test: Some(&test.samples),
    };
    let outcome = harness::train(&tc, model, &data, |r| {
        metrics.write(r)?;
        writeln!(timing, "{},{},{:.3}", r.epoch, r.split, r.seconds)?;
        timing.flush()?;
        if r.split == "test" {
            println!("epoch {} phase {} lr {:e}: test accuracy {:.4}", r.epoch, r.phase, r.lr, r.accuracy.overall);
        }
        Ok(())
    })?;
    checkpoint::save(&outcome.model, &out.join("checkpoint.bin"))?;
    let mut text = String::new();
    for (prefix, m) in [("model.", outcome.model.config.to_kv()), ("train.", tc.to_kv())] {
        for (k, v) in m.iter() {
            text.push_str(&format!("{prefix}{k}={v}\n"));
        }
    }
    write_file(&out.join("config.cfg"), &text)
}

fn cmd_eval(ckpt: &Path, data_path: &Path, per_class: Option<&Path>, predictions: Option<&Path>) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let d = data::read_dataset(data_path)?;
    check_extents(&model.config, &d)?;
    let out = harness::evaluate(&model, &d.samples, 64, Exec::Parallel)?;
    let acc = out.accuracy(model.config.classes);
    println!("accuracy={:.6} cross_entropy={:.6} samples={}", acc.overall, out.cross_entropy, d.samples.len());
    let table = harness::per_class_csv(&acc);
    print!("{table}");
    if let Some(p) = per_class {
        write_file(p, &table)?;
    }
    if let Some(p) = predictions {
        let mut s = String::from("label,prediction\n");
        for (y, p) in out.labels.iter().zip(&out.predictions) {
            s.push_str(&format!("{y},{p}\n"));
        }
        write_file(p, &s)?;
    }
    Ok(())
}

fn cmd_ablate(data_dir: &Path, out: &Path, seeds: &str, cfg: &ConfigArgs) -> Result<()> {
    let kv = layered(cfg)?;
    let seeds = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| CliError(Category::Usage, format!("seeds must be comma-separated integers, got `{seeds}`")))?;
    let cfg = AblationConfig::from_kv(&kv, seeds)?;
    let train = read_split(data_dir, "train")?;
    let val = read_split(data_dir, "val")?;
    let test = read_split(data_dir, "test")?;
    for d in [&train, &val, &test] {
        check_extents(&cfg.model, d)?;
    }
    fs::create_dir_all(out)?;
    let data = TrainData {
        train: &train.samples,
        val: &val.samples,
        test: None,
    };
    let report = harness::run_ablation(&cfg, &data, &test.samples, |m| println!("{m}"))?;
    let classes = cfg.model.classes;
    for r in &report.runs {
        let mut s = harness::metrics_header(classes);
        s.push('\n');
        for m in &r.metrics {
            s.push_str(&m.csv_row());
            s.push('\n');
        }
        write_file(&out.join(format!("metrics-{}-{}.csv", r.variant, r.seed)), &s)?;
        write_file(&out.join(format!("per-class-{}-{}.csv", r.variant, r.seed)), &harness::per_class_csv(&r.test))?;
        checkpoint::save(&r.model, &out.join(format!("checkpoint-{}-{}.bin", r.variant, r.seed)))?;
    }
    write_file(&out.join("summary.csv"), &report.summary_csv())?;
    for v in Variant::ALL {
        println!("{v}: mean test accuracy {:.4}", report.mean_accuracy(v));
    }
    Ok(())
}

fn cmd_export_beta(ckpt: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let d = data::read_dataset(data_path)?;
    check_extents(&model.config, &d)?;
    let rows = harness::export_beta(&model, &d.samples, 64, Exec::Parallel)?;
    let localized = rows.iter().filter(|r| r.localized(2.0)).count();
    println!("{} rows; {} with mean in-window weight >= 2x outside", rows.len(), localized);
    write_file(out, &harness::beta_csv(&rows))
}

fn cmd_export_pca(ckpt: &Path, data_path: &Path, out: &Path, classes: usize, per_class: usize, seed: u64) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let d = data::read_dataset(data_path)?;
    check_extents(&model.config, &d)?;
    let subset = harness::select_subset(&d.samples, d.classes, classes, per_class, seed);
    let ev = harness::evaluate(&model, &subset, 64, Exec::Parallel)?;
    let pca = harness::pca_2d(&ev.repr, &ev.labels)?;
    let ratio = harness::variance_ratio(&ev.repr, &ev.labels)?;
    println!(
        "component variance {:.6} {:.6}; between/within variance ratio {:.6}",
        pca.component_variance[0], pca.component_variance[1], ratio
    );
    write_file(out, &harness::pca_csv(&pca))
}

fn cmd_gradcheck(shapes: usize, elements: usize, seed: u64) -> Result<()> {
    let mut failed = Vec::new();
    for name in checks::primitive_names() {
        let reports = checks::check_primitive(name, shapes, seed)?;
        let worst = reports.iter().map(|r| r.max_rel_error()).fold(0.0, f64::max);
        let ok = reports.iter().all(|r| r.passed());
        println!("{name:<12} {} shapes  max rel error {worst:.2e}  {}", reports.len(), if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name.to_string());
        }
    }
    let cfg = ModelConfig::desk();
    let batch = checks::random_batch(&cfg, 2, seed);
    let opts = GradCheckOptions {
        step: checks::FULL_LOSS_STEP,
        max_elements_per_param: Some(elements),
        seed,
        ..GradCheckOptions::default()
    };
    let report = checks::check_full_loss(cfg, &batch, &opts)?;
    println!(
        "full loss    {} elements  max rel error {:.2e}  {}",
        report.elements.len(),
        report.max_rel_error(),
        if report.passed() { "ok" } else { "FAIL" }
    );
    for e in report.failures() {
        println!("  {}[{}]: analytic {:e} numeric {:e}", e.param, e.index, e.analytic, e.numeric);
    }
    if !report.passed() {
        failed.push("full loss".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError(Category::Check, format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_mi_oracle(seed: u64, tolerance: f64) -> Result<()> {
    let cases = checks::mi_oracle(seed, Exec::Parallel).map_err(|e| CliError(Category::Numeric, e.to_string()))?;
    let mut bad = Vec::new();
    println!("case,trained,optimal,gap");
    for c in &cases {
        let gap = (c.trained - c.optimal).abs();
        println!("{},{:.6},{:.6},{:.6}", c.name, c.trained, c.optimal, gap);
        if gap >= tolerance {
            bad.push(c.name.clone());
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError(Category::Check, format!("oracle gap >= {tolerance} for {}", bad.join(", "))))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, synth, cfg, exec } => cmd_gen(&out, &synth, &cfg, exec),
        Command::Train {
            data,
            out,
            init,
            train,
            cfg,
        } => cmd_train(&data, &out, init.as_deref(), &train, &cfg),
        Command::Eval {
            checkpoint,
            data,
            per_class,
            predictions,
        } => cmd_eval(&checkpoint, &data, per_class.as_deref(), predictions.as_deref()),
        Command::Ablate { data, out, seeds, cfg } => cmd_ablate(&data, &out, &seeds, &cfg),
        Command::ExportBeta { checkpoint, data, out } => cmd_export_beta(&checkpoint, &data, &out),
        Command::ExportPca {
            checkpoint,
            data,
            out,
            classes,
            per_class,
            seed,
        } => cmd_export_pca(&checkpoint, &data, &out, classes, per_class, seed),
        Command::Gradcheck { shapes, elements, seed } => cmd_gradcheck(shapes, elements, seed),
        Command::MiOracle { seed, tolerance } => cmd_mi_oracle(seed, tolerance),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: {}: {line}", Category::Usage);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError(cat, msg)) => {
            eprintln!("error: {cat}: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
