//! `rpg` — train, evaluate, analyze, and serialize ring-generated networks.
//!
//! Exit codes: 0 ok, 1 usage/config error, 2 format error (bad or missing
//! files, corrupt packs), 3 training divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use rpg_core::analysis::{self, Ensemble};
use rpg_core::data::{self, DataBundle};
use rpg_core::error::{Error, Result};
use rpg_core::model::{grad_check, micro_res_net, tiny_net, Mode, ModelConfig, Network, NodeShape};
use rpg_core::pack;
use rpg_core::par;
use rpg_core::ring::{GenMode, Grouping, RingSizing};
use rpg_core::train::{self, TrainConfig, TrainRecord, METRICS_HEADER};

#[derive(Parser)]
#[command(
    name = "rpg",
    version,
    about = "recurrent parameter generator networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a ring-generated model and save a pack.
    Train(TrainArgs),
    /// Evaluate a pack on a dataset's test split.
    Eval(EvalArgs),
    /// Monte Carlo verification of the orthogonality propositions.
    VerifyProps(VerifyArgs),
    /// Train one model per ring size and emit the accuracy-vs-params curve.
    Sweep(SweepArgs),
    /// Fit a power law to a sweep metrics CSV.
    FitPowerlaw(FitArgs),
    /// Magnitude-prune a trained pack, optionally fine-tune, and report.
    Prune(PruneArgs),
    /// Histogram feature-map correlations at a layer of a trained pack.
    AnalyzeFeatures(AnalyzeArgs),
    /// Finite-difference check of the superposed ring gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchKind {
    TinyNet,
    MicroResNet,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Mnist,
    Cifar10,
    /// Seeded synthetic set (no files needed); for smoke tests.
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupingKind {
    Global,
    Block,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeKind {
    #[value(name = "perm+sign")]
    PermSign,
    Perm,
    Sign,
    None,
}

impl ModeKind {
    fn gen_mode(self) -> GenMode {
        match self {
            ModeKind::PermSign => GenMode::BOTH,
            ModeKind::Perm => GenMode::PERM,
            ModeKind::Sign => GenMode::SIGN,
            ModeKind::None => GenMode::NONE,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EnsembleKind {
    Haar,
    PermSign,
    Both,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    /// Directory holding the dataset files (ignored for synthetic).
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Synthetic split sizes.
    #[arg(long, default_value_t = 2048)]
    synth_train: usize,
    #[arg(long, default_value_t = 512)]
    synth_test: usize,
}

impl DataArgs {
    fn shape(&self) -> (usize, usize, usize) {
        match self.dataset {
            DatasetKind::Mnist => (1, 28, 28),
            DatasetKind::Cifar10 | DatasetKind::Synthetic => (3, 32, 32),
        }
    }

    fn augment(&self) -> bool {
        matches!(self.dataset, DatasetKind::Cifar10)
    }

    fn load(&self, seed: u64) -> Result<DataBundle> {
        match self.dataset {
            DatasetKind::Mnist => data::load_mnist_idx(&self.data_dir),
            DatasetKind::Cifar10 => data::load_cifar10_bin(&self.data_dir),
            DatasetKind::Synthetic => Ok(data::synthetic(
                10,
                self.synth_train,
                self.synth_test,
                self.shape(),
                seed ^ 0x5EED_DA7A,
            )),
        }
    }
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    bs: usize,
    #[arg(long, default_value_t = 5e-4)]
    wd: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    lr_gamma: f64,
    /// Comma-separated epoch milestones for the step schedule.
    #[arg(long, default_value = "60,120,160")]
    milestones: String,
    /// Count batch-norm weights in the backbone column.
    #[arg(long, default_value_t = false)]
    count_bn: bool,
}

impl HyperArgs {
    fn train_config(&self, augment: bool) -> Result<TrainConfig> {
        let lr_milestones = parse_usize_list(&self.milestones)?;
        let cfg = TrainConfig {
            batch_size: self.bs,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.wd,
            lr_gamma: self.lr_gamma,
            lr_milestones,
            seed: self.seed,
            augment,
            count_bn: self.count_bn,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum)]
    arch: ArchKind,
    /// Base channel width of the architecture.
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Ring capacity: absolute element count (`45000`) or percentage of
    /// the dense kernel count (`50%`).
    #[arg(long, default_value = "50%")]
    ring_size: String,
    #[arg(long, value_enum, default_value_t = GroupingKind::Global)]
    grouping: GroupingKind,
    #[arg(long, value_enum, default_value_t = ModeKind::PermSign)]
    mode: ModeKind,
    /// Keep the classifier head as raw weights instead of generating it.
    #[arg(long, default_value_t = false)]
    head_raw: bool,
}

impl ModelArgs {
    fn config(&self, shape: (usize, usize, usize), classes: usize) -> ModelConfig {
        match self.arch {
            ArchKind::TinyNet => tiny_net(shape, classes, self.width, !self.head_raw),
            ArchKind::MicroResNet => micro_res_net(shape, classes, self.width, !self.head_raw),
        }
    }

    fn grouping(&self) -> Grouping {
        match self.grouping {
            GroupingKind::Global => Grouping::Global,
            GroupingKind::Block => Grouping::PerBlock,
        }
    }

    fn build(
        &self,
        shape: (usize, usize, usize),
        classes: usize,
        seed: u64,
    ) -> Result<Network<f32>> {
        let cfg = self.config(shape, classes);
        let sizing = parse_ring_size(&self.ring_size, &cfg)?;
        Network::build(cfg, self.grouping(), sizing, self.mode.gen_mode(), seed)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Output pack path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV path (stdout if omitted).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pack: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated vector dimensions.
    #[arg(long, default_value = "4,9,27,64")]
    m: String,
    #[arg(long, default_value_t = 100_000)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = EnsembleKind::Both)]
    ensemble: EnsembleKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stats CSV path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Comma-separated ring sizes (absolute or percentages).
    #[arg(long, default_value = "100%,50%,25%,10%,2%")]
    ring_sizes: String,
    /// Sweep summary CSV path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for per-size metrics CSVs and packs.
    #[arg(long)]
    artifacts: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Sweep CSV with `backbone_params` and `val_acc` columns.
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    pack: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    finetune_epochs: usize,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Output pack path for the pruned model.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fine-tune metrics CSV path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    pack: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Node index whose activations are correlated.
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    /// Histogram CSV path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value_t = ArchKind::MicroResNet)]
    arch: ArchKind,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = 200)]
    ring_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad integer list entry '{t}'")))
        })
        .collect()
}

fn parse_ring_size(token: &str, cfg: &ModelConfig) -> Result<RingSizing> {
    let token = token.trim();
    if let Some(pct) = token.strip_suffix('%') {
        let pct: f64 = pct
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad ring size '{token}'")))?;
        if pct <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ring size percentage must be positive, got '{token}'"
            )));
        }
        let total = ((pct / 100.0) * cfg.dense_kernel_params() as f64).round() as usize;
        Ok(RingSizing::Total(total.max(1)))
    } else {
        let n: usize = token
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad ring size '{token}'")))?;
        Ok(RingSizing::Total(n))
    }
}

/// Writes to the path, or stdout when none is given.
fn emit(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            fs::write(p, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn read_pack(path: &Path) -> Result<Network<f32>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    pack::unpack(&bytes)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let bundle = args.data.load(args.hyper.seed)?;
    let shape = (
        bundle.train.channels,
        bundle.train.height,
        bundle.train.width,
    );
    let mut net = args
        .model
        .build(shape, bundle.train.classes, args.hyper.seed)?;
    let cfg = args.hyper.train_config(args.data.augment())?;

    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let result = train::train_model(
        &mut net,
        &bundle.train,
        &bundle.test,
        &cfg,
        None,
        |r: &TrainRecord| {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        },
    );
    emit(args.metrics.as_deref(), &csv)?;
    let records = result?;

    if let Some(out) = &args.out {
        fs::write(out, pack::pack(&net)?)?;
    }
    if let Some(last) = records.last() {
        eprintln!(
            "trained {} epochs: val_acc={:.4} backbone_params={}",
            records.len(),
            last.val_acc,
            last.backbone_params
        );
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let net = read_pack(&args.pack)?;
    let bundle = args.data.load(net.master_seed)?;
    let acc = train::evaluate(&net, &bundle.test, 256)?;
    println!("val_acc={acc:.6}");
    Ok(())
}

const PROPS_HEADER: &str = "m,ensemble,trials,mean_inner,std_inner,stderr_inner,\
mean_cos2,std_cos2,cos2_expected,prop1_pass,prop2_pass";

fn run_verify(args: VerifyArgs) -> Result<()> {
    let ms = parse_usize_list(&args.m)?;
    if ms.is_empty() || ms.contains(&0) {
        return Err(Error::InvalidArgument(
            "verify-props: need positive dimensions".into(),
        ));
    }
    if args.trials < 1000 {
        return Err(Error::InvalidArgument(
            "verify-props: at least 1000 trials required".into(),
        ));
    }
    let ensembles: Vec<Ensemble> = match args.ensemble {
        EnsembleKind::Haar => vec![Ensemble::Haar],
        EnsembleKind::PermSign => vec![Ensemble::PermSign],
        EnsembleKind::Both => vec![Ensemble::Haar, Ensemble::PermSign],
    };
    let mut csv = String::from(PROPS_HEADER);
    csv.push('\n');
    for &m in &ms {
        for &ensemble in &ensembles {
            let stats = analysis::verify_props(m, args.trials, ensemble, args.seed);
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                stats.m,
                ensemble,
                stats.trials,
                stats.mean_inner,
                stats.std_inner,
                stats.stderr_inner(),
                stats.mean_cos2,
                stats.std_cos2,
                stats.cos2_expected(),
                stats.prop1_pass(),
                stats.prop2_pass()
            ));
        }
    }
    emit(args.out.as_deref(), &csv)
}

const SWEEP_HEADER: &str = "ring_size,backbone_params,total_params,train_loss,train_acc,val_acc";

fn run_sweep(args: SweepArgs) -> Result<()> {
    let bundle = args.data.load(args.hyper.seed)?;
    let shape = (
        bundle.train.channels,
        bundle.train.height,
        bundle.train.width,
    );
    let classes = bundle.train.classes;
    let tokens: Vec<String> = args
        .ring_sizes
        .split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("sweep: no ring sizes given".into()));
    }
    if let Some(dir) = &args.artifacts {
        fs::create_dir_all(dir)?;
    }
    let cfg = args.hyper.train_config(args.data.augment())?;

    // Each configuration is independent; results merge in ring-size order.
    let results: Vec<Result<(String, TrainRecord)>> = par::map_collect(tokens.len(), |i| {
        let token = &tokens[i];
        let model_cfg = args.model.config(shape, classes);
        let sizing = parse_ring_size(token, &model_cfg)?;
        let mut net = Network::build(
            model_cfg,
            args.model.grouping(),
            sizing,
            args.model.mode.gen_mode(),
            args.hyper.seed,
        )?;
        let mut rows = String::from(METRICS_HEADER);
        rows.push('\n');
        let records = train::train_model(
            &mut net,
            &bundle.train,
            &bundle.test,
            &cfg,
            None,
            |r: &TrainRecord| {
                rows.push_str(&r.csv_row());
                rows.push('\n');
            },
        )?;
        let last = records
            .last()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("sweep: training produced no epochs".into()))?;
        if let Some(dir) = &args.artifacts {
            let tag = token.replace('%', "pct");
            fs::write(dir.join(format!("metrics_{tag}.csv")), &rows)?;
            fs::write(dir.join(format!("model_{tag}.rpg")), pack::pack(&net)?)?;
        }
        Ok((token.clone(), last))
    });

    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in results {
        let (token, rec) = r?;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            token,
            rec.backbone_params,
            rec.total_params,
            rec.train_loss,
            rec.train_acc,
            rec.val_acc
        ));
    }
    emit(args.out.as_deref(), &csv)
}

fn run_fit(args: FitArgs) -> Result<()> {
    let text = fs::read_to_string(&args.metrics)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", args.metrics.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("fit-powerlaw: empty csv".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|&c| c == name)
            .ok_or_else(|| Error::Format(format!("fit-powerlaw: csv lacks a '{name}' column")))
    };
    let n_col = find("backbone_params")?;
    let y_col = find("val_acc")?;
    let mut points = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |i: usize| -> Result<f64> {
            fields
                .get(i)
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("fit-powerlaw: bad row '{line}'")))
        };
        points.push((parse(n_col)?, parse(y_col)?));
    }
    let fit = analysis::fit_power_law(&points)?;
    println!("a={} b={} r2={}", fit.a, fit.b, fit.r_squared);
    Ok(())
}

fn run_prune(args: PruneArgs) -> Result<()> {
    if !(0.0..1.0).contains(&args.fraction) {
        return Err(Error::InvalidArgument(
            "prune: fraction must be in [0, 1)".into(),
        ));
    }
    let mut net = read_pack(&args.pack)?;
    let bundle = args.data.load(net.master_seed)?;
    let acc_before = train::evaluate(&net, &bundle.test, 256)?;
    let masks = train::prune_network(&mut net, args.fraction)?;
    let acc_pruned = train::evaluate(&net, &bundle.test, 256)?;

    let mut acc_final = acc_pruned;
    if args.finetune_epochs > 0 {
        let mut cfg = args.hyper.train_config(args.data.augment())?;
        cfg.epochs = args.finetune_epochs;
        let mut csv = String::from(METRICS_HEADER);
        csv.push('\n');
        let records = train::train_model(
            &mut net,
            &bundle.train,
            &bundle.test,
            &cfg,
            Some(&masks),
            |r: &TrainRecord| {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            },
        )?;
        if let Some(p) = &args.metrics {
            fs::write(p, &csv)?;
        }
        acc_final = records.last().map(|r| r.val_acc).unwrap_or(acc_pruned);
    }
    if let Some(out) = &args.out {
        fs::write(out, pack::pack(&net)?)?;
    }
    let pruned: usize = masks.iter().map(|m| m.iter().filter(|&&d| d).count()).sum();
    println!(
        "pruned={pruned} fraction={} acc_before={acc_before:.6} acc_pruned={acc_pruned:.6} acc_final={acc_final:.6}",
        args.fraction
    );
    Ok(())
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let net = read_pack(&args.pack)?;
    let bundle = args.data.load(net.master_seed)?;
    if args.layer >= net.config.nodes.len() {
        return Err(Error::InvalidArgument(format!(
            "analyze-features: layer {} out of range ({} nodes)",
            args.layer,
            net.config.nodes.len()
        )));
    }
    match net.node_shapes()[args.layer] {
        NodeShape::Chw(c, _, _) if c >= 2 => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "analyze-features: node {} has shape {other:?}, need >= 2 channels",
                args.layer
            )))
        }
    }
    let count = args.samples.min(bundle.test.len()).max(1);
    let idxs: Vec<usize> = (0..count).collect();
    let (x, _) = bundle.test.batch::<f32>(&idxs);
    let fp = net.forward(&x, Mode::Eval)?;
    let hist = analysis::feature_similarity(&fp.values[args.layer], analysis::SIMILARITY_BINS)?;
    if hist.zero_variance_channels > 0 {
        eprintln!(
            "warning: {} zero-variance channels (correlation taken as 0)",
            hist.zero_variance_channels
        );
    }
    let mut csv = String::from("bin_lo,bin_hi,fraction\n");
    let nb = hist.bins.len() as f64;
    for (i, frac) in hist.bins.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{}\n",
            i as f64 / nb,
            (i + 1) as f64 / nb,
            frac
        ));
    }
    emit(args.out.as_deref(), &csv)
}

fn run_grad_check(args: GradCheckArgs) -> Result<()> {
    let shape = match args.arch {
        ArchKind::TinyNet => (1, 28, 28),
        ArchKind::MicroResNet => (3, 32, 32),
    };
    let classes = 10;
    let cfg = match args.arch {
        ArchKind::TinyNet => tiny_net(shape, classes, args.width, true),
        ArchKind::MicroResNet => micro_res_net(shape, classes, args.width, true),
    };
    let net: Network<f64> = Network::build(
        cfg,
        Grouping::Global,
        RingSizing::Total(args.ring_size),
        GenMode::BOTH,
        args.seed,
    )?;
    let bundle = data::synthetic(classes, args.batch.max(1), 1, shape, args.seed ^ 0xFD);
    let idxs: Vec<usize> = (0..args.batch.max(1)).collect();
    let (x, labels) = bundle.train.batch::<f64>(&idxs);
    let report = grad_check(&net, &x, &labels, args.tolerance)?;
    println!(
        "max_rel_err={} elements={} tolerance={} pass={}",
        report.max_rel_err, report.elements, report.tolerance, report.pass
    );
    for e in &report.worst {
        eprintln!(
            "  ring {} [{}]: analytic={} numeric={} rel_err={}",
            e.ring, e.index, e.analytic, e.numeric, e.rel_err
        );
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::VerifyProps(a) => run_verify(a),
        Cmd::Sweep(a) => run_sweep(a),
        Cmd::FitPowerlaw(a) => run_fit(a),
        Cmd::Prune(a) => run_prune(a),
        Cmd::AnalyzeFeatures(a) => run_analyze(a),
        Cmd::GradCheck(a) => run_grad_check(a),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Format(_)
        | Error::Checksum { .. }
        | Error::Version(_)
        | Error::Io(_)
        | Error::Json(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let msg = e.to_string();
                let line = msg.lines().next().unwrap_or("bad usage");
                eprintln!("{line}");
                std::process::exit(1);
            }
            // --help / --version
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
    let _ = std::io::stdout().flush();
}
