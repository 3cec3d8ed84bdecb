//! Command implementations behind the `losa` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use losa::audit::{composite_gradcheck, node_counts, NodeCounts};
use losa::checkpoint::Checkpoint;
use losa::data::{self, Dataset, GeneratorConfig};
use losa::fusion::GateInit;
use losa::head::detections_json;
use losa::metrics::EvalConfig;
use losa::model::{Mode, Model, ModelConfig};
use losa::tensor::gradcheck::{first_failure, op_suite, CheckOutcome};
use losa::train::{evaluate, gate_report_csv, metrics_csv, prepare, train, OptimConfig, PreparedVideo, TrainOptions};

pub const SEED_ENV: &str = "LOSA_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] losa::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use losa::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Check(_) => 1,
            CliError::Core(e) => match e {
                E::Config { .. } | E::Generation(_) => 2,
                E::Io(_) | E::Json(_) | E::MissingFile(_) | E::Truncated { .. } | E::Version { .. } | E::Malformed { .. } => 3,
                E::Input(_) => 3,
                E::Audit(_) => 4,
                E::Mismatch(_) => 5,
                E::Dimension { .. } | E::Contract(_) => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub num_test: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_dir: "data/train".into(),
            test_dir: "data/test".into(),
            num_test: 50,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// Layer subsets for the layers axis; empty derives all / deep half / shallow half.
    pub layer_subsets: Vec<Vec<usize>>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            layer_subsets: vec![],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub train: TrainOptions,
    pub ablate: AblateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_owned()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.generator.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        if self.ablate.seeds.is_empty() {
            return Err(losa::Error::config("ablate.seeds", "need at least one seed").into());
        }
        Ok(())
    }

    fn out(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(io_err(&self.output_dir))?;
        Ok(self.output_dir.join(name))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Losa,
    HeadOnly,
    FullBackbone,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Losa => Mode::Losa,
            ModeArg::HeadOnly => Mode::HeadOnly,
            ModeArg::FullBackbone => Mode::FullBackbone,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    Zero,
    Random,
    Ones,
}

impl From<GateArg> for GateInit {
    fn from(g: GateArg) -> Self {
        match g {
            GateArg::Zero => GateInit::Zero,
            GateArg::Random => GateInit::Random,
            GateArg::Ones => GateInit::Ones,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Gating,
    Layers,
    Components,
}

#[derive(Debug, Parser)]
#[command(name = "losa", version, about = "Long-short-range adapters for temporal action localization")]
pub struct Cli {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and LOSA_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub train_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub test_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic train and test splits.
    Generate {
        #[arg(long)]
        num_videos: Option<usize>,
        #[arg(long)]
        num_test: Option<usize>,
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Train one model and write checkpoint, audit.json, metrics.csv, gate_report.csv.
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        gate_init: Option<GateArg>,
        /// Comma-separated 1-based adapter layers.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; the configured test split by default.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train every variant along one axis over the configured seeds.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Finite-difference checks of every op and of the adapter+fusion+head stack.
    Gradcheck {
        /// Corrupt one op's backward rule.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Tape-node comparison of the three training modes on one video.
    Memreport {
        #[arg(long, default_value_t = 256)]
        video_len: usize,
    },
}

/// Config file, then LOSA_SEED, then flags.
pub fn resolve_config(cli: &Cli, env_seed: Option<&str>) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}: `{s}` is not an unsigned integer")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(d) = &cli.train_dir {
        cfg.data.train_dir = d.clone();
    }
    if let Some(d) = &cli.test_dir {
        cfg.data.test_dir = d.clone();
    }
    match &cli.command {
        Command::Generate {
            num_videos,
            num_test,
            num_classes,
        } => {
            if let Some(n) = num_videos {
                cfg.data.generator.num_videos = *n;
            }
            if let Some(n) = num_test {
                cfg.data.num_test = *n;
            }
            if let Some(k) = num_classes {
                cfg.data.generator.num_classes = *k;
            }
        }
        Command::Train {
            mode,
            gate_init,
            layers,
            epochs,
            lr,
        } => {
            if let Some(m) = mode {
                cfg.model.mode = (*m).into();
            }
            if let Some(g) = gate_init {
                cfg.model.fusion.gate_init = (*g).into();
            }
            if let Some(l) = layers {
                cfg.model.adapter.layers = l.clone();
            }
            if let Some(e) = epochs {
                set_epochs(&mut cfg.optim, *e);
            }
            if let Some(lr) = lr {
                cfg.optim.base_lr = *lr;
            }
        }
        Command::Ablate { seeds, epochs, .. } => {
            if let Some(s) = seeds {
                cfg.ablate.seeds = s.clone();
            }
            if let Some(e) = epochs {
                set_epochs(&mut cfg.optim, *e);
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Keeps warmup at the same fraction of the run.
fn set_epochs(optim: &mut OptimConfig, epochs: usize) {
    if optim.total_epochs > 0 {
        optim.warmup_epochs *= epochs as f64 / optim.total_epochs as f64;
    }
    optim.total_epochs = epochs;
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn cmd_generate(cfg: &RunConfig) -> CliResult<String> {
    let (train_set, test_set) = data::generate_split(&cfg.data.generator, cfg.data.num_test)?;
    data::save(&train_set, &cfg.data.train_dir)?;
    data::save(&test_set, &cfg.data.test_dir)?;
    Ok(format!(
        "wrote {} train videos to {} and {} test videos to {}\n",
        train_set.len(),
        cfg.data.train_dir.display(),
        test_set.len(),
        cfg.data.test_dir.display()
    ))
}

fn check_compatible(model: &ModelConfig, ds: &Dataset) -> CliResult<()> {
    if ds.num_classes != model.head.num_classes {
        return Err(losa::Error::Mismatch(format!(
            "dataset has {} classes, model head has {}",
            ds.num_classes, model.head.num_classes
        ))
        .into());
    }
    let b = &model.backbone;
    if let Some(s) = ds
        .samples
        .iter()
        .find(|s| s.video.height() != b.frame_height || s.video.width() != b.frame_width)
    {
        return Err(losa::Error::Mismatch(format!(
            "video {} is {}x{}, backbone expects {}x{}",
            s.video.video_id,
            s.video.height(),
            s.video.width(),
            b.frame_height,
            b.frame_width
        ))
        .into());
    }
    Ok(())
}

/// Loaded and prepared splits; features are cached whenever the backbone is frozen.
pub struct Splits {
    pub train: Vec<PreparedVideo>,
    pub test: Vec<PreparedVideo>,
}

pub fn load_splits(cfg: &RunConfig, model_cfg: &ModelConfig) -> CliResult<Splits> {
    let train_ds = data::load(&cfg.data.train_dir)?;
    let test_ds = data::load(&cfg.data.test_dir)?;
    check_compatible(model_cfg, &train_ds)?;
    check_compatible(model_cfg, &test_ds)?;
    let probe = Model::new(model_cfg, cfg.seed)?;
    let cache = model_cfg.mode != Mode::FullBackbone;
    Ok(Splits {
        train: prepare(&train_ds, &probe, cache)?,
        test: prepare(&test_ds, &probe, cache)?,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<String> {
    let splits = load_splits(cfg, &cfg.model)?;
    let out = train(&cfg.model, &cfg.optim, &cfg.eval, &cfg.train, &splits.train, &splits.test, cfg.seed)?;
    Checkpoint::from_model(&out.model, cfg.seed).save(&cfg.out("model.ckpt")?)?;
    write(&cfg.out("audit.json")?, serde_json::to_string_pretty(&out.audit).map_err(losa::Error::from)? + "\n")?;
    write(&cfg.out("metrics.csv")?, metrics_csv(&out.history))?;
    write(&cfg.out("gate_report.csv")?, gate_report_csv(&out.model.gate_report()))?;
    let mut msg = format!(
        "trained {} for {} epochs: learnable_fraction={:.4} tape_nodes(head_only/losa/full)={}/{}/{}\n",
        cfg.model.mode.name(),
        cfg.optim.total_epochs,
        out.audit.learnable_fraction,
        out.audit.tape_nodes_head_only,
        out.audit.tape_nodes_losa,
        out.audit.tape_nodes_fullbackbone
    );
    if let Some(m) = out.test_avg_map() {
        let _ = writeln!(msg, "test avg_mAP={m:.4}");
    }
    let _ = writeln!(msg, "artifacts in {}", cfg.output_dir.display());
    Ok(msg)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data_dir: Option<&Path>) -> CliResult<String> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.into_model()?;
    let ds = data::load(data_dir.unwrap_or(&cfg.data.test_dir))?;
    check_compatible(model.config(), &ds)?;
    let videos = prepare(&ds, &model, model.backbone.is_frozen())?;
    let ev = evaluate(&model, &videos, &cfg.eval)?;
    write(&cfg.out("eval_metrics.csv")?, ev.report.to_csv())?;
    let by_video = videos
        .iter()
        .zip(&ev.detections)
        .map(|(v, d)| (v.video.video_id.clone(), d.clone()))
        .collect();
    write(&cfg.out("detections.json")?, detections_json(&by_video)? + "\n")?;
    let mut msg = String::new();
    for (t, m) in ev.report.thresholds.iter().zip(&ev.report.map) {
        let _ = writeln!(msg, "mAP@{t:.2}={m:.4}");
    }
    let _ = writeln!(msg, "avg_mAP={:.4}", ev.report.avg_map);
    Ok(msg)
}

/// The variants trained along `axis`, in report order.
pub fn ablation_variants(cfg: &RunConfig, axis: Axis) -> CliResult<Vec<(String, ModelConfig)>> {
    let mut base = cfg.model.clone();
    base.mode = Mode::Losa;
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let variants = match axis {
        Axis::Components => vec![
            ("full".to_owned(), base.clone()),
            ("-long".into(), with(&|c| c.adapter.long = false)),
            ("-short".into(), with(&|c| c.adapter.short = false)),
            ("-fusion".into(), with(&|c| c.fusion.gated = false)),
        ],
        Axis::Gating => GateInit::ALL
            .iter()
            .map(|&g| (g.name().to_owned(), with(&|c| c.fusion.gate_init = g)))
            .collect(),
        Axis::Layers => {
            let subsets = if cfg.ablate.layer_subsets.is_empty() {
                default_layer_subsets(base.backbone.num_layers)
            } else {
                cfg.ablate
                    .layer_subsets
                    .iter()
                    .map(|s| {
                        let name = s.iter().map(usize::to_string).collect::<Vec<_>>().join("+");
                        (name, s.clone())
                    })
                    .collect()
            };
            subsets
                .into_iter()
                .map(|(name, layers)| (name, with(&|c| c.adapter.layers = layers.clone())))
                .collect()
        }
    };
    for (_, c) in &variants {
        c.validate()?;
    }
    Ok(variants)
}

/// All intermediate layers, the deeper half and the shallower half.
pub fn default_layer_subsets(num_layers: usize) -> Vec<(String, Vec<usize>)> {
    let inter: Vec<usize> = (1..num_layers).collect();
    let half = inter.len().div_ceil(2);
    vec![
        ("all".into(), inter.clone()),
        ("deep-half".into(), inter[inter.len() - half..].to_vec()),
        ("shallow-half".into(), inter[..half].to_vec()),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub avg_maps: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.avg_maps.iter().sum::<f64>() / self.avg_maps.len() as f64
    }
}

pub fn ablation_csv(seeds: &[u64], rows: &[AblationRow]) -> String {
    let mut s = String::from("variant");
    for seed in seeds {
        let _ = write!(s, ",seed_{seed}");
    }
    s.push_str(",mean_avg_mAP\n");
    for r in rows {
        s.push_str(&r.variant);
        for m in &r.avg_maps {
            let _ = write!(s, ",{m:.6}");
        }
        let _ = writeln!(s, ",{:.6}", r.mean());
    }
    s
}

pub fn run_ablation(cfg: &RunConfig, axis: Axis, splits: &Splits) -> CliResult<Vec<AblationRow>> {
    let opts = TrainOptions {
        eval_every: 0,
        ..cfg.train.clone()
    };
    ablation_variants(cfg, axis)?
        .into_iter()
        .map(|(variant, model_cfg)| {
            let avg_maps = cfg
                .ablate
                .seeds
                .iter()
                .map(|&seed| {
                    let out = train(&model_cfg, &cfg.optim, &cfg.eval, &opts, &splits.train, &splits.test, seed)?;
                    out.test_avg_map()
                        .ok_or_else(|| losa::Error::Input("ablation needs a nonempty test split".into()).into())
                })
                .collect::<CliResult<Vec<f64>>>()?;
            Ok(AblationRow { variant, avg_maps })
        })
        .collect()
}

pub fn cmd_ablate(cfg: &RunConfig, axis: Axis) -> CliResult<String> {
    let mut base = cfg.model.clone();
    base.mode = Mode::Losa;
    let splits = load_splits(cfg, &base)?;
    let rows = run_ablation(cfg, axis, &splits)?;
    let csv = ablation_csv(&cfg.ablate.seeds, &rows);
    let name = match axis {
        Axis::Gating => "ablation_gating.csv",
        Axis::Layers => "ablation_layers.csv",
        Axis::Components => "ablation_components.csv",
    };
    write(&cfg.out(name)?, &csv)?;
    Ok(csv)
}

pub fn gradcheck_outcomes(fault: Option<&'static str>) -> CliResult<Vec<CheckOutcome>> {
    let mut outcomes = op_suite(fault)?;
    outcomes.push(composite_gradcheck(fault)?);
    Ok(outcomes)
}

pub fn cmd_gradcheck(fault: Option<&str>) -> CliResult<String> {
    // The tape keys faults by op name, which must outlive it.
    let fault: Option<&'static str> = fault.map(|f| &*Box::leak(f.to_owned().into_boxed_str()));
    let outcomes = gradcheck_outcomes(fault)?;
    let mut msg = String::new();
    for o in &outcomes {
        let _ = writeln!(
            msg,
            "{} {:<24} params={:<5} max_rel_err={:.3e}",
            if o.passed { "ok  " } else { "FAIL" },
            o.name,
            o.params,
            o.max_rel_err
        );
    }
    match first_failure(&outcomes) {
        Some(f) => Err(CliError::Check(format!("{} (max_rel_err={:.3e})\n{msg}", f.name, f.max_rel_err))),
        None => Ok(msg),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MemReport {
    pub video_len: usize,
    pub clips: usize,
    pub tape_nodes_head_only: usize,
    pub tape_nodes_losa: usize,
    pub tape_nodes_fullbackbone: usize,
    pub losa_over_full: f64,
    pub ordered: bool,
}

pub fn memreport(cfg: &RunConfig, video_len: usize) -> CliResult<MemReport> {
    let gen = GeneratorConfig {
        num_videos: 1,
        min_len: video_len,
        max_len: video_len,
        num_classes: cfg.model.head.num_classes,
        height: cfg.model.backbone.frame_height,
        width: cfg.model.backbone.frame_width,
        seed: cfg.seed,
        ..cfg.data.generator.clone()
    };
    let ds = data::generate(&gen)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.mode = Mode::Losa;
    let probe = Model::new(&model_cfg, cfg.seed)?;
    let pv = prepare(&ds, &probe, true)?.remove(0);
    let counts: NodeCounts = node_counts(&model_cfg, &pv, cfg.seed)?;
    Ok(MemReport {
        video_len,
        clips: model_cfg.clip.num_clips(video_len),
        tape_nodes_head_only: counts.head_only,
        tape_nodes_losa: counts.losa,
        tape_nodes_fullbackbone: counts.full_backbone,
        losa_over_full: counts.losa_ratio(),
        ordered: counts.ordered(),
    })
}

pub fn cmd_memreport(cfg: &RunConfig, video_len: usize) -> CliResult<String> {
    let r = memreport(cfg, video_len)?;
    write(&cfg.out("memreport.json")?, serde_json::to_string_pretty(&r).map_err(losa::Error::from)? + "\n")?;
    let msg = format!(
        "video_len={} clips={}\ntape_nodes head_only={} losa={} full_backbone={}\nlosa/full={:.4}\n",
        r.video_len, r.clips, r.tape_nodes_head_only, r.tape_nodes_losa, r.tape_nodes_fullbackbone, r.losa_over_full
    );
    if !r.ordered {
        return Err(CliError::Check(format!("tape-node ordering violated\n{msg}")));
    }
    Ok(msg)
}

pub fn run(cli: &Cli, env_seed: Option<&str>) -> CliResult<String> {
    let cfg = resolve_config(cli, env_seed)?;
    match &cli.command {
        Command::Generate { .. } => cmd_generate(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Eval { checkpoint, data } => cmd_eval(&cfg, checkpoint, data.as_deref()),
        Command::Ablate { axis, .. } => cmd_ablate(&cfg, *axis),
        Command::Gradcheck { fault } => cmd_gradcheck(fault.as_deref()),
        Command::Memreport { video_len } => cmd_memreport(&cfg, *video_len),
    }
}
