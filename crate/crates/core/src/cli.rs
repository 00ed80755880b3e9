//! Command-line front end.
//!
//! Every subcommand resolves its configuration completely (all defaults
//! materialized), does its work and then writes a [`RunManifest`] describing
//! the run. `spcx replay <manifest>` re-executes a run from its manifest.
//!
//! Images are PNG, numeric dumps CSV, configs and manifests JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::contextual::{
    spcx_evaluate, Aggregation, ContextualConfig, DEFAULT_BANDWIDTH, DEFAULT_EPSILON,
};
use crate::degrade::{degrade, DegradationConfig, StageOrder};
use crate::hpc::{hpc_forward, GeneratorSpec, ModulationHead, ToyGenerator};
use crate::io::{load_png, save_png};
use crate::metrics::{psnr, ssim, verify, EmbeddingSet, MissingLabel};
use crate::objective::{
    l_rec, DiscriminatorStub, FeatureExtractor, IdentityExtractor, LossWeights, ObjectiveModels,
    RandomProjection,
};
use crate::optimize::{optimize_image, random_init, LossKind, OptimizeConfig};
use crate::pk::{pk_decompose, PkMode};
use crate::rng::SeededRng;
use crate::{Error, ImageTensor, Result};

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "SPCX_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "spcx",
    version,
    about = "Sub-image contextual distance, turbulence simulation and pseudo-result tools",
    after_help = "Set SPCX_THREADS to change the default number of worker threads."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize, Deserialize, PartialEq)]
#[serde(tag = "subcommand", content = "config", rename_all = "kebab-case")]
pub enum Command {
    /// Simulate turbulence: blur, elastic warp and noise
    Degrade(DegradeArgs),
    /// Split an image into sub-images and optionally dump them
    Pk(PkArgs),
    /// Contextual distance between the sub-images of two images
    Distance(DistanceArgs),
    /// Reconstruction objective of pseudo results against a target
    Loss(LossArgs),
    /// Gradient descent on pixels under the contextual or L2 loss
    Optimize(OptimizeArgs),
    /// Branching generator forward pass with mean and uncertainty maps
    Generate(GenerateArgs),
    /// PSNR and SSIM between a reference and a test image
    Metrics(MetricsArgs),
    /// Top-k verification accuracy and mean cosine similarity of embeddings
    Verify(VerifyArgs),
    /// Run the built-in property checks
    Selftest(SelftestArgs),
    /// Re-run a command from its manifest
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Degrade(_) => "degrade",
            Command::Pk(_) => "pk",
            Command::Distance(_) => "distance",
            Command::Loss(_) => "loss",
            Command::Optimize(_) => "optimize",
            Command::Generate(_) => "generate",
            Command::Metrics(_) => "metrics",
            Command::Verify(_) => "verify",
            Command::Selftest(_) => "selftest",
            Command::Replay(_) => "replay",
        }
    }
}

/// Everything needed to reproduce one invocation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Block,
    Phase,
}

impl From<ModeArg> for PkMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Block => PkMode::Block,
            ModeArg::Phase => PkMode::Phase,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FormArg {
    Max,
    Sum,
}

impl From<FormArg> for Aggregation {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Max => Aggregation::MaxLog,
            FormArg::Sum => Aggregation::SumLog,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OrderArg {
    BlurWarp,
    WarpBlur,
}

impl From<OrderArg> for StageOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::BlurWarp => StageOrder::BlurWarp,
            OrderArg::WarpBlur => StageOrder::WarpBlur,
        }
    }
}

impl From<StageOrder> for OrderArg {
    fn from(o: StageOrder) -> Self {
        match o {
            StageOrder::BlurWarp => OrderArg::BlurWarp,
            StageOrder::WarpBlur => OrderArg::WarpBlur,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossArg {
    Spcx,
    L2,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Spcx => LossKind::Spcx,
            LossArg::L2 => LossKind::L2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InitArg {
    Random,
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorArg {
    Identity,
    Projection,
}

/// Sub-image contextual distance options shared by several subcommands.
#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct ContextualArgs {
    /// Sub-image rate r; must divide height and width
    #[arg(long, default_value_t = 32)]
    pub rate: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Block)]
    pub mode: ModeArg,
    /// Aggregation: mean-of-max then log, or mean of log row sums
    #[arg(long, value_enum, default_value_t = FormArg::Max)]
    pub form: FormArg,
    /// Kernel bandwidth h
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH, allow_negative_numbers = true)]
    pub bandwidth: f64,
    /// Normalization and log guard
    #[arg(long, default_value_t = DEFAULT_EPSILON, allow_negative_numbers = true)]
    pub epsilon: f64,
    /// Subtract each collection's mean vector before cosine distances
    #[arg(long)]
    pub mean_shift: bool,
}

impl ContextualArgs {
    fn config(&self) -> ContextualConfig {
        ContextualConfig {
            bandwidth: self.bandwidth,
            epsilon: self.epsilon,
            form: self.form.into(),
            rate: self.rate,
            mode: self.mode.into(),
            mean_shift: self.mean_shift,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Elastic displacement magnitude in pixels [default: 34 × size/512]
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Elastic field smoothing std in pixels [default: 4 × size/512]
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    /// Gaussian blur std in pixels [default: 3 × size/512]
    #[arg(long, allow_negative_numbers = true)]
    pub blur_sigma: Option<f64>,
    /// Additive Gaussian noise std [default: 0.01]
    #[arg(long, allow_negative_numbers = true)]
    pub noise_std: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: blur-warp]
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
    /// JSON file with keys alpha, sigma, blur-sigma, noise-std, seed, order;
    /// explicit flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest path [default: <output>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct PkArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub rate: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Block)]
    pub mode: ModeArg,
    /// Directory receiving one PNG per sub-image
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Manifest path [default: <dump>/manifest.json when dumping]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct DistanceArgs {
    #[arg(long)]
    pub input_a: PathBuf,
    #[arg(long)]
    pub input_b: PathBuf,
    #[command(flatten)]
    pub contextual: ContextualArgs,
    /// Write the kernel matrix A as CSV
    #[arg(long)]
    pub dump_kernel: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct LossArgs {
    /// Clean target image
    #[arg(long)]
    pub target: PathBuf,
    /// Pseudo results (2^g images)
    #[arg(long, num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    #[command(flatten)]
    pub contextual: ContextualArgs,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub lambda_adv: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub lambda_per: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub lambda_id: f64,
    /// Perceptual feature extractor
    #[arg(long, value_enum, default_value_t = ExtractorArg::Projection)]
    pub perceptual: ExtractorArg,
    /// Identity feature extractor
    #[arg(long, value_enum, default_value_t = ExtractorArg::Projection)]
    pub identity: ExtractorArg,
    /// Seed of the projections (seed, seed+1) and discriminator (seed+2)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct OptimizeArgs {
    #[arg(long, value_enum, default_value_t = LossArg::Spcx)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Initial step size of each backtracking search
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    pub lr: f64,
    #[command(flatten)]
    pub contextual: ContextualArgs,
    /// Seed of the random initial image
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Random)]
    pub init: InitArg,
    /// Initial image when --init input
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub target: PathBuf,
    /// Final image (PNG)
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace [default: <out> with .csv extension]
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub log_every: usize,
    /// Manifest path [default: <out>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct GenerateArgs {
    /// Group depth; 2^g pseudo results
    #[arg(long, default_value_t = 3)]
    pub g: usize,
    /// Seed of the generator and modulation head weights
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the latent vector and modulation feature
    #[arg(long, default_value_t = 1)]
    pub latent_seed: u64,
    /// Length of the modulation feature vector
    #[arg(long, default_value_t = 16)]
    pub feature_len: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Manifest path [default: <out-dir>/manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct MetricsArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// CSV with columns psnr,ssim
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest path [default: <out>.manifest.json when --out is set]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct VerifyArgs {
    /// CSV rows of label,v1..vD
    #[arg(long)]
    pub probes: PathBuf,
    /// CSV rows of label,v1..vD
    #[arg(long)]
    pub gallery: PathBuf,
    /// CSV with columns top1,top3,top5,mean_deg
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Count probes whose label is not in the gallery as misses instead of failing
    #[arg(long)]
    pub lenient: bool,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct SelftestArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize, PartialEq)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Inputs, outputs and seeds gathered while a command runs.
#[derive(Default)]
struct RunRecord {
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Explicit manifest path, or `<subcommand>.manifest.json` in the working
/// directory for commands without a natural output location.
fn manifest_path(explicit: Option<PathBuf>, subcommand: &str) -> PathBuf {
    explicit.unwrap_or_else(|| PathBuf::from(format!("{subcommand}.manifest.json")))
}

fn read_image(path: &Path, record: &mut RunRecord) -> Result<ImageTensor> {
    record.inputs.push(path.to_path_buf());
    load_png(path)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8], record: &mut RunRecord) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    record.outputs.push(path.to_path_buf());
    Ok(())
}

fn write_png(img: &ImageTensor, path: &Path, record: &mut RunRecord) -> Result<()> {
    save_png(img, path)?;
    record.outputs.push(path.to_path_buf());
    Ok(())
}

/// Parses `argv` and runs the command, writing results to `out`.
///
/// Returns the process exit code on success.
pub fn run_from_args<I, T>(argv: I, out: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| usage_error(&e))?;
    run(cli.command, out)
}

/// Converts a clap usage error into a library error carrying its first line.
pub fn usage_error(e: &clap::Error) -> Error {
    let text = e.render().to_string();
    let first = text.lines().next().unwrap_or_default();
    Error::invalid("argv", first.trim_start_matches("error: ").trim())
}

/// The single line printed to stderr when a command fails.
pub fn error_line(e: &Error) -> String {
    format!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "))
}

/// Runs one command and writes its manifest.
pub fn run(command: Command, out: &mut dyn Write) -> Result<i32> {
    if let Command::Replay(args) = command {
        let manifest = RunManifest::load(&args.manifest)?;
        if matches!(manifest.command, Command::Replay(_)) {
            return Err(Error::invalid(
                "manifest",
                "a manifest cannot replay another replay",
            ));
        }
        return run(manifest.command, out);
    }
    let mut record = RunRecord::default();
    let (resolved, code) = match command {
        Command::Degrade(a) => run_degrade(a, out, &mut record)?,
        Command::Pk(a) => run_pk(a, out, &mut record)?,
        Command::Distance(a) => run_distance(a, out, &mut record)?,
        Command::Loss(a) => run_loss(a, out, &mut record)?,
        Command::Optimize(a) => run_optimize(a, out, &mut record)?,
        Command::Generate(a) => run_generate(a, out, &mut record)?,
        Command::Metrics(a) => run_metrics(a, out, &mut record)?,
        Command::Verify(a) => run_verify(a, out, &mut record)?,
        Command::Selftest(a) => run_selftest(a, out, &mut record)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    if let Some(path) = record.manifest.take() {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: resolved,
            seeds: record.seeds,
            inputs: record.inputs,
            outputs: record.outputs,
        }
        .save(path)?;
    }
    Ok(code)
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn run_degrade(
    mut a: DegradeArgs,
    out: &mut dyn Write,
    rec: &mut RunRecord,
) -> Result<(Command, i32)> {
    let img = read_image(&a.input, rec)?;
    let seed = a.seed.unwrap_or(0);
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            rec.inputs.push(path.clone());
            serde_json::from_str::<DegradationConfig>(&text)?
        }
        None => DegradationConfig::scaled_for(img.height().max(img.width()), seed),
    };
    if let Some(v) = a.alpha {
        cfg.elastic_alpha = v;
    }
    if let Some(v) = a.sigma {
        cfg.elastic_sigma = v;
    }
    if let Some(v) = a.blur_sigma {
        cfg.blur_sigma = v;
    }
    if let Some(v) = a.noise_std {
        cfg.noise_std = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.order {
        cfg.order = v.into();
    }
    let degraded = degrade(&img, &cfg)?;
    write_png(&degraded, &a.output, rec)?;
    rec.seeds.push(cfg.seed);
    writeln!(out, "{}", serde_json::to_string(&cfg)?).map_err(io_err)?;

    a.alpha = Some(cfg.elastic_alpha);
    a.sigma = Some(cfg.elastic_sigma);
    a.blur_sigma = Some(cfg.blur_sigma);
    a.noise_std = Some(cfg.noise_std);
    a.seed = Some(cfg.seed);
    a.order = Some(cfg.order.into());
    a.config = None;
    let manifest = a
        .manifest
        .clone()
        .unwrap_or_else(|| with_suffix(&a.output, ".manifest.json"));
    a.manifest = Some(manifest.clone());
    rec.manifest = Some(manifest);
    Ok((Command::Degrade(a), 0))
}

#[derive(Serialize)]
struct PkSummary {
    mode: PkMode,
    rate: usize,
    count: usize,
    dim: usize,
    sub_image_shape: (usize, usize, usize),
}

fn run_pk(mut a: PkArgs, out: &mut dyn Write, rec: &mut RunRecord) -> Result<(Command, i32)> {
    let img = read_image(&a.input, rec)?;
    let coll = pk_decompose(&img, a.rate, a.mode.into())?;
    if let Some(dir) = &a.dump {
        create_dir(dir)?;
        for i in 0..coll.count() {
            write_png(
                &coll.sub_image(i),
                &dir.join(format!("sub_{i:05}.png")),
                rec,
            )?;
        }
    }
    let summary = PkSummary {
        mode: coll.mode(),
        rate: coll.rate(),
        count: coll.count(),
        dim: coll.dim(),
        sub_image_shape: coll.sub_image_shape(),
    };
    writeln!(out, "{}", serde_json::to_string(&summary)?).map_err(io_err)?;
    let fallback = a.dump.as_ref().map(|d| d.join("manifest.json"));
    a.manifest = Some(manifest_path(a.manifest.take().or(fallback), "pk"));
    rec.manifest = a.manifest.clone();
    Ok((Command::Pk(a), 0))
}

fn run_distance(
    mut a: DistanceArgs,
    out: &mut dyn Write,
    rec: &mut RunRecord,
) -> Result<(Command, i32)> {
    let x = read_image(&a.input_a, rec)?;
    let y = read_image(&a.input_b, rec)?;
    let ev = spcx_evaluate(&x, &y, &a.contextual.config())?;
    if let Some(path) = &a.dump_kernel {
        let mut buf = Vec::new();
        ev.kernel.write_csv(&mut buf)?;
        write_file(path, &buf, rec)?;
    }
    writeln!(out, "{}", ev.value).map_err(io_err)?;
    a.manifest = Some(manifest_path(a.manifest.take(), "distance"));
    rec.manifest = a.manifest.clone();
    Ok((Command::Distance(a), 0))
}

fn extractor(kind: ExtractorArg, channels: usize, seed: u64) -> Box<dyn FeatureExtractor> {
    match kind {
        ExtractorArg::Identity => Box::new(IdentityExtractor),
        ExtractorArg::Projection => Box::new(RandomProjection::standard(channels, seed)),
    }
}

fn run_loss(mut a: LossArgs, out: &mut dyn Write, rec: &mut RunRecord) -> Result<(Command, i32)> {
    let target = read_image(&a.target, rec)?;
    let preds = a
        .pred
        .iter()
        .map(|p| read_image(p, rec))
        .collect::<Result<Vec<_>>>()?;
    let set = crate::hpc::PseudoResultSet::from_outputs(preds)?;
    let c = target.channels();
    let phi = extractor(a.perceptual, c, a.seed);
    let eta = extractor(a.identity, c, a.seed.wrapping_add(1));
    let disc = DiscriminatorStub::new(c, a.seed.wrapping_add(2));
    let weights = LossWeights {
        adv: a.lambda_adv,
        per: a.lambda_per,
        id: a.lambda_id,
    };
    let models = ObjectiveModels {
        perceptual: phi.as_ref(),
        identity: eta.as_ref(),
        discriminator: &disc,
    };
    let breakdown = l_rec(&set, &target, &a.contextual.config(), &weights, &models)?;
    rec.seeds.push(a.seed);
    writeln!(out, "{}", serde_json::to_string(&breakdown)?).map_err(io_err)?;
    a.manifest = Some(manifest_path(a.manifest.take(), "loss"));
    rec.manifest = a.manifest.clone();
    Ok((Command::Loss(a), 0))
}

fn run_optimize(
    mut a: OptimizeArgs,
    out: &mut dyn Write,
    rec: &mut RunRecord,
) -> Result<(Command, i32)> {
    let target = read_image(&a.target, rec)?;
    let init = match a.init {
        InitArg::Random => random_init(target.shape(), a.seed),
        InitArg::Input => {
            let path = a
                .input
                .clone()
                .ok_or_else(|| Error::invalid("input", "required when --init input"))?;
            read_image(&path, rec)?
        }
    };
    let oc = OptimizeConfig {
        loss: a.loss.into(),
        steps: a.steps,
        step_size: a.lr,
        contextual: a.contextual.config(),
        seed: a.seed,
        log_every: a.log_every,
    };
    let outcome = optimize_image(&init, &target, &oc)?;
    write_png(&outcome.image, &a.out, rec)?;
    let trace = a
        .trace
        .clone()
        .unwrap_or_else(|| a.out.with_extension("csv"));
    let mut buf = Vec::new();
    outcome.write_trace_csv(&mut buf)?;
    write_file(&trace, &buf, rec)?;
    rec.seeds.push(a.seed);
    writeln!(out, "{}", outcome.final_loss()).map_err(io_err)?;

    a.trace = Some(trace);
    let manifest = a
        .manifest
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".manifest.json"));
    a.manifest = Some(manifest.clone());
    rec.manifest = Some(manifest);
    Ok((Command::Optimize(a), 0))
}

fn run_generate(
    mut a: GenerateArgs,
    out: &mut dyn Write,
    rec: &mut RunRecord,
) -> Result<(Command, i32)> {
    let gen = ToyGenerator::new(&GeneratorSpec::toy(a.g, a.seed))?;
    let head = ModulationHead::new(&gen, a.feature_len, a.seed.wrapping_add(1))?;
    let latent_rng = SeededRng::new(a.latent_seed);
    let latent = latent_rng.fork(0).normal(1.0, gen.latent_dim());
    let feature = latent_rng.fork(1).normal(1.0, a.feature_len);
    let mods = head.encode(&feature)?;
    let set = hpc_forward(&gen, &latent, &mods)?;

    create_dir(&a.out_dir)?;
    for (i, img) in set.outputs().iter().enumerate() {
        write_png(img, &a.out_dir.join(format!("pseudo_{i:02}.png")), rec)?;
    }
    write_png(set.mean_image(), &a.out_dir.join("mean.png"), rec)?;
    let var = set.uncertainty();
    let lo = var.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = var.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let display = if hi > lo {
        var.map(|v| (v - lo) / (hi - lo))
    } else {
        var.map(|_| 0.0)
    };
    write_png(&display, &a.out_dir.join("uncertainty.png"), rec)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["y", "x", "channel", "variance"])?;
    let (h, wd, c) = var.shape();
    for y in 0..h {
        for x in 0..wd {
            for ch in 0..c {
                w.write_record(&[
                    y.to_string(),
                    x.to_string(),
                    ch.to_string(),
                    format!("{:e}", var.get(y, x, ch)),
                ])?;
            }
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("<csv>", e.into_error()))?;
    write_file(&a.out_dir.join("uncertainty.csv"), &bytes, rec)?;
    rec.seeds.extend([a.seed, a.latent_seed]);
    let mean_var = var.data().iter().sum::<f64>() / var.len() as f64;
    writeln!(
        out,
        "{{\"outputs\":{},\"size\":{},\"mean_variance\":{}}}",
        set.len(),
        gen.output_size(),
        mean_var
    )
    .map_err(io_err)?;

    let manifest = a
        .manifest
        .clone()
        .unwrap_or_else(|| a.out_dir.join("manifest.json"));
    a.manifest = Some(manifest.clone());
    rec.manifest = Some(manifest);
    Ok((Command::Generate(a), 0))
}

fn run_metrics(
    mut a: MetricsArgs,
    out: &mut dyn Write,
    rec: &mut RunRecord,
) -> Result<(Command, i32)> {
    let r = read_image(&a.reference, rec)?;
    let t = read_image(&a.test, rec)?;
    let p = psnr(&r, &t)?;
    let s = ssim(&r, &t)?;
    let csv_text = format!("psnr,ssim\n{p},{s}\n");
    if let Some(path) = &a.out {
        write_file(path, csv_text.as_bytes(), rec)?;
    }
    out.write_all(csv_text.as_bytes()).map_err(io_err)?;
    let fallback = a.out.as_ref().map(|o| with_suffix(o, ".manifest.json"));
    a.manifest = Some(manifest_path(a.manifest.take().or(fallback), "metrics"));
    rec.manifest = a.manifest.clone();
    Ok((Command::Metrics(a), 0))
}

fn run_verify(
    mut a: VerifyArgs,
    out: &mut dyn Write,
    rec: &mut RunRecord,
) -> Result<(Command, i32)> {
    rec.inputs.extend([a.probes.clone(), a.gallery.clone()]);
    let probes = EmbeddingSet::from_csv(&a.probes)?;
    let gallery = EmbeddingSet::from_csv(&a.gallery)?;
    let policy = if a.lenient {
        MissingLabel::Miss
    } else {
        MissingLabel::Error
    };
    let report = verify(&probes, &gallery, policy)?;
    if let Some(path) = &a.out {
        let text = format!(
            "top1,top3,top5,mean_deg\n{},{},{},{}\n",
            report.top1, report.top3, report.top5, report.mean_deg
        );
        write_file(path, text.as_bytes(), rec)?;
    }
    writeln!(out, "{}", serde_json::to_string(&report)?).map_err(io_err)?;
    a.manifest = Some(manifest_path(a.manifest.take(), "verify"));
    rec.manifest = a.manifest.clone();
    Ok((Command::Verify(a), 0))
}

fn run_selftest(
    mut a: SelftestArgs,
    out: &mut dyn Write,
    rec: &mut RunRecord,
) -> Result<(Command, i32)> {
    let results = crate::cli::selftest::run_all();
    let mut failed = 0;
    for (name, outcome) in &results {
        let line = match outcome {
            Ok(true) => format!("PASS {name}"),
            Ok(false) => {
                failed += 1;
                format!("FAIL {name}")
            }
            Err(e) => {
                failed += 1;
                format!("FAIL {name}: {e}")
            }
        };
        writeln!(out, "{line}").map_err(io_err)?;
    }
    writeln!(out, "{} passed, {} failed", results.len() - failed, failed).map_err(io_err)?;
    a.manifest = Some(manifest_path(a.manifest.take(), "selftest"));
    rec.manifest = a.manifest.clone();
    Ok((Command::Selftest(a), i32::from(failed > 0)))
}

pub mod selftest {
    //! Fast invariant checks runnable from the binary.

    use super::*;
    use crate::contextual::spcx;
    use crate::degrade::gaussian_blur;
    use crate::hpc::ModulationParams;
    use crate::metrics::deg;
    use crate::pk::{permute_image, pk_recompose};
    use crate::synth::texture;

    type Check = fn() -> Result<bool>;

    fn pk_round_trip() -> Result<bool> {
        let img = texture(16, 24, 3, 1);
        for r in [1, 2, 4, 8] {
            for mode in [PkMode::Block, PkMode::Phase] {
                if pk_recompose(&pk_decompose(&img, r, mode)?)? != img {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    fn kernel_rows() -> Result<bool> {
        let ev = spcx_evaluate(
            &texture(16, 16, 1, 2),
            &texture(16, 16, 1, 3),
            &ContextualConfig::with_rate(4),
        )?;
        Ok((0..ev.kernel.rows())
            .all(|i| (ev.kernel.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9))
    }

    fn self_distance() -> Result<bool> {
        let img = texture(16, 16, 3, 4);
        Ok(spcx(&img, &img, &ContextualConfig::with_rate(4))? <= 0.05)
    }

    fn permutation_invariance() -> Result<bool> {
        let cfg = ContextualConfig::with_rate(4);
        let (x, y) = (texture(16, 16, 1, 5), texture(16, 16, 1, 6));
        let perm: Vec<usize> = (0..16).rev().collect();
        let yp = permute_image(&y, 4, PkMode::Block, &perm)?;
        Ok((spcx(&x, &y, &cfg)? - spcx(&x, &yp, &cfg)?).abs() <= 1e-12)
    }

    fn degrade_identity() -> Result<bool> {
        let img = texture(16, 16, 3, 7);
        Ok(degrade(&img, &DegradationConfig::identity(1))? == img)
    }

    fn degrade_determinism() -> Result<bool> {
        let img = texture(16, 16, 3, 8);
        let cfg = DegradationConfig::scaled_for(64, 3);
        Ok(degrade(&img, &cfg)? == degrade(&img, &cfg)?)
    }

    fn blur_dc() -> Result<bool> {
        let flat = ImageTensor::filled(12, 12, 1, 0.3);
        Ok(gaussian_blur(&flat, 2.0)?.max_abs_diff(&flat)? <= 1e-12)
    }

    fn hpc_structure() -> Result<bool> {
        let gen = ToyGenerator::new(&GeneratorSpec::toy(3, 1))?;
        let z = SeededRng::new(2).normal(1.0, gen.latent_dim());
        let set = hpc_forward(&gen, &z, &ModulationParams::identity(&gen))?;
        Ok(set.len() == 8 && set.uncertainty().data().iter().all(|&v| v == 0.0))
    }

    fn default_weights() -> Result<bool> {
        let w = LossWeights::default();
        Ok((w.adv, w.per, w.id) == (1.0, 0.1, 10.0))
    }

    fn metric_identities() -> Result<bool> {
        let img = texture(16, 16, 3, 9);
        Ok(psnr(&img, &img)? == 100.0
            && (ssim(&img, &img)? - 1.0).abs() <= 1e-9
            && (deg(&[1.0, 1.0], &[1.0, 0.0])? - 70.71).abs() <= 0.01)
    }

    fn rng_determinism() -> Result<bool> {
        Ok(
            SeededRng::new(42).uniform(0.0, 1.0, 32)?
                == SeededRng::new(42).uniform(0.0, 1.0, 32)?,
        )
    }

    pub fn checks() -> Vec<(&'static str, Check)> {
        vec![
            ("pk round trip", pk_round_trip as Check),
            ("kernel rows sum to one", kernel_rows),
            ("self distance", self_distance),
            ("permutation invariance", permutation_invariance),
            ("degrade identity", degrade_identity),
            ("degrade determinism", degrade_determinism),
            ("blur preserves constants", blur_dc),
            ("pseudo result structure", hpc_structure),
            ("default loss weights", default_weights),
            ("metric identities", metric_identities),
            ("rng determinism", rng_determinism),
        ]
    }

    pub fn run_all() -> Vec<(&'static str, Result<bool>)> {
        checks().into_iter().map(|(name, f)| (name, f())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_defaults() {
        let help = Cli::command()
            .find_subcommand_mut("distance")
            .unwrap()
            .render_long_help()
            .to_string();
        assert!(help.contains("[default: 32]"));
        assert!(help.contains("[default: 0.2]"));
        let help = Cli::command()
            .find_subcommand_mut("loss")
            .unwrap()
            .render_long_help()
            .to_string();
        assert!(help.contains("[default: 0.1]"));
        assert!(help.contains("[default: 10]"));
        let help = Cli::command()
            .find_subcommand_mut("generate")
            .unwrap()
            .render_long_help()
            .to_string();
        assert!(help.contains("[default: 3]"));
    }

    #[test]
    fn unknown_subcommand_and_bad_flag() {
        let mut sink = Vec::new();
        let err = run_from_args(["spcx", "frobnicate"], &mut sink).unwrap_err();
        assert_eq!(err.kind(), "invalid-argument");
        let err = run_from_args(
            ["spcx", "pk", "--input", "x.png", "--mode", "zigzag"],
            &mut sink,
        )
        .unwrap_err();
        assert!(err.to_string().contains("--mode"));
        assert!(!error_line(&err).contains('\n'));
    }

    #[test]
    fn selftest_passes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.json");
        let mut buf = Vec::new();
        let code = run_from_args(
            ["spcx", "selftest", "--manifest", manifest.to_str().unwrap()],
            &mut buf,
        )
        .unwrap();
        assert!(RunManifest::load(&manifest).is_ok());
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(code, 0, "{text}");
        assert!(text.lines().last().unwrap().ends_with("0 failed"));
    }

    #[test]
    fn manifest_serialization_round_trip() {
        let m = RunManifest {
            tool: "spcx".into(),
            version: "0".into(),
            command: Command::Selftest(SelftestArgs { manifest: None }),
            seeds: vec![1],
            inputs: vec![],
            outputs: vec![],
        };
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"subcommand\":\"selftest\""));
        assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), m);
    }
}
