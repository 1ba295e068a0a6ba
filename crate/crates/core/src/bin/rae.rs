use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use rae_core::blackbox::{mae_ba, BlackboxError, LocalOracle, OracleError, QueryOracle};
use rae_core::config::{ConfigError, RunConfig, KEY_FILE_ENV};
use rae_core::dataset::{desk_dataset, load_idx, synthetic_blobs, DatasetError, LabeledDataset};
use rae_core::metrics::{self, EvalRecord, EvalReport, MetricsError};
use rae_core::quantize::{self, QuantizeError, StageMatrix};
use rae_core::raster::{Image8, ImageError};
use rae_core::stego::{self, EmbedMode, Key, StegoError};
use rae_core::whitebox::{sa_wa_attack, WhiteboxError};
use rae_core::wire::{HttpOracle, HttpOracleConfig, OracleServer, ServeConfig};
use rae_core::zoo::{self, Arch, Model, ModelSpec, ZooError};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum Fail {
    Other(String),
    Io(String),
    Data(String),
    KeyRequired(String),
    Checksum(String),
    Capacity(String),
    Oracle(String),
    Config(String),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Other(_) => 1,
            Fail::Io(_) => 3,
            Fail::Data(_) => 4,
            Fail::KeyRequired(_) => 5,
            Fail::Checksum(_) => 6,
            Fail::Capacity(_) => 7,
            Fail::Oracle(_) => 8,
            Fail::Config(_) => 9,
        }
    }

    fn message(&self) -> &str {
        match self {
            Fail::Other(m)
            | Fail::Io(m)
            | Fail::Data(m)
            | Fail::KeyRequired(m)
            | Fail::Checksum(m)
            | Fail::Capacity(m)
            | Fail::Oracle(m)
            | Fail::Config(m) => m,
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Io(e.to_string())
    }
}

impl From<ImageError> for Fail {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io(_) => Fail::Io(e.to_string()),
            _ => Fail::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for Fail {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(_) => Fail::Io(e.to_string()),
            DatasetError::Image(ImageError::Io(_)) => Fail::Io(e.to_string()),
            _ => Fail::Data(e.to_string()),
        }
    }
}

impl From<ZooError> for Fail {
    fn from(e: ZooError) -> Self {
        match e {
            ZooError::Io(_) => Fail::Io(e.to_string()),
            _ => Fail::Data(e.to_string()),
        }
    }
}

impl From<OracleError> for Fail {
    fn from(e: OracleError) -> Self {
        Fail::Oracle(e.to_string())
    }
}

impl From<BlackboxError> for Fail {
    fn from(e: BlackboxError) -> Self {
        match e {
            BlackboxError::Oracle(o) => o.into(),
            BlackboxError::Config(m) => Fail::Config(m),
            _ => Fail::Data(e.to_string()),
        }
    }
}

impl From<WhiteboxError> for Fail {
    fn from(e: WhiteboxError) -> Self {
        match e {
            WhiteboxError::Config(m) => Fail::Config(m),
            _ => Fail::Data(e.to_string()),
        }
    }
}

impl From<QuantizeError> for Fail {
    fn from(e: QuantizeError) -> Self {
        Fail::Data(e.to_string())
    }
}

impl From<StegoError> for Fail {
    fn from(e: StegoError) -> Self {
        let m = e.to_string();
        match e {
            StegoError::KeyRequired => Fail::KeyRequired(m),
            StegoError::Checksum => Fail::Checksum(m),
            StegoError::Capacity { .. } | StegoError::HsCapacity { .. } => Fail::Capacity(m),
            _ => Fail::Data(m),
        }
    }
}

impl From<MetricsError> for Fail {
    fn from(e: MetricsError) -> Self {
        Fail::Data(e.to_string())
    }
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail::Config(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Fail>;

#[derive(Parser)]
#[command(name = "rae", version, about = "Reversible transferable adversarial examples")]
struct Cli {
    /// TOML config; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic labelled PNG dataset.
    GenData(GenDataArgs),
    /// Train a zoo model.
    Train(TrainArgs),
    /// Craft adversarial images and their stage sidecars.
    Attack(AttackArgs),
    /// Embed stages into adversarial images.
    Embed(EmbedArgs),
    /// Extract stages and restore the original images.
    Recover(RecoverArgs),
    /// Score adversarial and recovered images against a target model.
    Eval(EvalArgs),
    /// Serve a model over the classify protocol.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Desk,
    Blobs,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, value_enum, default_value_t = DataKind::Desk)]
    kind: DataKind,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with PNGs and labels.csv.
    #[arg(long, conflicts_with = "idx_images")]
    data: Option<PathBuf>,
    #[arg(long, requires = "idx_labels")]
    idx_images: Option<PathBuf>,
    #[arg(long)]
    idx_labels: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value = "cnn-a")]
    arch: Arch,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Phase {
    White,
    Black,
    Dual,
}

#[derive(Args)]
struct KeyArgs {
    /// Key as a literal string.
    #[arg(long, conflicts_with = "key_file")]
    key: Option<String>,
    /// File whose bytes (minus a trailing newline) are the key.
    #[arg(long)]
    key_file: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum)]
    phase: Phase,
    /// Dataset directory (PNGs + labels.csv).
    #[arg(long)]
    data: PathBuf,
    /// Surrogate weights for the white-box phase, comma separated.
    #[arg(long, value_delimiter = ',')]
    source: Vec<PathBuf>,
    /// `local:<weights>` or `http:<url>` for the query phase.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Disable the stepwise-adaptive mask.
    #[arg(long)]
    no_sa: bool,
    #[arg(long)]
    max_queries: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Only attack images the surrogates/oracle currently get right.
    #[arg(long)]
    only_correct: bool,
}

#[derive(Args)]
struct EmbedArgs {
    /// Adversarial PNG, or a directory written by `attack`.
    #[arg(long)]
    input: PathBuf,
    /// Stage sidecar when `--input` is a single file.
    #[arg(long)]
    stages: Option<PathBuf>,
    #[command(flatten)]
    key: KeyArgs,
    /// Embed without encryption.
    #[arg(long)]
    plain: bool,
    #[arg(long, default_value = "lsb")]
    mode: EmbedMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverArgs {
    /// Embedded PNG, or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    key: KeyArgs,
    /// Recovered PNG, or a directory in directory mode.
    #[arg(long)]
    out: PathBuf,
    /// Stage sidecar output in single-file mode.
    #[arg(long)]
    stages_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Originals with labels.csv.
    #[arg(long)]
    data: PathBuf,
    /// Distributed (embedded or adversarial) images, same filenames.
    #[arg(long)]
    rae: PathBuf,
    #[arg(long)]
    recovered: Option<PathBuf>,
    #[arg(long)]
    target: PathBuf,
    /// Attack output directory, for query counts.
    #[arg(long)]
    attack: Option<PathBuf>,
    #[arg(long, default_value = "")]
    source_name: String,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("rae: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    if let Some(j) = cli.jobs.or(cfg.jobs) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Fail::Other(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a, seed),
        Cmd::Train(a) => train(a, &cfg, seed),
        Cmd::Attack(a) => attack(a, &cfg, seed),
        Cmd::Embed(a) => embed(a, &cfg),
        Cmd::Recover(a) => recover(a, &cfg),
        Cmd::Eval(a) => eval(a),
        Cmd::Serve(a) => serve(a),
    }
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    let ds = match a.kind {
        DataKind::Desk => desk_dataset(a.count, seed),
        DataKind::Blobs => synthetic_blobs(28, 28, 1, a.count, seed),
    };
    ds.save_png_dir(&a.out)?;
    println!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let data = match (&a.data, &a.idx_images, &a.idx_labels) {
        (Some(d), _, _) => LabeledDataset::load_png_dir(d, a.classes)?,
        (None, Some(i), Some(l)) => {
            let classes = a.classes.ok_or_else(|| Fail::Config("--classes is required with IDX input".into()))?;
            load_idx(i, l, classes)?
        }
        _ => return Err(Fail::Config("give --data or --idx-images/--idx-labels".into())),
    };
    let (h, w, c) = data.dims().ok_or_else(|| Fail::Data("empty dataset".into()))?;
    let spec = ModelSpec::new(a.arch, h, w, c, data.classes())?;
    let mut tc = cfg.train;
    tc.seed = seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    let report = zoo::train(spec, &data, &tc)?;
    zoo::save_weights(&report.model, &a.out)?;
    println!(
        "{}: train accuracy {:.4}, final loss {:.4}",
        a.arch,
        report.train_accuracy,
        report.epoch_losses.last().copied().unwrap_or(f32::NAN)
    );
    Ok(())
}

fn oracle_from(spec: &str, cfg: &RunConfig, top_k: Option<usize>) -> Result<Box<dyn QueryOracle>> {
    let top_k = top_k.or(cfg.oracle.top_k);
    if let Some(path) = spec.strip_prefix("local:") {
        return Ok(Box::new(LocalOracle::new(zoo::load_weights(path)?, top_k)));
    }
    let url = if spec.starts_with("http://") {
        spec.to_string()
    } else if let Some(rest) = spec.strip_prefix("http:") {
        if rest.starts_with("http://") {
            rest.to_string()
        } else if rest.starts_with("//") {
            format!("http:{rest}")
        } else {
            format!("http://{rest}")
        }
    } else {
        return Err(Fail::Config(format!("oracle '{spec}' must start with local: or http:")));
    };
    let o = &cfg.oracle;
    let hc = HttpOracleConfig {
        top_k,
        retries: o.retries,
        backoff: Duration::from_millis(o.backoff_ms),
        timeout: Duration::from_millis(o.timeout_ms),
        max_in_flight: o.max_in_flight,
        ..HttpOracleConfig::new(url)
    };
    Ok(Box::new(HttpOracle::new(hc)))
}

fn stem(name: &str) -> &str {
    name.strip_suffix(".png").unwrap_or(name)
}

fn sidecar_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{}.stages.json", stem(name)))
}

fn write_stages(path: &Path, stages: &StageMatrix) -> Result<()> {
    fs::write(path, serde_json::to_string(stages).expect("stages serialize"))?;
    Ok(())
}

fn read_stages(path: &Path) -> Result<StageMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Fail::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Fail::Data(format!("{}: {e}", path.display())))
}

struct AttackRow {
    name: String,
    label: usize,
    stages: StageMatrix,
    queries: Option<usize>,
    success: Option<bool>,
}

fn attack(a: AttackArgs, cfg: &RunConfig, seed: u64) -> Result<()> {
    let data = LabeledDataset::load_png_dir(&a.data, None)?;
    let (h, w, _) = data.dims().ok_or_else(|| Fail::Data("empty dataset".into()))?;
    let mut white = cfg.white.clone();
    if let Some(n) = a.iterations {
        white.iterations = n;
    }
    if a.no_sa {
        white.sa_enabled = false;
    }
    white.validate()?;
    let mut black = cfg.black.clone();
    black.xi = white.xi;
    black.epsilon = white.epsilon;
    if let Some(q) = a.max_queries {
        black.max_queries = q;
    }
    black.validate()?;

    let sources: Vec<Model> = if a.phase == Phase::Black {
        Vec::new()
    } else {
        if a.source.is_empty() {
            return Err(Fail::Config("--source is required for the white-box phase".into()));
        }
        a.source.iter().map(zoo::load_weights).collect::<std::result::Result<_, _>>()?
    };
    let source_refs: Vec<&Model> = sources.iter().collect();
    let oracle = match (a.phase, &a.oracle) {
        (Phase::White, _) => None,
        (_, Some(spec)) => Some(oracle_from(spec, cfg, a.top_k)?),
        (_, None) => return Err(Fail::Config("--oracle is required for the query phase".into())),
    };

    let rows: Vec<AttackRow> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Option<AttackRow>> {
            let (x, y) = (&data.images()[i], data.labels()[i]);
            if a.only_correct {
                let keep = match &oracle {
                    Some(o) => o.classify(x)?.first().map(|l| l.label) == Some(y),
                    None => source_refs.iter().all(|m| m.classify(&x.to_tensor()).ok() == Some(y)),
                };
                if !keep {
                    return Ok(None);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let init = if a.phase == Phase::Black {
                StageMatrix::zeros(h, w, white.xi)
            } else {
                sa_wa_attack(x, y, &source_refs, &white, &mut rng)?.stages
            };
            let (stages, queries, success) = match &oracle {
                Some(o) => {
                    let r = mae_ba(x, &init, y, o.as_ref(), &black, &mut rng)?;
                    (r.stages, Some(r.queries), Some(r.success))
                }
                None => (init, None, None),
            };
            Ok(Some(AttackRow { name: data.names()[i].clone(), label: y, stages, queries, success }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    fs::create_dir_all(&a.out)?;
    let mut labels = String::from("filename,label\n");
    let mut log = String::from("filename,label,queries,success\n");
    let by_name: std::collections::HashMap<&str, usize> =
        data.names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    for r in &rows {
        let x = &data.images()[by_name[r.name.as_str()]];
        quantize::apply(x, &r.stages)?.save_png(a.out.join(&r.name))?;
        write_stages(&sidecar_path(&a.out, &r.name), &r.stages)?;
        labels.push_str(&format!("{},{}\n", r.name, r.label));
        log.push_str(&format!(
            "{},{},{},{}\n",
            r.name,
            r.label,
            r.queries.map_or(String::new(), |q| q.to_string()),
            r.success.map_or(String::new(), |s| s.to_string())
        ));
    }
    fs::write(a.out.join("labels.csv"), labels)?;
    fs::write(a.out.join("attack.csv"), log)?;
    println!("attacked {} images into {}", rows.len(), a.out.display());
    Ok(())
}

fn resolve_key(k: &KeyArgs, cfg: &RunConfig) -> Result<Option<Key>> {
    if let Some(s) = &k.key {
        return Key::new(s.as_bytes().to_vec()).map(Some).map_err(|e| Fail::Config(e.to_string()));
    }
    let path = k
        .key_file
        .clone()
        .or_else(|| cfg.key_file.clone())
        .or_else(|| std::env::var_os(KEY_FILE_ENV).map(PathBuf::from));
    let Some(path) = path else { return Ok(None) };
    let mut bytes = fs::read(&path).map_err(|e| Fail::Io(format!("key file {}: {e}", path.display())))?;
    if bytes.last() == Some(&b'\n') {
        bytes.pop();
        if bytes.last() == Some(&b'\r') {
            bytes.pop();
        }
    }
    Key::new(bytes).map(Some).map_err(|e| Fail::Config(format!("key file {}: {e}", path.display())))
}

/// `(input, output)` pairs: one pair for a file, every listed PNG for a
/// directory.
fn pairs(input: &Path, out: &Path) -> Result<Vec<(PathBuf, PathBuf, String)>> {
    if input.is_dir() {
        let (names, _) = rae_core::dataset::read_labels_csv(&input.join("labels.csv"))?;
        Ok(names.into_iter().map(|n| (input.join(&n), out.join(&n), n)).collect())
    } else {
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(vec![(input.to_path_buf(), out.to_path_buf(), name)])
    }
}

fn prepare_out(input: &Path, out: &Path) -> Result<()> {
    if input.is_dir() {
        fs::create_dir_all(out)?;
    }
    Ok(())
}

fn copy_labels(input: &Path, out: &Path) -> Result<()> {
    if input.is_dir() {
        fs::copy(input.join("labels.csv"), out.join("labels.csv"))?;
    }
    Ok(())
}

fn embed(a: EmbedArgs, cfg: &RunConfig) -> Result<()> {
    let key = resolve_key(&a.key, cfg)?;
    if key.is_none() && !a.plain {
        return Err(Fail::KeyRequired(format!(
            "no key: pass --key, --key-file, set key_file in the config or {KEY_FILE_ENV}, or use --plain"
        )));
    }
    let jobs = pairs(&a.input, &a.out)?;
    let single = !a.input.is_dir();
    let outputs: Vec<(PathBuf, Image8)> = jobs
        .par_iter()
        .map(|(src, dst, name)| {
            let stages_path = if single {
                a.stages.clone().ok_or_else(|| Fail::Config("--stages is required for a single image".into()))?
            } else {
                sidecar_path(&a.input, name)
            };
            let x_adv = Image8::load_png(src)?;
            let stages = read_stages(&stages_path)?;
            Ok((dst.clone(), stego::make_rae(&x_adv, &stages, key.as_ref(), a.mode)?))
        })
        .collect::<Result<_>>()?;
    prepare_out(&a.input, &a.out)?;
    for (dst, img) in &outputs {
        img.save_png(dst)?;
    }
    copy_labels(&a.input, &a.out)?;
    println!("embedded {} images ({} mode)", outputs.len(), a.mode);
    Ok(())
}

fn recover(a: RecoverArgs, cfg: &RunConfig) -> Result<()> {
    let key = resolve_key(&a.key, cfg)?;
    let jobs = pairs(&a.input, &a.out)?;
    let single = !a.input.is_dir();
    // everything is checked before anything is written
    let outputs: Vec<(PathBuf, String, stego::Recovered)> = jobs
        .par_iter()
        .map(|(src, dst, name)| {
            let stego_img = Image8::load_png(src)?;
            let r = stego::recover(&stego_img, key.as_ref()).map_err(|e| match Fail::from(e) {
                Fail::Checksum(m) => Fail::Checksum(format!("{name}: {m}")),
                f => f,
            })?;
            Ok((dst.clone(), name.clone(), r))
        })
        .collect::<Result<_>>()?;
    prepare_out(&a.input, &a.out)?;
    for (dst, name, r) in &outputs {
        r.x_hat.save_png(dst)?;
        let sc = if single {
            a.stages_out.clone()
        } else {
            Some(sidecar_path(&a.out, name))
        };
        if let Some(p) = sc {
            write_stages(&p, &r.stages)?;
        }
    }
    copy_labels(&a.input, &a.out)?;
    println!("recovered {} images", outputs.len());
    Ok(())
}

fn read_queries(dir: &Path) -> Result<std::collections::HashMap<String, Option<usize>>> {
    let mut rdr = csv::Reader::from_path(dir.join("attack.csv")).map_err(|e| Fail::Io(e.to_string()))?;
    let mut out = std::collections::HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Fail::Data(e.to_string()))?;
        out.insert(rec[0].to_string(), rec[2].parse().ok());
    }
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = LabeledDataset::load_png_dir(&a.data, None)?;
    let target = zoo::load_weights(&a.target)?;
    let (rae_names, _) = rae_core::dataset::read_labels_csv(&a.rae.join("labels.csv"))
        .or_else(|_| Ok::<_, Fail>((data.names().to_vec(), Vec::new())))?;
    let queries = a.attack.as_deref().map(read_queries).transpose()?;
    let target_name = a.target.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let by_name: std::collections::HashMap<&str, usize> =
        data.names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    let records: Vec<EvalRecord> = rae_names
        .par_iter()
        .map(|name| {
            let &i = by_name
                .get(name.as_str())
                .ok_or_else(|| Fail::Data(format!("{name} is not in {}", a.data.display())))?;
            let (x, y) = (&data.images()[i], data.labels()[i]);
            let rae = Image8::load_png(a.rae.join(name))?;
            let adv_pred = target.classify(&rae.to_tensor())?;
            let (recovered_pred, cmp) = match &a.recovered {
                Some(dir) => {
                    let rec = Image8::load_png(dir.join(name))?;
                    (Some(target.classify(&rec.to_tensor())?), rec)
                }
                None => (None, rae),
            };
            Ok(EvalRecord {
                image: name.clone(),
                source: a.source_name.clone(),
                target: target_name.clone(),
                label: y,
                adv_pred,
                success: adv_pred != y,
                queries: queries.as_ref().and_then(|q| q.get(name).copied().flatten()),
                recovered_pred,
                psnr: metrics::psnr(&cmp, x)?,
                ssim: metrics::ssim(&cmp, x)?,
            })
        })
        .collect::<Result<_>>()?;
    let report = EvalReport::from_records(records)?;
    if let Some(p) = &a.csv {
        report.write_csv(fs::File::create(p)?)?;
    }
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&report.to_json()).expect("json"))?;
    }
    let ag = &report.aggregates;
    println!(
        "images {}  ASR {:.2}%  SR {}  PSNR {}  SSIM {:.4}  median queries {}",
        ag.total,
        ag.asr,
        ag.sr.map_or("-".into(), |s| format!("{s:.2}%")),
        if ag.mean_psnr.is_finite() { format!("{:.2} dB", ag.mean_psnr) } else { "inf".into() },
        ag.mean_ssim,
        ag.median_queries.map_or("-".into(), |q| q.to_string()),
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = zoo::load_weights(&a.weights)?;
    let cfg = ServeConfig { addr: format!("{}:{}", a.host, a.port), top_k: a.top_k, workers: a.workers, class_names: None };
    let server = OracleServer::start(model, cfg).map_err(|e| Fail::Io(e.to_string()))?;
    println!("listening on {}", server.url());
    std::io::stdout().flush()?;
    server.join();
    Ok(())
}
