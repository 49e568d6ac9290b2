//! `cvq`: data synthesis, tokenizer training, token extraction, CAR training,
//! generation and analysis, each writing into a self-describing run directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{Map, Value};

use cvq::car::{self, CarModel, TokenGeometry, TokenSequence};
use cvq::checkpoint::{self, content_id};
use cvq::config::RunConfig;
use cvq::datasets::{self, Dataset};
use cvq::metrics::{self, ComparisonOptions, Sidecar, SweepReport};
use cvq::parallel::{init_thread_pool, Execution};
use cvq::quantizer::{quantize, separability_stats, Window};
use cvq::tokenizer::{AuxLosses, ImageBatch};
use cvq::train::{train_tokenizer, StepLog, TokenizerModel};
use rand::SeedableRng;

/// A failure reported as `error[class]: detail`.
#[derive(Debug)]
struct Failure {
    class: &'static str,
    detail: String,
}

impl Failure {
    fn new(class: &'static str, detail: impl Into<String>) -> Self {
        Failure {
            class,
            detail: detail.into(),
        }
    }
}

impl From<cvq::Error> for Failure {
    fn from(e: cvq::Error) -> Self {
        Failure::new(e.class(), e.to_string())
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::new("io", format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, Failure>;

#[derive(Parser)]
#[command(
    name = "cvq",
    version,
    about = "Channel-wise vector quantization, next-channel generation and a patch-wise VQ baseline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory for this run [default: runs/<subcommand>].
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Override any config key; the value is parsed as JSON, else taken as a string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data_dir: Option<String>,
    /// Validation images used by evaluation reports (0 = all).
    #[arg(long, global = true)]
    eval_images: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the procedural corpus, or ingest a PGM/PPM directory.
    GenData(GenData),
    /// Train a patch-wise or channel-wise tokenizer.
    TrainTokenizer(TrainTokenizer),
    /// Encode the dataset into channel token sequences.
    ExtractTokens(WithTokenizer),
    /// Train the next-channel autoregressive model.
    TrainCar(TrainCar),
    /// Sample token sequences and decode them to images.
    Generate(Generate),
    /// Reconstruction quality as channels are progressively added.
    Sweep(Sweep),
    /// Codebook utilization of patch-wise against channel-wise VQ.
    Compare(Compare),
    /// Zero single latent channels and record the decoded difference.
    AblateChannel(Ablate),
    /// Validation quality and codebook usage of a tokenizer.
    Eval(WithTokenizer),
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// Corpus kind: textures, shapes or mixed.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    /// Corpus seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ingest this PGM/PPM directory instead of synthesizing.
    #[arg(long)]
    ingest: Option<String>,
}

#[derive(Args)]
struct TrainTokenizer {
    #[command(flatten)]
    common: Common,
    /// Quantization axis: patch or channel.
    #[arg(long)]
    axis: Option<String>,
    #[arg(long)]
    codebook_size: Option<usize>,
    /// Nested channel dropout ratio.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct WithTokenizer {
    #[command(flatten)]
    common: Common,
    /// Tokenizer checkpoint directory.
    #[arg(long)]
    tokenizer: Option<String>,
}

#[derive(Args)]
struct TrainCar {
    #[command(flatten)]
    common: Common,
    /// Token corpus written by extract-tokens.
    #[arg(long)]
    tokens: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    target_accuracy: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Generate {
    #[command(flatten)]
    common: Common,
    /// CAR checkpoint directory.
    #[arg(long)]
    car: Option<String>,
    /// Tokenizer checkpoint used to decode.
    #[arg(long)]
    tokenizer: Option<String>,
    /// Comma-separated class labels (default: every class).
    #[arg(long, value_delimiter = ',')]
    labels: Option<Vec<usize>>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tokenizer: Option<String>,
    /// Comma-separated channel counts (default: 1..=c).
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
}

#[derive(Args)]
struct Compare {
    #[command(flatten)]
    common: Common,
    /// Comma-separated axes.
    #[arg(long, value_delimiter = ',')]
    axes: Option<Vec<String>>,
    /// Comma-separated codebook sizes.
    #[arg(long, value_delimiter = ',')]
    codebook_sizes: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tokenizer: Option<String>,
    /// 1-based channel to zero (0 = every channel in turn).
    #[arg(long)]
    channel: Option<usize>,
}

/// Collects flag overrides as config keys.
#[derive(Default)]
struct Overrides(Map<String, Value>);

impl Overrides {
    fn put<T: Into<Value>>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.insert(key.to_string(), v.into());
        }
    }
}

fn resolve_config(common: &Common, flags: Overrides) -> CliResult<RunConfig> {
    let mut base = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_fail(p, e))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => {
                    return Err(Failure::new(
                        "config",
                        "config file must hold a JSON object",
                    ))
                }
                Err(e) => return Err(Failure::new("config", e.to_string())),
            }
        }
        None => Map::new(),
    };
    for (k, v) in flags.0 {
        base.insert(k, v);
    }
    if let Some(d) = &common.data_dir {
        base.insert("data_dir".into(), d.clone().into());
    }
    if let Some(n) = common.eval_images {
        base.insert("eval_images".into(), n.into());
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::new("usage", format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        base.insert(k.to_string(), v);
    }
    Ok(RunConfig::from_json(&Value::Object(base).to_string())?)
}

/// Prepared run directory with the resolved config echoed into it.
struct Run {
    dir: PathBuf,
    cfg: RunConfig,
}

impl Run {
    fn open(common: &Common, name: &str, flags: Overrides) -> CliResult<Run> {
        let cfg = resolve_config(common, flags)?;
        let dir = common
            .run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(name));
        for sub in ["logs", "reports"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| io_fail(&dir, e))?;
        }
        cfg.save(&dir.join("config.json"))?;
        Ok(Run { dir, cfg })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn sidecar(&self, checkpoints: BTreeMap<String, String>, header: &str, seed: u64) -> Sidecar {
        Sidecar {
            config_hash: self.cfg.hash(),
            seed,
            checkpoints,
            columns: header.split(',').map(str::to_string).collect(),
        }
    }

    fn report(
        &self,
        rel: &str,
        csv: &str,
        seed: u64,
        checkpoints: BTreeMap<String, String>,
    ) -> CliResult<PathBuf> {
        let path = self.path(rel);
        let header = csv.lines().next().unwrap_or_default();
        metrics::write_report(&path, csv, &self.sidecar(checkpoints, header, seed))?;
        Ok(path)
    }
}

/// Append-only CSV flushed after every row.
struct CsvLog {
    file: File,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: PathBuf, header: &str) -> CliResult<Self> {
        let mut file = File::create(&path).map_err(|e| io_fail(&path, e))?;
        writeln!(file, "{header}").map_err(|e| io_fail(&path, e))?;
        Ok(CsvLog { file, path })
    }

    fn row(&mut self, line: &str) -> cvq::Result<()> {
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| {
                cvq::Error::InvalidArgument(format!("writing {}: {e}", self.path.display()))
            })
    }
}

fn need<'a>(value: &'a str, key: &str) -> CliResult<&'a Path> {
    if value.is_empty() {
        return Err(Failure::new("config", format!("{key} is not set")));
    }
    Ok(Path::new(value))
}

fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    Ok(datasets::load_dataset(Path::new(&cfg.data_dir))?)
}

fn eval_subset(cfg: &RunConfig, ds: &Dataset) -> CliResult<ImageBatch> {
    let val = ds.val_images()?;
    if cfg.eval_images == 0 || cfg.eval_images >= val.batch() {
        return Ok(val);
    }
    Ok(val.select(&(0..cfg.eval_images).collect::<Vec<_>>())?)
}

fn load_tokenizer(cfg: &RunConfig) -> CliResult<(TokenizerModel, String)> {
    let dir = need(&cfg.tokenizer_dir, "tokenizer_dir")?;
    let (model, _) = checkpoint::load_tokenizer(dir)?;
    Ok((model, content_id(dir)?))
}

fn gen_data(a: GenData) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("corpus_kind", a.kind);
    o.put("corpus_count", a.count);
    o.put("data_seed", a.seed);
    o.put("ingest_dir", a.ingest);
    let run = Run::open(&a.common, "gen-data", o)?;
    let cfg = &run.cfg;
    let out = Path::new(&cfg.data_dir);
    let manifest = if cfg.ingest_dir.is_empty() {
        datasets::generate_corpus(&cfg.corpus_spec(), out)?
    } else {
        let s = datasets::ingest_directory(
            Path::new(&cfg.ingest_dir),
            out,
            cfg.image_height,
            cfg.image_width,
            cfg.image_channels,
            cfg.data_seed,
        )?;
        let mut log = CsvLog::create(run.path("logs/ingest.csv"), "file,status,detail")?;
        for p in &s.ingested {
            log.row(&format!("{},ok,", p.display()))?;
        }
        for (p, why) in &s.rejected {
            log.row(&format!(
                "{},rejected,{}",
                p.display(),
                why.replace(',', ";")
            ))?;
        }
        s.manifest
    };
    let mut csv = String::from("class,count\n");
    for (k, v) in &manifest.class_counts {
        csv.push_str(&format!("{k},{v}\n"));
    }
    let mut ids = BTreeMap::new();
    if out.exists() {
        ids.insert("dataset".to_string(), content_id(out)?);
    }
    run.report("reports/classes.csv", &csv, cfg.data_seed, ids)?;
    eprintln!(
        "wrote {} images ({} train, {} val) to {}",
        manifest.count,
        manifest.train.len(),
        manifest.val.len(),
        out.display()
    );
    Ok(())
}

fn eval_csv(model: &TokenizerModel, val: &ImageBatch) -> CliResult<String> {
    let z = model.encode(val)?;
    let q = quantize(&z, &model.codebook)?;
    let rec = model.autoencoder.decode(&q.zq)?;
    let qual = metrics::quality(val, &rec)?;
    let mut seen = vec![false; model.codebook.size()];
    q.indices.iter().for_each(|&i| seen[i] = true);
    let used = seen.iter().filter(|&&s| s).count();
    let mut csv = String::from("metric,value\n");
    csv.push_str(&format!("val_mse,{}\n", qual.mse));
    csv.push_str(&format!("val_psnr,{}\n", qual.psnr));
    csv.push_str(&format!("val_ssim,{}\n", qual.ssim));
    csv.push_str(&format!(
        "validation_utilization,{}\n",
        used as f64 / seen.len() as f64
    ));
    csv.push_str(&format!("validation_dead_codes,{}\n", seen.len() - used));
    let k = val.batch().min(8);
    if k >= 2 {
        let per: Vec<_> = (0..k).map(|b| z.image(b).tokens(model.axis())).collect();
        let s = separability_stats(&per)?;
        csv.push_str(&format!("mean_intra,{}\n", s.mean_intra));
        csv.push_str(&format!("mean_inter,{}\n", s.mean_inter));
        csv.push_str(&format!("overlap_ratio,{}\n", s.overlap_ratio));
    }
    Ok(csv)
}

fn train_tok(a: TrainTokenizer) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("axis", a.axis);
    o.put("codebook_size", a.codebook_size);
    o.put("alpha", a.alpha);
    o.put("steps", a.steps);
    o.put("batch_size", a.batch_size);
    o.put("lr", a.lr);
    o.put("hidden", a.hidden);
    o.put("seed", a.seed);
    let run = Run::open(&a.common, "train-tokenizer", o)?;
    let cfg = &run.cfg;
    let tcfg = cfg.tokenizer_train()?;
    let ds = load_data(cfg)?;
    let train = ds.train_images()?;
    let mut log = CsvLog::create(run.path("logs/train.csv"), StepLog::CSV_HEADER)?;
    let model = train_tokenizer(&tcfg, &train, &AuxLosses::default(), |s| {
        log.row(&s.csv_row())
    })?;
    let ck = run.path("checkpoint");
    checkpoint::save_tokenizer(
        &ck,
        &model,
        tcfg.steps,
        &serde_json::to_value(cfg).map_err(cvq::Error::from)?,
    )?;
    let id = content_id(&ck)?;
    let ids = BTreeMap::from([("tokenizer".to_string(), id)]);
    let side = run.sidecar(ids.clone(), StepLog::CSV_HEADER, cfg.seed);
    fs::write(
        metrics::sidecar_path(&run.path("logs/train.csv")),
        serde_json::to_vec_pretty(&side).map_err(cvq::Error::from)?,
    )
    .map_err(|e| io_fail(&run.dir, e))?;

    let per_epoch = train.batch().div_ceil(tcfg.batch_size).max(1);
    let life = model.codebook.usage_stats(Window::Lifetime)?;
    let last = model.codebook.usage_stats(Window::LastBatches(per_epoch))?;
    let mut csv = eval_csv(&model, &eval_subset(cfg, &ds)?)?;
    csv.push_str(&format!("lifetime_utilization,{}\n", life.utilization));
    csv.push_str(&format!("last_epoch_utilization,{}\n", last.utilization));
    run.report("reports/eval.csv", &csv, cfg.seed, ids)?;
    eprintln!(
        "trained {} tokenizer (N={}) for {} steps; lifetime utilization {:.4}",
        tcfg.axis, tcfg.codebook_size, tcfg.steps, life.utilization
    );
    Ok(())
}

fn extract_tokens(a: WithTokenizer) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("tokenizer_dir", a.tokenizer);
    let run = Run::open(&a.common, "extract-tokens", o)?;
    let cfg = &run.cfg;
    let (model, id) = load_tokenizer(cfg)?;
    let ds = load_data(cfg)?;
    let ae = model.autoencoder.config();
    let (h, w) = ae.grid();
    let geometry = TokenGeometry {
        h,
        w,
        c: ae.latent_channels,
        n: model.codebook.size(),
    };
    let classes = ds.labels.iter().max().map_or(1, |m| m + 1).max(cfg.classes);
    let mut csv = String::from("split,sequences\n");
    for (split, images, labels) in [
        ("train", ds.train_images()?, ds.train_labels()),
        ("val", ds.val_images()?, ds.val_labels()),
    ] {
        let tokens = metrics::channel_tokens(&model, &images)?;
        let seqs = tokens
            .into_iter()
            .zip(labels)
            .map(|(t, l)| TokenSequence::new(t, l, geometry))
            .collect::<cvq::Result<Vec<_>>>()?;
        let dir = run.path(&format!("tokens/{split}"));
        car::save_tokens(&dir, &seqs, geometry, classes)?;
        model.codebook.entries().save(&dir.join("codewords.ntb"))?;
        csv.push_str(&format!("{split},{}\n", seqs.len()));
    }
    run.report(
        "reports/tokens.csv",
        &csv,
        cfg.seed,
        BTreeMap::from([("tokenizer".into(), id)]),
    )?;
    eprintln!("wrote token corpora under {}", run.path("tokens").display());
    Ok(())
}

fn train_car(a: TrainCar) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("tokens_dir", a.tokens);
    o.put("car_steps", a.steps);
    o.put("car_lr", a.lr);
    o.put("car_d_model", a.d_model);
    o.put("car_layers", a.layers);
    o.put("car_heads", a.heads);
    o.put("car_target_accuracy", a.target_accuracy);
    o.put("car_seed", a.seed);
    let run = Run::open(&a.common, "train-car", o)?;
    let cfg = &run.cfg;
    let dir = need(&cfg.tokens_dir, "tokens_dir")?;
    let (manifest, seqs) = car::load_tokens(dir)?;
    let codewords = cvq::Tensor::load(&dir.join("codewords.ntb"))?;
    let mut car_cfg = cfg.car(manifest.geometry);
    car_cfg.classes = manifest.classes;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.car_seed);
    let mut model = CarModel::new(car_cfg, codewords, &mut rng)?;
    let mut log = CsvLog::create(run.path("logs/train.csv"), car::CarStepLog::CSV_HEADER)?;
    let steps = car::train_car(&mut model, &seqs, &cfg.car_train(), |s| {
        log.row(&s.csv_row())
    })?;
    let ck = run.path("checkpoint");
    checkpoint::save_car(
        &ck,
        &model,
        steps,
        &serde_json::to_value(cfg).map_err(cvq::Error::from)?,
    )?;
    let ids = BTreeMap::from([("car".to_string(), content_id(&ck)?)]);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let csv = format!(
        "metric,value\nsteps,{steps}\ntrain_loss,{}\ntrain_accuracy,{}\n",
        model.loss(&refs)?,
        model.accuracy(&refs)?
    );
    run.report("reports/train.csv", &csv, cfg.car_seed, ids)?;
    eprintln!("trained CAR for {steps} steps");
    Ok(())
}

fn write_image(path: &Path, images: &ImageBatch, b: usize) -> CliResult<()> {
    let img = images.clamped();
    Ok(datasets::write_pnm(
        path,
        img.image(b),
        img.height(),
        img.width(),
        img.channels(),
    )?)
}

fn generate(a: Generate) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("car_dir", a.car);
    o.put("tokenizer_dir", a.tokenizer);
    o.put("generate_labels", a.labels);
    o.put("top_k", a.top_k);
    o.put("temperature", a.temperature);
    o.put("generate_seed", a.seed);
    let run = Run::open(&a.common, "generate", o)?;
    let cfg = &run.cfg;
    let car_dir = need(&cfg.car_dir, "car_dir")?;
    let (model, _) = checkpoint::load_car(car_dir)?;
    let (tok, tok_id) = load_tokenizer(cfg)?;
    let g = model.config().geometry;
    let labels: Vec<usize> = if cfg.generate_labels.is_empty() {
        (0..model.config().classes).collect()
    } else {
        cfg.generate_labels.clone()
    };
    let sampling = cfg.sampling(g.n);
    let img_dir = run.path("images");
    fs::create_dir_all(&img_dir).map_err(|e| io_fail(&img_dir, e))?;
    let mut csv = String::from("label");
    for k in 1..=g.c {
        csv.push_str(&format!(",t{k}"));
    }
    csv.push('\n');
    for (i, &label) in labels.iter().enumerate() {
        let seed = cfg.generate_seed.wrapping_add(i as u64);
        let seq = model.generate(label, sampling, seed)?;
        csv.push_str(&label.to_string());
        for t in &seq.indices {
            csv.push_str(&format!(",{t}"));
        }
        csv.push('\n');
        for k in 1..=g.c {
            let img = car::progressive_decode(&tok, &[&seq.indices[..k]])?;
            let name = if k == g.c {
                format!("sample{i:03}_label{label}.ppm")
            } else {
                format!("sample{i:03}_label{label}_k{k:02}.ppm")
            };
            write_image(&img_dir.join(name), &img, 0)?;
        }
    }
    let ids = BTreeMap::from([
        ("car".to_string(), content_id(car_dir)?),
        ("tokenizer".to_string(), tok_id),
    ]);
    run.report("reports/sequences.csv", &csv, cfg.generate_seed, ids)?;
    eprintln!(
        "generated {} sequences into {}",
        labels.len(),
        img_dir.display()
    );
    Ok(())
}

fn sweep(a: Sweep) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("tokenizer_dir", a.tokenizer);
    o.put("sweep_channels", a.channels);
    let run = Run::open(&a.common, "sweep", o)?;
    let cfg = &run.cfg;
    let (model, id) = load_tokenizer(cfg)?;
    let val = eval_subset(cfg, &load_data(cfg)?)?;
    let ns = if cfg.sweep_channels.is_empty() {
        (1..=model.autoencoder.config().latent_channels).collect()
    } else {
        cfg.sweep_channels.clone()
    };
    let rows = metrics::progressive_sweep(&model, &val, &ns)?;
    let report = SweepReport {
        rows,
        model_id: id.clone(),
        config_hash: cfg.hash(),
    };
    run.report(
        "reports/sweep.csv",
        &report.to_csv(),
        cfg.seed,
        BTreeMap::from([("tokenizer".into(), id)]),
    )?;
    let plot: Vec<_> = report
        .rows
        .iter()
        .map(|r| (r.n_channels as f64, r.psnr, "psnr".to_string()))
        .collect();
    metrics::write_plot_data(&run.path("reports/sweep_plot.csv"), &plot)?;
    for r in &report.rows {
        eprintln!(
            "n={:>3} psnr={:.3} ssim={:.4} mse={:.6}",
            r.n_channels, r.psnr, r.ssim, r.mse
        );
    }
    Ok(())
}

fn compare(a: Compare) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("compare_axes", a.axes);
    o.put("compare_sizes", a.codebook_sizes);
    o.put("steps", a.steps);
    o.put("hidden", a.hidden);
    o.put("seed", a.seed);
    let run = Run::open(&a.common, "compare", o)?;
    let cfg = &run.cfg;
    let base = cfg.tokenizer_train()?;
    let ds = load_data(cfg)?;
    let train = ds.train_images()?;
    let val = eval_subset(cfg, &ds)?;
    let (report, models) = metrics::run_comparison_models(
        &train,
        &val,
        &base,
        &cfg.compare_axes,
        &cfg.compare_sizes,
        ComparisonOptions::default(),
        Execution::auto(),
    )?;
    let mut ids = BTreeMap::new();
    for (cell, model) in report.cells.iter().zip(&models) {
        let name = format!("{}-{}", cell.axis, cell.codebook_size);
        let ck = run.path(&format!("checkpoints/{name}"));
        let mut echo = cfg.clone();
        echo.axis = cell.axis;
        echo.codebook_size = cell.codebook_size;
        checkpoint::save_tokenizer(
            &ck,
            model,
            base.steps,
            &serde_json::to_value(&echo).map_err(cvq::Error::from)?,
        )?;
        ids.insert(name.clone(), content_id(&ck)?);
        let mut log = CsvLog::create(
            run.path(&format!("logs/{name}.csv")),
            "step,lifetime_utilization",
        )?;
        for (s, u) in &cell.series {
            log.row(&format!("{s},{u}"))?;
        }
    }
    run.report("reports/compare.csv", &report.to_csv(), cfg.seed, ids)?;
    metrics::write_plot_data(
        &run.path("reports/utilization_plot.csv"),
        &report.plot_rows(),
    )?;
    for c in &report.cells {
        eprintln!(
            "{:>7} N={:<5} lifetime={:.4} last-epoch={:.4} val-psnr={:.3}",
            c.axis.to_string(),
            c.codebook_size,
            c.lifetime_utilization,
            c.last_epoch_utilization,
            c.val.psnr
        );
    }
    Ok(())
}

fn ablate(a: Ablate) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("tokenizer_dir", a.tokenizer);
    o.put("ablate_channel", a.channel);
    let run = Run::open(&a.common, "ablate-channel", o)?;
    let cfg = &run.cfg;
    let (model, id) = load_tokenizer(cfg)?;
    let val = eval_subset(cfg, &load_data(cfg)?)?;
    let c = model.autoencoder.config().latent_channels;
    let channels: Vec<usize> = if cfg.ablate_channel == 0 {
        (1..=c).collect()
    } else {
        vec![cfg.ablate_channel]
    };
    let zq = quantize(&model.encode(&val)?, &model.codebook)?.zq;
    let img_dir = run.path("images");
    fs::create_dir_all(&img_dir).map_err(|e| io_fail(&img_dir, e))?;
    let mut csv = String::from("channel,image,diff_energy\n");
    for &k in &channels {
        let ab = metrics::ablate_latent(&model, &zq, k)?;
        for (b, e) in ab.energy.iter().enumerate() {
            csv.push_str(&format!("{k},{b},{e}\n"));
        }
        // Diff images are shifted to mid-gray so negative changes stay visible.
        let shifted: Vec<f64> = ab.diff.image(0).iter().map(|v| 0.5 + v).collect();
        let h = ab.diff.height();
        let w = ab.diff.width();
        let ch = ab.diff.channels();
        let shifted: Vec<f64> = shifted.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        datasets::write_pnm(
            &img_dir.join(format!("diff_ch{k:02}.ppm")),
            &shifted,
            h,
            w,
            ch,
        )?;
        write_image(
            &img_dir.join(format!("ablated_ch{k:02}.ppm")),
            &ab.ablated,
            0,
        )?;
        if k == channels[0] {
            write_image(&img_dir.join("baseline.ppm"), &ab.baseline, 0)?;
        }
    }
    run.report(
        "reports/ablation.csv",
        &csv,
        cfg.seed,
        BTreeMap::from([("tokenizer".into(), id)]),
    )?;
    eprintln!(
        "ablated {} channel(s) over {} images",
        channels.len(),
        val.batch()
    );
    Ok(())
}

fn eval(a: WithTokenizer) -> CliResult<()> {
    let mut o = Overrides::default();
    o.put("tokenizer_dir", a.tokenizer);
    let run = Run::open(&a.common, "eval", o)?;
    let cfg = &run.cfg;
    let (model, id) = load_tokenizer(cfg)?;
    let val = eval_subset(cfg, &load_data(cfg)?)?;
    let csv = eval_csv(&model, &val)?;
    run.report(
        "reports/eval.csv",
        &csv,
        cfg.seed,
        BTreeMap::from([("tokenizer".into(), id)]),
    )?;
    eprint!("{}", csv);
    Ok(())
}

fn defaults_help() -> String {
    let json = RunConfig::default().to_json().unwrap_or_default();
    format!(
        "Run config defaults (flat JSON; override with --config FILE, --set KEY=VALUE or the flags above):\n{json}\n\nEnvironment: CVQ_THREADS caps intra-op parallelism (1 forces the sequential path)."
    )
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTokenizer(a) => train_tok(a),
        Command::ExtractTokens(a) => extract_tokens(a),
        Command::TrainCar(a) => train_car(a),
        Command::Generate(a) => generate(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
        Command::AblateChannel(a) => ablate(a),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let help = defaults_help();
    let cmd = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|s| s.after_long_help(help.clone()));
    let parsed = cmd
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    eprintln!("error[usage]: missing subcommand");
                    return ExitCode::from(2);
                }
                _ => {}
            }
            let text = e.to_string();
            let line = text
                .lines()
                .next()
                .unwrap_or("invalid usage")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.class, f.detail.replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
