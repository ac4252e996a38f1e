use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use dft::entropy::{self, EntropyProfile};
use dft::eval::{self, AblationEntry, EvalReport, LensLayers};
use dft::model::{init_params, load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use dft::plot;
use dft::syndata::{self, Dataset, Split, TaskKind, TaskSpec};
use dft::trainer::{
    load_optimizer_state, save_optimizer_state, StepRecord, TrainConfig, TrainMetrics, Trainer,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dft", version, about = "Deep supervision fine-tuning on synthetic parallel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel dataset as JSON lines.
    GenData(GenData),
    /// Train a model from a TOML run config.
    Train(Train),
    /// Per-layer logit-lens entropy and suggested critical layers.
    ProfileEntropy(Profile),
    /// Evaluate a checkpoint on one split.
    Evaluate(Evaluate),
    /// Per-layer pooled cosine between parallel queries.
    Align(Align),
    /// 2-D PCA projection of pooled query states.
    Project(Project),
    /// Train and evaluate several configs from one shared init.
    Ablate(Ablate),
    /// Render an SVG from a metrics, entropy, sweep or projection file.
    Plot(PlotArgs),
}

#[derive(clap::Args)]
struct GenData {
    #[arg(long)]
    task: TaskKind,
    #[arg(long, default_value_t = 256)]
    vocab_size: usize,
    #[arg(long, default_value_t = 4000)]
    train: usize,
    #[arg(long, default_value_t = 256)]
    dev: usize,
    #[arg(long, default_value_t = 256)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    lang_seed: u64,
    /// Payload range `lo,hi` (items per query).
    #[arg(long, value_parser = parse_range)]
    query_len: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_range)]
    answer_len: Option<(usize, usize)>,
    #[arg(long, default_value = "data.jsonl")]
    output: PathBuf,
}

#[derive(clap::Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    /// Continue from the checkpoint and optimizer state in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct ModelSource {
    /// Run manifest written by `train`.
    #[arg(long, conflicts_with = "checkpoint")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset file; defaults to the one named in the manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Target,
    English,
}

#[derive(clap::Args)]
struct Profile {
    #[command(flatten)]
    source: ModelSource,
    /// Which language's sequences to feed.
    #[arg(long, value_enum, default_value = "target")]
    side: Side,
    /// Write entropy.jsonl, entropy.txt, entropy.svg and heatmap.csv here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Evaluate {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    layer_i: Option<usize>,
    #[arg(long)]
    layer_j: Option<usize>,
    /// Row label; defaults to the manifest's method.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value = "")]
    task: String,
    /// Write `<output>.txt` and `<output>.jsonl`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Align {
    #[command(flatten)]
    source: ModelSource,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Project {
    #[command(flatten)]
    source: ModelSource,
    /// Layer to project; defaults to the manifest's LC layer, else 1.
    #[arg(long)]
    layer: Option<usize>,
    /// Write `<output>.jsonl` and `<output>.svg`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args)]
struct Ablate {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Metrics,
    Entropy,
    Sweep,
    Projection,
}

#[derive(clap::Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    path: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    output_dir: PathBuf,
    #[serde(default)]
    init_seed: u64,
    /// Start from this checkpoint instead of a fresh init.
    #[serde(default)]
    init_checkpoint: Option<PathBuf>,
    model: ModelConfig,
    data: DataConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetRef {
    path: PathBuf,
    hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    dataset: DatasetRef,
    init_hash: String,
    /// Relative to the manifest's directory.
    checkpoint: PathBuf,
    checkpoint_hash: String,
    optimizer_state: PathBuf,
    metrics: PathBuf,
    steps: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfig {
    layers: Vec<usize>,
    #[serde(default = "default_label")]
    label: String,
    train: TrainConfig,
}

fn default_label() -> String {
    "et".into()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblationConfig {
    output_dir: PathBuf,
    #[serde(default)]
    init_seed: u64,
    #[serde(default)]
    init_checkpoint: Option<PathBuf>,
    #[serde(default = "default_split")]
    split: Split,
    #[serde(default)]
    task: String,
    model: ModelConfig,
    data: DataConfig,
    #[serde(default)]
    lens: LensLayers,
    #[serde(default)]
    entry: Vec<AblationEntry>,
    #[serde(default)]
    sweep: Option<SweepConfig>,
}

fn default_split() -> Split {
    Split::Test
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v = toml::from_str(&text).map_err(|e| dft::Error::Config(format!("{}: {}", path.display(), e.message())))?;
    Ok(v)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    syndata::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<ModelParams> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn initial_params(model: &ModelConfig, seed: u64, from: Option<&Path>) -> anyhow::Result<ModelParams> {
    match from {
        Some(p) => {
            let params = load_model(p)?;
            if &params.config != model {
                return Err(dft::Error::Config(format!("{} does not match the model config", p.display())).into());
            }
            Ok(params)
        }
        None => Ok(init_params(model, seed)?),
    }
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Model, dataset and (when given) manifest behind a `ModelSource`.
struct Loaded {
    params: ModelParams,
    data: Dataset,
    manifest: Option<Manifest>,
}

fn load_source(src: &ModelSource) -> anyhow::Result<Loaded> {
    let (params, manifest) = match (&src.manifest, &src.checkpoint) {
        (Some(m), _) => {
            let text = std::fs::read_to_string(m).with_context(|| format!("reading {}", m.display()))?;
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| dft::Error::Config(format!("{}: {e}", m.display())))?;
            let ckpt = resolve(&config_dir(m), &manifest.checkpoint);
            (load_model(&ckpt)?, Some(manifest))
        }
        (None, Some(c)) => (load_model(c)?, None),
        (None, None) => bail!(dft::Error::Config("pass --manifest or --checkpoint".into())),
    };
    let data_path = match (&src.data, &manifest) {
        (Some(d), _) => d.clone(),
        (None, Some(m)) => m.dataset.path.clone(),
        (None, None) => bail!(dft::Error::Config("pass --data".into())),
    };
    let data = load_data(&data_path)?;
    Ok(Loaded { params, data, manifest })
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let mut task = TaskSpec::new(a.task, a.vocab_size, a.seed);
    if let Some(q) = a.query_len {
        task.query_len = q;
    }
    if let Some(r) = a.answer_len {
        task.answer_len = r;
    }
    let lang = syndata::make_language(a.lang_seed, a.vocab_size)?;
    let data = syndata::generate_splits(&task, &lang, [a.train, a.dev, a.test])?;
    let mut buf = Vec::new();
    syndata::write_jsonl(&mut buf, &data)?;
    write(&a.output, &buf)?;
    println!("wrote {} examples to {} (sha256 {})", data.len(), a.output.display(), data.hash());
    Ok(())
}

fn save_run_files(dir: &Path, tag: &str, t: &Trainer) -> anyhow::Result<()> {
    save_checkpoint(&dir.join(format!("{tag}.ckpt")), &t.params)?;
    save_optimizer_state(&dir.join(format!("{tag}.state")), &t.optimizer)?;
    Ok(())
}

fn train_cmd(a: Train) -> anyhow::Result<()> {
    let cfg: RunConfig = read_toml(&a.config)?;
    let base = config_dir(&a.config);
    let out = resolve(&base, &cfg.output_dir);
    let data_path = resolve(&base, &cfg.data.path);
    let data = load_data(&data_path)?;
    let data_path = data_path.canonicalize().unwrap_or(data_path);
    cfg.train.validate(cfg.model.n_layers)?;
    let train_set = data.subset(Split::Train);
    let init_from = cfg.init_checkpoint.as_ref().map(|p| resolve(&base, p));
    let init = initial_params(&cfg.model, cfg.init_seed, init_from.as_deref())?;
    let init_hash = eval::params_hash(&init);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.jsonl");
    let (mut trainer, mut prior) = if a.resume {
        let params = load_model(&out.join("model.ckpt"))?;
        let state = load_optimizer_state(&out.join("model.state"))?;
        let prior = std::fs::read_to_string(&metrics_path).unwrap_or_default();
        let kept: String = prior.lines().take(state.step).map(|l| format!("{l}\n")).collect();
        (Trainer::resume(cfg.train.clone(), &train_set.examples, params, state)?, kept)
    } else {
        (Trainer::new(cfg.train.clone(), &train_set.examples, init)?, String::new())
    };
    let every = cfg.train.checkpoint_every.unwrap_or(0);
    let result = trainer.run_until(|t| {
        if every > 0 && t.optimizer.step % every == 0 && !t.is_done() {
            save_run_files(&out, &format!("step-{}", t.optimizer.step), t).map_err(|e| dft::Error::Config(e.to_string()))?;
        }
        Ok(false)
    });
    prior.push_str(&trainer.metrics.to_jsonl());
    write(&metrics_path, &prior)?;
    if let Err(e) = result {
        save_run_files(&out, "last_good", &trainer)?;
        return Err(e.into());
    }
    save_run_files(&out, "model", &trainer)?;
    let manifest = Manifest {
        config: cfg,
        dataset: DatasetRef {
            path: data_path,
            hash: data.hash(),
        },
        init_hash,
        checkpoint: "model.ckpt".into(),
        checkpoint_hash: eval::params_hash(&trainer.params),
        optimizer_state: "model.state".into(),
        metrics: "metrics.jsonl".into(),
        steps: trainer.optimizer.step,
    };
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let last = trainer.metrics.last();
    println!(
        "trained {} steps; final total loss {}; manifest {}",
        trainer.optimizer.step,
        last.map_or("-".into(), |r| format!("{:.6}", r.total)),
        out.join("manifest.json").display()
    );
    Ok(())
}

fn profile_cmd(a: Profile) -> anyhow::Result<()> {
    let l = load_source(&a.source)?;
    let subset = l.data.subset(a.source.split);
    let seqs: Vec<Vec<usize>> = subset
        .examples
        .iter()
        .map(|e| match a.side {
            Side::Target => e.target_sequence(),
            Side::English => e.english_sequence(),
        })
        .collect();
    let prof = entropy::profile(&l.params, &seqs)?;
    print!("{}", prof.table());
    if let Some(dir) = &a.out_dir {
        write(&dir.join("entropy.jsonl"), prof.records())?;
        write(&dir.join("entropy.txt"), prof.table())?;
        write(&dir.join("entropy.svg"), prof.svg())?;
        if let Some(csv) = prof.heatmap_csv() {
            write(&dir.join("heatmap.csv"), csv)?;
        }
    }
    Ok(())
}

fn manifest_lens(m: &Option<Manifest>) -> LensLayers {
    let Some(m) = m else { return LensLayers::default() };
    let s = &m.config.train.supervision;
    LensLayers {
        layer_i: s.lc_mode.is_active().then_some(s.layer_i),
        layer_j: s.et_mode.is_active().then_some(s.layer_j),
    }
}

fn evaluate_cmd(a: Evaluate) -> anyhow::Result<()> {
    let l = load_source(&a.source)?;
    let from_manifest = manifest_lens(&l.manifest);
    let lens = LensLayers {
        layer_i: a.layer_i.or(from_manifest.layer_i),
        layer_j: a.layer_j.or(from_manifest.layer_j),
    };
    let method = a
        .method
        .clone()
        .or_else(|| l.manifest.as_ref().map(|m| m.config.train.method.to_string()))
        .unwrap_or_else(|| "model".into());
    let row = eval::evaluate(&l.params, &l.data, a.source.split, lens, &method, &a.task)?;
    let report = EvalReport { rows: vec![row] };
    print!("{}", report.to_text());
    if let Some(out) = &a.output {
        write(&with_ext(out, "txt"), report.to_text())?;
        write(&with_ext(out, "jsonl"), report.to_jsonl())?;
    }
    Ok(())
}

fn align_cmd(a: Align) -> anyhow::Result<()> {
    let l = load_source(&a.source)?;
    let subset = l.data.subset(a.source.split);
    let curve = eval::alignment_curve(&l.params, &subset.examples)?;
    let mut records = String::new();
    let mut text = String::from("layer  mean_cosine\n");
    for (k, c) in curve.per_layer.iter().enumerate() {
        records.push_str(&serde_json::json!({"layer": k, "mean_cosine": c}).to_string());
        records.push('\n');
        text.push_str(&format!("{k:>5}  {c:>11.6}\n"));
    }
    text.push_str(&format!("skipped: {}\n", curve.skipped));
    print!("{text}");
    if let Some(out) = &a.output {
        write(&with_ext(out, "txt"), &text)?;
        write(&with_ext(out, "jsonl"), &records)?;
        let pts = curve.per_layer.iter().enumerate().map(|(k, &c)| (k as f64, c)).collect();
        write(
            &with_ext(out, "svg"),
            plot::line_chart("Parallel pooled cosine per layer", "layer", "mean cosine", &[("cosine", pts)]),
        )?;
    }
    Ok(())
}

fn project_cmd(a: Project) -> anyhow::Result<()> {
    let l = load_source(&a.source)?;
    let layer = a.layer.or(manifest_lens(&l.manifest).layer_i).unwrap_or(1);
    let subset = l.data.subset(a.source.split);
    let proj = eval::project_layer(&l.params, &subset.examples, layer)?;
    println!(
        "projected {} points at layer {layer}; axis variance {:.6} {:.6}",
        proj.points.len(),
        proj.variance[0],
        proj.variance[1]
    );
    if let Some(out) = &a.output {
        write(&with_ext(out, "jsonl"), proj.to_jsonl())?;
        write(
            &with_ext(out, "svg"),
            proj.svg(&format!("Pooled query states at layer {layer} (PCA)")),
        )?;
    }
    Ok(())
}

fn ablate_cmd(a: Ablate) -> anyhow::Result<()> {
    let cfg: AblationConfig = read_toml(&a.config)?;
    let base = config_dir(&a.config);
    let out = resolve(&base, &cfg.output_dir);
    let data = load_data(&resolve(&base, &cfg.data.path))?;
    let init_from = cfg.init_checkpoint.as_ref().map(|p| resolve(&base, p));
    let init = initial_params(&cfg.model, cfg.init_seed, init_from.as_deref())?;
    if cfg.entry.is_empty() && cfg.sweep.is_none() {
        bail!(dft::Error::Config("ablation config has no entries and no sweep".into()));
    }
    if !cfg.entry.is_empty() {
        let outcome = eval::run_ablation(&init, &cfg.entry, &data, cfg.split, cfg.lens, &cfg.task)?;
        let mut text = format!("init: {}\n", outcome.init_hash);
        text.push_str(&outcome.report.to_text());
        print!("{text}");
        write(&out.join("ablation.txt"), &text)?;
        write(&out.join("ablation.jsonl"), outcome.report.to_jsonl())?;
        for (e, p) in cfg.entry.iter().zip(&outcome.params) {
            save_checkpoint(&out.join(format!("{}.ckpt", e.name)), p)?;
        }
    }
    if let Some(s) = &cfg.sweep {
        let mut sweep = eval::sweep_et(&init, &s.train, &s.layers, &data, cfg.split, &s.label)?;
        if let Some(row) = cfg.entry.iter().zip(0..).find(|(e, _)| e.train.method == dft::trainer::Method::Tft) {
            let outcome = eval::run_ablation(&init, std::slice::from_ref(row.0), &data, cfg.split, cfg.lens, &cfg.task)?;
            sweep.baseline_token_accuracy = Some(outcome.report.rows[0].token_accuracy);
        }
        print!("{}", sweep.to_text());
        write(&out.join("sweep.txt"), sweep.to_text())?;
        write(&out.join("sweep.jsonl"), sweep.to_jsonl())?;
        write(&out.join("sweep.svg"), sweep.svg())?;
    }
    Ok(())
}

fn read_jsonl_values(path: &Path) -> anyhow::Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                dft::Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

fn field(v: &serde_json::Value, key: &str, line: usize) -> anyhow::Result<f64> {
    v.get(key).and_then(serde_json::Value::as_f64).ok_or_else(|| {
        dft::Error::Parse {
            line,
            msg: format!("missing numeric field {key}"),
        }
        .into()
    })
}

fn plot_cmd(a: PlotArgs) -> anyhow::Result<()> {
    let svg = match a.kind {
        PlotKind::Metrics => {
            let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
            let mut metrics = TrainMetrics::default();
            for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: StepRecord = serde_json::from_str(l).map_err(|e| dft::Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                metrics.records.push(r);
            }
            let series = |f: fn(&StepRecord) -> f64| -> Vec<(f64, f64)> {
                metrics.records.iter().map(|r| (r.step as f64, f(r))).collect()
            };
            plot::line_chart(
                "Training losses",
                "step",
                "loss",
                &[
                    ("total", series(|r| r.total)),
                    ("l_tft", series(|r| r.l_tft)),
                    ("l_lc", series(|r| r.l_lc)),
                    ("l_et", series(|r| r.l_et)),
                ],
            )
        }
        PlotKind::Entropy => {
            let rows = read_jsonl_values(&a.input)?;
            let curve = rows
                .iter()
                .enumerate()
                .map(|(i, v)| field(v, "mean_entropy", i + 1))
                .collect::<anyhow::Result<Vec<f64>>>()?;
            EntropyProfile::from_curve(curve, None).svg()
        }
        PlotKind::Sweep => {
            let rows = read_jsonl_values(&a.input)?;
            let points: Vec<&serde_json::Value> = rows.iter().filter(|v| v.get("layer").is_some()).collect();
            let cats: Vec<String> = points
                .iter()
                .map(|v| format!("ET@{}", v["layer"]))
                .collect();
            let acc = points
                .iter()
                .enumerate()
                .map(|(i, v)| field(v, "token_accuracy", i + 1))
                .collect::<anyhow::Result<Vec<f64>>>()?;
            plot::bar_chart("ET layer sweep", "accuracy", &cats, &[("answer token accuracy", acc)])
        }
        PlotKind::Projection => {
            let rows = read_jsonl_values(&a.input)?;
            let mut classes: Vec<String> = Vec::new();
            let mut pts = Vec::new();
            for (i, v) in rows.iter().enumerate() {
                let lang = v.get("language").and_then(|l| l.as_str()).unwrap_or("?").to_string();
                let c = classes.iter().position(|x| *x == lang).unwrap_or_else(|| {
                    classes.push(lang.clone());
                    classes.len() - 1
                });
                pts.push((field(v, "x", i + 1)?, field(v, "y", i + 1)?, c));
            }
            let names: Vec<&str> = classes.iter().map(String::as_str).collect();
            plot::scatter("Pooled query states (PCA)", &pts, &names)
        }
    };
    write(&a.output, svg)?;
    println!("wrote {}", a.output.display());
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({"error": kind, "message": message}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::ProfileEntropy(a) => profile_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Align(a) => align_cmd(a),
        Command::Project(a) => project_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<dft::Error>())
                .map_or("io", dft::Error::kind);
            let message: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", error_line(kind, &message.join(": ")));
            ExitCode::FAILURE
        }
    }
}
