use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info};

use emoe::io::{self, Layer, LoadedLayer};
use emoe::train::{self, convert_emoe2lora, convert_lora2emoe, ToyExperiment, ToyModel, TuneMode};
use emoe::{
    activation_ratios, balanced_kmeans, export_heatmap, flops_report, usage_histogram, EmoeLayer,
    Error, FfnLayer, GateMode, KMeansConfig, Partition, Router, Scalar, SelectionPolicy,
};

#[derive(Parser, Debug)]
#[command(
    name = "emoe",
    version,
    about = "Split dense feed-forward layers into mixtures of experts"
)]
struct Cli {
    /// Output style for results.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Balanced k-means over the key vectors of a dense layer.
    Cluster(ClusterArgs),
    /// Split a dense layer into experts using a partition file.
    Split(SplitArgs),
    /// Merge a split layer back into a dense layer.
    Merge(MergeArgs),
    /// Run inputs through a dense or split layer.
    Forward(ForwardArgs),
    /// Expert usage, activation ratios and a usage heatmap.
    Stats(StatsArgs),
    /// Keep a subset of experts.
    Prune(PruneArgs),
    /// Multiply-accumulate counts of dense versus sparse inference.
    Flops(FlopsArgs),
    /// Pretrain and fine-tune the toy model.
    TrainToy(TrainArgs),
    /// Convert a model checkpoint between dense and split blocks.
    Convert(ConvertArgs),
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    ffn: PathBuf,
    #[arg(long)]
    experts: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 4)]
    restarts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GateArg {
    Avgk,
    Learned,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    ffn: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    #[arg(long)]
    topk: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = GateArg::Avgk)]
    gate: GateArg,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long)]
    emoe: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Top,
    Bottom,
    Nottop,
    Random,
    All,
}

#[derive(Args, Debug, Clone)]
struct RoutingArgs {
    #[arg(long, value_enum, default_value_t = PolicyArg::Top)]
    policy: PolicyArg,
    /// Defaults to the layer's stored top-k.
    #[arg(long)]
    topk: Option<usize>,
    /// Required with `--policy random`.
    #[arg(long)]
    seed: Option<u64>,
}

impl RoutingArgs {
    fn policy(&self) -> Result<SelectionPolicy, Error> {
        Ok(match self.policy {
            PolicyArg::Top => SelectionPolicy::TopK,
            PolicyArg::Bottom => SelectionPolicy::BottomK,
            PolicyArg::Nottop => SelectionPolicy::NotTopK,
            PolicyArg::All => SelectionPolicy::All,
            PolicyArg::Random => SelectionPolicy::Random {
                seed: self
                    .seed
                    .ok_or_else(|| Error::Argument("--policy random requires --seed".into()))?,
            },
        })
    }
}

#[derive(Args, Debug)]
struct ForwardArgs {
    #[arg(long)]
    layer: PathBuf,
    /// Tensor file; each row of the first (or `--tensor`) entry is one input.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    tensor: Option<String>,
    #[command(flatten)]
    routing: RoutingArgs,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    emoe: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    tensor: Option<String>,
    #[command(flatten)]
    routing: RoutingArgs,
    #[arg(long)]
    heatmap_out: Option<PathBuf>,
    /// Row label in the heatmap.
    #[arg(long, default_value = "inputs")]
    task: String,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    emoe: PathBuf,
    /// Comma-separated expert ids.
    #[arg(long, value_delimiter = ',', required = true)]
    keep: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long)]
    h: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    experts: usize,
    #[arg(long)]
    topk: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Dense,
    Emoe,
    EmoeLearn,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` lines; `--set` and flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV; expert usage goes to `<log>.usage.csv`.
    #[arg(long)]
    log: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = false)]
    f32: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Direction {
    Lora2emoe,
    Emoe2lora,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    direction: Direction,
    /// One per block, or a single file applied to every block.
    #[arg(long)]
    partition: Vec<PathBuf>,
    #[arg(long, default_value_t = 2)]
    topk: usize,
    #[arg(long, value_enum, default_value_t = GateArg::Avgk)]
    gate: GateArg,
    #[arg(long)]
    out: PathBuf,
}

struct Out {
    format: Format,
}

impl Out {
    fn header(&self, command: &str, settings: &[(&str, String)]) {
        println!("# command = {command}");
        for (k, v) in settings {
            println!("# {k} = {v}");
        }
    }

    /// One result line: `label v0 v1 ...` or `label,v0,v1,...`.
    fn row<V: Display>(&self, label: &str, values: &[V]) {
        let sep = if self.format == Format::Csv { "," } else { " " };
        let mut line = label.to_string();
        for v in values {
            line.push_str(sep);
            line.push_str(&v.to_string());
        }
        println!("{line}");
    }

    fn kv<V: Display>(&self, key: &str, value: V) {
        match self.format {
            Format::Text => println!("{key} {value}"),
            Format::Csv => println!("{key},{value}"),
        }
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn show_opt<V: Display>(v: &Option<V>) -> String {
    v.as_ref()
        .map_or_else(|| "-".to_string(), ToString::to_string)
}

fn gate_mode(g: GateArg) -> GateMode {
    match g {
        GateArg::Avgk => GateMode::AvgK,
        GateArg::Learned => GateMode::Learned,
    }
}

fn read_inputs(path: &Path, name: Option<&str>) -> Result<Vec<Vec<f64>>, Error> {
    let tensors = io::read_tensors(path)?;
    let tensor = match name {
        Some(n) => io::find(&tensors, n)
            .ok_or_else(|| Error::Validation(format!("no tensor named '{n}'")))?,
        None => {
            &tensors
                .first()
                .ok_or_else(|| Error::Validation(format!("{} holds no tensors", show(path))))?
                .1
        }
    };
    Ok(tensor.rows_f64())
}

fn cast_rows<T: Scalar>(rows: &[Vec<f64>]) -> Vec<Vec<T>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| T::lit(v)).collect())
        .collect()
}

fn check_finite<T: Scalar>(values: &[T]) -> Result<(), Error> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training {
            step: 0,
            message: "non-finite output".into(),
        });
    }
    Ok(())
}

fn cluster(out: &Out, a: &ClusterArgs) -> Result<(), Error> {
    out.header(
        "cluster",
        &[
            ("ffn", show(&a.ffn)),
            ("experts", a.experts.to_string()),
            ("seed", a.seed.to_string()),
            ("max_iter", a.max_iter.to_string()),
            ("restarts", a.restarts.to_string()),
            ("out", show(&a.out)),
        ],
    );
    let points = match io::load_layer(&a.ffn)? {
        LoadedLayer::F32(Layer::Dense(f)) => f.key_points(),
        LoadedLayer::F64(Layer::Dense(f)) => f.key_points(),
        _ => return Err(Error::Validation("cluster expects a dense layer".into())),
    };
    let config = KMeansConfig {
        max_iter: a.max_iter,
        restarts: a.restarts,
        ..KMeansConfig::new(a.experts, a.seed)
    };
    let (partition, report) = balanced_kmeans(&points, &config)?;
    io::write_partition(&a.out, &partition)?;
    for (i, obj) in report.objective_per_iteration.iter().enumerate() {
        out.row("objective", &[i.to_string(), obj.to_string()]);
    }
    out.kv("final_objective", report.final_objective());
    out.kv("converged", report.converged);
    out.kv("restart", report.restart);
    for (e, g) in partition.groups().iter().enumerate() {
        let mut vals = vec![e];
        vals.extend(g);
        out.row("expert", &vals);
    }
    Ok(())
}

fn split(out: &Out, a: &SplitArgs) -> Result<(), Error> {
    out.header(
        "split",
        &[
            ("ffn", show(&a.ffn)),
            ("partition", show(&a.partition)),
            ("topk", a.topk.to_string()),
            ("gate", format!("{:?}", a.gate).to_lowercase()),
            ("out", show(&a.out)),
        ],
    );
    let partition = io::read_partition(&a.partition)?;
    let mode = gate_mode(a.gate);
    let n = match io::load_layer(&a.ffn)? {
        LoadedLayer::F32(Layer::Dense(f)) => split_write(&f, &partition, a, mode)?,
        LoadedLayer::F64(Layer::Dense(f)) => split_write(&f, &partition, a, mode)?,
        _ => return Err(Error::Validation("split expects a dense layer".into())),
    };
    out.kv("experts", n);
    out.kv("expert_size", partition.expert_size());
    Ok(())
}

fn split_write<T: Scalar>(
    f: &FfnLayer<T>,
    p: &Partition,
    a: &SplitArgs,
    mode: GateMode,
) -> Result<usize, Error> {
    let layer = EmoeLayer::split(f, p, a.topk, mode)?;
    io::write_emoe(&a.out, &layer)?;
    Ok(layer.n_experts())
}

fn merge(out: &Out, a: &MergeArgs) -> Result<(), Error> {
    out.header("merge", &[("emoe", show(&a.emoe)), ("out", show(&a.out))]);
    let d = match io::load_layer(&a.emoe)? {
        LoadedLayer::F32(Layer::Emoe(e)) => merge_write(&e, &a.out)?,
        LoadedLayer::F64(Layer::Emoe(e)) => merge_write(&e, &a.out)?,
        _ => return Err(Error::Validation("merge expects a split layer".into())),
    };
    out.kv("d", d);
    Ok(())
}

fn merge_write<T: Scalar>(e: &EmoeLayer<T>, path: &Path) -> Result<usize, Error> {
    let f = e.merge()?;
    io::write_ffn(path, &f)?;
    Ok(f.d())
}

fn forward(out: &Out, a: &ForwardArgs) -> Result<(), Error> {
    let policy = a.routing.policy()?;
    out.header(
        "forward",
        &[
            ("layer", show(&a.layer)),
            ("input", show(&a.input)),
            ("tensor", show_opt(&a.tensor)),
            ("policy", policy.to_string()),
            ("topk", show_opt(&a.routing.topk)),
        ],
    );
    let rows = read_inputs(&a.input, a.tensor.as_deref())?;
    match io::load_layer(&a.layer)? {
        LoadedLayer::F32(l) => forward_rows(out, &l, &cast_rows(&rows), policy, a.routing.topk),
        LoadedLayer::F64(l) => forward_rows(out, &l, &cast_rows(&rows), policy, a.routing.topk),
    }
}

fn forward_rows<T: Scalar>(
    out: &Out,
    layer: &Layer<T>,
    rows: &[Vec<T>],
    policy: SelectionPolicy,
    k: Option<usize>,
) -> Result<(), Error> {
    let mut router = Router::new(policy);
    for (i, x) in rows.iter().enumerate() {
        let (y, selected) = match layer {
            Layer::Dense(f) => (f.forward(x)?, None),
            Layer::Emoe(e) => {
                let (y, s) = e.forward_routed(x, &mut router, k)?;
                (y, Some(s))
            }
        };
        check_finite(&y)?;
        out.row(&format!("output{}{i}", sep(out)), &y);
        if let Some(s) = selected {
            out.row(&format!("selected{}{i}", sep(out)), &s);
        }
    }
    Ok(())
}

fn sep(out: &Out) -> &'static str {
    if out.format == Format::Csv {
        ","
    } else {
        " "
    }
}

fn stats(out: &Out, a: &StatsArgs) -> Result<(), Error> {
    let policy = a.routing.policy()?;
    out.header(
        "stats",
        &[
            ("emoe", show(&a.emoe)),
            ("inputs", show(&a.inputs)),
            ("tensor", show_opt(&a.tensor)),
            ("policy", policy.to_string()),
            ("topk", show_opt(&a.routing.topk)),
            ("heatmap_out", show_opt(&a.heatmap_out.as_deref().map(show))),
            ("task", a.task.clone()),
        ],
    );
    let rows = read_inputs(&a.inputs, a.tensor.as_deref())?;
    match io::load_layer(&a.emoe)? {
        LoadedLayer::F32(Layer::Emoe(e)) => stats_rows(out, a, &e, &cast_rows(&rows), policy),
        LoadedLayer::F64(Layer::Emoe(e)) => stats_rows(out, a, &e, &cast_rows(&rows), policy),
        _ => Err(Error::Validation("stats expects a split layer".into())),
    }
}

fn stats_rows<T: Scalar>(
    out: &Out,
    a: &StatsArgs,
    e: &EmoeLayer<T>,
    rows: &[Vec<T>],
    policy: SelectionPolicy,
) -> Result<(), Error> {
    let k = a.routing.topk.unwrap_or(e.top_k());
    let hist = usage_histogram(e, rows, policy, k)?;
    out.row("counts", &hist.counts);
    out.row("frequencies", &hist.frequencies());

    let dense = e.merge()?;
    let partition = e.partition()?;
    let mut router = Router::new(policy);
    let (mut plain, mut weighted, mut n) = (0.0, 0.0, 0usize);
    for x in rows {
        let selected = router.select(&e.gate_scores(x)?, k)?;
        let r = activation_ratios(&dense, &partition, x, &selected)?;
        if r.activated_total > 0 {
            plain += r.plain;
            weighted += r.weighted;
            n += 1;
        }
    }
    let denom = n.max(1) as f64;
    out.kv("inputs", rows.len());
    out.kv("inputs_with_activation", n);
    out.kv("mean_activation_ratio", plain / denom);
    out.kv("mean_weighted_activation_ratio", weighted / denom);
    if let Some(path) = &a.heatmap_out {
        let heat = export_heatmap(&[(a.task.clone(), hist)])?;
        fs::write(path, heat.to_csv()).map_err(|err| Error::Io {
            path: path.clone(),
            source: err,
        })?;
        info!("heatmap written to {}", show(path));
    }
    Ok(())
}

fn prune(out: &Out, a: &PruneArgs) -> Result<(), Error> {
    let keep: Vec<String> = a.keep.iter().map(ToString::to_string).collect();
    out.header(
        "prune",
        &[
            ("emoe", show(&a.emoe)),
            ("keep", keep.join(",")),
            ("out", show(&a.out)),
        ],
    );
    let (n, d) = match io::load_layer(&a.emoe)? {
        LoadedLayer::F32(Layer::Emoe(e)) => prune_write(&e, &a.keep, &a.out)?,
        LoadedLayer::F64(Layer::Emoe(e)) => prune_write(&e, &a.keep, &a.out)?,
        _ => return Err(Error::Validation("prune expects a split layer".into())),
    };
    out.kv("experts", n);
    out.kv("d", d);
    Ok(())
}

fn prune_write<T: Scalar>(
    e: &EmoeLayer<T>,
    keep: &[usize],
    path: &Path,
) -> Result<(usize, usize), Error> {
    let pruned = e.prune(keep)?;
    io::write_emoe(path, &pruned)?;
    Ok((pruned.n_experts(), pruned.d()))
}

fn flops(out: &Out, a: &FlopsArgs) -> Result<(), Error> {
    out.header(
        "flops",
        &[
            ("h", a.h.to_string()),
            ("d", a.d.to_string()),
            ("experts", a.experts.to_string()),
            ("topk", a.topk.to_string()),
        ],
    );
    let r = flops_report(a.h, a.d, a.experts, a.topk)?;
    out.kv("dense_macs", r.dense_macs);
    out.kv("sparse_macs", r.sparse_macs);
    out.kv("gate_macs", r.gate_macs);
    out.kv("ratio", r.ratio);
    Ok(())
}

fn load_config(exp: &mut ToyExperiment, path: &Path) -> Result<(), Error> {
    let text = fs::read_to_string(path).map_err(|err| Error::Io {
        path: path.to_path_buf(),
        source: err,
    })?;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Validation(format!("{}:{}: expected key = value", show(path), n + 1))
        })?;
        exp.set(k.trim(), v.trim())
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", show(path), n + 1)))?;
    }
    Ok(())
}

fn train_toy(out: &Out, a: &TrainArgs) -> Result<(), Error> {
    let mut exp = ToyExperiment::reference(a.seed);
    if let Some(path) = &a.config {
        load_config(&mut exp, path)?;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("--set expects KEY=VALUE, got '{o}'")))?;
        exp.set(k.trim(), v.trim())?;
    }
    exp.mode = match a.mode {
        ModeArg::Dense => TuneMode::Dense,
        ModeArg::Emoe => TuneMode::Emoe,
        ModeArg::EmoeLearn => TuneMode::EmoeLearn,
    };
    let mut settings = vec![
        ("config", show_opt(&a.config.as_deref().map(show))),
        ("out", show(&a.out)),
        ("log", show(&a.log)),
        ("dtype", if a.f32 { "f32" } else { "f64" }.to_string()),
    ];
    settings.extend(exp.settings());
    out.header("train-toy", &settings);
    if a.f32 {
        train_run::<f32>(out, a, &exp)
    } else {
        train_run::<f64>(out, a, &exp)
    }
}

fn usage_path(log: &Path) -> PathBuf {
    let mut s = log.as_os_str().to_owned();
    s.push(".usage.csv");
    PathBuf::from(s)
}

fn train_run<T: Scalar>(out: &Out, a: &TrainArgs, exp: &ToyExperiment) -> Result<(), Error> {
    let outcome = train::run_toy::<T>(exp)?;
    io::write_model(&a.out, &outcome.model)?;
    let write = |path: &Path, text: String| {
        fs::write(path, text).map_err(|err| Error::Io {
            path: path.to_path_buf(),
            source: err,
        })
    };
    write(&a.log, outcome.finetune_log.loss_csv())?;
    write(&usage_path(&a.log), outcome.finetune_log.usage_csv())?;
    debug!("pretrain losses: {:?}", outcome.pretrain_log.losses.last());
    out.kv("pretrain_test_accuracy", outcome.pretrain_log.test_accuracy);
    out.kv(
        "final_loss",
        outcome
            .finetune_log
            .losses
            .last()
            .copied()
            .unwrap_or(f64::NAN),
    );
    out.kv("train_accuracy", outcome.finetune_log.train_accuracy);
    out.kv("test_accuracy", outcome.finetune_log.test_accuracy);
    Ok(())
}

fn convert(out: &Out, a: &ConvertArgs) -> Result<(), Error> {
    let parts: Vec<String> = a.partition.iter().map(|p| show(p)).collect();
    out.header(
        "convert",
        &[
            ("model", show(&a.model)),
            ("direction", format!("{:?}", a.direction).to_lowercase()),
            ("partition", parts.join(",")),
            ("topk", a.topk.to_string()),
            ("gate", format!("{:?}", a.gate).to_lowercase()),
            ("out", show(&a.out)),
        ],
    );
    let tensors = io::read_tensors(&a.model)?;
    match io::model_dtype(&tensors)? {
        emoe::DType::F32 => convert_model(out, a, io::model_from_tensors::<f32>(&tensors)?),
        emoe::DType::F64 => convert_model(out, a, io::model_from_tensors::<f64>(&tensors)?),
    }
}

fn convert_model<T: Scalar>(out: &Out, a: &ConvertArgs, model: ToyModel<T>) -> Result<(), Error> {
    let converted = match a.direction {
        Direction::Emoe2lora => convert_emoe2lora(&model)?,
        Direction::Lora2emoe => {
            let loaded = a
                .partition
                .iter()
                .map(io::read_partition)
                .collect::<Result<Vec<_>, _>>()?;
            let partitions = match loaded.len() {
                0 => return Err(Error::Argument("lora2emoe requires --partition".into())),
                1 => vec![loaded[0].clone(); model.blocks.len()],
                _ => loaded,
            };
            convert_lora2emoe(&model, &partitions, a.topk, gate_mode(a.gate))?
        }
    };
    io::write_model(&a.out, &converted)?;
    out.kv("blocks", converted.blocks.len());
    out.kv(
        "split_blocks",
        converted.blocks.iter().filter(|b| b.is_emoe()).count(),
    );
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Argument(_) => 1,
        Error::Training { .. } => 3,
        Error::Shape(_)
        | Error::Constraint(_)
        | Error::State(_)
        | Error::Format { .. }
        | Error::Validation(_)
        | Error::StaleCache(_)
        | Error::Io { .. } => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EMOE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = Out { format: cli.format };
    let result = match &cli.command {
        Command::Cluster(a) => cluster(&out, a),
        Command::Split(a) => split(&out, a),
        Command::Merge(a) => merge(&out, a),
        Command::Forward(a) => forward(&out, a),
        Command::Stats(a) => stats(&out, a),
        Command::Prune(a) => prune(&out, a),
        Command::Flops(a) => flops(&out, a),
        Command::TrainToy(a) => train_toy(&out, a),
        Command::Convert(a) => convert(&out, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
