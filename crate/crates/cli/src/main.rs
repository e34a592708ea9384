//! `nluprompt` command-line interface.
//!
//! Exit codes: 0 success, 1 input error, 2 partial remote failure.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use nluprompt::corpus::{
    build_corpus, read_instances_jsonl, write_jsonl, CorpusConfig, DatasetStatus, Domain, SamplingPlan,
};
use nluprompt::dare::{dare_merge, encode_params, load_params, MergeConfig};
use nluprompt::infer::{run_benchmark, BlockingSummarizer, ChatClient, FewShotSetup, InferenceConfig};
use nluprompt::metrics::{aggregate_benchmark, results_table, BenchmarkManifest};
use nluprompt::parse::{align_spans, parse_for_layout, parse_token_output, PredictionRecord};
use nluprompt::prompt::{render, Layout};
use nluprompt::types::{ChoiceSet, NluInstance};
use nluprompt::RenderOptions;

#[derive(Debug, Parser)]
#[command(name = "nluprompt", version, about = "Unified instruction prompts for medical NLU")]
struct Cli {
    /// Global seed for rendering, sampling, few-shot selection and merging.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file (TOML): a corpus plan for build-corpus, an inference
    /// config for run-eval.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log filter, e.g. `info` or `nluprompt=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// Output directory (default `out`; format and parse only write here when given).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble an instruction-tuning corpus from a plan file.
    BuildCorpus(BuildCorpusArgs),
    /// Run a benchmark pass against a chat-completion endpoint.
    RunEval(RunEvalArgs),
    /// Merge fine-tuned parameters into their base with drop-and-rescale.
    Merge(MergeArgs),
    /// Render one instance (JSON on stdin or --instance) to its prompt.
    Format(FormatArgs),
    /// Parse a completion on stdin into a structured prediction.
    Parse(ParseArgs),
}

#[derive(Debug, Args, Serialize)]
struct BuildCorpusArgs {
    /// Total instances under an equal-per-task budget.
    #[arg(long)]
    total: Option<usize>,
    /// Sample an equal number of instances per task.
    #[arg(long)]
    equal_per_task: bool,
    /// Keep label and option order as given.
    #[arg(long)]
    no_shuffle: bool,
    /// Only use datasets from these domains (biomedical, clinical, general).
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<String>>,
    /// Endpoint for summarizing long documents (datasets with summarize_type).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "model")]
    model: String,
}

#[derive(Debug, Args, Serialize)]
struct RunEvalArgs {
    /// Instance JSONL to evaluate.
    input: PathBuf,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// In-context examples for token-classification tasks.
    #[arg(long)]
    fewshot: Option<usize>,
    /// Instance JSONL to draw examples from (default: the input, excluding the query).
    #[arg(long)]
    fewshot_pool: Option<PathBuf>,
    /// Add entity F1 under the overlap criterion.
    #[arg(long)]
    relaxed: bool,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    max_attempts: Option<u32>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    /// JSON mapping benchmark names to dataset rosters, for macro averages.
    #[arg(long)]
    benchmarks: Option<PathBuf>,
    #[arg(long)]
    shuffle_labels: bool,
}

#[derive(Debug, Args, Serialize)]
struct MergeArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    tuned: PathBuf,
    /// Probability of dropping each delta element, in [0, 1).
    #[arg(long)]
    drop_rate: f64,
    /// Scale applied to the rescaled delta, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    weight: f64,
}

#[derive(Debug, Args, Serialize)]
struct RenderArgs {
    #[arg(long)]
    shuffle_labels: bool,
    #[arg(long, default_value_t = 2)]
    context_sentences: usize,
    #[arg(long, default_value_t = 12)]
    negatives: usize,
}

#[derive(Debug, Args, Serialize)]
struct FormatArgs {
    /// Instance JSON file; stdin when absent.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Print the rendered pair and layout as JSON.
    #[arg(long, conflicts_with = "output_only")]
    json: bool,
    /// Print the expected output instead of the input.
    #[arg(long)]
    output_only: bool,
    #[command(flatten)]
    render: RenderArgs,
}

#[derive(Debug, Args, Serialize)]
struct ParseArgs {
    /// Comma-separated entity labels (token output).
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["choices", "instance"])]
    labels: Option<Vec<String>>,
    /// Source text to align token spans against.
    #[arg(long, requires = "labels")]
    source: Option<String>,
    /// Comma-separated option descriptions, lettered from (A).
    #[arg(long, value_delimiter = ',', conflicts_with = "instance")]
    choices: Option<Vec<String>>,
    /// Several options may be selected.
    #[arg(long, requires = "choices")]
    multi: bool,
    /// Instance JSON whose rendered layout drives parsing.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[command(flatten)]
    render: RenderArgs,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a, A: Serialize, D: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: Option<&'a Path>,
    args: &'a A,
    details: D,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::BuildCorpus(a) => cmd_build_corpus(cli, a),
        Command::RunEval(a) => cmd_run_eval(cli, a),
        Command::Merge(a) => cmd_merge(cli, a),
        Command::Format(a) => cmd_format(cli, a),
        Command::Parse(a) => cmd_parse(cli, a),
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    write_jsonl(items, io::BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest<A: Serialize, D: Serialize>(
    cli: &Cli,
    dir: &Path,
    command: &str,
    args: &A,
    details: D,
) -> Result<()> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cli.seed.unwrap_or(0),
        config: cli.config.as_deref(),
        args,
        details,
    };
    write_json(&dir.join("manifest.json"), &record)
}

fn parse_domain(s: &str) -> Result<Domain> {
    serde_json::from_value(Value::String(s.trim().to_lowercase()))
        .with_context(|| format!("unknown domain `{s}` (biomedical, clinical, general)"))
}

fn cmd_build_corpus(cli: &Cli, args: &BuildCorpusArgs) -> Result<u8> {
    let path = cli.config.as_deref().context("build-corpus needs --config <plan.toml>")?;
    let mut cfg = CorpusConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    let mut opts = cfg.build_options();
    if args.no_shuffle {
        opts.render.shuffle_labels = false;
    }
    if let Some(ds) = &args.domains {
        opts.domains = Some(ds.iter().map(|d| parse_domain(d)).collect::<Result<_>>()?);
    }
    if args.equal_per_task || args.total.is_some() {
        let plan = opts.plan.get_or_insert_with(|| {
            SamplingPlan::new(50_000, cfg.dataset_tasks(), cfg.seed.unwrap_or(0))
        });
        if let Some(total) = args.total {
            plan.total_instances = total;
        }
    }
    if let Some(plan) = &opts.plan {
        plan.validate()?;
    }

    let summarizer = match &args.endpoint {
        Some(url) => Some(BlockingSummarizer::new(ChatClient::new(InferenceConfig::new(url, &args.model))?)?),
        None => None,
    };
    let output = build_corpus(
        &cfg.datasets,
        &opts,
        summarizer.as_ref().map(|s| s as &dyn nluprompt::corpus::Summarizer),
    )?;

    let dir = out_dir(cli)?;
    write_lines(&dir.join("corpus.jsonl"), &output.pairs)?;
    write_manifest(cli, &dir, "build-corpus", args, &output.manifest)?;
    for w in &output.manifest.warnings {
        log::warn!("{w}");
    }
    let mut failed = false;
    for d in &output.manifest.datasets {
        if d.status == DatasetStatus::Failed {
            failed = true;
            eprintln!("dataset `{}` failed: {}", d.name, d.error.as_deref().unwrap_or("unknown error"));
        }
    }
    eprintln!("wrote {} prompt pairs to {}", output.pairs.len(), dir.join("corpus.jsonl").display());
    Ok(if failed { 1 } else { 0 })
}

fn inference_config(cli: &Cli, args: &RunEvalArgs) -> Result<InferenceConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<InferenceConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let url = args.endpoint.clone().context("run-eval needs --endpoint or --config")?;
            InferenceConfig::new(url, args.model.clone().unwrap_or_else(|| "model".into()))
        }
    };
    if let Some(v) = &args.endpoint {
        cfg.endpoint_url = v.clone();
    }
    if let Some(v) = &args.model {
        cfg.model_name = v.clone();
    }
    if let Some(v) = args.concurrency {
        cfg.max_concurrent_requests = v;
    }
    if let Some(v) = args.max_tokens {
        cfg.max_output_tokens = v;
    }
    if let Some(v) = args.max_attempts {
        cfg.retry.max_attempts = v;
    }
    if let Some(v) = args.timeout_ms {
        cfg.timeout_ms = v;
    }
    if let Some(v) = &args.api_key_env {
        cfg.api_key_env_var = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run_eval(cli: &Cli, args: &RunEvalArgs) -> Result<u8> {
    let cfg = inference_config(cli, args)?;
    let instances = read_instances_jsonl(&args.input)?;
    if instances.is_empty() {
        bail!("{} holds no instances", args.input.display());
    }
    let mut ids = BTreeSet::new();
    for inst in &instances {
        if !ids.insert((inst.dataset.as_str(), inst.id.as_str())) {
            bail!("duplicate instance id `{}` in dataset `{}`", inst.id, inst.dataset);
        }
    }
    let seed = cli.seed.unwrap_or(0);
    let opts = RenderOptions { seed, shuffle_labels: args.shuffle_labels, ..RenderOptions::default() };
    let fewshot = match args.fewshot {
        Some(k) => Some(FewShotSetup {
            k,
            seed,
            require_distinct_outputs: true,
            max_attempts: 1000,
            pool: match &args.fewshot_pool {
                Some(p) => read_instances_jsonl(p)?,
                None => instances.clone(),
            },
        }),
        None => None,
    };
    let benchmarks: Option<BenchmarkManifest> = match &args.benchmarks {
        Some(p) => Some(
            serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
        ),
        None => None,
    };

    let client = ChatClient::new(cfg)?;
    let runtime = tokio::runtime::Runtime::new()?;
    let mut run = runtime.block_on(run_benchmark(&instances, &client, fewshot.as_ref(), &opts))?;
    if !args.relaxed {
        for r in run.reports.iter_mut() {
            r.relaxed_f1 = None;
        }
    }
    let summaries = match &benchmarks {
        Some(b) => Some(aggregate_benchmark(&run.reports, b)?),
        None => None,
    };

    let dir = out_dir(cli)?;
    write_lines(&dir.join("predictions.jsonl"), &run.predictions)?;
    write_lines(&dir.join("prompts.jsonl"), &run.prompts)?;
    write_json(&dir.join("report.json"), &json!({ "datasets": run.reports, "benchmarks": summaries }))?;
    let table = results_table(&run.reports, args.relaxed);
    fs::write(dir.join("results.txt"), &table)?;
    write_manifest(cli, &dir, "run-eval", args, &run.manifest)?;
    print!("{table}");
    if run.is_partial() {
        eprintln!(
            "{} of {} requests failed; coverage {:.4}",
            run.manifest.n_failed, run.manifest.n_instances, run.manifest.coverage
        );
        return Ok(2);
    }
    Ok(0)
}

fn cmd_merge(cli: &Cli, args: &MergeArgs) -> Result<u8> {
    let cfg = MergeConfig { drop_rate: args.drop_rate, seed: cli.seed.unwrap_or(0), weight: args.weight };
    cfg.validate()?;
    let base = load_params(&args.base)?;
    let tuned = load_params(&args.tuned)?;
    let (merged, stats) = dare_merge(&base, &tuned, &cfg)?;
    let bytes = encode_params(&merged)?;
    let dir = out_dir(cli)?;
    let path = dir.join("merged.params");
    fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    write_manifest(
        cli,
        &dir,
        "merge",
        args,
        json!({ "merge": cfg, "stats": stats, "entries": merged.len(), "output": path }),
    )?;
    eprintln!("merged {} entries ({} of {} elements dropped) into {}", merged.len(), stats.dropped, stats.elements, path.display());
    Ok(0)
}

fn read_instance(path: Option<&Path>) -> Result<NluInstance> {
    let text = match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let inst: NluInstance = serde_json::from_str(text.trim()).context("parsing instance JSON")?;
    for w in inst.validate()? {
        log::warn!("{w}");
    }
    Ok(inst)
}

fn render_options(cli: &Cli, r: &RenderArgs) -> RenderOptions {
    RenderOptions {
        seed: cli.seed.unwrap_or(0),
        shuffle_labels: r.shuffle_labels,
        context_sentences: r.context_sentences,
        negative_category_count: r.negatives,
    }
}

fn cmd_format(cli: &Cli, args: &FormatArgs) -> Result<u8> {
    let inst = read_instance(args.instance.as_deref())?;
    let rendered = render(&inst, &render_options(cli, &args.render))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rendered)?);
    } else if args.output_only {
        println!("{}", rendered.pair.output);
    } else {
        println!("{}", rendered.pair.input);
    }
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        write_manifest(cli, dir, "format", args, &rendered)?;
    }
    Ok(0)
}

fn cmd_parse(cli: &Cli, args: &ParseArgs) -> Result<u8> {
    let mut completion = String::new();
    io::stdin().read_to_string(&mut completion)?;
    let record = if let Some(labels) = &args.labels {
        let mut pred = parse_token_output(&completion, labels);
        if let Some(src) = &args.source {
            pred = align_spans(&pred, src);
        }
        let recognized = completion.lines().filter(|l| !l.trim().is_empty()).count() > pred.unparsed_lines.len();
        PredictionRecord {
            instance_id: String::new(),
            mentions: Some(pred.mentions),
            error: (!recognized).then(|| "no label line recognized".to_string()),
            ..Default::default()
        }
    } else if let Some(choices) = &args.choices {
        let set = ChoiceSet::from_labels(choices.iter().map(|c| c.trim().to_string()), args.multi)?;
        parse_for_layout("", &completion, &Layout::Choices { choices: set }, "")
    } else if let Some(path) = &args.instance {
        let inst = read_instance(Some(path))?;
        let rendered = render(&inst, &render_options(cli, &args.render))?;
        parse_for_layout(&inst.id, &completion, &rendered.layout, &inst.source_text)
    } else {
        bail!("parse needs --labels, --choices or --instance");
    };
    println!("{}", serde_json::to_string(&record)?);
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir)?;
        write_manifest(cli, dir, "parse", args, &record)?;
    }
    if let Some(e) = &record.error {
        eprintln!("unparseable completion: {e}");
        return Ok(1);
    }
    Ok(0)
}
