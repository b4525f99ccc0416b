use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use compforge_core::compdegree::{self, read_score_dump, write_score_dump};
use compforge_core::corpus::{
    build_vocab_counts, filter_oov, load_parallel_corpus, write_jsonl, CorpusFormat, ParallelExample, Side,
};
use compforge_core::ngram_index::{build_ngram_dictionary, NGramDictionary, DEFAULT_MAX_N, DEFAULT_MIN_COUNT};
use compforge_core::novelty::{benchmark_report, read_tagged};
use compforge_core::pipeline::{run_pipeline, ErrorKind, PipelineConfig};
use compforge_core::rdangle::{DecodeMode, Engine, Interval, ModelConfig, Variant, Weights};
use compforge_core::uncertainty::{
    band_select, rank_by_uncertainty, read_ensemble_dump, token_uncertainties, BandParams, UncertaintyScore,
    DEFAULT_DISCARD_TOP, DEFAULT_SAMPLE, DEFAULT_WINDOW,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl ToString) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser)]
#[command(name = "compforge", version, about = "Compositional test-set construction and re-encoding decoder simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the n-gram dictionary of a training corpus.
    BuildDict(BuildDictArgs),
    /// Drop candidates containing tokens rare in training.
    FilterOov(FilterOovArgs),
    /// Score compositional degree of every example.
    CompDegree(CompDegreeArgs),
    /// Keep the top-k distinct candidates by degree.
    SelectPool(SelectPoolArgs),
    /// Score ensemble knowledge uncertainty from a distribution dump.
    UncertaintyScore(UncertaintyArgs),
    /// Band-sample the test set from uncertainty-ranked candidates.
    SampleTestset(SampleArgs),
    /// Novel word and tag n-gram counts of a test set.
    AnalyzeNovelty(NoveltyArgs),
    /// Run the decoder engine and trace its re-encoding schedule.
    Simulate(SimulateArgs),
    /// Write seeded random weights for the decoder engine.
    InitWeights(InitWeightsArgs),
    /// Run every selection stage from one config file.
    RunPipeline(PipelineArgs),
}

#[derive(Args)]
struct CorpusOpts {
    /// Corpus format; guessed from the extension when omitted.
    #[arg(long)]
    format: Option<CorpusFormat>,
    #[arg(long, default_value = "target")]
    side: Side,
}

#[derive(Args)]
struct BuildDictArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Entries must occur more than this many times.
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    min_count: u64,
    /// Longest n-gram kept; 0 means unbounded.
    #[arg(long, default_value_t = DEFAULT_MAX_N)]
    max_n: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterOovArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Tokens need at least this many training occurrences.
    #[arg(long, default_value_t = 3)]
    min_count: u64,
    /// Also write the training token counts here.
    #[arg(long)]
    counts_out: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct CompDegreeArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    corpus: CorpusOpts,
    /// Score dump destination; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectPoolArgs {
    #[arg(long)]
    input: PathBuf,
    /// Score dump from comp-degree.
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    corpus: CorpusOpts,
    #[arg(long, default_value_t = compdegree::DEFAULT_POOL_K)]
    k: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct UncertaintyArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Score destination (JSONL); stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    input: PathBuf,
    /// Uncertainty scores from uncertainty-score.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    format: Option<CorpusFormat>,
    #[arg(long, default_value_t = DEFAULT_DISCARD_TOP)]
    discard_top: usize,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLE)]
    sample: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct NoveltyArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    tagged_train: PathBuf,
    #[arg(long)]
    tagged_test: PathBuf,
    #[command(flatten)]
    corpus: CorpusOpts,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    min_count: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_N)]
    max_n: usize,
    /// Name of the tag inventory, copied into the report.
    #[arg(long)]
    tagset: Option<String>,
    /// Report destination; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    variant: Variant,
    /// Re-encoding interval, a positive integer or "inf".
    #[arg(long, default_value = "1")]
    interval: Interval,
    #[arg(long)]
    weights: PathBuf,
    /// One source sequence of integer token ids per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Stop source rows from attending to the target prefix while fusing.
    #[arg(long)]
    no_fuse: bool,
    /// Decoded sequences; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InitWeightsArgs {
    /// Model configuration as JSON; a small toy model when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    side: Option<Side>,
    #[arg(long)]
    pool_k: Option<usize>,
    #[arg(long)]
    discard_top: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    sample: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| dispatch(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("COMPFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(format!("COMPFORGE_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(config_err)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::BuildDict(a) => build_dict(a),
        Command::FilterOov(a) => filter(a),
        Command::CompDegree(a) => comp_degree(a),
        Command::SelectPool(a) => select_pool(a),
        Command::UncertaintyScore(a) => uncertainty_score(a),
        Command::SampleTestset(a) => sample_testset(a),
        Command::AnalyzeNovelty(a) => analyze_novelty(a),
        Command::Simulate(a) => simulate(a),
        Command::InitWeights(a) => init_weights(a),
        Command::RunPipeline(a) => pipeline(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_failed(e: io::Error) -> CliError {
    data_err(format!("write failed: {e}"))
}

fn load(path: &Path, format: Option<CorpusFormat>) -> Result<Vec<ParallelExample>> {
    if !path.is_file() {
        return Err(config_err(format!("{}: no such file", path.display())));
    }
    let format = format.unwrap_or_else(|| CorpusFormat::from_path(path));
    load_parallel_corpus(path, format).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn load_dict(path: &Path) -> Result<NGramDictionary> {
    NGramDictionary::read_from(open(path)?).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn build_dict(a: BuildDictArgs) -> Result<()> {
    let train = load(&a.train, a.corpus.format)?;
    let side: Vec<&[String]> = train.iter().map(|ex| ex.tokens(a.corpus.side)).collect();
    let max_n = (a.max_n > 0).then_some(a.max_n);
    let dict = build_ngram_dictionary(&side, a.min_count, max_n);
    let mut w = create(&a.out)?;
    dict.write_to(&mut w).and_then(|()| w.flush()).map_err(write_failed)?;
    log::info!("{} entries over {} token types", dict.len(), dict.vocab_size());
    Ok(())
}

fn filter(a: FilterOovArgs) -> Result<()> {
    let train = load(&a.train, a.corpus.format)?;
    let pool = load(&a.pool, a.corpus.format)?;
    let counts = build_vocab_counts(&train, a.corpus.side);
    if let Some(path) = &a.counts_out {
        let mut w = create(path)?;
        counts.write_snapshot(&mut w).and_then(|()| w.flush()).map_err(write_failed)?;
    }
    let kept = filter_oov(&pool, &counts, a.min_count);
    log::info!("kept {} of {} candidates", kept.len(), pool.len());
    let mut w = create(&a.out)?;
    write_jsonl(&mut w, &kept).and_then(|()| w.flush()).map_err(write_failed)
}

fn comp_degree(a: CompDegreeArgs) -> Result<()> {
    let dict = load_dict(&a.dict)?;
    let examples = load(&a.input, a.corpus.format)?;
    let degrees = compdegree::score_examples(&examples, &dict, a.corpus.side)
        .map_err(|(i, e)| data_err(format!("example {:?}: {e}", examples[i].id)))?;
    let mut w = output(a.out.as_deref())?;
    write_score_dump(&mut w, &examples, &degrees)
        .and_then(|()| w.flush())
        .map_err(write_failed)
}

fn select_pool(a: SelectPoolArgs) -> Result<()> {
    let examples = load(&a.input, a.corpus.format)?;
    let scores = read_score_dump(open(&a.scores)?).map_err(|e| data_err(format!("{}: {e}", a.scores.display())))?;
    let by_id: std::collections::HashMap<_, _> = scores.into_iter().collect();
    let scored = examples
        .into_iter()
        .map(|ex| match by_id.get(&ex.id) {
            Some(&d) => Ok((ex, d)),
            None => Err(data_err(format!("no degree score for example {:?}", ex.id))),
        })
        .collect::<Result<Vec<_>>>()?;
    let selection = compdegree::select_candidate_pool(scored, a.k, a.corpus.side);
    if selection.underfilled {
        log::warn!("k = {} exceeds the {} distinct candidates", a.k, selection.examples.len());
    }
    let mut w = create(&a.out)?;
    write_jsonl(&mut w, &selection.examples)
        .and_then(|()| w.flush())
        .map_err(write_failed)
}

fn uncertainty_score(a: UncertaintyArgs) -> Result<()> {
    let dump = read_ensemble_dump(open(&a.dump)?).map_err(|e| data_err(format!("{}: {e}", a.dump.display())))?;
    let mut w = output(a.out.as_deref())?;
    for entry in &dump {
        let score = token_uncertainties(entry).map_err(data_err)?;
        serde_json::to_writer(&mut w, &score).map_err(data_err)?;
        w.write_all(b"\n").map_err(write_failed)?;
    }
    w.flush().map_err(write_failed)
}

fn sample_testset(a: SampleArgs) -> Result<()> {
    let params = BandParams {
        discard_top: a.discard_top,
        window: a.window,
        sample: a.sample,
    };
    if params.sample > params.window {
        return Err(config_err(format!("sample {} exceeds window {}", a.sample, a.window)));
    }
    let examples = load(&a.input, a.format)?;
    let mut scores = std::collections::HashMap::new();
    for (i, line) in open(&a.scores)?.lines().enumerate() {
        let line = line.map_err(data_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let s: UncertaintyScore = serde_json::from_str(&line)
            .map_err(|e| data_err(format!("{} line {}: {e}", a.scores.display(), i + 1)))?;
        scores.insert(s.example_id, s.sequence_score);
    }
    let scored = examples
        .into_iter()
        .map(|ex| match scores.get(&ex.id) {
            Some(&s) => Ok((ex, s)),
            None => Err(data_err(format!("no uncertainty score for example {:?}", ex.id))),
        })
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_by_uncertainty(scored, |ex| &ex.id);
    let picked = band_select(&ranked, params, a.seed).map_err(data_err)?;
    let mut w = create(&a.out)?;
    write_jsonl(&mut w, &picked).and_then(|()| w.flush()).map_err(write_failed)
}

fn analyze_novelty(a: NoveltyArgs) -> Result<()> {
    let side = a.corpus.side;
    let train = load(&a.train, a.corpus.format)?;
    let test = load(&a.test, a.corpus.format)?;
    let train_side: Vec<Vec<String>> = train.iter().map(|ex| ex.tokens(side).to_vec()).collect();
    let test_side: Vec<Vec<String>> = test.iter().map(|ex| ex.tokens(side).to_vec()).collect();
    let tagged = |p: &Path| read_tagged(open(p)?).map_err(|e| data_err(format!("{}: {e}", p.display())));
    let tagged_train = tagged(&a.tagged_train)?;
    let tagged_test = tagged(&a.tagged_test)?;
    let dict = build_ngram_dictionary(&train_side, a.min_count, (a.max_n > 0).then_some(a.max_n));
    let report = benchmark_report(&train_side, &test_side, &tagged_train, &tagged_test, &dict, a.tagset.as_deref())
        .map_err(data_err)?;
    let mut w = output(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(data_err)?;
    w.write_all(b"\n").and_then(|()| w.flush()).map_err(write_failed)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let weights = Weights::read_from(open(&a.weights)?).map_err(|e| data_err(format!("{}: {e}", a.weights.display())))?;
    let mut cfg = weights.config.clone();
    cfg.variant = a.variant;
    cfg.interval = a.interval;
    cfg.fuse_target = !a.no_fuse;
    let engine = Engine::new(&cfg, &weights).map_err(config_err)?;

    let mut inputs = Vec::new();
    for (i, line) in open(&a.input)?.lines().enumerate() {
        let line = line.map_err(data_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| data_err(format!("{} line {}: {e}", a.input.display(), i + 1)))?;
        inputs.push(ids);
    }

    let mut trace = a.trace.as_deref().map(create).transpose()?;
    let mut out = output(a.out.as_deref())?;
    for (index, x) in inputs.iter().enumerate() {
        let outcome = engine
            .run(x, DecodeMode::Greedy { max_len: a.max_len })
            .map_err(|e| data_err(format!("input {index}: {e}")))?;
        if let Some(t) = trace.as_mut() {
            for step in &outcome.trace {
                let mut record = serde_json::to_value(step).map_err(data_err)?;
                record["input"] = index.into();
                serde_json::to_writer(&mut *t, &record).map_err(data_err)?;
                t.write_all(b"\n").map_err(write_failed)?;
            }
        }
        let line: Vec<String> = outcome.tokens.iter().map(u32::to_string).collect();
        writeln!(out, "{}", line.join(" ")).map_err(write_failed)?;
    }
    if let Some(t) = trace.as_mut() {
        t.flush().map_err(write_failed)?;
    }
    out.flush().map_err(write_failed)
}

fn init_weights(a: InitWeightsArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => serde_json::from_reader::<_, ModelConfig>(open(p)?)
            .map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => ModelConfig::toy(Variant::RdangleSep, Interval::Every(1)),
    };
    let weights = Weights::init(&cfg, a.seed).map_err(config_err)?;
    let mut w = create(&a.out)?;
    weights.write_to(&mut w).map_err(data_err)?;
    w.flush().map_err(write_failed)?;
    log::info!("{} parameters", weights.parameter_count());
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config).map_err(config_err)?;
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.side {
        cfg.side = s;
    }
    let t = &mut cfg.thresholds;
    for (flag, slot) in [
        (a.pool_k, &mut t.pool_k),
        (a.discard_top, &mut t.discard_top),
        (a.window, &mut t.window),
        (a.sample, &mut t.sample),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    let manifest = run_pipeline(&cfg).map_err(|e| match e.kind {
        ErrorKind::Config => config_err(e),
        ErrorKind::Data => data_err(e),
    })?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    for s in &manifest.stage_counts {
        println!("{}\t{}", s.stage, s.count);
    }
    Ok(())
}
