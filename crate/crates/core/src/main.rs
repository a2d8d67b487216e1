use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bat_core::adversarial::{perturb_batch, AdvConfig};
use bat_core::data::{load_xml, parse_auto, write_records, Record};
use bat_core::experiment::config::read_kv_file;
use bat_core::experiment::dataset::{examples_for, resolve_dataset, vocab_from_sentences};
use bat_core::experiment::plot::emit_plots;
use bat_core::experiment::results::read_csv;
use bat_core::experiment::{
    evaluate, load_examples, prepare_data, sweep, train_all, DataSource, Examples,
    SweepGrid, TrainConfig, DATA_DIR_ENV,
};
use bat_core::model::Model;
use bat_core::tokenizer::{build_vocab, Vocab};
use bat_core::Task;

/// Adversarial training workbench for aspect extraction and aspect
/// sentiment classification.
#[derive(Parser)]
#[command(name = "bat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a WordPiece vocabulary from XML or plain-text files.
    BuildVocab(BuildVocabArgs),
    /// Turn SemEval XML into record files plus a vocabulary.
    Prepare(RunArgs),
    /// Train one configuration over its seeds.
    Train(RunArgs),
    /// Score a saved checkpoint on a test file.
    Eval(EvalArgs),
    /// Sweep epochs, dropout and epsilon.
    Sweep(SweepArgs),
    /// Draw charts from a results CSV.
    Plot(PlotArgs),
    /// Print the input gradient and perturbation for one batch.
    AttackDemo(AttackArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    /// SemEval XML or text files, one sentence per line.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    size: usize,
    /// Keep case instead of lowercasing.
    #[arg(long)]
    cased: bool,
    #[arg(long, short, default_value = "vocab.txt")]
    out: PathBuf,
}

/// Run settings. Flags override values read from `--config`.
#[derive(Args, Default)]
struct RunArgs {
    /// `key=value` file with run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    /// Dataset label; `laptop`, `rest14` and `rest16` load the official
    /// files from the data directory.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_file: Option<PathBuf>,
    #[arg(long)]
    test_file: Option<PathBuf>,
    /// Vocabulary for record-file input.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Turn the adversarial term off whatever epsilon is.
    #[arg(long)]
    no_adversarial: bool,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    validation_size: Option<usize>,
    #[arg(long)]
    synthetic_train: Option<usize>,
    #[arg(long)]
    synthetic_test: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    cased: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Inclusive epoch range, e.g. `3-10`.
    #[arg(long)]
    epoch_range: Option<String>,
    #[arg(long)]
    dropouts: Option<String>,
    #[arg(long)]
    epsilons: Option<String>,
    /// Epoch count used for the comparison table.
    #[arg(long)]
    table_epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// SemEval XML or record file.
    #[arg(long)]
    test_file: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// CSV written by `train` or `sweep`.
    results: PathBuf,
    /// Dropout whose epsilon lines are drawn.
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use trained weights instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Values of g and r_adv shown per token row.
    #[arg(long, default_value_t = 4)]
    show: usize,
}

impl RunArgs {
    fn flag_settings(&self) -> Vec<(&'static str, String)> {
        let mut kv: Vec<(&'static str, String)> = Vec::new();
        macro_rules! put {
            ($($key:literal => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    kv.push(($key, v.to_string()));
                })*
            };
        }
        put!(
            "task" => task, "dataset" => dataset, "lr" => lr, "batch-size" => batch_size,
            "epochs" => epochs, "dropout" => dropout, "epsilon" => epsilon, "seeds" => seeds,
            "hidden" => hidden, "layers" => layers, "heads" => heads, "ff" => ff,
            "max-len" => max_len, "vocab-size" => vocab_size, "validation-size" => validation_size,
            "synthetic-train" => synthetic_train, "synthetic-test" => synthetic_test,
            "data-seed" => data_seed,
        );
        for (key, path) in [
            ("train-file", &self.train_file),
            ("test-file", &self.test_file),
            ("vocab", &self.vocab),
            ("out", &self.out),
        ] {
            if let Some(p) = path {
                kv.push((key, p.display().to_string()));
            }
        }
        if self.no_adversarial {
            kv.push(("adversarial", "false".into()));
        }
        if self.cased {
            kv.push(("lowercase", "false".into()));
        }
        kv
    }
}

/// Builds the run config from the file and then the flags. Keys that only
/// the sweep understands go to `grid`.
fn build_config(args: &RunArgs, mut grid: Option<&mut SweepGrid>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::new(Task::Ae);
    let mut data_dir = args.data_dir.clone();
    let mut settings: Vec<(String, String)> = Vec::new();
    if let Some(path) = &args.config {
        settings.extend(read_kv_file(path).with_context(|| format!("reading {}", path.display()))?);
    }
    settings.extend(args.flag_settings().into_iter().map(|(k, v)| (k.to_string(), v)));
    for (key, value) in &settings {
        if key.replace('_', "-") == "data-dir" {
            if args.data_dir.is_none() {
                data_dir = Some(PathBuf::from(value));
            }
            continue;
        }
        let mut known = cfg.set(key, value)?;
        if let Some(g) = grid.as_deref_mut() {
            known |= g.set(key, value)?;
        }
        if !known {
            bail!("unknown setting {key:?}");
        }
    }
    resolve_dataset(&mut cfg, data_dir.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn cmd_build_vocab(args: &BuildVocabArgs) -> Result<()> {
    let mut corpus = Vec::new();
    for path in &args.inputs {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if text.trim_start().starts_with('<') {
            corpus.extend(parse_auto(&text)?.into_iter().map(|s| s.text));
        } else {
            corpus.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
        }
    }
    let vocab = build_vocab(&corpus, args.size, !args.cased)?;
    vocab.save(&args.out)?;
    println!("{} tokens from {} sentences -> {}", vocab.len(), corpus.len(), args.out.display());
    Ok(())
}

fn cmd_prepare(args: &RunArgs) -> Result<()> {
    let cfg = build_config(args, None)?;
    let DataSource::Xml { train, test } = &cfg.data else {
        bail!("prepare needs XML input: --train-file/--test-file or an official --dataset");
    };
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("prepared"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let tr = load_xml(train)?;
    let te = load_xml(test)?;
    let vocab = vocab_from_sentences(&tr, cfg.vocab_size, cfg.lowercase)?;
    vocab.save(&out.join("vocab.txt"))?;
    for (name, sentences) in [("train", &tr), ("test", &te)] {
        let records: Vec<Record> = match examples_for(cfg.task, sentences, &vocab, cfg.max_len)? {
            Examples::Ae(v) => v.into_iter().map(Record::Ae).collect(),
            Examples::Asc(v) => v.into_iter().map(Record::Asc).collect(),
        };
        let path = out.join(format!("{}-{name}.jsonl", cfg.task));
        write_records(&path, &records)?;
        println!("{name}: {} sentences, {} examples -> {}", sentences.len(), records.len(), path.display());
    }
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let mut cfg = build_config(args, None)?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("out/train"));
    }
    let data = prepare_data(&cfg)?;
    let (runs, _) = train_all(&cfg, &data)?;
    for run in &runs {
        println!("seed {} final epoch:", run.seed);
        print!("{}", run.final_test().text_block());
        println!("seed {} best validation epoch {}:", run.seed, run.best_epoch);
        print!("{}", run.best_val_test().text_block());
    }
    println!("results in {}", cfg.out_dir.unwrap().display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = Model::<f32>::load(&args.checkpoint)?;
    let vocab = Vocab::load(&args.vocab, model.config.lowercase)?;
    if vocab.len() != model.config.vocab_size {
        bail!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            model.config.vocab_size
        );
    }
    let examples = load_examples(model.config.task, &args.test_file, &vocab, model.config.max_len)?;
    let (report, loss) = evaluate(&model, &examples, args.batch_size)?;
    print!("{}", report.text_block());
    println!("loss      {loss:.6}");
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut grid = SweepGrid::default();
    let mut cfg = build_config(&args.run, Some(&mut grid))?;
    for (key, value) in [
        ("epoch-range", &args.epoch_range),
        ("dropouts", &args.dropouts),
        ("epsilons", &args.epsilons),
        ("table-epochs", &args.table_epochs.map(|v| v.to_string())),
    ] {
        if let Some(v) = value {
            grid.set(key, v)?;
        }
    }
    let out = cfg.out_dir.take().unwrap_or_else(|| PathBuf::from("out/sweep"));
    let data = prepare_data(&cfg)?;
    eprintln!(
        "{} cells x {} seeds on {} {}",
        grid.cell_count(),
        grid.seeds.len(),
        cfg.dataset,
        cfg.task
    );
    let result = sweep(&grid, &cfg, &data)?;
    result.write(&cfg, &out)?;
    print!("{}", result.table(&cfg, bat_core::experiment::results::SPLIT_TEST).render());
    for f in &result.failures {
        eprintln!("failed {}: {}", f.run_id, f.message);
    }
    println!("results in {}", out.display());
    if !result.failures.is_empty() {
        bail!("{} sweep jobs failed", result.failures.len());
    }
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let rows = read_csv(&args.results)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (name, svg) in emit_plots(&rows, args.dropout)? {
        let path = args.out.join(name);
        write_file(&path, &svg)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_attack_demo(args: &AttackArgs) -> Result<()> {
    let mut cfg = build_config(&args.run, None)?;
    if args.run.epsilon.is_none() && cfg.epsilon == 0.0 {
        cfg.epsilon = 1.0;
    }
    if args.run.batch_size.is_none() {
        cfg.batch_size = 4;
    }
    let data = prepare_data(&cfg)?;
    let model = match &args.checkpoint {
        Some(p) => Model::<f32>::load(p)?,
        None => Model::<f32>::new(cfg.model_config(data.vocab.len()), cfg.seeds[0])?,
    };
    if model.config.task != cfg.task {
        bail!("checkpoint is a {} model but the task is {}", model.config.task, cfg.task);
    }
    let n = cfg.batch_size.min(data.test.len());
    let idx: Vec<usize> = (0..n).collect();
    let batch = data.test.batch(&idx)?;
    let adv = AdvConfig::new(cfg.task, cfg.epsilon)?;
    let (g, p) = perturb_batch(&model, &batch, &adv)?;
    let d = model.config.hidden;
    let (gd, rd) = (g.to_f64_vec(), p.r_adv.to_f64_vec());
    println!("task {} epsilon {} batch {}x{} hidden {d}", cfg.task, cfg.epsilon, batch.size, batch.seq);
    for b in 0..batch.size {
        let rows = b * batch.seq..(b + 1) * batch.seq;
        let r_norm = rows
            .clone()
            .flat_map(|i| rd[i * d..(i + 1) * d].iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let kept = rows.clone().filter(|&i| !p.excluded[i]).count();
        println!(
            "example {b}: |g| = {:.6e}  |r_adv| = {r_norm:.6}  perturbed rows {kept}{}",
            p.norms[b],
            if p.degenerate[b] { "  (degenerate, skipped)" } else { "" }
        );
        for i in rows {
            let k = args.show.min(d);
            let fmt = |v: &[f64]| v[..k].iter().map(|x| format!("{x:+.4e}")).collect::<Vec<_>>().join(" ");
            let tag = if p.excluded[i] { "excluded" } else { "" };
            println!(
                "  row {:>2} {:?} g [{}]  r [{}] {tag}",
                i - b * batch.seq,
                batch.kinds[i],
                fmt(&gd[i * d..(i + 1) * d]),
                fmt(&rd[i * d..(i + 1) * d])
            );
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plot(a) => cmd_plot(a),
        Command::AttackDemo(a) => cmd_attack_demo(a),
    }
}
