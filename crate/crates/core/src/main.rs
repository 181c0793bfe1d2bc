use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jointgram::synth::{
    default_grammars, generate_corpus, read_dataset, write_dataset, CorpusMeta, PairedInstance,
    SynthConfig, Vocabulary, TAGS,
};
use jointgram::train::{
    evaluate, gradcheck_suite, parse_instances, score_pair, Checkpoint, EvalOptions, TrainConfig,
    TrainError, Trainer,
};

#[derive(Parser)]
#[command(name = "jointgram", version, about = "Joint language and vision grammar induction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic paired corpus.
    Generate(GenerateArgs),
    /// Train a joint model.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write report files.
    Eval(EvalArgs),
    /// Print bracketed trees for both modalities.
    Parse(ParseArgs),
    /// Score one caption against one part set.
    Retrieve(RetrieveArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct GenerateArgs {
    /// Synthetic data settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 800)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    /// Categories left out of the training split.
    #[arg(long, value_delimiter = ',')]
    holdout_categories: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Stop after this many global steps (a checkpoint is still written).
    #[arg(long)]
    max_steps: Option<u64>,
    /// Evaluate on the test split at the configured cadence.
    #[arg(long)]
    eval: bool,
    #[arg(long, value_delimiter = ',')]
    holdout_categories: Option<Vec<String>>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_delimiter = ',')]
    holdout_categories: Option<Vec<String>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 10)]
    limit: usize,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Index of the caption.
    #[arg(long)]
    text: usize,
    /// Index of the part set.
    #[arg(long)]
    image: usize,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn read_split(dir: &Path, split: &str) -> CliResult<Vec<PairedInstance>> {
    let path = dir.join(format!("{split}.jsonl"));
    read_dataset(&path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_meta(dir: &Path) -> CliResult<Option<CorpusMeta>> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

fn holdout(flag: Option<Vec<String>>, data: &Path) -> CliResult<Vec<String>> {
    match flag {
        Some(h) => Ok(h),
        None => Ok(read_meta(data)?.map(|m| m.holdout).unwrap_or_default()),
    }
}

fn generate(a: GenerateArgs) -> CliResult<()> {
    let synth: SynthConfig = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    let grammars = default_grammars();
    let corpus = generate_corpus(&grammars, &synth, a.train, a.test, a.seed, &a.holdout_categories)?;
    fs::create_dir_all(&a.out_dir)?;
    write_dataset(&a.out_dir.join("train.jsonl"), &corpus.train)?;
    write_dataset(&a.out_dir.join("test.jsonl"), &corpus.test)?;
    let mut counts = BTreeMap::new();
    counts.insert("train".to_string(), corpus.train.len());
    counts.insert("test".to_string(), corpus.test.len());
    counts.insert("depth_rejections".to_string(), corpus.depth_rejections);
    let meta = CorpusMeta {
        vocabulary: Vocabulary::default().words,
        tags: TAGS.iter().map(|t| t.to_string()).collect(),
        categories: grammars.iter().map(|g| g.category.clone()).collect(),
        holdout: a.holdout_categories,
        seed: a.seed,
        synth,
        counts,
    };
    fs::write(a.out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    println!(
        "wrote {} train / {} test instances to {}",
        corpus.train.len(),
        corpus.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let train = read_split(&a.data, "train")?;
    let vocab = Vocabulary::default().len();
    let mut trainer = match &a.checkpoint {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?)?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            Trainer::new(cfg, vocab, &train)?
        }
    };
    let test;
    let opts;
    let eval = if a.eval {
        test = read_split(&a.data, "test")?;
        opts = EvalOptions {
            holdout: holdout(a.holdout_categories.clone(), &a.data)?,
            retrieval: true,
            retrieval_seed: trainer.config.seed,
        };
        Some((test.as_slice(), &opts))
    } else {
        None
    };
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("config.toml"), trainer.config.to_toml())?;
    match trainer.run(&train, eval, Some(&a.out_dir), a.max_steps) {
        Err(TrainError::NonFinite { epoch, step, ids }) => {
            return Err(format!(
                "non-finite loss at epoch {epoch}, step {step} on {ids:?}; snapshot in {}",
                a.out_dir.join("nan_snapshot.ckpt").display()
            )
            .into())
        }
        other => other?,
    }
    if let Some(e) = trainer.epochs.last() {
        println!(
            "epoch {} total {:.4} (lang {:.4}, vis {:.4}, contrastive {:.4})",
            e.epoch, e.total, e.lang, e.vis, e.contrastive
        );
    }
    println!("checkpoint: {}", a.out_dir.join("checkpoint.ckpt").display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let data = read_split(&a.data, &a.split)?;
    let opts = EvalOptions {
        holdout: holdout(a.holdout_categories, &a.data)?,
        retrieval: true,
        retrieval_seed: a.seed,
    };
    let report = evaluate(&trainer.model, &trainer.config, &data, &opts)?;
    fs::create_dir_all(&a.out_dir)?;
    let text = report.to_text();
    fs::write(a.out_dir.join("eval_report.txt"), &text)?;
    fs::write(
        a.out_dir.join("eval_metrics.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    print!("{text}");
    Ok(())
}

fn parse(a: ParseArgs) -> CliResult<()> {
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let data = read_split(&a.data, &a.split)?;
    let data = &data[..a.limit.min(data.len())];
    let parsed = parse_instances(&trainer.model, &trainer.config, data, false)?;
    let vocab = Vocabulary::default();
    for (p, inst) in parsed.iter().zip(data) {
        let words = vocab.render(&inst.tokens);
        let parts: Vec<String> = p.part_tags.iter().map(|t| format!("T{t}")).collect();
        println!("{}", inst.id);
        println!("  text:  {}", p.lang_tree.to_sexpr(&words));
        println!("  parts: {}", p.vis_tree.to_sexpr(&parts));
    }
    Ok(())
}

fn retrieve(a: RetrieveArgs) -> CliResult<()> {
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let data = read_split(&a.data, &a.split)?;
    let get = |i: usize| {
        data.get(i)
            .cloned()
            .ok_or_else(|| format!("index {i} out of range (split has {})", data.len()))
    };
    let (w, v) = (get(a.text)?, get(a.image)?);
    let cfg = &trainer.config;
    let pw = parse_instances(&trainer.model, cfg, std::slice::from_ref(&w), true)?;
    let pv = parse_instances(&trainer.model, cfg, std::slice::from_ref(&v), true)?;
    let words = Vocabulary::default().render(&w.tokens).join(" ");
    println!("text  {}: {words}", w.id);
    println!("parts {}: {} parts", v.id, v.parts.len());
    println!("score = {:.6}", score_pair(cfg, &pw[0], &pv[0]));
    Ok(())
}

fn gradcheck(seed: u64) -> CliResult<bool> {
    let mut ok = true;
    for e in gradcheck_suite(seed)? {
        let pass = e.passes();
        ok &= pass;
        println!(
            "{:<20} max_rel_error {:.3e} (tol {:.0e}, {} coords) {}",
            e.name,
            e.report.max_rel_error,
            e.tolerance,
            e.report.checked,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Parse(a) => parse(a).map(|_| true),
        Command::Retrieve(a) => retrieve(a).map(|_| true),
        Command::Gradcheck { seed } => gradcheck(seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
