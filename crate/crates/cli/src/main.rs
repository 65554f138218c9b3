use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cantus_core::eval::{eval_pairs, evaluate_task, plot_mel_f0, EvalReport, Generator};
use cantus_core::score::disk::{load_mel, read_corpus, write_corpus, MANIFEST};
use cantus_core::score::{gen_corpus, parse_score, CorpusSample, LabelToken, Language};
use cantus_core::synth::{synthesize, Prompt, SynthOptions, TaskKind};
use cantus_core::train::gradcheck::suite;
use cantus_core::train::svs_stage::SvsModel;
use cantus_core::train::{save_archive, CodecCheckpoint, CodecTrainer, LossReport, SvsCheckpoint, SvsTrainer};
use cantus_core::{rng, Config, Error, Result};

/// Singing-voice synthesis with prompt-conditioned flow matching.
#[derive(Parser)]
#[command(name = "cantus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the codec or the SVS model.
    Train(TrainArgs),
    /// Synthesize a score from a prompt.
    Synth(SynthArgs),
    /// Score a checkpoint on held-out pairs.
    Eval(EvalArgs),
    /// Finite-difference check of every loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Codec,
    Svs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    codec_ckpt: Option<PathBuf>,
    /// Overrides `train.codec_steps` or `train.svs_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    score: PathBuf,
    /// Archive holding a `mel` tensor.
    #[arg(long, group = "prompt")]
    prompt_audio: Option<PathBuf>,
    /// Whitespace-separated label tokens.
    #[arg(long, group = "prompt")]
    prompt_text: Option<String>,
    /// Language of the audio prompt (needed by cross_lingual).
    #[arg(long)]
    prompt_lang: Option<String>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 3.0)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write `plot.png`.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// A task name or `all`.
    #[arg(long, default_value = "all")]
    task: String,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 40)]
    pairs: usize,
    /// Defaults to `train.heldout` of the checkpoint.
    #[arg(long)]
    heldout: Option<usize>,
    /// Score oracle renderings instead of model output.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 3.0)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[group(id = "source", required = true, args = ["ckpt", "random"])]
struct GradcheckArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Check a freshly initialized model instead.
    #[arg(long)]
    random: bool,
    /// Model configuration for `--random`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 20)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const REQUIRED_CORPUS_KEYS: [&str; 2] = ["corpus.n_singers", "corpus.n_scores"];

/// Config file (or defaults) with `TCS2_` overrides applied; returns the
/// keys set by either.
fn load_config(path: Option<&Path>) -> Result<(Config, BTreeSet<String>)> {
    let (mut cfg, mut present) = match path {
        Some(p) => Config::load(p)?,
        None => (Config::default(), BTreeSet::new()),
    };
    present.extend(cfg.apply_env(std::env::vars())?);
    Ok((cfg, present))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn gen_corpus_cmd(a: GenCorpusArgs) -> Result<()> {
    let (cfg, present) = load_config(Some(&a.config))?;
    Config::require(&present, &REQUIRED_CORPUS_KEYS)?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let corpus = gen_corpus(&cfg.corpus, seed)?;
    let m = write_corpus(&corpus, seed, &a.out)?;
    println!(
        "samples={} files={} manifest={}",
        m.samples.len(),
        m.files.len(),
        a.out.join(MANIFEST).display()
    );
    Ok(())
}

fn training_split(samples: &[CorpusSample], heldout: usize) -> Result<&[CorpusSample]> {
    if heldout >= samples.len() {
        return Err(Error::Validation(format!(
            "train.heldout = {heldout} leaves no training samples out of {}",
            samples.len()
        )));
    }
    Ok(&samples[..samples.len() - heldout])
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let codec_ckpt = match (a.stage, &a.codec_ckpt) {
        (StageArg::Svs, None) => {
            return Err(Error::Validation("--stage svs requires --codec-ckpt".into()));
        }
        (StageArg::Svs, Some(p)) => Some(CodecCheckpoint::load(p)?),
        (StageArg::Codec, _) => None,
    };
    let corpus = read_corpus(&a.corpus)?;
    let train = training_split(&corpus.samples, cfg.train.heldout)?;
    let mut log = |r: &LossReport| println!("{r}");
    match codec_ckpt {
        None => {
            if let Some(s) = a.steps {
                cfg.train.codec_steps = s;
            }
            let mut t = CodecTrainer::new(&cfg);
            t.run(train, cfg.train.codec_steps, &mut log)?;
            t.finish(train)?.save(&a.out)?;
        }
        Some(codec) => {
            if let Some(s) = a.steps {
                cfg.train.svs_steps = s;
            }
            cfg.codec = codec.cfg.codec.clone();
            let mut t = SvsTrainer::new(&cfg, codec, train)?;
            t.run(cfg.train.svs_steps, &mut log)?;
            t.finish().save(&a.out)?;
        }
    }
    println!("checkpoint={}", a.out.display());
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let task: TaskKind = a.task.parse()?;
    let language = a.prompt_lang.as_deref().map(str::parse::<Language>).transpose()?;
    let prompt = match (&a.prompt_audio, &a.prompt_text) {
        (Some(p), None) => Prompt::Audio {
            mel: load_mel(p)?,
            language,
        },
        (None, Some(t)) => Prompt::Text(LabelToken::parse_list(t)?),
        _ => return Err(Error::Validation("give one of --prompt-audio or --prompt-text".into())),
    };
    let score = parse_score(&read_text(&a.score)?)?;
    task.validate(&prompt, score.language())?;
    let ck = SvsCheckpoint::load(&a.ckpt)?;
    let opts = SynthOptions {
        steps: a.steps,
        cfg_scale: a.cfg_scale,
        seed: a.seed,
    };
    let out = synthesize(&ck, task, &score, &prompt, &opts)?;
    create_dir(&a.out)?;
    save_archive(&a.out.join("mel.tca"), &out.mel_archive()?)?;
    save_archive(&a.out.join("f0.tca"), &out.f0_archive()?)?;
    if a.plot {
        plot_mel_f0(&out.mel, &out.f0_mel_rate(), &a.out.join("plot.png"))?;
    }
    println!("frames={} out={}", out.mel.frames(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let tasks = if a.task == "all" {
        TaskKind::ALL.to_vec()
    } else {
        vec![a.task.parse()?]
    };
    let ck = SvsCheckpoint::load(&a.ckpt)?;
    let corpus = read_corpus(&a.corpus)?;
    let heldout = a.heldout.unwrap_or(ck.cfg.train.heldout);
    let opts = SynthOptions {
        steps: a.steps,
        cfg_scale: a.cfg_scale,
        seed: a.seed,
    };
    let generator = if a.oracle {
        Generator::Oracle
    } else {
        Generator::Model(&ck, opts)
    };
    let mut report = EvalReport::default();
    for task in tasks {
        let pairs = eval_pairs(&corpus, task, heldout, a.pairs, a.seed)?;
        let m = evaluate_task(&ck, &corpus, task, &pairs, generator, a.seed)?;
        println!(
            "task={task} ffe={:.6} cos={:.6} timbre_match_rate={:.6} pairs={}",
            m.ffe, m.cos, m.timbre_match_rate, m.pairs
        );
        report.tasks.insert(task.name().to_string(), m);
    }
    write_file(&a.report, &report.to_toml())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let (cfg, model, store) = match &a.ckpt {
        Some(p) => {
            let ck = SvsCheckpoint::load(p)?;
            (ck.cfg, ck.model, ck.store)
        }
        None => {
            let (cfg, _) = load_config(a.config.as_deref())?;
            let mut store = Default::default();
            let model = SvsModel::new(&mut store, &cfg, &mut rng::rng(a.seed, rng::stream::SVS_INIT));
            (cfg, model, store)
        }
    };
    let entries = suite(&cfg, &model, &store, a.probes, a.seed)?;
    let mut text = String::from("[gradcheck]\n");
    let mut worst = 0.0f64;
    for e in &entries {
        println!("loss={} max_rel_error={:.3e}", e.loss, e.max_rel_error);
        text.push_str(&format!("{} = {:e}\n", e.loss, e.max_rel_error));
        worst = worst.max(e.max_rel_error);
    }
    let pass = worst < GRADCHECK_TOLERANCE;
    text.push_str(&format!("tolerance = {GRADCHECK_TOLERANCE:e}\npass = {pass}\n"));
    println!("pass={pass}");
    write_file(&a.report, &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
