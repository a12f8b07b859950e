mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use keyprompt::checkpoint::{self, Checkpoint};
use keyprompt::eval::{self, Condition};
use keyprompt::model::Model;
use keyprompt::promptgen::{self, KeywordSet};
use keyprompt::synth::{self, Corpus, Dataset};
use keyprompt::train::{self, Mode, TrainOutcome};
use keyprompt::text::Vocab;

use crate::config::{parse_config, ConfigError, RunConfig};
use crate::run::RunDir;

/// Keyword-prompted speech recognition: synthetic data, training, evaluation.
///
/// Every setting lives in a flat TOML config (`--config`); `--set key=value`
/// and the dedicated flags override it. Unknown keys are rejected. Each run
/// directory receives `config.resolved` and `provenance.json`.
#[derive(Parser, Debug)]
#[command(name = "keyprompt", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set noise_sigma=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set prefix_len=N`.
    #[arg(long, global = true)]
    prefix_len: Option<usize>,
    /// Shorthand for the step count of the subcommand's training mode.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/dev/test corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train encoder and decoder on transcription.
    TrainAsr(TrainArgs),
    /// Train the keyword-spotting head on a base checkpoint.
    TrainKws(TrainArgs),
    /// Fine-tune the decoder with keyword prompts.
    Finetune(TrainArgs),
    /// Learn a soft prompt prefix with every model weight frozen.
    PromptTune(TrainArgs),
    /// Score conditions (baseline, baseline+prompt, ft, pt, ft-oracle, pt-oracle).
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Base recognizer, for baseline conditions.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Keyword spotter.
        #[arg(long)]
        kws: Option<PathBuf>,
        #[arg(long)]
        ft: Option<PathBuf>,
        #[arg(long)]
        pt: Option<PathBuf>,
        /// Comma-separated subset of conditions; overrides `conditions`.
        #[arg(long)]
        conditions: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prompt-tune and evaluate once per prefix length.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Spotter checkpoint the prefixes are trained on.
        #[arg(long)]
        kws: PathBuf,
        /// Comma-separated lengths; overrides `ablation_lengths`.
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write decoder attention from outputs to oracle prompts as matrices.
    AttnExport {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transcribe one WAV file or one dataset item, optionally with keywords.
    Transcribe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Vocabulary file; defaults to `vocab.txt` beside a `.kpd` input.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// A `.wav` file or a `.kpd` dataset.
        #[arg(long)]
        input: PathBuf,
        /// Item of a `.kpd` input.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated keyword candidates.
        #[arg(long)]
        keywords: Option<String>,
        /// Spotter that filters the keywords; without it all are prompted.
        #[arg(long)]
        kws: Option<PathBuf>,
        /// Optional run directory for the transcript and provenance.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus directory from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to continue from (required except for train-asr).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainAsr(_) => "train-asr",
            Command::TrainKws(_) => "train-kws",
            Command::Finetune(_) => "finetune",
            Command::PromptTune(_) => "prompt-tune",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::AttnExport { .. } => "attn-export",
            Command::Transcribe { .. } => "transcribe",
        }
    }

    fn mode(&self) -> Option<Mode> {
        match self {
            Command::TrainAsr(_) => Some(Mode::BaseAsr),
            Command::TrainKws(_) => Some(Mode::Kws),
            Command::Finetune(_) => Some(Mode::Ft),
            Command::PromptTune(_) | Command::Ablate { .. } => Some(Mode::Pt),
            _ => None,
        }
    }
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &cli.global.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!(ConfigError {
                class: "config-syntax",
                message: format!("--set expects KEY=VALUE, got `{kv}`"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = cli.global.seed {
        out.push(("seed".into(), s.to_string()));
    }
    if let Some(n) = cli.global.prefix_len {
        out.push(("prefix_len".into(), n.to_string()));
    }
    if let Some(n) = cli.global.steps {
        let key = match cli.command.mode() {
            Some(Mode::BaseAsr) => "asr_steps",
            Some(Mode::Kws) => "kws_steps",
            Some(Mode::Ft) => "ft_steps",
            Some(Mode::Pt) => "pt_steps",
            None => bail!(ConfigError {
                class: "config-value",
                message: format!("--steps does not apply to {}", cli.command.name()),
            }),
        };
        out.push((key.into(), n.to_string()));
    }
    match &cli.command {
        Command::Evaluate { conditions: Some(c), .. } => out.push(("conditions".into(), c.clone())),
        Command::Ablate { lengths: Some(l), .. } => out.push(("ablation_lengths".into(), l.clone())),
        _ => {}
    }
    Ok(out)
}

fn load_corpus(dir: &Path, run: &mut RunDir) -> Result<Corpus> {
    let corpus = Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    for f in ["spec.json", "lexicon.json", "vocab.txt", "train.kpd", "dev.kpd", "test.kpd"] {
        run.input(&dir.join(f))?;
    }
    Ok(corpus)
}

fn load_model(path: &Path, vocab: Option<&Vocab>, run: &mut RunDir) -> Result<Model> {
    let ck = checkpoint::load(path, vocab).with_context(|| format!("loading checkpoint {}", path.display()))?;
    run.input(path)?;
    Ok(ck.model)
}

fn split<'c>(corpus: &'c Corpus, name: &str) -> Result<&'c Dataset> {
    match name {
        "train" => Ok(&corpus.train),
        "dev" => Ok(&corpus.dev),
        "test" => Ok(&corpus.test),
        other => bail!(ConfigError {
            class: "config-value",
            message: format!("split must be train, dev or test, got `{other}`"),
        }),
    }
}

fn csv_list(s: &str) -> Vec<String> {
    s.split(',').map(|w| w.trim().to_string()).filter(|w| !w.is_empty()).collect()
}

fn train_command(cfg: &RunConfig, mode: Mode, args: &TrainArgs) -> Result<()> {
    let mut run = RunDir::create(&args.out, mode_command(mode), cfg)?;
    let corpus = load_corpus(&args.data, &mut run)?;
    let init = match (&args.init, mode) {
        (None, Mode::BaseAsr) => {
            let mc = cfg.model_config(corpus.vocab.len());
            Model::new(mc, &mut keyprompt::rng::stream(cfg.seed, "model/init"))?
        }
        (Some(p), _) => load_model(p, Some(&corpus.vocab), &mut run)?,
        (None, _) => bail!(ConfigError {
            class: "usage",
            message: format!("{} needs --init", mode_command(mode)),
        }),
    };
    let tc = cfg.train_config(mode);
    let every = (tc.steps / 20).max(1);
    let out: TrainOutcome = train::train_run_with(&tc, &corpus.train, &corpus.vocab, init, |step, loss| {
        if step % every == 0 {
            eprintln!("{} step {step}/{} loss {loss:.4}", mode, tc.steps);
        }
    })?;
    run.write("metrics.log", out.metrics_log().as_bytes())?;
    let ck = Checkpoint {
        model: out.model,
        vocab_hash: corpus.vocab.hash(),
        rng: Some(out.rng),
    };
    run.write(&format!("{}.ckpt", mode.name()), &checkpoint::to_bytes(&ck)?)?;
    run.note("trainable_params", out.trainable_params.to_string());
    run.finish()
}

fn mode_command(mode: Mode) -> &'static str {
    match mode {
        Mode::BaseAsr => "train-asr",
        Mode::Kws => "train-kws",
        Mode::Ft => "finetune",
        Mode::Pt => "prompt-tune",
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_command(
    cfg: &RunConfig,
    data: &Path,
    base: Option<&Path>,
    kws: Option<&Path>,
    ft: Option<&Path>,
    pt: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut run = RunDir::create(out, "evaluate", cfg)?;
    let conditions = cfg.conditions()?;
    let corpus = load_corpus(data, &mut run)?;
    let ds = split(&corpus, &cfg.split)?;
    let vocab = &corpus.vocab;
    let need = |p: Option<&Path>, what: &str, c: Condition| -> Result<PathBuf> {
        p.map(Path::to_path_buf).ok_or_else(|| {
            ConfigError {
                class: "usage",
                message: format!("condition {c} needs --{what}"),
            }
            .into()
        })
    };
    let mut models: Vec<(PathBuf, Model)> = Vec::new();
    let mut get = |path: PathBuf, run: &mut RunDir| -> Result<Model> {
        if let Some((_, m)) = models.iter().find(|(p, _)| *p == path) {
            return Ok(m.clone());
        }
        let m = load_model(&path, Some(vocab), run)?;
        models.push((path, m.clone()));
        Ok(m)
    };
    let ec = cfg.eval_config();
    let sets = eval::eval_keyword_sets(ds, vocab, &ec)?;
    let mut rows = Vec::with_capacity(conditions.len());
    for c in conditions {
        let asr_path = match c.model_mode() {
            Mode::BaseAsr => need(base, "base", c)?,
            Mode::Ft => need(ft, "ft", c)?,
            _ => need(pt, "pt", c)?,
        };
        let asr = get(asr_path.clone(), &mut run)?;
        let spotter = if c.uses_kws() { get(need(kws, "kws", c)?, &mut run)? } else { asr.clone() };
        eprintln!("evaluating {c}");
        rows.push(eval::evaluate_condition(&asr, &spotter, ds, vocab, c, &sets, &ec)?);
    }
    let text = eval::report_text(&rows);
    print!("{text}");
    run.write("report.csv", eval::report_csv(&rows).as_bytes())?;
    run.write("report.txt", text.as_bytes())?;
    let mut hyps = String::new();
    for r in &rows {
        for (i, h) in r.hypotheses.iter().enumerate() {
            hyps.push_str(&format!("{}\t{i}\t{h}\n", r.condition));
        }
    }
    run.write("hypotheses.tsv", hyps.as_bytes())?;
    run.finish()
}

fn ablate_command(cfg: &RunConfig, data: &Path, kws: &Path, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "ablate", cfg)?;
    let corpus = load_corpus(data, &mut run)?;
    let ds = split(&corpus, &cfg.split)?;
    let spotter = load_model(kws, Some(&corpus.vocab), &mut run)?;
    let rows = eval::ablate_prefix_length(
        &spotter,
        &corpus.train,
        ds,
        &corpus.vocab,
        &cfg.ablation_lengths,
        &cfg.train_config(Mode::Pt),
        &cfg.eval_config(),
        |r| eprintln!("prefix {} tokens: WER {:.4} F1 {:.4}", r.prefix_len, r.wer, r.f1),
    )?;
    let text = eval::ablation_text(&rows);
    print!("{text}");
    run.write("ablation.csv", eval::ablation_csv(&rows).as_bytes())?;
    run.write("report.txt", text.as_bytes())?;
    run.write("report.csv", eval::report_csv(&rows.iter().map(|r| r.report.clone()).collect::<Vec<_>>()).as_bytes())?;
    run.finish()
}

fn attn_export_command(cfg: &RunConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "attn-export", cfg)?;
    let corpus = load_corpus(data, &mut run)?;
    let ds = split(&corpus, &cfg.split)?;
    let vocab = &corpus.vocab;
    let model = load_model(ckpt, Some(vocab), &mut run)?;
    let use_prefix = model.params.prefix().is_some();
    let sets = eval::eval_keyword_sets(ds, vocab, &cfg.eval_config())?;
    let (mut aligned, mut counted, mut written) = (0usize, 0usize, 0usize);
    let mut summary = String::from("item\tkeyword\taligned\n");
    for (i, (u, set)) in ds.utterances.iter().zip(&sets).enumerate() {
        if cfg.attn_limit > 0 && written >= cfg.attn_limit {
            break;
        }
        let jargon: Vec<_> = set
            .positives()
            .keywords()
            .iter()
            .filter(|k| corpus.lexicon.is_jargon(&k.surface))
            .cloned()
            .collect();
        if jargon.is_empty() {
            continue;
        }
        let prompt = promptgen::assemble_prompt(&set.positives());
        let target = vocab.tokenize(&u.transcript)?;
        let enc = model.encode(&u.features)?;
        let rec = model.export_prompt_attention(&enc, &prompt, use_prefix, &target, cfg.attn_layer, vocab)?;
        run.write(&format!("attn/{i:05}.mat"), rec.to_text().as_bytes())?;
        written += 1;
        let mut all = true;
        for k in &jargon {
            let ok = eval::keyword_attention_aligned(&rec, &prompt, &target, &k.tokens).unwrap_or(false);
            summary.push_str(&format!("{i}\t{}\t{}\n", k.surface, u8::from(ok)));
            all &= ok;
        }
        counted += 1;
        aligned += usize::from(all);
    }
    let line = format!(
        "{aligned}/{counted} utterances with jargon keywords attend inside the keyword block while emitting it\n"
    );
    print!("{line}");
    summary.push_str(&format!("# {line}"));
    run.write("attn/summary.tsv", summary.as_bytes())?;
    run.finish()
}

#[allow(clippy::too_many_arguments)]
fn transcribe_command(
    cfg: &RunConfig,
    ckpt: &Path,
    vocab_path: Option<&Path>,
    input: &Path,
    index: usize,
    keywords: Option<&str>,
    kws: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut run = match out {
        Some(dir) => Some(RunDir::create(dir, "transcribe", cfg)?),
        None => None,
    };
    let mut scratch = RunDir::detached();
    let run_ref = run.as_mut().unwrap_or(&mut scratch);
    let is_kpd = input.extension().is_some_and(|e| e == "kpd");
    let vocab_path = match vocab_path {
        Some(p) => p.to_path_buf(),
        None if is_kpd => input.with_file_name("vocab.txt"),
        None => bail!(ConfigError {
            class: "usage",
            message: "WAV input needs --vocab".into(),
        }),
    };
    let vocab = Vocab::load(&vocab_path).with_context(|| format!("loading vocabulary {}", vocab_path.display()))?;
    run_ref.input(&vocab_path)?;
    let model = load_model(ckpt, Some(&vocab), run_ref)?;
    run_ref.input(input)?;
    let features = if is_kpd {
        let ds = synth::dataset_load(input)?;
        let n = ds.len();
        ds.utterances
            .into_iter()
            .nth(index)
            .ok_or_else(|| ConfigError {
                class: "usage",
                message: format!("--index {index} out of range for {n} items"),
            })?
            .features
    } else {
        keyprompt::audio::features_from_wav(input)?
    };
    let enc = model.encode(&features)?;
    let prompt = match keywords {
        None => None,
        Some(list) => {
            let set = KeywordSet::from_surfaces(&csv_list(list), &vocab)?;
            match kws {
                Some(p) => {
                    let spotter = load_model(p, Some(&vocab), run_ref)?;
                    let pred = spotter.kws_detect(&spotter.encode(&features)?, &set, cfg.kws_threshold)?;
                    for (k, (prob, d)) in set.keywords().iter().zip(pred.probs.iter().zip(&pred.decisions)) {
                        eprintln!("keyword {:<16} p={prob:.3} {}", k.surface, if *d { "present" } else { "absent" });
                    }
                    Some(promptgen::kws_to_prompt(&pred, &set)?)
                }
                None => Some(promptgen::assemble_prompt(&set)),
            }
        }
    };
    let use_prefix = model.params.prefix().is_some();
    let ids = model.transcribe_greedy(&enc, prompt.as_ref(), use_prefix, cfg.eval_config().length_cap(features.n_frames()))?;
    let hyp = vocab.detokenize(&ids);
    println!("{hyp}");
    if let Some(mut r) = run {
        r.write("transcript.txt", format!("{hyp}\n").as_bytes())?;
        r.finish()?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = parse_config(cli.global.config.as_deref(), &overrides(&cli)?)?;
    match &cli.command {
        Command::GenData { out } => {
            let mut run = RunDir::create(out, "gen-data", &cfg)?;
            let corpus = synth::generate_corpus(&cfg.synth_spec())?;
            corpus.save(out)?;
            for f in ["spec.json", "lexicon.json", "vocab.txt", "train.kpd", "dev.kpd", "test.kpd"] {
                run.output_existing(f)?;
            }
            for ds in [&corpus.train, &corpus.dev, &corpus.test] {
                run.output_existing(&format!("{}.txt", ds.split))?;
            }
            eprintln!(
                "{} train / {} dev / {} test utterances, {} tokens",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                corpus.vocab.len()
            );
            run.finish()
        }
        Command::TrainAsr(a) => train_command(&cfg, Mode::BaseAsr, a),
        Command::TrainKws(a) => train_command(&cfg, Mode::Kws, a),
        Command::Finetune(a) => train_command(&cfg, Mode::Ft, a),
        Command::PromptTune(a) => train_command(&cfg, Mode::Pt, a),
        Command::Evaluate {
            data,
            base,
            kws,
            ft,
            pt,
            out,
            ..
        } => evaluate_command(&cfg, data, base.as_deref(), kws.as_deref(), ft.as_deref(), pt.as_deref(), out),
        Command::Ablate { data, kws, out, .. } => ablate_command(&cfg, data, kws, out),
        Command::AttnExport { data, ckpt, out } => attn_export_command(&cfg, data, ckpt, out),
        Command::Transcribe {
            ckpt,
            vocab,
            input,
            index,
            keywords,
            kws,
            out,
        } => transcribe_command(
            &cfg,
            ckpt,
            vocab.as_deref(),
            input,
            *index,
            keywords.as_deref(),
            kws.as_deref(),
            out.as_deref(),
        ),
    }
}

/// Error class for the exit line: the library's own class when one is in
/// the chain, otherwise the config class, otherwise a generic one.
fn error_class(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(k) = cause.downcast_ref::<keyprompt::Error>() {
            return k.class();
        }
        if let Some(c) = cause.downcast_ref::<ConfigError>() {
            return c.class;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_class(&e));
            ExitCode::from(1)
        }
    }
}
