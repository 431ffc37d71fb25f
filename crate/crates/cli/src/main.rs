use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cstt_core::harness;
use cstt_core::metrics::{count_errors, tokenize_mixed, ErrorCounts};
use cstt_core::synthcorpus::{self, SynthSpec};
use cstt_core::textgen::{frequency_table, generate_corpus, parse_pairs, Lexicon, SubstitutionPolicy};
use cstt_core::trainer::{self, SystemKind, TrainConfig};

#[derive(Parser)]
#[command(
    name = "cstt",
    version,
    about = "Code-switching text generation and transducer training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate code-switched sentences from tagged parallel pairs.
    Textgen {
        /// Lines of `id<TAB>man word/POS ...<TAB>eng word/POS ...`.
        #[arg(long)]
        pairs: PathBuf,
        /// Lines of `mandarin<TAB>english [english ...]`.
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against references (TER, Mandarin CER, English WER).
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train one system from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        system: SystemKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic corpus described by a TOML spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every system of a plan and write comparison reports.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn textgen(pairs: &Path, dict: &Path, ratio: f64, seed: u64, out: &Path) -> Result<()> {
    let (pairs, errors) = parse_pairs(&read(pairs)?);
    for e in &errors {
        eprintln!("skipped: {e}");
    }
    if pairs.is_empty() {
        bail!("no usable sentence pairs");
    }
    let lexicon = Lexicon::parse(&read(dict)?)?;
    let policy = SubstitutionPolicy::new(ratio, frequency_table(&pairs), seed)?;
    let (sentences, stats) = generate_corpus(&pairs, &lexicon, &policy)?;
    let mut text = String::new();
    for s in &sentences {
        text.push_str(&s.to_line());
        text.push('\n');
    }
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    if let Some(w) = &stats.warning {
        eprintln!("warning: {w}");
    }
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

/// Splits `id<TAB>text` lines; plain lines have no id.
fn transcript_lines(text: &str) -> Vec<(Option<&str>, &str)> {
    text.lines()
        .map(|l| match l.split_once('\t') {
            Some((id, t)) => (Some(id), t),
            None => (None, l),
        })
        .collect()
}

fn score(reference: &Path, hyp: &Path, report: &Path) -> Result<()> {
    let (rt, ht) = (read(reference)?, read(hyp)?);
    let (refs, hyps) = (transcript_lines(&rt), transcript_lines(&ht));
    if refs.len() != hyps.len() {
        bail!("{} references but {} hypotheses", refs.len(), hyps.len());
    }
    let mut total = ErrorCounts::default();
    for (i, ((rid, r), (hid, h))) in refs.iter().zip(&hyps).enumerate() {
        if let (Some(a), Some(b)) = (rid, hid) {
            if a != b {
                bail!("line {}: reference id {a} vs hypothesis id {b}", i + 1);
            }
        }
        let r = tokenize_mixed(r).with_context(|| format!("reference line {}", i + 1))?;
        let h = tokenize_mixed(h).with_context(|| format!("hypothesis line {}", i + 1))?;
        total += count_errors(&r, &h);
    }
    let rep = total.report();
    let mut json = serde_json::to_string_pretty(&rep)?;
    json.push('\n');
    fs::write(report, json).with_context(|| format!("writing {}", report.display()))?;
    println!(
        "TER {:.2}%  CER(Man) {:.2}%  WER(Eng) {:.2}%",
        rep.ter, rep.cer_man, rep.wer_eng
    );
    Ok(())
}

fn train(config: &Path, system: SystemKind, out: &Path) -> Result<()> {
    let mut cfg = TrainConfig::from_toml(&read(config)?)?;
    cfg.system = system;
    cfg.validate()?;
    let Some(data) = &cfg.data else {
        bail!("config has no `data` directory (run `cstt synth` first)");
    };
    let data = config.parent().unwrap_or(Path::new(".")).join(data);
    let ds = synthcorpus::load_datasets(&data).with_context(|| format!("loading {}", data.display()))?;
    let outcome = trainer::train(&ds, &cfg, out)?;
    if let Some(last) = outcome.reports.last() {
        eprintln!("step {} loss {:.4} lr {:.3e}", last.step, last.total, last.lr);
    }
    let inference = outcome.model.to_inference()?;
    for (name, set) in [
        ("eval_homogeneous", &ds.eval_homogeneous),
        ("eval_shifted", &ds.eval_shifted),
    ] {
        let (_, rep) = trainer::evaluate(&inference, &ds.language.vocab, set)?;
        println!(
            "{name}: TER {:.2}%  CER(Man) {:.2}%  WER(Eng) {:.2}%",
            rep.ter, rep.cer_man, rep.wer_eng
        );
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

fn synth(spec: &Path, out: &Path) -> Result<()> {
    let spec = SynthSpec::from_toml(&read(spec)?)?;
    let (ds, index) = synthcorpus::synthesize_to_dir(&spec, out)?;
    if let Some(w) = &ds.textgen_stats.warning {
        eprintln!("warning: {w}");
    }
    for (split, (n, sum)) in &index.splits {
        println!("{split:<18} {n:>6}  sha256 {sum}");
    }
    Ok(())
}

fn experiment(plan: &Path, out: &Path) -> Result<()> {
    let bundle = harness::run_experiment_file(plan, out)?;
    print!("{}", bundle.table);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Textgen {
            pairs,
            dict,
            ratio,
            seed,
            out,
        } => textgen(&pairs, &dict, ratio, seed, &out),
        Command::Score { reference, hyp, report } => score(&reference, &hyp, &report),
        Command::Train { config, system, out } => train(&config, system, &out),
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Experiment { plan, out } => experiment(&plan, &out),
    }
}
