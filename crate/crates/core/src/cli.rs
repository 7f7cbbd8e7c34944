//! Command-line front end. Every command writes its outputs and a
//! `manifest.json` into the `--out` directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_corpus, write_corpus, Corpus, SynthConfig, UtteranceRecord};
use crate::error::{Error, Result};
use crate::evalkit::{
    corpus_wer, curve_csv, endpoint_latency, score_short_queries, speech_pct, sweep, sweep_csv, tradeoff_curve,
    SweepGrid,
};
use crate::models::ModelConfig;
use crate::runtime::{export_trace, run_frames, run_session, Mode, ScriptedModel, StreamingSystem, Thresholds};
use crate::trainer::{checkpoint_files, load_model, save_checkpoint, train_into, Arm, TrainConfig, TrainReport};

/// Experiment configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepGrid,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.synth.validate()?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        if cfg.synth.d_in != cfg.model.d_in || cfg.synth.vocab_size != cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "{}: [synth] and [model] disagree on d_in or vocab_size",
                path.display()
            )));
        }
        Ok(cfg)
    }

    fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

#[derive(Debug, Parser)]
#[command(name = "jointep", version, about = "Joint endpointing and streaming recognition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus from the [synth] section.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one experiment arm.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides [train].arm.
        #[arg(long, value_enum)]
        arm: Option<ArmArg>,
        /// Overrides [train].seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a corpus and report WER with latency or filtering metrics.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Short)]
        mode: ModeArg,
        #[command(flatten)]
        th: ThresholdArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search end-of-query thresholds under a WER budget.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Grid from the [sweep] section; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        theta_vad: Option<f64>,
        /// Percent.
        #[arg(long)]
        wer_budget: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream one utterance and write its per-frame trace.
    Stream {
        #[command(flatten)]
        model: ModelArgs,
        /// Scripted posteriors (JSON) to run instead of a checkpoint.
        #[arg(long, conflicts_with = "ckpt")]
        script: Option<PathBuf>,
        #[arg(long, requires = "utt")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        utt: Option<String>,
        #[arg(long, value_enum, default_value_t = ModeArg::Short)]
        mode: ModeArg,
        #[command(flatten)]
        th: ThresholdArgs,
        /// Frame period used with --script.
        #[arg(long, default_value_t = 30)]
        frame_ms: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ArmArg {
    #[value(name = "B1")]
    B1,
    #[value(name = "E1")]
    E1,
    #[value(name = "E2")]
    E2,
    #[value(name = "E3")]
    E3,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Arm {
        match a {
            ArmArg::B1 => Arm::B1,
            ArmArg::E1 => Arm::E1,
            ArmArg::E2 => Arm::E2,
            ArmArg::E3 => Arm::E3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ModeArg {
    Short,
    Continuous,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Short => Mode::ShortQuery,
            ModeArg::Continuous => Mode::Continuous,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Checkpoint file; repeat for the two files of a B1 run.
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Arm the checkpoint was trained as; selects the endpointer input.
    #[arg(long, value_enum, default_value_t = ArmArg::E3)]
    pub arm: ArmArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = Thresholds::default().vad)]
    pub theta_vad: f64,
    #[arg(long, default_value_t = Thresholds::default().eoq)]
    pub theta_eoq: f64,
    #[arg(long, default_value_t = Thresholds::default().eos)]
    pub theta_eos: f64,
    #[arg(long, default_value_t = Thresholds::default().wait_ms)]
    pub wait_ms: u64,
}

impl ThresholdArgs {
    fn thresholds(&self) -> Result<Thresholds> {
        let th = Thresholds {
            vad: self.theta_vad,
            eoq: self.theta_eoq,
            eos: self.theta_eos,
            wait_ms: self.wait_ms,
        };
        th.validate()?;
        Ok(th)
    }
}

/// Provenance record written beside every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub tool_version: String,
    pub started_at: String,
    pub wall_clock_ms: u128,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

struct Recorder {
    command: &'static str,
    started: Instant,
    started_at: String,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    fn new(command: &'static str, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(Recorder {
            command,
            started: Instant::now(),
            started_at: chrono::Utc::now().to_rfc3339(),
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn wrote(&mut self, p: PathBuf) {
        self.outputs.push(p);
    }

    fn finish<C: Serialize>(self, config: &C, seed: Option<u64>) -> Result<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: self.inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            outputs: self.outputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            wall_clock_ms: self.started.elapsed().as_millis(),
        };
        let p = self.out.join(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

pub fn cmd_gen_data(config: &Path, seed: u64, out: &Path) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config)?;
    let mut rec = Recorder::new("gen-data", out)?;
    rec.input(config);
    let corpus = Corpus::from_synth(&cfg.synth, seed)?;
    let path = rec.path("corpus.jsonl");
    write_corpus(&corpus, &path)?;
    rec.wrote(path.clone());
    rec.finish(&cfg.synth, Some(seed))?;
    Ok(path)
}

pub fn cmd_train(config: Option<&Path>, corpus_path: &Path, arm: Option<Arm>, seed: Option<u64>, out: &Path) -> Result<TrainReport> {
    let mut cfg = ExperimentConfig::load_or_default(config)?;
    if let Some(a) = arm {
        cfg.train.arm = a;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let corpus = read_corpus(corpus_path)?;
    let mut rec = Recorder::new("train", out)?;
    rec.input(corpus_path);
    if let Some(c) = config {
        rec.input(c);
    }
    let snapshot = serde_json::json!({ "model": cfg.model, "train": cfg.train });
    let mut report = TrainReport::default();
    let result = train_into(&cfg.train, &cfg.model, &corpus, &mut report);
    if let Ok(trained) = &result {
        for (name, store) in checkpoint_files(cfg.train.arm, &trained.store)? {
            let p = rec.path(name);
            save_checkpoint(&p, &cfg.model, &store)?;
            rec.wrote(p.clone());
            report.checkpoint.get_or_insert(p);
        }
    }
    rec.write("train_report.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    rec.finish(&snapshot, Some(cfg.train.seed))?;
    result.map(|_| report)
}

fn load_system(args: &ModelArgs, corpus: &Corpus, rec: &mut Recorder) -> Result<StreamingSystem> {
    if args.ckpt.is_empty() {
        return Err(Error::Config("--ckpt is required".into()));
    }
    for p in &args.ckpt {
        rec.input(p);
    }
    let (model, store) = load_model(&args.ckpt, None)?;
    let h = &corpus.header;
    if h.d_in != model.cfg.d_in || h.vocab_size != model.cfg.vocab_size {
        return Err(Error::Invalid(format!(
            "checkpoint expects d_in {} and vocabulary {}, corpus has d_in {} and vocabulary {}",
            model.cfg.d_in, model.cfg.vocab_size, h.d_in, h.vocab_size
        )));
    }
    Ok(StreamingSystem::new(model, store, Arm::from(args.arm).routing()))
}

/// Table-style metrics line printed by `eval`.
pub fn cmd_eval(model: &ModelArgs, corpus_path: &Path, mode: Mode, th: &ThresholdArgs, out: &Path) -> Result<String> {
    let thresholds = th.thresholds()?;
    let corpus = read_corpus(corpus_path)?;
    let mut rec = Recorder::new("eval", out)?;
    rec.input(corpus_path);
    let sys = load_system(model, &corpus, &mut rec)?;
    let traces = corpus
        .records
        .iter()
        .map(|u| run_session(&sys, u, mode, thresholds))
        .collect::<Result<Vec<_>>>()?;
    let mut per_utt = String::from("id,ref_words,errors,hyp_tokens,unfiltered_frames,frames,latency_ms,endpointed\n");
    for (t, u) in traces.iter().zip(&corpus.records) {
        let w = corpus_wer([(u.target_tokens.as_slice(), t.hypothesis.as_slice())])?;
        let lat = match mode {
            Mode::ShortQuery => {
                let l = endpoint_latency(t, u)?;
                (l.ms.to_string(), if l.endpointed { "1" } else { "0" })
            }
            Mode::Continuous => (String::new(), ""),
        };
        let _ = writeln!(
            per_utt,
            "{},{},{},{},{},{},{},{}",
            u.id,
            w.ref_words,
            w.errors(),
            t.hypothesis.len(),
            t.unfiltered_frames(),
            t.rows.len(),
            lat.0,
            lat.1
        );
    }
    let table = match mode {
        Mode::ShortQuery => {
            let utts: Vec<&UtteranceRecord> = corpus.records.iter().collect();
            let (w, lat, _) = score_short_queries(&traces, &utts)?;
            format!("wer,ep50_ms,ep90_ms\n{:.2},{},{}\n", w.wer, lat.ep50, lat.ep90)
        }
        Mode::Continuous => {
            let w = corpus_wer(
                traces
                    .iter()
                    .zip(&corpus.records)
                    .map(|(t, u)| (u.target_tokens.as_slice(), t.hypothesis.as_slice())),
            )?;
            format!(
                "wer,del,ins,sub,speech_pct\n{:.2},{:.2},{:.2},{:.2},{:.2}\n",
                w.wer,
                w.del_rate,
                w.ins_rate,
                w.sub_rate,
                speech_pct(&traces)?
            )
        }
    };
    rec.write("metrics.csv", &table)?;
    rec.write("utterances.csv", &per_utt)?;
    let snapshot = serde_json::json!({ "model": model, "mode": mode, "thresholds": thresholds });
    rec.finish(&snapshot, None)?;
    Ok(table)
}

pub fn cmd_sweep(
    model: &ModelArgs,
    corpus_path: &Path,
    config: Option<&Path>,
    theta_vad: Option<f64>,
    wer_budget: f64,
    out: &Path,
) -> Result<String> {
    let mut grid = ExperimentConfig::load_or_default(config)?.sweep;
    if let Some(v) = theta_vad {
        grid.vad = v;
    }
    Thresholds::never_ending(grid.vad).validate()?;
    if wer_budget.is_nan() || wer_budget < 0.0 {
        return Err(Error::Config(format!("--wer-budget {wer_budget} must be non-negative")));
    }
    let corpus = read_corpus(corpus_path)?;
    let mut rec = Recorder::new("sweep", out)?;
    rec.input(corpus_path);
    if let Some(c) = config {
        rec.input(c);
    }
    let sys = load_system(model, &corpus, &mut rec)?;
    let utts: Vec<&UtteranceRecord> = corpus.records.iter().collect();
    let result = sweep(&sys, &utts, &grid, wer_budget)?;
    rec.write("sweep.csv", &sweep_csv(&result.points))?;
    rec.write("curve.csv", &curve_csv(&tradeoff_curve(&result.points)))?;
    let selected = result.selected_point().cloned();
    if let Ok(p) = &selected {
        rec.write("selected.json", &(serde_json::to_string_pretty(p)? + "\n"))?;
    }
    let snapshot = serde_json::json!({ "model": model, "grid": grid, "wer_budget": wer_budget });
    rec.finish(&snapshot, None)?;
    let p = selected?;
    Ok(format!(
        "theta_eoq,theta_eos,w_ms,wer,ep50_ms,ep90_ms\n{},{},{},{:.2},{},{}\n",
        p.thresholds.eoq, p.thresholds.eos, p.thresholds.wait_ms, p.wer.wer, p.latency.ep50, p.latency.ep90
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_stream(
    model: &ModelArgs,
    script: Option<&Path>,
    corpus_path: Option<&Path>,
    utt_id: Option<&str>,
    mode: Mode,
    th: &ThresholdArgs,
    frame_ms: u64,
    out: &Path,
) -> Result<PathBuf> {
    let thresholds = th.thresholds()?;
    let mut rec = Recorder::new("stream", out)?;
    let trace = match script {
        Some(sp) => {
            rec.input(sp);
            let text = std::fs::read_to_string(sp).map_err(|e| Error::io(sp, e))?;
            let stub: ScriptedModel = serde_json::from_str(&text)?;
            run_frames(&stub, &stub.feature_frames(frame_ms), mode, thresholds, 0)?
        }
        None => {
            let (Some(cp), Some(id)) = (corpus_path, utt_id) else {
                return Err(Error::Config("stream needs --script, or --ckpt with --corpus and --utt".into()));
            };
            let corpus = read_corpus(cp)?;
            rec.input(cp);
            let sys = load_system(model, &corpus, &mut rec)?;
            let utt = corpus
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("utterance {id:?} not found in {}", cp.display())))?;
            run_session(&sys, utt, mode, thresholds)?
        }
    };
    let path = rec.path("trace.csv");
    export_trace(&trace, &path)?;
    rec.wrote(path.clone());
    let summary = serde_json::json!({
        "endpoint": trace.event,
        "ended": trace.ended,
        "hypothesis": trace.hypothesis,
    });
    rec.write("session.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    let snapshot = serde_json::json!({
        "model": model,
        "script": script,
        "utt": utt_id,
        "mode": mode,
        "thresholds": thresholds,
        "frame_ms": frame_ms,
    });
    rec.finish(&snapshot, None)?;
    Ok(path)
}

/// Runs a parsed command line, returning text for stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            cmd_gen_data(&config, seed, &out).map(|p| format!("wrote {}\n", p.display()))
        }
        Command::Train {
            config,
            corpus,
            arm,
            seed,
            out,
        } => {
            let r = cmd_train(config.as_deref(), &corpus, arm.map(Arm::from), seed, &out)?;
            Ok(format!(
                "arm {} steps {} final loss {:.4} (audio {} / latent {} utterances)\n",
                r.arm.map_or("?", |a| a.name()),
                r.multitask_loss.len(),
                r.final_loss,
                r.audio_routed,
                r.latent_routed
            ))
        }
        Command::Eval {
            model,
            corpus,
            mode,
            th,
            out,
        } => cmd_eval(&model, &corpus, mode.into(), &th, &out),
        Command::Sweep {
            model,
            corpus,
            config,
            theta_vad,
            wer_budget,
            out,
        } => cmd_sweep(&model, &corpus, config.as_deref(), theta_vad, wer_budget, &out),
        Command::Stream {
            model,
            script,
            corpus,
            utt,
            mode,
            th,
            frame_ms,
            out,
        } => cmd_stream(
            &model,
            script.as_deref(),
            corpus.as_deref(),
            utt.as_deref(),
            mode.into(),
            &th,
            frame_ms,
            &out,
        )
        .map(|p| format!("wrote {}\n", p.display())),
    }
}

/// Process exit code for a command outcome.
pub fn exit_code(r: &Result<String>) -> i32 {
    match r {
        Ok(_) => 0,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}
