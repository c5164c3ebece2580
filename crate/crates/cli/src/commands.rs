use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ha2g_core::config::RunConfig;
use ha2g_core::data::{save_clips, synth_corpus, ClipRecord, FlatArray, MelConfig, SynthSpec};
use ha2g_core::eval::{audio_beats, clip_bc, corpus_maac, motion_beats};
use ha2g_core::gradsuite::{run_suite, worst_per_loss, SuiteOptions, TOLERANCE};
use ha2g_core::losses::LossComponents;
use ha2g_core::metrics::{BeatSet, BeatSource};
use ha2g_core::model::checkpoint::Dtype;
use ha2g_core::pipeline::{
    angle_profile, generate_poses, holdout_count, load_corpus, load_generator, new_trainer, prepare, read_checkpoint, save_checkpoint,
    write_synth_corpus, Clip, Evaluator,
};
use ha2g_core::pose::{PoseSequence, Skeleton};
use ha2g_core::train::{StepRecord, TrainError};
use log::info;
use serde_json::{json, Map, Value};

use crate::{AngleStatsArgs, BeatsArgs, Cli, Command, EvalArgs, GenDataArgs, GradcheckArgs, InferArgs, Split, TrainArgs};

/// Bad invocation: exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub trait ExitStatus {
    fn exit_code(&self) -> u8;
}

impl ExitStatus for anyhow::Error {
    fn exit_code(&self) -> u8 {
        if self.is::<UsageError>() {
            2
        } else {
            1
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_CSV: &str = "losses.csv";
pub const LATEST: &str = "latest.bin";

struct RunContext {
    cfg: RunConfig,
    skeleton: Skeleton,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let beside = match &cli.command {
        Command::Eval(a) => a.checkpoint.clone(),
        Command::Beats(a) => a.checkpoint.clone(),
        Command::Infer(a) => Some(a.checkpoint.clone()),
        _ => None,
    };
    let ctx = RunContext { cfg: load_config(&cli, beside.as_deref())?, skeleton: Skeleton::ted43() };
    match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Gradcheck(a) => gradcheck(&ctx, a),
        Command::Beats(a) => beats(&ctx, a),
        Command::AngleStats(a) => angle_stats(&ctx, a),
        Command::Infer(a) => infer(&ctx, a),
    }
}

/// `--config` (or `HA2G_CONFIG`), else the config saved next to the
/// checkpoint, else defaults; then `--set` overrides and `--seed`.
fn load_config(cli: &Cli, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let saved = checkpoint.and_then(|c| c.parent()).map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let source = cli.config.clone().or(saved);
    let mut cfg = match &source {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set_pair(o).map_err(|e| usage(format!("--set {o}: {e}")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("output directory {} does not exist", dir.display())))
    }
}

fn require_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => require_dir(p),
        _ => Ok(()),
    }
}

fn select(clips: Vec<Clip>, split: Split) -> (Vec<Clip>, Vec<Clip>) {
    let k = holdout_count(clips.len());
    let mut clips = clips;
    match split {
        Split::All => (clips, Vec::new()),
        Split::Test => {
            let rest = clips.split_off(k.min(clips.len()));
            (clips, rest)
        }
        Split::Train => {
            let rest = clips.split_off(k.min(clips.len()));
            (rest, clips)
        }
    }
}

fn load(ctx: &RunContext, path: &Path) -> Result<Vec<Clip>> {
    let clips = load_corpus(path, &ctx.skeleton).with_context(|| format!("loading corpus {}", path.display()))?;
    if clips.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(clips)
}

fn gen_data(ctx: &RunContext, a: &GenDataArgs) -> Result<()> {
    require_dir(&a.out)?;
    let cfg = &ctx.cfg;
    let spec = SynthSpec {
        clips: a.clips,
        frames: a.frames.unwrap_or(cfg.model.frames),
        speakers: a.speakers,
        beat_rate: a.beat_rate,
        fps: cfg.model.fps,
        ..SynthSpec::default()
    };
    let clips = synth_corpus(&spec, &ctx.skeleton, cfg.seed)?;
    let path = write_synth_corpus(&a.out, &clips, spec.mel.sample_rate)?;
    info!("wrote {} clips to {}", clips.len(), path.display());
    println!("{}", path.display());
    Ok(())
}

fn csv_header(cfg: &RunConfig) -> String {
    let w = &cfg.weights;
    let lambdas = [w.lambda_gan, w.lambda_h, w.lambda_p, w.lambda_s, w.lambda_k, w.lambda_c];
    let mut cols = vec!["step".to_string(), "epoch".into(), "total".into(), "disc".into()];
    cols.extend(LossComponents::NAMES.iter().zip(lambdas).map(|(n, l)| format!("{n}*{l}")));
    cols.join(",")
}

fn csv_row(r: &StepRecord) -> String {
    let mut cols = vec![r.step.to_string(), r.epoch.to_string(), r.total.to_string(), r.disc.to_string()];
    cols.extend(r.components.values().iter().map(|v| v.to_string()));
    cols.join(",")
}

fn train(ctx: &RunContext, a: &TrainArgs) -> Result<()> {
    require_dir(&a.out)?;
    let cfg = &ctx.cfg;
    let (clips, _) = select(load(ctx, &a.corpus)?, a.split);
    if clips.len() < 2 {
        bail!("need at least 2 training clips, got {}", clips.len());
    }
    let prepared = prepare(&clips, &cfg.model)?;
    let mut trainer = new_trainer(cfg, &ctx.skeleton, &clips, &prepared)?;
    if let Some(path) = &a.resume {
        let tensors = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
        trainer.restore(&tensors).with_context(|| format!("restoring {}", path.display()))?;
        info!("resumed at epoch {} step {}", trainer.epoch, trainer.step);
    }
    fs::write(a.out.join(CONFIG_FILE), cfg.to_text())?;

    let csv_path = a.out.join(LOSS_CSV);
    let fresh = a.resume.is_none() || !csv_path.exists();
    let file = if fresh { File::create(&csv_path)? } else { OpenOptions::new().append(true).open(&csv_path)? };
    let mut csv = BufWriter::new(file);
    if fresh {
        writeln!(csv, "{}", csv_header(cfg))?;
    }
    let dtype = if a.f64 { Dtype::F64 } else { Dtype::F32 };
    let start = Instant::now();
    while trainer.epoch < cfg.epochs {
        let mut io_err = None;
        let result = trainer.train_epoch(&prepared, |r| {
            if let Err(e) = writeln!(csv, "{}", csv_row(r)) {
                io_err.get_or_insert(e);
            }
        });
        csv.flush()?;
        if let Some(e) = io_err {
            return Err(e).context("writing loss CSV");
        }
        let records = match result {
            Ok(r) => r,
            Err(e @ TrainError::NonFiniteLoss { .. }) => {
                let diag = a.out.join("nonfinite.txt");
                fs::write(&diag, format!("{e}\nepoch {}\n", trainer.epoch))?;
                return Err(anyhow!(e)).with_context(|| format!("training stopped; diagnostic in {}", diag.display()));
            }
            Err(e) => return Err(e.into()),
        };
        let mean = records.iter().map(|r| r.total).sum::<f64>() / records.len().max(1) as f64;
        info!("epoch {} mean loss {mean:.5} ({:.0}s)", trainer.epoch, start.elapsed().as_secs_f64());
        let last = trainer.epoch == cfg.epochs;
        if (cfg.checkpoint_every > 0 && trainer.epoch % cfg.checkpoint_every == 0) || last {
            let path = a.out.join(format!("checkpoint_{:04}.bin", trainer.epoch));
            save_checkpoint(&trainer, &path, dtype)?;
            fs::copy(&path, a.out.join(LATEST))?;
        }
    }
    println!("{}", a.out.join(LATEST).display());
    Ok(())
}

fn config_json(cfg: &RunConfig) -> Value {
    let mut map = Map::new();
    for (k, v) in cfg.entries() {
        let value = if let Ok(b) = v.parse::<bool>() {
            Value::Bool(b)
        } else if let Ok(i) = v.parse::<u64>() {
            json!(i)
        } else if let Ok(f) = v.parse::<f64>() {
            json!(f)
        } else {
            Value::String(v)
        };
        map.insert(k.to_string(), value);
    }
    Value::Object(map)
}

fn eval(ctx: &RunContext, a: &EvalArgs) -> Result<()> {
    require_dir(&a.out)?;
    let cfg = &ctx.cfg;
    let (clips, rest) = select(load(ctx, &a.corpus)?, a.split);
    // The autoencoder and the MAAC come from the other clips when there are any.
    let reference = if rest.len() >= 2 { &rest } else { &clips };
    let ref_poses: Vec<PoseSequence> = reference.iter().map(|c| c.pose.clone()).collect();
    let maac = corpus_maac(&ref_poses, &ctx.skeleton)?;
    let evaluator = Evaluator::new(cfg, &ctx.skeleton, &ref_poses, &clips, maac)?;
    let poses: Vec<PoseSequence> = if a.ground_truth {
        clips.iter().map(|c| c.pose.clone()).collect()
    } else {
        let prepared = prepare(&clips, &cfg.model)?;
        let gen = match &a.checkpoint {
            Some(path) => load_generator(cfg, &ctx.skeleton, path).with_context(|| format!("loading {}", path.display()))?,
            None => {
                let ref_prepared = prepare(reference, &cfg.model)?;
                new_trainer(cfg, &ctx.skeleton, reference, &ref_prepared)?.gen
            }
        };
        generate_poses(&gen, &prepared, cfg.model.fps, None)?
    };
    let report = evaluator.evaluate(&poses)?;
    let scored = report.bc.per_clip.iter().flatten().count();
    let doc = json!({
        "fgd": report.fgd,
        "bc": report.bc.mean,
        "diversity": report.diversity,
        "clips": clips.len(),
        "bc_scored_clips": scored,
        "config": config_json(cfg),
    });
    let json_path = a.out.join("metrics.json");
    fs::write(&json_path, serde_json::to_string_pretty(&doc)? + "\n")?;
    let mut csv = BufWriter::new(File::create(a.out.join("bc_per_clip.csv"))?);
    writeln!(csv, "clip_id,bc")?;
    for (c, bc) in clips.iter().zip(&report.bc.per_clip) {
        writeln!(csv, "{},{}", c.id, bc.map(|v| v.to_string()).unwrap_or_default())?;
    }
    csv.flush()?;
    println!("{}", serde_json::to_string(&json!({"fgd": report.fgd, "bc": report.bc.mean, "diversity": report.diversity}))?);
    Ok(())
}

fn gradcheck(ctx: &RunContext, a: &GradcheckArgs) -> Result<()> {
    let opts = SuiteOptions { seed: ctx.cfg.seed, samples_per_tensor: a.samples.max(1), flip: a.inject_fault.clone() };
    let rows = run_suite(&opts)?;
    let shown = if a.all { rows.clone() } else { worst_per_loss(&rows) };
    println!("{:<14} {:<28} {:>12}  status", "loss", "worst tensor", "rel error");
    for r in &shown {
        let status = if r.error < TOLERANCE { "PASS" } else { "FAIL" };
        println!("{:<14} {:<28} {:>12.3e}  {status}", r.loss, r.tensor, r.error);
    }
    let worst = worst_per_loss(&rows);
    let failed: Vec<&str> = worst.iter().filter(|r| !(r.error < TOLERANCE)).map(|r| r.loss.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn beat_set(times: &[f64], source: BeatSource) -> BeatSet {
    let mut t = times.to_vec();
    t.sort_by(f64::total_cmp);
    BeatSet { times: t, source }
}

fn fmt_times(b: &BeatSet) -> String {
    b.times.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(" ")
}

fn beats(ctx: &RunContext, a: &BeatsArgs) -> Result<()> {
    let sigma = ctx.cfg.beats.sigma;
    if let (Some(m), Some(au)) = (&a.motion_times, &a.audio_times) {
        if a.sweep {
            return Err(usage("--sweep needs a corpus clip, not explicit beat lists"));
        }
        let (motion, audio) = (beat_set(m, BeatSource::Motion), beat_set(au, BeatSource::Audio));
        if audio.is_empty() {
            bail!("no audio beats");
        }
        let bc = clip_bc(&motion, &audio, sigma).expect("audio beats present");
        println!("motion: {}\naudio: {}\nbc: {bc:.6}", fmt_times(&motion), fmt_times(&audio));
        return Ok(());
    }
    let corpus = a.corpus.as_ref().ok_or_else(|| usage("--corpus is required"))?;
    if let Some(out) = &a.out {
        require_parent(out)?;
    }
    let cfg = &ctx.cfg;
    let clips = load(ctx, corpus)?;
    let idx = match &a.clip {
        Some(id) => clips.iter().position(|c| &c.id == id).ok_or_else(|| anyhow!("no clip `{id}` in corpus"))?,
        None => 0,
    };
    let all_poses: Vec<PoseSequence> = clips.iter().map(|c| c.pose.clone()).collect();
    let maac = corpus_maac(&all_poses, &ctx.skeleton)?;
    let clip = &clips[idx];
    let pose = match &a.checkpoint {
        Some(path) => {
            let gen = load_generator(cfg, &ctx.skeleton, path)?;
            let prepared = prepare(std::slice::from_ref(clip), &cfg.model)?;
            generate_poses(&gen, &prepared, cfg.model.fps, None)?.remove(0)
        }
        None => clip.pose.clone(),
    };
    let audio = audio_beats(&clip.audio, &MelConfig::default(), cfg.beats.picking)?;
    if audio.is_empty() {
        bail!("clip {} has no audio beats", clip.id);
    }
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    if a.sweep {
        writeln!(out, "threshold,bc,motion_beats")?;
        for i in 1..=30 {
            let th = i as f64 / 100.0;
            let motion = motion_beats(&pose, &ctx.skeleton, &maac, th);
            let bc = clip_bc(&motion, &audio, sigma).expect("audio beats present");
            writeln!(out, "{th:.2},{bc},{}", motion.len())?;
        }
    } else {
        let motion = motion_beats(&pose, &ctx.skeleton, &maac, cfg.beats.threshold);
        let bc = clip_bc(&motion, &audio, sigma).expect("audio beats present");
        if a.out.is_some() {
            writeln!(out, "source,time")?;
            for t in &motion.times {
                writeln!(out, "motion,{t}")?;
            }
            for t in &audio.times {
                writeln!(out, "audio,{t}")?;
            }
            println!("clip {} bc {bc:.6}", clip.id);
        } else {
            writeln!(out, "clip: {}\nmotion: {}\naudio: {}\nbc: {bc:.6}", clip.id, fmt_times(&motion), fmt_times(&audio))?;
        }
    }
    out.flush()?;
    Ok(())
}

fn angle_stats(ctx: &RunContext, a: &AngleStatsArgs) -> Result<()> {
    if let Some(out) = &a.out {
        require_parent(out)?;
    }
    let clips = load(ctx, &a.corpus)?;
    let profile = angle_profile(&clips, &ctx.skeleton)?;
    let poses: Vec<PoseSequence> = clips.iter().map(|c| c.pose.clone()).collect();
    let maac = corpus_maac(&poses, &ctx.skeleton)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "angle,bone_a,bone_b,mean_deg,var_deg2,maac")?;
    for (i, &(b1, b2)) in ctx.skeleton.angle_pairs().iter().enumerate() {
        writeln!(out, "{i},{b1},{b2},{},{},{}", profile.means[i], profile.variances[i], maac.values[i])?;
    }
    out.flush()?;
    Ok(())
}

fn infer(ctx: &RunContext, a: &InferArgs) -> Result<()> {
    require_parent(&a.out)?;
    let cfg = &ctx.cfg;
    let (mut clips, _) = select(load(ctx, &a.corpus)?, a.split);
    if let Some(id) = &a.clip {
        clips.retain(|c| &c.id == id);
        if clips.is_empty() {
            bail!("no clip `{id}` in the selected split");
        }
    }
    let gen = load_generator(cfg, &ctx.skeleton, &a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let prepared = prepare(&clips, &cfg.model)?;
    let poses = generate_poses(&gen, &prepared, cfg.model.fps, a.sample_style.then_some(cfg.seed))?;
    let corpus_dir = a.corpus.parent().map(PathBuf::from).unwrap_or_default();
    let corpus_dir = corpus_dir.canonicalize().unwrap_or(corpus_dir);
    let source = ha2g_core::data::load_clips(&a.corpus)?;
    let records: Vec<ClipRecord> = clips
        .iter()
        .zip(poses)
        .map(|(c, p)| {
            let audio = source.iter().find(|r| r.clip_id == c.id).map(|r| corpus_dir.join(&r.audio)).unwrap_or_default();
            ClipRecord {
                clip_id: c.id.clone(),
                fps: p.fps,
                dirvecs: Some(FlatArray { shape: vec![p.frames(), p.bones(), 3], data: p.into_data() }),
                joints: None,
                audio: audio.to_string_lossy().into_owned(),
                tokens: c.tokens.clone(),
                speaker: c.speaker,
            }
        })
        .collect();
    save_clips(&records, &a.out)?;
    info!("generated {} clips", records.len());
    println!("{}", a.out.display());
    Ok(())
}
