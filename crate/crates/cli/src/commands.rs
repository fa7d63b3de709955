use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use textped_core::attention::AttentionBlob;
use textped_core::checkpoint::{load_checkpoint, save_checkpoint};
use textped_core::data::{ingest_dataset, make_synthetic_dataset, tensor_to_image};
use textped_core::inspect::{heatmap, inspect_attention};
use textped_core::metrics::{
    detect_keypoints, inception_score, read_detections, write_detections, BandLayoutDetector,
    DetectionRecord, InceptionSummary, KeypointDetector, KeypointSet, PoseReport,
};
use textped_core::train::step_seed;
use textped_core::{
    AblationFlags, Error, ModelConfig, Profile, Result, SyntheticSpec, TrainConfig, TrainState, TrainingSet,
};

use crate::{AblateArgs, Cli, Command, Common, EvaluateArgs, GenerateArgs, InspectArgs, SyntheticArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let out = output_dir(&cli.common, &cli.command);
    match &cli.command {
        Command::Train(args) => train(&cli.common, args, &out),
        Command::Generate(args) => generate(&cli.common, args, &out),
        Command::Evaluate(args) => evaluate(args, &out),
        Command::InspectAttention(args) => inspect(&cli.common, args, &out),
        Command::MakeSynthetic(args) => make_synthetic(&cli.common, args, &out),
        Command::Ablate(args) => ablate(&cli.common, args, &out),
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Train(_) => "train",
        Command::Generate(_) => "generate",
        Command::Evaluate(_) => "evaluate",
        Command::InspectAttention(_) => "inspect-attention",
        Command::MakeSynthetic(_) => "make-synthetic",
        Command::Ablate(_) => "ablate",
    }
}

fn output_dir(common: &Common, command: &Command) -> PathBuf {
    match &common.out {
        Some(p) => p.clone(),
        None => {
            let root = std::env::var_os("TEXTPED_OUT").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(command_name(command))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Config file (or profile defaults) with command-line overrides applied.
fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::for_profile(common.profile.unwrap_or(Profile::Tiny)),
    };
    if let Some(p) = common.profile {
        cfg.profile = p;
        cfg.model = ModelConfig::for_profile(p);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for switch in &common.ablate {
        cfg.ablation.disable(switch)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// JSON-lines writer that flushes every record.
struct JsonLines(BufWriter<File>);

impl JsonLines {
    fn create(path: &Path, append: bool) -> Result<Self> {
        let f = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self(BufWriter::new(f)))
    }

    fn write(&mut self, value: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.0, value)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    config_hash: String,
    #[serde(flatten)]
    log: &'a textped_core::StepLog,
}

/// Runs pre-training and adversarial training up to `cfg.steps`, writing
/// logs and checkpoints under `out`. Returns the final state.
fn train_run(cfg: TrainConfig, data_path: &Path, resume: Option<&Path>, out: &Path) -> Result<TrainState> {
    create_dir(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let manifest = ingest_dataset(data_path)?;
    let mut state = match resume {
        Some(p) => {
            let mut s = load_checkpoint(p, Some(&cfg))?;
            s.config = cfg.clone();
            s
        }
        None => TrainState::new(cfg.clone(), manifest.vocabulary())?,
    };
    let data = TrainingSet::load(&manifest, &state.model.vocab, &cfg.model)?;
    let hash = format!("{:016x}", cfg.hash());
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let resuming = resume.is_some();
    let mut pre_log = JsonLines::create(&out.join("pretrain.jsonl"), resuming)?;
    while !state.pretraining_done() {
        let batch = state.next_batch(&data)?;
        pre_log.write(&state.pretrain_step(&batch)?)?;
    }
    let mut metrics = JsonLines::create(&out.join("metrics.jsonl"), resuming)?;
    while state.step < cfg.steps {
        let batch = state.next_batch(&data)?;
        let log = state.train_step(&batch)?;
        metrics.write(&MetricsLine { config_hash: hash.clone(), log: &log })?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            save_checkpoint(&state, &ckpt_dir.join(format!("step{:06}.ckpt", state.step)))?;
        }
    }
    save_checkpoint(&state, &out.join("final.ckpt"))?;
    Ok(state)
}

fn train(common: &Common, args: &TrainArgs, out: &Path) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(p) = args.pretrain_steps {
        cfg.pretrain_steps = p;
    }
    if let Some(c) = args.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    cfg.validate()?;
    let state = train_run(cfg, &args.data, args.resume.as_deref(), out)?;
    eprintln!("trained {} steps; checkpoint at {}", state.step, out.join("final.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct GeneratedEntry {
    caption: String,
    caption_index: usize,
    sample: usize,
    seed: u64,
    files: Vec<String>,
}

#[derive(Serialize)]
struct GenerateIndex {
    checkpoint: String,
    seed: u64,
    unknown_tokens: usize,
    images: Vec<GeneratedEntry>,
}

fn read_captions(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let captions: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if captions.is_empty() {
        return Err(Error::input(format!("{} holds no captions", path.display())));
    }
    Ok(captions)
}

fn generate(common: &Common, args: &GenerateArgs, out: &Path) -> Result<()> {
    if args.count == 0 {
        return Err(Error::input("--count must be at least 1"));
    }
    let state = load_checkpoint(&args.checkpoint, None)?;
    let model = &state.model;
    let captions = read_captions(&args.captions)?;
    let seed = common.seed.unwrap_or(0);
    let images_dir = out.join("images");
    create_dir(&images_dir)?;
    let mut index = GenerateIndex {
        checkpoint: args.checkpoint.display().to_string(),
        seed,
        unknown_tokens: 0,
        images: Vec::new(),
    };
    for (ci, caption) in captions.iter().enumerate() {
        let (seqs, unknown) = model.tokenize(&vec![caption.clone(); args.count]);
        index.unknown_tokens += unknown / args.count;
        let seeds: Vec<u64> = (0..args.count)
            .map(|j| step_seed(seed, "generate", (ci * args.count + j) as u64))
            .collect();
        let output = model.generate(&seqs, &seeds)?;
        for (j, &s) in seeds.iter().enumerate() {
            let mut files = Vec::with_capacity(output.bundles.len());
            for bundle in &output.bundles {
                let name = format!("c{ci:03}_s{j:02}_stage{}.png", bundle.stage);
                tensor_to_image(&bundle.image.get(j)?)?.save(images_dir.join(&name))?;
                files.push(format!("images/{name}"));
            }
            index.images.push(GeneratedEntry {
                caption: caption.clone(),
                caption_index: ci,
                sample: j,
                seed: s,
                files,
            });
        }
    }
    if index.unknown_tokens > 0 {
        eprintln!("warning: {} caption tokens are not in the vocabulary", index.unknown_tokens);
    }
    write_json(&out.join("index.json"), &index)?;
    eprintln!("wrote {} images to {}", index.images.len() * model.config.stages, images_dir.display());
    Ok(())
}

fn detector(name: &str) -> Result<Box<dyn KeypointDetector>> {
    match name {
        "synthetic" => Ok(Box::new(BandLayoutDetector::default())),
        other => Err(Error::input(format!("unknown detector `{other}` (available: synthetic)"))),
    }
}

fn read_class_probs(path: &Path) -> Result<Vec<Vec<f64>>> {
    let f = File::open(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

fn evaluate(args: &EvaluateArgs, out: &Path) -> Result<()> {
    create_dir(out)?;
    let sets: Vec<KeypointSet> = if let Some(path) = &args.detections {
        let f = File::open(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        read_detections(BufReader::new(f))?
            .iter()
            .map(DetectionRecord::keypoint_set)
            .collect::<Result<_>>()?
    } else {
        let dir = args.images.as_ref().expect("clap requires images or detections");
        let det = detector(&args.detector)?;
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::input(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .filter(|p| {
                args.filter
                    .as_ref()
                    .is_none_or(|f| p.file_name().is_some_and(|n| n.to_string_lossy().contains(f.as_str())))
            })
            .collect();
        paths.sort();
        let mut records = Vec::with_capacity(paths.len());
        let mut sets = Vec::with_capacity(paths.len());
        for p in &paths {
            let id = p.file_name().unwrap().to_string_lossy().to_string();
            let img = image::open(p)?.to_rgb8();
            let set = detect_keypoints(&img, &id, det.as_ref())?;
            records.push(DetectionRecord::new(id, &set));
            sets.push(set);
        }
        write_detections(BufWriter::new(File::create(out.join("detections.jsonl"))?), &records)?;
        sets
    };
    if sets.is_empty() {
        return Err(Error::input("no images to evaluate"));
    }
    let mut report = PoseReport::from_detections(&sets, args.b_max)?;
    if let Some(path) = &args.class_probs {
        let probs = read_class_probs(path)?;
        let splits = args.splits.clamp(1, probs.len().max(1));
        let (mean, std) = inception_score(&probs, splits)?;
        report.inception_score = Some(InceptionSummary { mean, std, splits });
    }
    let report_path = args.report.clone().unwrap_or_else(|| out.join("report.json"));
    write_json(&report_path, &report)?;
    print!("{report}");
    Ok(())
}

fn sanitize(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn inspect(common: &Common, args: &InspectArgs, out: &Path) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint, None)?;
    let report = inspect_attention(&state.model, &args.caption, common.seed.unwrap_or(0))?;
    if report.unknown_tokens > 0 {
        eprintln!("warning: {} caption tokens are not in the vocabulary", report.unknown_tokens);
    }
    create_dir(out)?;
    let size = state.model.config.final_resolution() as u32;
    for stage in &report.stages {
        let blob = AttentionBlob::from_rows(&stage.weights)?;
        blob.write_to(BufWriter::new(File::create(out.join(format!("stage{}.attn", stage.stage)))?))?;
        for (k, token) in report.tokens.iter().enumerate() {
            let name = format!("stage{}_word{k:02}_{}.png", stage.stage, sanitize(token));
            heatmap(&stage.word_map(k), stage.grid, size)?.save(out.join(name))?;
        }
    }
    write_json(&out.join("attention.json"), &report)?;
    for stage in &report.stages {
        let words: Vec<String> = stage.top_words.iter().map(|(w, v)| format!("{w} ({v:.2})")).collect();
        println!("stage {}: {}", stage.stage, words.join(", "));
    }
    Ok(())
}

fn make_synthetic(common: &Common, args: &SyntheticArgs, out: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let resolution = args.resolution.unwrap_or_else(|| cfg.model.final_resolution());
    let spec = SyntheticSpec::new(args.count, resolution);
    create_dir(out)?;
    let manifest = make_synthetic_dataset(&spec, cfg.seed, out)?;
    eprintln!("wrote {} images and {}", manifest.records.len(), out.join("manifest.json").display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    label: String,
    flags: AblationFlags,
    steps: u64,
    final_disc_total: Option<f64>,
    final_gen_total: Option<f64>,
    stage0_auc: f64,
}

fn ablate(common: &Common, args: &AblateArgs, out: &Path) -> Result<()> {
    if !common.ablate.is_empty() {
        return Err(Error::input("ablate runs every configuration; drop --ablate"));
    }
    let mut base = resolve_config(common)?;
    if let Some(s) = args.steps {
        base.steps = s;
    }
    if let Some(b) = args.batch_size {
        base.batch_size = b;
    }
    if let Some(p) = args.pretrain_steps {
        base.pretrain_steps = p;
    }
    base.validate()?;
    let mut rows = Vec::new();
    for (label, flags) in AblationFlags::table() {
        let cfg = TrainConfig { ablation: flags, ..base.clone() };
        let dir = out.join(label.replace('+', "_"));
        let state = train_run(cfg, &args.data, None, &dir)?;
        let last = fs::read_to_string(dir.join("metrics.jsonl"))?
            .lines()
            .last()
            .map(serde_json::from_str::<serde_json::Value>)
            .transpose()?;
        let manifest = ingest_dataset(&args.data)?;
        let data = TrainingSet::load(&manifest, &state.model.vocab, &state.config.model)?;
        rows.push(AblationRow {
            label: label.to_string(),
            flags,
            steps: state.step,
            final_disc_total: last.as_ref().and_then(|v| v["disc_total"].as_f64()),
            final_gen_total: last.as_ref().and_then(|v| v["gen"]["total"].as_f64()),
            stage0_auc: state.discriminator_auc(&data, 0, 2)?,
        });
        eprintln!("{label}: done");
    }
    write_json(&out.join("summary.json"), &rows)?;
    for r in &rows {
        println!(
            "{:<18} disc {:>8.4} gen {:>8.4} auc {:.3}",
            r.label,
            r.final_disc_total.unwrap_or(f64::NAN),
            r.final_gen_total.unwrap_or(f64::NAN),
            r.stage0_auc
        );
    }
    Ok(())
}
