//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use vade_core::attribution::GenerationConfig;
use vade_core::codec::{train_codec, Codec, CodecMode};
use vade_core::diffusion::{train, Checkpoint, Model, TrainData};
use vade_core::eval::evaluate_suite;
use vade_core::image::{read_image, Image};
use vade_core::phantom::{generate_dataset, manifest_path, DatasetManifest, LabeledImage, Split};
use vade_core::run::{
    replay_matches, run_attribution, InputRef, OutputRef, RunKind, RunLog, RunRecord,
};
use vade_core::text::Vocab;

use crate::config::AppConfig;
use crate::{CheckpointArg, Cli, CliError, Command, GenerationArgs, SplitArg};

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::GenData { split } => gen_data(&cfg, split, &out("data")),
        Command::TrainCodec { data } => cmd_train_codec(&cfg, &data, &out("codec.json")),
        Command::Train { data, codec } => {
            cmd_train(&cfg, &data, codec.as_deref(), &out("model.ckpt"))
        }
        Command::Counterfactual { ckpt, gen } => {
            generate(&cfg, &ckpt, &gen, RunKind::Counterfactual, &out("out")).map(|_| ())
        }
        Command::Induce { ckpt, gen } => {
            generate(&cfg, &ckpt, &gen, RunKind::Induce, &out("out")).map(|_| ())
        }
        Command::Replay { ckpt, run_log, id } => replay(&ckpt, &run_log, id),
        Command::Evaluate {
            ckpt,
            data,
            feature_codec,
            max_per_class,
        } => evaluate(
            &cfg,
            &ckpt,
            &data,
            feature_codec.as_deref(),
            max_per_class,
            &out("report"),
        ),
        Command::Sweep { ckpt, gen } => sweep(&cfg, &ckpt, &gen, &out("sweep")),
        Command::Serve {
            ckpt,
            data,
            port,
            run_log,
        } => {
            let mut serve = cfg.serve.clone();
            if let Some(p) = port {
                serve.port = p;
            }
            let log = run_log.unwrap_or_else(|| out("serve").join("runs.jsonl"));
            crate::server::serve_blocking(&ckpt.checkpoint, &data, &log, &serve)
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

pub fn gen_data(cfg: &AppConfig, split: SplitArg, out: &Path) -> Result<(), CliError> {
    let (split, mix, seed) = match split {
        SplitArg::Train => (Split::Train, cfg.data.train_mix.clone(), cfg.seed),
        SplitArg::Test => (
            Split::Test,
            cfg.data.test_mix(),
            cfg.seed.wrapping_add(cfg.data.test_seed_offset),
        ),
    };
    let m = generate_dataset(&cfg.data.spec, &mix, out, seed, split)?;
    println!(
        "{}",
        json!({"manifest": out.join("manifest.json"), "entries": m.entries.len(), "hash": m.hash()})
    );
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledImage>, CliError> {
    let mpath = manifest_path(path);
    let manifest = DatasetManifest::read(&mpath)?;
    let root = mpath.parent().unwrap_or(Path::new("."));
    manifest.lint(root)?;
    Ok(manifest.load(root)?)
}

pub fn cmd_train_codec(cfg: &AppConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let items = load_dataset(data)?;
    let images: Vec<Image> = items.into_iter().map(|i| i.image).collect();
    let mut codec_cfg = cfg.codec.config.clone();
    codec_cfg.mode = CodecMode::Learned;
    let t = Instant::now();
    let (codec, trace) = train_codec(&images, codec_cfg, &cfg.codec.train)?;
    codec.save(out)?;
    let last = trace.iter().rev().take(50).map(|&v| v as f64).sum::<f64>()
        / trace.len().clamp(1, 50) as f64;
    println!(
        "{}",
        json!({"codec": out, "steps": trace.len(), "final_loss": last, "seconds": t.elapsed().as_secs_f64()})
    );
    Ok(())
}

pub fn cmd_train(
    cfg: &AppConfig,
    data: &Path,
    codec: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let items = load_dataset(data)?;
    let size = cfg.data.spec.image_size;
    let codec = match codec {
        Some(p) => Codec::load(p)?,
        None if cfg.codec.config.mode == CodecMode::Learned => {
            let images: Vec<Image> = items.iter().map(|i| i.image.clone()).collect();
            train_codec(&images, cfg.codec.config.clone(), &cfg.codec.train)?.0
        }
        None => Codec::identity(size),
    };
    let mut model = Model::new(cfg.model.clone(), Vocab::default(), codec)?;
    let data = TrainData::prepare(
        &model,
        items
            .iter()
            .map(|i| (i.class, &i.image, i.label_text.as_str())),
    )?;
    let t = Instant::now();
    let trace = train(&mut model, &data, &cfg.train, |step, total, loss| {
        if step % 100 == 0 || step == total {
            eprintln!(
                "step {step}/{total} loss {loss:.5} ({:.0}s)",
                t.elapsed().as_secs_f64()
            );
        }
    })?;
    let (head, tail) = trace.head_tail(100);
    let ckpt = Checkpoint {
        model,
        train: Some(cfg.train.clone()),
        trace: Some(trace),
    };
    ckpt.save(out)?;
    println!(
        "{}",
        json!({"checkpoint": out, "id": ckpt.id()?, "loss_head": head, "loss_tail": tail, "seconds": t.elapsed().as_secs_f64()})
    );
    Ok(())
}

fn load_checkpoint(ckpt: &CheckpointArg) -> Result<(Model, String), CliError> {
    let c = Checkpoint::load(&ckpt.checkpoint)?;
    let id = c.id()?;
    Ok((c.model, id))
}

fn generation_config(
    base: &GenerationConfig,
    gen: &GenerationArgs,
) -> Result<GenerationConfig, CliError> {
    let mut g = base.clone();
    if let Some(p) = &gen.prompt {
        g.prompt = p.clone();
    }
    if let Some(s) = gen.strength {
        g.strength = s;
    }
    if let Some(s) = gen.guidance {
        g.guidance = s;
    }
    if let Some(s) = gen.steps {
        g.steps = s;
    }
    if let Some(c) = &gen.control {
        g.control = Some(read_image(c)?);
    }
    Ok(g)
}

fn absolute(p: &Path) -> String {
    std::fs::canonicalize(p)
        .unwrap_or_else(|_| p.to_path_buf())
        .display()
        .to_string()
}

/// Runs one generation, writes its images under `out` and appends a record.
#[allow(clippy::too_many_arguments)]
fn generate_one(
    model: &Model,
    checkpoint_id: &str,
    kind: RunKind,
    image: &Image,
    input: &Path,
    gen: &GenerationArgs,
    cfg: &GenerationConfig,
    mask: Option<&Image>,
    out: &Path,
    log: &mut RunLog,
) -> Result<RunRecord, CliError> {
    let art = run_attribution(model, image, cfg, mask)?;
    std::fs::create_dir_all(out).map_err(data_err)?;
    let files = [
        (
            "counterfactual_png",
            "counterfactual.png",
            &art.counterfactual_png,
        ),
        ("vamap_png", "vamap.png", &art.vamap_png),
        ("overlay_png", "overlay.png", &art.overlay_png),
    ];
    let mut outputs = art.output_refs();
    for (name, file, bytes) in files {
        let p = out.join(file);
        std::fs::write(&p, bytes).map_err(data_err)?;
        if let Some(o) = outputs.iter_mut().find(|o| o.name == name) {
            o.path = Some(absolute(&p));
        }
    }
    let control = gen
        .control
        .as_ref()
        .zip(cfg.control.as_ref())
        .map(|(p, img)| InputRef {
            source: absolute(p),
            hash: img.content_hash(),
        });
    let record = RunRecord {
        run_id: 0,
        timestamp: 0,
        kind,
        config: GenerationConfig {
            control: None,
            ..cfg.clone()
        },
        input: InputRef {
            source: absolute(input),
            hash: image.content_hash(),
        },
        control,
        outputs,
        scores: art.scores(),
        checkpoint_id: checkpoint_id.into(),
    };
    Ok(log.append(record)?)
}

pub fn generate(
    cfg: &AppConfig,
    ckpt: &CheckpointArg,
    gen: &GenerationArgs,
    kind: RunKind,
    out: &Path,
) -> Result<RunRecord, CliError> {
    let (model, id) = load_checkpoint(ckpt)?;
    let base = if kind == RunKind::Induce {
        &cfg.induce
    } else {
        &cfg.generation
    };
    let g = generation_config(base, gen)?;
    let image = read_image(&gen.input)?;
    let mask = gen.mask.as_ref().map(read_image).transpose()?;
    let mut log = RunLog::open(
        &gen.run_log
            .clone()
            .unwrap_or_else(|| out.join("runs.jsonl")),
    )?;
    let rec = generate_one(
        &model,
        &id,
        kind,
        &image,
        &gen.input,
        gen,
        &g,
        mask.as_ref(),
        out,
        &mut log,
    )?;
    println!("{}", serde_json::to_string(&rec).map_err(data_err)?);
    Ok(rec)
}

pub fn replay(ckpt: &CheckpointArg, run_log: &Path, id: u64) -> Result<(), CliError> {
    let (model, ck_id) = load_checkpoint(ckpt)?;
    let log = RunLog::open(run_log)?;
    let rec = log
        .get(id)?
        .ok_or_else(|| CliError::Data(format!("no run {id} in {}", run_log.display())))?;
    if rec.checkpoint_id != ck_id {
        return Err(CliError::Data(format!(
            "run {id} used checkpoint {}, not {ck_id}",
            rec.checkpoint_id
        )));
    }
    let image = read_image(&rec.input.source)?;
    let control = rec
        .control
        .as_ref()
        .map(|c| read_image(&c.source))
        .transpose()?;
    let ok = replay_matches(&model, &rec, &image, control.as_ref())?;
    println!("{}", json!({"run_id": id, "matches": ok}));
    if ok {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "replay of run {id} produced different outputs"
        )))
    }
}

pub fn evaluate(
    cfg: &AppConfig,
    ckpt: &CheckpointArg,
    data: &Path,
    feature_codec: Option<&Path>,
    max_per_class: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let (model, id) = load_checkpoint(ckpt)?;
    let items = load_dataset(data)?;
    let features = match feature_codec {
        Some(p) => Some(Codec::load(p)?),
        None if model.codec.mode() == CodecMode::Learned => Some(model.codec.clone()),
        None => None,
    };
    let mut ec = cfg.eval.clone();
    if max_per_class.is_some() {
        ec.max_per_class = max_per_class;
    }
    let report = evaluate_suite(&model, &id, &items, &ec, features.as_ref(), |item| {
        eprintln!("{item}")
    })?;
    report.write(out)?;
    println!(
        "{}",
        json!({"report": out.join("report.json"), "csv": out.join("report.csv")})
    );
    Ok(())
}

pub fn sweep(
    cfg: &AppConfig,
    ckpt: &CheckpointArg,
    gen: &GenerationArgs,
    out: &Path,
) -> Result<(), CliError> {
    let (model, id) = load_checkpoint(ckpt)?;
    let base = generation_config(&cfg.generation, gen)?;
    let image = read_image(&gen.input)?;
    let mask = gen.mask.as_ref().map(read_image).transpose()?;
    let mut log = RunLog::open(
        &gen.run_log
            .clone()
            .unwrap_or_else(|| out.join("runs.jsonl")),
    )?;
    let mut n = 0;
    for &s in &cfg.sweep.strengths {
        for &g in &cfg.sweep.guidances {
            let c = GenerationConfig {
                strength: s,
                guidance: g,
                ..base.clone()
            };
            let dir = out.join(format!("s{s}_g{g}"));
            let rec = generate_one(
                &model,
                &id,
                RunKind::Counterfactual,
                &image,
                &gen.input,
                gen,
                &c,
                mask.as_ref(),
                &dir,
                &mut log,
            )?;
            println!("{}", serde_json::to_string(&rec).map_err(data_err)?);
            n += 1;
        }
    }
    eprintln!("{n} sweep records in {}", log.path().display());
    Ok(())
}

/// Output reference by name, for callers inspecting records.
pub fn output<'a>(rec: &'a RunRecord, name: &str) -> Option<&'a OutputRef> {
    rec.outputs.iter().find(|o| o.name == name)
}
