use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use refvos::ablation::{ablation_csv, run_ablation, variant_config};
use refvos::augmentation::{
    augment_dataset, ChatServiceConfig, CodebookFeaturizer, EmbedServiceConfig, EvidenceSource, MockChat, MockEmbedder,
    OpenAiChat, OpenAiEmbedder,
};
use refvos::metrics::{evaluate_model, DEFAULT_BOUNDARY_TOL};
use refvos::numeric::GradCheckOptions;
use refvos::schema::{load_jsonl, ClipSample, DatasetManifest, Polarity, Record};
use refvos::synth::{featurize, write_dataset, WorldSpec};
use refvos::trainer::{metrics_csv, train, Checkpoint, EpochRow, TrainConfig, TrainOptions, METRICS_HEADER};
use refvos::verify::run_suite;
use serde_json::json;

use crate::plots::{ablation_svg, loss_curve_svg};
use crate::{
    AblateArgs, AugmentArgs, Cli, Command, EvalArgs, Failure, Global, GradcheckArgs, InferArgs, SynthArgs, TrainArgs,
};

type Outcome = Result<String, Failure>;

const DEFAULT_SYNTH_SEED: u64 = 7;

pub fn run(cli: &Cli) -> Outcome {
    let g = &cli.global;
    if g.workers == 0 {
        return Err(Failure::Usage("--workers must be >= 1".into()));
    }
    match &cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Augment(a) => augment(g, a),
        Command::Train(a) => train_cmd(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Infer(a) => infer(g, a),
        Command::Gradcheck(a) => gradcheck(g, a),
        Command::Ablate(a) => ablate(g, a),
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    DatasetManifest::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// The config file (or defaults), then `--set` overrides, then `--seed`.
fn train_config(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut table: toml::Table = match file {
        Some(p) => read_toml(p)?,
        None => toml::Table::new(),
    };
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        let key = key.trim();
        let parsed: toml::Table = toml::from_str(&format!("v = {}", value.trim()))
            .unwrap_or_else(|_| toml::Table::from_iter([("v".to_string(), toml::Value::String(value.trim().to_string()))]));
        table.insert(key.to_string(), parsed["v"].clone());
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    TrainConfig::from_toml(&toml::to_string(&table).map_err(usage)?).map_err(usage)
}

fn create_out(g: &Global) -> Result<(), Failure> {
    fs::create_dir_all(&g.out).map_err(|e| Failure::Runtime(format!("{}: {e}", g.out.display())))
}

fn synth(g: &Global, a: &SynthArgs) -> Outcome {
    let spec: WorldSpec = match &a.spec {
        Some(p) => read_toml(p)?,
        None => WorldSpec::default(),
    };
    spec.validate().map_err(usage)?;
    if a.n_train == 0 || a.n_test == 0 {
        return Err(usage("--n-train and --n-test must be >= 1"));
    }
    create_out(g)?;
    let seed = g.seed.unwrap_or(DEFAULT_SYNTH_SEED);
    write_dataset(&spec, a.n_train, a.n_test, seed, &g.out, g.workers)?;
    Ok(format!(
        "synth: wrote {} files ({} train, {} test clips, manifest) to {}",
        a.n_train + a.n_test + 1,
        a.n_train,
        a.n_test,
        g.out.display()
    ))
}

fn augment(g: &Global, a: &AugmentArgs) -> Outcome {
    let manifest = load_manifest(&a.manifest)?;
    let world = manifest
        .world
        .clone()
        .ok_or_else(|| usage("the manifest records no world spec, so expressions cannot be featurized"))?;
    let featurizer = CodebookFeaturizer { codebook: world.codebook(), n_l: world.n_l };
    if a.p == 0 || a.n == 0 {
        return Err(usage("--p and --n must be >= 1"));
    }
    create_out(g)?;
    let out = if a.mock {
        let embed = MockEmbedder { codebook: world.codebook() };
        augment_dataset(&manifest, &g.out, &MockChat, &embed, &featurizer, EvidenceSource::ClipEmbedding, (a.p, a.n), g.workers)?
    } else {
        let (Some(chat_path), Some(embed_path)) = (&a.chat_cfg, &a.embed_cfg) else {
            return Err(usage("--chat-cfg and --embed-cfg are required without --mock"));
        };
        let chat_cfg: ChatServiceConfig = read_toml(chat_path)?;
        let embed_cfg: EmbedServiceConfig = read_toml(embed_path)?;
        chat_cfg.validate().map_err(usage)?;
        embed_cfg.validate().map_err(usage)?;
        let parallelism = chat_cfg.parallelism;
        let chat = OpenAiChat::new(chat_cfg)?;
        let embed = OpenAiEmbedder::new(embed_cfg)?;
        augment_dataset(&manifest, &g.out, &chat, &embed, &featurizer, EvidenceSource::OriginalText, (a.p, a.n), parallelism)?
    };
    let clips: usize = out.splits.iter().map(|s| s.entries.len()).sum();
    Ok(format!("augment: wrote {clips} augmented clips and candidates.jsonl to {}", g.out.display()))
}

fn train_cmd(g: &Global, a: &TrainArgs) -> Outcome {
    let cfg = train_config(a.config.as_deref(), &a.overrides, g.seed)?;
    let manifest = load_manifest(&a.manifest)?;
    let train_data = manifest.load_split("train")?;
    let val_data = manifest.load_split(&a.val_split)?;
    let start = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    create_out(g)?;
    let ck_path = g.out.join("checkpoint.json");
    let csv_path = g.out.join("metrics.csv");
    let mut header = format!("{METRICS_HEADER}\n");
    if let Some(ck) = &start {
        header = metrics_csv(&ck.history);
    }
    fs::write(&csv_path, header)?;
    let append = |row: &EpochRow| {
        let line = format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch, row.l_cls, row.l_seg, row.l_tmp, row.total, row.val_miou, row.val_jf
        );
        if let Err(e) = fs::OpenOptions::new().append(true).open(&csv_path).and_then(|mut f| f.write_all(line.as_bytes())) {
            log::warn!("could not append to {}: {e}", csv_path.display());
        }
    };
    let opts = TrainOptions { workers: g.workers, stop_after: None, checkpoint_path: Some(&ck_path), on_epoch: Some(&append) };
    let ck = train(&cfg, &train_data, &val_data, start, &opts)?;
    fs::write(&csv_path, metrics_csv(&ck.history))?;
    let svg_path = g.out.join("loss_curve.svg");
    fs::write(&svg_path, loss_curve_svg(&ck.history).map_err(|e| Failure::Runtime(e.to_string()))?)?;
    let last = ck.history.last();
    Ok(format!(
        "train: {} epochs, final val Mean IoU {:.4}, J&F {:.4}; wrote {}, {}, {}",
        ck.epoch,
        last.map_or(f64::NAN, |r| r.val_miou),
        last.map_or(f64::NAN, |r| r.val_jf),
        ck_path.display(),
        csv_path.display(),
        svg_path.display()
    ))
}

fn eval(g: &Global, a: &EvalArgs) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let data = load_manifest(&a.manifest)?.load_split(&a.split)?;
    let report = evaluate_model(&model, &ck.params, &data, DEFAULT_BOUNDARY_TOL, g.workers)?;
    create_out(g)?;
    let path = g.out.join("eval.json");
    report.write(&path)?;
    Ok(format!(
        "eval: {} clips, Overall IoU {:.4}, Mean IoU {:.4}, J {:.4}, F {:.4}, J&F {:.4}; wrote {}",
        report.n_clips,
        report.overall_iou,
        report.mean_iou,
        report.j,
        report.f,
        report.j_and_f,
        path.display()
    ))
}

/// Rows of `#` (object) and `.` (background).
pub fn ascii_grid(mask: &[bool], w: usize) -> String {
    mask.chunks(w).map(|row| row.iter().map(|&b| if b { '#' } else { '.' }).collect::<String>() + "\n").collect()
}

fn infer(g: &Global, a: &InferArgs) -> Outcome {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let clip: ClipSample = load_jsonl::<Record>(&a.clip)?
        .into_iter()
        .find_map(|r| match r {
            Record::Clip(c) => Some(c),
            _ => None,
        })
        .ok_or_else(|| usage(format!("{} holds no clip record", a.clip.display())))?;
    let world = match &a.manifest {
        Some(p) => load_manifest(p)?.world.ok_or_else(|| usage("the manifest records no world spec"))?,
        None => WorldSpec::default(),
    };
    if clip.c != ck.c || world.c != ck.c {
        return Err(usage(format!("feature width mismatch: checkpoint C={}, clip C={}, world C={}", ck.c, clip.c, world.c)));
    }
    if a.expression.trim().is_empty() {
        return Err(usage("--expression must not be empty"));
    }
    let expr = featurize(&a.expression, Polarity::Original, 1.0, &world.codebook(), world.n_l);
    let masks = ck.model()?.infer_masks(&ck.params, &clip, &expr)?;
    create_out(g)?;
    let path = g.out.join("masks.jsonl");
    let mut text = String::new();
    for (t, m) in masks.iter().enumerate() {
        let bits: Vec<u8> = m.iter().map(|&b| b as u8).collect();
        let line = json!({"clip_id": clip.clip_id, "frame": t, "grid_h": clip.grid_h, "grid_w": clip.grid_w, "mask": bits});
        let _ = writeln!(text, "{line}");
    }
    fs::write(&path, text)?;
    if a.ascii {
        for (t, m) in masks.iter().enumerate() {
            println!("frame {t}:");
            print!("{}", ascii_grid(m, clip.grid_w));
        }
    }
    let fg: usize = masks.iter().map(|m| m.iter().filter(|b| **b).count()).sum();
    Ok(format!("infer: {} frames, {fg} foreground patches; wrote {}", masks.len(), path.display()))
}

fn gradcheck(g: &Global, a: &GradcheckArgs) -> Outcome {
    if !(a.tol > 0.0 && a.step > 0.0) || a.instances == 0 {
        return Err(usage("--tol and --step must be positive and --instances >= 1"));
    }
    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tol,
        analytic_scale: if a.inject_gradient_error { 1.01 } else { 1.0 },
    };
    let rows = run_suite(g.seed.unwrap_or(0), a.instances, a.network_instances, opts)?;
    println!("{:<10} {:>9} {:>15} {:>14} {:>14}  status", "term", "instances", "criterion", "max_rel_error", "normwise");
    for r in &rows {
        println!(
            "{:<10} {:>9} {:>15} {:>14.3e} {:>14.3e}  {}",
            r.term,
            r.instances,
            r.criterion,
            r.max_rel_error,
            r.normwise_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.term.as_str()).collect();
    if failed.is_empty() {
        Ok(format!("gradcheck: all {} terms within tolerance {:e}", rows.len(), a.tol))
    } else {
        Err(Failure::Verification(format!("gradcheck failed for: {}", failed.join(", "))))
    }
}

fn ablate(g: &Global, a: &AblateArgs) -> Outcome {
    let base = train_config(a.config.as_deref(), &a.overrides, g.seed)?;
    for name in &a.variants {
        variant_config(&base, name).map_err(usage)?;
    }
    let manifest = load_manifest(&a.manifest)?;
    let train_data = manifest.load_split("train")?;
    let val_data = manifest.load_split(&a.val_split)?;
    let opts = TrainOptions { workers: g.workers, ..Default::default() };
    let rows = run_ablation(&base, &a.variants, &train_data, &val_data, &opts)?;
    create_out(g)?;
    let csv = g.out.join("ablation.csv");
    let svg = g.out.join("ablation.svg");
    fs::write(&csv, ablation_csv(&rows))?;
    fs::write(&svg, ablation_svg(&rows).map_err(|e| Failure::Runtime(e.to_string()))?)?;
    Ok(format!("ablate: {} variants; wrote {} and {}", rows.len(), csv.display(), svg.display()))
}
