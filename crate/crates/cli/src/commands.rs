//! Subcommand implementations. Each writes a run directory holding the
//! resolved `config.toml`, a `manifest.json` (command, seed, format
//! versions, full training configuration) and a `run.log`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use duofield::io::{export_ground_truth, write_decomposition, write_json};
use duofield::metrics::{appearance_row, evaluate, MetricsReport};
use duofield::pipeline::render_frame;
use duofield::train::{Checkpoint, Toggle, TrainConfig, Trainer, CHECKPOINT_VERSION};
use duofield::{Error, Result};

use crate::config::{Flags, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.duoc";
pub const LOG_FILE: &str = "run.log";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Version tags of every file format a run directory may contain.
#[derive(Debug, Serialize)]
struct Formats {
    checkpoint: String,
    float_map: &'static str,
    run_log: &'static str,
    metrics_csv: &'static str,
    ablation_csv: &'static str,
}

impl Formats {
    fn current() -> Self {
        Formats {
            checkpoint: format!("DUOC v{CHECKPOINT_VERSION}"),
            float_map: "DUOF v1",
            run_log: "json-lines v1",
            metrics_csv: "v1",
            ablation_csv: "v1",
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    seed: u64,
    formats: Formats,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_config: Option<&'a TrainConfig>,
}

/// A run directory with its provenance files written and its log open.
struct RunDir {
    path: PathBuf,
    log: BufWriter<File>,
}

impl RunDir {
    fn create(
        path: &Path,
        command: &str,
        rc: &RunConfig,
        checkpoint: Option<&Path>,
        train_config: Option<&TrainConfig>,
    ) -> Result<Self> {
        fs::create_dir_all(path)?;
        let rc = RunConfig { out: path.to_path_buf(), ..rc.clone() };
        fs::write(path.join("config.toml"), rc.to_toml())?;
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: rc.seed,
            formats: Formats::current(),
            checkpoint,
            train_config,
        };
        write_json(&path.join("manifest.json"), &manifest)?;
        let log = BufWriter::new(File::create(path.join(LOG_FILE))?);
        Ok(RunDir { path: path.to_path_buf(), log })
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.log, "{text}")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.log.flush()?;
        Ok(())
    }
}

/// Accepts a checkpoint file or a run directory containing one.
fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Scene and seed come from the checkpoint; explicit flags must agree.
fn load_checkpoint(path: &Path, flags: &Flags, rc: &mut RunConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(&checkpoint_path(path))?;
    if flags.scene.as_ref().is_some_and(|s| *s != ckpt.config.scene) {
        return Err(Error::Config(format!("checkpoint was trained on scene `{}`", ckpt.config.scene)));
    }
    if flags.seed.is_some_and(|s| s != ckpt.config.seed) {
        return Err(Error::Config(format!("checkpoint was trained with seed {}", ckpt.config.seed)));
    }
    rc.scene = ckpt.config.scene.clone();
    rc.seed = ckpt.config.seed;
    Ok(ckpt)
}

pub fn generate(rc: &RunConfig) -> Result<()> {
    let cfg = rc.train_config(&[])?;
    let mut run = RunDir::create(&rc.out, "generate", rc, None, Some(&cfg))?;
    let scene = cfg.generate_scene()?;
    let files = export_ground_truth(&scene, &run.path.join("frames"))?;
    for f in &files {
        run.line(&f.display().to_string())?;
    }
    run.finish()?;
    eprintln!("wrote {} frames of `{}` to {}", scene.num_frames(), scene.name, rc.out.display());
    Ok(())
}

/// Trains `cfg` into `dir`, logging one JSON line per step.
fn train_into(dir: &Path, command: &str, rc: &RunConfig, cfg: TrainConfig) -> Result<Checkpoint> {
    let mut run = RunDir::create(dir, command, rc, None, Some(&cfg))?;
    let mut trainer = Trainer::new(cfg)?;
    let total = trainer.total_steps();
    let result = trainer.run_until(u64::MAX, |rec| {
        run.line(&rec.to_json_line())?;
        if (rec.step + 1) % 100 == 0 || rec.step + 1 == total {
            eprintln!("step {}/{total} {} loss {:.5}", rec.step + 1, rec.phase.name(), rec.report.total);
        }
        Ok(())
    });
    run.finish()?;
    result?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    Ok(ckpt)
}

pub fn train(rc: &RunConfig) -> Result<()> {
    let cfg = rc.train_config(&rc.toggles()?)?;
    train_into(&rc.out, "train", rc, cfg)?;
    eprintln!("checkpoint written to {}", rc.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn decompose(checkpoint: &Path, flags: &Flags, mut rc: RunConfig) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint, flags, &mut rc)?;
    if flags.out.is_none() && !has_file_out(flags)? {
        rc.out = checkpoint_path(checkpoint).with_file_name("decomposition");
    }
    let cfg = &ckpt.config;
    let scene = cfg.generate_scene()?;
    let frames = match rc.frame {
        Some(f) if f >= scene.num_frames() => {
            return Err(Error::Argument(format!("frame {f} out of range (scene has {})", scene.num_frames())));
        }
        Some(f) => vec![f],
        None => (0..scene.num_frames()).collect(),
    };
    let model = ckpt.model()?;
    let train = cfg.train_frames(scene.num_frames());
    let mut run = RunDir::create(&rc.out, "decompose", &rc, Some(checkpoint), Some(cfg))?;
    for frame in frames {
        let render = render_frame(&model, &scene, frame, appearance_row(frame, &train), &cfg.sampling)?;
        for f in write_decomposition(&render, rc.threshold, &run.path)? {
            run.line(&f.display().to_string())?;
        }
    }
    run.finish()?;
    eprintln!("decomposition written to {}", rc.out.display());
    Ok(())
}

fn has_file_out(flags: &Flags) -> Result<bool> {
    Ok(match &flags.config {
        Some(p) => crate::config::FileConfig::load(p)?.out.is_some(),
        None => false,
    })
}

pub fn evaluate_cmd(checkpoint: &Path, flags: &Flags, mut rc: RunConfig) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint, flags, &mut rc)?;
    let split = rc.split()?;
    if flags.out.is_none() && !has_file_out(flags)? {
        rc.out = checkpoint_path(checkpoint).with_file_name(format!("eval-{}", split.name()));
    }
    let report = evaluate(&ckpt, split, rc.threshold)?;
    let mut run = RunDir::create(&rc.out, "evaluate", &rc, Some(checkpoint), Some(&ckpt.config))?;
    report.write(&run.path)?;
    run.line(&summary(&report))?;
    run.finish()?;
    println!("{}", summary(&report));
    Ok(())
}

fn summary(r: &MetricsReport) -> String {
    format!(
        "{} {}: PSNR {:.2} SSIM {:.3} | static (motion masked) PSNR {:.2} SSIM {:.3} | motion IoU {:.3} recall {:.3} F1 {:.3}",
        r.scene,
        r.split.name(),
        r.psnr_composed,
        r.ssim_composed,
        r.psnr_static_masked,
        r.ssim_static_masked,
        r.iou,
        r.recall,
        r.f1
    )
}

/// Column order of the ablation CSV; `d_` columns hold ablated minus full.
pub const ABLATION_COLUMNS: [&str; 13] = [
    "run",
    "psnr_static_masked",
    "ssim_static_masked",
    "psnr_composed",
    "ssim_composed",
    "iou",
    "f1",
    "d_psnr_static_masked",
    "d_ssim_static_masked",
    "d_psnr_composed",
    "d_ssim_composed",
    "d_iou",
    "d_f1",
];

fn scores(r: &MetricsReport) -> [f64; 6] {
    [r.psnr_static_masked, r.ssim_static_masked, r.psnr_composed, r.ssim_composed, r.iou, r.f1]
}

pub fn ablation_csv(full: &MetricsReport, ablated: &[(Toggle, MetricsReport)]) -> String {
    let mut s = ABLATION_COLUMNS.join(",");
    s.push('\n');
    let base = scores(full);
    let rows = std::iter::once(("full".to_string(), full)).chain(ablated.iter().map(|(t, r)| (format!("w/o {}", t.name()), r)));
    for (name, r) in rows {
        let v = scores(r);
        let _ = write!(s, "{name}");
        for x in v {
            let _ = write!(s, ",{x:.6}");
        }
        for (x, b) in v.iter().zip(base) {
            let _ = write!(s, ",{:.6}", x - b);
        }
        s.push('\n');
    }
    s
}

pub fn ablate(rc: &RunConfig) -> Result<()> {
    let mut toggles = rc.toggles()?;
    if toggles.is_empty() {
        toggles = Toggle::ALL.to_vec();
    }
    let split = rc.split()?;
    let mut run = RunDir::create(&rc.out, "ablate", rc, None, Some(&rc.train_config(&[])?))?;
    let trained = |name: &str, disabled: &[Toggle], run: &mut RunDir| -> Result<MetricsReport> {
        let dir = run.path.join(name);
        eprintln!("training {name}");
        let ckpt = train_into(&dir, "train", &RunConfig { toggle: Vec::new(), ..rc.clone() }, rc.train_config(disabled)?)?;
        let report = evaluate(&ckpt, split, rc.threshold)?;
        report.write(&dir)?;
        run.line(&format!("{name}: {}", summary(&report)))?;
        Ok(report)
    };
    let full = trained("full", &[], &mut run)?;
    let mut ablated = Vec::new();
    for t in toggles {
        ablated.push((t, trained(&format!("no-{}", t.name()), &[t], &mut run)?));
    }
    let csv = ablation_csv(&full, &ablated);
    fs::write(run.path.join(ABLATION_FILE), &csv)?;
    run.finish()?;
    print!("{csv}");
    Ok(())
}
