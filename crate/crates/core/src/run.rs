//! Command drivers shared by the command-line tool and the test harnesses.
//! Each one writes the standard output tree under `out`:
//! `config.resolved`, `metrics.csv`, `log.txt`, `checkpoints/`, `exports/`.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{build_dataset, format_manifest, write_cloud, CloudFormat, Dataset, ManifestEntry, Split};
use crate::error::{io_err, Error, Result};
use crate::folding::write_seed_csv;
use crate::model::{batch_tensor, Decoder};
use crate::report::MetricsTable;
use crate::train::{
    classify, evaluate_completion, evaluate_reconstruction, load_model, run_ablation, train, AblationReport,
    ClassificationReport, CompletionTable, Task,
};
use seedcloud_tensor::{Graph, Mode};

/// An output directory with its run log.
pub struct RunDir {
    pub root: PathBuf,
    log: File,
    quiet: bool,
}

impl RunDir {
    /// Creates `root` and writes the resolved configuration into it.
    pub fn create(root: &Path, cfg: &RunConfig, quiet: bool) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let resolved = root.join("config.resolved");
        fs::write(&resolved, cfg.to_toml()?).map_err(io_err(&resolved))?;
        let path = root.join("log.txt");
        let log = File::create(&path).map_err(io_err(&path))?;
        Ok(RunDir { root: root.to_path_buf(), log, quiet })
    }

    pub fn log(&mut self, line: &str) -> Result<()> {
        if !self.quiet {
            eprintln!("{line}");
        }
        writeln!(self.log, "{line}").map_err(io_err(self.root.join("log.txt")))
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, contents).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn exports(&self) -> Result<PathBuf> {
        let dir = self.root.join("exports");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    /// Prints a table to stdout unless quiet.
    pub fn show(&self, text: &str) {
        if !self.quiet {
            print!("{text}");
        }
    }
}

fn dataset(cfg: &RunConfig, dir: &mut RunDir) -> Result<Dataset> {
    let t = Instant::now();
    let data = build_dataset(&cfg.data, cfg.seed)?;
    let count = |s| data.indices(s).len();
    dir.log(&format!(
        "dataset: {} shapes, {} classes, train/val/test = {}/{}/{} ({:.1}s)",
        data.records.len(),
        data.class_names.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        t.elapsed().as_secs_f64()
    ))?;
    Ok(data)
}

/// Trains a reconstruction model and evaluates it on `cfg.eval.split`.
pub fn run_train(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<MetricsTable> {
    cfg.validate()?;
    let mut dir = RunDir::create(out, cfg, quiet)?;
    let data = dataset(cfg, &mut dir)?;
    let t = Instant::now();
    let ckpt = dir.checkpoints();
    let mut lines = Vec::new();
    let mut trained = train(cfg, &data, Task::Reconstruction, cfg.seed, Some(&ckpt), &mut |e| lines.push(e.line()))?;
    for l in &lines {
        dir.log(l)?;
    }
    dir.log(&format!("trained {} steps, best epoch {}, wall {:.1}s", trained.steps, trained.best_epoch, t.elapsed().as_secs_f64()))?;
    let table = evaluate_reconstruction(&mut trained.model, &data, cfg, trained.best_epoch)?;
    dir.write("metrics.csv", &table.to_csv())?;
    dir.show(&table.to_text());
    Ok(table)
}

/// Evaluates a saved checkpoint.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, quiet: bool) -> Result<MetricsTable> {
    cfg.validate()?;
    let mut dir = RunDir::create(out, cfg, quiet)?;
    let data = dataset(cfg, &mut dir)?;
    let (mut model, _) = load_model(checkpoint, Some(&cfg.model))?;
    let table = evaluate_reconstruction(&mut model, &data, cfg, 0)?;
    dir.write("metrics.csv", &table.to_csv())?;
    dir.show(&table.to_text());
    Ok(table)
}

/// Linear classification of codewords. Trains a reconstruction model first
/// unless a checkpoint is given.
pub fn run_classify(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path, quiet: bool) -> Result<ClassificationReport> {
    cfg.validate()?;
    let mut dir = RunDir::create(out, cfg, quiet)?;
    let data = dataset(cfg, &mut dir)?;
    let mut model = match checkpoint {
        Some(p) => load_model(p, Some(&cfg.model))?.0,
        None => {
            let ckpt = dir.checkpoints();
            let mut lines = Vec::new();
            let trained = train(cfg, &data, Task::Reconstruction, cfg.seed, Some(&ckpt), &mut |e| lines.push(e.line()))?;
            for l in &lines {
                dir.log(l)?;
            }
            trained.model
        }
    };
    let report = classify(&mut model, &data, cfg)?;
    dir.write("metrics.csv", &report.to_csv())?;
    dir.show(&report.to_text());
    Ok(report)
}

/// Trains a completion model on occluded inputs and tabulates it against the
/// resampled-input baseline.
pub fn run_complete(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<CompletionTable> {
    cfg.validate()?;
    if !(cfg.data.occlusion > 0.0) {
        return Err(Error::Config("completion needs data.occlusion > 0".into()));
    }
    let mut dir = RunDir::create(out, cfg, quiet)?;
    let data = dataset(cfg, &mut dir)?;
    let t = Instant::now();
    let ckpt = dir.checkpoints();
    let mut lines = Vec::new();
    let mut trained = train(cfg, &data, Task::Completion, cfg.seed, Some(&ckpt), &mut |e| lines.push(e.line()))?;
    for l in &lines {
        dir.log(l)?;
    }
    dir.log(&format!("trained {} steps, wall {:.1}s", trained.steps, t.elapsed().as_secs_f64()))?;
    let table = evaluate_completion(&mut trained.model, &data, cfg)?;
    dir.write("metrics.csv", &table.to_csv())?;
    dir.show(&table.to_text());
    Ok(table)
}

/// Trains every ablation cell over the replicate seeds.
pub fn run_ablate(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<AblationReport> {
    cfg.validate()?;
    let mut dir = RunDir::create(out, cfg, quiet)?;
    let data = dataset(cfg, &mut dir)?;
    let t = Instant::now();
    let mut lines = Vec::new();
    let report = run_ablation(cfg, &data, &mut |l| {
        if !quiet {
            eprintln!("{l}");
        }
        lines.push(l.to_string());
    })?;
    for l in &lines {
        writeln!(dir.log, "{l}").map_err(io_err(dir.root.join("log.txt")))?;
    }
    for c in report.ordering() {
        dir.log(&format!("order {} >= {}: {}", c.earlier, c.later, if c.holds { "holds" } else { "violated" }))?;
    }
    dir.log(&format!("wall {:.1}s", t.elapsed().as_secs_f64()))?;
    dir.write("metrics.csv", &report.to_csv())?;
    dir.show(&report.to_text());
    Ok(report)
}

/// Writes input and reconstruction clouds of the named shapes, plus the seeds
/// of folding decoders as CSV. Without names, the first four shapes of the
/// evaluation split are used.
pub fn run_export(
    cfg: &RunConfig,
    checkpoint: &Path,
    shapes: &[String],
    format: CloudFormat,
    out: &Path,
    quiet: bool,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut dir = RunDir::create(out, cfg, quiet)?;
    let data = dataset(cfg, &mut dir)?;
    let (mut model, _) = load_model(checkpoint, Some(&cfg.model))?;
    let ids: Vec<String> = if shapes.is_empty() {
        data.indices(cfg.eval.split).iter().take(4).map(|&i| data.records[i].id.clone()).collect()
    } else {
        shapes.to_vec()
    };
    let ext = match format {
        CloudFormat::PlyAscii => "ply",
        CloudFormat::Xyz => "xyz",
    };
    let exports = dir.exports()?;
    let mut written = Vec::new();
    for id in &ids {
        let rec = data.find(id).ok_or_else(|| Error::Usage(format!("no shape with id `{id}`")))?;
        let (_, outs) = model.infer(&[&rec.cloud], cfg.seed)?;
        for (suffix, pc) in [("input", &rec.cloud), ("output", &outs[0])] {
            let path = exports.join(format!("{id}_{suffix}.{ext}"));
            write_cloud(&path, pc, format)?;
            written.push(path);
        }
        if let Decoder::Folding(fold) = &model.net.decoder {
            let x = batch_tensor::<f32>(&[&rec.cloud])?;
            let mut g = Graph::new(&mut model.store, Mode::Eval, cfg.seed);
            let xv = g.input(x);
            let theta = model.net.encoder.forward(&mut g, xv)?;
            let trace = fold.trace(&mut g, theta)?;
            let seeds = g.value(trace.seeds).to_f64_vec();
            let path = exports.join(format!("{id}_seeds.csv"));
            write_seed_csv(&path, &seeds, fold.source.dim())?;
            written.push(path);
        }
        dir.log(&format!("exported {id}"))?;
    }
    Ok(written)
}

/// Writes the configured corpus as point-cloud files with a manifest that
/// can be read back through `data.source = "manifest"`.
pub fn run_synth(cfg: &RunConfig, format: CloudFormat, out: &Path, quiet: bool) -> Result<PathBuf> {
    let mut dir = RunDir::create(out, cfg, quiet)?;
    let data = dataset(cfg, &mut dir)?;
    let ext = match format {
        CloudFormat::PlyAscii => "ply",
        CloudFormat::Xyz => "xyz",
    };
    let shapes = out.join("shapes");
    fs::create_dir_all(&shapes).map_err(io_err(&shapes))?;
    let mut entries = Vec::with_capacity(data.records.len());
    for r in &data.records {
        let rel = PathBuf::from("shapes").join(format!("{}.{ext}", r.id));
        write_cloud(&out.join(&rel), &r.cloud, format)?;
        entries.push(ManifestEntry { id: r.id.clone(), path: rel, label: r.label, split: r.split });
    }
    let manifest = dir.write("manifest.tsv", &format_manifest(&entries))?;
    dir.log(&format!("wrote {} shapes", entries.len()))?;
    Ok(manifest)
}
