//! Training loops and the evaluation pipelines built on them.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seedcloud_tensor::{checkpoint, Adam, Graph, Mode, Real, TensorError};

use crate::classify::{accuracy, chance_band, l2_normalize, LinearSvm, NearestCentroid};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{epoch_batches, fit_count, Dataset, ShapeRecord, Split};
use crate::error::{io_err, Error, Result};
use crate::geometry::{resample, PointCloud};
use crate::losses::chamfer_with;
use crate::model::{batch_tensor, Model, ModelConfig};
use crate::report::{align, MetricsRow, MetricsTable};

/// What the network is asked to reproduce from what.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Full cloud in, same cloud out.
    Reconstruction,
    /// Occluded cloud in, full cloud out.
    Completion,
}

impl Task {
    fn input(self, r: &ShapeRecord) -> Result<&PointCloud> {
        match self {
            Task::Reconstruction => Ok(&r.cloud),
            Task::Completion => r
                .partial
                .as_ref()
                .ok_or_else(|| Error::Config(format!("record {} has no partial cloud; set data.occlusion > 0", r.id))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_cd: Option<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let val = self.val_cd.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        format!("epoch={} step={} loss={:.6} val_cd={val}", self.epoch, self.step, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    /// Parameters restored to the best validation epoch.
    pub model: Model<f32>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub steps: usize,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64)
}

fn diverged(err: Error, epoch: usize, step: usize, batch: &[&ShapeRecord]) -> Error {
    match err {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Diverged {
            epoch,
            step,
            batch: batch.iter().map(|r| r.id.clone()).collect(),
        },
        other => other,
    }
}

/// One optimizer step on a batch. Returns the loss before the update.
fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    inputs: &[&PointCloud],
    targets: &[&PointCloud],
    squared: bool,
    graph_seed: u64,
) -> Result<f64> {
    let x = batch_tensor::<f32>(inputs)?;
    let t = batch_tensor::<f32>(targets)?;
    model.store.zero_grad();
    let mut g = Graph::new(&mut model.store, Mode::Train, graph_seed);
    let xv = g.input(x);
    let tv = g.input(t);
    let (_, out) = model.net.forward(&mut g, xv)?;
    let loss = g.tape.chamfer(out, tv, squared)?;
    let value = g.value(loss).item()?.to_f64_lossy();
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "chamfer" }.into());
    }
    g.backward(loss)?;
    drop(g);
    adam.step(&mut model.store)?;
    Ok(value)
}

/// Trains an encoder/decoder pair on the train split, keeping the parameters
/// of the epoch with the lowest validation chamfer distance. With
/// `checkpoints` set, `best.ckpt` and `last.ckpt` are written there.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    task: Task,
    seed: u64,
    checkpoints: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Trained> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let val_idx = data.indices(Split::Val);
    let mut model = Model::<f32>::new(&cfg.model, seed)?;
    let mut adam = Adam::new(cfg.train.adam())?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c10d);
    let metadata = cfg.to_toml()?;
    if let Some(dir) = checkpoints {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, seedcloud_tensor::ParamStore<f32>)> = None;
    let mut step = 0;
    let total_steps = cfg.train.epochs * train_idx.len().div_ceil(cfg.train.batch_size);
    for epoch in 1..=cfg.train.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(&train_idx, cfg.train.batch_size, &mut order_rng);
        for batch in &batches {
            let recs: Vec<&ShapeRecord> = batch.iter().map(|&i| &data.records[i]).collect();
            let inputs = recs.iter().map(|r| task.input(r)).collect::<Result<Vec<_>>>()?;
            let targets: Vec<&PointCloud> = recs.iter().map(|r| &r.cloud).collect();
            adam.config.lr = cfg.train.lr_at(step, total_steps);
            step += 1;
            let loss = train_step(&mut model, &mut adam, &inputs, &targets, cfg.train.squared_chamfer, step_seed(seed, step))
                .map_err(|e| diverged(e, epoch, step, &recs))?;
            total += loss;
        }
        let val_cd = if val_idx.is_empty() {
            None
        } else {
            let scores = score_records(&mut model, data, &val_idx, task, cfg.eval.batch_size, seed)?;
            Some(scores.iter().map(|s| s.cd).sum::<f64>() / scores.len() as f64)
        };
        let log = EpochLog { epoch, step, loss: total / batches.len() as f64, val_cd };
        on_epoch(&log);
        history.push(log);
        // Without a validation split the latest epoch is kept.
        let improved = match (&best, val_cd) {
            (Some((b, _, _)), Some(v)) => v < *b,
            _ => true,
        };
        if improved {
            best = Some((val_cd.unwrap_or(f64::NAN), epoch, model.store.clone()));
            if let Some(dir) = checkpoints {
                let path = dir.join("best.ckpt");
                checkpoint::save(&path, &model.store, &metadata).map_err(|e| tensor_io(e, &path))?;
            }
        }
    }
    if let Some(dir) = checkpoints {
        let path = dir.join("last.ckpt");
        checkpoint::save(&path, &model.store, &metadata).map_err(|e| tensor_io(e, &path))?;
    }
    let (best_val, best_epoch, store) = best.expect("at least one epoch");
    checkpoint::restore_into(&mut model.store, &store)?;
    Ok(Trained {
        model,
        history,
        best_epoch,
        best_val: (!best_val.is_nan()).then_some(best_val),
        steps: step,
    })
}

fn tensor_io(e: TensorError, path: &Path) -> Error {
    match e {
        TensorError::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => other.into(),
    }
}

/// The run configuration embedded in a checkpoint.
pub fn stored_config(path: &Path) -> Result<RunConfig> {
    let (_, manifest) = checkpoint::load::<f32>(path).map_err(|e| tensor_io(e, path))?;
    RunConfig::from_toml(&manifest.metadata)
        .map_err(|_| Error::Usage(format!("{} carries no usable configuration; pass --config", path.display())))
}

/// Rebuilds a model from a checkpoint. The model configuration comes from
/// `cfg` when given, otherwise from the configuration stored in the file.
pub fn load_model(path: &Path, cfg: Option<&ModelConfig>) -> Result<(Model<f32>, Option<RunConfig>)> {
    let (store, manifest) = checkpoint::load::<f32>(path).map_err(|e| tensor_io(e, path))?;
    let stored = RunConfig::from_toml(&manifest.metadata).ok();
    let model_cfg = match (cfg, &stored) {
        (Some(c), _) => c.clone(),
        (None, Some(s)) => s.model.clone(),
        (None, None) => {
            return Err(Error::Usage(format!("{} carries no configuration; pass --config", path.display())));
        }
    };
    let mut model = Model::<f32>::new(&model_cfg, 0)?;
    checkpoint::restore_into(&mut model.store, &store)?;
    Ok((model, stored))
}

/// Chamfer distances of one record's reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordScore {
    pub index: usize,
    pub cd: f64,
    pub cd_squared: f64,
}

/// Eval-mode outputs for the records at `indices`, in order.
pub fn reconstruct(
    model: &mut Model<f32>,
    data: &Dataset,
    indices: &[usize],
    task: Task,
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<PointCloud>)> {
    let mut codes = Vec::with_capacity(indices.len());
    let mut outs = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let inputs = chunk.iter().map(|&i| task.input(&data.records[i])).collect::<Result<Vec<_>>>()?;
        let (c, o) = model.infer(&inputs, seed)?;
        codes.extend(c);
        outs.extend(o);
    }
    Ok((codes, outs))
}

pub fn score_records(
    model: &mut Model<f32>,
    data: &Dataset,
    indices: &[usize],
    task: Task,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<RecordScore>> {
    let (_, outs) = reconstruct(model, data, indices, task, batch_size, seed)?;
    indices
        .iter()
        .zip(&outs)
        .map(|(&i, out)| {
            let gt = &data.records[i].cloud;
            Ok(RecordScore {
                index: i,
                cd: chamfer_with(out, gt, false)?.value,
                cd_squared: chamfer_with(out, gt, true)?.value,
            })
        })
        .collect()
}

/// Per-class rows followed by an `all` row. Classes absent from the split are
/// skipped with a warning.
pub fn summarize(
    scores: &[RecordScore],
    data: &Dataset,
    config: &str,
    split: Split,
    params: usize,
    epoch: usize,
) -> Vec<MetricsRow> {
    let row = |class: &str, picked: &[&RecordScore]| MetricsRow {
        config: config.to_string(),
        split: split.to_string(),
        class: class.to_string(),
        count: picked.len(),
        cd: picked.iter().map(|s| s.cd).sum::<f64>() / picked.len() as f64,
        cd_squared: picked.iter().map(|s| s.cd_squared).sum::<f64>() / picked.len() as f64,
        params,
        epoch,
    };
    let mut rows = Vec::new();
    for (c, name) in data.class_names.iter().enumerate() {
        let picked: Vec<&RecordScore> = scores.iter().filter(|s| data.records[s.index].label == c).collect();
        if picked.is_empty() {
            log::warn!("class {name} has no shapes in the {split} split");
            continue;
        }
        rows.push(row(name, &picked));
    }
    if !scores.is_empty() {
        rows.push(row("all", &scores.iter().collect::<Vec<_>>()));
    }
    rows
}

/// Distances of a with-replacement resample of each ground-truth cloud to the
/// cloud itself, at the decoder's output size.
pub fn oracle_scores(data: &Dataset, indices: &[usize], points: usize, seed: u64) -> Result<Vec<RecordScore>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0_7ac1e);
    indices
        .iter()
        .map(|&i| {
            let gt = &data.records[i].cloud;
            let sample = resample(gt, points, &mut rng)?;
            Ok(RecordScore {
                index: i,
                cd: chamfer_with(&sample, gt, false)?.value,
                cd_squared: chamfer_with(&sample, gt, true)?.value,
            })
        })
        .collect()
}

/// Reconstruction metrics of a trained model on `cfg.eval.split`, with the
/// oracle rows appended.
pub fn evaluate_reconstruction(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &RunConfig,
    epoch: usize,
) -> Result<MetricsTable> {
    let split = cfg.eval.split;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("the {split} split is empty")));
    }
    let scores = score_records(model, data, &idx, Task::Reconstruction, cfg.eval.batch_size, cfg.seed)?;
    let params = model.parameter_count().total;
    let mut rows = summarize(&scores, data, &cfg.name, split, params, epoch);
    let oracle = oracle_scores(data, &idx, cfg.model.output_points, cfg.seed)?;
    rows.extend(summarize(&oracle, data, "oracle", split, 0, 0));
    Ok(MetricsTable { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Memorization {
    pub initial: f64,
    /// Lowest loss seen over the run.
    pub best: f64,
    pub curve: Vec<f64>,
}

impl Memorization {
    pub fn ratio(&self) -> f64 {
        self.best / self.initial
    }
}

/// Fits a model to one cloud for `steps` updates and records the training
/// loss before each update and after the last.
pub fn memorize(model_cfg: &ModelConfig, train: &TrainConfig, cloud: &PointCloud, steps: usize, seed: u64) -> Result<Memorization> {
    let mut model = Model::<f32>::new(model_cfg, seed)?;
    let mut adam = Adam::new(train.adam())?;
    let mut curve = Vec::with_capacity(steps + 1);
    for s in 0..steps {
        adam.config.lr = train.lr_at(s, steps);
        curve.push(train_step(&mut model, &mut adam, &[cloud], &[cloud], train.squared_chamfer, step_seed(seed, s))?);
    }
    let x = batch_tensor::<f32>(&[cloud])?;
    let mut g = Graph::new(&mut model.store, Mode::Train, step_seed(seed, steps));
    let xv = g.input(x.clone());
    let (_, out) = model.net.forward(&mut g, xv)?;
    let tv = g.input(x);
    let loss = g.tape.chamfer(out, tv, train.squared_chamfer)?;
    curve.push(g.value(loss).item()?.to_f64_lossy());
    Ok(Memorization { initial: curve[0], best: curve.iter().copied().fold(f64::INFINITY, f64::min), curve })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub svm: f64,
    pub centroid: f64,
    /// Mean accuracy of linear classifiers trained on permuted labels.
    pub shuffled: f64,
    pub chance: f64,
    pub chance_band: f64,
}

impl ClassificationReport {
    pub fn shuffled_near_chance(&self) -> bool {
        (self.shuffled - self.chance).abs() <= self.chance_band
    }

    pub fn to_csv(&self) -> String {
        format!(
            "method,accuracy,n_train,n_test,classes\nsvm,{},{},{},{c}\nnearest_centroid,{},{},{},{c}\nsvm_shuffled_labels,{},{},{},{c}\nchance,{},{},{},{c}\n",
            self.svm, self.n_train, self.n_test,
            self.centroid, self.n_train, self.n_test,
            self.shuffled, self.n_train, self.n_test,
            self.chance, self.n_train, self.n_test,
            c = self.classes
        )
    }

    pub fn to_text(&self) -> String {
        let header = ["method", "accuracy"].map(String::from);
        let body = [
            ("linear svm", self.svm),
            ("nearest centroid", self.centroid),
            ("svm, shuffled labels", self.shuffled),
            ("chance", self.chance),
        ]
        .map(|(m, a)| vec![m.to_string(), format!("{:.4}", a)]);
        align(&header, &body)
    }
}

/// Codewords of the records at `indices`, scaled to unit length.
pub fn codewords(model: &mut Model<f32>, data: &Dataset, indices: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let (mut codes, _) = reconstruct(model, data, indices, Task::Reconstruction, batch_size, seed)?;
    l2_normalize(&mut codes);
    Ok(codes)
}

/// Linear classification of frozen codewords: fit on the train split, score
/// on the test split.
pub fn classify(model: &mut Model<f32>, data: &Dataset, cfg: &RunConfig) -> Result<ClassificationReport> {
    let train_idx = data.indices(Split::Train);
    let test_idx = data.indices(Split::Test);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Usage("classification needs non-empty train and test splits".into()));
    }
    let classes = data.class_names.len();
    let xtr = codewords(model, data, &train_idx, cfg.eval.batch_size, cfg.seed)?;
    let xte = codewords(model, data, &test_idx, cfg.eval.batch_size, cfg.seed)?;
    let ytr: Vec<usize> = train_idx.iter().map(|&i| data.records[i].label).collect();
    let yte: Vec<usize> = test_idx.iter().map(|&i| data.records[i].label).collect();

    let svm = LinearSvm::fit(&xtr, &ytr, classes, &cfg.classify)?;
    let pred: Vec<usize> = xte.iter().map(|x| svm.predict(x)).collect();
    let nc = NearestCentroid::fit(&xtr, &ytr, classes)?;
    let pred_nc: Vec<usize> = xte.iter().map(|x| nc.predict(x)).collect();

    // A single permutation still leaves each cluster with a majority label,
    // so one shuffled fit scores all-or-nothing per class; average several.
    let mut shuffled = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_4ff1e);
    for _ in 0..cfg.classify.shuffles {
        let mut permuted = ytr.clone();
        permuted.shuffle(&mut rng);
        let svm_perm = LinearSvm::fit(&xtr, &permuted, classes, &cfg.classify)?;
        let pred_perm: Vec<usize> = xte.iter().map(|x| svm_perm.predict(x)).collect();
        shuffled += accuracy(&pred_perm, &yte);
    }
    shuffled /= cfg.classify.shuffles.max(1) as f64;

    let present = {
        let mut p = vec![false; classes];
        ytr.iter().for_each(|&l| p[l] = true);
        p.iter().filter(|&&v| v).count()
    };
    let chance = 1.0 / present as f64;
    Ok(ClassificationReport {
        classes: present,
        n_train: xtr.len(),
        n_test: xte.len(),
        svm: accuracy(&pred, &yte),
        centroid: accuracy(&pred_nc, &yte),
        shuffled,
        chance,
        chance_band: chance_band(chance, xte.len()),
    })
}

/// Per-class mean chamfer distances of completion methods.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionTable {
    pub classes: Vec<String>,
    /// Method name, per-class means (absent classes are `None`), overall mean.
    pub rows: Vec<(String, Vec<Option<f64>>, f64)>,
}

impl CompletionTable {
    fn row(name: &str, scores: &[RecordScore], data: &Dataset) -> (String, Vec<Option<f64>>, f64) {
        let per_class = (0..data.class_names.len())
            .map(|c| {
                let v: Vec<f64> = scores.iter().filter(|s| data.records[s.index].label == c).map(|s| s.cd).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let overall = scores.iter().map(|s| s.cd).sum::<f64>() / scores.len() as f64;
        (name.to_string(), per_class, overall)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{},overall\n", self.classes.join(","));
        for (name, vals, overall) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| v.map_or_else(String::new, |x| x.to_string())).collect();
            out.push_str(&format!("{name},{},{overall}\n", cells.join(",")));
        }
        out
    }

    /// Values scaled by 1e3.
    pub fn to_text(&self) -> String {
        let mut header = vec!["method (CDx1e3)".to_string()];
        header.extend(self.classes.iter().cloned());
        header.push("overall".into());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(name, vals, overall)| {
                let mut r = vec![name.clone()];
                r.extend(vals.iter().map(|v| v.map_or_else(|| "-".into(), |x| format!("{:.3}", x * 1e3))));
                r.push(format!("{:.3}", overall * 1e3));
                r
            })
            .collect();
        align(&header, &body)
    }
}

/// Completion quality of a trained model next to the baseline that simply
/// resamples the partial input to the output size.
pub fn evaluate_completion(model: &mut Model<f32>, data: &Dataset, cfg: &RunConfig) -> Result<CompletionTable> {
    let split = cfg.eval.split;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("the {split} split is empty")));
    }
    let ours = score_records(model, data, &idx, Task::Completion, cfg.eval.batch_size, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xba5e);
    let baseline = idx
        .iter()
        .map(|&i| {
            let r = &data.records[i];
            let guess = fit_count(Task::Completion.input(r)?, cfg.model.output_points, &mut rng)?;
            Ok(RecordScore {
                index: i,
                cd: chamfer_with(&guess, &r.cloud, false)?.value,
                cd_squared: chamfer_with(&guess, &r.cloud, true)?.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompletionTable {
        classes: data.class_names.clone(),
        rows: vec![
            CompletionTable::row(&cfg.name, &ours, data),
            CompletionTable::row("partial_resampled", &baseline, data),
        ],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    /// Mean test chamfer distance of each replicate.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderCheck {
    pub earlier: String,
    pub later: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub tie_band: f64,
}

impl AblationReport {
    /// Each cell should do no worse than the one listed before it, up to the
    /// relative tie band.
    pub fn ordering(&self) -> Vec<OrderCheck> {
        self.rows
            .windows(2)
            .map(|w| OrderCheck {
                earlier: w[0].name.clone(),
                later: w[1].name.clone(),
                holds: w[1].mean <= w[0].mean * (1.0 + self.tie_band),
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,params,mean_cd,delta_vs_previous,per_seed\n");
        for (i, r) in self.rows.iter().enumerate() {
            let delta = if i == 0 { String::new() } else { (r.mean - self.rows[i - 1].mean).to_string() };
            let seeds: Vec<String> = r.per_seed.iter().map(f64::to_string).collect();
            out.push_str(&format!("{},{},{},{delta},{}\n", r.name, r.params, r.mean, seeds.join(" ")));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = ["cell", "params", "CDx1e3", "delta", "rel"].map(String::from);
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let (d, rel) = if i == 0 {
                    ("-".to_string(), "-".to_string())
                } else {
                    let p = self.rows[i - 1].mean;
                    (format!("{:+.3}", (r.mean - p) * 1e3), format!("{:+.1}%", (r.mean / p - 1.0) * 100.0))
                };
                vec![r.name.clone(), r.params.to_string(), format!("{:.3}", r.mean * 1e3), d, rel]
            })
            .collect();
        align(&header, &body)
    }
}

/// Resolves the ablation cells of `base`. Cells may change the decoder only;
/// any difference in data, encoder, code size, output size, seed or training
/// budget is rejected.
pub fn ablation_cells(base: &RunConfig) -> Result<Vec<RunConfig>> {
    if base.ablation.cells.is_empty() {
        return Err(Error::Config("ablation.cells is empty".into()));
    }
    if base.ablation.seeds.is_empty() {
        return Err(Error::Config("ablation.seeds is empty".into()));
    }
    base.ablation
        .cells
        .iter()
        .map(|cell| {
            let mut c = base.with_overrides(&cell.set)?;
            c.name = cell.name.clone();
            let same = c.data == base.data
                && c.train == base.train
                && c.eval == base.eval
                && c.seed == base.seed
                && c.model.encoder == base.model.encoder
                && c.model.codeword_dim == base.model.codeword_dim
                && c.model.output_points == base.model.output_points;
            if !same {
                return Err(Error::Usage(format!(
                    "ablation cell `{}` changes more than the decoder; all cells must share data, encoder and budget",
                    cell.name
                )));
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// Trains every cell once per replicate seed on one shared dataset and
/// tabulates mean test chamfer distances.
pub fn run_ablation(base: &RunConfig, data: &Dataset, on_progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    let cells = ablation_cells(base)?;
    let test_idx = data.indices(base.eval.split);
    if test_idx.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", base.eval.split)));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut per_seed = Vec::new();
        let mut params = 0;
        for &seed in &base.ablation.seeds {
            let mut trained = train(cell, data, Task::Reconstruction, seed, None, &mut |_| {})?;
            params = trained.model.parameter_count().total;
            let scores = score_records(&mut trained.model, data, &test_idx, Task::Reconstruction, cell.eval.batch_size, seed)?;
            let mean = scores.iter().map(|s| s.cd).sum::<f64>() / scores.len() as f64;
            on_progress(&format!("cell={} seed={seed} params={params} test_cd={mean:.6}", cell.name));
            per_seed.push(mean);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        rows.push(AblationRow { name: cell.name.clone(), params, per_seed, mean });
    }
    Ok(AblationReport { rows, tie_band: base.ablation.tie_band })
}

/// Draws an id-stable random subset of `k` indices.
pub fn pick_records(indices: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.shuffle(rng);
    v.truncate(k);
    v.sort_unstable();
    v
}
