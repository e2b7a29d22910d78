//! Experiment specification and the sweep runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::{self, save_png, DatasetManifest, LabeledImage, SplitDataset};
use super::results::{self, row_key, Method, ResultRow, NO_LOSS};
use super::synthetic;
use crate::checkpoint::Checkpoint;
use crate::decoder::{DecoderParams, Descriptor, LatentCode};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::invert::{self, InversionConfig, UntrainedConfig};
use crate::losses::psnr;
use crate::operators::{add_noise, gaussian_operator_for_ratio, luma_operator, MeasurementOperator};
use crate::pretrain::{fit_latent_gaussian, LatentGaussian, LossKind, PretrainConfig};
use crate::seeding;

/// Environment variable bounding the number of concurrently running cells.
pub const WORKERS_ENV: &str = "LOWSHOT_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cs,
    Colorization,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Cs => "cs",
            Task::Colorization => "colorization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Blobs,
    Tinted,
}

/// Where the images of an experiment come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Directory { path: PathBuf },
    Synthetic { generator: SyntheticKind, count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub shots: usize,
    pub loss: LossKind,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub task: Task,
    /// Compression ratios `m/n` (ignored for colorization).
    pub ratios: Vec<f64>,
    pub shots: Vec<usize>,
    pub losses: Vec<LossKind>,
    pub test_images: usize,
    /// Trial seeds; every (ratio, image) is measured once per trial.
    pub seeds: Vec<u64>,
    pub root_seed: u64,
    pub noise_std: f64,
    pub descriptor: Descriptor,
    pub dataset: Option<DatasetSource>,
    /// Explicit checkpoint paths; others default to `checkpoint_dir/s{S}-{loss}.ckpt`.
    pub checkpoints: Vec<CheckpointRef>,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub include_untrained: bool,
    /// When false, `wall_ms` is written as 0 so reruns are byte-identical.
    pub record_wall_time: bool,
    pub pretrain: PretrainConfig,
    pub inversion: InversionConfig,
    pub untrained: UntrainedConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            task: Task::Cs,
            ratios: vec![0.1],
            shots: vec![5, 10, 15, 25, 50, 100],
            losses: vec![LossKind::Mmd, LossKind::L2],
            test_images: 50,
            seeds: vec![0],
            root_seed: 0,
            noise_std: 0.0,
            descriptor: Descriptor::default(),
            dataset: None,
            checkpoints: Vec::new(),
            checkpoint_dir: PathBuf::from("checkpoints"),
            output_dir: PathBuf::from("out"),
            include_untrained: true,
            record_wall_time: true,
            pretrain: PretrainConfig::default(),
            inversion: InversionConfig::default(),
            untrained: UntrainedConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.descriptor.validate()?;
        if self.task == Task::Cs && self.ratios.is_empty() {
            return Err(Error::Config("no compression ratios".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("compression ratio {r} outside (0, 1]")));
        }
        if self.seeds.is_empty() || self.test_images == 0 {
            return Err(Error::Config("need at least one seed and one test image".into()));
        }
        if self.shots.contains(&0) {
            return Err(Error::Config("shot counts must be positive".into()));
        }
        if (self.shots.is_empty() || self.losses.is_empty()) && !self.include_untrained {
            return Err(Error::Config("the experiment has no methods".into()));
        }
        if self.losses.contains(&LossKind::Mmd) && self.shots.contains(&1) {
            return Err(Error::Config("the MMD loss needs at least 2 shots".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise std must be ≥ 0".into()));
        }
        self.inversion.validate()
    }

    pub fn max_shots(&self) -> usize {
        self.shots.iter().copied().max().unwrap_or(0)
    }

    pub fn checkpoint_path(&self, shots: usize, loss: LossKind) -> PathBuf {
        self.checkpoints
            .iter()
            .find(|c| c.shots == shots && c.loss == loss)
            .map(|c| c.path.clone())
            .unwrap_or_else(|| self.checkpoint_dir.join(format!("s{shots}-{loss}.ckpt")))
    }

    /// Loads (or generates) the dataset and splits it into shots and tests.
    pub fn load_data(&self) -> Result<SplitDataset> {
        let res = self.descriptor.resolution;
        let ds = match &self.dataset {
            None => return Err(Error::Config("the experiment has no dataset".into())),
            Some(DatasetSource::Directory { path }) => dataset::load_dataset(path, res)?,
            Some(DatasetSource::Synthetic { generator, count, seed }) => {
                let (imgs, label) = match generator {
                    SyntheticKind::Blobs => (synthetic::two_tone_blobs(*count, res, *seed), "synthetic two-tone blobs"),
                    SyntheticKind::Tinted => (synthetic::tinted(*count, res, *seed), "synthetic tinted luma fields"),
                };
                dataset::dataset_from_tensors(imgs, format!("{label}, seed {seed}"))?
            }
        };
        dataset::split_dataset(ds, self.max_shots(), self.test_images)
    }
}

/// A pre-trained decoder together with its latent Gaussian.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: DecoderParams<f32>,
    pub latent_fit: LatentGaussian,
    /// SHA-256 of the serialized decoder and latents.
    pub digest: String,
}

impl Model {
    pub fn new(params: DecoderParams<f32>, latents: &[LatentCode<f32>]) -> Result<Self> {
        let latent_fit = fit_latent_gaussian(latents)?;
        let digest = dataset::digest_bytes(&Checkpoint::new(params.clone(), latents.to_vec()).to_bytes());
        Ok(Self {
            params,
            latent_fit,
            digest,
        })
    }
}

/// Models keyed by `(S, loss)`.
#[derive(Debug, Clone, Default)]
pub struct ModelBank {
    models: BTreeMap<(usize, LossKind), Model>,
}

impl ModelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, shots: usize, loss: LossKind, model: Model) {
        self.models.insert((shots, loss), model);
    }

    pub fn get(&self, shots: usize, loss: LossKind) -> Result<&Model> {
        self.models.get(&(shots, loss)).ok_or(Error::MissingCheckpoint {
            shots,
            loss: loss.to_string(),
        })
    }

    pub fn digests(&self) -> Vec<ModelDigest> {
        self.models
            .iter()
            .map(|(&(shots, loss), m)| ModelDigest {
                shots,
                loss,
                digest: m.digest.clone(),
            })
            .collect()
    }

    /// Loads every checkpoint the spec needs; a missing file names its `(S, loss)`.
    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        let mut bank = Self::new();
        for &s in &spec.shots {
            for &loss in &spec.losses {
                let path = spec.checkpoint_path(s, loss);
                if !path.exists() {
                    return Err(Error::MissingCheckpoint {
                        shots: s,
                        loss: loss.to_string(),
                    });
                }
                let ck = Checkpoint::<f32>::load_expecting(&path, &spec.descriptor)?;
                bank.insert(s, loss, Model::new(ck.decoder, &ck.latents)?);
            }
        }
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDigest {
    pub shots: usize,
    pub loss: LossKind,
    pub digest: String,
}

/// One (ratio, trial, image, method) job.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub task: Task,
    pub ratio: f64,
    pub shots: usize,
    pub loss: Option<LossKind>,
    pub method: Method,
    pub seed: u64,
    pub image: usize,
    pub image_id: String,
}

impl Cell {
    pub fn loss_label(&self) -> String {
        self.loss.map_or_else(|| NO_LOSS.to_string(), |l| l.to_string())
    }

    pub fn key(&self) -> String {
        row_key(
            self.task.as_str(),
            self.ratio,
            self.shots,
            &self.loss_label(),
            self.method,
            self.seed,
            &self.image_id,
        )
    }

    /// Seed shared by all methods measuring the same image.
    pub fn measurement_seed(&self, root: u64) -> u64 {
        seeding::keyed(
            root,
            &format!("{}|{}|{}|{}", self.task.as_str(), self.ratio, self.seed, self.image_id),
        )
    }

    pub fn inversion_seed(&self, root: u64) -> u64 {
        seeding::keyed(root, &self.key())
    }
}

/// Luma measurements keep one value per pixel: `m/n = 1/3`.
pub const COLORIZATION_RATIO: f64 = 1.0 / 3.0;

/// All cells of the spec in canonical order.
pub fn enumerate_cells(spec: &ExperimentSpec, tests: &[LabeledImage]) -> Vec<Cell> {
    let ratios = match spec.task {
        Task::Cs => spec.ratios.clone(),
        Task::Colorization => vec![COLORIZATION_RATIO],
    };
    let mut cells = Vec::new();
    for &ratio in &ratios {
        for &seed in &spec.seeds {
            for (image, t) in tests.iter().enumerate() {
                let base = Cell {
                    task: spec.task,
                    ratio,
                    shots: 0,
                    loss: None,
                    method: Method::Untrained,
                    seed,
                    image,
                    image_id: t.id.clone(),
                };
                if spec.include_untrained {
                    cells.push(base.clone());
                }
                for &shots in &spec.shots {
                    for &loss in &spec.losses {
                        cells.push(Cell {
                            shots,
                            loss: Some(loss),
                            method: Method::Lowshot,
                            ..base.clone()
                        });
                    }
                }
            }
        }
    }
    cells
}

/// Builds the operator and noisy measurements of a cell's test image.
pub fn measure(
    spec: &ExperimentSpec,
    cell: &Cell,
    truth: &Tensor<f32>,
    mode: ExecMode,
) -> Result<(Arc<MeasurementOperator>, crate::operators::Measurement<f32>)> {
    let base = cell.measurement_seed(spec.root_seed);
    let op = match cell.task {
        Task::Cs => gaussian_operator_for_ratio(cell.ratio, truth.len(), seeding::derive(base, 1, 0))?,
        Task::Colorization => {
            let &[_, h, w] = truth.shape() else {
                return Err(Error::Shape(format!("expected a C×H×W image, got {:?}", truth.shape())));
            };
            luma_operator(h, w)
        }
    };
    let y = add_noise(&op.apply(truth, mode)?, spec.noise_std, seeding::derive(base, 2, 0))?;
    Ok((Arc::new(op), y))
}

/// Outcome of one cell, with the stage losses of the inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub row: ResultRow,
    pub stage1_loss: Option<f64>,
    pub stage2_loss: f64,
    pub reconstruction: Tensor<f32>,
}

/// Runs a single cell from scratch.
pub fn run_cell(
    spec: &ExperimentSpec,
    bank: &ModelBank,
    tests: &[LabeledImage],
    cell: &Cell,
    mode: ExecMode,
) -> Result<CellRecord> {
    let start = Instant::now();
    let truth = &tests
        .get(cell.image)
        .ok_or_else(|| Error::Config(format!("cell refers to missing test image {}", cell.image)))?
        .tensor;
    let (op, y) = measure(spec, cell, truth, mode)?;
    let seed = cell.inversion_seed(spec.root_seed);
    let result = match cell.loss {
        Some(loss) => {
            let model = bank.get(cell.shots, loss)?;
            let cfg = InversionConfig {
                seed,
                exec: mode,
                ..spec.inversion.clone()
            };
            invert::invert(&y, &op, &model.params, &model.latent_fit, &cfg)?
        }
        None => {
            let cfg = UntrainedConfig {
                exec: mode,
                ..spec.untrained.clone()
            };
            invert::solve_untrained_with(&y, &op, spec.descriptor, invert::schedule_ratio(&op), seed, &cfg)?
        }
    };
    let psnr = psnr(&result.reconstruction, truth)?;
    let wall_ms = if spec.record_wall_time {
        start.elapsed().as_millis() as u64
    } else {
        0
    };
    Ok(CellRecord {
        row: ResultRow {
            task: cell.task.as_str().into(),
            ratio: cell.ratio,
            shots: cell.shots,
            loss: cell.loss_label(),
            method: cell.method,
            seed: cell.seed,
            image_id: cell.image_id.clone(),
            psnr,
            wall_ms,
        },
        stage1_loss: cell.loss.map(|_| result.stage1.final_loss),
        stage2_loss: result.stage2.final_loss,
        reconstruction: result.reconstruction,
    })
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub csv_path: PathBuf,
    pub workers: usize,
    /// Stop after this many newly computed cells (simulates an interruption).
    pub cell_limit: Option<usize>,
    /// Directory for per-cell reconstruction PNGs.
    pub image_dir: Option<PathBuf>,
}

impl SweepOptions {
    pub fn new(csv_path: impl Into<PathBuf>) -> Self {
        Self {
            csv_path: csv_path.into(),
            workers: workers_from_env(),
            cell_limit: None,
            image_dir: None,
        }
    }
}

/// Worker count from `LOWSHOT_WORKERS`, else the available parallelism.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Every row now in the CSV, in canonical order.
    pub rows: Vec<ResultRow>,
    /// Cells computed by this invocation.
    pub records: Vec<CellRecord>,
    pub failures: Vec<CellFailure>,
    /// Cells found in the CSV and not recomputed.
    pub resumed: usize,
    /// Cells not attempted because of `cell_limit`.
    pub pending: usize,
}

impl SweepOutcome {
    pub fn complete(&self) -> bool {
        self.failures.is_empty() && self.pending == 0
    }
}

/// File-safe name of a cell.
pub fn cell_file_stem(key: &str) -> String {
    let digest = dataset::digest_bytes(key.as_bytes());
    digest[..16].to_string()
}

fn canonical_rows(cells: &[Cell], done: &BTreeMap<String, ResultRow>) -> Vec<ResultRow> {
    cells.iter().filter_map(|c| done.get(&c.key()).cloned()).collect()
}

/// Runs every cell not already present in `opts.csv_path`, appending rows as
/// they finish and finally rewriting the file in canonical order.
pub fn run_sweep(
    spec: &ExperimentSpec,
    bank: &ModelBank,
    tests: &[LabeledImage],
    opts: &SweepOptions,
) -> Result<SweepOutcome> {
    spec.validate()?;
    for &s in &spec.shots {
        for &loss in &spec.losses {
            let model = bank.get(s, loss)?;
            if model.params.descriptor != spec.descriptor {
                return Err(Error::Incompatible(format!(
                    "model for S={s}, loss={loss} has descriptor {:?}, experiment expects {:?}",
                    model.params.descriptor, spec.descriptor
                )));
            }
        }
    }
    let cells = enumerate_cells(spec, tests);
    let wanted: BTreeSet<String> = cells.iter().map(Cell::key).collect();
    let mut done: BTreeMap<String, ResultRow> = BTreeMap::new();
    for row in results::read_rows_for_resume(&opts.csv_path)? {
        let key = row.key();
        if wanted.contains(&key) {
            done.insert(key, row);
        } else {
            log::warn!("dropping row {key}: not part of this experiment");
        }
    }
    let resumed = done.len();
    if let Some(parent) = opts.csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    if let Some(dir) = &opts.image_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    results::write_atomic(&opts.csv_path, &results::rows_to_csv(&canonical_rows(&cells, &done))?)?;

    let todo: Vec<&Cell> = cells.iter().filter(|c| !done.contains_key(&c.key())).collect();
    log::info!("{} cells, {} already done, {} to run", cells.len(), resumed, todo.len());
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&opts.csv_path)
        .map_err(|e| Error::io(format!("opening {}", opts.csv_path.display()), e))?;
    struct Sink {
        file: fs::File,
        records: Vec<(usize, CellRecord)>,
        failures: Vec<(usize, CellFailure)>,
        write_error: Option<Error>,
    }
    let sink = Mutex::new(Sink {
        file,
        records: Vec::new(),
        failures: Vec::new(),
        write_error: None,
    });
    let started = AtomicUsize::new(0);
    let workers = opts.workers.max(1);
    let (outer, inner) = if workers > 1 {
        (ExecMode::Parallel, ExecMode::Sequential)
    } else {
        (ExecMode::Sequential, ExecMode::default())
    };
    exec::with_pool(workers, || {
        exec::for_each_indexed(outer, todo.len(), |i| {
            if let Some(limit) = opts.cell_limit {
                if started.fetch_add(1, Ordering::SeqCst) >= limit {
                    return;
                }
            }
            let cell = todo[i];
            let outcome = run_cell(spec, bank, tests, cell, inner).and_then(|rec| {
                if let Some(dir) = &opts.image_dir {
                    save_png(&rec.reconstruction, dir.join(format!("{}.png", cell_file_stem(&cell.key()))))?;
                }
                Ok(rec)
            });
            let mut s = sink.lock().unwrap_or_else(|p| p.into_inner());
            match outcome {
                Ok(rec) => {
                    let line = results::row_line(&rec.row);
                    let written = line.and_then(|l| {
                        s.file
                            .write_all(&l)
                            .and_then(|_| s.file.flush())
                            .map_err(|e| Error::io("appending result row", e))
                    });
                    if let Err(e) = written {
                        s.write_error.get_or_insert(e);
                    }
                    log::info!("{} psnr {:.2} dB", rec.row.key(), rec.row.psnr);
                    s.records.push((i, rec));
                }
                Err(e) => {
                    log::error!("cell {} failed: {e}", cell.key());
                    s.failures.push((
                        i,
                        CellFailure {
                            key: cell.key(),
                            message: e.to_string(),
                        },
                    ));
                }
            }
        })
    });
    let mut sink = sink.into_inner().unwrap_or_else(|p| p.into_inner());
    if let Some(e) = sink.write_error.take() {
        return Err(e);
    }
    sink.records.sort_by_key(|(i, _)| *i);
    sink.failures.sort_by_key(|(i, _)| *i);
    for (_, rec) in &sink.records {
        done.insert(rec.row.key(), rec.row.clone());
    }
    let rows = canonical_rows(&cells, &done);
    results::write_atomic(&opts.csv_path, &results::rows_to_csv(&rows)?)?;
    let pending = cells.len() - rows.len() - sink.failures.len();
    Ok(SweepOutcome {
        rows,
        records: sink.records.into_iter().map(|(_, r)| r).collect(),
        failures: sink.failures.into_iter().map(|(_, f)| f).collect(),
        resumed,
        pending,
    })
}

/// Record of a run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: ExperimentSpec,
    pub models: Vec<ModelDigest>,
    pub dataset: Option<DatasetManifest>,
    pub test_image_ids: Vec<String>,
    pub seed_derivation: String,
    pub cells: Vec<CellSeeds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub key: String,
    /// Hex, since TOML integers are signed 64-bit.
    pub measurement_seed: String,
    pub inversion_seed: String,
}

impl RunManifest {
    pub fn new(spec: &ExperimentSpec, bank: &ModelBank, dataset: Option<&DatasetManifest>, tests: &[LabeledImage]) -> Self {
        let cells = enumerate_cells(spec, tests)
            .iter()
            .map(|c| CellSeeds {
                key: c.key(),
                measurement_seed: format!("{:016x}", c.measurement_seed(spec.root_seed)),
                inversion_seed: format!("{:016x}", c.inversion_seed(spec.root_seed)),
            })
            .collect();
        Self {
            spec: spec.clone(),
            models: bank.digests(),
            dataset: dataset.cloned(),
            test_image_ids: tests.iter().map(|t| t.id.clone()).collect(),
            seed_derivation: "first 8 bytes (LE) of sha256(root_seed LE || key)".into(),
            cells,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        results::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Re-runs the cell with the given key; models and test images must
    /// match the recorded digests.
    pub fn rerun_cell(&self, key: &str, bank: &ModelBank, tests: &[LabeledImage]) -> Result<CellRecord> {
        if bank.digests() != self.models {
            return Err(Error::Incompatible("model digests differ from the manifest".into()));
        }
        let ids: Vec<&str> = tests.iter().map(|t| t.id.as_str()).collect();
        if ids != self.test_image_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Incompatible("test images differ from the manifest".into()));
        }
        let cell = enumerate_cells(&self.spec, tests)
            .into_iter()
            .find(|c| c.key() == key)
            .ok_or_else(|| Error::Config(format!("no cell with key {key}")))?;
        run_cell(&self.spec, bank, tests, &cell, ExecMode::default())
    }
}

/// Compressed-sensing sweep.
pub fn run_cs_sweep(
    spec: &ExperimentSpec,
    bank: &ModelBank,
    tests: &[LabeledImage],
    opts: &SweepOptions,
) -> Result<SweepOutcome> {
    if spec.task != Task::Cs {
        return Err(Error::Config("run_cs_sweep needs task = \"cs\"".into()));
    }
    run_sweep(spec, bank, tests, opts)
}

/// Colorization outputs: rows plus a grid of truth, grayscale and
/// reconstructions (one column per test image).
#[derive(Debug, Clone)]
pub struct ColorizationOutcome {
    pub sweep: SweepOutcome,
    pub grid_path: PathBuf,
    pub labels_path: PathBuf,
}

const GRID_PAD: usize = 2;

pub fn run_colorization(
    spec: &ExperimentSpec,
    bank: &ModelBank,
    tests: &[LabeledImage],
    opts: &SweepOptions,
) -> Result<ColorizationOutcome> {
    if spec.task != Task::Colorization {
        return Err(Error::Config("run_colorization needs task = \"colorization\"".into()));
    }
    let image_dir = opts
        .image_dir
        .clone()
        .unwrap_or_else(|| spec.output_dir.join("reconstructions"));
    let opts = SweepOptions {
        image_dir: Some(image_dir.clone()),
        ..opts.clone()
    };
    let sweep = run_sweep(spec, bank, tests, &opts)?;
    let grid_path = spec.output_dir.join("colorization_grid.png");
    let labels_path = spec.output_dir.join("colorization_grid.csv");
    if sweep.complete() {
        write_grid(spec, tests, &sweep.rows, &image_dir, &grid_path, &labels_path)?;
    }
    Ok(ColorizationOutcome {
        sweep,
        grid_path,
        labels_path,
    })
}

/// The grayscale view of an image, replicated to three channels.
pub fn grayscale(truth: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[_, h, w] = truth.shape() else {
        return Err(Error::Shape(format!("expected C×H×W, got {:?}", truth.shape())));
    };
    let y = luma_operator(h, w).apply(truth, ExecMode::Sequential)?;
    Tensor::stack(&[y.clone(), y.clone(), y])?.reshape(vec![3, h, w])
}

fn write_grid(
    spec: &ExperimentSpec,
    tests: &[LabeledImage],
    rows: &[ResultRow],
    image_dir: &Path,
    grid_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let seed = spec.seeds[0];
    let cells = enumerate_cells(spec, tests);
    let mut methods: Vec<(String, Method, usize, String)> = Vec::new();
    for c in cells.iter().filter(|c| c.image == 0 && c.seed == seed) {
        let label = match c.loss {
            None => "untrained".to_string(),
            Some(l) => format!("lowshot S={} {l}", c.shots),
        };
        methods.push((label, c.method, c.shots, c.loss_label()));
    }
    let res = spec.descriptor.resolution;
    let tile = res + GRID_PAD;
    let n_rows = 2 + methods.len();
    let mut grid = image::RgbImage::from_pixel((tests.len() * tile) as u32, (n_rows * tile) as u32, image::Rgb([255, 255, 255]));
    let psnr_of: BTreeMap<String, f64> = rows.iter().map(|r| (r.key(), r.psnr)).collect();
    let mut labels = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    labels.write_record(["row", "column", "label", "image_id", "psnr"]).map_err(csv_err)?;
    let mut place = |img: &image::RgbImage, r: usize, c: usize| {
        image::imageops::replace(&mut grid, img, (c * tile) as i64, (r * tile) as i64);
    };
    for (col, t) in tests.iter().enumerate() {
        place(&dataset::tensor_to_rgb(&t.tensor)?, 0, col);
        place(&dataset::tensor_to_rgb(&grayscale(&t.tensor)?)?, 1, col);
        labels.write_record(["0", &col.to_string(), "truth", &t.id, ""]).map_err(csv_err)?;
        labels.write_record(["1", &col.to_string(), "grayscale", &t.id, ""]).map_err(csv_err)?;
        for (m, (label, method, shots, loss)) in methods.iter().enumerate() {
            let key = row_key(spec.task.as_str(), COLORIZATION_RATIO, *shots, loss, *method, seed, &t.id);
            let path = image_dir.join(format!("{}.png", cell_file_stem(&key)));
            let img = image::open(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            place(&img, 2 + m, col);
            let psnr = psnr_of.get(&key).map(|p| p.to_string()).unwrap_or_default();
            labels
                .write_record([(2 + m).to_string(), col.to_string(), label.clone(), t.id.clone(), psnr])
                .map_err(csv_err)?;
        }
    }
    grid.save(grid_path).map_err(|e| Error::Image {
        path: grid_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let bytes = labels.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    results::write_atomic(labels_path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tests_of(n: usize) -> Vec<LabeledImage> {
        (0..n)
            .map(|i| LabeledImage {
                id: format!("img{i}"),
                tensor: Tensor::zeros(vec![3, 16, 16]),
            })
            .collect()
    }

    #[test]
    fn cell_count_arithmetic() {
        let spec = ExperimentSpec {
            ratios: vec![0.1],
            shots: vec![5],
            losses: vec![LossKind::Mmd],
            ..Default::default()
        };
        let cells = enumerate_cells(&spec, &tests_of(2));
        assert_eq!(cells.len(), 4);
        assert_eq!(cells.iter().filter(|c| c.method == Method::Untrained).count(), 2);
        let keys: BTreeSet<String> = cells.iter().map(Cell::key).collect();
        assert_eq!(keys.len(), 4);
    }

    #[test]
    fn methods_share_measurement_seeds() {
        let spec = ExperimentSpec {
            shots: vec![5, 10],
            ..Default::default()
        };
        let cells = enumerate_cells(&spec, &tests_of(1));
        let seeds: BTreeSet<u64> = cells.iter().map(|c| c.measurement_seed(7)).collect();
        assert_eq!(seeds.len(), 1);
        let inv: BTreeSet<u64> = cells.iter().map(|c| c.inversion_seed(7)).collect();
        assert_eq!(inv.len(), cells.len());
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = ExperimentSpec {
            dataset: Some(DatasetSource::Synthetic {
                generator: SyntheticKind::Blobs,
                count: 30,
                seed: 4,
            }),
            ..Default::default()
        };
        let text = spec.to_toml().unwrap();
        assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), spec);
        let partial = ExperimentSpec::from_toml("task = \"colorization\"\nshots = [10]\n").unwrap();
        assert_eq!(partial.task, Task::Colorization);
        assert_eq!(partial.test_images, 50);
    }

    #[test]
    fn missing_model_names_pair() {
        let err = ModelBank::new().get(25, LossKind::L2).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint { shots: 25, .. }));
        assert!(err.to_string().contains("S=25") && err.to_string().contains("l2"));
    }
}
