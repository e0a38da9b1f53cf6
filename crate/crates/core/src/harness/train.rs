use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_with, EvalReport};
use crate::nn::{IntTensor, ParamSet};
use crate::segnet::{forward_eval, SegNetConfig};
use crate::synth::{make_loaders, save_mask, source_only_loader, Dataset, Sample};

use super::checkpoint::{self, Checkpoint};
use super::step::{train_step, IterRecord, Phase, TrainState};
use super::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCH_EVAL_FILE: &str = "eval_epochs.csv";
pub const FINAL_JSONL: &str = "eval_final.jsonl";
pub const FINAL_CSV: &str = "eval_final.csv";
pub const MASK_DIR: &str = "masks";
/// Evaluation batch size; fixed so that `eval` reproduces a run's numbers.
pub const EVAL_BATCH: usize = 4;

/// Per-epoch evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: u64,
    pub iter: u64,
    pub dice_cup: f64,
    pub dice_disc: f64,
    pub gamma_cdr: f64,
    pub degenerate: usize,
}

/// Hooks and controls for a run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many completed epochs, as if interrupted.
    pub stop_after_epoch: Option<u64>,
    pub on_phase: Option<&'a mut dyn FnMut(Phase)>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochEval)>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub state: TrainState,
    /// Evaluation of the returned weights on the target test split; `None`
    /// when the run stopped early.
    pub report: Option<EvalReport>,
}

/// The dataset a config points at: loaded from `data_dir`, or generated.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => Dataset::load(dir),
        None => Dataset::generate(&cfg.synth()),
    }
}

/// Scores `params` on `samples` with the eval-mode network.
pub fn evaluate(
    net: &SegNetConfig,
    params: &ParamSet<f32>,
    samples: &[Sample],
) -> Result<(EvalReport, Vec<IntTensor>)> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<_> = samples.iter().map(|s| &s.mask).collect();
    evaluate_with(&images, &masks, EVAL_BATCH, |batch| {
        let tape = crate::nn::Tape::new();
        let out = forward_eval(net, params, tape.constant(batch.clone()))?;
        Ok((*out.avg_logits.value()).clone())
    })
}

/// Weights a checkpoint returns: the teacher when self-ensembling was on.
pub fn returned_params(ck: &Checkpoint) -> Result<ParamSet<f32>> {
    ck.params(if ck.header.flags.se_enabled { "teacher/" } else { "student/" })
}

/// Writes `eval_final.{jsonl,csv}` and predicted masks under `dir`.
pub fn write_eval(dir: &Path, report: &EvalReport, preds: &[IntTensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.write_jsonl(&dir.join(FINAL_JSONL))?;
    report.write_csv(&dir.join(FINAL_CSV))?;
    let masks = dir.join(MASK_DIR);
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for (s, p) in report.per_sample.iter().zip(preds) {
        save_mask(&masks.join(format!("pred_{}.png", s.sample_id)), p)?;
    }
    Ok(())
}

/// Rewrites a headered CSV keeping only rows whose first column is below
/// `limit`.
fn truncate_csv(path: &Path, column: &str, limit: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::format(path, format!("missing column `{column}`")))?;
    let mut kept = Vec::new();
    for row in reader.records() {
        let row = row?;
        let v: u64 = row[idx]
            .parse()
            .map_err(|_| Error::format(path, format!("bad `{column}` value")))?;
        if v < limit {
            kept.push(row);
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&headers)?;
    for row in kept {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn appender(path: &Path) -> Result<csv::Writer<fs::File>> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
}

pub fn train(cfg: &RunConfig) -> Result<RunOutcome> {
    train_with(cfg, TrainOptions::default())
}

/// Runs (or resumes) training into `cfg.out_dir`.
pub fn train_with(cfg: &RunConfig, mut opts: TrainOptions<'_>) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let mut cfg = cfg.clone();
    cfg.n_source = data.source_train.len();
    cfg.n_target = data.target_train.len();
    cfg.n_test = data.target_test.len();
    cfg.image_size = data.source_train[0].mask.hw().0;
    cfg.validate()?;

    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;

    let mut state = TrainState::new(&cfg)?;
    let resumed_from = if opts.resume { checkpoint::latest(&dir)? } else { None };
    match &resumed_from {
        Some(path) => {
            Checkpoint::load(path)?.restore(&mut state)?;
            truncate_csv(&dir.join(METRICS_FILE), "iter", state.iter)?;
            truncate_csv(&dir.join(EPOCH_EVAL_FILE), "epoch", state.epoch + 1)?;
            log::info!("resumed from {} at epoch {}", path.display(), state.epoch);
        }
        None => {
            for f in [METRICS_FILE, EPOCH_EVAL_FILE] {
                let p = dir.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            if let Some(init) = &cfg.init_from {
                let ck = Checkpoint::load(init)?;
                state.init_from(&ck.params("student/")?)?;
            }
        }
    }

    let loaders = if cfg.use_target {
        make_loaders(&data.source_train, &data.target_train, cfg.batch_size, cfg.seed)?
    } else {
        source_only_loader(&data.source_train, cfg.batch_size, cfg.seed)?
    };
    let metrics_path = dir.join(METRICS_FILE);
    let epochs_path = dir.join(EPOCH_EVAL_FILE);
    let mut metrics = appender(&metrics_path)?;
    let mut epoch_log = appender(&epochs_path)?;
    let mut noop = |_: Phase| {};

    while state.epoch < cfg.epochs as u64 {
        if opts.stop_after_epoch.is_some_and(|s| state.epoch >= s) {
            return Ok(RunOutcome { dir, state, report: None });
        }
        for batch in loaders.epoch(state.epoch) {
            let observe: &mut dyn FnMut(Phase) = match opts.on_phase.as_deref_mut() {
                Some(f) => f,
                None => &mut noop,
            };
            let rec: IterRecord = train_step(&mut state, &cfg, &batch?, observe)?;
            metrics.serialize(&rec)?;
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epoch += 1;

        let (report, _) = evaluate(&state.net, state.returned(), &data.target_test)?;
        let row = EpochEval {
            epoch: state.epoch,
            iter: state.iter,
            dice_cup: report.dice_cup,
            dice_disc: report.dice_disc,
            gamma_cdr: report.gamma_cdr,
            degenerate: report.degenerate,
        };
        epoch_log.serialize(&row)?;
        epoch_log.flush().map_err(|e| Error::io(&epochs_path, e))?;
        log::info!(
            "epoch {} dice_cup {:.4} dice_disc {:.4} gamma {:.4}",
            row.epoch,
            row.dice_cup,
            row.dice_disc,
            row.gamma_cdr
        );
        if let Some(f) = opts.on_epoch.as_deref_mut() {
            f(&row);
        }
        if state.epoch % cfg.checkpoint_every as u64 == 0 || state.epoch == cfg.epochs as u64 {
            Checkpoint::from_state(&state).save(&dir.join(checkpoint::file_name(state.epoch)))?;
        }
    }

    let (report, preds) = evaluate(&state.net, state.returned(), &data.target_test)?;
    write_eval(&dir, &report, &preds)?;
    Ok(RunOutcome {
        dir,
        state,
        report: Some(report),
    })
}
