use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::average::{average_params, read_metrics, select_best, write_metrics, CheckpointRecord};
use super::freeze::{freeze_params, FreezeSpec};
use super::loss::{compute_loss, LossConfig, LossMetrics};
use super::optim::Adam;
use crate::dataprep::{splitmix64, IterPosition, ShardIterator, ShardSet, Vocabularies};
use crate::error::{Error, Result};
use crate::kernels::Tape;
use crate::model::{forward, Batch, Example, ModelConfig, ModelParams, ParamVars};

pub const CONFIG_FILE: &str = "config.txt";
pub const BEST_PARAMS: &str = "params.best";
pub const AVERAGED_PARAMS: &str = "params.avg";
const STATE_FILE: &str = "state.json";
const STATE_DIR: &str = "state";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_updates: usize,
    pub checkpoint_interval: usize,
    pub learning_rate: f32,
    pub warmup: usize,
    pub label_smoothing: f32,
    pub freeze: Option<FreezeSpec>,
    pub factor_loss_weights: Vec<f32>,
    pub nvs_loss_weight: f32,
    pub average_best: usize,
    /// Padded target tokens per batch.
    pub batch_tokens: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_updates: 1000,
            checkpoint_interval: 500,
            learning_rate: 2e-3,
            warmup: 200,
            label_smoothing: 0.1,
            freeze: None,
            factor_loss_weights: Vec::new(),
            nvs_loss_weight: 1.0,
            average_best: 8,
            batch_tokens: 1024,
            seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        if self.max_updates > 0 && self.checkpoint_interval > self.max_updates {
            return Err(Error::Config(format!(
                "checkpoint_interval {} exceeds max_updates {}",
                self.checkpoint_interval, self.max_updates
            )));
        }
        if self.average_best == 0 {
            return Err(Error::Config("average_best must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            label_smoothing: self.label_smoothing,
            factor_weights: self.factor_loss_weights.clone(),
            nvs_weight: self.nvs_loss_weight,
        }
    }
}

/// Where training starts from.
#[derive(Clone, Debug)]
pub enum TrainStart {
    /// Seeded initialization.
    Fresh,
    /// Fine-tune from these parameters with a fresh optimizer.
    Params(ModelParams),
    /// Continue the run saved in the output directory.
    Resume,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResumeState {
    update: usize,
    epoch: u64,
    position: IterPosition,
    adam_steps: u64,
    params_file: String,
}

/// Outcome of one [`train`] call.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub params: ModelParams,
    /// Training loss of every update run by this call, in order.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Backward ops replayed by the last update.
    pub last_backward_ops: usize,
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    splitmix64(seed ^ splitmix64(epoch.wrapping_add(1)))
}

/// Token-weighted mean loss over `examples` without gradients.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &ModelParams,
    examples: &[Example],
    loss_cfg: &LossConfig,
) -> Result<LossMetrics> {
    let mut total = LossMetrics::default();
    let mut weighted = 0.0;
    for chunk in examples.chunks(32) {
        let batch = Batch::new(chunk)?;
        let mut tape = Tape::<f32>::new();
        let vars = ParamVars::bind_constant(&mut tape, params);
        let out = forward(&mut tape, cfg, &vars, &batch)?;
        let (_, m) = compute_loss(&mut tape, &out, &batch, loss_cfg)?;
        weighted += m.loss * m.tokens as f64;
        total.tokens += m.tokens;
        total.surface.merge(m.surface);
        if total.factors.is_empty() {
            total.factors = m.factors.clone();
        } else {
            total.factors.iter_mut().zip(&m.factors).for_each(|(a, b)| a.merge(*b));
        }
    }
    total.loss = weighted / total.tokens.max(1) as f64;
    Ok(total)
}

fn check_vocab_sizes(cfg: &ModelConfig, v: &Vocabularies) -> Result<()> {
    let pairs = [
        ("source", cfg.source_vocab_size, v.source.len()),
        ("target", cfg.target_vocab_size, v.target.len()),
    ];
    for (what, c, n) in pairs {
        if c != n {
            return Err(Error::Config(format!("{what} vocabulary has {n} entries, config says {c}")));
        }
    }
    if cfg.source_factor_specs.len() != v.source_factors.len() || cfg.target_factor_specs.len() != v.target_factors.len()
    {
        return Err(Error::Config("factor stream counts differ between config and data".into()));
    }
    for (i, (s, fv)) in cfg.source_factor_specs.iter().zip(&v.source_factors).enumerate() {
        if s.vocab_size != fv.len() {
            return Err(Error::Config(format!("source factor {i} vocabulary size mismatch")));
        }
    }
    for (i, (&s, fv)) in cfg.target_factor_specs.iter().zip(&v.target_factors).enumerate() {
        if s != fv.len() {
            return Err(Error::Config(format!("target factor {i} vocabulary size mismatch")));
        }
    }
    Ok(())
}

struct Run<'a> {
    cfg: &'a ModelConfig,
    tcfg: &'a TrainConfig,
    out_dir: &'a Path,
    validation: &'a [Example],
    records: Vec<CheckpointRecord>,
}

impl Run<'_> {
    fn checkpoint(
        &mut self,
        params: &ModelParams,
        adam: &Adam,
        update: usize,
        epoch: u64,
        position: IterPosition,
    ) -> Result<()> {
        let file = format!("params.{update:05}");
        params.save(&self.out_dir.join(&file))?;
        let val = evaluate(self.cfg, params, self.validation, &self.tcfg.loss_config())?;
        log::info!("checkpoint {update}: validation loss {:.5}", val.loss);
        self.records.retain(|r| r.update != update);
        self.records.push(CheckpointRecord {
            update,
            validation_loss: val.loss,
            file: self.out_dir.join(&file),
        });
        write_metrics(self.out_dir, &self.records)?;
        let best = select_best(&self.records, 1)[0];
        std::fs::copy(&best.file, self.out_dir.join(BEST_PARAMS))
            .map_err(|e| Error::io(BEST_PARAMS, e))?;
        let state_dir = self.out_dir.join(STATE_DIR);
        std::fs::create_dir_all(&state_dir).map_err(|e| Error::io(state_dir.display().to_string(), e))?;
        adam.save(&state_dir, params)?;
        let state = ResumeState {
            update,
            epoch,
            position,
            adam_steps: adam.steps(),
            params_file: file,
        };
        let path = state_dir.join(STATE_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Trains on `set`, checkpointing into `out_dir`.
///
/// Checkpoints are written at update 0, every `checkpoint_interval` updates
/// and at `max_updates`. Each appends a line to the metrics sidecar and
/// refreshes `params.best`. At the end the best `average_best` checkpoints
/// are averaged into `params.avg`.
pub fn train(
    cfg: &ModelConfig,
    set: &ShardSet,
    validation: &[Example],
    tcfg: &TrainConfig,
    out_dir: &Path,
    start: TrainStart,
) -> Result<TrainSummary> {
    cfg.validate()?;
    tcfg.validate()?;
    if validation.is_empty() {
        return Err(Error::Config("validation data is empty".into()));
    }
    if set.manifest.sentences == 0 {
        return Err(Error::Input("training data is empty".into()));
    }
    let vocabs = set.vocabularies()?;
    check_vocab_sizes(cfg, &vocabs)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut run = Run {
        cfg,
        tcfg,
        out_dir,
        validation,
        records: Vec::new(),
    };
    let (mut params, mut adam, mut update, mut epoch, mut position) = match start {
        TrainStart::Resume => {
            let state_dir = out_dir.join(STATE_DIR);
            let path = state_dir.join(STATE_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
            let st: ResumeState = serde_json::from_str(&text)?;
            let params = ModelParams::load(&out_dir.join(&st.params_file))?;
            let adam = Adam::load(&state_dir, tcfg.learning_rate, tcfg.warmup, st.adam_steps)?;
            run.records = read_metrics(out_dir)?;
            run.records.retain(|r| r.update <= st.update);
            (params, adam, st.update, st.epoch, st.position)
        }
        other => {
            let params = match other {
                TrainStart::Params(p) => p,
                _ => ModelParams::init(cfg, tcfg.seed)?,
            };
            (
                params,
                Adam::new(tcfg.learning_rate, tcfg.warmup),
                0,
                0,
                IterPosition::default(),
            )
        }
    };
    params.check_schema(cfg)?;
    if let Some(spec) = &tcfg.freeze {
        freeze_params(&mut params, spec);
    }
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_text()).map_err(|e| Error::io(CONFIG_FILE, e))?;
    vocabs.save(out_dir)?;
    if update == 0 {
        run.checkpoint(&params, &adam, 0, epoch, position)?;
    }

    let loss_cfg = tcfg.loss_config();
    let mut losses = Vec::new();
    let mut last_backward_ops = 0;
    while update < tcfg.max_updates {
        let mut it = ShardIterator::resume(set, tcfg.batch_tokens, epoch_seed(tcfg.seed, epoch), position);
        while update < tcfg.max_updates {
            let Some(examples) = it.next() else { break };
            let batch = Batch::new(&examples?)?;
            let mut tape = Tape::<f32>::new();
            let vars = ParamVars::bind(&mut tape, &params);
            let out = forward(&mut tape, cfg, &vars, &batch)?;
            let (loss, metrics) = compute_loss(&mut tape, &out, &batch, &loss_cfg)?;
            if !metrics.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {} at update {}",
                    metrics.loss,
                    update + 1
                )));
            }
            tape.backward(loss)?;
            last_backward_ops = tape.backward_ops();
            adam.update(&mut params, |name| vars.get(name).ok().and_then(|v| tape.grad(v)))?;
            update += 1;
            losses.push(metrics.loss);
            position = it.position();
            log::debug!("update {update}: loss {:.5}", metrics.loss);
            if update % tcfg.checkpoint_interval == 0 || update == tcfg.max_updates {
                run.checkpoint(&params, &adam, update, epoch, position)?;
            }
        }
        if update < tcfg.max_updates {
            epoch += 1;
            position = IterPosition::default();
        }
    }

    let n = tcfg.average_best.min(run.records.len());
    let sets = select_best(&run.records, n)
        .into_iter()
        .map(|r| ModelParams::load(&r.file))
        .collect::<Result<Vec<_>>>()?;
    average_params(&sets)?.save(&out_dir.join(AVERAGED_PARAMS))?;
    Ok(TrainSummary {
        params,
        losses,
        checkpoints: run.records,
        last_backward_ops,
    })
}

/// Model directory produced by [`train`].
pub struct TrainedModel {
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    pub dir: PathBuf,
}

impl TrainedModel {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Self {
            config: ModelConfig::from_text(&text)?,
            vocabs: Vocabularies::load(dir)?,
            dir: dir.to_path_buf(),
        })
    }

    /// `params.best` unless another file is named.
    pub fn params_path(&self, file: Option<&str>) -> PathBuf {
        self.dir.join(file.unwrap_or(BEST_PARAMS))
    }
}
