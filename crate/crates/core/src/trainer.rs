//! Training loops for the experiment arms and checkpoint files.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_frames, Corpus, FrameLabelSeq, UtteranceRecord};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, multitask_loss, rnnt_grad, TaskWeights};
use crate::models::{sample_switch_with, split_ep_store, JointModel, ModelConfig, SwitchSource};
use crate::netkit::{read_params, write_params, ParamStore, Tensor2};

/// Experiment arm.
///
/// `B1` trains separate endpointer and recogniser stores. `E1` optimises the
/// joint loss with the endpointer reading audio only. `E2` feeds the
/// endpointer shared-encoder latents. `E3` picks the input per utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    B1,
    E1,
    E2,
    E3,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::B1, Arm::E1, Arm::E2, Arm::E3];

    pub fn name(self) -> &'static str {
        match self {
            Arm::B1 => "B1",
            Arm::E1 => "E1",
            Arm::E2 => "E2",
            Arm::E3 => "E3",
        }
    }

    /// Endpointer input used at inference time.
    pub fn routing(self) -> EpRouting {
        match self {
            Arm::B1 | Arm::E1 => EpRouting::AudioOnly,
            Arm::E2 => EpRouting::LatentOnly,
            Arm::E3 => EpRouting::Switch,
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}; expected B1, E1, E2 or E3")))
    }
}

/// Which input feeds the endpointer while streaming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpRouting {
    AudioOnly,
    LatentOnly,
    /// Audio while the recogniser is idle, latents once it runs.
    Switch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arm: Arm,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Probability that an E3 utterance routes audio frames to the endpointer.
    pub switch_prob: f64,
    pub append_eos: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arm: Arm::E3,
            lambda: 0.98,
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            switch_prob: 0.5,
            append_eos: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        TaskWeights::from_lambda(self.lambda)?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::Config(format!("switch_prob {} outside [0, 1]", self.switch_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arm: Option<Arm>,
    pub asr_loss: Vec<f64>,
    pub ep_loss: Vec<f64>,
    pub multitask_loss: Vec<f64>,
    /// Mean multitask loss over the last 50 steps.
    pub final_loss: f64,
    pub audio_routed: usize,
    pub latent_routed: usize,
    pub checkpoint: Option<PathBuf>,
}

/// `targets` followed by the end-of-query id.
pub fn append_eos_targets(targets: &[usize], eos: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(targets.len() + 1);
    v.extend_from_slice(targets);
    v.push(eos);
    v
}

/// Inverse of [`append_eos_targets`]: drops a trailing end-of-query id.
pub fn strip_eos(tokens: &[usize], eos: usize) -> &[usize] {
    match tokens.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => tokens,
    }
}

/// An utterance ready for training.
#[derive(Debug, Clone)]
pub struct Example {
    pub frames: Vec<Vec<f64>>,
    pub labels: FrameLabelSeq,
    pub targets: Vec<usize>,
}

impl Example {
    pub fn from_record(utt: &UtteranceRecord, cfg: &ModelConfig, append_eos: bool) -> Result<Self> {
        utt.validate(Some(cfg.d_in), Some(cfg.vocab_size))?;
        let targets = if append_eos {
            append_eos_targets(&utt.target_tokens, cfg.eos_id())
        } else {
            utt.target_tokens.clone()
        };
        Ok(Example {
            frames: utt.frames.iter().map(|f| f.features.clone()).collect(),
            labels: label_frames(utt)?,
            targets,
        })
    }
}

/// Mutable parameter stores: one for joint arms, two for `B1`.
pub enum Stores<'a> {
    Joint(&'a mut ParamStore),
    Split {
        ep: &'a mut ParamStore,
        asr: &'a mut ParamStore,
    },
}

impl Stores<'_> {
    fn ep(&mut self) -> &mut ParamStore {
        match self {
            Stores::Joint(s) => s,
            Stores::Split { ep, .. } => ep,
        }
    }

    fn asr(&mut self) -> &mut ParamStore {
        match self {
            Stores::Joint(s) => s,
            Stores::Split { asr, .. } => asr,
        }
    }
}

/// Per-utterance losses before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UttLoss {
    pub asr: f64,
    pub ep: f64,
}

/// Forward and backward pass for one utterance. Gradients of
/// `w.asr·asr + w.ep·ep` are added to the stores; a zero weight skips that
/// task's backward pass entirely.
pub fn utterance_pass(
    model: &JointModel,
    mut stores: Stores,
    ex: &Example,
    source: SwitchSource,
    w: TaskWeights,
) -> Result<UttLoss> {
    let (lat, shared_cache) = model.shared.forward(stores.asr(), &ex.frames)?;
    let (enc, trunk_cache) = model.trunk.forward(stores.asr(), &lat)?;
    let (lattice, tr_cache) = model.transducer.lattice(stores.asr(), &enc, &ex.targets)?;
    let rg = rnnt_grad(&lattice, &ex.targets)?;

    let ep_inputs = match source {
        SwitchSource::AudioFrames => &ex.frames,
        SwitchSource::SharedLatent => &lat,
    };
    let (post, ep_cache) = model.ep.forward(stores.ep(), ep_inputs, source)?;
    let ce = ce_loss(&post, &ex.labels)?;

    let mut dlat: Option<Vec<Vec<f64>>> = None;
    if w.ep != 0.0 {
        let dlogits: Vec<[f64; 4]> = ce.grad_logits.iter().map(|g| g.map(|v| v * w.ep)).collect();
        let dinputs = model.ep.backward(stores.ep(), &ep_cache, &dlogits);
        if source == SwitchSource::SharedLatent {
            dlat = Some(dinputs);
        }
    }
    if w.asr != 0.0 {
        let dlp: Vec<f64> = rg.grad.iter().map(|g| g * w.asr).collect();
        let denc = model.transducer.backward(stores.asr(), &enc, &lattice, &tr_cache, &dlp);
        let d = model.trunk.backward(stores.asr(), &trunk_cache, denc);
        dlat = Some(match dlat {
            None => d,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(&d) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                acc
            }
        });
    }
    if let Some(d) = dlat {
        model.shared.backward(stores.asr(), &ex.frames, &shared_cache, d);
    }
    Ok(UttLoss {
        asr: rg.loss,
        ep: ce.value,
    })
}

/// Adam with bias-corrected moments and a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor2> = store
            .iter()
            .map(|p| Tensor2::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated gradients. A parameter whose
    /// gradient has always been zero is left bit-identical.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                if m[i] != 0.0 {
                    *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// Trained parameters, merged into one store for every arm.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model_cfg: ModelConfig,
    pub store: ParamStore,
    pub report: TrainReport,
}

impl Trained {
    pub fn model(&self) -> Result<JointModel> {
        JointModel::bind(self.model_cfg, &self.store)
    }
}

// Independent streams of one seed so that routing draws never perturb
// initialisation or shuffling.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_SWITCH: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn check_corpus(corpus: &Corpus, model_cfg: &ModelConfig) -> Result<()> {
    if corpus.records.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let h = &corpus.header;
    if h.d_in != model_cfg.d_in {
        return Err(Error::Config(format!(
            "corpus has {} features per frame but the model expects {}",
            h.d_in, model_cfg.d_in
        )));
    }
    if h.vocab_size != model_cfg.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} does not match model vocabulary {}",
            h.vocab_size, model_cfg.vocab_size
        )));
    }
    Ok(())
}

/// Trains one arm. Deterministic given `(cfg, model_cfg, corpus)`.
pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, corpus: &Corpus) -> Result<Trained> {
    let mut report = TrainReport::default();
    let mut trained = train_into(cfg, model_cfg, corpus, &mut report)?;
    trained.report = report;
    Ok(trained)
}

/// Like [`train`], but fills `report` step by step so that it survives a
/// divergence error. The returned `Trained` carries an empty report.
pub fn train_into(cfg: &TrainConfig, model_cfg: &ModelConfig, corpus: &Corpus, report: &mut TrainReport) -> Result<Trained> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_corpus(corpus, model_cfg)?;
    let examples = corpus
        .records
        .iter()
        .map(|r| Example::from_record(r, model_cfg, cfg.append_eos))
        .collect::<Result<Vec<_>>>()?;

    let (init_model, store) = JointModel::init(*model_cfg, &mut stream(cfg.seed, STREAM_INIT))?;
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut switch_rng = stream(cfg.seed, STREAM_SWITCH);

    let (mut main, mut ep_store) = match cfg.arm {
        Arm::B1 => {
            let (ep, asr) = split_ep_store(&store)?;
            (asr, Some(ep))
        }
        _ => (store, None),
    };
    let model = match &ep_store {
        Some(ep) => JointModel::bind_split(*model_cfg, ep, &main)?,
        None => init_model,
    };
    let mut opt_main = Adam::new(&main, cfg.learning_rate);
    let mut opt_ep = ep_store.as_ref().map(|s| Adam::new(s, cfg.learning_rate));

    let weights = match cfg.arm {
        // each B1 store sees only its own task's gradient
        Arm::B1 => TaskWeights { asr: 1.0, ep: 1.0 },
        _ => TaskWeights::from_lambda(cfg.lambda)?,
    };

    *report = TrainReport {
        arm: Some(cfg.arm),
        ..TrainReport::default()
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let inv_batch = 1.0 / cfg.batch_size as f64;
    let w = TaskWeights {
        asr: weights.asr * inv_batch,
        ep: weights.ep * inv_batch,
    };

    for step in 0..cfg.steps {
        main.zero_grads();
        if let Some(s) = ep_store.as_mut() {
            s.zero_grads();
        }
        let (mut asr_sum, mut ep_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            let source = match cfg.arm {
                Arm::B1 | Arm::E1 => SwitchSource::AudioFrames,
                Arm::E2 => SwitchSource::SharedLatent,
                Arm::E3 => sample_switch_with(&mut switch_rng, cfg.switch_prob),
            };
            match source {
                SwitchSource::AudioFrames => report.audio_routed += 1,
                SwitchSource::SharedLatent => report.latent_routed += 1,
            }
            let stores = match ep_store.as_mut() {
                Some(ep) => Stores::Split { ep, asr: &mut main },
                None => Stores::Joint(&mut main),
            };
            let l = utterance_pass(&model, stores, ex, source, w)?;
            asr_sum += l.asr;
            ep_sum += l.ep;
        }
        let asr = asr_sum * inv_batch;
        let ep = ep_sum * inv_batch;
        if !asr.is_finite() {
            return Err(Error::Diverged { step, what: "ASR loss" });
        }
        if !ep.is_finite() {
            return Err(Error::Diverged { step, what: "EP loss" });
        }
        opt_main.step(&mut main);
        if let (Some(opt), Some(s)) = (opt_ep.as_mut(), ep_store.as_mut()) {
            opt.step(s);
        }
        report.asr_loss.push(asr);
        report.ep_loss.push(ep);
        report.multitask_loss.push(multitask_loss(asr, ep, cfg.lambda)?);
    }
    let tail = &report.multitask_loss[report.multitask_loss.len().saturating_sub(50)..];
    report.final_loss = tail.iter().sum::<f64>() / tail.len() as f64;

    if let Some(ep) = ep_store {
        main.merge(&ep)?;
    }
    let mut merged = ParamStore::new();
    // restore the canonical parameter order so checkpoints are comparable
    for p in model_param_order(&model, &main) {
        merged.add(&p.0, p.1)?;
    }
    Ok(Trained {
        model_cfg: *model_cfg,
        store: merged,
        report: TrainReport::default(),
    })
}

fn model_param_order(model: &JointModel, store: &ParamStore) -> Vec<(String, Tensor2)> {
    let (_, reference) = JointModel::init(model.cfg, &mut ChaCha8Rng::seed_from_u64(0)).expect("validated config");
    reference
        .iter()
        .map(|p| {
            let id = store.id(&p.name).expect("trained store has every model parameter");
            (p.name.clone(), store.value(id).clone())
        })
        .collect()
}

/// Mean per-frame cross-entropy of the endpointer on `examples` when fed
/// from `source`.
pub fn heldout_ce(model: &JointModel, store: &ParamStore, examples: &[Example], source: SwitchSource) -> Result<f64> {
    let mut total = 0.0;
    let mut frames = 0usize;
    for ex in examples {
        let inputs = match source {
            SwitchSource::AudioFrames => ex.frames.clone(),
            SwitchSource::SharedLatent => model.shared_encode(store, &ex.frames)?,
        };
        let post = model.ep_forward(store, &inputs, source)?;
        let ce = ce_loss(&post, &ex.labels)?;
        total += ce.value * ex.frames.len() as f64;
        frames += ex.frames.len();
    }
    Ok(total / frames as f64)
}

pub const CHECKPOINT_FORMAT: &str = "jointep-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    model: ModelConfig,
}

pub fn save_checkpoint(path: &Path, model_cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_FORMAT.to_string(),
        model: *model_cfg,
    };
    write_params(path, store, &meta)
}

/// Loads parameters and the model configuration they were saved with.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let (store, meta) = read_params(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Integrity(format!("{}: bad checkpoint metadata: {e}", path.display())))?;
    if meta.kind != CHECKPOINT_FORMAT {
        return Err(Error::Integrity(format!("{}: not a checkpoint ({})", path.display(), meta.kind)));
    }
    Ok((meta.model, store))
}

/// Loads one or more checkpoints (B1 is saved as two), merges them and binds
/// the result to `expected`, failing with a shape error naming the first
/// parameter that does not fit.
pub fn load_model(paths: &[PathBuf], expected: Option<&ModelConfig>) -> Result<(JointModel, ParamStore)> {
    let mut merged: Option<(ModelConfig, ParamStore)> = None;
    for path in paths {
        let (cfg, store) = load_checkpoint(path)?;
        match merged.as_mut() {
            None => merged = Some((cfg, store)),
            Some((first, acc)) => {
                if *first != cfg {
                    return Err(Error::Invalid(format!(
                        "{} was saved with a different model configuration",
                        path.display()
                    )));
                }
                acc.merge(&store)?;
            }
        }
    }
    let (saved, store) = merged.ok_or_else(|| Error::Invalid("no checkpoint given".into()))?;
    let cfg = expected.copied().unwrap_or(saved);
    let model = JointModel::bind(cfg, &store)?;
    Ok((model, store))
}

/// Checkpoint files for a trained arm: `(file name, parameters)`. B1 keeps
/// its endpointer and recogniser in separate files.
pub fn checkpoint_files(arm: Arm, store: &ParamStore) -> Result<Vec<(&'static str, ParamStore)>> {
    Ok(match arm {
        Arm::B1 => {
            let (ep, asr) = split_ep_store(store)?;
            vec![("ep.ckpt.json", ep), ("asr.ckpt.json", asr)]
        }
        _ => vec![("model.ckpt.json", store.clone())],
    })
}
