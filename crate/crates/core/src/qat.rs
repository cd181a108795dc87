//! Quantization-aware training: proxy-episode training, fine-tuning, float pre-training,
//! and the weight checkpoint format.

use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::inference::{evaluate_accuracy, Evaluator, PackedModel};
use crate::memory::QuantPolicy;
use crate::nn::{batch_loss_grad, Adam, FakeQuant, FloatModel, LayerParams};
use crate::quant::{calibrate_act_ranges, MIN_CLIP};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MPQC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FloatModel,
    pub val_top1: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64)
}

/// Train `model` with fake quantization `fq` and return it with its validation top-1.
pub fn train(
    g: &NetworkGraph,
    model: &FloatModel,
    fq: &FakeQuant,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate(g)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split"));
    }
    let mut m = model.clone();
    let mut opt = Adam::new(m.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&[f64]> = batch.iter().map(|&i| train.image(i)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.label(i)).collect();
            let (loss, grad) = batch_loss_grad(g, &m, fq, &images, &labels)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            total += loss * batch.len() as f64;
            opt.step(m.values_mut(), grad.values());
            for c in m.clips.values_mut() {
                *c = c.max(MIN_CLIP);
            }
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let val_top1 = evaluate_accuracy(
        g,
        &Evaluator::Float {
            model: &m,
            fq: fq.clone(),
        },
        val,
    )?
    .top1;
    Ok(TrainOutcome {
        model: m,
        val_top1,
        epoch_losses,
    })
}

/// Quantization-aware training under `policy` for `cfg.epochs` epochs.
pub fn train_qat(
    g: &NetworkGraph,
    model: &FloatModel,
    policy: &QuantPolicy,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    policy.validate(g)?;
    train(
        g,
        model,
        &FakeQuant::from_policy(policy),
        train_set,
        val,
        cfg,
    )
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: FloatModel,
    pub val_top1: f64,
    pub epoch_losses: Vec<f64>,
    /// Integer model, present when every tensor of the policy is quantized.
    pub packed: Option<PackedModel>,
}

/// Default fine-tuning length in epochs.
pub const FINETUNE_EPOCHS: usize = 15;

/// Longer quantization-aware training of the final policy, then export.
pub fn finetune(
    g: &NetworkGraph,
    model: &FloatModel,
    policy: &QuantPolicy,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let out = train_qat(g, model, policy, train_set, val, cfg)?;
    let packed = if policy.is_fully_quantized() {
        Some(PackedModel::build(g, &out.model, policy)?)
    } else {
        None
    };
    Ok(FinetuneOutcome {
        model: out.model,
        val_top1: out.val_top1,
        epoch_losses: out.epoch_losses,
        packed,
    })
}

/// Float training from a seeded initialization, followed by clip calibration on up to
/// `calib` training images.
pub fn pretrain(
    g: &NetworkGraph,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    calib: usize,
) -> Result<TrainOutcome> {
    let init = FloatModel::init(g, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut out = train(g, &init, &FakeQuant::none(), train_set, val, cfg)?;
    let n = calib.clamp(1, train_set.len());
    let idx: Vec<usize> = (0..n).collect();
    for (t, r) in calibrate_act_ranges(g, &out.model, &train_set.subset(&idx))? {
        out.model.clips.insert(t, r.clip_max);
    }
    Ok(out)
}

/// Serialize weights, biases and clipping bounds (versioned little-endian binary).
pub fn write_checkpoint(m: &FloatModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
    out.write_u32::<LE>(m.params.len() as u32).unwrap();
    for (&id, p) in &m.params {
        out.write_u32::<LE>(id).unwrap();
        for v in [&p.weight, &p.bias] {
            out.write_u32::<LE>(v.len() as u32).unwrap();
            for &x in v.iter() {
                out.write_f64::<LE>(x).unwrap();
            }
        }
    }
    out.write_u32::<LE>(m.clips.len() as u32).unwrap();
    for (&id, &c) in &m.clips {
        out.write_u32::<LE>(id).unwrap();
        out.write_f64::<LE>(c).unwrap();
    }
    out
}

pub fn read_checkpoint(mut r: &[u8]) -> Result<FloatModel> {
    let fmt = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LE>().map_err(fmt)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut m = FloatModel::default();
    let vec = |r: &mut &[u8]| -> Result<Vec<f64>> {
        let n = r.read_u32::<LE>().map_err(fmt)? as usize;
        if n * 8 > r.len() {
            return Err(Error::Format(
                "checkpoint length field exceeds file size".into(),
            ));
        }
        (0..n).map(|_| r.read_f64::<LE>().map_err(fmt)).collect()
    };
    for _ in 0..r.read_u32::<LE>().map_err(fmt)? {
        let id = r.read_u32::<LE>().map_err(fmt)?;
        let weight = vec(&mut r)?;
        let bias = vec(&mut r)?;
        m.params.insert(id, LayerParams { weight, bias });
    }
    for _ in 0..r.read_u32::<LE>().map_err(fmt)? {
        let id = r.read_u32::<LE>().map_err(fmt)?;
        m.clips.insert(id, r.read_f64::<LE>().map_err(fmt)?);
    }
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes in checkpoint",
            r.len()
        )));
    }
    Ok(m)
}

pub fn save_checkpoint(m: &FloatModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(m)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FloatModel> {
    let path = path.as_ref();
    read_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
