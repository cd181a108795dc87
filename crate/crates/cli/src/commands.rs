use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::Serialize;

use mixq_core::agent::AgentConfig;
use mixq_core::data::{
    load_dataset_dir, synthetic_shapes, write_idx_dir, write_raw_dir, Dataset, Splits,
};
use mixq_core::graph::{load_graph, NetworkGraph};
use mixq_core::inference::{evaluate_accuracy, Evaluator, PackedModel};
use mixq_core::memory::{
    check_constraints, FootprintOptions, MemoryBudget, Precision, QuantPolicy,
};
use mixq_core::nn::FakeQuant;
use mixq_core::qat::{self, TrainConfig, FINETUNE_EPOCHS};
use mixq_core::search::{self, SearchConfig, SearchMode};

/// What a command did, for the exit code and the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub violated: bool,
}

impl Outcome {
    fn inputs(inputs: Vec<PathBuf>) -> Self {
        Outcome {
            inputs,
            violated: false,
        }
    }

    pub fn exit_code(&self) -> u8 {
        if self.violated {
            2
        } else {
            0
        }
    }
}

fn parse_bits(s: &str) -> Result<Precision, String> {
    let bits: u32 = s.parse().map_err(|_| format!("`{s}` is not a bitwidth"))?;
    Precision::try_from(bits).map_err(|_| format!("bitwidth must be 2, 4, 8 or 32, got {bits}"))
}

fn train_config(lr: f64, batch: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn load_splits(dir: &Path) -> anyhow::Result<Splits> {
    load_dataset_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn check_dataset(g: &NetworkGraph, d: &Dataset) -> anyhow::Result<()> {
    let input = g.tensor_shape(g.input_layer().id);
    if d.image_shape() != input {
        bail!(
            "dataset images are {:?} but the graph expects {:?}",
            d.image_shape(),
            input
        );
    }
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FootprintArgs {
    /// Network graph JSON
    #[arg(long)]
    pub graph: PathBuf,

    /// Policy JSON; without it every tensor uses --bits
    #[arg(long)]
    pub policy: Option<PathBuf>,

    /// Uniform bitwidth when no policy is given (2, 4, 8 or 32)
    #[arg(long, default_value = "8", value_parser = parse_bits)]
    pub bits: Precision,

    /// ROM budget in bytes
    #[arg(long)]
    pub rom_bytes: Option<u64>,

    /// RAM budget in bytes
    #[arg(long)]
    pub ram_bytes: Option<u64>,

    /// Leave out the per-channel requantization constants
    #[arg(long)]
    pub no_requant_overhead: bool,

    /// Directory for rom.csv and ram.csv
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn footprint(a: &FootprintArgs) -> anyhow::Result<Outcome> {
    let g = load_graph(&a.graph)?;
    let mut inputs = vec![a.graph.clone()];
    let policy = match &a.policy {
        Some(p) => {
            inputs.push(p.clone());
            let policy = QuantPolicy::load(p)?;
            policy.validate(&g)?;
            policy
        }
        None => QuantPolicy::uniform(&g, a.bits, a.bits),
    };
    let budget = MemoryBudget {
        rom_bytes: a.rom_bytes.unwrap_or(u64::MAX),
        ram_bytes: a.ram_bytes.unwrap_or(u64::MAX),
    };
    let opts = FootprintOptions {
        include_requant_overhead: !a.no_requant_overhead,
    };
    let check = check_constraints(&g, &policy, &budget, opts)?;
    let r = &check.report;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    r.write_rom_csv(create(&a.out_dir.join("rom.csv"))?)?;
    r.write_ram_csv(create(&a.out_dir.join("ram.csv"))?)?;

    let verdict = |ok: bool, limit: Option<u64>| match (ok, limit) {
        (_, None) => String::new(),
        (true, Some(l)) => format!(" (budget {l}, ok)"),
        (false, Some(l)) => format!(" (budget {l}, EXCEEDED)"),
    };
    println!(
        "rom_bytes {}{}",
        r.rom_total,
        verdict(check.m1_ok, a.rom_bytes)
    );
    println!(
        "ram_bytes {}{} peak at layer {}",
        r.ram_peak,
        verdict(check.m2_ok, a.ram_bytes),
        r.ram_peak_step
    );
    Ok(Outcome {
        inputs,
        violated: !check.ok(),
    })
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Idx,
    Raw,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenDatasetArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 6000)]
    pub train: usize,

    #[arg(long, default_value_t = 1000)]
    pub test: usize,

    #[arg(long, value_enum, default_value = "idx")]
    pub format: DatasetFormat,

    #[arg(long, env = "MIXQ_SEED", default_value_t = 0)]
    pub seed: u64,
}

pub fn gen_dataset(a: &GenDatasetArgs) -> anyhow::Result<Outcome> {
    let splits = synthetic_shapes(a.train, a.test, a.seed);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    match a.format {
        DatasetFormat::Idx => write_idx_dir(&a.out, &splits)?,
        DatasetFormat::Raw => write_raw_dir(&a.out, &splits)?,
    }
    println!(
        "wrote {} train / {} test images to {}",
        a.train,
        a.test,
        a.out.display()
    );
    Ok(Outcome::default())
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PretrainArgs {
    #[arg(long)]
    pub graph: PathBuf,

    /// Dataset directory (IDX files or raw tensors)
    #[arg(long)]
    pub dataset: PathBuf,

    #[arg(long)]
    pub out_checkpoint: PathBuf,

    #[arg(long, default_value_t = 5)]
    pub epochs: usize,

    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,

    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    /// Training images used to calibrate activation clips
    #[arg(long, default_value_t = 256)]
    pub calib: usize,

    #[arg(long, env = "MIXQ_SEED", default_value_t = 0)]
    pub seed: u64,
}

pub fn pretrain(a: &PretrainArgs) -> anyhow::Result<Outcome> {
    let g = load_graph(&a.graph)?;
    let splits = load_splits(&a.dataset)?;
    check_dataset(&g, &splits.train)?;
    let cfg = train_config(a.learning_rate, a.batch_size, a.epochs, a.seed);
    let out = qat::pretrain(&g, &splits.train, &splits.test, &cfg, a.calib)?;
    for (e, l) in out.epoch_losses.iter().enumerate() {
        eprintln!("epoch {} loss {l:.4}", e + 1);
    }
    qat::save_checkpoint(&out.model, &a.out_checkpoint)?;
    println!("top1 {}", out.val_top1);
    Ok(Outcome::inputs(vec![a.graph.clone(), a.dataset.clone()]))
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SearchArgs {
    #[arg(long)]
    pub graph: PathBuf,

    #[arg(long)]
    pub dataset: PathBuf,

    /// Pretrained float checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub rom_bytes: u64,

    #[arg(long)]
    pub ram_bytes: u64,

    #[arg(long, default_value = "concurrent", value_parser = ["independent", "concurrent"])]
    pub mode: String,

    /// Episodes per search phase [default: 600 concurrent, 300 independent]
    #[arg(long)]
    pub episodes: Option<usize>,

    /// Warm-up episodes with random actions [default: a fifth of the episodes]
    #[arg(long)]
    pub warmup: Option<usize>,

    #[arg(long, env = "MIXQ_SEED", default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out_policy: PathBuf,

    #[arg(long)]
    pub history_csv: PathBuf,

    /// Keep the first and last weighted layers at 8 bits
    #[arg(long)]
    pub freeze_first_last: bool,

    #[arg(long)]
    pub no_requant_overhead: bool,

    /// Learning rate of the per-episode training
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,

    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    /// JSON file overriding agent hyperparameters
    #[arg(long)]
    pub agent_config: Option<PathBuf>,
}

pub fn search(a: &SearchArgs) -> anyhow::Result<Outcome> {
    let g = load_graph(&a.graph)?;
    let splits = load_splits(&a.dataset)?;
    check_dataset(&g, &splits.train)?;
    let model = qat::load_checkpoint(&a.checkpoint)?;
    let mut inputs = vec![a.graph.clone(), a.dataset.clone(), a.checkpoint.clone()];

    let mode: SearchMode = a.mode.parse()?;
    let mut cfg = SearchConfig::new(mode, MemoryBudget::new(a.rom_bytes, a.ram_bytes)?);
    if let Some(e) = a.episodes {
        cfg.episodes = e;
        cfg.warmup = e / 5;
    }
    if let Some(w) = a.warmup {
        cfg.warmup = w;
    }
    cfg.seed = a.seed;
    cfg.freeze_first_last = a.freeze_first_last;
    cfg.include_requant_overhead = !a.no_requant_overhead;
    cfg.train.learning_rate = a.learning_rate;
    cfg.train.batch_size = a.batch_size;
    if let Some(p) = &a.agent_config {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.agent = serde_json::from_str::<AgentConfig>(&text)
            .with_context(|| format!("parsing {}", p.display()))?;
        inputs.push(p.clone());
    }

    let res = search::search_with(&g, &model, &splits.train, &cfg, &mut |r| {
        eprintln!(
            "episode {:>4} top1 {:.4} rom {} ram {}{}",
            r.episode,
            r.top1,
            r.rom_bytes,
            r.ram_bytes,
            if r.is_best { " *" } else { "" }
        );
    })?;
    res.best_policy.save(&a.out_policy)?;
    search::write_history_csv(&res.history, create(&a.history_csv)?)?;
    println!("best_episode {}", res.best_episode);
    println!("top1 {}", res.best_top1);
    Ok(Outcome::inputs(inputs))
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FinetuneArgs {
    #[arg(long)]
    pub graph: PathBuf,

    #[arg(long)]
    pub dataset: PathBuf,

    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub policy: PathBuf,

    #[arg(long, default_value_t = FINETUNE_EPOCHS)]
    pub epochs: usize,

    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,

    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    #[arg(long, env = "MIXQ_SEED", default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out_checkpoint: PathBuf,

    /// Also write the packed integer model (fully quantized policies only)
    #[arg(long)]
    pub out_model: Option<PathBuf>,
}

pub fn finetune(a: &FinetuneArgs) -> anyhow::Result<Outcome> {
    let g = load_graph(&a.graph)?;
    let splits = load_splits(&a.dataset)?;
    check_dataset(&g, &splits.train)?;
    let model = qat::load_checkpoint(&a.checkpoint)?;
    let policy = QuantPolicy::load(&a.policy)?;
    if a.out_model.is_some() && !policy.is_fully_quantized() {
        bail!("--out-model needs a policy without 32-bit tensors");
    }
    let cfg = train_config(a.learning_rate, a.batch_size, a.epochs, a.seed);
    let out = qat::finetune(&g, &model, &policy, &splits.train, &splits.test, &cfg)?;
    for (e, l) in out.epoch_losses.iter().enumerate() {
        eprintln!("epoch {} loss {l:.4}", e + 1);
    }
    qat::save_checkpoint(&out.model, &a.out_checkpoint)?;
    if let (Some(path), Some(packed)) = (&a.out_model, &out.packed) {
        packed.save(path)?;
    }
    println!("top1 {}", out.val_top1);
    Ok(Outcome::inputs(vec![
        a.graph.clone(),
        a.dataset.clone(),
        a.checkpoint.clone(),
        a.policy.clone(),
    ]))
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExportArgs {
    #[arg(long)]
    pub graph: PathBuf,

    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub policy: PathBuf,

    /// Packed model output
    #[arg(long)]
    pub out: PathBuf,
}

pub fn export(a: &ExportArgs) -> anyhow::Result<Outcome> {
    let g = load_graph(&a.graph)?;
    let model = qat::load_checkpoint(&a.checkpoint)?;
    let policy = QuantPolicy::load(&a.policy)?;
    let packed = PackedModel::build(&g, &model, &policy)?;
    packed.save(&a.out)?;
    let bytes = std::fs::metadata(&a.out).map(|m| m.len()).unwrap_or(0);
    println!("wrote {} ({bytes} bytes)", a.out.display());
    Ok(Outcome::inputs(vec![
        a.graph.clone(),
        a.checkpoint.clone(),
        a.policy.clone(),
    ]))
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub graph: PathBuf,

    #[arg(long)]
    pub dataset: PathBuf,

    /// Packed integer model
    #[arg(
        long,
        conflicts_with = "checkpoint",
        required_unless_present = "checkpoint"
    )]
    pub model: Option<PathBuf>,

    /// Float checkpoint, fake-quantized with --policy when given
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, requires = "checkpoint")]
    pub policy: Option<PathBuf>,

    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,

    #[arg(long, default_value = "per_class.csv")]
    pub per_class_csv: PathBuf,
}

pub fn eval(a: &EvalArgs) -> anyhow::Result<Outcome> {
    let g = load_graph(&a.graph)?;
    let splits = load_splits(&a.dataset)?;
    let data = match a.split {
        Split::Train => &splits.train,
        Split::Test => &splits.test,
    };
    check_dataset(&g, data)?;
    let mut inputs = vec![a.graph.clone(), a.dataset.clone()];
    let packed;
    let float;
    let ev = if let Some(path) = &a.model {
        packed = PackedModel::load(path)?;
        packed.check_graph(&g)?;
        inputs.push(path.clone());
        Evaluator::Packed(&packed)
    } else {
        let path = a
            .checkpoint
            .as_ref()
            .expect("clap enforces model or checkpoint");
        float = qat::load_checkpoint(path)?;
        inputs.push(path.clone());
        let fq = match &a.policy {
            Some(p) => {
                inputs.push(p.clone());
                let policy = QuantPolicy::load(p)?;
                policy.validate(&g)?;
                FakeQuant::from_policy(&policy)
            }
            None => FakeQuant::none(),
        };
        Evaluator::Float { model: &float, fq }
    };
    let e = evaluate_accuracy(&g, &ev, data)?;
    e.write_per_class_csv(create(&a.per_class_csv)?)?;
    println!("top1 {}", e.top1);
    Ok(Outcome::inputs(inputs))
}
