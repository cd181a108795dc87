//! Reinforcement-learning search for a mixed-precision policy under memory budgets.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{action_center, discretize, Agent, AgentConfig, Transition};
use crate::data::{make_proxy, Dataset};
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::memory::{
    enforce_ram, enforce_rom, footprint, FootprintOptions, MemoryBudget, Precision, QuantPolicy,
};
use crate::nn::FloatModel;
use crate::qat::{train_qat, TrainConfig};

/// Length of the observation vector.
pub const OBS_DIM: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Weights first with float activations, then activations under the fixed weights.
    Independent,
    /// Weights and activations chosen together in every episode.
    Concurrent,
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMode::Independent => "independent",
            SearchMode::Concurrent => "concurrent",
        })
    }
}

impl FromStr for SearchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(SearchMode::Independent),
            "concurrent" => Ok(SearchMode::Concurrent),
            _ => Err(Error::Config(format!("unknown search mode {s:?}"))),
        }
    }
}

/// One bitwidth decision of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Weight(u32),
    Act(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub episodes: usize,
    pub warmup: usize,
    pub mode: SearchMode,
    pub budget: MemoryBudget,
    pub seed: u64,
    pub agent: AgentConfig,
    /// Per-episode proxy training; `epochs` is the episode training length.
    pub train: TrainConfig,
    pub proxy_train_fraction: f64,
    pub proxy_val_fraction: f64,
    /// Pin the first and last weighted layers (and their input activations) to 8 bits.
    pub freeze_first_last: bool,
    pub include_requant_overhead: bool,
}

impl SearchConfig {
    /// Defaults: 300 episodes with 60 warm-up, doubled for concurrent search.
    pub fn new(mode: SearchMode, budget: MemoryBudget) -> Self {
        let (episodes, warmup) = match mode {
            SearchMode::Independent => (300, 60),
            SearchMode::Concurrent => (600, 120),
        };
        SearchConfig {
            episodes,
            warmup,
            mode,
            budget,
            seed: 0,
            agent: AgentConfig::default(),
            train: TrainConfig::default(),
            proxy_train_fraction: 0.2,
            proxy_val_fraction: 0.1,
            freeze_first_last: false,
            include_requant_overhead: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("at least one episode is required".into()));
        }
        if self.warmup > self.episodes {
            return Err(Error::Config(format!(
                "warm-up ({}) exceeds episode count ({})",
                self.warmup, self.episodes
            )));
        }
        for f in [self.proxy_train_fraction, self.proxy_val_fraction] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "proxy fraction {f} must lie in (0, 1)"
                )));
            }
        }
        if self.proxy_train_fraction + self.proxy_val_fraction > 1.0 {
            return Err(Error::Config(
                "proxy fractions add up to more than the dataset".into(),
            ));
        }
        self.train.validate()
    }

    fn footprint_options(&self) -> FootprintOptions {
        FootprintOptions {
            include_requant_overhead: self.include_requant_overhead,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub policy: QuantPolicy,
    pub reward: f64,
    pub top1: f64,
    pub rom_bytes: u64,
    pub ram_bytes: u64,
    /// New best proxy top-1 within the current search phase.
    pub is_best: bool,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_policy: QuantPolicy,
    pub best_top1: f64,
    pub best_episode: usize,
    pub history: Vec<EpisodeRecord>,
}

/// Normalization constants for observations of one graph.
#[derive(Debug, Clone, Copy)]
struct FeatureScale {
    channels_in: f64,
    channels_out: f64,
    kernel: f64,
    stride: f64,
    log_params: f64,
    log_fmap: f64,
}

impl FeatureScale {
    fn of(g: &NetworkGraph) -> Self {
        let mut s = FeatureScale {
            channels_in: 1.0,
            channels_out: 1.0,
            kernel: 1.0,
            stride: 1.0,
            log_params: 1.0,
            log_fmap: 1.0,
        };
        for l in g.layers() {
            s.channels_in = s.channels_in.max(l.input_shape.c as f64);
            s.channels_out = s.channels_out.max(l.output_shape.c as f64);
            s.kernel = s.kernel.max(l.kernel_h.max(l.kernel_w) as f64);
            s.stride = s.stride.max(l.stride as f64);
            s.log_params = s.log_params.max((1.0 + l.param_count as f64).ln());
            s.log_fmap = s.log_fmap.max((1.0 + l.output_shape.numel() as f64).ln());
        }
        s
    }
}

/// Feature vector of a decision: position, layer kind one-hot, channels, kernel, stride,
/// log parameter count, log feature-map size, weight/activation flag, previous action.
pub fn observe(
    g: &NetworkGraph,
    d: Decision,
    index: usize,
    count: usize,
    prev_action: f64,
) -> Vec<f64> {
    let s = FeatureScale::of(g);
    observe_scaled(g, &s, d, index, count, prev_action)
}

fn observe_scaled(
    g: &NetworkGraph,
    s: &FeatureScale,
    d: Decision,
    index: usize,
    count: usize,
    prev: f64,
) -> Vec<f64> {
    let (id, is_act) = match d {
        Decision::Weight(id) => (id, 0.0),
        Decision::Act(id) => (id, 1.0),
    };
    let l = g.layer(id);
    let mut v = Vec::with_capacity(OBS_DIM);
    v.push(if count > 1 {
        index as f64 / (count - 1) as f64
    } else {
        0.0
    });
    let mut onehot = [0.0; 9];
    onehot[l.kind.index()] = 1.0;
    v.extend_from_slice(&onehot);
    v.push(l.input_shape.c as f64 / s.channels_in);
    v.push(l.output_shape.c as f64 / s.channels_out);
    v.push(l.kernel_h.max(l.kernel_w) as f64 / s.kernel);
    v.push(l.stride as f64 / s.stride);
    v.push((1.0 + l.param_count as f64).ln() / s.log_params);
    v.push((1.0 + l.output_shape.numel() as f64).ln() / s.log_fmap);
    v.push(is_act);
    v.push(prev);
    debug_assert_eq!(v.len(), OBS_DIM);
    v
}

/// Decision list and starting policy of one search phase.
#[derive(Debug, Clone)]
pub struct Phase {
    pub base: QuantPolicy,
    pub decisions: Vec<Decision>,
    pub check_ram: bool,
}

/// Everything an episode needs besides the agent.
pub struct SearchContext<'a> {
    pub g: &'a NetworkGraph,
    pub pretrained: &'a FloatModel,
    pub proxy_train: Dataset,
    pub proxy_val: Dataset,
    pub cfg: SearchConfig,
    scale: FeatureScale,
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<'a> SearchContext<'a> {
    /// Draw the proxy training and validation subsets from `data`.
    pub fn new(
        g: &'a NetworkGraph,
        pretrained: &'a FloatModel,
        data: &Dataset,
        cfg: SearchConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        pretrained.validate(g)?;
        let n = data.len();
        let n_train = (n as f64 * cfg.proxy_train_fraction).round() as usize;
        let n_val = (n as f64 * cfg.proxy_val_fraction).round() as usize;
        let (proxy_train, proxy_val) = make_proxy(data, n_train, n_val, mix(cfg.seed, 1))?;
        Ok(SearchContext {
            g,
            pretrained,
            proxy_train,
            proxy_val,
            cfg,
            scale: FeatureScale::of(g),
        })
    }

    fn first_last(&self) -> (Vec<u32>, Vec<u32>) {
        if !self.cfg.freeze_first_last {
            return (Vec::new(), Vec::new());
        }
        let w = self.g.weighted_layers();
        let mut layers: Vec<u32> = w.first().into_iter().chain(w.last()).copied().collect();
        layers.dedup();
        let acts = layers
            .iter()
            .map(|&id| self.g.layer(id).input_ids[0])
            .filter(|t| Some(*t) != self.g.logits_tensor())
            .collect();
        (layers, acts)
    }

    fn base_policy(&self, weights: Precision, acts: Precision) -> QuantPolicy {
        let mut p = QuantPolicy::uniform(self.g, weights, acts);
        let (fw, fa) = self.first_last();
        for id in fw {
            p.weight_bits.insert(id, Precision::Int8);
            p.frozen_weights.insert(id);
        }
        for t in fa {
            if acts.is_quantized() {
                p.act_bits.insert(t, Precision::Int8);
            }
            p.frozen.insert(t);
        }
        p.freeze_residuals(self.g);
        p
    }

    fn weight_decisions(&self, p: &QuantPolicy) -> Vec<Decision> {
        self.g
            .weighted_layers()
            .into_iter()
            .filter(|id| !p.frozen_weights.contains(id))
            .map(Decision::Weight)
            .collect()
    }

    fn act_decisions(&self, p: &QuantPolicy) -> Vec<Decision> {
        self.g
            .activation_tensors()
            .into_iter()
            .filter(|t| !p.frozen.contains(t))
            .map(Decision::Act)
            .collect()
    }

    /// Joint weight and activation decisions.
    pub fn concurrent_phase(&self) -> Phase {
        let base = self.base_policy(Precision::Int8, Precision::Int8);
        let mut decisions = self.weight_decisions(&base);
        decisions.extend(self.act_decisions(&base));
        Phase {
            base,
            decisions,
            check_ram: true,
        }
    }

    /// Weight decisions with float activations (residual tensors stay 8-bit).
    pub fn weight_phase(&self) -> Phase {
        let base = self.base_policy(Precision::Int8, Precision::Fp32);
        Phase {
            decisions: self.weight_decisions(&base),
            base,
            check_ram: false,
        }
    }

    /// Activation decisions under fixed weight bitwidths.
    pub fn activation_phase(&self, weights: &QuantPolicy) -> Phase {
        let mut base = self.base_policy(Precision::Int8, Precision::Int8);
        base.weight_bits = weights.weight_bits.clone();
        Phase {
            decisions: self.act_decisions(&base),
            base,
            check_ram: true,
        }
    }

    /// Apply the agent's actions, enforce the budgets, train on the proxy set and score.
    /// `local` is the episode index within the phase (warm-up and noise schedule).
    pub fn run_episode(
        &self,
        agent: &mut Agent,
        rng: &mut ChaCha8Rng,
        phase: &Phase,
        episode: usize,
        local: usize,
    ) -> Result<EpisodeRecord> {
        let g = self.g;
        let n = phase.decisions.len();
        let mut policy = phase.base.clone();
        let mut obs = Vec::with_capacity(n);
        let mut prev = 0.0;
        for (i, &d) in phase.decisions.iter().enumerate() {
            let o = observe_scaled(g, &self.scale, d, i, n, prev);
            let a = agent.act(rng, &o, local, self.cfg.warmup);
            let bits = discretize(a);
            match d {
                Decision::Weight(id) => policy.weight_bits.insert(id, bits),
                Decision::Act(t) => policy.act_bits.insert(t, bits),
            };
            obs.push(o);
            prev = a;
        }

        let opts = self.cfg.footprint_options();
        policy = enforce_rom(g, &policy, &self.cfg.budget, opts)?;
        if phase.check_ram {
            policy = enforce_ram(g, &policy, &self.cfg.budget)?;
        }

        let train_cfg = TrainConfig {
            seed: mix(self.cfg.seed, 1000 + episode as u64),
            ..self.cfg.train
        };
        let out = train_qat(
            g,
            self.pretrained,
            &policy,
            &self.proxy_train,
            &self.proxy_val,
            &train_cfg,
        )?;
        let reward = out.val_top1;
        let report = footprint(g, &policy, opts)?;

        for (i, &d) in phase.decisions.iter().enumerate() {
            let bits = match d {
                Decision::Weight(id) => policy.weight_bits[&id],
                Decision::Act(t) => policy.act_bits[&t],
            };
            let done = i + 1 == n;
            agent.buffer.push(Transition {
                obs: obs[i].clone(),
                action: action_center(bits),
                reward,
                next_obs: if done {
                    obs[i].clone()
                } else {
                    obs[i + 1].clone()
                },
                done,
            });
        }
        if local >= self.cfg.warmup {
            for _ in 0..n {
                agent.update(rng);
            }
        }
        Ok(EpisodeRecord {
            episode,
            policy,
            reward,
            top1: out.val_top1,
            rom_bytes: report.rom_total,
            ram_bytes: report.ram_peak,
            is_best: false,
        })
    }

    fn run_phase(
        &self,
        phase: &Phase,
        salt: u64,
        first_episode: usize,
        history: &mut Vec<EpisodeRecord>,
        on_episode: &mut dyn FnMut(&EpisodeRecord),
    ) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, salt));
        let mut agent = Agent::new(&mut rng, OBS_DIM, self.cfg.agent);
        let mut best: Option<usize> = None;
        for local in 0..self.cfg.episodes {
            let mut rec =
                self.run_episode(&mut agent, &mut rng, phase, first_episode + local, local)?;
            if best.is_none_or(|b| rec.top1 > history[b].top1) {
                rec.is_best = true;
                best = Some(history.len());
            }
            on_episode(&rec);
            history.push(rec);
        }
        Ok(best.expect("at least one episode"))
    }
}

/// Run the full search and return the best policy with the episode history.
pub fn search(
    g: &NetworkGraph,
    pretrained: &FloatModel,
    data: &Dataset,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    search_with(g, pretrained, data, cfg, &mut |_| {})
}

/// [`search`] with a callback after every episode.
pub fn search_with(
    g: &NetworkGraph,
    pretrained: &FloatModel,
    data: &Dataset,
    cfg: &SearchConfig,
    on_episode: &mut dyn FnMut(&EpisodeRecord),
) -> Result<SearchResult> {
    let ctx = SearchContext::new(g, pretrained, data, cfg.clone())?;
    let mut history = Vec::new();
    let best = match cfg.mode {
        SearchMode::Concurrent => {
            ctx.run_phase(&ctx.concurrent_phase(), 2, 0, &mut history, on_episode)?
        }
        SearchMode::Independent => {
            let b1 = ctx.run_phase(&ctx.weight_phase(), 3, 0, &mut history, on_episode)?;
            let weights = history[b1].policy.clone();
            let phase = ctx.activation_phase(&weights);
            ctx.run_phase(&phase, 4, cfg.episodes, &mut history, on_episode)?
        }
    };
    Ok(SearchResult {
        best_policy: history[best].policy.clone(),
        best_top1: history[best].top1,
        best_episode: history[best].episode,
        history,
    })
}

/// One row of the search history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub episode: usize,
    pub top1: f64,
    pub rom_bytes: u64,
    pub ram_bytes: u64,
    pub is_best: bool,
}

pub fn write_history_csv<W: Write>(history: &[EpisodeRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in history {
        wr.serialize(HistoryRow {
            episode: r.episode,
            top1: r.top1,
            rom_bytes: r.rom_bytes,
            ram_bytes: r.ram_bytes,
            is_best: r.is_best,
        })?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_history_csv<R: Read>(r: R) -> Result<Vec<HistoryRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
