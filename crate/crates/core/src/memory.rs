//! ROM/RAM footprints of a (graph, policy) pair and budget enforcement by demotion.
//!
//! ROM holds every weighted layer's packed weights, its biases (4 bytes each) and,
//! when quantized, 8 bytes of requantization parameters per output channel.
//! RAM holds the activation tensors live at each step of the schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;

/// Bytes of requantization parameters stored per output channel (multiplier + shift/zero).
pub const REQUANT_BYTES_PER_CHANNEL: u64 = 8;
pub const BIAS_BYTES: u64 = 4;

/// Storage precision of one tensor. `Fp32` is only used for analysis and for
/// activations kept at full precision during a weight-only search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    Int2,
    Int4,
    Int8,
    Fp32,
}

impl Precision {
    pub const QUANTIZED: [Precision; 3] = [Precision::Int2, Precision::Int4, Precision::Int8];

    pub fn bits(self) -> u32 {
        match self {
            Precision::Int2 => 2,
            Precision::Int4 => 4,
            Precision::Int8 => 8,
            Precision::Fp32 => 32,
        }
    }

    pub fn is_quantized(self) -> bool {
        self != Precision::Fp32
    }

    /// One step down the ladder 32 -> 8 -> 4 -> 2.
    pub fn demote(self) -> Option<Precision> {
        match self {
            Precision::Fp32 => Some(Precision::Int8),
            Precision::Int8 => Some(Precision::Int4),
            Precision::Int4 => Some(Precision::Int2),
            Precision::Int2 => None,
        }
    }

    pub fn bytes_for(self, numel: u64) -> u64 {
        (numel * self.bits() as u64).div_ceil(8)
    }
}

impl TryFrom<u32> for Precision {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        match bits {
            2 => Ok(Precision::Int2),
            4 => Ok(Precision::Int4),
            8 => Ok(Precision::Int8),
            32 => Ok(Precision::Fp32),
            other => Err(Error::InvalidBits(other)),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        p.bits()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Per-tensor bitwidth assignment.
///
/// Weight tensors are keyed by layer id, activation tensors by the id of the layer
/// producing them. `frozen` lists activation tensors that enforcement may not touch;
/// `frozen_weights` does the same for weight tensors.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub weight_bits: BTreeMap<u32, Precision>,
    pub act_bits: BTreeMap<u32, Precision>,
    #[serde(default)]
    pub frozen: BTreeSet<u32>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub frozen_weights: BTreeSet<u32>,
}

impl QuantPolicy {
    /// Every weight at `w`, every decidable activation at `a`.
    pub fn uniform(g: &NetworkGraph, w: Precision, a: Precision) -> Self {
        QuantPolicy {
            weight_bits: g.weighted_layers().into_iter().map(|id| (id, w)).collect(),
            act_bits: g
                .activation_tensors()
                .into_iter()
                .map(|id| (id, a))
                .collect(),
            ..Default::default()
        }
    }

    /// Pin residual activation tensors to 8 bits and mark them frozen.
    pub fn freeze_residuals(&mut self, g: &NetworkGraph) {
        for t in g.residual_tensors() {
            if self.act_bits.contains_key(&t) {
                self.act_bits.insert(t, Precision::Int8);
                self.frozen.insert(t);
            }
        }
    }

    /// Check that the policy covers `g` exactly.
    pub fn validate(&self, g: &NetworkGraph) -> Result<()> {
        for id in g.weighted_layers() {
            if !self.weight_bits.contains_key(&id) {
                return Err(Error::MissingPolicyEntry {
                    what: "weight_bits",
                    id,
                });
            }
        }
        for id in g.activation_tensors() {
            if !self.act_bits.contains_key(&id) {
                return Err(Error::MissingPolicyEntry {
                    what: "act_bits",
                    id,
                });
            }
        }
        for id in self.weight_bits.keys() {
            if !g.get(*id).is_some_and(|l| l.is_weighted()) {
                return Err(Error::invalid(
                    *id,
                    "weight_bits entry for a layer without weights",
                ));
            }
        }
        let acts: BTreeSet<u32> = g.activation_tensors().into_iter().collect();
        for id in self.act_bits.keys() {
            if !acts.contains(id) {
                return Err(Error::invalid(
                    *id,
                    "act_bits entry for a tensor without a bitwidth decision",
                ));
            }
        }
        Ok(())
    }

    /// True when every entry is 2, 4 or 8 bits.
    pub fn is_fully_quantized(&self) -> bool {
        self.weight_bits
            .values()
            .chain(self.act_bits.values())
            .all(|p| p.is_quantized())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            what: "policy file".into(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub rom_bytes: u64,
    pub ram_bytes: u64,
}

impl MemoryBudget {
    pub fn new(rom_bytes: u64, ram_bytes: u64) -> Result<Self> {
        if rom_bytes == 0 || ram_bytes == 0 {
            return Err(Error::Config(
                "memory budgets must be strictly positive".into(),
            ));
        }
        Ok(MemoryBudget {
            rom_bytes,
            ram_bytes,
        })
    }

    pub fn unlimited() -> Self {
        MemoryBudget {
            rom_bytes: u64::MAX,
            ram_bytes: u64::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintOptions {
    /// Count per-channel requantization parameters in ROM.
    pub include_requant_overhead: bool,
}

impl Default for FootprintOptions {
    fn default() -> Self {
        FootprintOptions {
            include_requant_overhead: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RomFootprint {
    pub total: u64,
    pub per_layer: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RamFootprint {
    pub peak: u64,
    /// Layer executing at the first step that reaches the peak.
    pub peak_step: u32,
    /// `(executing layer, bytes)` in schedule order.
    pub per_step: Vec<(u32, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintReport {
    pub rom_total: u64,
    pub rom_per_layer: BTreeMap<u32, u64>,
    pub ram_peak: u64,
    pub ram_peak_step: u32,
    pub per_step_ram: Vec<(u32, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintCheck {
    pub m1_ok: bool,
    pub m2_ok: bool,
    pub report: FootprintReport,
}

impl ConstraintCheck {
    pub fn ok(&self) -> bool {
        self.m1_ok && self.m2_ok
    }
}

fn weight_precision(p: &QuantPolicy, id: u32) -> Result<Precision> {
    p.weight_bits
        .get(&id)
        .copied()
        .ok_or(Error::MissingPolicyEntry {
            what: "weight_bits",
            id,
        })
}

/// Packed weight payload bytes of one layer.
fn weight_payload(g: &NetworkGraph, p: &QuantPolicy, id: u32) -> Result<u64> {
    Ok(weight_precision(p, id)?.bytes_for(g.layer(id).param_count))
}

pub fn layer_rom_bytes(
    g: &NetworkGraph,
    p: &QuantPolicy,
    id: u32,
    opts: FootprintOptions,
) -> Result<u64> {
    let l = g.layer(id);
    let prec = weight_precision(p, id)?;
    let mut bytes = prec.bytes_for(l.param_count) + l.bias_count * BIAS_BYTES;
    if prec.is_quantized() && opts.include_requant_overhead {
        bytes += l.out_channels as u64 * REQUANT_BYTES_PER_CHANNEL;
    }
    Ok(bytes)
}

pub fn rom_footprint(
    g: &NetworkGraph,
    p: &QuantPolicy,
    opts: FootprintOptions,
) -> Result<RomFootprint> {
    let mut per_layer = BTreeMap::new();
    for id in g.weighted_layers() {
        per_layer.insert(id, layer_rom_bytes(g, p, id, opts)?);
    }
    Ok(RomFootprint {
        total: per_layer.values().sum(),
        per_layer,
    })
}

/// Precision of an activation tensor; the raw classifier output is always 32-bit.
fn act_precision(g: &NetworkGraph, p: &QuantPolicy, t: u32) -> Result<Precision> {
    if Some(t) == g.logits_tensor() {
        return Ok(Precision::Fp32);
    }
    p.act_bits
        .get(&t)
        .copied()
        .ok_or(Error::MissingPolicyEntry {
            what: "act_bits",
            id: t,
        })
}

pub fn tensor_ram_bytes(g: &NetworkGraph, p: &QuantPolicy, t: u32) -> Result<u64> {
    Ok(act_precision(g, p, t)?.bytes_for(g.tensor_shape(t).numel() as u64))
}

pub fn ram_footprint(g: &NetworkGraph, p: &QuantPolicy) -> Result<RamFootprint> {
    let mut per_step = Vec::with_capacity(g.topo_order().len());
    for step in g.liveness() {
        let mut bytes = 0;
        for &t in &step.live {
            bytes += tensor_ram_bytes(g, p, t)?;
        }
        per_step.push((step.layer, bytes));
    }
    let (peak_step, peak) =
        per_step.iter().fold(
            (per_step[0].0, 0),
            |best, &(id, b)| if b > best.1 { (id, b) } else { best },
        );
    Ok(RamFootprint {
        peak,
        peak_step,
        per_step,
    })
}

pub fn footprint(
    g: &NetworkGraph,
    p: &QuantPolicy,
    opts: FootprintOptions,
) -> Result<FootprintReport> {
    let rom = rom_footprint(g, p, opts)?;
    let ram = ram_footprint(g, p)?;
    Ok(FootprintReport {
        rom_total: rom.total,
        rom_per_layer: rom.per_layer,
        ram_peak: ram.peak,
        ram_peak_step: ram.peak_step,
        per_step_ram: ram.per_step,
    })
}

/// Both limits are inclusive.
pub fn check_constraints(
    g: &NetworkGraph,
    p: &QuantPolicy,
    b: &MemoryBudget,
    opts: FootprintOptions,
) -> Result<ConstraintCheck> {
    let report = footprint(g, p, opts)?;
    Ok(ConstraintCheck {
        m1_ok: report.rom_total <= b.rom_bytes,
        m2_ok: report.ram_peak <= b.ram_bytes,
        report,
    })
}

/// Pick the demotion target: largest current footprint, then higher precision, then lowest id.
fn pick_largest(candidates: impl Iterator<Item = (u32, u64, Precision)>) -> Option<u32> {
    candidates
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)).then(b.0.cmp(&a.0)))
        .map(|c| c.0)
}

/// Demote the largest non-frozen weight tensor one level until the ROM budget holds.
/// Returns the new policy and the demoted layer ids in order.
pub fn enforce_rom_traced(
    g: &NetworkGraph,
    p: &QuantPolicy,
    b: &MemoryBudget,
    opts: FootprintOptions,
) -> Result<(QuantPolicy, Vec<u32>)> {
    let mut policy = p.clone();
    let mut trace = Vec::new();
    loop {
        let rom = rom_footprint(g, &policy, opts)?;
        if rom.total <= b.rom_bytes {
            return Ok((policy, trace));
        }
        let mut candidates = Vec::new();
        for (&id, &prec) in &policy.weight_bits {
            if policy.frozen_weights.contains(&id) || prec.demote().is_none() {
                continue;
            }
            candidates.push((id, weight_payload(g, &policy, id)?, prec));
        }
        let Some(id) = pick_largest(candidates.into_iter()) else {
            return Err(Error::Infeasible(format!(
                "ROM footprint {} B exceeds budget {} B with every non-frozen weight tensor at 2 bits",
                rom.total, b.rom_bytes
            )));
        };
        let prec = policy.weight_bits.get_mut(&id).unwrap();
        *prec = prec.demote().unwrap();
        trace.push(id);
    }
}

pub fn enforce_rom(
    g: &NetworkGraph,
    p: &QuantPolicy,
    b: &MemoryBudget,
    opts: FootprintOptions,
) -> Result<QuantPolicy> {
    enforce_rom_traced(g, p, b, opts).map(|(p, _)| p)
}

/// Demote the largest non-frozen activation tensor live at the peak step until the
/// RAM budget holds. Returns the new policy and the demoted tensor ids in order.
pub fn enforce_ram_traced(
    g: &NetworkGraph,
    p: &QuantPolicy,
    b: &MemoryBudget,
) -> Result<(QuantPolicy, Vec<u32>)> {
    let live: BTreeMap<u32, BTreeSet<u32>> = g
        .liveness()
        .into_iter()
        .map(|s| (s.layer, s.live))
        .collect();
    let mut policy = p.clone();
    let mut trace = Vec::new();
    loop {
        let ram = ram_footprint(g, &policy)?;
        if ram.peak <= b.ram_bytes {
            return Ok((policy, trace));
        }
        let mut candidates = Vec::new();
        for &t in &live[&ram.peak_step] {
            let Some(&prec) = policy.act_bits.get(&t) else {
                continue;
            };
            if policy.frozen.contains(&t) || prec.demote().is_none() {
                continue;
            }
            candidates.push((t, tensor_ram_bytes(g, &policy, t)?, prec));
        }
        let Some(t) = pick_largest(candidates.into_iter()) else {
            return Err(Error::Infeasible(format!(
                "RAM peak {} B at layer {} exceeds budget {} B and no live tensor there can be demoted",
                ram.peak, ram.peak_step, b.ram_bytes
            )));
        };
        let prec = policy.act_bits.get_mut(&t).unwrap();
        *prec = prec.demote().unwrap();
        trace.push(t);
    }
}

pub fn enforce_ram(g: &NetworkGraph, p: &QuantPolicy, b: &MemoryBudget) -> Result<QuantPolicy> {
    enforce_ram_traced(g, p, b).map(|(p, _)| p)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RamRow {
    pub step: u32,
    pub ram_bytes: u64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RomRow {
    pub layer: u32,
    pub rom_bytes: u64,
}

impl FootprintReport {
    /// `step,ram_bytes`, one row per schedule step (step = executing layer id).
    pub fn write_ram_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for &(step, ram_bytes) in &self.per_step_ram {
            wr.serialize(RamRow { step, ram_bytes })?;
        }
        wr.flush().map_err(|e| Error::io("<ram csv>", e))?;
        Ok(())
    }

    /// `layer,rom_bytes`, one row per weighted layer.
    pub fn write_rom_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for (&layer, &rom_bytes) in &self.rom_per_layer {
            wr.serialize(RomRow { layer, rom_bytes })?;
        }
        wr.flush().map_err(|e| Error::io("<rom csv>", e))?;
        Ok(())
    }
}

pub fn read_ram_csv<R: Read>(r: R) -> Result<Vec<RamRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn read_rom_csv<R: Read>(r: R) -> Result<Vec<RomRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerKind, LayerSpec, Shape};

    fn spec(id: u32, kind: LayerKind, inputs: &[u32], inp: Shape, out: Shape) -> LayerSpec {
        LayerSpec {
            id,
            kind,
            input_ids: inputs.to_vec(),
            out_channels: out.c,
            kernel_h: 0,
            kernel_w: 0,
            stride: 1,
            padding: 0,
            input_shape: inp,
            output_shape: out,
            param_count: 0,
            bias_count: 0,
        }
    }

    /// input 1x8x8 -> conv 4ch k3 p1 -> output
    fn chain() -> NetworkGraph {
        let s = Shape::new(1, 8, 8);
        let o = Shape::new(4, 8, 8);
        let conv = LayerSpec {
            kernel_h: 3,
            kernel_w: 3,
            padding: 1,
            param_count: 36,
            ..spec(1, LayerKind::Conv2d, &[0], s, o)
        };
        NetworkGraph::new(
            8,
            1.0,
            vec![
                spec(0, LayerKind::Input, &[], s, s),
                conv,
                spec(2, LayerKind::Output, &[1], o, o),
            ],
        )
        .unwrap()
    }

    #[test]
    fn precision_parsing() {
        assert_eq!(Precision::try_from(4).unwrap(), Precision::Int4);
        assert!(matches!(Precision::try_from(3), Err(Error::InvalidBits(3))));
        assert_eq!(Precision::Int2.bytes_for(36), 9);
        assert_eq!(Precision::Int4.demote(), Some(Precision::Int2));
    }

    #[test]
    fn conv_rom_two_bit_no_bias() {
        let g = chain();
        let p = QuantPolicy::uniform(&g, Precision::Int2, Precision::Int8);
        let rom = rom_footprint(&g, &p, FootprintOptions::default()).unwrap();
        assert_eq!(rom.total, 9 + 4 * 8);
        let no_overhead = rom_footprint(
            &g,
            &p,
            FootprintOptions {
                include_requant_overhead: false,
            },
        )
        .unwrap();
        assert_eq!(no_overhead.total, 9);
    }

    #[test]
    fn chain_ram_peak() {
        let g = chain();
        let mut p = QuantPolicy::uniform(&g, Precision::Int8, Precision::Int8);
        let ram = ram_footprint(&g, &p).unwrap();
        assert_eq!(ram.peak, 64 + 256);
        assert_eq!(ram.peak_step, 1);
        p.act_bits.insert(1, Precision::Int2);
        assert_eq!(ram_footprint(&g, &p).unwrap().peak, 64 + 64);
    }

    #[test]
    fn missing_entries_error() {
        let g = chain();
        let mut p = QuantPolicy::uniform(&g, Precision::Int8, Precision::Int8);
        p.act_bits.remove(&1);
        assert!(matches!(
            ram_footprint(&g, &p),
            Err(Error::MissingPolicyEntry {
                what: "act_bits",
                id: 1
            })
        ));
        p.weight_bits.clear();
        assert!(matches!(
            rom_footprint(&g, &p, FootprintOptions::default()),
            Err(Error::MissingPolicyEntry {
                what: "weight_bits",
                id: 1
            })
        ));
    }

    #[test]
    fn budget_boundary_is_inclusive() {
        let g = chain();
        let p = QuantPolicy::uniform(&g, Precision::Int2, Precision::Int8);
        let r = footprint(&g, &p, FootprintOptions::default()).unwrap();
        let b = MemoryBudget::new(r.rom_total, r.ram_peak).unwrap();
        let c = check_constraints(&g, &p, &b, FootprintOptions::default()).unwrap();
        assert!(c.m1_ok && c.m2_ok);
        let tight = MemoryBudget::new(r.rom_total - 1, r.ram_peak - 1).unwrap();
        let c = check_constraints(&g, &p, &tight, FootprintOptions::default()).unwrap();
        assert!(!c.m1_ok && !c.m2_ok);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(MemoryBudget::new(0, 10).is_err());
    }

    #[test]
    fn fitting_policy_is_unchanged() {
        let g = chain();
        let p = QuantPolicy::uniform(&g, Precision::Int8, Precision::Int8);
        let b = MemoryBudget::unlimited();
        assert_eq!(
            enforce_rom(&g, &p, &b, FootprintOptions::default()).unwrap(),
            p
        );
        assert_eq!(enforce_ram(&g, &p, &b).unwrap(), p);
    }

    #[test]
    fn all_frozen_over_budget_is_infeasible() {
        let g = chain();
        let mut p = QuantPolicy::uniform(&g, Precision::Int8, Precision::Int8);
        p.frozen_weights.insert(1);
        p.frozen.extend([0, 1]);
        let b = MemoryBudget::new(10, 10).unwrap();
        assert!(matches!(
            enforce_rom(&g, &p, &b, FootprintOptions::default()),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(enforce_ram(&g, &p, &b), Err(Error::Infeasible(_))));
    }

    #[test]
    fn policy_json_roundtrip() {
        let g = chain();
        let mut p = QuantPolicy::uniform(&g, Precision::Int4, Precision::Int2);
        p.frozen.insert(1);
        let text = p.to_json();
        assert!(text.contains("\"weight_bits\""));
        assert_eq!(QuantPolicy::from_json(&text).unwrap(), p);
        let bad = text.replace("\"1\": 4", "\"1\": 3");
        assert!(QuantPolicy::from_json(&bad).is_err());
        p.validate(&g).unwrap();
    }

    #[test]
    fn footprint_csv_roundtrip() {
        let g = chain();
        let p = QuantPolicy::uniform(&g, Precision::Int4, Precision::Int8);
        let r = footprint(&g, &p, FootprintOptions::default()).unwrap();
        let mut ram = Vec::new();
        r.write_ram_csv(&mut ram).unwrap();
        assert!(ram.starts_with(b"step,ram_bytes\n"));
        let rows = read_ram_csv(ram.as_slice()).unwrap();
        assert_eq!(
            rows.iter()
                .map(|r| (r.step, r.ram_bytes))
                .collect::<Vec<_>>(),
            r.per_step_ram
        );
        let mut rom = Vec::new();
        r.write_rom_csv(&mut rom).unwrap();
        let rows = read_rom_csv(rom.as_slice()).unwrap();
        assert_eq!(
            rows,
            vec![RomRow {
                layer: 1,
                rom_bytes: r.rom_total
            }]
        );
    }
}
