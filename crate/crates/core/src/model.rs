//! The DSRNet super-resolution network.
//!
//! Four blocks run in sequence on a low-resolution image:
//!
//! * **REB**, six Conv+ReLU layers; the layer-2 output is added to the
//!   layer-4 output before layer 5.
//! * **WEB**, a complementary branch (CB, four Conv+ReLU) summed with a
//!   fixed dynamic gate (FDG, four Conv+ReLU) and, per sample, a selected
//!   dynamic gate (SDG, two pairs of 3x3 and 1x1 Conv+ReLU). A gate
//!   mechanism (GM: pool, FC, ReLU, FC, softmax) scores every sample; SDG
//!   runs only for samples whose second probability is below the threshold,
//!   and its output is scaled by that probability.
//! * **FRB**, six Conv+ReLU layers; the REB layer-4 output is added to the
//!   layer-5 output before layer 6.
//! * **RB**, a conv to `3*s^2` channels, pixel shuffle by `s`, and a final
//!   3x3 conv at high resolution.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Graph, HasParams, LayerKind, LayerParams, ParamId, ParamStore, Tape, Var};
use crate::rng::Rng;
use crate::tensor::{DType, Element, Shape, Tensor};

/// Structural ablations of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// FRB without its sixth layer; the skip sum feeds RB directly.
    NoFrbLastLayer,
    /// FRB reduced to five plain layers.
    NoFrbLastLayerAndResidual,
    NoFrb,
    /// REB, CB and RB only.
    RebCbRb,
    RebRb,
    /// First four REB layers, with the layer-2 skip, then RB.
    RebMinus2Rb,
    /// First four REB layers without the skip, then RB.
    RebFirst4Rb,
    /// No FDG and no FRB.
    NoFdg,
    /// No SDG and no FRB; GM is still built and scored.
    NoSdg,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::NoFrbLastLayer,
        Variant::NoFrbLastLayerAndResidual,
        Variant::NoFrb,
        Variant::RebCbRb,
        Variant::RebRb,
        Variant::RebMinus2Rb,
        Variant::RebFirst4Rb,
        Variant::NoFdg,
        Variant::NoSdg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFrbLastLayer => "no_frb_last_layer",
            Variant::NoFrbLastLayerAndResidual => "no_frb_last_layer_and_residual",
            Variant::NoFrb => "no_frb",
            Variant::RebCbRb => "reb_cb_rb",
            Variant::RebRb => "reb_rb",
            Variant::RebMinus2Rb => "reb_minus2_rb",
            Variant::RebFirst4Rb => "reb_first4_rb",
            Variant::NoFdg => "no_fdg",
            Variant::NoSdg => "no_sdg",
        }
    }

    fn code(self) -> u32 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u32
    }

    fn from_code(code: u32) -> Option<Self> {
        Variant::ALL.get(code as usize).copied()
    }

    fn structure(self) -> Structure {
        let full = Structure {
            reb_layers: 6,
            reb_residual: true,
            cb: true,
            gm: true,
            fdg: true,
            sdg: true,
            frb_layers: 6,
            frb_residual: true,
        };
        let no_web = Structure {
            cb: false,
            gm: false,
            fdg: false,
            sdg: false,
            frb_layers: 0,
            frb_residual: false,
            ..full
        };
        match self {
            Variant::Full => full,
            Variant::NoFrbLastLayer => Structure { frb_layers: 5, ..full },
            Variant::NoFrbLastLayerAndResidual => Structure {
                frb_layers: 5,
                frb_residual: false,
                ..full
            },
            Variant::NoFrb => Structure {
                frb_layers: 0,
                frb_residual: false,
                ..full
            },
            Variant::RebCbRb => Structure { cb: true, ..no_web },
            Variant::RebRb => no_web,
            Variant::RebMinus2Rb => Structure { reb_layers: 4, ..no_web },
            Variant::RebFirst4Rb => Structure {
                reb_layers: 4,
                reb_residual: false,
                ..no_web
            },
            Variant::NoFdg => Structure {
                fdg: false,
                frb_layers: 0,
                frb_residual: false,
                ..full
            },
            Variant::NoSdg => Structure {
                sdg: false,
                frb_layers: 0,
                frb_residual: false,
                ..full
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Structure {
    reb_layers: usize,
    reb_residual: bool,
    cb: bool,
    gm: bool,
    fdg: bool,
    sdg: bool,
    frb_layers: usize,
    frb_residual: bool,
}

impl Structure {
    fn has_web(&self) -> bool {
        self.cb || self.fdg || self.sdg
    }
}

/// How the hard routing decision is made differentiable during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateTrainMode {
    /// Routed samples get `g2 * SDG(x)`; unrouted samples skip SDG. Train
    /// and inference behave identically.
    #[default]
    SoftScale,
}

impl GateTrainMode {
    pub fn name(self) -> &'static str {
        match self {
            GateTrainMode::SoftScale => "soft_scale",
        }
    }
}

impl FromStr for GateTrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_scale" => Ok(GateTrainMode::SoftScale),
            _ => Err(Error::Config(format!("unknown gate_train_mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub scale: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Probability threshold; SDG runs when `probs[1] < gate_threshold`.
    pub gate_threshold: f64,
    pub gate_hidden: usize,
    pub variant: Variant,
    pub gate_train_mode: GateTrainMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 4,
            width: 64,
            in_channels: 3,
            gate_threshold: 0.75,
            gate_hidden: 16,
            variant: Variant::Full,
            gate_train_mode: GateTrainMode::SoftScale,
        }
    }
}

impl ModelConfig {
    pub fn with_scale(scale: usize) -> Self {
        ModelConfig {
            scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::Config(format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.width == 0 || self.in_channels == 0 || self.gate_hidden == 0 {
            return Err(Error::Config("width, in_channels and gate_hidden must be positive".into()));
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold < 1.0) {
            return Err(Error::Config(format!(
                "gate_threshold must lie in (0, 1), got {}",
                self.gate_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Reb,
    Cb,
    Gm,
    Fdg,
    Sdg,
    Frb,
    Rb,
}

impl Block {
    pub const ALL: [Block; 7] = [Block::Reb, Block::Cb, Block::Gm, Block::Fdg, Block::Sdg, Block::Frb, Block::Rb];

    pub fn name(self) -> &'static str {
        match self {
            Block::Reb => "REB",
            Block::Cb => "CB",
            Block::Gm => "GM",
            Block::Fdg => "FDG",
            Block::Sdg => "SDG",
            Block::Frb => "FRB",
            Block::Rb => "RB",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-sample routing outcome of the gate mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub probs: Vec<[f64; 2]>,
    pub use_sdg: Vec<bool>,
}

impl GateDecision {
    fn from_probs<T: Element>(probs: &Tensor<T>, threshold: f64) -> Self {
        let probs: Vec<[f64; 2]> = probs
            .data()
            .chunks_exact(2)
            .map(|r| [r[0].as_f64(), r[1].as_f64()])
            .collect();
        let use_sdg = probs.iter().map(|p| p[1] < threshold).collect();
        GateDecision { probs, use_sdg }
    }

    pub fn routed_indices(&self) -> Vec<usize> {
        self.use_sdg
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| r.then_some(i))
            .collect()
    }

    pub fn routed_fraction(&self) -> f64 {
        if self.use_sdg.is_empty() {
            return 0.0;
        }
        self.use_sdg.iter().filter(|&&r| r).count() as f64 / self.use_sdg.len() as f64
    }
}

/// Result of a forward pass on some [`Graph`] backend.
#[derive(Debug)]
pub struct ForwardOutput<V> {
    pub output: V,
    pub gate: Option<GateDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCount {
    pub block: Block,
    pub conv_layers: usize,
    pub fc_layers: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub blocks: Vec<BlockCount>,
    pub total: usize,
    pub total_without_sdg: usize,
}

impl ParamReport {
    pub fn block(&self, b: Block) -> Option<&BlockCount> {
        self.blocks.iter().find(|c| c.block == b)
    }

    pub fn conv_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.conv_layers).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacReport {
    pub lr_height: usize,
    pub lr_width: usize,
    pub blocks: Vec<(Block, u64)>,
    /// Every layer, including SDG.
    pub routed_total: u64,
    /// Every layer except SDG.
    pub skipped_total: u64,
    pub sdg: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsrNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    reb: Vec<ParamId>,
    cb: Vec<ParamId>,
    gm: Option<[ParamId; 2]>,
    fdg: Vec<ParamId>,
    sdg: Vec<ParamId>,
    frb: Vec<ParamId>,
    rb: [ParamId; 2],
}

const MODEL_MAGIC: &[u8; 4] = b"DSRN";
const MODEL_VERSION: u32 = 1;

impl<T: Element> DsrNet<T> {
    /// Allocates every layer of `config.variant` with He-normal weights and
    /// zero biases, drawing from `rng` in checkpoint block order.
    pub fn build(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let st = config.variant.structure();
        let c = config.width;
        let mut ps = ParamStore::new();
        let convs = |ps: &mut ParamStore<T>, prefix: &str, kernels: &[usize], first_in: usize, rng: &mut Rng| {
            kernels
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let cin = if i == 0 { first_in } else { c };
                    LayerParams::conv(format!("{prefix}{}", i + 1), cin, c, k, rng).map(|l| ps.push(l))
                })
                .collect::<Result<Vec<_>>>()
        };
        let reb = convs(&mut ps, "reb", &vec![3; st.reb_layers], config.in_channels, rng)?;
        let cb = if st.cb { convs(&mut ps, "cb", &[3; 4], c, rng)? } else { Vec::new() };
        let gm = if st.gm {
            let fc1 = ps.push(LayerParams::linear("gm_fc1", c, config.gate_hidden, rng)?);
            let fc2 = ps.push(LayerParams::linear("gm_fc2", config.gate_hidden, 2, rng)?);
            Some([fc1, fc2])
        } else {
            None
        };
        let fdg = if st.fdg { convs(&mut ps, "fdg", &[3; 4], c, rng)? } else { Vec::new() };
        let sdg = if st.sdg { convs(&mut ps, "sdg", &[3, 1, 3, 1], c, rng)? } else { Vec::new() };
        let frb = convs(&mut ps, "frb", &vec![3; st.frb_layers], c, rng)?;
        let s2 = config.scale * config.scale;
        let rb1 = ps.push(LayerParams::conv("rb1", c, config.in_channels * s2, 3, rng)?);
        let rb2 = ps.push(LayerParams::conv("rb2", config.in_channels, config.in_channels, 3, rng)?);
        Ok(DsrNet {
            config,
            params: ps,
            reb,
            cb,
            gm,
            fdg,
            sdg,
            frb,
            rb: [rb1, rb2],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Layer ids of a block, in execution order.
    pub fn block_layers(&self, block: Block) -> Vec<ParamId> {
        match block {
            Block::Reb => self.reb.clone(),
            Block::Cb => self.cb.clone(),
            Block::Gm => self.gm.map(|g| g.to_vec()).unwrap_or_default(),
            Block::Fdg => self.fdg.clone(),
            Block::Sdg => self.sdg.clone(),
            Block::Frb => self.frb.clone(),
            Block::Rb => self.rb.to_vec(),
        }
    }

    fn structure(&self) -> Structure {
        self.config.variant.structure()
    }

    fn stack<G: Graph<T>>(&self, g: &mut G, layers: &[ParamId], x: &G::Value) -> Result<G::Value> {
        let (first, rest) = layers
            .split_first()
            .ok_or_else(|| Error::invalid("stack", "empty layer list"))?;
        let mut h = g.conv_relu(&self.params, *first, x)?;
        for &l in rest {
            h = g.conv_relu(&self.params, l, &h)?;
        }
        Ok(h)
    }

    /// Returns `(o_reb, o_reb4)`: the block output and the post-skip
    /// layer-4 output reused by FRB.
    ///
    /// With only four layers (the shortened variants) both are the same
    /// value, so the second element is `None`.
    pub fn reb_forward<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<(G::Value, Option<G::Value>)> {
        let xs = g.tensor(x).shape();
        if xs.c != self.config.in_channels {
            return Err(Error::invalid(
                "reb_forward",
                format!("expected {} input channels, got {xs}", self.config.in_channels),
            ));
        }
        let st = self.structure();
        let a1 = g.conv_relu(&self.params, self.reb[0], x)?;
        let a2 = g.conv_relu(&self.params, self.reb[1], &a1)?;
        let a3 = g.conv_relu(&self.params, self.reb[2], &a2)?;
        let mut a4 = g.conv_relu(&self.params, self.reb[3], &a3)?;
        if st.reb_residual {
            a4 = g.add(&a4, &a2)?;
        }
        if self.reb.len() == 4 {
            return Ok((a4, None));
        }
        let a5 = g.conv_relu(&self.params, self.reb[4], &a4)?;
        let a6 = g.conv_relu(&self.params, self.reb[5], &a5)?;
        Ok((a6, Some(a4)))
    }

    /// Scores every sample; returns the softmax probabilities (as a graph
    /// value, so training can backpropagate through them) and the decision.
    pub fn gate_mechanism<G: Graph<T>>(&self, g: &mut G, o_reb: &G::Value) -> Result<(G::Value, GateDecision)> {
        let [fc1, fc2] = self
            .gm
            .ok_or_else(|| Error::invalid("gate_mechanism", format!("variant {} has no gate", self.config.variant)))?;
        let pooled = g.global_avg_pool(o_reb);
        let h = g.linear(&self.params, fc1, &pooled)?;
        let h = g.relu(&h);
        let logits = g.linear(&self.params, fc2, &h)?;
        let probs = g.softmax(&logits)?;
        let decision = GateDecision::from_probs(g.tensor(&probs), self.config.gate_threshold);
        Ok((probs, decision))
    }

    /// `CB(x) + FDG(x) + [probs[1] < tau] * probs[1] * SDG(x)`, per sample.
    pub fn web_forward<G: Graph<T>>(&self, g: &mut G, o_reb: &G::Value) -> Result<(G::Value, Option<GateDecision>)> {
        let st = self.structure();
        if !st.has_web() {
            return Err(Error::invalid(
                "web_forward",
                format!("variant {} has no wide enhancement block", self.config.variant),
            ));
        }
        let mut acc = if st.cb { Some(self.stack(g, &self.cb, o_reb)?) } else { None };
        if st.fdg {
            let f = self.stack(g, &self.fdg, o_reb)?;
            acc = Some(match acc {
                Some(a) => g.add(&a, &f)?,
                None => f,
            });
        }
        let gate = match self.gm {
            Some(_) => Some(self.gate_mechanism(g, o_reb)?),
            None => None,
        };
        if st.sdg {
            let (probs, decision) = gate
                .as_ref()
                .ok_or_else(|| Error::invalid("web_forward", "selected gate without gate mechanism"))?;
            let routed = decision.routed_indices();
            let n = decision.use_sdg.len();
            if routed.len() == n {
                let s = self.stack(g, &self.sdg, o_reb)?;
                let s = g.scale_samples(&s, probs, 1)?;
                acc = Some(match acc {
                    Some(a) => g.add(&a, &s)?,
                    None => s,
                });
            } else if !routed.is_empty() {
                let sub = g.gather_samples(o_reb, &routed)?;
                let sub_probs = g.gather_samples(probs, &routed)?;
                let s = self.stack(g, &self.sdg, &sub)?;
                let s = g.scale_samples(&s, &sub_probs, 1)?;
                let base = match acc {
                    Some(a) => a,
                    None => {
                        let shape = g.tensor(o_reb).shape();
                        g.input(Tensor::zeros(shape))
                    }
                };
                acc = Some(g.scatter_add_samples(&base, &s, &routed)?);
            }
        }
        let out = match acc {
            Some(a) => a,
            None => {
                let shape = g.tensor(o_reb).shape();
                g.input(Tensor::zeros(shape))
            }
        };
        Ok((out, gate.map(|(_, d)| d)))
    }

    /// Five Conv+ReLU on `o_web`, the REB skip added to the fifth output,
    /// then the sixth Conv+ReLU (for variants that keep it).
    pub fn frb_forward<G: Graph<T>>(&self, g: &mut G, o_web: &G::Value, o_reb4: Option<&G::Value>) -> Result<G::Value> {
        let st = self.structure();
        if st.frb_layers == 0 {
            return Err(Error::invalid(
                "frb_forward",
                format!("variant {} has no feature refinement block", self.config.variant),
            ));
        }
        let mut b = self.stack(g, &self.frb[..5], o_web)?;
        if st.frb_residual {
            let skip = o_reb4.ok_or_else(|| Error::invalid("frb_forward", "missing REB layer-4 output"))?;
            let (bs, ss) = (g.tensor(&b).shape(), g.tensor(skip).shape());
            if bs != ss {
                return Err(Error::ShapeMismatch {
                    op: "frb_forward",
                    left: bs,
                    right: ss,
                });
            }
            b = g.add(&b, skip)?;
        }
        if st.frb_layers == 6 {
            b = g.conv_relu(&self.params, self.frb[5], &b)?;
        }
        Ok(b)
    }

    /// `Conv3x3(shuffle(Conv3x3(x), s))`.
    pub fn rb_forward<G: Graph<T>>(&self, g: &mut G, o_frb: &G::Value) -> Result<G::Value> {
        let c = g.conv2d(&self.params, self.rb[0], o_frb)?;
        let hr = g.pixel_shuffle(&c, self.config.scale)?;
        g.conv2d(&self.params, self.rb[1], &hr)
    }

    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Value) -> Result<ForwardOutput<G::Value>> {
        let xs = g.tensor(x).shape();
        if xs.h < 3 || xs.w < 3 {
            return Err(Error::invalid("forward", format!("input {xs} is smaller than 3x3")));
        }
        let st = self.structure();
        let (o_reb, o_reb4) = self.reb_forward(g, x)?;
        let (o_web, gate) = if st.has_web() {
            let (w, gate) = self.web_forward(g, &o_reb)?;
            (Some(w), gate)
        } else {
            (None, None)
        };
        let feat = o_web.as_ref().unwrap_or(&o_reb);
        let output = if st.frb_layers > 0 {
            let skip = o_reb4.as_ref().or(if st.frb_residual { Some(&o_reb) } else { None });
            let o_frb = self.frb_forward(g, feat, skip)?;
            drop(o_reb4);
            self.rb_forward(g, &o_frb)?
        } else {
            self.rb_forward(g, feat)?
        };
        Ok(ForwardOutput { output, gate })
    }

    /// Inference without recording a tape.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<GateDecision>)> {
        let mut ev = crate::nn::Eval;
        let out = self.forward(&mut ev, x)?;
        Ok((out.output, out.gate))
    }

    /// Forward pass recorded on a fresh tape.
    pub fn forward_tape(&self, x: Tensor<T>) -> Result<(Tape<T>, Var, Option<GateDecision>)> {
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let out = self.forward(&mut tape, &xv)?;
        Ok((tape, out.output, out.gate))
    }

    fn block_of(&self, id: ParamId) -> Block {
        for b in Block::ALL {
            if self.block_layers(b).contains(&id) {
                return b;
            }
        }
        unreachable!("layer {id:?} belongs to no block")
    }

    pub fn count_params(&self) -> ParamReport {
        let mut blocks: Vec<BlockCount> = Vec::new();
        for b in Block::ALL {
            let ids = self.block_layers(b);
            if ids.is_empty() {
                continue;
            }
            let mut count = BlockCount {
                block: b,
                conv_layers: 0,
                fc_layers: 0,
                params: 0,
            };
            for id in ids {
                let l = self.params.get(id);
                match l.kind {
                    LayerKind::Conv { .. } => count.conv_layers += 1,
                    LayerKind::Linear => count.fc_layers += 1,
                }
                count.params += l.num_scalars();
            }
            blocks.push(count);
        }
        let total = blocks.iter().map(|b| b.params).sum();
        let sdg = blocks.iter().filter(|b| b.block == Block::Sdg).map(|b| b.params).sum::<usize>();
        ParamReport {
            blocks,
            total,
            total_without_sdg: total - sdg,
        }
    }

    /// Multiply-accumulates for one LR input of `h x w`: `k^2 * ci * co`
    /// per output pixel of every conv (RB's last conv runs at HR), plus
    /// `ci * co` per fully connected layer.
    pub fn count_macs(&self, h: usize, w: usize) -> MacReport {
        let s = self.config.scale;
        let mut per_block: Vec<(Block, u64)> = Vec::new();
        for (idx, l) in self.params.layers().iter().enumerate() {
            let id = ParamId(idx);
            let ws = l.weight.value.shape();
            let macs = match l.kind {
                LayerKind::Linear => (ws.n * ws.c) as u64,
                LayerKind::Conv { kernel } => {
                    let pixels = if id == self.rb[1] { h * s * w * s } else { h * w };
                    (kernel * kernel * ws.c * ws.n) as u64 * pixels as u64
                }
            };
            let b = self.block_of(id);
            match per_block.iter_mut().find(|(k, _)| *k == b) {
                Some((_, m)) => *m += macs,
                None => per_block.push((b, macs)),
            }
        }
        let routed_total = per_block.iter().map(|(_, m)| m).sum::<u64>();
        let sdg = per_block.iter().filter(|(b, _)| *b == Block::Sdg).map(|(_, m)| m).sum::<u64>();
        MacReport {
            lr_height: h,
            lr_width: w,
            blocks: per_block,
            routed_total,
            skipped_total: routed_total - sdg,
            sdg,
        }
    }

    /// Upper bound on bytes held by tape-free inference of one `h x w` image:
    /// up to eight full-width feature maps (input, REB skip, REB output, WEB
    /// accumulator, two branch maps, a gathered routing copy and its scaled
    /// result) plus the im2col band, the RB tensors and the output.
    pub fn inference_peak_bytes(&self, h: usize, w: usize) -> u64 {
        let elem = T::DTYPE.size_of() as u64;
        let (h, w) = (h as u64, w as u64);
        let c = self.config.width as u64;
        let s = self.config.scale as u64;
        let cin = self.config.in_channels as u64;
        let feature = c * h * w;
        let band = (1u64 << 22).max(9 * c * w);
        let rb = 2 * cin * s * s * h * w + 2 * cin * h * s * w * s;
        (8 * feature + band + rb + cin * h * w) * elem
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let c = &self.config;
        out.write_all(MODEL_MAGIC)?;
        for v in [
            MODEL_VERSION,
            c.scale as u32,
            c.width as u32,
            c.in_channels as u32,
            c.gate_hidden as u32,
            c.variant.code(),
            0, // gate_train_mode: soft_scale
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&c.gate_threshold.to_le_bytes())?;
        out.write_all(&T::DTYPE.code().to_le_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for l in self.params.layers() {
            l.weight.value.write_to(out)?;
            l.bias.value.write_to(out)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        let mut u32s = [0u32; 7];
        for v in u32s.iter_mut() {
            *v = read_u32(input)?;
        }
        let [version, scale, width, in_channels, gate_hidden, variant, mode] = u32s;
        if version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        if mode != 0 {
            return Err(Error::Checkpoint(format!("unknown gate_train_mode code {mode}")));
        }
        let mut tau = [0u8; 8];
        input.read_exact(&mut tau)?;
        let dtype = read_u32(input)?;
        DType::from_code(dtype).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {dtype}")))?;
        let layers = read_u32(input)? as usize;
        let config = ModelConfig {
            scale: scale as usize,
            width: width as usize,
            in_channels: in_channels as usize,
            gate_hidden: gate_hidden as usize,
            gate_threshold: f64::from_le_bytes(tau),
            variant: Variant::from_code(variant)
                .ok_or_else(|| Error::Checkpoint(format!("unknown variant code {variant}")))?,
            gate_train_mode: GateTrainMode::SoftScale,
        };
        let mut net = DsrNet::build(config, &mut Rng::new(0))?;
        if layers != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} layers, found {layers}",
                net.params.len()
            )));
        }
        for l in net.params.layers_mut() {
            let name = l.name.clone();
            for p in l.params_mut() {
                let t = Tensor::<T>::read_from(input)?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!(
                        "layer {}: stored shape {} differs from {}",
                        name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Same weights in another element type (e.g. `f64` for gradient checks).
    pub fn cast<U: Element>(&self) -> DsrNet<U> {
        let mut params = ParamStore::new();
        for l in self.params.layers() {
            params.push(
                LayerParams::from_tensors(l.name.clone(), l.kind, l.weight.value.cast(), l.bias.value.cast())
                    .expect("shapes carried over"),
            );
        }
        DsrNet {
            config: self.config.clone(),
            params,
            reb: self.reb.clone(),
            cb: self.cb.clone(),
            gm: self.gm,
            fdg: self.fdg.clone(),
            sdg: self.sdg.clone(),
            frb: self.frb.clone(),
            rb: self.rb,
        }
    }
}

impl<T> HasParams<T> for DsrNet<T> {
    fn param_store(&self) -> &ParamStore<T> {
        &self.params
    }

    fn param_store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Input shape helper: `(n, in_channels, h, w)`.
pub fn lr_shape(config: &ModelConfig, n: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, config.in_channels, h, w)
}
