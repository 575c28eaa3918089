//! Desk-scale target transformer and the feature-level draft head.
//!
//! The target is a standard pre-norm decoder-only transformer. Three tapped
//! layer outputs (low/mid/high) are concatenated into the fused feature
//! stream the draft consumes. The draft is a single decoder layer over a
//! combination of token embeddings and features, with the FFN swappable
//! between a dense MLP and three expert-mixture budget variants, plus a
//! reduced output vocabulary mapped injectively into the target vocabulary.

use std::path::Path;
use std::rc::Rc;

use crate::attention::{dense_attention_graph, ttt_attention_step, AttnRoute, TTTState};
use crate::blockmask::BlockMask;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::meter::AllocCategory;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

const PAR: AllocCategory = AllocCategory::Parameter;

// ─── Target model ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetConfig {
    pub vocab: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_inter: usize,
    pub tap_layers: [usize; 3],
    pub rope_base: f32,
    pub norm_eps: f32,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            vocab: 256,
            layers: 4,
            hidden: 64,
            heads: 2,
            ffn_inter: 256,
            tap_layers: [0, 2, 3],
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 3 {
            return Err(Error::InvalidParams(format!(
                "target layers {} < 3",
                self.layers
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidParams(format!(
                "heads {} must divide hidden {}",
                self.heads, self.hidden
            )));
        }
        if (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::InvalidParams(
                "head dimension must be even for rotary embedding".into(),
            ));
        }
        let t = self.tap_layers;
        if !(t[0] < t[1] && t[1] < t[2] && t[2] < self.layers) {
            return Err(Error::InvalidParams(format!(
                "tap layers {t:?} must be strictly increasing within [0, {})",
                self.layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone)]
pub struct TargetLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
    pub ffn_up: Tensor,
    pub ffn_down: Tensor,
}

#[derive(Debug, Clone)]
pub struct TargetModel {
    pub cfg: TargetConfig,
    pub embed: Tensor,
    pub layers: Vec<TargetLayer>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl TargetModel {
    pub fn init(cfg: TargetConfig, rng: &mut SeedRng) -> Result<TargetModel> {
        cfg.validate()?;
        let d = cfg.hidden;
        let std = 0.05;
        let out_std = std / (2.0 * cfg.layers as f32).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(TargetLayer {
                wq: Tensor::randn(&[d, d], std, rng, PAR),
                wk: Tensor::randn(&[d, d], std, rng, PAR),
                wv: Tensor::randn(&[d, d], std, rng, PAR),
                wo: Tensor::randn(&[d, d], out_std, rng, PAR),
                attn_norm: Tensor::full(&[d], 1.0, PAR),
                ffn_norm: Tensor::full(&[d], 1.0, PAR),
                ffn_up: Tensor::randn(&[d, cfg.ffn_inter], std, rng, PAR),
                ffn_down: Tensor::randn(&[cfg.ffn_inter, d], out_std, rng, PAR),
            });
        }
        Ok(TargetModel {
            cfg,
            embed: Tensor::randn(&[cfg.vocab, d], std, rng, PAR),
            layers,
            final_norm: Tensor::full(&[d], 1.0, PAR),
            head: Tensor::randn(&[d, cfg.vocab], std, rng, PAR),
        })
    }

    /// Named parameters in deterministic order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.ffn_norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.ffn_up"), &l.ffn_up));
            out.push((format!("layers.{i}.ffn_down"), &l.ffn_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.ffn_norm"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.ffn_up"), &mut l.ffn_up));
            out.push((format!("layers.{i}.ffn_down"), &mut l.ffn_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_params()
            .iter()
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    /// Register every parameter on a tape. `trainable` gates gradient flow.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> TargetVars {
        let bindv = |tape: &mut Tape, t: &Tensor| {
            let copy = Tensor::from_vec(t.shape(), t.data().to_vec(), PAR);
            tape.leaf(copy, trainable)
        };
        TargetVars {
            embed: bindv(tape, &self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| TargetLayerVars {
                    wq: bindv(tape, &l.wq),
                    wk: bindv(tape, &l.wk),
                    wv: bindv(tape, &l.wv),
                    wo: bindv(tape, &l.wo),
                    attn_norm: bindv(tape, &l.attn_norm),
                    ffn_norm: bindv(tape, &l.ffn_norm),
                    ffn_up: bindv(tape, &l.ffn_up),
                    ffn_down: bindv(tape, &l.ffn_down),
                })
                .collect(),
            final_norm: bindv(tape, &self.final_norm),
            head: bindv(tape, &self.head),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.cfg;
        let meta = Tensor::from_vec(
            &[10],
            vec![
                cfg.vocab as f32,
                cfg.layers as f32,
                cfg.hidden as f32,
                cfg.heads as f32,
                cfg.ffn_inter as f32,
                cfg.tap_layers[0] as f32,
                cfg.tap_layers[1] as f32,
                cfg.tap_layers[2] as f32,
                cfg.rope_base,
                cfg.norm_eps,
            ],
            PAR,
        );
        let mut entries: Vec<(String, &Tensor)> = vec![("meta.target".to_string(), &meta)];
        let named = self.named_params();
        entries.extend(named.iter().map(|(n, t)| (n.clone(), *t)));
        checkpoint::write_file(path, &entries)
    }

    pub fn load(path: &Path) -> Result<TargetModel> {
        let entries = checkpoint::read_file(path)?;
        let meta = checkpoint::find(&entries, "meta.target")?;
        let m = meta.data();
        let cfg = TargetConfig {
            vocab: m[0] as usize,
            layers: m[1] as usize,
            hidden: m[2] as usize,
            heads: m[3] as usize,
            ffn_inter: m[4] as usize,
            tap_layers: [m[5] as usize, m[6] as usize, m[7] as usize],
            rope_base: m[8],
            norm_eps: m[9],
        };
        cfg.validate()?;
        let get = |name: &str| checkpoint::find(&entries, name).cloned();
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            layers.push(TargetLayer {
                wq: get(&format!("layers.{i}.wq"))?,
                wk: get(&format!("layers.{i}.wk"))?,
                wv: get(&format!("layers.{i}.wv"))?,
                wo: get(&format!("layers.{i}.wo"))?,
                attn_norm: get(&format!("layers.{i}.attn_norm"))?,
                ffn_norm: get(&format!("layers.{i}.ffn_norm"))?,
                ffn_up: get(&format!("layers.{i}.ffn_up"))?,
                ffn_down: get(&format!("layers.{i}.ffn_down"))?,
            });
        }
        Ok(TargetModel {
            cfg,
            embed: get("embed")?,
            layers,
            final_norm: get("final_norm")?,
            head: get("head")?,
        })
    }
}

pub struct TargetLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub attn_norm: Var,
    pub ffn_norm: Var,
    pub ffn_up: Var,
    pub ffn_down: Var,
}

pub struct TargetVars {
    pub embed: Var,
    pub layers: Vec<TargetLayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl TargetVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.attn_norm,
                l.ffn_norm,
                l.ffn_up,
                l.ffn_down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }
}

/// Prefill outputs: next-token logits per position plus the fused tap
/// features the draft consumes.
pub struct TargetForward {
    pub logits: Var,
    pub fused: Var,
}

/// Multi-head attention sublayer from primitive ops, shared by the causal
/// and tree-masked forward paths.
fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    positions: &Rc<Vec<u32>>,
    rope_base: f32,
    mask: &[bool],
) -> Result<Var> {
    let d = tape.value(x).shape()[1];
    let dh = d / heads;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let qh = tape.rope(qh, Rc::clone(positions), rope_base)?;
        let kh = tape.rope(kh, Rc::clone(positions), rope_base)?;
        head_outs.push(dense_attention_graph(tape, qh, kh, vh, mask)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    tape.matmul(cat, wo)
}

/// Causal prefill over a token sequence.
pub fn target_forward(
    tape: &mut Tape,
    vars: &TargetVars,
    cfg: &TargetConfig,
    tokens: &[u32],
) -> Result<TargetForward> {
    let n = tokens.len();
    let mask: Vec<bool> = (0..n).flat_map(|r| (0..n).map(move |c| c <= r)).collect();
    let positions: Vec<u32> = (0..n as u32).collect();
    target_forward_masked(tape, vars, cfg, tokens, &positions, &mask)
}

/// Forward with an arbitrary attention mask and explicit positions; the
/// tree-verification path supplies ancestor masks here.
pub fn target_forward_masked(
    tape: &mut Tape,
    vars: &TargetVars,
    cfg: &TargetConfig,
    tokens: &[u32],
    positions: &[u32],
    mask: &[bool],
) -> Result<TargetForward> {
    if tokens.is_empty() {
        return Err(Error::InvalidParams("empty token sequence".into()));
    }
    if positions.len() != tokens.len() {
        return Err(Error::Dimension(format!(
            "{} positions for {} tokens",
            positions.len(),
            tokens.len()
        )));
    }
    let positions = Rc::new(positions.to_vec());
    let mut h = tape.embedding(vars.embed, tokens)?;
    let mut taps = Vec::new();
    for (li, l) in vars.layers.iter().enumerate() {
        let a_in = tape.rms_norm(h, l.attn_norm, cfg.norm_eps)?;
        let attn = multi_head_attention(
            tape,
            a_in,
            l.wq,
            l.wk,
            l.wv,
            l.wo,
            cfg.heads,
            &positions,
            cfg.rope_base,
            mask,
        )?;
        h = tape.add(h, attn)?;
        let f_in = tape.rms_norm(h, l.ffn_norm, cfg.norm_eps)?;
        let up = tape.matmul(f_in, l.ffn_up)?;
        let act = tape.silu(up);
        let down = tape.matmul(act, l.ffn_down)?;
        h = tape.add(h, down)?;
        if cfg.tap_layers.contains(&li) {
            taps.push(h);
        }
    }
    let fused = tape.concat_cols(&taps)?;
    let hn = tape.rms_norm(h, vars.final_norm, cfg.norm_eps)?;
    let logits = tape.matmul(hn, vars.head)?;
    Ok(TargetForward { logits, fused })
}

// ─── Draft model ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnVariant {
    Dense,
    MoESameParams,
    MoESameFlops,
    MoESharedExpert,
}

impl FfnVariant {
    pub fn id(self) -> u8 {
        match self {
            FfnVariant::Dense => 0,
            FfnVariant::MoESameParams => 1,
            FfnVariant::MoESameFlops => 2,
            FfnVariant::MoESharedExpert => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<FfnVariant> {
        Ok(match id {
            0 => FfnVariant::Dense,
            1 => FfnVariant::MoESameParams,
            2 => FfnVariant::MoESameFlops,
            3 => FfnVariant::MoESharedExpert,
            other => {
                return Err(Error::Checkpoint(format!("unknown ffn variant id {other}")))
            }
        })
    }

    pub fn is_moe(self) -> bool {
        self != FfnVariant::Dense
    }
}

/// How token embeddings and features combine at the draft input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMode {
    /// Concatenate `[emb | features]` then project `2d → d`.
    ConcatProject,
    /// Elementwise sum.
    Add,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DraftConfig {
    pub hidden: usize,
    pub heads: usize,
    pub target_hidden: usize,
    pub vocab_target: usize,
    pub vocab_draft: usize,
    pub ffn_inter: usize,
    pub ffn_variant: FfnVariant,
    pub experts: usize,
    pub router_top_k: usize,
    pub combine: CombineMode,
    pub rope_base: f32,
    pub norm_eps: f32,
}

impl Default for DraftConfig {
    fn default() -> Self {
        DraftConfig {
            hidden: 64,
            heads: 2,
            target_hidden: 64,
            vocab_target: 256,
            vocab_draft: 128,
            ffn_inter: 256,
            ffn_variant: FfnVariant::Dense,
            experts: 2,
            router_top_k: 1,
            combine: CombineMode::ConcatProject,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl DraftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 || (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::InvalidParams(
                "draft hidden must split into even-sized heads".into(),
            ));
        }
        if self.vocab_draft < 2 || self.vocab_draft > self.vocab_target {
            return Err(Error::InvalidParams(format!(
                "draft vocab {} must lie in [2, target vocab {}]",
                self.vocab_draft, self.vocab_target
            )));
        }
        if self.ffn_variant.is_moe() {
            if self.experts < 2 {
                return Err(Error::InvalidParams(format!(
                    "{:?} needs ≥ 2 experts, got {}",
                    self.ffn_variant, self.experts
                )));
            }
            if self.router_top_k == 0 || self.router_top_k > self.experts {
                return Err(Error::InvalidParams(format!(
                    "router top-k {} out of range for {} experts",
                    self.router_top_k, self.experts
                )));
            }
            if self.ffn_variant == FfnVariant::MoESameParams && self.ffn_inter % self.experts != 0
            {
                return Err(Error::InvalidParams(format!(
                    "same-params variant needs experts {} to divide intermediate {}",
                    self.experts, self.ffn_inter
                )));
            }
        }
        Ok(())
    }

    /// Expert intermediate width under the variant's budget rule.
    pub fn expert_inter(&self) -> usize {
        match self.ffn_variant {
            FfnVariant::Dense => self.ffn_inter,
            FfnVariant::MoESameParams => self.ffn_inter / self.experts,
            FfnVariant::MoESameFlops | FfnVariant::MoESharedExpert => self.ffn_inter,
        }
    }
}

/// Exact parameter/multiply accounting for the FFN block, split so budget
/// rules can be checked with and without the router.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnCounts {
    pub expert_params: u64,
    pub router_params: u64,
    pub shared_params: u64,
    /// Multiplies per token through the selected experts (and shared expert).
    pub expert_flops: u64,
    pub router_flops: u64,
}

impl FfnCounts {
    pub fn total_params(&self) -> u64 {
        self.expert_params + self.router_params + self.shared_params
    }

    pub fn total_flops(&self) -> u64 {
        self.expert_flops + self.router_flops
    }
}

/// Count parameters and per-token multiplies for a variant configuration.
pub fn ffn_counts(cfg: &DraftConfig) -> FfnCounts {
    let d = cfg.hidden as u64;
    let inter = cfg.ffn_inter as u64;
    match cfg.ffn_variant {
        FfnVariant::Dense => FfnCounts {
            expert_params: 2 * d * inter,
            router_params: 0,
            shared_params: 0,
            expert_flops: 2 * d * inter,
            router_flops: 0,
        },
        FfnVariant::MoESameParams => {
            let e = cfg.experts as u64;
            let ei = inter / e;
            FfnCounts {
                expert_params: e * 2 * d * ei,
                router_params: d * e,
                shared_params: 0,
                expert_flops: cfg.router_top_k as u64 * 2 * d * ei,
                router_flops: d * e,
            }
        }
        FfnVariant::MoESameFlops | FfnVariant::MoESharedExpert => {
            let e = cfg.experts as u64;
            let shared = if cfg.ffn_variant == FfnVariant::MoESharedExpert {
                2 * d * inter
            } else {
                0
            };
            FfnCounts {
                expert_params: e * 2 * d * inter,
                router_params: d * e,
                shared_params: shared,
                expert_flops: cfg.router_top_k as u64 * 2 * d * inter + shared,
                router_flops: d * e,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum FfnWeights {
    Dense {
        up: Tensor,
        down: Tensor,
    },
    Moe {
        router: Tensor,
        experts: Vec<(Tensor, Tensor)>,
        shared: Option<(Tensor, Tensor)>,
        top_k: usize,
    },
}

#[derive(Debug, Clone)]
pub struct DraftModel {
    pub cfg: DraftConfig,
    pub embed: Tensor,
    pub fusion: Tensor,
    pub combine_w: Option<Tensor>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub attn_norm: Tensor,
    pub ffn_norm: Tensor,
    pub ffn: FfnWeights,
    pub final_norm: Tensor,
    pub head: Tensor,
    /// Draft slot → target token id, injective.
    pub vocab_map: Vec<u32>,
}

impl DraftModel {
    pub fn init(cfg: DraftConfig, vocab_map: Vec<u32>, rng: &mut SeedRng) -> Result<DraftModel> {
        cfg.validate()?;
        if vocab_map.len() != cfg.vocab_draft {
            return Err(Error::InvalidParams(format!(
                "vocab map has {} entries for draft vocab {}",
                vocab_map.len(),
                cfg.vocab_draft
            )));
        }
        let d = cfg.hidden;
        let std = 0.05;
        let ffn = match cfg.ffn_variant {
            FfnVariant::Dense => FfnWeights::Dense {
                up: Tensor::randn(&[d, cfg.ffn_inter], std, rng, PAR),
                down: Tensor::randn(&[cfg.ffn_inter, d], std, rng, PAR),
            },
            _ => {
                let ei = cfg.expert_inter();
                let experts = (0..cfg.experts)
                    .map(|_| {
                        (
                            Tensor::randn(&[d, ei], std, rng, PAR),
                            Tensor::randn(&[ei, d], std, rng, PAR),
                        )
                    })
                    .collect();
                let shared = if cfg.ffn_variant == FfnVariant::MoESharedExpert {
                    Some((
                        Tensor::randn(&[d, cfg.ffn_inter], std, rng, PAR),
                        Tensor::randn(&[cfg.ffn_inter, d], std, rng, PAR),
                    ))
                } else {
                    None
                };
                FfnWeights::Moe {
                    router: Tensor::randn(&[d, cfg.experts], std, rng, PAR),
                    experts,
                    shared,
                    top_k: cfg.router_top_k,
                }
            }
        };
        Ok(DraftModel {
            cfg,
            embed: Tensor::randn(&[cfg.vocab_target, d], std, rng, PAR),
            fusion: Tensor::randn(&[3 * cfg.target_hidden, d], std, rng, PAR),
            combine_w: match cfg.combine {
                CombineMode::ConcatProject => Some(Tensor::randn(&[2 * d, d], std, rng, PAR)),
                CombineMode::Add => None,
            },
            wq: Tensor::randn(&[d, d], std, rng, PAR),
            wk: Tensor::randn(&[d, d], std, rng, PAR),
            wv: Tensor::randn(&[d, d], std, rng, PAR),
            wo: Tensor::randn(&[d, d], std, rng, PAR),
            attn_norm: Tensor::full(&[d], 1.0, PAR),
            ffn_norm: Tensor::full(&[d], 1.0, PAR),
            ffn,
            final_norm: Tensor::full(&[d], 1.0, PAR),
            head: Tensor::randn(&[d, cfg.vocab_draft], std, rng, PAR),
            vocab_map,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("fusion".to_string(), &self.fusion),
        ];
        if let Some(c) = &self.combine_w {
            out.push(("combine".to_string(), c));
        }
        out.push(("wq".to_string(), &self.wq));
        out.push(("wk".to_string(), &self.wk));
        out.push(("wv".to_string(), &self.wv));
        out.push(("wo".to_string(), &self.wo));
        out.push(("attn_norm".to_string(), &self.attn_norm));
        out.push(("ffn_norm".to_string(), &self.ffn_norm));
        match &self.ffn {
            FfnWeights::Dense { up, down } => {
                out.push(("ffn.up".to_string(), up));
                out.push(("ffn.down".to_string(), down));
            }
            FfnWeights::Moe {
                router,
                experts,
                shared,
                ..
            } => {
                out.push(("ffn.router".to_string(), router));
                for (e, (up, down)) in experts.iter().enumerate() {
                    out.push((format!("ffn.expert{e}.up"), up));
                    out.push((format!("ffn.expert{e}.down"), down));
                }
                if let Some((up, down)) = shared {
                    out.push(("ffn.shared.up".to_string(), up));
                    out.push(("ffn.shared.down".to_string(), down));
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed".to_string(), &mut self.embed),
            ("fusion".to_string(), &mut self.fusion),
        ];
        if let Some(c) = &mut self.combine_w {
            out.push(("combine".to_string(), c));
        }
        out.push(("wq".to_string(), &mut self.wq));
        out.push(("wk".to_string(), &mut self.wk));
        out.push(("wv".to_string(), &mut self.wv));
        out.push(("wo".to_string(), &mut self.wo));
        out.push(("attn_norm".to_string(), &mut self.attn_norm));
        out.push(("ffn_norm".to_string(), &mut self.ffn_norm));
        match &mut self.ffn {
            FfnWeights::Dense { up, down } => {
                out.push(("ffn.up".to_string(), up));
                out.push(("ffn.down".to_string(), down));
            }
            FfnWeights::Moe {
                router,
                experts,
                shared,
                ..
            } => {
                out.push(("ffn.router".to_string(), router));
                for (e, (up, down)) in experts.iter_mut().enumerate() {
                    out.push((format!("ffn.expert{e}.up"), up));
                    out.push((format!("ffn.expert{e}.down"), down));
                }
                if let Some((up, down)) = shared {
                    out.push(("ffn.shared.up".to_string(), up));
                    out.push(("ffn.shared.down".to_string(), down));
                }
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_params()
            .iter()
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DraftVars {
        let bindv = |tape: &mut Tape, t: &Tensor| {
            let copy = Tensor::from_vec(t.shape(), t.data().to_vec(), PAR);
            tape.leaf(copy, trainable)
        };
        DraftVars {
            embed: bindv(tape, &self.embed),
            fusion: bindv(tape, &self.fusion),
            combine: self.combine_w.as_ref().map(|c| bindv(tape, c)),
            wq: bindv(tape, &self.wq),
            wk: bindv(tape, &self.wk),
            wv: bindv(tape, &self.wv),
            wo: bindv(tape, &self.wo),
            attn_norm: bindv(tape, &self.attn_norm),
            ffn_norm: bindv(tape, &self.ffn_norm),
            ffn: match &self.ffn {
                FfnWeights::Dense { up, down } => FfnVars::Dense {
                    up: bindv(tape, up),
                    down: bindv(tape, down),
                },
                FfnWeights::Moe {
                    router,
                    experts,
                    shared,
                    top_k,
                } => FfnVars::Moe {
                    router: bindv(tape, router),
                    experts: experts
                        .iter()
                        .map(|(u, d)| (bindv(tape, u), bindv(tape, d)))
                        .collect(),
                    shared: shared.as_ref().map(|(u, d)| (bindv(tape, u), bindv(tape, d))),
                    top_k: *top_k,
                },
            },
            final_norm: bindv(tape, &self.final_norm),
            head: bindv(tape, &self.head),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = &self.cfg;
        let meta = Tensor::from_vec(
            &[12],
            vec![
                cfg.hidden as f32,
                cfg.heads as f32,
                cfg.target_hidden as f32,
                cfg.vocab_target as f32,
                cfg.vocab_draft as f32,
                cfg.ffn_inter as f32,
                f32::from(cfg.ffn_variant.id()),
                cfg.experts as f32,
                cfg.router_top_k as f32,
                match cfg.combine {
                    CombineMode::ConcatProject => 0.0,
                    CombineMode::Add => 1.0,
                },
                cfg.rope_base,
                cfg.norm_eps,
            ],
            PAR,
        );
        let map = Tensor::from_vec(
            &[self.vocab_map.len()],
            self.vocab_map.iter().map(|&t| t as f32).collect(),
            PAR,
        );
        let mut entries: Vec<(String, &Tensor)> = vec![
            ("meta.draft".to_string(), &meta),
            ("vocab_map".to_string(), &map),
        ];
        let named = self.named_params();
        entries.extend(named.iter().map(|(n, t)| (n.clone(), *t)));
        checkpoint::write_file(path, &entries)
    }

    pub fn load(path: &Path) -> Result<DraftModel> {
        let entries = checkpoint::read_file(path)?;
        let m = checkpoint::find(&entries, "meta.draft")?.data().to_vec();
        let cfg = DraftConfig {
            hidden: m[0] as usize,
            heads: m[1] as usize,
            target_hidden: m[2] as usize,
            vocab_target: m[3] as usize,
            vocab_draft: m[4] as usize,
            ffn_inter: m[5] as usize,
            ffn_variant: FfnVariant::from_id(m[6] as u8)?,
            experts: m[7] as usize,
            router_top_k: m[8] as usize,
            combine: if m[9] == 0.0 {
                CombineMode::ConcatProject
            } else {
                CombineMode::Add
            },
            rope_base: m[10],
            norm_eps: m[11],
        };
        cfg.validate()?;
        let vocab_map: Vec<u32> = checkpoint::find(&entries, "vocab_map")?
            .data()
            .iter()
            .map(|&v| v as u32)
            .collect();
        let get = |name: &str| checkpoint::find(&entries, name).cloned();
        let ffn = match cfg.ffn_variant {
            FfnVariant::Dense => FfnWeights::Dense {
                up: get("ffn.up")?,
                down: get("ffn.down")?,
            },
            _ => {
                let experts = (0..cfg.experts)
                    .map(|e| {
                        Ok((
                            get(&format!("ffn.expert{e}.up"))?,
                            get(&format!("ffn.expert{e}.down"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let shared = if cfg.ffn_variant == FfnVariant::MoESharedExpert {
                    Some((get("ffn.shared.up")?, get("ffn.shared.down")?))
                } else {
                    None
                };
                FfnWeights::Moe {
                    router: get("ffn.router")?,
                    experts,
                    shared,
                    top_k: cfg.router_top_k,
                }
            }
        };
        Ok(DraftModel {
            cfg,
            embed: get("embed")?,
            fusion: get("fusion")?,
            combine_w: match cfg.combine {
                CombineMode::ConcatProject => Some(get("combine")?),
                CombineMode::Add => None,
            },
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            attn_norm: get("attn_norm")?,
            ffn_norm: get("ffn_norm")?,
            ffn,
            final_norm: get("final_norm")?,
            head: get("head")?,
            vocab_map,
        })
    }
}

pub enum FfnVars {
    Dense {
        up: Var,
        down: Var,
    },
    Moe {
        router: Var,
        experts: Vec<(Var, Var)>,
        shared: Option<(Var, Var)>,
        top_k: usize,
    },
}

pub struct DraftVars {
    pub embed: Var,
    pub fusion: Var,
    pub combine: Option<Var>,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub attn_norm: Var,
    pub ffn_norm: Var,
    pub ffn: FfnVars,
    pub final_norm: Var,
    pub head: Var,
}

impl DraftVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.fusion];
        if let Some(c) = self.combine {
            out.push(c);
        }
        out.extend([self.wq, self.wk, self.wv, self.wo, self.attn_norm, self.ffn_norm]);
        match &self.ffn {
            FfnVars::Dense { up, down } => out.extend([*up, *down]),
            FfnVars::Moe {
                router,
                experts,
                shared,
                ..
            } => {
                out.push(*router);
                for (u, d) in experts {
                    out.extend([*u, *d]);
                }
                if let Some((u, d)) = shared {
                    out.extend([*u, *d]);
                }
            }
        }
        out.extend([self.final_norm, self.head]);
        out
    }
}

/// Routed FFN forward. Dense applies the MLP to all rows; mixture variants
/// route each row through its top-k experts with weights renormalized over
/// the selection (softmax over the selected logits), lowest expert index
/// winning ties.
pub fn ffn_forward(tape: &mut Tape, ffn: &FfnVars, x: Var) -> Result<Var> {
    match ffn {
        FfnVars::Dense { up, down } => {
            let u = tape.matmul(x, *up)?;
            let a = tape.silu(u);
            tape.matmul(a, *down)
        }
        FfnVars::Moe {
            router,
            experts,
            shared,
            top_k,
        } => {
            let rows = tape.value(x).shape()[0];
            let rl = tape.matmul(x, *router)?;
            let mut out_rows = Vec::with_capacity(rows);
            for r in 0..rows {
                let xr = tape.slice_rows(x, r, r + 1)?;
                let logits_row = tape.slice_rows(rl, r, r + 1)?;
                // Deterministic top-k on values, lowest index first on ties.
                let vals = tape.value(logits_row).data().to_vec();
                let mut order: Vec<usize> = (0..vals.len()).collect();
                order.sort_by(|&a, &b| {
                    vals[b]
                        .partial_cmp(&vals[a])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.cmp(&b))
                });
                let selected = &order[..*top_k];
                // Renormalized weights = softmax over the selected logits.
                let picked: Vec<Var> = selected
                    .iter()
                    .map(|&e| tape.slice_cols(logits_row, e, e + 1))
                    .collect::<Result<Vec<_>>>()?;
                let sel_logits = tape.concat_cols(&picked)?;
                let weights = tape.softmax(sel_logits)?;
                let mut row_out: Option<Var> = None;
                for (si, &e) in selected.iter().enumerate() {
                    let (up, down) = experts[e];
                    let u = tape.matmul(xr, up)?;
                    let a = tape.silu(u);
                    let y = tape.matmul(a, down)?;
                    let w = tape.slice_cols(weights, si, si + 1)?;
                    let y = tape.scale_rows(y, w)?;
                    row_out = Some(match row_out {
                        Some(acc) => tape.add(acc, y)?,
                        None => y,
                    });
                }
                let mut y = row_out.unwrap();
                if let Some((su, sd)) = shared {
                    let u = tape.matmul(xr, *su)?;
                    let a = tape.silu(u);
                    let s = tape.matmul(a, *sd)?;
                    y = tape.add(y, s)?;
                }
                out_rows.push(y);
            }
            tape.concat_rows(&out_rows)
        }
    }
}

/// Feature input for one draft step: fused target taps on the first step,
/// the draft's own features afterwards.
pub enum FeatureInput {
    /// `[T, 3·target_hidden]` fused tap features (projected through `fusion`).
    Fused(Var),
    /// `[T, hidden]` features from the previous step.
    Features(Var),
}

pub struct DraftForward {
    pub logits: Var,
    pub features: Var,
}

/// Multi-head per-step KV state for the draft's decoder layer.
pub struct DraftAttnState {
    pub heads: Vec<TTTState>,
}

impl DraftAttnState {
    pub fn new(cfg: &DraftConfig) -> DraftAttnState {
        DraftAttnState {
            heads: (0..cfg.heads)
                .map(|_| TTTState::new(cfg.hidden / cfg.heads))
                .collect(),
        }
    }

    pub fn completed_steps(&self) -> usize {
        self.heads.first().map_or(0, |h| h.completed_steps())
    }
}

/// One unroll step of the draft decoder layer.
///
/// Token embeddings combine with the step's feature input; the single
/// decoder layer attends through the step's mask against the cached state;
/// the returned features feed the next step and the logits land in the
/// draft vocabulary.
pub fn draft_forward(
    tape: &mut Tape,
    vars: &DraftVars,
    cfg: &DraftConfig,
    tokens: &[u32],
    features: FeatureInput,
    state: &mut DraftAttnState,
    mask: &Rc<BlockMask>,
    route: AttnRoute,
) -> Result<DraftForward> {
    let t = tokens.len();
    if mask.params().q_len != t {
        return Err(Error::Dimension(format!(
            "draft_forward: {} tokens vs mask q_len {}",
            t,
            mask.params().q_len
        )));
    }
    let emb = tape.embedding(vars.embed, tokens)?;
    let feat = match features {
        FeatureInput::Fused(f) => tape.matmul(f, vars.fusion)?,
        FeatureInput::Features(f) => f,
    };
    let x = match cfg.combine {
        CombineMode::ConcatProject => {
            let cat = tape.concat_cols(&[emb, feat])?;
            tape.matmul(cat, vars.combine.expect("combine weight present"))?
        }
        CombineMode::Add => tape.add(emb, feat)?,
    };

    // Positions repeat 0..T  per step: the diagonal suffix mask aligns a
    // query with the same position's cache entries, so the rotation angles
    // must match across steps.
    let positions = Rc::new((0..t as u32).collect::<Vec<u32>>());
    let d = cfg.hidden;
    let dh = d / cfg.heads;
    let a_in = tape.rms_norm(x, vars.attn_norm, cfg.norm_eps)?;
    let q = tape.matmul(a_in, vars.wq)?;
    let k = tape.matmul(a_in, vars.wk)?;
    let v = tape.matmul(a_in, vars.wv)?;
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for (h, state_h) in state.heads.iter_mut().enumerate() {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let qh = tape.rope(qh, Rc::clone(&positions), cfg.rope_base)?;
        let kh = tape.rope(kh, Rc::clone(&positions), cfg.rope_base)?;
        head_outs.push(ttt_attention_step(tape, state_h, qh, kh, vh, mask, route)?);
    }
    let cat = tape.concat_cols(&head_outs)?;
    let attn = tape.matmul(cat, vars.wo)?;
    let x = tape.add(x, attn)?;

    let f_in = tape.rms_norm(x, vars.ffn_norm, cfg.norm_eps)?;
    let f_out = ffn_forward(tape, &vars.ffn, f_in)?;
    let features_out = tape.add(x, f_out)?;

    let hn = tape.rms_norm(features_out, vars.final_norm, cfg.norm_eps)?;
    let logits = tape.matmul(hn, vars.head)?;
    Ok(DraftForward {
        logits,
        features: features_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockmask::{build_blockmask, MaskParams};
    use crate::tensor;

    fn tiny_target() -> (TargetModel, SeedRng) {
        let mut rng = SeedRng::new(42);
        let cfg = TargetConfig {
            vocab: 16,
            layers: 3,
            hidden: 8,
            heads: 2,
            ffn_inter: 16,
            tap_layers: [0, 1, 2],
            ..TargetConfig::default()
        };
        (TargetModel::init(cfg, &mut rng).unwrap(), rng)
    }

    #[test]
    fn target_forward_shapes() {
        let (model, _) = tiny_target();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let out = target_forward(&mut tape, &vars, &model.cfg, &[3]).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[1, 16]);
        assert_eq!(tape.value(out.fused).shape(), &[1, 24]);
    }

    #[test]
    fn causal_prefix_property_is_bit_exact() {
        let (model, _) = tiny_target();
        let tokens: Vec<u32> = vec![1, 5, 2, 9, 14, 7];
        let mut tape_full = Tape::new();
        let vars = model.bind(&mut tape_full, false);
        let full = target_forward(&mut tape_full, &vars, &model.cfg, &tokens).unwrap();
        for t in 1..tokens.len() {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let part = target_forward(&mut tape, &vars, &model.cfg, &tokens[..t]).unwrap();
            for r in 0..t {
                assert_eq!(
                    tape.value(part.logits).row(r),
                    tape_full.value(full.logits).row(r),
                    "prefix row {r} of {t}"
                );
            }
        }
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let (mut model, _) = tiny_target();
        model.head = Tensor::zeros(&[8, 16], PAR);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let out = target_forward(&mut tape, &vars, &model.cfg, &[0, 1, 2]).unwrap();
        let probs =
            tensor::softmax(tape.value(out.logits), 1, AllocCategory::Activation).unwrap();
        for &p in probs.data() {
            assert!((p - 1.0 / 16.0).abs() < 1e-7);
        }
    }

    #[test]
    fn token_out_of_range_rejected() {
        let (model, _) = tiny_target();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        assert!(target_forward(&mut tape, &vars, &model.cfg, &[16]).is_err());
    }

    #[test]
    fn perturbing_a_token_leaves_earlier_logits_unchanged() {
        let (model, _) = tiny_target();
        let a: Vec<u32> = vec![1, 2, 3, 4, 5];
        let mut b = a.clone();
        b[3] = 9;
        let run = |toks: &[u32]| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let out = target_forward(&mut tape, &vars, &model.cfg, toks).unwrap();
            tape.value(out.logits).data().to_vec()
        };
        let la = run(&a);
        let lb = run(&b);
        for r in 0..3 {
            assert_eq!(la[r * 16..(r + 1) * 16], lb[r * 16..(r + 1) * 16]);
        }
        assert_ne!(la[3 * 16..4 * 16], lb[3 * 16..4 * 16]);
    }

    fn tiny_draft(variant: FfnVariant, experts: usize, top_k: usize) -> DraftModel {
        let mut rng = SeedRng::new(7);
        let cfg = DraftConfig {
            hidden: 8,
            heads: 2,
            target_hidden: 8,
            vocab_target: 16,
            vocab_draft: 8,
            ffn_inter: 16,
            ffn_variant: variant,
            experts,
            router_top_k: top_k,
            ..DraftConfig::default()
        };
        let map: Vec<u32> = (0..8).collect();
        DraftModel::init(cfg, map, &mut rng).unwrap()
    }

    #[test]
    fn draft_forward_shape_contract_and_determinism() {
        let draft = tiny_draft(FfnVariant::Dense, 2, 1);
        let run = || {
            let mut rng = SeedRng::new(3);
            let mut tape = Tape::new();
            let vars = draft.bind(&mut tape, false);
            let fused = tape.leaf(
                Tensor::randn(&[4, 24], 1.0, &mut rng, AllocCategory::Activation),
                false,
            );
            let mut state = DraftAttnState::new(&draft.cfg);
            let p = MaskParams::new(4, 4, 0, 4).unwrap();
            let mask = Rc::new(build_blockmask(&p).unwrap());
            let out = draft_forward(
                &mut tape,
                &vars,
                &draft.cfg,
                &[1, 2, 3, 4],
                FeatureInput::Fused(fused),
                &mut state,
                &mask,
                AttnRoute::Streaming,
            )
            .unwrap();
            assert_eq!(tape.value(out.logits).shape(), &[4, 8]);
            assert_eq!(tape.value(out.features).shape(), &[4, 8]);
            tape.value(out.logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn moe_single_expert_degenerates_to_dense() {
        // Same expert weights as the dense MLP → identical output.
        let mut rng = SeedRng::new(11);
        let d = 8;
        let inter = 16;
        let up = Tensor::randn(&[d, inter], 0.3, &mut rng, PAR);
        let down = Tensor::randn(&[inter, d], 0.3, &mut rng, PAR);
        let x_t = Tensor::randn(&[3, d], 1.0, &mut rng, AllocCategory::Activation);

        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone(), false);
        let dense_vars = FfnVars::Dense {
            up: tape.param(&up),
            down: tape.param(&down),
        };
        let dense_out = ffn_forward(&mut tape, &dense_vars, x).unwrap();

        let moe_vars = FfnVars::Moe {
            router: tape.param(&Tensor::zeros(&[d, 1], PAR)),
            experts: vec![(tape.param(&up), tape.param(&down))],
            shared: None,
            top_k: 1,
        };
        let moe_out = ffn_forward(&mut tape, &moe_vars, x).unwrap();
        for (a, b) in tape
            .value(dense_out)
            .data()
            .iter()
            .zip(tape.value(moe_out).data())
        {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn same_params_budget_exact() {
        let dense = tiny_draft(FfnVariant::Dense, 2, 1);
        let moe = tiny_draft(FfnVariant::MoESameParams, 2, 1);
        let dc = ffn_counts(&dense.cfg);
        let mc = ffn_counts(&moe.cfg);
        assert_eq!(dc.expert_params, 2 * 8 * 16);
        assert_eq!(mc.expert_params, dc.expert_params);
    }

    #[test]
    fn same_flops_budget_within_router_cost() {
        let dense = tiny_draft(FfnVariant::Dense, 2, 1);
        let moe = tiny_draft(FfnVariant::MoESameFlops, 2, 1);
        let dc = ffn_counts(&dense.cfg);
        let mc = ffn_counts(&moe.cfg);
        assert_eq!(mc.expert_flops, dc.expert_flops);
        assert_eq!(mc.total_flops(), dc.total_flops() + mc.router_flops);
        assert_eq!(mc.expert_params, 2 * dc.expert_params);
    }

    #[test]
    fn moe_weight_counts_match_accounting() {
        for (variant, e) in [
            (FfnVariant::MoESameParams, 2),
            (FfnVariant::MoESameFlops, 3),
            (FfnVariant::MoESharedExpert, 2),
        ] {
            let m = tiny_draft(variant, e, 1);
            let counts = ffn_counts(&m.cfg);
            let actual: u64 = match &m.ffn {
                FfnWeights::Moe {
                    router,
                    experts,
                    shared,
                    ..
                } => {
                    router.numel() as u64
                        + experts
                            .iter()
                            .map(|(u, d)| (u.numel() + d.numel()) as u64)
                            .sum::<u64>()
                        + shared
                            .as_ref()
                            .map_or(0, |(u, d)| (u.numel() + d.numel()) as u64)
                }
                FfnWeights::Dense { .. } => unreachable!(),
            };
            assert_eq!(actual, counts.total_params(), "{variant:?}");
        }
    }

    #[test]
    fn router_tie_break_prefers_lowest_index() {
        let mut tape = Tape::new();
        let d = 4;
        let x = tape.leaf(Tensor::full(&[1, d], 0.5, AllocCategory::Activation), false);
        // Zero router → all logits tie → expert 0 must win.
        let e0 = (
            tape.param(&Tensor::full(&[d, d], 1.0, PAR)),
            tape.param(&Tensor::full(&[d, d], 1.0, PAR)),
        );
        let e1 = (
            tape.param(&Tensor::full(&[d, d], -1.0, PAR)),
            tape.param(&Tensor::full(&[d, d], -1.0, PAR)),
        );
        let vars = FfnVars::Moe {
            router: tape.param(&Tensor::zeros(&[d, 2], PAR)),
            experts: vec![e0, e1],
            shared: None,
            top_k: 1,
        };
        let out = ffn_forward(&mut tape, &vars, x).unwrap();
        // Expert 0 has positive weights and a positive input → positive output.
        assert!(tape.value(out).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn invalid_moe_configs_rejected() {
        let mut cfg = DraftConfig {
            ffn_variant: FfnVariant::MoESameFlops,
            experts: 1,
            ..DraftConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.experts = 2;
        cfg.router_top_k = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_target_and_draft() {
        let dir = std::env::temp_dir().join(format!("speclab-model-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (target, _) = tiny_target();
        let tp = dir.join("target.spfg");
        target.save(&tp).unwrap();
        let loaded = TargetModel::load(&tp).unwrap();
        assert_eq!(loaded.cfg, target.cfg);
        for ((n1, t1), (n2, t2)) in target.named_params().iter().zip(loaded.named_params())
        {
            assert_eq!(*n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1}");
        }
        let draft = tiny_draft(FfnVariant::MoESharedExpert, 2, 1);
        let dp = dir.join("draft.spfg");
        draft.save(&dp).unwrap();
        let loaded = DraftModel::load(&dp).unwrap();
        assert_eq!(loaded.cfg, draft.cfg);
        assert_eq!(loaded.vocab_map, draft.vocab_map);
        for ((n1, t1), (n2, t2)) in draft.named_params().iter().zip(loaded.named_params()) {
            assert_eq!(*n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
