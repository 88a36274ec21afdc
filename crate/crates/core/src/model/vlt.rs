//! The two-stream vision-language transformer.
//!
//! Language tokens pass through `lang_layers` self-attention layers, visual
//! tokens through `vis_layers`, then both streams meet in `cross_layers`
//! cross-modal layers. Each cross-modal layer runs language-from-vision and
//! vision-from-language attention on the incoming streams, follows each with
//! a self-attention of its own modality, then a feed-forward per modality.
//! Every block is post-norm (attention, add & norm, feed-forward, add & norm).
//! The answer is read from the final CLS language embedding.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{BlockType, EncoderKind, HeadAddress, ModelConfig, PruneMask};
use super::layers::{feed_forward, multi_head_layer, BlockVars, FfnVars, HeadVars};
use super::params::{Init, ParamId, ParamStore};
use crate::autodiff::{Segment, Tape, Var};
use crate::error::{LensError, Result};
use crate::rng::LensRng;
use crate::tensor::Tensor;

/// Visual tokens padded to `max_objects` rows of `width` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualTokens {
    pub width: usize,
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
}

impl VisualTokens {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One encoded sample as the model consumes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub id: u64,
    pub encoder: EncoderKind,
    /// Token ids padded to the maximum question length; position 0 is CLS.
    pub question: Vec<u32>,
    pub question_mask: Vec<bool>,
    pub visual: VisualTokens,
}

/// Attention map of one head for one sample (`rows` queries x `cols` keys).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sample_id: u64,
    pub head: HeadAddress,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
}

impl AttentionRecord {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.weights[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.weights.chunks(self.cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    /// One record per head in [`ModelConfig::all_heads`] order (empty unless captured).
    pub records: Vec<AttentionRecord>,
}

impl ForwardOutput {
    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Which parameters are re-initialized by [`VlTransformer::init_transfer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferScope {
    /// Visual input projection and the vision-only layers.
    ProjectionAndVisionLayers,
    /// Visual input projection only.
    ProjectionOnly,
}

/// Named subsets of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    All,
    /// Visual input projection and the vision-only layers.
    VisualBlock,
    VisualProjection,
    LanguageLayers,
}

impl ParamGroup {
    pub fn contains(self, name: &str) -> bool {
        match self {
            Self::All => true,
            Self::VisualBlock => name.starts_with("vis_embed.") || name.starts_with("vis."),
            Self::VisualProjection => name.starts_with("vis_embed."),
            Self::LanguageLayers => name.starts_with("lang."),
        }
    }
}

#[derive(Clone, Debug)]
struct HeadIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    heads: Vec<HeadIds>,
    wo: ParamId,
    bo: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

#[derive(Clone, Debug)]
struct SingleLayer {
    attn: BlockIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct CrossLayer {
    vl: BlockIds,
    lv: BlockIds,
    ll: BlockIds,
    vv: BlockIds,
    lang_ffn: FfnIds,
    vis_ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    tokens: ParamId,
    positions: ParamId,
    lang_ln: (ParamId, ParamId),
    vis_proj: (ParamId, ParamId),
    vis_ln: (ParamId, ParamId),
    lang: Vec<SingleLayer>,
    vis: Vec<SingleLayer>,
    cross: Vec<CrossLayer>,
    answer_hidden: (ParamId, ParamId),
    answer_ln: (ParamId, ParamId),
    answer_out: (ParamId, ParamId),
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut LensRng,
}

impl Builder<'_> {
    fn p(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        self.store.add(name, shape, init, self.rng)
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        (
            self.p(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal),
            self.p(format!("{prefix}.bias"), &[fan_out], Init::Zeros),
        )
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (ParamId, ParamId) {
        (
            self.p(format!("{prefix}.gain"), &[d], Init::Ones),
            self.p(format!("{prefix}.bias"), &[d], Init::Zeros),
        )
    }

    fn block(&mut self, prefix: &str, c: &ModelConfig) -> BlockIds {
        let (d, dh) = (c.hidden, c.head_dim());
        let heads = (0..c.heads)
            .map(|h| {
                let hp = format!("{prefix}.head.{h}");
                HeadIds {
                    wq: self.p(format!("{hp}.wq"), &[d, dh], Init::Normal),
                    bq: self.p(format!("{hp}.bq"), &[dh], Init::Zeros),
                    wk: self.p(format!("{hp}.wk"), &[d, dh], Init::Normal),
                    bk: self.p(format!("{hp}.bk"), &[dh], Init::Zeros),
                    wv: self.p(format!("{hp}.wv"), &[d, dh], Init::Normal),
                    bv: self.p(format!("{hp}.bv"), &[dh], Init::Zeros),
                }
            })
            .collect();
        let (wo, bo) = self.linear(&format!("{prefix}.out"), d, d);
        let (ln_gain, ln_bias) = self.norm(&format!("{prefix}.ln"), d);
        BlockIds { heads, wo, bo, ln_gain, ln_bias }
    }

    fn ffn(&mut self, prefix: &str, c: &ModelConfig) -> FfnIds {
        let inner = c.hidden * c.ffn_mult;
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), c.hidden, inner);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), inner, c.hidden);
        let (ln_gain, ln_bias) = self.norm(&format!("{prefix}.ln"), c.hidden);
        FfnIds { w1, b1, w2, b2, ln_gain, ln_bias }
    }
}

fn build(config: &ModelConfig, rng: &mut LensRng) -> (ParamStore, Layout) {
    let d = config.hidden;
    let mut b = Builder { store: ParamStore::default(), rng };
    let tokens = b.p("lang_embed.tokens".into(), &[config.question_vocab, d], Init::Normal);
    let positions = b.p("lang_embed.positions".into(), &[config.max_question_len, d], Init::Normal);
    let lang_ln = b.norm("lang_embed.ln", d);
    let vis_proj = b.linear("vis_embed.proj", config.visual_width, d);
    let vis_ln = b.norm("vis_embed.ln", d);
    let lang = (0..config.lang_layers)
        .map(|i| SingleLayer {
            attn: b.block(&format!("lang.{i}.attn"), config),
            ffn: b.ffn(&format!("lang.{i}.ffn"), config),
        })
        .collect();
    let vis = (0..config.vis_layers)
        .map(|i| SingleLayer {
            attn: b.block(&format!("vis.{i}.attn"), config),
            ffn: b.ffn(&format!("vis.{i}.ffn"), config),
        })
        .collect();
    let cross = (0..config.cross_layers)
        .map(|i| CrossLayer {
            vl: b.block(&format!("cross.{i}.vl"), config),
            lv: b.block(&format!("cross.{i}.lv"), config),
            ll: b.block(&format!("cross.{i}.ll"), config),
            vv: b.block(&format!("cross.{i}.vv"), config),
            lang_ffn: b.ffn(&format!("cross.{i}.lang_ffn"), config),
            vis_ffn: b.ffn(&format!("cross.{i}.vis_ffn"), config),
        })
        .collect();
    let answer_hidden = b.linear("answer.fc1", d, 2 * d);
    let answer_ln = b.norm("answer.ln", 2 * d);
    let answer_out = b.linear("answer.fc2", 2 * d, config.answer_vocab);
    let layout = Layout {
        tokens,
        positions,
        lang_ln,
        vis_proj,
        vis_ln,
        lang,
        vis,
        cross,
        answer_hidden,
        answer_ln,
        answer_out,
    };
    (b.store, layout)
}

/// Inputs of a batch flattened into row-stacked sequences.
struct Packed {
    token_ids: Vec<usize>,
    positions: Vec<usize>,
    lang: Vec<(usize, usize)>,
    visual: Vec<f32>,
    vis: Vec<(usize, usize)>,
}

impl Packed {
    fn segments(q: &[(usize, usize)], k: &[(usize, usize)]) -> Vec<Segment> {
        q.iter()
            .zip(k)
            .map(|(&(qs, ql), &(ks, kl))| Segment { q_start: qs, q_len: ql, k_start: ks, k_len: kl })
            .collect()
    }
}

/// The model: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct VlTransformer {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for VlTransformer {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl VlTransformer {
    /// Fresh model: truncated-normal (std 0.02) weights and embeddings, zero
    /// biases, unit norm gains.
    pub fn new(config: ModelConfig, rng: &mut LensRng) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, rng);
        Ok(Self { config, params, layout })
    }

    /// Model with the given parameter values (manifest order and shapes must
    /// match a model built from `config`).
    pub fn from_params(config: ModelConfig, names: &[String], tensors: Vec<Tensor>) -> Result<Self> {
        let mut rng = crate::rng::rng_for(0, "from-params", 0);
        let mut model = Self::new(config, &mut rng)?;
        if names != model.params.names() {
            return Err(LensError::Contract("parameter manifest does not match the configuration".into()));
        }
        for (slot, t) in model.params.tensors_mut().iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(LensError::Shape(format!(
                    "parameter shape {:?} where {:?} expected",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Flags per parameter tensor, true where the name is in `group`.
    pub fn group_mask(&self, group: ParamGroup) -> Vec<bool> {
        self.params.names().iter().map(|n| group.contains(n)).collect()
    }

    /// New model for `target` initialized from `self` (the oracle): every
    /// parameter is copied except the visual input projection and, for
    /// [`TransferScope::ProjectionAndVisionLayers`], the vision-only layers,
    /// which are freshly initialized from `rng`.
    pub fn init_transfer(&self, target: ModelConfig, scope: TransferScope, rng: &mut LensRng) -> Result<Self> {
        let bad = self.config.transfer_mismatches(&target);
        if !bad.is_empty() {
            return Err(LensError::Transfer(bad.join(", ")));
        }
        let mut fresh = Self::new(target, rng)?;
        let reinit = match scope {
            TransferScope::ProjectionAndVisionLayers => ParamGroup::VisualBlock,
            TransferScope::ProjectionOnly => ParamGroup::VisualProjection,
        };
        for (i, name) in self.params.names().iter().enumerate() {
            if reinit.contains(name) {
                continue;
            }
            let src = &self.params.tensors()[i];
            fresh.params.set(name, src.data().to_vec())?;
        }
        Ok(fresh)
    }

    fn pack(&self, inputs: &[&ModelInput]) -> Result<Packed> {
        let c = &self.config;
        let mut p = Packed {
            token_ids: Vec::new(),
            positions: Vec::new(),
            lang: Vec::new(),
            visual: Vec::new(),
            vis: Vec::new(),
        };
        for input in inputs {
            if input.encoder != c.encoder {
                return Err(LensError::Contract(format!(
                    "sample {} is encoded as {:?} but the model expects {:?}",
                    input.id, input.encoder, c.encoder
                )));
            }
            if input.visual.width != c.visual_width {
                return Err(LensError::Shape(format!(
                    "visual width {} for a model expecting {}",
                    input.visual.width, c.visual_width
                )));
            }
            if input.question.len() != input.question_mask.len()
                || input.question.len() > c.max_question_len
                || !input.question_mask.first().copied().unwrap_or(false)
            {
                return Err(LensError::Contract(format!("sample {} has a malformed question", input.id)));
            }
            let start = p.token_ids.len();
            for (pos, (&tok, &m)) in input.question.iter().zip(&input.question_mask).enumerate() {
                if m {
                    if tok as usize >= c.question_vocab {
                        return Err(LensError::Contract(format!("token id {tok} outside the vocabulary")));
                    }
                    p.token_ids.push(tok as usize);
                    p.positions.push(pos);
                }
            }
            p.lang.push((start, p.token_ids.len() - start));
            let vstart = p.visual.len() / c.visual_width;
            for (i, &m) in input.visual.mask.iter().enumerate() {
                if m {
                    p.visual.extend_from_slice(input.visual.row(i));
                }
            }
            let mut vlen = p.visual.len() / c.visual_width - vstart;
            if vlen == 0 {
                // Nothing detected: a single all-zero token stands in.
                p.visual.extend(core::iter::repeat_n(0.0, c.visual_width));
                vlen = 1;
            }
            p.vis.push((vstart, vlen));
        }
        Ok(p)
    }

    fn head_vars(ids: &HeadIds, v: &[Var]) -> HeadVars {
        HeadVars {
            wq: v[ids.wq.0],
            bq: v[ids.bq.0],
            wk: v[ids.wk.0],
            bk: v[ids.bk.0],
            wv: v[ids.wv.0],
            bv: v[ids.bv.0],
        }
    }

    fn block_vars(ids: &BlockIds, v: &[Var]) -> BlockVars {
        BlockVars {
            heads: ids.heads.iter().map(|h| Self::head_vars(h, v)).collect(),
            wo: v[ids.wo.0],
            bo: v[ids.bo.0],
            ln_gain: v[ids.ln_gain.0],
            ln_bias: v[ids.ln_bias.0],
        }
    }

    fn ffn_vars(ids: &FfnIds, v: &[Var]) -> FfnVars {
        FfnVars {
            w1: v[ids.w1.0],
            b1: v[ids.b1.0],
            w2: v[ids.w2.0],
            b2: v[ids.b2.0],
            ln_gain: v[ids.ln_gain.0],
            ln_bias: v[ids.ln_bias.0],
        }
    }

    /// Records the whole forward pass; returns the logits node and the
    /// attention nodes in canonical block order.
    fn run(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        packed: &Packed,
        prune: &PruneMask,
    ) -> Result<(Var, Vec<(BlockType, usize, Var)>)> {
        let c = &self.config;
        let l = &self.layout;
        let scale = 1.0 / num_traits::Float::sqrt(c.hidden as f32);
        let h = c.heads;

        let tok = tape.gather(vars[l.tokens.0], &packed.token_ids)?;
        let pos = tape.gather(vars[l.positions.0], &packed.positions)?;
        let lang = tape.add(tok, pos)?;
        let mut lang = tape.layer_norm(lang, vars[l.lang_ln.0 .0], vars[l.lang_ln.1 .0])?;

        let rows = packed.visual.len() / c.visual_width;
        let raw = tape.constant(Tensor::matrix(rows, c.visual_width, packed.visual.clone())?);
        let vis = tape.matmul(raw, vars[l.vis_proj.0 .0])?;
        let vis = tape.add_row(vis, vars[l.vis_proj.1 .0])?;
        let mut vis = tape.layer_norm(vis, vars[l.vis_ln.0 .0], vars[l.vis_ln.1 .0])?;

        let lang_self = Packed::segments(&packed.lang, &packed.lang);
        let vis_self = Packed::segments(&packed.vis, &packed.vis);
        let lang_from_vis = Packed::segments(&packed.lang, &packed.vis);
        let vis_from_lang = Packed::segments(&packed.vis, &packed.lang);

        let mut attn = Vec::with_capacity(c.all_heads().len() / h.max(1));
        for (i, layer) in l.lang.iter().enumerate() {
            let b = Self::block_vars(&layer.attn, vars);
            let flags = prune.flags(BlockType::Lang, i, h);
            let out = multi_head_layer(tape, lang, lang, &b, &lang_self, &flags, scale, true)?;
            lang = feed_forward(tape, out.hidden, &Self::ffn_vars(&layer.ffn, vars))?;
            attn.push((BlockType::Lang, i, out.attention));
        }
        for (i, layer) in l.vis.iter().enumerate() {
            let b = Self::block_vars(&layer.attn, vars);
            let flags = prune.flags(BlockType::Vis, i, h);
            let out = multi_head_layer(tape, vis, vis, &b, &vis_self, &flags, scale, true)?;
            vis = feed_forward(tape, out.hidden, &Self::ffn_vars(&layer.ffn, vars))?;
            attn.push((BlockType::Vis, i, out.attention));
        }
        for (i, layer) in l.cross.iter().enumerate() {
            let vl = Self::block_vars(&layer.vl, vars);
            let lv = Self::block_vars(&layer.lv, vars);
            let ll = Self::block_vars(&layer.ll, vars);
            let vv = Self::block_vars(&layer.vv, vars);
            let f = |b| prune.flags(b, i, h);
            let a_vl = multi_head_layer(tape, lang, vis, &vl, &lang_from_vis, &f(BlockType::Vl), scale, true)?;
            let a_lv = multi_head_layer(tape, vis, lang, &lv, &vis_from_lang, &f(BlockType::Lv), scale, true)?;
            let a_ll = multi_head_layer(tape, a_vl.hidden, a_vl.hidden, &ll, &lang_self, &f(BlockType::Ll), scale, true)?;
            let a_vv = multi_head_layer(tape, a_lv.hidden, a_lv.hidden, &vv, &vis_self, &f(BlockType::Vv), scale, true)?;
            lang = feed_forward(tape, a_ll.hidden, &Self::ffn_vars(&layer.lang_ffn, vars))?;
            vis = feed_forward(tape, a_vv.hidden, &Self::ffn_vars(&layer.vis_ffn, vars))?;
            attn.push((BlockType::Vl, i, a_vl.attention));
            attn.push((BlockType::Ll, i, a_ll.attention));
            attn.push((BlockType::Lv, i, a_lv.attention));
            attn.push((BlockType::Vv, i, a_vv.attention));
        }
        // vis feeds the answer only through the cross-modal layers.
        let _ = vis;

        let cls_rows: Vec<usize> = packed.lang.iter().map(|&(s, _)| s).collect();
        let cls = tape.gather(lang, &cls_rows)?;
        let hid = tape.matmul(cls, vars[l.answer_hidden.0 .0])?;
        let hid = tape.add_row(hid, vars[l.answer_hidden.1 .0])?;
        let hid = tape.gelu(hid);
        let hid = tape.layer_norm(hid, vars[l.answer_ln.0 .0], vars[l.answer_ln.1 .0])?;
        let logits = tape.matmul(hid, vars[l.answer_out.0 .0])?;
        let logits = tape.add_row(logits, vars[l.answer_out.1 .0])?;
        Ok((logits, attn))
    }

    fn leaves(&self, tape: &mut Tape<f32>, trainable: Option<&[bool]>) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), trainable.is_some_and(|m| m[i])))
            .collect()
    }

    /// Forward pass over a batch. Each sample's result is independent of the
    /// other members of the batch.
    pub fn forward_batch(&self, inputs: &[&ModelInput], prune: &PruneMask, capture: bool) -> Result<Vec<ForwardOutput>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        for hd in prune.iter() {
            self.config.check_head(*hd)?;
        }
        let packed = self.pack(inputs)?;
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, None);
        let (logits, attn) = self.run(&mut tape, &vars, &packed, prune)?;
        let lv = tape.value(logits);
        let mut outs: Vec<ForwardOutput> = inputs
            .iter()
            .enumerate()
            .map(|(s, _)| ForwardOutput { logits: lv.row(s).to_vec(), records: Vec::new() })
            .collect();
        if capture {
            for (s, (out, input)) in outs.iter_mut().zip(inputs).enumerate() {
                out.records.reserve(attn.len() * self.config.heads);
                for &(block, layer, node) in &attn {
                    for head in 0..self.config.heads {
                        let (rows, cols, w) = tape.attention_map(node, s, head).expect("attention node");
                        out.records.push(AttentionRecord {
                            sample_id: input.id,
                            head: HeadAddress { block, layer, head },
                            rows,
                            cols,
                            weights: w.to_vec(),
                        });
                    }
                }
            }
        }
        Ok(outs)
    }

    pub fn forward(&self, input: &ModelInput, prune: &PruneMask, capture: bool) -> Result<ForwardOutput> {
        Ok(self.forward_batch(&[input], prune, capture)?.remove(0))
    }

    /// Mean cross-entropy over the batch and its gradient for every
    /// parameter flagged in `trainable` (`None` entries elsewhere).
    pub fn loss_and_grads(
        &self,
        inputs: &[&ModelInput],
        answers: &[usize],
        trainable: &[bool],
    ) -> Result<(f32, Vec<Option<Tensor>>)> {
        if trainable.len() != self.params.len() {
            return Err(LensError::Shape("trainable mask length".into()));
        }
        let packed = self.pack(inputs)?;
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape, Some(trainable));
        let (logits, _) = self.run(&mut tape, &vars, &packed, &PruneMask::none())?;
        let loss = tape.cross_entropy(logits, answers)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(LensError::Numeric(format!("loss is {value}")));
        }
        let mut grads = tape.backward(loss)?;
        let out = vars.iter().map(|&v| grads.take(v)).collect();
        Ok((value, out))
    }
}
