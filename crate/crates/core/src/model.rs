//! Encoder-only transformer token classifier built from a [`Genotype`].
//!
//! Layout: linear token embedding, learned class token and positional
//! embedding over `T + 1` positions, `depth` pre-norm blocks
//! (`LN -> MSA -> residual`, `LN -> MLP -> residual`), a final LayerNorm and a
//! linear head read from the class token. Every attention head is
//! [`HEAD_DIM`] wide, so the fused q/k/v projection maps `d -> 3 * 64 * heads`.
//!
//! Parameters are grouped into a registry of `4 * depth + 2` scoreable layers
//! in execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::search_space::{layer_count, Genotype, TokenGeometry, HEAD_DIM};
use crate::tensor::{Gradients, Graph, NodeId, Reduction, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerKind {
    Embed,
    MsaQkv,
    MsaProj,
    MlpFc1,
    MlpFc2,
    Head,
}

impl LayerKind {
    pub fn is_msa(self) -> bool {
        matches!(self, LayerKind::MsaQkv | LayerKind::MsaProj)
    }

    pub fn is_mlp(self) -> bool {
        matches!(self, LayerKind::MlpFc1 | LayerKind::MlpFc2)
    }

    pub fn is_block(self) -> bool {
        self.is_msa() || self.is_mlp()
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct LayerEntry {
    /// 1-based position in execution order.
    pub index: usize,
    pub kind: LayerKind,
    /// 1-based block number for block sub-layers.
    pub block: Option<usize>,
    /// Indices into [`NetworkInstance::params`].
    pub params: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct BlockSlots {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Clone, Debug)]
struct Slots {
    embed_w: usize,
    embed_b: usize,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockSlots>,
    norm_g: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Debug)]
pub struct NetworkInstance {
    genotype: Genotype,
    geometry: TokenGeometry,
    params: Vec<Param>,
    registry: Vec<LayerEntry>,
    slots: Slots,
}

/// Node handles of one recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    pub input: NodeId,
    /// One leaf per parameter, same order as [`NetworkInstance::params`].
    pub params: Vec<NodeId>,
    /// Output of each registry entry, same order as the registry.
    pub activations: Vec<NodeId>,
    /// Pre-activation input of every GELU, one per block.
    pub gelu_inputs: Vec<NodeId>,
    /// Softmax attention maps `[B, heads, T+1, T+1]`, one per block.
    pub attention: Vec<NodeId>,
    /// Residual stream before the final LayerNorm.
    pub final_hidden: NodeId,
    pub logits: NodeId,
}

impl ForwardPass {
    pub fn cross_entropy(&mut self, labels: &[usize], reduction: Reduction) -> Result<NodeId> {
        self.graph.cross_entropy(self.logits, labels, reduction)
    }

    /// Sum of all logits.
    pub fn logit_sum(&mut self) -> Result<NodeId> {
        self.graph.sum_all(self.logits)
    }

    /// Parameter gradients in parameter order.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&p| {
                grads
                    .take(p)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(p).shape()))
            })
            .collect()
    }
}

struct TruncNormal {
    rng: ChaCha8Rng,
}

impl TruncNormal {
    fn sample(&mut self, std: f64) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.sample(INIT_STD))
    }
}

/// Materializes `g` for the given token geometry. Weights, class token and
/// positional embedding are truncated-normal (std 0.02, cut at two standard
/// deviations); biases are zero and norm gains one.
pub fn build(g: &Genotype, geom: &TokenGeometry, init_seed: u64) -> Result<NetworkInstance> {
    g.validate()?;
    if geom.tokens == 0 || geom.token_width == 0 || geom.num_classes < 2 {
        return Err(Error::Config(format!("invalid token geometry {geom:?}")));
    }
    let d = g.embed_dim;
    let mut init = TruncNormal {
        rng: ChaCha8Rng::seed_from_u64(init_seed),
    };
    let mut params: Vec<Param> = Vec::new();
    let mut add = |name: String, value: Tensor| {
        params.push(Param { name, value });
        params.len() - 1
    };

    let embed_w = add("embed.weight".into(), init.tensor(&[geom.token_width, d]));
    let embed_b = add("embed.bias".into(), Tensor::zeros(&[d]));
    let cls = add("embed.cls_token".into(), init.tensor(&[1, d]));
    let pos = add("embed.pos_embed".into(), init.tensor(&[geom.tokens + 1, d]));

    let mut blocks = Vec::with_capacity(g.depth);
    for (i, (&heads, &ratio)) in g.num_heads.iter().zip(&g.mlp_ratio).enumerate() {
        let inner = HEAD_DIM * heads;
        let hidden = ratio * d;
        let p = |s: &str| format!("blocks.{}.{s}", i + 1);
        blocks.push(BlockSlots {
            ln1_g: add(p("norm1.weight"), Tensor::ones(&[d])),
            ln1_b: add(p("norm1.bias"), Tensor::zeros(&[d])),
            qkv_w: add(p("attn.qkv.weight"), init.tensor(&[d, 3 * inner])),
            qkv_b: add(p("attn.qkv.bias"), Tensor::zeros(&[3 * inner])),
            proj_w: add(p("attn.proj.weight"), init.tensor(&[inner, d])),
            proj_b: add(p("attn.proj.bias"), Tensor::zeros(&[d])),
            ln2_g: add(p("norm2.weight"), Tensor::ones(&[d])),
            ln2_b: add(p("norm2.bias"), Tensor::zeros(&[d])),
            fc1_w: add(p("mlp.fc1.weight"), init.tensor(&[d, hidden])),
            fc1_b: add(p("mlp.fc1.bias"), Tensor::zeros(&[hidden])),
            fc2_w: add(p("mlp.fc2.weight"), init.tensor(&[hidden, d])),
            fc2_b: add(p("mlp.fc2.bias"), Tensor::zeros(&[d])),
        });
    }
    let norm_g = add("norm.weight".into(), Tensor::ones(&[d]));
    let norm_b = add("norm.bias".into(), Tensor::zeros(&[d]));
    let head_w = add("head.weight".into(), init.tensor(&[d, geom.num_classes]));
    let head_b = add("head.bias".into(), Tensor::zeros(&[geom.num_classes]));

    let mut registry = Vec::with_capacity(layer_count(g));
    let mut entry = |kind, block, params: Vec<usize>| {
        registry.push(LayerEntry {
            index: registry.len() + 1,
            kind,
            block,
            params,
        })
    };
    entry(LayerKind::Embed, None, vec![embed_w, embed_b, cls, pos]);
    for (i, b) in blocks.iter().enumerate() {
        let blk = Some(i + 1);
        entry(LayerKind::MsaQkv, blk, vec![b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b]);
        entry(LayerKind::MsaProj, blk, vec![b.proj_w, b.proj_b]);
        entry(LayerKind::MlpFc1, blk, vec![b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b]);
        entry(LayerKind::MlpFc2, blk, vec![b.fc2_w, b.fc2_b]);
    }
    entry(LayerKind::Head, None, vec![norm_g, norm_b, head_w, head_b]);

    Ok(NetworkInstance {
        genotype: g.clone(),
        geometry: *geom,
        params,
        registry,
        slots: Slots {
            embed_w,
            embed_b,
            cls,
            pos,
            blocks,
            norm_g,
            norm_b,
            head_w,
            head_b,
        },
    })
}

impl NetworkInstance {
    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn geometry(&self) -> &TokenGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn layer_registry(&self) -> &[LayerEntry] {
        &self.registry
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zeroes the output projections of every MSA and MLP.
    pub fn zero_block_outputs(&mut self, msa: bool, mlp: bool) {
        let blocks = self.slots.blocks.clone();
        for b in blocks {
            let mut targets = Vec::new();
            if msa {
                targets.extend([b.proj_w, b.proj_b]);
            }
            if mlp {
                targets.extend([b.fc2_w, b.fc2_b]);
            }
            for t in targets {
                self.params[t].value.data_mut().fill(0.0);
            }
        }
    }

    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardPass> {
        self.forward_with(None, batch.data(), false)
    }

    /// Forward pass on raw `[B, T, D_in]` data, optionally with substitute
    /// parameter values (same order and shapes as [`Self::params`]).
    pub fn forward_with(
        &self,
        params: Option<&[Tensor]>,
        data: &Tensor,
        input_requires_grad: bool,
    ) -> Result<ForwardPass> {
        let geom = &self.geometry;
        let ds = data.shape();
        if ds.len() != 3 || ds[1] != geom.tokens || ds[2] != geom.token_width {
            return Err(Error::dim(
                "forward",
                format!(
                    "batch {ds:?} does not match geometry [B, {}, {}]",
                    geom.tokens, geom.token_width
                ),
            ));
        }
        if let Some(ps) = params {
            let ok = ps.len() == self.params.len()
                && ps.iter().zip(&self.params).all(|(a, b)| a.shape() == b.value.shape());
            if !ok {
                return Err(Error::dim("forward", "parameter override does not match the network"));
            }
        }
        let b = ds[0];
        let tp = geom.tokens + 1;
        let d = self.genotype.embed_dim;

        let mut gr = Graph::new();
        let input = gr.leaf(data.clone(), input_requires_grad);
        let pid: Vec<NodeId> = match params {
            Some(ps) => ps.iter().map(|t| gr.param(t.clone())).collect(),
            None => self.params.iter().map(|p| gr.param(p.value.clone())).collect(),
        };
        let s = &self.slots;
        let mut activations = Vec::with_capacity(self.registry.len());
        let mut gelu_inputs = Vec::with_capacity(self.genotype.depth);
        let mut attention = Vec::with_capacity(self.genotype.depth);

        let linear = |gr: &mut Graph, x: NodeId, w: usize, bias: usize| -> Result<NodeId> {
            let y = gr.matmul(x, pid[w])?;
            gr.add(y, pid[bias])
        };

        let tok = linear(&mut gr, input, s.embed_w, s.embed_b)?;
        let cls = gr.expand_leading(pid[s.cls], &[b])?;
        let seq = gr.concat(&[cls, tok], 1)?;
        let mut h = gr.add(seq, pid[s.pos])?;
        activations.push(h);

        for (blk, &heads) in s.blocks.iter().zip(&self.genotype.num_heads) {
            let n1 = gr.layer_norm(h, pid[blk.ln1_g], pid[blk.ln1_b])?;
            let qkv = linear(&mut gr, n1, blk.qkv_w, blk.qkv_b)?;
            activations.push(qkv);
            let split = gr.reshape(qkv, &[b, tp, 3 * heads, HEAD_DIM])?;
            let split = gr.permute(split, &[0, 2, 1, 3])?;
            let q = gr.narrow(split, 1, 0, heads)?;
            let k = gr.narrow(split, 1, heads, heads)?;
            let v = gr.narrow(split, 1, 2 * heads, heads)?;
            let kt = gr.transpose_last_two(k)?;
            let scores = gr.matmul(q, kt)?;
            let scores = gr.scale(scores, 1.0 / (HEAD_DIM as f64).sqrt())?;
            let attn = gr.softmax(scores)?;
            attention.push(attn);
            let ctx = gr.matmul(attn, v)?;
            let ctx = gr.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = gr.reshape(ctx, &[b, tp, heads * HEAD_DIM])?;
            let proj = linear(&mut gr, ctx, blk.proj_w, blk.proj_b)?;
            activations.push(proj);
            h = gr.add(h, proj)?;

            let n2 = gr.layer_norm(h, pid[blk.ln2_g], pid[blk.ln2_b])?;
            let pre = linear(&mut gr, n2, blk.fc1_w, blk.fc1_b)?;
            gelu_inputs.push(pre);
            let act = gr.gelu(pre)?;
            activations.push(act);
            let out = linear(&mut gr, act, blk.fc2_w, blk.fc2_b)?;
            activations.push(out);
            h = gr.add(h, out)?;
        }

        let final_hidden = h;
        let normed = gr.layer_norm(h, pid[s.norm_g], pid[s.norm_b])?;
        let cls_state = gr.narrow(normed, 1, 0, 1)?;
        let cls_state = gr.reshape(cls_state, &[b, d])?;
        let logits = linear(&mut gr, cls_state, s.head_w, s.head_b)?;
        activations.push(logits);

        Ok(ForwardPass {
            graph: gr,
            input,
            params: pid,
            activations,
            gelu_inputs,
            attention,
            final_hidden,
            logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_batch, BatchKind};
    use crate::search_space::exact_param_count;

    fn geom() -> TokenGeometry {
        TokenGeometry::new(4, 6, 5).unwrap()
    }

    #[test]
    fn registry_layout() {
        let g = Genotype::new(5, 32, vec![3, 4, 5, 6, 3], vec![1, 2, 3, 4, 5]).unwrap();
        let net = build(&g, &geom(), 1).unwrap();
        let reg = net.layer_registry();
        assert_eq!(reg.len(), 22);
        assert_eq!(reg[0].kind, LayerKind::Embed);
        assert_eq!(reg[21].kind, LayerKind::Head);
        assert_eq!(reg.iter().filter(|e| e.kind.is_msa()).count(), 10);
        assert_eq!(reg.iter().filter(|e| e.kind.is_mlp()).count(), 10);
        assert_eq!(reg[5].block, Some(2));
        assert_eq!(reg[5].index, 6);
        for (i, e) in reg.iter().enumerate() {
            assert_eq!(e.index, i + 1);
        }
        let mut owned: Vec<usize> = reg.iter().flat_map(|e| e.params.clone()).collect();
        owned.sort_unstable();
        assert_eq!(owned, (0..net.params().len()).collect::<Vec<_>>());
    }

    #[test]
    fn fused_qkv_shape() {
        let g = Genotype::uniform(4, 32, 3, 1).unwrap();
        let net = build(&g, &geom(), 1).unwrap();
        let qkv = net.params().iter().find(|p| p.name == "blocks.1.attn.qkv.weight").unwrap();
        assert_eq!(qkv.value.shape(), &[32, 3 * 64 * 3]);
    }

    #[test]
    fn build_is_deterministic() {
        let g = Genotype::uniform(4, 48, 4, 2).unwrap();
        let a = build(&g, &geom(), 9).unwrap();
        let b = build(&g, &geom(), 9).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.value.data(), y.value.data());
        }
        let c = build(&g, &geom(), 10).unwrap();
        assert_ne!(a.params()[0].value.data(), c.params()[0].value.data());
    }

    #[test]
    fn param_count_matches_registry() {
        let g = Genotype::new(4, 64, vec![3, 6, 4, 5], vec![6, 1, 2, 3]).unwrap();
        let net = build(&g, &geom(), 3).unwrap();
        let from_registry: usize = net
            .layer_registry()
            .iter()
            .flat_map(|e| e.params.iter().map(|&p| net.params()[p].value.len()))
            .sum();
        assert_eq!(from_registry as u64, exact_param_count(&g, &geom()));
    }

    #[test]
    fn logits_shape_and_zero_head() {
        let g = Genotype::uniform(4, 32, 3, 2).unwrap();
        let mut net = build(&g, &geom(), 3).unwrap();
        let batch = synth_batch(&geom(), BatchKind::Random, 3, 5).unwrap();
        let fp = net.forward(&batch).unwrap();
        assert_eq!(fp.graph.value(fp.logits).shape(), &[3, 5]);
        let head = net.slots.head_w;
        net.params_mut()[head].value.data_mut().fill(0.0);
        let fp = net.forward(&batch).unwrap();
        assert!(fp.graph.value(fp.logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn geometry_mismatch_is_dimension_error() {
        let g = Genotype::uniform(4, 32, 3, 2).unwrap();
        let net = build(&g, &geom(), 3).unwrap();
        let other = TokenGeometry::new(5, 6, 5).unwrap();
        let batch = synth_batch(&other, BatchKind::Random, 2, 1).unwrap();
        assert!(matches!(net.forward(&batch), Err(Error::Dimension { .. })));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let g = Genotype::new(4, 48, vec![3, 4, 5, 6], vec![1, 1, 1, 1]).unwrap();
        let net = build(&g, &geom(), 4).unwrap();
        let batch = synth_batch(&geom(), BatchKind::Random, 3, 2).unwrap();
        let fp = net.forward(&batch).unwrap();
        for &a in &fp.attention {
            let v = fp.graph.value(a);
            for row in v.data().chunks(geom().tokens + 1) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_projections_make_blocks_identity() {
        let g = Genotype::new(4, 32, vec![3, 4, 5, 6], vec![2, 1, 3, 1]).unwrap();
        let mut net = build(&g, &geom(), 5).unwrap();
        net.zero_block_outputs(true, true);
        let batch = synth_batch(&geom(), BatchKind::Random, 2, 8).unwrap();
        let fp = net.forward(&batch).unwrap();
        assert_eq!(
            fp.graph.value(fp.final_hidden).data(),
            fp.graph.value(fp.activations[0]).data()
        );
    }

    #[test]
    fn batch_rows_are_equivariant() {
        let g = Genotype::uniform(4, 32, 3, 2).unwrap();
        let net = build(&g, &geom(), 6).unwrap();
        let batch = synth_batch(&geom(), BatchKind::Random, 3, 9).unwrap();
        let fp = net.forward(&batch).unwrap();
        let per = geom().tokens * geom().token_width;
        let src = batch.data().data();
        let mut swapped = Vec::new();
        for r in [2, 0, 1] {
            swapped.extend_from_slice(&src[r * per..(r + 1) * per]);
        }
        let swapped = Tensor::new(batch.data().shape().to_vec(), swapped).unwrap();
        let fp2 = net.forward_with(None, &swapped, false).unwrap();
        let (l1, l2) = (fp.graph.value(fp.logits), fp2.graph.value(fp2.logits));
        let c = geom().num_classes;
        for (new_row, old_row) in [2usize, 0, 1].iter().enumerate() {
            assert_eq!(
                &l2.data()[new_row * c..(new_row + 1) * c],
                &l1.data()[old_row * c..(old_row + 1) * c]
            );
        }
    }

    #[test]
    fn every_layer_receives_gradient() {
        let g = Genotype::new(4, 32, vec![3, 4, 5, 6], vec![2, 1, 3, 1]).unwrap();
        let net = build(&g, &geom(), 7).unwrap();
        let batch = synth_batch(&geom(), BatchKind::Random, 4, 10).unwrap();
        let mut fp = net.forward(&batch).unwrap();
        let loss = fp.cross_entropy(batch.labels(), Reduction::Mean).unwrap();
        let mut grads = fp.graph.backward(loss, &[]).unwrap();
        let pg = fp.param_grads(&mut grads);
        for e in net.layer_registry() {
            let nonzero = e.params.iter().any(|&p| pg[p].data().iter().any(|&x| x != 0.0));
            assert!(nonzero, "layer {} ({:?}) has no gradient", e.index, e.kind);
        }
    }
}
