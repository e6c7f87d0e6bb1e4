//! Parameter layout and tape-level forward pieces of the network.

use std::sync::Arc;

use rand::Rng;

use super::config::{ModelConfig, NECK_STRIDES};
use super::spatial;
use crate::click::grid_encoding;
use crate::nn::{Attention, Ctx, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{ParamId, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct VitBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone, Copy)]
enum Resample {
    Same,
    /// Strided projection: `r × r` patches are flattened then projected.
    Down(usize),
    /// Transposed projection: each token expands into an `r × r` patch.
    Up(usize),
}

#[derive(Debug, Clone)]
struct NeckBranch {
    proj: Linear,
    resample: Resample,
    norm: LayerNorm,
}

/// Post-norm transformer layer used by the pixel decoder.
#[derive(Debug, Clone)]
struct RefineLayer {
    attn: Attention,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    cross: Attention,
    cross_ln: LayerNorm,
    self_attn: Attention,
    self_ln: LayerNorm,
    ffn: Mlp,
    ffn_ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct Net {
    patch_image: Linear,
    patch_map: Linear,
    blocks: Vec<VitBlock>,
    enc_norm: LayerNorm,
    neck: Vec<NeckBranch>,
    pd_level_embed: [ParamId; 3],
    pd_layers: Vec<RefineLayer>,
    lateral: Linear,
    fuse: Linear,
    fuse_norm: LayerNorm,
    mask_proj: Linear,
    pub query_feat: ParamId,
    pub query_pos: ParamId,
    level_embed: [ParamId; 3],
    pub click_positive: ParamId,
    pub click_negative: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub mask_embed: Mlp,
    pub conf_head: Mlp,
    pub iou_head: Mlp,
}

/// Padded working geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub hp: usize,
    pub wp: usize,
}

impl Geometry {
    pub fn at(&self, stride: usize) -> (usize, usize) {
        (self.hp / stride, self.wp / stride)
    }
}

/// A channel-last feature grid on the tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GridVar {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

pub(crate) struct EncodedVars {
    /// Strides 32, 16, 8.
    pub pyramid: [GridVar; 3],
    pub mask_feature: GridVar,
}

impl Net {
    pub fn build<T: Scalar, R: Rng>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let mut init = Init { rng };
        let e = &cfg.encoder;
        let d = cfg.hidden_dim;
        let p = e.patch_size;
        let patch_in = 3 * p * p;
        let patch_image = Linear::new(store, &mut init, "encoder.patch_image", patch_in, e.width);
        let patch_map = Linear::new(store, &mut init, "encoder.patch_map", patch_in, e.width);
        let blocks = (0..e.depth)
            .map(|i| {
                let n = format!("encoder.block{i}");
                VitBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), e.width),
                    attn: Attention::new(store, &mut init, &format!("{n}.attn"), e.width, e.heads),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), e.width),
                    mlp: Mlp::new(
                        store,
                        &mut init,
                        &format!("{n}.mlp"),
                        &[e.width, e.width * e.mlp_ratio, e.width],
                    ),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new(store, "encoder.norm", e.width);

        let neck = NECK_STRIDES
            .iter()
            .map(|&s| {
                let n = format!("neck.s{s}");
                let (resample, fan_in, fan_out) = if s == p {
                    (Resample::Same, e.width, d)
                } else if s > p {
                    let r = s / p;
                    (Resample::Down(r), r * r * e.width, d)
                } else {
                    let r = p / s;
                    (Resample::Up(r), e.width, r * r * d)
                };
                NeckBranch {
                    proj: Linear::new(store, &mut init, &format!("{n}.proj"), fan_in, fan_out),
                    resample,
                    norm: LayerNorm::new(store, &format!("{n}.norm"), d),
                }
            })
            .collect();

        let pd_level_embed = [0, 1, 2].map(|l| {
            store.add(format!("pixel.level_embed{l}"), init.normal(vec![d], 0.1))
        });
        let pd_layers = (0..cfg.pixel_decoder_layers)
            .map(|i| {
                let n = format!("pixel.layer{i}");
                RefineLayer {
                    attn: Attention::new(store, &mut init, &format!("{n}.attn"), d, cfg.num_heads),
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    ffn: Mlp::new(store, &mut init, &format!("{n}.ffn"), &[d, cfg.ffn_dim, d]),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                }
            })
            .collect();
        let lateral = Linear::new(store, &mut init, "pixel.lateral", d, d);
        let fuse = Linear::new(store, &mut init, "pixel.fuse", 9 * d, d);
        let fuse_norm = LayerNorm::new(store, "pixel.fuse_norm", d);
        let mask_proj = Linear::new(store, &mut init, "pixel.mask_proj", d, d);

        let n = cfg.num_queries;
        let query_feat = store.add("decoder.query_feat", init.normal(vec![n, d], 1.0));
        let query_pos = store.add("decoder.query_pos", init.normal(vec![n, d], 1.0));
        let level_embed = [0, 1, 2].map(|l| {
            store.add(format!("decoder.level_embed{l}"), init.normal(vec![d], 0.1))
        });
        let click_positive = store.add("decoder.click_positive", init.normal(vec![d], 1.0));
        let click_negative = store.add("decoder.click_negative", init.normal(vec![d], 1.0));
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                let h = cfg.num_heads;
                DecoderLayer {
                    cross: Attention::new(store, &mut init, &format!("{n}.cross"), d, h),
                    cross_ln: LayerNorm::new(store, &format!("{n}.cross_ln"), d),
                    self_attn: Attention::new(store, &mut init, &format!("{n}.self"), d, h),
                    self_ln: LayerNorm::new(store, &format!("{n}.self_ln"), d),
                    ffn: Mlp::new(store, &mut init, &format!("{n}.ffn"), &[d, cfg.ffn_dim, d]),
                    ffn_ln: LayerNorm::new(store, &format!("{n}.ffn_ln"), d),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, "decoder.norm", d);
        let mask_embed = Mlp::new(store, &mut init, "heads.mask", &[d, d, d, d]);
        let conf_head = Mlp::new(store, &mut init, "heads.conf", &[d, d, d, 1]);
        let iou_head = Mlp::new(store, &mut init, "heads.iou", &[d, d, d, 1]);

        Self {
            patch_image,
            patch_map,
            blocks,
            enc_norm,
            neck,
            pd_level_embed,
            pd_layers,
            lateral,
            fuse,
            fuse_norm,
            mask_proj,
            query_feat,
            query_pos,
            level_embed,
            click_positive,
            click_negative,
            layers,
            norm,
            mask_embed,
            conf_head,
            iou_head,
        }
    }

    /// Encoder, neck and pixel decoder. `image` and `map` are padded
    /// channel-last grids `[hp*wp, 3]`.
    pub fn encode<T: Scalar>(
        &self,
        cfg: &ModelConfig,
        ctx: &mut Ctx<'_, T>,
        image: Vec<T>,
        map: Vec<T>,
        geo: Geometry,
    ) -> EncodedVars {
        let p = cfg.encoder.patch_size;
        let ew = cfg.encoder.width;
        let d = cfg.hidden_dim;
        let (hb, wb) = geo.at(p);
        let idx = spatial::patchify_index(geo.hp, geo.wp, 3, p);
        let patches = |src: &[T]| {
            Tensor::new(
                vec![hb * wb, 3 * p * p],
                idx.iter().map(|&i| src[i as usize]).collect(),
            )
        };
        let img = ctx.constant(patches(&image));
        let map = ctx.constant(patches(&map));
        let a = self.patch_image.forward(ctx, img);
        let b = self.patch_map.forward(ctx, map);
        let fused = ctx.tape.add(a, b);
        let pe = ctx.constant(grid_encoding(hb, wb, ew));
        let mut x = ctx.tape.add(fused, pe);

        for blk in &self.blocks {
            let h = blk.ln1.forward(ctx, x);
            let (a, _) = blk.attn.forward(ctx, h, h, h, None);
            x = ctx.tape.add(x, a);
            let h = blk.ln2.forward(ctx, x);
            let m = blk.mlp.forward(ctx, h);
            x = ctx.tape.add(x, m);
        }
        let fb = self.enc_norm.forward(ctx, x);

        let mut levels = Vec::with_capacity(4);
        for (br, &s) in self.neck.iter().zip(&NECK_STRIDES) {
            let (h, w) = geo.at(s);
            let y = match br.resample {
                Resample::Same => br.proj.forward(ctx, fb),
                Resample::Down(r) => {
                    let g = ctx.tape.gather(
                        fb,
                        spatial::patchify_index(hb, wb, ew, r),
                        vec![h * w, r * r * ew],
                    );
                    br.proj.forward(ctx, g)
                }
                Resample::Up(r) => {
                    let y = br.proj.forward(ctx, fb);
                    ctx.tape
                        .gather(y, spatial::unpatchify_index(hb, wb, d, r), vec![h * w, d])
                }
            };
            let var = br.norm.forward(ctx, y);
            levels.push(GridVar { var, h, w });
        }
        let (n4, n8, n16, n32) = (levels[0], levels[1], levels[2], levels[3]);

        // Joint refinement over the three coarse levels.
        let coarse = [n32, n16, n8];
        let mut parts = Vec::with_capacity(3);
        let mut pos_parts = Vec::with_capacity(3);
        for (l, g) in coarse.iter().enumerate() {
            let lvl = ctx.p(self.pd_level_embed[l]);
            parts.push(ctx.tape.add_row(g.var, lvl));
            pos_parts.push(ctx.constant(grid_encoding(g.h, g.w, d)));
        }
        let mut x = ctx.tape.concat_rows(&parts);
        let pos = ctx.tape.concat_rows(&pos_parts);
        for layer in &self.pd_layers {
            let qk = ctx.tape.add(x, pos);
            let (a, _) = layer.attn.forward(ctx, qk, qk, x, None);
            let r = ctx.tape.add(x, a);
            x = layer.ln1.forward(ctx, r);
            let f = layer.ffn.forward(ctx, x);
            let r = ctx.tape.add(x, f);
            x = layer.ln2.forward(ctx, r);
        }
        let mut start = 0;
        let pyramid = coarse.map(|g| {
            let n = g.h * g.w;
            let var = ctx
                .tape
                .gather(x, spatial::rows_index(start, n, d), vec![n, d]);
            start += n;
            GridVar { var, ..g }
        });

        // Top-down step to stride 4 for the per-pixel embedding.
        let r8 = pyramid[2];
        let lat = self.lateral.forward(ctx, n4.var);
        let up = ctx.tape.row_mix(
            r8.var,
            Arc::new(spatial::bilinear(r8.h, r8.w, n4.h, n4.w)),
        );
        let y = ctx.tape.add(lat, up);
        let cols = ctx.tape.gather(
            y,
            spatial::im2col3x3_index(n4.h, n4.w, d),
            vec![n4.h * n4.w, 9 * d],
        );
        let y = self.fuse.forward(ctx, cols);
        let y = self.fuse_norm.forward(ctx, y);
        let y = ctx.tape.gelu(y);
        let mask = self.mask_proj.forward(ctx, y);

        EncodedVars {
            pyramid,
            mask_feature: GridVar { var: mask, ..n4 },
        }
    }

    /// Keys and values of the cross-attention for one pyramid level:
    /// `[F + pos + level ; E_C]` and `[F ; E_C]`.
    pub fn level_kv<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        level: usize,
        feat: GridVar,
        clicks: Var,
        d: usize,
    ) -> (Var, Var) {
        let pos = ctx.constant(grid_encoding(feat.h, feat.w, d));
        let k = ctx.tape.add(feat.var, pos);
        let lvl = ctx.p(self.level_embed[level]);
        let k = ctx.tape.add_row(k, lvl);
        let key = ctx.tape.concat_rows(&[k, clicks]);
        let value = ctx.tape.concat_rows(&[feat.var, clicks]);
        (key, value)
    }

    /// Click tokens: constant positional encodings plus the learned type rows.
    pub fn click_tokens<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        pe: Tensor<T>,
        positive: &[bool],
    ) -> Var {
        let d = pe.shape()[1];
        let ep = ctx.p(self.click_positive);
        let en = ctx.p(self.click_negative);
        let types = ctx.tape.concat_rows(&[ep, en]);
        let types = ctx.tape.reshape(types, vec![2, d]);
        let idx: Vec<u32> = positive
            .iter()
            .flat_map(|&pos| {
                let base = if pos { 0 } else { d };
                (0..d).map(move |j| (base + j) as u32)
            })
            .collect();
        let rows = ctx
            .tape
            .gather(types, idx.into(), vec![positive.len(), d]);
        let pe = ctx.constant(pe);
        ctx.tape.add(rows, pe)
    }

    /// One masked-attention decoder layer. Returns the new queries and the
    /// raw cross-attention node.
    pub fn decoder_layer<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        index: usize,
        x: Var,
        key: Var,
        value: Var,
        allowed: &[bool],
    ) -> (Var, Var) {
        let layer = &self.layers[index];
        let qpos = ctx.p(self.query_pos);
        let q = ctx.tape.add(x, qpos);
        let (a, raw) = layer.cross.forward(ctx, q, key, value, Some(allowed));
        let r = ctx.tape.add(x, a);
        let x = layer.cross_ln.forward(ctx, r);
        let qk = ctx.tape.add(x, qpos);
        let (s, _) = layer.self_attn.forward(ctx, qk, qk, x, None);
        let r = ctx.tape.add(x, s);
        let x = layer.self_ln.forward(ctx, r);
        let f = layer.ffn.forward(ctx, x);
        let r = ctx.tape.add(x, f);
        (layer.ffn_ln.forward(ctx, r), raw)
    }

    /// Per-query mask embeddings dotted with the per-pixel embedding:
    /// `[h*w, N]` low-resolution logits.
    pub fn mask_logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, mask_feature: Var) -> Var {
        let emb = self.mask_embedding(ctx, x);
        ctx.tape.matmul_t(mask_feature, emb, false, true)
    }

    pub fn mask_embedding<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let xn = self.norm.forward(ctx, x);
        self.mask_embed.forward(ctx, xn)
    }

    /// Confidence and IoU scores, each `[N, 1]` after a sigmoid.
    pub fn scores<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> (Var, Var) {
        let xn = self.norm.forward(ctx, x);
        let c = self.conf_head.forward(ctx, xn);
        let i = self.iou_head.forward(ctx, xn);
        (ctx.tape.sigmoid(c), ctx.tape.sigmoid(i))
    }
}

/// Attention-mask table `[N, h*w + C]` from low-resolution logits `[hm*wm, N]`:
/// spatial columns are allowed where the resized probability is at least 0.5,
/// click columns always.
pub(crate) fn attention_mask<T: Scalar>(
    logits: &[T],
    from: (usize, usize),
    to: (usize, usize),
    n: usize,
    clicks: usize,
) -> Vec<bool> {
    let resized = if from == to {
        logits.to_vec()
    } else {
        spatial::bilinear::<T>(from.0, from.1, to.0, to.1).apply(logits, n)
    };
    let hw = to.0 * to.1;
    let cols = hw + clicks;
    let mut allowed = vec![true; n * cols];
    for q in 0..n {
        for j in 0..hw {
            // sigmoid(v) >= 0.5 exactly when v >= 0
            allowed[q * cols + j] = resized[j * n + q] >= T::zero();
        }
    }
    allowed
}
