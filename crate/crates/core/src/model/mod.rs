//! The click-conditioned segmentation network.
//!
//! Feature grids are stored channel-last: a `FeatureMap` of `h × w` cells and
//! `D` channels is a `[h*w, D]` tensor.

mod config;
mod net;
pub mod spatial;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{padded, EncoderConfig, ModelConfig, NECK_STRIDES, PAD_MULTIPLE};

use crate::click::{encode_clicks_disk, encode_clicks_embed, grid_encoding, Click, ClickEmbeddings, DiskMap};
use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{ParamId, Var};
use crate::tensor::Tensor;
use net::{attention_mask, EncodedVars, Geometry, GridVar, Net};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    /// `[height*width, D]`.
    pub data: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    /// Value of channel `c` at cell `(x, y)`.
    pub fn at(&self, x: usize, y: usize, c: usize) -> T {
        self.data.row(y * self.width + x)[c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle<T> {
    /// Strides 32, 16 and 8 of the padded input.
    pub pyramid: [FeatureMap<T>; 3],
    /// Per-pixel embedding at stride 4.
    pub mask_feature: FeatureMap<T>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryState<T> {
    /// `[N, D]`.
    pub features: Tensor<T>,
    pub layer_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerOutput<T> {
    pub state: QueryState<T>,
    /// Cross-attention probabilities `[heads, N, h*w + C]`; click columns last.
    pub attention: Vec<T>,
    /// The mask table that was applied, `[N, h*w + C]`.
    pub allowed: Vec<bool>,
    /// Attention-weighted values before the output projection, `[N, D]`.
    pub attended: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposals<T> {
    /// `[N, H, W]` pre-sigmoid logits.
    pub mask_logits: Tensor<T>,
    pub conf: Vec<T>,
    pub iou_pred: Vec<T>,
}

impl<T: Scalar> Proposals<T> {
    pub fn len(&self) -> usize {
        self.conf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conf.is_empty()
    }

    pub fn height(&self) -> usize {
        self.mask_logits.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.mask_logits.shape()[2]
    }

    pub fn logits(&self, i: usize) -> &[T] {
        let hw = self.height() * self.width();
        &self.mask_logits.data()[i * hw..(i + 1) * hw]
    }

    pub fn probs(&self, i: usize) -> Vec<T> {
        self.logits(i).iter().map(|v| crate::scalar::sigmoid(*v)).collect()
    }

    pub fn mask(&self, i: usize) -> MaskGrid {
        MaskGrid::from_logits(self.width(), self.height(), self.logits(i))
    }

    /// `s_IoU × s_conf` per proposal.
    pub fn products(&self) -> Vec<T> {
        self.conf.iter().zip(&self.iou_pred).map(|(c, i)| *c * *i).collect()
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first<T: PartialOrd + Copy>(scores: &[T]) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if !(s > b) => {}
            _ => best = Some((i, s)),
        }
    }
    best
}

/// Picks the proposal maximising `s_IoU × s_conf`.
pub fn select_mask<T: Scalar>(proposals: &Proposals<T>) -> Result<(usize, T)> {
    argmax_first(&proposals.products())
        .ok_or_else(|| Error::InvalidInput("no proposals to select from".into()))
}

/// Anything that turns an image, clicks and a previous mask into proposals.
pub trait ProposalModel<T: Scalar> {
    fn propose(&self, image: &Tensor<T>, clicks: &[Click], prev_mask: &Tensor<T>) -> Result<Proposals<T>>;
}

#[derive(Debug, Clone)]
pub struct PiClick<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    net: Net,
}

/// A recorded forward pass whose outputs can be back-propagated.
pub struct ForwardTrace<'a, T: Scalar> {
    pub ctx: Ctx<'a, T>,
    /// `[N, H*W]`.
    pub logits: Var,
    /// `[N, 1]` each.
    pub conf: Var,
    pub iou: Var,
    /// The attention-mask table used by each decoder layer.
    pub attention_masks: Vec<Vec<bool>>,
    /// Raw cross-attention node of each decoder layer.
    pub cross_attention: Vec<Var>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> ForwardTrace<'_, T> {
    pub fn proposals(&self) -> Proposals<T> {
        let n = self.ctx.tape.shape(self.conf)[0];
        Proposals {
            mask_logits: self
                .ctx
                .tape
                .value(self.logits)
                .clone()
                .reshaped(vec![n, self.height, self.width]),
            conf: self.ctx.tape.value(self.conf).data().to_vec(),
            iou_pred: self.ctx.tape.value(self.iou).data().to_vec(),
        }
    }

    /// Parameter gradients given gradients of a scalar loss w.r.t. the
    /// mask logits (`N*H*W`), confidences and IoU scores (`N` each).
    pub fn backward(&self, d_logits: &[T], d_conf: &[T], d_iou: &[T]) -> Vec<(ParamId, Tensor<T>)> {
        let t = &self.ctx.tape;
        let seed = |v: Var, g: &[T]| (v, Tensor::new(t.shape(v).to_vec(), g.to_vec()));
        let grads = t.backward(&[
            seed(self.logits, d_logits),
            seed(self.conf, d_conf),
            seed(self.iou, d_iou),
        ]);
        grads
            .params()
            .into_iter()
            .map(|(id, g)| (id, g.clone()))
            .collect()
    }
}

impl<T: Scalar> PiClick<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let net = Net::build(&config, &mut store, &mut rng);
        Ok(Self { config, store, net })
    }

    /// Builds the network for `config` and takes every parameter from `store`.
    pub fn from_params(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if store.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for (_, name, want) in model.store.clone().iter() {
            let got = store
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
            model.store.set(name, got.data().to_vec())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Scalar>(&self) -> PiClick<U> {
        PiClick {
            config: self.config.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.config.num_queries
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Type embeddings `(E_p, E_n)`.
    pub fn click_type_embeddings(&self) -> (&[T], &[T]) {
        (
            self.store.get(self.net.click_positive).data(),
            self.store.get(self.net.click_negative).data(),
        )
    }

    pub fn click_embeddings(&self, clicks: &[Click], height: usize, width: usize) -> Result<ClickEmbeddings<T>> {
        let (ep, en) = self.click_type_embeddings();
        encode_clicks_embed(clicks, height, width, ep, en)
    }

    /// Learned initial queries `X_0`.
    pub fn initial_state(&self) -> QueryState<T> {
        QueryState {
            features: self.store.get(self.net.query_feat).clone(),
            layer_index: 0,
        }
    }

    fn check_inputs(&self, image: &Tensor<T>, prev_mask: &Tensor<T>) -> Result<(usize, usize)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::Shape(format!("image must be 3×H×W, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let ps = prev_mask.shape();
        let ok = matches!(ps, [ph, pw] if (*ph, *pw) == (h, w))
            || matches!(ps, [1, ph, pw] if (*ph, *pw) == (h, w));
        if !ok {
            return Err(Error::Shape(format!(
                "previous mask {ps:?} does not match image {h}×{w}"
            )));
        }
        if !image.all_finite() || !prev_mask.all_finite() {
            return Err(Error::InvalidInput("inputs contain non-finite values".into()));
        }
        Ok((h, w))
    }

    fn encode_vars(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: &Tensor<T>,
        disk: &DiskMap,
        prev_mask: &Tensor<T>,
    ) -> Result<(EncodedVars, Geometry)> {
        let (h, w) = self.check_inputs(image, prev_mask)?;
        if (disk.height(), disk.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "disk map {}×{} does not match image {h}×{w}",
                disk.height(),
                disk.width()
            )));
        }
        let geo = Geometry {
            hp: padded(h),
            wp: padded(w),
        };
        let pad = |chw: &[T]| {
            let mut out = vec![T::zero(); geo.hp * geo.wp * 3];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[(y * geo.wp + x) * 3 + c] = chw[(c * h + y) * w + x];
                    }
                }
            }
            out
        };
        let mut map = disk.to_values::<T>();
        map.extend_from_slice(prev_mask.data());
        let vars = self
            .net
            .encode(&self.config, ctx, pad(image.data()), pad(&map), geo);
        Ok((vars, geo))
    }

    pub fn encode_image(&self, image: &Tensor<T>, disk: &DiskMap, prev_mask: &Tensor<T>) -> Result<FeatureBundle<T>> {
        let mut ctx = Ctx::new(&self.store);
        let (vars, _) = self.encode_vars(&mut ctx, image, disk, prev_mask)?;
        let grab = |g: GridVar| FeatureMap {
            height: g.h,
            width: g.w,
            data: ctx.tape.value(g.var).clone(),
        };
        Ok(FeatureBundle {
            pyramid: vars.pyramid.map(grab),
            mask_feature: grab(vars.mask_feature),
            height: image.shape()[1],
            width: image.shape()[2],
        })
    }

    fn check_state(&self, state: &QueryState<T>) -> Result<()> {
        let want = [self.config.num_queries, self.config.hidden_dim];
        if state.features.shape() != want {
            return Err(Error::Shape(format!(
                "query state {:?}, expected {want:?}",
                state.features.shape()
            )));
        }
        Ok(())
    }

    fn check_map(&self, map: &FeatureMap<T>) -> Result<()> {
        if map.data.shape() != [map.height * map.width, self.config.hidden_dim] {
            return Err(Error::Shape(format!(
                "feature map {:?} is not {}×{}×{}",
                map.data.shape(),
                map.height,
                map.width,
                self.config.hidden_dim
            )));
        }
        Ok(())
    }

    /// Applies decoder layer `state.layer_index` against one pyramid level.
    /// `prev_mask_logits` is `[N, h_l, w_l]`; spatial positions whose
    /// probability is below 0.5 are hidden from the corresponding query.
    pub fn decoder_layer(
        &self,
        state: &QueryState<T>,
        features: &FeatureMap<T>,
        click_embeds: &ClickEmbeddings<T>,
        prev_mask_logits: &Tensor<T>,
    ) -> Result<DecoderLayerOutput<T>> {
        self.check_state(state)?;
        self.check_map(features)?;
        let n = self.config.num_queries;
        let d = self.config.hidden_dim;
        let i = state.layer_index;
        if i >= self.config.decoder_layers {
            return Err(Error::InvalidInput(format!(
                "layer index {i} beyond the {} decoder layers",
                self.config.decoder_layers
            )));
        }
        let c = click_embeds.matrix.shape()[0];
        if c == 0 || click_embeds.matrix.shape()[1] != d {
            return Err(Error::Shape(format!(
                "click embeddings must be C×{d} with C ≥ 1, got {:?}",
                click_embeds.matrix.shape()
            )));
        }
        let (h, w) = (features.height, features.width);
        if prev_mask_logits.shape() != [n, h, w] {
            return Err(Error::Shape(format!(
                "previous mask logits {:?}, expected {:?}",
                prev_mask_logits.shape(),
                [n, h, w]
            )));
        }
        // attention_mask wants pixel-major [h*w, N]
        let pixel_major = prev_mask_logits.clone().reshaped(vec![n, h * w]).transpose2();
        let allowed = attention_mask(pixel_major.data(), (h, w), (h, w), n, c);

        let mut ctx = Ctx::new(&self.store);
        let x = ctx.constant(state.features.clone());
        let f = ctx.constant(features.data.clone());
        let e = ctx.constant(click_embeds.matrix.clone());
        let (key, value) = self
            .net
            .level_kv(&mut ctx, i % 3, GridVar { var: f, h, w }, e, d);
        let (out, raw) = self.net.decoder_layer(&mut ctx, i, x, key, value, &allowed);
        Ok(DecoderLayerOutput {
            state: QueryState {
                features: ctx.tape.value(out).clone(),
                layer_index: i + 1,
            },
            attention: ctx.tape.attention_probs(raw).expect("attention node").to_vec(),
            allowed,
            attended: ctx.tape.value(raw).clone(),
        })
    }

    /// Per-query dot-product weights `H_s(X)`, `[N, D]`.
    pub fn mask_embedding(&self, state: &QueryState<T>) -> Result<Tensor<T>> {
        self.check_state(state)?;
        let mut ctx = Ctx::new(&self.store);
        let x = ctx.constant(state.features.clone());
        let e = self.net.mask_embedding(&mut ctx, x);
        Ok(ctx.tape.value(e).clone())
    }

    /// Mask logits at the resolution of `mask_feature`, `[N, h, w]`.
    pub fn mask_head_low(&self, state: &QueryState<T>, mask_feature: &FeatureMap<T>) -> Result<Tensor<T>> {
        self.check_state(state)?;
        self.check_map(mask_feature)?;
        let mut ctx = Ctx::new(&self.store);
        let x = ctx.constant(state.features.clone());
        let f = ctx.constant(mask_feature.data.clone());
        let low = self.net.mask_logits(&mut ctx, x, f);
        let n = self.config.num_queries;
        Ok(ctx
            .tape
            .value(low)
            .transpose2()
            .reshaped(vec![n, mask_feature.height, mask_feature.width]))
    }

    /// Mask logits upsampled ×4 to the (padded) input resolution, `[N, 4h, 4w]`.
    pub fn mask_head(&self, state: &QueryState<T>, mask_feature: &FeatureMap<T>) -> Result<Tensor<T>> {
        let low = self.mask_head_low(state, mask_feature)?;
        let (n, h, w) = (low.shape()[0], low.shape()[1], low.shape()[2]);
        let up = spatial::bilinear::<T>(h, w, 4 * h, 4 * w);
        let mut out = Vec::with_capacity(n * 16 * h * w);
        for q in 0..n {
            out.extend(up.apply(&low.data()[q * h * w..(q + 1) * h * w], 1));
        }
        Ok(Tensor::new(vec![n, 4 * h, 4 * w], out))
    }

    /// `(s_conf, s_IoU)` per query.
    pub fn trm_heads(&self, state: &QueryState<T>) -> Result<(Vec<T>, Vec<T>)> {
        self.check_state(state)?;
        let mut ctx = Ctx::new(&self.store);
        let x = ctx.constant(state.features.clone());
        let (c, i) = self.net.scores(&mut ctx, x);
        Ok((
            ctx.tape.value(c).data().to_vec(),
            ctx.tape.value(i).data().to_vec(),
        ))
    }

    /// Full forward pass on the tape. `frozen_masks`, when given, replaces the
    /// per-layer attention masks (used to hold them fixed while probing
    /// gradients numerically).
    pub fn trace(
        &self,
        image: &Tensor<T>,
        clicks: &[Click],
        prev_mask: &Tensor<T>,
        frozen_masks: Option<&[Vec<bool>]>,
    ) -> Result<ForwardTrace<'_, T>> {
        if clicks.is_empty() {
            return Err(Error::InvalidInput("at least one click is required".into()));
        }
        let (h, w) = self.check_inputs(image, prev_mask)?;
        let disk = encode_clicks_disk(clicks, h, w, self.config.disk_radius)?;
        let n = self.config.num_queries;
        let d = self.config.hidden_dim;
        let layers = self.config.decoder_layers;
        if let Some(f) = frozen_masks {
            if f.len() != layers {
                return Err(Error::Shape(format!(
                    "{} frozen attention masks for {layers} layers",
                    f.len()
                )));
            }
        }

        let mut ctx = Ctx::new(&self.store);
        let (enc, geo) = self.encode_vars(&mut ctx, image, &disk, prev_mask)?;

        let mut pe = Vec::with_capacity(clicks.len() * d);
        for c in clicks {
            pe.extend(crate::click::positional_encoding::<T>(c.x, c.y, h, w, d)?);
        }
        let positive: Vec<bool> = clicks.iter().map(|c| c.polarity.is_positive()).collect();
        let e = self
            .net
            .click_tokens(&mut ctx, Tensor::new(vec![clicks.len(), d], pe), &positive);
        let kv: Vec<(Var, Var)> = (0..3)
            .map(|l| self.net.level_kv(&mut ctx, l, enc.pyramid[l], e, d))
            .collect();

        let mf = enc.mask_feature;
        let mut x = ctx.p(self.net.query_feat);
        let mut low = self.net.mask_logits(&mut ctx, x, mf.var);
        let mut masks = Vec::with_capacity(layers);
        let mut cross = Vec::with_capacity(layers);
        for i in 0..layers {
            let l = i % 3;
            let lvl = enc.pyramid[l];
            let allowed = match frozen_masks {
                Some(f) => f[i].clone(),
                None => attention_mask(
                    ctx.tape.value(low).data(),
                    (mf.h, mf.w),
                    (lvl.h, lvl.w),
                    n,
                    clicks.len(),
                ),
            };
            let (nx, raw) = self.net.decoder_layer(&mut ctx, i, x, kv[l].0, kv[l].1, &allowed);
            x = nx;
            low = self.net.mask_logits(&mut ctx, x, mf.var);
            masks.push(allowed);
            cross.push(raw);
        }

        let up = ctx.tape.row_mix(
            low,
            Arc::new(spatial::bilinear(mf.h, mf.w, geo.hp, geo.wp)),
        );
        let logits = ctx.tape.gather(
            up,
            spatial::crop_transpose_index(geo.hp, geo.wp, n, h, w),
            vec![n, h * w],
        );
        let (conf, iou) = self.net.scores(&mut ctx, x);
        Ok(ForwardTrace {
            ctx,
            logits,
            conf,
            iou,
            attention_masks: masks,
            cross_attention: cross,
            height: h,
            width: w,
        })
    }

    pub fn forward(&self, image: &Tensor<T>, clicks: &[Click], prev_mask: &Tensor<T>) -> Result<Proposals<T>> {
        Ok(self.trace(image, clicks, prev_mask, None)?.proposals())
    }

    /// Sine encodings of a `h × w` grid at the decoder width.
    pub fn grid_encoding(&self, h: usize, w: usize) -> Tensor<T> {
        grid_encoding(h, w, self.config.hidden_dim)
    }
}

impl<T: Scalar> ProposalModel<T> for PiClick<T> {
    fn propose(&self, image: &Tensor<T>, clicks: &[Click], prev_mask: &Tensor<T>) -> Result<Proposals<T>> {
        self.forward(image, clicks, prev_mask)
    }
}
