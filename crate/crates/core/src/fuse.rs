//! Patch embedding, context fusion into the bottleneck, the helper head and
//! the combined loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndiff::{Array, Element, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct FuseParams {
    pub hidden: usize,
    pub dim: usize,
    pub classes: usize,
    /// `[D_hid, D]` projection after global average pooling.
    pub emb_w: ParamId,
    pub emb_b: ParamId,
    /// `[D_hid, D_hid + D, 1, 1]`; the first `D_hid` input channels take the
    /// bottleneck, the rest take the context embedding.
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl FuseParams {
    /// The fusion conv starts as identity on the bottleneck and zero on the
    /// context channels, so an untrained model ignores context exactly.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        hidden: usize,
        dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if hidden == 0 || dim == 0 || classes == 0 {
            return Err(Error::invalid("fusion needs D_hid, D and C >= 1"));
        }
        let emb_w = store.add_uniform("emb.w", &[hidden, dim], 1.0 / (hidden as f64).sqrt(), rng);
        let emb_b = store.add("emb.b", Array::zeros(&[dim]));
        let cin = hidden + dim;
        let mut w = Array::<T>::zeros(&[hidden, cin, 1, 1]);
        for c in 0..hidden {
            w.data_mut()[c * cin + c] = T::one();
        }
        let fuse_w = store.add("fuse.w", w);
        let fuse_b = store.add("fuse.b", Array::zeros(&[hidden]));
        let head_w = store.add_uniform("head.w", &[dim, classes], 1.0 / (dim as f64).sqrt(), rng);
        let head_b = store.add("head.b", Array::zeros(&[classes]));
        Ok(FuseParams {
            hidden,
            dim,
            classes,
            emb_w,
            emb_b,
            fuse_w,
            fuse_b,
            head_w,
            head_b,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.emb_w,
            self.emb_b,
            self.fuse_w,
            self.fuse_b,
            self.head_w,
            self.head_b,
        ]
    }
}

/// `[B, D_hid, m, m]` bottleneck to `[B, D]` embeddings.
pub fn embed_patch<T: Element>(g: &mut Graph<'_, T>, p: &FuseParams, feat: Var) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    if s.len() != 4 || s[1] != p.hidden {
        return Err(Error::shape(
            "embed_patch",
            format!("bottleneck {s:?} for D_hid = {}", p.hidden),
        ));
    }
    let pooled = g.adaptive_avg_pool(feat, 1, 1)?;
    let pooled = g.reshape(pooled, &[s[0], p.hidden])?;
    let (w, b) = (g.param(p.emb_w), g.param(p.emb_b));
    g.linear(pooled, w, Some(b))
}

/// Broadcasts `a: [B, D]` over the bottleneck, concatenates on channels and
/// applies the 1x1 fusion conv.
pub fn fuse_context<T: Element>(
    g: &mut Graph<'_, T>,
    p: &FuseParams,
    feat: Var,
    a: Var,
) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    let sa = g.shape(a).to_vec();
    if s.len() != 4 || s[1] != p.hidden || sa != [s[0], p.dim] {
        return Err(Error::shape(
            "fuse_context",
            format!(
                "bottleneck {s:?}, context {sa:?} for D_hid = {}, D = {}",
                p.hidden, p.dim
            ),
        ));
    }
    let a = g.reshape(a, &[s[0], p.dim, 1, 1])?;
    let a = g.broadcast_expand(a, &[s[0], p.dim, s[2], s[3]])?;
    let x = g.concat(&[feat, a], 1)?;
    let (w, b) = (g.param(p.fuse_w), g.param(p.fuse_b));
    g.conv2d(x, w, Some(b), 1, 0)
}

/// Predicted class distribution `[B, C]` of the centre patch from context alone.
pub fn helper_head<T: Element>(g: &mut Graph<'_, T>, p: &FuseParams, a: Var) -> Result<Var> {
    let (w, b) = (g.param(p.head_w), g.param(p.head_b));
    let logits = g.linear(a, w, Some(b))?;
    g.softmax(logits)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "loss weight {lambda} not in [0, 1]"
        )));
    }
    Ok(())
}

/// `(1 - lambda) * l_seg + lambda * l_cls`.
pub fn combined_loss(l_seg: f64, l_cls: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if l_seg.is_nan() || l_cls.is_nan() {
        return Err(Error::NonFiniteLoss(format!(
            "L_seg = {l_seg}, L_cls = {l_cls}"
        )));
    }
    Ok((1.0 - lambda) * l_seg + lambda * l_cls)
}

/// Graph form of [`combined_loss`] on scalar nodes.
pub fn combined_loss_var<T: Element>(
    g: &mut Graph<'_, T>,
    l_seg: Var,
    l_cls: Var,
    lambda: f64,
) -> Result<Var> {
    check_lambda(lambda)?;
    let (s, c) = (
        g.value(l_seg).item().to_f64(),
        g.value(l_cls).item().to_f64(),
    );
    if s.is_nan() || c.is_nan() {
        return Err(Error::NonFiniteLoss(format!("L_seg = {s}, L_cls = {c}")));
    }
    let seg = g.scale(l_seg, 1.0 - lambda);
    let cls = g.scale(l_cls, lambda);
    g.add(seg, cls)
}
