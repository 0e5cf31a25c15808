//! DeskNet, a small U-Net with a bottleneck hook for the memory attention
//! framework (MAF).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{mha_context, AttnConfig, MhaParams};
use crate::error::{Error, Result};
use crate::fuse::{embed_patch, fuse_context, helper_head, FuseParams};
use crate::ndiff::{Array, Element, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskNetConfig {
    pub patch_px: usize,
    pub classes: usize,
    /// Output channels of encoder levels `0..levels`.
    pub enc_channels: Vec<usize>,
    /// Bottleneck channels `D_hid`.
    pub hidden: usize,
    /// Output channels of decoder levels `0..levels`, indexed like the encoder.
    pub dec_channels: Vec<usize>,
}

impl Default for DeskNetConfig {
    fn default() -> Self {
        DeskNetConfig {
            patch_px: 32,
            classes: 4,
            enc_channels: vec![16, 32, 64],
            hidden: 64,
            dec_channels: vec![16, 16, 32],
        }
    }
}

impl DeskNetConfig {
    pub fn levels(&self) -> usize {
        self.enc_channels.len()
    }

    /// Bottleneck edge length `m = S / 2^levels`.
    pub fn bottleneck_px(&self) -> usize {
        self.patch_px >> self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || self.dec_channels.len() != l {
            return Err(Error::invalid(format!(
                "need matching non-empty encoder/decoder channel lists, got {} and {}",
                l,
                self.dec_channels.len()
            )));
        }
        if self.patch_px == 0 || self.patch_px % (1 << l) != 0 {
            return Err(Error::invalid(format!(
                "patch size {} not divisible by 2^{l}",
                self.patch_px
            )));
        }
        if self.classes == 0
            || self.hidden == 0
            || self
                .enc_channels
                .iter()
                .chain(&self.dec_channels)
                .any(|&c| c == 0)
        {
            return Err(Error::invalid(
                "channel counts and classes must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

impl ConvParams {
    fn init<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.add_uniform(
            format!("{name}.w"),
            &[cout, cin, kernel, kernel],
            (6.0 / fan_in as f64).sqrt(),
            rng,
        );
        let b = store.add(format!("{name}.b"), Array::zeros(&[cout]));
        ConvParams { w, b }
    }

    fn apply<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, pad: usize) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), 1, pad)
    }
}

/// Parameter handles of the plain encoder-decoder.
#[derive(Clone, Debug)]
pub struct DeskNet {
    pub config: DeskNetConfig,
    enc: Vec<ConvParams>,
    dec: Vec<ConvParams>,
    out: ConvParams,
}

impl DeskNet {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        config: DeskNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let l = config.levels();
        let mut enc = Vec::with_capacity(l + 1);
        let mut cin = 3;
        for (i, &c) in config
            .enc_channels
            .iter()
            .chain(std::iter::once(&config.hidden))
            .enumerate()
        {
            enc.push(ConvParams::init(store, &format!("enc{i}"), cin, c, 3, rng));
            cin = c;
        }
        let mut dec = Vec::with_capacity(l);
        let mut up = config.hidden;
        for i in (0..l).rev() {
            let c = config.dec_channels[i];
            dec.push(ConvParams::init(
                store,
                &format!("dec{i}"),
                up + config.enc_channels[i],
                c,
                3,
                rng,
            ));
            up = c;
        }
        let out = ConvParams::init(store, "out", up, config.classes, 1, rng);
        Ok(DeskNet {
            config,
            enc,
            dec,
            out,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.enc
            .iter()
            .chain(&self.dec)
            .chain(std::iter::once(&self.out))
            .flat_map(|c| [c.w, c.b])
            .collect()
    }

    /// `[B, 3, S, S]` patches to feature maps `feat_0..feat_l`, where
    /// `feat_i` has edge `S / 2^i` and `feat_l` is the bottleneck.
    pub fn encode<T: Element>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Vec<Var>> {
        let s = g.shape(patches).to_vec();
        let px = self.config.patch_px;
        if s.len() != 4 || s[1] != 3 || s[2] != px || s[3] != px {
            return Err(Error::shape(
                "encode",
                format!("patches {s:?}, expected [B, 3, {px}, {px}]"),
            ));
        }
        let mut feats = Vec::with_capacity(self.enc.len());
        let mut x = patches;
        for (i, conv) in self.enc.iter().enumerate() {
            if i > 0 {
                x = g.max_pool2(x)?;
            }
            let y = conv.apply(g, x, 1)?;
            x = g.relu(y);
            feats.push(x);
        }
        Ok(feats)
    }

    /// Per-pixel class logits `[B, C, S, S]` from a feature set whose last
    /// entry may be the context-fused bottleneck.
    pub fn decode<T: Element>(&self, g: &mut Graph<'_, T>, feats: &[Var]) -> Result<Var> {
        let l = self.config.levels();
        if feats.len() != l + 1 {
            return Err(Error::shape(
                "decode",
                format!("{} feature maps for {l} levels", feats.len()),
            ));
        }
        let mut x = feats[l];
        for (conv, i) in self.dec.iter().zip((0..l).rev()) {
            let up = g.upsample_nearest(x, 2)?;
            let cat = g.concat(&[up, feats[i]], 1)?;
            let y = conv.apply(g, cat, 1)?;
            x = g.relu(y);
        }
        self.out.apply(g, x, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Maf {
    pub attn: MhaParams,
    pub fuse: FuseParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub net: DeskNetConfig,
    /// `attn.k == 0` disables the memory attention entirely.
    pub attn: AttnConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk(k: usize, seed: u64) -> Self {
        ModelConfig {
            net: DeskNetConfig::default(),
            attn: AttnConfig::desk(k),
            seed,
        }
    }

    pub fn uses_memory(&self) -> bool {
        self.attn.k > 0
    }
}

/// Parameters plus the handles that interpret them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub net: DeskNet,
    pub maf: Option<Maf>,
}

/// Network outputs for a batch.
pub struct Forward {
    /// `[B, C, S, S]` logits.
    pub seg: Var,
    /// `[B, C]` helper-head class distribution, when the MAF is active.
    pub cls: Option<Var>,
    /// `[B, h, (2k+1)^2]` attention weights, when the MAF is active.
    pub scores: Option<Array<f32>>,
}

impl<T: Element> Model<T> {
    /// Deterministic in `config.seed`. The DeskNet parameters are drawn first,
    /// so models differing only in `k` share identical DeskNet weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = DeskNet::init(&mut store, config.net.clone(), &mut rng)?;
        let maf = if config.uses_memory() {
            let attn = MhaParams::init(&mut store, config.attn, "attn", &mut rng)?;
            let fuse = FuseParams::init(
                &mut store,
                config.net.hidden,
                config.attn.dim,
                config.net.classes,
                &mut rng,
            )?;
            Some(Maf { attn, fuse })
        } else {
            None
        };
        Ok(Model {
            config,
            store,
            net,
            maf,
        })
    }

    /// Same handles over a store converted to another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
            maf: self.maf.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.config.attn.k
    }

    pub fn embed_dim(&self) -> usize {
        self.config.attn.dim
    }

    /// Patch embeddings `[B, D]` for the memory bank.
    pub fn embed(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let maf = self
            .maf
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no memory attention (k = 0)"))?;
        let feats = self.net.encode(g, patches)?;
        embed_patch(g, &maf.fuse, *feats.last().expect("at least one level"))
    }

    /// Full forward pass. `context` holds the retrieved neighbourhoods
    /// `[B, n, D]` and their masks; it is ignored when the MAF is disabled.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        patches: Var,
        context: Option<(&Array<T>, &[bool])>,
    ) -> Result<Forward> {
        let mut feats = self.net.encode(g, patches)?;
        let Some(maf) = &self.maf else {
            let seg = self.net.decode(g, &feats)?;
            return Ok(Forward {
                seg,
                cls: None,
                scores: None,
            });
        };
        let (memory, mask) = context
            .ok_or_else(|| Error::invalid("memory attention needs a retrieved neighbourhood"))?;
        let bottleneck = *feats.last().expect("at least one level");
        let e_c = embed_patch(g, &maf.fuse, bottleneck)?;
        let out = mha_context(g, &maf.attn, e_c, memory, mask)?;
        let fused = fuse_context(g, &maf.fuse, bottleneck, out.a)?;
        *feats.last_mut().expect("at least one level") = fused;
        let seg = self.net.decode(g, &feats)?;
        let cls = helper_head(g, &maf.fuse, out.a)?;
        Ok(Forward {
            seg,
            cls: Some(cls),
            scores: Some(out.scores),
        })
    }

    /// Plain encode-decode, bypassing any memory attention.
    pub fn forward_plain(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let feats = self.net.encode(g, patches)?;
        self.net.decode(g, &feats)
    }
}
