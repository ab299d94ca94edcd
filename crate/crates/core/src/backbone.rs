//! A small patch transformer with a convolutional segmentation decoder, and
//! the model wrapper that attaches adapters and LoRA to it.

use rand::Rng;

use crate::adapter::{AdapterConfig, AdapterState, SiteAdapter, SiteTrace};
use crate::error::{Error, Result};
use crate::nn::{grid_to_tokens, tokens_to_grid, Conv, Init, LayerNorm, Linear, LoraWeights};
use crate::param::{Census, Graph, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Var;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Output channels of each upsampling decoder block.
    pub decoder_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            decoder_channels: vec![32, 16],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("backbone config: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive".into());
        }
        let grid = self.grid();
        let scale = 1usize << self.decoder_channels.len();
        if grid * scale != self.image_size {
            return bad(format!(
                "{} decoder blocks upsample the {grid}×{grid} grid to {}, not {}",
                self.decoder_channels.len(),
                grid * scale,
                self.image_size
            ));
        }
        if self.decoder_channels.contains(&0) {
            return bad("decoder channels must be positive".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn sites(&self) -> usize {
        self.depth + self.decoder_channels.len()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    /// Each block: nearest ×2 upsample, 3×3 conv, rectifier.
    pub decoder: Vec<Conv>,
    pub head: Conv,
}

/// Flattens 3×H×W into (H/p·W/p)×(3·p·p) patch rows, row-major over the
/// patch grid.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: format!("not divisible into {patch}×{patch} patches"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let feat = c * patch * patch;
    let src = img.data();
    let mut out = vec![0.0; gh * gw * feat];
    for py in 0..gh {
        for px in 0..gw {
            let row = (py * gw + px) * feat;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out[row + ch * patch * patch + dy * patch + dx] =
                            src[ch * h * w + (py * patch + dy) * w + px * patch + dx];
                    }
                }
            }
        }
    }
    Tensor::new(&[gh * gw, feat], out)
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let tokens = cfg.grid() * cfg.grid();
        let patch = Linear::new(
            store,
            "embed.patch",
            3 * cfg.patch_size * cfg.patch_size,
            d,
            Init::FanInUniform,
            rng,
        );
        let pos = store.add("embed.pos", Tensor::normal(&[tokens, d], 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|i| {
                let n = |part: &str| format!("encoder.{i}.{part}");
                let hidden = d * cfg.mlp_ratio;
                EncoderBlock {
                    ln1: LayerNorm::new(store, &n("ln1"), d),
                    q: Linear::new(store, &n("attn.q"), d, d, Init::FanInUniform, rng),
                    k: Linear::new(store, &n("attn.k"), d, d, Init::FanInUniform, rng),
                    v: Linear::new(store, &n("attn.v"), d, d, Init::FanInUniform, rng),
                    proj: Linear::new(store, &n("attn.proj"), d, d, Init::FanInUniform, rng),
                    ln2: LayerNorm::new(store, &n("ln2"), d),
                    fc1: Linear::new(store, &n("mlp.fc1"), d, hidden, Init::FanInUniform, rng),
                    fc2: Linear::new(store, &n("mlp.fc2"), hidden, d, Init::FanInUniform, rng),
                }
            })
            .collect();
        let norm = LayerNorm::new(store, "encoder.norm", d);
        let mut decoder = Vec::new();
        let mut c_in = d;
        for (j, &c_out) in cfg.decoder_channels.iter().enumerate() {
            decoder.push(Conv::new(
                store,
                &format!("decoder.{j}.conv"),
                c_in,
                c_out,
                3,
                Init::KaimingUniform,
                rng,
            ));
            c_in = c_out;
        }
        let head = Conv::new(store, "head", c_in, 1, 3, Init::FanInUniform, rng);
        Ok(Backbone {
            patch,
            pos,
            blocks,
            norm,
            decoder,
            head,
        })
    }
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// 1×H×W manipulation logits.
    pub logits: Var,
    /// One entry per adapted block, in execution order.
    pub traces: Vec<SiteTrace>,
}

/// The backbone plus whatever adapters and LoRA factors were attached.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: BackboneConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    /// Indexed by site: encoder blocks first, then decoder blocks.
    pub adapters: Vec<Option<SiteAdapter>>,
    pub adapter_config: Option<AdapterConfig>,
    backbone_params: usize,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, rng)?;
        let backbone_params = store.len();
        let adapters = vec![None; config.sites()];
        Ok(Model {
            config,
            store,
            backbone,
            adapters,
            adapter_config: None,
            backbone_params,
        })
    }

    /// Parameters that belong to the backbone, head included.
    pub fn backbone_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.store.ids().take(self.backbone_params)
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.backbone.head.weight, self.backbone.head.bias]
    }

    /// Marks every backbone parameter frozen, head included.
    pub fn freeze(&mut self) {
        let ids: Vec<ParamId> = self.backbone_ids().collect();
        for id in ids {
            self.store.set_frozen(id, true);
        }
    }

    /// Freezes the backbone, adds LoRA to q/k/v of every selected encoder
    /// block and an adapter to every selected block, and leaves the head
    /// trainable.
    pub fn attach_adapters<R: Rng + ?Sized>(&mut self, cfg: &AdapterConfig, rng: &mut R) -> Result<Census> {
        cfg.validate()?;
        if self.adapter_config.is_some() {
            return Err(Error::InvalidArgument("adapters are already attached".into()));
        }
        self.freeze();
        for id in self.head_ids() {
            self.store.set_frozen(id, false);
        }
        let d = self.config.embed_dim;
        if cfg.placement.covers_encoder() {
            for i in 0..self.config.depth {
                if cfg.lora_rank > 0 {
                    let blk = &mut self.backbone.blocks[i];
                    for (part, lin) in [("q", &mut blk.q), ("k", &mut blk.k), ("v", &mut blk.v)] {
                        let name = format!("encoder.{i}.attn.{part}");
                        lin.lora = Some(LoraWeights::attach(
                            &mut self.store,
                            &name,
                            lin.weight,
                            cfg.lora_rank,
                            rng,
                        )?);
                    }
                }
                self.adapters[i] = SiteAdapter::new(&mut self.store, &format!("encoder.{i}.adapter"), d, d, cfg, rng);
            }
        }
        if cfg.placement.covers_decoder() {
            let mut c_in = d;
            for (j, &c_out) in self.config.decoder_channels.iter().enumerate() {
                let site = self.config.depth + j;
                self.adapters[site] =
                    SiteAdapter::new(&mut self.store, &format!("decoder.{j}.adapter"), c_in, c_out, cfg, rng);
                c_in = c_out;
            }
        }
        self.adapter_config = Some(cfg.clone());
        Ok(self.store.census())
    }

    pub fn census(&self) -> Census {
        self.store.census()
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.iter().filter(|a| a.is_some()).count()
    }

    pub fn forward(&self, g: &mut Graph, img: &Tensor) -> Result<Forward> {
        let cfg = &self.config;
        let s = cfg.image_size;
        if img.shape() != [3, s, s] {
            return Err(Error::InvalidShape {
                shape: img.shape().to_vec(),
                reason: format!("expected a 3×{s}×{s} image"),
            });
        }
        let bb = &self.backbone;
        let grid = cfg.grid();
        let patches = g.constant(patchify(img, cfg.patch_size)?);
        let x = bb.patch.forward(g, patches)?;
        let pos = g.param(bb.pos);
        let mut x = g.add(x, pos)?;
        let mut state = AdapterState::default();
        let mut traces = Vec::new();
        for (i, blk) in bb.blocks.iter().enumerate() {
            let h = blk.ln1.forward(g, x)?;
            let q = blk.q.forward(g, h)?;
            let k = blk.k.forward(g, h)?;
            let v = blk.v.forward(g, h)?;
            let a = g.attention(q, k, v, cfg.heads)?;
            let a = blk.proj.forward(g, a)?;
            let mut y = g.add(x, a)?;
            if let Some(adapter) = &self.adapters[i] {
                let d_prev = tokens_to_grid(g, x, grid, grid)?;
                let block_out = tokens_to_grid(g, y, grid, grid)?;
                let (out, trace) = adapter.step(g, i, d_prev, block_out, &mut state)?;
                traces.push(trace);
                y = grid_to_tokens(g, out)?;
            }
            let h = blk.ln2.forward(g, y)?;
            let h = blk.fc1.forward(g, h)?;
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, h)?;
            x = g.add(y, h)?;
        }
        let x = bb.norm.forward(g, x)?;
        let mut u = tokens_to_grid(g, x, grid, grid)?;
        for (j, conv) in bb.decoder.iter().enumerate() {
            let up = g.upsample2(u)?;
            let out = conv.forward(g, up)?;
            let mut out = g.relu(out);
            let site = cfg.depth + j;
            if let Some(adapter) = &self.adapters[site] {
                let (o, trace) = adapter.step(g, site, u, out, &mut state)?;
                traces.push(trace);
                out = o;
            }
            u = out;
        }
        let logits = bb.head.forward(g, u)?;
        Ok(Forward { logits, traces })
    }

    /// Logits for one image without recording gradients.
    pub fn predict(&self, img: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, img)?;
        Ok(g.value(out.logits).clone())
    }
}
