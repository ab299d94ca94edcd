//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "REVICKPT"
//! version   u32      1
//! meta      u32 length + UTF-8 `key=value` lines describing the architecture
//! count     u32      number of parameters
//! per parameter:
//!   name    u32 length + UTF-8
//!   frozen  u8
//!   ndim    u32, then ndim × u64 dims
//!   data    numel × f64
//! moments   u8 flag; when 1: u64 step, then per parameter a u8 flag and,
//!           when set, numel × f64 first moment then numel × f64 second moment
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::AdapterConfig;
use crate::backbone::{BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"REVICKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub frozen: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<SavedParam>,
    pub moments: Option<AdamW>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend(s.as_bytes());
    }
    fn floats(&mut self, t: &Tensor) {
        for v in t.data() {
            self.0.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("checkpoint", "string is not UTF-8"))
    }
    fn floats(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend(VERSION.to_le_bytes());
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.str(&meta);
        w.u32(self.params.len());
        for p in &self.params {
            w.str(&p.name);
            w.u8(p.frozen as u8);
            w.u32(p.value.shape().len());
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.floats(&p.value);
        }
        match &self.moments {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.step);
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    match (m, v) {
                        (Some(m), Some(v)) => {
                            w.u8(1);
                            w.floats(m);
                            w.floats(v);
                        }
                        _ => w.u8(0),
                    }
                }
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::format("checkpoint", "bad magic number"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let meta = r
            .str()?
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::format("checkpoint", format!("bad meta line '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(Error::format("checkpoint", format!("bad frozen flag {other}"))),
            };
            let ndim = r.u32()?;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let value = r.floats(&shape)?;
            params.push(SavedParam { name, frozen, value });
        }
        let moments = match r.u8()? {
            0 => None,
            1 => {
                let mut opt = AdamW::new(count);
                opt.step = r.u64()?;
                for (i, p) in params.iter().enumerate() {
                    if r.u8()? == 1 {
                        opt.m[i] = Some(r.floats(p.value.shape())?);
                        opt.v[i] = Some(r.floats(p.value.shape())?);
                    }
                }
                Some(opt)
            }
            other => return Err(Error::format("checkpoint", format!("bad moments flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { meta, params, moments })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn from_model(model: &Model, moments: Option<&AdamW>) -> Self {
        Checkpoint {
            meta: architecture_meta(&model.config, model.adapter_config.as_ref()),
            params: model
                .store
                .iter()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    frozen: p.frozen,
                    value: p.value.clone(),
                })
                .collect(),
            moments: moments.cloned(),
        }
    }

    /// Rebuilds the model described by the metadata and loads every
    /// parameter into it.
    pub fn to_model(&self) -> Result<Model> {
        let (backbone, adapter) = parse_architecture(self)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(backbone, &mut rng)?;
        if let Some(cfg) = &adapter {
            model.attach_adapters(cfg, &mut rng)?;
        }
        if model.store.len() != self.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "{} parameters saved, architecture has {}",
                    self.params.len(),
                    model.store.len()
                ),
            ));
        }
        for saved in &self.params {
            let id = model
                .store
                .find(&saved.name)
                .ok_or_else(|| Error::format("checkpoint", format!("unknown parameter '{}'", saved.name)))?;
            model.store.assign(id, saved.value.clone())?;
            model.store.set_frozen(id, saved.frozen);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn save_model(path: &Path, model: &Model, moments: Option<&AdamW>) -> Result<()> {
    Checkpoint::from_model(model, moments).save(path)
}

pub fn load_model(path: &Path) -> Result<(Model, Option<AdamW>)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    Ok((model, ckpt.moments))
}

fn architecture_meta(b: &BackboneConfig, a: Option<&AdapterConfig>) -> Vec<(String, String)> {
    let channels: Vec<String> = b.decoder_channels.iter().map(|c| c.to_string()).collect();
    let mut meta = vec![
        ("backbone.image_size", b.image_size.to_string()),
        ("backbone.patch_size", b.patch_size.to_string()),
        ("backbone.embed_dim", b.embed_dim.to_string()),
        ("backbone.depth", b.depth.to_string()),
        ("backbone.heads", b.heads.to_string()),
        ("backbone.mlp_ratio", b.mlp_ratio.to_string()),
        ("backbone.decoder_channels", channels.join(",")),
    ];
    if let Some(a) = a {
        meta.extend([
            ("adapter.kind", a.kind.to_string()),
            ("adapter.placement", a.placement.to_string()),
            ("adapter.width", a.width.to_string()),
            ("adapter.lora_rank", a.lora_rank.to_string()),
            ("adapter.rho_init", a.rho_init.to_string()),
            ("adapter.alpha_init", a.alpha_init.to_string()),
        ]);
    }
    meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn parse_architecture(ckpt: &Checkpoint) -> Result<(BackboneConfig, Option<AdapterConfig>)> {
    fn field<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
        let raw = ckpt
            .meta(key)
            .ok_or_else(|| Error::format("checkpoint", format!("missing meta key '{key}'")))?;
        raw.parse()
            .map_err(|_| Error::format("checkpoint", format!("bad value '{raw}' for '{key}'")))
    }
    let channels: String = field(ckpt, "backbone.decoder_channels")?;
    let decoder_channels = channels
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::format("checkpoint", "bad decoder channel list"))
        })
        .collect::<Result<Vec<usize>>>()?;
    let backbone = BackboneConfig {
        image_size: field(ckpt, "backbone.image_size")?,
        patch_size: field(ckpt, "backbone.patch_size")?,
        embed_dim: field(ckpt, "backbone.embed_dim")?,
        depth: field(ckpt, "backbone.depth")?,
        heads: field(ckpt, "backbone.heads")?,
        mlp_ratio: field(ckpt, "backbone.mlp_ratio")?,
        decoder_channels,
    };
    let adapter = if ckpt.meta("adapter.kind").is_some() {
        Some(AdapterConfig {
            kind: field(ckpt, "adapter.kind")?,
            placement: field(ckpt, "adapter.placement")?,
            width: field(ckpt, "adapter.width")?,
            lora_rank: field(ckpt, "adapter.lora_rank")?,
            rho_init: field(ckpt, "adapter.rho_init")?,
            alpha_init: field(ckpt, "adapter.alpha_init")?,
        })
    } else {
        None
    };
    Ok((backbone, adapter))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            decoder_channels: vec![4, 4],
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::new(tiny(), &mut rng).unwrap();
        model
            .attach_adapters(
                &AdapterConfig {
                    lora_rank: 1,
                    width: 4,
                    ..AdapterConfig::default()
                },
                &mut rng,
            )
            .unwrap();
        let mut opt = AdamW::new(model.store.len());
        opt.step = 7;
        opt.m[0] = Some(Tensor::full(
            model.store.value(model.store.ids().next().unwrap()).shape(),
            0.5,
        ));
        opt.v[0] = opt.m[0].clone();
        let ckpt = Checkpoint::from_model(&model, Some(&opt));
        let back = Checkpoint::decode(&ckpt.encode()).unwrap();
        assert_eq!(back, ckpt);
        let rebuilt = back.to_model().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(rebuilt.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(tiny(), &mut rng).unwrap();
        let bytes = Checkpoint::from_model(&model, None).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
