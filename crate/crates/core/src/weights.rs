//! The `RVAE` weight container.
//!
//! Little-endian throughout:
//!
//! ```text
//! "RVAE" | version u32 | config block | seed u64 | steps u64 | layer count u32
//! shape table: per layer
//!     name_len u16 | name utf-8 | kind u8 | weight shape 4 x u32 | bias_len u32 | has_running u8
//! payload: per layer
//!     weights f32* | bias f32* | [running_mean f32* | running_var f32*]
//! crc32 u32 over every preceding byte
//! ```
//!
//! The config block is `in_channels u32 | tile_size u32 | hidden_count u32 |
//! hidden u32* | extra_depth u32 | latent_dim u32 | leaky_slope f64 |
//! bn_epsilon f64 | bn_momentum f64 | beta f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};
use crate::layers::{BatchNormState, LayerKind, LayerParams, RunningStats};
use crate::model::{ModelConfig, Vae};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RVAE";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BundleMeta {
    pub seed: u64,
    pub training_steps: u64,
}

/// Serializable model: architecture, parameters and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsBundle {
    pub model: Vae<f32>,
    pub format_version: u32,
    pub meta: BundleMeta,
}

impl WeightsBundle {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            model: Vae::build(config, seed)?,
            format_version: WEIGHTS_VERSION,
            meta: BundleMeta {
                seed,
                training_steps: 0,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn layers(&self) -> &[LayerParams<f32>] {
        self.model.layers()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(WEIGHTS_MAGIC);
        w.u32(WEIGHTS_VERSION);
        let c = self.config();
        w.u32(c.in_channels as u32);
        w.u32(c.tile_size as u32);
        w.u32(c.hidden_channels.len() as u32);
        for &h in &c.hidden_channels {
            w.u32(h as u32);
        }
        w.u32(c.extra_depth as u32);
        w.u32(c.latent_dim as u32);
        for v in [c.leaky_slope, c.bn_epsilon, c.bn_momentum, c.beta] {
            w.f64(v);
        }
        w.u64(self.meta.seed);
        w.u64(self.meta.training_steps);
        w.u32(self.layers().len() as u32);
        for layer in self.layers() {
            w.u16(layer.name.len() as u16);
            w.bytes(layer.name.as_bytes());
            w.u8(layer.kind.code());
            for d in layer.weights.shape() {
                w.u32(d as u32);
            }
            w.u32(layer.bias.len() as u32);
            w.u8(running(layer).is_some() as u8);
        }
        for layer in self.layers() {
            w.f32s(layer.weights.data());
            w.f32s(&layer.bias);
            if let Some(r) = running(layer) {
                w.f32s(&r.mean);
                w.f32s(&r.var);
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(Error::BadMagic {
                path: Default::default(),
                expected: "RVAE",
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Version {
                found: version,
                supported: WEIGHTS_VERSION,
            });
        }
        let in_channels = r.u32()? as usize;
        let tile_size = r.u32()? as usize;
        let hidden_count = r.u32()? as usize;
        if hidden_count > 64 {
            return Err(Error::Malformed(format!("implausible hidden layer count {hidden_count}")));
        }
        let hidden_channels = (0..hidden_count).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let config = ModelConfig {
            in_channels,
            tile_size,
            hidden_channels,
            extra_depth: r.u32()? as usize,
            latent_dim: r.u32()? as usize,
            leaky_slope: r.f64()?,
            bn_epsilon: r.f64()?,
            bn_momentum: r.f64()?,
            beta: r.f64()?,
        };
        let meta = BundleMeta {
            seed: r.u64()?,
            training_steps: r.u64()?,
        };
        let template = Vae::<f32>::zeroed(config.clone())?;
        let count = r.u32()? as usize;
        if count != template.layers().len() {
            return Err(Error::Malformed(format!(
                "shape table lists {count} layers, configuration implies {}",
                template.layers().len()
            )));
        }

        let mut table = Vec::with_capacity(count);
        for expected in template.layers() {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Malformed("layer name is not UTF-8".into()))?;
            let kind = LayerKind::from_code(r.u8()?).ok_or_else(|| Error::Malformed(format!("layer `{name}`: unknown kind")))?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let bias_len = r.u32()? as usize;
            let has_running = r.u8()? != 0;
            if name != expected.name || kind != expected.kind {
                return Err(Error::Malformed(format!(
                    "layer `{name}` found where `{}` was expected",
                    expected.name
                )));
            }
            if shape != expected.weights.shape() {
                return Err(Error::LayerShape {
                    layer: name,
                    expected: expected.weights.shape().to_vec(),
                    found: shape.to_vec(),
                });
            }
            if bias_len != expected.bias.len() {
                return Err(Error::LayerShape {
                    layer: name,
                    expected: vec![expected.bias.len()],
                    found: vec![bias_len],
                });
            }
            table.push((name, kind, shape, bias_len, has_running));
        }

        let mut layers = Vec::with_capacity(count);
        for ((name, kind, shape, bias_len, has_running), expected) in table.into_iter().zip(template.layers()) {
            let weights = Tensor::from_vec(shape, r.f32s(shape.iter().product())?)?;
            let bias = r.f32s(bias_len)?;
            let norm = match (&expected.norm, has_running) {
                (Some(n), true) => {
                    let c = bias_len;
                    Some(BatchNormState {
                        epsilon: n.epsilon,
                        momentum: n.momentum,
                        running: Some(RunningStats {
                            mean: r.f32s(c)?,
                            var: r.f32s(c)?,
                        }),
                    })
                }
                (Some(n), false) => Some(BatchNormState {
                    running: None,
                    ..n.clone()
                }),
                (None, false) => None,
                (None, true) => {
                    return Err(Error::Malformed(format!("layer `{name}` carries running statistics")));
                }
            };
            layers.push(LayerParams {
                name,
                kind,
                weights,
                bias,
                norm,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Malformed(format!("{} trailing bytes after payload", body.len() - r.pos)));
        }
        Ok(Self {
            model: Vae::from_layers(config, layers)?,
            format_version: version,
            meta,
        })
    }

    pub fn checksum(&self) -> u32 {
        let bytes = self.to_bytes();
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"))
    }
}

fn running(layer: &LayerParams<f32>) -> Option<&RunningStats<f32>> {
    layer.norm.as_ref().and_then(|n| n.running.as_ref())
}

pub fn save_weights(bundle: &WeightsBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bundle.to_bytes()).ctx(|| format!("writing {}", path.display()))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightsBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).ctx(|| format!("reading {}", path.display()))?;
    WeightsBundle::from_bytes(&bytes).map_err(|e| match e {
        Error::BadMagic { expected, .. } => Error::BadMagic {
            path: path.to_path_buf(),
            expected,
        },
        other => other,
    })
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn i64(&mut self, v: i64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.bytes(&v.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Malformed("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
