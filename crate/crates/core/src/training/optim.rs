use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerParams, ParamGrads};
use crate::tensor::Scalar;
use crate::weights::{Reader, Writer};

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"RVOS";
pub const OPTIMIZER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerParams {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
        }
    }
}

/// First/second moment buffers, one flat vector per layer covering its
/// weights followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub params: OptimizerParams,
    pub step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new<T: Scalar>(params: OptimizerParams, layers: &[LayerParams<T>]) -> Self {
        let zeros = |l: &LayerParams<T>| vec![0.0f32; l.parameter_count()];
        let first = layers.iter().map(zeros).collect();
        let second = match params.kind {
            OptimizerKind::Adam => layers.iter().map(zeros).collect(),
            OptimizerKind::SgdMomentum => Vec::new(),
        };
        Self {
            params,
            step: 0,
            first,
            second,
        }
    }

    pub fn apply<T: Scalar>(&mut self, layers: &mut [LayerParams<T>], grads: &[ParamGrads<T>]) {
        self.step += 1;
        let p = self.params;
        let lr = p.learning_rate;
        let (bc1, bc2) = (1.0 - p.beta1.powi(self.step as i32), 1.0 - p.beta2.powi(self.step as i32));
        for (li, (layer, grad)) in layers.iter_mut().zip(grads).enumerate() {
            let nw = layer.weights.len();
            let values = layer.weights.data_mut().iter_mut().chain(layer.bias.iter_mut());
            let gs = grad.weights.data().iter().chain(&grad.bias);
            for (i, (w, &g)) in values.zip(gs).enumerate() {
                let g = g.as_f64();
                let m = &mut self.first[li][i];
                let update = match p.kind {
                    OptimizerKind::Adam => {
                        let v = &mut self.second[li][i];
                        *m = (p.beta1 * *m as f64 + (1.0 - p.beta1) * g) as f32;
                        *v = (p.beta2 * *v as f64 + (1.0 - p.beta2) * g * g) as f32;
                        let m_hat = *m as f64 / bc1;
                        let v_hat = *v as f64 / bc2;
                        lr * m_hat / (v_hat.sqrt() + p.epsilon)
                    }
                    OptimizerKind::SgdMomentum => {
                        *m = (p.momentum * *m as f64 + g) as f32;
                        lr * *m as f64
                    }
                };
                *w = T::lit(w.as_f64() - update);
            }
            debug_assert_eq!(nw + layer.bias.len(), self.first[li].len());
        }
    }

    /// `RVOS` sidecar: magic, version, kind, step, hyperparameters, moment
    /// buffers, CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(OPTIMIZER_MAGIC);
        w.u32(OPTIMIZER_VERSION);
        w.u8(match self.params.kind {
            OptimizerKind::SgdMomentum => 0,
            OptimizerKind::Adam => 1,
        });
        w.u64(self.step);
        for v in [
            self.params.learning_rate,
            self.params.beta1,
            self.params.beta2,
            self.params.epsilon,
            self.params.momentum,
        ] {
            w.f64(v);
        }
        for buffers in [&self.first, &self.second] {
            w.u32(buffers.len() as u32);
            for b in buffers {
                w.u32(b.len() as u32);
                w.f32s(b);
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != OPTIMIZER_MAGIC {
            return Err(Error::BadMagic {
                path: Default::default(),
                expected: "RVOS",
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
        if version != OPTIMIZER_VERSION {
            return Err(Error::Version {
                found: version,
                supported: OPTIMIZER_VERSION,
            });
        }
        let kind = match r.u8()? {
            0 => OptimizerKind::SgdMomentum,
            1 => OptimizerKind::Adam,
            k => return Err(Error::Malformed(format!("unknown optimizer kind {k}"))),
        };
        let step = r.u64()?;
        let params = OptimizerParams {
            kind,
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
            momentum: r.f64()?,
        };
        let read_buffers = |r: &mut Reader| -> Result<Vec<Vec<f32>>> {
            let n = r.u32()? as usize;
            (0..n)
                .map(|_| {
                    let len = r.u32()? as usize;
                    r.f32s(len)
                })
                .collect()
        };
        let first = read_buffers(&mut r)?;
        let second = read_buffers(&mut r)?;
        Ok(Self {
            params,
            step,
            first,
            second,
        })
    }
}
