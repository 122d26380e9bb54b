//! Versioned parameter checkpoints.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "DRLTCKPT"
//! version    u32      1
//! dims       3 x u64  feature, encoding, hidden
//! seed       u64
//! tensors    4 x (u64 length, length x f64)   enc_weight, enc_bias, lstm_weight, lstm_bias
//! has_state  u8       0 or 1
//! [state]    next epoch u64, updates u64, episodes drawn u64, adam step u64,
//!            adam m (4 tensors), adam v (4 tensors), best return f64,
//!            epochs since best u64, history (u64 length, f64 values)
//! ```
//!
//! The JSON form carries parameters only and is meant for inspection.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Dims, ParamGrads, ParamStore};
use crate::trainer::{AdamState, Trainer, TrainerConfig};

const MAGIC: &[u8; 8] = b"DRLTCKPT";
const VERSION: u32 = 1;
const JSON_FORMAT: &str = "drlt-checkpoint";

/// Optimizer and loop state needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub next_epoch: usize,
    pub updates: u64,
    pub episodes_drawn: u64,
    pub adam: AdamState,
    pub best_return: f64,
    pub epochs_since_best: usize,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    format: String,
    version: u32,
    params: ParamStore,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &[f64]) {
        self.u64(t.len() as u64);
        t.iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Data("checkpoint size field overflows".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, name: &str, expected: usize) -> Result<Vec<f64>> {
        let len = self.usize()?;
        if len != expected {
            return Err(Error::dim(format!("checkpoint tensor {name}"), expected, len));
        }
        (0..len).map(|_| self.f64()).collect()
    }

    fn grads(&mut self, dims: Dims, prefix: &str) -> Result<ParamGrads> {
        let [a, b, c, d] = dims.tensor_lens();
        Ok(ParamGrads {
            enc_weight: self.tensor(&format!("{prefix}.enc_weight"), a)?,
            enc_bias: self.tensor(&format!("{prefix}.enc_bias"), b)?,
            lstm_weight: self.tensor(&format!("{prefix}.lstm_weight"), c)?,
            lstm_bias: self.tensor(&format!("{prefix}.lstm_bias"), d)?,
        })
    }
}

impl Checkpoint {
    pub fn params_only(params: ParamStore) -> Self {
        Checkpoint {
            params,
            training: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        let p = &self.params;
        w.u64(p.dims.feature as u64);
        w.u64(p.dims.encoding as u64);
        w.u64(p.dims.hidden as u64);
        w.u64(p.seed);
        p.tensors().iter().for_each(|t| w.tensor(t));
        match &self.training {
            None => w.0.push(0),
            Some(s) => {
                w.0.push(1);
                w.u64(s.next_epoch as u64);
                w.u64(s.updates);
                w.u64(s.episodes_drawn);
                w.u64(s.adam.step);
                s.adam.m.tensors().iter().for_each(|t| w.tensor(t));
                s.adam.v.tensors().iter().for_each(|t| w.tensor(t));
                w.f64(s.best_return);
                w.u64(s.epochs_since_best as u64);
                w.tensor(&s.history);
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let dims = Dims::new(r.usize()?, r.usize()?, r.usize()?);
        dims.validate()?;
        let seed = r.u64()?;
        let g = r.grads(dims, "params")?;
        let params = ParamStore {
            dims,
            seed,
            enc_weight: g.enc_weight,
            enc_bias: g.enc_bias,
            lstm_weight: g.lstm_weight,
            lstm_bias: g.lstm_bias,
        };
        let training = match r.u8()? {
            0 => None,
            1 => {
                let next_epoch = r.usize()?;
                let updates = r.u64()?;
                let episodes_drawn = r.u64()?;
                let step = r.u64()?;
                let m = r.grads(dims, "adam.m")?;
                let v = r.grads(dims, "adam.v")?;
                let best_return = r.f64()?;
                let epochs_since_best = r.usize()?;
                let hist_len = r.usize()?;
                let history = (0..hist_len).map(|_| r.f64()).collect::<Result<_>>()?;
                Some(TrainingState {
                    next_epoch,
                    updates,
                    episodes_drawn,
                    adam: AdamState { m, v, step },
                    best_return,
                    epochs_since_best,
                    history,
                })
            }
            other => return Err(Error::Data(format!("bad training-state flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after checkpoint",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint { params, training })
    }

    pub fn to_json(&self) -> String {
        let doc = JsonCheckpoint {
            format: JSON_FORMAT.into(),
            version: VERSION,
            params: self.params.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JsonCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("checkpoint json: {e}")))?;
        if doc.format != JSON_FORMAT || doc.version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint `{}` version {}",
                doc.format, doc.version
            )));
        }
        doc.params.check_shapes()?;
        Ok(Checkpoint::params_only(doc.params))
    }

    /// Writes JSON when the path ends in `.json`, binary otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_json(path) {
            self.to_json().into_bytes()
        } else {
            self.to_bytes()
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads either form, sniffing the magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{} is not a checkpoint", path.display())))?;
            Self::from_json(&text)
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            training: Some(TrainingState {
                next_epoch: self.epoch,
                updates: self.updates,
                episodes_drawn: self.episodes_drawn,
                adam: self.adam.clone(),
                best_return: self.best_return,
                epochs_since_best: self.epochs_since_best,
                history: self.history.clone(),
            }),
        }
    }

    /// Rebuilds a trainer from a checkpoint; without training state the optimizer starts fresh.
    pub fn resume(ckpt: Checkpoint, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        ckpt.params.check_shapes()?;
        let mut t = Trainer::from_params(ckpt.params, cfg);
        if let Some(s) = ckpt.training {
            t.epoch = s.next_epoch;
            t.updates = s.updates;
            t.episodes_drawn = s.episodes_drawn;
            t.adam = s.adam;
            t.best_return = s.best_return;
            t.epochs_since_best = s.epochs_since_best;
            t.history = s.history;
        }
        Ok(t)
    }
}
