//! Binary training checkpoints: configuration, schedule position, optimizer
//! moments and parameters, sufficient to continue a run bit for bit.
//!
//! Layout (little endian): magic `CPGNNCKP`, format version `u32`, element
//! size `u32`, then length-prefixed sections: config digest, config text,
//! schedule state, optimizer, parameters, optional best parameters.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use cpgnn_autodiff::{Real, Tensor};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::kg::KnowledgeGraph;
use crate::model::{ModelError, ModelParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::proximity::ProximityGraph;
use crate::train::{TrainError, TrainState, Trainer};

const MAGIC: &[u8; 8] = b"CPGNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint stores {found}-byte elements, this build uses {expected}")]
    ElementSize { expected: usize, found: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

type Named = Vec<(String, Tensor)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub config_text: String,
    pub state: TrainState,
    pub optimizer: Optimizer,
    pub params: Named,
    pub best: Option<Named>,
}

fn named(p: &ModelParams) -> Named {
    p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect()
}

impl Checkpoint {
    /// Snapshot of a trainer; the stored wall time includes the current session.
    pub fn capture(trainer: &Trainer<'_>, config: &ExperimentConfig) -> Self {
        let mut state = trainer.state().clone();
        state.wall_time = trainer.wall_time();
        Self {
            config_digest: config.digest(),
            config_text: config.to_text(),
            state,
            optimizer: trainer.optimizer().clone(),
            params: named(trainer.params()),
            best: trainer.best_params().map(named),
        }
    }

    /// Rebuilds the trainer. `config` must be the configuration the
    /// checkpoint was written with.
    pub fn into_trainer<'a>(
        self,
        kg: &'a KnowledgeGraph,
        proximity: Option<&'a ProximityGraph>,
        config: &ExperimentConfig,
    ) -> Result<Trainer<'a>, CheckpointError> {
        let expected = config.digest();
        if expected != self.config_digest {
            return Err(CheckpointError::ConfigMismatch {
                expected,
                found: self.config_digest,
            });
        }
        let (enc, dec) = (config.encoder_config(), config.decoder_config());
        let load = |tensors: Named| -> Result<ModelParams, CheckpointError> {
            let mut p = ModelParams::init(kg.num_entities(), kg.num_relations(), &enc, &dec, 0)?;
            p.load_tensors(tensors)?;
            Ok(p)
        };
        let params = load(self.params)?;
        let best = self.best.map(load).transpose()?;
        if self.optimizer.kind == OptimizerKind::Adam
            && (self.optimizer.m.len() != params.tensors().len()
                || self.optimizer.m.iter().zip(params.tensors()).any(|(m, t)| m.len() != t.numel()))
        {
            return Err(CheckpointError::Corrupt("optimizer moments do not match parameters".into()));
        }
        let trainer = Trainer::from_parts(
            kg,
            proximity,
            enc.clone(),
            dec.clone(),
            config.train_config(),
            params,
            self.optimizer,
            self.state,
        )?;
        Ok(trainer.with_best(best))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        put_u32(w, std::mem::size_of::<Real>() as u32)?;
        put_str(w, &self.config_digest)?;
        put_str(w, &self.config_text)?;
        let st = &self.state;
        for x in [st.seed, st.epoch, st.batch_in_epoch, st.global_step] {
            put_u64(w, x)?;
        }
        for x in [st.epoch_loss_sum, st.wall_time] {
            put_u64(w, x.to_bits())?;
        }
        put_opt(w, st.best_valid_mrr.map(f64::to_bits))?;
        put_opt(w, st.best_epoch)?;

        let o = &self.optimizer;
        put_str(w, &o.kind.to_string())?;
        for x in [o.lr, o.beta1, o.beta2, o.eps] {
            put_real(w, x)?;
        }
        put_u64(w, o.t)?;
        for moments in [&o.m, &o.v] {
            put_u64(w, moments.len() as u64)?;
            for buf in moments {
                put_reals(w, buf)?;
            }
        }

        put_named(w, &self.params)?;
        match &self.best {
            Some(b) => {
                w.write_all(&[1])?;
                put_named(w, b)?;
            }
            None => w.write_all(&[0])?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let elem = get_u32(r)? as usize;
        if elem != std::mem::size_of::<Real>() {
            return Err(CheckpointError::ElementSize {
                expected: std::mem::size_of::<Real>(),
                found: elem,
            });
        }
        let config_digest = get_str(r)?;
        let config_text = get_str(r)?;
        let state = TrainState {
            seed: get_u64(r)?,
            epoch: get_u64(r)?,
            batch_in_epoch: get_u64(r)?,
            global_step: get_u64(r)?,
            epoch_loss_sum: f64::from_bits(get_u64(r)?),
            wall_time: f64::from_bits(get_u64(r)?),
            best_valid_mrr: get_opt(r)?.map(f64::from_bits),
            best_epoch: get_opt(r)?,
        };

        let kind: OptimizerKind = get_str(r)?.parse().map_err(CheckpointError::Corrupt)?;
        let (lr, beta1, beta2, eps) = (get_real(r)?, get_real(r)?, get_real(r)?, get_real(r)?);
        let t = get_u64(r)?;
        let mut moments = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = get_len(r)?;
            moments.push((0..n).map(|_| get_reals(r)).collect::<Result<Vec<_>, _>>()?);
        }
        let v = moments.pop().expect("two moment sets");
        let m = moments.pop().expect("two moment sets");
        let optimizer = Optimizer {
            kind,
            lr,
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        };

        let params = get_named(r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let best = match flag[0] {
            0 => None,
            1 => Some(get_named(r)?),
            f => return Err(CheckpointError::Corrupt(format!("best-parameter flag {f}"))),
        };
        Ok(Self {
            config_digest,
            config_text,
            state,
            optimizer,
            params,
            best,
        })
    }

    /// Writes through a temporary sibling file and renames it into place, so
    /// an interrupted save never leaves a truncated checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn put_u32(w: &mut impl Write, x: u32) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_u64(w: &mut impl Write, x: u64) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_opt(w: &mut impl Write, x: Option<u64>) -> io::Result<()> {
    w.write_all(&[x.is_some() as u8])?;
    put_u64(w, x.unwrap_or(0))
}

fn get_opt(r: &mut impl Read) -> Result<Option<u64>, CheckpointError> {
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let x = get_u64(r)?;
    match flag[0] {
        0 => Ok(None),
        1 => Ok(Some(x)),
        f => Err(CheckpointError::Corrupt(format!("option flag {f}"))),
    }
}

fn put_real(w: &mut impl Write, x: Real) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn put_reals(w: &mut impl Write, xs: &[Real]) -> io::Result<()> {
    put_u64(w, xs.len() as u64)?;
    xs.iter().try_for_each(|&x| put_real(w, x))
}

fn put_named(w: &mut impl Write, named: &[(String, Tensor)]) -> io::Result<()> {
    put_u64(w, named.len() as u64)?;
    for (name, t) in named {
        put_str(w, name)?;
        put_u64(w, t.ndim() as u64)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        put_reals(w, t.data())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_real(r: &mut impl Read) -> io::Result<Real> {
    let mut b = [0u8; std::mem::size_of::<Real>()];
    r.read_exact(&mut b)?;
    Ok(Real::from_le_bytes(b))
}

/// Reads a length and rejects values no sane checkpoint would contain.
fn get_len(r: &mut impl Read) -> Result<usize, CheckpointError> {
    let n = get_u64(r)?;
    if n > 1 << 40 {
        return Err(CheckpointError::Corrupt(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn get_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let n = get_len(r)?;
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(CheckpointError::Io(io::ErrorKind::UnexpectedEof.into()));
    }
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

fn get_reals(r: &mut impl Read) -> Result<Vec<Real>, CheckpointError> {
    let n = get_len(r)?;
    (0..n).map(|_| get_real(r).map_err(CheckpointError::from)).collect()
}

fn get_named(r: &mut impl Read) -> Result<Named, CheckpointError> {
    let n = get_len(r)?;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = get_str(r)?;
        let ndim = get_len(r)?;
        let shape = (0..ndim).map(|_| get_len(r)).collect::<Result<Vec<_>, _>>()?;
        let data = get_reals(r)?;
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}
