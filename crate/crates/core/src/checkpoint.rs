//! Resumable training state on disk.
//!
//! Layout after the `MTLC` header: seed `u64`, next iteration `u64`, a
//! metadata string, the parameter table, then one Adam state per group.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::ParamId;
use crate::error::{FormatError, TrainError};
use crate::format::{Reader, Writer};
use crate::model::{Group, Param, ParamStore};
use crate::optim::{AdamConfig, AdamState, Moments};
use crate::trainer::{MultiTaskModel, Optimizers, Session};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTLC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub next_iter: u64,
    /// Free-form text, e.g. the experiment config as JSON.
    pub metadata: String,
    pub store: ParamStore,
    pub optim: Optimizers,
}

impl Checkpoint {
    pub fn of(session: &Session, metadata: impl Into<String>) -> Self {
        Checkpoint {
            seed: session.seed,
            next_iter: session.next_iter,
            metadata: metadata.into(),
            store: session.model.store.clone(),
            optim: session.optim.clone(),
        }
    }

    /// Installs the saved parameters into a freshly built model with the same
    /// architecture and returns the session to continue from.
    pub fn restore(self, mut model: MultiTaskModel) -> Result<Session, TrainError> {
        let fresh = &model.store;
        let same_layout = fresh.len() == self.store.len()
            && fresh.iter().zip(self.store.iter()).all(|((ia, a), (ib, b))| {
                ia == ib && a.group == b.group && a.name == b.name && a.value.shape() == b.value.shape()
            });
        if !same_layout {
            return Err(TrainError::Config("checkpoint parameters do not match the model architecture".into()));
        }
        if self.optim.decoders.len() != model.decoders.len() {
            return Err(TrainError::Config(format!(
                "checkpoint has {} decoder states, model has {} decoders",
                self.optim.decoders.len(),
                model.decoders.len()
            )));
        }
        model.store = self.store;
        Ok(Session { model, optim: self.optim, seed: self.seed, next_iter: self.next_iter })
    }
}

fn write_group(w: &mut Writer, g: Group) {
    match g {
        Group::Encoder => {
            w.u8(0);
            w.u32(0);
        }
        Group::Decoder(i) => {
            w.u8(1);
            w.u32(u32::try_from(i).expect("decoder index fits in u32"));
        }
    }
}

fn read_group(r: &mut Reader) -> Result<Group, FormatError> {
    let tag = r.u8()?;
    let idx = r.u32()? as usize;
    match tag {
        0 => Ok(Group::Encoder),
        1 => Ok(Group::Decoder(idx)),
        t => Err(r.malformed(format!("unknown group tag {t}"))),
    }
}

fn write_state(w: &mut Writer, group: Group, st: &AdamState) {
    write_group(w, group);
    w.u64(st.t);
    for v in [st.config.lr, st.config.beta1, st.config.beta2, st.config.eps] {
        w.f64(v);
    }
    w.u32(st.moments.len() as u32);
    for (id, m) in &st.moments {
        w.u32(id.0);
        w.tensor_f64(&m.m);
        w.tensor_f64(&m.v);
    }
}

fn read_state(r: &mut Reader) -> Result<(Group, AdamState), FormatError> {
    let group = read_group(r)?;
    let t = r.u64()?;
    let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
    let n = r.u32()?;
    let mut moments = BTreeMap::new();
    for _ in 0..n {
        let id = ParamId(r.u32()?);
        let (m, v) = (r.tensor_f64()?, r.tensor_f64()?);
        if m.shape() != v.shape() {
            return Err(r.malformed("moment shapes differ"));
        }
        if moments.insert(id, Moments { m, v }).is_some() {
            return Err(r.malformed(format!("duplicate moment entry {id:?}")));
        }
    }
    Ok((group, AdamState { config, t, moments }))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.u64(ck.seed);
    w.u64(ck.next_iter);
    w.str(&ck.metadata);
    w.u32(ck.store.len() as u32);
    for (id, p) in ck.store.iter() {
        w.u32(id.0);
        write_group(&mut w, p.group);
        w.str(&p.name);
        w.tensor_f64(&p.value);
    }
    w.u32(1 + ck.optim.decoders.len() as u32);
    write_state(&mut w, Group::Encoder, &ck.optim.encoder);
    for (i, st) in ck.optim.decoders.iter().enumerate() {
        write_state(&mut w, Group::Decoder(i), st);
    }
    w.finish()
}

/// Parses and checks a checkpoint in full before returning anything.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let seed = r.u64()?;
    let next_iter = r.u64()?;
    let metadata = r.str()?;
    let n = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let id = ParamId(r.u32()?);
        let group = read_group(&mut r)?;
        let name = r.str()?;
        let value = r.tensor_f64()?;
        if store.get(id).is_some() {
            return Err(r.malformed(format!("duplicate parameter {id:?}")));
        }
        store.insert(id, Param { name, group, value });
    }
    let groups = r.u32()? as usize;
    if groups == 0 {
        return Err(r.malformed("missing encoder optimizer state"));
    }
    let mut states = Vec::with_capacity(groups);
    for expected in std::iter::once(Group::Encoder).chain((0..groups - 1).map(Group::Decoder)) {
        let at = r.offset();
        let (group, st) = read_state(&mut r)?;
        if group != expected {
            return Err(FormatError::Malformed { offset: at, reason: format!("expected {expected:?} state, found {group:?}") });
        }
        for (id, m) in &st.moments {
            match store.param(*id) {
                Some(p) if p.group == group && p.value.shape() == m.m.shape() => {}
                _ => {
                    return Err(FormatError::Malformed {
                        offset: at,
                        reason: format!("moment for {id:?} does not match a {group:?} parameter"),
                    })
                }
            }
        }
        states.push(st);
    }
    r.finish()?;
    let mut states = states.into_iter();
    let encoder = states.next().expect("groups ≥ 1");
    let optim = Optimizers { encoder, decoders: states.collect() };
    Ok(Checkpoint { seed, next_iter, metadata, store, optim })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), FormatError> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    decode_checkpoint(&std::fs::read(path)?)
}
