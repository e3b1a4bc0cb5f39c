//! Instruction features and importance scores.
//!
//! Frame and guidance embeddings of each instruction pass through their own
//! temporal encoder (one bidirectional attention block, mean-pooled); a two
//! layer MLP fuses them with the description embedding into one feature per
//! instruction. Importance of instruction `t` is the softmax over
//! `sum_{k != t} <C_t, C_k>`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::mgi::SetEmbedding;
use crate::numerics::{softmax, Activation, AttentionBlock, Init, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    Frame,
    Guidance,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Frame => "f",
            Stream::Guidance => "g",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub segment_len: usize,
    pub positional: bool,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        ConditioningConfig { embed_dim: 512, heads: 2, ffn_hidden: 512, segment_len: 20, positional: true }
    }
}

/// Which inputs reach the fusion MLP; disabled ones are replaced by zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub description: bool,
    pub frames: bool,
    pub guidance: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities { description: true, frames: true, guidance: true };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conditioner {
    pub cfg: ConditioningConfig,
    enc_f: AttentionBlock,
    enc_g: AttentionBlock,
}

pub const PREFIX: &str = "cond";

impl Conditioner {
    pub fn new(cfg: ConditioningConfig) -> Result<Conditioner> {
        if cfg.segment_len == 0 {
            return Err(config_err!("segment length must be at least 1"));
        }
        let block = |s: Stream| {
            AttentionBlock::new(format!("{PREFIX}.enc_{}", s.tag()), cfg.embed_dim, cfg.heads, cfg.ffn_hidden, false, Activation::Relu)
        };
        Ok(Conditioner { enc_f: block(Stream::Frame)?, enc_g: block(Stream::Guidance)?, cfg })
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, init: &mut Init<R>) -> Result<()> {
        let e = self.cfg.embed_dim;
        self.enc_f.init(store, init)?;
        self.enc_g.init(store, init)?;
        if self.cfg.positional {
            for s in [Stream::Frame, Stream::Guidance] {
                store.insert(format!("{PREFIX}.pos_{}", s.tag()), init.normal(&[self.cfg.segment_len, e], 0.02))?;
            }
        }
        // fan-in scaling keeps C at the scale of the unit-norm embeddings, so
        // differences between instruction sets reach the hypernets intact
        init.linear(store, &format!("{PREFIX}.fuse.fc"), 3 * e, e, (2.0 / (3 * e) as f64).sqrt())?;
        init.linear(store, &format!("{PREFIX}.fuse.out"), e, e, (1.0 / e as f64).sqrt())
    }

    pub fn param_count(&self) -> usize {
        let e = self.cfg.embed_dim;
        let pos = if self.cfg.positional { 2 * self.cfg.segment_len * e } else { 0 };
        self.enc_f.param_count() + self.enc_g.param_count() + pos + (3 * e * e + e) + (e * e + e)
    }

    fn check_width<T: Scalar>(&self, tape: &Tape<T>, x: Var, what: &str) -> Result<(usize, usize)> {
        let (r, c) = tape.value(x).dims2();
        if c != self.cfg.embed_dim {
            return Err(shape_err!("{what} width {c} differs from the configured {}", self.cfg.embed_dim));
        }
        Ok((r, c))
    }

    /// `x` stacks `n` runs of `m` step vectors (`n*m x e`); returns `n x e`.
    pub fn encode_temporal<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        m: usize,
        which: Stream,
    ) -> Result<Var> {
        let (rows, _) = self.check_width(tape, x, "temporal encoder input")?;
        if m == 0 || rows % m != 0 {
            return Err(shape_err!("{rows} rows do not split into runs of {m}"));
        }
        let mut h = x;
        if self.cfg.positional {
            if m > self.cfg.segment_len {
                return Err(shape_err!("run length {m} exceeds the positional table ({})", self.cfg.segment_len));
            }
            let table = tape.param(store, &format!("{PREFIX}.pos_{}", which.tag()));
            let table = if m < self.cfg.segment_len { tape.slice_rows(table, 0, m) } else { table };
            h = tape.add_cycled(h, table);
        }
        let block = match which {
            Stream::Frame => &self.enc_f,
            Stream::Guidance => &self.enc_g,
        };
        let h = block.forward(tape, store, h, m);
        Ok(tape.mean_blocks(h, m))
    }

    /// `concat(desc, f, g) -> linear -> ReLU -> linear`, row-wise.
    pub fn fuse<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, desc: Var, f: Var, g: Var) -> Result<Var> {
        let (n, _) = self.check_width(tape, desc, "description")?;
        for (v, what) in [(f, "frame feature"), (g, "guidance feature")] {
            let (r, _) = self.check_width(tape, v, what)?;
            if r != n {
                return Err(shape_err!("{what} has {r} rows, description has {n}"));
            }
        }
        let x = tape.concat_cols(&[desc, f, g]);
        let w = tape.param(store, &format!("{PREFIX}.fuse.fc.w"));
        let b = tape.param(store, &format!("{PREFIX}.fuse.fc.b"));
        let h = tape.linear(x, w, b);
        let h = tape.relu(h);
        let w = tape.param(store, &format!("{PREFIX}.fuse.out.w"));
        let b = tape.param(store, &format!("{PREFIX}.fuse.out.b"));
        Ok(tape.linear(h, w, b))
    }

    /// Fused features `C` (`n x e`) for a whole embedded set.
    pub fn features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        emb: &SetEmbedding,
        modalities: Modalities,
    ) -> Result<Var> {
        let (n, m, e) = (emb.n, emb.m, emb.dim());
        let zeros = |tape: &mut Tape<T>| tape.constant(Tensor::zeros(&[n, e]));
        let desc = if modalities.description { tape.constant(emb.desc.cast()) } else { zeros(tape) };
        let f = if modalities.frames {
            let x = tape.constant(emb.frames.cast());
            self.encode_temporal(tape, store, x, m, Stream::Frame)?
        } else {
            zeros(tape)
        };
        let g = if modalities.guidance {
            let x = tape.constant(emb.guidance.cast());
            self.encode_temporal(tape, store, x, m, Stream::Guidance)?
        } else {
            zeros(tape)
        };
        self.fuse(tape, store, desc, f, g)
    }

    /// Plain evaluation of [`Conditioner::features`].
    pub fn instruction_features<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        emb: &SetEmbedding,
        modalities: Modalities,
    ) -> Result<Vec<InstructionFeature>> {
        let mut tape = Tape::new();
        let c = self.features(&mut tape, store, emb, modalities)?;
        let t = tape.value(c);
        t.ensure_finite("instruction features")?;
        Ok((0..emb.n)
            .map(|i| InstructionFeature { c_vec: t.row(i).iter().map(|v| v.as_f64()).collect(), source_index: i })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionFeature {
    pub c_vec: Vec<f64>,
    pub source_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub s: Vec<f64>,
}

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Row sums of the Gram matrix without the self term.
pub fn raw_importance(features: &[InstructionFeature]) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..features.len())
        .map(|t| {
            features
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != t)
                .map(|(_, f)| dot(&features[t].c_vec, &f.c_vec))
                .sum()
        })
        .collect()
}

pub fn importance(features: &[InstructionFeature]) -> Result<ImportanceScores> {
    if features.is_empty() {
        return Err(config_err!("importance needs at least one instruction"));
    }
    Ok(ImportanceScores { s: softmax(&raw_importance(features))? })
}

pub fn uniform_importance(n: usize) -> Result<ImportanceScores> {
    if n == 0 {
        return Err(config_err!("uniform importance over zero instructions"));
    }
    Ok(ImportanceScores { s: vec![1.0 / n as f64; n] })
}

/// Importance as a `1 x n` row on the tape.
pub fn importance_tape<T: Scalar>(tape: &mut Tape<T>, c: Var) -> Var {
    let gram = tape.matmul_t(c, false, c, true);
    let raw = tape.off_diag_row_sum(gram);
    tape.softmax_rows(raw)
}

/// `1 x n` row of equal weights.
pub fn uniform_importance_tape<T: Scalar>(tape: &mut Tape<T>, n: usize) -> Var {
    tape.constant(Tensor::full(&[1, n], T::from_f64(1.0 / n as f64)))
}
