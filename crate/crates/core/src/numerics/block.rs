use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

use super::params::Init;
use super::{ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
}

/// One pre-norm transformer block: `h = x + Attn(LN(x))`, `y = h + FFN(LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub causal: bool,
    pub activation: Activation,
}

/// Extra term added next to the FFN output, fed the same normalised input.
pub type SideBranch<'a, T> = &'a mut dyn FnMut(&mut Tape<T>, Var) -> Var;

impl AttentionBlock {
    pub fn new(
        prefix: impl Into<String>,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        causal: bool,
        activation: Activation,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("width {dim} is not divisible by {heads} heads"));
        }
        if ffn_hidden == 0 {
            return Err(config_err!("FFN width must be positive"));
        }
        Ok(AttentionBlock { prefix: prefix.into(), dim, heads, ffn_hidden, causal, activation })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, init: &mut Init<R>) -> Result<()> {
        let d = self.dim;
        init.layer_norm(store, &self.name("ln1"), d)?;
        for proj in ["attn.q", "attn.v", "attn.o"] {
            init.linear(store, &self.name(proj), d, d, 0.02)?;
        }
        // a key bias only shifts every score in a row equally, so it is left out
        store.insert(self.name("attn.k.w"), init.normal(&[d, d], 0.02))?;
        init.layer_norm(store, &self.name("ln2"), d)?;
        init.linear(store, &self.name("ffn.fc"), d, self.ffn_hidden, 0.02)?;
        init.linear(store, &self.name("ffn.proj"), self.ffn_hidden, d, 0.02)
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim;
        2 * 2 * d + 4 * d * d + 3 * d + (d * self.ffn_hidden + self.ffn_hidden) + (self.ffn_hidden * d + d)
    }

    fn lin<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, name: &str) -> Var {
        let w = tape.param(store, &self.name(&format!("{name}.w")));
        let b = tape.param(store, &self.name(&format!("{name}.b")));
        tape.linear(x, w, b)
    }

    fn ln<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, name: &str) -> Var {
        let g = tape.param(store, &self.name(&format!("{name}.g")));
        let b = tape.param(store, &self.name(&format!("{name}.b")));
        tape.layer_norm(x, g, b)
    }

    /// Applies the block to rows of `x`, attending within each run of `block` rows.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, block: usize) -> Var {
        self.forward_with(tape, store, x, block, None)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        block: usize,
        side: Option<SideBranch<'_, T>>,
    ) -> Var {
        let a_in = self.ln(tape, store, x, "ln1");
        let q = self.lin(tape, store, a_in, "attn.q");
        let wk = tape.param(store, &self.name("attn.k.w"));
        let k = tape.matmul(a_in, wk);
        let v = self.lin(tape, store, a_in, "attn.v");
        let att = tape.attention(q, k, v, self.heads, block, self.causal);
        let att = self.lin(tape, store, att, "attn.o");
        let att = tape.dropout(att);
        let h = tape.add(x, att);

        let f_in = self.ln(tape, store, h, "ln2");
        let f = self.lin(tape, store, f_in, "ffn.fc");
        let f = match self.activation {
            Activation::Relu => tape.relu(f),
            Activation::Gelu => tape.gelu(f),
        };
        let f = self.lin(tape, store, f, "ffn.proj");
        let f = tape.dropout(f);
        let y = tape.add(h, f);
        match side {
            Some(branch) => {
                let s = branch(tape, f_in);
                tape.add(y, s)
            }
            None => y,
        }
    }
}

/// Runs one block over a `T x D` sequence outside of training.
pub fn attention_block<T: Scalar>(
    seq: &Tensor<T>,
    block: &AttentionBlock,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let (t, d) = match seq.shape() {
        [t, d] => (*t, *d),
        s => return Err(shape_err!("attention_block expects a T x D matrix, got {s:?}")),
    };
    if d != block.dim {
        return Err(shape_err!("sequence width {d} differs from block width {}", block.dim));
    }
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let y = block.forward(&mut tape, store, x, t);
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(causal: bool) -> (AttentionBlock, ParamStore<f64>) {
        let blk = AttentionBlock::new("b", 8, 2, 16, causal, Activation::Gelu).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        blk.init(&mut store, &mut Init { rng: &mut rng }).unwrap();
        // make the attention pattern non-trivial
        for name in ["b.attn.q.w", "b.attn.k.w", "b.attn.v.w", "b.attn.o.w", "b.ffn.fc.w", "b.ffn.proj.w"] {
            for v in store.get_mut(name).unwrap().data_mut() {
                *v *= 25.0;
            }
        }
        (blk, store)
    }

    fn seq(t: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![t, 8], data).unwrap()
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(matches!(
            AttentionBlock::new("b", 10, 4, 8, false, Activation::Relu),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn single_position_keeps_shape() {
        for causal in [false, true] {
            let (blk, store) = setup(causal);
            let y = attention_block(&seq(1, 1), &blk, &store).unwrap();
            assert_eq!(y.shape(), &[1, 8]);
        }
    }

    #[test]
    fn causal_outputs_ignore_future_positions() {
        let (blk, store) = setup(true);
        let a = seq(6, 2);
        let mut b = a.clone();
        for v in &mut b.data_mut()[4 * 8..] {
            *v += 0.7;
        }
        let ya = attention_block(&a, &blk, &store).unwrap();
        let yb = attention_block(&b, &blk, &store).unwrap();
        assert_eq!(&ya.data()[..4 * 8], &yb.data()[..4 * 8]);
        assert_ne!(&ya.data()[4 * 8..], &yb.data()[4 * 8..]);
    }

    #[test]
    fn zero_projections_give_identity() {
        let (blk, mut store) = setup(false);
        let names: Vec<String> = store
            .names()
            .filter(|n| n.contains("attn.") || n.contains("ffn."))
            .map(String::from)
            .collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = seq(5, 9);
        assert_eq!(attention_block(&x, &blk, &store).unwrap(), x);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let (blk, store) = setup(false);
        let bad = Tensor::<f64>::zeros(&[3, 4]);
        assert!(matches!(attention_block(&bad, &blk, &store), Err(crate::Error::Shape(_))));
    }
}
