//! Hypernetworks that turn instruction features into adapter matrices.
//!
//! Each role (down, up) has a bottleneck MLP `relu(C W_D + b_D) W_U + b_U`
//! producing one candidate matrix per instruction. Candidates are mixed by the
//! importance row into a single `(D_hat, U_hat)` pair, and the adapter applied
//! to an FFN input `z` is `relu(z D_hat) U_hat`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, shape_err, Result};
use crate::numerics::{Init, ParamStore, Scalar, Tape, Tensor, Var};

pub const PREFIX: &str = "hyper";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Down,
    Up,
}

impl Role {
    fn tag(self) -> &'static str {
        match self {
            Role::Down => "down",
            Role::Up => "up",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    /// Instruction feature width `d'`.
    pub input_dim: usize,
    /// Hypernet bottleneck `h`.
    pub hidden: usize,
    /// Adapter bottleneck `b`.
    pub bottleneck: usize,
    /// Width `d` of the model receiving the adapter.
    pub model_dim: usize,
    pub per_layer: bool,
    pub layers: usize,
    pub layer_embed_dim: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            input_dim: 512,
            hidden: 64,
            bottleneck: 32,
            model_dim: 128,
            per_layer: false,
            layers: 6,
            layer_embed_dim: 32,
        }
    }
}

impl HyperConfig {
    fn net_input(&self) -> usize {
        self.input_dim + if self.per_layer { self.layer_embed_dim } else { 0 }
    }

    /// Both hypernets plus the optional layer table.
    pub fn param_budget(&self) -> usize {
        let (i, h, bd) = (self.net_input(), self.hidden, self.bottleneck * self.model_dim);
        let weights = i * h * 2 + h * bd * 2;
        let biases = h * 2 + bd * 2;
        let layer = if self.per_layer { self.layers * self.layer_embed_dim } else { 0 };
        weights + biases + layer
    }
}

/// Tape handles of one fused adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub d_hat: Var,
    pub u_hat: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T> {
    pub d_hat: Tensor<T>,
    pub u_hat: Tensor<T>,
}

impl<T: Scalar> AdapterParams<T> {
    pub fn zeros(d: usize, b: usize) -> Self {
        AdapterParams { d_hat: Tensor::zeros(&[d, b]), u_hat: Tensor::zeros(&[b, d]) }
    }

    pub fn on_tape(&self, tape: &mut Tape<T>) -> AdapterVars {
        AdapterVars { d_hat: tape.constant(self.d_hat.clone()), u_hat: tape.constant(self.u_hat.clone()) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperAdapter {
    pub cfg: HyperConfig,
}

impl HyperAdapter {
    pub fn new(cfg: HyperConfig) -> Result<HyperAdapter> {
        if [cfg.input_dim, cfg.hidden, cfg.bottleneck, cfg.model_dim].contains(&0) {
            return Err(config_err!("hypernet widths must be positive: {cfg:?}"));
        }
        if cfg.per_layer && (cfg.layers == 0 || cfg.layer_embed_dim == 0) {
            return Err(config_err!("per-layer mode needs a positive layer count and layer embedding width"));
        }
        Ok(HyperAdapter { cfg })
    }

    fn name(role: Role, leaf: &str) -> String {
        format!("{PREFIX}.{}.{leaf}", role.tag())
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, init: &mut Init<R>) -> Result<()> {
        let c = &self.cfg;
        let out = c.bottleneck * c.model_dim;
        for role in [Role::Down, Role::Up] {
            init.linear(store, &Self::name(role, "fc"), c.net_input(), c.hidden, 0.02)?;
            // U_hat starts at zero so the adapter adds nothing at step 0; D_hat
            // stays random so gradients can reach the up-role hypernet
            init.linear(store, &Self::name(role, "out"), c.hidden, out, 0.02)?;
            if role == Role::Up {
                store.replace(&Self::name(role, "out.w"), Tensor::zeros(&[c.hidden, out]))?;
            }
        }
        if c.per_layer {
            store.insert(format!("{PREFIX}.layer_emb"), init.normal(&[c.layers, c.layer_embed_dim], 0.02))?;
        }
        Ok(())
    }

    /// Compares the stored parameter count with the closed-form budget.
    pub fn check_budget<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let got = store.count_with_prefix(&format!("{PREFIX}."));
        let want = self.cfg.param_budget();
        if got != want {
            return Err(contract_err!("hypernet parameters {got} differ from the budget {want}"));
        }
        Ok(())
    }

    fn check_features<T: Scalar>(&self, tape: &Tape<T>, c: Var) -> Result<usize> {
        let (n, w) = tape.value(c).dims2();
        if w != self.cfg.input_dim {
            let c = &self.cfg;
            return Err(config_err!(
                "feature width {w} does not fit the hypernets (d'={}, h={}, b={}, d={})",
                c.input_dim,
                c.hidden,
                c.bottleneck,
                c.model_dim
            ));
        }
        Ok(n)
    }

    fn net_input<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, c: Var, layer: Option<usize>) -> Result<Var> {
        let n = self.check_features(tape, c)?;
        match (self.cfg.per_layer, layer) {
            (false, _) => Ok(c),
            (true, Some(l)) if l < self.cfg.layers => {
                let table = tape.param(store, &format!("{PREFIX}.layer_emb"));
                let rows = tape.gather_rows(table, &vec![l; n]);
                Ok(tape.concat_cols(&[c, rows]))
            }
            (true, _) => Err(contract_err!("per-layer hypernets need a layer index below {}", self.cfg.layers)),
        }
    }

    /// Candidate matrices for every instruction, flattened: `n x (d*b)`.
    pub fn generate_candidates<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        c: Var,
        role: Role,
        layer: Option<usize>,
    ) -> Result<Var> {
        let x = self.net_input(tape, store, c, layer)?;
        let w = tape.param(store, &Self::name(role, "fc.w"));
        let b = tape.param(store, &Self::name(role, "fc.b"));
        let h = tape.linear(x, w, b);
        let h = tape.relu(h);
        let w = tape.param(store, &Self::name(role, "out.w"));
        let b = tape.param(store, &Self::name(role, "out.b"));
        Ok(tape.linear(h, w, b))
    }

    /// Importance-weighted sum of candidates reshaped to the role's matrix.
    pub fn fuse_candidates<T: Scalar>(&self, tape: &mut Tape<T>, cands: Var, scores: Var, role: Role) -> Result<Var> {
        let (n, _) = tape.value(cands).dims2();
        let (one, k) = tape.value(scores).dims2();
        if one != 1 || k != n {
            return Err(contract_err!("{k} scores for {n} candidates"));
        }
        let fused = tape.matmul(scores, cands);
        let (d, b) = (self.cfg.model_dim, self.cfg.bottleneck);
        Ok(match role {
            Role::Down => tape.reshape(fused, d, b),
            Role::Up => tape.reshape(fused, b, d),
        })
    }

    /// Full generator: features and scores to one adapter (for `layer` in per-layer mode).
    pub fn adapter<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        c: Var,
        scores: Var,
        layer: Option<usize>,
    ) -> Result<AdapterVars> {
        let dc = self.generate_candidates(tape, store, c, Role::Down, layer)?;
        let uc = self.generate_candidates(tape, store, c, Role::Up, layer)?;
        Ok(AdapterVars {
            d_hat: self.fuse_candidates(tape, dc, scores, Role::Down)?,
            u_hat: self.fuse_candidates(tape, uc, scores, Role::Up)?,
        })
    }

    /// One adapter per DT layer; the shared mode repeats a single pair.
    pub fn adapters<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        c: Var,
        scores: Var,
        layers: usize,
    ) -> Result<Vec<AdapterVars>> {
        if self.cfg.per_layer {
            if layers != self.cfg.layers {
                return Err(config_err!("hypernets built for {} layers, model has {layers}", self.cfg.layers));
            }
            (0..layers).map(|l| self.adapter(tape, store, c, scores, Some(l))).collect()
        } else {
            let a = self.adapter(tape, store, c, scores, None)?;
            Ok(vec![a; layers])
        }
    }
}

/// `relu(z D_hat) U_hat` for every row of `z`.
pub fn adapter_forward_tape<T: Scalar>(tape: &mut Tape<T>, z: Var, p: AdapterVars) -> Var {
    let h = tape.matmul(z, p.d_hat);
    let h = tape.relu(h);
    tape.matmul(h, p.u_hat)
}

/// Plain candidate generation: one `(D_t, U_t)` per feature row.
pub fn generate_candidates<T: Scalar>(
    ha: &HyperAdapter,
    store: &ParamStore<T>,
    features: &Tensor<T>,
    layer: Option<usize>,
) -> Result<Vec<AdapterParams<T>>> {
    let mut tape = Tape::new();
    let c = tape.constant(features.clone());
    let (d, b) = (ha.cfg.model_dim, ha.cfg.bottleneck);
    let dc = ha.generate_candidates(&mut tape, store, c, Role::Down, layer)?;
    let uc = ha.generate_candidates(&mut tape, store, c, Role::Up, layer)?;
    let (dc, uc) = (tape.value(dc), tape.value(uc));
    (0..features.dims2().0)
        .map(|i| {
            Ok(AdapterParams {
                d_hat: Tensor::new(vec![d, b], dc.row(i).to_vec())?,
                u_hat: Tensor::new(vec![b, d], uc.row(i).to_vec())?,
            })
        })
        .collect()
}

/// Entry-wise `sum_t s_t (D_t, U_t)`.
pub fn fuse_candidates<T: Scalar>(cands: &[AdapterParams<T>], scores: &[f64]) -> Result<AdapterParams<T>> {
    if cands.len() != scores.len() || cands.is_empty() {
        return Err(contract_err!("{} scores for {} candidates", scores.len(), cands.len()));
    }
    let mut out = AdapterParams { d_hat: Tensor::zeros(cands[0].d_hat.shape()), u_hat: Tensor::zeros(cands[0].u_hat.shape()) };
    for (c, &s) in cands.iter().zip(scores) {
        if c.d_hat.shape() != out.d_hat.shape() || c.u_hat.shape() != out.u_hat.shape() {
            return Err(shape_err!("candidate shapes differ"));
        }
        let s = T::from_f64(s);
        for (o, &v) in out.d_hat.data_mut().iter_mut().zip(c.d_hat.data()) {
            *o = *o + s * v;
        }
        for (o, &v) in out.u_hat.data_mut().iter_mut().zip(c.u_hat.data()) {
            *o = *o + s * v;
        }
    }
    Ok(out)
}

/// Plain adapter on a single vector.
pub fn adapter_forward<T: Scalar>(z: &[T], p: &AdapterParams<T>) -> Result<Vec<T>> {
    let (d, b) = p.d_hat.dims2();
    if z.len() != d || p.u_hat.dims2() != (b, d) {
        return Err(shape_err!("adapter expects width {d}, got {}", z.len()));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::new(vec![1, d], z.to_vec())?);
    let vars = p.on_tape(&mut tape);
    let y = adapter_forward_tape(&mut tape, zv, vars);
    Ok(tape.value(y).data().to_vec())
}

#[cfg(test)]
mod tests;
