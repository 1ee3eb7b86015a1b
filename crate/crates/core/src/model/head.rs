use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kaiming_uniform, zero_bias, Float, Graph, ParamSet, Var};

/// Two-layer ReLU network `relu(x W0 + b0) W1 + b1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpHead {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl MlpHead {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self { name: name.into(), in_dim, hidden, out_dim }
    }

    pub fn init_params<F: Float, R: Rng + ?Sized>(&self, ps: &mut ParamSet<F>, rng: &mut R) -> Result<()> {
        let n = &self.name;
        ps.insert(format!("{n}.0.weight"), kaiming_uniform(&[self.in_dim, self.hidden], self.in_dim, rng)?, true)?;
        ps.insert(format!("{n}.0.bias"), zero_bias(&[self.hidden]), false)?;
        ps.insert(format!("{n}.1.weight"), kaiming_uniform(&[self.hidden, self.out_dim], self.hidden, rng)?, true)?;
        ps.insert(format!("{n}.1.bias"), zero_bias(&[self.out_dim]), false)
    }

    /// `[.., in_dim] -> [.., out_dim]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var) -> Result<Var> {
        let n = &self.name;
        let w0 = g.param(ps, &format!("{n}.0.weight"))?;
        let b0 = g.param(ps, &format!("{n}.0.bias"))?;
        let h = g.linear(x, w0, b0)?;
        let h = g.relu(h)?;
        let w1 = g.param(ps, &format!("{n}.1.weight"))?;
        let b1 = g.param(ps, &format!("{n}.1.bias"))?;
        g.linear(h, w1, b1)
    }
}

/// One head per feature column, reading that column's output token.
///
/// Numerical heads have one output each and are stored stacked
/// (`[n_num, d, hidden]`, ...) so all of them run as one batched product.
/// Categorical column `j` gets its own head with `cat_cardinalities[j]` logits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnHeads {
    pub prefix: String,
    pub n_num: usize,
    pub cat_cardinalities: Vec<usize>,
    pub d: usize,
    pub hidden: usize,
}

/// Outputs of [`ColumnHeads::forward`].
pub struct ColumnPredictions {
    /// `[n_num, B, 1]`, absent for tables without numerical columns.
    pub num: Option<Var>,
    /// Per categorical column, `[B, cardinality]` logits.
    pub cat: Vec<Var>,
}

impl ColumnHeads {
    fn cat_head(&self, j: usize) -> MlpHead {
        MlpHead::new(format!("{}.cat{j}", self.prefix), self.d, self.hidden, self.cat_cardinalities[j])
    }

    pub fn init_params<F: Float, R: Rng + ?Sized>(&self, ps: &mut ParamSet<F>, rng: &mut R) -> Result<()> {
        let (p, nn, d, h) = (&self.prefix, self.n_num, self.d, self.hidden);
        if nn > 0 {
            ps.insert(format!("{p}.num.0.weight"), kaiming_uniform(&[nn, d, h], d, rng)?, true)?;
            ps.insert(format!("{p}.num.0.bias"), zero_bias(&[nn, 1, h]), false)?;
            ps.insert(format!("{p}.num.1.weight"), kaiming_uniform(&[nn, h, 1], h, rng)?, true)?;
            ps.insert(format!("{p}.num.1.bias"), zero_bias(&[nn, 1, 1]), false)?;
        }
        for j in 0..self.cat_cardinalities.len() {
            self.cat_head(j).init_params(ps, rng)?;
        }
        Ok(())
    }

    /// Reads feature tokens `0..c` of `[B, c + 1, d]` backbone output.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, tokens: Var) -> Result<ColumnPredictions> {
        let nn = self.n_num;
        let c = nn + self.cat_cardinalities.len();
        match *g.shape(tokens) {
            [_, n, d] if n == c + 1 && d == self.d => {}
            ref s => return Err(Error::Shape(format!("column heads expect [B, {}, {}], got {s:?}", c + 1, self.d))),
        }
        let p = &self.prefix;
        let num = if nn > 0 {
            let t = g.narrow(tokens, 1, 0, nn)?;
            let t = g.permute(t, &[1, 0, 2])?;
            let w0 = g.param(ps, &format!("{p}.num.0.weight"))?;
            let b0 = g.param(ps, &format!("{p}.num.0.bias"))?;
            let w1 = g.param(ps, &format!("{p}.num.1.weight"))?;
            let b1 = g.param(ps, &format!("{p}.num.1.bias"))?;
            let h = g.matmul(t, w0)?;
            let h = g.add(h, b0)?;
            let h = g.relu(h)?;
            let y = g.matmul(h, w1)?;
            Some(g.add(y, b1)?)
        } else {
            None
        };
        let mut cat = Vec::with_capacity(self.cat_cardinalities.len());
        for j in 0..self.cat_cardinalities.len() {
            let t = g.select(tokens, 1, nn + j)?;
            cat.push(self.cat_head(j).forward(g, ps, t)?);
        }
        Ok(ColumnPredictions { num, cat })
    }
}
