use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, PreparedTable};
use crate::error::{Error, Result};
use crate::tensor::{kaiming_uniform, zero_bias, Float, Graph, ParamSet, Var};

pub const NUM_WEIGHT: &str = "featurizer.num.weight";
pub const NUM_BIAS: &str = "featurizer.num.bias";
pub const CAT_EMBEDDING: &str = "featurizer.cat.embedding";
pub const CLS: &str = "featurizer.cls";

/// Layout of one table's featurizer.
///
/// Numerical column `k` owns row `k` of the `[n_num, d]` weight and bias.
/// Categorical columns share one embedding matrix; column `j` owns the
/// `cat_cardinalities[j]` rows starting at `offsets()[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerSpec {
    pub n_num: usize,
    pub cat_cardinalities: Vec<usize>,
    pub d: usize,
}

impl FeaturizerSpec {
    pub fn for_table(table: &PreparedTable, d: usize) -> Self {
        Self { n_num: table.n_num, cat_cardinalities: table.cat_cardinalities.clone(), d }
    }

    pub fn n_cat(&self) -> usize {
        self.cat_cardinalities.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_num + self.n_cat()
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.cat_cardinalities
            .iter()
            .map(|&c| {
                acc += c;
                acc - c
            })
            .collect()
    }

    pub fn embedding_rows(&self) -> usize {
        self.cat_cardinalities.iter().sum()
    }

    /// Adds the featurizer parameters to `params`. None of them is decayed.
    pub fn init_params<F: Float, R: Rng + ?Sized>(&self, params: &mut ParamSet<F>, rng: &mut R) -> Result<()> {
        if self.n_features() == 0 {
            return Err(Error::Dataset("a table needs at least one feature column".into()));
        }
        let d = self.d;
        if self.n_num > 0 {
            params.insert(NUM_WEIGHT, kaiming_uniform(&[self.n_num, d], d, rng)?, false)?;
            params.insert(NUM_BIAS, zero_bias(&[self.n_num, d]), false)?;
        }
        if self.n_cat() > 0 {
            params.insert(CAT_EMBEDDING, kaiming_uniform(&[self.embedding_rows(), d], d, rng)?, false)?;
        }
        params.insert(CLS, kaiming_uniform(&[d], d, rng)?, false)?;
        Ok(())
    }

    /// Tokens `[B, c + 1, d]`: numerical, then categorical, then CLS.
    pub fn featurize<F: Float>(&self, g: &mut Graph<F>, params: &ParamSet<F>, batch: &Batch) -> Result<Var> {
        if batch.n_num != self.n_num || batch.n_cat != self.n_cat() {
            return Err(Error::Usage(format!(
                "batch has {} numerical and {} categorical columns, featurizer expects {} and {}",
                batch.n_num,
                batch.n_cat,
                self.n_num,
                self.n_cat()
            )));
        }
        let (b, d) = (batch.len(), self.d);
        let mut parts = Vec::with_capacity(3);
        if self.n_num > 0 {
            let x = g.constant_from(vec![b, self.n_num, 1], batch.num.iter().map(|&v| F::of(v)).collect())?;
            let w = g.param(params, NUM_WEIGHT)?;
            let bias = g.param(params, NUM_BIAS)?;
            let xw = g.mul(x, w)?;
            parts.push(g.add(xw, bias)?);
        }
        if self.n_cat() > 0 {
            let nc = self.n_cat();
            let offsets = self.offsets();
            let mut rows = Vec::with_capacity(batch.cat.len());
            for (i, &idx) in batch.cat.iter().enumerate() {
                let j = i % nc;
                if idx >= self.cat_cardinalities[j] {
                    return Err(Error::Dataset(format!(
                        "category index {idx} out of range for column {j} with {} entries",
                        self.cat_cardinalities[j]
                    )));
                }
                rows.push(offsets[j] + idx);
            }
            let table = g.param(params, CAT_EMBEDDING)?;
            let e = g.gather_rows(table, &rows)?;
            parts.push(g.reshape(e, &[b, nc, d])?);
        }
        let cls = g.param(params, CLS)?;
        let cls = g.reshape(cls, &[1, d])?;
        let cls = g.gather_rows(cls, &vec![0; b])?;
        parts.push(g.reshape(cls, &[b, 1, d])?);
        g.concat(&parts, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(num: Vec<f64>, cat: Vec<usize>, b: usize, nn: usize, nc: usize) -> Batch {
        Batch { rows: (0..b).collect(), n_num: nn, n_cat: nc, num, cat, targets: Targets::Regression(vec![0.0; b]) }
    }

    fn setup(spec: &FeaturizerSpec) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        spec.init_params(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ps
    }

    #[test]
    fn shape_and_cls_position() {
        let spec = FeaturizerSpec { n_num: 4, cat_cardinalities: vec![3, 5, 4], d: 192 };
        let ps = setup(&spec);
        let b = batch(vec![0.5; 8], vec![0, 2, 3, 1, 4, 0], 2, 4, 3);
        let mut g = Graph::eval();
        let t = spec.featurize(&mut g, &ps, &b).unwrap();
        assert_eq!(g.shape(t), &[2, 8, 192]);
        let cls = ps.tensor(CLS).unwrap().data().to_vec();
        let v = g.value(t);
        assert_eq!(&v[7 * 192..8 * 192], &cls[..]);
        assert_eq!(&v[15 * 192..16 * 192], &cls[..]);
    }

    #[test]
    fn zero_value_gives_bias_and_lookup_is_deterministic() {
        let spec = FeaturizerSpec { n_num: 2, cat_cardinalities: vec![4], d: 8 };
        let mut ps = setup(&spec);
        let bias = Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        ps.assign(NUM_BIAS, &bias).unwrap();
        let b = batch(vec![0.0, 1.5, 0.0, -2.0], vec![3, 3], 2, 2, 1);
        let mut g = Graph::eval();
        let t = spec.featurize(&mut g, &ps, &b).unwrap();
        let v = g.value(t);
        let w = ps.tensor(NUM_WEIGHT).unwrap().data();
        for r in 0..2 {
            let tok0 = &v[r * 32..r * 32 + 8];
            assert_eq!(tok0, &bias.data()[..8]);
        }
        for i in 0..8 {
            assert_eq!(v[8 + i], 1.5 * w[8 + i] + bias.data()[8 + i]);
        }
        assert_eq!(&v[16..24], &v[32 + 16..32 + 24]);
    }

    #[test]
    fn out_of_range_category_is_rejected() {
        let spec = FeaturizerSpec { n_num: 0, cat_cardinalities: vec![3, 10], d: 4 };
        let ps = setup(&spec);
        let b = batch(vec![], vec![3, 0], 1, 0, 2);
        assert!(spec.featurize(&mut Graph::eval(), &ps, &b).is_err());
    }
}
