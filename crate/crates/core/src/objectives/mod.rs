//! Pretraining and finetuning losses, and the per-table model that wires a
//! featurizer, the shared backbone and a data-specific head together.

mod losses;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_batch, Batch, CorruptionConfig, PreparedTable, TaskType};
use crate::error::{Error, Result};
use crate::model::{backbone_forward, cls_output, init_backbone, BackboneConfig, ColumnHeads, FeaturizerSpec, MlpHead};
use crate::tensor::{Float, Graph, OptimizerState, ParamSet, Var};

pub use losses::{infonce_loss, reconstruction_loss, supervised_loss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Reconstruction,
    Contrastive,
    Supervised,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] =
        [ObjectiveKind::Reconstruction, ObjectiveKind::Contrastive, ObjectiveKind::Supervised];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Reconstruction => "reconstruction",
            ObjectiveKind::Contrastive => "contrastive",
            ObjectiveKind::Supervised => "supervised",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}` (reconstruction, contrastive, supervised)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// InfoNCE temperature.
    pub temperature: f64,
    /// Contrastive embedding width.
    pub projection_dim: usize,
    /// Hidden width of every projection head.
    pub head_hidden: usize,
    pub corruption: CorruptionConfig,
    /// Reconstruct only the resampled cells.
    pub mask_only: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Reconstruction,
            temperature: 1.0,
            projection_dim: 192,
            head_hidden: 192,
            corruption: CorruptionConfig::default(),
            mask_only: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.corruption.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.projection_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Names of the head parameters for each objective.
pub const RECON_HEAD: &str = "head.recon";
pub const CONTRASTIVE_HEAD: &str = "head.contrastive";
pub const SUPERVISED_HEAD: &str = "head.supervised";

/// RNG stream numbers for the three initialization groups. Keeping them
/// separate makes featurizer and head draws independent of the backbone.
const FEATURIZER_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;
const BACKBONE_STREAM: u64 = 3;

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One table's full model: featurizer, backbone and the objective's head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableModel {
    pub featurizer: FeaturizerSpec,
    pub backbone: BackboneConfig,
    pub objective: ObjectiveConfig,
    pub task: TaskType,
    pub n_outputs: usize,
}

impl TableModel {
    pub fn new(table: &PreparedTable, backbone: BackboneConfig, objective: ObjectiveConfig) -> Result<Self> {
        backbone.validate()?;
        objective.validate()?;
        if table.n_features() == 0 {
            return Err(Error::Dataset(format!("table `{}` has no feature columns", table.name)));
        }
        Ok(Self {
            featurizer: FeaturizerSpec::for_table(table, backbone.d),
            backbone,
            objective,
            task: table.task,
            n_outputs: table.n_outputs(),
        })
    }

    fn column_heads(&self) -> ColumnHeads {
        ColumnHeads {
            prefix: RECON_HEAD.into(),
            n_num: self.featurizer.n_num,
            cat_cardinalities: self.featurizer.cat_cardinalities.clone(),
            d: self.backbone.d,
            hidden: self.objective.head_hidden,
        }
    }

    fn mlp_head(&self) -> MlpHead {
        match self.objective.kind {
            ObjectiveKind::Contrastive => MlpHead::new(
                CONTRASTIVE_HEAD,
                self.backbone.d,
                self.objective.head_hidden,
                self.objective.projection_dim,
            ),
            _ => MlpHead::new(SUPERVISED_HEAD, self.backbone.d, self.objective.head_hidden, self.n_outputs),
        }
    }

    /// Fresh parameters. Featurizer, head and backbone each draw from their
    /// own stream of `seed`.
    pub fn init<F: Float>(&self, seed: u64) -> Result<ParamSet<F>> {
        let mut ps = ParamSet::new();
        self.featurizer.init_params(&mut ps, &mut init_rng(seed, FEATURIZER_STREAM))?;
        let mut head_rng = init_rng(seed, HEAD_STREAM);
        match self.objective.kind {
            ObjectiveKind::Reconstruction => self.column_heads().init_params(&mut ps, &mut head_rng)?,
            _ => self.mlp_head().init_params(&mut ps, &mut head_rng)?,
        }
        init_backbone(&self.backbone, &mut ps, &mut init_rng(seed, BACKBONE_STREAM))?;
        Ok(ps)
    }

    /// Contextual tokens `[B, c + 1, d]` of `batch`.
    pub fn encode<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, batch: &Batch) -> Result<Var> {
        let tokens = self.featurizer.featurize(g, ps, batch)?;
        backbone_forward(g, ps, &self.backbone, tokens)
    }

    /// Head output on the CLS token: logits for a supervised model, the
    /// embedding for a contrastive one.
    pub fn predict<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, batch: &Batch) -> Result<Var> {
        if self.objective.kind == ObjectiveKind::Reconstruction {
            return Err(Error::Usage("a reconstruction model has no CLS head".into()));
        }
        let t = self.encode(g, ps, batch)?;
        let cls = cls_output(g, t)?;
        self.mlp_head().forward(g, ps, cls)
    }

    /// Scalar training loss on `batch`. Corrupted views are drawn from
    /// `table`'s training rows using `rng`.
    pub fn loss<F: Float, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamSet<F>,
        batch: &Batch,
        table: &PreparedTable,
        rng: &mut R,
    ) -> Result<Var> {
        match self.objective.kind {
            ObjectiveKind::Reconstruction => {
                let corrupted = corrupt_batch(batch, &self.objective.corruption, table, rng)?;
                let t = self.encode(g, ps, &corrupted.batch)?;
                let preds = self.column_heads().forward(g, ps, t)?;
                let mask = self.objective.mask_only.then_some(&corrupted.mask[..]);
                reconstruction_loss(g, &preds, batch, mask)
            }
            ObjectiveKind::Contrastive => {
                let corrupted = corrupt_batch(batch, &self.objective.corruption, table, rng)?;
                let z = self.predict(g, ps, batch)?;
                let z_tilde = self.predict(g, ps, &corrupted.batch)?;
                infonce_loss(g, z, z_tilde, self.objective.temperature)
            }
            ObjectiveKind::Supervised => {
                let logits = self.predict(g, ps, batch)?;
                supervised_loss(g, logits, &batch.targets, self.task)
            }
        }
    }
}

impl TableModel {
    /// One optimizer step on the rows `rows` of `table`. Dropout masks come
    /// from `graph_seed`, corruption draws from `rng`. Returns the loss.
    pub fn train_step<F: Float, R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet<F>,
        optimizer: &mut OptimizerState<F>,
        table: &PreparedTable,
        rows: &[usize],
        graph_seed: u64,
        rng: &mut R,
    ) -> Result<f64> {
        let batch = Batch::from_rows(table, rows);
        let mut g = Graph::new(true, graph_seed);
        let loss = self.loss(&mut g, params, &batch, table, rng)?;
        let value = g.scalar_value(loss)?.as_f64();
        g.backward_into(loss, params)?;
        optimizer.step(params)?;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_suite, split_dataset, SyntheticConfig};
    use crate::model::BackboneVariant;

    fn table(seed: u64) -> PreparedTable {
        let ds = generate_synthetic_suite(&SyntheticConfig::new(1, 60, 5, 3, seed)).unwrap().remove(0);
        let split = split_dataset(ds.n_rows(), 0).unwrap();
        ds.prepare(split).unwrap()
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            variant: BackboneVariant::Ftt,
            n_blocks: 1,
            d: 8,
            n_heads: 2,
            attn_dropout: 0.0,
            ff_dropout: 0.0,
        }
    }

    #[test]
    fn every_objective_gives_a_finite_nonnegative_loss() {
        let t = table(1);
        let batch = Batch::from_rows(&t, &t.split.train[..16]);
        for kind in ObjectiveKind::ALL {
            let mut cfg = ObjectiveConfig::new(kind);
            cfg.head_hidden = 16;
            cfg.projection_dim = 8;
            let m = TableModel::new(&t, small(), cfg).unwrap();
            let ps = m.init::<f64>(3).unwrap();
            let mut g = Graph::new(true, 0);
            let l = m.loss(&mut g, &ps, &batch, &t, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let v = g.scalar_value(l).unwrap();
            assert!(v.is_finite() && v >= 0.0, "{kind}: {v}");
        }
    }

    #[test]
    fn init_streams_are_independent() {
        let t = table(2);
        let m = TableModel::new(&t, small(), ObjectiveConfig::new(ObjectiveKind::Supervised)).unwrap();
        let deep = TableModel { backbone: BackboneConfig { n_blocks: 3, ..small() }, ..m.clone() };
        let a = m.init::<f32>(9).unwrap();
        let b = deep.init::<f32>(9).unwrap();
        for (name, p) in a.iter().filter(|(n, _)| !n.starts_with("backbone.")) {
            assert_eq!(p.tensor, b.get(name).unwrap().tensor);
        }
        assert_eq!(a.tensor("backbone.0.attn.q.weight").unwrap(), b.tensor("backbone.0.attn.q.weight").unwrap());
    }

    #[test]
    fn objective_names_round_trip() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.as_str().parse::<ObjectiveKind>().unwrap(), k);
        }
        assert!("mlm".parse::<ObjectiveKind>().is_err());
    }
}
