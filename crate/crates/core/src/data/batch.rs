use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PreparedTable, Targets};
use crate::error::{Error, Result};

/// A mini-batch copied out of a [`PreparedTable`].
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub n_num: usize,
    pub n_cat: usize,
    /// Row-major `[len, n_num]`.
    pub num: Vec<f64>,
    /// Row-major `[len, n_cat]`.
    pub cat: Vec<usize>,
    pub targets: Targets,
}

impl Batch {
    pub fn from_rows(table: &PreparedTable, rows: &[usize]) -> Self {
        let (nn, nc) = (table.n_num, table.n_cat);
        let mut num = Vec::with_capacity(rows.len() * nn);
        let mut cat = Vec::with_capacity(rows.len() * nc);
        for &r in rows {
            num.extend_from_slice(&table.num[r * nn..(r + 1) * nn]);
            cat.extend_from_slice(&table.cat[r * nc..(r + 1) * nc]);
        }
        Self { rows: rows.to_vec(), n_num: nn, n_cat: nc, num, cat, targets: table.targets.select(rows) }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_num + self.n_cat
    }
}

/// Seeded mini-batch order over a fixed index set.
///
/// Epoch `e` is shuffled by a ChaCha stream selected by `e`, so orders
/// differ between epochs but are reproducible across runs. The stream form
/// ([`BatchStream::next_batch`]) recycles epochs forever.
#[derive(Clone, Debug)]
pub struct BatchStream {
    indices: Vec<usize>,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(indices: Vec<usize>, batch_size: usize, shuffle: bool, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Dataset("cannot batch an empty split".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut s = Self { indices, batch_size, shuffle, seed, epoch: 0, order: Vec::new(), pos: 0 };
        s.order = s.epoch_order(0);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len().div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.indices.clone();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order
    }

    /// All batches of one epoch; the last one may be short.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch).chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Next batch of the endless epoch stream.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.order = self.epoch_order(self.epoch);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}
