//! In-process master–worker cluster: contiguous shards plus an exact ledger
//! of communication rounds and transmitted floats.
//!
//! Machine 0 is the master. A round broadcasts `θ` to the `k − 1` workers and
//! gathers their local gradients; the master never pays to talk to itself.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glm::{self, DataBlock, LossFamily};
use crate::numeric::{axpy, mean_vectors, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedDataset {
    pub shards: Vec<DataBlock>,
}

impl ShardedDataset {
    pub fn k(&self) -> usize {
        self.shards.len()
    }

    /// Rows per machine.
    pub fn n(&self) -> usize {
        self.shards[0].n_rows()
    }

    pub fn total(&self) -> usize {
        self.n() * self.k()
    }

    pub fn dim(&self) -> usize {
        self.shards[0].dim()
    }

    pub fn master(&self) -> &DataBlock {
        &self.shards[0]
    }

    /// All shards stacked back in machine order.
    pub fn pooled(&self) -> DataBlock {
        let d = self.dim();
        let mut x = Vec::with_capacity(self.total() * d);
        let mut y = Vec::with_capacity(self.total());
        for s in &self.shards {
            x.extend_from_slice(s.x.as_slice());
            y.extend_from_slice(&s.y);
        }
        DataBlock {
            x: Matrix::from_vec(self.total(), d, x).expect("consistent shard widths"),
            y,
        }
    }
}

/// Splits rows into `k` contiguous blocks of `N/k` rows, in order.
pub fn shard(x: &Matrix, y: &[f64], k: usize) -> Result<ShardedDataset> {
    let rows = x.rows();
    if y.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: y.len(),
        });
    }
    if k == 0 || rows == 0 || rows % k != 0 {
        return Err(Error::NotDivisible { rows, k });
    }
    let n = rows / k;
    let shards = (0..k)
        .map(|j| DataBlock::new(x.row_block(j * n, (j + 1) * n), y[j * n..(j + 1) * n].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShardedDataset { shards })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub rounds: u64,
    pub floats_up: u64,
    pub floats_down: u64,
    /// Portion of `floats_up` spent on gradient second moments.
    pub moment_floats_up: u64,
}

/// Local gradients of one round, machine order, plus their average.
#[derive(Debug, Clone, PartialEq)]
pub struct Gathered {
    pub local: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// Gathered gradients together with each machine's mean squared per-sample
/// gradient `ψ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredMoments {
    pub gradients: Gathered,
    pub second_moments: Vec<Vec<f64>>,
}

/// The cluster a run talks to.
#[derive(Debug)]
pub struct Cluster<'a> {
    data: &'a ShardedDataset,
    family: LossFamily,
    ledger: CommLedger,
}

impl<'a> Cluster<'a> {
    pub fn new(data: &'a ShardedDataset, family: LossFamily) -> Result<Self> {
        for s in &data.shards {
            s.check_family(family)?;
        }
        Ok(Self {
            data,
            family,
            ledger: CommLedger::default(),
        })
    }

    pub fn data(&self) -> &'a ShardedDataset {
        self.data
    }

    pub fn family(&self) -> LossFamily {
        self.family
    }

    pub fn ledger(&self) -> CommLedger {
        self.ledger
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.data.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.data.dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn charge_round(&mut self, up_per_worker: u64) {
        let workers = self.data.k() as u64 - 1;
        let d = self.data.dim() as u64;
        self.ledger.rounds += 1;
        self.ledger.floats_down += workers * d;
        self.ledger.floats_up += workers * up_per_worker;
    }

    /// Broadcasts `θ`, gathers every `∇L_j(θ)`, and averages them in machine order.
    pub fn gather_gradients(&mut self, theta: &[f64]) -> Result<Gathered> {
        self.check(theta)?;
        let family = self.family;
        let local = self
            .data
            .shards
            .par_iter()
            .map(|s| glm::grad(family, s, theta))
            .collect::<Result<Vec<_>>>()?;
        self.charge_round(self.data.dim() as u64);
        let mean = mean_vectors(&local);
        Ok(Gathered { local, mean })
    }

    /// Like [`Cluster::gather_gradients`] but workers also upload `ψ_j`.
    pub fn gather_with_moments(&mut self, theta: &[f64]) -> Result<GatheredMoments> {
        self.check(theta)?;
        let family = self.family;
        let parts = self
            .data
            .shards
            .par_iter()
            .map(|s| {
                let ps = glm::per_sample_grads(family, s, theta)?;
                Ok(moments(&ps))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = self.data.dim() as u64;
        self.charge_round(2 * d);
        self.ledger.moment_floats_up += (self.data.k() as u64 - 1) * d;
        let (local, second_moments): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        let mean = mean_vectors(&local);
        Ok(GatheredMoments {
            gradients: Gathered { local, mean },
            second_moments,
        })
    }
}

/// Row mean and row mean of squares of a per-sample gradient matrix.
fn moments(ps: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = ps.cols();
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for i in 0..ps.rows() {
        let r = ps.row(i);
        axpy(1.0, r, &mut mean);
        sq.iter_mut().zip(r).for_each(|(s, v)| *s += v * v);
    }
    let inv = 1.0 / ps.rows() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    sq.iter_mut().for_each(|v| *v *= inv);
    (mean, sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rows: usize, d: usize) -> (Matrix, Vec<f64>) {
        let x = Matrix::from_fn(rows, d, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let y = (0..rows).map(|i| (i % 5) as f64 - 2.0).collect();
        (x, y)
    }

    #[test]
    fn contiguous_shards() {
        let (x, y) = toy(8, 2);
        let s = shard(&x, &y, 2).unwrap();
        assert_eq!(s.shards[0].x, x.row_block(0, 4));
        assert_eq!(s.shards[1].y, y[4..8].to_vec());
        let one = shard(&x, &y, 1).unwrap();
        assert_eq!(one.shards[0].x, x);
        assert!(matches!(
            shard(&toy(10, 2).0, &toy(10, 2).1, 3),
            Err(Error::NotDivisible { rows: 10, k: 3 })
        ));
    }

    #[test]
    fn ledger_counts_rounds() {
        let (x, y) = toy(32, 3);
        let data = shard(&x, &y, 4).unwrap();
        let mut c = Cluster::new(&data, LossFamily::Linear).unwrap();
        for _ in 0..5 {
            c.gather_gradients(&[0.1, 0.0, -0.2]).unwrap();
        }
        let l = c.ledger();
        assert_eq!(l.rounds, 5);
        assert_eq!(l.floats_up, 5 * 3 * 3);
        assert_eq!(l.floats_down, 5 * 3 * 3);
        c.gather_with_moments(&[0.0; 3]).unwrap();
        assert_eq!(c.ledger().floats_up, 5 * 9 + 2 * 9);
        assert_eq!(c.ledger().moment_floats_up, 9);
    }

    #[test]
    fn single_machine_moves_nothing() {
        let (x, y) = toy(6, 2);
        let data = shard(&x, &y, 1).unwrap();
        let mut c = Cluster::new(&data, LossFamily::Linear).unwrap();
        c.gather_gradients(&[0.0, 0.0]).unwrap();
        assert_eq!(c.ledger().rounds, 1);
        assert_eq!(c.ledger().floats_up + c.ledger().floats_down, 0);
    }

    #[test]
    fn average_equals_pooled_gradient() {
        let (x, y) = toy(24, 3);
        let data = shard(&x, &y, 4).unwrap();
        let mut c = Cluster::new(&data, LossFamily::Linear).unwrap();
        let theta = [0.3, -0.1, 0.2];
        let g = c.gather_gradients(&theta).unwrap();
        let pooled = glm::grad(LossFamily::Linear, &data.pooled(), &theta).unwrap();
        for (a, b) in g.mean.iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_match_gradients() {
        let (x, y) = toy(12, 2);
        let data = shard(&x, &y, 3).unwrap();
        let theta = [0.5, 0.5];
        let mut c1 = Cluster::new(&data, LossFamily::Linear).unwrap();
        let mut c2 = Cluster::new(&data, LossFamily::Linear).unwrap();
        let g = c1.gather_gradients(&theta).unwrap();
        let m = c2.gather_with_moments(&theta).unwrap();
        for (a, b) in g.local.iter().zip(&m.gradients.local) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert!(m.second_moments.iter().flatten().all(|&v| v >= 0.0));
    }
}
