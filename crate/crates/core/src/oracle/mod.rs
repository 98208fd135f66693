//! The black-box boundary. Extraction code sees only [`Oracle`]: a dimension,
//! a value per query point, and a running query count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::Network;
use crate::rng::{self, SeededRng};

pub mod wire;

pub use wire::{serve, ServerHandle, TcpOracle};

pub trait Oracle: Send + Sync {
    fn dim(&self) -> usize;

    fn query(&self, x: &[f64]) -> Result<f64>;

    /// Query every point of `points`, a row-major `n × dim` buffer.
    /// Counts `n` queries.
    fn query_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if points.len() % d != 0 {
            return Err(Error::input(format!(
                "batch length {} is not a multiple of dimension {d}",
                points.len()
            )));
        }
        points.chunks_exact(d).map(|x| self.query(x)).collect()
    }

    fn query_count(&self) -> u64;

    fn summary(&self) -> QuerySummary {
        QuerySummary {
            count: self.query_count(),
            budget: None,
        }
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn query(&self, x: &[f64]) -> Result<f64> {
        (**self).query(x)
    }
    fn query_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        (**self).query_batch(points)
    }
    fn query_count(&self) -> u64 {
        (**self).query_count()
    }
    fn summary(&self) -> QuerySummary {
        (**self).summary()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub count: u64,
    pub budget: Option<u64>,
}

/// Atomic query counter with an optional hard budget.
#[derive(Debug, Default)]
pub struct QueryLog {
    count: AtomicU64,
    budget: Option<u64>,
}

impl QueryLog {
    pub fn new(budget: Option<u64>) -> Self {
        QueryLog {
            count: AtomicU64::new(0),
            budget,
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    /// Reserve `n` queries, failing without side effects if that would
    /// exceed the budget.
    pub fn reserve(&self, n: u64) -> Result<()> {
        match self.budget {
            None => {
                self.count.fetch_add(n, Ordering::SeqCst);
                Ok(())
            }
            Some(budget) => self
                .count
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
                    c.checked_add(n).filter(|&total| total <= budget)
                })
                .map(|_| ())
                .map_err(|used| Error::Budget { used, budget }),
        }
    }

    pub fn summary(&self) -> QuerySummary {
        QuerySummary {
            count: self.count(),
            budget: self.budget,
        }
    }
}

/// Oracle evaluating a network held in memory. The network is private.
pub struct InProcessOracle {
    net: Network,
    log: QueryLog,
}

impl InProcessOracle {
    pub fn new(net: Network) -> Self {
        Self::with_budget(net, None)
    }

    pub fn with_budget(net: Network, budget: Option<u64>) -> Self {
        InProcessOracle {
            net,
            log: QueryLog::new(budget),
        }
    }
}

impl Oracle for InProcessOracle {
    fn dim(&self) -> usize {
        self.net.dim
    }

    fn query(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.net.dim, x.len())?;
        self.log.reserve(1)?;
        Ok(self.net.eval_unchecked(x))
    }

    fn query_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        let d = self.net.dim;
        if points.len() % d != 0 {
            return Err(Error::input(format!(
                "batch length {} is not a multiple of dimension {d}",
                points.len()
            )));
        }
        self.log.reserve((points.len() / d) as u64)?;
        Ok(points
            .chunks_exact(d)
            .map(|x| self.net.eval_unchecked(x))
            .collect())
    }

    fn query_count(&self) -> u64 {
        self.log.count()
    }

    fn summary(&self) -> QuerySummary {
        self.log.summary()
    }
}

/// Adds independent `N(0, σ²)` noise to every answer. Off unless constructed.
pub struct NoisyOracle<O> {
    inner: O,
    std_dev: f64,
    rng: Mutex<SeededRng>,
}

impl<O: Oracle> NoisyOracle<O> {
    pub fn new(inner: O, variance: f64, seed: u64) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::input("noise variance must be finite and nonnegative"));
        }
        Ok(NoisyOracle {
            inner,
            std_dev: variance.sqrt(),
            rng: Mutex::new(rng::seeded(seed)),
        })
    }

    fn noise(&self) -> f64 {
        let z: f64 = self.rng.lock().unwrap().sample(StandardNormal);
        self.std_dev * z
    }
}

impl<O: Oracle> Oracle for NoisyOracle<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn query(&self, x: &[f64]) -> Result<f64> {
        Ok(self.inner.query(x)? + self.noise())
    }

    fn query_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        let mut ys = self.inner.query_batch(points)?;
        ys.iter_mut().for_each(|y| *y += self.noise());
        Ok(ys)
    }

    fn query_count(&self) -> u64 {
        self.inner.query_count()
    }

    fn summary(&self) -> QuerySummary {
        self.inner.summary()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Neuron, Sign};
    use std::sync::Arc;
    use std::thread;

    fn relu_e1() -> Network {
        Network::new(2, vec![Neuron::new(Sign::Pos, vec![1.0, 0.0], 0.0)]).unwrap()
    }

    #[test]
    fn query_returns_value_and_counts() {
        let o = InProcessOracle::new(relu_e1());
        assert_eq!(o.query_count(), 0);
        assert_eq!(o.query(&[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(o.query_count(), 1);
        o.query(&[3.0, 0.0]).unwrap();
        assert_eq!(o.query_count(), 2);
    }

    #[test]
    fn batch_counts_each_point() {
        let o = InProcessOracle::new(relu_e1());
        let ys = o.query_batch(&[1.0, 0.0, -1.0, 0.0, 2.0, 5.0]).unwrap();
        assert_eq!(ys, vec![1.0, 0.0, 2.0]);
        assert_eq!(o.query_count(), 3);
        assert!(o.query_batch(&[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_input_error_and_not_counted() {
        let o = InProcessOracle::new(relu_e1());
        assert!(matches!(o.query(&[1.0]), Err(Error::Input(_))));
        assert_eq!(o.query_count(), 0);
    }

    #[test]
    fn budget_is_enforced() {
        let o = InProcessOracle::with_budget(relu_e1(), Some(2));
        o.query(&[1.0, 0.0]).unwrap();
        o.query(&[1.0, 0.0]).unwrap();
        assert!(matches!(
            o.query(&[1.0, 0.0]),
            Err(Error::Budget { used: 2, budget: 2 })
        ));
        assert_eq!(o.query_count(), 2);
        // A batch that would overrun is rejected as a whole.
        let o = InProcessOracle::with_budget(relu_e1(), Some(3));
        o.query(&[1.0, 0.0]).unwrap();
        assert!(o.query_batch(&[0.0; 6]).is_err());
        assert_eq!(o.query_count(), 1);
    }

    #[test]
    fn count_is_exact_under_concurrency() {
        let o = Arc::new(InProcessOracle::new(relu_e1()));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let o = Arc::clone(&o);
                thread::spawn(move || {
                    for _ in 0..1000 {
                        o.query(&[0.5, 0.5]).unwrap();
                    }
                })
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        assert_eq!(o.query_count(), 8000);
    }

    #[test]
    fn noisy_oracle_perturbs_but_keeps_count() {
        let o = NoisyOracle::new(InProcessOracle::new(relu_e1()), 0.01, 4).unwrap();
        let y = o.query(&[1.0, 0.0]).unwrap();
        assert!(y != 1.0 && (y - 1.0).abs() < 1.0);
        assert_eq!(o.query_count(), 1);
        let quiet = NoisyOracle::new(InProcessOracle::new(relu_e1()), 0.0, 4).unwrap();
        assert_eq!(quiet.query(&[1.0, 0.0]).unwrap(), 1.0);
        assert!(NoisyOracle::new(InProcessOracle::new(relu_e1()), -1.0, 4).is_err());
    }
}
