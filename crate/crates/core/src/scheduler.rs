//! Per-iteration freeze scheduling: distance-ranked ILS plus the random and
//! progressive baselines.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::LayerId;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Range of the random values that stand in for not-yet-measured distances.
pub const INIT_RANGE: (f64, f64) = (1e6, 2e6);
/// Added to the previous magnitude before dividing in the distance metric.
pub const DIV_EPS: f64 = 1e-12;

/// How frozen layers are chosen each iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// Freeze the layers with the smallest distance values.
    #[default]
    Ils,
    /// Freeze a fresh uniform random subset every iteration.
    Random,
    /// Freeze a constant prefix of the layer order.
    Progressive,
    /// Never freeze.
    None,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::Ils,
        SchedulerKind::Random,
        SchedulerKind::Progressive,
        SchedulerKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Ils => "ils",
            SchedulerKind::Random => "random",
            SchedulerKind::Progressive => "progressive",
            SchedulerKind::None => "none",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheduler `{s}`")))
    }
}

/// Checks `0 <= rate < 1`.
pub fn validate_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "freezing rate must lie in [0, 1), got {rate}"
        )))
    }
}

/// Number of layers frozen out of `n` at rate `rate`: `floor(n * rate)`.
pub fn frozen_count(n: usize, rate: f64) -> usize {
    ((n as f64) * rate).floor() as usize
}

/// Frozen and active layers for one iteration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FreezeDecision {
    pub iteration: usize,
    /// Sorted ascending.
    pub frozen_ids: Vec<LayerId>,
    /// Sorted ascending; the complement of `frozen_ids` in the registry.
    pub active_ids: Vec<LayerId>,
}

impl FreezeDecision {
    pub fn new(iteration: usize, mut frozen: Vec<LayerId>, num_layers: usize) -> Self {
        frozen.sort_unstable();
        frozen.dedup();
        let mut is_frozen = vec![false; num_layers];
        frozen.iter().for_each(|&i| is_frozen[i] = true);
        let active = (0..num_layers).filter(|&i| !is_frozen[i]).collect();
        Self {
            iteration,
            frozen_ids: frozen,
            active_ids: active,
        }
    }

    /// Nothing frozen.
    pub fn none(iteration: usize, num_layers: usize) -> Self {
        Self::new(iteration, Vec::new(), num_layers)
    }

    pub fn is_frozen(&self, id: LayerId) -> bool {
        self.frozen_ids.binary_search(&id).is_ok()
    }
}

/// Per-layer distance values with warm-start bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceVector {
    pub d: Vec<f64>,
    /// False until a layer's first measured distance replaces its random init.
    pub initialized: Vec<bool>,
}

impl DistanceVector {
    /// Draws each entry uniformly from [`INIT_RANGE`].
    pub fn init(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..n)
            .map(|_| rng.random_range(INIT_RANGE.0..INIT_RANGE.1))
            .collect();
        Self {
            d,
            initialized: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn all_initialized(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    pub fn set(&mut self, slot: usize, distance: f64) {
        self.d[slot] = distance;
        self.initialized[slot] = true;
    }

    /// Slots of the `floor(n * rate)` smallest distances. Measured entries
    /// rank below unmeasured ones; ties go to the lower slot.
    pub fn select_frozen(&self, rate: f64) -> Result<Vec<usize>> {
        validate_rate(rate)?;
        let k = frozen_count(self.len(), rate);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            (!self.initialized[a])
                .cmp(&!self.initialized[b])
                .then(self.d[a].total_cmp(&self.d[b]))
                .then(a.cmp(&b))
        });
        order.truncate(k);
        order.sort_unstable();
        Ok(order)
    }
}

/// Mean relative change `|after - before| / (|before| + eps)`.
pub fn layer_distance<T: Real>(before: &[T], after: &[T]) -> f64 {
    assert_eq!(
        before.len(),
        after.len(),
        "distance needs equal-length snapshots"
    );
    if before.is_empty() {
        return 0.0;
    }
    let total: f64 = before
        .iter()
        .zip(after)
        .map(|(&b, &a)| {
            let (b, a) = (b.as_f64(), a.as_f64());
            (a - b).abs() / (b.abs() + DIV_EPS)
        })
        .sum();
    total / before.len() as f64
}

/// `floor(n * rate)` distinct slots drawn uniformly from the stream for
/// `(seed, iteration)`.
pub fn random_subset(n: usize, rate: f64, seed: u64, iteration: usize) -> Result<Vec<usize>> {
    validate_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    let mut picked = rand::seq::index::sample(&mut rng, n, frozen_count(n, rate)).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// The first `floor(n * rate)` slots.
pub fn progressive_prefix(n: usize, rate: f64) -> Result<Vec<usize>> {
    validate_rate(rate)?;
    Ok((0..frozen_count(n, rate)).collect())
}

/// Scheduler over a fixed list of candidate layers.
#[derive(Clone, Debug)]
pub struct Scheduler {
    kind: SchedulerKind,
    rate: f64,
    candidates: Vec<LayerId>,
    num_layers: usize,
    distances: DistanceVector,
    seed: u64,
}

impl Scheduler {
    /// `candidates` are the freezable layer ids (in registry order) and
    /// `num_layers` the registry size.
    pub fn new(
        kind: SchedulerKind,
        rate: f64,
        candidates: Vec<LayerId>,
        num_layers: usize,
        seed: u64,
    ) -> Result<Self> {
        validate_rate(rate)?;
        if candidates.is_empty() {
            return Err(Error::Config("scheduler needs at least one layer".into()));
        }
        if let Some(&bad) = candidates.iter().find(|&&id| id >= num_layers) {
            return Err(Error::UnknownLayer(bad));
        }
        Ok(Self {
            kind,
            rate,
            distances: DistanceVector::init(candidates.len(), seed),
            candidates,
            num_layers,
            seed,
        })
    }

    pub fn kind(&self) -> SchedulerKind {
        self.kind
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn candidates(&self) -> &[LayerId] {
        &self.candidates
    }

    pub fn distances(&self) -> &DistanceVector {
        &self.distances
    }

    /// Distance of a registry layer, if it is a candidate.
    pub fn distance_of(&self, layer: LayerId) -> Option<f64> {
        self.slot(layer).map(|s| self.distances.d[s])
    }

    fn slot(&self, layer: LayerId) -> Option<usize> {
        self.candidates.iter().position(|&c| c == layer)
    }

    /// The freeze decision for `iteration`.
    pub fn decide(&self, iteration: usize) -> Result<FreezeDecision> {
        let n = self.candidates.len();
        let slots = match self.kind {
            SchedulerKind::Ils => self.distances.select_frozen(self.rate)?,
            SchedulerKind::Random => random_subset(n, self.rate, self.seed, iteration)?,
            SchedulerKind::Progressive => progressive_prefix(n, self.rate)?,
            SchedulerKind::None => Vec::new(),
        };
        let frozen = slots.into_iter().map(|s| self.candidates[s]).collect();
        Ok(FreezeDecision::new(iteration, frozen, self.num_layers))
    }

    /// Stores a measured distance for an active candidate layer. Non-candidate
    /// layers are ignored.
    pub fn record_distance(&mut self, layer: LayerId, distance: f64) {
        if let Some(s) = self.slot(layer) {
            self.distances.set(s, distance);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn measured(d: &[f64]) -> DistanceVector {
        DistanceVector {
            d: d.to_vec(),
            initialized: vec![true; d.len()],
        }
    }

    #[test]
    fn hand_argsort_example() {
        assert_eq!(
            measured(&[5.0, 1.0, 3.0, 2.0]).select_frozen(0.5).unwrap(),
            vec![1, 3]
        );
    }

    #[test]
    fn zero_rate_freezes_nothing() {
        assert!(measured(&[5.0, 1.0]).select_frozen(0.0).unwrap().is_empty());
    }

    #[test]
    fn half_of_eight_is_four() {
        let d = DistanceVector::init(8, 3);
        assert_eq!(d.select_frozen(0.5).unwrap().len(), 4);
    }

    #[test]
    fn rate_out_of_range() {
        let d = DistanceVector::init(4, 0);
        assert!(matches!(d.select_frozen(1.0), Err(Error::Config(_))));
        assert!(matches!(d.select_frozen(-0.1), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_seeded_and_in_range() {
        let a = DistanceVector::init(8, 11);
        assert_eq!(a, DistanceVector::init(8, 11));
        assert!(a.d.iter().all(|&v| (1e6..2e6).contains(&v)));
        assert_ne!(a.d, DistanceVector::init(8, 12).d);
    }

    #[test]
    fn ties_freeze_lower_index_first() {
        assert_eq!(
            measured(&[1.0; 6]).select_frozen(0.5).unwrap(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn distance_hand_values() {
        assert!((layer_distance(&[1.0f64, 2.0], &[1.1, 2.2]) - 0.1).abs() < 1e-12);
        assert_eq!(layer_distance(&[1.0f32, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(layer_distance(&[0.0f32, 2.0], &[0.0, 2.0]), 0.0);
    }

    #[test]
    fn progressive_prefix_is_constant() {
        assert_eq!(progressive_prefix(8, 0.25).unwrap(), vec![0, 1]);
        assert!(progressive_prefix(8, 0.0).unwrap().is_empty());
    }

    #[test]
    fn random_subset_is_reproducible() {
        let a = random_subset(8, 0.5, 9, 3).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, random_subset(8, 0.5, 9, 3).unwrap());
    }

    #[test]
    fn kind_parses() {
        for k in SchedulerKind::ALL {
            assert_eq!(k.as_str().parse::<SchedulerKind>().unwrap(), k);
        }
        assert!("greedy".parse::<SchedulerKind>().is_err());
    }
}
