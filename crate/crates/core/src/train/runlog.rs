use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::autograd::LayerId;
use crate::error::Result;
use crate::model::LayerRegistry;

/// Bytes actually cached by the engine in one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CachedBytes {
    pub dynamic: u64,
    #[serde(rename = "static")]
    pub static_: u64,
    pub semi_static: u64,
}

impl CachedBytes {
    pub fn total(&self) -> u64 {
        self.dynamic + self.static_ + self.semi_static
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Training-batch accuracy.
    pub accuracy: f64,
    pub lr: f64,
    pub frozen: Vec<LayerId>,
    /// Distance of every registry layer after this iteration's update;
    /// `None` for layers outside the scheduler's candidates.
    pub distances: Vec<Option<f64>>,
    pub cached: CachedBytes,
    pub analytic_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub epoch: usize,
    /// Number of iterations completed when the evaluation ran.
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Everything a fine-tuning run records.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunLog {
    pub layer_names: Vec<String>,
    pub iterations: Vec<IterationLog>,
    pub evals: Vec<EvalPoint>,
    /// Iterations each layer was active in.
    pub update_counts: Vec<usize>,
}

impl RunLog {
    pub fn new(registry: &LayerRegistry) -> Self {
        Self {
            layer_names: registry.entries().iter().map(|e| e.name.clone()).collect(),
            iterations: Vec::new(),
            evals: Vec::new(),
            update_counts: vec![0; registry.len()],
        }
    }

    pub fn push(&mut self, entry: IterationLog) {
        let mut frozen = vec![false; self.update_counts.len()];
        entry.frozen.iter().for_each(|&i| frozen[i] = true);
        for (count, f) in self.update_counts.iter_mut().zip(frozen) {
            if !f {
                *count += 1;
            }
        }
        self.iterations.push(entry);
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.iterations.first().map(|i| i.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.iterations.last().map(|i| i.loss)
    }

    /// Mean training loss of the first / last `k` iterations.
    pub fn loss_window(&self, k: usize, last: bool) -> Option<f64> {
        let n = self.iterations.len();
        if n == 0 {
            return None;
        }
        let k = k.clamp(1, n);
        let span = if last {
            &self.iterations[n - k..]
        } else {
            &self.iterations[..k]
        };
        Some(span.iter().map(|i| i.loss).sum::<f64>() / k as f64)
    }

    /// Validation accuracy of the last evaluation.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evals.last().map(|e| e.accuracy)
    }

    /// Distances measured for `layer`, one per iteration it was active in.
    pub fn distance_trace(&self, layer: LayerId) -> Vec<f64> {
        self.iterations
            .iter()
            .filter(|i| !i.frozen.contains(&layer))
            .filter_map(|i| i.distances[layer])
            .collect()
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("iteration,loss,accuracy,lr\n");
        for i in &self.iterations {
            writeln!(s, "{},{},{},{}", i.iteration, i.loss, i.accuracy, i.lr).unwrap();
        }
        s
    }

    pub fn schedule_csv(&self) -> String {
        let mut s = String::from("iteration,layer_id,frozen,d_i\n");
        for i in &self.iterations {
            let mut frozen = vec![false; self.layer_names.len()];
            i.frozen.iter().for_each(|&l| frozen[l] = true);
            for (layer, d) in i.distances.iter().enumerate() {
                let d = d.map(|v| v.to_string()).unwrap_or_default();
                writeln!(
                    s,
                    "{},{},{},{}",
                    i.iteration,
                    layer,
                    u8::from(frozen[layer]),
                    d
                )
                .unwrap();
            }
        }
        s
    }

    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("layer_id,name,update_count\n");
        for (id, (name, count)) in self.layer_names.iter().zip(&self.update_counts).enumerate() {
            writeln!(s, "{id},{name},{count}").unwrap();
        }
        s
    }

    /// Semi-static bytes are folded into the static column.
    pub fn memory_csv(&self) -> String {
        let mut s = String::from("iteration,dynamic_bytes,static_bytes,total\n");
        for i in &self.iterations {
            let c = i.cached;
            writeln!(
                s,
                "{},{},{},{}",
                i.iteration,
                c.dynamic,
                c.static_ + c.semi_static,
                c.total()
            )
            .unwrap();
        }
        s
    }

    /// Writes `metrics.csv`, `schedule.csv`, `heatmap.csv` and `memory.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("schedule.csv"), self.schedule_csv())?;
        fs::write(dir.join("heatmap.csv"), self.heatmap_csv())?;
        fs::write(dir.join("memory.csv"), self.memory_csv())?;
        Ok(())
    }
}
