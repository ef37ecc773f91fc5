//! Wall-clock timing of model components over sequence length and width.

use std::time::Instant;

use gtr_core::manifold::{exp_o, LorentzPoint, TangentVector};
use gtr_core::params::{normal_tensor, ParamStore};
use gtr_core::rng;
use gtr_core::ssm::{scan, SsmLayer};
use gtr_core::stchannel::{cross_manifold_attention, CrossAttention};

use crate::config::BenchConfig;

pub const COMPONENTS: [&str; 2] = ["scan", "attention"];
const CTX_DIM: usize = 40;
const HEADS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub component: &'static str,
    pub dim: usize,
    pub len: usize,
    /// Median over repeats, or the failure message.
    pub median_ms: Result<f64, String>,
}

struct Inputs {
    q: Vec<LorentzPoint>,
    sem: Vec<TangentVector>,
    ctx: Vec<Vec<f64>>,
    gamma: Vec<f64>,
}

fn inputs(len: usize, dim: usize, seed: u64) -> Result<Inputs, String> {
    let mut r = rng::stream(seed, rng::tags::SYNTHETIC, 10);
    let sem_t = normal_tensor(len, dim, 0.3, &mut r);
    let ctx_t = normal_tensor(len, CTX_DIM, 1.0, &mut r);
    let sem: Vec<TangentVector> = (0..len).map(|i| TangentVector::new(sem_t.row(i).to_vec())).collect();
    let q = sem.iter().map(exp_o).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    Ok(Inputs { q, sem, ctx: ctx_t.to_rows(), gamma: vec![0.5; len] })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median milliseconds of `f` over `repeats` runs after one warm-up.
pub fn time_median(repeats: usize, mut f: impl FnMut() -> Result<(), String>) -> Result<f64, String> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median(times))
}

/// Times one selective layer over a random sequence.
pub fn time_scan(len: usize, dim: usize, repeats: usize, seed: u64) -> Result<f64, String> {
    let x = inputs(len, dim, seed)?;
    let mut store = ParamStore::new();
    let layer = SsmLayer::new(&mut store, "bench", dim, CTX_DIM, &mut rng::stream(seed, rng::tags::INIT, 1));
    time_median(repeats, || scan(&x.q, &x.ctx, &x.gamma, &layer, &store).map(|_| ()).map_err(|e| e.to_string()))
}

/// Times causal cross-manifold attention over a random sequence.
pub fn time_attention(len: usize, dim: usize, repeats: usize, seed: u64) -> Result<f64, String> {
    let x = inputs(len, dim, seed)?;
    let mut store = ParamStore::new();
    let heads = if dim.is_multiple_of(HEADS) { HEADS } else { 1 };
    let att = CrossAttention::new(&mut store, dim, CTX_DIM, heads, &mut rng::stream(seed, rng::tags::INIT, 1))
        .map_err(|e| e.to_string())?;
    time_median(repeats, || {
        cross_manifold_attention(&x.sem, &x.ctx, &att, &store).map(|_| ()).map_err(|e| e.to_string())
    })
}

/// Every cell of the sweep. Failures are recorded per cell; the sweep
/// always completes.
pub fn run(cfg: &BenchConfig, seed: u64) -> Vec<BenchCell> {
    let mut cells = Vec::new();
    for &dim in &cfg.dims {
        for &len in &cfg.lengths {
            for component in COMPONENTS {
                let median_ms = std::panic::catch_unwind(|| match component {
                    "scan" => time_scan(len, dim, cfg.repeats, seed),
                    _ => time_attention(len, dim, cfg.repeats, seed),
                })
                .unwrap_or_else(|_| Err("panicked".into()));
                cells.push(BenchCell { component, dim, len, median_ms });
            }
        }
    }
    cells
}
