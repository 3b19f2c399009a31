//! Latency of the three scan algorithms and of a model forward pass.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tfmamba_core::model::Model;
use tfmamba_core::numerics::Tensor;
use tfmamba_core::ssd::{
    ssd_chunked, ssd_dual_materialized, ssd_sequential, SsdConfig, SsdInputs, MATERIALIZED_MAX_LEN,
};
use tfmamba_core::Error;

use crate::commands::print_resolved;
use crate::config::{RunConfig, SsdBenchConfig};
use crate::exit::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SsdTiming {
    pub algorithm: String,
    pub len: usize,
    pub median_ms: f64,
    /// Largest absolute difference from the sequential scan's output.
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardTiming {
    pub len: usize,
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hardware {
    pub os: String,
    pub arch: String,
    pub cpu: Option<String>,
    pub logical_cpus: usize,
    pub optimized_build: bool,
}

impl Hardware {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            optimized_build: !cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub param_count: usize,
    /// Scalars actually allocated by a freshly built model.
    pub allocated_params: usize,
    pub runs: usize,
    pub warmup: usize,
    pub ssd: Vec<SsdTiming>,
    pub forward: Vec<ForwardTiming>,
    pub hardware: Hardware,
}

impl BenchReport {
    /// Materialized over chunked median latency at `len`.
    pub fn chunked_speedup(&self, len: usize) -> Option<f64> {
        let t = |name: &str| {
            self.ssd
                .iter()
                .find(|r| r.algorithm == name && r.len == len)
                .map(|r| r.median_ms)
        };
        Some(t("materialized")? / t("chunked")?)
    }
}

/// Median wall-clock milliseconds of `runs` calls after `warmup` discarded ones.
pub fn median_ms<T>(warmup: usize, runs: usize, mut f: impl FnMut() -> T) -> f64 {
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    let times: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let t0 = Instant::now();
            std::hint::black_box(f());
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    median(times)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
        .expect("consistent shape")
}

/// Random scan inputs with decays in `[0.9, 1)`.
pub fn random_ssd_inputs(len: usize, cfg: &SsdBenchConfig, seed: u64) -> Result<SsdInputs, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gd = cfg.groups * cfg.state;
    SsdInputs::new(
        uniform(&mut rng, len, cfg.channels, -1.0, 1.0),
        uniform(&mut rng, len, cfg.channels, 0.9, 1.0),
        uniform(&mut rng, len, gd, -1.0, 1.0),
        uniform(&mut rng, len, gd, -1.0, 1.0),
        cfg.groups,
    )
}

/// Runs the timing tables and writes `bench_ssd.csv`, `bench_forward.csv`
/// and `bench.json` under `cfg.out`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport, CliError> {
    print_resolved("bench", cfg);
    let b = &cfg.bench;
    if b.lengths.contains(&0) || b.forward_lengths.contains(&0) {
        return Err(CliError::config("bench: every length must be at least 1"));
    }
    if b.ssd.chunk == 0 {
        return Err(CliError::config("bench.ssd.chunk must be at least 1"));
    }
    let model = Model::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let chunk = SsdConfig { chunk: b.ssd.chunk };
    let mut ssd = Vec::new();
    for &len in &b.lengths {
        let inputs = random_ssd_inputs(len, &b.ssd, cfg.train.seed)?;
        let reference = ssd_sequential(&inputs);
        let mut push = |name: &str, out: &Tensor, ms: f64| {
            ssd.push(SsdTiming {
                algorithm: name.into(),
                len,
                median_ms: ms,
                max_abs_diff: out.max_abs_diff(&reference),
            });
        };
        push("sequential", &reference, median_ms(b.warmup, b.runs, || ssd_sequential(&inputs)));
        if len <= MATERIALIZED_MAX_LEN {
            let out = ssd_dual_materialized(&inputs)?;
            push("materialized", &out, median_ms(b.warmup, b.runs, || ssd_dual_materialized(&inputs)));
        }
        let out = ssd_chunked(&inputs, &chunk)?;
        push("chunked", &out, median_ms(b.warmup, b.runs, || ssd_chunked(&inputs, &chunk)));
        eprintln!("bench: L = {len} done");
    }
    let mut forward = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(1));
    for &len in &b.forward_lengths {
        let x = uniform(&mut rng, len, cfg.model.d_in, -1.0, 1.0);
        model.predict(&x)?;
        forward.push(ForwardTiming {
            len,
            median_ms: median_ms(b.warmup, b.runs, || model.predict(&x)),
        });
    }
    let report = BenchReport {
        param_count: cfg.model.param_count(),
        allocated_params: model.store.scalar_count(),
        runs: b.runs,
        warmup: b.warmup,
        ssd,
        forward,
        hardware: Hardware::detect(),
    };
    write_outputs(&cfg.out, &report)?;
    for r in &report.ssd {
        println!("{:<12} L={:<6} {:>12.4} ms  max|Δ| {:.3e}", r.algorithm, r.len, r.median_ms, r.max_abs_diff);
    }
    for r in &report.forward {
        println!("forward      L={:<6} {:>12.4} ms", r.len, r.median_ms);
    }
    println!("param_count {}", report.param_count);
    Ok(report)
}

fn write_outputs(dir: &Path, report: &BenchReport) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_err = |e: csv::Error| CliError::from(Error::from(e));
    let path = dir.join("bench_ssd.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in &report.ssd {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("bench_forward.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in &report.forward {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join("bench.json");
    let text = serde_json::to_string_pretty(report).map_err(Error::from)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}
