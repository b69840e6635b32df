//! Parameter counts, analytic multiply-accumulate totals and wall-clock
//! throughput of a [`Network`].

use std::fmt;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::assembly::Network;
use crate::error::{Error, Result};

/// Trainable parameters in millions.
pub fn count_params(net: &Network) -> f64 {
    net.store().num_trainable() as f64 / 1e6
}

/// Inference-path multiply-accumulates at `input` = (H, W), in GMac.
pub fn count_macs(net: &Network, input: (usize, usize)) -> Result<f64> {
    let max = net.config().backbone.max_stride();
    if input.0 % max != 0 || input.1 % max != 0 || input.0 == 0 || input.1 == 0 {
        return Err(Error::input(format!(
            "input {}x{} is not a positive multiple of {max}",
            input.0, input.1
        )));
    }
    Ok(net.describe(input)?.total_macs() as f64 / 1e9)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup_iters: usize,
    pub timed_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup_iters: 20,
            timed_iters: 100,
        }
    }
}

/// Exclusive advisory lock held for the duration of a benchmark.
pub struct BenchLock {
    _file: File,
}

impl BenchLock {
    pub fn default_path() -> PathBuf {
        std::env::temp_dir().join("hetnet-bench.lock")
    }

    pub fn acquire(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(path)?;
        file.lock()?;
        Ok(Self { _file: file })
    }
}

/// Frames per second over `timed_iters` batch-1 evaluation forwards on a
/// fixed random input, after `warmup_iters` untimed forwards.
pub fn benchmark_fps(net: &Network, input: (usize, usize), cfg: &BenchConfig) -> Result<f64> {
    if cfg.timed_iters == 0 {
        return Err(Error::config("timed_iters must be at least 1"));
    }
    let store = net.store();
    if store.is_shape_only() {
        return Err(Error::config("cannot time a network built without weights"));
    }
    let _lock = BenchLock::acquire(&BenchLock::default_path())?;
    let x = Tensor::rand(0f32, 1.0, (1, 3, input.0, input.1), store.device())?.to_dtype(store.dtype())?;
    for _ in 0..cfg.warmup_iters {
        net.predict(&x)?;
    }
    let start = Instant::now();
    for _ in 0..cfg.timed_iters {
        // force the result so no work is deferred past the timestamp
        net.predict(&x)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    let elapsed = start.elapsed();
    if elapsed < Duration::from_micros(10 * cfg.timed_iters as u64) {
        log::warn!("benchmark finished in {elapsed:?}; timer resolution may dominate, increase iterations");
    }
    Ok(cfg.timed_iters as f64 / elapsed.as_secs_f64().max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub params_millions: f64,
    pub flops_gmac: f64,
    pub fps: f64,
    pub input_size: (usize, usize),
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub device_descriptor: String,
}

impl EfficiencyReport {
    pub const CSV_HEADER: &'static str = "params_m,flops_gmac,fps,input_h,input_w,warmup_iters,timed_iters,device";

    /// Accounting plus timing; `bench = None` skips timing and reports fps 0.
    pub fn measure(net: &Network, input: (usize, usize), bench: Option<&BenchConfig>) -> Result<Self> {
        let fps = match bench {
            Some(b) => benchmark_fps(net, input, b)?,
            None => 0.0,
        };
        let b = bench.copied().unwrap_or(BenchConfig {
            warmup_iters: 0,
            timed_iters: 0,
        });
        Ok(Self {
            params_millions: count_params(net),
            flops_gmac: count_macs(net, input)?,
            fps,
            input_size: input,
            warmup_iters: b.warmup_iters,
            timed_iters: b.timed_iters,
            device_descriptor: device_descriptor(net.store().device()),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.3},{},{},{},{},{}",
            self.params_millions,
            self.flops_gmac,
            self.fps,
            self.input_size.0,
            self.input_size.1,
            self.warmup_iters,
            self.timed_iters,
            self.device_descriptor.replace(',', ";")
        )
    }
}

impl fmt::Display for EfficiencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>12.2}", "Para.(M)", self.params_millions)?;
        writeln!(f, "{:<12}{:>12.2}", "FLOPs(GMAC)", self.flops_gmac)?;
        writeln!(f, "{:<12}{:>12.2}", "FPS", self.fps)?;
        writeln!(f, "{:<12}{:>12}", "input", format!("{}x{}", self.input_size.0, self.input_size.1))?;
        write!(f, "{:<12}{:>12}", "device", self.device_descriptor)
    }
}

pub fn device_descriptor(device: &Device) -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match device {
        Device::Cpu => format!("cpu ({} {}, {threads} threads)", std::env::consts::OS, std::env::consts::ARCH),
        other => format!("{other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::NetworkConfig;

    #[test]
    fn tiny_macs_scale_quadratically() {
        let net = Network::shape_only(&NetworkConfig::tiny()).unwrap();
        let a = count_macs(&net, (64, 64)).unwrap();
        let b = count_macs(&net, (128, 128)).unwrap();
        let r = b / a;
        assert!((3.9..=4.1).contains(&r), "{r}");
    }

    #[test]
    fn macs_are_additive_over_top_level_modules() {
        let net = Network::shape_only(&NetworkConfig::tiny()).unwrap();
        let t = net.describe((64, 64)).unwrap();
        let parts: u64 = ["backbone.", "mic.", "rsl.", "ge.", "fuse.", "out."]
            .iter()
            .map(|p| t.macs_under(p))
            .sum();
        assert_eq!(parts, t.total_macs());
    }

    #[test]
    fn non_divisible_input_is_rejected() {
        let net = Network::shape_only(&NetworkConfig::tiny()).unwrap();
        assert!(matches!(count_macs(&net, (50, 64)), Err(Error::Input(_))));
    }

    #[test]
    fn fps_is_positive_and_shape_only_is_refused() {
        let net = Network::new(&NetworkConfig::tiny(), 0, DType::F32).unwrap();
        let fps = benchmark_fps(&net, (64, 64), &BenchConfig { warmup_iters: 1, timed_iters: 3 }).unwrap();
        assert!(fps.is_finite() && fps > 0.0);
        let s = Network::shape_only(&NetworkConfig::tiny()).unwrap();
        assert!(benchmark_fps(&s, (64, 64), &BenchConfig::default()).is_err());
    }
}
