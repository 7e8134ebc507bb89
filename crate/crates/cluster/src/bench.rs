//! Local multi-process deployments: one master and k worker processes of this binary,
//! driven by an in-process client.

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use anyhow::{bail, Context};
use clusterpt_core::distribution::Strategy;
use clusterpt_core::protocol::Encoding;
use clusterpt_core::Dims;

use crate::client::{run_client, ClientConfig, PathSpec, RunReport};
use crate::master::BoundAddrs;
use crate::stats::{mean, predicted_fps};

#[derive(Debug, Clone)]
pub struct ClusterSpec {
    /// Binary providing the `master` and `worker` subcommands.
    pub exe: PathBuf,
    pub workers: u32,
    pub strategy: Strategy,
    pub dims: Dims,
    pub per_node_spp: u32,
    pub frames: u64,
    pub scene: String,
    pub encoding: Encoding,
    /// Render pool size of each process.
    pub threads: Option<usize>,
    pub max_depth: Option<u32>,
    pub extra_master_args: Vec<String>,
}

/// A running master with its workers. Children still alive on drop are killed.
pub struct LocalCluster {
    pub addrs: BoundAddrs,
    master: Option<Child>,
    workers: Vec<Child>,
}

impl LocalCluster {
    pub fn launch(spec: &ClusterSpec) -> anyhow::Result<LocalCluster> {
        let mut cmd = Command::new(&spec.exe);
        cmd.arg("master")
            .args(["--listen", "127.0.0.1:0"])
            .args(["--strategy", &spec.strategy.to_string()])
            .args(["--width", &spec.dims.width.to_string(), "--height", &spec.dims.height.to_string()])
            .args(["--spp", &spec.per_node_spp.to_string()])
            .args(["--scene", &spec.scene])
            .args(["--encoding", encoding_name(spec.encoding)])
            .args(["--frames", &spec.frames.to_string()]);
        if spec.workers > 0 {
            cmd.args(["--workers", &vec!["127.0.0.1:0"; spec.workers as usize].join(",")]);
        }
        if let Some(t) = spec.threads {
            cmd.args(["--threads", &t.to_string()]);
        }
        if let Some(d) = spec.max_depth {
            cmd.args(["--max-depth", &d.to_string()]);
        }
        cmd.args(&spec.extra_master_args);
        let mut master = cmd.stdout(Stdio::piped()).spawn().with_context(|| format!("spawn {}", spec.exe.display()))?;
        let stdout = master.stdout.take().expect("piped stdout");
        let mut lines = BufReader::new(stdout).lines();
        let addrs = loop {
            match lines.next() {
                Some(Ok(line)) => {
                    if let Some(a) = BoundAddrs::parse_ready_line(&line) {
                        break a;
                    }
                }
                _ => {
                    let _ = master.kill();
                    bail!("master exited before reporting its addresses");
                }
            }
        };
        // Keep draining so the master never blocks on a full pipe.
        std::thread::spawn(move || for _ in lines {});
        let mut cluster = LocalCluster { addrs, master: Some(master), workers: Vec::new() };
        for addr in cluster.addrs.workers.clone() {
            let mut w = Command::new(&spec.exe);
            w.arg("worker").args(["--connect", &addr.to_string()]).stdout(Stdio::null());
            if let Some(t) = spec.threads {
                w.args(["--threads", &t.to_string()]);
            }
            cluster.workers.push(w.spawn().context("spawn worker")?);
        }
        Ok(cluster)
    }

    pub fn client_addr(&self) -> String {
        self.addrs.client.map(|a| a.to_string()).unwrap_or_default()
    }

    /// Waits for every process and fails if any exited unsuccessfully.
    pub fn wait(mut self) -> anyhow::Result<()> {
        let mut failures = Vec::new();
        if let Some(mut m) = self.master.take() {
            let status = m.wait()?;
            if !status.success() {
                failures.push(format!("master exited with {status}"));
            }
        }
        for (i, mut w) in std::mem::take(&mut self.workers).into_iter().enumerate() {
            let status = w.wait()?;
            if !status.success() {
                failures.push(format!("worker {} exited with {status}", i + 1));
            }
        }
        if !failures.is_empty() {
            bail!(failures.join("; "));
        }
        Ok(())
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        for c in self.master.iter_mut().chain(self.workers.iter_mut()) {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn encoding_name(e: Encoding) -> &'static str {
    match e {
        Encoding::RawRgb8 => "raw",
        Encoding::Png => "png",
        Encoding::Jpeg => "jpeg",
        Encoding::RadianceF32 => "radiance-f32",
    }
}

/// Launches a cluster, drives `frames` frames through it and waits for it to exit.
pub fn run_local(spec: &ClusterSpec, client: ClientConfig) -> anyhow::Result<RunReport> {
    let cluster = LocalCluster::launch(spec)?;
    let report = run_client(ClientConfig { connect: cluster.client_addr(), frames: spec.frames, ..client })?;
    cluster.wait()?;
    if report.partial {
        bail!("run ended after {} of {} frames: {:?}", report.frames.len(), spec.frames, report.error);
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub exe: PathBuf,
    pub worker_counts: Vec<u32>,
    pub strategy: Strategy,
    pub dims: Dims,
    /// Samples per pixel of the merged frame, held fixed across worker counts.
    pub total_spp: u32,
    pub frames: u64,
    pub scene: String,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub workers: u32,
    pub participants: u32,
    pub per_node_spp: u32,
    pub total_spp: u32,
    pub fps: f64,
    pub mean_latency_ms: f64,
    pub master_render_ms: f64,
    pub worker_render_ms: f64,
    pub scene_update_ms: f64,
    pub predicted_fps: f64,
    pub speedup: f64,
}

/// Per-node spp that yields `total_spp` merged samples with `participants` participants.
pub fn per_node_spp(strategy: Strategy, total_spp: u32, participants: u32) -> anyhow::Result<u32> {
    match strategy {
        Strategy::Tile | Strategy::Stride => Ok(total_spp),
        Strategy::Sample if total_spp % participants == 0 => Ok(total_spp / participants),
        Strategy::Sample => bail!("{total_spp} spp cannot be split evenly over {participants} participants"),
    }
}

/// Steady-state summary of a run: the first quarter of frames is treated as warm-up.
pub fn summarize(workers: u32, per_node: u32, report: &RunReport) -> BenchRow {
    let skip = report.stats.len() / 4;
    let rows = &report.stats[skip..];
    let col = |f: fn(&crate::stats::FrameStats) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let received: Vec<f64> = report.frames.iter().skip(skip).map(|f| f.received_ms).collect();
    let master_render_ms = col(|s| s.master_render_ms);
    let worker_render_ms = col(|s| s.worker_render_ms_mean);
    let scene_update_ms = col(|s| s.scene_update_ms);
    BenchRow {
        workers,
        participants: workers + 1,
        per_node_spp: per_node,
        total_spp: report.total_spp,
        fps: crate::client::fps_of(&received),
        mean_latency_ms: report.mean_latency_ms,
        master_render_ms,
        worker_render_ms,
        scene_update_ms,
        predicted_fps: predicted_fps(scene_update_ms, col(|s| s.render_ms())),
        speedup: 1.0,
    }
}

pub fn run_bench(opts: &BenchOptions) -> anyhow::Result<Vec<BenchRow>> {
    let mut rows: Vec<BenchRow> = Vec::new();
    for &w in &opts.worker_counts {
        let per_node = per_node_spp(opts.strategy, opts.total_spp, w + 1)?;
        let spec = ClusterSpec {
            exe: opts.exe.clone(),
            workers: w,
            strategy: opts.strategy,
            dims: opts.dims,
            per_node_spp: per_node,
            frames: opts.frames,
            scene: opts.scene.clone(),
            encoding: Encoding::Png,
            threads: opts.threads,
            max_depth: None,
            extra_master_args: Vec::new(),
        };
        let report = run_local(&spec, ClientConfig { path: PathSpec::Orbit(90.0), ..ClientConfig::default() })?;
        let mut row = summarize(w, per_node, &report);
        if let Some(first) = rows.first() {
            row.speedup = row.fps / first.fps;
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "workers participants node_spp total_spp      fps  latency_ms  master_ms  worker_ms  update_ms  model_fps  speedup\n",
    );
    for r in rows {
        s += &format!(
            "{:>7} {:>12} {:>8} {:>9} {:>8.2} {:>11.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>8.2}\n",
            r.workers,
            r.participants,
            r.per_node_spp,
            r.total_spp,
            r.fps,
            r.mean_latency_ms,
            r.master_render_ms,
            r.worker_render_ms,
            r.scene_update_ms,
            r.predicted_fps,
            r.speedup
        );
    }
    s
}

/// Waits up to `timeout` for `child` to exit.
pub fn wait_timeout(child: &mut Child, timeout: Duration) -> std::io::Result<Option<std::process::ExitStatus>> {
    let deadline = std::time::Instant::now() + timeout;
    loop {
        if let Some(s) = child.try_wait()? {
            return Ok(Some(s));
        }
        if std::time::Instant::now() >= deadline {
            return Ok(None);
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}
