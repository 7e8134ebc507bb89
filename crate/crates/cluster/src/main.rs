use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use clusterpt::bench::{format_table, run_bench, BenchOptions};
use clusterpt::client::{run_client, ClientConfig, PathSpec};
use clusterpt::master::{Master, MasterConfig};
use clusterpt::worker::{run_worker, WorkerConfig};
use clusterpt_core::distribution::Strategy;
use clusterpt_core::protocol::Encoding;
use clusterpt_core::render::DEFAULT_MAX_DEPTH;
use clusterpt_core::Dims;

#[derive(Parser)]
#[command(name = "clusterpt", version, about = "Real-time path tracing on a cluster of local processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accept workers and one client, render and stream frames.
    Master(MasterArgs),
    /// Connect to a master and render a share of every frame.
    Worker(WorkerArgs),
    /// Drive a camera path against a master and report fps, latency and error.
    Client(ClientArgs),
    /// Launch a master and k local workers per row and print a scaling table.
    Bench(BenchArgs),
}

#[derive(Args)]
struct MasterArgs {
    /// Client TCP address.
    #[arg(long)]
    listen: Option<String>,
    /// Viewer WebSocket address.
    #[arg(long)]
    ws_listen: Option<String>,
    /// Comma-separated addresses to accept workers on, one per worker.
    #[arg(long, value_delimiter = ',')]
    workers: Vec<String>,
    #[arg(long, default_value = "stride")]
    strategy: Strategy,
    #[arg(long, default_value_t = 160)]
    width: u32,
    #[arg(long, default_value_t = 90)]
    height: u32,
    /// Samples per pixel rendered by each participant.
    #[arg(long, default_value_t = 8)]
    spp: u32,
    #[arg(long, default_value_t = DEFAULT_MAX_DEPTH)]
    max_depth: u32,
    /// Bundled scene name, a name under --scene-dir, or a .toml path.
    #[arg(long, default_value = "gloss")]
    scene: String,
    #[arg(long)]
    scene_dir: Option<PathBuf>,
    #[arg(long, default_value = "png")]
    encoding: Encoding,
    #[arg(long, default_value = "off", value_parser = parse_on_off, action = clap::ArgAction::Set)]
    denoise: bool,
    /// CSV when the path ends in .csv, JSON otherwise.
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Frame count, or "infinite" to run until the client leaves.
    #[arg(long, default_value = "infinite", value_parser = parse_frames)]
    frames: FrameLimit,
    /// Tile size as WxH for the tile strategy.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    tile_size: (u32, u32),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    connect: String,
    #[arg(long)]
    scene_dir: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    connect: String,
    #[arg(long, default_value_t = 100)]
    frames: u64,
    /// "static", "orbit", "orbit:<degrees>" or a JSON keyframe file.
    #[arg(long, default_value = "static")]
    camera_path: PathSpec,
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long)]
    dump_frames: Option<PathBuf>,
    /// Reference image (PFM for radiance, or PNG/JPEG) for RMSE.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Worker counts, one table row each.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
    workers: Vec<u32>,
    #[arg(long, default_value = "stride")]
    strategy: Strategy,
    #[arg(long, default_value_t = 160)]
    width: u32,
    #[arg(long, default_value_t = 90)]
    height: u32,
    /// Samples per pixel of the merged frame.
    #[arg(long, default_value_t = 32)]
    spp: u32,
    #[arg(long, default_value_t = 30)]
    frames: u64,
    #[arg(long, default_value = "gloss")]
    scene: String,
    /// Render pool size of each process.
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

#[derive(Debug, Clone, Copy)]
struct FrameLimit(Option<u64>);

fn parse_frames(s: &str) -> Result<FrameLimit, String> {
    if s == "infinite" {
        return Ok(FrameLimit(None));
    }
    s.parse().map(|n| FrameLimit(Some(n))).map_err(|e| format!("frames: {e}"))
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    Ok((w.parse().map_err(|e| format!("{e}"))?, h.parse().map_err(|e| format!("{e}"))?))
}

fn master(a: MasterArgs) -> anyhow::Result<()> {
    let listen = match (&a.listen, &a.ws_listen) {
        (None, None) => Some("127.0.0.1:7878".to_string()),
        (l, _) => l.clone(),
    };
    let master = Master::bind(MasterConfig {
        listen,
        ws_listen: a.ws_listen,
        workers: a.workers,
        strategy: a.strategy,
        dims: Dims::new(a.width, a.height),
        spp: a.spp,
        max_depth: a.max_depth,
        scene: a.scene,
        scene_dir: a.scene_dir,
        encoding: a.encoding,
        denoise: a.denoise,
        stats_out: a.stats_out,
        frames: a.frames.0,
        tile_size: a.tile_size,
        seed: a.seed,
        threads: a.threads,
        ..MasterConfig::default()
    })?;
    let mut out = std::io::stdout();
    writeln!(out, "{}", master.addrs().ready_line())?;
    out.flush()?;
    let report = master.run()?;
    writeln!(out, "DONE frames={} dropped={}", report.frames, report.dropped_frames)?;
    Ok(())
}

fn worker(a: WorkerArgs) -> anyhow::Result<()> {
    let report = run_worker(WorkerConfig {
        connect: a.connect,
        scene_dir: a.scene_dir,
        threads: a.threads,
        ..WorkerConfig::default()
    })?;
    println!("DONE participant={} frames={} reason={}", report.participant, report.frames, report.shutdown_reason);
    Ok(())
}

fn client(a: ClientArgs) -> anyhow::Result<()> {
    let report = run_client(ClientConfig {
        connect: a.connect,
        frames: a.frames,
        path: a.camera_path,
        report_out: a.report_out,
        dump_frames: a.dump_frames,
        reference: a.reference,
        ..ClientConfig::default()
    })?;
    print!(
        "frames={} fps={:.2} mean_latency_ms={:.2} total_spp={}",
        report.frames.len(),
        report.fps,
        report.mean_latency_ms,
        report.total_spp
    );
    if let Some(r) = report.rmse {
        print!(" rmse={r:.6}");
    }
    println!();
    if report.partial {
        bail!("partial run: {}", report.error.as_deref().unwrap_or("master ended the session early"));
    }
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let exe = std::env::current_exe().context("locate this executable")?;
    let rows = run_bench(&BenchOptions {
        exe,
        worker_counts: a.workers,
        strategy: a.strategy,
        dims: Dims::new(a.width, a.height),
        total_spp: a.spp,
        frames: a.frames,
        scene: a.scene,
        threads: a.threads,
    })?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::Master(a) => master(a),
        Command::Worker(a) => worker(a),
        Command::Client(a) => client(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
