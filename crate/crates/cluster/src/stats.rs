//! Per-frame timing breakdown reported by the master.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use clusterpt_core::protocol::Stats;
use serde::{Deserialize, Serialize};

/// One row of the timing breakdown. Times are milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame_id: u64,
    pub master_render_ms: f64,
    /// Indexed by worker, in participant order.
    pub worker_render_ms: Vec<f64>,
    pub worker_render_ms_mean: f64,
    pub scene_update_ms: f64,
    pub merge_ms: f64,
    pub tone_map_ms: f64,
    pub compression_ms: f64,
    pub denoise_ms: f64,
    pub distribution_overhead_ms: f64,
    /// Frames per second leaving the master over a sliding window.
    pub client_fps: f64,
    pub total_spp: u32,
    pub encoded_bytes: usize,
    /// Stage intervals relative to master start.
    pub render_start_ms: f64,
    pub render_end_ms: f64,
    pub post_start_ms: f64,
    pub post_end_ms: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Frame rate the cluster sustains when per-frame scene update and rendering
/// dominate: 90% of the reciprocal of their sum.
pub fn predicted_fps(scene_update_ms: f64, render_ms: f64) -> f64 {
    0.9 / ((scene_update_ms + render_ms) / 1e3)
}

impl FrameStats {
    /// The slower of the master's local render and the mean worker render.
    pub fn render_ms(&self) -> f64 {
        self.master_render_ms.max(self.worker_render_ms_mean)
    }

    pub fn to_message(&self) -> Stats {
        let mut fields = vec![
            ("master_render_ms".to_string(), self.master_render_ms),
            ("worker_render_ms_mean".to_string(), self.worker_render_ms_mean),
            ("render_ms".to_string(), self.render_ms()),
            ("scene_update_ms".to_string(), self.scene_update_ms),
            ("merge_ms".to_string(), self.merge_ms),
            ("tone_map_ms".to_string(), self.tone_map_ms),
            ("compression_ms".to_string(), self.compression_ms),
            ("denoise_ms".to_string(), self.denoise_ms),
            ("distribution_overhead_ms".to_string(), self.distribution_overhead_ms),
            ("client_fps".to_string(), self.client_fps),
            ("total_spp".to_string(), self.total_spp as f64),
            ("encoded_bytes".to_string(), self.encoded_bytes as f64),
            ("render_start_ms".to_string(), self.render_start_ms),
            ("render_end_ms".to_string(), self.render_end_ms),
            ("post_start_ms".to_string(), self.post_start_ms),
            ("post_end_ms".to_string(), self.post_end_ms),
        ];
        for (i, w) in self.worker_render_ms.iter().enumerate() {
            fields.push((format!("worker_render_ms.{}", i + 1), *w));
        }
        Stats { frame_id: self.frame_id, fields }
    }

    pub fn from_message(s: &Stats) -> FrameStats {
        let g = |n: &str| s.get(n).unwrap_or(0.0);
        let mut worker_render_ms = Vec::new();
        while let Some(v) = s.get(&format!("worker_render_ms.{}", worker_render_ms.len() + 1)) {
            worker_render_ms.push(v);
        }
        FrameStats {
            frame_id: s.frame_id,
            master_render_ms: g("master_render_ms"),
            worker_render_ms,
            worker_render_ms_mean: g("worker_render_ms_mean"),
            scene_update_ms: g("scene_update_ms"),
            merge_ms: g("merge_ms"),
            tone_map_ms: g("tone_map_ms"),
            compression_ms: g("compression_ms"),
            denoise_ms: g("denoise_ms"),
            distribution_overhead_ms: g("distribution_overhead_ms"),
            client_fps: g("client_fps"),
            total_spp: g("total_spp") as u32,
            encoded_bytes: g("encoded_bytes") as usize,
            render_start_ms: g("render_start_ms"),
            render_end_ms: g("render_end_ms"),
            post_start_ms: g("post_start_ms"),
            post_end_ms: g("post_end_ms"),
        }
    }

    pub fn csv_header(workers: usize) -> String {
        let mut h = String::from(
            "frame_id,master_render_ms,worker_render_ms_mean,scene_update_ms,merge_ms,tone_map_ms,compression_ms,\
             denoise_ms,distribution_overhead_ms,client_fps,total_spp,encoded_bytes,render_start_ms,render_end_ms,\
             post_start_ms,post_end_ms",
        );
        for i in 1..=workers {
            h.push_str(&format!(",worker_render_ms_{i}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{},{},{:.3},{:.3},{:.3},{:.3}",
            self.frame_id,
            self.master_render_ms,
            self.worker_render_ms_mean,
            self.scene_update_ms,
            self.merge_ms,
            self.tone_map_ms,
            self.compression_ms,
            self.denoise_ms,
            self.distribution_overhead_ms,
            self.client_fps,
            self.total_spp,
            self.encoded_bytes,
            self.render_start_ms,
            self.render_end_ms,
            self.post_start_ms,
            self.post_end_ms,
        );
        for w in &self.worker_render_ms {
            r.push_str(&format!(",{w:.3}"));
        }
        r
    }
}

/// Writes rows as CSV when the path ends in `.csv`, otherwise as a JSON array.
pub fn write_stats(path: &Path, rows: &[FrameStats]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if path.extension().is_some_and(|e| e == "csv") {
        let workers = rows.first().map_or(0, |r| r.worker_render_ms.len());
        writeln!(f, "{}", FrameStats::csv_header(workers))?;
        for r in rows {
            writeln!(f, "{}", r.csv_row())?;
        }
    } else {
        serde_json::to_writer_pretty(&mut f, rows)?;
        writeln!(f)?;
    }
    f.flush()
}

/// Frame rate over the last `window` completions.
#[derive(Debug)]
pub struct FpsWindow {
    times: VecDeque<Instant>,
    window: usize,
}

impl FpsWindow {
    pub fn new(window: usize) -> FpsWindow {
        FpsWindow { times: VecDeque::with_capacity(window + 1), window: window.max(2) }
    }

    pub fn tick(&mut self, at: Instant) -> f64 {
        self.times.push_back(at);
        if self.times.len() > self.window {
            self.times.pop_front();
        }
        self.fps()
    }

    pub fn fps(&self) -> f64 {
        match (self.times.front(), self.times.back()) {
            (Some(a), Some(b)) if self.times.len() >= 2 && b > a => {
                (self.times.len() - 1) as f64 / b.duration_since(*a).as_secs_f64()
            }
            _ => 0.0,
        }
    }

    /// Mean interval between completions in the window.
    pub fn mean_period_ms(&self) -> Option<f64> {
        let f = self.fps();
        (f > 0.0).then(|| 1e3 / f)
    }
}
