//! Fixed-capacity single-producer/single-consumer queues and a frame-pipelined
//! stage runner built on them.
//!
//! The queue keeps two monotonically increasing indices. The producer owns `tail`,
//! the consumer owns `head`; each publishes with release and reads the other's with
//! acquire, so a slot's contents are visible before the index that covers it.
//! Blocked threads spin, then yield, then park with a bounded timeout; the other
//! side unparks them only when they have flagged that they are parked.

use std::cell::UnsafeCell;
use std::fmt;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, Thread};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const DEFAULT_CAPACITY: usize = 3;

const SPINS: u32 = 64;
const YIELDS: u32 = 16;
const MAX_PARK: Duration = Duration::from_millis(1);

#[derive(Default)]
struct Waiter {
    parked: AtomicBool,
    thread: Mutex<Option<Thread>>,
}

impl Waiter {
    fn park(&self, ready: impl Fn() -> bool, deadline: Option<Instant>) {
        *self.thread.lock().unwrap() = Some(thread::current());
        self.parked.store(true, Ordering::SeqCst);
        if !ready() {
            let mut nap = MAX_PARK;
            if let Some(d) = deadline {
                nap = nap.min(d.saturating_duration_since(Instant::now()));
            }
            thread::park_timeout(nap);
        }
        self.parked.store(false, Ordering::SeqCst);
    }

    fn wake(&self) {
        std::sync::atomic::fence(Ordering::SeqCst);
        if self.parked.load(Ordering::SeqCst) {
            if let Some(t) = self.thread.lock().unwrap().as_ref() {
                t.unpark();
            }
        }
    }
}

struct Shared<T> {
    slots: Box<[UnsafeCell<MaybeUninit<T>>]>,
    head: AtomicUsize,
    tail: AtomicUsize,
    high_water: AtomicUsize,
    producer_alive: AtomicBool,
    consumer_alive: AtomicBool,
    consumer_wait: Waiter,
    producer_wait: Waiter,
}

// Slots are only touched by the side that owns them under the index discipline.
unsafe impl<T: Send> Sync for Shared<T> {}
unsafe impl<T: Send> Send for Shared<T> {}

impl<T> Drop for Shared<T> {
    fn drop(&mut self) {
        let head = *self.head.get_mut();
        let tail = *self.tail.get_mut();
        let cap = self.slots.len();
        for i in head..tail {
            unsafe { (*self.slots[i % cap].get()).assume_init_drop() };
        }
    }
}

/// Creates a queue holding at most `capacity` items and returns its two ends.
pub fn ring_queue<T: Send>(capacity: usize) -> (Producer<T>, Consumer<T>) {
    assert!(capacity >= 1, "ring queue capacity must be at least 1");
    let slots = (0..capacity).map(|_| UnsafeCell::new(MaybeUninit::uninit())).collect();
    let shared = Arc::new(Shared {
        slots,
        head: AtomicUsize::new(0),
        tail: AtomicUsize::new(0),
        high_water: AtomicUsize::new(0),
        producer_alive: AtomicBool::new(true),
        consumer_alive: AtomicBool::new(true),
        consumer_wait: Waiter::default(),
        producer_wait: Waiter::default(),
    });
    (Producer { shared: shared.clone() }, Consumer { shared })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PopError {
    #[error("timed out waiting for an item")]
    Timeout,
    #[error("producer hung up and the queue is empty")]
    Disconnected,
}

#[derive(PartialEq, Eq, Error)]
pub enum PushError<T> {
    #[error("timed out waiting for space")]
    Timeout(T),
    #[error("consumer hung up")]
    Disconnected(T),
}

impl<T> fmt::Debug for PushError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PushError::Timeout(_) => f.write_str("Timeout(..)"),
            PushError::Disconnected(_) => f.write_str("Disconnected(..)"),
        }
    }
}

impl<T> PushError<T> {
    pub fn into_inner(self) -> T {
        match self {
            PushError::Timeout(t) | PushError::Disconnected(t) => t,
        }
    }
}

fn backoff(step: &mut u32) -> bool {
    *step += 1;
    if *step <= SPINS {
        std::hint::spin_loop();
        true
    } else if *step <= SPINS + YIELDS {
        thread::yield_now();
        true
    } else {
        false
    }
}

pub struct Producer<T> {
    shared: Arc<Shared<T>>,
}

impl<T: Send> Producer<T> {
    pub fn capacity(&self) -> usize {
        self.shared.slots.len()
    }

    pub fn len(&self) -> usize {
        let s = &self.shared;
        s.tail.load(Ordering::Relaxed) - s.head.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `item`, or hands it back if the queue is full.
    pub fn try_push(&mut self, item: T) -> Result<(), T> {
        let s = &*self.shared;
        let tail = s.tail.load(Ordering::Relaxed);
        let head = s.head.load(Ordering::Acquire);
        let cap = s.slots.len();
        if tail - head == cap {
            return Err(item);
        }
        unsafe { (*s.slots[tail % cap].get()).write(item) };
        s.tail.store(tail + 1, Ordering::Release);
        s.high_water.fetch_max(tail + 1 - head, Ordering::Relaxed);
        s.consumer_wait.wake();
        Ok(())
    }

    /// Appends `item`, waiting up to `timeout` (forever if `None`) for space.
    pub fn push_blocking(&mut self, mut item: T, timeout: Option<Duration>) -> Result<(), PushError<T>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut step = 0;
        loop {
            if !self.shared.consumer_alive.load(Ordering::Acquire) {
                return Err(PushError::Disconnected(item));
            }
            match self.try_push(item) {
                Ok(()) => return Ok(()),
                Err(back) => item = back,
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(PushError::Timeout(item));
            }
            if !backoff(&mut step) {
                let s = &*self.shared;
                let cap = s.slots.len();
                s.producer_wait.park(
                    || {
                        s.tail.load(Ordering::Relaxed) - s.head.load(Ordering::Acquire) < cap
                            || !s.consumer_alive.load(Ordering::Acquire)
                    },
                    deadline,
                );
            }
        }
    }

    /// Largest occupancy observed at any push.
    pub fn high_water(&self) -> usize {
        self.shared.high_water.load(Ordering::Relaxed)
    }
}

impl<T> Drop for Producer<T> {
    fn drop(&mut self) {
        self.shared.producer_alive.store(false, Ordering::Release);
        self.shared.consumer_wait.wake();
    }
}

pub struct Consumer<T> {
    shared: Arc<Shared<T>>,
}

impl<T: Send> Consumer<T> {
    pub fn capacity(&self) -> usize {
        self.shared.slots.len()
    }

    pub fn len(&self) -> usize {
        let s = &self.shared;
        s.tail.load(Ordering::Acquire) - s.head.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn try_pop(&mut self) -> Option<T> {
        let s = &*self.shared;
        let head = s.head.load(Ordering::Relaxed);
        let tail = s.tail.load(Ordering::Acquire);
        if head == tail {
            return None;
        }
        let item = unsafe { (*s.slots[head % s.slots.len()].get()).assume_init_read() };
        s.head.store(head + 1, Ordering::Release);
        s.producer_wait.wake();
        Some(item)
    }

    /// Oldest item, waiting up to `timeout` (forever if `None`).
    pub fn pop_blocking(&mut self, timeout: Option<Duration>) -> Result<T, PopError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut step = 0;
        loop {
            if let Some(item) = self.try_pop() {
                return Ok(item);
            }
            if !self.shared.producer_alive.load(Ordering::Acquire) {
                // A final push may have landed between the pop and the check.
                return self.try_pop().ok_or(PopError::Disconnected);
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Err(PopError::Timeout);
            }
            if !backoff(&mut step) {
                let s = &*self.shared;
                s.consumer_wait.park(
                    || s.tail.load(Ordering::Acquire) != s.head.load(Ordering::Relaxed) || !s.producer_alive.load(Ordering::Acquire),
                    deadline,
                );
            }
        }
    }
}

impl<T> Drop for Consumer<T> {
    fn drop(&mut self) {
        self.shared.consumer_alive.store(false, Ordering::Release);
        self.shared.producer_wait.wake();
    }
}

/// What flows between pipeline threads: a frame or the shutdown sentinel.
#[derive(Debug, Clone, PartialEq)]
pub enum Packet<T> {
    Frame(T),
    Stop,
}

pub type StageFn<T> = Box<dyn FnMut(u64, T) -> Result<T, String> + Send>;

pub struct Stage<T> {
    pub name: String,
    pub run: StageFn<T>,
}

impl<T> Stage<T> {
    pub fn new(name: impl Into<String>, run: impl FnMut(u64, T) -> Result<T, String> + Send + 'static) -> Stage<T> {
        Stage { name: name.into(), run: Box::new(run) }
    }
}

/// How frames enter the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    /// Admit as soon as the first stage is free; queues absorb the difference and
    /// backpressure stalls the front.
    Eager,
    /// Run frame 0 through alone, then admit one frame per slowest-observed-stage
    /// interval, so frames never wait in a queue and latency is the stage sum.
    Paced,
}

/// A linear chain of stages, one thread each, joined by one queue per adjacent pair.
pub struct PipelineSpec<T> {
    pub stages: Vec<Stage<T>>,
    pub capacity: usize,
    pub admission: Admission,
}

impl<T> PipelineSpec<T> {
    pub fn new(stages: Vec<Stage<T>>) -> PipelineSpec<T> {
        PipelineSpec { stages, capacity: DEFAULT_CAPACITY, admission: Admission::Paced }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::Invalid("a pipeline needs at least one stage".into()));
        }
        if self.capacity == 0 {
            return Err(PipelineError::Invalid("queue capacity must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("invalid pipeline: {0}")]
    Invalid(String),
    #[error("stage {stage:?} failed on frame {frame}: {message}")]
    Stage { stage: String, frame: u64, message: String },
}

/// Start and end of one stage for one frame, relative to the run's start.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Interval {
    pub start: Duration,
    pub end: Duration,
}

impl Interval {
    pub fn len(&self) -> Duration {
        self.end.saturating_sub(self.start)
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineStats {
    pub stage_names: Vec<String>,
    /// `frames[f][s]` is stage `s`'s interval for frame `f`.
    pub frames: Vec<Vec<Interval>>,
}

impl PipelineStats {
    pub fn busy(&self, stage: usize) -> Duration {
        self.frames.iter().map(|f| f[stage].len()).sum()
    }

    pub fn latency(&self, frame: usize) -> Duration {
        let f = &self.frames[frame];
        f[f.len() - 1].end.saturating_sub(f[0].start)
    }

    fn steady(&self) -> std::ops::Range<usize> {
        let n = self.frames.len();
        (n / 4).max(1).min(n)..n
    }

    /// Mean interval between consecutive completions, ignoring the warm-up quarter.
    pub fn frame_period(&self) -> Duration {
        let r = self.steady();
        if r.len() < 2 {
            return self.frames.first().map(|f| f[f.len() - 1].end).unwrap_or_default();
        }
        let last = |i: usize| self.frames[i][self.stage_names.len() - 1].end;
        (last(r.end - 1) - last(r.start)) / (r.len() as u32 - 1)
    }

    /// Mean end-to-end latency, ignoring the warm-up quarter.
    pub fn mean_latency(&self) -> Duration {
        let r = self.steady();
        if r.is_empty() {
            return Duration::ZERO;
        }
        let n = r.len() as u32;
        r.map(|i| self.latency(i)).sum::<Duration>() / n
    }

    /// One row per frame: frame, then start/end milliseconds per stage, then latency.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame");
        for name in &self.stage_names {
            out.push_str(&format!(",{name}_start_ms,{name}_end_ms"));
        }
        out.push_str(",latency_ms\n");
        for (i, f) in self.frames.iter().enumerate() {
            out.push_str(&i.to_string());
            for iv in f {
                out.push_str(&format!(",{:.3},{:.3}", ms(iv.start), ms(iv.end)));
            }
            out.push_str(&format!(",{:.3}\n", ms(self.latency(i))));
        }
        out
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub struct PipelineRun<T> {
    pub stats: PipelineStats,
    pub outputs: Vec<T>,
}

struct Job<T> {
    frame: u64,
    item: T,
    times: Vec<Interval>,
}

const POLL: Duration = Duration::from_millis(20);

struct Run {
    origin: Instant,
    abort: AtomicBool,
    max_stage_ns: AtomicU64,
    completed: AtomicU64,
    error: Mutex<Option<PipelineError>>,
}

impl Run {
    fn fail(&self, err: PipelineError) {
        self.error.lock().unwrap().get_or_insert(err);
        self.abort.store(true, Ordering::SeqCst);
    }

    fn aborted(&self) -> bool {
        self.abort.load(Ordering::SeqCst)
    }
}

enum Inlet<T> {
    Source { make: Box<dyn FnMut(u64) -> T + Send>, next: u64, n_frames: u64, admission: Admission, last: Option<Instant> },
    Queue(Consumer<Packet<Job<T>>>),
}

impl<T: Send> Inlet<T> {
    fn next(&mut self, run: &Run) -> Option<Job<T>> {
        match self {
            Inlet::Source { make, next, n_frames, admission, last } => {
                if *next >= *n_frames || run.aborted() {
                    return None;
                }
                if *admission == Admission::Paced && *next > 0 {
                    if *next == 1 {
                        while run.completed.load(Ordering::SeqCst) == 0 {
                            if run.aborted() {
                                return None;
                            }
                            thread::sleep(Duration::from_micros(200));
                        }
                    } else if let Some(prev) = *last {
                        let period = Duration::from_nanos(run.max_stage_ns.load(Ordering::SeqCst));
                        let at = prev + period;
                        let now = Instant::now();
                        if at > now {
                            thread::sleep(at - now);
                        }
                    }
                }
                *last = Some(Instant::now());
                let frame = *next;
                *next += 1;
                Some(Job { frame, item: make(frame), times: Vec::new() })
            }
            Inlet::Queue(rx) => loop {
                match rx.pop_blocking(Some(POLL)) {
                    Ok(Packet::Frame(job)) => return Some(job),
                    Ok(Packet::Stop) | Err(PopError::Disconnected) => return None,
                    Err(PopError::Timeout) if run.aborted() => return None,
                    Err(PopError::Timeout) => {}
                }
            },
        }
    }
}

fn forward<T: Send>(tx: &mut Producer<Packet<Job<T>>>, mut packet: Packet<Job<T>>, run: &Run) -> bool {
    loop {
        match tx.push_blocking(packet, Some(POLL)) {
            Ok(()) => return true,
            Err(PushError::Disconnected(_)) => return false,
            Err(PushError::Timeout(p)) => {
                if run.aborted() {
                    return false;
                }
                packet = p;
            }
        }
    }
}

/// Runs `n_frames` items produced by `source` through the stages, one thread per
/// stage, and returns the last stage's outputs in frame order. A stage error stops
/// the run and is reported with the failing frame.
pub fn run_pipeline<T: Send + 'static>(
    spec: PipelineSpec<T>,
    n_frames: u64,
    source: impl FnMut(u64) -> T + Send + 'static,
) -> Result<PipelineRun<T>, PipelineError> {
    spec.validate()?;
    let n_stages = spec.stages.len();
    let stage_names: Vec<String> = spec.stages.iter().map(|s| s.name.clone()).collect();
    let run = Arc::new(Run {
        origin: Instant::now(),
        abort: AtomicBool::new(false),
        max_stage_ns: AtomicU64::new(0),
        completed: AtomicU64::new(0),
        error: Mutex::new(None),
    });

    let mut inlet = Some(Inlet::Source {
        make: Box::new(source),
        next: 0,
        n_frames,
        admission: spec.admission,
        last: None,
    });
    let mut handles = Vec::with_capacity(n_stages);
    for (s, mut stage) in spec.stages.into_iter().enumerate() {
        let mut input = inlet.take().expect("each stage has one inlet");
        let mut output = if s + 1 < n_stages {
            let (tx, rx) = ring_queue(spec.capacity);
            inlet = Some(Inlet::Queue(rx));
            Some(tx)
        } else {
            None
        };
        let run = run.clone();
        let handle = thread::Builder::new()
            .name(format!("stage-{}", stage.name))
            .spawn(move || {
                let mut done = Vec::new();
                while let Some(mut job) = input.next(&run) {
                    let start = run.origin.elapsed();
                    let out = match (stage.run)(job.frame, job.item) {
                        Ok(out) => out,
                        Err(message) => {
                            run.fail(PipelineError::Stage { stage: stage.name.clone(), frame: job.frame, message });
                            break;
                        }
                    };
                    let end = run.origin.elapsed();
                    run.max_stage_ns.fetch_max((end - start).as_nanos() as u64, Ordering::SeqCst);
                    job.times.push(Interval { start, end });
                    job.item = out;
                    match output.as_mut() {
                        Some(tx) => {
                            if !forward(tx, Packet::Frame(job), &run) {
                                break;
                            }
                        }
                        None => {
                            done.push(job);
                            run.completed.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                }
                if let Some(tx) = output.as_mut() {
                    forward(tx, Packet::Stop, &run);
                }
                done
            })
            .expect("spawn pipeline stage thread");
        handles.push(handle);
    }

    let mut finished = Vec::new();
    for h in handles {
        match h.join() {
            Ok(done) => finished = done,
            Err(_) => run.fail(PipelineError::Invalid("a stage thread panicked".into())),
        }
    }
    if let Some(err) = run.error.lock().unwrap().take() {
        return Err(err);
    }
    let mut frames = Vec::with_capacity(finished.len());
    let mut outputs = Vec::with_capacity(finished.len());
    for job in finished {
        frames.push(job.times);
        outputs.push(job.item);
    }
    Ok(PipelineRun { stats: PipelineStats { stage_names, frames }, outputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_one() {
        let (mut tx, mut rx) = ring_queue::<u32>(1);
        assert_eq!(tx.try_push(1), Ok(()));
        assert_eq!(tx.try_push(2), Err(2));
        assert_eq!(tx.len(), 1);
        assert_eq!(rx.try_pop(), Some(1));
        assert_eq!(rx.try_pop(), None);
        assert_eq!(tx.try_push(3), Ok(()));
        assert_eq!(rx.pop_blocking(Some(Duration::ZERO)), Ok(3));
    }

    #[test]
    fn full_push_leaves_queue_unchanged() {
        let (mut tx, mut rx) = ring_queue::<u32>(3);
        for i in 0..3 {
            tx.try_push(i).unwrap();
        }
        assert_eq!(tx.try_push(9), Err(9));
        assert_eq!(tx.high_water(), 3);
        assert_eq!((0..3).map(|_| rx.try_pop().unwrap()).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn prefilled_pop_is_immediate() {
        let (mut tx, mut rx) = ring_queue::<&str>(2);
        tx.try_push("a").unwrap();
        let t = Instant::now();
        assert_eq!(rx.pop_blocking(Some(Duration::from_secs(5))), Ok("a"));
        assert!(t.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn empty_pop_times_out_after_timeout() {
        let (_tx, mut rx) = ring_queue::<u8>(2);
        let t = Instant::now();
        assert_eq!(rx.pop_blocking(Some(Duration::from_millis(10))), Err(PopError::Timeout));
        assert!(t.elapsed() >= Duration::from_millis(10));
    }

    #[test]
    fn hangups_are_reported() {
        let (tx, mut rx) = ring_queue::<u8>(2);
        drop(tx);
        assert_eq!(rx.pop_blocking(None), Err(PopError::Disconnected));
        let (mut tx, rx) = ring_queue::<u8>(1);
        tx.try_push(1).unwrap();
        drop(rx);
        assert!(matches!(tx.push_blocking(2, None), Err(PushError::Disconnected(2))));
    }

    #[test]
    fn items_left_in_queue_are_dropped() {
        let marker = Arc::new(());
        let (mut tx, rx) = ring_queue::<Arc<()>>(4);
        tx.try_push(marker.clone()).unwrap();
        tx.try_push(marker.clone()).unwrap();
        assert_eq!(Arc::strong_count(&marker), 3);
        drop(tx);
        drop(rx);
        assert_eq!(Arc::strong_count(&marker), 1);
    }

    #[test]
    fn blocked_producer_resumes() {
        let (mut tx, mut rx) = ring_queue::<u32>(1);
        let h = thread::spawn(move || {
            for i in 0..100 {
                tx.push_blocking(i, None).unwrap();
            }
        });
        for i in 0..100 {
            assert_eq!(rx.pop_blocking(Some(Duration::from_secs(5))), Ok(i));
        }
        h.join().unwrap();
    }

    #[test]
    fn single_stage_passes_items_through() {
        let spec = PipelineSpec::new(vec![Stage::new("double", |_, x: u64| Ok(x * 2))]);
        let run = run_pipeline(spec, 5, |f| f).unwrap();
        assert_eq!(run.outputs, vec![0, 2, 4, 6, 8]);
        assert_eq!(run.stats.frames.len(), 5);
    }

    #[test]
    fn stage_error_carries_frame() {
        let spec = PipelineSpec::new(vec![
            Stage::new("a", |_, x: u64| Ok(x)),
            Stage::new("b", |f, x: u64| if f == 3 { Err("boom".into()) } else { Ok(x) }),
        ]);
        let err = run_pipeline(spec, 10, |f| f).err().unwrap();
        assert_eq!(err, PipelineError::Stage { stage: "b".into(), frame: 3, message: "boom".into() });
    }

    #[test]
    fn invalid_specs() {
        let spec: PipelineSpec<u8> = PipelineSpec::new(vec![]);
        assert!(matches!(run_pipeline(spec, 1, |_| 0), Err(PipelineError::Invalid(_))));
        let mut spec = PipelineSpec::new(vec![Stage::new("a", |_, x: u8| Ok(x))]);
        spec.capacity = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn csv_has_row_per_frame() {
        let spec = PipelineSpec::new(vec![Stage::new("a", |_, x: u8| Ok(x)), Stage::new("b", |_, x: u8| Ok(x))]);
        let run = run_pipeline(spec, 3, |_| 0).unwrap();
        let csv = run.stats.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "frame,a_start_ms,a_end_ms,b_start_ms,b_end_ms,latency_ms");
        assert_eq!(lines.len(), 4);
    }
}
