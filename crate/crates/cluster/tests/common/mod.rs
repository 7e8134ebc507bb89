#![allow(dead_code)]

use std::thread::JoinHandle;
use std::time::Duration;

use clusterpt::client::{run_client, ClientConfig, RunReport};
use clusterpt::master::{Master, MasterConfig, MasterReport};
use clusterpt::worker::{run_worker, WorkerConfig, WorkerReport};
use clusterpt::ThreadRegistry;
use clusterpt_core::distribution::Strategy;
use clusterpt_core::protocol::Encoding;
use clusterpt_core::Dims;

pub struct Deployment {
    pub registry: ThreadRegistry,
    pub client_addr: String,
    pub master: JoinHandle<anyhow::Result<MasterReport>>,
    pub workers: Vec<JoinHandle<anyhow::Result<WorkerReport>>>,
}

pub struct Outcome {
    pub registry: ThreadRegistry,
    pub master: MasterReport,
    pub workers: Vec<WorkerReport>,
    pub client: RunReport,
}

/// Small, fast master settings; `workers` listeners on ephemeral ports.
pub fn master_config(workers: usize, strategy: Strategy, dims: Dims, spp: u32) -> MasterConfig {
    MasterConfig {
        listen: Some("127.0.0.1:0".into()),
        workers: vec!["127.0.0.1:0".into(); workers],
        strategy,
        dims,
        spp,
        encoding: Encoding::RawRgb8,
        threads: Some(1),
        abort_floor: Duration::from_secs(20),
        ..MasterConfig::default()
    }
}

/// Starts a master and real in-process workers sharing `master.registry`.
pub fn deploy(config: MasterConfig) -> Deployment {
    let registry = config.registry.clone();
    let master = Master::bind(config).expect("bind");
    let addrs = master.addrs();
    let master = std::thread::spawn(move || master.run());
    let workers = addrs
        .workers
        .iter()
        .map(|a| {
            let config = WorkerConfig { connect: a.to_string(), threads: Some(1), registry: registry.clone(), ..WorkerConfig::default() };
            std::thread::spawn(move || run_worker(config))
        })
        .collect();
    Deployment { registry, client_addr: addrs.client.unwrap().to_string(), master, workers }
}

pub fn client_config(d: &Deployment, frames: u64) -> ClientConfig {
    ClientConfig { connect: d.client_addr.clone(), frames, registry: d.registry.clone(), ..ClientConfig::default() }
}

impl Deployment {
    pub fn finish(self, client: RunReport) -> Outcome {
        let master = self.master.join().unwrap().expect("master");
        let workers = self.workers.into_iter().map(|w| w.join().unwrap().expect("worker")).collect();
        Outcome { registry: self.registry, master, workers, client }
    }
}

/// Runs a whole deployment for `frames` frames with the client settings adjusted by `tweak`.
pub fn run(config: MasterConfig, frames: u64, tweak: impl FnOnce(&mut ClientConfig)) -> Outcome {
    let d = deploy(config);
    let mut c = client_config(&d, frames);
    tweak(&mut c);
    let report = run_client(c).expect("client");
    assert!(!report.partial, "partial run: {:?}", report.error);
    d.finish(report)
}

pub struct WsDeployment {
    pub addrs: clusterpt::master::BoundAddrs,
    pub master: JoinHandle<anyhow::Result<MasterReport>>,
    pub workers: Vec<JoinHandle<anyhow::Result<WorkerReport>>>,
}

/// Like [`deploy`] but keeps every bound address, for masters without a TCP client port.
pub fn deploy_with(config: MasterConfig) -> WsDeployment {
    let registry = config.registry.clone();
    let master = Master::bind(config).expect("bind");
    let addrs = master.addrs();
    let master = std::thread::spawn(move || master.run());
    let workers = addrs
        .workers
        .iter()
        .map(|a| {
            let config = WorkerConfig { connect: a.to_string(), threads: Some(1), registry: registry.clone(), ..WorkerConfig::default() };
            std::thread::spawn(move || run_worker(config))
        })
        .collect();
    WsDeployment { addrs, master, workers }
}
