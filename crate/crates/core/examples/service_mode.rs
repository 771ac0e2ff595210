//! Two paced backends, a predictor and a scheduler over HTTP in one
//! process.

use std::collections::BTreeMap;
use std::time::Duration;

use blocksim::harness::service::{
    spawn_backend, spawn_predictor, spawn_scheduler, CompletedRequest, DispatchResponse, GenerateRequest,
    PacedClock, PredictorHandle, RemotePredictor, SchedulerService,
};
use blocksim::predictor::CacheMode;
use blocksim::scheduler::DispatcherConfig;
use blocksim::types::{InstanceConfig, InstanceId, RequestId};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = PacedClock::starting_now(1.0);
    let mut configs = BTreeMap::new();
    let mut backends = BTreeMap::new();
    for i in 0..2 {
        let cfg = InstanceConfig::default().with_id(InstanceId(i));
        let (addr, _) = spawn_backend(cfg.clone(), clock, "127.0.0.1:0").await?;
        configs.insert(InstanceId(i), cfg);
        backends.insert(InstanceId(i), format!("http://{addr}"));
    }
    let (paddr, _) = spawn_predictor(CacheMode::Exact, "127.0.0.1:0").await?;
    let predictor = PredictorHandle::Remote(RemotePredictor::new(format!("http://{paddr}"), Duration::from_secs(1)));
    let svc = SchedulerService::new(DispatcherConfig::default(), configs, backends.clone(), predictor, true);
    let (saddr, _) = spawn_scheduler(svc, "127.0.0.1:0").await?;

    let client = reqwest::Client::new();
    for i in 0..12u64 {
        let req = GenerateRequest {
            id: RequestId(i),
            prompt_tokens: 200 + 150 * (i % 5),
            output_tokens: 30 + 20 * (i % 3),
            estimated_output_tokens: None,
        };
        let d: DispatchResponse = client
            .post(format!("http://{saddr}/dispatch"))
            .json(&req)
            .send()
            .await?
            .error_for_status()?
            .json()
            .await?;
        println!("request {i:>2} -> {} at t={:.3}s overhead {:.1}ms", d.instance_id, d.admitted_at, d.service_overhead_s * 1e3);
        tokio::time::sleep(Duration::from_millis(60)).await;
    }
    tokio::time::sleep(Duration::from_secs(2)).await;
    for (id, url) in &backends {
        let done: Vec<CompletedRequest> = client.get(format!("{url}/completed")).send().await?.json().await?;
        for c in done.iter().filter(|c| c.finished_at.is_some()) {
            println!(
                "{id} {}: ttft {:.3}s e2e {:.3}s",
                c.id,
                c.first_token_at.unwrap() - c.admitted_at,
                c.finished_at.unwrap() - c.admitted_at
            );
        }
    }
    Ok(())
}
