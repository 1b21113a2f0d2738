//! Drive the HTTP API in-process: upload toy assets, compose a spec, run a
//! generation job, then resubmit with the vehicles erased and compare.
//!
//! Pass checkpoint paths to use trained models; otherwise tiny ones are fitted
//! in a few seconds, so the scenes are rough.
//!
//! cargo run --release -p ssed-service --example http_roundtrip -- [ae.ssck diffusion.ssck]

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::Request;
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use ssed::autoencoder::{train_autoencoder, AeArch, AeTrainConfig};
use ssed::diffusion::{train_diffusion, DiffusionTrainConfig, LatentExample};
use ssed::trimask::{asset_to_bytes, scene_assets};
use ssed::voxel::{generate_toy_scene, generate_toy_set, ToySceneSpec, TOY_CLASS_NAMES, VEHICLE};
use ssed_service::cli::{load_ae, load_diffusion};
use ssed_service::{router, AppState, JobQueue, ModelGenerator, QueueConfig, Store};
use tower::ServiceExt;

type BoxResult<T> = Result<T, Box<dyn std::error::Error>>;

async fn call(app: &Router, method: &str, uri: &str, body: Body) -> BoxResult<Value> {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json").body(body)?;
    let resp = app.clone().oneshot(req).await?;
    let status = resp.status();
    let bytes = resp.into_body().collect().await?.to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    println!("{method:<4} {uri:<40} {status}");
    if !status.is_success() {
        return Err(format!("{uri}: {v}").into());
    }
    Ok(v)
}

async fn run_job(app: &Router, spec: &Value, seed: u64) -> BoxResult<Value> {
    let job = call(app, "POST", "/jobs", Body::from(json!({"spec": spec, "seed": seed, "sampler": {"steps": 20}}).to_string())).await?;
    let id = job["id"].as_str().ok_or("job id")?.to_string();
    loop {
        let v = call(app, "GET", &format!("/jobs/{id}"), Body::empty()).await?;
        match v["state"].as_str() {
            Some("done") => return Ok(v),
            Some("failed") => return Err(format!("job failed: {}", v["error"]).into()),
            _ => tokio::time::sleep(Duration::from_millis(200)).await,
        }
    }
}

fn generator(args: &[String]) -> BoxResult<ModelGenerator> {
    if let [a, d] = args {
        return Ok(ModelGenerator::new(load_ae(a.as_ref())?, load_diffusion(d.as_ref())?)?);
    }
    let scenes = generate_toy_set(&ToySceneSpec::new([32, 32, 8], 100), 4)?;
    let arch = AeArch { c_z: 4, enc_width: 8, dec_width: 32, dec_layers: 2, ..AeArch::default() };
    let ae = train_autoencoder(&scenes, &AeTrainConfig { arch, epochs: 10, lr: 1e-2, ..Default::default() }, |_| {})?.model;
    let examples = scenes.iter().map(|g| LatentExample::from_scene(&ae, g)).collect::<Result<Vec<_>, _>>()?;
    let cfg = DiffusionTrainConfig { base: 8, iterations: 100, timesteps: 50, ..Default::default() };
    let diff = train_diffusion(&examples, ae.stats().cloned(), &cfg, |_| {})?.model;
    Ok(ModelGenerator::new(ae, diff)?)
}

fn main() -> BoxResult<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let gen = generator(&args)?;
    let [gx, gy, gz] = gen.grid_dims();
    let dir = tempfile::tempdir()?;
    let store = Arc::new(Store::open(dir.path())?);
    let jobs = JobQueue::start(store.clone(), Some(Arc::new(gen)), QueueConfig::default())?;
    let app = router(Arc::new(AppState { store, jobs }));

    tokio::runtime::Runtime::new()?.block_on(async {
        call(&app, "GET", "/health", Body::empty()).await?;
        let names: Vec<String> = TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        let (seed, scene) = (5000..5100)
            .map(|s| (s, generate_toy_scene(&ToySceneSpec::new([gx, gy, gz], s))))
            .find(|(_, g)| g.as_ref().map_or(true, |g| g.class_count(VEHICLE) > 0))
            .ok_or("no scene")?;
        let mut ids = Vec::new();
        for a in scene_assets(&scene?, &format!("toy{seed}"), &names, 2, 1)? {
            call(&app, "POST", "/assets", Body::from(asset_to_bytes(&a))).await?;
            ids.push(a.id);
        }
        let dims = [gx / 2, gy / 2, gz];
        let mut spec = json!({"dims": dims, "num_classes": 8, "base": ids.iter().map(|i| json!({"asset": i})).collect::<Vec<_>>()});
        let preview = call(&app, "POST", "/scenes/compose", Body::from(spec.to_string())).await?;
        println!("composed mask set {} with {} non-empty classes", preview["maskset"], preview["planes"].as_array().map_or(0, Vec::len));

        let before = run_job(&app, &spec, 1).await?;
        spec["edits"] = json!([{"op": "erase", "class": VEHICLE, "bbox": {"lo": [0, 0, 0], "hi": dims}}]);
        let after = run_job(&app, &spec, 1).await?;
        for (label, job) in [("original", &before), ("vehicles erased", &after)] {
            let out = job["output"].as_str().ok_or("output id")?;
            let view = call(&app, "GET", &format!("/scenes/{out}?format=json"), Body::empty()).await?;
            let voxels = view["voxels"].as_array().ok_or("voxels")?;
            let vehicles = voxels.iter().filter(|v| v[3] == json!(VEHICLE)).count();
            let t = &job["timings"];
            println!(
                "{label:<16} {} voxels, {vehicles} vehicle voxels, {} steps in {:.2}s",
                voxels.len(),
                t["steps"].as_array().map_or(0, Vec::len),
                t["total"].as_f64().unwrap_or(0.0)
            );
        }
        let a = before["output"].as_str().unwrap_or_default();
        let b = after["output"].as_str().unwrap_or_default();
        let eval = call(&app, "POST", "/eval", Body::from(json!({"pred": b, "gt": a}).to_string())).await?;
        println!("edited vs original: IoU {:.3}, mIoU {:.3}", eval["iou"].as_f64().unwrap_or(0.0), eval["miou"].as_f64().unwrap_or(0.0));
        Ok(())
    })
}
