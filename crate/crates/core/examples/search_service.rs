//! Serves dual-recall search over HTTP on a local port, sends a few image
//! queries and prints the ranked results with the activity log.
//!
//! `cargo run --release --example search_service -- [queries]`

use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use mmsearch::annindex::HnswConfig;
use mmsearch::catalog::Catalog;
use mmsearch::engine::{
    read_activity_log, router, ActivityLog, DualIndexSet, EngineConfig, SearchEngine, SearchResponse,
};
use mmsearch::lifecycle::{build_index, I2iExtractor, MiemExtractor};
use mmsearch::towers::{PixelEmbedder, TowerConfig, TowerModel};
use mmsearch::trainer::{generate_synthetic_logs, SyntheticCatalogSpec};
use serde_json::json;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};

fn post(addr: SocketAddr, path: &str, body: &str) -> std::io::Result<String> {
    let mut stream = TcpStream::connect(addr)?;
    let req = format!(
        "POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes())?;
    let mut out = String::new();
    stream.read_to_string(&mut out)?;
    Ok(out.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default())
}

fn main() -> mmsearch::Result<()> {
    let queries: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let corpus = generate_synthetic_logs(&SyntheticCatalogSpec {
        classes: 20,
        ..SyntheticCatalogSpec::default()
    })?;
    let cfg = TowerConfig::default();
    let model = Arc::new(TowerModel::new(cfg)?);
    let (size, patch) = cfg.grid();
    let (i2i, _) = build_index(&corpus.catalog, &I2iExtractor::new(PixelEmbedder::new(size, patch)), HnswConfig::new(size * size))?;
    let (miem, _) = build_index(&corpus.catalog, &MiemExtractor::new(&model)?, HnswConfig::new(cfg.out_dim))?;
    let set = DualIndexSet::new(i2i, miem, Catalog::from_records(&corpus.catalog)?)?;
    let dir = tempfile::tempdir()?;
    let log_path = dir.path().join("activity.jsonl");
    let engine = Arc::new(SearchEngine::new(model, set, ActivityLog::open(&log_path)?, EngineConfig::default())?);

    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_io().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    println!("serving on http://{addr}");
    let app = router(engine.clone());
    rt.spawn(async move { axum::serve(listener, app).await });

    for (i, record) in corpus.catalog.iter().step_by(17).take(queries).enumerate() {
        let body = json!({
            "request_id": format!("demo-{i}"),
            "image_b64": B64.encode(record.images[0].bytes()),
            "page_size": 5,
        });
        let resp: SearchResponse = serde_json::from_str(&post(addr, "/search", &body.to_string())?)?;
        println!("\nquery: first image of {} (class {})", record.product_id, record.category);
        for item in &resp.items {
            println!("  #{} {} score {:.3}", item.rank, item.product_id, item.score);
        }
        println!("  timings {:?}", resp.timings);
    }
    let click = json!({ "request_id": "demo-0", "kind": "click", "product_id": corpus.catalog[0].product_id });
    post(addr, "/event", &click.to_string())?;

    engine.activity_log().flush()?;
    let events = read_activity_log(&log_path)?;
    println!("\n{} activity events, last: {:?}", events.len(), events.last().map(|e| (&e.request_id, e.kind)));
    Ok(())
}
