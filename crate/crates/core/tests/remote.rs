use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use fairproto_core::backend::remote::{RemoteBackend, RemoteConfig};
use fairproto_core::{Error, GenerationRequest, ImageEncoder, ImageGenerator, ImageRef, Taxonomy, TextEncoder};
use serde_json::{json, Value};
use tiny_http::{Response, Server};

struct Mock {
    url: String,
    hits: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
}

/// Serves the wire contract. The first `fail_first` requests get a 503;
/// `dim` is what the server claims.
fn spawn(fail_first: usize, dim: usize, delay: Duration) -> Mock {
    let server = Arc::new(Server::http("127.0.0.1:0").unwrap());
    let port = server.server_addr().to_ip().unwrap().port();
    let hits = Arc::new(AtomicUsize::new(0));
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    for _ in 0..8 {
        let (server, hits, active, peak) = (server.clone(), hits.clone(), active.clone(), peak.clone());
        thread::spawn(move || {
            for mut req in server.incoming_requests() {
                let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let n = hits.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                thread::sleep(delay);
                let resp = if n < fail_first {
                    Response::from_string("busy").with_status_code(503)
                } else {
                    let v: Value = serde_json::from_str(&body).unwrap();
                    let out = match req.url() {
                        "/v1/embed_text" => embed(v["texts"].as_array().unwrap(), dim),
                        "/v1/embed_image" => embed(v["content_ids"].as_array().unwrap(), dim),
                        "/v1/generate" => {
                            let count = v["count"].as_u64().unwrap();
                            let ids: Vec<String> = (0..count)
                                .map(|i| format!("{}-{}-{}", v["prompt"].as_str().unwrap().len(), v["seed"], i))
                                .collect();
                            json!({ "content_ids": ids })
                        }
                        _ => json!({}),
                    };
                    Response::from_string(out.to_string())
                };
                active.fetch_sub(1, Ordering::SeqCst);
                req.respond(resp).unwrap();
            }
        });
    }
    Mock {
        url: format!("http://127.0.0.1:{port}"),
        hits,
        peak,
    }
}

/// Embedding of item i is [len, i, 1, 1, ...].
fn embed(items: &[Value], dim: usize) -> Value {
    let rows: Vec<Vec<f64>> = items
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut v = vec![1.0; dim];
            v[0] = s.as_str().unwrap().len() as f64;
            v[1] = i as f64;
            v
        })
        .collect();
    json!({ "dim": dim, "embeddings": rows })
}

fn config(url: &str) -> RemoteConfig {
    let mut c = RemoteConfig::new("svc", url, 4);
    c.batch_size = 3;
    c.timeout_secs = 5;
    c
}

fn prompts(n: usize) -> Vec<fairproto_core::RenderedPrompt> {
    let tax = Taxonomy::default();
    let cv = tax.class_value(&"profession".into(), "Doctor").unwrap();
    tax.render_prompts(&cv, &"age".into()).unwrap().into_iter().take(n).collect()
}

#[test]
fn text_batches_preserve_order() {
    let m = spawn(0, 4, Duration::ZERO);
    let b = RemoteBackend::new(config(&m.url)).unwrap();
    let ps = prompts(7);
    let out = b.embed_texts(&ps).unwrap();
    assert_eq!(out.len(), 7);
    // batch_size 3: positions restart per batch.
    let idx: Vec<f64> = out.iter().map(|e| e.values()[1]).collect();
    assert_eq!(idx, vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 0.0]);
    assert_eq!(out[0].values()[0], ps[0].text.len() as f64);
    assert_eq!(m.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn images_and_generation() {
    let m = spawn(0, 4, Duration::ZERO);
    let mut cfg = config(&m.url);
    cfg.generation_settings.insert("steps".into(), "30".into());
    let b = RemoteBackend::new(cfg).unwrap();
    let req = GenerationRequest::new(prompts(1).remove(0), 5, 11).unwrap();
    let refs = b.generate_images(&req).unwrap();
    assert_eq!(refs.len(), 5);
    let prov = refs[4].provenance.as_ref().unwrap();
    assert_eq!((prov.seed, prov.index), (11, 4));
    assert_eq!(prov.settings["steps"], "30");
    let e = b.embed_images(&refs).unwrap();
    assert_eq!(e.len(), 5);
    assert_eq!(b.embed_image(&ImageRef::dataset("abc")).unwrap().values()[0], 3.0);
}

#[test]
fn retries_transient_failures() {
    let m = spawn(2, 4, Duration::ZERO);
    let b = RemoteBackend::new(config(&m.url)).unwrap();
    assert!(b.embed_texts(&prompts(1)).is_ok());
    assert_eq!(m.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn gives_up_with_attempt_count() {
    let m = spawn(usize::MAX, 4, Duration::ZERO);
    let b = RemoteBackend::new(config(&m.url)).unwrap();
    match b.embed_texts(&prompts(1)) {
        Err(Error::BackendUnavailable { attempts, backend, .. }) => {
            assert_eq!(attempts, 3);
            assert_eq!(backend, "svc");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unreachable_endpoint() {
    let mut cfg = config("http://127.0.0.1:9");
    cfg.retries = 0;
    let b = RemoteBackend::new(cfg).unwrap();
    assert!(matches!(
        b.embed_texts(&prompts(1)),
        Err(Error::BackendUnavailable { attempts: 1, .. })
    ));
}

#[test]
fn dimension_mismatch_is_reported() {
    let m = spawn(0, 6, Duration::ZERO);
    let b = RemoteBackend::new(config(&m.url)).unwrap();
    assert!(matches!(
        b.embed_texts(&prompts(1)),
        Err(Error::DimMismatch { expected: 4, actual: 6 })
    ));
}

#[test]
fn in_flight_is_bounded() {
    let m = spawn(0, 4, Duration::from_millis(40));
    let mut cfg = config(&m.url);
    cfg.max_in_flight = 2;
    cfg.batch_size = 1;
    let b = Arc::new(RemoteBackend::new(cfg).unwrap());
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let b = b.clone();
            thread::spawn(move || b.embed_texts(&prompts(2)).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert!(m.peak.load(Ordering::SeqCst) <= 2, "peak {}", m.peak.load(Ordering::SeqCst));
    assert_eq!(m.hits.load(Ordering::SeqCst), 12);
}
