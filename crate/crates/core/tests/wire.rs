use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rae_core::blackbox::{LocalOracle, OracleError, QueryOracle};
use rae_core::raster::Image8;
use rae_core::wire::{HttpOracle, HttpOracleConfig, OracleServer, ServeConfig};
use rae_core::zoo::{Arch, Model, ModelSpec, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> Model {
    let spec = ModelSpec::new(Arch::CnnA, 8, 8, 3, 6).unwrap();
    Model::new(spec, Weights::init(&spec, 21)).unwrap()
}

fn image(seed: u64) -> Image8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image8::new(8, 8, 3, (0..192).map(|_| rng.gen()).collect()).unwrap()
}

fn serve(top_k: Option<usize>) -> OracleServer {
    let cfg = ServeConfig { addr: "127.0.0.1:0".into(), top_k, workers: 4, class_names: None };
    OracleServer::start(model(), cfg).unwrap()
}

fn quick(url: String) -> HttpOracleConfig {
    HttpOracleConfig { backoff: Duration::from_millis(1), ..HttpOracleConfig::new(url) }
}

/// Canned-response server; counts requests.
fn fake(responses: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for (status, body) in responses {
            let Ok(req) = server.recv() else { return };
            counter.fetch_add(1, Ordering::SeqCst);
            let _ = req.respond(tiny_http::Response::from_string(body).with_status_code(status));
        }
    });
    (url, hits)
}

#[test]
fn http_matches_local_exactly() {
    let server = serve(None);
    let http = HttpOracle::new(HttpOracleConfig::new(server.url()));
    let local = LocalOracle::new(model(), None);
    for seed in 0..10 {
        let im = image(seed);
        assert_eq!(http.classify(&im).unwrap(), local.classify(&im).unwrap());
    }
}

#[test]
fn concurrent_clients_share_one_server() {
    let server = serve(None);
    let http = Arc::new(HttpOracle::new(HttpOracleConfig { max_in_flight: 2, ..HttpOracleConfig::new(server.url()) }));
    let local = Arc::new(LocalOracle::new(model(), None));
    let handles: Vec<_> = (0..8u64)
        .map(|t| {
            let (http, local) = (http.clone(), local.clone());
            std::thread::spawn(move || {
                for i in 0..10 {
                    let im = image(t * 100 + i);
                    assert_eq!(http.classify(&im).unwrap(), local.classify(&im).unwrap());
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
}

#[test]
fn top_k_is_capped_by_server() {
    let server = serve(Some(3));
    let wide = HttpOracle::new(HttpOracleConfig { top_k: Some(5), ..HttpOracleConfig::new(server.url()) });
    assert_eq!(wide.classify(&image(1)).unwrap().len(), 3);
    let narrow = HttpOracle::new(HttpOracleConfig { top_k: Some(2), ..HttpOracleConfig::new(server.url()) });
    let got = narrow.classify(&image(1)).unwrap();
    assert_eq!(got.len(), 2);
    assert!(got[0].prob >= got[1].prob);
}

#[test]
fn transient_failures_are_retried() {
    let ok = r#"{"labels":[{"name":"2","prob":0.75},{"name":"0","prob":0.25}]}"#;
    let (url, hits) = fake(vec![(503, "busy"), (500, "oops"), (200, ok)]);
    let got = HttpOracle::new(quick(url)).classify(&image(0)).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    assert_eq!((got[0].label, got[0].prob), (2, 0.75));
}

#[test]
fn retries_run_out() {
    let (url, hits) = fake(vec![(503, "busy"); 3]);
    let cfg = HttpOracleConfig { retries: 2, ..quick(url) };
    let err = HttpOracle::new(cfg).classify(&image(0)).unwrap_err();
    assert!(matches!(err, OracleError::Transport(_)), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn malformed_json_is_fatal() {
    let (url, hits) = fake(vec![(200, "{\"labels\": [oops"), (200, "{}")]);
    let err = HttpOracle::new(quick(url)).classify(&image(0)).unwrap_err();
    assert!(matches!(err, OracleError::Protocol(_)), "{err:?}");
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn bad_labels_are_protocol_errors() {
    for body in [
        r#"{"labels":[]}"#,
        r#"{"labels":[{"name":"cat","prob":0.5}]}"#,
        r#"{"labels":[{"name":"1","prob":1.5}]}"#,
    ] {
        let (url, _) = fake(vec![(200, body)]);
        let err = HttpOracle::new(quick(url)).classify(&image(0)).unwrap_err();
        assert!(matches!(err, OracleError::Protocol(_)), "{body}: {err:?}");
    }
}

#[test]
fn class_names_map_to_indices() {
    let (url, _) = fake(vec![(200, r#"{"labels":[{"name":"dog","prob":0.9},{"name":"cat","prob":0.1}]}"#)]);
    let cfg = HttpOracleConfig { class_names: Some(vec!["cat".into(), "dog".into()]), ..quick(url) };
    let got = HttpOracle::new(cfg).classify(&image(0)).unwrap();
    assert_eq!(got.iter().map(|l| l.label).collect::<Vec<_>>(), vec![1, 0]);
}

#[test]
fn server_rejects_bad_requests() {
    let server = serve(None);
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let url = server.url();
    assert_eq!(agent.get(&format!("{url}/classify")).call().unwrap().status(), 405);
    assert_eq!(agent.post(&format!("{url}/other")).send("{}").unwrap().status(), 404);
    assert_eq!(agent.post(&format!("{url}/classify")).send("not json").unwrap().status(), 400);
    let bad_b64 = r#"{"image":"@@@"}"#;
    assert_eq!(agent.post(&format!("{url}/classify")).send(bad_b64).unwrap().status(), 400);
    server.shutdown();
}
