use std::sync::{Arc, OnceLock};

use hugnlp::hugie::{extract, health_info, pretrain_hugie, serve, ExtractionRequest, ExtractionResult, HealthInfo};
use hugnlp::processors::load_dataset;
use hugnlp::training::{RunConfig, TaskModel};

/// A small extraction model shared by every test in this file.
fn model() -> &'static TaskModel<f32> {
    static MODEL: OnceLock<TaskModel<f32>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let train = vec![load_dataset("toy_entities/train").unwrap()];
        let mut cfg = RunConfig::new("toy-tiny", "toy_entities", dir.path().join("ck"));
        cfg.max_seq_length = 40;
        cfg.max_eval_seq_length = 40;
        cfg.learning_rate = 3e-3;
        cfg.num_train_epochs = 2.0;
        cfg.per_device_train_batch_size = 16;
        cfg.do_eval = false;
        pretrain_hugie::<f32>(&train, &[], &cfg).unwrap().model
    })
}

fn post(url: &str, body: &str) -> (u16, String) {
    match ureq::post(url).set("Content-Type", "application/json").send_string(body) {
        Ok(r) => (r.status(), r.into_string().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_string().unwrap()),
        Err(e) => panic!("transport error: {e}"),
    }
}

#[test]
fn health_and_errors() {
    let m = model();
    let handle = serve(Arc::new(m.clone()), health_info(m), "127.0.0.1:0", 2).unwrap();
    let base = format!("http://{}", handle.addr());

    let health: HealthInfo = ureq::get(&format!("{base}/health")).call().unwrap().into_json().unwrap();
    assert_eq!(health.status, "ok");
    assert_eq!(health.types, vec!["location", "person"]);

    let (status, body) = post(&format!("{base}/extract"), "{not json");
    assert_eq!(status, 400);
    assert!(body.contains("\"error\""), "{body}");

    let (status, _) = post(&format!("{base}/extract"), r#"{"text":"","schema_types":["person"]}"#);
    assert_eq!(status, 400);

    let long = "word ".repeat(200);
    let (status, body) = post(&format!("{base}/extract"), &serde_json::json!({"text": long, "schema_types": ["person"]}).to_string());
    assert_eq!(status, 400);
    assert!(body.contains("too long"), "{body}");

    let (status, _) = post(&format!("{base}/nowhere"), "{}");
    assert_eq!(status, 404);
    match ureq::get(&format!("{base}/extract")).call() {
        Err(ureq::Error::Status(code, _)) => assert_eq!(code, 405),
        other => panic!("expected 405, got {other:?}"),
    }
    handle.shutdown();
}

#[test]
fn concurrent_requests_match_library() {
    let m = model();
    let handle = serve(Arc::new(m.clone()), health_info(m), "127.0.0.1:0", 4).unwrap();
    let url = format!("http://{}/extract", handle.addr());
    let test = load_dataset("toy_entities/test").unwrap();

    std::thread::scope(|s| {
        let workers: Vec<_> = (0..100)
            .map(|i| {
                let text = test[i % test.len()].text_a.clone();
                let url = url.clone();
                s.spawn(move || {
                    let req = ExtractionRequest::new(text.clone(), ["person", "location"]);
                    let (status, body) = post(&url, &serde_json::to_string(&req).unwrap());
                    assert_eq!(status, 200, "{body}");
                    let got: ExtractionResult = serde_json::from_str(&body).unwrap();
                    assert_eq!(serde_json::to_string(&got).unwrap(), body);
                    assert_eq!(got, extract(model(), &req).unwrap());
                    for spans in got.0.values() {
                        for sp in spans {
                            let frag: String = text.chars().skip(sp.start).take(sp.end - sp.start).collect();
                            assert_eq!(sp.text, frag);
                        }
                    }
                })
            })
            .collect();
        for w in workers {
            w.join().unwrap();
        }
    });
    handle.shutdown();
}
