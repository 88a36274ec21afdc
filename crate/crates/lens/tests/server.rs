mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::Fixture;
use http_body_util::BodyExt;
use lens_core::lab::{random_cross_mask, record_ks};
use lens_core::model::{EncoderKind, PruneMask, VlTransformer};
use lens_core::train::Profile;
use reasoning_lens::checkpoint;
use reasoning_lens::config::LabConfig;
use reasoning_lens::server::{round6, round_json, router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Served {
    fx: Fixture,
    oracle: VlTransformer,
    ckpt: std::path::PathBuf,
    app: Router,
    state: Arc<AppState>,
}

const N: usize = 24;

fn served() -> Served {
    let fx = Fixture::new(21);
    let oracle = fx.model(Profile::Desk, EncoderKind::OracleSymbolic, 3);
    let baseline = fx.model(Profile::Mini, EncoderKind::NoisyDense, 4);
    let (ckpt, _) = fx.dump("oracle", &oracle, N);
    fx.dump("baseline", &baseline, N / 2);
    let specs = vec![("oracle".to_string(), fx.path("dump-oracle")), ("baseline".to_string(), fx.path("dump-baseline"))];
    let state = Arc::new(AppState::load(&specs, &LabConfig::default()).unwrap());
    let app = router(state.clone());
    Served { fx, oracle, ckpt, app, state }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value, axum::http::HeaderMap) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap(), headers)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, v, _) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, v)
}

async fn whatif(app: &Router, id: u64, pruned: &[String]) -> (StatusCode, Value) {
    let req = Request::post(format!("/whatif/oracle/{id}"))
        .header("content-type", "application/json")
        .body(Body::from(json!({ "pruned": pruned }).to_string()))
        .unwrap();
    let (s, v, _) = call(app, req).await;
    (s, v)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-5 * b.abs().max(1e-12)
}

fn f64s(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn logits_json(l: &[f32]) -> Value {
    round_json(json!(l))
}

#[tokio::test]
async fn models_and_pages() {
    let s = served();
    let (st, v) = get(&s.app, "/models").await;
    assert_eq!(st, StatusCode::OK);
    let names: Vec<&str> = v["models"].as_array().unwrap().iter().map(|m| m["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["oracle", "baseline"]);
    assert_eq!(v["models"][0]["heads"].as_array().unwrap().len(), 136);
    assert_eq!(v["models"][0]["cross_heads"], 80);
    assert_eq!(v["models"][1]["samples"], N / 2);

    let mut seen = Vec::new();
    for offset in (0..N).step_by(10) {
        let (st, page) = get(&s.app, &format!("/instances?model=oracle&offset={offset}&limit=10")).await;
        assert_eq!(st, StatusCode::OK);
        let items = page["items"].as_array().unwrap();
        assert!(items.len() <= 10);
        seen.extend(items.iter().map(|i| i["id"].as_u64().unwrap()));
    }
    let expected: Vec<u64> = s.fx.ds.val[..N].iter().map(|x| x.id).collect();
    assert_eq!(seen, expected, "pages partition the dump");
    let (_, past) = get(&s.app, "/instances?model=oracle&offset=1000").await;
    assert!(past["items"].as_array().unwrap().is_empty());

    assert_eq!(get(&s.app, "/instances?model=nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&s.app, "/instance/nope/1").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&s.app, "/instance/oracle/999999").await.0, StatusCode::NOT_FOUND);
    let res = s.app.clone().oneshot(Request::get("/nowhere").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(res.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn instance_matches_the_dump() {
    let s = served();
    let m = &s.state.models[0];
    for i in [0, 7, N - 1] {
        let id = m.dump.manifest.samples[i].id;
        let (st, v) = get(&s.app, &format!("/instance/oracle/{id}")).await;
        assert_eq!(st, StatusCode::OK);
        let (_, again) = get(&s.app, &format!("/instance/oracle/{id}")).await;
        assert_eq!(v, again, "repeated reads are identical");

        let sample = &s.fx.ds.val[i];
        assert_eq!(v["question"], sample.question.text);
        assert_eq!(v["scene"]["objects"].as_array().unwrap().len(), sample.scene.objects.len());
        assert_eq!(v["logits"], logits_json(&m.dump.manifest.samples[i].logits));
        let has_baseline = i < N / 2;
        assert_eq!(v["predictions"].get("baseline").is_some(), has_baseline);

        let records = m.dump.records(i).unwrap();
        let attention = v["attention"].as_array().unwrap();
        assert_eq!(attention.len(), 136);
        for (r, a) in records.iter().zip(attention) {
            assert_eq!(a["head"], r.head.to_string());
            let rows = a["weights"].as_array().unwrap();
            assert_eq!((rows.len(), a["cols"].as_u64().unwrap() as usize), (r.rows, r.cols));
            for (q, row) in rows.iter().enumerate() {
                let row = f64s(row);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-4);
                for (c, w) in row.iter().enumerate() {
                    assert!(close(*w, r.weights[q * r.cols + c] as f64), "{} {q} {c}", r.head);
                }
            }
            let ks: Vec<u64> = record_ks(r, 0.9).unwrap().into_iter().map(|(k, _)| k as u64).collect();
            let served: Vec<u64> = a["k"].as_array().unwrap().iter().map(|k| k.as_u64().unwrap()).collect();
            assert_eq!(served, ks, "{}", r.head);
        }
    }
}

#[tokio::test]
async fn whatif_recomputes_with_pruned_heads() {
    let s = served();
    let sha = checkpoint::file_sha256(&s.ckpt).unwrap();
    let m = &s.state.models[0];
    let config = s.oracle.config().clone();
    for i in [2, 11] {
        let id = m.dump.manifest.samples[i].id;
        let input = s.fx.ds.input(&s.fx.ds.val[i], lens_core::data::InputKind::Oracle);

        let (st, v) = whatif(&s.app, id, &[]).await;
        assert_eq!(st, StatusCode::OK);
        assert_eq!(v["logits"], logits_json(&m.dump.manifest.samples[i].logits));
        assert!(v["changed"].as_array().unwrap().is_empty());

        let all: Vec<String> = config.all_heads().iter().map(|h| h.to_string()).collect();
        let (_, v) = whatif(&s.app, id, &all).await;
        let mask = PruneMask::new(&config, config.all_heads()).unwrap();
        let out = s.oracle.forward(&input, &mask, true).unwrap();
        assert_eq!(v["index"], out.prediction());
        assert_eq!(v["logits"], logits_json(&out.logits));
        for c in v["changed"].as_array().unwrap() {
            for row in c["weights"].as_array().unwrap() {
                let row = f64s(row);
                let u = 1.0 / row.len() as f64;
                assert!(row.iter().all(|w| close(*w, u)), "pruned rows are uniform");
            }
        }

        let cross: Vec<String> = config.cross_heads().iter().map(|h| h.to_string()).collect();
        let (_, v) = whatif(&s.app, id, &cross).await;
        let out = s.oracle.forward(&input, &random_cross_mask(&config, 1.0, 0).unwrap(), true).unwrap();
        assert_eq!(v["logits"], logits_json(&out.logits));
        assert_eq!(v["pruned"].as_array().unwrap().len(), 80);

        let (_, v) = whatif(&s.app, id, &["vl,1,2".to_string()]).await;
        let changed: Vec<&str> = v["changed"].as_array().unwrap().iter().map(|c| c["head"].as_str().unwrap()).collect();
        assert!(changed.contains(&"vl,1,2"));
        assert!(!changed.iter().any(|h| h.ends_with(",0,0") && h.starts_with("lang")), "earlier layers are untouched");
    }

    for bad in ["zz,1,1", "vl,9,0", "vl,0"] {
        let (st, v) = whatif(&s.app, m.dump.manifest.samples[0].id, &[bad.to_string()]).await;
        assert_eq!(st, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(v["entry"], bad);
    }
    let (st, _) = whatif(&s.app, 999_999, &[]).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(checkpoint::file_sha256(&s.ckpt).unwrap(), sha, "what-if never writes the checkpoint");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_whatifs_agree() {
    let s = served();
    let id = s.state.models[0].dump.manifest.samples[5].id;
    let heads = vec!["lv,0,1".to_string(), "vv,1,3".to_string()];
    let (_, first) = whatif(&s.app, id, &heads).await;
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let (app, heads) = (s.app.clone(), heads.clone());
            tokio::spawn(async move { whatif(&app, id, &heads).await })
        })
        .collect();
    for t in tasks {
        let (st, v) = t.await.unwrap();
        assert_eq!(st, StatusCode::OK);
        assert_eq!(v, first);
    }
}

#[tokio::test]
async fn analysis_summarizes_heads() {
    let s = served();
    let (st, v) = get(&s.app, "/analysis?model=oracle&bins=10").await;
    assert_eq!(st, StatusCode::OK);
    let heads = v["heads"].as_array().unwrap();
    assert_eq!(heads.len(), 136);
    assert_eq!(heads.iter().filter(|h| h["cross"] == true).count(), 80);
    assert_eq!(v["samples"], N);
    for h in heads {
        let hist: u64 = h["histogram"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).sum();
        assert_eq!(hist, h["observations"].as_u64().unwrap());
    }
    let m = &s.state.models[0];
    let stat = m.table.stat(0, |_| true);
    assert_eq!(heads[0]["median_ratio"].as_f64(), stat.median_ratio().map(round6));

    let f = s.fx.ds.val[..N].iter().flat_map(|x| x.question.functions.iter()).next().unwrap().as_str();
    let (_, only) = get(&s.app, &format!("/analysis?model=oracle&function={f}")).await;
    let expect = s.fx.ds.val[..N].iter().filter(|x| x.question.functions.iter().any(|g| g.as_str() == f)).count();
    assert_eq!(only["samples"], expect);
    assert_eq!(get(&s.app, "/analysis?function=nonsense").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&s.app, "/analysis?model=nope").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_header_is_set() {
    let s = served();
    let req = Request::get("/models").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let (_, _, headers) = call(&s.app, req).await;
    assert_eq!(headers["access-control-allow-origin"], "*");
}
