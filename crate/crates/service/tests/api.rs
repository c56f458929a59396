use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use dm2rm::data::{generate_synthetic, DatasetBundle, SyntheticSpec};
use dm2rm::encoders::Providers;
use dm2rm::lang::LangPipeline;
use dm2rm::model::RankerModel;
use dm2rm::{Config, ImageRecord};
use dm2rm_service::{
    aggregate, replay, router, AppState, ErrorBody, QuerySession, SelectAck, SelectionMetrics,
    ServiceConfig, SELECTIONS_LOG, SESSIONS_LOG,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const INSTRUCTION: &str = "Pick up the cup and put it on the table.";

fn dataset() -> DatasetBundle {
    generate_synthetic(&SyntheticSpec {
        environments: 4,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn state_with(dataset: DatasetBundle, loaded: bool, config: ServiceConfig) -> Arc<AppState> {
    let model_config = Config::tiny();
    let model = loaded.then(|| RankerModel::new(&model_config).unwrap());
    Arc::new(
        AppState::new(
            dataset,
            model,
            Providers::synthetic(&model_config),
            LangPipeline::offline(),
            config,
        )
        .unwrap(),
    )
}

fn app(loaded: bool) -> Router {
    router(state_with(dataset(), loaded, ServiceConfig::default()))
}

struct Reply {
    status: StatusCode,
    content_type: Option<String>,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        assert_eq!(
            self.content_type.as_deref(),
            Some("application/json"),
            "status {}",
            self.status
        );
        serde_json::from_slice(&self.body).unwrap()
    }

    fn parse<T: serde::de::DeserializeOwned>(&self) -> T {
        serde_json::from_value(self.json()).unwrap()
    }

    fn error(&self) -> ErrorBody {
        let e: ErrorBody = self.parse();
        assert_eq!(e.status, self.status.as_u16());
        e
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        headers,
        body,
    }
}

async fn rank(app: &Router, env: &str, topk: Option<usize>) -> QuerySession {
    let mut body = json!({"instruction": INSTRUCTION, "environment_id": env});
    if let Some(k) = topk {
        body["topk"] = json!(k);
    }
    let r = call(app, Method::POST, "/rank", Some(body)).await;
    assert_eq!(r.status, StatusCode::OK);
    r.parse()
}

async fn select(app: &Router, query_id: &str, mode: &str, image_id: &str) -> Reply {
    call(
        app,
        Method::POST,
        "/select",
        Some(json!({"query_id": query_id, "mode": mode, "image_id": image_id})),
    )
    .await
}

#[tokio::test]
async fn rank_returns_two_default_lists() {
    let app = app(true);
    let r = call(
        &app,
        Method::POST,
        "/rank",
        Some(json!({"instruction": INSTRUCTION, "environment_id": "env000"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    for key in [
        "query_id",
        "instruction",
        "paraphrase",
        "phrases",
        "environment_id",
        "topk",
        "target",
        "receptacle",
        "selections",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let s: QuerySession = r.parse();
    assert_eq!(s.topk, 10);
    assert_eq!(s.candidate_count, 8);
    assert_eq!(s.target.len(), 8);
    assert_eq!(s.receptacle.len(), 8);
    assert_eq!(s.phrases.target, "the cup");
    assert_eq!(s.phrases.receptacle, "the table");
    assert!(s.paraphrase.contains("cup"));
    let ids = |l: &[dm2rm_service::PresentedImage]| {
        l.iter()
            .map(|p| p.image_id.clone())
            .collect::<BTreeSet<_>>()
    };
    assert_eq!(ids(&s.target), ids(&s.receptacle));
    for (i, p) in s.target.iter().enumerate() {
        assert_eq!(p.rank, i + 1);
    }
    assert!(s.target.windows(2).all(|w| w[0].score >= w[1].score));
}

#[tokio::test]
async fn default_topk_truncates_large_pools() {
    let bundle = generate_synthetic(&SyntheticSpec {
        environments: 4,
        images_per_environment: 12,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let app = router(state_with(bundle, true, ServiceConfig::default()));
    let s = rank(&app, "env001", None).await;
    assert_eq!(
        (s.target.len(), s.receptacle.len(), s.candidate_count),
        (10, 10, 12)
    );
    let s = rank(&app, "env001", Some(3)).await;
    assert_eq!((s.target.len(), s.topk), (3, 3));
}

#[tokio::test]
async fn small_pools_give_short_lists() {
    let mut bundle = dataset();
    let keep: BTreeSet<String> = bundle
        .environment_images("env002")
        .iter()
        .take(3)
        .map(|r| r.id.clone())
        .collect();
    let samples_ok = |ids: &BTreeSet<String>, t: &str, r: &str| ids.contains(t) && ids.contains(r);
    bundle.samples.retain(|s| {
        s.environment_id != "env002"
            || samples_ok(&keep, &s.target_image_id, &s.receptacle_image_id)
    });
    bundle
        .images
        .retain(|i: &ImageRecord| i.environment_id != "env002" || keep.contains(&i.id));
    let app = router(state_with(bundle, true, ServiceConfig::default()));
    let s = rank(&app, "env002", Some(10)).await;
    assert_eq!((s.target.len(), s.receptacle.len()), (3, 3));
}

#[tokio::test]
async fn rank_errors() {
    let app = app(true);
    let r = call(
        &app,
        Method::POST,
        "/rank",
        Some(json!({"instruction": "  ", "environment_id": "env000"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    r.error();
    let r = call(
        &app,
        Method::POST,
        "/rank",
        Some(json!({"instruction": INSTRUCTION, "environment_id": "nowhere"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    r.error();
    let r = call(
        &app,
        Method::POST,
        "/rank",
        Some(json!({"instruction": INSTRUCTION, "environment_id": "env000", "topk": 0})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let r = call(
        &app,
        Method::POST,
        "/rank",
        Some(json!({"environment_id": "env000"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    r.error();
    let res = app
        .clone()
        .oneshot(
            Request::post("/rank")
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from("{not json"))
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(res.status(), StatusCode::BAD_REQUEST);

    let unloaded = self::app(false);
    let r = call(
        &unloaded,
        Method::POST,
        "/rank",
        Some(json!({"instruction": INSTRUCTION, "environment_id": "env000"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    r.error();
}

#[tokio::test]
async fn selection_lifecycle() {
    let app = app(true);
    let s = rank(&app, "env000", None).await;
    let r = select(&app, &s.query_id, "target", &s.target[0].image_id).await;
    assert_eq!(r.status, StatusCode::OK);
    let ack: SelectAck = r.parse();
    assert_eq!(ack.event.rank_of_selection, 1);
    assert!(!ack.replaced);

    let r = select(&app, &s.query_id, "target", &s.target[2].image_id).await;
    let ack: SelectAck = r.parse();
    assert_eq!(ack.event.rank_of_selection, 3);
    assert!(ack.replaced);

    let r = call(
        &app,
        Method::GET,
        &format!("/sessions/{}", s.query_id),
        None,
    )
    .await;
    let live: QuerySession = r.parse();
    assert_eq!(
        live.selections.target.unwrap().selected_image_id,
        s.target[2].image_id
    );
    assert!(live.selections.receptacle.is_none());

    let r = select(&app, &s.query_id, "receptacle", "env003-img00").await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    r.error();
    let r = select(&app, "missing", "receptacle", &s.receptacle[0].image_id).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    r.error();
    let r = select(&app, &s.query_id, "sideways", &s.receptacle[0].image_id).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let short = rank(&app, "env000", Some(2)).await;
    let r = select(&app, &short.query_id, "target", &s.target[5].image_id).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn selection_aggregates() {
    let app = app(true);
    let fresh: SelectionMetrics = call(&app, Method::GET, "/metrics/selections", None)
        .await
        .parse();
    assert_eq!(
        (
            fresh.target.attempts,
            fresh.target.successes,
            fresh.target.rate
        ),
        (0, 0, None)
    );

    for _ in 0..2 {
        let s = rank(&app, "env001", None).await;
        select(&app, &s.query_id, "target", &s.target[0].image_id).await;
        select(&app, &s.query_id, "receptacle", &s.receptacle[1].image_id).await;
    }
    let m: SelectionMetrics = call(&app, Method::GET, "/metrics/selections", None)
        .await
        .parse();
    assert_eq!((m.target.attempts, m.target.successes), (2, 2));
    assert_eq!((m.receptacle.attempts, m.receptacle.successes), (2, 2));
    assert_eq!((m.overall.attempts, m.overall.successes), (2, 2));

    let s = rank(&app, "env001", None).await;
    select(&app, &s.query_id, "target", &s.target[0].image_id).await;
    rank(&app, "env001", None).await;
    let m: SelectionMetrics = call(&app, Method::GET, "/metrics/selections", None)
        .await
        .parse();
    assert_eq!(m.sessions, 4);
    assert_eq!((m.target.attempts, m.target.successes), (4, 3));
    assert_eq!((m.receptacle.attempts, m.receptacle.successes), (4, 2));
    assert_eq!(m.overall.successes, 2);
    assert_eq!(m.target.rate, Some(0.75));
}

#[tokio::test]
async fn logs_replay_to_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        log_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let state = state_with(dataset(), true, config.clone());
    let app = router(state.clone());
    let mut ids = Vec::new();
    for env in ["env000", "env001", "env002"] {
        let s = rank(&app, env, Some(5)).await;
        select(&app, &s.query_id, "target", &s.target[1].image_id).await;
        ids.push(s);
    }
    select(&app, &ids[0].query_id, "target", &ids[0].target[4].image_id).await;
    select(
        &app,
        &ids[2].query_id,
        "receptacle",
        &ids[2].receptacle[0].image_id,
    )
    .await;

    let live: SelectionMetrics = call(&app, Method::GET, "/metrics/selections", None)
        .await
        .parse();
    let replayed = replay(dir.path()).unwrap();
    assert_eq!(aggregate(replayed.values()), live);
    for s in &ids {
        assert_eq!(&replayed[&s.query_id], &state.session(&s.query_id).unwrap());
    }
    let lines = |name| {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .count()
    };
    assert_eq!(lines(SESSIONS_LOG), 3);
    assert_eq!(lines(SELECTIONS_LOG), 5);

    let restarted = router(state_with(dataset(), true, config));
    let again: SelectionMetrics = call(&restarted, Method::GET, "/metrics/selections", None)
        .await
        .parse();
    assert_eq!(again, live);
    let r = call(
        &restarted,
        Method::GET,
        &format!("/sessions/{}", ids[0].query_id),
        None,
    )
    .await;
    let s: QuerySession = r.parse();
    assert_eq!(s.selections.target.unwrap().rank_of_selection, 5);
}

#[tokio::test]
async fn images_are_served_as_png() {
    let bundle = dataset();
    let expected = bundle.load_image("env000-img03").unwrap();
    let app = app(true);
    let r = call(&app, Method::GET, "/images/env000-img03", None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type.as_deref(), Some("image/png"));
    let decoded = image::load_from_memory_with_format(&r.body, image::ImageFormat::Png)
        .unwrap()
        .to_rgb8();
    assert_eq!(decoded.dimensions(), (expected.width(), expected.height()));
    assert_eq!(decoded.as_raw(), expected.data());

    let r = call(&app, Method::GET, "/images/nope", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    r.error();
    let r = call(&app, Method::GET, "/sessions/nope", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    r.error();
    let r = call(&app, Method::GET, "/no/such/route", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    r.error();
}

#[tokio::test]
async fn concurrent_ranking_matches_serial() {
    let app = app(true);
    let envs = ["env000", "env001", "env002", "env003"];
    let mut serial = Vec::new();
    for env in envs.iter().cycle().take(16) {
        let s = rank(&app, env, None).await;
        serial.push((s.target, s.receptacle));
    }
    let handles: Vec<_> = envs
        .iter()
        .cycle()
        .take(16)
        .map(|env| {
            let app = app.clone();
            let env = env.to_string();
            tokio::spawn(async move { rank(&app, &env, None).await })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(&serial) {
        let s = h.await.unwrap();
        assert_eq!(&(s.target, s.receptacle), expected);
    }
}

#[tokio::test]
async fn cors_preflight_is_answered() {
    let app = app(true);
    let res = app
        .oneshot(
            Request::builder()
                .method(Method::OPTIONS)
                .uri("/rank")
                .header(header::ORIGIN, "http://localhost:5173")
                .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
                .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert!(res.status().is_success());
    assert_eq!(res.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let restricted = router(state_with(
        dataset(),
        true,
        ServiceConfig {
            cors_origins: vec!["http://console.local".into()],
            ..ServiceConfig::default()
        },
    ));
    let r = call(&restricted, Method::GET, "/health", None).await;
    assert!(!r.headers.contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
    let health = r.json();
    assert_eq!(health["model_loaded"], json!(true));
    assert_eq!(health["environments"], json!(4));
}

#[tokio::test]
async fn environments_are_listed() {
    let app = app(false);
    let v = call(&app, Method::GET, "/environments", None).await.json();
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 4);
    assert_eq!(
        list[0],
        json!({"environment_id": "env000", "image_count": 8})
    );
}

#[tokio::test]
async fn serves_over_tcp() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = app(true);
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream
        .write_all(
            b"GET /metrics/selections HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n",
        )
        .await
        .unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).await.unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    let body = out.split("\r\n\r\n").nth(1).unwrap();
    let m: SelectionMetrics = serde_json::from_str(body).unwrap();
    assert_eq!(m.sessions, 0);
}
