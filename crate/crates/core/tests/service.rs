use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dragvideo::instruction::Point;
use dragvideo::pipeline::synthetic::gaussian_blob_video;
use dragvideo::pipeline::Models;
use dragvideo::service::{router, AppState, ServiceConfig};
use reqwest::blocking::Client;
use serde_json::{json, Value};

fn start(root: &std::path::Path) -> String {
    let state = AppState::with_models(
        ServiceConfig {
            data_root: root.to_path_buf(),
            workers: 2,
        },
        Arc::new(Models::desk),
    );
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(state)).await.unwrap();
        });
    });
    format!("http://{}/v1", rx.recv().unwrap())
}

fn png_frames(frames: usize) -> Vec<String> {
    let video = gaussian_blob_video(frames, 32, 32, Point::new(14.0, 16.0), 5.0, (0.5, 0.0)).unwrap();
    (0..frames)
        .map(|i| {
            let mut buf = Cursor::new(Vec::new());
            video
                .frame_image(i)
                .write_to(&mut buf, image::ImageFormat::Png)
                .unwrap();
            B64.encode(buf.into_inner())
        })
        .collect()
}

fn run_config(epochs: usize) -> Value {
    json!({
        "lora": {"epochs": epochs, "rank": 4},
        "optimization": {"eta": 0.01, "lambda": 0.1, "max_steps": 3, "radius": 1, "track_radius": 3, "t_opt": 10, "stop_epsilon": 2.0}
    })
}

fn wait_job(client: &Client, base: &str, job: &str) -> Value {
    let start = Instant::now();
    loop {
        let v: Value = client.get(format!("{base}/jobs/{job}")).send().unwrap().json().unwrap();
        if v["status"] == "succeeded" || v["status"] == "failed" {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job {job} did not finish");
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[test]
fn http_walkthrough() {
    let tmp = tempfile::tempdir().unwrap();
    let base = start(tmp.path());
    let client = Client::new();

    let r = client
        .post(format!("{base}/projects"))
        .json(&json!({"id": "demo", "seed": 3}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 201);
    assert_eq!(r.json::<Value>().unwrap()["status"], "created");

    let r = client.post(format!("{base}/projects/demo/run")).send().unwrap();
    assert_eq!(r.status(), 409);
    let envelope: Value = r.json().unwrap();
    assert_eq!(envelope["code"], "ordering");
    assert_eq!(envelope["stage"], "run");
    assert!(envelope["message"].is_string());

    let r = client.get(format!("{base}/projects/missing")).send().unwrap();
    assert_eq!(r.status(), 404);
    assert_eq!(r.json::<Value>().unwrap()["code"], "not_found");

    let r = client
        .put(format!("{base}/projects/demo/video"))
        .json(&json!({"fps": 8.0, "frames": png_frames(4)}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    let r = client
        .post(format!("{base}/projects/demo/preprocess"))
        .json(&json!({"kps": 8.0}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 200);
    assert_eq!(r.json::<Value>().unwrap()["status"], "preprocessed");

    let r = client
        .put(format!("{base}/projects/demo/instruction"))
        .body("{\"frames\": 4, \"keyframes\": 7}")
        .send()
        .unwrap();
    assert_eq!(r.status(), 400);
    assert_eq!(r.json::<Value>().unwrap()["code"], "json");

    let instruction = json!({
        "frames": 4,
        "extension_radius": 2,
        "keyframes": {
            "first": {"pairs": [{"handle": [14, 16], "target": [18, 16]}], "positive": [[14, 16]], "negative": [[2, 2]]},
            "last": {"pairs": [{"handle": [15.5, 16], "target": [19.5, 16]}], "positive": [], "negative": []}
        }
    });
    let r = client
        .put(format!("{base}/projects/demo/instruction"))
        .json(&instruction)
        .send()
        .unwrap();
    assert_eq!(r.status(), 200, "{}", r.text().unwrap());
    assert_eq!(
        client
            .post(format!("{base}/projects/demo/run"))
            .send()
            .unwrap()
            .status(),
        409
    );

    let r = client.post(format!("{base}/projects/demo/propagate")).send().unwrap();
    assert_eq!(r.status(), 200);
    let preview: Value = r.json().unwrap();
    assert_eq!(preview["overlay"].as_array().unwrap().len(), 4);
    assert_eq!(preview["targets"][3][0], json!([19.5, 16.0]));

    let cfg = run_config(40);
    let first: Value = client
        .post(format!("{base}/projects/demo/run"))
        .json(&cfg)
        .send()
        .unwrap()
        .json()
        .unwrap();
    let again = client
        .post(format!("{base}/projects/demo/run"))
        .json(&cfg)
        .send()
        .unwrap();
    assert_eq!(again.status(), 202);
    let again: Value = again.json().unwrap();
    assert_eq!(first["id"], again["id"]);

    let other = client
        .post(format!("{base}/projects/demo/train-lora"))
        .json(&run_config(5))
        .send()
        .unwrap();
    assert_eq!(other.status(), 409);
    assert_eq!(other.json::<Value>().unwrap()["code"], "busy");
    assert_eq!(
        client.get(format!("{base}/projects/demo")).send().unwrap().status(),
        200
    );

    let job = wait_job(&client, &base, first["id"].as_str().unwrap());
    assert_eq!(job["status"], "succeeded", "{job}");
    assert_eq!(
        client
            .get(format!("{base}/projects/demo"))
            .send()
            .unwrap()
            .json::<Value>()
            .unwrap()["status"],
        "done"
    );
    let result: Value = client
        .get(format!("{base}/projects/demo/result"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(result["frames"].as_array().unwrap().len(), 4);
    let report = client
        .get(format!("{base}/projects/demo/report"))
        .send()
        .unwrap()
        .text()
        .unwrap();
    assert!(report.starts_with("sample,baseline_score,dragvideo_score\ndemo,,"));

    let repeat: Value = client
        .post(format!("{base}/projects/demo/run"))
        .json(&cfg)
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(repeat["id"], first["id"]);
    assert_eq!(repeat["status"], "succeeded");
}
