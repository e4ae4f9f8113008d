//! Start the HTTP API on an ephemeral port and walk one project through it.

use std::io::Cursor;
use std::net::SocketAddr;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dragvideo::instruction::Point;
use dragvideo::pipeline::synthetic::{gaussian_blob_video, single_drag_instruction};
use dragvideo::service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = tempfile::tempdir()?;
    let state = AppState::new(ServiceConfig {
        data_root: root.path().to_path_buf(),
        workers: 1,
    });
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        tokio::runtime::Runtime::new().unwrap().block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(state)).await.unwrap();
        });
    });
    let base = format!("http://{}/v1", rx.recv()?);
    let client = reqwest::blocking::Client::new();

    let handle = Point::new(14.0, 16.0);
    let video = gaussian_blob_video(4, 32, 32, handle, 5.0, (0.5, 0.0))?;
    let frames: Vec<String> = (0..video.frames())
        .map(|i| {
            let mut buf = Cursor::new(Vec::new());
            video
                .frame_image(i)
                .write_to(&mut buf, image::ImageFormat::Png)
                .unwrap();
            B64.encode(buf.into_inner())
        })
        .collect();

    let show = |label: &str, r: reqwest::blocking::Response| -> Result<Value, reqwest::Error> {
        let status = r.status();
        let v: Value = r.json()?;
        let mut text = v.to_string();
        text.truncate(160);
        println!("{label:<12} {status} {text}");
        Ok(v)
    };
    show(
        "create",
        client
            .post(format!("{base}/projects"))
            .json(&json!({"id": "clip", "seed": 1}))
            .send()?,
    )?;
    show("run early", client.post(format!("{base}/projects/clip/run")).send()?)?;
    show(
        "video",
        client
            .put(format!("{base}/projects/clip/video"))
            .json(&json!({"fps": 8.0, "frames": frames}))
            .send()?,
    )?;
    show(
        "preprocess",
        client
            .post(format!("{base}/projects/clip/preprocess"))
            .json(&json!({"kps": 8.0}))
            .send()?,
    )?;
    let instruction = single_drag_instruction(4, handle, (4.0, 0.0), 2);
    show(
        "instruction",
        client
            .put(format!("{base}/projects/clip/instruction"))
            .json(&instruction)
            .send()?,
    )?;
    show(
        "propagate",
        client.post(format!("{base}/projects/clip/propagate")).send()?,
    )?;

    let cfg = json!({"lora": {"epochs": 5, "rank": 4}, "optimization": {"max_steps": 5, "t_opt": 10}});
    let job = show(
        "run",
        client.post(format!("{base}/projects/clip/run")).json(&cfg).send()?,
    )?;
    let id = job["id"].as_str().unwrap_or_default().to_string();
    loop {
        let v: Value = client.get(format!("{base}/jobs/{id}")).send()?.json()?;
        if v["status"] == "succeeded" || v["status"] == "failed" {
            println!("job {id}: {}", v["status"]);
            break;
        }
        std::thread::sleep(Duration::from_millis(200));
    }
    println!("{}", client.get(format!("{base}/projects/clip/report")).send()?.text()?);
    Ok(())
}
