//! Full project lifecycle on disk: preprocess, instruct, propagate, run, score.
//!
//! Run it twice with the same directory argument to see every stage load from cache.

use std::path::PathBuf;
use std::time::Instant;

use dragvideo::instruction::Point;
use dragvideo::pipeline::synthetic::{gaussian_blob_video, single_drag_instruction};
use dragvideo::pipeline::{Models, Project, RunConfig, RunControl};
use dragvideo::Error;

fn main() -> dragvideo::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dragvideo-project-example"));
    let handle = Point::new(14.0, 16.0);
    let mut project = match Project::open(&root) {
        Ok(p) => p,
        Err(Error::NotFound(_)) => {
            let mut p = Project::create(&root, 7)?;
            let video = gaussian_blob_video(4, 32, 32, handle, 5.0, (0.5, 0.0))?;
            p.preprocess(&video, 8.0, "blob", None)?;
            p.set_instruction(&single_drag_instruction(4, handle, (4.0, 0.0), 2))?;
            p
        }
        Err(e) => return Err(e),
    };
    let models = Models::desk();
    if project.propagated().is_err() {
        project.propagate(&models)?;
    }

    let mut cfg = RunConfig::default();
    cfg.lora.epochs = 5;
    cfg.lora.rank = 4;
    cfg.optimization.max_steps = 5;
    cfg.optimization.t_opt = 10;
    let start = Instant::now();
    let outcome = project.run(&cfg, &models, &RunControl::default())?;
    println!(
        "run finished in {:.1}s with {} drag iterations; stages: {:?}",
        start.elapsed().as_secs_f64(),
        outcome.paths[0].drag_iterations,
        project.state.stages.keys().collect::<Vec<_>>()
    );
    println!("edited frames in {}", project.path("result/edited").display());
    Ok(())
}
