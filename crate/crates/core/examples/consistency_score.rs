//! Score temporal consistency of shifting clips and write a small report.

use dragvideo::metrics::{consistency_score, write_report_csv, BlockMatchingFlow, GlobalShiftOracle, ReportRow};
use dragvideo::pipeline::synthetic::wrapping_shift_video;

fn main() -> dragvideo::Result<()> {
    let mut rows = Vec::new();
    for shift in [(0, 0), (1, 0), (3, 4), (6, 8)] {
        let video = wrapping_shift_video(4, 32, 32, shift)?;
        let oracle = consistency_score(&video, &GlobalShiftOracle)?;
        let matched = consistency_score(&video, &BlockMatchingFlow::default())?;
        println!("shift {shift:?}: oracle flow {oracle:.3}, block matching {matched:.3}");
        rows.push(ReportRow {
            sample: format!("shift_{}_{}", shift.0, shift.1),
            baseline_score: Some(oracle),
            dragvideo_score: Some(matched),
        });
    }
    let dir = std::env::temp_dir().join("dragvideo-score-example");
    std::fs::create_dir_all(&dir).map_err(|e| dragvideo::Error::io(&dir, e))?;
    let path = dir.join("report.csv");
    write_report_csv(&path, &rows)?;
    println!("report written to {}", path.display());
    Ok(())
}
