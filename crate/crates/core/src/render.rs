//! Render a 2D score map as a plain-text PGM (P2) image: rows are start
//! indices, columns are duration indices, intensity is the score scaled to
//! 0-255. Invalid and uncovered cells are black.

use crate::error::Result;
use crate::temporal_map::ScoreMap2D;

const MAXVAL: u32 = 255;

/// Round half away from zero, clamp to [0, 255]. Scores are expected in
/// [0, 1]; anything outside is saturated.
fn level(score: f64) -> u32 {
    let v = (score * MAXVAL as f64 + 0.5).floor();
    v.clamp(0.0, MAXVAL as f64) as u32
}

pub fn to_pgm(map: &ScoreMap2D) -> String {
    let n = map.n();
    let mut out = String::new();
    out.push_str("P2\n");
    out.push_str(&format!("{n} {n}\n"));
    out.push_str(&format!("{MAXVAL}\n"));
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| {
                let v = if map.is_covered(i, j) { level(map.get(i, j)) } else { 0 };
                v.to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn render_file(input: &std::path::Path, output: &std::path::Path) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let map = ScoreMap2D::from_json(&value)?;
    std::fs::write(output, to_pgm(&map))?;
    Ok(())
}
