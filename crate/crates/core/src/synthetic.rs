//! Synthetic localization data. Each example picks one of P activity
//! prototypes; segments inside the target moment are noisy copies of the
//! video prototype, segments outside are noisy mixtures that lean on other
//! prototypes, and the query words are noisy copies of the paired query
//! prototype. A model that matches queries to segments can therefore
//! localize the moment, while the noise keeps the task non-trivial.

use crate::config::GenConfig;
use crate::error::{Error, Result};
use crate::temporal_map::MomentInterval;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub n: usize,
    pub tau: f64,
    pub segments: Tensor,
    pub words: Tensor,
    pub moment: MomentInterval,
}

#[derive(Serialize, Deserialize)]
struct ExampleJson {
    id: String,
    n: usize,
    tau: f64,
    segment_features: Vec<Vec<f64>>,
    word_embeddings: Vec<Vec<f64>>,
    moment: [f64; 2],
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| (0..t.cols()).map(|j| t.get2(i, j)).collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::Malformed("empty feature matrix".into()));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Malformed("ragged feature matrix".into()));
    }
    Ok(Tensor::from_vec(
        &[r, c],
        rows.iter().flatten().copied().collect(),
    ))
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn noisy_unit(rng: &mut impl Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let v: Vec<f64> = base
        .iter()
        .map(|&b| b + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.iter().map(|x| x / norm).collect()
}

/// The shared prototype banks (video-space and query-space), derived from
/// the generator seed alone.
pub fn prototypes(cfg: &GenConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let video = (0..cfg.prototypes)
        .map(|_| unit_vector(&mut rng, cfg.d_video))
        .collect();
    let query = (0..cfg.prototypes)
        .map(|_| unit_vector(&mut rng, cfg.d_word))
        .collect();
    (video, query)
}

fn example_rng(seed: u64, id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One example, fully determined by (cfg, id).
pub fn generate_example(cfg: &GenConfig, id: usize) -> Result<Example> {
    generate_example_labeled(cfg, id).map(|(ex, _)| ex)
}

/// Like [`generate_example`], but also returns the prototype index the
/// example was built around (useful for leakage / learnability checks).
pub fn generate_example_labeled(cfg: &GenConfig, id: usize) -> Result<(Example, usize)> {
    cfg.validate()?;
    let (video_protos, query_protos) = prototypes(cfg);
    let mut rng = example_rng(cfg.seed, id);
    let n = cfg.n_segments;
    let tau = cfg.unit;

    let p = rng.gen_range(0..cfg.prototypes);
    let moment = if cfg.grid_aligned {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n - i);
        MomentInterval::new(i as f64 * tau, (i + j + 1) as f64 * tau)?
    } else {
        loop {
            let a = rng.gen_range(0.0..n as f64 * tau);
            let b = rng.gen_range(0.0..n as f64 * tau);
            let (s, e) = if a < b { (a, b) } else { (b, a) };
            if e - s >= 0.5 * tau {
                break MomentInterval::new(s, e)?;
            }
        }
    };

    let mut seg_data = Vec::with_capacity(n * cfg.d_video);
    for i in 0..n {
        let mid = (i as f64 + 0.5) * tau;
        let row = if moment.start <= mid && mid <= moment.end {
            noisy_unit(&mut rng, &video_protos[p], cfg.sigma_in)
        } else {
            // background: a random direction pulled toward some other prototype
            let mut q = rng.gen_range(0..cfg.prototypes - 1);
            if q >= p {
                q += 1;
            }
            let noise = unit_vector(&mut rng, cfg.d_video);
            let mix: Vec<f64> = video_protos[q]
                .iter()
                .zip(&noise)
                .map(|(a, b)| 0.5 * a + 0.5 * b)
                .collect();
            noisy_unit(&mut rng, &mix, cfg.sigma_in)
        };
        seg_data.extend(row);
    }

    let m = rng.gen_range(cfg.m_min..=cfg.m_max);
    let mut word_data = Vec::with_capacity(m * cfg.d_word);
    for _ in 0..m {
        word_data.extend(noisy_unit(&mut rng, &query_protos[p], cfg.sigma_query));
    }

    Ok((
        Example {
            id,
            n,
            tau,
            segments: Tensor::from_vec(&[n, cfg.d_video], seg_data),
            words: Tensor::from_vec(&[m, cfg.d_word], word_data),
            moment,
        },
        p,
    ))
}

/// Examples `id_start .. id_start + count`; the id is the only thing that
/// distinguishes splits, so train/val/test never overlap.
pub fn generate_examples(cfg: &GenConfig, id_start: usize, count: usize) -> Result<Vec<Example>> {
    (id_start..id_start + count)
        .map(|id| generate_example(cfg, id))
        .collect()
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let row = ExampleJson {
            id: ex.id.to_string(),
            n: ex.n,
            tau: ex.tau,
            segment_features: to_rows(&ex.segments),
            word_embeddings: to_rows(&ex.words),
            moment: [ex.moment.start, ex.moment.end],
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)?;
    let mut examples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ExampleJson = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("line {}: {e}", lineno + 1)))?;
        let moment = MomentInterval::new(row.moment[0], row.moment[1])?;
        let id = row
            .id
            .parse::<usize>()
            .map_err(|_| Error::Malformed(format!("non-numeric example id {:?}", row.id)))?;
        examples.push(Example {
            id,
            n: row.n,
            tau: row.tau,
            segments: from_rows(&row.segment_features)?,
            words: from_rows(&row.word_embeddings)?,
            moment,
        });
    }
    if examples.is_empty() {
        return Err(Error::Malformed("dataset file holds no examples".into()));
    }
    Ok(examples)
}
