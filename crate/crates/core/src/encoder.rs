//! Multimodal feature encoder: a 3-layer bidirectional LSTM over word
//! embeddings, a 2D moment feature map over segment features, and their
//! fusion (projection, Hadamard product, L2 normalization) into the
//! conditioning map and its per-scale sparse views.

use crate::config::{ModelConfig, VmapMode};
use crate::error::{Error, Result};
use crate::params::{xavier, zeros_row, ParamStore, ParamVars};
use crate::tape::{Tape, VarId};
use crate::temporal_map::{scale_geometries, VideoGrid};
use crate::tensor::Tensor;
use rand::Rng;

pub const L2_EPS: f64 = 1e-8;
const LSTM_LAYERS: usize = 3;

pub fn init_encoder_params(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let h = cfg.lstm_hidden;
    for l in 0..LSTM_LAYERS {
        let d_in = if l == 0 { cfg.d_word } else { 2 * h };
        for dir in ["f", "b"] {
            store.insert(&format!("enc.lstm{l}.{dir}.w"), xavier(rng, d_in + h, 4 * h));
            store.insert(&format!("enc.lstm{l}.{dir}.bias"), zeros_row(4 * h));
        }
    }
    store.insert("enc.sent.w", xavier(rng, 2 * h, cfg.d_sentence));
    store.insert("enc.sent.bias", zeros_row(cfg.d_sentence));
    store.insert("enc.seg.w", xavier(rng, cfg.d_video, cfg.d_video));
    store.insert("enc.seg.bias", zeros_row(cfg.d_video));
    if cfg.vmap_mode == VmapMode::StackedConv {
        store.insert("enc.mapconv.w", xavier(rng, 2 * cfg.d_video, cfg.d_video));
        store.insert("enc.mapconv.bias", zeros_row(cfg.d_video));
    }
    store.insert("enc.fuse_v.w", xavier(rng, cfg.d_video, cfg.d_fused));
    store.insert("enc.fuse_v.bias", zeros_row(cfg.d_fused));
    store.insert("enc.fuse_s.w", xavier(rng, cfg.d_sentence, cfg.d_fused));
    store.insert("enc.fuse_s.bias", zeros_row(cfg.d_fused));
}

fn lstm_direction(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    inputs: &[VarId],
    hidden: usize,
    reverse: bool,
) -> (Vec<VarId>, VarId) {
    let w = pv.get(&format!("{prefix}.w"));
    let bias = pv.get(&format!("{prefix}.bias"));
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut outputs = vec![0usize; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for idx in order {
        let z = tape.concat_cols(inputs[idx], h);
        let gates = tape.matmul(z, w);
        let gates = tape.add_row(gates, bias);
        let i_gate = tape.slice_cols(gates, 0, hidden);
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.slice_cols(gates, hidden, hidden);
        let f_gate = tape.sigmoid(f_gate);
        let g_gate = tape.slice_cols(gates, 2 * hidden, hidden);
        let g_gate = tape.tanh(g_gate);
        let o_gate = tape.slice_cols(gates, 3 * hidden, hidden);
        let o_gate = tape.sigmoid(o_gate);
        let fc = tape.mul(f_gate, c);
        let ig = tape.mul(i_gate, g_gate);
        c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        h = tape.mul(o_gate, tc);
        outputs[idx] = h;
    }
    (outputs, h)
}

/// Aggregate a word embedding sequence [M, d_word] into a sentence feature
/// [1, d_sentence] via the stacked bidirectional recurrent encoder.
pub fn encode_sentence(
    cfg: &ModelConfig,
    tape: &mut Tape,
    pv: &ParamVars,
    words: &Tensor,
) -> Result<VarId> {
    let m = words.rows();
    if m == 0 {
        return Err(Error::Malformed("empty query: need at least one word".into()));
    }
    if words.cols() != cfg.d_word {
        return Err(Error::ShapeMismatch {
            expected: vec![m, cfg.d_word],
            got: words.shape().to_vec(),
        });
    }
    let h = cfg.lstm_hidden;
    let seq = tape.constant(words.clone());
    let mut layer_inputs: Vec<VarId> = (0..m).map(|i| tape.slice_rows(seq, i, 1)).collect();
    let mut final_fwd = 0usize;
    let mut final_bwd = 0usize;
    for l in 0..LSTM_LAYERS {
        let (out_f, last_f) =
            lstm_direction(tape, pv, &format!("enc.lstm{l}.f"), &layer_inputs, h, false);
        let (out_b, last_b) =
            lstm_direction(tape, pv, &format!("enc.lstm{l}.b"), &layer_inputs, h, true);
        layer_inputs = out_f
            .iter()
            .zip(&out_b)
            .map(|(&f, &b)| tape.concat_cols(f, b))
            .collect();
        final_fwd = last_f;
        final_bwd = last_b;
    }
    let state = tape.concat_cols(final_fwd, final_bwd);
    let proj = tape.matmul(state, pv.get("enc.sent.w"));
    Ok(tape.add_row(proj, pv.get("enc.sent.bias")))
}

/// Offsets of the per-duration row groups inside the stacked map buffer.
fn duration_offsets(n: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(n);
    let mut acc = 0;
    for j in 0..n {
        offsets.push(acc);
        acc += n - j;
    }
    offsets
}

/// Build the N*N x d_video moment feature map; cell (a, b) holds the moment
/// feature for segments a..=a+b, invalid cells are zero.
pub fn build_feature_map(
    cfg: &ModelConfig,
    tape: &mut Tape,
    pv: &ParamVars,
    segments: &Tensor,
) -> Result<VarId> {
    let n = cfg.n_segments;
    if segments.rows() != n || segments.cols() != cfg.d_video {
        return Err(Error::ShapeMismatch {
            expected: vec![n, cfg.d_video],
            got: segments.shape().to_vec(),
        });
    }
    let dv = cfg.d_video;
    let segs = tape.constant(segments.clone());
    let proj = tape.matmul(segs, pv.get("enc.seg.w"));
    let proj = tape.add_row(proj, pv.get("enc.seg.bias"));
    let proj = tape.tanh(proj);

    // per-duration rows: rows[j] has N-j start positions
    let mut rows: Vec<VarId> = Vec::with_capacity(n);
    rows.push(proj);
    for j in 1..n {
        let prev = rows[j - 1];
        let cur = match cfg.vmap_mode {
            VmapMode::MaxPool => {
                let head = tape.slice_rows(prev, 0, n - j);
                let tail = tape.slice_rows(proj, j, n - j);
                tape.max(head, tail)
            }
            VmapMode::StackedConv => {
                let left = tape.slice_rows(prev, 0, n - j);
                let right = tape.slice_rows(prev, 1, n - j);
                let cat = tape.concat_cols(left, right);
                let c = tape.matmul(cat, pv.get("enc.mapconv.w"));
                let c = tape.add_row(c, pv.get("enc.mapconv.bias"));
                tape.tanh(c)
            }
        };
        rows.push(cur);
    }
    let mut stacked = rows[0];
    for &r in &rows[1..] {
        stacked = tape.concat_rows(stacked, r);
    }
    let zero = tape.constant(Tensor::zeros(&[1, dv]));
    let stacked = tape.concat_rows(stacked, zero);
    let zero_row = n * (n + 1) / 2;

    let offsets = duration_offsets(n);
    let mut indices = Vec::with_capacity(n * n * dv);
    for a in 0..n {
        for b in 0..n {
            let row = if a + b + 1 <= n { offsets[b] + a } else { zero_row };
            for ch in 0..dv {
                indices.push(row * dv + ch);
            }
        }
    }
    Ok(tape.gather(stacked, &indices, &[n * n, dv]))
}

/// Project both modalities to d_fused, combine with a Hadamard product, and
/// L2-normalize each valid cell (zero vectors pass through the eps guard).
pub fn fuse(
    cfg: &ModelConfig,
    tape: &mut Tape,
    pv: &ParamVars,
    vmap: VarId,
    sentence: VarId,
) -> VarId {
    let v = tape.matmul(vmap, pv.get("enc.fuse_v.w"));
    let v = tape.add_row(v, pv.get("enc.fuse_v.bias"));
    let s = tape.matmul(sentence, pv.get("enc.fuse_s.w"));
    let s = tape.add_row(s, pv.get("enc.fuse_s.bias"));
    let prod = tape.mul_row(v, s);
    let normed = tape.l2_normalize_rows(prod, L2_EPS);
    let grid = VideoGrid {
        n_segments: cfg.n_segments,
        unit: cfg.unit,
    };
    let n = cfg.n_segments;
    let mask: Vec<f64> = (0..n * n)
        .map(|idx| if grid.is_valid_cell(idx / n, idx % n) { 1.0 } else { 0.0 })
        .collect();
    tape.mul_mask_col(normed, &mask)
}

/// Per-scale sparse views of the fused map, using the same index rule as
/// score-map extraction.
pub fn extract_feature_scales(
    cfg: &ModelConfig,
    tape: &mut Tape,
    fused: VarId,
) -> Result<Vec<VarId>> {
    let geoms = scale_geometries(cfg.n_segments, cfg.scales, cfg.anchors)?;
    let d = tape.value(fused).cols();
    let mut views = Vec::with_capacity(geoms.len());
    for geo in &geoms {
        let full = geo.full_indices();
        let valid = geo.valid_mask();
        let mut indices = Vec::with_capacity(geo.cells() * d);
        for (cell, &fi) in full.iter().enumerate() {
            // invalid cells borrow index 0 and are masked to zero below
            let src = if valid[cell] { fi } else { 0 };
            for ch in 0..d {
                indices.push(src * d + ch);
            }
        }
        let view = tape.gather(fused, &indices, &[geo.cells(), d]);
        let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        views.push(tape.mul_mask_col(view, &mask));
    }
    Ok(views)
}

/// Full encoder: segments + words to per-scale conditioning views.
pub fn encode(
    cfg: &ModelConfig,
    tape: &mut Tape,
    pv: &ParamVars,
    segments: &Tensor,
    words: &Tensor,
) -> Result<Vec<VarId>> {
    let sent = encode_sentence(cfg, tape, pv, words)?;
    let vmap = build_feature_map(cfg, tape, pv, segments)?;
    let fused = fuse(cfg, tape, pv, vmap, sent);
    extract_feature_scales(cfg, tape, fused)
}
