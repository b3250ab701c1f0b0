//! Condition-injected denoising decoder. Each scale has its own stack of
//! blocks (gated convolutions by default, or self-/cross-attention blocks in
//! the transformer variant). The diffusion timestep enters only through the
//! stylization blocks, which turn the time embedding into a per-channel
//! scale and shift applied after normalization.

use crate::config::{Conditioning, DecoderVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{xavier, xavier_conv, zeros_row, ParamStore, ParamVars};
use crate::tape::{Tape, VarId};
use crate::temporal_map::ScaleGeometry;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormKind {
    Group,
    Layer,
}

/// Largest group count out of {4, 2, 1} that divides the channel width.
fn norm_groups(channels: usize) -> usize {
    [4usize, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap()
}

fn init_stylize(rng: &mut impl Rng, store: &mut ParamStore, prefix: &str, d_time: usize, c: usize) {
    store.insert(&format!("{prefix}.proj.w"), xavier(rng, d_time, 2 * c));
    // scale half of the bias starts at 1 so the block is near-identity at init
    let mut bias = zeros_row(2 * c);
    for j in 0..c {
        bias.set2(0, j, 1.0);
    }
    store.insert(&format!("{prefix}.proj.bias"), bias);
    store.insert(&format!("{prefix}.mlp1.w"), xavier(rng, c, c));
    store.insert(&format!("{prefix}.mlp1.bias"), zeros_row(c));
    store.insert(&format!("{prefix}.mlp2.w"), xavier(rng, c, c));
    store.insert(&format!("{prefix}.mlp2.bias"), zeros_row(c));
}

pub fn init_decoder_params(cfg: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let (dh, df, de) = (cfg.d_hidden, cfg.d_fused, cfg.d_time);
    store.insert("time.w1", xavier(rng, de, de));
    store.insert("time.b1", zeros_row(de));
    store.insert("time.w2", xavier(rng, de, de));
    store.insert("time.b2", zeros_row(de));
    for k in 0..cfg.scales {
        let p = format!("dec{k}");
        store.insert(&format!("{p}.in.w"), xavier(rng, 1, dh));
        store.insert(&format!("{p}.in.bias"), zeros_row(dh));
        if cfg.conditioning == Conditioning::Mul {
            store.insert(&format!("{p}.cond.w"), xavier(rng, df, dh));
            store.insert(&format!("{p}.cond.bias"), zeros_row(dh));
        }
        if cfg.variant == DecoderVariant::Transformer && cfg.conditioning != Conditioning::Mul {
            store.insert(&format!("{p}.fproj.w"), xavier(rng, df, dh));
            store.insert(&format!("{p}.fproj.bias"), zeros_row(dh));
        }
        for l in 0..cfg.blocks {
            let bp = format!("{p}.blk{l}");
            match cfg.variant {
                DecoderVariant::Cnn => {
                    let cin = if l == 0 && cfg.conditioning == Conditioning::Concat {
                        dh + df
                    } else {
                        dh
                    };
                    init_stylize(rng, store, &format!("{bp}.sty0"), de, cin);
                    init_stylize(rng, store, &format!("{bp}.sty1"), de, dh);
                    for conv in ["conv_a", "conv_g"] {
                        store.insert(
                            &format!("{bp}.{conv}.w"),
                            xavier_conv(rng, dh, cin, cfg.kernel, cfg.kernel),
                        );
                        store.insert(&format!("{bp}.{conv}.bias"), zeros_row(dh));
                    }
                }
                DecoderVariant::Transformer => {
                    init_stylize(rng, store, &format!("{bp}.sty0"), de, dh);
                    init_stylize(rng, store, &format!("{bp}.sty1"), de, dh);
                    for w in ["wq", "wk", "wv", "wo"] {
                        store.insert(&format!("{bp}.attn.{w}"), xavier(rng, dh, dh));
                    }
                    store.insert(&format!("{bp}.attn.wo_bias"), zeros_row(dh));
                    store.insert(&format!("{bp}.ffn.w1"), xavier(rng, dh, 2 * dh));
                    store.insert(&format!("{bp}.ffn.b1"), zeros_row(2 * dh));
                    store.insert(&format!("{bp}.ffn.w2"), xavier(rng, 2 * dh, dh));
                    store.insert(&format!("{bp}.ffn.b2"), zeros_row(dh));
                }
            }
        }
        store.insert(&format!("{p}.head.w"), xavier(rng, dh, 1));
        store.insert(&format!("{p}.head.bias"), zeros_row(1));
    }
}

/// Fixed sinusoidal position code for timestep `t` (even half sines, odd
/// half cosines over a geometric frequency ladder with base 10000).
pub fn sinusoidal_embedding(t: usize, d: usize) -> Tensor {
    assert!(d % 2 == 0, "time embedding width must be even");
    let half = d / 2;
    let mut data = vec![0.0; d];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        data[i] = angle.sin();
        data[half + i] = angle.cos();
    }
    Tensor::from_vec(&[1, d], data)
}

/// Sinusoidal code passed through a two-layer MLP; shared by all scales.
pub fn embed_time(cfg: &ModelConfig, tape: &mut Tape, pv: &ParamVars, t: usize) -> VarId {
    let code = tape.constant(sinusoidal_embedding(t, cfg.d_time));
    let h = tape.matmul(code, pv.get("time.w1"));
    let h = tape.add_row(h, pv.get("time.b1"));
    let h = tape.silu(h);
    let h = tape.matmul(h, pv.get("time.w2"));
    tape.add_row(h, pv.get("time.b2"))
}

/// Norm -> per-channel scale/shift from the time embedding -> silu -> MLP.
fn stylize(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    x: VarId,
    t_emb: VarId,
    norm: NormKind,
) -> VarId {
    let c = tape.value(x).cols();
    let lam = tape.matmul(t_emb, pv.get(&format!("{prefix}.proj.w")));
    let lam = tape.add_row(lam, pv.get(&format!("{prefix}.proj.bias")));
    let lam_w = tape.slice_cols(lam, 0, c);
    let lam_b = tape.slice_cols(lam, c, c);
    let n = match norm {
        NormKind::Group => tape.group_norm(x, norm_groups(c)),
        NormKind::Layer => tape.layer_norm_rows(x),
    };
    let h = tape.mul_row(n, lam_w);
    let h = tape.add_row(h, lam_b);
    let h = tape.silu(h);
    let h = tape.matmul(h, pv.get(&format!("{prefix}.mlp1.w")));
    let h = tape.add_row(h, pv.get(&format!("{prefix}.mlp1.bias")));
    let h = tape.silu(h);
    let h = tape.matmul(h, pv.get(&format!("{prefix}.mlp2.w")));
    tape.add_row(h, pv.get(&format!("{prefix}.mlp2.bias")))
}

/// Scaled dot-product attention (single head) with an output projection.
pub fn attention(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    q_in: VarId,
    kv_in: VarId,
) -> VarId {
    let q = tape.matmul(q_in, pv.get(&format!("{prefix}.wq")));
    let k = tape.matmul(kv_in, pv.get(&format!("{prefix}.wk")));
    let v = tape.matmul(kv_in, pv.get(&format!("{prefix}.wv")));
    let d = tape.value(q).cols();
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let w = tape.softmax_rows(scores);
    let o = tape.matmul(w, v);
    let o = tape.matmul(o, pv.get(&format!("{prefix}.wo")));
    tape.add_row(o, pv.get(&format!("{prefix}.wo_bias")))
}

/// One reverse-process evaluation for one scale: noisy map in, predicted
/// clean map out. `yt` is [cells, 1], `f_k` the conditioning view
/// [cells, d_fused]; invalid cells are zeroed in the output.
pub fn decode_scale(
    cfg: &ModelConfig,
    tape: &mut Tape,
    pv: &ParamVars,
    geo: &ScaleGeometry,
    yt: VarId,
    t_emb: VarId,
    f_k: VarId,
) -> Result<VarId> {
    let cells = geo.cells();
    if tape.value(yt).shape() != [cells, 1] {
        return Err(Error::ShapeMismatch {
            expected: vec![cells, 1],
            got: tape.value(yt).shape().to_vec(),
        });
    }
    if tape.value(f_k).shape() != [cells, cfg.d_fused] {
        return Err(Error::ShapeMismatch {
            expected: vec![cells, cfg.d_fused],
            got: tape.value(f_k).shape().to_vec(),
        });
    }
    if cfg.conditioning == Conditioning::CrossAttn && cfg.variant != DecoderVariant::Transformer {
        return Err(Error::InvalidParameter(
            "cross-attn conditioning requires the transformer variant".into(),
        ));
    }
    let p = format!("dec{}", geo.k);
    let mask: Vec<f64> = geo
        .valid_mask()
        .iter()
        .map(|&v| if v { 1.0 } else { 0.0 })
        .collect();

    let h = tape.matmul(yt, pv.get(&format!("{p}.in.w")));
    let mut x = tape.add_row(h, pv.get(&format!("{p}.in.bias")));
    if cfg.conditioning == Conditioning::Mul {
        let c = tape.matmul(f_k, pv.get(&format!("{p}.cond.w")));
        let c = tape.add_row(c, pv.get(&format!("{p}.cond.bias")));
        x = tape.mul(x, c);
    }

    match cfg.variant {
        DecoderVariant::Cnn => {
            if cfg.conditioning == Conditioning::Concat {
                x = tape.concat_cols(x, f_k);
            }
            for l in 0..cfg.blocks {
                let bp = format!("{p}.blk{l}");
                let cin = tape.value(x).cols();
                let s = stylize(tape, pv, &format!("{bp}.sty0"), x, t_emb, NormKind::Group);
                let a = tape.conv2d(
                    s,
                    pv.get(&format!("{bp}.conv_a.w")),
                    pv.get(&format!("{bp}.conv_a.bias")),
                    geo.rows,
                    geo.anchors,
                    cfg.kernel,
                    cfg.kernel,
                );
                let g = tape.conv2d(
                    s,
                    pv.get(&format!("{bp}.conv_g.w")),
                    pv.get(&format!("{bp}.conv_g.bias")),
                    geo.rows,
                    geo.anchors,
                    cfg.kernel,
                    cfg.kernel,
                );
                let g = tape.sigmoid(g);
                let gated = tape.mul(a, g);
                let gated = tape.mul_mask_col(gated, &mask);
                let out = stylize(tape, pv, &format!("{bp}.sty1"), gated, t_emb, NormKind::Group);
                x = if cin == cfg.d_hidden {
                    tape.add(x, out)
                } else {
                    out
                };
            }
        }
        DecoderVariant::Transformer => {
            let fp = if cfg.conditioning != Conditioning::Mul {
                let f = tape.matmul(f_k, pv.get(&format!("{p}.fproj.w")));
                Some(tape.add_row(f, pv.get(&format!("{p}.fproj.bias"))))
            } else {
                None
            };
            if cfg.conditioning == Conditioning::Concat {
                // conditioning rows ride along the sequence; sliced off below
                x = tape.concat_rows(x, fp.unwrap());
            }
            for l in 0..cfg.blocks {
                let bp = format!("{p}.blk{l}");
                let s = stylize(tape, pv, &format!("{bp}.sty0"), x, t_emb, NormKind::Layer);
                let kv = if cfg.conditioning == Conditioning::CrossAttn {
                    tape.concat_rows(s, fp.unwrap())
                } else {
                    s
                };
                let ao = attention(tape, pv, &format!("{bp}.attn"), s, kv);
                x = tape.add(x, ao);
                let s = stylize(tape, pv, &format!("{bp}.sty1"), x, t_emb, NormKind::Layer);
                let f1 = tape.matmul(s, pv.get(&format!("{bp}.ffn.w1")));
                let f1 = tape.add_row(f1, pv.get(&format!("{bp}.ffn.b1")));
                let f1 = tape.silu(f1);
                let f2 = tape.matmul(f1, pv.get(&format!("{bp}.ffn.w2")));
                let f2 = tape.add_row(f2, pv.get(&format!("{bp}.ffn.b2")));
                x = tape.add(x, f2);
            }
            if cfg.conditioning == Conditioning::Concat {
                x = tape.slice_rows(x, 0, cells);
            }
        }
    }

    let y = tape.matmul(x, pv.get(&format!("{p}.head.w")));
    let y = tape.add_row(y, pv.get(&format!("{p}.head.bias")));
    Ok(tape.mul_mask_col(y, &mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal_map::scale_geometries;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(variant: DecoderVariant, conditioning: Conditioning) -> ModelConfig {
        ModelConfig {
            n_segments: 4,
            d_fused: 4,
            d_hidden: 4,
            d_time: 8,
            scales: 2,
            anchors: 2,
            blocks: 2,
            kernel: 3,
            variant,
            conditioning,
            ..Default::default()
        }
    }

    fn make_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_decoder_params(cfg, &mut rng, &mut store);
        store
    }

    fn rand_inputs(cfg: &ModelConfig, geo: &ScaleGeometry, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = geo.cells();
        let mask = geo.valid_mask();
        let mut yt = Tensor::zeros(&[cells, 1]);
        let mut f = Tensor::zeros(&[cells, cfg.d_fused]);
        for i in 0..cells {
            if mask[i] {
                yt.set2(i, 0, rng.gen_range(-1.0..1.0));
                for c in 0..cfg.d_fused {
                    f.set2(i, c, rng.gen_range(-1.0..1.0));
                }
            }
        }
        (yt, f)
    }

    fn run_decode(cfg: &ModelConfig, store: &ParamStore, t: usize, seed: u64) -> Vec<Tensor> {
        let geoms = scale_geometries(cfg.n_segments, cfg.scales, cfg.anchors).unwrap();
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, store);
        let t_emb = embed_time(cfg, &mut tape, &pv, t);
        let mut outs = Vec::new();
        for geo in &geoms {
            let (yt, f) = rand_inputs(cfg, geo, seed + geo.k as u64);
            let yt = tape.constant(yt);
            let f = tape.constant(f);
            let out = decode_scale(cfg, &mut tape, &pv, geo, yt, t_emb, f).unwrap();
            outs.push(tape.value(out).clone());
        }
        outs
    }

    fn all_modes() -> Vec<(DecoderVariant, Conditioning)> {
        vec![
            (DecoderVariant::Cnn, Conditioning::Concat),
            (DecoderVariant::Cnn, Conditioning::Mul),
            (DecoderVariant::Transformer, Conditioning::Concat),
            (DecoderVariant::Transformer, Conditioning::Mul),
            (DecoderVariant::Transformer, Conditioning::CrossAttn),
        ]
    }

    #[test]
    fn output_shapes_and_invalid_cells_zero() {
        for (variant, conditioning) in all_modes() {
            let cfg = tiny_cfg(variant, conditioning);
            let store = make_store(&cfg, 1);
            let outs = run_decode(&cfg, &store, 5, 2);
            let geoms = scale_geometries(cfg.n_segments, cfg.scales, cfg.anchors).unwrap();
            for (geo, out) in geoms.iter().zip(&outs) {
                assert_eq!(out.shape(), &[geo.cells(), 1]);
                for (cell, &valid) in geo.valid_mask().iter().enumerate() {
                    if !valid {
                        assert_eq!(out.get2(cell, 0), 0.0, "{variant:?}/{conditioning:?}");
                    }
                }
                assert!(out.is_finite());
            }
        }
    }

    #[test]
    fn decode_is_deterministic() {
        for (variant, conditioning) in all_modes() {
            let cfg = tiny_cfg(variant, conditioning);
            let store = make_store(&cfg, 3);
            let a = run_decode(&cfg, &store, 7, 4);
            let b = run_decode(&cfg, &store, 7, 4);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn timestep_enters_only_through_stylization() {
        for (variant, conditioning) in all_modes() {
            let cfg = tiny_cfg(variant, conditioning);
            let store = make_store(&cfg, 5);
            let a = run_decode(&cfg, &store, 1, 6);
            let b = run_decode(&cfg, &store, 90, 6);
            let diff: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x.max_abs_diff(y))
                .fold(0.0, f64::max);
            assert!(diff > 1e-9, "decode must depend on t ({variant:?}/{conditioning:?})");

            // zeroing the stylization projections severs the only t path
            let mut cut = store.clone();
            for name in cut.names() {
                if name.contains(".sty") && name.ends_with(".proj.w") {
                    *cut.get_mut(&name) = Tensor::zeros(cut.get(&name).shape());
                }
            }
            let a = run_decode(&cfg, &cut, 1, 6);
            let b = run_decode(&cfg, &cut, 90, 6);
            let diff: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| x.max_abs_diff(y))
                .fold(0.0, f64::max);
            assert_eq!(diff, 0.0, "{variant:?}/{conditioning:?}");
        }
    }

    #[test]
    fn output_depends_on_conditioning() {
        for (variant, conditioning) in all_modes() {
            let cfg = tiny_cfg(variant, conditioning);
            let store = make_store(&cfg, 7);
            let geo = &scale_geometries(cfg.n_segments, cfg.scales, cfg.anchors).unwrap()[0];
            let (yt, f1) = rand_inputs(&cfg, geo, 8);
            let (_, f2) = rand_inputs(&cfg, geo, 9);
            let eval = |f: &Tensor| {
                let mut tape = Tape::new();
                let pv = ParamVars::register(&mut tape, &store);
                let t_emb = embed_time(&cfg, &mut tape, &pv, 10);
                let yt = tape.constant(yt.clone());
                let f = tape.constant(f.clone());
                let out = decode_scale(&cfg, &mut tape, &pv, geo, yt, t_emb, f).unwrap();
                tape.value(out).clone()
            };
            assert!(eval(&f1).max_abs_diff(&eval(&f2)) > 1e-9, "{variant:?}/{conditioning:?}");
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny_cfg(DecoderVariant::Transformer, Conditioning::CrossAttn);
        let store = make_store(&cfg, 11);
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = tape.constant(Tensor::from_vec(
            &[3, 4],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ));
        let kv = tape.constant(Tensor::from_vec(
            &[5, 4],
            (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ));
        // recompute the softmax weights the op produced
        let qw = tape.matmul(q, pv.get("dec0.blk0.attn.wq"));
        let kw = tape.matmul(kv, pv.get("dec0.blk0.attn.wk"));
        let scores = tape.matmul_nt(qw, kw);
        let scores = tape.scale(scores, 0.5);
        let w = tape.softmax_rows(scores);
        for r in 0..3 {
            let sum: f64 = (0..5).map(|c| tape.value(w).get2(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..5 {
                assert!(tape.value(w).get2(r, c) > 0.0);
            }
        }
        // a single-position sequence attends to itself with weight 1
        let one = tape.constant(Tensor::from_vec(&[1, 4], vec![0.3, -0.1, 0.9, 0.2]));
        let o = attention(&mut tape, &pv, "dec0.blk0.attn", one, one);
        let vproj = tape.matmul(one, pv.get("dec0.blk0.attn.wv"));
        let want = tape.matmul(vproj, pv.get("dec0.blk0.attn.wo"));
        let want = tape.add_row(want, pv.get("dec0.blk0.attn.wo_bias"));
        assert!(tape.value(o).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn sinusoid_embedding_basics() {
        let e = sinusoidal_embedding(0, 8);
        for i in 0..4 {
            assert_eq!(e.get2(0, i), 0.0);
            assert_eq!(e.get2(0, 4 + i), 1.0);
        }
        let a = sinusoidal_embedding(13, 64);
        let b = sinusoidal_embedding(13, 64);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert!(a.max_abs_diff(&sinusoidal_embedding(14, 64)) > 1e-6);
    }

    #[test]
    fn decoder_gradcheck_matches_finite_differences() {
        for (variant, conditioning) in [
            (DecoderVariant::Cnn, Conditioning::Concat),
            (DecoderVariant::Transformer, Conditioning::CrossAttn),
        ] {
            let cfg = ModelConfig {
                blocks: 1,
                ..tiny_cfg(variant, conditioning)
            };
            let store = make_store(&cfg, 13);
            let geo = scale_geometries(cfg.n_segments, cfg.scales, cfg.anchors).unwrap()[0];
            let (yt, f) = rand_inputs(&cfg, &geo, 14);

            let loss_of = |s: &ParamStore| -> f64 {
                let mut tape = Tape::new();
                let pv = ParamVars::register(&mut tape, s);
                let t_emb = embed_time(&cfg, &mut tape, &pv, 17);
                let ytv = tape.constant(yt.clone());
                let fv = tape.constant(f.clone());
                let out = decode_scale(&cfg, &mut tape, &pv, &geo, ytv, t_emb, fv).unwrap();
                let sq = tape.mul(out, out);
                let total = tape.sum_all(sq);
                tape.value(total).item()
            };

            let mut tape = Tape::new();
            let pv = ParamVars::register(&mut tape, &store);
            let t_emb = embed_time(&cfg, &mut tape, &pv, 17);
            let ytv = tape.constant(yt.clone());
            let fv = tape.constant(f.clone());
            let out = decode_scale(&cfg, &mut tape, &pv, &geo, ytv, t_emb, fv).unwrap();
            let sq = tape.mul(out, out);
            let total = tape.sum_all(sq);
            let grads = tape.backward(total);

            let h = 1e-5;
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            for (name, id) in pv.iter() {
                let g = match grads.get(*id) {
                    Some(g) => g,
                    None => {
                        // only the other scale's parameters may be disconnected
                        assert!(name.starts_with("dec1."), "missing grad for {name}");
                        continue;
                    }
                };
                let numel = store.get(name).numel();
                for _ in 0..3.min(numel) {
                    let idx = rng.gen_range(0..numel);
                    let mut plus = store.clone();
                    plus.get_mut(name).data_mut()[idx] += h;
                    let mut minus = store.clone();
                    minus.get_mut(name).data_mut()[idx] -= h;
                    let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let an = g.data()[idx];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(
                        ((fd - an) / denom).abs() < 1e-4,
                        "{variant:?}/{conditioning:?} {name}[{idx}]: fd={fd} analytic={an}"
                    );
                }
            }
        }
    }
}
