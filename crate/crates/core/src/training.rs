//! Denoising training: draw a timestep, noise the target maps with the
//! forward process, and regress the decoder output onto the clean maps.
//! The per-scale losses are summed; batches are averaged with a fixed
//! reduction order so runs are reproducible under rayon parallelism.

use crate::config::{DiffusionConfig, LossKind, ModelConfig, TrainConfig};
use crate::decoder::{decode_scale, embed_time};
use crate::diffusion::{forward_sample, make_schedule, masked_noise, NoiseSchedule};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamStore, ParamVars};
use crate::synthetic::Example;
use crate::tape::{Tape, VarId};
use crate::temporal_map::{build_iou_map, extract_multiscale, MomentInterval};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

/// Clamp-linear rescale of an IoU value into [0, 1] with saturation at the
/// two thresholds.
pub fn rescale_value(y: f64, t_min: f64, t_max: f64) -> f64 {
    ((y - t_min) / (t_max - t_min)).clamp(0.0, 1.0)
}

/// Per-scale clean target maps ([cells, 1]) for one example.
pub fn build_targets(
    cfg: &ModelConfig,
    loss: LossKind,
    rescale: (f64, f64),
    ex: &Example,
) -> Result<Vec<Tensor>> {
    if ex.n != cfg.n_segments || ex.tau != cfg.unit {
        return Err(Error::Malformed(format!(
            "example grid ({}, {}) does not match the model ({}, {})",
            ex.n, ex.tau, cfg.n_segments, cfg.unit
        )));
    }
    let grid = crate::temporal_map::VideoGrid {
        n_segments: cfg.n_segments,
        unit: cfg.unit,
    };
    let gt = MomentInterval::new(ex.moment.start, ex.moment.end)?;
    let full = build_iou_map(grid, &gt)?;
    let ms = extract_multiscale(&full, cfg.scales, cfg.anchors)?;
    Ok(ms
        .maps
        .iter()
        .map(|sm| {
            let values: Vec<f64> = sm
                .values
                .iter()
                .map(|&y| match loss {
                    LossKind::BceRescaled => rescale_value(y, rescale.0, rescale.1),
                    _ => y,
                })
                .collect();
            Tensor::from_vec(&[values.len(), 1], values)
        })
        .collect())
}

/// Attach the loss for the given predictions and targets to the tape.
pub fn attach_loss(
    tape: &mut Tape,
    loss: LossKind,
    preds: &[VarId],
    targets: &[Tensor],
    masks: &[Vec<f64>],
) -> VarId {
    let mut total = None;
    for ((&pred, target), mask) in preds.iter().zip(targets).zip(masks) {
        let y = tape.constant(target.clone());
        let term = match loss {
            LossKind::MseFull => {
                let d = tape.sub(pred, y);
                let sq = tape.mul(d, d);
                tape.masked_mean(sq, mask)
            }
            LossKind::BceRescaled | LossKind::BceFull => {
                // logit-stable binary cross-entropy: softplus(x) - x * y
                let sp = tape.softplus(pred);
                let xy = tape.mul(pred, y);
                let cell = tape.sub(sp, xy);
                tape.masked_mean(cell, mask)
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    total.expect("at least one scale")
}

/// One example's full training graph: encode, noise the targets at step
/// `t`, decode, and attach the loss.
pub fn build_example_loss(
    cfg: &ModelConfig,
    loss: LossKind,
    rescale: (f64, f64),
    sched: &NoiseSchedule,
    ex: &Example,
    t: usize,
    noises: &[Tensor],
    store: &ParamStore,
) -> Result<(Tape, ParamVars, VarId)> {
    let geoms = crate::temporal_map::scale_geometries(cfg.n_segments, cfg.scales, cfg.anchors)?;
    let targets = build_targets(cfg, loss, rescale, ex)?;
    let masks: Vec<Vec<f64>> = geoms
        .iter()
        .map(|g| {
            g.valid_mask()
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, store);
    let features = encode(cfg, &mut tape, &pv, &ex.segments, &ex.words)?;
    let t_emb = embed_time(cfg, &mut tape, &pv, t);
    let mut preds = Vec::with_capacity(geoms.len());
    for (geo, ((target, mask), eps)) in geoms
        .iter()
        .zip(targets.iter().zip(&masks).zip(noises))
    {
        let yt = forward_sample(target, mask, t, eps, sched)?;
        let ytv = tape.constant(yt);
        preds.push(decode_scale(cfg, &mut tape, &pv, geo, ytv, t_emb, features[geo.k])?);
    }
    let loss_var = attach_loss(&mut tape, loss, &preds, &targets, &masks);
    Ok((tape, pv, loss_var))
}

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..gd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Loss and parameter gradients for one example at a derived seed.
fn example_grads(
    cfg: &ModelConfig,
    loss: LossKind,
    rescale: (f64, f64),
    sched: &NoiseSchedule,
    ex: &Example,
    seed: u64,
    store: &ParamStore,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(1..=sched.t_steps);
    let geoms = crate::temporal_map::scale_geometries(cfg.n_segments, cfg.scales, cfg.anchors)?;
    let noises: Vec<Tensor> = geoms
        .iter()
        .map(|g| {
            let mask: Vec<f64> = g
                .valid_mask()
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect();
            masked_noise(&[g.cells(), 1], &mask, &mut rng)
        })
        .collect();
    let (tape, pv, loss_var) =
        build_example_loss(cfg, loss, rescale, sched, ex, t, &noises, store)?;
    let value = tape.value(loss_var).item();
    let grads = tape.backward(loss_var);
    let out = pv
        .iter()
        .filter_map(|(name, &id)| grads.get(id).map(|g| (name.clone(), g.clone())))
        .collect();
    Ok((value, out))
}

/// One optimizer step over a batch; returns the mean batch loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    loss: LossKind,
    rescale: (f64, f64),
    sched: &NoiseSchedule,
    batch: &[&Example],
    step: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = model.cfg;
    let store = &model.params;
    let results: Vec<(f64, Vec<(String, Tensor)>)> = batch
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| {
            let s = mix64(seed ^ mix64(step as u64) ^ mix64(idx as u64));
            example_grads(&cfg, loss, rescale, sched, ex, s, store)
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for (l, grads) in &results {
        loss_sum += l;
        for (name, g) in grads {
            match acc.get_mut(name) {
                Some(a) => {
                    let ad = a.data_mut();
                    for (x, y) in ad.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                None => {
                    acc.insert(name.clone(), g.clone());
                }
            }
        }
    }
    for g in acc.values_mut() {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    opt.step(&mut model.params, &acc);
    Ok(loss_sum * scale)
}

/// Full training loop; `on_step` fires after every optimizer step (for
/// progress logging).
pub fn train(
    model: &mut Model,
    dcfg: &DiffusionConfig,
    tcfg: &TrainConfig,
    examples: &[Example],
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    tcfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Malformed("training set is empty".into()));
    }
    let sched = make_schedule(dcfg.t_steps, dcfg.beta_start, dcfg.beta_end, dcfg.eta)?;
    let rescale = (tcfg.rescale_t_min, tcfg.rescale_t_max);
    let mut opt = Adam::new(tcfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut logs = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let batch: Vec<&Example> = (0..tcfg.batch_size)
            .map(|_| &examples[rng.gen_range(0..examples.len())])
            .collect();
        let loss = train_step(
            model, &mut opt, tcfg.loss, rescale, &sched, &batch, step, tcfg.seed,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                loss,
                lr: opt.lr,
            });
        }
        let log = StepLog {
            step,
            loss,
            lr: opt.lr,
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

/// Compare analytic parameter gradients of the full training loss against
/// central finite differences on a fixed example. Returns the worst
/// relative error per parameter tensor.
pub fn gradcheck(
    cfg: &ModelConfig,
    dcfg: &DiffusionConfig,
    loss: LossKind,
    rescale: (f64, f64),
    ex: &Example,
    seed: u64,
    samples_per_tensor: usize,
) -> Result<Vec<GradcheckEntry>> {
    let sched = make_schedule(dcfg.t_steps, dcfg.beta_start, dcfg.beta_end, dcfg.eta)?;
    let model = Model::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed));
    let t = rng.gen_range(1..=sched.t_steps);
    let geoms = model.geometries();
    let noises: Vec<Tensor> = geoms
        .iter()
        .map(|g| {
            let mask: Vec<f64> = g
                .valid_mask()
                .iter()
                .map(|&v| if v { 1.0 } else { 0.0 })
                .collect();
            masked_noise(&[g.cells(), 1], &mask, &mut rng)
        })
        .collect();

    let loss_of = |store: &ParamStore| -> Result<f64> {
        let (tape, _, lv) = build_example_loss(cfg, loss, rescale, &sched, ex, t, &noises, store)?;
        Ok(tape.value(lv).item())
    };

    let (tape, pv, lv) =
        build_example_loss(cfg, loss, rescale, &sched, ex, t, &noises, &model.params)?;
    let grads = tape.backward(lv);

    let h = 2e-5;
    let mut report = Vec::new();
    for (name, &id) in pv.iter() {
        let numel = model.params.get(name).numel();
        let mut worst = 0.0f64;
        for s in 0..samples_per_tensor.min(numel) {
            let idx = (mix64(seed ^ mix64(s as u64) ^ mix64(id as u64)) % numel as u64) as usize;
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
            let central = |step: f64| -> Result<f64> {
                let mut plus = model.params.clone();
                plus.get_mut(name).data_mut()[idx] += step;
                let mut minus = model.params.clone();
                minus.get_mut(name).data_mut()[idx] -= step;
                Ok((loss_of(&plus)? - loss_of(&minus)?) / (2.0 * step))
            };
            // Richardson extrapolation cancels the h^2 truncation term; the
            // normalization layers make the loss highly curved in some biases
            let fd = (4.0 * central(h / 2.0)? - central(h)?) / 3.0;
            // the floor keeps finite-difference rounding noise on near-zero
            // gradients from registering as a relative error
            let denom = fd.abs().max(analytic.abs()).max(1e-2);
            worst = worst.max(((fd - analytic) / denom).abs());
        }
        report.push(GradcheckEntry {
            name: name.clone(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Conditioning, DecoderVariant, GenConfig};
    use crate::synthetic::generate_examples;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_segments: 4,
            d_word: 4,
            d_video: 4,
            d_sentence: 4,
            d_fused: 4,
            d_hidden: 4,
            d_time: 8,
            lstm_hidden: 4,
            scales: 2,
            anchors: 2,
            blocks: 2,
            kernel: 3,
            ..Default::default()
        }
    }

    fn tiny_gen() -> GenConfig {
        GenConfig {
            n_segments: 4,
            d_word: 4,
            d_video: 4,
            m_min: 2,
            m_max: 3,
            prototypes: 3,
            ..Default::default()
        }
    }

    fn tiny_dcfg() -> DiffusionConfig {
        DiffusionConfig {
            t_steps: 10,
            infer_steps: 5,
            ..Default::default()
        }
    }

    #[test]
    fn rescale_clamps_and_interpolates() {
        assert_eq!(rescale_value(0.2, 0.5, 1.0), 0.0);
        assert_eq!(rescale_value(0.5, 0.5, 1.0), 0.0);
        assert_eq!(rescale_value(0.75, 0.5, 1.0), 0.5);
        assert_eq!(rescale_value(1.0, 0.5, 1.0), 1.0);
        assert_eq!(rescale_value(0.6, 0.0, 1.0), 0.6);
    }

    #[test]
    fn targets_match_direct_iou_extraction() {
        let cfg = tiny_cfg();
        let ex = generate_examples(&tiny_gen(), 0, 1).unwrap().remove(0);
        let targets = build_targets(&cfg, LossKind::MseFull, (0.5, 1.0), &ex).unwrap();
        assert_eq!(targets.len(), 2);
        // scale 0 cell (i, 0) is the IoU of segment i alone
        for i in 0..4 {
            let seg = MomentInterval::new(i as f64, i as f64 + 1.0).unwrap();
            let want = seg.iou(&ex.moment);
            assert!((targets[0].get2(i * 2, 0) - want).abs() < 1e-12);
        }
        // bce-rescaled applies the clamp-linear transform cell-wise
        let resc = build_targets(&cfg, LossKind::BceRescaled, (0.5, 1.0), &ex).unwrap();
        for (t, r) in targets.iter().zip(&resc) {
            for i in 0..t.rows() {
                let want = rescale_value(t.get2(i, 0), 0.5, 1.0);
                assert!((r.get2(i, 0) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_loss_zero_for_perfect_prediction() {
        let cfg = tiny_cfg();
        let ex = generate_examples(&tiny_gen(), 1, 1).unwrap().remove(0);
        let targets = build_targets(&cfg, LossKind::MseFull, (0.5, 1.0), &ex).unwrap();
        let geoms = crate::temporal_map::scale_geometries(4, 2, 2).unwrap();
        let masks: Vec<Vec<f64>> = geoms
            .iter()
            .map(|g| g.valid_mask().iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut tape = Tape::new();
        let preds: Vec<VarId> = targets.iter().map(|t| tape.constant(t.clone())).collect();
        let l = attach_loss(&mut tape, LossKind::MseFull, &preds, &targets, &masks);
        assert!(tape.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn bce_loss_matches_scalar_oracle() {
        // single valid cell: loss must equal softplus(x) - x*y exactly
        let mut tape = Tape::new();
        let x = 0.37_f64;
        let y = 0.8_f64;
        let pred = tape.constant(Tensor::from_vec(&[2, 1], vec![x, 9.9]));
        let target = Tensor::from_vec(&[2, 1], vec![y, 0.0]);
        let mask = vec![1.0, 0.0];
        let l = attach_loss(
            &mut tape,
            LossKind::BceFull,
            &[pred],
            &[target],
            &[mask],
        );
        let want = (1.0 + x.exp()).ln() - x * y;
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let cfg = tiny_cfg();
        let examples = generate_examples(&tiny_gen(), 0, 16).unwrap();
        let tcfg = TrainConfig {
            steps: 30,
            batch_size: 4,
            ..Default::default()
        };
        let run = |seed: u64| -> (Model, Vec<StepLog>) {
            let mut model = Model::new(&cfg, seed).unwrap();
            let logs = train(&mut model, &tiny_dcfg(), &tcfg, &examples, |_| {}).unwrap();
            (model, logs)
        };
        let (m1, logs1) = run(0);
        let (m2, logs2) = run(0);
        assert_eq!(m1.params, m2.params, "training must be bit-reproducible");
        assert_eq!(logs1.len(), logs2.len());
        for (a, b) in logs1.iter().zip(&logs2) {
            assert_eq!(a.loss, b.loss);
        }
        let head: f64 = logs1[..5].iter().map(|l| l.loss).sum::<f64>() / 5.0;
        let tail: f64 = logs1[logs1.len() - 5..].iter().map(|l| l.loss).sum::<f64>() / 5.0;
        assert!(tail < head, "loss should trend down: head {head}, tail {tail}");
    }

    #[test]
    fn gradcheck_small_error_all_variants() {
        let base = tiny_cfg();
        let ex = generate_examples(&tiny_gen(), 2, 1).unwrap().remove(0);
        let cases = vec![
            (DecoderVariant::Cnn, Conditioning::Concat, LossKind::MseFull),
            (DecoderVariant::Cnn, Conditioning::Mul, LossKind::BceRescaled),
            (
                DecoderVariant::Transformer,
                Conditioning::CrossAttn,
                LossKind::MseFull,
            ),
            (
                DecoderVariant::Transformer,
                Conditioning::Concat,
                LossKind::BceFull,
            ),
        ];
        for (variant, conditioning, loss) in cases {
            let cfg = ModelConfig {
                variant,
                conditioning,
                blocks: 1,
                ..base
            };
            let report = gradcheck(&cfg, &tiny_dcfg(), loss, (0.5, 1.0), &ex, 3, 2).unwrap();
            for entry in &report {
                assert!(
                    entry.max_rel_err < 1e-4,
                    "{variant:?}/{conditioning:?}/{loss:?} {}: {}",
                    entry.name,
                    entry.max_rel_err
                );
            }
        }
    }
}
