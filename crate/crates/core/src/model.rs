//! Model wrapper: owns the full parameter set and runs the reverse
//! diffusion chain from raw inputs (segment features + word embeddings) to
//! per-scale predicted maps and the aggregated single-scale map.

use crate::config::{DiffusionConfig, ModelConfig};
use crate::decoder::{decode_scale, embed_time, init_decoder_params};
use crate::diffusion::{make_schedule, sample_loop, stride_steps};
use crate::encoder::{encode, init_encoder_params};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::tape::Tape;
use crate::temporal_map::{
    aggregate_multiscale, scale_geometries, MultiScaleMaps, ScaleGeometry, ScaleMap, ScoreMap2D,
    VideoGrid,
};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model with all parameters drawn from a seeded generator.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder_params(cfg, &mut rng, &mut params);
        init_decoder_params(cfg, &mut rng, &mut params);
        Ok(Model {
            cfg: *cfg,
            params,
        })
    }

    /// Wrap restored parameters, checking that the tensor inventory matches
    /// what this configuration would create.
    pub fn from_parts(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Model::new(cfg, 0)?;
        if fresh.params.names() != params.names() {
            return Err(Error::CheckpointMismatch(
                "parameter names do not match the model configuration".into(),
            ));
        }
        for (name, t) in fresh.params.iter() {
            if params.get(name).shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "shape mismatch for {name}: expected {:?}, got {:?}",
                    t.shape(),
                    params.get(name).shape()
                )));
            }
        }
        Ok(Model {
            cfg: *cfg,
            params,
        })
    }

    pub fn grid(&self) -> VideoGrid {
        VideoGrid {
            n_segments: self.cfg.n_segments,
            unit: self.cfg.unit,
        }
    }

    pub fn geometries(&self) -> Vec<ScaleGeometry> {
        scale_geometries(self.cfg.n_segments, self.cfg.scales, self.cfg.anchors)
            .expect("validated at construction")
    }

    /// Run the full reverse chain for one query and return the final
    /// per-scale predicted score maps ([cells, 1] each).
    pub fn infer(
        &self,
        dcfg: &DiffusionConfig,
        segments: &Tensor,
        words: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<Vec<Tensor>> {
        self.infer_with(dcfg, segments, words, false, rng)
    }

    /// As `infer`, but with `squash` the decoder output is passed through a
    /// sigmoid at every step — for models trained with a cross-entropy loss,
    /// whose head emits logits of the clean map.
    pub fn infer_with(
        &self,
        dcfg: &DiffusionConfig,
        segments: &Tensor,
        words: &Tensor,
        squash: bool,
        rng: &mut impl Rng,
    ) -> Result<Vec<Tensor>> {
        let geoms = self.geometries();
        let sched = make_schedule(dcfg.t_steps, dcfg.beta_start, dcfg.beta_end, dcfg.eta)?;
        let steps = stride_steps(dcfg.t_steps, dcfg.infer_steps);
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, &self.params);
        let features = encode(&self.cfg, &mut tape, &pv, segments, words)?;
        let shapes: Vec<Vec<usize>> = geoms.iter().map(|g| vec![g.cells(), 1]).collect();
        let masks: Vec<Vec<f64>> = geoms
            .iter()
            .map(|g| {
                g.valid_mask()
                    .iter()
                    .map(|&v| if v { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let cfg = self.cfg;
        let predict = |maps: &[Tensor], t: usize| -> Vec<Tensor> {
            let t_emb = embed_time(&cfg, &mut tape, &pv, t);
            geoms
                .iter()
                .zip(maps)
                .map(|(geo, yt)| {
                    let ytv = tape.constant(yt.clone());
                    let mut out = decode_scale(&cfg, &mut tape, &pv, geo, ytv, t_emb, features[geo.k])
                        .expect("shapes validated before the loop");
                    if squash {
                        let s = tape.sigmoid(out);
                        out = tape.mul_mask_col(s, &masks[geo.k]);
                    }
                    tape.value(out).clone()
                })
                .collect()
        };
        sample_loop(predict, &shapes, &masks, &sched, &steps, rng)
    }

    /// Full inference plus max-aggregation into a single N x N score map.
    pub fn infer_map(
        &self,
        dcfg: &DiffusionConfig,
        segments: &Tensor,
        words: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<ScoreMap2D> {
        self.infer_map_with(dcfg, segments, words, false, rng)
    }

    pub fn infer_map_with(
        &self,
        dcfg: &DiffusionConfig,
        segments: &Tensor,
        words: &Tensor,
        squash: bool,
        rng: &mut impl Rng,
    ) -> Result<ScoreMap2D> {
        let per_scale = self.infer_with(dcfg, segments, words, squash, rng)?;
        Ok(aggregate_multiscale(&self.to_multiscale(&per_scale)))
    }

    /// Package raw per-scale tensors into the map structure used by
    /// aggregation and ranking.
    pub fn to_multiscale(&self, per_scale: &[Tensor]) -> MultiScaleMaps {
        let maps = self
            .geometries()
            .iter()
            .zip(per_scale)
            .map(|(geo, t)| ScaleMap {
                k: geo.k,
                rows: geo.rows,
                anchors: geo.anchors,
                values: t.data().to_vec(),
                valid: geo.valid_mask(),
            })
            .collect();
        MultiScaleMaps {
            grid: self.grid(),
            anchors: self.cfg.anchors,
            maps,
        }
    }
}
