use chrono::{DateTime, Datelike, Timelike};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{stream_rng, Rng};
use crate::synth::WindowedSample;

use super::base::{BaseForecaster, BaseIds};
use super::layers::{
    positional_encoding, AttentionIds, DenseEncoderIds, EncoderLayerIds, Init, LinearIds, Mode,
};
use super::{Forecaster, ModelConfig, ModelError};

/// Year, month, day, hour, minute.
pub const TIME_FEATURES: usize = 5;
const YEAR_RANGE: (f64, f64) = (1970.0, 2100.0);

/// Calendar fields of a Unix timestamp (UTC), each min-max scaled to `[0, 1]`.
/// Years are scaled over 1970–2100 and may fall outside `[0, 1]` beyond it.
pub fn decompose_timestamp(secs: i64) -> Result<[f64; TIME_FEATURES], ModelError> {
    let t = DateTime::from_timestamp(secs, 0).ok_or(ModelError::BadTimestamp(secs))?;
    Ok([
        (t.year() as f64 - YEAR_RANGE.0) / (YEAR_RANGE.1 - YEAR_RANGE.0),
        (t.month0() as f64) / 11.0,
        (t.day0() as f64) / 30.0,
        t.hour() as f64 / 23.0,
        t.minute() as f64 / 59.0,
    ])
}

fn column_block(c: &Tensor, start: usize, width: usize) -> Tensor {
    let rows = c.rows();
    let data = (0..rows)
        .flat_map(|r| c.row(r)[start..start + width].iter().copied())
        .collect();
    Tensor::matrix(rows, width, data).expect("in bounds")
}

/// Dense encoders per input type, optional fusion, positional encoding and a
/// small self-attention encoder. Output is `L × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EmbeddingIds {
    categorical: Option<(DenseEncoderIds, usize)>,
    continuous: Option<(DenseEncoderIds, usize)>,
    fusion: Option<LinearIds>,
    encoder: Vec<EncoderLayerIds>,
}

impl EmbeddingIds {
    fn new(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        name: &str,
        one_hot_width: usize,
        n_continuous: usize,
        rng: &mut Rng,
    ) -> Self {
        let a = &cfg.arch;
        let d = a.d_model;
        let categorical = (one_hot_width > 0).then(|| {
            let ids =
                DenseEncoderIds::new(store, &format!("{name}.categorical"), one_hot_width, d, rng);
            (ids, one_hot_width)
        });
        let continuous = (n_continuous > 0).then(|| {
            let ids =
                DenseEncoderIds::new(store, &format!("{name}.continuous"), n_continuous, d, rng);
            (ids, n_continuous)
        });
        let fusion = (categorical.is_some() && continuous.is_some()).then(|| {
            LinearIds::new(
                store,
                &format!("{name}.fusion"),
                2 * d,
                d,
                Init::Xavier,
                rng,
            )
        });
        let encoder = (0..a.embed_encoder_layers)
            .map(|i| {
                EncoderLayerIds::new(
                    store,
                    &format!("{name}.encoder{i}"),
                    d,
                    a.n_heads,
                    a.ff_dim,
                    rng,
                )
            })
            .collect();
        Self {
            categorical,
            continuous,
            fusion,
            encoder,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        c: &Tensor,
        pe: Var,
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        let mut parts = Vec::with_capacity(2);
        let mut offset = 0;
        for (enc, width) in self.categorical.iter().chain(&self.continuous) {
            let x = tape.constant(column_block(c, offset, *width));
            parts.push(enc.forward(tape, store, x)?);
            offset += width;
        }
        let mut h = match &self.fusion {
            Some(fusion) => {
                let joined = tape.concat(&parts, 1)?;
                fusion.forward(tape, store, joined)?
            }
            None => parts[0],
        };
        h = tape.add(h, pe)?;
        h = mode.drop(tape, h)?;
        for layer in &self.encoder {
            h = layer.forward(tape, store, h, mode)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ContextIds {
    meta: Option<EmbeddingIds>,
    temporal: Option<EmbeddingIds>,
    /// Per block: cross-attention to the metadata and to the temporal embedding.
    cross: Vec<(Option<AttentionIds>, Option<AttentionIds>)>,
}

/// A frozen base encoder extended with context cross-attention.
#[derive(Clone, Debug)]
pub struct ContextFormerModel {
    cfg: ModelConfig,
    store: ParamStore,
    base: BaseIds,
    ctx: ContextIds,
}

fn check_compatible(base: &ModelConfig, cfg: &ModelConfig) -> Result<(), ModelError> {
    let (a, b) = (&base.arch, &cfg.arch);
    let same = a.d_model == b.d_model
        && a.n_blocks == b.n_blocks
        && a.n_heads == b.n_heads
        && a.patch_len == b.patch_len
        && a.patch_stride == b.patch_stride
        && a.ff_dim == b.ff_dim
        && a.instance_norm == b.instance_norm
        && base.lookback == cfg.lookback
        && base.horizon == cfg.horizon
        && base.n_channels == cfg.n_channels;
    if !same {
        return Err(ModelError::ConfigMismatch(
            "encoder geometry or data shape differs from the base model".into(),
        ));
    }
    if cfg.schema.is_empty() && !cfg.arch.use_temporal {
        return Err(ModelError::ConfigMismatch(
            "no metadata columns and temporal embedding disabled: nothing to attend to".into(),
        ));
    }
    Ok(())
}

impl ContextFormerModel {
    /// Copies `base`, freezes every copied parameter except the head, and adds
    /// the context modules. Cross-attention output projections and the final
    /// layer of every dense context encoder start at zero, so the result
    /// forecasts exactly like `base` until trained.
    pub fn attach(base: &BaseForecaster, cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        check_compatible(base.config(), cfg)?;
        let mut store = base.store().clone();
        for id in store.ids().collect::<Vec<_>>() {
            store.set_frozen(id, true);
        }
        for id in base.head_ids() {
            store.set_frozen(id, false);
        }
        let mut rng = stream_rng(seed, 1);
        let (d, heads) = (cfg.arch.d_model, cfg.arch.n_heads);
        let meta = (!cfg.schema.is_empty()).then(|| {
            let s = &cfg.schema;
            EmbeddingIds::new(
                cfg,
                &mut store,
                "ctx.meta",
                s.one_hot_width(),
                s.n_continuous,
                &mut rng,
            )
        });
        let temporal = cfg.arch.use_temporal.then(|| {
            EmbeddingIds::new(cfg, &mut store, "ctx.temporal", 0, TIME_FEATURES, &mut rng)
        });
        let cross = (0..cfg.arch.n_blocks)
            .map(|b| {
                let m = meta.as_ref().map(|_| {
                    AttentionIds::new(
                        &mut store,
                        &format!("ctx.block{b}.meta_xattn"),
                        d,
                        heads,
                        Init::Zero,
                        &mut rng,
                    )
                });
                let t = temporal.as_ref().map(|_| {
                    AttentionIds::new(
                        &mut store,
                        &format!("ctx.block{b}.temporal_xattn"),
                        d,
                        heads,
                        Init::Zero,
                        &mut rng,
                    )
                });
                (m, t)
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            store,
            base: base.ids.clone(),
            ctx: ContextIds {
                meta,
                temporal,
                cross,
            },
        })
    }

    /// A context model with freshly initialised base weights, used as the
    /// skeleton for loading checkpoints.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::attach(&BaseForecaster::new(cfg.clone(), seed)?, cfg, seed)
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        self.base.head_ids()
    }

    pub fn trainable_parameters(&self) -> Vec<(&str, &Tensor)> {
        self.store
            .trainable_ids()
            .into_iter()
            .map(|id| (self.store.get(id).name(), self.store.value(id)))
            .collect()
    }

    pub fn frozen_parameters(&self) -> Vec<(&str, &Tensor)> {
        self.store
            .frozen_ids()
            .into_iter()
            .map(|id| (self.store.get(id).name(), self.store.value(id)))
            .collect()
    }

    fn time_features(&self, sample: &WindowedSample) -> Result<Tensor, ModelError> {
        let ts = sample
            .timestamps
            .as_ref()
            .ok_or(ModelError::MissingTimestamps)?;
        if ts.len() != self.cfg.lookback {
            return Err(ModelError::Shape(format!(
                "{} timestamps for lookback {}",
                ts.len(),
                self.cfg.lookback
            )));
        }
        let mut data = Vec::with_capacity(ts.len() * TIME_FEATURES);
        for &t in ts {
            data.extend(decompose_timestamp(t)?);
        }
        Ok(Tensor::matrix(ts.len(), TIME_FEATURES, data)?)
    }
}

impl Forecaster for ContextFormerModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(
        &self,
        tape: &mut Tape,
        sample: &WindowedSample,
        mode: &mut Mode,
    ) -> Result<Var, ModelError> {
        let (l, d) = (self.cfg.lookback, self.cfg.arch.d_model);
        let store = &self.store;
        let pe = tape.constant(positional_encoding(l, d));
        let meta = match &self.ctx.meta {
            Some(ids) => {
                let width = self.cfg.schema.width();
                let c = sample
                    .c_hist
                    .as_ref()
                    .ok_or(ModelError::MissingMetadata(width))?;
                if c.shape() != [l, width] {
                    return Err(ModelError::Shape(format!(
                        "c_hist {:?}, expected [{l}, {width}]",
                        c.shape()
                    )));
                }
                Some(ids.forward(tape, store, c, pe, mode)?)
            }
            None => None,
        };
        let temporal = match &self.ctx.temporal {
            Some(ids) => {
                let feats = self.time_features(sample)?;
                Some(ids.forward(tape, store, &feats, pe, mode)?)
            }
            None => None,
        };
        let cross = &self.ctx.cross;
        let mut hook = |tape: &mut Tape, b: usize, h: Var, mode: &mut Mode| {
            let mut out = h;
            let (m_attn, t_attn) = &cross[b];
            for (attn, emb) in [(m_attn, meta), (t_attn, temporal)] {
                if let (Some(attn), Some(emb)) = (attn, emb) {
                    let (a, _) = attn.forward(tape, store, h, emb)?;
                    let a = mode.drop(tape, a)?;
                    out = tape.add(out, a)?;
                }
            }
            Ok(out)
        };
        self.base.forward(
            &self.cfg,
            store,
            tape,
            &sample.x_hist,
            mode,
            Some(&mut hook),
        )
    }
}
