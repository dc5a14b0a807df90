//! 4D propagation: a temporal pass on the annotated slice, then z-passes
//! toward base and apex at every phase, with region-dependent memory banks.

mod config;
mod region;
mod schedule;

pub use config::{working_dims, ContinuityMode, MatcherMode, PropagationConfig};
pub use region::{partition_regions, Region, RegionPartition};
pub use schedule::{chain_prev, phase_order, validate_schedule, BankRule, FrameId, SchedulePlan, Step};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{ensure_dims, Error, Result};
use crate::featurizer::{decode, encode_value, load_feature_pyramid, EncoderConfig, EncoderMode, KeyEncoder};
use crate::grid::{one_hot, CineVolume, LabelMap, LabelVolume, SoftLabelMap, NUM_FG};
use crate::matcher::{OpCounter, Similarity};
use crate::par;
use crate::pyramid::{dense_multiscale, match_multiscale_with, FeaturePyramid, Scales};

/// Key and value pyramids of one memory frame.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub id: FrameId,
    pub key: Arc<FeaturePyramid>,
    pub value: Arc<FeaturePyramid>,
}

/// Memory frames available to one query. The first entry is the anchor.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    entries: Vec<BankEntry>,
    t_max: usize,
}

impl MemoryBank {
    pub fn new(t_max: usize) -> Self {
        Self { entries: Vec::new(), t_max }
    }

    /// Adds an entry; a frame already present is ignored.
    pub fn push(&mut self, entry: BankEntry) -> Result<()> {
        if self.entries.iter().any(|e| e.id == entry.id) {
            return Ok(());
        }
        if self.entries.len() == self.t_max {
            return Err(Error::Scheduling(format!("bank full ({}) when adding {}", self.t_max, entry.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }
    pub fn ids(&self) -> Vec<FrameId> {
        self.entries.iter().map(|e| e.id).collect()
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn t_max(&self) -> usize {
        self.t_max
    }
}

/// Settings of a single-frame segmentation.
#[derive(Debug, Clone, Copy)]
pub struct SegmentParams {
    pub matcher: MatcherMode,
    pub plmm: crate::matcher::PlmmParams,
    pub scales: Scales,
    pub value_mode: crate::featurizer::ValueMode,
    #[doc(hidden)]
    pub similarity: Similarity,
}

impl SegmentParams {
    pub fn new(cfg: &PropagationConfig, enc: &EncoderConfig) -> Self {
        Self {
            matcher: cfg.matcher,
            plmm: cfg.plmm_params(),
            scales: cfg.scales,
            value_mode: enc.value_mode,
            similarity: Similarity::NegSqL2,
        }
    }
}

/// Soft labels of a query frame at working resolution (`16×` the scale-4
/// key map).
pub fn segment_frame(
    query: &FeaturePyramid,
    bank: &MemoryBank,
    params: &SegmentParams,
    counter: &mut OpCounter,
) -> Result<SoftLabelMap> {
    if bank.is_empty() {
        return Err(Error::State("cannot segment with an empty memory bank".into()));
    }
    let keys: Vec<&FeaturePyramid> = bank.entries.iter().map(|e| e.key.as_ref()).collect();
    let values: Vec<&FeaturePyramid> = bank.entries.iter().map(|e| e.value.as_ref()).collect();
    // The top-K budget cannot exceed the number of memory patches.
    let mut plmm = params.plmm;
    let r = match params.matcher {
        MatcherMode::Plmm => {
            let g = if params.scales.uses4() { query.scale4() } else { query.scale3() };
            let p = if params.scales.uses4() { plmm.patch } else { 2 * plmm.patch };
            let n = crate::patcher::make_layout(g.height(), g.width(), p)?.len();
            plmm.k = plmm.k.min(n * keys.len());
            match_multiscale_with(query, &keys, &values, plmm, params.scales, counter, params.similarity)?
        }
        MatcherMode::Dense => dense_multiscale(query, &keys, &values, params.scales, counter)?,
    };
    let h = query.scale4().height() * crate::featurizer::STRIDE4;
    let w = query.scale4().width() * crate::featurizer::STRIDE4;
    decode(r.readout3.as_ref(), r.readout4.as_ref(), NUM_FG + 1, params.value_mode, h, w)
}

/// Where query and memory keys come from.
#[derive(Debug, Clone)]
pub enum KeySource {
    Handcrafted(EncoderConfig),
    /// `key_z{z}_t{t}_s4.cgrid` and `key_z{z}_t{t}_s3.cgrid` per frame.
    Files(PathBuf),
}

impl KeySource {
    pub fn from_config(enc: &EncoderConfig, dir: Option<PathBuf>) -> Result<Self> {
        match (enc.mode, dir) {
            (EncoderMode::Handcrafted, _) => Ok(KeySource::Handcrafted(enc.clone())),
            (EncoderMode::ExternalFile, Some(d)) => Ok(KeySource::Files(d)),
            (EncoderMode::ExternalFile, None) => {
                Err(Error::Parameter("external-file key mode needs a feature directory".into()))
            }
        }
    }
}

/// Key pyramids of every frame, resampled to `wh×ww`, indexed `z·T + t`.
pub fn encode_all_keys(volume: &CineVolume, source: &KeySource, wh: usize, ww: usize) -> Result<Vec<Arc<FeaturePyramid>>> {
    let [z_count, t_count, _, _] = volume.dims();
    let n = z_count * t_count;
    let keys: Vec<Result<FeaturePyramid>> = match source {
        KeySource::Handcrafted(cfg) => {
            let enc = KeyEncoder::new(cfg)?;
            par::map_range(n, |i| enc.encode(&volume.frame(i / t_count, i % t_count).resize(wh, ww)?))
        }
        KeySource::Files(dir) => par::map_range(n, |i| {
            let (z, t) = (i / t_count, i % t_count);
            let p = load_feature_pyramid(
                dir.join(format!("key_z{z}_t{t}_s4.cgrid")),
                dir.join(format!("key_z{z}_t{t}_s3.cgrid")),
            )?;
            if p.scale4().height() * 16 != wh || p.scale4().width() * 16 != ww {
                return Err(Error::Pyramid(format!(
                    "key maps for frame {z},{t} are {}x{} at stride 16, expected {}x{}",
                    p.scale4().height(),
                    p.scale4().width(),
                    wh / 16,
                    ww / 16
                )));
            }
            Ok(p)
        }),
    };
    keys.into_iter().map(|k| k.map(Arc::new)).collect()
}

/// Masks for every frame plus the memory frames each was read from.
#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub masks: LabelVolume,
    /// Memory frames per frame; the anchor maps to an empty list.
    pub provenance: BTreeMap<FrameId, Vec<FrameId>>,
    /// Frames in the order they were segmented, anchor first.
    pub order: Vec<FrameId>,
    pub counter: OpCounter,
    pub working_dims: (usize, usize),
}

impl PropagationResult {
    /// `{"z,t": ["z,t", ...]}` in frame order.
    pub fn provenance_json(&self) -> serde_json::Value {
        let map = self
            .provenance
            .iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::from(v.iter().map(|f| f.to_string()).collect::<Vec<_>>())))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// Runs the full schedule from a seed mask at `(z0, t0)`.
pub fn run_4d(
    volume: &CineVolume,
    seed: &LabelMap,
    cfg: &PropagationConfig,
    enc: &EncoderConfig,
) -> Result<PropagationResult> {
    run_4d_with(volume, seed, cfg, &KeySource::Handcrafted(enc.clone()), &SegmentParams::new(cfg, enc))
}

pub fn run_4d_with(
    volume: &CineVolume,
    seed: &LabelMap,
    cfg: &PropagationConfig,
    keys: &KeySource,
    params: &SegmentParams,
) -> Result<PropagationResult> {
    let [z_count, t_count, h, w] = volume.dims();
    let partition = cfg.validate(z_count, t_count)?;
    ensure_dims!(
        seed.height() == h && seed.width() == w,
        "seed {}x{} does not match frames {h}x{w}",
        seed.height(),
        seed.width()
    );
    let anchor = FrameId::new(cfg.z0_for(z_count), cfg.t0);
    let plan = SchedulePlan {
        partition: &partition,
        t_count,
        z0: anchor.z,
        t0: anchor.t,
        apex_t_max: cfg.apex_t_max,
        continuity: cfg.continuity_mode,
    };
    let steps = plan.build();
    validate_schedule(&steps, anchor, z_count, t_count, cfg.continuity_mode)?;

    let (wh, ww) = working_dims(h, w, cfg.work_short_side, cfg.patch)?;
    let key_maps = encode_all_keys(volume, keys, wh, ww)?;
    let idx = |f: FrameId| f.z * t_count + f.t;

    let mut soft: Vec<Option<SoftLabelMap>> = vec![None; z_count * t_count];
    let mut values: Vec<Option<Arc<FeaturePyramid>>> = vec![None; z_count * t_count];
    let mut masks = LabelVolume::zeros(volume.dims(), volume.spacing_mm());
    masks.set_frame(anchor.z, anchor.t, seed)?;
    soft[idx(anchor)] = Some(one_hot(seed, NUM_FG)?);

    let mut provenance = BTreeMap::from([(anchor, Vec::new())]);
    let mut order = vec![anchor];
    let mut counter = OpCounter::default();

    for step in &steps {
        let mut bank = MemoryBank::new(step.t_max);
        for &m in &step.bank {
            let i = idx(m);
            if values[i].is_none() {
                let s = soft[i]
                    .as_ref()
                    .ok_or_else(|| Error::Scheduling(format!("{} needs {m}, which has no mask yet", step.query)))?;
                values[i] = Some(Arc::new(encode_value(&s.resize(wh, ww)?, params.value_mode)?));
            }
            bank.push(BankEntry { id: m, key: key_maps[i].clone(), value: values[i].clone().expect("just set") })?;
        }
        let pred = segment_frame(&key_maps[idx(step.query)], &bank, params, &mut counter)?.resize(h, w)?;
        masks.set_frame(step.query.z, step.query.t, &pred.argmax())?;
        soft[idx(step.query)] = Some(pred);
        provenance.insert(step.query, bank.ids());
        order.push(step.query);
    }
    Ok(PropagationResult { masks, provenance, order, counter, working_dims: (wh, ww) })
}
