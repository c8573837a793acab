//! Self-contained training snapshots.
//!
//! A checkpoint is one JSON document holding the flattened parameter map,
//! optimizer state, and every config needed to rebuild the exact model:
//! the frozen encoder is stored only as its config (seed included) and
//! re-derived on load. Floats survive the round trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, DetectorParams};
use crate::error::{Error, Result};
use crate::frontend::{EncoderParams, FrontendConfig};
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::tracer::{TracerConfig, TracerParams};

/// Bumped when the on-disk layout changes incompatibly.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointKind {
    Detector,
    Tracer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    /// Completed optimizer steps when the snapshot was taken.
    pub step: u64,
    /// The seed the training run was launched with.
    pub train_seed: u64,
    /// Flattened parameters, keyed by visit name.
    pub params: BTreeMap<String, Tensor>,
    /// Full optimizer state; absent for inference-only exports.
    pub optimizer: Option<AdamW>,
    /// Frozen encoder recipe; parameters are re-derived from its seed.
    pub frontend: FrontendConfig,
    pub detector: Option<DetectorConfig>,
    pub tracer: Option<TracerConfig>,
    /// Seen class ids of a tracer run, in logit order.
    pub classes: Vec<String>,
    /// Calibrated open-set rejection threshold, when one exists.
    pub threshold: Option<f64>,
}

fn flatten(visit: impl FnOnce(&mut dyn FnMut(&str, &Tensor))) -> BTreeMap<String, Tensor> {
    let mut map = BTreeMap::new();
    visit(&mut |name, t| {
        map.insert(name.to_string(), t.clone());
    });
    map
}

/// Overwrites every visited tensor from the map; every name must match in
/// both directions and shapes must agree.
fn fill(
    map: &BTreeMap<String, Tensor>,
    visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let mut failure: Option<Error> = None;
    let mut used = 0usize;
    visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        match map.get(name) {
            None => failure = Some(Error::Checkpoint(format!("missing parameter {name:?}"))),
            Some(src) if src.shape() != t.shape() => {
                failure = Some(Error::shape(
                    "Checkpoint",
                    format!("{name:?}: stored {:?} vs expected {:?}", src.shape(), t.shape()),
                ));
            }
            Some(src) => {
                *t = src.clone();
                used += 1;
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if used != map.len() {
        return Err(Error::Checkpoint(format!(
            "{} stored parameters, {} expected by the model",
            map.len(),
            used
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn for_detector(
        params: &DetectorParams,
        cfg: &DetectorConfig,
        frontend: &FrontendConfig,
        optimizer: Option<&AdamW>,
        step: u64,
        train_seed: u64,
    ) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Detector,
            step,
            train_seed,
            params: flatten(|f| params.visit("", f)),
            optimizer: optimizer.cloned(),
            frontend: frontend.clone(),
            detector: Some(cfg.clone()),
            tracer: None,
            classes: Vec::new(),
            threshold: None,
        }
    }

    pub fn for_tracer(
        params: &TracerParams,
        cfg: &TracerConfig,
        frontend: &FrontendConfig,
        optimizer: Option<&AdamW>,
        step: u64,
        train_seed: u64,
        threshold: Option<f64>,
    ) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Tracer,
            step,
            train_seed,
            params: flatten(|f| params.visit("", f)),
            optimizer: optimizer.cloned(),
            frontend: frontend.clone(),
            detector: None,
            tracer: Some(cfg.clone()),
            classes: params.classes.clone(),
            threshold,
        }
    }

    /// Rebuilds the detector parameters stored in this checkpoint.
    pub fn detector_params(&self) -> Result<(DetectorParams, DetectorConfig)> {
        if self.kind != CheckpointKind::Detector {
            return Err(Error::Checkpoint("not a detector checkpoint".into()));
        }
        let cfg = self
            .detector
            .clone()
            .ok_or_else(|| Error::Checkpoint("detector config missing".into()))?;
        let mut params = DetectorParams::init(&cfg, 0)?;
        fill(&self.params, |f| params.visit_mut("", f))?;
        Ok((params, cfg))
    }

    /// Rebuilds the tracer parameters stored in this checkpoint.
    pub fn tracer_params(&self) -> Result<(TracerParams, TracerConfig)> {
        if self.kind != CheckpointKind::Tracer {
            return Err(Error::Checkpoint("not a tracer checkpoint".into()));
        }
        let cfg = self
            .tracer
            .clone()
            .ok_or_else(|| Error::Checkpoint("tracer config missing".into()))?;
        let mut params = TracerParams::init(&cfg, self.classes.clone(), 0)?;
        fill(&self.params, |f| params.visit_mut("", f))?;
        Ok((params, cfg))
    }

    /// Re-derives the frozen encoder recorded by this checkpoint.
    pub fn encoder(&self) -> Result<EncoderParams> {
        EncoderParams::from_seed(&self.frontend)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        fs::write(path, blob).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let blob = fs::read_to_string(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&blob)
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} (this build reads {})",
                ckpt.format_version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LaConfig;
    use crate::nesblock::NesConfig;
    use crate::optim::AdamWConfig;
    use crate::tracer::TracerConfig;

    fn det_cfg() -> DetectorConfig {
        DetectorConfig {
            variant: crate::detector::Variant::Nes2NetLa,
            blocks: 1,
            nes: NesConfig { channels: 8, frames: 0, subsets: 2, ws_branches: 2, se_reduction: 2, kernel: 3 },
            la: LaConfig { window: 1, attn_width: 4, classes: 2 },
        }
    }

    fn fe_cfg() -> FrontendConfig {
        FrontendConfig { layers: 2, channels: 8, hop: 320, sample_rate: 16000, segment_seconds: 1, seed: 99 }
    }

    #[test]
    fn detector_round_trip_is_bit_exact() {
        let cfg = det_cfg();
        let params = DetectorParams::init(&cfg, 21).unwrap();
        let ckpt = Checkpoint::for_detector(&params, &cfg, &fe_cfg(), None, 120, 5);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let (rebuilt, rcfg) = loaded.detector_params().unwrap();
        assert_eq!(rebuilt, params);
        assert_eq!(rcfg, cfg);
    }

    #[test]
    fn tracer_round_trip_keeps_classes_and_threshold() {
        let tcfg = TracerConfig { layers: 2, channels: 8, se_reduction: 2 };
        let classes: Vec<String> = (0..4).map(|i| format!("A{i}")).collect();
        let params = TracerParams::init(&tcfg, classes.clone(), 33).unwrap();
        let ckpt = Checkpoint::for_tracer(&params, &tcfg, &fe_cfg(), None, 7, 3, Some(0.415));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.threshold, Some(0.415));
        assert_eq!(loaded.classes, classes);

        let (rebuilt, _) = loaded.tracer_params().unwrap();
        assert_eq!(rebuilt, params);
    }

    #[test]
    fn optimizer_state_rides_along() {
        let cfg = det_cfg();
        let mut params = DetectorParams::init(&cfg, 4).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.01, ..AdamWConfig::default() }).unwrap();

        // A couple of fake steps to populate moments.
        let names = crate::optim::visit_names(|f| params.visit("", f));
        for round in 0..3 {
            let mut grads = BTreeMap::new();
            params.visit("", &mut |name, t| {
                let mut g = Tensor::zeros(t.shape());
                for (i, v) in g.data_mut().iter_mut().enumerate() {
                    *v = ((i + round) as f64 * 0.01).sin();
                }
                grads.insert(name.to_string(), g);
            });
            opt.step(&grads, |f| params.visit_mut("", f)).unwrap();
        }
        assert_eq!(opt.moments.len(), names.len());

        let ckpt = Checkpoint::for_detector(&params, &cfg, &fe_cfg(), Some(&opt), 3, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.json");
        ckpt.save(&path).unwrap();
        let restored = Checkpoint::load(&path).unwrap().optimizer.unwrap();
        assert_eq!(restored, opt);
    }

    #[test]
    fn encoder_re_derives_from_the_stored_seed() {
        let fe = fe_cfg();
        let original = EncoderParams::from_seed(&fe).unwrap();
        let cfg = det_cfg();
        let params = DetectorParams::init(&cfg, 1).unwrap();
        let ckpt = Checkpoint::for_detector(&params, &cfg, &fe, None, 0, 0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fe.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.encoder().unwrap(), original);
    }

    #[test]
    fn corrupted_containers_are_refused() {
        let cfg = det_cfg();
        let params = DetectorParams::init(&cfg, 2).unwrap();
        let base = Checkpoint::for_detector(&params, &cfg, &fe_cfg(), None, 0, 0);

        // Wrong kind.
        assert!(base.tracer_params().is_err());

        // A missing parameter.
        let mut missing = base.clone();
        let key = missing.params.keys().next().unwrap().clone();
        missing.params.remove(&key);
        assert!(missing.detector_params().is_err());

        // An extra parameter.
        let mut extra = base.clone();
        extra.params.insert("ghost".into(), Tensor::zeros(&[1]));
        assert!(extra.detector_params().is_err());

        // A reshaped parameter.
        let mut bent = base.clone();
        let key = bent.params.keys().next().unwrap().clone();
        bent.params.insert(key, Tensor::zeros(&[1, 1, 1]));
        assert!(bent.detector_params().is_err());

        // A future format version.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("future.json");
        let mut future = base.clone();
        future.format_version = CHECKPOINT_VERSION + 1;
        let blob = serde_json::to_string(&future).unwrap();
        std::fs::write(&path, blob).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn saved_bytes_are_stable_across_a_load_save_cycle() {
        let cfg = det_cfg();
        let params = DetectorParams::init(&cfg, 8).unwrap();
        let ckpt = Checkpoint::for_detector(&params, &cfg, &fe_cfg(), None, 42, 17);

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        ckpt.save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
