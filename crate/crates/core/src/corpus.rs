//! Deterministic synthetic corpus: 30 parameterized spoof "API" generators
//! in five signal families, one bonafide generator, and the split protocol.
//!
//! Everything derives from a single corpus seed: per-API parameters, per
//! utterance seeds, and durations. Waveforms are regenerated on demand from
//! (spec, seed, duration), so manifests alone fully describe a corpus and
//! audio files never need to exist on disk.
//!
//! Splits: the first 21 APIs (A0 to A20) go 70/10/20 into train/dev/eval via
//! largest-remainder rounding, A21 to A23 are dev-only, A24 to A29 are
//! eval-only. Bonafide utterances are allocated to splits proportionally to
//! each split's spoof mass, so per-split label balance stays as close to 1:1
//! as rounding allows.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::metrics::TrialLabel;
use crate::seeds;

/// Bump when any generator's output changes; recorded in manifest headers.
pub const GENERATOR_VERSION: u32 = 1;

/// Total spoof APIs, A0 to A29.
pub const N_APIS: usize = 30;

/// APIs A0..A20 appear in training; the rest are held out.
pub const N_SEEN_APIS: usize = 21;

/// Peak amplitude after normalization.
const PEAK: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    HarmonicStack,
    AmNoise,
    FilteredPulse,
    ChirpMix,
    VocoderBuzz,
    Bonafide,
}

impl Family {
    /// Spoof APIs cycle through the five synthetic families.
    pub fn for_api(api_index: usize) -> Family {
        match api_index % 5 {
            0 => Family::HarmonicStack,
            1 => Family::AmNoise,
            2 => Family::FilteredPulse,
            3 => Family::ChirpMix,
            _ => Family::VocoderBuzz,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::HarmonicStack => "harmonic-stack",
            Family::AmNoise => "am-noise",
            Family::FilteredPulse => "filtered-pulse",
            Family::ChirpMix => "chirp-mix",
            Family::VocoderBuzz => "vocoder-buzz",
            Family::Bonafide => "bonafide",
        }
    }
}

/// One source's generator: its family plus the numeric parameters drawn
/// deterministically from the corpus seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiGenSpec {
    pub api_id: String,
    pub family: Family,
    pub params: BTreeMap<String, f64>,
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

impl ApiGenSpec {
    /// Parameters for spoof API `api_index` (0-based) under `corpus_seed`.
    pub fn spoof(corpus_seed: u64, api_index: usize) -> Result<ApiGenSpec> {
        if api_index >= N_APIS {
            return Err(Error::invalid(
                "ApiGenSpec",
                format!("api index {api_index} out of {N_APIS}"),
            ));
        }
        let family = Family::for_api(api_index);
        let mut rng = seeds::rng(seeds::derive_indexed(corpus_seed, "corpus.api", api_index as u64));
        let mut p = BTreeMap::new();
        match family {
            Family::HarmonicStack => {
                p.insert("f0".into(), draw(&mut rng, 90.0, 300.0));
                p.insert("harmonics".into(), rng.gen_range(4..=12) as f64);
                p.insert("decay".into(), draw(&mut rng, 0.55, 0.9));
                p.insert("vibrato_hz".into(), draw(&mut rng, 3.0, 7.0));
                p.insert("vibrato_depth".into(), draw(&mut rng, 0.05, 0.3));
            }
            Family::AmNoise => {
                p.insert("pole".into(), draw(&mut rng, 0.6, 0.97));
                p.insert("mod_rate".into(), draw(&mut rng, 1.5, 8.0));
                p.insert("mod_depth".into(), draw(&mut rng, 0.3, 0.9));
            }
            Family::FilteredPulse => {
                p.insert("f0".into(), draw(&mut rng, 70.0, 240.0));
                p.insert("resonance_hz".into(), draw(&mut rng, 400.0, 2600.0));
                p.insert("bandwidth_hz".into(), draw(&mut rng, 60.0, 350.0));
            }
            Family::ChirpMix => {
                p.insert("f_lo".into(), draw(&mut rng, 200.0, 900.0));
                p.insert("f_hi".into(), draw(&mut rng, 1200.0, 3400.0));
                p.insert("period_s".into(), draw(&mut rng, 0.3, 1.2));
                p.insert("balance".into(), draw(&mut rng, 0.35, 0.65));
            }
            Family::VocoderBuzz => {
                p.insert("f0".into(), draw(&mut rng, 80.0, 280.0));
                p.insert("odd_harmonics".into(), rng.gen_range(5..=15) as f64);
                p.insert("comb_delay_ms".into(), draw(&mut rng, 2.0, 12.0));
                p.insert("comb_gain".into(), draw(&mut rng, 0.3, 0.7));
                p.insert("noise".into(), draw(&mut rng, 0.02, 0.12));
            }
            Family::Bonafide => unreachable!("spoof families only"),
        }
        Ok(ApiGenSpec { api_id: format!("A{api_index}"), family, params: p })
    }

    /// The bonafide source: a noise-excited formant-like resonator bank.
    pub fn bonafide(corpus_seed: u64) -> ApiGenSpec {
        let mut rng = seeds::rng(seeds::derive(corpus_seed, "corpus.bonafide"));
        let mut p = BTreeMap::new();
        p.insert("f1_lo".into(), draw(&mut rng, 300.0, 420.0));
        p.insert("f1_hi".into(), draw(&mut rng, 620.0, 800.0));
        p.insert("f2_lo".into(), draw(&mut rng, 900.0, 1100.0));
        p.insert("f2_hi".into(), draw(&mut rng, 1500.0, 1800.0));
        p.insert("f3_lo".into(), draw(&mut rng, 2000.0, 2300.0));
        p.insert("f3_hi".into(), draw(&mut rng, 2800.0, 3200.0));
        p.insert("tilt_pole".into(), draw(&mut rng, 0.93, 0.985));
        ApiGenSpec { api_id: "bonafide".into(), family: Family::Bonafide, params: p }
    }

    /// Every spec for one corpus: A0..A29 then bonafide, in that order.
    pub fn all(corpus_seed: u64) -> Result<Vec<ApiGenSpec>> {
        let mut specs: Vec<ApiGenSpec> = (0..N_APIS)
            .map(|i| ApiGenSpec::spoof(corpus_seed, i))
            .collect::<Result<_>>()?;
        specs.push(ApiGenSpec::bonafide(corpus_seed));
        Ok(specs)
    }

    fn param(&self, name: &str) -> f64 {
        *self.params.get(name).unwrap_or_else(|| panic!("{}: missing param {name}", self.api_id))
    }
}

/// Two-pole resonator state, y[i] = 2 r cos(th) y[i-1] - r^2 y[i-2] + x[i].
struct Resonator {
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(center_hz: f64, bandwidth_hz: f64, sr: f64) -> Resonator {
        let r = (-std::f64::consts::PI * bandwidth_hz / sr).exp();
        let th = 2.0 * std::f64::consts::PI * center_hz / sr;
        Resonator { a1: 2.0 * r * th.cos(), a2: -r * r, y1: 0.0, y2: 0.0 }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a1 * self.y1 + self.a2 * self.y2 + x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn gen_harmonic_stack(spec: &ApiGenSpec, rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let f0 = spec.param("f0");
    let harmonics = spec.param("harmonics") as usize;
    let decay = spec.param("decay");
    let vib_hz = spec.param("vibrato_hz");
    let vib_depth = spec.param("vibrato_depth");
    let phases: Vec<f64> = (0..harmonics).map(|_| draw(rng, 0.0, TAU)).collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let vib = vib_depth * (TAU * vib_hz * t).sin();
            let mut s = 0.0;
            let mut amp = 1.0;
            for (h, &ph) in phases.iter().enumerate() {
                let k = (h + 1) as f64;
                s += amp * (TAU * f0 * k * t + k * vib + ph).sin();
                amp *= decay;
            }
            s
        })
        .collect()
}

fn gen_am_noise(spec: &ApiGenSpec, rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let pole = spec.param("pole");
    let rate = spec.param("mod_rate");
    let depth = spec.param("mod_depth");
    let mut y = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let e: f64 = draw(rng, -1.0, 1.0);
            y = pole * y + (1.0 - pole) * e;
            let env = 1.0 - depth * (0.5 + 0.5 * (TAU * rate * t).sin());
            y * env
        })
        .collect()
}

fn gen_filtered_pulse(spec: &ApiGenSpec, rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let f0 = spec.param("f0");
    let mut reso = Resonator::new(spec.param("resonance_hz"), spec.param("bandwidth_hz"), sr);
    let mut phase: f64 = draw(rng, 0.0, 1.0);
    (0..n)
        .map(|_| {
            phase += f0 / sr;
            let x = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            reso.step(x)
        })
        .collect()
}

fn gen_chirp_mix(spec: &ApiGenSpec, rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let f_lo = spec.param("f_lo");
    let f_hi = spec.param("f_hi");
    let period = spec.param("period_s");
    let balance = spec.param("balance");
    let (ph1, ph2) = (draw(rng, 0.0, TAU), draw(rng, 0.0, TAU));
    let mut phase_up = ph1;
    let mut phase_down = ph2;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let frac = (t / period).fract();
            let f_up = f_lo + (f_hi - f_lo) * frac;
            let f_down = f_hi - (f_hi - f_lo) * frac;
            phase_up += TAU * f_up / sr;
            phase_down += TAU * f_down / sr;
            balance * phase_up.sin() + (1.0 - balance) * phase_down.sin()
        })
        .collect()
}

fn gen_vocoder_buzz(spec: &ApiGenSpec, rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    let f0 = spec.param("f0");
    let odd = spec.param("odd_harmonics") as usize;
    let delay = ((spec.param("comb_delay_ms") / 1000.0 * sr).round() as usize).max(1);
    let gain = spec.param("comb_gain");
    let noise = spec.param("noise");
    let phase: f64 = draw(rng, 0.0, TAU);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let mut s = 0.0;
        for k in 0..odd {
            let h = (2 * k + 1) as f64;
            s += (TAU * f0 * h * t + phase).sin() / h;
        }
        s += noise * draw(rng, -1.0, 1.0);
        if i >= delay {
            s += gain * out[i - delay];
        }
        out.push(s);
    }
    out
}

fn gen_bonafide(spec: &ApiGenSpec, rng: &mut impl Rng, n: usize, sr: f64) -> Vec<f64> {
    // Per-utterance formant positions inside the corpus-level ranges.
    let f1 = draw(rng, spec.param("f1_lo"), spec.param("f1_hi"));
    let f2 = draw(rng, spec.param("f2_lo"), spec.param("f2_hi"));
    let f3 = draw(rng, spec.param("f3_lo"), spec.param("f3_hi"));
    let env_hz = draw(rng, 0.2, 1.0);
    let env_phase = draw(rng, 0.0, TAU);
    let tilt = spec.param("tilt_pole");
    let mut r1 = Resonator::new(f1, 90.0, sr);
    let mut r2 = Resonator::new(f2, 120.0, sr);
    let mut r3 = Resonator::new(f3, 180.0, sr);
    let mut low = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let e: f64 = draw(rng, -1.0, 1.0);
            low = tilt * low + (1.0 - tilt) * e;
            let excited = r1.step(low) + 0.6 * r2.step(low) + 0.35 * r3.step(low);
            let env = 0.7 + 0.3 * (TAU * env_hz * t + env_phase).sin();
            excited * env
        })
        .collect()
}

/// Render one utterance. Deterministic in (spec, utt_seed, duration,
/// sample_rate); peak-normalized to 0.95.
pub fn generate_utterance(
    spec: &ApiGenSpec,
    utt_seed: u64,
    duration_s: f64,
    sample_rate: u32,
) -> Result<Waveform> {
    if !(1.0..=10.0).contains(&duration_s) {
        return Err(Error::invalid(
            "generate_utterance",
            format!("duration {duration_s} outside [1, 10] seconds"),
        ));
    }
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let mut rng = seeds::rng(utt_seed);
    let mut samples = match spec.family {
        Family::HarmonicStack => gen_harmonic_stack(spec, &mut rng, n, sr),
        Family::AmNoise => gen_am_noise(spec, &mut rng, n, sr),
        Family::FilteredPulse => gen_filtered_pulse(spec, &mut rng, n, sr),
        Family::ChirpMix => gen_chirp_mix(spec, &mut rng, n, sr),
        Family::VocoderBuzz => gen_vocoder_buzz(spec, &mut rng, n, sr),
        Family::Bonafide => gen_bonafide(spec, &mut rng, n, sr),
    };
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        for v in &mut samples {
            *v *= g;
        }
    }
    Waveform::new(samples, sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::invalid("Split", format!("unknown split {s:?}"))),
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One utterance's identity and placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub seed: u64,
    pub label: TrialLabel,
    /// "A<n>" for spoof, "bonafide" otherwise.
    pub api_id: String,
    pub split: Split,
    pub duration_s: f64,
}

/// A full corpus description: the seed reconstructs every spec and waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub corpus_seed: u64,
    pub records: Vec<ManifestRecord>,
}

/// Largest-remainder split of `total` into parts proportional to `weights`.
/// Ties go to the earliest part, so the result is deterministic.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(total - assigned) {
        out[order[i]] += 1;
    }
    out
}

const SPLIT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

/// Per-API utterance counts for the three splits.
fn api_split_counts(api_index: usize, n_per_api: usize) -> [usize; 3] {
    if api_index < N_SEEN_APIS {
        let c = largest_remainder(n_per_api, &SPLIT_FRACTIONS);
        [c[0], c[1], c[2]]
    } else if api_index < 24 {
        [0, n_per_api, 0] // A21..A23: dev only
    } else {
        [0, 0, n_per_api] // A24..A29: eval only
    }
}

/// Build the full corpus manifest under the split protocol.
pub fn build_manifest(corpus_seed: u64, n_per_api: usize, n_bonafide: usize) -> Result<Manifest> {
    if n_per_api < 10 {
        return Err(Error::invalid(
            "build_manifest",
            format!("n_per_api {n_per_api} < 10 cannot populate every split"),
        ));
    }
    if n_bonafide < 3 {
        return Err(Error::invalid("build_manifest", "need at least 3 bonafide utterances"));
    }
    let mut records = Vec::new();
    let mut spoof_mass = [0usize; 3];
    for api in 0..N_APIS {
        let counts = api_split_counts(api, n_per_api);
        let mut k = 0;
        for (si, &split) in Split::ALL.iter().enumerate() {
            spoof_mass[si] += counts[si];
            for _ in 0..counts[si] {
                let seed = seeds::derive_indexed(corpus_seed, &format!("utt.A{api}"), k as u64);
                let mut rng = seeds::rng(seeds::derive_indexed(
                    corpus_seed,
                    &format!("dur.A{api}"),
                    k as u64,
                ));
                let ms = rng.gen_range(2000..=6000u64);
                records.push(ManifestRecord {
                    utt_id: format!("A{api}-u{k:04}"),
                    seed,
                    label: TrialLabel::Spoof,
                    api_id: format!("A{api}"),
                    split,
                    duration_s: ms as f64 / 1000.0,
                });
                k += 1;
            }
        }
    }

    let weights: Vec<f64> = spoof_mass.iter().map(|&m| m as f64).collect();
    let bona_counts = largest_remainder(n_bonafide, &weights);
    let mut k = 0;
    for (si, &split) in Split::ALL.iter().enumerate() {
        for _ in 0..bona_counts[si] {
            let seed = seeds::derive_indexed(corpus_seed, "utt.bonafide", k as u64);
            let mut rng =
                seeds::rng(seeds::derive_indexed(corpus_seed, "dur.bonafide", k as u64));
            let ms = rng.gen_range(2000..=6000u64);
            records.push(ManifestRecord {
                utt_id: format!("bona-u{k:04}"),
                seed,
                label: TrialLabel::Bonafide,
                api_id: "bonafide".into(),
                split,
                duration_s: ms as f64 / 1000.0,
            });
            k += 1;
        }
    }
    Ok(Manifest { corpus_seed, records })
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Sorted distinct spoof API ids present in the given split.
    pub fn apis_in_split(&self, split: Split) -> Vec<String> {
        let mut v: Vec<String> = self
            .split(split)
            .filter(|r| r.label == TrialLabel::Spoof)
            .map(|r| r.api_id.clone())
            .collect();
        v.sort_by_key(|id| id[1..].parse::<u64>().unwrap_or(u64::MAX));
        v.dedup();
        v
    }

    /// The generator spec for a record, rebuilt from the corpus seed.
    pub fn spec_for(&self, record: &ManifestRecord) -> Result<ApiGenSpec> {
        if record.label == TrialLabel::Bonafide {
            Ok(ApiGenSpec::bonafide(self.corpus_seed))
        } else {
            let idx: usize = record.api_id[1..]
                .parse()
                .map_err(|_| Error::invalid("Manifest", format!("bad api id {}", record.api_id)))?;
            ApiGenSpec::spoof(self.corpus_seed, idx)
        }
    }

    pub fn render(&self, record: &ManifestRecord, sample_rate: u32) -> Result<Waveform> {
        generate_utterance(&self.spec_for(record)?, record.seed, record.duration_s, sample_rate)
    }
}

/// Write the manifest as tab-separated text with identifying headers.
pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("#corpus_seed={}\n", m.corpus_seed));
    out.push_str(&format!("#generator_version={GENERATOR_VERSION}\n"));
    out.push_str("#columns=utt_id\tseed\tlabel\tapi_id\tsplit\tduration_s\n");
    for r in &m.records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.utt_id,
            r.seed,
            r.label.as_str(),
            r.api_id,
            r.split,
            r.duration_s
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let body = fs::read_to_string(path)?;
    let ferr = |msg: String| Error::format(path.display().to_string(), msg);
    let mut corpus_seed: Option<u64> = None;
    let mut version: Option<u32> = None;
    let mut records = Vec::new();
    for (ln, raw) in body.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.strip_prefix("corpus_seed=") {
                corpus_seed =
                    Some(v.parse().map_err(|_| ferr(format!("bad corpus_seed {v:?}")))?);
            } else if let Some(v) = rest.strip_prefix("generator_version=") {
                version = Some(v.parse().map_err(|_| ferr(format!("bad version {v:?}")))?);
            }
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 6 {
            return Err(ferr(format!("line {}: expected 6 fields", ln + 1)));
        }
        records.push(ManifestRecord {
            utt_id: parts[0].to_string(),
            seed: parts[1].parse().map_err(|_| ferr(format!("line {}: bad seed", ln + 1)))?,
            label: TrialLabel::parse(parts[2])?,
            api_id: parts[3].to_string(),
            split: Split::parse(parts[4])?,
            duration_s: parts[5]
                .parse()
                .map_err(|_| ferr(format!("line {}: bad duration", ln + 1)))?,
        });
    }
    let corpus_seed = corpus_seed.ok_or_else(|| ferr("missing #corpus_seed header".into()))?;
    match version {
        Some(GENERATOR_VERSION) => {}
        Some(v) => {
            return Err(ferr(format!(
                "manifest was built by generator v{v}, this binary is v{GENERATOR_VERSION}"
            )))
        }
        None => return Err(ferr("missing #generator_version header".into())),
    }
    Ok(Manifest { corpus_seed, records })
}
