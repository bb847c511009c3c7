//! Metrics (SDR, NSDR), the deterministic additive synthesizer used for
//! ground truth, and the experiment harness comparing methods A-D.

use crate::autoencoder::{self, TrainConfig};
use crate::error::{Error, Result};
use crate::nmf;
use crate::numerics::Matrix;
use crate::score::{self, NoteEvent};
use crate::separation::{self, MaskDenominator, SeparationRequest, Stem};
use crate::signal::{magnitude, stft, AudioClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SDR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub partials: usize,
    /// Per-partial amplitude rolloff exponent: partial p gets p^(-decay).
    pub partial_decay: f64,
    pub attack: f64,
    pub decay: f64,
    pub sustain_level: f64,
    pub release: f64,
    /// Per-instrument timbre seed.
    pub timbre_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate: 44_100,
            partials: 8,
            partial_decay: 1.0,
            attack: 0.01,
            decay: 0.1,
            sustain_level: 0.7,
            release: 0.1,
            timbre_seed: 0,
        }
    }
}

fn midi_to_hz(pitch: u8) -> f64 {
    440.0 * 2.0f64.powf((pitch as f64 - 69.0) / 12.0)
}

fn adsr(t: f64, note_len: f64, config: &SynthConfig) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let held = t.min(note_len);
    let level = if held < config.attack {
        held / config.attack
    } else if held < config.attack + config.decay {
        let x = (held - config.attack) / config.decay;
        1.0 + x * (config.sustain_level - 1.0)
    } else {
        config.sustain_level
    };
    if t <= note_len {
        level
    } else if t < note_len + config.release {
        level * (1.0 - (t - note_len) / config.release)
    } else {
        0.0
    }
}

/// Per-instrument partial phases and amplitude jitters, deterministic in the
/// timbre seed.
fn instrument_timbre(config: &SynthConfig, instrument_id: u32) -> Vec<(f64, f64)> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(config.timbre_seed.wrapping_mul(0x9E3779B97F4A7C15) ^ instrument_id as u64);
    (0..config.partials)
        .map(|_| {
            let amp = rng.gen_range(0.7..1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (amp, phase)
        })
        .collect()
}

fn render_note(buffer: &mut [f64], note: &NoteEvent, config: &SynthConfig) {
    let sr = config.sample_rate as f64;
    let f0 = midi_to_hz(note.midi_pitch);
    let note_len = note.offset_time - note.onset_time;
    let timbre = instrument_timbre(config, note.instrument_id);
    let start = (note.onset_time * sr) as usize;
    let end = (((note.offset_time + config.release) * sr) as usize).min(buffer.len());
    for i in start..end {
        let t = i as f64 / sr - note.onset_time;
        let env = adsr(t, note_len, config);
        if env == 0.0 {
            continue;
        }
        let mut sample = 0.0;
        for (p, &(amp_jitter, phase)) in timbre.iter().enumerate() {
            let partial = (p + 1) as f64;
            let freq = partial * f0;
            if freq >= sr / 2.0 {
                break;
            }
            let amp = amp_jitter * partial.powf(-config.partial_decay);
            sample += amp * (std::f64::consts::TAU * freq * (i as f64 / sr) + phase).sin();
        }
        buffer[i] += 0.2 * env * sample;
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub mixture: AudioClip,
    /// Per-group ground-truth stems, in the given group order.
    pub stems: Vec<(String, AudioClip)>,
}

/// Render each group's notes additively, then form the mixture as the exact
/// samplewise sum of the (jointly normalized) stems.
pub fn synthesize(
    notes: &[NoteEvent],
    groups: &[(String, Vec<NoteEvent>)],
    config: &SynthConfig,
) -> Result<SynthOutput> {
    let sr = config.sample_rate as f64;
    let end_time = notes
        .iter()
        .map(|n| n.offset_time + config.release)
        .fold(0.0f64, f64::max);
    let len = ((end_time + 0.05) * sr).ceil() as usize;
    let len = len.max(1);

    let mut stems: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, members) in groups {
        let mut buf = vec![0.0f64; len];
        for note in members {
            render_note(&mut buf, note, config);
        }
        stems.push((name.clone(), buf));
    }

    let mut raw_mix = vec![0.0f64; len];
    for (_, buf) in &stems {
        for (m, s) in raw_mix.iter_mut().zip(buf) {
            *m += s;
        }
    }
    let peak = raw_mix.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };

    // Scale stems first, then re-sum: the mixture is exactly the sum of the
    // scaled stems.
    for (_, buf) in &mut stems {
        for s in buf.iter_mut() {
            *s *= gain;
        }
    }
    let mut mixture = vec![0.0f64; len];
    for (_, buf) in &stems {
        for (m, s) in mixture.iter_mut().zip(buf) {
            *m += s;
        }
    }
    Ok(SynthOutput {
        mixture: AudioClip::new(mixture, config.sample_rate),
        stems: stems
            .into_iter()
            .map(|(n, s)| (n, AudioClip::new(s, config.sample_rate)))
            .collect(),
    })
}

/// Projection-based SDR: project the estimate onto the reference and compare
/// signal and error energies. Capped at +100 dB.
pub fn sdr(reference: &AudioClip, estimate: &AudioClip) -> Result<f64> {
    if reference.samples.len() != estimate.samples.len() {
        return Err(Error::ShapeMismatch {
            context: "sdr".into(),
            expected: format!("{} samples", reference.samples.len()),
            got: format!("{}", estimate.samples.len()),
        });
    }
    let ref_energy: f64 = reference.samples.iter().map(|x| x * x).sum();
    if ref_energy == 0.0 {
        return Err(Error::InvalidArgument("sdr: reference is identically zero".into()));
    }
    let dot: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(r, e)| r * e)
        .sum();
    let scale = dot / ref_energy;
    let target_energy = scale * scale * ref_energy;
    let error_energy: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(r, e)| {
            let err = e - scale * r;
            err * err
        })
        .sum();
    if error_energy <= target_energy * 1e-10 || error_energy == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / error_energy).log10()).min(SDR_CAP_DB))
}

/// SDR gain over using the unprocessed mixture as the estimate.
pub fn nsdr(reference: &AudioClip, estimate: &AudioClip, mixture: &AudioClip) -> Result<f64> {
    Ok(sdr(reference, estimate)? - sdr(reference, mixture)?)
}

/// Ideal-ratio-mask stems from the ground truth, the quality ceiling for the
/// harness.
pub fn oracle_mask_stems(
    ground_truth: &[(String, AudioClip)],
    x: &crate::signal::ComplexSpectrogram,
    eps_mask: f64,
) -> Result<Vec<Stem>> {
    let mags: Vec<(String, crate::numerics::Matrix)> = ground_truth
        .iter()
        .map(|(name, clip)| {
            let spec = stft(clip, x.window_len, x.hop)?;
            Ok((name.clone(), magnitude(&spec)))
        })
        .collect::<Result<_>>()?;
    separation::soft_mask_stems(&mags, x, None, eps_mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Zero-constrained NMF baseline.
    A,
    /// Structured-dropout autoencoder.
    B,
    /// B plus non-negative decoder weights.
    C,
    /// C plus multi-frame input.
    D,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Method::A),
            "B" => Ok(Method::B),
            "C" => Ok(Method::C),
            "D" => Ok(Method::D),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }

    pub fn nonneg_decoder(self) -> bool {
        matches!(self, Method::C | Method::D)
    }

    pub fn context(self, multi_frame_context: usize) -> usize {
        if self == Method::D {
            multi_frame_context
        } else {
            0
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: String,
    pub sdr_db: f64,
    pub nsdr_db: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub piece: String,
    pub method: String,
    pub failed: bool,
    pub groups: Vec<GroupScore>,
}

impl EvalReport {
    pub fn mean_nsdr(&self) -> f64 {
        if self.groups.is_empty() {
            return f64::NAN;
        }
        self.groups.iter().map(|g| g.nsdr_db).sum::<f64>() / self.groups.len() as f64
    }
}

/// Tunables for one experiment run; defaults are desk-scale. Omitted keys
/// in a config file take their defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub window_len: usize,
    pub hop: usize,
    pub units_per_class: usize,
    pub free_units: usize,
    pub onset_tolerance: f64,
    pub sustain_tolerance: f64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub multi_frame_context: usize,
    pub lambda: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub step_size: f64,
    /// KL smoothing for training; well above the numerical floor so the
    /// near-silent bins cannot dominate the gradient (see module notes).
    pub eps_kl: f64,
    pub nmf_iters: usize,
    /// Autoencoder trainings per run; the group magnitude estimates are
    /// summed over restarts before masking. Individual runs land in local
    /// minima that favour one hand; the restarts err on different hands, so
    /// the pooled estimate is markedly more even than any single model.
    pub restarts: usize,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            window_len: 1024,
            hop: 256,
            units_per_class: 2,
            free_units: 2,
            // The bundled scores are exact, so the alignment windows are
            // tight; wide windows leave the labels nearly uninformative at
            // these note durations.
            onset_tolerance: 0.1,
            sustain_tolerance: 0.05,
            encoder_hidden: vec![64, 64],
            // Single relu output layer: unit contributions stay additive,
            // so group-restricted forwards carry no shared hidden path.
            decoder_hidden: vec![],
            multi_frame_context: 2,
            lambda: autoencoder::DEFAULT_LAMBDA,
            stage1_iters: 3000,
            stage2_iters: 200,
            step_size: 5e-3,
            eps_kl: autoencoder::DEFAULT_TRAINING_EPS_KL,
            nmf_iters: 400,
            restarts: 5,
            seed: 42,
            synth: SynthConfig {
                sample_rate: 8000,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Piece {
    pub name: String,
    pub notes: Vec<NoteEvent>,
}

/// Bundled two-voice toy piece, deterministic in its index (1..=3). Left
/// hand uses pitches 40..=59, right hand 60..=84.
pub fn toy_piece(index: usize) -> Vec<NoteEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + index as u64);
    let mut notes = Vec::new();
    let n_per_hand = 6 + (index % 3) * 2;
    for hand in 0..2u32 {
        let (lo, hi, tag) = if hand == 0 {
            (40u8, 59u8, "left")
        } else {
            (60u8, 84u8, "right")
        };
        let mut t = 0.25 * hand as f64;
        for _ in 0..n_per_hand {
            let pitch = rng.gen_range(lo..=hi);
            let dur: f64 = rng.gen_range(0.5..1.4);
            let onset = (t * 8.0).round() / 8.0;
            notes.push(NoteEvent {
                instrument_id: 0,
                midi_pitch: pitch,
                onset_time: onset,
                offset_time: onset + (dur * 8.0).round() / 8.0,
                group_tag: Some(tag.into()),
            });
            t = onset + rng.gen_range(0.6..1.3);
        }
    }
    notes.sort_by(|a, b| {
        a.onset_time
            .partial_cmp(&b.onset_time)
            .unwrap()
            .then(a.class().cmp(&b.class()))
    });
    notes
}

fn train_config(config: &ExperimentConfig, method: Method) -> TrainConfig {
    TrainConfig {
        stage1_iters: config.stage1_iters,
        stage2_iters: config.stage2_iters,
        lambda: config.lambda,
        step_size: config.step_size,
        stage2_step_size: Some(config.step_size / 10.0),
        loss_tolerance: autoencoder::DEFAULT_LOSS_TOLERANCE,
        seed: config.seed ^ (method as u64 + 1),
    }
}

fn score_stems(
    piece: &str,
    method: &str,
    stems: &[Stem],
    ground_truth: &[(String, AudioClip)],
    mixture: &AudioClip,
) -> Result<EvalReport> {
    let mut groups = Vec::new();
    for (name, reference) in ground_truth {
        let stem = stems
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing stem '{name}'")))?;
        let sdr_db = sdr(reference, &stem.clip)?;
        let nsdr_db = sdr_db - sdr(reference, mixture)?;
        groups.push(GroupScore {
            group: name.clone(),
            sdr_db,
            nsdr_db,
        });
    }
    Ok(EvalReport {
        piece: piece.into(),
        method: method.into(),
        failed: false,
        groups,
    })
}

/// Run one piece through one method: synthesize, build labels, train,
/// separate, score.
pub fn run_method(piece: &Piece, method: Method, config: &ExperimentConfig) -> Result<EvalReport> {
    let groups = score::group_by_tag(&piece.notes);
    let synth_out = synthesize(&piece.notes, &groups, &config.synth)?;
    let x = stft(&synth_out.mixture, config.window_len, config.hop)?;
    let v = magnitude(&x);
    let assignment = score::build_assignment(&piece.notes, config.units_per_class, config.free_units)?;
    let labels = score::build_label_matrix(
        &piece.notes,
        &assignment,
        x.frames(),
        x.hop_seconds(),
        config.onset_tolerance,
        config.sustain_tolerance,
    )?;
    let request = SeparationRequest {
        groups: groups.clone(),
        mask_denominator: MaskDenominator::SumOfGroups,
        eps_mask: separation::DEFAULT_EPS_MASK,
        onset_tolerance: config.onset_tolerance,
        sustain_tolerance: config.sustain_tolerance,
    };

    let stems = match method {
        Method::A => {
            let mut model = nmf::nmf_init(&v, &labels, config.seed)?;
            nmf::nmf_train(&mut model, &v, config.nmf_iters, nmf::DEFAULT_TOLERANCE)?;
            nmf::nmf_separate(&model, &labels, &piece.notes, &x, &request)?
        }
        _ => {
            let base = train_config(config, method);
            let restarts = config.restarts.max(1);
            let mut pooled: Vec<(String, Matrix)> = Vec::new();
            for restart in 0..restarts as u64 {
                let mut tc = base.clone();
                tc.seed = base.seed.wrapping_add(restart.wrapping_mul(0x9E3779B97F4A7C15));
                let mut model = autoencoder::init_model(
                    v.rows(),
                    labels.units(),
                    method.context(config.multi_frame_context),
                    &config.encoder_hidden,
                    &config.decoder_hidden,
                    method.nonneg_decoder(),
                    config.eps_kl,
                    tc.seed,
                )?;
                autoencoder::revive_dead_units(&mut model, &v, 0.1)?;
                autoencoder::train(&mut model, &v, &labels.matrix, &tc)?;
                let mags =
                    separation::group_magnitudes(&model, &v, &labels, &piece.notes, &request)?;
                if pooled.is_empty() {
                    pooled = mags;
                } else {
                    for ((_, acc), (_, m)) in pooled.iter_mut().zip(&mags) {
                        *acc = acc.zip_map(m, |a, b| a + b)?;
                    }
                }
            }
            separation::soft_mask_stems(&pooled, &x, None, request.eps_mask)?
        }
    };
    score_stems(&piece.name, &method.to_string(), &stems, &synth_out.stems, &synth_out.mixture)
}

/// Run every (piece, method) pair. A training divergence marks the report
/// failed and the harness continues.
pub fn run_experiment(
    pieces: &[Piece],
    methods: &[Method],
    config: &ExperimentConfig,
) -> Vec<EvalReport> {
    let mut reports = Vec::new();
    for piece in pieces {
        for &method in methods {
            match run_method(piece, method, config) {
                Ok(report) => reports.push(report),
                Err(Error::TrainingDiverged { .. }) => reports.push(EvalReport {
                    piece: piece.name.clone(),
                    method: method.to_string(),
                    failed: true,
                    groups: vec![],
                }),
                Err(e) => reports.push(EvalReport {
                    piece: piece.name.clone(),
                    method: format!("{method} ({e})"),
                    failed: true,
                    groups: vec![],
                }),
            }
        }
    }
    reports
}

/// Reports as CSV: piece,method,group,sdr_db,nsdr_db (failed runs get NaN).
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("piece,method,group,sdr_db,nsdr_db\n");
    for r in reports {
        if r.failed {
            out.push_str(&format!("{},{},FAILED,NaN,NaN\n", r.piece, r.method));
            continue;
        }
        for g in &r.groups {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.piece, r.method, g.group, g.sdr_db, g.nsdr_db
            ));
        }
    }
    out
}

/// Human-readable results table.
pub fn reports_to_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<8} {:<10} {:>10} {:>10}\n",
        "piece", "method", "group", "SDR dB", "NSDR dB"
    ));
    for r in reports {
        if r.failed {
            out.push_str(&format!("{:<16} {:<8} FAILED\n", r.piece, r.method));
            continue;
        }
        for g in &r.groups {
            out.push_str(&format!(
                "{:<16} {:<8} {:<10} {:>10.2} {:>10.2}\n",
                r.piece, r.method, g.group, g.sdr_db, g.nsdr_db
            ));
        }
    }
    out
}
