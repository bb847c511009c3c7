//! Soft-mask separation: group-restricted forward passes through a trained
//! model, Wiener-style masking of the complex STFT and stem synthesis.

use crate::autoencoder::{self, AutoencoderModel};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::score::{self, LabelMatrix, NoteEvent};
use crate::signal::{istft, AudioClip, ComplexSpectrogram};

pub const DEFAULT_EPS_MASK: f64 = 1e-10;
pub const RESIDUAL_NAME: &str = "residual";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskDenominator {
    /// Sum of all group outputs; gives a partition of unity.
    SumOfGroups,
    /// The full-label forward output as the denominator.
    FullLabelOutput,
}

#[derive(Debug, Clone)]
pub struct SeparationRequest {
    /// Named, pairwise-disjoint note groups whose union is the full list.
    pub groups: Vec<(String, Vec<NoteEvent>)>,
    pub mask_denominator: MaskDenominator,
    pub eps_mask: f64,
    pub onset_tolerance: f64,
    pub sustain_tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub name: String,
    pub clip: AudioClip,
    pub masked_magnitude: Matrix,
}

/// Soft-mask the complex spectrogram by each group's model magnitude and
/// synthesize stems. `denominator` defaults to the sum of the group
/// magnitudes when `None`.
pub fn soft_mask_stems(
    group_magnitudes: &[(String, Matrix)],
    x: &ComplexSpectrogram,
    denominator: Option<&Matrix>,
    eps_mask: f64,
) -> Result<Vec<Stem>> {
    let shape = (x.bins(), x.frames());
    for (name, mag) in group_magnitudes {
        if mag.shape() != shape {
            return Err(Error::ShapeMismatch {
                context: format!("soft_mask_stems group '{name}'"),
                expected: format!("{:?}", shape),
                got: format!("{:?}", mag.shape()),
            });
        }
    }
    let denom = match denominator {
        Some(d) => d.clone(),
        None => {
            let mut sum = Matrix::zeros(shape.0, shape.1);
            for (_, mag) in group_magnitudes {
                sum = sum.zip_map(mag, |a, b| a + b)?;
            }
            sum
        }
    };
    let mut stems = Vec::with_capacity(group_magnitudes.len());
    for (name, mag) in group_magnitudes {
        let mask = mag.zip_map(&denom, |g, d| g / (d + eps_mask))?;
        let masked_magnitude = mask.zip_map(&crate::signal::magnitude(x), |m, v| m * v)?;
        let spec = ComplexSpectrogram {
            re: x.re.zip_map(&mask, |v, m| v * m)?,
            im: x.im.zip_map(&mask, |v, m| v * m)?,
            window_len: x.window_len,
            hop: x.hop,
            sample_rate: x.sample_rate,
            original_length: x.original_length,
        };
        stems.push(Stem {
            name: name.clone(),
            clip: istft(&spec)?,
            masked_magnitude,
        });
    }
    Ok(stems)
}

/// Model magnitude for each requested group plus the residual (free units).
pub fn group_magnitudes(
    model: &AutoencoderModel,
    v: &Matrix,
    labels: &LabelMatrix,
    notes: &[NoteEvent],
    request: &SeparationRequest,
) -> Result<Vec<(String, Matrix)>> {
    if model.bins() != v.rows() {
        return Err(Error::ShapeMismatch {
            context: "separate: model bins vs spectrogram".into(),
            expected: format!("{} bins", model.bins()),
            got: format!("{}", v.rows()),
        });
    }
    if model.k != labels.units() {
        return Err(Error::ShapeMismatch {
            context: "separate: model K vs label matrix".into(),
            expected: format!("K = {}", model.k),
            got: format!("{}", labels.units()),
        });
    }
    // An all-zero restriction contributes no representation activity at all;
    // its stem is silent rather than the decoder's bias-path output.
    let masked_or_zero = |restriction: &Matrix| -> Result<Matrix> {
        if restriction.max_abs() == 0.0 {
            Ok(Matrix::zeros(v.rows(), v.cols()))
        } else {
            autoencoder::reconstruct_masked(model, v, restriction)
        }
    };
    let mut out = Vec::new();
    for (name, members) in &request.groups {
        let restricted = score::restrict_labels(
            labels,
            members,
            notes,
            request.onset_tolerance,
            request.sustain_tolerance,
        )?;
        out.push((name.clone(), masked_or_zero(&restricted.matrix)?));
    }
    let residual = score::residual_labels(labels);
    out.push((RESIDUAL_NAME.to_string(), masked_or_zero(&residual.matrix)?));
    Ok(out)
}

/// End-to-end separation with a trained autoencoder.
pub fn separate(
    model: &AutoencoderModel,
    v: &Matrix,
    x: &ComplexSpectrogram,
    labels: &LabelMatrix,
    notes: &[NoteEvent],
    request: &SeparationRequest,
) -> Result<Vec<Stem>> {
    let mags = group_magnitudes(model, v, labels, notes, request)?;
    let denominator = match request.mask_denominator {
        MaskDenominator::SumOfGroups => None,
        MaskDenominator::FullLabelOutput => {
            Some(autoencoder::reconstruct_masked(model, v, &labels.matrix)?)
        }
    };
    soft_mask_stems(&mags, x, denominator.as_ref(), request.eps_mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::{init_model, train, TrainConfig};
    use crate::score::{build_assignment, build_label_matrix, group_by_tag};
    use crate::signal::{magnitude, snr_db, stft};
    

    fn note(pitch: u8, on: f64, off: f64, tag: &str) -> NoteEvent {
        NoteEvent {
            instrument_id: 0,
            midi_pitch: pitch,
            onset_time: on,
            offset_time: off,
            group_tag: Some(tag.into()),
        }
    }

    fn toy_setup() -> (Vec<NoteEvent>, LabelMatrix, Matrix, ComplexSpectrogram) {
        let sr = 8000u32;
        let notes = vec![note(48, 0.2, 1.0, "left"), note(72, 0.6, 1.4, "right")];
        let mut samples: Vec<f64> = (0..(sr as usize * 3 / 2))
            .map(|i| {
                let t = i as f64 / sr as f64;
                0.3 * (2.0 * std::f64::consts::PI * 130.81 * t).sin()
                    + 0.3 * (2.0 * std::f64::consts::PI * 523.25 * t).sin()
            })
            .collect();
        // 50 ms fades keep the edge frames free of switch-on transients.
        let fade = sr as usize / 20;
        let len = samples.len();
        for i in 0..fade {
            let g = i as f64 / fade as f64;
            samples[i] *= g;
            samples[len - 1 - i] *= g;
        }
        let clip = AudioClip::new(samples, sr);
        let x = stft(&clip, 512, 128).unwrap();
        let v = magnitude(&x);
        let assignment = build_assignment(&notes, 2, 1).unwrap();
        let labels =
            build_label_matrix(&notes, &assignment, x.frames(), x.hop_seconds(), 0.2, 0.1).unwrap();
        (notes, labels, v, x)
    }

    fn default_request(notes: &[NoteEvent]) -> SeparationRequest {
        SeparationRequest {
            groups: group_by_tag(notes),
            mask_denominator: MaskDenominator::SumOfGroups,
            eps_mask: DEFAULT_EPS_MASK,
            onset_tolerance: 0.2,
            sustain_tolerance: 0.1,
        }
    }

    #[test]
    fn stems_sum_to_mixture_with_sum_denominator() {
        let (notes, labels, v, x) = toy_setup();
        // Non-negative single-layer decoder with revived units keeps the
        // sum-of-groups denominator well above eps on the mixture support.
        let mut model = init_model(
            v.rows(),
            labels.units(),
            0,
            &[16],
            &[],
            true,
            crate::autoencoder::DEFAULT_TRAINING_EPS_KL,
            4,
        )
        .unwrap();
        crate::autoencoder::revive_dead_units(&mut model, &v, 0.1).unwrap();
        let config = TrainConfig {
            stage1_iters: 200,
            stage2_iters: 50,
            step_size: 5e-3,
            ..Default::default()
        };
        train(&mut model, &v, &labels.matrix, &config).unwrap();
        let stems = separate(&model, &v, &x, &labels, &notes, &default_request(&notes)).unwrap();
        assert_eq!(stems.len(), 3); // left, right, residual
        let mix = istft(&x).unwrap();
        let mut sum = vec![0.0; mix.samples.len()];
        for stem in &stems {
            for (s, a) in sum.iter_mut().zip(&stem.clip.samples) {
                *s += a;
            }
        }
        let snr = snr_db(&mix.samples, &sum);
        assert!(snr >= 60.0, "partition-of-unity SNR {snr}");
    }

    #[test]
    fn masks_bounded_with_sum_denominator() {
        let (notes, labels, v, _x) = toy_setup();
        let model = init_model(v.rows(), labels.units(), 0, &[8], &[8], false, 1e-9, 5).unwrap();
        let request = default_request(&notes);
        let mags = group_magnitudes(&model, &v, &labels, &notes, &request).unwrap();
        let mut denom = Matrix::zeros(v.rows(), v.cols());
        for (_, m) in &mags {
            denom = denom.zip_map(m, |a, b| a + b).unwrap();
        }
        let mut mask_sum = Matrix::zeros(v.rows(), v.cols());
        for (_, m) in &mags {
            let mask = m.zip_map(&denom, |g, d| g / (d + request.eps_mask)).unwrap();
            for &val in mask.data() {
                assert!((0.0..=1.0).contains(&val));
            }
            mask_sum = mask_sum.zip_map(&mask, |a, b| a + b).unwrap();
        }
        for (i, &s) in mask_sum.data().iter().enumerate() {
            assert!(s <= 1.0 + 1e-12);
            if denom.data()[i] > request.eps_mask * 10.0 {
                assert!(s > 1.0 - 1e-6, "mask sum {s} where energy is nonzero");
            }
        }
    }

    #[test]
    fn empty_group_stem_is_silent() {
        let (notes, labels, v, x) = toy_setup();
        let model = init_model(v.rows(), labels.units(), 0, &[8], &[8], false, 1e-9, 6).unwrap();
        let mut request = default_request(&notes);
        request.groups.push(("empty".into(), vec![]));
        let stems = separate(&model, &v, &x, &labels, &notes, &request).unwrap();
        let empty = stems.iter().find(|s| s.name == "empty").unwrap();
        let peak = empty.clip.samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
        // Mask is 0/(D+eps) = 0 before synthesis.
        assert!(peak < 1e-12, "empty-group peak {peak}");
    }

    #[test]
    fn separate_is_deterministic() {
        let (notes, labels, v, x) = toy_setup();
        let model = init_model(v.rows(), labels.units(), 0, &[8], &[8], false, 1e-9, 7).unwrap();
        let request = default_request(&notes);
        let a = separate(&model, &v, &x, &labels, &notes, &request).unwrap();
        let b = separate(&model, &v, &x, &labels, &notes, &request).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.clip.samples, sb.clip.samples);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (notes, labels, v, x) = toy_setup();
        let wrong_k = init_model(v.rows(), labels.units() + 2, 0, &[8], &[8], false, 1e-9, 8).unwrap();
        let err = separate(&wrong_k, &v, &x, &labels, &notes, &default_request(&notes)).unwrap_err();
        assert!(err.to_string().contains("K ="), "{err}");
        let wrong_m = init_model(v.rows() + 1, labels.units(), 0, &[8], &[8], false, 1e-9, 9).unwrap();
        assert!(separate(&wrong_m, &v, &x, &labels, &notes, &default_request(&notes)).is_err());
    }

    #[test]
    fn full_label_denominator_runs() {
        let (notes, labels, v, x) = toy_setup();
        let model = init_model(v.rows(), labels.units(), 0, &[8], &[8], false, 1e-9, 10).unwrap();
        let mut request = default_request(&notes);
        request.mask_denominator = MaskDenominator::FullLabelOutput;
        let stems = separate(&model, &v, &x, &labels, &notes, &request).unwrap();
        assert_eq!(stems.len(), 3);
        for stem in &stems {
            assert!(stem.clip.samples.iter().all(|s| s.is_finite()));
        }
    }
}
