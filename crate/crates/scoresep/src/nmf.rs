//! Score-informed NMF baseline: KL multiplicative updates with weak-label
//! zero constraints frozen into H.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::score::LabelMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIVISION_EPS: f64 = 1e-12;
pub const DEFAULT_ITERS: usize = 1000;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct NmfModel {
    /// M x K spectral templates.
    pub w: Matrix,
    /// K x N activations; exactly zero wherever the mask is zero.
    pub h: Matrix,
    /// K x N binary permission mask (the label matrix).
    pub zero_mask: Matrix,
}

/// W, H uniform in (0.1, 1.0), H masked by the labels. Deterministic in seed.
pub fn nmf_init(v: &Matrix, labels: &LabelMatrix, seed: u64) -> Result<NmfModel> {
    if v.data().iter().any(|&x| x < 0.0) {
        return Err(Error::NegativeValue("nmf_init: V".into()));
    }
    let (m, n) = v.shape();
    let k = labels.units();
    if labels.frames() != n {
        return Err(Error::ShapeMismatch {
            context: "nmf_init".into(),
            expected: format!("{n} label frames"),
            got: format!("{}", labels.frames()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::from_fn(m, k, |_, _| rng.gen_range(0.1..1.0));
    let h_raw = Matrix::from_fn(k, n, |_, _| rng.gen_range(0.1..1.0));
    let h = h_raw.zip_map(&labels.matrix, |h, l| h * l)?;
    Ok(NmfModel {
        w,
        h,
        zero_mask: labels.matrix.clone(),
    })
}

/// One pass of the standard KL multiplicative updates (H first, then W).
/// Zeros in H are preserved exactly by the multiplicative form.
pub fn nmf_update(model: &mut NmfModel, v: &Matrix) -> Result<()> {
    let eps = DIVISION_EPS;

    // H <- H ⊙ (Wᵀ (V ⊘ (WH+eps))) ⊘ (Wᵀ1 + eps)
    let wh = model.w.matmul(&model.h)?;
    let ratio = v.zip_map(&wh, |vv, p| vv / (p + eps))?;
    let wt = model.w.transpose();
    let numer = wt.matmul(&ratio)?;
    let col_sums: Vec<f64> = (0..model.w.cols())
        .map(|k| (0..model.w.rows()).map(|m| model.w.get(m, k)).sum())
        .collect();
    let mut h_new = model.h.clone();
    for k in 0..h_new.rows() {
        let denom = col_sums[k] + eps;
        for n in 0..h_new.cols() {
            h_new.set(k, n, h_new.get(k, n) * numer.get(k, n) / denom);
        }
    }
    model.h = h_new;

    // W <- W ⊙ ((V ⊘ (WH+eps)) Hᵀ) ⊘ (1Hᵀ + eps)
    let wh2 = model.w.matmul(&model.h)?;
    let ratio2 = v.zip_map(&wh2, |vv, p| vv / (p + eps))?;
    let numer_w = ratio2.matmul(&model.h.transpose())?;
    let row_sums: Vec<f64> = (0..model.h.rows())
        .map(|k| model.h.row(k).iter().sum())
        .collect();
    let mut w_new = model.w.clone();
    for m in 0..w_new.rows() {
        for k in 0..w_new.cols() {
            let denom = row_sums[k] + eps;
            w_new.set(m, k, w_new.get(m, k) * numer_w.get(m, k) / denom);
        }
    }
    model.w = w_new;
    Ok(())
}

/// Generalized KL divergence d(V, WH) with the same smoothing as the
/// autoencoder objective.
pub fn nmf_divergence(model: &NmfModel, v: &Matrix, eps: f64) -> Result<f64> {
    let wh = model.w.matmul(&model.h)?;
    let mut total = 0.0;
    for (&a, &b) in v.data().iter().zip(wh.data()) {
        total += a * ((a + eps) / (b + eps)).ln() - a + b;
    }
    Ok(total)
}

/// Run updates until the iteration cap or relative divergence improvement
/// drops below tolerance. Returns the per-iteration divergence trace.
pub fn nmf_train(
    model: &mut NmfModel,
    v: &Matrix,
    max_iters: usize,
    tolerance: f64,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(max_iters);
    let mut prev = nmf_divergence(model, v, DIVISION_EPS)?;
    for _ in 0..max_iters {
        nmf_update(model, v)?;
        let d = nmf_divergence(model, v, DIVISION_EPS)?;
        trace.push(d);
        let rel = (prev - d) / prev.abs().max(1e-300);
        if rel >= 0.0 && rel < tolerance {
            break;
        }
        prev = d;
    }
    Ok(trace)
}

/// Model magnitude W (H ⊙ restriction) for one note group.
pub fn nmf_group_magnitude(model: &NmfModel, restriction: &Matrix) -> Result<Matrix> {
    let h_restricted = model.h.zip_map(restriction, |h, l| h * l)?;
    model.w.matmul(&h_restricted)
}

/// Soft-mask separation with a trained NMF model: per-group magnitudes
/// W(H ⊙ restriction), sum-of-groups denominator, istft per stem. The
/// residual group (free units) is appended.
pub fn nmf_separate(
    model: &NmfModel,
    labels: &LabelMatrix,
    notes: &[crate::score::NoteEvent],
    x: &crate::signal::ComplexSpectrogram,
    request: &crate::separation::SeparationRequest,
) -> Result<Vec<crate::separation::Stem>> {
    let mut mags = Vec::new();
    for (name, members) in &request.groups {
        let restricted = crate::score::restrict_labels(
            labels,
            members,
            notes,
            request.onset_tolerance,
            request.sustain_tolerance,
        )?;
        mags.push((name.clone(), nmf_group_magnitude(model, &restricted.matrix)?));
    }
    let residual = crate::score::residual_labels(labels);
    mags.push((
        crate::separation::RESIDUAL_NAME.to_string(),
        nmf_group_magnitude(model, &residual.matrix)?,
    ));
    crate::separation::soft_mask_stems(&mags, x, None, request.eps_mask)
}
