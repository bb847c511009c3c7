//! The structured-dropout autoencoder: encoder/decoder networks, the three
//! training objectives, manual backpropagation and the two-stage schedule.

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS_KL: f64 = 1e-9;
/// KL smoothing used when training on magnitude spectrograms. Much larger
/// than the numerical floor: with a tiny ε the log-ratio gradient from the
/// vast population of near-silent bins overwhelms the pull of the loud
/// bins, and the relu layers (subgradient 0 at 0) die wholesale. An ε near
/// the mean magnitude caps that pressure at ln((r+ε)/ε).
pub const DEFAULT_TRAINING_EPS_KL: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 10.0;
/// 1/10th of the ADAM default step size.
pub const DEFAULT_STEP_SIZE: f64 = 1e-4;
pub const DEFAULT_STAGE1_ITERS: usize = 3000;
pub const DEFAULT_STAGE2_ITERS: usize = 1000;
pub const DEFAULT_LOSS_TOLERANCE: f64 = 1e-7;
pub const EARLY_STOP_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output; relu' at 0 is 0.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// out_dim x in_dim.
    pub weights: Matrix,
    /// out_dim x 1.
    pub bias: Matrix,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Affine + activation on a batch of column vectors.
    fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut z = self.weights.matmul(input)?;
        for r in 0..z.rows() {
            let b = self.bias.get(r, 0);
            for v in z.row_mut(r) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(z)
    }
}

/// Which training objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Reconstruction only.
    Plain,
    /// Reconstruction plus the activity penalty with the given lambda.
    Activity(f64),
    /// Structured dropout: labels mask the representation in the forward pass.
    Dropout,
}

#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    /// Width of the representation layer.
    pub k: usize,
    /// One-sided frames of input context; input width is bins * (2*context+1).
    pub context: usize,
    pub nonneg_decoder: bool,
    pub eps_kl: f64,
}

impl AutoencoderModel {
    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.last().unwrap().out_dim()
    }

    /// Number of frequency bins this model reconstructs.
    pub fn bins(&self) -> usize {
        self.output_dim()
    }

    /// Parameter tensors in a fixed order: encoder (W, b) pairs, then decoder.
    pub fn params(&self) -> Vec<Matrix> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|l| [l.weights.clone(), l.bias.clone()])
            .collect()
    }

    pub fn set_params(&mut self, params: &[Matrix]) -> Result<()> {
        let expected = (self.encoder.len() + self.decoder.len()) * 2;
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "set_params".into(),
                expected: format!("{expected} tensors"),
                got: format!("{}", params.len()),
            });
        }
        let mut it = params.iter();
        for layer in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            let w = it.next().unwrap();
            let b = it.next().unwrap();
            if w.shape() != layer.weights.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::ShapeMismatch {
                    context: "set_params".into(),
                    expected: format!("{:?}/{:?}", layer.weights.shape(), layer.bias.shape()),
                    got: format!("{:?}/{:?}", w.shape(), b.shape()),
                });
            }
            layer.weights = w.clone();
            layer.bias = b.clone();
        }
        Ok(())
    }
}

fn glorot_layer(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, activation: Activation) -> Layer {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let weights = Matrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-bound..bound));
    Layer {
        weights,
        bias: Matrix::zeros(out_dim, 1),
        activation,
    }
}

/// Build a model with sigmoid hidden layers and relu representation and
/// output layers. Glorot-uniform weights, zero biases, deterministic in seed.
pub fn init_model(
    bins: usize,
    k: usize,
    context: usize,
    encoder_hidden: &[usize],
    decoder_hidden: &[usize],
    nonneg_decoder: bool,
    eps_kl: f64,
    seed: u64,
) -> Result<AutoencoderModel> {
    if bins == 0 || k == 0 {
        return Err(Error::InvalidArgument("init_model: dims must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = bins * (2 * context + 1);

    let mut encoder = Vec::new();
    let mut prev = input_dim;
    for &h in encoder_hidden {
        encoder.push(glorot_layer(&mut rng, prev, h, Activation::Sigmoid));
        prev = h;
    }
    encoder.push(glorot_layer(&mut rng, prev, k, Activation::Relu));

    let mut decoder = Vec::new();
    prev = k;
    for &h in decoder_hidden {
        decoder.push(glorot_layer(&mut rng, prev, h, Activation::Sigmoid));
        prev = h;
    }
    decoder.push(glorot_layer(&mut rng, prev, bins, Activation::Relu));

    let mut model = AutoencoderModel {
        encoder,
        decoder,
        k,
        context,
        nonneg_decoder,
        eps_kl,
    };
    if nonneg_decoder {
        for layer in &mut model.decoder {
            layer.weights = layer.weights.map(f64::abs);
        }
    }
    Ok(model)
}

/// Raise a relu layer's biases so every unit has at least one training
/// frame with pre-activation ≥ margin. Units whose pre-activation is ≤ 0 on
/// every frame never receive gradient (relu subgradient at 0 is 0), so a
/// unit born dead stays dead; this shift makes every unit trainable.
fn revive_relu_layer(layer: &mut Layer, prev_act: &Matrix, margin: f64) -> Result<()> {
    let pre = layer.weights.matmul(prev_act)?;
    for u in 0..layer.out_dim() {
        let max_pre = pre.row(u).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            + layer.bias.get(u, 0);
        if max_pre < margin {
            layer.bias.set(u, 0, layer.bias.get(u, 0) + margin - max_pre);
        }
    }
    Ok(())
}

/// Data-dependent bias conditioning for the two relu layers (representation
/// and output), run once between init and training.
pub fn revive_dead_units(model: &mut AutoencoderModel, v: &Matrix, margin: f64) -> Result<()> {
    if !margin.is_finite() || margin <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "revive_dead_units: margin must be positive, got {margin}"
        )));
    }
    let pass = forward_batch(model, v, None)?;
    let prev = if model.encoder.len() >= 2 {
        pass.encoder_acts[model.encoder.len() - 2].clone()
    } else {
        pass.input.clone()
    };
    revive_relu_layer(model.encoder.last_mut().unwrap(), &prev, margin)?;
    // The encoder shift changes the representation, so rerun the forward
    // pass before conditioning the output layer.
    let pass = forward_batch(model, v, None)?;
    let prev = if model.decoder.len() >= 2 {
        pass.decoder_acts[model.decoder.len() - 2].clone()
    } else {
        pass.representation_masked.clone()
    };
    revive_relu_layer(model.decoder.last_mut().unwrap(), &prev, margin)
}

/// Concatenated columns n-C..n+C of V with edge replication; the training
/// target stays the center column n.
pub fn assemble_context(v: &Matrix, n: usize, context: usize) -> Vec<f64> {
    let last = v.cols() as i64 - 1;
    let mut out = Vec::with_capacity(v.rows() * (2 * context + 1));
    for offset in -(context as i64)..=context as i64 {
        let col = (n as i64 + offset).clamp(0, last) as usize;
        out.extend(v.col(col));
    }
    out
}

/// Context-expanded input matrix, bins*(2C+1) x N.
pub fn assemble_context_matrix(v: &Matrix, context: usize) -> Matrix {
    let mut out = Matrix::zeros(v.rows() * (2 * context + 1), v.cols());
    for n in 0..v.cols() {
        out.set_col(n, &assemble_context(v, n, context));
    }
    out
}

fn forward_chain(layers: &[Layer], input: &Matrix) -> Result<Vec<Matrix>> {
    let mut activations = Vec::with_capacity(layers.len());
    let mut current = input.clone();
    for layer in layers {
        current = layer.forward(&current)?;
        activations.push(current.clone());
    }
    Ok(activations)
}

pub fn encode(model: &AutoencoderModel, x: &[f64]) -> Result<Vec<f64>> {
    let input = Matrix::from_vec(x.len(), 1, x.to_vec())?;
    let acts = forward_chain(&model.encoder, &input)?;
    Ok(acts.last().unwrap().col(0))
}

pub fn decode(model: &AutoencoderModel, r: &[f64]) -> Result<Vec<f64>> {
    let input = Matrix::from_vec(r.len(), 1, r.to_vec())?;
    let acts = forward_chain(&model.decoder, &input)?;
    Ok(acts.last().unwrap().col(0))
}

/// Decode the representation with the binary mask applied: f(l ⊙ h(x)).
pub fn forward_dropout(model: &AutoencoderModel, x: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
    let r = encode(model, x)?;
    if mask.len() != r.len() {
        return Err(Error::ShapeMismatch {
            context: "forward_dropout".into(),
            expected: format!("mask length {}", r.len()),
            got: format!("{}", mask.len()),
        });
    }
    let masked: Vec<f64> = r.iter().zip(mask).map(|(&ri, &li)| ri * li).collect();
    decode(model, &masked)
}

/// Generalized KL divergence d(a,b) = sum a log((a+eps)/(b+eps)) - a + b.
pub fn kl_divergence(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "kl_divergence".into(),
            expected: format!("{}", a.len()),
            got: format!("{}", b.len()),
        });
    }
    let mut total = 0.0;
    for (&av, &bv) in a.iter().zip(b) {
        if av < 0.0 || bv < 0.0 {
            return Err(Error::NegativeValue("kl_divergence input".into()));
        }
        total += av * ((av + eps) / (bv + eps)).ln() - av + bv;
    }
    Ok(total)
}

/// Batch reconstruction f(L ⊙ h(V)) as an M x N magnitude matrix.
pub fn reconstruct_masked(model: &AutoencoderModel, v: &Matrix, labels: &Matrix) -> Result<Matrix> {
    let pass = forward_batch(model, v, Some(labels))?;
    Ok(pass.decoder_acts.last().unwrap().clone())
}

struct ForwardPass {
    input: Matrix,
    encoder_acts: Vec<Matrix>,
    representation_masked: Matrix,
    decoder_acts: Vec<Matrix>,
}

/// Full-batch forward pass. `mask` applies structured dropout to the
/// representation; `None` leaves it untouched.
fn forward_batch(model: &AutoencoderModel, v: &Matrix, mask: Option<&Matrix>) -> Result<ForwardPass> {
    let input = assemble_context_matrix(v, model.context);
    let encoder_acts = forward_chain(&model.encoder, &input)?;
    let representation = encoder_acts.last().unwrap();
    let representation_masked = match mask {
        Some(l) => {
            if l.shape() != representation.shape() {
                return Err(Error::ShapeMismatch {
                    context: "forward_batch mask".into(),
                    expected: format!("{:?}", representation.shape()),
                    got: format!("{:?}", l.shape()),
                });
            }
            representation.zip_map(l, |r, m| r * m)?
        }
        None => representation.clone(),
    };
    let decoder_acts = forward_chain(&model.decoder, &representation_masked)?;
    Ok(ForwardPass {
        input,
        encoder_acts,
        representation_masked,
        decoder_acts,
    })
}

fn mean_kl(reconstruction: &Matrix, target: &Matrix, eps: f64) -> Result<f64> {
    let n = target.cols() as f64;
    let mut total = 0.0;
    for (&a, &b) in reconstruction.data().iter().zip(target.data()) {
        if a < 0.0 || b < 0.0 {
            return Err(Error::NegativeValue("reconstruction loss input".into()));
        }
        total += a * ((a + eps) / (b + eps)).ln() - a + b;
    }
    Ok(total / n)
}

/// Mean over frames of d(reconstruction, input).
pub fn loss_reconstruction(model: &AutoencoderModel, v: &Matrix) -> Result<f64> {
    let pass = forward_batch(model, v, None)?;
    mean_kl(pass.decoder_acts.last().unwrap(), v, model.eps_kl)
}

fn activity_penalty(representation: &Matrix, labels: &Matrix, lambda: f64) -> f64 {
    let n = representation.cols() as f64;
    let mut total = 0.0;
    for (&r, &l) in representation.data().iter().zip(labels.data()) {
        let blocked = (1.0 - l) * r;
        total += blocked * blocked;
    }
    lambda * total / n
}

/// Reconstruction plus the frame-averaged activity penalty
/// (lambda/N) * sum_n ||(1 - L_n) ⊙ h(V_n)||².
pub fn loss_activity(model: &AutoencoderModel, v: &Matrix, labels: &Matrix, lambda: f64) -> Result<f64> {
    let pass = forward_batch(model, v, None)?;
    let recon = mean_kl(pass.decoder_acts.last().unwrap(), v, model.eps_kl)?;
    Ok(recon + activity_penalty(pass.encoder_acts.last().unwrap(), labels, lambda))
}

/// Mean over frames of d(f(L_n ⊙ h(V_n)), V_n).
pub fn loss_dropout(model: &AutoencoderModel, v: &Matrix, labels: &Matrix) -> Result<f64> {
    let pass = forward_batch(model, v, Some(labels))?;
    mean_kl(pass.decoder_acts.last().unwrap(), v, model.eps_kl)
}

pub fn loss(model: &AutoencoderModel, v: &Matrix, labels: &Matrix, objective: Objective) -> Result<f64> {
    match objective {
        Objective::Plain => loss_reconstruction(model, v),
        Objective::Activity(lambda) => loss_activity(model, v, labels, lambda),
        Objective::Dropout => loss_dropout(model, v, labels),
    }
}

fn backprop_chain(
    layers: &[Layer],
    input: &Matrix,
    activations: &[Matrix],
    mut delta_out: Matrix,
    grads_out: &mut Vec<Matrix>,
) -> Result<Matrix> {
    // Walk layers last to first; grads are pushed in reverse and the caller
    // reverses them into parameter order.
    for (idx, layer) in layers.iter().enumerate().rev() {
        let act = &activations[idx];
        let delta = delta_out.zip_map(act, |g, a| g * layer.activation.derivative_from_output(a))?;
        let layer_input = if idx == 0 { input } else { &activations[idx - 1] };
        let grad_w = delta.matmul(&layer_input.transpose())?;
        let mut grad_b = Matrix::zeros(layer.out_dim(), 1);
        for r in 0..delta.rows() {
            grad_b.set(r, 0, delta.row(r).iter().sum());
        }
        grads_out.push(grad_b);
        grads_out.push(grad_w);
        delta_out = layer.weights.transpose().matmul(&delta)?;
    }
    Ok(delta_out)
}

/// Analytic gradients of the selected objective with respect to every weight
/// and bias, in the same order as `AutoencoderModel::params`.
pub fn backprop(
    model: &AutoencoderModel,
    v: &Matrix,
    labels: &Matrix,
    objective: Objective,
) -> Result<Vec<Matrix>> {
    let mask = match objective {
        Objective::Dropout => Some(labels),
        _ => None,
    };
    let pass = forward_batch(model, v, mask)?;
    let reconstruction = pass.decoder_acts.last().unwrap();
    let n = v.cols() as f64;
    let eps = model.eps_kl;

    // d/da of (1/N) d(a, b).
    let loss_grad = reconstruction.zip_map(v, |a, b| {
        (((a + eps) / (b + eps)).ln() + a / (a + eps) - 1.0) / n
    })?;

    let mut decoder_grads = Vec::new();
    let delta_into_masked = backprop_chain(
        &model.decoder,
        &pass.representation_masked,
        &pass.decoder_acts,
        loss_grad,
        &mut decoder_grads,
    )?;

    // Gradient into the (unmasked) representation.
    let representation = pass.encoder_acts.last().unwrap();
    let mut delta_repr = match objective {
        // The mask cuts backpropagation: masked units get exactly zero.
        Objective::Dropout => delta_into_masked.zip_map(labels, |g, l| g * l)?,
        _ => delta_into_masked,
    };
    if let Objective::Activity(lambda) = objective {
        // d/dr of (lambda/N) ||(1-L) ⊙ r||²; (1-L) is binary so its square
        // is itself.
        let penalty_grad = representation.zip_map(labels, |r, l| 2.0 * lambda / n * (1.0 - l) * r)?;
        delta_repr = delta_repr.zip_map(&penalty_grad, |a, b| a + b)?;
    }

    let mut encoder_grads = Vec::new();
    backprop_chain(
        &model.encoder,
        &pass.input,
        &pass.encoder_acts,
        delta_repr,
        &mut encoder_grads,
    )?;

    encoder_grads.reverse();
    decoder_grads.reverse();
    encoder_grads.extend(decoder_grads);
    Ok(encoder_grads)
}

/// Clamp decoder weights at zero from below; encoder and biases untouched.
pub fn project_nonneg(model: &mut AutoencoderModel) {
    for layer in &mut model.decoder {
        layer.weights = layer.weights.map(|w| w.max(0.0));
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub lambda: f64,
    pub step_size: f64,
    /// Stage-2 ADAM step; `None` reuses `step_size`. The refinement stage
    /// changes the objective under a trained model, so it usually wants a
    /// smaller step than stage 1.
    pub stage2_step_size: Option<f64>,
    pub loss_tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iters: DEFAULT_STAGE1_ITERS,
            stage2_iters: DEFAULT_STAGE2_ITERS,
            lambda: DEFAULT_LAMBDA,
            step_size: DEFAULT_STEP_SIZE,
            stage2_step_size: None,
            loss_tolerance: DEFAULT_LOSS_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
}

fn run_stage(
    model: &mut AutoencoderModel,
    v: &Matrix,
    labels: &Matrix,
    objective: Objective,
    iters: usize,
    step_size: f64,
    config: &TrainConfig,
    iteration_offset: usize,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(iters);
    if iters == 0 {
        return Ok(trace);
    }
    let mut params = model.params();
    let mut adam = AdamState::for_params(step_size, &params);
    for iter in 0..iters {
        let grads = backprop(model, v, labels, objective)?;
        adam.step(&mut params, &grads)?;
        model.set_params(&params)?;
        if model.nonneg_decoder {
            project_nonneg(model);
            params = model.params();
        }
        let value = loss(model, v, labels, objective)?;
        if !value.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: iteration_offset + iter,
            });
        }
        trace.push(value);
        // Early stop on stalled relative improvement over a window.
        if trace.len() > EARLY_STOP_WINDOW {
            let past = trace[trace.len() - 1 - EARLY_STOP_WINDOW];
            let rel = (past - value) / past.abs().max(1e-300);
            // A negative rel means a transient rise, not a stall; keep going.
            if rel >= 0.0 && rel < config.loss_tolerance {
                break;
            }
        }
    }
    Ok(trace)
}

/// Two-stage training: structured-dropout objective first, activity-cost
/// refinement second. Full-batch ADAM; decoder projected onto the
/// non-negative orthant after every step when nonneg_decoder is set.
pub fn train(
    model: &mut AutoencoderModel,
    v: &Matrix,
    labels: &Matrix,
    config: &TrainConfig,
) -> Result<LossTrace> {
    let stage1 = run_stage(
        model,
        v,
        labels,
        Objective::Dropout,
        config.stage1_iters,
        config.step_size,
        config,
        0,
    )?;
    let stage2 = run_stage(
        model,
        v,
        labels,
        Objective::Activity(config.lambda),
        config.stage2_iters,
        config.stage2_step_size.unwrap_or(config.step_size),
        config,
        stage1.len(),
    )?;
    Ok(LossTrace { stage1, stage2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn random_v(bins: usize, frames: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(bins, frames, |_, _| rng.gen_range(0.0..2.0))
    }

    fn random_labels(k: usize, frames: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(k, frames, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
    }

    fn tiny_model(seed: u64, nonneg: bool, context: usize) -> AutoencoderModel {
        init_model(3, 2, context, &[3], &[3], nonneg, DEFAULT_EPS_KL, seed).unwrap()
    }

    #[test]
    fn init_deterministic_in_seed() {
        let a = init_model(5, 3, 0, &[4], &[4], false, 1e-9, 42).unwrap();
        let b = init_model(5, 3, 0, &[4], &[4], false, 1e-9, 42).unwrap();
        assert_eq!(a.params(), b.params());
        let c = init_model(5, 3, 0, &[4], &[4], false, 1e-9, 43).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_nonneg_decoder() {
        let m = init_model(5, 3, 0, &[4], &[4], true, 1e-9, 7).unwrap();
        for layer in &m.decoder {
            assert!(layer.weights.data().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn init_full_scale_shapes() {
        let m = init_model(2049, 30, 0, &[1500, 1500], &[1500], false, 1e-9, 0).unwrap();
        let enc: Vec<(usize, usize)> = m.encoder.iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        let dec: Vec<(usize, usize)> = m.decoder.iter().map(|l| (l.in_dim(), l.out_dim())).collect();
        assert_eq!(enc, vec![(2049, 1500), (1500, 1500), (1500, 30)]);
        assert_eq!(dec, vec![(30, 1500), (1500, 2049)]);
    }

    #[test]
    fn context_assembly() {
        let v = Matrix::from_fn(2, 5, |r, c| (10 * r + c) as f64);
        // C=0 is exactly the column.
        assert_eq!(assemble_context(&v, 2, 0), v.col(2));
        // C=1 at the left edge replicates column 0.
        let left = assemble_context(&v, 0, 1);
        assert_eq!(left, [v.col(0), v.col(0), v.col(1)].concat());
        // C=2 in the middle matches hand assembly.
        let mid = assemble_context(&v, 2, 2);
        assert_eq!(
            mid,
            [v.col(0), v.col(1), v.col(2), v.col(3), v.col(4)].concat()
        );
    }

    #[test]
    fn encode_decode_zero_model() {
        let mut m = tiny_model(0, false, 0);
        let zeroed: Vec<Matrix> = m.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        m.set_params(&zeroed).unwrap();
        let r = encode(&m, &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.iter().all(|&x| x == 0.0));
        let v = decode(&m, &r).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sigmoid_hidden_at_zero_weights() {
        // Zero weights: hidden sigmoid activation is 0.5 everywhere, and the
        // relu output is relu(W2 * 0.5 + 0) per the output weights.
        let mut m = init_model(2, 2, 0, &[3], &[], false, 1e-9, 1).unwrap();
        let mut params = m.params();
        params[0] = Matrix::zeros(3, 2); // encoder hidden weights
        params[1] = Matrix::zeros(3, 1);
        m.set_params(&params).unwrap();
        let w_out = params[2].clone();
        let r = encode(&m, &[5.0, -5.0]).unwrap();
        for k in 0..2 {
            let expected: f64 = (0..3).map(|j| w_out.get(k, j) * 0.5).sum::<f64>().max(0.0);
            assert!((r[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_matches_per_layer_reference() {
        // Independent per-layer reference computation.
        let m = init_model(4, 3, 0, &[5, 4], &[5], false, 1e-9, 9).unwrap();
        let x = vec![0.3, -0.2, 1.5, 0.7];
        let mut cur = x.clone();
        for layer in &m.encoder {
            let mut next = vec![0.0; layer.out_dim()];
            for r in 0..layer.out_dim() {
                let mut z = layer.bias.get(r, 0);
                for c in 0..layer.in_dim() {
                    z += layer.weights.get(r, c) * cur[c];
                }
                next[r] = match layer.activation {
                    Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
                    Activation::Relu => z.max(0.0),
                };
            }
            cur = next;
        }
        let r = encode(&m, &x).unwrap();
        for (a, b) in r.iter().zip(&cur) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_dropout_identity_and_zero_masks() {
        let m = tiny_model(3, false, 0);
        let x = vec![1.0, 0.5, 0.25];
        let full = forward_dropout(&m, &x, &[1.0, 1.0]).unwrap();
        let plain = decode(&m, &encode(&m, &x).unwrap()).unwrap();
        assert_eq!(full, plain);

        let zeroed = forward_dropout(&m, &x, &[0.0, 0.0]).unwrap();
        let other = forward_dropout(&m, &[9.0, 9.0, 9.0], &[0.0, 0.0]).unwrap();
        assert_eq!(zeroed, other);
        assert_eq!(zeroed, decode(&m, &[0.0, 0.0]).unwrap());
    }

    #[test]
    fn forward_dropout_sparse_decoder_column() {
        // Linear-free construction: single decoder layer whose only nonzero
        // column is unit 1; masking unit 1 leaves just the bias path.
        let mut m = init_model(2, 2, 0, &[], &[], false, 1e-9, 5).unwrap();
        let mut params = m.params();
        // decoder weights (2x2): column 0 zero, column 1 nonzero.
        params[2] = Matrix::from_vec(2, 2, vec![0.0, 2.0, 0.0, 3.0]).unwrap();
        params[3] = Matrix::from_vec(2, 1, vec![0.5, 0.25]).unwrap();
        m.set_params(&params).unwrap();
        let x = vec![1.0, 2.0];
        let masked = forward_dropout(&m, &x, &[1.0, 0.0]).unwrap();
        assert_eq!(masked, vec![0.5, 0.25]);
    }

    #[test]
    fn kl_divergence_cases() {
        let eps = 1e-9;
        assert_eq!(kl_divergence(&[0.7, 1.3], &[0.7, 1.3], eps).unwrap(), 0.0);
        let d = kl_divergence(&[1.0], &[2.0], eps).unwrap();
        assert!((d - (1.0 - 2.0f64.ln())).abs() < 1e-6);
        let d2 = kl_divergence(&[0.0, 0.0], &[3.0, 4.0], eps).unwrap();
        assert!((d2 - 7.0).abs() < 1e-6);
        assert!(kl_divergence(&[-0.1], &[1.0], eps).is_err());
    }

    #[test]
    fn loss_reductions_exact() {
        let m = tiny_model(11, false, 0);
        let v = random_v(3, 6, 2);
        let ones = Matrix::from_fn(2, 6, |_, _| 1.0);
        let labels = random_labels(2, 6, 3);
        let recon = loss_reconstruction(&m, &v).unwrap();
        assert_eq!(loss_dropout(&m, &v, &ones).unwrap(), recon);
        assert_eq!(loss_activity(&m, &v, &labels, 0.0).unwrap(), recon);
    }

    #[test]
    fn loss_zero_model_is_mean_column_sum() {
        let mut m = tiny_model(0, false, 0);
        let zeroed: Vec<Matrix> = m.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        m.set_params(&zeroed).unwrap();
        let v = random_v(3, 4, 8);
        let expected = v.data().iter().sum::<f64>() / 4.0;
        let got = loss_reconstruction(&m, &v).unwrap();
        // a=0 collapses d to sum(b) up to eps terms.
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn loss_activity_penalty_arithmetic() {
        // K=2, one frame with r=(0.5, 2.0), L=(1,0), lambda=10 -> penalty 40.
        let r = Matrix::from_vec(2, 1, vec![0.5, 2.0]).unwrap();
        let l = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(activity_penalty(&r, &l, 10.0), 40.0);
    }

    #[test]
    fn loss_dropout_compositional_oracle() {
        let m = tiny_model(17, false, 0);
        let v = random_v(3, 5, 21);
        let labels = random_labels(2, 5, 22);
        let batch = loss_dropout(&m, &v, &labels).unwrap();
        let mut acc = 0.0;
        for n in 0..5 {
            let x = assemble_context(&v, n, 0);
            let recon = forward_dropout(&m, &x, &labels.col(n)).unwrap();
            acc += kl_divergence(&recon, &v.col(n), m.eps_kl).unwrap();
        }
        assert!((batch - acc / 5.0).abs() < 1e-12);
    }

    pub(crate) fn gradient_relative_error(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
        let mut diff_sq = 0.0;
        let mut ref_sq = 0.0;
        for (a, n) in analytic.iter().zip(numeric) {
            for (&av, &nv) in a.data().iter().zip(n.data()) {
                diff_sq += (av - nv) * (av - nv);
                ref_sq += nv * nv;
            }
        }
        diff_sq.sqrt() / ref_sq.sqrt().max(1e-12)
    }

    fn gradcheck(model: &AutoencoderModel, v: &Matrix, labels: &Matrix, objective: Objective) {
        let analytic = backprop(model, v, labels, objective).unwrap();
        let params = model.params();
        let numeric = finite_diff_grad(
            |p| {
                let mut m2 = model.clone();
                m2.set_params(p).unwrap();
                loss(&m2, v, labels, objective).unwrap()
            },
            &params,
            1e-6,
        )
        .unwrap();
        let rel = gradient_relative_error(&analytic, &numeric);
        assert!(rel < 1e-5, "relative gradient error {rel}");
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..3u64 {
            for &nonneg in &[false, true] {
                for &context in &[0usize, 1] {
                    let m = tiny_model(seed + 100, nonneg, context);
                    let v = random_v(3, 4, seed);
                    let labels = random_labels(2, 4, seed + 50);
                    gradcheck(&m, &v, &labels, Objective::Plain);
                    gradcheck(&m, &v, &labels, Objective::Activity(2.5));
                    gradcheck(&m, &v, &labels, Objective::Dropout);
                }
            }
        }
    }

    #[test]
    fn activity_lambda_zero_equals_plain_gradients() {
        let m = tiny_model(31, false, 0);
        let v = random_v(3, 4, 31);
        let labels = random_labels(2, 4, 32);
        let a = backprop(&m, &v, &labels, Objective::Activity(0.0)).unwrap();
        let b = backprop(&m, &v, &labels, Objective::Plain).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_gradient_cut_is_exact_zero() {
        // Single-frame batch with unit 1 masked: gradients of the encoder
        // output-layer row feeding unit 1 must be exactly zero.
        let m = tiny_model(41, false, 0);
        let v = random_v(3, 1, 41);
        let labels = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let grads = backprop(&m, &v, &labels, Objective::Dropout).unwrap();
        // Params order: enc hidden (W,b), enc output (W,b), dec ...
        let enc_out_w = &grads[2];
        let enc_out_b = &grads[3];
        for c in 0..enc_out_w.cols() {
            assert_eq!(enc_out_w.get(1, c), 0.0);
        }
        assert_eq!(enc_out_b.get(1, 0), 0.0);
    }

    #[test]
    fn nonneg_monotone_reconstruction() {
        // With a non-negative decoder, increasing one representation unit
        // never decreases any output entry.
        let m = init_model(4, 3, 0, &[], &[4], true, 1e-9, 55).unwrap();
        let r = vec![0.2, 0.5, 0.1];
        let base = decode(&m, &r).unwrap();
        for k in 0..3 {
            let mut bumped = r.clone();
            bumped[k] += 0.3;
            let out = decode(&m, &bumped).unwrap();
            for (b, o) in base.iter().zip(&out) {
                assert!(o >= b);
            }
        }
    }

    #[test]
    fn project_nonneg_clamps() {
        let mut m = tiny_model(61, false, 0);
        let mut params = m.params();
        let dec_w_idx = 4; // after enc (W,b,W,b)
        params[dec_w_idx].set(0, 0, -0.3);
        m.set_params(&params).unwrap();
        project_nonneg(&mut m);
        assert_eq!(m.decoder[0].weights.get(0, 0), 0.0);
        assert!(m.decoder.iter().all(|l| l.weights.data().iter().all(|&w| w >= 0.0)));
        let snapshot = m.params();
        project_nonneg(&mut m);
        assert_eq!(m.params(), snapshot);
    }

    #[test]
    fn train_zero_iters_is_identity() {
        let mut m = tiny_model(71, false, 0);
        let before = m.params();
        let v = random_v(3, 4, 71);
        let labels = random_labels(2, 4, 72);
        let config = TrainConfig {
            stage1_iters: 0,
            stage2_iters: 0,
            ..Default::default()
        };
        let trace = train(&mut m, &v, &labels, &config).unwrap();
        assert!(trace.stage1.is_empty() && trace.stage2.is_empty());
        assert_eq!(m.params(), before);
    }

    #[test]
    fn train_descends_on_toy_instance() {
        let mut m = init_model(8, 4, 0, &[6], &[6], false, 1e-9, 81).unwrap();
        let v = random_v(8, 16, 81);
        let labels = random_labels(4, 16, 82);
        let initial = loss_dropout(&m, &v, &labels).unwrap();
        let config = TrainConfig {
            stage1_iters: 500,
            stage2_iters: 0,
            step_size: 1e-3,
            loss_tolerance: 0.0,
            ..Default::default()
        };
        train(&mut m, &v, &labels, &config).unwrap();
        let final_loss = loss_dropout(&m, &v, &labels).unwrap();
        assert!(final_loss < initial, "{final_loss} !< {initial}");
    }

    #[test]
    fn train_deterministic_trace() {
        let run = || {
            let mut m = tiny_model(91, true, 0);
            let v = random_v(3, 6, 91);
            let labels = random_labels(2, 6, 92);
            let config = TrainConfig {
                stage1_iters: 40,
                stage2_iters: 20,
                ..Default::default()
            };
            let trace = train(&mut m, &v, &labels, &config).unwrap();
            (trace.stage1, trace.stage2, m.params())
        };
        let (a1, a2, ap) = run();
        let (b1, b2, bp) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
        assert_eq!(ap, bp);
    }
}
