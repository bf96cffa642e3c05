//! Differentiable models: multinomial logistic regression and MLPs with
//! softmax cross-entropy loss.
//!
//! Exposes exactly the three primitives the influence machinery needs —
//! per-example loss, per-example gradient, minibatch Hessian-vector product —
//! plus finite-difference fallbacks used as oracles. Everything here is a
//! pure function of its arguments: repeated calls are bit-identical, and all
//! arithmetic is f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dataset::{Dataset, Instance};
use crate::error::{Error, Result};
use crate::parallel;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// First derivative at pre-activation `z` (activation value `a`).
    /// ReLU uses the one-sided convention: derivative 0 at z == 0.
    fn d1(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    /// Second derivative; ReLU's is taken as 0 everywhere.
    fn d2(self, _z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation {other:?} (expected relu|tanh)"))),
        }
    }
}

/// Network architecture: input dimension, hidden widths (empty for logistic
/// regression), class count, hidden activation. Output layer is always
/// linear logits into softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Dimensions and flat offsets of one layer. Weights are row-major
/// `w[out * nin + in]`, followed by the `nout` biases.
#[derive(Debug, Clone, Copy)]
struct LayerDims {
    nin: usize,
    nout: usize,
    w_off: usize,
    b_off: usize,
}

impl ModelSpec {
    pub fn logistic_regression(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden: Vec::new(),
            output_dim: classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize, activation: Activation) -> Self {
        ModelSpec {
            input_dim,
            hidden,
            output_dim: classes,
            activation,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("all layer widths must be at least 1"));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<LayerDims> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for w in dims.windows(2) {
            let (nin, nout) = (w[0], w[1]);
            layers.push(LayerDims {
                nin,
                nout,
                w_off: off,
                b_off: off + nin * nout,
            });
            off += (nin + 1) * nout;
        }
        layers
    }

    /// Total parameter count `p = Σ (fan_in + 1) · fan_out`.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| (l.nin + 1) * l.nout).sum()
    }

    /// Seeded uniform init on `(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`,
    /// drawn in canonical flat order.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            let limit = (6.0 / (layer.nin + layer.nout) as f64).sqrt();
            for _ in 0..(layer.nin + 1) * layer.nout {
                values.push(rng.random_range(-limit..limit));
            }
        }
        ParamVector::from(values)
    }
}

/// Flat parameter vector in canonical layout: layer by layer, weights
/// row-major then bias. This layout is the bit-exact contract for cache
/// files.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(p: usize) -> Self {
        ParamVector(vec![0.0; p])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other`, element-wise in index order.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (x, y) in self.0.iter_mut().zip(&other.0) {
            *x += alpha * y;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in &mut self.0 {
            *x *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

fn check_params(spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::dim(format!(
            "parameter vector has length {}, spec needs {}",
            params.len(),
            spec.param_count()
        )));
    }
    if !params.is_finite() {
        return Err(Error::invalid("non-finite parameters"));
    }
    Ok(())
}

fn check_instance(spec: &ModelSpec, z: &Instance) -> Result<()> {
    if z.features.len() != spec.input_dim {
        return Err(Error::dim(format!(
            "instance id {} has {} features, model expects {}",
            z.id,
            z.features.len(),
            spec.input_dim
        )));
    }
    if z.label >= spec.output_dim {
        return Err(Error::dim(format!(
            "instance id {} has label {}, model has {} classes",
            z.id, z.label, spec.output_dim
        )));
    }
    Ok(())
}

/// Per-example forward state: the input to each layer, hidden
/// pre-activations, and output logits.
struct Forward {
    /// `inputs[l]` is the vector entering layer `l`; `inputs[0]` is x.
    inputs: Vec<Vec<f64>>,
    /// Hidden pre-activations `z_l`, one per hidden layer.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn matvec(theta: &[f64], layer: &LayerDims, x: &[f64], out: &mut [f64]) {
    for o in 0..layer.nout {
        let row = &theta[layer.w_off + o * layer.nin..layer.w_off + (o + 1) * layer.nin];
        let mut acc = theta[layer.b_off + o];
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        out[o] = acc;
    }
}

/// `out[i] += Σ_o w[o,i] · v[o]` (transposed mat-vec, no bias).
fn matvec_t(theta: &[f64], layer: &LayerDims, v: &[f64], out: &mut [f64]) {
    for o in 0..layer.nout {
        let row = &theta[layer.w_off + o * layer.nin..layer.w_off + (o + 1) * layer.nin];
        let vo = v[o];
        for (oi, w) in out.iter_mut().zip(row) {
            *oi += w * vo;
        }
    }
}

fn run_forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Forward {
    let layers = spec.layers();
    let n_layers = layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers - 1);
    inputs.push(x.to_vec());
    for (l, layer) in layers.iter().enumerate() {
        let mut z = vec![0.0; layer.nout];
        matvec(theta, layer, &inputs[l], &mut z);
        if l + 1 == n_layers {
            return Forward {
                inputs,
                pre,
                logits: z,
            };
        }
        let a: Vec<f64> = z.iter().map(|&zi| spec.activation.apply(zi)).collect();
        pre.push(z);
        inputs.push(a);
    }
    unreachable!("spec has at least one layer")
}

/// Numerically stable `log Σ exp` and softmax probabilities.
fn softmax_stats(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    for p in &probs {
        sum += p;
    }
    for p in &mut probs {
        *p /= sum;
    }
    (m + sum.ln(), probs)
}

/// Softmax cross-entropy loss of one instance.
pub fn loss(spec: &ModelSpec, params: &ParamVector, z: &Instance) -> Result<f64> {
    check_params(spec, params)?;
    check_instance(spec, z)?;
    let fwd = run_forward(spec, params.values(), &z.features);
    let (lse, _) = softmax_stats(&fwd.logits);
    Ok(lse - fwd.logits[z.label])
}

/// Loss and gradient together; the gradient reuses the forward pass the loss
/// already needs, which keeps the training loop at one backprop per example.
pub fn loss_grad(spec: &ModelSpec, params: &ParamVector, z: &Instance) -> Result<(f64, ParamVector)> {
    check_params(spec, params)?;
    check_instance(spec, z)?;
    Ok(loss_grad_unchecked(spec, params.values(), z))
}

fn loss_grad_unchecked(spec: &ModelSpec, theta: &[f64], z: &Instance) -> (f64, ParamVector) {
    let layers = spec.layers();
    let fwd = run_forward(spec, theta, &z.features);
    let (lse, probs) = softmax_stats(&fwd.logits);
    let loss = lse - fwd.logits[z.label];

    let mut grad = vec![0.0; theta.len()];
    // d loss / d logits
    let mut delta: Vec<f64> = probs;
    delta[z.label] -= 1.0;

    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let input = &fwd.inputs[l];
        for o in 0..layer.nout {
            let d = delta[o];
            let gw = &mut grad[layer.w_off + o * layer.nin..layer.w_off + (o + 1) * layer.nin];
            for (g, xi) in gw.iter_mut().zip(input) {
                *g = d * xi;
            }
            grad[layer.b_off + o] = d;
        }
        if l > 0 {
            let mut back = vec![0.0; layer.nin];
            matvec_t(theta, layer, &delta, &mut back);
            let zprev = &fwd.pre[l - 1];
            let aprev = &fwd.inputs[l];
            delta = back
                .iter()
                .zip(zprev.iter().zip(aprev))
                .map(|(&s, (&zp, &ap))| s * spec.activation.d1(zp, ap))
                .collect();
        }
    }
    (loss, ParamVector::from(grad))
}

/// Exact gradient of [`loss`] with respect to the parameters.
pub fn grad(spec: &ModelSpec, params: &ParamVector, z: &Instance) -> Result<ParamVector> {
    loss_grad(spec, params, z).map(|(_, g)| g)
}

/// Mean of per-example gradients, summed in the listed order.
pub fn batch_grad(spec: &ModelSpec, params: &ParamVector, batch: &[&Instance]) -> Result<ParamVector> {
    batch_loss_grad(spec, params, batch).map(|(_, g)| g)
}

/// Mean loss and mean gradient over a batch. Per-example work may run in
/// parallel; the reduction is sequential in listed order either way.
pub fn batch_loss_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Instance],
) -> Result<(f64, ParamVector)> {
    let (loss_sum, mut total) = batch_loss_grad_sum(spec, params, batch)?;
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((loss_sum * scale, total))
}

/// Sum (not mean) of per-example losses and gradients, reduced in listed
/// order. The trainer scales the sum by the *recorded* batch size, which is
/// what keeps the divisor unchanged when a counterfactual replay drops an
/// instance from a batch.
pub(crate) fn batch_loss_grad_sum(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Instance],
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    check_params(spec, params)?;
    for z in batch {
        check_instance(spec, z)?;
    }
    let theta = params.values();
    let per_example = parallel::map_ordered(batch, |z| loss_grad_unchecked(spec, theta, z));
    let mut total = ParamVector::zeros(params.len());
    let mut loss_sum = 0.0;
    for (l, g) in &per_example {
        loss_sum += l;
        total.axpy(1.0, g);
    }
    Ok((loss_sum, total))
}

fn hvp_single(spec: &ModelSpec, theta: &[f64], z: &Instance, v: &[f64]) -> ParamVector {
    let layers = spec.layers();
    let fwd = run_forward(spec, theta, &z.features);
    let n_layers = layers.len();

    // Forward tangents along v: Rz_l and R(input_l).
    let mut r_inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut r_pre: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    r_inputs.push(vec![0.0; z.features.len()]);
    for (l, layer) in layers.iter().enumerate() {
        let mut rz = vec![0.0; layer.nout];
        matvec(theta, layer, &r_inputs[l], &mut rz);
        // matvec added the model bias of this layer; the tangent of a
        // constant input contributes none, so strip it back out.
        for o in 0..layer.nout {
            rz[o] -= theta[layer.b_off + o];
        }
        let mut vz = vec![0.0; layer.nout];
        matvec(v, layer, &fwd.inputs[l], &mut vz);
        for (rzi, vzi) in rz.iter_mut().zip(&vz) {
            *rzi += vzi;
        }
        if l + 1 < n_layers {
            let ra: Vec<f64> = rz
                .iter()
                .zip(fwd.pre[l].iter().zip(&fwd.inputs[l + 1]))
                .map(|(&r, (&zp, &ap))| r * spec.activation.d1(zp, ap))
                .collect();
            r_inputs.push(ra);
        }
        r_pre.push(rz);
    }

    // Backward pass carrying (delta, R delta).
    let (_, probs) = softmax_stats(&fwd.logits);
    let r_logits = &r_pre[n_layers - 1];
    let pdot: f64 = probs.iter().zip(r_logits).map(|(p, r)| p * r).sum();
    let mut delta: Vec<f64> = probs.clone();
    delta[z.label] -= 1.0;
    let mut r_delta: Vec<f64> = probs
        .iter()
        .zip(r_logits)
        .map(|(&p, &r)| p * r - p * pdot)
        .collect();

    let mut hv = vec![0.0; theta.len()];
    for l in (0..n_layers).rev() {
        let layer = &layers[l];
        let input = &fwd.inputs[l];
        let r_input = &r_inputs[l];
        for o in 0..layer.nout {
            let rd = r_delta[o];
            let d = delta[o];
            let hw = &mut hv[layer.w_off + o * layer.nin..layer.w_off + (o + 1) * layer.nin];
            for (h, (xi, rxi)) in hw.iter_mut().zip(input.iter().zip(r_input)) {
                *h = rd * xi + d * rxi;
            }
            hv[layer.b_off + o] = rd;
        }
        if l > 0 {
            let mut s = vec![0.0; layer.nin];
            matvec_t(theta, layer, &delta, &mut s);
            let mut rs = vec![0.0; layer.nin];
            matvec_t(v, layer, &delta, &mut rs);
            matvec_t(theta, layer, &r_delta, &mut rs);
            let zprev = &fwd.pre[l - 1];
            let aprev = &fwd.inputs[l];
            let rzprev = &r_pre[l - 1];
            let mut next_delta = vec![0.0; layer.nin];
            let mut next_r_delta = vec![0.0; layer.nin];
            for i in 0..layer.nin {
                let d1 = spec.activation.d1(zprev[i], aprev[i]);
                let d2 = spec.activation.d2(zprev[i], aprev[i]);
                next_delta[i] = s[i] * d1;
                next_r_delta[i] = rs[i] * d1 + s[i] * d2 * rzprev[i];
            }
            delta = next_delta;
            r_delta = next_r_delta;
        }
    }
    ParamVector::from(hv)
}

/// Minibatch Hessian-vector product `(1/|batch|) Σ ∇²l(z_i; θ) · v`,
/// computed analytically (forward-over-reverse). ReLU's second derivative is
/// taken as 0 everywhere.
pub fn hvp(spec: &ModelSpec, params: &ParamVector, batch: &[&Instance], v: &ParamVector) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    check_params(spec, params)?;
    if v.len() != params.len() {
        return Err(Error::dim(format!(
            "direction vector has length {}, parameters have {}",
            v.len(),
            params.len()
        )));
    }
    for z in batch {
        check_instance(spec, z)?;
    }
    let theta = params.values();
    let vs = v.values();
    let per_example = parallel::map_ordered(batch, |z| hvp_single(spec, theta, z, vs));
    let mut total = ParamVector::zeros(params.len());
    for h in &per_example {
        total.axpy(1.0, h);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok(total)
}

/// Central-difference Hessian-vector product, accuracy `O(ε²)`. Oracle and
/// fallback for [`hvp`].
pub fn hvp_fd(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Instance],
    v: &ParamVector,
    eps: f64,
) -> Result<ParamVector> {
    if eps == 0.0 {
        return Err(Error::invalid("zero step"));
    }
    if v.len() != params.len() {
        return Err(Error::dim(format!(
            "direction vector has length {}, parameters have {}",
            v.len(),
            params.len()
        )));
    }
    let mut plus = params.clone();
    plus.axpy(eps, v);
    let mut minus = params.clone();
    minus.axpy(-eps, v);
    let gp = batch_grad(spec, &plus, batch)?;
    let gm = batch_grad(spec, &minus, batch)?;
    let mut out = gp;
    out.axpy(-1.0, &gm);
    out.scale(1.0 / (2.0 * eps));
    Ok(out)
}

/// Predicted class: argmax over logits, ties broken toward the smaller
/// class index.
pub fn predict(spec: &ModelSpec, params: &ParamVector, features: &[f64]) -> Result<usize> {
    check_params(spec, params)?;
    if features.len() != spec.input_dim {
        return Err(Error::dim(format!(
            "feature vector has length {}, model expects {}",
            features.len(),
            spec.input_dim
        )));
    }
    let fwd = run_forward(spec, params.values(), features);
    let mut best = 0;
    for (c, &logit) in fwd.logits.iter().enumerate() {
        if logit > fwd.logits[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Fraction of instances whose predicted class matches the label.
pub fn predict_accuracy(spec: &ModelSpec, params: &ParamVector, ds: &Dataset) -> Result<f64> {
    check_params(spec, params)?;
    if ds.dim() != spec.input_dim || ds.classes() > spec.output_dim {
        return Err(Error::dim(format!(
            "dataset (d={}, C={}) incompatible with model (d={}, C={})",
            ds.dim(),
            ds.classes(),
            spec.input_dim,
            spec.output_dim
        )));
    }
    let theta = params.values();
    let hits = parallel::map_ordered(ds.instances(), |z| {
        let fwd = run_forward(spec, theta, &z.features);
        let mut best = 0;
        for (c, &logit) in fwd.logits.iter().enumerate() {
            if logit > fwd.logits[best] {
                best = c;
            }
        }
        (best == z.label) as u64
    });
    Ok(hits.iter().sum::<u64>() as f64 / ds.len() as f64)
}

/// Mean loss over a whole dataset.
pub fn dataset_loss(spec: &ModelSpec, params: &ParamVector, ds: &Dataset) -> Result<f64> {
    check_params(spec, params)?;
    for z in ds.instances() {
        check_instance(spec, z)?;
    }
    let theta = params.values();
    let losses = parallel::map_ordered(ds.instances(), |z| {
        let fwd = run_forward(spec, theta, &z.features);
        let (lse, _) = softmax_stats(&fwd.logits);
        lse - fwd.logits[z.label]
    });
    Ok(losses.iter().sum::<f64>() / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn inst(id: usize, features: Vec<f64>, label: usize) -> Instance {
        Instance { id, features, label }
    }

    fn random_instance(rng: &mut ChaCha20Rng, d: usize, c: usize) -> Instance {
        inst(
            0,
            (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            rng.random_range(0..c),
        )
    }

    fn random_params(rng: &mut ChaCha20Rng, p: usize) -> ParamVector {
        ParamVector::from((0..p).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())
    }

    /// Deliberately naive softmax cross-entropy, used as the loss oracle.
    fn naive_loss(spec: &ModelSpec, theta: &[f64], z: &Instance) -> f64 {
        let fwd = run_forward(spec, theta, &z.features);
        let sum: f64 = fwd.logits.iter().map(|&l| l.exp()).sum();
        -(fwd.logits[z.label].exp() / sum).ln()
    }

    #[test]
    fn zero_params_give_uniform_softmax_loss() {
        for (c, expected) in [(2usize, 2.0f64.ln()), (10, 10.0f64.ln())] {
            let spec = ModelSpec::logistic_regression(3, c);
            let theta = ParamVector::zeros(spec.param_count());
            let z = inst(0, vec![0.3, -1.0, 2.0], c - 1);
            let l = loss(&spec, &theta, &z).unwrap();
            assert!((l - expected).abs() < 1e-15, "C={c}: {l}");
        }
    }

    #[test]
    fn loss_matches_naive_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(100);
        for _ in 0..50 {
            let spec = ModelSpec::mlp(4, vec![5], 3, Activation::Tanh);
            let theta = random_params(&mut rng, spec.param_count());
            let z = random_instance(&mut rng, 4, 3);
            let a = loss(&spec, &theta, &z).unwrap();
            let b = naive_loss(&spec, theta.values(), &z);
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            assert!(a >= 0.0 && a.is_finite());
        }
    }

    #[test]
    fn loss_is_pure() {
        let spec = ModelSpec::mlp(3, vec![4], 2, Activation::Relu);
        let theta = spec.init_params(5);
        let z = inst(0, vec![0.1, 0.2, 0.3], 1);
        let a = loss(&spec, &theta, &z).unwrap();
        let b = loss(&spec, &theta, &z).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn param_count_and_layout() {
        let spec = ModelSpec::mlp(4, vec![5, 3], 2, Activation::Relu);
        assert_eq!(spec.param_count(), (4 + 1) * 5 + (5 + 1) * 3 + (3 + 1) * 2);
        let lr = ModelSpec::logistic_regression(10, 3);
        assert_eq!(lr.param_count(), 33);
    }

    #[test]
    fn logistic_regression_gradient_closed_form() {
        // Top-layer gradient is (softmax − onehot) ⊗ x, bias is the residual.
        let spec = ModelSpec::logistic_regression(3, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let theta = random_params(&mut rng, spec.param_count());
        let z = inst(0, vec![0.5, -1.5, 2.0], 1);
        let g = grad(&spec, &theta, &z).unwrap();

        let fwd = run_forward(&spec, theta.values(), &z.features);
        let (_, probs) = softmax_stats(&fwd.logits);
        let mut resid = probs;
        resid[z.label] -= 1.0;
        for (o, &r) in resid.iter().enumerate() {
            for i in 0..3 {
                let expected = r * z.features[i];
                assert!((g.values()[o * 3 + i] - expected).abs() < 1e-15);
            }
            assert!((g.values()[6 + o] - r).abs() < 1e-15);
        }
    }

    fn central_diff_grad(spec: &ModelSpec, theta: &ParamVector, z: &Instance, eps: f64) -> ParamVector {
        let mut out = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus.values_mut()[i] += eps;
            let mut minus = theta.clone();
            minus.values_mut()[i] -= eps;
            let lp = loss(spec, &plus, z).unwrap();
            let lm = loss(spec, &minus, z).unwrap();
            out.push((lp - lm) / (2.0 * eps));
        }
        ParamVector::from(out)
    }

    fn rel_l2(a: &ParamVector, b: &ParamVector) -> f64 {
        let mut diff = a.clone();
        diff.axpy(-1.0, b);
        diff.norm() / b.norm().max(1e-12)
    }

    #[test]
    fn gradient_matches_central_difference() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for act in [Activation::Tanh, Activation::Relu] {
            for _ in 0..10 {
                let spec = ModelSpec::mlp(3, vec![4], 3, act);
                let theta = random_params(&mut rng, spec.param_count());
                let z = random_instance(&mut rng, 3, 3);
                let g = grad(&spec, &theta, &z).unwrap();
                let fd = central_diff_grad(&spec, &theta, &z, 1e-5);
                assert!(rel_l2(&fd, &g) <= 1e-6, "act {act:?}");
            }
        }
    }

    #[test]
    fn batch_grad_of_singleton_equals_grad() {
        let spec = ModelSpec::mlp(3, vec![4], 2, Activation::Tanh);
        let theta = spec.init_params(1);
        let z = inst(0, vec![0.1, -0.2, 0.3], 0);
        let g = grad(&spec, &theta, &z).unwrap();
        let bg = batch_grad(&spec, &theta, &[&z]).unwrap();
        assert_eq!(g, bg);
    }

    #[test]
    fn batch_grad_is_mean_invariant_under_duplication() {
        let spec = ModelSpec::logistic_regression(2, 2);
        let theta = spec.init_params(2);
        let z0 = inst(0, vec![1.0, 2.0], 0);
        let z1 = inst(1, vec![-1.0, 0.5], 1);
        let once = batch_grad(&spec, &theta, &[&z0, &z1]).unwrap();
        let thrice = batch_grad(&spec, &theta, &[&z0, &z1, &z0, &z1, &z0, &z1]).unwrap();
        for (a, b) in once.values().iter().zip(thrice.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_grad_matches_naive_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let spec = ModelSpec::mlp(4, vec![6], 3, Activation::Relu);
        let theta = random_params(&mut rng, spec.param_count());
        let batch: Vec<Instance> = (0..7).map(|i| {
            let mut z = random_instance(&mut rng, 4, 3);
            z.id = i;
            z
        }).collect();
        let refs: Vec<&Instance> = batch.iter().collect();
        let fast = batch_grad(&spec, &theta, &refs).unwrap();

        let mut oracle = ParamVector::zeros(theta.len());
        for z in &batch {
            oracle.axpy(1.0, &grad(&spec, &theta, z).unwrap());
        }
        oracle.scale(1.0 / batch.len() as f64);
        assert!(rel_l2(&fast, &oracle) <= 1e-14);
    }

    #[test]
    fn batch_grad_rejects_empty_batch() {
        let spec = ModelSpec::logistic_regression(2, 2);
        let theta = spec.init_params(0);
        assert!(batch_grad(&spec, &theta, &[]).is_err());
    }

    #[test]
    fn hvp_of_zero_vector_is_zero() {
        let spec = ModelSpec::mlp(3, vec![4], 2, Activation::Tanh);
        let theta = spec.init_params(3);
        let z = inst(0, vec![0.1, 0.2, -0.3], 1);
        let v = ParamVector::zeros(theta.len());
        let hv = hvp(&spec, &theta, &[&z], &v).unwrap();
        assert!(hv.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hvp_matches_finite_difference_of_gradient() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for act in [Activation::Tanh, Activation::Relu] {
            for _ in 0..10 {
                let spec = ModelSpec::mlp(3, vec![5], 3, act);
                let theta = random_params(&mut rng, spec.param_count());
                let batch: Vec<Instance> = (0..4).map(|i| {
                    let mut z = random_instance(&mut rng, 3, 3);
                    z.id = i;
                    z
                }).collect();
                let refs: Vec<&Instance> = batch.iter().collect();
                let v = random_params(&mut rng, theta.len());
                let eps = 1e-4 * (1.0 + theta.norm()) / (1.0 + v.norm());
                let analytic = hvp(&spec, &theta, &refs, &v).unwrap();
                let fd = hvp_fd(&spec, &theta, &refs, &v, eps).unwrap();
                let err = rel_l2(&fd, &analytic);
                assert!(err <= 1e-5, "act {act:?}: rel err {err}");
            }
        }
    }

    #[test]
    fn hvp_is_symmetric_and_linear() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let spec = ModelSpec::mlp(4, vec![5], 3, Activation::Tanh);
        let theta = random_params(&mut rng, spec.param_count());
        let batch: Vec<Instance> = (0..3).map(|i| {
            let mut z = random_instance(&mut rng, 4, 3);
            z.id = i;
            z
        }).collect();
        let refs: Vec<&Instance> = batch.iter().collect();
        for _ in 0..20 {
            let u = random_params(&mut rng, theta.len());
            let v = random_params(&mut rng, theta.len());
            let hu = hvp(&spec, &theta, &refs, &u).unwrap();
            let hv = hvp(&spec, &theta, &refs, &v).unwrap();
            let uhv = u.dot(&hv);
            let vhu = v.dot(&hu);
            assert!((uhv - vhu).abs() <= 1e-10 * (1.0 + uhv.abs()), "{uhv} vs {vhu}");

            let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mut combo = ParamVector::zeros(theta.len());
            combo.axpy(alpha, &u);
            combo.axpy(beta, &v);
            let h_combo = hvp(&spec, &theta, &refs, &combo).unwrap();
            let mut expected = ParamVector::zeros(theta.len());
            expected.axpy(alpha, &hu);
            expected.axpy(beta, &hv);
            assert!(rel_l2(&h_combo, &expected) <= 1e-10);
        }
    }

    #[test]
    fn logistic_regression_hessian_is_psd() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let spec = ModelSpec::logistic_regression(4, 3);
        let theta = random_params(&mut rng, spec.param_count());
        let batch: Vec<Instance> = (0..6).map(|i| {
            let mut z = random_instance(&mut rng, 4, 3);
            z.id = i;
            z
        }).collect();
        let refs: Vec<&Instance> = batch.iter().collect();
        for _ in 0..30 {
            let v = random_params(&mut rng, theta.len());
            let hv = hvp(&spec, &theta, &refs, &v).unwrap();
            assert!(v.dot(&hv) >= -1e-12);
        }
    }

    #[test]
    fn hvp_fd_rejects_zero_step() {
        let spec = ModelSpec::logistic_regression(2, 2);
        let theta = spec.init_params(0);
        let z = inst(0, vec![1.0, 1.0], 0);
        let v = ParamVector::zeros(theta.len());
        let err = hvp_fd(&spec, &theta, &[&z], &v, 0.0).unwrap_err();
        assert!(err.to_string().contains("zero step"));
    }

    #[test]
    fn accuracy_at_zero_params_follows_tie_rule() {
        // All logits equal → everything predicted class 0.
        let instances = vec![
            inst(0, vec![1.0], 0),
            inst(1, vec![2.0], 1),
            inst(2, vec![3.0], 1),
            inst(3, vec![4.0], 0),
        ];
        let ds = Dataset::new(instances, 2, "test").unwrap();
        let spec = ModelSpec::logistic_regression(1, 2);
        let theta = ParamVector::zeros(spec.param_count());
        let acc = predict_accuracy(&spec, &theta, &ds).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec::mlp(8, vec![4], 2, Activation::Relu);
        let a = spec.init_params(9);
        let b = spec.init_params(9);
        assert_eq!(a, b);
        assert_ne!(a, spec.init_params(10));
        let lim0 = (6.0 / (8 + 4) as f64).sqrt();
        assert!(a.values()[..9 * 4].iter().all(|x| x.abs() < lim0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let spec = ModelSpec::logistic_regression(3, 2);
        let theta = ParamVector::zeros(5);
        let z = inst(0, vec![1.0, 2.0, 3.0], 0);
        assert!(matches!(loss(&spec, &theta, &z), Err(Error::Dimension(_))));
        let theta = spec.init_params(0);
        let bad = inst(0, vec![1.0], 0);
        assert!(matches!(loss(&spec, &theta, &bad), Err(Error::Dimension(_))));
        let mut nan = spec.init_params(0);
        nan.values_mut()[0] = f64::NAN;
        assert!(loss(&spec, &nan, &z).is_err());
    }
}
