//! MLP and GRU primitives with hand-written exact gradients.
//!
//! This is not a general autodiff system. It covers exactly what the
//! platform trains: feed-forward nets, a GRU cell, and the second-order
//! path needed by the critic gradient penalty. Everything is fp64 and all
//! reductions accumulate leftmost-first, so evaluation is bit-deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParameterSet, Tensor};
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    #[serde(rename = "none")]
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// First derivative at pre-activation x.
    #[inline]
    pub fn d(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative at pre-activation x (zero a.e. for relu).
    #[inline]
    pub fn dd(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::Identity => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(sigmoid(x)).
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// MLP

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::arg("MlpSpec needs an input width and at least one layer"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::arg("MlpSpec widths must be positive"));
        }
        Ok(MlpSpec {
            widths,
            hidden,
            output,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn act(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.w")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.b")
    }

    /// Glorot-uniform weights, zero biases, from the given stream.
    pub fn init_params(&self, rng: &mut Rng) -> ParameterSet {
        let mut params = ParameterSet::new();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            params.insert(
                Self::weight_name(l),
                Tensor::matrix(fan_out, fan_in, data).unwrap(),
            );
            params.insert(Self::bias_name(l), Tensor::zeros(vec![fan_out]));
        }
        params
    }

    fn check_params(&self, params: &ParameterSet) -> Result<()> {
        for l in 0..self.num_layers() {
            let w = params.require(&Self::weight_name(l))?;
            if w.shape() != [self.widths[l + 1], self.widths[l]] {
                return Err(Error::dim(format!(
                    "layer {l} weight shape {:?}, expected [{}, {}]",
                    w.shape(),
                    self.widths[l + 1],
                    self.widths[l]
                )));
            }
            let b = params.require(&Self::bias_name(l))?;
            if b.shape() != [self.widths[l + 1]] {
                return Err(Error::dim(format!("layer {l} bias shape {:?}", b.shape())));
            }
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParameterSet, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(params, input)?.output().clone())
    }

    pub fn forward_cached(&self, params: &ParameterSet, input: &Tensor) -> Result<MlpCache> {
        self.check_params(params)?;
        let (batch, width) = input.as_matrix_shape();
        if width != self.input_width() {
            return Err(Error::dim(format!(
                "input width {width}, expected {}",
                self.input_width()
            )));
        }
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut act = Vec::with_capacity(self.num_layers() + 1);
        act.push(Tensor::matrix(batch, width, input.data().to_vec())?);
        for l in 0..self.num_layers() {
            let w = params.require(&Self::weight_name(l))?;
            let b = params.require(&Self::bias_name(l))?;
            let z = linear_forward(&act[l], w, b);
            let a = elementwise(&z, |x| self.act(l).apply(x));
            pre.push(z);
            act.push(a);
        }
        Ok(MlpCache {
            spec: self.clone(),
            pre,
            act,
        })
    }
}

/// Activations cached by a forward pass; consumed by backward.
pub struct MlpCache {
    spec: MlpSpec,
    /// Pre-activations z_l per layer, batch x width.
    pre: Vec<Tensor>,
    /// act[0] = input, act[l] = post-activation of layer l-1.
    act: Vec<Tensor>,
}

impl MlpCache {
    pub fn output(&self) -> &Tensor {
        self.act.last().unwrap()
    }

    /// Reverse pass. `grad_out` has the output's batch x width shape.
    /// Returns parameter gradients (names mirroring the parameters) and the
    /// gradient with respect to the input.
    pub fn backward(&self, params: &ParameterSet, grad_out: &Tensor) -> Result<(ParameterSet, Tensor)> {
        let out = self.output();
        if grad_out.as_matrix_shape() != out.as_matrix_shape() {
            return Err(Error::dim(format!(
                "grad_out shape {:?}, expected {:?}",
                grad_out.shape(),
                out.shape()
            )));
        }
        let mut grads = ParameterSet::new();
        let mut upstream = grad_out.clone();
        for l in (0..self.spec.num_layers()).rev() {
            let z = &self.pre[l];
            let a_prev = &self.act[l];
            let act = self.spec.act(l);
            // dL/dz = dL/da * act'(z)
            let dz = mul_map(&upstream, z, |g, zv| g * act.d(zv));
            let w = params.require(&MlpSpec::weight_name(l))?;
            let (wg, bg, prev) = linear_backward(&dz, a_prev, w);
            grads.insert(MlpSpec::weight_name(l), wg);
            grads.insert(MlpSpec::bias_name(l), bg);
            upstream = prev;
        }
        Ok((grads, upstream))
    }
}

/// Forward + reverse with a scalar loss head applied to the output.
/// `loss_tail` maps the network output to (loss value, dloss/doutput).
pub fn param_gradients<F>(
    spec: &MlpSpec,
    params: &ParameterSet,
    input: &Tensor,
    loss_tail: F,
) -> Result<(f64, ParameterSet)>
where
    F: FnOnce(&Tensor) -> Result<(f64, Tensor)>,
{
    let cache = spec.forward_cached(params, input)?;
    let (loss, grad_out) = loss_tail(cache.output())?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss value {loss}")));
    }
    let (grads, _) = cache.backward(params, &grad_out)?;
    Ok((loss, grads))
}

/// Gradient of a scalar-output network with respect to its input, one row
/// per batch row.
pub fn input_gradient(spec: &MlpSpec, params: &ParameterSet, input: &Tensor) -> Result<Tensor> {
    if spec.output_width() != 1 {
        return Err(Error::arg(format!(
            "input_gradient needs a scalar-output network, got width {}",
            spec.output_width()
        )));
    }
    let cache = spec.forward_cached(params, input)?;
    let batch = cache.output().rows();
    let ones = Tensor::matrix(batch, 1, vec![1.0; batch])?;
    let (_, gin) = cache.backward(params, &ones)?;
    Ok(gin)
}

/// Gradient penalty `lambda * mean_b (||grad_x D(x_b)|| - 1)^2` and its exact
/// gradient with respect to the critic parameters.
///
/// The parameter gradient is computed by differentiating the scalar
/// `sum_b <grad_x D(x_b), r_b>` (with `r = dP/dg` held fixed) through a
/// tangent-augmented forward pass, which is the exact chain rule for the
/// second-order path.
pub fn gradient_penalty_grad(
    spec: &MlpSpec,
    params: &ParameterSet,
    x_hat: &Tensor,
    lambda: f64,
) -> Result<(f64, ParameterSet)> {
    if lambda < 0.0 {
        return Err(Error::arg(format!("negative gradient penalty lambda {lambda}")));
    }
    if spec.output_width() != 1 {
        return Err(Error::arg("gradient penalty needs a scalar-output critic"));
    }
    let zeros = {
        let mut g = ParameterSet::new();
        for (name, t) in params.iter() {
            g.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        g
    };
    if lambda == 0.0 {
        return Ok((0.0, zeros));
    }

    let cache = spec.forward_cached(params, x_hat)?;
    let nl = spec.num_layers();
    let batch = x_hat.rows();

    // Reverse channel: per-row input gradient g.
    let ones = Tensor::matrix(batch, 1, vec![1.0; batch])?;
    let (_, g) = cache.backward(params, &ones)?;

    // Penalty and dP/dg.
    let d = g.cols();
    let mut penalty = 0.0;
    let mut r = Tensor::zeros(vec![batch, d]);
    let scale = lambda / batch as f64;
    for b in 0..batch {
        let row = g.row(b);
        let mut sq = 0.0;
        for &v in row {
            sq += v * v;
        }
        let norm = sq.sqrt();
        penalty += scale * (norm - 1.0) * (norm - 1.0);
        if norm > 1e-12 {
            let c = scale * 2.0 * (norm - 1.0) / norm;
            let out = &mut r.data_mut()[b * d..(b + 1) * d];
            for (o, &v) in out.iter_mut().zip(row) {
                *o = c * v;
            }
        }
    }

    // Tangent pass: t_0 = r, z_dot_l = t_{l-1} W^T, t_l = act'(z_l) * z_dot_l.
    let mut z_dot = Vec::with_capacity(nl);
    let mut tang = Vec::with_capacity(nl + 1);
    tang.push(r);
    for l in 0..nl {
        let w = params.require(&MlpSpec::weight_name(l))?;
        let zd = linear_forward_nobias(&tang[l], w);
        let t = mul_map(&zd, &cache.pre[l], |zdv, zv| spec.act(l).d(zv) * zdv);
        z_dot.push(zd);
        tang.push(t);
    }

    // Reverse over (primal, tangent): seed t_bar_L = 1 per row.
    let mut grads = zeros;
    let mut a_bar = Tensor::zeros(vec![batch, spec.output_width()]);
    let mut t_bar = Tensor::matrix(batch, 1, vec![1.0; batch])?;
    for l in (0..nl).rev() {
        let act = spec.act(l);
        let z = &cache.pre[l];
        // z_bar = act'(z) * a_bar + act''(z) * z_dot * t_bar
        let mut z_bar = Tensor::zeros(vec![batch, spec.widths[l + 1]]);
        {
            let zb = z_bar.data_mut();
            let ab = a_bar.data();
            let tb = t_bar.data();
            let zd = z_dot[l].data();
            let zp = z.data();
            for i in 0..zb.len() {
                zb[i] = act.d(zp[i]) * ab[i] + act.dd(zp[i]) * zd[i] * tb[i];
            }
        }
        let zd_bar = mul_map(&t_bar, z, |t, zv| t * act.d(zv));
        let w = params.require(&MlpSpec::weight_name(l))?;
        // W_bar += z_bar^T a_{l-1} + zd_bar^T t_{l-1}; b_bar += colsum(z_bar).
        let (mut wg, bg, a_prev_bar) = linear_backward(&z_bar, &cache.act[l], w);
        let (wg2, _, t_prev_bar) = linear_backward(&zd_bar, &tang[l], w);
        for (a, b) in wg.data_mut().iter_mut().zip(wg2.data()) {
            *a += b;
        }
        grads.get_mut(&MlpSpec::weight_name(l)).unwrap().data_mut()
            .iter_mut()
            .zip(wg.data())
            .for_each(|(a, b)| *a += b);
        grads.get_mut(&MlpSpec::bias_name(l)).unwrap().data_mut()
            .iter_mut()
            .zip(bg.data())
            .for_each(|(a, b)| *a += b);
        a_bar = a_prev_bar;
        t_bar = t_prev_bar;
    }
    Ok((penalty, grads))
}

// ---------------------------------------------------------------------------
// Shared linear-algebra kernels. w is row-major [out, in].

/// z[b][o] = sum_i a[b][i] w[o][i] + bias[o]
pub fn linear_forward(a: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let (batch, input) = a.as_matrix_shape();
    let out = w.rows();
    debug_assert_eq!(w.cols(), input);
    let mut z = Tensor::zeros(vec![batch, out]);
    let zd = z.data_mut();
    for b in 0..batch {
        let arow = a.row(b);
        let zrow = &mut zd[b * out..(b + 1) * out];
        for o in 0..out {
            let wrow = w.row(o);
            let mut acc = 0.0;
            for i in 0..input {
                acc += arow[i] * wrow[i];
            }
            zrow[o] = acc + bias.data()[o];
        }
    }
    z
}

fn linear_forward_nobias(a: &Tensor, w: &Tensor) -> Tensor {
    let (batch, input) = a.as_matrix_shape();
    let out = w.rows();
    let mut z = Tensor::zeros(vec![batch, out]);
    let zd = z.data_mut();
    for b in 0..batch {
        let arow = a.row(b);
        let zrow = &mut zd[b * out..(b + 1) * out];
        for o in 0..out {
            let wrow = w.row(o);
            let mut acc = 0.0;
            for i in 0..input {
                acc += arow[i] * wrow[i];
            }
            zrow[o] = acc;
        }
    }
    z
}

/// Given dL/dz, the layer input a, and w, return (dL/dw, dL/db, dL/da).
fn linear_backward(dz: &Tensor, a: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, out) = dz.as_matrix_shape();
    let input = w.cols();
    let mut wg = Tensor::zeros(vec![out, input]);
    let mut bg = Tensor::zeros(vec![out]);
    let mut ag = Tensor::zeros(vec![batch, input]);
    {
        let wgd = wg.data_mut();
        for b in 0..batch {
            let dzrow = dz.row(b);
            let arow = a.row(b);
            for o in 0..out {
                let c = dzrow[o];
                if c == 0.0 {
                    continue;
                }
                let wrow = &mut wgd[o * input..(o + 1) * input];
                for i in 0..input {
                    wrow[i] += c * arow[i];
                }
            }
        }
    }
    {
        let bgd = bg.data_mut();
        for b in 0..batch {
            let dzrow = dz.row(b);
            for o in 0..out {
                bgd[o] += dzrow[o];
            }
        }
    }
    {
        let agd = ag.data_mut();
        for b in 0..batch {
            let dzrow = dz.row(b);
            let arow = &mut agd[b * input..(b + 1) * input];
            for o in 0..out {
                let c = dzrow[o];
                if c == 0.0 {
                    continue;
                }
                let wrow = w.row(o);
                for i in 0..input {
                    arow[i] += c * wrow[i];
                }
            }
        }
    }
    (wg, bg, ag)
}

fn elementwise(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = Tensor::zeros(t.shape().to_vec());
    for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
        *o = f(v);
    }
    out
}

fn mul_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    let mut out = Tensor::zeros(a.shape().to_vec());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = f(x, y);
    }
    out
}

// ---------------------------------------------------------------------------
// GRU

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruSpec {
    pub input_width: usize,
    pub hidden_width: usize,
}

const GRU_GATES: [&str; 3] = ["z", "r", "n"];

impl GruSpec {
    pub fn new(input_width: usize, hidden_width: usize) -> Result<Self> {
        if input_width == 0 || hidden_width == 0 {
            return Err(Error::arg("GruSpec widths must be positive"));
        }
        Ok(GruSpec {
            input_width,
            hidden_width,
        })
    }

    pub fn init_params(&self, rng: &mut Rng) -> ParameterSet {
        let mut params = ParameterSet::new();
        for gate in GRU_GATES {
            let bw = (6.0 / (self.input_width + self.hidden_width) as f64).sqrt();
            let wdata: Vec<f64> = (0..self.hidden_width * self.input_width)
                .map(|_| rng.gen_range(-bw..bw))
                .collect();
            let bu = (6.0 / (2 * self.hidden_width) as f64).sqrt();
            let udata: Vec<f64> = (0..self.hidden_width * self.hidden_width)
                .map(|_| rng.gen_range(-bu..bu))
                .collect();
            params.insert(
                format!("gru.w{gate}"),
                Tensor::matrix(self.hidden_width, self.input_width, wdata).unwrap(),
            );
            params.insert(
                format!("gru.u{gate}"),
                Tensor::matrix(self.hidden_width, self.hidden_width, udata).unwrap(),
            );
            params.insert(format!("gru.b{gate}"), Tensor::zeros(vec![self.hidden_width]));
        }
        params
    }

    fn gate(&self, params: &ParameterSet, gate: &str) -> Result<(Tensor, Tensor, Tensor)> {
        let w = params.require(&format!("gru.w{gate}"))?.clone();
        let u = params.require(&format!("gru.u{gate}"))?.clone();
        let b = params.require(&format!("gru.b{gate}"))?.clone();
        if w.shape() != [self.hidden_width, self.input_width]
            || u.shape() != [self.hidden_width, self.hidden_width]
            || b.shape() != [self.hidden_width]
        {
            return Err(Error::dim(format!("gru gate {gate} parameter shapes")));
        }
        Ok((w, u, b))
    }

    /// One step of the standard GRU recurrence on a batch.
    pub fn step(&self, params: &ParameterSet, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
        Ok(self.step_cached(params, x, h_prev)?.h)
    }

    fn step_cached(&self, params: &ParameterSet, x: &Tensor, h_prev: &Tensor) -> Result<GruStepCache> {
        let (batch, xin) = x.as_matrix_shape();
        if xin != self.input_width {
            return Err(Error::dim(format!(
                "gru input width {xin}, expected {}",
                self.input_width
            )));
        }
        if h_prev.as_matrix_shape() != (batch, self.hidden_width) {
            return Err(Error::dim("gru hidden state shape".to_string()));
        }
        let (wz, uz, bz) = self.gate(params, "z")?;
        let (wr, ur, br) = self.gate(params, "r")?;
        let (wn, un, bn) = self.gate(params, "n")?;
        let zpre = add(&linear_forward(x, &wz, &bz), &linear_forward_nobias(h_prev, &uz));
        let rpre = add(&linear_forward(x, &wr, &br), &linear_forward_nobias(h_prev, &ur));
        let z = elementwise(&zpre, sigmoid);
        let r = elementwise(&rpre, sigmoid);
        let rh = mul_map(&r, h_prev, |a, b| a * b);
        let npre = add(&linear_forward(x, &wn, &bn), &linear_forward_nobias(&rh, &un));
        let n = elementwise(&npre, f64::tanh);
        // h = (1 - z) * n + z * h_prev
        let mut h = Tensor::zeros(vec![batch, self.hidden_width]);
        {
            let hd = h.data_mut();
            let zd = z.data();
            let nd = n.data();
            let hp = h_prev.data();
            for i in 0..hd.len() {
                hd[i] = (1.0 - zd[i]) * nd[i] + zd[i] * hp[i];
            }
        }
        Ok(GruStepCache {
            x: x.clone(),
            h_prev: h_prev.clone(),
            z,
            r,
            rh,
            n,
            h,
        })
    }

    /// Run a full sequence, returning every hidden state. Empty input gives
    /// an empty output.
    pub fn sequence(
        &self,
        params: &ParameterSet,
        inputs: &[Tensor],
        h0: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let mut h = h0.clone();
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            h = self.step(params, x, &h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn sequence_cached(
        &self,
        params: &ParameterSet,
        inputs: &[Tensor],
        h0: &Tensor,
    ) -> Result<GruSeqCache> {
        let mut h = h0.clone();
        let mut steps = Vec::with_capacity(inputs.len());
        for x in inputs {
            let c = self.step_cached(params, x, &h)?;
            h = c.h.clone();
            steps.push(c);
        }
        Ok(GruSeqCache {
            spec: *self,
            steps,
        })
    }
}

struct GruStepCache {
    x: Tensor,
    h_prev: Tensor,
    z: Tensor,
    r: Tensor,
    rh: Tensor,
    n: Tensor,
    h: Tensor,
}

pub struct GruSeqCache {
    spec: GruSpec,
    steps: Vec<GruStepCache>,
}

impl GruSeqCache {
    pub fn hidden(&self, t: usize) -> &Tensor {
        &self.steps[t].h
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Backpropagation through time. `grad_h[t]` is dL/dh_t (may be zero
    /// tensors for positions without a direct loss). Returns parameter
    /// gradients, per-step input gradients, and dL/dh0.
    pub fn backward(
        &self,
        params: &ParameterSet,
        grad_h: &[Tensor],
    ) -> Result<(ParameterSet, Vec<Tensor>, Tensor)> {
        if grad_h.len() != self.steps.len() {
            return Err(Error::dim("grad_h length must match sequence length"));
        }
        let spec = self.spec;
        let mut grads = ParameterSet::new();
        for gate in GRU_GATES {
            grads.insert(
                format!("gru.w{gate}"),
                Tensor::zeros(vec![spec.hidden_width, spec.input_width]),
            );
            grads.insert(
                format!("gru.u{gate}"),
                Tensor::zeros(vec![spec.hidden_width, spec.hidden_width]),
            );
            grads.insert(format!("gru.b{gate}"), Tensor::zeros(vec![spec.hidden_width]));
        }
        let (wz, uz, _) = spec.gate(params, "z")?;
        let (wr, ur, _) = spec.gate(params, "r")?;
        let (wn, un, _) = spec.gate(params, "n")?;
        let batch = if self.steps.is_empty() {
            0
        } else {
            self.steps[0].h.rows()
        };
        let mut x_grads = vec![Tensor::zeros(vec![1, 1]); self.steps.len()];
        let mut h_bar = Tensor::zeros(vec![batch.max(1), spec.hidden_width]);
        if self.steps.is_empty() {
            return Ok((grads, x_grads, h_bar));
        }
        for t in (0..self.steps.len()).rev() {
            let step = &self.steps[t];
            // Accumulate the direct loss gradient on h_t.
            let hb = add(&h_bar, &grad_h[t]);
            // n_bar = hb*(1-z); z_bar = hb*(h_prev - n); carry hb*z to h_prev.
            let n_bar = mul_map(&hb, &step.z, |g, z| g * (1.0 - z));
            let z_bar = {
                let mut out = Tensor::zeros(hb.shape().to_vec());
                let od = out.data_mut();
                let g = hb.data();
                let hp = step.h_prev.data();
                let nd = step.n.data();
                for i in 0..od.len() {
                    od[i] = g[i] * (hp[i] - nd[i]);
                }
                out
            };
            let mut h_prev_bar = mul_map(&hb, &step.z, |g, z| g * z);

            // Candidate gate: npre_bar = n_bar * (1 - n^2).
            let npre_bar = mul_map(&n_bar, &step.n, |g, n| g * (1.0 - n * n));
            let (wng, bng, xg_n) = linear_backward(&npre_bar, &step.x, &wn);
            let (ung, _, rh_bar) = linear_backward(&npre_bar, &step.rh, &un);
            accumulate(&mut grads, "gru.wn", &wng);
            accumulate(&mut grads, "gru.un", &ung);
            accumulate(&mut grads, "gru.bn", &bng);
            let r_bar = mul_map(&rh_bar, &step.h_prev, |g, h| g * h);
            add_into(&mut h_prev_bar, &mul_map(&rh_bar, &step.r, |g, r| g * r));

            // Update gate: zpre_bar = z_bar * z * (1 - z).
            let zpre_bar = mul_map(&z_bar, &step.z, |g, z| g * z * (1.0 - z));
            let (wzg, bzg, xg_z) = linear_backward(&zpre_bar, &step.x, &wz);
            let (uzg, _, hz_bar) = linear_backward(&zpre_bar, &step.h_prev, &uz);
            accumulate(&mut grads, "gru.wz", &wzg);
            accumulate(&mut grads, "gru.uz", &uzg);
            accumulate(&mut grads, "gru.bz", &bzg);
            add_into(&mut h_prev_bar, &hz_bar);

            // Reset gate: rpre_bar = r_bar * r * (1 - r).
            let rpre_bar = mul_map(&r_bar, &step.r, |g, r| g * r * (1.0 - r));
            let (wrg, brg, xg_r) = linear_backward(&rpre_bar, &step.x, &wr);
            let (urg, _, hr_bar) = linear_backward(&rpre_bar, &step.h_prev, &ur);
            accumulate(&mut grads, "gru.wr", &wrg);
            accumulate(&mut grads, "gru.ur", &urg);
            accumulate(&mut grads, "gru.br", &brg);
            add_into(&mut h_prev_bar, &hr_bar);

            let mut xg = xg_n;
            add_into(&mut xg, &xg_z);
            add_into(&mut xg, &xg_r);
            x_grads[t] = xg;
            h_bar = h_prev_bar;
        }
        Ok((grads, x_grads, h_bar))
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    mul_map(a, b, |x, y| x + y)
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn accumulate(grads: &mut ParameterSet, name: &str, delta: &Tensor) {
    let t = grads.get_mut(name).unwrap();
    for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
        *a += b;
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: ParameterSet,
    v: ParameterSet,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        AdamState {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Standard bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        if !params.same_shapes(grads) {
            return Err(Error::dim("adam: gradient shapes do not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).unwrap();
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gd[i];
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
