//! Dueling Q-network: a multilayer perceptron with layer normalization,
//! manual reverse-mode gradients, an ADAM optimizer, and bitwise target
//! synchronization and checkpointing.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_LR: f64 = 5e-4;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Huber transition point between quadratic and linear regimes.
pub const HUBER_THRESHOLD: f64 = 1.0;

/// Layer-norm variance floor. Kept tiny so normalized activations carry unit
/// variance to high accuracy; degenerate constant inputs still normalize to
/// zero because the centered values vanish first.
const LN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Huber,
    Mse,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Huber => write!(f, "huber"),
            LossKind::Mse => write!(f, "mse"),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "huber" => Ok(LossKind::Huber),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::invalid_argument(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Architecture descriptor: input width, hidden sizes, and action count.
/// Goal conditioning is plain concatenation, so multi-goal networks simply
/// use a wider input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_actions: usize,
}

impl Arch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, n_actions: usize) -> Result<Self> {
        if input_dim == 0 || n_actions == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid_argument("network dimensions must be positive"));
        }
        Ok(Arch { input_dim, hidden, n_actions })
    }

    fn head_in_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

/// Slices of the flat parameter vector for one hidden block.
#[derive(Clone, Debug)]
struct LayerSeg {
    w: Range<usize>,
    b: Range<usize>,
    gain: Range<usize>,
    offset: Range<usize>,
    d_in: usize,
    d_out: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    layers: Vec<LayerSeg>,
    value_w: Range<usize>,
    value_b: usize,
    adv_w: Range<usize>,
    adv_b: Range<usize>,
    n_params: usize,
}

fn layout(arch: &Arch) -> Layout {
    let mut pos = 0usize;
    let mut take = |n: usize| {
        let r = pos..pos + n;
        pos += n;
        r
    };
    let mut layers = Vec::with_capacity(arch.hidden.len());
    let mut d_in = arch.input_dim;
    for &d_out in &arch.hidden {
        layers.push(LayerSeg {
            w: take(d_out * d_in),
            b: take(d_out),
            gain: take(d_out),
            offset: take(d_out),
            d_in,
            d_out,
        });
        d_in = d_out;
    }
    let head = arch.head_in_dim();
    let value_w = take(head);
    let value_b = take(1).start;
    let adv_w = take(arch.n_actions * head);
    let adv_b = take(arch.n_actions);
    Layout { layers, value_w, value_b, adv_w, adv_b, n_params: pos }
}

fn linear_forward(w: &[f64], b: &[f64], x: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(d_out);
    for o in 0..d_out {
        let row = &w[o * d_in..(o + 1) * d_in];
        let mut acc = b[o];
        for i in 0..d_in {
            acc += row[i] * x[i];
        }
        z.push(acc);
    }
    z
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    w: &[f64],
    x: &[f64],
    dz: &[f64],
    d_out: usize,
    d_in: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for o in 0..d_out {
        let g = dz[o];
        db[o] += g;
        let row = &w[o * d_in..(o + 1) * d_in];
        let drow = &mut dw[o * d_in..(o + 1) * d_in];
        for i in 0..d_in {
            drow[i] += g * x[i];
            dx[i] += row[i] * g;
        }
    }
}

/// Returns the normalized activations (pre gain/offset) and 1/std.
fn layer_norm_forward(z: &[f64]) -> (Vec<f64>, f64) {
    let n = z.len() as f64;
    let mu = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    (z.iter().map(|v| (v - mu) * inv_std).collect(), inv_std)
}

fn layer_norm_backward(zhat: &[f64], inv_std: f64, dzhat: &[f64]) -> Vec<f64> {
    let n = zhat.len() as f64;
    let mean_d = dzhat.iter().sum::<f64>() / n;
    let mean_dz = zhat.iter().zip(dzhat).map(|(a, b)| a * b).sum::<f64>() / n;
    zhat.iter()
        .zip(dzhat)
        .map(|(&zh, &d)| inv_std * (d - mean_d - zh * mean_dz))
        .collect()
}

/// Q(s, a) = V(s) + A(s, a) - mean_a A(s, a).
fn dueling_combine(value: f64, adv: &[f64]) -> Vec<f64> {
    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
    adv.iter().map(|a| value + a - mean).collect()
}

fn dueling_backward(dq: &[f64]) -> (f64, Vec<f64>) {
    let total: f64 = dq.iter().sum();
    let mean = total / dq.len() as f64;
    (total, dq.iter().map(|d| d - mean).collect())
}

fn loss_value(kind: LossKind, delta: f64) -> f64 {
    match kind {
        LossKind::Huber => {
            let a = delta.abs();
            if a <= HUBER_THRESHOLD {
                0.5 * delta * delta
            } else {
                HUBER_THRESHOLD * (a - 0.5 * HUBER_THRESHOLD)
            }
        }
        LossKind::Mse => 0.5 * delta * delta,
    }
}

/// d(loss)/d(delta).
fn loss_slope(kind: LossKind, delta: f64) -> f64 {
    match kind {
        LossKind::Huber => delta.clamp(-HUBER_THRESHOLD, HUBER_THRESHOLD),
        LossKind::Mse => delta,
    }
}

/// ADAM accumulators shaped like the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            lr: ADAM_LR,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Per-sample forward caches for the backward pass.
struct Trace {
    xs: Vec<Vec<f64>>,
    zhats: Vec<Vec<f64>>,
    inv_stds: Vec<f64>,
    ys: Vec<Vec<f64>>,
    head_in: Vec<f64>,
    q: Vec<f64>,
    value: f64,
}

/// The network: architecture, loss choice, and a flat parameter vector laid
/// out per [`layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    arch: Arch,
    loss: LossKind,
    params: Vec<f64>,
}

impl QNetwork {
    /// He-style fan-in uniform init for weights, zero biases and norm
    /// offsets, unit norm gains. Deterministic in the RNG stream.
    pub fn new(arch: Arch, loss: LossKind, rng: &mut ChaCha8Rng) -> Self {
        let lay = layout(&arch);
        let mut params = vec![0.0; lay.n_params];
        for seg in &lay.layers {
            let lim = (6.0 / seg.d_in as f64).sqrt();
            for w in &mut params[seg.w.clone()] {
                *w = rng.gen_range(-lim..lim);
            }
            for g in &mut params[seg.gain.clone()] {
                *g = 1.0;
            }
        }
        let lim = (6.0 / arch.head_in_dim() as f64).sqrt();
        for w in &mut params[lay.value_w.clone()] {
            *w = rng.gen_range(-lim..lim);
        }
        for w in &mut params[lay.adv_w.clone()] {
            *w = rng.gen_range(-lim..lim);
        }
        QNetwork { arch, loss, params }
    }

    pub fn with_seed(arch: Arch, loss: LossKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QNetwork::new(arch, loss, &mut rng)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Copies the other network's parameters bitwise (target sync).
    pub fn sync_from(&mut self, other: &QNetwork) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::invalid_argument("architecture mismatch in target sync"));
        }
        self.params.copy_from_slice(&other.params);
        Ok(())
    }

    fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.arch.input_dim {
            return Err(Error::invalid_argument(format!(
                "input has {} features, network expects {}",
                input.len(),
                self.arch.input_dim
            )));
        }
        let lay = layout(&self.arch);
        let p = &self.params;
        let n_layers = lay.layers.len();
        let mut xs = Vec::with_capacity(n_layers);
        let mut zhats = Vec::with_capacity(n_layers);
        let mut inv_stds = Vec::with_capacity(n_layers);
        let mut ys = Vec::with_capacity(n_layers);
        let mut h = input.to_vec();
        for seg in &lay.layers {
            let z = linear_forward(&p[seg.w.clone()], &p[seg.b.clone()], &h, seg.d_out, seg.d_in);
            let (zhat, inv_std) = layer_norm_forward(&z);
            let gain = &p[seg.gain.clone()];
            let offset = &p[seg.offset.clone()];
            let y: Vec<f64> =
                (0..seg.d_out).map(|i| gain[i] * zhat[i] + offset[i]).collect();
            let out: Vec<f64> = y.iter().map(|&v| v.max(0.0)).collect();
            xs.push(h);
            zhats.push(zhat);
            inv_stds.push(inv_std);
            ys.push(y);
            h = out;
        }
        let head = self.arch.head_in_dim();
        let value = {
            let w = &p[lay.value_w.clone()];
            let mut acc = p[lay.value_b];
            for i in 0..head {
                acc += w[i] * h[i];
            }
            acc
        };
        let adv = linear_forward(
            &p[lay.adv_w.clone()],
            &p[lay.adv_b.clone()],
            &h,
            self.arch.n_actions,
            head,
        );
        let q = dueling_combine(value, &adv);
        Ok(Trace { xs, zhats, inv_stds, ys, head_in: h, q, value })
    }

    /// Action values and the state value for one input row.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, f64)> {
        let t = self.forward_trace(input)?;
        Ok((t.q, t.value))
    }

    /// Convenience for goal-conditioned evaluation: state and goal features
    /// are concatenated to form the input row.
    pub fn forward_state_goal(&self, state: &[f64], goal: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut input = Vec::with_capacity(state.len() + goal.len());
        input.extend_from_slice(state);
        input.extend_from_slice(goal);
        self.forward(&input)
    }

    fn backward_one(&self, lay: &Layout, tr: &Trace, dq: &[f64], grad: &mut [f64]) {
        let p = &self.params;
        let head = self.arch.head_in_dim();
        let (dv, da) = dueling_backward(dq);
        let mut dh = vec![0.0; head];
        {
            let w = &p[lay.value_w.clone()];
            let dw = &mut grad[lay.value_w.clone()];
            for i in 0..head {
                dw[i] += dv * tr.head_in[i];
            }
            grad[lay.value_b] += dv;
            for i in 0..head {
                dh[i] += w[i] * dv;
            }
        }
        {
            let (dw, db_region) = grad[lay.adv_w.start..lay.adv_b.end]
                .split_at_mut(lay.adv_w.end - lay.adv_w.start);
            linear_backward(
                &p[lay.adv_w.clone()],
                &tr.head_in,
                &da,
                self.arch.n_actions,
                head,
                dw,
                db_region,
                &mut dh,
            );
        }
        for (idx, seg) in lay.layers.iter().enumerate().rev() {
            let y = &tr.ys[idx];
            let zhat = &tr.zhats[idx];
            let dy: Vec<f64> =
                (0..seg.d_out).map(|i| if y[i] > 0.0 { dh[i] } else { 0.0 }).collect();
            let gain = &p[seg.gain.clone()];
            let mut dzhat = vec![0.0; seg.d_out];
            for i in 0..seg.d_out {
                grad[seg.gain.start + i] += dy[i] * zhat[i];
                grad[seg.offset.start + i] += dy[i];
                dzhat[i] = dy[i] * gain[i];
            }
            let dz = layer_norm_backward(zhat, tr.inv_stds[idx], &dzhat);
            let mut dx = vec![0.0; seg.d_in];
            let (dw, db_region) =
                grad[seg.w.start..seg.b.end].split_at_mut(seg.w.end - seg.w.start);
            linear_backward(
                &p[seg.w.clone()],
                &tr.xs[idx],
                &dz,
                seg.d_out,
                seg.d_in,
                dw,
                db_region,
                &mut dx,
            );
            dh = dx;
        }
    }

    /// Weighted TD loss and its gradient over the flat parameter vector,
    /// plus |delta| per item for priority updates. No parameters change.
    pub fn loss_and_grad(
        &self,
        inputs: &[Vec<f64>],
        actions: &[usize],
        targets: &[f64],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::invalid_argument("empty training batch"));
        }
        if actions.len() != b || targets.len() != b || weights.len() != b {
            return Err(Error::invalid_argument("batch arrays must share one length"));
        }
        let lay = layout(&self.arch);
        let mut grad = vec![0.0; lay.n_params];
        let mut loss_sum = 0.0;
        let mut abs_deltas = Vec::with_capacity(b);
        let inv_b = 1.0 / b as f64;
        for i in 0..b {
            if actions[i] >= self.arch.n_actions {
                return Err(Error::invalid_argument(format!(
                    "action id {} out of range",
                    actions[i]
                )));
            }
            let tr = self.forward_trace(&inputs[i])?;
            let delta = targets[i] - tr.q[actions[i]];
            abs_deltas.push(delta.abs());
            loss_sum += weights[i] * loss_value(self.loss, delta);
            let mut dq = vec![0.0; self.arch.n_actions];
            dq[actions[i]] = -weights[i] * inv_b * loss_slope(self.loss, delta);
            self.backward_one(&lay, &tr, &dq, &mut grad);
        }
        Ok((loss_sum * inv_b, grad, abs_deltas))
    }

    /// One gradient step: reverse-mode gradients of the IS-weighted TD loss,
    /// then an ADAM update. Returns the loss and |delta| per item. On a
    /// non-finite loss or update the parameters are left at their pre-call
    /// snapshot and a training failure is returned.
    pub fn train_batch(
        &mut self,
        adam: &mut AdamState,
        inputs: &[Vec<f64>],
        actions: &[usize],
        targets: &[f64],
        weights: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        if adam.m.len() != self.params.len() {
            return Err(Error::invalid_argument("optimizer state does not match network"));
        }
        let (loss, grad, abs_deltas) = self.loss_and_grad(inputs, actions, targets, weights)?;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "non-finite loss {loss}; parameters left at the pre-update snapshot"
            )));
        }
        let snapshot = self.params.clone();
        let adam_snapshot = (adam.t, adam.m.clone(), adam.v.clone());
        adam.apply(&mut self.params, &grad);
        if self.params.iter().any(|p| !p.is_finite()) {
            self.params = snapshot;
            (adam.t, adam.m, adam.v) = adam_snapshot;
            return Err(Error::TrainingFailure(
                "update produced non-finite parameters; rolled back".into(),
            ));
        }
        Ok((loss, abs_deltas))
    }
}

/// Writes a versioned text checkpoint: architecture, loss kind, parameters,
/// ADAM state, and an opaque caller-supplied RNG state line. Floats use 17
/// significant digits so the round-trip is bitwise.
pub fn write_checkpoint(
    path: &Path,
    net: &QNetwork,
    adam: &AdamState,
    rng_state: &str,
) -> Result<()> {
    if rng_state.contains('\n') {
        return Err(Error::invalid_argument("rng state must be a single line"));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "texform-qnet-v1").map_err(io_err)?;
    writeln!(w, "loss {}", net.loss).map_err(io_err)?;
    writeln!(w, "input_dim {}", net.arch.input_dim).map_err(io_err)?;
    write!(w, "hidden").map_err(io_err)?;
    for h in &net.arch.hidden {
        write!(w, " {h}").map_err(io_err)?;
    }
    writeln!(w).map_err(io_err)?;
    writeln!(w, "n_actions {}", net.arch.n_actions).map_err(io_err)?;
    writeln!(
        w,
        "adam {} {:.17e} {:.17e} {:.17e} {:.17e}",
        adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps
    )
    .map_err(io_err)?;
    for (name, data) in
        [("params", &net.params), ("adam_m", &adam.m), ("adam_v", &adam.v)]
    {
        writeln!(w, "{name} {}", data.len()).map_err(io_err)?;
        for x in data.iter() {
            writeln!(w, "{x:.17e}").map_err(io_err)?;
        }
    }
    writeln!(w, "rng {rng_state}").map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Loads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<(QNetwork, AdamState, String)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::parse(path, "unexpected end of checkpoint"))?
            .map_err(|e| Error::io(path, e))
    };
    let header = next()?;
    if header != "texform-qnet-v1" {
        return Err(Error::parse(path, format!("unknown checkpoint version '{header}'")));
    }
    let parse_err = |msg: &str| Error::parse(path, msg);
    let loss_line = next()?;
    let loss: LossKind = loss_line
        .strip_prefix("loss ")
        .ok_or_else(|| parse_err("missing loss line"))?
        .parse()?;
    let input_dim: usize = next()?
        .strip_prefix("input_dim ")
        .ok_or_else(|| parse_err("missing input_dim"))?
        .parse()
        .map_err(|_| parse_err("bad input_dim"))?;
    let hidden_line = next()?;
    let hidden_str =
        hidden_line.strip_prefix("hidden").ok_or_else(|| parse_err("missing hidden"))?;
    let hidden: Vec<usize> = hidden_str
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err("bad hidden size")))
        .collect::<Result<_>>()?;
    let n_actions: usize = next()?
        .strip_prefix("n_actions ")
        .ok_or_else(|| parse_err("missing n_actions"))?
        .parse()
        .map_err(|_| parse_err("bad n_actions"))?;
    let adam_line = next()?;
    let adam_fields: Vec<&str> = adam_line
        .strip_prefix("adam ")
        .ok_or_else(|| parse_err("missing adam line"))?
        .split_whitespace()
        .collect();
    if adam_fields.len() != 5 {
        return Err(parse_err("adam line needs 5 fields"));
    }
    let t: u64 = adam_fields[0].parse().map_err(|_| parse_err("bad adam step"))?;
    let mut hyper = [0.0f64; 4];
    for (slot, tok) in hyper.iter_mut().zip(&adam_fields[1..]) {
        *slot = tok.parse().map_err(|_| parse_err("bad adam hyperparameter"))?;
    }
    let mut read_block = |name: &str| -> Result<Vec<f64>> {
        let head = next()?;
        let count: usize = head
            .strip_prefix(name)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, format!("missing {name} block")))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?;
            data.push(
                line.trim().parse().map_err(|_| Error::parse(path, "bad float"))?,
            );
        }
        Ok(data)
    };
    let params = read_block("params")?;
    let m = read_block("adam_m")?;
    let v = read_block("adam_v")?;
    let rng_line = next()?;
    let rng_state = rng_line
        .strip_prefix("rng")
        .map(|s| s.strip_prefix(' ').unwrap_or(s).to_string())
        .ok_or_else(|| parse_err("missing rng line"))?;
    let arch = Arch::new(input_dim, hidden, n_actions)?;
    let expected = layout(&arch).n_params;
    if params.len() != expected || m.len() != expected || v.len() != expected {
        return Err(parse_err("tensor sizes do not match the architecture"));
    }
    let net = QNetwork { arch, loss, params };
    let adam = AdamState {
        lr: hyper[0],
        beta1: hyper[1],
        beta2: hyper[2],
        eps: hyper[3],
        t,
        m,
        v,
    };
    Ok((net, adam, rng_state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch(
        net: &QNetwork,
        n: usize,
        seed: u64,
    ) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = net.arch().input_dim;
        let a = net.arch().n_actions;
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..a)).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        (inputs, actions, targets, weights)
    }

    fn fd_max_rel_err(
        net: &QNetwork,
        inputs: &[Vec<f64>],
        actions: &[usize],
        targets: &[f64],
        weights: &[f64],
    ) -> f64 {
        let (_, grad, _) = net.loss_and_grad(inputs, actions, targets, weights).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        let mut probe = net.clone();
        for i in 0..net.n_params() {
            let base = net.params()[i];
            probe.params_mut()[i] = base + h;
            let (lp, _, _) = probe.loss_and_grad(inputs, actions, targets, weights).unwrap();
            probe.params_mut()[i] = base - h;
            let (lm, _, _) = probe.loss_and_grad(inputs, actions, targets, weights).unwrap();
            probe.params_mut()[i] = base;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs());
            if denom > 1e-8 {
                worst = worst.max((fd - grad[i]).abs() / denom);
            } else {
                assert!((fd - grad[i]).abs() < 1e-9);
            }
        }
        worst
    }

    #[test]
    fn linear_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d_out, d_in) = (3usize, 4usize);
        let w: Vec<f64> = (0..d_out * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..d_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |w: &[f64], b: &[f64], x: &[f64]| -> f64 {
            linear_forward(w, b, x, d_out, d_in).iter().zip(&c).map(|(z, ci)| z * ci).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let mut dx = vec![0.0; x.len()];
        linear_backward(&w, &x, &c, d_out, d_in, &mut dw, &mut db, &mut dx);
        let h = 1e-6;
        let check = |analytic: f64, fd: f64| {
            assert!((analytic - fd).abs() < 1e-7 * fd.abs().max(1.0));
        };
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            check(dw[i], (objective(&wp, &b, &x) - objective(&wm, &b, &x)) / (2.0 * h));
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            check(db[i], (objective(&w, &bp, &x) - objective(&w, &bm, &x)) / (2.0 * h));
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            check(dx[i], (objective(&w, &b, &xp) - objective(&w, &b, &xm)) / (2.0 * h));
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |z: &[f64]| -> f64 {
            let (zhat, _) = layer_norm_forward(z);
            zhat.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let (zhat, inv_std) = layer_norm_forward(&z);
        let dz = layer_norm_backward(&zhat, inv_std, &c);
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (objective(&zp) - objective(&zm)) / (2.0 * h);
            assert!((dz[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "i={i}");
        }
    }

    #[test]
    fn dueling_and_huber_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let adv: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let value = 0.7;
        let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |v: f64, a: &[f64]| -> f64 {
            dueling_combine(v, a).iter().zip(&c).map(|(q, ci)| q * ci).sum()
        };
        let (dv, da) = dueling_backward(&c);
        let h = 1e-6;
        let fd_v = (objective(value + h, &adv) - objective(value - h, &adv)) / (2.0 * h);
        assert!((dv - fd_v).abs() < 1e-8);
        for i in 0..adv.len() {
            let mut ap = adv.clone();
            ap[i] += h;
            let mut am = adv.clone();
            am[i] -= h;
            let fd = (objective(value, &ap) - objective(value, &am)) / (2.0 * h);
            assert!((da[i] - fd).abs() < 1e-8, "i={i}");
        }
        // Huber slope away from the kink, both branches.
        for delta in [-2.0, -0.5, 0.3, 1.7] {
            let fd = (loss_value(LossKind::Huber, delta + h)
                - loss_value(LossKind::Huber, delta - h))
                / (2.0 * h);
            assert!((loss_slope(LossKind::Huber, delta) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn six_parameter_toy_network_passes_the_gradient_check() {
        let arch = Arch::new(1, vec![], 2).unwrap();
        let net = QNetwork::with_seed(arch, LossKind::Huber, 21);
        assert_eq!(net.n_params(), 6);
        let inputs = vec![vec![0.4], vec![-0.8], vec![1.1]];
        let actions = vec![0, 1, 0];
        let targets = vec![0.3, 2.4, -0.6];
        let weights = vec![1.0, 0.7, 1.3];
        let worst = fd_max_rel_err(&net, &inputs, &actions, &targets, &weights);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let arch = Arch::new(9, vec![8, 5], 4).unwrap();
        for loss in [LossKind::Huber, LossKind::Mse] {
            let net = QNetwork::with_seed(arch.clone(), loss, 22);
            let (inputs, actions, targets, weights) = toy_batch(&net, 4, 99);
            let worst = fd_max_rel_err(&net, &inputs, &actions, &targets, &weights);
            assert!(worst < 1e-4, "{loss}: max relative error {worst}");
        }
    }

    #[test]
    fn layer_norm_outputs_have_zero_mean_and_unit_variance() {
        let arch = Arch::new(10, vec![16, 8], 5).unwrap();
        let net = QNetwork::with_seed(arch, LossKind::Huber, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let tr = net.forward_trace(&x).unwrap();
            for zhat in &tr.zhats {
                let n = zhat.len() as f64;
                let mean = zhat.iter().sum::<f64>() / n;
                let var = zhat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_q_everywhere() {
        let arch = Arch::new(6, vec![5, 4], 3).unwrap();
        let mut net = QNetwork::with_seed(arch, LossKind::Huber, 25);
        // Zero every parameter except the norm gains: biases, offsets, and
        // all weights vanish, so each layer emits zeros regardless of gain.
        let lay = layout(net.arch());
        let gains: Vec<Range<usize>> = lay.layers.iter().map(|s| s.gain.clone()).collect();
        for i in 0..net.n_params() {
            if !gains.iter().any(|g| g.contains(&i)) {
                net.params_mut()[i] = 0.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (q, v) = net.forward(&x).unwrap();
            assert_eq!(v, 0.0);
            assert!(q.iter().all(|&qi| qi == 0.0));
        }
    }

    #[test]
    fn constant_advantage_collapses_q_to_v_and_shifts_preserve_argmax() {
        let arch = Arch::new(5, vec![6], 4).unwrap();
        let mut net = QNetwork::with_seed(arch, LossKind::Huber, 27);
        let lay = layout(net.arch());
        let x = vec![0.3, -0.2, 0.9, 0.1, -0.7];
        // Constant advantage head: zero weights, identical biases.
        let mut collapsed = net.clone();
        for i in lay.adv_w.clone() {
            collapsed.params_mut()[i] = 0.0;
        }
        for i in lay.adv_b.clone() {
            collapsed.params_mut()[i] = 2.5;
        }
        let (q, v) = collapsed.forward(&x).unwrap();
        for qi in &q {
            assert!((qi - v).abs() < 1e-12);
        }
        // Adding a constant to every advantage bias leaves Q unchanged.
        let (q_before, _) = net.forward(&x).unwrap();
        for i in lay.adv_b.clone() {
            net.params_mut()[i] += 3.75;
        }
        let (q_after, _) = net.forward(&x).unwrap();
        for (a, b) in q_before.iter().zip(&q_after) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_targets_give_zero_loss_and_leave_parameters_unchanged() {
        let arch = Arch::new(7, vec![6, 4], 3).unwrap();
        let mut net = QNetwork::with_seed(arch, LossKind::Huber, 28);
        let (inputs, actions, _, weights) = toy_batch(&net, 5, 101);
        let targets: Vec<f64> = inputs
            .iter()
            .zip(&actions)
            .map(|(x, &a)| net.forward(x).unwrap().0[a])
            .collect();
        let before = net.params().to_vec();
        let mut adam = AdamState::new(net.n_params());
        let (loss, deltas) =
            net.train_batch(&mut adam, &inputs, &actions, &targets, &weights).unwrap();
        assert_eq!(loss, 0.0);
        assert!(deltas.iter().all(|&d| d == 0.0));
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn doubling_is_weights_doubles_loss_and_gradient() {
        let arch = Arch::new(6, vec![5], 4).unwrap();
        let net = QNetwork::with_seed(arch, LossKind::Huber, 29);
        let (inputs, actions, targets, weights) = toy_batch(&net, 6, 102);
        let doubled: Vec<f64> = weights.iter().map(|w| 2.0 * w).collect();
        let (l1, g1, _) = net.loss_and_grad(&inputs, &actions, &targets, &weights).unwrap();
        let (l2, g2, _) = net.loss_and_grad(&inputs, &actions, &targets, &doubled).unwrap();
        assert!((l2 - 2.0 * l1).abs() <= 1e-15 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() <= 1e-15 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn training_reduces_loss_toward_fixed_targets() {
        let arch = Arch::new(8, vec![12, 8], 5).unwrap();
        let mut net = QNetwork::with_seed(arch, LossKind::Huber, 30);
        let mut adam = AdamState::new(net.n_params());
        let (inputs, actions, targets, weights) = toy_batch(&net, 8, 103);
        let (first, _, _) = net.loss_and_grad(&inputs, &actions, &targets, &weights).unwrap();
        for _ in 0..1000 {
            net.train_batch(&mut adam, &inputs, &actions, &targets, &weights).unwrap();
        }
        let (last, _, _) = net.loss_and_grad(&inputs, &actions, &targets, &weights).unwrap();
        assert!(last < 0.05 * first, "loss {first} -> {last}");
        assert_eq!(adam.step_count(), 1000);
    }

    #[test]
    fn non_finite_targets_fail_without_touching_parameters() {
        let arch = Arch::new(4, vec![4], 2).unwrap();
        let mut net = QNetwork::with_seed(arch, LossKind::Mse, 31);
        let before = net.params().to_vec();
        let mut adam = AdamState::new(net.n_params());
        let err = net
            .train_batch(
                &mut adam,
                &[vec![0.1, 0.2, 0.3, 0.4]],
                &[1],
                &[f64::INFINITY],
                &[1.0],
            )
            .unwrap_err();
        assert!(matches!(err, Error::TrainingFailure(_)));
        assert_eq!(net.params(), &before[..]);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let arch = Arch::new(5, vec![4], 3).unwrap();
        let net = QNetwork::with_seed(arch, LossKind::Huber, 32);
        assert!(net.forward(&[0.0; 4]).is_err());
        assert!(net.forward(&[0.0; 6]).is_err());
        let other = QNetwork::with_seed(Arch::new(6, vec![4], 3).unwrap(), LossKind::Huber, 32);
        let mut target = net.clone();
        assert!(target.sync_from(&other).is_err());
        assert!(net
            .loss_and_grad(&[vec![0.0; 5]], &[7], &[0.0], &[1.0])
            .is_err());
    }

    #[test]
    fn target_sync_is_bitwise_and_idempotent() {
        let arch = Arch::new(6, vec![8, 6], 4).unwrap();
        let mut online = QNetwork::with_seed(arch.clone(), LossKind::Huber, 33);
        let mut target = online.clone();
        let mut adam = AdamState::new(online.n_params());
        let (inputs, actions, targets, weights) = toy_batch(&online, 4, 104);
        for _ in 0..5 {
            online.train_batch(&mut adam, &inputs, &actions, &targets, &weights).unwrap();
        }
        assert_ne!(online.params(), target.params());
        target.sync_from(&online).unwrap();
        assert_eq!(online.params(), target.params());
        let x: Vec<f64> = vec![0.2; 6];
        assert_eq!(online.forward(&x).unwrap().0, target.forward(&x).unwrap().0);
        target.sync_from(&online).unwrap();
        assert_eq!(online.params(), target.params());
    }

    #[test]
    fn same_seed_gives_identical_parameter_trajectories() {
        let arch = Arch::new(7, vec![6], 3).unwrap();
        let mut a = QNetwork::with_seed(arch.clone(), LossKind::Huber, 34);
        let mut b = QNetwork::with_seed(arch, LossKind::Huber, 34);
        assert_eq!(a.params(), b.params());
        let mut adam_a = AdamState::new(a.n_params());
        let mut adam_b = AdamState::new(b.n_params());
        let (inputs, actions, targets, weights) = toy_batch(&a, 4, 105);
        for _ in 0..10 {
            a.train_batch(&mut adam_a, &inputs, &actions, &targets, &weights).unwrap();
            b.train_batch(&mut adam_b, &inputs, &actions, &targets, &weights).unwrap();
        }
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let arch = Arch::new(6, vec![5, 4], 3).unwrap();
        let mut net = QNetwork::with_seed(arch, LossKind::Mse, 35);
        let mut adam = AdamState::new(net.n_params());
        let (inputs, actions, targets, weights) = toy_batch(&net, 4, 106);
        for _ in 0..7 {
            net.train_batch(&mut adam, &inputs, &actions, &targets, &weights).unwrap();
        }
        let rng = ChaCha8Rng::seed_from_u64(36);
        let rng_state = serde_json::to_string(&rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        write_checkpoint(&path, &net, &adam, &rng_state).unwrap();
        let (net2, adam2, rng2) = read_checkpoint(&path).unwrap();
        assert_eq!(net.arch(), net2.arch());
        assert_eq!(net.loss_kind(), net2.loss_kind());
        for (a, b) in net.params().iter().zip(net2.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(adam.step_count(), adam2.step_count());
        for (a, b) in adam.m.iter().zip(&adam2.m) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in adam.v.iter().zip(&adam2.v) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(rng_state, rng2);
        let restored: ChaCha8Rng = serde_json::from_str(&rng2).unwrap();
        assert_eq!(rng, restored);
    }
}
