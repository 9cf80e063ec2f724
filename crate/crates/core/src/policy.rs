//! Small autoregressive softmax policy with hand-written reverse mode.
//!
//! At generation step `t` the prefix is encoded as
//!
//! ```text
//! e_t    = mean(tok_emb[o_0..o_t]) + pos_emb[t] + q_emb[question]
//! h_t    = tanh(W_in^T e_t + W_ctx^T context + b_hid)
//! z_t    = W_out^T h_t + b_out
//! q_t    = softmax(z_t)
//! ```
//!
//! All parameters live in one flat vector so that optimizers, snapshots and
//! finite-difference checks can treat them uniformly. Every objective that
//! needs a gradient reduces to a per-step gradient with respect to the logits
//! `z_t`, which [`backprop_logit_grads`] pushes back through the network.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{self, Prompt};
use crate::error::{LabError, Result};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub vocab_size: usize,
    pub max_len: usize,
    pub context_dim: usize,
    pub num_questions: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    q_emb: usize,
    w_in: usize,
    w_ctx: usize,
    b_hid: usize,
    w_out: usize,
    b_out: usize,
    len: usize,
}

impl PolicyDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.vocab_size,
            self.max_len,
            self.context_dim,
            self.num_questions,
            self.embed_dim,
            self.hidden_dim,
        ];
        if all.contains(&0) {
            return Err(LabError::config(format!("policy dims must all be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (v, t, c, q, e, h) = (
            self.vocab_size,
            self.max_len,
            self.context_dim,
            self.num_questions,
            self.embed_dim,
            self.hidden_dim,
        );
        let tok_emb = 0;
        let pos_emb = tok_emb + v * e;
        let q_emb = pos_emb + t * e;
        let w_in = q_emb + q * e;
        let w_ctx = w_in + e * h;
        let b_hid = w_ctx + c * h;
        let w_out = b_hid + h;
        let b_out = w_out + h * v;
        Layout {
            tok_emb,
            pos_emb,
            q_emb,
            w_in,
            w_ctx,
            b_hid,
            w_out,
            b_out,
            len: b_out + v,
        }
    }

    /// Length of the flat parameter vector.
    pub fn num_params(&self) -> usize {
        self.layout().len
    }

    fn ln_vocab(&self) -> f64 {
        (self.vocab_size as f64).ln()
    }
}

/// Flat parameter vector plus its shape descriptor.
///
/// Equality is bit-identity of the vectors, so `-0.0 != 0.0` and NaN equals
/// itself when the bits agree.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub values: Vec<f64>,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// One sampled response with its sampling-time statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_id: usize,
    pub tokens: Vec<usize>,
    pub logprobs_old: Vec<f64>,
    pub entropies_old: Vec<f64>,
    pub reward: u8,
}

/// Cached activations at one generation step.
#[derive(Debug, Clone)]
struct StepCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    logp: Vec<f64>,
}

impl StepCache {
    fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.logp.iter().map(|l| l.exp())
    }

    fn entropy(&self) -> f64 {
        -self
            .logp
            .iter()
            .map(|&l| {
                let p = l.exp();
                if p > 0.0 {
                    p * l
                } else {
                    0.0
                }
            })
            .sum::<f64>()
    }
}

/// Stable log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn init_params(dims: PolicyDims, init_scale: f64, seed: u64) -> Result<PolicyParams> {
    dims.validate()?;
    let lay = dims.layout();
    let mut rng = rng::stream(seed, &[purpose::INIT]);
    let mut values = vec![0.0; lay.len];
    // Biases stay at zero; everything else is N(0, scale^2).
    for (i, v) in values.iter_mut().enumerate() {
        let is_bias = (lay.b_hid..lay.w_out).contains(&i) || i >= lay.b_out;
        let z: f64 = StandardNormal.sample(&mut rng);
        if !is_bias {
            *v = init_scale * z;
        }
    }
    Ok(PolicyParams { dims, values })
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            values: vec![0.0; dims.num_params()],
        })
    }

    fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if prompt.context.len() != self.dims.context_dim {
            return Err(LabError::usage(format!(
                "prompt {} has context length {}, policy expects {}",
                prompt.id,
                prompt.context.len(),
                self.dims.context_dim
            )));
        }
        if prompt.question_id >= self.dims.num_questions {
            return Err(LabError::usage(format!(
                "prompt {} has question_id {} >= {}",
                prompt.id, prompt.question_id, self.dims.num_questions
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != self.dims.max_len {
            return Err(LabError::usage(format!(
                "token sequence has length {}, expected {}",
                tokens.len(),
                self.dims.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(LabError::usage(format!(
                "token {bad} outside vocabulary of size {}",
                self.dims.vocab_size
            )));
        }
        Ok(())
    }

    /// Forward pass at step `prefix.len()`.
    fn step(&self, prompt: &Prompt, prefix: &[usize]) -> StepCache {
        let d = &self.dims;
        let lay = d.layout();
        let (e_dim, h_dim, v_dim) = (d.embed_dim, d.hidden_dim, d.vocab_size);
        let w = &self.values;
        let t = prefix.len();

        let mut input = vec![0.0; e_dim];
        if t > 0 {
            let inv = 1.0 / t as f64;
            for &tok in prefix {
                let row = &w[lay.tok_emb + tok * e_dim..][..e_dim];
                for (x, r) in input.iter_mut().zip(row) {
                    *x += r * inv;
                }
            }
        }
        let pos = &w[lay.pos_emb + t * e_dim..][..e_dim];
        let qe = &w[lay.q_emb + prompt.question_id * e_dim..][..e_dim];
        for i in 0..e_dim {
            input[i] += pos[i] + qe[i];
        }

        let mut hidden = w[lay.b_hid..lay.b_hid + h_dim].to_vec();
        for (i, &x) in input.iter().enumerate() {
            let row = &w[lay.w_in + i * h_dim..][..h_dim];
            for (acc, r) in hidden.iter_mut().zip(row) {
                *acc += x * r;
            }
        }
        for (c, &x) in prompt.context.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &w[lay.w_ctx + c * h_dim..][..h_dim];
            for (acc, r) in hidden.iter_mut().zip(row) {
                *acc += x * r;
            }
        }
        for x in hidden.iter_mut() {
            *x = x.tanh();
        }

        let mut logits = w[lay.b_out..lay.b_out + v_dim].to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            let row = &w[lay.w_out + j * v_dim..][..v_dim];
            for (acc, r) in logits.iter_mut().zip(row) {
                *acc += hj * r;
            }
        }
        StepCache {
            input,
            hidden,
            logp: log_softmax(&logits),
        }
    }

    fn forward_sequence(&self, prompt: &Prompt, tokens: &[usize]) -> Vec<StepCache> {
        (0..tokens.len()).map(|t| self.step(prompt, &tokens[..t])).collect()
    }
}

/// Next-token distribution after `prefix`.
pub fn next_token_dist(params: &PolicyParams, prompt: &Prompt, prefix: &[usize]) -> Result<Vec<f64>> {
    params.check_prompt(prompt)?;
    if prefix.len() >= params.dims.max_len {
        return Err(LabError::usage(format!(
            "prefix length {} must be < max_len {}",
            prefix.len(),
            params.dims.max_len
        )));
    }
    Ok(params.step(prompt, prefix).probs().collect())
}

/// Inverse-CDF draw from a categorical given log-probabilities.
fn sample_index<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, l) in logp.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Sample a full response and score it with the verifier.
pub fn sample_rollout<R: Rng + ?Sized>(params: &PolicyParams, prompt: &Prompt, rng: &mut R) -> Result<Rollout> {
    params.check_prompt(prompt)?;
    let t_max = params.dims.max_len;
    let mut tokens = Vec::with_capacity(t_max);
    let mut logprobs_old = Vec::with_capacity(t_max);
    let mut entropies_old = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        let cache = params.step(prompt, &tokens);
        let tok = sample_index(&cache.logp, rng);
        logprobs_old.push(cache.logp[tok]);
        entropies_old.push(cache.entropy());
        tokens.push(tok);
    }
    let reward = env::verify(prompt, &tokens);
    Ok(Rollout {
        prompt_id: prompt.id,
        tokens,
        logprobs_old,
        entropies_old,
        reward,
    })
}

/// Greedy decoding; ties go to the lowest token index.
pub fn greedy_response(params: &PolicyParams, prompt: &Prompt) -> Result<Vec<usize>> {
    params.check_prompt(prompt)?;
    let mut tokens = Vec::with_capacity(params.dims.max_len);
    for _ in 0..params.dims.max_len {
        let cache = params.step(prompt, &tokens);
        let mut best = 0;
        for (i, &l) in cache.logp.iter().enumerate() {
            if l > cache.logp[best] {
                best = i;
            }
        }
        tokens.push(best);
    }
    Ok(tokens)
}

/// Per-token log-probabilities and next-token entropies along `tokens`.
pub fn logprobs_and_entropy(
    params: &PolicyParams,
    prompt: &Prompt,
    tokens: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check_prompt(prompt)?;
    params.check_tokens(tokens)?;
    Ok(params
        .forward_sequence(prompt, tokens)
        .iter()
        .zip(tokens)
        .map(|(c, &tok)| (c.logp[tok], c.entropy()))
        .unzip())
}

/// Push per-step logit gradients back to the flat parameter vector,
/// accumulating into `grad`.
fn backprop_logit_grads(
    params: &PolicyParams,
    prompt: &Prompt,
    tokens: &[usize],
    caches: &[StepCache],
    logit_grads: &[Vec<f64>],
    grad: &mut [f64],
) {
    let d = &params.dims;
    let lay = d.layout();
    let (e_dim, h_dim, v_dim) = (d.embed_dim, d.hidden_dim, d.vocab_size);
    let w = &params.values;
    let mut d_hidden = vec![0.0; h_dim];
    let mut d_input = vec![0.0; e_dim];

    for (t, (cache, g)) in caches.iter().zip(logit_grads).enumerate() {
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        for (gb, gv) in grad[lay.b_out..lay.b_out + v_dim].iter_mut().zip(g) {
            *gb += gv;
        }
        for (j, &hj) in cache.hidden.iter().enumerate() {
            let w_row = &w[lay.w_out + j * v_dim..][..v_dim];
            let g_row = &mut grad[lay.w_out + j * v_dim..][..v_dim];
            let mut dh = 0.0;
            for v in 0..v_dim {
                g_row[v] += hj * g[v];
                dh += w_row[v] * g[v];
            }
            d_hidden[j] = dh * (1.0 - hj * hj);
        }
        for (gb, dh) in grad[lay.b_hid..lay.b_hid + h_dim].iter_mut().zip(&d_hidden) {
            *gb += dh;
        }
        for (i, &xi) in cache.input.iter().enumerate() {
            let w_row = &w[lay.w_in + i * h_dim..][..h_dim];
            let g_row = &mut grad[lay.w_in + i * h_dim..][..h_dim];
            let mut de = 0.0;
            for j in 0..h_dim {
                g_row[j] += xi * d_hidden[j];
                de += w_row[j] * d_hidden[j];
            }
            d_input[i] = de;
        }
        for (c, &xc) in prompt.context.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            let g_row = &mut grad[lay.w_ctx + c * h_dim..][..h_dim];
            for (gr, dh) in g_row.iter_mut().zip(&d_hidden) {
                *gr += xc * dh;
            }
        }
        for i in 0..e_dim {
            grad[lay.pos_emb + t * e_dim + i] += d_input[i];
            grad[lay.q_emb + prompt.question_id * e_dim + i] += d_input[i];
        }
        if t > 0 {
            let inv = 1.0 / t as f64;
            for &tok in &tokens[..t] {
                let g_row = &mut grad[lay.tok_emb + tok * e_dim..][..e_dim];
                for (gr, de) in g_row.iter_mut().zip(&d_input) {
                    *gr += de * inv;
                }
            }
        }
    }
}

/// Gradient of `sum_t w_t * log pi(o_t | x, o_<t)` with the weights held
/// constant.
pub fn backprop_weighted_logprob(
    params: &PolicyParams,
    prompt: &Prompt,
    tokens: &[usize],
    weights: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.values.len()];
    accumulate_weighted_logprob(params, prompt, tokens, weights, &mut grad)?;
    Ok(grad)
}

/// Like [`backprop_weighted_logprob`] but adds into an existing buffer.
pub fn accumulate_weighted_logprob(
    params: &PolicyParams,
    prompt: &Prompt,
    tokens: &[usize],
    weights: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    params.check_prompt(prompt)?;
    params.check_tokens(tokens)?;
    if weights.len() != tokens.len() {
        return Err(LabError::usage(format!(
            "weights length {} != token length {}",
            weights.len(),
            tokens.len()
        )));
    }
    if grad.len() != params.values.len() {
        return Err(LabError::usage("gradient buffer has wrong length"));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(LabError::usage("weights must be finite"));
    }
    let caches = params.forward_sequence(prompt, tokens);
    // d/dz [w log softmax(z)_o] = w (onehot(o) - q)
    let logit_grads: Vec<Vec<f64>> = caches
        .iter()
        .zip(tokens.iter().zip(weights))
        .map(|(c, (&tok, &wt))| {
            if wt == 0.0 {
                return vec![0.0; c.logp.len()];
            }
            let mut g: Vec<f64> = c.probs().map(|p| -wt * p).collect();
            g[tok] += wt;
            g
        })
        .collect();
    backprop_logit_grads(params, prompt, tokens, &caches, &logit_grads, grad);
    Ok(())
}

/// Mean over visited prefixes of `KL(p_t || q_t)` where `p` is evaluated with
/// `params_p` on `prompt_p` and `q` with `params_q` on `prompt_q`. The
/// gradient flows through `p` only; `q` is a constant anchor.
pub fn kl_against(
    params_p: &PolicyParams,
    prompt_p: &Prompt,
    params_q: &PolicyParams,
    prompt_q: &Prompt,
    tokens: &[usize],
    coef: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    if params_p.dims != params_q.dims {
        return Err(LabError::usage("KL between policies of different shapes"));
    }
    params_p.check_prompt(prompt_p)?;
    params_q.check_prompt(prompt_q)?;
    params_p.check_tokens(tokens)?;
    let cp = params_p.forward_sequence(prompt_p, tokens);
    let cq = params_q.forward_sequence(prompt_q, tokens);
    let n = tokens.len() as f64;
    let mut total = 0.0;
    let mut logit_grads = Vec::with_capacity(cp.len());
    for (a, b) in cp.iter().zip(&cq) {
        let kl: f64 = a
            .logp
            .iter()
            .zip(&b.logp)
            .map(|(lp, lq)| {
                let p = lp.exp();
                if p > 0.0 {
                    p * (lp - lq)
                } else {
                    0.0
                }
            })
            .sum();
        total += kl;
        // d KL / d z_k = p_k (log p_k - log q_k - KL)
        logit_grads.push(
            a.logp
                .iter()
                .zip(&b.logp)
                .map(|(lp, lq)| coef * lp.exp() * (lp - lq - kl) / n)
                .collect(),
        );
    }
    if let Some(grad) = grad {
        backprop_logit_grads(params_p, prompt_p, tokens, &cp, &logit_grads, grad);
    }
    Ok(total / n)
}

/// Exact categorical `KL(p || q)` averaged over the prefixes of `tokens`,
/// with its gradient with respect to `params_p`.
pub fn backprop_kl(
    params_p: &PolicyParams,
    params_q: &PolicyParams,
    prompt: &Prompt,
    tokens: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params_p.values.len()];
    let kl = kl_against(params_p, prompt, params_q, prompt, tokens, 1.0, Some(&mut grad))?;
    Ok((kl, grad))
}

/// Mean next-token entropy at the prefixes of `tokens`, scaled by `coef` in
/// the accumulated gradient.
pub fn accumulate_entropy(
    params: &PolicyParams,
    prompt: &Prompt,
    tokens: &[usize],
    coef: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    params.check_prompt(prompt)?;
    params.check_tokens(tokens)?;
    let caches = params.forward_sequence(prompt, tokens);
    let n = tokens.len() as f64;
    let mut total = 0.0;
    let mut logit_grads = Vec::with_capacity(caches.len());
    for c in &caches {
        let h = c.entropy();
        total += h;
        // d H / d z_k = -p_k (log p_k + H)
        logit_grads.push(c.logp.iter().map(|lp| -coef * lp.exp() * (lp + h) / n).collect());
    }
    if let Some(grad) = grad {
        backprop_logit_grads(params, prompt, tokens, &caches, &logit_grads, grad);
    }
    Ok(total / n)
}

pub fn backprop_entropy(params: &PolicyParams, prompt: &Prompt, tokens: &[usize]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.values.len()];
    let h = accumulate_entropy(params, prompt, tokens, 1.0, Some(&mut grad))?;
    Ok((h, grad))
}

/// Upper bound on per-token entropy.
pub fn max_entropy(dims: &PolicyDims) -> f64 {
    dims.ln_vocab()
}

const PARAMS_HEADER: &str = "# rlvr-params v1";

/// Text checkpoint form: header, shape line, one value per line. Values are
/// written in shortest round-trip notation so parsing is lossless.
pub fn params_to_text(params: &PolicyParams) -> String {
    let d = &params.dims;
    let mut out = String::with_capacity(params.values.len() * 24);
    writeln!(out, "{PARAMS_HEADER}").unwrap();
    writeln!(
        out,
        "vocab_size={} max_len={} context_dim={} num_questions={} embed_dim={} hidden_dim={} len={}",
        d.vocab_size,
        d.max_len,
        d.context_dim,
        d.num_questions,
        d.embed_dim,
        d.hidden_dim,
        params.values.len()
    )
    .unwrap();
    for v in &params.values {
        writeln!(out, "{v:?}").unwrap();
    }
    out
}

pub fn params_from_text(text: &str) -> Result<PolicyParams> {
    let mut lines = text.lines();
    if lines.next() != Some(PARAMS_HEADER) {
        return Err(LabError::parse("missing params header"));
    }
    let shape = lines.next().ok_or_else(|| LabError::parse("missing shape line"))?;
    let mut fields = std::collections::BTreeMap::new();
    for f in shape.split_whitespace() {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| LabError::parse(format!("bad shape field {f:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| LabError::parse(format!("bad shape field {f:?}")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| LabError::parse(format!("shape line lacks {k}")))
    };
    let dims = PolicyDims {
        vocab_size: get("vocab_size")?,
        max_len: get("max_len")?,
        context_dim: get("context_dim")?,
        num_questions: get("num_questions")?,
        embed_dim: get("embed_dim")?,
        hidden_dim: get("hidden_dim")?,
    };
    let values: Vec<f64> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|_| LabError::parse(format!("bad value {l:?}"))))
        .collect::<Result<_>>()?;
    if values.len() != get("len")? || values.len() != dims.num_params() {
        return Err(LabError::parse(format!(
            "shape descriptor expects {} values, found {}",
            dims.num_params(),
            values.len()
        )));
    }
    Ok(PolicyParams { dims, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(v: usize, t: usize) -> PolicyDims {
        PolicyDims {
            vocab_size: v,
            max_len: t,
            context_dim: 3,
            num_questions: 2,
            embed_dim: 4,
            hidden_dim: 5,
        }
    }

    fn prompt() -> Prompt {
        Prompt {
            id: 0,
            context: vec![0.5, -1.0, 0.25],
            question_id: 1,
            answer: 2,
        }
    }

    /// Params whose step-0 logits are exactly `logits` (output bias only).
    fn bias_only(v: usize, t: usize, logits: &[f64]) -> PolicyParams {
        let d = dims(v, t);
        let mut p = PolicyParams::zeros(d).unwrap();
        let off = d.layout().b_out;
        p.values[off..off + v].copy_from_slice(logits);
        p
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(dims(8, 4), 0.1, 3).unwrap();
        let b = init_params(dims(8, 4), 0.1, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(dims(8, 4), 0.1, 4).unwrap());
    }

    #[test]
    fn zero_init_is_uniform() {
        let p = init_params(dims(8, 4), 0.0, 3).unwrap();
        let q = next_token_dist(&p, &prompt(), &[1, 2]).unwrap();
        for x in q {
            assert!((x - 0.125).abs() < 1e-15);
        }
        let (_, h) = logprobs_and_entropy(&p, &prompt(), &[0, 1, 2, 3]).unwrap();
        for x in h {
            assert!((x - 8f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_softmax() {
        let p = bias_only(3, 2, &[0.0, 0.0, 2f64.ln()]);
        let q = next_token_dist(&p, &prompt(), &[]).unwrap();
        let expect = [0.25, 0.25, 0.5];
        for (a, b) in q.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let (_, h) = logprobs_and_entropy(&p, &prompt(), &[0, 0]).unwrap();
        let hand = -(0.5 * 0.25f64.ln() + 0.5 * 0.5f64.ln());
        assert!((h[0] - hand).abs() < 1e-12);
        assert!((hand - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn prefix_too_long_rejected() {
        let p = init_params(dims(3, 2), 0.1, 0).unwrap();
        assert!(next_token_dist(&p, &prompt(), &[0, 1]).is_err());
        assert!(logprobs_and_entropy(&p, &prompt(), &[0, 3]).is_err());
    }

    #[test]
    fn degenerate_distribution_samples_its_mode() {
        let p = bias_only(4, 3, &[-1e4, -1e4, 0.0, -1e4]);
        let mut rng = rng::stream(1, &[]);
        let r = sample_rollout(&p, &prompt(), &mut rng).unwrap();
        assert_eq!(r.tokens, vec![2, 2, 2]);
        for (lp, h) in r.logprobs_old.iter().zip(&r.entropies_old) {
            assert_eq!(*lp, 0.0);
            assert_eq!(*h, 0.0);
        }
        assert_eq!(r.reward, 1);
    }

    #[test]
    fn recorded_logprobs_match_recompute() {
        let p = init_params(dims(5, 4), 0.5, 9).unwrap();
        let mut rng = rng::stream(2, &[]);
        for _ in 0..20 {
            let r = sample_rollout(&p, &prompt(), &mut rng).unwrap();
            let (lp, h) = logprobs_and_entropy(&p, &prompt(), &r.tokens).unwrap();
            assert_eq!(lp, r.logprobs_old);
            assert_eq!(h, r.entropies_old);
        }
    }

    #[test]
    fn uniform_entropy_v4() {
        let p = PolicyParams::zeros(dims(4, 3)).unwrap();
        let mut rng = rng::stream(2, &[]);
        let r = sample_rollout(&p, &prompt(), &mut rng).unwrap();
        for h in r.entropies_old {
            assert!((h - 4f64.ln()).abs() < 1e-12);
            assert!((h - 1.3863).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_weights_zero_gradient() {
        let p = init_params(dims(4, 3), 0.3, 1).unwrap();
        let g = backprop_weighted_logprob(&p, &prompt(), &[1, 2, 3], &[0.0; 3]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = init_params(dims(4, 3), 0.3, 1).unwrap();
        assert!(backprop_weighted_logprob(&p, &prompt(), &[1, 2, 3], &[0.0; 2]).is_err());
        assert!(backprop_weighted_logprob(&p, &prompt(), &[1, 2], &[0.0; 2]).is_err());
        let other = init_params(dims(5, 3), 0.3, 1).unwrap();
        assert!(backprop_kl(&p, &other, &prompt(), &[1, 2, 3]).is_err());
    }

    #[test]
    fn kl_hand_value() {
        let p = bias_only(2, 1, &[0.0, 0.0]);
        let q = bias_only(2, 1, &[0.0, 3f64.ln()]);
        let (kl, _) = backprop_kl(&p, &q, &prompt(), &[0]).unwrap();
        let hand = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - hand).abs() < 1e-12);
        assert!((kl - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_self_is_zero() {
        let p = init_params(dims(4, 3), 0.3, 1).unwrap();
        let (kl, g) = backprop_kl(&p, &p.clone(), &prompt(), &[0, 3, 1]).unwrap();
        assert_eq!(kl, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn uniform_entropy_gradient_vanishes() {
        let p = PolicyParams::zeros(dims(4, 3)).unwrap();
        let (h, g) = backprop_entropy(&p, &prompt(), &[0, 3, 1]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn params_text_round_trip() {
        let p = init_params(dims(4, 3), 0.3, 1).unwrap();
        let back = params_from_text(&params_to_text(&p)).unwrap();
        assert_eq!(p, back);
        let truncated: String = params_to_text(&p).lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(params_from_text(&truncated).is_err());
    }

    #[test]
    fn snapshot_has_value_semantics() {
        let mut p = init_params(dims(4, 3), 0.3, 1).unwrap();
        let snap = p.clone();
        p.values[0] += 1.0;
        assert_ne!(p, snap);
        assert_eq!(snap, init_params(dims(4, 3), 0.3, 1).unwrap());
    }
}
