//! Forward pass with cached activations and the matching reverse pass.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Adapter, FreezeMask, Layer, LayerAdapters, ParamGroup, Params, Projection, RegressionLM};
use crate::textcodec::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub(crate) enum Input<'a> {
    Tokens(&'a [TokenId]),
    Embeddings(&'a Array2<f64>),
}

/// Adapter dropout is the only stochastic component.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct AdapterCache {
    projection: Projection,
    /// Adapter input after dropout.
    input: Array2<f64>,
    /// Dropout multipliers (0 or 1/(1-p)); `None` when dropout was inactive.
    keep: Option<Array2<f64>>,
    /// `input A^T`, `T x rank`.
    low: Array2<f64>,
}

struct LayerCache {
    ln1: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: NormCache,
    c: Array2<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
    adapters: Vec<AdapterCache>,
}

/// Activations of one forward pass, enough to run the reverse pass.
pub struct Trace {
    tokens: Option<Vec<TokenId>>,
    layers: Vec<LayerCache>,
    lnf: NormCache,
    /// Final-norm hidden states, `T x d_model`.
    pub hidden: Array2<f64>,
}

/// Parameter gradients plus the gradient with respect to the input
/// (token-embedding) rows.
pub struct Backward {
    pub grads: Params,
    pub d_input: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * g + b;
    (y, NormCache { xhat, rstd })
}

/// Returns `dx`; accumulates into `dg`, `db` when given.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    g: &Array1<f64>,
    param_grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = param_grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xhat), &r) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xhat) / d;
        Zip::from(&mut row).and(&xhat).for_each(|v, &xh| {
            *v = r * (*v - mean_d - xh * mean_dx);
        });
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_masked(scores: &mut Array2<f64>, mask: &[bool]) {
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let allowed = |j: usize| j <= i && mask[j];
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if allowed(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl RegressionLM {
    fn adapter_scaling(&self) -> f64 {
        self.lora.as_ref().map_or(0.0, |c| c.scaling())
    }

    fn dropout_rate(&self) -> f64 {
        self.lora.as_ref().map_or(0.0, |c| c.dropout)
    }

    /// `x W` plus the adapter path for projection `p`, recording adapter
    /// activations.
    fn project(
        &self,
        x: &Array2<f64>,
        w: &Array2<f64>,
        p: Projection,
        adapters: Option<&LayerAdapters>,
        mode: &mut Mode<'_>,
        caches: &mut Vec<AdapterCache>,
    ) -> Array2<f64> {
        let mut y = x.dot(w);
        if let Some(ad) = adapters.and_then(|la| la.get(p)) {
            let rate = self.dropout_rate();
            let (input, keep) = match mode {
                Mode::Train(rng) if rate > 0.0 => {
                    let scale = 1.0 / (1.0 - rate);
                    let keep = Array2::from_shape_simple_fn(x.raw_dim(), || {
                        if rng.random::<f64>() < rate { 0.0 } else { scale }
                    });
                    (x * &keep, Some(keep))
                }
                _ => (x.clone(), None),
            };
            let low = input.dot(&ad.a.t());
            y.scaled_add(self.adapter_scaling(), &low.dot(&ad.b.t()));
            caches.push(AdapterCache {
                projection: p,
                input,
                keep,
                low,
            });
        }
        y
    }

    pub(crate) fn trace(&self, input: Input<'_>, mask: &[bool], mut mode: Mode<'_>) -> Trace {
        let cfg = &self.config;
        let (mut x, tokens) = match input {
            Input::Tokens(ids) => (self.embed(ids), Some(ids.to_vec())),
            Input::Embeddings(e) => (e.clone(), None),
        };
        let t = x.nrows();
        x += &self.params.pos_emb.slice(s![..t, ..]);

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.params.layers.iter().enumerate() {
            let adapters = self.params.adapters.as_ref().map(|a| &a[li]);
            let mut ad_caches = Vec::new();

            let (a, ln1) = layer_norm(&x, &layer.ln1_g, &layer.ln1_b);
            let q = self.project(&a, &layer.wq, Projection::Query, adapters, &mut mode, &mut ad_caches);
            let k = self.project(&a, &layer.wk, Projection::Key, adapters, &mut mode, &mut ad_caches);
            let v = self.project(&a, &layer.wv, Projection::Value, adapters, &mut mode, &mut ad_caches);

            let mut attn = Array2::zeros((t, cfg.d_model));
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t());
                scores *= scale;
                softmax_masked(&mut scores, mask);
                attn.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let o = self.project(&attn, &layer.wo, Projection::Output, adapters, &mut mode, &mut ad_caches);
            x += &o;

            let (c, ln2) = layer_norm(&x, &layer.ln2_g, &layer.ln2_b);
            let up = c.dot(&layer.w_up);
            let act = up.mapv(gelu);
            x += &act.dot(&layer.w_down);

            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                attn,
                ln2,
                c,
                up,
                act,
                adapters: ad_caches,
            });
        }
        let (hidden, lnf) = layer_norm(&x, &self.params.lnf_g, &self.params.lnf_b);
        Trace {
            tokens,
            layers,
            lnf,
            hidden,
        }
    }

    /// Reverse pass for the regression output: `dy` is the upstream
    /// derivative of the loss with respect to the prediction at `last`.
    pub(crate) fn backward_regression(
        &self,
        trace: &Trace,
        last: usize,
        dy: f64,
        freeze: &FreezeMask,
    ) -> Backward {
        let mut grads = self.params.zeros_like();
        if freeze.trains(ParamGroup::Head) {
            grads.head_w.scaled_add(dy, &trace.hidden.row(last));
            grads.head_b[0] += dy;
        }
        let mut d_hidden = Array2::zeros(trace.hidden.raw_dim());
        d_hidden.row_mut(last).scaled_add(dy, &self.params.head_w);
        let d_input = self.backward_hidden(trace, d_hidden, freeze, &mut grads);
        Backward { grads, d_input }
    }

    /// Reverse pass from an arbitrary hidden-state gradient. Accumulates into
    /// `grads` for trainable groups and returns the input-row gradient.
    pub(crate) fn backward_hidden(
        &self,
        trace: &Trace,
        d_hidden: Array2<f64>,
        freeze: &FreezeMask,
        grads: &mut Params,
    ) -> Array2<f64> {
        let cfg = &self.config;
        let train_blocks = freeze.trains(ParamGroup::Blocks);
        let train_adapters = freeze.trains(ParamGroup::Adapters);
        let s = self.adapter_scaling();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = {
            let Params { lnf_g, lnf_b, .. } = &mut *grads;
            let pg = train_blocks.then_some((lnf_g, lnf_b));
            layer_norm_backward(&d_hidden, &trace.lnf, &self.params.lnf_g, pg)
        };

        for li in (0..cfg.n_layers).rev() {
            let layer: &Layer = &self.params.layers[li];
            let cache = &trace.layers[li];
            let adapters = self.params.adapters.as_ref().map(|a| &a[li]);
            let mut ad_grads = grads.adapters.as_mut().map(|a| &mut a[li]);
            let g = &mut grads.layers[li];

            // Feed-forward branch.
            if train_blocks {
                g.w_down += &cache.act.t().dot(&dx);
            }
            let mut d_up = dx.dot(&layer.w_down.t());
            Zip::from(&mut d_up).and(&cache.up).for_each(|d, &u| *d *= gelu_grad(u));
            if train_blocks {
                g.w_up += &cache.c.t().dot(&d_up);
            }
            let dc = d_up.dot(&layer.w_up.t());
            let pg = train_blocks.then_some((&mut g.ln2_g, &mut g.ln2_b));
            dx += &layer_norm_backward(&dc, &cache.ln2, &layer.ln2_g, pg);

            // Attention branch.
            let d_attn = backprop_projection(
                &dx,
                &cache.attn,
                &layer.wo,
                Projection::Output,
                adapters,
                &cache.adapters,
                s,
                train_blocks.then_some(&mut g.wo),
                if train_adapters { ad_grads.as_deref_mut() } else { None },
            );
            let t = dx.nrows();
            let mut dq = Array2::zeros((t, cfg.d_model));
            let mut dk = Array2::zeros((t, cfg.d_model));
            let mut dv = Array2::zeros((t, cfg.d_model));
            for h in 0..cfg.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &cache.probs[h];
                let d_out = d_attn.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&d_out));
                let dp = d_out.dot(&cache.v.slice(cols).t());
                let mut ds = &dp * p;
                for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                    let dot: f64 = row.sum();
                    Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * dot);
                }
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
            }
            let mut da = backprop_projection(
                &dq,
                &cache.a,
                &layer.wq,
                Projection::Query,
                adapters,
                &cache.adapters,
                s,
                train_blocks.then_some(&mut g.wq),
                if train_adapters { ad_grads.as_deref_mut() } else { None },
            );
            da += &backprop_projection(
                &dk,
                &cache.a,
                &layer.wk,
                Projection::Key,
                adapters,
                &cache.adapters,
                s,
                train_blocks.then_some(&mut g.wk),
                if train_adapters { ad_grads.as_deref_mut() } else { None },
            );
            da += &backprop_projection(
                &dv,
                &cache.a,
                &layer.wv,
                Projection::Value,
                adapters,
                &cache.adapters,
                s,
                train_blocks.then_some(&mut g.wv),
                if train_adapters { ad_grads } else { None },
            );
            let pg = train_blocks.then_some((&mut g.ln1_g, &mut g.ln1_b));
            dx += &layer_norm_backward(&da, &cache.ln1, &layer.ln1_g, pg);
        }

        if freeze.trains(ParamGroup::Embeddings) {
            let t = dx.nrows();
            let mut pos = grads.pos_emb.slice_mut(s![..t, ..]);
            pos += &dx;
            if let Some(tokens) = &trace.tokens {
                for (i, &tok) in tokens.iter().enumerate() {
                    let mut row = grads.tok_emb.row_mut(tok as usize);
                    row += &dx.row(i);
                }
            }
        }
        dx
    }

    /// Next-token cross-entropy (mean over predicted positions) and its
    /// reverse pass. Position `i` predicts token `i + 1`.
    pub(crate) fn lm_loss_and_grad(
        &self,
        tokens: &[TokenId],
        freeze: &FreezeMask,
    ) -> (f64, Params) {
        let mask = vec![true; tokens.len()];
        let trace = self.trace(Input::Tokens(tokens), &mask, Mode::Eval);
        let mut grads = self.params.zeros_like();
        let n_pred = tokens.len().saturating_sub(1);
        if n_pred == 0 {
            return (0.0, grads);
        }
        let hidden = trace.hidden.slice(s![..n_pred, ..]);
        let mut logits = hidden.dot(&self.params.tok_emb.t());
        let mut loss = 0.0;
        for (i, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
            let target = tokens[i + 1] as usize;
            loss -= row[target].max(f64::MIN_POSITIVE).ln();
            row[target] -= 1.0;
        }
        let inv = 1.0 / n_pred as f64;
        loss *= inv;
        logits *= inv;
        // logits = H E^T  =>  dH = dL E,  dE += dL^T H
        let mut d_hidden = Array2::zeros(trace.hidden.raw_dim());
        d_hidden.slice_mut(s![..n_pred, ..]).assign(&logits.dot(&self.params.tok_emb));
        if freeze.trains(ParamGroup::Embeddings) {
            grads.tok_emb += &logits.t().dot(&hidden);
        }
        self.backward_hidden(&trace, d_hidden, freeze, &mut grads);
        (loss, grads)
    }

    /// Squared-error loss `(y - target)^2` for one sequence and its gradients.
    pub(crate) fn regression_loss_and_grad(
        &self,
        tokens: &[TokenId],
        mask: &[bool],
        target: f64,
        freeze: &FreezeMask,
        mode: Mode<'_>,
    ) -> (f64, f64, Params) {
        let last = mask.iter().rposition(|&m| m).unwrap_or(0);
        let trace = self.trace(Input::Tokens(tokens), mask, mode);
        let y = self.head(&trace.hidden, last);
        let err = y - target;
        let back = self.backward_regression(&trace, last, 2.0 * err, freeze);
        (err * err, y, back.grads)
    }
}

/// Reverse pass through `y = x W + s (x~ A^T) B^T`. Returns `dx`.
#[allow(clippy::too_many_arguments)]
fn backprop_projection(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    p: Projection,
    adapters: Option<&LayerAdapters>,
    caches: &[AdapterCache],
    s: f64,
    dw: Option<&mut Array2<f64>>,
    adapter_grads: Option<&mut LayerAdapters>,
) -> Array2<f64> {
    if let Some(dw) = dw {
        *dw += &x.t().dot(dy);
    }
    let mut dx = dy.dot(&w.t());
    if let Some(ad) = adapters.and_then(|la| la.get(p)) {
        let cache = caches
            .iter()
            .find(|c| c.projection == p)
            .expect("adapter cache recorded in forward");
        let d_low = dy.dot(&ad.b) * s;
        if let Some(g) = adapter_grads.and_then(|la| la.get_mut(p)) {
            accumulate_adapter(g, dy, cache, &d_low, s);
        }
        let mut d_in = d_low.dot(&ad.a);
        if let Some(keep) = &cache.keep {
            d_in *= keep;
        }
        dx += &d_in;
    }
    dx
}

fn accumulate_adapter(g: &mut Adapter, dy: &Array2<f64>, cache: &AdapterCache, d_low: &Array2<f64>, s: f64) {
    g.b.scaled_add(s, &dy.t().dot(&cache.low));
    g.a += &d_low.t().dot(&cache.input);
}
