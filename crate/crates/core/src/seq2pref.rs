//! The Seq2Pref network: embed an item sequence, run a GRU with multiplicative
//! attention, decode a posterior over dictionary rows through a masked
//! exponential, and interpolate the dictionary into a dynamic preference
//! vector.
//!
//! Linear maps follow the `[d_in x d_out]` convention of `kernel::ops`:
//! `out = input^T W + b`.

use crate::error::{Error, Result};
use crate::kernel::ops::{
    affine_backward, affine_forward, dropout, softmax_backward, softmax_in_place, Activation, Mode,
};
use crate::kernel::{glorot_uniform, orthogonal_init, ParamSlot};
use crate::rng::Rng;
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{axpy, dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqDims {
    pub d_embed: usize,
    pub d_gru: usize,
    pub d_dict: usize,
    pub d_user: usize,
}

#[derive(Debug, Clone)]
pub struct Seq2PrefParams<T> {
    pub item_embed: ParamSlot<T>, // [n x d_embed]
    // GRU gates: update, reset, candidate.
    pub gru_w_update: ParamSlot<T>, // [d_embed x d_gru]
    pub gru_w_reset: ParamSlot<T>,
    pub gru_w_cand: ParamSlot<T>,
    pub gru_u_update: ParamSlot<T>, // [d_gru x d_gru], orthogonalized
    pub gru_u_reset: ParamSlot<T>,
    pub gru_u_cand: ParamSlot<T>,
    pub gru_b_update: ParamSlot<T>, // [d_gru]
    pub gru_b_reset: ParamSlot<T>,
    pub gru_b_cand: ParamSlot<T>,
    // Attention query transform.
    pub attn_w: ParamSlot<T>, // [d_gru x d_gru]
    pub attn_b: ParamSlot<T>, // [d_gru]
    // Posterior decoder over the fusion vector.
    pub dec_w: ParamSlot<T>, // [4*d_gru x d_dict]
    pub dec_b: ParamSlot<T>, // [d_dict]
    // The dictionary whose rows span dynamic-preference space.
    pub dict: ParamSlot<T>, // [d_dict x d_user]
    pub activation: Activation,
    pub p_drop: f64,
}

impl<T: Scalar> Seq2PrefParams<T> {
    pub fn init(
        n_items: usize,
        dims: SeqDims,
        activation: Activation,
        p_drop: f64,
        rng: &Rng,
    ) -> Seq2PrefParams<T> {
        let init = rng.stream("seq2pref_init");
        let mat = |name: &str, fan_in: usize, fan_out: usize| {
            ParamSlot::new(
                format!("net.{name}"),
                glorot_uniform(fan_in, fan_out, &mut init.stream(name)),
            )
        };
        let ortho = |name: &str, n: usize| {
            ParamSlot::new(
                format!("net.{name}"),
                orthogonal_init(n, &mut init.stream(name)),
            )
        };
        let bias =
            |name: &str, n: usize| ParamSlot::new(format!("net.{name}"), Tensor::zeros(&[n]));
        Seq2PrefParams {
            item_embed: mat("item_embed", n_items, dims.d_embed),
            gru_w_update: mat("gru_w_update", dims.d_embed, dims.d_gru),
            gru_w_reset: mat("gru_w_reset", dims.d_embed, dims.d_gru),
            gru_w_cand: mat("gru_w_cand", dims.d_embed, dims.d_gru),
            gru_u_update: ortho("gru_u_update", dims.d_gru),
            gru_u_reset: ortho("gru_u_reset", dims.d_gru),
            gru_u_cand: ortho("gru_u_cand", dims.d_gru),
            gru_b_update: bias("gru_b_update", dims.d_gru),
            gru_b_reset: bias("gru_b_reset", dims.d_gru),
            gru_b_cand: bias("gru_b_cand", dims.d_gru),
            attn_w: mat("attn_w", dims.d_gru, dims.d_gru),
            attn_b: bias("attn_b", dims.d_gru),
            dec_w: mat("dec_w", 4 * dims.d_gru, dims.d_dict),
            dec_b: bias("dec_b", dims.d_dict),
            dict: mat("dict", dims.d_dict, dims.d_user),
            activation,
            p_drop,
        }
    }

    pub fn dims(&self) -> SeqDims {
        SeqDims {
            d_embed: self.item_embed.value.cols(),
            d_gru: self.attn_b.value.len(),
            d_dict: self.dec_b.value.len(),
            d_user: self.dict.value.cols(),
        }
    }

    pub fn num_items(&self) -> usize {
        self.item_embed.value.rows()
    }

    pub fn slots(&self) -> Vec<&ParamSlot<T>> {
        vec![
            &self.item_embed,
            &self.gru_w_update,
            &self.gru_w_reset,
            &self.gru_w_cand,
            &self.gru_u_update,
            &self.gru_u_reset,
            &self.gru_u_cand,
            &self.gru_b_update,
            &self.gru_b_reset,
            &self.gru_b_cand,
            &self.attn_w,
            &self.attn_b,
            &self.dec_w,
            &self.dec_b,
            &self.dict,
        ]
    }

    pub fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        vec![
            &mut self.item_embed,
            &mut self.gru_w_update,
            &mut self.gru_w_reset,
            &mut self.gru_w_cand,
            &mut self.gru_u_update,
            &mut self.gru_u_reset,
            &mut self.gru_u_cand,
            &mut self.gru_b_update,
            &mut self.gru_b_reset,
            &mut self.gru_b_cand,
            &mut self.attn_w,
            &mut self.attn_b,
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.dict,
        ]
    }

    /// One GRU step: r and the update gate from sigmoid pre-activations, a
    /// tanh candidate with the reset gate applied to the recurrent term, and
    /// a convex combination of previous state and candidate.
    pub fn gru_step(&self, h_prev: &[T], item: usize) -> Result<Vec<T>> {
        if item >= self.num_items() {
            return Err(Error::Data(format!(
                "item index {item} out of range (n={})",
                self.num_items()
            )));
        }
        let e = self.item_embed.value.row(item).to_vec();
        Ok(self.gru_cell(&e, h_prev).h)
    }

    fn gru_cell(&self, e: &[T], h_prev: &[T]) -> GruCell<T> {
        let d_gru = self.dims().d_gru;
        let mut reset = vec![T::ZERO; d_gru];
        affine_forward(
            e,
            &self.gru_w_reset.value,
            Some(self.gru_b_reset.value.as_slice()),
            &mut reset,
        );
        let mut tmp = vec![T::ZERO; d_gru];
        affine_forward(h_prev, &self.gru_u_reset.value, None, &mut tmp);
        for (r, t) in reset.iter_mut().zip(&tmp) {
            *r = sigmoid(*r + *t);
        }

        let mut update = vec![T::ZERO; d_gru];
        affine_forward(
            e,
            &self.gru_w_update.value,
            Some(self.gru_b_update.value.as_slice()),
            &mut update,
        );
        tmp.fill(T::ZERO);
        affine_forward(h_prev, &self.gru_u_update.value, None, &mut tmp);
        for (z, t) in update.iter_mut().zip(&tmp) {
            *z = sigmoid(*z + *t);
        }

        let reset_h: Vec<T> = reset.iter().zip(h_prev).map(|(&r, &h)| r * h).collect();
        let mut cand = vec![T::ZERO; d_gru];
        affine_forward(
            e,
            &self.gru_w_cand.value,
            Some(self.gru_b_cand.value.as_slice()),
            &mut cand,
        );
        tmp.fill(T::ZERO);
        affine_forward(&reset_h, &self.gru_u_cand.value, None, &mut tmp);
        for (c, t) in cand.iter_mut().zip(&tmp) {
            *c = (*c + *t).tanh();
        }

        let h: Vec<T> = (0..d_gru)
            .map(|i| (T::ONE - update[i]) * h_prev[i] + update[i] * cand[i])
            .collect();
        GruCell {
            reset,
            update,
            reset_h,
            cand,
            h,
        }
    }

    /// Scaled multiplicative attention over `h_list` with the query built
    /// from position `t` (1-based). Returns the weights and the context.
    pub fn attention(&self, h_list: &[Vec<T>], t: usize) -> Result<(Vec<T>, Vec<T>)> {
        if h_list.is_empty() {
            return Err(Error::Data("attention over empty state list".into()));
        }
        if t == 0 || t > h_list.len() {
            return Err(Error::Data(format!(
                "attention position {t} outside 1..={}",
                h_list.len()
            )));
        }
        let att = self.attend(h_list, t - 1);
        Ok((att.alpha, att.g))
    }

    fn attend(&self, span: &[Vec<T>], q_idx: usize) -> Attend<T> {
        let d_gru = self.dims().d_gru;
        let mut q = vec![T::ZERO; d_gru];
        affine_forward(
            &span[q_idx],
            &self.attn_w.value,
            Some(self.attn_b.value.as_slice()),
            &mut q,
        );
        for v in q.iter_mut() {
            *v = v.tanh();
        }
        let scale = T::from_f64(1.0 / (d_gru as f64).sqrt());
        let mut alpha: Vec<T> = span.iter().map(|h| dot(h, &q) * scale).collect();
        softmax_in_place(&mut alpha);
        let mut g = vec![T::ZERO; d_gru];
        for (a, h) in alpha.iter().zip(span) {
            axpy(*a, h, &mut g);
        }
        Attend { q, alpha, g }
    }

    /// Posterior over dictionary rows from the current state and its
    /// attention context. `rng` drives the dropout mask in train mode.
    pub fn decode_posterior(
        &self,
        h_t: &[T],
        g_t: &[T],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Vec<T>> {
        let d_gru = self.dims().d_gru;
        if h_t.len() != d_gru || g_t.len() != d_gru {
            return Err(Error::Shape(format!(
                "decode_posterior wants {d_gru}-vectors, got {} and {}",
                h_t.len(),
                g_t.len()
            )));
        }
        Ok(self.decode(h_t, g_t, mode, rng).p)
    }

    fn decode(&self, h_t: &[T], g_t: &[T], mode: Mode, rng: &mut Rng) -> Decode<T> {
        let d_gru = h_t.len();
        let d_dict = self.dims().d_dict;
        // Fusion features: state, context, difference, second-order product.
        let mut z = Vec::with_capacity(4 * d_gru);
        z.extend_from_slice(h_t);
        z.extend_from_slice(g_t);
        for i in 0..d_gru {
            z.push(h_t[i] - g_t[i]);
        }
        for i in 0..d_gru {
            z.push(h_t[i] * g_t[i]);
        }
        let (zd, z_mask) = dropout(&z, self.p_drop, mode, rng);

        let mut c = vec![T::ZERO; d_dict];
        affine_forward(
            &zd,
            &self.dec_w.value,
            Some(self.dec_b.value.as_slice()),
            &mut c,
        );
        for v in c.iter_mut() {
            *v = self.activation.apply(*v);
        }
        // Masked exponential: exactly-zero activations stay exactly zero,
        // which keeps the posterior sparse under ReLU.
        let mut c_exp = vec![T::ZERO; d_dict];
        let mut sum = T::ZERO;
        for (o, &v) in c_exp.iter_mut().zip(&c) {
            if v != T::ZERO {
                *o = v.exp();
                sum += *o;
            }
        }
        let (p, uniform) = if sum == T::ZERO {
            // All components masked: maximum-entropy fallback.
            (vec![T::ONE / T::from_f64(d_dict as f64); d_dict], true)
        } else {
            (c_exp.iter().map(|&v| v / sum).collect(), false)
        };
        Decode {
            z,
            z_mask,
            zd,
            c,
            c_exp,
            sum,
            uniform,
            p,
        }
    }
}

/// ubar = p^T D, the convex combination of dictionary rows.
pub fn dynamic_preference<T: Scalar>(p: &[T], dict: &Tensor<T>) -> Result<Vec<T>> {
    if p.len() != dict.rows() {
        return Err(Error::Shape(format!(
            "posterior length {} vs dictionary rows {}",
            p.len(),
            dict.rows()
        )));
    }
    let mut u_bar = vec![T::ZERO; dict.cols()];
    affine_forward(p, dict, None, &mut u_bar);
    Ok(u_bar)
}

struct GruCell<T> {
    reset: Vec<T>,
    update: Vec<T>,
    reset_h: Vec<T>,
    cand: Vec<T>,
    h: Vec<T>,
}

struct Attend<T> {
    q: Vec<T>,
    alpha: Vec<T>,
    g: Vec<T>,
}

struct Decode<T> {
    z: Vec<T>,
    z_mask: Option<Vec<T>>,
    zd: Vec<T>,
    c: Vec<T>,
    c_exp: Vec<T>,
    sum: T,
    uniform: bool,
    p: Vec<T>,
}

pub(crate) struct GruStepCache<T> {
    item: usize,
    /// Post-dropout embedding actually fed to the gates.
    e: Vec<T>,
    e_mask: Option<Vec<T>>,
    reset: Vec<T>,
    update: Vec<T>,
    reset_h: Vec<T>,
    cand: Vec<T>,
}

pub(crate) struct DecodeCache<T> {
    /// State index the query was built from (into `states`).
    pub q_idx: usize,
    /// First state index of the attention span.
    pub span_lo: usize,
    q: Vec<T>,
    alpha: Vec<T>,
    decode: Decode<T>,
    pub u_bar: Vec<T>,
}

impl<T: Scalar> DecodeCache<T> {
    /// Which decoder components survived the activation, plus the fallback
    /// flag. Finite-difference checks compare this across perturbations to
    /// avoid measuring across a kink.
    pub(crate) fn active_mask(&self) -> impl Iterator<Item = bool> + '_ {
        self.decode
            .c
            .iter()
            .map(|&v| v != T::ZERO)
            .chain(std::iter::once(self.decode.uniform))
    }

    fn decode_g(&self) -> Vec<T> {
        // g is recoverable from z's second block; kept out of the cache to
        // avoid a third copy.
        let d = self.q.len();
        self.decode.z[d..2 * d].to_vec()
    }
}

/// All intermediate values of one forward run over a fragment, enough for the
/// backward pass.
pub(crate) struct FragmentForward<T> {
    /// states[0] is the initial state (zeros or carried); states[k] the state
    /// after consuming k events.
    pub states: Vec<Vec<T>>,
    gru: Vec<GruStepCache<T>>,
    /// decodes[k] backs the prediction of fragment event k+1; None when
    /// there is no history at all (fresh sequence, first event).
    pub decodes: Vec<Option<DecodeCache<T>>>,
}

impl<T: Scalar> FragmentForward<T> {
    pub fn len(&self) -> usize {
        self.gru.len()
    }

    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("states never empty")
    }
}

/// Per-position outputs of a full-sequence forward pass: state, attention
/// context, posterior, and dynamic preference after each consumed event.
pub struct SeqState<T> {
    pub h: Vec<Vec<T>>,
    pub g: Vec<Vec<T>>,
    pub p: Vec<Vec<T>>,
    pub u_bar: Vec<Vec<T>>,
}

impl<T: Scalar> Seq2PrefParams<T> {
    fn embed_item(
        &self,
        item: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Vec<T>, Option<Vec<T>>)> {
        if item >= self.num_items() {
            return Err(Error::Data(format!(
                "item index {item} out of range (n={})",
                self.num_items()
            )));
        }
        Ok(dropout(
            self.item_embed.value.row(item),
            self.p_drop,
            mode,
            rng,
        ))
    }

    fn run_states(
        &self,
        items: &[usize],
        h_init: Vec<T>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Vec<Vec<T>>, Vec<GruStepCache<T>>)> {
        let mut states = Vec::with_capacity(items.len() + 1);
        states.push(h_init);
        let mut caches = Vec::with_capacity(items.len());
        for &item in items {
            let (e, e_mask) = self.embed_item(item, mode, rng)?;
            let cell = self.gru_cell(&e, states.last().unwrap());
            caches.push(GruStepCache {
                item,
                e,
                e_mask,
                reset: cell.reset,
                update: cell.update,
                reset_h: cell.reset_h,
                cand: cell.cand,
            });
            states.push(cell.h);
        }
        Ok((states, caches))
    }

    fn decode_at(
        &self,
        states: &[Vec<T>],
        q_idx: usize,
        span_lo: usize,
        mode: Mode,
        rng: &mut Rng,
    ) -> DecodeCache<T> {
        let span = &states[span_lo..=q_idx];
        let att = self.attend(span, q_idx - span_lo);
        let decode = self.decode(&states[q_idx], &att.g, mode, rng);
        let u_bar = dynamic_preference(&decode.p, &self.dict.value).expect("dims fixed at init");
        DecodeCache {
            q_idx,
            span_lo,
            q: att.q,
            alpha: att.alpha,
            decode,
            u_bar,
        }
    }

    /// Forward over a training fragment. With `carry`, the initial state both
    /// seeds the GRU and joins the attention span, so the first event of a
    /// continued window is still predicted from history.
    pub(crate) fn forward_fragment(
        &self,
        items: &[usize],
        carry_state: Option<Vec<T>>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<FragmentForward<T>> {
        if items.is_empty() {
            return Err(Error::Data("empty fragment".into()));
        }
        let d_gru = self.dims().d_gru;
        let carry = carry_state.is_some();
        let h_init = carry_state.unwrap_or_else(|| vec![T::ZERO; d_gru]);
        let (states, gru) = self.run_states(items, h_init, mode, rng)?;
        let span_lo = if carry { 0 } else { 1 };
        let mut decodes = Vec::with_capacity(items.len());
        for k in 0..items.len() {
            // Prediction of event k+1 queries the state after k events.
            if k < span_lo {
                decodes.push(None);
            } else {
                decodes.push(Some(self.decode_at(&states, k, span_lo, mode, rng)));
            }
        }
        Ok(FragmentForward {
            states,
            gru,
            decodes,
        })
    }

    /// Full-sequence forward from a zero initial state. Position t of the
    /// result holds the state after consuming events 1..=t; the score for the
    /// event at position t+1 uses `u_bar[t-1]`, and the first event of a
    /// fresh sequence has no history (its dynamic preference is zero).
    pub fn forward_sequence(
        &self,
        items: &[usize],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<SeqState<T>> {
        if items.is_empty() {
            return Err(Error::Data("empty sequence".into()));
        }
        let d_gru = self.dims().d_gru;
        let (states, _gru) = self.run_states(items, vec![T::ZERO; d_gru], mode, rng)?;
        let mut out = SeqState {
            h: Vec::with_capacity(items.len()),
            g: Vec::with_capacity(items.len()),
            p: Vec::with_capacity(items.len()),
            u_bar: Vec::with_capacity(items.len()),
        };
        for t in 1..=items.len() {
            let cache = self.decode_at(&states, t, 1, mode, rng);
            out.h.push(states[t].clone());
            out.g.push(cache.decode_g());
            out.p.push(cache.decode.p.clone());
            out.u_bar.push(cache.u_bar.clone());
        }
        Ok(out)
    }

    /// Reverse pass over a fragment. `d_ubar[k]` is dL/d(ubar) for the
    /// prediction of fragment event k+1 (None where no decode ran or no
    /// example used it). Gradients accumulate into the parameter slots.
    /// The initial state is treated as a constant: gradients are truncated
    /// at the fragment boundary.
    pub(crate) fn backward_fragment(
        &mut self,
        fwd: &FragmentForward<T>,
        d_ubar: &[Option<Vec<T>>],
    ) {
        let dims = self.dims();
        let d_gru = dims.d_gru;
        let len = fwd.len();
        debug_assert_eq!(d_ubar.len(), len);
        let mut d_states: Vec<Vec<T>> = vec![vec![T::ZERO; d_gru]; len + 1];

        for (k, (cache, du)) in fwd.decodes.iter().zip(d_ubar).enumerate() {
            let (Some(cache), Some(du)) = (cache, du) else {
                continue;
            };
            debug_assert_eq!(cache.q_idx, k);
            self.backward_decode(cache, du, &fwd.states, &mut d_states);
        }

        // GRU backward through time; d_states[0] is dropped (truncation).
        for t in (1..=len).rev() {
            let cache = &fwd.gru[t - 1];
            let h_prev = &fwd.states[t - 1];
            let dh = std::mem::take(&mut d_states[t]);

            let mut d_update = vec![T::ZERO; d_gru];
            let mut d_cand_pre = vec![T::ZERO; d_gru];
            let mut dh_prev = vec![T::ZERO; d_gru];
            for i in 0..d_gru {
                d_update[i] = dh[i] * (cache.cand[i] - h_prev[i]);
                let d_cand = dh[i] * cache.update[i];
                d_cand_pre[i] = d_cand * (T::ONE - cache.cand[i] * cache.cand[i]);
                dh_prev[i] = dh[i] * (T::ONE - cache.update[i]);
            }

            let mut de = vec![T::ZERO; dims.d_embed];
            let mut d_reset_h = vec![T::ZERO; d_gru];
            affine_backward(
                &cache.e,
                &self.gru_w_cand.value,
                &d_cand_pre,
                &mut self.gru_w_cand.grad,
                Some(self.gru_b_cand.grad.as_mut_slice()),
                Some(&mut de),
            );
            affine_backward(
                &cache.reset_h,
                &self.gru_u_cand.value,
                &d_cand_pre,
                &mut self.gru_u_cand.grad,
                None,
                Some(&mut d_reset_h),
            );

            let mut d_reset_pre = vec![T::ZERO; d_gru];
            let mut d_update_pre = vec![T::ZERO; d_gru];
            for i in 0..d_gru {
                dh_prev[i] += d_reset_h[i] * cache.reset[i];
                let d_reset = d_reset_h[i] * h_prev[i];
                d_reset_pre[i] = d_reset * cache.reset[i] * (T::ONE - cache.reset[i]);
                d_update_pre[i] = d_update[i] * cache.update[i] * (T::ONE - cache.update[i]);
            }

            affine_backward(
                &cache.e,
                &self.gru_w_update.value,
                &d_update_pre,
                &mut self.gru_w_update.grad,
                Some(self.gru_b_update.grad.as_mut_slice()),
                Some(&mut de),
            );
            affine_backward(
                h_prev,
                &self.gru_u_update.value,
                &d_update_pre,
                &mut self.gru_u_update.grad,
                None,
                Some(&mut dh_prev),
            );
            affine_backward(
                &cache.e,
                &self.gru_w_reset.value,
                &d_reset_pre,
                &mut self.gru_w_reset.grad,
                Some(self.gru_b_reset.grad.as_mut_slice()),
                Some(&mut de),
            );
            affine_backward(
                h_prev,
                &self.gru_u_reset.value,
                &d_reset_pre,
                &mut self.gru_u_reset.grad,
                None,
                Some(&mut dh_prev),
            );

            if let Some(mask) = &cache.e_mask {
                for (d, m) in de.iter_mut().zip(mask) {
                    *d *= *m;
                }
            }
            let grad_row = self.item_embed.grad.row_mut(cache.item);
            for (g, d) in grad_row.iter_mut().zip(&de) {
                *g += *d;
            }
            for (acc, d) in d_states[t - 1].iter_mut().zip(&dh_prev) {
                *acc += *d;
            }
        }
    }

    fn backward_decode(
        &mut self,
        cache: &DecodeCache<T>,
        du: &[T],
        states: &[Vec<T>],
        d_states: &mut [Vec<T>],
    ) {
        let d_gru = self.dims().d_gru;
        let d_dict = self.dims().d_dict;
        let dec = &cache.decode;

        // ubar = p^T dict.
        let mut dp = vec![T::ZERO; d_dict];
        affine_backward(
            &dec.p,
            &self.dict.value,
            du,
            &mut self.dict.grad,
            None,
            Some(&mut dp),
        );
        if dec.uniform {
            // The fallback posterior is constant; nothing flows past it.
            return;
        }

        // p = c_exp / sum.
        let mut inner = T::ZERO;
        for i in 0..d_dict {
            inner += dp[i] * dec.p[i];
        }
        // dL/dc_pre via the masked exponential (mask held constant) and the
        // activation derivative.
        let mut dc_pre = vec![T::ZERO; d_dict];
        for i in 0..d_dict {
            let dc_exp = (dp[i] - inner) / dec.sum;
            let dc = dc_exp * dec.c_exp[i];
            dc_pre[i] = dc * self.activation.derivative_from_output(dec.c[i]);
        }

        let mut dzd = vec![T::ZERO; 4 * d_gru];
        affine_backward(
            &dec.zd,
            &self.dec_w.value,
            &dc_pre,
            &mut self.dec_w.grad,
            Some(self.dec_b.grad.as_mut_slice()),
            Some(&mut dzd),
        );
        if let Some(mask) = &dec.z_mask {
            for (d, m) in dzd.iter_mut().zip(mask) {
                *d *= *m;
            }
        }

        // z = concat(h, g, h - g, h*g).
        let h_q = &states[cache.q_idx];
        let g = &dec.z[d_gru..2 * d_gru];
        let mut dh_q = vec![T::ZERO; d_gru];
        let mut dg = vec![T::ZERO; d_gru];
        for i in 0..d_gru {
            dh_q[i] = dzd[i] + dzd[2 * d_gru + i] + dzd[3 * d_gru + i] * g[i];
            dg[i] = dzd[d_gru + i] - dzd[2 * d_gru + i] + dzd[3 * d_gru + i] * h_q[i];
        }

        // g = sum_a alpha_a h_a over the span.
        let span = &states[cache.span_lo..=cache.q_idx];
        let mut d_alpha = vec![T::ZERO; span.len()];
        for (a, h_a) in span.iter().enumerate() {
            d_alpha[a] = dot(h_a, &dg);
            axpy(cache.alpha[a], &dg, &mut d_states[cache.span_lo + a]);
        }
        let mut d_e = vec![T::ZERO; span.len()];
        softmax_backward(&cache.alpha, &d_alpha, &mut d_e);

        // e_a = (h_a . q) / sqrt(d_gru).
        let scale = T::from_f64(1.0 / (d_gru as f64).sqrt());
        let mut dq = vec![T::ZERO; d_gru];
        for (a, h_a) in span.iter().enumerate() {
            let w = d_e[a] * scale;
            axpy(w, &cache.q, &mut d_states[cache.span_lo + a]);
            axpy(w, h_a, &mut dq);
        }

        // q = tanh(h_q^T attn_w + attn_b).
        let mut dq_pre = vec![T::ZERO; d_gru];
        for i in 0..d_gru {
            dq_pre[i] = dq[i] * (T::ONE - cache.q[i] * cache.q[i]);
        }
        affine_backward(
            h_q,
            &self.attn_w.value,
            &dq_pre,
            &mut self.attn_w.grad,
            Some(self.attn_b.grad.as_mut_slice()),
            Some(&mut dh_q),
        );

        for (acc, d) in d_states[cache.q_idx].iter_mut().zip(&dh_q) {
            *acc += *d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed_params(n_items: usize, dims: SeqDims) -> Seq2PrefParams<f64> {
        let rng = Rng::from_seed(0);
        let mut p: Seq2PrefParams<f64> =
            Seq2PrefParams::init(n_items, dims, Activation::Relu, 0.0, &rng);
        for slot in p.slots_mut() {
            slot.value.fill(0.0);
        }
        p
    }

    fn random_params(n_items: usize, dims: SeqDims, seed: u64) -> Seq2PrefParams<f64> {
        Seq2PrefParams::init(n_items, dims, Activation::Relu, 0.0, &Rng::from_seed(seed))
    }

    const DIMS: SeqDims = SeqDims {
        d_embed: 3,
        d_gru: 4,
        d_dict: 5,
        d_user: 2,
    };

    #[test]
    fn gru_zero_weights_zero_state() {
        let p = zeroed_params(3, DIMS);
        let h = p.gru_step(&[0.0; 4], 1).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let p = zeroed_params(3, DIMS);
        let v = [0.8, -0.4, 0.2, 1.0];
        let h = p.gru_step(&v, 0).unwrap();
        for (hi, vi) in h.iter().zip(&v) {
            assert!((hi - 0.5 * vi).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_stays_in_unit_box() {
        let mut rng = Rng::from_seed(5);
        for trial in 0..50 {
            let p = random_params(6, DIMS, trial);
            let mut h: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            for step in 0..10 {
                h = p.gru_step(&h, step % 6).unwrap();
                assert!(h.iter().all(|x| (-1.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn gru_rejects_bad_item() {
        let p = zeroed_params(3, DIMS);
        assert!(p.gru_step(&[0.0; 4], 3).is_err());
    }

    #[test]
    fn attention_singleton() {
        let p = random_params(3, DIMS, 2);
        let h = vec![vec![0.3, -0.1, 0.5, 0.2]];
        let (alpha, g) = p.attention(&h, 1).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(g, h[0]);
    }

    #[test]
    fn attention_uniform_over_identical_states() {
        let p = random_params(3, DIMS, 3);
        let h = vec![vec![0.3, -0.1, 0.5, 0.2]; 4];
        let (alpha, g) = p.attention(&h, 2).unwrap();
        for &a in &alpha {
            assert!((a - 0.25).abs() < 1e-12);
        }
        for (gi, hi) in g.iter().zip(&h[0]) {
            assert!((gi - hi).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_hand_softmax() {
        // Identity query transform, zero bias: q = tanh(h_t), scores are
        // scaled dot products.
        let mut p = zeroed_params(3, DIMS);
        for i in 0..4 {
            *p.attn_w.value.at_mut(i, i) = 1.0;
        }
        let h = vec![
            vec![0.5, 0.0, -0.5, 0.2],
            vec![-0.1, 0.3, 0.4, 0.0],
            vec![0.2, 0.2, 0.1, -0.3],
        ];
        let (alpha, g) = p.attention(&h, 3).unwrap();

        let q: Vec<f64> = h[2].iter().map(|x| x.tanh()).collect();
        let scale = 1.0 / 4.0_f64.sqrt();
        let e: Vec<f64> = h.iter().map(|hj| dot(hj, &q) * scale).collect();
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = e.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (a, ex) in alpha.iter().zip(&exps) {
            assert!((a - ex / s).abs() < 1e-9);
        }
        let mut expect_g = vec![0.0; 4];
        for (j, hj) in h.iter().enumerate() {
            for i in 0..4 {
                expect_g[i] += exps[j] / s * hj[i];
            }
        }
        for (a, b) in g.iter().zip(&expect_g) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_exp_normalization_hand_values() {
        // Arrange dec_w/dec_b so c comes out as (ln 2, 0, ln 3, 0, 0) exactly:
        // zero weights and bias = targets, with relu passing them through.
        let mut p = zeroed_params(3, DIMS);
        let targets = [2.0f64.ln(), 0.0, 3.0f64.ln(), 0.0, 0.0];
        for (i, &t) in targets.iter().enumerate() {
            p.dec_b.value.as_mut_slice()[i] = t;
        }
        let mut rng = Rng::from_seed(0);
        let pr = p
            .decode_posterior(&[0.1; 4], &[0.2; 4], Mode::Eval, &mut rng)
            .unwrap();
        assert!((pr[0] - 0.4).abs() < 1e-12);
        assert_eq!(pr[1], 0.0);
        assert!((pr[2] - 0.6).abs() < 1e-12);
        assert_eq!(pr[3], 0.0);
        assert_eq!(pr[4], 0.0);
    }

    #[test]
    fn all_masked_posterior_falls_back_to_uniform() {
        let mut p = zeroed_params(3, DIMS);
        // Negative biases: relu zeroes every component.
        for i in 0..5 {
            p.dec_b.value.as_mut_slice()[i] = -1.0;
        }
        let mut rng = Rng::from_seed(0);
        let pr = p
            .decode_posterior(&[0.1; 4], &[0.2; 4], Mode::Eval, &mut rng)
            .unwrap();
        for &v in &pr {
            assert_eq!(v, 0.2);
        }
    }

    #[test]
    fn posterior_is_simplex_point() {
        let mut rng = Rng::from_seed(17);
        for trial in 0..100 {
            let p = random_params(4, DIMS, 1000 + trial);
            let h: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let g: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let post = p.decode_posterior(&h, &g, Mode::Eval, &mut rng).unwrap();
            let sum: f64 = post.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(post.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn carried_state_reproduces_unsplit_final_state() {
        let p = random_params(6, DIMS, 33);
        let items = [0usize, 3, 1, 5, 2, 4, 0];
        let mut rng = Rng::from_seed(0);
        let full = p
            .forward_fragment(&items, None, Mode::Eval, &mut rng)
            .unwrap();
        for cut in 1..items.len() {
            let head = p
                .forward_fragment(&items[..cut], None, Mode::Eval, &mut rng)
                .unwrap();
            let tail = p
                .forward_fragment(
                    &items[cut..],
                    Some(head.final_state().to_vec()),
                    Mode::Eval,
                    &mut rng,
                )
                .unwrap();
            assert_eq!(tail.final_state(), full.final_state(), "cut {cut}");
        }
    }

    #[test]
    fn dynamic_preference_cases() {
        let dict = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 9.0, 9.0, 0.0, 1.0]).unwrap();
        // Zero dictionary.
        let zero = Tensor::<f64>::zeros(&[3, 2]);
        assert_eq!(
            dynamic_preference(&[0.2, 0.3, 0.5], &zero).unwrap(),
            vec![0.0, 0.0]
        );
        // One-hot selects a row.
        assert_eq!(
            dynamic_preference(&[0.0, 1.0, 0.0], &dict).unwrap(),
            vec![9.0, 9.0]
        );
        // Hand interpolation.
        let u = dynamic_preference(&[0.4, 0.0, 0.6], &dict).unwrap();
        assert!((u[0] - 0.4).abs() < 1e-12 && (u[1] - 0.6).abs() < 1e-12);
        // Shape guard.
        assert!(dynamic_preference(&[1.0, 0.0], &dict).is_err());
    }

    #[test]
    fn forward_sequence_shapes_and_t1() {
        let p = random_params(5, DIMS, 7);
        let mut rng = Rng::from_seed(1);
        let state = p
            .forward_sequence(&[2, 0, 4], Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(state.h.len(), 3);
        assert_eq!(state.g.len(), 3);
        assert_eq!(state.p.len(), 3);
        assert_eq!(state.u_bar.len(), 3);
        assert!(p.forward_sequence(&[], Mode::Eval, &mut rng).is_err());

        // T=1: the singleton attention context equals the state.
        let one = p.forward_sequence(&[2], Mode::Eval, &mut rng).unwrap();
        for (a, b) in one.g[0].iter().zip(&one.h[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_sequence_matches_hand_chained_ops() {
        let p = random_params(5, DIMS, 9);
        let mut rng = Rng::from_seed(1);
        let state = p.forward_sequence(&[1, 3], Mode::Eval, &mut rng).unwrap();

        let h1 = p.gru_step(&[0.0; 4], 1).unwrap();
        let h2 = p.gru_step(&h1, 3).unwrap();
        let (_, g2) = p.attention(&[h1.clone(), h2.clone()], 2).unwrap();
        let p2 = p
            .decode_posterior(&h2, &g2, Mode::Eval, &mut Rng::from_seed(0))
            .unwrap();
        let u2 = dynamic_preference(&p2, &p.dict.value).unwrap();
        for (a, b) in state.u_bar[1].iter().zip(&u2) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in state.h[1].iter().zip(&h2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reordering_items_changes_dynamic_preference() {
        let p = random_params(6, DIMS, 21);
        let mut rng = Rng::from_seed(2);
        let fwd = p
            .forward_sequence(&[0, 1, 2], Mode::Eval, &mut rng)
            .unwrap();
        let rev = p
            .forward_sequence(&[2, 1, 0], Mode::Eval, &mut rng)
            .unwrap();
        let diff: f64 = fwd.u_bar[2]
            .iter()
            .zip(&rev.u_bar[2])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-8, "order had no effect: diff {diff}");
    }

    #[test]
    fn relu_masking_zeroes_posterior_components() {
        let mut found_zero = false;
        for seed in 0..20 {
            let p = random_params(4, DIMS, 3000 + seed);
            let mut rng = Rng::from_seed(seed);
            let h: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let g: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let post = p.decode_posterior(&h, &g, Mode::Eval, &mut rng).unwrap();
            let sum: f64 = post.iter().sum();
            if (sum - 1.0).abs() < 1e-9 && post.contains(&0.0) && post.iter().any(|&x| x > 0.0) {
                found_zero = true;
                break;
            }
        }
        assert!(found_zero, "no sparse posterior found across seeds");
    }
}
