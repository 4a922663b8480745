"""Hot numeric loops, each with a numba version and a numpy version.

The public names at the bottom of the module point at whichever backend
``_backend.USE_NUMBA`` selects. Both versions are importable directly
(``*_numba`` / ``*_numpy``) so tests and the benchmark can compare them.

Ragged per-prompt logits are stored flat: block ``g`` is
``theta[offsets[g]:offsets[g + 1]]``.
"""

from __future__ import annotations

import math

import numpy as np

from ._backend import USE_NUMBA, njit


# ---------------------------------------------------------------- group gates

def group_advantages_numpy(r_out, r_mix, eps_std, eps_mix, r_max_out, tau_low, tau_high,
                           alpha_base, alpha_prio, eps_norm, force_w, force_d):
    mean_out = r_out.mean(axis=1)
    mean_mix = r_mix.mean(axis=1)
    dev_out = r_out - mean_out[:, None]
    dev_mix = r_mix - mean_mix[:, None]
    sig_out = np.sqrt((dev_out * dev_out).mean(axis=1))
    sig_mix = np.sqrt((dev_mix * dev_mix).mean(axis=1))
    r_g = sig_mix / (sig_out + sig_mix + eps_std)
    if math.isnan(force_w):
        w = np.where((mean_out < r_max_out) & (r_g < eps_mix), r_g, 0.0)
    else:
        w = np.full_like(r_g, force_w)
    if math.isnan(force_d):
        d = np.where((tau_low < mean_out) & (mean_out < tau_high), alpha_prio, alpha_base)
    else:
        d = np.full_like(r_g, force_d)
    a_out = dev_out / (sig_out[:, None] + eps_norm)
    a_mix = dev_mix / (sig_mix[:, None] + eps_norm)
    a_hyper = d[:, None] * ((1.0 - w)[:, None] * a_out + w[:, None] * a_mix)
    return mean_out, mean_mix, sig_out, sig_mix, r_g, w, d, a_out, a_mix, a_hyper


@njit
def group_advantages_numba(r_out, r_mix, eps_std, eps_mix, r_max_out, tau_low, tau_high,
                           alpha_base, alpha_prio, eps_norm, force_w, force_d):
    G, K = r_out.shape
    mean_out = np.empty(G)
    mean_mix = np.empty(G)
    sig_out = np.empty(G)
    sig_mix = np.empty(G)
    r_g = np.empty(G)
    w = np.empty(G)
    d = np.empty(G)
    a_out = np.empty((G, K))
    a_mix = np.empty((G, K))
    a_hyper = np.empty((G, K))
    for g in range(G):
        so = 0.0
        sm = 0.0
        for j in range(K):
            so += r_out[g, j]
            sm += r_mix[g, j]
        mo = so / K
        mm = sm / K
        vo = 0.0
        vm = 0.0
        for j in range(K):
            vo += (r_out[g, j] - mo) ** 2
            vm += (r_mix[g, j] - mm) ** 2
        s_o = math.sqrt(vo / K)
        s_m = math.sqrt(vm / K)
        rg = s_m / (s_o + s_m + eps_std)
        if math.isnan(force_w):
            wg = rg if (mo < r_max_out and rg < eps_mix) else 0.0
        else:
            wg = force_w
        if math.isnan(force_d):
            dg = alpha_prio if (tau_low < mo and mo < tau_high) else alpha_base
        else:
            dg = force_d
        for j in range(K):
            ao = (r_out[g, j] - mo) / (s_o + eps_norm)
            am = (r_mix[g, j] - mm) / (s_m + eps_norm)
            a_out[g, j] = ao
            a_mix[g, j] = am
            a_hyper[g, j] = dg * ((1.0 - wg) * ao + wg * am)
        mean_out[g] = mo
        mean_mix[g] = mm
        sig_out[g] = s_o
        sig_mix[g] = s_m
        r_g[g] = rg
        w[g] = wg
        d[g] = dg
    return mean_out, mean_mix, sig_out, sig_mix, r_g, w, d, a_out, a_mix, a_hyper


# --------------------------------------------------- softmax helpers (ragged)

def block_log_softmax_numpy(theta, offsets):
    G = len(offsets) - 1
    sizes = np.diff(offsets)
    block = np.repeat(np.arange(G), sizes)
    m = np.maximum.reduceat(theta, offsets[:-1])
    z = np.exp(theta - m[block])
    lse = m + np.log(np.add.reduceat(z, offsets[:-1]))
    return theta - lse[block]


@njit
def block_log_softmax_numba(theta, offsets):
    G = offsets.shape[0] - 1
    out = np.empty_like(theta)
    for g in range(G):
        lo = offsets[g]
        hi = offsets[g + 1]
        m = theta[lo]
        for i in range(lo + 1, hi):
            if theta[i] > m:
                m = theta[i]
        s = 0.0
        for i in range(lo, hi):
            s += math.exp(theta[i] - m)
        lse = m + math.log(s)
        for i in range(lo, hi):
            out[i] = theta[i] - lse
    return out


# ------------------------------------------- clipped surrogate and gradient

def clipped_surrogate_numpy(theta, offsets, prompt_idx, actions, old_logp, adv, eps):
    """Return (objective, gradient, new log-probs) of the mean clipped surrogate."""
    logp_all = block_log_softmax_numpy(theta, offsets)
    probs = np.exp(logp_all)
    flat = offsets[prompt_idx] + actions
    new_logp = logp_all[flat]
    ratio = np.exp(new_logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    n = len(adv)
    objective = np.minimum(unclipped, clipped).sum() / n
    coef = np.where(unclipped <= clipped, unclipped, 0.0) / n
    grad = np.zeros_like(theta)
    np.add.at(grad, flat, coef)
    G = len(offsets) - 1
    per_prompt = np.bincount(prompt_idx, weights=coef, minlength=G)
    grad -= np.repeat(per_prompt, np.diff(offsets)) * probs
    return objective, grad, new_logp


@njit
def clipped_surrogate_numba(theta, offsets, prompt_idx, actions, old_logp, adv, eps):
    logp_all = block_log_softmax_numba(theta, offsets)
    G = offsets.shape[0] - 1
    n = adv.shape[0]
    grad = np.zeros_like(theta)
    per_prompt = np.zeros(G)
    new_logp = np.empty(n)
    total = 0.0
    for i in range(n):
        p = prompt_idx[i]
        k = offsets[p] + actions[i]
        lp = logp_all[k]
        new_logp[i] = lp
        r = math.exp(lp - old_logp[i])
        a = adv[i]
        unclipped = r * a
        rc = r
        if rc < 1.0 - eps:
            rc = 1.0 - eps
        elif rc > 1.0 + eps:
            rc = 1.0 + eps
        clipped = rc * a
        if unclipped <= clipped:
            total += unclipped
            c = unclipped / n
            grad[k] += c
            per_prompt[p] += c
        else:
            total += clipped
    for g in range(G):
        c = per_prompt[g]
        if c != 0.0:
            for k in range(offsets[g], offsets[g + 1]):
                grad[k] -= c * math.exp(logp_all[k])
    return total / n, grad, new_logp


# ------------------------------------------------------ categorical sampling

def sample_blocks_numpy(probs, offsets, prompt_idx, uniforms):
    """Inverse-CDF draw of one action per (prompt, uniform) pair."""
    out = np.empty(len(prompt_idx), dtype=np.int64)
    for g in np.unique(prompt_idx):
        lo, hi = offsets[g], offsets[g + 1]
        cdf = np.cumsum(probs[lo:hi])
        sel = prompt_idx == g
        idx = np.searchsorted(cdf, uniforms[sel] * cdf[-1], side="right")
        out[sel] = np.minimum(idx, hi - lo - 1)
    return out


@njit
def sample_blocks_numba(probs, offsets, prompt_idx, uniforms):
    n = prompt_idx.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        g = prompt_idx[i]
        lo = offsets[g]
        hi = offsets[g + 1]
        total = 0.0
        for k in range(lo, hi):
            total += probs[k]
        u = uniforms[i] * total
        acc = 0.0
        choice = hi - lo - 1
        for k in range(lo, hi):
            acc += probs[k]
            if u < acc:
                choice = k - lo
                break
        out[i] = choice
    return out


# ------------------------------------------- enumerable objective evaluation

def expected_values_numpy(thetas, offsets, values, prompt_weights):
    """J(theta) = sum_g w_g sum_a softmax(theta_g)_a values_a, for each row of ``thetas``."""
    G = len(offsets) - 1
    out = np.zeros(thetas.shape[0])
    for g in range(G):
        lo, hi = offsets[g], offsets[g + 1]
        blk = thetas[:, lo:hi]
        m = blk.max(axis=1, keepdims=True)
        z = np.exp(blk - m)
        out += prompt_weights[g] * (z @ values[lo:hi]) / z.sum(axis=1)
    return out


@njit
def expected_values_numba(thetas, offsets, values, prompt_weights):
    N = thetas.shape[0]
    G = offsets.shape[0] - 1
    out = np.zeros(N)
    for row in range(N):
        acc = 0.0
        for g in range(G):
            lo = offsets[g]
            hi = offsets[g + 1]
            m = thetas[row, lo]
            for k in range(lo + 1, hi):
                if thetas[row, k] > m:
                    m = thetas[row, k]
            num = 0.0
            den = 0.0
            for k in range(lo, hi):
                e = math.exp(thetas[row, k] - m)
                num += e * values[k]
                den += e
            acc += prompt_weights[g] * num / den
        out[row] = acc
    return out


def score_estimates_numpy(draws, block_of, offsets, probs, adv):
    """Minibatch REINFORCE estimates, one per row of ``draws``.

    ``draws[n, b]`` is a flat (prompt, action) index; the estimate is
    ``mean_b adv[i] * (e_i - pi_block(i))``.
    """
    N, B = draws.shape
    d = len(probs)
    est = np.zeros((N, d))
    rows = np.repeat(np.arange(N), B)
    flat = draws.ravel()
    coef = adv[flat] / B
    np.add.at(est, (rows, flat), coef)
    G = len(offsets) - 1
    per_block = np.zeros((N, G))
    np.add.at(per_block, (rows, block_of[flat]), coef)
    est -= per_block[:, block_of] * probs[None, :]
    return est


@njit
def score_estimates_numba(draws, block_of, offsets, probs, adv):
    N, B = draws.shape
    d = probs.shape[0]
    G = offsets.shape[0] - 1
    est = np.zeros((N, d))
    per_block = np.zeros(G)
    for n in range(N):
        for g in range(G):
            per_block[g] = 0.0
        for b in range(B):
            i = draws[n, b]
            c = adv[i] / B
            est[n, i] += c
            per_block[block_of[i]] += c
        for g in range(G):
            c = per_block[g]
            if c != 0.0:
                for k in range(offsets[g], offsets[g + 1]):
                    est[n, k] -= c * probs[k]
    return est


if USE_NUMBA:
    group_advantages = group_advantages_numba
    block_log_softmax = block_log_softmax_numba
    clipped_surrogate = clipped_surrogate_numba
    sample_blocks = sample_blocks_numba
    expected_values = expected_values_numba
    score_estimates = score_estimates_numba
else:
    group_advantages = group_advantages_numpy
    block_log_softmax = block_log_softmax_numpy
    clipped_surrogate = clipped_surrogate_numpy
    sample_blocks = sample_blocks_numpy
    expected_values = expected_values_numpy
    score_estimates = score_estimates_numpy
