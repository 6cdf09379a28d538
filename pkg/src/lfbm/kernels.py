"""Hot numeric kernels.

The Langevin sampler spends nearly all of its time evaluating
d/dz [log p(z) + log p(x|z)] for a batch of chains. Here that gradient is
derived by hand for the exact flow/decoder architectures in ``flow`` and
``model`` and written in the numpy subset numba compiles, so the whole
K-step chain runs without Python overhead. With ``LFBM_DISABLE_NUMBA=1`` the
same source runs as ordinary numpy.

The MMD statistic needs O(n^2) kernel evaluations; the compiled version
loops without materializing the n x n matrix, the numpy fallback works in
row blocks.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, kernel

LEAK = 0.2
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _tanh_loop(a):
    # numba lowers np.tanh to scalar libm calls; this exp-based form is ~1.5x
    # faster there and within a few ulp of np.tanh (series branch near 0).
    out = np.empty_like(a)
    fa = a.ravel()
    fo = out.ravel()
    for k in range(fa.size):
        v = fa[k]
        av = abs(v)
        if av < 0.01:
            v2 = v * v
            r = av * (1.0 + v2 * (-1.0 / 3.0 + v2 * (2.0 / 15.0 - v2 * 17.0 / 315.0)))
        else:
            e = math.exp(-2.0 * av)
            r = (1.0 - e) / (1.0 + e)
        fo[k] = r if v >= 0 else -r
    return out


_tanh = kernel(_tanh_loop) if USE_NUMBA else np.tanh


@kernel
def flow_logp_score(z, log_scale, bias, even, odd, a_src, b_src, clamp,
                    s0, s1, s2, s3, s4, s5, t0, t1, t2, t3, t4, t5):
    """log p(z) under the flow prior and its gradient in z.

    ``s0..s5`` / ``t0..t5`` are the stacked (W, b) triples of the scale and
    shift conditioners, one slice per flow step.
    """
    n, d = z.shape
    L = log_scale.shape[0]
    da = even.shape[0]
    db = odd.shape[0]
    h = s0.shape[2]
    A = np.empty((L, n, da))
    S = np.empty((L, n, db))
    TH = np.empty((L, n, db))
    BB = np.empty((L, n, db))
    HS1 = np.empty((L, n, h))
    HS2 = np.empty((L, n, h))
    HT1 = np.empty((L, n, h))
    HT2 = np.empty((L, n, h))
    logdet = np.zeros(n)
    cur = z.copy()
    for l in range(L - 1, -1, -1):
        a = np.ascontiguousarray(cur[:, even])
        y = np.empty((n, d))
        if db > 0:
            ob = np.ascontiguousarray(cur[:, odd])
            hs1 = _tanh(np.dot(a, s0[l]) + s1[l])
            hs2 = _tanh(np.dot(hs1, s2[l]) + s3[l])
            th = _tanh((np.dot(hs2, s4[l]) + s5[l]) / clamp)
            s = clamp * th
            ht1 = _tanh(np.dot(a, t0[l]) + t1[l])
            ht2 = _tanh(np.dot(ht1, t2[l]) + t3[l])
            t = np.dot(ht2, t4[l]) + t5[l]
            bb = (ob - t) * np.exp(-s)
            for j in range(db):
                y[:, b_src[j]] = bb[:, j]
            for i in range(n):
                for j in range(db):
                    logdet[i] -= s[i, j]
            S[l] = s
            TH[l] = th
            BB[l] = bb
            HS1[l] = hs1
            HS2[l] = hs2
            HT1[l] = ht1
            HT2[l] = ht2
        for j in range(da):
            y[:, a_src[j]] = a[:, j]
        A[l] = a
        cur = (y - bias[l]) * np.exp(-log_scale[l])
        logdet -= np.sum(log_scale[l])
    logp = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += cur[i, j] * cur[i, j]
        logp[i] = -0.5 * acc - d * HALF_LOG_2PI + logdet[i]
    g = -cur
    for l in range(L):
        gy = g * np.exp(-log_scale[l])
        ga = np.empty((n, da))
        for j in range(da):
            ga[:, j] = gy[:, a_src[j]]
        gnew = np.empty((n, d))
        if db > 0:
            gbb = np.empty((n, db))
            for j in range(db):
                gbb[:, j] = gy[:, b_src[j]]
            e = np.exp(-S[l])
            gob = gbb * e
            gt = -gob
            gs = -gbb * BB[l] - 1.0
            gr = gs * (1.0 - TH[l] * TH[l])
            gh = np.dot(gr, s4[l].T) * (1.0 - HS2[l] * HS2[l])
            gh = np.dot(gh, s2[l].T) * (1.0 - HS1[l] * HS1[l])
            ga += np.dot(gh, s0[l].T)
            gh = np.dot(gt, t4[l].T) * (1.0 - HT2[l] * HT2[l])
            gh = np.dot(gh, t2[l].T) * (1.0 - HT1[l] * HT1[l])
            ga += np.dot(gh, t0[l].T)
            for j in range(db):
                gnew[:, odd[j]] = gob[:, j]
        for j in range(da):
            gnew[:, even[j]] = ga[:, j]
        g = gnew
    return logp, g


@kernel
def decoder_logp_score(z, x, mask, sigma, weights, biases, out_tanh):
    """Masked Gaussian log-likelihood log p(x|z) and its gradient in z."""
    n = z.shape[0]
    n_layers = len(weights)
    pres = []
    h = z
    for k in range(n_layers):
        pre = np.dot(h, weights[k]) + biases[k]
        pres.append(pre)
        if k < n_layers - 1:
            h = np.where(pre > 0, pre, LEAK * pre)
        elif out_tanh:
            h = _tanh(pre)
        else:
            h = pre
    out = h
    s2 = sigma * sigma
    resid = mask * (x - out)
    logp = np.empty(n)
    log_norm = 0.5 * np.log(2.0 * np.pi * s2)
    for i in range(n):
        acc = 0.0
        cnt = 0.0
        for j in range(resid.shape[1]):
            acc += resid[i, j] * resid[i, j]
            cnt += mask[i, j]
        logp[i] = -0.5 * acc / s2 - cnt * log_norm
    g = resid / s2
    if out_tanh:
        g = g * (1.0 - out * out)
    for k in range(n_layers - 1, -1, -1):
        g = np.dot(g, weights[k].T)
        if k > 0:
            pre = pres[k - 1]
            g = np.where(pre > 0, g, LEAK * g)
    return logp, g


@kernel
def langevin_chain(z, x, mask, noise, step_size, use_noise, sigma,
                   log_scale, bias, even, odd, a_src, b_src, clamp,
                   s0, s1, s2, s3, s4, s5, t0, t1, t2, t3, t4, t5,
                   weights, biases, out_tanh, rec, rec_start, rec_every):
    """K = noise.shape[0] unadjusted Langevin steps on log p(z) + log p(x|z).

    Updates ``z`` in place. Returns (mean |grad| per step, mean joint log-prob
    per step, first failing step or -1, number of recorded states). States
    after steps rec_start, rec_start + rec_every, ... go into ``rec``.
    """
    K = noise.shape[0]
    n, d = z.shape
    gnorm = np.zeros(K)
    lp = np.zeros(K)
    root = np.sqrt(2.0 * step_size)
    n_rec = 0
    for k in range(K):
        lp_prior, g_prior = flow_logp_score(z, log_scale, bias, even, odd, a_src, b_src, clamp,
                                            s0, s1, s2, s3, s4, s5, t0, t1, t2, t3, t4, t5)
        lp_lik, g_lik = decoder_logp_score(z, x, mask, sigma, weights, biases, out_tanh)
        g = g_prior + g_lik
        acc_n = 0.0
        acc_l = 0.0
        for i in range(n):
            sq = 0.0
            for j in range(d):
                sq += g[i, j] * g[i, j]
            acc_n += np.sqrt(sq)
            acc_l += lp_prior[i] + lp_lik[i]
        gnorm[k] = acc_n / n
        lp[k] = acc_l / n
        if use_noise:
            z += step_size * g + root * noise[k]
        else:
            z += step_size * g
        if not np.all(np.isfinite(z)):
            return gnorm, lp, k, n_rec
        step_no = k + 1
        if rec_every > 0 and step_no >= rec_start and (step_no - rec_start) % rec_every == 0:
            if n_rec < rec.shape[0]:
                rec[n_rec] = z
                n_rec += 1
    return gnorm, lp, -1, n_rec


# --- MMD -------------------------------------------------------------------------


@kernel
def _kernel_sums_loops(X, Y, gamma):
    m, d = X.shape
    n = Y.shape[0]
    sxx = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            acc = 0.0
            for k in range(d):
                diff = X[i, k] - X[j, k]
                acc += diff * diff
            sxx += np.exp(-gamma * acc)
    syy = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = Y[i, k] - Y[j, k]
                acc += diff * diff
            syy += np.exp(-gamma * acc)
    sxy = 0.0
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                diff = X[i, k] - Y[j, k]
                acc += diff * diff
            sxy += np.exp(-gamma * acc)
    return 2.0 * sxx, 2.0 * syy, sxy


def _sqdist(A, B):
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def _block_sum(A, B, gamma, block, same):
    total = 0.0
    for i in range(0, A.shape[0], block):
        K = np.exp(-gamma * _sqdist(A[i:i + block], B))
        if same:
            rows = np.arange(K.shape[0])
            K[rows, i + rows] = 0.0
        total += K.sum()
    return total


def _kernel_sums_numpy(X, Y, gamma, block=512):
    return (_block_sum(X, X, gamma, block, True), _block_sum(Y, Y, gamma, block, True),
            _block_sum(X, Y, gamma, block, False))


@kernel
def _condensed_sqdist_loops(P):
    n, d = P.shape
    out = np.empty(n * (n - 1) // 2)
    c = 0
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(d):
                diff = P[i, k] - P[j, k]
                acc += diff * diff
            out[c] = acc
            c += 1
    return out


def _condensed_sqdist_numpy(P):
    iu = np.triu_indices(P.shape[0], k=1)
    diff = P[iu[0]] - P[iu[1]]
    return (diff * diff).sum(axis=1)


if USE_NUMBA:
    kernel_sums = _kernel_sums_loops
    condensed_sqdist = _condensed_sqdist_loops
else:
    kernel_sums = _kernel_sums_numpy
    condensed_sqdist = _condensed_sqdist_numpy
