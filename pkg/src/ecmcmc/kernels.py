"""Hot per-step update kernels, in a numba flavour and a numpy flavour.

Both flavours evaluate every expression in the same left-to-right order, so
they agree to the last bit on platforms without fused multiply-add
contraction. The exception is ``mlp_nll_grad``, where the numpy flavour uses
BLAS matrix products and the two agree only to rounding. The module-level
names point at the flavour picked by ``ECMCMC_NUMBA`` (see
:mod:`ecmcmc._accel`); ``NUMBA`` and ``NUMPY`` expose both explicitly for
tests and benchmarks.
"""

from types import SimpleNamespace

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------


def _np_sghmc_update(theta, p, grad, eps, minv, fric, std, z):
    theta_new = theta + eps * minv * p
    p_new = p - eps * grad - eps * fric * minv * p + std * z
    return theta_new, p_new


def _np_ec_worker_update(theta, p, grad, center, eps, minv, fric, alpha, std, z):
    theta_new = theta + eps * minv * p
    p_new = p - eps * grad - eps * fric * minv * p - eps * alpha * (theta - center) + std * z
    return theta_new, p_new


def _np_spring_sum(center, thetas):
    # fixed worker order: (c - theta_0) + (c - theta_1) + ...
    total = center - thetas[0]
    for k in range(1, thetas.shape[0]):
        total = total + (center - thetas[k])
    return total


def _np_ec_center_update(center, r, thetas, eps, minv, fric, alpha, std, z):
    workers = thetas.shape[0]
    spring = _np_spring_sum(center, thetas)
    center_new = center + eps * minv * r
    r_new = r - eps * fric * minv * r - eps * alpha * (spring / workers) + std * z
    return center_new, r_new


def _np_sgld_update(theta, grad, eps, std, z):
    return theta - eps * grad + std * z


def _np_ec_deterministic_update(thetas, vs, center, h, grads, eps, alpha, xi):
    workers = thetas.shape[0]
    spring = _np_spring_sum(center, thetas)
    thetas_new = thetas + vs
    center_new = center + h
    vs_new = vs - eps * grads - xi * vs - eps * alpha * (thetas - center)
    h_new = h - xi * h - eps * alpha * (spring / workers)
    return thetas_new, vs_new, center_new, h_new


def _np_eamsgd_update(thetas, vs, center, grads, eps, alpha, xi, couple):
    workers = thetas.shape[0]
    if couple:
        spring = _np_spring_sum(center, thetas)
        thetas_new = thetas + vs - eps * alpha * (thetas - center)
        center_new = center - eps * alpha * (spring / workers)
    else:
        thetas_new = thetas + vs
        center_new = center.copy()
    vs_new = vs - eps * grads - xi * vs
    return thetas_new, vs_new, center_new


def _np_mlp_nll_grad(theta, x, y, sizes, relu, need_grad):
    # layer l: weights (n_in, n_out) row-major, then n_out biases
    n = x.shape[0]
    acts = [x]
    offsets = []
    h = x
    off = 0
    last = len(sizes) - 2
    for l in range(len(sizes) - 1):
        n_in, n_out = sizes[l], sizes[l + 1]
        w = theta[off:off + n_in * n_out].reshape(n_in, n_out)
        b = theta[off + n_in * n_out:off + n_in * n_out + n_out]
        offsets.append(off)
        off += n_in * n_out + n_out
        a = h @ w + b
        if l != last:
            a = np.maximum(a, 0.0) if relu else np.tanh(a)
        acts.append(a)
        h = a
    zmax = h.max(axis=1, keepdims=True)
    shifted = h - zmax
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    nll = -float(logp[rows, y].sum())
    grad = np.zeros(theta.shape[0])
    if not need_grad:
        return nll, grad
    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    for l in range(last, -1, -1):
        n_in, n_out = sizes[l], sizes[l + 1]
        off = offsets[l]
        grad[off:off + n_in * n_out] = (acts[l].T @ delta).ravel()
        grad[off + n_in * n_out:off + n_in * n_out + n_out] = delta.sum(axis=0)
        if l > 0:
            w = theta[off:off + n_in * n_out].reshape(n_in, n_out)
            h = acts[l]
            deriv = (h > 0.0).astype(float) if relu else 1.0 - h * h
            delta = (delta @ w.T) * deriv
    return nll, grad


def _np_ips_tau(x):
    """Integrated autocorrelation time of a centred 1-D series.

    Uses an FFT autocovariance and the initial positive sequence truncation.
    Returns ``(tau, pairs_used)``; ``tau`` is ``nan`` for a zero-variance series.
    """
    n = x.shape[0]
    size = 1
    while size < 2 * n:
        size *= 2
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n] / n
    if acov[0] <= 0.0:
        return np.nan, 0
    rho = acov / acov[0]
    total = 0.0
    pairs = 0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0.0:
            break
        total += pair
        pairs += 1
    return -1.0 + 2.0 * total, pairs


# ---------------------------------------------------------------------------
# numba flavour (explicit loops)
# ---------------------------------------------------------------------------


@njit
def _nb_sghmc_update(theta, p, grad, eps, minv, fric, std, z):
    n = theta.shape[0]
    theta_new = np.empty(n)
    p_new = np.empty(n)
    for i in range(n):
        theta_new[i] = theta[i] + eps * minv[i] * p[i]
        p_new[i] = p[i] - eps * grad[i] - eps * fric[i] * minv[i] * p[i] + std[i] * z[i]
    return theta_new, p_new


@njit
def _nb_ec_worker_update(theta, p, grad, center, eps, minv, fric, alpha, std, z):
    n = theta.shape[0]
    theta_new = np.empty(n)
    p_new = np.empty(n)
    for i in range(n):
        theta_new[i] = theta[i] + eps * minv[i] * p[i]
        p_new[i] = (
            p[i]
            - eps * grad[i]
            - eps * fric[i] * minv[i] * p[i]
            - eps * alpha * (theta[i] - center[i])
            + std[i] * z[i]
        )
    return theta_new, p_new


@njit
def _nb_spring_sum(center, thetas):
    workers, n = thetas.shape
    total = np.empty(n)
    for i in range(n):
        acc = center[i] - thetas[0, i]
        for k in range(1, workers):
            acc = acc + (center[i] - thetas[k, i])
        total[i] = acc
    return total


@njit
def _nb_ec_center_update(center, r, thetas, eps, minv, fric, alpha, std, z):
    workers, n = thetas.shape
    spring = _nb_spring_sum(center, thetas)
    center_new = np.empty(n)
    r_new = np.empty(n)
    for i in range(n):
        center_new[i] = center[i] + eps * minv[i] * r[i]
        r_new[i] = (
            r[i] - eps * fric[i] * minv[i] * r[i] - eps * alpha * (spring[i] / workers) + std[i] * z[i]
        )
    return center_new, r_new


@njit
def _nb_sgld_update(theta, grad, eps, std, z):
    n = theta.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = theta[i] - eps * grad[i] + std[i] * z[i]
    return out


@njit
def _nb_ec_deterministic_update(thetas, vs, center, h, grads, eps, alpha, xi):
    workers, n = thetas.shape
    spring = _nb_spring_sum(center, thetas)
    thetas_new = np.empty((workers, n))
    vs_new = np.empty((workers, n))
    center_new = np.empty(n)
    h_new = np.empty(n)
    for k in range(workers):
        for i in range(n):
            thetas_new[k, i] = thetas[k, i] + vs[k, i]
            vs_new[k, i] = (
                vs[k, i] - eps * grads[k, i] - xi * vs[k, i] - eps * alpha * (thetas[k, i] - center[i])
            )
    for i in range(n):
        center_new[i] = center[i] + h[i]
        h_new[i] = h[i] - xi * h[i] - eps * alpha * (spring[i] / workers)
    return thetas_new, vs_new, center_new, h_new


@njit
def _nb_eamsgd_update(thetas, vs, center, grads, eps, alpha, xi, couple):
    workers, n = thetas.shape
    thetas_new = np.empty((workers, n))
    vs_new = np.empty((workers, n))
    center_new = np.empty(n)
    if couple:
        spring = _nb_spring_sum(center, thetas)
        for i in range(n):
            center_new[i] = center[i] - eps * alpha * (spring[i] / workers)
    else:
        for i in range(n):
            center_new[i] = center[i]
    for k in range(workers):
        for i in range(n):
            if couple:
                thetas_new[k, i] = thetas[k, i] + vs[k, i] - eps * alpha * (thetas[k, i] - center[i])
            else:
                thetas_new[k, i] = thetas[k, i] + vs[k, i]
            vs_new[k, i] = vs[k, i] - eps * grads[k, i] - xi * vs[k, i]
    return thetas_new, vs_new, center_new


@njit
def _nb_ips_tau(x):
    # direct autocovariance, evaluated lazily up to the truncation point
    n = x.shape[0]
    c0 = 0.0
    for t in range(n):
        c0 += x[t] * x[t]
    c0 /= n
    if c0 <= 0.0:
        return np.nan, 0
    total = 0.0
    pairs = 0
    k = 0
    while k + 1 < n:
        a = 0.0
        for t in range(n - k):
            a += x[t] * x[t + k]
        b = 0.0
        for t in range(n - k - 1):
            b += x[t] * x[t + k + 1]
        pair = (a / n) / c0 + (b / n) / c0
        if pair <= 0.0:
            break
        total += pair
        pairs += 1
        k += 2
    return -1.0 + 2.0 * total, pairs


@njit
def _nb_mlp_nll_grad(theta, x, y, sizes, relu, need_grad):
    n = x.shape[0]
    n_layers = sizes.shape[0] - 1
    aoff = np.empty(sizes.shape[0], np.int64)
    woff = np.empty(n_layers, np.int64)
    width = 0
    for l in range(sizes.shape[0]):
        aoff[l] = width
        width += sizes[l]
    off = 0
    for l in range(n_layers):
        woff[l] = off
        off += sizes[l] * sizes[l + 1] + sizes[l + 1]
    acts = np.empty((n, width))
    for r in range(n):
        for i in range(sizes[0]):
            acts[r, i] = x[r, i]
    for l in range(n_layers):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        wo = woff[l]
        bo = wo + n_in * n_out
        ai = aoff[l]
        ao = aoff[l + 1]
        hidden = l != n_layers - 1
        for r in range(n):
            out = acts[r, ao:ao + n_out]
            out[:] = theta[bo:bo + n_out]
            for i in range(n_in):
                a = acts[r, ai + i]
                row = wo + i * n_out
                for j in range(n_out):
                    out[j] += a * theta[row + j]
            if hidden:
                for j in range(n_out):
                    if relu:
                        out[j] = out[j] if out[j] > 0.0 else 0.0
                    else:
                        out[j] = np.tanh(out[j])
    n_cls = sizes[n_layers]
    ao = aoff[n_layers]
    delta = np.empty((n, n_cls))
    nll = 0.0
    for r in range(n):
        zmax = acts[r, ao]
        for j in range(1, n_cls):
            if acts[r, ao + j] > zmax:
                zmax = acts[r, ao + j]
        total = 0.0
        for j in range(n_cls):
            e = np.exp(acts[r, ao + j] - zmax)
            delta[r, j] = e
            total += e
        nll -= acts[r, ao + y[r]] - zmax - np.log(total)
        for j in range(n_cls):
            delta[r, j] /= total
        delta[r, y[r]] -= 1.0
    grad = np.zeros(theta.shape[0])
    if not need_grad:
        return nll, grad
    for l in range(n_layers - 1, -1, -1):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        wo = woff[l]
        bo = wo + n_in * n_out
        ai = aoff[l]
        for r in range(n):
            d = delta[r]
            for i in range(n_in):
                h = acts[r, ai + i]
                if h == 0.0:
                    continue
                row = wo + i * n_out
                for j in range(n_out):
                    grad[row + j] += h * d[j]
            for j in range(n_out):
                grad[bo + j] += d[j]
        if l > 0:
            back = np.empty((n, n_in))
            for r in range(n):
                for i in range(n_in):
                    s = 0.0
                    for j in range(n_out):
                        s += delta[r, j] * theta[wo + i * n_out + j]
                    h = acts[r, ai + i]
                    if relu:
                        back[r, i] = s if h > 0.0 else 0.0
                    else:
                        back[r, i] = s * (1.0 - h * h)
            delta = back
    return nll, grad


NUMPY = SimpleNamespace(
    name="numpy",
    sghmc_update=_np_sghmc_update,
    ec_worker_update=_np_ec_worker_update,
    ec_center_update=_np_ec_center_update,
    spring_sum=_np_spring_sum,
    sgld_update=_np_sgld_update,
    ec_deterministic_update=_np_ec_deterministic_update,
    eamsgd_update=_np_eamsgd_update,
    ips_tau=_np_ips_tau,
    mlp_nll_grad=_np_mlp_nll_grad,
)

NUMBA = SimpleNamespace(
    name="numba",
    sghmc_update=_nb_sghmc_update,
    ec_worker_update=_nb_ec_worker_update,
    ec_center_update=_nb_ec_center_update,
    spring_sum=_nb_spring_sum,
    sgld_update=_nb_sgld_update,
    ec_deterministic_update=_nb_ec_deterministic_update,
    eamsgd_update=_nb_eamsgd_update,
    ips_tau=_nb_ips_tau,
    mlp_nll_grad=_nb_mlp_nll_grad,
)

ACTIVE = NUMBA if USE_NUMBA else NUMPY
BACKEND = ACTIVE.name

sghmc_update = ACTIVE.sghmc_update
ec_worker_update = ACTIVE.ec_worker_update
ec_center_update = ACTIVE.ec_center_update
spring_sum = ACTIVE.spring_sum
sgld_update = ACTIVE.sgld_update
ec_deterministic_update = ACTIVE.ec_deterministic_update
eamsgd_update = ACTIVE.eamsgd_update
# the FFT path beats the direct lag sum beyond a few hundred points
ips_tau = NUMPY.ips_tau
mlp_nll_grad = ACTIVE.mlp_nll_grad
