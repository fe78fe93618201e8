"""Per-sample numeric kernels for the two small classifiers.

Parameter layout (flat, C order):

* linear: ``W (C, D) | b (C)``
* mlp1:   ``W1 (H, D) | b1 (H) | W2 (C, H) | b2 (C)``

Everything here is compiled by numba when available (see ``_accel``) and
otherwise runs as ordinary numpy.  Functions return status codes instead of
raising so the compiled and interpreted paths behave the same.
"""
import numpy as np

from ._accel import njit

LINEAR = 0
MLP1 = 1

COVARIANCE = 0
MEAN_DOT = 1

OK = 0
DEGENERATE = 1
NONFINITE = 2

DEGENERATE_NORM = 1e-12


@njit
def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


@njit
def _logsumexp(z):
    m = z.max()
    return m + np.log(np.exp(z - m).sum())


@njit
def sample_loss(arch, D, H, C, theta, x, y):
    if arch == LINEAR:
        W = theta[: C * D].reshape((C, D))
        b = theta[C * D : C * D + C]
        z = W @ x + b
    else:
        n1 = H * D
        W1 = theta[:n1].reshape((H, D))
        b1 = theta[n1 : n1 + H]
        W2 = theta[n1 + H : n1 + H + C * H].reshape((C, H))
        b2 = theta[n1 + H + C * H : n1 + H + C * H + C]
        z = W2 @ np.tanh(W1 @ x + b1) + b2
    return _logsumexp(z) - z[y]


@njit
def sample_grad(arch, D, H, C, theta, x, y):
    g = np.empty(theta.shape[0])
    if arch == LINEAR:
        W = theta[: C * D].reshape((C, D))
        b = theta[C * D : C * D + C]
        r = _softmax(W @ x + b)
        r[y] -= 1.0
        g[: C * D] = np.outer(r, x).ravel()
        g[C * D :] = r
    else:
        n1 = H * D
        W1 = theta[:n1].reshape((H, D))
        b1 = theta[n1 : n1 + H]
        W2 = theta[n1 + H : n1 + H + C * H].reshape((C, H))
        b2 = theta[n1 + H + C * H : n1 + H + C * H + C]
        h = np.tanh(W1 @ x + b1)
        r = _softmax(W2 @ h + b2)
        r[y] -= 1.0
        da = (W2.T @ r) * (1.0 - h * h)
        g[:n1] = np.outer(da, x).ravel()
        g[n1 : n1 + H] = da
        g[n1 + H : n1 + H + C * H] = np.outer(r, h).ravel()
        g[n1 + H + C * H :] = r
    return g


@njit
def sample_mixed(arch, D, H, C, theta, x, y, v):
    """Gradient over x of <v, grad_theta loss(x, y)>."""
    if arch == LINEAR:
        W = theta[: C * D].reshape((C, D))
        b = theta[C * D : C * D + C]
        V = v[: C * D].reshape((C, D))
        vb = v[C * D : C * D + C]
        p = _softmax(W @ x + b)
        r = p.copy()
        r[y] -= 1.0
        w = V @ x + vb
        jw = p * w - p * np.dot(p, w)
        return V.T @ r + W.T @ jw
    n1 = H * D
    o2 = n1 + H
    o3 = o2 + C * H
    W1 = theta[:n1].reshape((H, D))
    b1 = theta[n1:o2]
    W2 = theta[o2:o3].reshape((C, H))
    b2 = theta[o3 : o3 + C]
    V1 = v[:n1].reshape((H, D))
    vb1 = v[n1:o2]
    V2 = v[o2:o3].reshape((C, H))
    vb2 = v[o3 : o3 + C]
    h = np.tanh(W1 @ x + b1)
    p = _softmax(W2 @ h + b2)
    r = p.copy()
    r[y] -= 1.0
    t = 1.0 - h * h
    s = W2.T @ r
    w1 = V1 @ x + vb1
    w2 = V2 @ h + vb2
    gr = w2 + W2 @ (t * w1)
    zbar = p * gr - p * np.dot(p, gr)
    hbar = V2.T @ r - 2.0 * h * s * w1 + W2.T @ zbar
    return W1.T @ (t * hbar) + V1.T @ (t * s)


@njit
def batch_grads(arch, D, H, C, theta, X, Y):
    out = np.empty((X.shape[0], theta.shape[0]))
    for i in range(X.shape[0]):
        out[i] = sample_grad(arch, D, H, C, theta, X[i], Y[i])
    return out


@njit
def canary_objective(arch, D, H, C, theta, x, y, U, ubar, variant, norm_const):
    """Canary design loss and its gradient over x.

    Both loss terms are quadratic in the parameter gradient g, so the x-gradient
    is a single mixed-derivative product against one combined direction.
    """
    g = sample_grad(arch, D, H, C, theta, x, y)
    gn = np.sqrt(np.dot(g, g))
    hinge = max(norm_const - gn, 0.0)
    m = U.shape[0]
    if variant == COVARIANCE:
        if m > 0:
            c = U @ g
            loss = np.dot(c, c) / m + hinge * hinge
            direction = (2.0 / m) * (U.T @ c)
        else:
            loss = hinge * hinge
            direction = np.zeros_like(g)
    else:
        a = np.dot(g, ubar)
        loss = a * a + hinge * hinge
        direction = (2.0 * a) * ubar
    if hinge > 0.0:
        if gn < DEGENERATE_NORM:
            return loss, np.zeros_like(x), DEGENERATE
        direction = direction - (2.0 * hinge / gn) * g
    if not np.isfinite(loss):
        return loss, np.zeros_like(x), NONFINITE
    return loss, sample_mixed(arch, D, H, C, theta, x, y, direction), OK


@njit
def design_loop(arch, D, H, C, theta, x0, y, U, ubar, variant, norm_const,
                lr, iters, beta1, beta2, eps):
    """Adam on the canary loss.  losses[t] is the loss at iterate t (t = 0..iters)."""
    x = x0.copy()
    m1 = np.zeros_like(x)
    m2 = np.zeros_like(x)
    losses = np.full(iters + 1, np.nan)
    for t in range(iters):
        loss, gx, status = canary_objective(arch, D, H, C, theta, x, y, U, ubar,
                                            variant, norm_const)
        losses[t] = loss
        if status != OK:
            return x, losses, status
        m1 = beta1 * m1 + (1.0 - beta1) * gx
        m2 = beta2 * m2 + (1.0 - beta2) * gx * gx
        mhat = m1 / (1.0 - beta1 ** (t + 1))
        vhat = m2 / (1.0 - beta2 ** (t + 1))
        x = x - lr * mhat / (np.sqrt(vhat) + eps)
    loss, gx, status = canary_objective(arch, D, H, C, theta, x, y, U, ubar,
                                        variant, norm_const)
    losses[iters] = loss
    if status == DEGENERATE:
        # the final loss is still well defined; only its gradient is not
        status = OK
    return x, losses, status
