"""Pure-numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` argument for argument and are used whenever the
compiled extension is unavailable (or ``PSTUNE_PURE_PYTHON=1`` is set).
"""

import numpy as np

QUADRATIC = 0
LOGISTIC = 1
HINGE = 2


def example_losses(kind, X, y, w):
    """Per-example losses at ``w``.

    For ``QUADRATIC`` each row of ``X`` holds one example's diagonal
    curvatures and the loss is ``0.5 * sum_k X[i, k] * w[k]**2``; ``y`` is
    ignored. The other kinds are linear models on ``X @ w`` with labels ``y``.
    """
    if kind == QUADRATIC:
        return 0.5 * (X @ (w * w))
    z = X @ w
    if kind == LOGISTIC:
        return np.logaddexp(0.0, -y * z)
    if kind == HINGE:
        return np.maximum(0.0, 1.0 - y * z)
    raise ValueError(f"unknown loss kind {kind}")


def loss_grad(kind, X, y, idx, w, l2, grad_out):
    """Mean loss over rows ``idx`` at ``w``; mean gradient written to ``grad_out``.

    Both include the ``0.5 * l2 * ||w||^2`` regulariser.
    """
    Xb = X[idx]
    m = len(idx)
    if kind == QUADRATIC:
        curv = Xb.mean(axis=0)
        np.multiply(curv, w, out=grad_out)
        loss = 0.5 * float(np.dot(curv, w * w))
        if l2 != 0.0:
            grad_out += l2 * w
            loss += 0.5 * l2 * float(np.dot(w, w))
        return loss
    yb = y[idx]
    z = Xb @ w
    if kind == LOGISTIC:
        yz = yb * z
        losses = np.logaddexp(0.0, -yz)
        # d/dz log(1 + exp(-yz)) = -y * sigmoid(-yz)
        coef = -yb * np.exp(-np.logaddexp(0.0, yz))
    elif kind == HINGE:
        margin = 1.0 - yb * z
        losses = np.maximum(0.0, margin)
        coef = np.where(margin > 0.0, -yb, 0.0)
    else:
        raise ValueError(f"unknown loss kind {kind}")
    np.dot(coef, Xb, out=grad_out)
    grad_out /= m
    if l2 != 0.0:
        grad_out += l2 * w
        return float(losses.mean() + 0.5 * l2 * np.dot(w, w))
    return float(losses.mean())


def matern52_gram(A, B, inv_lengthscales, signal_variance):
    """Matern-5/2 ARD cross-covariance between the rows of ``A`` and ``B``."""
    As = A * inv_lengthscales
    Bs = B * inv_lengthscales
    diff = As[:, None, :] - Bs[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    s5r = np.sqrt(5.0) * r
    return signal_variance * (1.0 + s5r + (5.0 / 3.0) * r * r) * np.exp(-s5r)
