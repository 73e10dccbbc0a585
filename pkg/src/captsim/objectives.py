"""Dual-prompt losses, their analytic gradients and plain SGD.

Notation used in the code:

- ``u_j = pool(P_g) @ A + a_j``, ``t_j = u_j / |u_j|``: general text feature
- ``v_j = pool(P_c[j]) @ A + a_j``, ``s_j = v_j / |v_j|``: class-aware text feature
- ``h_i = z_i + W_F @ pool(P_g)``, ``z'_i = h_i / |h_i|``: visually prompted feature

The general loss is softmax cross-entropy over ``t_j . z'_i / tau``; the
class-aware loss adds ``log pi_j`` to ``s_j . z_i / tau`` (raw features).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .toyclip import FrozenEncoders, PromptState, text_features, visual_prompted


@dataclass
class LossReport:
    loss_general: float
    loss_class_aware: float
    total: float
    per_sample: np.ndarray


@dataclass
class Gradients:
    d_general: np.ndarray
    d_class_aware: np.ndarray
    d_align: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_general.ravel(), self.d_class_aware.ravel(), self.d_align.ravel()])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _check_prior(prior: np.ndarray, labels: np.ndarray) -> None:
    if np.any(prior[labels] <= 0):
        missing = sorted(set(labels[prior[labels] <= 0].tolist()))
        raise ValueError(f"prior is zero for present labels {missing}")


def _log_prior(prior: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(prior)


def _general_logits(enc, state, z):
    t = text_features(enc, state, "general")
    zp = visual_prompted(enc, state, z)
    return t, zp, zp @ t.T


def _class_aware_logits(enc, state, z):
    s = text_features(enc, state, "class_aware")
    return s, z @ s.T


def loss_general(enc: FrozenEncoders, state: PromptState, z, labels, tau: float) -> float:
    _check_tau(tau)
    z = np.atleast_2d(z)
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ValueError("empty batch")
    _, _, cos = _general_logits(enc, state, z)
    logp = _log_softmax(cos / tau)
    return float(-logp[np.arange(labels.size), labels].mean())


def loss_class_aware(enc: FrozenEncoders, state: PromptState, z, labels, prior, tau: float) -> float:
    _check_tau(tau)
    z = np.atleast_2d(z)
    labels = np.asarray(labels, dtype=int)
    prior = np.asarray(prior, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("empty batch")
    _check_prior(prior, labels)
    _, cos = _class_aware_logits(enc, state, z)
    logp = _log_softmax(cos / tau + _log_prior(prior))
    return float(-logp[np.arange(labels.size), labels].mean())


def _normalize_backward(g: np.ndarray, unit: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Gradient through x -> x/|x| given upstream ``g``, ``unit = x/|x|`` and ``|x|``."""
    return (g - unit * np.sum(unit * g, axis=-1, keepdims=True)) / norm


def total_loss_and_grads(
    enc: FrozenEncoders,
    state: PromptState,
    z,
    labels,
    prior,
    tau: float,
    lam: float = 1.0,
    mask: bool = True,
) -> tuple[LossReport, Gradients]:
    """Loss ``L_ge + lam * L_ca`` and its gradient for every parameter block.

    With ``mask`` (the training rule) the class-aware gradient is zeroed on
    every class that does not occur in ``labels``.
    """
    _check_tau(tau)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    prior = np.asarray(prior, dtype=np.float64)
    n = labels.size
    if n == 0:
        raise ValueError("empty batch")
    rows = np.arange(n)
    A = enc.text_projection
    m_tok = state.general.shape[0]
    t_tok = state.class_aware.shape[1]
    p_g = state.general.mean(axis=0)

    # general branch
    u = p_g @ A + enc.txt_anchors
    u_norm = np.linalg.norm(u, axis=1, keepdims=True)
    t = u / u_norm
    h = z + state.align_map @ p_g
    h_norm = np.linalg.norm(h, axis=1, keepdims=True)
    zp = h / h_norm
    logp_ge = _log_softmax(zp @ t.T / tau)
    per_ge = -logp_ge[rows, labels]

    g1 = np.exp(logp_ge)
    g1[rows, labels] -= 1.0
    g1 /= n * tau
    d_u = _normalize_backward(g1.T @ zp, t, u_norm)
    d_h = _normalize_backward(g1 @ t, zp, h_norm)
    d_w = d_h.sum(axis=0)
    d_pg = d_u.sum(axis=0) @ A.T + state.align_map.T @ d_w
    d_align = np.outer(d_w, p_g)
    d_general = np.broadcast_to(d_pg / m_tok, state.general.shape).copy()

    # class-aware branch; the loss is reported even when lam == 0
    d_class_aware = np.zeros_like(state.class_aware)
    if lam != 0:
        _check_prior(prior, labels)
    if np.all(prior[labels] > 0):
        q = state.class_aware.mean(axis=1)
        v = q @ A + enc.txt_anchors
        v_norm = np.linalg.norm(v, axis=1, keepdims=True)
        s = v / v_norm
        logp_ca = _log_softmax(z @ s.T / tau + _log_prior(prior))
        per_ca = -logp_ca[rows, labels]
        if lam != 0:
            g2 = np.exp(logp_ca)
            g2[rows, labels] -= 1.0
            g2 *= lam / (n * tau)
            d_q = _normalize_backward(g2.T @ z, s, v_norm) @ A.T
            if mask:
                present = np.zeros(q.shape[0], dtype=bool)
                present[labels] = True
                d_q[~present] = 0.0
            d_class_aware[...] = d_q[:, None, :] / t_tok
    else:
        per_ca = np.full(n, np.nan)

    loss_ge = float(per_ge.mean())
    loss_ca = float(per_ca.mean())
    if lam == 0:
        report = LossReport(loss_ge, loss_ca, loss_ge, per_ge.copy())
    else:
        report = LossReport(loss_ge, loss_ca, loss_ge + lam * loss_ca, per_ge + lam * per_ca)
    return report, Gradients(d_general, d_class_aware, d_align)


def per_sample_gradients(
    enc: FrozenEncoders, state: PromptState, z, labels, prior, tau: float, lam: float = 1.0
) -> np.ndarray:
    """Flattened masked gradient of each single-sample loss; shape (N, P).

    Row ``i`` equals ``total_loss_and_grads`` on the batch ``[(z_i, y_i)]``,
    so the class-aware block only touches class ``y_i``.
    """
    _check_tau(tau)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    prior = np.asarray(prior, dtype=np.float64)
    n = labels.size
    rows = np.arange(n)
    A = enc.text_projection
    num_c, t_tok, d_tok = state.class_aware.shape
    m_tok = state.general.shape[0]
    p_g = state.general.mean(axis=0)

    u = p_g @ A + enc.txt_anchors
    u_norm = np.linalg.norm(u, axis=1, keepdims=True)
    t = u / u_norm
    h = z + state.align_map @ p_g
    h_norm = np.linalg.norm(h, axis=1, keepdims=True)
    zp = h / h_norm
    g1 = np.exp(_log_softmax(zp @ t.T / tau))
    g1[rows, labels] -= 1.0
    g1 /= tau
    # d_u[i, j] = (g1[i, j] / |u_j|) * (z'_i - t_j (t_j . z'_i))
    tz = zp @ t.T  # (N, C)
    coef = g1 / u_norm.T  # (N, C)
    d_u_sum = coef.sum(axis=1, keepdims=True) * zp - (coef * tz) @ t
    d_h = _normalize_backward(g1 @ t, zp, h_norm)
    d_pg = d_u_sum @ A.T + d_h @ state.align_map
    d_general = np.repeat(d_pg[:, None, :] / m_tok, m_tok, axis=1).reshape(n, -1)
    d_align = (d_h[:, :, None] * p_g[None, None, :]).reshape(n, -1)

    d_ca = np.zeros((n, num_c, t_tok, d_tok))
    if lam != 0:
        _check_prior(prior, labels)
        q = state.class_aware.mean(axis=1)
        v = q @ A + enc.txt_anchors
        v_norm = np.linalg.norm(v, axis=1, keepdims=True)
        s = v / v_norm
        g2 = np.exp(_log_softmax(z @ s.T / tau + _log_prior(prior)))
        g2[rows, labels] -= 1.0
        g2 *= lam / tau
        sy = s[labels]
        coef_y = g2[rows, labels][:, None] / v_norm[labels]
        d_vy = coef_y * (z - sy * np.sum(sy * z, axis=1, keepdims=True))
        d_q = d_vy @ A.T
        d_ca[rows, labels] = d_q[:, None, :] / t_tok
    return np.concatenate([d_general, d_ca.reshape(n, -1), d_align], axis=1)


def sgd_step(state: PromptState, grads: Gradients, lr: float) -> PromptState:
    if not grads.is_finite():
        raise FloatingPointError("non-finite gradient")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return PromptState(
        state.general - lr * grads.d_general,
        state.class_aware - lr * grads.d_class_aware,
        state.align_map - lr * grads.d_align,
    )


def predict(enc: FrozenEncoders, state: PromptState, z, mode: str = "integrated") -> np.ndarray:
    """Cosine scores of (batches of) features against every class; argmax is the label."""
    t = text_features(enc, state, mode)
    return visual_prompted(enc, state, z) @ t.T
