"""Reverse-mode differentiation of the unrolled network and optimizers.

The training objective is the sum of local training losses evaluated at
the final-cell personalized models,

    P_b = sum_i ||X_i v_i^L - Y_i||^2,

differentiated with respect to every raw learnable parameter by walking
the forward Tape backwards with hand-derived adjoints (phi4 -> phi3 ->
phi2 -> phi1 inside each cell). Rectifier and clamp kinks use the
subgradient-zero convention, so the adjoints are exact wherever the
forward is differentiable.

Two boundary policies:

  exact            adjoints flow through the server aggregation across
                   clients (full-graph truth; the finite-difference
                   oracle reproduces it).
  federated_local  the broadcast w received by a client is a constant
                   with respect to *other* clients' quantities: client
                   i's consensus-weight and penalty gradients see only
                   its own loss through its own chain (including its
                   own relayed contribution to w), while aggregation
                   weights p and the server-side penalty copies gamma
                   collect their server-side adjoints from every pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import LayoutMismatch, NonFiniteGradient, NonFiniteInput, TapeMismatch
from .math_core import chol_solve, sse_loss
from .unrolled_net import CellState, LearnableParams, Tape, forward_network

POLICIES = ("exact", "federated_local")

PARAM_FIELDS = ("lam_raw", "rho_raw", "p", "gam_raw")


def gradient_boundary_policy(mode: str) -> str:
    """Validate and return a gradient boundary policy token."""
    if mode not in POLICIES:
        raise ValueError(f"unknown boundary policy {mode!r}; expected one of {POLICIES}")
    return mode


@dataclass
class ParamGradients:
    """Gradients congruent with LearnableParams raw storage."""

    lam_raw: np.ndarray
    rho_raw: np.ndarray
    p: np.ndarray
    gam_raw: np.ndarray

    @staticmethod
    def zeros_like(params: LearnableParams) -> "ParamGradients":
        return ParamGradients(
            lam_raw=np.zeros_like(params.lam_raw),
            rho_raw=np.zeros_like(params.rho_raw),
            p=np.zeros_like(params.p),
            gam_raw=np.zeros_like(params.gam_raw),
        )

    def check_finite(self):
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteGradient(
                    f"gradient field {name} contains non-finite entries"
                )


def pb_loss(v_final: np.ndarray, shards: Sequence, client_indices=None) -> float:
    """Sum of local training losses at the final-cell models."""
    idx = np.arange(len(shards)) if client_indices is None else np.asarray(client_indices)
    total = 0.0
    for j, ci in enumerate(idx):
        total += sse_loss(shards[ci].X_train, v_final[j], shards[ci].Y_train)
    return total


def _seed_vbar(tape: Tape, shards: Sequence, seed_clients) -> np.ndarray:
    """d P_b / d v^L for the seeded clients: 2 X'(X v - Y)."""
    m, k = tape.m_active, tape.k
    v_final = tape.final_v()
    vbar = np.zeros((m, k))
    for j in seed_clients:
        shard = shards[tape.client_indices[j]]
        r = shard.X_train @ v_final[j] - shard.Y_train
        vbar[j] = 2.0 * shard.X_train.T @ r
    return vbar


def _reverse_pass(
    tape: Tape,
    shards: Sequence,
    grads: ParamGradients,
    seed_clients,
    keep_mask: np.ndarray,
):
    """Walk the tape backwards accumulating adjoints into `grads`.

    `keep_mask` selects the clients whose chains carry adjoints through
    the aggregation boundary (all clients under the exact policy; a
    single client per pass under federated_local). Aggregation-weight
    edges (p, gamma) are accumulated for every client regardless.
    """
    m, k = tape.m_active, tape.k
    idx = tape.client_indices
    vbar = _seed_vbar(tape, shards, seed_clients)
    zbar = np.zeros((m, k))
    albar = np.zeros((m, k))
    wbar = np.zeros(k)
    km = keep_mask[:, None]

    for rec in reversed(tape.cells):
        s = rec.slot
        rho = rec.rho_eff

        # ---- phi4: w = sum(q_i u_i) / sum(q_i), q = p * gamma_eff ----
        u = rec.v - rec.z - rec.alpha
        q = rec.p * rec.gam_eff
        S = float(q.sum())
        contrib = (q / S)[:, None] * wbar[None, :]
        contrib = np.where(km, contrib, 0.0)
        vbar += contrib
        zbar -= contrib
        albar -= contrib
        qbar = (u - rec.w[None, :]) @ wbar / S
        grads.p[s, idx] += qbar * rec.gam_eff
        grads.gam_raw[s, idx] += qbar * rec.p * rec.gam_on
        wbar = np.zeros(k)

        # ---- phi3: z = rho * d / (lam + rho), d = v - w_prev - alpha ----
        d = rec.v - rec.w_prev[None, :] - rec.alpha
        denom = rec.lam_eff + rho[:, None]
        sfac = rho[:, None] / denom
        vbar += sfac * zbar
        albar -= sfac * zbar
        wbar -= (sfac * zbar).sum(axis=0)
        grads.lam_raw[s, idx] += -zbar * rho[:, None] * d / denom**2 * rec.lam_on
        grads.rho_raw[s, idx] += (zbar * d * rec.lam_eff / denom**2).sum(axis=1) * rec.rho_on
        zbar = np.zeros((m, k))

        # ---- phi2 ----
        new_vbar = np.zeros((m, k))
        if tape.mode == "linear":
            # v = A^{-1}(rho * anchor + X'Y), A = X'X + rho I,
            # anchor = w_prev + z_prev + alpha.
            for j in range(m):
                if not keep_mask[j] or not np.any(vbar[j]):
                    continue
                t = chol_solve(rec.chol[j], vbar[j])
                anchor = rec.w_prev + rec.z_prev[j] + rec.alpha[j]
                rt = rho[j] * t
                albar[j] += rt
                zbar[j] += rt
                wbar += rt
                if rec.rho_on[j]:
                    grads.rho_raw[s, idx[j]] += float(t @ (anchor - rec.v[j]))
        else:
            # unrolled gradient steps on F(v) + rho/2 ||anchor - v||^2
            lr = rec.grad_lr
            for j in range(m):
                if not keep_mask[j] or not np.any(vbar[j]):
                    continue
                shard = shards[idx[j]]
                batch = None if rec.batch_idx is None else rec.batch_idx[j]
                Xb = shard.X_train if batch is None else shard.X_train[batch]
                H = 2.0 * Xb.T @ Xb
                anchor = rec.z_prev[j] + rec.w_prev + rec.alpha[j]
                vb = vbar[j].copy()
                ubar = np.zeros(k)
                rho_acc = 0.0
                for t in range(rec.grad_steps - 1, -1, -1):
                    v_t = rec.v_iterates[j, t]
                    rho_acc += -lr * float(vb @ (v_t - anchor))
                    ubar += lr * rho[j] * vb
                    vb = vb - lr * (H @ vb + rho[j] * vb)
                new_vbar[j] = vb
                albar[j] += ubar
                zbar[j] += ubar
                wbar += ubar
                if rec.rho_on[j]:
                    grads.rho_raw[s, idx[j]] += rho_acc
        vbar = new_vbar

        # ---- phi1: alpha = alpha_prev + step_w * (z_prev - v_prev + w_prev) ----
        vbar -= rec.step_w[:, None] * albar
        zbar += rec.step_w[:, None] * albar
        wbar += (rec.step_w[:, None] * albar).sum(axis=0)
        if tape.dual_update == "rho_step":
            resid = rec.z_prev - rec.v_prev + rec.w_prev[None, :]
            grads.rho_raw[s, idx] += (albar * resid).sum(axis=1) * rec.rho_on
        # albar itself passes through unchanged to alpha_prev

    # adjoints of the initial state are discarded (constants).


def backward(tape: Tape, shards: Sequence, policy: str = "exact") -> ParamGradients:
    """Gradients of P_b with respect to every raw learnable parameter."""
    gradient_boundary_policy(policy)
    if len(shards) != tape.M_total:
        raise TapeMismatch(
            f"tape recorded {tape.M_total} clients, got {len(shards)} shards"
        )
    if not tape.cells:
        raise TapeMismatch("tape has no recorded cells")
    for j, ci in enumerate(tape.client_indices):
        if shards[ci].X_train.shape[1] != tape.k:
            raise TapeMismatch("tape feature dimension disagrees with shards")

    m = tape.m_active
    ref = tape.cells[0]
    S_slots = 1 if tape.tied else tape.L
    proto = LearnableParams(
        lam_raw=np.zeros((S_slots, tape.M_total, tape.k)),
        rho_raw=np.zeros((S_slots, tape.M_total)),
        p=np.zeros((S_slots, tape.M_total)),
        gam_raw=np.zeros((S_slots, tape.M_total)),
        L=tape.L,
        tied=tape.tied,
    )
    grads = ParamGradients.zeros_like(proto)

    if policy == "exact":
        _reverse_pass(tape, shards, grads, range(m), np.ones(m, dtype=bool))
    else:
        for i in range(m):
            gi = ParamGradients.zeros_like(proto)
            keep = np.zeros(m, dtype=bool)
            keep[i] = True
            _reverse_pass(tape, shards, gi, [i], keep)
            ci = tape.client_indices[i]
            grads.lam_raw[:, ci] += gi.lam_raw[:, ci]
            grads.rho_raw[:, ci] += gi.rho_raw[:, ci]
            grads.p += gi.p
            grads.gam_raw += gi.gam_raw
    grads.check_finite()
    return grads


def fd_gradient(
    shards: Sequence,
    params: LearnableParams,
    which: Tuple[str, Tuple[int, ...]],
    h: float = 1e-5,
    state0: Optional[CellState] = None,
    **forward_kwargs,
) -> float:
    """Central finite difference of P_b along one raw parameter coordinate.

    `which` is (field_name, index_tuple) into the raw parameter arrays,
    e.g. ("lam_raw", (0, 2, 3)). The forward must be deterministic: use
    full batches (or preset ones) and pass the same state0 the original
    forward used.
    """
    if h <= 0:
        raise ValueError("fd_gradient: h must be positive")
    name, index = which
    if name not in PARAM_FIELDS:
        raise LayoutMismatch(f"unknown parameter field {name!r}")

    def probe(delta: float) -> float:
        p2 = params.copy()
        getattr(p2, name)[index] += delta
        v, tape = forward_network(shards, p2, state0=state0, **forward_kwargs)
        return pb_loss(v, shards, tape.client_indices)

    hi, lo = probe(+h), probe(-h)
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NonFiniteInput("fd_gradient: probe produced non-finite loss")
    return (hi - lo) / (2.0 * h)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """First/second-moment accumulators for the adaptive mode, plus the
    step counter; the plain mode ignores the moment buffers."""

    kind: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(
    params: LearnableParams,
    kind: str = "adam",
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    if kind not in ("adam", "gd"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    state = OptimizerState(kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name in PARAM_FIELDS:
        arr = getattr(params, name)
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def optimizer_step(
    params: LearnableParams, grads: ParamGradients, state: OptimizerState
) -> LearnableParams:
    """One optimizer update; returns new params, mutates `state`."""
    out = params.copy()
    for name in PARAM_FIELDS:
        if getattr(params, name).shape != getattr(grads, name).shape:
            raise LayoutMismatch(f"gradient shape mismatch on {name}")
        if state.m[name].shape != getattr(params, name).shape:
            raise LayoutMismatch(f"optimizer state shape mismatch on {name}")
    state.t += 1
    for name in PARAM_FIELDS:
        arr = getattr(out, name)
        g = getattr(grads, name)
        if state.kind == "gd":
            arr -= state.lr * g
            continue
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**state.t)
        vhat = v / (1.0 - state.beta2**state.t)
        arr -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out
