"""Forward pass of the unrolled consensus network.

One iteration of the underlying splitting scheme is modeled as a
four-layer cell, applied in sequence per client and then globally:

  phi1  dual ascent on the consensus multiplier alpha
  phi2  personalized-model update v (closed form, or a few gradient steps)
  phi3  auxiliary deviation update z (entrywise shrinkage by the
        per-coordinate consensus weights)
  phi4  server aggregation of the client vectors v - z - alpha into w

L cells concatenated form the network; every per-layer constant of the
scheme (consensus weights, penalty scalars, aggregation weights and the
server-side penalty copies) is a trainable parameter. The forward pass
records a Tape with everything the reverse pass needs.

Two dual-step conventions are provided. The default multiplies the
consensus residual by the penalty scalar (``rho_step``); ``unit_step``
adds the raw residual, which is the convention under which the
augmented objective provably descends for large fixed penalties (see
diagnostics). The two coincide when the penalty equals 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateWeights,
    DimensionMismatch,
    NonFiniteGradient,
    NonFiniteInput,
)
from .math_core import (
    EPS,
    DiagPD,
    as_matrix,
    as_vector,
    chol_solve,
    clamp_positive,
    rectify,
    spd_cholesky,
)

DUAL_UPDATES = ("rho_step", "unit_step")
MODES = ("linear", "grad")

GRAD_LR_DEFAULT = 0.01
GRAD_STEPS_DEFAULT = 5


# ---------------------------------------------------------------------------
# per-client layer operations
# ---------------------------------------------------------------------------

def phi1_dual(alpha_prev, v_prev, z_prev, w_prev, rho: float) -> np.ndarray:
    """Dual ascent step: alpha + rho * (z - v + w)."""
    alpha_prev = as_vector(alpha_prev, "alpha_prev")
    v_prev = as_vector(v_prev, "v_prev")
    z_prev = as_vector(z_prev, "z_prev")
    w_prev = as_vector(w_prev, "w_prev")
    k = alpha_prev.shape[0]
    if not (v_prev.shape[0] == z_prev.shape[0] == w_prev.shape[0] == k):
        raise DimensionMismatch("phi1_dual: operand lengths disagree")
    return alpha_prev + rho * (z_prev - v_prev + w_prev)


def phi2_v_linear(X, Y, alpha, z_prev, w_prev, rho: float) -> np.ndarray:
    """Closed-form v update: solve (X'X + rho I) v = rho(w+z+alpha) + X'Y."""
    v, _ = _phi2_linear_with_factor(X, Y, alpha, z_prev, w_prev, rho)
    return v


def _phi2_linear_with_factor(X, Y, alpha, z_prev, w_prev, rho):
    X = as_matrix(X, "X")
    Y = as_vector(Y, "Y")
    alpha = as_vector(alpha, "alpha")
    z_prev = as_vector(z_prev, "z_prev")
    w_prev = as_vector(w_prev, "w_prev")
    k = X.shape[1]
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch("phi2_v_linear: X rows and Y length disagree")
    if not (alpha.shape[0] == z_prev.shape[0] == w_prev.shape[0] == k):
        raise DimensionMismatch("phi2_v_linear: vector lengths disagree with X columns")
    A = X.T @ X + rho * np.eye(k)
    rhs = rho * (w_prev + z_prev + alpha) + X.T @ Y
    L = spd_cholesky(A)
    return chol_solve(L, rhs), L


def phi2_v_grad(
    grad_of_F: Callable[[np.ndarray], np.ndarray],
    v_prev,
    alpha,
    z_prev,
    w_prev,
    rho: float,
    lr: float = GRAD_LR_DEFAULT,
    steps: int = GRAD_STEPS_DEFAULT,
) -> np.ndarray:
    """v update by `steps` gradient steps on F(v) + rho/2 ||z+w+alpha-v||^2."""
    if lr <= 0:
        raise ValueError("phi2_v_grad: lr must be positive")
    if steps < 1:
        raise ValueError("phi2_v_grad: steps must be >= 1")
    v = as_vector(v_prev, "v_prev").copy()
    anchor = as_vector(z_prev, "z_prev") + as_vector(w_prev, "w_prev") + as_vector(alpha, "alpha")
    for _ in range(steps):
        g = np.asarray(grad_of_F(v), dtype=np.float64) + rho * (v - anchor)
        v = v - lr * g
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradient("phi2_v_grad: iterate became non-finite")
    return v


def phi3_aux(alpha, v, w_prev, rho: float, lam) -> np.ndarray:
    """Entrywise z[j] = rho * (v - w - alpha)[j] / (rectify(lam_j) + rho).

    Large consensus weights pin the corresponding coordinate of z to 0
    (full consensus); zero weights pass the deviation through.
    """
    alpha = as_vector(alpha, "alpha")
    v = as_vector(v, "v")
    w_prev = as_vector(w_prev, "w_prev")
    lam_eff = lam.effective if isinstance(lam, DiagPD) else rectify(np.asarray(lam, dtype=np.float64))
    k = v.shape[0]
    if not (alpha.shape[0] == w_prev.shape[0] == lam_eff.shape[0] == k):
        raise DimensionMismatch("phi3_aux: operand lengths disagree")
    return rho * (v - w_prev - alpha) / (lam_eff + rho)


def _aggregate_client_vectors(u: np.ndarray, ps: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    """Server side of the aggregation: normalized weighted mean of the
    received client vectors u_i. The only client data this touches is u."""
    q = ps * clamp_positive(gammas)
    s = float(q.sum())
    if abs(s) < 1e-12:
        raise DegenerateWeights("aggregation weights sum to zero")
    return (q / s) @ u


def phi4_global(vs, zs, alphas, ps, gammas) -> np.ndarray:
    """Weighted average of the client vectors (v - z - alpha).

    Weights are p_i * clamp(gamma_i); they are normalized first so the
    single-client case returns v - z - alpha exactly.
    """
    vs = np.atleast_2d(np.asarray(vs, dtype=np.float64))
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    alphas = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
    ps = np.atleast_1d(np.asarray(ps, dtype=np.float64))
    gammas = np.atleast_1d(np.asarray(gammas, dtype=np.float64))
    m = vs.shape[0]
    if not (zs.shape == vs.shape and alphas.shape == vs.shape):
        raise DimensionMismatch("phi4_global: state shapes disagree")
    if not (ps.shape[0] == gammas.shape[0] == m):
        raise DimensionMismatch("phi4_global: weight lengths disagree")
    return _aggregate_client_vectors(vs - zs - alphas, ps, gammas)


# ---------------------------------------------------------------------------
# parameters and state
# ---------------------------------------------------------------------------

@dataclass
class LearnableParams:
    """Raw trainable parameters, one slot per layer (or a single shared
    slot when tied across layers).

    Shapes: lam_raw [S, M, k], rho_raw / p / gam_raw [S, M], where
    S = L for untied parameters and S = 1 for tied.
    """

    lam_raw: np.ndarray
    rho_raw: np.ndarray
    p: np.ndarray
    gam_raw: np.ndarray
    L: int
    tied: bool = False

    @property
    def M(self) -> int:
        return self.lam_raw.shape[1]

    @property
    def k(self) -> int:
        return self.lam_raw.shape[2]

    def slot(self, layer: int) -> int:
        """Parameter slot for a 1-based layer index."""
        return 0 if self.tied else layer - 1

    def copy(self) -> "LearnableParams":
        return LearnableParams(
            lam_raw=self.lam_raw.copy(),
            rho_raw=self.rho_raw.copy(),
            p=self.p.copy(),
            gam_raw=self.gam_raw.copy(),
            L=self.L,
            tied=self.tied,
        )


def init_params(M: int, k: int, L: int, tied: bool = False) -> LearnableParams:
    """Default initialization: unit consensus weights and penalties,
    uniform aggregation weights."""
    S = 1 if tied else L
    return LearnableParams(
        lam_raw=np.ones((S, M, k)),
        rho_raw=np.ones((S, M)),
        p=np.full((S, M), 1.0 / M),
        gam_raw=np.ones((S, M)),
        L=L,
        tied=tied,
    )


@dataclass
class CellState:
    """Per-client iterates v, z, alpha (shape [M, k]) plus the global w."""

    v: np.ndarray
    z: np.ndarray
    alpha: np.ndarray
    w: np.ndarray

    def copy(self) -> "CellState":
        return CellState(self.v.copy(), self.z.copy(), self.alpha.copy(), self.w.copy())

    @property
    def M(self) -> int:
        return self.v.shape[0]

    @property
    def k(self) -> int:
        return self.v.shape[1]


def init_state(M: int, k: int, seed: int = 0) -> CellState:
    """Standard start: v ~ Normal(0, 0.1^2) from a seeded generator,
    zero duals, zero auxiliaries, zero global model."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    return CellState(
        v=rng.normal(0.0, 0.1, (M, k)),
        z=np.zeros((M, k)),
        alpha=np.zeros((M, k)),
        w=np.zeros(k),
    )


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class CellRecord:
    """Everything one cell's backward needs, in forward order."""

    layer: int
    slot: int
    # inputs ([m, k] over the active clients, [k] for w)
    v_prev: np.ndarray
    z_prev: np.ndarray
    alpha_prev: np.ndarray
    w_prev: np.ndarray
    # outputs
    v: np.ndarray
    z: np.ndarray
    alpha: np.ndarray
    w: np.ndarray
    # effective parameter values and clamp/rectifier pass-through masks
    rho_eff: np.ndarray
    rho_on: np.ndarray
    gam_eff: np.ndarray
    gam_on: np.ndarray
    lam_eff: np.ndarray
    lam_on: np.ndarray
    p: np.ndarray
    # dual-step weight actually used by phi1 (rho_eff or ones)
    step_w: np.ndarray
    # linear mode: cached Cholesky factors of X'X + rho I, [m, k, k]
    chol: Optional[np.ndarray] = None
    # grad mode: iterates [m, steps+1, k], per-client batch row indices
    v_iterates: Optional[np.ndarray] = None
    grad_lr: float = GRAD_LR_DEFAULT
    grad_steps: int = GRAD_STEPS_DEFAULT
    batch_idx: Optional[List[np.ndarray]] = None


@dataclass
class Tape:
    """Forward recording: initial state, per-cell records, and the
    client subset the pass ran over (0-based indices into the full
    client list)."""

    mode: str
    dual_update: str
    L: int
    M_total: int
    k: int
    client_indices: np.ndarray
    init: CellState
    cells: List[CellRecord] = field(default_factory=list)
    tied: bool = False

    @property
    def m_active(self) -> int:
        return self.client_indices.shape[0]

    def final_v(self) -> np.ndarray:
        return self.cells[-1].v if self.cells else self.init.v


# ---------------------------------------------------------------------------
# cell and network forward
# ---------------------------------------------------------------------------

def _client_cell_forward(
    X: np.ndarray,
    Y: np.ndarray,
    v_prev_i: np.ndarray,
    z_prev_i: np.ndarray,
    alpha_prev_i: np.ndarray,
    w_prev: np.ndarray,
    rho_i: float,
    lam_eff_i: np.ndarray,
    step_w_i: float,
    mode: str,
    grad_lr: float,
    grad_steps: int,
    batch: Optional[np.ndarray],
):
    """One client's share of a cell: phi1, phi2, phi3.

    Returns (alpha, v, z, chol_or_None, iterates_or_None). This is the
    single implementation used both by forward_network and by the
    message-passing round executor, so the two paths agree bitwise.
    """
    alpha_i = phi1_dual(alpha_prev_i, v_prev_i, z_prev_i, w_prev, step_w_i)
    chol_i = None
    iterates = None
    if mode == "linear":
        v_i, chol_i = _phi2_linear_with_factor(X, Y, alpha_i, z_prev_i, w_prev, rho_i)
    else:
        Xb = X if batch is None else X[batch]
        Yb = Y if batch is None else Y[batch]
        iterates = np.empty((grad_steps + 1, v_prev_i.shape[0]))
        iterates[0] = v_prev_i
        anchor = z_prev_i + w_prev + alpha_i
        v_i = v_prev_i.copy()
        for t in range(grad_steps):
            g = 2.0 * Xb.T @ (Xb @ v_i - Yb) + rho_i * (v_i - anchor)
            v_i = v_i - grad_lr * g
            if not np.all(np.isfinite(v_i)):
                raise NonFiniteGradient("cell forward: v iterate became non-finite")
            iterates[t + 1] = v_i
    z_i = phi3_aux(alpha_i, v_i, w_prev, rho_i, lam_eff_i)
    return alpha_i, v_i, z_i, chol_i, iterates


def forward_cell(
    state: CellState,
    shards: Sequence,
    params: LearnableParams,
    layer: int,
    mode: str = "linear",
    dual_update: str = "rho_step",
    tape: Optional[Tape] = None,
    client_indices: Optional[np.ndarray] = None,
    batch_rng: Optional[np.random.Generator] = None,
    batch_size: Optional[int] = None,
    grad_lr: float = GRAD_LR_DEFAULT,
    grad_steps: int = GRAD_STEPS_DEFAULT,
    preset_batches: Optional[List[Optional[np.ndarray]]] = None,
    message_sink: Optional[Callable[[str, int, Optional[int], np.ndarray], None]] = None,
) -> CellState:
    """Apply one cell (phi1..phi4) and return the new state.

    `shards` entries must expose X_train / Y_train; `client_indices`
    selects which parameter/data columns this pass runs over (defaults
    to all clients). Appends a CellRecord to `tape` when given.
    `preset_batches` replays previously drawn minibatch indices.

    `message_sink(kind, layer, client_index_or_None, payload)` is called
    with every vector that crosses the client/server boundary: one
    "client_vector" per client carrying u_i = v_i - z_i - alpha_i (the
    exact array the aggregation consumes), then one "global_broadcast"
    carrying the aggregated w.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if dual_update not in DUAL_UPDATES:
        raise ValueError(f"unknown dual_update {dual_update!r}")
    if not 1 <= layer <= params.L:
        raise DimensionMismatch(f"layer {layer} outside [1, {params.L}]")
    idx = np.arange(len(shards)) if client_indices is None else np.asarray(client_indices)
    m = idx.shape[0]
    if state.v.shape[0] != m:
        raise DimensionMismatch("forward_cell: state rows disagree with active clients")

    s = params.slot(layer)
    rho_raw = params.rho_raw[s, idx]
    gam_raw = params.gam_raw[s, idx]
    lam_raw = params.lam_raw[s, idx]
    p = params.p[s, idx]
    rho_eff = clamp_positive(rho_raw)
    gam_eff = clamp_positive(gam_raw)
    lam_eff = rectify(lam_raw)
    step_w = rho_eff if dual_update == "rho_step" else np.ones(m)

    k = state.k
    alpha = np.empty((m, k))
    v = np.empty((m, k))
    z = np.empty((m, k))
    chols = np.empty((m, k, k)) if mode == "linear" else None
    iterates = np.empty((m, grad_steps + 1, k)) if mode == "grad" else None
    batches: Optional[List[np.ndarray]] = [] if mode == "grad" else None

    for j, ci in enumerate(idx):
        shard = shards[ci]
        batch = None
        if preset_batches is not None:
            batch = preset_batches[j]
        elif mode == "grad" and batch_size is not None and batch_size < shard.X_train.shape[0]:
            if batch_rng is None:
                raise ValueError("batch_size given without batch_rng")
            batch = batch_rng.choice(shard.X_train.shape[0], size=batch_size, replace=False)
        a_i, v_i, z_i, chol_i, it_i = _client_cell_forward(
            shard.X_train,
            shard.Y_train,
            state.v[j],
            state.z[j],
            state.alpha[j],
            state.w,
            float(rho_eff[j]),
            lam_eff[j],
            float(step_w[j]),
            mode,
            grad_lr,
            grad_steps,
            batch,
        )
        alpha[j], v[j], z[j] = a_i, v_i, z_i
        if chols is not None:
            chols[j] = chol_i
        if iterates is not None:
            iterates[j] = it_i
        if batches is not None:
            batches.append(batch)

    u = v - z - alpha
    if message_sink is not None:
        for j, ci in enumerate(idx):
            message_sink("client_vector", layer, int(ci), u[j])
    w = _aggregate_client_vectors(u, p, gam_raw)
    if message_sink is not None:
        message_sink("global_broadcast", layer, None, w)
    new_state = CellState(v=v, z=z, alpha=alpha, w=w)
    if not (
        np.all(np.isfinite(v))
        and np.all(np.isfinite(z))
        and np.all(np.isfinite(alpha))
        and np.all(np.isfinite(w))
    ):
        raise NonFiniteInput(f"forward_cell: non-finite state after layer {layer}")

    if tape is not None:
        tape.cells.append(
            CellRecord(
                layer=layer,
                slot=s,
                v_prev=state.v.copy(),
                z_prev=state.z.copy(),
                alpha_prev=state.alpha.copy(),
                w_prev=state.w.copy(),
                v=v.copy(),
                z=z.copy(),
                alpha=alpha.copy(),
                w=w.copy(),
                rho_eff=rho_eff.copy(),
                rho_on=(rho_raw > EPS),
                gam_eff=gam_eff.copy(),
                gam_on=(gam_raw > EPS),
                lam_eff=lam_eff.copy(),
                lam_on=(lam_raw > 0.0),
                p=p.copy(),
                step_w=step_w.copy(),
                chol=chols,
                v_iterates=iterates,
                grad_lr=grad_lr,
                grad_steps=grad_steps,
                batch_idx=batches,
            )
        )
    return new_state


def forward_network(
    shards: Sequence,
    params: LearnableParams,
    L: Optional[int] = None,
    mode: str = "linear",
    dual_update: str = "rho_step",
    state0: Optional[CellState] = None,
    seed: int = 0,
    client_indices: Optional[np.ndarray] = None,
    batch_rng: Optional[np.random.Generator] = None,
    batch_size: Optional[int] = None,
    grad_lr: float = GRAD_LR_DEFAULT,
    grad_steps: int = GRAD_STEPS_DEFAULT,
    message_sink: Optional[Callable[[str, int, Optional[int], np.ndarray], None]] = None,
) -> Tuple[np.ndarray, Tape]:
    """Run L cells and return (final per-client models [m, k], tape).

    The initial state defaults to init_state(seed); pass `state0` to
    continue from carried-over iterates.
    """
    L = params.L if L is None else L
    if L < 1:
        raise ValueError("forward_network: L must be >= 1")
    idx = np.arange(len(shards)) if client_indices is None else np.asarray(client_indices)
    k = shards[idx[0]].X_train.shape[1] if len(idx) else 0
    state = init_state(idx.shape[0], k, seed) if state0 is None else state0.copy()
    tape = Tape(
        mode=mode,
        dual_update=dual_update,
        L=L,
        M_total=len(shards),
        k=k,
        client_indices=idx.copy(),
        init=state.copy(),
        tied=params.tied,
    )
    for layer in range(1, L + 1):
        state = forward_cell(
            state,
            shards,
            params,
            layer,
            mode=mode,
            dual_update=dual_update,
            tape=tape,
            client_indices=idx,
            batch_rng=batch_rng,
            batch_size=batch_size,
            grad_lr=grad_lr,
            grad_steps=grad_steps,
            message_sink=message_sink,
        )
    return state.v, tape


def replay_tape(tape: Tape, shards: Sequence, params: LearnableParams) -> bool:
    """Re-run the forward from the tape's initial state and confirm the
    recorded per-cell outputs are reproduced bit-for-bit."""
    state = tape.init.copy()
    for rec in tape.cells:
        state = forward_cell(
            state,
            shards,
            params,
            rec.layer,
            mode=tape.mode,
            dual_update=tape.dual_update,
            client_indices=tape.client_indices,
            grad_lr=rec.grad_lr,
            grad_steps=rec.grad_steps,
            preset_batches=rec.batch_idx,
        )
        if not (
            np.array_equal(state.v, rec.v)
            and np.array_equal(state.z, rec.z)
            and np.array_equal(state.alpha, rec.alpha)
            and np.array_equal(state.w, rec.w)
        ):
            return False
    return True
