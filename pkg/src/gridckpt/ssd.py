"""Time-varying linear-recurrence layers with hand-derived adjoints.

Shape conventions, used everywhere in this package:

    x_t     (d,)        one input step; viewed per head as (H, P), d = H*P
    h       (H, N, P)   recurrent state: N channels per head, P lanes per head
    block   (T, d)      a contiguous range of steps, T >= 1

Per head, one step of the selective layer computes

    z_t     = w_delta . x_t + b_delta            (scalar)
    a_t     = exp(-softplus(z_t))   in (0, 1)    state retention
    B_t     = W_B x_t               (N,)         input projection
    C_t     = W_C x_t               (N,)         readout projection
    h_t     = a_t * h_{t-1} + outer(B_t, x_t)
    y_t     = C_t^T h_t             (P,)         [+ x_t when residual is set]

The recurrence in h is linear; the only nonlinearity is in how the
coefficients are generated from the input. `rnn_step` is the classical
fixed-parameter recurrent cell h_t = sigma(A h_{t-1} + B x_t),
y_t = sigma(C h_t); with sigma = identity it coincides with the scalar
(N=1, P=1) case of the selective layer at constant coefficients.

Determinism contract: for a given (layer, step) the same floating-point
operations run in the same order no matter how the sequence is chunked.
Reductions over the time axis are therefore explicit sequential loops
(time-descending in the backward pass), and batched contractions only
contract the fixed-size axes (P or N) through np.einsum's default
non-BLAS path, whose per-element summation order does not depend on the
batch extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """An input violates a documented shape contract."""


@dataclass(frozen=True)
class ModelConfig:
    """Stack geometry: L layers of width d = H * P with N state channels per head."""

    L: int
    d: int
    H: int
    P: int
    N: int
    S_max: int = 1 << 20
    precision: str = "f64"

    def __post_init__(self):
        if min(self.L, self.d, self.H, self.P, self.N) < 1:
            raise ValueError("L, d, H, P, N must all be >= 1")
        if self.d != self.H * self.P:
            raise ValueError(f"d must equal H*P, got d={self.d}, H*P={self.H * self.P}")
        if self.S_max < 1:
            raise ValueError("S_max must be >= 1")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(DTYPES[self.precision])

    @property
    def state_size(self) -> int:
        """Elements in one layer's recurrent state."""
        return self.H * self.N * self.P


def make_config(L: int, d: int, H: int, N: int, **kw) -> ModelConfig:
    """Build a config from (L, d, H, N), deriving P = d // H."""
    if d % H != 0:
        raise ValueError(f"d={d} not divisible by H={H}")
    return ModelConfig(L=L, d=d, H=H, P=d // H, N=N, **kw)


@dataclass
class SSDLayerParams:
    """One selective layer. Arrays are stacked over heads (leading H axis)."""

    w_delta: np.ndarray  # (H, P)
    b_delta: np.ndarray  # (H,)
    W_B: np.ndarray      # (H, N, P)
    W_C: np.ndarray      # (H, N, P)
    residual: bool = True

    def __post_init__(self):
        H, N, P = self.W_B.shape
        if self.w_delta.shape != (H, P) or self.b_delta.shape != (H,):
            raise ShapeError("w_delta/b_delta inconsistent with W_B")
        if self.W_C.shape != (H, N, P):
            raise ShapeError("W_C inconsistent with W_B")
        for a in (self.w_delta, self.b_delta, self.W_B, self.W_C):
            if not np.all(np.isfinite(a)):
                raise ValueError("layer parameters must be finite")

    @property
    def shape_hnp(self) -> tuple[int, int, int]:
        return self.W_B.shape


@dataclass
class RNNLayerParams:
    """Classical fixed-parameter recurrent cell with scalar input/output."""

    A: np.ndarray  # (N, N)
    B: np.ndarray  # (N,)
    C: np.ndarray  # (N,)
    activation: str = "tanh"

    def __post_init__(self):
        N = self.A.shape[0]
        if self.A.shape != (N, N) or self.B.shape != (N,) or self.C.shape != (N,):
            raise ShapeError("RNN parameter shapes inconsistent")
        if self.activation not in ("tanh", "identity"):
            raise ValueError("activation must be 'tanh' or 'identity'")


def init_params(config: ModelConfig, seed: int) -> list[SSDLayerParams]:
    """Deterministic layer stack for (config, seed).

    Weights are zero-mean normal with scale 1/sqrt(fan-in) = 1/sqrt(P);
    b_delta is placed so softplus(b_delta) lands in [0.001, 0.1], i.e. the
    state retention a ~ exp(-softplus(b)) starts close to 1 (slow decay).
    """
    rng = np.random.default_rng(seed)
    dt = config.dtype
    H, N, P = config.H, config.N, config.P
    scale = 1.0 / np.sqrt(P)
    layers = []
    for _ in range(config.L):
        w = rng.normal(0.0, scale, size=(H, P))
        W_B = rng.normal(0.0, scale, size=(H, N, P))
        W_C = rng.normal(0.0, scale, size=(H, N, P))
        rate = rng.uniform(0.001, 0.1, size=H)
        b = np.log(np.expm1(rate))  # softplus inverse
        layers.append(
            SSDLayerParams(
                w_delta=w.astype(dt),
                b_delta=b.astype(dt),
                W_B=W_B.astype(dt),
                W_C=W_C.astype(dt),
            )
        )
    return layers


@dataclass
class SSDStack:
    """A config plus its layer parameters; the unit every engine op works on."""

    config: ModelConfig
    layers: list[SSDLayerParams]

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "SSDStack":
        return cls(config, init_params(config, seed))

    def zero_state(self) -> np.ndarray:
        c = self.config
        return np.zeros((c.H, c.N, c.P), dtype=c.dtype)


# ---------------------------------------------------------------------------
# single-step operations


def project_selective(params: SSDLayerParams, x_t: np.ndarray):
    """Input-dependent coefficients for one step: (a_t, B_t, C_t).

    a_t has shape (H,) with every entry in (0, 1); B_t and C_t have shape
    (H, N).
    """
    H, N, P = params.shape_hnp
    if x_t.shape != (H * P,):
        raise ShapeError(f"x_t must have shape ({H * P},), got {x_t.shape}")
    xh = x_t.reshape(H, P)
    z = np.einsum("hp,hp->h", xh, params.w_delta) + params.b_delta
    delta = np.logaddexp(0.0, z).astype(x_t.dtype, copy=False)  # softplus
    a = np.exp(-delta)
    B = np.einsum("hp,hnp->hn", xh, params.W_B)
    C = np.einsum("hp,hnp->hn", xh, params.W_C)
    return a, B, C


def ssd_step(a_t, B_t, C_t, x_t, h_prev, residual: bool = False):
    """One recurrence step: h_t = a_t h_{t-1} + outer(B_t, x), y_t = C_t^T h_t."""
    H, N = B_t.shape
    P = h_prev.shape[-1]
    if h_prev.shape != (H, N, P):
        raise ShapeError(f"h_prev must have shape ({H}, {N}, {P}), got {h_prev.shape}")
    if x_t.shape != (H * P,):
        raise ShapeError(f"x_t must have shape ({H * P},), got {x_t.shape}")
    if a_t.shape != (H,) or C_t.shape != (H, N):
        raise ShapeError("a_t/C_t inconsistent with B_t")
    xh = x_t.reshape(H, P)
    h_t = a_t[:, None, None] * h_prev + B_t[:, :, None] * xh[:, None, :]
    y = np.einsum("hn,hnp->hp", C_t, h_t).reshape(H * P)
    if residual:
        y = y + x_t
    return y, h_t


def rnn_step(params: RNNLayerParams, x_t: float, h_prev: np.ndarray):
    """h_t = sigma(A h_{t-1} + B x_t), y_t = sigma(C h_t); sigma per params."""
    act = np.tanh if params.activation == "tanh" else (lambda v: v)
    h_t = act(params.A @ h_prev + params.B * x_t)
    y_t = act(np.dot(params.C, h_t))
    return float(y_t), h_t


# ---------------------------------------------------------------------------
# chunked forward / backward


@dataclass
class ChunkCache:
    """Per-step internals one chunk_backward needs: x, a, B, C and the h trail.

    `h` has T+1 entries; h[0] is the incoming state, h[i] the state after
    step i. `x` is a reference to the caller's input block, not a copy.
    """

    x: np.ndarray  # (T, d)
    a: np.ndarray  # (T, H)
    B: np.ndarray  # (T, H, N)
    C: np.ndarray  # (T, H, N)
    h: np.ndarray  # (T+1, H, N, P)

    @property
    def scan_nbytes(self) -> int:
        """Bytes owned by the cache itself (x is charged by its owner)."""
        return self.a.nbytes + self.B.nbytes + self.C.nbytes + self.h.nbytes


def _selective_block(params: SSDLayerParams, xh: np.ndarray):
    """Coefficients for a whole block: xh is (T, H, P)."""
    z = np.einsum("thp,hp->th", xh, params.w_delta) + params.b_delta
    delta = np.logaddexp(0.0, z).astype(xh.dtype, copy=False)
    a = np.exp(-delta)
    B = np.einsum("thp,hnp->thn", xh, params.W_B)
    C = np.einsum("thp,hnp->thn", xh, params.W_C)
    return z, delta, a, B, C


def chunk_forward(params: SSDLayerParams, x_block: np.ndarray, h_in: np.ndarray,
                  retain: bool = False):
    """Run T sequential steps; returns (y_block, h_out, cache or None).

    Equivalent, bit for bit, to T applications of ssd_step with state carry.
    """
    H, N, P = params.shape_hnp
    T = x_block.shape[0]
    if T < 1 or x_block.shape != (T, H * P):
        raise ShapeError(f"x_block must be (T, {H * P}) with T >= 1, got {x_block.shape}")
    if h_in.shape != (H, N, P):
        raise ShapeError(f"h_in must be ({H}, {N}, {P}), got {h_in.shape}")
    xh = x_block.reshape(T, H, P)
    _, _, a, B, C = _selective_block(params, xh)

    y = np.empty((T, H, P), dtype=x_block.dtype)
    h_trail = np.empty((T + 1, H, N, P), dtype=x_block.dtype) if retain else None
    if retain:
        h_trail[0] = h_in
    h = h_in
    for t in range(T):
        h = a[t][:, None, None] * h + B[t][:, :, None] * xh[t][:, None, :]
        if retain:
            h_trail[t + 1] = h
        y[t] = np.einsum("hn,hnp->hp", C[t], h)
    y_block = y.reshape(T, H * P)
    if params.residual:
        y_block = y_block + x_block
    cache = ChunkCache(x=x_block, a=a, B=B, C=C, h=h_trail) if retain else None
    return y_block, h.copy(), cache


@dataclass
class LayerGrads:
    """Parameter gradients for one layer, shape-congruent with SSDLayerParams."""

    w_delta: np.ndarray
    b_delta: np.ndarray
    W_B: np.ndarray
    W_C: np.ndarray

    @classmethod
    def zeros_like(cls, params: SSDLayerParams) -> "LayerGrads":
        return cls(
            np.zeros_like(params.w_delta),
            np.zeros_like(params.b_delta),
            np.zeros_like(params.W_B),
            np.zeros_like(params.W_C),
        )

    def arrays(self):
        return (self.w_delta, self.b_delta, self.W_B, self.W_C)


def chunk_backward(params: SSDLayerParams, cache: ChunkCache,
                   grad_y_block: np.ndarray, grad_h_out: np.ndarray,
                   accum: LayerGrads | None = None):
    """Adjoint of chunk_forward on the scalar <grad_y, y> + <grad_h_out, h_out>.

    Returns (grad_x_block, grad_h_in, accum). Parameter gradients are added
    into `accum` one step at a time, time-descending, so that chunked and
    unchunked traversals produce bitwise-identical accumulator values.
    """
    H, N, P = params.shape_hnp
    if cache is None or cache.h is None:
        raise ValueError("chunk_backward needs a cache from chunk_forward(retain=True)")
    T = cache.x.shape[0]
    if grad_y_block.shape != (T, H * P):
        raise ShapeError(f"grad_y_block must be ({T}, {H * P}), got {grad_y_block.shape}")
    if grad_h_out.shape != (H, N, P):
        raise ShapeError("grad_h_out shape mismatch")
    if accum is None:
        accum = LayerGrads.zeros_like(params)

    xh = cache.x.reshape(T, H, P)
    gy = grad_y_block.reshape(T, H, P)

    # backward scan over the state recurrence, time-descending
    g_h = grad_h_out.copy()
    ga = np.empty_like(cache.a)            # (T, H)   d/da_t
    gB = np.empty_like(cache.B)            # (T, H, N)
    gxB = np.empty((T, H, P), dtype=cache.x.dtype)
    for t in range(T - 1, -1, -1):
        g_h += cache.C[t][:, :, None] * gy[t][:, None, :]
        ga[t] = np.einsum("hnp,hnp->h", g_h, cache.h[t])
        gB[t] = np.einsum("hnp,hp->hn", g_h, xh[t])
        gxB[t] = np.einsum("hnp,hn->hp", g_h, cache.B[t])
        g_h *= cache.a[t][:, None, None]
    grad_h_in = g_h

    # coefficient gradients that do not feed the scan, batched over the block
    gC = np.einsum("thnp,thp->thn", cache.h[1:], gy)
    z = np.einsum("thp,hp->th", xh, params.w_delta) + params.b_delta
    delta = np.logaddexp(0.0, z).astype(cache.x.dtype, copy=False)
    sig = np.exp(z - delta)                # d softplus / dz
    gz = sig * (-cache.a * ga)             # through a = exp(-softplus(z))

    # input gradient: residual path + the four coefficient paths, per step
    grad_x = grad_y_block.copy() if params.residual else np.zeros_like(grad_y_block)
    gxh = grad_x.reshape(T, H, P)
    gxh += gxB
    gxh += np.einsum("thn,hnp->thp", gB, params.W_B)
    gxh += np.einsum("thn,hnp->thp", gC, params.W_C)
    gxh += gz[:, :, None] * params.w_delta[None]

    # parameter accumulation, strictly sequential and time-descending
    aw, ab, aWB, aWC = accum.w_delta, accum.b_delta, accum.W_B, accum.W_C
    for t in range(T - 1, -1, -1):
        aWB += gB[t][:, :, None] * xh[t][:, None, :]
        aWC += gC[t][:, :, None] * xh[t][:, None, :]
        aw += gz[t][:, None] * xh[t]
        ab += gz[t]
    return grad_x, grad_h_in, accum


# ---------------------------------------------------------------------------
# whole-model reference path (everything cached; gradient ground truth)


@dataclass
class GradientBundle:
    """Per-layer parameter gradients plus the input-sequence gradient."""

    layers: list[LayerGrads]
    x_seq: np.ndarray  # (S, d)

    @classmethod
    def zeros(cls, model: SSDStack, S: int) -> "GradientBundle":
        return cls(
            [LayerGrads.zeros_like(p) for p in model.layers],
            np.zeros((S, model.config.d), dtype=model.config.dtype),
        )

    def max_abs_diff(self, other: "GradientBundle") -> float:
        worst = float(np.max(np.abs(self.x_seq - other.x_seq)))
        for a, b in zip(self.layers, other.layers):
            for ga, gb in zip(a.arrays(), b.arrays()):
                worst = max(worst, float(np.max(np.abs(ga - gb))))
        return worst


def model_forward_full(model: SSDStack, x_seq: np.ndarray, ledger=None, counter=None):
    """Forward through the whole stack retaining every per-step internal.

    Returns (y_seq, final_states, caches). Layer j consumes layer j-1's
    output sequence. The ledger is charged for everything retained: the
    input (tag io), each layer's scan cache and each inter-layer sequence
    (tag full_cache). The top output is handed to the caller and never
    retained for backward, so it is not charged.
    """
    c = model.config
    S = x_seq.shape[0]
    if S > c.S_max:
        raise ValueError(f"S={S} exceeds S_max={c.S_max}")
    if x_seq.shape != (S, c.d):
        raise ShapeError(f"x_seq must be (S, {c.d}), got {x_seq.shape}")
    if ledger is not None:
        ledger.charge("io", x_seq.nbytes)
    caches = []
    final_states = []
    x_cur = x_seq
    for j, layer in enumerate(model.layers):
        y, h_out, cache = chunk_forward(layer, x_cur, model.zero_state(), retain=True)
        if counter is not None:
            counter.forward_evals += S
        final_states.append(h_out)
        caches.append(cache)
        if ledger is not None:
            ledger.charge("full_cache", cache.scan_nbytes)
            if j < c.L - 1:
                ledger.charge("full_cache", y.nbytes)  # retained as next layer's input
        x_cur = y
    return x_cur, final_states, caches


def model_backward_full(model: SSDStack, caches, grad_y_seq: np.ndarray,
                        grad_final_states=None, ledger=None):
    """Exact reverse traversal of model_forward_full.

    Layers are processed top-down, time backward within each layer, with the
    fixed time-descending accumulation order. Each layer's cache is released
    from the ledger once consumed.
    """
    c = model.config
    if caches is None or len(caches) != c.L:
        raise ValueError("missing or mismatched forward cache")
    S = grad_y_seq.shape[0]
    bundle = GradientBundle.zeros(model, S)
    g_out = grad_y_seq  # caller-owned; not charged
    g_out_engine = False
    for j in range(c.L - 1, -1, -1):
        gh = (grad_final_states[j] if grad_final_states is not None
              else model.zero_state())
        g_in, _, _ = chunk_backward(model.layers[j], caches[j], g_out, gh,
                                    accum=bundle.layers[j])
        if ledger is not None:
            ledger.charge("frontier", g_in.nbytes)
            if g_out_engine:
                ledger.release("frontier", g_out.nbytes)
            ledger.release("full_cache", caches[j].scan_nbytes)
            if j > 0:
                ledger.release("full_cache", caches[j].x.nbytes)
        g_out = g_in
        g_out_engine = True
    bundle.x_seq[...] = g_out
    if ledger is not None:
        ledger.release("frontier", g_out.nbytes)
        ledger.release("io", caches[0].x.nbytes)
    return bundle


def loss_mse(y_seq: np.ndarray, target_seq: np.ndarray):
    """Mean squared error over all elements and its exact gradient."""
    if y_seq.shape != target_seq.shape:
        raise ShapeError(f"shape mismatch: {y_seq.shape} vs {target_seq.shape}")
    r = y_seq - target_seq
    loss = float(np.mean(r * r))
    grad = (2.0 / r.size) * r
    return loss, grad
