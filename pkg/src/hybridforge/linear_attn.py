"""Linear-attention sublayers: ungated linear, gated linear (GLA), gated DeltaNet (GDN).

Each variant exposes three forms that must agree:
  - `linear_forward_recurrent`: per-step recurrence over a whole sequence,
    gradient-tape capable (distillation trains through it);
  - `linear_forward_reference`: quadratic unroll with fresh accumulators per
    output position, used purely as a correctness oracle;
  - `linear_step`: single-token decode; folding it over a sequence reproduces
    the recurrent form bit-for-bit (it runs the same per-step code).

Projections are applied inside the time loop (one [*, d_model] x [d_model,
d_model] product per step) so the fold and batch forms execute identical
kernels; chunkwise training kernels are deliberately absent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ShapeError
from .rng import SeededRng
from .tensor import Parameter, Tensor

VARIANTS = ("ungated", "gla", "gdn")

GLA_GATE_TEMPERATURE = 16.0
GLA_ALPHA_FLOOR = 1e-3
KEY_NORM_EPS = 1e-6
NORMALIZER_EPS = 1e-6


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ContractError(f"unknown linear-attention variant {variant!r}; expected one of {VARIANTS}")
    return variant


@dataclass
class LinearBlockWeights:
    """Projections plus per-variant gate parameters for one sublayer.

    Gate shapes (H = n_heads, D = d_model, dh = d_head):
      gla: w_alpha [H, D, dh], b_alpha [H, 1, dh] (per-channel decay);
      gdn: w_alpha/w_beta [H, D, 1], b_alpha/b_beta [H, 1, 1] (scalar gates).
    """

    variant: str
    n_heads: int
    d_head: int
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    w_alpha: Parameter | None = None
    b_alpha: Parameter | None = None
    w_beta: Parameter | None = None
    b_beta: Parameter | None = None

    @property
    def d_model(self) -> int:
        return self.n_heads * self.d_head

    @property
    def dtype(self):
        return self.wq.dtype

    def params(self) -> list[Parameter]:
        ps = [self.wq, self.wk, self.wv, self.wo]
        for p in (self.w_alpha, self.b_alpha, self.w_beta, self.b_beta):
            if p is not None:
                ps.append(p)
        return ps

    def clone(self) -> "LinearBlockWeights":
        def dup(p):
            return None if p is None else Parameter(p.data.copy(), p.name)

        return LinearBlockWeights(
            self.variant, self.n_heads, self.d_head,
            dup(self.wq), dup(self.wk), dup(self.wv), dup(self.wo),
            dup(self.w_alpha), dup(self.b_alpha), dup(self.w_beta), dup(self.b_beta),
        )


def init_linear_weights(
    variant: str,
    n_heads: int,
    d_head: int,
    rng: SeededRng,
    warm: dict[str, np.ndarray] | None = None,
    prefix: str = "linear",
    dtype=np.float32,
) -> LinearBlockWeights:
    """Build fresh weights; `warm` (wq/wk/wv/wo arrays) copies the teacher's projections.

    Gate biases start the decays near 1 (slow forgetting) and the DeltaNet
    write strength at 0.5 so a warm-started student is stable from step 0.
    """
    check_variant(variant)
    d_model = n_heads * d_head

    def proj(name: str) -> Parameter:
        if warm is not None:
            src = np.asarray(warm[name], dtype=dtype)
            if src.shape != (d_model, d_model):
                raise ShapeError(f"warm-start {name} has shape {src.shape}, expected {(d_model, d_model)}")
            return Parameter(src.copy(), f"{prefix}.{name}")
        return Parameter(rng.normal((d_model, d_model), 0.02, dtype), f"{prefix}.{name}")

    wq, wk, wv, wo = proj("wq"), proj("wk"), proj("wv"), proj("wo")
    w_alpha = b_alpha = w_beta = b_beta = None
    if variant == "gla":
        w_alpha = Parameter(rng.normal((n_heads, d_model, d_head), 0.02, dtype), f"{prefix}.w_alpha")
        b_alpha = Parameter(np.full((n_heads, 1, d_head), 1.0, dtype=dtype), f"{prefix}.b_alpha")
    elif variant == "gdn":
        w_alpha = Parameter(rng.normal((n_heads, d_model, 1), 0.02, dtype), f"{prefix}.w_alpha")
        b_alpha = Parameter(np.full((n_heads, 1, 1), 2.0, dtype=dtype), f"{prefix}.b_alpha")
        w_beta = Parameter(rng.normal((n_heads, d_model, 1), 0.02, dtype), f"{prefix}.w_beta")
        b_beta = Parameter(np.zeros((n_heads, 1, 1), dtype=dtype), f"{prefix}.b_beta")
    return LinearBlockWeights(variant, n_heads, d_head, wq, wk, wv, wo, w_alpha, b_alpha, w_beta, b_beta)


@dataclass
class RecurrentState:
    """Constant-size decode state: per head S [dh x dh], plus z [dh] for ungated."""

    variant: str
    s: np.ndarray
    z: np.ndarray | None = None

    def nbytes(self) -> int:
        return self.s.nbytes + (0 if self.z is None else self.z.nbytes)

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.variant, self.s.copy(), None if self.z is None else self.z.copy())


def init_state(variant: str, n_heads: int, d_head: int, dtype=np.float32) -> RecurrentState:
    check_variant(variant)
    s = np.zeros((n_heads, d_head, d_head), dtype=dtype)
    z = np.zeros((n_heads, d_head), dtype=dtype) if variant == "ungated" else None
    return RecurrentState(variant, s, z)


def state_bytes(variant: str, config, dtype_bytes: int = 4) -> int:
    """Exact recurrent-state size; note there is no sequence-length argument."""
    check_variant(variant)
    n = config.n_heads * config.d_head * config.d_head * dtype_bytes
    if variant == "ungated":
        n += config.n_heads * config.d_head * dtype_bytes
    return n


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d_head)), (0, 2, 1, 3))


def _step(w: LinearBlockWeights, x_t: Tensor, s: Tensor, z: Tensor | None):
    """One recurrence step. x_t: [B, 1, D]; s: [B, H, dh, dh]; z: [B, H, 1, dh]."""
    b = x_t.shape[0]
    h, dh = w.n_heads, w.d_head
    q = _split_heads(T.matmul(x_t, w.wq), h, dh)
    k = _split_heads(T.matmul(x_t, w.wk), h, dh)
    v = _split_heads(T.matmul(x_t, w.wv), h, dh)

    if w.variant == "ungated":
        fq = T.elu1p(q)
        fk = T.elu1p(k)
        s = T.add(s, T.matmul(T.transpose(fk, (0, 1, 3, 2)), v))
        z = T.add(z, fk)
        num = T.matmul(fq, s)
        den = T.add(T.tsum(T.mul(fq, z), axis=-1, keepdims=True), NORMALIZER_EPS)
        o = T.div(num, den)
    elif w.variant == "gla":
        x4 = T.reshape(x_t, (b, 1, 1, w.d_model))
        pre = T.add(T.matmul(x4, w.w_alpha), w.b_alpha)
        alpha = T.maximum(T.power(T.sigmoid(pre), 1.0 / GLA_GATE_TEMPERATURE), GLA_ALPHA_FLOOR)
        alpha_col = T.transpose(alpha, (0, 1, 3, 2))
        s = T.add(T.mul(alpha_col, s), T.matmul(T.transpose(k, (0, 1, 3, 2)), v))
        o = T.matmul(q, s)
    else:  # gdn
        x4 = T.reshape(x_t, (b, 1, 1, w.d_model))
        alpha = T.sigmoid(T.add(T.matmul(x4, w.w_alpha), w.b_alpha))
        beta = T.sigmoid(T.add(T.matmul(x4, w.w_beta), w.b_beta))
        kn = T.sqrt(T.add(T.tsum(T.mul(k, k), axis=-1, keepdims=True), KEY_NORM_EPS))
        khat = T.div(k, kn)
        ks = T.matmul(khat, s)
        erase = T.matmul(T.transpose(khat, (0, 1, 3, 2)), ks)
        write = T.matmul(T.transpose(khat, (0, 1, 3, 2)), v)
        s = T.add(T.mul(alpha, T.sub(s, T.mul(beta, erase))), T.mul(beta, write))
        o = T.matmul(q, s)

    merged = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, 1, h * dh))
    return T.matmul(merged, w.wo), s, z


def _lift_state(w: LinearBlockWeights, state: RecurrentState | None, batch: int, dtype):
    h, dh = w.n_heads, w.d_head
    if state is None:
        s0 = np.zeros((batch, h, dh, dh), dtype=dtype)
        z0 = np.zeros((batch, h, 1, dh), dtype=dtype) if w.variant == "ungated" else None
    else:
        if state.variant != w.variant:
            raise ContractError(f"state is for variant {state.variant!r}, weights are {w.variant!r}")
        if state.s.shape[-3:] != (h, dh, dh):
            raise ContractError(f"state shape {state.s.shape} does not match {h} heads of size {dh}")
        s0 = state.s.reshape((-1, h, dh, dh)).astype(dtype, copy=True)
        if s0.shape[0] != batch:
            raise ContractError(f"state batch {s0.shape[0]} vs input batch {batch}")
        z0 = None
        if w.variant == "ungated":
            if state.z is None:
                raise ContractError("ungated state is missing its normalizer")
            z0 = state.z.reshape((batch, h, 1, dh)).astype(dtype, copy=True)
    return Tensor(s0), None if z0 is None else Tensor(z0)


def linear_forward_recurrent(
    w: LinearBlockWeights,
    x,
    state: RecurrentState | None = None,
):
    """Run the recurrence over x ([T, D] or [B, T, D]); returns (outputs, final state).

    Outputs stay on the gradient tape; the returned state is detached numpy.
    """
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    squeeze = xt.ndim == 2
    if squeeze:
        xt = T.reshape(xt, (1,) + xt.shape)
    if xt.ndim != 3 or xt.shape[-1] != w.d_model:
        raise ShapeError(f"expected [batch, seq, {w.d_model}] input, got {xt.shape}")
    b, seq, _ = xt.shape
    s, z = _lift_state(w, state, b, xt.dtype)

    outs = []
    for t in range(seq):
        x_t = xt[:, t : t + 1, :]
        o_t, s, z = _step(w, x_t, s, z)
        if not np.all(np.isfinite(s.data)):
            raise NumericError(f"non-finite recurrent state at step {t}")
        outs.append(o_t)
    out = T.concat(outs, axis=1) if outs else Tensor(np.zeros((b, 0, w.d_model), dtype=xt.dtype))

    s_np = s.data.copy()
    z_np = None if z is None else z.data.reshape(b, w.n_heads, w.d_head).copy()
    if squeeze:
        out = T.reshape(out, (seq, w.d_model))
        s_np = s_np[0]
        z_np = None if z_np is None else z_np[0]
    return out, RecurrentState(w.variant, s_np, z_np)


def linear_step(w: LinearBlockWeights, state: RecurrentState, x_t):
    """Single-token decode. x_t: [d_model]; returns (o_t [d_model], next state)."""
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    if x_t.shape != (w.d_model,):
        raise ShapeError(f"expected a [{w.d_model}] token vector, got {x_t.shape}")
    with T.no_grad():
        out, nxt = linear_forward_recurrent(w, x_t.reshape(1, w.d_model), state)
    return out.data[0], nxt


def linear_forward_reference(w: LinearBlockWeights, x) -> np.ndarray:
    """Quadratic oracle: rebuild S_t from scratch for every t with fresh accumulators.

    Projections and gates are computed in one batched pass (a deliberately
    different route from the recurrent form), then each output position
    re-runs the update chain from the zero state.
    """
    xd = np.asarray(x.data if isinstance(x, Tensor) else x)
    if xd.ndim != 2 or xd.shape[-1] != w.d_model:
        raise ShapeError(f"reference form expects [seq, {w.d_model}], got {xd.shape}")
    seq = xd.shape[0]
    h, dh = w.n_heads, w.d_head

    def heads(m: np.ndarray) -> np.ndarray:
        return m.reshape(seq, h, dh).transpose(1, 0, 2)  # [H, T, dh]

    q = heads(xd @ w.wq.data)
    k = heads(xd @ w.wk.data)
    v = heads(xd @ w.wv.data)

    if w.variant == "gla":
        pre = np.einsum("td,hdc->htc", xd, w.w_alpha.data) + w.b_alpha.data.reshape(h, 1, dh)
        alpha = np.maximum(_np_sigmoid(pre) ** (1.0 / GLA_GATE_TEMPERATURE), GLA_ALPHA_FLOOR)
    elif w.variant == "gdn":
        alpha = _np_sigmoid(xd @ w.w_alpha.data.reshape(h, w.d_model).T + w.b_alpha.data.reshape(h)).T  # [H, T]
        beta = _np_sigmoid(xd @ w.w_beta.data.reshape(h, w.d_model).T + w.b_beta.data.reshape(h)).T
        khat = k / np.sqrt((k * k).sum(-1, keepdims=True) + KEY_NORM_EPS)

    out_heads = np.zeros((h, seq, dh), dtype=xd.dtype)
    for t in range(seq):
        s = np.zeros((h, dh, dh), dtype=xd.dtype)
        z = np.zeros((h, dh), dtype=xd.dtype)
        for u in range(t + 1):
            if w.variant == "ungated":
                fk = _np_elu1p(k[:, u])
                s = s + fk[:, :, None] * v[:, u][:, None, :]
                z = z + fk
            elif w.variant == "gla":
                s = alpha[:, u][:, :, None] * s + k[:, u][:, :, None] * v[:, u][:, None, :]
            else:
                ku = khat[:, u]
                ks = np.einsum("hd,hdc->hc", ku, s)
                s = alpha[:, u][:, None, None] * (s - beta[:, u][:, None, None] * ku[:, :, None] * ks[:, None, :]) \
                    + beta[:, u][:, None, None] * ku[:, :, None] * v[:, u][:, None, :]
        if w.variant == "ungated":
            fq = _np_elu1p(q[:, t])
            num = np.einsum("hd,hdc->hc", fq, s)
            den = (fq * z).sum(-1, keepdims=True) + NORMALIZER_EPS
            out_heads[:, t] = num / den
        else:
            out_heads[:, t] = np.einsum("hd,hdc->hc", q[:, t], s)

    merged = out_heads.transpose(1, 0, 2).reshape(seq, w.d_model)
    return merged @ w.wo.data


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _np_elu1p(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
