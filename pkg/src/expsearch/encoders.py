"""Reference numpy implementations of the temporal-encoder building blocks:
BiasNorm, Swoosh activations, Bypass, retention, selective SSM scan,
attention pooling, learned downsampling, focal loss and composed blocks.

Sequences are (T, d) arrays. Nothing here trains; the functions exist so the
math can be checked numerically.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

WARMUP_STEPS = 1000
WARMUP_BOUNDS = (0.9, 1.0)
FOCAL_CLIP = 1e-12


def _as_seq(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected a (T, d) sequence, got shape {x.shape}")
    return x


# ---------------------------------------------------------------- zipformer parts


def bias_norm(x: np.ndarray, b: np.ndarray, gamma: float, eps: float = 1e-5) -> np.ndarray:
    """x * exp(gamma) / sqrt(mean_j (x_j - b_j)^2 + eps) over the last axis."""
    x = np.asarray(x, dtype=float)
    rms = np.sqrt(np.mean((x - b) ** 2, axis=-1, keepdims=True) + eps)
    return x * math.exp(gamma) / rms


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def swoosh(x, variant: Literal["R", "L"] = "R"):
    if variant == "R":
        return softplus(np.asarray(x, dtype=float) - 1.0) - 0.08 * np.asarray(x, dtype=float) - 0.313
    if variant == "L":
        return softplus(np.asarray(x, dtype=float) - 4.0) - 0.08 * np.asarray(x, dtype=float) - 0.035
    raise ValueError(f"unknown swoosh variant {variant!r}")


def bypass_bounds(step: int, warmup: int = WARMUP_STEPS, initial: tuple[float, float] = WARMUP_BOUNDS):
    """Clamp limits at ``step``: linear from ``initial`` to (0, 1) over ``warmup`` steps."""
    frac = 1.0 if warmup <= 0 else min(1.0, max(0.0, step / warmup))
    lo = initial[0] * (1 - frac)
    hi = initial[1] + (1.0 - initial[1]) * frac
    return lo, hi


def bypass(x: np.ndarray, y: np.ndarray, c: np.ndarray, step: int = WARMUP_STEPS,
           warmup: int = WARMUP_STEPS, initial: tuple[float, float] = WARMUP_BOUNDS) -> np.ndarray:
    lo, hi = bypass_bounds(step, warmup, initial)
    c_eff = np.clip(np.asarray(c, dtype=float), lo, hi)
    return (1 - c_eff) * x + c_eff * y


def self_attention(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray) -> np.ndarray:
    """Single-head scaled dot-product attention over the whole sequence."""
    q, k, v = x @ wq, x @ wk, x @ wv
    weights = softmax(q @ k.T / math.sqrt(k.shape[1]), axis=1)
    return weights @ v @ wo


def depthwise_conv(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-channel temporal convolution, 'same' length, zero padding. kernel: (width, d)."""
    width = kernel.shape[0]
    left = (width - 1) // 2
    padded = np.pad(x, ((left, width - 1 - left), (0, 0)))
    out = sum(padded[j:j + x.shape[0]] * kernel[j] for j in range(width))
    return out + (0.0 if bias is None else bias)


@dataclass
class ZipformerParams:
    norm_b: np.ndarray        # (3, d)
    norm_gamma: np.ndarray    # (3,)
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    conv_kernel: np.ndarray   # (3, d)
    conv_bias: np.ndarray
    w1: np.ndarray            # (d, d_ff)
    b1: np.ndarray
    w2: np.ndarray            # (d_ff, d)
    b2: np.ndarray
    bypass_c: np.ndarray      # (3, d)
    eps: float = 1e-5
    step: int = WARMUP_STEPS

    @property
    def d(self) -> int:
        return self.wq.shape[0]


def init_zipformer(d: int, rng: np.random.Generator, d_ff: int | None = None, scale: float = 0.3) -> ZipformerParams:
    d_ff = d_ff or 2 * d
    s = scale / math.sqrt(d)
    return ZipformerParams(
        norm_b=rng.normal(0, 0.1, (3, d)), norm_gamma=rng.normal(0, 0.1, 3),
        wq=rng.normal(0, s, (d, d)), wk=rng.normal(0, s, (d, d)),
        wv=rng.normal(0, s, (d, d)), wo=rng.normal(0, s, (d, d)),
        conv_kernel=rng.normal(0, 0.3, (3, d)), conv_bias=np.zeros(d),
        w1=rng.normal(0, s, (d, d_ff)), b1=np.zeros(d_ff),
        w2=rng.normal(0, scale / math.sqrt(d_ff), (d_ff, d)), b2=np.zeros(d),
        bypass_c=rng.uniform(0, 1, (3, d)),
    )


def zipformer_block(x: np.ndarray, p: ZipformerParams) -> np.ndarray:
    """Attention, convolution and feed-forward sub-layers, each a residual
    update of a BiasNorm-ed input passed through a Bypass."""
    x = _as_seq(x)
    if x.shape[1] != p.d:
        raise ValueError(f"feature dim {x.shape[1]} does not match block dim {p.d}")
    n = lambda h, i: bias_norm(h, p.norm_b[i], p.norm_gamma[i], p.eps)  # noqa: E731
    h1 = bypass(x, x + self_attention(n(x, 0), p.wq, p.wk, p.wv, p.wo), p.bypass_c[0], p.step)
    h2 = bypass(h1, h1 + depthwise_conv(n(h1, 1), p.conv_kernel, p.conv_bias), p.bypass_c[1], p.step)
    ff = swoosh(n(h2, 2) @ p.w1 + p.b1, "L") @ p.w2 + p.b2
    return bypass(h2, h2 + ff, p.bypass_c[2], p.step)


def downsample_softmax(x: np.ndarray, alpha: np.ndarray, factor: int) -> np.ndarray:
    """Frame t' = sum_j softmax(alpha)_j x_{t' factor + j}; short tails are
    right-padded by repeating the last frame."""
    x = _as_seq(x)
    alpha = np.asarray(alpha, dtype=float)
    if factor < 1 or alpha.shape != (factor,):
        raise ValueError("alpha must have one logit per position in the window")
    pad = (-x.shape[0]) % factor
    if pad:
        x = np.vstack([x, np.repeat(x[-1:], pad, axis=0)])
    w = softmax(alpha)
    return np.einsum("j,tjd->td", w, x.reshape(-1, factor, x.shape[1]))


def upsample_repeat(x: np.ndarray, factor: int, length: int) -> np.ndarray:
    return np.repeat(x, factor, axis=0)[:length]


def zipformer_stack(x: np.ndarray, blocks: Sequence[ZipformerParams], alphas: Sequence[np.ndarray],
                    factor: int = 2) -> np.ndarray:
    """Stack s runs at resolution factor**s; its update is upsampled back and
    added to the full-rate stream."""
    x = _as_seq(x)
    if len(blocks) != len(alphas):
        raise ValueError("one downsample logit vector per stack is required")
    for s, (blk, alpha) in enumerate(zip(blocks, alphas)):
        f = factor**s
        low = downsample_softmax(x, alpha, f)
        x = x + upsample_repeat(zipformer_block(low, blk) - low, f, x.shape[0])
    return x


# ---------------------------------------------------------------- retention


def retention_matrix(gamma: float, T: int) -> np.ndarray:
    if not 0.0 < gamma < 1.0:
        raise ValueError("decay gamma must lie in (0, 1)")
    i = np.arange(T)
    diff = i[:, None] - i[None, :]
    return np.where(diff >= 0, gamma ** np.maximum(diff, 0), 0.0)


def retention(q: np.ndarray, k: np.ndarray, v: np.ndarray, gamma: float) -> np.ndarray:
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise ValueError(f"shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}")
    T, d = q.shape
    return ((q @ k.T) / math.sqrt(d) * retention_matrix(gamma, T)) @ v


def head_decay(h: int) -> float:
    return 1.0 - 2.0 ** (-(5 + h))


def group_norm(x: np.ndarray, groups: int, eps: float = 1e-5) -> np.ndarray:
    """Normalize each group of channels per timestep (no affine)."""
    T, d = x.shape
    if d % groups:
        raise ValueError(f"{d} channels not divisible into {groups} groups")
    g = x.reshape(T, groups, d // groups)
    mu = g.mean(axis=2, keepdims=True)
    var = g.var(axis=2, keepdims=True)
    return ((g - mu) / np.sqrt(var + eps)).reshape(T, d)


@dataclass
class MsrParams:
    wq: np.ndarray  # (H, d, dh)
    wk: np.ndarray
    wv: np.ndarray
    w_out: np.ndarray  # (H * dh, d)
    groups: int | None = None  # defaults to the number of heads
    eps: float = 1e-5

    @property
    def heads(self) -> int:
        return self.wq.shape[0]


def init_msr(d: int, heads: int, rng: np.random.Generator, scale: float = 0.3) -> MsrParams:
    if d % heads:
        raise ValueError("d must be divisible by the number of heads")
    dh = d // heads
    s = scale / math.sqrt(d)
    return MsrParams(
        rng.normal(0, s, (heads, d, dh)), rng.normal(0, s, (heads, d, dh)),
        rng.normal(0, s, (heads, d, dh)), rng.normal(0, s, (heads * dh, d)),
    )


def msr(x: np.ndarray, p: MsrParams) -> np.ndarray:
    """Multi-scale retention: heads with decays 1 - 2^-(5+h), concatenated,
    group-normalized and projected."""
    x = _as_seq(x)
    heads = [retention(x @ p.wq[h], x @ p.wk[h], x @ p.wv[h], head_decay(h)) for h in range(p.heads)]
    return group_norm(np.hstack(heads), p.groups or p.heads, p.eps) @ p.w_out


def retention_block(x: np.ndarray, p: MsrParams) -> np.ndarray:
    return x + msr(x, p)


# ---------------------------------------------------------------- selective SSM


@dataclass
class SsmParams:
    """Diagonal selective SSM with N state dims per channel.

    B_t = x_t W_B + b_B and C_t = x_t W_C + b_C (N-vectors). Step sizes are
    either given as a (T, d) array or computed as softplus(x_t W_delta + b_delta).
    """

    A: np.ndarray        # (d, N), typically negative
    w_b: np.ndarray      # (d, N)
    b_b: np.ndarray      # (N,)
    w_c: np.ndarray      # (d, N)
    b_c: np.ndarray      # (N,)
    D: np.ndarray        # (d,)
    w_delta: np.ndarray | None = None  # (d, d)
    b_delta: np.ndarray | None = None  # (d,)
    delta: np.ndarray | None = None    # (T, d) fixed steps

    def steps(self, x: np.ndarray) -> np.ndarray:
        if self.delta is not None:
            delta = np.broadcast_to(np.asarray(self.delta, dtype=float), x.shape)
        else:
            delta = softplus(x @ self.w_delta + self.b_delta)
        if np.any(delta <= 0):
            raise ValueError("step sizes must be positive")
        return delta


def init_ssm(d: int, n_state: int, rng: np.random.Generator, scale: float = 0.3) -> SsmParams:
    return SsmParams(
        A=-rng.uniform(0.1, 1.5, (d, n_state)),
        w_b=rng.normal(0, scale, (d, n_state)), b_b=rng.normal(0, scale, n_state),
        w_c=rng.normal(0, scale, (d, n_state)), b_c=rng.normal(0, scale, n_state),
        D=rng.normal(0, scale, d),
        w_delta=rng.normal(0, scale / math.sqrt(d), (d, d)), b_delta=np.full(d, -1.0),
    )


def _phi1(z: np.ndarray) -> np.ndarray:
    """(e^z - 1) / z with the z -> 0 limit 1."""
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2, np.expm1(safe) / safe)


def discretize(x: np.ndarray, p: SsmParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Zero-order hold: A_bar = exp(delta A), B_bar = delta phi1(delta A) B_t.
    Returns A_bar (T, d, N), B_bar (T, d, N) and C (T, N)."""
    delta = p.steps(x)
    dA = delta[:, :, None] * p.A[None, :, :]
    b_t = x @ p.w_b + p.b_b
    c_t = x @ p.w_c + p.b_c
    a_bar = np.exp(dA)
    b_bar = delta[:, :, None] * _phi1(dA) * b_t[:, None, :]
    return a_bar, b_bar, c_t


def ssm_scan(x: np.ndarray, p: SsmParams) -> np.ndarray:
    """h_t = A_bar_t h_{t-1} + B_bar_t x_t, y_t = C_t . h_t + D x_t, h_0 = 0."""
    x = _as_seq(x)
    a_bar, b_bar, c_t = discretize(x, p)
    T, d = x.shape
    h = np.zeros((d, p.A.shape[1]))
    y = np.empty_like(x)
    for t in range(T):
        h = a_bar[t] * h + b_bar[t] * x[t][:, None]
        y[t] = h @ c_t[t] + p.D * x[t]
    return y


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


@dataclass
class BiMambaParams:
    fwd: SsmParams
    bwd: SsmParams
    alpha_fwd: float = 0.5
    alpha_bwd: float = 0.5
    eps: float = 1e-5


def bimamba(x: np.ndarray, p: BiMambaParams) -> np.ndarray:
    """LN(a_fwd * scan(x) + a_bwd * flip(scan_bwd(flip(x)))) + x."""
    x = _as_seq(x)
    mixed = p.alpha_fwd * ssm_scan(x, p.fwd) + p.alpha_bwd * ssm_scan(x[::-1], p.bwd)[::-1]
    return layer_norm(mixed, p.eps) + x


def hybrid_stack(x: np.ndarray, layers: Sequence[MsrParams | BiMambaParams]) -> np.ndarray:
    """Retention blocks at even depth, BiMamba blocks at odd depth."""
    x = _as_seq(x)
    for i, layer in enumerate(layers):
        want = MsrParams if i % 2 == 0 else BiMambaParams
        if not isinstance(layer, want):
            raise ValueError(f"layer {i} must be {want.__name__}")
        x = retention_block(x, layer) if i % 2 == 0 else bimamba(x, layer)
    return x


# ---------------------------------------------------------------- pooling and loss


def attention_pool_weights(x: np.ndarray, q: np.ndarray, w_k: np.ndarray) -> np.ndarray:
    x = _as_seq(x)
    scores = (x @ w_k.T) @ q / math.sqrt(x.shape[1])
    return softmax(scores)


def attention_pool(x: np.ndarray, q: np.ndarray, w_k: np.ndarray) -> np.ndarray:
    """z = sum_t softmax_t(q^T W_K x_t / sqrt(d)) x_t."""
    return attention_pool_weights(x, q, w_k) @ _as_seq(x)


def focal_loss(p, y: int, alpha=0.25, gamma: float = 2.0, return_flag: bool = False):
    """-alpha_y (1 - p_y)^gamma log(p_y).

    ``p`` is a probability vector (or the scalar p_y); ``alpha`` is a scalar
    weight for the true class or a per-class vector. p_y = 0 is clipped to
    1e-12 with a RuntimeWarning; ``return_flag`` also returns whether it was.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    p_y = float(p[y] if p.size > 1 else p[0])
    alpha_y = float(np.atleast_1d(alpha)[y] if np.size(alpha) > 1 else alpha)
    if gamma < 0 or not 0.0 <= alpha_y <= 1.0 or not 0.0 <= p_y <= 1.0:
        raise ValueError("need gamma >= 0, alpha in [0, 1], p_y in [0, 1]")
    clipped = p_y < FOCAL_CLIP
    if clipped:
        warnings.warn("focal_loss: p_y clipped to 1e-12", RuntimeWarning, stacklevel=2)
        p_y = FOCAL_CLIP
    loss = -alpha_y * (1.0 - p_y) ** gamma * math.log(p_y)
    loss = max(loss, 0.0)
    return (loss, clipped) if return_flag else loss


def focal_loss_logits(logits: np.ndarray, y: int, alpha=0.25, gamma: float = 2.0) -> float:
    """Focal loss from logits via log-softmax (no clipping needed)."""
    logp = log_softmax(np.asarray(logits, dtype=float))
    p_y = math.exp(logp[y])
    alpha_y = float(np.atleast_1d(alpha)[y] if np.size(alpha) > 1 else alpha)
    return float(-alpha_y * (1.0 - p_y) ** gamma * logp[y])


# ---------------------------------------------------------------- self-test


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    try:
        ok, detail = fn()
    except Exception as exc:  # report, do not crash the table
        return CheckResult(name, False, f"error: {exc}")
    return CheckResult(name, bool(ok), detail)


def unrolled_ssm(x: np.ndarray, p: SsmParams) -> np.ndarray:
    """Direct sum y_t = sum_{s<=t} C_t . (prod_{r=s+1..t} A_bar_r) B_bar_s x_s + D x_t."""
    a_bar, b_bar, c_t = discretize(x, p)
    T = x.shape[0]
    y = np.zeros_like(x)
    for t in range(T):
        acc = np.zeros_like(a_bar[0])
        for s in range(t + 1):
            prod = np.prod(a_bar[s + 1:t + 1], axis=0) if s < t else np.ones_like(a_bar[0])
            acc += prod * b_bar[s] * x[s][:, None]
        y[t] = acc @ c_t[t] + p.D * x[t]
    return y


def selftest(seed: int = 0) -> list[CheckResult]:
    """Numerical property checks of every component; returns one row per check."""
    rng = np.random.default_rng(seed)
    out = []

    def scale_inv():
        x = rng.normal(size=8)
        a = bias_norm(7 * x, np.zeros(8), 0.3, 1e-12)
        b = bias_norm(x, np.zeros(8), 0.3, 1e-12)
        err = float(np.max(np.abs(a - b)))
        return err < 1e-6, f"max diff {err:.1e}"

    out.append(_check("bias_norm positive-scale invariance", scale_inv))
    out.append(_check("swoosh values", lambda: (
        abs(float(swoosh(0.0, "R")) - 2.6169e-4) < 1e-7 and abs(float(swoosh(0.0, "L")) + 1.685e-2) < 1e-5,
        f"R(0)={float(swoosh(0.0, 'R')):.4e} L(0)={float(swoosh(0.0, 'L')):.4e}",
    )))

    def ret_matrix():
        m = retention_matrix(0.5, 3)
        want = np.array([[1, 0, 0], [0.5, 1, 0], [0.25, 0.5, 1]])
        return np.allclose(m, want, atol=0), "gamma 0.5, T 3"

    out.append(_check("retention matrix closed form", ret_matrix))

    def scan_oracle():
        worst = 0.0
        for _ in range(20):
            T, d, n = int(rng.integers(1, 17)), int(rng.integers(1, 5)), int(rng.integers(1, 4))
            x = rng.normal(size=(T, d))
            p = init_ssm(d, n, rng)
            worst = max(worst, float(np.max(np.abs(ssm_scan(x, p) - unrolled_ssm(x, p)))))
        return worst < 1e-10, f"max diff {worst:.1e}"

    out.append(_check("ssm_scan vs unrolled sum", scan_oracle))

    def focal_reduction():
        errs = [abs(focal_loss(p, 0, 1.0, 0.0) + math.log(p)) for p in rng.uniform(0.01, 1, 50)]
        return max(errs) < 1e-12, f"max diff {max(errs):.1e}"

    out.append(_check("focal gamma=0 reduces to cross-entropy", focal_reduction))

    def pool_hull():
        x = rng.normal(size=(10, 6))
        z = attention_pool(x, rng.normal(size=6), rng.normal(size=(6, 6)))
        return bool(np.all(z >= x.min(0) - 1e-12) and np.all(z <= x.max(0) + 1e-12)), "componentwise bounds"

    out.append(_check("attention_pool in convex hull", pool_hull))

    def block_identity():
        x = rng.normal(size=(6, 8))
        p = init_zipformer(8, rng)
        p.bypass_c = np.zeros((3, 8))
        return np.array_equal(zipformer_block(x, p), x), "c_eff = 0"

    out.append(_check("zipformer block identity at c_eff=0", block_identity))

    def hybrid_zero():
        x = rng.normal(size=(7, 8))
        r0, r1 = init_msr(8, 2, rng), init_msr(8, 2, rng)
        zero = BiMambaParams(init_ssm(8, 2, rng), init_ssm(8, 2, rng), 0.0, 0.0)
        a = hybrid_stack(x, [r0, zero, r1])
        b = retention_block(retention_block(x, r0), r1)
        return np.allclose(a, b, atol=1e-12), "zero-weight BiMamba layers"

    out.append(_check("hybrid stack reduces to retention stack", hybrid_zero))

    def robust():
        bad = 0
        for _ in range(100):
            T, d = (4, 8) if rng.random() < 0.5 else (16, 32)
            x = rng.normal(0, 3, size=(T, d))
            if not np.all(np.isfinite(zipformer_block(x, init_zipformer(d, rng, scale=float(rng.uniform(0.1, 3)))))):
                bad += 1
        return bad == 0, f"{bad} non-finite outputs in 100 draws"

    out.append(_check("zipformer block finite outputs", robust))
    return out
