"""Minimal trainable sequence model wrapping the recurrence kernel.

Layer shape: rmsnorm -> q/k/v projections, each through a width-4
depthwise causal convolution and SiLU -> beta and step-distance
projections -> per-head recurrence -> readout -> optional per-head value
residual -> sigmoid output gate -> out-projection -> residual add.
Embeddings are tied with the output head. The short convolution gives
each write access to the few preceding tokens, which is what lets a
two-layer model bind a key token to the value that follows it.

Variants:
  - "palimpsa-d": L2-normalized q/k per head, a dedicated sigmoid input
    gate on the value payload, and a zero-initialized per-head value
    residual.
  - "palimpsa-m": raw q/k, value payload gated by the step distance
    itself, no value residual.
  - "ablation": the "palimpsa-d" layout routed through the
    frozen-importance rule; parameter shapes are identical, so any
    accuracy gap is attributable to metaplasticity alone.

All gradients are hand-derived and checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from ..errors import ConfigError, NumericError
from .data import MqarSample, batch_arrays
from .kernel import KernelConfig, kernel_backward, kernel_forward

_NORM_EPS = 1e-6
PRIOR_PRECISION = 1.0  # fixed, not trained
CONV_WIDTH = 4


class Variant(str, Enum):
    PALIMPSA_D = "palimpsa-d"
    PALIMPSA_M = "palimpsa-m"
    ABLATION = "ablation"

    @property
    def normalizes_qk(self) -> bool:
        return self is not Variant.PALIMPSA_M

    @property
    def has_input_gate(self) -> bool:
        return self is not Variant.PALIMPSA_M

    @property
    def has_value_residual(self) -> bool:
        return self is not Variant.PALIMPSA_M

    @property
    def metaplastic(self) -> bool:
        return self is not Variant.ABLATION


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_state: int = 16
    expand_v: int = 2
    expand_k: int = 1
    beta_rank: int = 4
    variant: Variant = Variant.PALIMPSA_D
    b_scale_init: float = 1.0
    vocab_size: int = 256
    precision: str = "f64"
    chunk_len: int = 32

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if (self.d_model * self.expand_v) % self.n_heads != 0:
            raise ConfigError("d_model * expand_v must be divisible by n_heads")
        if self.beta_rank < 1:
            raise ConfigError("beta_rank must be >= 1")
        if self.b_scale_init <= 0.0:
            raise ConfigError("b_scale_init must be > 0")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if not isinstance(self.variant, Variant):
            try:
                object.__setattr__(self, "variant", Variant(self.variant))
            except ValueError:
                raise ConfigError(f"unknown variant {self.variant!r}") from None

    @property
    def d_k_head(self) -> int:
        return self.d_state * self.expand_k

    @property
    def d_v_head(self) -> int:
        return self.d_model * self.expand_v // self.n_heads

    @property
    def np_dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class LayerParams:
    norm_w: np.ndarray  # (D,)
    W_q: np.ndarray  # (D, H*dk)
    W_k: np.ndarray  # (D, H*dk)
    W_v: np.ndarray  # (D, H*dv)
    conv_q: np.ndarray  # (H*dk, CONV_WIDTH), depthwise causal taps
    conv_k: np.ndarray  # (H*dk, CONV_WIDTH)
    conv_v: np.ndarray  # (H*dv, CONV_WIDTH)
    W_b1: np.ndarray  # (D, rank)
    W_b2: np.ndarray  # (rank, H*dv)
    b_scale_raw: np.ndarray  # (H,), softplus gives the per-head beta amplitude
    W_d: np.ndarray  # (D, H)
    bias_d: np.ndarray  # (H,)
    A_raw: np.ndarray  # (H,), softplus gives the per-head decay rate
    W_gate: np.ndarray  # (D, H*dv)
    W_o: np.ndarray  # (H*dv, D)
    W_bgate: np.ndarray | None = None  # (D, H), input gate (normalized variants)
    r_res: np.ndarray | None = None  # (H,), value residual mix (normalized variants)


@dataclass
class ModelParams:
    embedding: np.ndarray  # (vocab, D), tied with the output head
    layers: list
    norm_f: np.ndarray  # (D,)

    def to_dict(self) -> dict:
        out = {"embedding": self.embedding, "norm_f": self.norm_f}
        for i, lp in enumerate(self.layers):
            for name, arr in vars(lp).items():
                if arr is not None:
                    out[f"layers.{i}.{name}"] = arr
        return out

    def apply_dict(self, values: dict) -> None:
        """Write arrays from a flat dict back into the structure."""
        own = self.to_dict()
        if set(own) != set(values):
            raise ConfigError("parameter dictionary keys do not match the model")
        self.embedding = values["embedding"]
        self.norm_f = values["norm_f"]
        for i, lp in enumerate(self.layers):
            for name, arr in vars(lp).items():
                if arr is not None:
                    setattr(lp, name, values[f"layers.{i}.{name}"])


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Gaussian(0.02) projections; conv taps uniform within +-1/sqrt(width)
    so the short convolution preserves activation scale; decay and
    step-distance biases follow ramps favoring long retention; residual
    mixes start at zero."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    D, H = cfg.d_model, cfg.n_heads
    dk, dv = cfg.d_k_head, cfg.d_v_head

    def g(*shape):
        return (0.02 * rng.standard_normal(shape)).astype(dt)

    def conv_taps(channels):
        bound = 1.0 / math.sqrt(CONV_WIDTH)
        return rng.uniform(-bound, bound, (channels, CONV_WIDTH)).astype(dt)

    layers = []
    for _ in range(cfg.n_layers):
        lp = LayerParams(
            norm_w=np.ones(D, dtype=dt),
            W_q=g(D, H * dk),
            W_k=g(D, H * dk),
            W_v=g(D, H * dv),
            conv_q=conv_taps(H * dk),
            conv_k=conv_taps(H * dk),
            conv_v=conv_taps(H * dv),
            W_b1=g(D, cfg.beta_rank),
            W_b2=g(cfg.beta_rank, H * dv),
            b_scale_raw=np.full(H, _softplus_inv(cfg.b_scale_init), dtype=dt),
            W_d=g(D, H),
            bias_d=_softplus_inv(np.geomspace(1e-3, 1e-1, H)).astype(dt),
            A_raw=_softplus_inv(np.linspace(0.01, 0.16, H)).astype(dt),
            W_gate=g(D, H * dv),
            W_o=g(H * dv, D),
        )
        if cfg.variant.has_input_gate:
            lp.W_bgate = g(D, H)
        if cfg.variant.has_value_residual:
            lp.r_res = np.zeros(H, dtype=dt)
        layers.append(lp)
    return ModelParams(embedding=g(cfg.vocab_size, D), layers=layers, norm_f=np.ones(D, dtype=dt))


@dataclass
class Diagnostics:
    """Per-forward health metrics of the recurrence state."""

    mean_log_N: float  # average log memory window over tokens, heads, layers
    metaplasticity_ratio: np.ndarray  # (n_layers, H): (I_max - I_min) / I_min
    i_min: np.ndarray  # (n_layers, H): smallest final importance entry
    train_loss: float | None = None
    query_accuracy: float | None = None

    def check(self, prior_precision: float = PRIOR_PRECISION) -> None:
        if not math.isfinite(self.mean_log_N):
            raise NumericError("mean_log_N is not finite")
        if not np.isfinite(self.metaplasticity_ratio).all() or np.any(self.metaplasticity_ratio < 0):
            raise NumericError("metaplasticity_ratio must be finite and nonnegative")
        if np.any(self.i_min < prior_precision - 1e-9):
            raise NumericError("importance fell below the prior floor")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp of -|z| never overflows; both branches share it
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.zeros((), dtype=z.dtype), z)


def _rmsnorm(x: np.ndarray, w: np.ndarray):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    return x * r * w, r


def _rmsnorm_back(x, w, r, dh):
    dw = (dh * x * r).sum(axis=(0, 1))
    dxh = dh * w
    proj = (dxh * x).sum(axis=-1, keepdims=True)
    dx = dxh * r - x * (r**3 / x.shape[-1]) * proj
    return dx, dw


def _l2norm(x: np.ndarray):
    r = 1.0 / np.sqrt((x * x).sum(axis=-1, keepdims=True) + _NORM_EPS)
    return x * r, r


def _l2norm_back(x, r, dn):
    proj = (x * dn).sum(axis=-1, keepdims=True)
    return dn * r - x * (r**3) * proj


def _silu(z: np.ndarray):
    s = _sigmoid(z)
    return z * s, s


def _silu_back(z: np.ndarray, s: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (s * (1.0 + z * (1.0 - s)))


def _causal_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Depthwise causal convolution. x: (B, L, C); w: (C, W) taps ordered
    oldest to current; positions before the sequence start read zeros."""
    W = w.shape[1]
    L = x.shape[1]
    xp = np.pad(x, ((0, 0), (W - 1, 0), (0, 0)))
    out = np.zeros_like(x)
    for i in range(W):
        out += w[:, i] * xp[:, i : i + L, :]
    return out


def _causal_conv_back(x: np.ndarray, w: np.ndarray, dout: np.ndarray):
    W = w.shape[1]
    L = x.shape[1]
    xp = np.pad(x, ((0, 0), (W - 1, 0), (0, 0)))
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for i in range(W):
        dw[:, i] = np.einsum("blc,blc->c", dout, xp[:, i : i + L, :])
        dxp[:, i : i + L, :] += w[:, i] * dout
    return dxp[:, W - 1 :, :], dw


def _heads(x: np.ndarray, H: int) -> np.ndarray:
    B, L, F = x.shape
    return x.reshape(B, L, H, F // H)


def _flat(x: np.ndarray) -> np.ndarray:
    B, L = x.shape[:2]
    return x.reshape(B, L, -1)


def _layer_forward(lp: LayerParams, x: np.ndarray, cfg: ModelConfig):
    H = cfg.n_heads
    variant = cfg.variant
    h, r_norm = _rmsnorm(x, lp.norm_w)

    qf = h @ lp.W_q
    qc = _causal_conv(qf, lp.conv_q)
    qs, q_sig = _silu(qc)
    q4 = _heads(qs, H)
    kf = h @ lp.W_k
    kc = _causal_conv(kf, lp.conv_k)
    ks, k_sig = _silu(kc)
    k4 = _heads(ks, H)
    vf = h @ lp.W_v
    vc = _causal_conv(vf, lp.conv_v)
    vs, v_sig = _silu(vc)
    vstar = _heads(vs, H)

    if variant.normalizes_qk:
        qn, q_r = _l2norm(q4)
        kn, k_r = _l2norm(k4)
    else:
        qn, kn, q_r, k_r = q4, k4, None, None

    u = h @ lp.W_b1
    b_raw = _heads(u @ lp.W_b2, H)
    s_head = _softplus(lp.b_scale_raw)
    beta = _softplus(b_raw) * s_head[None, None, :, None]

    d_raw = h @ lp.W_d + lp.bias_d
    d_t = _softplus(d_raw)

    if variant.has_input_gate:
        g_raw = h @ lp.W_bgate
        g_in = _sigmoid(g_raw)
        v_in = vstar * g_in[..., None]
    else:
        g_raw, g_in = None, None
        v_in = vstar * d_t[..., None]

    A = _softplus(lp.A_raw)
    kcfg = KernelConfig(chunk_len=cfg.chunk_len, prior_precision=PRIOR_PRECISION, metaplastic=variant.metaplastic)
    y, final_imp, ktape = kernel_forward(kn, v_in, qn, beta, d_t, A, kcfg)

    if variant.has_value_residual:
        y = y + lp.r_res[None, None, :, None] * vstar

    gate_raw = h @ lp.W_gate
    g_out = _sigmoid(gate_raw)
    o = _flat(y) * g_out
    x_out = x + o @ lp.W_o

    tape = {
        "x": x, "h": h, "r_norm": r_norm, "qf": qf, "qc": qc, "q_sig": q_sig, "q4": q4,
        "kf": kf, "kc": kc, "k_sig": k_sig, "k4": k4, "vf": vf, "vc": vc, "v_sig": v_sig,
        "vstar": vstar, "qn": qn, "kn": kn, "q_r": q_r, "k_r": k_r, "u": u, "b_raw": b_raw,
        "s_head": s_head, "beta": beta, "d_raw": d_raw, "d_t": d_t, "g_in": g_in,
        "v_in": v_in, "A": A, "ktape": ktape, "y": y, "g_out": g_out, "o": o,
    }
    return x_out, final_imp, d_t, A, tape


def _layer_backward(lp: LayerParams, tape: dict, dx_out: np.ndarray, cfg: ModelConfig):
    H = cfg.n_heads
    variant = cfg.variant
    h = tape["h"]
    B, L, D = h.shape
    h2 = h.reshape(B * L, D)
    grads = {}

    # out projection and residual skip
    do = dx_out @ lp.W_o.T
    grads["W_o"] = tape["o"].reshape(B * L, -1).T @ dx_out.reshape(B * L, D)
    dx = dx_out.copy()

    # output gate
    yf = _flat(tape["y"])
    dyf = do * tape["g_out"]
    dgate_raw = do * yf * tape["g_out"] * (1.0 - tape["g_out"])
    grads["W_gate"] = h2.T @ dgate_raw.reshape(B * L, -1)
    dh = dgate_raw @ lp.W_gate.T
    dy4 = dyf.reshape(tape["y"].shape)

    dvstar = np.zeros_like(tape["vstar"])
    if variant.has_value_residual:
        grads["r_res"] = np.einsum("blhv,blhv->h", dy4, tape["vstar"])
        dvstar += lp.r_res[None, None, :, None] * dy4

    gkn, gv_in, gqn, gbeta, gd_t, gA = kernel_backward(tape["ktape"], dy4)
    grads["A_raw"] = gA * _sigmoid(lp.A_raw)

    # input gating of the value payload
    if variant.has_input_gate:
        dvstar += gv_in * tape["g_in"][..., None]
        dg_in = (gv_in * tape["vstar"]).sum(axis=-1)
        dg_raw = dg_in * tape["g_in"] * (1.0 - tape["g_in"])
        grads["W_bgate"] = h2.T @ dg_raw.reshape(B * L, H)
        dh += dg_raw @ lp.W_bgate.T
    else:
        dvstar += gv_in * tape["d_t"][..., None]
        gd_t = gd_t + (gv_in * tape["vstar"]).sum(axis=-1)

    # step distance
    dd_raw = gd_t * _sigmoid(tape["d_raw"])
    grads["W_d"] = h2.T @ dd_raw.reshape(B * L, H)
    grads["bias_d"] = dd_raw.sum(axis=(0, 1))
    dh += dd_raw @ lp.W_d.T

    # beta: softplus(low rank) scaled per head
    sp_b = tape["beta"] / tape["s_head"][None, None, :, None]
    grads["b_scale_raw"] = np.einsum("blhv,blhv->h", gbeta, sp_b) * _sigmoid(lp.b_scale_raw)
    db_raw = gbeta * tape["s_head"][None, None, :, None] * _sigmoid(tape["b_raw"])
    db_flat = _flat(db_raw)
    grads["W_b2"] = tape["u"].reshape(B * L, -1).T @ db_flat.reshape(B * L, -1)
    du = db_flat @ lp.W_b2.T
    grads["W_b1"] = h2.T @ du.reshape(B * L, -1)
    dh += du @ lp.W_b1.T

    # q/k (through normalization when present, then silu and the conv)
    if variant.normalizes_qk:
        dq4 = _l2norm_back(tape["q4"], tape["q_r"], gqn)
        dk4 = _l2norm_back(tape["k4"], tape["k_r"], gkn)
    else:
        dq4, dk4 = gqn, gkn
    dqc = _silu_back(tape["qc"], tape["q_sig"], _flat(dq4))
    dqf, grads["conv_q"] = _causal_conv_back(tape["qf"], lp.conv_q, dqc)
    grads["W_q"] = h2.T @ dqf.reshape(B * L, -1)
    dh += dqf @ lp.W_q.T
    dkc = _silu_back(tape["kc"], tape["k_sig"], _flat(dk4))
    dkf, grads["conv_k"] = _causal_conv_back(tape["kf"], lp.conv_k, dkc)
    grads["W_k"] = h2.T @ dkf.reshape(B * L, -1)
    dh += dkf @ lp.W_k.T

    # value path through silu and the conv
    dvc = _silu_back(tape["vc"], tape["v_sig"], _flat(dvstar))
    dvf, grads["conv_v"] = _causal_conv_back(tape["vf"], lp.conv_v, dvc)
    grads["W_v"] = h2.T @ dvf.reshape(B * L, -1)
    dh += dvf @ lp.W_v.T

    dx_norm, grads["norm_w"] = _rmsnorm_back(tape["x"], lp.norm_w, tape["r_norm"], dh)
    dx += dx_norm
    return dx, grads


def _diagnostics(final_imps: list, d_ts: list, As: list) -> Diagnostics:
    logs = []
    ratios, imins = [], []
    for imp, d_t, A in zip(final_imps, d_ts, As):
        u = A[None, None, :] * d_t  # (B, L, H), >= 0
        # clamp: u = 0 means an infinite window; keep the average finite
        logs.append(-np.log(-np.expm1(-np.maximum(u, 1e-12))))
        i_min = imp.min(axis=(0, 2, 3))
        i_max = imp.max(axis=(0, 2, 3))
        imins.append(i_min)
        ratios.append((i_max - i_min) / i_min)
    return Diagnostics(
        mean_log_N=float(np.mean([lg.mean() for lg in logs])),
        metaplasticity_ratio=np.stack(ratios).astype(np.float64),
        i_min=np.stack(imins).astype(np.float64),
    )


def _forward_full(params: ModelParams, tokens: np.ndarray, cfg: ModelConfig, keep_tapes: bool):
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ConfigError("token id outside the vocabulary")
    x = params.embedding[tokens]
    tapes = []
    final_imps, d_ts, As = [], [], []
    for li, lp in enumerate(params.layers):
        x, final_imp, d_t, A, tape = _layer_forward(lp, x, cfg)
        if not np.isfinite(x).all():
            raise NumericError("non-finite activation", where=f"layer {li}")
        final_imps.append(final_imp)
        d_ts.append(d_t)
        As.append(A)
        if keep_tapes:
            tapes.append(tape)
    hN, rN = _rmsnorm(x, params.norm_f)
    logits = hN @ params.embedding.T
    diag = _diagnostics(final_imps, d_ts, As)
    return logits, diag, (x, hN, rN, tapes)


def model_forward(params: ModelParams, tokens: np.ndarray, cfg: ModelConfig):
    """Logits per position plus recurrence diagnostics. tokens: (B, L) ids."""
    logits, diag, _ = _forward_full(params, tokens, cfg, keep_tapes=False)
    return logits, diag


def masked_cross_entropy(logits: np.ndarray, tokens: np.ndarray, mask: np.ndarray):
    """Mean cross-entropy of next-token prediction at masked positions.

    Returns (loss, dlogits). Positions t with mask true are scored against
    tokens[t + 1].
    """
    if not mask.any():
        raise ConfigError("empty query mask")
    b_idx, t_idx = np.nonzero(mask)
    targets = tokens[b_idx, t_idx + 1]
    rows = logits[b_idx, t_idx].astype(np.float64)
    m = rows.max(axis=1, keepdims=True)
    z = rows - m
    lse = np.log(np.exp(z).sum(axis=1))
    n = rows.shape[0]
    loss = float((lse - z[np.arange(n), targets]).mean())
    soft = np.exp(z - lse[:, None])
    soft[np.arange(n), targets] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[b_idx, t_idx] = (soft / n).astype(logits.dtype)
    return loss, dlogits


def accuracy_from_logits(logits: np.ndarray, tokens: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked positions whose argmax equals the next token."""
    b_idx, t_idx = np.nonzero(mask)
    if b_idx.size == 0:
        raise ConfigError("empty query mask")
    pred = logits[b_idx, t_idx].argmax(axis=1)
    return float((pred == tokens[b_idx, t_idx + 1]).mean())


def loss_and_grads(params: ModelParams, batch, cfg: ModelConfig):
    """Masked cross-entropy and gradients for every parameter.

    batch: (tokens, mask) arrays of shape (B, L). Returns
    (loss, grads dict keyed like ModelParams.to_dict(), Diagnostics).
    """
    tokens, mask = batch
    logits, diag, (x_last, hN, rN, tapes) = _forward_full(params, tokens, cfg, keep_tapes=True)
    loss, dlogits = masked_cross_entropy(logits, tokens, mask)
    diag.train_loss = loss

    grads = {}
    B, L, D = hN.shape
    dl2 = dlogits.reshape(B * L, -1)
    grads["embedding"] = dl2.T @ hN.reshape(B * L, D)
    dhN = dlogits @ params.embedding
    dx, grads["norm_f"] = _rmsnorm_back(x_last, params.norm_f, rN, dhN)

    for li in range(len(params.layers) - 1, -1, -1):
        dx, layer_grads = _layer_backward(params.layers[li], tapes[li], dx, cfg)
        for name, g in layer_grads.items():
            grads[f"layers.{li}.{name}"] = g

    demb = grads["embedding"]
    np.add.at(demb, tokens.reshape(-1), dx.reshape(B * L, D))
    return loss, grads, diag


def evaluate(params: ModelParams, cfg: ModelConfig, samples: Sequence[MqarSample]) -> float:
    """Query accuracy over a sample set; deterministic and batch-invariant."""
    tokens, mask = batch_arrays(samples)
    logits, _ = model_forward(params, tokens, cfg)
    return accuracy_from_logits(logits, tokens, mask)
