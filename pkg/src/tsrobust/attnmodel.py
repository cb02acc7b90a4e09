"""Dual-channel single-head attention forecaster with a hand-written backward pass.

Every (batch, channel) sequence is processed independently with shared
weights: the pair (z_orig, z_aug) is stacked to an [L, 2] feature sequence,
embedded, passed through one scaled dot-product self-attention layer over
the L time positions, reduced to one scalar per position and mapped to the
H-step forecast by a linear temporal head.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ParamSet = dict  # name -> float64 ndarray
GradSet = dict


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 96
    horizon: int = 24
    d_model: int = 32
    channels: int = 1

    def __post_init__(self):
        for name in ("lookback", "horizon", "d_model", "channels"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.d_model % 2:
            raise ModelError("d_model must be even")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, L, H = self.d_model, self.lookback, self.horizon
        return {
            "w_in": (2, d), "b_in": (d,),
            "w_q": (d, d), "b_q": (d,),
            "w_k": (d, d), "b_k": (d,),
            "w_v": (d, d), "b_v": (d,),
            "w_out": (d, 1), "b_out": (1,),
            "w_head": (L, H), "b_head": (H,),
        }


@dataclass
class ForwardTrace:
    feats: np.ndarray  # [N, L, 2]
    emb: np.ndarray  # [N, L, d]
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    logits: np.ndarray  # [N, L, L]
    weights: np.ndarray  # [N, L, L]
    context: np.ndarray  # [N, L, d]
    readout: np.ndarray  # [N, L]
    pred: np.ndarray  # [B, C, H]
    input_shape: tuple[int, int, int]


def init_params(config: ModelConfig, seed: int = 0) -> ParamSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in sorted(config.shapes().items()):
        if name.startswith("w_"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def config_from_params(params: ParamSet, channels: int = 1) -> ModelConfig:
    L, H = params["w_head"].shape
    return ModelConfig(lookback=L, horizon=H, d_model=params["w_in"].shape[1], channels=channels)


def flatten(params: ParamSet) -> np.ndarray:
    """Concatenate tensors in lexicographic name order."""
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])


def unflatten(vector: np.ndarray, like: ParamSet) -> ParamSet:
    out, pos = {}, 0
    for k in sorted(like):
        size = like[k].size
        out[k] = np.asarray(vector[pos:pos + size], dtype=np.float64).reshape(like[k].shape).copy()
        pos += size
    if pos != vector.size:
        raise ModelError(f"vector of length {vector.size} does not match {pos} parameters")
    return out


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _check_params(params: ParamSet):
    missing = set(ModelConfig(*params["w_head"].shape, params["w_in"].shape[1]).shapes()) - set(params)
    if missing:
        raise ModelError(f"missing parameters: {sorted(missing)}")


def forward(params: ParamSet, z_orig, z_aug) -> tuple[np.ndarray, ForwardTrace]:
    z_orig = np.asarray(z_orig, dtype=np.float64)
    z_aug = np.asarray(z_aug, dtype=np.float64)
    if z_orig.ndim != 3 or z_orig.shape != z_aug.shape:
        raise ModelError(f"inputs must share a [B, C, L] shape, got {z_orig.shape} and {z_aug.shape}")
    _check_params(params)
    B, C, L = z_orig.shape
    if L != params["w_head"].shape[0]:
        raise ModelError(f"lookback {L} does not match parameters ({params['w_head'].shape[0]})")
    if not (np.all(np.isfinite(z_orig)) and np.all(np.isfinite(z_aug))):
        raise ModelError("non-finite model input")

    d = params["w_in"].shape[1]
    feats = np.stack([z_orig, z_aug], axis=-1).reshape(B * C, L, 2)
    emb = feats @ params["w_in"] + params["b_in"]
    q = emb @ params["w_q"] + params["b_q"]
    k = emb @ params["w_k"] + params["b_k"]
    v = emb @ params["w_v"] + params["b_v"]
    k_t = np.ascontiguousarray(k.transpose(0, 2, 1))
    logits = (q * (1.0 / math.sqrt(d))) @ k_t
    weights = _softmax(logits)
    context = weights @ v
    readout = (context @ params["w_out"])[..., 0] + params["b_out"][0]
    pred = (readout @ params["w_head"] + params["b_head"]).reshape(B, C, -1)
    trace = ForwardTrace(feats, emb, q, k, v, logits, weights, context, readout, pred, (B, C, L))
    return pred, trace


def mse_loss(pred, target) -> float:
    return float(np.mean((pred - target) ** 2))


def _backprop(params, trace: ForwardTrace, pred, target):
    """Return (loss, grads, d loss / d feats)."""
    target = np.asarray(target, dtype=np.float64)
    if pred is not trace.pred and not np.array_equal(pred, trace.pred):
        raise ModelError("prediction does not belong to this trace")
    if target.shape != pred.shape:
        raise ModelError(f"target shape {target.shape} != prediction shape {pred.shape}")
    B, C, L = trace.input_shape
    N = B * C
    d = params["w_in"].shape[1]
    scale = 1.0 / math.sqrt(d)

    resid = (pred - target).reshape(N, -1)
    loss = float(np.mean(resid ** 2))
    d_pred = 2.0 * resid / resid.size  # [N, H]

    g = {}
    g["w_head"] = trace.readout.T @ d_pred
    g["b_head"] = d_pred.sum(axis=0)
    d_read = d_pred @ params["w_head"].T  # [N, L]

    g["w_out"] = np.einsum("nld,nl->d", trace.context, d_read)[:, None]
    g["b_out"] = np.array([d_read.sum()])
    d_ctx = d_read[..., None] * params["w_out"][:, 0]  # [N, L, d]

    d_logits = d_ctx @ np.ascontiguousarray(trace.v.transpose(0, 2, 1))  # d/d weights, [N, L, L]
    d_v = trace.weights.transpose(0, 2, 1) @ d_ctx
    # softmax Jacobian, in place: w * (g - sum(g * w))
    row = np.einsum("nij,nij->ni", d_logits, trace.weights)[..., None]
    d_logits -= row
    d_logits *= trace.weights
    d_q = (d_logits @ trace.k) * scale
    d_k = (d_logits.transpose(0, 2, 1) @ trace.q) * scale

    emb2 = trace.emb.reshape(N * L, d)
    d_emb = np.zeros_like(trace.emb)
    for name, d_out in (("q", d_q), ("k", d_k), ("v", d_v)):
        flat = d_out.reshape(N * L, d)
        g["w_" + name] = emb2.T @ flat
        g["b_" + name] = flat.sum(axis=0)
        d_emb += d_out @ params["w_" + name].T

    d_emb2 = d_emb.reshape(N * L, d)
    g["w_in"] = trace.feats.reshape(N * L, 2).T @ d_emb2
    g["b_in"] = d_emb2.sum(axis=0)
    d_feats = d_emb @ params["w_in"].T  # [N, L, 2]
    return loss, g, d_feats


def backward(params: ParamSet, trace: ForwardTrace, pred, target) -> tuple[float, GradSet]:
    """MSE loss over all B*C*H elements and its exact parameter gradients."""
    loss, grads, _ = _backprop(params, trace, pred, target)
    return loss, grads


def grad_wrt_input(params: ParamSet, trace: ForwardTrace, pred, target) -> np.ndarray:
    """d MSE / d z_orig, shaped like z_orig."""
    _, _, d_feats = _backprop(params, trace, pred, target)
    return d_feats[..., 0].reshape(trace.input_shape)


def loss_and_grads(params: ParamSet, z_orig, z_aug, target, with_input_grad: bool = False):
    """Convenience: forward + backward in one call."""
    pred, trace = forward(params, z_orig, z_aug)
    loss, grads, d_feats = _backprop(params, trace, pred, target)
    if with_input_grad:
        return loss, grads, d_feats[..., 0].reshape(trace.input_shape)
    return loss, grads


def dump_attention(*traces: ForwardTrace) -> np.ndarray:
    """Attention weights averaged over every sequence of the given traces."""
    if not traces:
        raise ModelError("no trace to dump")
    stacked = np.concatenate([t.weights for t in traces], axis=0)
    return stacked.mean(axis=0)


def save_attention_csv(matrix: np.ndarray, path) -> None:
    np.savetxt(path, matrix, delimiter=",", fmt="%.17g")


def save_checkpoint(params: ParamSet, path) -> None:
    """JSON map name -> {"shape": [...], "values": row-major list}."""
    doc = {k: {"shape": list(params[k].shape), "values": params[k].ravel().tolist()}
           for k in sorted(params)}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> ParamSet:
    doc = json.loads(Path(path).read_text())
    out = {}
    for k, entry in doc.items():
        arr = np.asarray(entry["values"], dtype=np.float64)
        out[k] = arr.reshape(entry["shape"])
    return out
