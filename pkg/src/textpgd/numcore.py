"""Numerical core: encoder forward pass, loss gradients, finite-difference
gradient oracle, and the Adam optimizer.

Everything computes in float64. The encoder is a single-head transformer:
positional addition, then N blocks of (self-attention, residual+layernorm,
ReLU feed-forward, residual+layernorm). No dropout anywhere so all runs
are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var


@dataclass
class GradResult:
    loss: float
    grad_embeddings: np.ndarray
    forward_count: int = 1


def wrap_params(tensors: dict) -> dict:
    """Wrap a name->ndarray dict into leaf Vars for a training graph."""
    return {name: Var(arr) for name, arr in tensors.items()}


def encode_graph(pvars: dict, emb: Var, n_layers: int, scale: float) -> Var:
    """Build the transformer encoder graph on top of an embedding Var."""
    seq_len = emb.value.shape[0]
    pos = pvars["pos"]
    h = emb + ad.select_rows(pos, np.arange(seq_len))
    for i in range(n_layers):
        p = f"layers.{i}."
        q = ad.matmul(h, pvars[p + "wq"])
        k = ad.matmul(h, pvars[p + "wk"])
        v = ad.matmul(h, pvars[p + "wv"])
        att = ad.softmax_rows(ad.scale(ad.matmul_t(q, k), scale))
        h = ad.layer_norm(h + ad.matmul(ad.matmul(att, v), pvars[p + "wo"]),
                          pvars[p + "ln1_g"], pvars[p + "ln1_b"])
        f = ad.matmul(ad.relu(ad.matmul(h, pvars[p + "w1"]) + pvars[p + "b1"]),
                      pvars[p + "w2"]) + pvars[p + "b2"]
        h = ad.layer_norm(h + f, pvars[p + "ln2_g"], pvars[p + "ln2_b"])
    return h


def avg_mlp_graph(pvars: dict, emb: Var) -> Var:
    """Hidden states of the avg_mlp architecture are the embeddings."""
    return emb


def pooled_and_logits(params, pvars: dict, emb: Var) -> tuple[Var, Var]:
    """(sentence embedding, classifier logits) graph for either architecture.

    The sentence embedding is the mean-pooled encoder hidden state; for
    avg_mlp the hidden states are the embeddings themselves.
    """
    if params.arch == "transformer":
        hidden = encode_graph(pvars, emb, params.n_layers, 1.0 / np.sqrt(params.dim))
        pooled = ad.mean_rows(hidden)
        head_in = pooled
    else:
        pooled = ad.mean_rows(emb)
        head_in = ad.relu(ad.matmul(pooled, pvars["hid_w"]) + pvars["hid_b"])
    logits = ad.matmul(head_in, pvars["cls_w"]) + pvars["cls_b"]
    return pooled, logits


def encode_forward(params, emb: np.ndarray) -> np.ndarray:
    """Run the transformer encoder on an embedding matrix [seq x d]."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != params.dim:
        raise ValueError(f"embedding shape {emb.shape} does not match model dim {params.dim}")
    if emb.shape[0] > params.max_positions:
        raise ValueError(f"sequence length {emb.shape[0]} exceeds max positions {params.max_positions}")
    pvars = wrap_params(params.tensors)
    h = encode_graph(pvars, Var(emb), params.n_layers, 1.0 / np.sqrt(params.dim))
    return h.value


def loss_and_grad(params, emb: np.ndarray, y: int, objective: str = "cls",
                  ref_sentence_emb: np.ndarray | None = None,
                  lambda_sem: float = 0.0) -> GradResult:
    """Loss and its exact reverse-mode gradient w.r.t. the embeddings.

    objective "cls": cross-entropy of the classifier logits against y.
    objective "cls_plus_sim": the same minus lambda_sem * (1 - cos) between
    the pooled representation and a reference sentence embedding, so that
    ascending the returned gradient raises the classification loss while
    holding the representation close to the reference.
    """
    if objective not in ("cls", "cls_plus_sim"):
        raise ValueError(f"unknown objective: {objective}")
    if objective == "cls_plus_sim" and ref_sentence_emb is None:
        raise ValueError("cls_plus_sim requires ref_sentence_emb")
    if lambda_sem < 0:
        raise ValueError("lambda_sem must be >= 0")
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != params.dim:
        raise ValueError(f"embedding shape {emb.shape} does not match model dim {params.dim}")

    pvars = wrap_params(params.tensors)
    emb_var = Var(emb)
    pooled, logits = pooled_and_logits(params, pvars, emb_var)
    loss = ad.cross_entropy(logits, y)
    if objective == "cls_plus_sim" and lambda_sem != 0.0:
        # J_aug = J_cls - lambda * (1 - cos)
        cos = ad.cosine_to(pooled, ref_sentence_emb)
        loss = loss + ad.scale(cos + (-1.0), lambda_sem)
    ad.backward(loss)
    grad = emb_var.grad if emb_var.grad is not None else np.zeros_like(emb)
    if not np.isfinite(loss.value) or not np.all(np.isfinite(grad)):
        raise FloatingPointError("numerical overflow")
    return GradResult(loss=float(loss.value), grad_embeddings=grad, forward_count=1)


def finite_diff_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at
    a time. Independent oracle for loss_and_grad."""
    if h <= 0:
        raise ValueError("h must be > 0")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(tensors: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps_opt: float = 1e-8) -> None:
    """One Adam update applied in place to the name->ndarray dict."""
    state.t += 1
    t = state.t
    for name, g in grads.items():
        p = tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps_opt)
