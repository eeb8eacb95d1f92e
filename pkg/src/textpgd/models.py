"""Model containers, classifier / masked-LM heads, training, checkpoints.

Two desk-scale architectures share the classify / sentence_embedding
contracts: a from-scratch single-head transformer encoder ("transformer")
and a bag-of-embeddings MLP ("avg_mlp") used as the transfer target. The
masked-LM head is tied to the embedding matrix (logits = E @ h), so MLM
scores and embedding geometry live in the same space.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import numcore
from .autodiff import Var
from .errors import CheckpointError, DataError
from .textcore import CLS_ID, MASK_ID, PAD_ID, UNK_ID, TokenSeq, Vocab, tokenize

CHECKPOINT_VERSION = 1
FFN_MULT = 2


@dataclass
class ModelParams:
    arch: str  # "transformer" | "avg_mlp"
    vocab_size: int
    dim: int
    max_positions: int
    n_layers: int
    n_classes: int
    tensors: dict = field(default_factory=dict)

    def embedding_matrix(self) -> np.ndarray:
        return self.tensors["emb"]


def init_params(arch: str, vocab_size: int, dim: int, max_positions: int,
                n_layers: int, n_classes: int, seed: int) -> ModelParams:
    rng = np.random.Generator(np.random.Philox(key=seed))
    t: dict[str, np.ndarray] = {}
    t["emb"] = rng.normal(0.0, 0.5, size=(vocab_size, dim))
    if arch == "transformer":
        t["pos"] = rng.normal(0.0, 0.1, size=(max_positions, dim))
        w = 1.0 / np.sqrt(dim)
        for i in range(n_layers):
            p = f"layers.{i}."
            for name in ("wq", "wk", "wv", "wo"):
                t[p + name] = rng.normal(0.0, w, size=(dim, dim))
            t[p + "w1"] = rng.normal(0.0, w, size=(dim, FFN_MULT * dim))
            t[p + "b1"] = np.zeros(FFN_MULT * dim)
            t[p + "w2"] = rng.normal(0.0, 1.0 / np.sqrt(FFN_MULT * dim),
                                     size=(FFN_MULT * dim, dim))
            t[p + "b2"] = np.zeros(dim)
            t[p + "ln1_g"] = np.ones(dim)
            t[p + "ln1_b"] = np.zeros(dim)
            t[p + "ln2_g"] = np.ones(dim)
            t[p + "ln2_b"] = np.zeros(dim)
        t["cls_w"] = rng.normal(0.0, 0.1, size=(dim, n_classes))
        t["cls_b"] = np.zeros(n_classes)
    elif arch == "avg_mlp":
        t["hid_w"] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
        t["hid_b"] = np.zeros(dim)
        t["cls_w"] = rng.normal(0.0, 0.1, size=(dim, n_classes))
        t["cls_b"] = np.zeros(n_classes)
        n_layers = 0
    else:
        raise DataError(f"unknown architecture: {arch}")
    return ModelParams(arch=arch, vocab_size=vocab_size, dim=dim,
                       max_positions=max_positions, n_layers=n_layers,
                       n_classes=n_classes, tensors=t)


# --- inference -------------------------------------------------------------

def _check_ids(params: ModelParams, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1 or ids.size == 0:
        raise DataError("token id sequence must be a non-empty 1-D list")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise DataError(f"token id out of range for vocab size {params.vocab_size}")
    return ids


def embed(params: ModelParams, seq) -> np.ndarray:
    """Embedding rows for a TokenSeq or raw id list (no positional term)."""
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    return params.tensors["emb"][_check_ids(params, ids)]


def _hidden_states(params: ModelParams, emb: np.ndarray) -> np.ndarray:
    if params.arch == "transformer":
        return numcore.encode_forward(params, emb)
    return np.asarray(emb, dtype=np.float64)


def _resolve_input(params: ModelParams, seq_or_emb):
    """Returns (embedding matrix, pooling mask or None)."""
    if isinstance(seq_or_emb, TokenSeq) or (
            isinstance(seq_or_emb, (list, tuple)) or
            (isinstance(seq_or_emb, np.ndarray) and seq_or_emb.ndim == 1
             and np.issubdtype(seq_or_emb.dtype, np.integer))):
        ids = np.asarray(seq_or_emb.ids if isinstance(seq_or_emb, TokenSeq) else seq_or_emb,
                         dtype=np.intp)
        emb = embed(params, ids)
        mask = ids != PAD_ID
        return emb, (None if mask.all() else mask)
    emb = np.asarray(seq_or_emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != params.dim:
        raise DataError(f"embedding shape {emb.shape} does not match model dim {params.dim}")
    return emb, None


def _pool(hidden: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return hidden.mean(axis=0)
    if not mask.any():
        raise DataError("degenerate representation")
    return hidden[mask].mean(axis=0)


def _head(params: ModelParams, pooled: np.ndarray) -> np.ndarray:
    t = params.tensors
    if params.arch == "avg_mlp":
        pooled = np.maximum(pooled @ t["hid_w"] + t["hid_b"], 0.0)
    return pooled @ t["cls_w"] + t["cls_b"]


def forward_pass(params: ModelParams, seq_or_emb):
    """(logits, sentence embedding) in one encoder forward."""
    emb, mask = _resolve_input(params, seq_or_emb)
    pooled = _pool(_hidden_states(params, emb), mask)
    return _head(params, pooled), pooled


def classify(params: ModelParams, seq_or_emb) -> np.ndarray:
    """Classifier logits for a token sequence or an embedding matrix."""
    return forward_pass(params, seq_or_emb)[0]


def sentence_embedding(params: ModelParams, seq_or_emb) -> np.ndarray:
    """Mean-pooled encoder hidden states over non-PAD positions."""
    return forward_pass(params, seq_or_emb)[1]


def mlm_predict(params: ModelParams, seq: TokenSeq, pos: int) -> np.ndarray:
    """Probability distribution over the vocabulary for position `pos`
    masked out. Uses the tied head: softmax(E @ hidden[pos])."""
    if params.arch != "transformer":
        raise DataError("masked-LM prediction requires the transformer architecture")
    if pos == 0:
        raise DataError("CLS not maskable")
    if not 0 < pos < len(seq):
        raise DataError(f"position {pos} outside sequence of length {len(seq)}")
    ids = np.asarray(seq.ids, dtype=np.intp).copy()
    ids[pos] = MASK_ID
    hidden = _hidden_states(params, embed(params, ids))
    logits = params.tensors["emb"] @ hidden[pos]
    z = np.exp(logits - logits.max())
    return z / z.sum()


# --- training ---------------------------------------------------------------

@dataclass
class TrainHyper:
    lr: float = 3e-3
    epochs: int = 5
    batch: int = 16
    seed: int = 0
    arch: str = "transformer"
    dim: int = 32
    n_layers: int = 2
    max_positions: int = 64
    max_len: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise DataError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def _example_grads(params: ModelParams, ids: np.ndarray, y: int):
    """Forward + backward for one classification example; returns
    (loss, logits, grads dict over parameter tensors)."""
    pvars = numcore.wrap_params(params.tensors)
    emb = ad.gather_rows(pvars["emb"], ids)
    _, logits = numcore.pooled_and_logits(params, pvars, emb)
    loss = ad.cross_entropy(logits, y)
    ad.backward(loss)
    grads = {name: v.grad for name, v in pvars.items() if v.grad is not None}
    return float(loss.value), logits.value, grads


def _accumulate(total: dict, grads: dict) -> None:
    for name, g in grads.items():
        if name in total:
            total[name] += g
        else:
            total[name] = g.copy()


def train_classifier(examples, vocab: Vocab, hyper: TrainHyper):
    """Train a classifier; returns (ModelParams, per-epoch log).

    Deterministic under hyper.seed: initialization, shuffling and batching
    all flow from one counter-based generator.
    """
    if not examples:
        raise DataError("empty dataset")
    labels = sorted({ex.label for ex in examples})
    if len(labels) < 2:
        raise DataError("dataset contains a single class")
    n_classes = max(labels) + 1
    params = init_params(hyper.arch, len(vocab), hyper.dim, hyper.max_positions,
                         hyper.n_layers, n_classes, hyper.seed)
    seqs = [np.asarray(tokenize(vocab, ex.text, hyper.max_len).ids, dtype=np.intp)
            for ex in examples]
    ys = [ex.label for ex in examples]
    rng = np.random.Generator(np.random.Philox(key=hyper.seed + 1))
    state = numcore.AdamState()
    log = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(seqs))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), hyper.batch):
            idx = order[start:start + hyper.batch]
            batch_grads: dict = {}
            for j in idx:
                loss, logits, grads = _example_grads(params, seqs[j], ys[j])
                total_loss += loss
                correct += int(np.argmax(logits) == ys[j])
                _accumulate(batch_grads, grads)
            for g in batch_grads.values():
                g /= len(idx)
            numcore.adam_step(params.tensors, batch_grads, state, hyper.lr)
        log.append({"epoch": epoch, "loss": total_loss / len(seqs),
                    "train_accuracy": correct / len(seqs)})
    return params, log


def train_mlm(examples, vocab: Vocab, hyper: TrainHyper) -> ModelParams:
    """Train a masked language model: 15% of content positions masked per
    example per epoch, cross-entropy on masked positions only."""
    if not examples:
        raise DataError("empty corpus")
    if hyper.arch != "transformer":
        raise DataError("masked-LM training requires the transformer architecture")
    params = init_params("transformer", len(vocab), hyper.dim, hyper.max_positions,
                         hyper.n_layers, 2, hyper.seed)
    texts = [ex.text if hasattr(ex, "text") else ex for ex in examples]
    seqs = [np.asarray(tokenize(vocab, t, hyper.max_len).ids, dtype=np.intp)
            for t in texts]
    specials = {PAD_ID, UNK_ID, MASK_ID, CLS_ID}
    maskable = [np.array([i for i in range(1, len(s)) if s[i] not in specials],
                         dtype=np.intp) for s in seqs]
    rng = np.random.Generator(np.random.Philox(key=hyper.seed + 1))
    state = numcore.AdamState()
    for _ in range(hyper.epochs):
        order = rng.permutation(len(seqs))
        for start in range(0, len(order), hyper.batch):
            idx = order[start:start + hyper.batch]
            batch_grads: dict = {}
            n_used = 0
            for j in idx:
                cand = maskable[j]
                if cand.size == 0:
                    continue
                n_mask = max(1, int(round(0.15 * cand.size)))
                chosen = np.sort(rng.choice(cand, size=n_mask, replace=False))
                ids = seqs[j].copy()
                targets = ids[chosen].copy()
                ids[chosen] = MASK_ID
                pvars = numcore.wrap_params(params.tensors)
                emb = ad.gather_rows(pvars["emb"], ids)
                hidden = numcore.encode_graph(pvars, emb, params.n_layers,
                                              1.0 / np.sqrt(params.dim))
                logits = ad.matmul_t(ad.select_rows(hidden, chosen), pvars["emb"])
                loss = ad.cross_entropy_rows(logits, targets)
                ad.backward(loss)
                _accumulate(batch_grads, {n: v.grad for n, v in pvars.items()
                                          if v.grad is not None})
                n_used += 1
            if not n_used:
                continue
            for g in batch_grads.values():
                g /= n_used
            numcore.adam_step(params.tensors, batch_grads, state, hyper.lr)
    return params


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(params: ModelParams, dirpath) -> None:
    """Write manifest.json + params.bin (little-endian float32, row-major)."""
    os.makedirs(dirpath, exist_ok=True)
    index = {}
    chunks = []
    offset = 0
    for name in sorted(params.tensors):
        arr = params.tensors[name]
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "arch": params.arch,
        "dims": {
            "vocab_size": params.vocab_size,
            "dim": params.dim,
            "max_positions": params.max_positions,
            "n_layers": params.n_layers,
            "n_classes": params.n_classes,
        },
        "tensors": index,
    }
    with open(os.path.join(dirpath, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(dirpath, "params.bin"), "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(dirpath) -> ModelParams:
    manifest_path = os.path.join(dirpath, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"no manifest at {manifest_path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"manifest is not valid JSON: {e.msg}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version: {manifest.get('version')!r}")
    with open(os.path.join(dirpath, "params.bin"), "rb") as f:
        buf = f.read()
    tensors = {}
    total = 0
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 4
        offset = entry["offset"]
        if offset < 0 or offset + size > len(buf):
            raise CheckpointError(
                f"tensor '{name}' extends past the buffer "
                f"(offset {offset}, size {size}, buffer {len(buf)})")
        tensors[name] = np.frombuffer(
            buf, dtype="<f4", count=size // 4, offset=offset
        ).astype(np.float64).reshape(shape)
        total += size
    if total != len(buf):
        raise CheckpointError(
            f"manifest covers {total} bytes but buffer has {len(buf)}")
    dims = manifest["dims"]
    return ModelParams(arch=manifest["arch"], vocab_size=dims["vocab_size"],
                       dim=dims["dim"], max_positions=dims["max_positions"],
                       n_layers=dims["n_layers"], n_classes=dims["n_classes"],
                       tensors=tensors)
