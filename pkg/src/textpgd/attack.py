"""The PGD embedding-space attack and the greedy masked-LM baseline.

PGD attack outline: rank token positions by mask-out saliency, derive
per-token perturbation budgets, build candidate substitutions once from
the original sentence via the masked LM, then iterate sign-gradient steps
on the continuous embeddings inside the per-token l-inf box, discretizing
to the nearest candidate token embedding after every step. The greedy
baseline tries candidates position by position in saliency order, keeping
whichever substitution raises the victim loss most.

Query accounting: every victim forward pass, on discrete tokens or
continuous embeddings, is one query. Masked-LM calls are free (the
attacker owns the MLM).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import models
from .errors import ConfigError, DataError
from .textcore import (CLS_ID, MASK_ID, PAD_ID, UNK_ID, DEFAULT_MAX_LEN,
                       LabeledExample, TokenSeq, Vocab, tokenize)


@dataclass(frozen=True)
class AttackConfig:
    """All attack hyperparameters. Baseline runs ignore alpha, eps_base,
    lambda_sem and adaptive_budget. alpha and eps_base are in embedding
    units, calibrated once against the trained-embedding scale (row norms
    around 3) and pinned."""

    method: str = "pgd"            # "pgd" | "baseline"
    alpha: float = 3.0             # step size, embedding units
    eps_base: float = 6.0          # max l-inf perturbation, embedding units
    lambda_sem: float = 1.0        # semantic penalty weight
    K: int = 8                     # candidate count per position
    tau: float = 0.0               # MLM probability floor; 0 = fixed-K mode
    sim_min: float = 0.8           # minimum acceptable cosine similarity
    max_iters: int = 50
    max_perturb_pct: float = 10.0  # cap on changed positions, percent
    adaptive_budget: bool = True
    early_stop_patience: int = 5
    early_stop_tol: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.method not in ("pgd", "baseline"):
            raise ConfigError(f"unknown attack method: {self.method!r}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must be in [0, 1]")
        if not -1.0 <= self.sim_min <= 1.0:
            raise ConfigError("sim_min must be in [-1, 1]")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")
        if not 0.0 < self.max_perturb_pct <= 100.0:
            raise ConfigError("max_perturb_pct must be in (0, 100]")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.early_stop_tol <= 0:
            raise ConfigError("early_stop_tol must be > 0")
        if self.lambda_sem < 0:
            raise ConfigError("lambda_sem must be >= 0")
        if self.method == "pgd":
            if self.eps_base <= 0 or self.alpha <= 0:
                raise ConfigError("alpha and eps_base must be > 0 for pgd")
            if self.alpha > self.eps_base:
                raise ConfigError("alpha must not exceed eps_base")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown attack config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "AttackConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"attack config is not valid JSON: {e.msg}") from e
        if not isinstance(d, dict):
            raise ConfigError("attack config must be a JSON object")
        return cls.from_dict(d)


@dataclass
class PerturbationState:
    """Continuous attack state. The perturbation delta is Xc - X0,
    derived, never stored. Invariant: |Xc - X0| <= budgets per position."""

    x0: np.ndarray                 # [seq x d] original embeddings
    xc: np.ndarray                 # [seq x d] current continuous embeddings
    budgets: np.ndarray            # [seq] per-position l-inf budgets
    tokens: TokenSeq               # discrete readout
    iter: int = 0


@dataclass(frozen=True)
class AttackResult:
    original: TokenSeq
    adversarial: TokenSeq
    true_label: int
    predicted_label: int
    success: bool
    queries: int
    iterations: int
    perturb_pct: float
    similarity: float
    skipped: bool

    def to_dict(self) -> dict:
        return {
            "original": {"ids": list(self.original.ids), "words": list(self.original.words)},
            "adversarial": {"ids": list(self.adversarial.ids), "words": list(self.adversarial.words)},
            "true_label": self.true_label,
            "predicted_label": self.predicted_label,
            "success": self.success,
            "queries": self.queries,
            "iterations": self.iterations,
            "perturb_pct": self.perturb_pct,
            "similarity": self.similarity,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackResult":
        return cls(
            original=TokenSeq(ids=tuple(d["original"]["ids"]),
                              words=tuple(d["original"]["words"])),
            adversarial=TokenSeq(ids=tuple(d["adversarial"]["ids"]),
                                 words=tuple(d["adversarial"]["words"])),
            true_label=d["true_label"], predicted_label=d["predicted_label"],
            success=d["success"], queries=d["queries"],
            iterations=d["iterations"], perturb_pct=d["perturb_pct"],
            similarity=d["similarity"], skipped=d["skipped"],
        )


def attackable_mask(seq: TokenSeq, declared=None) -> np.ndarray:
    """Positions the attack may touch: never CLS, never UNK, intersected
    with the dataset-declared mask when one is present."""
    mask = np.array([tid not in (CLS_ID, PAD_ID, MASK_ID, UNK_ID)
                     for tid in seq.ids], dtype=bool)
    mask[0] = False
    if declared is not None:
        if len(declared) != len(seq):
            raise DataError(f"attackable mask length {len(declared)} != "
                            f"token count {len(seq)}")
        mask &= np.asarray(declared, dtype=bool)
    return mask


def _softmax_ce(logits: np.ndarray, y: int) -> float:
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[y])


def token_saliency(victim, seq: TokenSeq, y: int, attackable=None,
                   clean_logits=None) -> np.ndarray:
    """Mask-out saliency: drop of the true-class logit when a position is
    replaced by MASK. Consumes 1 + (number of attackable positions)
    victim queries (clean baseline plus one probe per position); a caller
    that already paid for the clean forward can pass its logits in."""
    if attackable is None:
        attackable = attackable_mask(seq)
    clean = victim.logits(seq) if clean_logits is None else clean_logits
    scores = np.zeros(len(seq))
    base = clean[y]
    for i in range(1, len(seq)):
        if not attackable[i]:
            continue
        probed = seq.replace(i, MASK_ID, "[MASK]")
        scores[i] = base - victim.logits(probed)[y]
    return scores


def generate_candidates(mlm: models.ModelParams, seq: TokenSeq, pos: int,
                        K: int, tau: float = 0.0) -> list:
    """Top-K masked-LM substitutes at a position, by descending probability
    (ties broken by lower token id), excluding special tokens and the
    original token. With tau > 0 entries below the threshold are dropped,
    so the list may be shorter than K or empty."""
    probs = models.mlm_predict(mlm, seq, pos)
    excluded = {PAD_ID, UNK_ID, MASK_ID, CLS_ID, seq.ids[pos]}
    order = np.lexsort((np.arange(len(probs)), -probs))
    out = []
    for tid in order:
        tid = int(tid)
        if tid in excluded:
            continue
        p = float(probs[tid])
        if tau > 0.0 and p < tau:
            break  # order is descending; nothing later can pass
        out.append((tid, p))
        if len(out) == K:
            break
    return out


def adaptive_budgets(saliency: np.ndarray, eps_base: float, attackable,
                     adaptive: bool = True) -> np.ndarray:
    """Per-position l-inf budgets. Salient positions get up to eps_base,
    the floor is eps_base/2; non-attackable positions get 0. With
    adaptive=False every attackable position gets eps_base."""
    if eps_base <= 0:
        raise ConfigError("eps_base must be > 0")
    attackable = np.asarray(attackable, dtype=bool)
    budgets = np.zeros(len(attackable))
    if not adaptive:
        budgets[attackable] = eps_base
        return budgets
    s = np.maximum(np.asarray(saliency, dtype=np.float64), 0.0)
    smax = s[attackable].max() if attackable.any() else 0.0
    if smax == 0.0:
        budgets[attackable] = eps_base
    else:
        budgets[attackable] = eps_base * (0.5 + s[attackable] / (2.0 * smax))
    return budgets


def pgd_step(state: PerturbationState, grad: np.ndarray, alpha: float) -> PerturbationState:
    """One sign-gradient ascent step, clipped back into the per-coordinate
    box [x0 - budget, x0 + budget]. sign(0) = 0."""
    if grad.shape != state.xc.shape:
        raise DataError(f"gradient shape {grad.shape} != state shape {state.xc.shape}")
    stepped = state.xc + alpha * np.sign(grad)
    b = state.budgets[:, None]
    state.xc = np.clip(stepped, state.x0 - b, state.x0 + b)
    state.iter += 1
    return state


def project_to_tokens(state: PerturbationState, candidates: dict,
                      emb_matrix: np.ndarray, original: TokenSeq,
                      vocab: Vocab, saliency: np.ndarray,
                      max_changes: int) -> TokenSeq:
    """Discretize the continuous state: at each attackable position pick
    the token among {original} + candidates whose embedding row is nearest
    to Xc (ties favor the original, then the lower token id). The number
    of changed positions is capped at max_changes, keeping the changes at
    the highest-saliency positions."""
    chosen = {}
    for pos, cands in candidates.items():
        orig_id = original.ids[pos]
        best_id = orig_id
        best_d = float(np.linalg.norm(emb_matrix[orig_id] - state.xc[pos]))
        for cid in sorted(c for c, _ in cands):
            d = float(np.linalg.norm(emb_matrix[cid] - state.xc[pos]))
            if d < best_d:
                best_d = d
                best_id = cid
        if best_id != orig_id:
            chosen[pos] = best_id
    if len(chosen) > max_changes:
        keep = sorted(chosen, key=lambda p: (-saliency[p], p))[:max_changes]
        chosen = {p: chosen[p] for p in keep}
    seq = original
    for pos, tid in sorted(chosen.items()):
        seq = seq.replace(pos, tid, vocab.tokens[tid])
    return seq


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DataError("degenerate representation")
    return float(u @ v / (nu * nv))


def _perturb_pct(orig: TokenSeq, adv: TokenSeq, attackable) -> float:
    n_att = int(np.asarray(attackable, dtype=bool).sum())
    if n_att == 0:
        return 0.0
    diff = sum(1 for i in range(1, len(orig)) if orig.ids[i] != adv.ids[i])
    return 100.0 * diff / n_att


def _wrap_victim(victim):
    from .evaluation import QueryCountingVictim
    if isinstance(victim, QueryCountingVictim):
        return victim
    return QueryCountingVictim(victim)


def _prepare(victim, example: LabeledExample, vocab: Vocab, max_len: int):
    seq = tokenize(vocab, example.text, max_len)
    mask = attackable_mask(seq, example.attackable)
    return seq, mask


def _skipped_result(seq: TokenSeq, y: int, pred: int, queries: int) -> AttackResult:
    return AttackResult(original=seq, adversarial=seq, true_label=y,
                        predicted_label=pred, success=False, queries=queries,
                        iterations=0, perturb_pct=0.0, similarity=1.0,
                        skipped=True)


def attack_pgd(victim, mlm: models.ModelParams, example: LabeledExample,
               vocab: Vocab, config: AttackConfig,
               max_len: int = DEFAULT_MAX_LEN) -> AttackResult:
    """Run the PGD-integrated attack on one example."""
    config.validate()
    victim = _wrap_victim(victim)
    seq, mask = _prepare(victim.params, example, vocab, max_len)
    y = example.label
    q0 = victim.queries

    clean_logits, ref_pooled = victim.logits_and_pooled(seq)
    pred = int(np.argmax(clean_logits))
    if pred != y:
        return _skipped_result(seq, y, pred, victim.queries - q0)

    saliency = token_saliency(victim, seq, y, mask, clean_logits)
    budgets = adaptive_budgets(saliency, config.eps_base, mask,
                               config.adaptive_budget)
    candidates = {i: generate_candidates(mlm, seq, i, config.K, config.tau)
                  for i in range(1, len(seq)) if mask[i]}
    n_att = int(mask.sum())
    max_changes = math.ceil(config.max_perturb_pct * n_att / 100.0)

    E = victim.params.embedding_matrix()
    x0 = models.embed(victim.params, seq)
    state = PerturbationState(x0=x0, xc=x0.copy(), budgets=budgets, tokens=seq)
    orig_rep = models.sentence_embedding(mlm, seq)

    objective = "cls_plus_sim" if config.lambda_sem > 0 else "cls"
    adv, pred_label, sim = seq, pred, 1.0
    # On failure the result carries the iterate with the highest discrete
    # victim loss, not the last one (the loss comes from logits already
    # paid for, so this costs no extra queries).
    best_discrete = (_softmax_ce(clean_logits, y), seq, pred, 1.0)
    success = False
    iterations = 0
    best_loss = -np.inf
    stall = 0
    for _ in range(config.max_iters):
        gres = victim.loss_grad(state.xc, y, objective, ref_pooled,
                                config.lambda_sem)
        pgd_step(state, gres.grad_embeddings, config.alpha)
        adv = project_to_tokens(state, candidates, E, seq, vocab, saliency,
                                max_changes)
        state.tokens = adv
        logits = victim.logits(adv)
        pred_label = int(np.argmax(logits))
        sim = _cosine(orig_rep, models.sentence_embedding(mlm, adv))
        iterations += 1
        if pred_label != y and sim >= config.sim_min:
            success = True
            break
        if _softmax_ce(logits, y) > best_discrete[0]:
            best_discrete = (_softmax_ce(logits, y), adv, pred_label, sim)
        if gres.loss - best_loss < config.early_stop_tol:
            stall += 1
            if stall >= config.early_stop_patience:
                break
        else:
            stall = 0
        best_loss = max(best_loss, gres.loss)
    if not success:
        _, adv, pred_label, sim = best_discrete

    return AttackResult(
        original=seq, adversarial=adv, true_label=y,
        predicted_label=pred_label, success=success,
        queries=victim.queries - q0, iterations=iterations,
        perturb_pct=_perturb_pct(seq, adv, mask), similarity=sim,
        skipped=False)


def attack_baseline(victim, mlm: models.ModelParams, example: LabeledExample,
                    vocab: Vocab, config: AttackConfig,
                    max_len: int = DEFAULT_MAX_LEN) -> AttackResult:
    """Greedy masked-LM substitution baseline: walk positions in saliency
    order, try every candidate, keep the substitution that raises the
    victim loss the most."""
    config.validate()
    victim = _wrap_victim(victim)
    seq, mask = _prepare(victim.params, example, vocab, max_len)
    y = example.label
    q0 = victim.queries

    clean_logits = victim.logits(seq)
    pred = int(np.argmax(clean_logits))
    if pred != y:
        return _skipped_result(seq, y, pred, victim.queries - q0)

    saliency = token_saliency(victim, seq, y, mask, clean_logits)
    candidates = {i: generate_candidates(mlm, seq, i, config.K, config.tau)
                  for i in range(1, len(seq)) if mask[i]}
    n_att = int(mask.sum())
    max_changes = math.ceil(config.max_perturb_pct * n_att / 100.0)
    order = sorted((i for i in range(1, len(seq)) if mask[i]),
                   key=lambda i: (-saliency[i], i))
    orig_rep = models.sentence_embedding(mlm, seq)

    current = seq
    cur_loss = _softmax_ce(clean_logits, y)
    pred_label = pred
    sim = 1.0
    success = False
    changed = 0
    iterations = 0
    for pos in order:
        if changed >= max_changes:
            break
        cands = candidates[pos]
        if not cands:
            continue
        iterations += 1
        best = None
        for cid, _p in cands:
            trial = current.replace(pos, cid, vocab.tokens[cid])
            logits = victim.logits(trial)
            loss = _softmax_ce(logits, y)
            if best is None or loss > best[0]:
                best = (loss, trial, logits)
        if best[0] > cur_loss:
            cur_loss, current, logits = best
            changed += 1
            pred_label = int(np.argmax(logits))
            sim = _cosine(orig_rep, models.sentence_embedding(mlm, current))
            if pred_label != y and sim >= config.sim_min:
                success = True
                break

    return AttackResult(
        original=seq, adversarial=current, true_label=y,
        predicted_label=pred_label, success=success,
        queries=victim.queries - q0, iterations=iterations,
        perturb_pct=_perturb_pct(seq, current, mask), similarity=sim,
        skipped=False)


def run_attack(victim, mlm, example, vocab, config, max_len=DEFAULT_MAX_LEN):
    """Dispatch on config.method."""
    fn = attack_pgd if config.method == "pgd" else attack_baseline
    return fn(victim, mlm, example, vocab, config, max_len)


def with_tau(config: AttackConfig, tau: float) -> AttackConfig:
    cfg = replace(config, tau=tau)
    cfg.validate()
    return cfg
