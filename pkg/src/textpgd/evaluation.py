"""Metrics, the query-counting victim wrapper, transferability and
fixed-vs-thresholded-K studies, and canonical report generation.

Conventions stated in every report: examples the victim already
misclassifies ("skipped") are excluded from attacked-accuracy
denominators; perturbation percent is taken over attackable positions;
perturbation and similarity means are taken over successful attacks,
query means over all non-skipped attacks.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import asdict, dataclass

import jsonschema
import numpy as np

from . import models, numcore
from .attack import AttackResult, run_attack, with_tau
from .errors import DataError
from .textcore import DEFAULT_MAX_LEN, TokenSeq, tokenize


class QueryCountingVictim:
    """Wraps a model; every forward pass (discrete or embedding input)
    increments the counter by exactly 1. One wrapper per attack: counters
    are never shared across examples."""

    def __init__(self, params: models.ModelParams):
        self.params = params
        self.queries = 0

    def reset(self) -> None:
        self.queries = 0

    def logits(self, seq_or_emb) -> np.ndarray:
        self.queries += 1
        return models.classify(self.params, seq_or_emb)

    def logits_and_pooled(self, seq_or_emb):
        self.queries += 1
        return models.forward_pass(self.params, seq_or_emb)

    def loss_grad(self, emb, y, objective, ref_pooled, lambda_sem) -> numcore.GradResult:
        self.queries += 1
        return numcore.loss_and_grad(self.params, emb, y, objective,
                                     ref_pooled, lambda_sem)


@dataclass
class EvalReport:
    dataset_id: str
    method: str
    clean_accuracy: float
    attacked_accuracy: float
    perturb_pct_mean: float | None
    queries_mean: float
    similarity_mean: float | None
    n_examples: int
    n_skipped: int
    config: dict
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def clean_accuracy(params: models.ModelParams, examples, vocab,
                   max_len: int = DEFAULT_MAX_LEN) -> float:
    """Fraction of examples whose argmax logits match the label."""
    if not examples:
        raise DataError("empty dataset")
    correct = 0
    for ex in examples:
        seq = tokenize(vocab, ex.text, max_len)
        correct += int(np.argmax(models.classify(params, seq)) == ex.label)
    return correct / len(examples)


def _non_skipped(results):
    kept = [r for r in results if not r.skipped]
    if not kept:
        raise DataError("no attackable examples")
    return kept


def attacked_accuracy(results) -> float:
    """Share of non-skipped examples the victim still classifies correctly
    after the attack (attack failures / non-skipped)."""
    if not results:
        raise DataError("empty results")
    kept = _non_skipped(results)
    return sum(1 for r in kept if not r.success) / len(kept)


def success_rate(results) -> float:
    kept = _non_skipped(results)
    return sum(1 for r in kept if r.success) / len(kept)


def perturbation_percent(orig: TokenSeq, adv: TokenSeq, attackable=None) -> float:
    """100 * changed positions / attackable positions, CLS excluded. With
    no mask given, every non-CLS position counts as attackable."""
    if len(orig) != len(adv):
        raise DataError(f"length mismatch: {len(orig)} vs {len(adv)}")
    if attackable is None:
        n_att = len(orig) - 1
    else:
        if len(attackable) != len(orig):
            raise DataError("attackable mask length mismatch")
        n_att = int(np.asarray(attackable, dtype=bool).sum())
    if n_att == 0:
        return 0.0
    diff = sum(1 for i in range(1, len(orig)) if orig.ids[i] != adv.ids[i])
    return 100.0 * diff / n_att


def semantic_similarity(encoder_params: models.ModelParams,
                        orig: TokenSeq, adv: TokenSeq) -> float:
    """Cosine between mean-pooled encoder representations."""
    u = models.sentence_embedding(encoder_params, orig)
    v = models.sentence_embedding(encoder_params, adv)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DataError("degenerate representation")
    return float(u @ v / (nu * nv))


def build_report(results, dataset_id: str, method: str, config: dict,
                 seed: int) -> EvalReport:
    """Corpus-level aggregates from per-example attack results. Clean
    accuracy over the attacked set is 1 - skipped fraction by definition
    (skipped iff clean-misclassified)."""
    if not results:
        raise DataError("empty results")
    n = len(results)
    n_skipped = sum(1 for r in results if r.skipped)
    kept = _non_skipped(results)
    wins = [r for r in kept if r.success]
    return EvalReport(
        dataset_id=dataset_id,
        method=method,
        clean_accuracy=(n - n_skipped) / n,
        attacked_accuracy=sum(1 for r in kept if not r.success) / len(kept),
        perturb_pct_mean=(sum(r.perturb_pct for r in wins) / len(wins)
                          if wins else None),
        queries_mean=sum(r.queries for r in kept) / len(kept),
        similarity_mean=(sum(r.similarity for r in wins) / len(wins)
                         if wins else None),
        n_examples=n,
        n_skipped=n_skipped,
        config=dict(config),
        seed=seed,
    )


def transfer_eval(results, model_b: models.ModelParams) -> dict:
    """Replay adversarial sequences crafted against model A on model B.

    Over non-skipped results: clean accuracy of B on the originals,
    accuracy of B on the adversarial sequences, and the perturbation
    stats carried over from the attack results.
    """
    kept = _non_skipped(results)
    max_id = max(max(r.original.ids) for r in kept)
    if max_id >= model_b.vocab_size:
        raise DataError("vocab mismatch: result token ids exceed model vocab")
    clean = sum(1 for r in kept
                if np.argmax(models.classify(model_b, r.original)) == r.true_label)
    attacked = sum(1 for r in kept
                   if np.argmax(models.classify(model_b, r.adversarial)) == r.true_label)
    wins = [r for r in kept if r.success]
    return {
        "clean_acc": clean / len(kept),
        "attacked_acc": attacked / len(kept),
        "perturb_pct_mean": (sum(r.perturb_pct for r in wins) / len(wins)
                             if wins else None),
        "n_examples": len(kept),
    }


def k_study(victim: models.ModelParams, mlm: models.ModelParams, examples,
            vocab, base_config, tau_list,
            max_len: int = DEFAULT_MAX_LEN) -> list:
    """One attack sweep per tau value; tau = 0 is the fixed-K row."""
    if 0 not in tau_list and 0.0 not in tau_list:
        raise DataError("tau_list must include 0 (the fixed-K row)")
    rows = []
    for tau in tau_list:
        cfg = with_tau(base_config, float(tau))
        results = [run_attack(victim, mlm, ex, vocab, cfg, max_len)
                   for ex in examples]
        kept = _non_skipped(results)
        rows.append({
            "mode": "fixed_k" if tau == 0 else "threshold",
            "tau": float(tau),
            "attacked_accuracy": attacked_accuracy(results),
            "queries_mean": sum(r.queries for r in kept) / len(kept),
            "n_examples": len(results),
        })
    return rows


# --- reports -----------------------------------------------------------------

_LOWER_IS_BETTER = ("attacked_accuracy", "perturb_pct_mean", "queries_mean")
_HIGHER_IS_BETTER = ("similarity_mean",)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_canonical(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(obj))


def _comparison_schema() -> dict:
    ref = importlib.resources.files("textpgd") / "schemas" / "comparison.schema.json"
    return json.loads(ref.read_text(encoding="utf-8"))


def compare_report(report_a: EvalReport, report_b: EvalReport, out_path=None) -> dict:
    """Side-by-side comparison of two reports on the same dataset and seed,
    with per-metric deltas (b - a) and a directional-wins tally."""
    if report_a.dataset_id != report_b.dataset_id:
        raise DataError("reports compare different datasets")
    if report_a.seed != report_b.seed:
        raise DataError("reports compare different seeds")
    metrics = {}
    wins = {"a": 0, "b": 0, "ties": 0}
    for name in _LOWER_IS_BETTER + _HIGHER_IS_BETTER:
        a = getattr(report_a, name)
        b = getattr(report_b, name)
        entry = {"a": a, "b": b,
                 "delta": (b - a) if a is not None and b is not None else None}
        metrics[name] = entry
        if a is None or b is None or a == b:
            wins["ties"] += 1
        else:
            better_is_a = (a < b) if name in _LOWER_IS_BETTER else (a > b)
            wins["a" if better_is_a else "b"] += 1
    doc = {
        "dataset_id": report_a.dataset_id,
        "seed": report_a.seed,
        "method_a": report_a.method,
        "method_b": report_b.method,
        "metrics": metrics,
        "directional_wins": wins,
    }
    jsonschema.validate(doc, _comparison_schema())
    if out_path is not None:
        write_canonical(doc, out_path)
    return doc


def load_results(path) -> list:
    results = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                results.append(AttackResult.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise DataError(f"results line {lineno}: {e}") from e
    return results


def save_results(results, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
