import json

import numpy as np
import pytest

from textpgd import evaluation, models
from textpgd.attack import AttackConfig, AttackResult, run_attack
from textpgd.errors import DataError
from textpgd.evaluation import (EvalReport, QueryCountingVictim,
                                attacked_accuracy, build_report,
                                canonical_json, clean_accuracy,
                                compare_report, k_study, load_results,
                                perturbation_percent, save_results,
                                semantic_similarity, success_rate,
                                transfer_eval)
from textpgd.textcore import CLS_ID, TokenSeq, tokenize


def _seq(*ids):
    return TokenSeq(ids=(CLS_ID,) + ids,
                    words=("[CLS]",) + tuple(f"w{i}" for i in ids))


def _result(orig, adv, success=True, skipped=False, queries=5, label=0,
            pred=1, sim=0.9, pct=None):
    if pct is None:
        diff = sum(1 for a, b in zip(orig.ids[1:], adv.ids[1:]) if a != b)
        pct = 100.0 * diff / (len(orig) - 1)
    return AttackResult(original=orig, adversarial=adv, true_label=label,
                        predicted_label=pred, success=success,
                        queries=queries, iterations=1, perturb_pct=pct,
                        similarity=sim, skipped=skipped)


class TestQueryCountingVictim:
    def test_each_forward_counts_one(self, tiny_victim, tiny_vocab):
        v = QueryCountingVictim(tiny_victim)
        seq = tokenize(tiny_vocab, "the movie was great")
        v.logits(seq)
        v.logits_and_pooled(seq)
        v.loss_grad(models.embed(tiny_victim, seq), 1, "cls", None, 0.0)
        assert v.queries == 3
        v.reset()
        assert v.queries == 0

    def test_embedding_input_counts_too(self, tiny_victim, tiny_vocab):
        v = QueryCountingVictim(tiny_victim)
        emb = models.embed(tiny_victim, tokenize(tiny_vocab, "the movie"))
        v.logits(emb)
        assert v.queries == 1


class TestMetrics:
    def test_clean_accuracy(self, tiny_victim, tiny_vocab, tiny_corpus):
        _, test = tiny_corpus
        acc = clean_accuracy(tiny_victim, test, tiny_vocab)
        manual = np.mean([
            np.argmax(models.classify(tiny_victim,
                                      tokenize(tiny_vocab, ex.text))) == ex.label
            for ex in test])
        assert acc == pytest.approx(manual)

    def test_clean_accuracy_empty(self, tiny_victim, tiny_vocab):
        with pytest.raises(DataError, match="empty"):
            clean_accuracy(tiny_victim, [], tiny_vocab)

    def test_attacked_accuracy_excludes_skipped(self):
        results = [
            _result(_seq(5), _seq(6), success=True),
            _result(_seq(5), _seq(5), success=False, pred=0),
            _result(_seq(5), _seq(5), success=False, skipped=True,
                    queries=1, sim=1.0),
        ]
        assert attacked_accuracy(results) == 0.5
        assert success_rate(results) == 0.5

    def test_all_skipped_rejected(self):
        results = [_result(_seq(5), _seq(5), success=False, skipped=True,
                           queries=1)]
        with pytest.raises(DataError, match="no attackable"):
            attacked_accuracy(results)

    def test_perturbation_percent(self):
        orig, adv = _seq(5, 6, 7), _seq(5, 9, 7)
        assert perturbation_percent(orig, adv) == pytest.approx(100 / 3)
        # attackable denominator
        assert perturbation_percent(orig, adv,
                                    [False, False, True, True]) == 50.0
        assert perturbation_percent(orig, orig) == 0.0

    def test_perturbation_no_attackable(self):
        orig = _seq(5)
        assert perturbation_percent(orig, orig,
                                    [False, False]) == 0.0

    def test_perturbation_length_mismatch(self):
        with pytest.raises(DataError, match="mismatch"):
            perturbation_percent(_seq(5), _seq(5, 6))

    def test_similarity_identity(self, tiny_mlm, tiny_vocab):
        seq = tokenize(tiny_vocab, "the movie was great")
        assert semantic_similarity(tiny_mlm, seq, seq) == \
               pytest.approx(1.0, abs=1e-12)

    def test_similarity_orthogonal_embeddings(self):
        # hand-built model whose pooled representations are orthogonal
        params = models.ModelParams(
            arch="avg_mlp", vocab_size=6, dim=2, max_positions=4, n_layers=0,
            n_classes=2,
            tensors={"emb": np.array([[0.0, 0.0]] * 4 + [[1.0, 0.0],
                                                         [0.0, 1.0]]),
                     "hid_w": np.eye(2), "hid_b": np.zeros(2),
                     "cls_w": np.zeros((2, 2)), "cls_b": np.zeros(2)})
        a = TokenSeq(ids=(CLS_ID, 4, 4), words=("[CLS]", "x", "x"))
        b = TokenSeq(ids=(CLS_ID, 5, 5), words=("[CLS]", "y", "y"))
        # CLS embeds to zero here, so pooling keeps the vectors orthogonal
        assert semantic_similarity(params, a, b) == pytest.approx(0.0,
                                                                  abs=1e-12)

    def test_similarity_cosine_oracle(self, tiny_mlm, tiny_vocab,
                                      tiny_corpus):
        _, test = tiny_corpus
        rng = np.random.Generator(np.random.Philox(key=11))
        for _ in range(50):
            t1 = test[int(rng.integers(len(test)))].text
            t2 = test[int(rng.integers(len(test)))].text
            s1, s2 = tokenize(tiny_vocab, t1), tokenize(tiny_vocab, t2)
            got = semantic_similarity(tiny_mlm, s1, s2)
            u = models.sentence_embedding(tiny_mlm, s1)
            v = models.sentence_embedding(tiny_mlm, s2)
            expected = float(np.dot(u, v) /
                             (np.sqrt(np.dot(u, u)) * np.sqrt(np.dot(v, v))))
            assert got == pytest.approx(expected, abs=1e-12)


class TestBuildReport:
    def test_aggregates(self):
        results = [
            _result(_seq(5, 6), _seq(7, 6), success=True, queries=10,
                    sim=0.9),
            _result(_seq(5, 6), _seq(5, 6), success=False, queries=20,
                    pred=0, sim=0.7),
            _result(_seq(5, 6), _seq(5, 6), success=False, skipped=True,
                    queries=1, sim=1.0),
        ]
        rep = build_report(results, "ds", "pgd", {"seed": 0}, 0)
        assert rep.n_examples == 3 and rep.n_skipped == 1
        assert rep.clean_accuracy == pytest.approx(2 / 3)
        assert rep.attacked_accuracy == 0.5
        assert rep.queries_mean == 15.0          # non-skipped only
        assert rep.perturb_pct_mean == 50.0      # successes only
        assert rep.similarity_mean == 0.9        # successes only

    def test_no_successes_means_none(self):
        results = [_result(_seq(5), _seq(5), success=False, pred=0)]
        rep = build_report(results, "ds", "pgd", {}, 0)
        assert rep.perturb_pct_mean is None and rep.similarity_mean is None

    def test_empty_rejected(self):
        with pytest.raises(DataError, match="empty"):
            build_report([], "ds", "pgd", {}, 0)


@pytest.fixture(scope="module")
def results(tiny_victim, tiny_mlm, tiny_vocab, tiny_corpus):
    _, test = tiny_corpus
    cfg = AttackConfig()
    return [run_attack(tiny_victim, tiny_mlm, ex, tiny_vocab, cfg)
            for ex in test[:20]]


class TestTransferEval:
    def test_self_transfer_identity(self, results, tiny_victim):
        doc = transfer_eval(results, tiny_victim)
        assert doc["attacked_acc"] == pytest.approx(
            attacked_accuracy(results))
        kept = [r for r in results if not r.skipped]
        # every non-skipped original is correctly classified by definition
        assert doc["clean_acc"] == 1.0
        assert doc["n_examples"] == len(kept)

    def test_all_failed_equals_clean(self, results, tiny_mlp):
        kept = [r for r in results if not r.skipped]
        as_failed = [
            AttackResult(original=r.original, adversarial=r.original,
                         true_label=r.true_label,
                         predicted_label=r.true_label, success=False,
                         queries=r.queries, iterations=0, perturb_pct=0.0,
                         similarity=1.0, skipped=False)
            for r in kept]
        doc = transfer_eval(as_failed, tiny_mlp)
        assert doc["attacked_acc"] == doc["clean_acc"]
        assert doc["perturb_pct_mean"] is None

    def test_vocab_mismatch(self, results):
        small = models.init_params("avg_mlp", 5, 4, 8, 0, 2, seed=0)
        with pytest.raises(DataError, match="vocab"):
            transfer_eval(results, small)


class TestKStudy:
    def test_requires_fixed_k_row(self, tiny_victim, tiny_mlm, tiny_vocab,
                                  tiny_corpus):
        _, test = tiny_corpus
        with pytest.raises(DataError, match="tau_list"):
            k_study(tiny_victim, tiny_mlm, test[:2], tiny_vocab,
                    AttackConfig(), [0.05])

    def test_rows_schema(self, tiny_victim, tiny_mlm, tiny_vocab,
                         tiny_corpus):
        _, test = tiny_corpus
        rows = k_study(tiny_victim, tiny_mlm, test[:10], tiny_vocab,
                       AttackConfig(method="baseline"), [0.0, 0.05])
        assert [r["mode"] for r in rows] == ["fixed_k", "threshold"]
        assert rows[0]["tau"] == 0.0 and rows[1]["tau"] == 0.05
        assert all(r["n_examples"] == 10 for r in rows)


class TestReports:
    def _report(self, **kw):
        base = dict(dataset_id="ds", method="pgd", clean_accuracy=1.0,
                    attacked_accuracy=0.2, perturb_pct_mean=10.0,
                    queries_mean=15.0, similarity_mean=0.9, n_examples=10,
                    n_skipped=0, config={}, seed=0)
        base.update(kw)
        return EvalReport(**base)

    def test_self_compare_all_ties(self):
        a = self._report()
        doc = compare_report(a, a)
        assert doc["directional_wins"] == {"a": 0, "b": 0, "ties": 4}
        assert all(m["delta"] == 0 for m in doc["metrics"].values())

    def test_directional_wins(self):
        a = self._report()
        b = self._report(method="baseline", attacked_accuracy=0.4,
                         queries_mean=12.0, similarity_mean=None)
        doc = compare_report(a, b)
        # a wins attacked_accuracy, b wins queries, sim is a tie (None),
        # perturb ties exactly
        assert doc["directional_wins"] == {"a": 1, "b": 1, "ties": 2}
        assert doc["metrics"]["similarity_mean"]["delta"] is None
        assert doc["metrics"]["attacked_accuracy"]["delta"] == \
               pytest.approx(0.2)

    def test_dataset_mismatch(self):
        with pytest.raises(DataError, match="datasets"):
            compare_report(self._report(), self._report(dataset_id="other"))

    def test_seed_mismatch(self):
        with pytest.raises(DataError, match="seeds"):
            compare_report(self._report(), self._report(seed=1))

    def test_schema_document_is_valid(self, tmp_path):
        out = tmp_path / "cmp.json"
        compare_report(self._report(), self._report(method="baseline"), out)
        text = out.read_text()
        assert text.endswith("\n")
        doc = json.loads(text)
        assert set(doc["metrics"]) == {"attacked_accuracy",
                                       "perturb_pct_mean", "queries_mean",
                                       "similarity_mean"}

    def test_canonical_json_format(self):
        text = canonical_json({"b": 1, "a": {"z": 2, "y": 3}})
        assert text == '{\n  "a": {\n    "y": 3,\n    "z": 2\n  },\n  "b": 1\n}\n'


class TestResultsIO:
    def test_round_trip(self, tmp_path):
        results = [_result(_seq(5, 6), _seq(7, 6)),
                   _result(_seq(5), _seq(5), success=False, skipped=True,
                           queries=1)]
        path = tmp_path / "r.jsonl"
        save_results(results, path)
        assert load_results(path) == results

    def test_bad_line_reported(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text("{broken\n")
        with pytest.raises(DataError, match="line 1"):
            load_results(path)

    def test_empty_file_empty_list(self, tmp_path):
        path = tmp_path / "r.jsonl"
        path.write_text("")
        assert load_results(path) == []
