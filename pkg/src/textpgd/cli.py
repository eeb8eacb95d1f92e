"""Command-line entry point.

Every command echoes its fully-resolved configuration into the output
directory before doing any work, and all randomness flows from a single
--seed through numpy's counter-based Philox generator, so reruns with
identical arguments are byte-reproducible. Exit codes: 0 success, 1
data/model error, 2 usage error.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

import click

from . import evaluation, models, textcore
from .attack import AttackConfig, run_attack
from .errors import ToolkitError
from .evaluation import EvalReport


def _echo_config(out_dir: str, config: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    evaluation.write_canonical(config, os.path.join(out_dir, "run_config.json"))


def _write_sidecar(path: str) -> None:
    # Timestamps never go into canonical payloads.
    meta = {"written_at": datetime.now(timezone.utc).isoformat()}
    with open(path + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f)
        f.write("\n")


def _thread_count() -> int:
    cap = os.environ.get("TEXTPGD_THREADS")
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


def _data_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ToolkitError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
        except OSError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
def main():
    """Adversarial text attacks with PGD and a greedy masked-LM baseline."""


@main.command("make-corpus")
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--size", default=2000, show_default=True, type=int)
@_data_errors
def cmd_make_corpus(out, seed, size):
    """Generate train.jsonl, test.jsonl and vocab.json deterministically."""
    _echo_config(out, {"command": "make-corpus", "seed": seed, "size": size,
                       "task": "sentiment"})
    train, test = textcore.make_corpus(seed=seed, size=size)
    textcore.save_dataset(train, os.path.join(out, "train.jsonl"))
    textcore.save_dataset(test, os.path.join(out, "test.jsonl"))
    vocab = textcore.build_vocab([ex.text for ex in train], min_freq=1)
    vocab.save(os.path.join(out, "vocab.json"))
    click.echo(f"wrote {len(train)} train / {len(test)} test examples, "
               f"vocab size {len(vocab)}", err=True)


@main.command("train")
@click.option("--task", required=True, type=click.Choice(["clf", "mlm"]))
@click.option("--arch", default="transformer", show_default=True,
              type=click.Choice(["transformer", "avg_mlp"]))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Overrides the config file value.")
@click.option("--epochs", type=int, default=None, help="Overrides the config file value.")
@click.option("--lr", type=float, default=None, help="Overrides the config file value.")
@click.option("--out", required=True, type=click.Path())
@_data_errors
def cmd_train(task, arch, data_dir, config_path, seed, epochs, lr, out):
    """Train a classifier or masked LM; writes a checkpoint directory."""
    if task == "mlm" and arch != "transformer":
        raise click.UsageError("--task mlm requires --arch transformer")
    raw = {}
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            raw = json.load(f)
    raw["arch"] = arch
    for key, val in (("seed", seed), ("epochs", epochs), ("lr", lr)):
        if val is not None:
            raw[key] = val
    hyper = models.TrainHyper.from_dict(raw)

    _echo_config(out, {"command": "train", "task": task,
                       "data": os.path.abspath(data_dir),
                       "hyper": {f: getattr(hyper, f)
                                 for f in hyper.__dataclass_fields__}})
    vocab = textcore.Vocab.load(os.path.join(data_dir, "vocab.json"))
    examples = textcore.load_dataset(os.path.join(data_dir, "train.jsonl"))
    if task == "clf":
        params, log = models.train_classifier(examples, vocab, hyper)
        evaluation.write_canonical(log, os.path.join(out, "training_log.json"))
    else:
        params = models.train_mlm(examples, vocab, hyper)
    models.save_checkpoint(params, out)
    vocab.save(os.path.join(out, "vocab.json"))
    click.echo(f"checkpoint written to {out}", err=True)


def _load_attack_inputs(victim_dir, mlm_dir, data_path):
    victim = models.load_checkpoint(victim_dir)
    mlm = models.load_checkpoint(mlm_dir)
    vocab = textcore.Vocab.load(os.path.join(victim_dir, "vocab.json"))
    from .errors import DataError
    if victim.vocab_size != mlm.vocab_size or victim.vocab_size != len(vocab):
        raise DataError(
            f"vocab mismatch: victim {victim.vocab_size}, mlm {mlm.vocab_size}, "
            f"vocab file {len(vocab)}")
    examples = textcore.load_dataset(data_path)
    return victim, mlm, vocab, examples


def _read_attack_config(path, method=None) -> AttackConfig:
    raw = {}
    if path:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    if method is not None:
        raw["method"] = method
    return AttackConfig.from_dict(raw)


def _run_attacks(victim, mlm, vocab, examples, config):
    worker = functools.partial(run_attack, victim, mlm, vocab=vocab, config=config)
    with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
        # map preserves input order regardless of completion order
        return list(pool.map(lambda ex: worker(ex), examples))


@main.command("attack")
@click.option("--method", required=True, type=click.Choice(["pgd", "baseline"]))
@click.option("--victim", "victim_dir", required=True, type=click.Path(exists=True))
@click.option("--mlm", "mlm_dir", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--attack-config", "config_path", type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_data_errors
def cmd_attack(method, victim_dir, mlm_dir, data_path, config_path, out):
    """Attack every example; writes results.jsonl in input order."""
    config = _read_attack_config(config_path, method)
    victim, mlm, vocab, examples = _load_attack_inputs(victim_dir, mlm_dir, data_path)
    _echo_config(out, {"command": "attack", "method": method,
                       "dataset_id": os.path.basename(data_path),
                       "attack_config": config.to_dict(),
                       "victim": os.path.abspath(victim_dir),
                       "mlm": os.path.abspath(mlm_dir)})
    results = _run_attacks(victim, mlm, vocab, examples, config)
    evaluation.save_results(results, os.path.join(out, "results.jsonl"))
    if results:
        kept = [r for r in results if not r.skipped]
        succ = sum(1 for r in kept if r.success)
        click.echo(f"{len(results)} examples, {len(results) - len(kept)} skipped, "
                   f"{succ}/{len(kept) or 1} attacks succeeded", err=True)
    else:
        click.echo("0 examples", err=True)


def _report_from_run(run_dir) -> EvalReport:
    with open(os.path.join(run_dir, "run_config.json"), encoding="utf-8") as f:
        run_cfg = json.load(f)
    results = evaluation.load_results(os.path.join(run_dir, "results.jsonl"))
    return evaluation.build_report(
        results, dataset_id=run_cfg["dataset_id"], method=run_cfg["method"],
        config=run_cfg["attack_config"], seed=run_cfg["attack_config"]["seed"])


@main.command("evaluate")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_data_errors
def cmd_evaluate(run_dir, out):
    """Aggregate an attack run directory into a canonical report JSON."""
    report = _report_from_run(run_dir)
    evaluation.write_canonical(report.to_dict(), out)
    _write_sidecar(out)
    click.echo(f"report written to {out}", err=True)


@main.command("transfer")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_data_errors
def cmd_transfer(run_dir, model_dir, out):
    """Replay a run's adversarial examples on another model."""
    results = evaluation.load_results(os.path.join(run_dir, "results.jsonl"))
    model_b = models.load_checkpoint(model_dir)
    doc = evaluation.transfer_eval(results, model_b)
    doc["model"] = os.path.abspath(model_dir)
    doc["run"] = os.path.abspath(run_dir)
    evaluation.write_canonical(doc, out)
    _write_sidecar(out)
    click.echo(f"transfer report written to {out}", err=True)


@main.command("compare")
@click.option("--report-a", required=True, type=click.Path(exists=True))
@click.option("--report-b", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_data_errors
def cmd_compare(report_a, report_b, out):
    """Side-by-side comparison of two evaluation reports."""
    def load(path):
        with open(path, encoding="utf-8") as f:
            return EvalReport(**json.load(f))
    doc = evaluation.compare_report(load(report_a), load(report_b), out)
    _write_sidecar(out)
    click.echo(f"{doc['directional_wins']}", err=True)


@main.command("kstudy")
@click.option("--victim", "victim_dir", required=True, type=click.Path(exists=True))
@click.option("--mlm", "mlm_dir", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--attack-config", "config_path", type=click.Path(exists=True))
@click.option("--tau-list", required=True,
              help="Comma-separated thresholds, must include 0, e.g. '0,0.05'.")
@click.option("--out", required=True, type=click.Path())
@_data_errors
def cmd_kstudy(victim_dir, mlm_dir, data_path, config_path, tau_list, out):
    """Fixed-K vs thresholded-K sweep; one report row per tau."""
    try:
        taus = [float(t) for t in tau_list.split(",") if t.strip() != ""]
    except ValueError:
        raise click.UsageError(f"invalid --tau-list: {tau_list!r}")
    config = _read_attack_config(config_path)
    victim, mlm, vocab, examples = _load_attack_inputs(victim_dir, mlm_dir, data_path)
    rows = evaluation.k_study(victim, mlm, examples, vocab, config, taus)
    doc = {"dataset_id": os.path.basename(data_path),
           "attack_config": config.to_dict(), "rows": rows}
    evaluation.write_canonical(doc, out)
    _write_sidecar(out)
    click.echo(f"{len(rows)} rows written to {out}", err=True)


if __name__ == "__main__":
    main()
