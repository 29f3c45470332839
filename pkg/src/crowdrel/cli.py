"""Command-line pipelines: simulate -> train -> eval.

A run is driven by a declarative key=value config file; command-line
flags override file values. Every command writes a manifest carrying the
hash of the effective config so artifacts are traceable. Exit codes:
0 success, 1 configuration/validation problem, 2 runtime failure.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import baselines, data, evaluate, featurize, model, simulate

OUT_DIR_ENV = "CROWDREL_OUT"

# (classifier_hidden, estimator_hidden) defaults per featurizer
HIDDEN_DEFAULTS = {
    "none": (5, 5),
    "tfidf": (100, 100),
    "avg-embed": (50, 25),
    "concat-avg-embed": (100, 50),
}


class ConfigError(ValueError):
    pass


def parse_config(path: str | Path) -> dict[str, str]:
    cfg: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = stripped.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def config_hash(cfg: dict[str, str]) -> str:
    canonical = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _get(cfg: dict[str, str], key: str, default=None, cast=str):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing config key {key!r}")
        return default
    try:
        return cast(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot parse {cfg[key]!r} as {cast.__name__}") from None


def _resolve_out_dir(cfg: dict[str, str], flag: str | None) -> Path:
    out = flag or cfg.get("out_dir") or os.environ.get(OUT_DIR_ENV) or "crowdrel_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out_dir: Path, command: str, cfg: dict[str, str], files: list[str]) -> None:
    payload = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed", "0"),
        "files": sorted(files),
    }
    (out_dir / f"manifest_{command}.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")


def _parse_panel(value: str, n_labels: int) -> list[simulate.AnnotatorProfile]:
    if value == "default":
        return simulate.default_panel(n_labels)
    if value == "graded":
        return simulate.graded_panel()
    profiles = []
    for part in value.split(","):
        part = part.strip()
        kind, _, arg = part.partition(":")
        if kind == "narrow":
            profiles.append(simulate.AnnotatorProfile("narrow", domain=int(arg)))
        elif kind == "graded":
            profiles.append(simulate.AnnotatorProfile("graded", error_prob=float(arg)))
        elif kind in ("broad", "random", "adversarial"):
            profiles.append(simulate.AnnotatorProfile(kind))
        else:
            raise ConfigError(f"unknown panel entry {part!r}")
    return profiles


def _merge(cfg_path: str | None, overrides: dict[str, str | None]) -> dict[str, str]:
    cfg = parse_config(cfg_path) if cfg_path else {}
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = str(value)
    return cfg


def _label_set(cfg: dict[str, str]) -> data.LabelSet:
    kind = _get(cfg, "dataset", "moon")
    if kind in simulate.DATASET_KINDS:
        k = 3 if kind == "three-class" else 2
        return data.LabelSet(tuple(str(c) for c in range(k)))
    return data.LabelSet(tuple(s.strip() for s in _get(cfg, "labels").split(",")))


def _load_dataset(cfg: dict[str, str], out_dir: Path):
    """Return (instances, annotations, gold, label_set) from files or a prior simulate run."""
    label_set = _label_set(cfg)
    kind = _get(cfg, "dataset", "moon")
    if kind in simulate.DATASET_KINDS:
        base = out_dir
        instances = data.load_instances(base / "instances.csv", "dense-csv")
        fmt_note = "run `crowdrel simulate` first or set dataset=files"
        if not instances:
            raise ConfigError(f"no instances found in {base}; {fmt_note}")
    else:
        instances = data.load_instances(_get(cfg, "instances"),
                                        _get(cfg, "instances_format", "dense-csv"))
        base = None
    ids = [inst.id for inst in instances]
    ann_path = (out_dir / "annotations.csv") if base else _get(cfg, "annotations")
    annotations = data.load_annotations(ann_path, label_set, instance_ids=ids)
    gold = None
    gold_path = (out_dir / "gold.csv") if base else cfg.get("gold")
    if gold_path and Path(gold_path).exists():
        gold = data.load_gold(gold_path, label_set, instance_ids=ids)
    return instances, annotations, gold, label_set


def _features(cfg: dict[str, str], instances: list[data.Instance]) -> tuple[np.ndarray, str]:
    kind = _get(cfg, "featurizer", "none")
    if kind == "none":
        return data.feature_matrix(instances), kind
    texts = [inst.text or "" for inst in instances]
    if kind == "tfidf":
        vocab = featurize.fit_tfidf(texts)
        return np.stack([featurize.transform_tfidf(vocab, t) for t in texts]), kind
    table = featurize.load_embeddings(_get(cfg, "embeddings"))
    if kind == "avg-embed":
        return np.stack([featurize.average_embed(table, t) for t in texts]), kind
    if kind == "concat-avg-embed":
        return np.stack([
            featurize.concat_average_embed(table, inst.text or "", inst.text2 or "")
            for inst in instances
        ]), kind
    raise ConfigError(f"unknown featurizer {kind!r}")


def _train_config(cfg: dict[str, str], featurizer: str) -> model.TrainConfig:
    clf_default, est_default = HIDDEN_DEFAULTS[featurizer]
    max_outer = cfg.get("max_outer")
    try:
        return model.TrainConfig(
            mode=_get(cfg, "mode", "ce-jt"),
            inner_iters=_get(cfg, "inner_iters", 50, int),
            max_outer=None if max_outer is None else int(max_outer),
            early_stop_tol=_get(cfg, "early_stop_tol", 1e-3, float),
            pretrain_source=_get(cfg, "pretrain", "ds"),
            pretrain_epochs=_get(cfg, "pretrain_epochs", 200, int),
            classifier_hidden=_get(cfg, "classifier_hidden", clf_default, int),
            estimator_hidden=_get(cfg, "estimator_hidden", est_default, int),
            estimator_input=_get(cfg, "estimator_input", "hidden"),
            learning_rate=_get(cfg, "learning_rate", 0.001, float),
            weight_decay=_get(cfg, "weight_decay", 0.001, float),
            clip_norm=_get(cfg, "clip_norm", 5.0, float),
            seed=_get(cfg, "seed", 0, int),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    validation = (ConfigError, data.DataError, FileNotFoundError)
    sys.exit(1 if isinstance(exc, validation) else 2)


@click.group()
@click.option("--threads", type=int, default=None,
              help="Best-effort cap on BLAS/OpenMP threads (set before heavy work).")
def main(threads: int | None) -> None:
    """Infer true labels and per-instance annotator reliability from noisy annotations."""
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


@main.command("simulate")
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out-dir", default=None)
@click.option("--dataset", default=None, help="moon | circle | three-class")
@click.option("--n", default=None, type=int)
@click.option("--noise", default=None, type=float)
@click.option("--panel", default=None, help='"default", "graded" or e.g. "narrow:0,broad,random"')
@click.option("--keep-prob", default=None, type=float)
@click.option("--seed", default=None, type=int)
def cmd_simulate(config_path, out_dir, dataset, n, noise, panel, keep_prob, seed):
    """Generate a 2-D dataset with simulated noisy annotators."""
    try:
        cfg = _merge(config_path, {"dataset": dataset, "n": n, "noise": noise,
                                   "panel": panel, "keep_prob": keep_prob, "seed": seed})
        kind = _get(cfg, "dataset", "moon")
        if kind not in simulate.DATASET_KINDS:
            raise ConfigError(f"simulate needs a generated dataset kind, got {kind!r}")
        out = _resolve_out_dir(cfg, out_dir)
        seed_v = _get(cfg, "seed", 0, int)
        noise_v = cfg.get("noise")
        instances, gold = simulate.gen_2d(kind, _get(cfg, "n", 1000, int),
                                          None if noise_v is None else float(noise_v), seed_v)
        label_set = _label_set(cfg)
        profiles = _parse_panel(_get(cfg, "panel"), len(label_set))
        annotations = simulate.simulate_annotations(
            gold, len(label_set), profiles, seed_v,
            instance_ids=[inst.id for inst in instances],
            keep_prob=_get(cfg, "keep_prob", 1.0, float),
        )
        problems = data.validate(instances, annotations, gold)
        if problems:
            raise ConfigError("; ".join(problems))
        data.write_instances(out / "instances.csv", instances)
        data.write_gold(out / "gold.csv", gold, label_set, [i.id for i in instances])
        data.write_annotations(out / "annotations.csv", annotations, label_set)
        _write_manifest(out, "simulate", cfg, ["instances.csv", "gold.csv", "annotations.csv"])
        click.echo(f"wrote {len(instances)} instances, {annotations.n_pairs} annotations to {out}")
    except Exception as exc:  # noqa: BLE001 - single funnel to exit codes
        _fail(exc)


@main.command("train")
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out-dir", default=None)
@click.option("--mode", default=None, help="em | ce-alt | ce-jt")
@click.option("--pretrain", default=None, help="mv | ds")
@click.option("--max-outer", default=None, type=int)
@click.option("--estimator-input", default=None, help="hidden | feature")
@click.option("--seed", default=None, type=int)
def cmd_train(config_path, out_dir, mode, pretrain, max_outer, estimator_input, seed):
    """Pre-train and fit the reliability model; write checkpoint, trace and predictions."""
    try:
        cfg = _merge(config_path, {"mode": mode, "pretrain": pretrain, "max_outer": max_outer,
                                   "estimator_input": estimator_input, "seed": seed})
        out = _resolve_out_dir(cfg, out_dir)
        instances, annotations, gold, label_set = _load_dataset(cfg, out)
        features, featurizer = _features(cfg, instances)
        train_cfg = _train_config(cfg, featurizer)
        gold_arr = gold.to_array(len(instances)) if gold is not None else None
        result = model.train(features, annotations, train_cfg, gold=gold_arr)

        model.save_model(out / "model.json", result.state, label_set, train_cfg)
        with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["outer", "objective_start", "objective_end", "f1"])
            for row in result.trace:
                writer.writerow([row.outer, repr(row.objective_start), repr(row.objective_end),
                                 "" if row.f1 is None else repr(row.f1)])
        pred, _ = model.predict_labels(result.state, features, annotations)
        with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance_id", "label"])
            for pos, inst in enumerate(instances):
                writer.writerow([inst.id, label_set.labels[pred[pos]]])
        scores = model.reliability_scores(result.state, features, annotations)
        with open(out / "reliability.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance_id", "annotator_id", "score"])
            for pos, (i, j, _) in enumerate(annotations.triples()):
                writer.writerow([annotations.instance_ids[i], annotations.annotator_ids[j],
                                 repr(float(scores.posterior[pos]))])
        _write_manifest(out, "train", cfg,
                        ["model.json", "trace.csv", "predictions.csv", "reliability.csv"])
        click.echo(f"trained {train_cfg.mode} for {len(result.trace)} outer iterations; artifacts in {out}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


def _aggregator(name: str, n_labels: int):
    if name == "mv":
        return lambda ann: baselines.majority_vote(ann, n_labels)
    if name == "ds":
        return lambda ann: baselines.dawid_skene(ann, n_labels).hard_labels
    raise ConfigError(f"unknown aggregator {name!r}")


@main.command("eval")
@click.option("-c", "--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("-o", "--out-dir", default=None)
@click.option("--metrics", default=None, help="comma list from: f1, iaa, baselines")
@click.option("--report-reliability", "report_k", default=None, type=int,
              help="emit top/bottom-k reliability tables")
@click.option("--denoise", default=None, help="mv | ds | off")
def cmd_eval(config_path, out_dir, metrics, report_k, denoise):
    """Score predictions and reliability artifacts from a train run."""
    try:
        cfg = _merge(config_path, {"metrics": metrics, "report_reliability": report_k,
                                   "denoise": denoise})
        out = _resolve_out_dir(cfg, out_dir)
        instances, annotations, gold, label_set = _load_dataset(cfg, out)
        ids = [inst.id for inst in instances]
        pred_gold = data.load_gold(out / "predictions.csv", label_set, instance_ids=ids)
        # predictions.csv shares the gold file schema (instance_id,label)
        pred = pred_gold.to_array(len(instances))
        if np.any(pred < 0):
            raise ConfigError("predictions.csv does not cover every instance")
        scores = _load_scores(out / "reliability.csv", annotations)

        rows: list[tuple[str, str]] = []
        wanted = [m.strip() for m in _get(cfg, "metrics", "f1,iaa").split(",") if m.strip()]
        for metric in wanted:
            if metric == "f1":
                if gold is None:
                    raise ConfigError("f1 requested but no gold labels available")
                s = evaluate.f1(pred, gold)
                rows += [("f1_micro", repr(s.micro)), ("f1_macro", repr(s.macro))]
            elif metric == "iaa":
                counts = annotations.counts_per_instance()
                if counts.min() >= 2 and counts.min() == counts.max():
                    rows.append(("fleiss_kappa",
                                 repr(evaluate.fleiss_kappa(annotations, len(label_set)))))
                else:
                    rows.append(("krippendorff_alpha",
                                 repr(evaluate.krippendorff_alpha(annotations, len(label_set)))))
            elif metric == "baselines":
                if gold is None:
                    raise ConfigError("baselines requested but no gold labels available")
                mv = evaluate.f1(baselines.majority_vote(annotations, len(label_set)), gold)
                ds = evaluate.f1(baselines.dawid_skene(annotations, len(label_set)).hard_labels, gold)
                rows += [("mv_f1_micro", repr(mv.micro)), ("ds_f1_micro", repr(ds.micro))]
            else:
                raise ConfigError(f"unknown metric {metric!r}")

        files = ["metrics.csv"]
        k = _get(cfg, "report_reliability", 0, int)
        if k > 0:
            if gold is None:
                raise ConfigError("reliability report needs gold labels")
            report = evaluate.reliability_report(scores, annotations, gold, k)
            (out / "reliability_report.txt").write_text(
                evaluate.report_to_text(report, label_set.labels), encoding="utf-8")
            with open(out / "reliability_report.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["annotator", "side", "n", "n_correct", "mean_reliability",
                                 "class", "class_n", "class_correct", "class_mean_reliability"])
                for entry in report.annotators:
                    for side_name in ("top", "bottom"):
                        side = getattr(entry, side_name)
                        writer.writerow([entry.annotator_id, side_name,
                                         len(side.instance_indices), side.n_correct,
                                         repr(side.mean_reliability), "", "", "", ""])
                        for c, stats in sorted(side.per_class.items()):
                            writer.writerow([entry.annotator_id, side_name, "", "", "",
                                             label_set.labels[c], stats.n_instances,
                                             stats.n_correct, repr(stats.mean_reliability)])
            files += ["reliability_report.txt", "reliability_report.csv"]
        denoise_with = _get(cfg, "denoise", "off")
        if denoise_with != "off":
            if gold is None:
                raise ConfigError("denoise experiment needs gold labels")
            res = evaluate.denoise_experiment(annotations, scores,
                                              _aggregator(denoise_with, len(label_set)), gold)
            rows += [(f"denoise_{denoise_with}_before", repr(res.f1_before.micro)),
                     (f"denoise_{denoise_with}_after", repr(res.f1_after.micro)),
                     (f"denoise_{denoise_with}_delta", repr(res.delta_micro))]

        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            writer.writerows(rows)
        _write_manifest(out, "eval", cfg, files)
        for name, value in rows:
            click.echo(f"{name} = {value}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


def _load_scores(path: Path, annotations: data.AnnotationSet) -> np.ndarray:
    inst_pos = {v: i for i, v in enumerate(annotations.instance_ids)}
    ann_pos = {v: j for j, v in enumerate(annotations.annotator_ids)}
    by_pair: dict[tuple[int, int], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["instance_id", "annotator_id", "score"]:
            raise data.ParseError(f"{path}: header must be instance_id,annotator_id,score")
        for row in reader:
            if not row:
                continue
            by_pair[(inst_pos[row[0]], ann_pos[row[1]])] = float(row[2])
    scores = np.empty(annotations.n_pairs, dtype=np.float64)
    for pos, (i, j, _) in enumerate(annotations.triples()):
        if (i, j) not in by_pair:
            raise data.DataError(f"{path}: missing score for pair ({annotations.instance_ids[i]}, "
                                 f"{annotations.annotator_ids[j]})")
        scores[pos] = by_pair[(i, j)]
    return scores


if __name__ == "__main__":
    main()
