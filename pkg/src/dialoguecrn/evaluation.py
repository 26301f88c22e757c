"""Metrics, ablation grids, turn sweeps and attention/prediction exports."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .model import DialogueCRN
from .tensor import no_grad
from .training import dataset_loss, train


@dataclass
class ClassificationReport:
    accuracy: float
    precision: list
    recall: list
    f1: list
    support: list
    weighted_f1: float
    macro_f1: float
    confusion: list  # rows = gold, columns = predicted

    def summary(self):
        return {"accuracy": self.accuracy, "weighted_f1": self.weighted_f1, "macro_f1": self.macro_f1}


@dataclass
class RegressionReport:
    mae: list
    count: int

    def summary(self):
        return {f"mae_{k}": v for k, v in enumerate(self.mae)}


def confusion_matrix(preds, golds, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (golds, preds), 1)
    return cm


def classification_metrics(preds, golds, n_classes):
    """Accuracy, per-class P/R/F1, support-weighted and macro F1.

    A class with no gold and no predicted utterances scores F1 = 0; it has
    zero weight in the weighted mean but still counts in the macro mean.
    """
    preds, golds = np.asarray(preds, dtype=np.intp), np.asarray(golds, dtype=np.intp)
    if preds.shape != golds.shape:
        raise ValueError(f"{preds.size} predictions for {golds.size} gold labels")
    if preds.size == 0:
        raise ValueError("no labels to score")
    for arr in (preds, golds):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"labels must lie in [0, {n_classes})")
    cm = confusion_matrix(preds, golds, n_classes)
    tp = np.diag(cm).astype(float)
    pred_count = cm.sum(axis=0).astype(float)
    support = cm.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_count > 0, tp / pred_count, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return ClassificationReport(
        accuracy=float(tp.sum() / preds.size),
        precision=precision.tolist(), recall=recall.tolist(), f1=f1.tolist(),
        support=support.astype(int).tolist(),
        weighted_f1=float((f1 * support).sum() / support.sum()),
        macro_f1=float(f1.mean()),
        confusion=cm.tolist(),
    )


def regression_metrics(preds, golds):
    preds, golds = np.asarray(preds, dtype=float), np.asarray(golds, dtype=float)
    if preds.shape != golds.shape:
        raise ValueError(f"prediction shape {preds.shape} vs gold shape {golds.shape}")
    if preds.ndim == 1:
        preds, golds = preds[:, None], golds[:, None]
    return RegressionReport(np.abs(preds - golds).mean(axis=0).tolist(), int(preds.shape[0]))


# model evaluation -----------------------------------------------------------

def predict_corpus(model, convs, batch_size=32):
    """Per-conversation output arrays (probabilities or attributes)."""
    outs = []
    with no_grad():
        for i in range(0, len(convs), batch_size):
            outs.extend(model.forward(list(convs[i:i + batch_size])).per_conversation())
    return outs


def evaluate(model, convs, batch_size=32):
    outs = predict_corpus(model, convs, batch_size)
    if model.config.head == "categorical":
        preds = np.concatenate([o.argmax(-1) for o in outs])
        golds = np.array([u.label for c in convs for u in c.utterances])
        return classification_metrics(preds, golds, model.config.n_outputs), outs
    preds = np.concatenate(outs)
    golds = np.array([u.attrs for c in convs for u in c.utterances], dtype=float)
    return regression_metrics(preds, golds), outs


def metrics_summary(model, convs):
    return evaluate(model, convs)[0].summary()


def prediction_records(model, convs, outs):
    records = []
    for conv, out in zip(convs, outs):
        for i, (u, row) in enumerate(zip(conv.utterances, out)):
            if model.config.head == "categorical":
                records.append({"conversation_id": conv.id, "utterance_index": i, "gold": u.label,
                                "pred": int(np.argmax(row)), "probs": row.tolist()})
            else:
                records.append({"conversation_id": conv.id, "utterance_index": i,
                                "gold": list(u.attrs) if u.attrs else None, "pred": row.tolist()})
    return records


def attention_trace(model, conv, level=None):
    """Per-turn attention records for one conversation (optionally one level)."""
    with no_grad():
        out = model.forward([conv], trace=True)
    return [r for r in out.trace if level is None or r["level"] == level]


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


# experiment grids -----------------------------------------------------------

# canonical ablation rows as (cog_s, cog_v, per_s, per_v) switch flags
ABLATION_ROWS = (
    ("full", (True, True, True, True)),
    ("-cog_s", (False, True, True, True)),
    ("-cog_v", (True, False, True, True)),
    ("-cog", (False, False, True, True)),
    ("-cog-per_s", (False, False, False, True)),
    ("-cog-per_v", (False, False, True, False)),
    ("-all", (False, False, False, False)),
)
SWITCHES = ("cog_s", "cog_v", "per_s", "per_v")


@dataclass
class CellResult:
    name: str
    model_config: dict
    best_epoch: int
    val_loss: float
    metrics: dict

    @property
    def score(self):
        """Ranking key: accuracy (or -mean MAE), ties to the lower validation loss."""
        if "accuracy" in self.metrics:
            return (self.metrics["accuracy"], -self.val_loss)
        return (-float(np.mean(list(self.metrics.values()))), -self.val_loss)


def _fit_cell(args):
    name, model_config, train_config, train_set, val_set, table = args
    model = DialogueCRN(model_config, table)
    result = train(model, train_set, val_set, train_config)
    report, _ = evaluate(model, val_set)
    return CellResult(name, model_config.to_dict(), result.best_epoch,
                      dataset_loss(model, val_set), report.summary())


def workers_from_env():
    try:
        return max(1, int(os.environ.get("CRN_THREADS", "1")))
    except ValueError:
        return 1


def _run_cells(jobs, workers):
    workers = workers or workers_from_env()
    if workers == 1 or len(jobs) == 1:
        return [_fit_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_fit_cell, jobs))


def ablation_configs(base_config, switches=SWITCHES):
    """Canonical ablation rows whose disabled modules all lie in ``switches``."""
    allowed = set(switches)
    rows = []
    for name, flags in ABLATION_ROWS:
        off = {s for s, on in zip(SWITCHES, flags) if not on}
        if off <= allowed:
            rows.append((name, replace(base_config, **dict(zip(SWITCHES, flags)))))
    return rows


def run_ablation_grid(base_config, train_config, train_set, val_set, table=None,
                      switches=SWITCHES, workers=None):
    """Train and score one model per ablation row; every row shares the same split."""
    jobs = [(name, cfg, train_config, train_set, val_set, table)
            for name, cfg in ablation_configs(base_config, switches)]
    return _run_cells(jobs, workers)


@dataclass
class SweepGrid:
    turns_s: list
    turns_v: list
    cells: dict  # (ts, tv) -> CellResult

    def matrix(self, key="accuracy"):
        return np.array([[self.cells[(ts, tv)].metrics[key] for tv in self.turns_v]
                         for ts in self.turns_s])

    def best(self):
        return max(self.cells, key=lambda k: self.cells[k].score)

    def to_csv(self, key="accuracy"):
        lines = [",".join(["T_s\\T_v"] + [str(tv) for tv in self.turns_v])]
        for ts, row in zip(self.turns_s, self.matrix(key)):
            lines.append(",".join([str(ts)] + [repr(float(v)) for v in row]))
        return "\n".join(lines) + "\n"


def run_turn_sweep(base_config, train_config, train_set, val_set, turns_s, turns_v,
                   table=None, workers=None):
    """One trained model per (T_s, T_v) cell with both cognition instances enabled."""
    turns_s, turns_v = list(turns_s), list(turns_v)
    if any(t < 0 for t in turns_s + turns_v):
        raise ValueError("turn counts must be non-negative")
    keys = [(ts, tv) for ts in turns_s for tv in turns_v]
    jobs = [(f"T=({ts},{tv})", replace(base_config, turns_s=ts, turns_v=tv, cog_s=True, cog_v=True),
             train_config, train_set, val_set, table) for ts, tv in keys]
    return SweepGrid(turns_s, turns_v, dict(zip(keys, _run_cells(jobs, workers))))


def ablation_table(rows):
    """Comma-separated table with Y/x flags per switch, one row per configuration."""
    metric_keys = list(rows[0].metrics)
    header = ["cog_s", "cog_v", "per_s", "per_v"] + metric_keys
    lines = [",".join(["row"] + header)]
    for r in rows:
        flags = ["Y" if r.model_config[s] else "x" for s in SWITCHES]
        lines.append(",".join([r.name] + flags + [f"{r.metrics[k]:.4f}" for k in metric_keys]))
    return "\n".join(lines) + "\n"


def cell_dict(cell):
    return asdict(cell)
