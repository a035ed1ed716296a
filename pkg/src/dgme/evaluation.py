"""Dataset bookkeeping and the evaluation protocol.

Covers label-schema remapping, class-balanced stratified splits,
selective oversampling of minority classes, and metric computation
(top-1 accuracy, per-class and macro precision/recall/F1, confusion
matrices). Schemas ship as JSON data files, not code.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from dgme.errors import DataError

DROP = "DROP"

# Training-set oversampling targets for the consolidated modern corpus,
# alongside the original counts they were derived from.
MODERN_ORIGINAL_TRAIN_COUNTS = {"static": 1304, "tilt": 63, "pan": 73, "zoom": 1212}
MODERN_OVERSAMPLE_TARGETS = {"static": 1686, "tilt": 1280, "pan": 1460, "zoom": 1820}


@dataclass(frozen=True)
class ClassSchema:
    name: str
    classes: tuple[str, ...]
    remap: dict

    def __post_init__(self):
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise ValueError("classes must be nonempty and unique")
        bad = {t for t in self.remap.values() if t != DROP and t not in self.classes}
        if bad:
            raise ValueError(f"remap targets outside schema classes: {sorted(bad)}")

    def index(self, label: str) -> int:
        return self.classes.index(label)


@dataclass
class AnnotatedSet:
    entries: list[tuple[str, str]]  # (clip_id, label)
    schema: ClassSchema

    def __post_init__(self):
        for clip_id, label in self.entries:
            if label not in self.schema.classes:
                raise ValueError(f"label {label!r} of {clip_id} not in schema {self.schema.name}")

    def class_counts(self) -> dict:
        counts = {c: 0 for c in self.schema.classes}
        for _, label in self.entries:
            counts[label] += 1
        return counts


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows true, cols predicted
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ValueError(f"confusion matrix must be {k}x{k}, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list[tuple[float, float, float]]  # (precision, recall, f1)
    macro_precision: float
    macro_recall: float
    macro_f1: float


def load_schema(name: str) -> ClassSchema:
    """Load a packaged schema (``modern4`` or ``historian5``) or a JSON path."""
    candidate = Path(name)
    if candidate.suffix == ".json" and candidate.is_file():
        payload = json.loads(candidate.read_text())
    else:
        ref = resources.files("dgme.schemas").joinpath(f"{name}.json")
        if not ref.is_file():
            raise DataError(f"unknown schema {name!r}")
        payload = json.loads(ref.read_text())
    return ClassSchema(
        name=payload["name"],
        classes=tuple(payload["classes"]),
        remap=dict(payload["remap"]),
    )


def remap_labels(raw: list[tuple[str, str]], schema: ClassSchema) -> AnnotatedSet:
    """Apply the schema's source-label remap; DROP entries are removed."""
    entries = []
    for clip_id, source in raw:
        if source not in schema.remap:
            raise DataError(f"unknown source label {source!r} for clip {clip_id}")
        target = schema.remap[source]
        if target == DROP:
            continue
        entries.append((clip_id, target))
    return AnnotatedSet(entries, schema)


def stratified_split(aset: AnnotatedSet, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                     seed: int = 0) -> tuple[AnnotatedSet, AnnotatedSet, AnnotatedSet]:
    """Class-balanced split with floor quotas.

    Per class, entries are shuffled with a seeded RNG and the quotas are
    floor(ratio * n) each; leftover samples are assigned one at a time in
    the priority order test, train, val.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three fractions summing to 1")
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    by_class: dict = {c: [] for c in aset.schema.classes}
    for entry in aset.entries:
        by_class[entry[1]].append(entry)

    for cls in aset.schema.classes:
        group = by_class[cls]
        n = len(group)
        if n == 0:
            continue
        if n < 3:
            raise DataError(f"class {cls!r} has only {n} samples, needs >= 3 to split")
        order = rng.permutation(n)
        shuffled = [group[i] for i in order]
        n_train = int(np.floor(ratios[0] * n))
        n_val = int(np.floor(ratios[1] * n))
        n_test = int(np.floor(ratios[2] * n))
        leftover = n - (n_train + n_val + n_test)
        for k in range(leftover):
            slot = ("test", "train", "val")[k % 3]
            if slot == "test":
                n_test += 1
            elif slot == "train":
                n_train += 1
            else:
                n_val += 1
        parts[0].extend(shuffled[:n_train])
        parts[1].extend(shuffled[n_train : n_train + n_val])
        parts[2].extend(shuffled[n_train + n_val :])

    return tuple(AnnotatedSet(p, aset.schema) for p in parts)


def oversample(train: AnnotatedSet, targets: dict, seed: int = 0) -> AnnotatedSet:
    """Repeat entries per class up to a target count.

    Each class is repeated cyclically floor(target/n) times plus a seeded
    random sample without replacement of (target mod n) entries. Classes
    absent from ``targets`` pass through unchanged. Never apply this to
    validation or test sets.
    """
    rng = np.random.default_rng(seed)
    by_class: dict = {c: [] for c in train.schema.classes}
    for entry in train.entries:
        by_class[entry[1]].append(entry)

    out = []
    for cls in train.schema.classes:
        group = by_class[cls]
        if cls not in targets or not group:
            out.extend(group)
            continue
        target = int(targets[cls])
        n = len(group)
        if target < n:
            raise DataError(f"oversample target {target} below current count {n} for class {cls!r}")
        repeats, extra = divmod(target, n)
        out.extend(group * repeats)
        if extra:
            picked = rng.choice(n, size=extra, replace=False)
            out.extend(group[i] for i in picked)
    return AnnotatedSet(out, train.schema)


def confusion_from_indices(y_true: np.ndarray, y_pred: np.ndarray,
                           num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def metrics_from_confusion(counts: np.ndarray) -> MetricsReport:
    """Accuracy and per-class/macro P, R, F1 with the 0/0 -> 0 convention."""
    counts = np.asarray(counts, dtype=np.int64)
    total = counts.sum()
    accuracy = float(np.trace(counts) / total) if total else 0.0
    per_class = []
    for k in range(counts.shape[0]):
        tp = counts[k, k]
        fp = counts[:, k].sum() - tp
        fn = counts[k, :].sum() - tp
        precision = float(tp / (tp + fp)) if (tp + fp) else 0.0
        recall = float(tp / (tp + fn)) if (tp + fn) else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        per_class.append((precision, recall, f1))
    arr = np.array(per_class)
    return MetricsReport(
        accuracy=accuracy,
        per_class=per_class,
        macro_precision=float(arr[:, 0].mean()),
        macro_recall=float(arr[:, 1].mean()),
        macro_f1=float(arr[:, 2].mean()),
    )


def evaluate(predictions: list[tuple[str, str]],
             truth: AnnotatedSet) -> tuple[ConfusionMatrix, MetricsReport]:
    """Score predictions against ground truth; ids must match exactly."""
    truth_map = dict(truth.entries)
    if len(truth_map) != len(truth.entries):
        raise DataError("duplicate clip ids in truth set")
    pred_map = dict(predictions)
    if len(pred_map) != len(predictions):
        raise DataError("duplicate clip ids in predictions")
    missing = sorted(set(truth_map) - set(pred_map))
    extra = sorted(set(pred_map) - set(truth_map))
    if missing or extra:
        raise DataError(
            f"prediction ids do not cover truth ids (missing: {missing[:5]}, extra: {extra[:5]})"
        )

    classes = truth.schema.classes
    y_true = np.array([classes.index(truth_map[cid]) for cid in truth_map], dtype=np.int64)
    y_pred = []
    for cid in truth_map:
        label = pred_map[cid]
        if label not in classes:
            raise DataError(f"predicted label {label!r} for {cid} not in schema {truth.schema.name}")
        y_pred.append(classes.index(label))
    cm = confusion_from_indices(y_true, np.array(y_pred, dtype=np.int64), len(classes))
    return ConfusionMatrix(cm, classes), metrics_from_confusion(cm)


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def read_annotations_csv(path) -> tuple[dict, list[tuple[str, str]]]:
    """Read ``clip_path,label`` rows; returns (meta, rows)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"annotations file not found: {path}")
    meta: dict = {}
    rows: list[tuple[str, str]] = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            for token in first.lstrip("# ").split()[1:]:
                if "=" in token:
                    k, v = token.split("=", 1)
                    meta[k] = v
            first = fh.readline()
        if first.strip() != "clip_path,label":
            raise DataError(f"unexpected annotations header in {path}: {first.strip()!r}")
        for rec in csv.reader(fh):
            if not rec:
                continue
            if len(rec) != 2:
                raise DataError(f"malformed annotations row in {path}: {rec!r}")
            rows.append((rec[0], rec[1]))
    return meta, rows


def write_annotations_csv(path, rows: list[tuple[str, str]], meta: dict) -> None:
    parts = " ".join(f"{k}={v}" for k, v in meta.items())
    with open(Path(path), "w", newline="\n") as fh:
        fh.write(f"# dgme-annotations {parts}\n")
        fh.write("clip_path,label\n")
        csv.writer(fh, lineterminator="\n").writerows(rows)


def write_metrics_json(path, report: MetricsReport, class_names, meta: dict) -> None:
    payload = dict(meta)
    payload.update(
        {
            "accuracy": report.accuracy,
            "per_class": [
                {"class": c, "precision": p, "recall": r, "f1": f}
                for c, (p, r, f) in zip(class_names, report.per_class)
            ],
            "macro_precision": report.macro_precision,
            "macro_recall": report.macro_recall,
            "macro_f1": report.macro_f1,
        }
    )
    with open(Path(path), "w", newline="\n") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def write_confusion_csv(path, cm: ConfusionMatrix, meta: dict) -> None:
    parts = " ".join(f"{k}={v}" for k, v in meta.items())
    with open(Path(path), "w", newline="\n") as fh:
        fh.write(f"# dgme-confusion {parts}\n")
        fh.write("true\\pred," + ",".join(cm.class_names) + "\n")
        for name, row in zip(cm.class_names, cm.counts):
            fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
