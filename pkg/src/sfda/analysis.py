"""Feature-level diagnostics: proxy A-distance, feature dumps, and training curves."""
from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .data import DomainDataset, UnlabeledView
from .errors import ValidationError
from .nn_core import Checkpoint
from .pipeline import StageReport, extract
from .plotting import bar_figure, line_figure, write_csv

MIN_DOMAIN_SAMPLES = 20


@dataclass(frozen=True)
class ADistanceResult:
    domain_pair: tuple[str, str]
    classifier_error: float
    a_distance: float
    test_fraction: float
    seed: int
    repeat_errors: tuple[float, ...] = ()

    @property
    def train_fraction(self) -> float:
        return 1.0 - self.test_fraction


def _domain_features(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"{name} must be an N x D matrix, got shape {x.shape}")
    if len(x) < MIN_DOMAIN_SAMPLES:
        raise ValidationError(f"{name} has {len(x)} samples; at least {MIN_DOMAIN_SAMPLES} are needed")
    if not np.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    return x


def a_distance(feats_a, feats_b, split: float = 0.2, seed: int = 0, n_repeats: int = 5,
               domain_pair=("a", "b")) -> ADistanceResult:
    """Proxy A-distance ``2 (1 - 2 eps)`` from a linear domain classifier.

    Both domains are subsampled to the same size, split ``1 - split`` / ``split``
    per domain, and the held-out error is averaged over ``n_repeats`` splits
    before clipping to [0, 0.5].
    """
    a = _domain_features(feats_a, "feats_a")
    b = _domain_features(feats_b, "feats_b")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if not 0 < split < 1:
        raise ValidationError(f"split must lie in (0, 1), got {split}")
    if n_repeats < 1:
        raise ValidationError("n_repeats must be >= 1")
    n = min(len(a), len(b))
    n_test = min(max(int(round(split * n)), 1), n - 1)
    errors = []
    for r in range(n_repeats):
        rng = np.random.default_rng([seed, r])
        pa, pb = rng.permutation(len(a))[:n], rng.permutation(len(b))[:n]
        x_train = np.vstack([a[pa[n_test:]], b[pb[n_test:]]])
        x_test = np.vstack([a[pa[:n_test]], b[pb[:n_test]]])
        y_train = np.repeat([0, 1], n - n_test)
        y_test = np.repeat([0, 1], n_test)
        clf = make_pipeline(StandardScaler(), LogisticRegression(C=1.0, max_iter=5000))
        clf.fit(x_train, y_train)
        errors.append(float(np.mean(clf.predict(x_test) != y_test)))
    eps = float(np.clip(np.mean(errors), 0.0, 0.5))
    return ADistanceResult(tuple(domain_pair), eps, 2.0 * (1.0 - 2.0 * eps), split, seed, tuple(errors))


# ------------------------------------------------------------------ feature dumps

@dataclass
class FeatureDump:
    domain_id: str
    sample_keys: list[str]
    features: np.ndarray
    labels: np.ndarray  # -1 where no evaluation label exists
    checkpoint_hash: str

    @property
    def header(self) -> dict:
        N, D = self.features.shape
        return {"domain_id": self.domain_id, "N": N, "D": D, "checkpoint_hash": self.checkpoint_hash}


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    # np.savez stamps the wall clock into the zip entries; fixed dates keep exports bitwise reproducible
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), _npy_bytes(arr))


def export_features(ckpt: Checkpoint, dataset: DomainDataset | UnlabeledView, path, fmt: str = "csv", *,
                    backbone_id: str | None = None) -> Path:
    """Write bottleneck features for every sample of ``dataset`` as CSV or npz."""
    if fmt not in ("csv", "npz"):
        raise ValidationError(f"unknown feature format {fmt!r}; use 'csv' or 'npz'")
    if backbone_id is not None and ckpt.meta["backbone_id"] != backbone_id:
        raise ValidationError(f"checkpoint backbone {ckpt.meta['backbone_id']!r} is not {backbone_id!r}")
    if dataset.num_classes != ckpt.meta["num_classes"]:
        raise ValidationError(f"dataset has K={dataset.num_classes}, checkpoint has K={ckpt.meta['num_classes']}")
    feats, _ = extract(ckpt.build(), dataset.images())
    has_labels = isinstance(dataset, DomainDataset) and dataset.has_labels
    labels = dataset.labels() if has_labels else np.full(len(feats), -1)
    dump = FeatureDump(dataset.domain_id, list(dataset.sample_keys), feats, np.asarray(labels, np.int64),
                       ckpt.digest())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "npz":
        _write_npz(path, {"header": np.array(json.dumps(dump.header, sort_keys=True)),
                          "sample_keys": np.array(dump.sample_keys), "features": dump.features,
                          "labels": dump.labels})
        return path
    D = feats.shape[1]
    with path.open("w", newline="") as fh:
        fh.write("# " + json.dumps(dump.header, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["sample_key", *(f"f{j}" for j in range(D)), "label"])
        for key, row, lab in zip(dump.sample_keys, feats, dump.labels):
            w.writerow([key, *map(repr, row.tolist()), int(lab)])
    return path


def load_feature_dump(path) -> FeatureDump:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            keys, feats, labels = z["sample_keys"].tolist(), z["features"], z["labels"]
    else:
        with path.open(newline="") as fh:
            first = fh.readline()
            if not first.startswith("# "):
                raise ValidationError(f"{path} lacks the feature-dump header line")
            header = json.loads(first[2:])
            rows = list(csv.reader(fh))[1:]
        keys = [r[0] for r in rows]
        feats = np.array([[float(v) for v in r[1:-1]] for r in rows], dtype=np.float64)
        feats = feats.reshape(len(rows), header["D"])
        labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if len(keys) != header["N"]:
        raise ValidationError(f"{path} header says N={header['N']} but holds {len(keys)} rows")
    return FeatureDump(header["domain_id"], keys, feats, labels, header["checkpoint_hash"])


# ------------------------------------------------------------------ curves

@dataclass
class CurveReport:
    csv_path: Path
    figures: list[Path] = field(default_factory=list)
    dominates: bool | None = None  # set only when a baseline report is given


META_KEYS = ("epoch", "stage", "domain", "config_hash")


def _columns(report: StageReport) -> list[str]:
    cols = []
    for r in report.records:
        for k, v in r.items():
            if k not in META_KEYS and k not in cols and isinstance(v, (int, float)):
                cols.append(k)
    return cols


def curve_dominates(report: StageReport, baseline: StageReport, key: str = "pseudo_acc") -> bool:
    """True if ``report`` is at least ``baseline`` on ``key`` at every shared epoch and at the end."""
    ours = {r["epoch"]: r[key] for r in report.records if key in r}
    theirs = {r["epoch"]: r[key] for r in baseline.records if key in r}
    shared = sorted(set(ours) & set(theirs))
    if not shared:
        raise ValidationError(f"reports share no epochs with {key!r}")
    ok = all(ours[e] >= theirs[e] for e in shared)
    if key in report.final and key in baseline.final:
        ok = ok and report.final[key] >= baseline.final[key]
    return ok


def curve_report(report: StageReport, out_dir, *, name: str | None = None,
                 baseline: StageReport | None = None, baseline_label: str = "baseline") -> CurveReport:
    """Per-epoch CSV of every numeric field plus accuracy and loss plots."""
    if not report.records:
        raise ValidationError("report has no records")
    out_dir = Path(out_dir)
    stem = name or f"stage{report.stage}_{report.domain or 'all'}"
    cols = _columns(report)
    epochs = [r["epoch"] for r in report.records]
    result = CurveReport(write_csv(out_dir / f"{stem}.csv", ["epoch", *cols],
                                   [[r["epoch"], *(r.get(c, float("nan")) for c in cols)]
                                    for r in report.records]))

    def series(rep, keys):
        return {k: [r.get(k, float("nan")) for r in rep.records] for k in keys if any(k in r for r in rep.records)}

    acc = series(report, ("target_acc", "pseudo_acc", "source_acc"))
    if acc:
        result.figures.append(line_figure(out_dir / f"{stem}_accuracy", epochs, acc, ylabel="accuracy")[0])
    losses = series(report, [c for c in cols if c.startswith("loss_")])
    if losses:
        result.figures.append(line_figure(out_dir / f"{stem}_losses", epochs, losses, ylabel="loss")[0])
    if baseline is not None:
        result.dominates = curve_dominates(report, baseline)
        shared = [e for e in epochs if e in {r["epoch"] for r in baseline.records}]
        ours = {r["epoch"]: r for r in report.records}
        theirs = {r["epoch"]: r for r in baseline.records}
        pair = {}
        for key in ("pseudo_acc", "target_acc"):
            if all(key in ours[e] and key in theirs[e] for e in shared):
                pair[key] = [ours[e][key] for e in shared]
                pair[f"{key}_{baseline_label}"] = [theirs[e][key] for e in shared]
        result.figures.append(line_figure(out_dir / f"{stem}_vs_{baseline_label}", shared, pair,
                                          ylabel="accuracy")[0])
    return result


def summarize_ablation(rows: list[dict]) -> list[dict]:
    """Mean and spread of accuracy per loss mask over seeds."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["NM"], r["Cons"], r["PL"]), []).append(r["accuracy"])
    out = []
    for (nm, cons, pl), accs in groups.items():
        label = "+".join(n for n, on in (("NM", nm), ("Cons", cons), ("PL", pl)) if on) or "source-only"
        out.append({"mask": label, "NM": nm, "Cons": cons, "PL": pl, "n": len(accs),
                    "mean": float(np.mean(accs)), "std": float(np.std(accs))})
    return out


def ablation_report(rows: list[dict], out_dir, name: str = "ablation") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    write_csv(out_dir / f"{name}_runs.csv", ["target", "seed", "NM", "Cons", "PL", "accuracy"],
              [[r["target"], r["seed"], r["NM"], r["Cons"], r["PL"], r["accuracy"]] for r in rows])
    summary = summarize_ablation(rows)
    return bar_figure(out_dir / name, [s["mask"] for s in summary], [s["mean"] for s in summary],
                      errors=[s["std"] for s in summary], ylabel="target accuracy")
