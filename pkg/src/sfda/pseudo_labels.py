"""Clustering-based pseudo-labels and their refinement across epochs.

Initial labels come from alternating weighted centroid estimation and cosine
assignment over bottleneck features.  Between epochs, labels are blended with
the previous epoch's through a Jaccard consensus matrix between the two
epochs' class memberships.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateClassError, NumericError, ValidationError

MIN_CLASS_WEIGHT = 1e-12


@dataclass
class CentroidSet:
    centers: np.ndarray
    weights_source: str = "softmax"  # or "hard-assignment"


@dataclass
class ConsensusMatrix:
    raw: np.ndarray
    epoch_pair: tuple[int, int] | None = None

    @property
    def rownorm(self) -> np.ndarray:
        return row_normalize(self.raw)


@dataclass
class PseudoLabelBank:
    domain_id: str
    epoch: int
    sample_keys: list[str]
    hard: np.ndarray
    soft: np.ndarray
    provenance: str = "initial"  # or "refined"

    @property
    def num_classes(self) -> int:
        return self.soft.shape[1]

    def __len__(self):
        return len(self.hard)

    def lookup(self) -> dict[str, int]:
        return {key: i for i, key in enumerate(self.sample_keys)}


def one_hot(labels, K: int) -> np.ndarray:
    return np.eye(K)[np.asarray(labels, dtype=int)]


def weighted_centroids(features, probs, previous: CentroidSet | None = None,
                       weights_source: str = "softmax") -> CentroidSet:
    """Probability-weighted class centers ``c_k = sum_t p_tk f_t / sum_t p_tk``.

    A class whose total weight is below ``MIN_CLASS_WEIGHT`` keeps its center
    from ``previous``; without one, ``DegenerateClassError`` is raised.
    """
    features = np.asarray(features, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if features.ndim != 2 or probs.ndim != 2 or len(features) != len(probs):
        raise ValidationError(f"features {features.shape} and probs {probs.shape} are not aligned")
    mass = probs.sum(axis=0)
    weighted = probs.T @ features
    centers = np.empty_like(weighted)
    for k, m in enumerate(mass):
        if m < MIN_CLASS_WEIGHT:
            if previous is None:
                raise DegenerateClassError(k, float(m))
            centers[k] = previous.centers[k]
        else:
            centers[k] = weighted[k] / m
    return CentroidSet(centers, weights_source)


def cosine_assign(features, centers: CentroidSet | np.ndarray) -> np.ndarray:
    """Hard label of each row: the center with largest cosine similarity.

    Ties go to the lowest class index.
    """
    C = centers.centers if isinstance(centers, CentroidSet) else np.asarray(centers, dtype=float)
    features = np.asarray(features, dtype=float)
    f_norm = np.linalg.norm(features, axis=1)
    c_norm = np.linalg.norm(C, axis=1)
    if (f_norm == 0).any():
        raise NumericError(f"sample {int(np.flatnonzero(f_norm == 0)[0])} has a zero-norm feature")
    if (c_norm == 0).any():
        raise NumericError(f"center {int(np.flatnonzero(c_norm == 0)[0])} has zero norm")
    sim = (features / f_norm[:, None]) @ (C / c_norm[:, None]).T
    return np.argmax(sim, axis=1)


def iterate_pseudo_labels(features, probs, rounds: int = 2) -> tuple[CentroidSet, np.ndarray]:
    """Alternate centroid estimation and cosine assignment ``rounds`` times.

    The first round weights samples by the model's softmax output; later rounds
    use the previous round's hard assignment.
    """
    if rounds < 1:
        raise ValidationError(f"rounds must be >= 1, got {rounds}")
    probs = np.asarray(probs, dtype=float)
    K = probs.shape[1]
    centers = weighted_centroids(features, probs)
    labels = cosine_assign(features, centers)
    for _ in range(rounds - 1):
        centers = weighted_centroids(features, one_hot(labels, K), previous=centers,
                                     weights_source="hard-assignment")
        labels = cosine_assign(features, centers)
    return centers, labels


def consensus_matrix(prev, curr, K: int, epoch_pair=None) -> ConsensusMatrix:
    """Jaccard overlap ``|I_prev(i) & I_curr(j)| / |I_prev(i) | I_curr(j)|`` of class memberships."""
    prev = np.asarray(prev, dtype=int)
    curr = np.asarray(curr, dtype=int)
    if prev.shape != curr.shape:
        raise ValidationError(f"label vectors differ in length: {len(prev)} vs {len(curr)}")
    for name, lab in (("prev", prev), ("curr", curr)):
        if len(lab) and (lab.min() < 0 or lab.max() >= K):
            raise ValidationError(f"{name} labels must lie in [0, {K})")
    inter = np.zeros((K, K))
    np.add.at(inter, (prev, curr), 1)
    n_prev = np.bincount(prev, minlength=K)
    n_curr = np.bincount(curr, minlength=K)
    union = n_prev[:, None] + n_curr[None, :] - inter
    W = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    return ConsensusMatrix(W, epoch_pair)


def row_normalize(W) -> np.ndarray:
    W = np.asarray(W, dtype=float)
    sums = W.sum(axis=1, keepdims=True)
    out = np.full_like(W, 1.0 / W.shape[1])
    np.divide(W, sums, out=out, where=sums > 0)
    return out


def refine_labels(curr_soft, prev_soft, W_rownorm, alpha: float) -> np.ndarray:
    """Blend current labels with the previous epoch's, mapped through the consensus matrix.

    Row ``z`` of the result is ``alpha * curr[z] + (1 - alpha) * W.T @ prev[z]``,
    renormalized to sum to one.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    curr_soft = np.asarray(curr_soft, dtype=float)
    prev_soft = np.asarray(prev_soft, dtype=float)
    out = alpha * curr_soft + (1 - alpha) * prev_soft @ np.asarray(W_rownorm, dtype=float)
    return out / out.sum(axis=1, keepdims=True)


def epoch_update(bank: PseudoLabelBank | None, features, probs, alpha: float = 0.9, *,
                 rounds: int = 2, domain_id: str | None = None, sample_keys=None,
                 out_dir: str | Path | None = None) -> PseudoLabelBank:
    """Produce the next epoch's bank from the model's current features and predictions.

    With no previous bank, the epoch-0 bank holds the one-hot cluster
    assignments.  Otherwise the assignments are refined against the previous
    bank.  The result is written to ``out_dir`` when given.
    """
    probs = np.asarray(probs, dtype=float)
    K = probs.shape[1]
    _, hard = iterate_pseudo_labels(features, probs, rounds)
    curr = one_hot(hard, K)
    if bank is None:
        if sample_keys is None or domain_id is None:
            raise ValidationError("the first epoch needs domain_id and sample_keys")
        new = PseudoLabelBank(domain_id, 0, list(sample_keys), hard, curr, "initial")
    else:
        if len(bank) != len(hard):
            raise ValidationError(f"bank holds {len(bank)} samples, got {len(hard)}")
        W = consensus_matrix(bank.hard, hard, K, (bank.epoch, bank.epoch + 1))
        soft = refine_labels(curr, bank.soft, W.rownorm, alpha)
        new = PseudoLabelBank(bank.domain_id, bank.epoch + 1, bank.sample_keys,
                              np.argmax(soft, axis=1), soft, "refined")
    if out_dir is not None:
        save_bank(new, out_dir)
    return new


def bank_path(out_dir, domain_id: str, epoch: int) -> Path:
    return Path(out_dir) / f"{domain_id}.epoch{epoch:03d}.bank.jsonl"


def save_bank(bank: PseudoLabelBank, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = bank_path(out_dir, bank.domain_id, bank.epoch)
    header = {"domain_id": bank.domain_id, "epoch": bank.epoch, "N": len(bank),
              "K": bank.num_classes, "provenance": bank.provenance}
    tmp = path.with_suffix(".tmp")
    with tmp.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for key, h, s in zip(bank.sample_keys, bank.hard, bank.soft):
            fh.write(json.dumps({"sample_key": key, "hard": int(h), "soft": [float(v) for v in s]}) + "\n")
    tmp.replace(path)
    (out_dir / f"{bank.domain_id}.latest").write_text(path.name + "\n")
    return path


def load_bank(path) -> PseudoLabelBank:
    """Read a bank file, or the latest bank of a domain when given its ``.latest`` pointer."""
    path = Path(path)
    if path.suffix == ".latest":
        path = path.parent / path.read_text().strip()
    with path.open() as fh:
        header = json.loads(fh.readline())
        records = [json.loads(line) for line in fh if line.strip()]
    if len(records) != header["N"]:
        raise ValidationError(f"{path}: header says N={header['N']}, found {len(records)} records")
    soft = np.array([r["soft"] for r in records], dtype=float).reshape(len(records), header["K"])
    return PseudoLabelBank(header["domain_id"], header["epoch"], [r["sample_key"] for r in records],
                           np.array([r["hard"] for r in records], dtype=int), soft, header["provenance"])
