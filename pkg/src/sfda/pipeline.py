"""Three-stage training: source model, per-target source-free teachers, MixUp student."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import objectives as obj
from .config import AdaptationConfig
from .data import AugmentationPair, DomainDataset, UnlabeledView, augment_batch, split_dataset
from .errors import JoinError, ValidationError
from .nn_core import (Checkpoint, NetworkAssembly, forward_features, set_trainable, smooth_labels,
                      source_ce_loss)
from .pseudo_labels import PseudoLabelBank, epoch_update

log = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass
class StageReport:
    stage: int
    config_hash: str
    domain: str = ""
    records: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def add(self, **record) -> dict:
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValidationError("epoch indices must increase")
        record = {"stage": self.stage, "domain": self.domain, **record, "config_hash": self.config_hash}
        self.records.append(record)
        return record

    def loss_trace(self, key="loss_total") -> list[float]:
        return [r[key] for r in self.records if key in r]

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path) -> "StageReport":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not records:
            raise ValidationError(f"{path} holds no records")
        return cls(records[0]["stage"], records[0]["config_hash"], records[0].get("domain", ""), records)


# ------------------------------------------------------------------ helpers

def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(seed)


def build_network(config: AdaptationConfig) -> NetworkAssembly:
    t = config.task
    return NetworkAssembly(t.backbone_id, t.num_classes, t.bottleneck_dim, config.data.image_size,
                           weights_path=t.backbone_weights)


def make_optimizer(net: NetworkAssembly, config: AdaptationConfig) -> torch.optim.SGD:
    o = config.optim
    groups = []
    for name, lr in (("backbone", o.lr * o.backbone_lr_scale), ("bottleneck", o.lr), ("classifier", o.lr)):
        params = [p for p in net.group(name).parameters() if p.requires_grad]
        if params:
            groups.append({"params": params, "lr": lr, "lr0": lr, "name": name})
    if not groups:
        groups = [{"params": [torch.zeros(1, requires_grad=True)], "lr": 0.0, "lr0": 0.0, "name": "none"}]
    return torch.optim.SGD(groups, lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay,
                           nesterov=o.nesterov)


def step_schedule(opt: torch.optim.Optimizer, it: int, max_it: int, config: AdaptationConfig) -> None:
    """Inverse decay ``lr0 * (1 + gamma * p) ** -power`` with progress ``p`` in [0, 1]."""
    p = it / max(max_it, 1)
    decay = (1 + config.optim.gamma * p) ** (-config.optim.power)
    for g in opt.param_groups:
        g["lr"] = g["lr0"] * decay


def batches(rng: np.random.Generator, n: int, batch_size: int, drop_last=True):
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for i in range(0, stop, batch_size):
        yield np.sort(order[i:i + batch_size])


@torch.no_grad()
def extract(net: NetworkAssembly, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bottleneck features and softmax outputs in inference mode."""
    was_training = net.training
    net.eval()
    feats, probs = [], []
    for i in range(0, len(images), EVAL_BATCH):
        f, logits = forward_features(net, torch.as_tensor(images[i:i + EVAL_BATCH]))
        feats.append(f.double().numpy())
        probs.append(torch.softmax(logits.double(), dim=1).numpy())
    net.train(was_training)
    return np.concatenate(feats), np.concatenate(probs)


@torch.no_grad()
def predict(model: NetworkAssembly | Checkpoint, images) -> np.ndarray:
    """Top-1 class for each image.  Takes no domain argument by design."""
    net = model.build() if isinstance(model, Checkpoint) else model
    _, probs = extract(net, np.asarray(images, dtype=np.float32))
    return probs.argmax(axis=1)


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float((pred == labels).mean()) if len(labels) else float("nan")


def evaluate(ckpt: Checkpoint | NetworkAssembly, dataset: DomainDataset) -> tuple[float, np.ndarray]:
    """Top-1 accuracy and per-class accuracies (NaN for classes absent from ``dataset``)."""
    K = ckpt.meta["num_classes"] if isinstance(ckpt, Checkpoint) else ckpt.num_classes
    if dataset.num_classes != K:
        raise ValidationError(f"dataset has K={dataset.num_classes}, model has K={K}")
    labels = dataset.labels()
    pred = predict(ckpt, dataset.images())
    per_class = np.array([accuracy(pred[labels == k], labels[labels == k]) if (labels == k).any()
                          else np.nan for k in range(K)])
    return accuracy(pred, labels), per_class


# ------------------------------------------------------------------ stage 1

def run_stage1(config: AdaptationConfig, source: DomainDataset) -> tuple[Checkpoint, StageReport]:
    """Train backbone, bottleneck and classifier on labeled source data with smoothed labels."""
    if not source.has_labels:
        raise ValidationError(f"source domain {source.domain_id!r} has no labels")
    s1 = config.stage1
    rng = seed_everything(config.task.seed)
    net = build_network(config)
    if source.num_classes != net.num_classes:
        raise ValidationError(f"source has K={source.num_classes}, config has K={net.num_classes}")
    train, holdout = split_dataset(source, s1.holdout, config.task.seed)
    report = StageReport(1, config.hash(), source.domain_id)
    weak = AugmentationPair(tuple(config.stage2.weak_ops), ()).weak
    labels = torch.as_tensor(train.labels())
    targets = torch.as_tensor(smooth_labels(np.eye(net.num_classes)[train.labels()], s1.smoothing),
                              dtype=torch.float32)
    opt = make_optimizer(net, config)
    steps_per_epoch = max(len(train) // s1.batch_size, 1)
    max_it, it = s1.epochs * steps_per_epoch, 0
    for epoch in range(s1.epochs):
        t0 = time.perf_counter()
        net.train()
        losses, correct = [], 0
        for idx in batches(rng, len(train), s1.batch_size):
            step_schedule(opt, it, max_it, config)
            x = augment_batch(train.images(idx), weak, rng)
            logits = net(x)
            loss = source_ce_loss(logits, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            losses.append(loss.item())
            correct += int((logits.argmax(1) == labels[idx]).sum())
        holdout_acc = evaluate(net, holdout)[0] if len(holdout) else float("nan")
        report.add(epoch=epoch, loss_total=float(np.mean(losses)), train_acc=correct / max(len(train), 1),
                   source_acc=holdout_acc, wall_time=time.perf_counter() - t0)
        log.info("stage1 epoch %d loss %.4f holdout acc %.3f", epoch, np.mean(losses), holdout_acc)
    report.final["source_acc"] = evaluate(net, holdout)[0] if len(holdout) else float("nan")
    ckpt = Checkpoint.from_assembly(net, stage=1, source_domain=source.domain_id, target_domain=None,
                                    epoch=s1.epochs, config_hash=config.hash())
    return ckpt, report


# ------------------------------------------------------------------ stage 2

def _stage2_losses(net, xw, xs, soft_targets, tracker, config, weights):
    logits = net(torch.cat([xw, xs]))
    logits_w, logits_s = logits[:len(xw)], logits[len(xw):]
    probs_w = torch.softmax(logits_w, dim=1)
    probs_s = torch.softmax(logits_s, dim=1)
    zero = logits.new_zeros(())
    if config.stage2.im_baseline:
        nm = obj.im_loss(probs_w) if weights.lambda_nm else zero
    else:
        nm = obj.nm_loss(probs_w) if weights.lambda_nm else zero
    pl = obj.pseudo_ce_loss(logits_w, soft_targets) if weights.lambda_pl else zero
    if weights.lambda_cons:
        global_mean = tracker.update(probs_w)
        cons = obj.consistency_loss(probs_w, probs_s, global_mean, config.stage2.weak_normalization)
    else:
        cons = zero
    return nm, pl, cons, probs_w


def run_stage2(config: AdaptationConfig, source_ckpt: Checkpoint, target: UnlabeledView, *,
               eval_labels=None, out_dir=None, log_norms: bool = False):
    """Source-free adaptation of one target domain.

    The classifier stays frozen; backbone and bottleneck start from the source
    model.  Each epoch first re-clusters pseudo-labels from a full pass, then
    minimizes the weighted NM + pseudo-label + consistency objective.
    ``eval_labels`` only feeds the report and never reaches a loss.
    """
    if not isinstance(target, UnlabeledView):
        raise ValidationError("stage 2 takes an unlabeled view of the target domain")
    if source_ckpt.meta.get("stage") != 1:
        raise ValidationError(f"stage 2 needs a stage-1 checkpoint, got stage {source_ckpt.meta.get('stage')}")
    if source_ckpt.meta["num_classes"] != target.num_classes:
        raise ValidationError(f"checkpoint has K={source_ckpt.meta['num_classes']}, "
                              f"target has K={target.num_classes}")
    s2 = config.stage2
    weights = config.loss.weights()
    rng = seed_everything(config.task.seed)
    net = source_ckpt.build()
    set_trainable(net, {"backbone": True, "bottleneck": True, "classifier": False})
    opt = make_optimizer(net, config)
    aug = AugmentationPair(tuple(s2.weak_ops), tuple(s2.strong_ops))
    images = target.images()
    K = net.num_classes
    tracker = obj.ExpectationTracker(K, s2.ema_momentum)
    report = StageReport(2, config.hash(), target.domain_id)
    alpha = s2.plr_alpha if s2.plr else 1.0
    bank_dir = Path(out_dir) / "banks" if out_dir else None
    null_objective = not (weights.lambda_nm or weights.lambda_pl or weights.lambda_cons)

    def pseudo_update(bank, feats, probs):
        return epoch_update(bank, feats, probs, alpha, rounds=s2.cluster_rounds, domain_id=target.domain_id,
                            sample_keys=target.sample_keys, out_dir=bank_dir)

    feats, probs = extract(net, images)
    bank = None
    steps_per_epoch = max(len(target) // s2.batch_size, 1)
    max_it, it = s2.epochs * steps_per_epoch, 0
    for epoch in range(s2.epochs):
        t0 = time.perf_counter()
        bank = pseudo_update(bank, feats, probs)
        tracker.reset(torch.as_tensor(probs, dtype=torch.float32))
        soft = torch.as_tensor(bank.soft, dtype=torch.float32)
        sums = {"loss_nm": 0.0, "loss_pl": 0.0, "loss_cons": 0.0, "loss_total": 0.0}
        n_steps = 0
        net.train()
        for idx in ([] if null_objective else batches(rng, len(target), s2.batch_size)):
            step_schedule(opt, it, max_it, config)
            x = torch.as_tensor(images[idx])
            xw = augment_batch(x, aug.weak, rng)
            xs = augment_batch(x, aug.strong, rng)
            nm, pl, cons, probs_w = _stage2_losses(net, xw, xs, soft[idx], tracker, config, weights)
            loss = obj.total_loss(nm, pl, cons, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            n_steps += 1
            for key, val in zip(sums, (nm, pl, cons, loss)):
                sums[key] += float(val.detach())
            if log_norms:
                fro, nuc, rank = obj.nuclear_norm_check(probs_w)
                log.debug(json.dumps({"step": it, "fro": fro, "nuc": nuc, "rank": rank}))
        feats, probs = extract(net, images)
        record = {k: v / max(n_steps, 1) for k, v in sums.items()}
        if eval_labels is not None:
            record["pseudo_acc"] = accuracy(bank.hard, eval_labels)
            record["target_acc"] = accuracy(probs.argmax(1), eval_labels)
        report.add(epoch=epoch, **record, wall_time=time.perf_counter() - t0)
        log.info("stage2 %s epoch %d %s", target.domain_id, epoch,
                 {k: round(v, 4) for k, v in record.items()})
    bank = pseudo_update(bank, feats, probs)
    if eval_labels is not None:
        report.final.update(pseudo_acc=accuracy(bank.hard, eval_labels),
                            target_acc=accuracy(probs.argmax(1), eval_labels))
    ckpt = Checkpoint.from_assembly(net, stage=2, source_domain=source_ckpt.meta.get("source_domain"),
                                    target_domain=target.domain_id, epoch=s2.epochs,
                                    config_hash=config.hash())
    return ckpt, bank, report


# ------------------------------------------------------------------ stage 3

def _join(bank: PseudoLabelBank, view: UnlabeledView) -> np.ndarray:
    lookup = bank.lookup()
    rows = []
    for key in view.sample_keys:
        if key not in lookup:
            raise JoinError(f"no pseudo-label for sample {key!r} in bank of domain {bank.domain_id!r}")
        rows.append(lookup[key])
    return bank.soft[rows]


def run_stage3(config: AdaptationConfig, teacher_banks: list[PseudoLabelBank], targets: list[UnlabeledView],
               *, eval_sets: list[DomainDataset] | None = None):
    """Distill all teachers' pseudo-labels into one student through MixUp across domains."""
    if len(teacher_banks) != len(targets) or not targets:
        raise ValidationError("stage 3 needs exactly one bank per target domain")
    for bank, view in zip(teacher_banks, targets):
        if bank.domain_id != view.domain_id:
            raise ValidationError(f"bank for {bank.domain_id!r} paired with domain {view.domain_id!r}")
    s3 = config.stage3
    rng = seed_everything(config.task.seed)
    student = build_network(config)
    if s3.student_weights:
        Checkpoint.load(s3.student_weights).load_into(student)
    images = [v.images() for v in targets]
    labels = [torch.as_tensor(_join(b, v), dtype=torch.float32) for b, v in zip(teacher_banks, targets)]
    sizes = np.array([len(v) for v in targets])
    weak = AugmentationPair(tuple(config.stage2.weak_ops), ()).weak
    opt = make_optimizer(student, config)
    report = StageReport(3, config.hash(), "+".join(v.domain_id for v in targets))
    B = s3.batch_size
    steps_per_epoch = max(int(sizes.sum()) // B, 1)
    max_it, it = s3.epochs * steps_per_epoch, 0

    def draw(n):
        dom = rng.integers(0, len(targets), size=n)
        idx = np.array([rng.integers(0, sizes[d]) for d in dom])
        x = np.stack([images[d][i] for d, i in zip(dom, idx)])
        y = torch.stack([labels[d][i] for d, i in zip(dom, idx)])
        return augment_batch(x, weak, rng), y

    for epoch in range(s3.epochs):
        t0 = time.perf_counter()
        student.train()
        losses = []
        for _ in range(steps_per_epoch):
            step_schedule(opt, it, max_it, config)
            x_i, y_i = draw(B)
            x_j, y_j = draw(B)
            if s3.fixed_lambda is not None:
                lam = torch.full((B,), float(s3.fixed_lambda))
            else:
                c = s3.mixup_concentration
                lam = torch.as_tensor(rng.beta(c, c, size=B), dtype=torch.float32)
            x_mix = lam[:, None, None, None] * x_i + (1 - lam[:, None, None, None]) * x_j
            loss = obj.mkd_loss(student(x_mix), y_i, y_j, lam)
            opt.zero_grad()
            loss.backward()
            opt.step()
            it += 1
            losses.append(loss.item())
        record = {"loss_total": float(np.mean(losses))}
        if eval_sets is not None:
            accs = [evaluate(student, ds)[0] for ds in eval_sets]
            record["target_acc"] = float(np.mean(accs))
        report.add(epoch=epoch, **record, wall_time=time.perf_counter() - t0)
        log.info("stage3 epoch %d %s", epoch, record)
    if eval_sets is not None:
        report.final["per_domain_acc"] = {ds.domain_id: evaluate(student, ds)[0] for ds in eval_sets}
        report.final["target_acc"] = float(np.mean(list(report.final["per_domain_acc"].values())))
    ckpt = Checkpoint.from_assembly(student, stage=3, source_domain=None,
                                    target_domain=[v.domain_id for v in targets], epoch=s3.epochs,
                                    config_hash=config.hash())
    return ckpt, report


# ------------------------------------------------------------------ ablation

ABLATION_MASKS = (
    (),
    ("PL",),
    ("Cons",),
    ("NM",),
    ("NM", "Cons"),
    ("NM", "PL"),
    ("Cons", "PL"),
    ("NM", "Cons", "PL"),
)


def masked_config(config: AdaptationConfig, mask) -> AdaptationConfig:
    unknown = set(mask) - {"NM", "Cons", "PL"}
    if unknown:
        raise ValidationError(f"unknown loss component(s) {sorted(unknown)}")
    l = config.loss
    return config.override(**{"loss.lambda_nm": l.lambda_nm if "NM" in mask else 0.0,
                              "loss.lambda_pl": l.lambda_pl if "PL" in mask else 0.0,
                              "loss.lambda_cons": l.lambda_cons if "Cons" in mask else 0.0})


def run_ablation(config: AdaptationConfig, source_ckpt: Checkpoint, target: DomainDataset,
                 masks=ABLATION_MASKS) -> list[dict]:
    """One stage-2 run per loss-component mask; returns rows of ``{mask, accuracy}``."""
    rows = []
    labels = target.labels()
    for mask in masks:
        _, _, report = run_stage2(masked_config(config, mask), source_ckpt, target.unlabeled(),
                                  eval_labels=labels)
        if "target_acc" in report.final:
            acc = report.final["target_acc"]
        else:
            acc = evaluate(source_ckpt, target)[0]
        rows.append({"NM": "NM" in mask, "Cons": "Cons" in mask, "PL": "PL" in mask,
                     "target": target.domain_id, "seed": config.task.seed, "accuracy": acc})
    return rows
