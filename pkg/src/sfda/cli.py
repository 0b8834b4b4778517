"""Command-line entry point: ``sfda <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis
from .config import AdaptationConfig, load_config
from .data import (DomainDataset, default_suite_spec, export_image_folder, load_image_folder,
                   make_synthetic_suite, resolve_data_root)
from .errors import SFDAError
from .nn_core import Checkpoint
from .pipeline import (ABLATION_MASKS, evaluate, extract, run_ablation, run_stage1, run_stage2, run_stage3)
from .plotting import bar_figure, write_csv
from .pseudo_labels import load_bank

log = logging.getLogger("sfda")


class Workspace:
    """Resolves config, domains and output paths for one invocation."""

    def __init__(self, args):
        config = load_config(args.config) if args.config else AdaptationConfig()
        overrides = dict(_parse_set(s) for s in args.set)
        if args.seed is not None:
            overrides["task.seed"] = args.seed
        self.config = config.override(**overrides) if overrides else config
        self.data_root = resolve_data_root(args.data_root or self.config.data.root)
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._suite = None

    def domain(self, name: str) -> DomainDataset:
        if self.data_root is not None:
            return load_image_folder(self.data_root, name, self.config.data.image_size)
        if self._suite is None:
            self._suite = {d.domain_id: d for d in make_synthetic_suite(self.synthetic_spec())}
        if name not in self._suite:
            raise SFDAError(f"unknown synthetic domain {name!r}; choose from {sorted(self._suite)}")
        return self._suite[name]

    def synthetic_spec(self):
        d = self.config.data
        return default_suite_spec(seed=d.synthetic_seed, magnitude=d.synthetic_magnitude,
                                  samples_per_domain=d.synthetic_samples,
                                  num_targets=len(self.config.task.target_domains))

    def targets(self, names) -> list[str]:
        return list(names) if names else list(self.config.task.target_domains)


def _parse_set(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise SFDAError(f"--set expects key=value, got {text!r}")
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value.strip()


def _load_ckpt(path, ws: Workspace) -> Checkpoint:
    return Checkpoint.load(path, num_classes=ws.config.task.num_classes)


def _summary(ws: Workspace, name: str, rows: list[dict]) -> Path:
    header = list(rows[0]) if rows else []
    path = write_csv(ws.out / f"{name}.csv", header, [[r[h] for h in header] for r in rows])
    print(",".join(header))
    for r in rows:
        print(",".join(str(r[h]) for h in header))
    return path


# ------------------------------------------------------------------ commands

def cmd_make_synthetic(ws: Workspace, args) -> None:
    root = ws.data_root or ws.out / "data"
    for ds in make_synthetic_suite(ws.synthetic_spec()):
        export_image_folder(ds, root)
        print(f"{ds.domain_id}: {len(ds)} images -> {root / ds.domain_id}")


def cmd_train_source(ws: Workspace, args) -> None:
    source = ws.domain(ws.config.task.source_domain)
    ckpt, report = run_stage1(ws.config, source)
    ckpt.save(ws.out / "checkpoints" / "source.pt")
    report.write_jsonl(ws.out / "reports" / "stage1.jsonl")
    if report.records:
        analysis.curve_report(report, ws.out / "figures")
    ws.config.save(ws.out / "config.cfg")
    _summary(ws, "summary_stage1", [{"stage": 1, "domain": source.domain_id,
                                     "holdout_acc": report.final["source_acc"], "config_hash": ws.config.hash()}])


def cmd_adapt_stda(ws: Workspace, args) -> None:
    source_ckpt = _load_ckpt(args.source_ckpt, ws)
    rows = []
    for name in ws.targets(args.target):
        ds = ws.domain(name)
        labels = ds.labels() if ds.has_labels else None
        ckpt, bank, report = run_stage2(ws.config, source_ckpt, ds.unlabeled(), eval_labels=labels,
                                        out_dir=ws.out)
        ckpt.save(ws.out / "checkpoints" / f"teacher_{name}.pt")
        report.write_jsonl(ws.out / "reports" / f"stage2_{name}.jsonl")
        row = {"stage": 2, "domain": name, "source_only_acc": evaluate(source_ckpt, ds)[0] if labels is not None
               else float("nan"), "target_acc": report.final.get("target_acc", float("nan")),
               "pseudo_acc": report.final.get("pseudo_acc", float("nan"))}
        baseline = None
        if args.plr_pair:
            off = ws.config.override(**{"stage2.plr": not ws.config.stage2.plr})
            _, _, baseline = run_stage2(off, source_ckpt, ds.unlabeled(), eval_labels=labels)
            baseline.write_jsonl(ws.out / "reports" / f"stage2_{name}_plr_{'off' if ws.config.stage2.plr else 'on'}.jsonl")
        if labels is not None and report.records:
            cr = analysis.curve_report(report, ws.out / "figures", baseline=baseline,
                                       baseline_label="plr_off" if ws.config.stage2.plr else "plr_on")
            if cr.dominates is not None:
                row["plr_dominates"] = cr.dominates
        rows.append(row)
    ws.config.save(ws.out / "config.cfg")
    _summary(ws, "summary_stage2", rows)


def cmd_distill_mtda(ws: Workspace, args) -> None:
    names = ws.targets(args.target)
    bank_dir = Path(args.banks) if args.banks else ws.out / "banks"
    banks = [load_bank(bank_dir / f"{n}.latest") for n in names]
    datasets = [ws.domain(n) for n in names]
    eval_sets = [d for d in datasets if d.has_labels] or None
    ckpt, report = run_stage3(ws.config, banks, [d.unlabeled() for d in datasets], eval_sets=eval_sets)
    ckpt.save(ws.out / "checkpoints" / "student.pt")
    report.write_jsonl(ws.out / "reports" / "stage3.jsonl")
    if report.records:
        analysis.curve_report(report, ws.out / "figures", name="stage3")
    per = report.final.get("per_domain_acc", {})
    _summary(ws, "summary_stage3", [{"stage": 3, "domain": n, "student_acc": per.get(n, float("nan"))}
                                    for n in names])


def cmd_eval(ws: Workspace, args) -> None:
    ckpt = _load_ckpt(args.ckpt, ws)
    rows = []
    for name in args.domain or ws.targets(None):
        acc, per_class = evaluate(ckpt, ws.domain(name))
        rows.append({"checkpoint": Path(args.ckpt).name, "domain": name, "accuracy": acc,
                     **{f"class_{k}": v for k, v in enumerate(per_class)}})
    _summary(ws, "summary_eval", rows)


def cmd_ablate(ws: Workspace, args) -> None:
    source_ckpt = _load_ckpt(args.source_ckpt, ws)
    masks = [tuple(m.split("+")) if m != "none" else () for m in args.masks] if args.masks else ABLATION_MASKS
    rows = []
    for seed in args.seeds:
        cfg = ws.config.override(**{"task.seed": seed})
        rows += run_ablation(cfg, source_ckpt, ws.domain(args.target), masks)
    analysis.ablation_report(rows, ws.out / "figures", name=f"ablation_{args.target}")
    _summary(ws, "summary_ablation", analysis.summarize_ablation(rows))


def cmd_a_distance(ws: Workspace, args) -> None:
    a, b = ws.domain(args.domain_a), ws.domain(args.domain_b)
    rows = []
    for path in args.ckpt:
        net = _load_ckpt(path, ws).build()
        res = analysis.a_distance(extract(net, a.images())[0], extract(net, b.images())[0],
                                  seed=ws.config.task.seed, domain_pair=(a.domain_id, b.domain_id))
        rows.append({"checkpoint": Path(path).name, "domain_a": a.domain_id, "domain_b": b.domain_id,
                     "classifier_error": res.classifier_error, "a_distance": res.a_distance})
    bar_figure(ws.out / "figures" / f"a_distance_{a.domain_id}_{b.domain_id}", [r["checkpoint"] for r in rows],
               [r["a_distance"] for r in rows], ylabel="A-distance")
    _summary(ws, "summary_a_distance", rows)


def cmd_export_features(ws: Workspace, args) -> None:
    ckpt = _load_ckpt(args.ckpt, ws)
    for name in args.domain:
        path = analysis.export_features(ckpt, ws.domain(name), ws.out / "features" / f"{name}.{args.format}",
                                        args.format)
        print(path)


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfda", description="Source-free domain adaptation toolkit.")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides task.seed")
    p.add_argument("--data-root", help="image-folder root (default: $DATA_ROOT, else the synthetic suite)")
    p.add_argument("--out-dir", default="runs", help="where checkpoints, reports and figures go")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable, e.g. --set stage2.epochs=5")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("make-synthetic", help="write the synthetic suite as image folders").set_defaults(
        func=cmd_make_synthetic)
    sub.add_parser("train-source", help="stage 1 on the labeled source domain").set_defaults(
        func=cmd_train_source)

    s = sub.add_parser("adapt-stda", help="stage 2, one teacher per target domain")
    s.add_argument("--source-ckpt", required=True)
    s.add_argument("--target", nargs="*", help="target domains (default: task.target_domains)")
    s.add_argument("--plr-pair", action="store_true", help="also run with refinement toggled and compare curves")
    s.set_defaults(func=cmd_adapt_stda)

    s = sub.add_parser("distill-mtda", help="stage 3, distill all teachers into one student")
    s.add_argument("--banks", help="directory holding <domain>.latest bank pointers (default: OUT/banks)")
    s.add_argument("--target", nargs="*")
    s.set_defaults(func=cmd_distill_mtda)

    s = sub.add_parser("eval", help="top-1 accuracy of a checkpoint per domain")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--domain", nargs="*")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="stage-2 runs over loss-component masks")
    s.add_argument("--source-ckpt", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--masks", nargs="*", help="e.g. NM NM+Cons NM+Cons+PL none")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("a-distance", help="proxy A-distance between two domains per checkpoint")
    s.add_argument("--ckpt", required=True, nargs="+")
    s.add_argument("--domain-a", required=True)
    s.add_argument("--domain-b", required=True)
    s.set_defaults(func=cmd_a_distance)

    s = sub.add_parser("export-features", help="dump bottleneck features")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--domain", required=True, nargs="+")
    s.add_argument("--format", choices=("csv", "npz"), default="csv")
    s.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(Workspace(args), args)
    except (SFDAError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
