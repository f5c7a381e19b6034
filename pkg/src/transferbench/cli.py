"""Command-line harness.

Subcommands mirror the pipeline stages and compose through a shared run
directory (--out): `teacher build`, `dataset label`, `dataset split`,
`student train`, `attack run`, `eval transfer`, `experiment <rq1..rq4>`,
`report`. Exit codes: 0 ok, 1 configuration error, 2 data error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import DataError, TransferBenchError
from .evaluation import write_results_csv
from .experiments import (
    RunPaths,
    craft_cell,
    ensure_blind_student,
    ensure_corpus,
    ensure_labeled,
    ensure_splits,
    ensure_student,
    ensure_teacher,
    grid_cells,
    parse_config,
    require_splits,
    require_teacher,
    run_experiment,
    student_tag,
    transfer_cell,
    _row_from,
)
from .oracle import seal
from .student import StudentModel, accuracy, random_student, find_architecture


def _common_flags(parser):
    parser.add_argument("--config", "-c", help="experiment config (INI)")
    parser.add_argument("--out", "-o", help="run directory for all artifacts")
    parser.add_argument("--seed", type=int, help="override the config seed list")
    parser.add_argument("--quiet", "-q", action="store_true", help="less chatter")


def _cfg(args, experiment=None):
    return parse_config(args.config, out_override=args.out,
                        seed_override=args.seed, experiment_override=experiment)


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


def cmd_teacher_build(args):
    cfg = _cfg(args)
    paths = RunPaths(cfg.out)
    corpus, teacher_pool, _ = ensure_corpus(cfg, paths)
    teacher = ensure_teacher(cfg, paths, teacher_pool)
    _say(args, f"teacher {teacher.spec.architecture_id} trained on {len(teacher_pool)} "
               f"images; heldout accuracy {teacher.heldout_accuracy:.4f}")
    _say(args, f"artifact: {paths.teacher_dir}")
    return 0


def cmd_dataset_label(args):
    cfg = _cfg(args)
    paths = RunPaths(cfg.out)
    if not os.path.exists(paths.attacker_pool):
        raise DataError(f"missing {paths.attacker_pool}; run `teacher build` first")
    from .datasets import read_labeled_manifest

    attacker_pool = read_labeled_manifest(paths.attacker_pool, cfg.input_format,
                                          provenance="ground-truth")
    oracle = seal(require_teacher(paths))
    labeled = ensure_labeled(cfg, paths, oracle, attacker_pool)
    _say(args, f"labeled {len(labeled)} images -> {paths.labeled}")
    return 0


def cmd_dataset_split(args):
    cfg = _cfg(args)
    paths = RunPaths(cfg.out)
    from .datasets import read_labeled_manifest

    for p in (paths.labeled, paths.corpus_manifest):
        if not os.path.exists(p):
            raise DataError(f"missing {p}; run `dataset label` first")
    labeled = read_labeled_manifest(paths.labeled, cfg.input_format, provenance="oracle:file")
    corpus = read_labeled_manifest(paths.corpus_manifest, cfg.input_format,
                                   provenance="ground-truth")
    train, test, _ = ensure_splits(cfg, paths, labeled, corpus)
    _say(args, f"split: train={len(train)} test={len(test)} -> {paths.data}")
    return 0


def cmd_student_train(args):
    cfg = _cfg(args)
    paths = RunPaths(cfg.out)
    train, test, _ = require_splits(cfg, paths)
    from .datasets import subsample

    rows, seen = [], set()
    for cell in grid_cells(cfg):
        key = (cell.arch, cell.fraction, cell.seed, cell.blind)
        if key in seen:
            continue
        seen.add(key)
        if cell.blind:
            model = ensure_blind_student(cfg, paths, cell.seed)
            n_train = 0
        else:
            model = ensure_student(cfg, paths, train, cell.arch, cell.fraction, cell.seed)
            n_train = len(subsample(train, cell.fraction, seed=cell.seed)
                          if cell.fraction < 1.0 else train)
        acc = accuracy(model, test)
        rows.append((f"{cfg.experiment_id}-{cell.run_id}", cell.arch,
                     f"{cell.fraction:g}", cell.seed, n_train, f"{acc:.6f}"))
        _say(args, f"student {student_tag(cell.arch, cell.fraction, cell.seed, cell.blind)}: "
                   f"accuracy vs oracle labels {acc:.4f}")
    import csv

    with open(paths.students_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_id", "student_arch", "dataset_fraction", "seed",
                         "train_size", "test_accuracy"])
        writer.writerows(rows)
    _say(args, f"student table -> {paths.students_csv}")
    return 0


def _load_cell_student(cfg, paths, cell):
    if cell.blind and cfg.blind_init == "random":
        arch = find_architecture(cell.arch, cfg.input_format, cfg.num_classes)
        return random_student(arch, cfg.input_format, cfg.num_classes, seed=cell.seed)
    tag = student_tag(cell.arch, cell.fraction, cell.seed, cell.blind)
    path = os.path.join(paths.students_dir, f"{tag}.pt")
    if not os.path.exists(path):
        raise DataError(f"missing student model {path}; run `student train` first")
    return StudentModel.load(path)


def cmd_attack_run(args):
    cfg = _cfg(args)
    paths = RunPaths(cfg.out)
    train, test, test_gt = require_splits(cfg, paths)
    oracle = seal(require_teacher(paths))
    for cell in grid_cells(cfg):
        model = _load_cell_student(cfg, paths, cell)
        cell_dir, meta = craft_cell(cfg, paths, cell, model, oracle, test_gt)
        _say(args, f"crafted {meta['T']} adversarial examples -> {cell_dir}")
    return 0


def cmd_eval_transfer(args):
    cfg = _cfg(args)
    paths = RunPaths(cfg.out)
    oracle = seal(require_teacher(paths))
    metas = []
    for cell in grid_cells(cfg):
        cell_dir = os.path.join(paths.attacks_dir, cell.tag())
        if not os.path.exists(os.path.join(cell_dir, "cell.json")):
            raise DataError(f"missing attack artifacts at {cell_dir}; run `attack run` first")
        meta, report = transfer_cell(oracle, cell_dir)
        metas.append((meta, report))
        _say(args, f"{cell.tag()}: p={report.success_rate_str} "
                   f"(Q={report.q_fooled}, T={report.t_correct})")
    metas.sort(key=lambda mr: mr[0]["index"])
    rows = [_row_from(meta, report) for meta, report in metas]
    stats_rows = [(m["run_id"], m["algorithm"], m["eps_label"], m["student_arch"],
                   f"{m['fraction']:g}", m["seed"], "true" if m["blind"] else "false",
                   f"{m['mean_linf']:.8g}", f"{m['max_linf']:.8g}",
                   f"{m['mean_abs_perturbation']:.8g}") for m, _ in metas]
    write_results_csv(rows, paths.results)
    import csv

    with open(paths.attack_stats, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_id", "algorithm", "eps", "student_arch", "dataset_fraction",
                         "seed", "blind", "mean_linf", "max_linf", "mean_abs_perturbation"])
        writer.writerows(stats_rows)
    if not os.path.exists(paths.run_json):
        with open(paths.run_json, "w", encoding="utf-8") as fh:
            json.dump({"experiment_id": cfg.experiment_id, "seeds": list(cfg.seeds)}, fh)
    _say(args, f"results -> {paths.results}")
    return 0


def cmd_experiment(args):
    cfg = _cfg(args, experiment=args.which)
    run_experiment(cfg, quiet=args.quiet)
    return 0


def cmd_report(args):
    out = args.out
    if not out and args.config:
        out = _cfg(args).out
    if not out:
        raise DataError("report needs --out pointing at a finished run directory")
    from .report import emit_report

    result = emit_report(out)
    _say(args, f"summary -> {result['summary']}")
    for p in result["plots"]:
        _say(args, f"plot -> {p}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="transferbench",
                                     description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    teacher = sub.add_parser("teacher", help="teacher oracle stages")
    teacher_sub = teacher.add_subparsers(dest="subcommand", required=True)
    p = teacher_sub.add_parser("build", help="materialize the corpus and train the teacher")
    _common_flags(p)
    p.set_defaults(func=cmd_teacher_build)

    dataset = sub.add_parser("dataset", help="teaching dataset stages")
    dataset_sub = dataset.add_subparsers(dest="subcommand", required=True)
    p = dataset_sub.add_parser("label", help="label the attacker pool through the oracle")
    _common_flags(p)
    p.set_defaults(func=cmd_dataset_label)
    p = dataset_sub.add_parser("split", help="shuffled train/test split of the teaching set")
    _common_flags(p)
    p.set_defaults(func=cmd_dataset_split)

    studentp = sub.add_parser("student", help="substitute model stages")
    student_sub = studentp.add_subparsers(dest="subcommand", required=True)
    p = student_sub.add_parser("train", help="train the students the config grid needs")
    _common_flags(p)
    p.set_defaults(func=cmd_student_train)

    attack = sub.add_parser("attack", help="adversarial example generation")
    attack_sub = attack.add_subparsers(dest="subcommand", required=True)
    p = attack_sub.add_parser("run", help="craft adversarial examples for every grid cell")
    _common_flags(p)
    p.set_defaults(func=cmd_attack_run)

    evalp = sub.add_parser("eval", help="transfer evaluation against the oracle")
    eval_sub = evalp.add_subparsers(dest="subcommand", required=True)
    p = eval_sub.add_parser("transfer", help="replay crafted batches and write results.csv")
    _common_flags(p)
    p.set_defaults(func=cmd_eval_transfer)

    exp = sub.add_parser("experiment", help="run a full sweep end to end")
    exp_sub = exp.add_subparsers(dest="which", required=True)
    for which in ("rq1", "rq2", "rq3", "rq4", "single"):
        p = exp_sub.add_parser(which)
        _common_flags(p)
        p.set_defaults(func=cmd_experiment, which=which)

    p = sub.add_parser("report", help="render plots and a text summary for a run")
    _common_flags(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TransferBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
