"""Experiment harness: wires corpus -> teacher -> labeling -> students ->
attacks -> evaluation, sweeping the grid that each experiment id defines.

Experiment ids:

* ``rq1``    — student capacity sweep (all catalog variants x seeds) at one
  attack operating point.
* ``rq2``    — teaching-set size sweep (fractions x seeds); fraction 0.0 is
  the blind baseline.
* ``rq3``    — attack sweep (algorithms x eps x seeds) for one student.
* ``rq4``    — trained student vs blind baseline at the recommended
  operating point (mifgsm, eps 12/255).
* ``single`` — one cell.

Configs are flat INI (sections + key=value) and are echoed verbatim into
the run manifest. Results land in ``results.csv`` (one row per grid cell,
deterministic order, byte-identical across reruns of the same config),
with per-student accuracies in ``students.csv`` and perturbation sizes in
``attack_stats.csv``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import __version__
from .attacks import ALGORITHMS, AttackConfig, load_adversarial_batch, run_attack, save_adversarial_batch
from .corpora import CORPUS_KINDS, build_corpus
from .datasets import (
    InputFormat,
    LabeledDataset,
    SplitConfig,
    label_with_oracle,
    read_labeled_manifest,
    split,
    subsample,
    write_labeled_manifest,
)
from .errors import ConfigurationError, DataError
from .evaluation import result_row, select_correct, transfer_evaluate, write_results_csv
from .oracle import OracleHandle, TeacherArtifact, TeacherSpec, build_teacher, seal
from .student import (
    StudentModel,
    TrainConfig,
    accuracy,
    find_architecture,
    random_student,
    save_history_csv,
    train_student,
)

EXPERIMENT_IDS = ("rq1", "rq2", "rq3", "rq4", "single")
_ITERATIVE = ("bim", "pgd", "tpgd", "mifgsm")

OPERATING_POINT = ("mifgsm", "12/255")  # recommended default: strongest sweep algorithm


@dataclass(frozen=True)
class EpsSpec:
    label: str
    value: float

    @classmethod
    def parse(cls, text):
        text = text.strip()
        try:
            value = float(Fraction(text))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"bad eps value {text!r}: {exc}") from None
        if not (0.0 <= value <= 1.0):
            raise ConfigurationError(f"eps must be in [0,1], got {text}")
        return cls(text, value)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    seeds: tuple
    out: str
    # teacher
    corpus: str
    teacher_architecture: str
    num_classes: int
    input_format: InputFormat
    teacher_train_seed: int
    pool_ratio: float
    pool_seed: int
    shapes_per_class: int
    # dataset
    train_ratio: float
    shuffle_seed: int
    fractions: tuple
    # students
    architectures: tuple
    epochs: int
    batch_size: int
    learning_rate: float
    # attack
    algorithms: tuple
    eps_list: tuple
    steps: int
    mu: float
    random_start: bool
    # blind
    blind_init: str
    # run
    cache_dir: str
    raw_text: str = field(repr=False, default="")

    def train_config(self, seed):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=seed)

    def attack_config(self, algorithm, eps, seed):
        return AttackConfig(
            algorithm, eps,
            steps=self.steps if algorithm in _ITERATIVE else None,
            mu=self.mu if algorithm == "mifgsm" else None,
            random_start=self.random_start, seed=seed,
        ).resolved()


def _split_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def parse_config(path, out_override=None, seed_override=None, experiment_override=None):
    """Parse a flat INI experiment config; CLI overrides win where given."""
    if not path:
        raise ConfigurationError("missing required field: config (pass --config <path>)")
    if not os.path.exists(path):
        raise ConfigurationError(f"config path does not exist: {path}")
    with open(path, encoding="utf-8") as fh:
        raw_text = fh.read()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string(raw_text)

    exp = cp["experiment"] if cp.has_section("experiment") else {}
    experiment_id = experiment_override or exp.get("id", "single")
    if experiment_id not in EXPERIMENT_IDS:
        raise ConfigurationError(f"experiment id must be one of {EXPERIMENT_IDS}, got {experiment_id!r}")
    if seed_override is not None:
        seeds = (int(seed_override),)
    else:
        seeds = tuple(int(s) for s in _split_list(exp.get("seeds", "7")))
    if not seeds:
        raise ConfigurationError("missing required field: experiment.seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigurationError(f"experiment.seeds must be distinct, got {seeds}")
    out = out_override or exp.get("out", "")
    if not out:
        raise ConfigurationError("missing required field: out (pass --out <dir>)")

    t = cp["teacher"] if cp.has_section("teacher") else {}
    corpus = t.get("corpus", "digits")
    if corpus not in CORPUS_KINDS and not os.path.exists(corpus):
        raise ConfigurationError(
            f"teacher.corpus must be one of {CORPUS_KINDS} or an existing manifest, got {corpus!r}"
        )
    fmt = InputFormat(int(t.get("height", 16)), int(t.get("width", 16)), int(t.get("channels", 1)))

    d = cp["dataset"] if cp.has_section("dataset") else {}
    fractions = tuple(float(f) for f in _split_list(d.get("fractions", "1.0")))
    if not fractions:
        raise ConfigurationError("missing required field: dataset.fractions")
    for f in fractions:
        if not (0.0 <= f <= 1.0):
            raise ConfigurationError(f"dataset.fractions entries must be in [0,1], got {f}")

    s = cp["student"] if cp.has_section("student") else {}
    architectures = tuple(_split_list(s.get("architectures", "deep-s")))
    if not architectures:
        raise ConfigurationError("missing required field: student.architectures")

    a = cp["attack"] if cp.has_section("attack") else {}
    algorithms = tuple(_split_list(a.get("algorithms", OPERATING_POINT[0])))
    for algo in algorithms:
        if algo not in ALGORITHMS:
            raise ConfigurationError(f"attack.algorithms entry {algo!r} not in {ALGORITHMS}")
    if not algorithms:
        raise ConfigurationError("missing required field: attack.algorithms")
    eps_list = tuple(EpsSpec.parse(e) for e in _split_list(a.get("eps", OPERATING_POINT[1])))
    if not eps_list:
        raise ConfigurationError("missing required field: attack.eps")

    b = cp["blind"] if cp.has_section("blind") else {}
    blind_init = b.get("init", "random")
    if blind_init not in ("random", "generic"):
        raise ConfigurationError(f"blind.init must be random or generic, got {blind_init!r}")

    r = cp["run"] if cp.has_section("run") else {}

    return ExperimentConfig(
        experiment_id=experiment_id,
        seeds=seeds,
        out=out,
        corpus=corpus,
        teacher_architecture=t.get("architecture", "convnet3"),
        num_classes=int(t.get("num_classes", 10)),
        input_format=fmt,
        teacher_train_seed=int(t.get("train_seed", 1)),
        pool_ratio=float(t.get("pool_ratio", 0.5)),
        pool_seed=int(t.get("pool_seed", 1234)),
        shapes_per_class=int(t.get("per_class", 120)),
        train_ratio=float(d.get("train_ratio", 0.8)),
        shuffle_seed=int(d.get("shuffle_seed", 5)),
        fractions=fractions,
        architectures=architectures,
        epochs=int(s.get("epochs", 30)),
        batch_size=int(s.get("batch_size", 64)),
        learning_rate=float(s.get("learning_rate", 0.001)),
        algorithms=algorithms,
        eps_list=eps_list,
        steps=int(a.get("steps", 10)),
        mu=float(a.get("mu", 1.0)),
        random_start=a.get("random_start", "true").lower() in ("true", "1", "yes"),
        blind_init=blind_init,
        cache_dir=r.get("cache_dir", ""),
        raw_text=raw_text,
    )


# ---------------------------------------------------------------------------
# run directory layout and manifest


class RunPaths:
    def __init__(self, out):
        self.out = os.path.abspath(out)
        self.data = os.path.join(self.out, "data")
        self.corpus_dir = os.path.join(self.data, "corpus")
        self.generic_dir = os.path.join(self.data, "generic")
        self.teacher_dir = os.path.join(self.out, "teacher")
        self.students_dir = os.path.join(self.out, "students")
        self.attacks_dir = os.path.join(self.out, "attacks")
        self.plots_dir = os.path.join(self.out, "plots")
        self.corpus_manifest = os.path.join(self.data, "corpus.csv")
        self.teacher_pool = os.path.join(self.data, "teacher_pool.csv")
        self.attacker_pool = os.path.join(self.data, "attacker_pool.csv")
        self.labeled = os.path.join(self.data, "labeled.csv")
        self.labeled_meta = os.path.join(self.data, "labeled.meta.json")
        self.train = os.path.join(self.data, "train.csv")
        self.test = os.path.join(self.data, "test.csv")
        self.test_groundtruth = os.path.join(self.data, "test_groundtruth.csv")
        self.results = os.path.join(self.out, "results.csv")
        self.students_csv = os.path.join(self.out, "students.csv")
        self.attack_stats = os.path.join(self.out, "attack_stats.csv")
        self.manifest = os.path.join(self.out, "manifest.txt")
        self.config_echo = os.path.join(self.out, "config.echo.ini")
        self.run_json = os.path.join(self.out, "run.json")

    def ensure(self):
        for d in (self.out, self.data, self.teacher_dir, self.students_dir, self.attacks_dir):
            os.makedirs(d, exist_ok=True)


@dataclass
class RunManifest:
    out: str
    config_text: str
    version: str = __version__
    stages: list = field(default_factory=list)  # (name, seconds)
    artifacts: list = field(default_factory=list)
    error: str = ""

    def add_stage(self, name, seconds, artifacts=()):
        self.stages.append((name, seconds))
        for a in artifacts:
            if a not in self.artifacts:
                self.artifacts.append(a)

    def write(self, path):
        lines = [f"tool_version = {self.version}", f"out = {self.out}", ""]
        lines.append("[stages]")
        for name, seconds in self.stages:
            lines.append(f"{name} = {seconds:.3f}s")
        if self.error:
            lines.append(f"error = {self.error}")
        lines.append("")
        lines.append("[artifacts]")
        for a in self.artifacts:
            lines.append(a)
        lines.append("")
        lines.append("[config]")
        lines.extend(self.config_text.rstrip("\n").split("\n"))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def finalize(self, path):
        missing = [a for a in self.artifacts if not os.path.exists(a)]
        if missing:
            raise DataError(f"manifest references missing artifacts: {missing}")
        self.write(path)


def _digest(*parts):
    h = hashlib.sha1()
    for part in parts:
        if isinstance(part, bytes):
            h.update(part)
        else:
            h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()[:16]


def _file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha1(fh.read()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# stages (ensure_* builds or reuses; require_* loads or fails with DataError)


def ensure_corpus(cfg: ExperimentConfig, paths: RunPaths):
    """Materialize the ground-truth corpus and split teacher/attacker pools."""
    paths.ensure()
    if cfg.corpus in CORPUS_KINDS:
        corpus = build_corpus(cfg.corpus, paths.corpus_dir, cfg.input_format,
                              seed=cfg.pool_seed, per_class=cfg.shapes_per_class)
    else:
        corpus = read_labeled_manifest(cfg.corpus, cfg.input_format, provenance="ground-truth")
    if not os.path.exists(paths.corpus_manifest) or cfg.corpus not in CORPUS_KINDS:
        write_labeled_manifest(corpus, paths.corpus_manifest)
    teacher_pool, attacker_pool = split(corpus, SplitConfig(cfg.pool_ratio, cfg.pool_seed))
    write_labeled_manifest(teacher_pool, paths.teacher_pool)
    write_labeled_manifest(attacker_pool, paths.attacker_pool)
    return corpus, teacher_pool, attacker_pool


def teacher_spec(cfg: ExperimentConfig):
    return TeacherSpec(cfg.teacher_architecture, cfg.num_classes, cfg.input_format,
                       cfg.teacher_train_seed)


def ensure_teacher(cfg: ExperimentConfig, paths: RunPaths, teacher_pool) -> TeacherArtifact:
    spec = teacher_spec(cfg)
    pool_digest = _file_digest(paths.teacher_pool)
    key = _digest("teacher", spec.architecture_id, spec.num_classes, spec.train_seed,
                  spec.input_format.to_dict(), pool_digest)
    meta_path = os.path.join(paths.teacher_dir, "teacher.meta.json")
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            if json.load(fh).get("key") == key:
                return TeacherArtifact.load(paths.teacher_dir)
    cached = os.path.join(cfg.cache_dir, f"teacher-{key}") if cfg.cache_dir else ""
    if cached and os.path.exists(os.path.join(cached, "teacher.json")):
        teacher = TeacherArtifact.load(cached)
    else:
        teacher = build_teacher(spec, teacher_pool)
        if cached:
            teacher.save(cached)
    teacher.save(paths.teacher_dir)
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump({"key": key}, fh)
    return teacher


def require_teacher(paths: RunPaths) -> TeacherArtifact:
    return TeacherArtifact.load(paths.teacher_dir)


def ensure_labeled(cfg: ExperimentConfig, paths: RunPaths, oracle: OracleHandle,
                   attacker_pool: LabeledDataset) -> LabeledDataset:
    """Oracle-label the attacker pool (the teaching dataset)."""
    key = _digest("labeled", _file_digest(paths.attacker_pool),
                  _file_digest(os.path.join(paths.teacher_dir, "teacher.json")))
    if os.path.exists(paths.labeled) and os.path.exists(paths.labeled_meta):
        with open(paths.labeled_meta, encoding="utf-8") as fh:
            if json.load(fh).get("key") == key:
                return read_labeled_manifest(paths.labeled, cfg.input_format,
                                             provenance="oracle:cached")
    images, _ = attacker_pool.materialize()
    labeled = label_with_oracle(oracle, images, run_id=cfg.experiment_id)
    labeled = LabeledDataset(attacker_pool.refs, labeled.labels, cfg.input_format,
                             labeled.provenance, images=images)
    write_labeled_manifest(labeled, paths.labeled)
    with open(paths.labeled_meta, "w", encoding="utf-8") as fh:
        json.dump({"key": key, "queries": len(labeled)}, fh)
    return labeled


def ensure_splits(cfg: ExperimentConfig, paths: RunPaths, labeled: LabeledDataset,
                  corpus: LabeledDataset):
    """4:1 (configurable) shuffled split plus a ground-truth view of the test side."""
    train, test = split(labeled, SplitConfig(cfg.train_ratio, cfg.shuffle_seed))
    gt = dict(zip(corpus.refs, (int(v) for v in corpus.labels)))
    try:
        test_gt_labels = np.array([gt[r] for r in test.refs], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"test item missing from ground-truth corpus: {exc}") from None
    test_gt = LabeledDataset(test.refs, test_gt_labels, cfg.input_format,
                             "ground-truth", images=test.images)
    write_labeled_manifest(train, paths.train)
    write_labeled_manifest(test, paths.test)
    write_labeled_manifest(test_gt, paths.test_groundtruth)
    return train, test, test_gt


def require_splits(cfg: ExperimentConfig, paths: RunPaths):
    for p in (paths.train, paths.test, paths.test_groundtruth):
        if not os.path.exists(p):
            raise DataError(f"missing dataset split {p}; run `dataset split` first")
    train = read_labeled_manifest(paths.train, cfg.input_format, provenance="oracle:file")
    test = read_labeled_manifest(paths.test, cfg.input_format, provenance="oracle:file")
    test_gt = read_labeled_manifest(paths.test_groundtruth, cfg.input_format,
                                    provenance="ground-truth")
    return train, test, test_gt


def student_tag(arch_variant, fraction, seed, blind=False):
    base = f"{arch_variant}-f{fraction:g}-s{seed}"
    return f"{base}-blind" if blind else base


def ensure_student(cfg: ExperimentConfig, paths: RunPaths, train: LabeledDataset,
                   arch_variant, fraction, seed) -> StudentModel:
    """Train (or load a cached) student for one grid cell."""
    arch = find_architecture(arch_variant, cfg.input_format, cfg.num_classes)
    key = _digest("student", _file_digest(paths.train), arch_variant, f"{fraction:g}",
                  seed, cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.num_classes)
    tag = student_tag(arch_variant, fraction, seed)
    local = os.path.join(paths.students_dir, f"{tag}.pt")
    meta = os.path.join(paths.students_dir, f"{tag}.meta.json")
    if os.path.exists(local) and os.path.exists(meta):
        with open(meta, encoding="utf-8") as fh:
            if json.load(fh).get("key") == key:
                return StudentModel.load(local)
    shared = os.path.join(cfg.cache_dir, f"student-{key}.pt") if cfg.cache_dir else ""
    if shared and os.path.exists(shared):
        model = StudentModel.load(shared)
    else:
        subset = subsample(train, fraction, seed=seed) if fraction < 1.0 else train
        model = train_student(arch, subset, cfg.train_config(seed), num_classes=cfg.num_classes)
        if shared:
            model.save(shared)
    model.save(local)
    save_history_csv(model, os.path.join(paths.students_dir, f"{tag}-history.csv"))
    with open(meta, "w", encoding="utf-8") as fh:
        json.dump({"key": key}, fh)
    return model


def ensure_blind_student(cfg: ExperimentConfig, paths: RunPaths, seed) -> StudentModel:
    """Blind baseline: random init, or pretrained on a generic (shapes) corpus."""
    arch = find_architecture(cfg.architectures[0], cfg.input_format, cfg.num_classes)
    if cfg.blind_init == "random":
        return random_student(arch, cfg.input_format, cfg.num_classes, seed=seed)
    generic = build_corpus("shapes", paths.generic_dir, cfg.input_format,
                           seed=cfg.pool_seed + 1, per_class=cfg.shapes_per_class)
    if int(generic.labels.max()) + 1 != cfg.num_classes:
        raise ConfigurationError(
            "generic blind pretraining needs a corpus with the same class count"
        )
    tag = student_tag(arch.variant, 0.0, seed, blind=True)
    local = os.path.join(paths.students_dir, f"{tag}.pt")
    if os.path.exists(local):
        return StudentModel.load(local)
    model = train_student(arch, generic, cfg.train_config(seed), num_classes=cfg.num_classes)
    model.save(local)
    return model


# ---------------------------------------------------------------------------
# grid cells


@dataclass(frozen=True)
class Cell:
    index: int
    seed: int
    arch: str
    fraction: float
    algorithm: str
    eps: EpsSpec
    blind: bool

    @property
    def run_id(self):
        return f"s{self.seed}"

    def tag(self):
        eps = self.eps.label.replace("/", "of")
        return (f"{self.algorithm}-eps{eps}-{self.arch}-f{self.fraction:g}-s{self.seed}"
                + ("-blind" if self.blind else ""))


def _require_single(name, values):
    if len(values) != 1:
        raise ConfigurationError(
            f"experiment holds {name} fixed; give exactly one value, got {list(values)}"
        )
    return values[0]


def grid_cells(cfg: ExperimentConfig):
    """The deterministic list of grid cells an experiment id implies."""
    cells = []
    idx = 0
    if cfg.experiment_id == "rq1":
        algo = _require_single("attack.algorithms", cfg.algorithms)
        eps = _require_single("attack.eps", cfg.eps_list)
        for seed in cfg.seeds:
            for arch in cfg.architectures:
                cells.append(Cell(idx, seed, arch, 1.0, algo, eps, False))
                idx += 1
    elif cfg.experiment_id == "rq2":
        algo = _require_single("attack.algorithms", cfg.algorithms)
        eps = _require_single("attack.eps", cfg.eps_list)
        arch = _require_single("student.architectures", cfg.architectures)
        for seed in cfg.seeds:
            for fraction in cfg.fractions:
                blind = fraction == 0.0
                cells.append(Cell(idx, seed, arch, fraction, algo, eps, blind))
                idx += 1
    elif cfg.experiment_id == "rq3":
        arch = _require_single("student.architectures", cfg.architectures)
        for seed in cfg.seeds:
            for algo in cfg.algorithms:
                for eps in cfg.eps_list:
                    cells.append(Cell(idx, seed, arch, 1.0, algo, eps, False))
                    idx += 1
    elif cfg.experiment_id == "rq4":
        algo = _require_single("attack.algorithms", cfg.algorithms)
        eps = _require_single("attack.eps", cfg.eps_list)
        arch = _require_single("student.architectures", cfg.architectures)
        for seed in cfg.seeds:
            cells.append(Cell(idx, seed, arch, 1.0, algo, eps, False))
            idx += 1
            cells.append(Cell(idx, seed, arch, 0.0, algo, eps, True))
            idx += 1
    else:  # single
        algo = _require_single("attack.algorithms", cfg.algorithms)
        eps = _require_single("attack.eps", cfg.eps_list)
        arch = _require_single("student.architectures", cfg.architectures)
        seed = cfg.seeds[0]
        cells.append(Cell(0, seed, arch, 1.0, algo, eps, False))
    if not cells:
        raise ConfigurationError("experiment grid is empty")
    return cells


def craft_cell(cfg: ExperimentConfig, paths: RunPaths, cell: Cell, model: StudentModel,
               oracle: OracleHandle, test_gt: LabeledDataset):
    """Select teacher-correct inputs and craft their adversarial examples.

    Persists the batch under attacks/<cell tag>/ and records (M, T) in
    cell.json. Costs exactly M oracle queries.
    """
    before = oracle.query_count()
    selection = select_correct(oracle, test_gt)
    assert oracle.query_count() - before == selection.m_total, "selection query audit"
    images, labels = selection.dataset.materialize()
    attack_cfg = cfg.attack_config(cell.algorithm, cell.eps.value, cell.seed)
    adv = run_attack(model, images, labels, attack_cfg)
    cell_dir = os.path.join(paths.attacks_dir, cell.tag())
    save_adversarial_batch(adv, labels, cell_dir)
    delta = np.abs(adv.images.data - images.data)
    meta = {
        "index": cell.index,
        "run_id": f"{cfg.experiment_id}-{cell.run_id}",
        "algorithm": cell.algorithm,
        "eps_label": cell.eps.label,
        "eps": cell.eps.value,
        "alpha": attack_cfg.alpha,
        "steps": attack_cfg.steps,
        "seed": cell.seed,
        "student_arch": cell.arch,
        "fraction": cell.fraction,
        "blind": cell.blind,
        "M": selection.m_total,
        "T": selection.t_correct,
        "mean_linf": float(adv.linf.mean()),
        "max_linf": float(adv.linf.max()),
        "mean_abs_perturbation": float(delta.mean()),
    }
    with open(os.path.join(cell_dir, "cell.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return cell_dir, meta


def transfer_cell(oracle: OracleHandle, cell_dir):
    """Replay a persisted batch against the oracle. Costs exactly T queries."""
    meta_path = os.path.join(cell_dir, "cell.json")
    if not os.path.exists(meta_path):
        raise DataError(f"missing cell metadata {meta_path}; run `attack run` first")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    adv, true_labels = load_adversarial_batch(cell_dir)
    before = oracle.query_count()
    report = transfer_evaluate(oracle, adv, true_labels, m_total=meta["M"],
                               blind=meta["blind"])
    assert oracle.query_count() - before == report.t_correct, "transfer query audit"
    return meta, report


def _row_from(meta, report):
    return result_row(meta["run_id"], meta["algorithm"], meta["eps_label"], meta["alpha"],
                      meta["steps"], meta["student_arch"], meta["fraction"], report)


def write_sidecars(paths: RunPaths, student_rows, stats_rows):
    import csv

    with open(paths.students_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_id", "student_arch", "dataset_fraction", "seed",
                         "train_size", "test_accuracy"])
        writer.writerows(student_rows)
    with open(paths.attack_stats, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_id", "algorithm", "eps", "student_arch", "dataset_fraction",
                         "seed", "blind", "mean_linf", "max_linf", "mean_abs_perturbation"])
        writer.writerows(stats_rows)


def run_experiment(cfg: ExperimentConfig, quiet=False) -> RunManifest:
    """Execute one experiment end to end; see the module docstring for layout."""

    def say(msg):
        if not quiet:
            print(msg, flush=True)

    paths = RunPaths(cfg.out)
    paths.ensure()
    manifest = RunManifest(paths.out, cfg.raw_text)
    with open(paths.config_echo, "w", encoding="utf-8") as fh:
        fh.write(cfg.raw_text)
    with open(paths.run_json, "w", encoding="utf-8") as fh:
        json.dump({"experiment_id": cfg.experiment_id, "seeds": list(cfg.seeds),
                   "version": __version__}, fh, indent=2, sort_keys=True)

    stage = "corpus"
    try:
        t0 = time.perf_counter()
        corpus, teacher_pool, attacker_pool = ensure_corpus(cfg, paths)
        manifest.add_stage(stage, time.perf_counter() - t0,
                           [paths.corpus_manifest, paths.teacher_pool, paths.attacker_pool])
        say(f"[corpus] {len(corpus)} images ({len(teacher_pool)} teacher / "
            f"{len(attacker_pool)} attacker)")

        stage = "teacher"
        t0 = time.perf_counter()
        teacher = ensure_teacher(cfg, paths, teacher_pool)
        oracle = seal(teacher)
        manifest.add_stage(stage, time.perf_counter() - t0,
                           [os.path.join(paths.teacher_dir, "teacher.json"),
                            os.path.join(paths.teacher_dir, "model.pt")])
        say(f"[teacher] {teacher.spec.architecture_id} heldout accuracy "
            f"{teacher.heldout_accuracy:.4f}")

        stage = "label"
        t0 = time.perf_counter()
        labeled = ensure_labeled(cfg, paths, oracle, attacker_pool)
        manifest.add_stage(stage, time.perf_counter() - t0, [paths.labeled])
        say(f"[label] teaching dataset of {len(labeled)} oracle-labeled images")

        stage = "split"
        t0 = time.perf_counter()
        train, test, test_gt = ensure_splits(cfg, paths, labeled, corpus)
        manifest.add_stage(stage, time.perf_counter() - t0,
                           [paths.train, paths.test, paths.test_groundtruth])
        say(f"[split] train={len(train)} test={len(test)}")

        stage = "cells"
        t0 = time.perf_counter()
        cells = grid_cells(cfg)
        rows, student_rows, stats_rows = [], [], []
        seen_students = set()
        for cell in cells:
            if cell.blind:
                model = ensure_blind_student(cfg, paths, cell.seed)
            else:
                model = ensure_student(cfg, paths, train, cell.arch, cell.fraction, cell.seed)
            skey = (cell.arch, cell.fraction, cell.seed, cell.blind)
            if skey not in seen_students:
                seen_students.add(skey)
                n_train = 0 if cell.blind else len(
                    subsample(train, cell.fraction, seed=cell.seed)
                    if cell.fraction < 1.0 else train)
                student_rows.append((f"{cfg.experiment_id}-{cell.run_id}", cell.arch,
                                     f"{cell.fraction:g}", cell.seed, n_train,
                                     f"{accuracy(model, test):.6f}"))
            cell_dir, meta = craft_cell(cfg, paths, cell, model, oracle, test_gt)
            meta2, report = transfer_cell(oracle, cell_dir)
            rows.append(_row_from(meta, report))
            stats_rows.append((meta["run_id"], meta["algorithm"], meta["eps_label"],
                               meta["student_arch"], f"{meta['fraction']:g}", meta["seed"],
                               "true" if meta["blind"] else "false",
                               f"{meta['mean_linf']:.8g}", f"{meta['max_linf']:.8g}",
                               f"{meta['mean_abs_perturbation']:.8g}"))
            say(f"[cell {cell.index + 1}/{len(cells)}] {cell.tag()}: "
                f"p={report.success_rate_str} (Q={report.q_fooled}, T={report.t_correct})")
        cell_artifacts = [os.path.join(paths.attacks_dir, c.tag(), "cell.json")
                          for c in cells]
        student_artifacts = sorted(
            os.path.join(paths.students_dir, f)
            for f in os.listdir(paths.students_dir) if f.endswith(".pt"))
        manifest.add_stage(stage, time.perf_counter() - t0,
                           cell_artifacts + student_artifacts)

        stage = "results"
        t0 = time.perf_counter()
        write_results_csv(rows, paths.results)
        write_sidecars(paths, student_rows, stats_rows)
        manifest.add_stage(stage, time.perf_counter() - t0,
                           [paths.results, paths.students_csv, paths.attack_stats])
        say(f"[results] {len(rows)} rows -> {paths.results}")

        manifest.finalize(paths.manifest)
        return manifest
    except Exception as exc:
        manifest.error = f"stage {stage!r} failed: {exc}"
        manifest.write(paths.manifest)
        raise
