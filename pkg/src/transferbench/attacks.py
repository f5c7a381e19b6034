"""L-inf gradient-sign attacks over a white-box student model.

Seven algorithms: fgsm, rfgsm, ffgsm (single step, with/without a noise
pre-step), bim, pgd, mifgsm (iterative, the last with momentum) and tpgd
(iterative, KL objective against the model's own clean predictions, no
labels). Every output is clipped to the valid pixel range [0,1] and
projected into the L-inf ball of radius eps around the source images.

Conventions shared by all algorithms: pixels are floats in [0,1]; eps and
alpha are in pixel units; sign(0) = 0, so a flat loss moves nothing and a
zero budget returns the input exactly. Stochastic algorithms draw all
noise from a generator seeded by the config, making them pure functions
of (model, images, labels, config).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datasets import ImageBatch
from .errors import ConfigurationError, NumericError
from .student import loss_and_input_gradient

ALGORITHMS = ("fgsm", "rfgsm", "ffgsm", "bim", "pgd", "tpgd", "mifgsm")
_ITERATIVE = ("bim", "pgd", "tpgd", "mifgsm")

BALL_TOLERANCE = 1e-6
TPGD_INIT_SCALE = 0.001


@dataclass(frozen=True)
class AttackConfig:
    """Algorithm id plus hyperparameters; unset fields resolve to defaults.

    Defaults: steps=10 and alpha=2.5*eps/steps for the iterative
    algorithms, mu=1.0 for mifgsm, alpha=eps/2 for rfgsm, alpha=1.25*eps
    for ffgsm. fgsm is single-step with alpha=eps.
    """

    algorithm: str
    eps: float
    alpha: float | None = None
    steps: int | None = None
    mu: float | None = None
    random_start: bool = True
    seed: int = 0

    def resolved(self) -> "AttackConfig":
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(
                f"unknown attack algorithm {self.algorithm!r}; choose from {ALGORITHMS}"
            )
        if not (0.0 <= self.eps <= 1.0):
            raise ConfigurationError(f"eps must be in [0,1], got {self.eps}")
        steps = self.steps
        if self.algorithm in _ITERATIVE:
            steps = 10 if steps is None else steps
        else:
            if steps is not None and steps != 1:
                raise ConfigurationError(f"{self.algorithm} is single-step")
            steps = 1
        if steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {steps}")
        alpha = self.alpha
        if alpha is None:
            if self.algorithm == "rfgsm":
                alpha = self.eps / 2
            elif self.algorithm == "ffgsm":
                alpha = 1.25 * self.eps
            elif self.algorithm == "fgsm":
                alpha = self.eps
            else:
                alpha = 2.5 * self.eps / steps
        if alpha < 0:
            raise ConfigurationError(f"alpha must be non-negative, got {alpha}")
        if self.algorithm in _ITERATIVE and self.eps > 0 and alpha <= 0:
            raise ConfigurationError(f"{self.algorithm} needs alpha > 0")
        mu = self.mu
        if self.algorithm == "mifgsm":
            mu = 1.0 if mu is None else mu
            if mu < 0:
                raise ConfigurationError(f"mu must be non-negative, got {mu}")
        return replace(self, alpha=alpha, steps=steps, mu=mu)


@dataclass
class AdversarialBatch:
    """Attack output: perturbed images plus the achieved per-image L-inf."""

    images: ImageBatch
    source_paths: list | None
    linf: np.ndarray
    config: AttackConfig

    def __post_init__(self):
        self.images.check_pixels()
        if self.linf.shape != (self.images.count,):
            raise NumericError("linf must hold one distance per image")
        if self.linf.size and float(self.linf.max()) > self.config.eps + BALL_TOLERANCE:
            raise NumericError(
                f"perturbation escaped the eps-ball: linf={self.linf.max()} > "
                f"eps={self.config.eps}"
            )

    def __len__(self):
        return self.images.count


def linf_distance(x, x_adv):
    """Per-image L-inf distance between two equally shaped batches."""
    a = x.data if isinstance(x, ImageBatch) else np.asarray(x)
    b = x_adv.data if isinstance(x_adv, ImageBatch) else np.asarray(x_adv)
    if a.shape != b.shape:
        raise NumericError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.abs(a - b).reshape(a.shape[0], -1).max(axis=1)


def project_linf(x_adv, x, eps):
    """Clamp into the eps-ball around x, then into the pixel range. Idempotent."""
    out = np.clip(x_adv, x - eps, x + eps)
    return np.clip(out, 0.0, 1.0)


def _as_array(images):
    batch = images if isinstance(images, ImageBatch) else ImageBatch(images)
    batch.check_pixels()
    return batch.data.astype(np.float32, copy=False), batch.paths


def _ce_grad(model, adv, y):
    return loss_and_input_gradient(model, adv, y, "cross-entropy")[1]


def _finish(adv, x, paths, config):
    return AdversarialBatch(ImageBatch(adv), paths, linf_distance(x, adv), config)


def _iterate(model, x, x0, eps, alpha, steps, grad_fn, mu=None):
    adv = x0
    g_acc = np.zeros_like(x) if mu is not None else None
    for _ in range(steps):
        g = grad_fn(adv)
        if mu is not None:
            l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape(-1, 1, 1, 1)
            g_hat = np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            g_acc = mu * g_acc + g_hat
            direction = np.sign(g_acc)
        else:
            direction = np.sign(g)
        adv = np.clip(adv + alpha * direction, 0.0, 1.0)
        adv = np.clip(adv, x - eps, x + eps)
    return adv


def fgsm(model, images, labels, eps):
    """Single signed-gradient step of size eps."""
    cfg = AttackConfig("fgsm", eps).resolved()
    x, paths = _as_array(images)
    adv = np.clip(x + eps * np.sign(_ce_grad(model, x, labels)), 0.0, 1.0)
    return _finish(adv, x, paths, cfg)


def bim(model, images, labels, eps, alpha=None, steps=None):
    """Iterative signed-gradient steps with projection after each step."""
    cfg = AttackConfig("bim", eps, alpha=alpha, steps=steps).resolved()
    x, paths = _as_array(images)
    adv = _iterate(model, x, x, eps, cfg.alpha, cfg.steps,
                   lambda a: _ce_grad(model, a, labels))
    return _finish(adv, x, paths, cfg)


def pgd(model, images, labels, eps, alpha=None, steps=None, random_start=True, seed=0):
    """bim from a uniform random point inside the eps-ball (optional)."""
    cfg = AttackConfig("pgd", eps, alpha=alpha, steps=steps,
                       random_start=random_start, seed=seed).resolved()
    x, paths = _as_array(images)
    if random_start and eps > 0:
        rng = np.random.default_rng(seed)
        x0 = np.clip(x + rng.uniform(-eps, eps, size=x.shape).astype(np.float32), 0.0, 1.0)
    else:
        x0 = x
    adv = _iterate(model, x, x0, eps, cfg.alpha, cfg.steps,
                   lambda a: _ce_grad(model, a, labels))
    return _finish(adv, x, paths, cfg)


def rfgsm(model, images, labels, eps, alpha=None, seed=0):
    """Random signed-noise pre-step of size alpha, then a (eps-alpha) gradient step."""
    cfg = AttackConfig("rfgsm", eps, alpha=alpha, seed=seed).resolved()
    x, paths = _as_array(images)
    if cfg.alpha > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(size=x.shape).astype(np.float32)
        x1 = np.clip(x + cfg.alpha * np.sign(noise), 0.0, 1.0)
    else:
        x1 = x
    adv = np.clip(x1 + (eps - cfg.alpha) * np.sign(_ce_grad(model, x1, labels)), 0.0, 1.0)
    adv = np.clip(adv, x - eps, x + eps)
    return _finish(adv, x, paths, cfg)


def ffgsm(model, images, labels, eps, alpha=None, seed=0):
    """Uniform random start in the eps-ball, then one alpha gradient step."""
    cfg = AttackConfig("ffgsm", eps, alpha=alpha, seed=seed).resolved()
    x, paths = _as_array(images)
    if eps > 0:
        rng = np.random.default_rng(seed)
        x1 = np.clip(x + rng.uniform(-eps, eps, size=x.shape).astype(np.float32), 0.0, 1.0)
    else:
        x1 = x
    adv = np.clip(x1 + cfg.alpha * np.sign(_ce_grad(model, x1, labels)), 0.0, 1.0)
    adv = np.clip(adv, x - eps, x + eps)
    return _finish(adv, x, paths, cfg)


def mifgsm(model, images, labels, eps, alpha=None, steps=None, mu=None):
    """bim with an accumulated momentum of L1-normalized gradients."""
    cfg = AttackConfig("mifgsm", eps, alpha=alpha, steps=steps, mu=mu).resolved()
    x, paths = _as_array(images)
    adv = _iterate(model, x, x, eps, cfg.alpha, cfg.steps,
                   lambda a: _ce_grad(model, a, labels), mu=cfg.mu)
    return _finish(adv, x, paths, cfg)


def tpgd(model, images, eps, alpha=None, steps=None, seed=0):
    """Label-free iterations on KL(clean predictions || current predictions).

    The reference distribution is the model's softmax at the clean input;
    iterations start from a tiny gaussian offset and maximize the divergence.
    """
    cfg = AttackConfig("tpgd", eps, alpha=alpha, steps=steps, seed=seed).resolved()
    x, paths = _as_array(images)
    ref = model.logits(x)
    rng = np.random.default_rng(seed)
    x0 = np.clip(x + TPGD_INIT_SCALE * rng.standard_normal(size=x.shape).astype(np.float32),
                 0.0, 1.0)
    adv = _iterate(
        model, x, x0, eps, cfg.alpha, cfg.steps,
        lambda a: loss_and_input_gradient(model, a, None, "kl-to-reference", ref)[1],
    )
    return _finish(adv, x, paths, cfg)


def save_adversarial_batch(adv: AdversarialBatch, true_labels, directory):
    """Persist a batch as one array file per image plus a manifest CSV.

    Manifest columns: src_path,adv_path,label_true,linf,algorithm,eps,alpha,
    steps,seed. Arrays are stored losslessly (.npy) so the eps-ball holds
    exactly across the file boundary.
    """
    import csv
    import os

    os.makedirs(directory, exist_ok=True)
    cfg = adv.config
    srcs = adv.source_paths or [""] * len(adv)
    rows = []
    for i in range(len(adv)):
        name = f"adv{i:05d}.npy"
        np.save(os.path.join(directory, name), adv.images.data[i])
        rows.append((srcs[i], name, int(true_labels[i]), f"{float(adv.linf[i]):.8g}",
                     cfg.algorithm, f"{cfg.eps:.10g}", f"{cfg.alpha:.10g}",
                     cfg.steps, cfg.seed))
    with open(os.path.join(directory, "manifest.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src_path", "adv_path", "label_true", "linf",
                         "algorithm", "eps", "alpha", "steps", "seed"])
        writer.writerows(rows)


def load_adversarial_batch(directory):
    """Load a persisted batch; returns (AdversarialBatch, true_labels)."""
    import csv
    import os

    from .errors import DataError

    manifest = os.path.join(directory, "manifest.csv")
    if not os.path.exists(manifest):
        raise DataError(f"no adversarial batch manifest at {manifest}")
    arrays, labels, srcs, dists = [], [], [], []
    cfg = None
    with open(manifest, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            arrays.append(np.load(os.path.join(directory, row["adv_path"])))
            labels.append(int(row["label_true"]))
            srcs.append(row["src_path"])
            dists.append(float(row["linf"]))
            if cfg is None:
                cfg = AttackConfig(row["algorithm"], float(row["eps"]),
                                   alpha=float(row["alpha"]), steps=int(row["steps"]),
                                   seed=int(row["seed"])).resolved()
    if not arrays:
        raise DataError(f"empty adversarial batch at {directory}")
    images = ImageBatch(np.stack(arrays), srcs)
    adv = AdversarialBatch(images, srcs, np.asarray(dists, dtype=np.float32), cfg)
    return adv, np.asarray(labels, dtype=np.int64)


def run_attack(model, images, labels, config: AttackConfig) -> AdversarialBatch:
    """Dispatch on config.algorithm. tpgd ignores the labels."""
    cfg = config.resolved()
    if cfg.algorithm == "fgsm":
        return fgsm(model, images, labels, cfg.eps)
    if cfg.algorithm == "bim":
        return bim(model, images, labels, cfg.eps, cfg.alpha, cfg.steps)
    if cfg.algorithm == "pgd":
        return pgd(model, images, labels, cfg.eps, cfg.alpha, cfg.steps,
                   cfg.random_start, cfg.seed)
    if cfg.algorithm == "rfgsm":
        return rfgsm(model, images, labels, cfg.eps, cfg.alpha, cfg.seed)
    if cfg.algorithm == "ffgsm":
        return ffgsm(model, images, labels, cfg.eps, cfg.alpha, cfg.seed)
    if cfg.algorithm == "mifgsm":
        return mifgsm(model, images, labels, cfg.eps, cfg.alpha, cfg.steps, cfg.mu)
    return tpgd(model, images, cfg.eps, cfg.alpha, cfg.steps, cfg.seed)
