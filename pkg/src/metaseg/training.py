"""Meta-learning trainer for multi-source domain-adaptive segmentation.

Each optimization step splits the available data into a meta-train part
(source crops, supervised) and a meta-test part (either a held-out
source or mixed target samples). The meta-train loss is taken at the
current weights; a virtual one-step-updated copy of the weights is then
evaluated on the meta-test part, and the real update uses the combined
first-order gradient alpha * g_train + g_test. Both step sizes follow a
polynomial decay schedule.

Three methods are supported for ablations:

* ``baseline``   - joint supervised training on all source crops.
* ``meta``       - meta-learning whose meta-test is a pseudo-labelled
                   target crop (self-training signal only).
* ``meta_mdms``  - meta-learning whose meta-test is the cross-domain
                   mixed batch (one mixed sample per source domain:
                   pseudo-labelled target pixels plus pasted
                   true-labelled source pixels).
"""

from __future__ import annotations

import csv
import dataclasses
import os
from typing import Optional

import numpy as np

from . import tensor as T
from .data import AugmentationConfig, DomainSample, DomainSet, standard_augment
from .metrics import ConfusionMatrix, IoUReport, format_report, iou_report
from .mixing import build_augmented_batch
from .network import SegModel, recalibrate_norm
from .tensor import Tensor

METHODS = ("baseline", "meta", "meta_mdms")


class TrainError(ValueError):
    pass


@dataclasses.dataclass
class HyperParams:
    inner_lr: float = 1e-3        # virtual-step size (eta)
    outer_lr: float = 5e-3        # real-update step size (gamma)
    alpha: float = 1.0            # weight of the meta-train gradient
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    iterations: int = 300
    crop: tuple = (64, 64)
    eval_every: int = 0           # 0: evaluate only at the end
    calib_images: int = 8
    confidence_threshold: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise TrainError(f"iterations must be non-negative, got {self.iterations}")
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise TrainError("learning rates must be non-negative (outer > 0)")
        if not 0 <= self.poly_power:
            raise TrainError(f"bad poly power {self.poly_power}")


@dataclasses.dataclass
class MetaStepReport:
    iteration: int
    meta_train_loss: float
    meta_test_loss: float
    total_loss: float
    inner_lr: float
    outer_lr: float


@dataclasses.dataclass
class TrainState:
    model: SegModel
    hp: HyperParams
    method: str
    iteration: int = 0
    step_log: list = dataclasses.field(default_factory=list)
    eval_log: list = dataclasses.field(default_factory=list)  # (iteration, IoUReport)

    @property
    def final_miou(self) -> float:
        if not self.eval_log:
            raise TrainError("no evaluations recorded")
        return self.eval_log[-1][1].miou


def poly_lr(base: float, iteration: int, total: int, power: float = 0.9) -> float:
    """base * (1 - iteration/total) ** power; decays to 0 at iteration == total."""
    if not 0 <= iteration <= total:
        raise TrainError(f"iteration {iteration} outside [0, {total}]")
    return base * (1.0 - iteration / total) ** power


def batch_loss(model: SegModel, samples, view=None, mode="train"):
    """Mean masked cross-entropy over a list of (image, label) pairs."""
    if not samples:
        raise TrainError("batch_loss needs at least one sample")
    total = None
    for image, label in samples:
        logits = model.forward(image[None], mode=mode, view=view)
        loss = T.cross_entropy_masked(logits, label[None])
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, 1.0 / len(samples))


def inner_update(model: SegModel, grads: dict, lr: float) -> dict:
    """Virtual SGD step: fresh leaf tensors at theta - lr * grad."""
    return {name: Tensor(p.value.data - lr * grads[name], requires_grad=True)
            for name, p in model.params.items()}


def meta_step(model: SegModel, meta_train, meta_test, hp: HyperParams,
              iteration: int) -> MetaStepReport:
    """One first-order meta-learning update.

    ``meta_train`` and ``meta_test`` are lists of (image, label) pairs.
    The update direction is alpha * grad(L_train at theta) +
    grad(L_test at theta - eta * grad L_train), applied with momentum
    SGD at the decayed outer rate.
    """
    eta = poly_lr(hp.inner_lr, iteration, hp.iterations, hp.poly_power)
    gamma = poly_lr(hp.outer_lr, iteration, hp.iterations, hp.poly_power)

    model.zero_grad()
    l_train = batch_loss(model, meta_train)
    l_train.backward()
    g_train = {name: p.grad.copy() for name, p in model.params.items()}

    virtual = inner_update(model, g_train, eta)
    l_test = batch_loss(model, meta_test, view=virtual)
    l_test.backward()

    for name, p in model.params.items():
        g_test = virtual[name].grad
        if g_test is None:
            g_test = np.zeros_like(p.value.data)
        p.value.grad = hp.alpha * g_train[name] + g_test
    T.sgd_update(model.parameters(), gamma, hp.momentum, hp.weight_decay)

    lt, lv = float(l_train.data), float(l_test.data)
    return MetaStepReport(iteration=iteration, meta_train_loss=lt,
                          meta_test_loss=lv, total_loss=lv + hp.alpha * lt,
                          inner_lr=eta, outer_lr=gamma)


def joint_step(model: SegModel, samples, hp: HyperParams,
               iteration: int) -> MetaStepReport:
    """Plain supervised SGD step on a batch of (image, label) pairs."""
    gamma = poly_lr(hp.outer_lr, iteration, hp.iterations, hp.poly_power)
    model.zero_grad()
    loss = batch_loss(model, samples)
    loss.backward()
    T.sgd_update(model.parameters(), gamma, hp.momentum, hp.weight_decay)
    lt = float(loss.data)
    return MetaStepReport(iteration=iteration, meta_train_loss=lt,
                          meta_test_loss=0.0, total_loss=lt,
                          inner_lr=0.0, outer_lr=gamma)


class EpochSampler:
    """Round-robin over a domain's samples, reshuffled every epoch."""

    def __init__(self, samples, rng: np.random.Generator):
        if not samples:
            raise TrainError("cannot sample from an empty domain")
        self.samples = list(samples)
        self.rng = rng
        self._order = []

    def next(self) -> DomainSample:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.samples)))
        return self.samples[self._order.pop()]


def evaluate(model: SegModel, eval_set: DomainSet,
             calibration_images=None) -> IoUReport:
    """Mean IoU over the labelled samples of ``eval_set``.

    When ``calibration_images`` is given, normalization statistics are
    first replaced with exact moments over that set.
    """
    if calibration_images is not None:
        recalibrate_norm(model, calibration_images)
    cm = ConfusionMatrix(model.num_classes)
    n = 0
    for s in eval_set.samples:
        if s.label is None:
            continue
        cm.update(model.predict(s.image), s.label)
        n += 1
    if n == 0:
        raise TrainError(f"evaluation set {eval_set.name} has no labelled samples")
    return iou_report(cm)


def _pseudo_labelled_target(model: SegModel, crop: DomainSample,
                            threshold: Optional[float]):
    from .mixing import apply_confidence_threshold, generate_pseudo_label
    pseudo = generate_pseudo_label(model, crop.image)
    ids = (apply_confidence_threshold(pseudo, threshold)
           if threshold is not None else pseudo.ids)
    return [(crop.image, ids)]


def train(model: SegModel, sources: dict, target_train: DomainSet,
          target_eval: DomainSet, hp: HyperParams, method: str = "meta_mdms",
          aug: Optional[AugmentationConfig] = None, log_dir: Optional[str] = None,
          progress=None) -> TrainState:
    """Run one training job and return its state (step and eval logs).

    ``sources`` maps domain name -> labelled DomainSet. ``target_train``
    provides unlabelled target images; ``target_eval`` labelled ones for
    periodic mean-IoU evaluation (always preceded by norm recalibration
    on target crops).
    """
    if method not in METHODS:
        raise TrainError(f"unknown method {method!r}; expected one of {METHODS}")
    if hp.iterations < 1:
        raise TrainError("train needs at least one iteration")
    if not sources:
        raise TrainError("need at least one source domain")
    aug = aug or AugmentationConfig(crop=hp.crop)

    rng_sample = np.random.default_rng([hp.seed, 1])
    rng_aug = np.random.default_rng([hp.seed, 2])
    rng_mix = np.random.default_rng([hp.seed, 3])

    names = sorted(sources)
    samplers = {name: EpochSampler(sources[name].samples,
                                   np.random.default_rng([hp.seed, 10 + i]))
                for i, name in enumerate(names)}
    target_sampler = EpochSampler(target_train.samples, rng_sample)

    state = TrainState(model=model, hp=hp, method=method)
    calib = np.stack([s.image for s in
                      target_train.samples[:max(1, hp.calib_images)]])

    for it in range(hp.iterations):
        crops = [(name, standard_augment(samplers[name].next(), aug, rng_aug))
                 for name in names]
        tgt_crop = standard_augment(target_sampler.next(), aug, rng_aug)
        supervised = [(c.image, c.label) for _, c in crops]

        if method == "baseline":
            report = joint_step(model, supervised, hp, it)
        elif method == "meta":
            meta_test = _pseudo_labelled_target(model, tgt_crop,
                                                hp.confidence_threshold)
            report = meta_step(model, supervised, meta_test, hp, it)
        else:  # meta_mdms
            batch = build_augmented_batch(crops, tgt_crop.image, model, rng_mix,
                                          target_id=tgt_crop.id,
                                          confidence_threshold=hp.confidence_threshold)
            meta_test = [(s.image, s.label) for s in batch.samples]
            report = meta_step(model, supervised, meta_test, hp, it)

        state.step_log.append(report)
        state.iteration = it + 1

        last = it + 1 == hp.iterations
        if last or (hp.eval_every and (it + 1) % hp.eval_every == 0):
            rep = evaluate(model, target_eval, calibration_images=calib)
            state.eval_log.append((it + 1, rep))
            if progress:
                progress(f"iter {it + 1}/{hp.iterations} "
                         f"loss {report.total_loss:.4f} miou {rep.miou:.4f}")
        elif progress and (it + 1) % 50 == 0:
            progress(f"iter {it + 1}/{hp.iterations} loss {report.total_loss:.4f}")

    if log_dir:
        write_logs(state, log_dir)
    return state


def write_logs(state: TrainState, log_dir: str) -> None:
    """Step losses and evaluation mIoU as CSV plus a readable report."""
    os.makedirs(log_dir, exist_ok=True)
    with open(os.path.join(log_dir, "steps.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "meta_train_loss", "meta_test_loss",
                    "total_loss", "inner_lr", "outer_lr"])
        for r in state.step_log:
            w.writerow([r.iteration, f"{r.meta_train_loss:.6f}",
                        f"{r.meta_test_loss:.6f}", f"{r.total_loss:.6f}",
                        f"{r.inner_lr:.6g}", f"{r.outer_lr:.6g}"])
    with open(os.path.join(log_dir, "eval.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "miou"])
        for it, rep in state.eval_log:
            w.writerow([it, f"{rep.miou:.6f}"])
    if state.eval_log:
        with open(os.path.join(log_dir, "report.txt"), "w") as f:
            it, rep = state.eval_log[-1]
            f.write(f"method: {state.method}\niteration: {it}\n")
            f.write(format_report(rep) + "\n")
