"""Source pretraining, proxy burn-in and the alternating two-stage adaptation.

Each mini-batch first runs the teacher-side stage (:func:`tca_step`), which
updates the prompt context and the proxy against the frozen target model,
then the target-side stage (:func:`mda_step`), which updates the target
model against the frozen teachers.

``AdaptConfig.objective`` swaps the information objective used at every
call site: ``"dmi"`` (decomposed), ``"mi"`` (plain MI on the full class set)
or ``"kl"`` (divergence to a teacher treated as ground truth).
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dmi import ClassSubset, DmiConfig, candidate_subset, conditional_dmi, dmi_from_predictions, selective_im
from .info import conditional_joint_tensor, entropy_rows_tensor, joint_tensor, mutual_information_tensor
from .models import (
    CaptionTeacherSpec,
    ClassifierParams,
    PrototypeTeacherParams,
    caption_embed,
    cosine_pseudo_labels,
    make_caption_teacher,
    make_prototype_teacher,
    predict,
    predict_numpy,
    prototype_predict,
)
from .synthdata import ScenarioBundle

OBJECTIVES = ("dmi", "mi", "kl")
COMPONENTS = ("SIM", "AGS", "MC", "CD")


class DivergenceError(RuntimeError):
    """A loss became non-finite; carries where it happened."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None,
                 record: dict | None = None):
        self.epoch, self.batch, self.record = epoch, batch, record or {}
        super().__init__(message)


# ------------------------------------------------------------------ configs

@dataclass(frozen=True)
class TrainConfig:
    """Architecture plus the supervised phases (source pretraining, burn-in)."""

    hidden_dim: int = 48
    bottleneck_dim: int = 32
    pretrain_epochs: int = 20
    burnin_epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-2
    label_smoothing: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


@dataclass(frozen=True)
class TeacherConfig:
    embed_dim: int = 32
    tau: float = 10.0
    prototype_noise: float = 0.25
    caption_noise: float = 0.25
    name_noise: float = 0.25
    seed: int = 0


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 1.0
    beta: float = 0.5
    dmi: DmiConfig = DmiConfig(lam=0.5)
    epochs: int = 30
    batch_size: int = 32
    lr_target: float = 1e-2
    lr_proxy: float = 1e-2
    lr_prompt: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    label_smoothing: float = 0.1
    objective: str = "dmi"
    components: tuple[str, ...] = COMPONENTS
    symmetrize: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ValueError("alpha and beta must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        bad = set(self.components) - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown loss components {sorted(bad)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        object.__setattr__(self, "components", tuple(c for c in COMPONENTS if c in self.components))

    def replace(self, **changes) -> "AdaptConfig":
        if "lam" in changes:
            changes["dmi"] = dataclasses.replace(self.dmi, lam=changes.pop("lam"))
        return dataclasses.replace(self, **changes)

    def uses(self, component: str) -> bool:
        return component in self.components


# ---------------------------------------------------------------- optimizer

@dataclass
class SGD:
    """SGD with momentum and coupled weight decay.

    ``buf <- m * buf + grad + wd * p``; ``p <- p - lr * buf``.  Learning rates
    are looked up by the parameter's tag (the part of its key before the dot).
    """

    lr: Mapping[str, float]
    momentum: float = 0.9
    weight_decay: float = 1e-3
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ag.ShapeError("SGD.step", p.shape, g.shape)
            d = g + self.weight_decay * p
            buf = self.buffers.get(name)
            buf = d if buf is None else self.momentum * buf + d
            self.buffers[name] = buf
            out[name] = p - self.lr[name.split(".", 1)[0]] * buf
        return out


def _apply(opt: SGD, bundle, grads: Mapping[str, np.ndarray]):
    own = {k: v for k, v in grads.items() if k.split(".", 1)[0] == bundle.tag}
    if not own:
        return bundle
    return bundle.with_updates(opt.step(bundle.named_trainable(), own))


# -------------------------------------------------------------------- losses

def _one_hot(labels: np.ndarray, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels out of range for K={K}")
    out = np.zeros((labels.size, K))
    out[np.arange(labels.size), labels] = 1.0
    return out


def smoothed_cross_entropy(pred: Tensor, labels, sigma: float = 0.1) -> Tensor:
    """Batch-mean cross-entropy against ``(1 - sigma) * onehot + sigma / K``."""
    if not 0.0 <= sigma < 1.0:
        raise ValueError("sigma must lie in [0, 1)")
    pred = ag.as_tensor(pred)
    K = pred.shape[1]
    target = (1.0 - sigma) * _one_hot(labels, K) + sigma / K
    return ag.neg(ag.mean(ag.tsum(Tensor(target) * ag.safe_log(pred), axis=1)))


def information_maximization(T: Tensor) -> Tensor:
    """H(mean prediction) - mean H(prediction) over all classes."""
    T = ag.as_tensor(T)
    marginal = ag.mean(T, axis=0, keepdims=True)
    return ag.reshape(entropy_rows_tensor(marginal), ()) - ag.mean(entropy_rows_tensor(T))


def kl_divergence(pred_a: Tensor, pred_b: Tensor) -> Tensor:
    """Mean row-wise KL(pred_b || pred_a), with ``pred_a`` the reference."""
    a, b = ag.as_tensor(pred_a), ag.as_tensor(pred_b)
    if a.shape != b.shape:
        raise ag.ShapeError("kl_divergence", a.shape, b.shape)
    return ag.mean(ag.tsum(b * (ag.safe_log(b) - ag.safe_log(a)), axis=1))


def plain_mutual_information(pred_a: Tensor, pred_b: Tensor, symmetrize: bool = True) -> Tensor:
    """MI of the full estimated batch joint, no decomposition."""
    return ag.reshape(mutual_information_tensor(joint_tensor(pred_a, pred_b, symmetrize)), ())


def baseline_objectives(pred_a, pred_b, symmetrize: bool = True) -> dict[str, float]:
    return {"kl": kl_divergence(pred_a, pred_b).item(),
            "mi": plain_mutual_information(pred_a, pred_b, symmetrize).item()}


def conditional_mutual_information(X: Tensor, Y: Tensor, Z: Tensor, symmetrize: bool = True) -> Tensor:
    stack, weights, active = conditional_joint_tensor(X, Y, Z, symmetrize)
    return ag.tsum(mutual_information_tensor(stack) * weights * Tensor(active.astype(np.float64)))


def agreement_mask(p_c: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    return np.argmax(p_c, axis=1) == np.argmax(p_b, axis=1)


def agreement_loss(p_t: Tensor, p_c: np.ndarray, p_b: np.ndarray) -> Tensor:
    """Cross-entropy of the target on samples where both teachers agree; 0 if none do."""
    agree = agreement_mask(p_c, p_b)
    if not agree.any():
        return Tensor(0.0)
    labels = np.argmax(p_c, axis=1)[agree]
    rows = ag.take(p_t, np.flatnonzero(agree), axis=0)
    return smoothed_cross_entropy(rows, labels, 0.0)


class _Skip(Exception):
    pass


def _pair_loss(p_t: Tensor, p_m: Tensor, cfg: AdaptConfig) -> tuple[Tensor, int]:
    """Consistency loss between the target and one teacher (lower is better)."""
    if cfg.objective == "dmi":
        S = candidate_subset(p_t.data, p_m.data, cfg.dmi.confidence_threshold)
        b = dmi_from_predictions(p_t, p_m, S, cfg.dmi, cfg.symmetrize)
        if b.skipped:
            raise _Skip(b.reason)
        return ag.neg(b.tensor), len(S)
    if cfg.objective == "mi":
        return ag.neg(plain_mutual_information(p_t, p_m, cfg.symmetrize)), p_t.shape[1]
    return kl_divergence(p_t, p_m), p_t.shape[1]


def mutual_consistency_loss(p_t: Tensor, p_b: Tensor, p_c: Tensor, cfg: AdaptConfig) -> Tensor:
    lb, _ = _pair_loss(p_t, p_b, cfg)
    lc, _ = _pair_loss(p_t, p_c, cfg)
    return lb + lc


def conditional_decorrelation_loss(p_b: Tensor, p_c: Tensor, p_t: Tensor, cfg: AdaptConfig) -> Tensor:
    if cfg.objective == "dmi":
        S = candidate_subset(p_b.data, p_c.data, cfg.dmi.confidence_threshold)
        if len(S) < cfg.dmi.min_region_size:
            raise _Skip("degenerate subset in conditional decorrelation")
        return conditional_dmi(p_b, p_c, p_t, S, cfg.dmi, cfg.symmetrize)
    if cfg.objective == "mi":
        return conditional_mutual_information(p_b, p_c, p_t, cfg.symmetrize)
    # KL has no conditional form
    return Tensor(0.0)


def selective_im_loss(p_t: Tensor, p_c: np.ndarray, p_b: np.ndarray, cfg: AdaptConfig) -> tuple[Tensor, int]:
    K = p_t.shape[1]
    if cfg.objective == "dmi":
        S = candidate_subset(p_c, p_b, cfg.dmi.confidence_threshold)
        b = selective_im(p_t, S, cfg.dmi)
        if b.skipped:
            raise _Skip(b.reason)
        return ag.neg(b.tensor), len(S)
    if cfg.objective == "mi":
        return ag.neg(information_maximization(p_t)), K
    return kl_divergence(Tensor(0.5 * (p_c + p_b)), p_t), K


# -------------------------------------------------------------------- stages

@dataclass
class Teachers:
    prompt: PrototypeTeacherParams
    caption: CaptionTeacherSpec
    proxy: ClassifierParams | None = None

    def replace(self, **changes) -> "Teachers":
        return dataclasses.replace(self, **changes)


@dataclass
class Batch:
    x: np.ndarray
    view: np.ndarray
    index: int = 0


@dataclass
class StepResult:
    losses: dict[str, float]
    grads: dict[str, np.ndarray]
    skipped: bool = False
    reason: str = ""
    subset_size: int = 0
    agreed: int = 0


def _check_finite(losses: Mapping[str, float], batch: Batch, stage: str) -> None:
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise DivergenceError(f"{stage}: non-finite loss {bad} at batch {batch.index}",
                              batch=batch.index, record=dict(losses))


def tca_step(batch: Batch, teachers: Teachers, theta_t: ClassifierParams, opt: SGD,
             cfg: AdaptConfig) -> tuple[Teachers, StepResult]:
    """Teacher-side update of the prompt context and proxy; the target stays frozen."""
    losses = {"L_MC": 0.0, "L_CD": 0.0, "L_TCA": 0.0}
    if not (cfg.uses("MC") or cfg.uses("CD")):
        return teachers, StepResult(losses, {})
    prompt_leaves = teachers.prompt.leaves()
    proxy_leaves = teachers.proxy.leaves()
    p_c = prototype_predict(teachers.prompt, batch.view, prompt_leaves)
    p_b = predict(teachers.proxy, batch.x, proxy_leaves)
    p_t = Tensor(predict_numpy(theta_t, batch.x))
    try:
        l_mc = mutual_consistency_loss(p_t, p_b, p_c, cfg) if cfg.uses("MC") else Tensor(0.0)
        l_cd = conditional_decorrelation_loss(p_b, p_c, p_t, cfg) if cfg.uses("CD") else Tensor(0.0)
    except _Skip as skip:
        return teachers, StepResult(losses, {}, skipped=True, reason=str(skip))
    total = l_mc + ag.scale(l_cd, cfg.alpha)
    losses = {"L_MC": l_mc.item(), "L_CD": l_cd.item(), "L_TCA": total.item()}
    _check_finite(losses, batch, "TCA")
    grads = ag.backward(total)
    updated = teachers.replace(prompt=_apply(opt, teachers.prompt, grads),
                               proxy=_apply(opt, teachers.proxy, grads))
    return updated, StepResult(losses, grads)


def mda_step(batch: Batch, teachers: Teachers, theta_t: ClassifierParams, opt: SGD,
             cfg: AdaptConfig) -> tuple[ClassifierParams, StepResult]:
    """Target-side update from teacher agreement and subset-restricted IM."""
    p_c = prototype_predict(teachers.prompt, batch.view).data
    p_b = predict_numpy(teachers.proxy, batch.x)
    leaves = theta_t.leaves()
    p_t = predict(theta_t, batch.x, leaves)
    agreed = int(agreement_mask(p_c, p_b).sum())
    l_ags = agreement_loss(p_t, p_c, p_b) if cfg.uses("AGS") else Tensor(0.0)
    subset = 0
    try:
        if cfg.uses("SIM"):
            l_sim, subset = selective_im_loss(p_t, p_c, p_b, cfg)
        else:
            l_sim = Tensor(0.0)
    except _Skip as skip:
        zero = {"L_AGS": 0.0, "L_SIM": 0.0, "L_MDA": 0.0}
        return theta_t, StepResult(zero, {}, skipped=True, reason=str(skip), agreed=agreed)
    total = l_ags + ag.scale(l_sim, cfg.beta)
    losses = {"L_AGS": l_ags.item(), "L_SIM": l_sim.item(), "L_MDA": total.item()}
    _check_finite(losses, batch, "MDA")
    grads = ag.backward(total)
    if not grads:
        return theta_t, StepResult(losses, grads, subset_size=subset, agreed=agreed)
    return _apply(opt, theta_t, grads), StepResult(losses, grads, subset_size=subset, agreed=agreed)


# ------------------------------------------------------------ supervised phases

@dataclass
class TrainResult:
    params: ClassifierParams
    accuracy: float
    losses: list[float]


def _fit(params: ClassifierParams, x: np.ndarray, y: np.ndarray, epochs: int, cfg: TrainConfig,
         rng: np.random.Generator, phase: str) -> TrainResult:
    opt = SGD({params.tag: cfg.lr}, cfg.momentum, cfg.weight_decay)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            leaves = params.leaves()
            loss = smoothed_cross_entropy(predict(params, x[idx], leaves), y[idx], cfg.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"{phase}: non-finite loss in epoch {epoch}", epoch=epoch)
            total += value * len(idx)
            params = _apply(opt, params, ag.backward(loss))
        history.append(total / len(x))
    acc = float((predict_numpy(params, x).argmax(axis=1) == y).mean())
    return TrainResult(params, acc, history)


def pretrain_source(bundle: ScenarioBundle, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Supervised label-smoothed training of the source model on source data."""
    if len(bundle.source_x) == 0:
        raise ValueError("source set is empty")
    rng = np.random.default_rng([cfg.seed, 1])
    params = ClassifierParams.init("theta_s", bundle.config.dim, cfg.hidden_dim, cfg.bottleneck_dim,
                                   bundle.K, rng)
    return _fit(params, bundle.source_x, bundle.source_y, cfg.pretrain_epochs, cfg, rng, "pretrain")


def caption_pseudo_labels(bundle: ScenarioBundle, caption: CaptionTeacherSpec, seed: int) -> np.ndarray:
    return cosine_pseudo_labels(caption_embed(caption, bundle.target_local, seed),
                                caption.class_name_embeddings)


def burn_in_proxy(bundle: ScenarioBundle, caption: CaptionTeacherSpec, theta_s: ClassifierParams,
                  cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Proxy initialised from the source model and fit to caption pseudo-labels."""
    labels = caption_pseudo_labels(bundle, caption, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    proxy = theta_s.retag("theta_b")
    result = _fit(proxy, bundle.target_x, labels, cfg.burnin_epochs, cfg, rng, "burn-in")
    return result


def make_teachers(bundle: ScenarioBundle, cfg: TeacherConfig = TeacherConfig()) -> Teachers:
    """Teachers built from the target-domain class structure of their own view.

    They stand in for domain-robust foundation models: each sees one view,
    with noisy prototypes, so they are imperfect and imperfect differently.
    """
    rng = np.random.default_rng([cfg.seed, 3])
    means = bundle.target_means[: bundle.K]
    prompt = make_prototype_teacher(means[:, bundle.global_slice], cfg.embed_dim, rng,
                                    cfg.prototype_noise, cfg.tau)
    caption = make_caption_teacher(means[:, bundle.local_slice], cfg.embed_dim, rng,
                                   cfg.caption_noise, cfg.name_noise)
    return Teachers(prompt, caption)


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    known: int
    unknown: int


def evaluate_labels(pred: np.ndarray, y: np.ndarray, K: int) -> EvalResult:
    """Accuracy over samples whose label is a known class (< K).

    Classes absent from ``y`` get no per-class entry; samples labelled ``>= K``
    are open-set unknowns and are only counted.
    """
    pred, y = np.asarray(pred), np.asarray(y)
    if y.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    known = y < K
    per_class = {int(c): float((pred[y == c] == c).mean()) for c in np.unique(y[known])}
    acc = float((pred[known] == y[known]).mean()) if known.any() else float("nan")
    return EvalResult(acc, per_class, int(known.sum()), int((~known).sum()))


def evaluate(params: ClassifierParams, x: np.ndarray, y: np.ndarray) -> EvalResult:
    return evaluate_labels(predict_numpy(params, x).argmax(axis=1), y, params.K)


# ---------------------------------------------------------------- adaptation

@dataclass
class EpochRecord:
    epoch: int
    target_acc: float
    proxy_acc: float
    prompt_acc: float
    caption_acc: float
    agreement: float
    mean_subset: float
    skipped: int
    L_MC: float
    L_CD: float
    L_TCA: float
    L_AGS: float
    L_SIM: float
    L_MDA: float

    def metrics(self) -> dict[str, float]:
        d = dataclasses.asdict(self)
        d.pop("epoch")
        return d


@dataclass
class AdaptReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    source_acc: float = float("nan")
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].target_acc if self.epochs else self.source_acc


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def adapt(bundle: ScenarioBundle, theta_s: ClassifierParams, teachers: Teachers, cfg: AdaptConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None,
          audit: Callable[[str, Teachers, ClassifierParams], None] | None = None):
    """Alternate the teacher-side and target-side stages over shuffled target batches.

    Returns ``(theta_t, teachers, report)``.  ``audit`` is called after every
    stage with the stage name and the current parameters.
    """
    if teachers.proxy is None:
        raise ValueError("teachers.proxy is missing; run burn_in_proxy first")
    start = time.perf_counter()
    theta_t = theta_s.retag("theta_t")
    opt = SGD({"theta_t": cfg.lr_target, "theta_b": cfg.lr_proxy, teachers.prompt.tag: cfg.lr_prompt},
              cfg.momentum, cfg.weight_decay)
    x, y, K = bundle.target_x, bundle.target_y, bundle.K
    view = bundle.target_global
    caption_acc = evaluate_labels(caption_pseudo_labels(bundle, teachers.caption, 0), y, K).accuracy
    report = AdaptReport(source_acc=evaluate(theta_s, x, y).accuracy)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 100 + epoch])
        sums = dict.fromkeys(("L_MC", "L_CD", "L_TCA", "L_AGS", "L_SIM", "L_MDA"), 0.0)
        steps = skipped = agreed = subset_total = subset_steps = 0
        for b, idx in enumerate(iter_batches(len(x), cfg.batch_size, rng)):
            batch = Batch(x[idx], view[idx], index=b)
            try:
                teachers, tca = tca_step(batch, teachers, theta_t, opt, cfg)
                if audit:
                    audit("tca", teachers, theta_t)
                theta_t, mda = mda_step(batch, teachers, theta_t, opt, cfg)
                if audit:
                    audit("mda", teachers, theta_t)
            except DivergenceError as err:
                err.epoch = epoch
                raise
            steps += 1
            skipped += tca.skipped + mda.skipped
            agreed += mda.agreed
            if mda.subset_size:
                subset_total += mda.subset_size
                subset_steps += 1
            for k, v in {**tca.losses, **mda.losses}.items():
                sums[k] += v
        record = EpochRecord(
            epoch=epoch + 1,
            target_acc=evaluate(theta_t, x, y).accuracy,
            proxy_acc=evaluate(teachers.proxy, x, y).accuracy,
            prompt_acc=evaluate_labels(prototype_predict(teachers.prompt, view).data.argmax(axis=1), y, K).accuracy,
            caption_acc=caption_acc,
            agreement=agreed / len(x),
            mean_subset=subset_total / subset_steps if subset_steps else 0.0,
            skipped=skipped,
            **{k: v / max(steps, 1) for k, v in sums.items()},
        )
        report.epochs.append(record)
        if on_epoch:
            on_epoch(record)
    report.wall_clock = time.perf_counter() - start
    return theta_t, teachers, report
