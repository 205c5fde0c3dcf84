"""Mean-Teacher training step with uncertainty- and ClassDrop-gated consistency."""

from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import classdrop as cd
from . import uncertainty as unc
from .augment import AugmentationConfig, augment, sample_geometry
from .losses import (
    LossReport,
    RampSchedule,
    masked_consistency_loss,
    ramp_weight,
    supervised_ce,
    total_loss,
)
from .model import (
    SegModelSpec,
    check_compatible,
    clone_params,
    init_params,
    load_snapshot,
    predict_probs,
    save_snapshot,
)
from .segcore import IGNORE_VALUE, argmax_labels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmaConfig:
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.decay}")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-5


@dataclass(frozen=True)
class MethodConfig:
    uncertainty: unc.UncertaintyConfig = field(default_factory=unc.UncertaintyConfig)
    threshold: unc.ThresholdSchedule = field(default_factory=unc.ThresholdSchedule)
    classdrop: cd.ClassDropConfig = field(default_factory=cd.ClassDropConfig)
    ramp: RampSchedule = field(default_factory=RampSchedule)
    ema: EmaConfig = field(default_factory=EmaConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    use_uncertainty_mask: bool = True
    use_classdrop: bool = True
    consistency_reduction: str = "mean_all"
    source_augment: bool = False
    # with lambda0 == 0 the consistency branch cannot affect the student; skip its cost
    skip_inert_consistency: bool = True
    log_classdrop: bool = False

    def __post_init__(self):
        if self.threshold.t_max != self.ramp.t_max:
            raise ValueError("threshold and ramp schedules must share t_max")
        if self.consistency_reduction not in ("mean_all", "mean_gated"):
            raise ValueError(f"unknown consistency_reduction {self.consistency_reduction!r}")

    @property
    def t_max(self) -> int:
        return self.ramp.t_max


@dataclass
class TrainState:
    step: int
    t_max: int
    student: OrderedDict
    teacher: OrderedDict
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator


def ema_update(teacher, student, decay: float) -> OrderedDict:
    """``decay * teacher + (1 - decay) * student`` for every named array."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
    check_compatible(teacher, student)
    with torch.no_grad():
        return OrderedDict(
            (k, decay * teacher[k] + (1.0 - decay) * student[k].detach()) for k in teacher
        )


def make_optimizer(student, cfg: OptimConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(list(student.values()), lr=cfg.lr, weight_decay=cfg.weight_decay)


def new_train_state(spec: SegModelSpec, cfg: MethodConfig, seed: int) -> TrainState:
    student = clone_params(init_params(spec), requires_grad=True)
    teacher = clone_params(student)
    return TrainState(
        step=0,
        t_max=cfg.t_max,
        student=student,
        teacher=teacher,
        optimizer=make_optimizer(student, cfg.optim),
        rng=np.random.default_rng(seed),
    )


def _probs(params, spec, images) -> torch.Tensor:
    return predict_probs(params, spec, torch.from_numpy(np.ascontiguousarray(images)))


def _source_view(images, labels, cfg: MethodConfig, rng):
    if not cfg.source_augment:
        return images, labels
    out_i, out_l = [], []
    for img, lab in zip(images, labels):
        geo = sample_geometry(img.shape[0], img.shape[1], cfg.augment, rng)
        aug_img, _ = augment(img, cfg.augment, rng, geo)
        out_i.append(aug_img)
        out_l.append(geo.apply_map(lab))
    return np.stack(out_i), np.stack(out_l)


def consistency_targets(state: TrainState, spec: SegModelSpec, target_images, cfg: MethodConfig):
    """Teacher side of the consistency branch.

    Returns ``(student_input, teacher_probs, gate, info)`` where the student
    input is the independently augmented view with ClassDrop applied.
    """
    rng = state.rng
    views_s, views_t = [], []
    for img in target_images:
        geo = sample_geometry(img.shape[0], img.shape[1], cfg.augment, rng)
        views_s.append(augment(img, cfg.augment, rng, geo)[0])
        views_t.append(augment(img, cfg.augment, rng, geo)[0])
    x_student = np.stack(views_s)
    x_teacher = np.stack(views_t)

    def teacher_fn(x):
        with torch.no_grad():
            return predict_probs(state.teacher, spec, torch.from_numpy(np.ascontiguousarray(x))).numpy()

    if cfg.use_uncertainty_mask:
        mean, members = unc.stochastic_ensemble(teacher_fn, x_teacher, cfg.uncertainty, rng, normalized=True)
        entropy = unc.predictive_entropy(mean)
        zsup = unc.z_sup(entropy, cfg.threshold.z_sup_mode, spec.num_classes)
        R = unc.dynamic_threshold(state.step, cfg.threshold, zsup)
        m_unc = unc.uncertainty_mask(entropy, R)
    else:
        # only the single stochastic prediction is needed without the entropy gate
        _, members = unc.stochastic_ensemble(
            teacher_fn, x_teacher, replace(cfg.uncertainty, num_passes=1), rng, normalized=True
        )
        entropy, zsup, R = None, None, None
        m_unc = np.ones(members.shape[1:-1], dtype=np.uint8)
    ones = np.ones(m_unc.shape, dtype=np.uint8)

    # the single stochastic prediction is both consistency target and pseudo-label source
    target_probs = members[0]
    outcomes = []
    if cfg.use_classdrop:
        pseudo = argmax_labels(target_probs)
        outcomes = [cd.generate_classdrop_mask(p, cfg.classdrop, rng) for p in pseudo]
        m_cd = np.stack([o.mask for o in outcomes])
        x_student = np.stack(
            [cd.apply_mask(x, m, cfg.classdrop.fill_value) for x, m in zip(x_student, m_cd)]
        )
    else:
        m_cd = ones
    gate = cd.combine_masks(m_cd, m_unc)
    info = {"R": R, "z_sup": zsup, "classdrop": outcomes, "entropy": entropy, "m_unc": m_unc, "m_cd": m_cd}
    return x_student, target_probs, gate, info


def train_step(
    state: TrainState,
    source_batch,
    target_batch,
    cfg: MethodConfig,
    spec: SegModelSpec,
) -> tuple[TrainState, LossReport]:
    """One optimisation step; mutates and returns ``state``.

    ``source_batch`` is ``(images (B,H,W,3), labels (B,H,W))``; ``target_batch``
    is ``(B,H,W,3)`` unlabeled images.  On failure the state, including RNG,
    is left as it was.
    """
    if state.step >= state.t_max:
        raise ValueError(f"step {state.step} has reached t_max {state.t_max}")
    if state.t_max != cfg.t_max:
        raise ValueError(f"state t_max {state.t_max} disagrees with config t_max {cfg.t_max}")
    src_images, src_labels = source_batch
    src_images = np.asarray(src_images)
    target_batch = np.asarray(target_batch)
    if len(src_images) == 0 or len(target_batch) == 0:
        raise ValueError("source and target batches must be non-empty")

    rng_state = state.rng.bit_generator.state
    try:
        x_s, y_s = _source_view(src_images, np.asarray(src_labels), cfg, state.rng)
        seg = supervised_ce(_probs(state.student, spec, x_s), torch.from_numpy(y_s), IGNORE_VALUE)

        lam = ramp_weight(state.step, cfg.ramp)
        if cfg.ramp.lambda0 == 0 and cfg.skip_inert_consistency:
            con = torch.zeros((), dtype=seg.dtype)
            masked_fraction = 0.0
        else:
            x_student, target_probs, gate, info = consistency_targets(state, spec, target_batch, cfg)
            student_probs = _probs(state.student, spec, x_student)
            con = masked_consistency_loss(
                student_probs, torch.from_numpy(target_probs), torch.from_numpy(gate),
                cfg.consistency_reduction,
            )
            masked_fraction = float(gate.mean())
            if cfg.log_classdrop and info["classdrop"]:
                log.info(json.dumps({"step": state.step, "classdrop": [o.to_json() for o in info["classdrop"]]}))
        loss = total_loss(seg, con, lam)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
    except BaseException:
        state.rng.bit_generator.state = rng_state
        state.optimizer.zero_grad(set_to_none=True)
        raise

    state.optimizer.step()
    state.teacher = ema_update(state.teacher, state.student, cfg.ema.decay)
    report = LossReport(
        step=state.step,
        seg_loss=seg.item(),
        con_loss=con.item(),
        lambda_con=lam,
        total=loss.item(),
        masked_fraction=masked_fraction,
    )
    state.step += 1
    return state, report


def _optimizer_snapshot(state: TrainState) -> OrderedDict:
    out = OrderedDict()
    names = list(state.student)
    opt_state = state.optimizer.state
    for name, p in zip(names, state.student.values()):
        s = opt_state.get(p)
        if not s:
            continue
        out[f"exp_avg/{name}"] = s["exp_avg"]
        out[f"exp_avg_sq/{name}"] = s["exp_avg_sq"]
        out[f"step/{name}"] = torch.as_tensor(s["step"], dtype=torch.float32).reshape(1)
    return out


def save_checkpoint(path, state: TrainState, manifest: dict | None = None) -> Path:
    """Write student/teacher/optimizer snapshots and ``manifest.json`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_snapshot(path / "student.bin", state.student)
    save_snapshot(path / "teacher.bin", state.teacher)
    save_snapshot(path / "optimizer.bin", _optimizer_snapshot(state))
    body = {"step": state.step, "t_max": state.t_max, "rng_state": state.rng.bit_generator.state}
    body.update(manifest or {})
    (path / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, cfg: MethodConfig) -> tuple[TrainState, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    student = clone_params(load_snapshot(path / "student.bin"), requires_grad=True)
    teacher = load_snapshot(path / "teacher.bin")
    optimizer = make_optimizer(student, cfg.optim)
    opt_arrays = load_snapshot(path / "optimizer.bin")
    for name, p in student.items():
        if f"exp_avg/{name}" in opt_arrays:
            optimizer.state[p] = {
                "step": torch.tensor(float(opt_arrays[f"step/{name}"][0])),
                "exp_avg": opt_arrays[f"exp_avg/{name}"].clone(),
                "exp_avg_sq": opt_arrays[f"exp_avg_sq/{name}"].clone(),
            }
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    state = TrainState(manifest["step"], manifest["t_max"], student, teacher, optimizer, rng)
    return state, manifest
