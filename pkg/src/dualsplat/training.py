"""Warm-up with auto-stop, alternating mutual optimisation and density control."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .geometry import quat_to_rotmat
from .losses import LossReport, LossWeights
from .primitives import GaussianSet, PrimitiveSet, SurfelSet, init_from_points, logit, save_checkpoint
from .scenes import Dataset, View
from .splatting import EMPTY_DEPTH, REFLECT_BETA, REFLECT_BETA_ALPHA, render_2d, render_3d

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
FROZEN_BETA_LOGIT = -30.0


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    warmup_max_iters: int = 7000
    warmup_min_iters: int = 500
    autostop_window: int = 500
    autostop_rel_tol: float = 1e-3
    autostop_ema_decay: float = 0.99
    mutual_iters: int = 20000
    alternation_block: int = 1
    bidirectional_bp: bool = False
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_sh_rest_factor: float = 1.0 / 20.0
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    densify_interval: int = 500
    densify_from_iter: int = 500
    densify_grad_threshold: float = 0.0002  # mean screen-space position gradient (NDC units)
    densify_percent_dense: float = 0.01
    prune_opacity: float = 0.005
    densify_in_mutual: bool = False
    max_primitives: int = 20000
    sh_degree: int = 3
    sh_degree_ref: int = 3
    reflect_mode: str = REFLECT_BETA
    freeze_beta: bool = False
    coverage_threshold: float = 1e-3
    dtype: str = "float32"
    seed: int = 0
    checkpoint_every: int = 0
    tsdf_resolution: int = 256
    tsdf_trunc_voxels: float = 4.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not 0 <= self.warmup_min_iters <= self.warmup_max_iters and not self.warmup_max_iters == 0:
            raise ConfigError("need 0 <= warmup_min_iters <= warmup_max_iters")
        if self.alternation_block < 1:
            raise ConfigError("alternation_block must be >= 1")
        if self.autostop_window < 2:
            raise ConfigError("autostop_window must be >= 2")
        for f in fields(self):
            if f.name.startswith("lr_") and f.name != "lr_position_final" and not getattr(self, f.name) > 0:
                raise ConfigError(f"{f.name} must be > 0")
        if self.reflect_mode not in (REFLECT_BETA, REFLECT_BETA_ALPHA):
            raise ConfigError(f"unknown reflect_mode {self.reflect_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        w = d.pop("weights", {})
        if not isinstance(w, dict):
            raise ConfigError("[weights] must be a table")
        wknown = {f.name for f in fields(LossWeights)}
        if set(w) - wknown:
            raise ConfigError(f"unknown weight keys: {sorted(set(w) - wknown)}")
        for f in fields(cls):
            if f.name in d and f.name != "weights":
                expected = type(getattr(cls(), f.name))
                v = d[f.name]
                if expected is float and isinstance(v, int) and not isinstance(v, bool):
                    v = float(v)
                if not isinstance(v, expected) or (expected is int and isinstance(v, bool)):
                    raise ConfigError(f"{f.name}: expected {expected.__name__}, got {type(v).__name__}")
                d[f.name] = v
        try:
            weights = LossWeights(**{k: float(v) for k, v in w.items()})
            return cls(weights=weights, **d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        import tomli

        try:
            with open(path, "rb") as f:
                data = tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


# --- optimiser -------------------------------------------------------------


def adam_step(param, grad, exp_avg, exp_avg_sq, lr, step: int, betas=ADAM_BETAS, eps=ADAM_EPS):
    """One bias-corrected Adam update; ``step`` counts from 1.

    Works on numpy arrays and torch tensors alike and returns new
    ``(param, exp_avg, exp_avg_sq)``.
    """
    b1, b2 = betas
    m = b1 * exp_avg + (1 - b1) * grad
    v = b2 * exp_avg_sq + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    return param - lr * m_hat / (v_hat**0.5 + eps), m, v


def param_lrs(pset: PrimitiveSet, cfg: TrainConfig, iteration: int, total_iters: int, extent: float):
    """Learning rate (scalar or broadcastable tensor) per parameter column."""
    frac = min(max(iteration / max(total_iters, 1), 0.0), 1.0)
    lr_pos = math.exp((1 - frac) * math.log(cfg.lr_position) + frac * math.log(cfg.lr_position_final))
    lr_pos *= extent
    lrs = {}
    for name, v in pset.params.items():
        if name in ("mean", "center"):
            lrs[name] = lr_pos
        elif name == "log_scale":
            lrs[name] = cfg.lr_scale
        elif name == "rotation":
            lrs[name] = cfg.lr_rotation
        elif name.startswith("logit_"):
            lrs[name] = cfg.lr_opacity
        elif name.startswith("sh"):
            k = v.shape[-1]
            lr = torch.full((k,), cfg.lr_sh * cfg.lr_sh_rest_factor, dtype=v.dtype)
            lr[0] = cfg.lr_sh
            lrs[name] = lr
    if cfg.freeze_beta and "logit_beta" in lrs:
        lrs["logit_beta"] = 0.0
    return lrs


def apply_adam(pset: PrimitiveSet, grads: dict, lrs: dict) -> list[str]:
    """Adam update of every column of ``pset`` in place; returns names skipped for non-finite gradients."""
    pset.step += 1
    skipped = []
    for name, g in grads.items():
        if g is None:
            continue
        if not torch.isfinite(g).all():
            skipped.append(name)
            log.warning("non-finite gradient for %s at step %d; skipped", name, pset.step)
            continue
        lr = lrs[name]
        if isinstance(lr, float) and lr == 0.0:
            continue
        p, m, v = adam_step(pset.params[name], g, pset.exp_avg[name], pset.exp_avg_sq[name], lr, pset.step)
        pset.params[name], pset.exp_avg[name], pset.exp_avg_sq[name] = p, m, v
    return skipped


# --- branch state and auto-stop --------------------------------------------


@dataclass
class BranchState:
    pset: PrimitiveSet
    name: str
    iteration: int = 0
    losses: list[float] = field(default_factory=list)
    ema_history: list[float] = field(default_factory=list)
    converged: bool = False
    grad_accum: torch.Tensor | None = None
    grad_count: torch.Tensor | None = None

    def record(self, loss: float, decay: float = 0.99):
        self.losses.append(loss)
        ema = loss if not self.ema_history else decay * self.ema_history[-1] + (1 - decay) * loss
        self.ema_history.append(ema)

    def reset_grad_stats(self):
        n = len(self.pset)
        self.grad_accum = torch.zeros(n, dtype=torch.float64)
        self.grad_count = torch.zeros(n, dtype=torch.float64)


@dataclass(frozen=True)
class StopGradientTarget:
    """Detached snapshot of one branch's output used to supervise the other."""

    value: torch.Tensor
    producer: str
    iteration: int

    @classmethod
    def capture(cls, tensor: torch.Tensor, producer: str, iteration: int) -> "StopGradientTarget":
        return cls(tensor.detach().clone(), producer, iteration)


def plateau_statistic(losses, window: int) -> float:
    """Relative drop between the mean of the older and newer half of the last ``window`` losses."""
    tail = np.asarray(losses[-window:], dtype=np.float64)
    half = window // 2
    older, newer = tail[: window - half].mean(), tail[window - half :].mean()
    return float((older - newer) / max(abs(older), 1e-300))


def check_autostop(state: BranchState, cfg: TrainConfig) -> bool:
    """True once the branch has converged or exhausted its warm-up budget.

    Never before ``warmup_min_iters``; always at ``warmup_max_iters``; in
    between, when the loss improved by less than ``autostop_rel_tol``
    (relative) across the last ``autostop_window`` iterations.
    """
    it = state.iteration
    if it >= cfg.warmup_max_iters:
        return True
    if it < cfg.warmup_min_iters or len(state.losses) < cfg.autostop_window:
        return False
    return plateau_statistic(state.losses, cfg.autostop_window) < cfg.autostop_rel_tol


# --- view sampling ---------------------------------------------------------


class ViewSampler:
    """Random order without replacement, reshuffled every epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("no training views")
        self.n = n
        self.rng = rng
        self._queue: list[int] = []

    def next(self) -> int:
        if not self._queue:
            self._queue = list(self.rng.permutation(self.n))
        return int(self._queue.pop())


# --- per-branch objectives -------------------------------------------------


def _as_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _view_tensors(view: View, dtype):
    img = _as_tensor(view.image, dtype)
    mask = None if view.mask is None else torch.as_tensor(view.mask)
    return img, mask


def _leaf_grads(loss, out):
    names = list(out.leaves)
    if not loss.requires_grad:
        return {k: torch.zeros_like(out.leaves[k]) for k in names}
    grads = torch.autograd.grad(loss, [out.leaves[k] for k in names], allow_unused=True)
    return {k: (torch.zeros_like(out.leaves[k]) if g is None else g) for k, g in zip(names, grads)}


def _grads_with_screen(loss, out):
    """Leaf gradients followed by the screen-space mean gradient; a loss with no graph gives zeros."""
    leaves = [out.leaves[k] for k in out.leaves]
    screen = out.means2d is not None and out.means2d.requires_grad
    if not loss.requires_grad:
        return [torch.zeros_like(t) for t in leaves] + [None]
    grads = torch.autograd.grad(loss, leaves + ([out.means2d] if screen else []), allow_unused=True)
    leaf = [torch.zeros_like(t) if g is None else g for t, g in zip(leaves, grads)]
    return leaf + [grads[-1] if screen else None]


def _accumulate_screen_grads(state: BranchState, out):
    if out.means2d is None or out.means2d.grad is None:
        return
    # normalised device coordinates, so the threshold does not depend on image size
    h, w = out.depth.shape
    g = out.means2d.grad.detach().to(torch.float64) * torch.tensor([w / 2.0, h / 2.0], dtype=torch.float64)
    seen = torch.zeros(len(state.pset), dtype=torch.bool)
    if out.fragments is not None and len(out.fragments):
        seen[out.fragments.prim] = True
    state.grad_accum += torch.where(seen, torch.linalg.norm(g, dim=-1), 0.0)
    state.grad_count += seen.to(torch.float64)


def warmup_step_3d(state: BranchState, view: View, cfg: TrainConfig, lrs) -> float:
    img, _ = _view_tensors(view, state.pset.dtype)
    out = render_3d(state.pset, view.camera, requires_grad=True, reflect_mode=cfg.reflect_mode)
    if out.means2d is not None:
        out.means2d.retain_grad()
    loss = L.loss_3d(out, img, cfg.weights)
    grads = _grads_with_screen(loss, out)
    leaf_grads = dict(zip(out.leaves, grads[:-1]))
    if grads[-1] is not None:
        out.means2d.grad = grads[-1]
        _accumulate_screen_grads(state, out)
    _finite_or_raise(loss, state)
    apply_adam(state.pset, leaf_grads, lrs)
    return float(loss.detach())


def warmup_step_2d(state: BranchState, view: View, cfg: TrainConfig, lrs) -> float:
    img, mask = _view_tensors(view, state.pset.dtype)
    out = render_2d(state.pset, view.camera, requires_grad=True)
    loss = L.loss_2d_warmup(out, img, mask, view.camera, cfg.weights)
    grads = _grads_with_screen(loss, out)
    leaf_grads = dict(zip(out.leaves, grads[:-1]))
    if grads[-1] is not None:
        out.means2d.grad = grads[-1]
        _accumulate_screen_grads(state, out)
    _finite_or_raise(loss, state)
    apply_adam(state.pset, leaf_grads, lrs)
    return float(loss.detach())


def _finite_or_raise(loss, state: BranchState):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{state.name} loss became {float(loss)} at iteration {state.iteration}")


# --- density control -------------------------------------------------------


def densify_prune(
    pset: PrimitiveSet,
    grad_accum: torch.Tensor,
    grad_count: torch.Tensor,
    cfg: TrainConfig,
    extent: float,
    generator: torch.Generator | None = None,
) -> PrimitiveSet:
    """Clone small / split large primitives with high screen-space gradient, then prune transparent ones."""
    n = len(pset)
    with torch.no_grad():
        avg = torch.where(grad_count > 0, grad_accum / grad_count.clamp_min(1), 0.0)
        selected = avg >= cfg.densify_grad_threshold
        if n + int(selected.sum()) > cfg.max_primitives:
            selected[:] = False
            log.warning("densification skipped: would exceed max_primitives=%d", cfg.max_primitives)
        scale = torch.exp(pset.params["log_scale"]).max(dim=1).values
        big = scale.to(torch.float64) > cfg.densify_percent_dense * extent
        clone = selected & ~big
        split = selected & big

        out = pset
        new_parts = []
        if clone.any():
            new_parts.append({k: v[clone].clone() for k, v in pset.params.items()})
        if split.any():
            new_parts.append(_split_params(pset, split, generator))
        keep = ~split
        if split.any() or clone.any():
            out = pset.select(torch.nonzero(keep)[:, 0])
            for part in new_parts:
                out = out.append(part)

        opac_name = "logit_opacity_tran" if isinstance(pset, GaussianSet) else "logit_opacity"
        opacity = torch.sigmoid(out.params[opac_name])
        prune = opacity < cfg.prune_opacity
        if prune.all():
            warnings.warn("pruning would remove every primitive; prune skipped", stacklevel=2)
        elif prune.any():
            out = out.select(torch.nonzero(~prune)[:, 0])
    return out


def _split_params(pset: PrimitiveSet, mask, generator, n_split: int = 2):
    p = {k: v[mask] for k, v in pset.params.items()}
    m = int(mask.sum())
    scale = torch.exp(p["log_scale"])
    rot = quat_to_rotmat(p["rotation"]).to(scale.dtype)
    noise = torch.randn((n_split, m, scale.shape[1]), generator=generator, dtype=scale.dtype)
    local = noise * scale
    if scale.shape[1] == 2:  # surfel: offsets stay in the tangent plane
        local = torch.cat([local, torch.zeros((n_split, m, 1), dtype=scale.dtype)], -1)
    offsets = torch.einsum("nij,snj->sni", rot, local)
    pos_key = "mean" if "mean" in p else "center"
    out = {}
    for k, v in p.items():
        if k == pos_key:
            out[k] = (v[None] + offsets).reshape(-1, v.shape[-1])
        elif k == "log_scale":
            out[k] = (v - math.log(0.8 * n_split)).repeat(n_split, 1)
        else:
            out[k] = v.repeat((n_split,) + (1,) * (v.dim() - 1))
    return out


# --- mutual stage ----------------------------------------------------------


def active_branch(mutual_iter: int, block: int) -> str:
    return "2d" if (mutual_iter // block) % 2 == 0 else "3d"


def mutual_step(
    b2d: BranchState,
    b3d: BranchState,
    view: View,
    cfg: TrainConfig,
    mutual_iter: int,
    lrs_2d=None,
    lrs_3d=None,
) -> LossReport:
    """One alternating step: render both branches on ``view``, update only the active one."""
    w = cfg.weights
    active = active_branch(mutual_iter, cfg.alternation_block)
    cam = view.camera
    img, mask = _view_tensors(view, b2d.pset.dtype)
    detach = not cfg.bidirectional_bp

    r3 = render_3d(b3d.pset, cam, requires_grad=active == "3d", reflect_mode=cfg.reflect_mode)
    r2 = render_2d(b2d.pset, cam, requires_grad=active == "2d")
    tran = r3.color_tran if not detach else StopGradientTarget.capture(r3.color_tran, "3d", mutual_iter).value
    coverage = r3.accum_alpha.detach() > cfg.coverage_threshold
    z_2d = r2.depth if not detach else StopGradientTarget.capture(r2.depth, "2d", mutual_iter).value
    gamma = L.gamma_map(mask, r2.depth.shape, w, r2.depth.dtype)
    valid = (r2.median_depth != EMPTY_DEPTH) & (r3.median_depth != EMPTY_DEPTH)

    parts: dict = {}
    l_3d = L.loss_3d(r3, img, w)
    l_2d = L.loss_2d_mutual(r2, tran, coverage, img, mask, cam, w, detach=detach, parts=parts)
    l_z = L.depth_mutual_loss(z_2d, r3.depth, valid, gamma, detach=detach)
    total = L.total_mutual_loss(l_2d, l_3d, l_z, w)
    for v in (l_2d, l_3d, l_z):
        if not torch.isfinite(v):
            raise TrainingDivergedError(f"mutual loss became non-finite at mutual iteration {mutual_iter}")

    state, out = (b2d, r2) if active == "2d" else (b3d, r3)
    if total.requires_grad:
        grads = _leaf_grads(total, out)
        if lrs_2d is None or lrs_3d is None:
            raise ValueError("learning rates required for the active branch")
        apply_adam(state.pset, grads, lrs_2d if active == "2d" else lrs_3d)
    state.iteration += 1

    report = LossReport(
        terms={k: float(v.detach()) for k, v in parts.items()},
        L_2D=float(l_2d.detach()),
        L_3D=float(l_3d.detach()),
        L_Z=float(l_z.detach()),
        L_total=float(total.detach()),
        iteration=mutual_iter,
        active=active,
    )
    return report


# --- orchestration ---------------------------------------------------------


@dataclass
class TrainResult:
    branch_2d: BranchState
    branch_3d: BranchState
    mutual_reports: list[LossReport]
    warmup_stop: dict[str, int]


def init_branches(ds: Dataset, cfg: TrainConfig) -> tuple[BranchState, BranchState]:
    if ds.points is None:
        raise ValueError("dataset has no initial point cloud")
    extent = ds.scene_extent()
    colors = ds.point_colors if ds.point_colors is not None else np.full_like(ds.points, 0.5)
    s3 = init_from_points(ds.points, colors, "gaussian3d", cfg.sh_degree, cfg.sh_degree_ref, extent)
    s2 = init_from_points(ds.points, colors, "surfel2d", cfg.sh_degree, extent=extent)
    if cfg.freeze_beta:
        s3.params["logit_beta"][:] = FROZEN_BETA_LOGIT
    s3, s2 = s3.to(cfg.torch_dtype), s2.to(cfg.torch_dtype)
    b2, b3 = BranchState(s2, "2d"), BranchState(s3, "3d")
    b2.reset_grad_stats()
    b3.reset_grad_stats()
    return b2, b3


class Trainer:
    """Runs warm-up and the mutual stage on a dataset, optionally writing logs and checkpoints."""

    def __init__(self, ds: Dataset, cfg: TrainConfig, out_dir=None):
        self.ds = ds
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.views = ds.train
        self.extent = ds.scene_extent()
        self.rng = np.random.default_rng(cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)
        self.b2d, self.b3d = init_branches(ds, cfg)
        self.sampler = ViewSampler(len(self.views), self.rng)
        self._log = None
        self.total_iters = cfg.warmup_max_iters + cfg.mutual_iters
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log = open(self.out_dir / "train_log.jsonl", "w")
            (self.out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))

    def _emit(self, record: dict):
        if self._log is not None:
            self._log.write(json.dumps(record, sort_keys=True) + "\n")

    def _lrs(self, state: BranchState, it: int):
        return param_lrs(state.pset, self.cfg, it, self.total_iters, self.extent)

    def save(self, tag: str):
        if self.out_dir is None:
            return
        ck = self.out_dir / "checkpoints"
        ck.mkdir(exist_ok=True)
        save_checkpoint(self.b3d.pset, ck / f"{tag}_3d.ckpt")
        save_checkpoint(self.b2d.pset, ck / f"{tag}_2d.ckpt")

    def _maybe_densify(self, state: BranchState, it: int):
        cfg = self.cfg
        if cfg.densify_interval <= 0 or it < cfg.densify_from_iter or it % cfg.densify_interval:
            return
        state.pset = densify_prune(state.pset, state.grad_accum, state.grad_count, cfg, self.extent, self.torch_gen)
        state.reset_grad_stats()

    def warmup(self) -> dict[str, int]:
        cfg = self.cfg
        stop = {}
        branches = [(self.b2d, warmup_step_2d), (self.b3d, warmup_step_3d)]
        if cfg.warmup_max_iters == 0:
            for b, _ in branches:
                b.converged = True
                stop[b.name] = 0
            return stop
        good = {b.name: b.pset.copy() for b, _ in branches}
        while not all(b.converged for b, _ in branches):
            view = self.views[self.sampler.next()]
            record = {"stage": "warmup"}
            for state, step in branches:
                if state.converged:
                    continue
                try:
                    loss = step(state, view, cfg, self._lrs(state, state.iteration))
                except TrainingDivergedError as e:
                    raise TrainingDivergedError(str(e), good) from None
                state.iteration += 1
                state.record(loss, cfg.autostop_ema_decay)
                record[f"loss_{state.name}"] = loss
                record[f"iter_{state.name}"] = state.iteration
                self._maybe_densify(state, state.iteration)
                if check_autostop(state, cfg):
                    state.converged = True
                    stop[state.name] = state.iteration
                    log.info("%s branch converged after %d warm-up iterations", state.name, state.iteration)
                    record[f"converged_{state.name}"] = True
            self._emit(record)
            it = max(b.iteration for b, _ in branches)
            if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                good = {b.name: b.pset.copy() for b, _ in branches}
                self.save(f"warmup_{it:06d}")
        return stop

    def mutual(self) -> list[LossReport]:
        cfg = self.cfg
        reports = []
        base = max(self.b2d.iteration, self.b3d.iteration)
        for k in range(cfg.mutual_iters):
            view = self.views[self.sampler.next()]
            it = base + k
            lrs_2d = self._lrs(self.b2d, it)
            lrs_3d = self._lrs(self.b3d, it)
            report = mutual_step(self.b2d, self.b3d, view, cfg, k, lrs_2d, lrs_3d)
            reports.append(report)
            rec = json.loads(report.to_json())
            rec["stage"] = "mutual"
            self._emit(rec)
            if cfg.densify_in_mutual:
                state = self.b2d if report.active == "2d" else self.b3d
                self._maybe_densify(state, state.iteration)
            if cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
                self.save(f"mutual_{k + 1:06d}")
        return reports

    def run(self) -> TrainResult:
        stop = self.warmup()
        reports = self.mutual()
        self.save("final")
        if self._log is not None:
            self._log.close()
            self._log = None
        return TrainResult(self.b2d, self.b3d, reports, stop)


def train(ds: Dataset, cfg: TrainConfig, out_dir=None) -> TrainResult:
    return Trainer(ds, cfg, out_dir).run()
