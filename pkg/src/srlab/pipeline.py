"""Synthetic scenes, the dual-level self-labelling training loop, class-count
estimation and hyperparameter search."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from . import gamma_control as gc
from .dual_model import DualModel, augment_views, supervised_loss, total_loss, unsup_loss
from .errors import DivergedLoss, EmptyRange, InvalidRatios, NoKnownPoints, NoNovelPoints
from .eval_metrics import confusion_matrix, evaluate_segmentation, matched_accuracy
from .ot_core import SolverConfig, kl_div, semi_relaxed_ot
from .region_graph import dbscan, pool_region_features

log = logging.getLogger(__name__)

UNKNOWN = -1


@dataclass
class Scene:
    points: np.ndarray  # (M, 3)
    labels: np.ndarray  # true class id per point; novel labels are for evaluation only
    known_mask: np.ndarray  # True where the label is visible to training

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.known_mask = np.asarray(self.known_mask, dtype=bool)
        if not (len(self.points) == len(self.labels) == len(self.known_mask)):
            raise ValueError("points, labels and known_mask must have equal length")
        if np.any(self.labels[self.known_mask] == UNKNOWN):
            raise ValueError("known points need a class label")

    def to_json(self) -> str:
        return json.dumps({
            "points": self.points.tolist(),
            "labels": self.labels.tolist(),
            "known_mask": self.known_mask.tolist(),
        })

    @classmethod
    def from_json(cls, line: str) -> "Scene":
        d = json.loads(line)
        return cls(np.asarray(d["points"], dtype=np.float64).reshape(-1, 3), d["labels"], d["known_mask"])


def write_dataset(scenes, path) -> None:
    with Path(path).open("w") as fh:
        for s in scenes:
            fh.write(s.to_json() + "\n")


def read_dataset(path) -> list[Scene]:
    with Path(path).open() as fh:
        return [Scene.from_json(line) for line in fh if line.strip()]


def class_counts(ratios, n_points: int) -> np.ndarray:
    """Largest-remainder rounding of ``ratios * n_points`` (counts sum exactly to n_points)."""
    raw = np.asarray(ratios, dtype=np.float64) * n_points
    counts = np.floor(raw + 1e-9).astype(np.int64)
    short = n_points - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def generate_synthetic(
    ratios,
    n_known: int = 0,
    n_scenes: int = 20,
    points_per_scene: int = 2000,
    seed: int = 0,
    spread: float = 0.6,
    jitter: float = 0.3,
    extent: float = 6.0,
) -> list[Scene]:
    """Gaussian blobs, one per class, with per-class point counts set by ``ratios``.

    Class centres are drawn once per dataset inside ``[-extent, extent]^3`` with a
    minimum separation, so a class occupies the same place in every scene; each
    scene shifts the centres by N(0, jitter^2).  Blob radius grows with the cube
    root of the class count to keep point density comparable across classes.
    Classes ``0..n_known-1`` are labelled; the rest are novel.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or len(ratios) == 0 or np.any(ratios <= 0) or abs(ratios.sum() - 1) > 1e-9:
        raise InvalidRatios(f"ratios must be positive and sum to 1, got {ratios.tolist()}")
    if not 0 <= n_known < len(ratios):
        raise InvalidRatios(f"n_known={n_known} must leave at least one novel class")
    if n_scenes < 1 or points_per_scene < 1:
        raise ValueError("n_scenes and points_per_scene must be positive")
    rng = np.random.default_rng(seed)
    n_classes = len(ratios)
    counts = class_counts(ratios, points_per_scene)
    radii = spread * np.cbrt(counts / counts.mean())
    centers = _separated_centers(rng, n_classes, radii, extent)

    scenes = []
    for _ in range(n_scenes):
        pts, labels = [], []
        for c in range(n_classes):
            center = centers[c] + rng.normal(0.0, jitter, size=3)
            pts.append(center + rng.normal(0.0, radii[c], size=(counts[c], 3)))
            labels.append(np.full(counts[c], c))
        labels = np.concatenate(labels)
        scenes.append(Scene(np.concatenate(pts), labels, labels < n_known))
    return scenes


def _separated_centers(rng, n, radii, extent):
    centers = []
    for c in range(n):
        for _ in range(10_000):
            cand = rng.uniform(-extent, extent, size=3)
            if all(np.linalg.norm(cand - centers[k]) > 4.0 * (radii[c] + radii[k]) for k in range(c)):
                break
        centers.append(cand)
    return np.array(centers)


@dataclass
class TrainConfig:
    n_known: int
    n_novel: int
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-2
    alpha: float = 1.0
    beta: float = 1.0
    epsilon: float = 0.05
    solver_tol: float = 1e-4
    solver_max_iter: int = 1000
    # adaptive | fixed | step | cosine
    gamma_mode: str = "adaptive"
    gamma0: float = 1.0
    gamma_min: float = 0.001
    lam: float = 0.5
    rho: float = 0.005
    T: int = 10
    dbscan_eps: float = 0.5
    dbscan_min_samples: int = 2
    region_level: bool = True
    tau: float = 0.1
    widths: tuple[int, ...] = (3, 64, 64, 32)
    input_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.gamma_mode not in ("adaptive", "fixed", "step", "cosine"):
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")
        for name in ("epochs", "batch_size", "n_novel", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])

    def final_indicator(self, steps_per_epoch: int | None = None) -> float:
        """Mean indicator over the last epoch's steps."""
        if not self.records:
            return float("nan")
        last = self.records[-1]["epoch"]
        return float(np.mean([r["indicator"] for r in self.records if r["epoch"] == last]))

    def to_csv(self, path) -> None:
        if not self.records:
            Path(path).write_text("")
            return
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.records[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.records)

    def summary(self) -> dict:
        return {
            "steps": len(self.records),
            "final_gamma_point": self.records[-1]["gamma_point"] if self.records else None,
            "final_gamma_region": self.records[-1]["gamma_region"] if self.records else None,
            "final_indicator": self.final_indicator(),
            "epoch_metrics": self.epoch_metrics,
        }


class _GammaSchedule:
    """Per-level gamma source for the configured schedule."""

    def __init__(self, cfg: TrainConfig, total_steps: int):
        self.cfg = cfg
        self.total_steps = total_steps
        self.state = gc.GammaState(gamma=cfg.gamma0, lam=cfg.lam, rho=cfg.rho, T=cfg.T)

    def gamma(self, step: int, epoch: int) -> float:
        mode = self.cfg.gamma_mode
        if mode == "adaptive":
            return self.state.gamma
        if mode == "fixed":
            return self.cfg.gamma0
        if mode == "step":
            return gc.step_decay(self.cfg.gamma0, self.cfg.lam, epoch)
        return gc.cosine_anneal(self.cfg.gamma0, self.cfg.gamma_min, step, max(self.total_steps - 1, 1))

    def observe(self, kl: float) -> None:
        if self.cfg.gamma_mode == "adaptive":
            self.state = gc.observe_kl(self.state, kl)


def _solve_plan(log_probs: torch.Tensor, gamma: float, cfg: TrainConfig):
    p = log_probs.detach().double().exp().numpy()
    p /= p.sum(axis=1, keepdims=True)
    solver = SolverConfig(epsilon=cfg.epsilon, gamma=gamma, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
    return semi_relaxed_ot(p, solver)


def _plan_kl(plan, n: int) -> float:
    return kl_div(plan.column_marginal(), np.full(n, 1.0 / n))


def _check_dataset(dataset, cfg: TrainConfig) -> None:
    if not any(s.known_mask.any() for s in dataset):
        raise NoKnownPoints("dataset has no labelled known points")
    n_unlabeled = sum(int((~s.known_mask).sum()) for s in dataset)
    if n_unlabeled == 0:
        raise NoNovelPoints("dataset has no unlabelled points")
    if n_unlabeled / len(dataset) * min(cfg.batch_size, len(dataset)) < cfg.n_novel:
        raise NoNovelPoints("fewer unlabelled points per batch than novel classes")


def train_step_losses(model: DualModel, batch, cfg: TrainConfig, gamma_p: float, gamma_r: float, rng):
    """Forward pass and pseudo-labelling for one batch of scenes.

    Returns the loss tensors, both levels' plans per view and the KL
    observations.  Plans from view 1 supervise predictions of view 2 and vice
    versa; plans carry no gradient.
    """
    n_known = cfg.n_known
    views1, views2, parts, offsets = [], [], [], [0]
    for scene_id, scene in batch:
        v1, v2 = augment_views(scene.points, rng, scene_id)
        views1.append(v1.points)
        views2.append(v2.points)
        unl = ~scene.known_mask
        # regions come from view-1 coordinates of the unlabelled points and index both views
        parts.append(dbscan(v1.points[unl], cfg.dbscan_eps, cfg.dbscan_min_samples))
        offsets.append(offsets[-1] + len(scene.points))
    known = np.concatenate([s.known_mask for _, s in batch])
    labels = np.concatenate([s.labels for _, s in batch])

    feats = [model.encode(np.concatenate(v)) for v in (views1, views2)]
    known_cols, novel_cols = model.bank.known_columns, model.bank.novel_columns

    if known.any():
        ls = sum(
            supervised_loss(model.point_log_probs(f[known], known_cols), labels[known], n_known, log=True)
            for f in feats
        ) / 2
    else:
        ls = feats[0].sum() * 0.0

    logp = [model.point_log_probs(f[~known], novel_cols) for f in feats]
    plans_p = [_solve_plan(lp, gamma_p, cfg) for lp in logp]
    lup = (unsup_loss(plans_p[0], logp[1]) + unsup_loss(plans_p[1], logp[0])) / 2
    kl_p = float(np.mean([_plan_kl(q, cfg.n_novel) for q in plans_p]))

    plans_r, kl_r = None, 0.0
    lur = ls * 0.0
    if cfg.region_level:
        logr = []
        for f in feats:
            pooled = []
            for (scene_id, scene), part, start, stop in zip(batch, parts, offsets[:-1], offsets[1:]):
                if part.region_count:
                    unl_feats = f[start:stop][torch.as_tensor(~scene.known_mask)]
                    pooled.append(pool_region_features(unl_feats, part))
            if pooled:
                logr.append(model.point_log_probs(torch.cat(pooled), novel_cols))
        if len(logr) == 2 and logr[0].shape[0] >= 1:
            plans_r = [_solve_plan(lr, gamma_r, cfg) for lr in logr]
            lur = (unsup_loss(plans_r[0], logr[1]) + unsup_loss(plans_r[1], logr[0])) / 2
            kl_r = float(np.mean([_plan_kl(q, cfg.n_novel) for q in plans_r]))

    loss = total_loss(ls, lup, lur, cfg.alpha, cfg.beta)
    return {
        "loss": loss, "ls": ls, "lup": lup, "lur": lur,
        "plans_point": plans_p, "plans_region": plans_r,
        "kl_point": kl_p, "kl_region": kl_r,
        "n_regions": sum(p.region_count for p in parts),
    }


def train(dataset: list[Scene], cfg: TrainConfig, eval_each_epoch: bool = True) -> tuple[DualModel, TrainHistory]:
    """Run the full self-labelling training loop and return the model and its history."""
    _check_dataset(dataset, cfg)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = DualModel(cfg.n_known, cfg.n_novel, cfg.widths, cfg.tau, cfg.input_scale)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total, 1), eta_min=cfg.lr_min)
    gamma_p, gamma_r = _GammaSchedule(cfg, total), _GammaSchedule(cfg, total)
    history = TrainHistory()

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for s in range(steps_per_epoch):
            batch = [(int(i), dataset[i]) for i in order[s * cfg.batch_size:(s + 1) * cfg.batch_size]]
            gp, gr = gamma_p.gamma(step, epoch), gamma_r.gamma(step, epoch)
            out = train_step_losses(model, batch, cfg, gp, gr, rng)
            loss = out["loss"]
            if not torch.isfinite(loss):
                raise DivergedLoss(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            model.bank.renormalize()

            total_value = float(loss.detach())
            ind = gc.indicator(gc.indicator(total_value, gp, out["kl_point"]), gr, out["kl_region"])
            history.records.append({
                "step": step, "epoch": epoch,
                "loss": total_value,
                "loss_s": float(out["ls"].detach()),
                "loss_up": float(out["lup"].detach()),
                "loss_ur": float(out["lur"].detach()),
                "kl_point": out["kl_point"], "kl_region": out["kl_region"],
                "gamma_point": gp, "gamma_region": gr,
                "indicator": ind,
                "n_regions": out["n_regions"],
            })
            gamma_p.observe(out["kl_point"])
            if out["plans_region"] is not None:
                gamma_r.observe(out["kl_region"])
            step += 1
        if eval_each_epoch or epoch == cfg.epochs - 1:
            metrics = evaluate_novel(model, dataset)
            metrics["epoch"] = epoch
            history.epoch_metrics.append(metrics)
            log.info("epoch %d: %s", epoch, metrics)
    return model, history


def evaluate_novel(model: DualModel, dataset: list[Scene]) -> dict:
    """Cluster quality on the unlabelled points: Hungarian-matched accuracy and the
    share of the largest predicted cluster."""
    preds, gts = [], []
    for scene in dataset:
        unl = ~scene.known_mask
        if unl.any():
            preds.append(model.predict(scene.points[unl], model.bank.novel_columns))
            gts.append(scene.labels[unl])
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    sizes = np.bincount(pred, minlength=model.bank.n_novel)
    return {
        "novel_accuracy": matched_accuracy(pred, gt),
        "largest_cluster_fraction": float(sizes.max() / sizes.sum()),
        "cluster_sizes": sizes.tolist(),
    }


def predict_full(model: DualModel, scene: Scene) -> np.ndarray:
    """Per-point prediction over all prototypes: known ids, or ``n_classes + k`` for novel cluster ``k``."""
    raw = model.predict(scene.points)
    n_classes = model.bank.n_known + model.bank.n_novel
    return np.where(raw < model.bank.n_known, raw, n_classes + raw - model.bank.n_known)


def evaluate_model(model: DualModel, dataset: list[Scene]):
    pred = np.concatenate([predict_full(model, s) for s in dataset])
    gt = np.concatenate([s.labels for s in dataset])
    n_known, n_novel = model.bank.n_known, model.bank.n_novel
    return evaluate_segmentation(pred, gt, range(n_known), range(n_known, n_known + n_novel), n_novel)


def estimate_novel_count(features, known_labels, max_classes: int, seed: int = 0, n_init: int = 10) -> int:
    """Pick the total class count whose k-means clustering best recovers the known labels.

    ``known_labels`` holds the class id of labelled points and ``UNKNOWN`` (-1)
    elsewhere.  Candidates run over ``n_known < k < max_classes``; each is scored
    by Hungarian-matched accuracy on the labelled points.  Ties (common when
    clusters merge or split only among unlabelled points) are broken by the
    silhouette score of the full clustering.
    """
    features = np.asarray(features, dtype=np.float64)
    known_labels = np.asarray(known_labels, dtype=np.int64)
    labelled = known_labels != UNKNOWN
    n_known = len(np.unique(known_labels[labelled]))
    candidates = list(range(n_known + 1, max_classes))
    if not candidates:
        raise EmptyRange(f"no candidate counts strictly between {n_known} and {max_classes}")
    rng = np.random.default_rng(seed)
    sil_idx = rng.choice(len(features), size=min(len(features), 2000), replace=False)

    best = None
    for k in candidates:
        km = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit(features)
        acc = matched_accuracy_rect(km.labels_[labelled], known_labels[labelled])
        sil = silhouette_score(features[sil_idx], km.labels_[sil_idx]) if k > 1 else -1.0
        key = (round(acc, 9), sil)
        if best is None or key > best[0]:
            best = (key, k)
    return best[1] - n_known


def matched_accuracy_rect(clusters, labels) -> float:
    """Accuracy of labelled points when each class is matched to a distinct cluster."""
    _, c = np.unique(clusters, return_inverse=True)
    _, l = np.unique(labels, return_inverse=True)
    cm = confusion_matrix(c, l, c.max() + 1, l.max() + 1)
    r, k = linear_sum_assignment(-cm)
    return float(cm[r, k].sum() / len(labels))


def hyperparam_search(dataset, rhos, Ts, cfg: TrainConfig) -> list[dict]:
    """One training run per (rho, T); rows sorted by final indicator (lowest first)."""
    rows = []
    for rho in rhos:
        for T in Ts:
            run_cfg = replace(cfg, rho=float(rho), T=int(T))
            model, hist = train(dataset, run_cfg, eval_each_epoch=False)
            rows.append({
                "rho": float(rho),
                "T": int(T),
                "indicator": hist.final_indicator(),
                "novel_accuracy": hist.epoch_metrics[-1]["novel_accuracy"],
                "history": hist,
            })
    if not rows:
        raise ValueError("empty hyperparameter grid")
    rows.sort(key=lambda r: r["indicator"])
    return rows
