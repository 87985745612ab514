"""Adversarial segmentator / discriminator training, baselines and evaluation."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .losses import bce, class_weights, dice_metric, one_hot, seg_loss
from .mesh import SurfaceGraph
from .nets import DiscriminatorNet, GraphInput, PointwiseNet, SegmentatorNet
from .spectral import SpectralEmbedding

logger = logging.getLogger(__name__)

SOURCE_DOMAIN = "source"


@dataclass
class TrainConfig:
    lam: float = 1.0
    lr_seg: float = 1e-3
    lr_dis: float = 1e-3
    epochs: int = 25
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    ce_form: str = "log"
    class_weight_mode: str = "inverse-frequency"
    dice_eps: float = 1e-6
    k: int = 3
    adv_on_source: bool = False
    train_discriminator: bool = True
    num_kernels: int = 6

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr_seg <= 0 or self.lr_dis <= 0:
            raise ValueError("learning rates must be positive")
        if self.ce_form not in ("log", "linear"):
            raise ValueError(f"unknown ce-form {self.ce_form!r}")
        if self.class_weight_mode not in ("uniform", "inverse-frequency"):
            raise ValueError(f"unknown class-weight mode {self.class_weight_mode!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class Sample:
    """One graph ready for training or evaluation."""

    def __init__(self, name: str, graph: SurfaceGraph, embedding: SpectralEmbedding,
                 domain: str, keep_labels: bool = True):
        self.name = name
        self.domain = domain
        self.z = 1.0 if domain == SOURCE_DOMAIN else 0.0
        self.num_parcels = graph.num_parcels
        self.labels = graph.labels.copy() if keep_labels and graph.labels is not None else None
        self.gin = GraphInput.build(graph, embedding)

    @property
    def is_source(self) -> bool:
        return self.z == 1.0

    def onehot(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"{self.name} has no labels")
        return one_hot(self.labels, self.num_parcels)


@dataclass
class DataSplit:
    """Labeled source graphs, unlabeled target graphs, held-out graphs per domain.

    Target training samples are built with ``keep_labels=False``, so no loss can
    read their labels.
    """

    source: list[Sample]
    target: list[Sample]
    val: dict[str, list[Sample]] = field(default_factory=dict)
    test: dict[str, list[Sample]] = field(default_factory=dict)

    def __post_init__(self):
        for s in self.target:
            s.labels = None

    @property
    def num_parcels(self) -> int:
        return self.source[0].num_parcels

    @property
    def domains(self) -> list[str]:
        return list(self.test)


@dataclass
class RunMetrics:
    """Per-epoch tracks plus optional final per-domain evaluation rows."""

    epochs: list[dict[str, float]] = field(default_factory=list)
    final: dict[str, dict] = field(default_factory=dict)

    def track(self, name: str) -> list[float]:
        return [row[name] for row in self.epochs]

    def rows(self):
        """Long-format ``(epoch, split, metric, value)`` tuples; final rows use epoch ``final``."""
        for e, row in enumerate(self.epochs, start=1):
            for key in sorted(row):
                split, metric = key.split("/", 1)
                yield str(e), split, metric, row[key]
        for domain, res in self.final.items():
            yield "final", domain, "dice_mean", res["dice_mean"]
            yield "final", domain, "dice_std", res["dice_std"]
            if res.get("dis_acc") is not None:
                yield "final", domain, "dis_acc", res["dis_acc"]
            for c, v in enumerate(res["per_parcel"]):
                yield "final", domain, f"dice_parcel_{c}", v

    def to_csv(self, prefix: tuple[tuple[str, str], ...] = ()) -> str:
        """CSV text with a header row; ``prefix`` prepends fixed leading columns as
        ``(name, value)`` pairs, e.g. ``(("lambda", "1"),)``."""
        buf = io.StringIO()
        head = [name for name, _ in prefix] + ["epoch", "split", "metric", "value"]
        lead = "".join(f"{v}," for _, v in prefix)
        buf.write(",".join(head) + "\n")
        for epoch, split, metric, value in self.rows():
            buf.write(f"{lead}{epoch},{split},{metric},{value:.12g}\n")
        return buf.getvalue()


def _seeds(seed: int):
    """Independent streams for segmentator init, discriminator init and shuffling."""
    a, b, c = np.random.SeedSequence(seed).spawn(3)
    return (int(a.generate_state(1)[0]), int(b.generate_state(1)[0]),
            np.random.default_rng(c))


def _check_finite(value: float, step: int, name: str, what: str):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what} loss {value} at step {step} on graph {name}")


def predict(net, sample: Sample) -> np.ndarray:
    return net(sample.gin).value


def _validation(seg, dis, split: DataSplit, row: dict) -> None:
    if not split.val:
        return
    tgt_dice, src_hits, tgt_hits = [], [], []
    for domain, samples in split.val.items():
        for s in samples:
            probs = seg(s.gin)
            if s.labels is not None and domain != SOURCE_DOMAIN:
                tgt_dice.append(dice_metric(probs.value.argmax(1), s.labels, s.num_parcels)[1])
            if dis is not None:
                hit = float((dis(probs.detach(), s.gin).item() > 0.5) == s.is_source)
                (src_hits if s.is_source else tgt_hits).append(hit)
    if tgt_dice:
        row["val/target_dice"] = float(np.mean(tgt_dice))
    if src_hits and tgt_hits:
        row["val/dis_acc"] = 0.5 * (np.mean(src_hits) + np.mean(tgt_hits))


def train_adversarial(split: DataSplit, seg: SegmentatorNet, dis: DiscriminatorNet | None,
                      cfg: TrainConfig, init: bool = True):
    """Alternate one segmentator step and one discriminator step per graph.

    Source graphs give the segmentator its supervised loss; target graphs give
    ``lam * bce(D(S(G)), 1)``. The discriminator then sees the detached
    segmentation with the true domain label. ``dis=None`` or
    ``cfg.train_discriminator=False`` drops the discriminator branch.
    """
    if not split.source:
        raise ValueError("empty source set")
    seg_seed, dis_seed, rng = _seeds(cfg.seed)
    use_dis = dis is not None and cfg.train_discriminator
    if init:
        seg.init_params(seg_seed)
        if dis is not None:
            dis.init_params(dis_seed)
    weights = class_weights([s.labels for s in split.source], split.num_parcels,
                            cfg.class_weight_mode)
    adam = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps_opt)
    seg_opt = dc.Adam(seg.parameters(), lr=cfg.lr_seg, **adam)
    dis_opt = dc.Adam(dis.parameters(), lr=cfg.lr_dis, **adam) if use_dis else None
    onehots = {id(s): s.onehot() for s in split.source}
    graphs = split.source + split.target
    adversarial = use_dis and cfg.lam > 0
    metrics = RunMetrics()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(graphs))
        seg_losses, dis_losses, hits = [], [], []
        for idx in order:
            s = graphs[idx]
            if not s.is_source and not use_dis:
                continue
            probs = seg(s.gin)
            loss = None
            if s.is_source:
                loss = seg_loss(probs, onehots[id(s)], weights, cfg.dice_eps, cfg.ce_form).total
                seg_losses.append(loss.item())
                if adversarial and cfg.adv_on_source:
                    loss = loss + bce(dis(probs, s.gin), 0.0) * cfg.lam
            elif adversarial:
                loss = bce(dis(probs, s.gin), 1.0) * cfg.lam
            if loss is not None:
                _check_finite(loss.item(), step, s.name, "segmentator")
                seg_opt.zero_grad()
                dc.backward(loss)
                seg_opt.step()
            if use_dis:
                dis_opt.zero_grad()
                z_hat = dis(probs.detach(), s.gin)
                d_loss = bce(z_hat, s.z)
                _check_finite(d_loss.item(), step, s.name, "discriminator")
                dc.backward(d_loss)
                dis_opt.step()
                dis_losses.append(d_loss.item())
                hits.append(float((z_hat.item() > 0.5) == s.is_source))
            seg.zero_grad()
            step += 1
        row = {"train/seg_loss": float(np.mean(seg_losses))}
        if use_dis:
            row["train/dis_loss"] = float(np.mean(dis_losses))
            row["train/dis_acc"] = float(np.mean(hits))
        _validation(seg, dis if use_dis else None, split, row)
        metrics.epochs.append(row)
        logger.info("epoch %d %s", epoch + 1, " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    return seg, dis, metrics


def train_supervised(split: DataSplit, net, cfg: TrainConfig, init: bool = True):
    """Source-only supervised training of any per-graph net (the pointwise baseline)."""
    if not split.source:
        raise ValueError("empty source set")
    seg_seed, _, rng = _seeds(cfg.seed)
    if init:
        net.init_params(seg_seed)
    weights = class_weights([s.labels for s in split.source], split.num_parcels,
                            cfg.class_weight_mode)
    opt = dc.Adam(net.parameters(), lr=cfg.lr_seg, beta1=cfg.beta1, beta2=cfg.beta2,
                  eps=cfg.eps_opt)
    metrics = RunMetrics()
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in rng.permutation(len(split.source)):
            s = split.source[idx]
            loss = seg_loss(net(s.gin), s.onehot(), weights, cfg.dice_eps, cfg.ce_form).total
            _check_finite(loss.item(), step, s.name, "segmentation")
            opt.zero_grad()
            dc.backward(loss)
            opt.step()
            losses.append(loss.item())
            step += 1
        row = {"train/seg_loss": float(np.mean(losses))}
        _validation(net, None, split, row)
        metrics.epochs.append(row)
    return net, metrics


def train_baseline_pointwise(split: DataSplit, cfg: TrainConfig):
    """Pointwise MLP on the same node features; ``cfg.lam`` is ignored."""
    net = PointwiseNet(split.num_parcels, in_features=split.source[0].gin.features.shape[1])
    return train_supervised(split, net, cfg)


def evaluate(net, domains: dict[str, list[Sample]], dis: DiscriminatorNet | None = None) -> dict:
    """Per-domain mean/std of per-graph mean Dice, per-parcel Dice, discriminator accuracy."""
    out = {}
    for domain, samples in domains.items():
        scores, per_parcel, hits = [], [], []
        for s in samples:
            probs = net(s.gin)
            per, mean = dice_metric(probs.value.argmax(axis=1), s.labels, s.num_parcels)
            scores.append(mean)
            per_parcel.append(per)
            if dis is not None:
                hits.append(float((dis(probs.detach(), s.gin).item() > 0.5) == s.is_source))
        per_parcel = np.array(per_parcel)
        with np.errstate(all="ignore"):
            pp = np.array([np.nanmean(col) if np.any(~np.isnan(col)) else np.nan
                           for col in per_parcel.T])
        out[domain] = {
            "dice_mean": float(np.mean(scores)),
            "dice_std": float(np.std(scores)),
            "per_parcel": pp,
            "per_graph": scores,
            "dis_acc": float(np.mean(hits)) if hits else None,
        }
    return out


def balanced_dis_accuracy(results: dict) -> float:
    """Mean of source-domain accuracy and pooled accuracy over the other domains."""
    src = results[SOURCE_DOMAIN]["dis_acc"]
    others = [r["dis_acc"] for d, r in results.items() if d != SOURCE_DOMAIN]
    return 0.5 * (src + float(np.mean(others)))


def sweep_lambda(split: DataSplit, cfg: TrainConfig, values) -> dict[float, dict]:
    """One full adversarial run per lambda with shared seed and initialization."""
    values = list(values)
    if not values:
        raise ValueError("no lambda values given")
    num_parcels = split.num_parcels
    out = {}
    for lam in values:
        run_cfg = TrainConfig(**{**vars(cfg), "lam": float(lam)})
        seg = SegmentatorNet(num_parcels, num_kernels=cfg.num_kernels, embed_dim=cfg.k)
        dis = DiscriminatorNet(num_parcels, num_kernels=cfg.num_kernels, embed_dim=cfg.k)
        seg, dis, metrics = train_adversarial(split, seg, dis, run_cfg)
        if split.test:
            metrics.final = evaluate(seg, split.test, dis)
        out[float(lam)] = {"seg": seg, "dis": dis, "metrics": metrics}
    return out
