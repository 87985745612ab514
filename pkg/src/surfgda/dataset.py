"""Synthetic multi-domain datasets: subjects, spectral alignment and domain transforms."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .mesh import SurfaceGraph, synth_sphere
from .spectral import (AlignmentTransform, SpectralEmbedding, apply_transform, embed_graph,
                       icp_align, random_domain_transform, sign_flip_transform)
from .train import SOURCE_DOMAIN, DataSplit, Sample

UNALIGNED_DOMAIN = "none"
TRANSFORM_KINDS = ("signflip", "signed-permutation", "rotation")


@dataclass
class DatasetConfig:
    subdiv: int = 3
    num_parcels: int = 8
    bump_amp: float = 0.3
    variability: float = 0.05
    parcel_depth: float = 0.0
    template_seed: int = 1
    seed: int = 42
    n_train_source: int = 40
    n_train_target: int = 40
    n_val: int = 4
    n_test: int = 20
    num_targets: int = 4
    transform_kind: str = "signflip"
    k: int = 3
    epsilon: float = 1e-6
    exponent: float = -0.5
    shuffle_nodes: bool = True

    def __post_init__(self):
        if self.transform_kind not in TRANSFORM_KINDS:
            raise ValueError(f"transform_kind must be one of {TRANSFORM_KINDS}")
        if self.n_train_source < 1:
            raise ValueError("need at least one source training graph")
        for name in ("n_train_target", "n_val", "n_test", "num_targets"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def domains(self) -> list[str]:
        return [SOURCE_DOMAIN, UNALIGNED_DOMAIN] + [f"target{t + 1}" for t in range(self.num_targets)]


@dataclass
class Subject:
    name: str
    split: str          # train / val / test
    domain: str
    graph: SurfaceGraph
    seed: int


def domain_transforms(cfg: DatasetConfig) -> dict[str, AlignmentTransform]:
    """Fixed per-domain transforms applied on top of the source alignment."""
    out = {}
    for t in range(cfg.num_targets):
        seed = cfg.seed * 1000 + 17 * (t + 1)
        if cfg.transform_kind == "signflip":
            out[f"target{t + 1}"] = sign_flip_transform(cfg.k, seed)
        else:
            out[f"target{t + 1}"] = random_domain_transform(
                cfg.k, seed, allow_rotation=cfg.transform_kind == "rotation")
    return out


def make_subjects(cfg: DatasetConfig) -> list[Subject]:
    """All subject meshes with their split and domain assignment.

    Training targets are spread round-robin over the misaligned domains.
    """
    misaligned = cfg.domains[1:]
    plan = [("train", SOURCE_DOMAIN)] * cfg.n_train_source
    plan += [("train", misaligned[i % len(misaligned)]) for i in range(cfg.n_train_target)]
    for split, count in (("val", cfg.n_val), ("test", cfg.n_test)):
        for domain in cfg.domains:
            plan += [(split, domain)] * count
    seeds = np.random.SeedSequence([cfg.seed, 7]).generate_state(len(plan))
    subjects = []
    counters: dict[tuple[str, str], int] = {}
    for (split, domain), seed in zip(plan, seeds):
        seed = int(seed)
        g = synth_sphere(cfg.subdiv, cfg.num_parcels, cfg.bump_amp, seed,
                         template_seed=cfg.template_seed, variability=cfg.variability,
                         parcel_depth=cfg.parcel_depth)
        if cfg.shuffle_nodes:
            g = g.permuted(np.random.default_rng(seed).permutation(g.num_nodes))
        n = counters.get((split, domain), 0)
        counters[(split, domain)] = n + 1
        subjects.append(Subject(f"{split}_{domain}_{n:03d}", split, domain, g, seed))
    return subjects


def domain_embedding(raw: SpectralEmbedding, domain: str, reference: SpectralEmbedding,
                     transforms: dict[str, AlignmentTransform]) -> tuple[SpectralEmbedding, AlignmentTransform]:
    """Embedding as seen in ``domain`` and the total transform applied to ``raw``."""
    k = raw.k
    if domain == UNALIGNED_DOMAIN:
        t = AlignmentTransform(np.eye(k), 0.0)
        return raw, t
    align = icp_align(raw, reference)
    rot = align.rotation
    if domain != SOURCE_DOMAIN:
        rot = rot @ transforms[domain].rotation
    t = AlignmentTransform(rot, align.residual, align.history)
    return apply_transform(raw, t), t


def build_split(cfg: DatasetConfig, subjects: list[Subject] | None = None,
                embeddings: dict[str, SpectralEmbedding] | None = None) -> DataSplit:
    """Embed, align and wrap every subject into a :class:`DataSplit`.

    ``embeddings`` may carry precomputed domain embeddings keyed by subject name.
    """
    subjects = make_subjects(cfg) if subjects is None else subjects
    if embeddings is None:
        embeddings = embed_subjects(cfg, subjects)[0]
    source, target = [], []
    val: dict[str, list[Sample]] = {d: [] for d in cfg.domains} if cfg.n_val else {}
    test: dict[str, list[Sample]] = {d: [] for d in cfg.domains} if cfg.n_test else {}
    for s in subjects:
        e = embeddings[s.name]
        if s.split == "train":
            if s.domain == SOURCE_DOMAIN:
                source.append(Sample(s.name, s.graph, e, s.domain))
            else:
                target.append(Sample(s.name, s.graph, e, s.domain, keep_labels=False))
        else:
            (val if s.split == "val" else test)[s.domain].append(Sample(s.name, s.graph, e, s.domain))
    return DataSplit(source, target, val, test)


def embed_subjects(cfg: DatasetConfig, subjects: list[Subject]):
    """Domain embeddings and transforms for every subject.

    The reference is the first source training subject.
    """
    transforms = domain_transforms(cfg)
    raw = {s.name: embed_graph(s.graph, cfg.k, cfg.epsilon, cfg.exponent) for s in subjects}
    ref_name = next(s.name for s in subjects if s.split == "train" and s.domain == SOURCE_DOMAIN)
    reference = raw[ref_name]
    out, applied = {}, {}
    for s in subjects:
        out[s.name], applied[s.name] = domain_embedding(raw[s.name], s.domain, reference, transforms)
    return out, applied, raw, ref_name
