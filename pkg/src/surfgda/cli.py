"""Command-line orchestration: synthesis, embedding, training, evaluation and sweeps.

Every command works inside one run directory (``work_dir`` in the config, or
``--out``)::

    data/        meshes with .scalar/.labels sidecars, manifest.csv, transforms.csv
    embed/       per-graph embedding and transform CSVs, summary.txt
    models/      checkpoints, architecture manifests, run.manifest
    metrics/     long-format metric CSVs and the evaluation table
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import DatasetConfig, Subject, domain_embedding, domain_transforms, make_subjects
from .mesh import MeshParseError, load_mesh, save_mesh
from .nets import DiscriminatorNet, PointwiseNet, SegmentatorNet, load_net, save_net
from .spectral import (AlignmentTransform, DegenerateSpectrumError, embed_graph,
                       load_embedding_csv, mean_nn_distance,
                       save_embedding_csv, save_transform_csv)
from .train import (SOURCE_DOMAIN, DataSplit, RunMetrics, Sample, TrainConfig,
                    balanced_dis_accuracy, evaluate, sweep_lambda, train_adversarial,
                    train_baseline_pointwise)

logger = logging.getLogger("surfgda")

CHECKPOINTS = {"Pointwise": "pointwise", "Seg-GCN": "seg_gcn", "Adv-GCN": "adv_gcn"}


class CliError(Exception):
    """An expected failure, reported as a single line without a traceback."""


# ----------------------------------------------------------------------------
# Experiment spec


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(text: str, default):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


# Config keys that differ from the dataclass field name.
_ALIASES = {"lambda": "lam"}


@dataclass
class ExperimentSpec:
    """Flat key-value experiment description.

    Keys are the fields of :class:`DatasetConfig` and :class:`TrainConfig`
    (``lambda`` for the adversarial weight), plus ``work_dir`` and
    ``sweep_lambdas`` (comma-separated).
    """

    data: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    work_dir: str = "run"
    sweep_lambdas: tuple[float, ...] = (0.1, 1.0, 10.0)

    @classmethod
    def known_keys(cls) -> list[str]:
        train_keys = ["lambda" if k == "lam" else k for k in TrainConfig.field_names()
                      if k not in ("seed", "k")]
        return sorted(set(DatasetConfig.field_names()) | set(train_keys) | {"work_dir", "sweep_lambdas"})

    @classmethod
    def from_items(cls, items: dict[str, str]) -> ExperimentSpec:
        unknown = sorted(set(items) - set(cls.known_keys()))
        if unknown:
            raise CliError(f"unknown config key(s): {', '.join(unknown)}")
        d_def, t_def = DatasetConfig(), TrainConfig()
        d_kw, t_kw = {}, {}
        spec_kw: dict = {}
        try:
            for key, text in items.items():
                name = _ALIASES.get(key, key)
                if key == "work_dir":
                    spec_kw["work_dir"] = text.strip()
                elif key == "sweep_lambdas":
                    spec_kw["sweep_lambdas"] = tuple(float(v) for v in text.split(",") if v.strip())
                elif name in DatasetConfig.field_names():
                    d_kw[name] = _convert(text, getattr(d_def, name))
                else:
                    t_kw[name] = _convert(text, getattr(t_def, name))
            data = DatasetConfig(**d_kw)
            # one experiment seed and one embedding dimension drive both halves
            train = TrainConfig(**{**t_kw, "seed": data.seed, "k": data.k})
        except ValueError as exc:
            raise CliError(f"invalid config: {exc}") from None
        spec = cls(data, train, **spec_kw)
        if not spec.sweep_lambdas or any(v < 0 for v in spec.sweep_lambdas):
            raise CliError("invalid config: sweep_lambdas must be a non-empty list of values >= 0")
        return spec

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc.strerror}") from None
        items = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in items:
                raise CliError(f"{path}:{n}: duplicate key {key!r}")
            items[key] = value
        return cls.from_items(items)

    def with_overrides(self, seed=None, lam=None, out=None) -> ExperimentSpec:
        data, train, work = self.data, self.train, self.work_dir
        try:
            if seed is not None:
                data = DatasetConfig(**{**asdict(data), "seed": seed})
                train = TrainConfig(**{**asdict(train), "seed": seed})
            if lam is not None:
                train = TrainConfig(**{**asdict(train), "lam": lam})
        except ValueError as exc:
            raise CliError(f"invalid override: {exc}") from None
        if out is not None:
            work = str(out)
        return ExperimentSpec(data, train, work, self.sweep_lambdas)

    def items(self) -> dict[str, str]:
        """Every key with its effective value, in canonical text form."""
        out = {f.name: _fmt(getattr(self.data, f.name)) for f in fields(DatasetConfig)}
        for f in fields(TrainConfig):
            if f.name not in ("seed", "k"):
                out["lambda" if f.name == "lam" else f.name] = _fmt(getattr(self.train, f.name))
        out["sweep_lambdas"] = ",".join(_fmt(v) for v in self.sweep_lambdas)
        return dict(sorted(out.items()))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ----------------------------------------------------------------------------
# Run directory layout


class RunDir:
    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.embed = self.root / "embed"
        self.models = self.root / "models"
        self.metrics = self.root / "metrics"

    def mesh(self, name: str) -> Path:
        return self.data / f"{name}.off"

    def checkpoint(self, stem: str) -> Path:
        return self.models / f"{stem}.smgc"


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, newline="\n")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from None


def _read_manifest(rd: RunDir) -> list[tuple[str, str, str, int]]:
    path = rd.data / "manifest.csv"
    if not path.exists():
        raise CliError(f"no dataset at {rd.data} (run 'synth' first)")
    rows = []
    for line in path.read_text().splitlines()[1:]:
        if line:
            name, split, domain, seed = line.split(",")
            rows.append((name, split, domain, int(seed)))
    return rows


def _data_spec_lines(spec: ExperimentSpec) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(spec.data, f.name))}\n" for f in fields(DatasetConfig))


def _check_dataset_matches(rd: RunDir, spec: ExperimentSpec) -> None:
    path = rd.data / "spec.txt"
    if path.exists() and path.read_text() != _data_spec_lines(spec):
        raise CliError(f"{path}: dataset was synthesized with a different config")


# ----------------------------------------------------------------------------
# Commands


def cmd_synth(spec: ExperimentSpec, force: bool = False) -> RunDir:
    rd = RunDir(spec.work_dir)
    manifest = rd.data / "manifest.csv"
    if manifest.exists() and not force:
        raise CliError(f"{rd.data} already holds a dataset (use --force to overwrite)")
    subjects = make_subjects(spec.data)
    try:
        rd.data.mkdir(parents=True, exist_ok=True)
        for s in subjects:
            save_mesh(s.graph, rd.mesh(s.name))
    except OSError as exc:
        raise CliError(f"cannot write dataset to {rd.data}: {exc.strerror}") from None
    lines = ["name,split,domain,seed"] + [f"{s.name},{s.split},{s.domain},{s.seed}" for s in subjects]
    _write_text(manifest, "\n".join(lines) + "\n")
    tlines = [f"{d}," + ",".join(repr(float(v)) for v in t.rotation.ravel())
              for d, t in domain_transforms(spec.data).items()]
    _write_text(rd.data / "transforms.csv", "".join(line + "\n" for line in tlines))
    _write_text(rd.data / "spec.txt", _data_spec_lines(spec))
    print(f"wrote {len(subjects)} graphs to {rd.data}")
    return rd


def _load_subjects(rd: RunDir, spec: ExperimentSpec) -> list[Subject]:
    _check_dataset_matches(rd, spec)
    out = []
    for name, split, domain, seed in _read_manifest(rd):
        try:
            g = load_mesh(rd.mesh(name), spec.data.num_parcels)
        except FileNotFoundError:
            raise CliError(f"missing mesh {rd.mesh(name)}") from None
        out.append(Subject(name, split, domain, g, seed))
    return out


def _load_transforms(rd: RunDir, k: int) -> dict[str, AlignmentTransform]:
    out = {}
    for line in (rd.data / "transforms.csv").read_text().splitlines():
        if line:
            domain, *vals = line.split(",")
            out[domain] = AlignmentTransform(np.array([float(v) for v in vals]).reshape(k, k))
    return out


def _mean_pairwise_discrepancy(coords: list[np.ndarray]) -> float:
    vals = [mean_nn_distance(a, b) for i, a in enumerate(coords) for j, b in enumerate(coords) if i != j]
    return float(np.mean(vals))


def cmd_embed(spec: ExperimentSpec, force: bool = False, reference: str | None = None) -> RunDir:
    rd = RunDir(spec.work_dir)
    if rd.embed.exists() and any(rd.embed.iterdir()) and not force:
        raise CliError(f"{rd.embed} already exists (use --force to overwrite)")
    subjects = _load_subjects(rd, spec)
    transforms = _load_transforms(rd, spec.data.k)
    raw, bad = {}, []
    for s in subjects:
        try:
            raw[s.name] = embed_graph(s.graph, spec.data.k, spec.data.epsilon, spec.data.exponent)
        except (DegenerateSpectrumError, ValueError) as exc:
            bad.append(f"{s.name} ({exc})")
    if bad:
        raise CliError(f"cannot embed {len(bad)} graph(s): {'; '.join(bad)}")
    sources = [s.name for s in subjects if s.split == "train" and s.domain == SOURCE_DOMAIN]
    ref = reference or sources[0]
    if ref not in raw:
        raise CliError(f"unknown reference graph {ref!r}")
    aligned = {}
    for s in subjects:
        e, t = domain_embedding(raw[s.name], s.domain, raw[ref], transforms)
        aligned[s.name] = e
        rd.embed.mkdir(parents=True, exist_ok=True)
        save_embedding_csv(e, rd.embed / f"{s.name}.csv")
        save_transform_csv(t, rd.embed / f"{s.name}.transform.csv")
    before = _mean_pairwise_discrepancy([raw[n].coords for n in sources])
    after = _mean_pairwise_discrepancy([aligned[n].coords for n in sources])
    summary = (f"reference = {ref}\n"
               f"source_pairwise_discrepancy_before = {before:.12g}\n"
               f"source_pairwise_discrepancy_after = {after:.12g}\n")
    _write_text(rd.embed / "summary.txt", summary)
    print(f"embedded {len(subjects)} graphs; source discrepancy {before:.4f} -> {after:.4f}")
    return rd


def load_split(spec: ExperimentSpec) -> DataSplit:
    """Rebuild the training/evaluation split from a run directory on disk."""
    rd = RunDir(spec.work_dir)
    subjects = _load_subjects(rd, spec)
    source, target = [], []
    val: dict[str, list[Sample]] = {}
    test: dict[str, list[Sample]] = {}
    for s in subjects:
        path = rd.embed / f"{s.name}.csv"
        if not path.exists():
            raise CliError(f"missing embedding {path} (run 'embed' first)")
        e = load_embedding_csv(path)
        e.exponent = spec.data.exponent
        if s.split == "train":
            if s.domain == SOURCE_DOMAIN:
                source.append(Sample(s.name, s.graph, e, s.domain))
            else:
                target.append(Sample(s.name, s.graph, e, s.domain, keep_labels=False))
        else:
            (val if s.split == "val" else test).setdefault(s.domain, []).append(
                Sample(s.name, s.graph, e, s.domain))
    if not source:
        raise CliError("dataset has no source training graphs")
    return DataSplit(source, target, val, test)


def _nets(spec: ExperimentSpec):
    c, t = spec.data.num_parcels, spec.train
    return (SegmentatorNet(c, num_kernels=t.num_kernels, embed_dim=t.k),
            DiscriminatorNet(c, num_kernels=t.num_kernels, embed_dim=t.k))


def _save(net, rd: RunDir, stem: str) -> None:
    try:
        rd.models.mkdir(parents=True, exist_ok=True)
        save_net(net, rd.checkpoint(stem))
    except OSError as exc:
        raise CliError(f"cannot write {rd.checkpoint(stem)}: {exc.strerror}") from None


def _write_run_manifest(rd: RunDir, spec: ExperimentSpec) -> None:
    text = "".join(f"{k} = {v}\n" for k, v in spec.items().items())
    _write_text(rd.models / "run.manifest", text)


def _check_run_manifest(rd: RunDir, spec: ExperimentSpec) -> None:
    path = rd.models / "run.manifest"
    if not path.exists():
        return
    stored = dict(line.split(" = ", 1) for line in path.read_text().splitlines() if line)
    current = spec.items()
    # lambda and sweep values may legitimately differ between commands
    diff = sorted(k for k in current if k not in ("lambda", "sweep_lambdas")
                  and stored.get(k) != current[k])
    if diff:
        raise CliError(f"{path}: config differs from the trained checkpoints in {', '.join(diff)}")


def cmd_train(spec: ExperimentSpec) -> dict[str, RunMetrics]:
    """Train Seg-GCN (no adversarial term) and Adv-GCN at the configured lambda."""
    rd = RunDir(spec.work_dir)
    split = load_split(spec)
    _check_run_manifest(rd, spec)
    out = {}
    seg, _ = _nets(spec)
    seg, _, m = train_adversarial(split, seg, None, TrainConfig(**{**asdict(spec.train), "lam": 0.0}))
    out["seg_gcn"] = m
    _save(seg, rd, "seg_gcn")
    seg, dis = _nets(spec)
    seg, dis, m = train_adversarial(split, seg, dis, spec.train)
    out["adv_gcn"] = m
    _save(seg, rd, "adv_gcn")
    _save(dis, rd, "adv_dis")
    _write_run_manifest(rd, spec)
    for stem, metrics in out.items():
        _write_text(rd.metrics / f"{stem}.csv", metrics.to_csv())
    print(f"trained Seg-GCN and Adv-GCN (lambda={spec.train.lam:g}) into {rd.models}")
    return out


def cmd_baseline(spec: ExperimentSpec) -> RunMetrics:
    rd = RunDir(spec.work_dir)
    split = load_split(spec)
    _check_run_manifest(rd, spec)
    net, m = train_baseline_pointwise(split, spec.train)
    _save(net, rd, "pointwise")
    _write_run_manifest(rd, spec)
    _write_text(rd.metrics / "pointwise.csv", m.to_csv())
    print(f"trained pointwise baseline into {rd.models}")
    return m


def _load_checkpoint(rd: RunDir, stem: str, net):
    path = rd.checkpoint(stem)
    if not path.exists():
        raise CliError(f"missing checkpoint {path}")
    try:
        return load_net(net, path)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def format_table(results: dict[str, dict], domains: list[str]) -> str:
    """Methods as rows, domains as columns, Dice as ``mean±std`` in percent."""
    head = ["Method"] + [d.capitalize() for d in domains]
    rows = [head]
    for method, res in results.items():
        rows.append([method] + [f"{100 * res[d]['dice_mean']:.1f}±{100 * res[d]['dice_std']:.1f}"
                                for d in domains])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def cmd_eval(spec: ExperimentSpec) -> dict[str, dict]:
    rd = RunDir(spec.work_dir)
    _check_run_manifest(rd, spec)
    split = load_split(spec)
    if not split.test:
        raise CliError("dataset has no test graphs")
    seg, dis = _nets(spec)
    nets = {
        "Pointwise": _load_checkpoint(rd, "pointwise", PointwiseNet(spec.data.num_parcels)),
        "Seg-GCN": _load_checkpoint(rd, "seg_gcn", _nets(spec)[0]),
        "Adv-GCN": _load_checkpoint(rd, "adv_gcn", seg),
    }
    dis = _load_checkpoint(rd, "adv_dis", dis)
    results = {name: evaluate(net, split.test, dis if name == "Adv-GCN" else None)
               for name, net in nets.items()}
    domains = list(split.test)
    table = format_table(results, domains)
    lines = ["method,domain,dice_mean,dice_std,dis_acc"]
    for method, res in results.items():
        for d in domains:
            acc = res[d]["dis_acc"]
            lines.append(f"{method},{d},{res[d]['dice_mean']:.12g},{res[d]['dice_std']:.12g},"
                         + ("" if acc is None else f"{acc:.12g}"))
    _write_text(rd.metrics / "table.csv", "\n".join(lines) + "\n")
    _write_text(rd.metrics / "table.txt", table)
    for method, res in results.items():
        m = RunMetrics(final=res)
        _write_text(rd.metrics / f"eval_{CHECKPOINTS[method]}.csv", m.to_csv())
    print(table, end="")
    print(f"Adv-GCN balanced discriminator accuracy: {balanced_dis_accuracy(results['Adv-GCN']):.3f}")
    return results


def cmd_sweep(spec: ExperimentSpec) -> dict[float, dict]:
    rd = RunDir(spec.work_dir)
    split = load_split(spec)
    runs = sweep_lambda(split, spec.train, spec.sweep_lambdas)
    parts = []
    for i, (lam, run) in enumerate(runs.items()):
        text = run["metrics"].to_csv(prefix=(("lambda", _fmt(lam)),))
        parts.append(text if i == 0 else text.split("\n", 1)[1])
    _write_text(rd.metrics / "sweep.csv", "".join(parts))
    for lam, run in runs.items():
        m = run["metrics"]
        dice = m.track("val/target_dice")[-1] if m.epochs and "val/target_dice" in m.epochs[-1] else float("nan")
        acc = balanced_dis_accuracy(m.final) if m.final else float("nan")
        print(f"lambda={lam:g}  final val target Dice={dice:.3f}  test dis acc={acc:.3f}")
    return runs


# ----------------------------------------------------------------------------
# Entry point


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="experiment seed (data and training)")
    common.add_argument("--lambda", dest="lam", type=float, help="adversarial weight")
    common.add_argument("--out", help="run directory (overrides work_dir)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics")
    p = argparse.ArgumentParser(prog="surfgda", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write the synthetic dataset")
    e = sub.add_parser("embed", parents=[common], help="spectral embedding and alignment")
    e.add_argument("--reference", help="reference graph name (default: first source graph)")
    sub.add_parser("train", parents=[common], help="train Seg-GCN and Adv-GCN")
    sub.add_parser("baseline", parents=[common], help="train the pointwise baseline")
    sub.add_parser("eval", parents=[common], help="evaluate all methods on every test domain")
    sub.add_parser("sweep", parents=[common], help="adversarial runs over sweep_lambdas")
    return p


def _threads() -> int:
    text = os.environ.get("SMA_THREADS", "1")
    try:
        n = int(text)
    except ValueError:
        raise CliError(f"SMA_THREADS must be a positive integer, got {text!r}") from None
    if n < 1:
        raise CliError(f"SMA_THREADS must be a positive integer, got {text!r}")
    return n


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    spec = ExperimentSpec.load(args.config) if args.config else ExperimentSpec()
    spec = spec.with_overrides(args.seed, args.lam, args.out)
    with threadpool_limits(limits=_threads()):
        if args.command == "synth":
            cmd_synth(spec, args.force)
        elif args.command == "embed":
            cmd_embed(spec, args.force, args.reference)
        elif args.command == "train":
            cmd_train(spec)
        elif args.command == "baseline":
            cmd_baseline(spec)
        elif args.command == "eval":
            cmd_eval(spec)
        elif args.command == "sweep":
            cmd_sweep(spec)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (CliError, MeshParseError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        print(f"error: {exc.strerror or exc}{where}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
