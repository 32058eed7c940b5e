"""Training loop, multi-seed evaluation, perturbation studies, dumps and the
synthetic mixed-homophily benchmark."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from . import autodiff as ad
from .errors import ConfigError, TrainingDiverged
from .graph import (Graph, Split, build_normalized_laplacian, connected_components,
                    make_splits, partition_cut_removal, remove_edges_random)
from .model import VARIANTS, ModelParams, forward, loss
from .spectral import SpectralDecomposition, eig_sym, read_eigencache
from .ssm import FilterCoefficients

log = logging.getLogger(__name__)


# default hyper-parameters per benchmark (gamma, lr, hidden, fc layers, wd, epochs)
BENCHMARK_HPARAMS = {
    "cora": dict(gamma=1.0, lr=0.1, hidden_units=16, fc_layers=1, weight_decay=5e-4, epochs=1000),
    "citeseer": dict(gamma=1.0, lr=0.1, hidden_units=16, fc_layers=1, weight_decay=5e-4, epochs=1000),
    "pubmed": dict(gamma=5.0, lr=0.1, hidden_units=32, fc_layers=1, weight_decay=5e-4, epochs=1000),
    "photo": dict(gamma=5.0, lr=0.01, hidden_units=32, fc_layers=1, weight_decay=5e-4, epochs=1000),
    "chameleon": dict(gamma=1.0, lr=0.01, hidden_units=16, fc_layers=2, weight_decay=5e-4, epochs=1000),
    "squirrel": dict(gamma=1.0, lr=0.01, hidden_units=32, fc_layers=2, weight_decay=5e-4, epochs=1000),
    "actor": dict(gamma=0.1, lr=0.01, hidden_units=16, fc_layers=1, weight_decay=5e-4, epochs=1000),
    "texas": dict(gamma=5.0, lr=0.1, hidden_units=8, fc_layers=1, weight_decay=5e-4, epochs=1000),
    "cornell": dict(gamma=0.5, lr=0.1, hidden_units=8, fc_layers=1, weight_decay=5e-4, epochs=1000),
}


@dataclass
class ExperimentConfig:
    dataset: str = ""
    gamma: float = 1.0
    lr: float = 0.01
    hidden_units: int = 16
    fc_layers: int = 1
    weight_decay: float = 5e-4
    epochs: int = 1000
    d_state: int = 16
    ssm_layers: int = 2
    variant: str = "ssm-bi"
    seeds: list = field(default_factory=lambda: list(range(10)))
    eigencache: str | None = None
    filter_width: int | None = None
    scan: str = "sequential"
    solver: str = "jacobi"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got '{self.variant}'")
        if self.scan not in ("sequential", "associative"):
            raise ConfigError(f"scan must be 'sequential' or 'associative', got '{self.scan}'")
        if self.solver not in ("jacobi", "lapack"):
            raise ConfigError(f"solver must be 'jacobi' or 'lapack', got '{self.solver}'")
        for key in ("hidden_units", "fc_layers", "d_state", "ssm_layers"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, obj: dict, dataset_name: str | None = None) -> "ExperimentConfig":
        """Defaults, then per-dataset published values, then ``obj``."""
        unknown = set(obj) - set(cls.keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged: dict = {}
        if dataset_name and dataset_name.lower() in BENCHMARK_HPARAMS:
            merged.update(BENCHMARK_HPARAMS[dataset_name.lower()])
        merged.update(obj)
        return cls(**{k: coerce_value(k, v) for k, v in merged.items()})


_TYPES = {
    "dataset": str, "gamma": float, "lr": float, "hidden_units": int, "fc_layers": int,
    "weight_decay": float, "epochs": int, "d_state": int, "ssm_layers": int,
    "variant": str, "seeds": list, "eigencache": str, "filter_width": int,
    "scan": str, "solver": str,
}
_NULLABLE = {"eigencache", "filter_width"}


def coerce_value(key: str, value):
    """Type-check (and parse, for CLI strings) one config value."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key '{key}'")
    kind = _TYPES[key]
    if value is None or (isinstance(value, str) and value.lower() in ("null", "none")):
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key} may not be null")
    try:
        if kind is list:
            if isinstance(value, str):
                value = [int(s) for s in value.replace(",", " ").split()]
            return [int(s) for s in value]
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            if isinstance(value, bool):
                raise ValueError("boolean given")
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise ValueError("boolean given")
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class RunResult:
    seeds: list[int]
    accuracies: list[float]
    mean: float
    ci_halfwidth: float | None
    ci_low: float | None
    ci_high: float | None
    histories: dict[int, History] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "seeds": self.seeds,
            "per_seed_accuracy": self.accuracies,
            "mean": self.mean,
            "ci_halfwidth": self.ci_halfwidth,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def t_interval(accs) -> tuple[float, float | None]:
    """Mean and Student-t 95% half-width (``None`` for a single run)."""
    accs = np.asarray(accs, dtype=np.float64)
    mean = float(accs.mean())
    k = accs.size
    if k < 2:
        return mean, None
    sd = float(accs.std(ddof=1))
    return mean, float(stats.t.ppf(0.975, k - 1) * sd / math.sqrt(k))


def aggregate(seeds, accs, histories=None) -> RunResult:
    order = np.argsort(seeds, kind="stable")
    seeds = [int(seeds[i]) for i in order]
    accs = [float(accs[i]) for i in order]
    mean, hw = t_interval(accs)
    if hw is None:
        lo = hi = None
    else:
        lo, hi = max(0.0, mean - hw), min(1.0, mean + hw)
        if mean - hw < 0 or mean + hw > 1:
            log.info("CI [%.4f, %.4f] clipped to [0, 1]", mean - hw, mean + hw)
    return RunResult(seeds, accs, mean, hw, lo, hi, histories or {})


# ---------------------------------------------------------------------------
# training


def spectral_data(g: Graph, cfg: ExperimentConfig | None = None,
                  cache_path: str | None = None) -> SpectralDecomposition:
    path = cache_path if cache_path is not None else (cfg.eigencache if cfg else None)
    if path:
        import os
        if os.path.exists(path):
            sd = read_eigencache(path)
            if sd.n != g.n:
                raise ConfigError(f"eigencache has n={sd.n}, dataset has n={g.n}")
            return sd
    solver = cfg.solver if cfg else "jacobi"
    return eig_sym(build_normalized_laplacian(g), method=solver)


def init_params(cfg: ExperimentConfig, g: Graph, seed: int) -> ModelParams:
    return ModelParams.init(
        g.d, g.num_classes, hidden=cfg.hidden_units, fc_layers=cfg.fc_layers,
        variant=cfg.variant, gamma=cfg.gamma, d_state=cfg.d_state,
        ssm_layers=cfg.ssm_layers, filter_width=cfg.filter_width, seed=seed,
    )


def accuracy(logits: np.ndarray, labels: np.ndarray, idx) -> float:
    """Argmax accuracy on ``idx``; ties go to the smallest class index."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("accuracy over an empty index set")
    pred = np.argmax(logits[idx], axis=1)
    return float(np.mean(pred == labels[idx]))


def train(cfg: ExperimentConfig, g: Graph, split: Split, sd: SpectralDecomposition,
          seed: int | None = None) -> tuple[ModelParams, History]:
    """Full-batch Adam training; keeps the parameters of the best-validation
    epoch (strict improvement, so ties keep the earlier epoch)."""
    if cfg.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    seed = split.seed if seed is None else seed
    params = init_params(cfg, g, seed)
    store = params.store()
    train_idx = np.asarray(split.train_idx, dtype=np.int64)
    y_train = g.labels[train_idx]
    hist = History()
    best_val = -1.0
    best = store.snapshot()
    for epoch in range(cfg.epochs):
        with ad.Tape() as tape:
            logits = forward(sd, g.features, params, scan=cfg.scan)
            loss_t = loss(ad.index_rows(logits, train_idx), y_train)
        loss_val = float(loss_t.data)
        if not math.isfinite(loss_val):
            raise TrainingDiverged(epoch, seed)
        val_acc = accuracy(logits.data, g.labels, split.val_idx)
        hist.train_loss.append(loss_val)
        hist.val_acc.append(val_acc)
        if val_acc > best_val:
            best_val = val_acc
            best = store.snapshot()
            hist.best_epoch = epoch
        grads = tape.gradient(loss_t, store.tensors())
        ad.adam_step(store, dict(zip(store.names(), grads)), cfg.lr, cfg.weight_decay)
    store.restore(best)
    return params, hist


def predict(params: ModelParams, g: Graph, sd: SpectralDecomposition,
            scan: str = "sequential") -> np.ndarray:
    return forward(sd, g.features, params, scan=scan).data


def evaluate(params: ModelParams, g: Graph, split: Split, sd: SpectralDecomposition,
             scan: str = "sequential") -> float:
    return accuracy(predict(params, g, sd, scan), g.labels, split.test_idx)


def run_one_seed(cfg: ExperimentConfig, g: Graph, sd: SpectralDecomposition,
                 seed: int) -> tuple[float, ModelParams, History]:
    split = make_splits(g.n, seed)
    try:
        params, hist = train(cfg, g, split, sd, seed)
    except TrainingDiverged as exc:
        raise TrainingDiverged(exc.epoch, seed) from exc
    return evaluate(params, g, split, sd, cfg.scan), params, hist


def _worker(args):
    cfg, g, sd, seed = args
    acc, params, hist = run_one_seed(cfg, g, sd, seed)
    return seed, acc, params.store().snapshot(), hist


def run_seeds(cfg: ExperimentConfig, g: Graph, sd: SpectralDecomposition | None = None,
              jobs: int = 1, keep_params: bool = False):
    """Train/evaluate per seed on ``make_splits(n, seed)`` and aggregate.

    Returns the :class:`RunResult`, plus ``{seed: snapshot}`` of trained
    parameters when ``keep_params`` is set.
    """
    sd = sd if sd is not None else spectral_data(g, cfg)
    seeds = [int(s) for s in cfg.seeds]
    tasks = [(cfg, g, sd, s) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_worker, tasks))
    else:
        outs = [_worker(t) for t in tasks]
    outs.sort(key=lambda o: o[0])
    result = aggregate([o[0] for o in outs], [o[1] for o in outs],
                       {o[0]: o[3] for o in outs})
    if keep_params:
        return result, {o[0]: o[2] for o in outs}
    return result


# ---------------------------------------------------------------------------
# run outputs


def write_json(path, obj) -> None:
    """Sorted keys and repr floats, so equal content gives equal bytes."""
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_history(path, hist: History) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_acc"])
        for epoch, (lv, va) in enumerate(zip(hist.train_loss, hist.val_acc)):
            w.writerow([epoch, repr(lv), repr(va)])


def write_model_info(directory, cfg: ExperimentConfig) -> None:
    """What is needed besides the tensors to rebuild the model."""
    write_json(Path(directory) / "model.json",
               {"variant": cfg.variant, "gamma": cfg.gamma, "scan": cfg.scan})


def load_model(directory) -> tuple[ModelParams, dict]:
    root = Path(directory)
    info_path = root / "model.json"
    if not info_path.is_file():
        raise ConfigError(f"checkpoint has no model.json: {root}")
    info = json.loads(info_path.read_text())
    store = ad.load_checkpoint(root)
    return ModelParams.from_store(store, info["variant"], float(info["gamma"])), info


def write_run_outputs(out_dir, cfg: ExperimentConfig, result: RunResult,
                      snapshots: dict, seconds: float, extra: dict | None = None) -> Path:
    """``results.json``, ``timing.json`` and per-seed ``seed_<s>/`` folders
    holding ``history.csv`` and the best-validation checkpoint."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    payload = {"config": cfg.to_json(), **result.to_json()}
    if extra:
        payload.update(extra)
    for seed in result.seeds:
        sdir = root / f"seed_{seed}"
        sdir.mkdir(exist_ok=True)
        write_history(sdir / "history.csv", result.histories[seed])
        snap = snapshots[seed]
        ad.save_checkpoint(ad.ParamStore({k: ad.Tensor(v) for k, v in snap.items()}),
                           sdir / "checkpoint")
        write_model_info(sdir / "checkpoint", cfg)
    # wall-clock lives apart from results.json so reruns stay byte-identical
    write_json(root / "timing.json", {"wall_clock_seconds": seconds})
    path = root / "results.json"
    write_json(path, payload)
    return path


# ---------------------------------------------------------------------------
# perturbation


@dataclass
class Perturbation:
    mode: str
    target: int
    removed_by_partition: int
    parts: int
    removed_total: int
    components_before: int
    components_after: int

    def to_json(self) -> dict:
        return asdict(self)


def partition_to_target(g: Graph, target: int, solver: str = "jacobi") -> tuple[Graph, int, int]:
    """Largest-``k`` spectral partition whose cut stays within ``target``.

    Binary search over ``k`` in ``[1, n]`` (``k = 1`` means no cut), assuming
    the cut size grows with ``k``.  Returns ``(graph, k, removed)``.
    """
    cache: dict[int, tuple[Graph, int]] = {1: (g, 0)}

    def cut(k: int) -> tuple[Graph, int]:
        if k not in cache:
            cache[k] = partition_cut_removal(g, k, solver)
        return cache[k]

    lo, hi = 1, g.n
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if cut(mid)[1] <= target:
            lo = mid
        else:
            hi = mid - 1
    out, removed = cut(lo)
    return out, lo, removed


def perturb_graph(g: Graph, mode: str, target: int, seed: int = 0,
                  solver: str = "jacobi") -> tuple[Graph, Perturbation]:
    """Remove exactly ``target`` edges, randomly or partition-first with a
    random top-up."""
    if target < 0 or target > g.num_edges:
        raise ValueError(f"cannot remove {target} edges from a graph with {g.num_edges}")
    before, _ = connected_components(g.n, g.edges)
    if mode == "rand":
        out = remove_edges_random(g, target, seed)
        k, by_part = 1, 0
    elif mode == "partition":
        cut_g, k, by_part = partition_to_target(g, target, solver)
        out = remove_edges_random(cut_g, target - by_part, seed)
    else:
        raise ValueError(f"mode must be 'rand' or 'partition', got '{mode}'")
    after, _ = connected_components(out.n, out.edges)
    info = Perturbation(mode, target, by_part, k, g.num_edges - out.num_edges, before, after)
    return out, info


def robustness_experiment(cfg: ExperimentConfig, g: Graph, mode: str, target_removed: int,
                          perturb_seed: int = 0, jobs: int = 1, keep_params: bool = False):
    """Perturb ``g`` (see :func:`perturb_graph`) and run every seed on it.

    Returns ``(RunResult, Perturbation)``, with the per-seed parameter
    snapshots appended when ``keep_params`` is set.
    """
    perturbed, info = perturb_graph(g, mode, target_removed, perturb_seed, cfg.solver)
    if perturbed.num_edges == g.num_edges:
        sd = spectral_data(g, cfg)
    else:
        sd = eig_sym(build_normalized_laplacian(perturbed), method=cfg.solver)
    out = run_seeds(cfg, perturbed, sd, jobs=jobs, keep_params=keep_params)
    if keep_params:
        return out[0], info, out[1]
    return out, info


# ---------------------------------------------------------------------------
# dumps


def filter_dump(params: ModelParams, sd: SpectralDecomposition,
                scan: str = "sequential") -> tuple[np.ndarray, FilterCoefficients]:
    """Eigenvalues (ascending) and the learned coefficient for each."""
    from .model import filter_coefficients

    coeffs = filter_coefficients(sd.eigenvalues, params, scan)
    return sd.eigenvalues.copy(), coeffs


# ---------------------------------------------------------------------------
# synthetic benchmark


def synth_dataset(components, d: int = 8, seed: int = 0, num_classes: int = 2,
                  noise: float = 1.0, name: str = "synth") -> Graph:
    """Disjoint union of cliques/cycles with controlled homophily.

    ``components`` holds ``(size, motif, homophilic)`` triples.  Homophilic
    components take one class each (cycling through classes in order) and
    features ``class_mean + noise``.  Heterophilic components alternate
    labels ``0, 1, 0, 1, ...`` along node order and draw features from one
    class-independent distribution (pure noise), so their labels can only be
    recovered from structure.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    edges = []
    labels = []
    centers = []
    offset = 0
    hom_count = 0
    for size, motif, homophilic in components:
        if size < 3:
            raise ValueError(f"component size must be >= 3, got {size}")
        idx = list(range(offset, offset + size))
        if motif == "clique":
            edges += [(idx[i], idx[j]) for i in range(size) for j in range(i + 1, size)]
        elif motif == "cycle":
            edges += [(idx[i], idx[(i + 1) % size]) for i in range(size)]
        else:
            raise ValueError(f"unknown motif '{motif}' (expected 'clique' or 'cycle')")
        if homophilic:
            cls = hom_count % num_classes
            labels += [cls] * size
            centers += [means[cls]] * size
            hom_count += 1
        else:
            labels += [i % 2 for i in range(size)]
            centers += [np.zeros(d)] * size
        offset += size
    feats = np.array(centers) + noise * rng.normal(size=(offset, d))
    return Graph(offset, edges, feats, np.array(labels, dtype=np.int64), num_classes, name)


# ~120 nodes in homophilic/heterophilic pairs that share motif and size, so
# each pair's spectra coincide and only sequence position tells them apart
MIXED_COMPONENTS = [
    (12, "cycle", True), (12, "cycle", False),
    (14, "cycle", False), (14, "cycle", True),
    (16, "cycle", True), (16, "cycle", False),
    (18, "cycle", False), (18, "cycle", True),
]


def mixed_benchmark(seed: int = 0, d: int = 8, noise: float = 1.0) -> Graph:
    return synth_dataset(MIXED_COMPONENTS, d=d, seed=seed, noise=noise, name="synth-mixed")
