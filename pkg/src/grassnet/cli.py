"""Command-line entry point.

Every subcommand exits 0 only after its outputs are written and re-read;
any failure prints one line ``error: <Kind>: <message>`` to stderr and
exits with status 1 (2 for argument errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from . import experiments as ex
from .errors import ConfigError, GrassNetError
from .graph import Graph, build_normalized_laplacian, load_graph, make_splits, save_graph
from .spectral import eig_sym, read_eigencache, spectrum_kde, write_eigencache
from .ssm import write_filter_dump

log = logging.getLogger("grassnet")


def format_multiplicities(eigenvalues, tol: float = 1e-9) -> str:
    """``"0(×2), 1.5(×4)"`` style summary of an ascending spectrum."""
    groups: list[list[float]] = []
    for v in np.asarray(eigenvalues, dtype=np.float64):
        if groups and v - groups[-1][-1] <= tol:
            groups[-1].append(float(v))
        else:
            groups.append([float(v)])
    parts = []
    for grp in groups:
        val = float(np.mean(grp))
        val = 0.0 if abs(val) < tol else val
        parts.append(f"{val:.10g}(×{len(grp)})" if len(grp) > 1 else f"{val:.10g}")
    return ", ".join(parts)


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not key=value")
    key, value = text.split("=", 1)
    key = key.strip()
    return key, ex.coerce_value(key, value.strip())


def load_config(path: str | None, overrides: list[str]) -> ex.ExperimentConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config JSON in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in overrides or []:
        key, value = parse_override(item)
        raw[key] = value
    unknown = set(raw) - set(ex.ExperimentConfig.keys())
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    dataset = str(raw.get("dataset", ""))
    if not dataset:
        raise ConfigError("config needs 'dataset' (a dataset directory or manifest.json)")
    return ex.ExperimentConfig.from_dict(raw, dataset_name=Path(dataset.rstrip("/")).name)


def _graph_for(cfg: ex.ExperimentConfig) -> Graph:
    return load_graph(cfg.dataset)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prep(args) -> int:
    g = load_graph(args.data)
    sd = eig_sym(build_normalized_laplacian(g), method=args.solver)
    write_eigencache(sd, args.out)
    check = read_eigencache(args.out)
    if check.n != g.n:
        raise GrassNetError("eigencache did not round-trip")
    lam = sd.eigenvalues
    print(f"n={g.n} edges={g.num_edges}")
    print(f"spectral range: [{lam[0]:.10g}, {lam[-1]:.10g}]")
    print(f"eigenvalues: {format_multiplicities(lam)}")
    return 0


def _train_like(args, cfg: ex.ExperimentConfig, mode: str | None = None) -> int:
    g = _graph_for(cfg)
    start = time.perf_counter()
    extra = None
    if mode is None:
        sd = ex.spectral_data(g, cfg)
        result, snaps = ex.run_seeds(cfg, g, sd, jobs=args.jobs, keep_params=True)
    else:
        result, info, snaps = ex.robustness_experiment(
            cfg, g, mode, args.removed, perturb_seed=args.perturb_seed,
            jobs=args.jobs, keep_params=True)
        extra = {"perturbation": info.to_json()}
    seconds = time.perf_counter() - start
    path = ex.write_run_outputs(args.out, cfg, result, snaps, seconds, extra)
    json.loads(path.read_text())
    ci = "n/a" if result.ci_halfwidth is None else f"{result.ci_halfwidth:.4f}"
    print(f"mean_acc={result.mean:.4f} ci_halfwidth={ci} seeds={len(result.seeds)} out={path}")
    return 0


def cmd_train(args) -> int:
    return _train_like(args, load_config(args.config, args.set))


def cmd_perturb(args) -> int:
    return _train_like(args, load_config(args.config, args.set), mode=args.mode)


def cmd_eval(args) -> int:
    params, info = ex.load_model(args.checkpoint)
    g = load_graph(args.data)
    if args.eigencache:
        sd = read_eigencache(args.eigencache)
    else:
        sd = eig_sym(build_normalized_laplacian(g))
    if sd.n != g.n:
        raise ConfigError(f"eigencache has n={sd.n}, dataset has n={g.n}")
    split = make_splits(g.n, args.seed)
    acc = ex.evaluate(params, g, split, sd, info.get("scan", "sequential"))
    print(json.dumps({"seed": args.seed, "test_accuracy": acc}, sort_keys=True))
    return 0


def cmd_filter_dump(args) -> int:
    params, info = ex.load_model(args.checkpoint)
    sd = read_eigencache(args.eigencache)
    lam, coeffs = ex.filter_dump(params, sd, info.get("scan", "sequential"))
    write_filter_dump(lam, coeffs.numpy(), args.out)
    rows = Path(args.out).read_text().splitlines()
    if len(rows) != sd.n + 1:
        raise GrassNetError("filter dump row count mismatch")
    flag = " (zero filter)" if coeffs.zero else ""
    print(f"rows={sd.n} max_abs={np.max(np.abs(coeffs.numpy())):.6g}{flag} out={args.out}")
    return 0


def cmd_kde(args) -> int:
    sd = read_eigencache(args.eigencache)
    curve = spectrum_kde(sd.eigenvalues, grid_size=args.grid)
    with open(args.out, "w") as fh:
        fh.write("lambda,density\n")
        for x, y in zip(curve.grid, curve.density):
            fh.write(f"{float(x)!r},{float(y)!r}\n")
    integral = float(trapezoid(curve.density, curve.grid))
    print(f"rows={args.grid} bandwidth={curve.bandwidth:.6g} integral={integral:.6f} out={args.out}")
    return 0


def cmd_splits(args) -> int:
    n = load_graph(args.data).n if args.data else args.n
    if n is None:
        raise ConfigError("splits needs --n or --data")
    split = make_splits(int(n), args.seed)
    text = json.dumps(split.to_json(), sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"train={len(split.train_idx)} val={len(split.val_idx)} "
              f"test={len(split.test_idx)} out={args.out}")
    else:
        print(text)
    return 0


def cmd_synth(args) -> int:
    g = ex.mixed_benchmark(seed=args.seed, d=args.d, noise=args.noise)
    path = save_graph(g, args.out)
    print(f"n={g.n} edges={g.num_edges} out={path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grassnet", description="GrassNet spectral node classifier")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="JSON file with ExperimentConfig keys")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("prep", help="eigendecompose a dataset into an eigencache")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--solver", choices=("jacobi", "lapack"), default="jacobi")
    sp.set_defaults(func=cmd_prep)

    sp = sub.add_parser("train", help="train and evaluate every seed")
    config_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("perturb", help="remove edges, then train and evaluate")
    config_args(sp)
    sp.add_argument("--mode", choices=("rand", "partition"), required=True)
    sp.add_argument("--removed", type=int, required=True, help="number of edges to remove")
    sp.add_argument("--perturb-seed", type=int, default=0)
    sp.set_defaults(func=cmd_perturb)

    sp = sub.add_parser("eval", help="test accuracy of a saved checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--eigencache")
    sp.add_argument("--seed", type=int, required=True, help="split seed")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("filter-dump", help="write learned (lambda, coefficient) rows")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--eigencache", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_filter_dump)

    sp = sub.add_parser("kde", help="write a KDE of the spectrum")
    sp.add_argument("--eigencache", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid", type=int, default=512)
    sp.set_defaults(func=cmd_kde)

    sp = sub.add_parser("splits", help="print or save the 60/20/20 split for a seed")
    sp.add_argument("--n", type=int)
    sp.add_argument("--data")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_splits)

    sp = sub.add_parser("synth", help="write the mixed-homophily benchmark dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--d", type=int, default=8)
    sp.add_argument("--noise", type=float, default=1.0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except (GrassNetError, ValueError, OSError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
