"""Command-line front end: generate, train, train-rl, agglomerate, metrics, bench.

Progress and timing go to stderr; results go to files. Exit codes:
0 success, 1 invalid flags, 2 I/O failure, 3 agglomeration/training failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import formats, generate, gnn, rl
from .engine import AgglomerationError, AggloRequest, agglomerate
from .formats import FormatError
from .graph import ZeroVolumeError
from .mesh import MeshError, merge_cells
from .metrics import quality_report, summarize
from .models import (ClassicModel, FMRefiner, KMeansModel, RLPartitionerModel, RLRefinerModel,
                     SageHeteroModel, SageModel)

log = logging.getLogger("polyagglo")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FAILURE = 0, 1, 2, 3

MODEL_NAMES = ("kmeans", "classic", "sage", "sage-hetero", "rl")
LEARNED = {"sage": "sage-base", "sage-hetero": "sage-hetero", "rl": "rl-partitioner"}
CLI_MODES = {"kway": "kway", "nref": "nref", "target": "target_size", "multfactor": "mult_factor",
             "segregated": "segregated", "coarsen": "coarsen", "multilevel": "multilevel"}
INT_MODES = ("kway", "nref", "multilevel")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ----------------------------------------------------------------------
# shared helpers

def _load_net(path, arch: str, flag: str = "--checkpoint"):
    if path is None:
        raise UsageError(f"{flag} is required for a learned model")
    net = formats.load_checkpoint(path)
    if net.descriptor()["arch"] != arch:
        raise UsageError(f"{path}: checkpoint holds a {net.descriptor()['arch']} network, expected {arch}")
    return net


def build_model(name: str, checkpoint=None, seed: int = 0):
    if name == "kmeans":
        return KMeansModel(seed)
    if name == "classic":
        return ClassicModel()
    if name not in LEARNED:
        raise UsageError(f"unknown model {name!r}")
    net = _load_net(checkpoint, LEARNED[name])
    if name == "sage":
        return SageModel(net)
    if name == "sage-hetero":
        return SageHeteroModel(net, seed)
    return RLPartitionerModel(net)


def build_refiner(name: str, checkpoint=None):
    if name == "none":
        return None
    if name == "fm":
        return FMRefiner()
    if name == "rl":
        return RLRefinerModel(_load_net(checkpoint, "rl-refiner", "--refiner-checkpoint"))
    raise UsageError(f"unknown refiner {name!r}")


def _read_cell_ids(path) -> np.ndarray:
    text = Path(path).read_text()
    try:
        return np.array([int(t) for t in text.split()], dtype=np.int64)
    except ValueError:
        raise FormatError("cell id list must hold integers", path=path) from None


def build_request(mode: str, param, threshold=None, refiner=None, cells=None,
                  inner_mode: str = "nref") -> AggloRequest:
    """Translate CLI mode names and the single ``--param`` into a request."""
    if mode not in CLI_MODES:
        raise UsageError(f"unknown mode {mode!r}")
    if param is None:
        raise UsageError(f"--param is required for mode {mode}")
    if mode in INT_MODES and float(param) != int(float(param)):
        raise UsageError(f"--param must be an integer for mode {mode}")
    if refiner is not None and mode != "multilevel":
        raise UsageError("--refiner only applies to --mode multilevel")
    if threshold is not None and mode != "multilevel":
        raise UsageError("--threshold only applies to --mode multilevel")
    try:
        if mode == "kway":
            return AggloRequest("kway", k=int(float(param)))
        if mode == "nref":
            return AggloRequest("nref", nref=int(float(param)))
        if mode == "target":
            return AggloRequest("target_size", target=float(param))
        if mode in ("multfactor", "segregated"):
            return AggloRequest(CLI_MODES[mode], mult_factor=float(param))
        if mode == "multilevel":
            return AggloRequest("multilevel", nref=int(float(param)),
                                threshold=64 if threshold is None else threshold, refiner=refiner)
        if cells is None:
            raise UsageError("--mode coarsen needs --cells")
        if inner_mode in ("coarsen", "multilevel"):
            raise UsageError(f"--inner-mode {inner_mode} is not allowed")
        inner = build_request(inner_mode, param)
        return AggloRequest("coarsen", cell_ids=cells, inner=inner)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _fmt_nc(nc) -> str:
    return "n/a" if nc is None else f"{nc:.6g}"


# ----------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    counts, sizes = {}, {}
    for item in args.kinds.split(","):
        kind, _, n = item.partition("=")
        try:
            counts[kind.strip()] = int(n) if n else 1
        except ValueError:
            raise UsageError(f"bad --kinds entry {item!r}") from None
    for item in args.size or []:
        key, _, value = item.partition("=")
        kind, _, name = key.partition(".")
        if not name or not value:
            raise UsageError(f"bad --size entry {item!r}; expected KIND.PARAM=VALUE")
        num = float(value)
        sizes.setdefault(kind, {})[name] = int(num) if num == int(num) else num
    try:
        spec = generate.DatasetSpec(counts, sizes, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    t0 = time.perf_counter()
    records = generate.build_dataset(spec, args.out)
    print(f"generated {len(records)} meshes in {time.perf_counter() - t0:.2f} s")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.epochs < 1 or args.batch < 1 or args.lr < 0 or args.wd < 0:
        raise UsageError("--epochs and --batch must be >= 1; --lr and --wd must be >= 0")
    dataset = formats.load_dataset(args.dataset)
    if not dataset:
        raise FormatError("dataset is empty", path=args.dataset)
    if any(g.dim != args.dims for g in dataset):
        raise UsageError(f"dataset holds meshes that are not {args.dims}D")
    net = gnn.default_net(args.arch, args.dims, seed=args.seed)
    t0 = time.perf_counter()
    history = gnn.train_gnn(net, dataset, epochs=args.epochs, lr=args.lr, weight_decay=args.wd,
                            batch=args.batch, seed=args.seed, augment=not args.no_augment)
    print(f"trained {args.epochs} epochs in {time.perf_counter() - t0:.2f} s; "
          f"final train loss {history[-1][1]:.6g}")
    formats.save_checkpoint(net, args.out)
    if args.history:
        formats.write_history_csv(history, args.history)
    if args.figure:
        from .plotting import plot_history
        plot_history(history, args.figure, "expected normalized cut")
    return EXIT_OK


def cmd_train_rl(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    dataset = formats.load_dataset(args.dataset)
    if not dataset:
        raise FormatError("dataset is empty", path=args.dataset)
    try:
        if args.kind == "partitioner":
            dim = dataset[0].dim
            net = rl.ActorCriticNet(dim + 2, args.hidden or 32, seed=args.seed)
            base = rl.PARTITIONER_CONFIG
        else:
            net = rl.RefinerNet(5, args.hidden or 10, seed=args.seed)
            base = rl.REFINER_CONFIG
        config = rl.A2CConfig(gamma=args.gamma, alpha=args.alpha, lr=args.lr,
                              update_every=base.update_every, b=base.b, k_hop=base.k_hop)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    t0 = time.perf_counter()
    history = rl.a2c_train(args.kind, net, dataset, config, episodes=args.episodes, seed=args.seed)
    print(f"trained {args.episodes} episodes in {time.perf_counter() - t0:.2f} s")
    formats.save_checkpoint(net, args.out)
    if args.history:
        formats.write_history_csv(history, args.history, formats.REWARD_COLUMNS)
    if args.figure:
        from .plotting import plot_history
        plot_history([(e, r) for e, r, _ in history], args.figure, "episode return")
    return EXIT_OK


def cmd_agglomerate(args) -> int:
    model = build_model(args.model, args.checkpoint, args.seed)
    refiner = build_refiner(args.refiner, args.refiner_checkpoint) if args.refiner else None
    cells = _read_cell_ids(args.cells) if args.cells else None
    request = build_request(args.mode, args.param, args.threshold, refiner, cells, args.inner_mode)
    mesh = formats.read_mesh(args.mesh)
    t0 = time.perf_counter()
    result = agglomerate(mesh, model, request)
    elapsed = time.perf_counter() - t0
    formats.write_agglomerated(result.mesh, args.out)
    if args.labels_out:
        formats.write_mesh(mesh, args.labels_out, labels=result.labels)
    if args.metrics or args.figure:
        report = quality_report(result.mesh)
        if args.metrics:
            formats.write_metrics_csv(report, args.metrics)
        if args.figure:
            from .plotting import plot_quality
            plot_quality(report.columns, args.figure, f"{args.model} / {args.mode}")
    if args.mesh_figure:
        from .plotting import plot_agglomeration
        plot_agglomeration(result.mesh, args.mesh_figure)
    print(f"elements: {result.n_elements}  top-level NC: {_fmt_nc(result.top_level_nc())}  "
          f"time: {elapsed:.3f} s")
    return EXIT_OK


def cmd_metrics(args) -> int:
    mesh, arrays = formats.read_vtk(args.mesh)
    if formats.HOLE_ARRAY in arrays and np.any(arrays[formats.HOLE_ARRAY]):
        raise UsageError("mesh stores elements as separate loops; pass the fine mesh with a label array")
    if args.labels not in arrays:
        raise FormatError(f"no cell array named {args.labels!r}", path=args.mesh)
    labels = np.asarray(arrays[args.labels]).astype(np.int64)
    agg = merge_cells(mesh, labels)
    report = quality_report(agg, args.rel_precision)
    formats.write_metrics_csv(report, args.out)
    print(report.summary_text())
    if args.figure:
        from .plotting import plot_quality
        plot_quality(report.columns, args.figure, Path(args.mesh).name)
    return EXIT_OK


# ----------------------------------------------------------------------
# bench

BENCH_METRICS = ("CR", "SHAPE", "UF", "VD", "HP")
BENCH_HEADER = (["mesh", "model", "mode", "param", "n_cells", "n_elements", "top_nc", "seconds",
                 "timing_reliable", "status"]
                + [f"{m}_{s}" for m in BENCH_METRICS for s in ("median", "mean")])


def _corpus_meshes(corpus) -> list[Path]:
    root = Path(corpus)
    if not root.is_dir():
        raise FormatError("corpus directory not found", path=corpus)
    index = root / generate.INDEX_NAME
    if index.exists():
        return [root / r.mesh_path for r in formats.read_index(index)]
    meshes = sorted(root.glob("*.vtk"))
    if not meshes:
        raise FormatError("corpus holds no .vtk meshes", path=corpus)
    return meshes


def _parse_modes(text: str) -> list[tuple[str, str]]:
    out = []
    for item in text.split(","):
        mode, _, param = item.strip().partition("=")
        if mode not in CLI_MODES or mode == "coarsen":
            raise UsageError(f"bad --modes entry {item!r}")
        if not param:
            raise UsageError(f"--modes entry {item!r} needs =VALUE")
        out.append((mode, param))
    return out


def run_case(mesh_path, model_name, mode, param, checkpoint, seed, quality, rel_precision):
    """One benchmark case; returns (row values, per-element CR or None, error message)."""
    name = Path(mesh_path).stem
    row = {"mesh": name, "model": model_name, "mode": mode, "param": param}
    try:
        model = build_model(model_name, checkpoint, seed)
        request = build_request(mode, param, refiner=FMRefiner() if mode == "multilevel" else None)
        mesh = formats.read_mesh(mesh_path)
        t0 = time.perf_counter()
        result = agglomerate(mesh, model, request)
        row["seconds"] = time.perf_counter() - t0
        row["n_cells"], row["n_elements"] = mesh.n_cells, result.n_elements
        nc = result.top_level_nc()
        row["top_nc"] = "" if nc is None else nc
        cr = None
        if quality:
            cols = quality_report(result.mesh, rel_precision).columns
            cols["SHAPE"] = cols.pop("APR", None) if "APR" in cols else cols.pop("SPH")
            for m in BENCH_METRICS:
                if m in cols:
                    s = summarize(cols[m])
                    row[f"{m}_median"], row[f"{m}_mean"] = s["median"], s["mean"]
            cr = cols["CR"]
        row["status"] = "ok"
        return row, cr, None
    except Exception as exc:  # a failing case must not stop the sweep
        row["status"] = "failed"
        return row, None, f"{type(exc).__name__}: {exc}"


def cmd_bench(args) -> int:
    meshes = _corpus_meshes(args.corpus)
    models = [m.strip() for m in args.models.split(",")]
    for m in models:
        if m not in MODEL_NAMES:
            raise UsageError(f"unknown model {m!r}")
    modes = _parse_modes(args.modes)
    checkpoints = {}
    for item in args.checkpoint or []:
        name, _, path = item.partition("=")
        if name not in LEARNED or not path:
            raise UsageError(f"bad --checkpoint entry {item!r}; expected MODEL=PATH")
        checkpoints[name] = path
    for m in models:
        if m in LEARNED and m not in checkpoints:
            raise UsageError(f"model {m} needs --checkpoint {m}=PATH")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")

    cases = [(str(p), m, mode, param, checkpoints.get(m), args.seed, not args.no_quality, args.rel_precision)
             for p in meshes for m in models for mode, param in modes]
    if args.jobs == 1:
        outcomes = [run_case(*c) for c in cases]
    else:
        with ProcessPoolExecutor(args.jobs) as pool:
            outcomes = list(pool.map(run_case, *zip(*cases)))

    rows, groups, failed = [], {}, 0
    for row, cr, err in outcomes:
        row["timing_reliable"] = int(args.jobs == 1)
        if err is not None:
            failed += 1
            log.error("case %s/%s/%s=%s failed: %s", row["mesh"], row["model"], row["mode"], row["param"], err)
        else:
            log.info("case %s/%s/%s=%s: %d elements in %.3f s", row["mesh"], row["model"], row["mode"],
                     row["param"], row["n_elements"], row["seconds"])
        if cr is not None:
            groups.setdefault(row["model"], []).append(cr)
        rows.append([row.get(col, "") for col in BENCH_HEADER])
    formats.write_table(args.out, BENCH_HEADER, rows)
    if args.figure and groups:
        from .plotting import plot_quality_groups
        plot_quality_groups({k: np.concatenate(v) for k, v in groups.items()}, "CR", args.figure)
    print(f"bench: {len(rows)} cases, {failed} failed")
    return EXIT_FAILURE if failed else EXIT_OK


# ----------------------------------------------------------------------
# parser

def _common(parser: argparse.ArgumentParser, top: bool) -> None:
    # Subparsers suppress defaults so a value given before the subcommand survives.
    default = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, default=default(0), help="random seed (default 0)")
    parser.add_argument("--verbose", "-v", action="count", default=default(0),
                        help="more progress output on stderr")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polyagglo", description="Polytopal mesh agglomeration by recursive graph bisection.")
    _common(p, True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="build a synthetic training dataset")
    _common(g, False)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--kinds", default="random_delaunay=10",
                   help=f"comma list KIND=COUNT; kinds: {', '.join(generate.GENERATOR_KINDS)}")
    g.add_argument("--size", action="append", metavar="KIND.PARAM=VALUE",
                   help="override a generator size parameter (repeatable)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a SAGE bisection network")
    _common(t, False)
    t.add_argument("--dataset", required=True)
    t.add_argument("--arch", choices=("sage", "sage-hetero"), default="sage")
    t.add_argument("--dims", type=int, choices=(2, 3), default=2)
    t.add_argument("--epochs", type=int, default=gnn.DEFAULT_EPOCHS)
    t.add_argument("--lr", type=float, default=gnn.DEFAULT_LR)
    t.add_argument("--wd", type=float, default=gnn.DEFAULT_WEIGHT_DECAY)
    t.add_argument("--batch", type=int, default=gnn.DEFAULT_BATCH)
    t.add_argument("--no-augment", action="store_true", help="disable random rotations")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="loss history CSV")
    t.add_argument("--figure", help="loss curve image")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("train-rl", help="train an actor-critic partitioner or refiner")
    _common(r, False)
    r.add_argument("--dataset", required=True)
    r.add_argument("--kind", choices=("partitioner", "refiner"), default="partitioner")
    r.add_argument("--episodes", type=int, default=200)
    r.add_argument("--hidden", type=int, help="hidden width (32 partitioner, 10 refiner)")
    r.add_argument("--lr", type=float, default=rl.PARTITIONER_CONFIG.lr)
    r.add_argument("--gamma", type=float, default=rl.PARTITIONER_CONFIG.gamma)
    r.add_argument("--alpha", type=float, default=rl.PARTITIONER_CONFIG.alpha)
    r.add_argument("--out", required=True, help="checkpoint path")
    r.add_argument("--history", help="reward history CSV")
    r.add_argument("--figure", help="return curve image")
    r.set_defaults(func=cmd_train_rl)

    a = sub.add_parser("agglomerate", help="agglomerate one mesh")
    _common(a, False)
    a.add_argument("--mesh", required=True)
    a.add_argument("--model", choices=MODEL_NAMES, required=True)
    a.add_argument("--checkpoint", help="network checkpoint for learned models")
    a.add_argument("--mode", choices=tuple(CLI_MODES), required=True)
    a.add_argument("--param", help="k, nref, target size or multiplication factor, per mode")
    a.add_argument("--refiner", choices=("none", "fm", "rl"))
    a.add_argument("--refiner-checkpoint")
    a.add_argument("--threshold", type=int, help="coarsest graph size for --mode multilevel (default 64)")
    a.add_argument("--cells", help="file of cell ids to agglomerate (--mode coarsen)")
    a.add_argument("--inner-mode", default="nref", choices=("kway", "nref", "target", "multfactor", "segregated"),
                   help="mode applied to the selected cells in --mode coarsen")
    a.add_argument("--out", required=True, help="agglomerated mesh (VTK)")
    a.add_argument("--labels-out", help="fine mesh with an element label array (VTK)")
    a.add_argument("--metrics", help="per-element quality CSV")
    a.add_argument("--figure", help="quality boxplot image")
    a.add_argument("--mesh-figure", help="picture of the 2D agglomerated mesh")
    a.set_defaults(func=cmd_agglomerate)

    m = sub.add_parser("metrics", help="quality metrics of an agglomerated mesh")
    _common(m, False)
    m.add_argument("--mesh", required=True, help="VTK mesh with an element label array")
    m.add_argument("--labels", default=formats.LABEL_ARRAY, help="name of the label cell array")
    m.add_argument("--rel-precision", type=float, default=1e-3)
    m.add_argument("--out", required=True, help="per-element CSV")
    m.add_argument("--figure", help="boxplot image")
    m.set_defaults(func=cmd_metrics)

    b = sub.add_parser("bench", help="time and score models over a mesh corpus")
    _common(b, False)
    b.add_argument("--corpus", required=True, help="dataset directory or directory of .vtk meshes")
    b.add_argument("--models", default="kmeans,classic")
    b.add_argument("--modes", default="nref=4", help="comma list MODE=PARAM")
    b.add_argument("--checkpoint", action="append", metavar="MODEL=PATH")
    b.add_argument("--jobs", type=int, default=1, help="parallel cases (timings then marked unreliable)")
    b.add_argument("--no-quality", action="store_true", help="skip quality metrics")
    b.add_argument("--rel-precision", type=float, default=1e-3)
    b.add_argument("--out", required=True, help="results CSV")
    b.add_argument("--figure", help="CR boxplot per model")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AgglomerationError, MeshError, ZeroVolumeError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
