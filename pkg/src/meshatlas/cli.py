"""Command-line entry point: data generation, training, evaluation, and latent exploration.

Every artifact-producing command writes ``manifest_<command>[_<model>].yaml`` next to its outputs
with the effective configuration, seed, command line and library versions.
A manifest can be passed back through ``--config`` to rerun the command.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


class CliError(Exception):
    """Expected failure: reported as a one-line diagnostic with exit status 1."""


# ------------------------------------------------------------------ parser


def _common(p: argparse.ArgumentParser, model=False):
    p.add_argument("--config", help="YAML experiment config (or a manifest written by a previous run)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--out", help="output root (default: $MESHATLAS_OUT or ./meshatlas-out)")
    p.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")
    if model:
        p.add_argument("--model", choices=("fc", "gcn", "pooling", "proposed", "pca"), help="model kind")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshatlas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-hierarchy", help="build the subdivision template hierarchy")
    _common(p)
    p.add_argument("--levels", type=int)
    p.add_argument("--base-subdivisions", type=int, help="icosahedron subdivisions below the coarsest level")

    p = sub.add_parser("gen-data", help="generate a synthetic cohort (builds the hierarchy if missing)")
    _common(p)
    p.add_argument("--levels", type=int)
    p.add_argument("--base-subdivisions", type=int, help="icosahedron subdivisions below the coarsest level")
    p.add_argument("--cases", type=int)

    p = sub.add_parser("train", help="train a model and write its checkpoint and loss CSV")
    _common(p, model=True)
    p.add_argument("--epochs", type=int, help="override the maximum epoch count")

    p = sub.add_parser("eval", help="score a trained model on every split")
    _common(p, model=True)
    p.add_argument("--no-surface", action="store_true", help="skip MD/HD (MAE only)")

    p = sub.add_parser("reconstruct", help="write reconstructions and error-colored PLY files")
    _common(p, model=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test", "all"))
    p.add_argument("--case", action="append", help="case id (repeatable; default: the whole split)")

    p = sub.add_parser("interpolate", help="decode a grid of latent blends between two cases")
    _common(p, model=True)
    p.add_argument("--case-a")
    p.add_argument("--case-b")
    p.add_argument("--steps", type=int, default=4)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--alpha-only", action="store_true", help="vary fine levels only (beta fixed at 0)")
    g.add_argument("--beta-only", action="store_true", help="vary the coarsest level only (alpha fixed at 0)")

    p = sub.add_parser("latent-scatter", help="1-D PCA projection of each latent level per case")
    _common(p, model=True)
    p.add_argument("--split", default="all", choices=("train", "validation", "test", "all"))
    return parser


# ------------------------------------------------------------------ helpers


def _load_cfg(args):
    import yaml

    from .config import config_from_dict, load_config

    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {path} does not exist")
        raw = yaml.safe_load(path.read_text()) or {}
        cfg = config_from_dict(raw["config"]) if "command" in raw and "config" in raw else load_config(path)
    else:
        cfg = load_config(None)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.out:
        cfg.paths.root = args.out
    if getattr(args, "base_subdivisions", None) is not None:
        cfg.data.base_subdivisions = args.base_subdivisions
    if getattr(args, "levels", None) is not None:
        cfg.data.levels = args.levels
    if getattr(args, "cases", None) is not None:
        cfg.data.cases = args.cases
    if getattr(args, "model", None):
        cfg.model = args.model
    if getattr(args, "epochs", None) is not None:
        cfg.train.max_epochs = args.epochs
    cfg.__post_init__()
    return cfg


def manifest_name(command: str, cfg) -> str:
    if command in ("build-hierarchy", "gen-data"):
        return f"manifest_{command}.yaml"
    return f"manifest_{command}_{cfg.model}.yaml"


def write_manifest(directory: Path, command: str, cfg, argv, outputs) -> Path:
    import numpy
    import scipy
    import yaml

    from . import __version__

    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": int(cfg.seed),
        "versions": {
            "meshatlas": __version__,
            "python": sys.version.split()[0],
            "numpy": numpy.__version__,
            "scipy": scipy.__version__,
        },
        "threads": {k: os.environ.get(k) for k in THREAD_VARS if os.environ.get(k)},
        "outputs": sorted(str(o) for o in outputs),
        "config": cfg.to_dict(),
    }
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / manifest_name(command, cfg)
    path.write_text(yaml.safe_dump(manifest, sort_keys=False))
    return path


def _load_cohort(cfg):
    from .synthdata import Cohort

    d = cfg.paths.resolve("cohort")
    if not (d / "manifest.yaml").exists():
        raise CliError(f"no cohort at {d}; run gen-data first")
    return Cohort.load(d)


def _ckpt_path(cfg) -> Path:
    return cfg.paths.resolve("checkpoints") / f"{cfg.model}.ckpt"


def _load_trained(cfg, cohort):
    """Returns (kind, model); model is a PcaModel or a neural VAE."""
    from .baselines import PcaModel
    from .checkpoint import load_checkpoint
    from .training import load_model

    path = _ckpt_path(cfg)
    if not path.exists():
        raise CliError(f"no checkpoint at {path}; run train --model {cfg.model} first")
    ckpt = load_checkpoint(path)
    if cfg.model == "pca":
        model = PcaModel.from_checkpoint(ckpt)
        if model.n_vertices != cohort.hierarchy.fine.n_vertices:
            raise CliError(f"checkpoint has {model.n_vertices} vertices, cohort has {cohort.hierarchy.fine.n_vertices}")
        return "pca", model
    if ckpt.type != "hvae" or ckpt.meta["arch"]["kind"] != cfg.model:
        raise CliError(f"checkpoint {path} does not hold a {cfg.model} model")
    return cfg.model, load_model(path, cohort.hierarchy)


def _error_colors(err) -> "numpy.ndarray":
    """Blue (zero error) to red (largest error of the case)."""
    import numpy as np

    t = err / err.max() if err.max() > 0 else np.zeros_like(err)
    return np.stack([t, np.zeros_like(t), 1.0 - t], axis=1)


def displacement_colors(seq, reference) -> list:
    """Per-shape RGB bytes: clamp(1/2 + d / (2 d_max), 0, 1) * 255 per channel.

    Displacements are taken after aligning each shape's centroid to the reference's.
    """
    import numpy as np

    ref = reference - reference.mean(axis=0)
    disp = [(s - s.mean(axis=0)) - ref for s in seq]
    d_max = max(float(np.abs(d).max()) for d in disp)
    if d_max == 0:
        d_max = 1.0
    return [np.round(np.clip(0.5 + d / (2.0 * d_max), 0.0, 1.0) * 255.0).astype(np.uint8) for d in disp]


def interpolation_grid(steps: int, alpha_only=False, beta_only=False) -> list:
    if steps < 1:
        raise CliError("--steps must be at least 1")
    ts = [i / steps for i in range(steps + 1)]
    if alpha_only:
        return [(a, 0.0) for a in ts]
    if beta_only:
        return [(0.0, b) for b in ts]
    return [(a, b) for b in ts for a in ts]


# ------------------------------------------------------------------ commands


def _fresh_hierarchy(cfg):
    from .hierarchy import build_hierarchy, icosphere

    if cfg.data.base_subdivisions < 0:
        raise CliError(f"base_subdivisions must be >= 0, got {cfg.data.base_subdivisions}")
    return build_hierarchy(icosphere(cfg.data.base_subdivisions), num_levels=cfg.data.levels)


def cmd_build_hierarchy(cfg, args):
    out = cfg.paths.resolve("hierarchy")
    h = _fresh_hierarchy(cfg)
    h.save(out)
    print(f"hierarchy levels {h.vertex_counts} -> {out}")
    return out, [out]


def _hierarchy_for(cfg):
    from .hierarchy import TemplateHierarchy

    d = cfg.paths.resolve("hierarchy")
    if (d / "level_0.off").exists():
        h = TemplateHierarchy.load(d)
        if h.num_levels != cfg.data.levels:
            raise CliError(f"hierarchy at {d} has {h.num_levels} levels, config asks for {cfg.data.levels}")
        return h, d
    h = _fresh_hierarchy(cfg)
    h.save(d)
    # reload so the cohort sees exactly the coordinates stored on disk
    return TemplateHierarchy.load(d), d


def cmd_gen_data(cfg, args):
    from .synthdata import generate_cohort

    h, hdir = _hierarchy_for(cfg)
    out = cfg.paths.resolve("cohort")
    cohort = generate_cohort(h, cfg.data.cases, seed=cfg.seed, deform_cfg=cfg.data.deform, unit_scale=cfg.data.unit_scale)
    cohort.save(out, hierarchy_dir=hdir)
    counts = {s: len(cohort.indices(s)) for s in ("train", "validation", "test")}
    print(f"{cohort.n_cases} cases {counts} -> {out}")
    return out, [out / "cases", out / "manifest.yaml", hdir]


def cmd_train(cfg, args):
    from .baselines import pca_fit
    from .checkpoint import save_checkpoint
    from .model import build_model
    from .training import train

    cohort = _load_cohort(cfg)
    ckpt = _ckpt_path(cfg)
    out = ckpt.parent
    if cfg.model == "pca":
        model = pca_fit(cohort.subset("train"), cfg.pca_k)
        save_checkpoint(ckpt, model.to_checkpoint())
        print(f"pca k={model.k} -> {ckpt}")
        return out, [ckpt]
    model = build_model(cfg.model, cohort.hierarchy, cfg.arch, cfg.seed)
    model, history = train(model, cohort, cfg.train, checkpoint_path=ckpt)
    csv_path = out / f"{cfg.model}_loss.csv"
    csv_path.write_text(history.to_csv())
    print(f"{cfg.model}: {len(history.epochs)} epochs, best val L_P {history.best_val:.6g} at epoch {history.best_epoch} -> {ckpt}")
    return out, [ckpt, csv_path]


def cmd_eval(cfg, args):
    from .metrics import EvalReport, evaluate

    cohort = _load_cohort(cfg)
    kind, model = _load_trained(cfg, cohort)
    out = cfg.paths.resolve("reports")
    out.mkdir(parents=True, exist_ok=True)
    report, written = EvalReport(), []
    for split in ("train", "validation", "test"):
        if len(cohort.indices(split)) == 0:
            continue
        r = evaluate(model.reconstruct, cohort, split, kind, surface=not args.no_surface)
        path = out / f"eval_{kind}_{split}.csv"
        path.write_text(r.to_csv())
        written.append(path)
        report.extend(r)
        agg = r.aggregate()
        print(f"{kind} {split}: MAE {agg['mae_mm']:.4f} mm  MD {agg['md_mm']:.4f} mm  HD {agg['hd_mm']:.4f} mm")
    table = out / f"table_{kind}.csv"
    table.write_text(report.table_csv())
    written.append(table)
    return out, written


def cmd_reconstruct(cfg, args):
    import numpy as np

    from .mesh import TriMesh, save_mesh

    cohort = _load_cohort(cfg)
    kind, model = _load_trained(cfg, cohort)
    idx = [cohort.case_index(c) for c in args.case] if args.case else list(cohort.indices(args.split))
    if not idx:
        raise CliError(f"no cases in split {args.split}")
    out = cfg.paths.resolve("reports") / "reconstruct" / kind
    out.mkdir(parents=True, exist_ok=True)
    pred = model.reconstruct(cohort.vertices[idx]) * cohort.unit_scale
    written = []
    for i, p in zip(idx, pred):
        cid = cohort.case_ids[i]
        err = np.linalg.norm(p - cohort.vertices[i] * cohort.unit_scale, axis=1)
        mesh = TriMesh(p, cohort.faces, cohort.unit_scale)
        save_mesh(mesh, out / f"{cid}.off")
        save_mesh(mesh, out / f"{cid}_error.ply", colors=_error_colors(err))
        written += [out / f"{cid}.off", out / f"{cid}_error.ply"]
    print(f"{len(idx)} reconstructions -> {out}")
    return out, written


def cmd_interpolate(cfg, args):
    import numpy as np

    from .baselines import pca_interpolate
    from .latent import interpolate_latents
    from .mesh import TriMesh, save_mesh

    cohort = _load_cohort(cfg)
    kind, model = _load_trained(cfg, cohort)
    test = list(cohort.indices("test")) or list(range(cohort.n_cases))
    try:
        ia = cohort.case_index(args.case_a) if args.case_a else test[0]
        ib = cohort.case_index(args.case_b) if args.case_b else test[min(1, len(test) - 1)]
    except KeyError as e:
        raise CliError(str(e.args[0])) from None
    grid = interpolation_grid(args.steps, args.alpha_only, args.beta_only)
    A, B = cohort.vertices[ia], cohort.vertices[ib]
    if kind == "pca":
        shape = lambda a, b: pca_interpolate(model, A, B, a, b)  # noqa: E731
    else:
        ca, cb = model.encode(np.stack([A, B]))
        shape = lambda a, b: model.decode(interpolate_latents(ca, cb, a, b))[0]  # noqa: E731
    seq = [shape(a, b) * cohort.unit_scale for a, b in grid]
    colors = displacement_colors(seq, shape(0.5, 0.5) * cohort.unit_scale)

    out = cfg.paths.resolve("reports") / "interpolate" / f"{kind}_{cohort.case_ids[ia]}_{cohort.case_ids[ib]}"
    out.mkdir(parents=True, exist_ok=True)
    written, rows = [], ["index,alpha,beta,off,ply"]
    for n, ((a, b), x, c) in enumerate(zip(grid, seq, colors)):
        mesh = TriMesh(x, cohort.faces, cohort.unit_scale)
        stem = f"step_{n:03d}"
        save_mesh(mesh, out / f"{stem}.off")
        save_mesh(mesh, out / f"{stem}.ply", colors=c)
        rows.append(f"{n},{a!r},{b!r},{stem}.off,{stem}.ply")
        written += [out / f"{stem}.off", out / f"{stem}.ply"]
    (out / "grid.csv").write_text("\n".join(rows) + "\n")
    written.append(out / "grid.csv")
    print(f"{len(grid)} interpolated shapes -> {out}")
    return out, written


def cmd_latent_scatter(cfg, args):
    from .latent import latent_scatter

    cohort = _load_cohort(cfg)
    kind, model = _load_trained(cfg, cohort)
    if kind == "pca":
        raise CliError("latent-scatter needs a neural model")
    idx = list(cohort.indices(args.split))
    codes = model.encode(cohort.vertices[idx])
    rows = latent_scatter(codes, [cohort.case_ids[i] for i in idx])
    keys = [k for k in rows[0] if k != "case_id"]
    lines = [",".join(["case_id", "split", *keys])]
    for i, r in zip(idx, rows):
        lines.append(",".join([r["case_id"], str(cohort.split[i])] + [repr(r[k]) for k in keys]))
    out = cfg.paths.resolve("reports")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"latent_scatter_{kind}.csv"
    path.write_text("\n".join(lines) + "\n")
    print(f"{len(rows)} cases x {len(keys)} latent levels -> {path}")
    return out, [path]


COMMANDS = {
    "build-hierarchy": cmd_build_hierarchy,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "interpolate": cmd_interpolate,
    "latent-scatter": cmd_latent_scatter,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.deterministic:
        # takes effect only if numpy has not been imported yet in this process
        for var in THREAD_VARS:
            os.environ[var] = "1"
    try:
        cfg = _load_cfg(args)
        out, outputs = COMMANDS[args.command](cfg, args)
        write_manifest(Path(out), args.command, cfg, argv, outputs)
    except CliError as e:
        print(f"meshatlas {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        msg = str(e.args[0]) if isinstance(e, KeyError) and e.args else str(e)
        print(f"meshatlas {args.command}: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
