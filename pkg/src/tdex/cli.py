"""Command-line entry point: ``tdex <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import ingest as ingest_mod
from . import synth
from .config import ConfigError, RunConfig, load_config, stage_seed, write_snapshot
from .core import DataError, fit_norm_stats, read_trajectories
from .nn import ShapeError, StaleTapeError
from .representations import (CNN_VARIANTS, VARIANTS, Featurizer, load_featurizer, make_pad_permutation,
                              pca_fit, write_features)
from .retrieval import (FeatureIndex, NNPolicy, build_index, identity_visual, tactile_features,
                        write_episode_log)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
log = logging.getLogger("tdex")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _trajs(path) -> list:
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"not a directory: {path}")
    trajs = read_trajectories(path)
    if not trajs:
        raise DataError(f"no *.jsonl trajectories in {path}")
    return trajs


def _featurizer(arg):
    """A saved featurizer directory, a parameter-free variant name, or 'none'."""
    if arg in (None, "none"):
        return None
    if arg == "raw_720":
        return Featurizer("raw_720")
    if arg == "sum_pooled_45":
        return Featurizer("sum_pooled_45")
    if arg == "torque_proxy":
        return Featurizer("torque_proxy")
    p = Path(arg)
    if not (p / "manifest.json").is_file():
        raise DataError(f"featurizer {arg!r} is neither a saved featurizer nor a parameter-free variant")
    return load_featurizer(p)


# ---------------------------------------------------------------- subcommands

def cmd_gen_synth(args) -> int:
    cfg = _config(args).with_overrides(env=args.env, data_dir=args.out, play_minutes=args.play_minutes,
                                       n_demos=args.demos)
    stats = ex.generate_datasets(cfg, cfg.data_dir)
    write_snapshot(cfg, cfg.data_dir)
    _emit(stats)
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args)
    stats = ingest_mod.ingest_dir(args.src, args.dst, args.threshold)
    if stats["trajectories"] == 0:
        raise DataError(f"no trajectories in {args.src}")
    Path(args.dst, "ingest_stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n")
    write_snapshot(cfg.with_overrides(play_threshold=args.threshold), args.dst)
    _emit(stats)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args).with_overrides(byol_steps=args.steps, batch=args.batch, epochs=args.epochs)
    frames = np.concatenate([t.tactile for t in _trajs(args.data)])
    out = Path(args.out)
    variant = args.variant
    if variant in CNN_VARIANTS:
        arch = CNN_VARIANTS[variant]
        perm = make_pad_permutation(stage_seed(cfg.seed, "shuffle")) if variant == "shuffled_image_cnn" else None
        f, losses = ex.pretrain_featurizer(cfg, frames, arch, "pretrain", perm,
                                           predictor=not args.no_predictor)
        f.meta["epoch_losses"] = losses
    elif variant == "pca_k":
        f = Featurizer("pca_k", pca=pca_fit(frames, min(args.k, len(frames))))
        f.meta["explained_variance_ratio"] = float(f.pca.explained_variance_ratio.sum())
    else:
        f = Featurizer(variant, stats=fit_norm_stats(frames))
    f.save(out)
    write_snapshot(cfg, out)
    _emit({"variant": variant, "dim": f.dim, "frames": int(len(frames)), "out": str(out),
           **{k: v for k, v in f.meta.items() if k in ("epoch_losses", "best_epoch", "explained_variance_ratio")}})
    return EXIT_OK


def cmd_featurize(args) -> int:
    f = _featurizer(args.featurizer)
    if f is None:
        raise UsageError("featurize needs a tactile featurizer")
    trajs = _trajs(args.data)
    feats = np.concatenate([tactile_features(f, t) for t in trajs])
    write_features(args.out, feats, {"variant": f.variant, "trajectories": [len(t) for t in trajs]})
    _emit({"rows": int(feats.shape[0]), "cols": int(feats.shape[1]), "out": str(args.out)})
    return EXIT_OK


def _index_sidecars(path: Path) -> tuple:
    return Path(str(path) + ".json"), Path(str(path) + ".featurizer")


def cmd_index(args) -> int:
    cfg = _config(args)
    demos = [ingest_mod.subsample(d, args.threshold) for d in _trajs(args.demos)]
    f = _featurizer(args.featurizer)
    vision = not args.no_visual
    if f is None and not vision:
        raise UsageError("index needs at least one modality")
    index = build_index(demos, f, identity_visual if vision else None, w_v=args.wv, w_t=args.wt)
    out = Path(args.out)
    index.save(out)
    meta_path, f_dir = _index_sidecars(out)
    if f is not None:
        f.save(f_dir)
    meta_path.write_text(json.dumps({"vision": vision, "tactile": f is not None,
                                     "variant": None if f is None else f.variant, "rows": len(index),
                                     "scale_v": index.scale_v, "scale_t": index.scale_t}, indent=1, sort_keys=True))
    write_snapshot(cfg.with_overrides(w_v=args.wv, w_t=args.wt, demo_threshold=args.threshold), out.parent)
    _emit({"rows": len(index), "scale_v": index.scale_v, "scale_t": index.scale_t, "out": str(out)})
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = _config(args)
    path = Path(args.index)
    if not path.is_file():
        raise DataError(f"missing artifacts for stage 'index': {path}")
    meta_path, f_dir = _index_sidecars(path)
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {"vision": True, "tactile": False}
    index = FeatureIndex.load(path).with_weights(args.wv, args.wt)
    f = load_featurizer(f_dir) if meta.get("tactile") else None
    visual = identity_visual if meta.get("vision", True) else None
    spec = synth.task_spec(args.env)
    if args.reject_k >= len(index):
        raise UsageError(f"reject buffer {args.reject_k} must be smaller than the index ({len(index)} rows)")
    seed = cfg.seed if args.seed is None else args.seed
    result = synth.evaluate(lambda env: NNPolicy(index, f, visual, args.reject_k), spec, args.episodes, seed)
    episodes = []
    for r in result["episodes"]:
        steps = [{"step": t["step"], "neighbor": t["neighbor"], "distance": t["distance"],
                  "action": index.actions[t["neighbor"]].tolist()} for t in (r["trace"] or [])]
        episodes.append({"steps": steps, "success": r["success"]})
    if args.out:
        write_episode_log(args.out, episodes)
        write_snapshot(cfg.with_overrides(w_v=args.wv, w_t=args.wt, reject_k=args.reject_k, env=args.env,
                                          episodes=args.episodes, seed=seed), Path(args.out).parent)
    _emit({"success_rate": result["success_rate"], "episodes": args.episodes})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args).with_overrides(data_dir=args.data, out_dir=args.out, episodes=args.episodes)
    data = ex.load_datasets(cfg)
    report = ex.run_ablation(cfg, data)
    ex.write_ablation(report, cfg.out_dir)
    print(ex.format_table(report))
    return EXIT_OK


def cmd_report(args) -> int:
    counts = ex.report(args.runs, args.out)
    _emit(counts)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdex", description="Tactile retrieval pipeline on synthetic or recorded data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat JSON run config")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("gen-synth", help="generate synthetic play and demonstrations"))
    sp.add_argument("--env", default="synth:lift")
    sp.add_argument("--out", required=True)
    sp.add_argument("--play-minutes", type=float)
    sp.add_argument("--demos", type=int)
    sp.set_defaults(func=cmd_gen_synth)

    sp = common(sub.add_parser("ingest", help="motion-subsample a directory of trajectories"))
    sp.add_argument("--src", required=True)
    sp.add_argument("--dst", required=True)
    sp.add_argument("--threshold", type=float, default=ingest_mod.PLAY_THRESHOLD_M)
    sp.set_defaults(func=cmd_ingest)

    sp = common(sub.add_parser("pretrain", help="fit a tactile featurizer"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", default="tdex_image_cnn", choices=VARIANTS)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--k", type=int, default=100, help="PCA components")
    sp.add_argument("--no-predictor", action="store_true",
                    help="train encoder+projector against the target without a predictor head")
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser("featurize", help="write tactile features for a trajectory directory"))
    sp.add_argument("--featurizer", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_featurize)

    sp = common(sub.add_parser("index", help="build a retrieval index from demonstrations"))
    sp.add_argument("--demos", required=True)
    sp.add_argument("--featurizer", default="none")
    sp.add_argument("--out", required=True)
    sp.add_argument("--wv", type=float, default=1.0)
    sp.add_argument("--wt", type=float, default=1.0)
    sp.add_argument("--threshold", type=float, default=ingest_mod.DEMO_THRESHOLD_M)
    sp.add_argument("--no-visual", action="store_true")
    sp.set_defaults(func=cmd_index)

    sp = common(sub.add_parser("rollout", help="evaluate an NN policy on a synthetic task"))
    sp.add_argument("--index", required=True)
    sp.add_argument("--wv", type=float, default=1.0)
    sp.add_argument("--wt", type=float, default=1.0)
    sp.add_argument("--reject-k", type=int, default=10)
    sp.add_argument("--env", default="synth:lift")
    sp.add_argument("--episodes", type=int, default=50)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_rollout)

    sp = common(sub.add_parser("ablate", help="run the representation grid and play sweep"))
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="aggregate ablation runs into CSV files")
    sp.add_argument("--runs", nargs="*", default=[])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, KeyError) as exc:
        print(f"tdex: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"tdex: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ShapeError, StaleTapeError, AssertionError, RuntimeError) as exc:
        print(f"tdex: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
