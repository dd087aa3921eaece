"""Representation ablations, the play-fraction sweep, and run aggregation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import byol, ingest, synth
from .config import RunConfig, stage_seed, write_snapshot
from .core import DataError, fit_norm_stats, read_trajectories, tactile_image, write_trajectory
from .nn import AdamConfig
from .representations import Featurizer, make_pad_permutation, pca_fit
from .retrieval import NNPolicy, bc_train, build_index, identity_visual

log = logging.getLogger(__name__)

# variant -> (tactile representation, uses vision, policy kind)
VARIANT_TABLE = {
    "tdex": ("tdex", True, "nn"),
    "stacked": ("stacked", True, "nn"),
    "shared": ("shared", True, "nn"),
    "raw": ("raw", True, "nn"),
    "pca": ("pca", True, "nn"),
    "sum_pooled": ("sum_pooled", True, "nn"),
    "shuffled": ("shuffled", True, "nn"),
    "torque": ("torque", True, "nn"),
    "image_only": (None, True, "nn"),
    "tactile_only": ("tdex", False, "nn"),
    "task_only": ("task", True, "nn"),
    "bc": ("tdex", True, "bc"),
}
REPORT_VERSION = 1


class MissingArtifact(DataError):
    def __init__(self, stage: str, path):
        super().__init__(f"missing artifacts for stage '{stage}': {path}")
        self.stage = stage


@dataclass
class Datasets:
    demos: list  # subsampled, with actions
    demos_full: list  # raw-rate demonstrations
    play: list  # subsampled play segments

    @property
    def play_frames(self) -> np.ndarray:
        return np.concatenate([p.tactile for p in self.play])

    @property
    def task_frames(self) -> np.ndarray:
        return np.concatenate([d.tactile for d in self.demos_full])


# ---------------------------------------------------------------- data

def generate_datasets(cfg: RunConfig, data_dir=None) -> dict:
    """Write synthetic play and demonstrations in the trajectory format."""
    spec = synth.task_spec(cfg.env)
    data_dir = Path(data_dir or cfg.data_dir)
    play = synth.generate_play(spec, cfg.play_minutes, stage_seed(cfg.seed, "play"))
    demos = synth.generate_demos(spec, cfg.n_demos, stage_seed(cfg.seed, "demos"))
    for sub, trajs in (("play", play), ("demos", demos)):
        d = data_dir / sub
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.jsonl"):
            old.unlink()
        for i, traj in enumerate(trajs):
            write_trajectory(d / f"{sub}_{i:04d}.jsonl", traj)
    return {"play_segments": len(play), "play_frames": sum(len(t) for t in play),
            "demos": len(demos), "demo_frames": sum(len(t) for t in demos),
            "contact_fraction": synth.contact_fraction(play)}


def load_datasets(cfg: RunConfig, data_dir=None) -> Datasets:
    data_dir = Path(data_dir or cfg.data_dir)
    trajs = {}
    for sub in ("play", "demos"):
        d = data_dir / sub
        if not d.is_dir() or not any(d.glob("*.jsonl")):
            raise MissingArtifact("gen-synth", d)
        trajs[sub] = read_trajectories(d)
    return prepare_datasets(cfg, trajs["play"], trajs["demos"])


def prepare_datasets(cfg: RunConfig, play, demos) -> Datasets:
    if not demos:
        raise DataError("no demonstrations")
    if not play:
        raise DataError("no play data")
    return Datasets(
        demos=[ingest.subsample(d, cfg.demo_threshold) for d in demos],
        demos_full=list(demos),
        play=[ingest.subsample(p, cfg.play_threshold) for p in play if len(p)],
    )


# ---------------------------------------------------------------- representations

def byol_config(cfg: RunConfig, arch: str, n_frames: int) -> byol.ByolConfig:
    batch = max(1, min(cfg.batch, n_frames))
    per_epoch = int(np.ceil(n_frames / batch))
    epochs = cfg.epochs if cfg.epochs > 0 else max(1, int(np.ceil(cfg.byol_steps / per_epoch)))
    return byol.ByolConfig(arch=arch, batch_size=batch, epochs=epochs, ema_tau=cfg.ema_tau,
                           adam=AdamConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))


def pretrain_featurizer(cfg: RunConfig, frames, arch: str, stage: str, permutation=None,
                        replicate: int = 0, predictor: bool = True) -> tuple:
    """BYOL on ``frames``; returns (featurizer, epoch losses)."""
    stats = fit_norm_stats(frames)
    images = tactile_image(frames, stats, 0.0, permutation)
    bcfg = dataclasses.replace(byol_config(cfg, arch, len(frames)), predictor=predictor)
    # one init/shuffle seed per architecture and replicate: variants then differ only in their data
    seed_stage = f"encoder:{arch}" + (f"#{replicate}" if replicate else "")
    res = byol.pretrain(images, bcfg, seed=stage_seed(cfg.seed, seed_stage))
    variant = {"tdex3": "tdex_image_cnn", "stacked": "stacked_45ch_cnn", "shared": "shared_per_pad_cnn"}[arch]
    if permutation is not None:
        variant = "shuffled_image_cnn"
    f = Featurizer(variant, res.encoder, res.params, stats, permutation=permutation,
                   meta={"stage": stage, "frames": int(len(frames)), "best_epoch": res.best_epoch,
                         "norm_fit": stage})
    return f, res.epoch_losses


def play_prefix(frames: np.ndarray, fraction: float) -> np.ndarray:
    n = max(1, int(round(fraction * len(frames))))
    return frames[:n]


class RepresentationCache:
    """Builds each tactile representation once per run."""

    def __init__(self, cfg: RunConfig, data: Datasets):
        self.cfg = cfg
        self.data = data
        self.items = {}
        self.losses = {}

    def get(self, key: str) -> Optional[Featurizer]:
        if key not in self.items:
            self.items[key] = self._build(key)
        return self.items[key]

    def _encoder(self, key, frames, arch, permutation=None, replicate=0):
        f, losses = pretrain_featurizer(self.cfg, frames, arch, key, permutation, replicate)
        self.losses[key] = losses
        return f

    def _build(self, key: str) -> Optional[Featurizer]:
        cfg, play = self.cfg, self.data.play_frames
        if "#" in key:  # "<key>#<r>": same recipe, encoder seed replicate r
            base, r = key.split("#")
            r = int(r)
            if base == "tdex":
                return self._encoder(key, play, "tdex3", replicate=r)
            if base == "task":
                return self._encoder(key, self.data.task_frames, "tdex3", replicate=r)
            frac = float(base[5:])
            if frac >= 1.0 or frac <= 0.0:
                return self.get(("tdex" if frac >= 1.0 else "task") + f"#{r}")
            return self._encoder(key, play_prefix(play, frac), "tdex3", replicate=r)
        if key == "tdex":
            return self._encoder(key, play, "tdex3")
        if key == "stacked":
            return self._encoder(key, play, "stacked")
        if key == "shared":
            return self._encoder(key, play, "shared")
        if key == "shuffled":
            return self._encoder(key, play, "tdex3", make_pad_permutation(stage_seed(cfg.seed, "shuffle")))
        if key == "task":
            return self._encoder(key, self.data.task_frames, "tdex3")
        if key.startswith("play@"):
            frac = float(key[5:])
            if frac >= 1.0:
                return self.get("tdex")
            if frac <= 0.0:
                return self.get("task")
            return self._encoder(key, play_prefix(play, frac), "tdex3")
        if key == "raw":
            return Featurizer("raw_720")
        if key == "sum_pooled":
            return Featurizer("sum_pooled_45")
        if key == "pca":
            k = min(cfg.pca_k, len(play))
            return Featurizer("pca_k", pca=pca_fit(play, k))
        if key == "torque":
            return Featurizer("torque_proxy", kp=cfg.kp, kd=cfg.kd)
        raise KeyError(f"unknown representation {key!r}")


# ---------------------------------------------------------------- evaluation

def make_policy_factory(cfg: RunConfig, data: Datasets, tactile: Optional[Featurizer], vision: bool,
                        kind: str, stage: str):
    visual = identity_visual if vision else None
    if tactile is None and not vision:
        raise ValueError("a policy needs at least one modality")
    if kind == "bc":
        policy = bc_train(data.demos, tactile, visual, cfg.bc_epochs, stage_seed(cfg.seed, stage))
        return lambda env: policy
    w_v = cfg.w_v if vision else 0.0
    w_t = cfg.w_t if tactile is not None else 0.0
    index = build_index(data.demos, tactile, visual, w_v=w_v, w_t=w_t)
    return lambda env: NNPolicy(index, tactile, visual, cfg.reject_k)


def run_variant(cfg: RunConfig, data: Datasets, cache: RepresentationCache, name: str,
                rep_key=None, vision=None, kind=None) -> dict:
    rep, vis, knd = VARIANT_TABLE.get(name, (rep_key, vision, kind))
    rep = rep_key if rep_key is not None else rep
    tactile = cache.get(rep) if rep is not None else None
    factory = make_policy_factory(cfg, data, tactile, vis if vision is None else vision,
                                  knd if kind is None else kind, name)
    spec = synth.task_spec(cfg.env)
    result = synth.evaluate(factory, spec, cfg.episodes, stage_seed(cfg.seed, "eval"))
    episodes = []
    for r in result["episodes"]:
        trace = r.get("trace") or []
        episodes.append({"episode": r["episode"], "success": r["success"], "steps": r["steps"],
                         "distances": [t["distance"] for t in trace]})
    return {"success_rate": result["success_rate"],
            "successes": int(sum(e["success"] for e in episodes)),
            "episodes": episodes}


def sweep_key(fraction: float) -> str:
    if fraction <= 0.0:
        return "task_only"
    if fraction >= 1.0:
        return "tdex"
    return f"play@{fraction:g}"


def sweep_rep(fraction: float) -> str:
    if fraction <= 0.0:
        return "task"
    if fraction >= 1.0:
        return "tdex"
    return f"play@{fraction:g}"


def run_ablation(cfg: RunConfig, data: Datasets, on_variant=None) -> dict:
    """Evaluate every configured variant and the play-fraction sweep on shared episode seeds."""
    cache = RepresentationCache(cfg, data)
    results = {}

    def run(name, **kw):
        if name not in results:
            log.info("variant %s", name)
            results[name] = run_variant(cfg, data, cache, name, **kw)
            if on_variant is not None:
                on_variant(name, results[name])
        return results[name]

    for name in cfg.variants:
        run(name)
    sweep = []
    for frac in sorted(cfg.play_fractions):
        key = sweep_key(frac)
        names, rates = [], []
        for r in range(cfg.sweep_replicates):
            if r == 0:
                name = key
                res = run(key, rep_key=key, vision=True, kind="nn") if key.startswith("play@") else run(key)
            else:
                name = f"{sweep_rep(frac)}#{r}"
                res = run(name, rep_key=name, vision=True, kind="nn")
            names.append(name)
            rates.append(res["success_rate"])
        sweep.append({"fraction": frac, "variants": names, "replicate_rates": rates,
                      "success_rate": float(np.mean(rates))})
    return {
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "datasets": {"demo_rows": int(sum(len(d) for d in data.demos)),
                     "play_frames": int(sum(len(p) for p in data.play)),
                     "task_frames": int(sum(len(d) for d in data.demos_full))},
        "variants": {k: results[k] for k in sorted(results)},
        "table": [{"variant": k, "success_rate": results[k]["success_rate"],
                   "successes": results[k]["successes"], "episodes": cfg.episodes} for k in sorted(results)],
        "sweep": sweep,
        "byol_losses": {k: cache.losses[k] for k in sorted(cache.losses)},
    }


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_ablation(report: dict, out_dir) -> Path:
    """Write report.json, a success table, per-episode lines and the config snapshot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {k: v for k, v in report.items() if k != "variants"}
    (out / "report.json").write_text(_dumps(summary))
    with open(out / "episodes.jsonl", "w") as fh:
        for name, res in report["variants"].items():
            for e in res["episodes"]:
                fh.write(json.dumps({"variant": name, **e}, sort_keys=True) + "\n")
    lines = ["variant,success_rate,successes,episodes"]
    lines += [f"{r['variant']},{r['success_rate']:.4f},{r['successes']},{r['episodes']}" for r in report["table"]]
    (out / "table.csv").write_text("\n".join(lines) + "\n")
    write_snapshot(RunConfig.from_dict(report["config"]), out)
    return out


def format_table(report: dict) -> str:
    width = max(len(r["variant"]) for r in report["table"]) if report["table"] else 8
    rows = [f"{'variant':<{width}}  success"]
    rows += [f"{r['variant']:<{width}}  {r['success_rate']:.2f}" for r in report["table"]]
    rows.append("")
    rows.append("play fraction sweep")
    rows += [f"  {s['fraction']:<6g} {s['success_rate']:.2f}" for s in report["sweep"]]
    return "\n".join(rows)


# ---------------------------------------------------------------- aggregation

REPORT_FILES = {
    "success.csv": ("run", "variant", "episode", "success", "steps"),
    "rates.csv": ("run", "variant", "success_rate", "episodes"),
    "losses.csv": ("run", "encoder", "epoch", "loss"),
    "distances.csv": ("run", "variant", "episode", "step", "distance"),
}


def _read_run(run_dir: Path) -> tuple:
    report_path = run_dir / "report.json"
    episodes_path = run_dir / "episodes.jsonl"
    if not report_path.is_file() or not episodes_path.is_file():
        raise DataError(f"malformed run directory {run_dir}: needs report.json and episodes.jsonl")
    try:
        report = json.loads(report_path.read_text())
        episodes = [json.loads(line) for line in episodes_path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed run directory {run_dir}: {exc}") from exc
    if "table" not in report:
        raise DataError(f"malformed run directory {run_dir}: report has no table")
    return report, episodes


def report(run_dirs, out_dir) -> dict:
    """Aggregate ablation runs into plot-ready CSV files; returns row counts per file."""
    rows = {name: [] for name in REPORT_FILES}
    for run_dir in map(Path, run_dirs):
        rep, episodes = _read_run(run_dir)
        run = run_dir.name
        for e in episodes:
            rows["success.csv"].append((run, e["variant"], e["episode"], int(bool(e["success"])), e["steps"]))
            for i, d in enumerate(e.get("distances", [])):
                rows["distances.csv"].append((run, e["variant"], e["episode"], i, repr(float(d))))
        for r in rep["table"]:
            rows["rates.csv"].append((run, r["variant"], repr(float(r["success_rate"])), r["episodes"]))
        for enc, losses in sorted(rep.get("byol_losses", {}).items()):
            for epoch, loss in enumerate(losses):
                rows["losses.csv"].append((run, enc, epoch, repr(float(loss))))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, header in REPORT_FILES.items():
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows[name])
    return {name: len(r) for name, r in rows.items()}
