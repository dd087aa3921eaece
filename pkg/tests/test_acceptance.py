"""Acceptance criteria 1-9, each at its stated tolerance and time budget.

Every test records one ``PASS``/``FAIL`` line that is printed in the session
summary (and immediately, when run with ``-s``).
"""

import json
import time
from collections import deque

import numpy as np
import pytest

from tdex import byol, core, experiments as ex, nn
from tdex.byol import AugmentConfig, ByolConfig
from tdex.cli import main
from tdex.config import RunConfig
from tdex.core import TACTILE_SHAPE, Trajectory, identity_quat
from tdex.ingest import SubsampleConfig, motion_subsample
from tdex.nn import Conv2d, GlobalAvgPool, L2Normalize, Linear, NetSpec, ReLU
from tdex.representations import pca_fit, pca_project, pca_reconstruct
from tdex.retrieval import RejectBuffer, make_index, nn_query
from tdex.synth import clustered_tactile

from conftest import ACCEPTANCE_LINES
from fdcheck import numeric_grad, rel_err, sample_coords


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1. gradients

def _layer_case(kind, rng):
    """A single-layer net of ``kind`` with random small shapes and its input batch."""
    n = int(rng.integers(1, 4))
    if kind == "conv2d":
        c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        return NetSpec("t", (c, h, w), (Conv2d(c, o, k, s, p),)), rng.normal(size=(n, c, h, w))
    if kind == "linear":
        i, o = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        return NetSpec("t", (i,), (Linear(i, o),)), rng.normal(size=(n, i))
    if kind == "relu":
        d = int(rng.integers(2, 10))
        return NetSpec("t", (d,), (ReLU(),)), rng.normal(size=(n, d))
    if kind == "global_avg_pool":
        c, h, w = (int(v) for v in rng.integers(1, 5, 3))
        return NetSpec("t", (c, h, w), (GlobalAvgPool(),)), rng.normal(size=(n, c, h, w))
    d = int(rng.integers(2, 10))
    return NetSpec("t", (d,), (L2Normalize(),)), rng.normal(size=(n, d))


def _check_layer(net, x, rng):
    params = nn.init_params(net, rng)
    for name in params:
        params.params[name] += rng.normal(scale=0.1, size=params[name].shape)
    out, tape = nn.forward(net, params, x)
    r = rng.normal(size=out.shape)
    grads, gx = nn.backward(tape, r)

    def loss():
        return float(np.sum(nn.forward(net, params, x)[0] * r))

    errs = [rel_err(g, numeric_grad(loss, params.params[k])) for k, g in grads.items()]
    errs.append(rel_err(gx, numeric_grad(loss, x)))
    return max(errs)


def _check_byol(seed):
    rng = np.random.default_rng(seed)
    arch = ("tdex3", "stacked", "shared")[seed % 3]
    state = byol.init_byol(ByolConfig(arch=arch, proj_hidden=6, proj_dim=8, pred_hidden=5), rng)
    for name in state.online.names("predictor"):
        state.online.params[name] += rng.normal(scale=0.3, size=state.online[name].shape)
    for name in state.target_names:
        state.target.params[name] += rng.normal(scale=0.1, size=state.target[name].shape)
    n = int(rng.integers(1, 4))
    v1, v2 = rng.uniform(size=(2, n, 3, 16, 16))
    _, grads = byol.byol_loss(state, v1, v2)
    worst = 0.0
    for name, g in grads.items():
        coords = sample_coords(rng, g.size, 4)
        # deep ReLU stacks: a 1e-5 step can straddle a kink, so take a smaller float64 step
        num = numeric_grad(lambda: byol.byol_terms(state, v1, v2).mean(), state.online.params[name], coords, h=1e-7)
        worst = max(worst, rel_err(g.reshape(-1)[coords], num))
    return worst


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for kind in ("conv2d", "linear", "relu", "global_avg_pool", "l2_normalize"):
        for seed in range(20):
            rng = np.random.default_rng([1, seed])
            net, x = _layer_case(kind, rng)
            worst[kind] = max(worst.get(kind, 0.0), _check_layer(net, x, rng))
    worst["byol_loss"] = max(_check_byol(seed) for seed in range(20))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max rel err over 20 seeds each: {detail}; {elapsed:.1f}s (< 120s)")


# ---------------------------------------------------------------- 2. layout

def test_criterion_2_layout_oracle():
    t0 = time.perf_counter()
    fingers = [0] * 4 + [1] * 4 + [2] * 4 + [3] * 3
    slots = [0, 1, 2, 3] * 3 + [0, 1, 2]
    oracle = {}
    for p in range(15):
        for r in range(4):
            for c in range(4):
                for a in range(3):
                    oracle[(p, r, c, a)] = (a, 4 * slots[p] + r, 4 * fingers[p] + c)
    # forward map: a distinct value per taxel must land exactly where the oracle says
    pads = np.arange(720, dtype=np.float64).reshape(TACTILE_SHAPE) + 1.0
    img = core.layout_image(pads, pad_value=0.0)
    forward_ok = all(img[pix] == pads[tx] for tx, pix in oracle.items())
    injective = len(set(oracle.values())) == 720
    covered = np.count_nonzero(img) == 720 and np.all(img[core.PAD_MASK] == 0.0)
    inverse_ok = np.array_equal(core.image_to_pads(img), pads)
    stats = core.fit_norm_stats(pads[None])
    same = core.tactile_image(pads, stats).tobytes() == core.tactile_image(pads, stats, permutation=np.arange(15)).tobytes()
    elapsed = time.perf_counter() - t0
    ok = forward_ok and injective and covered and inverse_ok and same and elapsed < 1.0
    verdict(2, ok, f"oracle match {forward_ok}, injective {injective}, onto non-pad pixels {covered}, "
                   f"inverse {inverse_ok}, identity shuffle bit-identical {same}; {elapsed * 1e3:.0f}ms (< 1s)")


# ---------------------------------------------------------------- 3. nn_query

def _oracle_scale(x):
    """1 / largest pairwise distance, by a row-by-row scan."""
    best = 0.0
    for i in range(len(x)):
        best = max(best, float(np.max(np.linalg.norm(x - x[i], axis=1))))
    return 1.0 / best if best > 0 else 1.0


def _oracle_pick(visual, tactile, sv, st, y_v, y_t, w_v, w_t, blocked):
    """Plain scan with its own distances and exclusion; the first minimum wins."""
    d = np.zeros(len(visual))
    if w_v:
        d += w_v * np.linalg.norm(sv * (visual - y_v), axis=1)
    if w_t:
        d += w_t * np.linalg.norm(st * (tactile - y_t), axis=1)
    best, best_d = None, np.inf
    for i, di in enumerate(d.tolist()):
        if i not in blocked and di < best_d:
            best, best_d = i, di
    return best


def test_criterion_3_nn_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    sizes = [1, 500] + rng.integers(2, 500, 8).tolist()
    queries = mismatches = 0
    ks_used = set()
    for idx_i, n in enumerate(sizes):
        dv, dt = int(rng.integers(1, 20)), int(rng.integers(1, 40))
        visual, tactile = rng.normal(size=(n, dv)), rng.normal(size=(n, dt)) * rng.uniform(0.1, 10)
        acts = np.zeros((n, 23))
        acts[:, 3] = 1.0
        w_v, w_t = [(1.0, 1.0), (1.0, 2.0), (0.0, 1.0), (1.0, 0.0)][idx_i % 4]
        index = make_index(visual, tactile, acts, w_v=w_v, w_t=w_t)
        sv, st = _oracle_scale(visual), _oracle_scale(tactile)
        for k in (0, 3, 10):
            if k >= n:  # a buffer must be smaller than its index
                continue
            ks_used.add(k)
            buf, mine = RejectBuffer(k), deque(maxlen=k) if k else deque(maxlen=1)
            for q in range(1000):
                # every seventh query repeats a stored row: exact matches and ties
                row = int(rng.integers(n))
                exact = q % 7 == 0
                y_v = visual[row] if exact else rng.normal(size=dv)
                y_t = tactile[row] if exact else rng.normal(size=dt)
                blocked = set(mine) if k else set()
                expected = _oracle_pick(visual, tactile, sv, st, y_v, y_t, w_v, w_t, blocked)
                got = nn_query(index, y_v, y_t, buf).row
                mine.append(expected)
                queries += 1
                mismatches += got != expected
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and ks_used == {0, 3, 10} and elapsed < 60
    verdict(3, ok, f"{queries} queries over 10 indexes (sizes {min(sizes)}-{max(sizes)}) with buffers "
                   f"{sorted(ks_used)}: {mismatches} mismatches; {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------- 4. subsampler

def _walk(rng, n):
    """Random walk with pauses and bursts, so gaps of every size occur."""
    scale = rng.uniform(0.0005, 0.02)
    steps = rng.normal(scale=scale, size=(n, 5, 3)) * (rng.uniform(size=(n, 1, 1)) < rng.uniform(0.2, 1.0))
    steps[0] = 0.0
    pos = np.cumsum(steps, axis=0)
    ee, tips = pos[:, 0], pos[:, 0:1] + pos[:, 1:]
    return Trajectory(
        t=np.arange(n) * 0.1,
        tactile=np.zeros((n,) + TACTILE_SHAPE),
        ee_pos=ee,
        ee_quat=np.tile(identity_quat(), (n, 1)),
        joints=np.zeros((n, 16)),
        fingertips=tips,
    )


def _motion(traj, i, k):
    ee = np.sqrt(np.sum((traj.ee_pos[k] - traj.ee_pos[i]) ** 2))
    return ee + sum(np.sqrt(np.sum((traj.fingertips[k, f] - traj.fingertips[i, f]) ** 2)) for f in range(4))


def test_criterion_4_subsampler():
    rng = np.random.default_rng(4)
    trajs = [_walk(rng, int(rng.integers(1, 250))) for _ in range(100)]
    gap_fail = idem_fail = checked = 0
    for thr in (0.01, 0.02):
        for traj in trajs:
            kept = motion_subsample(traj, SubsampleConfig(thr))
            bounds = kept + [len(traj)]
            ok = kept[0] == 0 and kept == sorted(set(kept))
            # exhaustive: every skipped frame is within thr of the last kept frame,
            # and every kept frame (after the first) is beyond it
            for a, b in zip(bounds, bounds[1:]):
                ok &= all(_motion(traj, a, j) <= thr for j in range(a + 1, b))
                if b < len(traj):
                    ok &= _motion(traj, a, b) > thr
                checked += b - a
            gap_fail += not ok
            again = motion_subsample(traj.subset(kept), SubsampleConfig(thr))
            idem_fail += again != list(range(len(kept)))
    ok = gap_fail == 0 and idem_fail == 0
    verdict(4, ok, f"100 trajectories x thresholds 0.01/0.02 ({checked} frames checked): "
                   f"{gap_fail} gap violations, {idem_fail} non-idempotent")


# ---------------------------------------------------------------- 5. PCA

def test_criterion_5_pca():
    rng = np.random.default_rng(5)
    latent = rng.normal(size=(200, 40)) @ rng.normal(size=(40, 720))
    x = latent * rng.uniform(0.1, 3.0, 720) + rng.normal(scale=0.05, size=(200, 720))
    model = pca_fit(x, k=200)
    c, var = model.components, model.explained_variance
    ortho = float(np.max(np.abs(c @ c.T - np.eye(200))))
    monotone = bool(np.all(np.diff(var) <= 0))
    recon = float(np.max(np.abs(pca_reconstruct(model, pca_project(model, x)) - x)))
    z = pca_project(model, x)
    cov = np.cov(z, rowvar=False)
    off = float(np.max(np.abs(cov - np.diag(np.diag(cov)))))
    diag_err = float(np.max(np.abs(np.diag(cov) - var)))
    # dense oracle: singular values of the centred data
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    ref = s ** 2 / 199
    eig_err = float(np.max(np.abs(var - ref)) / ref[0])
    align = float(np.min(np.abs(np.sum(c[:150] * vt[:150], axis=1))))
    ok = (ortho < 1e-8 and monotone and recon < 1e-8 and off < 1e-8 * ref[0] and diag_err < 1e-8 * ref[0]
          and eig_err < 1e-10 and align > 1 - 1e-6)
    verdict(5, ok, f"orthonormality {ortho:.1e}, non-increasing {monotone}, full-rank recon {recon:.1e}, "
                   f"projection off-diagonal cov {off:.1e} (top var {ref[0]:.1f}), eigenvalues vs SVD {eig_err:.1e}, "
                   f"min |cos| top-150 vs SVD {align:.9f}")


# ---------------------------------------------------------------- 6. BYOL

def _purity(features, labels, k=5):
    sq = np.sum(features * features, axis=1)
    d = sq[:, None] + sq[None] - 2 * features @ features.T
    np.fill_diagonal(d, np.inf)
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nearest] == labels[:, None]))


@pytest.mark.slow
def test_criterion_6_byol():
    rng = np.random.default_rng(6)
    imgs = rng.uniform(size=(8, 3, 16, 16))
    zero = True
    for arch in ("tdex3", "stacked", "shared"):
        state = byol.init_byol(ByolConfig(arch=arch), np.random.default_rng(0))
        views = byol.augment_batch(imgs, AugmentConfig.off(), 0, [(i,) for i in range(8)])
        loss, _ = byol.byol_loss(state, views, views)
        zero &= loss == 0.0
    x, y = clustered_tactile()
    stats = core.fit_norm_stats(x)
    images = core.tactile_image(x, stats)
    raw = _purity(core.normalize(x, stats).reshape(len(x), -1), y)
    t0 = time.perf_counter()
    res = byol.pretrain(images, ByolConfig(batch_size=128, epochs=60), seed=0)
    feats, _ = res.encoder.forward(res.params, images)
    learned = _purity(feats, y)
    losses = np.array(res.step_losses)
    bounded = bool(np.all((losses >= 0) & (losses <= 4)))
    ok = zero and bounded and learned - raw >= 0.10
    verdict(6, ok, f"identical views at init give loss 0.0 exactly: {zero}; {len(losses)} step losses in "
                   f"[{losses.min():.3f}, {losses.max():.3f}] within [0, 4]: {bounded}; 5-NN purity raw {raw:.3f} "
                   f"-> BYOL {learned:.3f} (+{100 * (learned - raw):.1f} pp, need >= 10); "
                   f"{time.perf_counter() - t0:.0f}s")


# ---------------------------------------------------------------- 7 & 8. ContactWorld

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    t0 = time.perf_counter()
    cfg = RunConfig(seed=0, variants=["tdex", "image_only", "tactile_only", "task_only", "bc"], episodes=100)
    data_dir = tmp_path_factory.mktemp("contactworld")
    ex.generate_datasets(cfg, data_dir)
    report = ex.run_ablation(cfg, ex.load_datasets(cfg, data_dir))
    return report, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_contactworld(ablation):
    report, elapsed = ablation
    r = {k: v["success_rate"] for k, v in report["variants"].items()}
    ok = (r["tdex"] > r["image_only"] and r["tdex"] > r["tactile_only"] and r["tdex"] >= r["task_only"]
          and r["bc"] < r["tdex"] and report["config"]["n_demos"] == 6 and report["config"]["episodes"] >= 50
          and elapsed < 900)
    verdict(7, ok, f"6 demos, {report['config']['episodes']} episodes: combined {r['tdex']:.2f} vs "
                   f"image-only {r['image_only']:.2f}, tactile-only {r['tactile_only']:.2f}, "
                   f"task-only {r['task_only']:.2f}, BC {r['bc']:.2f}; {elapsed:.0f}s (< 900s)")


@pytest.mark.slow
def test_criterion_8_play_sweep(ablation):
    report, _ = ablation
    sweep = report["sweep"]
    fracs = [s["fraction"] for s in sweep]
    rates = [s["success_rate"] for s in sweep]
    # each point may dip at most 5 pp below the best point to its left
    ok = fracs == [0.0, 0.125, 0.25, 0.5, 1.0] and all(
        rates[i] >= max(rates[:i]) - 0.05 for i in range(1, len(rates)))
    pts = ", ".join(f"{f:g}: {v:.3f}" for f, v in zip(fracs, rates))
    verdict(8, ok, f"success vs play fraction ({report['config']['sweep_replicates']} encoder seeds each) "
                   f"{pts}; non-decreasing within 5 pp")


# ---------------------------------------------------------------- 9. determinism

def test_criterion_9_ablate_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"variants": ["tdex", "bc", "raw"], "play_fractions": [0.0, 1.0],
                               "sweep_replicates": 2, "byol_steps": 6, "batch": 64, "episodes": 6,
                               "bc_epochs": 5, "play_minutes": 1.0}))
    assert main(["gen-synth", "--out", str(tmp_path / "data"), "--config", str(cfg)]) == 0
    files = ("report.json", "table.csv", "episodes.jsonl", "config.json")
    snaps = []
    for _ in range(2):
        assert main(["ablate", "--config", str(cfg), "--data", str(tmp_path / "data"),
                     "--out", str(tmp_path / "run")]) == 0
        snaps.append({f: (tmp_path / "run" / f).read_bytes() for f in files})
    same = [f for f in files if snaps[0][f] == snaps[1][f]]
    verdict(9, same == list(files), f"two ablate runs, byte-identical: {', '.join(same)} "
                                     f"({sum(len(b) for b in snaps[0].values())} bytes)")
