"""Acceptance gate: one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` (lines are printed even under
output capture) or ``python tests/test_acceptance.py``.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import brute_force_decode  # noqa: E402
from uepmm import analytics, cli, gf, simrun, training  # noqa: E402
from uepmm.blockmat import build_class_profile  # noqa: E402
from uepmm.decode import ReceivedSet, decode  # noqa: E402
from uepmm.latency import ExponentialLatency  # noqa: E402

GAMMA = (0.35, 0.35, 0.3)
K = (1, 2, 6)
LAT = ExponentialLatency(0.25)
W = 40

pytestmark = pytest.mark.slow


def _report(n, ok, detail, request=None):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    if request is not None:
        capman = request.config.pluginmanager.getplugin("capturemanager")
        with capman.global_and_fixture_disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


def _setup():
    prof = build_class_profile([1, 2, 3], [1, 2, 3], 3)
    var = analytics.VarianceProfile.from_levels([10.0, 1.0, 0.1], [1, 2, 3], [1, 2, 3], U=5, Q=5, M=100)
    return prof, var


def fig3_config(**kw):
    data = cli.fig3_preset()
    data.update(kw)
    return simrun.ExperimentConfig.from_dict(data)


# -- criteria ---------------------------------------------------------------


def criterion_1(request=None):
    t0 = time.perf_counter()
    got = (
        analytics.now_decoding_bound(GAMMA, K, 2)[0],
        analytics.now_decoding_bound(GAMMA, K, 4)[1],
        analytics.now_decoding_bound(GAMMA, K, 6)[2],
    )
    want = (0.5775, 0.43701875, 0.000729)
    dt = time.perf_counter() - t0
    err = max(abs(g - w) for g, w in zip(got, want))
    ok = err <= 1e-9 and dt < 1
    return _report(1, ok, f"P_d values {tuple(round(float(g), 10) for g in got)}, max abs err {err:.1e}, {dt:.3f}s", request)


def criterion_2(request=None):
    t0 = time.perf_counter()
    v1 = analytics.expected_loss_mds(9, LAT, W, 1.0)
    v2 = analytics.expected_loss_mds(9, LAT, W, 2.0)
    dt = time.perf_counter() - t0
    ok = abs(v1 - 0.4615) <= 1e-3 and abs(v2 - 0.00762) <= 1e-3 and dt < 1
    return _report(2, ok, f"MDS loss t=1 {v1:.5f} (0.4615), t=2 {v2:.6f} (0.00762), {dt:.3f}s", request)


def criterion_3(request=None):
    # reference UEP time curves count one result fewer than arrived (packet_lag=1)
    prof, var = _setup()
    t0 = time.perf_counter()
    v1 = analytics.expected_loss_now(GAMMA, prof, var, LAT, W, 1.0, packet_lag=1)[1]
    v2 = analytics.expected_loss_now(GAMMA, prof, var, LAT, W, 2.0, packet_lag=1)[1]
    dt = time.perf_counter() - t0
    ok = abs(v1 - 0.1130) <= 1e-3 and abs(v2 - 0.0267) <= 1e-3 and dt < 1
    return _report(3, ok, f"NOW loss (lag 1) t=1 {v1:.5f} (0.1130), t=2 {v2:.5f} (0.0267), {dt:.3f}s", request)


def criterion_4(request=None):
    cfg = fig3_config(strategies=["EW"], analytic=[], deadlines=[1.0], trials=100_000, seed=0)
    t0 = time.perf_counter()
    losses, _ = simrun.trial_losses(cfg, "EW")
    m, ci = simrun.mean_ci(losses[:, 0])
    dt = time.perf_counter() - t0
    ok = abs(m - 0.0882) <= 0.01 and abs(m - 0.0882) <= ci and dt < 120
    return _report(4, ok, f"EW MC t=1 {m:.5f} +/- {ci:.5f} over 1e5 trials (0.0882), {dt:.1f}s", request)


def criterion_5(request=None):
    cfg = fig3_config(trials=10_000, seed=1)
    rows = simrun.run_sweep(cfg)
    curve = {}
    for x, s, v, _ in rows:
        curve.setdefault(s, {})[round(x, 10)] = v
    ts = sorted(curve["MDS"])
    early = [t for t in ts if 0 < t <= 1.6]
    late = [t for t in ts if t >= 1.9]
    bad = []
    for s in ("NOW", "EW"):
        bad += [(s, t) for t in early if not curve[s][t] < curve["MDS"][t]]
        bad += [(s, t) for t in late if not curve[s][t] > curve["MDS"][t]]
    ok = not bad
    detail = f"UEP below MDS at t in {early[0]}..{early[-1]}, above at t in {late[0]}..{late[-1]}"
    if bad:
        detail += f"; violations {bad}"
    return _report(5, ok, detail, request)


def criterion_6(request=None):
    prof, var = _setup()
    exact = {n: analytics.loss_vs_received("NOW", prof, var, GAMMA, n)[0] for n in (1, 5)}
    cfg = simrun.ExperimentConfig.from_dict(
        dict(strategies=["NOW", "MDS"], windows={"NOW": "class"}, sweep="received", received=list(range(W + 1)), trials=10_000, seed=2)
    )
    now = simrun.trial_losses(cfg, "NOW")[0]
    mc = {n: simrun.mean_ci(now[:, n]) for n in (1, 5)}
    mds = simrun.trial_losses(cfg.replace(trials=200), "MDS")[0]
    mds_ok = np.all(mds[:, :9] == 1.0) and np.all(mds[:, 9:] == 0.0)
    mds_exact = all(analytics.loss_vs_received("MDS", prof, var, GAMMA, n)[0] == (1.0 if n < 9 else 0.0) for n in range(W + 1))
    want = {1: 0.7159, 5: 0.1898}
    exact_ok = all(abs(exact[n] - want[n]) <= 1e-4 for n in want)
    mc_ok = all(abs(mc[n][0] - want[n]) <= mc[n][1] for n in want)
    ok = exact_ok and mc_ok and mds_ok and mds_exact
    detail = (
        f"NOW N=1 exact {exact[1]:.5f} MC {mc[1][0]:.4f}+/-{mc[1][1]:.4f} (0.7159); "
        f"N=5 exact {exact[5]:.5f} MC {mc[5][0]:.4f}+/-{mc[5][1]:.4f} (0.1898); MDS step at 9: {bool(mds_ok and mds_exact)}"
    )
    return _report(6, ok, detail, request)


def _instance(rng):
    N, P = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    K_ = N * P
    r = int(rng.integers(0, K_ + 3))
    G = np.zeros((r, K_))
    kind = rng.integers(3)
    for i in range(r):
        if kind == 0:
            sup = rng.random(K_) < rng.uniform(0.1, 0.7)
            G[i, sup] = rng.uniform(-1, 1, size=sup.sum())
        elif kind == 1:
            a = (rng.random(N) < 0.6) * rng.uniform(-1, 1, size=N)
            b = (rng.random(P) < 0.6) * rng.uniform(-1, 1, size=P)
            G[i] = np.outer(a, b).ravel()
        else:
            G[i, rng.integers(K_)] = 1.0
            if i and rng.random() < 0.3:
                G[i] = -3.0 * G[i - 1]
    return N, P, G


def criterion_7(request=None):
    rng = np.random.default_rng(77)
    U, Q = 3, 2
    t0 = time.perf_counter()
    mask_bad = value_bad = 0
    worst = 0.0
    for _ in range(1000):
        N, P, G = _instance(rng)
        blocks = rng.normal(size=(N * P, U * Q))
        Y = G @ blocks
        rep = decode(ReceivedSet(G, Y.reshape(len(G), U, Q), np.zeros(len(G))), (N, P), block_shape=(U, Q))
        mask, x = brute_force_decode(G, Y)
        mask_bad += not np.array_equal(rep.recovered.ravel(), mask)
        est = rep.estimate.reshape(N, U, P, Q).transpose(0, 2, 1, 3).reshape(N * P, -1)
        if mask.any():
            rel = np.linalg.norm(est[mask] - x[mask], axis=1) / np.linalg.norm(x[mask], axis=1)
            worst = max(worst, float(rel.max()))
            value_bad += bool(np.any(rel > 1e-8))
        value_bad += bool(np.any(est[~mask] != 0))
    dt = time.perf_counter() - t0
    ok = mask_bad == 0 and value_bad == 0 and dt < 30
    return _report(7, ok, f"1000 instances: {mask_bad} mask mismatches, {value_bad} value mismatches, worst rel err {worst:.1e}, {dt:.1f}s", request)


def criterion_8(request=None):
    p = gf.MERSENNE31
    # nine row blocks, one column block: every class is a single level pair
    flat = build_class_profile([1, 2, 2, 3, 3, 3, 3, 3, 3], [1], 3)
    assert not any(flat.is_composite(l) for l in (1, 2, 3))
    parts = []
    ok = True
    for n in (2, 4, 8):
        sim = simrun.class_decoding_mc(flat, GAMMA, n, trials=100_000, seed=800 + n, strategy="NOW", modulus=p)
        bound = analytics.now_decoding_bound(GAMMA, flat.class_counts, n)
        err = np.abs(sim - bound).max()
        ok &= err <= 0.01
        parts.append(f"N={n} max|sim-bound| {err:.4f}")
    composite, _ = _setup()
    slack = []
    for n in (2, 4, 8):
        trials = 20_000
        sim = simrun.class_decoding_mc(composite, GAMMA, n, trials=trials, seed=900 + n, strategy="NOW", modulus=p)
        bound = analytics.now_decoding_bound(GAMMA, composite.class_counts, n)
        ok &= sim[1] < bound[1]
        slack.append(f"{bound[1] - sim[1]:.4f}")
    parts.append(f"composite class 2 bound minus sim at N=2,4,8: {', '.join(slack)}")
    return _report(8, bool(ok), "; ".join(parts), request)


def criterion_9(request=None):
    t0 = time.perf_counter()
    cfg = training.TrainConfig()
    data = training.load_data(cfg)
    src = "MNIST" if (cfg.mnist_dir or __import__("os").environ.get("UEPMM_MNIST")) else "synthetic"
    # (a) finite differences
    net = training.DenseNet.init(np.random.default_rng(0))
    grad_err = training.gradient_check(net, data[0][:64], data[1][:64], count=20)
    ok_a = grad_err <= 1e-5
    # (b) no deadline: coded step equals the exact step
    x, y = data[0][:64], data[1][:64]
    ref = net.copy()
    training.coded_grad_step(ref, x, y, "BASELINE", ExponentialLatency(0.5), np.inf, None)
    step_err = 0.0
    for s in ("UNCODED", "BLOCKREP"):
        trial = net.copy()
        training.coded_grad_step(trial, x, y, s, ExponentialLatency(0.5), np.inf, np.random.default_rng(1))
        for a, b in zip(ref.parameters(), trial.parameters()):
            step_err = max(step_err, float(np.linalg.norm(a - b) / np.linalg.norm(a)))
    ok_b = step_err <= 1e-8
    # (c), (d) accuracy curves
    curves = training.run_training(cfg)
    final = {k: v[-1][1] for k, v in curves.items()}
    at1 = {s: final[(s, 1.0)] for s in training.TRAIN_STRATEGIES}
    uep_min = min(at1["NOW"], at1["EW"])
    ok_c = at1["BASELINE"] >= max(at1["NOW"], at1["EW"]) and uep_min >= at1["UNCODED"] - 0.01 and at1["UNCODED"] >= at1["BLOCKREP"]
    mono = {s: [final[(s, t)] for t in cfg.t_max] for s in cfg.strategies}
    ok_d = all(np.all(np.diff(v) >= 0) for v in mono.values())
    dt = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and ok_d and dt < 900
    detail = (
        f"{src} data; (a) grad rel err {grad_err:.1e} {'ok' if ok_a else 'FAIL'}; "
        f"(b) step rel err {step_err:.1e} {'ok' if ok_b else 'FAIL'}; "
        f"(c) t=1 accuracy " + ", ".join(f"{s} {a:.3f}" for s, a in at1.items()) + f" {'ok' if ok_c else 'FAIL'}; "
        f"(d) monotone in T_max {'ok' if ok_d else 'FAIL ' + str(mono)}; {dt:.0f}s"
    )
    return _report(9, ok, detail, request)


def criterion_10(request=None, tmp=None):
    import tempfile

    base = Path(tmp or tempfile.mkdtemp())
    runs = {
        "fig2": (["fig2"], "fig2.csv"),
        "fig3": (["fig3", "--trials", "300"], "fig3.csv"),
        "fig4": (["fig4", "--trials", "100"], "fig4.csv"),
        "train": (["train", "--t-max", "1", "--samples", "640", "--repeats", "1", "--strategies", "now", "uncoded"], "accuracy_now_t1.csv"),
    }
    same = {}
    for name, (args, out) in runs.items():
        blobs = []
        for threads in ("1", "3"):
            d = base / f"{name}-{threads}"
            rc = cli.main(args + ["--seed", "7", "--threads", threads, "--out", str(d)])
            blobs.append((rc, (d / out).read_bytes() if rc == 0 else None))
        same[name] = blobs[0][0] == 0 and blobs[0] == blobs[1]
    ok = all(same.values())
    return _report(10, ok, "byte-identical across --threads 1/3: " + ", ".join(f"{k} {v}" for k, v in same.items()), request)


# -- pytest entry points --------------------------------------------------------


@pytest.mark.parametrize("n", range(1, 10))
def test_criterion(n, request):
    assert globals()[f"criterion_{n}"](request)


def test_criterion_10(request, tmp_path):
    assert criterion_10(request, tmp_path)


if __name__ == "__main__":
    results = [globals()[f"criterion_{n}"]() for n in range(1, 11)]
    print(f"{sum(results)}/10 criteria passed")
    sys.exit(0 if all(results) else 1)
