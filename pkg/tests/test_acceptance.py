"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL`` line (shown in the terminal
summary) before asserting, so a failing criterion is still reported.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from marscf import tensor as T
from marscf.checkpoint import load_checkpoint
from marscf.data import pixel_centers
from marscf.gradcheck import finite_diff_jacobian, log_abs_det
from marscf.interpolate import InterpConfig, interpolate_path, interpolation_objective, linear_interp, project_interp
from marscf.layers import ActNorm, AffineCoupling, FlowStep, InvConv1x1, MixLogCDFCoupling, merge, split, squeeze, unsqueeze
from marscf.model import MARSCF, FlowConfig, channel_dims, critical_path_steps, marps_sample
from marscf.prior import LevelPrior, SamplingTrace, gaussian_logpdf
from marscf.train import deterministic_fields, evaluate, train

from conftest import SMOKE_FLOW, SMOKE_TRAIN, randomize, record_criterion


def layer_zoo(rng):
    """One randomized instance of every invertible layer kind, with a matching input sampler."""
    layers = {
        "actnorm": randomize(ActNorm(4), rng, 0.3),
        "invconv1x1": randomize(InvConv1x1(4, rng), rng, 0.3),
        "affine_coupling": randomize(AffineCoupling(4, 16, rng), rng, 0.3),
        "mixlogcdf_coupling": randomize(MixLogCDFCoupling(4, 16, rng), rng, 0.3),
        "flow_step_affine": randomize(FlowStep(4, "affine", 16, rng), rng, 0.2),
        "flow_step_mixlogcdf": randomize(FlowStep(4, "mixlogcdf", 16, rng), rng, 0.2),
    }
    return layers


def test_criterion_01_invertibility():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for name, layer in layer_zoo(rng).items():
        x = rng.uniform(-3, 3, size=(3, 4, 4, 4))
        y, _ = layer.forward(T.Tensor(x))
        worst[name] = float(np.abs(layer.inverse(y)[0].data - x).max())
    x = rng.normal(size=(3, 2, 4, 4))
    worst["squeeze"] = float(np.abs(unsqueeze(squeeze(T.Tensor(x))).data - x).max())
    worst["split"] = float(np.abs(merge(*split(T.Tensor(x))).data - x).max())
    for C, N, n, coupling in itertools.product([1, 3], [4, 8], [1, 2], ["affine", "mixlogcdf"]):
        config = FlowConfig(channels=C, size=N, levels=n, couplings=2, coupling=coupling, width=16)
        model = randomize(MARSCF(config, seed=C * 100 + N * 10 + n), rng, 0.1)
        x = rng.normal(size=(3, C, N, N))
        worst[f"model C={C} N={N} n={n} {coupling}"] = float(np.abs(model.decode(model.encode(x)).data - x).max())
    elapsed = time.perf_counter() - start
    max_err = max(np.inf if np.isnan(v) else v for v in worst.values())
    ok = max_err < 1e-5 and elapsed < 60
    record_criterion(1, ok, f"max |inverse(forward(x)) - x| = {max_err:.2e} over {len(worst)} cases "
                            f"(< 1e-5), {elapsed:.1f}s (< 60s)")
    assert max_err < 1e-5, {k: v for k, v in worst.items() if v >= 1e-5}
    assert elapsed < 60


def test_criterion_02_jacobian_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    rel = {}
    cases = [
        ("actnorm", randomize(ActNorm(2), rng, 0.4), (1, 2, 2, 2)),
        ("invconv1x1", randomize(InvConv1x1(4, rng), rng, 0.4), (1, 4, 2, 2)),
        ("affine_coupling", randomize(AffineCoupling(4, 16, rng), rng, 0.4), (1, 4, 2, 2)),
        # larger scales push mixture weights so flat that the difference quotient underflows
        ("mixlogcdf_coupling", randomize(MixLogCDFCoupling(4, 16, rng), rng, 0.2), (1, 4, 4, 4)),
    ]
    for name, layer, shape in cases:
        x = rng.uniform(-2, 2, size=shape)
        analytic = layer.forward(T.Tensor(x))[1].data[0]
        numeric = log_abs_det(finite_diff_jacobian(lambda v, layer=layer: layer.forward(T.Tensor(v))[0], x))
        rel[name] = abs(analytic - numeric) / abs(numeric)
    for coupling in ("affine", "mixlogcdf"):
        config = FlowConfig(channels=1, size=4, levels=1, couplings=2, coupling=coupling, width=16)
        model = randomize(MARSCF(config, seed=3), rng, 0.2)
        x = rng.uniform(-2, 2, size=(1, 1, 4, 4))
        analytic = model.encode(T.Tensor(x), return_logdet=True)[1].data[0]
        numeric = log_abs_det(finite_diff_jacobian(lambda v, m=model: m.encode(T.Tensor(v))[0], x))
        rel[f"model_1level_{coupling}"] = abs(analytic - numeric) / abs(numeric)
    elapsed = time.perf_counter() - start
    worst = max(rel.values(), key=lambda v: np.inf if np.isnan(v) else v)
    ok = all(v < 1e-3 for v in rel.values()) and elapsed < 120
    record_criterion(2, ok, f"max relative logdet error = {worst:.2e} over {len(rel)} cases (< 1e-3), "
                            f"{elapsed:.1f}s (< 120s)")
    assert all(v < 1e-3 for v in rel.values()), rel
    assert elapsed < 120


def test_criterion_03_normalization():
    start = time.perf_counter()
    config = FlowConfig(channels=1, size=2, levels=1, couplings=2, coupling="affine", width=32)
    model = randomize(MARSCF(config, seed=4), np.random.default_rng(4), 0.05)
    axis = np.arange(-6.0, 6.0 + 1e-9, 0.25)
    weights = np.full(axis.size, 0.25)
    weights[[0, -1]] *= 0.5
    grid = np.stack(np.meshgrid(axis, axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 1, 2, 2)
    w = np.einsum("i,j,k,l->ijkl", weights, weights, weights, weights).ravel()
    total = []
    with T.no_grad():
        for s in range(0, len(grid), 65536):
            logp = model.log_prob(T.Tensor(grid[s:s + 65536])).data
            total.append(np.sum(w[s:s + 65536] * np.exp(logp)))
    mass = math.fsum(total)
    elapsed = time.perf_counter() - start
    ok = 0.95 <= mass <= 1.05 and elapsed < 300
    record_criterion(3, ok, f"trapezoid integral of exp(logp) over [-6,6]^4 = {mass:.5f} (in [0.95, 1.05]), "
                            f"{elapsed:.1f}s (< 300s)")
    assert 0.95 <= mass <= 1.05
    assert elapsed < 300


def test_criterion_04_critical_path(monkeypatch):
    emitted = {"count": 0}
    original = LevelPrior.emit

    def counting_emit(self, prev, cond, state):
        if not T.is_grad_enabled():
            emitted["count"] += 1
        return original(self, prev, cond, state)

    monkeypatch.setattr(LevelPrior, "emit", counting_emit)
    results = []
    for C, n in itertools.product([1, 3], [1, 2, 3]):
        for N in sorted({2 ** n, 8}):
            config = FlowConfig(channels=C, size=N, levels=n)
            trace = SamplingTrace()
            emitted["count"] = 0
            marps_sample(MARSCF(config, seed=0, identity_init=True), 2, 1.0, np.random.default_rng(0), trace)
            formula = C * (3 * 2 ** n - 2)
            results.append((C, N, n, trace.channel_steps, emitted["count"], formula))
    counts_ok = all(steps == emitted == formula == critical_path_steps(FlowConfig(channels=C, size=N, levels=n))
                    for C, N, n, steps, emitted, formula in results)
    bound_ok = all(formula <= 3 * C * N for C, N, n, _, _, formula in results if n <= math.log2(N))
    rgb = [r for r in results if r[0] == 3 and r[2] == 3]
    rgb_ok = all(r[3] == 66 for r in rgb)
    ok = counts_ok and bound_ok and rgb_ok
    record_criterion(4, ok, f"instrumented channel steps equal C(3*2^n-2) for {len(results)} configs; "
                            f"bound 3CN holds; C=3 n=3 -> {rgb[0][3]}")
    assert counts_ok, results
    assert bound_ok
    assert rgb_ok


def test_criterion_05_channel_dims():
    rng = np.random.default_rng(5)
    failures = []
    for _ in range(20):
        C, n, k = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        N = 2 ** n * k
        shapes = channel_dims(FlowConfig(channels=C, size=N, levels=n))
        expected = [(2 ** i * C, N // 2 ** i, N // 2 ** i) for i in range(1, n)]
        expected.append((2 ** (n + 1) * C, N // 2 ** n, N // 2 ** n))
        if shapes != expected or sum(math.prod(s) for s in shapes) != C * N * N:
            failures.append((C, N, n, shapes))
    ok = not failures
    record_criterion(5, ok, f"channel_dims matches the level formulas and sums to C*N^2 for 20 random configs "
                            f"({len(failures)} failures)")
    assert ok, failures


def _emitted_params(prior, l, r):
    cond = prior._conditioning(r, l.shape[0])
    prev, state = prior._begin(l.shape[0])
    params = []
    for j in range(prior.channels):
        mu, log_sigma, state = prior.emit(prev, cond, state)
        params.append((mu.data, log_sigma.data))
        prev = l[:, j:j + 1]
    return params


def test_criterion_06_prior_causality():
    rng = np.random.default_rng(6)
    worst_unchanged, checks, failures = 0.0, 0, []
    for instance in range(5):
        prior = randomize(LevelPrior(4, 3, 3, 2, rng, hidden=8, layers=2), rng, 0.5)
        l = rng.normal(size=(2, 4, 3, 3))
        r = T.Tensor(rng.normal(size=(2, 2, 3, 3)))
        base_terms = prior.channel_logprobs(T.Tensor(l), r).data
        base_params = _emitted_params(prior, T.Tensor(l), r)
        for k in range(1, 5):  # channel k, counted from 1
            moved = l.copy()
            moved[:, k - 1] += rng.normal(size=(3, 3))
            terms = prior.channel_logprobs(T.Tensor(moved), r).data
            params = _emitted_params(prior, T.Tensor(moved), r)
            # terms of earlier channels are untouched
            diff = np.abs(terms[:, :k - 1] - base_terms[:, :k - 1]).max(initial=0.0)
            # the parameters scoring channels 1..k do not see channel k
            pdiff = max(max(np.abs(a[0] - b[0]).max(), np.abs(a[1] - b[1]).max())
                        for a, b in zip(params[:k], base_params[:k]))
            # term k changes only through its own value
            mu, log_sigma = base_params[k - 1]
            own = gaussian_logpdf(T.Tensor(moved[:, k - 1:k]), T.Tensor(mu), T.Tensor(log_sigma)).data.sum(axis=(1, 2, 3))
            own_diff = np.abs(own - terms[:, k - 1]).max()
            worst_unchanged = max(worst_unchanged, diff, pdiff)
            later_changed = k == 4 or np.any(np.abs(terms[:, k:] - base_terms[:, k:]) > 1e-9)
            checks += 1
            if not (diff < 1e-12 and pdiff < 1e-12 and own_diff < 1e-10 and later_changed):
                failures.append((instance, k, diff, pdiff, own_diff, later_changed))
    ok = not failures
    record_criterion(6, ok, f"perturbing channel k leaves earlier terms and the parameters for channels 1..k "
                            f"unchanged (max diff {worst_unchanged:.1e} < 1e-12) and changes later terms; "
                            f"{checks} checks")
    assert ok, failures


@pytest.mark.slow
def test_criterion_07_training_smoke(smoke_run, smoke_dataset):
    val = smoke_run.history("val")
    post_init, final = val[0], val[-1]
    improvement = post_init - final
    median_ok = np.median(val[-5:]) < np.median(val[1:6])
    sizes_ok = len(smoke_dataset.train) == 2048 and len(smoke_dataset.val) == 512
    ok = improvement >= 1.0 and final < 7.0 and smoke_run.runtime < 1800 and median_ok and sizes_ok
    record_criterion(7, ok, f"val bpd {post_init:.3f} after init -> {final:.3f} after 50 epochs "
                            f"(improvement {improvement:.3f} >= 1.0, final < 7.0), {smoke_run.runtime:.0f}s (< 1800s)")
    assert sizes_ok
    assert improvement >= 1.0
    assert final < 7.0
    assert median_ok
    assert smoke_run.runtime < 1800


@pytest.mark.slow
def test_criterion_08_sampling_duality(smoke_run):
    model = smoke_run.model
    trace = SamplingTrace()
    x = marps_sample(model, 32, 1.0, np.random.default_rng(8), trace)
    with T.no_grad():
        encoded = model.encode(x)
    err = max(float(np.abs(e.data - d).max()) for e, d in zip(encoded, trace.latents))
    ok = err < 1e-4 and x.shape == (32, 1, 8, 8)
    record_criterion(8, ok, f"max |encode(sample) - drawn latents| = {err:.2e} on 32 samples (< 1e-4)")
    assert ok


@pytest.mark.slow
def test_criterion_09_interpolation(smoke_run, smoke_dataset):
    model = smoke_run.model
    rng = np.random.default_rng(9)
    pairs = rng.choice(len(smoke_dataset.val), size=(4, 2), replace=False)
    zero_err, per_waypoint_ok, totals = 0.0, True, []
    for ia, ib in pairs:
        xa = pixel_centers(smoke_dataset.val[ia:ia + 1])
        xb = pixel_centers(smoke_dataset.val[ib:ib + 1])
        with T.no_grad():
            za, zb = model.encode(T.Tensor(xa)), model.encode(T.Tensor(xb))
        z_mid = linear_interp(za, zb, 0.5)
        proj = project_interp(model, z_mid, xa, xb, InterpConfig(lambda1=0.0, lambda2=0.0))
        zero_err = max(zero_err, max(float(np.abs(a - b).max()) for a, b in zip(proj.latents, z_mid)))

        cfg = InterpConfig(lambda1=0.35, lambda2=0.35)
        path = interpolate_path(model, xa, xb, cfg)
        # re-score the returned waypoints independently of the optimizer's bookkeeping
        waypoints = [linear_interp(za, zb, float(a)) for a in path.alphas]
        z_lin = [np.concatenate([w[i] for w in waypoints]) for i in range(len(za))]
        with T.no_grad():
            z_proj = model.encode(T.Tensor(path.images))
            rescored = interpolation_objective(model, z_proj, z_lin, xa, xb, cfg.lambda1, cfg.lambda2).data
            linear = interpolation_objective(model, z_lin, z_lin, xa, xb, cfg.lambda1, cfg.lambda2).data
        per_waypoint_ok &= bool(np.all(path.objective <= path.linear_objective))
        per_waypoint_ok &= bool(np.allclose(rescored, path.objective, rtol=1e-6, atol=1e-6))
        per_waypoint_ok &= bool(np.allclose(linear, path.linear_objective, rtol=1e-12))
        totals.append((float(path.objective.sum()), float(path.linear_objective.sum())))
    totals_ok = all(p <= lin for p, lin in totals)
    ok = zero_err < 1e-6 and per_waypoint_ok and totals_ok
    summary = ", ".join(f"{p:.1f}<={lin:.1f}" for p, lin in totals)
    record_criterion(9, ok, f"lambda=0 deviation {zero_err:.1e} (< 1e-6); lambda=0.35 objective non-increasing "
                            f"at every waypoint; path totals projected<=linear: {summary}")
    assert zero_err < 1e-6
    assert per_waypoint_ok
    assert totals_ok


@pytest.mark.slow
def test_criterion_10_checkpoint_determinism(smoke_run, smoke_dataset):
    ckpt_path = smoke_run.out / "checkpoints" / "final.ckpt"
    reloaded = load_checkpoint(ckpt_path).model
    before = evaluate(smoke_run.model, smoke_dataset, "val")
    after = evaluate(reloaded, smoke_dataset, "val")
    eval_ok = before == after and before == smoke_run.history("val")[-1]

    # two fresh runs with the smoke configuration and seed, shortened to 3 epochs
    short = type(SMOKE_TRAIN)(**{**SMOKE_TRAIN.__dict__, "epochs": 3})
    runs = [deterministic_fields(train(MARSCF(SMOKE_FLOW, seed=0), smoke_dataset, short).records) for _ in range(2)]
    logged = [json.loads(s) for s in (smoke_run.out / "metrics.jsonl").read_text().splitlines()]
    prefix = deterministic_fields(logged)[:len(runs[0])]
    logs_ok = runs[0] == runs[1] == prefix
    ok = eval_ok and logs_ok
    record_criterion(10, ok, f"reloaded checkpoint bpd {after!r} == in-memory {before!r}; identical-seed runs "
                             f"produce identical logs ({len(runs[0])} records, matching the 50-epoch run's prefix)")
    assert eval_ok
    assert logs_ok
