"""Central finite-difference checks of the analytic gradients."""
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cbam, retinex
from .rng import make_rng

TOLERANCE = 1e-4


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def _evaluate(build, values):
    g = ad.Graph()
    nodes = {k: g.param(v, k) for k, v in values.items()}
    loss = build(g, nodes)
    return g, loss


def gradient_errors(build, params, epsilon=1e-5, max_coords=None, rng=0):
    """Per-parameter max relative error between backward() and central differences.

    ``build(graph, nodes)`` must return a scalar loss Node. With ``max_coords``
    only that many coordinates per parameter (chosen by ``rng``) are probed.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    rng = make_rng(rng)
    values = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    g, loss = _evaluate(build, values)
    analytic = ad.backward(g, loss)
    g.release()
    errors = {}
    for name, val in values.items():
        flat = val.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            probes = []
            for delta in (epsilon, -epsilon):
                flat[i] = orig + delta
                gg, f = _evaluate(build, values)
                v = float(f.value)
                gg.release()
                if not np.isfinite(v):
                    flat[i] = orig
                    raise FloatingPointError(f"non-finite loss probing {name}[{i}] at {orig + delta!r}")
                probes.append(v)
            flat[i] = orig
            numeric = (probes[0] - probes[1]) / (2 * epsilon)
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], numeric)))
        errors[name] = worst
    return errors


def finite_diff_check(build, params, epsilon=1e-5, max_coords=None, rng=0):
    """Max relative error over all probed coordinates of all parameters."""
    return max(gradient_errors(build, params, epsilon, max_coords, rng).values())


# ------------------------------------------------------------------ suites

@dataclass
class CheckResult:
    name: str
    max_error: float
    seconds: float
    worst_param: str = ""

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def _projected(node, proj):
    """Scalar sum(node * proj): a generic linear read-out of a tensor op."""
    return ad.total(node * proj)


def primitive_cases(rng=0):
    """(name, build, params) for every differentiable primitive."""
    rng = make_rng(rng)
    x = rng.normal(size=(3, 8, 8))
    away = np.sign(x) * (np.abs(x) + 0.1)   # keep clear of kinks at 0
    proj = {s: rng.normal(size=s) for s in [(3, 8, 8), (2, 8, 8), (2, 4, 4), (3, 1, 1), (1, 8, 8),
                                              (3, 16, 16), (5, 8, 8), (2, 8, 8)]}
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    cases = [
        ("conv2d", lambda g, p: _projected(ad.conv2d(p["x"], p["k"], p["b"], 1, 1), proj[(2, 8, 8)]),
         {"x": x, "k": w, "b": b}),
        ("conv2d_stride2", lambda g, p: _projected(ad.conv2d(p["x"], p["k"], p["b"], 2, 1), proj[(2, 4, 4)]),
         {"x": x, "k": w, "b": b}),
        ("global_avg_pool", lambda g, p: _projected(ad.global_pool(p["x"], "avg"), proj[(3, 1, 1)]), {"x": x}),
        ("global_max_pool", lambda g, p: _projected(ad.global_pool(p["x"], "max"), proj[(3, 1, 1)]), {"x": x}),
        ("channel_avg_pool", lambda g, p: _projected(ad.channelwise_pool(p["x"], "avg"), proj[(1, 8, 8)]),
         {"x": x}),
        ("channel_max_pool", lambda g, p: _projected(ad.channelwise_pool(p["x"], "max"), proj[(1, 8, 8)]),
         {"x": x}),
        ("sigmoid", lambda g, p: _projected(ad.sigmoid(p["x"]), proj[(3, 8, 8)]), {"x": x}),
        ("relu", lambda g, p: _projected(ad.relu(p["x"]), proj[(3, 8, 8)]), {"x": away}),
        ("abs", lambda g, p: _projected(ad.absolute(p["x"]), proj[(3, 8, 8)]), {"x": away}),
        ("exp", lambda g, p: _projected(ad.exp(p["x"]), proj[(3, 8, 8)]), {"x": x}),
        ("nearest_upsample", lambda g, p: _projected(ad.nearest_upsample(p["x"], 2), proj[(3, 16, 16)]),
         {"x": x}),
        ("spatial_gradient", lambda g, p: sum(_projected(d, q) for d, q in zip(
            ad.spatial_gradient(p["x"]), (proj[(3, 8, 8)], -proj[(3, 8, 8)] ** 2))), {"x": x}),
        ("mul_broadcast", lambda g, p: _projected(p["x"] * p["m"], proj[(3, 8, 8)]),
         {"x": x, "m": rng.normal(size=(1, 8, 8))}),
        ("add_sub", lambda g, p: _projected((p["x"] + p["m"]) - p["x"] * 0.5, proj[(3, 8, 8)]),
         {"x": x, "m": rng.normal(size=(3, 1, 1))}),
        ("channel_linear", lambda g, p: _projected(ad.channel_linear(p["w"], p["x"]), proj[(2, 8, 8)]),
         {"x": x, "w": rng.normal(size=(2, 3))}),
        ("concat", lambda g, p: _projected(ad.concat([p["x"], p["y"]]), proj[(5, 8, 8)]),
         {"x": x, "y": rng.normal(size=(2, 8, 8))}),
        ("channel_slice", lambda g, p: _projected(ad.channel_slice(p["x"], 1, 3), proj[(2, 8, 8)]), {"x": x}),
        ("mean_sum", lambda g, p: ad.mean(p["x"] * p["x"]) + ad.total(p["x"]), {"x": x}),
    ]
    return cases


def cbam_case(size=8, channels=4, reduction=2, rng=0):
    rng = make_rng(rng)
    cp = cbam.ChannelAttentionParams.init(channels, reduction, rng)
    sp = cbam.SpatialAttentionParams.init(rng)
    feature = rng.normal(size=(channels, size, size))
    proj = rng.normal(size=(channels, size, size))

    def build(g, p):
        out = cbam.cbam_apply(p["F"], cbam.ChannelAttentionParams(p["cbam.w0"], p["cbam.w1"], reduction),
                              cbam.SpatialAttentionParams(p["cbam.spatial.kernel"], p["cbam.spatial.bias"]))
        return _projected(out, proj)

    return build, {"F": feature, **cbam.cbam_tensors(cp, sp)}


def decom_case(size=8, rng=0):
    rng = make_rng(rng)
    params = retinex.DecomNetParams.init(rng)
    normal = rng.uniform(0.2, 0.9, size=(3, size, size))
    low = np.clip(0.5 * normal ** 2.5 + rng.normal(0, 0.02, size=normal.shape), 0, 1)
    coeffs = retinex.LossCoefficients()

    def build(g, p):
        r_low, i_low = retinex.decom_forward(g.lift(low), params, p)
        r_normal, i_normal = retinex.decom_forward(g.lift(normal), params, p)
        return retinex.decom_loss_terms(r_low, i_low, r_normal, i_normal, g.lift(low), g.lift(normal), coeffs)

    return build, params.tensors


def enhance_case(size=8, rng=0):
    rng = make_rng(rng)
    params = retinex.EnhanceNetParams.init(rng)
    r_low = rng.uniform(0.05, 0.95, size=(3, size, size))
    i_low = rng.uniform(0.05, 0.5, size=(1, size, size))
    normal = rng.uniform(0.2, 0.9, size=(3, size, size))
    coeffs = retinex.LossCoefficients()

    def build(g, p):
        r = g.lift(r_low)
        i_hat = retinex.enhance_forward(r, g.lift(i_low), params, p)
        return retinex.enhance_total_loss(r, i_hat, g.lift(normal), coeffs)

    return build, params.tensors


def _timed(name, build, params, epsilon, max_coords=None):
    t = time.perf_counter()
    errs = gradient_errors(build, params, epsilon, max_coords)
    worst = max(errs, key=errs.get)
    return CheckResult(name, errs[worst], time.perf_counter() - t, worst)


def run_suite(target="all", epsilon=1e-5, net_coords=None, seed=2):
    """Run the gradient checks for ``cbam``, ``retinex`` or ``all``.

    ``net_coords`` limits the probed coordinates per network tensor (None: all).
    """
    if target not in ("cbam", "retinex", "all"):
        raise ValueError(f"unknown gradcheck target {target!r}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    results = []
    if target == "all":
        for name, build, params in primitive_cases(seed):
            results.append(_timed(name, build, params, epsilon))
    if target in ("cbam", "all"):
        results.append(_timed("cbam", *cbam_case(rng=seed), epsilon))
    if target in ("retinex", "all"):
        results.append(_timed("decom_net+loss", *decom_case(rng=seed), epsilon, net_coords))
        results.append(_timed("enhance_net+loss", *enhance_case(rng=seed), epsilon, net_coords))
    return results


def format_results(results):
    lines = [f"{'check':<20} {'max rel err':>12} {'worst':<24} {'sec':>6}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.max_error:12.3e} {r.worst_param:<24} {r.seconds:6.2f}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
