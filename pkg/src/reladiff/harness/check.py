"""Self-verification suite behind the ``check`` command.

Every check returns a record ``{"name", "passed", "detail"}``; nothing
raises. Primitive ops are looked up on :mod:`reladiff.tensor` at call time, so
a patched op is exercised exactly as the rest of the library would see it.
"""

from __future__ import annotations

import io
import math
import time
import traceback
from functools import partial

import numpy as np

from .. import diffusion as D
from .. import losses as L
from .. import nn
from .. import tensor as T
from ..oracle import GaussianTarget, finite_diff_check, oracle_sample
from ..volume import Volume, decode_volume, encode_volume

PRIMITIVE_RTOL = 1e-3
MODEL_RTOL = 1e-2


def _op(name):
    return getattr(T, name)


def _weighted(y, seed=99):
    """sum(y * R) with a fixed random R, so every output element matters."""
    r = np.random.default_rng(seed).standard_normal(y.shape)
    return T.sum(y * T.Tensor(r))


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


# name -> (inputs builder, loss(p) using _op lookups)
def _primitive_cases():
    c = {}
    rng = np.random.default_rng(7)
    ab = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((1, 4))}
    pos = {"a": rng.uniform(0.5, 2.0, (3, 4))}
    gen = {"a": rng.standard_normal((3, 4))}
    kink = {"a": _away_from_zero(rng, (3, 4))}
    c["add"] = (ab, lambda p: _weighted(_op("add")(p["a"], p["b"])))
    c["sub"] = (ab, lambda p: _weighted(_op("sub")(p["a"], p["b"])))
    c["mul"] = (ab, lambda p: _weighted(_op("mul")(p["a"], p["b"])))
    c["div"] = ({"a": ab["a"], "b": rng.uniform(0.5, 2.0, (1, 4))},
                lambda p: _weighted(_op("div")(p["a"], p["b"])))
    c["neg"] = (gen, lambda p: _weighted(_op("neg")(p["a"])))
    c["power"] = (pos, lambda p: _weighted(_op("power")(p["a"], 2.5)))
    c["square"] = (gen, lambda p: _weighted(_op("square")(p["a"])))
    c["sqrt"] = (pos, lambda p: _weighted(_op("sqrt")(p["a"])))
    c["exp"] = (gen, lambda p: _weighted(_op("exp")(p["a"])))
    c["log"] = (pos, lambda p: _weighted(_op("log")(p["a"])))
    c["absolute"] = (kink, lambda p: _weighted(_op("absolute")(p["a"])))
    c["sigmoid"] = (gen, lambda p: _weighted(_op("sigmoid")(p["a"])))
    c["softplus"] = (gen, lambda p: _weighted(_op("softplus")(p["a"])))
    c["tanh"] = (gen, lambda p: _weighted(_op("tanh")(p["a"])))
    c["leaky_relu"] = (kink, lambda p: _weighted(_op("leaky_relu")(p["a"], 0.2)))
    c["silu"] = (gen, lambda p: _weighted(_op("silu")(p["a"])))
    c["sum"] = (gen, lambda p: _weighted(_op("sum")(p["a"], axis=0)))
    c["mean"] = (gen, lambda p: _weighted(_op("mean")(p["a"], axis=1, keepdims=True)))
    c["broadcast_to"] = ({"a": rng.standard_normal((1, 4))},
                         lambda p: _weighted(_op("broadcast_to")(p["a"], (3, 4))))
    c["reshape"] = (gen, lambda p: _weighted(_op("reshape")(p["a"], (2, 6))))
    c["permute"] = ({"a": rng.standard_normal((2, 3, 4))},
                    lambda p: _weighted(_op("permute")(p["a"], (2, 0, 1))))
    c["getitem"] = (gen, lambda p: _weighted(_op("getitem")(p["a"], (slice(1, 3), [0, 2, 2]))))
    c["scatter"] = ({"a": rng.standard_normal((2, 2))},
                    lambda p: _weighted(_op("scatter")(p["a"], (slice(1, 3), slice(0, 2)), (3, 4))))
    c["concat"] = (ab, lambda p: _weighted(_op("concat")([p["a"], p["b"]], axis=0)))
    c["matmul"] = ({"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((4, 5))},
                   lambda p: _weighted(_op("matmul")(p["a"], p["b"])))
    c["softmax"] = (gen, lambda p: _weighted(_op("softmax")(p["a"], axis=-1)))
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5
    c["conv"] = ({"x": x, "w": w}, lambda p: _weighted(_op("conv")(p["x"], p["w"], 2, 1)))
    g = rng.standard_normal((2, 3, 3, 3))
    c["conv_input_grad"] = ({"g": g, "w": w},
                            lambda p: _weighted(_op("conv_input_grad")(p["g"], p["w"], x.shape, 2, 1)))
    c["conv_weight_grad"] = ({"x": x, "g": g},
                             lambda p: _weighted(_op("conv_weight_grad")(p["x"], p["g"], w.shape, 2, 1)))
    c["conv3d"] = ({"x": rng.standard_normal((1, 2, 4, 4, 4)), "w": rng.standard_normal((2, 2, 3, 3, 3)) * 0.5},
                   lambda p: _weighted(_op("conv")(p["x"], p["w"], 1, 1)))
    c["upsample"] = ({"a": rng.standard_normal((1, 2, 3, 3))},
                     lambda p: _weighted(_op("upsample")(p["a"], 2)))
    c["sum_pool"] = ({"a": rng.standard_normal((1, 2, 4, 4))},
                     lambda p: _weighted(_op("sum_pool")(p["a"], 2)))
    gn_in = {"x": rng.standard_normal((2, 4, 3, 3)), "g": rng.uniform(0.5, 1.5, 4), "b": rng.standard_normal(4)}
    c["group_norm"] = (gn_in, lambda p: _weighted(nn.group_norm(p["x"], 2, p["g"], p["b"])))
    c["batch_norm"] = (gn_in, lambda p: _weighted(nn.batch_norm(p["x"], p["g"], p["b"])))
    c["conv_norm_act_chain"] = (
        {"x": x, "w": w, "g": rng.uniform(0.5, 1.5, 3), "b": rng.standard_normal(3)},
        lambda p: T.sum(T.silu(nn.group_norm(_op("conv")(p["x"], p["w"], 1, 1), 3, p["g"], p["b"]))),
    )
    return c


PRIMITIVES = tuple(_primitive_cases())


def check_primitive(name: str, rtol: float = PRIMITIVE_RTOL) -> dict:
    params, loss = _primitive_cases()[name]
    rep = finite_diff_check(loss, params, step=1e-3, rtol=rtol, atol=1e-5)
    return {"passed": rep.passed, "detail": {"max_rel_err": rep.max_rel_err, "worst": list(rep.worst),
                                             "n_checked": rep.n_checked, "rtol": rtol}}


# ---------------------------------------------------------------------------
# model-level gradients


def generator_loss_problem(size: int = 16, seed: int = 0):
    """A full generator objective (noise + image + adversarial) at ``size`` x ``size``.

    Returns (loss_fn over generator params, initial param arrays).
    """
    rng = np.random.default_rng(seed)
    gcfg = nn.GeneratorConfig(base_width=8, depth=2, embed_dim=8)
    dcfg = nn.DiscriminatorConfig(widths=(4, 8, 1))
    gen = nn.build_generator(gcfg, seed, zero_final=False)
    disc = nn.build_discriminator(dcfg, seed + 1)
    sched = D.make_schedule(50)
    n = 2
    x0 = rng.uniform(-1, 1, (n, 1, size, size))
    cond = rng.uniform(-1, 1, (n, 2, size, size))
    eps = rng.standard_normal((n, 1, size, size))
    t = np.array([5, 40])
    c = np.array([0, 2])
    disc_arrays = {k: v.data for k, v in disc.items()}
    weights = L.LossWeights()

    def loss(p):
        d = {k: T.Tensor(v) for k, v in disc_arrays.items()}
        x0_t, eps_t = T.Tensor(x0), T.Tensor(eps)
        x_t = D.q_sample(x0_t, t, eps_t, sched)
        eps_hat = nn.generator_forward(p, x_t, T.Tensor(cond), nn.ConditionInfo(t, c), gcfg)
        x0_hat = D.estimate_x0(x_t, eps_hat, t, sched)
        dfwd = partial(nn.discriminator_forward, cfg=dcfg)
        l_g, _ = L.adversarial_losses(dfwd(d, x0_t), dfwd(d, x0_hat), weights)
        return L.noise_loss(eps_t, eps_hat) + L.image_loss(x0_t, x0_hat) + weights.lambda_adv * l_g

    return loss, {k: v.data for k, v in gen.items()}


def two_layer_disc_forward(p, x):
    h = T.leaky_relu(T.conv(x, p["w1"], 2, 1) + T.reshape(p["b1"], (1, -1, 1, 1)), 0.2)
    h = T.conv(h, p["w2"], 2, 1) + T.reshape(p["b2"], (1, -1, 1, 1))
    return T.mean(h, axis=(1, 2, 3))


def gp_problem(seed: int = 0):
    """Gradient penalty of a 2-layer conv discriminator, as a function of its weights."""
    rng = np.random.default_rng(seed)
    params = {"w1": rng.standard_normal((4, 1, 4, 4)) * 0.4, "b1": rng.standard_normal(4) * 0.1,
              "w2": rng.standard_normal((1, 4, 4, 4)) * 0.4, "b2": np.zeros(1)}
    real = rng.uniform(-1, 1, (3, 1, 8, 8))
    fake = rng.uniform(-1, 1, (3, 1, 8, 8))

    def loss(p):
        return L.gradient_penalty(p, real, fake, two_layer_disc_forward)

    return loss, params


def check_generator_loss(max_coords: int = 150) -> dict:
    loss, params = generator_loss_problem()
    rep = finite_diff_check(loss, params, step=1e-3, rtol=MODEL_RTOL, atol=1e-4, max_coords=max_coords)
    return {"passed": rep.passed, "detail": {"max_rel_err": rep.max_rel_err, "worst": list(rep.worst),
                                             "n_checked": rep.n_checked, "rtol": MODEL_RTOL}}


def check_gradient_penalty() -> dict:
    loss, params = gp_problem()
    rep = finite_diff_check(loss, params, step=1e-3, rtol=MODEL_RTOL, atol=1e-4)
    return {"passed": rep.passed, "detail": {"max_rel_err": rep.max_rel_err, "worst": list(rep.worst),
                                             "n_checked": rep.n_checked, "rtol": MODEL_RTOL}}


# ---------------------------------------------------------------------------
# oracle sampler and round trips


def oracle_sampler_schedule(T_steps: int = 50):
    return D.scaled_schedule(T_steps)


def check_oracle_sampler(n_chains: int = 2000, mu: float = 1.0, sigma2: float = 0.5, seed: int = 0) -> dict:
    target = GaussianTarget(mu, sigma2)
    x = oracle_sample(target, oracle_sampler_schedule(50), n_chains, seed=seed)
    m, v = float(x.mean()), float(x.var())
    rel_m, rel_v = abs(m - mu) / abs(mu), abs(v - sigma2) / sigma2
    return {"passed": rel_m <= 0.05 and rel_v <= 0.05,
            "detail": {"mean": m, "var": v, "rel_err_mean": rel_m, "rel_err_var": rel_v, "chains": n_chains}}


def check_x0_roundtrip() -> dict:
    rng = np.random.default_rng(3)
    worst = 0.0
    with T.precision(np.float64):
        for steps in (2, 50, 1000):
            sched = D.make_schedule(steps)
            for t in sorted({1, max(1, steps // 4), max(1, steps // 2), steps}):
                x0 = rng.uniform(-1, 1, (2, 1, 8, 8))
                eps = rng.standard_normal(x0.shape)
                xt = D.q_sample(x0, t, eps, sched)
                back = D.estimate_x0(xt, eps, t, sched).data
                worst = max(worst, float(np.abs(back - x0).max()))
    return {"passed": worst <= 1e-5, "detail": {"max_abs_err": worst}}


def check_rdvf_roundtrip() -> dict:
    rng = np.random.default_rng(4)
    v = Volume(rng.random((1, 5, 6, 7)).astype(np.float32), {"k": "v"})
    back = decode_volume(encode_volume(v))
    ok = back.data.tobytes() == v.data.tobytes() and back.meta == v.meta
    return {"passed": ok, "detail": {"bytes": len(encode_volume(v))}}


def check_rdck_roundtrip() -> dict:
    params = nn.build_generator(nn.GeneratorConfig(base_width=4, depth=1, embed_dim=4), 0)
    blob = nn.encode_tables(params, {"m": 1})
    arrays, meta = nn.decode_tables(blob)
    ok = meta == {"m": 1} and list(arrays) == list(params) and all(
        arrays[k].tobytes() == params[k].data.tobytes() for k in params)
    return {"passed": ok, "detail": {"tables": len(arrays)}}


# ---------------------------------------------------------------------------


def registry(quick: bool = False) -> dict:
    checks = {f"fd:{name}": partial(check_primitive, name) for name in PRIMITIVES}
    checks["fd:generator_loss"] = partial(check_generator_loss, 40 if quick else 150)
    checks["fd:gradient_penalty"] = check_gradient_penalty
    checks["oracle:sampler"] = check_oracle_sampler
    checks["roundtrip:estimate_x0"] = check_x0_roundtrip
    checks["roundtrip:rdvf"] = check_rdvf_roundtrip
    checks["roundtrip:rdck"] = check_rdck_roundtrip
    return checks


def run_checks(only=None, quick: bool = False) -> dict:
    """Run the suite (optionally a subset by name prefix) and collect results."""
    results = []
    for name, fn in registry(quick).items():
        if only and not any(name.startswith(p) for p in only):
            continue
        t0 = time.perf_counter()
        try:
            rec = fn()
        except Exception as exc:  # a crashing check is a failing check
            buf = io.StringIO()
            traceback.print_exc(file=buf)
            rec = {"passed": False, "detail": {"error": f"{type(exc).__name__}: {exc}",
                                               "traceback": buf.getvalue()}}
        rec = {"name": name, "passed": bool(rec["passed"]), "seconds": round(time.perf_counter() - t0, 3),
               "detail": _jsonable(rec["detail"])}
        results.append(rec)
    return {"passed": all(r["passed"] for r in results), "failed": [r["name"] for r in results if not r["passed"]],
            "checks": results}


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    if isinstance(d, (np.floating, float)):
        return float(d) if math.isfinite(d) else str(float(d))
    if isinstance(d, np.integer):
        return int(d)
    return d
