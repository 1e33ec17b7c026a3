"""Finite-difference gradient suite over every differentiable op.

Each check draws double-precision inputs in [-1, 1] for several seeds,
contracts the op output with a fixed random tensor to get a scalar, and
compares the reverse-mode gradient of every input against central
differences. Large inputs are spot-checked on a random subset of
components.

Piecewise ops (relu, bilinear floor, max) are not differentiable at their
kinks. Every forward pass of a check records which piece each op landed on;
if any perturbed pass lands on a different piece than the base point, the
difference quotient straddles a kink and the whole draw is redrawn from the
next generator state. A draw is also redrawn when halving the step moves the
difference quotient by more than the tolerance under test, since the
reference value itself is then no better than the tolerance. The number of
redraws is reported.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, add, analytic_gradient, central_differences, kink_log, mul, relative_error, sum_all
from .kernels import (
    AttentionParams,
    ConvParams,
    attention_apply,
    bilinear_sample,
    conv2d,
    deformable_conv2d,
    pixel_shuffle,
    resblock,
)
from .metrics import charbonnier_loss
from .model import (
    CellParams,
    ModelConfig,
    convlstm_cell,
    flti_interpolate,
    girnet_forward,
    gstir_refine,
    tfe_enhance,
    weight_shapes,
)

H = 1e-5
TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
MAX_REDRAWS = 50


class NearKink(Exception):
    """A finite-difference stencil crossed a non-differentiable point."""


def smooth_diff_check(
    f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = H, indices=None, tol: float = TOLERANCE
) -> float:
    """Max relative error of the analytic gradient against central differences with step ``h``.

    Raises ``NearKink`` when the estimate cannot be trusted at this point:
    a perturbed pass left the base piece, or the estimates at ``h`` and
    ``h / 2`` disagree by more than ``tol`` (curvature or roundoff dominates).
    """
    seen: list[bytes] = []

    def tracked(t):
        with kink_log() as log:
            out = f(t)
        seen.append(log.pieces)
        return out

    analytic = analytic_gradient(tracked, x)
    idx = np.arange(analytic.size) if indices is None else np.asarray(indices, dtype=np.int64)
    coarse = central_differences(tracked, x, h, idx)
    fine = central_differences(tracked, x, h / 2, idx)
    crossed = sum(p != seen[0] for p in seen[1:])
    if crossed:
        raise NearKink(f"{crossed} perturbed passes changed piece")
    unstable = relative_error(coarse, fine).max(initial=0.0)
    if unstable > tol:
        raise NearKink(f"step-halving moved the estimate by {unstable:.2e}")
    return float(relative_error(analytic[idx], coarse).max(initial=0.0))


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    tolerance: float
    seeds: int
    redraws: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _contract(out, probe: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(probe)))


def check_inputs(
    build: Callable[[list[Tensor]], Tensor],
    inputs: list[np.ndarray],
    rng: np.random.Generator,
    max_components: int | None = 40,
    h: float = H,
) -> float:
    """Max relative error over all inputs of ``build`` (which returns a scalar)."""
    worst = 0.0
    for k, x in enumerate(inputs):

        def f(t, k=k):
            args = [Tensor(a) for a in inputs]
            args[k] = t
            return build(args)

        idx = None
        if max_components is not None and x.size > max_components:
            idx = rng.choice(x.size, size=max_components, replace=False)
        worst = max(worst, smooth_diff_check(f, x, h, idx))
    return worst


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _conv(args, i, stride=1, padding=None):
    return ConvParams(args[i], args[i + 1], stride, padding)


def _check_conv2d(rng):
    n, c, o = 2, 3, 4
    x = _u(rng, n, c, 6, 5)
    probe = rng.normal(size=(n, o, 6, 5))
    err = check_inputs(lambda a: _contract(conv2d(a[0], _conv(a, 1)), probe), [x, _u(rng, o, c, 3, 3), _u(rng, o)], rng)
    probe2 = rng.normal(size=(n, o, 3, 3))
    x2 = _u(rng, n, c, 5, 5)
    err2 = check_inputs(
        lambda a: _contract(conv2d(a[0], _conv(a, 1, stride=2, padding=1)), probe2),
        [x2, _u(rng, o, c, 3, 3), _u(rng, o)],
        rng,
    )
    probe3 = rng.normal(size=(n, o, 6, 5))
    err3 = check_inputs(lambda a: _contract(conv2d(a[0], _conv(a, 1)), probe3), [x, _u(rng, o, c, 1, 1), _u(rng, o)], rng)
    return max(err, err2, err3)


def _offgrid(rng, shape, lo, hi):
    """Reals in [lo, hi) whose fractional part stays in [0.2, 0.8] (away from bilinear kinks)."""
    base = rng.integers(lo, hi, size=shape)
    return base + rng.uniform(0.2, 0.8, size=shape)


def _check_bilinear(rng):
    x = _u(rng, 2, 3, 5, 6)
    coords = np.stack([_offgrid(rng, (2, 7), -2, 6), _offgrid(rng, (2, 7), -2, 7)], axis=1)
    probe = rng.normal(size=(2, 3, 7))
    return check_inputs(lambda a: _contract(bilinear_sample(a[0], a[1]), probe), [x, coords], rng)


def _check_deformable(rng):
    n, c, o, h, w = 2, 3, 4, 5, 5
    x = _u(rng, n, c, h, w)
    # offsets sum with integer grid positions, so off-grid offsets keep samples off kinks
    offsets = _offgrid(rng, (n, 18, h, w), -2, 2)
    probe = rng.normal(size=(n, o, h, w))
    return check_inputs(
        lambda a: _contract(deformable_conv2d(a[0], a[1], _conv(a, 2)), probe),
        [x, offsets, _u(rng, o, c, 3, 3), _u(rng, o)],
        rng,
    )


def _check_pixel_shuffle(rng):
    x = _u(rng, 2, 8, 3, 2)
    probe = rng.normal(size=(2, 2, 6, 4))
    return check_inputs(lambda a: _contract(pixel_shuffle(a[0], 2), probe), [x], rng, max_components=None)


def _attention_inputs(rng, kind, c=4, hidden=2):
    params = [_u(rng, hidden, c, 1, 1), _u(rng, hidden), _u(rng, c, hidden, 1, 1), _u(rng, c)]
    if kind == "attention-1":
        params += [_u(rng, 1, 2, 7, 7), _u(rng, 1)]
    return params


def _attention_from(args, i, kind):
    spatial = _conv(args, i + 4) if kind == "attention-1" else None
    return AttentionParams(kind, _conv(args, i), _conv(args, i + 2), spatial)


def _check_attention(rng):
    worst = 0.0
    for kind in ("attention-1", "attention-2"):
        x = _u(rng, 2, 4, 9, 10)
        probe = rng.normal(size=x.shape)
        worst = max(
            worst,
            check_inputs(
                lambda a, kind=kind: _contract(attention_apply(a[0], _attention_from(a, 1, kind)), probe),
                [x] + _attention_inputs(rng, kind),
                rng,
            ),
        )
    return worst


def _check_resblock(rng):
    c = 4
    x = _u(rng, 2, c, 6, 6)
    probe = rng.normal(size=x.shape)
    convs = [_u(rng, c, c, 3, 3), _u(rng, c), _u(rng, c, c, 3, 3), _u(rng, c)]
    return check_inputs(
        lambda a: _contract(resblock(a[0], _conv(a, 1), _conv(a, 3), _attention_from(a, 5, "attention-2")), probe),
        [x] + convs + _attention_inputs(rng, "attention-2"),
        rng,
    )


def _check_convlstm(rng):
    n, ci, ch = 2, 3, 2
    inputs = [_u(rng, n, ci, 5, 5), _u(rng, n, ch, 5, 5), _u(rng, n, ch, 5, 5),
              _u(rng, 4 * ch, ci, 3, 3), _u(rng, 4 * ch), _u(rng, 4 * ch, ch, 3, 3)]
    ph = rng.normal(size=(n, ch, 5, 5))
    pc = rng.normal(size=(n, ch, 5, 5))

    def build(a):
        cell = CellParams(_conv(a, 3), ConvParams(a[5]))
        h, c = convlstm_cell(a[0], a[1], a[2], cell)
        return add(_contract(h, ph), _contract(c, pc))

    return check_inputs(build, inputs, rng)


def _named(cfg: ModelConfig, prefixes: tuple[str, ...], rng) -> dict[str, np.ndarray]:
    return {k: 0.5 * _u(rng, *s) for k, s in weight_shapes(cfg).items() if k.startswith(prefixes)}


def _stage_check(rng, cfg, prefixes, run, n_feat, c, size=5):
    named = _named(cfg, prefixes, rng)
    keys = list(named)
    feats = [_u(rng, 1, c, size, size) for _ in range(n_feat)]

    def build(a):
        w = dict(zip(keys, a[n_feat:]))
        return run(a[:n_feat], w)

    return check_inputs(build, feats + [named[k] for k in keys], rng, max_components=20)


def _check_flti(rng):
    c = 3
    cfg = ModelConfig(channels=c, n_res_extract=1, n_res_recon=1, attention_kind="none", scale=2)
    probe = rng.normal(size=(1, c, 5, 5))
    # random offset weights keep sampling positions generic
    return _stage_check(
        rng, cfg, ("flti.",), lambda f, w: _contract(flti_interpolate(f[0], f[1], w, cfg), probe), 2, c
    )


def _check_tfe(rng):
    c = 3
    cfg = ModelConfig(channels=c, n_res_extract=1, n_res_recon=1, attention_kind="none", scale=2)
    probe = rng.normal(size=(1, c, 5, 5))
    return _stage_check(rng, cfg, ("tfe.",), lambda f, w: _contract(tfe_enhance(f[0], f[1], f[2], w), probe), 3, c)


def _check_gstir_refine(rng):
    c = 3
    cfg = ModelConfig(channels=c, n_res_extract=1, n_res_recon=1, attention_kind="none", scale=2)
    probes = [rng.normal(size=(1, c, 5, 5)) for _ in range(3)]

    def run(f, w):
        outs = gstir_refine(f[:3], f[3], w, cfg)
        total = _contract(outs[0], probes[0])
        for o, p in zip(outs[1:], probes[1:]):
            total = add(total, _contract(o, p))
        return total

    return _stage_check(rng, cfg, ("gstir.local.", "gstir.conv_"), run, 4, c)


def _check_charbonnier(rng):
    pred = [_u(rng, 1, 3, 4, 4) for _ in range(3)]
    target = [_u(rng, 1, 3, 4, 4) for _ in range(3)]
    return check_inputs(lambda a: charbonnier_loss(a, target), pred, rng, max_components=None)


def tiny_model_config(attention_kind: str = "attention-2") -> ModelConfig:
    return ModelConfig(channels=8, n_res_extract=1, n_res_recon=1, attention_kind=attention_kind, scale=2, reduction=4)


def _check_model(rng, components_per_tensor: int = 2):
    """Full Charbonnier loss of the tiny model against every parameter tensor."""
    cfg = tiny_model_config()
    shapes = weight_shapes(cfg)
    weights = {k: 0.5 * _u(rng, *s) for k, s in shapes.items()}
    clip = [rng.uniform(0, 1, size=(1, 3, 8, 8)) for _ in range(2)]
    target = [rng.uniform(0, 1, size=(1, 3, 16, 16)) for _ in range(3)]
    keys = list(weights)

    def loss_with(name, t):
        w = {k: Tensor(v) for k, v in weights.items()}
        w[name] = t
        return charbonnier_loss(girnet_forward([Tensor(f) for f in clip], w, cfg), target)

    worst = 0.0
    for name in keys:
        size = weights[name].size
        idx = rng.choice(size, size=min(components_per_tensor, size), replace=False)
        worst = max(worst, smooth_diff_check(lambda t, name=name: loss_with(name, t), weights[name], H, idx, MODEL_TOLERANCE))
    return worst


CHECKS: dict[str, tuple[Callable, float]] = {
    "conv2d": (_check_conv2d, TOLERANCE),
    "bilinear_sample": (_check_bilinear, TOLERANCE),
    "deformable_conv2d": (_check_deformable, TOLERANCE),
    "pixel_shuffle": (_check_pixel_shuffle, TOLERANCE),
    "attention_apply": (_check_attention, TOLERANCE),
    "resblock": (_check_resblock, TOLERANCE),
    "convlstm_cell": (_check_convlstm, TOLERANCE),
    "flti_interpolate": (_check_flti, TOLERANCE),
    "tfe_enhance": (_check_tfe, TOLERANCE),
    "gstir_refine": (_check_gstir_refine, TOLERANCE),
    "charbonnier_loss": (_check_charbonnier, TOLERANCE),
    "model": (_check_model, MODEL_TOLERANCE),
}


def run_check(op: str, seeds: int = 5) -> CheckResult:
    if op not in CHECKS:
        raise KeyError(f"unknown op {op!r}; choose from {sorted(CHECKS)}")
    fn, tol = CHECKS[op]
    worst, redraws = 0.0, 0
    for seed in range(seeds):
        for attempt in range(MAX_REDRAWS):
            rng = np.random.default_rng([seed, 7] if attempt == 0 else [seed, 7, attempt])
            try:
                worst = max(worst, fn(rng))
                break
            except NearKink:
                redraws += 1
        else:
            raise RuntimeError(f"{op}: every draw for seed {seed} landed near a kink")
    return CheckResult(op, worst, tol, seeds, redraws)


def run_suite(ops=None, seeds: int = 5) -> list[CheckResult]:
    return [run_check(op, seeds) for op in (ops or CHECKS)]
