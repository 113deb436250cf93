"""Finite-difference gradient suite over every differentiable building block.

Each check draws a small seeded instance, reduces the output to a scalar with
a fixed random projection and compares autodiff with central differences in
float64. The CLI's ``gradcheck`` command and the test-suite share this list.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .config import preset
from .encoder import JCATBlock
from .gradcheck import GradCheckReport, grad_check
from .metrics import loss_l1_l2
from .nn import CBAM, FFN, BasicBlock, SRAttention, channel_attention, spatial_attention
from .spn import SpnConfig, init_state, propagate_step, refine
from .tensor import Tensor

TOL = 1e-4
# gradients below 1e-5 are judged on absolute error (< 1e-9): for those the
# central difference is limited by round-off, not by the autodiff
STENCIL = dict(order=2, eps=1e-5, abs_floor=1e-5)


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _proj(rng, out: Tensor) -> Tensor:
    return Tensor(rng.normal(size=out.shape))


def _scalar(fn, rng):
    """Wrap ``fn`` so its output is contracted with one fixed random tensor."""
    cache = {}

    def f(*args):
        out = fn(*args)
        if "r" not in cache:
            cache["r"] = _proj(rng, out)
        return (out * cache["r"]).sum()
    return f


def check_conv2d(seed=0, max_entries=40) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    f1 = _scalar(lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1), rng)
    f2 = _scalar(lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=(1, 0)), rng)
    r1 = grad_check(f1, [x, w, b], max_entries=max_entries, tol=TOL, **STENCIL)
    r2 = grad_check(f2, [x, w, b], max_entries=max_entries, tol=TOL, **STENCIL)
    return _merge(r1, r2)


def check_conv_transpose2d(seed=0, max_entries=40) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 2, 3, 4, 4), _t(rng, 3, 2, 3, 3), _t(rng, 2)
    f = _scalar(lambda x, w, b: T.conv_transpose2d(x, w, b), rng)
    return grad_check(f, [x, w, b], max_entries=max_entries, tol=TOL, **STENCIL)


def check_layer_norm(seed=0, max_entries=None) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x, g, b = _t(rng, 3, 5, 6), _t(rng, 6), _t(rng, 6)
    return grad_check(_scalar(lambda x, g, b: T.layer_norm(x, g, b), rng), [x, g, b],
                      max_entries=max_entries, tol=TOL, **STENCIL)


def check_softmax(seed=0, max_entries=None) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 4, 5)
    return grad_check(_scalar(lambda x: T.softmax(x, axis=-1), rng), [x], tol=TOL, **STENCIL)


def check_attention(seed=0, max_entries=30) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    attn = SRAttention(4, 2, 2, rng)
    x = _t(rng, 2, 16, 4)
    params = [x] + attn.parameters()
    f = _scalar(lambda x, *_: attn(x, 4, 4), rng)
    return grad_check(f, params, max_entries=max_entries, tol=TOL, **STENCIL)


def check_ffn(seed=0, max_entries=30) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    mod = FFN(4, 2, rng)
    x = _t(rng, 2, 5, 4)
    f = _scalar(lambda x, *_: mod(x), rng)
    return grad_check(f, [x] + mod.parameters(), max_entries=max_entries, tol=TOL, **STENCIL)


def check_cbam(seed=0, max_entries=30) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    mod = CBAM(8, rng)
    x = _t(rng, 2, 8, 5, 5)
    p = mod.parameters()
    fc = _scalar(lambda x, w1, b1, w2, b2: channel_attention(x, w1, b1, w2, b2), rng)
    fs = _scalar(lambda x, w: spatial_attention(x, w), rng)
    ff = _scalar(lambda x, *_: mod(x), rng)
    return _merge(grad_check(fc, [x] + p[:4], max_entries=max_entries, tol=TOL, **STENCIL),
                  grad_check(fs, [x, p[4]], max_entries=max_entries, tol=TOL, **STENCIL),
                  grad_check(ff, [x] + p, max_entries=max_entries, tol=TOL, **STENCIL))


def check_basic_block(seed=0, max_entries=30) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    reps = []
    for stride, cin in ((1, 4), (2, 3)):
        blk = BasicBlock(cin, 4, rng, stride=stride)
        x = _t(rng, 2, cin, 6, 6)
        f = _scalar(lambda x, *_: blk(x), rng)
        reps.append(grad_check(f, [x] + blk.parameters(), max_entries=max_entries, tol=TOL, **STENCIL))
    return _merge(*reps)


def _check_jcat(variant: str, seed: int, max_entries: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    cfg = preset("micro").replace(cbam_kernel=3)
    blk = JCATBlock(4, 2, 2, cfg, rng, variant=variant)
    x = _t(rng, 2, 4, 4, 4)
    f = _scalar(lambda x, *_: blk(x), rng)
    return grad_check(f, [x] + blk.parameters(), max_entries=max_entries, tol=TOL, **STENCIL)


def check_jcat_parallel(seed=0, max_entries=12) -> GradCheckReport:
    return _check_jcat("parallel", seed, max_entries)


def check_jcat_cascaded(seed=0, max_entries=12) -> GradCheckReport:
    return _check_jcat("cascaded", seed, max_entries)


def _spn_inputs(rng, B=1, J=8, H=5, W=6):
    d = Tensor(rng.uniform(1.0, 5.0, size=(B, 1, H, W)), requires_grad=True)
    raw = _t(rng, B, J, H, W)
    conf = Tensor(rng.uniform(0.1, 0.9, size=(B, 1, H, W)), requires_grad=True)
    off = Tensor(rng.uniform(-0.45, 0.45, size=(B, 2 * J, H, W)), requires_grad=True)
    return d, off, raw, conf


def check_propagate_step(seed=0, max_entries=40) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    d, off, raw, conf = _spn_inputs(rng)

    def step(d, off, raw, conf):
        return propagate_step(init_state(d, off, raw, conf, "nonlocal")).depth

    def step_local(d, raw, conf):
        return propagate_step(init_state(d, None, raw, conf, "fixed_local")).depth

    return _merge(grad_check(_scalar(step, rng), [d, off, raw, conf], max_entries=max_entries, tol=TOL, **STENCIL),
                  grad_check(_scalar(step_local, rng), [d, raw, conf], max_entries=max_entries, tol=TOL, **STENCIL))


def check_refine(seed=0, max_entries=40) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    d, off, raw, conf = _spn_inputs(rng)
    cfg = SpnConfig(iterations=2)
    f = _scalar(lambda d, off, raw, conf: refine(d, off, raw, conf, cfg), rng)
    return grad_check(f, [d, off, raw, conf], max_entries=max_entries, tol=TOL, **STENCIL)


def check_loss(seed=0, max_entries=None) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1.0, 5.0, size=(2, 1, 4, 4))
    gt[rng.uniform(size=gt.shape) < 0.3] = 0.0
    # residuals bounded away from zero, where |r| has its kink
    pred = Tensor(gt + rng.choice([-1.0, 1.0], size=gt.shape) * rng.uniform(0.1, 1.0, size=gt.shape),
                  requires_grad=True)
    return grad_check(lambda p: loss_l1_l2(p, gt), [pred], tol=TOL, **STENCIL)


def check_bilinear(seed=0, max_entries=None) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    field = _t(rng, 2, 2, 4, 5)
    coords = Tensor(rng.uniform(-0.8, 4.8, size=(2, 7, 2)) + 0.013, requires_grad=True)
    f = _scalar(lambda fld, c: T.bilinear_sample(fld, c), rng)
    return grad_check(f, [field, coords], tol=TOL, **STENCIL)


def _merge(*reports: GradCheckReport) -> GradCheckReport:
    return GradCheckReport(max(r.max_rel_err for r in reports), max(r.max_abs_err for r in reports),
                           sum(r.n_checked for r in reports), all(r.passed for r in reports))


SUITE: dict[str, Callable[..., GradCheckReport]] = {
    "conv2d": check_conv2d,
    "conv_transpose2d": check_conv_transpose2d,
    "layer_norm": check_layer_norm,
    "softmax": check_softmax,
    "attention": check_attention,
    "ffn": check_ffn,
    "cbam": check_cbam,
    "basic_block": check_basic_block,
    "jcat_parallel": check_jcat_parallel,
    "jcat_cascaded": check_jcat_cascaded,
    "bilinear_sample": check_bilinear,
    "propagate_step": check_propagate_step,
    "refine": check_refine,
    "loss": check_loss,
}


def run_suite(names=None, seed: int = 0) -> dict[str, GradCheckReport]:
    names = list(SUITE) if names is None else list(names)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradcheck module {unknown[0]!r}; choose from {sorted(SUITE)}")
    with T.default_dtype(np.float64):
        return {n: SUITE[n](seed=seed) for n in names}
