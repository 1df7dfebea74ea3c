"""Central finite-difference verification of every backward rule.

All checks run at 64-bit with h = 1e-5. The per-op threshold is 1e-4; the
full-network check (K=2, both fusion variants) uses 1e-3.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import motion
from . import tensor as T
from .backbone import ArchConfig, build_model
from .tensor import Tensor

OP_THRESHOLD = 1e-4
GRAPH_THRESHOLD = 1e-3
STEP = 1e-5
# deep graphs pass through many relu/maxpool kinks; a smaller step keeps
# the probability of crossing one during perturbation negligible
GRAPH_STEP = 1e-6


def numerical_grad(loss_fn, tensor, h=STEP):
    """Central differences of a recomputed scalar loss w.r.t. one tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn().data.item()
        flat[i] = orig - h
        lo = loss_fn().data.item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    diff = float(np.abs(analytic - numeric).max(initial=0.0))
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if denom < 1e-6:
        # both gradients vanish; the quotient would just measure FD noise
        return diff
    return diff / denom


def check_gradients(loss_fn, tensors, h=STEP):
    """Worst relative error of analytic vs numeric gradients over `tensors`.

    `loss_fn` must recompute the full forward pass from current tensor data.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_grad(loss_fn, t, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _weighted_sum(out, w):
    """Scalar probe loss: sum(w * out) via the autodiff graph."""
    return T.mean_axis(T.reshape(T.mul_const(out, w), (1, out.data.size)), axis=1)


def _check_simple(rng, make_out, *tensors):
    out0 = make_out()
    w = rng.standard_normal(out0.data.shape)
    return check_gradients(lambda: _weighted_sum(make_out(), w), list(tensors))


def op_checks(seed=0):
    """Map op name -> worst relative error over a few randomized cases."""
    results = {}

    def run(name, fn, n_cases=3):
        worst = 0.0
        for case in range(n_cases):
            rng = np.random.default_rng([seed, zlib.crc32(name.encode()), case])
            worst = max(worst, fn(rng))
        results[name] = worst

    def conv_case(rng):
        x = _t(rng, 2, 3, 5, 4)
        w = _t(rng, 2, 3, 3, 3)
        b = _t(rng, 2)
        return _check_simple(rng, lambda: T.conv2d(x, w, b, stride=2, padding=1), x, w, b)

    def bn_case_train(rng):
        x = _t(rng, 2, 3, 3, 2)
        g = _t(rng, 3)
        b = _t(rng, 3)
        rm, rv = np.zeros(3), np.ones(3)
        return _check_simple(
            rng, lambda: T.batchnorm2d(x, g, b, rm, rv, training=True), x, g, b
        )

    def bn_case_eval(rng):
        x = _t(rng, 2, 3, 3, 2)
        g = _t(rng, 3)
        b = _t(rng, 3)
        rm = rng.standard_normal(3)
        rv = rng.random(3) + 0.5
        return _check_simple(
            rng, lambda: T.batchnorm2d(x, g, b, rm, rv, training=False), x, g, b
        )

    def relu_case(rng):
        x = Tensor(rng.standard_normal((3, 4)) + 0.05, requires_grad=True)
        return _check_simple(rng, lambda: T.relu(x), x)

    def pool_case(rng):
        x = _t(rng, 2, 2, 5, 5)
        return _check_simple(rng, lambda: T.maxpool2d(x, 3, 2, 1), x)

    def gap_case(rng):
        x = _t(rng, 2, 3, 4, 4)
        return _check_simple(rng, lambda: T.global_avg_pool(x), x)

    def linear_case(rng):
        x = _t(rng, 3, 5)
        w = _t(rng, 4, 5)
        b = _t(rng, 4)
        return _check_simple(rng, lambda: T.linear(x, w, b), x, w, b)

    def dropout_case(rng):
        x = _t(rng, 4, 6)
        mask_seed = int(rng.integers(2**31))
        return _check_simple(
            rng,
            lambda: T.dropout(x, 0.5, np.random.default_rng(mask_seed), training=True),
            x,
        )

    def concat_case(rng):
        a = _t(rng, 2, 2, 3, 3)
        b = _t(rng, 2, 4, 3, 3)
        return _check_simple(rng, lambda: T.concat_channels([a, b]), a, b)

    def add_case(rng):
        a = _t(rng, 3, 4)
        b = _t(rng, 3, 4)
        return _check_simple(rng, lambda: T.add(a, b), a, b)

    def sub_case(rng):
        a = _t(rng, 3, 4)
        b = _t(rng, 3, 4)
        return _check_simple(rng, lambda: T.sub(a, b), a, b)

    def mul_case(rng):
        a = _t(rng, 3, 4)
        b = _t(rng, 3, 4)
        return _check_simple(rng, lambda: T.mul(a, b), a, b)

    def scale_case(rng):
        x = _t(rng, 3, 4)
        return _check_simple(rng, lambda: T.scale(x, -1.7), x)

    def ce_case(rng):
        logits = _t(rng, 3, 5)
        labels = rng.integers(0, 5, size=3)
        return check_gradients(
            lambda: T.softmax_cross_entropy(logits, labels), [logits]
        )

    def shift_case(rng):
        x = _t(rng, 2, 2, 4, 4)
        worst = 0.0
        for d in motion.default_directions():
            worst = max(worst, _check_simple(rng, lambda: motion.shift(x, d), x))
        return worst

    def motion_filter_case(rng):
        a = _t(rng, 1, 2, 4, 4)
        b = _t(rng, 1, 2, 4, 4)
        dirs = motion.default_directions()
        return _check_simple(rng, lambda: motion.motion_filter(a, b, dirs), a, b)

    def next_snippet_case(rng):
        x = _t(rng, 4, 2, 3, 3)
        return _check_simple(rng, lambda: T.next_snippet(x, 2, 2), x)

    run("conv2d", conv_case)
    run("batchnorm2d_train", bn_case_train)
    run("batchnorm2d_eval", bn_case_eval)
    run("relu", relu_case)
    run("maxpool2d", pool_case)
    run("global_avg_pool", gap_case)
    run("linear", linear_case)
    run("dropout", dropout_case)
    run("concat_channels", concat_case)
    run("add", add_case)
    run("sub", sub_case)
    run("mul", mul_case)
    run("scale", scale_case)
    run("softmax_cross_entropy", ce_case)
    run("shift", shift_case)
    run("motion_filter", motion_filter_case)
    run("next_snippet", next_snippet_case)
    run("motion_block_sum", lambda rng: motion_block_check("sum", rng))
    run("motion_block_concat", lambda rng: motion_block_check("concat", rng))
    return results


def motion_block_check(variant, rng):
    from .tensor import ParamRegistry

    reg = ParamRegistry()
    buffers = {}
    spec = motion.MotionBlockSpec(variant, in_channels=4, reduction_factor=2)
    block = motion.MotionBlock(reg, buffers, "mb", spec, rng, dtype=np.float64)
    f_t = _t(rng, 1, 4, 4, 4)
    f_next = _t(rng, 1, 4, 4, 4)
    params = [t for _, t, _ in reg.items()]
    out0 = block.forward_pair(f_t, f_next, training=True)
    w = rng.standard_normal(out0.data.shape)
    return check_gradients(
        lambda: _weighted_sum(block.forward_pair(f_t, f_next, training=True), w),
        [f_t, f_next] + params,
    )


def tiny_arch(variant):
    """Smallest architecture worth checking: every layer kind, few params."""
    return ArchConfig(
        image_size=16,
        stem_channels=2,
        stage_channels=(2, 4),
        blocks_per_stage=1,
        num_classes=3,
        dropout_keep=1.0,
        motion=variant,
        reduction_factor=2,
        motion_stages=(True, True, True),
    )


def full_graph_check(variant, seed=0, k=2):
    """FD sweep over every parameter and the input frames of a tiny model."""
    model = build_model(tiny_arch(variant), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    frames = Tensor(rng.standard_normal((1, k, 3, 16, 16)), requires_grad=True)
    labels = np.array([1])

    def loss_fn():
        logits = model.forward_snippets(frames, training=True)
        avg = T.mean_axis(logits, axis=1)
        return T.softmax_cross_entropy(avg, labels)

    params = [t for _, t, _ in model.registry.items()]
    return check_gradients(loss_fn, [frames] + params, h=GRAPH_STEP)


def run_all(seed=0):
    """Full report: per-op errors plus whole-graph errors for both variants.

    Returns (report: dict name -> (err, threshold), passed: bool).
    """
    report = {}
    for name, err in op_checks(seed).items():
        report[name] = (err, OP_THRESHOLD)
    for variant in ("sum", "concat"):
        err = full_graph_check(variant, seed=seed)
        report[f"full_graph_{variant}"] = (err, GRAPH_THRESHOLD)
    passed = all(err <= thr for err, thr in report.values())
    return report, passed
