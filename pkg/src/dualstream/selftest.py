"""Built-in gradient and invariant checks behind the ``selftest`` command."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import check_gradients
from .losses import loss_c
from .rng import SeededRng
from .schedules import LrSchedule, TauSchedule, lr_at, tau_at
from .tensor import Tensor


def _rand(np_rng, *shape, offset=0.0):
    return Tensor(np_rng.standard_normal(shape).astype(np.float32) + offset,
                  requires_grad=True)


def gradient_suite(seed: int = 0, configs_per_op: int = 5) -> list[tuple[str, bool, str]]:
    """Finite-difference checks over every differentiable op."""
    results = []
    base = SeededRng(seed)

    def run(name, build):
        ok, detail = True, ""
        try:
            for k in range(configs_per_op):
                np_rng = base.derive(hash(name) & 0xFFFF, k).numpy_rng()
                fn, tensors = build(np_rng)
                err = check_gradients(fn, tensors)
                detail = f"worst rel err {err:.2e}"
        except Exception as exc:  # pragma: no cover - failure path
            ok, detail = False, str(exc)
        results.append((name, ok, detail))

    def scalarizer(np_rng, shape):
        # frozen weight: f+ / f- / analytic must see the same scalar function
        r = Tensor(np_rng.standard_normal(shape).astype(np.float32))
        return lambda t: T.tsum(T.mul(t, r))

    def binary(op):
        def build(np_rng):
            a, b = _rand(np_rng, 3, 4), _rand(np_rng, 3, 4, offset=3.0)
            s = scalarizer(np_rng, (3, 4))
            return (lambda: s(op(a, b))), [a, b]
        return build

    run("add", binary(T.add))
    run("sub", binary(T.sub))
    run("mul", binary(T.mul))

    def build_div(np_rng):
        a = _rand(np_rng, 3, 4)
        raw = np_rng.standard_normal((3, 4)).astype(np.float32)
        # denominator bounded away from zero so finite differences stay sane
        b = Tensor(np.sign(raw) * (np.abs(raw) + 1.0), requires_grad=True)
        s = scalarizer(np_rng, (3, 4))
        return (lambda: s(T.div(a, b))), [a, b]

    run("div", build_div)

    def build_matmul(np_rng):
        a, b = _rand(np_rng, 3, 4), _rand(np_rng, 4, 2)
        s = scalarizer(np_rng, (3, 2))
        return (lambda: s(T.matmul(a, b))), [a, b]

    run("matmul", build_matmul)

    def build_conv(np_rng):
        x, w = _rand(np_rng, 1, 2, 5, 5), _rand(np_rng, 3, 2, 3, 3)
        s = scalarizer(np_rng, (1, 3, 5, 5))
        return (lambda: s(T.conv2d(x, w, stride=1, pad=1))), [x, w]

    run("conv2d", build_conv)

    def build_relu(np_rng):
        arr = np_rng.standard_normal((4, 5)).astype(np.float32)
        x = Tensor(arr + np.sign(arr) * 0.2, requires_grad=True)  # clear of the kink
        s = scalarizer(np_rng, (4, 5))
        return (lambda: s(T.relu(x))), [x]

    run("relu", build_relu)

    def build_softmax(np_rng):
        x = _rand(np_rng, 3, 6)
        s = scalarizer(np_rng, (3, 6))
        return (lambda: s(T.softmax_rows(x))), [x]

    run("softmax_rows", build_softmax)

    def build_l2norm(np_rng):
        x = _rand(np_rng, 3, 5, offset=1.0)
        s = scalarizer(np_rng, (3, 5))
        return (lambda: s(T.l2_normalize(x))), [x]

    run("l2_normalize", build_l2norm)

    def build_bn(np_rng):
        x = _rand(np_rng, 6, 3)
        gamma = _rand(np_rng, 3, offset=1.0)
        beta = _rand(np_rng, 3)
        rm, rv = Tensor(np.zeros(3)), Tensor(np.ones(3))
        s = scalarizer(np_rng, (6, 3))
        fn = lambda: s(
            T.batch_norm(x, gamma, beta, rm, rv, training=True, track_stats=False))
        return fn, [x, gamma, beta]

    run("batch_norm", build_bn)

    def build_losses(np_rng):
        a, b = _rand(np_rng, 4, 6, offset=1.0), _rand(np_rng, 4, 6, offset=1.0)
        return (lambda: loss_c(a, b)), [a, b]

    run("loss_cosine", build_losses)
    return results


def invariant_suite(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    np_rng = SeededRng(seed).numpy_rng()

    x = Tensor(np_rng.standard_normal((8, 7)) * 5)
    sums = T.softmax_rows(x).data.sum(axis=1)
    results.append(("softmax rows sum to 1", bool(np.allclose(sums, 1.0, atol=1e-6)),
                    f"max dev {abs(sums - 1).max():.1e}"))

    const = Tensor(np.full((2, 3, 4, 4), 0.73, dtype=np.float32))
    pooled = T.mean_pool_2d(const).data
    results.append(("mean_pool_2d exact on constants",
                    bool(np.all(pooled == np.float32(0.73))), ""))

    tau = TauSchedule(tau_base=0.99, total_steps=100)
    ok = abs(tau_at(tau, 0) - 0.99) < 1e-12 and abs(tau_at(tau, 100) - 1.0) < 1e-12
    results.append(("tau schedule endpoints", ok, ""))

    lr = LrSchedule(base_lr=0.05, warmup_steps=10, total_steps=100)
    ok = lr_at(lr, 0) == 1e-6 and lr_at(lr, 10) == 0.05 and abs(lr_at(lr, 100)) < 1e-18
    results.append(("lr schedule endpoints", ok, ""))
    return results


def run_selftest(seed: int = 0) -> bool:
    T.set_debug_checks(True)
    try:
        all_ok = True
        for name, ok, detail in gradient_suite(seed) + invariant_suite(seed):
            print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
            all_ok = all_ok and ok
        return all_ok
    finally:
        T.set_debug_checks(False)
