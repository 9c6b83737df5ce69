"""Central finite-difference checks for every differentiable primitive."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PRIMITIVE_TOL = 1e-5
MODEL_TOL = 1e-4
ZERO_GRAD_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)``; gradients that are zero up to difference noise agree."""
    a_norm, n_norm = np.linalg.norm(analytic), np.linalg.norm(numeric)
    if max(a_norm, n_norm) < ZERO_GRAD_FLOOR:
        # e.g. attention key biases: softmax ignores a per-query constant
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / max(a_norm, n_norm))


def numerical_gradient(f: Callable[[], float], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``x``."""
    base = x.numpy()
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        x.assign(base)
        fp = f()
        flat[i] = orig - h
        x.assign(base)
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    x.assign(base)
    return grad.reshape(x.shape)


def check_function(fn: Callable[..., Tensor], inputs: Sequence[Tensor], rng: np.random.Generator,
                   h: float = 1e-6) -> float:
    """Worst relative error over ``inputs`` for the scalar ``sum(fn(*inputs) * R)``, R random."""
    out = fn(*inputs)
    proj = Tensor(rng.standard_normal(out.shape))

    def loss() -> Tensor:
        y = fn(*inputs)
        return ad.sum_all(ad.mul(y, proj)) if y.shape else y

    for t in inputs:
        t.zero_grad()
    ad.backward(loss())
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numerical_gradient(lambda: loss().item(), t, h)
        ana = t.grad if t.grad is not None else np.zeros(t.shape)
        worst = max(worst, relative_error(ana, num))
    return worst


def _p(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _case_matmul(rng):
    return ad.matmul, [_p(rng, 3, 4), _p(rng, 4, 2)]


def _case_batched_matmul(rng):
    return ad.matmul, [_p(rng, 2, 3, 4), _p(rng, 2, 4, 3)]


def _case_linear(rng):
    return ad.linear, [_p(rng, 2, 3, 4), _p(rng, 5, 4), _p(rng, 5)]


def _case_gelu(rng):
    return ad.gelu, [_p(rng, 4, 5)]


def _case_layernorm(rng):
    return (lambda x, g, b: ad.layernorm(x, g, b, 1e-5)), [_p(rng, 3, 6), _p(rng, 6), _p(rng, 6)]


def _case_softmax(rng):
    return ad.softmax, [_p(rng, 3, 5)]


def _case_cross_entropy(rng):
    labels = rng.integers(0, 4, size=5)
    return (lambda z: ad.cross_entropy(z, labels)), [_p(rng, 5, 4)]


def _case_depthwise_conv2d(rng):
    return ad.depthwise_conv2d, [_p(rng, 2, 3, 5, 4), _p(rng, 3, 3, 3), _p(rng, 3)]


def _case_add(rng):
    return ad.add, [_p(rng, 2, 3, 4), _p(rng, 4)]


def _case_mul(rng):
    return ad.mul, [_p(rng, 2, 3, 4), _p(rng, 3, 4)]


def _case_scale(rng):
    return (lambda x: ad.scale(x, -1.7)), [_p(rng, 3, 4)]


def _case_mean_pool(rng):
    return ad.mean_pool_over_tokens, [_p(rng, 2, 5, 3)]


def _case_reshape_transpose(rng):
    return (lambda x: ad.transpose(ad.reshape(x, (3, 2, 4)), (2, 0, 1))), [_p(rng, 6, 4)]


def _case_patchify(rng):
    return (lambda x: ad.patchify(x, 2)), [_p(rng, 2, 3, 4, 4)]


PRIMITIVE_CASES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "batched_matmul": _case_batched_matmul,
    "linear": _case_linear,
    "gelu": _case_gelu,
    "layernorm": _case_layernorm,
    "softmax": _case_softmax,
    "cross_entropy": _case_cross_entropy,
    "depthwise_conv2d": _case_depthwise_conv2d,
    "add": _case_add,
    "mul": _case_mul,
    "scale": _case_scale,
    "mean_pool_over_tokens": _case_mean_pool,
    "reshape_transpose": _case_reshape_transpose,
    "patchify": _case_patchify,
}


@dataclass
class GradcheckReport:
    name: str
    worst_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_err <= self.tol


def check_primitive(name: str, points: int = 100, seed: int = 0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        fn, inputs = PRIMITIVE_CASES[name](rng)
        worst = max(worst, check_function(fn, inputs, rng))
    return GradcheckReport(name, worst, PRIMITIVE_TOL)


def check_model(family: str, seed: int = 0) -> GradcheckReport:
    """End-to-end check of every parameter of a 2-block model on a 2-sample batch."""
    from .init_schemes import InitSpec
    from .models import ModelConfig, build_model, forward

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(family=family, embed_dim=8, depth=2, expansion=2, patch_size=2, filter_size=3,
                      heads=2, num_classes=3, image_size=4,
                      init_spec=InitSpec(mlp_mean_mode="constant", mlp_mean_value=0.05,
                                         learnable_scalar_bias=True),
                      seed=seed)
    model = build_model(cfg)
    # zero head / identity norms hide gradient paths (an identity layernorm zeroes sum(x)),
    # so move every parameter off its initial value
    for p in model.params.values():
        p.assign(p.numpy() + 0.3 * rng.standard_normal(p.shape))
    images = Tensor(rng.standard_normal((2, 3, 4, 4)))
    labels = np.array([0, 2])

    def loss() -> Tensor:
        return ad.cross_entropy(forward(model, images), labels)

    model.zero_grad()
    ad.backward(loss())
    worst = 0.0
    for p in model.params.values():
        num = numerical_gradient(lambda: loss().item(), p)
        worst = max(worst, relative_error(p.grad, num))
    return GradcheckReport(f"model:{family}", worst, MODEL_TOL)


def run_suite(ops: Sequence[str] | None = None, points: int = 100, models: bool = True,
              seed: int = 0) -> list[GradcheckReport]:
    names = list(ops) if ops else list(PRIMITIVE_CASES)
    unknown = [n for n in names if n not in PRIMITIVE_CASES and not n.startswith("model:")]
    if unknown:
        raise KeyError(f"unknown ops {unknown}; choose from {sorted(PRIMITIVE_CASES)}")
    reports = [check_primitive(n, points, seed) for n in names if n in PRIMITIVE_CASES]
    if models and not ops:
        reports += [check_model("convnext", seed), check_model("vit", seed)]
    elif ops:
        reports += [check_model(n.split(":", 1)[1], seed) for n in names if n.startswith("model:")]
    return reports
