"""Finite-difference gradient suite over every layer type at toy sizes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import PointCloud, knn, normalize_unit_sphere
from .layers import EdgeConvLayer, EdgeFormerUnit, MlpLayer, multihead_attention
from .metrics import chamfer
from .network import NetworkConfig, PUEdgeFormer, forward
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-6
# reject samples with a pre-activation or max-pool gap closer than this to a kink
KINK_MARGIN = 1e-4
# central-difference noise is about eps * |f| / h; large losses drown small gradients
LOSS_BOUND = 10.0

TOY_N, TOY_K, TOY_C, TOY_HEADS = 8, 3, 6, 2


@dataclass
class ComponentResult:
    name: str
    errors: dict[str, float]
    attempts: int
    skipped: int = 0
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


@dataclass
class _Case:
    loss: Callable[[], Tensor]
    tensors: dict[str, Tensor] = field(default_factory=dict)


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _named(module, prefix: str) -> dict[str, Tensor]:
    return {prefix + name: t for name, t in module.named_parameters()}


def mlp_case(rng: np.random.Generator) -> _Case:
    layer = MlpLayer.create(TOY_C, 5, "leaky_relu", rng)
    x = Tensor(rng.standard_normal((TOY_N, TOY_C)))
    w = _probe(rng, (TOY_N, 5))
    return _Case(lambda: T.sum(layer(x) * w), {"input": x, **_named(layer, "mlp.")})


def edgeconv_case(rng: np.random.Generator) -> _Case:
    layer = EdgeConvLayer.create(TOY_K, TOY_C, TOY_C, rng)
    f = Tensor(rng.standard_normal((TOY_N, TOY_C)))
    graph = knn(f.data, TOY_K)
    w = _probe(rng, (TOY_N, TOY_C))
    return _Case(lambda: T.sum(layer(f, graph) * w), {"input": f, **_named(layer, "edgeconv.")})


def attention_case(rng: np.random.Generator) -> _Case:
    q, k, v = (Tensor(rng.standard_normal((TOY_N, TOY_C))) for _ in range(3))
    ow = Tensor(rng.uniform(-1, 1, (TOY_C, TOY_C)))
    ob = Tensor(rng.uniform(-1, 1, TOY_C))
    w = _probe(rng, (TOY_N, TOY_C))

    def loss():
        return T.sum(multihead_attention(q, k, v, TOY_HEADS, ow, ob) * w)

    return _Case(loss, {"q": q, "k": k, "v": v, "out_weight": ow, "out_bias": ob})


def _edgeformer_case(rng: np.random.Generator, c_in: int) -> _Case:
    unit = EdgeFormerUnit.create(c_in, TOY_C, TOY_K, TOY_HEADS, rng)
    # nonzero biases so their gradients are exercised at generic values
    for _, p in unit.named_parameters():
        if p.ndim == 1:
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
    f = Tensor(rng.standard_normal((TOY_N, c_in)))
    w = _probe(rng, (TOY_N, TOY_C))
    return _Case(lambda: T.sum(unit(f) * w), {"input": f, **_named(unit, "unit.")})


def edgeformer_case(rng: np.random.Generator) -> _Case:
    return _edgeformer_case(rng, TOY_C)


def edgeformer_shortcut_case(rng: np.random.Generator) -> _Case:
    return _edgeformer_case(rng, 3)


def toy_network_config(seed: int = 0) -> NetworkConfig:
    return NetworkConfig(
        r=4, k=TOY_K, heads=TOY_HEADS, unit_width=TOY_C, channels=8, extension_dims=(8, 4), init_seed=seed
    )


def network_case(rng: np.random.Generator) -> _Case:
    model = PUEdgeFormer(toy_network_config(), rng)
    for _, p in model.named_parameters():
        if p.ndim == 1:
            p.data[...] = rng.uniform(-0.2, 0.2, p.shape)
    # unit-sphere clouds, the regime the network runs in
    x = Tensor(normalize_unit_sphere(PointCloud(rng.standard_normal((TOY_N, 3)))).points)
    gt = normalize_unit_sphere(PointCloud(rng.standard_normal((4 * TOY_N, 3)))).points
    return _Case(lambda: chamfer(forward(model, x), gt), {"input": x, **_named(model, "net.")})


COMPONENTS: dict[str, Callable[[np.random.Generator], _Case]] = {
    "mlp": mlp_case,
    "edgeconv": edgeconv_case,
    "attention": attention_case,
    "edgeformer": edgeformer_case,
    "edgeformer_shortcut": edgeformer_shortcut_case,
    "network": network_case,
}


def _sample_case(builder, seed: int, max_attempts: int = 100) -> tuple[_Case, int]:
    rng = np.random.default_rng(seed)
    for attempt in range(1, max_attempts + 1):
        case = builder(rng)
        with T.track_kinks() as kinks:
            value = float(case.loss().data)
        if min(kinks, default=np.inf) > KINK_MARGIN and abs(value) <= LOSS_BOUND:
            return case, attempt
    raise RuntimeError(f"no well-conditioned sample after {max_attempts} attempts")


def check_component(name: str, seed: int = 0, h: float = STEP) -> ComponentResult:
    start = time.perf_counter()
    case, attempts = _sample_case(COMPONENTS[name], seed)
    skipped: dict[str, int] = {}
    # structurally zero coordinates (e.g. key biases under softmax shift invariance) are skipped
    errors = T.grad_check_many(case.loss, case.tensors, h, skip_zero=True, skipped=skipped)
    return ComponentResult(name, errors, attempts, sum(skipped.values()), time.perf_counter() - start)


def run_suite(seed: int = 0, h: float = STEP, components=None) -> list[ComponentResult]:
    return [check_component(name, seed, h) for name in (components or COMPONENTS)]
