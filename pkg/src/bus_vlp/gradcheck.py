"""Central finite-difference checks for every differentiable op and every model parameter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .tensor import Tensor

H = 1e-5
TOLERANCE = 1e-4
# Central differences at h=1e-5 carry ~1e-10 absolute noise on O(10) losses;
# gradients below this floor are compared on an absolute scale (1e-9) instead.
NOISE_FLOOR = 1e-5


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(self.rel_error <= self.tolerance)


def relative_error(analytic, numeric, floor: float = NOISE_FLOOR) -> float:
    """Norm-wise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(loss: Callable[[], float], x: Tensor, h: float = H, coords=None) -> np.ndarray:
    """Central differences of ``loss`` w.r.t. ``x.data`` at ``coords`` (all entries by default)."""
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        original = flat[i]
        flat[i] = original + h
        plus = loss()
        flat[i] = original - h
        minus = loss()
        flat[i] = original
        out.append((plus - minus) / (2 * h))
    return np.array(out)


def directional_derivative(loss: Callable[[], float], x: Tensor, direction: np.ndarray, h: float = H) -> float:
    original = x.data.copy()
    x.data = original + h * direction
    plus = loss()
    x.data = original - h * direction
    minus = loss()
    x.data = original
    return (plus - minus) / (2 * h)


def check_inputs(name: str, build: Callable[[list[Tensor]], Tensor], inputs: list[Tensor], rng, tol: float = TOLERANCE):
    """Compare backward against full central differences for each input that requires grad."""
    out = build(inputs)
    weights = rng.standard_normal(out.shape)

    def loss() -> float:
        with T.no_grad():
            return float((build(inputs).data * weights).sum())

    for x in inputs:
        x.grad = None
    T.tsum(T.mul(build(inputs), weights)).backward()
    results = []
    for index, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        results.append(GradCheckResult(f"{name}[{index}]", relative_error(analytic, numeric_gradient(loss, x)), tol))
    return results


# ----------------------------------------------------------------- op table


def _p(rng, *shape, low=None, high=None):
    data = rng.uniform(low, high, shape) if low is not None else rng.standard_normal(shape)
    return T.parameter(data)


def _const(data):
    return T.as_tensor(np.asarray(data, dtype=np.float64))


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    """``(name, build, inputs)`` for every differentiable op, with fresh random inputs."""
    labels = _const(rng.integers(0, 2, (3, 4)))
    return [
        ("matmul", lambda v: T.matmul(v[0], v[1]), [_p(rng, 3, 4), _p(rng, 4, 2)]),
        ("matmul_batched", lambda v: T.matmul(v[0], v[1]), [_p(rng, 2, 3, 4), _p(rng, 4, 2)]),
        ("softmax", lambda v: T.softmax(v[0]), [_p(rng, 3, 5)]),
        ("layer_norm", lambda v: T.layer_norm(v[0], v[1], v[2]), [_p(rng, 3, 6), _p(rng, 6), _p(rng, 6)]),
        ("add", lambda v: T.add(v[0], v[1]), [_p(rng, 3, 4), _p(rng, 4)]),
        ("sub", lambda v: T.sub(v[0], v[1]), [_p(rng, 3, 4), _p(rng, 3, 1)]),
        ("mul", lambda v: T.mul(v[0], v[1]), [_p(rng, 3, 4), _p(rng, 4)]),
        ("div", lambda v: T.div(v[0], v[1]), [_p(rng, 3, 4), _p(rng, 3, 4, low=0.5, high=2.0)]),
        ("scale", lambda v: T.scale(v[0], -1.7), [_p(rng, 2, 3)]),
        ("exp", lambda v: T.exp(v[0]), [_p(rng, 2, 3)]),
        ("log", lambda v: T.log(v[0]), [_p(rng, 2, 3, low=0.3, high=3.0)]),
        ("sigmoid", lambda v: T.sigmoid(v[0]), [_p(rng, 2, 3)]),
        ("gelu", lambda v: T.gelu(v[0]), [_p(rng, 2, 3)]),
        ("concat", lambda v: T.concat([v[0], v[1]], axis=-1), [_p(rng, 2, 3), _p(rng, 2, 2)]),
        ("gather_rows", lambda v: T.gather_rows(v[0], np.array([4, 0, 4, 2])), [_p(rng, 5, 3)]),
        (
            "gather_rows_batched",
            lambda v: T.gather_rows(v[0], np.array([[0, 2], [3, 1]])),
            [_p(rng, 2, 4, 3)],
        ),
        ("embedding", lambda v: T.embedding(v[0], np.array([[1, 5, 1], [0, 2, 2]])), [_p(rng, 6, 3)]),
        ("cross_entropy", lambda v: T.cross_entropy(v[0], np.array([0, 4, 2, 2])), [_p(rng, 4, 5)]),
        (
            "cross_entropy_weighted",
            lambda v: T.cross_entropy(v[0], np.array([[1, 0, 3]]), np.array([[1.0, 0.0, 2.0]])),
            [_p(rng, 1, 3, 4)],
        ),
        ("binary_cross_entropy", lambda v: T.binary_cross_entropy(v[0], labels.data), [_p(rng, 3, 4, low=0.05, high=0.95)]),
        ("l2_normalize", lambda v: T.l2_normalize(v[0]), [_p(rng, 3, 4)]),
        ("sum", lambda v: T.tsum(v[0], axis=1), [_p(rng, 3, 4)]),
        ("mean", lambda v: T.mean(v[0], axis=0), [_p(rng, 3, 4)]),
        ("reshape", lambda v: T.reshape(v[0], (4, 3)), [_p(rng, 2, 6)]),
        ("transpose", lambda v: T.transpose(v[0], (2, 0, 1)), [_p(rng, 2, 3, 4)]),
        ("getitem", lambda v: T.getitem(v[0], (slice(None), np.array([2, 0, 2]))), [_p(rng, 3, 4)]),
    ]


def check_ops(seed: int = 0, points: int = 5, tol: float = TOLERANCE) -> list[GradCheckResult]:
    """Every op at ``points`` independent random inputs."""
    rng = np.random.default_rng(seed)
    results = []
    for point in range(points):
        for name, build, inputs in op_cases(rng):
            results.extend(check_inputs(f"{name}@{point}", build, inputs, rng, tol))
    return results


# --------------------------------------------------------------- model level


def model_loss_fn(cfg: RunConfig, model, batch_o, batch_d, beta: float = 0.5):
    """Closure evaluating the summed training loss with replayed forward constants."""
    from .model import rng_streams
    from .objectives import total_loss
    from .schedule import collate_region

    images_o, label_texts, labels = collate_region(batch_o, cfg)
    images_d = np.stack([s.pixels for s in batch_d])
    captions = [s.caption for s in batch_d]

    def build() -> Tensor:
        rngs = rng_streams(cfg.seed + 1)
        ptm, _ = model.ptm_forward(images_o, label_texts, labels)
        paired = model.paired_forward(images_d, captions, beta, rngs)
        return total_loss(paired.itc, paired.itm, paired.mlm, paired.prefix, ptm).graph

    return build


def check_model(
    cfg: RunConfig | None = None,
    batch: int = 2,
    coords_per_tensor: int = 2,
    beta: float = 0.5,
    tol: float = TOLERANCE,
) -> list[GradCheckResult]:
    """Directional and sampled-coordinate checks for every parameter tensor of a fresh model."""
    from .model import BUSModel, rng_streams
    from .schedule import sample_batch

    cfg = cfg or RunConfig()
    model = BUSModel(cfg)
    rngs = rng_streams(cfg.seed)
    batch_o = sample_batch(rngs["data"], "region", batch, cfg.image_size)
    batch_d = sample_batch(rngs["data"], "paired", batch, cfg.image_size)
    build = model_loss_fn(cfg, model, batch_o, batch_d, beta)
    probe = rngs["eval"]

    with T.constant_tape() as tape:
        model.zero_grad()
        build().backward()
        tape.rewind()

        def loss() -> float:
            tape.cursor = 0
            with T.no_grad():
                return float(build().data)

        results = []
        for name, p in model.named_parameters():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            direction = probe.standard_normal(p.shape)
            numeric = directional_derivative(loss, p, direction)
            results.append(GradCheckResult(f"{name}:dir", relative_error((analytic * direction).sum(), numeric), tol))
            coords = probe.choice(p.size, size=min(coords_per_tensor, p.size), replace=False)
            numeric = numeric_gradient(loss, p, coords=coords)
            results.append(GradCheckResult(f"{name}:coords", relative_error(analytic.reshape(-1)[coords], numeric), tol))
    return results


def run_suite(cfg: RunConfig | None = None, seed: int = 0) -> list[GradCheckResult]:
    return check_ops(seed) + check_model(cfg)
