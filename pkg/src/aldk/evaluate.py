"""Overlap metrics, latency measurement and the held-out evaluation report."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetManifest
from .deformation import folding_count, warp
from .engine import Tensor
from .networks import ParamSet, StudentConfig, cascade_forward, param_count

REPORT_SCHEMA = 1


class MetricError(ValueError):
    pass


def _sets(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a.data if isinstance(a, Tensor) else a) > 0.5
    b = np.asarray(b.data if isinstance(b, Tensor) else b) > 0.5
    if a.shape != b.shape:
        raise MetricError(f"mask extents differ: {a.shape} vs {b.shape}")
    if not a.any() and not b.any():
        raise MetricError("overlap is undefined for two empty masks")
    return a, b


def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|)."""
    a, b = _sets(a, b)
    return 2.0 * float(np.logical_and(a, b).sum()) / float(a.sum() + b.sum())


def jacc(a, b) -> float:
    """|A and B| / |A or B|."""
    a, b = _sets(a, b)
    return float(np.logical_and(a, b).sum()) / float(np.logical_or(a, b).sum())


def frozen(params_list: list[ParamSet]) -> list[dict[str, Tensor]]:
    """Gradient-free copies of the student parameters for inference."""
    return [{k: Tensor(p.data) for k, p in ps.items()} for ps in params_list]


def register(moving: np.ndarray, fixed: np.ndarray, params_list, config: StudentConfig = StudentConfig()):
    """Composed field [3,D,H,W] and warped moving volume for one pair."""
    _, total, warped = cascade_forward(Tensor(moving[None]), Tensor(fixed[None]), frozen(params_list), config=config)
    return total.data[0], warped.data[0]


def measure_latency(fn, repeats: int = 5) -> float:
    """Median wall-clock seconds of ``fn()`` over ``repeats`` runs after one warm-up."""
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


@dataclass
class PairResult:
    index: int
    dice: float
    jacc: float
    folding_count: int
    latency_seconds: float


@dataclass
class RegistrationReport:
    pairs: list[PairResult]
    param_count: int
    config: dict = field(default_factory=dict)
    schema: int = REPORT_SCHEMA

    def aggregate(self) -> dict:
        out = {}
        for key in ("dice", "jacc", "folding_count", "latency_seconds"):
            vals = [float(getattr(p, key)) for p in self.pairs]
            out[key] = {"mean": float(np.mean(vals)) if vals else 0.0,
                        "std": float(np.std(vals)) if vals else 0.0}
        return out

    def to_dict(self) -> dict:
        return {"schema": self.schema, "param_count": self.param_count, "config": self.config,
                "pairs": [asdict(p) for p in self.pairs], "aggregate": self.aggregate()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(pairs=[PairResult(**p) for p in d["pairs"]], param_count=int(d["param_count"]),
                   config=d.get("config", {}), schema=d["schema"])

    @classmethod
    def from_json(cls, text: str) -> "RegistrationReport":
        return cls.from_dict(json.loads(text))


def evaluate(params_list, manifest: DatasetManifest, config: StudentConfig = StudentConfig(),
             latency_repeats: int = 5, field_fn=None, config_echo: dict | None = None) -> RegistrationReport:
    """Register every pair in ``manifest`` and score the warped moving mask.

    ``field_fn(i, moving, fixed)`` may replace the network (e.g. an oracle
    returning the ground-truth field); it must return a [3,D,H,W] array.
    """
    uses_student = field_fn is None
    if uses_student:
        def field_fn(i, mv, fx):
            return register(mv, fx, params_list, config)[0]
    results = []
    for i in range(len(manifest)):
        mv, fx, mm, fm = manifest.load_pair(i)
        if uses_student and any(n % config.divisor for n in mv.shape[1:]):
            raise ValueError(f"pair {i}: extent {mv.shape[1:]} incompatible with the student")
        phi = field_fn(i, mv, fx)
        if phi.shape[1:] != mv.shape[1:]:
            raise ValueError(f"pair {i}: field extent {phi.shape[1:]} does not match {mv.shape[1:]}")
        warped_mask = warp(mm, phi, "nearest").data
        lat = measure_latency(lambda: field_fn(i, mv, fx), latency_repeats) if latency_repeats else 0.0
        results.append(PairResult(i, dice(warped_mask, fm), jacc(warped_mask, fm), folding_count(phi),
                                  max(lat, 1e-9)))
    count = param_count(params_list) if params_list is not None else 0
    return RegistrationReport(results, count, config_echo or {})
