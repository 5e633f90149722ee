import numpy as np
import pytest

from aldk.engine import Tensor, mul, sum as tsum


def project(out: Tensor, seed: int = 99) -> Tensor:
    """Random linear functional of a tensor.

    Used as the scalar for finite-difference checks: every output element gets
    a distinct random weight, so a wrong gradient for any one of them shows up.
    """
    w = np.random.default_rng(seed).standard_normal(out.shape).astype(np.float32)
    return tsum(mul(out, Tensor(w)))


def kink_free_field(rng, shape, spread: float = 1.0) -> np.ndarray:
    """Displacements whose sample points sit at fractional offsets in [0.2, 0.8].

    Trilinear interpolation is piecewise linear; keeping every sample away from
    voxel faces and the clamp boundary lets +-1e-3 perturbations stay on one
    linear piece.
    """
    _, d, h, w = shape
    target = np.empty(shape)
    # field channel order is (x, y, z); array axes are (z, y, x)
    for chan, extent, axis in ((0, w, 2), (1, h, 1), (2, d, 0)):
        base = np.indices((d, h, w))[axis]
        shift = np.round(rng.uniform(-spread, spread, size=(d, h, w)))
        cell = np.clip(base + shift, 0, extent - 2)
        frac = rng.uniform(0.2, 0.8, size=(d, h, w))
        target[chan] = cell + frac - base
    return target.astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_image(extent: int, seed: int) -> np.ndarray:
    """Unit-range phantom of broad blobs only (no sharp organ edge)."""
    from aldk.data import PhantomSpec, gen_phantom
    img, _ = gen_phantom(PhantomSpec(extent=extent, seed=seed, blob_width=(0.2, 0.35), organ_intensity=0.0))
    return img


def in_domain(field: np.ndarray) -> np.ndarray:
    """Voxels whose displaced position stays inside the grid (no clamping)."""
    idx = np.indices(field.shape[-3:])
    ok = np.ones(field.shape[-3:], bool)
    for chan, axis in ((0, 2), (1, 1), (2, 0)):
        p = idx[axis] + field[chan]
        ok &= (p >= 0) & (p <= field.shape[-3 + axis] - 1)
    return ok


# -- acceptance verdicts -------------------------------------------------------

VERDICTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Store one acceptance verdict; printed in the terminal summary."""
    VERDICTS[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
