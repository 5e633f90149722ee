"""Reversed-role adversarial training loop, Adam and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DatasetManifest, SplitMix64, TeacherProvider
from .engine import DTYPE, Parameter, Tensor, backward
from .losses import adv_loss, critic_loss, dis_loss, feature_term, rec_loss
from .networks import (DiscriminatorConfig, StudentConfig, cascade_forward, flatten, init_cascade,
                       init_discriminator)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 4
    n_gen: int = 3
    beta: float = 0.1
    gamma: float = 0.5
    lam: float = 1.0
    lr: float = 1e-4
    iterations: int = 100
    seed: int = 0
    cascades: int = 1
    extent: int = 32
    critic: bool = True
    penalty_to_student: bool = False
    disc_size: int = 32
    base_channels: int = 16

    def __post_init__(self):
        if self.batch < 1 or self.n_gen < 1 or self.iterations < 1 or self.cascades < 1:
            raise ValueError(f"invalid training config {self}")
        if not (0 <= self.beta <= 1 and 0 <= self.gamma <= 1 and self.lam >= 0):
            raise ValueError(f"loss weights out of range in {self}")

    def student_config(self) -> StudentConfig:
        return StudentConfig(base_channels=self.base_channels, cascades=self.cascades)

    def disc_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(size=self.disc_size)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


# -- Adam ----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Parameter], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update from the parameters' grad slots (float32)."""
    state.step += 1
    t = state.step
    b1, b2 = DTYPE(state.beta1), DTYPE(state.beta2)
    c1 = DTYPE(1.0 - state.beta1 ** t)
    c2 = DTYPE(1.0 - state.beta2 ** t)
    for name, p in params.items():
        g = p.grad
        if g is None or g.shape != p.shape:
            raise TrainingError(f"parameter {name} has no gradient")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (DTYPE(1) - b1) * g
        v = b2 * v + (DTYPE(1) - b2) * g * g
        update = DTYPE(lr) * (m / c1) / (np.sqrt(v / c2) + DTYPE(state.eps))
        p.data = (p.data - update).astype(DTYPE)
        state.m[name], state.v[name] = m.astype(DTYPE), v.astype(DTYPE)


# -- batching --------------------------------------------------------------------

@dataclass
class BatchSampler:
    """Epoch-wise sampling without replacement, reshuffled from the run seed."""

    size: int
    rng_state: int
    perm: list[int] = field(default_factory=list)
    pos: int = 0
    epoch: int = 0

    @classmethod
    def create(cls, size: int, seed: int) -> "BatchSampler":
        return cls(size=size, rng_state=SplitMix64(seed).nth(0))

    def _reshuffle(self) -> None:
        rng = SplitMix64(self.rng_state)
        perm = list(range(self.size))
        for i in range(self.size - 1, 0, -1):
            j = rng.randrange(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        self.rng_state = rng.state
        self.perm, self.pos = perm, 0
        self.epoch += 1

    def next(self, b: int) -> list[int]:
        out = []
        for _ in range(b):
            if self.pos >= len(self.perm):
                self._reshuffle()
            out.append(self.perm[self.pos])
            self.pos += 1
        return out


# -- training state -------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    student: list[dict[str, Parameter]]
    disc: dict[str, Parameter]
    opt_w: OptimizerState
    opt_theta: OptimizerState
    sampler: BatchSampler
    iteration: int = 0
    log: list[dict] = field(default_factory=list)

    @property
    def student_params(self) -> dict[str, Parameter]:
        return flatten(self.student)


def init_state(config: TrainConfig, dataset_size: int) -> TrainState:
    seeds = SplitMix64(config.seed)
    student = init_cascade(config.student_config(), seeds.next_u64())
    disc = init_discriminator(config.disc_config(), seeds.next_u64())
    sampler = BatchSampler.create(dataset_size, seeds.next_u64())
    return TrainState(config, student, disc, OptimizerState(), OptimizerState(), sampler)


class PairBank:
    """All training pairs held in memory as float32 arrays."""

    def __init__(self, manifest: DatasetManifest, teacher: TeacherProvider | None):
        self.moving, self.fixed = [], []
        for i in range(len(manifest)):
            mv, fx, _, _ = manifest.load_pair(i)
            self.moving.append(mv)
            self.fixed.append(fx)
        self.teacher = teacher
        self.extent = self.moving[0].shape[1:]

    def __len__(self) -> int:
        return len(self.moving)

    def batch(self, idx: list[int]):
        mv = Tensor(np.stack([self.moving[i] for i in idx]))
        fx = Tensor(np.stack([self.fixed[i] for i in idx]))
        return mv, fx

    def teacher_batch(self, idx: list[int]) -> Tensor:
        if self.teacher is None:
            raise TrainingError("adversarial phase needs a teacher provider")
        fields_ = []
        for i in idx:
            phi = self.teacher(i)
            if phi.shape[1:] != self.extent:
                raise TrainingError(f"teacher field for record {i} has extent {phi.shape[1:]}, expected {self.extent}")
            fields_.append(phi)
        return Tensor(np.stack(fields_))


def _finite(value: float, what: str, iteration: int) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} at iteration {iteration}")
    return value


def _check_params(params: dict[str, Parameter], what: str, iteration: int) -> None:
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise TrainingError(f"non-finite {what} parameter {name} at iteration {iteration}")


def train_iteration(state: TrainState, bank: PairBank) -> dict:
    """One outer iteration: n_gen reconstruction phases, then one adversarial phase."""
    cfg = state.config
    scfg, dcfg = cfg.student_config(), cfg.disc_config()
    params_w = state.student_params
    it = state.iteration
    _check_params(params_w, "student", it)
    _check_params(state.disc, "critic", it)
    rec_values = []
    for _ in range(cfg.n_gen):
        mv, fx = bank.batch(state.sampler.next(cfg.batch))
        _, _, warped = cascade_forward(mv, fx, state.student, config=scfg)
        l_rec = rec_loss(warped, fx)
        rec_values.append(_finite(l_rec.item(), "l_rec", it))
        backward(l_rec, params_w.values())
        adam_step(params_w, state.opt_w, cfg.lr)

    idx = state.sampler.next(cfg.batch)
    mv, fx = bank.batch(idx)
    _, phi_s, warped = cascade_forward(mv, fx, state.student, config=scfg)
    l_rec = rec_loss(warped, fx)
    entry = {"iteration": it, "l_rec": float(np.mean(rec_values)), "l_rec_adv": _finite(l_rec.item(), "l_rec", it)}

    adversarial = cfg.critic or cfg.gamma < 1.0
    if adversarial:
        phi_t = bank.teacher_batch(idx)
    if cfg.critic:
        c_loss = critic_loss(phi_s, phi_t, state.disc, cfg.beta, cfg.lam, dcfg)
        entry["critic"] = _finite(c_loss.item(), "critic loss", it)
        backward(c_loss, state.disc.values())
        adam_step(state.disc, state.opt_theta, cfg.lr)
    if adversarial:
        if cfg.penalty_to_student:
            l_dis = dis_loss(phi_s, phi_t, state.disc, cfg.beta, cfg.lam, dcfg)
        else:
            l_dis = feature_term(phi_s, phi_t, state.disc, dcfg)
        entry["l_dis"] = _finite(l_dis.item(), "l_dis", it)
        total = adv_loss(l_rec, l_dis, cfg.gamma)
    else:
        total = adv_loss(l_rec, Tensor(np.zeros((), DTYPE)), cfg.gamma)
    entry["l_adv"] = _finite(total.item(), "L_adv", it)
    backward(total, params_w.values())
    adam_step(params_w, state.opt_w, cfg.lr)
    _check_params(params_w, "student", it)
    _check_params(state.disc, "critic", it)

    state.iteration += 1
    state.log.append(entry)
    return entry


def train(config: TrainConfig, manifest: DatasetManifest, teacher: TeacherProvider | None,
          state: TrainState | None = None, iterations: int | None = None, progress=None) -> TrainState:
    """Run (or continue) training until ``iterations`` outer iterations are done.

    ``iterations`` defaults to ``config.iterations``; a resumed state keeps
    its counters, sampler and optimizer moments.
    """
    bank = PairBank(manifest, teacher)
    if tuple(bank.extent) != (config.extent,) * 3:
        raise TrainingError(f"dataset extent {bank.extent} does not match config extent {config.extent}")
    if state is None:
        state = init_state(config, len(bank))
    target = config.iterations if iterations is None else iterations
    while state.iteration < target:
        entry = train_iteration(state, bank)
        if progress is not None:
            progress(entry)
        elif state.iteration % 50 == 0:
            log.info("iteration %d: %s", state.iteration, entry)
    return state


# -- checkpoints -----------------------------------------------------------------

_CKPT_MAGIC = b"ALDK"
_CKPT_VERSION = 1


def _pack_bytes(name: str, payload: bytes) -> bytes:
    key = name.encode()
    return struct.pack("<I", len(key)) + key + struct.pack("<Q", len(payload)) + payload


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=DTYPE)
    return struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.astype("<f4").tobytes()


def _unpack_array(buf: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", buf)
    shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    off = 4 + 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if len(buf) - off != 4 * n:
        raise CheckpointError("tensor payload size does not match its shape")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(DTYPE)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def encode_checkpoint(state: TrainState) -> bytes:
    sections = [("config", _json_bytes(asdict(state.config)))]
    meta = {"iteration": state.iteration, "cascades": len(state.student),
            "opt_w": {"step": state.opt_w.step, "beta1": state.opt_w.beta1, "beta2": state.opt_w.beta2, "eps": state.opt_w.eps},
            "opt_theta": {"step": state.opt_theta.step, "beta1": state.opt_theta.beta1,
                          "beta2": state.opt_theta.beta2, "eps": state.opt_theta.eps}}
    sections.append(("meta", _json_bytes(meta)))
    s = state.sampler
    sections.append(("rng", _json_bytes({"size": s.size, "rng_state": s.rng_state, "perm": s.perm, "pos": s.pos,
                                          "epoch": s.epoch})))
    sections.append(("log", _json_bytes(state.log)))
    for name, p in state.student_params.items():
        sections.append((f"W/{name}", _pack_array(p.data)))
    for name, p in state.disc.items():
        sections.append((f"theta/{name}", _pack_array(p.data)))
    for tag, opt in (("adam_w", state.opt_w), ("adam_theta", state.opt_theta)):
        for name in sorted(opt.m):
            sections.append((f"{tag}/m/{name}", _pack_array(opt.m[name])))
            sections.append((f"{tag}/v/{name}", _pack_array(opt.v[name])))
    body = b"".join(_pack_bytes(n, p) for n, p in sections)
    return _CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(sections)) + body


def decode_checkpoint(buf: bytes) -> TrainState:
    if len(buf) < 12:
        raise CheckpointError("checkpoint truncated inside the header")
    if buf[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    sections: dict[str, bytes] = {}
    order: list[str] = []
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", buf, off)
            off += 4
            key = buf[off:off + klen].decode()
            off += klen
            (plen,) = struct.unpack_from("<Q", buf, off)
            off += 8
            if off + plen > len(buf):
                raise CheckpointError(f"checkpoint truncated in section {key!r}")
            sections[key] = buf[off:off + plen]
            order.append(key)
            off += plen
    except struct.error:
        raise CheckpointError("checkpoint truncated") from None
    if off != len(buf):
        raise CheckpointError("trailing bytes after last checkpoint section")

    config = TrainConfig.from_dict(json.loads(sections["config"]))
    meta = json.loads(sections["meta"])
    rng = json.loads(sections["rng"])
    student: list[dict[str, Parameter]] = [{} for _ in range(meta["cascades"])]
    disc: dict[str, Parameter] = {}
    opts = {"adam_w": OptimizerState(**meta["opt_w"]), "adam_theta": OptimizerState(**meta["opt_theta"])}
    for key in order:
        head, _, rest = key.partition("/")
        if head == "W":
            cas, _, name = rest.partition(".")
            student[int(cas[3:])][name] = Parameter(name, _unpack_array(sections[key]))
        elif head == "theta":
            disc[rest] = Parameter(rest, _unpack_array(sections[key]))
        elif head in opts:
            which, _, name = rest.partition("/")
            getattr(opts[head], which)[name] = _unpack_array(sections[key])
    sampler = BatchSampler(size=rng["size"], rng_state=rng["rng_state"], perm=rng["perm"], pos=rng["pos"],
                           epoch=rng["epoch"])
    return TrainState(config, student, disc, opts["adam_w"], opts["adam_theta"], sampler,
                      iteration=meta["iteration"], log=json.loads(sections["log"]))


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> TrainState:
    return decode_checkpoint(Path(path).read_bytes())
