"""Adam with named parameter groups, the stage schedule and its gating.

Groups whose tensors are indexed by frame (camera corrections, per-frame
pose) are updated lazily: a row only advances its moments and its own step
counter when it received a gradient this iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

STAGES = ("warmup", "independent", "joint")

# base learning rates per group
DEFAULT_LR = {
    "bg_means": 1.6e-4,
    "bg_opacity": 0.05,
    "bg_scales": 0.005,
    "bg_color": 0.001,
    "bg_rotation": 0.0025,
    "human_means": 1.6e-4,
    "human_attributes": 0.001,
    "net": 0.001,
    "camera": 0.001,
    "theta": 0.001,
    "beta": 0.001,
}
GROUPS = tuple(DEFAULT_LR)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, group: str):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


def adam_update(param, grad, m, v, step, lr: float, beta1=BETA1, beta2=BETA2, eps=EPS):
    """One bias-corrected Adam update; returns ``(param, m, v)`` (new tensors).

    ``step`` is the step count *after* this update and may be a tensor that
    broadcasts against ``param`` (per-row counters).
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return param - lr * m_hat / (torch.sqrt(v_hat) + eps), m, v


@dataclass
class AdamState:
    """Moments and step counters, keyed by ``group/index``."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)  # int, or int64 tensor of per-row counts

    def clone(self) -> AdamState:
        cp = lambda d: {k: (x.clone() if isinstance(x, torch.Tensor) else x) for k, x in d.items()}
        return AdamState(cp(self.m), cp(self.v), cp(self.step))


class Adam:
    def __init__(self, groups: dict, rowwise=(), beta1=BETA1, beta2=BETA2, eps=EPS, state: AdamState | None = None):
        """``groups`` maps a name to a list of leaf tensors; names in
        ``rowwise`` get per-row lazy updates along dim 0."""
        self.groups = {k: list(v) for k, v in groups.items()}
        self.rowwise = set(rowwise)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = state or AdamState()

    def _key(self, group, i):
        return f"{group}/{i}"

    def step_group(self, group: str, lr: float):
        if group not in self.groups:
            raise KeyError(f"unknown parameter group {group!r}")
        st = self.state
        for i, p in enumerate(self.groups[group]):
            g = p.grad
            if g is None:
                continue
            if not bool(torch.all(torch.isfinite(g))):
                raise NonFiniteGradient(group)
            key = self._key(group, i)
            if key not in st.m:
                st.m[key] = torch.zeros_like(p)
                st.v[key] = torch.zeros_like(p)
                st.step[key] = torch.zeros(p.shape[0], dtype=torch.int64) if group in self.rowwise else 0
            with torch.no_grad():
                if group in self.rowwise:
                    rows = torch.nonzero(g.reshape(g.shape[0], -1).abs().sum(1) > 0).flatten()
                    if len(rows) == 0:
                        continue
                    st.step[key][rows] += 1
                    cnt = st.step[key][rows].to(p.dtype).view(-1, *([1] * (p.ndim - 1)))
                    new_p, new_m, new_v = adam_update(p[rows], g[rows], st.m[key][rows], st.v[key][rows], cnt,
                                                      lr, self.beta1, self.beta2, self.eps)
                    p[rows] = new_p
                    st.m[key][rows] = new_m
                    st.v[key][rows] = new_v
                else:
                    st.step[key] += 1
                    new_p, st.m[key], st.v[key] = adam_update(p, g, st.m[key], st.v[key], st.step[key],
                                                              lr, self.beta1, self.beta2, self.eps)
                    p.copy_(new_p)

    def zero_grad(self):
        for ps in self.groups.values():
            for p in ps:
                p.grad = None


def adam_step(state: AdamState, params: dict, grads: dict, lr: float, group: str = "params"):
    """Functional form: returns updated copies of ``params`` and ``state``.

    ``params`` and ``grads`` map names to tensors with matching shapes.
    """
    state = state.clone()
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        if not bool(torch.all(torch.isfinite(g))):
            raise NonFiniteGradient(group)
        key = f"{group}/{name}"
        m = state.m.get(key, torch.zeros_like(p))
        v = state.v.get(key, torch.zeros_like(p))
        step = state.step.get(key, 0) + 1
        out[name], state.m[key], state.v[key] = adam_update(p, g, m, v, step, lr)
        state.step[key] = step
    return out, state


@dataclass(frozen=True)
class GatingConfig:
    """What a stage optimises and where its camera/body gradients may come from."""

    human: bool = True
    background: bool = True
    camera: bool = False
    theta: bool = False
    beta: bool = False
    net: bool = False
    routed: bool = False  # camera <- background render only, body <- human render only
    background_loss: bool = False
    human_loss: bool = False

    def groups(self) -> tuple:
        out = []
        if self.background:
            out += ["bg_means", "bg_opacity", "bg_scales", "bg_color", "bg_rotation"]
        if self.human:
            out += ["human_means", "human_attributes"]
        for flag, name in ((self.net, "net"), (self.camera, "camera"), (self.theta, "theta"), (self.beta, "beta")):
            if flag:
                out.append(name)
        return tuple(out)


WARMUP_GATE = GatingConfig()
INDEPENDENT_GATE = GatingConfig(camera=True, theta=True, net=True, routed=True, background_loss=True, human_loss=True)
JOINT_GATE = GatingConfig(camera=True, theta=True, beta=True, net=True)


@dataclass(frozen=True)
class StageSchedule:
    warmup: int = 5000
    independent: int = 5000
    joint: int = 5000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    final_ratio: float = 0.1
    gates: tuple = (WARMUP_GATE, INDEPENDENT_GATE, JOINT_GATE)

    def __post_init__(self):
        if min(self.warmup, self.independent, self.joint) < 0:
            raise ValueError("stage lengths must be >= 0")
        missing = set(GROUPS) - set(self.lr)
        if missing:
            raise ValueError(f"missing learning rates for {sorted(missing)}")
        for k, v in self.lr.items():
            if k not in GROUPS:
                raise ValueError(f"unknown parameter group {k!r}")
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"learning rate for {k} must be positive, got {v}")
        if not 0 < self.final_ratio <= 1:
            raise ValueError(f"final_ratio must be in (0, 1], got {self.final_ratio}")

    @property
    def total(self) -> int:
        return self.warmup + self.independent + self.joint

    @property
    def boundaries(self) -> tuple:
        """First iteration of each stage."""
        return (0, self.warmup, self.warmup + self.independent)

    def with_gates(self, **changes) -> StageSchedule:
        """Apply the same gating overrides to every stage."""
        return replace(self, gates=tuple(replace(g, **changes) for g in self.gates))


def stage_of(schedule: StageSchedule, it: int):
    """``(stage name, GatingConfig)`` for iteration ``it``."""
    if not 0 <= it < schedule.total:
        raise ValueError(f"iteration {it} outside the budget [0, {schedule.total})")
    b = schedule.boundaries
    idx = 2 if it >= b[2] else 1 if it >= b[1] else 0
    return STAGES[idx], schedule.gates[idx]


def lr_at(schedule: StageSchedule, group: str, it: int) -> float:
    """Base rate before the joint stage, then cosine decay to ``final_ratio`` of it.

    ``it == schedule.total`` is accepted and gives the decay endpoint.
    """
    if group not in schedule.lr:
        raise KeyError(f"unknown parameter group {group!r}")
    if it < 0:
        raise ValueError(f"iteration must be >= 0, got {it}")
    base = schedule.lr[group]
    start = schedule.boundaries[2]
    if it <= start or schedule.joint == 0:
        return base
    u = min((it - start) / schedule.joint, 1.0)
    r = schedule.final_ratio
    return r * base + (1.0 - r) * base * (1.0 + math.cos(math.pi * u)) / 2.0
