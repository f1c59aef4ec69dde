"""Staged joint optimisation of Gaussians, cameras, body pose and dynamics."""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .body import BodyParams
from .dynamics import TemporalNet, TemporalNetConfig
from .gaussians import GaussianSet
from .losses import (TERMS, LossWeights, NearestVertex, background_loss, dynamics_loss, human_loss, lbs_loss,
                     mask_mse, render_terms, total_loss)
from .optim import Adam, AdamState, NonFiniteGradient, StageSchedule, lr_at, stage_of
from .render import FramePose, pose_human, render_composite
from .scene import SceneBundle, frame_time

LOG_COLUMNS = ("iter", "stage") + TERMS + ("total", "psnr")


@dataclass(frozen=True)
class TrainConfig:
    schedule: StageSchedule = field(default_factory=StageSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    net: TemporalNetConfig = field(default_factory=TemporalNetConfig)
    seed: int = 0
    disable_dynamics: bool = False
    disable_synergistic: bool = False
    eval_every: int = 100
    snapshot_every: int = 100

    def effective_schedule(self) -> StageSchedule:
        s = self.schedule
        if self.disable_synergistic:
            s = s.with_gates(camera=False, theta=False, beta=False)
        if self.disable_dynamics:
            s = s.with_gates(net=False)
        return s


@dataclass
class ModelState:
    human: GaussianSet
    background: GaussianSet
    net: TemporalNet
    corrections: torch.Tensor  # [T, 6] camera corrections, axis-angle then translation
    body: BodyParams
    iteration: int = 0

    def clone(self) -> ModelState:
        net = copy.deepcopy(self.net)
        return ModelState(self.human.clone(), self.background.clone(), net, self.corrections.detach().clone(),
                          self.body.clone(), self.iteration)


def init_state(scene: SceneBundle, config: TrainConfig) -> ModelState:
    return ModelState(
        human=scene.init_human.clone(),
        background=scene.init_background.clone(),
        net=TemporalNet(config.net),
        corrections=torch.zeros(scene.frames, 6, dtype=torch.float64),
        body=scene.init_body.clone(),
    )


def param_groups(state: ModelState) -> dict:
    h, b = state.human, state.background
    return {
        "bg_means": [b.means],
        "bg_opacity": [b.opacity_logits],
        "bg_scales": [b.log_scales],
        "bg_color": [b.sh],
        "bg_rotation": [b.quats],
        "human_means": [h.means],
        "human_attributes": [h.quats, h.log_scales, h.opacity_logits, h.sh, h.lbs_logits],
        "net": list(state.net.parameters()),
        "camera": [state.corrections],
        "theta": [state.body.theta, state.body.trans],
        "beta": [state.body.beta],
    }


ROWWISE = ("camera", "theta")


class GradientTap:
    """Records, per iteration, which render path sent gradient to a parameter."""

    def __init__(self):
        self.current: dict = {}

    def reset(self):
        self.current = {}

    def watch(self, param: str, path: str, x: torch.Tensor) -> torch.Tensor:
        if not x.requires_grad:
            return x
        y = x.clone()

        def hook(g):
            key = (param, path)
            self.current[key] = self.current.get(key, 0.0) + float(g.abs().sum())

        y.register_hook(hook)
        return y

    def paths(self, param: str) -> set:
        return {p for (q, p), v in self.current.items() if q == param and v > 0}


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, reason: str, snapshot):
        super().__init__(f"training diverged at iteration {iteration}: {reason}; "
                         f"last good state is from iteration {snapshot[0].iteration}")
        self.iteration = iteration
        self.snapshot = snapshot  # (ModelState, AdamState)


def frame_order(seed: int, train_frames, it: int) -> int:
    """Frame for iteration ``it``: a fresh seeded shuffle every epoch."""
    n = len(train_frames)
    epoch, pos = divmod(it, n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return int(train_frames[perm[pos]])


def eval_frame(scene: SceneBundle) -> int:
    train, val, test = scene.split()
    return int(val[0]) if len(val) else int(test[0]) if len(test) else int(train[0])


class Trainer:
    def __init__(self, scene: SceneBundle, config: TrainConfig | None = None, state: ModelState | None = None,
                 adam_state: AdamState | None = None):
        self.scene = scene
        self.config = config = config or TrainConfig()
        self.schedule = config.effective_schedule()
        self.state = state or init_state(scene, config)
        for ps in param_groups(self.state).values():
            for p in ps:
                p.requires_grad_(True)
        self.adam = Adam(param_groups(self.state), rowwise=ROWWISE, state=adam_state)
        self.train_frames = scene.split()[0]
        self.anchor = NearestVertex(scene.skeleton.vertices)
        self.tap = GradientTap()
        self.log: list = []
        self.callback = None
        self._snapshot = (self.state.clone(), self.adam.state.clone())

    # ------------------------------------------------------------------
    def losses(self, frame: int, gate, dynamics: bool):
        st, scene = self.state, self.scene
        tap = self.tap
        image = scene.images[frame]
        mask = scene.masks[frame]
        camera = scene.camera(frame)
        t = frame_time(frame, scene.frames)
        body = st.body

        corr = st.corrections[frame] if gate.camera else st.corrections[frame].detach()
        theta = body.theta[frame] if gate.theta else body.theta[frame].detach()
        trans = body.trans[frame] if gate.theta else body.trans[frame].detach()
        beta = body.beta if gate.beta else body.beta.detach()
        live = FramePose(theta, trans, beta)
        fixed = live.detach() if gate.routed else live
        corr_fixed = corr.detach() if gate.routed else corr

        residuals = None
        if dynamics:
            with torch.set_grad_enabled(gate.net):
                residuals = st.net(st.human.means, t)

        def posed(pose, path):
            pose = FramePose(tap.watch("theta", path, pose.theta), pose.trans, pose.beta)
            return pose_human(st.human, scene.skeleton, pose, dynamics=dynamics, residuals=residuals)

        args = (st.human, st.background, scene.skeleton)
        full, _ = render_composite(*args, fixed, None, camera, t, "full",
                                   correction=tap.watch("camera", "full", corr_fixed),
                                   posed=posed(fixed, "full"))
        hum, _ = render_composite(*args, live, None, camera, t, "human",
                                  correction=tap.watch("camera", "human", corr_fixed),
                                  posed=posed(live, "human"))
        terms = render_terms(image, full.rgb, self.config.weights)
        terms["mask"] = mask_mse(hum.alpha, mask)
        terms["lbs"] = lbs_loss(st.human.lbs_weights(), st.human.lbs_init)
        terms["canonical"] = self.anchor(st.human.means)
        if dynamics and gate.net:
            terms["dyn"] = dynamics_loss(*residuals)
        if gate.background_loss:
            bg, _ = render_composite(*args, live, None, camera, t, "background_only",
                                     correction=tap.watch("camera", "background", corr))
            terms["background"] = background_loss(image, bg.rgb, mask)
        if gate.human_loss:
            terms["human"] = human_loss(image, hum.rgb, mask, hum.alpha)
        return total_loss(terms, self.config.weights)

    def step(self) -> dict:
        it = self.state.iteration
        stage, gate = stage_of(self.schedule, it)
        frame = frame_order(self.config.seed, self.train_frames, it)
        dynamics = not self.config.disable_dynamics
        self.tap.reset()
        self.adam.zero_grad()
        report = self.losses(frame, gate, dynamics)
        if not torch.isfinite(report.total):
            self._rollback()
            raise TrainingDiverged(it, "non-finite loss", self._snapshot)
        report.total.backward()
        if self.callback is not None:
            self.callback(it, stage, self)
        try:
            for group in gate.groups():
                self.adam.step_group(group, lr_at(self.schedule, group, it))
        except NonFiniteGradient as err:
            self._rollback()
            raise TrainingDiverged(it, str(err), self._snapshot) from err
        self.state.iteration = it + 1
        rec = {"iter": it, "stage": stage, **report.values(), "psnr": float("nan")}
        last = it + 1 == self.schedule.total
        if self.config.eval_every and ((it + 1) % self.config.eval_every == 0 or last):
            rec["psnr"] = self.eval_psnr()
        if self.config.snapshot_every and (it + 1) % self.config.snapshot_every == 0:
            self._snapshot = (self.state.clone(), self.adam.state.clone())
        self.log.append(rec)
        return rec

    def _rollback(self):
        good, adam = self._snapshot
        self.state = good.clone()
        self.adam = Adam(param_groups(self.state), rowwise=ROWWISE, state=adam.clone())

    def eval_psnr(self) -> float:
        from .harness import evaluate

        return evaluate(self.scene, self.state, [eval_frame(self.scene)],
                        dynamics=not self.config.disable_dynamics)["psnr"]

    def run(self, iters: int | None = None, callback=None) -> list:
        """Run ``iters`` more iterations (default: to the end of the schedule)."""
        self.callback = callback
        end = self.schedule.total if iters is None else min(self.state.iteration + iters, self.schedule.total)
        while self.state.iteration < end:
            self.step()
        self.callback = None
        return self.log


@dataclass
class TrainResult:
    state: ModelState
    adam: AdamState
    log: list


def train(scene: SceneBundle, config: TrainConfig | None = None, iters: int | None = None,
          callback=None) -> TrainResult:
    trainer = Trainer(scene, config)
    trainer.run(iters, callback)
    return TrainResult(trainer.state, trainer.adam.state, trainer.log)


def format_log(log: list) -> str:
    """Tab-separated metrics with a header row."""
    buf = io.StringIO()
    buf.write("\t".join(LOG_COLUMNS) + "\n")
    for rec in log:
        row = [str(rec["iter"]), rec["stage"]] + [repr(float(rec[k])) for k in LOG_COLUMNS[2:]]
        buf.write("\t".join(row) + "\n")
    return buf.getvalue()


def parse_log(text: str) -> list:
    lines = text.strip("\n").split("\n")
    header = lines[0].split("\t")
    if tuple(header) != LOG_COLUMNS:
        raise ValueError(f"unexpected metrics header {header}")
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        rec = {"iter": int(vals[0]), "stage": vals[1]}
        rec.update({k: float(v) for k, v in zip(LOG_COLUMNS[2:], vals[2:])})
        out.append(rec)
    return out


def with_schedule(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, schedule=replace(config.schedule, **kw))
